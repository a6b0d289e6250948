//! Scaling benchmark comparing factored low-rank propagation against a
//! materialized dense-matrix baseline.
//!
//! Both paths compute the same perturbed propagation `(A + alpha*B*C^T) * E`.
//! The factored path keeps the perturbation in its rank-d' factors, so its
//! cost grows linearly in the node count for fixed fill; the dense baseline
//! materializes the full n-by-n matrix and scales quadratically. The report
//! carries measured log-log slopes so callers can check both regimes.

use std::hint::black_box;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::agcl::{perturbed_propagate, LayerCombine};
use crate::error::{CoreError, Result};
use crate::graph::{GraphBuildConfig, SparseGraph};
use crate::num::tensor::{self, Tensor};
use crate::rng::{derive, Stream};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Node counts to measure; at least four, strictly ascending.
    pub sizes: Vec<usize>,
    pub d: usize,
    pub d_prime: usize,
    /// Nonzeros per row of the random graph, held fixed across sizes.
    pub nnz_per_row: usize,
    /// Timed repetitions per point (one untimed warmup precedes them).
    pub reps: usize,
    pub layers: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Dense points whose working set would exceed this are skipped.
    pub dense_memory_budget: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![1000, 2000, 4000, 8000],
            d: 32,
            d_prime: 16,
            nnz_per_row: 16,
            reps: 5,
            layers: 1,
            alpha: 0.05,
            seed: 42,
            dense_memory_budget: 3_000_000_000,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 4 {
            return Err(CoreError::InvalidConfig(format!(
                "need at least 4 sizes, got {}",
                self.sizes.len()
            )));
        }
        if !self.sizes.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::InvalidConfig(
                "sizes must be strictly ascending".into(),
            ));
        }
        if self.sizes[0] == 0 {
            return Err(CoreError::InvalidConfig("sizes must be positive".into()));
        }
        if self.d == 0 || self.d_prime == 0 || self.nnz_per_row == 0 {
            return Err(CoreError::InvalidConfig(
                "d, d_prime and nnz_per_row must be positive".into(),
            ));
        }
        if self.reps == 0 || self.layers == 0 {
            return Err(CoreError::InvalidConfig(
                "reps and layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    pub size: usize,
    pub factored_secs: f64,
    /// Absent when the dense working set would not fit the memory budget.
    pub dense_secs: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    /// Least-squares slope of ln(time) against ln(size).
    pub factored_slope: f64,
    /// None when fewer than two dense points were measured.
    pub dense_slope: Option<f64>,
    /// Factored time ratio after doubling d', measured at the largest size.
    pub dprime_doubling_ratio: f64,
    pub d: usize,
    pub d_prime: usize,
    pub nnz_per_row: usize,
    pub reps: usize,
    pub layers: usize,
}

/// Random graph with exactly `nnz_per_row` entries per row and uniform(0,1)
/// weights; structure only matters for arithmetic cost, not semantics.
pub fn random_sparse_graph(n: usize, nnz_per_row: usize, rng: &mut impl Rng) -> SparseGraph {
    assert!(nnz_per_row <= n, "cannot place {nnz_per_row} entries in a row of {n}");
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::with_capacity(n * nnz_per_row);
    let mut values = Vec::with_capacity(n * nnz_per_row);
    row_offsets.push(0u64);
    for _ in 0..n {
        let mut cols: Vec<usize> = rand::seq::index::sample(rng, n, nnz_per_row).into_vec();
        cols.sort_unstable();
        for c in cols {
            col_indices.push(c as u32);
            values.push(rng.gen::<f64>());
        }
        row_offsets.push(col_indices.len() as u64);
    }
    SparseGraph {
        n,
        row_offsets,
        col_indices,
        values,
        config: GraphBuildConfig::default(),
    }
}

/// Bytes needed to hold the materialized matrix plus one n-by-n temporary.
fn dense_bytes(n: usize) -> usize {
    2 * n * n * 8
}

/// Dense baseline: materialize `A + alpha*B*C^T` in full, then propagate.
fn dense_propagate(
    graph: &SparseGraph,
    w_us: &Tensor,
    w_v: &Tensor,
    alpha: f64,
    e0: &Tensor,
    layers: usize,
    combine: LayerCombine,
) -> Tensor {
    let b = graph.mul_dense(w_us);
    let c = graph.mul_dense(w_v);
    let mut a_hat = graph.to_dense();
    let low = tensor::matmul_nt(&b, &c);
    for (dst, src) in a_hat.data_mut().iter_mut().zip(low.data()) {
        *dst += alpha * src;
    }
    drop(low);
    let mut acc = e0.clone();
    let mut cur = e0.clone();
    for _ in 0..layers {
        cur = tensor::matmul(&a_hat, &cur);
        acc = tensor::add(&acc, &cur);
    }
    tensor::scale(&acc, combine.factor(layers))
}

fn time_mean(reps: usize, mut run: impl FnMut() -> Tensor) -> f64 {
    black_box(run());
    let mut total = 0.0;
    for _ in 0..reps {
        let start = Instant::now();
        black_box(run());
        total += start.elapsed().as_secs_f64();
    }
    total / reps as f64
}

/// Least-squares slope of ln(y) on ln(x).
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    assert!(points.len() >= 2, "slope needs at least two points");
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

pub fn bench_svd(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut points = Vec::new();
    let mut doubling_ratio = f64::NAN;
    for (i, &n) in cfg.sizes.iter().enumerate() {
        let mut rng = derive(cfg.seed, Stream::Bench, n as u64);
        let graph = random_sparse_graph(n, cfg.nnz_per_row.min(n), &mut rng);
        let w_us = Tensor::randn(&[n, cfg.d_prime], 0.1, &mut rng);
        let w_v = Tensor::randn(&[n, cfg.d_prime], 0.1, &mut rng);
        let e0 = Tensor::randn(&[n, cfg.d], 0.1, &mut rng);
        let factored_secs = time_mean(cfg.reps, || {
            perturbed_propagate(
                &graph,
                &w_us,
                &w_v,
                cfg.alpha,
                &e0,
                cfg.layers,
                LayerCombine::Mean,
            )
        });
        let dense_secs = if dense_bytes(n) <= cfg.dense_memory_budget {
            Some(time_mean(cfg.reps, || {
                dense_propagate(
                    &graph,
                    &w_us,
                    &w_v,
                    cfg.alpha,
                    &e0,
                    cfg.layers,
                    LayerCombine::Mean,
                )
            }))
        } else {
            None
        };
        if i + 1 == cfg.sizes.len() {
            let wide_us = Tensor::randn(&[n, 2 * cfg.d_prime], 0.1, &mut rng);
            let wide_v = Tensor::randn(&[n, 2 * cfg.d_prime], 0.1, &mut rng);
            let wide_secs = time_mean(cfg.reps, || {
                perturbed_propagate(
                    &graph,
                    &wide_us,
                    &wide_v,
                    cfg.alpha,
                    &e0,
                    cfg.layers,
                    LayerCombine::Mean,
                )
            });
            doubling_ratio = wide_secs / factored_secs;
        }
        points.push(BenchPoint {
            size: n,
            factored_secs,
            dense_secs,
        });
    }
    let factored: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.size as f64, p.factored_secs))
        .collect();
    let dense: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| p.dense_secs.map(|t| (p.size as f64, t)))
        .collect();
    Ok(BenchReport {
        factored_slope: log_log_slope(&factored),
        dense_slope: if dense.len() >= 2 {
            Some(log_log_slope(&dense))
        } else {
            None
        },
        dprime_doubling_ratio: doubling_ratio,
        points,
        d: cfg.d,
        d_prime: cfg.d_prime,
        nnz_per_row: cfg.nnz_per_row,
        reps: cfg.reps,
        layers: cfg.layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let mut cfg = BenchConfig {
            sizes: vec![100, 200, 400],
            ..BenchConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.sizes = vec![100, 200, 200, 400];
        assert!(cfg.validate().is_err());
        cfg.sizes = vec![100, 200, 400, 800];
        assert!(cfg.validate().is_ok());
        cfg.reps = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn random_graph_has_fixed_fill_and_valid_columns() {
        let mut rng = derive(3, Stream::Bench, 0);
        let g = random_sparse_graph(50, 7, &mut rng);
        assert_eq!(g.n, 50);
        assert_eq!(g.row_offsets.len(), 51);
        for r in 0..50 {
            let (lo, hi) = (g.row_offsets[r] as usize, g.row_offsets[r + 1] as usize);
            assert_eq!(hi - lo, 7);
            let cols = &g.col_indices[lo..hi];
            assert!(cols.windows(2).all(|w| w[0] < w[1]), "row {r} not sorted");
            assert!(cols.iter().all(|&c| (c as usize) < 50));
        }
    }

    #[test]
    fn dense_baseline_matches_factored_result() {
        let mut rng = derive(9, Stream::Bench, 1);
        let g = random_sparse_graph(30, 5, &mut rng);
        let w_us = Tensor::randn(&[30, 4], 0.2, &mut rng);
        let w_v = Tensor::randn(&[30, 4], 0.2, &mut rng);
        let e0 = Tensor::randn(&[30, 6], 0.2, &mut rng);
        let fast = perturbed_propagate(&g, &w_us, &w_v, 0.1, &e0, 2, LayerCombine::Mean);
        let slow = dense_propagate(&g, &w_us, &w_v, 0.1, &e0, 2, LayerCombine::Mean);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-9, "dense and factored disagree: {a} vs {b}");
        }
    }

    #[test]
    fn slope_recovers_planted_exponent() {
        let pts: Vec<(f64, f64)> = [1000.0, 2000.0, 4000.0, 8000.0]
            .iter()
            .map(|&x| (x, 3.0e-9 * x * x))
            .collect();
        assert!((log_log_slope(&pts) - 2.0).abs() < 1e-9);
        let lin: Vec<(f64, f64)> = pts.iter().map(|&(x, _)| (x, 5.0e-6 * x)).collect();
        assert!((log_log_slope(&lin) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn memory_budget_skips_dense_points_only() {
        let cfg = BenchConfig {
            sizes: vec![40, 60, 80, 100],
            d: 8,
            d_prime: 4,
            nnz_per_row: 6,
            reps: 1,
            dense_memory_budget: dense_bytes(60),
            ..BenchConfig::default()
        };
        let report = bench_svd(&cfg).unwrap();
        assert_eq!(report.points.len(), 4);
        assert!(report.points[0].dense_secs.is_some());
        assert!(report.points[1].dense_secs.is_some());
        assert!(report.points[2].dense_secs.is_none());
        assert!(report.points[3].dense_secs.is_none());
        assert!(report.factored_slope.is_finite());
        assert!(report.dense_slope.is_some());
        assert!(report.dprime_doubling_ratio.is_finite());
    }
}
