//! Top-2 singular projection of embedding tables.
//!
//! The right singular vectors of E (rows = nodes, cols = features) are
//! eigenvectors of the small Gram matrix G = E^T E (d x d), so power
//! iteration with one deflation step recovers the top two directions
//! without ever forming anything sized by the node count. Coordinates
//! are E * [v1 v2]. Sign convention: the first entry of each direction
//! with magnitude above 1e-12 is made positive, so output is unique even
//! under sign flips of the iteration.

use crate::error::{CoreError, Result};
use crate::num::tensor::{self, Tensor};

#[derive(Debug, Clone)]
pub struct Projection {
    /// (rows of input) x 2 coordinates in the top singular plane.
    pub coords: Tensor,
    /// Top two eigenvalues of E^T E (squared singular values), descending.
    pub spectrum: [f64; 2],
    pub iterations: [usize; 2],
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SvdConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SvdConfig {
    fn default() -> Self {
        SvdConfig {
            max_iters: 500,
            tol: 1e-12,
        }
    }
}

fn gram(e: &Tensor) -> Tensor {
    tensor::matmul_tn(e, e)
}

fn mat_vec(g: &Tensor, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut out = vec![0.0; d];
    for i in 0..d {
        let row = g.row(i);
        let mut s = 0.0;
        for j in 0..d {
            s += row[j] * v[j];
        }
        out[i] = s;
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

fn fix_sign(v: &mut [f64]) {
    for &x in v.iter() {
        if x.abs() > 1e-12 {
            if x < 0.0 {
                v.iter_mut().for_each(|y| *y = -*y);
            }
            return;
        }
    }
}

/// Deterministic starting vector: e_k rotated through the basis won't
/// all be orthogonal to the dominant eigenvector, so take a fixed dense
/// start instead of a random one.
fn start_vector(d: usize, phase: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d)
        .map(|j| 1.0 + 0.1 * ((j + 1 + phase) as f64).sin())
        .collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Remove the `prev` component from `w`. Two passes: after a single pass
/// the rounding-level residual along `prev` is re-amplified by the dominant
/// eigenvalue every iteration and grows geometrically.
fn project_out(w: &mut [f64], prev: &[f64]) {
    for _ in 0..2 {
        let c = dot(w, prev);
        for (x, &p) in w.iter_mut().zip(prev.iter()) {
            *x -= c * p;
        }
    }
}

fn power_iterate(
    g: &Tensor,
    orthogonal_to: Option<&[f64]>,
    cfg: &SvdConfig,
    phase: usize,
) -> (Vec<f64>, f64, usize, bool) {
    let d = g.dims()[0];
    // Below this scale the remaining spectrum is numerically zero relative
    // to the matrix; the trace bounds the dominant eigenvalue from above.
    let trace: f64 = (0..d).map(|i| g.at2(i, i)).sum();
    let floor = 1e-12 * trace;
    let mut v = start_vector(d, phase);
    if let Some(prev) = orthogonal_to {
        project_out(&mut v, prev);
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
    let mut lambda = 0.0;
    for it in 1..=cfg.max_iters {
        let mut w = mat_vec(g, &v);
        if let Some(prev) = orthogonal_to {
            project_out(&mut w, prev);
        }
        let n = norm(&w);
        if n <= floor {
            // remaining directions carry no signal (rank-deficient input):
            // keep the current basis vector with a zero eigenvalue.
            return (v, 0.0, it, true);
        }
        w.iter_mut().for_each(|x| *x /= n);
        let delta: f64 = w
            .iter()
            .zip(v.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max);
        // eigenvalue estimate via Rayleigh quotient
        let gv = mat_vec(g, &w);
        lambda = dot(&w, &gv);
        v = w;
        // delta near 2 means sign oscillation; converged when the
        // direction stabilizes either way
        if delta < cfg.tol || (2.0 - delta).abs() < cfg.tol {
            return (v, lambda, it, true);
        }
    }
    (v, lambda, cfg.max_iters, false)
}

/// Project the rows of `e` onto their top-2 right singular plane.
pub fn top2_svd_project(e: &Tensor, cfg: &SvdConfig) -> Result<Projection> {
    if e.rank() != 2 {
        return Err(CoreError::Precondition(format!(
            "projection input must be rank 2, got {:?}",
            e.dims()
        )));
    }
    let d = e.dims()[1];
    if d < 2 {
        return Err(CoreError::Precondition(format!(
            "projection needs at least 2 feature columns, got {d}"
        )));
    }
    if !e.is_finite() {
        return Err(CoreError::NonFinite {
            what: "projection input",
            detail: "embedding matrix".into(),
        });
    }
    let g = gram(e);
    let (mut v1, l1, it1, c1) = power_iterate(&g, None, cfg, 0);
    let (mut v2, l2, it2, c2) = power_iterate(&g, Some(&v1), cfg, 1);
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    let rows = e.dims()[0];
    let mut coords = Tensor::zeros(&[rows, 2]);
    for r in 0..rows {
        let row = e.row(r);
        coords.row_mut(r)[0] = dot(row, &v1);
        coords.row_mut(r)[1] = dot(row, &v2);
    }
    Ok(Projection {
        coords,
        spectrum: [l1, l2],
        iterations: [it1, it2],
        converged: c1 && c2,
    })
}
