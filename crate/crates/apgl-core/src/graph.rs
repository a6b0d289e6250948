//! Global item transition graph.
//!
//! The graph is built from training-view co-occurrences with a sliding
//! window: every ordered pair at offset `j <= k` adds `1/j` to the edge
//! weight. The accumulator is then degree-normalized, symmetrized
//! additively, given unit self-loops for every real item, and frozen as
//! CSR. Node 0 is the padding slot and stays fully empty so that padded
//! positions contribute nothing anywhere downstream.

use std::collections::BTreeMap;

use crate::container::Container;
use crate::dataio::Dataset;
use crate::error::{CoreError, Result};
use crate::num::tensor::Tensor;

/// Fixed co-occurrence adjacency in compressed sparse row layout.
/// `n` = number of items + 1; row/col 0 is the padding node (no entries).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    pub n: usize,
    pub row_offsets: Vec<u64>,
    pub col_indices: Vec<u32>,
    pub values: Vec<f64>,
    pub config: GraphBuildConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphBuildConfig {
    /// Sliding-window size for co-occurrence accumulation.
    pub window: usize,
    pub self_loop_weight: f64,
}

impl Default for GraphBuildConfig {
    fn default() -> Self {
        GraphBuildConfig {
            window: 2,
            self_loop_weight: 1.0,
        }
    }
}

/// Directed edge-weight accumulator keyed by (src, dst).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightAccumulator {
    /// BTreeMap keeps iteration deterministic regardless of insert order.
    pub weights: BTreeMap<(u32, u32), f64>,
}

/// Sliding-window co-occurrence accumulation over training views.
/// Sequences are consumed in the order given (callers pass user-id order
/// so float accumulation is reproducible).
pub fn accumulate_cooccurrence<'a, I>(sequences: I, window: usize) -> WeightAccumulator
where
    I: IntoIterator<Item = &'a [u32]>,
{
    assert!(window >= 1, "window must be >= 1, got {window}");
    let mut acc = WeightAccumulator::default();
    for seq in sequences {
        for t in 0..seq.len() {
            let reach = window.min(seq.len() - 1 - t);
            for j in 1..=reach {
                let w = 1.0 / j as f64;
                *acc.weights.entry((seq[t], seq[t + j])).or_insert(0.0) += w;
            }
        }
    }
    acc
}

/// Weighted degree on the directed accumulator: sum of incident weights,
/// counting both in- and out-edges. A self-edge contributes its weight
/// twice (once as out, once as in).
pub fn weighted_degrees(acc: &WeightAccumulator) -> BTreeMap<u32, f64> {
    let mut deg: BTreeMap<u32, f64> = BTreeMap::new();
    for (&(src, dst), &w) in acc.weights.iter() {
        *deg.entry(src).or_insert(0.0) += w;
        *deg.entry(dst).or_insert(0.0) += w;
    }
    deg
}

/// Replace every entry w(i,j) by (1/deg(i) + 1/deg(j)) * w(i,j), with
/// degrees taken on the pre-normalization accumulator.
pub fn normalize_degrees(acc: &WeightAccumulator) -> WeightAccumulator {
    let deg = weighted_degrees(acc);
    let mut out = WeightAccumulator::default();
    for (&(src, dst), &w) in acc.weights.iter() {
        let ds = deg[&src];
        let dd = deg[&dst];
        // Zero-degree nodes cannot appear here: any stored edge gives both
        // endpoints positive degree.
        let nw = (1.0 / ds + 1.0 / dd) * w;
        out.weights.insert((src, dst), nw);
    }
    out
}

/// Symmetrize additively (A <- A + A^T), overwrite the diagonal with the
/// self-loop weight for every real item 1..=num_items, and emit CSR with
/// sorted column indices. Row 0 stays empty.
pub fn finalize_graph(
    acc: &WeightAccumulator,
    num_items: usize,
    cfg: GraphBuildConfig,
) -> SparseGraph {
    let n = num_items + 1;
    let mut sym: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for (&(src, dst), &w) in acc.weights.iter() {
        debug_assert!(src != 0 && dst != 0, "padding id in accumulator");
        *sym.entry((src, dst)).or_insert(0.0) += w;
        *sym.entry((dst, src)).or_insert(0.0) += w;
    }
    for i in 1..=num_items as u32 {
        sym.insert((i, i), cfg.self_loop_weight);
    }

    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::with_capacity(sym.len());
    let mut values = Vec::with_capacity(sym.len());
    row_offsets.push(0u64);
    let mut row = 0u32;
    for (&(src, dst), &w) in sym.iter() {
        while row < src {
            row_offsets.push(col_indices.len() as u64);
            row += 1;
        }
        col_indices.push(dst);
        values.push(w);
    }
    while (row as usize) < n {
        row_offsets.push(col_indices.len() as u64);
        row += 1;
    }
    SparseGraph {
        n,
        row_offsets,
        col_indices,
        values,
        config: cfg,
    }
}

/// Convenience: full pipeline over a dataset's training views.
pub fn build_graph(dataset: &Dataset, cfg: GraphBuildConfig) -> SparseGraph {
    let views: Vec<&[u32]> = dataset.users().map(|u| dataset.train_view(u)).collect();
    let acc = accumulate_cooccurrence(views, cfg.window);
    let norm = normalize_degrees(&acc);
    finalize_graph(&norm, dataset.num_items(), cfg)
}

impl SparseGraph {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let lo = self.row_offsets[i] as usize;
        let hi = self.row_offsets[i + 1] as usize;
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &w) in cols.iter().zip(vals.iter()) {
                if self.get(j as usize, i).to_bits() != w.to_bits() {
                    return false;
                }
            }
        }
        true
    }

    /// y = A * x for dense x of shape (n, d).
    pub fn mul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            x.dims()[0],
            self.n,
            "sparse matmul: graph has {} rows, input has shape {:?}",
            self.n,
            x.dims()
        );
        let d = x.dims()[1];
        let mut out = Tensor::zeros(&[self.n, d]);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let orow = out.row_mut(i);
            for (&c, &w) in cols.iter().zip(vals.iter()) {
                let xrow = x.row(c as usize);
                for (o, &xv) in orow.iter_mut().zip(xrow.iter()) {
                    *o += w * xv;
                }
            }
        }
        out
    }

    /// y = A^T * x. Kept separate from `mul_dense` so no code path relies
    /// on symmetry being perfect.
    pub fn mul_dense_transpose(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            x.dims()[0],
            self.n,
            "sparse matmul^T: graph has {} rows, input has shape {:?}",
            self.n,
            x.dims()
        );
        let d = x.dims()[1];
        let mut out = Tensor::zeros(&[self.n, d]);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let xrow = x.row(i).to_vec();
            for (&c, &w) in cols.iter().zip(vals.iter()) {
                let orow = out.row_mut(c as usize);
                for (o, &xv) in orow.iter_mut().zip(xrow.iter()) {
                    *o += w * xv;
                }
            }
        }
        out
    }

    /// Dense copy, mostly for oracles and the scaling benchmark.
    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.n, self.n]);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let orow = out.row_mut(i);
            for (&c, &w) in cols.iter().zip(vals.iter()) {
                orow[c as usize] = w;
            }
        }
        out
    }

    /// Gather the sub-block A[ids x ids] into a dense (N,N) matrix.
    /// Ids outside 1..n (padding 0, mask tokens) produce zero rows/cols.
    pub fn gather_subblock(&self, ids: &[u32]) -> Tensor {
        let n_seq = ids.len();
        let mut out = Tensor::zeros(&[n_seq, n_seq]);
        // position(s) of each id within the sequence, for CSR row scans
        let mut pos_of: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (q, &id) in ids.iter().enumerate() {
            if id != 0 && (id as usize) < self.n {
                pos_of.entry(id).or_default().push(q);
            }
        }
        for (p, &id) in ids.iter().enumerate() {
            if id == 0 || id as usize >= self.n {
                continue;
            }
            let (cols, vals) = self.row(id as usize);
            let orow = out.row_mut(p);
            for (&c, &w) in cols.iter().zip(vals.iter()) {
                if let Some(qs) = pos_of.get(&c) {
                    for &q in qs {
                        orow[q] = w;
                    }
                }
            }
        }
        out
    }

    /// Packs the CSR arrays and build settings into a container.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.put_u64_scalar("graph/n", self.n as u64);
        c.put_u64_scalar("graph/window", self.config.window as u64);
        c.put_f64_scalar("graph/self_loop_weight", self.config.self_loop_weight);
        c.put_u64s(
            "graph/row_offsets",
            &[self.row_offsets.len()],
            self.row_offsets.clone(),
        );
        c.put_u32s(
            "graph/col_indices",
            &[self.col_indices.len()],
            self.col_indices.clone(),
        );
        c.put_tensor(
            "graph/values",
            &Tensor::from_vec(&[self.values.len()], self.values.clone()),
        );
        c
    }

    /// Rebuilds a graph from [`SparseGraph::to_container`] output, checking
    /// the CSR arrays for structural consistency.
    pub fn from_container(c: &Container) -> Result<SparseGraph> {
        let n = c.u64_scalar("graph/n")? as usize;
        let config = GraphBuildConfig {
            window: c.u64_scalar("graph/window")? as usize,
            self_loop_weight: c.f64_scalar("graph/self_loop_weight")?,
        };
        let row_offsets = c.u64s("graph/row_offsets")?.to_vec();
        let col_indices = c.u32s("graph/col_indices")?.to_vec();
        let values = c.tensor("graph/values")?.data().to_vec();
        if row_offsets.len() != n + 1
            || row_offsets.first() != Some(&0)
            || row_offsets.last().copied() != Some(col_indices.len() as u64)
            || col_indices.len() != values.len()
            || row_offsets.windows(2).any(|w| w[0] > w[1])
            || col_indices.iter().any(|&col| col as usize >= n)
        {
            return Err(CoreError::Container(format!(
                "inconsistent graph arrays: n={n}, {} offsets, {} columns, {} values",
                row_offsets.len(),
                col_indices.len(),
                values.len()
            )));
        }
        Ok(SparseGraph {
            n,
            row_offsets,
            col_indices,
            values,
            config,
        })
    }
}

/// Precomputed perturbation factors B = A*W_US and C = A*W_V. Row 0 of
/// both is structurally zero because graph row 0 is empty.
#[derive(Debug, Clone)]
pub struct PerturbationCache {
    pub b: Tensor,
    pub c: Tensor,
    pub alpha: f64,
}

impl PerturbationCache {
    pub fn new(graph: &SparseGraph, w_us: &Tensor, w_v: &Tensor, alpha: f64) -> Self {
        PerturbationCache {
            b: graph.mul_dense(w_us),
            c: graph.mul_dense(w_v),
            alpha,
        }
    }
}

/// Which adjacency the per-sequence sub-graph is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SubgraphSource {
    Original,
    #[default]
    Refined,
}

/// Extract the (N,N) sub-graph for a padded sequence. For the refined
/// source the low-rank part is assembled from the cached factors as
/// alpha * B[ids] * C[ids]^T without materializing the full perturbation.
pub fn extract_subgraph(
    graph: &SparseGraph,
    ids: &[u32],
    source: SubgraphSource,
    perturbation: Option<&PerturbationCache>,
) -> Tensor {
    let mut sub = graph.gather_subblock(ids);
    if source == SubgraphSource::Original {
        return sub;
    }
    let cache = perturbation.expect("refined sub-graph requested without perturbation factors");
    let dprime = cache.b.dims()[1];
    let n_seq = ids.len();
    let mut brows = Tensor::zeros(&[n_seq, dprime]);
    let mut crows = Tensor::zeros(&[n_seq, dprime]);
    for (p, &id) in ids.iter().enumerate() {
        let r = if (id as usize) < graph.n { id as usize } else { 0 };
        brows.row_mut(p).copy_from_slice(cache.b.row(r));
        crows.row_mut(p).copy_from_slice(cache.c.row(r));
    }
    for p in 0..n_seq {
        if ids[p] == 0 || ids[p] as usize >= graph.n {
            continue; // padding/mask rows stay zero
        }
        let br = brows.row(p).to_vec();
        let srow = sub.row_mut(p);
        for q in 0..n_seq {
            if ids[q] == 0 || ids[q] as usize >= graph.n {
                continue;
            }
            let cr = crows.row(q);
            let mut s = 0.0;
            for (&x, &y) in br.iter().zip(cr.iter()) {
                s += x * y;
            }
            srow[q] += cache.alpha * s;
        }
    }
    sub
}
