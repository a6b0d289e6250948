//! Adaptive global collaborative learner.
//!
//! LightGCN-style propagation over the fixed graph, the low-rank
//! perturbed variant over the refined graph A + alpha*(A W_US)(A W_V)^T
//! (always in factored order, never materializing a node-by-node
//! matrix), and the InfoNCE loss aligning original and refined graph
//! representations with a cosine critic.

use std::rc::Rc;
use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::graph::SparseGraph;
use crate::num::tape::{NodeId, Tape};
use crate::num::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerCombine {
    /// Average of the L+1 layer outputs (E0 included).
    #[default]
    Mean,
    /// Same sum scaled by 1/L, matching the published prefactor.
    PaperLiteral,
}

impl LayerCombine {
    pub fn factor(self, layers: usize) -> f64 {
        match self {
            LayerCombine::Mean => 1.0 / (layers + 1) as f64,
            LayerCombine::PaperLiteral => {
                assert!(layers >= 1, "literal combine needs at least one layer");
                1.0 / layers as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GraphEncoderConfig {
    pub layers: usize,
    pub combine: LayerCombine,
    pub tau: f64,
}

impl Default for GraphEncoderConfig {
    fn default() -> Self {
        GraphEncoderConfig {
            layers: 2,
            combine: LayerCombine::Mean,
            tau: 0.2,
        }
    }
}

fn check_rows(graph: &SparseGraph, e0: &Tensor) {
    assert_eq!(
        graph.n,
        e0.dims()[0],
        "graph has {} nodes, embeddings have shape {:?}",
        graph.n,
        e0.dims()
    );
}

/// E^(l) = A * E^(l-1); output = layer sum scaled per the combine mode.
pub fn lightgcn_propagate(
    graph: &SparseGraph,
    e0: &Tensor,
    layers: usize,
    combine: LayerCombine,
) -> Tensor {
    check_rows(graph, e0);
    let mut acc = e0.clone();
    let mut cur = e0.clone();
    for _ in 0..layers {
        cur = graph.mul_dense(&cur);
        acc = tensor::add(&acc, &cur);
    }
    tensor::scale(&acc, combine.factor(layers))
}

/// Per layer: A*E + alpha * B * (C^T * E) with B = A*W_US, C = A*W_V,
/// computing the inner d'-by-d product first.
pub fn perturbed_propagate(
    graph: &SparseGraph,
    w_us: &Tensor,
    w_v: &Tensor,
    alpha: f64,
    e0: &Tensor,
    layers: usize,
    combine: LayerCombine,
) -> Tensor {
    check_rows(graph, e0);
    let b = graph.mul_dense(w_us);
    let c = graph.mul_dense(w_v);
    let mut acc = e0.clone();
    let mut cur = e0.clone();
    for _ in 0..layers {
        let base = graph.mul_dense(&cur);
        let inner = tensor::matmul_tn(&c, &cur);
        let lowrank = tensor::matmul(&b, &inner);
        cur = tensor::add_scaled(&base, &lowrank, alpha);
        acc = tensor::add(&acc, &cur);
    }
    tensor::scale(&acc, combine.factor(layers))
}

/// Tape version of `lightgcn_propagate` for training.
pub fn lightgcn_propagate_tape(
    tape: &mut Tape,
    graph: &Arc<SparseGraph>,
    e0: NodeId,
    layers: usize,
    combine: LayerCombine,
) -> NodeId {
    check_rows(graph, tape.value(e0));
    let mut acc = e0;
    let mut cur = e0;
    for _ in 0..layers {
        cur = tape.sp_matmul(graph.clone(), cur);
        acc = tape.add(acc, cur);
    }
    tape.scale(acc, combine.factor(layers))
}

/// Tape version of `perturbed_propagate`; takes the shared factor nodes
/// B = A*W_US and C = A*W_V so gradients reach the perturbation.
pub fn perturbed_propagate_tape(
    tape: &mut Tape,
    graph: &Arc<SparseGraph>,
    b: NodeId,
    c: NodeId,
    alpha: f64,
    e0: NodeId,
    layers: usize,
    combine: LayerCombine,
) -> NodeId {
    check_rows(graph, tape.value(e0));
    let mut acc = e0;
    let mut cur = e0;
    for _ in 0..layers {
        let base = tape.sp_matmul(graph.clone(), cur);
        let inner = tape.matmul_tn(c, cur);
        let lowrank = tape.matmul(b, inner);
        cur = tape.add_scaled(base, lowrank, alpha);
        acc = tape.add(acc, cur);
    }
    tape.scale(acc, combine.factor(layers))
}

/// InfoNCE over batch items: anchors are rows of the original-graph
/// representation, candidates rows of the refined one, cosine critic at
/// temperature tau, in-batch negatives, summed over anchors.
pub fn gce_loss_tape(
    tape: &mut Tape,
    original: NodeId,
    refined: NodeId,
    batch_items: &[u32],
    tau: f64,
) -> Result<NodeId> {
    if batch_items.is_empty() {
        return Err(CoreError::Precondition(
            "graph contrastive loss needs at least one batch item".into(),
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &i in batch_items {
        if i == 0 {
            return Err(CoreError::Precondition(
                "padding id in graph contrastive batch".into(),
            ));
        }
        if !seen.insert(i) {
            return Err(CoreError::Precondition(format!(
                "duplicate item {i} in graph contrastive batch"
            )));
        }
    }
    assert!(tau > 0.0, "temperature must be positive, got {tau}");
    let idx: Rc<Vec<usize>> = Rc::new(batch_items.iter().map(|&i| i as usize).collect());
    let anchors = tape.gather_rows(original, idx.clone());
    let cands = tape.gather_rows(refined, idx.clone());
    for (name, node) in [("original", anchors), ("refined", cands)] {
        let v = tape.value(node);
        for (r, &item) in batch_items.iter().enumerate() {
            let norm: f64 = v.row(r).iter().map(|&x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(CoreError::NonFinite {
                    what: "graph representation",
                    detail: format!("{name} row for item {item}"),
                });
            }
            if norm <= 0.0 {
                return Err(CoreError::ZeroNormRow {
                    row: item as usize,
                    what: format!("{name} graph representation"),
                });
            }
        }
    }
    let an = tape.row_l2_normalize(anchors);
    let cn = tape.row_l2_normalize(cands);
    let cos = tape.matmul_nt(an, cn);
    let sim = tape.scale(cos, 1.0 / tau);
    let m = batch_items.len();
    let diag_cols: Rc<Vec<usize>> = Rc::new((0..m).collect());
    let pos = tape.gather_elems(sim, diag_cols);
    let lse = tape.masked_log_sum_exp_rows(sim, Rc::new(vec![false; m * m]));
    let diff = tape.sub(lse, pos);
    Ok(tape.sum_all(diff))
}

/// Convenience value-level wrapper used by tests and diagnostics.
pub fn gce_loss(original: &Tensor, refined: &Tensor, batch_items: &[u32], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let o = tape.constant(original.clone());
    let r = tape.constant(refined.clone());
    let loss = gce_loss_tape(&mut tape, o, r, batch_items, tau)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{finalize_graph, normalize_degrees, GraphBuildConfig, WeightAccumulator};
    use crate::num::gradcheck::central_diff;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
        a.dims() == b.dims()
            && a.data()
                .iter()
                .zip(b.data().iter())
                .all(|(&x, &y)| x.to_bits() == y.to_bits())
    }

    fn random_graph(n_items: usize, rng: &mut ChaCha8Rng) -> SparseGraph {
        let mut acc = WeightAccumulator::default();
        for _ in 0..n_items * 4 {
            let a = rng.gen_range(1..=n_items as u32);
            let b = rng.gen_range(1..=n_items as u32);
            if a != b {
                *acc.weights.entry((a, b)).or_insert(0.0) += rng.gen_range(0.1..1.0);
            }
        }
        finalize_graph(&normalize_degrees(&acc), n_items, GraphBuildConfig::default())
    }

    #[test]
    fn identity_graph_single_layer_mean_returns_input() {
        // Self-loops only: A rows 1..n are exact unit diagonals, so
        // (E0 + A E0)/2 = E0 bit-for-bit on real-item rows. Row 0 is the
        // empty padding row, so its propagated value is E0[0]/2.
        let g = finalize_graph(
            &WeightAccumulator::default(),
            4,
            GraphBuildConfig::default(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let e0 = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let out = lightgcn_propagate(&g, &e0, 1, LayerCombine::Mean);
        for r in 1..5 {
            for (a, b) in out.row(r).iter().zip(e0.row(r).iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "row {r}");
            }
        }
        for (o, e) in out.row(0).iter().zip(e0.row(0).iter()) {
            assert_eq!(*o, e / 2.0);
        }
    }

    #[test]
    fn two_node_hand_example() {
        // Dense all-ones 2-node graph, E0 = I, one layer, mean combine.
        let g = SparseGraph {
            n: 2,
            row_offsets: vec![0, 2, 4],
            col_indices: vec![0, 1, 0, 1],
            values: vec![1.0, 1.0, 1.0, 1.0],
            config: GraphBuildConfig::default(),
        };
        let e0 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = lightgcn_propagate(&g, &e0, 1, LayerCombine::Mean);
        assert_eq!(out.data(), &[1.0, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn combine_modes_differ_by_the_layer_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let g = random_graph(12, &mut rng);
        let e0 = Tensor::randn(&[g.n, 4], 1.0, &mut rng);
        for layers in 1..=3 {
            let mean = lightgcn_propagate(&g, &e0, layers, LayerCombine::Mean);
            let lit = lightgcn_propagate(&g, &e0, layers, LayerCombine::PaperLiteral);
            let rescaled = tensor::scale(&mean, (layers + 1) as f64 / layers as f64);
            assert!(
                tensor::max_abs_diff(&rescaled, &lit) < 1e-12,
                "layers {layers}"
            );
        }
    }

    #[test]
    fn zero_alpha_is_bitwise_plain_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let g = random_graph(15, &mut rng);
        let e0 = Tensor::randn(&[g.n, 6], 1.0, &mut rng);
        let w_us = Tensor::randn(&[g.n, 3], 1.0, &mut rng);
        let w_v = Tensor::randn(&[g.n, 3], 1.0, &mut rng);
        let plain = lightgcn_propagate(&g, &e0, 2, LayerCombine::Mean);
        let pert = perturbed_propagate(&g, &w_us, &w_v, 0.0, &e0, 2, LayerCombine::Mean);
        assert!(bits_equal(&plain, &pert));
    }

    #[test]
    fn zero_factor_is_bitwise_plain_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let g = random_graph(15, &mut rng);
        let e0 = Tensor::randn(&[g.n, 6], 1.0, &mut rng);
        let w_us = Tensor::zeros(&[g.n, 3]);
        let w_v = Tensor::randn(&[g.n, 3], 1.0, &mut rng);
        let plain = lightgcn_propagate(&g, &e0, 2, LayerCombine::Mean);
        let pert = perturbed_propagate(&g, &w_us, &w_v, 0.05, &e0, 2, LayerCombine::Mean);
        assert!(bits_equal(&plain, &pert));
    }

    /// Dense oracle: materialize A_hat = A + alpha*(A W_US)(A W_V)^T and
    /// run plain propagation with dense matmuls.
    fn dense_oracle(
        g: &SparseGraph,
        w_us: &Tensor,
        w_v: &Tensor,
        alpha: f64,
        e0: &Tensor,
        layers: usize,
        combine: LayerCombine,
    ) -> Tensor {
        let b = g.mul_dense(w_us);
        let c = g.mul_dense(w_v);
        let pert = tensor::matmul_nt(&b, &c);
        let a_hat = tensor::add_scaled(&g.to_dense(), &pert, alpha);
        let mut acc = e0.clone();
        let mut cur = e0.clone();
        for _ in 0..layers {
            cur = tensor::matmul(&a_hat, &cur);
            acc = tensor::add(&acc, &cur);
        }
        tensor::scale(&acc, combine.factor(layers))
    }

    #[test]
    fn factored_matches_dense_materialization_over_seeds() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let g = random_graph(40, &mut rng);
            let e0 = Tensor::randn(&[g.n, 8], 0.5, &mut rng);
            let w_us = Tensor::randn(&[g.n, 3], 0.5, &mut rng);
            let w_v = Tensor::randn(&[g.n, 3], 0.5, &mut rng);
            let fast = perturbed_propagate(&g, &w_us, &w_v, 0.05, &e0, 2, LayerCombine::Mean);
            let slow = dense_oracle(&g, &w_us, &w_v, 0.05, &e0, 2, LayerCombine::Mean);
            let delta = tensor::max_abs_diff(&fast, &slow);
            assert!(delta < 1e-9, "seed {seed}: max |delta| = {delta:e}");
        }
    }

    #[test]
    fn tape_propagation_matches_value_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let g = Arc::new(random_graph(20, &mut rng));
        let e0 = Tensor::randn(&[g.n, 5], 0.5, &mut rng);
        let w_us = Tensor::randn(&[g.n, 3], 0.5, &mut rng);
        let w_v = Tensor::randn(&[g.n, 3], 0.5, &mut rng);

        let plain = lightgcn_propagate(&g, &e0, 2, LayerCombine::Mean);
        let pert = perturbed_propagate(&g, &w_us, &w_v, 0.05, &e0, 2, LayerCombine::Mean);

        let mut tape = Tape::new();
        let e = tape.leaf(e0);
        let us = tape.leaf(w_us);
        let vv = tape.leaf(w_v);
        let b = tape.sp_matmul(g.clone(), us);
        let c = tape.sp_matmul(g.clone(), vv);
        let tp = lightgcn_propagate_tape(&mut tape, &g, e, 2, LayerCombine::Mean);
        let tq = perturbed_propagate_tape(&mut tape, &g, b, c, 0.05, e, 2, LayerCombine::Mean);
        assert!(bits_equal(tape.value(tp), &plain));
        assert!(bits_equal(tape.value(tq), &pert));
    }

    #[test]
    fn single_item_contrastive_loss_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let e = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let ehat = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let loss = gce_loss(&e, &ehat, &[3], 0.2).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn identical_rows_give_uniform_softmax_closed_form() {
        // Every anchor/candidate is the same vector, so each anchor's
        // softmax is uniform over B candidates: loss = B * log B.
        for b in [2usize, 5, 8] {
            let mut e = Tensor::zeros(&[b + 1, 3]);
            for r in 0..=b {
                e.row_mut(r).copy_from_slice(&[0.4, -1.0, 2.0]);
            }
            let items: Vec<u32> = (1..=b as u32).collect();
            let loss = gce_loss(&e, &e, &items, 0.2).unwrap();
            let expect = b as f64 * (b as f64).ln();
            assert!(
                (loss - expect).abs() < 1e-9,
                "B={b}: loss {loss} vs {expect}"
            );
        }
    }

    #[test]
    fn orthogonal_pair_closed_form() {
        // Two mutually orthogonal unit rows shared by both views at
        // tau = 0.2: per-anchor loss = -log(e^5 / (e^5 + 1)).
        let mut e = Tensor::zeros(&[3, 4]);
        e.row_mut(1).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        e.row_mut(2).copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
        let loss = gce_loss(&e, &e, &[1, 2], 0.2).unwrap();
        let expect = 2.0 * (1.0 + (-5.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12, "loss {loss} vs {expect}");
        assert!((loss - 0.013430).abs() < 1e-6);
    }

    #[test]
    fn loss_is_nonnegative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let m = rng.gen_range(1..8usize);
            let e = Tensor::randn(&[10, 4], 1.0, &mut rng);
            let ehat = Tensor::randn(&[10, 4], 1.0, &mut rng);
            let items: Vec<u32> = (1..=m as u32).collect();
            let loss = gce_loss(&e, &ehat, &items, 0.2).unwrap();
            assert!(loss > -1e-12, "negative loss {loss}");
        }
    }

    #[test]
    fn jointly_rescaling_one_row_leaves_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let e = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let ehat = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let items = [1u32, 2, 4, 5];
        let base = gce_loss(&e, &ehat, &items, 0.2).unwrap();
        let mut e2 = e.clone();
        let mut ehat2 = ehat.clone();
        e2.row_mut(4).iter_mut().for_each(|v| *v *= 7.3);
        ehat2.row_mut(4).iter_mut().for_each(|v| *v *= 7.3);
        let scaled = gce_loss(&e2, &ehat2, &items, 0.2).unwrap();
        assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
    }

    #[test]
    fn zero_norm_row_is_reported_with_item_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let mut e = Tensor::randn(&[6, 4], 1.0, &mut rng);
        e.row_mut(3).iter_mut().for_each(|v| *v = 0.0);
        let ehat = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let err = gce_loss(&e, &ehat, &[1, 3], 0.2).unwrap_err();
        match err {
            CoreError::ZeroNormRow { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn duplicate_and_padding_items_are_rejected() {
        let e = Tensor::filled(&[4, 2], 1.0);
        assert!(gce_loss(&e, &e, &[1, 1], 0.2).is_err());
        assert!(gce_loss(&e, &e, &[0, 1], 0.2).is_err());
        assert!(gce_loss(&e, &e, &[], 0.2).is_err());
    }

    #[test]
    fn propagation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let g = Arc::new(random_graph(12, &mut rng));
        let e0 = Tensor::randn(&[g.n, 4], 0.5, &mut rng);
        let w_us = Tensor::randn(&[g.n, 2], 0.5, &mut rng);
        let w_v = Tensor::randn(&[g.n, 2], 0.5, &mut rng);
        let items = [1u32, 3, 5, 9];

        let eval = |params: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let e = tape.leaf(params[0].clone());
            let us = tape.leaf(params[1].clone());
            let vv = tape.leaf(params[2].clone());
            let b = tape.sp_matmul(g.clone(), us);
            let c = tape.sp_matmul(g.clone(), vv);
            let orig = lightgcn_propagate_tape(&mut tape, &g, e, 2, LayerCombine::Mean);
            let refined =
                perturbed_propagate_tape(&mut tape, &g, b, c, 0.05, e, 2, LayerCombine::Mean);
            let loss = gce_loss_tape(&mut tape, orig, refined, &items, 0.2).unwrap();
            tape.value(loss).item()
        };

        let params = vec![e0.clone(), w_us.clone(), w_v.clone()];
        let mut tape = Tape::new();
        let e = tape.leaf(e0);
        let us = tape.leaf(w_us);
        let vv = tape.leaf(w_v);
        let b = tape.sp_matmul(g.clone(), us);
        let c = tape.sp_matmul(g.clone(), vv);
        let orig = lightgcn_propagate_tape(&mut tape, &g, e, 2, LayerCombine::Mean);
        let refined = perturbed_propagate_tape(&mut tape, &g, b, c, 0.05, e, 2, LayerCombine::Mean);
        let loss = gce_loss_tape(&mut tape, orig, refined, &items, 0.2).unwrap();
        let grads = tape.backward(loss);

        for (pi, node) in [(0usize, e), (1, us), (2, vv)] {
            let analytic = grads.get(node).expect("missing gradient");
            let fd = central_diff(&params, pi, &eval, 1e-5);
            for (j, (&a, &f)) in analytic.data().iter().zip(fd.data().iter()).enumerate() {
                let denom = a.abs().max(f.abs()).max(1e-6);
                assert!(
                    (a - f).abs() / denom < 1e-3,
                    "param {pi} elem {j}: {a} vs {f}"
                );
            }
        }
    }
}
