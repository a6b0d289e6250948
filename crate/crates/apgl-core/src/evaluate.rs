//! Full-catalog ranking evaluation under the leave-one-out protocol:
//! HR@K and NDCG@K (single-relevant-item form) for K in {5, 20}.
//!
//! Ranks use the deterministic rule r = 1 + count(score > target score)
//! over all real items minus the exclusion set; padding and mask rows
//! are never candidates. By default a user's own input-view items are
//! excluded from the candidates (standard for leave-one-out); fidelity
//! runs can keep them with `exclude_seen = false`.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::dataio::Dataset;
use crate::error::{CoreError, Result};
use crate::graph::{extract_subgraph, PerturbationCache, SparseGraph, SubgraphSource};
use crate::num::tape::Tape;
use crate::num::tensor::Tensor;
use crate::seqenc::{encode_batch, personalized_scalar};
use crate::trainer::Model;

pub const EVAL_KS: [usize; 2] = [5, 20];

/// How many users to encode per forward pass.
const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub hr5: f64,
    pub hr20: f64,
    pub ndcg5: f64,
    pub ndcg20: f64,
    pub num_users: usize,
    pub split: String,
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    #[serde(rename = "hr@5")]
    hr5: f64,
    #[serde(rename = "hr@20")]
    hr20: f64,
    #[serde(rename = "ndcg@5")]
    ndcg5: f64,
    #[serde(rename = "ndcg@20")]
    ndcg20: f64,
    num_users: usize,
    split: &'a str,
    seed: u64,
}

impl MetricsReport {
    pub fn to_json(&self, seed: u64) -> String {
        let j = MetricsJson {
            hr5: self.hr5,
            hr20: self.hr20,
            ndcg5: self.ndcg5,
            ndcg20: self.ndcg20,
            num_users: self.num_users,
            split: &self.split,
            seed,
        };
        serde_json::to_string_pretty(&j).expect("metrics serialize")
    }
}

/// Pessimistically deterministic rank of `target`: one plus the number
/// of candidate items scoring strictly higher. Candidates are item ids
/// 1..=num_items minus `exclude`.
pub fn rank_of_target(
    h_last: &[f64],
    item_emb: &Tensor,
    num_items: usize,
    exclude: &BTreeSet<u32>,
    target: u32,
) -> Result<usize> {
    if target == 0 || target as usize > num_items {
        return Err(CoreError::Precondition(format!(
            "target {target} outside item range 1..={num_items}"
        )));
    }
    if exclude.contains(&target) {
        return Err(CoreError::TargetExcluded { target });
    }
    let dot = |item: u32| -> f64 {
        let row = item_emb.row(item as usize);
        h_last.iter().zip(row.iter()).map(|(a, b)| a * b).sum()
    };
    let target_score = dot(target);
    let mut above = 0usize;
    for item in 1..=num_items as u32 {
        if item == target || exclude.contains(&item) {
            continue;
        }
        if dot(item) > target_score {
            above += 1;
        }
    }
    Ok(1 + above)
}

/// Per-K (hit, ndcg) pairs for a single ranking instance.
pub fn rank_and_score(
    h_last: &[f64],
    item_emb: &Tensor,
    num_items: usize,
    exclude: &BTreeSet<u32>,
    target: u32,
    ks: &[usize],
) -> Result<Vec<(f64, f64)>> {
    let r = rank_of_target(h_last, item_emb, num_items, exclude, target)?;
    Ok(ks.iter().map(|&k| metrics_at(r, k)).collect())
}

/// (hit@K, ndcg@K) from a rank, with the single-relevant-item NDCG
/// reduction 1/log2(r+1).
pub fn metrics_at(rank: usize, k: usize) -> (f64, f64) {
    if rank <= k {
        (1.0, 1.0 / ((rank as f64) + 1.0).log2())
    } else {
        (0.0, 0.0)
    }
}

/// Encode input views and average per-user metrics over the whole split.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    graph: Option<&SparseGraph>,
    split: Split,
    exclude_seen: bool,
) -> Result<MetricsReport> {
    let item_emb = model.params.value("item_embeddings");
    if item_emb.dims()[0] != dataset.vocab_size() {
        return Err(CoreError::DimensionMismatch {
            what: "checkpoint item table vs dataset vocabulary".into(),
            expected: format!("{} rows", dataset.vocab_size()),
            actual: format!("{} rows", item_emb.dims()[0]),
        });
    }
    if model.cfg.max_len != dataset.max_len() {
        return Err(CoreError::DimensionMismatch {
            what: "checkpoint sequence length vs dataset".into(),
            expected: format!("{}", dataset.max_len()),
            actual: format!("{}", model.cfg.max_len),
        });
    }
    let use_pge = !model.cfg.disable_pge;
    let source = if model.cfg.disable_agcl {
        SubgraphSource::Original
    } else {
        model.cfg.subgraph_source
    };
    let cache: Option<PerturbationCache> = if use_pge && source == SubgraphSource::Refined {
        let g = graph.ok_or_else(|| {
            CoreError::Precondition("personalized bias requires the item graph".into())
        })?;
        Some(PerturbationCache::new(
            g,
            model.params.value("graph/w_us"),
            model.params.value("graph/w_v"),
            model.cfg.alpha,
        ))
    } else {
        None
    };
    if use_pge && graph.is_none() {
        return Err(CoreError::Precondition(
            "personalized bias requires the item graph".into(),
        ));
    }

    let users: Vec<u32> = dataset.users().collect();
    let n = model.cfg.max_len;
    let mut sums = [0.0f64; 4]; // hr5, hr20, ndcg5, ndcg20
    let mut evaluated = 0usize;

    for chunk in users.chunks(CHUNK) {
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for &u in chunk {
            let (view, target) = match split {
                Split::Valid => (dataset.valid_input(u), dataset.valid_target(u)),
                Split::Test => (dataset.test_input(u), dataset.test_target(u)),
            };
            inputs.push(dataset.pad(&view));
            targets.push(target);
        }
        let mut tape = Tape::new();
        let weights = model.encoder_weights_on(&mut tape, false);
        let pprime = if use_pge {
            let g = graph.expect("checked above");
            let mut p = Tensor::zeros(&[chunk.len(), n, n]);
            for (b, &u) in chunk.iter().enumerate() {
                let sub = extract_subgraph(g, &inputs[b], source, cache.as_ref());
                let c = personalized_scalar(
                    model.params.value("user_embeddings").row(u as usize),
                    model.params.value("pge/w1"),
                    model.params.value("pge/b1"),
                    model.params.value("pge/w2"),
                    model.params.value("pge/b2"),
                );
                let dst = &mut p.data_mut()[b * n * n..(b + 1) * n * n];
                for (d, &s) in dst.iter_mut().zip(sub.data().iter()) {
                    *d = c * s;
                }
            }
            Some(tape.constant(p))
        } else {
            None
        };
        let enc_cfg = model.encoder_cfg();
        let out = encode_batch(&mut tape, &inputs, &weights, pprime, &enc_cfg, None, false)?;
        let h = tape.value(out.h_last);
        for (b, (&u, &target)) in chunk.iter().zip(targets.iter()).enumerate() {
            let exclude: BTreeSet<u32> = if exclude_seen {
                inputs[b]
                    .iter()
                    .copied()
                    .filter(|&i| i != 0 && i != target)
                    .collect()
            } else {
                BTreeSet::new()
            };
            let scored = rank_and_score(
                h.row(b),
                item_emb,
                dataset.num_items(),
                &exclude,
                target,
                &EVAL_KS,
            )?;
            sums[0] += scored[0].0;
            sums[1] += scored[1].0;
            sums[2] += scored[0].1;
            sums[3] += scored[1].1;
            evaluated += 1;
            let _ = u;
        }
    }
    let m = evaluated.max(1) as f64;
    Ok(MetricsReport {
        hr5: sums[0] / m,
        hr20: sums[1] / m,
        ndcg5: sums[2] / m,
        ndcg20: sums[3] / m,
        num_users: evaluated,
        split: split.as_str().to_string(),
    })
}
