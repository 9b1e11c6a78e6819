//! Zero-shot retrieval on held-out classes.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::bridge::PrototypeBank;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Mode};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k_way: usize,
    pub n_queries: usize,
    pub top1: f64,
    pub top5: f64,
    /// 1-based rank of the true class for every query, in trial order.
    pub ranks: Vec<usize>,
    pub seed: u64,
    pub checkpoint_id: String,
}

impl RetrievalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Worker count from `STAMBRIDGE_THREADS`, defaulting to 1.
pub fn thread_count() -> Result<usize> {
    match std::env::var("STAMBRIDGE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::ConfigValue {
                key: "STAMBRIDGE_THREADS".into(),
                expected: "a positive integer",
                value: v,
            }),
        },
    }
}

/// Unit-norm `z_eeg` rows for trials `idx`, computed in eval mode.
///
/// Work is split into fixed chunks and spread over `threads` workers; each
/// row only depends on its own trial, so the result does not depend on the
/// thread count.
pub fn embed(model: &Model, data: &Dataset, idx: &[usize], threads: usize) -> Result<Tensor> {
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_BATCH).collect();
    let run = |chunk: &[usize]| -> Result<Vec<f64>> {
        let batch = data.batch(chunk)?;
        let graph = Graph::new();
        let ctx = Ctx::new(
            &graph,
            &model.store,
            Mode::Eval,
            ChaCha8Rng::seed_from_u64(0),
        );
        let z = model.encoder.encode(&ctx, &batch)?.l2_normalize()?;
        let out = z.value().data().to_vec();
        Ok(out)
    };
    let threads = threads.max(1).min(chunks.len().max(1));
    let parts: Vec<Result<Vec<f64>>> = if threads == 1 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<f64>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let per = chunks.len().div_ceil(threads);
            for (slot_group, chunk_group) in slots.chunks_mut(per).zip(chunks.chunks(per)) {
                let run = &run;
                s.spawn(move || {
                    for (slot, c) in slot_group.iter_mut().zip(chunk_group) {
                        *slot = Some(run(c));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.unwrap()).collect()
    };
    let mut data_out = Vec::with_capacity(idx.len() * model.config.embed_dim);
    for p in parts {
        data_out.extend(p?);
    }
    Tensor::new(&[idx.len(), model.config.embed_dim], data_out)
}

/// Ranks candidate image prototypes for each query embedding.
///
/// `z` rows are compared by cosine similarity. With `k_way` equal to the
/// number of `candidates`, every query sees all of them; otherwise each
/// query sees its own class plus `k_way − 1` distractors drawn with `seed`.
pub fn retrieval_from_embeddings(
    z: &Tensor,
    labels: &[usize],
    bank: &PrototypeBank,
    candidates: &[usize],
    k_way: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    if k_way < 2 || k_way > candidates.len() {
        return Err(Error::Config(format!(
            "k_way must lie in 2..={} (held-out classes), got {k_way}",
            candidates.len()
        )));
    }
    if z.ndim() != 2 || z.shape()[0] != labels.len() || z.shape()[1] != bank.dim() {
        return Err(Error::ShapeMismatch {
            op: "retrieval",
            lhs: z.shape().to_vec(),
            rhs: vec![labels.len(), bank.dim()],
        });
    }
    let cos = |q: &[f64], c: usize| -> f64 {
        let p = bank.image().row(c);
        let dot: f64 = q.iter().zip(p).map(|(a, b)| a * b).sum();
        let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / nq.max(1e-12)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranks = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        if !candidates.contains(&label) {
            return Err(Error::Lookup(format!(
                "query class {label} is not a candidate"
            )));
        }
        let pool: Vec<usize> = if k_way == candidates.len() {
            candidates.to_vec()
        } else {
            let others: Vec<usize> = candidates.iter().copied().filter(|&c| c != label).collect();
            let mut pool: Vec<usize> = others
                .choose_multiple(&mut rng, k_way - 1)
                .copied()
                .collect();
            pool.push(label);
            pool
        };
        let q = z.row(i);
        let own = cos(q, label);
        let better = pool
            .iter()
            .filter(|&&c| c != label && cos(q, c) > own)
            .count();
        ranks.push(better + 1);
    }
    let n = ranks.len().max(1) as f64;
    Ok(RetrievalReport {
        k_way,
        n_queries: ranks.len(),
        top1: ranks.iter().filter(|&&r| r <= 1).count() as f64 / n,
        top5: ranks.iter().filter(|&&r| r <= 5).count() as f64 / n,
        ranks,
        seed,
        checkpoint_id: String::new(),
    })
}

/// Embeds every held-out trial with `z_eeg` and ranks image prototypes of
/// the held-out classes.
pub fn zero_shot_retrieval(
    model: &Model,
    data: &Dataset,
    k_way: usize,
    seed: u64,
    checkpoint_id: &str,
) -> Result<RetrievalReport> {
    let candidates = data.manifest.test_classes.clone();
    if k_way > candidates.len() {
        return Err(Error::Config(format!(
            "k_way {k_way} exceeds the {} held-out classes",
            candidates.len()
        )));
    }
    let idx = data.split_indices(Split::Test);
    let z = embed(model, data, &idx, thread_count()?)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
    let mut report = retrieval_from_embeddings(&z, &labels, data.bank(), &candidates, k_way, seed)?;
    report.checkpoint_id = checkpoint_id.to_string();
    Ok(report)
}
