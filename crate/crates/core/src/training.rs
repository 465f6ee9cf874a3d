//! Retrieval rewards and the three training objectives: NLL on bootstrap
//! rewrites, minimum Bayes risk over candidate sets, and NLL on the
//! top-rewarded candidate.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetVersion, ReformulationInstance, Targets};
use crate::embedding::{cosine, EmbeddingStore, TextEncoder};
use crate::error::{Error, Result};
use crate::generator::{Adam, Generator, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Mbr,
    Top1,
}

impl Phase {
    /// Iteration 0 trains on bootstrap rewrites, iterations up to `tau`
    /// explore with MBR, later ones exploit the top-1 candidate.
    pub fn for_iteration(t: usize, tau: usize) -> Phase {
        match t {
            0 => Phase::Init,
            t if t <= tau => Phase::Mbr,
            _ => Phase::Top1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Mbr => "mbr",
            Phase::Top1 => "top1",
        }
    }
}

/// Raw reward per candidate: the best cosine against any gold passage.
pub fn compute_rewards(
    candidate_texts: &[String],
    gold_passage_ids: &[String],
    store: &EmbeddingStore,
    encoder: &dyn TextEncoder,
) -> Result<Vec<f64>> {
    if gold_passage_ids.is_empty() {
        return Err(Error::Invariant("reward requested for an instance without gold passages".into()));
    }
    let golds = gold_passage_ids
        .iter()
        .map(|id| {
            store
                .get(id)
                .ok_or_else(|| Error::Validation(format!("gold passage {id} missing from embedding store")))
        })
        .collect::<Result<Vec<_>>>()?;
    candidate_texts
        .iter()
        .map(|text| {
            let v = encoder.encode(text);
            golds.iter().try_fold(f64::NEG_INFINITY, |best, g| Ok(best.max(cosine(&v, g)?)))
        })
        .collect()
}

/// Scale to [0, 1]; a constant vector maps to 0.5 everywhere.
pub fn minmax_normalize(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|r| (r - min) / (max - min)).collect()
}

/// Softmax over sequence log-probabilities.
pub fn renormalize_probs(logprobs: &[f64]) -> Vec<f64> {
    let max = logprobs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logprobs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Negative expected reward under the renormalized candidate distribution,
/// with its gradient with respect to each candidate log-probability:
/// `dL/ds_j = -p_j (R_j - sum_k p_k R_k)`.
pub fn mbr_loss(logprobs: &[f64], rewards: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logprobs.len() != rewards.len() || logprobs.is_empty() {
        return Err(Error::Validation(format!(
            "mbr_loss needs matching non-empty inputs, got {} logprobs and {} rewards",
            logprobs.len(),
            rewards.len()
        )));
    }
    let p = renormalize_probs(logprobs);
    let loss = -p.iter().zip(rewards).map(|(p, r)| p * r).sum::<f64>();
    // Rewards are shifted by the first one before centering so that a
    // constant reward vector yields an exactly zero gradient.
    let base = rewards[0];
    let expected: f64 = p.iter().zip(rewards).map(|(p, r)| p * (r - base)).sum();
    let grad = p
        .iter()
        .zip(rewards)
        .map(|(p, r)| -p * ((r - base) - expected))
        .collect();
    Ok((loss, grad))
}

/// Index of the highest raw reward; ties go to the earlier (higher-ranked)
/// candidate.
pub fn select_top1(raw_rewards: &[f64]) -> usize {
    let mut best = 0;
    for (i, &r) in raw_rewards.iter().enumerate().skip(1) {
        if r > raw_rewards[best] {
            best = i;
        }
    }
    best
}

/// Mean per-token negative log-likelihood of `target` (plus end token).
pub fn nll_loss(model: &Generator, input: &str, target_text: &str) -> Result<f64> {
    let ids = model.target_ids(target_text);
    if ids.is_empty() {
        return Err(Error::Validation(format!("empty NLL target for input {input:?}")));
    }
    let scored = model.score_candidates(input, &[ids]);
    Ok(-scored.logprobs()[0] / scored.token_counts()[0] as f64)
}

enum Example<'a> {
    Nll {
        input: String,
        target: Vec<u32>,
    },
    Mbr {
        input: String,
        candidates: Vec<Vec<u32>>,
        normalized: &'a [f64],
    },
}

impl Example<'_> {
    fn loss_and_grads(&self, model: &Generator) -> Result<(f64, Gradients)> {
        let mut grads = model.zero_grads();
        let loss = match self {
            Example::Nll { input, target } => {
                let scored = model.score_candidates(input, std::slice::from_ref(target));
                let n = scored.token_counts()[0] as f64;
                scored.backward(&[-1.0 / n], &mut grads);
                -scored.logprobs()[0] / n
            }
            Example::Mbr {
                input,
                candidates,
                normalized,
            } => {
                let scored = model.score_candidates(input, candidates);
                let (loss, upstream) = mbr_loss(scored.logprobs(), normalized)?;
                scored.backward(&upstream, &mut grads);
                loss
            }
        };
        Ok((loss, grads))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub iteration: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub mean_loss: f64,
    pub skipped_instances: usize,
    /// Mean raw reward of each trained instance's top-1 candidate; absent
    /// for bootstrap training.
    pub mean_raw_reward: Option<f64>,
}

pub struct EpochContext<'a> {
    pub instances: &'a HashMap<String, ReformulationInstance>,
    pub batch_size: usize,
    pub seed: u64,
}

/// One pass over `dataset` with the objective for `phase`.
pub fn train_epoch(
    model: &mut Generator,
    optimizer: &mut Adam,
    dataset: &DatasetVersion,
    phase: Phase,
    ctx: &EpochContext<'_>,
    epoch: usize,
) -> Result<EpochStats> {
    match (phase, dataset.iteration) {
        (Phase::Init, 0) => {}
        (Phase::Mbr | Phase::Top1, t) if t > 0 => {}
        (p, t) => {
            return Err(Error::Invariant(format!(
                "phase {} cannot train on dataset version {t}",
                p.as_str()
            )))
        }
    }
    if ctx.batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }

    let mut normalized_store: Vec<Vec<f64>> = Vec::new();
    let mut plan: Vec<(usize, Option<usize>)> = Vec::new(); // (row, normalized index)
    let mut skipped = 0;
    let mut top_rewards = Vec::new();
    for (r, row) in dataset.rows.iter().enumerate() {
        let inst = ctx
            .instances
            .get(&row.instance_id)
            .ok_or_else(|| Error::Validation(format!("unknown instance_id {}", row.instance_id)))?;
        match (&row.targets, phase) {
            (Targets::Rewrite(_), Phase::Init) => plan.push((r, None)),
            (Targets::Candidates(set), _) => match (&set.rewards, inst.gold_passage_ids.is_empty()) {
                (Some(raw), false) => {
                    top_rewards.push(raw[select_top1(raw)]);
                    if phase == Phase::Mbr {
                        normalized_store.push(minmax_normalize(raw));
                        plan.push((r, Some(normalized_store.len() - 1)));
                    } else {
                        plan.push((r, None));
                    }
                }
                _ => skipped += 1,
            },
            _ => return Err(Error::Invariant(format!("row {} does not fit phase", row.instance_id))),
        }
    }

    let mut examples: Vec<Example> = Vec::with_capacity(plan.len());
    for &(r, norm) in &plan {
        let row = &dataset.rows[r];
        let input = ctx.instances[&row.instance_id].model_input();
        examples.push(match (&row.targets, phase) {
            (Targets::Rewrite(text), _) => {
                let target = model.target_ids(text);
                if target.is_empty() {
                    return Err(Error::Validation(format!("empty rewrite target for {}", row.instance_id)));
                }
                Example::Nll { input, target }
            }
            (Targets::Candidates(set), Phase::Top1) => {
                let raw = set.rewards.as_ref().expect("planned rows carry rewards");
                Example::Nll {
                    input,
                    target: set.candidates[select_top1(raw)].token_ids.clone(),
                }
            }
            (Targets::Candidates(set), _) => Example::Mbr {
                input,
                candidates: set.candidates.iter().map(|c| c.token_ids.clone()).collect(),
                normalized: &normalized_store[norm.expect("mbr rows are normalized")],
            },
        });
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ ((dataset.iteration as u64) << 32) ^ epoch as u64);
    order.shuffle(&mut rng);

    let mut total = 0.0;
    for batch in order.chunks(ctx.batch_size) {
        let results: Vec<Result<(f64, Gradients)>> = {
            let frozen: &Generator = model;
            batch
                .par_iter()
                .map(|&i| examples[i].loss_and_grads(frozen))
                .collect()
        };
        let mut grads = model.zero_grads();
        let mut batch_loss = 0.0;
        for res in results {
            let (loss, g) = res?;
            batch_loss += loss;
            grads.add_assign(&g);
        }
        let scale = 1.0 / batch.len() as f64;
        grads.scale(scale);
        batch_loss *= scale;
        model.train_step(optimizer, &grads, batch_loss).map_err(|e| {
            Error::Invariant(format!(
                "iteration {} {} epoch {epoch}: {e}",
                dataset.iteration,
                phase.as_str()
            ))
        })?;
        total += batch_loss * batch.len() as f64;
    }

    Ok(EpochStats {
        iteration: dataset.iteration,
        phase,
        epoch,
        mean_loss: if examples.is_empty() { 0.0 } else { total / examples.len() as f64 },
        skipped_instances: skipped,
        mean_raw_reward: if top_rewards.is_empty() {
            None
        } else {
            Some(top_rewards.iter().sum::<f64>() / top_rewards.len() as f64)
        },
    })
}

#[cfg(test)]
mod tests;
