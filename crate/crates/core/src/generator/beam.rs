//! Length-unnormalized beam search over any next-token model.

use std::cmp::Ordering;

/// Autoregressive model interface used by the decoder.
pub trait StepModel {
    type State: Clone;

    fn initial_state(&self) -> Self::State;

    /// Consume `prev` and return the new state plus log-probabilities of the
    /// next token over the full vocabulary.
    fn step(&self, state: &Self::State, prev: u32) -> (Self::State, Vec<f64>);
}

#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Maximum number of tokens before the end token.
    pub max_len: usize,
    pub bos: u32,
    pub eos: u32,
    /// Tokens never proposed as expansions (padding, start, unknown).
    pub blocked: Vec<u32>,
}

/// A finished hypothesis. `tokens` excludes the end token; `logprob`
/// includes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    /// Decoding step at which the end token was emitted.
    pub finished_at: usize,
}

struct Live<S> {
    tokens: Vec<u32>,
    logprob: f64,
    state: S,
}

fn rank_finished(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.logprob
        .partial_cmp(&a.logprob)
        .unwrap_or(Ordering::Equal)
        .then(a.finished_at.cmp(&b.finished_at))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Return the top `n` hypotheses by total log-probability.
///
/// An end token only finishes a hypothesis when its expansion ranks within
/// the beam width, so a width of one reproduces greedy decoding exactly.
/// Beams still open at `max_len` are terminated with the end token.
pub fn beam_search<M: StepModel>(model: &M, n: usize, config: &BeamConfig) -> Vec<Hypothesis> {
    assert!(n >= 1 && config.beam_width >= n, "need 1 <= n <= beam_width");
    let width = config.beam_width;
    let mut live = vec![Live {
        tokens: Vec::new(),
        logprob: 0.0,
        state: model.initial_state(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..=config.max_len {
        // (score, beam index, token)
        let mut expansions: Vec<(f64, usize, u32)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (b, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(config.bos);
            let (state, logp) = model.step(&hyp.state, prev);
            if step == config.max_len {
                expansions.push((hyp.logprob + logp[config.eos as usize], b, config.eos));
            } else {
                for (tok, &lp) in logp.iter().enumerate() {
                    let tok = tok as u32;
                    if config.blocked.contains(&tok) || lp == f64::NEG_INFINITY {
                        continue;
                    }
                    expansions.push((hyp.logprob + lp, b, tok));
                }
            }
            next_states.push(state);
        }
        expansions.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });

        let forced = step == config.max_len;
        let mut next_live = Vec::with_capacity(width);
        for (rank, &(score, b, tok)) in expansions.iter().enumerate() {
            if tok == config.eos {
                if rank < width || forced {
                    finished.push(Hypothesis {
                        tokens: live[b].tokens.clone(),
                        logprob: score,
                        finished_at: step,
                    });
                }
            } else if next_live.len() < width {
                let mut tokens = live[b].tokens.clone();
                tokens.push(tok);
                next_live.push(Live {
                    tokens,
                    logprob: score,
                    state: next_states[b].clone(),
                });
            }
            if next_live.len() >= width && (rank + 1 >= width) && !forced {
                break;
            }
        }
        live = next_live;
        finished.sort_by(rank_finished);

        if live.is_empty() {
            break;
        }
        if finished.len() >= n {
            let nth = finished[n - 1].logprob;
            if live.iter().all(|h| h.logprob <= nth) {
                break;
            }
        }
    }
    finished.sort_by(rank_finished);
    finished.truncate(n);
    finished
}
