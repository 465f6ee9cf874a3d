//! GRU encoder-decoder with bilinear attention and a copy gate.
//!
//! The output distribution mixes a vocabulary softmax with the attention
//! weights scattered onto the source tokens, so entities seen only in the
//! conversation history can still be generated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::beam::StepModel;
use super::params::{Params, Tensor};
use super::tape::{prim, NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub vocab_size: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub copy_attention: bool,
    pub init_scale: f64,
    pub seed: u64,
}

const EMB: usize = 0;
const ENC_WIH: usize = 1;
const ENC_BIH: usize = 2;
const ENC_WHH: usize = 3;
const ENC_BHH: usize = 4;
const DEC_WIH: usize = 5;
const DEC_BIH: usize = 6;
const DEC_WHH: usize = 7;
const DEC_BHH: usize = 8;
const ATT_W: usize = 9;
const OUT_W: usize = 10;
const OUT_B: usize = 11;
const VOC_W: usize = 12;
const VOC_B: usize = 13;
const GEN_W: usize = 14;
const GEN_B: usize = 15;

/// Expected `(rows, cols)` of every parameter tensor, in slot order.
pub fn shapes(c: &NetworkConfig) -> Vec<(usize, usize)> {
    let (v, e, h) = (c.vocab_size, c.embedding_size, c.hidden_size);
    vec![
        (v, e),
        (3 * h, e),
        (3 * h, 1),
        (3 * h, h),
        (3 * h, 1),
        (3 * h, e),
        (3 * h, 1),
        (3 * h, h),
        (3 * h, 1),
        (h, h),
        (h, 2 * h),
        (h, 1),
        (v, h),
        (v, 1),
        (1, 2 * h + e),
        (1, 1),
    ]
}

pub fn init_params(c: &NetworkConfig) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    Params {
        tensors: shapes(c)
            .into_iter()
            .map(|(r, k)| Tensor::uniform(r, k, c.init_scale, &mut rng))
            .collect(),
    }
}

struct GruIds {
    wih: usize,
    bih: usize,
    whh: usize,
    bhh: usize,
}

const ENC: GruIds = GruIds {
    wih: ENC_WIH,
    bih: ENC_BIH,
    whh: ENC_WHH,
    bhh: ENC_BHH,
};
const DEC: GruIds = GruIds {
    wih: DEC_WIH,
    bih: DEC_BIH,
    whh: DEC_WHH,
    bhh: DEC_BHH,
};

/// Read-only view of a network used for decoding.
pub struct Network<'a> {
    pub config: &'a NetworkConfig,
    pub params: &'a Params,
}

/// Encoder outputs for one source sequence.
pub struct Encoded {
    states: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    source: Vec<usize>,
}

impl<'a> Network<'a> {
    fn t(&self, id: usize) -> &Tensor {
        &self.params.tensors[id]
    }

    fn gru(&self, ids: &GruIds, x: &[f64], h: &[f64]) -> Vec<f64> {
        let n = self.config.hidden_size;
        let gi = prim::affine(self.t(ids.wih), Some(self.t(ids.bih)), x);
        let gh = prim::affine(self.t(ids.whh), Some(self.t(ids.bhh)), h);
        let r: Vec<f64> = prim::add(&gi[..n], &gh[..n]).into_iter().map(prim::sigmoid).collect();
        let z: Vec<f64> = prim::add(&gi[n..2 * n], &gh[n..2 * n])
            .into_iter()
            .map(prim::sigmoid)
            .collect();
        let cand: Vec<f64> = prim::add(&gi[2 * n..], &prim::mul(&r, &gh[2 * n..]))
            .into_iter()
            .map(f64::tanh)
            .collect();
        prim::gate(&z, h, &cand)
    }

    pub fn encode(&self, source: &[u32]) -> Encoded {
        let mut h = vec![0.0; self.config.hidden_size];
        let mut states = Vec::with_capacity(source.len());
        for &tok in source {
            h = self.gru(&ENC, self.t(EMB).row(tok as usize), &h);
            states.push(h.clone());
        }
        let keys = states.iter().map(|s| prim::affine(self.t(ATT_W), None, s)).collect();
        Encoded {
            states,
            keys,
            source: source.iter().map(|&t| t as usize).collect(),
        }
    }

    /// One decoder step: new hidden state and next-token probabilities.
    pub fn decode_step(&self, enc: &Encoded, hidden: &[f64], prev: u32) -> (Vec<f64>, Vec<f64>) {
        let x = self.t(EMB).row(prev as usize);
        let s = self.gru(&DEC, x, hidden);
        let scores: Vec<f64> = enc.keys.iter().map(|k| prim::dot(k, &s)).collect();
        let alpha = prim::softmax(&scores);
        let rows: Vec<&[f64]> = enc.states.iter().map(Vec::as_slice).collect();
        let ctx = prim::weighted_sum(&alpha, &rows);
        let sc: Vec<f64> = s.iter().chain(&ctx).copied().collect();
        let o: Vec<f64> = prim::affine(self.t(OUT_W), Some(self.t(OUT_B)), &sc)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let pv = prim::softmax(&prim::affine(self.t(VOC_W), Some(self.t(VOC_B)), &o));
        let probs = if self.config.copy_attention {
            let gin: Vec<f64> = s.iter().chain(&ctx).chain(x).copied().collect();
            let g: Vec<f64> = prim::affine(self.t(GEN_W), Some(self.t(GEN_B)), &gin)
                .into_iter()
                .map(prim::sigmoid)
                .collect();
            let pc = prim::scatter_add(&alpha, &enc.source, self.config.vocab_size);
            prim::gate(&g, &pv, &pc)
        } else {
            pv
        };
        (s, probs)
    }

    pub fn decoder(&'a self, source: &[u32]) -> Decoder<'a> {
        Decoder {
            net: self,
            enc: self.encode(source),
        }
    }
}

/// Step model over one encoded source, for beam search.
pub struct Decoder<'a> {
    net: &'a Network<'a>,
    enc: Encoded,
}

impl StepModel for Decoder<'_> {
    type State = Vec<f64>;

    fn initial_state(&self) -> Vec<f64> {
        self.enc.states.last().cloned().unwrap_or_else(|| vec![0.0; self.net.config.hidden_size])
    }

    fn step(&self, state: &Vec<f64>, prev: u32) -> (Vec<f64>, Vec<f64>) {
        let (s, probs) = self.net.decode_step(&self.enc, state, prev);
        (s, probs.into_iter().map(f64::ln).collect())
    }
}

/// Encoder node ids on a tape.
pub struct TapeEncoded {
    states: Vec<NodeId>,
    keys: Vec<NodeId>,
    source: Vec<usize>,
}

fn gru_on(tape: &mut Tape, hidden: usize, ids: &GruIds, x: NodeId, h: NodeId) -> NodeId {
    let gi = tape.affine(ids.wih, Some(ids.bih), x);
    let gh = tape.affine(ids.whh, Some(ids.bhh), h);
    let (gir, ghr) = (tape.slice(gi, 0, hidden), tape.slice(gh, 0, hidden));
    let rs = tape.add(gir, ghr);
    let r = tape.sigmoid(rs);
    let (giz, ghz) = (tape.slice(gi, hidden, hidden), tape.slice(gh, hidden, hidden));
    let zs = tape.add(giz, ghz);
    let z = tape.sigmoid(zs);
    let (gin, ghn) = (tape.slice(gi, 2 * hidden, hidden), tape.slice(gh, 2 * hidden, hidden));
    let rh = tape.mul(r, ghn);
    let ns = tape.add(gin, rh);
    let cand = tape.tanh(ns);
    tape.gate(z, h, cand)
}

/// Differentiable twin of [`Network::encode`].
pub fn encode_on(tape: &mut Tape, config: &NetworkConfig, source: &[u32]) -> TapeEncoded {
    let mut h = tape.input(vec![0.0; config.hidden_size]);
    let mut states = Vec::with_capacity(source.len());
    for &tok in source {
        let x = tape.row(EMB, tok as usize);
        h = gru_on(tape, config.hidden_size, &ENC, x, h);
        states.push(h);
    }
    let keys = states.iter().map(|&s| tape.affine(ATT_W, None, s)).collect();
    TapeEncoded {
        states,
        keys,
        source: source.iter().map(|&t| t as usize).collect(),
    }
}

/// Teacher-forced log-probability of `target` followed by the end token.
/// Mirrors [`Network::decode_step`] operation for operation.
pub fn sequence_logprob_on(
    tape: &mut Tape,
    config: &NetworkConfig,
    enc: &TapeEncoded,
    bos: u32,
    eos: u32,
    target: &[u32],
) -> NodeId {
    let mut s = match enc.states.last() {
        Some(&last) => last,
        None => tape.input(vec![0.0; config.hidden_size]),
    };
    let mut prev = bos;
    let mut terms = Vec::with_capacity(target.len() + 1);
    for &y in target.iter().chain(std::iter::once(&eos)) {
        let x = tape.row(EMB, prev as usize);
        s = gru_on(tape, config.hidden_size, &DEC, x, s);
        let scores = tape.dot_rows(&enc.keys, s);
        let alpha = tape.softmax(scores);
        let ctx = tape.weighted_sum(alpha, &enc.states);
        let sc = tape.concat(&[s, ctx]);
        let pre = tape.affine(OUT_W, Some(OUT_B), sc);
        let o = tape.tanh(pre);
        let logits = tape.affine(VOC_W, Some(VOC_B), o);
        let pv = tape.softmax(logits);
        let probs = if config.copy_attention {
            let gin = tape.concat(&[s, ctx, x]);
            let gpre = tape.affine(GEN_W, Some(GEN_B), gin);
            let g = tape.sigmoid(gpre);
            let pc = tape.scatter_add(alpha, &enc.source, config.vocab_size);
            tape.gate(g, pv, pc)
        } else {
            pv
        };
        let p = tape.pick(probs, y as usize);
        terms.push(tape.log(p));
        prev = y;
    }
    // Sequential sum keeps the same rounding as the beam accumulator.
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.sum(&[total, t]);
    }
    total
}
