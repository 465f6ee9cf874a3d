//! Trainable query generator: vocabulary, encoder-decoder network, beam
//! search candidate generation and differentiable candidate scoring.

mod beam;
mod network;
mod params;
mod tape;
mod vocab;

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Candidate;
use crate::error::{Error, Result};

pub use beam::{beam_search, BeamConfig, Hypothesis, StepModel};
pub use network::NetworkConfig;
pub use params::{Adam, AdamConfig, Gradients, Params, Tensor};
pub use tape::{NodeId, Tape};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};

use network::{encode_on, init_params, sequence_logprob_on, shapes, Network};

const MODEL_MAGIC: &[u8; 8] = b"ITCQGEN1";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub embedding_size: usize,
    pub hidden_size: usize,
    /// Maximum generated tokens, excluding the end token.
    pub max_decode_len: usize,
    /// Source tokens beyond this are dropped.
    pub max_source_len: usize,
    pub copy_attention: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            embedding_size: 64,
            hidden_size: 128,
            max_decode_len: 32,
            max_source_len: 128,
            copy_attention: true,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub vocab: Vocab,
    net_config: NetworkConfig,
    pub params: Params,
}

impl Generator {
    pub fn new(vocab: Vocab, config: GeneratorConfig) -> Self {
        let net_config = NetworkConfig {
            vocab_size: vocab.len(),
            embedding_size: config.embedding_size,
            hidden_size: config.hidden_size,
            copy_attention: config.copy_attention,
            init_scale: config.init_scale,
            seed: config.seed,
        };
        let params = init_params(&net_config);
        Generator {
            config,
            vocab,
            net_config,
            params,
        }
    }

    /// All parameters zero: every next-token distribution is uniform when
    /// the copy gate is disabled.
    pub fn zeroed(vocab: Vocab, config: GeneratorConfig) -> Self {
        let mut g = Self::new(vocab, config);
        g.params = g.params.zeros_like();
        g
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn network(&self) -> Network<'_> {
        Network {
            config: &self.net_config,
            params: &self.params,
        }
    }

    /// Source token ids: the truncated input followed by the end token.
    pub fn source_ids(&self, input: &str) -> Vec<u32> {
        let mut ids = self.vocab.encode(input);
        ids.truncate(self.config.max_source_len);
        ids.push(EOS);
        ids
    }

    /// Target token ids for a reference text, truncated to the decode budget.
    pub fn target_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = self.vocab.encode(text);
        ids.truncate(self.config.max_decode_len);
        ids
    }

    pub fn beam_config(&self, beam_width: usize) -> BeamConfig {
        BeamConfig {
            beam_width,
            max_len: self.config.max_decode_len,
            bos: BOS,
            eos: EOS,
            blocked: vec![PAD, UNK, BOS],
        }
    }

    /// Exactly `n` beam-search candidates ordered by log-probability.
    pub fn generate_candidates(&self, input: &str, n: usize, beam_width: usize) -> Result<Vec<Candidate>> {
        if n == 0 {
            return Err(Error::Validation("number of candidates must be positive".into()));
        }
        if beam_width < n {
            return Err(Error::Validation(format!("beam width {beam_width} is smaller than n = {n}")));
        }
        let net = self.network();
        let decoder = net.decoder(&self.source_ids(input));
        let hyps = beam_search(&decoder, n, &self.beam_config(beam_width));
        if hyps.len() != n {
            return Err(Error::Invariant(format!("beam search returned {} of {n} candidates", hyps.len())));
        }
        Ok(hyps
            .into_iter()
            .map(|h| Candidate {
                text: self.vocab.decode(&h.tokens),
                token_ids: h.tokens,
                logprob: h.logprob,
            })
            .collect())
    }

    /// Single most likely rewrite (beam search with `n = 1`).
    pub fn reformulate(&self, input: &str, beam_width: usize) -> Result<Candidate> {
        Ok(self.generate_candidates(input, 1, beam_width.max(1))?.remove(0))
    }

    /// Teacher-forced sequence log-probabilities, kept on a tape so that any
    /// scalar built from them can be differentiated.
    pub fn score_candidates(&self, input: &str, candidates: &[Vec<u32>]) -> ScoredCandidates<'_> {
        let mut tape = Tape::new(&self.params);
        let enc = encode_on(&mut tape, &self.net_config, &self.source_ids(input));
        let nodes: Vec<NodeId> = candidates
            .iter()
            .map(|c| sequence_logprob_on(&mut tape, &self.net_config, &enc, BOS, EOS, c))
            .collect();
        let logprobs = nodes.iter().map(|&n| tape.scalar(n)).collect();
        ScoredCandidates {
            tape,
            nodes,
            logprobs,
            lengths: candidates.iter().map(|c| c.len() + 1).collect(),
        }
    }

    /// One Adam update. Refuses to apply non-finite losses or gradients.
    pub fn train_step(&mut self, optimizer: &mut Adam, grads: &Gradients, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Invariant(format!("non-finite loss {loss}")));
        }
        if !grads.is_finite() {
            return Err(Error::Invariant("non-finite gradient".into()));
        }
        optimizer.update(&mut self.params, grads);
        Ok(())
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients::for_params(&self.params)
    }

    /// Vocabulary file stored next to a model file.
    pub fn vocab_path(model_path: &Path) -> PathBuf {
        model_path.with_extension("vocab")
    }

    /// Writes the model container and its vocabulary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let config = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MODEL_MAGIC).map_err(io)?;
        w.write_all(&MODEL_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.vocab.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(config.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&config).map_err(io)?;
        w.write_all(&(self.params.tensors.len() as u32).to_le_bytes()).map_err(io)?;
        for t in &self.params.tensors {
            w.write_all(&(t.rows as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(t.cols as u32).to_le_bytes()).map_err(io)?;
            for v in &t.data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        self.vocab.save(&Self::vocab_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let vocab = Vocab::load(&Self::vocab_path(path))?;
        Self::from_bytes(&bytes, vocab).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn from_bytes(bytes: &[u8], vocab: Vocab) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MODEL_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(format!("model format version {version} (expected {MODEL_VERSION})"));
        }
        let vocab_size = r.u32()? as usize;
        if vocab_size != vocab.len() {
            return Err(format!("model expects {vocab_size} tokens, vocabulary has {}", vocab.len()));
        }
        let config_len = r.u32()? as usize;
        let config: GeneratorConfig =
            serde_json::from_slice(r.take(config_len)?).map_err(|e| format!("config: {e}"))?;
        let mut model = Generator::new(vocab, config);
        let expected = shapes(&model.net_config);
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(format!("{count} tensors, expected {}", expected.len()));
        }
        for (i, &(rows, cols)) in expected.iter().enumerate() {
            let (fr, fc) = (r.u32()? as usize, r.u32()? as usize);
            if (fr, fc) != (rows, cols) {
                return Err(format!("tensor {i} is {fr}x{fc}, expected {rows}x{cols}"));
            }
            let raw = r.take(rows * cols * 8)?;
            model.params.tensors[i].data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Candidate log-probabilities that remain connected to the parameters.
pub struct ScoredCandidates<'a> {
    tape: Tape<'a>,
    nodes: Vec<NodeId>,
    logprobs: Vec<f64>,
    lengths: Vec<usize>,
}

impl ScoredCandidates<'_> {
    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    /// Scored tokens per candidate, including the end token.
    pub fn token_counts(&self) -> &[usize] {
        &self.lengths
    }

    /// Accumulate parameter gradients given `d loss / d logprob_j`.
    pub fn backward(&self, upstream: &[f64], grads: &mut Gradients) {
        assert_eq!(upstream.len(), self.nodes.len(), "one upstream gradient per candidate");
        let seeds: Vec<(NodeId, f64)> = self
            .nodes
            .iter()
            .zip(upstream)
            .filter(|(_, &g)| g != 0.0)
            .map(|(&n, &g)| (n, g))
            .collect();
        self.tape.backward(&seeds, grads);
    }
}

#[cfg(test)]
mod tests;
