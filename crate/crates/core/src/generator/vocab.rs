use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::tokenize;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token vocabulary; ids 0-3 are reserved, the rest are ordered by
/// descending corpus frequency and then lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
    min_frequency: u64,
}

impl Vocab {
    pub fn fit<S: AsRef<str>>(texts: &[S], min_frequency: u64) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Validation("cannot fit a vocabulary on an empty corpus".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_frequency && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (tokens, freqs) = RESERVED
            .iter()
            .map(|t| (t.to_string(), 0))
            .chain(kept)
            .unzip();
        Ok(Self::from_parts(tokens, freqs, min_frequency))
    }

    fn from_parts(tokens: Vec<String>, freqs: Vec<u64>, min_frequency: u64) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            freqs,
            index,
            min_frequency,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One `token<TAB>frequency` line per id, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "#min_frequency\t{}", self.min_frequency).map_err(|e| Error::io(path, e))?;
        for (t, f) in self.tokens.iter().zip(&self.freqs) {
            writeln!(w, "{t}\t{f}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        let mut min_frequency = 1;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let (tok, freq) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected token<TAB>frequency"))?;
            let freq: u64 = freq
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad frequency {freq:?}")))?;
            if i == 0 && tok == "#min_frequency" {
                min_frequency = freq;
                continue;
            }
            tokens.push(tok.to_string());
            freqs.push(freq);
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format(format!("{}: reserved tokens missing", path.display())));
        }
        Ok(Self::from_parts(tokens, freqs, min_frequency))
    }
}
