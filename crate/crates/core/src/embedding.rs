//! Frozen text encoder, embedding store and cosine similarity.
//!
//! The reference encoder is a signed feature-hashing vectorizer over token
//! unigrams and adjacent bigrams. It is deterministic across platforms, which
//! lets rewards and dense retrieval be reproduced bit-for-bit.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::data::Passage;
use crate::error::{Error, Result};
use crate::text::terms;

pub const DEFAULT_DIM: usize = 256;
const STORE_MAGIC: &[u8; 8] = b"ITCQEMB1";

const FNV_OFFSET: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Unit-norm (or all-zero) embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Text-to-vector function shared by passage indexing and reward scoring.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> EmbeddingVector;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEncoder {
    dim: usize,
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        HashingEncoder { dim }
    }
}

impl Default for HashingEncoder {
    fn default() -> Self {
        HashingEncoder::new(DEFAULT_DIM)
    }
}

/// Token unigrams followed by adjacent bigrams joined with `_`.
pub fn hashing_features(text: &str) -> Vec<String> {
    let tokens = terms(text);
    let bigrams: Vec<String> = tokens.windows(2).map(|w| format!("{}_{}", w[0], w[1])).collect();
    tokens.into_iter().chain(bigrams).collect()
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> EmbeddingVector {
        let mut acc = vec![0f64; self.dim];
        for feature in hashing_features(text) {
            let h = fnv1a64(feature.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return EmbeddingVector(vec![0.0; self.dim]);
        }
        EmbeddingVector(acc.iter().map(|v| (v / norm) as f32).collect())
    }
}

fn cosine_slices(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(cosine_slices(&a.0, &b.0))
}

/// Immutable id → embedding table, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    id_to_row: HashMap<String, usize>,
    matrix: Vec<f32>,
}

impl EmbeddingStore {
    pub fn build(passages: &[Passage], encoder: &dyn TextEncoder) -> Result<Self> {
        let dim = encoder.dim();
        let mut id_to_row = HashMap::with_capacity(passages.len());
        let mut ids = Vec::with_capacity(passages.len());
        let mut matrix = Vec::with_capacity(passages.len() * dim);
        for (row, p) in passages.iter().enumerate() {
            if id_to_row.insert(p.passage_id.clone(), row).is_some() {
                return Err(Error::Validation(format!("duplicate passage_id {}", p.passage_id)));
            }
            ids.push(p.passage_id.clone());
            matrix.extend(encoder.encode(&p.text).0);
        }
        Ok(EmbeddingStore {
            dim,
            ids,
            id_to_row,
            matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.matrix[row * self.dim..(row + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<EmbeddingVector> {
        self.id_to_row.get(id).map(|&r| EmbeddingVector(self.row(r).to_vec()))
    }

    /// Cosine between `query` and every stored row, in row order.
    pub fn cosine_all(&self, query: &EmbeddingVector) -> Result<Vec<f64>> {
        if query.dim() != self.dim {
            return Err(Error::Validation(format!(
                "query dimension {} does not match store dimension {}",
                query.dim(),
                self.dim
            )));
        }
        Ok((0..self.len()).map(|r| cosine_slices(&query.0, self.row(r))).collect())
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(STORE_MAGIC).map_err(io)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io)?;
        for v in &self.matrix {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        let map: BTreeMap<&str, usize> = self.ids.iter().enumerate().map(|(r, id)| (id.as_str(), r)).collect();
        let json = serde_json::to_vec(&map).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&json).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, what: &str| Error::Format(format!("embedding store at byte {offset}: {what}"));
        if bytes.len() < 20 {
            return Err(corrupt(bytes.len(), "truncated header"));
        }
        if &bytes[..8] != STORE_MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(corrupt(8, "zero dimension"));
        }
        let matrix_len = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(12, "row count overflow"))?;
        let matrix_end = 20 + matrix_len;
        if bytes.len() < matrix_end {
            return Err(corrupt(bytes.len(), "truncated matrix"));
        }
        let matrix: Vec<f32> = bytes[20..matrix_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let map: BTreeMap<String, usize> =
            serde_json::from_slice(&bytes[matrix_end..]).map_err(|e| corrupt(matrix_end, &format!("id map: {e}")))?;
        if map.len() != rows {
            return Err(corrupt(
                matrix_end,
                &format!("id map has {} entries for {rows} rows (header dim {dim})", map.len()),
            ));
        }
        let mut ids = vec![None; rows];
        for (id, &row) in &map {
            match ids.get_mut(row) {
                Some(slot @ None) => *slot = Some(id.clone()),
                _ => return Err(corrupt(matrix_end, &format!("row {row} for {id} is invalid or repeated"))),
            }
        }
        let ids: Vec<String> = ids.into_iter().map(Option::unwrap).collect();
        let id_to_row = ids.iter().enumerate().map(|(r, id)| (id.clone(), r)).collect();
        Ok(EmbeddingStore {
            dim,
            ids,
            id_to_row,
            matrix,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn passages(n: usize) -> Vec<Passage> {
        (0..n)
            .map(|i| Passage {
                passage_id: format!("p{i}"),
                text: format!("passage number {i} about topic{} and word{}", i % 3, i * 7),
            })
            .collect()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn encode_basics() {
        let enc = HashingEncoder::default();
        assert!(enc.encode("").is_zero());
        assert!(enc.encode(" ,, ").is_zero());
        assert_eq!(enc.encode("Alpha alpha"), enc.encode("alpha  ALPHA"));
        let v = enc.encode("paris weather");
        let nonzero = v.0.iter().filter(|&&x| x != 0.0).count();
        assert!(nonzero <= 3 && nonzero >= 1);
        // Independent count: distinct buckets of the three features.
        let buckets: std::collections::HashSet<u64> = ["paris", "weather", "paris_weather"]
            .iter()
            .map(|f| fnv1a64(f.as_bytes()) % 256)
            .collect();
        assert!(nonzero <= buckets.len());
        assert!((v.norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cosine_examples() {
        let mut a = vec![0f32; 4];
        a[0] = 1.0;
        let mut b = vec![0f32; 4];
        b[1] = 1.0;
        let (a, b) = (EmbeddingVector(a), EmbeddingVector(b));
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let c = cosine(&EmbeddingVector(vec![1.0, 0.0]), &EmbeddingVector(vec![s, s])).unwrap();
        assert!((c - 0.70710678).abs() < 1e-6);
        assert_eq!(cosine(&a, &EmbeddingVector(vec![0.0; 4])).unwrap(), 0.0);
        assert!(cosine(&a, &EmbeddingVector(vec![1.0; 3])).is_err());
    }

    #[test]
    fn store_rows_are_unit_norm_and_round_trip() {
        let enc = HashingEncoder::default();
        let store = EmbeddingStore::build(&passages(12), &enc).unwrap();
        assert_eq!(store.len(), 12);
        for r in 0..store.len() {
            let v = EmbeddingVector(store.row(r).to_vec());
            assert!((v.norm() - 1.0).abs() < 1e-5);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        store.persist(&path).unwrap();
        let back = EmbeddingStore::load(&path).unwrap();
        assert_eq!(back, store);
        let mut again = Vec::new();
        back.persist(&dir.path().join("emb2.bin")).unwrap();
        File::open(dir.path().join("emb2.bin")).unwrap().read_to_end(&mut again).unwrap();
        assert_eq!(again, std::fs::read(&path).unwrap());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut p = passages(2);
        p[1].passage_id = "p0".into();
        assert!(matches!(
            EmbeddingStore::build(&p, &HashingEncoder::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn header_dim_mismatch_is_format_error() {
        let store = EmbeddingStore::build(&passages(3), &HashingEncoder::new(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        store.persist(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(EmbeddingStore::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(EmbeddingStore::from_bytes(b"ITCQEMB2xxxxxxxxxxxxxxxx"), Err(Error::Format(_))));
    }

    #[test]
    fn shared_tokens_raise_cosine() {
        let enc = HashingEncoder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab: Vec<String> = (0..2000).map(|i| format!("tok{i}")).collect();
        let mut wins = 0;
        for _ in 0..100 {
            let picked: Vec<&String> = vocab.choose_multiple(&mut rng, 14).collect();
            let a = &picked[0..5];
            let mut b: Vec<&String> = a[..3].to_vec();
            b.extend(&picked[5..8]);
            let c = &picked[8..14];
            let join = |ws: &[&String]| ws.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
            let (va, vb, vc) = (enc.encode(&join(a)), enc.encode(&join(&b)), enc.encode(&join(c)));
            if cosine(&va, &vb).unwrap() > cosine(&va, &vc).unwrap() {
                wins += 1;
            }
            let _ = rng.gen::<u8>();
        }
        assert!(wins >= 95, "only {wins} of 100");
    }

    #[test]
    fn cosine_is_symmetric() {
        let enc = HashingEncoder::default();
        let a = enc.encode("the quick brown fox");
        let b = enc.encode("a quick red fox jumps");
        assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
    }
}
