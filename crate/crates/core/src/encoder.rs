//! Hashed bag-of-buckets text encoder with a trainable affine projection,
//! plus exact-match lookup into precomputed embedding caches.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::PartSequence;
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

pub fn bucket(token: &str, hash_dim: usize) -> usize {
    (fnv1a(token.as_bytes()) % hash_dim as u64) as usize
}

/// Averaged bucket counts, sorted by bucket index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseBag {
    pub entries: Vec<(usize, f64)>,
}

impl SparseBag {
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], hash_dim: usize) -> Self {
        if tokens.is_empty() {
            return Self::default();
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(bucket(t.as_ref(), hash_dim)).or_default() += 1;
        }
        let inv = 1.0 / tokens.len() as f64;
        Self {
            entries: counts
                .into_iter()
                .map(|(b, c)| (b, c as f64 * inv))
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_dense(&self, hash_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; hash_dim];
        for &(b, w) in &self.entries {
            out[b] = w;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `d × H`
    pub projection: Matrix,
    pub projection_bias: Vec<f64>,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(
        hash_dim: usize,
        embed_dim: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if embed_dim == 0 || hash_dim < embed_dim {
            return Err(Error::Config(format!(
                "encoder needs d >= 1 and H >= d (got d={embed_dim}, H={hash_dim})"
            )));
        }
        Ok(Self {
            projection: Matrix::random_normal(embed_dim, hash_dim, init_std, rng),
            projection_bias: vec![0.0; embed_dim],
        })
    }

    pub fn hash_dim(&self) -> usize {
        self.projection.cols
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.rows
    }

    /// Project a bag; the empty bag maps to the zero vector.
    pub fn embed_bag(&self, bag: &SparseBag) -> Vec<f64> {
        if bag.is_empty() {
            return vec![0.0; self.embed_dim()];
        }
        let mut out = self.projection_bias.clone();
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.projection.row(r);
            *o += bag.entries.iter().map(|&(b, w)| row[b] * w).sum::<f64>();
        }
        out
    }

    pub fn embed_text<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        self.embed_bag(&SparseBag::from_tokens(tokens, self.hash_dim()))
    }

    pub fn part_bags(&self, parts: &PartSequence, tokens: &[String]) -> Vec<SparseBag> {
        parts
            .parts
            .iter()
            .map(|p| {
                if tokens.is_empty() {
                    SparseBag::default()
                } else {
                    SparseBag::from_tokens(&tokens[p.start_token..=p.end_token], self.hash_dim())
                }
            })
            .collect()
    }

    /// `T × d` matrix whose row `t` is the embedding of part `t`.
    pub fn embed_parts(&self, bags: &[SparseBag]) -> Matrix {
        let rows: Vec<Vec<f64>> = bags.iter().map(|b| self.embed_bag(b)).collect();
        Matrix::from_rows(&rows)
    }

    /// Accumulate the gradient of a part embedding into `grad`.
    pub(crate) fn backprop_bag(grad: &mut EncoderParams, bag: &SparseBag, d_embedding: &[f64]) {
        if bag.is_empty() {
            return;
        }
        axpy(1.0, d_embedding, &mut grad.projection_bias);
        let cols = grad.projection.cols;
        for (r, &g) in d_embedding.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut grad.projection.data[r * cols..(r + 1) * cols];
            for &(b, w) in &bag.entries {
                row[b] += g * w;
            }
        }
    }
}

/// Precomputed sentence embeddings keyed by exact text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn parse(contents: &str) -> Result<Self> {
        let mut lines = contents
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::MalformedLine {
            line: 1,
            message: "embedding cache is empty".into(),
        })?;
        let header: Value = serde_json::from_str(header).map_err(|e| Error::MalformedLine {
            line: 1,
            message: e.to_string(),
        })?;
        let dim = header
            .get("dim")
            .and_then(Value::as_u64)
            .ok_or(Error::MissingField {
                line: 1,
                field: "dim",
            })? as usize;

        #[derive(Deserialize)]
        struct Entry {
            text: String,
            vec: Vec<f64>,
        }

        let mut entries = BTreeMap::new();
        for (idx, line) in lines {
            let entry: Entry = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if entry.vec.len() != dim {
                return Err(Error::MalformedLine {
                    line: idx + 1,
                    message: format!("vector has length {}, header says {dim}", entry.vec.len()),
                });
            }
            entries.insert(entry.text, entry.vec);
        }
        Ok(Self { dim, entries })
    }

    pub fn lookup(&self, text: &str) -> Option<&[f64]> {
        self.entries.get(text).map(Vec::as_slice)
    }

    pub fn check_dim(&self, model_dim: usize) -> Result<()> {
        if self.dim != model_dim {
            return Err(Error::Config(format!(
                "embedding cache has dimension {}, model expects {model_dim}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Load a cache file: a `{"dim": d}` line followed by `{"text", "vec"}` lines.
pub fn load_cache(path: impl AsRef<Path>) -> Result<EmbeddingCache> {
    EmbeddingCache::parse(&fs::read_to_string(path)?)
}
