//! Prototype bank, similarity scoring, and the full forward pass.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentLog;
use crate::data::{partition_ngrams, tokenize, tokenize_with_offsets, PartSequence, Token};
use crate::encoder::{EmbeddingCache, EncoderParams, SparseBag};
use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, norm, softmax, Matrix};
use crate::span::{
    mixture_forward, selected_index, span_mask, union_mask, MixtureForward, MixtureHeadParams, SpanMask,
};

pub const EPS_COS: f64 = 1e-8;
pub const EPS_RMS: f64 = 1e-6;
pub const EPS_MASK: f64 = 1e-8;

/// Shape and structural hyperparameters of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub num_prototypes: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub hash_dim: usize,
    pub n_gram: usize,
    pub t_max: usize,
    pub mlp_hidden: usize,
    pub components: usize,
    /// Ramp width `R` of the span function, in parts.
    pub span_smoothness: f64,
    /// Use the max-over-components mask instead of the top component only.
    pub union_mask: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("K", self.num_prototypes),
            ("d", self.embed_dim),
            ("n_gram", self.n_gram),
            ("T_max", self.t_max),
            ("mlp_hidden", self.mlp_hidden),
            ("M", self.components),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.num_prototypes < 2 {
            return Err(Error::Config("K must be at least 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.hash_dim < self.embed_dim {
            return Err(Error::Config("hash_dim must be at least d".into()));
        }
        if !(self.span_smoothness > 0.0) {
            return Err(Error::Config("R must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    /// `K × d`
    pub prototypes: Matrix,
    /// `C × K`
    pub head_weights: Matrix,
    pub head_bias: Vec<f64>,
    pub rms_gain: Vec<f64>,
}

impl PrototypeBank {
    pub fn num_prototypes(&self) -> usize {
        self.prototypes.rows
    }

    pub fn num_classes(&self) -> usize {
        self.head_weights.rows
    }

    /// Head weight of prototype `k` toward `class`, relative to the mean of
    /// the other classes. With two classes this is `w[1][k] - w[0][k]` for
    /// class 1.
    pub fn class_weight_toward(&self, k: usize, class: usize) -> f64 {
        let c = self.num_classes();
        let others: f64 = (0..c)
            .filter(|&j| j != class)
            .map(|j| self.head_weights.get(j, k))
            .sum();
        self.head_weights.get(class, k) - others / (c - 1) as f64
    }

    /// Binary case: contribution toward the positive class.
    pub fn class_weight_of(&self, k: usize) -> f64 {
        self.class_weight_toward(k, 1)
    }
}

/// Every trainable tensor. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub encoder: EncoderParams,
    pub heads: MixtureHeadParams,
    pub bank: PrototypeBank,
}

/// Declared block order, shared by the optimizer, gradient checks, and checkpoints.
pub const BLOCK_NAMES: [&str; 16] = [
    "encoder.projection",
    "encoder.projection_bias",
    "prototypes",
    "heads.mlp_in",
    "heads.mlp_in_bias",
    "heads.mlp_out",
    "heads.mlp_out_bias",
    "heads.mu",
    "heads.mu_bias",
    "heads.sigma",
    "heads.sigma_bias",
    "heads.stick",
    "heads.stick_bias",
    "bank.rms_gain",
    "bank.head_weights",
    "bank.head_bias",
];

impl Parameters {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            encoder: EncoderParams {
                projection: Matrix::zeros(arch.embed_dim, arch.hash_dim),
                projection_bias: vec![0.0; arch.embed_dim],
            },
            heads: MixtureHeadParams::zeros(arch.t_max, arch.mlp_hidden, arch.components),
            bank: PrototypeBank {
                prototypes: Matrix::zeros(arch.num_prototypes, arch.embed_dim),
                head_weights: Matrix::zeros(arch.num_classes, arch.num_prototypes),
                head_bias: vec![0.0; arch.num_classes],
                rms_gain: vec![0.0; arch.num_prototypes],
            },
        }
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 16] {
        let e = &self.encoder;
        let h = &self.heads;
        let b = &self.bank;
        [
            (BLOCK_NAMES[0], &e.projection.data),
            (BLOCK_NAMES[1], &e.projection_bias),
            (BLOCK_NAMES[2], &b.prototypes.data),
            (BLOCK_NAMES[3], &h.mlp_in.data),
            (BLOCK_NAMES[4], &h.mlp_in_bias),
            (BLOCK_NAMES[5], &h.mlp_out.data),
            (BLOCK_NAMES[6], &h.mlp_out_bias),
            (BLOCK_NAMES[7], &h.mu.data),
            (BLOCK_NAMES[8], &h.mu_bias),
            (BLOCK_NAMES[9], &h.sigma.data),
            (BLOCK_NAMES[10], &h.sigma_bias),
            (BLOCK_NAMES[11], &h.stick.data),
            (BLOCK_NAMES[12], &h.stick_bias),
            (BLOCK_NAMES[13], &b.rms_gain),
            (BLOCK_NAMES[14], &b.head_weights.data),
            (BLOCK_NAMES[15], &b.head_bias),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 16] {
        let e = &mut self.encoder;
        let h = &mut self.heads;
        let b = &mut self.bank;
        [
            (BLOCK_NAMES[0], &mut e.projection.data),
            (BLOCK_NAMES[1], &mut e.projection_bias),
            (BLOCK_NAMES[2], &mut b.prototypes.data),
            (BLOCK_NAMES[3], &mut h.mlp_in.data),
            (BLOCK_NAMES[4], &mut h.mlp_in_bias),
            (BLOCK_NAMES[5], &mut h.mlp_out.data),
            (BLOCK_NAMES[6], &mut h.mlp_out_bias),
            (BLOCK_NAMES[7], &mut h.mu.data),
            (BLOCK_NAMES[8], &mut h.mu_bias),
            (BLOCK_NAMES[9], &mut h.sigma.data),
            (BLOCK_NAMES[10], &mut h.sigma_bias),
            (BLOCK_NAMES[11], &mut h.stick.data),
            (BLOCK_NAMES[12], &mut h.stick_bias),
            (BLOCK_NAMES[13], &mut b.rms_gain),
            (BLOCK_NAMES[14], &mut b.head_weights.data),
            (BLOCK_NAMES[15], &mut b.head_bias),
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

/// Text prepared for the forward pass: tokens, parts, and hashed part bags.
#[derive(Debug, Clone)]
pub struct EncodedText {
    pub tokens: Vec<Token>,
    pub parts: PartSequence,
    pub bags: Vec<SparseBag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PrototypeTrace {
    pub curve: Vec<f64>,
    pub mixture: MixtureForward,
    pub component: usize,
    pub mask: SpanMask,
    pub refined: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub part_embeddings: Matrix,
    pub prototypes: Vec<PrototypeTrace>,
    pub similarity: SimilarityVector,
    pub rms: f64,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub prediction: usize,
}

impl ForwardPass {
    pub fn masks(&self) -> impl Iterator<Item = &SpanMask> {
        self.prototypes.iter().map(|p| &p.mask)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub params: Parameters,
    pub alignment: Option<AlignmentLog>,
    /// Sentence embeddings that take precedence over hash encoding.
    pub cache: Option<EmbeddingCache>,
}

/// Initialization scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitScales {
    /// Standard deviation of the encoder projection.
    pub encoder_std: f64,
    /// Standard deviation of the logistic head before each row is centred.
    pub head_std: f64,
    /// Initial bias of the log-spread head.
    pub sigma_bias: f64,
}

impl Default for InitScales {
    fn default() -> Self {
        Self {
            encoder_std: 0.003,
            head_std: 1.0,
            sigma_bias: 2.5,
        }
    }
}

impl Model {
    /// Random initialization. Prototypes start as small Gaussian noise; the
    /// trainer replaces them with sentence embeddings. Head rows are centred
    /// so a uniform similarity vector yields uniform class probabilities.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, init: &InitScales, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let encoder = EncoderParams::new(arch.hash_dim, arch.embed_dim, init.encoder_std, rng)?;
        let heads = MixtureHeadParams::new(arch.t_max, arch.mlp_hidden, arch.components, init.sigma_bias, rng);
        let mut head_weights = Matrix::random_normal(arch.num_classes, arch.num_prototypes, init.head_std, rng);
        for c in 0..arch.num_classes {
            let row = head_weights.row_mut(c);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter_mut().for_each(|w| *w -= mean);
        }
        let bank = PrototypeBank {
            prototypes: Matrix::random_normal(arch.num_prototypes, arch.embed_dim, init.encoder_std, rng),
            head_weights,
            head_bias: vec![0.0; arch.num_classes],
            rms_gain: vec![1.0; arch.num_prototypes],
        };
        Ok(Self {
            arch,
            params: Parameters {
                encoder,
                heads,
                bank,
            },
            alignment: None,
            cache: None,
        })
    }

    pub fn with_cache(mut self, cache: EmbeddingCache) -> Result<Self> {
        cache.check_dim(self.arch.embed_dim)?;
        self.cache = Some(cache);
        Ok(self)
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.params.bank
    }

    pub fn encode(&self, text: &str) -> Result<EncodedText> {
        let tokens = tokenize_with_offsets(text);
        let strings: Vec<String> = tokens.iter().map(|t| t.text.clone()).collect();
        let parts = partition_ngrams(&strings, self.arch.n_gram)?;
        let bags = self.params.encoder.part_bags(&parts, &strings);
        Ok(EncodedText { tokens, parts, bags })
    }

    /// Whole-sentence embedding, from the cache when it has the exact text.
    pub fn sentence_embedding(&self, sentence: &str) -> Vec<f64> {
        if let Some(v) = self.cache.as_ref().and_then(|c| c.lookup(sentence)) {
            return v.to_vec();
        }
        self.params.encoder.embed_text(&tokenize(sentence))
    }

    /// Set each prototype to the embedding of a distinct, uniformly sampled sentence.
    pub fn init_prototypes_from<R: Rng + ?Sized>(&mut self, sentences: &[&str], rng: &mut R) -> Result<()> {
        let k = self.arch.num_prototypes;
        if sentences.is_empty() {
            return Err(Error::InvalidCorpus("no sentences to initialize prototypes from".into()));
        }
        let picks: Vec<usize> = if sentences.len() >= k {
            sample(rng, sentences.len(), k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..sentences.len())).collect()
        };
        for (row, idx) in picks.into_iter().enumerate() {
            let emb = self.sentence_embedding(sentences[idx]);
            self.params.bank.prototypes.row_mut(row).copy_from_slice(&emb);
        }
        Ok(())
    }

    pub fn forward_encoded(&self, input: &EncodedText) -> Result<ForwardPass> {
        let p = &self.params;
        let t = input.parts.len();
        let part_embeddings = p.encoder.embed_parts(&input.bags);

        let mut traces = Vec::with_capacity(self.arch.num_prototypes);
        let mut raw = Vec::with_capacity(self.arch.num_prototypes);
        for proto in p.bank.prototypes.iter_rows() {
            let curve = similarity_curve(&part_embeddings, proto);
            let mixture = mixture_forward(&p.heads, &curve, t)?;
            let component = selected_index(&mixture.params);
            let mask = if self.arch.union_mask {
                union_mask(&mixture.params, self.arch.span_smoothness, t)?
            } else {
                span_mask(
                    mixture.params.mu[component],
                    mixture.params.sigma[component],
                    self.arch.span_smoothness,
                    t,
                )?
            };
            let refined = refine_embedding(&part_embeddings, &mask.soft);
            raw.push(cosine(&refined, proto));
            traces.push(PrototypeTrace {
                curve,
                mixture,
                component,
                mask,
                refined,
            });
        }

        let rms = root_mean_square(&raw);
        let normalized = raw
            .iter()
            .zip(&p.bank.rms_gain)
            .map(|(r, g)| g * r / rms)
            .collect::<Vec<_>>();
        let logits = p.bank.head_weights.affine(&normalized, &p.bank.head_bias);
        let probabilities = softmax(&logits);
        let prediction = argmax(&probabilities);
        Ok(ForwardPass {
            part_embeddings,
            prototypes: traces,
            similarity: SimilarityVector { raw, normalized },
            rms,
            logits,
            probabilities,
            prediction,
        })
    }

    pub fn forward(&self, text: &str) -> Result<ForwardPass> {
        self.forward_encoded(&self.encode(text)?)
    }
}

/// `u·v / (‖u‖‖v‖ + 1e-8)`, or 0 when either vector is zero.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    dot(u, v) / (nu * nv + EPS_COS)
}

/// Gradients of `cosine(u, v)` scaled by `upstream`.
pub(crate) fn cosine_backward(u: &[f64], v: &[f64], upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 || upstream == 0.0 {
        return (vec![0.0; u.len()], vec![0.0; v.len()]);
    }
    let denom = nu * nv + EPS_COS;
    let num = dot(u, v);
    let cu = num * nv / (denom * denom * nu);
    let cv = num * nu / (denom * denom * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(a, b)| upstream * (b / denom - cu * a))
        .collect();
    let dv = v
        .iter()
        .zip(u)
        .map(|(b, a)| upstream * (a / denom - cv * b))
        .collect();
    (du, dv)
}

pub fn similarity_curve(part_embeddings: &Matrix, prototype: &[f64]) -> Vec<f64> {
    part_embeddings
        .iter_rows()
        .map(|row| cosine(row, prototype))
        .collect()
}

pub(crate) fn root_mean_square(raw: &[f64]) -> f64 {
    (raw.iter().map(|r| r * r).sum::<f64>() / raw.len() as f64 + EPS_RMS).sqrt()
}

/// `gain_k · raw_k / sqrt(mean(raw²) + 1e-6)`
pub fn rmsnorm(raw: &[f64], gain: &[f64]) -> Vec<f64> {
    let rms = root_mean_square(raw);
    raw.iter().zip(gain).map(|(r, g)| g * r / rms).collect()
}

/// Mask-weighted mean of the part embeddings.
pub fn refine_embedding(part_embeddings: &Matrix, mask: &[f64]) -> Vec<f64> {
    debug_assert_eq!(mask.len(), part_embeddings.rows);
    let mut out = vec![0.0; part_embeddings.cols];
    let mut total = 0.0;
    for (row, &m) in part_embeddings.iter_rows().zip(mask) {
        if m != 0.0 {
            crate::linalg::axpy(m, row, &mut out);
            total += m;
        }
    }
    let inv = 1.0 / (total + EPS_MASK);
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Class probabilities from normalized similarities.
pub fn predict(bank: &PrototypeBank, normalized: &[f64]) -> Vec<f64> {
    softmax(&bank.head_weights.affine(normalized, &bank.head_bias))
}
