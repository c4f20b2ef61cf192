//! Prototype-aware span extraction.
//!
//! A similarity curve (one cosine per part) is zero-padded to `T_max` and fed
//! through a two-layer tanh MLP. Three affine heads read the hidden state:
//!
//! ```text
//! mu    = sigmoid(W_mu h + b_mu) * T
//! sigma = exp(clamp(W_sigma h + b_sigma, -6, 3))
//! nu    = sigmoid(W_pi h + b_pi)
//! pi_m  = nu_m * prod_{l<m} (1 - nu_l)
//! ```
//!
//! The component with the largest raw stick weight supplies the `(mu, sigma)`
//! of the trapezoid span mask `clamp((R + sigma - |mu - t|) / R, 0, 1)`,
//! evaluated at part positions `t = 1..=T`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, sigmoid, Matrix};

pub const SIGMA_LOGIT_MIN: f64 = -6.0;
pub const SIGMA_LOGIT_MAX: f64 = 3.0;
pub const DEFAULT_SPAN_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureHeadParams {
    /// `H_m × T_max`
    pub mlp_in: Matrix,
    pub mlp_in_bias: Vec<f64>,
    /// `H_m × H_m`
    pub mlp_out: Matrix,
    pub mlp_out_bias: Vec<f64>,
    /// `M × H_m`
    pub mu: Matrix,
    pub mu_bias: Vec<f64>,
    pub sigma: Matrix,
    pub sigma_bias: Vec<f64>,
    pub stick: Matrix,
    pub stick_bias: Vec<f64>,
}

impl MixtureHeadParams {
    /// Glorot weights, zero biases except `sigma_bias`, which sets the
    /// initial span half-width to about `exp(sigma_bias)` parts.
    pub fn new<R: Rng + ?Sized>(t_max: usize, hidden: usize, components: usize, sigma_bias: f64, rng: &mut R) -> Self {
        Self {
            mlp_in: Matrix::glorot(hidden, t_max, rng),
            mlp_in_bias: vec![0.0; hidden],
            mlp_out: Matrix::glorot(hidden, hidden, rng),
            mlp_out_bias: vec![0.0; hidden],
            mu: Matrix::glorot(components, hidden, rng),
            mu_bias: vec![0.0; components],
            sigma: Matrix::glorot(components, hidden, rng),
            sigma_bias: vec![sigma_bias; components],
            stick: Matrix::glorot(components, hidden, rng),
            stick_bias: vec![0.0; components],
        }
    }

    pub fn zeros(t_max: usize, hidden: usize, components: usize) -> Self {
        Self {
            mlp_in: Matrix::zeros(hidden, t_max),
            mlp_in_bias: vec![0.0; hidden],
            mlp_out: Matrix::zeros(hidden, hidden),
            mlp_out_bias: vec![0.0; hidden],
            mu: Matrix::zeros(components, hidden),
            mu_bias: vec![0.0; components],
            sigma: Matrix::zeros(components, hidden),
            sigma_bias: vec![0.0; components],
            stick: Matrix::zeros(components, hidden),
            stick_bias: vec![0.0; components],
        }
    }

    pub fn t_max(&self) -> usize {
        self.mlp_in.cols
    }

    pub fn components(&self) -> usize {
        self.mu.rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub nu: Vec<f64>,
    pub pi_raw: Vec<f64>,
    pub pi_norm: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Everything computed on the way from a curve to its mixture parameters.
#[derive(Debug, Clone)]
pub struct MixtureForward {
    pub padded: Vec<f64>,
    pub hidden_act: Vec<f64>,
    pub hidden: Vec<f64>,
    pub mu_gate: Vec<f64>,
    pub sigma_logit: Vec<f64>,
    pub parts: usize,
    pub params: MixtureParams,
}

pub fn mixture_forward(heads: &MixtureHeadParams, curve: &[f64], parts: usize) -> Result<MixtureForward> {
    let t_max = heads.t_max();
    if curve.len() > t_max {
        return Err(Error::Config(format!(
            "text has {} parts but the mixture heads accept at most T_max = {t_max}",
            curve.len()
        )));
    }
    let mut padded = curve.to_vec();
    padded.resize(t_max, 0.0);

    let hidden_act: Vec<f64> = heads
        .mlp_in
        .affine(&padded, &heads.mlp_in_bias)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let hidden = heads.mlp_out.affine(&hidden_act, &heads.mlp_out_bias);

    let t = parts as f64;
    let mu_gate: Vec<f64> = heads
        .mu
        .affine(&hidden, &heads.mu_bias)
        .into_iter()
        .map(sigmoid)
        .collect();
    let mu = mu_gate.iter().map(|g| g * t).collect();
    let sigma_logit = heads.sigma.affine(&hidden, &heads.sigma_bias);
    let sigma = sigma_logit
        .iter()
        .map(|a| a.clamp(SIGMA_LOGIT_MIN, SIGMA_LOGIT_MAX).exp())
        .collect();
    let nu: Vec<f64> = heads
        .stick
        .affine(&hidden, &heads.stick_bias)
        .into_iter()
        .map(sigmoid)
        .collect();
    let (pi_raw, pi_norm) = stick_break(&nu);

    Ok(MixtureForward {
        padded,
        hidden_act,
        hidden,
        mu_gate,
        sigma_logit,
        parts,
        params: MixtureParams {
            nu,
            pi_raw,
            pi_norm,
            mu,
            sigma,
        },
    })
}

/// Mixture parameters for a similarity curve over `parts` positions.
pub fn mixture_params(heads: &MixtureHeadParams, curve: &[f64], parts: usize) -> Result<MixtureParams> {
    mixture_forward(heads, curve, parts).map(|f| f.params)
}

/// Upstream gradients with respect to the mixture parameters.
#[derive(Debug, Clone)]
pub struct MixtureGrad {
    pub pi_raw: Vec<f64>,
    pub pi_norm: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl MixtureGrad {
    pub fn zeros(m: usize) -> Self {
        Self {
            pi_raw: vec![0.0; m],
            pi_norm: vec![0.0; m],
            mu: vec![0.0; m],
            sigma: vec![0.0; m],
        }
    }
}

impl MixtureForward {
    /// Backpropagate into the head parameters; returns the gradient with
    /// respect to the (unpadded) curve.
    pub fn backward(&self, heads: &MixtureHeadParams, upstream: &MixtureGrad, grad: &mut MixtureHeadParams) -> Vec<f64> {
        let p = &self.params;
        let m = p.nu.len();

        // pi_norm = pi_raw / S
        let total: f64 = p.pi_raw.iter().sum();
        let weighted: f64 = upstream
            .pi_norm
            .iter()
            .zip(&p.pi_raw)
            .map(|(g, r)| g * r)
            .sum();
        let d_raw: Vec<f64> = (0..m)
            .map(|j| upstream.pi_raw[j] + upstream.pi_norm[j] / total - weighted / (total * total))
            .collect();

        // pi_raw_i = nu_i * prod_{l<i} (1 - nu_l)
        let d_nu: Vec<f64> = (0..m)
            .map(|j| {
                let mut acc = 0.0;
                for (i, &g) in d_raw.iter().enumerate().skip(j) {
                    let mut partial = if i == j { 1.0 } else { -p.nu[i] };
                    for l in 0..i {
                        if l != j {
                            partial *= 1.0 - p.nu[l];
                        }
                    }
                    acc += g * partial;
                }
                acc
            })
            .collect();

        let t = self.parts as f64;
        let d_stick: Vec<f64> = d_nu
            .iter()
            .zip(&p.nu)
            .map(|(g, v)| g * v * (1.0 - v))
            .collect();
        let d_mu_logit: Vec<f64> = upstream
            .mu
            .iter()
            .zip(&self.mu_gate)
            .map(|(g, s)| g * t * s * (1.0 - s))
            .collect();
        let d_sigma_logit: Vec<f64> = upstream
            .sigma
            .iter()
            .zip(&self.sigma_logit)
            .zip(&p.sigma)
            .map(|((g, &a), s)| {
                if a > SIGMA_LOGIT_MIN && a < SIGMA_LOGIT_MAX {
                    g * s
                } else {
                    0.0
                }
            })
            .collect();

        let mut d_hidden = heads.mu.matvec_t(&d_mu_logit);
        for (acc, v) in d_hidden.iter_mut().zip(heads.sigma.matvec_t(&d_sigma_logit)) {
            *acc += v;
        }
        for (acc, v) in d_hidden.iter_mut().zip(heads.stick.matvec_t(&d_stick)) {
            *acc += v;
        }
        accumulate_affine(&mut grad.mu, &mut grad.mu_bias, &d_mu_logit, &self.hidden);
        accumulate_affine(&mut grad.sigma, &mut grad.sigma_bias, &d_sigma_logit, &self.hidden);
        accumulate_affine(&mut grad.stick, &mut grad.stick_bias, &d_stick, &self.hidden);

        accumulate_affine(&mut grad.mlp_out, &mut grad.mlp_out_bias, &d_hidden, &self.hidden_act);
        let d_act = heads.mlp_out.matvec_t(&d_hidden);
        let d_pre: Vec<f64> = d_act
            .iter()
            .zip(&self.hidden_act)
            .map(|(g, z)| g * (1.0 - z * z))
            .collect();
        accumulate_affine(&mut grad.mlp_in, &mut grad.mlp_in_bias, &d_pre, &self.padded);
        let mut d_curve = heads.mlp_in.matvec_t(&d_pre);
        d_curve.truncate(self.parts.min(d_curve.len()));
        d_curve
    }
}

fn accumulate_affine(weight: &mut Matrix, bias: &mut [f64], d_out: &[f64], input: &[f64]) {
    weight.add_outer(d_out, input);
    for (b, g) in bias.iter_mut().zip(d_out) {
        *b += g;
    }
}

/// Stick-breaking weights. The last stick is not forced, so the raw weights
/// sum to `1 - prod(1 - nu)`; `pi_norm` renormalizes them.
pub fn stick_break(nu: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut remaining = 1.0;
    let pi_raw: Vec<f64> = nu
        .iter()
        .map(|&v| {
            let w = v * remaining;
            remaining *= 1.0 - v;
            w
        })
        .collect();
    let total: f64 = pi_raw.iter().sum();
    let pi_norm = pi_raw.iter().map(|w| w / total).collect();
    (pi_raw, pi_norm)
}

#[inline]
pub(crate) fn normal_density(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

pub fn gaussian_pdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "standard deviation must be positive (got {sigma})"
        )));
    }
    Ok(normal_density(x, mu, sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanMask {
    pub soft: Vec<f64>,
    pub anchor: f64,
    pub spread: f64,
    pub smoothness: f64,
    /// 1-based inclusive part range at the default threshold.
    pub discrete: Option<(usize, usize)>,
}

#[inline]
pub(crate) fn trapezoid(mu: f64, sigma: f64, r: f64, position: f64) -> f64 {
    ((r + sigma - (mu - position).abs()) / r).clamp(0.0, 1.0)
}

fn check_span_args(r: f64, parts: usize) -> Result<()> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "span smoothness R must be positive (got {r})"
        )));
    }
    if parts == 0 {
        return Err(Error::InvalidParameter("a text has at least one part".into()));
    }
    Ok(())
}

pub fn span_mask(mu: f64, sigma: f64, r: f64, parts: usize) -> Result<SpanMask> {
    check_span_args(r, parts)?;
    let soft = (1..=parts)
        .map(|t| trapezoid(mu, sigma, r, t as f64))
        .collect();
    Ok(finish_mask(soft, mu, sigma, r))
}

/// Pointwise maximum of every component's trapezoid.
pub fn union_mask(params: &MixtureParams, r: f64, parts: usize) -> Result<SpanMask> {
    check_span_args(r, parts)?;
    let soft = (1..=parts)
        .map(|t| {
            params
                .mu
                .iter()
                .zip(&params.sigma)
                .map(|(&mu, &sigma)| trapezoid(mu, sigma, r, t as f64))
                .fold(0.0, f64::max)
        })
        .collect();
    let (mu, sigma) = select_component(params);
    Ok(finish_mask(soft, mu, sigma, r))
}

fn finish_mask(soft: Vec<f64>, anchor: f64, spread: f64, smoothness: f64) -> SpanMask {
    let mut mask = SpanMask {
        soft,
        anchor,
        spread,
        smoothness,
        discrete: None,
    };
    mask.discrete = extract_discrete_span(&mask, DEFAULT_SPAN_THRESHOLD);
    mask
}

pub fn selected_index(params: &MixtureParams) -> usize {
    argmax(&params.pi_raw)
}

/// `(mu, sigma)` of the component with the largest raw weight.
pub fn select_component(params: &MixtureParams) -> (f64, f64) {
    let m = selected_index(params);
    (params.mu[m], params.sigma[m])
}

/// The maximal run of parts at or above `threshold` that contains the part
/// nearest the anchor (1-based, inclusive).
pub fn extract_discrete_span(mask: &SpanMask, threshold: f64) -> Option<(usize, usize)> {
    let t = mask.soft.len();
    if t == 0 {
        return None;
    }
    let nearest = (mask.anchor.round().max(1.0) as usize).min(t) - 1;
    let passes = |i: usize| mask.soft[i] >= threshold;
    let seed = if passes(nearest) {
        nearest
    } else {
        // Closest clearing part; lower index on ties.
        (0..t)
            .filter(|&i| passes(i))
            .min_by_key(|&i| i.abs_diff(nearest))?
    };
    let mut start = seed;
    while start > 0 && passes(start - 1) {
        start -= 1;
    }
    let mut end = seed;
    while end + 1 < t && passes(end + 1) {
        end += 1;
    }
    Some((start + 1, end + 1))
}
