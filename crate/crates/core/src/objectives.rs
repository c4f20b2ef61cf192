//! Loss terms, their analytic gradients, and a central-difference checker.
//!
//! ```text
//! total = CE + alpha * (mean NLL + lambda * mean sum(pi_raw)) + beta * diversity
//! ```
//!
//! The NLL term weights each part position by its min-shifted similarity, so
//! the mixture is pulled toward high-similarity regions of the curve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::model::{cosine, cosine_backward, EncodedText, ForwardPass, Model, Parameters, EPS_MASK};
use crate::span::{normal_density, trapezoid, MixtureGrad, MixtureParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_l1: f64,
    pub eps_nll: f64,
    /// Penalize prototype similarity (`sum cos`) rather than the literal
    /// `sum (1 - cos)`, which rewards collapse.
    pub diversity_sign_corrected: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1e-3,
            lambda_l1: 1e-3,
            eps_nll: 1e-8,
            diversity_sign_corrected: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.lambda_l1 < 0.0 {
            return Err(Error::Config("alpha, beta and lambda_l1 must be non-negative".into()));
        }
        if !(self.eps_nll > 0.0) {
            return Err(Error::Config("eps_nll must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Mean NLL plus the L1 term.
    pub gmm: f64,
    pub l1: f64,
    pub div: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("ce", self.ce),
            ("gmm", self.gmm),
            ("div", self.div),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// A text prepared for the model together with its label.
#[derive(Debug, Clone)]
pub struct Example {
    pub encoded: EncodedText,
    pub label: usize,
}

impl Example {
    pub fn new(model: &Model, text: &str, label: usize) -> Result<Self> {
        Ok(Self {
            encoded: model.encode(text)?,
            label,
        })
    }
}

pub fn cross_entropy(label: usize, probabilities: &[f64]) -> f64 {
    -probabilities[label].max(1e-12).ln()
}

/// Position weights: min-shifted similarities normalized to sum to one,
/// uniform when the curve is flat.
fn position_weights(curve: &[f64]) -> (Vec<f64>, Option<(usize, f64)>) {
    let (argmin, min) = curve
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best });
    let shifted: Vec<f64> = curve.iter().map(|v| v - min).collect();
    let total: f64 = shifted.iter().sum();
    if total > 1e-12 {
        (shifted.iter().map(|s| s / total).collect(), Some((argmin, total)))
    } else {
        (vec![1.0 / curve.len() as f64; curve.len()], None)
    }
}

fn mixture_density(params: &MixtureParams, position: f64) -> f64 {
    params
        .pi_norm
        .iter()
        .zip(params.mu.iter().zip(&params.sigma))
        .map(|(w, (&mu, &sigma))| w * normal_density(position, mu, sigma))
        .sum()
}

pub fn nll_loss(curve: &[f64], params: &MixtureParams, eps_nll: f64) -> f64 {
    let (weights, _) = position_weights(curve);
    -weights
        .iter()
        .enumerate()
        .map(|(t, w)| w * (mixture_density(params, (t + 1) as f64) + eps_nll).ln())
        .sum::<f64>()
}

/// Gradient of `upstream * nll_loss`; mixture gradients are added to `grad`,
/// the curve gradient is returned.
fn nll_backward(curve: &[f64], params: &MixtureParams, eps_nll: f64, upstream: f64, grad: &mut MixtureGrad) -> Vec<f64> {
    let (weights, shift) = position_weights(curve);
    let m = params.mu.len();
    let mut d_weights = vec![0.0; curve.len()];
    for (t, &w) in weights.iter().enumerate() {
        let x = (t + 1) as f64;
        let comps: Vec<f64> = (0..m)
            .map(|j| normal_density(x, params.mu[j], params.sigma[j]))
            .collect();
        let density: f64 = comps.iter().zip(&params.pi_norm).map(|(c, p)| c * p).sum::<f64>() + eps_nll;
        d_weights[t] = -upstream * density.ln();
        let d_density = -upstream * w / density;
        for j in 0..m {
            let (mu, sigma) = (params.mu[j], params.sigma[j]);
            let z = (x - mu) / sigma;
            grad.pi_norm[j] += d_density * comps[j];
            grad.mu[j] += d_density * params.pi_norm[j] * comps[j] * z / sigma;
            grad.sigma[j] += d_density * params.pi_norm[j] * comps[j] * (z * z - 1.0) / sigma;
        }
    }

    let mut d_curve = vec![0.0; curve.len()];
    if let Some((argmin, total)) = shift {
        let weighted: f64 = d_weights.iter().zip(&weights).map(|(g, w)| g * w).sum();
        let mut sum_shift = 0.0;
        for (t, g) in d_weights.iter().enumerate() {
            let d_shifted = (g - weighted) / total;
            d_curve[t] += d_shifted;
            sum_shift += d_shifted;
        }
        d_curve[argmin] -= sum_shift;
    }
    d_curve
}

/// Mean NLL over (instance, prototype) pairs plus `lambda * mean sum |pi_raw|`.
pub fn gmm_loss(curves: &[Vec<f64>], params: &[MixtureParams], cfg: &LossConfig) -> Result<(f64, f64)> {
    if curves.is_empty() || curves.len() != params.len() {
        return Err(Error::InvalidParameter(
            "gmm_loss needs a non-empty batch of matching curves and parameters".into(),
        ));
    }
    let n = curves.len() as f64;
    let nll: f64 = curves
        .iter()
        .zip(params)
        .map(|(c, p)| nll_loss(c, p, cfg.eps_nll))
        .sum::<f64>()
        / n;
    let l1 = cfg.lambda_l1
        * params
            .iter()
            .map(|p| p.pi_raw.iter().map(|w| w.abs()).sum::<f64>())
            .sum::<f64>()
        / n;
    Ok((nll + l1, l1))
}

/// Pairwise prototype penalty over `i < j`.
pub fn diversity_loss(prototypes: &Matrix, sign_corrected: bool) -> Result<f64> {
    let k = prototypes.rows;
    if k < 2 {
        return Err(Error::InvalidParameter("diversity loss needs at least two prototypes".into()));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let c = cosine(prototypes.row(i), prototypes.row(j));
            total += if sign_corrected { c } else { 1.0 - c };
        }
    }
    Ok(total)
}

fn diversity_backward(prototypes: &Matrix, sign_corrected: bool, upstream: f64, grad: &mut Matrix) {
    let sign = if sign_corrected { upstream } else { -upstream };
    let k = prototypes.rows;
    for i in 0..k {
        for j in i + 1..k {
            let (di, dj) = cosine_backward(prototypes.row(i), prototypes.row(j), sign);
            axpy(1.0, &di, grad.row_mut(i));
            axpy(1.0, &dj, grad.row_mut(j));
        }
    }
}

/// Mean pairwise cosine between prototypes.
pub fn mean_pairwise_cosine(prototypes: &Matrix) -> f64 {
    let k = prototypes.rows;
    let pairs = k * (k - 1) / 2;
    if pairs == 0 {
        return 0.0;
    }
    diversity_loss(prototypes, true).unwrap_or(0.0) / pairs as f64
}

fn forward_batch(model: &Model, batch: &[Example]) -> Result<Vec<ForwardPass>> {
    batch.iter().map(|ex| model.forward_encoded(&ex.encoded)).collect()
}

fn breakdown(model: &Model, batch: &[Example], passes: &[ForwardPass], cfg: &LossConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("loss needs a non-empty batch".into()));
    }
    let ce = batch
        .iter()
        .zip(passes)
        .map(|(ex, f)| cross_entropy(ex.label, &f.probabilities))
        .sum::<f64>()
        / batch.len() as f64;
    let curves: Vec<Vec<f64>> = passes
        .iter()
        .flat_map(|f| f.prototypes.iter().map(|p| p.curve.clone()))
        .collect();
    let params: Vec<MixtureParams> = passes
        .iter()
        .flat_map(|f| f.prototypes.iter().map(|p| p.mixture.params.clone()))
        .collect();
    let (gmm, l1) = gmm_loss(&curves, &params, cfg)?;
    let div = diversity_loss(&model.params.bank.prototypes, cfg.diversity_sign_corrected)?;
    Ok(LossBreakdown {
        ce,
        gmm,
        l1,
        div,
        total: ce + cfg.alpha * gmm + cfg.beta * div,
    })
}

pub fn total_loss(batch: &[Example], model: &Model, cfg: &LossConfig) -> Result<LossBreakdown> {
    let passes = forward_batch(model, batch)?;
    breakdown(model, batch, &passes, cfg)
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_gradient(batch: &[Example], model: &Model, cfg: &LossConfig) -> Result<(LossBreakdown, Parameters)> {
    let passes = forward_batch(model, batch)?;
    let loss = breakdown(model, batch, &passes, cfg)?;
    let mut grad = Parameters::zeros(&model.arch);

    let b = batch.len() as f64;
    let pairs = b * model.arch.num_prototypes as f64;
    for (ex, pass) in batch.iter().zip(&passes) {
        backprop_example(
            model,
            ex,
            pass,
            cfg,
            1.0 / b,
            cfg.alpha / pairs,
            cfg.alpha * cfg.lambda_l1 / pairs,
            &mut grad,
        );
    }
    if cfg.beta != 0.0 {
        diversity_backward(
            &model.params.bank.prototypes,
            cfg.diversity_sign_corrected,
            cfg.beta,
            &mut grad.bank.prototypes,
        );
    }
    Ok((loss, grad))
}

#[allow(clippy::too_many_arguments)]
fn backprop_example(
    model: &Model,
    ex: &Example,
    pass: &ForwardPass,
    cfg: &LossConfig,
    ce_scale: f64,
    nll_scale: f64,
    l1_scale: f64,
    grad: &mut Parameters,
) {
    let params = &model.params;
    let bank = &params.bank;
    let k_count = bank.num_prototypes();
    let t_count = pass.part_embeddings.rows;
    let r = model.arch.span_smoothness;

    // Softmax cross-entropy.
    let p_true = pass.probabilities[ex.label];
    let d_logits: Vec<f64> = if p_true < 1e-12 {
        vec![0.0; pass.probabilities.len()]
    } else {
        pass.probabilities
            .iter()
            .enumerate()
            .map(|(c, p)| ce_scale * (p - f64::from(u8::from(c == ex.label))))
            .collect()
    };
    grad.bank.head_weights.add_outer(&d_logits, &pass.similarity.normalized);
    axpy(1.0, &d_logits, &mut grad.bank.head_bias);
    let d_norm = bank.head_weights.matvec_t(&d_logits);

    // RMSNorm across prototypes.
    let raw = &pass.similarity.raw;
    let rms = pass.rms;
    let coupling: f64 = (0..k_count)
        .map(|k| d_norm[k] * bank.rms_gain[k] * raw[k])
        .sum::<f64>()
        / (rms * rms * rms * k_count as f64);
    let d_raw: Vec<f64> = (0..k_count)
        .map(|k| {
            grad.bank.rms_gain[k] += d_norm[k] * raw[k] / rms;
            d_norm[k] * bank.rms_gain[k] / rms - coupling * raw[k]
        })
        .collect();

    let mut d_parts = Matrix::zeros(t_count, model.arch.embed_dim);
    for (k, trace) in pass.prototypes.iter().enumerate() {
        let proto = bank.prototypes.row(k);

        // raw_k = cos(Z_k, p_k)
        let (d_refined, d_proto) = cosine_backward(&trace.refined, proto, d_raw[k]);
        axpy(1.0, &d_proto, grad.bank.prototypes.row_mut(k));

        // Z = sum_t m_t e_t / (sum_t m_t + eps)
        let soft = &trace.mask.soft;
        let denom = soft.iter().sum::<f64>() + EPS_MASK;
        let z_dot = crate::linalg::dot(&trace.refined, &d_refined);
        let mut d_mask = vec![0.0; t_count];
        for t in 0..t_count {
            let e = pass.part_embeddings.row(t);
            axpy(soft[t] / denom, &d_refined, d_parts.row_mut(t));
            d_mask[t] = (crate::linalg::dot(e, &d_refined) - z_dot) / denom;
        }

        // Mask -> (mu, sigma) of the contributing component(s).
        let mixture = &trace.mixture.params;
        let m_count = mixture.mu.len();
        let mut d_mix = MixtureGrad::zeros(m_count);
        for (t, &g) in d_mask.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let pos = (t + 1) as f64;
            let comp = if model.arch.union_mask {
                let mut best = 0;
                for j in 1..m_count {
                    if trapezoid(mixture.mu[j], mixture.sigma[j], r, pos)
                        > trapezoid(mixture.mu[best], mixture.sigma[best], r, pos)
                    {
                        best = j;
                    }
                }
                best
            } else {
                trace.component
            };
            let (mu, sigma) = (mixture.mu[comp], mixture.sigma[comp]);
            let v = (r + sigma - (mu - pos).abs()) / r;
            if v > 0.0 && v < 1.0 {
                d_mix.sigma[comp] += g / r;
                d_mix.mu[comp] -= g * (mu - pos).signum() / r;
            }
        }

        // GMM terms.
        let mut d_curve = nll_backward(&trace.curve, mixture, cfg.eps_nll, nll_scale, &mut d_mix);
        for (g, w) in d_mix.pi_raw.iter_mut().zip(&mixture.pi_raw) {
            *g += l1_scale * w.signum();
        }

        let d_curve_heads = trace.mixture.backward(&params.heads, &d_mix, &mut grad.heads);
        axpy(1.0, &d_curve_heads, &mut d_curve);

        // s_t = cos(e_t, p_k)
        for (t, &g) in d_curve.iter().enumerate() {
            let (d_e, d_p) = cosine_backward(pass.part_embeddings.row(t), proto, g);
            axpy(1.0, &d_e, d_parts.row_mut(t));
            axpy(1.0, &d_p, grad.bank.prototypes.row_mut(k));
        }
    }

    for (bag, d_e) in ex.encoded.bags.iter().zip(d_parts.iter_rows()) {
        EncoderParams::backprop_bag(&mut grad.encoder, bag, d_e);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    /// Max relative error per parameter block.
    pub groups: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.values().copied().fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|(_, &e)| !(e < self.tolerance))
            .map(|(name, _)| name.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::GradCheck(format!(
                "parameter groups over tolerance {:e}: {}",
                self.tolerance,
                self.failures().join(", ")
            )))
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare `gradient` against central differences of `loss` for every scalar.
pub fn grad_check_with<L, G>(model: &Model, loss: L, gradient: G, step: f64, tolerance: f64) -> GradCheckReport
where
    L: Fn(&Model) -> f64,
    G: Fn(&Model) -> Parameters,
{
    let analytic = gradient(model);
    let mut probe = model.clone();
    let mut groups = BTreeMap::new();
    for (b, (name, values)) in analytic.blocks().iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (i, &a) in values.iter().enumerate() {
            let original = probe.params.blocks()[b].1[i];
            probe.params.blocks_mut()[b].1[i] = original + step;
            let up = loss(&probe);
            probe.params.blocks_mut()[b].1[i] = original - step;
            let down = loss(&probe);
            probe.params.blocks_mut()[b].1[i] = original;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
        groups.insert(name.to_string(), worst);
    }
    GradCheckReport {
        step,
        tolerance,
        groups,
    }
}

pub fn grad_check(model: &Model, batch: &[Example], cfg: &LossConfig, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    // Surface forward errors before the perturbation loop.
    total_loss(batch, model, cfg)?;
    Ok(grad_check_with(
        model,
        |m| total_loss(batch, m, cfg).map(|l| l.total).unwrap_or(f64::NAN),
        |m| {
            loss_and_gradient(batch, m, cfg)
                .map(|(_, g)| g)
                .unwrap_or_else(|_| Parameters::zeros(&m.arch))
        },
        step,
        tolerance,
    ))
}
