//! Straight-line recomputation of the forward pass and loss from raw
//! parameter arrays. Shares no code with the library beyond reading its
//! parameter storage. Inputs are lowercase words separated by spaces.

use std::f64::consts::PI;

use protolens::model::Model;

pub struct Dims {
    pub k: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub n: usize,
    pub t_max: usize,
    pub hidden: usize,
    pub m: usize,
    pub r: f64,
}

pub struct Raw<'a> {
    pub w_enc: &'a [f64],
    pub b_enc: &'a [f64],
    pub w_in: &'a [f64],
    pub b_in: &'a [f64],
    pub w_out: &'a [f64],
    pub b_out: &'a [f64],
    pub w_mu: &'a [f64],
    pub b_mu: &'a [f64],
    pub w_sigma: &'a [f64],
    pub b_sigma: &'a [f64],
    pub w_nu: &'a [f64],
    pub b_nu: &'a [f64],
    pub protos: &'a [f64],
    pub w_head: &'a [f64],
    pub b_head: &'a [f64],
    pub gain: &'a [f64],
}

pub fn dims(model: &Model) -> Dims {
    let a = &model.arch;
    Dims {
        k: a.num_prototypes,
        c: a.num_classes,
        d: a.embed_dim,
        h: a.hash_dim,
        n: a.n_gram,
        t_max: a.t_max,
        hidden: a.mlp_hidden,
        m: a.components,
        r: a.span_smoothness,
    }
}

pub fn raw(model: &Model) -> Raw<'_> {
    let p = &model.params;
    Raw {
        w_enc: &p.encoder.projection.data,
        b_enc: &p.encoder.projection_bias,
        w_in: &p.heads.mlp_in.data,
        b_in: &p.heads.mlp_in_bias,
        w_out: &p.heads.mlp_out.data,
        b_out: &p.heads.mlp_out_bias,
        w_mu: &p.heads.mu.data,
        b_mu: &p.heads.mu_bias,
        w_sigma: &p.heads.sigma.data,
        b_sigma: &p.heads.sigma_bias,
        w_nu: &p.heads.stick.data,
        b_nu: &p.heads.stick_bias,
        protos: &p.bank.prototypes.data,
        w_head: &p.bank.head_weights.data,
        b_head: &p.bank.head_bias,
        gain: &p.bank.rms_gain,
    }
}

pub struct Instance {
    pub curves: Vec<Vec<f64>>,
    pub pi_raw: Vec<Vec<f64>>,
    pub pi_norm: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
    pub raw_sim: Vec<f64>,
    pub norm_sim: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub struct Loss {
    pub ce: f64,
    pub gmm: f64,
    pub div: f64,
    pub total: f64,
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    h
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for i in 0..u.len() {
        uv += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    if uu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    uv / (uu.sqrt() * vv.sqrt() + 1e-8)
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal(x: f64, mu: f64, s: f64) -> f64 {
    (-(x - mu) * (x - mu) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt())
}

pub fn forward(dm: &Dims, p: &Raw, text: &str) -> Instance {
    let words: Vec<&str> = text.split(' ').filter(|w| !w.is_empty()).collect();
    let l = words.len();
    let t_len = if l + 1 > dm.n { l + 1 - dm.n } else { 1 };
    let width = if dm.n < l { dm.n } else { l };

    // Part embeddings.
    let mut e = vec![vec![0.0; dm.d]; t_len];
    for t in 0..t_len {
        if width == 0 {
            continue;
        }
        let mut bag = vec![0.0; dm.h];
        for w in &words[t..t + width] {
            bag[(fnv(w) % dm.h as u64) as usize] += 1.0 / width as f64;
        }
        for i in 0..dm.d {
            let mut acc = p.b_enc[i];
            for j in 0..dm.h {
                acc += p.w_enc[i * dm.h + j] * bag[j];
            }
            e[t][i] = acc;
        }
    }

    let mut out = Instance {
        curves: vec![],
        pi_raw: vec![],
        pi_norm: vec![],
        mu: vec![],
        sigma: vec![],
        masks: vec![],
        raw_sim: vec![],
        norm_sim: vec![],
        logits: vec![],
        probs: vec![],
    };
    for k in 0..dm.k {
        let proto = &p.protos[k * dm.d..(k + 1) * dm.d];
        let curve: Vec<f64> = (0..t_len).map(|t| cos(&e[t], proto)).collect();

        let mut x = vec![0.0; dm.t_max];
        x[..t_len].copy_from_slice(&curve);
        let mut h1 = vec![0.0; dm.hidden];
        for i in 0..dm.hidden {
            let mut acc = p.b_in[i];
            for j in 0..dm.t_max {
                acc += p.w_in[i * dm.t_max + j] * x[j];
            }
            h1[i] = acc.tanh();
        }
        let mut h2 = vec![0.0; dm.hidden];
        for i in 0..dm.hidden {
            let mut acc = p.b_out[i];
            for j in 0..dm.hidden {
                acc += p.w_out[i * dm.hidden + j] * h1[j];
            }
            h2[i] = acc;
        }
        let head = |w: &[f64], b: &[f64], m: usize| {
            let mut acc = b[m];
            for j in 0..dm.hidden {
                acc += w[m * dm.hidden + j] * h2[j];
            }
            acc
        };
        let mut mu = vec![0.0; dm.m];
        let mut sigma = vec![0.0; dm.m];
        let mut nu = vec![0.0; dm.m];
        for m in 0..dm.m {
            mu[m] = sig(head(p.w_mu, p.b_mu, m)) * t_len as f64;
            let s = head(p.w_sigma, p.b_sigma, m);
            sigma[m] = (if s < -6.0 { -6.0 } else if s > 3.0 { 3.0 } else { s }).exp();
            nu[m] = sig(head(p.w_nu, p.b_nu, m));
        }
        let mut pi_raw = vec![0.0; dm.m];
        for m in 0..dm.m {
            let mut prod = 1.0;
            for l in 0..m {
                prod *= 1.0 - nu[l];
            }
            pi_raw[m] = nu[m] * prod;
        }
        let total: f64 = pi_raw.iter().sum();
        let pi_norm: Vec<f64> = pi_raw.iter().map(|w| w / total).collect();

        let mut best = 0;
        for m in 1..dm.m {
            if pi_raw[m] > pi_raw[best] {
                best = m;
            }
        }
        let mask: Vec<f64> = (1..=t_len)
            .map(|t| {
                let v = (dm.r + sigma[best] - (mu[best] - t as f64).abs()) / dm.r;
                v.max(0.0).min(1.0)
            })
            .collect();

        let mut z = vec![0.0; dm.d];
        let mut mass = 0.0;
        for t in 0..t_len {
            mass += mask[t];
            for i in 0..dm.d {
                z[i] += mask[t] * e[t][i];
            }
        }
        for v in z.iter_mut() {
            *v /= mass + 1e-8;
        }
        out.raw_sim.push(cos(&z, proto));
        out.curves.push(curve);
        out.pi_raw.push(pi_raw);
        out.pi_norm.push(pi_norm);
        out.mu.push(mu);
        out.sigma.push(sigma);
        out.masks.push(mask);
    }

    let ms: f64 = out.raw_sim.iter().map(|s| s * s).sum::<f64>() / dm.k as f64;
    let rms = (ms + 1e-6).sqrt();
    out.norm_sim = (0..dm.k).map(|k| p.gain[k] * out.raw_sim[k] / rms).collect();
    out.logits = (0..dm.c)
        .map(|c| p.b_head[c] + (0..dm.k).map(|k| p.w_head[c * dm.k + k] * out.norm_sim[k]).sum::<f64>())
        .collect();
    let top = out.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = out.logits.iter().map(|z| (z - top).exp()).collect();
    let z: f64 = ex.iter().sum();
    out.probs = ex.iter().map(|v| v / z).collect();
    out
}

fn nll(curve: &[f64], pi: &[f64], mu: &[f64], sigma: &[f64], eps: f64) -> f64 {
    let lo = curve.iter().cloned().fold(f64::INFINITY, f64::min);
    let total: f64 = curve.iter().map(|s| s - lo).sum();
    let mut acc = 0.0;
    for (t, s) in curve.iter().enumerate() {
        let w = if total > 1e-12 { (s - lo) / total } else { 1.0 / curve.len() as f64 };
        let mut dens = 0.0;
        for m in 0..pi.len() {
            dens += pi[m] * normal((t + 1) as f64, mu[m], sigma[m]);
        }
        acc -= w * (dens + eps).ln();
    }
    acc
}

pub fn loss(dm: &Dims, p: &Raw, batch: &[(&str, usize)], alpha: f64, beta: f64, lambda: f64, eps: f64) -> Loss {
    let mut ce = 0.0;
    let mut nll_sum = 0.0;
    let mut l1_sum = 0.0;
    for (text, label) in batch {
        let f = forward(dm, p, text);
        ce -= f.probs[*label].max(1e-12).ln();
        for k in 0..dm.k {
            nll_sum += nll(&f.curves[k], &f.pi_norm[k], &f.mu[k], &f.sigma[k], eps);
            l1_sum += f.pi_raw[k].iter().map(|w| w.abs()).sum::<f64>();
        }
    }
    let b = batch.len() as f64;
    let pairs = b * dm.k as f64;
    let gmm = nll_sum / pairs + lambda * l1_sum / pairs;
    let mut div = 0.0;
    for i in 0..dm.k {
        for j in i + 1..dm.k {
            div += cos(&p.protos[i * dm.d..(i + 1) * dm.d], &p.protos[j * dm.d..(j + 1) * dm.d]);
        }
    }
    let ce = ce / b;
    Loss {
        ce,
        gmm,
        div,
        total: ce + alpha * gmm + beta * div,
    }
}
