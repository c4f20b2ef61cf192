//! Prototype alignment: cluster training sentences, keep the sentences
//! nearest each centre as candidates, and pull every prototype toward the
//! mean of its most similar candidates with a sigmoid-gated step.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{euclidean, mean_rows, sigmoid, squared_euclidean, Matrix};
use crate::model::{cosine, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Movement threshold, as a Euclidean distance in embedding space.
    pub tau: f64,
    /// Sharpness of the gate between "step by tau" and "jump to target".
    pub gamma: f64,
    pub eps: f64,
    pub top_candidates: usize,
    pub period_epochs: usize,
    /// First epoch (1-based) at whose end alignment runs.
    pub warmup_epochs: usize,
    /// k-means cluster count; `None` means one cluster per prototype.
    pub clusters: Option<usize>,
    pub per_cluster_top: usize,
    pub kmeans_iters: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            gamma: 10.0,
            eps: 1e-8,
            top_candidates: 3,
            period_epochs: 1,
            warmup_epochs: 1,
            clusters: None,
            per_cluster_top: 50,
            kmeans_iters: 100,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.gamma > 0.0 && self.eps > 0.0) {
            return Err(Error::Config("alignment tau, gamma and eps must be positive".into()));
        }
        if self.top_candidates == 0 || self.period_epochs == 0 || self.per_cluster_top == 0 {
            return Err(Error::Config(
                "alignment top_candidates, period_epochs and per_cluster_top must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Whether alignment runs at the end of `epoch` (1-based).
    pub fn runs_after(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs && (epoch - self.warmup_epochs).is_multiple_of(self.period_epochs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn nearest_center(point: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter_rows().enumerate() {
        let d = squared_euclidean(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<KMeans> {
    let n = vectors.len();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "k-means needs 1 <= k <= n (k={k}, n={n})"
        )));
    }
    let dim = vectors[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = Matrix::zeros(k, dim);
    centers.row_mut(0).copy_from_slice(&vectors[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = vectors.iter().map(|v| squared_euclidean(v, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(&vectors[pick]);
        for (slot, v) in d2.iter_mut().zip(vectors) {
            *slot = slot.min(squared_euclidean(v, centers.row(c)));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut cost = 0.0;
        let mut dists = vec![0.0; n];
        for (i, v) in vectors.iter().enumerate() {
            let (c, d) = nearest_center(v, &centers);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            dists[i] = d;
            cost += d;
        }
        objective.push(cost);
        if !changed {
            break;
        }

        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignments) {
            crate::linalg::axpy(1.0, v, sums.row_mut(a));
            counts[a] += 1;
        }
        let mut taken = BTreeSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                // Re-seed an empty cluster at the point farthest from its centre.
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken.insert(far);
                centers.row_mut(c).copy_from_slice(&vectors[far]);
            }
        }
    }
    Ok(KMeans {
        centers,
        assignments,
        objective,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sentence: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
    pub clusters: usize,
    pub per_cluster_top: usize,
}

impl CandidatePool {
    /// Deduplicate sentences, cluster their embeddings, and keep up to
    /// `per_cluster_top` members nearest each centre.
    pub fn build<F>(
        sentences: &[&str],
        mut embed: F,
        clusters: usize,
        per_cluster_top: usize,
        max_iters: usize,
        seed: u64,
    ) -> Result<Self>
    where
        F: FnMut(&str) -> Vec<f64>,
    {
        let mut seen = BTreeSet::new();
        let unique: Vec<&str> = sentences.iter().copied().filter(|s| seen.insert(*s)).collect();
        if unique.len() < clusters {
            return Err(Error::InvalidParameter(format!(
                "candidate pool needs at least {clusters} distinct sentences, got {}",
                unique.len()
            )));
        }
        let vectors: Vec<Vec<f64>> = unique.iter().map(|s| embed(s)).collect();
        let km = kmeans(&vectors, clusters, max_iters, seed)?;

        let mut candidates = Vec::new();
        for c in 0..clusters {
            let mut members: Vec<(f64, usize)> = km
                .assignments
                .iter()
                .enumerate()
                .filter(|(_, &a)| a == c)
                .map(|(i, _)| (euclidean(&vectors[i], km.centers.row(c)), i))
                .collect();
            members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            candidates.extend(members.into_iter().take(per_cluster_top).map(|(_, i)| Candidate {
                sentence: unique[i].to_string(),
                embedding: vectors[i].clone(),
            }));
        }
        Ok(Self {
            candidates,
            clusters,
            per_cluster_top,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Mean of the `top` candidates most cosine-similar to `prototype`, and
/// those candidates' indices in rank order.
pub fn representative_embedding(prototype: &[f64], pool: &CandidatePool, top: usize) -> (Vec<f64>, Vec<usize>) {
    let mut ranked: Vec<(f64, usize)> = pool
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (cosine(prototype, &c.embedding), i))
        .collect();
    // Stable sort keeps pool order among ties.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let chosen: Vec<usize> = ranked.into_iter().take(top).map(|(_, i)| i).collect();
    let mean = mean_rows(
        chosen.iter().map(|&i| pool.candidates[i].embedding.as_slice()),
        prototype.len(),
    );
    (mean, chosen)
}

/// `p' = w (p + tau u) + (1 - w) c`, `w = sigmoid(gamma (|c - p| - tau))`,
/// `u = (c - p) / (|c - p| + eps)`.
pub fn align_prototype(p: &[f64], c: &[f64], cfg: &AlignmentConfig) -> Vec<f64> {
    let dist = euclidean(c, p);
    let weight = sigmoid(cfg.gamma * (dist - cfg.tau));
    p.iter()
        .zip(c)
        .map(|(&pi, &ci)| {
            let u = (ci - pi) / (dist + cfg.eps);
            weight * (pi + cfg.tau * u) + (1.0 - weight) * ci
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub prototype_id: usize,
    /// Chosen candidates, most similar first.
    pub sentences: Vec<String>,
    pub distance: f64,
    pub displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentLog {
    pub epoch: usize,
    pub records: Vec<AlignmentRecord>,
}

impl AlignmentLog {
    /// Display interpretation of prototype `k`: its top-ranked sentence.
    pub fn sentence_for(&self, k: usize) -> Option<&str> {
        self.records
            .iter()
            .find(|r| r.prototype_id == k)
            .and_then(|r| r.sentences.first())
            .map(String::as_str)
    }

    pub fn mean_displacement(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.displacement).sum::<f64>() / self.records.len() as f64
    }
}

/// Move every prototype toward its representative embedding and record the
/// chosen sentences on the model.
pub fn align_all<'a>(model: &'a mut Model, pool: &CandidatePool, cfg: &AlignmentConfig, epoch: usize) -> Result<&'a AlignmentLog> {
    if pool.is_empty() {
        return Err(Error::InvalidParameter("candidate pool is empty".into()));
    }
    let bank = &mut model.params.bank;
    let mut records = Vec::with_capacity(bank.num_prototypes());
    for k in 0..bank.num_prototypes() {
        let p = bank.prototypes.row(k).to_vec();
        let (c, chosen) = representative_embedding(&p, pool, cfg.top_candidates);
        let updated = align_prototype(&p, &c, cfg);
        records.push(AlignmentRecord {
            prototype_id: k,
            sentences: chosen.iter().map(|&i| pool.candidates[i].sentence.clone()).collect(),
            distance: euclidean(&p, &c),
            displacement: euclidean(&updated, &p),
        });
        bank.prototypes.row_mut(k).copy_from_slice(&updated);
    }
    Ok(model.alignment.insert(AlignmentLog { epoch, records }))
}
