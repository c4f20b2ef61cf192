//! Ablation runs and hyperparameter sweeps.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::trainer::{evaluate, train};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    /// Mean pairwise prototype cosine after training, per seed.
    pub prototype_cosines: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

impl AblationVariant {
    pub fn mean_accuracy(&self) -> f64 {
        mean(&self.accuracies)
    }

    /// Sample standard deviation; zero for a single seed.
    pub fn std_accuracy(&self) -> f64 {
        if self.accuracies.len() < 2 {
            return 0.0;
        }
        let m = self.mean_accuracy();
        let ss: f64 = self.accuracies.iter().map(|a| (a - m).powi(2)).sum();
        (ss / (self.accuracies.len() - 1) as f64).sqrt()
    }

    pub fn mean_prototype_cosine(&self) -> f64 {
        mean(&self.prototype_cosines)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<AblationVariant>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&AblationVariant> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("variant\tmean_acc\tstd_acc\tproto_cos\n");
        for v in &self.variants {
            let _ = writeln!(
                out,
                "{}\t{:.4}\t{:.4}\t{:+.4}",
                v.name,
                v.mean_accuracy(),
                v.std_accuracy(),
                v.mean_prototype_cosine()
            );
        }
        out
    }
}

/// Train the full model and each single-component ablation once per seed.
pub fn run_ablation(base: &TrainConfig, train_set: &[Instance], test: &[Instance], seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("ablation needs at least one seed".into()));
    }
    let variants: [(&str, bool, bool); 3] = [
        ("full", false, false),
        ("no_alignment", true, false),
        ("no_diversity", false, true),
    ];
    let mut report = AblationReport { variants: vec![] };
    for (name, no_alignment, no_diversity) in variants {
        let mut v = AblationVariant {
            name: name.to_string(),
            seeds: seeds.to_vec(),
            accuracies: vec![],
            prototype_cosines: vec![],
        };
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.ablations.no_alignment = no_alignment;
            cfg.ablations.no_diversity = no_diversity;
            let out = train(&cfg, train_set, None)?;
            v.accuracies.push(evaluate(&out.model, test)?.accuracy);
            v.prototype_cosines
                .push(crate::objectives::mean_pairwise_cosine(&out.model.params.bank.prototypes));
        }
        report.variants.push(v);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "K")]
    Prototypes,
    #[serde(rename = "ngram")]
    NGram,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" | "k" => Ok(Self::Prototypes),
            "ngram" | "n_gram" | "n" => Ok(Self::NGram),
            other => Err(Error::InvalidParameter(format!(
                "unknown sweep parameter {other:?} (expected K or ngram)"
            ))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Prototypes => "K",
            Self::NGram => "ngram",
        }
    }

    fn apply(self, cfg: &mut TrainConfig, value: usize) {
        match self {
            Self::Prototypes => cfg.num_prototypes = value,
            Self::NGram => cfg.n_gram = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub test_accuracy: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub epochs: usize,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Every point has one finite record per epoch, in order, with
    /// accuracies in `[0, 1]`.
    pub fn is_well_formed(&self) -> bool {
        let unit = |a: f64| (0.0..=1.0).contains(&a);
        !self.points.is_empty()
            && self.points.iter().all(|p| {
                unit(p.test_accuracy)
                    && p.curve.len() == self.epochs
                    && p.curve.iter().enumerate().all(|(i, c)| {
                        c.epoch == i + 1
                            && c.loss.is_finite()
                            && unit(c.train_accuracy)
                            && c.val_accuracy.is_none_or(unit)
                    })
            })
    }

    pub fn render(&self) -> String {
        let mut out = format!("{}\ttest_acc\tfinal_loss\tfinal_val_acc\n", self.param.name());
        for p in &self.points {
            let last = p.curve.last();
            let _ = writeln!(
                out,
                "{}\t{:.4}\t{}\t{}",
                p.value,
                p.test_accuracy,
                last.map_or("-".into(), |c| format!("{:.4}", c.loss)),
                last.and_then(|c| c.val_accuracy)
                    .map_or("-".into(), |a| format!("{a:.4}")),
            );
        }
        out
    }
}

pub fn sweep(
    base: &TrainConfig,
    param: SweepParam,
    values: &[usize],
    train_set: &[Instance],
    val: Option<&[Instance]>,
    test: &[Instance],
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one value".into()));
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        param.apply(&mut cfg, value);
        let out = train(&cfg, train_set, val)?;
        points.push(SweepPoint {
            value,
            test_accuracy: evaluate(&out.model, test)?.accuracy,
            curve: out
                .history
                .epochs
                .iter()
                .map(|r| CurvePoint {
                    epoch: r.epoch,
                    loss: r.loss.total,
                    train_accuracy: r.train_accuracy,
                    val_accuracy: r.val_accuracy,
                })
                .collect(),
        });
    }
    Ok(SweepReport {
        param,
        epochs: base.epochs,
        points,
    })
}
