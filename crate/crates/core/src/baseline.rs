//! Unigram TF-IDF features with a softmax logistic-regression head.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{num_classes, tokenize, Instance};
use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax, Matrix};
use crate::optim::{AdamWConfig, BlockMoments};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.5,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfidfVectorizer {
    pub vocabulary: BTreeMap<String, usize>,
    /// `ln((1 + N) / (1 + df)) + 1`
    pub idf: Vec<f64>,
}

impl TfidfVectorizer {
    pub fn fit(corpus: &[Instance]) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for inst in corpus {
            let unique: BTreeSet<String> = tokenize(&inst.text).into_iter().collect();
            for tok in unique {
                *df.entry(tok).or_default() += 1;
            }
        }
        let n = corpus.len() as f64;
        let mut vocabulary = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (i, (tok, count)) in df.into_iter().enumerate() {
            vocabulary.insert(tok, i);
            idf.push(((1.0 + n) / (1.0 + count as f64)).ln() + 1.0);
        }
        Self { vocabulary, idf }
    }

    /// L2-normalized sparse row, sorted by feature index. Unknown tokens are ignored.
    pub fn transform(&self, text: &str) -> Vec<(usize, f64)> {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for tok in tokenize(text) {
            if let Some(&i) = self.vocabulary.get(&tok) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let mut row: Vec<(usize, f64)> = counts.into_iter().map(|(i, c)| (i, c * self.idf[i])).collect();
        let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|(_, v)| *v /= norm);
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfidfLogReg {
    pub vectorizer: TfidfVectorizer,
    /// `C × V`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl TfidfLogReg {
    fn logits(&self, row: &[(usize, f64)]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (c, o) in out.iter_mut().enumerate() {
            let w = self.weights.row(c);
            *o += row.iter().map(|&(i, v)| w[i] * v).sum::<f64>();
        }
        out
    }

    pub fn predict(&self, text: &str) -> usize {
        argmax(&self.logits(&self.vectorizer.transform(text)))
    }

    pub fn accuracy(&self, data: &[Instance]) -> f64 {
        let correct = data.iter().filter(|i| self.predict(&i.text) == i.label).count();
        correct as f64 / data.len().max(1) as f64
    }
}

/// Full-batch training from zero weights; deterministic.
pub fn fit_tfidf_logreg(train: &[Instance], cfg: &BaselineConfig) -> Result<TfidfLogReg> {
    let distinct: BTreeSet<usize> = train.iter().map(|i| i.label).collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidCorpus(
            "baseline needs at least two classes in the training corpus".into(),
        ));
    }
    let classes = num_classes(train);
    let vectorizer = TfidfVectorizer::fit(train);
    let rows: Vec<Vec<(usize, f64)>> = train.iter().map(|i| vectorizer.transform(&i.text)).collect();
    let v = vectorizer.idf.len();
    let mut model = TfidfLogReg {
        vectorizer,
        weights: Matrix::zeros(classes, v),
        bias: vec![0.0; classes],
    };
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut w_state = BlockMoments::new(classes * v);
    let mut b_state = BlockMoments::new(classes);
    let n = train.len() as f64;
    for _ in 0..cfg.epochs {
        let mut gw = Matrix::zeros(classes, v);
        let mut gb = vec![0.0; classes];
        for (row, inst) in rows.iter().zip(train) {
            let p = softmax(&model.logits(row));
            for c in 0..classes {
                let d = (p[c] - f64::from(u8::from(c == inst.label))) / n;
                gb[c] += d;
                let g = gw.row_mut(c);
                for &(i, x) in row {
                    g[i] += d * x;
                }
            }
        }
        w_state.update(&adam, &mut model.weights.data, &gw.data, cfg.learning_rate);
        b_state.update(&adam, &mut model.bias, &gb, cfg.learning_rate);
    }
    Ok(model)
}

/// Fit on `train` and report accuracy on `test`. Training starts from zero
/// weights and is full-batch, so no seed is involved.
pub fn baseline_tfidf_logreg(train: &[Instance], test: &[Instance], cfg: &BaselineConfig) -> Result<f64> {
    Ok(fit_tfidf_logreg(train, cfg)?.accuracy(test))
}
