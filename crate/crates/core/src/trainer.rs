//! Minibatch training, evaluation, and the per-epoch alignment schedule.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_all, CandidatePool};
use crate::config::TrainConfig;
use crate::data::{generate_synthetic, num_classes, split_sentences, Instance, SyntheticSpec};
use crate::encoder::load_cache;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{loss_and_gradient, mean_pairwise_cosine, total_loss, Example, LossBreakdown};
use crate::optim::AdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Batch losses averaged with batch-size weights.
    pub loss: LossBreakdown,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Mean prototype displacement, when alignment ran after this epoch.
    pub alignment_displacement: Option<f64>,
    pub prototype_cosine: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub history: History,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub count: usize,
    pub predictions: Vec<usize>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Distinct sentences in corpus order.
pub fn corpus_sentences(corpus: &[Instance]) -> Vec<&str> {
    let mut seen = BTreeSet::new();
    corpus
        .iter()
        .flat_map(|inst| split_sentences(&inst.text))
        .filter(|s| seen.insert(*s))
        .collect()
}

fn check_corpus(corpus: &[Instance], name: &str) -> Result<usize> {
    if corpus.is_empty() {
        return Err(Error::InvalidCorpus(format!("{name} corpus is empty")));
    }
    let distinct: BTreeSet<usize> = corpus.iter().map(|i| i.label).collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidCorpus(format!("{name} corpus has fewer than two classes")));
    }
    Ok(num_classes(corpus))
}

/// Build a model from `cfg`, with prototypes initialized from training sentences.
pub fn initialize(cfg: &TrainConfig, train: &[Instance], rng: &mut ChaCha8Rng) -> Result<Model> {
    cfg.validate()?;
    let classes = check_corpus(train, "training")?;
    let mut model = Model::new(cfg.architecture(classes), &cfg.init, rng)?;
    if let Some(path) = &cfg.embedding_cache {
        model = model.with_cache(load_cache(path)?)?;
    }
    model.init_prototypes_from(&corpus_sentences(train), rng)?;
    Ok(model)
}

pub fn train(cfg: &TrainConfig, train: &[Instance], val: Option<&[Instance]>) -> Result<Trained> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = initialize(cfg, train, &mut rng)?;
    let loss_cfg = cfg.effective_loss();
    let schedule = cfg.schedule();
    let mut optimizer = AdamW::new(cfg.optimizer(), &model.params);

    let examples = train
        .iter()
        .map(|inst| Example::new(&model, &inst.text, inst.label))
        .collect::<Result<Vec<_>>>()?;
    let sentences = corpus_sentences(train);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let lr = schedule.rate(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grad) = loss_and_gradient(&batch, &model, &loss_cfg)?;
            let bad_term = loss
                .non_finite_term()
                .or_else(|| (!grad.all_finite()).then_some("gradient"));
            if let Some(term) = bad_term {
                return Err(Error::NonFiniteLoss {
                    term,
                    epoch: epoch + 1,
                    step: step + 1,
                });
            }
            optimizer.step(&mut model.params, &grad, lr);
            let w = chunk.len() as f64;
            sum.ce += w * loss.ce;
            sum.gmm += w * loss.gmm;
            sum.l1 += w * loss.l1;
            sum.div += w * loss.div;
            sum.total += w * loss.total;
        }
        let n = examples.len() as f64;
        let mean = LossBreakdown {
            ce: sum.ce / n,
            gmm: sum.gmm / n,
            l1: sum.l1 / n,
            div: sum.div / n,
            total: sum.total / n,
        };

        let mut displacement = None;
        if !cfg.ablations.no_alignment && cfg.alignment.runs_after(epoch + 1) {
            let clusters = cfg
                .alignment
                .clusters
                .unwrap_or(cfg.num_prototypes)
                .min(sentences.len());
            let pool = CandidatePool::build(
                &sentences,
                |s| model.sentence_embedding(s),
                clusters,
                cfg.alignment.per_cluster_top,
                cfg.alignment.kmeans_iters,
                cfg.seed.wrapping_add(epoch as u64 + 1),
            )?;
            let log = align_all(&mut model, &pool, &cfg.alignment, epoch + 1)?;
            displacement = Some(log.mean_displacement());
            optimizer.reset_block("prototypes");
        }

        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            loss: mean,
            train_accuracy: accuracy_on(&model, &examples)?,
            val_accuracy: match val {
                Some(v) if !v.is_empty() => Some(evaluate(&model, v)?.accuracy),
                _ => None,
            },
            alignment_displacement: displacement,
            prototype_cosine: mean_pairwise_cosine(&model.params.bank.prototypes),
        });
    }

    Ok(Trained {
        model,
        history,
        config: cfg.clone(),
    })
}

fn accuracy_on(model: &Model, examples: &[Example]) -> Result<f64> {
    let mut correct = 0usize;
    for ex in examples {
        if model.forward_encoded(&ex.encoded)?.prediction == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len().max(1) as f64)
}

pub fn evaluate(model: &Model, data: &[Instance]) -> Result<Evaluation> {
    let classes = model.arch.num_classes;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut predictions = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    for inst in data {
        if inst.label >= classes {
            return Err(Error::InvalidCorpus(format!(
                "label {} is outside the model's {classes} classes",
                inst.label
            )));
        }
        let pred = model.forward(&inst.text)?.prediction;
        confusion[inst.label][pred] += 1;
        correct += usize::from(pred == inst.label);
        predictions.push(pred);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len().max(1) as f64,
        count: data.len(),
        predictions,
        confusion,
    })
}

/// Total loss of `model` on a labelled corpus, as one batch.
pub fn corpus_loss(model: &Model, data: &[Instance], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let batch = data
        .iter()
        .map(|inst| Example::new(model, &inst.text, inst.label))
        .collect::<Result<Vec<_>>>()?;
    total_loss(&batch, model, &cfg.effective_loss())
}

/// A freshly initialized model and one synthetic minibatch of
/// `cfg.batch_size` examples short enough to fit `cfg.t_max`.
pub fn gradcheck_setup(cfg: &TrainConfig) -> Result<(Model, Vec<Example>)> {
    cfg.validate()?;
    let mut spec = SyntheticSpec::two_class(cfg.batch_size, 0, cfg.seed);
    // Three phrase tokens plus noise must give at most T_max parts.
    spec.noise_length = (cfg.t_max + cfg.n_gram).saturating_sub(4).min(spec.noise_length);
    let corpus = generate_synthetic(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(cfg.architecture(num_classes(&corpus.train).max(2)), &cfg.init, &mut rng)?;
    let batch = corpus
        .train
        .iter()
        .map(|i| Example::new(&model, &i.text, i.label))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, batch))
}
