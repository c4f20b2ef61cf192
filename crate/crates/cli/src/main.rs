use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use protolens::baseline::{baseline_tfidf_logreg, BaselineConfig};
use protolens::checkpoint;
use protolens::config::TrainConfig;
use protolens::data::{generate_synthetic, load_corpus, write_corpus, Instance, SyntheticSpec};
use protolens::experiments::{run_ablation, sweep, SweepParam};
use protolens::objectives::grad_check;
use protolens::report::{explain_instance, prototype_table, render_json, render_table, render_text};
use protolens::trainer::{evaluate, gradcheck_setup, train};

const SEED_VAR: &str = "PROTOLENS_SEED";

#[derive(Parser)]
#[command(name = "protolens", version, about = "Prototype-based interpretable text classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report accuracy of a checkpoint on a labelled corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Explain predictions with prototype spans.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        input: ExplainInput,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Only list the N most similar prototypes.
        #[arg(long)]
        top: Option<usize>,
    },
    /// List each prototype with its aligned sentence and class weight.
    Prototypes {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Compare the full model against single-component ablations.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        /// Accepted for symmetry with `train`; ablation runs do not use it.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Also report the TF-IDF + logistic regression baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Train once per value of one hyperparameter and report curves.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        /// Write the full report (per-epoch curves) as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a planted-phrase corpus.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        num_train: usize,
        #[arg(long, default_value_t = 100)]
        num_test: usize,
        #[arg(long, default_value_t = 30)]
        noise_length: usize,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        /// Defaults to the small built-in grad-check configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ExplainInput {
    #[arg(long)]
    text: Option<String>,
    /// One text per line.
    #[arg(long)]
    file: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn load_config(path: Option<&Path>, fallback: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => fallback,
    };
    if let Ok(seed) = std::env::var(SEED_VAR) {
        cfg.seed = seed
            .trim()
            .parse()
            .with_context(|| format!("{SEED_VAR} must be an unsigned integer, got {seed:?}"))?;
    }
    Ok(cfg)
}

fn corpus(path: &Path) -> Result<Vec<Instance>> {
    load_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_model(path: &Path) -> Result<protolens::Model> {
    Ok(checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .model)
}

fn optional_corpus(path: Option<&Path>) -> Result<Option<Vec<Instance>>> {
    path.map(corpus).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, train: train_path, val, out } => {
            let cfg = load_config(config.as_deref(), TrainConfig::default())?;
            let train_set = corpus(&train_path)?;
            let val_set = optional_corpus(val.as_deref())?;
            let trained = train(&cfg, &train_set, val_set.as_deref())?;
            for r in &trained.history.epochs {
                let val = r.val_accuracy.map_or("-".into(), |a| format!("{a:.4}"));
                println!(
                    "epoch {:>3}  lr {:.2e}  loss {:.4}  train_acc {:.4}  val_acc {val}",
                    r.epoch, r.learning_rate, r.loss.total, r.train_accuracy
                );
            }
            checkpoint::save(&out, &trained.model, &trained.config, &trained.history)
                .with_context(|| format!("writing checkpoint {}", out.display()))?;
            println!("saved {}", out.display());
        }
        Command::Eval { ckpt, data } => {
            let model = load_model(&ckpt)?;
            let eval = evaluate(&model, &corpus(&data)?)?;
            println!("accuracy {:.4}", eval.accuracy);
            println!("count {}", eval.count);
            for (label, row) in eval.confusion.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
                println!("confusion[{label}] {}", cells.join(" "));
            }
        }
        Command::Explain { ckpt, input, format, top } => {
            let model = load_model(&ckpt)?;
            let texts: Vec<String> = match (input.text, input.file) {
                (Some(t), _) => vec![t],
                (None, Some(f)) => fs::read_to_string(&f)
                    .with_context(|| format!("reading {}", f.display()))?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(str::to_string)
                    .collect(),
                (None, None) => unreachable!("clap requires --text or --file"),
            };
            let reports = texts
                .iter()
                .map(|t| explain_instance(&model, t, top))
                .collect::<protolens::Result<Vec<_>>>()?;
            match format {
                Format::Json if reports.len() == 1 => println!("{}", render_json(&reports[0])?),
                Format::Json => println!("{}", serde_json::to_string_pretty(&reports)?),
                Format::Text => {
                    for (i, (report, text)) in reports.iter().zip(&texts).enumerate() {
                        if i > 0 {
                            println!();
                        }
                        print!("{}", render_text(report, text, &model)?);
                    }
                }
            }
        }
        Command::Prototypes { ckpt, format } => {
            let rows = prototype_table(&load_model(&ckpt)?)?;
            match format {
                Format::Text => print!("{}", render_table(&rows)),
                Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
            }
        }
        Command::Ablate { config, train: train_path, val: _, test, seeds, baseline } => {
            let cfg = load_config(config.as_deref(), TrainConfig::default())?;
            let train_set = corpus(&train_path)?;
            let test_set = corpus(&test)?;
            let report = run_ablation(&cfg, &train_set, &test_set, &seeds)?;
            print!("{}", report.render());
            if baseline {
                let acc = baseline_tfidf_logreg(&train_set, &test_set, &BaselineConfig::default())?;
                println!("tfidf_logreg\t{acc:.4}");
            }
        }
        Command::Sweep { config, param, values, train: train_path, val, test, json } => {
            let cfg = load_config(config.as_deref(), TrainConfig::default())?;
            let train_set = corpus(&train_path)?;
            let val_set = optional_corpus(val.as_deref())?;
            let report = sweep(&cfg, param, &values, &train_set, val_set.as_deref(), &corpus(&test)?)?;
            print!("{}", report.render());
            if let Some(path) = json {
                fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Synth { out_dir, seed, num_train, num_test, noise_length } => {
            let spec = SyntheticSpec {
                noise_length,
                ..SyntheticSpec::two_class(num_train, num_test, seed)
            };
            let synthetic = generate_synthetic(&spec)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            write_corpus(out_dir.join("train.jsonl"), &synthetic.train)?;
            write_corpus(out_dir.join("test.jsonl"), &synthetic.test)?;
            let annotations: Vec<String> = synthetic
                .annotations
                .iter()
                .map(serde_json::to_string)
                .collect::<serde_json::Result<_>>()?;
            fs::write(out_dir.join("annotations.jsonl"), annotations.join("\n") + "\n")?;
            println!(
                "wrote {} train and {} test instances to {}",
                synthetic.train.len(),
                synthetic.test.len(),
                out_dir.display()
            );
        }
        Command::Gradcheck { config, seed, step, tol } => {
            let mut cfg = load_config(config.as_deref(), TrainConfig::gradcheck())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (model, batch) = gradcheck_setup(&cfg)?;
            let report = grad_check(&model, &batch, &cfg.loss, step, tol)?;
            for (name, err) in &report.groups {
                println!("{name:<24} {err:.3e}");
            }
            println!("max relative error {:.3e} (tolerance {tol:e})", report.max_error());
            if !report.passed() {
                bail!("gradient check failed for {}", report.failures().join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
