use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use slotnav_core::checkpoint::Checkpoint;
use slotnav_core::corpus::{corpus_stats, derive_iob_annotations, generate_splits, load_dataset, Corpus, DataFormat, GenConfig};
use slotnav_core::eval::{run_ablation, run_eval, run_generalization_study, track_turn};
use slotnav_core::model::Variant;
use slotnav_core::numerics::Precision;
use slotnav_core::trainer::{run_gradient_check, train, GradCheckConfig, TrainConfig, TrainHistory};

#[derive(Parser)]
#[command(name = "slotnav", version, about = "Dialogue state tracking by slot tagging navigation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train, dev and test splits of a synthetic corpus.
    GenerateData {
        /// Generator config (JSON); defaults to the built-in preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in preset when no config is given: movies or restaurants.
        #[arg(long, default_value = "movies")]
        preset: String,
        /// Output path; `x.json` becomes `x.train.json`, `x.dev.json`, `x.test.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print dataset statistics, including the unseen-test-value share.
    Stats {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        load: LoadArgs,
    },
    /// Train one model and save its best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Training config (JSON, TrainConfig field names); missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        load: LoadArgs,
    },
    /// Evaluate a checkpoint (or `<dir>/seed-<n>` per seed) with full rollout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        load: LoadArgs,
    },
    /// Train every rung of the ablation ladder and report test JGA.
    Ablate {
        /// Training split; dev and test default to the sibling `.dev`/`.test` files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        load: LoadArgs,
    },
    /// Per-slot accuracy on a test set whose targeted slots hold unseen values.
    Generalize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        slots: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Variant trained alongside for comparison, e.g. no_slot_tagging.
        #[arg(long)]
        compare: Option<String>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        load: LoadArgs,
    },
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Interactive tracking: enter a system and a user utterance per turn.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(clap::Args)]
struct LoadArgs {
    /// Ignore file spans and derive them from the states.
    #[arg(long)]
    state_only: bool,
    /// Largest tolerated share of spans that disagree with their values.
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
}

impl LoadArgs {
    fn load(&self, path: &Path) -> Result<Corpus> {
        let format = if self.state_only {
            DataFormat::StateOnly
        } else {
            DataFormat::Annotated
        };
        load_dataset(path, format, self.tolerance).with_context(|| format!("loading {}", path.display()))
    }
}

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn parse_variant(s: &str) -> Result<Variant> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .with_context(|| format!("unknown variant {s}; expected one of full, no_appendix, no_prev_state, no_position_prediction, no_slot_tagging"))
}

/// `x.train.json` -> `x.<split>.json`.
fn sibling(data: &Path, explicit: Option<&PathBuf>, split: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    let name = data.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    match name.strip_suffix(".train.json") {
        Some(stem) => Ok(data.with_file_name(format!("{stem}.{split}.json"))),
        None => bail!("cannot infer the {split} split from {}; pass --{split}", data.display()),
    }
}

fn split_path(out: &Path, split: &str) -> PathBuf {
    let stem = out
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.strip_suffix(".json").unwrap_or(n).to_string())
        .unwrap_or_else(|| "data".into());
    out.with_file_name(format!("{stem}.{split}.json"))
}

fn train_cmd(cfg: &TrainConfig, train_set: &Corpus, dev_set: &Corpus, out: &Path) -> Result<()> {
    if train_set.ontology != dev_set.ontology {
        bail!("train and dev ontologies differ");
    }
    let history: TrainHistory = match cfg.precision {
        Precision::F32 => {
            let o = train::<f32>(cfg, &train_set.ontology, &train_set.dialogues, &dev_set.dialogues)?;
            o.checkpoint.save(out)?;
            o.history
        }
        Precision::F64 => {
            let o = train::<f64>(cfg, &train_set.ontology, &train_set.dialogues, &dev_set.dialogues)?;
            o.checkpoint.save(out)?;
            o.history
        }
    };
    std::fs::write(out.join("history.jsonl"), history.to_jsonl())?;
    write_json(&out.join("train_config.json"), cfg)?;
    for e in &history.epochs {
        println!(
            "epoch {:>3}  loss {:.4} (iob {:.4}, value {:.4})  dev JGA {:.4}",
            e.epoch, e.loss_joint, e.loss_iob, e.loss_value, e.dev_jga
        );
    }
    println!("best epoch {}  dev JGA {:.4}", history.best_epoch, history.best_dev_jga());
    Ok(())
}

fn track(dir: &Path) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(dir)?;
    let mut prev = ckpt.ontology.empty_state();
    let mut history: Vec<(String, String)> = Vec::new();
    let stdin = io::stdin();
    let mut lines = stdin.lock().lines();
    let mut ask = |prompt: &str| -> Result<Option<String>> {
        print!("{prompt}");
        io::stdout().flush()?;
        Ok(lines.next().transpose()?)
    };
    println!("empty system and user lines end the session");
    loop {
        let Some(system) = ask("system> ")? else { break };
        let Some(user) = ask("user> ")? else { break };
        if system.trim().is_empty() && user.trim().is_empty() {
            break;
        }
        let past: Vec<(&str, &str)> = history.iter().map(|(s, u)| (s.as_str(), u.as_str())).collect();
        let dec = track_turn(&ckpt, &prev, &past, &system, &user)?;
        prev = dec.state;
        println!("{}", serde_json::to_string(&prev.to_map(&ckpt.ontology))?);
        history.push((system, user));
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateData {
            config,
            preset,
            out,
            seed,
        } => {
            let mut cfg: GenConfig = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => match preset.as_str() {
                    "movies" => GenConfig::movies(),
                    "restaurants" => GenConfig::restaurants(),
                    other => bail!("unknown preset {other}"),
                },
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (train_set, dev_set, test_set) = generate_splits(&cfg)?;
            for (split, c) in [("train", &train_set), ("dev", &dev_set), ("test", &test_set)] {
                let p = split_path(&out, split);
                c.save(&p)?;
                println!("wrote {} ({} dialogues)", p.display(), c.dialogues.len());
            }
            print!("{}", corpus_stats(&train_set, &dev_set, &test_set)?);
        }
        Command::Stats { train, dev, test, load } => {
            let sets = [load.load(&train)?, load.load(&dev)?, load.load(&test)?];
            let stats = corpus_stats(&sets[0], &sets[1], &sets[2])?;
            print!("{stats}");
            if load.state_only {
                for (name, c) in ["train", "dev", "test"].iter().zip(&sets) {
                    let (mut found, mut missed) = (0usize, 0usize);
                    for d in &c.dialogues {
                        let derived = derive_iob_annotations(d, &c.ontology);
                        found += derived.spans.iter().map(Vec::len).sum::<usize>();
                        missed += derived.unresolved.len();
                    }
                    let rate = if found + missed == 0 { 0.0 } else { 100.0 * missed as f64 / (found + missed) as f64 };
                    println!("{name}: {found} values matched, {missed} unmatched ({rate:.1}%)");
                }
            }
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::Train {
            data,
            dev,
            config,
            out,
            load,
        } => {
            let cfg: TrainConfig = read_config(config.as_deref())?;
            train_cmd(&cfg, &load.load(&data)?, &load.load(&dev)?, &out)?;
        }
        Command::Eval {
            checkpoint,
            data,
            seeds,
            json,
            load,
        } => {
            let report = run_eval(&checkpoint, &load.load(&data)?, seeds.as_deref())?;
            print!("{report}");
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
        }
        Command::Ablate {
            data,
            dev,
            test,
            config,
            seeds,
            json,
            load,
        } => {
            let cfg: TrainConfig = read_config(config.as_deref())?;
            let dev_set = load.load(&sibling(&data, dev.as_ref(), "dev")?)?;
            let test_set = load.load(&sibling(&data, test.as_ref(), "test")?)?;
            let report = run_ablation(&cfg, &load.load(&data)?, &dev_set, &test_set, &seeds)?;
            print!("{report}");
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
        }
        Command::Generalize {
            data,
            dev,
            test,
            config,
            slots,
            seeds,
            compare,
            json,
            load,
        } => {
            let cfg: TrainConfig = read_config(config.as_deref())?;
            let compare = compare.as_deref().map(parse_variant).transpose()?;
            let dev_set = load.load(&sibling(&data, dev.as_ref(), "dev")?)?;
            let test_set = load.load(&sibling(&data, test.as_ref(), "test")?)?;
            let report =
                run_generalization_study(&cfg, &load.load(&data)?, &dev_set, &test_set, &slots, &seeds, compare)?;
            print!("{report}");
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
        }
        Command::Gradcheck { eps, variant } => {
            let cfg = GradCheckConfig {
                eps,
                variant: parse_variant(&variant)?,
                ..GradCheckConfig::default()
            };
            let r = run_gradient_check(&cfg)?;
            println!(
                "checked {} scalars, max relative error {:.3e} at {:?}",
                r.checked, r.max_rel_error, r.worst
            );
            if r.max_rel_error >= 1e-4 {
                bail!("gradient check failed");
            }
        }
        Command::Track { checkpoint } => track(&checkpoint)?,
    }
    Ok(())
}
