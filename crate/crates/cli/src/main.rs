//! `fusionact`: train, evaluate, run and inspect fused activity models.
//!
//! Exit codes: 0 success, 2 bad configuration or usage, 3 missing or
//! malformed data, 4 corrupt or incompatible checkpoint. Failures print a
//! single `error[<code>]: <message>` line on stderr.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use fusionact_core::checkpoint::{Checkpoint, CheckpointKind};
use fusionact_core::config::{RunConfig, Stage};
use fusionact_core::data::{self, Dataset, DatasetKind, Experiment, Window};
use fusionact_core::model::{Architecture, FusionModel};
use fusionact_core::train::{self, EpochLog, Expert};
use fusionact_core::{Error, Tensor};

#[derive(Parser)]
#[command(name = "fusionact", version, about = "Two-expert guided activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one expert (stage 1-static / 1-dynamic) or the gate (stage 2).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's stage: 1-static, 1-dynamic or 2.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        static_ck: Option<PathBuf>,
        #[arg(long)]
        dynamic_ck: Option<PathBuf>,
        /// Overrides the config's output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a full model on a dataset's test split.
    Eval {
        #[arg(long)]
        ck: PathBuf,
        /// Defaults to the dataset recorded in the checkpoint.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        confusion_out: Option<PathBuf>,
    },
    /// Classify one window given as channels x samples comma-separated text.
    Infer {
        #[arg(long)]
        ck: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Print a checkpoint's manifest and tensor inventory.
    Inspect {
        #[arg(long)]
        ck: PathBuf,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const USAGE: u8 = 2;
const DATA: u8 = 3;
const CHECKPOINT: u8 = 4;

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code,
        error: error.into(),
    }
}

/// Exit code implied by a library error when the context does not decide it.
fn classify(e: Error) -> Failure {
    let code = match &e {
        Error::Config(_) => USAGE,
        Error::Checkpoint(_) | Error::Incompatible(_) => CHECKPOINT,
        _ => DATA,
    };
    fail(code, e)
}

fn checkpoint_error(e: Error) -> Failure {
    fail(CHECKPOINT, e)
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments");
            let line = line.trim_start_matches("error: ");
            eprintln!("error[{USAGE}]: usage: {line}; see fusionact --help");
            return ExitCode::from(USAGE);
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            stage,
            static_ck,
            dynamic_ck,
            out,
        } => cmd_train(&config, stage.as_deref(), static_ck, dynamic_ck, out),
        Command::Eval {
            ck,
            dataset,
            root,
            confusion_out,
        } => cmd_eval(&ck, dataset.as_deref(), &root, confusion_out.as_deref()),
        Command::Infer { ck, input } => cmd_infer(&ck, &input),
        Command::Inspect { ck } => cmd_inspect(&ck),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = format!("{:#}", f.error).replace('\n', " ");
            eprintln!("error[{}]: {msg}", f.code);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_train(
    config: &Path,
    stage: Option<&str>,
    static_ck: Option<PathBuf>,
    dynamic_ck: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CmdResult {
    let mut cfg = RunConfig::load(config).map_err(classify)?;
    if let Some(s) = stage {
        cfg.stage = s.parse().map_err(classify)?;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    let experts = match cfg.stage {
        Stage::Fusion => match (static_ck, dynamic_ck) {
            (Some(s), Some(d)) => Some((s, d)),
            _ => {
                return Err(fail(
                    USAGE,
                    anyhow!("usage: stage 2 requires --static-ck PATH and --dynamic-ck PATH"),
                ))
            }
        },
        Stage::Expert(_) => None,
    };
    let tc = cfg.train_config();
    let exp = data::load_experiment(cfg.dataset, &cfg.root, cfg.seed).map_err(|e| fail(DATA, e))?;

    println!("{}", EpochLog::CSV_HEADER);
    let mut log = |l: &EpochLog| println!("{l}");
    let (checkpoint, best) = match cfg.stage {
        Stage::Expert(which) => {
            let kind = cfg.dataset;
            let arch = Architecture::default_for(
                kind.channels(),
                data::WINDOW_LEN,
                kind.static_labels().len(),
                kind.dynamic_labels().len(),
            );
            let expert = train::train_stage1(&exp.train.only(which), which, &arch, &tc, &mut log).map_err(classify)?;
            for note in &expert.notes {
                eprintln!("note: {note}");
            }
            let best = expert.history.get(expert.best_epoch).copied();
            (
                Checkpoint::from_expert(&expert, kind, Some(exp.stats.clone()), cfg.echo()),
                best,
            )
        }
        Stage::Fusion => {
            let (s, d) = experts.expect("checked above");
            let static_expert = load_expert(&s, CheckpointKind::Static, &cfg, &exp)?;
            let dynamic_expert = load_expert(&d, CheckpointKind::Dynamic, &cfg, &exp)?;
            let outcome =
                train::train_stage2(&exp.train, &static_expert, &dynamic_expert, &tc, &mut log).map_err(classify)?;
            let best = outcome.history.get(outcome.best_epoch).copied();
            (
                Checkpoint::from_model(&outcome.model, cfg.dataset, Some(exp.stats.clone()), cfg.echo()),
                best,
            )
        }
    };
    checkpoint.save(&cfg.out).map_err(|e| fail(DATA, e))?;
    if let Some(b) = best {
        println!(
            "best epoch {}: val_loss {:.6}, val_acc {:.4}; wrote {}",
            b.epoch,
            b.val_loss,
            b.val_acc,
            cfg.out.display()
        );
    }
    Ok(())
}

fn load_expert(path: &Path, kind: CheckpointKind, cfg: &RunConfig, exp: &Experiment) -> Result<Expert, Failure> {
    let ck = Checkpoint::load(path).map_err(checkpoint_error)?;
    if ck.kind != kind {
        return Err(fail(
            CHECKPOINT,
            anyhow!("{} holds a {} checkpoint, expected {}", path.display(), ck.kind.name(), kind.name()),
        ));
    }
    if ck.dataset != cfg.dataset {
        return Err(fail(
            CHECKPOINT,
            anyhow!("{} was trained on {}, config says {}", path.display(), ck.dataset, cfg.dataset),
        ));
    }
    if ck.stats.as_ref() != Some(&exp.stats) {
        return Err(fail(
            CHECKPOINT,
            anyhow!("{} was normalized with different statistics than this data", path.display()),
        ));
    }
    ck.to_expert().map_err(checkpoint_error)
}

fn load_model(path: &Path) -> Result<(Checkpoint, FusionModel), Failure> {
    let ck = Checkpoint::load(path).map_err(checkpoint_error)?;
    let model = ck.to_model().map_err(checkpoint_error)?;
    Ok((ck, model))
}

fn cmd_eval(ck_path: &Path, dataset: Option<&str>, root: &Path, confusion_out: Option<&Path>) -> CmdResult {
    let (ck, model) = load_model(ck_path)?;
    if let Some(name) = dataset {
        let kind: DatasetKind = name.parse().map_err(classify)?;
        if kind != ck.dataset {
            return Err(fail(
                CHECKPOINT,
                anyhow!("checkpoint was trained on {}, asked to evaluate on {kind}", ck.dataset),
            ));
        }
    }
    let seed = ck
        .config
        .iter()
        .find(|(k, _)| k == "seed")
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(42);
    let (train_raw, test_raw) = data::load_raw_split(ck.dataset, root, seed).map_err(|e| fail(DATA, e))?;
    let stats = match &ck.stats {
        Some(s) => s.clone(),
        None => train_raw.compute_stats().map_err(|e| fail(DATA, e))?,
    };
    let test = data::normalize(&test_raw, &stats).map_err(|e| fail(CHECKPOINT, e))?;
    let report = train::evaluate(&model, &test).map_err(classify)?;
    emit(&report.to_string());
    if let Some(path) = confusion_out {
        fs::write(path, report.confusion_csv()).map_err(|e| fail(DATA, anyhow!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn read_window(path: &Path) -> Result<Tensor, Failure> {
    let text = fs::read_to_string(path).map_err(|e| fail(DATA, anyhow!("{}: {e}", path.display())))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| fail(DATA, anyhow!("{}: row {}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<_, _>>()?;
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != width) {
        return Err(fail(DATA, anyhow!("{}: rows must be non-empty and equally long", path.display())));
    }
    let channels = rows.len();
    Tensor::new(vec![channels, width], rows.concat()).map_err(|e| fail(DATA, e))
}

fn cmd_infer(ck_path: &Path, input: &Path) -> CmdResult {
    let (ck, model) = load_model(ck_path)?;
    let signal = read_window(input)?;
    let expected = [model.arch.in_channels, model.arch.window_len];
    if signal.shape() != expected {
        return Err(fail(
            DATA,
            anyhow!("input is {:?} (channels x samples), model expects {expected:?}", signal.shape()),
        ));
    }
    let window = Window {
        signal,
        label: model.class_order()[0],
        subject: 0,
    };
    let mut ds = Dataset::new(ck.dataset, vec![window]);
    if let Some(stats) = &ck.stats {
        ds = data::normalize(&ds, stats).map_err(|e| fail(DATA, e))?;
    }
    let x = Tensor::stack(&[&ds.windows[0].signal]).map_err(|e| fail(DATA, e))?;
    let pv = model.predict_batch(&x).map_err(classify)?;
    let label = model.class_order()[pv.classes()[0]];
    let mut out = format!("label,{label}\ngate,{}\n", pv.gate.data()[0]);
    for (a, p) in model.class_order().iter().zip(pv.probs.data()) {
        let _ = writeln!(out, "{a},{p}");
    }
    emit(&out);
    Ok(())
}

fn cmd_inspect(ck_path: &Path) -> CmdResult {
    let ck = Checkpoint::load(ck_path).map_err(checkpoint_error)?;
    let mut out = ck.manifest();
    let mut total = 0;
    for (name, t) in &ck.tensors {
        let _ = writeln!(out, "tensor {name} {:?}", t.shape());
        total += t.numel();
    }
    let _ = writeln!(out, "tensors={} values={total}", ck.tensors.len());
    emit(&out);
    Ok(())
}

/// Writes a finished report; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}
