//! `fpnproto`: generate synthetic data, train, evaluate and explain.
//!
//! Failures exit non-zero with one JSON object on stderr:
//! `{"error":"<kind>","message":"..."}`.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fpnproto::checkpoint::Checkpoint;
use fpnproto::data::Dataset;
use fpnproto::eval::{evaluate, EvalReport};
use fpnproto::explain::{explain, read_pgm, render, summary, DEFAULT_TOP_N};
use fpnproto::trainer::{Stage, Trainer};
use fpnproto::RunConfig;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const CHECKPOINT_FILE: &str = "checkpoint.fpt";
const HISTORY_FILE: &str = "history.jsonl";
const CONFIG_FILE: &str = "config.toml";
const DIAGNOSTIC_DIR: &str = "diagnostic";

#[derive(Parser)]
#[command(name = "fpnproto", version, about = "Multi-scale prototype network for mass-margin classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default run configuration as TOML.
    PrintDefaultConfig,
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, or continue training, a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run only this stage; it must be the next one due.
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// With --resume, train under --config even if it differs from the
        /// checkpoint's configuration.
        #[arg(long)]
        override_config: bool,
    },
    /// Report AUROC, sensitivity, specificity and the confusion matrix.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        /// Report file; defaults to `report_<split>.json` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explain one prediction.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id (needs --data) or path to an 8-bit PGM.
        #[arg(long)]
        image: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    A,
    B,
    C,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::A => Stage::Warmup,
            StageArg::B => Stage::Projection,
            StageArg::C => Stage::Finetune,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = format!("# config hash {}\n{}", cfg.hash_hex(), cfg.to_toml());
    std::fs::write(dir.join(CONFIG_FILE), text)?;
    Ok(())
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let data = Dataset::generate(&cfg.data)?;
    data.write(out)?;
    log::info!(
        "wrote {} train, {} val, {} eval and {} negative samples to {}",
        data.train.len(),
        data.val.len(),
        data.eval.len(),
        data.negatives.len(),
        out.display()
    );
    Ok(())
}

fn write_history(path: &Path, t: &Trainer<'_>) -> Result<()> {
    let hash = t.config.hash_hex();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in &t.history {
        let mut v = serde_json::to_value(rec)?;
        v.as_object_mut()
            .expect("records serialize as objects")
            .insert("config_hash".into(), hash.clone().into());
        writeln!(f, "{}", serde_json::to_string(&v)?)?;
    }
    f.flush()?;
    Ok(())
}

fn save_run(dir: &Path, t: &Trainer<'_>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Checkpoint::from_trainer(t).save(&dir.join(CHECKPOINT_FILE))?;
    write_history(&dir.join(HISTORY_FILE), t)?;
    write_config(dir, &t.config)
}

fn train(
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    stage: Option<StageArg>,
    override_config: bool,
) -> Result<()> {
    let supplied = config.map(|p| load_config(Some(p))).transpose()?;
    let data = Dataset::read(data_dir).with_context(|| format!("reading dataset {}", data_dir.display()))?;
    let mut trainer = match resume {
        Some(path) => {
            let mut ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if let Some(cfg) = supplied {
                if cfg.hash() != ck.config.hash() {
                    if override_config {
                        log::warn!("config differs from the checkpoint's; training under the supplied config");
                        ck.config = cfg;
                    } else {
                        log::warn!(
                            "config hash {} differs from checkpoint hash {}; continuing with the checkpoint's config (pass --override-config to use the supplied one)",
                            cfg.hash_hex(),
                            ck.config.hash_hex()
                        );
                    }
                }
            }
            ck.into_trainer(&data)?
        }
        None => Trainer::new(supplied.unwrap_or_default(), &data)?,
    };
    if data.config != trainer.config.data {
        log::warn!("dataset was generated from a different data config than the run config");
    }
    log::info!(
        "config hash {}, {} parameters, stage {}",
        trainer.config.hash_hex(),
        trainer.model.params.numel(),
        trainer.progress.stage
    );
    let outcome = match stage {
        Some(s) => trainer.run_stage(s.into()),
        None => trainer.run(),
    };
    if let Err(e) = outcome {
        if let Some(diag) = &trainer.diagnostic {
            let dir = out.join(DIAGNOSTIC_DIR);
            save_run(&dir, &trainer)?;
            let mut text = serde_json::to_string_pretty(diag)?;
            text.push('\n');
            std::fs::write(dir.join("diagnostic.json"), text)?;
            log::error!("saved a diagnostic snapshot to {}", dir.display());
        }
        return Err(e.into());
    }
    save_run(out, &trainer)?;
    if let Some(last) = trainer.history.last() {
        log::info!(
            "stage {} after {} epochs; val macro AUROC {:?}",
            trainer.progress.stage,
            trainer.progress.epochs,
            last.val_macro_auroc
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config_hash: String,
    checkpoint: String,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn evaluate_cmd(checkpoint: &Path, data_dir: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let data = Dataset::read(data_dir).with_context(|| format!("reading dataset {}", data_dir.display()))?;
    if data.config != ck.config.data {
        log::warn!("dataset was generated from a different data config than the checkpoint's");
    }
    let s = data.split(split)?;
    let report = evaluate(&ck.model, split, &s.all_images()?, &s.labels(), 32)?;
    let file = ReportFile {
        config_hash: ck.config.hash_hex(),
        checkpoint: checkpoint.display().to_string(),
        report: &report,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    print!("{text}");
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("report_{split}.json")),
    };
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn explain_cmd(checkpoint: &Path, image: &str, data_dir: Option<&Path>, out: &Path, top: usize) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let path = Path::new(image);
    let img = if path.is_file() {
        read_pgm(path)?
    } else {
        let Some(dir) = data_dir else {
            bail!("`{image}` is not a file; pass --data to look it up as a sample id");
        };
        let data = Dataset::read(dir)?;
        let sample = fpnproto::data::SPLITS
            .iter()
            .find_map(|s| data.split(s).ok().and_then(|sp| sp.find(image)));
        match sample {
            Some(s) => s.image.clone(),
            None => bail!("no sample with id `{image}` in {}", dir.display()),
        }
    };
    let e = explain(&ck.model, &img, top)?;
    let files = render(&e, out, Some(&ck.config.hash_hex()))?;
    print!("{}", summary(&e));
    log::info!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrintDefaultConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
        Command::GenData { config, out } => gen_data(config.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            resume,
            stage,
            override_config,
        } => train(config.as_deref(), &data, &out, resume.as_deref(), stage, override_config),
        Command::Evaluate {
            checkpoint,
            data,
            split,
            out,
        } => evaluate_cmd(&checkpoint, &data, &split, out.as_deref()),
        Command::Explain {
            checkpoint,
            image,
            data,
            out,
            top,
        } => explain_cmd(&checkpoint, &image, data.as_deref(), &out, top),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<fpnproto::Error>())
        .map(fpnproto::Error::kind)
        .unwrap_or("error")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FPNPROTO_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
