use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use trrg::checkpoint::Checkpoint;
use trrg::formats::{self, CsvLog};
use trrg::pipeline::{self, Sweep, Trained, ABLATION_HEADER};
use trrg::{ensure_out_dir, load_config, split_path, write_resolved, UsageError};
use trrg_core::checks;
use trrg_core::config::Variant;
use trrg_core::corpus::{generate_range, GeneratorConfig};
use trrg_core::decoder::{GenerationConfig, Strategy};
use trrg_core::{ModelConfig, OpKind};

#[derive(Parser)]
#[command(name = "trrg", version, about = "Clue-injected radiology report generation on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test corpora as JSON Lines.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        val: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 1: contrastive alignment of the encoders.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus file, or a directory holding train.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stage 2: train the decoder side on top of frozen encoders.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stage-1 checkpoint supplying the encoders.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write one generated report per study.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus file, or a directory holding test.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Beam width; 1 decodes greedily.
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Score hypotheses against reference reports.
    Evaluate {
        /// Corpus file, or a directory holding test.jsonl.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune and score every row of a sweep from one stage-1 model.
    Ablate {
        /// `component`, `k=1..5` or `L=4,8,16,32`.
        #[arg(long)]
        sweep: Sweep,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory holding train.jsonl and test.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse this stage-1 checkpoint instead of pretraining.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Compare every gradient rule against central differences.
    Gradcheck {
        /// Corrupt one op's adjoint, as `op` or `op:factor`.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; unset fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Base,
    Dci,
    DciCmci,
    Full,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Base => Variant::Base,
            VariantArg::Dci => Variant::Dci,
            VariantArg::DciCmci => Variant::DciCmci,
            VariantArg::Full => Variant::Full,
        }
    }
}

impl ConfigArgs {
    fn resolve(&self, fallback: Option<&ModelConfig>) -> Result<ModelConfig> {
        let mut cfg = match (&self.config, fallback) {
            (None, Some(f)) => f.clone(),
            (path, _) => load_config(path.as_deref())?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.variant = v.into();
        }
        if let Some(k) = self.k {
            cfg.top_k = k;
        }
        if let Some(l) = self.queries {
            cfg.queries = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_corpus(path: &Path) -> Result<Vec<trrg_core::corpus::SyntheticStudy>> {
    Ok(formats::read_corpus(path)?)
}

fn save_checkpoint(t: &Trained, path: &Path) -> Result<()> {
    t.checkpoint().save(path)?;
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn gen_data(out: &Path, counts: [usize; 3], seed: u64) -> Result<()> {
    let dir = ensure_out_dir(out)?;
    let gen = GeneratorConfig::default();
    let mut start = 0u64;
    for (split, n) in ["train", "val", "test"].into_iter().zip(counts) {
        let studies = generate_range(seed, start, n, &gen);
        start += n as u64;
        let path = dir.join(format!("{split}.jsonl"));
        formats::write_corpus(&path, &studies).map_err(|e| UsageError(e.to_string()))?;
        println!("{split}: {n} studies -> {}", path.display());
    }
    let resolved = json!({ "seed": seed, "train": counts[0], "val": counts[1], "test": counts[2], "generator": gen });
    write_resolved(&dir, &resolved)
}

fn pretrain(cfg: &ConfigArgs, data: &Path, out: &Path, epochs: Option<usize>) -> Result<()> {
    let mut cfg = cfg.resolve(None)?;
    if let Some(e) = epochs {
        cfg.pretrain_epochs = e;
    }
    let dir = ensure_out_dir(out)?;
    let studies = read_corpus(&split_path(data, "train"))?;
    let run = pipeline::pretrain(&cfg, &studies, cfg.pretrain_epochs)?;
    let mut log = CsvLog::create(&dir.join("pretrain_loss.csv"), &["step", "loss"])?;
    for (i, l) in run.losses.iter().enumerate() {
        log.row(&[i.to_string(), format!("{l:.6}")])?;
    }
    log.finish()?;
    save_checkpoint(&run.trained, &dir.join("stage1.ckpt"))?;
    write_resolved(&dir, &run.trained.model.config)?;
    println!("final epoch mean loss: {:.6}", run.final_epoch_loss);
    Ok(())
}

fn finetune(cfg: &ConfigArgs, init: &Path, data: &Path, out: &Path, epochs: Option<usize>) -> Result<()> {
    let stage1 = Checkpoint::load(init).with_context(|| format!("loading {}", init.display()))?;
    let mut cfg = cfg.resolve(Some(&stage1.config))?;
    if let Some(e) = epochs {
        cfg.finetune_epochs = e;
    }
    let dir = ensure_out_dir(out)?;
    let studies = read_corpus(&split_path(data, "train"))?;
    let run = pipeline::finetune(&cfg, &stage1, &studies)?;
    let mut log = CsvLog::create(&dir.join("finetune_loss.csv"), &["step", "lm", "dc", "total"])?;
    for r in &run.rows {
        log.row(&[r.step.to_string(), format!("{:.6}", r.lm), format!("{:.6}", r.dc), format!("{:.6}", r.total)])?;
    }
    log.finish()?;
    save_checkpoint(&run.trained, &dir.join("stage2.ckpt"))?;
    write_resolved(&dir, &run.trained.model.config)?;
    println!("frozen encoders unchanged; {} steps", run.rows.len());
    Ok(())
}

fn generate(ckpt: &Path, data: &Path, out: &Path, beam: usize) -> Result<()> {
    if beam == 0 {
        return Err(UsageError("--beam must be at least 1".into()).into());
    }
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let dir = ensure_out_dir(out)?;
    let trained = Trained::from_checkpoint(&ck)?;
    let studies = read_corpus(&split_path(data, "test"))?;
    let gen = GenerationConfig {
        strategy: if beam == 1 { Strategy::Greedy } else { Strategy::Beam(beam) },
        ..GenerationConfig::default()
    };
    let out = pipeline::generate(&trained, &studies, &gen)?;
    formats::write_hypotheses(&dir.join("hyps.jsonl"), &out.hypotheses)?;
    formats::write_json(&dir.join("clues.json"), &out.clues)?;
    write_resolved(&dir, &json!({ "model": ck.config, "generation": gen }))?;
    println!("{} hypotheses -> {}", out.hypotheses.len(), dir.join("hyps.jsonl").display());
    Ok(())
}

fn evaluate(refs: &Path, hyps: &Path, out: &Path) -> Result<()> {
    let dir = ensure_out_dir(out)?;
    let refs_path = split_path(refs, "test");
    let studies = read_corpus(&refs_path)?;
    let hypotheses = formats::read_hypotheses(hyps)?;
    let m = pipeline::evaluate(&studies, &hypotheses)?;
    formats::write_json(&dir.join("metrics.json"), &m)?;
    write_resolved(&dir, &json!({ "refs": refs_path, "hyps": hyps }))?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(())
}

fn ablate(sweep: &Sweep, cfg: &ConfigArgs, data: &Path, out: &Path, init: Option<&Path>) -> Result<()> {
    let cfg = cfg.resolve(None)?;
    let dir = ensure_out_dir(out)?;
    let train = read_corpus(&split_path(data, "train"))?;
    let test = read_corpus(&split_path(data, "test"))?;
    let stage1 = match init {
        Some(p) => Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let run = pipeline::pretrain(&cfg, &train, cfg.pretrain_epochs)?;
            save_checkpoint(&run.trained, &dir.join("stage1.ckpt"))?;
            run.trained.checkpoint()
        }
    };
    let rows = pipeline::ablate(sweep, &cfg, &stage1, &train, &test)?;
    let name = match sweep {
        Sweep::Component => "ablation_component.csv",
        Sweep::TopK(_) => "ablation_k.csv",
        Sweep::Queries(_) => "ablation_L.csv",
    };
    let mut log = CsvLog::create(&dir.join(name), &ABLATION_HEADER)?;
    for r in &rows {
        log.row(&r.fields())?;
        println!("{}", r.fields().join(","));
    }
    log.finish()?;
    write_resolved(&dir, &json!({ "sweep": sweep.to_string(), "model": cfg }))
}

fn parse_fault(spec: &str) -> Result<(OpKind, f64)> {
    let (name, factor) = spec.split_once(':').unwrap_or((spec, "1.5"));
    let op = OpKind::from_name(name).ok_or_else(|| UsageError(format!("unknown op `{name}`")))?;
    let factor = factor.parse().map_err(|_| UsageError(format!("bad fault factor `{factor}`")))?;
    Ok((op, factor))
}

/// Returns whether every check passed.
fn gradcheck(fault: Option<&str>) -> Result<bool> {
    let fault = fault.map(parse_fault).transpose()?;
    let report = checks::run_suite(fault)?;
    let mut ok = true;
    for e in &report {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!("{status:<4} {:<24} max rel err {:.3e} over {} coords", e.name, e.max_error, e.coords);
        ok &= e.passed();
    }
    let failed: Vec<&str> = report.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    println!("{} checks, {} failed (tolerance {:.0e})", report.len(), failed.len(), checks::TOLERANCE);
    if !ok {
        eprintln!("gradient check failed: {}", failed.join(", "));
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            out,
            train,
            val,
            test,
            seed,
        } => gen_data(&out, [train, val, test], seed)?,
        Command::Pretrain { cfg, data, out, epochs } => pretrain(&cfg, &data, &out, epochs)?,
        Command::Finetune {
            cfg,
            init,
            data,
            out,
            epochs,
        } => finetune(&cfg, &init, &data, &out, epochs)?,
        Command::Generate { ckpt, data, out, beam } => generate(&ckpt, &data, &out, beam)?,
        Command::Evaluate { refs, hyps, out } => evaluate(&refs, &hyps, &out)?,
        Command::Ablate {
            sweep,
            cfg,
            data,
            out,
            init,
        } => ablate(&sweep, &cfg, &data, &out, init.as_deref())?,
        Command::Gradcheck { fault } => {
            if !gradcheck(fault.as_deref())? {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    trrg::init_threads();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
