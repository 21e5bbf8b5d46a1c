use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cadb_core::data::{load_wav, manifest_corpus, read_manifest, save_wav, Example};
use cadb_core::model::{
    count_parameters, gradcheck_signals, init_parameters, load_checkpoint, load_checkpoint_for, model_gradcheck,
    Ablation, ModelConfig,
};
use cadb_core::objectives::{si_snr, si_snri};
use cadb_core::trainer::{evaluate, train, Enhancer, RunConfig};
use cadb_core::Error;
use clap::{Args, Parser, Subcommand};

const GRADCHECK_PARAM_CAP: usize = 50_000;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Speech enhancement with channel-aware dual-branch conformers.
#[derive(Parser)]
#[command(name = "cadb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance a noisy WAV file with a trained checkpoint.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Clean reference; prints SI-SNR and SI-SNRi.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Train on the synthetic corpus or a manifest of WAV pairs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        source: Source,
    },
    /// Compare backward gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of full, no_cfb, no_t_conformer, no_f_conformer, no_bfb; all when omitted.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print parameter counts and derived sizes as key-value lines.
    Info {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the full-size preset instead of the toy one when no config is given.
        #[arg(long)]
        full_size: bool,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Synthetic harmonic tones in noise.
    #[arg(long)]
    toy: bool,
    /// Line-delimited JSON records with clean, noise and snr_db.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Core(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Gradcheck(_) => 5,
            Failure::Core(e) => match e {
                Error::Checkpoint(_) => 3,
                Error::Diverged { .. } => 4,
                Error::Io(_) | Error::Wav(_) | Error::Config(_) | Error::InvalidArgument(_) => 2,
                _ => 1,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Gradcheck(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn load_run(config: Option<&Path>, full_size: bool) -> Result<RunConfig, Failure> {
    match config {
        Some(p) => Ok(RunConfig::load(p)?),
        None if full_size => Ok(RunConfig { model: ModelConfig::full_size(), ..RunConfig::toy() }),
        None => Ok(RunConfig::toy()),
    }
}

fn human(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn cmd_info(config: Option<&Path>, full_size: bool) -> CmdResult {
    let run = load_run(config, full_size)?;
    let m = &run.model;
    let count = count_parameters(m);
    println!("total_params = {}", count.total);
    println!("total_params_human = {}", human(count.total));
    println!("f_bins = {}", m.f_bins());
    println!("f_half = {}", m.f_half());
    for (name, n) in &count.modules {
        println!("module.{name} = {n}");
    }
    for a in Ablation::ALL {
        let n = count_parameters(&m.clone().with_ablation(a)).total;
        println!("ablation.{} = {n}", a.name());
        println!("ablation.{}_human = {}", a.name(), human(n));
    }
    Ok(())
}

fn cmd_enhance(
    input: &Path,
    output: &Path,
    checkpoint: &Path,
    config: Option<&Path>,
    reference: Option<&Path>,
) -> CmdResult {
    let ckpt = match config {
        Some(p) => load_checkpoint_for(checkpoint, &RunConfig::load(p)?.model)?,
        None => load_checkpoint(checkpoint)?,
    };
    let cfg = &ckpt.config;
    let (noisy, sr) = load_wav(input)?;
    if sr != cfg.stft.sample_rate {
        return Err(Failure::Usage(format!(
            "{}: sample rate {sr} Hz, model expects {} Hz",
            input.display(),
            cfg.stft.sample_rate
        )));
    }
    // short inputs are zero-padded to one window and trimmed afterwards
    let mut padded = noisy.clone();
    padded.resize(noisy.len().max(cfg.stft.win_length), 0.0);
    let mut enhanced = Enhancer::Model { config: cfg, params: &ckpt.params }.enhance(&padded)?;
    enhanced.truncate(noisy.len());
    save_wav(output, &enhanced, sr)?;
    log::info!("wrote {} ({} samples)", output.display(), enhanced.len());
    if let Some(r) = reference {
        let (clean, _) = load_wav(r)?;
        if clean.len() != noisy.len() {
            return Err(Failure::Usage(format!(
                "{}: reference has {} samples, input {}",
                r.display(),
                clean.len(),
                noisy.len()
            )));
        }
        println!("si_snr = {:.6}", si_snr(&enhanced, &clean)?.value);
        println!("si_snri = {:.6}", si_snri(&enhanced, &noisy, &clean)?.value);
    }
    Ok(())
}

fn manifest_splits(run: &RunConfig, manifest: &Path) -> Result<(Vec<Example>, Vec<Example>), Failure> {
    if !manifest.is_file() {
        return Err(Failure::Usage(format!(
            "manifest {} not found\n\nusage: cadb train --out <DIR> [--config <FILE>] (--toy | --manifest <FILE>)",
            manifest.display()
        )));
    }
    let records = read_manifest(manifest)?;
    let mixtures = manifest_corpus(&records, run.segment_seconds, run.corpus.seed)?;
    let examples = mixtures.iter().map(|m| m.mix()).collect::<cadb_core::Result<Vec<_>>>()?;
    if examples.len() < 2 {
        return Err(Failure::Usage(format!(
            "{}: need at least two non-silent segments, found {}",
            manifest.display(),
            examples.len()
        )));
    }
    let n_val = run.validation_examples.min(examples.len() / 2).max(1);
    let (tr, va) = examples.split_at(examples.len() - n_val);
    Ok((tr.to_vec(), va.to_vec()))
}

fn cmd_train(config: Option<&Path>, out: &Path, manifest: Option<&Path>) -> CmdResult {
    let run = load_run(config, false)?;
    let (tr, va) = match manifest {
        Some(m) => manifest_splits(&run, m)?,
        None => run.toy_splits()?,
    };
    std::fs::create_dir_all(out).map_err(Error::from)?;
    std::fs::write(out.join("config.txt"), run.to_key_values().render()).map_err(Error::from)?;
    log::info!("training on {} examples, validating on {}", tr.len(), va.len());
    let outcome = train(&run.model, &run.train, &tr, &va, Some(out))?;
    let report = evaluate(&Enhancer::Model { config: &run.model, params: &outcome.best_params }, &va)?;
    std::fs::write(out.join("eval.tsv"), report.to_tsv()).map_err(Error::from)?;
    println!("best_epoch = {}", outcome.best_epoch);
    println!("best_val_sisnri = {:.6}", outcome.best_val_sisnri());
    println!("best_val_sdri = {:.6}", report.mean_sdri);
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, ablation: Option<&str>, samples: usize, seed: u64) -> CmdResult {
    let run = load_run(config, false)?;
    let variants = match ablation {
        Some(a) => vec![Ablation::parse(a)?],
        None => Ablation::ALL.to_vec(),
    };
    let total = count_parameters(&run.model).total;
    if total > GRADCHECK_PARAM_CAP {
        return Err(Failure::Usage(format!(
            "refusing to gradcheck {total} parameters (cap {GRADCHECK_PARAM_CAP}); use a toy-scale config"
        )));
    }
    let len = 4 * run.model.stft.win_length;
    let (noisy, clean) = gradcheck_signals(len, seed);
    let mut worst: Option<(f64, String)> = None;
    for a in variants {
        let cfg = run.model.clone().with_ablation(a);
        cfg.validate()?;
        let params = init_parameters(&cfg, seed)?;
        let report = model_gradcheck(&cfg, &params, &noisy, &clean, samples, seed)?;
        for (module, err) in report.per_module() {
            println!("{}.{module} = {err:.3e}", a.name());
        }
        println!("{}.max = {:.3e}", a.name(), report.max_rel_error());
        println!("{}.cancelled_max_abs = {:.3e}", a.name(), report.cancelled_max_abs);
        if !report.passed(GRADCHECK_TOLERANCE) {
            let w = report.worst().map(|e| format!("{}[{}]", e.name, e.index)).unwrap_or_default();
            let score = report.max_rel_error();
            if worst.as_ref().is_none_or(|(s, _)| score > *s) {
                worst = Some((score, format!("{}: worst parameter {w} (relative error {score:.3e})", a.name())));
            }
        }
    }
    match worst {
        Some((_, msg)) => Err(Failure::Gradcheck(format!("gradient check failed, {msg}"))),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Info { config, full_size } => cmd_info(config.as_deref(), full_size),
        Command::Enhance {
            input,
            output,
            checkpoint,
            config,
            reference,
        } => cmd_enhance(&input, &output, &checkpoint, config.as_deref(), reference.as_deref()),
        Command::Train { config, out, source } => cmd_train(config.as_deref(), &out, source.manifest.as_deref()),
        Command::Gradcheck {
            config,
            ablation,
            samples,
            seed,
        } => cmd_gradcheck(config.as_deref(), ablation.as_deref(), samples, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CADB_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
