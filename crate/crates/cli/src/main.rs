use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use flowsr::config::{Preset, RunConfig};
use flowsr::data::{Manifest, TrainingSet};
use flowsr::dsp::{read_wav, write_wav, ChannelPolicy, WavFormat};
use flowsr::inference::{emit_spectrogram_image, resolve_rate, super_resolve_detailed, SrOptions};
use flowsr::metrics::{evaluate_manifest, System};
use flowsr::model::{count_parameters, load_model, SrModel};
use flowsr::train::{train_loop, Trainer};
use flowsr::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "flowsr",
    version,
    about = "Flow-matching audio super-resolution to 48 kHz"
)]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Super-resolve a WAV file to 48 kHz.
    Upsample(UpsampleArgs),
    /// Score a system on a manifest.
    Eval(EvalArgs),
    /// Print the fully resolved config and parameter counts.
    InspectConfig(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Use the tiny architecture.
    #[arg(long)]
    toy: bool,
    /// Override total_steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SolveArgs {
    #[arg(long, default_value_t = flowsr::inference::DEFAULT_OMEGA)]
    omega: f64,
    #[arg(long, default_value_t = flowsr::inference::DEFAULT_STEPS)]
    steps: usize,
    /// Noise seed; random (and logged) when omitted.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct UpsampleArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    solve: SolveArgs,
    /// Scale the output down to a -1 dBFS peak when it would exceed it.
    #[arg(long)]
    limiter: bool,
    /// Write 32-bit float samples instead of 16-bit PCM.
    #[arg(long)]
    float: bool,
    /// Also write a PNG of the generated spectrogram.
    #[arg(long)]
    spectrogram: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum SystemKind {
    Model,
    Sinc,
    Reference,
}

#[derive(Args, Debug)]
struct EvalArgs {
    manifest: PathBuf,
    /// Comma-separated input rates.
    #[arg(long, value_delimiter = ',', default_values_t = vec![8000u32, 12000, 16000, 24000])]
    rates: Vec<u32>,
    #[arg(long, value_enum, default_value = "model")]
    system: SystemKind,
    /// Required for the model system.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    solve: SolveArgs,
    /// Report path stem: writes <stem>.csv and <stem>.json.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    toy: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult = Result<(), Failure>;

fn load_config(path: &Path, toy: bool) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if toy {
        cfg.preset = Preset::Tiny;
        cfg.model = None;
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(&a.config, a.toy)?;
    if let Some(steps) = a.steps {
        cfg.train.total_steps = steps;
        if cfg.train.warmup_steps > steps {
            log::warn!("warmup_steps {} clamped to {steps}", cfg.train.warmup_steps);
            cfg.train.warmup_steps = steps;
        }
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.output.dir = out;
    }
    cfg.validate()?;
    let device = Device::Cpu;
    let mut trainer = match &a.resume {
        Some(path) => {
            let t = Trainer::resume(path, &device)?;
            log::info!("resumed from {} at step {}", path.display(), t.step());
            t
        }
        None => Trainer::new(
            SrModel::new(cfg.vfe(), cfg.train.seed, DType::F32, &device)?,
            cfg.train.clone(),
        )?,
    };
    let until = trainer.config().total_steps;
    let manifest = Manifest::load(&cfg.data.manifest)?;
    let mut set = TrainingSet::from_manifest(&manifest, cfg.pair_config(), cfg.data.rates.clone())?;
    log::info!(
        "training {} parameters on {} clips for {} steps into {}",
        trainer.model().params().count(),
        set.clips().len(),
        until,
        cfg.output.dir.display()
    );
    train_loop(
        &mut trainer,
        &mut set,
        until,
        &cfg.output.dir,
        cfg.output.checkpoint_every,
        cfg.output.log_every,
    )?;
    Ok(())
}

fn solve_options(s: &SolveArgs) -> Result<SrOptions, Failure> {
    if s.steps == 0 || !s.omega.is_finite() {
        return Err(Failure::Usage(format!(
            "need --steps >= 1 and a finite --omega (got {} and {})",
            s.steps, s.omega
        )));
    }
    Ok(SrOptions {
        omega: s.omega,
        steps: s.steps,
        seed: s.seed,
        ..SrOptions::default()
    })
}

fn upsample(a: UpsampleArgs) -> CliResult {
    let mut opts = solve_options(&a.solve)?;
    let model = load_model(&a.checkpoint, &Device::Cpu)?;
    let input = read_wav(&a.input, ChannelPolicy::Downmix)?;
    opts.limiter = a.limiter;
    // Fail on the rate before any heavy work.
    resolve_rate(input.sample_rate(), &opts.rates)?;
    log::info!("omega={} steps={}", opts.omega, opts.steps);
    let out = super_resolve_detailed(&input, &model, &opts)?;
    log::info!("seed={} cutoff_bins={}", out.seed, out.cutoff_bins);
    let format = if a.float {
        WavFormat::Float32
    } else {
        WavFormat::Pcm16
    };
    write_wav(&a.output, &out.waveform, format)?;
    if let Some(png) = &a.spectrogram {
        emit_spectrogram_image(&out.spectrogram, png)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let table = SrOptions::default().rates;
    for &r in &a.rates {
        if !table.rates.contains(&r) {
            return Err(Error::UnsupportedRate {
                rate: r,
                supported: table.rates.clone(),
            }
            .into());
        }
    }
    let manifest = Manifest::load(&a.manifest)?;
    let model;
    let system = match a.system {
        SystemKind::Sinc => System::SincBaseline,
        SystemKind::Reference => System::Reference,
        SystemKind::Model => {
            let path = a.checkpoint.as_ref().ok_or_else(|| {
                Failure::Usage("--checkpoint is required for --system model".into())
            })?;
            model = load_model(path, &Device::Cpu)?;
            log::info!("omega={} steps={}", a.solve.omega, a.solve.steps);
            System::Model {
                model: &model,
                opts: solve_options(&a.solve)?,
            }
        }
    };
    let config = serde_json::json!({
        "system": system.name(),
        "rates": a.rates,
        "checkpoint": a.checkpoint,
        "omega": a.solve.omega,
        "steps": a.solve.steps,
        "seed": a.solve.seed,
        "manifest": a.manifest,
    });
    let report = evaluate_manifest(&manifest, &system, &a.rates, config)?;
    report.write_csv(a.out.with_extension("csv"))?;
    report.write_json(a.out.with_extension("json"))?;
    for g in report.summary() {
        println!(
            "{:<12} {:>6} Hz  items {:>3}  LSD-HF {:.4}  LSD {:.4}",
            g.domain, g.input_rate, g.items, g.lsd_hf, g.lsd_full
        );
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.toy {
        cfg.preset = Preset::Tiny;
        cfg.model = None;
    }
    cfg.validate()?;
    print!("{}", cfg.to_toml()?);
    let model = SrModel::new(cfg.vfe(), 0, DType::F32, &Device::Cpu)?;
    let c = count_parameters(model.params());
    println!();
    println!(
        "# parameters: feature encoder {}, vector field {}, total {}",
        c.feature_encoder, c.vfe, c.total
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Upsample(a) => upsample(a),
        Command::Eval(a) => eval(a),
        Command::InspectConfig(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
