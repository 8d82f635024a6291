use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cyclic_mcmc::experiment::{
    cmd_regen_demo, cmd_run_fixed, cmd_run_stop, cmd_truth, ExperimentConfig, ExperimentError,
    ExperimentOutput, Mode, RegenChain, SamplerSpec, StopSection, TruthSpec,
};

/// Experiment harness for cyclic MCMC samplers: fixed-length and
/// stopping-rule replications, long-run truths, and a split-chain demo.
#[derive(Parser, Debug)]
#[command(name = "cyclic-mcmc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fixed-length replications.
    RunFixed(ExpArgs),
    /// Replications stopped by the fixed-volume rule.
    RunStop(ExpArgs),
    /// Either experiment, chosen by `--mode` or the config file.
    Run(ExpArgs),
    /// Reference value for coverage (long run, exact, or given).
    Truth(ExpArgs),
    /// Split-chain regeneration demo on a toy chain.
    RegenDemo(RegenArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SamplerKind {
    Curve,
    Lmm,
    Flip,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Fixed,
    Stop,
}

#[derive(Args, Debug)]
struct ExpArgs {
    /// TOML (or .json) experiment file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerKind>,
    /// Chain length (fixed mode).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Volume parameter of the stopping rule.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Cheap steps per cycle (curve and lmm samplers).
    #[arg(long)]
    k1: Option<usize>,
    /// Orthodont-format CSV for the lmm sampler.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    burn_in: Option<usize>,
    /// `exact`, `long-run:LENGTH`, or comma-separated values.
    #[arg(long)]
    truth: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for table.csv, summary.json, checks.csv and SVG plots.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cache directory for long-run truths.
    #[arg(long, default_value = ".cyclic-mcmc-cache")]
    cache: PathBuf,
    #[arg(long)]
    no_cache: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ChainArg {
    ThreeState,
    Iid,
    Flip,
}

#[derive(Args, Debug)]
struct RegenArgs {
    #[arg(long, value_enum, default_value = "three-state")]
    chain: ChainArg,
    /// Split-chain steps.
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config_error(field: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn parse_truth(text: &str) -> Result<TruthSpec, ExperimentError> {
    let text = text.trim();
    if text == "exact" {
        return Ok(TruthSpec::Exact);
    }
    if let Some(len) = text.strip_prefix("long-run:") {
        let length = len
            .trim()
            .parse()
            .map_err(|_| config_error("--truth", format!("bad long-run length `{len}`")))?;
        return Ok(TruthSpec::LongRun { length });
    }
    let value = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| config_error("--truth", format!("cannot parse `{text}`")))?;
    Ok(TruthSpec::Value { value })
}

fn sampler_spec(kind: SamplerKind) -> SamplerSpec {
    match kind {
        SamplerKind::Curve => SamplerSpec::Curve { k1: 3 },
        SamplerKind::Lmm => SamplerSpec::Lmm { data: None, k1: 3 },
        SamplerKind::Flip => SamplerSpec::Flip { a: 0.25, b: 0.5 },
    }
}

fn build_config(args: &ExpArgs, mode: Option<Mode>) -> Result<ExperimentConfig, ExperimentError> {
    let flag_mode = args.mode.map(|m| match m {
        ModeArg::Fixed => Mode::Fixed,
        ModeArg::Stop => Mode::Stop,
    });
    if let (Some(cmd), Some(flag)) = (mode, flag_mode) {
        if cmd != flag {
            return Err(config_error(
                "--mode",
                format!("{flag:?} conflicts with the subcommand"),
            ));
        }
    }
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(
            sampler_spec(args.sampler.unwrap_or(SamplerKind::Curve)),
            Mode::Fixed,
        ),
    };
    if let Some(m) = mode.or(flag_mode) {
        cfg.mode = m;
    }
    if let Some(kind) = args.sampler {
        if cfg.sampler.name() != sampler_spec(kind).name() {
            cfg.sampler = sampler_spec(kind);
        }
    }
    if let Some(k) = args.k1 {
        match &mut cfg.sampler {
            SamplerSpec::Curve { k1 } | SamplerSpec::Lmm { k1, .. } => *k1 = k,
            SamplerSpec::Flip { .. } => {
                return Err(config_error("--k1", "not used by the flip sampler"))
            }
        }
    }
    if let Some(path) = &args.data {
        match &mut cfg.sampler {
            SamplerSpec::Lmm { data, .. } => *data = Some(path.clone()),
            _ => return Err(config_error("--data", "only used by the lmm sampler")),
        }
    }
    if args.n.is_some() {
        cfg.n = args.n;
    }
    if let Some(r) = args.reps {
        cfg.replications = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.kappa {
        cfg.kappa = k;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(b) = args.burn_in {
        cfg.burn_in = b;
    }
    if args.threads.is_some() {
        cfg.threads = args.threads;
    }
    if let Some(t) = &args.truth {
        cfg.truth = Some(parse_truth(t)?);
    }
    if let Some(eps) = args.epsilon {
        if cfg.mode == Mode::Fixed {
            return Err(config_error("--epsilon", "only used in stop mode"));
        }
        match &mut cfg.stop {
            Some(stop) => stop.epsilon = eps,
            None => cfg.stop = Some(StopSection::new(eps)),
        }
    }
    if cfg.mode == Mode::Stop && cfg.stop.is_none() {
        cfg.stop = Some(StopSection::new(0.05));
    }
    Ok(cfg)
}

fn cache_dir(args: &ExpArgs) -> Option<&Path> {
    (!args.no_cache).then_some(args.cache.as_path())
}

fn report(out: &ExperimentOutput, dir: Option<&Path>) -> Result<(), ExperimentError> {
    if let Some(t) = &out.truth {
        println!("truth ({}): {:?}", t.source, t.value);
    }
    print!("{}", out.summary());
    if let Some(dir) = dir {
        for path in out.write_to_dir(dir)? {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::RunFixed(args) => {
            let cfg = build_config(&args, Some(Mode::Fixed))?;
            report(&cmd_run_fixed(&cfg, cache_dir(&args))?, args.out.as_deref())
        }
        Command::RunStop(args) => {
            let cfg = build_config(&args, Some(Mode::Stop))?;
            report(&cmd_run_stop(&cfg, cache_dir(&args))?, args.out.as_deref())
        }
        Command::Run(args) => {
            let cfg = build_config(&args, None)?;
            let out = match cfg.mode {
                Mode::Fixed => cmd_run_fixed(&cfg, cache_dir(&args))?,
                Mode::Stop => cmd_run_stop(&cfg, cache_dir(&args))?,
            };
            report(&out, args.out.as_deref())
        }
        Command::Truth(args) => {
            let cfg = build_config(&args, None)?;
            let truth = cmd_truth(&cfg, cache_dir(&args))?;
            let json = serde_json::to_string_pretty(&truth)
                .map_err(|e| ExperimentError::Io(e.to_string()))?;
            println!("{json}");
            if let Some(dir) = &args.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("truth.json"), &json)?;
            }
            Ok(())
        }
        Command::RegenDemo(args) => {
            let chain = match args.chain {
                ChainArg::ThreeState => RegenChain::ThreeState,
                ChainArg::Iid => RegenChain::Iid,
                ChainArg::Flip => RegenChain::Flip,
            };
            let rep = cmd_regen_demo(chain, args.n, args.seed)?;
            print!("{}", rep.summary());
            if let Some(path) = &args.out {
                std::fs::write(path, rep.to_json())?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
