use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ergodic_bem::error::{Error, Result};
use ergodic_bem::experiments::{run, run_suite, Experiment, ExperimentConfig, Profile, Suite, EXIT_CRITERION_FAILED};
use ergodic_bem::parallel::{with_workers, Workers};

#[derive(Parser)]
#[command(name = "ergodic-bem", version, about = "Backward Euler-Maruyama ergodic averages and CLT diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in the config file (or by --set experiment=...)
    Run(Common),
    /// Estimate pi(h) from several initial values
    ErgodicLimit(Common),
    /// Table of E f(Z) over a descending list of steps
    CltTable(Common),
    /// Raw samples of the deviation statistic
    Deviations(Common),
    /// Kolmogorov-Smirnov check of Z against N(0, variance)
    CltKs(Common),
    /// RMS self-convergence errors and fitted order
    StrongOrder(Common),
    /// Running moments E|X_n|^p with plateau checks
    MomentScan(Common),
    /// Mean squared distance of two synchronously coupled paths
    Contractivity(Common),
    /// Bias of the numerical invariant mean against tau
    BiasOrder(Common),
    /// Solve the Poisson equation on a grid
    PoissonSolve(Common),
    /// Residual of a Poisson table under the generator
    PoissonCheck(Common),
    /// Asymptotic variance by three estimators
    Variance(Common),
    /// Martingale/remainder split of Z
    Decomposition(Common),
    /// Run a named property suite
    Suite {
        /// properties, paper-figures or paper-tables
        name: String,
        /// desk or full
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        workers: Option<String>,
        /// also write the report as JSON here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// flat TOML config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// output directory for <experiment>.csv and <experiment>.json
    #[arg(long)]
    out: Option<String>,
    /// worker count or "auto"
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long = "tau-ref")]
    tau_ref: Option<String>,
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long)]
    paths: Option<String>,
    #[arg(long)]
    x0: Option<String>,
    /// override any config key, e.g. --set h=x4 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self, experiment: Option<Experiment>) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        if let Some(e) = experiment {
            overrides.push(("experiment".to_string(), format!("\"{e}\"")));
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let flags = [
            ("seed", self.seed.map(|s| s.to_string())),
            ("tau", self.tau.clone()),
            ("tau_ref", self.tau_ref.clone()),
            ("horizon", self.horizon.clone()),
            ("n_paths", self.paths.clone()),
            ("x0", self.x0.clone()),
            ("out", self.out.as_ref().map(|o| format!("{o:?}"))),
            ("workers", self.workers.as_ref().map(|w| format!("{w:?}"))),
        ];
        overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &overrides),
            None => ExperimentConfig::from_parts(None, &overrides),
        }
    }
}

fn run_experiment(common: &Common, experiment: Option<Experiment>) -> Result<i32> {
    let cfg = common.load(experiment)?;
    let out = run(&cfg)?;
    if out.files.is_empty() {
        print!("{}", out.csv);
    } else {
        for f in &out.files {
            eprintln!("wrote {}", f.display());
        }
    }
    for w in out.metadata["warnings"].as_array().into_iter().flatten() {
        eprintln!("warning: {}", w.as_str().unwrap_or_default());
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32> {
    let (common, experiment) = match &cli.command {
        Command::Run(c) => (c, None),
        Command::ErgodicLimit(c) => (c, Some(Experiment::ErgodicLimit)),
        Command::CltTable(c) => (c, Some(Experiment::CltTable)),
        Command::Deviations(c) => (c, Some(Experiment::Deviations)),
        Command::CltKs(c) => (c, Some(Experiment::CltKs)),
        Command::StrongOrder(c) => (c, Some(Experiment::StrongOrder)),
        Command::MomentScan(c) => (c, Some(Experiment::MomentScan)),
        Command::Contractivity(c) => (c, Some(Experiment::Contractivity)),
        Command::BiasOrder(c) => (c, Some(Experiment::BiasOrder)),
        Command::PoissonSolve(c) => (c, Some(Experiment::PoissonSolve)),
        Command::PoissonCheck(c) => (c, Some(Experiment::PoissonCheck)),
        Command::Variance(c) => (c, Some(Experiment::Variance)),
        Command::Decomposition(c) => (c, Some(Experiment::Decomposition)),
        Command::Suite { name, profile, seed, workers, out } => {
            let suite: Suite = name.parse()?;
            let profile: Profile = profile.parse()?;
            let workers = match workers {
                Some(w) => w.parse()?,
                None => Workers::from_env()?,
            };
            let report = with_workers(workers, || run_suite(suite, profile, *seed))?;
            for c in &report.criteria {
                println!("{}", c.line());
            }
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
            return Ok(if report.passed() { 0 } else { EXIT_CRITERION_FAILED });
        }
    };
    run_experiment(common, experiment)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
