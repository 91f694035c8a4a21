use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dualap::io::{self, CohortFile, IdentifiedFile};
use dualap::pipeline;
use dualap::{RunConfig, CONFIG_ENV};
use dualap_core::sysid::simulate_ctrl;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

/// Dual-hormone artificial pancreas: virtual cohort, identification and
/// closed-loop trial.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// TOML run configuration (defaults apply to missing keys).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    workers: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a virtual cohort.
    Cohort {
        /// Number of patients (default from the config).
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the control model to identification data.
    Identify(IdentifyArgs),
    /// Run the closed-loop trial.
    Trial(TrialArgs),
    /// Print a trial summary.
    Report {
        /// `summary.csv` or the trial output directory holding it.
        path: PathBuf,
    },
}

#[derive(Args)]
struct IdentifyArgs {
    /// Cohort file (default: the bundled cohort, or one generated from the
    /// config when its settings differ).
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Identification data CSV for a single patient.
    #[arg(long, conflicts_with = "generate", requires = "patient")]
    data: Option<PathBuf>,
    /// Simulate the identification experiment on the patient's plant first.
    #[arg(long)]
    generate: bool,
    /// Patient id (default with --generate: every patient).
    #[arg(long)]
    patient: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrialArgs {
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Directory of identified parameter files; identifies inline if absent.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Protocol TOML (default: the bundled protocol).
    #[arg(long)]
    protocol: Option<PathBuf>,
    /// Run only the first N patients.
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Bad combination of arguments; exits with the usage status.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let mut config = RunConfig::resolve(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let workers = cli.workers.map(|w| w as usize);
    match cli.command {
        Command::Cohort { patients, out } => {
            if let Some(n) = patients {
                config.patients = n;
            }
            if config.patients == 0 {
                return Err(usage("cohort size must be at least 1"));
            }
            let cohort = pipeline::cohort(&config, config.patients)?;
            io::write_json(&out, &cohort)?;
            eprintln!("wrote {} patients to {}", cohort.patients.len(), out.display());
            Ok(0)
        }
        Command::Identify(args) => identify(&config, args, workers),
        Command::Trial(args) => trial(&config, args, workers),
        Command::Report { path } => report(&path),
    }
}

/// The requested cohort file, else the bundled one when it was produced by
/// the same settings, else a fresh cohort from the config.
fn load_cohort(path: Option<&Path>, config: &RunConfig) -> Result<CohortFile> {
    if path.is_some() {
        return io::read_cohort(path);
    }
    let bundled = io::read_cohort(None)?;
    if bundled.config_hash == config.hash() {
        Ok(bundled)
    } else {
        pipeline::cohort(config, config.patients)
    }
}

fn identify(config: &RunConfig, args: IdentifyArgs, workers: Option<usize>) -> Result<u8> {
    if args.data.is_none() && !args.generate {
        return Err(usage("identify needs --data FILE or --generate"));
    }
    let cohort = load_cohort(args.cohort.as_deref(), config)?;
    let selected: Vec<_> = match args.patient {
        Some(id) => match cohort.patients.iter().find(|p| p.id == id) {
            Some(p) => vec![p.clone()],
            None => return Err(usage(format!("patient {id} is not in the cohort"))),
        },
        None => cohort.patients.clone(),
    };
    let hash = config.hash();
    let pool = pipeline::thread_pool(workers)?;
    let results: Vec<Result<IdentifiedFile>> = pool.install(|| {
        use rayon::prelude::*;
        selected
            .par_iter()
            .map(|p| -> Result<IdentifiedFile> {
                let stage = || format!("patient {}: identification", p.id);
                let (data, true_g) = match &args.data {
                    Some(path) => (io::read_dataset(path).with_context(stage)?, Vec::new()),
                    None => {
                        let rec = pipeline::generate_data(p, config).with_context(stage)?;
                        (rec.dataset, rec.true_g)
                    }
                };
                let fit = pipeline::identify(p, &data, config).with_context(stage)?;
                if args.generate {
                    io::write_dataset(&args.out.join(format!("patient_{:03}_data.csv", p.id)), &data, &hash)?;
                }
                let model = simulate_ctrl(&fit.theta.apply(&fit.fixed), &fit.theta.initial, &data, 2)?;
                io::write_fit(&args.out.join(format!("patient_{:03}_fit.csv", p.id)), &data, &model, &true_g, &hash)?;
                io::write_json(&pipeline::params_path(&args.out, p.id), &fit)?;
                Ok(fit)
            })
            .collect()
    });
    let mut code = 0;
    for r in results {
        match r {
            Ok(f) if !f.converged => {
                eprintln!("patient {}: identification did not converge (nll {:.3})", f.patient, f.nll);
                if code == 0 {
                    code = EXIT_NOT_CONVERGED;
                }
            }
            Ok(f) => eprintln!("patient {}: nll {:.3}, fit rmse {:.3} mmol/L", f.patient, f.nll, f.rmse),
            Err(e) => {
                eprintln!("error: {e:#}");
                code = EXIT_FAILURE;
            }
        }
    }
    Ok(code)
}

fn trial(config: &RunConfig, args: TrialArgs, workers: Option<usize>) -> Result<u8> {
    let cohort = load_cohort(args.cohort.as_deref(), config)?;
    let mut patients = cohort.patients;
    if let Some(n) = args.patients {
        if n == 0 || n > patients.len() {
            return Err(usage(format!("--patients must be in 1..={}", patients.len())));
        }
        patients.truncate(n);
    }
    let protocol = io::read_protocol(args.protocol.as_deref())?;
    let params = match &args.params {
        Some(dir) => Some(
            patients
                .iter()
                .map(|p| io::read_json::<IdentifiedFile>(&pipeline::params_path(dir, p.id)))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let outcomes = pipeline::run_patients(&patients, params.as_deref(), &protocol, config, workers)?;
    pipeline::write_trial_outputs(&args.out, &outcomes, &patients, config, "trial")?;

    let mut code = 0;
    for o in &outcomes {
        if let Some(f) = &o.failure {
            eprintln!("error: {f}");
            code = EXIT_FAILURE;
        }
        if o.identified.as_ref().is_some_and(|f| !f.converged) && code == 0 {
            eprintln!("patient {}: identification did not converge", o.patient);
            code = EXIT_NOT_CONVERGED;
        }
    }
    report(&args.out.join("summary.csv"))?;
    Ok(code)
}

fn report(path: &Path) -> Result<u8> {
    let file = if path.is_dir() { path.join("summary.csv") } else { path.to_path_buf() };
    let rows = io::read_summary(&file)?;
    if rows.is_empty() {
        bail!("{} has no rows", file.display());
    }
    println!(
        "{:>8} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8} {:>9}",
        "patient", "valid", "<3", "3-3.9", "3.9-10", "10-13.9", ">13.9", "meanG", "basal U", "bolus U", "glucagon"
    );
    for r in &rows {
        println!(
            "{:>8} {:>6} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>8.2} {:>8.2} {:>9.1}",
            r.patient, r.valid, r.bands[0], r.bands[1], r.bands[2], r.bands[3], r.bands[4], r.mean_glucose, r.basal,
            r.bolus, r.glucagon
        );
    }
    let patients: Vec<_> = rows.iter().filter(|r| r.patient != "mean").collect();
    if let Some(worst) = patients.iter().map(|r| r.bands[2]).reduce(f64::min) {
        let below = patients.iter().filter(|r| r.bands[0] + r.bands[1] > 0.0).count();
        println!("lowest time in range {worst:.2}%; {below} of {} patients spent time below 3.9 mmol/L", patients.len());
    }
    Ok(0)
}
