use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nbsynth::evidence::{serialize_dataset, StudyRecord, SubsetLabel};
use nbsynth::hiermodel::SeArmRouting;
use nbsynth_cli::classic::{classic_studies, parse_tau2, render_table};
use nbsynth_cli::config::{parse_trunc_var, FitSettings, RunOverrides};
use nbsynth_cli::error::{CliError, CliResult};
use nbsynth_cli::fit::{cmd_fit, write_fit};
use nbsynth_cli::output::{read_dataset, write_json, write_text};
use nbsynth_cli::simulate::{simulate_and_fit, simulate_dataset, ReportingMix, SimulationParams};
use nbsynth_cli::validate::validate_studies;
use nbsynth_cli::EXIT_USAGE;

#[derive(Parser)]
#[command(name = "nbsynth", version, about = "Negative-binomial evidence synthesis of aggregate count data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset and report subset tallies and derived totals.
    Validate {
        #[arg(long)]
        input: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Fit the hierarchical model to one subset.
    Fit(FitArgs),
    /// Classical random-effects pooling of log rate ratios.
    Classic {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "A")]
        subset: SubsetLabel,
        /// Between-study variance estimator: reml or dl.
        #[arg(long, default_value = "reml")]
        tau2: String,
        /// Write the JSON result here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic dataset and optionally fit it.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Flat key = value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    subset: Option<SubsetLabel>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin_frac: Option<f64>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// How rate-with-SE arms enter the likelihood: normal or counts.
    #[arg(long)]
    se_arms: Option<SeArmRouting>,
    /// Truncated variance form: exact or published.
    #[arg(long)]
    trunc_var: Option<String>,
    /// Sample the prior only.
    #[arg(long)]
    priors_only: bool,
    #[arg(long)]
    psrf_threshold: Option<f64>,
    /// Exit with status 2 when the chains have not converged.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.75)]
    theta: f64,
    #[arg(long, default_value_t = 20)]
    studies: usize,
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    #[arg(long, default_value_t = 0.4)]
    sigma_lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    phi: f64,
    #[arg(long, default_value_t = 0.3)]
    sigma_phi: f64,
    #[arg(long, default_value_t = 0.05)]
    sigma_psi: f64,
    #[arg(long, default_value_t = 150)]
    patients_min: u64,
    #[arg(long, default_value_t = 600)]
    patients_max: u64,
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    /// Reporting formats with weights, e.g. se:4,both:8,total:3,zero:9.
    #[arg(long)]
    mix: Option<ReportingMix>,
    /// Fit the synthetic data (subset C) and report recovery.
    #[arg(long)]
    fit: bool,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 200_000)]
    iters: usize,
    #[arg(long, default_value_t = 0.5)]
    burnin_frac: f64,
    #[arg(long, default_value_t = 20)]
    thin: usize,
    #[arg(long, default_value = "nbsynth-sim")]
    out: PathBuf,
}

fn run_validate(input: &Path, json: Option<&Path>) -> CliResult<i32> {
    let studies = read_dataset(input)?;
    let report = validate_studies(&studies);
    print!("{}", report.render());
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    Ok(if report.is_clean() { 0 } else { EXIT_USAGE })
}

fn run_fit(args: FitArgs) -> CliResult<i32> {
    let trunc_var = args.trunc_var.as_deref().map(parse_trunc_var).transpose()?;
    let flags = RunOverrides {
        input: args.input,
        out: args.out,
        strict: args.strict.then_some(true),
        subset: args.subset,
        chains: args.chains,
        iterations: args.iters,
        burn_in_fraction: args.burnin_frac,
        thinning: args.thin,
        seed: args.seed,
        se_arms: args.se_arms,
        trunc_var,
        priors_only: args.priors_only.then_some(true),
        psrf_threshold: args.psrf_threshold,
    };
    let file = match &args.config {
        Some(path) => RunOverrides::from_file(path)?,
        None => RunOverrides::default(),
    };
    let config = flags.or(file).resolve()?;
    let started = Instant::now();
    let fit = cmd_fit(&config);
    eprintln!("sampling took {:.1} s", started.elapsed().as_secs_f64());
    let fit = fit?;
    print!("{}", fit.report);
    println!("artifacts written to {}", config.out.display());
    Ok(0)
}

fn run_classic(input: &Path, subset: SubsetLabel, tau2: &str, json: Option<&Path>) -> CliResult<i32> {
    let studies = read_dataset(input)?;
    let report = classic_studies(&studies, subset, parse_tau2(tau2)?)?;
    match json {
        Some(path) => {
            write_json(path, &report)?;
            print!("{}", render_table(&report));
        }
        None => {
            print!("{}", render_table(&report));
            let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Invalid(e.to_string()))?;
            println!("{text}");
        }
    }
    Ok(0)
}

fn run_simulate(args: SimulateArgs) -> CliResult<i32> {
    let params = SimulationParams {
        theta: args.theta,
        n_studies: args.studies,
        rate_median: args.rate,
        sigma_lambda: args.sigma_lambda,
        phi_median: args.phi,
        sigma_phi: args.sigma_phi,
        sigma_psi: args.sigma_psi,
        patients_min: args.patients_min,
        patients_max: args.patients_max,
        duration: args.duration,
        mix: args.mix.unwrap_or_default(),
    };
    let write_dataset = |studies: &[StudyRecord]| -> CliResult<()> {
        let mut buf = Vec::new();
        serialize_dataset(studies, &mut buf).map_err(|e| CliError::io(&args.out, e))?;
        write_text(&args.out.join("dataset.csv"), &String::from_utf8_lossy(&buf))?;
        write_json(&args.out.join("truth.json"), &params)
    };
    if !args.fit {
        let studies = simulate_dataset(&params, args.seed)?;
        let records: Vec<StudyRecord> = studies.into_iter().map(|s| s.record).collect();
        write_dataset(&records)?;
        println!("{} studies written to {}", records.len(), args.out.join("dataset.csv").display());
        return Ok(0);
    }
    let settings = FitSettings {
        subset: SubsetLabel::C,
        chains: args.chains,
        iterations: args.iters,
        burn_in_fraction: args.burnin_frac,
        thinning: args.thin,
        ..FitSettings::with_seed(args.seed)
    };
    let (studies, fit, recovery) = simulate_and_fit(&params, args.seed, &settings)?;
    let records: Vec<StudyRecord> = studies.into_iter().map(|s| s.record).collect();
    write_dataset(&records)?;
    write_fit(&args.out.join("fit"), &fit)?;
    write_json(&args.out.join("recovery.json"), &recovery)?;
    println!(
        "theta true {}  posterior median {:.4} [{:.4}, {:.4}]  covered: {}",
        recovery.theta_true,
        recovery.theta_median,
        recovery.theta_q025,
        recovery.theta_q975,
        if recovery.covered { "yes" } else { "no" }
    );
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap uses 2 for usage errors; this tool reserves 2 for model failures.
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Validate { input, json } => run_validate(&input, json.as_deref()),
        Command::Fit(args) => run_fit(args),
        Command::Classic { input, subset, tau2, json } => run_classic(&input, subset, &tau2, json.as_deref()),
        Command::Simulate(args) => run_simulate(args),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
