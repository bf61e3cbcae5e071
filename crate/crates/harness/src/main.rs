use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use clipbias::config::{parse_eps_high_list, parse_eps_low_list, RunConfig};
use clipbias::experiment::{ablate_clipping, run_experiment};
use clipbias::validate;
use clipbias::HarnessError;
use clipbias_core::Updater;

#[derive(Parser)]
#[command(
    name = "clipbias",
    version,
    about = "Clipping-induced entropy dynamics on tabular token trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured experiment.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in numerical self-checks.
    Validate {
        #[arg(value_enum)]
        check: Check,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Sweep eps_low x eps_high around a base config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated; `off` disables clip-low.
        #[arg(long)]
        eps_low: String,
        /// Comma-separated; `off` disables clip-high.
        #[arg(long)]
        eps_high: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    Gradients,
    Residuals,
    Conditions,
}

fn simulate(config: PathBuf, out: PathBuf, seed: Option<u64>) -> Result<bool, HarnessError> {
    let mut cfg = RunConfig::load(&config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let summary = run_experiment(&cfg, &out)?;
    println!(
        "entropy {:.6} -> {:.6} ({:.1}% of initial)",
        summary.initial_entropy,
        summary.final_entropy,
        100.0 * summary.final_entropy / summary.initial_entropy
    );
    if let Some(eval) = summary.final_eval {
        println!("pass@k {:.4}  mean@k {:.4}", eval.pass_at_k, eval.mean_at_k);
    }
    println!("artifacts in {}", out.display());
    Ok(true)
}

fn validate_gradients(instances: usize) -> Result<bool, HarnessError> {
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for seed in 0..instances as u64 {
        let check = validate::check_gradient(seed, 1e-5)?;
        if check.skipped {
            skipped += 1;
        } else {
            worst = worst.max(check.rel_error);
        }
    }
    let ok = worst <= 1e-4;
    println!(
        "gradients: {} instances, {skipped} skipped at clip boundaries, max relative error {worst:.3e} [{}]",
        instances,
        if ok { "ok" } else { "FAIL" }
    );
    Ok(ok)
}

fn validate_residuals(instances: usize) -> Result<bool, HarnessError> {
    let mut ok = true;
    for updater in [Updater::Pg, Updater::Npg] {
        let mut passing = 0;
        for seed in 0..instances as u64 {
            let scan = validate::scan_instance(seed, updater)?;
            let slope = scan.slope.unwrap_or(f64::NAN);
            passing += (slope >= validate::RESIDUAL_MIN_SLOPE) as usize;
            println!("  {} seed {seed}: slope {slope:.3}", updater.name());
        }
        let pass = passing * 10 >= instances * 9;
        println!(
            "residuals {}: {passing}/{instances} instances with slope >= {} [{}]",
            updater.name(),
            validate::RESIDUAL_MIN_SLOPE,
            if pass { "ok" } else { "FAIL" }
        );
        ok &= pass;
    }
    Ok(ok)
}

fn validate_conditions(instances: usize) -> Result<bool, HarnessError> {
    let seeds: Vec<u64> = (0..instances.max(1) as u64).collect();
    let tally = validate::condition_tally(&seeds)?;
    let names = [
        "E[Q]-E[Q|X]",
        "E[Q]-E[Q|Y]",
        "E[-log pi|X]-H",
        "E[-log pi|Y]-H",
    ];
    let mut ok = true;
    for (i, frac) in tally.fractions().iter().enumerate() {
        let pass = frac.is_some_and(|f| f >= validate::CONDITION_MIN_FRACTION);
        ok &= pass;
        println!(
            "conditions {:<16} {}/{} nonnegative ({:.2}%) [{}]",
            names[i],
            tally.nonnegative[i],
            tally.defined[i],
            100.0 * frac.unwrap_or(0.0),
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn ablate(
    config: PathBuf,
    eps_low: String,
    eps_high: String,
    out: PathBuf,
) -> Result<bool, HarnessError> {
    let cfg = RunConfig::load(&config)?;
    let low = parse_eps_low_list(&eps_low)?;
    let high = parse_eps_high_list(&eps_high)?;
    let rows = ablate_clipping(&cfg, &low, &high, &out)?;
    for row in &rows {
        println!(
            "eps_low {} eps_high {}: entropy {:.6} -> {:.6}",
            row.clip.eps_low,
            row.clip.eps_high,
            row.summary.initial_entropy,
            row.summary.final_entropy
        );
    }
    println!("summary in {}", out.join("ablation.csv").display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, seed } => simulate(config, out, seed),
        Command::Validate { check, instances } => match check {
            Check::Gradients => validate_gradients(instances),
            Check::Residuals => validate_residuals(instances),
            Check::Conditions => validate_conditions(instances),
        },
        Command::Ablate {
            config,
            eps_low,
            eps_high,
            out,
        } => ablate(config, eps_low, eps_high, out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
