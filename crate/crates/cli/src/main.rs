//! `carate`: estimation, inference, and Monte Carlo study of average
//! treatment effects under covariate-adaptive randomization.
//!
//! Subcommands: `analyze` (a real dataset), `simulate` (one Monte Carlo
//! configuration), `sweep` (a regressor-count grid), `vif` (the
//! Marchenko-Pastur variance-inflation curve).
//!
//! Exit codes: 0 success, 2 data/validation error, 64 usage error,
//! 70 internal numerical failure.

mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use carate_core::data::{build_index, load_dataset, ColSpec, CovariateSpec, ValidationPolicy};
use carate_core::mc::{self, Method, SimConfig, SimReport};
use carate_core::randomize::{PiSpec, SchemeParams};
use carate_core::{covariance, data, estimate, inference, rmt, Error, Result};

use config::{parse_f64_grid, parse_usize_grid, resolve, resolve_seed, FileConfig};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "carate", version, about = "ATE estimation and inference under covariate-adaptive randomization", disable_help_subcommand = true)]
struct Cli {
    /// Flat `key = value` config file; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate ATEs and standard errors from a CSV dataset.
    Analyze(AnalyzeArgs),
    /// Run one Monte Carlo configuration.
    Simulate(SimulateArgs),
    /// Run a sweep over regressor counts.
    Sweep(SweepArgs),
    /// Emit the variance-inflation-factor curve.
    Vif(VifArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Path to the CSV dataset.
    #[arg(long)]
    data: PathBuf,
    /// Outcome column name.
    #[arg(long)]
    outcome: Option<String>,
    /// Treatment column name.
    #[arg(long)]
    treatment: Option<String>,
    /// Stratum column name.
    #[arg(long)]
    stratum: Option<String>,
    /// Covariate columns: comma list, a `*` prefix glob, or empty for none.
    #[arg(long)]
    covariates: Option<String>,
    /// Variance variant: crossfit, ho, hc3, naive.
    #[arg(long)]
    variance: Option<String>,
    /// Ridge safeguard for the combination weight.
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau0: Option<f64>,
    /// Minimum arm size before a stratum is dropped (with --drop-small-strata).
    #[arg(long)]
    min_arm_size: Option<usize>,
    /// Drop strata with an arm smaller than --min-arm-size instead of failing.
    #[arg(long)]
    drop_small_strata: bool,
    /// Print the covariance breakdown.
    #[arg(long)]
    verbose: bool,
    /// Write the per-method report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SimFlags {
    /// Model id 1..=6.
    #[arg(long)]
    model: Option<u8>,
    #[arg(long)]
    n: Option<usize>,
    /// Number of strata.
    #[arg(long)]
    strata: Option<usize>,
    /// Treatment effect mu_1 - mu_0 (0 for size runs, nonzero for power runs).
    #[arg(long)]
    effect: Option<f64>,
    /// Assignment scheme: srs, wei, bcd, sbr.
    #[arg(long)]
    scheme: Option<String>,
    /// Biased-coin parameter (bcd).
    #[arg(long)]
    lambda: Option<f64>,
    /// Target treatment fraction (srs, sbr).
    #[arg(long)]
    pi: Option<f64>,
    /// Variance variant for adj/star: crossfit, ho, hc3, naive.
    #[arg(long)]
    variance: Option<String>,
    /// Comma list from adj, star, unadj, naive.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Ridge safeguard for the combination weight.
    #[arg(long)]
    ridge: Option<f64>,
    /// Write the report as CSV here (otherwise printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    flags: SimFlags,
    /// Number of regressors used.
    #[arg(long)]
    k: Option<usize>,
    /// Also dump one row per (replication, method) to this CSV.
    #[arg(long)]
    dump_reps: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: SimFlags,
    /// Regressor-count grid `start:stop:step` (inclusive).
    #[arg(long)]
    k_grid: Option<String>,
}

#[derive(Args)]
struct VifArgs {
    /// Aspect-ratio grid `start:stop:step` (inclusive), each in [0, 1).
    #[arg(long)]
    kappa_grid: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    // Die quietly when a downstream pipe closes (`carate ... | head`).
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version output stays on the happy path
            if e.use_stderr() {
                eprint!("{e}");
                return 64;
            }
            print!("{e}");
            return 0;
        }
    };
    let file = match &cli.config {
        Some(path) => match FileConfig::load(path) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("error: {e}");
                return exit_code(&e);
            }
        },
        None => FileConfig::default(),
    };
    let outcome = match cli.command {
        Command::Analyze(args) => cmd_analyze(args, &file),
        Command::Simulate(args) => cmd_simulate(args, &file),
        Command::Sweep(args) => cmd_sweep(args, &file),
        Command::Vif(args) => cmd_vif(args, &file),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 64,
        Error::Io(_) | Error::Csv(_) | Error::InvalidData(_) | Error::NotEstimable { .. } => 2,
        Error::Numerical(_) | Error::DegenerateCombination | Error::NotPositiveDefinite => 70,
    }
}

/// Print the fully resolved configuration and return its short hash.
/// Pure execution knobs (worker count) are printed but not hashed, so
/// the hash identifies the statistical configuration alone.
fn print_resolved(config: &[(&str, String)]) -> String {
    let mut canon = String::new();
    println!("# resolved config");
    for (key, value) in config {
        println!("#   {key} = {value}");
        if *key != "workers" {
            canon.push_str(key);
            canon.push('=');
            canon.push_str(value);
            canon.push('\n');
        }
    }
    let digest = Sha256::digest(canon.as_bytes());
    let mut hash = String::new();
    for byte in digest.iter().take(8) {
        hash.push_str(&format!("{byte:02x}"));
    }
    hash
}

fn metadata_line(seed: u64, hash: &str) -> String {
    format!("# carate {VERSION} seed={seed} config-hash={hash}")
}

fn emit_csv(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_methods(text: &str) -> Result<Vec<Method>> {
    let methods: Result<Vec<Method>> = text
        .split(',')
        .map(|m| Method::parse(m.trim()))
        .collect();
    let methods = methods?;
    if methods.is_empty() {
        return Err(Error::InvalidArgument("method list must be nonempty".into()));
    }
    Ok(methods)
}

fn sim_config(flags: &SimFlags, k: usize, file: &FileConfig) -> Result<(SimConfig, String)> {
    let methods_text = resolve(
        flags.methods.clone(),
        file,
        "methods",
        "adj,star,unadj,naive".to_string(),
    )?;
    let cfg = SimConfig {
        model: resolve(flags.model, file, "model", 1)?,
        n: resolve(flags.n, file, "n", 400)?,
        num_strata: resolve(flags.strata, file, "strata", 2)?,
        k,
        effect: resolve(flags.effect, file, "effect", 0.0)?,
        scheme: resolve(flags.scheme.clone(), file, "scheme", "sbr".to_string())?,
        scheme_params: SchemeParams {
            pi: PiSpec::Uniform(resolve(flags.pi, file, "pi", 0.5)?),
            lambda: resolve(flags.lambda, file, "lambda", 0.75)?,
        },
        methods: parse_methods(&methods_text)?,
        variance: resolve(flags.variance.clone(), file, "variance", "crossfit".to_string())?,
        reps: resolve(flags.reps, file, "reps", 1000)?,
        seed: resolve_seed(flags.seed, file, DEFAULT_SEED)?,
        alpha: resolve(flags.alpha, file, "alpha", 0.05)?,
        tau0: resolve(flags.tau0, file, "tau0", 0.0)?,
        workers: resolve(flags.workers, file, "workers", 0)?,
        lambda_ridge: resolve(flags.ridge, file, "ridge", 0.0)?,
    };
    Ok((cfg, methods_text))
}

fn sim_resolved_entries(cfg: &SimConfig, methods_text: &str) -> Vec<(&'static str, String)> {
    let (pi, lambda) = match (&cfg.scheme_params.pi, cfg.scheme_params.lambda) {
        (PiSpec::Uniform(p), l) => (*p, l),
        (PiSpec::PerStratum(_), l) => (f64::NAN, l),
    };
    vec![
        ("model", cfg.model.to_string()),
        ("n", cfg.n.to_string()),
        ("strata", cfg.num_strata.to_string()),
        ("k", cfg.k.to_string()),
        ("effect", cfg.effect.to_string()),
        ("scheme", cfg.scheme.clone()),
        ("pi", pi.to_string()),
        ("lambda", lambda.to_string()),
        ("variance", cfg.variance.clone()),
        ("methods", methods_text.to_string()),
        ("reps", cfg.reps.to_string()),
        ("seed", cfg.seed.to_string()),
        ("alpha", cfg.alpha.to_string()),
        ("tau0", cfg.tau0.to_string()),
        ("workers", cfg.workers.to_string()),
        ("ridge", cfg.lambda_ridge.to_string()),
    ]
}

fn print_report_table(report: &SimReport) {
    println!(
        "{:<8} {:>12} {:>10} {:>10} {:>10} {:>8} {:>9}",
        "method", "reject_rate", "bias", "sd", "mean_se", "sd/se", "failures"
    );
    for m in &report.methods {
        println!(
            "{:<8} {:>12.4} {:>10.5} {:>10.5} {:>10.5} {:>8.3} {:>9}",
            m.method.name(),
            m.reject_rate,
            m.bias,
            m.sd,
            m.mean_se,
            m.sd_se_ratio,
            m.failures
        );
    }
    println!("wall time: {:.2}s over {} replications", report.wall_seconds, report.reps);
}

fn simulate_csv(cfg: &SimConfig, kappa: f64, report: &SimReport, meta: &str) -> String {
    let mut text = String::from(
        "model,scheme,n,strata,k,kappa,effect,variance,reps,seed,alpha,tau0,method,reject_rate,wilson_lo,wilson_hi,bias,sd,mean_se,sd_se_ratio,failures\n",
    );
    for m in &report.methods {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            cfg.model,
            cfg.scheme,
            cfg.n,
            cfg.num_strata,
            cfg.k,
            kappa,
            cfg.effect,
            cfg.variance,
            cfg.reps,
            cfg.seed,
            cfg.alpha,
            cfg.tau0,
            m.method.name(),
            m.reject_rate,
            m.wilson.0,
            m.wilson.1,
            m.bias,
            m.sd,
            m.mean_se,
            m.sd_se_ratio,
            m.failures
        ));
    }
    text.push_str(meta);
    text.push('\n');
    text
}

fn cell_kappa(cfg: &SimConfig) -> f64 {
    cfg.k as f64 / (cfg.n as f64 / (2.0 * cfg.num_strata as f64))
}

fn cmd_simulate(args: SimulateArgs, file: &FileConfig) -> Result<()> {
    let k = resolve(args.k, file, "k", 40)?;
    let (cfg, methods_text) = sim_config(&args.flags, k, file)?;
    let entries = sim_resolved_entries(&cfg, &methods_text);
    let hash = print_resolved(&entries);
    let meta = metadata_line(cfg.seed, &hash);

    let (report, records) = mc::run_simulation_with_records(&cfg)?;
    print_report_table(&report);
    if let Some(path) = &args.dump_reps {
        let mut text = String::from("rep,method,estimate,se,statistic,p_value,reject,failed\n");
        for rec in &records {
            for (mi, out) in rec.outcomes.iter().enumerate() {
                let name = cfg.methods[mi].name();
                match out {
                    Some(o) => text.push_str(&format!(
                        "{},{},{},{},{},{},{},0\n",
                        rec.rep, name, o.estimate, o.se, o.statistic, o.p_value, o.reject as u8
                    )),
                    None => text.push_str(&format!("{},{},,,,,,1\n", rec.rep, name)),
                }
            }
        }
        text.push_str(&meta);
        text.push('\n');
        std::fs::write(path, text)?;
        println!("wrote {}", path.display());
    }
    emit_csv(args.flags.out.as_ref(), &simulate_csv(&cfg, cell_kappa(&cfg), &report, &meta))
}

fn cmd_sweep(args: SweepArgs, file: &FileConfig) -> Result<()> {
    let grid_text = resolve(args.k_grid.clone(), file, "k_grid", "0:40:10".to_string())?;
    let k_grid = parse_usize_grid(&grid_text)?;
    let (cfg, methods_text) = sim_config(&args.flags, 0, file)?;
    let mut entries = sim_resolved_entries(&cfg, &methods_text);
    entries.retain(|(key, _)| *key != "k");
    entries.push(("k_grid", grid_text.clone()));
    let hash = print_resolved(&entries);
    let meta = metadata_line(cfg.seed, &hash);

    let rows = mc::sweep_kappa(&cfg, &k_grid)?;
    let mut text = String::from("k,kappa,method,reject_rate,mc_err,bias,sd,mean_se\n");
    for row in &rows {
        println!("k = {} (kappa = {}):", row.k, row.kappa);
        print_report_table(&row.report);
        for m in &row.report.methods {
            let mc_err = (m.wilson.1 - m.wilson.0) / 2.0;
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.k,
                row.kappa,
                m.method.name(),
                m.reject_rate,
                mc_err,
                m.bias,
                m.sd,
                m.mean_se
            ));
        }
    }
    text.push_str(&meta);
    text.push('\n');
    emit_csv(args.flags.out.as_ref(), &text)
}

fn cmd_vif(args: VifArgs, file: &FileConfig) -> Result<()> {
    let grid_text = resolve(args.kappa_grid.clone(), file, "kappa_grid", "0:0.9:0.05".to_string())?;
    let grid = parse_f64_grid(&grid_text)?;
    let entries = vec![("kappa_grid", grid_text.clone())];
    let hash = print_resolved(&entries);
    let curve = rmt::vif_curve(&grid)?;
    let mut text = String::from("kappa,vif\n");
    for (kappa, vif) in &curve {
        text.push_str(&format!("{kappa},{vif}\n"));
    }
    text.push_str(&metadata_line(0, &hash));
    text.push('\n');
    emit_csv(args.out.as_ref(), &text)
}

fn cmd_analyze(args: AnalyzeArgs, file: &FileConfig) -> Result<()> {
    let outcome = resolve(args.outcome.clone(), file, "outcome", "Y".to_string())?;
    let treatment = resolve(args.treatment.clone(), file, "treatment", "A".to_string())?;
    let stratum = resolve(args.stratum.clone(), file, "stratum", "S".to_string())?;
    let covariates = resolve(args.covariates.clone(), file, "covariates", "X*".to_string())?;
    let variance = resolve(args.variance.clone(), file, "variance", "crossfit".to_string())?;
    let ridge = resolve(args.ridge, file, "ridge", 0.0)?;
    let alpha = resolve(args.alpha, file, "alpha", 0.05)?;
    let tau0 = resolve(args.tau0, file, "tau0", 0.0)?;
    let min_arm_size = resolve(args.min_arm_size, file, "min_arm_size", 5)?;
    let drop_small = args.drop_small_strata || file.get("drop_small_strata") == Some("true");

    let entries = vec![
        ("data", args.data.display().to_string()),
        ("outcome", outcome.clone()),
        ("treatment", treatment.clone()),
        ("stratum", stratum.clone()),
        ("covariates", covariates.clone()),
        ("variance", variance.clone()),
        ("ridge", ridge.to_string()),
        ("alpha", alpha.to_string()),
        ("tau0", tau0.to_string()),
        ("min_arm_size", min_arm_size.to_string()),
        ("drop_small_strata", drop_small.to_string()),
    ];
    let hash = print_resolved(&entries);

    let cols = ColSpec {
        outcome,
        treatment,
        stratum,
        covariates: CovariateSpec::parse(&covariates),
    };
    let mut dataset = load_dataset(&args.data, &cols)?;
    let mut idx = build_index(&dataset);
    let policy = ValidationPolicy {
        min_arm_size,
        drop_small_strata: drop_small,
    };
    let mut report = data::validate(&dataset, &idx, &policy);
    if drop_small && !report.dropped_strata.is_empty() {
        println!(
            "note: dropping {} small strata: {}",
            report.dropped_strata.len(),
            report.dropped_strata.join(", ")
        );
        dataset = dataset.drop_strata(&report.dropped_strata)?;
        idx = build_index(&dataset);
        report = data::validate(&dataset, &idx, &policy);
    }
    if !report.adjusted_estimable() {
        for check in report.failures() {
            println!(
                "not estimable: stratum `{}`, arm {}: {}",
                check.stratum,
                check.arm,
                check.reason.as_deref().unwrap_or("unknown")
            );
        }
        return Err(Error::InvalidData(
            "dataset fails estimability validation".into(),
        ));
    }

    let variant = covariance::variant_by_name(&variance)?;
    let result = estimate::analyze(&dataset, &idx, variant.as_ref(), ridge)?;
    let naive = covariance::sigma_matrix(
        &dataset,
        &idx,
        &result.fits,
        result.tau_adj,
        result.tau_unadj,
        &covariance::NaiveFixedK,
    )?;

    let n = dataset.n();
    let rows = [
        ("adj", result.tau_adj, result.sigma.matrix[(0, 0)]),
        ("star", result.tau_star, result.var_star),
        ("unadj", result.tau_unadj, result.sigma.sigma22),
        ("naive", result.tau_adj, naive.matrix[(0, 0)]),
    ];
    println!(
        "{:<8} {:>12} {:>12} {:>12} {:>12}",
        "method", "estimate", "se", "p_value", "ci95"
    );
    let mut csv = String::from("method,estimate,se,statistic,p_value,reject,ci_lo,ci_hi\n");
    for (name, est, sigma2) in rows {
        let test = inference::wald(est, sigma2, n, tau0, alpha, name)?;
        let (lo, hi) = inference::confidence_interval(est, sigma2, n, alpha)?;
        println!(
            "{:<8} {:>12.6} {:>12.6} {:>12.6} [{:.4}, {:.4}]",
            name,
            est,
            (sigma2 / n as f64).sqrt(),
            test.p_value,
            lo,
            hi
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            name,
            est,
            (sigma2 / n as f64).sqrt(),
            test.statistic,
            test.p_value,
            test.reject as u8,
            lo,
            hi
        ));
    }
    println!("combination weight on adj: {:.6}", result.weight);
    if args.verbose {
        let s = &result.sigma;
        println!("covariance breakdown ({}):", s.variant);
        println!(
            "  sigma11 = {}, sigma12 = {}, sigma22 = {}",
            s.matrix[(0, 0)],
            s.matrix[(0, 1)],
            s.matrix[(1, 1)]
        );
        println!("  sigma_v_adj = {}, sigma_w = {}, psd = {}", s.sigma_v_adj, s.sigma_w, s.psd);
        for (sid, st) in idx.strata.iter().enumerate() {
            println!(
                "  stratum `{}`: omega2 = [{}, {}], varpi = [{}, {}]",
                st.label, s.omega2[sid][0], s.omega2[sid][1], s.varpi[sid][0], s.varpi[sid][1]
            );
        }
    }
    csv.push_str(&metadata_line(0, &hash));
    csv.push('\n');
    if args.out.is_some() {
        emit_csv(args.out.as_ref(), &csv)?;
    }
    Ok(())
}
