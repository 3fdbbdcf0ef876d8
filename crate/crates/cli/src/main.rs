//! Command-line front end: fit count tables, simulate scenario datasets,
//! run the RMSE benchmark grid, and check block gradients.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/parse problems,
//! 3 data-validation problems.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use zippca_core::blocks::{run_gradient_checks, BlockKind};
use zippca_core::{
    fit, generate, run_benchmark, BenchConfig, CountMatrix, FactorInit, FitOptions, Hyperparams,
    Scenario, ScenarioConfig, SimulatedDataset,
};

const EXIT_CHECK_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(
    name = "zippca",
    about = "Zero-inflated probabilistic PCA for sparse count matrices",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a delimited count table.
    Fit(FitArgs),
    /// Generate a synthetic dataset with known truth.
    Simulate(SimulateArgs),
    /// Run the replication benchmark grid from a JSON config.
    Bench(BenchArgs),
    /// Compare analytic block gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Count table (rows samples, columns taxa; first row/column are labels).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory for estimates, the bound trace, and the run manifest.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Number of latent factors.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    /// Classification threshold for the zero-inflation step.
    #[arg(long)]
    pi0: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on outer iterations.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Relative bound-change tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// zero | spectral
    #[arg(long)]
    factor_init: Option<String>,
    /// auto | comma | tab
    #[arg(long)]
    delimiter: Option<String>,
    /// Worker threads (fitting itself is single-threaded).
    #[arg(long)]
    threads: Option<usize>,
    /// JSON file with the same keys as the flags; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// s1 | s2
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON benchmark grid (see README for the schema).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Override the worker pool size from the config.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random feasible points per block.
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 15)]
    p: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Flip the sign of one gradient coordinate of the named block
    /// (test harness hook for the detector itself).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CHECK_FAILURE,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

// ---------------------------------------------------------------------------
// fit

/// Flat key/value configuration; also the manifest schema minus the result
/// block, so a manifest can be replayed with --config.
#[derive(Debug, Default, Serialize, Deserialize)]
struct FitConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_dir: Option<PathBuf>,
    k: Option<usize>,
    alpha1: Option<f64>,
    alpha2: Option<f64>,
    pi0: Option<f64>,
    seed: Option<u64>,
    max_iter: Option<usize>,
    tol: Option<f64>,
    factor_init: Option<String>,
    delimiter: Option<String>,
    threads: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    input: &'a Path,
    output_dir: &'a Path,
    k: usize,
    alpha1: f64,
    alpha2: f64,
    pi0: f64,
    sigma_beta: &'a [f64],
    seed: u64,
    max_iter: usize,
    tol: f64,
    factor_init: &'a str,
    delimiter: &'a str,
    threads: usize,
    result: ManifestResult,
}

#[derive(Debug, Serialize)]
struct ManifestResult {
    outer_iterations: usize,
    converged: bool,
    final_elbo: f64,
}

fn cmd_fit(args: FitArgs) -> Result<(), Failure> {
    let file_cfg: FitConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?
        }
        None => FitConfig::default(),
    };

    let input = args
        .input
        .or(file_cfg.input)
        .ok_or_else(|| Failure::usage("--input is required (flag or config)"))?;
    let output_dir = args
        .output_dir
        .or(file_cfg.output_dir)
        .ok_or_else(|| Failure::usage("--output-dir is required (flag or config)"))?;
    let k = args.k.or(file_cfg.k).unwrap_or(2);
    let alpha1 = args.alpha1.or(file_cfg.alpha1).unwrap_or(1.0);
    let alpha2 = args.alpha2.or(file_cfg.alpha2).unwrap_or(1.0);
    let pi0 = args.pi0.or(file_cfg.pi0).unwrap_or(0.5);
    let seed = args.seed.or(file_cfg.seed).unwrap_or(0);
    let max_iter = args.max_iter.or(file_cfg.max_iter).unwrap_or(200);
    let tol = args.tol.or(file_cfg.tol).unwrap_or(1e-6);
    let threads = args.threads.or(file_cfg.threads).unwrap_or(1);
    let factor_init_name = args
        .factor_init
        .or(file_cfg.factor_init)
        .unwrap_or_else(|| "zero".to_string());
    let factor_init = parse_factor_init(&factor_init_name)?;
    let delimiter_name = args
        .delimiter
        .or(file_cfg.delimiter)
        .unwrap_or_else(|| "auto".to_string());

    let table = read_count_table(&input, &delimiter_name)?;
    validate_support(&table)?;
    let counts = CountMatrix::new(table.rows.clone())
        .map_err(|e| Failure::data(format!("{}: {e}", input.display())))?;

    let hyper = Hyperparams {
        k,
        sigma_beta: vec![1.0; k],
        alpha1,
        alpha2,
        pi0,
    };
    hyper
        .validate(counts.p())
        .map_err(|e| Failure::usage(format!("{e}")))?;
    let opts = FitOptions {
        max_outer_iter: max_iter,
        elbo_rel_tol: tol,
        seed,
        jacobi_parallel: false,
        factor_init,
    };
    opts.validate().map_err(|e| Failure::usage(format!("{e}")))?;
    let result = fit(&counts, &hyper, &opts)
        .map_err(|e| Failure::data(format!("fit failed: {e}")))?;

    fs::create_dir_all(&output_dir)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", output_dir.display())))?;

    let taxa = &table.taxa;
    let samples = &table.samples;
    write_file(
        &output_dir.join("rho_hat.csv"),
        &matrix_csv("sample", taxa, samples, &result.rho_hat),
    )?;
    write_file(
        &output_dir.join("B_hat.csv"),
        &factor_csv("taxon", taxa, &result.theta_hat.b),
    )?;
    write_file(
        &output_dir.join("F_hat.csv"),
        &factor_csv("sample", samples, &result.f_hat),
    )?;
    write_file(
        &output_dir.join("eta_hat.csv"),
        &vector_csv("taxon", "eta_hat", taxa, &result.theta_hat.eta),
    )?;
    write_file(
        &output_dir.join("beta0_hat.csv"),
        &vector_csv("taxon", "beta0_hat", taxa, &result.theta_hat.beta0),
    )?;
    let mut trace = String::from("iteration,elbo\n");
    for (i, v) in result.elbo_trace.iter().enumerate() {
        trace.push_str(&format!("{},{}\n", i + 1, fmt10(*v)));
    }
    write_file(&output_dir.join("elbo_trace.csv"), &trace)?;

    let manifest = Manifest {
        command: "fit",
        input: &input,
        output_dir: &output_dir,
        k,
        alpha1,
        alpha2,
        pi0,
        sigma_beta: &hyper.sigma_beta,
        seed,
        max_iter,
        tol,
        factor_init: factor_init_name.as_str(),
        delimiter: delimiter_name.as_str(),
        threads,
        result: ManifestResult {
            outer_iterations: result.outer_iterations,
            converged: result.converged,
            final_elbo: result.elbo_trace.last().copied().unwrap_or(f64::NAN),
        },
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Failure::usage(format!("manifest: {e}")))?;
    write_file(&output_dir.join("manifest.json"), &format!("{manifest_json}\n"))?;

    println!(
        "fit: {} samples x {} taxa, k = {k}, {} outer iterations, converged = {}",
        counts.n(),
        counts.p(),
        result.outer_iterations,
        result.converged
    );
    Ok(())
}

fn parse_factor_init(name: &str) -> Result<FactorInit, Failure> {
    match name {
        "zero" => Ok(FactorInit::Zero),
        "spectral" => Ok(FactorInit::Spectral),
        other => Err(Failure::usage(format!(
            "unknown factor init '{other}' (expected zero or spectral)"
        ))),
    }
}

struct CountTable {
    taxa: Vec<String>,
    samples: Vec<String>,
    rows: Vec<Vec<u64>>,
}

fn sniff_delimiter(path: &Path, choice: &str) -> Result<u8, Failure> {
    match choice {
        "comma" => return Ok(b','),
        "tab" => return Ok(b'\t'),
        "auto" => {}
        other => {
            return Err(Failure::usage(format!(
                "unknown delimiter '{other}' (expected auto, comma, or tab)"
            )))
        }
    }
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    let first = text.lines().next().unwrap_or("");
    Ok(if first.contains('\t') { b'\t' } else { b',' })
}

fn read_count_table(path: &Path, delimiter: &str) -> Result<CountTable, Failure> {
    let delim = sniff_delimiter(path, delimiter)?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(false)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Failure::usage(format!("cannot open {}: {e}", path.display())))?;

    let mut taxa = Vec::new();
    let mut samples = Vec::new();
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line().to_string())
                .unwrap_or_else(|| "?".into());
            Failure::usage(format!("{}: row {line}: {e}", path.display()))
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(idx as u64 + 1);
        if idx == 0 {
            if record.len() < 2 {
                return Err(Failure::usage(format!(
                    "{}: header row needs a label column plus at least one taxon",
                    path.display()
                )));
            }
            taxa = record.iter().skip(1).map(str::to_string).collect();
            continue;
        }
        if record.len() != taxa.len() + 1 {
            return Err(Failure::usage(format!(
                "{}: row {line} has {} fields, expected {}",
                path.display(),
                record.len(),
                taxa.len() + 1
            )));
        }
        samples.push(record.get(0).unwrap_or("").to_string());
        let mut row = Vec::with_capacity(taxa.len());
        for (j, field) in record.iter().skip(1).enumerate() {
            let value: u64 = field.trim().parse().map_err(|_| {
                Failure::usage(format!(
                    "{}: row {line}, column {}: '{field}' is not a non-negative integer",
                    path.display(),
                    j + 2
                ))
            })?;
            row.push(value);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Failure::usage(format!("{}: no data rows", path.display())));
    }
    Ok(CountTable { taxa, samples, rows })
}

fn validate_support(table: &CountTable) -> Result<(), Failure> {
    let zero_rows: Vec<&str> = table
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.iter().all(|&v| v == 0))
        .map(|(i, _)| table.samples[i].as_str())
        .collect();
    let zero_cols: Vec<&str> = (0..table.taxa.len())
        .filter(|&j| table.rows.iter().all(|r| r[j] == 0))
        .map(|j| table.taxa[j].as_str())
        .collect();
    if !zero_rows.is_empty() || !zero_cols.is_empty() {
        let mut msg = String::from("zero-total entries must be filtered before fitting;");
        if !zero_rows.is_empty() {
            msg.push_str(&format!(" samples: {}", zero_rows.join(", ")));
        }
        if !zero_cols.is_empty() {
            msg.push_str(&format!(" taxa: {}", zero_cols.join(", ")));
        }
        return Err(Failure::data(msg));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Serialize)]
struct TruthSidecar<'a> {
    scenario: Scenario,
    n: usize,
    p: usize,
    k: usize,
    seed: u64,
    beta0: &'a [f64],
    b: Vec<Vec<f64>>,
    eta: &'a [f64],
    f: Vec<Vec<f64>>,
    z: &'a [Vec<bool>],
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let scenario: Scenario = args
        .scenario
        .parse()
        .map_err(|e| Failure::usage(format!("{e}")))?;
    let config = ScenarioConfig {
        scenario,
        n: args.n,
        p: args.p,
        k: args.k,
        seed: args.seed,
    };
    config
        .validate()
        .map_err(|e| Failure::usage(format!("{e}")))?;
    let dataset = generate(&config).map_err(|e| Failure::usage(format!("{e}")))?;

    fs::create_dir_all(&args.output_dir)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", args.output_dir.display())))?;
    write_file(&args.output_dir.join("counts.csv"), &counts_csv(&dataset))?;

    let truth = TruthSidecar {
        scenario,
        n: args.n,
        p: args.p,
        k: args.k,
        seed: args.seed,
        beta0: &dataset.truth_theta.beta0,
        b: (0..args.p)
            .map(|j| dataset.truth_theta.b.row(j).to_vec())
            .collect(),
        eta: &dataset.truth_theta.eta,
        f: (0..args.n)
            .map(|i| dataset.truth_latent.f.row(i).to_vec())
            .collect(),
        z: &dataset.truth_latent.z,
    };
    let json = serde_json::to_string_pretty(&truth)
        .map_err(|e| Failure::usage(format!("truth sidecar: {e}")))?;
    write_file(&args.output_dir.join("truth.json"), &format!("{json}\n"))?;

    println!(
        "simulate: scenario {scenario}, {} samples x {} taxa, k = {}, seed = {}",
        args.n, args.p, args.k, args.seed
    );
    Ok(())
}

fn counts_csv(dataset: &SimulatedDataset) -> String {
    let (n, p) = (dataset.counts.n(), dataset.counts.p());
    let mut out = String::from("sample");
    for j in 0..p {
        out.push_str(&format!(",taxon_{}", j + 1));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&format!("sample_{}", i + 1));
        for v in dataset.counts.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// bench

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut config: BenchConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("config {}: {e}", args.config.display())))?;
    if let Some(threads) = args.threads {
        config.threads = threads;
    }
    config
        .validate()
        .map_err(|e| Failure::usage(format!("{e}")))?;

    let report = run_benchmark(&config).map_err(|e| Failure::data(format!("{e}")))?;

    fs::create_dir_all(&args.output_dir)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", args.output_dir.display())))?;
    write_file(&args.output_dir.join("rmse_report.csv"), &report.to_csv())?;
    write_file(&args.output_dir.join("rmse_report.txt"), &report.to_table())?;

    print!("{}", report.to_table());
    for cell in &report.cells {
        println!(
            "cell (n={}, p={}, k={}): {:.1}s wall time",
            cell.n, cell.p, cell.k, cell.wall_time_secs
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    if args.points == 0 {
        return Err(Failure::usage("--points must be at least 1"));
    }
    if args.k >= args.p {
        return Err(Failure::usage("k must be below p"));
    }
    let corrupt = match &args.corrupt {
        Some(name) => Some(
            name.parse::<BlockKind>()
                .map_err(|e| Failure::usage(format!("{e}")))?,
        ),
        None => None,
    };
    let report = run_gradient_checks(args.n, args.p, args.k, args.points, 1e-5, args.seed, corrupt)
        .map_err(|e| Failure::usage(format!("{e}")))?;

    let mut failed = Vec::new();
    for (kind, err) in &report {
        let status = if *err < 1e-4 { "ok" } else { "FAIL" };
        println!(
            "block {:<8} max relative error {:>12.3e}   {status}",
            kind.name(),
            err
        );
        if *err >= 1e-4 {
            failed.push(*kind);
        }
    }
    if failed.is_empty() {
        println!(
            "all 7 blocks within 1e-4 over {} points (seed {})",
            args.points, args.seed
        );
        Ok(())
    } else {
        let names: Vec<&str> = failed.iter().map(|k| k.name()).collect();
        Err(Failure::check(format!(
            "gradient check failed for: {} (points {}, seed {})",
            names.join(", "),
            args.points,
            args.seed
        )))
    }
}

// ---------------------------------------------------------------------------
// shared output helpers

fn fmt10(v: f64) -> String {
    format!("{v:.9e}")
}

fn write_file(path: &Path, content: &str) -> Result<(), Failure> {
    fs::write(path, content).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn matrix_csv(corner: &str, col_names: &[String], row_names: &[String], m: &zippca_core::Mat) -> String {
    let mut out = String::from(corner);
    for name in col_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..m.rows() {
        out.push_str(&row_names[i]);
        for v in m.row(i) {
            out.push(',');
            out.push_str(&fmt10(*v));
        }
        out.push('\n');
    }
    out
}

fn factor_csv(label: &str, row_names: &[String], m: &zippca_core::Mat) -> String {
    let mut out = String::from(label);
    for l in 0..m.cols() {
        out.push_str(&format!(",factor_{}", l + 1));
    }
    out.push('\n');
    for i in 0..m.rows() {
        out.push_str(&row_names[i]);
        for v in m.row(i) {
            out.push(',');
            out.push_str(&fmt10(*v));
        }
        out.push('\n');
    }
    out
}

fn vector_csv(label: &str, value_name: &str, row_names: &[String], values: &[f64]) -> String {
    let mut out = format!("{label},{value_name}\n");
    for (name, v) in row_names.iter().zip(values) {
        out.push_str(&format!("{name},{}\n", fmt10(*v)));
    }
    out
}
