//! `fmest` — command-line front end for the finite-memory estimation
//! toolkit.
//!
//! Subcommands:
//!
//! - `build` — construct the `K`-class deterministic estimator and write
//!   its machine file (JSON document format).
//! - `analyze` — exact steady-state risk of a machine file over a bias
//!   grid or an explicit bias list, with per-bias structure checks.
//! - `simulate` — seeded Monte Carlo run of a machine on a Bernoulli
//!   stream.
//! - `compare` — worst-case normalized constants of the deterministic
//!   construction versus the randomized baseline at matched state count.
//! - `sweep` — cartesian sweep over class counts and biases, with a trend
//!   check on the normalized constants.
//!
//! Every run prints a structured-text summary (`key = value` lines) to
//! stdout and, with `--out`, writes a data table either as append-safe CSV
//! plus a sidecar summary document, or as a single structured-text
//! document (`--format structured-text`).  Floating-point values in all
//! artifacts carry 17 significant digits so they round-trip exactly.
//!
//! Exit status: `0` when the run succeeds and every check it performs
//! passes, `1` on runtime failures or failed checks, `2` on command-line
//! usage errors.  `FMEST_THREADS` caps the worker pool used for grid
//! sweeps.

use std::fmt::Display;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use fmest::baselines;
use fmest::chain_analysis::{
    self, endpoint_orbit_risk, exact_risk, lemma1_pi, lemma3_check, lemma4_check,
    sampled_analysis, stationary_distribution, worst_case_risk, GridSpec,
};
use fmest::estimator_build::{build_estimator, state_budget, ComposedLayout};
use fmest::machine_core::{transition_matrix, Machine, MachineDocument};
use fmest::montecarlo::{simulate, SimConfig};

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "fmest",
    version,
    about = "Deterministic finite-memory estimation of a Bernoulli bias: \
             build estimator machines, analyze their exact risk, simulate \
             them, and compare against the randomized baseline."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the K-class deterministic estimator and write its machine file.
    Build(BuildArgs),
    /// Exact steady-state risk and structure checks of a machine file.
    Analyze(AnalyzeArgs),
    /// Seeded Monte Carlo simulation of a machine on a Bernoulli stream.
    Simulate(SimulateArgs),
    /// Worst-case constants: deterministic construction vs randomized baseline.
    Compare(CompareArgs),
    /// Cartesian sweep over class counts and biases with a trend check.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// Number of estimate classes (at least 2).
    #[arg(long = "K", value_parser = parse_k)]
    k: usize,
    /// Per-class accuracy parameter, strictly between 0 and 1/2.
    #[arg(long, value_parser = parse_epsilon, default_value = "0.01")]
    epsilon: f64,
    /// Destination machine file (JSON).
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Machine file to analyze.
    machine: PathBuf,
    /// Analyze exactly these biases instead of a grid (repeatable).
    /// The endpoints 0 and 1 are evaluated on the deterministic orbit.
    #[arg(long, value_parser = parse_theta)]
    theta: Vec<f64>,
    /// Uniform grid step overriding the default 1/(8(K+2)).
    #[arg(long, value_parser = parse_grid_step, conflicts_with = "theta")]
    grid_step: Option<f64>,
    /// Destination for the per-bias table.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Layout of the --out artifact.
    #[arg(long, value_enum, default_value = "csv")]
    format: OutputFormat,
}

#[derive(Args)]
struct SimulateArgs {
    /// Machine file to simulate.
    machine: PathBuf,
    /// Bias of the Bernoulli input stream, strictly between 0 and 1.
    #[arg(long, value_parser = parse_theta_interior)]
    theta: f64,
    /// Total driven steps, including burn-in.
    #[arg(long, value_parser = parse_steps)]
    steps: u64,
    /// Steps discarded before recording starts (default: 10 per machine
    /// state, capped at half the total).
    #[arg(long)]
    burn_in: Option<u64>,
    /// RNG seed; identical seeds reproduce byte-identical artifacts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination for the run row.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Layout of the --out artifact.
    #[arg(long, value_enum, default_value = "csv")]
    format: OutputFormat,
}

#[derive(Args)]
struct CompareArgs {
    /// Number of estimate classes (at least 2).
    #[arg(long = "K", value_parser = parse_k)]
    k: usize,
    /// Per-class accuracy parameter, strictly between 0 and 1/2.
    #[arg(long, value_parser = parse_epsilon, default_value = "0.01")]
    epsilon: f64,
    /// Grant the baseline the nominal state count ΣN_k instead of the
    /// machine's physical state count.
    #[arg(long)]
    s_equalized: bool,
    /// Destination for the comparison table.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Layout of the --out artifact.
    #[arg(long, value_enum, default_value = "csv")]
    format: OutputFormat,
}

#[derive(Args)]
struct SweepArgs {
    /// Class counts to sweep (repeatable; sorted and deduplicated).
    #[arg(long = "K", value_parser = parse_k, default_values_t = [4usize, 6, 8, 10])]
    k: Vec<usize>,
    /// Per-class accuracy parameter, strictly between 0 and 1/2.
    #[arg(long, value_parser = parse_epsilon, default_value = "0.01")]
    epsilon: f64,
    /// Evaluate exactly these interior biases for every K instead of each
    /// K's default grid (repeatable).
    #[arg(long, value_parser = parse_theta_interior)]
    theta: Vec<f64>,
    /// Uniform grid step overriding each K's default 1/(8(K+2)).
    #[arg(long, value_parser = parse_grid_step, conflicts_with = "theta")]
    grid_step: Option<f64>,
    /// Destination for the sweep table.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Layout of the --out artifact.
    #[arg(long, value_enum, default_value = "csv")]
    format: OutputFormat,
}

/// Layout of the `--out` artifact.
#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    /// Append-safe CSV table plus a sidecar `<out>.summary.txt` document.
    Csv,
    /// One `key = value` document holding the summary and the table rows.
    StructuredText,
}

fn parse_k(raw: &str) -> Result<usize, String> {
    let k: usize = raw
        .parse()
        .map_err(|_| format!("`{raw}` is not an unsigned integer"))?;
    if k < 2 {
        return Err(format!("needs at least 2 classes (got {k})"));
    }
    Ok(k)
}

fn parse_epsilon(raw: &str) -> Result<f64, String> {
    let epsilon: f64 = raw.parse().map_err(|_| format!("`{raw}` is not a number"))?;
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(format!(
            "must lie strictly between 0 and 0.5 (got {epsilon})"
        ));
    }
    Ok(epsilon)
}

fn parse_theta(raw: &str) -> Result<f64, String> {
    let theta: f64 = raw.parse().map_err(|_| format!("`{raw}` is not a number"))?;
    if !(0.0..=1.0).contains(&theta) {
        return Err(format!("must lie in [0, 1] (got {theta})"));
    }
    Ok(theta)
}

fn parse_theta_interior(raw: &str) -> Result<f64, String> {
    let theta = parse_theta(raw)?;
    if theta == 0.0 || theta == 1.0 {
        return Err(format!(
            "must lie strictly between 0 and 1 (got {theta})"
        ));
    }
    Ok(theta)
}

fn parse_grid_step(raw: &str) -> Result<f64, String> {
    let step: f64 = raw.parse().map_err(|_| format!("`{raw}` is not a number"))?;
    if !(step > 0.0 && step < 1.0) {
        return Err(format!(
            "must lie strictly between 0 and 1 (got {step})"
        ));
    }
    Ok(step)
}

fn parse_steps(raw: &str) -> Result<u64, String> {
    let steps: u64 = raw
        .parse()
        .map_err(|_| format!("`{raw}` is not an unsigned integer"))?;
    if steps == 0 {
        return Err("needs at least one step".into());
    }
    Ok(steps)
}

/// Reports an error in a flag *combination* through the usage machinery,
/// so it carries the same exit status (2) as a single-flag violation.
fn usage_error(message: String) -> ! {
    Cli::command()
        .error(clap::error::ErrorKind::ValueValidation, message)
        .exit()
}

// ---------------------------------------------------------------------------
// Run summaries and artifacts
// ---------------------------------------------------------------------------

/// Fully resolved parameters of one invocation, echoed at the top of every
/// summary so a run is reproducible from its own artifact.
struct ExperimentConfig {
    command: &'static str,
    entries: Vec<(String, String)>,
}

impl ExperimentConfig {
    fn new(command: &'static str) -> ExperimentConfig {
        ExperimentConfig {
            command,
            entries: Vec::new(),
        }
    }

    fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn push_f64(&mut self, key: &str, value: f64) {
        self.push(key, format_args!("{value:.16e}"));
    }

    fn push_out(&mut self, out: Option<&Path>, format: OutputFormat) {
        match out {
            Some(path) => self.push("out", path.display()),
            None => self.push("out", "(none)"),
        }
        self.push(
            "format",
            match format {
                OutputFormat::Csv => "csv",
                OutputFormat::StructuredText => "structured-text",
            },
        );
    }
}

/// Accumulates the structured-text summary and the overall check verdict
/// that decides the exit status.
struct Report {
    text: String,
    all_pass: bool,
}

impl Report {
    fn new(config: &ExperimentConfig) -> Report {
        let mut text = String::new();
        let _ = writeln!(text, "command = {}", config.command);
        for (key, value) in &config.entries {
            let _ = writeln!(text, "config.{key} = {value}");
        }
        Report {
            text,
            all_pass: true,
        }
    }

    fn kv(&mut self, key: impl Display, value: impl Display) {
        let _ = writeln!(self.text, "{key} = {value}");
    }

    fn kv_f64(&mut self, key: impl Display, value: f64) {
        self.kv(key, format_args!("{value:.16e}"));
    }

    /// Records one named check; any failed check flips the exit status.
    fn check(&mut self, name: impl Display, pass: bool) {
        self.all_pass &= pass;
        self.kv(
            format_args!("check.{name}"),
            if pass { "pass" } else { "fail" },
        );
    }

    /// Appends the overall verdict and returns the finished document and
    /// whether every check passed.
    fn finish(mut self) -> (String, bool) {
        let verdict = if self.all_pass { "pass" } else { "fail" };
        let _ = writeln!(self.text, "overall = {verdict}");
        (self.text, self.all_pass)
    }
}

/// Appends CSV rows to `path`, writing the header first only when the file
/// is new or empty, so successive runs accumulate rows under one header.
fn append_csv(path: &Path, header: &str, rows: &str) -> Result<()> {
    use std::io::Write as _;
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {} for append", path.display()))?;
    if fresh {
        writeln!(file, "{header}").with_context(|| format!("writing {}", path.display()))?;
    }
    file.write_all(rows.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// The sidecar summary path of a CSV artifact: `<out>.summary.txt`.
fn summary_sibling(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".summary.txt");
    PathBuf::from(name)
}

/// Writes the run artifacts.  CSV format: the table is appended to `out`
/// and the summary overwrites the sidecar document.  Structured-text
/// format: one document at `out` holding the summary followed by the rows.
fn write_artifacts(
    out: Option<&Path>,
    format: OutputFormat,
    header: &str,
    rows: &str,
    summary: &str,
) -> Result<()> {
    let Some(out) = out else {
        return Ok(());
    };
    match format {
        OutputFormat::Csv => {
            append_csv(out, header, rows)?;
            let sidecar = summary_sibling(out);
            fs::write(&sidecar, summary)
                .with_context(|| format!("writing {}", sidecar.display()))?;
        }
        OutputFormat::StructuredText => {
            let mut doc = String::from(summary);
            let _ = writeln!(doc, "table.columns = {header}");
            for line in rows.lines() {
                let _ = writeln!(doc, "table.row = {line}");
            }
            fs::write(out, doc).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared analysis plumbing
// ---------------------------------------------------------------------------

/// Pass/fail/not-applicable verdict of one per-bias check.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Flag {
    Pass,
    Fail,
    Na,
}

impl Flag {
    fn of(pass: bool) -> Flag {
        if pass {
            Flag::Pass
        } else {
            Flag::Fail
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Flag::Pass => "pass",
            Flag::Fail => "fail",
            Flag::Na => "na",
        }
    }
}

/// One evaluated bias: exact risk plus the three per-bias structure flags
/// (not-applicable on endpoints and on machines without class metadata).
struct ThetaRow {
    theta: f64,
    risk: f64,
    lemma1: Flag,
    lemma3: Flag,
    lemma4: Flag,
}

/// Reads and parses a machine document, attaching the file name to any
/// failure.
fn load_document(path: &Path) -> Result<MachineDocument> {
    let bytes =
        fs::read(path).with_context(|| format!("reading machine file {}", path.display()))?;
    MachineDocument::from_json_bytes(&bytes)
        .with_context(|| format!("parsing machine file {}", path.display()))
}

/// Exact risk of an arbitrary machine at an interior bias: the stationary
/// law of the induced chain weighted by the squared estimate error.
fn plain_risk(machine: &Machine, theta: f64) -> Result<f64> {
    let tm = transition_matrix(machine, theta)?;
    let pi = stationary_distribution(&tm)?;
    let mut total = 0.0;
    for (i, &mass) in pi.iter().enumerate() {
        let err = machine.estimate(i + 1)? - theta;
        total += mass * err * err;
    }
    Ok(total)
}

/// Evaluates one bias of a composed machine: exact risk from the full
/// stationary solve, and the three structure flags — the renewal
/// decomposition identity (lemma1), the sampled-chain geometric envelope
/// at the bracketing class (lemma3), and holding-time dominance (lemma4).
fn composed_row(
    machine: &Machine,
    layout: &ComposedLayout,
    theta: f64,
) -> Result<ThetaRow> {
    if theta == 0.0 || theta == 1.0 {
        let risk = endpoint_orbit_risk(machine, theta)?;
        return Ok(ThetaRow {
            theta,
            risk,
            lemma1: Flag::Na,
            lemma3: Flag::Na,
            lemma4: Flag::Na,
        });
    }
    let tm = transition_matrix(machine, theta)?;
    let pi = stationary_distribution(&tm)?;
    let pi_class = chain_analysis::class_aggregate(&pi, layout);
    let risk = pi_class
        .iter()
        .zip(layout.estimates())
        .map(|(&mass, &est)| mass * (est - theta) * (est - theta))
        .sum();

    let sa = sampled_analysis(layout, theta)?;
    let predicted = lemma1_pi(&sa.mu, &sa.holding);
    let l1: f64 = pi_class
        .iter()
        .zip(&predicted)
        .map(|(a, b)| (a - b).abs())
        .sum();
    let lemma1 = Flag::of(l1 <= 1e-8);

    let k = layout.k();
    let epsilon = layout.epsilon();
    let spacing = (k + 2) as f64;
    let bracket = (theta * spacing + 1e-9).floor() as usize;
    let lemma3 = if (1..=k).contains(&bracket) {
        match lemma3_check(&sa, bracket, epsilon) {
            Ok(pass) => Flag::of(pass),
            Err(_) => Flag::Fail,
        }
    } else {
        Flag::Na
    };
    let lemma4 = Flag::of(lemma4_check(&sa, epsilon));

    Ok(ThetaRow {
        theta,
        risk,
        lemma1,
        lemma3,
        lemma4,
    })
}

/// Evaluates one bias of a machine without class metadata: risk only.
fn plain_row(machine: &Machine, theta: f64) -> Result<ThetaRow> {
    let risk = if theta == 0.0 || theta == 1.0 {
        endpoint_orbit_risk(machine, theta)?
    } else {
        plain_risk(machine, theta)?
    };
    Ok(ThetaRow {
        theta,
        risk,
        lemma1: Flag::Na,
        lemma3: Flag::Na,
        lemma4: Flag::Na,
    })
}

/// Aggregates one lemma column over all rows: reports the number of
/// applicable rows and failures, and records the check (which passes when
/// no applicable row failed).
fn aggregate_flag(report: &mut Report, name: &str, flags: &[Flag]) {
    let applicable = flags.iter().filter(|&&f| f != Flag::Na).count();
    let failures = flags.iter().filter(|&&f| f == Flag::Fail).count();
    report.kv(format_args!("{name}.applicable_rows"), applicable);
    report.kv(format_args!("{name}.failed_rows"), failures);
    report.check(name, failures == 0);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

const ANALYZE_HEADER: &str = "theta,risk,risk_times_S,lemma1,lemma3,lemma4";
const SIMULATE_HEADER: &str = "theta,steps,burn_in,seed,steps_used,empirical_risk,standard_error";
const COMPARE_HEADER: &str = "machine,S,worst_risk,normalized";
const SWEEP_HEADER: &str = "K,epsilon,sum_Nk,theta,risk,risk_times_S";

fn run_build(args: &BuildArgs) -> Result<bool> {
    let mut config = ExperimentConfig::new("build");
    config.push("K", args.k);
    config.push_f64("epsilon", args.epsilon);
    config.push("out", args.out.display());
    let mut report = Report::new(&config);

    let (machine, layout) = build_estimator(args.k, args.epsilon)?;
    let budget = state_budget(args.k, args.epsilon)?;
    let doc = layout.to_document(&machine);
    fs::write(&args.out, doc.to_json_bytes())
        .with_context(|| format!("writing {}", args.out.display()))?;

    report.kv("machine.num_states", machine.num_states());
    report.kv("machine.sum_Nk", budget.sum_nk);
    report.kv_f64("budget.bound", budget.bound);
    for (class, mp) in layout.mini_params().iter().enumerate() {
        report.kv(format_args!("class.{}.N", class + 1), mp.n);
        report.kv(format_args!("class.{}.s", class + 1), mp.s);
    }
    let diag = machine.validate();
    report.check("structural", diag.structural_ok);
    report.check("strongly_connected", diag.strongly_connected);
    report.check("reachable_from_initial", diag.reachable_from_initial);
    report.check("state_budget", budget.within_bound);

    let (summary, all_pass) = report.finish();
    let sidecar = summary_sibling(&args.out);
    fs::write(&sidecar, &summary).with_context(|| format!("writing {}", sidecar.display()))?;
    print!("{summary}");
    Ok(all_pass)
}

fn run_analyze(args: &AnalyzeArgs) -> Result<bool> {
    let doc = load_document(&args.machine)?;
    let machine = &doc.machine;

    let mut config = ExperimentConfig::new("analyze");
    config.push("machine", args.machine.display());
    let layout = match ComposedLayout::from_document(&doc) {
        Ok(layout) => Some(layout),
        Err(_) if doc.metadata.is_none() => None,
        Err(e) => return Err(e).context("machine file carries inconsistent metadata"),
    };

    // The bias list: either the explicit --theta values in the given
    // order, or the machine's default grid (class points included only
    // when the machine carries classes).
    let thetas = if args.theta.is_empty() {
        let k = layout.as_ref().map_or(0, |l| l.k());
        let mut spec = match &layout {
            Some(l) => GridSpec::default_for(l.k()),
            None => GridSpec {
                lo: 1e-3,
                hi: 1.0 - 1e-3,
                step: 1.0 / 64.0,
                class_points: false,
            },
        };
        if let Some(step) = args.grid_step {
            spec.step = step;
        }
        config.push_f64("grid.lo", spec.lo);
        config.push_f64("grid.hi", spec.hi);
        config.push_f64("grid.step", spec.step);
        config.push("grid.class_points", spec.class_points);
        spec.points(k)
    } else {
        let rendered: Vec<String> = args.theta.iter().map(|t| format!("{t:.16e}")).collect();
        config.push("theta", rendered.join(","));
        args.theta.clone()
    };
    config.push_out(args.out.as_deref(), args.format);

    let mut report = Report::new(&config);
    report.kv("machine.num_states", machine.num_states());
    report.kv("machine.composed", layout.is_some());
    if let Some(l) = &layout {
        report.kv("machine.K", l.k());
        report.kv_f64("machine.epsilon", l.epsilon());
    }

    let diag = machine.validate();
    report.check("structural", diag.structural_ok);
    report.check("strongly_connected", diag.strongly_connected);
    report.check("reachable_from_initial", diag.reachable_from_initial);

    let rows: Vec<ThetaRow> = thetas
        .par_iter()
        .map(|&theta| match &layout {
            Some(l) => composed_row(machine, l, theta),
            None => plain_row(machine, theta),
        })
        .collect::<Result<_>>()?;

    // The normalized constant refers to the nominal state count ΣN_k when
    // the machine declares one, and to the physical count otherwise.
    let scale = match &layout {
        Some(l) => {
            let sum_nk: usize = l.mini_params().iter().map(|mp| mp.n).sum();
            report.kv("machine.sum_Nk", sum_nk);
            sum_nk
        }
        None => machine.num_states(),
    } as f64;

    let mut csv = String::new();
    for row in &rows {
        let _ = writeln!(
            csv,
            "{:.16e},{:.16e},{:.16e},{},{},{}",
            row.theta,
            row.risk,
            row.risk * scale,
            row.lemma1.as_str(),
            row.lemma3.as_str(),
            row.lemma4.as_str()
        );
    }

    report.kv("grid.points", rows.len());
    if let Some(worst) = rows
        .iter()
        .max_by(|a, b| a.risk.partial_cmp(&b.risk).expect("risks are finite"))
    {
        report.kv_f64("worst.theta", worst.theta);
        report.kv_f64("worst.risk", worst.risk);
        report.kv_f64("worst.normalized", worst.risk * scale);
        if layout.is_some() {
            report.check("bound600", worst.risk * scale <= 600.0);
        }
    }
    if layout.is_some() {
        let column = |f: fn(&ThetaRow) -> Flag| rows.iter().map(f).collect::<Vec<_>>();
        aggregate_flag(&mut report, "lemma1", &column(|r| r.lemma1));
        aggregate_flag(&mut report, "lemma3", &column(|r| r.lemma3));
        aggregate_flag(&mut report, "lemma4", &column(|r| r.lemma4));
    }

    let (summary, all_pass) = report.finish();
    write_artifacts(args.out.as_deref(), args.format, ANALYZE_HEADER, &csv, &summary)?;
    print!("{summary}");
    Ok(all_pass)
}

fn run_simulate(args: &SimulateArgs) -> Result<bool> {
    let doc = load_document(&args.machine)?;

    let mut cfg = SimConfig::new(&doc.machine, args.theta, args.steps, args.seed);
    if let Some(burn_in) = args.burn_in {
        if burn_in >= args.steps {
            usage_error(format!(
                "--burn-in ({burn_in}) must leave at least one recorded step \
                 below --steps ({})",
                args.steps
            ));
        }
        cfg.burn_in = burn_in;
    }
    if let Some(class_map) = &doc.class_map {
        cfg = cfg.with_class_map(class_map);
    }

    let mut config = ExperimentConfig::new("simulate");
    config.push("machine", args.machine.display());
    config.push_f64("theta", args.theta);
    config.push("steps", args.steps);
    config.push("burn_in", cfg.burn_in);
    config.push("seed", args.seed);
    config.push_out(args.out.as_deref(), args.format);
    let mut report = Report::new(&config);

    let result = simulate(&cfg)?;
    report.kv("machine.num_states", doc.machine.num_states());
    report.kv("sim.steps_used", result.steps_used);
    report.kv_f64("sim.empirical_risk", result.empirical_risk);
    report.kv_f64("sim.standard_error", result.standard_error);
    for (idx, occupancy) in result.class_occupancy.iter().enumerate() {
        report.kv_f64(format_args!("class.{}.occupancy", idx + 1), *occupancy);
    }
    for (idx, mean) in result.holding_time_means.iter().enumerate() {
        match mean {
            Some(m) => report.kv_f64(format_args!("class.{}.holding_mean", idx + 1), *m),
            None => report.kv(format_args!("class.{}.holding_mean", idx + 1), "na"),
        }
    }

    let csv = format!(
        "{:.16e},{},{},{},{},{:.16e},{:.16e}\n",
        args.theta,
        args.steps,
        cfg.burn_in,
        args.seed,
        result.steps_used,
        result.empirical_risk,
        result.standard_error
    );

    let (summary, all_pass) = report.finish();
    write_artifacts(args.out.as_deref(), args.format, SIMULATE_HEADER, &csv, &summary)?;
    print!("{summary}");
    Ok(all_pass)
}

fn run_compare(args: &CompareArgs) -> Result<bool> {
    let mut config = ExperimentConfig::new("compare");
    config.push("K", args.k);
    config.push_f64("epsilon", args.epsilon);
    config.push("s_equalized", args.s_equalized);
    config.push_out(args.out.as_deref(), args.format);
    let mut report = Report::new(&config);

    let (machine, layout) = build_estimator(args.k, args.epsilon)?;
    let spec = GridSpec::default_for(layout.k());
    let det = worst_case_risk(&machine, &layout, &spec)?;

    // The baseline gets the same hardware: the machine's physical state
    // count by default, or the nominal ΣN_k with --s-equalized (the count
    // the deterministic constant itself is normalized by).
    let baseline_s = if args.s_equalized {
        det.sum_nk
    } else {
        det.s_physical
    };
    // The baseline's exact risk θ(1−θ)/(S−1) peaks at θ = 1/2.
    let baseline_worst = baselines::samaniego_exact_risk(baseline_s, 0.5)?;
    let baseline_normalized = baseline_worst * baseline_s as f64;
    let ratio = det.normalized / baseline_normalized;

    report.kv("deterministic.S", det.sum_nk);
    report.kv_f64("deterministic.worst_risk", det.worst);
    report.kv_f64("deterministic.normalized", det.normalized);
    report.kv("baseline.S", baseline_s);
    report.kv_f64("baseline.worst_risk", baseline_worst);
    report.kv_f64("baseline.normalized", baseline_normalized);
    report.kv_f64("ratio", ratio);
    report.check("bound600", det.normalized <= 600.0);
    report.check("ratio_finite_positive", ratio.is_finite() && ratio > 0.0);

    let csv = format!(
        "deterministic,{},{:.16e},{:.16e}\nrandomized,{},{:.16e},{:.16e}\n",
        det.sum_nk, det.worst, det.normalized, baseline_s, baseline_worst, baseline_normalized
    );

    let (summary, all_pass) = report.finish();
    write_artifacts(args.out.as_deref(), args.format, COMPARE_HEADER, &csv, &summary)?;
    print!("{summary}");
    Ok(all_pass)
}

fn run_sweep(args: &SweepArgs) -> Result<bool> {
    let mut ks = args.k.clone();
    ks.sort_unstable();
    ks.dedup();

    let mut config = ExperimentConfig::new("sweep");
    let rendered: Vec<String> = ks.iter().map(|k| k.to_string()).collect();
    config.push("K", rendered.join(","));
    config.push_f64("epsilon", args.epsilon);
    if !args.theta.is_empty() {
        let rendered: Vec<String> = args.theta.iter().map(|t| format!("{t:.16e}")).collect();
        config.push("theta", rendered.join(","));
    } else if let Some(step) = args.grid_step {
        config.push_f64("grid_step", step);
    } else {
        config.push("grid", "default per K");
    }
    config.push_out(args.out.as_deref(), args.format);
    let mut report = Report::new(&config);

    let mut csv = String::new();
    let mut constants: Vec<(usize, f64)> = Vec::new();
    for &k in &ks {
        let (machine, layout) = build_estimator(k, args.epsilon)?;
        let thetas = if args.theta.is_empty() {
            let mut spec = GridSpec::default_for(k);
            if let Some(step) = args.grid_step {
                spec.step = step;
            }
            spec.points(k)
        } else {
            args.theta.clone()
        };
        let risks: Vec<f64> = thetas
            .par_iter()
            .map(|&theta| exact_risk(&machine, &layout, theta))
            .collect::<Result<_, _>>()?;
        let sum_nk: usize = layout.mini_params().iter().map(|mp| mp.n).sum();
        let scale = sum_nk as f64;
        for (theta, risk) in thetas.iter().zip(&risks) {
            let _ = writeln!(
                csv,
                "{},{:.16e},{},{:.16e},{:.16e},{:.16e}",
                k,
                args.epsilon,
                sum_nk,
                theta,
                risk,
                risk * scale
            );
        }
        let worst = risks.iter().cloned().fold(0.0f64, f64::max);
        let normalized = worst * scale;
        report.kv(format_args!("K.{k}.sum_Nk"), sum_nk);
        report.kv_f64(format_args!("K.{k}.worst_risk"), worst);
        report.kv_f64(format_args!("K.{k}.normalized"), normalized);
        report.check(format_args!("K.{k}.bound600"), normalized <= 600.0);
        constants.push((k, normalized));
    }

    // Trend of the normalized constants as K grows: each must stay within
    // 20% of the best (smallest) constant seen so far.
    if constants.len() > 1 {
        let mut envelope = f64::INFINITY;
        let mut trend_ok = true;
        for &(_, c) in &constants {
            if c > 1.2 * envelope {
                trend_ok = false;
            }
            envelope = envelope.min(c);
        }
        report.check("trend_envelope", trend_ok);
    }

    let (summary, all_pass) = report.finish();
    write_artifacts(args.out.as_deref(), args.format, SWEEP_HEADER, &csv, &summary)?;
    print!("{summary}");
    Ok(all_pass)
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Applies the `FMEST_THREADS` cap to the global worker pool.
fn configure_threads() -> Result<()> {
    match std::env::var("FMEST_THREADS") {
        Ok(raw) => {
            let threads: usize = raw
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .with_context(|| {
                    format!("FMEST_THREADS must be a positive integer (got `{raw}`)")
                })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .context("initializing the worker pool")?;
            Ok(())
        }
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(e).context("reading FMEST_THREADS"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let outcome = match &cli.command {
        Command::Build(args) => run_build(args),
        Command::Analyze(args) => run_analyze(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Compare(args) => run_compare(args),
        Command::Sweep(args) => run_sweep(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
