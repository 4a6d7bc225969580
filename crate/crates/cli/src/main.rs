//! `looprobe`: one binary driving the graph, gap, coupon and selftest runs.

mod output;
mod selftest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use looprobe::circuit::build_tree;
use looprobe::experiment::{
    coupon_csv, coupon_extremal_check, coupon_simulate, run_gap_experiment, CouponConfig, CouponRow, ExtremalReport,
    GapConfig,
};
use looprobe::graph_metric::{
    build_loop_graph, detailed_balance_defect, diameter, min_distance, op_norm_inf, principal_submatrix,
    triangle_slack, HittingMethod, LoopOracle, MarkovMetrics, Provenance,
};
use looprobe::rng::task_rng;
use output::{matrix_csv, matrix_doc, vector_csv, ArtifactWriter, Format};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "looprobe", version, about = "Hitting-probability metrics, probes and generalization-gap experiments")]
struct Cli {
    /// Master seed; overrides any seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "LOOPROBE_OUT", default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Markov metric of the loop digraph of a perfect tree.
    Graph {
        #[arg(long)]
        nu: usize,
        #[arg(long)]
        height: usize,
        /// Also write closed-form predictions and their deviations.
        #[arg(long)]
        oracle: bool,
        /// Estimate hitting probabilities from this many walks per source.
        #[arg(long, value_name = "TRIALS")]
        monte_carlo: Option<usize>,
    },
    /// Generalization gap against the theorem rate over an N grid.
    Gap { config: PathBuf },
    /// Coverage probabilities against their bounds.
    Coupon { config: PathBuf },
    /// Closed-form oracle comparisons on the smallest graphs.
    Selftest {
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<selftest::Fault>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Check(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Check(_) => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Check(m) => write!(f, "check failed: {m}"),
            Self::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

fn config_err(e: looprobe::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("looprobe: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Graph { nu, height, oracle, monte_carlo } => {
            cmd_graph(&cli.out, cli.format, cli.seed.unwrap_or(0), nu, height, oracle, monte_carlo)
        }
        Command::Gap { ref config } => cmd_gap(&cli.out, cli.format, cli.seed, config),
        Command::Coupon { ref config } => cmd_coupon(&cli.out, cli.format, cli.seed, config),
        Command::Selftest { inject_fault } => cmd_selftest(&cli.out, cli.format, cli.seed.unwrap_or(0), inject_fault),
    }
}

#[derive(Serialize)]
struct OracleDeviations {
    perron: f64,
    hitting_base: f64,
    hitting_tape: f64,
    normalized_base: f64,
    diameter: f64,
    predicted_diameter: f64,
}

#[derive(Serialize)]
struct GraphSummary {
    nu: usize,
    height: usize,
    k: usize,
    gamma_size: usize,
    provenance: Provenance,
    monte_carlo_trials: Option<usize>,
    diameter: f64,
    diameter_pair: (String, String),
    min_gamma_distance: f64,
    triangle_slack: f64,
    symmetry_defect: f64,
    transition_transpose_norm: f64,
    laplacian_norm: f64,
    laplacian_gamma_norm: f64,
    oracle: Option<OracleDeviations>,
}

fn oracle_deviations(oracle: &LoopOracle, m: &MarkovMetrics) -> OracleDeviations {
    let roles = oracle.roles();
    let n = roles.topology.num_base();
    let (mut hb, mut ht, mut eb) = (0.0f64, 0.0f64, 0.0f64);
    for i in 1..=n {
        for j in (1..=n).filter(|&j| j != i) {
            hb = hb.max((m.hitting.q[(roles.base(i), roles.base(j))] - oracle.q_base(i, j)).abs());
            eb = eb.max((m.normalized[(roles.base(i), roles.base(j))] - oracle.e_base(i, j)).abs());
        }
    }
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            ht = ht.max((m.hitting.q[(roles.tape(i), roles.tape(j))] - oracle.q_tape(i, j)).abs());
        }
    }
    let predicted = oracle.diameter_candidates().iter().map(|c| -c.0.ln()).fold(f64::NEG_INFINITY, f64::max);
    let measured = diameter(&m.metric).0;
    OracleDeviations {
        perron: (&m.perron - oracle.perron()).amax(),
        hitting_base: hb,
        hitting_tape: ht,
        normalized_base: eb,
        diameter: (measured - predicted).abs(),
        predicted_diameter: predicted,
    }
}

fn cmd_graph(
    out: &Path,
    format: Format,
    seed: u64,
    nu: usize,
    height: usize,
    oracle: bool,
    monte_carlo: Option<usize>,
) -> Result<(), CliError> {
    let topology = build_tree(nu, height).map_err(|e| CliError::Usage(e.to_string()))?;
    let g = build_loop_graph(&topology);
    let method = match monte_carlo {
        Some(0) => return Err(CliError::Usage("--monte-carlo needs a positive trial count".into())),
        Some(trials) => HittingMethod::MonteCarlo { trials, seed },
        None => HittingMethod::Exact,
    };
    let m = MarkovMetrics::compute(&g, method).map_err(|e| CliError::Check(e.to_string()))?;
    let roles = *g.roles().expect("loop graphs carry roles");
    let labels: Vec<String> = (0..g.num_vertices()).map(|v| roles.label(v)).collect();
    let gamma = roles.internal();

    let mut w = ArtifactWriter::new(out)?;
    let matrices = [
        ("P", &m.transition),
        ("Q", &m.hitting.q),
        ("E", &m.normalized),
        ("d", &m.metric),
        ("laplacian", &m.laplacian),
    ];
    let phi: Vec<f64> = m.perron.iter().copied().collect();
    match format {
        Format::Csv => {
            for (name, mat) in matrices {
                w.write(&format!("{name}.csv"), &matrix_csv(&labels, mat))?;
            }
            w.write("phi.csv", &vector_csv(&labels, "phi", &phi))?;
        }
        Format::Json => {
            for (name, mat) in matrices {
                w.write_json(&format!("{name}.json"), &matrix_doc(&labels, mat))?;
            }
            w.write_json("phi.json", &serde_json::json!({ "labels": labels, "phi": phi }))?;
        }
    }

    let (diam, (a, b)) = diameter(&m.metric);
    let lap_gamma = principal_submatrix(&m.laplacian, &gamma);
    let deviations = oracle.then(|| oracle_deviations(&LoopOracle::new(topology), &m));
    if oracle {
        let predicted: Vec<f64> = LoopOracle::new(topology).perron().iter().copied().collect();
        match format {
            Format::Csv => w.write("phi_oracle.csv", &vector_csv(&labels, "phi", &predicted))?,
            Format::Json => w.write_json("phi_oracle.json", &serde_json::json!({ "labels": labels, "phi": predicted }))?,
        }
    }
    let summary = GraphSummary {
        nu,
        height,
        k: g.num_vertices(),
        gamma_size: gamma.len(),
        provenance: m.provenance(),
        monte_carlo_trials: m.hitting.trials,
        diameter: diam,
        diameter_pair: (labels[a].clone(), labels[b].clone()),
        min_gamma_distance: min_distance(&principal_submatrix(&m.metric, &gamma)),
        triangle_slack: triangle_slack(&m.metric),
        symmetry_defect: detailed_balance_defect(&m.perron, &m.hitting.q),
        transition_transpose_norm: op_norm_inf(&m.transition.transpose()),
        laplacian_norm: op_norm_inf(&m.laplacian),
        laplacian_gamma_norm: op_norm_inf(&lap_gamma),
        oracle: deviations,
    };
    w.write_json("summary.json", &summary)?;
    w.finish("graph", None, seed, format)
}

fn cmd_gap(out: &Path, format: Format, seed: Option<u64>, path: &Path) -> Result<(), CliError> {
    let mut config: GapConfig = read_config(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate().map_err(config_err)?;
    for lint in config.lints() {
        eprintln!("looprobe: warning: {lint}");
    }
    let result = run_gap_experiment(&config).map_err(|e| CliError::Check(e.to_string()))?;
    let mut w = ArtifactWriter::new(out)?;
    match format {
        Format::Csv => w.write("gap.csv", &result.to_csv())?,
        Format::Json => w.write_json("gap.json", &result.rows)?,
    }
    w.write_json("summary.json", &result.summary)?;
    let ok = result.invariants_hold();
    w.finish("gap", Some(path), config.seed, format)?;
    if ok {
        Ok(())
    } else {
        Err(CliError::Check("gap invariants violated; see summary.json".into()))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtremalSpec {
    omega: f64,
    n: usize,
    trials: usize,
}

/// A coupon config plus an optional extremal-point section.
#[derive(Debug, Deserialize)]
struct CouponDocument {
    #[serde(flatten)]
    coupon: CouponConfig,
    #[serde(default)]
    extremal: Option<ExtremalSpec>,
}

#[derive(Serialize)]
struct CouponSummary {
    k: usize,
    trials: u64,
    rows: Vec<CouponRow>,
    bounds_respected: bool,
    sharper_respected: bool,
    exact_within_ci: Option<bool>,
    extremal: Option<ExtremalReport>,
}

fn cmd_coupon(out: &Path, format: Format, seed: Option<u64>, path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut doc = split_coupon_document(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        doc.coupon.seed = s;
    }
    doc.coupon.validate().map_err(config_err)?;
    let rows = coupon_simulate(&doc.coupon).map_err(|e| CliError::Check(e.to_string()))?;

    // the estimate may sit outside the bounds only by sampling noise
    let bounds_respected = rows.iter().all(|r| {
        let width = r.ci_hi - r.ci_lo;
        r.estimate >= r.lower - 3.0 * width && r.estimate <= r.upper + 3.0 * width
    });
    let sharper_respected = rows.iter().all(|r| r.sharper <= r.ci_hi);
    let exact_within_ci = rows
        .iter()
        .map(|r| r.exact.map(|e| e >= r.ci_lo && e <= r.ci_hi))
        .collect::<Option<Vec<bool>>>()
        .map(|v| v.iter().all(|&b| b));
    let extremal = match &doc.extremal {
        Some(spec) => {
            let mut rng = task_rng(doc.coupon.seed, &[3]);
            Some(
                coupon_extremal_check(doc.coupon.k, spec.omega, spec.n, spec.trials, &mut rng)
                    .map_err(config_err)?,
            )
        }
        None => None,
    };

    let mut w = ArtifactWriter::new(out)?;
    match format {
        Format::Csv => w.write("coupon.csv", &coupon_csv(&rows))?,
        Format::Json => w.write_json("coupon.json", &rows)?,
    }
    let mut failures = Vec::new();
    if !bounds_respected {
        failures.push("estimate outside [lower, upper]");
    }
    if !sharper_respected {
        failures.push("sharper lower bound above the interval");
    }
    if exact_within_ci == Some(false) {
        failures.push("exact value outside the 99% interval");
    }
    if extremal.as_ref().is_some_and(|r| !r.passed()) {
        failures.push("extremal check found counterexamples");
    }
    let summary = CouponSummary {
        k: doc.coupon.k,
        trials: doc.coupon.trials,
        rows,
        bounds_respected,
        sharper_respected,
        exact_within_ci,
        extremal,
    };
    w.write_json("summary.json", &summary)?;
    w.finish("coupon", Some(path), doc.coupon.seed, format)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(failures.join("; ")))
    }
}

/// serde cannot combine `flatten` with `deny_unknown_fields`, so the
/// extremal section is split off by hand and the rest parsed strictly.
fn split_coupon_document(mut value: serde_json::Value) -> Result<CouponDocument, serde_json::Error> {
    let extremal = match value.as_object_mut().and_then(|o| o.remove("extremal")) {
        Some(v) => Some(serde_json::from_value(v)?),
        None => None,
    };
    Ok(CouponDocument { coupon: serde_json::from_value(value)?, extremal })
}

fn cmd_selftest(out: &Path, format: Format, seed: u64, fault: Option<selftest::Fault>) -> Result<(), CliError> {
    let checks = selftest::run(seed, fault).map_err(|e| CliError::Check(e.to_string()))?;
    print!("{}", selftest::render(&checks));
    // files only when an output directory was asked for
    if std::env::args_os().any(|a| a == "--out" || a.to_string_lossy().starts_with("--out="))
        || std::env::var_os("LOOPROBE_OUT").is_some()
    {
        let mut w = ArtifactWriter::new(out)?;
        match format {
            Format::Csv => w.write("selftest.csv", &selftest::csv(&checks))?,
            Format::Json => w.write_json("selftest.json", &checks)?,
        }
        w.finish("selftest", None, seed, format)?;
    }
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| match c.height {
            Some(h) => format!("{} (h={h})", c.name),
            None => c.name.to_string(),
        })
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(())
    } else {
        Err(CliError::Check(format!("failing checks: {}", failed.join(", "))))
    }
}
