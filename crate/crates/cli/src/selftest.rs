//! Built-in oracle comparisons on the smallest loop graphs.

use looprobe::aitchison::{aitchison_distance, aitchison_inner, aitchison_inner_log_ratios, ilr, ilr_inverse};
use looprobe::circuit::build_tree;
use looprobe::experiment::{coupon_bounds, coupon_exact, coupon_exact_uniform};
use looprobe::graph_metric::{
    build_loop_graph, detailed_balance_defect, min_distance, op_norm_inf, perron_vector_direct, principal_submatrix,
    triangle_slack, HittingMethod, LoopOracle, MarkovMetrics,
};
use looprobe::probe::{lipschitz_bound, lipschitz_measure, probe_complexity, probe_complexity_bruteforce, sample_hypothesis, Activation};
use looprobe::rng::task_rng;
use looprobe::stats::fmt_float;
use looprobe::transport::{
    embed_line_heuristic, sandwich_check, snowflake, wasserstein_1d, wasserstein_alpha, DiscreteMeasure, FiniteMetricSpace,
};
use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Flip the sign of the off-diagonal part of the Laplacian.
    LaplacianSign,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub property: &'static str,
    pub height: Option<usize>,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

struct Checks(Vec<Check>);

impl Checks {
    /// Passes when `value <= tolerance`.
    fn at_most(&mut self, name: &'static str, property: &'static str, height: Option<usize>, value: f64, tolerance: f64) {
        self.0.push(Check { name, property, height, value, tolerance, passed: value <= tolerance });
    }

    /// Passes when `value >= tolerance`.
    fn at_least(&mut self, name: &'static str, property: &'static str, height: Option<usize>, value: f64, tolerance: f64) {
        self.0.push(Check { name, property, height, value, tolerance, passed: value >= tolerance });
    }
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

pub fn run(seed: u64, fault: Option<Fault>) -> Result<Vec<Check>, looprobe::Error> {
    let mut out = Checks(Vec::new());
    let nu = 2;
    for h in [1, 2] {
        let topology = build_tree(nu, h)?;
        let g = build_loop_graph(&topology);
        let metrics = MarkovMetrics::compute(&g, HittingMethod::Exact)?;
        let oracle = LoopOracle::new(topology);
        let roles = oracle.roles();
        let n = topology.num_base();
        let phi = &metrics.perron;
        let hh = Some(h);

        out.at_most("perron-closed-form", "stationary law of the loop walk", hh, (phi - oracle.perron()).amax(), 1e-10);
        let direct = perron_vector_direct(&metrics.transition)?;
        out.at_most("perron-direct-solve", "power iteration agrees with a null-space solve", hh, (phi - direct).amax(), 1e-10);
        out.at_most(
            "hitting-symmetry",
            "stationary-weighted hitting mass is symmetric",
            hh,
            detailed_balance_defect(phi, &metrics.hitting.q),
            1e-8,
        );

        let q = &metrics.hitting.q;
        let mut q_dev = 0.0f64;
        let mut e_dev = 0.0f64;
        for i in 1..=n {
            for j in 1..=n {
                if i != j {
                    q_dev = q_dev.max((q[(roles.base(i), roles.base(j))] - oracle.q_base(i, j)).abs());
                    e_dev = e_dev.max((metrics.normalized[(roles.base(i), roles.base(j))] - oracle.e_base(i, j)).abs());
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    q_dev = q_dev.max((q[(roles.tape(i), roles.tape(j))] - oracle.q_tape(i, j)).abs());
                }
            }
        }
        out.at_most("hitting-closed-form", "hitting probabilities along the base row and tape", hh, q_dev, 1e-10);
        out.at_most("normalized-hitting-closed-form", "normalized hitting entries on the base row", hh, e_dev, 1e-10);

        let d = &metrics.metric;
        out.at_least("metric-triangle", "hitting metric satisfies the triangle inequality", hh, triangle_slack(d), -1e-12);
        let gamma = roles.internal();
        if gamma.len() > 1 {
            let d_gamma = principal_submatrix(d, &gamma);
            out.at_least("gamma-separation", "computation nodes are at least log 3 apart", hh, min_distance(&d_gamma), 3f64.ln());
        }

        let p = &metrics.transition;
        out.at_most(
            "transition-norm",
            "transposed transition matrix has norm equal to the arity",
            hh,
            (op_norm_inf(&p.transpose()) - nu as f64).abs(),
            1e-12,
        );

        let mut lap = metrics.laplacian.clone();
        if fault == Some(Fault::LaplacianSign) {
            let diag = DMatrix::from_diagonal(phi);
            lap = &diag * 2.0 - lap;
        }
        let lap_norm = op_norm_inf(&lap);
        out.at_most("laplacian-norm", "Laplacian norm at most (3 + arity)/2", hh, lap_norm, (3.0 + nu as f64) / 2.0 + 1e-12);
        let row_sum = lap.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max);
        out.at_most("laplacian-row-sums", "Laplacian annihilates constants", hh, row_sum, 1e-12);
        out.at_most("laplacian-symmetry", "Laplacian is symmetric", hh, max_abs_diff(&lap, &lap.transpose()), 1e-15);
        let lap_gamma = principal_submatrix(&lap, &gamma);
        out.at_most("laplacian-gamma-norm", "restricted Laplacian norm at most the full norm", hh, op_norm_inf(&lap_gamma) - lap_norm, 1e-12);

        let d_gamma = principal_submatrix(d, &gamma);
        let mut rng = task_rng(seed, &[1, h as u64]);
        let mut worst = f64::NEG_INFINITY;
        for depth in 1..=2 {
            for hops in 1..=2 {
                let mut dims = vec![1];
                dims.extend(std::iter::repeat_n(3, depth - 1));
                dims.push(2);
                let betas = vec![1.0; depth];
                let bound = lipschitz_bound(nu, 3, hops, depth, &betas);
                for _ in 0..25 {
                    let hyp = sample_hypothesis(&dims, &betas, hops, Activation::Relu, &mut rng)?;
                    let x: Vec<f64> = (0..gamma.len()).map(|_| rng.gen_range(0..2) as f64).collect();
                    worst = worst.max(lipschitz_measure(&lap_gamma, &hyp, &x, &d_gamma)? - bound);
                }
            }
        }
        out.at_most("gcn-lipschitz", "GCN Lipschitz constant below its architectural bound", hh, worst, 0.0);

        if gamma.len() > 1 {
            let space = FiniteMetricSpace::new(d_gamma.clone(), None)?;
            let emb = embed_line_heuristic(&snowflake(&space, 0.5)?)?;
            let mut slack = f64::INFINITY;
            for _ in 0..100 {
                let mu = DiscreteMeasure::random(space.len(), &mut rng);
                let nu_m = DiscreteMeasure::random(space.len(), &mut rng);
                match sandwich_check(&space, 0.5, &mu, &nu_m, &emb) {
                    Ok(r) => slack = slack.min(r.lower_slack.min(r.upper_slack)),
                    Err(looprobe::Error::CheckFailed(_)) => slack = f64::NEG_INFINITY,
                    Err(e) => return Err(e),
                }
            }
            out.at_least("transport-sandwich", "line embedding brackets the Hölder transport cost", hh, slack, -1e-8);
        }
    }

    let mut rng = task_rng(seed, &[2]);
    let mut iso = 0.0f64;
    let mut inner = 0.0f64;
    for _ in 0..1000 {
        let p = ilr_inverse(&[rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
        let q = ilr_inverse(&[rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
        let euclid: f64 = ilr(&p).iter().zip(ilr(&q)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let da = aitchison_distance(&p, &q)?;
        iso = iso.max((euclid - da).abs() / da.max(1e-300));
        inner = inner.max((aitchison_inner(&p, &q)? - aitchison_inner_log_ratios(&p, &q)?).abs());
    }
    out.at_most("ilr-isometry", "ilr coordinates are isometric to the Aitchison distance", None, iso, 1e-10);
    out.at_most("aitchison-inner-forms", "log-ratio double sum equals the clr inner product", None, inner, 1e-10);
    out.at_most(
        "probe-complexity",
        "probe diameter matches its closed form",
        None,
        (probe_complexity(0.8, 3) - probe_complexity_bruteforce(0.8, 3)).abs(),
        1e-12,
    );

    let mut line_dev = 0.0f64;
    for _ in 0..50 {
        let k = rng.gen_range(2..=12);
        let mut pts: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        let space = FiniteMetricSpace::line(&pts)?;
        let mu = DiscreteMeasure::random(pts.len(), &mut rng);
        let nu_m = DiscreteMeasure::random(pts.len(), &mut rng);
        let flow = wasserstein_alpha(&mu, &nu_m, &space, 1.0)?;
        let cdf = wasserstein_1d(&pts, mu.weights(), &pts, nu_m.weights())?;
        line_dev = line_dev.max((flow - cdf).abs());
    }
    out.at_most("transport-line", "flow solver matches the CDF formula on the line", None, line_dev, 1e-9);

    let uniform = [1.0 / 3.0; 3];
    let b = coupon_bounds(&uniform, 3);
    let exact = coupon_exact(&uniform, 3)?;
    out.at_most("coupon-exact", "covering probability for 3 points in 3 draws is 2/9", None, (exact - 2.0 / 9.0).abs(), 1e-15);
    out.at_most(
        "coupon-inclusion-exclusion",
        "subset and binomial inclusion-exclusion agree",
        None,
        (exact - coupon_exact_uniform(3, 3)).abs(),
        1e-15,
    );
    let inside = (b.lower - exact).max(exact - b.upper).max(b.sharper - exact);
    out.at_most("coupon-bounds", "covering probability lies between its bounds", None, inside, 1e-12);
    Ok(out.0)
}

pub fn render(checks: &[Check]) -> String {
    let mut out = format!("{:<32} {:>2} {:>24} {:>24}  {:<6} {}\n", "check", "h", "value", "tolerance", "status", "property");
    for c in checks {
        out.push_str(&format!(
            "{:<32} {:>2} {:>24} {:>24}  {:<6} {}\n",
            c.name,
            c.height.map(|h| h.to_string()).unwrap_or_else(|| "-".into()),
            fmt_float(c.value),
            fmt_float(c.tolerance),
            if c.passed { "pass" } else { "FAIL" },
            c.property
        ));
    }
    out
}

pub fn csv(checks: &[Check]) -> String {
    let mut out = String::from("check,height,value,tolerance,passed\n");
    for c in checks {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.name,
            c.height.map(|h| h.to_string()).unwrap_or_default(),
            fmt_float(c.value),
            fmt_float(c.tolerance),
            c.passed
        ));
    }
    out
}
