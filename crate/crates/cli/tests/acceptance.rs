//! Acceptance gate: one line per criterion, pass or fail, with the pinned
//! tolerance in the message. Run with `-- --nocapture --test-threads 1` to
//! see the lines in order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use looprobe::aitchison::{aitchison_distance, aitchison_inner, aitchison_inner_log_ratios, ilr, ilr_inverse};
use looprobe::circuit::{build_tree, default_gate_set, GatePreset, TreeTopology};
use looprobe::experiment::{
    coupon_extremal_check, coupon_simulate, risk_wasserstein_check, run_gap_experiment, CouponConfig, GapConfig,
    GapContext,
};
use looprobe::graph_metric::{
    build_loop_graph, detailed_balance_defect, min_distance, op_norm_inf, principal_submatrix, triangle_slack,
    HittingMethod, MarkovMetrics,
};
use looprobe::probe::{lipschitz_bound, lipschitz_measure, sample_hypothesis, Activation};
use looprobe::transport::{
    embed_line_heuristic, sandwich_check, snowflake, wasserstein_1d, wasserstein_alpha, DiscreteMeasure,
    FiniteMetricSpace,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXACT: f64 = 1e-10;
const SYMMETRY: f64 = 1e-8;
const TRIANGLE: f64 = 1e-12;
const FLOW_VS_CDF: f64 = 1e-9;
const SANDWICH: f64 = 1e-8;
const RISK_BOUND: f64 = 1e-12;
const SLOPE_RANGE: (f64, f64) = (-0.65, -0.35);

fn report(n: usize, name: &str, passed: bool, detail: String) {
    println!("criterion {n:>2} [{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "criterion {n} ({name}) failed: {detail}");
}

fn metrics(nu: usize, h: usize) -> (TreeTopology, MarkovMetrics) {
    let t = build_tree(nu, h).unwrap();
    let m = MarkovMetrics::compute(&build_loop_graph(&t), HittingMethod::Exact).unwrap();
    (t, m)
}

fn gamma(t: &TreeTopology) -> Vec<usize> {
    t.internal_nodes().collect()
}

/// Stationary vector from the layer recursions: root mass `1/(3 − 2^{1−n} + h)`,
/// halving along the base row and the tape, and every internal node
/// carrying the sum of its children.
fn perron_by_recursion(t: &TreeTopology) -> DVector<f64> {
    let n = t.num_base();
    let nodes = t.num_nodes();
    let root = 1.0 / (3.0 - 2f64.powi(1 - n as i32) + t.height() as f64);
    let mut phi = DVector::zeros(nodes + n);
    for i in 1..=n {
        phi[i - 1] = root / 2f64.powi(i.min(n - 1) as i32);
    }
    phi[nodes] = root;
    for i in 1..n {
        phi[nodes + i] = root / 2f64.powi(i as i32);
    }
    for v in t.internal_nodes() {
        phi[v] = t.children(v).map(|c| phi[c]).sum();
    }
    phi
}

#[test]
fn criterion_01_perron_closed_form() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for nu in [2, 3] {
        for h in [1, 2, 3] {
            let (t, m) = metrics(nu, h);
            worst = worst.max((&m.perron - perron_by_recursion(&t)).amax());
        }
    }
    let r1 = metrics(2, 1).1.perron[build_tree(2, 1).unwrap().root()];
    let r2 = metrics(2, 2).1.perron[build_tree(2, 2).unwrap().root()];
    let spot = (r1 - 2.0 / 7.0).abs().max((r2 - 8.0 / 39.0).abs());
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "stationary vector matches the layer recursions",
        worst <= EXACT && spot <= EXACT && secs < 5.0,
        format!("max dev {worst:.3e}, root spot dev {spot:.3e} (tol {EXACT:e}), {secs:.2}s (< 5s)"),
    );
}

#[test]
fn criterion_02_hitting_symmetry() {
    let worst = (1..=3).map(|h| {
        let (_, m) = metrics(2, h);
        detailed_balance_defect(&m.perron, &m.hitting.q)
    });
    let worst = worst.fold(0.0, f64::max);
    report(2, "weighted hitting mass is symmetric", worst <= SYMMETRY, format!("max defect {worst:.3e} (tol {SYMMETRY:e})"));
}

#[test]
fn criterion_03_hitting_closed_form_as_stated() {
    let (t, m) = metrics(2, 2);
    let n = t.num_base();
    let mut worst = 0.0f64;
    let mut at = (0, 0);
    for i in 1..=n {
        for j in (1..=n).filter(|&j| j != i) {
            let dev = (m.hitting.q[(i - 1, j - 1)] - 0.5f64.powi(j as i32)).abs();
            if dev > worst {
                worst = dev;
                at = (i, j);
            }
        }
    }
    let e34 = m.normalized[(2, 3)];
    let e_dev = (e34 - 1.0 / 312.0).abs();
    report(
        3,
        "Q(v_i, v_j) = 2^-j and E(v3, v4) = 1/312",
        worst <= EXACT && e_dev <= EXACT,
        format!(
            "max |Q - 2^-j| = {worst:.6} at (v{}, v{}); E(v3, v4) = {e34:.9} = 1/{:.4}, dev from 1/312 {e_dev:.3e} (tol {EXACT:e})",
            at.0,
            at.1,
            1.0 / e34
        ),
    );
}

#[test]
fn criterion_04_metric_axioms() {
    let mut worst = f64::INFINITY;
    let mut separation = f64::INFINITY;
    for h in 1..=3 {
        let (t, m) = metrics(2, h);
        worst = worst.min(triangle_slack(&m.metric));
        for alpha in [0.25, 0.5, 0.75] {
            worst = worst.min(triangle_slack(&m.metric.map(|x| x.powf(alpha))));
        }
        let g = gamma(&t);
        if g.len() > 1 {
            separation = separation.min(min_distance(&principal_submatrix(&m.metric, &g)));
        }
    }
    report(
        4,
        "hitting metric and its snowflakes are metrics; Γ is log 3 separated",
        worst >= -TRIANGLE && separation >= 3f64.ln(),
        format!("min triangle slack {worst:.3e} (tol -{TRIANGLE:e}), min Γ distance {separation:.6} (>= log 3 = {:.6})", 3f64.ln()),
    );
}

#[test]
fn criterion_05_operator_norms() {
    let mut ok = true;
    let mut detail = Vec::new();
    for nu in [2, 3] {
        for h in [1, 2, 3] {
            let (t, m) = metrics(nu, h);
            let pt = op_norm_inf(&m.transition.transpose());
            let lap = op_norm_inf(&m.laplacian);
            let lap_g = op_norm_inf(&principal_submatrix(&m.laplacian, &gamma(&t)));
            let bound = (3.0 + nu as f64) / 2.0;
            ok &= pt == nu as f64 && lap <= bound && lap_g <= lap;
            detail.push(format!("ν={nu},h={h}: ‖Pᵀ‖={pt}, ‖Δ‖={lap:.4}<={bound}, ‖Δ_Γ‖={lap_g:.4}"));
        }
    }
    report(5, "operator norm identities and bounds", ok, detail.join("; "));
}

#[test]
fn criterion_06_aitchison_isometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut iso, mut inner) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let m = rng.gen_range(2..=8);
        let y: Vec<f64> = (0..m - 1).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let z: Vec<f64> = (0..m - 1).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let (p, q) = (ilr_inverse(&y), ilr_inverse(&z));
        let euclid = ilr(&p).iter().zip(ilr(&q)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let d = aitchison_distance(&p, &q).unwrap();
        iso = iso.max((euclid - d).abs() / d);
        inner = inner.max((aitchison_inner(&p, &q).unwrap() - aitchison_inner_log_ratios(&p, &q).unwrap()).abs());
    }
    report(
        6,
        "ilr is an isometry; inner product forms agree",
        iso <= EXACT && inner <= EXACT,
        format!("max rel err {iso:.3e}, inner product dev {inner:.3e} (tol {EXACT:e})"),
    );
}

#[test]
fn criterion_07_gcn_lipschitz() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = default_gate_set(2, GatePreset::AndOrProj).unwrap().len();
    let mut violations = 0;
    let mut tightest = 0.0f64;
    let mut total = 0;
    for h in [2, 3] {
        let (t, metrics) = metrics(2, h);
        let g = gamma(&t);
        let lap = principal_submatrix(&metrics.laplacian, &g);
        let d = principal_submatrix(&metrics.metric, &g);
        for depth in 1..=2 {
            for hops in 1..=2 {
                let mut dims = vec![1];
                dims.extend(std::iter::repeat_n(4, depth - 1));
                dims.push(m - 1);
                for trial in 0..100 {
                    let betas: Vec<f64> = (0..depth).map(|_| rng.gen_range(0.5..2.0)).collect();
                    let act = if trial % 2 == 0 { Activation::Relu } else { Activation::Tanh };
                    let hyp = sample_hypothesis(&dims, &betas, hops, act, &mut rng).unwrap();
                    let x: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0..2) as f64).collect();
                    let measured = lipschitz_measure(&lap, &hyp, &x, &d).unwrap();
                    let bound = lipschitz_bound(2, m, hops, depth, &betas);
                    violations += usize::from(measured > bound);
                    tightest = tightest.max(measured / bound);
                    total += 1;
                }
            }
        }
    }
    report(
        7,
        "measured GCN Lipschitz constant below the architectural bound",
        violations == 0,
        format!("{violations} violations in {total} hypotheses, max measured/bound {tightest:.4}"),
    );
}

#[test]
fn criterion_08_transport_cross_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut line_dev = 0.0f64;
    for _ in 0..200 {
        let k = rng.gen_range(2..=30);
        let mut pts: Vec<f64> = (0..k).map(|_| rng.gen_range(-10.0..10.0)).collect();
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        let space = FiniteMetricSpace::line(&pts).unwrap();
        let mu = DiscreteMeasure::random(pts.len(), &mut rng);
        let nu = DiscreteMeasure::random(pts.len(), &mut rng);
        let flow = wasserstein_alpha(&mu, &nu, &space, 1.0).unwrap();
        let cdf = wasserstein_1d(&pts, mu.weights(), &pts, nu.weights()).unwrap();
        line_dev = line_dev.max((flow - cdf).abs());
    }
    let (t, m) = metrics(2, 3);
    let space = FiniteMetricSpace::new(principal_submatrix(&m.metric, &gamma(&t)), None).unwrap();
    let mut worst = f64::INFINITY;
    for i in 0..1000 {
        let alpha = [0.25, 0.5, 0.75, 1.0][i % 4];
        let a = DiscreteMeasure::random(space.len(), &mut rng);
        let b = DiscreteMeasure::random(space.len(), &mut rng);
        let c = DiscreteMeasure::random(space.len(), &mut rng);
        let ab = wasserstein_alpha(&a, &b, &space, alpha).unwrap();
        let bc = wasserstein_alpha(&b, &c, &space, alpha).unwrap();
        let ac = wasserstein_alpha(&a, &c, &space, alpha).unwrap();
        worst = worst.min(ab + bc - ac);
    }
    report(
        8,
        "flow solver matches the line CDF formula; transport cost is a metric",
        line_dev <= FLOW_VS_CDF && worst >= -TRIANGLE,
        format!("max |flow - cdf| {line_dev:.3e} (tol {FLOW_VS_CDF:e}), min triangle slack {worst:.3e} (tol -{TRIANGLE:e})"),
    );
}

#[test]
fn criterion_09_embedding_sandwich() {
    let (t, m) = metrics(2, 2);
    let space = FiniteMetricSpace::new(principal_submatrix(&m.metric, &gamma(&t)), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = f64::INFINITY;
    let mut detail = Vec::new();
    for alpha in [0.25, 0.5, 0.75] {
        let emb = embed_line_heuristic(&snowflake(&space, alpha).unwrap()).unwrap();
        for _ in 0..100 {
            let mu = DiscreteMeasure::random(space.len(), &mut rng);
            let nu = DiscreteMeasure::random(space.len(), &mut rng);
            worst = match sandwich_check(&space, alpha, &mu, &nu, &emb) {
                Ok(r) => worst.min(r.lower_slack).min(r.upper_slack),
                Err(_) => f64::NEG_INFINITY,
            };
        }
        detail.push(format!("α={alpha}: R={:.4}, S={:.4}", emb.r(), emb.s()));
    }
    report(
        9,
        "line embedding brackets the snowflaked transport cost",
        worst >= -SANDWICH,
        format!("min slack {worst:.3e} (tol -{SANDWICH:e}); {}", detail.join(", ")),
    );
}

#[test]
fn criterion_10_gap_transport_inequality() {
    let ctx = GapContext::new(&GapConfig::default()).unwrap();
    let grid = ctx.config.n_grid.clone();
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for r in 0..10u64 {
        let rep = ctx.replication(r).unwrap();
        for (j, hyp) in rep.ensemble.iter().take(10).enumerate() {
            let counts = ctx.sample_counts(r, grid[j % grid.len()]);
            match risk_wasserstein_check(&ctx, hyp, &rep, &counts) {
                Ok(rep) => min_slack = min_slack.min(rep.slack),
                Err(_) => violations += 1,
            }
        }
    }
    report(
        10,
        "risk gap bounded by the transport distance times the measured constants",
        violations == 0 && min_slack >= -RISK_BOUND,
        format!("{violations} violations in 100 pairs, min slack {min_slack:.3e} (tol -{RISK_BOUND:e})"),
    );
}

#[test]
fn criterion_11_rate_reproduction() {
    let config = GapConfig::default();
    assert_eq!((config.nu, config.h, config.alpha, config.ensemble, config.replications), (2, 3, 0.5, 64, 200));
    assert_eq!(config.n_grid, vec![16, 64, 256, 1024, 4096]);
    assert!(config.weights.is_none());
    let start = Instant::now();
    let result = run_gap_experiment(&config).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let s = &result.summary;
    let slope = s.slope.unwrap_or(f64::NAN);
    let ratios: Vec<String> = s.per_n.iter().map(|q| format!("{:.3e}", q.quantile_ratio)).collect();
    report(
        11,
        "gap quantile decays at rate N^-1/2 with a bounded ratio envelope",
        (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&slope) && s.ratio_envelope_non_increasing && secs <= 600.0,
        format!(
            "slope {slope:.4} (in [{}, {}]), q90 ratios [{}] envelope non-increasing {} (10% slack), {secs:.1}s (<= 600s)",
            SLOPE_RANGE.0,
            SLOPE_RANGE.1,
            ratios.join(", "),
            s.ratio_envelope_non_increasing
        ),
    );
}

#[test]
fn criterion_12_coupon_suite() {
    let configs = [
        CouponConfig { k: 2, weights: None, horizons: vec![2, 4, 8], trials: 100_000, seed: 12 },
        CouponConfig { k: 3, weights: None, horizons: vec![3, 5, 10, 20], trials: 100_000, seed: 12 },
        CouponConfig {
            k: 5,
            weights: Some(vec![0.1, 0.15, 0.2, 0.25, 0.3]),
            horizons: vec![5, 10, 20, 40, 80],
            trials: 100_000,
            seed: 12,
        },
    ];
    let (mut bounds_ok, mut sharper_ok) = (true, true);
    let mut exact_in_ci = false;
    for config in &configs {
        for r in coupon_simulate(config).unwrap() {
            bounds_ok &= r.ci_hi >= r.lower && r.ci_lo <= r.upper;
            sharper_ok &= r.sharper <= r.ci_hi;
            if config.k == 3 && r.n == 3 {
                exact_in_ci = r.ci_lo <= 2.0 / 9.0 && 2.0 / 9.0 <= r.ci_hi;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ext = coupon_extremal_check(3, 0.1, 5, 10_000, &mut rng).unwrap();
    report(
        12,
        "coverage estimates respect the bounds; extremal point maximizes the lower function",
        bounds_ok && sharper_ok && exact_in_ci && ext.counterexamples == 0,
        format!(
            "bounds {bounds_ok}, sharper {sharper_ok}, 2/9 in 99% CI {exact_in_ci}; extremal: {} of {} draws exceed f(p*) = {:.4} (worst by {:.4}), {} below",
            ext.counterexamples, ext.trials, ext.f_extremal, ext.worst_excess, ext.below_extremal
        ),
    );
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn criterion_13_determinism() {
    let configs = workspace().join("configs");
    let gap = configs.join("gap-small.json");
    let coupon = configs.join("coupon-k2.json");
    let runs: Vec<Vec<String>> = vec![
        vec!["graph".into(), "--nu".into(), "2".into(), "--height".into(), "2".into(), "--oracle".into()],
        vec!["graph".into(), "--nu".into(), "3".into(), "--height".into(), "1".into(), "--monte-carlo".into(), "2000".into()],
        vec!["gap".into(), gap.display().to_string()],
        vec!["gap".into(), gap.display().to_string(), "--format".into(), "json".into(), "--jobs".into(), "3".into()],
        vec!["coupon".into(), coupon.display().to_string()],
        vec!["selftest".into()],
    ];
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut mismatched = Vec::new();
    for args in &runs {
        let mut snaps = Vec::new();
        for _ in 0..2 {
            let _ = fs::remove_dir_all(&out);
            let status = Command::new(env!("CARGO_BIN_EXE_looprobe"))
                .args(args)
                .args(["--seed", "7", "--out"])
                .arg(&out)
                .output()
                .unwrap();
            assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
            snaps.push(snapshot(&out));
        }
        if snaps[0] != snaps[1] || snaps[0].is_empty() {
            mismatched.push(args[0].clone());
        }
    }
    report(
        13,
        "reruns with identical config and seed are byte-identical",
        mismatched.is_empty(),
        format!("{} commands rerun, mismatches: {:?}", runs.len(), mismatched),
    );
}

#[test]
fn perron_recursion_oracle_is_a_distribution() {
    for nu in [2, 3] {
        for h in [1, 2, 3] {
            let phi = perron_by_recursion(&build_tree(nu, h).unwrap());
            assert!((phi.sum() - 1.0).abs() < 1e-12, "ν={nu} h={h}: {}", phi.sum());
        }
    }
}
