//! Generalization-gap experiments and the coupon-collector coverage suite.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aitchison::{aitchison_distance, ilr, Composition};
use crate::circuit::{build_tree, default_gate_set, evaluate_tree, Gate, GateConfiguration, GatePreset, MachineState, TreeTopology};
use crate::error::{Error, Result};
use crate::graph_metric::{build_loop_graph, principal_submatrix, HittingMethod, MarkovMetrics};
use crate::probe::{
    column_lipschitz, forward_with_conv, hop_power, lipschitz_bound, probe_complexity, probe_vector, sample_hypothesis,
    Activation, GcnHypothesis,
};
use crate::rng::{derive_seed, task_rng};
use crate::stats::{binomial_ci99, envelope_non_increasing, fmt_float, loglog_slope, median, quantile};
use crate::transport::{wasserstein_alpha, DiscreteMeasure, FiniteMetricSpace};

const WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTag {
    /// `J(y, z) = d_A(y, z)`.
    #[default]
    Aitchison,
}

impl LossTag {
    /// Constant in `|J(y,z) − J(y',z')| ≤ C_J·max{d_A(y,y'), d_A(z,z')}`.
    pub fn c_j(&self) -> f64 {
        match self {
            Self::Aitchison => 2.0,
        }
    }
}

impl FromStr for LossTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aitchison" => Ok(Self::Aitchison),
            other => Err(Error::Unknown { kind: "loss", name: other.to_string() }),
        }
    }
}

impl fmt::Display for LossTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("aitchison")
    }
}

pub fn loss(y: &Composition, z: &Composition, tag: LossTag) -> Result<f64> {
    match tag {
        LossTag::Aitchison => aitchison_distance(y, z),
    }
}

/// `J_α = J^α`.
pub fn snowflaked_loss(y: &Composition, z: &Composition, tag: LossTag, alpha: f64) -> Result<f64> {
    Ok(loss(y, z, tag)?.powf(alpha))
}

/// `Σ_v w(v)·J_α(π_v h, Q_η(v))` over the finite support.
pub fn population_risk(
    hyp_outputs: &[Composition],
    probe_outputs: &[Composition],
    weights: &[f64],
    alpha: f64,
    tag: LossTag,
) -> Result<f64> {
    if hyp_outputs.len() != probe_outputs.len() {
        return Err(Error::DimensionMismatch { expected: probe_outputs.len(), actual: hyp_outputs.len() });
    }
    if weights.len() != probe_outputs.len() {
        return Err(Error::DimensionMismatch { expected: probe_outputs.len(), actual: weights.len() });
    }
    let mut total = 0.0;
    for ((y, z), w) in hyp_outputs.iter().zip(probe_outputs).zip(weights) {
        total += w * snowflaked_loss(y, z, tag, alpha)?;
    }
    Ok(total)
}

/// Mean of `J_α` over sampled `(node, probe output)` pairs.
pub fn empirical_risk(hyp_outputs: &[Composition], sample: &[(usize, Composition)], alpha: f64, tag: LossTag) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::InvalidParameter("empirical risk of an empty sample".into()));
    }
    let mut total = 0.0;
    for (v, z) in sample {
        let y = hyp_outputs
            .get(*v)
            .ok_or_else(|| Error::InvalidParameter(format!("sampled node {v} has no hypothesis output")))?;
        total += snowflaked_loss(y, z, tag, alpha)?;
    }
    Ok(total / sample.len() as f64)
}

/// Architecture and probe constants entering the rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub c_j: f64,
    pub m: usize,
    pub nu: usize,
    pub h: usize,
    pub hops: usize,
    pub depth: usize,
    pub budgets: Vec<f64>,
    pub k_probe: f64,
    pub alpha: f64,
}

impl RateParams {
    /// `max{m^{1/2}((3+ν)/2)^{p(L−1)} Π β_l, ν^h, K}`.
    pub fn bracket(&self) -> f64 {
        let conv = ((3.0 + self.nu as f64) / 2.0).powi((self.hops * (self.depth - 1)) as i32);
        let gcn = (self.m as f64).sqrt() * conv * self.budgets.iter().product::<f64>();
        gcn.max((self.nu as f64).powi(self.h as i32)).max(self.k_probe)
    }
}

/// `(C_J·bracket^{5/2})^α·(1 + √log(2/δ))/√N`, i.e. the bound without its
/// unspecified absolute constant.
pub fn theorem_rate_factor(params: &RateParams, n: usize, delta: f64) -> f64 {
    (params.c_j * params.bracket().powf(2.5)).powf(params.alpha) * (1.0 + (2.0 / delta).ln().sqrt()) / (n as f64).sqrt()
}

/// Everything a gap run needs, as a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    pub nu: usize,
    pub h: usize,
    pub preset: GatePreset,
    pub eta: f64,
    pub alpha: f64,
    pub loss: LossTag,
    /// Sampler weights over Γ; uniform when absent.
    pub weights: Option<Vec<f64>>,
    pub n_grid: Vec<usize>,
    pub delta: f64,
    pub ensemble: usize,
    pub depth: usize,
    pub hops: usize,
    /// Width of every hidden layer.
    pub hidden: usize,
    pub beta: Vec<f64>,
    pub activation: Activation,
    pub seed: u64,
    pub replications: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            nu: 2,
            h: 3,
            preset: GatePreset::AndOrProj,
            eta: 0.8,
            alpha: 0.5,
            loss: LossTag::Aitchison,
            weights: None,
            n_grid: vec![16, 64, 256, 1024, 4096],
            delta: 0.1,
            ensemble: 64,
            depth: 2,
            hops: 1,
            hidden: 4,
            beta: vec![1.0, 1.0],
            activation: Activation::Tanh,
            seed: 0,
            replications: 200,
        }
    }
}

impl GapConfig {
    pub fn topology(&self) -> Result<TreeTopology> {
        build_tree(self.nu, self.h)
    }

    pub fn validate(&self) -> Result<()> {
        let topology = self.topology()?;
        let s = topology.num_internal();
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidParameter(format!("eta {} is not in (0, 1)", self.eta)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {} is not in (0, 1)", self.alpha)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta {} is not in (0, 1)", self.delta)));
        }
        if let Some(w) = &self.weights {
            if w.len() != s {
                return Err(Error::DimensionMismatch { expected: s, actual: w.len() });
            }
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::InvalidMeasure("sampler weights must be positive on all of Γ".into()));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > WEIGHT_TOLERANCE {
                return Err(Error::InvalidMeasure(format!("sampler weights sum to {total}")));
            }
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::InvalidParameter("sample sizes must be a non-empty list of positive integers".into()));
        }
        if self.ensemble == 0 || self.replications == 0 {
            return Err(Error::InvalidParameter("ensemble and replication counts must be positive".into()));
        }
        if self.depth == 0 || self.hops == 0 || self.hidden == 0 {
            return Err(Error::InvalidParameter("depth, hops and hidden width must be positive".into()));
        }
        if self.beta.len() != self.depth {
            return Err(Error::DimensionMismatch { expected: self.depth, actual: self.beta.len() });
        }
        if self.beta.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidParameter("budgets must be positive".into()));
        }
        self.activation.validate()
    }

    /// Non-fatal warnings.
    pub fn lints(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let (Some(w), Ok(t)) = (&self.weights, self.topology()) {
            let floor = 1.0 / (10.0 * t.num_internal() as f64);
            if let Some(min) = w.iter().copied().reduce(f64::min) {
                if min < floor {
                    out.push(format!("sampler weight {min} is below 1/(10·#Γ) = {floor}"));
                }
            }
        }
        out
    }
}

/// Precomputed geometry and constants for one configuration.
#[derive(Debug, Clone)]
pub struct GapContext {
    pub config: GapConfig,
    pub topology: TreeTopology,
    pub gates: Vec<Gate>,
    /// `Δ_Γ^p`.
    pub conv: DMatrix<f64>,
    pub gamma_space: FiniteMetricSpace,
    pub weights: DiscreteMeasure,
    pub dims: Vec<usize>,
    pub rate: RateParams,
}

const TAG_REPLICATION: u64 = 1;
const TAG_SAMPLE: u64 = 2;

impl GapContext {
    pub fn new(config: &GapConfig) -> Result<Self> {
        config.validate()?;
        let topology = config.topology()?;
        let gates = default_gate_set(config.nu, config.preset)?;
        let m = gates.len();
        let g = build_loop_graph(&topology);
        let metrics = MarkovMetrics::compute(&g, HittingMethod::Exact)?;
        let gamma = g.roles().expect("loop graph has roles").internal();
        let lap = principal_submatrix(&metrics.laplacian, &gamma);
        let conv = hop_power(&lap, config.hops);
        let gamma_space = FiniteMetricSpace::new(principal_submatrix(&metrics.metric, &gamma), None)?;
        let s = topology.num_internal();
        let weights = match &config.weights {
            Some(w) => DiscreteMeasure::new(w.clone())?,
            None => DiscreteMeasure::uniform(s)?,
        };
        let mut dims = vec![1];
        dims.extend(std::iter::repeat_n(config.hidden, config.depth - 1));
        dims.push(m - 1);
        let rate = RateParams {
            c_j: config.loss.c_j(),
            m,
            nu: config.nu,
            h: config.h,
            hops: config.hops,
            depth: config.depth,
            budgets: config.beta.clone(),
            k_probe: probe_complexity(config.eta, m),
            alpha: config.alpha,
        };
        Ok(Self { config: config.clone(), topology, gates, conv, gamma_space, weights, dims, rate })
    }

    pub fn gate_count(&self) -> usize {
        self.gates.len()
    }

    /// Probe Lipschitz constant `K / min_Γ d` (zero when Γ is one node).
    pub fn probe_lipschitz(&self) -> f64 {
        if self.gamma_space.len() < 2 {
            0.0
        } else {
            self.rate.k_probe / self.gamma_space.min_distance()
        }
    }

    pub fn replication(&self, r: u64) -> Result<Replication> {
        let seed = derive_seed(self.config.seed, &[TAG_REPLICATION, r]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.gate_count();
        let gate_config = GateConfiguration::random(&self.topology, m, &mut rng);
        let prompt = MachineState::random(self.topology.num_base(), &mut rng);
        let eval = evaluate_tree(&self.topology, &self.gates, &gate_config, &prompt.window)?;
        let x: Vec<f64> = eval.internal.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let probe: Vec<Composition> = gate_config.as_slice().iter().map(|&g| probe_vector(self.config.eta, m, g)).collect();
        let probe_ilr = probe.iter().map(ilr).collect();
        let ensemble = (0..self.config.ensemble)
            .map(|_| sample_hypothesis(&self.dims, &self.config.beta, self.config.hops, self.config.activation, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Replication { index: r, seed, gate_config, x, probe, probe_ilr, ensemble })
    }

    /// `J_α(π_v h, Q_η(v))` for every node of Γ.
    pub fn node_losses(&self, hyp: &GcnHypothesis, rep: &Replication) -> Vec<f64> {
        let f = forward_with_conv(&self.conv, hyp, &rep.x);
        losses_from_outputs(&f, &rep.probe_ilr, self.config.alpha)
    }

    pub fn sample_counts(&self, r: u64, n: usize) -> Vec<u64> {
        let mut rng = task_rng(self.config.seed, &[TAG_SAMPLE, r, n as u64]);
        self.weights.sample_counts(n, &mut rng)
    }

    pub fn rate_factor(&self, n: usize) -> f64 {
        theorem_rate_factor(&self.rate, n, self.config.delta)
    }
}

/// Per-replication circuit input, probe and hypothesis ensemble.
#[derive(Debug, Clone)]
pub struct Replication {
    pub index: u64,
    pub seed: u64,
    pub gate_config: GateConfiguration,
    /// Circuit values on Γ as 0/1.
    pub x: Vec<f64>,
    pub probe: Vec<Composition>,
    pub probe_ilr: Vec<Vec<f64>>,
    pub ensemble: Vec<GcnHypothesis>,
}

/// Aitchison losses via the ilr isometry, raised to `alpha`.
pub fn losses_from_outputs(f: &DMatrix<f64>, probe_ilr: &[Vec<f64>], alpha: f64) -> Vec<f64> {
    f.column_iter()
        .zip(probe_ilr)
        .map(|(col, target)| {
            col.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt().powf(alpha)
        })
        .collect()
}

fn weighted_mean(losses: &[f64], weights: &[f64]) -> f64 {
    losses.iter().zip(weights).map(|(l, w)| l * w).sum()
}

fn count_mean(losses: &[f64], counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    losses.iter().zip(counts).map(|(l, &c)| l * c as f64).sum::<f64>() / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub replication: u64,
    pub seed: u64,
    pub gap: f64,
    pub rate_factor: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapQuantiles {
    #[serde(rename = "N")]
    pub n: usize,
    pub median_gap: f64,
    pub quantile_gap: f64,
    pub quantile_ratio: f64,
    pub rate_factor: f64,
}

/// Relative slack allowed in the ratio envelope.
pub const ENVELOPE_SLACK: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    /// Quantile level `1 − δ`.
    pub quantile_level: f64,
    pub per_n: Vec<GapQuantiles>,
    /// Least-squares slope of log quantile-gap against log N.
    pub slope: Option<f64>,
    pub ratio_envelope_non_increasing: bool,
    /// Quantile gap at N is at least the quantile gap at 4N wherever both exist.
    pub gap_monotone_by_four: bool,
    pub bracket: f64,
    pub k_probe: f64,
    pub c_j: f64,
    /// The ensemble maximum only bounds the supremum over the class from below.
    pub sup_is_lower_bound: bool,
    pub lints: Vec<String>,
    /// Gap-versus-transport checks run on the first ensemble member.
    pub transport_checks: usize,
    pub transport_violations: usize,
    pub min_transport_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub rows: Vec<GapRow>,
    pub summary: GapSummary,
}

impl GapResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,seed,gap,rate_factor,ratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.n,
                r.seed,
                fmt_float(r.gap),
                fmt_float(r.rate_factor),
                fmt_float(r.ratio)
            ));
        }
        out
    }
}

/// Gaps for one replication across the N grid.
pub fn replication_gaps(ctx: &GapContext, rep: &Replication) -> Vec<GapRow> {
    let weights = ctx.weights.weights();
    let losses: Vec<Vec<f64>> = rep.ensemble.iter().map(|h| ctx.node_losses(h, rep)).collect();
    let population: Vec<f64> = losses.iter().map(|l| weighted_mean(l, weights)).collect();
    ctx.config
        .n_grid
        .iter()
        .map(|&n| {
            let counts = ctx.sample_counts(rep.index, n);
            let gap = losses
                .iter()
                .zip(&population)
                .map(|(l, p)| (p - count_mean(l, &counts)).abs())
                .fold(0.0, f64::max);
            let rate_factor = ctx.rate_factor(n);
            GapRow { n, replication: rep.index, seed: rep.seed, gap, rate_factor, ratio: gap / rate_factor }
        })
        .collect()
}

/// Transport-bound checks for the first ensemble member at every N:
/// `(checks, violations, smallest slack)`.
pub fn replication_transport_checks(ctx: &GapContext, rep: &Replication) -> Result<(usize, usize, f64)> {
    let (mut violations, mut worst) = (0, f64::INFINITY);
    for &n in &ctx.config.n_grid {
        match risk_wasserstein_check(ctx, &rep.ensemble[0], rep, &ctx.sample_counts(rep.index, n)) {
            Ok(report) => worst = worst.min(report.slack),
            Err(Error::CheckFailed(_)) => violations += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((ctx.config.n_grid.len(), violations, worst))
}

pub fn run_gap_experiment(config: &GapConfig) -> Result<GapResult> {
    let ctx = GapContext::new(config)?;
    let per_rep = (0..config.replications as u64)
        .into_par_iter()
        .map(|r| {
            let rep = ctx.replication(r)?;
            Ok((replication_gaps(&ctx, &rep), replication_transport_checks(&ctx, &rep)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut checks = (0, 0, f64::INFINITY);
    let mut rows: Vec<GapRow> = Vec::new();
    for (r, (c, v, w)) in per_rep {
        rows.extend(r);
        checks = (checks.0 + c, checks.1 + v, checks.2.min(w));
    }
    rows.sort_by_key(|r| (config.n_grid.iter().position(|&n| n == r.n), r.replication));
    let mut summary = summarize(&ctx, &rows)?;
    summary.transport_checks = checks.0;
    summary.transport_violations = checks.1;
    summary.min_transport_slack = checks.2;
    Ok(GapResult { rows, summary })
}

impl GapResult {
    /// Nonnegative finite gaps, positive rate factors, no transport-bound violation.
    pub fn invariants_hold(&self) -> bool {
        self.rows.iter().all(|r| r.gap.is_finite() && r.gap >= 0.0 && r.rate_factor > 0.0)
            && self.summary.transport_violations == 0
    }
}

fn summarize(ctx: &GapContext, rows: &[GapRow]) -> Result<GapSummary> {
    let level = 1.0 - ctx.config.delta;
    let mut per_n = Vec::new();
    for &n in &ctx.config.n_grid {
        if per_n.iter().any(|q: &GapQuantiles| q.n == n) {
            continue;
        }
        let gaps: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.gap).collect();
        let ratios: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.ratio).collect();
        per_n.push(GapQuantiles {
            n,
            median_gap: median(&gaps)?,
            quantile_gap: quantile(&gaps, level)?,
            quantile_ratio: quantile(&ratios, level)?,
            rate_factor: ctx.rate_factor(n),
        });
    }
    per_n.sort_by_key(|q| q.n);
    let xs: Vec<f64> = per_n.iter().map(|q| q.n as f64).collect();
    let ys: Vec<f64> = per_n.iter().map(|q| q.quantile_gap).collect();
    let slope = loglog_slope(&xs, &ys).ok();
    let ratios: Vec<f64> = per_n.iter().map(|q| q.quantile_ratio).collect();
    let gap_monotone_by_four = per_n.iter().all(|a| {
        per_n.iter().find(|b| b.n == 4 * a.n).is_none_or(|b| a.quantile_gap >= b.quantile_gap)
    });
    Ok(GapSummary {
        quantile_level: level,
        per_n,
        slope,
        ratio_envelope_non_increasing: envelope_non_increasing(&ratios, ENVELOPE_SLACK),
        gap_monotone_by_four,
        bracket: ctx.rate.bracket(),
        k_probe: ctx.rate.k_probe,
        c_j: ctx.rate.c_j,
        sup_is_lower_bound: true,
        lints: ctx.config.lints(),
        transport_checks: 0,
        transport_violations: 0,
        min_transport_slack: f64::INFINITY,
    })
}

/// Both sides of `|ℛ − ℛᴺ| ≤ (C_J(C_ℋ + C_Q))^α·𝒲_α(μ, μᴺ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskWassersteinReport {
    pub population: f64,
    pub empirical: f64,
    pub gap: f64,
    /// Measured Lipschitz constant of the hypothesis on Γ.
    pub c_h: f64,
    /// Theoretical bound on `c_h`.
    pub c_h_bound: f64,
    pub c_q: f64,
    pub w_alpha: f64,
    pub bound: f64,
    pub bound_theoretical: f64,
    pub slack: f64,
}

pub fn risk_wasserstein_check(
    ctx: &GapContext,
    hyp: &GcnHypothesis,
    rep: &Replication,
    counts: &[u64],
) -> Result<RiskWassersteinReport> {
    let alpha = ctx.config.alpha;
    let f = forward_with_conv(&ctx.conv, hyp, &rep.x);
    let losses = losses_from_outputs(&f, &rep.probe_ilr, alpha);
    let population = weighted_mean(&losses, ctx.weights.weights());
    let empirical = count_mean(&losses, counts);
    let gap = (population - empirical).abs();
    let c_h = column_lipschitz(&f, ctx.gamma_space.matrix())?;
    let c_h_bound = lipschitz_bound(ctx.config.nu, ctx.gate_count(), ctx.config.hops, ctx.config.depth, &ctx.config.beta);
    let c_q = ctx.probe_lipschitz();
    let empirical_measure = DiscreteMeasure::from_counts(counts)?;
    let w_alpha = wasserstein_alpha(&ctx.weights, &empirical_measure, &ctx.gamma_space, alpha)?;
    let c_j = ctx.rate.c_j;
    let bound = (c_j * (c_h + c_q)).powf(alpha) * w_alpha;
    let bound_theoretical = (c_j * (c_h_bound + c_q)).powf(alpha) * w_alpha;
    let report = RiskWassersteinReport {
        population,
        empirical,
        gap,
        c_h,
        c_h_bound,
        c_q,
        w_alpha,
        bound,
        bound_theoretical,
        slack: bound - gap,
    };
    if gap > bound + 1e-12 || gap > bound_theoretical + 1e-12 {
        return Err(Error::CheckFailed(format!("risk gap {gap} exceeds transport bound {bound}")));
    }
    Ok(report)
}

/// Coverage suite configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouponConfig {
    pub k: usize,
    /// Sampling weights; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    pub horizons: Vec<usize>,
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
}

pub const COUPON_POINT_LIMIT: usize = 64;

impl CouponConfig {
    pub fn weights(&self) -> Result<Vec<f64>> {
        if self.k < 1 || self.k > COUPON_POINT_LIMIT {
            return Err(Error::TooLarge { what: "coupon points", size: self.k, limit: COUPON_POINT_LIMIT });
        }
        let w = self.weights.clone().unwrap_or_else(|| vec![1.0 / self.k as f64; self.k]);
        if w.len() != self.k {
            return Err(Error::DimensionMismatch { expected: self.k, actual: w.len() });
        }
        if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidMeasure("coupon weights must be positive".into()));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidMeasure(format!("coupon weights sum to {total}")));
        }
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights()?;
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trial count must be positive".into()));
        }
        if self.horizons.is_empty() {
            return Err(Error::InvalidParameter("no horizons given".into()));
        }
        if let Some(&n) = self.horizons.iter().find(|&&n| n < self.k) {
            return Err(Error::InvalidParameter(format!("horizon {n} is below the point count {}", self.k)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouponBounds {
    pub lower: f64,
    pub upper: f64,
    pub sharper: f64,
}

impl CouponBounds {
    /// Lower bounds clipped at zero for reporting.
    pub fn clipped(&self) -> Self {
        Self { lower: self.lower.max(0.0), upper: self.upper, sharper: self.sharper.max(0.0) }
    }
}

pub fn coupon_bounds(weights: &[f64], n: usize) -> CouponBounds {
    let k = weights.len() as f64;
    let w = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let miss = (1.0 - w).powi(n as i32);
    CouponBounds {
        lower: 1.0 - k * miss,
        upper: 1.0 - miss,
        sharper: 1.0 - ((k - 1.0) * w).powi(n as i32) - (k - 1.0) * miss,
    }
}

/// `Σ_j (−1)^j C(k, j)(1 − j/k)^n`.
pub fn coupon_exact_uniform(k: usize, n: usize) -> f64 {
    let mut binom = 1.0;
    let mut total = 0.0;
    for j in 0..=k {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * binom * (1.0 - j as f64 / k as f64).powi(n as i32);
        binom = binom * (k - j) as f64 / (j + 1) as f64;
    }
    total
}

pub const EXACT_COUPON_LIMIT: usize = 20;

/// Inclusion–exclusion over subsets of missed points.
pub fn coupon_exact(weights: &[f64], n: usize) -> Result<f64> {
    let k = weights.len();
    if k > EXACT_COUPON_LIMIT {
        return Err(Error::TooLarge { what: "exact coupon points", size: k, limit: EXACT_COUPON_LIMIT });
    }
    let mut total = 0.0;
    for mask in 0u32..(1 << k) {
        let missed: f64 = (0..k).filter(|&i| mask >> i & 1 == 1).map(|i| weights[i]).sum();
        let sign = if mask.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * (1.0 - missed).max(0.0).powi(n as i32);
    }
    Ok(total)
}

const COUPON_CHUNK: u64 = 4096;

/// First covering times of `trials` independent draw sequences, `cap + 1`
/// when not covered within `cap` draws. Chunks use derived streams, so the
/// result does not depend on the thread count.
pub fn coupon_covering_times(weights: &[f64], cap: usize, trials: u64, seed: u64) -> Vec<usize> {
    let k = weights.len();
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let full: u64 = if k == 64 { u64::MAX } else { (1u64 << k) - 1 };
    let chunks = trials.div_ceil(COUPON_CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = task_rng(seed, &[c]);
            let len = COUPON_CHUNK.min(trials - c * COUPON_CHUNK);
            let cdf = &cdf;
            (0..len)
                .map(move |_| {
                    let mut seen = 0u64;
                    for t in 1..=cap {
                        let u: f64 = rng.gen();
                        let i = cdf.partition_point(|&x| x <= u).min(k - 1);
                        seen |= 1 << i;
                        if seen == full {
                            return t;
                        }
                    }
                    cap + 1
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouponRow {
    pub n: usize,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub lower: f64,
    pub upper: f64,
    pub sharper: f64,
    /// Inclusion–exclusion value when the point count allows it.
    pub exact: Option<f64>,
}

/// Monte-Carlo `ℙ(τ ≤ n̄)` with 99% intervals for every horizon, from one
/// shared set of draw sequences. Lower bounds are clipped at zero.
pub fn coupon_simulate(config: &CouponConfig) -> Result<Vec<CouponRow>> {
    config.validate()?;
    let weights = config.weights()?;
    let cap = *config.horizons.iter().max().unwrap();
    let times = coupon_covering_times(&weights, cap, config.trials, config.seed);
    config
        .horizons
        .iter()
        .map(|&n| {
            let hits = times.iter().filter(|&&t| t <= n).count() as u64;
            let (ci_lo, ci_hi) = binomial_ci99(hits, config.trials);
            let b = coupon_bounds(&weights, n).clipped();
            let exact = if weights.len() <= EXACT_COUPON_LIMIT { Some(coupon_exact(&weights, n)?) } else { None };
            Ok(CouponRow {
                n,
                estimate: hits as f64 / config.trials as f64,
                ci_lo,
                ci_hi,
                lower: b.lower,
                upper: b.upper,
                sharper: b.sharper,
                exact,
            })
        })
        .collect()
}

pub fn coupon_csv(rows: &[CouponRow]) -> String {
    let mut out = String::from("n,estimate,ci_lo,ci_hi,lower,upper,sharper\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.n,
            fmt_float(r.estimate),
            fmt_float(r.ci_lo),
            fmt_float(r.ci_hi),
            fmt_float(r.lower),
            fmt_float(r.upper),
            fmt_float(r.sharper)
        ));
    }
    out
}

/// `f(p) = 1 − Σ(1 − p_i)^n`.
pub fn coverage_lower_function(p: &[f64], n: usize) -> f64 {
    1.0 - p.iter().map(|&x| (1.0 - x).powi(n as i32)).sum::<f64>()
}

/// `(1 − (k−1)ω, ω, …, ω)`.
pub fn extremal_point(k: usize, omega: f64) -> Vec<f64> {
    let mut p = vec![omega; k];
    p[0] = 1.0 - (k - 1) as f64 * omega;
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremalReport {
    pub k: usize,
    pub omega: f64,
    pub n: usize,
    pub trials: usize,
    pub f_extremal: f64,
    pub f_uniform: f64,
    /// Draws with `f(p) > f(p*)`, contradicting `f(p*) ≥ f(p)` on the restricted simplex.
    pub counterexamples: usize,
    /// Largest `f(p) − f(p*)` seen.
    pub worst_excess: f64,
    /// Draws with `f(p) < f(p*)`.
    pub below_extremal: usize,
    /// Draws whose minimum-weight lower bound exceeds the uniform one.
    pub uniform_violations: usize,
}

impl ExtremalReport {
    pub fn passed(&self) -> bool {
        self.counterexamples == 0 && self.uniform_violations == 0
    }
}

/// Samples the restricted simplex `{p_i ≥ ω}` and compares `f` with its
/// value at the extremal point.
pub fn coupon_extremal_check<R: Rng + ?Sized>(k: usize, omega: f64, n: usize, trials: usize, rng: &mut R) -> Result<ExtremalReport> {
    if k < 2 {
        return Err(Error::InvalidParameter("extremal check needs k >= 2".into()));
    }
    if !(0.0..=1.0 / k as f64 + 1e-15).contains(&omega) {
        return Err(Error::InvalidParameter(format!("omega {omega} is not in [0, 1/k]")));
    }
    let p_star = extremal_point(k, omega);
    let f_star = coverage_lower_function(&p_star, n);
    let uniform = vec![1.0 / k as f64; k];
    let f_uniform = coverage_lower_function(&uniform, n);
    let uniform_lower = coupon_bounds(&uniform, n).lower;
    let free = 1.0 - k as f64 * omega;
    let (mut counterexamples, mut below, mut uniform_violations) = (0, 0, 0);
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..trials {
        let d = DiscreteMeasure::random(k, rng);
        let p: Vec<f64> = d.weights().iter().map(|w| omega + free * w).collect();
        let f = coverage_lower_function(&p, n);
        let tol = 1e-12;
        worst_excess = worst_excess.max(f - f_star);
        if f > f_star + tol {
            counterexamples += 1;
        }
        if f < f_star - tol {
            below += 1;
        }
        if coupon_bounds(&p, n).lower > uniform_lower + tol {
            uniform_violations += 1;
        }
    }
    Ok(ExtremalReport {
        k,
        omega,
        n,
        trials,
        f_extremal: f_star,
        f_uniform,
        counterexamples,
        worst_excess,
        below_extremal: below,
        uniform_violations,
    })
}
