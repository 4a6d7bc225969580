//! Optimal transport on finite metric spaces and one-dimensional snowflake
//! embeddings.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::fmt_float;

const METRIC_TOLERANCE: f64 = 1e-12;
const MASS_TOLERANCE: f64 = 1e-12;
/// Residual amounts below this are treated as exhausted by the flow solver.
const FLOW_EPS: f64 = 1e-15;

/// A finite metric space given by its distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMetricSpace {
    dist: DMatrix<f64>,
    labels: Option<Vec<String>>,
}

impl FiniteMetricSpace {
    pub fn new(dist: DMatrix<f64>, labels: Option<Vec<String>>) -> Result<Self> {
        let k = dist.nrows();
        if k == 0 || dist.ncols() != k {
            return Err(Error::NotMetric(format!("distance matrix is {}x{}", dist.nrows(), dist.ncols())));
        }
        if let Some(l) = &labels {
            if l.len() != k {
                return Err(Error::DimensionMismatch { expected: k, actual: l.len() });
            }
        }
        let scale = dist.amax().max(1.0);
        for i in 0..k {
            if dist[(i, i)] != 0.0 {
                return Err(Error::NotMetric(format!("d({i},{i}) = {} is not zero", dist[(i, i)])));
            }
            for j in (i + 1)..k {
                let d = dist[(i, j)];
                if !(d.is_finite() && d > 0.0) {
                    return Err(Error::NotMetric(format!("d({i},{j}) = {d} is not a positive distance")));
                }
                if (d - dist[(j, i)]).abs() > METRIC_TOLERANCE * scale {
                    return Err(Error::NotMetric(format!("d({i},{j}) != d({j},{i})")));
                }
            }
        }
        for i in 0..k {
            for j in 0..k {
                for m in 0..k {
                    if dist[(i, j)] > dist[(i, m)] + dist[(m, j)] + METRIC_TOLERANCE * scale {
                        return Err(Error::NotMetric(format!("triangle inequality fails at ({i},{m},{j})")));
                    }
                }
            }
        }
        Ok(Self { dist, labels })
    }

    /// Points on the real line with `|x − y|` distances. Points must be distinct.
    pub fn line(points: &[f64]) -> Result<Self> {
        let k = points.len();
        Self::new(DMatrix::from_fn(k, k, |i, j| (points[i] - points[j]).abs()), None)
    }

    pub fn len(&self) -> usize {
        self.dist.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.dist[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.dist
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn diameter(&self) -> f64 {
        self.dist.max()
    }

    /// Smallest positive distance; zero for a single point.
    pub fn min_distance(&self) -> f64 {
        let k = self.len();
        let mut best = f64::INFINITY;
        for i in 0..k {
            for j in (i + 1)..k {
                best = best.min(self.dist[(i, j)]);
            }
        }
        if best.is_finite() {
            best
        } else {
            0.0
        }
    }

    /// Subspace on `idx`, in that order.
    pub fn restrict(&self, idx: &[usize]) -> Result<Self> {
        let dist = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.dist[(idx[a], idx[b])]);
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i].clone()).collect());
        Self::new(dist, labels)
    }
}

/// The α-snowflake `d^α`.
pub fn snowflake(space: &FiniteMetricSpace, alpha: f64) -> Result<FiniteMetricSpace> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!("snowflake exponent {alpha} is not in (0, 1]")));
    }
    FiniteMetricSpace::new(space.dist.map(|d| d.powf(alpha)), space.labels.clone())
}

/// A probability vector on the points of a finite space.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct DiscreteMeasure(Vec<f64>);

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("measure has no points".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidMeasure(format!("weight {w} is negative or not finite")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}")));
        }
        Ok(Self(weights))
    }

    pub fn dirac(k: usize, i: usize) -> Result<Self> {
        if i >= k {
            return Err(Error::InvalidMeasure(format!("point {i} outside a {k}-point space")));
        }
        let mut w = vec![0.0; k];
        w[i] = 1.0;
        Self::new(w)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidMeasure("measure has no points".into()));
        }
        Self::new(vec![1.0 / k as f64; k])
    }

    /// Empirical measure of point counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let n: u64 = counts.iter().sum();
        if n == 0 {
            return Err(Error::InvalidMeasure("no samples".into()));
        }
        Self::new(counts.iter().map(|&c| c as f64 / n as f64).collect())
    }

    /// Normalized exponential weights (a flat Dirichlet draw).
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let total: f64 = raw.iter().sum();
        Self(raw.into_iter().map(|w| w / total).collect())
    }

    /// Counts of `n` i.i.d. draws.
    pub fn sample_counts<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<u64> {
        let cdf: Vec<f64> = self
            .0
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let last = self.0.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        let mut counts = vec![0u64; self.0.len()];
        for _ in 0..n {
            let u: f64 = rng.gen();
            let i = cdf.partition_point(|&c| c <= u).min(last);
            counts[i] += 1;
        }
        counts
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'de> Deserialize<'de> for DiscreteMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        DiscreteMeasure::new(Vec::<f64>::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// An optimal coupling with a certifying dual function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    /// Nonzero entries `(i, j, mass)`.
    pub entries: Vec<(usize, usize, f64)>,
    pub cost: f64,
    /// `f` with `Σ f dν − Σ f dμ = cost` and `f(x) − f(y) ≤ c(x, y)`.
    pub potential: Vec<f64>,
}

impl TransportPlan {
    pub fn dual_value(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        self.potential
            .iter()
            .zip(mu.weights().iter().zip(nu.weights()))
            .map(|(f, (a, b))| f * (b - a))
            .sum()
    }

    /// Largest `f(x) − f(y) − c(x, y)`; nonpositive for a feasible dual.
    pub fn dual_violation(&self, cost: &DMatrix<f64>) -> f64 {
        let k = self.potential.len();
        let mut worst = f64::NEG_INFINITY;
        for x in 0..k {
            for y in 0..k {
                worst = worst.max(self.potential[x] - self.potential[y] - cost[(x, y)]);
            }
        }
        worst
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,mass\n");
        for &(i, j, m) in &self.entries {
            out.push_str(&format!("{i},{j},{}\n", fmt_float(m)));
        }
        out
    }
}

/// Exact Kantorovich transport for a square cost matrix that is a metric on
/// the common support, by successive shortest paths on the bipartite graph.
pub fn optimal_transport(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &DMatrix<f64>) -> Result<TransportPlan> {
    let k = mu.len();
    if nu.len() != k {
        return Err(Error::DimensionMismatch { expected: k, actual: nu.len() });
    }
    if cost.nrows() != k || cost.ncols() != k {
        return Err(Error::DimensionMismatch { expected: k, actual: cost.nrows() });
    }
    let sources: Vec<usize> = (0..k).filter(|&i| mu.weights()[i] > 0.0).collect();
    let sinks: Vec<usize> = (0..k).filter(|&j| nu.weights()[j] > 0.0).collect();
    let (ns, nt) = (sources.len(), sinks.len());
    let c = |a: usize, b: usize| cost[(sources[a], sinks[b])];

    let mut supply: Vec<f64> = sources.iter().map(|&i| mu.weights()[i]).collect();
    let mut demand: Vec<f64> = sinks.iter().map(|&j| nu.weights()[j]).collect();
    let mut flow = DMatrix::<f64>::zeros(ns, nt);

    // Node layout: sources 0..ns, sinks ns..ns+nt.
    let n = ns + nt;
    let tol = 1e-12 * cost.amax().max(1e-300);
    let max_rounds = 4 * (ns * nt + n) + 64;
    for _ in 0..max_rounds {
        if supply.iter().all(|&s| s <= FLOW_EPS) || demand.iter().all(|&d| d <= FLOW_EPS) {
            break;
        }
        let mut dist = vec![f64::INFINITY; n];
        let mut pred = vec![usize::MAX; n];
        for a in 0..ns {
            if supply[a] > FLOW_EPS {
                dist[a] = 0.0;
            }
        }
        let mut settled = false;
        for _ in 0..=n {
            let mut changed = false;
            for a in 0..ns {
                if dist[a].is_finite() {
                    for b in 0..nt {
                        let cand = dist[a] + c(a, b);
                        if cand < dist[ns + b] - tol {
                            dist[ns + b] = cand;
                            pred[ns + b] = a;
                            changed = true;
                        }
                    }
                }
            }
            for b in 0..nt {
                if dist[ns + b].is_finite() {
                    for a in 0..ns {
                        if flow[(a, b)] > FLOW_EPS {
                            let cand = dist[ns + b] - c(a, b);
                            if cand < dist[a] - tol {
                                dist[a] = cand;
                                pred[a] = ns + b;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                settled = true;
                break;
            }
        }
        if !settled {
            return Err(Error::NoConvergence { iterations: n, residual: f64::NAN });
        }
        let target = (0..nt)
            .filter(|&b| demand[b] > FLOW_EPS && dist[ns + b].is_finite())
            .min_by(|&x, &y| dist[ns + x].total_cmp(&dist[ns + y]))
            .ok_or_else(|| Error::InvalidMeasure("no augmenting path".into()))?;

        // Walk back to a source, collecting the bottleneck.
        let mut path = Vec::new();
        let mut node = ns + target;
        let mut amount = demand[target];
        let mut guard = 0;
        while node >= ns || pred[node] != usize::MAX {
            let p = pred[node];
            if node >= ns {
                path.push((p, node - ns, true));
            } else {
                let b = p - ns;
                amount = amount.min(flow[(node, b)]);
                path.push((node, b, false));
            }
            node = p;
            guard += 1;
            if guard > 2 * n {
                return Err(Error::NoConvergence { iterations: guard, residual: f64::NAN });
            }
        }
        amount = amount.min(supply[node]);
        for (a, b, forward) in path {
            if forward {
                flow[(a, b)] += amount;
            } else {
                flow[(a, b)] -= amount;
                if flow[(a, b)] < FLOW_EPS {
                    flow[(a, b)] = 0.0;
                }
            }
        }
        supply[node] -= amount;
        demand[target] -= amount;
    }
    if supply.iter().sum::<f64>() > 1e-9 || demand.iter().sum::<f64>() > 1e-9 {
        return Err(Error::NoConvergence { iterations: max_rounds, residual: supply.iter().sum() });
    }

    let mut entries = Vec::new();
    let mut total = 0.0;
    for a in 0..ns {
        for b in 0..nt {
            if flow[(a, b)] > 0.0 {
                entries.push((sources[a], sinks[b], flow[(a, b)]));
                total += flow[(a, b)] * c(a, b);
            }
        }
    }

    // Node potentials from shortest paths on the final residual graph,
    // then the c-transform over the whole space.
    let mut pot = vec![0.0f64; n];
    for _ in 0..=n {
        let mut changed = false;
        for a in 0..ns {
            for b in 0..nt {
                if pot[a] + c(a, b) < pot[ns + b] - tol {
                    pot[ns + b] = pot[a] + c(a, b);
                    changed = true;
                }
                if flow[(a, b)] > 0.0 && pot[ns + b] - c(a, b) < pot[a] - tol {
                    pot[a] = pot[ns + b] - c(a, b);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let potential = (0..k)
        .map(|x| (0..ns).map(|a| pot[a] + cost[(sources[a], x)]).fold(f64::INFINITY, f64::min))
        .collect();
    Ok(TransportPlan { entries, cost: total, potential })
}

/// `𝒲_α(μ, ν)`: transport cost with ground cost `d^α`.
pub fn wasserstein_alpha(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    space: &FiniteMetricSpace,
    alpha: f64,
) -> Result<f64> {
    Ok(wasserstein_alpha_plan(mu, nu, space, alpha)?.cost)
}

pub fn wasserstein_alpha_plan(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    space: &FiniteMetricSpace,
    alpha: f64,
) -> Result<TransportPlan> {
    if mu.len() != space.len() {
        return Err(Error::DimensionMismatch { expected: space.len(), actual: mu.len() });
    }
    let cost = snowflake(space, alpha)?;
    optimal_transport(mu, nu, cost.matrix())
}

/// Exact `𝒲₁` between weighted point sets on the line, `∫|F − G|`.
pub fn wasserstein_1d(xs: &[f64], wx: &[f64], ys: &[f64], wy: &[f64]) -> Result<f64> {
    if xs.len() != wx.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), actual: wx.len() });
    }
    if ys.len() != wy.len() {
        return Err(Error::DimensionMismatch { expected: ys.len(), actual: wy.len() });
    }
    let mut events: Vec<(f64, f64)> = xs.iter().zip(wx).map(|(&x, &w)| (x, w)).collect();
    events.extend(ys.iter().zip(wy).map(|(&y, &w)| (y, -w)));
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut diff = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        diff += pair[0].1;
        total += diff.abs() * (pair[1].0 - pair[0].0);
    }
    Ok(total)
}

/// Coordinates on ℝ with measured ratios `R ≤ |φ(x) − φ(y)|/d(x, y) ≤ S`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineEmbedding {
    coords: Vec<f64>,
    r: f64,
    s: f64,
}

impl LineEmbedding {
    /// Measures `R` and `S` of `coords` against `space` (already snowflaked).
    /// A single point gets `R = S = 1`.
    pub fn measure(space: &FiniteMetricSpace, coords: Vec<f64>) -> Result<Self> {
        let k = space.len();
        if coords.len() != k {
            return Err(Error::DimensionMismatch { expected: k, actual: coords.len() });
        }
        let (mut r, mut s) = (f64::INFINITY, 0.0f64);
        for i in 0..k {
            for j in (i + 1)..k {
                let ratio = (coords[i] - coords[j]).abs() / space.distance(i, j);
                r = r.min(ratio);
                s = s.max(ratio);
            }
        }
        if k == 1 {
            r = 1.0;
            s = 1.0;
        }
        Ok(Self { coords, r, s })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn distortion(&self) -> f64 {
        if self.r > 0.0 {
            self.s / self.r
        } else {
            f64::INFINITY
        }
    }

    pub fn is_injective(&self) -> bool {
        self.r > 0.0
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    coords: Vec<f64>,
    #[serde(rename = "R")]
    r: f64,
    #[serde(rename = "S")]
    s: f64,
    distortion: f64,
}

impl Serialize for LineEmbedding {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        EmbeddingRecord { coords: self.coords.clone(), r: self.r, s: self.s, distortion: self.distortion() }.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for LineEmbedding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = EmbeddingRecord::deserialize(d)?;
        if rec.r > rec.s {
            return Err(serde::de::Error::custom("R exceeds S"));
        }
        Ok(Self { coords: rec.coords, r: rec.r, s: rec.s })
    }
}

/// Separates coincident coordinates by seeded offsets of at most
/// `1e-9 · min_distance`.
pub fn perturb_ties(coords: &mut [f64], min_distance: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by(|&a, &b| coords[a].total_cmp(&coords[b]).then(a.cmp(&b)));
    let step = 1e-9 * min_distance;
    let mut shift = 0.0;
    for w in order.windows(2) {
        if coords[w[1]] + shift <= coords[w[0]] {
            shift += step * (0.5 + 0.5 * rng.gen::<f64>());
        }
        coords[w[1]] += shift;
    }
}

/// Least distortion attainable with the points in left-to-right `order`,
/// and coordinates attaining it (to relative 1e−12).
///
/// With `R` normalized to 1 the feasible set for a given `S` is a system of
/// difference constraints, feasible iff its constraint graph has no
/// negative cycle, so `S` is found by bisection.
pub fn order_distortion(space: &FiniteMetricSpace, order: &[usize], prune_above: f64) -> Option<(f64, Vec<f64>)> {
    let k = order.len();
    if k == 1 {
        return Some((1.0, vec![0.0]));
    }
    let c = DMatrix::from_fn(k, k, |a, b| space.distance(order[a], order[b]));
    // Longest chains under the lower constraints only.
    let mut longest = DMatrix::<f64>::zeros(k, k);
    let mut lo = 1.0f64;
    for a in 0..k {
        for b in (a + 1)..k {
            let mut best = c[(a, b)];
            for m in (a + 1)..b {
                best = best.max(longest[(a, m)] + c[(m, b)]);
            }
            longest[(a, b)] = best;
            lo = lo.max(best / c[(a, b)]);
        }
    }
    if lo >= prune_above {
        return None;
    }
    let greedy: Vec<f64> = (0..k).map(|b| longest[(0, b)]).collect();
    let mut hi = 1.0f64;
    for a in 0..k {
        for b in (a + 1)..k {
            hi = hi.max((greedy[b] - greedy[a]) / c[(a, b)]);
        }
    }
    let scale = c.max();
    let feasible = |s: f64| -> Option<Vec<f64>> {
        let mut d = DMatrix::from_fn(k, k, |u, v| {
            if u == v {
                0.0
            } else if u < v {
                s * c[(u, v)]
            } else {
                -c[(u, v)]
            }
        });
        for m in 0..k {
            for u in 0..k {
                for v in 0..k {
                    let via = d[(u, m)] + d[(m, v)];
                    if via < d[(u, v)] {
                        d[(u, v)] = via;
                    }
                }
            }
        }
        if (0..k).any(|u| d[(u, u)] < -1e-12 * scale) {
            return None;
        }
        Some((0..k).map(|v| (0..k).map(|u| d[(u, v)]).fold(0.0, f64::min)).collect())
    };
    let mut coords = greedy;
    if hi > lo * (1.0 + 1e-12) {
        while hi - lo > 1e-12 * hi {
            let mid = 0.5 * (lo + hi);
            match feasible(mid) {
                Some(x) => {
                    hi = mid;
                    coords = x;
                }
                None => lo = mid,
            }
        }
    }
    let mut placed = vec![0.0; space.len()];
    let base = coords[0];
    for (pos, &pt) in order.iter().enumerate() {
        placed[pt] = coords[pos] - base;
    }
    Some((hi, placed))
}

fn embed_order(space: &FiniteMetricSpace, order: &[usize]) -> Result<LineEmbedding> {
    let (_, coords) = order_distortion(space, order, f64::INFINITY).expect("no pruning bound");
    LineEmbedding::measure(space, coords)
}

/// Classical MDS order followed by exact gap optimization and a swap /
/// reinsertion local search over orders.
pub fn embed_line_heuristic(space: &FiniteMetricSpace) -> Result<LineEmbedding> {
    let k = space.len();
    if k <= 2 {
        return LineEmbedding::measure(space, (0..k).map(|i| if i == 0 { 0.0 } else { space.distance(0, 1) }).collect());
    }
    let mds = mds_coordinate(space)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mds[a].total_cmp(&mds[b]).then(a.cmp(&b)));
    let mut best = order_distortion(space, &order, f64::INFINITY).unwrap().0;
    for _ in 0..100 {
        let mut improved = false;
        'moves: for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                for insert in [false, true] {
                    if !insert && j < i {
                        continue;
                    }
                    let mut cand = order.clone();
                    if insert {
                        let p = cand.remove(i);
                        cand.insert(j, p);
                    } else {
                        cand.swap(i, j);
                    }
                    let bound = best * (1.0 - 1e-9);
                    if let Some((value, _)) = order_distortion(space, &cand, bound) {
                        if value < bound {
                            best = value;
                            order = cand;
                            improved = true;
                            break 'moves;
                        }
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    let emb = embed_order(space, &order)?;
    if !emb.is_injective() {
        return Err(Error::DegenerateEmbedding("refined coordinates collide".into()));
    }
    Ok(emb)
}

/// Top eigenvector of the double-centred squared-distance matrix.
pub fn mds_coordinate(space: &FiniteMetricSpace) -> Result<Vec<f64>> {
    let k = space.len();
    let d2 = space.matrix().map(|d| d * d);
    let row_means: Vec<f64> = (0..k).map(|i| d2.row(i).sum() / k as f64).collect();
    let grand = row_means.iter().sum::<f64>() / k as f64;
    let b = DMatrix::from_fn(k, k, |i, j| -0.5 * (d2[(i, j)] - row_means[i] - row_means[j] + grand));
    let eig = SymmetricEigen::new(b);
    let top = eig.eigenvalues.imax();
    let lambda = eig.eigenvalues[top];
    if !(lambda > 0.0) {
        return Err(Error::DegenerateEmbedding("no positive MDS eigenvalue".into()));
    }
    let mut v: Vec<f64> = eig.eigenvectors.column(top).iter().map(|x| x * lambda.sqrt()).collect();
    // Sign convention: first nonzero coordinate negative.
    if v.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x > 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    perturb_ties(&mut v, space.min_distance(), 0x5eed);
    Ok(v)
}

pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exact minimum-distortion line embedding by enumerating every order
/// (up to reflection) and optimizing gaps exactly for each.
pub fn embed_line_bruteforce(space: &FiniteMetricSpace) -> Result<LineEmbedding> {
    let k = space.len();
    if k > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge { what: "brute-force embedding points", size: k, limit: BRUTE_FORCE_LIMIT });
    }
    if k <= 2 {
        return embed_line_heuristic(space);
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = f64::INFINITY;
    let mut best_order = perm.clone();
    loop {
        if perm[0] < perm[k - 1] {
            if let Some((value, _)) = order_distortion(space, &perm, best) {
                if value < best {
                    best = value;
                    best_order = perm.clone();
                }
            }
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    embed_order(space, &best_order)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| p[i] < p[i + 1]) else {
        return false;
    };
    let j = (i + 1..n).rev().find(|&j| p[j] > p[i]).unwrap();
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

/// Both sides of the change-of-variables bounds between `𝒲_α` and `𝒲₁` of
/// the pushforwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub w_alpha: f64,
    pub w_line: f64,
    pub r: f64,
    pub s: f64,
    /// `R⁻¹·𝒲₁ − 𝒲_α`
    pub lower_slack: f64,
    /// `S·𝒲_α − 𝒲₁`
    pub upper_slack: f64,
}

impl SandwichReport {
    pub fn holds(&self, tolerance: f64) -> bool {
        self.lower_slack >= -tolerance && self.upper_slack >= -tolerance
    }
}

pub const SANDWICH_TOLERANCE: f64 = 1e-8;

/// `emb` must embed the α-snowflake of `space`.
pub fn sandwich_check(
    space: &FiniteMetricSpace,
    alpha: f64,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    emb: &LineEmbedding,
) -> Result<SandwichReport> {
    if !emb.is_injective() {
        return Err(Error::DegenerateEmbedding("embedding is not injective".into()));
    }
    let w_alpha = wasserstein_alpha(mu, nu, space, alpha)?;
    let w_line = wasserstein_1d(emb.coords(), mu.weights(), emb.coords(), nu.weights())?;
    let report = SandwichReport {
        w_alpha,
        w_line,
        r: emb.r(),
        s: emb.s(),
        lower_slack: w_line / emb.r() - w_alpha,
        upper_slack: emb.s() * w_alpha - w_line,
    };
    if !report.holds(SANDWICH_TOLERANCE) {
        return Err(Error::CheckFailed(format!(
            "sandwich violated: lower slack {}, upper slack {}",
            report.lower_slack, report.upper_slack
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::build_tree;
    use crate::graph_metric::{build_loop_graph, principal_submatrix, HittingMethod, MarkovMetrics};
    use crate::stats::{envelope_non_increasing, median};
    use approx::assert_abs_diff_eq;

    fn loop_metric(nu: usize, h: usize) -> (FiniteMetricSpace, Vec<usize>) {
        let g = build_loop_graph(&build_tree(nu, h).unwrap());
        let m = MarkovMetrics::compute(&g, HittingMethod::Exact).unwrap();
        let gamma = g.roles().unwrap().internal();
        (FiniteMetricSpace::new(m.metric, None).unwrap(), gamma)
    }

    fn gamma_space(nu: usize, h: usize) -> FiniteMetricSpace {
        let (full, gamma) = loop_metric(nu, h);
        FiniteMetricSpace::new(principal_submatrix(full.matrix(), &gamma), None).unwrap()
    }

    fn two_point(d: f64) -> FiniteMetricSpace {
        FiniteMetricSpace::new(DMatrix::from_row_slice(2, 2, &[0.0, d, d, 0.0]), None).unwrap()
    }

    fn random_metric(k: usize, rng: &mut ChaCha8Rng) -> FiniteMetricSpace {
        // Shortest paths over random positive weights.
        let mut d = DMatrix::<f64>::from_fn(k, k, |i, j| if i == j { 0.0 } else { rng.gen_range(0.5..3.0) });
        d = (&d + d.transpose()) * 0.5;
        for m in 0..k {
            for i in 0..k {
                for j in 0..k {
                    d[(i, j)] = d[(i, j)].min(d[(i, m)] + d[(m, j)]);
                }
            }
        }
        FiniteMetricSpace::new(d, None).unwrap()
    }

    #[test]
    fn space_validation() {
        assert!(FiniteMetricSpace::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]), None).is_err());
        assert!(FiniteMetricSpace::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]), None).is_err());
        let bad_triangle = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 5.0, 1.0, 0.0, 1.0, 5.0, 1.0, 0.0]);
        assert!(FiniteMetricSpace::new(bad_triangle, None).is_err());
        assert!(FiniteMetricSpace::line(&[0.0, 0.0]).is_err());
        assert!(DiscreteMeasure::new(vec![0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::new(vec![-0.1, 1.1]).is_err());
        assert!(serde_json::from_str::<DiscreteMeasure>("[0.2,0.2]").is_err());
    }

    #[test]
    fn snowflake_examples() {
        let sp = two_point(4.0);
        assert_eq!(snowflake(&sp, 1.0).unwrap(), sp);
        assert_eq!(snowflake(&sp, 0.5).unwrap().distance(0, 1), 2.0);
        assert!(snowflake(&sp, 0.0).is_err());
        assert!(snowflake(&sp, 1.5).is_err());
    }

    /// Smallest `(d(i,m) + d(m,j))/d(i,j)` over distinct triples.
    fn tightest_triangle(s: &FiniteMetricSpace) -> f64 {
        let k = s.len();
        let mut best = f64::INFINITY;
        for i in 0..k {
            for j in 0..k {
                for m in 0..k {
                    if i != j && j != m && i != m {
                        best = best.min((s.distance(i, m) + s.distance(m, j)) / s.distance(i, j));
                    }
                }
            }
        }
        best
    }

    #[test]
    fn snowflake_relative_slack_grows() {
        let (sp, _) = loop_metric(2, 2);
        let base = tightest_triangle(&sp);
        assert!(base >= 1.0);
        let mut prev = base;
        for alpha in [0.75, 0.5, 0.25] {
            let t = tightest_triangle(&snowflake(&sp, alpha).unwrap());
            assert!(t >= prev - 1e-12, "alpha={alpha}: {t} < {prev}");
            prev = t;
        }
    }

    #[test]
    fn wasserstein_examples() {
        let sp = two_point(4.0);
        let a = DiscreteMeasure::dirac(2, 0).unwrap();
        let b = DiscreteMeasure::dirac(2, 1).unwrap();
        let half = DiscreteMeasure::uniform(2).unwrap();
        assert_eq!(wasserstein_alpha(&a, &a, &sp, 0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(wasserstein_alpha(&a, &b, &sp, 0.5).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(wasserstein_alpha(&half, &a, &sp, 0.5).unwrap(), 1.0, epsilon = 1e-15);
        assert!(wasserstein_alpha(&a, &DiscreteMeasure::uniform(3).unwrap(), &sp, 0.5).is_err());
    }

    #[test]
    fn one_dimensional_examples() {
        assert_eq!(wasserstein_1d(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[0.0, 2.0], &[0.5, 0.5], &[0.0], &[1.0]).unwrap(), 1.0);
        assert!(wasserstein_1d(&[0.0], &[0.5, 0.5], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn flow_matches_cdf_on_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..200 {
            let k = rng.gen_range(2..=30);
            let mut pts: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
            pts.sort_by(f64::total_cmp);
            pts.dedup();
            let sp = FiniteMetricSpace::line(&pts).unwrap();
            let mu = DiscreteMeasure::random(pts.len(), &mut rng);
            let nu = DiscreteMeasure::random(pts.len(), &mut rng);
            let flow = wasserstein_alpha(&mu, &nu, &sp, 1.0).unwrap();
            let cdf = wasserstein_1d(&pts, mu.weights(), &pts, nu.weights()).unwrap();
            assert_abs_diff_eq!(flow, cdf, epsilon = 1e-9);
        }
    }

    #[test]
    fn plans_are_certified_by_holder_duals() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let (sp, _) = loop_metric(2, 2);
        for alpha in [0.25, 0.5, 1.0] {
            let cost = snowflake(&sp, alpha).unwrap();
            for _ in 0..50 {
                let mu = DiscreteMeasure::random(sp.len(), &mut rng);
                let nu = DiscreteMeasure::random(sp.len(), &mut rng);
                let plan = wasserstein_alpha_plan(&mu, &nu, &sp, alpha).unwrap();
                assert!(plan.dual_violation(cost.matrix()) <= 1e-12);
                assert_abs_diff_eq!(plan.dual_value(&mu, &nu), plan.cost, epsilon = 1e-10);
                let mut rows = vec![0.0; sp.len()];
                let mut cols = vec![0.0; sp.len()];
                for &(i, j, m) in &plan.entries {
                    rows[i] += m;
                    cols[j] += m;
                }
                for i in 0..sp.len() {
                    assert_abs_diff_eq!(rows[i], mu.weights()[i], epsilon = 1e-12);
                    assert_abs_diff_eq!(cols[i], nu.weights()[i], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn sparse_measures_and_csv() {
        let (sp, _) = loop_metric(2, 1);
        let mut w = vec![0.0; sp.len()];
        w[0] = 0.25;
        w[3] = 0.75;
        let mu = DiscreteMeasure::new(w).unwrap();
        let nu = DiscreteMeasure::dirac(sp.len(), 2).unwrap();
        let plan = wasserstein_alpha_plan(&mu, &nu, &sp, 0.5).unwrap();
        assert_eq!(plan.entries.len(), 2);
        let expected = 0.25 * sp.distance(0, 2).sqrt() + 0.75 * sp.distance(3, 2).sqrt();
        assert_abs_diff_eq!(plan.cost, expected, epsilon = 1e-14);
        let csv = plan.to_csv();
        assert!(csv.starts_with("i,j,mass\n0,2,2.5000000000000000e-1\n"));
    }

    #[test]
    fn wasserstein_is_a_metric_on_measures() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let (sp, _) = loop_metric(2, 2);
        for _ in 0..300 {
            let a = DiscreteMeasure::random(sp.len(), &mut rng);
            let b = DiscreteMeasure::random(sp.len(), &mut rng);
            let c = DiscreteMeasure::random(sp.len(), &mut rng);
            let ab = wasserstein_alpha(&a, &b, &sp, 0.5).unwrap();
            let ba = wasserstein_alpha(&b, &a, &sp, 0.5).unwrap();
            let bc = wasserstein_alpha(&b, &c, &sp, 0.5).unwrap();
            let ac = wasserstein_alpha(&a, &c, &sp, 0.5).unwrap();
            assert_abs_diff_eq!(ab, ba, epsilon = 1e-10);
            assert!(ac <= ab + bc + 1e-8);
            assert!(ab > 0.0);
            assert!(wasserstein_alpha(&a, &a, &sp, 0.5).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn arbitrary_metric_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..50 {
            let k = rng.gen_range(2..12);
            let sp = random_metric(k, &mut rng);
            let mu = DiscreteMeasure::random(k, &mut rng);
            let nu = DiscreteMeasure::random(k, &mut rng);
            let plan = wasserstein_alpha_plan(&mu, &nu, &sp, 0.75).unwrap();
            let cost = snowflake(&sp, 0.75).unwrap();
            assert!(plan.dual_violation(cost.matrix()) <= 1e-12);
            assert_abs_diff_eq!(plan.dual_value(&mu, &nu), plan.cost, epsilon = 1e-10);
        }
    }

    #[test]
    fn embedding_small_cases() {
        let two = two_point(3.0);
        assert_abs_diff_eq!(embed_line_heuristic(&two).unwrap().distortion(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(embed_line_bruteforce(&two).unwrap().distortion(), 1.0, epsilon = 1e-15);
        let line = FiniteMetricSpace::line(&[0.0, 1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(embed_line_heuristic(&line).unwrap().distortion(), 1.0, epsilon = 1e-9);
        let eq = FiniteMetricSpace::new(DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 }), None).unwrap();
        let brute = embed_line_bruteforce(&eq).unwrap();
        assert!(brute.distortion() <= 2.0 + 1e-3);
        assert!(brute.distortion() >= 2.0 - 1e-9);
        let single = FiniteMetricSpace::new(DMatrix::zeros(1, 1), None).unwrap();
        assert_eq!(embed_line_heuristic(&single).unwrap().distortion(), 1.0);
    }

    #[test]
    fn equilateral_four_points() {
        // Any order of n equidistant points needs distortion n − 1.
        let eq = FiniteMetricSpace::new(DMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1.0 }), None).unwrap();
        assert_abs_diff_eq!(embed_line_bruteforce(&eq).unwrap().distortion(), 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(embed_line_heuristic(&eq).unwrap().distortion(), 3.0, epsilon = 1e-9);
    }

    /// Reference search: random coordinates refined by coordinate steps.
    fn random_restart_distortion(space: &FiniteMetricSpace, restarts: usize, rng: &mut ChaCha8Rng) -> f64 {
        let k = space.len();
        let diam = space.diameter();
        let mut best = f64::INFINITY;
        for _ in 0..restarts {
            let mut x: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..diam)).collect();
            let mut cur = LineEmbedding::measure(space, x.clone()).unwrap().distortion();
            let mut step = diam / 4.0;
            while step > 1e-6 * diam {
                let mut moved = false;
                for i in 0..k {
                    for dir in [-1.0, 1.0] {
                        x[i] += dir * step;
                        let d = LineEmbedding::measure(space, x.clone()).unwrap().distortion();
                        if d < cur {
                            cur = d;
                            moved = true;
                        } else {
                            x[i] -= dir * step;
                        }
                    }
                }
                if !moved {
                    step *= 0.5;
                }
            }
            best = best.min(cur);
        }
        best
    }

    #[test]
    fn bruteforce_beats_random_restarts() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for k in 3..=6 {
            let sp = random_metric(k, &mut rng);
            let brute = embed_line_bruteforce(&sp).unwrap();
            let reference = random_restart_distortion(&sp, 30, &mut rng);
            assert!(brute.distortion() <= reference * (1.0 + 1e-9), "k={k}: {} vs {reference}", brute.distortion());
        }
    }

    #[test]
    fn heuristic_close_to_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let (full, _) = loop_metric(2, 2);
        let mut cases = vec![snowflake(&gamma_space(2, 2), 0.25).unwrap(), snowflake(&gamma_space(2, 3), 0.25).unwrap()];
        for _ in 0..4 {
            let mut idx: Vec<usize> = (0..full.len()).collect();
            for i in 0..8 {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(8);
            cases.push(snowflake(&full.restrict(&idx).unwrap(), 0.25).unwrap());
        }
        for sp in cases {
            let heur = embed_line_heuristic(&sp).unwrap();
            let brute = embed_line_bruteforce(&sp).unwrap();
            assert!(heur.distortion().is_finite());
            assert!(brute.distortion() <= heur.distortion() * (1.0 + 1e-9));
            assert!(heur.distortion() <= 1.1 * brute.distortion());
        }
        let full_emb = embed_line_heuristic(&snowflake(&full, 0.25).unwrap()).unwrap();
        assert!(full_emb.distortion().is_finite() && full_emb.is_injective());
    }

    #[test]
    fn bruteforce_rejects_large_spaces() {
        let sp = FiniteMetricSpace::line(&(0..9).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert!(matches!(embed_line_bruteforce(&sp), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn order_solver_meets_its_own_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for _ in 0..30 {
            let sp = random_metric(7, &mut rng);
            let mut order: Vec<usize> = (0..7).collect();
            for i in 0..7 {
                let j = rng.gen_range(i..7);
                order.swap(i, j);
            }
            let (value, coords) = order_distortion(&sp, &order, f64::INFINITY).unwrap();
            let emb = LineEmbedding::measure(&sp, coords).unwrap();
            assert!(emb.r() >= 1.0 - 1e-9);
            assert_abs_diff_eq!(emb.distortion(), value, epsilon = 1e-8 * value);
        }
    }

    #[test]
    fn tie_perturbation() {
        let mut x = vec![1.0, 1.0, 0.0, 1.0];
        perturb_ties(&mut x, 2.0, 9);
        let mut sorted = x.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(sorted.windows(2).all(|w| w[0] < w[1]));
        assert!(x.iter().zip([1.0, 1.0, 0.0, 1.0]).all(|(a, b)| (a - b).abs() <= 1e-8));
        let mut y = vec![1.0, 1.0, 0.0, 1.0];
        perturb_ties(&mut y, 2.0, 9);
        assert_eq!(x, y);
    }

    #[test]
    fn embedding_json() {
        let line = FiniteMetricSpace::line(&[0.0, 1.0, 3.0]).unwrap();
        let emb = embed_line_heuristic(&line).unwrap();
        let json = serde_json::to_string(&emb).unwrap();
        assert!(json.contains(r#""R":"#) && json.contains(r#""distortion":"#));
        assert_eq!(serde_json::from_str::<LineEmbedding>(&json).unwrap(), emb);
    }

    #[test]
    fn sandwich_on_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for h in [2, 3] {
            let sp = gamma_space(2, h);
            let emb = embed_line_heuristic(&snowflake(&sp, 0.5).unwrap()).unwrap();
            for _ in 0..100 {
                let mu = DiscreteMeasure::random(sp.len(), &mut rng);
                let nu = DiscreteMeasure::random(sp.len(), &mut rng);
                let rep = sandwich_check(&sp, 0.5, &mu, &nu, &emb).unwrap();
                assert!(rep.holds(1e-8));
            }
            let mu = DiscreteMeasure::uniform(sp.len()).unwrap();
            let rep = sandwich_check(&sp, 0.5, &mu, &mu, &emb).unwrap();
            assert_eq!((rep.w_alpha, rep.w_line), (0.0, 0.0));
        }
    }

    #[test]
    fn sandwich_isometric_case() {
        let pts = [0.0, 0.5, 2.0, 3.5];
        let sp = FiniteMetricSpace::line(&pts).unwrap();
        let emb = LineEmbedding::measure(&sp, pts.to_vec()).unwrap();
        assert_eq!((emb.r(), emb.s()), (1.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let mu = DiscreteMeasure::random(4, &mut rng);
        let nu = DiscreteMeasure::random(4, &mut rng);
        let rep = sandwich_check(&sp, 1.0, &mu, &nu, &emb).unwrap();
        assert_abs_diff_eq!(rep.w_alpha, rep.w_line, epsilon = 1e-12);
    }

    #[test]
    fn sandwich_detects_wrong_constants() {
        let sp = gamma_space(2, 3);
        let mut emb = embed_line_heuristic(&snowflake(&sp, 0.5).unwrap()).unwrap();
        emb.s = 0.5 * emb.r;
        let mu = DiscreteMeasure::dirac(sp.len(), 0).unwrap();
        let nu = DiscreteMeasure::dirac(sp.len(), 6).unwrap();
        assert!(matches!(sandwich_check(&sp, 0.5, &mu, &nu, &emb), Err(Error::CheckFailed(_))));
    }

    #[test]
    fn empirical_measure_concentrates() {
        let sp = gamma_space(2, 3);
        let mut base = ChaCha8Rng::seed_from_u64(59);
        let lambda = DiscreteMeasure::random(sp.len(), &mut base);
        let mut medians = Vec::new();
        for n in [16usize, 64, 256, 1024] {
            let scaled: Vec<f64> = (0..200u64)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(n as u64);
                    let emp = DiscreteMeasure::from_counts(&lambda.sample_counts(n, &mut rng)).unwrap();
                    wasserstein_alpha(&lambda, &emp, &sp, 0.5).unwrap() * (n as f64).sqrt()
                })
                .collect();
            medians.push(median(&scaled).unwrap());
        }
        assert!(envelope_non_increasing(&medians, 0.1), "{medians:?}");
    }

    #[test]
    fn sampling_counts_match_weights() {
        let mu = DiscreteMeasure::new(vec![0.0, 0.25, 0.75, 0.0]).unwrap();
        let counts = mu.sample_counts(40_000, &mut ChaCha8Rng::seed_from_u64(60));
        assert_eq!(counts[0] + counts[3], 0);
        assert!((counts[2] as f64 / 40_000.0 - 0.75).abs() < 0.01);
    }
}
