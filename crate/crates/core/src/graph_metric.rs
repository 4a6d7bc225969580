//! Markov-chain geometry of strongly connected digraphs.
//!
//! Covers the loop digraph built from a computation tree and its tape, the
//! random-walk transition matrix, the Perron vector, hitting probabilities
//! `Q[i][j] = P(τ_j < τ_i | X_0 = i)` with `τ_i = inf{n ≥ 1 : X_n = i}`, the
//! normalized matrix `E`, the metric `d = −log E` and the symmetrized
//! combinatorial Laplacian.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::TreeTopology;
use crate::error::{Error, Result};

/// Where each vertex of a loop digraph came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopRoles {
    pub topology: TreeTopology,
}

impl LoopRoles {
    /// Base node `v_i` for 1-based `i`.
    pub fn base(&self, i: usize) -> usize {
        assert!(i >= 1 && i <= self.topology.num_base());
        i - 1
    }

    /// Tape cell `T_i` for 0-based `i`.
    pub fn tape(&self, i: usize) -> usize {
        assert!(i < self.topology.num_base());
        self.topology.num_nodes() + i
    }

    pub fn root(&self) -> usize {
        self.topology.root()
    }

    /// Vertex indices of the computation nodes Γ, in topology order.
    pub fn internal(&self) -> Vec<usize> {
        self.topology.internal_nodes().collect()
    }

    pub fn label(&self, v: usize) -> String {
        let t = &self.topology;
        if v < t.num_base() {
            format!("v{}", v + 1)
        } else if v == t.root() {
            "r".to_string()
        } else if v < t.num_nodes() {
            format!("g{}", v - t.num_base())
        } else {
            format!("T{}", v - t.num_nodes())
        }
    }
}

/// A simple digraph on vertices `0..k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Digraph {
    k: usize,
    edges: Vec<(usize, usize)>,
    roles: Option<LoopRoles>,
}

impl Digraph {
    pub fn new(k: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a >= k || b >= k {
                return Err(Error::NotSimple(format!("edge ({a}, {b}) leaves vertex range 0..{k}")));
            }
            if a == b {
                return Err(Error::NotSimple(format!("self-loop at {a}")));
            }
            if !seen.insert((a, b)) {
                return Err(Error::NotSimple(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self { k, edges, roles: None })
    }

    /// Directed cycle 0 → 1 → … → k−1 → 0.
    pub fn cycle(k: usize) -> Result<Self> {
        Self::new(k, (0..k).map(|i| (i, (i + 1) % k)).collect())
    }

    pub fn num_vertices(&self) -> usize {
        self.k
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn roles(&self) -> Option<&LoopRoles> {
        self.roles.as_ref()
    }

    pub fn out_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for &(a, b) in &self.edges {
            out[a].push(b);
        }
        out
    }

    fn reaches_all(&self, adj: &[Vec<usize>]) -> bool {
        if self.k == 0 {
            return true;
        }
        let mut seen = vec![false; self.k];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Forward and reverse reachability from vertex 0.
    pub fn is_strongly_connected(&self) -> bool {
        let forward = self.out_neighbors();
        let mut reverse = vec![Vec::new(); self.k];
        for &(a, b) in &self.edges {
            reverse[b].push(a);
        }
        self.reaches_all(&forward) && self.reaches_all(&reverse)
    }

    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.k, self.k);
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
        }
        a
    }
}

/// The time-quotient loop digraph: tree edges toward the root, the feedback
/// edge `(r, T_0)`, the tape chain `T_i → T_{i+1}` and the read edges `T_i → v_{i+1}`.
///
/// Tree nodes keep their topology indices; `T_i` is vertex `num_nodes() + i`.
pub fn build_loop_graph(topology: &TreeTopology) -> Digraph {
    let n = topology.num_base();
    let tape0 = topology.num_nodes();
    let mut edges = topology.edges();
    edges.push((topology.root(), tape0));
    edges.extend((0..n - 1).map(|i| (tape0 + i, tape0 + i + 1)));
    edges.extend((0..n).map(|i| (tape0 + i, i)));
    let mut g = Digraph::new(tape0 + n, edges).expect("loop graph is simple by construction");
    g.roles = Some(LoopRoles { topology: *topology });
    g
}

/// Row-stochastic `D⁻¹A`.
pub fn transition_matrix(g: &Digraph) -> Result<DMatrix<f64>> {
    let adj = g.out_neighbors();
    let k = g.num_vertices();
    let mut p = DMatrix::zeros(k, k);
    for (i, outs) in adj.iter().enumerate() {
        if outs.is_empty() {
            return Err(Error::ZeroOutDegree(i));
        }
        let w = 1.0 / outs.len() as f64;
        for &j in outs {
            p[(i, j)] = w;
        }
    }
    Ok(p)
}

pub const PERRON_TOLERANCE: f64 = 1e-13;
pub const PERRON_MAX_ITERATIONS: usize = 1_000_000;

/// Stationary distribution by power iteration on the lazy chain `(I + P)/2`,
/// which has the same Perron vector and is aperiodic.
///
/// Stops when the ℓ¹ change of an iterate drops below `tolerance`.
pub fn perron_vector(p: &DMatrix<f64>, tolerance: f64) -> Result<DVector<f64>> {
    perron_vector_with_limit(p, tolerance, PERRON_MAX_ITERATIONS)
}

pub fn perron_vector_with_limit(
    p: &DMatrix<f64>,
    tolerance: f64,
    max_iterations: usize,
) -> Result<DVector<f64>> {
    let k = p.nrows();
    if p.ncols() != k {
        return Err(Error::DimensionMismatch { expected: k, actual: p.ncols() });
    }
    let pt = p.transpose();
    let mut phi = DVector::from_element(k, 1.0 / k as f64);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iterations {
        let mut next = (&pt * &phi + &phi) * 0.5;
        let s = next.sum();
        next /= s;
        residual = (&next - &phi).lp_norm(1);
        phi = next;
        if residual < tolerance {
            if phi.iter().any(|&x| x <= 0.0) {
                return Err(Error::CheckFailed("Perron vector has a non-positive entry".into()));
            }
            return Ok(phi);
        }
    }
    Err(Error::NoConvergence { iterations: max_iterations, residual })
}

/// Stationary distribution from a direct solve of `(Pᵀ − I)φ = 0, Σφ = 1`.
pub fn perron_vector_direct(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let k = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(k, k);
    let mut b = DVector::zeros(k);
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    b[k - 1] = 1.0;
    a.lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("stationarity system (reducible chain?)".into()))
}

/// How hitting probabilities were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HittingMethod {
    Exact,
    MonteCarlo { trials: usize, seed: u64 },
}

/// Hitting probability matrix plus Monte Carlo error bars when sampled.
#[derive(Debug, Clone)]
pub struct HittingMatrix {
    pub q: DMatrix<f64>,
    pub provenance: Provenance,
    /// Binomial standard error per entry (Monte Carlo only).
    pub std_err: Option<DMatrix<f64>>,
    pub trials: Option<usize>,
}

pub fn hitting_probabilities(p: &DMatrix<f64>, method: HittingMethod) -> Result<HittingMatrix> {
    match method {
        HittingMethod::Exact => Ok(HittingMatrix {
            q: hitting_exact(p)?,
            provenance: Provenance::Exact,
            std_err: None,
            trials: None,
        }),
        HittingMethod::MonteCarlo { trials, seed } => {
            let (q, se) = hitting_monte_carlo(p, trials, seed)?;
            Ok(HittingMatrix {
                q,
                provenance: Provenance::MonteCarlo,
                std_err: Some(se),
                trials: Some(trials),
            })
        }
    }
}

/// Exact hitting probabilities, one Green's-function solve per source.
///
/// For source `i`, let `G = (I − P_{−i})⁻¹` be the Green's function of the
/// chain killed on entering `i`. The harmonic function with `u(i) = 0`,
/// `u(j) = 1` is `u(x) = G(x, j)/G(j, j)`, so
/// `Q[i][j] = Σ_y P(i, y) G(y, j) / G(j, j)`. The diagonal is stored as 0.
pub fn hitting_exact(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = p.nrows();
    let rows: Vec<Result<Vec<f64>>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let others: Vec<usize> = (0..k).filter(|&x| x != i).collect();
            let n = others.len();
            let mut m = DMatrix::<f64>::identity(n, n);
            for (a, &x) in others.iter().enumerate() {
                for (b, &y) in others.iter().enumerate() {
                    m[(a, b)] -= p[(x, y)];
                }
            }
            let g = m
                .lu()
                .try_inverse()
                .ok_or_else(|| Error::Singular(format!("killed chain at source {i}")))?;
            let mut row = vec![0.0; k];
            for (b, &j) in others.iter().enumerate() {
                let flow: f64 = others.iter().enumerate().map(|(a, &y)| p[(i, y)] * g[(a, b)]).sum();
                row[j] = flow / g[(b, b)];
            }
            Ok(row)
        })
        .collect();
    let mut q = DMatrix::zeros(k, k);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row?.into_iter().enumerate() {
            q[(i, j)] = v;
        }
    }
    Ok(q)
}

/// `Q[i][j]` from the Dirichlet problem for the single pair `(i, j)`:
/// `u(x) = Σ_y P(x, y)u(y)` off `{i, j}`, `u(j) = 1`, `u(i) = 0`.
pub fn hitting_pair(p: &DMatrix<f64>, i: usize, j: usize) -> Result<f64> {
    let k = p.nrows();
    if i == j {
        return Ok(0.0);
    }
    let others: Vec<usize> = (0..k).filter(|&x| x != i && x != j).collect();
    let n = others.len();
    let mut u = vec![0.0; k];
    u[j] = 1.0;
    if n > 0 {
        let mut m = DMatrix::identity(n, n);
        let mut b = DVector::zeros(n);
        for (a, &x) in others.iter().enumerate() {
            for (c, &y) in others.iter().enumerate() {
                m[(a, c)] -= p[(x, y)];
            }
            b[a] = p[(x, j)];
        }
        let sol = m
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Singular(format!("Dirichlet system for pair ({i}, {j})")))?;
        for (a, &x) in others.iter().enumerate() {
            u[x] = sol[a];
        }
    }
    Ok((0..k).map(|y| p[(i, y)] * u[y]).sum())
}

fn cumulative_rows(p: &DMatrix<f64>) -> Vec<Vec<(f64, usize)>> {
    (0..p.nrows())
        .map(|i| {
            let mut acc = 0.0;
            let mut row: Vec<(f64, usize)> = (0..p.ncols())
                .filter(|&j| p[(i, j)] > 0.0)
                .map(|j| {
                    acc += p[(i, j)];
                    (acc, j)
                })
                .collect();
            if let Some(last) = row.last_mut() {
                last.0 = f64::INFINITY;
            }
            row
        })
        .collect()
}

/// Monte Carlo hitting probabilities; each ordered pair gets its own RNG
/// stream derived from `seed`, so results do not depend on scheduling.
pub fn hitting_monte_carlo(
    p: &DMatrix<f64>,
    trials: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if trials == 0 {
        return Err(Error::InvalidParameter("Monte Carlo needs at least one trial".into()));
    }
    let k = p.nrows();
    let cum = cumulative_rows(p);
    if let Some(i) = cum.iter().position(Vec::is_empty) {
        return Err(Error::ZeroOutDegree(i));
    }
    let estimates: Vec<f64> = (0..k * k)
        .into_par_iter()
        .map(|pair| {
            let (i, j) = (pair / k, pair % k);
            if i == j {
                return 0.0;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(pair as u64);
            let mut hits = 0usize;
            for _ in 0..trials {
                let mut x = i;
                loop {
                    let u: f64 = rng.gen();
                    x = cum[x].iter().find(|&&(c, _)| u < c).unwrap().1;
                    if x == j {
                        hits += 1;
                        break;
                    }
                    if x == i {
                        break;
                    }
                }
            }
            hits as f64 / trials as f64
        })
        .collect();
    let q = DMatrix::from_row_slice(k, k, &estimates);
    let se = q.map(|v| (v * (1.0 - v) / trials as f64).sqrt());
    Ok((q, se))
}

pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// `E[i][j] = φ(i)Q[i][j]` off the diagonal, `E[i][i] = 1`.
///
/// The two expressions `φ(i)Q[i][j]` and `φ(j)Q[j][i]` must agree within
/// `tolerance`; the stored value is their average so `E` is exactly symmetric.
pub fn normalized_hitting(phi: &DVector<f64>, q: &DMatrix<f64>, tolerance: f64) -> Result<DMatrix<f64>> {
    let k = phi.len();
    if q.nrows() != k || q.ncols() != k {
        return Err(Error::DimensionMismatch { expected: k, actual: q.nrows() });
    }
    let mut e = DMatrix::identity(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let a = phi[i] * q[(i, j)];
            let b = phi[j] * q[(j, i)];
            let deviation = (a - b).abs();
            if deviation > tolerance {
                return Err(Error::Asymmetric { i, j, deviation });
            }
            let v = 0.5 * (a + b);
            e[(i, j)] = v;
            e[(j, i)] = v;
        }
    }
    Ok(e)
}

/// Largest `|φ(i)Q[i][j] − φ(j)Q[j][i]|` over ordered pairs.
pub fn detailed_balance_defect(phi: &DVector<f64>, q: &DMatrix<f64>) -> f64 {
    let k = phi.len();
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                worst = worst.max((phi[i] * q[(i, j)] - phi[j] * q[(j, i)]).abs());
            }
        }
    }
    worst
}

/// `d = −log E`, zero on the diagonal.
pub fn hitting_metric(e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = e.nrows();
    let mut d = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let v = e[(i, j)];
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::NotMetric(format!("E[{i}][{j}] = {v} is outside (0, 1]")));
            }
            d[(i, j)] = -v.ln();
        }
    }
    Ok(d)
}

/// `Δ = Φ − (ΦP + PᵀΦ)/2`.
pub fn laplacian(p: &DMatrix<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
    let phi_mat = DMatrix::from_diagonal(phi);
    let phi_p = &phi_mat * p;
    let sym = (&phi_p + phi_p.transpose()) * 0.5;
    phi_mat - sym
}

/// Induced ℓ∞ operator norm: the largest absolute row sum.
pub fn op_norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn principal_submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

/// The Laplacian restricted to the computation nodes (principal submatrix).
pub fn induced_laplacian_on_gamma(laplacian: &DMatrix<f64>, gamma: &[usize]) -> DMatrix<f64> {
    principal_submatrix(laplacian, gamma)
}

/// Largest off-diagonal entry and the first pair `(i, j)`, `i < j`, attaining it.
pub fn diameter(d: &DMatrix<f64>) -> (f64, (usize, usize)) {
    let k = d.nrows();
    let mut best = (0.0, (0, 0));
    for i in 0..k {
        for j in (i + 1)..k {
            let v = d[(i, j)].max(d[(j, i)]);
            if v > best.0 {
                best = (v, (i, j));
            }
        }
    }
    best
}

/// Smallest off-diagonal entry (infinite for a single point).
pub fn min_distance(d: &DMatrix<f64>) -> f64 {
    let k = d.nrows();
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                best = best.min(d[(i, j)]);
            }
        }
    }
    best
}

pub const EXHAUSTIVE_TRIANGLE_LIMIT: usize = 500;
const SAMPLED_TRIPLES: usize = 1_000_000;

/// Minimum of `d(i,l) + d(l,j) − d(i,j)` over triples; exhaustive up to
/// 500 points, 10⁶ seeded random triples beyond.
pub fn triangle_slack(d: &DMatrix<f64>) -> f64 {
    let k = d.nrows();
    let slack = |i: usize, j: usize, l: usize| d[(i, l)] + d[(l, j)] - d[(i, j)];
    if k <= EXHAUSTIVE_TRIANGLE_LIMIT {
        (0..k)
            .into_par_iter()
            .map(|i| {
                let mut worst = f64::INFINITY;
                for j in 0..k {
                    for l in 0..k {
                        worst = worst.min(slack(i, j, l));
                    }
                }
                worst
            })
            .reduce(|| f64::INFINITY, f64::min)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7121);
        (0..SAMPLED_TRIPLES)
            .map(|_| slack(rng.gen_range(0..k), rng.gen_range(0..k), rng.gen_range(0..k)))
            .fold(f64::INFINITY, f64::min)
    }
}

pub const DOUBLING_LIMIT: usize = 64;

/// Doubling constant of a finite metric: the largest, over balls `B(x, r)`, of
/// the fewest balls of radius `r/2` (centred anywhere in the space) covering it.
///
/// Ball contents only change at the distances `d(x, ·)`, so those radii suffice.
/// The cover number is found exactly by branch and bound on bitmasks.
pub fn doubling_constant(d: &DMatrix<f64>) -> Result<usize> {
    let k = d.nrows();
    if k > DOUBLING_LIMIT {
        return Err(Error::TooLarge { what: "doubling-constant space", size: k, limit: DOUBLING_LIMIT });
    }
    if k == 0 {
        return Ok(0);
    }
    let within = |c: usize, x: usize, r: f64| d[(c, x)] <= r * (1.0 + 1e-12);
    let ball = |c: usize, r: f64| -> u64 {
        (0..k).filter(|&x| within(c, x, r)).fold(0u64, |m, x| m | 1u64 << x)
    };
    let mut worst = 1;
    for x in 0..k {
        let mut radii: Vec<f64> = (0..k).filter(|&y| y != x).map(|y| d[(x, y)]).collect();
        radii.sort_by(f64::total_cmp);
        radii.dedup();
        for r in radii {
            let target = ball(x, r);
            let mut cover: Vec<u64> = (0..k).map(|c| ball(c, r / 2.0) & target).filter(|&m| m != 0).collect();
            cover.sort_unstable_by(|a, b| b.count_ones().cmp(&a.count_ones()));
            cover.dedup();
            let mut best = target.count_ones() as usize;
            min_cover(target, &cover, 0, &mut best);
            worst = worst.max(best);
        }
    }
    Ok(worst)
}

fn min_cover(uncovered: u64, sets: &[u64], used: usize, best: &mut usize) {
    if uncovered == 0 {
        *best = (*best).min(used);
        return;
    }
    if used + 1 >= *best {
        return;
    }
    let pivot = uncovered & uncovered.wrapping_neg();
    for &s in sets.iter().filter(|&&s| s & pivot != 0) {
        min_cover(uncovered & !s, sets, used + 1, best);
    }
}

/// All Markov-metric quantities of a strongly connected digraph.
#[derive(Debug, Clone)]
pub struct MarkovMetrics {
    pub transition: DMatrix<f64>,
    pub perron: DVector<f64>,
    pub hitting: HittingMatrix,
    pub normalized: DMatrix<f64>,
    pub metric: DMatrix<f64>,
    pub laplacian: DMatrix<f64>,
}

impl MarkovMetrics {
    pub fn compute(g: &Digraph, method: HittingMethod) -> Result<Self> {
        if !g.is_strongly_connected() {
            return Err(Error::InvalidParameter("digraph is not strongly connected".into()));
        }
        let transition = transition_matrix(g)?;
        let perron = perron_vector(&transition, PERRON_TOLERANCE)?;
        let hitting = hitting_probabilities(&transition, method)?;
        let tolerance = match (&hitting.provenance, &hitting.std_err) {
            (Provenance::MonteCarlo, Some(se)) => 6.0 * se.max() + SYMMETRY_TOLERANCE,
            _ => SYMMETRY_TOLERANCE,
        };
        let normalized = normalized_hitting(&perron, &hitting.q, tolerance)?;
        let metric = hitting_metric(&normalized)?;
        let laplacian = laplacian(&transition, &perron);
        Ok(Self { transition, perron, hitting, normalized, metric, laplacian })
    }

    pub fn provenance(&self) -> Provenance {
        self.hitting.provenance
    }
}

/// Closed-form predictions for the loop digraph of a perfect ν-ary tree.
///
/// With `n = ν^h`: `φ(r) = 1/(3 − 2^{1−n} + h)`, `φ(T_0) = φ(r)`,
/// `φ(T_i) = φ(v_i) = φ(r)/2^i` for `1 ≤ i ≤ n−1`, `φ(v_n) = φ(r)/2^{n−1}`,
/// and every internal node carries the sum of its children.
///
/// One downward pass from the root ends at exactly one base node, `v_l`
/// with probability `p_l` ([`LoopOracle::single_pass_mass`]). A walk from
/// `v_i` climbs back to the root and repeats passes until it lands on `v_i`
/// or `v_j`, so `Q(v_i, v_j) = p_j / (p_i + p_j)`.
#[derive(Debug, Clone)]
pub struct LoopOracle {
    roles: LoopRoles,
}

impl LoopOracle {
    pub fn new(topology: TreeTopology) -> Self {
        Self { roles: LoopRoles { topology } }
    }

    fn n(&self) -> usize {
        self.roles.topology.num_base()
    }

    pub fn roles(&self) -> &LoopRoles {
        &self.roles
    }

    pub fn phi_root(&self) -> f64 {
        let n = self.n() as i32;
        let h = self.roles.topology.height() as f64;
        1.0 / (3.0 - 2f64.powi(1 - n) + h)
    }

    /// Predicted Perron vector in the loop-graph vertex layout.
    pub fn perron(&self) -> DVector<f64> {
        let t = &self.roles.topology;
        let n = self.n();
        let pr = self.phi_root();
        let mut phi = DVector::zeros(t.num_nodes() + n);
        for i in 1..=n {
            let e = if i < n { i } else { n - 1 };
            phi[self.roles.base(i)] = pr / 2f64.powi(e as i32);
        }
        for v in t.internal_nodes() {
            phi[v] = t.children(v).map(|c| phi[c]).sum();
        }
        for i in 0..n {
            phi[self.roles.tape(i)] = pr / 2f64.powi(i as i32);
        }
        phi
    }

    /// Probability that a single pass from the root ends at base node `v_l` (1-based).
    pub fn single_pass_mass(&self, l: usize) -> f64 {
        let n = self.n();
        assert!(l >= 1 && l <= n);
        let e = if l < n { l } else { n - 1 };
        0.5f64.powi(e as i32)
    }

    /// `Q(v_i, v_j)` for 1-based base indices.
    pub fn q_base(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (pi, pj) = (self.single_pass_mass(i), self.single_pass_mass(j));
        pj / (pi + pj)
    }

    /// `Q(T_i, T_j)` for 0-based tape indices: certain for `j < i`, since every
    /// route from the root to `T_i` passes `T_j`; `2^{−(j−i)}` for `j > i`.
    pub fn q_tape(&self, i: usize, j: usize) -> f64 {
        match j.cmp(&i) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => 1.0,
            std::cmp::Ordering::Greater => 0.5f64.powi((j - i) as i32),
        }
    }

    pub fn e_base(&self, i: usize, j: usize) -> f64 {
        self.perron()[self.roles.base(i)] * self.q_base(i, j)
    }

    /// `E(v_{n−1}, v_n)` and `E(T_{n−1}, T_{n−2})`, the two extreme pairs
    /// along the base row and the tape chain.
    pub fn diameter_candidates(&self) -> [(f64, (usize, usize)); 2] {
        let n = self.n();
        let phi = self.perron();
        let base = (self.roles.base(n - 1), self.roles.base(n));
        let tape = (self.roles.tape(n - 1), self.roles.tape(n - 2));
        [
            (phi[base.0] * self.q_base(n - 1, n), base),
            (phi[tape.0] * self.q_tape(n - 1, n - 2), tape),
        ]
    }

    /// Lower bound `ν^{l−1}/2^{n−2}·φ(r)` and upper bound
    /// `min{(1 − 2^{−ν})ν^{l−1}, 1}·φ(r)` for computation layer `l ∈ 1..h−1`.
    pub fn layer_bounds(&self, level: usize) -> (f64, f64) {
        let nu = self.roles.topology.arity() as f64;
        let pr = self.phi_root();
        let scale = nu.powi(level as i32 - 1);
        let lower = scale / 2f64.powi(self.n() as i32 - 2) * pr;
        let upper = ((1.0 - 0.5f64.powi(nu as i32)) * scale).min(1.0) * pr;
        (lower, upper)
    }
}
