//! Reasoning probes and the GCN hypothesis class on the computation nodes.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aitchison::{aitchison_distance, ilr_inverse, Composition};
use crate::circuit::{GateConfiguration, TreeTopology};
use crate::error::{Error, Result};
use crate::graph_metric::op_norm_inf;

/// The noisy gate descriptor `Q_η`.
#[derive(Debug, Clone)]
pub struct Probe {
    eta: f64,
    m: usize,
    topology: TreeTopology,
    config: GateConfiguration,
}

impl Probe {
    pub fn new(eta: f64, m: usize, topology: TreeTopology, config: GateConfiguration) -> Result<Self> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::InvalidParameter(format!("certainty must lie in (0, 1), got {eta}")));
        }
        if m < 2 {
            return Err(Error::InvalidParameter(format!("gate count must be >= 2, got {m}")));
        }
        if config.as_slice().len() != topology.num_internal() {
            return Err(Error::DimensionMismatch {
                expected: topology.num_internal(),
                actual: config.as_slice().len(),
            });
        }
        if config.as_slice().iter().any(|&g| g >= m) {
            return Err(Error::InvalidParameter("configuration references a gate outside [m]".into()));
        }
        Ok(Self { eta, m, topology, config })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn gate_count(&self) -> usize {
        self.m
    }

    /// Probe output at tree vertex `vertex`, which must be a computation node.
    pub fn output(&self, vertex: usize) -> Result<Composition> {
        if !self.topology.is_internal(vertex) {
            return Err(Error::InvalidParameter(format!("vertex {vertex} is not a computation node")));
        }
        Ok(self.output_at(vertex - self.topology.num_base()))
    }

    /// Probe output at position `pos` of Γ.
    pub fn output_at(&self, pos: usize) -> Composition {
        probe_vector(self.eta, self.m, self.config.gate_at(pos))
    }

    /// Outputs for all of Γ, in topology order.
    pub fn outputs(&self) -> Vec<Composition> {
        (0..self.topology.num_internal()).map(|pos| self.output_at(pos)).collect()
    }
}

/// `η` on the true gate, `(1 − η)/(m − 1)` elsewhere.
pub fn probe_vector(eta: f64, m: usize, gate: usize) -> Composition {
    let off = (1.0 - eta) / (m - 1) as f64;
    let parts = (0..m).map(|i| if i == gate { eta } else { off }).collect();
    Composition::closure(parts).expect("probe parts are positive")
}

/// Largest Aitchison distance between two probe outputs,
/// `√2·|log(η(m − 1)/(1 − η))|`.
pub fn probe_complexity(eta: f64, m: usize) -> f64 {
    2f64.sqrt() * (eta * (m - 1) as f64 / (1.0 - eta)).ln().abs()
}

/// [`probe_complexity`] by enumerating gate pairs.
pub fn probe_complexity_bruteforce(eta: f64, m: usize) -> f64 {
    let outs: Vec<Composition> = (0..m).map(|g| probe_vector(eta, m, g)).collect();
    let mut best = 0.0f64;
    for a in &outs {
        for b in &outs {
            best = best.max(aitchison_distance(a, b).unwrap());
        }
    }
    best
}

/// 1-Lipschitz activations with `σ(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Self::Relu => x.max(0.0),
            Self::Tanh => x.tanh(),
            Self::Identity => x,
            Self::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// `σ(cx) = cσ(x)` for `c ≥ 0`.
    pub fn is_positively_homogeneous(&self) -> bool {
        !matches!(self, Self::Tanh)
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::LeakyRelu { slope } = *self {
            if !(0.0..=1.0).contains(&slope) {
                return Err(Error::InvalidParameter(format!("leaky slope {slope} is not in [0, 1]")));
            }
        }
        Ok(())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Unknown { kind: "activation", name: other.to_string() }),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Relu => f.write_str("relu"),
            Self::Tanh => f.write_str("tanh"),
            Self::Identity => f.write_str("identity"),
            Self::LeakyRelu { slope } => write!(f, "leaky-relu({slope})"),
        }
    }
}

/// Largest `|σ(a) − σ(b)|/|a − b|` over a dense grid on `[−range, range]`.
pub fn sampled_lipschitz(f: impl Fn(f64) -> f64, range: f64, samples: usize) -> f64 {
    let step = 2.0 * range / samples as f64;
    (0..samples)
        .map(|i| {
            let a = -range + i as f64 * step;
            ((f(a + step) - f(a)) / step).abs()
        })
        .fold(0.0, f64::max)
}

/// A `p`-hop GCN with `L` layers, widths `d_0 = 1, …, d_L = m − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnHypothesis {
    hops: usize,
    dims: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    budgets: Vec<f64>,
    activation: Activation,
}

impl GcnHypothesis {
    pub fn new(
        hops: usize,
        weights: Vec<DMatrix<f64>>,
        budgets: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("a GCN needs at least one layer".into()));
        }
        if hops < 1 {
            return Err(Error::InvalidParameter("hop count must be >= 1".into()));
        }
        if budgets.len() != weights.len() {
            return Err(Error::DimensionMismatch { expected: weights.len(), actual: budgets.len() });
        }
        activation.validate()?;
        let mut dims = vec![weights[0].ncols()];
        for (l, w) in weights.iter().enumerate() {
            if w.ncols() != *dims.last().unwrap() {
                return Err(Error::DimensionMismatch { expected: *dims.last().unwrap(), actual: w.ncols() });
            }
            dims.push(w.nrows());
            let norm = op_norm_inf(w);
            if !(budgets[l] > 0.0) {
                return Err(Error::InvalidParameter(format!("budget of layer {} must be positive", l + 1)));
            }
            if norm > budgets[l] {
                return Err(Error::BudgetExceeded { layer: l + 1, norm, budget: budgets[l] });
            }
        }
        if dims[0] != 1 {
            return Err(Error::DimensionMismatch { expected: 1, actual: dims[0] });
        }
        Ok(Self { hops, dims, weights, budgets, activation })
    }

    /// All-zero weights.
    pub fn zero(depth: usize, hops: usize, dims: &[usize], budgets: Vec<f64>, activation: Activation) -> Result<Self> {
        if dims.len() != depth + 1 {
            return Err(Error::DimensionMismatch { expected: depth + 1, actual: dims.len() });
        }
        let weights = dims.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect();
        Self::new(hops, weights, budgets, activation)
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn budgets(&self) -> &[f64] {
        &self.budgets
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Same architecture with every weight matrix multiplied by `c ∈ (0, 1]`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.hops, self.weights.iter().map(|w| w * c).collect(), self.budgets.clone(), self.activation)
    }
}

#[derive(Serialize, Deserialize)]
struct HypothesisRecord {
    #[serde(rename = "L")]
    depth: usize,
    p: usize,
    dims: Vec<usize>,
    beta: Vec<f64>,
    activation: Activation,
    /// One row-major array per layer.
    weights: Vec<Vec<f64>>,
}

impl Serialize for GcnHypothesis {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        HypothesisRecord {
            depth: self.depth(),
            p: self.hops,
            dims: self.dims.clone(),
            beta: self.budgets.clone(),
            activation: self.activation,
            weights: self
                .weights
                .iter()
                .map(|w| w.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect())
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GcnHypothesis {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = HypothesisRecord::deserialize(d)?;
        if rec.dims.len() != rec.depth + 1 || rec.weights.len() != rec.depth {
            return Err(D::Error::custom("dims/weights do not match L"));
        }
        let weights = rec
            .weights
            .iter()
            .enumerate()
            .map(|(l, w)| {
                let (rows, cols) = (rec.dims[l + 1], rec.dims[l]);
                if w.len() != rows * cols {
                    return Err(D::Error::custom(format!("layer {} has {} weights, expected {}", l + 1, w.len(), rows * cols)));
                }
                Ok(DMatrix::from_row_slice(rows, cols, w))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        GcnHypothesis::new(rec.p, weights, rec.beta, rec.activation).map_err(D::Error::custom)
    }
}

/// Forward pass on the computation nodes.
///
/// `H_0 = x` as a `1 × s` row; `H_{l+1} = σ(W_{l+1} H_l Δ^p)` for
/// `l = 0..L−2`, then `f = W_L H_{L−1}` with no convolution or activation.
/// `Δ` is symmetric, so `H Δ^p = (Δ^p Hᵀ)ᵀ`. Returns `(m − 1) × s`.
pub fn gcn_forward(laplacian: &DMatrix<f64>, hyp: &GcnHypothesis, x: &[f64]) -> Result<DMatrix<f64>> {
    let s = laplacian.nrows();
    if laplacian.ncols() != s {
        return Err(Error::DimensionMismatch { expected: s, actual: laplacian.ncols() });
    }
    if x.len() != s {
        return Err(Error::DimensionMismatch { expected: s, actual: x.len() });
    }
    let conv = hop_power(laplacian, hyp.hops);
    Ok(forward_with_conv(&conv, hyp, x))
}

/// `Δ^p`.
pub fn hop_power(laplacian: &DMatrix<f64>, hops: usize) -> DMatrix<f64> {
    let s = laplacian.nrows();
    (0..hops).fold(DMatrix::identity(s, s), |acc, _| acc * laplacian)
}

/// [`gcn_forward`] with `Δ^p` precomputed.
pub fn forward_with_conv(conv: &DMatrix<f64>, hyp: &GcnHypothesis, x: &[f64]) -> DMatrix<f64> {
    let mut h = DMatrix::from_row_slice(1, x.len(), x);
    let depth = hyp.depth();
    for w in &hyp.weights[..depth - 1] {
        let act = hyp.activation;
        h = (w * &h * conv).map(|v| act.apply(v));
    }
    &hyp.weights[depth - 1] * h
}

/// Applies `ilr⁻¹` to every output column.
pub fn hypothesis_apply(laplacian: &DMatrix<f64>, hyp: &GcnHypothesis, x: &[f64]) -> Result<Vec<Composition>> {
    Ok(columns_to_compositions(&gcn_forward(laplacian, hyp, x)?))
}

pub fn columns_to_compositions(f: &DMatrix<f64>) -> Vec<Composition> {
    f.column_iter().map(|c| ilr_inverse(c.as_slice())).collect()
}

/// Draws a hypothesis: entries uniform in `[−1, 1]`, then each `W_l`
/// rescaled to `‖W_l‖_op = β_l·u_l` with `u_l` uniform in `(0, 1]`.
pub fn sample_hypothesis<R: Rng + ?Sized>(
    dims: &[usize],
    budgets: &[f64],
    hops: usize,
    activation: Activation,
    rng: &mut R,
) -> Result<GcnHypothesis> {
    if dims.len() != budgets.len() + 1 {
        return Err(Error::DimensionMismatch { expected: budgets.len() + 1, actual: dims.len() });
    }
    let weights = dims
        .windows(2)
        .zip(budgets)
        .map(|(w, &beta)| {
            let mut mat = DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-1.0..=1.0));
            let norm = op_norm_inf(&mat);
            let u = 1.0 - rng.gen::<f64>();
            if norm > 0.0 {
                mat *= beta * u / norm;
            }
            let after = op_norm_inf(&mat);
            if after > beta {
                mat *= beta / after * (1.0 - f64::EPSILON);
            }
            mat
        })
        .collect();
    GcnHypothesis::new(hops, weights, budgets.to_vec(), activation)
}

/// `max_{v≠w} ‖π_v h(x) − π_w h(x)‖_A / d(v, w)` over Γ, with Aitchison
/// distances taken as Euclidean distances between raw output columns.
/// Zero when Γ has a single node.
pub fn lipschitz_measure(
    laplacian: &DMatrix<f64>,
    hyp: &GcnHypothesis,
    x: &[f64],
    d_gamma: &DMatrix<f64>,
) -> Result<f64> {
    let f = gcn_forward(laplacian, hyp, x)?;
    column_lipschitz(&f, d_gamma)
}

pub fn column_lipschitz(f: &DMatrix<f64>, d_gamma: &DMatrix<f64>) -> Result<f64> {
    let s = f.ncols();
    if d_gamma.nrows() != s {
        return Err(Error::DimensionMismatch { expected: s, actual: d_gamma.nrows() });
    }
    let mut best = 0.0f64;
    for v in 0..s {
        for w in (v + 1)..s {
            let dist = (f.column(v) - f.column(w)).norm();
            best = best.max(dist / d_gamma[(v, w)]);
        }
    }
    Ok(best)
}

/// Lipschitz ratio of arbitrary node outputs measured with `d_A`.
pub fn composition_lipschitz(outputs: &[Composition], d_gamma: &DMatrix<f64>) -> Result<f64> {
    let mut best = 0.0f64;
    for v in 0..outputs.len() {
        for w in (v + 1)..outputs.len() {
            best = best.max(aitchison_distance(&outputs[v], &outputs[w])? / d_gamma[(v, w)]);
        }
    }
    Ok(best)
}

/// `2(m − 1)^{1/2}((3 + ν)/2)^{p(L−1)} Π β_l`.
pub fn lipschitz_bound(nu: usize, m: usize, hops: usize, depth: usize, budgets: &[f64]) -> f64 {
    let conv = ((3.0 + nu as f64) / 2.0).powi((hops * (depth - 1)) as i32);
    2.0 * ((m - 1) as f64).sqrt() * conv * budgets.iter().product::<f64>()
}
