//! Aitchison geometry of the open simplex.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-12;

/// A strictly positive probability vector with at least two parts.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Composition(Vec<f64>);

impl Composition {
    pub fn new(parts: Vec<f64>) -> Result<Self> {
        if parts.len() < 2 {
            return Err(Error::InvalidComposition(format!("needs at least 2 parts, got {}", parts.len())));
        }
        if let Some(x) = parts.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidComposition(format!("part {x} is not strictly positive")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidComposition(format!("parts sum to {sum}")));
        }
        Ok(Self(parts))
    }

    /// Rescales positive parts onto the simplex.
    pub fn closure(parts: Vec<f64>) -> Result<Self> {
        let sum: f64 = parts.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::InvalidComposition(format!("cannot close parts summing to {sum}")));
        }
        Self::new(parts.into_iter().map(|x| x / sum).collect())
    }

    pub fn uniform(m: usize) -> Result<Self> {
        Self::new(vec![1.0 / m as f64; m])
    }

    pub fn parts(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'de> Deserialize<'de> for Composition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Composition::new(Vec::<f64>::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Orthonormal basis `e^i = √(i/(i+1))·(1/i, …, 1/i, −1, 0, …, 0)` of the
/// zero-sum hyperplane in ℝ^m.
#[derive(Debug, Clone, PartialEq)]
pub struct HelmertBasis {
    m: usize,
    vectors: Vec<Vec<f64>>,
}

impl HelmertBasis {
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidParameter(format!("Helmert basis needs m >= 2, got {m}")));
        }
        let vectors = (1..m)
            .map(|i| {
                let scale = (i as f64 / (i as f64 + 1.0)).sqrt();
                let mut e = vec![0.0; m];
                e[..i].iter_mut().for_each(|x| *x = scale / i as f64);
                e[i] = -scale;
                e
            })
            .collect();
        Ok(Self { m, vectors })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Coordinates of a zero-sum vector.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.vectors.iter().map(|e| dot(e, x)).collect()
    }

    /// Zero-sum vector with the given coordinates.
    pub fn expand(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (e, &c) in self.vectors.iter().zip(y) {
            out.iter_mut().zip(e).for_each(|(o, &ei)| *o += c * ei);
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(p: &Composition, q: &Composition) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), actual: q.len() });
    }
    Ok(())
}

/// Centered log-ratio transform.
pub fn clr(p: &Composition) -> Vec<f64> {
    let logs: Vec<f64> = p.parts().iter().map(|x| x.ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.into_iter().map(|l| l - mean).collect()
}

/// Isometric log-ratio transform (clr coordinates in the Helmert basis).
pub fn ilr(p: &Composition) -> Vec<f64> {
    HelmertBasis::new(p.len()).expect("compositions have m >= 2").project(&clr(p))
}

/// Inverse of [`ilr`]; every point of ℝ^{m−1} maps into the open simplex.
pub fn ilr_inverse(y: &[f64]) -> Composition {
    let basis = HelmertBasis::new(y.len() + 1).expect("m = len + 1 >= 2");
    softmax(&basis.expand(y))
}

fn softmax(x: &[f64]) -> Composition {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let mut parts: Vec<f64> = exp.into_iter().map(|v| v / sum).collect();
    // underflowed parts would leave the open simplex
    for v in parts.iter_mut() {
        if *v <= 0.0 {
            *v = f64::MIN_POSITIVE;
        }
    }
    Composition(parts)
}

/// `d_A(p, q) = ‖clr(p) − clr(q)‖₂`.
pub fn aitchison_distance(p: &Composition, q: &Composition) -> Result<f64> {
    check_dims(p, q)?;
    Ok(clr(p).iter().zip(clr(q)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

/// Aitchison inner product, evaluated as `⟨clr p, clr q⟩₂`.
pub fn aitchison_inner(p: &Composition, q: &Composition) -> Result<f64> {
    check_dims(p, q)?;
    Ok(dot(&clr(p), &clr(q)))
}

/// The inner product from its log-ratio double sum,
/// `(1/2m) Σ_i Σ_j log(p_i/p_j) log(q_i/q_j)`.
pub fn aitchison_inner_log_ratios(p: &Composition, q: &Composition) -> Result<f64> {
    check_dims(p, q)?;
    let m = p.len();
    let (a, b) = (p.parts(), q.parts());
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            total += (a[i] / a[j]).ln() * (b[i] / b[j]).ln();
        }
    }
    Ok(total / (2.0 * m as f64))
}

/// Distance from the double-sum inner product: `‖p ⊖ q‖_A` with the
/// log-ratios of `p` and `q` differenced termwise.
pub fn aitchison_distance_log_ratios(p: &Composition, q: &Composition) -> Result<f64> {
    check_dims(p, q)?;
    let m = p.len();
    let (a, b) = (p.parts(), q.parts());
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let diff = (a[i] / a[j]).ln() - (b[i] / b[j]).ln();
            total += diff * diff;
        }
    }
    Ok((total / (2.0 * m as f64)).sqrt())
}

pub fn aitchison_norm(p: &Composition) -> f64 {
    dot(&clr(p), &clr(p)).sqrt()
}
