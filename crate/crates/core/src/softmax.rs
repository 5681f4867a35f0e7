//! Temperature softmax, temperature cross-entropy, and the closed-form
//! gradients of that loss with respect to the class prototypes and the
//! feature vector.
//!
//! The closed forms take the probability vector `P` as an argument instead
//! of recomputing it, so at fixed `P` every gradient is exactly `1/τ` times
//! its `τ = 1` counterpart. They are written without the autodiff tape so
//! the two can be checked against each other.
//!
//! The normalizing sum of the loss runs over the `M` categories.

use serde::{Deserialize, Serialize};

use crate::autodiff::logsumexp;
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// Softmax temperature; always strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::Domain(format!(
                "temperature must be positive and finite, got {tau}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

impl std::fmt::Display for Temperature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Pre-softmax class scores, at least two and all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Usage(format!("need at least 2 logits, got {}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite logit {v}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Output of [`softmax_tau`].
///
/// Entries are non-negative and sum to one within rounding. They are
/// strictly positive unless a logit gap exceeds the `f64` exponent range
/// at the given temperature, in which case the far tail underflows to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities(Vec<f64>);

impl Probabilities {
    /// Wraps a probability vector supplied by the caller, e.g. to evaluate
    /// the closed-form gradients at a chosen `P`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Usage("need at least 2 probabilities".into()));
        }
        if values.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Domain("probabilities must lie in [0, 1]".into()));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Softmax of `x / τ`, shifted by `max(x)` before exponentiation.
pub fn softmax_tau(x: &Logits, tau: Temperature) -> Probabilities {
    Probabilities(softmax_slice(x.values(), tau.get()))
}

pub(crate) fn softmax_slice(x: &[f64], tau: f64) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = x.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    for v in &mut e {
        *v /= s;
    }
    e
}

/// `−log softmax_tau(x, τ)[y]` via log-sum-exp.
pub fn ce_loss_tau(x: &Logits, y: usize, tau: Temperature) -> Result<f64> {
    check_class(y, x.len())?;
    Ok(ce_slice(x.values(), y, tau.get()))
}

pub(crate) fn ce_slice(x: &[f64], y: usize, tau: f64) -> f64 {
    let scaled: Vec<f64> = x.iter().map(|v| v / tau).collect();
    logsumexp(&scaled) - scaled[y]
}

fn check_class(y: usize, m: usize) -> Result<()> {
    if y >= m {
        Err(Error::Index { index: y, len: m })
    } else {
        Ok(())
    }
}

/// `∂L/∂w_y = (1/τ)(P[y] − 1) f(x)`.
pub fn grad_positive_prototype(f_x: &[f64], p: &Probabilities, y: usize, tau: Temperature) -> Result<Vec<f64>> {
    check_class(y, p.len())?;
    let c = (p.0[y] - 1.0) / tau.get();
    Ok(f_x.iter().map(|v| c * v).collect())
}

/// `∂L/∂w_j = (1/τ) P[j] f(x)` for a negative class `j ≠ y`.
pub fn grad_negative_prototype(
    f_x: &[f64],
    p: &Probabilities,
    y: usize,
    j: usize,
    tau: Temperature,
) -> Result<Vec<f64>> {
    check_class(y, p.len())?;
    check_class(j, p.len())?;
    if j == y {
        return Err(Error::Usage(format!(
            "class {j} is the positive class, not a negative one"
        )));
    }
    let c = p.0[j] / tau.get();
    Ok(f_x.iter().map(|v| c * v).collect())
}

/// `∂L/∂f = (1/τ)[Σ_{j≠y} P[j] w_j − (1 − P[y]) w_y]` for a `d×M`
/// prototype matrix.
pub fn grad_feature(w: &Tensor, p: &Probabilities, y: usize, tau: Temperature) -> Result<Vec<f64>> {
    let (d, m) = w.dims2("grad_feature")?;
    if m != p.len() {
        return Err(Error::Dimension {
            op: "grad_feature",
            left: w.shape().to_vec(),
            right: vec![p.len()],
        });
    }
    check_class(y, m)?;
    let inv = 1.0 / tau.get();
    let mut out = vec![0.0; d];
    for (k, o) in out.iter_mut().enumerate() {
        let row = &w.data()[k * m..(k + 1) * m];
        let mut acc = 0.0;
        for (j, &wkj) in row.iter().enumerate() {
            if j == y {
                acc -= (1.0 - p.0[y]) * wkj;
            } else {
                acc += p.0[j] * wkj;
            }
        }
        *o = inv * acc;
    }
    Ok(out)
}

/// Closed-form gradients of the summed loss over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    /// `d×M`; column `j` is `Σ_n ∂L(x_n)/∂w_j`.
    pub prototypes: Tensor,
    /// Per-sample `∂L(x_n)/∂f(x_n)`, in batch order.
    pub features: Vec<Vec<f64>>,
    /// `Σ_n ∂L(x_n)/∂f`.
    pub feature_sum: Vec<f64>,
}

/// Sums the per-sample closed forms over a batch in index order.
pub fn batch_grads(features: &[Vec<f64>], labels: &[usize], w: &Tensor, tau: Temperature) -> Result<BatchGrads> {
    if features.is_empty() {
        return Err(Error::Usage("batch_grads needs a non-empty batch".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Dimension {
            op: "batch_grads",
            left: vec![features.len()],
            right: vec![labels.len()],
        });
    }
    let (d, m) = w.dims2("batch_grads")?;
    let mut protos = vec![0.0; d * m];
    let mut per_sample = Vec::with_capacity(features.len());
    let mut feature_sum = vec![0.0; d];
    for (f, &y) in features.iter().zip(labels) {
        if f.len() != d {
            return Err(Error::Dimension {
                op: "batch_grads",
                left: w.shape().to_vec(),
                right: vec![f.len()],
            });
        }
        check_class(y, m)?;
        let logits: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|k| w.data()[k * m + j] * f[k]).sum())
            .collect();
        let p = Probabilities(softmax_slice(&logits, tau.get()));
        for j in 0..m {
            let g = if j == y {
                grad_positive_prototype(f, &p, y, tau)?
            } else {
                grad_negative_prototype(f, &p, y, j, tau)?
            };
            for (k, gk) in g.into_iter().enumerate() {
                protos[k * m + j] += gk;
            }
        }
        let gf = grad_feature(w, &p, y, tau)?;
        for (s, v) in feature_sum.iter_mut().zip(&gf) {
            *s += v;
        }
        per_sample.push(gf);
    }
    Ok(BatchGrads {
        prototypes: Tensor::new(vec![d, m], protos)?,
        features: per_sample,
        feature_sum,
    })
}
