//! l∞-bounded iterative gradient attacks and the per-prototype
//! decomposition of the input gradient.
//!
//! Attack losses are always evaluated on raw logits (`τ = 1`); the
//! temperature a model was trained at plays no role here.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::{chunks, Exec};
use crate::model::{Model, ParamMode};
use crate::seed;
use crate::softmax::{ce_slice, softmax_slice, Logits};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ce,
    CwMargin,
    Dlr,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "cw" | "cw-margin" => Ok(LossKind::CwMargin),
            "dlr" => Ok(LossKind::Dlr),
            other => Err(Error::Usage(format!("unknown attack loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Untargeted,
    /// A fixed target class. Samples already labeled with it are left
    /// unattacked.
    Class(usize),
    /// Per sample, the most probable wrong class on the clean input.
    ErrorProne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub loss: LossKind,
    /// l∞ radius in sample units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub target: Target,
    /// Confidence margin of the C&W loss.
    #[serde(default)]
    pub kappa: f64,
    pub seed: u64,
}

impl AttackConfig {
    /// 20-step untargeted CE-PGD with random start and step size ε/4
    /// (2/255 at ε = 8/255).
    pub fn pgd20(epsilon: f64, seed_value: u64) -> Self {
        Self {
            loss: LossKind::Ce,
            epsilon,
            steps: 20,
            step_size: epsilon / 4.0,
            random_start: true,
            target: Target::Untargeted,
            kappa: 0.0,
            seed: seed_value,
        }
    }

    /// [`AttackConfig::pgd20`] with the C&W margin loss at κ = 0.
    pub fn cw20(epsilon: f64, seed_value: u64) -> Self {
        Self {
            loss: LossKind::CwMargin,
            ..Self::pgd20(epsilon, seed_value)
        }
    }

    pub fn targeted(mut self, target: Target) -> Self {
        self.target = target;
        self
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Usage(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Usage(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Usage(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        if self.loss == LossKind::Dlr && classes < 3 {
            return Err(Error::Usage("the DLR loss needs at least 3 classes".into()));
        }
        if let Target::Class(t) = self.target {
            if t >= classes {
                return Err(Error::Index { index: t, len: classes });
            }
        }
        Ok(())
    }
}

/// `max(z[y] − max_{j≠y} z[j], −κ)`.
pub fn cw_margin_loss(z: &Logits, y: usize, kappa: f64) -> Result<f64> {
    check_class(y, z.len())?;
    Ok(margin(z.values(), y).0.max(-kappa))
}

/// `−(z[y] − max_{j≠y} z[j]) / (z_π1 − z_π3)` with `π` the descending
/// order of `z`.
pub fn dlr_loss(z: &Logits, y: usize) -> Result<f64> {
    check_class(y, z.len())?;
    dlr_row(z.values(), y).map(|(v, _)| v)
}

fn check_class(y: usize, m: usize) -> Result<()> {
    if y >= m {
        Err(Error::Index { index: y, len: m })
    } else {
        Ok(())
    }
}

/// `(z[y] − z[m], m)` with `m` the largest other class (lowest index on ties).
fn margin(z: &[f64], y: usize) -> (f64, usize) {
    let mut best = usize::MAX;
    for (j, &v) in z.iter().enumerate() {
        if j != y && (best == usize::MAX || v > z[best]) {
            best = j;
        }
    }
    (z[y] - z[best], best)
}

fn dlr_row(z: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    if z.len() < 3 {
        return Err(Error::Usage("the DLR loss needs at least 3 classes".into()));
    }
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let (p1, p3) = (order[0], order[2]);
    let den = z[p1] - z[p3];
    if !(den > 0.0) {
        return Err(Error::DegenerateLogits(format!(
            "largest and third-largest logits coincide ({})",
            z[p1]
        )));
    }
    let (num, m) = margin(z, y);
    let value = -num / den;
    // ∂(−num/den) = −∂num/den + num·∂den/den²
    let mut g = vec![0.0; z.len()];
    g[y] -= 1.0 / den;
    g[m] += 1.0 / den;
    let c = num / (den * den);
    g[p1] += c;
    g[p3] -= c;
    Ok((value, g))
}

/// Value and logit-gradient of the quantity an attack ascends.
fn attack_objective(kind: LossKind, z: &[f64], y: usize, target: Option<usize>, kappa: f64) -> Result<(f64, Vec<f64>)> {
    let m = z.len();
    match (kind, target) {
        (LossKind::Ce, None) => Ok(ce_row(z, y, 1.0)),
        (LossKind::Ce, Some(t)) => {
            let (v, g) = ce_row(z, t, -1.0);
            Ok((v, g))
        }
        (LossKind::CwMargin, None) => {
            // −max(margin_y, −κ)
            let (mg, j) = margin(z, y);
            let mut g = vec![0.0; m];
            if mg > -kappa {
                g[y] = -1.0;
                g[j] = 1.0;
            }
            Ok((-mg.max(-kappa), g))
        }
        (LossKind::CwMargin, Some(t)) => {
            // min(margin_t, κ)
            let (mg, j) = margin(z, t);
            let mut g = vec![0.0; m];
            if mg < kappa {
                g[t] = 1.0;
                g[j] = -1.0;
            }
            Ok((mg.min(kappa), g))
        }
        (LossKind::Dlr, None) => dlr_row(z, y),
        (LossKind::Dlr, Some(t)) => {
            let (v, g) = dlr_row(z, t)?;
            Ok((-v, g.into_iter().map(|x| -x).collect()))
        }
    }
}

/// `sign · CE(z, y)` at τ = 1 and its logit gradient `sign · (p − e_y)`.
fn ce_row(z: &[f64], y: usize, sign: f64) -> (f64, Vec<f64>) {
    let mut p = softmax_slice(z, 1.0);
    p[y] -= 1.0;
    (sign * ce_slice(z, y, 1.0), p.into_iter().map(|v| sign * v).collect())
}

/// Loss value (not the attack objective) and its logit gradient.
fn loss_row(kind: LossKind, z: &[f64], y: usize, kappa: f64) -> Result<(f64, Vec<f64>)> {
    match kind {
        LossKind::Ce => Ok(ce_row(z, y, 1.0)),
        LossKind::CwMargin => {
            let (v, g) = attack_objective(kind, z, y, None, kappa)?;
            Ok((-v, g.into_iter().map(|x| -x).collect()))
        }
        LossKind::Dlr => dlr_row(z, y),
    }
}

fn input_tensor(model: &Model, x: &[f64], batch: usize) -> Result<Tensor> {
    let mut shape = vec![batch];
    shape.extend_from_slice(model.spec().input_shape());
    Tensor::new(shape, x.to_vec())
}

/// Gradient of `loss(F(x), y)` with respect to `x`, where `loss` is CE,
/// the C&W margin (κ = 0) or DLR on raw logits.
pub fn input_gradient(model: &Model, x: &[f64], y: usize, loss: LossKind) -> Result<Tensor> {
    check_class(y, model.classes())?;
    if loss == LossKind::Dlr && model.classes() < 3 {
        return Err(Error::Usage("the DLR loss needs at least 3 classes".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.input(input_tensor(model, x, 1)?);
    let out = model.forward_tape(&mut tape, xv, ParamMode::Frozen)?;
    let l = tape.row_loss(out.logits, |_, z| loss_row(loss, z, y, 0.0))?;
    let g = tape.backward(l, &mut ParameterStore::new())?;
    g.get_or_zeros(&tape, xv).reshape(model.spec().input_shape())
}

/// Sum over rows of the attack objective's input gradient (rows are
/// independent, so row `i` of the result is that sample's gradient).
fn objective_gradient(
    model: &Model,
    x: &[f64],
    labels: &[usize],
    targets: &[Option<usize>],
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.input(input_tensor(model, x, labels.len())?);
    let out = model.forward_tape(&mut tape, xv, ParamMode::Frozen)?;
    let l = tape.row_loss(out.logits, |i, z| {
        attack_objective(cfg.loss, z, labels[i], targets[i], cfg.kappa)
    })?;
    let g = tape.backward(l, &mut ParameterStore::new())?;
    Ok(g.get_or_zeros(&tape, xv).into_data())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Resolves the per-sample target class; `None` for untargeted rows.
fn resolve_targets(model: &Model, x: &[f64], labels: &[usize], target: Target) -> Result<Vec<Option<usize>>> {
    Ok(match target {
        Target::Untargeted => vec![None; labels.len()],
        Target::Class(t) => vec![Some(t); labels.len()],
        Target::ErrorProne => {
            let (_, z) = model.forward_batch(x, labels.len())?;
            labels
                .iter()
                .enumerate()
                .map(|(i, &y)| Some(margin(z.row(i), y).1))
                .collect()
        }
    })
}

/// Batched PGD over contiguous samples. Row `i` uses random seed
/// `cfg.seed ^ ids[i]`, so results match per-sample [`pgd`] calls.
///
/// Per step: `x ← clip_[0,1](clip_{x₀±ε}(x + α·sign(∇)))`, ascending the
/// loss when untargeted and descending toward the target otherwise.
pub fn pgd_batch(model: &Model, x0: &[f64], labels: &[usize], cfg: &AttackConfig, ids: &[usize]) -> Result<Vec<f64>> {
    let targets = resolve_targets(model, x0, labels, cfg.target)?;
    pgd_with_targets(model, x0, labels, &targets, cfg, ids)
}

fn pgd_with_targets(
    model: &Model,
    x0: &[f64],
    labels: &[usize],
    targets: &[Option<usize>],
    cfg: &AttackConfig,
    ids: &[usize],
) -> Result<Vec<f64>> {
    cfg.validate(model.classes())?;
    let n = model.spec().input_len();
    if x0.len() != n * labels.len() || ids.len() != labels.len() {
        return Err(Error::Dimension {
            op: "pgd",
            left: vec![labels.len(), n],
            right: vec![x0.len(), ids.len()],
        });
    }
    for (&y, t) in labels.iter().zip(targets) {
        check_class(y, model.classes())?;
        if *t == Some(y) {
            return Err(Error::Usage(format!("target class {y} equals the true class")));
        }
    }
    let eps = cfg.epsilon;
    let mut x = x0.to_vec();
    if eps == 0.0 {
        return Ok(x);
    }
    if cfg.random_start {
        for (row, &id) in x.chunks_mut(n).zip(ids) {
            let mut rng = seed::rng(cfg.seed ^ id as u64);
            for v in row {
                let orig = *v;
                *v = project(orig + rng.gen_range(-eps..=eps), orig, eps);
            }
        }
    }
    for _ in 0..cfg.steps {
        let g = objective_gradient(model, &x, labels, targets, cfg)?;
        for ((v, &orig), gi) in x.iter_mut().zip(x0).zip(g) {
            let stepped = *v + cfg.step_size * sign(gi);
            *v = project(stepped, orig, eps);
        }
    }
    Ok(x)
}

/// Clips `v` into the ε-ball around `orig` and then into `[0, 1]`.
/// `orig ± eps` can round outward, so the bounds are pulled in until the
/// computed distance itself is within `eps`.
fn project(v: f64, orig: f64, eps: f64) -> f64 {
    let mut hi = orig + eps;
    while hi - orig > eps {
        hi = hi.next_down();
    }
    let mut lo = orig - eps;
    while orig - lo > eps {
        lo = lo.next_up();
    }
    v.clamp(lo, hi).clamp(0.0, 1.0)
}

/// PGD on one sample with random seed `cfg.seed`.
pub fn pgd(model: &Model, x: &[f64], y: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    pgd_batch(model, x, &[y], cfg, &[0])
}

/// Per-class terms of the CE input gradient:
/// `g_y = (P_y − 1)·∂z_y/∂x` and `g_j = P_j·∂z_j/∂x` for `j ≠ y`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDecomposition {
    pub probabilities: Vec<f64>,
    /// `∂z_j/∂x` for every class, input-shaped and flattened.
    pub logit_grads: Vec<Vec<f64>>,
    pub contributions: Vec<Vec<f64>>,
    pub total: Vec<f64>,
}

pub fn input_grad_decomposition(model: &Model, x: &[f64], y: usize) -> Result<GradientDecomposition> {
    check_class(y, model.classes())?;
    let m = model.classes();
    let mut tape = Tape::new();
    let xv = tape.input(input_tensor(model, x, 1)?);
    let out = model.forward_tape(&mut tape, xv, ParamMode::Frozen)?;
    let p = softmax_slice(tape.value(out.logits).data(), 1.0);
    let mut logit_grads = Vec::with_capacity(m);
    let mut contributions = Vec::with_capacity(m);
    let mut total = vec![0.0; x.len()];
    for (j, &pj) in p.iter().enumerate() {
        let mut seed_grad = Tensor::zeros(&[1, m]);
        seed_grad.data_mut()[j] = 1.0;
        let dz = tape.vjp(out.logits, seed_grad)?.get_or_zeros(&tape, xv).into_data();
        let coef = if j == y { pj - 1.0 } else { pj };
        let c: Vec<f64> = dz.iter().map(|v| coef * v).collect();
        for (t, v) in total.iter_mut().zip(&c) {
            *t += v;
        }
        logit_grads.push(dz);
        contributions.push(c);
    }
    Ok(GradientDecomposition {
        probabilities: p,
        logit_grads,
        contributions,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub index: usize,
    pub label: usize,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub target: Option<usize>,
    /// Untargeted: the adversarial prediction is wrong. Targeted: it equals
    /// the target.
    pub success: bool,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustReport {
    pub clean_accuracy: f64,
    /// Fraction of all samples classified correctly after the attack.
    pub robust_accuracy: f64,
    pub success_rate: f64,
    pub outcomes: Vec<AttackOutcome>,
}

/// Samples attacked together in one batched PGD run.
pub const ATTACK_CHUNK: usize = 100;

/// Adversarial inputs for every sample, in dataset order; sample `i` uses
/// seed `cfg.seed ^ i`.
pub fn attack_dataset(model: &Model, data: &Dataset, cfg: &AttackConfig, exec: Exec) -> Result<Vec<Vec<f64>>> {
    Ok(run_attack(model, data, cfg, exec)?
        .into_iter()
        .map(|(x, _)| x)
        .collect())
}

fn run_attack(model: &Model, data: &Dataset, cfg: &AttackConfig, exec: Exec) -> Result<Vec<(Vec<f64>, Option<usize>)>> {
    cfg.validate(model.classes())?;
    let parts = chunks(data.len(), ATTACK_CHUNK);
    let n = data.sample_len();
    let out = exec.try_map_range(parts.len(), |c| {
        let idx: Vec<usize> = parts[c].clone().collect();
        let (x, y) = data.gather(&idx);
        let targets = resolve_targets(model, &x, &y, cfg.target)?;
        // Rows whose target is their own label stay clean.
        let active: Vec<usize> = (0..idx.len()).filter(|&i| targets[i] != Some(y[i])).collect();
        let mut adv = x.clone();
        if !active.is_empty() {
            let ax: Vec<f64> = active
                .iter()
                .flat_map(|&i| x[i * n..(i + 1) * n].iter().copied())
                .collect();
            let ay: Vec<usize> = active.iter().map(|&i| y[i]).collect();
            let at: Vec<Option<usize>> = active.iter().map(|&i| targets[i]).collect();
            let ids: Vec<usize> = active.iter().map(|&i| idx[i]).collect();
            let res = pgd_with_targets(model, &ax, &ay, &at, cfg, &ids)?;
            for (k, &i) in active.iter().enumerate() {
                adv[i * n..(i + 1) * n].copy_from_slice(&res[k * n..(k + 1) * n]);
            }
        }
        Ok::<_, Error>(
            (0..idx.len())
                .map(|i| {
                    let t = targets[i].filter(|&t| t != y[i]);
                    (adv[i * n..(i + 1) * n].to_vec(), t)
                })
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(out.into_iter().flatten().collect())
}

/// Attacks every sample and counts post-attack correct predictions over
/// the whole set.
pub fn robust_accuracy(model: &Model, data: &Dataset, cfg: &AttackConfig, exec: Exec) -> Result<RobustReport> {
    if data.is_empty() {
        return Err(Error::Usage("cannot attack an empty dataset".into()));
    }
    let adv = run_attack(model, data, cfg, exec)?;
    let clean = crate::train::predict(model, data, exec)?;
    let n = data.sample_len();
    let flat: Vec<f64> = adv.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let adv_ds = Dataset::new(
        "adv",
        data.sample_shape().to_vec(),
        flat,
        data.labels().to_vec(),
        data.classes(),
    )?;
    let adv_pred = crate::train::predict(model, &adv_ds, exec)?;
    let mut outcomes = Vec::with_capacity(data.len());
    for (i, (x, target)) in adv.iter().enumerate() {
        let label = data.label(i);
        let linf = x
            .iter()
            .zip(&data.raw()[i * n..(i + 1) * n])
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let success = match (cfg.target, target) {
            (Target::Untargeted, _) => adv_pred[i] != label,
            (_, Some(t)) => adv_pred[i] == *t,
            (_, None) => false,
        };
        outcomes.push(AttackOutcome {
            index: i,
            label,
            clean_pred: clean[i],
            adv_pred: adv_pred[i],
            target: *target,
            success,
            linf,
        });
    }
    let total = data.len() as f64;
    let count = |f: &dyn Fn(&AttackOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / total;
    Ok(RobustReport {
        clean_accuracy: count(&|o| o.clean_pred == o.label),
        robust_accuracy: count(&|o| o.adv_pred == o.label),
        success_rate: count(&|o| o.success),
        outcomes,
    })
}

pub const ATTACK_CSV_HEADER: &str = "index,label,clean_pred,adv_pred,success,linf";

pub fn write_attack_csv(path: &Path, outcomes: &[AttackOutcome]) -> Result<()> {
    let mut out = String::from(ATTACK_CSV_HEADER);
    out.push('\n');
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            o.index,
            o.label,
            o.clean_pred,
            o.adv_pred,
            u8::from(o.success),
            o.linf
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
