//! Cross-checks the closed-form prototype/feature gradients against the
//! tape and against central finite differences on random instances.
//!
//! Each instance draws a feature dimension, class count, temperature,
//! prototype matrix and a small batch of feature vectors. Three gradient
//! families are compared: per-sample prototype gradients, per-sample
//! feature gradients, and their batch sums.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{finite_diff_grad, max_rel_err, ParameterStore, Tape};
use crate::error::Result;
use crate::seed;
use crate::softmax::{
    batch_grads, ce_loss_tau, grad_feature, grad_negative_prototype, grad_positive_prototype, softmax_tau, Logits,
    Temperature,
};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub autodiff_tol: f64,
    pub finite_diff_tol: f64,
    pub step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            seed: 0,
            autodiff_tol: 1e-10,
            finite_diff_tol: 1e-6,
            step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub max_autodiff_rel: f64,
    pub max_finite_diff_rel: f64,
    /// One line per instance that exceeded a tolerance.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

const TAUS: [f64; 7] = [0.1, 0.5, 1.0, 2.0, 10.0, 30.0, 100.0];

struct Instance {
    tau: Temperature,
    w: Tensor,
    feats: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn draw(rng: &mut impl Rng) -> Result<Instance> {
    let d = rng.gen_range(2..=16);
    let m = rng.gen_range(2..=10);
    let b = rng.gen_range(1..=6);
    let tau = Temperature::new(TAUS[rng.gen_range(0..TAUS.len())])?;
    let scale = 1.0 / (d as f64).sqrt();
    let w: Vec<f64> = (0..d * m)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let feats = (0..b)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let labels = (0..b).map(|_| rng.gen_range(0..m)).collect();
    Ok(Instance {
        tau,
        w: Tensor::new(vec![d, m], w)?,
        feats,
        labels,
    })
}

/// Summed loss evaluated directly, without the tape.
fn direct_loss(w: &Tensor, feats: &Tensor, labels: &[usize], tau: Temperature) -> Result<f64> {
    let z = matmul(feats, w)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total += ce_loss_tau(&Logits::new(z.row(i).to_vec())?, y, tau)?;
    }
    Ok(total)
}

/// Tape gradients of the summed loss: `(∂/∂W, ∂/∂F)`.
fn tape_grads(inst: &Instance) -> Result<(Tensor, Tensor)> {
    let mut store = ParameterStore::new();
    let wid = store.insert("w", inst.w.clone())?;
    let mut tape = Tape::new();
    let wv = tape.param(&store, wid);
    let fv = tape.input(Tensor::from_rows(&inst.feats)?);
    let z = tape.matmul(fv, wv)?;
    let mean = tape.cross_entropy(z, &inst.labels, inst.tau.get())?;
    let total = tape.scale(mean, inst.labels.len() as f64);
    let g = tape.backward(total, &mut store)?;
    Ok((store.grad(wid).clone(), g.get_or_zeros(&tape, fv)))
}

/// Per-sample closed forms assembled column by column.
fn single_closed(inst: &Instance, n: usize) -> Result<(Tensor, Vec<f64>)> {
    let (d, m) = inst.w.dims2("gradcheck")?;
    let f = &inst.feats[n];
    let y = inst.labels[n];
    let z = matmul(&Tensor::new(vec![1, d], f.clone())?, &inst.w)?;
    let p = softmax_tau(&Logits::new(z.into_data())?, inst.tau);
    let mut gw = vec![0.0; d * m];
    for j in 0..m {
        let col = if j == y {
            grad_positive_prototype(f, &p, y, inst.tau)?
        } else {
            grad_negative_prototype(f, &p, y, j, inst.tau)?
        };
        for k in 0..d {
            gw[k * m + j] = col[k];
        }
    }
    Ok((Tensor::new(vec![d, m], gw)?, grad_feature(&inst.w, &p, y, inst.tau)?))
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = seed::rng(seed::derive_named(cfg.seed, "gradcheck"));
    let mut report = GradCheckReport {
        instances: cfg.instances,
        max_autodiff_rel: 0.0,
        max_finite_diff_rel: 0.0,
        failures: Vec::new(),
    };
    for i in 0..cfg.instances {
        let inst = draw(&mut rng)?;
        let feats = Tensor::from_rows(&inst.feats)?;
        let closed = batch_grads(&inst.feats, &inst.labels, &inst.w, inst.tau)?;
        let (tw, tf) = tape_grads(&inst)?;
        let fw = finite_diff_grad(|w| direct_loss(w, &feats, &inst.labels, inst.tau), &inst.w, cfg.step)?;
        let ff = finite_diff_grad(|f| direct_loss(&inst.w, f, &inst.labels, inst.tau), &feats, cfg.step)?;

        let closed_f = closed.features.concat();
        let mut ad = max_rel_err(closed.prototypes.data(), tw.data()).max(max_rel_err(&closed_f, tf.data()));
        // Batch feature sum against the column sums of the tape gradient.
        let d = closed.feature_sum.len();
        let tape_sum: Vec<f64> = (0..d)
            .map(|k| (0..inst.feats.len()).map(|n| tf.data()[n * d + k]).sum())
            .collect();
        ad = ad.max(max_rel_err(&closed.feature_sum, &tape_sum));
        // First sample through the individual closed forms.
        let single = Instance {
            tau: inst.tau,
            w: inst.w.clone(),
            feats: vec![inst.feats[0].clone()],
            labels: vec![inst.labels[0]],
        };
        let (sw, sf) = single_closed(&inst, 0)?;
        let (stw, stf) = tape_grads(&single)?;
        ad = ad
            .max(max_rel_err(sw.data(), stw.data()))
            .max(max_rel_err(&sf, stf.data()));

        let fd = max_rel_err(closed.prototypes.data(), fw.data()).max(max_rel_err(&closed_f, ff.data()));

        report.max_autodiff_rel = report.max_autodiff_rel.max(ad);
        report.max_finite_diff_rel = report.max_finite_diff_rel.max(fd);
        if !(ad <= cfg.autodiff_tol) || !(fd <= cfg.finite_diff_tol) {
            report.failures.push(format!(
                "instance {i}: tau={} shape={:?} batch={} autodiff={ad:e} finite-diff={fd:e}",
                inst.tau,
                inst.w.shape(),
                inst.feats.len()
            ));
        }
    }
    Ok(report)
}
