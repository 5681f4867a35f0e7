//! SGD training with temperature-scaled cross-entropy, per-epoch cosine
//! annealing, convergence tracking, and temperature-controlled adversarial
//! training.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_batch, AttackConfig, LossKind, Target};
use crate::autodiff::{ParameterStore, Tape};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::exec::{chunks, Exec};
use crate::model::{EncoderSpec, Model, ParamMode};
use crate::seed;
use crate::softmax::{ce_slice, Temperature};
use crate::tensor::argmax;

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

/// Peak learning rate of the reference standard-training runs.
pub const REFERENCE_LR: f64 = 0.06;
/// Peak learning rate of the reference adversarial-training runs; the
/// `τ = 1` adversarial term carries full-size gradients at every
/// temperature.
pub const REFERENCE_AT_LR: f64 = 0.02;
pub const REFERENCE_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: Temperature,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Free-form identifier of the training data, recorded with the model.
    #[serde(default)]
    pub dataset_id: String,
    pub encoder: EncoderSpec,
}

impl TrainConfig {
    /// SGD at lr 0.1 annealed to 0, momentum 0.9.
    pub fn new(tau: Temperature, encoder: EncoderSpec, epochs: usize, seed_value: u64) -> Self {
        Self {
            tau,
            lr_max: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            epochs,
            batch_size: 128,
            seed: seed_value,
            dataset_id: String::new(),
            encoder,
        }
    }

    /// The reference blob setup: default MLP on 64-dimensional inputs, 30
    /// epochs, lr 0.06 with batches of 32. At lr 0.1 the `τ ≤ 1` runs of
    /// this MLP lose every ReLU unit within a few epochs.
    pub fn reference(tau: Temperature, seed_value: u64) -> Self {
        Self {
            lr_max: REFERENCE_LR,
            batch_size: REFERENCE_BATCH,
            dataset_id: "reference-blobs".into(),
            ..Self::new(tau, EncoderSpec::default_mlp(64), 30, seed_value)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::Usage(format!(
                "need lr_max >= lr_min >= 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Usage(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be at least 1".into()));
        }
        self.encoder.validate()
    }
}

/// Adversarial training: the clean term uses the training temperature, the
/// adversarial term and the inner attack use `τ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtConfig {
    pub train: TrainConfig,
    pub attack_steps: usize,
    pub epsilon: f64,
    pub step_size: f64,
    pub random_start: bool,
}

impl AtConfig {
    /// 10-step PGD at ε = 8/255, α = 2/255, random start.
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            attack_steps: 10,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            random_start: true,
        }
    }

    /// [`TrainConfig::reference`] at [`REFERENCE_AT_LR`] with the default
    /// inner attack.
    pub fn reference(tau: Temperature, seed_value: u64) -> Self {
        let mut train = TrainConfig::reference(tau, seed_value);
        train.lr_max = REFERENCE_AT_LR;
        Self::new(train)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.epsilon >= 0.0) {
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
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_errors: usize,
    pub test_acc: f64,
    pub lr: f64,
}

/// `lr_min + (lr_max − lr_min)(1 + cos(π t / T)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Usage("cosine schedule needs T >= 1".into()));
    }
    if t > total {
        return Err(Error::Usage(format!("schedule index {t} beyond T = {total}")));
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok(lr_min + (lr_max - lr_min) * (1.0 + c) / 2.0)
}

/// Heavy-ball SGD: `v ← μ v + g; p ← p − lr v`, then gradients are zeroed.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParameterStore, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: store.ids().map(|id| vec![0.0; store.value(id).len()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for (id, v) in ids.into_iter().zip(&mut self.velocity) {
            let (p, g) = store.value_and_grad_mut(id);
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        store.zero_grads();
    }
}

/// Accuracy, error count and mean `τ = 1` cross-entropy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub errors: usize,
    pub mean_loss: f64,
}

/// Argmax predictions (lowest index on ties) for every sample.
pub fn predict(model: &Model, data: &Dataset, exec: Exec) -> Result<Vec<usize>> {
    let logits = logits_all(model, data, exec)?;
    Ok(logits.iter().map(|z| argmax(z)).collect())
}

/// Logits of every sample, in dataset order.
pub fn logits_all(model: &Model, data: &Dataset, exec: Exec) -> Result<Vec<Vec<f64>>> {
    let parts = chunks(data.len(), EVAL_CHUNK);
    let out = exec.try_map_range(parts.len(), |c| {
        let r = parts[c].clone();
        let n = data.sample_len();
        let (_, z) = model.forward_batch(&data.raw()[r.start * n..r.end * n], r.len())?;
        Ok::<_, Error>((0..r.len()).map(|i| z.row(i).to_vec()).collect::<Vec<_>>())
    })?;
    Ok(out.into_iter().flatten().collect())
}

pub fn evaluate(model: &Model, data: &Dataset, exec: Exec) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let logits = logits_all(model, data, exec)?;
    let mut errors = 0;
    let mut loss = 0.0;
    for (i, z) in logits.iter().enumerate() {
        if argmax(z) != data.label(i) {
            errors += 1;
        }
        loss += ce_slice(z, data.label(i), 1.0);
    }
    let n = data.len();
    Ok(Evaluation {
        accuracy: (n - errors) as f64 / n as f64,
        errors,
        mean_loss: loss / n as f64,
    })
}

/// Records one batch's scalar training loss on the tape.
type LossBuilder<'a> = dyn FnMut(&Model, &[usize], &mut Tape) -> Result<crate::autodiff::Var> + 'a;

fn run_training(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    exec: Exec,
    loss_fn: &mut LossBuilder<'_>,
) -> Result<(Model, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let mut model = Model::init(
        cfg.encoder.clone(),
        train.classes(),
        seed::derive_named(cfg.seed, "model"),
    )?;
    let mut sgd = Sgd::new(model.params(), cfg.momentum);
    let shuffle_seed = seed::derive_named(cfg.seed, "shuffle");
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        let mut loss_sum = 0.0;
        for idx in batches(
            train.len(),
            cfg.batch_size,
            seed::derive(shuffle_seed, epoch as u64),
            true,
        ) {
            let mut tape = Tape::new();
            let loss = loss_fn(&model, &idx, &mut tape)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    tau: cfg.tau.get(),
                    loss: value,
                });
            }
            loss_sum += value * idx.len() as f64;
            tape.backward(loss, model.params_mut())?;
            sgd.step(model.params_mut(), lr);
        }
        let train_loss = loss_sum / train.len() as f64;
        let eval = evaluate(&model, test, exec)?;
        if !train_loss.is_finite() || !model.params().ids().all(|id| model.params().value(id).is_finite()) {
            return Err(Error::Divergence {
                epoch,
                tau: cfg.tau.get(),
                loss: train_loss,
            });
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            test_errors: eval.errors,
            test_acc: eval.accuracy,
            lr,
        });
    }
    model.metadata.tau = Some(cfg.tau.get());
    model.metadata.epochs = cfg.epochs;
    Ok((model, records))
}

/// Minimizes mean `ce_loss_tau` at `cfg.tau`; evaluates on `test` after
/// every epoch.
pub fn train_standard(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    exec: Exec,
) -> Result<(Model, Vec<EpochRecord>)> {
    let tau = cfg.tau.get();
    let mut loss = |model: &Model, idx: &[usize], tape: &mut Tape| {
        let (x, y) = (train.batch_tensor(idx)?, train.gather(idx).1);
        let xv = tape.constant(x);
        let out = model.forward_tape(tape, xv, ParamMode::Trainable)?;
        tape.cross_entropy(out.logits, &y, tau)
    };
    let (mut model, records) = run_training(cfg, train, test, exec, &mut loss)?;
    model.metadata.train_config = Some(serde_json::to_value(cfg)?);
    Ok((model, records))
}

/// Minimizes `CE(F(x)/τ, y) + CE(F(x_adv), y)` with `x_adv` from an inner
/// untargeted `τ = 1` CE-PGD against the current parameters.
pub fn train_adversarial(
    cfg: &AtConfig,
    train: &Dataset,
    test: &Dataset,
    exec: Exec,
) -> Result<(Model, Vec<EpochRecord>)> {
    cfg.validate()?;
    let tau = cfg.train.tau.get();
    let attack_seed = seed::derive_named(cfg.train.seed, "inner-attack");
    let mut step = 0u64;
    let mut loss = |model: &Model, idx: &[usize], tape: &mut Tape| {
        let (x, y) = train.gather(idx);
        let attack = AttackConfig {
            loss: LossKind::Ce,
            epsilon: cfg.epsilon,
            steps: cfg.attack_steps,
            step_size: cfg.step_size,
            random_start: cfg.random_start,
            target: Target::Untargeted,
            kappa: 0.0,
            seed: seed::derive(attack_seed, step),
        };
        step += 1;
        let x_adv = pgd_batch(model, &x, &y, &attack, idx)?;
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(train.sample_shape());
        let clean_in = tape.constant(crate::tensor::Tensor::new(shape.clone(), x)?);
        let adv_in = tape.constant(crate::tensor::Tensor::new(shape, x_adv)?);
        let clean = model.forward_tape(tape, clean_in, ParamMode::Trainable)?;
        let adv = model.forward_tape(tape, adv_in, ParamMode::Trainable)?;
        let l_clean = tape.cross_entropy(clean.logits, &y, tau)?;
        let l_adv = tape.cross_entropy(adv.logits, &y, 1.0)?;
        tape.add(l_clean, l_adv)
    };
    let (mut model, records) = run_training(&cfg.train, train, test, exec, &mut loss)?;
    model.metadata.train_config = Some(serde_json::to_value(cfg)?);
    Ok((model, records))
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,test_errors,test_acc,lr";

pub fn write_epoch_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.test_errors, r.test_acc, r.lr
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 10, 0.1, 0.001).unwrap(), 0.1);
        assert!((cosine_lr(10, 10, 0.1, 0.001).unwrap() - 0.001).abs() < 1e-17);
        assert!((cosine_lr(5, 10, 0.1, 0.001).unwrap() - 0.0505).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.1, 0.0).is_err());
        assert!(cosine_lr(11, 10, 0.1, 0.0).is_err());
    }

    fn store_with(value: Vec<f64>, grad: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        let id = s.insert("p", Tensor::vector(value)).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&s, id);
        let g = tape.mul_const(p, Tensor::vector(grad)).unwrap();
        let out = tape.sum(g);
        tape.backward(out, &mut s).unwrap();
        s
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = store_with(vec![1.0, 2.0], vec![0.5, -4.0]);
        let mut opt = Sgd::new(&s, 0.0);
        opt.step(&mut s, 0.25);
        let id = s.id("p").unwrap();
        assert_eq!(s.value(id).data(), &[1.0 - 0.125, 2.0 + 1.0]);
        assert!(s.grad(id).data().iter().all(|&v| v == 0.0));
        // No gradient, no movement.
        opt.step(&mut s, 0.25);
        assert_eq!(s.value(id).data(), &[0.875, 3.0]);
    }

    #[test]
    fn momentum_two_steps_on_constant_gradient() {
        let (lr, g) = (0.1, 3.0);
        let mut s = store_with(vec![0.0], vec![g]);
        let mut opt = Sgd::new(&s, 0.9);
        opt.step(&mut s, lr);
        // Re-populate the same gradient.
        let id = s.id("p").unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&s, id);
        let m = tape.mul_const(p, Tensor::vector(vec![g])).unwrap();
        let out = tape.sum(m);
        tape.backward(out, &mut s).unwrap();
        opt.step(&mut s, lr);
        let displacement = -s.value(id).data()[0];
        assert!((displacement - lr * g * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        let enc = EncoderSpec::Mlp {
            input_shape: vec![4],
            widths: vec![4, 2],
        };
        let mut c = TrainConfig::new(Temperature::ONE, enc, 1, 0);
        c.lr_min = 0.5;
        assert!(c.validate().is_err());
        c.lr_min = 0.0;
        c.epochs = 0;
        assert!(c.validate().is_err());
        c.epochs = 1;
        c.momentum = 1.0;
        assert!(c.validate().is_err());
    }
}
