//! Parametric common corruptions at five severities.
//!
//! | kind            | parameter           | severity 1..5                 |
//! |-----------------|---------------------|-------------------------------|
//! | gaussian_noise  | noise σ             | .02 .05 .10 .15 .20           |
//! | impulse_noise   | corrupted fraction  | .01 .02 .05 .08 .12           |
//! | gaussian_blur   | kernel σ (pixels)   | .5 .8 1.2 1.6 2.0             |
//! | contrast        | contrast factor     | .85 .7 .55 .4 .3              |
//! | brightness      | additive offset     | .05 .1 .15 .2 .25             |
//!
//! Blur needs image-shaped samples (`[H, W]` or `[C, H, W]`). Every output
//! is clipped to `[0, 1]`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::Model;
use crate::seed;
use crate::train::evaluate;

/// Severity used when none is given.
pub const DEFAULT_SEVERITY: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
    Brightness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
    ];

    /// Kinds applicable to flat (non-image) samples.
    pub const FLAT: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
        }
    }

    fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.02, 0.05, 0.10, 0.15, 0.20],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.05, 0.08, 0.12],
            CorruptionKind::GaussianBlur => [0.5, 0.8, 1.2, 1.6, 2.0],
            CorruptionKind::Contrast => [0.85, 0.7, 0.55, 0.4, 0.3],
            CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.25],
        }
    }

    /// Kinds suited to samples of the given shape.
    pub fn for_shape(shape: &[usize]) -> &'static [CorruptionKind] {
        if shape.len() >= 2 {
            &Self::ALL
        } else {
            &Self::FLAT
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed_value: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Usage(format!("severity must be in 1..=5, got {severity}")));
        }
        Ok(Self {
            kind,
            severity,
            seed: seed_value,
        })
    }

    /// The kind's parameter at this severity.
    pub fn parameter(&self) -> f64 {
        self.kind.table()[usize::from(self.severity.clamp(1, 5)) - 1]
    }
}

/// Applies `spec` to one sample of the given shape.
pub fn corrupt(x: &[f64], shape: &[usize], spec: &CorruptionSpec) -> Result<Vec<f64>> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::Usage(format!(
            "severity must be in 1..=5, got {}",
            spec.severity
        )));
    }
    corrupt_with(x, shape, spec.kind, spec.parameter(), spec.seed)
}

/// Applies a corruption with an explicit parameter instead of a severity.
pub fn corrupt_with(x: &[f64], shape: &[usize], kind: CorruptionKind, param: f64, seed_value: u64) -> Result<Vec<f64>> {
    if shape.iter().product::<usize>() != x.len() {
        return Err(Error::Dimension {
            op: "corrupt",
            left: shape.to_vec(),
            right: vec![x.len()],
        });
    }
    let mut rng = seed::rng(seed_value);
    let out: Vec<f64> = match kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, param).map_err(|e| Error::Usage(e.to_string()))?;
            x.iter().map(|v| v + normal.sample(&mut rng)).collect()
        }
        CorruptionKind::ImpulseNoise => x
            .iter()
            .map(|&v| {
                if rng.gen_bool(param.clamp(0.0, 1.0)) {
                    if rng.gen_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        CorruptionKind::GaussianBlur => blur(x, shape, param)?,
        CorruptionKind::Contrast => {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| (v - mean) * param + mean).collect()
        }
        CorruptionKind::Brightness => x.iter().map(|v| v + param).collect(),
    };
    Ok(out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Separable Gaussian blur with radius `ceil(3σ)` and clamped borders.
fn blur(x: &[f64], shape: &[usize], sigma: f64) -> Result<Vec<f64>> {
    let (c, h, w) = match *shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Usage(format!(
                "gaussian_blur needs image-shaped samples, got shape {shape:?}"
            )))
        }
    };
    if sigma <= 0.0 {
        return Ok(x.to_vec());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / ks).collect();
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let t = &mut tmp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                t[y * w + xx] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * plane[y * w + at(xx as isize + i as isize - r, w)])
                    .sum();
            }
        }
        let o = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                o[y * w + xx] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * t[at(y as isize + i as isize - r, h) * w + xx])
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Corrupts every sample; sample `i` uses seed `derive(seed, i)`.
pub fn corrupt_dataset(data: &Dataset, kind: CorruptionKind, param: f64, seed_value: u64) -> Result<Dataset> {
    if kind == CorruptionKind::GaussianBlur && data.sample_shape().len() < 2 {
        return Err(Error::Usage("gaussian_blur needs image-shaped samples".into()));
    }
    let shape = data.sample_shape().to_vec();
    let mut failure = None;
    let ds = data.map_samples(format!("{}-{}", data.name, kind.name()), |i, s| {
        corrupt_with(s, &shape, kind, param, seed::derive(seed_value, i as u64)).unwrap_or_else(|e| {
            failure.get_or_insert(e.to_string());
            s.to_vec()
        })
    });
    if let Some(msg) = failure {
        return Err(Error::Usage(msg));
    }
    ds
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionReport {
    pub severity: u8,
    pub per_kind: Vec<(CorruptionKind, f64)>,
    pub mean: f64,
}

/// Accuracy under each corruption kind and the unweighted mean.
pub fn corrupted_accuracy(
    model: &Model,
    data: &Dataset,
    kinds: &[CorruptionKind],
    severity: u8,
    seed_value: u64,
    exec: Exec,
) -> Result<CorruptionReport> {
    if kinds.is_empty() {
        return Err(Error::Usage("no corruption kinds requested".into()));
    }
    let mut per_kind = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let spec = CorruptionSpec::new(kind, severity, seed_value)?;
        let cds = corrupt_dataset(
            data,
            kind,
            spec.parameter(),
            seed::derive_named(seed_value, kind.name()),
        )?;
        per_kind.push((kind, evaluate(model, &cds, exec)?.accuracy));
    }
    let mean = per_kind.iter().map(|(_, a)| a).sum::<f64>() / per_kind.len() as f64;
    Ok(CorruptionReport {
        severity,
        per_kind,
        mean,
    })
}

pub const CORRUPTION_CSV_HEADER: &str = "kind,severity,accuracy";

pub fn write_corruption_csv(path: &Path, reports: &[CorruptionReport]) -> Result<()> {
    let mut out = String::from(CORRUPTION_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for (k, a) in &r.per_kind {
            out.push_str(&format!("{},{},{}\n", k.name(), r.severity, a));
        }
        out.push_str(&format!("mean,{},{}\n", r.severity, r.mean));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
