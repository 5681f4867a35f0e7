//! Feature/prototype geometry diagnostics: distances and cosine
//! similarities to every prototype, the spread of negative-class distances,
//! logit shifts under attack, and feature export.
//!
//! Variances are population variances (divide by the count). Euclidean
//! distances are min-max normalized per model over every (sample,
//! prototype) pair before the per-sample variance is taken; cosine
//! similarities are used raw. Quartiles interpolate linearly between order
//! statistics.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::Model;
use crate::softmax::{softmax_slice, Probabilities};
use crate::tensor::{dot, norm2, Tensor};
use crate::train::EVAL_CHUNK;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeGeometry {
    pub label: usize,
    /// `‖f(x) − w_j‖₂` per class.
    pub distances: Vec<f64>,
    /// `⟨f(x), w_j⟩ / (‖f(x)‖‖w_j‖)` per class.
    pub cosines: Vec<f64>,
}

/// Geometry of a feature vector against the given prototypes.
pub fn geometry_of(features: &[f64], prototypes: &[Vec<f64>], label: usize) -> Result<PrototypeGeometry> {
    let nf = norm2(features);
    if nf == 0.0 {
        return Err(Error::DegenerateGeometry("feature vector has zero norm".into()));
    }
    let mut distances = Vec::with_capacity(prototypes.len());
    let mut cosines = Vec::with_capacity(prototypes.len());
    for (j, w) in prototypes.iter().enumerate() {
        let nw = norm2(w);
        if nw == 0.0 {
            return Err(Error::DegenerateGeometry(format!("prototype {j} has zero norm")));
        }
        distances.push(features.iter().zip(w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        cosines.push((dot(features, w) / (nf * nw)).clamp(-1.0, 1.0));
    }
    Ok(PrototypeGeometry {
        label,
        distances,
        cosines,
    })
}

pub fn prototype_geometry(model: &Model, x: &[f64], y: usize) -> Result<PrototypeGeometry> {
    if y >= model.classes() {
        return Err(Error::Index {
            index: y,
            len: model.classes(),
        });
    }
    geometry_of(&model.features(x)?, &model.prototypes(), y)
}

/// The most probable class other than `y` (lowest index on ties).
pub fn error_prone_class(p: &Probabilities, y: usize) -> usize {
    let v = p.values();
    let mut best = if y == 0 { 1 } else { 0 };
    for j in 0..v.len() {
        if j != y && v[j] > v[best] {
            best = j;
        }
    }
    best
}

/// `(v − min) / (max − min)` elementwise.
pub fn normalize_range(values: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if !(hi > lo) {
        return Err(Error::DegenerateRange(lo));
    }
    Ok(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Box-plot statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Usage("statistics of an empty sample".into()));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (s.len() - 1) as f64;
            let (i, frac) = (pos.floor() as usize, pos.fract());
            if i + 1 < s.len() {
                s[i] + frac * (s[i + 1] - s[i])
            } else {
                s[i]
            }
        };
        Ok(Self {
            min: s[0],
            q1: q(0.25),
            median: q(0.5),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            q3: q(0.75),
            max: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSummary {
    pub per_sample: Vec<f64>,
    pub stats: BoxStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    /// Variance of normalized Euclidean distances to negative prototypes.
    pub euclidean: VarianceSummary,
    /// Variance of cosine similarities to negative prototypes. Samples
    /// whose feature vector is zero are left out; `None` when that is all
    /// of them (a collapsed encoder).
    pub cosine: Option<VarianceSummary>,
    pub zero_feature_samples: usize,
}

/// Features of every sample as `[n×d]`, in dataset order.
pub fn features_all(model: &Model, data: &Dataset, exec: Exec) -> Result<Tensor> {
    let parts = crate::exec::chunks(data.len(), EVAL_CHUNK);
    let n = data.sample_len();
    let out = exec.try_map_range(parts.len(), |c| {
        let r = parts[c].clone();
        model
            .forward_batch(&data.raw()[r.start * n..r.end * n], r.len())
            .map(|(f, _)| f.into_data())
    })?;
    Tensor::new(vec![data.len(), model.feature_dim()], out.concat())
}

pub fn variance_summary(model: &Model, data: &Dataset, exec: Exec) -> Result<VarianceReport> {
    if data.is_empty() {
        return Err(Error::Usage("variance summary of an empty dataset".into()));
    }
    let feats = features_all(model, data, exec)?;
    let protos = model.prototypes();
    let m = protos.len();
    let proto_norms: Vec<f64> = protos.iter().map(|w| norm2(w)).collect();
    let mut dists = Vec::with_capacity(data.len() * m);
    let mut cos_var = Vec::with_capacity(data.len());
    let mut zero = 0;
    for i in 0..data.len() {
        let f = feats.row(i);
        let nf = norm2(f);
        for w in &protos {
            dists.push(f.iter().zip(w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
        if nf == 0.0 || proto_norms.contains(&0.0) {
            zero += 1;
            continue;
        }
        let y = data.label(i);
        let negs: Vec<f64> = (0..m)
            .filter(|&j| j != y)
            .map(|j| (dot(f, &protos[j]) / (nf * proto_norms[j])).clamp(-1.0, 1.0))
            .collect();
        cos_var.push(population_variance(&negs));
    }
    let normed = normalize_range(&dists)?;
    let euc_var: Vec<f64> = (0..data.len())
        .map(|i| {
            let y = data.label(i);
            let negs: Vec<f64> = (0..m).filter(|&j| j != y).map(|j| normed[i * m + j]).collect();
            population_variance(&negs)
        })
        .collect();
    let cosine = if cos_var.is_empty() {
        None
    } else {
        Some(VarianceSummary {
            stats: BoxStats::of(&cos_var)?,
            per_sample: cos_var,
        })
    };
    Ok(VarianceReport {
        euclidean: VarianceSummary {
            stats: BoxStats::of(&euc_var)?,
            per_sample: euc_var,
        },
        cosine,
        zero_feature_samples: zero,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitShiftRecord {
    pub label: usize,
    /// Most probable wrong class on the clean input.
    pub error_prone: usize,
    pub clean: Vec<f64>,
    pub adversarial: Vec<f64>,
    /// `adversarial − clean`.
    pub delta: Vec<f64>,
    pub target_delta: f64,
    pub error_prone_delta: f64,
}

pub fn shift_of(clean: Vec<f64>, adversarial: Vec<f64>, y: usize) -> Result<LogitShiftRecord> {
    let p = Probabilities::new(softmax_slice(&clean, 1.0))?;
    let e = error_prone_class(&p, y);
    let delta: Vec<f64> = adversarial.iter().zip(&clean).map(|(a, c)| a - c).collect();
    Ok(LogitShiftRecord {
        label: y,
        error_prone: e,
        target_delta: delta[y],
        error_prone_delta: delta[e],
        clean,
        adversarial,
        delta,
    })
}

pub fn logit_shift(model: &Model, x: &[f64], x_adv: &[f64], y: usize) -> Result<LogitShiftRecord> {
    let clean = model.forward(x)?.values().to_vec();
    let adv = model.forward(x_adv)?.values().to_vec();
    shift_of(clean, adv, y)
}

/// Logit shifts for a whole dataset and its adversarial counterpart.
pub fn logit_shifts(
    model: &Model,
    data: &Dataset,
    adversarial: &[Vec<f64>],
    exec: Exec,
) -> Result<Vec<LogitShiftRecord>> {
    if adversarial.len() != data.len() {
        return Err(Error::Dimension {
            op: "logit_shifts",
            left: vec![data.len()],
            right: vec![adversarial.len()],
        });
    }
    let adv = Dataset::new(
        "adv",
        data.sample_shape().to_vec(),
        adversarial.concat(),
        data.labels().to_vec(),
        data.classes(),
    )?;
    let clean = crate::train::logits_all(model, data, exec)?;
    let advl = crate::train::logits_all(model, &adv, exec)?;
    clean
        .into_iter()
        .zip(advl)
        .enumerate()
        .map(|(i, (c, a))| shift_of(c, a, data.label(i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSummary {
    pub mean_target_delta: f64,
    pub mean_error_prone_delta: f64,
    /// Mean of `|delta|` over every (sample, class) pair.
    pub mean_abs_delta: f64,
}

pub fn aggregate(records: &[LogitShiftRecord]) -> Result<ShiftSummary> {
    if records.is_empty() {
        return Err(Error::Usage("no logit-shift records".into()));
    }
    let n = records.len() as f64;
    let cells: usize = records.iter().map(|r| r.delta.len()).sum();
    Ok(ShiftSummary {
        mean_target_delta: records.iter().map(|r| r.target_delta).sum::<f64>() / n,
        mean_error_prone_delta: records.iter().map(|r| r.error_prone_delta).sum::<f64>() / n,
        mean_abs_delta: records
            .iter()
            .flat_map(|r| r.delta.iter())
            .map(|d| d.abs())
            .sum::<f64>()
            / cells as f64,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// CSV with header `index,label,f0,...` and one row per sample.
pub fn export_features(model: &Model, data: &Dataset, path: &Path, exec: Exec) -> Result<()> {
    let feats = features_all(model, data, exec)?;
    let mut out = String::from("index,label");
    for k in 0..model.feature_dim() {
        let _ = write!(out, ",f{k}");
    }
    out.push('\n');
    for i in 0..data.len() {
        let _ = write!(out, "{i},{}", data.label(i));
        for v in feats.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write(path, &out)
}

pub const GEOMETRY_CSV_HEADER: &str = "index,label,class,distance,normalized_distance,cosine";

/// Per (sample, prototype) distances and cosines. Cosines of zero feature
/// vectors are written empty.
pub fn write_geometry_csv(model: &Model, data: &Dataset, path: &Path, exec: Exec) -> Result<()> {
    let feats = features_all(model, data, exec)?;
    let protos = model.prototypes();
    let mut dists = Vec::with_capacity(data.len() * protos.len());
    for i in 0..data.len() {
        for w in &protos {
            dists.push(
                feats
                    .row(i)
                    .iter()
                    .zip(w)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    let normed = normalize_range(&dists)?;
    let mut out = format!("{GEOMETRY_CSV_HEADER}\n");
    for i in 0..data.len() {
        let geo = geometry_of(feats.row(i), &protos, data.label(i)).ok();
        for j in 0..protos.len() {
            let k = i * protos.len() + j;
            let cos = geo.as_ref().map_or(String::new(), |g| g.cosines[j].to_string());
            let _ = writeln!(out, "{i},{},{j},{},{},{cos}", data.label(i), dists[k], normed[k]);
        }
    }
    write(path, &out)
}

pub const VARIANCE_CSV_HEADER: &str = "metric,min,q1,median,mean,q3,max";

pub fn write_variance_csv(path: &Path, report: &VarianceReport) -> Result<()> {
    let mut out = format!("{VARIANCE_CSV_HEADER}\n");
    let rows = [
        ("euclidean", Some(&report.euclidean.stats)),
        ("cosine", report.cosine.as_ref().map(|c| &c.stats)),
    ];
    for (name, s) in rows {
        match s {
            Some(s) => {
                let _ = writeln!(
                    out,
                    "{name},{},{},{},{},{},{}",
                    s.min, s.q1, s.median, s.mean, s.q3, s.max
                );
            }
            None => {
                let _ = writeln!(out, "{name},,,,,,");
            }
        }
    }
    write(path, &out)
}

pub const LOGIT_SHIFT_CSV_HEADER: &str = "index,label,error_prone,class,clean,adversarial,delta";

pub fn write_logit_shift_csv(path: &Path, records: &[LogitShiftRecord]) -> Result<()> {
    let mut out = format!("{LOGIT_SHIFT_CSV_HEADER}\n");
    for (i, r) in records.iter().enumerate() {
        for j in 0..r.delta.len() {
            let _ = writeln!(
                out,
                "{i},{},{},{j},{},{},{}",
                r.label, r.error_prone, r.clean[j], r.adversarial[j], r.delta[j]
            );
        }
    }
    write(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coincident_and_orthogonal() {
        let g = geometry_of(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], 0).unwrap();
        assert_eq!(g.distances[0], 0.0);
        assert_eq!(g.cosines[0], 1.0);
        assert_eq!(g.cosines[1], 0.0);
        assert!((g.distances[1] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_is_degenerate() {
        assert!(matches!(
            geometry_of(&[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], 0),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(matches!(
            geometry_of(&[1.0, 0.0], &[vec![0.0, 0.0], vec![0.0, 1.0]], 0),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn error_prone_examples() {
        let p = |v: &[f64]| Probabilities::new(v.to_vec()).unwrap();
        assert_eq!(error_prone_class(&p(&[0.7, 0.2, 0.1]), 0), 1);
        assert_eq!(error_prone_class(&p(&[0.1, 0.6, 0.3]), 1), 2);
        assert_eq!(error_prone_class(&p(&[0.4, 0.2, 0.2, 0.2]), 0), 1);
        assert_eq!(error_prone_class(&p(&[0.2, 0.2, 0.4, 0.2]), 2), 0);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_range(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        let v = [0.0, 0.3, 1.0, 0.75];
        assert_eq!(normalize_range(&v).unwrap(), v.to_vec());
        assert!(matches!(normalize_range(&[3.0, 3.0]), Err(Error::DegenerateRange(_))));
    }

    #[test]
    fn population_not_sample_variance() {
        assert_eq!(population_variance(&[0.0, 1.0]), 0.25);
        assert_eq!(population_variance(&[2.0, 2.0, 2.0]), 0.0);
        // {1, 2, 3, 4}: mean 2.5, squared deviations sum to 5.
        assert_eq!(population_variance(&[1.0, 2.0, 3.0, 4.0]), 1.25);
    }

    #[test]
    fn box_stats_interpolate() {
        let s = BoxStats::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        let s = BoxStats::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
        assert_eq!(s.mean, 2.5);
    }

    #[test]
    fn identical_inputs_shift_nothing() {
        let r = shift_of(vec![1.0, 3.0, 2.0], vec![1.0, 3.0, 2.0], 1).unwrap();
        assert!(r.delta.iter().all(|&d| d == 0.0));
        assert_eq!(r.error_prone, 2);
        let s = aggregate(&[r]).unwrap();
        assert_eq!(s.mean_abs_delta, 0.0);
    }
}
