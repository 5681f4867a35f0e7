//! Temperature sweeps: one entry per (training kind, τ, replicate), each
//! trained, attacked, corrupted and analyzed, then assembled in τ order.
//!
//! Sub-seeds per replicate `r` (all from the master seed `m`):
//! `data = derive(derive_named(m, "data"), r)`, and likewise for `train`,
//! `attack` and `corrupt`. Every temperature of a replicate shares the same
//! data and initialization seed, so runs differ only in τ.
//!
//! Bundle layout:
//!
//! ```text
//! <out>/config.json
//! <out>/results.csv          one row per entry
//! <out>/table.csv            replicate means per (kind, τ)
//! <out>/<kind>/tau_<τ>_r<r>/{model.json, epochs.csv, attack_<name>.csv,
//!                            corruption.csv, variance.csv, logit_shift.csv,
//!                            geometry.csv}
//! <out>/manifest.json
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tempscale_core::attack::{attack_dataset, robust_accuracy, write_attack_csv, Target};
use tempscale_core::corrupt::{corrupted_accuracy, write_corruption_csv, CorruptionKind};
use tempscale_core::data::{Dataset, DatasetSpec};
use tempscale_core::geometry::{
    aggregate, logit_shifts, variance_summary, write_geometry_csv, write_logit_shift_csv, write_variance_csv,
    ShiftSummary,
};
use tempscale_core::model::Model;
use tempscale_core::seed::{derive, derive_named};
use tempscale_core::softmax::Temperature;
use tempscale_core::train::{evaluate, train_adversarial, train_standard, write_epoch_csv, EpochRecord};
use tempscale_core::Exec;

use crate::config::{AttackSpec, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RunKind {
    Standard,
    Adversarial,
}

impl RunKind {
    pub fn name(self) -> &'static str {
        match self {
            RunKind::Standard => "standard",
            RunKind::Adversarial => "adversarial",
        }
    }
}

/// Per-replicate sub-seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub attack: u64,
    pub corrupt: u64,
}

impl Seeds {
    pub fn for_replicate(master: u64, replicate: usize) -> Self {
        let r = replicate as u64;
        Self {
            data: derive(derive_named(master, "data"), r),
            train: derive(derive_named(master, "train"), r),
            attack: derive(derive_named(master, "attack"), r),
            corrupt: derive(derive_named(master, "corrupt"), r),
        }
    }
}

/// Train/test splits for a replicate. Blob specs are re-seeded with the
/// replicate's data seed; IDX paths resolve against `cache_dir`.
pub fn build_dataset(spec: &DatasetSpec, data_seed: u64, cache_dir: Option<&Path>) -> CliResult<(Dataset, Dataset)> {
    let spec = match spec {
        DatasetSpec::Blobs(b) => DatasetSpec::Blobs(tempscale_core::data::BlobSpec {
            seed: data_seed,
            ..b.clone()
        }),
        DatasetSpec::BlobImages(b) => DatasetSpec::BlobImages(tempscale_core::data::BlobSpec {
            seed: data_seed,
            ..b.clone()
        }),
        other => other.clone(),
    };
    Ok(spec.build(cache_dir)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSummary {
    pub name: String,
    pub robust_accuracy: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryResult {
    pub kind: RunKind,
    pub tau: Temperature,
    pub replicate: usize,
    pub epochs: Vec<EpochRecord>,
    pub eval: ModelEval,
    /// Entry directory relative to the bundle root.
    pub dir: PathBuf,
}

impl ModelEval {
    pub fn attack(&self, name: &str) -> Option<&AttackSummary> {
        self.attacks.iter().find(|a| a.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub entries: Vec<EntryResult>,
    pub manifest: Manifest,
    pub out: PathBuf,
}

impl SweepResult {
    pub fn select(&self, kind: RunKind, tau: f64) -> Vec<&EntryResult> {
        self.entries
            .iter()
            .filter(|e| e.kind == kind && e.tau.get() == tau)
            .collect()
    }
}

struct Entry {
    kind: RunKind,
    tau: Temperature,
    replicate: usize,
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// The attack whose adversarial examples feed the logit-shift analysis:
/// `pgd20` if configured, else the first untargeted attack.
fn shift_attack(attacks: &[AttackSpec]) -> Option<&AttackSpec> {
    attacks
        .iter()
        .find(|a| a.name == "pgd20")
        .or_else(|| attacks.iter().find(|a| a.target == Target::Untargeted))
}

/// Everything measured on one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEval {
    pub clean_accuracy: f64,
    pub test_errors: usize,
    pub attacks: Vec<AttackSummary>,
    pub corruption_mean: Option<f64>,
    pub variance_euclidean_median: Option<f64>,
    pub variance_cosine_median: Option<f64>,
    pub shift: Option<ShiftSummary>,
}

/// Attacks, corruptions and analyses of a trained model; writes the
/// per-entry CSVs into `dir`.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &Model,
    test: &Dataset,
    seeds: &Seeds,
    dir: &Path,
    exec: Exec,
) -> CliResult<ModelEval> {
    let clean = evaluate(model, test, exec)?;
    let mut attacks = Vec::with_capacity(cfg.attacks.len());
    for a in &cfg.attacks {
        let report = robust_accuracy(model, test, &a.to_config(derive_named(seeds.attack, &a.name)), exec)?;
        write_attack_csv(&dir.join(format!("attack_{}.csv", a.name)), &report.outcomes)?;
        attacks.push(AttackSummary {
            name: a.name.clone(),
            robust_accuracy: report.robust_accuracy,
            success_rate: report.success_rate,
        });
    }
    let kinds: Vec<CorruptionKind> = if cfg.corruptions.kinds.is_empty() {
        CorruptionKind::for_shape(test.sample_shape()).to_vec()
    } else {
        cfg.corruptions.kinds.clone()
    };
    let corruption = if kinds.is_empty() {
        None
    } else {
        let report = corrupted_accuracy(model, test, &kinds, cfg.corruptions.severity, seeds.corrupt, exec)?;
        write_corruption_csv(&dir.join("corruption.csv"), std::slice::from_ref(&report))?;
        Some(report.mean)
    };
    let (mut variance, mut shift) = (None, None);
    if cfg.analysis {
        let v = variance_summary(model, test, exec)?;
        write_variance_csv(&dir.join("variance.csv"), &v)?;
        write_geometry_csv(model, test, &dir.join("geometry.csv"), exec)?;
        variance = Some((v.euclidean.stats.median, v.cosine.as_ref().map(|c| c.stats.median)));
        if let Some(a) = shift_attack(&cfg.attacks) {
            let adv = attack_dataset(model, test, &a.to_config(derive_named(seeds.attack, &a.name)), exec)?;
            let records = logit_shifts(model, test, &adv, exec)?;
            write_logit_shift_csv(&dir.join("logit_shift.csv"), &records)?;
            shift = Some(aggregate(&records)?);
        }
    }
    Ok(ModelEval {
        clean_accuracy: clean.accuracy,
        test_errors: clean.errors,
        attacks,
        corruption_mean: corruption,
        variance_euclidean_median: variance.map(|v| v.0),
        variance_cosine_median: variance.and_then(|v| v.1),
        shift,
    })
}

fn run_entry(
    cfg: &ExperimentConfig,
    entry: &Entry,
    data: &(Dataset, Dataset),
    out: &Path,
    exec: Exec,
) -> CliResult<EntryResult> {
    let seeds = Seeds::for_replicate(cfg.master_seed, entry.replicate);
    let (train, test) = data;
    let (model, epochs) = match entry.kind {
        RunKind::Standard => train_standard(&cfg.train_config(entry.tau, seeds.train)?, train, test, exec)?,
        RunKind::Adversarial => {
            let adv = cfg.adversarial.as_ref().expect("adversarial entries need the section");
            train_adversarial(&cfg.at_config(adv, entry.tau, seeds.train)?, train, test, exec)?
        }
    };
    let rel = PathBuf::from(entry.kind.name()).join(format!("tau_{}_r{}", entry.tau, entry.replicate));
    let dir = out.join(&rel);
    create_dir(&dir)?;
    model.save(&dir.join("model.json"))?;
    write_epoch_csv(&dir.join("epochs.csv"), &epochs)?;
    let eval = evaluate_model(cfg, &model, test, &seeds, &dir, exec)?;
    Ok(EntryResult {
        kind: entry.kind,
        tau: entry.tau,
        replicate: entry.replicate,
        epochs,
        eval,
        dir: rel,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn results_header(cfg: &ExperimentConfig) -> String {
    let mut h = String::from("kind,tau,replicate,clean_acc,test_errors");
    for a in &cfg.attacks {
        let _ = write!(h, ",{0}_robust_acc,{0}_success_rate", a.name);
    }
    h.push_str(",corruption_acc,variance_euclidean_median,variance_cosine_median");
    h.push_str(",shift_target_mean,shift_error_prone_mean,shift_abs_mean");
    h
}

fn result_values(e: &EntryResult) -> Vec<Option<f64>> {
    let e = &e.eval;
    let mut v = vec![Some(e.clean_accuracy), Some(e.test_errors as f64)];
    for a in &e.attacks {
        v.push(Some(a.robust_accuracy));
        v.push(Some(a.success_rate));
    }
    v.extend([e.corruption_mean, e.variance_euclidean_median, e.variance_cosine_median]);
    v.extend([
        e.shift.map(|s| s.mean_target_delta),
        e.shift.map(|s| s.mean_error_prone_delta),
        e.shift.map(|s| s.mean_abs_delta),
    ]);
    v
}

fn write_results(cfg: &ExperimentConfig, entries: &[EntryResult], out: &Path) -> CliResult<()> {
    let header = results_header(cfg);
    let mut rows = format!("{header}\n");
    for e in entries {
        let _ = write!(rows, "{},{},{}", e.kind.name(), e.tau, e.replicate);
        for v in result_values(e) {
            let _ = write!(rows, ",{}", opt(v));
        }
        rows.push('\n');
    }
    write_text(&out.join("results.csv"), &rows)?;

    // Replicate means, one row per (kind, τ).
    let table_header = header.replacen("kind,tau,replicate,", "kind,tau,replicates,", 1);
    let mut table = format!("{table_header}\n");
    let mut i = 0;
    while i < entries.len() {
        let j = entries[i..]
            .iter()
            .position(|e| e.kind != entries[i].kind || e.tau != entries[i].tau)
            .map_or(entries.len(), |p| i + p);
        let group = &entries[i..j];
        let _ = write!(table, "{},{},{}", group[0].kind.name(), group[0].tau, group.len());
        let cols: Vec<Vec<Option<f64>>> = group.iter().map(result_values).collect();
        for c in 0..cols[0].len() {
            let vals: Option<Vec<f64>> = cols.iter().map(|row| row[c]).collect();
            let mean = vals.map(|v| v.iter().sum::<f64>() / v.len() as f64);
            let _ = write!(table, ",{}", opt(mean));
        }
        table.push('\n');
        i = j;
    }
    write_text(&out.join("table.csv"), &table)
}

/// Runs every entry of `cfg` and writes the bundle to `out`.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path, cache_dir: Option<&Path>, exec: Exec) -> CliResult<SweepResult> {
    cfg.validate()?;
    create_dir(out)?;
    write_text(&out.join("config.json"), &(cfg.to_json() + "\n"))?;

    let mut temps = cfg.temperatures.clone();
    temps.sort_by(|a, b| a.get().total_cmp(&b.get()));
    temps.dedup();
    let mut entries = Vec::new();
    for &tau in &temps {
        for r in 0..cfg.replicates {
            entries.push(Entry {
                kind: RunKind::Standard,
                tau,
                replicate: r,
            });
        }
    }
    if let Some(adv) = &cfg.adversarial {
        let mut at = adv.temperatures.clone();
        at.sort_by(|a, b| a.get().total_cmp(&b.get()));
        at.dedup();
        for &tau in &at {
            for r in 0..cfg.replicates {
                entries.push(Entry {
                    kind: RunKind::Adversarial,
                    tau,
                    replicate: r,
                });
            }
        }
    }

    let data: Vec<(Dataset, Dataset)> = (0..cfg.replicates)
        .map(|r| build_dataset(&cfg.dataset, Seeds::for_replicate(cfg.master_seed, r).data, cache_dir))
        .collect::<CliResult<_>>()?;
    let results: Vec<CliResult<EntryResult>> = exec.map_range(entries.len(), |i| {
        run_entry(cfg, &entries[i], &data[entries[i].replicate], out, exec)
    });
    let results: Vec<EntryResult> = results.into_iter().collect::<CliResult<_>>()?;
    write_results(cfg, &results, out)?;

    let mut manifest = Manifest::new("sweep", cfg.hash(), cfg.master_seed);
    for r in 0..cfg.replicates {
        let s = Seeds::for_replicate(cfg.master_seed, r);
        for (name, v) in [
            ("data", s.data),
            ("train", s.train),
            ("attack", s.attack),
            ("corrupt", s.corrupt),
        ] {
            manifest.seeds.insert(format!("{name}/r{r}"), v);
        }
    }
    let manifest = manifest.write(out)?;
    Ok(SweepResult {
        entries: results,
        manifest,
        out: out.to_path_buf(),
    })
}
