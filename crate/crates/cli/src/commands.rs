//! Subcommand implementations. Each returns the text to print on success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tempscale_core::attack::attack_dataset;
use tempscale_core::attack::{robust_accuracy, write_attack_csv, AttackConfig, LossKind, Target};
use tempscale_core::corrupt::{corrupted_accuracy, write_corruption_csv, CorruptionKind, CorruptionSpec};
use tempscale_core::data::{Dataset, DatasetSpec};
use tempscale_core::geometry::{
    aggregate, export_features, logit_shifts, variance_summary, write_geometry_csv, write_logit_shift_csv,
    write_variance_csv,
};
use tempscale_core::gradcheck::{self, GradCheckConfig};
use tempscale_core::model::Model;
use tempscale_core::seed::derive_named;
use tempscale_core::softmax::Temperature;
use tempscale_core::train::{evaluate, train_adversarial, train_standard, write_epoch_csv};
use tempscale_core::Exec;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::sweep::{build_dataset, run_sweep, Seeds};

/// Where evaluation data comes from: a config's dataset, a dataset-spec
/// file, or the reference blobs.
#[derive(Debug, Clone, Default)]
pub struct DataSource {
    pub config: Option<PathBuf>,
    /// `reference` or a path to a JSON dataset spec.
    pub dataset: Option<String>,
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
}

impl DataSource {
    /// Master seed and test split; blob data uses replicate 0's data seed,
    /// matching what `train`/`sweep` trained on.
    pub fn resolve(&self) -> CliResult<(u64, Dataset, Dataset)> {
        let (spec, master) = match (&self.config, &self.dataset) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config("give either --config or --dataset, not both".into()));
            }
            (Some(path), None) => {
                let cfg = ExperimentConfig::load(path)?;
                (cfg.dataset, self.seed.unwrap_or(cfg.master_seed))
            }
            (None, Some(d)) if d != "reference" => {
                let path = Path::new(d);
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let spec: DatasetSpec =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{d}: {e}")))?;
                (spec, self.seed.unwrap_or(0))
            }
            _ => (DatasetSpec::reference(0), self.seed.unwrap_or(0)),
        };
        let (train, test) = build_dataset(&spec, Seeds::for_replicate(master, 0).data, self.cache_dir.as_deref())?;
        Ok((master, train, test))
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub tau: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub adversarial: bool,
    pub cache_dir: Option<PathBuf>,
}

pub fn train(args: &TrainArgs, exec: Exec) -> CliResult<String> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    let seeds = Seeds::for_replicate(cfg.master_seed, 0);
    let (train, test) = build_dataset(&cfg.dataset, seeds.data, args.cache_dir.as_deref())?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&out)?;
    let (model, records, tau) = if args.adversarial {
        let adv = cfg.adversarial.clone().unwrap_or_default();
        let tau = match args.tau {
            Some(t) => Temperature::new(t)?,
            None => adv.temperatures[0],
        };
        let (m, r) = train_adversarial(&cfg.at_config(&adv, tau, seeds.train)?, &train, &test, exec)?;
        (m, r, tau)
    } else {
        let tau = match args.tau {
            Some(t) => Temperature::new(t)?,
            None => cfg.temperatures[0],
        };
        let (m, r) = train_standard(&cfg.train_config(tau, seeds.train)?, &train, &test, exec)?;
        (m, r, tau)
    };
    model.save(&out.join("model.json"))?;
    write_epoch_csv(&out.join("epochs.csv"), &records)?;
    std::fs::write(out.join("config.json"), cfg.to_json() + "\n").map_err(|e| CliError::io(&out, e))?;
    let mut manifest = Manifest::new("train", cfg.hash(), cfg.master_seed);
    manifest.seeds.insert("data/r0".into(), seeds.data);
    manifest.seeds.insert("train/r0".into(), seeds.train);
    manifest.write(&out)?;
    let last = records.last().expect("at least one epoch");
    Ok(format!(
        "trained tau={tau} for {} epochs: test accuracy {:.4} ({} errors), final train loss {:.6}\nwrote {}",
        records.len(),
        last.test_acc,
        last.test_errors,
        last.train_loss,
        out.display()
    ))
}

pub struct AttackArgs {
    pub model: PathBuf,
    pub data: DataSource,
    pub eps: f64,
    pub steps: usize,
    pub step_size: Option<f64>,
    pub loss: LossKind,
    pub target: Target,
    pub kappa: f64,
    pub random_start: bool,
    pub out: PathBuf,
}

pub fn parse_target(s: &str) -> CliResult<Target> {
    match s {
        "untargeted" | "none" => Ok(Target::Untargeted),
        "error-prone" => Ok(Target::ErrorProne),
        n => n.parse().map(Target::Class).map_err(|_| {
            CliError::Config(format!(
                "target must be untargeted, error-prone or a class index, got {s:?}"
            ))
        }),
    }
}

pub fn attack_eval(args: &AttackArgs, exec: Exec) -> CliResult<String> {
    let model = Model::load(&args.model)?;
    let (master, _, test) = args.data.resolve()?;
    let cfg = AttackConfig {
        loss: args.loss,
        epsilon: args.eps,
        steps: args.steps,
        step_size: args.step_size.unwrap_or(args.eps / 4.0),
        random_start: args.random_start,
        target: args.target,
        kappa: args.kappa,
        seed: derive_named(Seeds::for_replicate(master, 0).attack, "attack-eval"),
    };
    if cfg.step_size.is_nan() || cfg.step_size <= 0.0 {
        return Err(CliError::Config(
            "--step-size must be positive (pass it explicitly when --eps is 0)".into(),
        ));
    }
    let report = robust_accuracy(&model, &test, &cfg, exec)?;
    write_attack_csv(&args.out, &report.outcomes)?;
    Ok(format!(
        "clean accuracy {:.4}, robust accuracy {:.4}, success rate {:.4} over {} samples\nwrote {}",
        report.clean_accuracy,
        report.robust_accuracy,
        report.success_rate,
        report.outcomes.len(),
        args.out.display()
    ))
}

pub struct CorruptArgs {
    pub model: PathBuf,
    pub data: DataSource,
    pub severity: Option<u8>,
    pub kinds: Option<String>,
    pub out: PathBuf,
}

pub fn corrupt_eval(args: &CorruptArgs, exec: Exec) -> CliResult<String> {
    let model = Model::load(&args.model)?;
    let (master, _, test) = args.data.resolve()?;
    let kinds: Vec<CorruptionKind> = match &args.kinds {
        Some(list) => list.split(',').map(|k| k.trim().parse()).collect::<Result<_, _>>()?,
        None => CorruptionKind::for_shape(test.sample_shape()).to_vec(),
    };
    let seed = Seeds::for_replicate(master, 0).corrupt;
    let severities: Vec<u8> = match args.severity {
        Some(s) => vec![s],
        None => (1..=5).collect(),
    };
    let mut reports = Vec::new();
    for s in severities {
        CorruptionSpec::new(kinds[0], s, seed)?;
        reports.push(corrupted_accuracy(&model, &test, &kinds, s, seed, exec)?);
    }
    write_corruption_csv(&args.out, &reports)?;
    let mut text = String::new();
    for r in &reports {
        let _ = writeln!(text, "severity {}: mean corrupted accuracy {:.4}", r.severity, r.mean);
    }
    let _ = write!(text, "wrote {}", args.out.display());
    Ok(text)
}

pub struct AnalyzeArgs {
    pub model: PathBuf,
    pub data: DataSource,
    pub eps: f64,
    pub steps: usize,
    pub out: PathBuf,
}

pub fn analyze(args: &AnalyzeArgs, exec: Exec) -> CliResult<String> {
    let model = Model::load(&args.model)?;
    let (master, _, test) = args.data.resolve()?;
    create_dir(&args.out)?;
    let clean = evaluate(&model, &test, exec)?;
    let variance = variance_summary(&model, &test, exec)?;
    write_variance_csv(&args.out.join("variance.csv"), &variance)?;
    write_geometry_csv(&model, &test, &args.out.join("geometry.csv"), exec)?;
    export_features(&model, &test, &args.out.join("features.csv"), exec)?;
    let attack = AttackConfig {
        steps: args.steps,
        step_size: args.eps / 4.0,
        ..AttackConfig::pgd20(args.eps, derive_named(Seeds::for_replicate(master, 0).attack, "pgd20"))
    };
    let shift = if args.eps > 0.0 && args.steps > 0 {
        let adv = attack_dataset(&model, &test, &attack, exec)?;
        let records = logit_shifts(&model, &test, &adv, exec)?;
        write_logit_shift_csv(&args.out.join("logit_shift.csv"), &records)?;
        Some(aggregate(&records)?)
    } else {
        None
    };
    let cosine = variance
        .cosine
        .as_ref()
        .map_or("undefined (all features zero)".to_string(), |c| {
            format!("{:.6e}", c.stats.median)
        });
    let mut text = format!(
        "clean accuracy {:.4}\nmedian negative-prototype variance: euclidean {:.6e}, cosine {cosine}\n",
        clean.accuracy, variance.euclidean.stats.median
    );
    if let Some(s) = shift {
        let _ = writeln!(
            text,
            "logit shift: target {:+.4}, error-prone {:+.4}, mean |delta| {:.4}",
            s.mean_target_delta, s.mean_error_prone_delta, s.mean_abs_delta
        );
    }
    let _ = write!(text, "wrote {}", args.out.display());
    Ok(text)
}

pub struct SweepArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
}

pub fn sweep(args: &SweepArgs, exec: Exec) -> CliResult<String> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let result = run_sweep(&cfg, &out, args.cache_dir.as_deref(), exec)?;
    let table = std::fs::read_to_string(out.join("table.csv")).map_err(|e| CliError::io(&out, e))?;
    Ok(format!(
        "{table}{} entries, {} files in manifest\nwrote {}",
        result.entries.len(),
        result.manifest.files.len(),
        out.display()
    ))
}

pub fn grad_check(seed: u64, instances: usize) -> CliResult<String> {
    let report = gradcheck::run(&GradCheckConfig {
        seed,
        instances,
        ..Default::default()
    })?;
    let summary = format!(
        "{} instances: max relative error vs autodiff {:.3e}, vs finite differences {:.3e}",
        report.instances, report.max_autodiff_rel, report.max_finite_diff_rel
    );
    if report.passed() {
        Ok(format!("{summary}\nPASS"))
    } else {
        Err(CliError::Check(format!("{summary}\n{}", report.failures.join("\n"))))
    }
}
