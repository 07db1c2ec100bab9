//! Config-driven experiment runs and their on-disk artifacts.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};

use crate::advrobust::{adv_train, eps_sweep, eval_accuracy, AttackConfig};
use crate::corruptions::{eval_corruption_grid, Corruption};
use crate::dataset::LabeledImages;
use crate::diffgraph::{checkpoint, evaluate, NetworkSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::harness::config::{CheckpointMeta, ExperimentConfig, ExperimentKind};
use crate::harness::seed;
use crate::harness::synthetic::noise_textures;
use crate::labelnoise::label_noise_protocol;
use crate::ooddetect::{one_class_protocol, DetectionReport};
use crate::report::{csv_table, EvalReport};
use crate::selfsup::{prepare, Batch, LossSpec};
use crate::training::{fit, EpochLog, TrainConfig};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "SELFROBUST_THREADS";

/// Size the global rayon pool from `SELFROBUST_THREADS` if set.
pub fn init_thread_pool() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v} is not a positive integer")))?;
    // A pool built earlier in the process wins; that is not an error here.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub kind: ExperimentKind,
    pub code_version: String,
    pub created_unix: u64,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EvalReport,
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Train with a combined loss on labeled data.
pub fn train_with_loss(
    spec: &NetworkSpec,
    data: &LabeledImages<f32>,
    train: &TrainConfig,
    loss: &LossSpec,
    run_seed: u64,
) -> Result<(ParameterSet<f32>, Vec<EpochLog>)> {
    let mut params = ParameterSet::<f32>::init(spec, seed::derive(run_seed, "init"));
    let logs = fit(&mut params, data.len(), train, seed::derive(run_seed, "train"), &BTreeSet::new(), |idx, p| {
        let batch = Batch::labeled(data.images.select(idx), idx.iter().map(|&i| data.labels[i]).collect());
        let prepared = prepare(spec, &batch, loss, None)?;
        let e = evaluate(spec, p, &prepared.images, &prepared.objective, true, false)?;
        Ok((e.loss, e.param_grads.expect("requested")))
    })?;
    Ok((params, logs))
}

fn write(dir: &Path, name: &str, text: &str, artifacts: &mut Vec<String>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    artifacts.push(name.to_string());
    Ok(())
}

fn save_checkpoint(
    dir: &Path,
    cfg: &ExperimentConfig,
    base: &Path,
    params: &ParameterSet<f32>,
    artifacts: &mut Vec<String>,
) -> Result<()> {
    let ckpt = dir.join("model.srb");
    checkpoint::save(params, &ckpt)?;
    CheckpointMeta {
        network: cfg.network.clone(),
        data: cfg.data.clone(),
        base_dir: base.to_path_buf(),
        seed: cfg.seed,
    }
    .save(&ckpt)?;
    artifacts.push("model.srb".into());
    artifacts.push("model.srb.json".into());
    Ok(())
}

fn robust_csv(report: &EvalReport) -> String {
    csv_table(
        &["epsilon", "epsilon_255", "steps", "alpha", "accuracy"],
        report.robust.iter().map(|r| {
            vec![
                format!("{}", r.epsilon),
                format!("{}", r.epsilon * 255.0),
                r.steps.to_string(),
                format!("{}", r.alpha),
                format!("{}", r.accuracy),
            ]
        }),
    )
}

/// Run an already-parsed config; relative paths resolve against `base`.
pub fn run_config(cfg: &ExperimentConfig, base: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let dir = base.join(&cfg.output_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let data = cfg.data.load(base, seed::derive(cfg.seed, "data"))?;
    info!("loaded {} ({} train, {} test)", data.provenance, data.train.len(), data.test.len());
    let spec = &cfg.network;
    let mut artifacts = Vec::new();
    let mut report;
    match cfg.kind {
        ExperimentKind::Adv => {
            let a = cfg.adv.as_ref().expect("validated");
            report = EvalReport::new("adv");
            let mut params = ParameterSet::<f32>::init(spec, seed::derive(cfg.seed, "init"));
            report.training = adv_train(spec, &data.train, &a.train_config(), &mut params, seed::derive(cfg.seed, "train"))?;
            save_checkpoint(&dir, cfg, base, &params, &mut artifacts)?;
            let (attacks, skipped) = eval_attacks(&a.eval, &a.eps_sweep);
            if skipped > 0 {
                report.notes.push(format!("{skipped} zero-step evaluation adversaries skipped"));
            }
            let eval = eval_accuracy(spec, &params, &data.test, &attacks, seed::derive(cfg.seed, "eval"))?;
            report.clean_accuracy = eval.clean_accuracy;
            report.robust = eval.robust;
            write(&dir, "robust.csv", &robust_csv(&report), &mut artifacts)?;
        }
        ExperimentKind::Corruptions => {
            let c = cfg.corruptions.as_ref().expect("validated");
            report = EvalReport::new("corruptions");
            let (params, logs) = train_with_loss(spec, &data.train, &c.train, &c.loss, seed::derive(cfg.seed, "model"))?;
            report.training = logs;
            save_checkpoint(&dir, cfg, base, &params, &mut artifacts)?;
            let kinds: Vec<&dyn Corruption> = c.kinds.iter().map(|k| k as &dyn Corruption).collect();
            let grid = eval_corruption_grid(spec, &params, &data.test, &kinds, &c.severities, seed::derive(cfg.seed, "corrupt"))?;
            report.clean_accuracy = Some(grid.clean_accuracy);
            write(&dir, "corruption.csv", &grid.to_csv(), &mut artifacts)?;
            report.corruption = Some(grid);
        }
        ExperimentKind::Labelnoise => {
            let l = cfg.labelnoise.as_ref().expect("validated");
            report = EvalReport::new("labelnoise");
            let curve = label_noise_protocol(spec, &data, l, seed::derive(cfg.seed, "labelnoise"))?;
            write(&dir, "label_noise_curve.csv", &curve.to_csv(), &mut artifacts)?;
            report.label_noise = Some(curve);
        }
        ExperimentKind::Ood => {
            let o = cfg.ood.as_ref().expect("validated");
            report = EvalReport::new("ood");
            let outliers = if o.methods.iter().any(|m| m.oe_weight > 0.0) {
                Some(noise_textures(o.outliers, data.image_shape(), seed::derive(cfg.seed, "outliers"))?)
            } else {
                None
            };
            let methods = o
                .methods
                .iter()
                .map(|m| {
                    let net = m.network.as_ref().unwrap_or(spec);
                    one_class_protocol(net, &data, &m.config(), &m.name, outliers.as_ref(), seed::derive(cfg.seed, "ood"))
                })
                .collect::<Result<Vec<_>>>()?;
            let det = DetectionReport { methods };
            write(&dir, "auroc.csv", &det.to_csv(), &mut artifacts)?;
            report.detection = Some(det);
        }
    }
    write(&dir, "report.json", &report.to_json()?, &mut artifacts)?;
    let manifest = Manifest {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        kind: cfg.kind,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        artifacts,
    };
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
    info!("wrote {}", dir.display());
    Ok(RunOutput { report, dir, manifest })
}

/// Load, validate and run the config at `config_path`. Relative paths in the
/// config resolve against the config file's directory.
pub fn run_experiment(config_path: &Path) -> Result<RunOutput> {
    let cfg = ExperimentConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    run_config(&cfg, base)
}

fn eval_attacks(eval: &[AttackConfig], sweep_255: &[f64]) -> (Vec<AttackConfig>, usize) {
    let mut attacks: Vec<AttackConfig> = eval.to_vec();
    if let Some(base) = eval.first() {
        attacks.extend(eps_sweep(base, sweep_255));
    }
    let before = attacks.len();
    attacks.retain(|a| a.steps > 0);
    let skipped = before - attacks.len();
    (attacks, skipped)
}

fn load_checkpoint(ckpt: &Path) -> Result<(CheckpointMeta, ParameterSet<f32>)> {
    let meta = CheckpointMeta::load(ckpt)?;
    let params: ParameterSet<f32> = checkpoint::load(ckpt)?;
    params.validate(&meta.network)?;
    Ok((meta, params))
}

/// Clean and robust test accuracy of a saved model.
pub fn eval_adv_checkpoint(ckpt: &Path, base_attack: &AttackConfig, sweep_255: &[f64]) -> Result<EvalReport> {
    let (meta, params) = load_checkpoint(ckpt)?;
    let data = meta.data.load(&meta.base_dir, seed::derive(meta.seed, "data"))?;
    let attacks = if sweep_255.is_empty() {
        vec![*base_attack]
    } else {
        eps_sweep(base_attack, sweep_255)
    };
    let (attacks, _) = eval_attacks(&attacks, &[]);
    eval_accuracy(&meta.network, &params, &data.test, &attacks, seed::derive(meta.seed, "eval"))
}

/// Corruption grid of a saved model over every built-in kind and severity.
pub fn eval_corruptions_checkpoint(ckpt: &Path) -> Result<EvalReport> {
    let (meta, params) = load_checkpoint(ckpt)?;
    let data = meta.data.load(&meta.base_dir, seed::derive(meta.seed, "data"))?;
    let kinds: Vec<&dyn Corruption> = crate::corruptions::CorruptionKind::ALL
        .iter()
        .map(|k| k as &dyn Corruption)
        .collect();
    let grid = eval_corruption_grid(
        &meta.network,
        &params,
        &data.test,
        &kinds,
        &crate::corruptions::SEVERITIES,
        seed::derive(meta.seed, "corrupt"),
    )?;
    let mut report = EvalReport::new("corruptions");
    report.clean_accuracy = Some(grid.clean_accuracy);
    report.corruption = Some(grid);
    Ok(report)
}
