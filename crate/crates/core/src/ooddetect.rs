//! One-class anomaly detection from transformation prediction: anomaly
//! scores, AUROC, and the leave-one-in protocol.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffgraph::loss::softmax_row;
use crate::diffgraph::{evaluate, forward_trace, NetworkSpec, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::harness::seed;
use crate::selfsup::{prepare, Batch, LossSpec};
use crate::training::{fit, EpochLog, TrainConfig};
use crate::transforms::{build_ss_views, SsHead, TransformLabel, ViewConfig, ViewMode};

/// Which heads and views produce the anomaly score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub heads: BTreeSet<SsHead>,
    #[serde(default)]
    pub view_mode: ViewMode,
    #[serde(default)]
    pub shift: usize,
    /// Sum log-probabilities instead of probabilities.
    #[serde(default)]
    pub log_prob: bool,
}

impl ScoreConfig {
    pub fn rotations() -> Self {
        ScoreConfig {
            heads: [SsHead::Rotation].into(),
            view_mode: ViewMode::AllRotations,
            shift: 0,
            log_prob: false,
        }
    }

    /// Rotation, vertical and horizontal translation heads over the
    /// composed view subset.
    pub fn rotation_translation(shift: usize) -> Self {
        ScoreConfig {
            heads: [SsHead::Rotation, SsHead::Vtrans, SsHead::Htrans].into(),
            view_mode: ViewMode::ComposedSubset,
            shift,
            log_prob: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("score needs at least one head".into()));
        }
        Ok(())
    }

    pub fn view_config(&self) -> ViewConfig {
        ViewConfig {
            shift: self.shift,
            heads: self.heads.clone(),
            mode: self.view_mode,
        }
    }

    fn check(&self, spec: &NetworkSpec) -> Result<()> {
        self.validate()?;
        for &h in &self.heads {
            let k = spec.head_classes(h.name())?;
            if k != h.classes() {
                return Err(Error::Shape(format!("head `{h}` has {k} classes, expected {}", h.classes())));
            }
        }
        Ok(())
    }
}

/// Per-original scores from per-view head probabilities.
///
/// `probs[h]` is `[M, classes(heads[h])]`. Each original's score is minus
/// the sum, over its views and the heads, of the probability given to the
/// true transformation (or its log with `log_prob`).
pub fn score_views(
    labels: &[TransformLabel],
    source_index: &[usize],
    originals: usize,
    heads: &[SsHead],
    probs: &[&Tensor<f64>],
    log_prob: bool,
) -> Result<Vec<f64>> {
    if heads.len() != probs.len() || labels.len() != source_index.len() {
        return Err(Error::Shape("score inputs disagree in length".into()));
    }
    let mut scores = vec![0.0; originals];
    for (&h, p) in heads.iter().zip(probs) {
        let k = h.classes();
        if p.shape() != [labels.len(), k] {
            return Err(Error::Shape(format!(
                "probabilities for `{h}` have shape {:?}, expected [{}, {k}]",
                p.shape(),
                labels.len()
            )));
        }
        for ((row, l), &src) in p.data().chunks_exact(k).zip(labels).zip(source_index) {
            let v = row[l.class(h)];
            scores[src] -= if log_prob { v.ln() } else { v };
        }
    }
    Ok(scores)
}

/// Anomaly scores for a batch of images `[N, C, H, W]`; higher is more anomalous.
pub fn anomaly_scores(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    images: &Tensor<f32>,
    cfg: &ScoreConfig,
) -> Result<Vec<f64>> {
    cfg.check(spec)?;
    let vc = cfg.view_config();
    let heads: Vec<SsHead> = cfg.heads.iter().copied().collect();
    let names: Vec<&str> = heads.iter().map(|h| h.name()).collect();
    let per_chunk = (512 / vc.views_per_image()).max(1);
    let n = images.batch();
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(per_chunk) {
        let views = build_ss_views(&images.select(chunk), &vc)?;
        let trace = forward_trace(spec, params, &views.images, &names)?;
        let probs = names
            .iter()
            .map(|h| {
                let z = trace.logits(h)?;
                let k = z.shape()[1];
                let p: Vec<f64> = z
                    .data()
                    .chunks_exact(k)
                    .flat_map(|r| softmax_row(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
                    .collect();
                Tensor::new(vec![views.len(), k], p)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<f64>> = probs.iter().collect();
        out.extend(score_views(
            &views.labels,
            &views.source_index,
            chunk.len(),
            &heads,
            &refs,
            cfg.log_prob,
        )?);
    }
    Ok(out)
}

/// Score of a single image `[C, H, W]`.
pub fn anomaly_score(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    image: &Tensor<f32>,
    cfg: &ScoreConfig,
) -> Result<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.clone().reshape(shape)?;
    Ok(anomaly_scores(spec, params, &batch, cfg)?[0])
}

/// Mann-Whitney pair count: `2·#{out > in} + #{out = in}` over all pairs,
/// and the number of half-pairs `2·N·M`.
pub fn pairwise_count(in_scores: &[f64], out_scores: &[f64]) -> Result<(u128, u128)> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::Range("auroc needs at least one score on each side".into()));
    }
    if in_scores.iter().chain(out_scores).any(|v| v.is_nan()) {
        return Err(Error::Range("auroc scores contain NaN".into()));
    }
    let mut sorted = in_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut count = 0u128;
    for &o in out_scores {
        let below = sorted.partition_point(|&v| v < o);
        let not_above = sorted.partition_point(|&v| v <= o);
        count += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok((count, 2 * in_scores.len() as u128 * out_scores.len() as u128))
}

/// Convert a pair count to an AUROC so that swapping the two score sets
/// gives exactly `1 − auroc`.
pub fn auroc_from_count(count: u128, total: u128) -> f64 {
    let rest = total - count;
    let v = count.max(rest) as f64 / total as f64;
    match count.cmp(&rest) {
        Ordering::Less => 1.0 - v,
        _ => v,
    }
}

/// Probability that an outlier scores above an inlier, ties counting ½.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    let (c, t) = pairwise_count(in_scores, out_scores)?;
    Ok(auroc_from_count(c, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    pub score: ScoreConfig,
    pub train: TrainConfig,
    /// Weight of the uniformity term on outliers; 0 disables it.
    #[serde(default)]
    pub oe_weight: f64,
    /// Score with a different view set than training used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_score: Option<ScoreConfig>,
}

impl OodConfig {
    fn loss(&self) -> LossSpec {
        LossSpec {
            lambda: 1.0,
            enabled_heads: self.score.heads.clone(),
            include_supervised: false,
            oe_weight: self.oe_weight,
            view_mode: self.score.view_mode,
            shift: self.score.shift,
            ..LossSpec::supervised()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.score.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.test_score {
            s.validate()?;
        }
        self.loss().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: usize,
    pub auroc: f64,
    pub in_count: usize,
    pub out_count: usize,
    pub training: Vec<EpochLog>,
}

/// Per-class AUROCs of one detection method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub classes: Vec<ClassResult>,
    pub mean_auroc: f64,
}

impl MethodResult {
    pub fn new(method: impl Into<String>, classes: Vec<ClassResult>) -> Self {
        let mean_auroc = classes.iter().map(|c| c.auroc).sum::<f64>() / classes.len().max(1) as f64;
        MethodResult {
            method: method.into(),
            classes,
            mean_auroc,
        }
    }
}

/// AUROC table with one column per method and one row per held-in class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub methods: Vec<MethodResult>,
}

impl DetectionReport {
    pub fn to_csv(&self) -> String {
        let mut header = vec!["class"];
        header.extend(self.methods.iter().map(|m| m.method.as_str()));
        let n = self.methods.first().map_or(0, |m| m.classes.len());
        let mut rows: Vec<Vec<String>> = (0..n)
            .map(|i| {
                let mut row = vec![self.methods[0].classes[i].class.to_string()];
                row.extend(self.methods.iter().map(|m| format!("{:.4}", m.classes[i].auroc)));
                row
            })
            .collect();
        let mut mean = vec!["mean".to_string()];
        mean.extend(self.methods.iter().map(|m| format!("{:.4}", m.mean_auroc)));
        rows.push(mean);
        crate::report::csv_table(&header, rows)
    }
}

/// Train a detector on one class and score the held-out test split.
pub fn train_one_class(
    spec: &NetworkSpec,
    data: &Dataset<f32>,
    class: usize,
    cfg: &OodConfig,
    outliers: Option<&Tensor<f32>>,
    run_seed: u64,
) -> Result<ClassResult> {
    let train_idx = data.train.indices_of(class);
    if train_idx.is_empty() {
        return Err(Error::Config(format!("class {class} has no training examples")));
    }
    let in_idx = data.test.indices_of(class);
    let out_idx: Vec<usize> = (0..data.test.len()).filter(|&i| data.test.labels[i] != class).collect();
    if in_idx.is_empty() || out_idx.is_empty() {
        return Err(Error::Config(format!(
            "class {class} needs test examples both in and out of class"
        )));
    }
    let images = data.train.images.select(&train_idx);
    let loss = cfg.loss();
    let use_oe = cfg.oe_weight > 0.0;
    if use_oe && outliers.is_none_or(|o| o.batch() == 0) {
        return Err(Error::Config("oe_weight > 0 needs an outlier source".into()));
    }
    let mut params = ParameterSet::<f32>::init(spec, seed::derive(run_seed, "init"));
    let mut orng = ChaCha8Rng::seed_from_u64(seed::derive(run_seed, "outliers"));
    let training = fit(
        &mut params,
        train_idx.len(),
        &cfg.train,
        seed::derive(run_seed, "train"),
        &BTreeSet::new(),
        |idx, p| {
            let mut batch = Batch::unlabeled(images.select(idx));
            if use_oe {
                let o = outliers.expect("checked");
                let pick: Vec<usize> = (0..idx.len()).map(|_| orng.random_range(0..o.batch())).collect();
                batch.outliers = Some(o.select(&pick));
            }
            let prepared = prepare(spec, &batch, &loss, None)?;
            let e = evaluate(spec, p, &prepared.images, &prepared.objective, true, false)?;
            Ok((e.loss, e.param_grads.expect("requested")))
        },
    )?;
    let score_cfg = cfg.test_score.as_ref().unwrap_or(&cfg.score);
    let scores = anomaly_scores(spec, &params, &data.test.images, score_cfg)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| scores[i]).collect::<Vec<_>>();
    Ok(ClassResult {
        class,
        auroc: auroc(&pick(&in_idx), &pick(&out_idx))?,
        in_count: in_idx.len(),
        out_count: out_idx.len(),
        training,
    })
}

/// Leave-one-in evaluation over every class, classes in parallel.
pub fn one_class_protocol(
    spec: &NetworkSpec,
    data: &Dataset<f32>,
    cfg: &OodConfig,
    method: &str,
    outliers: Option<&Tensor<f32>>,
    master_seed: u64,
) -> Result<MethodResult> {
    cfg.validate()?;
    if data.classes < 2 {
        return Err(Error::Config("one-class protocol needs at least 2 classes".into()));
    }
    cfg.score.check(spec)?;
    let classes = (0..data.classes)
        .into_par_iter()
        .map(|c| {
            let s = seed::derive(master_seed, &format!("{method}/class/{c}"));
            train_one_class(spec, data, c, cfg, outliers, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodResult::new(method, classes))
}
