//! Uniform-mixture label corruption, gold loss correction (GLC), and the
//! corruption-strength sweep used to compare training methods.

use std::collections::BTreeSet;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabeledImages};
use crate::diffgraph::loss::{log_sum_exp, softmax_row};
use crate::diffgraph::{
    evaluate, softmax, forward_logits, LogitLoss, NetworkSpec, ParameterSet, Scalar, Tensor,
};
use crate::error::{Error, Result};
use crate::harness::seed;
use crate::selfsup::{prepare, Batch, LossSpec, CLASS_HEAD};
use crate::training::{accuracy, fit, predict, TrainConfig};
use crate::transforms::SsHead;

/// Spacing of the grid that [`corruption_matrix`] entries live on: `2^-g`
/// with `g = 52 − ⌈log₂ K⌉`. Every partial row sum is then exactly
/// representable, so rows add to exactly 1.0 in any summation order.
fn grid(classes: usize) -> f64 {
    let bits = usize::BITS - (classes - 1).leading_zeros();
    2f64.powi(52 - bits as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixRole {
    TrueMatrix,
    Estimated,
}

/// Row-stochastic matrix with `entry(i, j) = p(noisy = j | clean = i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMatrix {
    classes: usize,
    entries: Vec<f64>,
    pub role: MatrixRole,
}

impl CorruptionMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, role: MatrixRole) -> Result<Self> {
        let k = rows.len();
        if k < 2 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("corruption matrix must be square with K >= 2".to_string()));
        }
        let m = CorruptionMatrix {
            classes: k,
            entries: rows.into_iter().flatten().collect(),
            role,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn identity(k: usize) -> Self {
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            entries[i * k + i] = 1.0;
        }
        CorruptionMatrix {
            classes: k,
            entries,
            role: MatrixRole::TrueMatrix,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.classes + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.chunks_exact(self.classes)
    }

    /// Entries non-negative, rows summing to 1 within 1e-9.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Range(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Range(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &CorruptionMatrix) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }
}

/// `C = (1 − s)·I + s·𝟙𝟙ᵀ/K`.
///
/// Off-diagonal entries are `s/K` rounded onto a fine dyadic grid (an error
/// below 1e-13) and the diagonal takes the exact remainder.
pub fn corruption_matrix(classes: usize, strength: f64) -> Result<CorruptionMatrix> {
    if classes < 2 {
        return Err(Error::Range(format!("need at least 2 classes, got {classes}")));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Range(format!("strength {strength} outside [0, 1]")));
    }
    let g = grid(classes);
    let off = (strength / classes as f64 * g).round() / g;
    let diag = 1.0 - off * (classes - 1) as f64;
    let mut entries = vec![off; classes * classes];
    for i in 0..classes {
        entries[i * classes + i] = diag;
    }
    Ok(CorruptionMatrix {
        classes,
        entries,
        role: MatrixRole::TrueMatrix,
    })
}

/// Resample each label from its row of `c`; deterministic in `seed`.
pub fn corrupt_labels(labels: &[usize], c: &CorruptionMatrix, seed: u64) -> Result<Vec<usize>> {
    let k = c.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels
        .iter()
        .map(|&y| {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
            let u: f64 = rng.random();
            let row = c.row(y);
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(j);
                }
            }
            // u landed in the rounding gap above the last partial sum.
            Ok(row.iter().rposition(|&p| p > 0.0).unwrap_or(y))
        })
        .collect()
}

/// Result of the GLC estimation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlcEstimate {
    pub matrix: CorruptionMatrix,
    /// Classes without trusted examples; their rows fell back to identity.
    pub fallback_classes: Vec<usize>,
}

/// Estimate `Ĉ` from softmax outputs `probs` (`[N, K]`) of a classifier
/// trained on noisy labels, evaluated on trusted examples with `clean` labels.
pub fn glc_estimate_from_probs(probs: &Tensor<f64>, clean: &[usize]) -> Result<GlcEstimate> {
    let [n, k] = *probs.shape() else {
        return Err(Error::Shape("probabilities must be [N, K]".into()));
    };
    if n != clean.len() {
        return Err(Error::Shape(format!("{} labels for {n} rows", clean.len())));
    }
    if n == 0 {
        return Err(Error::Config("trusted set is empty".into()));
    }
    let mut sums = vec![0.0f64; k * k];
    let mut counts = vec![0usize; k];
    for (row, &y) in probs.data().chunks_exact(k).zip(clean) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        counts[y] += 1;
        for (s, &p) in sums[y * k..(y + 1) * k].iter_mut().zip(row) {
            *s += p;
        }
    }
    let mut fallback_classes = Vec::new();
    for i in 0..k {
        let row = &mut sums[i * k..(i + 1) * k];
        if counts[i] == 0 {
            warn!("no trusted examples for class {i}; using an identity row");
            fallback_classes.push(i);
            row.fill(0.0);
            row[i] = 1.0;
            continue;
        }
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(GlcEstimate {
        matrix: CorruptionMatrix {
            classes: k,
            entries: sums,
            role: MatrixRole::Estimated,
        },
        fallback_classes,
    })
}

/// Row `i` of `Ĉ` is the mean softmax output of the noisy-label classifier
/// over trusted examples whose clean label is `i`.
pub fn glc_estimate(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    trusted: &LabeledImages<f32>,
) -> Result<GlcEstimate> {
    if trusted.is_empty() {
        return Err(Error::Config("trusted set is empty".into()));
    }
    let mut probs = Vec::new();
    let idx: Vec<usize> = (0..trusted.len()).collect();
    for chunk in idx.chunks(256) {
        let logits = forward_logits(spec, params, &trusted.images.select(chunk), CLASS_HEAD)?;
        probs.extend(softmax(&logits)?.data().iter().map(|&p| p as f64));
    }
    let k = spec.head_classes(CLASS_HEAD)?;
    glc_estimate_from_probs(&Tensor::new(vec![trusted.len(), k], probs)?, &trusted.labels)
}

/// Floor applied to the corrected likelihood `q(ỹ)`.
pub const Q_FLOOR: f64 = 1e-12;

/// Forward-corrected loss `−log (Ĉᵀ softmax(z))[ỹ]` on untrusted rows and
/// plain cross-entropy on trusted rows.
#[derive(Debug, Clone)]
pub struct ForwardCorrected {
    /// Noisy label for untrusted rows, clean label for trusted rows.
    pub labels: Vec<usize>,
    pub trusted: Vec<bool>,
    /// `ln Ĉ`, row-major.
    log_c: Vec<f64>,
    classes: usize,
}

impl ForwardCorrected {
    pub fn new(c_hat: &CorruptionMatrix, labels: Vec<usize>, trusted: Vec<bool>) -> Result<Self> {
        c_hat.validate()?;
        if labels.len() != trusted.len() {
            return Err(Error::Shape("labels and trusted mask differ in length".into()));
        }
        Ok(ForwardCorrected {
            labels,
            trusted,
            log_c: c_hat.entries.iter().map(|v| v.ln()).collect(),
            classes: c_hat.classes(),
        })
    }

    /// Loss and logit gradient for one row, plus whether `q` was floored.
    fn row<T: Scalar>(&self, z: &[T], y: usize, trusted: bool) -> (T, Vec<T>, bool) {
        let k = self.classes;
        let lse = log_sum_exp(z);
        if trusted {
            let p = softmax_row(z);
            let g = p
                .iter()
                .enumerate()
                .map(|(j, &pj)| if j == y { pj - T::one() } else { pj })
                .collect();
            return (lse - z[y], g, false);
        }
        // log q = logsumexp_i(ln Ĉ[i][y] + log p_i), kept in log space so an
        // identity Ĉ reproduces cross-entropy bit for bit.
        let terms: Vec<T> = (0..k)
            .map(|i| T::of(self.log_c[i * k + y]) + (z[i] - lse))
            .collect();
        let log_q = log_sum_exp(&terms);
        let floor = T::of(Q_FLOOR.ln());
        if !(log_q >= floor) {
            return (-floor, vec![T::zero(); k], true);
        }
        // dL/dz_j = p_j − Ĉ[j][y]·p_j / q
        let g = (0..k)
            .map(|j| (z[j] - lse).exp() - (terms[j] - log_q).exp())
            .collect();
        (-log_q, g, false)
    }
}

impl<T: Scalar> LogitLoss<T> for ForwardCorrected {
    fn value_and_grad(&self, logits: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        let [r, k] = *logits.shape() else {
            return Err(Error::Shape("logits must be [N, K]".into()));
        };
        if k != self.classes || r != self.labels.len() {
            return Err(Error::Shape(format!(
                "logits [{r}, {k}] do not match {} labels over {} classes",
                self.labels.len(),
                self.classes
            )));
        }
        let scale = T::one() / T::of(r as f64);
        let mut total = T::zero();
        let mut grad = Vec::with_capacity(r * k);
        for ((z, &y), &t) in logits.data().chunks_exact(k).zip(&self.labels).zip(&self.trusted) {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
            let (l, g, _) = self.row(z, y, t);
            total = total + l;
            grad.extend(g.into_iter().map(|v| v * scale));
        }
        Ok((total * scale, Tensor::new(vec![r, k], grad)?))
    }
}

/// Corrected loss of a single untrusted example; returns `(loss, floored)`.
pub fn glc_corrected_loss<T: Scalar>(
    logits: &[T],
    noisy_label: usize,
    c_hat: &CorruptionMatrix,
) -> Result<(T, bool)> {
    if logits.len() != c_hat.classes() {
        return Err(Error::Shape(format!(
            "{} logits for a {}-class matrix",
            logits.len(),
            c_hat.classes()
        )));
    }
    if noisy_label >= c_hat.classes() {
        return Err(Error::LabelOutOfRange {
            label: noisy_label,
            classes: c_hat.classes(),
        });
    }
    let loss = ForwardCorrected::new(c_hat, vec![noisy_label], vec![false])?;
    let (l, _, floored) = loss.row(logits, noisy_label, false);
    Ok((l, floored))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMethod {
    #[default]
    None,
    Glc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelNoiseConfig {
    #[serde(default = "default_strengths")]
    pub strengths: Vec<f64>,
    #[serde(default)]
    pub method: NoiseMethod,
    #[serde(default = "default_trusted")]
    pub trusted_fraction: f64,
    #[serde(default)]
    pub use_rotations: bool,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Schedule for plain supervised training (`epochs` is used when
    /// rotations are off).
    pub train: TrainConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_finetune")]
    pub finetune_epochs: usize,
    #[serde(default)]
    pub freeze_rotation_head: bool,
}

fn default_strengths() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn default_trusted() -> f64 {
    0.05
}

fn default_lambda() -> f64 {
    0.5
}

fn default_pretrain() -> usize {
    20
}

fn default_finetune() -> usize {
    8
}

impl LabelNoiseConfig {
    pub fn new(train: TrainConfig) -> Self {
        LabelNoiseConfig {
            strengths: default_strengths(),
            method: NoiseMethod::None,
            trusted_fraction: default_trusted(),
            use_rotations: false,
            lambda: default_lambda(),
            train,
            pretrain_epochs: default_pretrain(),
            finetune_epochs: default_finetune(),
            freeze_rotation_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.strengths.is_empty() {
            return Err(Error::Config("no corruption strengths".into()));
        }
        if let Some(s) = self.strengths.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Config(format!("strength {s} outside [0, 1]")));
        }
        if !(0.0..1.0).contains(&self.trusted_fraction) {
            return Err(Error::Config(format!(
                "trusted_fraction {} outside [0, 1)",
                self.trusted_fraction
            )));
        }
        if self.method == NoiseMethod::Glc && self.trusted_fraction == 0.0 {
            return Err(Error::Config("glc needs a positive trusted_fraction".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthResult {
    pub strength: f64,
    pub test_error: f64,
    /// Fraction of training labels actually changed.
    pub flipped_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback_classes: Vec<usize>,
}

/// Test error per corruption strength and its mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelNoiseCurve {
    pub method: NoiseMethod,
    pub use_rotations: bool,
    pub trusted_fraction: f64,
    pub strengths: Vec<StrengthResult>,
    pub mean_error: f64,
}

impl LabelNoiseCurve {
    pub fn to_csv(&self) -> String {
        crate::report::csv_table(
            &["strength", "test_error"],
            self.strengths
                .iter()
                .map(|r| vec![format!("{}", r.strength), format!("{}", r.test_error)]),
        )
    }
}

fn train_phase<F>(
    spec: &NetworkSpec,
    train: &LabeledImages<f32>,
    params: &mut ParameterSet<f32>,
    loss: &LossSpec,
    tc: &TrainConfig,
    seed: u64,
    frozen: &BTreeSet<String>,
    supervised: F,
) -> Result<()>
where
    F: Fn(&[usize]) -> Result<Box<dyn LogitLoss<f32>>>,
{
    fit(params, train.len(), tc, seed, frozen, |idx, p| {
        let batch = Batch::unlabeled(train.images.select(idx));
        let sup = if loss.include_supervised {
            Some(supervised(idx)?)
        } else {
            None
        };
        let prepared = prepare(spec, &batch, loss, sup)?;
        let e = evaluate(spec, p, &prepared.images, &prepared.objective, true, false)?;
        Ok((e.loss, e.param_grads.expect("requested")))
    })?;
    Ok(())
}

/// Rotation-prediction pre-training on the training images alone.
///
/// It never reads labels, so one pre-trained network serves every
/// corruption strength and both GLC stages.
pub fn rotation_pretrain(
    spec: &NetworkSpec,
    train: &LabeledImages<f32>,
    cfg: &LabelNoiseConfig,
    seed: u64,
) -> Result<ParameterSet<f32>> {
    let mut params = ParameterSet::<f32>::init(spec, seed::derive(seed, "init"));
    let tc = TrainConfig {
        epochs: cfg.pretrain_epochs,
        ..cfg.train
    };
    train_phase(
        spec,
        train,
        &mut params,
        &LossSpec::rotation_only(),
        &tc,
        seed::derive(seed, "pretrain"),
        &BTreeSet::new(),
        |_| unreachable!("rotation pre-training has no supervised term"),
    )?;
    Ok(params)
}

/// Train a classifier: plain cross-entropy from scratch, or a combined-loss
/// fine-tune from `pretrained` when rotations are enabled. `supervised`
/// builds the per-batch supervised loss from batch indices.
fn train_classifier<F>(
    spec: &NetworkSpec,
    train: &LabeledImages<f32>,
    cfg: &LabelNoiseConfig,
    pretrained: Option<&ParameterSet<f32>>,
    seed: u64,
    supervised: F,
) -> Result<ParameterSet<f32>>
where
    F: Fn(&[usize]) -> Result<Box<dyn LogitLoss<f32>>>,
{
    match pretrained {
        Some(start) => {
            let mut params = start.clone();
            let frozen: BTreeSet<String> = if cfg.freeze_rotation_head {
                ["weight", "bias"]
                    .iter()
                    .map(|p| format!("head.{}.{p}", SsHead::Rotation.name()))
                    .collect()
            } else {
                BTreeSet::new()
            };
            let tc = TrainConfig {
                epochs: cfg.finetune_epochs,
                ..cfg.train
            };
            let loss = LossSpec::with_rotations(cfg.lambda);
            train_phase(spec, train, &mut params, &loss, &tc, seed::derive(seed, "finetune"), &frozen, supervised)?;
            Ok(params)
        }
        None => {
            let mut params = ParameterSet::<f32>::init(spec, seed::derive(seed, "init"));
            let loss = LossSpec::supervised();
            train_phase(spec, train, &mut params, &loss, &cfg.train, seed::derive(seed, "train"), &BTreeSet::new(), supervised)?;
            Ok(params)
        }
    }
}

/// One corruption strength: corrupt, train per method, measure clean test error.
pub fn run_strength(
    spec: &NetworkSpec,
    data: &Dataset<f32>,
    cfg: &LabelNoiseConfig,
    strength: f64,
    seed: u64,
    pretrained: Option<&ParameterSet<f32>>,
) -> Result<StrengthResult> {
    let own;
    let pretrained = match (cfg.use_rotations, pretrained) {
        (false, _) => None,
        (true, Some(p)) => Some(p),
        (true, None) => {
            own = rotation_pretrain(spec, &data.train, cfg, seed::derive(seed, "rotations"))?;
            Some(&own)
        }
    };
    let k = data.classes;
    let n = data.train.len();
    let c = corruption_matrix(k, strength)?;

    // Trusted examples are a seeded random subset used only by GLC.
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.method == NoiseMethod::Glc {
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, "trusted")));
    }
    let n_trusted = match cfg.method {
        NoiseMethod::None => 0,
        NoiseMethod::Glc => ((n as f64 * cfg.trusted_fraction).round() as usize).clamp(1, n - 1),
    };
    let mut trusted = vec![false; n];
    for &i in &order[..n_trusted] {
        trusted[i] = true;
    }
    let noisy = corrupt_labels(&data.train.labels, &c, seed::derive(seed, "labels"))?;
    // Trusted examples keep their clean label.
    let observed: Vec<usize> = (0..n)
        .map(|i| if trusted[i] { data.train.labels[i] } else { noisy[i] })
        .collect();
    let untrusted_idx: Vec<usize> = (0..n).filter(|&i| !trusted[i]).collect();
    let flipped = untrusted_idx
        .iter()
        .filter(|&&i| noisy[i] != data.train.labels[i])
        .count() as f64
        / untrusted_idx.len().max(1) as f64;

    let (params, estimate) = match cfg.method {
        NoiseMethod::None => {
            let p = train_classifier(spec, &data.train, cfg, pretrained, seed::derive(seed, "model"), |idx| {
                Ok(Box::new(crate::diffgraph::CrossEntropy {
                    labels: idx.iter().map(|&i| observed[i]).collect(),
                }))
            })?;
            (p, None)
        }
        NoiseMethod::Glc => {
            let untrusted = LabeledImages {
                images: data.train.images.select(&untrusted_idx),
                labels: untrusted_idx.iter().map(|&i| noisy[i]).collect(),
            };
            let stage1 = train_classifier(spec, &untrusted, cfg, pretrained, seed::derive(seed, "stage1"), |idx| {
                Ok(Box::new(crate::diffgraph::CrossEntropy {
                    labels: idx.iter().map(|&i| untrusted.labels[i]).collect(),
                }))
            })?;
            let trusted_idx: Vec<usize> = (0..n).filter(|&i| trusted[i]).collect();
            let estimate = glc_estimate(spec, &stage1, &data.train.subset(&trusted_idx))?;
            let matrix = estimate.matrix.clone();
            let p = train_classifier(spec, &data.train, cfg, pretrained, seed::derive(seed, "stage2"), |idx| {
                Ok(Box::new(ForwardCorrected::new(
                    &matrix,
                    idx.iter().map(|&i| observed[i]).collect(),
                    idx.iter().map(|&i| trusted[i]).collect(),
                )?))
            })?;
            (p, Some(estimate))
        }
    };
    let pred = predict(spec, &params, &data.test.images, CLASS_HEAD)?;
    Ok(StrengthResult {
        strength,
        test_error: 1.0 - accuracy(&pred, &data.test.labels),
        flipped_fraction: flipped,
        estimated_matrix: estimate.as_ref().map(|e| e.matrix.to_rows()),
        fallback_classes: estimate.map(|e| e.fallback_classes).unwrap_or_default(),
    })
}

/// Sweep every configured strength (in parallel) and report the error curve.
pub fn label_noise_protocol(
    spec: &NetworkSpec,
    data: &Dataset<f32>,
    cfg: &LabelNoiseConfig,
    master_seed: u64,
) -> Result<LabelNoiseCurve> {
    cfg.validate()?;
    if spec.head_classes(CLASS_HEAD)? != data.classes {
        return Err(Error::Config(format!(
            "class head has {} outputs but the dataset has {} classes",
            spec.head_classes(CLASS_HEAD)?,
            data.classes
        )));
    }
    if cfg.use_rotations {
        spec.head_classes(SsHead::Rotation.name())?;
    }
    let pretrained = if cfg.use_rotations {
        Some(rotation_pretrain(spec, &data.train, cfg, seed::derive(master_seed, "rotations"))?)
    } else {
        None
    };
    let strengths = cfg
        .strengths
        .par_iter()
        .map(|&s| {
            let run_seed = seed::derive(master_seed, &format!("strength/{s:.6}"));
            run_strength(spec, data, cfg, s, run_seed, pretrained.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_error = strengths.iter().map(|r| r.test_error).sum::<f64>() / strengths.len() as f64;
    Ok(LabelNoiseCurve {
        method: cfg.method,
        use_rotations: cfg.use_rotations,
        trusted_fraction: cfg.trusted_fraction,
        strengths,
        mean_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::cross_entropy;

    #[test]
    fn matrix_closed_form() {
        assert_eq!(corruption_matrix(4, 0.0).unwrap(), CorruptionMatrix::identity(4));
        let m = corruption_matrix(10, 0.5).unwrap();
        assert!((m.entry(3, 3) - 0.55).abs() < 1e-12);
        assert!((m.entry(3, 4) - 0.05).abs() < 1e-12);
        let u = corruption_matrix(8, 1.0).unwrap();
        assert!(u.rows().flatten().all(|&v| v == 0.125));
        assert!(corruption_matrix(3, 1.1).is_err());
        assert!(corruption_matrix(3, -0.1).is_err());
        assert!(corruption_matrix(1, 0.5).is_err());
    }

    #[test]
    fn rows_sum_to_exactly_one() {
        for k in 2..40 {
            for i in 0..=100 {
                let m = corruption_matrix(k, i as f64 / 100.0).unwrap();
                for row in m.rows() {
                    assert_eq!(row.iter().sum::<f64>(), 1.0);
                    assert_eq!(row.iter().rev().sum::<f64>(), 1.0);
                }
            }
        }
    }

    #[test]
    fn identity_matrix_keeps_labels() {
        let labels: Vec<usize> = (0..500).map(|i| i % 5).collect();
        let out = corrupt_labels(&labels, &CorruptionMatrix::identity(5), 3).unwrap();
        assert_eq!(out, labels);
        assert_eq!(corrupt_labels(&labels, &corruption_matrix(5, 0.7).unwrap(), 9).unwrap(),
                   corrupt_labels(&labels, &corruption_matrix(5, 0.7).unwrap(), 9).unwrap());
    }

    #[test]
    fn glc_estimate_mean_of_single_examples() {
        let probs = Tensor::new(vec![2, 2], vec![0.7, 0.3, 0.1, 0.9]).unwrap();
        let e = glc_estimate_from_probs(&probs, &[0, 1]).unwrap();
        assert_eq!(e.matrix.to_rows(), vec![vec![0.7, 0.3], vec![0.1, 0.9]]);
        assert!(e.fallback_classes.is_empty());
    }

    #[test]
    fn glc_estimate_one_hot_gives_identity_and_fallback() {
        let probs = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let e = glc_estimate_from_probs(&probs, &[0, 2]).unwrap();
        assert_eq!(e.matrix.max_abs_diff(&CorruptionMatrix::identity(3)), 0.0);
        assert_eq!(e.fallback_classes, vec![1]);
        assert_eq!(e.matrix.role, MatrixRole::Estimated);
    }

    #[test]
    fn corrected_loss_identity_is_cross_entropy() {
        let z = [0.3f64, -1.2, 2.5, 0.0];
        let (l, floored) = glc_corrected_loss(&z, 2, &CorruptionMatrix::identity(4)).unwrap();
        assert!(!floored);
        let ce = cross_entropy(&Tensor::new(vec![1, 4], z.to_vec()).unwrap(), &[2]).unwrap();
        assert_eq!(l.to_bits(), ce.to_bits());
    }

    #[test]
    fn corrected_loss_uniform_matrix_is_constant() {
        let u = corruption_matrix(4, 1.0).unwrap();
        for z in [[0.0, 0.0, 0.0, 0.0], [5.0, -3.0, 1.0, 0.2]] {
            let (l, _) = glc_corrected_loss(&z, 1, &u).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn corrected_loss_hand_example() {
        // softmax = (0.8, 0.2)
        let z = [0.8f64.ln(), 0.2f64.ln()];
        let c = CorruptionMatrix::from_rows(vec![vec![0.9, 0.1], vec![0.2, 0.8]], MatrixRole::Estimated)
            .unwrap();
        let (l, _) = glc_corrected_loss(&z, 0, &c).unwrap();
        assert!((l - -(0.8f64 * 0.9 + 0.2 * 0.2).ln()).abs() < 1e-12);
    }

    #[test]
    fn corrected_loss_floors_tiny_likelihood() {
        let c = CorruptionMatrix::identity(2);
        let (l, floored) = glc_corrected_loss(&[0.0f64, 1e4], 0, &c).unwrap();
        assert!(floored);
        assert!((l + Q_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn corrected_gradient_matches_finite_differences() {
        let c = CorruptionMatrix::from_rows(
            vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4]],
            MatrixRole::Estimated,
        )
        .unwrap();
        let loss = ForwardCorrected::new(&c, vec![1, 2], vec![false, true]).unwrap();
        let z = Tensor::new(vec![2, 3], vec![0.2f64, -0.4, 1.1, 0.5, 0.0, -0.3]).unwrap();
        let (_, g) = loss.value_and_grad(&z).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut p = z.clone();
            p.data_mut()[i] += h;
            let mut m = z.clone();
            m.data_mut()[i] -= h;
            let fd = (loss.value_and_grad(&p).unwrap().0 - loss.value_and_grad(&m).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }
}
