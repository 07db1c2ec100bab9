//! Self-supervised auxiliary losses and the combined training objective
//! `L_CE(x, y) + λ·L_SS(x)`, with an optional uniformity term on outliers.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::diffgraph::{
    evaluate, CrossEntropy, LogitLoss, NetworkSpec, Objective, ParameterSet, Scalar, Tensor,
    UniformTarget,
};
use crate::error::{Error, Result};
use crate::transforms::{
    build_ss_views, resize_probe, rotate, translate, SsHead, ViewBatch, ViewConfig, ViewMode,
};

/// Name of the supervised classification head.
pub const CLASS_HEAD: &str = "class";

/// Which loss terms are active and how they are weighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub enabled_heads: BTreeSet<SsHead>,
    #[serde(default = "yes")]
    pub include_supervised: bool,
    #[serde(default)]
    pub oe_weight: f64,
    /// Per-head multipliers applied inside the λ-weighted term; missing heads weigh 1.
    #[serde(default)]
    pub head_weights: BTreeMap<SsHead, f64>,
    #[serde(default)]
    pub view_mode: ViewMode,
    /// Translation amplitude in pixels.
    #[serde(default)]
    pub shift: usize,
}

fn yes() -> bool {
    true
}

impl LossSpec {
    /// Plain cross-entropy.
    pub fn supervised() -> Self {
        LossSpec {
            lambda: 0.0,
            enabled_heads: BTreeSet::new(),
            include_supervised: true,
            oe_weight: 0.0,
            head_weights: BTreeMap::new(),
            view_mode: ViewMode::AllRotations,
            shift: 0,
        }
    }

    /// Cross-entropy plus `lambda` times the rotation loss.
    pub fn with_rotations(lambda: f64) -> Self {
        LossSpec {
            lambda,
            enabled_heads: [SsHead::Rotation].into(),
            ..Self::supervised()
        }
    }

    /// Rotation prediction alone, no labels read.
    pub fn rotation_only() -> Self {
        LossSpec {
            include_supervised: false,
            ..Self::with_rotations(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Range(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if !self.oe_weight.is_finite() || self.oe_weight < 0.0 {
            return Err(Error::Range(format!(
                "oe_weight {} must be finite and >= 0",
                self.oe_weight
            )));
        }
        if let Some((h, w)) = self.head_weights.iter().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(Error::Range(format!("head weight {w} for {h} must be >= 0")));
        }
        if !self.include_supervised && !self.ss_active() && self.oe_weight == 0.0 {
            return Err(Error::Config("loss has no enabled term".into()));
        }
        Ok(())
    }

    fn ss_active(&self) -> bool {
        self.lambda > 0.0 && !self.enabled_heads.is_empty()
    }

    fn needs_views(&self) -> bool {
        !self.enabled_heads.is_empty() && (self.ss_active() || self.oe_weight > 0.0)
    }

    pub fn view_config(&self) -> ViewConfig {
        ViewConfig {
            shift: self.shift,
            heads: self.enabled_heads.clone(),
            mode: self.view_mode,
        }
    }

    fn head_weight(&self, head: SsHead) -> f64 {
        self.head_weights.get(&head).copied().unwrap_or(1.0)
    }
}

/// Images with optional class labels and an optional outlier sub-batch.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar = f32> {
    pub images: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub outliers: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn labeled(images: Tensor<T>, labels: Vec<usize>) -> Self {
        Batch {
            images,
            labels: Some(labels),
            outliers: None,
        }
    }

    pub fn unlabeled(images: Tensor<T>) -> Self {
        Batch {
            images,
            labels: None,
            outliers: None,
        }
    }
}

fn check_heads(spec: &NetworkSpec, heads: &BTreeSet<SsHead>) -> Result<()> {
    for &h in heads {
        let k = spec.head_classes(h.name())?;
        if k != h.classes() {
            return Err(Error::Shape(format!(
                "head `{h}` has {k} classes, expected {}",
                h.classes()
            )));
        }
    }
    Ok(())
}

/// A network input plus the objective to evaluate on it.
///
/// When views are generated the input is the view batch (in-distribution
/// views first, then outlier views), and `views` records how to fold input
/// gradients back onto the original images.
pub struct Prepared<'a, T: Scalar> {
    pub images: Tensor<T>,
    pub objective: Objective<'a, T>,
    views: Option<PreparedViews>,
}

struct PreparedViews {
    config: ViewConfig,
    labels: Vec<crate::transforms::TransformLabel>,
    source_index: Vec<usize>,
    originals: usize,
}

/// Assemble the combined objective for one batch.
///
/// `supervised` replaces the default cross-entropy on `batch.labels`.
/// The supervised term only sees the untransformed views.
pub fn prepare<'a, T: Scalar>(
    spec: &NetworkSpec,
    batch: &Batch<T>,
    loss: &LossSpec,
    supervised: Option<Box<dyn LogitLoss<T> + 'a>>,
) -> Result<Prepared<'a, T>> {
    loss.validate()?;
    let n = batch.images.batch();
    let supervised = if loss.include_supervised {
        spec.head_classes(CLASS_HEAD)?;
        Some(match supervised {
            Some(s) => s,
            None => {
                let labels = batch.labels.clone().ok_or_else(|| {
                    Error::Config("supervised loss enabled but batch has no labels".into())
                })?;
                if labels.len() != n {
                    return Err(Error::Shape(format!("{} labels for {n} images", labels.len())));
                }
                Box::new(CrossEntropy { labels }) as Box<dyn LogitLoss<T>>
            }
        })
    } else {
        None
    };

    if !loss.needs_views() {
        let mut objective = Objective::new();
        if let Some(s) = supervised {
            objective.push(CLASS_HEAD, None, T::one(), s);
        }
        if objective.is_empty() {
            return Err(Error::Config("loss has no term applicable to this batch".into()));
        }
        return Ok(Prepared {
            images: batch.images.clone(),
            objective,
            views: None,
        });
    }

    check_heads(spec, &loss.enabled_heads)?;
    let cfg = loss.view_config();
    let inliers = build_ss_views(&batch.images, &cfg)?;
    let outliers = match (&batch.outliers, loss.oe_weight > 0.0) {
        (Some(o), true) => Some(build_ss_views(o, &cfg)?),
        _ => None,
    };
    let m = inliers.len();
    let mut objective = Objective::new();
    if let Some(s) = supervised {
        objective.push(CLASS_HEAD, Some(inliers.identity_rows()), T::one(), s);
    }
    if loss.ss_active() {
        for &h in &loss.enabled_heads {
            let w = T::of(loss.lambda * loss.head_weight(h));
            objective.push(
                h.name(),
                Some((0..m).collect()),
                w,
                CrossEntropy {
                    labels: inliers.targets(h),
                },
            );
        }
    }
    let mut images = inliers.images.clone();
    if let Some(out) = &outliers {
        let rows: Vec<usize> = (m..m + out.len()).collect();
        for &h in &loss.enabled_heads {
            objective.push(h.name(), Some(rows.clone()), T::of(loss.oe_weight), UniformTarget);
        }
        images = Tensor::concat(&[&inliers.images, &out.images])?;
    }
    let ViewBatch {
        labels,
        source_index,
        ..
    } = inliers;
    Ok(Prepared {
        images,
        objective,
        views: Some(PreparedViews {
            config: cfg,
            labels,
            source_index,
            originals: n,
        }),
    })
}

impl<T: Scalar> Prepared<'_, T> {
    /// Fold a gradient on the prepared input back onto the original images
    /// of the in-distribution batch (outlier views are dropped).
    pub fn fold_input_grad(&self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let Some(v) = &self.views else {
            return Ok(grad.clone());
        };
        let mut item_shape = grad.shape().to_vec();
        item_shape[0] = v.originals;
        let mut out = Tensor::zeros(&item_shape);
        let view_shape = grad.shape()[1..].to_vec();
        for (row, (label, &src)) in v.labels.iter().zip(&v.source_index).enumerate() {
            let g = Tensor::new(view_shape.clone(), grad.item(row).to_vec())?;
            // Rotation and translation are permutations and the resize probe
            // is self-adjoint, so the adjoint undoes them in reverse order.
            let g = resize_probe(&g, label.resized == 1)?;
            let (dx, dy) = label.shift(v.config.shift);
            let g = translate(&g, -dx, -dy)?;
            let g = rotate(&g, (4 - label.rotation) % 4)?;
            for (a, &b) in out.item_mut(src).iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        Ok(out)
    }
}

/// `L_CE + λ·L_SS` (+ the outlier uniformity term) for one batch.
pub fn total_loss<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    batch: &Batch<T>,
    loss: &LossSpec,
) -> Result<T> {
    let p = prepare(spec, batch, loss, None)?;
    Ok(evaluate(spec, params, &p.images, &p.objective, false, false)?.loss)
}

/// Total loss and its gradient with respect to the batch images.
pub fn total_loss_input_grad<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    batch: &Batch<T>,
    loss: &LossSpec,
) -> Result<(T, Tensor<T>)> {
    let p = prepare(spec, batch, loss, None)?;
    let e = evaluate(spec, params, &p.images, &p.objective, false, true)?;
    let g = p.fold_input_grad(e.input_grad.as_ref().expect("requested"))?;
    Ok((e.loss, g))
}

/// Mean rotation-prediction cross-entropy over the four rotated copies of
/// every image. Never reads class labels.
pub fn rotation_ss_loss<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    images: &Tensor<T>,
) -> Result<T> {
    check_heads(spec, &[SsHead::Rotation].into())?;
    let views = build_ss_views(images, &ViewConfig::rotations())?;
    multihead_ss_loss(spec, params, &views, &[SsHead::Rotation].into())
}

/// Sum over `heads` of each head's mean cross-entropy against the view labels.
pub fn multihead_ss_loss<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    views: &ViewBatch<T>,
    heads: &BTreeSet<SsHead>,
) -> Result<T> {
    if heads.is_empty() {
        return Err(Error::Config("no self-supervised head enabled".into()));
    }
    check_heads(spec, heads)?;
    let mut objective = Objective::new();
    for &h in heads {
        objective.push(
            h.name(),
            None,
            T::one(),
            CrossEntropy {
                labels: views.targets(h),
            },
        );
    }
    Ok(evaluate(spec, params, &views.images, &objective, false, false)?.loss)
}
