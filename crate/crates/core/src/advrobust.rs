//! PGD attacks, adversarial training with an auxiliary rotation loss, and
//! clean/robust accuracy evaluation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImages;
use crate::diffgraph::{evaluate, input_gradient, CrossEntropy, NetworkSpec, Objective, ParameterSet, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::report::{EvalReport, RobustPoint};
use crate::selfsup::{prepare, total_loss_input_grad, Batch, LossSpec, CLASS_HEAD};
use crate::training::{accuracy, fit, predict, EpochLog, TrainConfig};

/// Loss maximized by the attacker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    /// Classification loss only; the test-time adversary.
    #[default]
    CeOnly,
    /// `L_CE + L_SS` (unweighted rotation loss); the training-time adversary.
    CePlusSs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default = "yes")]
    pub random_start: bool,
    #[serde(default)]
    pub attack_loss: AttackLoss,
}

fn yes() -> bool {
    true
}

impl AttackConfig {
    /// 10-step training adversary, ε = 8/255, α = 2/256.
    pub fn training_default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 256.0,
            steps: 10,
            random_start: true,
            attack_loss: AttackLoss::CePlusSs,
        }
    }

    /// 20-step evaluation adversary, α = 2/256.
    pub fn eval_20() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 256.0,
            steps: 20,
            random_start: true,
            attack_loss: AttackLoss::CeOnly,
        }
    }

    /// 100-step evaluation adversary, α = 0.3/256.
    pub fn eval_100() -> Self {
        AttackConfig {
            steps: 100,
            alpha: 0.3 / 256.0,
            ..Self::eval_20()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Range(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.steps > 0 && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Range(format!(
                "alpha {} must be > 0 when steps > 0",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn attack_gradient(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
    loss: AttackLoss,
) -> Result<Tensor<f32>> {
    match loss {
        AttackLoss::CeOnly => {
            let objective = Objective::new().with(
                CLASS_HEAD,
                None,
                1.0,
                CrossEntropy {
                    labels: labels.to_vec(),
                },
            );
            input_gradient(spec, params, x, &objective)
        }
        AttackLoss::CePlusSs => {
            let batch = Batch::labeled(x.clone(), labels.to_vec());
            total_loss_input_grad(spec, params, &batch, &LossSpec::with_rotations(1.0)).map(|r| r.1)
        }
    }
}

fn project<T: Scalar>(adv: &mut [T], orig: &[T], eps: T) {
    for (a, &o) in adv.iter_mut().zip(orig) {
        *a = a.max(o - eps).min(o + eps).max(T::zero()).min(T::one());
    }
}

/// Projected gradient ascent in the ℓ∞ ball of radius ε, clipped to `[0, 1]`.
pub fn pgd_attack<R: Rng>(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Range("attack input outside [0, 1]".into()));
    }
    if cfg.epsilon == 0.0 {
        return Ok(images.clone());
    }
    let eps = cfg.epsilon as f32;
    let alpha = cfg.alpha as f32;
    let orig = images.data();
    let mut adv = images.clone();
    if cfg.random_start {
        for a in adv.data_mut() {
            *a += rng.random_range(-eps..=eps);
        }
        project(adv.data_mut(), orig, eps);
    }
    for _ in 0..cfg.steps {
        let g = attack_gradient(spec, params, &adv, labels, cfg.attack_loss)?;
        if !g.all_finite() {
            return Err(Error::NumericFailure {
                layer: "input gradient".into(),
            });
        }
        for (a, &gi) in adv.data_mut().iter_mut().zip(g.data()) {
            if gi > 0.0 {
                *a += alpha;
            } else if gi < 0.0 {
                *a -= alpha;
            }
        }
        project(adv.data_mut(), orig, eps);
    }
    Ok(adv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvTrainConfig {
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub loss: LossSpec,
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.attack.validate()?;
        self.loss.validate()?;
        if !self.loss.include_supervised {
            return Err(Error::Config("adversarial training needs the supervised term".into()));
        }
        if self.loss.lambda > 0.0 && self.attack.attack_loss != AttackLoss::CePlusSs {
            return Err(Error::Config(
                "with lambda > 0 the training adversary must use ce_plus_ss".into(),
            ));
        }
        Ok(())
    }
}

/// Minimize `L_CE(PGD(x), y) + λ·L_SS(PGD(x))` over mini-batches.
pub fn adv_train(
    spec: &NetworkSpec,
    data: &LabeledImages<f32>,
    cfg: &AdvTrainConfig,
    params: &mut ParameterSet<f32>,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    params.validate(spec)?;
    let mut attack_rng = ChaCha8Rng::seed_from_u64(crate::harness::seed::derive(seed, "attack"));
    fit(params, data.len(), &cfg.train, seed, &BTreeSet::new(), |idx, p| {
        let x = data.images.select(idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let x_adv = pgd_attack(spec, p, &x, &y, &cfg.attack, &mut attack_rng)?;
        let batch = Batch::labeled(x_adv, y);
        let prepared = prepare(spec, &batch, &cfg.loss, None)?;
        let e = evaluate(spec, p, &prepared.images, &prepared.objective, true, false)?;
        Ok((e.loss, e.param_grads.expect("requested")))
    })
}

/// Clean accuracy and, for each attack, robust accuracy.
///
/// Attacks must use the classification loss only.
pub fn eval_accuracy(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    data: &LabeledImages<f32>,
    attacks: &[AttackConfig],
    seed: u64,
) -> Result<EvalReport> {
    for a in attacks {
        a.validate()?;
        if a.attack_loss != AttackLoss::CeOnly {
            return Err(Error::Config("evaluation attacks must use ce_only".into()));
        }
    }
    let mut report = EvalReport::new("adv");
    let clean = predict(spec, params, &data.images, CLASS_HEAD)?;
    report.clean_accuracy = Some(accuracy(&clean, &data.labels));
    const CHUNK: usize = 256;
    for (k, a) in attacks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::harness::seed::derive(seed, &format!("attack/{k}")));
        let mut hits = 0usize;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(CHUNK) {
            let sub = data.subset(chunk);
            let adv = pgd_attack(spec, params, &sub.images, &sub.labels, a, &mut rng)?;
            let pred = predict(spec, params, &adv, CLASS_HEAD)?;
            hits += pred.iter().zip(&sub.labels).filter(|(p, l)| p == l).count();
        }
        report.robust.push(RobustPoint {
            epsilon: a.epsilon,
            alpha: a.alpha,
            steps: a.steps,
            random_start: a.random_start,
            accuracy: hits as f64 / data.len().max(1) as f64,
        });
    }
    Ok(report)
}

/// Attack settings for an ε sweep given in units of 1/255.
pub fn eps_sweep(base: &AttackConfig, eps_255: &[f64]) -> Vec<AttackConfig> {
    eps_255
        .iter()
        .map(|&e| AttackConfig {
            epsilon: e / 255.0,
            ..*base
        })
        .collect()
}
