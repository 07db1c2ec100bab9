//! Fixtures and criterion checks shared by the topic tests and the
//! `acceptance` runner. Each check returns `Ok(detail)` or `Err(detail)`.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfrobust_core::advrobust::{pgd_attack, AttackConfig, AttackLoss};
use selfrobust_core::corruptions::{eval_corruption_grid, gaussian_kernel, Corruption, CorruptionKind, Parametric, SEVERITIES};
use selfrobust_core::diffgraph::{
    cross_entropy, evaluate, forward_logits, loss_value, CrossEntropy, Layer, NetworkSpec, Objective, ParameterSet,
    Scalar, Tensor, UniformTarget,
};
use selfrobust_core::harness::{run::run_config, ExperimentConfig};
use selfrobust_core::labelnoise::{
    corrupt_labels, corruption_matrix, glc_corrected_loss, glc_estimate_from_probs, CorruptionMatrix, MatrixRole,
};
use selfrobust_core::ooddetect::{auroc, auroc_from_count, pairwise_count};
use selfrobust_core::selfsup::{rotation_ss_loss, total_loss, Batch, LossSpec};
use selfrobust_core::transforms::{build_ss_views, invert_label, rotate, translate, ViewConfig, ViewMode};

pub type Check = Result<String, String>;

/// Proptest settings without on-disk failure persistence.
pub fn prop_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        failure_persistence: None,
        ..proptest::test_runner::Config::with_cases(cases)
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect()).unwrap()
}

/// Pixel values in `[0, 1]` with some exact zeros and ones.
pub fn random_pixels(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f32>(),
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn bitwise_eq<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
}

pub fn layer_kind(layer: &Layer) -> &'static str {
    match layer {
        Layer::Conv2d { .. } => "conv2d",
        Layer::Dense { .. } => "dense",
        Layer::Relu => "relu",
        Layer::MaxPool { .. } => "max_pool",
        Layer::GlobalAvgPool => "global_avg_pool",
        Layer::Flatten => "flatten",
    }
}

pub const LAYER_KINDS: usize = 6;

/// A small random network. Even indices end the trunk in global average
/// pooling, odd ones in flatten; every third has a stride-2 convolution.
pub fn random_network(rng: &mut ChaCha8Rng, index: usize, with_rotation: bool) -> NetworkSpec {
    let channels = rng.random_range(1..=2);
    let side = rng.random_range(5..=8);
    let mut trunk = Vec::new();
    let mut h = side;
    for block in 0..1 + index % 2 {
        let kernel = rng.random_range(1..=3usize).min(h);
        let padding = rng.random_range(0..=1usize);
        let stride = if index.is_multiple_of(3) && block == 0 { 2 } else { 1 };
        let out = rng.random_range(2..=3);
        trunk.push(Layer::Conv2d { out_channels: out, kernel, stride, padding });
        h = (h + 2 * padding - kernel) / stride + 1;
        trunk.push(Layer::Relu);
        if h >= 2 && (index % 4 < 2 || rng.random_bool(0.5)) {
            trunk.push(Layer::MaxPool { size: 2 });
            h /= 2;
        }
    }
    trunk.push(if index.is_multiple_of(2) { Layer::GlobalAvgPool } else { Layer::Flatten });
    if index % 3 != 1 {
        trunk.push(Layer::Dense { out: rng.random_range(3..=6) });
        trunk.push(Layer::Relu);
    }
    let mut heads = BTreeMap::from([("class".to_string(), rng.random_range(2..=4))]);
    if with_rotation || index % 2 == 1 {
        heads.insert("rotation".to_string(), 4);
    }
    NetworkSpec::new([channels, side, side], trunk, heads).expect("generated network chains")
}

fn oracle_objective(labels: &BTreeMap<String, Vec<usize>>) -> Objective<'static, f64> {
    let mut o = Objective::new();
    for (i, (head, y)) in labels.iter().enumerate() {
        o.push(head, None, 1.0 / (i + 1) as f64, CrossEntropy { labels: y.clone() });
    }
    let first = labels.keys().next().expect("at least one head");
    o.push(first, Some(vec![0]), 0.3, UniformTarget);
    o
}

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub checked: usize,
    pub one_sided: usize,
    pub worst: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Compare `analytic` with finite differences of `f` at `x0`.
pub fn fd_compare(x0: f64, analytic: f64, mut f: impl FnMut(f64) -> f64, stats: &mut FdStats) {
    let h = FD_STEP;
    let (xp, xm) = (x0 + h, x0 - h);
    let central = (f(xp) - f(xm)) / (xp - xm);
    let mut err = relative_error(analytic, central);
    if err > FD_TOLERANCE {
        // A ReLU or max-pool switch inside [x−h, x+h] spoils the central
        // difference; at most one side of x0 holds it, so one of the
        // second-order one-sided stencils is clean.
        let f0 = f(x0);
        let fwd = (-3.0 * f0 + 4.0 * f(x0 + h) - f(x0 + 2.0 * h)) / (2.0 * h);
        let bwd = (3.0 * f0 - 4.0 * f(x0 - h) + f(x0 - 2.0 * h)) / (2.0 * h);
        err = relative_error(analytic, fwd).min(relative_error(analytic, bwd));
        stats.one_sided += 1;
    }
    stats.checked += 1;
    stats.worst = stats.worst.max(err);
}

/// Parameter and input gradients of one network against finite differences.
pub fn fd_network(spec: &NetworkSpec, seed: u64, stats: &mut FdStats) -> Result<(), String> {
    let mut r = rng(seed);
    let params = ParameterSet::<f64>::init(spec, r.random());
    let [c, h, w] = spec.input_shape();
    let n = 2;
    let images: Tensor<f64> = random_tensor(&mut r, &[n, c, h, w], 0.0, 1.0);
    let labels: BTreeMap<String, Vec<usize>> = spec
        .heads()
        .iter()
        .map(|(name, &k)| (name.clone(), (0..n).map(|_| r.random_range(0..k)).collect()))
        .collect();
    let e = evaluate(spec, &params, &images, &oracle_objective(&labels), true, true).map_err(|e| e.to_string())?;
    let pg = e.param_grads.expect("requested");
    let ig = e.input_grad.expect("requested");
    for (name, t) in params.iter() {
        let g = pg.get(name).ok_or(format!("no gradient for {name}"))?;
        for j in 0..t.len() {
            let loss_at = |x: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[j] = x;
                loss_value(spec, &p, &images, &oracle_objective(&labels)).unwrap()
            };
            fd_compare(t.data()[j], g.data()[j], loss_at, stats);
        }
    }
    for j in 0..images.len() {
        let loss_at = |x: f64| {
            let mut im = images.clone();
            im.data_mut()[j] = x;
            loss_value(spec, &params, &im, &oracle_objective(&labels)).unwrap()
        };
        fd_compare(images.data()[j], ig.data()[j], loss_at, stats);
    }
    Ok(())
}

pub fn criterion_gradients(nets: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut r = rng(seed);
    let mut kinds = BTreeSet::new();
    let mut stats = FdStats::default();
    for i in 0..nets {
        let spec = random_network(&mut r, i, false);
        kinds.extend(spec.trunk().iter().map(layer_kind));
        fd_network(&spec, r.random(), &mut stats)?;
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{nets} networks, {} layer kinds, {} entries, worst relative error {:.2e} ({} one-sided), {secs:.1}s",
        kinds.len(),
        stats.checked,
        stats.worst,
        stats.one_sided
    );
    if nets >= 20 && kinds.len() == LAYER_KINDS && stats.worst <= FD_TOLERANCE && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Network whose class logits are `[0, w·x]`, so the cross-entropy gradient
/// for label 0 points along `sign(w)`.
pub fn linear_model(rng: &mut ChaCha8Rng, side: usize) -> (NetworkSpec, ParameterSet<f32>, Vec<f32>) {
    let spec = NetworkSpec::new([1, side, side], vec![Layer::Flatten], BTreeMap::from([("class".into(), 2)])).unwrap();
    let mut params = ParameterSet::<f32>::zeros(&spec);
    let d = side * side;
    let w: Vec<f32> = (0..d)
        .map(|_| {
            let m = rng.random_range(0.01f32..0.2);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    params.get_mut("head.class.weight").unwrap().data_mut()[d..].copy_from_slice(&w);
    (spec, params, w)
}

pub fn check_pgd_output(x: &Tensor<f32>, adv: &Tensor<f32>, eps: f64) -> Result<(), String> {
    let bound = eps + 2.0 * f32::EPSILON as f64;
    for (&o, &a) in x.data().iter().zip(adv.data()) {
        if !(0.0..=1.0).contains(&a) {
            return Err(format!("pixel {a} outside [0, 1]"));
        }
        if (a as f64 - o as f64).abs() > bound {
            return Err(format!("|{a} − {o}| exceeds ε = {eps}"));
        }
    }
    Ok(())
}

pub fn random_attack(rng: &mut ChaCha8Rng) -> AttackConfig {
    AttackConfig {
        epsilon: if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..16.0 / 255.0) },
        alpha: rng.random_range(0.3..4.0) / 256.0,
        steps: rng.random_range(1..=4),
        random_start: rng.random_bool(0.5),
        attack_loss: if rng.random_bool(0.5) { AttackLoss::CeOnly } else { AttackLoss::CePlusSs },
    }
}

pub fn criterion_pgd(runs: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let nets: Vec<(NetworkSpec, ParameterSet<f32>)> = (0..8)
        .map(|i| {
            let spec = random_network(&mut r, i, true);
            let p = ParameterSet::init(&spec, r.random());
            (spec, p)
        })
        .collect();
    let mut zero_eps = 0;
    for run in 0..runs {
        let (spec, params) = &nets[run % nets.len()];
        let [c, h, w] = spec.input_shape();
        let n = r.random_range(1..=3);
        let x = random_pixels(&mut r, &[n, c, h, w]);
        let k = spec.head_classes("class").unwrap();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let cfg = random_attack(&mut r);
        let adv = pgd_attack(spec, params, &x, &labels, &cfg, &mut rng(r.random())).map_err(|e| format!("run {run}: {e}"))?;
        check_pgd_output(&x, &adv, cfg.epsilon).map_err(|m| format!("run {run}: {m}"))?;
        if cfg.epsilon == 0.0 {
            zero_eps += 1;
            if !bitwise_eq(&x, &adv) {
                return Err(format!("run {run}: ε = 0 changed the input"));
            }
        }
    }
    let linear = 100;
    for i in 0..linear {
        let side = r.random_range(2..=6);
        let (spec, params, w) = linear_model(&mut r, side);
        let eps = r.random_range(1.0..16.0) / 255.0;
        let eps32 = eps as f32;
        let x: Tensor<f32> = random_tensor(&mut r, &[1, 1, side, side], eps + 0.01, 1.0 - eps - 0.01);
        let cfg = AttackConfig {
            epsilon: eps,
            alpha: 2.0 / 256.0,
            steps: 2 + (2.0 * eps / (2.0 / 256.0)).ceil() as usize,
            random_start: i % 2 == 0,
            attack_loss: AttackLoss::CeOnly,
        };
        let adv = pgd_attack(&spec, &params, &x, &[0], &cfg, &mut rng(i as u64)).map_err(|e| e.to_string())?;
        let expected: Vec<f32> = x.data().iter().zip(&w).map(|(&v, &wi)| if wi > 0.0 { v + eps32 } else { v - eps32 }).collect();
        if adv.data().iter().zip(&expected).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("linear model {i}: attack did not land on x + ε·sign(w)"));
        }
    }
    Ok(format!("{runs} random attacks ({zero_eps} with ε = 0), {linear} linear models exact"))
}

pub fn criterion_loss_algebra(nets: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst_collinear: f64 = 0.0;
    for i in 0..nets {
        let spec = random_network(&mut r, i, true);
        let [c, h, w] = spec.input_shape();
        let n = r.random_range(1..=4);
        let k = spec.head_classes("class").unwrap();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let pseed: u64 = r.random();

        let x32: Tensor<f32> = random_tensor(&mut r, &[n, c, h, w], 0.0, 1.0);
        let p32 = ParameterSet::<f32>::init(&spec, pseed);
        let ce32 = cross_entropy(&forward_logits(&spec, &p32, &x32, "class").unwrap(), &labels).unwrap();
        let tl32 = total_loss(&spec, &p32, &Batch::labeled(x32.clone(), labels.clone()), &LossSpec::with_rotations(0.0)).unwrap();
        if tl32.to_bits() != ce32.to_bits() {
            return Err(format!("net {i}: f32 total loss at λ = 0 is {tl32}, cross-entropy {ce32}"));
        }

        let x = x32.cast::<f64>();
        let p = p32.cast::<f64>();
        let batch = Batch::labeled(x.clone(), labels.clone());
        let ce = cross_entropy(&forward_logits(&spec, &p, &x, "class").unwrap(), &labels).unwrap();
        let at = |lambda: f64| total_loss(&spec, &p, &batch, &LossSpec::with_rotations(lambda)).unwrap();
        if at(0.0).to_bits() != ce.to_bits() {
            return Err(format!("net {i}: total loss at λ = 0 differs from cross-entropy"));
        }
        let ss = rotation_ss_loss(&spec, &p, &x).unwrap();
        let lambdas = [0.25, 1.0, 3.0];
        for &l in &lambdas {
            if at(l).to_bits() != (ce + l * ss).to_bits() {
                return Err(format!("net {i}: total loss at λ = {l} is not CE + λ·SS"));
            }
        }
        let [a, b, c3] = lambdas.map(at);
        let cross = (b - a) * (lambdas[2] - lambdas[0]) - (c3 - a) * (lambdas[1] - lambdas[0]);
        worst_collinear = worst_collinear.max(cross.abs() / a.abs().max(c3.abs()));
        if worst_collinear > 1e-12 {
            return Err(format!("net {i}: three-point collinearity off by {worst_collinear:.2e}"));
        }

        let mut zeroed = p32.clone();
        for part in ["weight", "bias"] {
            zeroed.get_mut(&format!("head.rotation.{part}")).unwrap().data_mut().fill(0.0);
        }
        let rot = rotation_ss_loss(&spec, &zeroed, &x32).unwrap();
        if (rot as f64 - 4f64.ln()).abs() > 1e-6 {
            return Err(format!("net {i}: uniform rotation loss {rot}, expected ln 4"));
        }
    }
    Ok(format!("{nets} networks; λ = 0 bitwise CE in f32 and f64, uniform rotation loss ln 4, collinearity residual {worst_collinear:.1e}"))
}

pub fn brute_force_count(in_scores: &[f64], out_scores: &[f64]) -> (u128, u128) {
    let mut count = 0u128;
    for &o in out_scores {
        for &i in in_scores {
            count += match o.partial_cmp(&i).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    (count, 2 * (in_scores.len() * out_scores.len()) as u128)
}

pub fn random_scores(rng: &mut ChaCha8Rng, n: usize, levels: Option<u32>) -> Vec<f64> {
    (0..n)
        .map(|_| match levels {
            Some(l) => rng.random_range(0..l) as f64 * 0.5 - 1.0,
            None => rng.random_range(-3.0..3.0),
        })
        .collect()
}

pub fn criterion_auroc(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut tied = 0;
    for i in 0..instances {
        let levels = (i % 4 != 3).then(|| r.random_range(2..20));
        let (na, nb) = (r.random_range(1..80), r.random_range(1..80));
        let a = random_scores(&mut r, na, levels);
        let b = random_scores(&mut r, nb, levels);
        let brute = brute_force_count(&a, &b);
        let fast = pairwise_count(&a, &b).map_err(|e| e.to_string())?;
        if fast != brute {
            return Err(format!("instance {i}: sorted count {fast:?}, brute force {brute:?}"));
        }
        if a.iter().any(|x| b.contains(x)) {
            tied += 1;
        }
        let v = auroc(&a, &b).unwrap();
        if v.to_bits() != auroc_from_count(brute.0, brute.1).to_bits() {
            return Err(format!("instance {i}: auroc {v} differs from the brute-force count"));
        }
        if (v - brute.0 as f64 / brute.1 as f64).abs() > f64::EPSILON {
            return Err(format!("instance {i}: auroc {v} far from count/total"));
        }
        let back = auroc(&b, &a).unwrap();
        if v.to_bits() != (1.0 - back).to_bits() {
            return Err(format!("instance {i}: auroc(a, b) = {v} but 1 − auroc(b, a) = {}", 1.0 - back));
        }
    }
    Ok(format!("{instances} instances ({tied} with cross ties), counts and complements exact"))
}

pub fn random_stochastic(rng: &mut ChaCha8Rng, k: usize) -> CorruptionMatrix {
    let rows = (0..k)
        .map(|i| {
            let mut row: Vec<f64> = (0..k).map(|j| rng.random_range(0.0..1.0) + if i == j { 2.0 } else { 0.0 }).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            let rest: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
            row[i] = 1.0 - rest;
            row
        })
        .collect();
    CorruptionMatrix::from_rows(rows, MatrixRole::TrueMatrix).unwrap()
}

/// Probabilities whose expectation for clean class `y` is `C[y]`: half
/// `C[y]`, half a one-hot draw from it.
pub fn planted_probs(rng: &mut ChaCha8Rng, c: &CorruptionMatrix, per_class: usize) -> (Tensor<f64>, Vec<usize>) {
    let k = c.classes();
    let mut data = Vec::with_capacity(k * per_class * k);
    let mut clean = Vec::with_capacity(k * per_class);
    for y in 0..k {
        for _ in 0..per_class {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut drawn = k - 1;
            for (j, &p) in c.row(y).iter().enumerate() {
                acc += p;
                if u < acc {
                    drawn = j;
                    break;
                }
            }
            data.extend(c.row(y).iter().enumerate().map(|(j, &p)| 0.5 * p + if j == drawn { 0.5 } else { 0.0 }));
            clean.push(y);
        }
    }
    (Tensor::new(vec![k * per_class, k], data).unwrap(), clean)
}

pub fn criterion_label_noise(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut matrices = 0;
    for k in 2..=12 {
        let strengths = (0..=20).map(|i| i as f64 / 20.0).chain((0..10).map(|_| r.random::<f64>()));
        for s in strengths {
            let c = corruption_matrix(k, s).map_err(|e| e.to_string())?;
            for row in c.rows() {
                let fwd: f64 = row.iter().sum();
                let rev: f64 = row.iter().rev().sum();
                if fwd != 1.0 || rev != 1.0 {
                    return Err(format!("K = {k}, s = {s}: row sums {fwd}, {rev}"));
                }
            }
            matrices += 1;
        }
    }

    let n = 100_000;
    let mut worst_z: f64 = 0.0;
    for (k, s) in [(4, 0.6), (10, 0.3)] {
        let c = corruption_matrix(k, s).unwrap();
        let clean: Vec<usize> = (0..n).map(|i| i % k).collect();
        let noisy = corrupt_labels(&clean, &c, r.random()).map_err(|e| e.to_string())?;
        let mut counts = vec![0usize; k * k];
        for (&y, &z) in clean.iter().zip(&noisy) {
            counts[y * k + z] += 1;
        }
        let per = (n / k) as f64;
        for i in 0..k {
            for j in 0..k {
                let p = c.entry(i, j);
                let se = (p * (1.0 - p) / per).sqrt();
                let z = (counts[i * k + j] as f64 / per - p).abs() / se;
                worst_z = worst_z.max(z);
                if z > 4.0 {
                    return Err(format!("K = {k}, s = {s}: entry ({i}, {j}) is {z:.2} standard errors off"));
                }
            }
        }
    }

    let mut worst_glc: f64 = 0.0;
    for k in [3, 4, 10] {
        let planted = random_stochastic(&mut r, k);
        let (probs, clean) = planted_probs(&mut r, &planted, 1000);
        let est = glc_estimate_from_probs(&probs, &clean).map_err(|e| e.to_string())?;
        let d = est.matrix.max_abs_diff(&planted);
        worst_glc = worst_glc.max(d);
        if d >= 0.05 {
            return Err(format!("K = {k}: GLC estimate off by {d}"));
        }
    }

    for i in 0..1000 {
        let k = r.random_range(2..=10);
        let y = r.random_range(0..k);
        let logits: Vec<f64> = (0..k).map(|_| r.random_range(-8.0..8.0)).collect();
        let id = CorruptionMatrix::identity(k);
        let (v, _) = glc_corrected_loss(&logits, y, &id).map_err(|e| e.to_string())?;
        let ce = cross_entropy(&Tensor::new(vec![1, k], logits.clone()).unwrap(), &[y]).unwrap();
        let l32: Vec<f32> = logits.iter().map(|&v| v as f32).collect();
        let (v32, _) = glc_corrected_loss(&l32, y, &id).unwrap();
        let ce32 = cross_entropy(&Tensor::new(vec![1, k], l32).unwrap(), &[y]).unwrap();
        if v.to_bits() != ce.to_bits() || v32.to_bits() != ce32.to_bits() {
            return Err(format!("case {i}: corrected loss with identity is not cross-entropy"));
        }
    }
    Ok(format!(
        "{matrices} matrices sum exactly; worst frequency deviation {worst_z:.2} SE; GLC error {worst_glc:.4}; identity correction bitwise CE"
    ))
}

pub fn criterion_transforms(images: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut views = 0;
    for i in 0..images {
        let c = r.random_range(1..=3);
        let side = r.random_range(1..=12);
        let x: Tensor<f32> = random_tensor(&mut r, &[c, side, side], -1.0, 1.0);
        let mut y = x.clone();
        for step in 1..=4u8 {
            y = rotate(&y, 1).unwrap();
            if step < 4 && !bitwise_eq(&y, &rotate(&x, step).unwrap()) {
                return Err(format!("image {i}: rotating {step} times differs from rotate(x, {step})"));
            }
        }
        if !bitwise_eq(&y, &x) {
            return Err(format!("image {i}: four quarter turns are not the identity"));
        }
        let t = r.random_range(0..side) as isize * if r.random_bool(0.5) { 1 } else { -1 };
        let back_h = translate(&translate(&x, t, 0).unwrap(), -t, 0).unwrap();
        let back_v = translate(&translate(&x, 0, t).unwrap(), 0, -t).unwrap();
        if !bitwise_eq(&back_h, &x) || !bitwise_eq(&back_v, &x) {
            return Err(format!("image {i}: translation by {t} is not inverted"));
        }
        let batch = x.clone().reshape(vec![1, c, side, side]).unwrap();
        let mut configs = vec![ViewConfig::rotations()];
        if side >= 3 {
            let shift = r.random_range(1..=(side - 1) / 2);
            for mode in [ViewMode::ComposedSubset, ViewMode::FullProduct] {
                configs.push(ViewConfig::new(shift, &["rotation", "vtrans", "htrans"], mode).unwrap());
            }
        }
        for cfg in &configs {
            let vb = build_ss_views(&batch, cfg).map_err(|e| e.to_string())?;
            for (v, label) in vb.labels.iter().enumerate() {
                let restored = invert_label(&vb.images.item_tensor(v), *label, cfg.shift).unwrap();
                if !bitwise_eq(&restored, &x) {
                    return Err(format!("image {i}: view {v} ({label:?}) does not invert to its source"));
                }
                views += 1;
            }
        }
    }
    Ok(format!("{images} images, {views} views restored bitwise"))
}

/// Runs on an untrained random network; only the bookkeeping matters here.
pub fn criterion_corruptions(seed: u64) -> Check {
    let mut r = rng(seed);
    let spec = random_network(&mut r, 0, false);
    let params = ParameterSet::<f32>::init(&spec, r.random());
    let [c, h, w] = spec.input_shape();
    let n = 40;
    let images = random_pixels(&mut r, &[n, c, h, w]);
    let k = spec.head_classes("class").unwrap();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let data = selfrobust_core::dataset::LabeledImages::new(images, labels).unwrap();

    let identities: Vec<Parametric> = CorruptionKind::ALL.iter().map(|&k| Parametric::identity(k)).collect();
    let kinds: Vec<&dyn Corruption> = identities.iter().map(|p| p as &dyn Corruption).collect();
    let grid = eval_corruption_grid(&spec, &params, &data, &kinds, &SEVERITIES, r.random()).map_err(|e| e.to_string())?;
    if let Some(cell) = grid.cells.iter().find(|c| c.accuracy.to_bits() != grid.clean_accuracy.to_bits()) {
        return Err(format!("{} severity {}: {} vs clean {}", cell.kind, cell.severity, cell.accuracy, grid.clean_accuracy));
    }

    let real: Vec<&dyn Corruption> = CorruptionKind::ALL.iter().map(|k| k as &dyn Corruption).collect();
    let grid = eval_corruption_grid(&spec, &params, &data, &real, &SEVERITIES, r.random()).map_err(|e| e.to_string())?;
    for (kind, &mean) in &grid.per_kind {
        let cells: Vec<f64> = grid.cells.iter().filter(|c| &c.kind == kind).map(|c| c.accuracy).collect();
        let again = cells.iter().sum::<f64>() / cells.len() as f64;
        if cells.len() != SEVERITIES.len() || again.to_bits() != mean.to_bits() {
            return Err(format!("{kind}: per-kind mean {mean} does not re-aggregate ({again})"));
        }
    }
    let grand = grid.per_kind.values().sum::<f64>() / grid.per_kind.len() as f64;
    if grand.to_bits() != grid.grand_mean.to_bits() {
        return Err(format!("grand mean {} does not re-aggregate ({grand})", grid.grand_mean));
    }

    let mut worst: f64 = 0.0;
    let sigmas = CorruptionKind::GaussianBlur.table().into_iter().chain((1..=40).map(|i| i as f64 * 0.1));
    for sigma in sigmas {
        let s: f64 = gaussian_kernel(sigma).iter().sum();
        worst = worst.max((s - 1.0).abs());
    }
    if worst > 1e-6 {
        return Err(format!("blur kernel sums off by {worst:.2e}"));
    }
    Ok(format!(
        "identity corruptions reproduce clean accuracy {:.3}; {} per-kind means re-aggregate; kernel sum error {worst:.1e}",
        grid.clean_accuracy,
        grid.per_kind.len()
    ))
}

pub const SMALL_NET: &str = r#"
[network]
input = [1, 12, 12]
trunk = [
  { type = "conv2d", out_channels = 4, kernel = 3, padding = 1 },
  { type = "relu" },
  { type = "max_pool", size = 2 },
  { type = "flatten" },
  { type = "dense", out = 8 },
  { type = "relu" },
]
heads = { class = 4, rotation = 4, vtrans = 3, htrans = 3 }
"#;

pub const SMALL_DATA: &str = r#"
[data]
source = "synthetic"
classes = 4
size = 12
train_per_class = 8
test_per_class = 4
noise = 0.1
"#;

const SMALL_TRAIN: &str = "epochs = 1, batch_size = 16, optimizer = { learning_rate = 0.05 }";

/// One small config per experiment kind.
pub fn small_configs() -> Vec<(&'static str, String)> {
    let head = |kind: &str| format!("kind = \"{kind}\"\nseed = 7\noutput_dir = \"out_{kind}\"\n");
    vec![
        (
            "adv",
            format!(
                "{}{SMALL_DATA}{SMALL_NET}
[adv]
train = {{ {SMALL_TRAIN} }}
attack = {{ epsilon = 0.0313725, alpha = 0.0078125, steps = 2, attack_loss = \"ce_plus_ss\" }}
loss = {{ lambda = 0.5, enabled_heads = [\"rotation\"] }}
eval = [{{ epsilon = 0.0313725, alpha = 0.0078125, steps = 2 }}]
eps_sweep = [4.0]
",
                head("adv")
            ),
        ),
        (
            "corruptions",
            format!(
                "{}{SMALL_DATA}{SMALL_NET}
[corruptions]
train = {{ {SMALL_TRAIN} }}
loss = {{ lambda = 0.5, enabled_heads = [\"rotation\"] }}
severities = [1, 3]
",
                head("corruptions")
            ),
        ),
        (
            "labelnoise",
            format!(
                "{}{SMALL_DATA}{SMALL_NET}
[labelnoise]
strengths = [0.0, 0.5]
method = \"glc\"
trusted_fraction = 0.25
use_rotations = true
pretrain_epochs = 1
finetune_epochs = 1
train = {{ {SMALL_TRAIN} }}
",
                head("labelnoise")
            ),
        ),
        (
            "ood",
            format!(
                "{}{SMALL_DATA}{SMALL_NET}
[ood]
outliers = 16
[[ood.methods]]
name = \"rotation\"
score = {{ heads = [\"rotation\"] }}
train = {{ {SMALL_TRAIN} }}
[[ood.methods]]
name = \"rotation+translation\"
score = {{ heads = [\"rotation\", \"vtrans\", \"htrans\"], view_mode = \"composed_subset\", shift = 2 }}
train = {{ {SMALL_TRAIN} }}
oe_weight = 0.5
",
                head("ood")
            ),
        ),
    ]
}

/// Every artifact of a run except the manifest timestamp, keyed by file name.
pub fn run_artifacts(cfg: &ExperimentConfig, base: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let out = run_config(cfg, base).map_err(|e| e.to_string())?;
    let mut files = BTreeMap::new();
    for name in &out.manifest.artifacts {
        files.insert(name.clone(), std::fs::read(out.dir.join(name)).map_err(|e| e.to_string())?);
    }
    let mut m = out.manifest.clone();
    m.created_unix = 0;
    files.insert("manifest.json".into(), serde_json::to_vec(&m).unwrap());
    Ok(files)
}

pub fn criterion_determinism() -> Check {
    let mut done = Vec::new();
    for (kind, text) in small_configs() {
        let cfg = ExperimentConfig::parse(&text).map_err(|e| format!("{kind}: {e}"))?;
        // Same base directory for both runs: the checkpoint sidecar records it.
        let base = tempfile::tempdir().unwrap();
        let first = run_artifacts(&cfg, base.path()).map_err(|e| format!("{kind}: {e}"))?;
        let second = run_artifacts(&cfg, base.path()).map_err(|e| format!("{kind}: {e}"))?;
        if first != second {
            let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
            return Err(format!("{kind}: artifacts differ between runs: {differing:?}"));
        }
        done.push(format!("{kind} ({} files)", first.len()));
    }
    Ok(format!("identical reruns: {}", done.join(", ")))
}

const SHAPES_NET: &str = r#"
[network]
input = [1, 16, 16]
trunk = [
  { type = "conv2d", out_channels = 8, kernel = 3, padding = 1 },
  { type = "relu" },
  { type = "max_pool", size = 2 },
  { type = "conv2d", out_channels = 16, kernel = 3, padding = 1 },
  { type = "relu" },
  { type = "max_pool", size = 2 },
  { type = "flatten" },
  { type = "dense", out = 32 },
  { type = "relu" },
]
"#;

/// 4 classes of 16×16 glyphs, 2000 training images.
pub const SHAPES_DATA: &str = r#"
[data]
source = "synthetic"
classes = 4
size = 16
train_per_class = 500
test_per_class = 250
noise = 0.3
"#;

pub fn label_noise_config(seed: u64, use_rotations: bool) -> ExperimentConfig {
    let text = format!(
        "kind = \"labelnoise\"\nseed = {seed}\noutput_dir = \"labelnoise\"\n{SHAPES_DATA}{SHAPES_NET}heads = {{ class = 4, rotation = 4 }}
[labelnoise]
use_rotations = {use_rotations}
pretrain_epochs = 20
finetune_epochs = 8
train = {{ epochs = 10, batch_size = 64, optimizer = {{ learning_rate = 0.05 }} }}
"
    );
    ExperimentConfig::parse(&text).expect("label-noise config parses")
}

pub fn ood_config(seed: u64) -> ExperimentConfig {
    let train = "train = { epochs = 20, batch_size = 64, optimizer = { learning_rate = 0.05 } }";
    let text = format!(
        "kind = \"ood\"\nseed = {seed}\noutput_dir = \"ood\"\n{SHAPES_DATA}{SHAPES_NET}heads = {{ rotation = 4, vtrans = 3, htrans = 3 }}
[ood]
[[ood.methods]]
name = \"rotation\"
score = {{ heads = [\"rotation\"], view_mode = \"all_rotations\" }}
{train}
[[ood.methods]]
name = \"rotation+translation\"
score = {{ heads = [\"rotation\", \"vtrans\", \"htrans\"], view_mode = \"composed_subset\", shift = 4 }}
{train}
"
    );
    ExperimentConfig::parse(&text).expect("ood config parses")
}

pub const EXPERIMENT_SEEDS: [u64; 3] = [1, 2, 3];

pub fn criterion_label_noise_experiment() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in EXPERIMENT_SEEDS {
        let mean = |rot: bool| -> Result<f64, String> {
            let out = run_config(&label_noise_config(seed, rot), dir.path()).map_err(|e| e.to_string())?;
            let curve = out.report.label_noise.ok_or("no curve")?;
            if curve.strengths.len() != 11 {
                return Err(format!("{} strengths", curve.strengths.len()));
            }
            Ok(curve.mean_error)
        };
        let (base, rot) = (mean(false)?, mean(true)?);
        wins += usize::from(rot < base);
        lines.push(format!("seed {seed}: {base:.4} → {rot:.4}"));
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let detail = format!("mean error without → with rotations: {}; {mins:.1} min", lines.join(", "));
    if wins == EXPERIMENT_SEEDS.len() && mins < 30.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn criterion_ood_experiment() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut ok = 0;
    for seed in EXPERIMENT_SEEDS {
        let out = run_config(&ood_config(seed), dir.path()).map_err(|e| e.to_string())?;
        let det = out.report.detection.ok_or("no detection report")?;
        let mean = |name: &str| det.methods.iter().find(|m| m.method == name).map(|m| m.mean_auroc).ok_or(format!("no {name}"));
        let (rot, both) = (mean("rotation")?, mean("rotation+translation")?);
        ok += usize::from(both >= 0.80 && both >= rot - 0.02);
        lines.push(format!("seed {seed}: rotation {rot:.4}, +translation {both:.4}"));
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let detail = format!("mean AUROC {}; {mins:.1} min", lines.join("; "));
    if ok == EXPERIMENT_SEEDS.len() && mins < 20.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
