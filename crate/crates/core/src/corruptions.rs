//! Synthetic common corruptions (noise, blur, digital, weather) at five
//! severities, and a severity-grid accuracy harness.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImages;
use crate::diffgraph::{NetworkSpec, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::selfsup::CLASS_HEAD;
use crate::training::{accuracy, predict};

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    GaussianBlur,
    Contrast,
    JpegLikeQuantization,
    FogLikeHaze,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
        CorruptionKind::JpegLikeQuantization,
        CorruptionKind::FogLikeHaze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::JpegLikeQuantization => "jpeg_like_quantization",
            CorruptionKind::FogLikeHaze => "fog_like_haze",
        }
    }

    pub fn category(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise | CorruptionKind::ShotNoise => "noise",
            CorruptionKind::GaussianBlur => "blur",
            CorruptionKind::Contrast | CorruptionKind::JpegLikeQuantization => "digital",
            CorruptionKind::FogLikeHaze => "weather",
        }
    }

    /// Parameter per severity 1..=5:
    /// noise σ, photon count λ, blur σ, contrast factor, DCT step, haze weight.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.16, 0.20],
            CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            CorruptionKind::GaussianBlur => [0.4, 0.6, 0.8, 1.0, 1.2],
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            CorruptionKind::JpegLikeQuantization => [0.02, 0.04, 0.08, 0.12, 0.2],
            CorruptionKind::FogLikeHaze => [0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }

    /// Parameter value at which the corruption is the identity map.
    pub fn identity_param(self) -> f64 {
        match self {
            CorruptionKind::Contrast => 1.0,
            CorruptionKind::ShotNoise => f64::INFINITY,
            _ => 0.0,
        }
    }

    /// Apply this kind with an explicit parameter (see [`CorruptionKind::table`]).
    pub fn apply_param(self, image: &Tensor<f32>, param: f64, seed: u64) -> Result<Tensor<f32>> {
        let (c, h, w) = chw(image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = image.data();
        let out: Vec<f32> = match self {
            CorruptionKind::GaussianNoise => {
                if param == 0.0 {
                    src.to_vec()
                } else {
                    let normal = Normal::new(0.0, param)
                        .map_err(|e| Error::Range(format!("noise sigma {param}: {e}")))?;
                    src.iter()
                        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
                        .collect()
                }
            }
            CorruptionKind::ShotNoise => {
                if param.is_infinite() {
                    src.to_vec()
                } else {
                    if !(param > 0.0) {
                        return Err(Error::Range(format!("photon scale {param} must be > 0")));
                    }
                    src.iter()
                        .map(|&v| {
                            let rate = v as f64 * param;
                            if rate <= 0.0 {
                                return 0.0;
                            }
                            let k: f64 = Poisson::new(rate).expect("positive rate").sample(&mut rng);
                            (k / param) as f32
                        })
                        .collect()
                }
            }
            CorruptionKind::GaussianBlur => gaussian_blur(src, c, h, w, param),
            CorruptionKind::Contrast if param == 1.0 => src.to_vec(),
            CorruptionKind::Contrast => {
                let mut out = Vec::with_capacity(src.len());
                for plane in src.chunks_exact(h * w) {
                    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
                    out.extend(
                        plane
                            .iter()
                            .map(|&v| ((v as f64 - mean) * param + mean) as f32),
                    );
                }
                out
            }
            CorruptionKind::JpegLikeQuantization => {
                if param == 0.0 {
                    src.to_vec()
                } else {
                    block_dct_quantize(src, c, h, w, param)
                }
            }
            CorruptionKind::FogLikeHaze => {
                if param == 0.0 {
                    src.to_vec()
                } else {
                    let field = haze_field(h, w, &mut rng);
                    src.chunks_exact(h * w)
                        .flat_map(|plane| {
                            plane.iter().zip(&field).map(|(&v, &f)| {
                                ((1.0 - param) * v as f64 + param * f) as f32
                            })
                        })
                        .collect()
                }
            }
        };
        let out = out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Tensor::new(image.shape().to_vec(), out)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(CorruptionKind::name(*self))
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption `{s}`")))
    }
}

fn chw(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected a [C, H, W] image, got {s:?}"))),
    }
}

/// Something that degrades an image at a severity in 1..=5.
pub trait Corruption: Send + Sync {
    fn name(&self) -> String;
    fn corrupt(&self, image: &Tensor<f32>, severity: u8, seed: u64) -> Result<Tensor<f32>>;
}

fn check_severity(severity: u8) -> Result<usize> {
    if (1..=5).contains(&severity) {
        Ok(usize::from(severity - 1))
    } else {
        Err(Error::Range(format!("severity {severity} not in 1..=5")))
    }
}

impl Corruption for CorruptionKind {
    fn name(&self) -> String {
        CorruptionKind::name(*self).to_string()
    }

    fn corrupt(&self, image: &Tensor<f32>, severity: u8, seed: u64) -> Result<Tensor<f32>> {
        let i = check_severity(severity)?;
        self.apply_param(image, self.table()[i], seed)
    }
}

/// A built-in kind with a custom parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct Parametric {
    pub label: String,
    pub kind: CorruptionKind,
    pub params: [f64; 5],
}

impl Parametric {
    /// `kind` pinned to its identity parameter at every severity.
    pub fn identity(kind: CorruptionKind) -> Self {
        Parametric {
            label: format!("{}_identity", kind.name()),
            kind,
            params: [kind.identity_param(); 5],
        }
    }
}

impl Corruption for Parametric {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn corrupt(&self, image: &Tensor<f32>, severity: u8, seed: u64) -> Result<Tensor<f32>> {
        let i = check_severity(severity)?;
        self.kind.apply_param(image, self.params[i], seed)
    }
}

/// Corrupt a `[C, H, W]` image in `[0, 1]`; deterministic in `seed`.
pub fn corrupt(image: &Tensor<f32>, kind: CorruptionKind, severity: u8, seed: u64) -> Result<Tensor<f32>> {
    if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Range("corruption input outside [0, 1]".into()));
    }
    kind.corrupt(image, severity, seed)
}

/// Normalized 1-D Gaussian kernel of radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn gaussian_blur(src: &[f32], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return src.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0f32; src.len()];
    let mut tmp = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * plane[y * w + clamp(x as isize + j as isize - r, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                    .sum();
                out[ch * h * w + y * w + x] = v as f32;
            }
        }
    }
    out
}

/// Orthonormal DCT-II basis, `basis[u][i]`.
fn dct_basis(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|u| {
            let scale = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| scale * (PI * (2 * i + 1) as f64 * u as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

/// Quantize 8×8 block DCT coefficients with step `q·(1 + u + v)`.
fn block_dct_quantize(src: &[f32], c: usize, h: usize, w: usize, q: f64) -> Vec<f32> {
    const B: usize = 8;
    let mut out = src.to_vec();
    for ch in 0..c {
        let base = ch * h * w;
        for by in (0..h).step_by(B) {
            for bx in (0..w).step_by(B) {
                let (bh, bw) = (B.min(h - by), B.min(w - bx));
                let (dh, dw) = (dct_basis(bh), dct_basis(bw));
                let px = |y: usize, x: usize| src[base + (by + y) * w + bx + x] as f64;
                let mut coef = vec![0.0; bh * bw];
                for u in 0..bh {
                    for v in 0..bw {
                        let mut s = 0.0;
                        for y in 0..bh {
                            for x in 0..bw {
                                s += dh[u][y] * dw[v][x] * px(y, x);
                            }
                        }
                        let step = q * (1 + u + v) as f64;
                        coef[u * bw + v] = (s / step).round() * step;
                    }
                }
                for y in 0..bh {
                    for x in 0..bw {
                        let mut s = 0.0;
                        for u in 0..bh {
                            for v in 0..bw {
                                s += dh[u][y] * dw[v][x] * coef[u * bw + v];
                            }
                        }
                        out[base + (by + y) * w + bx + x] = s as f32;
                    }
                }
            }
        }
    }
    out
}

/// Smooth bright field in `[0.5, 1.0]` made of two random low-frequency waves.
fn haze_field(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let mut f = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let wave = (2.0 * PI * u + p1).sin() * (2.0 * PI * v + p2).cos();
            f.push(0.75 + 0.25 * wave);
        }
    }
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionCell {
    pub kind: String,
    pub severity: u8,
    pub accuracy: f64,
}

/// Accuracy per (kind, severity) with per-kind and overall means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionGrid {
    pub clean_accuracy: f64,
    pub cells: Vec<CorruptionCell>,
    pub per_kind: BTreeMap<String, f64>,
    pub grand_mean: f64,
}

impl CorruptionGrid {
    /// Build the summary rows from per-cell accuracies.
    pub fn from_cells(clean_accuracy: f64, cells: Vec<CorruptionCell>) -> Self {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for c in &cells {
            groups.entry(c.kind.clone()).or_default().push(c.accuracy);
        }
        let per_kind: BTreeMap<String, f64> = groups
            .into_iter()
            .map(|(k, v)| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                (k, m)
            })
            .collect();
        let grand_mean = if per_kind.is_empty() {
            clean_accuracy
        } else {
            per_kind.values().sum::<f64>() / per_kind.len() as f64
        };
        CorruptionGrid {
            clean_accuracy,
            cells,
            per_kind,
            grand_mean,
        }
    }

    /// `kind,severity,accuracy` rows.
    pub fn to_csv(&self) -> String {
        crate::report::csv_table(
            &["kind", "severity", "accuracy"],
            self.cells
                .iter()
                .map(|c| vec![c.kind.clone(), c.severity.to_string(), format!("{}", c.accuracy)]),
        )
    }
}

/// Accuracy on `data` for every corruption at every severity.
///
/// Cells are evaluated in parallel; each example's corruption seed depends
/// only on `(seed, cell, example)`.
pub fn eval_corruption_grid(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    data: &LabeledImages<f32>,
    kinds: &[&dyn Corruption],
    severities: &[u8],
    seed: u64,
) -> Result<CorruptionGrid> {
    for &s in severities {
        check_severity(s)?;
    }
    let clean = accuracy(&predict(spec, params, &data.images, CLASS_HEAD)?, &data.labels);
    let jobs: Vec<(usize, u8)> = (0..kinds.len())
        .flat_map(|k| severities.iter().map(move |&s| (k, s)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(k, s)| -> Result<CorruptionCell> {
            let kind = kinds[k];
            let cell_seed = crate::harness::seed::derive(seed, &format!("{}/{s}", kind.name()));
            let corrupted = (0..data.len())
                .map(|i| {
                    kind.corrupt(
                        &data.images.item_tensor(i),
                        s,
                        crate::harness::seed::derive(cell_seed, &i.to_string()),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let images = Tensor::stack(&corrupted)?;
            let pred = predict(spec, params, &images, CLASS_HEAD)?;
            Ok(CorruptionCell {
                kind: kind.name(),
                severity: s,
                accuracy: accuracy(&pred, &data.labels),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorruptionGrid::from_cells(clean, cells))
}
