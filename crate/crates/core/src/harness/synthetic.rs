//! Synthetic glyph images: a small, learnable stand-in for natural image
//! classes. No glyph is invariant under any 90° rotation, and none is a
//! rotation of another, so rotation prediction is well posed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabeledImages};
use crate::diffgraph::Tensor;
use crate::error::{Error, Result};
use crate::harness::seed;

const GLYPH: usize = 7;

#[rustfmt::skip]
const GLYPHS: [(&str, [&str; GLYPH]); 8] = [
    ("ell", [
        "#......",
        "#......",
        "#......",
        "#......",
        "#......",
        "#......",
        "#######",
    ]),
    ("tee", [
        "#######",
        "...#...",
        "...#...",
        "...#...",
        "...#...",
        "...#...",
        "...#...",
    ]),
    ("wedge", [
        "#......",
        "##.....",
        "###....",
        "####...",
        "#####..",
        "######.",
        "#######",
    ]),
    ("hook", [
        "....##.",
        ".....#.",
        ".....#.",
        ".....#.",
        ".....#.",
        "#....#.",
        ".#####.",
    ]),
    ("eff", [
        "#######",
        "#......",
        "#......",
        "#####..",
        "#......",
        "#......",
        "#......",
    ]),
    ("pee", [
        "#####..",
        "#....#.",
        "#....#.",
        "#####..",
        "#......",
        "#......",
        "#......",
    ]),
    ("arrow", [
        "...#...",
        "..###..",
        ".#.#.#.",
        "#..#..#",
        "...#...",
        "...#...",
        "...#...",
    ]),
    ("four", [
        "#...#..",
        "#...#..",
        "#...#..",
        "#######",
        "....#..",
        "....#..",
        "....#..",
    ]),
];

pub const MAX_CLASSES: usize = GLYPHS.len();

pub fn glyph_names() -> impl Iterator<Item = &'static str> {
    GLYPHS.iter().map(|(n, _)| *n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Image height and width.
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default)]
    pub noise: f64,
    /// Randomize glyph position (±2 px per 16 px of image) and intensities.
    #[serde(default = "yes")]
    pub jitter: bool,
}

fn yes() -> bool {
    true
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 || self.classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "classes must be in 1..={MAX_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.size < 12 {
            return Err(Error::Config(format!("size must be >= 12, got {}", self.size)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be >= 0", self.noise)));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("need at least one example per class and split".into()));
        }
        Ok(())
    }

    fn scale(&self) -> usize {
        (self.size / 16).max(1)
    }
}

/// Render glyph `class` on a `size × size` canvas. `dx`, `dy` offset the
/// centered position; `fg` and `bg` are the glyph and background levels.
pub fn render_glyph(class: usize, size: usize, dx: isize, dy: isize, fg: f32, bg: f32) -> Vec<f32> {
    let scale = (size / 16).max(1);
    let extent = GLYPH * scale;
    let origin = (size - extent) as isize / 2;
    let mut px = vec![bg; size * size];
    for (gy, row) in GLYPHS[class].1.iter().enumerate() {
        for (gx, ch) in row.bytes().enumerate() {
            if ch != b'#' {
                continue;
            }
            for sy in 0..scale {
                for sx in 0..scale {
                    let y = origin + dy + (gy * scale + sy) as isize;
                    let x = origin + dx + (gx * scale + sx) as isize;
                    if (0..size as isize).contains(&y) && (0..size as isize).contains(&x) {
                        px[y as usize * size + x as usize] = fg;
                    }
                }
            }
        }
    }
    px
}

fn sample_split(cfg: &SyntheticConfig, per_class: usize, seed: u64) -> Result<LabeledImages<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let n = per_class * cfg.classes;
    let size = cfg.size;
    let reach = (2 * cfg.scale()) as i64;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % cfg.classes;
        let (dx, dy, fg, bg) = if cfg.jitter {
            (
                rng.random_range(-reach..=reach) as isize,
                rng.random_range(-reach..=reach) as isize,
                rng.random_range(0.7f32..=1.0),
                rng.random_range(0.0f32..=0.2),
            )
        } else {
            (0, 0, 1.0, 0.0)
        };
        let mut px = render_glyph(class, size, dx, dy, fg, bg);
        if cfg.noise > 0.0 {
            for v in &mut px {
                *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        data.extend(px);
        labels.push(class);
    }
    LabeledImages::new(Tensor::new(vec![n, 1, size, size], data)?, labels)
}

/// Train and test splits of glyph images; deterministic in `master_seed`.
pub fn gen_synthetic_shapes(cfg: &SyntheticConfig, master_seed: u64) -> Result<Dataset<f32>> {
    cfg.validate()?;
    let train = sample_split(cfg, cfg.train_per_class, seed::derive(master_seed, "shapes/train"))?;
    let test = sample_split(cfg, cfg.test_per_class, seed::derive(master_seed, "shapes/test"))?;
    Dataset::new(
        train,
        test,
        cfg.classes,
        format!("synthetic-shapes(classes={}, size={}, seed={master_seed})", cfg.classes, cfg.size),
    )
}

/// Smooth random textures with no glyph structure, used as outliers.
pub fn noise_textures(n: usize, shape: [usize; 3], master_seed: u64) -> Result<Tensor<f32>> {
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(master_seed, "textures"));
    let mut out = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        let raw: Vec<f32> = (0..c * h * w).map(|_| rng.random()).collect();
        let level: f32 = rng.random_range(0.2..0.8);
        for plane in raw.chunks_exact(h * w) {
            for y in 0..h {
                for x in 0..w {
                    // 3×3 cyclic box blur, then pulled toward a random level.
                    let mut s = 0.0;
                    for oy in [h - 1, 0, 1] {
                        for ox in [w - 1, 0, 1] {
                            s += plane[((y + oy) % h) * w + (x + ox) % w];
                        }
                    }
                    out.push((0.5 * s / 9.0 + 0.5 * level).clamp(0.0, 1.0));
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Render every glyph's canonical bitmap as text (`#` on, `.` off).
pub fn canonical_fixture(classes: usize, size: usize) -> String {
    let mut out = String::new();
    for class in 0..classes {
        out.push_str(&format!("{}\n", GLYPHS[class].0));
        let px = render_glyph(class, size, 0, 0, 1.0, 0.0);
        for row in px.chunks_exact(size) {
            out.extend(row.iter().map(|&v| if v > 0.5 { '#' } else { '.' }));
            out.push('\n');
        }
    }
    out
}
