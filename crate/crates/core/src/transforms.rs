//! Exact geometric transformations used as self-supervision targets, and
//! construction of labeled view batches.
//!
//! Conventions: rotation class `r` rotates by `r·90°` counter-clockwise.
//! Translation classes map `0 → −t`, `1 → 0`, `2 → +t`; positive `dx`
//! moves content right, positive `dy` moves it down, with wrap-around.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffgraph::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A self-supervised prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsHead {
    Rotation,
    Vtrans,
    Htrans,
    Resize,
}

impl SsHead {
    pub const ALL: [SsHead; 4] = [SsHead::Rotation, SsHead::Vtrans, SsHead::Htrans, SsHead::Resize];

    pub fn name(self) -> &'static str {
        match self {
            SsHead::Rotation => "rotation",
            SsHead::Vtrans => "vtrans",
            SsHead::Htrans => "htrans",
            SsHead::Resize => "resize",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            SsHead::Rotation => 4,
            SsHead::Vtrans | SsHead::Htrans => 3,
            SsHead::Resize => 2,
        }
    }
}

impl fmt::Display for SsHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SsHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SsHead::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::UnknownHead(s.to_string()))
    }
}

/// Which transformation produced a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransformLabel {
    pub rotation: u8,
    pub vtrans: u8,
    pub htrans: u8,
    pub resized: u8,
}

impl TransformLabel {
    pub const IDENTITY: TransformLabel = TransformLabel {
        rotation: 0,
        vtrans: 1,
        htrans: 1,
        resized: 0,
    };

    pub fn new(rotation: u8, vtrans: u8, htrans: u8, resized: u8) -> Result<Self> {
        if rotation > 3 || vtrans > 2 || htrans > 2 || resized > 1 {
            return Err(Error::Range(format!(
                "transform label ({rotation}, {vtrans}, {htrans}, {resized}) out of range"
            )));
        }
        Ok(TransformLabel {
            rotation,
            vtrans,
            htrans,
            resized,
        })
    }

    /// Target class for `head`.
    pub fn class(&self, head: SsHead) -> usize {
        usize::from(match head {
            SsHead::Rotation => self.rotation,
            SsHead::Vtrans => self.vtrans,
            SsHead::Htrans => self.htrans,
            SsHead::Resize => self.resized,
        })
    }

    /// Pixel shift `(dx, dy)` for a translation amplitude `t`.
    pub fn shift(&self, t: usize) -> (isize, isize) {
        let t = t as isize;
        ((self.htrans as isize - 1) * t, (self.vtrans as isize - 1) * t)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

fn chw(image: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected a [C, H, W] image, got {s:?}"))),
    }
}

/// Rotate by `r·90°` counter-clockwise. Requires a square image.
pub fn rotate<T: Scalar>(image: &Tensor<T>, r: u8) -> Result<Tensor<T>> {
    let (c, h, w) = chw(image)?;
    if h != w {
        return Err(Error::Shape(format!("rotation needs a square image, got {h}x{w}")));
    }
    if r > 3 {
        return Err(Error::Range(format!("rotation class {r} not in 0..4")));
    }
    let n = h;
    let src = image.data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        let plane = &src[ch * n * n..(ch + 1) * n * n];
        let dst = &mut out[ch * n * n..(ch + 1) * n * n];
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = match r {
                    0 => (i, j),
                    1 => (j, n - 1 - i),
                    2 => (n - 1 - i, n - 1 - j),
                    _ => (n - 1 - j, i),
                };
                dst[i * n + j] = plane[si * n + sj];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Cyclic shift: `out[y][x] = in[(y − dy) mod H][(x − dx) mod W]`.
pub fn translate<T: Scalar>(image: &Tensor<T>, dx: isize, dy: isize) -> Result<Tensor<T>> {
    let (c, h, w) = chw(image)?;
    if dx.unsigned_abs() >= w || dy.unsigned_abs() >= h {
        return Err(Error::Range(format!(
            "shift ({dx}, {dy}) out of range for {h}x{w} image"
        )));
    }
    let src = image.data();
    let mut out = vec![T::zero(); src.len()];
    let (h_i, w_i) = (h as isize, w as isize);
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as isize - dy).rem_euclid(h_i) as usize;
            for x in 0..w {
                let sx = (x as isize - dx).rem_euclid(w_i) as usize;
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// 2×2 average pooling followed by nearest-neighbour upsampling, when `apply`.
pub fn resize_probe<T: Scalar>(image: &Tensor<T>, apply: bool) -> Result<Tensor<T>> {
    let (c, h, w) = chw(image)?;
    if !apply {
        return Ok(image.clone());
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("resize needs even dimensions, got {h}x{w}")));
    }
    let src = image.data();
    let mut out = vec![T::zero(); src.len()];
    let quarter = T::of(0.25);
    for ch in 0..c {
        let at = |y: usize, x: usize| (ch * h + y) * w + x;
        for y in (0..h).step_by(2) {
            for x in (0..w).step_by(2) {
                let avg = (src[at(y, x)] + src[at(y, x + 1)] + src[at(y + 1, x)]
                    + src[at(y + 1, x + 1)])
                    * quarter;
                for (yy, xx) in [(y, x), (y, x + 1), (y + 1, x), (y + 1, x + 1)] {
                    out[at(yy, xx)] = avg;
                }
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Rotation, then translation, then the optional resize probe.
pub fn apply_label<T: Scalar>(image: &Tensor<T>, label: TransformLabel, t: usize) -> Result<Tensor<T>> {
    let mut v = rotate(image, label.rotation)?;
    let (dx, dy) = label.shift(t);
    if dx != 0 || dy != 0 {
        v = translate(&v, dx, dy)?;
    }
    resize_probe(&v, label.resized == 1)
}

/// Undo the rotation and translation of a view. Fails on resized views,
/// which are not invertible.
pub fn invert_label<T: Scalar>(view: &Tensor<T>, label: TransformLabel, t: usize) -> Result<Tensor<T>> {
    if label.resized == 1 {
        return Err(Error::Range("resized views cannot be inverted".into()));
    }
    let (dx, dy) = label.shift(t);
    let v = translate(view, -dx, -dy)?;
    rotate(&v, (4 - label.rotation) % 4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    /// The four rotations, untranslated.
    #[default]
    AllRotations,
    /// Four rotations at zero shift plus the four axis shifts at rotation 0.
    ComposedSubset,
    /// Every rotation × vertical shift × horizontal shift (36 views).
    FullProduct,
}

/// How self-supervised views are generated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewConfig {
    pub shift: usize,
    pub heads: BTreeSet<SsHead>,
    pub mode: ViewMode,
}

impl ViewConfig {
    pub fn new<S: AsRef<str>>(shift: usize, heads: &[S], mode: ViewMode) -> Result<Self> {
        let heads = heads
            .iter()
            .map(|h| h.as_ref().parse())
            .collect::<Result<BTreeSet<SsHead>>>()?;
        Ok(ViewConfig { shift, heads, mode })
    }

    pub fn rotations() -> Self {
        ViewConfig {
            shift: 0,
            heads: [SsHead::Rotation].into(),
            mode: ViewMode::AllRotations,
        }
    }

    /// Transformation labels produced for every original, in view order.
    pub fn labels(&self) -> Vec<TransformLabel> {
        let mut base = Vec::new();
        match self.mode {
            ViewMode::AllRotations => {
                base.extend((0..4).map(|r| TransformLabel {
                    rotation: r,
                    ..TransformLabel::IDENTITY
                }));
            }
            ViewMode::ComposedSubset => {
                base.extend((0..4).map(|r| TransformLabel {
                    rotation: r,
                    ..TransformLabel::IDENTITY
                }));
                for (v, h) in [(1, 0), (1, 2), (0, 1), (2, 1)] {
                    base.push(TransformLabel {
                        vtrans: v,
                        htrans: h,
                        ..TransformLabel::IDENTITY
                    });
                }
            }
            ViewMode::FullProduct => {
                for r in 0..4 {
                    for v in 0..3 {
                        for h in 0..3 {
                            base.push(TransformLabel {
                                rotation: r,
                                vtrans: v,
                                htrans: h,
                                resized: 0,
                            });
                        }
                    }
                }
            }
        }
        if self.heads.contains(&SsHead::Resize) {
            let resized: Vec<_> = base
                .iter()
                .map(|l| TransformLabel { resized: 1, ..*l })
                .collect();
            base.extend(resized);
        }
        base
    }

    pub fn views_per_image(&self) -> usize {
        self.labels().len()
    }
}

/// Transformed copies of a batch with their transformation labels.
#[derive(Debug, Clone)]
pub struct ViewBatch<T: Scalar = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<TransformLabel>,
    /// Index of the original example each view came from.
    pub source_index: Vec<usize>,
}

impl<T: Scalar> ViewBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows holding the untransformed view of each original, in source order.
    pub fn identity_rows(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_identity())
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-view target classes for `head`.
    pub fn targets(&self, head: SsHead) -> Vec<usize> {
        self.labels.iter().map(|l| l.class(head)).collect()
    }
}

/// Build every configured view of every image in `images` (`[N, C, H, W]`).
pub fn build_ss_views<T: Scalar>(images: &Tensor<T>, cfg: &ViewConfig) -> Result<ViewBatch<T>> {
    let [n, _, h, w] = *images.shape() else {
        return Err(Error::Shape(format!(
            "expected [N, C, H, W] images, got {:?}",
            images.shape()
        )));
    };
    let translating = cfg.mode != ViewMode::AllRotations;
    if translating && 2 * cfg.shift >= h.min(w) {
        return Err(Error::Range(format!(
            "shift {} must be below half the image size {h}x{w}",
            cfg.shift
        )));
    }
    let per = cfg.labels();
    let mut views = Vec::with_capacity(n * per.len());
    let mut labels = Vec::with_capacity(n * per.len());
    let mut source_index = Vec::with_capacity(n * per.len());
    for i in 0..n {
        let img = images.item_tensor(i);
        for &label in &per {
            views.push(apply_label(&img, label, cfg.shift)?);
            labels.push(label);
            source_index.push(i);
        }
    }
    Ok(ViewBatch {
        images: Tensor::stack(&views)?,
        labels,
        source_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn rotate_two_by_two_counter_clockwise() {
        // [[a, b], [c, d]] -> [[b, d], [a, c]]
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rotate(&x, 1).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(rotate(&x, 0).unwrap(), x);
    }

    #[test]
    fn rotate_composes() {
        let x = img(2, 5, 5);
        let r1 = rotate(&x, 1).unwrap();
        assert_eq!(rotate(&r1, 1).unwrap(), rotate(&x, 2).unwrap());
        assert_eq!(rotate(&rotate(&r1, 1).unwrap(), 1).unwrap(), rotate(&x, 3).unwrap());
        assert!(rotate(&img(1, 2, 3), 1).is_err());
    }

    #[test]
    fn translate_row_wraps() {
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(translate(&x, 1, 0).unwrap().data(), &[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(translate(&x, 0, 0).unwrap(), x);
        assert!(translate(&x, 4, 0).is_err());
        assert!(translate(&x, 0, 1).is_err());
    }

    #[test]
    fn translate_vertical_moves_rows_down() {
        let x = img(1, 3, 2);
        let y = translate(&x, 0, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn resize_probe_cases() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(resize_probe(&x, true).unwrap().data(), &[0.5; 4]);
        assert_eq!(resize_probe(&x, false).unwrap(), x);
        let flat = Tensor::full(&[3, 4, 4], 0.3);
        assert_eq!(resize_probe(&flat, true).unwrap(), flat);
        assert!(resize_probe(&img(1, 3, 4), true).is_err());
        assert_eq!(resize_probe(&img(1, 3, 3), false).unwrap(), img(1, 3, 3));
    }

    #[test]
    fn all_rotation_views() {
        let batch = Tensor::stack(&[img(1, 4, 4), img(1, 4, 4).map(|v| -v)]).unwrap();
        let vb = build_ss_views(&batch, &ViewConfig::rotations()).unwrap();
        assert_eq!(vb.len(), 8);
        assert_eq!(vb.images.shape(), &[8, 1, 4, 4]);
        for r in 0..4 {
            assert_eq!(vb.labels.iter().filter(|l| l.rotation == r).count(), 2);
        }
        assert_eq!(vb.identity_rows(), vec![0, 4]);
        assert_eq!(vb.source_index, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn composed_subset_label_multiset() {
        let cfg = ViewConfig::new(1, &["rotation", "vtrans", "htrans"], ViewMode::ComposedSubset)
            .unwrap();
        let batch = Tensor::stack(&[img(1, 4, 4)]).unwrap();
        let vb = build_ss_views(&batch, &cfg).unwrap();
        assert_eq!(vb.len(), 8);
        let mut got: Vec<(u8, u8, u8)> =
            vb.labels.iter().map(|l| (l.rotation, l.vtrans, l.htrans)).collect();
        got.sort();
        let mut want = vec![
            (0, 1, 1),
            (1, 1, 1),
            (2, 1, 1),
            (3, 1, 1),
            (0, 0, 1),
            (0, 2, 1),
            (0, 1, 0),
            (0, 1, 2),
        ];
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn views_match_direct_transforms() {
        let cfg = ViewConfig::new(1, &["rotation", "vtrans", "htrans"], ViewMode::ComposedSubset)
            .unwrap();
        let x = img(2, 4, 4);
        let vb = build_ss_views(&Tensor::stack(std::slice::from_ref(&x)).unwrap(), &cfg).unwrap();
        for (i, l) in vb.labels.iter().enumerate() {
            let (dx, dy) = l.shift(1);
            let want = translate(&rotate(&x, l.rotation).unwrap(), dx, dy).unwrap();
            assert_eq!(vb.images.item(i), want.data());
        }
    }

    #[test]
    fn resize_head_doubles_views() {
        let cfg = ViewConfig::new(0, &["rotation", "resize"], ViewMode::AllRotations).unwrap();
        assert_eq!(cfg.views_per_image(), 8);
        assert_eq!(cfg.labels().iter().filter(|l| l.resized == 1).count(), 4);
    }

    #[test]
    fn rejects_unknown_head_and_large_shift() {
        assert!(matches!(
            ViewConfig::new(1, &["flip"], ViewMode::AllRotations),
            Err(Error::UnknownHead(_))
        ));
        let cfg = ViewConfig::new(2, &["vtrans"], ViewMode::ComposedSubset).unwrap();
        let batch = Tensor::stack(&[img(1, 4, 4)]).unwrap();
        assert!(build_ss_views(&batch, &cfg).is_err());
    }

    #[test]
    fn full_product_has_36_views() {
        let cfg = ViewConfig::new(1, &["rotation"], ViewMode::FullProduct).unwrap();
        assert_eq!(cfg.views_per_image(), 36);
    }
}
