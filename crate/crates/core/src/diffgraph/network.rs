use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernels::{axpy, dot};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One trunk layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Dense {
        out: usize,
    },
    Relu,
    /// Non-overlapping `size`×`size` max pooling.
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
}

fn one() -> usize {
    1
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "max_pool",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Flatten => "flatten",
        }
    }

}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetworkSpec {
    input: [usize; 3],
    trunk: Vec<Layer>,
    heads: BTreeMap<String, usize>,
}

/// Shared trunk feeding a set of named dense softmax heads.
///
/// Per-example activation shapes are checked when the spec is built, so a
/// constructed `NetworkSpec` always chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetworkSpec", into = "RawNetworkSpec")]
pub struct NetworkSpec {
    input: [usize; 3],
    trunk: Vec<Layer>,
    heads: BTreeMap<String, usize>,
    /// `shapes[i]` is the per-example shape entering trunk layer `i`;
    /// the last entry is the feature vector shape.
    shapes: Vec<Vec<usize>>,
}

impl TryFrom<RawNetworkSpec> for NetworkSpec {
    type Error = Error;

    fn try_from(raw: RawNetworkSpec) -> Result<Self> {
        NetworkSpec::new(raw.input, raw.trunk, raw.heads)
    }
}

impl From<NetworkSpec> for RawNetworkSpec {
    fn from(spec: NetworkSpec) -> Self {
        RawNetworkSpec {
            input: spec.input,
            trunk: spec.trunk,
            heads: spec.heads,
        }
    }
}

impl NetworkSpec {
    /// `input` is `[channels, height, width]`.
    pub fn new(
        input: [usize; 3],
        trunk: Vec<Layer>,
        heads: BTreeMap<String, usize>,
    ) -> Result<Self> {
        if input.contains(&0) {
            return Err(Error::Shape(format!("input shape {input:?} has a zero")));
        }
        let mut shapes = vec![input.to_vec()];
        for (i, layer) in trunk.iter().enumerate() {
            let cur = shapes.last().unwrap();
            let next = next_shape(cur, layer)
                .map_err(|m| Error::Shape(format!("trunk.{i} ({}): {m}", layer.kind())))?;
            shapes.push(next);
        }
        let features = shapes.last().unwrap();
        if features.len() != 1 {
            return Err(Error::Shape(format!(
                "trunk must end in a feature vector, got shape {features:?}"
            )));
        }
        if heads.is_empty() {
            return Err(Error::Shape("network declares no heads".into()));
        }
        if let Some((name, _)) = heads.iter().find(|(_, &k)| k == 0) {
            return Err(Error::Shape(format!("head `{name}` has zero classes")));
        }
        Ok(NetworkSpec {
            input,
            trunk,
            heads,
            shapes,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn trunk(&self) -> &[Layer] {
        &self.trunk
    }

    pub fn heads(&self) -> &BTreeMap<String, usize> {
        &self.heads
    }

    pub fn feature_dim(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn head_classes(&self, head: &str) -> Result<usize> {
        self.heads
            .get(head)
            .copied()
            .ok_or_else(|| Error::UnknownHead(head.to_string()))
    }

    pub fn has_head(&self, head: &str) -> bool {
        self.heads.contains_key(head)
    }

    /// Names and shapes of every trainable tensor, in checkpoint order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            let in_shape = &self.shapes[i];
            match *layer {
                Layer::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push((
                        trunk_name(i, "weight"),
                        vec![out_channels, in_shape[0], kernel, kernel],
                    ));
                    out.push((trunk_name(i, "bias"), vec![out_channels]));
                }
                Layer::Dense { out: o } => {
                    out.push((trunk_name(i, "weight"), vec![o, in_shape[0]]));
                    out.push((trunk_name(i, "bias"), vec![o]));
                }
                _ => {}
            }
        }
        for (name, &k) in &self.heads {
            out.push((head_name(name, "weight"), vec![k, self.feature_dim()]));
            out.push((head_name(name, "bias"), vec![k]));
        }
        out
    }

    fn check_images<T: Scalar>(&self, images: &Tensor<T>) -> Result<usize> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.input[..] {
            return Err(Error::Shape(format!(
                "images {s:?} do not match network input [N, {}, {}, {}]",
                self.input[0], self.input[1], self.input[2]
            )));
        }
        Ok(s[0])
    }
}

fn next_shape(cur: &[usize], layer: &Layer) -> std::result::Result<Vec<usize>, String> {
    let need_image = || {
        if cur.len() == 3 {
            Ok(())
        } else {
            Err(format!("expects [C, H, W] input, got {cur:?}"))
        }
    };
    match *layer {
        Layer::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            need_image()?;
            if out_channels == 0 || kernel == 0 || stride == 0 {
                return Err("out_channels, kernel and stride must be positive".into());
            }
            let (h, w) = (cur[1] + 2 * padding, cur[2] + 2 * padding);
            if h < kernel || w < kernel {
                return Err(format!("kernel {kernel} larger than padded input {h}x{w}"));
            }
            Ok(vec![
                out_channels,
                (h - kernel) / stride + 1,
                (w - kernel) / stride + 1,
            ])
        }
        Layer::Dense { out } => {
            if cur.len() != 1 {
                return Err(format!("expects a flat vector, got {cur:?}"));
            }
            if out == 0 {
                return Err("zero output width".into());
            }
            Ok(vec![out])
        }
        Layer::Relu => Ok(cur.to_vec()),
        Layer::MaxPool { size } => {
            need_image()?;
            if size == 0 || cur[1] < size || cur[2] < size {
                return Err(format!("pool size {size} does not fit {cur:?}"));
            }
            Ok(vec![cur[0], cur[1] / size, cur[2] / size])
        }
        Layer::GlobalAvgPool => {
            need_image()?;
            Ok(vec![cur[0]])
        }
        Layer::Flatten => Ok(vec![cur.iter().product()]),
    }
}

fn trunk_name(i: usize, part: &str) -> String {
    format!("trunk.{i}.{part}")
}

fn head_name(head: &str, part: &str) -> String {
    format!("head.{head}.{part}")
}

/// Trainable tensors keyed by `trunk.<i>.weight`, `head.<name>.bias`, ...
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ParameterSet { tensors }
    }

    /// He-normal weights and zero biases, deterministic in `seed`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in spec.parameter_shapes() {
            let tensor = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("head.") { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| T::of(normal.sample(&mut rng)))
                    .collect();
                Tensor::new(shape, data).unwrap()
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, tensor);
        }
        ParameterSet { tensors }
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParameterSet {
            tensors: spec
                .parameter_shapes()
                .into_iter()
                .map(|(n, s)| (n, Tensor::zeros(&s)))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Check that this set has exactly the tensors `spec` declares.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.parameter_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Shape(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }

    pub fn check_same_shapes(&self, other: &ParameterSet<T>) -> Result<()> {
        let same = self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if same {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets differ in names or shapes".into()))
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    fn tensor_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.tensors.get_mut(name).expect("gradient set mirrors spec")
    }
}

enum Cache<T> {
    /// im2col buffer, `[N][C*k*k][OH*OW]`.
    Conv { cols: Vec<T> },
    Dense { input: Vec<T> },
    Relu { output: Vec<T> },
    /// Flat input index chosen by each pooled output.
    MaxPool { argmax: Vec<usize> },
    None,
}

/// Forward activations retained for a backward pass.
pub struct Trace<T> {
    batch: usize,
    caches: Vec<Cache<T>>,
    features: Vec<T>,
    logits: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn logits(&self, head: &str) -> Result<&Tensor<T>> {
        self.logits
            .get(head)
            .ok_or_else(|| Error::UnknownHead(head.to_string()))
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn layer_label(i: usize, layer: &Layer) -> String {
    format!("trunk.{i} ({})", layer.kind())
}

fn check_finite<T: Scalar>(values: &[T], label: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFailure { layer: label() })
    }
}

/// Run the trunk once and evaluate each requested head.
pub fn forward_trace<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    images: &Tensor<T>,
    heads: &[&str],
) -> Result<Trace<T>> {
    let n = spec.check_images(images)?;
    for h in heads {
        spec.head_classes(h)?;
    }
    let mut act = images.data().to_vec();
    let mut caches = Vec::with_capacity(spec.trunk.len());
    for (i, layer) in spec.trunk.iter().enumerate() {
        let in_shape = &spec.shapes[i];
        let out_shape = &spec.shapes[i + 1];
        let (out, cache) = match *layer {
            Layer::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let w = params.tensor(&trunk_name(i, "weight"))?;
                let b = params.tensor(&trunk_name(i, "bias"))?;
                conv_forward(
                    &act,
                    n,
                    in_shape,
                    out_shape,
                    kernel,
                    stride,
                    padding,
                    w.data(),
                    b.data(),
                )
            }
            Layer::Dense { out } => {
                let w = params.tensor(&trunk_name(i, "weight"))?;
                let b = params.tensor(&trunk_name(i, "bias"))?;
                let y = dense_forward(&act, n, in_shape[0], out, w.data(), b.data());
                (y, Cache::Dense { input: act })
            }
            Layer::Relu => {
                let y: Vec<T> = act.iter().map(|&v| v.max(T::zero())).collect();
                (y.clone(), Cache::Relu { output: y })
            }
            Layer::MaxPool { size } => maxpool_forward(&act, n, in_shape, out_shape, size),
            Layer::GlobalAvgPool => {
                let (c, hw) = (in_shape[0], in_shape[1] * in_shape[2]);
                let scale = T::one() / T::of(hw as f64);
                let y = act
                    .chunks_exact(hw)
                    .map(|plane| plane.iter().copied().sum::<T>() * scale)
                    .collect::<Vec<_>>();
                debug_assert_eq!(y.len(), n * c);
                (y, Cache::None)
            }
            Layer::Flatten => (act, Cache::None),
        };
        check_finite(&out, || layer_label(i, layer))?;
        act = out;
        caches.push(cache);
    }
    let feat = spec.feature_dim();
    let mut logits = BTreeMap::new();
    for &h in heads {
        if logits.contains_key(h) {
            continue;
        }
        let k = spec.heads[h];
        let w = params.tensor(&head_name(h, "weight"))?;
        let b = params.tensor(&head_name(h, "bias"))?;
        let y = dense_forward(&act, n, feat, k, w.data(), b.data());
        check_finite(&y, || format!("head.{h}"))?;
        logits.insert(h.to_string(), Tensor::new(vec![n, k], y)?);
    }
    Ok(Trace {
        batch: n,
        caches,
        features: act,
        logits,
    })
}

/// Gradients produced by [`backward`].
pub struct Gradients<T> {
    pub params: Option<ParameterSet<T>>,
    pub input: Option<Tensor<T>>,
}

/// Reverse pass from per-head logit gradients.
///
/// Heads missing from `logit_grads` contribute nothing and receive zero
/// parameter gradients.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    trace: &Trace<T>,
    logit_grads: &BTreeMap<String, Tensor<T>>,
    want_params: bool,
    want_input: bool,
) -> Result<Gradients<T>> {
    let n = trace.batch;
    let feat = spec.feature_dim();
    let mut grads = want_params.then(|| ParameterSet::zeros(spec));
    let mut delta = vec![T::zero(); n * feat];
    for (h, g) in logit_grads {
        let k = spec.head_classes(h)?;
        if g.shape() != [n, k] {
            return Err(Error::Shape(format!(
                "gradient for head `{h}` has shape {:?}, expected [{n}, {k}]",
                g.shape()
            )));
        }
        let w = params.tensor(&head_name(h, "weight"))?;
        if let Some(grads) = grads.as_mut() {
            let (dw, db) = dense_param_grads(&trace.features, g.data(), n, feat, k);
            grads.tensor_mut(&head_name(h, "weight")).data_mut().copy_from_slice(&dw);
            grads.tensor_mut(&head_name(h, "bias")).data_mut().copy_from_slice(&db);
        }
        dense_input_grad_acc(&mut delta, g.data(), w.data(), n, feat, k);
    }

    for (i, layer) in spec.trunk.iter().enumerate().rev() {
        let in_shape = &spec.shapes[i];
        let out_shape = &spec.shapes[i + 1];
        let need_input_grad = i > 0 || want_input;
        let cache = &trace.caches[i];
        delta = match (layer, cache) {
            (
                &Layer::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Cache::Conv { cols },
            ) => {
                let w = params.tensor(&trunk_name(i, "weight"))?;
                if let Some(grads) = grads.as_mut() {
                    let (dw, db) = conv_param_grads(cols, &delta, n, in_shape, out_shape, kernel);
                    grads.tensor_mut(&trunk_name(i, "weight")).data_mut().copy_from_slice(&dw);
                    grads.tensor_mut(&trunk_name(i, "bias")).data_mut().copy_from_slice(&db);
                }
                if !need_input_grad {
                    break;
                }
                conv_input_grad(
                    &delta, n, in_shape, out_shape, kernel, stride, padding, w.data(),
                )
            }
            (&Layer::Dense { out }, Cache::Dense { input }) => {
                let w = params.tensor(&trunk_name(i, "weight"))?;
                if let Some(grads) = grads.as_mut() {
                    let (dw, db) = dense_param_grads(input, &delta, n, in_shape[0], out);
                    grads.tensor_mut(&trunk_name(i, "weight")).data_mut().copy_from_slice(&dw);
                    grads.tensor_mut(&trunk_name(i, "bias")).data_mut().copy_from_slice(&db);
                }
                if !need_input_grad {
                    break;
                }
                let mut dx = vec![T::zero(); n * in_shape[0]];
                dense_input_grad_acc(&mut dx, &delta, w.data(), n, in_shape[0], out);
                dx
            }
            (Layer::Relu, Cache::Relu { output }) => delta
                .iter()
                .zip(output)
                .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                .collect(),
            (Layer::MaxPool { .. }, Cache::MaxPool { argmax }) => {
                let mut dx = vec![T::zero(); n * in_shape.iter().product::<usize>()];
                for (&d, &src) in delta.iter().zip(argmax) {
                    dx[src] = dx[src] + d;
                }
                dx
            }
            (Layer::GlobalAvgPool, _) => {
                let hw = in_shape[1] * in_shape[2];
                let scale = T::one() / T::of(hw as f64);
                delta
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d * scale, hw))
                    .collect()
            }
            (Layer::Flatten, _) => delta,
            _ => unreachable!("cache kind always matches its layer"),
        };
    }
    if let Some(grads) = grads.as_ref() {
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NumericFailure {
                layer: name.clone(),
            });
        }
    }

    let input = if want_input {
        let [c, h, w] = spec.input;
        debug_assert_eq!(delta.len(), n * c * h * w);
        check_finite(&delta, || "input".to_string())?;
        Some(Tensor::new(vec![n, c, h, w], delta)?)
    } else {
        None
    };
    Ok(Gradients {
        params: grads,
        input,
    })
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    kernel: usize,
    stride: usize,
    padding: usize,
    w: &[T],
    b: &[T],
) -> (Vec<T>, Cache<T>) {
    let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oc, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let kk = c * kernel * kernel;
    let p = oh * ow;
    let mut cols = vec![T::zero(); n * kk * p];
    let mut y = vec![T::zero(); n * oc * p];
    for img in 0..n {
        let xi = &x[img * c * h * wd..(img + 1) * c * h * wd];
        let ci = &mut cols[img * kk * p..(img + 1) * kk * p];
        im2col(xi, ci, c, h, wd, kernel, stride, padding, oh, ow);
        let yi = &mut y[img * oc * p..(img + 1) * oc * p];
        for o in 0..oc {
            let row = &mut yi[o * p..(o + 1) * p];
            row.fill(b[o]);
            for k in 0..kk {
                axpy(row, w[o * kk + k], &ci[k * p..(k + 1) * p]);
            }
        }
    }
    (y, Cache::Conv { cols })
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cols: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let p = oh * ow;
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ((ch * kernel + ky) * kernel + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[row + oy * ow + ox] =
                                x[(ch * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn conv_param_grads<T: Scalar>(
    cols: &[T],
    delta: &[T],
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    kernel: usize,
) -> (Vec<T>, Vec<T>) {
    let kk = in_shape[0] * kernel * kernel;
    let (oc, p) = (out_shape[0], out_shape[1] * out_shape[2]);
    let mut dw = vec![T::zero(); oc * kk];
    let mut db = vec![T::zero(); oc];
    for img in 0..n {
        let ci = &cols[img * kk * p..(img + 1) * kk * p];
        let di = &delta[img * oc * p..(img + 1) * oc * p];
        for o in 0..oc {
            let drow = &di[o * p..(o + 1) * p];
            db[o] = db[o] + drow.iter().copied().sum::<T>();
            for k in 0..kk {
                dw[o * kk + k] = dw[o * kk + k] + dot(drow, &ci[k * p..(k + 1) * p]);
            }
        }
    }
    (dw, db)
}

#[allow(clippy::too_many_arguments)]
fn conv_input_grad<T: Scalar>(
    delta: &[T],
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    kernel: usize,
    stride: usize,
    padding: usize,
    w: &[T],
) -> Vec<T> {
    let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oc, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let kk = c * kernel * kernel;
    let p = oh * ow;
    let mut dx = vec![T::zero(); n * c * h * wd];
    let mut dcols = vec![T::zero(); kk * p];
    for img in 0..n {
        dcols.fill(T::zero());
        let di = &delta[img * oc * p..(img + 1) * oc * p];
        for o in 0..oc {
            let drow = &di[o * p..(o + 1) * p];
            for k in 0..kk {
                axpy(&mut dcols[k * p..(k + 1) * p], w[o * kk + k], drow);
            }
        }
        let dxi = &mut dx[img * c * h * wd..(img + 1) * c * h * wd];
        for ch in 0..c {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let row = ((ch * kernel + ky) * kernel + kx) * p;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < wd as isize {
                                let at = (ch * h + iy as usize) * wd + ix as usize;
                                dxi[at] = dxi[at] + dcols[row + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn dense_forward<T: Scalar>(x: &[T], n: usize, inp: usize, out: usize, w: &[T], b: &[T]) -> Vec<T> {
    let mut y = Vec::with_capacity(n * out);
    for row in x.chunks_exact(inp).take(n) {
        for o in 0..out {
            y.push(b[o] + dot(&w[o * inp..(o + 1) * inp], row));
        }
    }
    y
}

fn dense_param_grads<T: Scalar>(
    x: &[T],
    delta: &[T],
    n: usize,
    inp: usize,
    out: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); out * inp];
    let mut db = vec![T::zero(); out];
    for i in 0..n {
        let xi = &x[i * inp..(i + 1) * inp];
        for o in 0..out {
            let d = delta[i * out + o];
            if d != T::zero() {
                db[o] = db[o] + d;
                axpy(&mut dw[o * inp..(o + 1) * inp], d, xi);
            }
        }
    }
    (dw, db)
}

fn dense_input_grad_acc<T: Scalar>(
    dx: &mut [T],
    delta: &[T],
    w: &[T],
    n: usize,
    inp: usize,
    out: usize,
) {
    for i in 0..n {
        let dxi = &mut dx[i * inp..(i + 1) * inp];
        for o in 0..out {
            let d = delta[i * out + o];
            if d != T::zero() {
                axpy(dxi, d, &w[o * inp..(o + 1) * inp]);
            }
        }
    }
}

fn maxpool_forward<T: Scalar>(
    x: &[T],
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    size: usize,
) -> (Vec<T>, Cache<T>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let at = base + (oy * size + dy) * w + ox * size + dx;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                }
                y.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (y, Cache::MaxPool { argmax })
}
