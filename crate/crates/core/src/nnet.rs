//! Tiny differentiable classifiers: an MLP and a small convnet with exact
//! input-gradient backprop and plain SGD training.
//!
//! These are the desk-scale stand-ins for surrogate and victim models. The
//! model zoo is fixed: `Model::mlp` builds flatten → dense → relu → dense
//! (784→128→10 for MNIST-shaped inputs) and `Model::convnet` builds
//! conv3x3(8) → relu → maxpool2 → conv3x3(16) → relu → maxpool2 → flatten →
//! dense. Everything is f64 and single-threaded; forward passes on an
//! immutable model are safe to run concurrently.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::util::{
    expect_eof, expect_magic, malformed, read_f64_vec_le, read_u32_le, read_u8, write_f64_le,
    write_u32_le, write_u8, ParseError,
};

pub const MODEL_MAGIC: &[u8; 8] = b"EAMODEL1";

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("model format error in {path}: {msg}")]
    Format { path: String, msg: String },
}

impl NnetError {
    fn from_parse(e: ParseError, path: &Path) -> Self {
        let path = path.display().to_string();
        match e {
            ParseError::Io(source) => NnetError::Io { path, source },
            ParseError::Malformed(msg) => NnetError::Format { path, msg },
        }
    }
}

/// A `c × h × w` image with pixel values in `[0, 1]` and an integer label.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub label: usize,
}

impl Image {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        label: usize,
    ) -> Result<Self, NnetError> {
        if pixels.len() != channels * height * width {
            return Err(NnetError::Shape(format!(
                "pixel buffer has {} values, expected {}x{}x{} = {}",
                pixels.len(),
                channels,
                height,
                width,
                channels * height * width
            )));
        }
        if !pixels
            .iter()
            .all(|p| p.is_finite() && (0.0..=1.0).contains(p))
        {
            return Err(NnetError::InvalidInput(
                "pixel values must lie in [0, 1]".to_string(),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            pixels,
            label,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn dim(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl TensorShape {
    fn len(self) -> usize {
        match self {
            TensorShape::Spatial { c, h, w } => c * h * w,
            TensorShape::Flat(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Fully connected: `weights` is `out × in`, row-major.
    Dense {
        weights: Matrix,
        bias: Vec<f64>,
    },
    /// Valid-padding 3×3 convolution; `weights[((oc·in + ic)·3 + ky)·3 + kx]`.
    Conv3x3 {
        in_ch: usize,
        out_ch: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    Flatten,
    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
}

impl Layer {
    fn output_shape(&self, input: TensorShape) -> Result<TensorShape, NnetError> {
        match self {
            Layer::Dense { weights, bias } => {
                let TensorShape::Flat(n) = input else {
                    return Err(NnetError::Shape(
                        "dense layer requires flattened input".to_string(),
                    ));
                };
                if weights.cols() != n {
                    return Err(NnetError::Shape(format!(
                        "dense layer expects input {}, got {}",
                        weights.cols(),
                        n
                    )));
                }
                if bias.len() != weights.rows() {
                    return Err(NnetError::Shape("dense bias length mismatch".to_string()));
                }
                Ok(TensorShape::Flat(weights.rows()))
            }
            Layer::Conv3x3 {
                in_ch,
                out_ch,
                weights,
                bias,
            } => {
                let TensorShape::Spatial { c, h, w } = input else {
                    return Err(NnetError::Shape(
                        "conv layer requires spatial input".to_string(),
                    ));
                };
                if c != *in_ch {
                    return Err(NnetError::Shape(format!(
                        "conv layer expects {in_ch} input channels, got {c}"
                    )));
                }
                if h < 3 || w < 3 {
                    return Err(NnetError::Shape(format!(
                        "conv layer needs at least 3x3 input, got {h}x{w}"
                    )));
                }
                if weights.len() != out_ch * in_ch * 9 || bias.len() != *out_ch {
                    return Err(NnetError::Shape("conv parameter size mismatch".to_string()));
                }
                Ok(TensorShape::Spatial {
                    c: *out_ch,
                    h: h - 2,
                    w: w - 2,
                })
            }
            Layer::Relu => Ok(input),
            Layer::Flatten => match input {
                TensorShape::Spatial { .. } => Ok(TensorShape::Flat(input.len())),
                TensorShape::Flat(n) => Ok(TensorShape::Flat(n)),
            },
            Layer::MaxPool2 => {
                let TensorShape::Spatial { c, h, w } = input else {
                    return Err(NnetError::Shape(
                        "maxpool layer requires spatial input".to_string(),
                    ));
                };
                if h < 2 || w < 2 {
                    return Err(NnetError::Shape(format!(
                        "maxpool needs at least 2x2 input, got {h}x{w}"
                    )));
                }
                Ok(TensorShape::Spatial {
                    c,
                    h: h / 2,
                    w: w / 2,
                })
            }
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Dense { weights, bias } => weights.data().len() + bias.len(),
            Layer::Conv3x3 { weights, bias, .. } => weights.len() + bias.len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Margin,
}

/// A feed-forward classifier with a validated layer chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    input_shape: (usize, usize, usize),
    num_classes: usize,
}

/// An activation buffer flowing through the layer chain.
#[derive(Debug, Clone)]
struct Act {
    shape: TensorShape,
    data: Vec<f64>,
}

/// Per-layer parameter gradient accumulator (empty for parameterless layers).
struct ParamGrad {
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Model {
    /// Validates that the layer shapes chain from `input_shape` to a flat
    /// vector of `num_classes` logits and that all parameters are finite.
    pub fn new(
        input_shape: (usize, usize, usize),
        num_classes: usize,
        layers: Vec<Layer>,
    ) -> Result<Model, NnetError> {
        let (c, h, w) = input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(NnetError::Shape(
                "input shape has a zero dimension".to_string(),
            ));
        }
        if num_classes < 2 {
            return Err(NnetError::InvalidInput(
                "a classifier needs at least 2 classes".to_string(),
            ));
        }
        let mut shape = TensorShape::Spatial { c, h, w };
        for layer in &layers {
            shape = layer.output_shape(shape)?;
            let finite = match layer {
                Layer::Dense { weights, bias } => {
                    weights.is_finite() && bias.iter().all(|v| v.is_finite())
                }
                Layer::Conv3x3 { weights, bias, .. } => {
                    weights.iter().all(|v| v.is_finite()) && bias.iter().all(|v| v.is_finite())
                }
                _ => true,
            };
            if !finite {
                return Err(NnetError::InvalidInput(
                    "layer parameters must be finite".to_string(),
                ));
            }
        }
        if shape != TensorShape::Flat(num_classes) {
            return Err(NnetError::Shape(format!(
                "layer chain ends at {shape:?}, expected Flat({num_classes})"
            )));
        }
        Ok(Model {
            layers,
            input_shape,
            num_classes,
        })
    }

    /// flatten → dense(in→hidden) → relu → dense(hidden→classes), with
    /// seeded uniform ±√(6/(fan_in+fan_out)) weight init.
    pub fn mlp(
        input_shape: (usize, usize, usize),
        hidden: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Model, NnetError> {
        let (c, h, w) = input_shape;
        let input_dim = c * h * w;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let layers = vec![
            Layer::Flatten,
            dense_init(input_dim, hidden, &mut rng),
            Layer::Relu,
            dense_init(hidden, num_classes, &mut rng),
        ];
        Model::new(input_shape, num_classes, layers)
    }

    /// conv3x3(→8) → relu → maxpool2 → conv3x3(→16) → relu → maxpool2 →
    /// flatten → dense. Requires input at least 12×12 so the chain survives.
    pub fn convnet(
        input_shape: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
    ) -> Result<Model, NnetError> {
        let (c, h, w) = input_shape;
        if h < 12 || w < 12 {
            return Err(NnetError::Shape(format!(
                "convnet needs at least 12x12 input, got {h}x{w}"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (h1, w1) = ((h - 2) / 2, (w - 2) / 2);
        let (h2, w2) = ((h1 - 2) / 2, (w1 - 2) / 2);
        let dense_in = 16 * h2 * w2;
        let layers = vec![
            conv_init(c, 8, &mut rng),
            Layer::Relu,
            Layer::MaxPool2,
            conv_init(8, 16, &mut rng),
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            dense_init(dense_in, num_classes, &mut rng),
        ];
        Model::new(input_shape, num_classes, layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn check_input(&self, x: &Image) -> Result<(), NnetError> {
        if x.shape() != self.input_shape {
            return Err(NnetError::Shape(format!(
                "image shape {:?} does not match model input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Image) -> Result<Vec<f64>, NnetError> {
        self.check_input(x)?;
        let mut act = Act {
            shape: TensorShape::Spatial {
                c: x.channels,
                h: x.height,
                w: x.width,
            },
            data: x.pixels.clone(),
        };
        for layer in &self.layers {
            act = apply_layer(layer, &act);
        }
        Ok(act.data)
    }

    /// Forward pass keeping the input to every layer, plus the final logits.
    fn forward_acts(&self, x: &Image) -> (Vec<Act>, Vec<f64>) {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut act = Act {
            shape: TensorShape::Spatial {
                c: x.channels,
                h: x.height,
                w: x.width,
            },
            data: x.pixels.clone(),
        };
        for layer in &self.layers {
            let next = apply_layer(layer, &act);
            acts.push(act);
            act = next;
        }
        let logits = act.data;
        (acts, logits)
    }

    /// Backpropagate `logit_grad` down to the input, optionally accumulating
    /// parameter gradients.
    fn backward(
        &self,
        acts: &[Act],
        logit_grad: Vec<f64>,
        mut param_grads: Option<&mut Vec<ParamGrad>>,
    ) -> Vec<f64> {
        let mut grad = logit_grad;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let pg = param_grads.as_mut().map(|v| &mut v[idx]);
            grad = backward_layer(layer, &acts[idx], &grad, pg);
        }
        grad
    }

    /// Loss value and its exact gradient w.r.t. the input pixels.
    ///
    /// For [`LossKind::CrossEntropy`] the loss is −ln softmax(z)\[y\]; for
    /// [`LossKind::Margin`] it is `max_{k≠y} z_k − z_y` (the attack
    /// objective, to be maximized).
    pub fn loss_and_input_gradient(
        &self,
        x: &Image,
        y: usize,
        loss: LossKind,
    ) -> Result<(f64, Vec<f64>), NnetError> {
        self.check_input(x)?;
        if y >= self.num_classes {
            return Err(NnetError::InvalidInput(format!(
                "label {y} out of range for {} classes",
                self.num_classes
            )));
        }
        let (acts, logits) = self.forward_acts(x);
        let (value, logit_grad) = match loss {
            LossKind::CrossEntropy => cross_entropy_grad(&logits, y),
            LossKind::Margin => margin_grad(&logits, y),
        };
        let grad = self.backward(&acts, logit_grad, None);
        Ok((value, grad))
    }

    pub fn input_gradient(
        &self,
        x: &Image,
        y: usize,
        loss: LossKind,
    ) -> Result<Vec<f64>, NnetError> {
        Ok(self.loss_and_input_gradient(x, y, loss)?.1)
    }

    /// Fraction of images whose argmax logit equals their label.
    pub fn accuracy(&self, images: &[Image]) -> Result<f64, NnetError> {
        if images.is_empty() {
            return Err(NnetError::InvalidInput("empty image set".to_string()));
        }
        let mut hits = 0usize;
        for img in images {
            let logits = self.forward(img)?;
            if argmax(&logits) == img.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / images.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnetError> {
        let file = File::create(path).map_err(|source| NnetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|source| NnetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Model, NnetError> {
        let file = File::open(path).map_err(|source| NnetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut r = BufReader::new(file);
        Model::read_from(&mut r).map_err(|e| NnetError::from_parse(e, path))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        let (c, h, wd) = self.input_shape;
        write_u32_le(w, c as u32)?;
        write_u32_le(w, h as u32)?;
        write_u32_le(w, wd as u32)?;
        write_u32_le(w, self.num_classes as u32)?;
        write_u32_le(w, self.layers.len() as u32)?;
        for layer in &self.layers {
            match layer {
                Layer::Dense { weights, bias } => {
                    write_u8(w, 1)?;
                    write_u32_le(w, weights.rows() as u32)?;
                    write_u32_le(w, weights.cols() as u32)?;
                    for &v in weights.data() {
                        write_f64_le(w, v)?;
                    }
                    for &v in bias {
                        write_f64_le(w, v)?;
                    }
                }
                Layer::Conv3x3 {
                    in_ch,
                    out_ch,
                    weights,
                    bias,
                } => {
                    write_u8(w, 2)?;
                    write_u32_le(w, *out_ch as u32)?;
                    write_u32_le(w, *in_ch as u32)?;
                    for &v in weights {
                        write_f64_le(w, v)?;
                    }
                    for &v in bias {
                        write_f64_le(w, v)?;
                    }
                }
                Layer::Relu => write_u8(w, 3)?,
                Layer::Flatten => write_u8(w, 4)?,
                Layer::MaxPool2 => write_u8(w, 5)?,
            }
        }
        w.flush()
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Model, ParseError> {
        expect_magic(r, MODEL_MAGIC)?;
        let c = read_u32_le(r)? as usize;
        let h = read_u32_le(r)? as usize;
        let w = read_u32_le(r)? as usize;
        let num_classes = read_u32_le(r)? as usize;
        let n_layers = read_u32_le(r)? as usize;
        if n_layers > 64 {
            return Err(malformed(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let tag = read_u8(r)?;
            let layer = match tag {
                1 => {
                    let out = read_u32_le(r)? as usize;
                    let input = read_u32_le(r)? as usize;
                    if out * input > 16_000_000 {
                        return Err(malformed("dense layer too large".to_string()));
                    }
                    let weights = read_f64_vec_le(r, out * input)?;
                    let bias = read_f64_vec_le(r, out)?;
                    Layer::Dense {
                        weights: Matrix::from_vec(out, input, weights),
                        bias,
                    }
                }
                2 => {
                    let out_ch = read_u32_le(r)? as usize;
                    let in_ch = read_u32_le(r)? as usize;
                    if out_ch * in_ch > 1_000_000 {
                        return Err(malformed("conv layer too large".to_string()));
                    }
                    let weights = read_f64_vec_le(r, out_ch * in_ch * 9)?;
                    let bias = read_f64_vec_le(r, out_ch)?;
                    Layer::Conv3x3 {
                        in_ch,
                        out_ch,
                        weights,
                        bias,
                    }
                }
                3 => Layer::Relu,
                4 => Layer::Flatten,
                5 => Layer::MaxPool2,
                other => return Err(malformed(format!("unknown layer tag {other}"))),
            };
            layers.push(layer);
        }
        expect_eof(r)?;
        Model::new((c, h, w), num_classes, layers)
            .map_err(|e| malformed(format!("invalid model: {e}")))
    }
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn dense_init(input: usize, output: usize, rng: &mut ChaCha12Rng) -> Layer {
    let limit = glorot_limit(input, output);
    let weights: Vec<f64> = (0..output * input)
        .map(|_| rng.random::<f64>() * 2.0 * limit - limit)
        .collect();
    Layer::Dense {
        weights: Matrix::from_vec(output, input, weights),
        bias: vec![0.0; output],
    }
}

fn conv_init(in_ch: usize, out_ch: usize, rng: &mut ChaCha12Rng) -> Layer {
    let limit = glorot_limit(in_ch * 9, out_ch * 9);
    let weights: Vec<f64> = (0..out_ch * in_ch * 9)
        .map(|_| rng.random::<f64>() * 2.0 * limit - limit)
        .collect();
    Layer::Conv3x3 {
        in_ch,
        out_ch,
        weights,
        bias: vec![0.0; out_ch],
    }
}

fn apply_layer(layer: &Layer, input: &Act) -> Act {
    match layer {
        Layer::Dense { weights, bias } => {
            let n_out = weights.rows();
            let n_in = weights.cols();
            let mut out = bias.clone();
            let wd = weights.data();
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &wd[o * n_in..(o + 1) * n_in];
                let mut acc = 0.0;
                for (wv, xv) in row.iter().zip(&input.data) {
                    acc += wv * xv;
                }
                *out_v += acc;
            }
            Act {
                shape: TensorShape::Flat(n_out),
                data: out,
            }
        }
        Layer::Conv3x3 {
            in_ch,
            out_ch,
            weights,
            bias,
        } => {
            let TensorShape::Spatial { h, w, .. } = input.shape else {
                unreachable!("validated at construction");
            };
            let (oh, ow) = (h - 2, w - 2);
            let mut out = vec![0.0; out_ch * oh * ow];
            for oc in 0..*out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[oc];
                        for ic in 0..*in_ch {
                            let wbase = ((oc * in_ch + ic) * 3) * 3;
                            let ibase = ic * h * w;
                            for ky in 0..3 {
                                let irow = ibase + (oy + ky) * w + ox;
                                let wrow = wbase + ky * 3;
                                acc += weights[wrow] * input.data[irow]
                                    + weights[wrow + 1] * input.data[irow + 1]
                                    + weights[wrow + 2] * input.data[irow + 2];
                            }
                        }
                        out[(oc * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            Act {
                shape: TensorShape::Spatial {
                    c: *out_ch,
                    h: oh,
                    w: ow,
                },
                data: out,
            }
        }
        Layer::Relu => Act {
            shape: input.shape,
            data: input.data.iter().map(|&v| v.max(0.0)).collect(),
        },
        Layer::Flatten => Act {
            shape: TensorShape::Flat(input.data.len()),
            data: input.data.clone(),
        },
        Layer::MaxPool2 => {
            let TensorShape::Spatial { c, h, w } = input.shape else {
                unreachable!("validated at construction");
            };
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = ch * h * w + 2 * oy * w + 2 * ox;
                        let m = input.data[base]
                            .max(input.data[base + 1])
                            .max(input.data[base + w])
                            .max(input.data[base + w + 1]);
                        out[(ch * oh + oy) * ow + ox] = m;
                    }
                }
            }
            Act {
                shape: TensorShape::Spatial { c, h: oh, w: ow },
                data: out,
            }
        }
    }
}

fn backward_layer(
    layer: &Layer,
    input: &Act,
    grad_out: &[f64],
    param_grad: Option<&mut ParamGrad>,
) -> Vec<f64> {
    match layer {
        Layer::Dense { weights, .. } => {
            let n_out = weights.rows();
            let n_in = weights.cols();
            let wd = weights.data();
            let mut grad_in = vec![0.0; n_in];
            for o in 0..n_out {
                let g = grad_out[o];
                if g == 0.0 {
                    continue;
                }
                let row = &wd[o * n_in..(o + 1) * n_in];
                for (gi, wv) in grad_in.iter_mut().zip(row) {
                    *gi += wv * g;
                }
            }
            if let Some(pg) = param_grad {
                for (o, &g) in grad_out.iter().enumerate() {
                    if g != 0.0 {
                        let row = &mut pg.w[o * n_in..(o + 1) * n_in];
                        for (wv, xv) in row.iter_mut().zip(&input.data) {
                            *wv += g * xv;
                        }
                    }
                    pg.b[o] += g;
                }
            }
            grad_in
        }
        Layer::Conv3x3 {
            in_ch,
            out_ch,
            weights,
            ..
        } => {
            let TensorShape::Spatial { h, w, .. } = input.shape else {
                unreachable!("validated at construction");
            };
            let (oh, ow) = (h - 2, w - 2);
            let mut grad_in = vec![0.0; in_ch * h * w];
            let mut pg = param_grad;
            for oc in 0..*out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad_out[(oc * oh + oy) * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for ic in 0..*in_ch {
                            let wbase = ((oc * in_ch + ic) * 3) * 3;
                            let ibase = ic * h * w;
                            for ky in 0..3 {
                                let irow = ibase + (oy + ky) * w + ox;
                                let wrow = wbase + ky * 3;
                                grad_in[irow] += weights[wrow] * g;
                                grad_in[irow + 1] += weights[wrow + 1] * g;
                                grad_in[irow + 2] += weights[wrow + 2] * g;
                                if let Some(pg) = pg.as_mut() {
                                    pg.w[wrow] += input.data[irow] * g;
                                    pg.w[wrow + 1] += input.data[irow + 1] * g;
                                    pg.w[wrow + 2] += input.data[irow + 2] * g;
                                }
                            }
                        }
                        if let Some(pg) = pg.as_mut() {
                            pg.b[oc] += g;
                        }
                    }
                }
            }
            grad_in
        }
        Layer::Relu => input
            .data
            .iter()
            .zip(grad_out)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        Layer::Flatten => grad_out.to_vec(),
        Layer::MaxPool2 => {
            let TensorShape::Spatial { c, h, w } = input.shape else {
                unreachable!("validated at construction");
            };
            let (oh, ow) = (h / 2, w / 2);
            let mut grad_in = vec![0.0; c * h * w];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = ch * h * w + 2 * oy * w + 2 * ox;
                        // Route to the first maximal entry, matching the
                        // max() evaluation order of the forward pass.
                        let idxs = [base, base + 1, base + w, base + w + 1];
                        let mut best = idxs[0];
                        for &i in &idxs[1..] {
                            if input.data[i] > input.data[best] {
                                best = i;
                            }
                        }
                        grad_in[best] += grad_out[(ch * oh + oy) * ow + ox];
                    }
                }
            }
            grad_in
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy_grad(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -p[y].max(1e-300).ln();
    let mut grad = p;
    grad[y] -= 1.0;
    (loss, grad)
}

fn margin_grad(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let mut best = usize::MAX;
    for (k, &z) in logits.iter().enumerate() {
        if k != y && (best == usize::MAX || z > logits[best]) {
            best = k;
        }
    }
    let loss = logits[best] - logits[y];
    let mut grad = vec![0.0; logits.len()];
    grad[best] += 1.0;
    grad[y] -= 1.0;
    (loss, grad)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Minibatch SGD with cross-entropy loss. Deterministic for a fixed seed;
/// returns the final training-set accuracy.
pub fn train(model: &mut Model, data: &[Image], cfg: &TrainConfig) -> Result<f64, NnetError> {
    if data.is_empty() {
        return Err(NnetError::InvalidInput(
            "training data is empty".to_string(),
        ));
    }
    if cfg.lr <= 0.0 || !cfg.lr.is_finite() {
        return Err(NnetError::InvalidInput(
            "learning rate must be positive".to_string(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(NnetError::InvalidInput(
            "batch size must be >= 1".to_string(),
        ));
    }
    for img in data {
        model.check_input(img)?;
        if img.label >= model.num_classes {
            return Err(NnetError::InvalidInput(format!(
                "label {} out of range for {} classes",
                img.label, model.num_classes
            )));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads: Vec<ParamGrad> = model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Dense { weights, bias } => ParamGrad {
                w: vec![0.0; weights.data().len()],
                b: vec![0.0; bias.len()],
            },
            Layer::Conv3x3 { weights, bias, .. } => ParamGrad {
                w: vec![0.0; weights.len()],
                b: vec![0.0; bias.len()],
            },
            _ => ParamGrad {
                w: Vec::new(),
                b: Vec::new(),
            },
        })
        .collect();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            for g in &mut grads {
                g.w.iter_mut().for_each(|v| *v = 0.0);
                g.b.iter_mut().for_each(|v| *v = 0.0);
            }
            for &i in chunk {
                let img = &data[i];
                let (acts, logits) = model.forward_acts(img);
                let (_, logit_grad) = cross_entropy_grad(&logits, img.label);
                model.backward(&acts, logit_grad, Some(&mut grads));
            }
            let scale = cfg.lr / chunk.len() as f64;
            for (layer, g) in model.layers.iter_mut().zip(&grads) {
                match layer {
                    Layer::Dense { weights, bias } => {
                        for (wv, gv) in weights.data_mut().iter_mut().zip(&g.w) {
                            *wv -= scale * gv;
                        }
                        for (bv, gv) in bias.iter_mut().zip(&g.b) {
                            *bv -= scale * gv;
                        }
                    }
                    Layer::Conv3x3 { weights, bias, .. } => {
                        for (wv, gv) in weights.iter_mut().zip(&g.w) {
                            *wv -= scale * gv;
                        }
                        for (bv, gv) in bias.iter_mut().zip(&g.b) {
                            *bv -= scale * gv;
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    model.accuracy(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let pixels: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
        Image::new(1, side, side, pixels, 0).unwrap()
    }

    fn zero_weight_mlp(side: usize, classes: usize) -> Model {
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                weights: Matrix::zeros(classes, side * side),
                bias: vec![0.0; classes],
            },
        ];
        Model::new((1, side, side), classes, layers).unwrap()
    }

    #[test]
    fn zero_weight_model_zero_logits_and_gradient() {
        let m = zero_weight_mlp(6, 3);
        let x = test_image(6, 1);
        let logits = m.forward(&x).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let g = m.input_gradient(&x, 0, LossKind::Margin).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_dense_layer_is_linear_map() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let n = 16;
        let classes = 4;
        let wdata: Vec<f64> = (0..classes * n)
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let weights = Matrix::from_vec(classes, n, wdata.clone());
        let m = Model::new(
            (1, 4, 4),
            classes,
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weights,
                    bias: vec![0.0; classes],
                },
            ],
        )
        .unwrap();
        let x = test_image(4, 2);
        let logits = m.forward(&x).unwrap();
        for o in 0..classes {
            let want: f64 = (0..n).map(|i| wdata[o * n + i] * x.pixels[i]).sum();
            assert!((logits[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_cross_entropy_gradient_closed_form() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 9;
        let classes = 3;
        let wdata: Vec<f64> = (0..classes * n)
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let m = Model::new(
            (1, 3, 3),
            classes,
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weights: Matrix::from_vec(classes, n, wdata.clone()),
                    bias: vec![0.0; classes],
                },
            ],
        )
        .unwrap();
        let x = test_image(3, 5);
        let y = 1;
        let logits = m.forward(&x).unwrap();
        let p = softmax(&logits);
        let grad = m.input_gradient(&x, y, LossKind::CrossEntropy).unwrap();
        for i in 0..n {
            let mut want = 0.0;
            for k in 0..classes {
                let residual = p[k] - if k == y { 1.0 } else { 0.0 };
                want += residual * wdata[k * n + i];
            }
            assert!(
                (grad[i] - want).abs() < 1e-12,
                "coordinate {i}: got {}, want {want}",
                grad[i]
            );
        }
    }

    /// Central finite differences on a handful of coordinates, for both
    /// architectures and both losses.
    #[test]
    fn finite_difference_gradient_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let mlp = Model::mlp((1, 12, 12), 10, 3, 77).unwrap();
        let conv = Model::convnet((1, 12, 12), 3, 78).unwrap();
        for model in [&mlp, &conv] {
            for loss in [LossKind::CrossEntropy, LossKind::Margin] {
                for trial in 0..4 {
                    let x = test_image(12, 1000 + trial);
                    let y = (trial as usize) % 3;
                    let grad = model.input_gradient(&x, y, loss).unwrap();
                    for _ in 0..6 {
                        let i = rng.random_range(0..x.pixels.len());
                        let step = 1e-3;
                        let mut lo = x.clone();
                        let mut hi = x.clone();
                        // Keep probes inside [0,1]: shift the base point if
                        // the pixel is too close to the boundary.
                        let base = x.pixels[i].clamp(step, 1.0 - step);
                        lo.pixels[i] = base - step;
                        hi.pixels[i] = base + step;
                        let mut mid = x.clone();
                        mid.pixels[i] = base;
                        let g_mid = model.input_gradient(&mid, y, loss).unwrap()[i];
                        let f = |img: &Image| {
                            let logits = model.forward(img).unwrap();
                            match loss {
                                LossKind::CrossEntropy => -softmax(&logits)[y].ln(),
                                LossKind::Margin => margin_grad(&logits, y).0,
                            }
                        };
                        let numeric = (f(&hi) - f(&lo)) / (2.0 * step);
                        let denom = numeric.abs().max(g_mid.abs()).max(1e-8);
                        assert!(
                            (numeric - g_mid).abs() / denom < 1e-4,
                            "fd mismatch at {i}: analytic {g_mid}, numeric {numeric}"
                        );
                        let _ = grad;
                    }
                }
            }
        }
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let mut m = Model::mlp((1, 6, 6), 8, 2, 5).unwrap();
        let before = m.clone();
        let data: Vec<Image> = (0..4).map(|i| test_image(6, i)).collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        train(&mut m, &data, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn train_rejects_empty_data() {
        let mut m = Model::mlp((1, 6, 6), 8, 2, 5).unwrap();
        assert!(matches!(
            train(&mut m, &[], &TrainConfig::default()),
            Err(NnetError::InvalidInput(_))
        ));
    }

    #[test]
    fn training_is_seed_reproducible() {
        let data: Vec<Image> = (0..32)
            .map(|i| {
                let mut img = test_image(6, 100 + i);
                img.label = (i % 2) as usize;
                img
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut a = Model::mlp((1, 6, 6), 8, 2, 5).unwrap();
        let mut b = Model::mlp((1, 6, 6), 8, 2, 5).unwrap();
        train(&mut a, &data, &cfg).unwrap();
        train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_is_pure() {
        let m = Model::convnet((1, 14, 14), 4, 3).unwrap();
        let x = test_image(14, 8);
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = Model::mlp((1, 6, 6), 8, 2, 5).unwrap();
        let x = test_image(7, 1);
        assert!(matches!(m.forward(&x), Err(NnetError::Shape(_))));
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let m = Model::convnet((1, 16, 16), 5, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        m.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(m, loaded);
        // Second save produces identical bytes.
        let path2 = dir.path().join("model2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn model_load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMODEL").unwrap();
        assert!(matches!(Model::load(&path), Err(NnetError::Format { .. })));
        // Truncated file: valid magic then nothing.
        std::fs::write(&path, MODEL_MAGIC).unwrap();
        assert!(matches!(Model::load(&path), Err(NnetError::Format { .. })));
    }

    #[test]
    fn image_validation() {
        assert!(Image::new(1, 2, 2, vec![0.0, 0.5, 1.0, 0.25], 0).is_ok());
        assert!(Image::new(1, 2, 2, vec![0.0; 3], 0).is_err());
        assert!(Image::new(1, 2, 2, vec![0.0, 0.5, 1.0, 1.25], 0).is_err());
    }
}
