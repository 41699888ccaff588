//! The six susceptibility models. Per-pixel models (LLR, NN, LANN) are stacks
//! of 1x1 convolutions; CNN and LACNN share one encoder/decoder with long
//! concatenation skips. LANN and LACNN differ from NN and CNN only in taking
//! the aligned channels as extra inputs.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_tensors, write_tensors};
use crate::nn::layers::{self, Pointwise};
use crate::nn::optim::{OptimState, OptimizerKind};
use crate::nn::receptive::{RfGraph, RfNode};
use crate::nn::Tensor;
use crate::raster::{is_categorical_channel, FeatureStack, BASE_CHANNELS};

pub const DEFAULT_NAIVE_P: f64 = 0.013;
pub const DEFAULT_DEPTH: usize = 3;
pub const DEFAULT_WIDTHS: [usize; 4] = [32, 64, 128, 256];
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];
/// 22 selected channels at 3 looking distances.
pub const DEFAULT_ALIGNED_CHANNELS: usize = 66;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Naive,
    Llr,
    Nn,
    Lann,
    Cnn,
    Lacnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Naive,
        ModelKind::Llr,
        ModelKind::Nn,
        ModelKind::Lann,
        ModelKind::Cnn,
        ModelKind::Lacnn,
    ];

    pub fn uses_alignment(self) -> bool {
        matches!(self, ModelKind::Lann | ModelKind::Lacnn)
    }

    pub fn is_convolutional(self) -> bool {
        matches!(self, ModelKind::Cnn | ModelKind::Lacnn)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Naive => "naive",
            ModelKind::Llr => "llr",
            ModelKind::Nn => "nn",
            ModelKind::Lann => "lann",
            ModelKind::Cnn => "cnn",
            ModelKind::Lacnn => "lacnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Total input channels: base channels plus `aligned_channels`.
    pub in_channels: usize,
    /// How many of the input channels are aligned (0 unless lann/lacnn).
    #[serde(default)]
    pub aligned_channels: usize,
    /// Number of pooling stages (cnn/lacnn).
    pub depth: usize,
    /// Channel widths per resolution level, `depth + 1` entries (cnn/lacnn).
    pub widths: Vec<usize>,
    /// Hidden layer sizes of the per-pixel perceptron (nn/lann).
    pub hidden: Vec<usize>,
    /// Constant prediction of the naive model.
    pub naive_p: f64,
}

impl ModelSpec {
    /// Defaults for the full 94-channel base stack (160 with alignment).
    pub fn preset(kind: ModelKind) -> Self {
        ModelSpec::for_stack(kind, BASE_CHANNELS, DEFAULT_ALIGNED_CHANNELS)
    }

    /// Defaults sized for a given base stack and aligned channel count.
    pub fn for_stack(kind: ModelKind, base_channels: usize, aligned_channels: usize) -> Self {
        let aligned = if kind.uses_alignment() {
            aligned_channels
        } else {
            0
        };
        ModelSpec {
            kind,
            in_channels: base_channels + aligned,
            aligned_channels: aligned,
            depth: DEFAULT_DEPTH,
            widths: DEFAULT_WIDTHS.to_vec(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            naive_p: DEFAULT_NAIVE_P,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.kind.uses_alignment() {
            if self.aligned_channels == 0 || self.aligned_channels >= self.in_channels {
                return bad(format!(
                    "{} needs 0 < aligned_channels < in_channels, got {} of {}",
                    self.kind, self.aligned_channels, self.in_channels
                ));
            }
        } else if self.aligned_channels != 0 {
            return bad(format!("{} takes no aligned channels", self.kind));
        }
        if self.kind.is_convolutional() {
            if self.depth == 0 || self.depth > 8 {
                return bad(format!("depth must be in 1..=8, got {}", self.depth));
            }
            if self.widths.len() != self.depth + 1 || self.widths.contains(&0) {
                return bad(format!(
                    "widths must have depth + 1 = {} positive entries, got {:?}",
                    self.depth + 1,
                    self.widths
                ));
            }
        }
        if matches!(self.kind, ModelKind::Nn | ModelKind::Lann) && self.hidden.contains(&0) {
            return bad(format!("hidden sizes must be positive: {:?}", self.hidden));
        }
        if !(self.naive_p > 0.0 && self.naive_p < 1.0) {
            return bad(format!("naive_p must lie in (0, 1), got {}", self.naive_p));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        if self.kind.is_convolutional() {
            1 << self.depth
        } else {
            1
        }
    }

    pub fn rf_graph(&self) -> RfGraph {
        let mut g = RfGraph::new();
        match self.kind {
            ModelKind::Naive => {
                g.push(RfNode::Pointwise { from: 0 });
            }
            ModelKind::Llr | ModelKind::Nn | ModelKind::Lann => {
                let mut h = g.input();
                for _ in 0..self.per_pixel_sizes().len() {
                    h = g.conv(h, 1);
                }
            }
            ModelKind::Cnn | ModelKind::Lacnn => {
                let mut h = g.input();
                let mut skips = Vec::new();
                for _ in 0..self.depth {
                    let a = g.conv(h, 3);
                    let b = g.conv(a, 3);
                    skips.push(b);
                    h = g.pool(b);
                }
                h = g.conv(h, 3);
                h = g.conv(h, 3);
                for s in (0..self.depth).rev() {
                    let u = g.upsample(h);
                    let c = g.concat(u, skips[s]);
                    h = g.conv(c, 3);
                }
                g.conv(h, 1);
            }
        }
        g
    }

    fn per_pixel_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.in_channels];
        if matches!(self.kind, ModelKind::Nn | ModelKind::Lann) {
            sizes.extend(&self.hidden);
        }
        sizes.push(1);
        sizes
    }
}

/// Receptive-field radius in pixels of the architecture described by `spec`.
pub fn receptive_field(spec: &ModelSpec) -> Result<usize> {
    spec.validate()?;
    spec.rf_graph().radius()
}

/// Per-channel affine input standardization, `x' = (x - shift) * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub shift: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Normalizer {
            shift: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    /// Standardizes continuous channels to zero mean and unit variance over the
    /// cells where `mask` is set. One-hot channels are left as they are.
    pub fn fit(stack: &FeatureStack, mask: &[bool]) -> Self {
        let mut n = Normalizer::identity(stack.len());
        for (i, (name, ch)) in stack.names.iter().zip(&stack.channels).enumerate() {
            if is_categorical_channel(name) {
                continue;
            }
            let (mut count, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
            for ((&v, &ok), &m) in ch.values.iter().zip(&ch.valid).zip(mask) {
                if ok && m {
                    count += 1;
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            if count == 0 {
                continue;
            }
            let mean = sum / count as f64;
            let var = (sq / count as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            n.shift[i] = mean as f32;
            n.scale[i] = if std > 1e-6 { (1.0 / std) as f32 } else { 1.0 };
        }
        n
    }

    pub fn apply(&self, channel: usize, v: f32) -> f32 {
        (v - self.shift[channel]) * self.scale[channel]
    }
}

/// Index of each layer's weight tensor; the bias follows at `index + 1`.
#[derive(Debug, Clone)]
enum Layout {
    Naive,
    PerPixel(Vec<usize>),
    UNet {
        enc: Vec<[usize; 2]>,
        mid: [usize; 2],
        dec: Vec<usize>,
        head: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub names: Vec<String>,
    pub params: Vec<Tensor<f32>>,
    pub normalizer: Normalizer,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn layout(spec: &ModelSpec) -> Layout {
    match spec.kind {
        ModelKind::Naive => Layout::Naive,
        ModelKind::Llr | ModelKind::Nn | ModelKind::Lann => Layout::PerPixel(
            (0..spec.per_pixel_sizes().len() - 1)
                .map(|i| 2 * i)
                .collect(),
        ),
        ModelKind::Cnn | ModelKind::Lacnn => {
            let mut next = 0;
            let mut take = || {
                let i = next;
                next += 2;
                i
            };
            let enc = (0..spec.depth).map(|_| [take(), take()]).collect();
            let mid = [take(), take()];
            let dec = (0..spec.depth).map(|_| take()).collect();
            let head = take();
            Layout::UNet {
                enc,
                mid,
                dec,
                head,
            }
        }
    }
}

struct ParamBuilder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
}

impl ParamBuilder {
    /// Uniform weights in `±sqrt(gain / fan_in)`, zero bias.
    fn layer(&mut self, name: &str, cout: usize, cin: usize, k: usize, gain: f64, bias: f32) {
        let fan_in = (cin * k * k) as f64;
        let bound = (gain / fan_in).sqrt();
        let w = (0..cout * cin * k * k)
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        self.names.push(format!("{name}.weight"));
        self.params
            .push(Tensor::from_vec([cout, cin, k, k], w).expect("weight shape"));
        self.names.push(format!("{name}.bias"));
        self.params.push(Tensor::full([1, 1, 1, cout], bias));
    }
}

/// Gain for layers followed by relu.
const RELU_GAIN: f64 = 6.0;
/// Gain for the final layer feeding the sigmoid.
const HEAD_GAIN: f64 = 1.0;

/// Builds a model with seeded fan-in uniform initialization. The output bias
/// starts at `logit(naive_p)` so that initial predictions sit near the base rate.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut b = ParamBuilder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        names: Vec::new(),
        params: Vec::new(),
    };
    let head_bias = logit(spec.naive_p) as f32;
    match spec.kind {
        ModelKind::Naive => {}
        ModelKind::Llr | ModelKind::Nn | ModelKind::Lann => {
            let sizes = spec.per_pixel_sizes();
            let last = sizes.len() - 2;
            for (i, pair) in sizes.windows(2).enumerate() {
                if i == last {
                    b.layer("head", pair[1], pair[0], 1, HEAD_GAIN, head_bias);
                } else {
                    b.layer(&format!("fc{i}"), pair[1], pair[0], 1, RELU_GAIN, 0.0);
                }
            }
        }
        ModelKind::Cnn | ModelKind::Lacnn => {
            let w = &spec.widths;
            let mut cin = spec.in_channels;
            for s in 0..spec.depth {
                b.layer(&format!("enc{s}.conv1"), w[s], cin, 3, RELU_GAIN, 0.0);
                b.layer(&format!("enc{s}.conv2"), w[s], w[s], 3, RELU_GAIN, 0.0);
                cin = w[s];
            }
            let d = spec.depth;
            b.layer("mid.conv1", w[d], cin, 3, RELU_GAIN, 0.0);
            b.layer("mid.conv2", w[d], w[d], 3, RELU_GAIN, 0.0);
            // decoder layers are created in the order they run: deepest first
            let mut dec_names = Vec::new();
            for s in (0..d).rev() {
                dec_names.push((s, w[s + 1] + w[s], w[s]));
            }
            // layout expects dec[s] in ascending s
            dec_names.sort_by_key(|(s, _, _)| *s);
            for (s, cin, cout) in dec_names {
                b.layer(&format!("dec{s}.conv"), cout, cin, 3, RELU_GAIN, 0.0);
            }
            b.layer("head", 1, w[0], 1, HEAD_GAIN, head_bias);
        }
    }
    Ok(Model {
        spec: spec.clone(),
        names: b.names,
        params: b.params,
        normalizer: Normalizer::identity(spec.in_channels),
    })
}

/// Activations saved by a forward pass for the matching backward pass.
pub struct Trace {
    kind: ModelKind,
    input: Tensor<f32>,
    /// Output of each relu layer, in execution order.
    acts: Vec<Tensor<f32>>,
    /// Conv inputs that are not simply the previous activation.
    concat: Vec<Tensor<f32>>,
    pooled: Vec<Tensor<f32>>,
    argmax: Vec<Vec<usize>>,
    pub probs: Tensor<f32>,
}

impl Model {
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn wb(&self, i: usize) -> (&Tensor<f32>, &Tensor<f32>) {
        (&self.params[i], &self.params[i + 1])
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        if x.channels() != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "{} expects {} input channels, got {}",
                self.spec.kind,
                self.spec.in_channels,
                x.channels()
            )));
        }
        let m = self.spec.size_multiple();
        if x.height() % m != 0 || x.width() % m != 0 {
            return Err(Error::Shape(format!(
                "{} needs spatial dims divisible by {m}, got {}x{}",
                self.spec.kind,
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Probability map `(batch, 1, rows, cols)`.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.forward_train(x)?.probs)
    }

    /// Pre-sigmoid output map.
    fn logits_and_trace(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Trace)> {
        self.check_input(x)?;
        let mut t = Trace {
            kind: self.spec.kind,
            input: x.clone(),
            acts: Vec::new(),
            concat: Vec::new(),
            pooled: Vec::new(),
            argmax: Vec::new(),
            probs: Tensor::zeros([1, 1, 1, 1]),
        };
        let conv_relu = |input: &Tensor<f32>, i: usize| -> Result<Tensor<f32>> {
            let (w, b) = self.wb(i);
            let mut y = layers::conv2d(input, w, b)?;
            layers::relu_inplace(&mut y);
            Ok(y)
        };
        let logits = match layout(&self.spec) {
            Layout::Naive => {
                let [n, _, h, w] = x.shape();
                Tensor::full([n, 1, h, w], logit(self.spec.naive_p) as f32)
            }
            Layout::PerPixel(layers_idx) => {
                let (head, hidden) = layers_idx.split_last().expect("head layer");
                for &i in hidden {
                    let y = conv_relu(t.acts.last().unwrap_or(x), i)?;
                    t.acts.push(y);
                }
                let (w, b) = self.wb(*head);
                layers::conv2d(t.acts.last().unwrap_or(x), w, b)?
            }
            Layout::UNet {
                enc,
                mid,
                dec,
                head,
            } => {
                let mut h = x.clone();
                for pair in &enc {
                    let a = conv_relu(&h, pair[0])?;
                    let b = conv_relu(&a, pair[1])?;
                    let p = layers::maxpool2(&b);
                    t.acts.push(a);
                    t.acts.push(b);
                    t.argmax.push(p.argmax);
                    t.pooled.push(p.output.clone());
                    h = p.output;
                }
                let a = conv_relu(&h, mid[0])?;
                let b = conv_relu(&a, mid[1])?;
                t.acts.push(a);
                h = b.clone();
                t.acts.push(b);
                for s in (0..self.spec.depth).rev() {
                    let u = layers::upsample_bilinear2(&h);
                    let skip = &t.acts[2 * s + 1];
                    let c = layers::concat_channels(&u, skip)?;
                    let d = conv_relu(&c, dec[s])?;
                    t.concat.push(c);
                    h = d.clone();
                    t.acts.push(d);
                }
                let (w, b) = self.wb(head);
                layers::conv2d(&h, w, b)?
            }
        };
        Ok((logits, t))
    }

    pub fn forward_train(&self, x: &Tensor<f32>) -> Result<Trace> {
        let (logits, mut t) = self.logits_and_trace(x)?;
        t.probs = layers::pointwise(&logits, Pointwise::Sigmoid);
        Ok(t)
    }

    /// Parameter gradients (aligned with `params`) from the gradient with
    /// respect to the pre-sigmoid output.
    pub fn backward(&self, t: &Trace, grad_logits: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        if t.kind != self.spec.kind {
            return Err(Error::Shape("trace belongs to a different model".into()));
        }
        let mut grads: Vec<Tensor<f32>> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let put = |grads: &mut Vec<Tensor<f32>>,
                   i: usize,
                   g: layers::ConvGrads<f32>|
         -> Option<Tensor<f32>> {
            grads[i] = g.weights;
            grads[i + 1] = g.bias;
            g.input
        };
        match layout(&self.spec) {
            Layout::Naive => {}
            Layout::PerPixel(idx) => {
                let (head, hidden) = idx.split_last().expect("head layer");
                let head_in = t.acts.last().unwrap_or(&t.input);
                let g = layers::conv2d_backward(
                    head_in,
                    &self.params[*head],
                    grad_logits,
                    !hidden.is_empty(),
                )?;
                let mut gy = put(&mut grads, *head, g);
                for (j, &i) in hidden.iter().enumerate().rev() {
                    let out = &t.acts[j];
                    let g_pre = layers::pointwise_backward(
                        Pointwise::Relu,
                        out,
                        gy.as_ref().expect("hidden grad"),
                    );
                    let input = if j == 0 { &t.input } else { &t.acts[j - 1] };
                    let g = layers::conv2d_backward(input, &self.params[i], &g_pre, j > 0)?;
                    gy = put(&mut grads, i, g);
                }
            }
            Layout::UNet {
                enc,
                mid,
                dec,
                head,
            } => {
                let depth = self.spec.depth;
                let n_enc = 2 * depth;
                // acts: [enc a/b per stage..., mid a, mid b, dec (deepest first)...]
                let dec_act = |s: usize| &t.acts[n_enc + 2 + (depth - 1 - s)];
                let g = layers::conv2d_backward(dec_act(0), &self.params[head], grad_logits, true)?;
                let mut gh = put(&mut grads, head, g).expect("head input grad");
                let mut skip_grads: Vec<Option<Tensor<f32>>> = vec![None; depth];
                for s in 0..depth {
                    let g_pre = layers::pointwise_backward(Pointwise::Relu, dec_act(s), &gh);
                    let c = &t.concat[depth - 1 - s];
                    let g = layers::conv2d_backward(c, &self.params[dec[s]], &g_pre, true)?;
                    let gc = put(&mut grads, dec[s], g).expect("concat grad");
                    let up_ch = c.channels() - t.acts[2 * s + 1].channels();
                    let (gu, gskip) = layers::split_channels(&gc, up_ch);
                    skip_grads[s] = Some(gskip);
                    let below = if s + 1 < depth {
                        dec_act(s + 1)
                    } else {
                        &t.acts[n_enc + 1]
                    };
                    gh = layers::upsample_bilinear2_backward(below.shape(), &gu);
                }
                // bottleneck
                let (ma, mb) = (&t.acts[n_enc], &t.acts[n_enc + 1]);
                let g_pre = layers::pointwise_backward(Pointwise::Relu, mb, &gh);
                let g = layers::conv2d_backward(ma, &self.params[mid[1]], &g_pre, true)?;
                gh = put(&mut grads, mid[1], g).expect("mid grad");
                let g_pre = layers::pointwise_backward(Pointwise::Relu, ma, &gh);
                let g = layers::conv2d_backward(
                    &t.pooled[depth - 1],
                    &self.params[mid[0]],
                    &g_pre,
                    true,
                )?;
                gh = put(&mut grads, mid[0], g).expect("mid grad");
                for s in (0..depth).rev() {
                    let (a, b) = (&t.acts[2 * s], &t.acts[2 * s + 1]);
                    let mut gb = layers::maxpool2_backward(b.shape(), &t.argmax[s], &gh);
                    gb.add_assign(skip_grads[s].as_ref().expect("skip grad"));
                    let g_pre = layers::pointwise_backward(Pointwise::Relu, b, &gb);
                    let g = layers::conv2d_backward(a, &self.params[enc[s][1]], &g_pre, true)?;
                    let ga = put(&mut grads, enc[s][1], g).expect("enc grad");
                    let g_pre = layers::pointwise_backward(Pointwise::Relu, a, &ga);
                    let input = if s == 0 { &t.input } else { &t.pooled[s - 1] };
                    let g = layers::conv2d_backward(input, &self.params[enc[s][0]], &g_pre, s > 0)?;
                    if let Some(gi) = put(&mut grads, enc[s][0], g) {
                        gh = gi;
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Per-input-channel weights of a trained LLR (on standardized inputs).
    pub fn llr_channel_weights(&self) -> Result<Vec<f32>> {
        if self.spec.kind != ModelKind::Llr {
            return Err(Error::Config(format!(
                "{} is not a linear logistic model",
                self.spec.kind
            )));
        }
        Ok(self.params[0].data().to_vec())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: `model.toml` (spec, normalizer, optimizer scalars) + `params.lsnt`.

#[derive(Debug, Serialize, Deserialize)]
struct OptimManifest {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    spec: ModelSpec,
    normalizer: Normalizer,
    param_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimManifest>,
}

pub const MODEL_MANIFEST: &str = "model.toml";
pub const MODEL_PARAMS: &str = "params.lsnt";

pub fn save_checkpoint(dir: &Path, model: &Model, optim: Option<&OptimState>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        spec: model.spec.clone(),
        normalizer: model.normalizer.clone(),
        param_names: model.names.clone(),
        optimizer: optim.map(|o| OptimManifest {
            kind: o.kind,
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
        }),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let path = dir.join(MODEL_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let mut tensors: Vec<(String, Tensor<f32>)> = model
        .names
        .iter()
        .cloned()
        .zip(model.params.iter().cloned())
        .collect();
    if let Some(o) = optim {
        for (i, (m, v)) in o.m.iter().zip(&o.v).enumerate() {
            let shape = model.params[i].shape();
            tensors.push((
                format!("adam.m.{}", model.names[i]),
                Tensor::from_vec(shape, m.clone())?,
            ));
            tensors.push((
                format!("adam.v.{}", model.names[i]),
                Tensor::from_vec(shape, v.clone())?,
            ));
        }
    }
    write_tensors(&dir.join(MODEL_PARAMS), &tensors)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, Option<OptimState>)> {
    let path = dir.join(MODEL_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = build_model(&manifest.spec, 0)?;
    if manifest.param_names != model.names {
        return Err(Error::Checkpoint(
            "parameter names do not match the spec".into(),
        ));
    }
    let tensors = read_tensors(&dir.join(MODEL_PARAMS))?;
    let lookup = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
    };
    for (name, p) in model.names.iter().zip(model.params.iter_mut()) {
        let t = lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != p.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}",
                t.shape()
            )));
        }
        *p = t;
    }
    if manifest.normalizer.shift.len() != model.spec.in_channels {
        return Err(Error::Checkpoint(
            "normalizer width does not match in_channels".into(),
        ));
    }
    model.normalizer = manifest.normalizer;
    let optim = manifest.optimizer.map(|o| {
        let mut s = OptimState::new(o.kind, o.lr, o.weight_decay);
        s.beta1 = o.beta1;
        s.beta2 = o.beta2;
        s.eps = o.eps;
        s.step = o.step;
        let m: Option<Vec<Vec<f32>>> = model
            .names
            .iter()
            .map(|n| lookup(&format!("adam.m.{n}")).map(Tensor::into_vec))
            .collect();
        let v: Option<Vec<Vec<f32>>> = model
            .names
            .iter()
            .map(|n| lookup(&format!("adam.v.{n}")).map(Tensor::into_vec))
            .collect();
        if let (Some(m), Some(v)) = (m, v) {
            s.m = m;
            s.v = v;
        }
        s
    });
    Ok((model, optim))
}

pub fn save_spec(path: &Path, spec: &ModelSpec) -> Result<()> {
    let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(spec: &ModelSpec, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.in_channels * h * w;
        Tensor::from_vec(
            [1, spec.in_channels, h, w],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn small(kind: ModelKind, base: usize, aligned: usize) -> ModelSpec {
        let mut s = ModelSpec::for_stack(kind, base, aligned);
        s.widths = vec![3, 4, 5, 6];
        s.hidden = vec![5, 4];
        s
    }

    #[test]
    fn preset_channel_counts() {
        assert_eq!(ModelSpec::preset(ModelKind::Lacnn).in_channels, 160);
        assert_eq!(ModelSpec::preset(ModelKind::Lann).in_channels, 160);
        assert_eq!(ModelSpec::preset(ModelKind::Cnn).in_channels, 94);
        let llr = build_model(&ModelSpec::preset(ModelKind::Llr), 0).unwrap();
        assert_eq!(llr.num_parameters(), 95);
        assert_eq!(
            build_model(&ModelSpec::preset(ModelKind::Naive), 0)
                .unwrap()
                .num_parameters(),
            0
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = ModelSpec::preset(ModelKind::Cnn);
        s.widths.pop();
        assert!(build_model(&s, 0).is_err());
        let mut s = ModelSpec::preset(ModelKind::Lacnn);
        s.aligned_channels = 0;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::preset(ModelKind::Llr);
        s.aligned_channels = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let s = small(ModelKind::Cnn, 5, 0);
        assert_eq!(build_model(&s, 9).unwrap(), build_model(&s, 9).unwrap());
        assert_ne!(
            build_model(&s, 9).unwrap().params,
            build_model(&s, 10).unwrap().params
        );
    }

    #[test]
    fn naive_is_constant() {
        let m = build_model(&ModelSpec::preset(ModelKind::Naive), 0).unwrap();
        let x = Tensor::zeros([1, 94, 4, 4]);
        let p = m.forward(&x).unwrap();
        assert!(p.data().iter().all(|v| (*v - 0.013).abs() < 1e-7));
    }

    #[test]
    fn llr_matches_per_pixel_loop() {
        let s = small(ModelKind::Llr, 6, 0);
        let m = build_model(&s, 3).unwrap();
        let x = random_input(&s, 3, 4, 1);
        let p = m.forward(&x).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let mut z = m.params[1].data()[0] as f64;
                for k in 0..6 {
                    z += m.params[0].data()[k] as f64 * x.get(0, k, r, c) as f64;
                }
                let expected = 1.0 / (1.0 + (-z).exp());
                assert!((p.get(0, 0, r, c) as f64 - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn output_shape_and_range() {
        for kind in ModelKind::ALL {
            let s = small(kind, 4, 3);
            let m = build_model(&s, 1).unwrap();
            let x = random_input(&s, 16, 24, 2);
            let p = m.forward(&x).unwrap();
            assert_eq!(p.shape(), [1, 1, 16, 24]);
            assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
        let s = small(ModelKind::Cnn, 4, 0);
        let m = build_model(&s, 1).unwrap();
        assert!(m.forward(&random_input(&s, 12, 16, 0)).is_err());
        assert!(m.forward(&Tensor::zeros([1, 3, 16, 16])).is_err());
    }

    #[test]
    fn initial_outputs_are_not_degenerate() {
        for kind in ModelKind::ALL {
            for seed in 0..10 {
                let s = ModelSpec::for_stack(kind, 8, 6);
                let m = build_model(&s, seed).unwrap();
                let p = m.forward(&random_input(&s, 16, 16, 100 + seed)).unwrap();
                let (lo, hi) = p
                    .data()
                    .iter()
                    .fold((1f32, 0f32), |(l, h), v| (l.min(*v), h.max(*v)));
                assert!(
                    lo > 1e-4 && hi < 1.0 - 1e-4,
                    "{kind} seed {seed}: saturated [{lo}, {hi}]"
                );
                if kind != ModelKind::Naive {
                    assert!(hi - lo > 1e-5, "{kind} seed {seed}: constant map {lo}");
                }
            }
        }
    }

    /// Full-model gradient against finite differences of the f32 forward pass,
    /// probing a handful of parameters per tensor.
    fn model_grad_check(kind: ModelKind) {
        let s = small(kind, 3, 2);
        let mut m = build_model(&s, 4).unwrap();
        let x = random_input(&s, 8, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // zero biases put dead units exactly on the relu kink
        for (name, p) in m.names.iter().zip(m.params.iter_mut()) {
            if name.ends_with(".bias") {
                p.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.gen_range(-0.2..0.2));
            }
        }
        let labels: Vec<f32> = (0..64)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect();
        let mask = vec![true; 64];
        let loss = |m: &Model| -> f64 {
            let p = m.forward(&x).unwrap();
            crate::nn::layers::masked_bce_sum(&p, &labels, &mask)
                .unwrap()
                .0
        };
        let t = m.forward_train(&x).unwrap();
        let g = layers::masked_bce_grad_logits(&t.probs, &labels, &mask, 1.0).unwrap();
        let grads = m.backward(&t, &g).unwrap();
        for pi in 0..m.params.len() {
            for j in [0, m.params[pi].len() / 2, m.params[pi].len() - 1] {
                let orig = m.params[pi].data()[j];
                let analytic = grads[pi].data()[j] as f64;
                // relu and max-pool kinks can spoil a single step size, and f32
                // rounding limits how small it may get; one clean step suffices
                let mut numerics = Vec::new();
                let ok = [3e-3f32, 1e-3, 3e-4].iter().any(|&h| {
                    m.params[pi].data_mut()[j] = orig + h;
                    let lp = loss(&m);
                    m.params[pi].data_mut()[j] = orig - h;
                    let lm = loss(&m);
                    m.params[pi].data_mut()[j] = orig;
                    let numeric = (lp - lm) / (2.0 * h as f64);
                    numerics.push(numeric);
                    (numeric - analytic).abs() <= 0.02 * numeric.abs().max(analytic.abs()) + 2e-3
                });
                assert!(
                    ok,
                    "{kind} {} [{j}]: {analytic} vs {numerics:?}",
                    m.names[pi]
                );
            }
        }
    }

    #[test]
    fn per_pixel_gradients() {
        model_grad_check(ModelKind::Llr);
        model_grad_check(ModelKind::Lann);
    }

    #[test]
    fn unet_gradients() {
        model_grad_check(ModelKind::Cnn);
    }

    #[test]
    fn per_pixel_models_commute_with_pixel_permutation() {
        let s = small(ModelKind::Nn, 4, 0);
        let m = build_model(&s, 2).unwrap();
        let x = random_input(&s, 1, 10, 3);
        let perm = [3usize, 7, 0, 9, 1, 2, 8, 5, 6, 4];
        let mut xp = x.clone();
        for c in 0..4 {
            for (dst, &src) in perm.iter().enumerate() {
                let v = x.get(0, c, 0, src);
                let i = xp.index(0, c, 0, dst);
                xp.data_mut()[i] = v;
            }
        }
        let (y, yp) = (m.forward(&x).unwrap(), m.forward(&xp).unwrap());
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(yp.get(0, 0, 0, dst), y.get(0, 0, 0, src));
        }
    }

    #[test]
    fn lann_with_zeroed_alignment_reproduces_nn() {
        let nn_spec = small(ModelKind::Nn, 4, 0);
        let lann_spec = small(ModelKind::Lann, 4, 3);
        let nn = build_model(&nn_spec, 7).unwrap();
        let mut lann = build_model(&lann_spec, 8).unwrap();
        // copy nn weights into the base-channel columns of the first layer
        let (hid, cin_nn, cin_lann) = (5, 4, 7);
        for o in 0..hid {
            for i in 0..cin_lann {
                let v = if i < cin_nn {
                    nn.params[0].data()[o * cin_nn + i]
                } else {
                    0.25
                };
                lann.params[0].data_mut()[o * cin_lann + i] = v;
            }
        }
        for i in 1..nn.params.len() {
            lann.params[i] = nn.params[i].clone();
        }
        let x = random_input(&nn_spec, 4, 4, 9);
        let mut xl = Tensor::zeros([1, 7, 4, 4]);
        xl.data_mut()[..x.len()].copy_from_slice(x.data());
        assert_eq!(nn.forward(&x).unwrap(), lann.forward(&xl).unwrap());
    }

    #[test]
    fn receptive_field_values() {
        assert_eq!(
            receptive_field(&ModelSpec::preset(ModelKind::Llr)).unwrap(),
            0
        );
        let r3 = receptive_field(&ModelSpec::preset(ModelKind::Lacnn)).unwrap();
        assert!(r3 <= 64, "depth-3 radius {r3}");
        let mut d4 = ModelSpec::preset(ModelKind::Cnn);
        d4.depth = 4;
        d4.widths = vec![8, 8, 8, 8, 8];
        assert!(receptive_field(&d4).unwrap() > 64);
    }

    #[test]
    fn perturbation_respects_receptive_field() {
        let s = small(ModelKind::Cnn, 2, 0);
        let r = receptive_field(&s).unwrap();
        let m = build_model(&s, 11).unwrap();
        let size = 2 * r + 24;
        let size = size.div_ceil(8) * 8;
        let x = random_input(&s, size, size, 1);
        let base = m.forward(&x).unwrap();
        let (or, oc) = (size / 2, size / 2);
        let moved = |dr: isize, dc: isize| -> bool {
            let mut xp = x.clone();
            let (rr, cc) = ((or as isize + dr) as usize, (oc as isize + dc) as usize);
            let i = xp.index(0, 0, rr, cc);
            xp.data_mut()[i] += 5.0;
            m.forward(&xp).unwrap().get(0, 0, or, oc) != base.get(0, 0, or, oc)
        };
        let r = r as isize;
        for (dr, dc) in [(r + 1, 0), (0, -(r + 1)), (r + 1, r + 1), (-(r + 1), 3)] {
            assert!(
                !moved(dr, dc),
                "outside offset ({dr},{dc}) changed the output"
            );
        }
        assert!(moved(0, 0));
        assert!(moved(1, -1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = small(ModelKind::Lacnn, 3, 2);
        let mut m = build_model(&s, 1).unwrap();
        m.normalizer.shift[0] = 1.5;
        let mut o = OptimState::new(OptimizerKind::Adam, 0.001, 0.001);
        let zeros: Vec<Tensor<f32>> = m
            .params
            .iter()
            .map(|p| Tensor::full(p.shape(), 0.01))
            .collect();
        let mut params = m.params.clone();
        crate::nn::optimizer_step(&mut params, &zeros, &mut o).unwrap();
        m.params = params;
        save_checkpoint(dir.path(), &m, Some(&o)).unwrap();
        let (back, ob) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(ob.unwrap(), o);
    }
}
