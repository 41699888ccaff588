//! Central finite-difference verification of analytic backward passes, in f64.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::layers::{self, Pointwise};
use crate::nn::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Elements per input probed by finite differences; larger inputs are subsampled.
const MAX_PROBES: usize = 1500;

/// A differentiable operation in double precision.
pub trait CheckedOp {
    fn name(&self) -> String;
    /// Random inputs of the operation's configured shapes.
    fn sample_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>>;
    fn forward(&self, inputs: &[Tensor<f64>]) -> Tensor<f64>;
    /// Gradients with respect to every input, given the output gradient.
    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Vec<Tensor<f64>>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub probes: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares `backward` with central differences of `<r, forward(x)>` for a random `r`.
pub fn grad_check(op: &dyn CheckedOp, tolerance: f64, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = op.sample_inputs(&mut rng);
    let out = op.forward(&inputs);
    let proj = Tensor::from_vec(
        out.shape(),
        (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("projection shape");
    let analytic = op.backward(&inputs, &proj);
    let objective = |xs: &[Tensor<f64>]| op.forward(xs).dot(&proj);

    let mut max_rel = 0.0f64;
    let mut probes = 0;
    for (i, input) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..input.len()).collect();
        if idx.len() > MAX_PROBES {
            idx.shuffle(&mut rng);
            idx.truncate(MAX_PROBES);
        }
        let mut xs = inputs.clone();
        for j in idx {
            let orig = input.data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let plus = objective(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let minus = objective(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_error(analytic[i].data()[j], numeric));
            probes += 1;
        }
    }
    GradCheckReport {
        op: op.name(),
        max_rel_error: max_rel,
        probes,
        tolerance,
        passed: max_rel < tolerance,
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values at least 0.01 apart in random order, so that finite differences never
/// cross a max-pool tie.
fn separated(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).expect("shape")
}

/// Values bounded away from zero, so relu's kink is never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, v).expect("shape")
}

pub struct Conv2dOp {
    pub input: [usize; 4],
    pub out_channels: usize,
    pub kernel: usize,
}

impl CheckedOp for Conv2dOp {
    fn name(&self) -> String {
        format!(
            "conv2d k{} {:?}->{}",
            self.kernel, self.input, self.out_channels
        )
    }
    fn sample_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let cin = self.input[1];
        vec![
            uniform(rng, self.input, -1.0, 1.0),
            uniform(
                rng,
                [self.out_channels, cin, self.kernel, self.kernel],
                -0.5,
                0.5,
            ),
            uniform(rng, [1, 1, 1, self.out_channels], -0.5, 0.5),
        ]
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Tensor<f64> {
        layers::conv2d(&x[0], &x[1], &x[2]).expect("conv forward")
    }
    fn backward(&self, x: &[Tensor<f64>], g: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let gr = layers::conv2d_backward(&x[0], &x[1], g, true).expect("conv backward");
        vec![gr.input.expect("input grad"), gr.weights, gr.bias]
    }
}

pub struct MaxPoolOp {
    pub input: [usize; 4],
}

impl CheckedOp for MaxPoolOp {
    fn name(&self) -> String {
        format!("maxpool2 {:?}", self.input)
    }
    fn sample_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![separated(rng, self.input)]
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Tensor<f64> {
        layers::maxpool2(&x[0]).output
    }
    fn backward(&self, x: &[Tensor<f64>], g: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let p = layers::maxpool2(&x[0]);
        vec![layers::maxpool2_backward(x[0].shape(), &p.argmax, g)]
    }
}

pub struct UpsampleOp {
    pub input: [usize; 4],
}

impl CheckedOp for UpsampleOp {
    fn name(&self) -> String {
        format!("upsample_bilinear2 {:?}", self.input)
    }
    fn sample_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![uniform(rng, self.input, -1.0, 1.0)]
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Tensor<f64> {
        layers::upsample_bilinear2(&x[0])
    }
    fn backward(&self, x: &[Tensor<f64>], g: &Tensor<f64>) -> Vec<Tensor<f64>> {
        vec![layers::upsample_bilinear2_backward(x[0].shape(), g)]
    }
}

pub struct PointwiseOp {
    pub input: [usize; 4],
    pub kind: Pointwise,
}

impl CheckedOp for PointwiseOp {
    fn name(&self) -> String {
        format!("{:?} {:?}", self.kind, self.input).to_lowercase()
    }
    fn sample_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        match self.kind {
            Pointwise::Relu => vec![off_zero(rng, self.input)],
            Pointwise::Sigmoid => vec![uniform(rng, self.input, -4.0, 4.0)],
        }
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Tensor<f64> {
        layers::pointwise(&x[0], self.kind)
    }
    fn backward(&self, x: &[Tensor<f64>], g: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let saved = match self.kind {
            Pointwise::Relu => x[0].clone(),
            Pointwise::Sigmoid => layers::pointwise(&x[0], Pointwise::Sigmoid),
        };
        vec![layers::pointwise_backward(self.kind, &saved, g)]
    }
}

pub struct ConcatOp {
    pub a: [usize; 4],
    pub b_channels: usize,
}

impl CheckedOp for ConcatOp {
    fn name(&self) -> String {
        format!("concat {:?}+{}", self.a, self.b_channels)
    }
    fn sample_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let [n, _, h, w] = self.a;
        vec![
            uniform(rng, self.a, -1.0, 1.0),
            uniform(rng, [n, self.b_channels, h, w], -1.0, 1.0),
        ]
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Tensor<f64> {
        layers::concat_channels(&x[0], &x[1]).expect("concat")
    }
    fn backward(&self, x: &[Tensor<f64>], g: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let (a, b) = layers::split_channels(g, x[0].channels());
        vec![a, b]
    }
}

/// Mean masked BCE of `sigmoid(logits)` against fixed labels and mask.
pub struct BceOp {
    pub labels: Vec<f32>,
    pub mask: Vec<bool>,
}

impl BceOp {
    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb5e);
        let labels = (0..n)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        BceOp { labels, mask }
    }
}

impl CheckedOp for BceOp {
    fn name(&self) -> String {
        format!("masked_bce n={}", self.labels.len())
    }
    fn sample_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![uniform(rng, [1, 1, 1, self.labels.len()], -3.0, 3.0)]
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Tensor<f64> {
        let p = layers::pointwise(&x[0], Pointwise::Sigmoid);
        Tensor::scalar(layers::masked_bce_loss(&p, &self.labels, &self.mask).expect("loss"))
    }
    fn backward(&self, x: &[Tensor<f64>], g: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let p = layers::pointwise(&x[0], Pointwise::Sigmoid);
        let count = self.mask.iter().filter(|m| **m).count() as f64;
        let scale = g.data()[0] / count;
        vec![
            layers::masked_bce_grad_logits(&p, &self.labels, &self.mask, scale).expect("loss grad"),
        ]
    }
}

/// Wraps an op and scales its analytic gradient; a negative control for the checker.
pub struct CorruptedBackward<O> {
    pub inner: O,
    pub factor: f64,
}

impl<O: CheckedOp> CheckedOp for CorruptedBackward<O> {
    fn name(&self) -> String {
        format!("corrupted({})", self.inner.name())
    }
    fn sample_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        self.inner.sample_inputs(rng)
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Tensor<f64> {
        self.inner.forward(x)
    }
    fn backward(&self, x: &[Tensor<f64>], g: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut grads = self.inner.backward(x, g);
        for t in &mut grads {
            t.scale(self.factor);
        }
        grads
    }
}

/// The standard battery: every layer on a seed-dependent random shape.
pub fn standard_suite(seed: u64) -> Vec<Box<dyn CheckedOp>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(3..=8);
    let w = rng.gen_range(3..=8);
    let even = [n, c, 2 * rng.gen_range(2..=4), 2 * rng.gen_range(2..=4)];
    vec![
        Box::new(Conv2dOp {
            input: [n, c, h, w],
            out_channels: rng.gen_range(1..=3),
            kernel: 3,
        }),
        Box::new(Conv2dOp {
            input: [n, c, h, w],
            out_channels: rng.gen_range(1..=3),
            kernel: 1,
        }),
        Box::new(MaxPoolOp { input: even }),
        Box::new(UpsampleOp {
            input: [n, c, h, w],
        }),
        Box::new(PointwiseOp {
            input: [n, c, h, w],
            kind: Pointwise::Relu,
        }),
        Box::new(PointwiseOp {
            input: [n, c, h, w],
            kind: Pointwise::Sigmoid,
        }),
        Box::new(ConcatOp {
            a: [n, c, h, w],
            b_channels: rng.gen_range(1..=3),
        }),
        Box::new(BceOp::random(h * w, seed)),
    ]
}
