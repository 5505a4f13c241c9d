//! Layers, initialization and the optimizer. Layers are plain structs over
//! `Tensor` parameters; a model collects its parameters as dot-separated
//! (name, tensor) pairs for checkpointing and per-group learning rates.

use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Params<T> = Vec<(String, Tensor<T>)>;

pub fn push_param<T: Scalar>(out: &mut Params<T>, prefix: &str, name: &str, t: &Tensor<T>) {
    out.push((format!("{prefix}.{name}"), t.clone()));
}

// ── Initialization ──────────────────────────────────────────────────────

fn uniform_init<T: Scalar>(n: usize, bound: f64, rng: &mut RngStream) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64(rng.uniform_in(-bound, bound)))
        .collect()
}

/// Kaiming-uniform (ReLU gain), for convolutions.
pub fn kaiming_uniform<T: Scalar>(n: usize, fan_in: usize, rng: &mut RngStream) -> Vec<T> {
    uniform_init(n, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Xavier-uniform, for attention and MLP projections.
pub fn xavier_uniform<T: Scalar>(
    n: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut RngStream,
) -> Vec<T> {
    uniform_init(n, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

// ── Linear ──────────────────────────────────────────────────────────────

pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>, // (out, in)
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut RngStream) -> Self {
        let weight = Tensor::leaf(
            &[out_dim, in_dim],
            xavier_uniform(out_dim * in_dim, in_dim, out_dim, rng),
            true,
        );
        let bias = bias.then(|| Tensor::leaf(&[out_dim], vec![T::ZERO; out_dim], true));
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// x: (in, N) -> (out, N); channel-first layout.
    pub fn forward_cols(&self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.weight.matmul(x);
        match &self.bias {
            Some(b) => y.add(&b.reshape(&[self.out_dim(), 1])),
            None => y,
        }
    }

    /// x: (N, in) -> (N, out); token-major layout.
    pub fn forward_rows(&self, x: &Tensor<T>) -> Tensor<T> {
        let wt = self.weight.permute(&[1, 0]);
        let y = x.matmul(&wt);
        match &self.bias {
            Some(b) => y.add(&b.reshape(&[1, self.out_dim()])),
            None => y,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Params<T>) {
        push_param(out, prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            push_param(out, prefix, "bias", b);
        }
    }
}

// ── Convolutions ────────────────────────────────────────────────────────

pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>, // (co, ci, kh, kw)
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut RngStream,
    ) -> Self {
        let fan_in = ci * k * k;
        let weight = Tensor::leaf(
            &[co, ci, k, k],
            kaiming_uniform(co * ci * k * k, fan_in, rng),
            true,
        );
        let bias = bias.then(|| Tensor::leaf(&[co], vec![T::ZERO; co], true));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.conv2d(&self.weight, self.stride, self.pad);
        match &self.bias {
            Some(b) => {
                let co = self.weight.shape()[0];
                y.add(&b.reshape(&[co, 1, 1]))
            }
            None => y,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Params<T>) {
        push_param(out, prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            push_param(out, prefix, "bias", b);
        }
    }
}

pub struct Conv3d<T: Scalar> {
    pub weight: Tensor<T>, // (co, ci, k1, k2, k3)
    pub bias: Option<Tensor<T>>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(
        ci: usize,
        co: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        bias: bool,
        rng: &mut RngStream,
    ) -> Self {
        let fan_in = ci * k[0] * k[1] * k[2];
        let n = co * fan_in;
        let weight = Tensor::leaf(&[co, ci, k[0], k[1], k[2]], kaiming_uniform(n, fan_in, rng), true);
        let bias = bias.then(|| Tensor::leaf(&[co], vec![T::ZERO; co], true));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.conv3d(&self.weight, self.stride, self.pad);
        match &self.bias {
            Some(b) => {
                let co = self.weight.shape()[0];
                y.add(&b.reshape(&[co, 1, 1, 1]))
            }
            None => y,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Params<T>) {
        push_param(out, prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            push_param(out, prefix, "bias", b);
        }
    }
}

// ── Normalization ───────────────────────────────────────────────────────

/// Normalizes across one axis (the channel axis) per position, with a
/// learned per-channel gain and bias. Instance-style: no batch statistics.
pub struct Norm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> Norm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gain: Tensor::leaf(&[channels], vec![T::ONE; channels], true),
            bias: Tensor::leaf(&[channels], vec![T::ZERO; channels], true),
            eps: 1e-5,
        }
    }

    /// Normalize over `axis` of x; `gain.len()` must equal that extent.
    pub fn forward(&self, x: &Tensor<T>, axis: usize) -> Tensor<T> {
        let c = self.gain.numel();
        assert_eq!(
            x.shape()[axis],
            c,
            "norm: axis {axis} of {:?} vs {c} channels",
            x.shape()
        );
        let mean = x.mean_axis(axis, true);
        let centered = x.sub(&mean);
        let var = centered.mul(&centered).mean_axis(axis, true);
        let denom = var.add_scalar(self.eps).sqrt();
        let normed = centered.div(&denom);
        let mut bshape = vec![1usize; x.shape().len()];
        bshape[axis] = c;
        normed
            .mul(&self.gain.reshape(&bshape))
            .add(&self.bias.reshape(&bshape))
    }

    pub fn params(&self, prefix: &str, out: &mut Params<T>) {
        push_param(out, prefix, "gain", &self.gain);
        push_param(out, prefix, "bias", &self.bias);
    }
}

// ── Activation config ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }
}

// ── Attention ───────────────────────────────────────────────────────────

/// Multi-head scaled dot-product attention over batched token sets.
/// With `sorted` the softmax normalizer and the value contraction use
/// order-invariant accumulation, so attending over a concatenation of other
/// views' tokens commutes bit-exactly with view permutation.
pub struct MultiHeadAttention<T: Scalar> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(channels: usize, heads: usize, rng: &mut RngStream) -> Self {
        assert!(channels % heads == 0, "channels {channels} vs heads {heads}");
        Self {
            wq: Linear::new(channels, channels, true, rng),
            wk: Linear::new(channels, channels, true, rng),
            wv: Linear::new(channels, channels, true, rng),
            wo: Linear::new(channels, channels, true, rng),
            heads,
        }
    }

    fn project(&self, lin: &Linear<T>, x: &Tensor<T>) -> Tensor<T> {
        // (B, N, C) -> (B*h, N, dh)
        let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dh = c / self.heads;
        lin.forward_rows(&x.reshape(&[b * n, c]))
            .reshape(&[b, n, self.heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * self.heads, n, dh])
    }

    /// q: (B, Nq, C), kv: (B, Nk, C) -> (B, Nq, C)
    pub fn forward(&self, q: &Tensor<T>, kv: &Tensor<T>, sorted: bool) -> Tensor<T> {
        let (b, nq, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let dh = c / self.heads;
        let qh = self.project(&self.wq, q);
        let kh = self.project(&self.wk, kv);
        let vh = self.project(&self.wv, kv);
        let scores = qh
            .bmm(&kh.permute(&[0, 2, 1]))
            .scale(1.0 / (dh as f64).sqrt());
        let attn = if sorted {
            scores.softmax_sorted(2)
        } else {
            scores.softmax(2)
        };
        let ctx = if sorted {
            attn.bmm_sorted(&vh)
        } else {
            attn.bmm(&vh)
        };
        let merged = ctx
            .reshape(&[b, self.heads, nq, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * nq, c]);
        self.wo.forward_rows(&merged).reshape(&[b, nq, c])
    }

    pub fn params(&self, prefix: &str, out: &mut Params<T>) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

/// Token-wise two-layer feed-forward sublayer.
pub struct FeedForward<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub act: Activation,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(channels: usize, mult: usize, act: Activation, rng: &mut RngStream) -> Self {
        Self {
            fc1: Linear::new(channels, channels * mult, true, rng),
            fc2: Linear::new(channels * mult, channels, true, rng),
            act,
        }
    }

    /// x: (B, N, C) -> (B, N, C)
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let flat = x.reshape(&[b * n, c]);
        let y = self.fc2.forward_rows(&self.act.apply(&self.fc1.forward_rows(&flat)));
        y.reshape(&[b, n, c])
    }

    pub fn params(&self, prefix: &str, out: &mut Params<T>) {
        self.fc1.params(&format!("{prefix}.fc1"), out);
        self.fc2.params(&format!("{prefix}.fc2"), out);
    }
}

// ── Optimizer ───────────────────────────────────────────────────────────

pub struct ParamGroup<T: Scalar> {
    pub lr: f64,
    pub params: Params<T>,
}

/// Adam with per-group learning rates; beta = (0.9, 0.999), eps = 1e-8.
pub struct Adam<T: Scalar> {
    groups: Vec<ParamGroup<T>>,
    m: Vec<Vec<Vec<T>>>,
    v: Vec<Vec<Vec<T>>>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(groups: Vec<ParamGroup<T>>) -> Self {
        let m = groups
            .iter()
            .map(|g| g.params.iter().map(|(_, p)| vec![T::ZERO; p.numel()]).collect())
            .collect();
        let v = groups
            .iter()
            .map(|g| g.params.iter().map(|(_, p)| vec![T::ZERO; p.numel()]).collect())
            .collect();
        Self {
            groups,
            m,
            v,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn zero_grad(&self) {
        for g in &self.groups {
            for (_, p) in &g.params {
                p.zero_grad();
            }
        }
    }

    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let eps = T::from_f64(self.eps);
        for (gi, group) in self.groups.iter().enumerate() {
            if group.lr == 0.0 {
                continue;
            }
            let step_size = T::from_f64(group.lr / bc1);
            let inv_bc2 = T::from_f64(1.0 / bc2);
            for (pi, (name, p)) in group.params.iter().enumerate() {
                let grad = p
                    .grad()
                    .unwrap_or_else(|| panic!("adam: missing grad for {name} (call zero_grad)"));
                let m = &mut self.m[gi][pi];
                let v = &mut self.v[gi][pi];
                let mut data = p.data_mut();
                for i in 0..grad.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + ob1 * g;
                    v[i] = b2 * v[i] + ob2 * g * g;
                    let vhat = v[i] * inv_bc2;
                    data[i] -= step_size * m[i] / (vhat.sqrt() + eps);
                }
            }
        }
    }
}


/// Total element count across a parameter list.
pub fn param_count<T: Scalar>(params: &Params<T>) -> usize {
    params.iter().map(|(_, p)| p.numel()).sum()
}
