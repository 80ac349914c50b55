//! Building-block layers. Every layer owns its parameter tensors (created
//! with gradient tracking) and can enumerate them under a name prefix for
//! the optimizer and the checkpoint writer.

use rand::Rng;

use crate::tensor::{Elem, Tensor};
use crate::Result;

pub type NamedParams<T> = Vec<(String, Tensor<T>)>;

fn param<T: Elem>(t: Tensor<T>) -> Tensor<T> {
    t.set_requires_grad(true);
    t
}

fn trunc_normal<T: Elem>(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<T> {
    param(Tensor::trunc_normal(shape, 0.02, rng))
}

/// He-uniform fan-in: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
fn he_uniform<T: Elem>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    param(Tensor::rand_uniform(shape, -limit, limit, rng))
}

fn zeros_param<T: Elem>(shape: Vec<usize>) -> Tensor<T> {
    param(Tensor::zeros(shape))
}

pub struct Linear<T: Elem> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Elem> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: trunc_normal(vec![d_in, d_out], rng),
            b: zeros_param(vec![d_out]),
        }
    }

    /// Applies to `[n, d_in]` or `[b, t, d_in]` inputs.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        let d_out = self.w.shape()[1];
        match shape.len() {
            2 => x.matmul(&self.w)?.add(&self.b),
            3 => {
                let (b, t, d) = (shape[0], shape[1], shape[2]);
                x.reshape(vec![b * t, d])?
                    .matmul(&self.w)?
                    .add(&self.b)?
                    .reshape(vec![b, t, d_out])
            }
            _ => x.matmul(&self.w), // let matmul report the shape error
        }
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

pub struct LayerNorm<T: Elem> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Elem> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: param(Tensor::ones(vec![dim])),
            bias: zeros_param(vec![dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layernorm(&self.gain, &self.bias, T::of_f64(1e-5))
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub struct Conv<T: Elem> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Elem> Conv<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv {
            w: he_uniform(vec![c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng),
            b: zeros_param(vec![c_out]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.w, Some(&self.b), self.stride, self.padding)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Per-pixel normalization over the channel axis of a `[b, c, h, w]` map
/// (layer normalization applied channelwise), used in place of batch
/// statistics to keep every forward pass batch-independent.
pub struct ChannelNorm<T: Elem> {
    ln: LayerNorm<T>,
}

impl<T: Elem> ChannelNorm<T> {
    pub fn new(channels: usize) -> Self {
        ChannelNorm {
            ln: LayerNorm::new(channels),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let flat = x.reshape(vec![b, c, h * w])?.swap_axes(1, 2)?;
        self.ln
            .forward(&flat)?
            .swap_axes(1, 2)?
            .reshape(vec![b, c, h, w])
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.ln.params(prefix, out);
    }
}

/// Conv / channel-norm / relu unit; one per CNN stage block.
pub struct ConvBlock<T: Elem> {
    pub conv: Conv<T>,
    pub norm: ChannelNorm<T>,
}

impl<T: Elem> ConvBlock<T> {
    pub fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv: Conv::new(c_in, c_out, 3, stride, 1, rng),
            norm: ChannelNorm::new(c_out),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.norm.forward(&self.conv.forward(x)?)?.relu()
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.conv.params(&format!("{prefix}.conv"), out);
        self.norm.params(&format!("{prefix}.norm"), out);
    }
}

/// Two-layer GELU MLP over the last axis.
pub struct Mlp<T: Elem> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Elem> Mlp<T> {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.fc1.params(&format!("{prefix}.fc1"), out);
        self.fc2.params(&format!("{prefix}.fc2"), out);
    }
}

/// Multi-head scaled-dot-product self-attention on `[b, t, d]` tokens.
pub struct Attention<T: Elem> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Elem> Attention<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Attention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            heads,
        }
    }

    // [b, t, d] -> [b*h, t, d/h]
    fn split_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        x.reshape(vec![b, t, self.heads, dh])?
            .swap_axes(1, 2)?
            .reshape(vec![b * self.heads, t, dh])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.split_heads(&self.wq.forward(x)?)?;
        let k = self.split_heads(&self.wk.forward(x)?)?;
        let v = self.split_heads(&self.wv.forward(x)?)?;
        let scores = q
            .matmul(&k.swap_axes(1, 2)?)?
            .scale(T::of_f64(1.0 / (dh as f64).sqrt()))?;
        let attn = scores.softmax(T::one())?;
        let ctx = attn
            .matmul(&v)?
            .reshape(vec![b, self.heads, t, dh])?
            .swap_axes(1, 2)?
            .reshape(vec![b, t, d])?;
        self.wo.forward(&ctx)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

/// Pre-norm transformer block: attention and MLP residual sublayers.
pub struct TransformerBlock<T: Elem> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Elem> TransformerBlock<T> {
    pub fn new(dim: usize, heads: usize, mlp_hidden: usize, rng: &mut impl Rng) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, mlp_hidden, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = x.add(&self.attn.forward(&self.ln1.forward(x)?)?)?;
        x.add(&self.mlp.forward(&self.ln2.forward(&x)?)?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.attn.params(&format!("{prefix}.attn"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.mlp.params(&format!("{prefix}.mlp"), out);
    }
}

/// Pre-norm mixer block: token-mixing MLP (across the token axis) then
/// channel-mixing MLP, each with a residual connection.
pub struct MixerBlock<T: Elem> {
    pub ln1: LayerNorm<T>,
    pub token_mlp: Mlp<T>,
    pub ln2: LayerNorm<T>,
    pub channel_mlp: Mlp<T>,
}

impl<T: Elem> MixerBlock<T> {
    pub fn new(dim: usize, tokens: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        MixerBlock {
            ln1: LayerNorm::new(dim),
            token_mlp: Mlp::new(tokens, hidden, rng),
            ln2: LayerNorm::new(dim),
            channel_mlp: Mlp::new(dim, hidden, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mixed = self
            .token_mlp
            .forward(&self.ln1.forward(x)?.swap_axes(1, 2)?)?
            .swap_axes(1, 2)?;
        let x = x.add(&mixed)?;
        x.add(&self.channel_mlp.forward(&self.ln2.forward(&x)?)?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.token_mlp.params(&format!("{prefix}.token_mlp"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.channel_mlp.params(&format!("{prefix}.channel_mlp"), out);
    }
}

/// Non-overlapping patch embedding: strided convolution, then flatten to
/// `[b, tokens, dim]`.
pub struct PatchEmbed<T: Elem> {
    pub proj: Conv<T>,
}

impl<T: Elem> PatchEmbed<T> {
    pub fn new(c_in: usize, dim: usize, patch: usize, rng: &mut impl Rng) -> Self {
        PatchEmbed {
            proj: Conv::new(c_in, dim, patch, patch, 0, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.proj.forward(x)?;
        let s = y.shape();
        let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
        y.reshape(vec![b, d, h * w])?.swap_axes(1, 2)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.proj.params(&format!("{prefix}.proj"), out);
    }
}

/// Depthwise 3x3 + pointwise 1x1 convolution pair (the CNN exit-branch
/// feature transform).
pub struct DepthwiseSeparable<T: Elem> {
    pub dw: Tensor<T>,
    pub dw_bias: Tensor<T>,
    pub pw: Conv<T>,
}

impl<T: Elem> DepthwiseSeparable<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        DepthwiseSeparable {
            dw: he_uniform(vec![channels, 1, 3, 3], 9, rng),
            dw_bias: zeros_param(vec![channels]),
            pw: Conv::new(channels, channels, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.conv2d_depthwise(&self.dw, Some(&self.dw_bias), 1, 1)?.relu()?;
        self.pw.forward(&y)?.relu()
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.dw"), self.dw.clone()));
        out.push((format!("{prefix}.dw_bias"), self.dw_bias.clone()));
        self.pw.params(&format!("{prefix}.pw"), out);
    }
}

/// Global average pool: `[b, c, h, w]` -> `[b, c]` or `[b, t, d]` -> `[b, d]`.
pub fn global_avg_pool<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    match s.len() {
        4 => x
            .reshape(vec![s[0], s[1], s[2] * s[3]])?
            .mean_axis(2),
        3 => x.mean_axis(1),
        _ => Err(crate::Error::Shape {
            op: "global_avg_pool",
            details: format!("expected rank 3 or 4, got {:?}", s),
        }),
    }
}
