//! Building blocks of the vector-field network. Every function records onto
//! the binder's graph; sequences are `[len, channels]`.

use rand::{Rng, RngCore};

use super::params::{Binder, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Result, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;
pub const GRN_EPS: f64 = 1e-6;

pub(crate) fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// `weight[in, out]`, `bias[out]`, both uniform in `±1/sqrt(in)`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound)),
            bias: store.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound)),
        }
    }

    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::zeros([fan_in, fan_out])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([fan_out])),
        }
    }

    pub fn forward<T: Real>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.graph();
        let y = g.matmul(x, b.get(self.weight))?;
        let rows = g.shape(y)[0];
        let bias = row_vector(g, b.get(self.bias))?;
        let bias = g.expand(bias, 0, rows)?;
        g.add(y, bias)
    }
}

/// Reborrows an optional dropout rng for one call.
pub fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// `[d] -> [1, d]`
pub fn row_vector<T: Real>(g: &Graph<T>, v: Var) -> Result<Var> {
    let d = g.shape(v)[0];
    g.reshape(v, &[1, d])
}

/// Broadcasts a `[d]` or `[1, d]` vector over `rows`.
pub fn broadcast_rows<T: Real>(g: &Graph<T>, v: Var, rows: usize) -> Result<Var> {
    let v = if g.shape(v).len() == 1 { row_vector(g, v)? } else { v };
    g.expand(v, 0, rows)
}

/// Inverted dropout with a constant keep-mask; identity without an rng or at p = 0.
pub fn dropout<T: Real>(g: &Graph<T>, x: Var, p: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x);
    let mask = Tensor::from_fn(shape, |_| {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            T::of(keep)
        }
    });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Fixed sinusoidal table `[len, dim]`: sines in the first half of the
/// channels, cosines in the second.
pub fn sinusoidal_positions<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn([len, dim], |i| {
        let (p, c) = (i / dim, i % dim);
        if c >= 2 * half {
            return T::zero();
        }
        let j = c % half;
        let angle = p as f64 * 10000f64.powf(-(2.0 * j as f64) / dim as f64);
        T::of(if c < half { angle.sin() } else { angle.cos() })
    })
}

/// Sinusoidal flow-step features `[1, dim]`: `sin(1000 t w_j)` then
/// `cos(1000 t w_j)` with log-spaced `w_j` from 1 down to 1e-4.
pub fn step_features<T: Real>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    Tensor::from_fn([1, dim], |c| {
        if c >= 2 * half {
            return T::zero();
        }
        let j = c % half;
        let freq = (-(10000f64.ln()) * j as f64 / denom).exp();
        let arg = 1000.0 * t * freq;
        T::of(if c < half { arg.sin() } else { arg.cos() })
    })
}

#[derive(Clone, Debug)]
pub struct ConvNeXtBlock {
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub expand: Linear,
    pub grn_gamma: ParamId,
    pub grn_beta: ParamId,
    pub contract: Linear,
}

impl ConvNeXtBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        ConvNeXtBlock {
            dw_weight: store.add(format!("{name}.dwconv.weight"), uniform(rng, &[dim, kernel], bound)),
            dw_bias: store.add(format!("{name}.dwconv.bias"), uniform(rng, &[dim], bound)),
            norm_gamma: store.add(format!("{name}.norm.weight"), Tensor::ones([dim])),
            norm_beta: store.add(format!("{name}.norm.bias"), Tensor::zeros([dim])),
            expand: Linear::new(store, &format!("{name}.pwconv1"), dim, hidden, rng),
            grn_gamma: store.add(format!("{name}.grn.gamma"), Tensor::zeros([hidden])),
            grn_beta: store.add(format!("{name}.grn.beta"), Tensor::zeros([hidden])),
            contract: Linear::new(store, &format!("{name}.pwconv2"), hidden, dim, rng),
        }
    }

    /// depthwise conv -> layer norm -> expand -> GELU -> GRN -> contract, plus residual.
    pub fn forward<T: Real>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.graph();
        let h = g.depthwise_conv1d(x, b.get(self.dw_weight), Some(b.get(self.dw_bias)))?;
        let h = g.layer_norm(h, Some(b.get(self.norm_gamma)), Some(b.get(self.norm_beta)), NORM_EPS)?;
        let h = self.expand.forward(b, h)?;
        let h = g.gelu(h)?;
        let h = grn(b, h, self.grn_gamma, self.grn_beta)?;
        let h = self.contract.forward(b, h)?;
        g.add(x, h)
    }
}

/// Global response normalization over `[len, ch]`:
/// `gamma * (x * n) + beta + x` with `n = |x|_time / mean_ch(|x|_time)`.
pub fn grn<T: Real>(b: &Binder<T>, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
    let g = b.graph();
    let shape = g.shape(x);
    let (len, ch) = (shape[0], shape[1]);
    let sq = g.mul(x, x)?;
    let energy = g.sum_axis(sq, 0)?;
    // keeps the sqrt differentiable on an all-zero channel
    let energy = g.add_scalar(energy, 1e-12)?;
    let gx = g.sqrt(energy)?;
    let mean = g.mean_axis(gx, 1)?;
    let mean = g.add_scalar(mean, GRN_EPS)?;
    let mean = g.expand(mean, 1, ch)?;
    let nx = g.div(gx, mean)?;
    let nx = g.expand(nx, 0, len)?;
    let scaled = g.mul(x, nx)?;
    let gm = broadcast_rows(g, b.get(gamma), len)?;
    let bt = broadcast_rows(g, b.get(beta), len)?;
    let out = g.mul(scaled, gm)?;
    let out = g.add(out, bt)?;
    g.add(out, x)
}

/// Two stacked depthwise convolutions with GELU, added residually.
#[derive(Clone, Debug)]
pub struct ConvPositionEmbedding {
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
}

impl ConvPositionEmbedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        ConvPositionEmbedding {
            conv1_weight: store.add(format!("{name}.0.weight"), uniform(rng, &[dim, kernel], bound)),
            conv1_bias: store.add(format!("{name}.0.bias"), uniform(rng, &[dim], bound)),
            conv2_weight: store.add(format!("{name}.1.weight"), uniform(rng, &[dim, kernel], bound)),
            conv2_bias: store.add(format!("{name}.1.bias"), uniform(rng, &[dim], bound)),
        }
    }

    pub fn forward<T: Real>(&self, b: &Binder<T>, x: Var) -> Result<Var> {
        let g = b.graph();
        let h = g.depthwise_conv1d(x, b.get(self.conv1_weight), Some(b.get(self.conv1_bias)))?;
        let h = g.gelu(h)?;
        let h = g.depthwise_conv1d(h, b.get(self.conv2_weight), Some(b.get(self.conv2_bias)))?;
        let h = g.gelu(h)?;
        g.add(x, h)
    }
}

/// Sinusoidal features followed by a SiLU MLP.
#[derive(Clone, Debug)]
pub struct StepEmbedding {
    pub dim: usize,
    pub first: Linear,
    pub second: Linear,
}

impl StepEmbedding {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        StepEmbedding {
            dim,
            first: Linear::new(store, &format!("{name}.mlp.0"), dim, dim, rng),
            second: Linear::new(store, &format!("{name}.mlp.2"), dim, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, b: &Binder<T>, t: f64) -> Result<Var> {
        let g = b.graph();
        let feats = g.constant(step_features(t, self.dim));
        let h = self.first.forward(b, feats)?;
        let h = g.silu(h)?;
        self.second.forward(b, h)
    }
}

/// Rotary self-attention logits `[heads, len, len]`, scaled by `1/sqrt(head_dim)`.
pub fn attention_logits<T: Real>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    heads: usize,
    rope_base: f64,
    offset: usize,
) -> Result<Var> {
    let shape = g.shape(q);
    let (len, dim) = (shape[0], shape[1]);
    let hd = dim / heads;
    let q = g.rope(q, heads, rope_base, offset)?;
    let k = g.rope(k, heads, rope_base, offset)?;
    let q = g.reshape(q, &[len, heads, hd])?;
    let q = g.permute(q, &[1, 0, 2])?;
    let k = g.reshape(k, &[len, heads, hd])?;
    let k = g.permute(k, &[1, 2, 0])?;
    let scores = g.batch_matmul(q, k)?;
    g.mul_scalar(scores, 1.0 / (hd as f64).sqrt())
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Attention {
            heads,
            q: Linear::new(store, &format!("{name}.to_q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.to_k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.to_v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.to_out"), dim, dim, rng),
        }
    }

    pub fn forward<T: Real>(
        &self,
        b: &Binder<T>,
        x: Var,
        rope_base: f64,
        dropout_p: f64,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let g = b.graph();
        let shape = g.shape(x);
        let (len, dim) = (shape[0], shape[1]);
        let hd = dim / self.heads;
        let q = self.q.forward(b, x)?;
        let k = self.k.forward(b, x)?;
        let v = self.v.forward(b, x)?;
        let scores = attention_logits(g, q, k, self.heads, rope_base, 0)?;
        let probs = g.softmax(scores)?;
        let v = g.reshape(v, &[len, self.heads, hd])?;
        let v = g.permute(v, &[1, 0, 2])?;
        let ctx = g.batch_matmul(probs, v)?;
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, &[len, dim])?;
        let out = self.out.forward(b, ctx)?;
        dropout(g, out, dropout_p, rng)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.0"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.2"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, b: &Binder<T>, x: Var, dropout_p: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let g = b.graph();
        let h = self.up.forward(b, x)?;
        let h = g.gelu(h)?;
        let h = dropout(g, h, dropout_p, rng)?;
        self.down.forward(b, h)
    }
}

/// adaLN-zero transformer block: the modulation projection starts at zero, so
/// both residual gates are zero and the block starts as the identity.
#[derive(Clone, Debug)]
pub struct DitBlock {
    pub modulation: Linear,
    pub attn: Attention,
    pub ff: FeedForward,
}

/// `LN(x) * (1 + scale) + shift` with `[1, d]` modulation rows.
fn modulate<T: Real>(g: &Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let h = g.layer_norm(x, None, None, NORM_EPS)?;
    let scale = g.add_scalar(scale, 1.0)?;
    let scale = g.expand(scale, 0, rows)?;
    let shift = g.expand(shift, 0, rows)?;
    let h = g.mul(h, scale)?;
    g.add(h, shift)
}

impl DitBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Self {
        DitBlock {
            modulation: Linear::zeros(store, &format!("{name}.attn_norm.linear"), dim, 6 * dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ffn_hidden, rng),
        }
    }

    /// `cond` is the SiLU-activated flow-step embedding `[1, dim]`.
    pub fn forward<T: Real>(
        &self,
        b: &Binder<T>,
        x: Var,
        cond: Var,
        rope_base: f64,
        dropout_p: f64,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let g = b.graph();
        let rows = g.shape(x)[0];
        let dim = g.shape(x)[1];
        let m = self.modulation.forward(b, cond)?;
        let part = |i: usize| g.slice(m, 1, i * dim, (i + 1) * dim);
        let (shift_msa, scale_msa, gate_msa) = (part(0)?, part(1)?, part(2)?);
        let (shift_mlp, scale_mlp, gate_mlp) = (part(3)?, part(4)?, part(5)?);

        let h = modulate(g, x, shift_msa, scale_msa)?;
        let h = self.attn.forward(b, h, rope_base, dropout_p, reborrow(&mut rng))?;
        let gate = g.expand(gate_msa, 0, rows)?;
        let h = g.mul(h, gate)?;
        let x = g.add(x, h)?;

        let h = modulate(g, x, shift_mlp, scale_mlp)?;
        let h = self.ff.forward(b, h, dropout_p, rng)?;
        let gate = g.expand(gate_mlp, 0, rows)?;
        let h = g.mul(h, gate)?;
        g.add(x, h)
    }
}

/// Final adaLN (shift/scale only, zero-initialized) and output projection.
#[derive(Clone, Debug)]
pub struct FinalLayer {
    pub modulation: Linear,
    pub proj: Linear,
}

impl FinalLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, out: usize) -> Self {
        FinalLayer {
            modulation: Linear::zeros(store, &format!("{name}.norm_out.linear"), dim, 2 * dim),
            proj: Linear::zeros(store, &format!("{name}.proj_out"), dim, out),
        }
    }

    pub fn forward<T: Real>(&self, b: &Binder<T>, x: Var, cond: Var) -> Result<Var> {
        let g = b.graph();
        let dim = g.shape(x)[1];
        let m = self.modulation.forward(b, cond)?;
        let scale = g.slice(m, 1, 0, dim)?;
        let shift = g.slice(m, 1, dim, 2 * dim)?;
        let h = modulate(g, x, shift, scale)?;
        self.proj.forward(b, h)
    }
}
