//! Transformer encoder building blocks on top of [`crate::tensor`].
//!
//! Layers are parameter-slot descriptors ([`ParamId`]s into a
//! [`ParamStore`]); forward functions take the graph and the slots bound
//! into it, so one model value serves training, frozen inference and
//! gradient checks alike.

mod params;

pub use params::{Bound, Init, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Dense `x · W + b` layer with `W` of shape `in_dim × out_dim`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.xavier(in_dim, out_dim))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Identity weight, zero bias. Only valid for square layers.
    pub fn identity<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let eye = Tensor::from_fn(vec![dim, dim], |i| {
            if i / dim == i % dim {
                T::one()
            } else {
                T::zero()
            }
        });
        let weight = store.add(format!("{name}.weight"), eye)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]))?;
        Ok(Linear {
            weight,
            bias,
            in_dim: dim,
            out_dim: dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.weight))?;
        g.add_broadcast(h, p.var(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![dim], T::one()))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.shift))
    }
}

/// One pre-norm encoder layer: self-attention and a GELU feed-forward
/// block, each wrapped as `x + sublayer(norm(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm_attn: LayerNorm,
    pub norm_ff: LayerNorm,
    pub heads: usize,
    pub model_dim: usize,
}

impl EncoderLayerParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        model_dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        if heads == 0 || model_dim == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model_dim {model_dim} must be a positive multiple of head count {heads}"
            )));
        }
        Ok(EncoderLayerParams {
            query: Linear::new(store, init, &format!("{name}.attn.query"), model_dim, model_dim)?,
            key: Linear::new(store, init, &format!("{name}.attn.key"), model_dim, model_dim)?,
            value: Linear::new(store, init, &format!("{name}.attn.value"), model_dim, model_dim)?,
            output: Linear::new(store, init, &format!("{name}.attn.output"), model_dim, model_dim)?,
            ff_in: Linear::new(store, init, &format!("{name}.ff.in"), model_dim, ff_dim)?,
            ff_out: Linear::new(store, init, &format!("{name}.ff.out"), ff_dim, model_dim)?,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), model_dim)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), model_dim)?,
            heads,
            model_dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn param_count(&self) -> usize {
        [&self.query, &self.key, &self.value, &self.output, &self.ff_in, &self.ff_out]
            .iter()
            .map(|l| l.param_count())
            .sum::<usize>()
            + 4 * self.model_dim
    }
}

/// Sinusoidal position table: sine on even columns, cosine on odd ones,
/// both at frequency `10000^(-2i/d_model)`.
pub fn positional_encoding<T: Real>(seq_len: usize, d_model: usize) -> Result<Tensor<T>> {
    if seq_len == 0 || d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs seq_len >= 1 and even d_model >= 2, got {seq_len} x {d_model}"
        )));
    }
    Ok(Tensor::from_fn(vec![seq_len, d_model], |flat| {
        let (pos, col) = (flat / d_model, flat % d_model);
        let i = (col / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
        T::of(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Scaled dot-product attention over `[.., L, d_k]` operands.
///
/// Returns the attended values and the attention weights.
pub fn attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d_k = *g.shape(q).last().unwrap_or(&0);
    if d_k == 0 {
        return Err(Error::Config("attention with zero head width".into()));
    }
    if g.shape(k).last() != Some(&d_k) {
        return Err(Error::Dimension(format!(
            "attention: query {:?} and key {:?} widths differ",
            g.shape(q),
            g.shape(k)
        )));
    }
    let (sk, sv) = (g.shape(k), g.shape(v));
    if sk.len() < 2 || sv.len() < 2 || sk[sk.len() - 2] != sv[sv.len() - 2] {
        return Err(Error::Dimension(format!(
            "attention: key {sk:?} and value {sv:?} lengths differ"
        )));
    }
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, T::one() / T::of(d_k as f64).sqrt())?;
    let weights = g.softmax_lastdim(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Per-head projections, attention per head, concatenation, output
/// projection.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layer: &EncoderLayerParams,
    x: Var,
) -> Result<Var> {
    let width = *g.shape(x).last().unwrap_or(&0);
    if width != layer.model_dim {
        return Err(Error::Dimension(format!(
            "attention input {:?} does not match model_dim {}",
            g.shape(x),
            layer.model_dim
        )));
    }
    let q = layer.query.forward(g, p, x)?;
    let k = layer.key.forward(g, p, x)?;
    let v = layer.value.forward(g, p, x)?;
    let axis = g.shape(x).len() - 1;
    let d_k = layer.head_dim();
    let mut heads = Vec::with_capacity(layer.heads);
    for h in 0..layer.heads {
        let (lo, hi) = (h * d_k, (h + 1) * d_k);
        let qh = g.slice_axis(q, axis, lo, hi)?;
        let kh = g.slice_axis(k, axis, lo, hi)?;
        let vh = g.slice_axis(v, axis, lo, hi)?;
        heads.push(attention(g, qh, kh, vh)?.0);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads, axis)?
    };
    layer.output.forward(g, p, joined)
}

pub fn encoder_layer<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layer: &EncoderLayerParams,
    x: Var,
) -> Result<Var> {
    let h = layer.norm_attn.forward(g, p, x)?;
    let a = multi_head_attention(g, p, layer, h)?;
    let x = g.add(x, a)?;
    let h = layer.norm_ff.forward(g, p, x)?;
    let h = layer.ff_in.forward(g, p, h)?;
    let h = g.gelu(h)?;
    let h = layer.ff_out.forward(g, p, h)?;
    g.add(x, h)
}

pub fn encoder_stack<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layers: &[EncoderLayerParams],
    x: Var,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("encoder stack has no layers".into()));
    }
    layers
        .iter()
        .try_fold(x, |h, layer| encoder_layer(g, p, layer, h))
}

/// Builds `count` encoder layers named `{name}.layer{i}`.
pub fn build_stack<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    name: &str,
    count: usize,
    model_dim: usize,
    heads: usize,
    ff_dim: usize,
) -> Result<Vec<EncoderLayerParams>> {
    (0..count)
        .map(|i| {
            EncoderLayerParams::new(store, init, &format!("{name}.layer{i}"), model_dim, heads, ff_dim)
        })
        .collect()
}
