//! Transformer layer primitives built on [`Graph`] operations.

use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::error::{Result, TensorError};
use crate::graph::{AttnLayout, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dropout settings for one forward pass. `rng` may be omitted when `p == 0`.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: Option<&'r mut dyn RngCore>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn apply<S: Scalar>(&mut self, g: &mut Graph<'_, S>, x: Var) -> Var {
        match (&mut self.rng, self.p > 0.0) {
            (Some(rng), true) => g.dropout(x, self.p, &mut **rng),
            _ => x,
        }
    }
}

/// Uniform Glorot initialisation for a `rows × cols` weight.
pub fn glorot<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| S::from_f64_lossy(rng.random_range(-a..a)))
}

pub fn normal<S: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<S> {
    // Box-Muller keeps the dependency list short.
    Tensor::from_fn(shape, |_| {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        S::from_f64_lossy(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(d_out, d_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.affine(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[d], S::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]));
        Self { gain, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Query/key/value/output projections around [`Graph::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(TensorError::Config(format!(
                "model width {d_model} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        queries: Var,
        keys_values: Var,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys_values)?;
        let v = self.value.forward(g, keys_values)?;
        let mixed = g.attention(q, k, v, self.heads, layout)?;
        self.output.forward(g, mixed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d_model: usize,
        d_hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.ff1"), d_model, d_hidden, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), d_hidden, d_model, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, dropout: &mut Dropout<'_>) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        let h = dropout.apply(g, h);
        self.outer.forward(g, h)
    }
}

/// Post-norm transformer block: self-attention, optional attention over a
/// context, feed-forward; each sublayer wrapped as `norm(x + sublayer(x))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerBlock {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross: Option<(MultiHeadAttention, LayerNorm)>,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl TransformerBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d_model: usize,
        d_hidden: usize,
        heads: usize,
        with_cross: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let self_attn = MultiHeadAttention::new(store, &format!("{name}.self"), d_model, heads, rng)?;
        let self_norm = LayerNorm::new(store, &format!("{name}.self_norm"), d_model);
        let cross = if with_cross {
            Some((
                MultiHeadAttention::new(store, &format!("{name}.cross"), d_model, heads, rng)?,
                LayerNorm::new(store, &format!("{name}.cross_norm"), d_model),
            ))
        } else {
            None
        };
        let ffn = FeedForward::new(store, name, d_model, d_hidden, rng);
        let ffn_norm = LayerNorm::new(store, &format!("{name}.ffn_norm"), d_model);
        Ok(Self {
            self_attn,
            self_norm,
            cross,
            ffn,
            ffn_norm,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        h: Var,
        self_layout: &Arc<AttnLayout>,
        context: Option<(Var, &Arc<AttnLayout>)>,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, h, h, Arc::clone(self_layout))?;
        let a = dropout.apply(g, a);
        let sum = g.add(h, a)?;
        let mut h = self.self_norm.forward(g, sum)?;
        if let (Some((attn, norm)), Some((ctx, layout))) = (&self.cross, context) {
            let c = attn.forward(g, h, ctx, Arc::clone(layout))?;
            let c = dropout.apply(g, c);
            let sum = g.add(h, c)?;
            h = norm.forward(g, sum)?;
        }
        let f = self.ffn.forward(g, h, dropout)?;
        let f = dropout.apply(g, f);
        let sum = g.add(h, f)?;
        self.ffn_norm.forward(g, sum)
    }
}
