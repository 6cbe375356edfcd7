//! Layers shared by every network: linear maps, layer norm, multi-head
//! attention and a pre-norm transformer encoder. Parameters live in a
//! [`ParamStore`] under dotted names; layers take the name prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `{name}.w` is `[fan_in, fan_out]`, `{name}.b` is `[fan_out]`; both are
/// uniform on `±1/sqrt(fan_in)`.
pub fn init_linear<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.uniform(&format!("{name}.w"), &[fan_in, fan_out], bound, rng)?;
    store.uniform(&format!("{name}.b"), &[fan_out], bound, rng)
}

pub fn init_linear_zero(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.zeros(&format!("{name}.w"), &[fan_in, fan_out])?;
    store.zeros(&format!("{name}.b"), &[fan_out])
}

/// `x @ w + b` over the last dim of `x`.
pub fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let s = tape.shape(x).to_vec();
    // Rank-1 inputs are promoted to a single row.
    if s.len() == 1 {
        let x2 = tape.reshape(x, &[1, s[0]])?;
        let y = tape.matmul(x2, w)?;
        let y = tape.add(y, b)?;
        let out = tape.shape(y)[1];
        return tape.reshape(y, &[out]);
    }
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    store.ones(&format!("{name}.scale"), &[d])?;
    store.zeros(&format!("{name}.shift"), &[d])
}

pub fn layer_norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let scale = tape.param(store, &format!("{name}.scale"))?;
    let shift = tape.param(store, &format!("{name}.shift"))?;
    tape.layer_norm(x, scale, shift, LN_EPS)
}

/// Scaled dot-product attention split across `n_heads` along the last dim.
/// `q` is `[B, Nq, d]`, `k` and `v` are `[B, Nk, d]`. Returns the
/// concatenated head outputs `[B, Nq, d]` and each head's `[B, Nq, Nk]`
/// attention weights.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = *tape.shape(q).last().unwrap_or(&0);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::invalid(
            "attention",
            format!("model dim {d} not divisible by {n_heads} heads"),
        ));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, 2, lo, hi)?;
        let kh = tape.slice(k, 2, lo, hi)?;
        let vh = tape.slice(v, 2, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let w = tape.softmax(scores);
        heads.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads, 2)?
    };
    Ok((out, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
}

impl EncoderDims {
    pub fn new(d_model: usize, n_heads: usize, n_layers: usize) -> Self {
        Self {
            d_model,
            n_heads,
            n_layers,
            d_ff: 2 * d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(
                "encoder",
                format!(
                    "d_model {} must be a positive multiple of n_heads {}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        Ok(())
    }

    /// Scalar parameter count of one encoder stack.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * (2 * d) // two layer norms
            + 4 * (d * d + d) // q, k, v, o
            + (d * self.d_ff + self.d_ff)
            + (self.d_ff * d + d);
        self.n_layers * per_layer
    }
}

pub fn init_encoder<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    dims: &EncoderDims,
    rng: &mut R,
) -> Result<()> {
    dims.validate()?;
    let d = dims.d_model;
    for l in 0..dims.n_layers {
        let p = format!("{prefix}.l{l}");
        init_layer_norm(store, &format!("{p}.ln1"), d)?;
        for m in ["q", "k", "v", "o"] {
            init_linear(store, &format!("{p}.attn.{m}"), d, d, rng)?;
        }
        init_layer_norm(store, &format!("{p}.ln2"), d)?;
        init_linear(store, &format!("{p}.ff1"), d, dims.d_ff, rng)?;
        init_linear(store, &format!("{p}.ff2"), dims.d_ff, d, rng)?;
    }
    Ok(())
}

/// Pre-norm encoder: per layer, `x += MHA(LN(x))` then `x += FFN(LN(x))`
/// with a GELU feed-forward. Input and output are `[B, N, d_model]`.
pub fn encoder(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    dims: &EncoderDims,
    x: Var,
) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != dims.d_model {
        return Err(Error::shape("encoder", s, &[dims.d_model]));
    }
    let mut h = x;
    for l in 0..dims.n_layers {
        let p = format!("{prefix}.l{l}");
        let n1 = layer_norm(tape, store, &format!("{p}.ln1"), h)?;
        let q = linear(tape, store, &format!("{p}.attn.q"), n1)?;
        let k = linear(tape, store, &format!("{p}.attn.k"), n1)?;
        let v = linear(tape, store, &format!("{p}.attn.v"), n1)?;
        let (a, _) = multi_head_attention(tape, q, k, v, dims.n_heads)?;
        let a = linear(tape, store, &format!("{p}.attn.o"), a)?;
        h = tape.add(h, a)?;
        let n2 = layer_norm(tape, store, &format!("{p}.ln2"), h)?;
        let f = linear(tape, store, &format!("{p}.ff1"), n2)?;
        let f = tape.gelu(f);
        let f = linear(tape, store, &format!("{p}.ff2"), f)?;
        h = tape.add(h, f)?;
    }
    Ok(h)
}
