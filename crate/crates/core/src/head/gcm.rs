//! Global Context Module: multi-head self-attention with 2-D relative
//! position encodings, a 3×3 conv, and a residual connection.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Conv, Graph, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GcmBlock {
    pub channels: usize,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// `height × channels`; head `i` uses columns `i·d..(i+1)·d`.
    pub rel_h: ParamId,
    /// `width × channels`.
    pub rel_w: ParamId,
    pub conv: Conv,
}

/// Output of the attention layer plus the per-head `hw×hw` attention matrices.
pub struct MhsaOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl GcmBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        heads: usize,
        (height, width): (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid(
                "gcm_block",
                format!("{channels} channels not divisible into {heads} heads"),
            ));
        }
        let d = channels / heads;
        let proj_bound = (3.0 / channels as f64).sqrt();
        let pos_bound = (3.0 / d as f64).sqrt() * 0.5;
        let mut proj = |suffix: &str, rng: &mut R| {
            params.add(
                format!("{name}.mhsa.{suffix}"),
                Tensor::rand_uniform(&[channels, channels], -proj_bound, proj_bound, rng),
            )
        };
        let query = proj("query", rng);
        let key = proj("key", rng);
        let value = proj("value", rng);
        let rel_h = params.add(
            format!("{name}.mhsa.rel_h"),
            Tensor::rand_uniform(&[height, channels], -pos_bound, pos_bound, rng),
        );
        let rel_w = params.add(
            format!("{name}.mhsa.rel_w"),
            Tensor::rand_uniform(&[width, channels], -pos_bound, pos_bound, rng),
        );
        let conv = Conv::same3(params, &format!("{name}.conv"), channels, channels, rng);
        Ok(Self {
            channels,
            heads,
            height,
            width,
            query,
            key,
            value,
            rel_h,
            rel_w,
            conv,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn check_input(&self, g: &Graph<'_>, x: Var) -> Result<()> {
        let (c, h, w) = g.value(x).dims3()?;
        if c != self.channels {
            return Err(Error::shape("mhsa_forward", "channels", self.channels, c));
        }
        if h != self.height {
            return Err(Error::shape("mhsa_forward", "height", self.height, h));
        }
        if w != self.width {
            return Err(Error::shape("mhsa_forward", "width", self.width, w));
        }
        Ok(())
    }

    /// Per head: `softmax((q/√d)·(k + r)ᵀ)·v` with `r[i·w + j] = rel_h[i] + rel_w[j]`,
    /// i.e. content-content plus content-position logits.
    pub fn mhsa(&self, g: &mut Graph<'_>, x: Var) -> Result<MhsaOutput> {
        self.check_input(g, x)?;
        let (c, hw) = (self.channels, self.height * self.width);
        let d = self.head_dim();
        let flat = g.tape.reshape(x, &[c, hw])?;
        let tokens = g.tape.transpose(flat)?;

        let (wq, wk, wv) = (g.param(self.query), g.param(self.key), g.param(self.value));
        let q = g.tape.matmul(tokens, wq)?;
        let k = g.tape.matmul(tokens, wk)?;
        let v = g.tape.matmul(tokens, wv)?;
        let (rh, rw) = (g.param(self.rel_h), g.param(self.rel_w));
        let pos = g.tape.outer_sum(rh, rw)?;
        let keys = g.tape.add(k, pos)?;

        let mut outs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.tape.slice_cols(q, head * d, d)?;
            let qh = g.tape.scale(qh, 1.0 / (d as f64).sqrt());
            let kh = g.tape.slice_cols(keys, head * d, d)?;
            let vh = g.tape.slice_cols(v, head * d, d)?;
            let kt = g.tape.transpose(kh)?;
            let logits = g.tape.matmul(qh, kt)?;
            let attn = g.tape.softmax_rows(logits)?;
            outs.push(g.tape.matmul(attn, vh)?);
            attention.push(attn);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.tape.concat_cols(&outs)? };
        let back = g.tape.transpose(merged)?;
        let output = g.tape.reshape(back, &[c, self.height, self.width])?;
        Ok(MhsaOutput { output, attention })
    }

    /// `x + conv3×3(mhsa(x))`, before the activation.
    pub fn residual(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let att = self.mhsa(g, x)?.output;
        let mixed = self.conv.forward(g, att)?;
        g.tape.add(x, mixed)
    }

    /// `relu(x + conv3×3(mhsa(x)))`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let r = self.residual(g, x)?;
        Ok(g.tape.relu(r))
    }
}

/// Attention output of `block` on a concrete feature map.
pub fn mhsa_forward(params: &ParamSet, block: &GcmBlock, features: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let x = g.input(features.clone());
    let out = block.mhsa(&mut g, x)?.output;
    Ok(g.value(out).clone())
}

pub fn gcm_forward(params: &ParamSet, block: &GcmBlock, features: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let x = g.input(features.clone());
    let out = block.forward(&mut g, x)?;
    Ok(g.value(out).clone())
}

/// Per-head `hw×hw` attention matrices of `block` on `features`.
pub fn attention_maps(params: &ParamSet, block: &GcmBlock, features: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new(params);
    let x = g.input(features.clone());
    let out = block.mhsa(&mut g, x)?;
    Ok(out.attention.iter().map(|&a| g.value(a).clone()).collect())
}
