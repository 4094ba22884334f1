//! Reverse-mode differentiation over a per-pass recording tape.
//!
//! Every operator call appends a node holding its output value and whatever
//! the backward kernel needs. [`Tape::backward`] walks the nodes in reverse
//! and returns one gradient per reachable node. A tape is confined to one
//! thread and dropped after its backward pass.

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse linear map from each input plane to an output plane, shared by all
/// channels. Row `o` lists `(input index, weight)` taps for output cell `o`.
#[derive(Clone, Debug)]
pub struct SpatialGather {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl SpatialGather {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        if h != self.in_h {
            return Err(Error::shape("spatial_gather", "input height", self.in_h, h));
        }
        if w != self.in_w {
            return Err(Error::shape("spatial_gather", "input width", self.in_w, w));
        }
        let mut out = Vec::with_capacity(c * self.out_h * self.out_w);
        for ch in 0..c {
            let plane = x.channel(ch);
            out.extend(self.taps.iter().map(|taps| taps.iter().map(|&(i, wt)| wt * plane[i]).sum::<f64>()));
        }
        Ok(Tensor::from_parts(vec![c, self.out_h, self.out_w], out))
    }

    fn backward(&self, grad_out: &Tensor) -> Tensor {
        let c = grad_out.shape()[0];
        let plane = self.in_h * self.in_w;
        let mut dx = vec![0.0; c * plane];
        for ch in 0..c {
            let g = grad_out.channel(ch);
            let dst = &mut dx[ch * plane..(ch + 1) * plane];
            for (o, taps) in self.taps.iter().enumerate() {
                for &(i, wt) in taps {
                    dst[i] += wt * g[o];
                }
            }
        }
        Tensor::from_parts(vec![c, self.in_h, self.in_w], dx)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Relu(Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows {
        x: Var,
        row_len: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Gather {
        x: Var,
        map: SpatialGather,
    },
    Reshape(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    OuterSum {
        rows: Var,
        cols: Var,
    },
    Sum(Var),
    SpatialCrossEntropy {
        x: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    MaskedMse {
        x: Var,
        target: Tensor,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_signature: u64,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_signature: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every ReLU activation pattern recorded so far. Two passes with
    /// equal signatures took the same linear piece of every ReLU.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (out, cols) = ops::conv2d_with_cols(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                cols,
            },
        ))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let out = ops::conv_transpose2d(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let mut sig = self.kink_signature;
        for &v in input.data() {
            sig = (sig ^ u64::from(v > 0.0)).wrapping_mul(FNV_PRIME);
        }
        let out = ops::relu(input);
        self.kink_signature = sig;
        self.push(out, Op::Relu(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Per-channel spatial softmax of a `K×H×W` tensor.
    pub fn softmax_spatial(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        Ok(self.softmax_rows_of(x, h * w))
    }

    /// Softmax along the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.value(x).dims2()?;
        Ok(self.softmax_rows_of(x, cols))
    }

    fn softmax_rows_of(&mut self, x: Var, row_len: usize) -> Var {
        let input = self.value(x);
        let out = Tensor::from_parts(input.shape().to_vec(), ops::softmax_rows(input.data(), row_len));
        self.push(out, Op::SoftmaxRows { x, row_len })
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::bilinear_upsample(self.value(x), factor)?;
        Ok(self.push(out, Op::Upsample { x, factor }))
    }

    pub fn gather(&mut self, x: Var, map: SpatialGather) -> Result<Var> {
        let out = map.apply(self.value(x))?;
        Ok(self.push(out, Op::Gather { x, map }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let (r, c) = input.dims2()?;
        let d = input.data();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            out.extend((0..r).map(|i| d[i * c + j]));
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x)))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let input = self.value(x);
        let (r, c) = input.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", "column range end", c, start + len));
        }
        let out = input
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols", "no inputs"));
        };
        let (r, _) = self.value(first).dims2()?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::shape("concat_cols", "row count", r, pr));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, total], out), Op::ConcatCols(parts.to_vec())))
    }

    /// `out[i·W + j, :] = rows[i, :] + cols[j, :]` for `rows: H×D`, `cols: W×D`.
    pub fn outer_sum(&mut self, rows: Var, cols: Var) -> Result<Var> {
        let (h, d) = self.value(rows).dims2()?;
        let (w, d2) = self.value(cols).dims2()?;
        if d != d2 {
            return Err(Error::shape("outer_sum", "embedding width", d, d2));
        }
        let (rv, cv) = (self.value(rows).data(), self.value(cols).data());
        let mut out = Vec::with_capacity(h * w * d);
        for i in 0..h {
            for j in 0..w {
                out.extend((0..d).map(|k| rv[i * d + k] + cv[j * d + k]));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![h * w, d], out), Op::OuterSum { rows, cols }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Mean over valid channels of `−log softmax_spatial(x)[k][target_k]`.
    ///
    /// Channels whose target is `None` are excluded; with no valid channel the
    /// loss is exactly zero.
    pub fn spatial_cross_entropy(&mut self, x: Var, targets: &[Option<usize>]) -> Result<Var> {
        let input = self.value(x);
        let (k, h, w) = input.dims3()?;
        if targets.len() != k {
            return Err(Error::shape("spatial_cross_entropy", "target count", k, targets.len()));
        }
        let plane = h * w;
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= plane) {
            return Err(Error::invalid(
                "spatial_cross_entropy",
                format!("target index {bad} outside {h}x{w} map"),
            ));
        }
        let probs = ops::softmax_rows(input.data(), plane);
        let valid = targets.iter().flatten().count();
        let mut loss = 0.0;
        for (ch, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = &input.data()[ch * plane..(ch + 1) * plane];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        if valid > 0 {
            loss /= valid as f64;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SpatialCrossEntropy {
                x,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over valid channels of the per-pixel mean squared error.
    pub fn masked_mse(&mut self, x: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let input = self.value(x);
        input.check_same_shape(target, "masked_mse")?;
        let (k, h, w) = input.dims3()?;
        if mask.len() != k {
            return Err(Error::shape("masked_mse", "mask length", k, mask.len()));
        }
        let plane = h * w;
        let valid = mask.iter().filter(|&&m| m).count();
        let mut loss = 0.0;
        for ch in (0..k).filter(|&ch| mask[ch]) {
            let (a, b) = (input.channel(ch), target.channel(ch));
            loss += a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / plane as f64;
        }
        if valid > 0 {
            loss /= valid as f64;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                x,
                target: target.clone(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `out` with respect to every node that reaches it.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward", "output element count", 1, self.value(out).len()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::from_parts(self.value(out).shape().to_vec(), vec![1.0]));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                cols,
            } => {
                let gr = ops::conv2d_backward(g, self.value(*x), self.value(*w), cols, *stride, *padding);
                acc(*x, gr.input);
                acc(*w, gr.weight);
                acc(*b, gr.bias);
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let gr = ops::conv_transpose2d_backward(g, self.value(*x), self.value(*w), *stride);
                acc(*x, gr.input);
                acc(*w, gr.weight);
                acc(*b, gr.bias);
            }
            Op::Relu(x) => acc(*x, ops::relu_backward(g, self.value(*x))),
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(g, self.value(*a), self.value(*b));
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_with(vb, "mul", |p, q| p * q).expect("shapes fixed at record time"));
                acc(*b, g.zip_with(va, "mul", |p, q| p * q).expect("shapes fixed at record time"));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::SoftmaxRows { x, row_len } => {
                let dx = ops::softmax_rows_backward(g.data(), node.value.data(), *row_len);
                acc(*x, Tensor::from_parts(node.value.shape().to_vec(), dx));
            }
            Op::Upsample { x, factor } => {
                acc(*x, ops::bilinear_upsample_backward(g, self.value(*x).shape(), *factor));
            }
            Op::Gather { x, map } => acc(*x, map.backward(g)),
            Op::Reshape(x) => {
                acc(*x, Tensor::from_parts(self.value(*x).shape().to_vec(), g.data().to_vec()));
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let d = g.data();
                let mut out = Vec::with_capacity(r * c);
                for j in 0..c {
                    out.extend((0..r).map(|i| d[i * c + j]));
                }
                acc(*x, Tensor::from_parts(vec![c, r], out));
            }
            Op::SliceCols { x, start } => {
                let xs = self.value(*x).shape();
                let (r, c) = (xs[0], xs[1]);
                let len = g.shape()[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                acc(*x, Tensor::from_parts(vec![r, c], dx));
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (g.shape()[0], g.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    let mut dp = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        dp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + pc]);
                    }
                    acc(p, Tensor::from_parts(vec![r, pc], dp));
                    offset += pc;
                }
            }
            Op::OuterSum { rows, cols } => {
                let (h, d) = (self.value(*rows).shape()[0], self.value(*rows).shape()[1]);
                let w = self.value(*cols).shape()[0];
                let mut dr = vec![0.0; h * d];
                let mut dc = vec![0.0; w * d];
                for i in 0..h {
                    for j in 0..w {
                        let row = &g.data()[(i * w + j) * d..(i * w + j + 1) * d];
                        for k in 0..d {
                            dr[i * d + k] += row[k];
                            dc[j * d + k] += row[k];
                        }
                    }
                }
                acc(*rows, Tensor::from_parts(vec![h, d], dr));
                acc(*cols, Tensor::from_parts(vec![w, d], dc));
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::SpatialCrossEntropy { x, targets, probs } => {
                let shape = self.value(*x).shape().to_vec();
                let plane = shape[1] * shape[2];
                let valid = targets.iter().flatten().count();
                let mut dx = vec![0.0; probs.len()];
                if valid > 0 {
                    let s = g.data()[0] / valid as f64;
                    for (ch, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let dst = &mut dx[ch * plane..(ch + 1) * plane];
                            for (d, p) in dst.iter_mut().zip(&probs[ch * plane..(ch + 1) * plane]) {
                                *d = s * p;
                            }
                            dst[t] -= s;
                        }
                    }
                }
                acc(*x, Tensor::from_parts(shape, dx));
            }
            Op::MaskedMse { x, target, mask } => {
                let input = self.value(*x);
                let plane = input.shape()[1] * input.shape()[2];
                let valid = mask.iter().filter(|&&m| m).count();
                let mut dx = vec![0.0; input.len()];
                if valid > 0 {
                    let s = 2.0 * g.data()[0] / (valid as f64 * plane as f64);
                    for ch in (0..mask.len()).filter(|&ch| mask[ch]) {
                        for i in ch * plane..(ch + 1) * plane {
                            dx[i] = s * (input.data()[i] - target.data()[i]);
                        }
                    }
                }
                acc(*x, Tensor::from_parts(input.shape().to_vec(), dx));
            }
        }
    }
}

/// Worst relative error between the tape gradient of a scalar function and
/// central finite differences, over every coordinate of `point`.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
/// When a central stencil straddles a ReLU kink (detected through
/// [`Tape::kink_signature`]) the coordinate falls back to the second-order
/// one-sided stencil on the side that stays on the same linear piece, halving
/// the step if neither side is clean.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid("grad_check", format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    if !point.all_finite() {
        return Err(Error::NonFinite {
            context: "grad_check point".into(),
        });
    }
    let eval = |p: &Tensor| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone());
        let y = f(&mut tape, x)?;
        let v = tape.value(y);
        if v.len() != 1 {
            return Err(Error::shape("grad_check", "function output element count", 1, v.len()));
        }
        let value = v.data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check function value".into(),
            });
        }
        Ok((value, tape.kink_signature()))
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));
    if !analytic.all_finite() {
        return Err(Error::NonFinite {
            context: "grad_check analytic gradient".into(),
        });
    }
    let (f0, base_sig) = (tape.value(y).data()[0], tape.kink_signature());

    let mut probe = point.clone();
    let at = |probe: &mut Tensor, i: usize, offset: f64| -> Result<(f64, u64)> {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + offset;
        let r = eval(probe);
        probe.data_mut()[i] = orig;
        r
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut h = epsilon;
        let mut numeric = None;
        for _ in 0..40 {
            let (fp, sp) = at(&mut probe, i, h)?;
            let (fm, sm) = at(&mut probe, i, -h)?;
            if sp == base_sig && sm == base_sig {
                numeric = Some((fp - fm) / (2.0 * h));
                break;
            }
            if sm == base_sig {
                let (fm2, sm2) = at(&mut probe, i, -2.0 * h)?;
                if sm2 == base_sig {
                    numeric = Some((3.0 * f0 - 4.0 * fm + fm2) / (2.0 * h));
                    break;
                }
            }
            if sp == base_sig {
                let (fp2, sp2) = at(&mut probe, i, 2.0 * h)?;
                if sp2 == base_sig {
                    numeric = Some((-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * h));
                    break;
                }
            }
            h *= 0.5;
        }
        let Some(n) = numeric else {
            return Err(Error::invalid(
                "grad_check",
                format!("coordinate {i} sits on an activation kink"),
            ));
        };
        let a = analytic.data()[i];
        let denom = a.abs().max(n.abs()).max(1e-8);
        worst = worst.max((a - n).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Uniform sample bounded away from zero, for ReLU inputs.
    fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        use rand::Rng;
        Tensor::from_fn(shape, |_| {
            let m = r.gen_range(0.1..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    #[test]
    fn relu_sum_is_exact() {
        for seed in 0..5 {
            let x = away_from_zero(&[3, 4, 4], &mut rng(seed));
            let err = grad_check(
                |t, x| {
                    let r = t.relu(x);
                    Ok(t.sum(r))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-8, "seed {seed}: {err}");
        }
    }

    #[test]
    fn matmul_transpose_slice_concat_gradients() {
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let a = Tensor::rand_uniform(&[4, 6], -1.0, 1.0, &mut r);
            let b = Tensor::rand_uniform(&[6, 5], -1.0, 1.0, &mut r);
            let weights = Tensor::rand_uniform(&[5, 4], -1.0, 1.0, &mut r);
            let err = grad_check(
                |t, x| {
                    let b = t.leaf(b.clone());
                    let m = t.matmul(x, b)?;
                    let mt = t.transpose(m)?;
                    let left = t.slice_cols(mt, 0, 2)?;
                    let right = t.slice_cols(mt, 2, 2)?;
                    let joined = t.concat_cols(&[right, left])?;
                    let w = t.leaf(weights.clone());
                    let p = t.mul(joined, w)?;
                    Ok(t.sum(p))
                },
                &a,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn outer_sum_and_row_softmax_gradients() {
        for seed in 0..5 {
            let mut r = rng(200 + seed);
            let rows = Tensor::rand_uniform(&[3, 2], -1.0, 1.0, &mut r);
            let cols = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut r);
            let q = Tensor::rand_uniform(&[12, 2], -1.0, 1.0, &mut r);
            let wts = Tensor::rand_uniform(&[12, 12], -1.0, 1.0, &mut r);
            let err = grad_check(
                |t, x| {
                    let c = t.leaf(cols.clone());
                    let pos = t.outer_sum(x, c)?;
                    let pt = t.transpose(pos)?;
                    let q = t.leaf(q.clone());
                    let logits = t.matmul(q, pt)?;
                    let s = t.softmax_rows(logits)?;
                    let w = t.leaf(wts.clone());
                    let p = t.mul(s, w)?;
                    Ok(t.sum(p))
                },
                &rows,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn cross_entropy_and_mse_gradients() {
        for seed in 0..5 {
            let mut r = rng(300 + seed);
            let x = Tensor::rand_uniform(&[3, 4, 5], -2.0, 2.0, &mut r);
            let targets = [Some(3), None, Some(19)];
            let err = grad_check(|t, x| t.spatial_cross_entropy(x, &targets), &x, 1e-5).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");

            let target = Tensor::rand_uniform(&[3, 4, 5], 0.0, 1.0, &mut r);
            let err = grad_check(|t, x| t.masked_mse(x, &target, &[true, false, true]), &x, 1e-5).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn cross_entropy_without_targets_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[2, 3, 3], 4.0));
        let l = t.spatial_cross_entropy(x, &[None, None]).unwrap();
        assert_eq!(t.value(l).data()[0], 0.0);
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kink_stencil_handles_relu_near_zero() {
        // Coordinate 0 sits 1e-6 from the kink: a central stencil of 1e-5 would
        // straddle it; the one-sided fallback recovers the exact slope.
        let x = Tensor::new(&[1, 1, 3], vec![1e-6, -0.5, 0.7]).unwrap();
        let err = grad_check(
            |t, x| {
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_epsilon_and_non_finite() {
        let x = Tensor::zeros(&[1, 1, 2]);
        let f = |t: &mut Tape, x: Var| Ok(t.sum(x));
        assert!(grad_check(f, &x, 0.0).is_err());
        assert!(grad_check(f, &x, 0.1).is_err());
        let nan = Tensor::new(&[1], vec![f64::NAN]).unwrap();
        assert!(matches!(grad_check(f, &nan, 1e-5), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]));
        assert!(t.backward(x).is_err());
    }
}
