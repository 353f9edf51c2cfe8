//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! execution order, so the node list is already a topological order and the
//! backward pass is a single reverse sweep. Parameters are pulled from a
//! [`ParamStore`] once per graph; repeated uses share one node, which makes
//! gradient accumulation over multiple uses automatic.

use rand::Rng as _;
use rayon::prelude::*;

use super::array::gemm;
use super::{Array, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

pub const GROUP_NORM_EPS: f64 = 1e-5;
pub const BATCH_STD_EPS: f64 = 1e-8;

/// Handle to a differentiable array living in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    BroadcastLen(Var),
    AddBatch(Var, Var),
    BatchStd {
        x: Var,
        std: Vec<f64>,
    },
    Crop(Var),
    PadTo(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    rng: Option<Rng>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Array>>,
    param_vars: Vec<Option<Var>>,
    param_shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of a parameter; `None` if it did not take part in the loss.
    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.param_vars[id.0].and_then(|v| self.nodes[v.0].as_ref())
    }

    /// Gradient of a parameter, zero-filled when it is disconnected.
    pub fn param_or_zero(&self, id: ParamId) -> Array {
        self.param(id)
            .cloned()
            .unwrap_or_else(|| Array::zeros(&self.param_shapes[id.0]))
    }

    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let l = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / l.max(1), l)
}

fn im2col(
    x: &[f64],
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    cols: &mut [f64],
) {
    for c in 0..cin {
        let xs = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (o, dst) in row.iter_mut().enumerate() {
                let src = (o * stride + kk) as isize - pad as isize;
                *dst = if src >= 0 && (src as usize) < len {
                    xs[src as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    dx: &mut [f64],
) {
    for c in 0..cin {
        let xs = &mut dx[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &cols[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (o, v) in row.iter().enumerate() {
                let src = (o * stride + kk) as isize - pad as isize;
                if src >= 0 && (src as usize) < len {
                    xs[src as usize] += v;
                }
            }
        }
    }
}

fn conv_out_len(len: usize, k: usize, stride: usize) -> usize {
    // "same" padding: total k - 1, left (k - 1) / 2.
    (len + k - 1 - k) / stride + 1
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            mode,
            rng: None,
        }
    }

    /// Attaches the stream used by dropout in train mode.
    pub fn with_rng(mut self, rng: Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf whose gradient is recorded (used for input-gradient checks).
    pub fn tracked_input(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: self.store.get(id).clone(),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Array::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        let value = Array::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        self.map(x, Op::Affine(x, scale), |v| scale * v + offset)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Array::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `x · w + b` with `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.shape(b) != [ws[1]] {
            return Err(shape_err!(
                "linear: x {:?}, w {:?}, b {:?}",
                xs,
                ws,
                self.shape(b)
            ));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(batch * fout);
        for _ in 0..batch {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(
            batch,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            1.0,
        );
        let value = Array::new(vec![batch, fout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// 1-D convolution over `x: [B, Cin, L]` with `w: [Cout, Cin, K]` and
    /// zero "same" padding (left `(K-1)/2`).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || self.shape(b) != [ws[0]] || stride == 0
        {
            return Err(shape_err!("conv1d: x {:?}, w {:?}", xs, ws));
        }
        let (batch, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let pad = (k - 1) / 2;
        let lout = conv_out_len(len, k, stride);
        let mut out = vec![0.0; batch * cout * lout];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        out.par_chunks_mut(cout * lout).enumerate().for_each_init(
            || vec![0.0; cin * k * lout],
            |cols, (bi, y)| {
                im2col(&xv[bi * cin * len..(bi + 1) * cin * len], cin, len, k, stride, pad, lout, cols);
                for (c, row) in y.chunks_mut(lout).enumerate() {
                    row.fill(bv[c]);
                }
                gemm(cout, cin * k, lout, wv, false, cols, false, y, 1.0);
            },
        );
        let value = Array::new(vec![batch, cout, lout], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[x, w, b],
        ))
    }

    /// Max pooling with window 2 and stride 2 along the last axis.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[2] < 2 {
            return Err(shape_err!("maxpool2 needs [B, C, L>=2], got {:?}", xs));
        }
        let (outer, len) = last_axis(&xs);
        let lout = len / 2;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * lout);
        let mut argmax = Vec::with_capacity(outer * lout);
        for r in 0..outer {
            for o in 0..lout {
                let i = r * len + 2 * o;
                let j = if xv[i + 1] > xv[i] { i + 1 } else { i };
                out.push(xv[j]);
                argmax.push(j);
            }
        }
        let value = Array::new(vec![xs[0], xs[1], lout], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Nearest-neighbour ×2 upsampling along the last axis.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (outer, len) = last_axis(&xs);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * 2);
        for r in 0..outer {
            for v in &xv[r * len..(r + 1) * len] {
                out.push(*v);
                out.push(*v);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() *= 2;
        let value = Array::new(shape, out).expect("upsample shape");
        self.push(value, Op::Upsample2(x), &[x])
    }

    /// Group normalization over `x: [B, C, L]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || groups == 0 || xs[1] % groups != 0 {
            return Err(shape_err!("group_norm: x {:?} with {groups} groups", xs));
        }
        let (batch, ch, len) = (xs[0], xs[1], xs[2]);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(shape_err!("group_norm: affine params must be [{ch}]"));
        }
        let per = ch / groups * len;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(batch * groups);
        let mut out = vec![0.0; xv.len()];
        for bg in 0..batch * groups {
            let seg = &xv[bg * per..(bg + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            inv_std.push(is);
            for (i, v) in seg.iter().enumerate() {
                let idx = bg * per + i;
                let c = (idx / len) % ch;
                xhat[idx] = (v - mean) * is;
                out[idx] = xhat[idx] * gv[c] + bv[c];
            }
        }
        let value = Array::new(xs, out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: identity in eval mode, otherwise zeroes with
    /// probability `p` and rescales survivors by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("dropout probability {p}")));
        }
        let n = self.value(x).len();
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::InvalidInput("train-mode dropout needs a seeded stream".into()))?;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Array::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Row lookup in `table: [V, E]`, giving `[indices.len(), E]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err!("embedding table must be 2-D, got {:?}", ts));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= vocab {
                return Err(shape_err!("embedding index {i} out of range {vocab}"));
            }
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let value = Array::new(vec![indices.len(), dim], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} for shape {:?}", first));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err!("concat: {:?} vs {:?}", first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let (_, d, _) = split_axis(self.shape(*v), axis);
                out.extend_from_slice(&self.value(*v).data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Array::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `x * scale + shift` with `x: [B, C, L]` and per-sample, per-channel
    /// `scale, shift: [B, C]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(scale) != &xs[..2] || self.shape(shift) != &xs[..2] {
            return Err(shape_err!(
                "channel_affine: x {:?}, scale {:?}, shift {:?}",
                xs,
                self.shape(scale),
                self.shape(shift)
            ));
        }
        let len = xs[2];
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let hv = self.value(shift).data();
        let data = xv
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / len] + hv[i / len])
            .collect();
        let value = Array::new(xs, data)?;
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift]))
    }

    /// Repeats `x: [B, C]` along a new trailing axis of length `len`.
    pub fn broadcast_len(&mut self, x: Var, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err!("broadcast_len needs [B, C], got {:?}", xs));
        }
        let mut out = Vec::with_capacity(xs[0] * xs[1] * len);
        for v in self.value(x).data() {
            out.extend(std::iter::repeat_n(*v, len));
        }
        let value = Array::new(vec![xs[0], xs[1], len], out)?;
        Ok(self.push(value, Op::BroadcastLen(x), &[x]))
    }

    /// Adds `p` to every sample of `x`, where `p` has the shape of one sample.
    pub fn add_batch(&mut self, x: Var, p: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || self.shape(p) != &xs[1..] {
            return Err(shape_err!("add_batch: x {:?}, p {:?}", xs, self.shape(p)));
        }
        let pv = self.value(p).data();
        let n = pv.len();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| v + pv[i % n]).collect();
        let value = Array::new(xs, data)?;
        Ok(self.push(value, Op::AddBatch(x, p), &[x, p]))
    }

    /// Mean over features of the across-batch standard deviation of
    /// `x: [B, N]`, repeated as a `[B, 1]` column.
    pub fn batch_std(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] == 0 {
            return Err(shape_err!("batch_std needs [B, N] with B > 0, got {:?}", xs));
        }
        let (b, n) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let std: Vec<f64> = (0..n)
            .map(|j| {
                let m = (0..b).map(|i| xv[i * n + j]).sum::<f64>() / b as f64;
                let var = (0..b).map(|i| (xv[i * n + j] - m).powi(2)).sum::<f64>() / b as f64;
                (var + BATCH_STD_EPS).sqrt()
            })
            .collect();
        let s = std.iter().sum::<f64>() / n as f64;
        let value = Array::new(vec![b, 1], vec![s; b])?;
        Ok(self.push(value, Op::BatchStd { x, std }, &[x]))
    }

    /// Keeps the first `len` entries of the last axis.
    pub fn crop(&mut self, x: Var, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (outer, l) = last_axis(&xs);
        if len > l {
            return Err(shape_err!("crop to {len} from {l}"));
        }
        if len == l {
            return Ok(x);
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len);
        for r in 0..outer {
            out.extend_from_slice(&xv[r * l..r * l + len]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let value = Array::new(shape, out)?;
        Ok(self.push(value, Op::Crop(x), &[x]))
    }

    /// Right zero-pads the last axis to `len`.
    pub fn pad_to(&mut self, x: Var, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (outer, l) = last_axis(&xs);
        if len < l {
            return Err(shape_err!("pad to {len} from {l}"));
        }
        if len == l {
            return Ok(x);
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * len];
        for r in 0..outer {
            out[r * len..r * len + l].copy_from_slice(&xv[r * l..(r + 1) * l]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let value = Array::new(shape, out)?;
        Ok(self.push(value, Op::PadTo(x), &[x]))
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(shape_err!(
                "softmax_cross_entropy: logits {:?}, {} labels",
                ls,
                labels.len()
            ));
        }
        let c = ls[1];
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = 0.0;
        for (row, &y) in lv.chunks(c).zip(labels) {
            if y >= c {
                return Err(shape_err!("label {y} out of range {c}"));
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            loss -= row[y] - m - z.ln();
            probs.extend(row.iter().map(|v| (v - m).exp() / z));
        }
        let value = Array::scalar(loss / labels.len() as f64);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            nodes: grads,
            param_vars: self.param_vars.clone(),
            param_shapes: self
                .store
                .ids()
                .map(|id| self.store.get(id).shape().to_vec())
                .collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Array>], v: Var, delta: Array) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Array>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Array::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn elementwise(&self, grads: &mut [Option<Array>], v: Var, g: &Array, f: impl Fn(usize, f64) -> f64) {
        self.acc_with(grads, v, |d| {
            for (i, (dst, gi)) in d.iter_mut().zip(g.data()).enumerate() {
                *dst += f(i, *gi);
            }
        });
    }

    fn backprop_node(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.elementwise(grads, *b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.elementwise(grads, *a, g, |i, gi| gi * bv[i]);
                self.elementwise(grads, *b, g, |i, gi| gi * av[i]);
            }
            Op::Affine(x, s) => self.elementwise(grads, *x, g, |_, gi| gi * s),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, g, |i, gi| if xv[i] > 0.0 { gi } else { 0.0 });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, g, |i, gi| if xv[i] > 0.0 { gi } else { gi * slope });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.elementwise(grads, *x, g, |i, gi| gi * y[i] * (1.0 - y[i]));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.elementwise(grads, *x, g, |i, gi| gi * y[i]);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, g, |i, gi| gi / xv[i]);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, g, |i, gi| 2.0 * xv[i] * gi);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, g, |i, gi| {
                    if xv[i] < *lo || xv[i] > *hi {
                        0.0
                    } else {
                        gi
                    }
                });
            }
            Op::Dropout { x, mask } => self.elementwise(grads, *x, g, |i, gi| gi * mask[i]),
            Op::Sum(x) => {
                let s = gd[0];
                self.acc_with(grads, *x, |d| d.iter_mut().for_each(|v| *v += s));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let s = gd[0] / n;
                self.acc_with(grads, *x, |d| d.iter_mut().for_each(|v| *v += s));
            }
            Op::Reshape(x) => {
                let delta = g.clone().reshape(self.shape(*x)).expect("reshape back");
                self.acc(grads, *x, delta);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, fin) = (xs[0], xs[1]);
                let fout = self.shape(*w)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.acc_with(grads, *w, |d| gemm(fin, batch, fout, xv, true, gd, false, d, 1.0));
                self.acc_with(grads, *x, |d| gemm(batch, fout, fin, gd, false, wv, true, d, 1.0));
                self.acc_with(grads, *b, |d| {
                    for row in gd.chunks(fout) {
                        for (dst, v) in d.iter_mut().zip(row) {
                            *dst += v;
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.shape(*x);
                let (batch, cin, len) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let lout = node.value.shape()[2];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_w = self.nodes[w.0].needs_grad;
                let need_x = self.nodes[x.0].needs_grad;
                // Per-sample partials run in parallel; the weight gradient is
                // summed in sample order so results do not depend on threads.
                let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
                    .into_par_iter()
                    .map(|bi| {
                        let gy = &gd[bi * cout * lout..(bi + 1) * cout * lout];
                        let mut cols = vec![0.0; cin * k * lout];
                        let mut dw = vec![];
                        let mut dx = vec![];
                        if need_w {
                            dw = vec![0.0; cout * cin * k];
                            im2col(&xv[bi * cin * len..(bi + 1) * cin * len], cin, len, k, *stride, *pad, lout, &mut cols);
                            gemm(cout, lout, cin * k, gy, false, &cols, true, &mut dw, 0.0);
                        }
                        if need_x {
                            dx = vec![0.0; cin * len];
                            gemm(cin * k, cout, lout, wv, true, gy, false, &mut cols, 0.0);
                            col2im(&cols, cin, len, k, *stride, *pad, lout, &mut dx);
                        }
                        (dw, dx)
                    })
                    .collect();
                let mut dw = vec![0.0; cout * cin * k];
                let mut dx = if need_x { Vec::with_capacity(xv.len()) } else { vec![] };
                for (pw, px) in per_sample {
                    for (a, b) in dw.iter_mut().zip(&pw) {
                        *a += b;
                    }
                    dx.extend_from_slice(&px);
                }
                if need_w {
                    self.acc(grads, *w, Array::new(ws.to_vec(), dw).expect("dw"));
                }
                if need_x {
                    self.acc(grads, *x, Array::new(xs.to_vec(), dx).expect("dx"));
                }
                self.acc_with(grads, *b, |d| {
                    for (i, row) in gd.chunks(lout).enumerate() {
                        d[i % cout] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.acc_with(grads, *x, |d| {
                    for (gi, &j) in gd.iter().zip(argmax) {
                        d[j] += gi;
                    }
                });
            }
            Op::Upsample2(x) => {
                self.acc_with(grads, *x, |d| {
                    for (i, dst) in d.iter_mut().enumerate() {
                        *dst += gd[2 * i] + gd[2 * i + 1];
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let (ch, len) = (xs[1], xs[2]);
                let per = ch / groups * len;
                let gv = self.value(*gamma).data();
                self.acc_with(grads, *gamma, |d| {
                    for (i, gi) in gd.iter().enumerate() {
                        d[(i / len) % ch] += gi * xhat[i];
                    }
                });
                self.acc_with(grads, *beta, |d| {
                    for (i, gi) in gd.iter().enumerate() {
                        d[(i / len) % ch] += gi;
                    }
                });
                self.acc_with(grads, *x, |d| {
                    let n = per as f64;
                    for (bg, is) in inv_std.iter().enumerate() {
                        let range = bg * per..(bg + 1) * per;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_xh = 0.0;
                        for idx in range.clone() {
                            let dh = gd[idx] * gv[(idx / len) % ch];
                            sum_dh += dh;
                            sum_dh_xh += dh * xhat[idx];
                        }
                        for idx in range {
                            let dh = gd[idx] * gv[(idx / len) % ch];
                            d[idx] += is / n * (n * dh - sum_dh - xhat[idx] * sum_dh_xh);
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let dim = self.shape(*table)[1];
                self.acc_with(grads, *table, |d| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..dim {
                            d[i * dim + j] += gd[r * dim + j];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let (_, dsz, _) = split_axis(self.shape(*v), *axis);
                    self.acc_with(grads, *v, |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (dst, s) in d[o * dsz * inner..(o + 1) * dsz * inner]
                                .iter_mut()
                                .zip(&gd[src..src + dsz * inner])
                            {
                                *dst += s;
                            }
                        }
                    });
                    offset += dsz;
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let len = self.shape(*x)[2];
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                self.elementwise(grads, *x, g, |i, gi| gi * sv[i / len]);
                self.acc_with(grads, *scale, |d| {
                    for (i, gi) in gd.iter().enumerate() {
                        d[i / len] += gi * xv[i];
                    }
                });
                self.acc_with(grads, *shift, |d| {
                    for (i, gi) in gd.iter().enumerate() {
                        d[i / len] += gi;
                    }
                });
            }
            Op::BroadcastLen(x) => {
                let len = node.value.shape()[2];
                self.acc_with(grads, *x, |d| {
                    for (dst, row) in d.iter_mut().zip(gd.chunks(len)) {
                        *dst += row.iter().sum::<f64>();
                    }
                });
            }
            Op::AddBatch(x, p) => {
                self.elementwise(grads, *x, g, |_, gi| gi);
                self.acc_with(grads, *p, |d| {
                    for chunk in gd.chunks(d.len()) {
                        for (dst, v) in d.iter_mut().zip(chunk) {
                            *dst += v;
                        }
                    }
                });
            }
            Op::BatchStd { x, std } => {
                let (b, n) = (self.shape(*x)[0], std.len());
                let xv = self.value(*x).data();
                let total: f64 = gd.iter().sum();
                let mean: Vec<f64> = (0..n).map(|j| (0..b).map(|i| xv[i * n + j]).sum::<f64>() / b as f64).collect();
                self.acc_with(grads, *x, |d| {
                    for (k, dst) in d.iter_mut().enumerate() {
                        let j = k % n;
                        *dst += total * (xv[k] - mean[j]) / (b as f64 * n as f64 * std[j]);
                    }
                });
            }
            Op::Crop(x) => {
                let (outer, l) = last_axis(self.shape(*x));
                let len = *node.value.shape().last().unwrap();
                self.acc_with(grads, *x, |d| {
                    for r in 0..outer {
                        for j in 0..len {
                            d[r * l + j] += gd[r * len + j];
                        }
                    }
                });
            }
            Op::PadTo(x) => {
                let (outer, l) = last_axis(self.shape(*x));
                let len = *node.value.shape().last().unwrap();
                self.acc_with(grads, *x, |d| {
                    for r in 0..outer {
                        for j in 0..l {
                            d[r * l + j] += gd[r * len + j];
                        }
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = gd[0] / labels.len() as f64;
                self.acc_with(grads, *logits, |d| {
                    for (i, dst) in d.iter_mut().enumerate() {
                        let onehot = if labels[i / c] == i % c { 1.0 } else { 0.0 };
                        *dst += scale * (probs[i] - onehot);
                    }
                });
            }
        }
    }
}
