//! Tape-based reverse-mode differentiation over the six layer kinds the
//! network needs.
//!
//! Spatial tensors are NHWC (`[n, h, w, c]`); a rank-3 `[h, w, c]` tensor is
//! treated as a batch of one and keeps its rank. Dense inputs are `[n, f]` or `[f]`.

use rand::Rng;

use super::scalar::{gemm, Trans};
use super::{MicrogradError, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Train mode enables dropout; infer mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

enum Op<T> {
    Leaf,
    Conv3x3 { input: NodeId, kernels: NodeId, bias: NodeId, cols: Vec<T> },
    MaxPool2x2 { input: NodeId, argmax: Vec<usize> },
    Dense { input: NodeId, weights: NodeId, bias: NodeId },
    Relu { input: NodeId },
    Softmax { input: NodeId },
    Dropout { input: NodeId, scale: Option<Vec<T>> },
    Flatten { input: NodeId },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner computation graph. Build it forward, then call
/// [`Graph::backward`] once with seed gradients for the outputs.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits an NHWC shape into `(n, h, w, c)`.
fn nhwc(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize), MicrogradError> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(MicrogradError::Shape(format!(
            "{what}: expected [h, w, c] or [n, h, w, c], got {shape:?}"
        ))),
    }
}

fn rows_cols(shape: &[usize], what: &str) -> Result<(usize, usize), MicrogradError> {
    match *shape {
        [f] => Ok((1, f)),
        [n, f] => Ok((n, f)),
        _ => Err(MicrogradError::Shape(format!("{what}: expected [f] or [n, f], got {shape:?}"))),
    }
}

fn spatial_shape(rank: usize, n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if rank == 3 {
        vec![h, w, c]
    } else {
        vec![n, h, w, c]
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(), MicrogradError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(MicrogradError::NonFinite { op })
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that also receives a gradient (used by gradient checks on inputs).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// 3×3 convolution, stride 1, zero padding 1 ("same" output size).
    pub fn conv3x3(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId, MicrogradError> {
        let x = &self.nodes[input.0].value;
        let (n, h, w, cin) = nhwc(x.shape(), "conv3x3 input")?;
        let kshape = self.nodes[kernels.0].value.shape();
        if kshape.len() != 4 || kshape[0] != 3 || kshape[1] != 3 || kshape[2] != cin {
            return Err(MicrogradError::Shape(format!(
                "conv3x3: kernels must be [3, 3, {cin}, c_out], got {kshape:?}"
            )));
        }
        let cout = kshape[3];
        let bshape = self.nodes[bias.0].value.shape();
        if bshape != [cout] {
            return Err(MicrogradError::Shape(format!("conv3x3: bias must be [{cout}], got {bshape:?}")));
        }

        let patch = 9 * cin;
        let pixels = n * h * w;
        let mut cols = vec![T::zero(); pixels * patch];
        im2col(x.data(), &mut cols, n, h, w, cin);

        let bd = self.nodes[bias.0].value.data();
        let mut out = Vec::with_capacity(pixels * cout);
        for _ in 0..pixels {
            out.extend_from_slice(bd);
        }
        gemm(pixels, patch, cout, &cols, Trans::No, self.nodes[kernels.0].value.data(), Trans::No, &mut out, true);

        let value = Tensor::new(spatial_shape(x.rank(), n, h, w, cout), out)?;
        check_finite(&value, "conv3x3")?;
        let rg = self.needs(input) || self.needs(kernels) || self.needs(bias);
        Ok(self.push(value, Op::Conv3x3 { input, kernels, bias, cols }, rg))
    }

    /// 2×2 max pooling, stride 2; a trailing odd row/column is dropped.
    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId, MicrogradError> {
        let x = &self.nodes[input.0].value;
        let (n, h, w, c) = nhwc(x.shape(), "maxpool2x2 input")?;
        if h < 2 || w < 2 {
            return Err(MicrogradError::Shape(format!(
                "maxpool2x2: spatial extent must be at least 2x2, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_idx = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                        let mut best = xd[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let value = Tensor::new(spatial_shape(x.rank(), n, oh, ow, c), out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::MaxPool2x2 { input, argmax }, rg))
    }

    /// Fully connected layer: `input · weights + bias`.
    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId, MicrogradError> {
        let x = &self.nodes[input.0].value;
        let (n, f) = rows_cols(x.shape(), "dense input")?;
        let wshape = self.nodes[weights.0].value.shape();
        if wshape.len() != 2 || wshape[0] != f {
            return Err(MicrogradError::Shape(format!("dense: weights must be [{f}, m], got {wshape:?}")));
        }
        let m = wshape[1];
        let bshape = self.nodes[bias.0].value.shape();
        if bshape != [m] {
            return Err(MicrogradError::Shape(format!("dense: bias must be [{m}], got {bshape:?}")));
        }
        let bd = self.nodes[bias.0].value.data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bd);
        }
        gemm(n, f, m, x.data(), Trans::No, self.nodes[weights.0].value.data(), Trans::No, &mut out, true);
        let shape = if x.rank() == 1 { vec![m] } else { vec![n, m] };
        let value = Tensor::new(shape, out)?;
        check_finite(&value, "dense")?;
        let rg = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(value, Op::Dense { input, weights, bias }, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("relu preserves shape");
        let rg = self.needs(input);
        self.push(value, Op::Relu { input }, rg)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        let k = *x.shape().last().expect("tensor rank >= 1");
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data).expect("softmax preserves shape");
        let rg = self.needs(input);
        self.push(value, Op::Softmax { input }, rg)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`; identity in infer mode.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: NodeId,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId, MicrogradError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(MicrogradError::DropoutRate(rate));
        }
        let x = &self.nodes[input.0].value;
        let rg = self.needs(input);
        if mode == Mode::Infer || rate == 0.0 {
            let value = x.clone();
            return Ok(self.push(value, Op::Dropout { input, scale: None }, rg));
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let scale: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input, scale: Some(scale) }, rg))
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        let n = x.shape()[0];
        let rest = x.len() / n;
        let value = x.clone().reshape(vec![n, rest]).expect("flatten preserves size");
        let rg = self.needs(input);
        self.push(value, Op::Flatten { input }, rg)
    }

    /// Reverse sweep. Each seed is `(output node, dLoss/dOutput)`.
    pub fn backward(&mut self, seeds: Vec<(NodeId, Tensor<T>)>) -> Result<(), MicrogradError> {
        for node in &mut self.nodes {
            node.grad = None;
        }
        for (id, g) in seeds {
            if g.shape() != self.nodes[id.0].value.shape() {
                return Err(MicrogradError::Shape(format!(
                    "seed gradient shape {:?} does not match node shape {:?}",
                    g.shape(),
                    self.nodes[id.0].value.shape()
                )));
            }
            check_finite(&g, "seed")?;
            accumulate(&mut self.nodes, id, g.into_data());
        }

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.as_ref() else { continue };
            let g = grad.data();
            match &node.op {
                Op::Leaf => {}
                Op::Conv3x3 { input, kernels, bias, cols } => {
                    let (n, h, w, cin) = nhwc(before[input.0].value.shape(), "conv3x3")?;
                    let cout = before[kernels.0].value.shape()[3];
                    let patch = 9 * cin;
                    let pixels = n * h * w;
                    if before[kernels.0].requires_grad {
                        let mut dk = vec![T::zero(); patch * cout];
                        gemm(patch, pixels, cout, cols, Trans::Yes, g, Trans::No, &mut dk, false);
                        accumulate_checked(before, *kernels, dk, "conv3x3 kernels")?;
                    }
                    if before[bias.0].requires_grad {
                        let mut db = vec![T::zero(); cout];
                        for row in g.chunks(cout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        accumulate_checked(before, *bias, db, "conv3x3 bias")?;
                    }
                    if before[input.0].requires_grad {
                        let mut dcols = vec![T::zero(); pixels * patch];
                        gemm(pixels, cout, patch, g, Trans::No, before[kernels.0].value.data(), Trans::Yes, &mut dcols, false);
                        let mut dx = vec![T::zero(); n * h * w * cin];
                        col2im(&dcols, &mut dx, n, h, w, cin);
                        accumulate_checked(before, *input, dx, "conv3x3 input")?;
                    }
                }
                Op::MaxPool2x2 { input, argmax } => {
                    let mut dx = vec![T::zero(); before[input.0].value.len()];
                    for (&idx, &v) in argmax.iter().zip(g) {
                        dx[idx] = dx[idx] + v;
                    }
                    accumulate(before, *input, dx);
                }
                Op::Dense { input, weights, bias } => {
                    let (n, f) = rows_cols(before[input.0].value.shape(), "dense")?;
                    let m = before[weights.0].value.shape()[1];
                    if before[weights.0].requires_grad {
                        let mut dw = vec![T::zero(); f * m];
                        gemm(f, n, m, before[input.0].value.data(), Trans::Yes, g, Trans::No, &mut dw, false);
                        accumulate_checked(before, *weights, dw, "dense weights")?;
                    }
                    if before[bias.0].requires_grad {
                        let mut db = vec![T::zero(); m];
                        for row in g.chunks(m) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        accumulate_checked(before, *bias, db, "dense bias")?;
                    }
                    if before[input.0].requires_grad {
                        let mut dx = vec![T::zero(); n * f];
                        gemm(n, m, f, g, Trans::No, before[weights.0].value.data(), Trans::Yes, &mut dx, false);
                        accumulate_checked(before, *input, dx, "dense input")?;
                    }
                }
                Op::Relu { input } => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(before, *input, dx);
                }
                Op::Softmax { input } => {
                    let k = *node.value.shape().last().expect("rank >= 1");
                    let mut dx = Vec::with_capacity(g.len());
                    for (p, gr) in node.value.data().chunks(k).zip(g.chunks(k)) {
                        let dot = p.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        dx.extend(p.iter().zip(gr).map(|(&pv, &gv)| pv * (gv - dot)));
                    }
                    accumulate_checked(before, *input, dx, "softmax")?;
                }
                Op::Dropout { input, scale } => {
                    let dx = match scale {
                        Some(s) => g.iter().zip(s).map(|(&gv, &sv)| gv * sv).collect(),
                        None => g.to_vec(),
                    };
                    accumulate(before, *input, dx);
                }
                Op::Flatten { input } => accumulate(before, *input, g.to_vec()),
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], id: NodeId, g: Vec<T>) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    match node.grad.as_mut() {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        None => {
            node.grad = Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient matches value shape"));
        }
    }
}

fn accumulate_checked<T: Scalar>(
    nodes: &mut [Node<T>],
    id: NodeId,
    g: Vec<T>,
    op: &'static str,
) -> Result<(), MicrogradError> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(MicrogradError::NonFinite { op });
    }
    accumulate(nodes, id, g);
    Ok(())
}

/// Column index of tap `(ky, kx)` for an output pixel; the three `kx` taps of
/// one `ky` row are adjacent, matching the input's NHWC layout.
fn tap_range(x: usize, w: usize) -> (usize, usize) {
    let lo = if x == 0 { 1 } else { 0 };
    let hi = if x + 1 == w { 2 } else { 3 };
    (lo, hi)
}

fn im2col<T: Scalar>(src: &[T], cols: &mut [T], n: usize, h: usize, w: usize, cin: usize) {
    let patch = 9 * cin;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = ((b * h + y) * w + x) * patch;
                let (lo, hi) = tap_range(x, w);
                for ky in 0..3 {
                    let sy = y + ky;
                    if sy == 0 || sy > h {
                        continue;
                    }
                    let s0 = ((b * h + sy - 1) * w + x + lo - 1) * cin;
                    let d0 = row + (ky * 3 + lo) * cin;
                    let len = (hi - lo) * cin;
                    cols[d0..d0 + len].copy_from_slice(&src[s0..s0 + len]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], dst: &mut [T], n: usize, h: usize, w: usize, cin: usize) {
    let patch = 9 * cin;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = ((b * h + y) * w + x) * patch;
                let (lo, hi) = tap_range(x, w);
                for ky in 0..3 {
                    let sy = y + ky;
                    if sy == 0 || sy > h {
                        continue;
                    }
                    let d0 = ((b * h + sy - 1) * w + x + lo - 1) * cin;
                    let s0 = row + (ky * 3 + lo) * cin;
                    let len = (hi - lo) * cin;
                    for (d, &v) in dst[d0..d0 + len].iter_mut().zip(&cols[s0..s0 + len]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}
