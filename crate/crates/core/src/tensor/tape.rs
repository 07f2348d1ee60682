//! Reverse-mode autodiff tape.
//!
//! Ops append nodes to the tape during the forward pass; [`Tape::backward`]
//! walks the nodes in reverse and fills per-node gradient buffers. Parameter
//! leaves remember their [`ParamId`] so [`Tape::accumulate_into`] can add the
//! gradients into a [`ParamStore`].
//!
//! All kernels that parallelize do so over disjoint output slices (batch
//! samples, output channels, rows), so results are bitwise independent of the
//! worker count.

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::parallel;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Angular-margin variant applied to the target-class cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MarginVariant {
    /// Target logit `s * (cos(theta) - m)`.
    CosFace,
    /// Target logit `s * cos(theta + m)`, with `theta + m` capped at pi.
    ArcFace,
}

enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize, cols: Vec<f32> },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    PRelu { x: NodeId, slope: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulEw { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f32 },
    Tanh { x: NodeId },
    Abs { x: NodeId },
    Square { x: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    GlobalAvgPool { x: NodeId },
    Upsample2x { x: NodeId },
    RowNormalize { x: NodeId, norms: Vec<f32> },
    MatmulNT { a: NodeId, b: NodeId },
    MarginScale { cos: NodeId, labels: Vec<usize>, variant: MarginVariant, s: f32, m: f32 },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    BceWithLogits { logits: NodeId, targets: Vec<f32> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call with respect to this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, op });
        id
    }

    /// Constant leaf; receives a gradient buffer but is not tied to a parameter.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    /// Parameter leaf; gradients flow into the store via [`Self::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    // ---- ops ----

    /// 2-D cross-correlation. `x`: [N,C,H,W], `w`: [O,C,KH,KW], no bias.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects 4-d input and kernel, got {xs:?} and {ws:?}"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c != ci {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {c} channels, kernel expects {ci}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let col_rows = c * kh * kw;
        let col_cols = oh * ow;
        let sample = c * h * wd;

        let mut cols = vec![0.0f32; n * col_rows * col_cols];
        {
            let xd = self.value(x).data();
            parallel::for_each_chunk_mut(&mut cols, col_rows * col_cols, |ni, dst| {
                im2col(&xd[ni * sample..(ni + 1) * sample], c, h, wd, kh, kw, stride, pad, oh, ow, dst);
            });
        }
        let mut out = vec![0.0f32; n * o * col_cols];
        {
            let wdat = self.value(w).data();
            parallel::for_each_chunk_mut(&mut out, o * col_cols, |ni, dst| {
                gemm(
                    wdat,
                    &cols[ni * col_rows * col_cols..(ni + 1) * col_rows * col_cols],
                    dst,
                    o,
                    col_rows,
                    col_cols,
                );
            });
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, stride, pad, cols }))
    }

    /// Affine map. `x`: [N,D], `w`: [D,M], optional bias `b`: [M].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape(format!(
                "linear expects 2-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, d) = (xs[0], xs[1]);
        let (dw, m) = (ws[0], ws[1]);
        if d != dw {
            return Err(Error::shape(format!(
                "linear inner dimension mismatch: input {d} vs weight {dw}"
            )));
        }
        if let Some(bn) = b {
            let bs = self.value(bn).shape();
            if bs != [m] {
                return Err(Error::shape(format!("linear bias shape {bs:?}, expected [{m}]")));
            }
        }
        let mut out = vec![0.0f32; n * m];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|bn| self.value(bn).data().to_vec());
            parallel::for_each_chunk_mut(&mut out, m, |ni, row| {
                if let Some(bd) = &bd {
                    row.copy_from_slice(bd);
                }
                for di in 0..d {
                    let a = xd[ni * d + di];
                    if a != 0.0 {
                        let wrow = &wd[di * m..(di + 1) * m];
                        for (r, wv) in row.iter_mut().zip(wrow) {
                            *r += a * wv;
                        }
                    }
                }
            });
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Per-channel parametric ReLU. `x`: [N,C,...], `slope`: [C].
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(format!("prelu expects rank >= 2, got {xs:?}")));
        }
        let c = xs[1];
        if self.value(slope).shape() != [c] {
            return Err(Error::shape(format!(
                "prelu slope has shape {:?}, expected [{c}] to match channel count",
                self.value(slope).shape()
            )));
        }
        let inner: usize = xs[2..].iter().product();
        let xd = self.value(x).data();
        let sd = self.value(slope).data();
        let mut out = vec![0.0f32; xd.len()];
        parallel::for_each_chunk_mut(&mut out, inner.max(1), |chunk_i, dst| {
            let ch = chunk_i % c;
            let a = sd[ch];
            let src = &xd[chunk_i * inner..chunk_i * inner + dst.len()];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = if v >= 0.0 { v } else { a * v };
            }
        });
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::PRelu { x, slope }))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<Vec<usize>> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::shape(format!("{name}: shape {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "add")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub { a, b }))
    }

    pub fn mul_ew(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "mul_ew")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::MulEw { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f32> = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Scale { x, c })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f32> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Tanh { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f32> = self.value(x).data().iter().map(|v| v.abs()).collect();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Abs { x })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f32> = self.value(x).data().iter().map(|v| v * v).collect();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Square { x })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar((s / n as f64) as f32), Op::MeanAll { x })
    }

    /// [N,C,H,W] -> [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("global_avg_pool expects 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; n * c];
        parallel::for_each_chunk_mut(&mut out, c, |ni, row| {
            for (ci, r) in row.iter_mut().enumerate() {
                let base = (ni * c + ci) * hw;
                let s: f32 = xd[base..base + hw].iter().sum();
                *r = s / hw as f32;
            }
        });
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool { x }))
    }

    /// Nearest-neighbor 2x spatial upsample of [N,C,H,W].
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("upsample2x expects 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        parallel::for_each_chunk_mut(&mut out, oh * ow, |plane, dst| {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for r in 0..oh {
                for cix in 0..ow {
                    dst[r * ow + cix] = src[(r / 2) * w + cix / 2];
                }
            }
        });
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::Upsample2x { x }))
    }

    /// L2-normalize each row of [N,D].
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::shape(format!("row_normalize expects 2-d input, got {xs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut norms = vec![0.0f32; n];
        let mut out = vec![0.0f32; n * d];
        for ni in 0..n {
            let row = &xd[ni * d..(ni + 1) * d];
            let r = (row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sqrt() as f32;
            let r = r.max(1e-12);
            norms[ni] = r;
            for (o, &v) in out[ni * d..(ni + 1) * d].iter_mut().zip(row) {
                *o = v / r;
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::RowNormalize { x, norms }))
    }

    /// `a` [N,D] times `b` [C,D] transposed -> [N,C].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(format!("matmul_nt: {sa:?} incompatible with {sb:?}")));
        }
        let (n, d, c) = (sa[0], sa[1], sb[0]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0f32; n * c];
        parallel::for_each_chunk_mut(&mut out, c, |ni, row| {
            let arow = &ad[ni * d..(ni + 1) * d];
            for (ci, r) in row.iter_mut().enumerate() {
                let brow = &bd[ci * d..(ci + 1) * d];
                *r = dot(arow, brow);
            }
        });
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::MatmulNT { a, b }))
    }

    /// Scale cosine logits and apply the target-class margin.
    ///
    /// `cos`: [N,C] cosines. With `labels` present the target entry of each row
    /// becomes `s*(cos - m)` (CosFace) or `s*cos(theta + m)` (ArcFace, capped at
    /// pi); all other entries become `s*cos`.
    pub fn margin_scale(
        &mut self,
        cos: NodeId,
        labels: Option<&[usize]>,
        variant: MarginVariant,
        s: f32,
        m: f32,
    ) -> Result<NodeId> {
        let cs = self.value(cos).shape().to_vec();
        if cs.len() != 2 {
            return Err(Error::shape(format!("margin_scale expects [N,C] cosines, got {cs:?}")));
        }
        let (n, c) = (cs[0], cs[1]);
        let labels: Vec<usize> = match labels {
            None => Vec::new(),
            Some(l) => {
                if l.len() != n {
                    return Err(Error::shape(format!(
                        "margin_scale got {} labels for batch of {n}",
                        l.len()
                    )));
                }
                if let Some(&bad) = l.iter().find(|&&y| y >= c) {
                    return Err(Error::config(format!(
                        "label {bad} out of range for {c} classes"
                    )));
                }
                l.to_vec()
            }
        };
        let cd = self.value(cos).data();
        let mut out = vec![0.0f32; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let v = cd[ni * c + ci];
                out[ni * c + ci] = if !labels.is_empty() && labels[ni] == ci {
                    s * margin_target(v, variant, m)
                } else {
                    s * v
                };
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::MarginScale { cos, labels, variant, s, m },
        ))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 {
            return Err(Error::shape(format!("cross_entropy expects [N,C] logits, got {ls:?}")));
        }
        let (n, c) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy got {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::config(format!("label {bad} out of range for {c} classes")));
        }
        let ld = self.value(logits).data();
        let mut total = 0.0f64;
        for ni in 0..n {
            let row = &ld[ni * c..(ni + 1) * c];
            total += row_log_sum_exp(row) - row[labels[ni]] as f64;
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec() }))
    }

    /// Mean binary cross-entropy on logits; numerically stable form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f32]) -> Result<NodeId> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(Error::shape(format!(
                "bce_with_logits got {} targets for {n} logits",
                targets.len()
            )));
        }
        let ld = self.value(logits).data();
        let mut total = 0.0f64;
        for (&x, &t) in ld.iter().zip(targets) {
            let x = x as f64;
            total += x.max(0.0) - x * t as f64 + (1.0 + (-x.abs()).exp()).ln();
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        Ok(self.push(value, Op::BceWithLogits { logits, targets: targets.to_vec() }))
    }

    // ---- backward ----

    /// Populate node gradients with d(loss)/d(node). `loss` must be scalar.
    /// Clears any gradients from a previous call on this tape first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            self.propagate(i)?;
        }
        Ok(())
    }

    /// Add gradients of parameter leaves belonging to `store` into it.
    /// Repeated backward calls therefore accumulate unless the store grads
    /// are cleared. Leaves from other stores are left alone.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                if store.owns(*id) {
                    store.get_mut(*id).accumulate_grad(g);
                }
            }
        }
    }

    fn take_grad(&mut self, i: usize) -> Vec<f32> {
        self.nodes[i].grad.clone().expect("grad present")
    }

    fn add_grad(&mut self, id: NodeId, delta: &[f32]) {
        let n = self.nodes[id.0].value.len();
        debug_assert_eq!(n, delta.len());
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn propagate(&mut self, i: usize) -> Result<()> {
        // Split borrows: clone the small pieces we need, move big buffers once.
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => Ok(()),
            Op::Conv2d { x, w, stride, pad, .. } => {
                let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                self.conv2d_backward(i, x, w, stride, pad)
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                self.linear_backward(i, x, w, b)
            }
            Op::PRelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                let g = self.take_grad(i);
                let xs = self.value(x).shape().to_vec();
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let xd = self.value(x).data().to_vec();
                let sd = self.value(slope).data().to_vec();
                let mut dx = vec![0.0f32; xd.len()];
                let mut ds = vec![0.0f32; c];
                for (chunk_i, dxc) in dx.chunks_mut(inner.max(1)).enumerate() {
                    let ch = chunk_i % c;
                    let a = sd[ch];
                    let base = chunk_i * inner;
                    let mut ds_c = 0.0f32;
                    for (k, d) in dxc.iter_mut().enumerate() {
                        let v = xd[base + k];
                        let gi = g[base + k];
                        if v >= 0.0 {
                            *d = gi;
                        } else {
                            *d = a * gi;
                            ds_c += v * gi;
                        }
                    }
                    ds[ch] += ds_c;
                }
                self.add_grad(x, &dx);
                self.add_grad(slope, &ds);
                Ok(())
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let g = self.take_grad(i);
                self.add_grad(a, &g);
                self.add_grad(b, &g);
                Ok(())
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let g = self.take_grad(i);
                self.add_grad(a, &g);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                self.add_grad(b, &neg);
                Ok(())
            }
            Op::MulEw { a, b } => {
                let (a, b) = (*a, *b);
                let g = self.take_grad(i);
                let da: Vec<f32> = g.iter().zip(self.value(b).data()).map(|(gi, bv)| gi * bv).collect();
                let db: Vec<f32> = g.iter().zip(self.value(a).data()).map(|(gi, av)| gi * av).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
                Ok(())
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let g = self.take_grad(i);
                let dx: Vec<f32> = g.iter().map(|v| v * c).collect();
                self.add_grad(x, &dx);
                Ok(())
            }
            Op::Tanh { x } => {
                let x = *x;
                let g = self.take_grad(i);
                let y = self.nodes[i].value.data().to_vec();
                let dx: Vec<f32> = g.iter().zip(&y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                self.add_grad(x, &dx);
                Ok(())
            }
            Op::Abs { x } => {
                let x = *x;
                let g = self.take_grad(i);
                let xd = self.value(x).data().to_vec();
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&xd)
                    .map(|(gi, &v)| if v > 0.0 { *gi } else if v < 0.0 { -*gi } else { 0.0 })
                    .collect();
                self.add_grad(x, &dx);
                Ok(())
            }
            Op::Square { x } => {
                let x = *x;
                let g = self.take_grad(i);
                let xd = self.value(x).data().to_vec();
                let dx: Vec<f32> = g.iter().zip(&xd).map(|(gi, &v)| 2.0 * v * gi).collect();
                self.add_grad(x, &dx);
                Ok(())
            }
            Op::SumAll { x } => {
                let x = *x;
                let g = self.take_grad(i)[0];
                let n = self.value(x).len();
                self.add_grad(x, &vec![g; n]);
                Ok(())
            }
            Op::MeanAll { x } => {
                let x = *x;
                let g = self.take_grad(i)[0];
                let n = self.value(x).len();
                self.add_grad(x, &vec![g / n as f32; n]);
                Ok(())
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                let g = self.take_grad(i);
                let xs = self.value(x).shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = (h * w) as f32;
                let mut dx = vec![0.0f32; n * c * h * w];
                for (plane, dxp) in dx.chunks_mut(h * w).enumerate() {
                    let gi = g[plane] / hw;
                    for d in dxp.iter_mut() {
                        *d = gi;
                    }
                }
                self.add_grad(x, &dx);
                Ok(())
            }
            Op::Upsample2x { x } => {
                let x = *x;
                let g = self.take_grad(i);
                let xs = self.value(x).shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let ow = 2 * w;
                let mut dx = vec![0.0f32; n * c * h * w];
                for (plane, dxp) in dx.chunks_mut(h * w).enumerate() {
                    let gsrc = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    for r in 0..2 * h {
                        for cc in 0..ow {
                            dxp[(r / 2) * w + cc / 2] += gsrc[r * ow + cc];
                        }
                    }
                }
                self.add_grad(x, &dx);
                Ok(())
            }
            Op::RowNormalize { x, norms } => {
                let x = *x;
                let norms = norms.clone();
                let g = self.take_grad(i);
                let y = self.nodes[i].value.data().to_vec();
                let xs = self.value(x).shape().to_vec();
                let (n, d) = (xs[0], xs[1]);
                let mut dx = vec![0.0f32; n * d];
                for ni in 0..n {
                    let yr = &y[ni * d..(ni + 1) * d];
                    let gr = &g[ni * d..(ni + 1) * d];
                    let gy = dot(gr, yr);
                    let r = norms[ni];
                    for k in 0..d {
                        dx[ni * d + k] = (gr[k] - yr[k] * gy) / r;
                    }
                }
                self.add_grad(x, &dx);
                Ok(())
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let g = self.take_grad(i);
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (n, d, c) = (sa[0], sa[1], sb[0]);
                let ad = self.value(a).data().to_vec();
                let bd = self.value(b).data().to_vec();
                let mut da = vec![0.0f32; n * d];
                parallel::for_each_chunk_mut(&mut da, d, |ni, row| {
                    for ci in 0..c {
                        let gv = g[ni * c + ci];
                        if gv != 0.0 {
                            let brow = &bd[ci * d..(ci + 1) * d];
                            for (r, bv) in row.iter_mut().zip(brow) {
                                *r += gv * bv;
                            }
                        }
                    }
                });
                let mut db = vec![0.0f32; c * d];
                parallel::for_each_chunk_mut(&mut db, d, |ci, row| {
                    for ni in 0..n {
                        let gv = g[ni * c + ci];
                        if gv != 0.0 {
                            let arow = &ad[ni * d..(ni + 1) * d];
                            for (r, av) in row.iter_mut().zip(arow) {
                                *r += gv * av;
                            }
                        }
                    }
                });
                self.add_grad(a, &da);
                self.add_grad(b, &db);
                Ok(())
            }
            Op::MarginScale { cos, labels, variant, s, m } => {
                let cos = *cos;
                let labels = labels.clone();
                let (variant, s, m) = (*variant, *s, *m);
                let g = self.take_grad(i);
                let cs = self.value(cos).shape().to_vec();
                let (n, c) = (cs[0], cs[1]);
                let cd = self.value(cos).data().to_vec();
                let mut dcos = vec![0.0f32; n * c];
                for ni in 0..n {
                    for ci in 0..c {
                        let idx = ni * c + ci;
                        let factor = if !labels.is_empty() && labels[ni] == ci {
                            s * margin_target_dcos(cd[idx], variant, m)
                        } else {
                            s
                        };
                        dcos[idx] = factor * g[idx];
                    }
                }
                self.add_grad(cos, &dcos);
                Ok(())
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                let g = self.take_grad(i)[0];
                let ls = self.value(logits).shape().to_vec();
                let (n, c) = (ls[0], ls[1]);
                let ld = self.value(logits).data().to_vec();
                let mut dl = vec![0.0f32; n * c];
                let scale = g / n as f32;
                for ni in 0..n {
                    let row = &ld[ni * c..(ni + 1) * c];
                    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let denom: f64 = row.iter().map(|&v| ((v - mx) as f64).exp()).sum();
                    for ci in 0..c {
                        let p = (((row[ci] - mx) as f64).exp() / denom) as f32;
                        let onehot = if labels[ni] == ci { 1.0 } else { 0.0 };
                        dl[ni * c + ci] = (p - onehot) * scale;
                    }
                }
                self.add_grad(logits, &dl);
                Ok(())
            }
            Op::BceWithLogits { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let g = self.take_grad(i)[0];
                let ld = self.value(logits).data().to_vec();
                let n = ld.len();
                let scale = g / n as f32;
                let dl: Vec<f32> = ld
                    .iter()
                    .zip(&targets)
                    .map(|(&x, &t)| (sigmoid(x) - t) * scale)
                    .collect();
                self.add_grad(logits, &dl);
                Ok(())
            }
        }
    }

    fn conv2d_backward(&mut self, i: usize, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<()> {
        let g = self.take_grad(i);
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let os = self.nodes[i].value.shape().to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let col_rows = c * kh * kw;
        let col_cols = oh * ow;
        let wdat = self.value(w).data().to_vec();

        // d/dx: per-sample, gcols = W^T * gy, then col2im.
        let mut dx = vec![0.0f32; n * c * h * wd];
        parallel::for_each_chunk_mut(&mut dx, c * h * wd, |ni, dxs| {
            let gy = &g[ni * o * col_cols..(ni + 1) * o * col_cols];
            let mut gcols = vec![0.0f32; col_rows * col_cols];
            // gcols[k, m] = sum_o w[o, k] * gy[o, m]
            for oi in 0..o {
                let gyo = &gy[oi * col_cols..(oi + 1) * col_cols];
                for k in 0..col_rows {
                    let wv = wdat[oi * col_rows + k];
                    if wv != 0.0 {
                        let row = &mut gcols[k * col_cols..(k + 1) * col_cols];
                        for (r, gv) in row.iter_mut().zip(gyo) {
                            *r += wv * gv;
                        }
                    }
                }
            }
            col2im(&gcols, c, h, wd, kh, kw, stride, pad, oh, ow, dxs);
        });
        self.add_grad(x, &dx);

        // d/dw: per output channel, summed over samples in fixed order.
        let cols = match &self.nodes[i].op {
            Op::Conv2d { cols, .. } => cols,
            _ => unreachable!(),
        };
        let mut dw = vec![0.0f32; o * col_rows];
        {
            let cols = &cols[..];
            let g = &g[..];
            parallel::for_each_chunk_mut(&mut dw, col_rows, |oi, dwo| {
                for ni in 0..n {
                    let gyo = &g[(ni * o + oi) * col_cols..(ni * o + oi + 1) * col_cols];
                    let colsn = &cols[ni * col_rows * col_cols..(ni + 1) * col_rows * col_cols];
                    for (k, d) in dwo.iter_mut().enumerate() {
                        *d += dot(gyo, &colsn[k * col_cols..(k + 1) * col_cols]);
                    }
                }
            });
        }
        self.add_grad(w, &dw);
        Ok(())
    }

    fn linear_backward(&mut self, i: usize, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<()> {
        let g = self.take_grad(i);
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, d) = (xs[0], xs[1]);
        let m = ws[1];
        let xd = self.value(x).data().to_vec();
        let wd = self.value(w).data().to_vec();

        let mut dx = vec![0.0f32; n * d];
        parallel::for_each_chunk_mut(&mut dx, d, |ni, row| {
            let grow = &g[ni * m..(ni + 1) * m];
            for (di, r) in row.iter_mut().enumerate() {
                *r = dot(grow, &wd[di * m..(di + 1) * m]);
            }
        });
        self.add_grad(x, &dx);

        let mut dwg = vec![0.0f32; d * m];
        parallel::for_each_chunk_mut(&mut dwg, m, |di, row| {
            for ni in 0..n {
                let a = xd[ni * d + di];
                if a != 0.0 {
                    let grow = &g[ni * m..(ni + 1) * m];
                    for (r, gv) in row.iter_mut().zip(grow) {
                        *r += a * gv;
                    }
                }
            }
        });
        self.add_grad(w, &dwg);

        if let Some(bn) = b {
            let mut db = vec![0.0f32; m];
            for ni in 0..n {
                for (dbi, gv) in db.iter_mut().zip(&g[ni * m..(ni + 1) * m]) {
                    *dbi += gv;
                }
            }
            self.add_grad(bn, &db);
        }
        Ok(())
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_log_sum_exp(row: &[f32]) -> f64 {
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
    s.ln() + mx
}

const COS_CLAMP: f32 = 1.0 - 1e-7;

fn margin_target(cos: f32, variant: MarginVariant, m: f32) -> f32 {
    match variant {
        MarginVariant::CosFace => cos - m,
        MarginVariant::ArcFace => {
            let c = cos.clamp(-COS_CLAMP, COS_CLAMP);
            // theta + m capped at pi, i.e. cos stays at -1 once theta >= pi - m.
            if c <= (std::f32::consts::PI - m).cos() {
                -1.0
            } else {
                let sin = (1.0 - c * c).sqrt();
                c * m.cos() - sin * m.sin()
            }
        }
    }
}

fn margin_target_dcos(cos: f32, variant: MarginVariant, m: f32) -> f32 {
    match variant {
        MarginVariant::CosFace => 1.0,
        MarginVariant::ArcFace => {
            let c = cos.clamp(-COS_CLAMP, COS_CLAMP);
            if c <= (std::f32::consts::PI - m).cos() || cos.abs() >= COS_CLAMP {
                0.0
            } else {
                let sin = (1.0 - c * c).sqrt();
                // d/dc [c*cos(m) - sqrt(1-c^2)*sin(m)] = cos(m) + c*sin(m)/sin(theta)
                m.cos() + c * m.sin() / sin.max(1e-12)
            }
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// C[m,n] += A[m,k] * B[k,n], all row-major.
fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for mi in 0..m {
        let crow = &mut c[mi * n..(mi + 1) * n];
        for ki in 0..k {
            let av = a[mi * k + ki];
            if av != 0.0 {
                let brow = &b[ki * n..(ki + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    let col_cols = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * col_cols..(row + 1) * col_cols];
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        dst[oi * ow..(oi + 1) * ow].fill(0.0);
                        continue;
                    }
                    let src_row = (ci * h + ih as usize) * w;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        dst[oi * ow + oj] = if iw < 0 || iw >= w as isize {
                            0.0
                        } else {
                            input[src_row + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let col_cols = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * col_cols..(row + 1) * col_cols];
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + ih as usize) * w;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            out[dst_row + iw as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()));
        let w = tape.input(t(vec![1, 1, 1, 1], vec![1.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_hand_cross_correlation() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.input(t(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_output_shape_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![2, 6, 32, 32]));
        let w = tape.input(Tensor::zeros(vec![8, 6, 3, 3]));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 16, 16]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![1, 3, 8, 8]));
        let w = tape.input(Tensor::zeros(vec![4, 2, 3, 3]));
        let err = tape.conv2d(x, w, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 channels") && msg.contains("2"), "diagnostic: {msg}");
    }

    #[test]
    fn prelu_pointwise_values() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![1, 1, 1, 3], vec![5.0, -4.0, 0.0]));
        let s = tape.input(t(vec![1], vec![0.25]));
        let y = tape.prelu(x, s).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -1.0, 0.0]);
    }

    #[test]
    fn prelu_rejects_slope_mismatch() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![1, 4, 2, 2]));
        let s = tape.input(Tensor::zeros(vec![3]));
        assert!(tape.prelu(x, s).is_err());
    }

    #[test]
    fn linear_identity_and_hand_matmul() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![1, 2], vec![1.0, 2.0]));
        let eye = tape.input(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = tape.linear(x, eye, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w2 = tape.input(t(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]));
        let b = tape.input(t(vec![2], vec![1.0, 1.0]));
        let y2 = tape.linear(x, w2, Some(b)).unwrap();
        assert_eq!(tape.value(y2).data(), &[3.0, 5.0]);
    }

    #[test]
    fn linear_shape() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![4, 64]));
        let w = tape.input(Tensor::zeros(vec![64, 10]));
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 10]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![3], vec![1.0, 2.0, 3.0]));
        let sq = tape.square(x);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![2], vec![1.0, 2.0]));
        let y = tape.square(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_twice_accumulates_in_store() {
        let mut store = ParamStore::new();
        let pid = store.add("x", t(vec![3], vec![1.0, 2.0, 3.0]), false);
        let mut tape = Tape::new();
        let x = tape.param(&store, pid);
        let sq = tape.square(x);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        tape.accumulate_into(&mut store);
        tape.backward(loss).unwrap();
        tape.accumulate_into(&mut store);
        assert_eq!(store.get(pid).grad().unwrap(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::zeros(vec![2, 5]));
        let loss = tape.cross_entropy(logits, &[0, 3]).unwrap();
        let expected = (5.0f32).ln();
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_logits_small_loss() {
        let mut tape = Tape::new();
        let logits = tape.input(t(vec![1, 3], vec![30.0, 0.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_by_hand() {
        let vals = [0.3f32, -1.2, 2.1];
        let mut tape = Tape::new();
        let logits = tape.input(t(vec![1, 3], vals.to_vec()));
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        let lse = (vals.iter().map(|&v| (v as f64).exp()).sum::<f64>()).ln();
        let expected = (lse - vals[1] as f64) as f32;
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn margin_zero_makes_variants_identical() {
        let mut tape = Tape::new();
        let cos = tape.input(t(vec![2, 3], vec![0.9, -0.2, 0.4, 0.0, 0.99, -0.7]));
        let a = tape.margin_scale(cos, Some(&[0, 1]), MarginVariant::CosFace, 16.0, 0.0).unwrap();
        let b = tape.margin_scale(cos, Some(&[0, 1]), MarginVariant::ArcFace, 16.0, 0.0).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn cosface_aligned_target_logit() {
        // cos(theta)=1, s=16, m=0.35 -> 16 * 0.65 = 10.4
        let mut tape = Tape::new();
        let cos = tape.input(t(vec![1, 2], vec![1.0, 0.0]));
        let out = tape.margin_scale(cos, Some(&[0]), MarginVariant::CosFace, 16.0, 0.35).unwrap();
        let d = tape.value(out).data();
        assert!((d[0] - 10.4).abs() < 1e-5);
        assert_eq!(d[1], 0.0, "orthogonal class keeps zero logit");
    }

    #[test]
    fn margin_inference_mode_scales_everything() {
        let mut tape = Tape::new();
        let cos = tape.input(t(vec![1, 3], vec![0.5, -0.5, 1.0]));
        let out = tape.margin_scale(cos, None, MarginVariant::ArcFace, 8.0, 0.5).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, -4.0, 8.0]);
    }

    #[test]
    fn margin_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let cos = tape.input(Tensor::zeros(vec![1, 3]));
        assert!(tape.margin_scale(cos, Some(&[3]), MarginVariant::CosFace, 16.0, 0.35).is_err());
    }

    #[test]
    fn bce_with_logits_sanity() {
        let mut tape = Tape::new();
        let logits = tape.input(t(vec![2], vec![0.0, 0.0]));
        let loss = tape.bce_with_logits(logits, &[1.0, 0.0]).unwrap();
        let expected = (2.0f32).ln(); // -ln(0.5)
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn upsample_then_pool_roundtrip_shapes() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![1, 2, 2, 2], (0..8).map(|v| v as f32).collect()));
        let up = tape.upsample2x(x).unwrap();
        assert_eq!(tape.value(up).shape(), &[1, 2, 4, 4]);
        assert_eq!(tape.value(up).data()[0], 0.0);
        assert_eq!(tape.value(up).data()[1], 0.0);
        let pooled = tape.global_avg_pool(up).unwrap();
        let orig = tape.global_avg_pool(x).unwrap();
        for (a, b) in tape.value(pooled).data().iter().zip(tape.value(orig).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn row_normalize_gives_unit_rows() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![2, 2], vec![3.0, 4.0, 0.5, 0.0]));
        let y = tape.row_normalize(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-6 && (d[1] - 0.8).abs() < 1e-6);
        assert!((d[2] - 1.0).abs() < 1e-6 && d[3].abs() < 1e-9);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(t(vec![2, 3, 8, 8], (0..384).map(|v| (v as f32).sin()).collect()));
            let w = tape.input(t(vec![4, 3, 3, 3], (0..108).map(|v| (v as f32).cos()).collect()));
            let y = tape.conv2d(x, w, 2, 1).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
