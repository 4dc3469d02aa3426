//! Eager computation graph with reverse-mode differentiation.
//!
//! Operations compute their value immediately and record a backward closure.
//! Node indices grow monotonically and parents always precede children, so
//! creation order is a topological order and the backward pass is a single
//! reverse sweep that visits each node exactly once. A graph is confined to
//! one thread for its build/forward/backward lifetime; distinct graphs may
//! run on distinct threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{mm_nn, mm_nt, mm_tn, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Forward-pass regime. Affects batch normalization (batch vs. running
/// statistics) and dropout (active vs. identity).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running first/second moments of a batch-normalized layer, one value per
/// channel. Updated by exponential moving average in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

impl<F: Real> BatchNormState<F> {
    /// Fresh state: mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        BatchNormState {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }

    pub fn cast<G: Real>(&self) -> BatchNormState<G> {
        BatchNormState {
            mean: self.mean.cast(),
            var: self.var.cast(),
        }
    }
}

/// Temporal padding policy for 1D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `t_out = ceil(t_in / stride)`; when the total
    /// padding is odd the extra element goes on the right.
    Same,
    /// No padding; requires `kernel <= t_in`.
    Valid,
}

type BackwardFn<F> = Box<dyn Fn(&[&Tensor<F>], &Tensor<F>, &Tensor<F>) -> Vec<Tensor<F>>>;

struct Node<F: Real> {
    value: Tensor<F>,
    parents: Vec<NodeId>,
    requires_grad: bool,
    // Called as (parent values, own value, upstream grad) -> parent grads.
    backward: Option<BackwardFn<F>>,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    mode: Mode,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node that is known to participate in the loss.
    pub fn expect(&self, id: NodeId) -> &Tensor<F> {
        self.grads[id.0]
            .as_ref()
            .expect("no gradient recorded for node")
    }
}

impl<F: Real> Graph<F> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push_unchecked(value, vec![], false, None)
    }

    /// Leaf that accumulates gradients (a learnable parameter or an input
    /// under test).
    pub fn param(&mut self, value: Tensor<F>) -> NodeId {
        self.push_unchecked(value, vec![], true, None)
    }

    fn push_unchecked(
        &mut self,
        value: Tensor<F>,
        parents: Vec<NodeId>,
        requires_grad: bool,
        backward: Option<BackwardFn<F>>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        debug_assert!(parents.iter().all(|p| p.0 < id.0), "graph must stay acyclic");
        self.nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        id
    }

    /// Records an op node: validates finiteness and wires gradient flow only
    /// when some parent needs it.
    fn push_op(
        &mut self,
        ctx: &str,
        value: Tensor<F>,
        parents: Vec<NodeId>,
        backward: BackwardFn<F>,
    ) -> Result<NodeId> {
        value.validate_finite(ctx)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        Ok(self.push_unchecked(value, parents, requires_grad, backward))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul wants rank-2 operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k) = (av.dim(0), av.dim(1));
        let (k2, n) = (bv.dim(0), bv.dim(1));
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        mm_nn(m, k, n, av.data(), bv.data(), out.data_mut());
        self.push_op(
            "matmul",
            out,
            vec![a, b],
            Box::new(move |parents, _value, grad| {
                let (av, bv) = (parents[0], parents[1]);
                let mut da = Tensor::zeros(&[m, k]);
                mm_nt(m, n, k, grad.data(), bv.data(), da.data_mut());
                let mut db = Tensor::zeros(&[k, n]);
                mm_tn(k, m, n, av.data(), grad.data(), db.data_mut());
                vec![da, db]
            }),
        )
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push_op(
            "add",
            out,
            vec![a, b],
            Box::new(|_, _, grad| vec![grad.clone(), grad.clone()]),
        )
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push_op(
            "mul",
            out,
            vec![a, b],
            Box::new(|parents, _, grad| {
                let (av, bv) = (parents[0], parents[1]);
                let da = grad
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                let db = grad
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                vec![
                    Tensor::new(av.shape().to_vec(), da).expect("mul backward"),
                    Tensor::new(bv.shape().to_vec(), db).expect("mul backward"),
                ]
            }),
        )
    }

    /// Adds a length-`f` bias vector to every row of `x` (last axis).
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let f = *xv.shape().last().unwrap();
        if bv.shape() != [f] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match last axis of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let rows = xv.len() / f;
        let mut out = xv.clone();
        for r in 0..rows {
            for c in 0..f {
                out.data_mut()[r * f + c] += bv.data()[c];
            }
        }
        self.push_op(
            "add_bias",
            out,
            vec![x, bias],
            Box::new(move |_, _, grad| {
                let mut db = Tensor::zeros(&[f]);
                for r in 0..rows {
                    for c in 0..f {
                        db.data_mut()[c] += grad.data()[r * f + c];
                    }
                }
                vec![grad.clone(), db]
            }),
        )
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: NodeId, factor: F) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * factor);
        self.push_op(
            "scale",
            out,
            vec![x],
            Box::new(move |_, _, grad| vec![grad.map(|g| g * factor)]),
        )
    }

    /// Fully connected layer: `x @ w + b`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Reinterprets a node under a new shape with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        let old_shape = xv.shape().to_vec();
        let out = xv.reshaped(shape)?;
        self.push_op(
            "reshape",
            out,
            vec![x],
            Box::new(move |_, _, grad| {
                vec![grad.reshaped(old_shape.clone()).expect("reshape backward")]
            }),
        )
    }

    /// Concatenates rank-2 tensors along axis 0; all must share the column
    /// count.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let cols = self.value(xs[0]).dim(1);
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rank() != 2 || v.dim(1) != cols {
                return Err(Error::Shape("concat_rows: incompatible shapes".into()));
            }
            rows += v.dim(0);
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let row_counts: Vec<usize> = xs.iter().map(|&x| self.value(x).dim(0)).collect();
        self.push_op(
            "concat_rows",
            out,
            xs.to_vec(),
            Box::new(move |_, _, grad| {
                let mut grads = Vec::with_capacity(row_counts.len());
                let mut offset = 0;
                for &r in &row_counts {
                    let chunk = grad.data()[offset * cols..(offset + r) * cols].to_vec();
                    grads.push(Tensor::new(vec![r, cols], chunk).expect("concat backward"));
                    offset += r;
                }
                grads
            }),
        )
    }

    // ── activations and elementwise maps ────────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push_op(
            "relu",
            out,
            vec![x],
            Box::new(|parents, _, grad| {
                let x = parents[0];
                let data = x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&xv, &g)| if xv > F::zero() { g } else { F::zero() })
                    .collect();
                vec![Tensor::new(x.shape().to_vec(), data).expect("relu backward")]
            }),
        )
    }

    pub fn tanh_act(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.tanh());
        self.push_op(
            "tanh",
            out,
            vec![x],
            Box::new(|_, value, grad| {
                let data = value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&y, &g)| g * (F::one() - y * y))
                    .collect();
                vec![Tensor::new(value.shape().to_vec(), data).expect("tanh backward")]
            }),
        )
    }

    /// Row-wise softmax of a rank-2 tensor; each output row sums to 1.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::Shape(format!(
                "softmax_rows wants rank 2, got {:?}",
                xv.shape()
            )));
        }
        let (n, c) = (xv.dim(0), xv.dim(1));
        let mut out = Tensor::zeros(&[n, c]);
        softmax_into(xv.data(), n, c, out.data_mut());
        self.push_op(
            "softmax",
            out,
            vec![x],
            Box::new(move |_, value, grad| {
                let y = value.data();
                let g = grad.data();
                let mut dx = vec![F::zero(); n * c];
                for r in 0..n {
                    let row = r * c;
                    let mut dot = F::zero();
                    for j in 0..c {
                        dot += g[row + j] * y[row + j];
                    }
                    for j in 0..c {
                        dx[row + j] = y[row + j] * (g[row + j] - dot);
                    }
                }
                vec![Tensor::new(vec![n, c], dx).expect("softmax backward")]
            }),
        )
    }

    /// Inverted dropout. Active only in train mode with `rate > 0`; in infer
    /// mode (or at rate 0) it is the identity map, bit-exact, and no node is
    /// recorded. Mask positions are drawn row-major from `rng`.
    pub fn dropout(&mut self, x: NodeId, rate: F, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if rate < F::zero() || rate >= F::one() {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if self.mode == Mode::Infer || rate == F::zero() {
            return Ok(x);
        }
        let keep = F::one() - rate;
        let keep_f64 = keep.into_f64();
        let inv_keep = F::one() / keep;
        let xv = self.value(x);
        let mask: Vec<F> = (0..xv.len())
            .map(|_| {
                if rng.gen::<f64>() < keep_f64 {
                    inv_keep
                } else {
                    F::zero()
                }
            })
            .collect();
        let data = xv
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_op(
            "dropout",
            out,
            vec![x],
            Box::new(move |parents, _, grad| {
                let data = grad
                    .data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(&g, &m)| g * m)
                    .collect();
                vec![Tensor::new(parents[0].shape().to_vec(), data).expect("dropout backward")]
            }),
        )
    }

    // ── convolution and pooling ─────────────────────────────────────────

    /// Batched temporal cross-correlation.
    ///
    /// `x` is `[n, t, c_in]`, `kernels` is `[k, c_in, c_out]`, `bias` is
    /// `[c_out]`. The activation is NOT fused; callers apply it separately.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(kernels);
        let bv = self.value(bias);
        if xv.rank() != 3 {
            return Err(Error::Shape(format!(
                "conv1d input must be [n,t,c_in], got {:?}",
                xv.shape()
            )));
        }
        if wv.rank() != 3 {
            return Err(Error::Shape(format!(
                "conv1d kernels must be [k,c_in,c_out], got {:?}",
                wv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        let (n, t, c_in) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (k, wc_in, c_out) = (wv.dim(0), wv.dim(1), wv.dim(2));
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv1d channel mismatch: input has {c_in}, kernels expect {wc_in}"
            )));
        }
        if bv.shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv1d bias shape {:?}, want [{c_out}]",
                bv.shape()
            )));
        }
        let (t_out, pad_left) = match padding {
            Padding::Same => {
                let t_out = t.div_ceil(stride);
                let total = ((t_out - 1) * stride + k).saturating_sub(t);
                (t_out, total / 2)
            }
            Padding::Valid => {
                if k > t {
                    return Err(Error::Shape(format!(
                        "conv1d with valid padding: kernel {k} exceeds input length {t} \
                         (empty output)"
                    )));
                }
                ((t - k) / stride + 1, 0)
            }
        };

        // im2col: one row per output position, columns ordered (k, c_in) to
        // match the kernel buffer layout, so the convolution is one GEMM.
        let kc = k * c_in;
        let mut xcol = vec![F::zero(); n * t_out * kc];
        let xd = xv.data();
        for s in 0..n {
            for to in 0..t_out {
                let row = (s * t_out + to) * kc;
                for dk in 0..k {
                    let ti = (to * stride + dk) as isize - pad_left as isize;
                    if ti >= 0 && (ti as usize) < t {
                        let src = (s * t + ti as usize) * c_in;
                        let dst = row + dk * c_in;
                        xcol[dst..dst + c_in].copy_from_slice(&xd[src..src + c_in]);
                    }
                }
            }
        }
        let mut y = vec![F::zero(); n * t_out * c_out];
        mm_nn(n * t_out, kc, c_out, &xcol, wv.data(), &mut y);
        for r in 0..n * t_out {
            for c in 0..c_out {
                y[r * c_out + c] += bv.data()[c];
            }
        }
        let out = Tensor::new(vec![n, t_out, c_out], y)?;

        self.push_op(
            "conv1d",
            out,
            vec![x, kernels, bias],
            Box::new(move |parents, _, grad| {
                let wv = parents[1];
                let g = grad.data();
                let rows = n * t_out;

                let mut db = Tensor::zeros(&[c_out]);
                for r in 0..rows {
                    for c in 0..c_out {
                        db.data_mut()[c] += g[r * c_out + c];
                    }
                }

                let mut dw = Tensor::zeros(&[k, c_in, c_out]);
                mm_tn(kc, rows, c_out, &xcol, g, dw.data_mut());

                let mut dxcol = vec![F::zero(); rows * kc];
                mm_nt(rows, c_out, kc, g, wv.data(), &mut dxcol);
                let mut dx = Tensor::zeros(&[n, t, c_in]);
                let dxd = dx.data_mut();
                for s in 0..n {
                    for to in 0..t_out {
                        let row = (s * t_out + to) * kc;
                        for dk in 0..k {
                            let ti = (to * stride + dk) as isize - pad_left as isize;
                            if ti >= 0 && (ti as usize) < t {
                                let dst = (s * t + ti as usize) * c_in;
                                let src = row + dk * c_in;
                                for c in 0..c_in {
                                    dxd[dst + c] += dxcol[src + c];
                                }
                            }
                        }
                    }
                }
                vec![dx, dw, db]
            }),
        )
    }

    /// Mean over the temporal axis: `[n, t, c] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::Shape(format!(
                "global_avg_pool wants [n,t,c], got {:?}",
                xv.shape()
            )));
        }
        let (n, t, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let inv_t = F::one() / F::from_f64(t as f64);
        let mut out = Tensor::zeros(&[n, c]);
        for s in 0..n {
            for ti in 0..t {
                for ch in 0..c {
                    out.data_mut()[s * c + ch] += xv.data()[(s * t + ti) * c + ch];
                }
            }
        }
        for v in out.data_mut() {
            *v *= inv_t;
        }
        self.push_op(
            "global_avg_pool",
            out,
            vec![x],
            Box::new(move |_, _, grad| {
                let mut dx = Tensor::zeros(&[n, t, c]);
                for s in 0..n {
                    for ti in 0..t {
                        for ch in 0..c {
                            dx.data_mut()[(s * t + ti) * c + ch] = grad.data()[s * c + ch] * inv_t;
                        }
                    }
                }
                vec![dx]
            }),
        )
    }

    /// Concatenates two `[n, t, c]` feature maps along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 {
            return Err(Error::Shape("concat_channels wants rank-3 inputs".into()));
        }
        let (n, t, c1) = (av.dim(0), av.dim(1), av.dim(2));
        let (n2, t2, c2) = (bv.dim(0), bv.dim(1), bv.dim(2));
        if n != n2 || t != t2 {
            return Err(Error::Shape(format!(
                "concat_channels leading dims disagree: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = Vec::with_capacity(n * t * (c1 + c2));
        for nt in 0..n * t {
            data.extend_from_slice(&av.data()[nt * c1..(nt + 1) * c1]);
            data.extend_from_slice(&bv.data()[nt * c2..(nt + 1) * c2]);
        }
        let out = Tensor::new(vec![n, t, c1 + c2], data)?;
        self.push_op(
            "concat_channels",
            out,
            vec![a, b],
            Box::new(move |_, _, grad| {
                let mut da = Tensor::zeros(&[n, t, c1]);
                let mut db = Tensor::zeros(&[n, t, c2]);
                let c = c1 + c2;
                for nt in 0..n * t {
                    da.data_mut()[nt * c1..(nt + 1) * c1]
                        .copy_from_slice(&grad.data()[nt * c..nt * c + c1]);
                    db.data_mut()[nt * c2..(nt + 1) * c2]
                        .copy_from_slice(&grad.data()[nt * c + c1..(nt + 1) * c]);
                }
                vec![da, db]
            }),
        )
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Batch normalization over all axes except the last (channels).
    ///
    /// Train mode normalizes with biased batch statistics and returns the
    /// updated running state (`running = momentum * running + (1 - momentum)
    /// * batch`); infer mode normalizes with the running statistics and
    /// returns `None`.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &BatchNormState<F>,
        eps: F,
        momentum: F,
    ) -> Result<(NodeId, Option<BatchNormState<F>>)> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        let m = xv.len() / c;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape("batchnorm gamma/beta must be [channels]".into()));
        }
        if state.mean.shape() != [c] || state.var.shape() != [c] {
            return Err(Error::Shape("batchnorm running state must be [channels]".into()));
        }

        let (mean, var, updated) = match self.mode {
            Mode::Train => {
                let inv_m = F::one() / F::from_f64(m as f64);
                let mut mean = vec![F::zero(); c];
                for r in 0..m {
                    for ch in 0..c {
                        mean[ch] += xv.data()[r * c + ch];
                    }
                }
                for v in &mut mean {
                    *v *= inv_m;
                }
                let mut var = vec![F::zero(); c];
                for r in 0..m {
                    for ch in 0..c {
                        let d = xv.data()[r * c + ch] - mean[ch];
                        var[ch] += d * d;
                    }
                }
                for v in &mut var {
                    *v *= inv_m;
                }
                if mean.iter().chain(var.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("batchnorm statistics are non-finite".into()));
                }
                let keep = momentum;
                let blend = F::one() - momentum;
                let mut new_state = state.clone();
                for ch in 0..c {
                    let nm = new_state.mean.data()[ch] * keep + mean[ch] * blend;
                    let nv = new_state.var.data()[ch] * keep + var[ch] * blend;
                    new_state.mean.data_mut()[ch] = nm;
                    new_state.var.data_mut()[ch] = nv;
                }
                (mean, var, Some(new_state))
            }
            Mode::Infer => (state.mean.data().to_vec(), state.var.data().to_vec(), None),
        };

        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![F::zero(); m * c];
        let mut y = vec![F::zero(); m * c];
        for r in 0..m {
            for ch in 0..c {
                let idx = r * c + ch;
                let h = (xv.data()[idx] - mean[ch]) * inv_std[ch];
                xhat[idx] = h;
                y[idx] = gv[ch] * h + bv[ch];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        let train = self.mode == Mode::Train;

        let id = self.push_op(
            "batchnorm",
            out,
            vec![x, gamma, beta],
            Box::new(move |parents, _, grad| {
                let g = grad.data();
                let gamma = parents[1].data();
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for r in 0..m {
                    for ch in 0..c {
                        let idx = r * c + ch;
                        dgamma.data_mut()[ch] += g[idx] * xhat[idx];
                        dbeta.data_mut()[ch] += g[idx];
                    }
                }
                let mut dx = Tensor::zeros(parents[0].shape());
                if train {
                    // Full backward through the batch statistics:
                    // dx = inv_std * gamma * (g - mean(g) - xhat * mean(g*xhat))
                    let inv_m = F::one() / F::from_f64(m as f64);
                    let mut mean_g = vec![F::zero(); c];
                    let mut mean_gx = vec![F::zero(); c];
                    for r in 0..m {
                        for ch in 0..c {
                            let idx = r * c + ch;
                            mean_g[ch] += g[idx];
                            mean_gx[ch] += g[idx] * xhat[idx];
                        }
                    }
                    for ch in 0..c {
                        mean_g[ch] *= inv_m;
                        mean_gx[ch] *= inv_m;
                    }
                    for r in 0..m {
                        for ch in 0..c {
                            let idx = r * c + ch;
                            dx.data_mut()[idx] = inv_std[ch]
                                * gamma[ch]
                                * (g[idx] - mean_g[ch] - xhat[idx] * mean_gx[ch]);
                        }
                    }
                } else {
                    for r in 0..m {
                        for ch in 0..c {
                            let idx = r * c + ch;
                            dx.data_mut()[idx] = g[idx] * gamma[ch] * inv_std[ch];
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
        )?;
        Ok((id, updated))
    }

    // ── aggregation and losses ──────────────────────────────────────────

    /// Attention-weighted sum of per-component encodings.
    ///
    /// `h` is `[n_objects * l, d]` (component encodings stacked object by
    /// object), `alpha` is `[n_objects, l]`; returns `[n_objects, d]` with
    /// `out[o] = sum_j alpha[o,j] * h[o*l + j]`.
    pub fn attention_pool(&mut self, h: NodeId, alpha: NodeId) -> Result<NodeId> {
        let (hv, av) = (self.value(h), self.value(alpha));
        if hv.rank() != 2 || av.rank() != 2 {
            return Err(Error::Shape("attention_pool wants rank-2 inputs".into()));
        }
        let (n_obj, l) = (av.dim(0), av.dim(1));
        let d = hv.dim(1);
        if hv.dim(0) != n_obj * l {
            return Err(Error::Shape(format!(
                "attention_pool: {} encodings cannot cover {n_obj} objects x {l} components",
                hv.dim(0)
            )));
        }
        let mut out = Tensor::zeros(&[n_obj, d]);
        for o in 0..n_obj {
            for j in 0..l {
                let w = av.data()[o * l + j];
                let src = (o * l + j) * d;
                for di in 0..d {
                    out.data_mut()[o * d + di] += w * hv.data()[src + di];
                }
            }
        }
        self.push_op(
            "attention_pool",
            out,
            vec![h, alpha],
            Box::new(move |parents, _, grad| {
                let (hv, av) = (parents[0], parents[1]);
                let mut dh = Tensor::zeros(&[n_obj * l, d]);
                let mut dalpha = Tensor::zeros(&[n_obj, l]);
                for o in 0..n_obj {
                    for j in 0..l {
                        let row = (o * l + j) * d;
                        let w = av.data()[o * l + j];
                        let mut dot = F::zero();
                        for di in 0..d {
                            let go = grad.data()[o * d + di];
                            dot += go * hv.data()[row + di];
                            dh.data_mut()[row + di] = w * go;
                        }
                        dalpha.data_mut()[o * l + j] = dot;
                    }
                }
                vec![dh, dalpha]
            }),
        )
    }

    /// Mean categorical cross-entropy between raw logits `[n, c]` and class
    /// indices, computed through the log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(Error::Shape(format!(
                "cross_entropy wants [n, classes], got {:?}",
                lv.shape()
            )));
        }
        let (n, c) = (lv.dim(0), lv.dim(1));
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "cross_entropy: {n} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!(
                "cross_entropy: label index {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![F::zero(); n * c];
        softmax_into(lv.data(), n, c, &mut probs);
        let inv_n = F::one() / F::from_f64(n as f64);
        let mut loss = F::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
            loss += lse - row[y];
        }
        loss *= inv_n;
        let labels = labels.to_vec();
        self.push_op(
            "cross_entropy",
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |_, _, grad| {
                let scale = grad.item() * inv_n;
                let mut dz = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    dz[r * c + y] -= F::one();
                }
                for v in &mut dz {
                    *v *= scale;
                }
                vec![Tensor::new(vec![n, c], dz).expect("cross_entropy backward")]
            }),
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let total = xv.data().iter().cloned().sum();
        let shape = xv.shape().to_vec();
        self.push_op(
            "sum_all",
            Tensor::scalar(total),
            vec![x],
            Box::new(move |_, _, grad| vec![Tensor::full(&shape, grad.item())]),
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns the gradient of the loss
    /// with respect to every node that requires one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if grads[i].is_none() || !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue; // leaf: keep its accumulated gradient
            };
            let parent_values: Vec<&Tensor<F>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let grad = grads[i].as_ref().unwrap();
            let parent_grads = backward(&parent_values, &node.value, grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                if !pg.is_finite() {
                    return Err(Error::Numeric("non-finite gradient in backward pass".into()));
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn softmax_into<F: Real>(z: &[F], n: usize, c: usize, out: &mut [F]) {
    for r in 0..n {
        let row = &z[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[r * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[r * c + j] /= sum;
        }
    }
}
