//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! Every operation appends a node to the [`Tape`]; node order is creation
//! order, which is already a topological order. [`Tape::backward`] walks the
//! tape in reverse once and accumulates gradients into the leaves that were
//! registered with `requires_grad`. A fresh tape is built for every training
//! step; dropping it releases all intermediate values.

mod conv;
mod gradcheck;

use std::sync::Arc;

pub use conv::conv_out_extent;
pub use gradcheck::{gradcheck, gradcheck_many, gradcheck_mixed, GradcheckReport, ScalarFn};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use conv::{conv2d_backward, conv2d_forward, ConvGeom};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics, left untouched.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { momentum: 0.9, epsilon: 1e-5 }
    }
}

type UnaryDerivative<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

enum Op<T> {
    Leaf,
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// Inputs: x, gamma, beta. `xhat` is the normalized input.
    BatchNormTrain {
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Inputs: x, gamma, beta. Running statistics are constants.
    BatchNormEval {
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu,
    LeakyRelu(T),
    Concat {
        axis: usize,
    },
    Add,
    Sub,
    MulScalar(T),
    AddScalar,
    Square,
    Abs,
    Softplus,
    MeanAll,
    SumAll,
    ReflectPad,
    Crop {
        top: usize,
        left: usize,
    },
    /// Offset of the slice into the input's flat storage.
    BatchSlice {
        offset: usize,
    },
    CustomUnary(UnaryDerivative<T>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Op<T>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers a leaf without copying its storage.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.push_raw(Node { value, requires_grad, inputs: Vec::new(), op: Op::Leaf })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// New constant leaf holding the current value of `v`; no gradient flows
    /// back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.leaf_shared(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient accumulated into a `requires_grad` leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_raw(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: Vec<Var>, op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if requires_grad {
            self.push_raw(Node { value: Arc::new(value), requires_grad, inputs, op })
        } else {
            self.leaf(value, false)
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    // ---- operations ---------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let g = ConvGeom::new(self.value(x).shape(), self.value(weight).shape(), stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [g.cout] {
                return Err(Error::dim(format!(
                    "conv2d bias must have shape [{}], got {:?}",
                    g.cout,
                    self.value(b).shape()
                )));
            }
        }
        let out = conv2d_forward(&g, self.value(x), self.value(weight), bias.map(|b| self.value(b)));
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, inputs, Op::Conv2d { stride, padding }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: NormMode,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        if cfg.epsilon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::contract("batch_norm epsilon must be positive"));
        }
        let [n, c, h, w] = self.value(x).dims4()?;
        for (name, t) in [
            ("gamma", self.value(gamma).shape()),
            ("beta", self.value(beta).shape()),
            ("running_mean", running_mean.shape()),
            ("running_var", running_var.shape()),
        ] {
            if t != [c] {
                return Err(Error::dim(format!("batch_norm {name}: expected [{c}], got {t:?}")));
            }
        }
        let hw = h * w;
        let count = (n * hw) as f64;
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![T::zero(); xs.len()];
        let eps = cfg.epsilon;
        match mode {
            NormMode::Train => {
                let mut xhat = vec![T::zero(); xs.len()];
                let mut inv_std = vec![T::zero(); c];
                for ch in 0..c {
                    let plane = |ni: usize| &xs[(ni * c + ch) * hw..(ni * c + ch + 1) * hw];
                    let mut sum = 0.0f64;
                    for ni in 0..n {
                        sum += plane(ni).iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0f64;
                    for ni in 0..n {
                        sq += plane(ni).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                    }
                    let var = sq / count;
                    let istd = 1.0 / (var + eps).sqrt();
                    inv_std[ch] = T::from_f64(istd);
                    let mean_t = T::from_f64(mean);
                    for ni in 0..n {
                        let off = (ni * c + ch) * hw;
                        for i in off..off + hw {
                            let xh = (xs[i] - mean_t) * inv_std[ch];
                            xhat[i] = xh;
                            out[i] = gs[ch] * xh + bs[ch];
                        }
                    }
                    let m = cfg.momentum;
                    let rm = &mut running_mean.data_mut()[ch];
                    *rm = T::from_f64(m * rm.as_f64() + (1.0 - m) * mean);
                    let rv = &mut running_var.data_mut()[ch];
                    *rv = T::from_f64(m * rv.as_f64() + (1.0 - m) * var);
                }
                let out = Tensor::new([n, c, h, w], out)?;
                Ok(self.push(out, vec![x, gamma, beta], Op::BatchNormTrain { xhat, inv_std }))
            }
            NormMode::Eval => {
                let mean: Vec<T> = running_mean.data().to_vec();
                let inv_std: Vec<T> =
                    running_var.data().iter().map(|v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt())).collect();
                for ni in 0..n {
                    for ch in 0..c {
                        let off = (ni * c + ch) * hw;
                        for i in off..off + hw {
                            out[i] = gs[ch] * (xs[i] - mean[ch]) * inv_std[ch] + bs[ch];
                        }
                    }
                }
                let out = Tensor::new([n, c, h, w], out)?;
                Ok(self.push(out, vec![x, gamma, beta], Op::BatchNormEval { mean, inv_std }))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, vec![x], Op::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { slope * v });
        self.push(out, vec![x], Op::LeakyRelu(slope))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            let agrees =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::dim(format!("concat along axis {axis}: shape {s:?} incompatible with {base:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, xs.to_vec(), Op::Concat { axis }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(out, vec![a, b], Op::Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(out, vec![a, b], Op::Sub))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, vec![x], Op::MulScalar(s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, vec![x], Op::AddScalar)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, vec![x], Op::Square)
    }

    pub fn abs_val(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, vec![x], Op::Abs)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, vec![x], Op::Softplus)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let sum: f64 = t.data().iter().map(|v| v.as_f64()).sum();
        let out = Tensor::scalar(T::from_f64(sum / t.numel() as f64));
        Ok(self.push(out, vec![x], Op::MeanAll))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let sum: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(sum)), vec![x], Op::SumAll)
    }

    /// Reflects an NCHW tensor across its bottom and right edges, excluding
    /// the edge pixel itself.
    pub fn reflect_pad(&mut self, x: Var, bottom: usize, right: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if bottom >= h.max(1) || right >= w.max(1) {
            return Err(Error::dim(format!(
                "reflect padding ({bottom},{right}) must be smaller than extents ({h},{w})"
            )));
        }
        let (ho, wo) = (h + bottom, w + right);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                let sy = reflect_index(y, h);
                for xx in 0..wo {
                    data.push(plane[sy * w + reflect_index(xx, w)]);
                }
            }
        }
        let out = Tensor::new([n, c, ho, wo], data)?;
        Ok(self.push(out, vec![x], Op::ReflectPad))
    }

    /// Spatial window `[top..top+height, left..left+width]` of an NCHW tensor.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if top + height > h || left + width > w || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "crop window {height}x{width} at ({top},{left}) exceeds extents ({h},{w})"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * height * width);
        for p in 0..n * c {
            for y in top..top + height {
                let row = (p * h + y) * w;
                data.extend_from_slice(&src[row + left..row + left + width]);
            }
        }
        let out = Tensor::new([n, c, height, width], data)?;
        Ok(self.push(out, vec![x], Op::Crop { top, left }))
    }

    /// Samples `start..start+len` along the leading axis.
    pub fn batch_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = *shape.first().ok_or_else(|| Error::dim("batch_slice of a scalar"))?;
        if len == 0 || start + len > n {
            return Err(Error::dim(format!("batch slice {start}..{} exceeds leading extent {n}", start + len)));
        }
        let inner: usize = shape[1..].iter().product();
        let offset = start * inner;
        let data = self.value(x).data()[offset..offset + len * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, vec![x], Op::BatchSlice { offset }))
    }

    /// Elementwise `f` with a caller-supplied derivative `df`. The derivative
    /// is trusted as given, which lets tests plant deliberately wrong rules.
    pub fn custom_unary(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T + Send + Sync + 'static) -> Var {
        let out = self.value(x).map(f);
        self.push(out, vec![x], Op::CustomUnary(Arc::new(df)))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Accumulates `d(loss)/d(leaf)` into every `requires_grad` leaf that is an
    /// ancestor of `loss`. Calling it again without [`Tape::zero_grad`] adds to
    /// the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a single-element loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.grads[i], g);
                continue;
            }
            let input_grads = self.input_grads(i, &g);
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    accumulate(&mut adj[v.0], ig);
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[i];
        let needs = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let val = |k: usize| &*self.nodes[node.inputs[k].0].value;
        let map_in = |k: usize, f: &dyn Fn(T, T) -> T| -> Option<Vec<T>> {
            needs(k).then(|| val(k).data().iter().zip(g).map(|(&x, &gy)| f(x, gy)).collect())
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { stride, padding } => {
                let geom = ConvGeom::new(val(0).shape(), val(1).shape(), *stride, *padding)
                    .expect("geometry validated in forward");
                let has_bias = node.inputs.len() == 3;
                let grads = conv2d_backward(&geom, val(0), val(1), g, [needs(0), needs(1), has_bias && needs(2)]);
                let mut out = vec![grads.dx, grads.dw];
                if has_bias {
                    out.push(grads.db);
                }
                out
            }
            Op::BatchNormTrain { xhat, inv_std } => {
                let [n, c, h, w] = val(0).dims4().expect("validated");
                let hw = h * w;
                let count = T::from_f64((n * hw) as f64);
                let gamma = val(1).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                    for ni in 0..n {
                        let off = (ni * c + ch) * hw;
                        for k in off..off + hw {
                            sg += g[k].as_f64();
                            sgx += (g[k] * xhat[k]).as_f64();
                        }
                    }
                    dbeta[ch] = T::from_f64(sg);
                    dgamma[ch] = T::from_f64(sgx);
                }
                let dx = needs(0).then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    for ch in 0..c {
                        let scale = gamma[ch] * inv_std[ch] / count;
                        for ni in 0..n {
                            let off = (ni * c + ch) * hw;
                            for k in off..off + hw {
                                dx[k] = scale * (count * g[k] - dbeta[ch] - xhat[k] * dgamma[ch]);
                            }
                        }
                    }
                    dx
                });
                vec![dx, needs(1).then_some(dgamma), needs(2).then_some(dbeta)]
            }
            Op::BatchNormEval { mean, inv_std } => {
                let [n, c, h, w] = val(0).dims4().expect("validated");
                let hw = h * w;
                let xs = val(0).data();
                let gamma = val(1).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                for ni in 0..n {
                    for ch in 0..c {
                        let off = (ni * c + ch) * hw;
                        for k in off..off + hw {
                            let xh = (xs[k] - mean[ch]) * inv_std[ch];
                            dbeta[ch] = dbeta[ch] + g[k];
                            dgamma[ch] = dgamma[ch] + g[k] * xh;
                            dx[k] = g[k] * gamma[ch] * inv_std[ch];
                        }
                    }
                }
                vec![needs(0).then_some(dx), needs(1).then_some(dgamma), needs(2).then_some(dbeta)]
            }
            Op::Relu => vec![map_in(0, &|x, gy| if x > T::zero() { gy } else { T::zero() })],
            Op::LeakyRelu(s) => {
                let s = *s;
                vec![map_in(0, &|x, gy| if x > T::zero() { gy } else { s * gy })]
            }
            Op::Concat { axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                node.inputs
                    .iter()
                    .enumerate()
                    .map(|(k, _)| {
                        let chunk = val(k).shape()[*axis] * inner;
                        let res = needs(k).then(|| {
                            let mut d = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                let start = o * total + offset;
                                d.extend_from_slice(&g[start..start + chunk]);
                            }
                            d
                        });
                        offset += chunk;
                        res
                    })
                    .collect()
            }
            Op::Add => vec![needs(0).then(|| g.to_vec()), needs(1).then(|| g.to_vec())],
            Op::Sub => vec![needs(0).then(|| g.to_vec()), needs(1).then(|| g.iter().map(|&v| -v).collect())],
            Op::MulScalar(s) => {
                let s = *s;
                vec![needs(0).then(|| g.iter().map(|&v| v * s).collect())]
            }
            Op::AddScalar => vec![needs(0).then(|| g.to_vec())],
            Op::Square => {
                let two = T::from_f64(2.0);
                vec![map_in(0, &|x, gy| two * x * gy)]
            }
            Op::Abs => vec![map_in(0, &|x, gy| {
                if x > T::zero() {
                    gy
                } else if x < T::zero() {
                    -gy
                } else {
                    T::zero()
                }
            })],
            Op::Softplus => vec![map_in(0, &|x, gy| gy * sigmoid(x))],
            Op::MeanAll => {
                let n = val(0).numel();
                let share = T::from_f64(g[0].as_f64() / n as f64);
                vec![needs(0).then(|| vec![share; n])]
            }
            Op::SumAll => vec![needs(0).then(|| vec![g[0]; val(0).numel()])],
            Op::ReflectPad => {
                let [n, c, h, w] = val(0).dims4().expect("validated");
                let [_, _, ho, wo] = node.value.dims4().expect("validated");
                vec![needs(0).then(|| {
                    let mut d = vec![T::zero(); n * c * h * w];
                    for p in 0..n * c {
                        for y in 0..ho {
                            let sy = reflect_index(y, h);
                            for x in 0..wo {
                                let k = p * h * w + sy * w + reflect_index(x, w);
                                d[k] = d[k] + g[(p * ho + y) * wo + x];
                            }
                        }
                    }
                    d
                })]
            }
            Op::Crop { top, left } => {
                let [n, c, h, w] = val(0).dims4().expect("validated");
                let [_, _, ch, cw] = node.value.dims4().expect("validated");
                vec![needs(0).then(|| {
                    let mut d = vec![T::zero(); n * c * h * w];
                    for p in 0..n * c {
                        for y in 0..ch {
                            let dst = (p * h + top + y) * w + left;
                            d[dst..dst + cw].copy_from_slice(&g[(p * ch + y) * cw..(p * ch + y + 1) * cw]);
                        }
                    }
                    d
                })]
            }
            Op::BatchSlice { offset } => vec![needs(0).then(|| {
                let mut d = vec![T::zero(); val(0).numel()];
                d[*offset..*offset + g.len()].copy_from_slice(g);
                d
            })],
            Op::CustomUnary(df) => vec![map_in(0, &|x, gy| gy * df(x))],
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    // max(x,0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests;
