//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] lives for one forward/backward pass. Parameters are pulled in
//! from a [`ParamStore`]; parameters of a frozen store enter as constants, so
//! no gradient can ever be produced for them.

use std::collections::{BTreeMap, HashMap};

use crate::conv::{self, ConvGeometry, ConvShapes};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Ln(Var),
    Clamp(Var, T, T),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    SmoothL1(Var, T),
    Sum(Var),
    Mean(Var),
    InstanceNorm { x: Var, inv_std: Vec<T> },
    AvgPool2(Var),
    ConcatChannels(Var, Var),
    NarrowChannels { x: Var, start: usize },
    Reshape(Var),
    MaskedSpatialMean { x: Var, mask: Vec<T>, mask_sum: T },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<Option<usize>>, count: usize },
    BceWithLogits { logits: Var, targets: Vec<T>, weights: Vec<T>, total_weight: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph over element type `T`.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    param_cache: HashMap<(u64, ParamId), Var>,
    param_nodes: Vec<(Var, u64, ParamId)>,
    detached_stores: Vec<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_cache: HashMap::new(), param_nodes: Vec::new(), detached_stores: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives gradients.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bring a stored parameter into the graph. Repeated calls with the same
    /// parameter return the same node, so tied weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let value = store.get(id).clone();
        let var = if store.is_frozen() || self.detached_stores.contains(&store.uid()) {
            self.constant(value)
        } else {
            let v = self.leaf(value);
            self.param_nodes.push((v, store.uid(), id));
            v
        };
        self.param_cache.insert(key, var);
        var
    }

    /// Treat every parameter of `store` as a constant in this graph. Must be
    /// called before any of its parameters are pulled in.
    pub fn detach_store(&mut self, store: &ParamStore<T>) {
        assert!(
            !self.param_nodes.iter().any(|(_, uid, _)| *uid == store.uid()),
            "detach_store called after parameters were used"
        );
        self.detached_stores.push(store.uid());
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Huber-style smooth L1 with transition point `beta`.
    pub fn smooth_l1(&mut self, a: Var, beta: T) -> Var {
        let half = T::lit(0.5);
        self.unary(a, Op::SmoothL1(a, beta), |x| {
            let ax = x.abs();
            if ax < beta {
                half * x * x / beta
            } else {
                ax - half * beta
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        assert!(!self.value(a).is_empty(), "mean of empty tensor");
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Sum of several same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let (&first, rest) = vars.split_first().expect("add_all of nothing");
        rest.iter().fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Var {
        let shapes = self.conv_shapes(x, w, stride, padding);
        let value = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &shapes,
        );
        let shape = [shapes.batch, shapes.out_channels, shapes.out_h, shapes.out_w];
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let t = Tensor::new(shape.to_vec(), value).expect("conv output size");
        self.push(t, Op::Conv2d { x, w, b, stride, padding }, rg)
    }

    fn conv_shapes(&self, x: Var, w: Var, stride: usize, padding: usize) -> ConvShapes {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape();
        assert!(ws.len() == 4 && ws[1] == c && ws[2] == ws[3], "conv weight {ws:?} vs input channels {c}");
        let geom = ConvGeometry { channels: c, height: h, width: wd, kernel: ws[2], stride, padding };
        let (out_h, out_w) = geom
            .output_size()
            .unwrap_or_else(|| panic!("conv kernel {} does not fit input {h}x{wd}", ws[2]));
        ConvShapes { batch: n, geom, out_channels: ws[0], out_h, out_w }
    }

    fn conv_t_shapes(&self, x: Var, w: Var, stride: usize, padding: usize) -> (ConvShapes, usize) {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape();
        assert!(ws.len() == 4 && ws[0] == c && ws[2] == ws[3], "conv_t weight {ws:?} vs input channels {c}");
        let k = ws[2];
        let oh = (h - 1) * stride + k;
        let ow = (wd - 1) * stride + k;
        assert!(oh > 2 * padding && ow > 2 * padding, "transposed conv padding too large");
        let geom = ConvGeometry {
            channels: ws[1],
            height: oh - 2 * padding,
            width: ow - 2 * padding,
            kernel: k,
            stride,
            padding,
        };
        debug_assert_eq!(geom.output_size(), Some((h, wd)));
        (ConvShapes { batch: n, geom, out_channels: c, out_h: h, out_w: wd }, c)
    }

    /// Fractionally strided convolution; weight is `(in_c, out_c, k, k)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Var {
        let (shapes, in_c) = self.conv_t_shapes(x, w, stride, padding);
        let value = conv::conv_transpose_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &shapes,
            in_c,
        );
        let g = shapes.geom;
        let shape = vec![shapes.batch, g.channels, g.height, g.width];
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let t = Tensor::new(shape, value).expect("conv_t output size");
        self.push(t, Op::ConvTranspose2d { x, w, b, stride, padding }, rg)
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let inv_hw = T::one() / T::from_usize(hw).unwrap();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (plane, dst) in src.chunks_exact(hw).zip(out.chunks_exact_mut(hw)) {
            let mean = plane.iter().copied().sum::<T>() * inv_hw;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = T::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(plane) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(vec![n, c, h, w], out).unwrap();
        self.push(t, Op::InstanceNorm { x, inv_std }, rg)
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    d[y * ow + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * quarter;
                }
            }
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(vec![n, c, oh, ow], out).unwrap();
        self.push(t, Op::AvgPool2(x), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert!(n == nb && h == hb && w == wb, "concat_channels: incompatible shapes");
        let hw = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&db[i * cb * hw..(i + 1) * cb * hw]);
        }
        let rg = self.rg(&[a, b]);
        let t = Tensor::new(vec![n, ca + cb, h, w], out).unwrap();
        self.push(t, Op::ConcatChannels(a, b), rg)
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "narrow_channels out of range");
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            out.extend_from_slice(&src[(i * c + start) * hw..(i * c + start + len) * hw]);
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(vec![n, len, h, w], out).unwrap();
        self.push(t, Op::NarrowChannels { x, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape size");
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Weighted spatial average: `(n, c, h, w)` with an `h*w` mask -> `(n, c, 1, 1)`.
    pub fn masked_spatial_mean(&mut self, x: Var, mask: &[T]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(mask.len(), h * w, "mask size");
        let mask_sum: T = mask.iter().copied().sum();
        assert!(mask_sum > T::zero(), "masked_spatial_mean with empty mask");
        let src = self.value(x).data();
        let out: Vec<T> = src
            .chunks_exact(h * w)
            .map(|plane| plane.iter().zip(mask).map(|(&v, &m)| v * m).sum::<T>() / mask_sum)
            .collect();
        let rg = self.rg(&[x]);
        let t = Tensor::new(vec![n, c, 1, 1], out).unwrap();
        self.push(t, Op::MaskedSpatialMean { x, mask: mask.to_vec(), mask_sum }, rg)
    }

    /// Mean softmax cross-entropy over the class axis of `(n, k, h, w)` logits.
    /// `targets` has one entry per `(n, h, w)` position; `None` positions are
    /// skipped. Returns 0 when every position is skipped.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (n, k, h, w) = self.value(logits).dims4();
        let hw = h * w;
        assert_eq!(targets.len(), n * hw, "target count");
        let src = self.value(logits).data();
        let mut total = T::zero();
        let mut count = 0usize;
        for b in 0..n {
            let base = b * k * hw;
            for p in 0..hw {
                let Some(t) = targets[b * hw + p] else { continue };
                assert!(t < k, "target class {t} out of range for {k} logits");
                let max = (0..k).map(|c| src[base + c * hw + p]).fold(T::neg_infinity(), T::max);
                let lse = (0..k).map(|c| (src[base + c * hw + p] - max).exp()).sum::<T>().ln() + max;
                total += lse - src[base + t * hw + p];
                count += 1;
            }
        }
        let value = if count == 0 { T::zero() } else { total / T::from_usize(count).unwrap() };
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(value),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), count },
            rg,
        )
    }

    /// Weighted binary cross-entropy on logits: `sum(w * bce) / sum(w)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], weights: &[T]) -> Var {
        let src = self.value(logits).data();
        assert!(targets.len() == src.len() && weights.len() == src.len(), "bce sizes");
        let total_weight: T = weights.iter().copied().sum();
        assert!(total_weight > T::zero(), "bce_with_logits with zero total weight");
        let total: T = src
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &t), &wt)| wt * (z.max(T::zero()) - z * t + softplus(-z.abs())))
            .sum();
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / total_weight),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                total_weight,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, param_nodes: self.param_nodes.clone() }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accum(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.requires_grad(*b) {
                    self.accum(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accum(grads, *a, d);
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                self.accum(grads, *a, g.zip_map(self.value(*a), |gv, x| gv * two * x));
            }
            Op::Ln(a) => self.accum(grads, *a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = g.zip_map(self.value(*a), |gv, x| if x < lo || x > hi { T::zero() } else { gv });
                self.accum(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * slope });
                self.accum(grads, *a, d);
            }
            Op::Tanh(a) => self.accum(grads, *a, g.zip_map(out, |gv, y| gv * (T::one() - y * y))),
            Op::Sigmoid(a) => self.accum(grads, *a, g.zip_map(out, |gv, y| gv * y * (T::one() - y))),
            Op::Softplus(a) => self.accum(grads, *a, g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x))),
            Op::SmoothL1(a, beta) => {
                let beta = *beta;
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x.abs() < beta {
                        gv * x / beta
                    } else {
                        gv * x.signum()
                    }
                });
                self.accum(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accum(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                let gv = g.item() / T::from_usize(src.len()).unwrap();
                self.accum(grads, *a, Tensor::full(src.shape(), gv));
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let shapes = self.conv_shapes(*x, *w, *stride, *padding);
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    &shapes,
                    self.requires_grad(*x),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap());
                }
                self.accum(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw).unwrap());
                if let Some(b) = b {
                    self.accum(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db).unwrap());
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, padding } => {
                let (shapes, in_c) = self.conv_t_shapes(*x, *w, *stride, *padding);
                let (dx, dw, db) = conv::conv_transpose_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    &shapes,
                    in_c,
                    self.requires_grad(*x),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap());
                }
                self.accum(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw).unwrap());
                if let Some(b) = b {
                    self.accum(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db).unwrap());
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = out.dims4();
                let hw = h * w;
                let inv_hw = T::one() / T::from_usize(hw).unwrap();
                let mut dx = vec![T::zero(); out.len()];
                for (p, ((dy, y), d)) in g
                    .data()
                    .chunks_exact(hw)
                    .zip(out.data().chunks_exact(hw))
                    .zip(dx.chunks_exact_mut(hw))
                    .enumerate()
                {
                    let mean_dy = dy.iter().copied().sum::<T>() * inv_hw;
                    let mean_dy_y = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
                    for ((dv, &gy), &yv) in d.iter_mut().zip(dy).zip(y) {
                        *dv = inv_std[p] * (gy - mean_dy - yv * mean_dy_y);
                    }
                }
                self.accum(grads, *x, Tensor::new(out.shape().to_vec(), dx).unwrap());
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let gs = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = gs[y * ow + xx] * quarter;
                            let i = 2 * y * w + 2 * xx;
                            d[i] = v;
                            d[i + 1] = v;
                            d[i + w] = v;
                            d[i + w + 1] = v;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![n, c, h, w], dx).unwrap());
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let (mut ga, mut gb) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    ga.extend_from_slice(&g.data()[base..base + ca * hw]);
                    gb.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accum(grads, *a, Tensor::new(vec![n, ca, h, w], ga).unwrap());
                self.accum(grads, *b, Tensor::new(vec![n, cb, h, w], gb).unwrap());
            }
            Op::NarrowChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = out.dims4().1;
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for i in 0..n {
                    dx[(i * c + start) * hw..(i * c + start + len) * hw]
                        .copy_from_slice(&g.data()[i * len * hw..(i + 1) * len * hw]);
                }
                self.accum(grads, *x, Tensor::new(vec![n, c, h, w], dx).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accum(grads, *x, g.clone().reshape(&shape).unwrap());
            }
            Op::MaskedSpatialMean { x, mask, mask_sum } => {
                let shape = self.value(*x).shape().to_vec();
                let hw = mask.len();
                let mut dx = Vec::with_capacity(g.len() * hw);
                for &gv in g.data() {
                    dx.extend(mask.iter().map(|&m| gv * m / *mask_sum));
                }
                self.accum(grads, *x, Tensor::new(shape, dx).unwrap());
            }
            Op::SoftmaxCrossEntropy { logits, targets, count } => {
                let src = self.value(*logits);
                let (n, k, h, w) = src.dims4();
                let hw = h * w;
                let mut dx = vec![T::zero(); src.len()];
                if *count > 0 {
                    let scale = g.item() / T::from_usize(*count).unwrap();
                    let data = src.data();
                    for b in 0..n {
                        let base = b * k * hw;
                        for p in 0..hw {
                            let Some(t) = targets[b * hw + p] else { continue };
                            let max = (0..k).map(|c| data[base + c * hw + p]).fold(T::neg_infinity(), T::max);
                            let z: T = (0..k).map(|c| (data[base + c * hw + p] - max).exp()).sum();
                            for c in 0..k {
                                let prob = (data[base + c * hw + p] - max).exp() / z;
                                let onehot = if c == t { T::one() } else { T::zero() };
                                dx[base + c * hw + p] = scale * (prob - onehot);
                            }
                        }
                    }
                }
                self.accum(grads, *logits, Tensor::new(src.shape().to_vec(), dx).unwrap());
            }
            Op::BceWithLogits { logits, targets, weights, total_weight } => {
                let src = self.value(*logits);
                let scale = g.item() / *total_weight;
                let dx: Vec<T> = src
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &wt)| scale * wt * (sigmoid(z) - t))
                    .collect();
                self.accum(grads, *logits, Tensor::new(src.shape().to_vec(), dx).unwrap());
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: Vec<(Var, u64, ParamId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter of `store` that took part in the pass.
    pub fn for_store(&self, store: &ParamStore<T>) -> BTreeMap<ParamId, Tensor<T>> {
        self.param_nodes
            .iter()
            .filter(|(_, uid, _)| *uid == store.uid())
            .filter_map(|(v, _, id)| self.get(*v).map(|g| (*id, g.clone())))
            .collect()
    }
}
