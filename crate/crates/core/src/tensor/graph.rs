use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for [`Graph::custom`]: `(parent values, output, output grad) -> parent grads`.
pub type CustomBackward<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    Conv2d { geom: ConvGeom },
    MaxPool2d { argmax: Vec<u32> },
    Linear,
    Relu,
    Ln,
    Dropout { mask: Vec<T> },
    Add,
    Sub,
    Mul,
    Scale(T),
    AddScalar,
    SumAxis { axis: usize },
    Softmax { axis: usize, log: bool },
    Reshape,
    Permute { map: Vec<usize> },
    Broadcast { map: Vec<usize> },
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Windows { window: usize },
    InvSigmoid { lo: T, hi: T },
    Nll { labels: Vec<usize> },
    Custom(CustomBackward<T>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Linear => "linear",
            Op::Relu => "relu",
            Op::Ln => "ln",
            Op::Dropout { .. } => "dropout",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { log: false, .. } => "softmax",
            Op::Softmax { log: true, .. } => "log_softmax",
            Op::Reshape => "reshape",
            Op::Permute { .. } => "permute",
            Op::Broadcast { .. } => "broadcast",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Windows { .. } => "windows",
            Op::InvSigmoid { .. } => "inv_sigmoid",
            Op::Nll { .. } => "nll",
            Op::Custom(_) => "custom",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    parents: Vec<Var>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape
/// is already topologically sorted and `backward` walks it once in reverse.
pub struct Graph<'s, T: Scalar = f32> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    grad_enabled: bool,
    rng: ChaCha8Rng,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// Graph with parameter leaves resolved against `store`.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::detached()
        }
    }

    /// Graph without a parameter store; leaves come from [`Graph::leaf`].
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: Vec::new(),
            training: false,
            grad_enabled: true,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Enables training-mode behavior (dropout) with the given RNG seed.
    pub fn training(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// Disables gradient tracking: parameters enter as constants.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, parents: Vec<Var>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = self.grad_enabled
            && match op {
                Op::Leaf => false,
                _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
            };
        self.nodes.push(Node {
            shape,
            value,
            op,
            parents,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        let v = self.push(shape, tensor.into_data(), Op::Leaf, Vec::new());
        self.nodes[v.0].requires_grad = requires_grad && self.grad_enabled;
        v
    }

    /// Constant input (never differentiated).
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    /// Parameter leaf; repeated calls for the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t = store.get(id);
        let trainable = t.requires_grad();
        let v = self.leaf(Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap(), trainable);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every parameter leaf reached by the last backward pass,
    /// ordered by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.grads[v.0].as_deref().map(|g| (ParamId(i), g))
            })
            .collect()
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<&[usize]> {
        let shape = self.shape(v);
        if shape.len() != rank {
            return Err(Error::Rank {
                op,
                expected: rank,
                shape: shape.to_vec(),
            });
        }
        Ok(shape)
    }

    fn expect_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::Rank {
                op,
                expected: sa.len(),
                shape: sb.to_vec(),
            });
        }
        for (axis, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(Error::Dimension {
                    op,
                    axis,
                    expected: x,
                    got: y,
                });
            }
        }
        Ok(())
    }

    /// Valid-or-zero-padded stride-1 convolution.
    /// `x`: [B,C,H,W], `w`: [K,C,kh,kw], `b`: [K].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let xs = self.expect_rank("conv2d", x, 4)?.to_vec();
        let ws = self.expect_rank("conv2d", w, 4)?.to_vec();
        let bs = self.expect_rank("conv2d", b, 1)?.to_vec();
        if ws[1] != xs[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: 1,
                expected: ws[1],
                got: xs[1],
            });
        }
        if bs[0] != ws[0] {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: 0,
                expected: ws[0],
                got: bs[0],
            });
        }
        for (axis, (&extent, &k)) in [(2usize, (&xs[2], &ws[2])), (3, (&xs[3], &ws[3]))]
            .iter()
            .map(|(a, p)| (*a, *p))
        {
            if k > extent + 2 * pad {
                return Err(Error::Dimension {
                    op: "conv2d",
                    axis,
                    expected: k,
                    got: extent + 2 * pad,
                });
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            out_ch: ws[0],
            kh: ws[2],
            kw: ws[3],
            pad,
        };
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        Ok(self.push(shape, out, Op::Conv2d { geom }, vec![x, w, b]))
    }

    /// Max pooling over `k`×`k` windows; ties resolve to the first
    /// row-major element.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(Error::invalid("maxpool2d: kernel and stride must be positive"));
        }
        let xs = self.expect_rank("maxpool2d", x, 4)?.to_vec();
        if xs[2] < k || xs[3] < k {
            return Err(Error::Architecture(format!(
                "maxpool2d: spatial extent {}x{} smaller than kernel {k}",
                xs[2], xs[3]
            )));
        }
        let (out, argmax, oh, ow) =
            kernels::maxpool2d_forward(self.value(x), xs[0] * xs[1], xs[2], xs[3], k, stride);
        Ok(self.push(
            vec![xs[0], xs[1], oh, ow],
            out,
            Op::MaxPool2d { argmax },
            vec![x],
        ))
    }

    /// Affine map `x·wᵀ + b`. `x`: [N,F_in], `w`: [F_out,F_in], `b`: [F_out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.expect_rank("linear", x, 2)?.to_vec();
        let ws = self.expect_rank("linear", w, 2)?.to_vec();
        let bs = self.expect_rank("linear", b, 1)?.to_vec();
        if ws[1] != xs[1] {
            return Err(Error::Dimension {
                op: "linear",
                axis: 1,
                expected: ws[1],
                got: xs[1],
            });
        }
        if bs[0] != ws[0] {
            return Err(Error::Dimension {
                op: "linear",
                axis: 0,
                expected: ws[0],
                got: bs[0],
            });
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let bias = self.value(b);
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        T::gemm_acc(
            n,
            fin,
            fout,
            self.value(x),
            fin as isize,
            1,
            self.value(w),
            1,
            fin as isize,
            &mut out,
            fout as isize,
            1,
        );
        Ok(self.push(vec![n, fout], out, Op::Linear, vec![x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu, vec![x])
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.ln()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Ln, vec![x])
    }

    /// Inverted dropout. Identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { mask }, vec![x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add, vec![a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub, vec![a, b]))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul, vec![a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(s), vec![x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v + s).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddScalar, vec![x])
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("sum_axis: axis {axis} for shape {shape:?}")));
        }
        let out = kernels::sum_axis(self.value(x), &shape, axis);
        let mut os = shape.clone();
        os.remove(axis);
        if os.is_empty() {
            os.push(1);
        }
        Ok(self.push(os, out, Op::SumAxis { axis }, vec![x]))
    }

    /// Sum of every element, shape [1].
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        Ok(self.scale(s, T::one() / T::from_usize(n).unwrap()))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax: axis {axis} for shape {shape:?}")));
        }
        let out = kernels::softmax(self.value(x), &shape, axis, log);
        Ok(self.push(shape, out, Op::Softmax { axis, log }, vec![x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::invalid(format!(
                "reshape: {:?} into {:?}",
                self.shape(x),
                shape
            )));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape, vec![x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("permute: {perm:?} for shape {shape:?}")));
        }
        let st = kernels::strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let map = kernels::gather_map(&out_shape, &src_strides);
        let xv = self.value(x);
        let out = map.iter().map(|&i| xv[i]).collect();
        Ok(self.push(out_shape, out, Op::Permute { map }, vec![x]))
    }

    /// Broadcasts `x` (right-aligned, size-1 axes expand) to `shape`.
    pub fn broadcast(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let src = kernels::broadcast_strides(self.shape(x), &shape).ok_or_else(|| {
            Error::invalid(format!("broadcast: {:?} to {:?}", self.shape(x), shape))
        })?;
        let map = kernels::gather_map(&shape, &src);
        let xv = self.value(x);
        let out = map.iter().map(|&i| xv[i]).collect();
        Ok(self.push(shape, out, Op::Broadcast { map }, vec![x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat: axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() {
                return Err(Error::Rank {
                    op: "concat",
                    expected: first.len(),
                    shape: s.to_vec(),
                });
            }
            for (a, (&e, &f)) in s.iter().zip(&first).enumerate() {
                if a != axis && e != f {
                    return Err(Error::Dimension {
                        op: "concat",
                        axis: a,
                        expected: f,
                        got: e,
                    });
                }
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { axis }, xs.to_vec()))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow: [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut os = shape;
        os[axis] = len;
        Ok(self.push(os, out, Op::Narrow { axis, start }, vec![x]))
    }

    /// All stride-1 `window`×`window` crops of a [B,C,N,N] batch, row-major,
    /// stacked as [B·R, C, W, W] with R = (N−W+1)².
    pub fn windows(&mut self, x: Var, window: usize) -> Result<Var> {
        let xs = self.expect_rank("windows", x, 4)?.to_vec();
        if xs[2] != xs[3] {
            return Err(Error::Geometry(format!("windows: non-square input {xs:?}")));
        }
        if window == 0 || window > xs[2] {
            return Err(Error::invalid(format!(
                "window {window} outside [1, {}]",
                xs[2]
            )));
        }
        let r = (xs[2] + 1 - window).pow(2);
        let out = kernels::extract_windows(self.value(x), xs[0], xs[1], xs[2], window);
        Ok(self.push(
            vec![xs[0] * r, xs[1], window, window],
            out,
            Op::Windows { window },
            vec![x],
        ))
    }

    /// `ln(p / (1 − p))` after clamping `p` to `[eps, 1 − eps]`; clamped
    /// entries pass no gradient.
    pub fn inv_sigmoid(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::invalid(format!("inverse-sigmoid epsilon {eps} outside (0, 0.5)")));
        }
        let lo = T::from_f64_lossy(eps);
        let hi = T::one() - lo;
        let out = self
            .value(x)
            .iter()
            .map(|&v| {
                let p = v.max(lo).min(hi);
                (p / (T::one() - p)).ln()
            })
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::InvSigmoid { lo, hi }, vec![x]))
    }

    /// Mean negative log-likelihood of `labels` under log-probabilities [B,C].
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let s = self.expect_rank("nll", logp, 2)?.to_vec();
        if labels.len() != s[0] {
            return Err(Error::Dimension {
                op: "nll",
                axis: 0,
                expected: s[0],
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: s[1],
            });
        }
        let v = self.value(logp);
        let mut acc = T::zero();
        for (b, &l) in labels.iter().enumerate() {
            acc = acc - v[b * s[1] + l];
        }
        let out = vec![acc / T::from_usize(s[0]).unwrap()];
        Ok(self.push(
            vec![1],
            out,
            Op::Nll {
                labels: labels.to_vec(),
            },
            vec![logp],
        ))
    }

    /// Cross-entropy of `labels` under `softmax(logits)`, averaged over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let logp = self.log_softmax(logits, 1)?;
        self.nll(logp, labels)
    }

    /// Node with a caller-supplied forward value and backward rule.
    pub fn custom(
        &mut self,
        parents: &[Var],
        output: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var {
        let shape = output.shape().to_vec();
        self.push(shape, output.into_data(), Op::Custom(backward), parents.to_vec())
    }

    /// Backpropagates from the scalar `loss` through every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dout) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                let need: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect();
                let pgrads = self.local_backward(i, &dout, &need);
                for ((p, g), n) in self.nodes[i].parents.clone().into_iter().zip(pgrads).zip(need) {
                    let Some(g) = g else { continue };
                    if !n {
                        continue;
                    }
                    match &mut self.grads[p.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            self.grads[i] = Some(dout);
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, dout: &[T], need: &[bool]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[i];
        let pv = |k: usize| self.nodes[node.parents[k].0].value.as_slice();
        let ps = |k: usize| self.nodes[node.parents[k].0].shape.as_slice();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(pv(0), pv(1), dout, geom, [need[0], need[1], need[2]]);
                vec![dx, dw, db]
            }
            Op::MaxPool2d { argmax } => {
                let mut dx = vec![T::zero(); pv(0).len()];
                for (&a, &g) in argmax.iter().zip(dout) {
                    dx[a as usize] = dx[a as usize] + g;
                }
                vec![Some(dx)]
            }
            Op::Linear => {
                let (xs, ws) = (ps(0), ps(1));
                let (n, fin, fout) = (xs[0], xs[1], ws[0]);
                let dx = need[0].then(|| {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm_acc(n, fout, fin, dout, fout as isize, 1, pv(1), fin as isize, 1, &mut dx, fin as isize, 1);
                    dx
                });
                let dw = need[1].then(|| {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm_acc(fout, n, fin, dout, 1, fout as isize, pv(0), fin as isize, 1, &mut dw, fin as isize, 1);
                    dw
                });
                let db = need[2].then(|| kernels::sum_axis(dout, &[n, fout], 0));
                vec![dx, dw, db]
            }
            Op::Relu => vec![Some(
                pv(0)
                    .iter()
                    .zip(dout)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )],
            Op::Ln => vec![Some(zip_map(dout, pv(0), |g, x| g / x))],
            Op::Dropout { mask } => vec![Some(zip_map(dout, mask, |g, m| g * m))],
            Op::Add => vec![Some(dout.to_vec()), Some(dout.to_vec())],
            Op::Sub => vec![Some(dout.to_vec()), Some(dout.iter().map(|&g| -g).collect())],
            Op::Mul => vec![
                need[0].then(|| zip_map(dout, pv(1), |g, b| g * b)),
                need[1].then(|| zip_map(dout, pv(0), |g, a| g * a)),
            ],
            Op::Scale(s) => vec![Some(dout.iter().map(|&g| g * *s).collect())],
            Op::AddScalar | Op::Reshape => vec![Some(dout.to_vec())],
            Op::SumAxis { axis } => {
                let (outer, n, inner) = kernels::split_axis(ps(0), *axis);
                let mut dx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        dx.extend_from_slice(&dout[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(dx)]
            }
            Op::Softmax { axis, log } => vec![Some(kernels::softmax_backward(
                &node.value,
                dout,
                &node.shape,
                *axis,
                *log,
            ))],
            Op::Permute { map } | Op::Broadcast { map } => {
                let mut dx = vec![T::zero(); pv(0).len()];
                for (&src, &g) in map.iter().zip(dout) {
                    dx[src] = dx[src] + g;
                }
                vec![Some(dx)]
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = kernels::split_axis(&node.shape, *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.parents.len());
                for (k, &needed) in need.iter().enumerate() {
                    let e = ps(k)[*axis];
                    out.push(needed.then(|| {
                        let mut g = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            g.extend_from_slice(&dout[base..base + e * inner]);
                        }
                        g
                    }));
                    offset += e;
                }
                out
            }
            Op::Narrow { axis, start } => {
                let (outer, n, inner) = kernels::split_axis(ps(0), *axis);
                let len = node.shape[*axis];
                let mut dx = vec![T::zero(); pv(0).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&dout[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dx)]
            }
            Op::Windows { window } => {
                let s = ps(0);
                vec![Some(kernels::extract_windows_backward(
                    dout, s[0], s[1], s[2], *window,
                ))]
            }
            Op::InvSigmoid { lo, hi } => vec![Some(
                pv(0)
                    .iter()
                    .zip(dout)
                    .map(|(&p, &g)| {
                        if p < *lo || p > *hi {
                            T::zero()
                        } else {
                            g / (p * (T::one() - p))
                        }
                    })
                    .collect(),
            )],
            Op::Nll { labels } => {
                let s = ps(0);
                let mut dx = vec![T::zero(); pv(0).len()];
                let scale = dout[0] / T::from_usize(s[0]).unwrap();
                for (b, &l) in labels.iter().enumerate() {
                    dx[b * s[1] + l] = -scale;
                }
                vec![Some(dx)]
            }
            Op::Custom(f) => {
                let parents: Vec<&[T]> = (0..node.parents.len()).map(pv).collect();
                f(&parents, &node.value, dout).into_iter().map(Some).collect()
            }
        }
    }

    /// Name of the op that produced `v` (diagnostics).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn zip_map<T: Copy>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
