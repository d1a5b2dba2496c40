use super::conv::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    Max,
    Min,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, S),
    AddScalar(Var),
    Reshape(Var),
    Reduce {
        input: Var,
        kind: Reduce,
        /// Output slot of each input element.
        slot: Vec<usize>,
        /// For max/min: the winning input index of each output slot.
        arg: Vec<usize>,
        count: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        invstd: Vec<S>,
        train: bool,
    },
    TemporalShift {
        x: Var,
        frames: usize,
        fold: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    WeightedChannelSum {
        features: Var,
        weights: Var,
    },
    SelectRows {
        input: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Operation tape. Values are computed eagerly as ops are recorded.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (na, nb) = (a.iter().product::<usize>(), b.iter().product::<usize>());
    if a == b || nb == 1 && na >= 1 {
        return Some(a.to_vec());
    }
    if na == 1 {
        return Some(b.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Some(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Some(b.to_vec());
    }
    None
}

fn grad_buf<'a, S: Scalar>(
    grads: &'a mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    v: Var,
) -> &'a mut Vec<S> {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()])
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Records a leaf holding a copy of `t`; it tracks gradients iff `t` does.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "input shape {shape:?} vs buffer length {}",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: S) -> Var {
        self.push(Vec::new(), vec![x], Op::Leaf, false)
    }

    // ── accessors ───────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated at `v` by the last backward pass, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient at `v`, or zeros when nothing flowed there.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<S> {
        self.grad(v)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); self.nodes[v.0].value.len()])
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, mk: fn(Var, Var) -> Op<S>) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let shape = broadcast_shape(sa, sb).ok_or_else(|| {
            Error::Shape(format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let n: usize = shape.iter().product();
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (na, nb) = (va.len(), vb.len());
        let value = (0..n).map(|i| f(va[i % na], vb[i % nb])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, S::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, S::ln, Op::Log(a))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// Same value as `a`; nothing upstream of it receives gradient through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.nodes[a.0].shape
            )));
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    // ── reductions ──────────────────────────────────────────────────────

    fn reduce(&mut self, a: Var, axes: &[usize], kind: Reduce) -> Result<Var> {
        let in_shape = self.nodes[a.0].shape.clone();
        let rank = in_shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank || reduced[ax] {
                return Err(Error::Shape(format!(
                    "invalid reduction axes {axes:?} for shape {in_shape:?}"
                )));
            }
            reduced[ax] = true;
        }
        let count: usize = (0..rank).filter(|&d| reduced[d]).map(|d| in_shape[d]).product();
        let numel: usize = in_shape.iter().product();
        if numel == 0 || count == 0 {
            return Err(Error::Domain(format!(
                "empty reduction over axes {axes:?} of shape {in_shape:?}"
            )));
        }
        let out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| in_shape[d]).collect();
        let out_len: usize = out_shape.iter().product();

        // Output stride contributed by every input dimension (0 if reduced).
        let mut out_stride = vec![0usize; rank];
        let mut s = 1;
        for d in (0..rank).rev() {
            if !reduced[d] {
                out_stride[d] = s;
                s *= in_shape[d];
            }
        }
        let mut slot = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        let mut cur = 0usize;
        for _ in 0..numel {
            slot.push(cur);
            for d in (0..rank).rev() {
                idx[d] += 1;
                cur += out_stride[d];
                if idx[d] < in_shape[d] {
                    break;
                }
                cur -= out_stride[d] * in_shape[d];
                idx[d] = 0;
            }
        }

        let v = &self.nodes[a.0].value;
        let mut out = vec![S::zero(); out_len];
        let mut arg = Vec::new();
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for (i, &o) in slot.iter().enumerate() {
                    out[o] += v[i];
                }
                if kind == Reduce::Mean {
                    let c = S::lit(count as f64);
                    out.iter_mut().for_each(|x| *x = *x / c);
                }
            }
            Reduce::Max | Reduce::Min => {
                arg = vec![usize::MAX; out_len];
                for (i, &o) in slot.iter().enumerate() {
                    let better = arg[o] == usize::MAX
                        || if kind == Reduce::Max { v[i] > out[o] } else { v[i] < out[o] };
                    if better {
                        out[o] = v[i];
                        arg[o] = i;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            out_shape,
            out,
            Op::Reduce {
                input: a,
                kind,
                slot,
                arg,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, Reduce::Sum)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, Reduce::Mean)
    }

    /// Maximum over `axes`; ties resolve to the first index in row-major order.
    pub fn max(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, Reduce::Max)
    }

    pub fn min(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, Reduce::Min)
    }

    fn all_axes(&self, a: Var) -> Vec<usize> {
        (0..self.nodes[a.0].shape.len()).collect()
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes = self.all_axes(a);
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes = self.all_axes(a);
        self.mean(a, &axes)
    }

    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        let axes = self.all_axes(a);
        self.max(a, &axes)
    }

    pub fn min_all(&mut self, a: Var) -> Result<Var> {
        let axes = self.all_axes(a);
        self.min(a, &axes)
    }

    // ── layers ──────────────────────────────────────────────────────────

    /// NCHW convolution with a `[F, C, kh, kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (&self.nodes[input.0].shape, &self.nodes[kernel.0].shape);
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::Shape(format!("conv2d input {si:?} with kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        if kh > hp || kw > wp {
            return Err(Error::Config(format!(
                "kernel {kh}×{kw} exceeds padded input {hp}×{wp}"
            )));
        }
        if (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "stride {stride} does not tile padded input {hp}×{wp} with kernel {kh}×{kw}"
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        };
        let out = conv::forward(&geom, &self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(vec![n, f, geom.ho, geom.wo], out, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// `x · wᵀ + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Shape(format!("linear input {sx:?} with weight {sw:?}")));
        }
        let (batch, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.nodes[b.0].shape != [fan_out] {
                return Err(Error::Shape(format!(
                    "linear bias {:?} for {fan_out} outputs",
                    self.nodes[b.0].shape
                )));
            }
        }
        let mut out = vec![S::zero(); batch * fan_out];
        if let Some(b) = b {
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(&self.nodes[b.0].value);
            }
        }
        S::gemm(
            batch,
            fan_in,
            fan_out,
            S::one(),
            &self.nodes[x.0].value,
            fan_in as isize,
            1,
            &self.nodes[w.0].value,
            1,
            fan_in as isize,
            S::one(),
            &mut out,
            fan_out as isize,
            1,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![batch, fan_out], out, Op::Linear { x, w, b }, rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() < 2 {
            return Err(Error::Shape(format!("batch norm needs rank ≥ 2, got {sx:?}")));
        }
        let c = sx[1];
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [c] {
                return Err(Error::Shape(format!(
                    "batch norm affine {:?} for {c} channels",
                    self.nodes[p.0].shape
                )));
            }
        }
        Ok((sx[0], c, sx[2..].iter().product()))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: Vec<S>, invstd: Vec<S>, train: bool) -> Var {
        let (n, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let inner = self.nodes[x.0].value.len() / (n * c).max(1);
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![S::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                let (m, s, gg, bb) = (mean[ch], invstd[ch], g[ch], b[ch]);
                for j in base..base + inner {
                    out[j] = (xv[j] - m) * s * gg + bb;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            },
            rg,
        )
    }

    /// Batch normalization over axis 1 using the batch's own statistics.
    /// Returns the output plus the per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, Vec<S>, Vec<S>)> {
        let (n, c, inner) = self.bn_check(x, gamma, beta)?;
        let m = n * inner;
        if m == 0 {
            return Err(Error::Domain("batch norm over an empty batch".into()));
        }
        let xv = &self.nodes[x.0].value;
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut acc = S::zero();
            for i in 0..n {
                let base = (i * c + ch) * inner;
                acc += xv[base..base + inner].iter().copied().sum::<S>();
            }
            let mu = acc / S::lit(m as f64);
            let mut sq = S::zero();
            for i in 0..n {
                let base = (i * c + ch) * inner;
                for &v in &xv[base..base + inner] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / S::lit(m as f64);
        }
        let invstd = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, mean.clone(), invstd, true);
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], var: &[S], eps: S) -> Result<Var> {
        let (_, c, _) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!(
                "running statistics of length {}/{} for {c} channels",
                mean.len(),
                var.len()
            )));
        }
        let invstd = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean.to_vec(), invstd, false))
    }

    /// Parameter-free temporal shift on `[B·T, C, …]`: channels `[0, fold)` take
    /// the previous frame, `[fold, 2·fold)` the next frame; boundaries are zero.
    pub fn temporal_shift(&mut self, x: Var, frames: usize, fold: usize) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() < 2 || frames == 0 || sx[0] % frames != 0 || 2 * fold > sx[1] {
            return Err(Error::Shape(format!(
                "temporal shift of {sx:?} with {frames} frames and fold {fold}"
            )));
        }
        let v = &self.nodes[x.0].value;
        let out = shift_frames(v, &sx, frames, fold, false);
        let rg = self.rg(x);
        Ok(self.push(sx, out, Op::TemporalShift { x, frames, fold }, rg))
    }

    /// Per-row cross entropy of `[B, K]` logits against class indices; `[B]` output.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = &self.nodes[logits.0].shape;
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross entropy logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
        }
        let v = &self.nodes[logits.0].value;
        let mut probs = vec![S::zero(); b * k];
        let mut out = vec![S::zero(); b];
        for i in 0..b {
            let row = &v[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (p, &x) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (x - mx).exp();
                z += *p;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p = *p / z);
            out[i] = z.ln() + mx - row[labels[i]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![b],
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `out[n, …] = Σ_c weights[n, c] · features[n, c, …]`.
    pub fn weighted_channel_sum(&mut self, features: Var, weights: Var) -> Result<Var> {
        let (sf, sw) = (&self.nodes[features.0].shape, &self.nodes[weights.0].shape);
        if sf.len() < 2 || sw.len() != 2 || sw[0] != sf[0] || sw[1] != sf[1] {
            return Err(Error::Shape(format!(
                "weighted channel sum of {sf:?} with weights {sw:?}"
            )));
        }
        let (n, c) = (sf[0], sf[1]);
        let inner: usize = sf[2..].iter().product();
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&sf[2..]);
        let (fv, wv) = (&self.nodes[features.0].value, &self.nodes[weights.0].value);
        let mut out = vec![S::zero(); n * inner];
        for i in 0..n {
            let dst = &mut out[i * inner..(i + 1) * inner];
            for ch in 0..c {
                let wgt = wv[i * c + ch];
                let src = &fv[(i * c + ch) * inner..(i * c + ch + 1) * inner];
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d += wgt * x;
                }
            }
        }
        let rg = self.rg(features) || self.rg(weights);
        Ok(self.push(out_shape, out, Op::WeightedChannelSum { features, weights }, rg))
    }

    /// Gathers rows (slices along axis 0) in the given order.
    pub fn select_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let s = self.nodes[input.0].shape.clone();
        if s.is_empty() {
            return Err(Error::Shape("select_rows on a scalar".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Shape(format!("row {bad} out of range for {s:?}")));
        }
        let row: usize = s[1..].iter().product();
        let v = &self.nodes[input.0].value;
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&v[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.rg(input);
        Ok(self.push(
            shape,
            out,
            Op::SelectRows {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss` over the whole tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.sweep(loss, None)
    }

    /// Like [`Graph::backward`] but stops once the gradient at `target` is
    /// complete; nodes recorded before `target` are not visited.
    pub fn backward_to(&mut self, loss: Var, target: Var) -> Result<()> {
        if target.0 > loss.0 {
            return Err(Error::Contract("backward target recorded after the loss".into()));
        }
        self.sweep(loss, Some(target))
    }

    fn sweep(&mut self, loss: Var, stop: Option<Var>) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let seed = grad_buf(&mut self.grads, &self.nodes, loss);
        seed[0] += S::one();
        let floor = stop.map_or(0, |v| v.0 + 1);
        for i in (floor..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[S]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if rg(*a) {
                    let buf = grad_buf(grads, nodes, *a);
                    let n = buf.len();
                    for (k, &gk) in g.iter().enumerate() {
                        buf[k % n] += gk;
                    }
                }
                if rg(*b) {
                    let buf = grad_buf(grads, nodes, *b);
                    let n = buf.len();
                    for (k, &gk) in g.iter().enumerate() {
                        buf[k % n] += if neg { -gk } else { gk };
                    }
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let div = matches!(node.op, Op::Div(..));
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (na, nb) = (va.len(), vb.len());
                if rg(*a) {
                    let buf = grad_buf(grads, nodes, *a);
                    for (k, &gk) in g.iter().enumerate() {
                        let y = vb[k % nb];
                        buf[k % na] += if div { gk / y } else { gk * y };
                    }
                }
                if rg(*b) {
                    let buf = grad_buf(grads, nodes, *b);
                    for (k, &gk) in g.iter().enumerate() {
                        let (x, y) = (va[k % na], vb[k % nb]);
                        buf[k % nb] += if div { -gk * x / (y * y) } else { gk * x };
                    }
                }
            }
            Op::Neg(a) => {
                if rg(*a) {
                    let buf = grad_buf(grads, nodes, *a);
                    buf.iter_mut().zip(g).for_each(|(d, &gk)| *d += -gk);
                }
            }
            Op::Scale(a, c) => {
                if rg(*a) {
                    let buf = grad_buf(grads, nodes, *a);
                    buf.iter_mut().zip(g).for_each(|(d, &gk)| *d += gk * *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if rg(*a) {
                    let buf = grad_buf(grads, nodes, *a);
                    buf.iter_mut().zip(g).for_each(|(d, &gk)| *d += gk);
                }
            }
            Op::Relu(a) => {
                if rg(*a) {
                    let x = &nodes[a.0].value;
                    let buf = grad_buf(grads, nodes, *a);
                    for ((d, &gk), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > S::zero() {
                            *d += gk;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if rg(*a) {
                    let y = &node.value;
                    let buf = grad_buf(grads, nodes, *a);
                    for ((d, &gk), &yv) in buf.iter_mut().zip(g).zip(y) {
                        *d += gk * yv;
                    }
                }
            }
            Op::Log(a) => {
                if rg(*a) {
                    let x = &nodes[a.0].value;
                    let buf = grad_buf(grads, nodes, *a);
                    for ((d, &gk), &xv) in buf.iter_mut().zip(g).zip(x) {
                        *d += gk / xv;
                    }
                }
            }
            Op::Reduce {
                input,
                kind,
                slot,
                arg,
                count,
            } => {
                if rg(*input) {
                    let buf = grad_buf(grads, nodes, *input);
                    match kind {
                        Reduce::Sum => {
                            for (d, &o) in buf.iter_mut().zip(slot) {
                                *d += g[o];
                            }
                        }
                        Reduce::Mean => {
                            let c = S::lit(*count as f64);
                            for (d, &o) in buf.iter_mut().zip(slot) {
                                *d += g[o] / c;
                            }
                        }
                        Reduce::Max | Reduce::Min => {
                            for (o, &src) in arg.iter().enumerate() {
                                buf[src] += g[o];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                let (want_x, want_k) = (rg(*input), rg(*kernel));
                let (dx, dk) = conv::backward(
                    geom,
                    &nodes[input.0].value,
                    &nodes[kernel.0].value,
                    g,
                    want_x,
                    want_k,
                );
                if let Some(dx) = dx {
                    let buf = grad_buf(grads, nodes, *input);
                    buf.iter_mut().zip(&dx).for_each(|(d, &v)| *d += v);
                }
                if let Some(dk) = dk {
                    let buf = grad_buf(grads, nodes, *kernel);
                    buf.iter_mut().zip(&dk).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Linear { x, w, b } => {
                let (batch, fan_in) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let fan_out = nodes[w.0].shape[0];
                if rg(*x) {
                    let wv = &nodes[w.0].value;
                    let buf = grad_buf(grads, nodes, *x);
                    // dx[B, in] += dy[B, out] · w[out, in]
                    S::gemm(
                        batch,
                        fan_out,
                        fan_in,
                        S::one(),
                        g,
                        fan_out as isize,
                        1,
                        wv,
                        fan_in as isize,
                        1,
                        S::one(),
                        buf,
                        fan_in as isize,
                        1,
                    );
                }
                if rg(*w) {
                    let xv = &nodes[x.0].value;
                    let buf = grad_buf(grads, nodes, *w);
                    // dw[out, in] += dyᵀ[out, B] · x[B, in]
                    S::gemm(
                        fan_out,
                        batch,
                        fan_in,
                        S::one(),
                        g,
                        1,
                        fan_out as isize,
                        xv,
                        fan_in as isize,
                        1,
                        S::one(),
                        buf,
                        fan_in as isize,
                        1,
                    );
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    let buf = grad_buf(grads, nodes, b);
                    for row in g.chunks(fan_out) {
                        buf.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            } => {
                let (n, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let inner = nodes[x.0].value.len() / (n * c).max(1);
                let m = S::lit((n * inner) as f64);
                let xv = &nodes[x.0].value;
                let gv = &nodes[gamma.0].value;
                let mut sum_dy = vec![S::zero(); c];
                let mut sum_dy_xhat = vec![S::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            let xhat = (xv[j] - mean[ch]) * invstd[ch];
                            sum_dy[ch] += g[j];
                            sum_dy_xhat[ch] += g[j] * xhat;
                        }
                    }
                }
                if rg(*x) {
                    let buf = grad_buf(grads, nodes, *x);
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            let k = gv[ch] * invstd[ch];
                            for j in base..base + inner {
                                buf[j] += if *train {
                                    let xhat = (xv[j] - mean[ch]) * invstd[ch];
                                    k * (g[j] - (sum_dy[ch] + xhat * sum_dy_xhat[ch]) / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                }
                if rg(*gamma) {
                    let buf = grad_buf(grads, nodes, *gamma);
                    buf.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &v)| *d += v);
                }
                if rg(*beta) {
                    let buf = grad_buf(grads, nodes, *beta);
                    buf.iter_mut().zip(&sum_dy).for_each(|(d, &v)| *d += v);
                }
            }
            Op::TemporalShift { x, frames, fold } => {
                if rg(*x) {
                    let back = shift_frames(g, &node.shape, *frames, *fold, true);
                    let buf = grad_buf(grads, nodes, *x);
                    buf.iter_mut().zip(&back).for_each(|(d, &v)| *d += v);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if rg(*logits) {
                    let k = nodes[logits.0].shape[1];
                    let buf = grad_buf(grads, nodes, *logits);
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { S::one() } else { S::zero() };
                            buf[i * k + j] += g[i] * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::WeightedChannelSum { features, weights } => {
                let (n, c) = (nodes[features.0].shape[0], nodes[features.0].shape[1]);
                let inner = nodes[features.0].value.len() / (n * c).max(1);
                if rg(*features) {
                    let wv = &nodes[weights.0].value;
                    let buf = grad_buf(grads, nodes, *features);
                    for i in 0..n {
                        let gi = &g[i * inner..(i + 1) * inner];
                        for ch in 0..c {
                            let wgt = wv[i * c + ch];
                            let dst = &mut buf[(i * c + ch) * inner..(i * c + ch + 1) * inner];
                            dst.iter_mut().zip(gi).for_each(|(d, &gk)| *d += wgt * gk);
                        }
                    }
                }
                if rg(*weights) {
                    let fv = &nodes[features.0].value;
                    let buf = grad_buf(grads, nodes, *weights);
                    for i in 0..n {
                        let gi = &g[i * inner..(i + 1) * inner];
                        for ch in 0..c {
                            let src = &fv[(i * c + ch) * inner..(i * c + ch + 1) * inner];
                            buf[i * c + ch] += src.iter().zip(gi).map(|(&f, &gk)| f * gk).sum::<S>();
                        }
                    }
                }
            }
            Op::SelectRows { input, indices } => {
                if rg(*input) {
                    let row: usize = nodes[input.0].shape[1..].iter().product();
                    let buf = grad_buf(grads, nodes, *input);
                    for (k, &r) in indices.iter().enumerate() {
                        let src = &g[k * row..(k + 1) * row];
                        buf[r * row..(r + 1) * row]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
    }
}

/// Forward shift (`adjoint = false`) or its transpose on `[B·T, C, …]`.
fn shift_frames<S: Scalar>(v: &[S], shape: &[usize], frames: usize, fold: usize, adjoint: bool) -> Vec<S> {
    let (nt, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let clips = nt / frames;
    let mut out = vec![S::zero(); v.len()];
    for b in 0..clips {
        for t in 0..frames {
            for ch in 0..c {
                // Source frame feeding output frame t for this channel.
                let offset: isize = if ch < fold {
                    -1
                } else if ch < 2 * fold {
                    1
                } else {
                    0
                };
                let offset = if adjoint { -offset } else { offset };
                let src_t = t as isize + offset;
                if src_t < 0 || src_t >= frames as isize {
                    continue;
                }
                let dst = ((b * frames + t) * c + ch) * inner;
                let src = ((b * frames + src_t as usize) * c + ch) * inner;
                out[dst..dst + inner].copy_from_slice(&v[src..src + inner]);
            }
        }
    }
    out
}
