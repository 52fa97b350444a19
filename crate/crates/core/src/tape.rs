//! Reverse-mode differentiation over whole-tensor primitives.
//!
//! A [`Tape`] records each primitive application together with the values its
//! backward rule needs. [`Var`] is a plain handle into the tape. Gradients are
//! produced by [`Tape::backward`], which replays the record in reverse.

use crate::error::{dim_err, param_err, Error, Result};
use crate::kernels::{self, ConvDims, ConvGeom};
use crate::tensor::{numel, strides_of};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Expand(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    PadAxis { x: Var, axis: usize, before: usize },
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Conv { x: Var, w: Var, dims: ConvDims, geom: ConvGeom, per_frame_kernels: bool },
    DepthwiseTemporal { x: Var, beta: Var, kt: usize },
    GapSpatial(Var),
    GapSpatioTemporal(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S>, batch_stats: bool },
    TemporalAvgPool { x: Var, k: usize },
    TemporalMaxPool { x: Var, argmax: Vec<usize>, margin: S },
    TemporalShift { x: Var, n_fwd: usize, n_bwd: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance.
    pub var: Vec<S>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a recorded value; panics when `v` did not require grad.
    pub fn wrt(&self, v: Var) -> &Tensor<S> {
        self.get(v).expect("variable was not recorded with requires_grad")
    }
}

/// Ordered record of primitive applications.
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

fn video5(shape: &[usize], what: &str) -> Result<[usize; 5]> {
    match shape {
        &[n, c, t, h, w] => Ok([n, c, t, h, w]),
        _ => Err(dim_err!("{what}: expected [N, C, T, H, W], got {:?}", shape)),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    // ---- shape -------------------------------------------------------------

    /// Broadcasts `a` to `shape`; `a` must have the same rank with every
    /// axis either equal to the target or 1.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if src.rank() != shape.len() || src.shape().iter().zip(shape).any(|(&s, &d)| s != d && s != 1) {
            return Err(dim_err!("cannot expand {:?} to {:?}", src.shape(), shape));
        }
        let sstr = strides_of(src.shape());
        let eff: Vec<usize> = src.shape().iter().zip(&sstr).map(|(&n, &s)| if n == 1 { 0 } else { s }).collect();
        let data = src.data();
        let v = Tensor::from_fn(shape, |idx| data[idx.iter().zip(&eff).map(|(i, s)| i * s).sum::<usize>()]);
        Ok(self.push(v, Op::Expand(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Zero-pads `axis` with `before` leading and `after` trailing entries.
    pub fn pad_axis(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let src = self.value(a);
        if axis >= src.rank() {
            return Err(dim_err!("pad axis {} out of range for {:?}", axis, src.shape()));
        }
        let mut shape = src.shape().to_vec();
        shape[axis] += before + after;
        let n = src.shape()[axis];
        let v = Tensor::from_fn(&shape, |idx| {
            let i = idx[axis];
            if i < before || i >= before + n {
                S::zero()
            } else {
                let mut s = idx.to_vec();
                s[axis] = i - before;
                src.data()[src.offset(&s).expect("unpadded index in bounds")]
            }
        });
        Ok(self.push(v, Op::PadAxis { x: a, axis, before }, &[a]))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), &[a])
    }

    /// `[N, C, T, H, W] -> [N, C, T]`, mean over each frame.
    pub fn gap_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, c, t, h, w] = video5(self.shape(x), "gap_spatial")?;
        if h == 0 || w == 0 {
            return Err(dim_err!("gap_spatial needs non-empty frames"));
        }
        let hw = h * w;
        let inv = S::one() / S::from_count(hw);
        let data: Vec<S> = self.value(x).data().chunks(hw).map(|f| f.iter().copied().sum::<S>() * inv).collect();
        let v = Tensor::new(&[n, c, t], data)?;
        Ok(self.push(v, Op::GapSpatial(x), &[x]))
    }

    /// `[N, C, T, H, W] -> [N, C]`, mean over frames and positions.
    pub fn gap_spatiotemporal(&mut self, x: Var) -> Result<Var> {
        let [n, c, t, h, w] = video5(self.shape(x), "gap_spatiotemporal")?;
        if t * h * w == 0 {
            return Err(dim_err!("gap_spatiotemporal needs a non-empty clip"));
        }
        let thw = t * h * w;
        let inv = S::one() / S::from_count(thw);
        let data: Vec<S> = self.value(x).data().chunks(thw).map(|f| f.iter().copied().sum::<S>() * inv).collect();
        let v = Tensor::new(&[n, c], data)?;
        Ok(self.push(v, Op::GapSpatioTemporal(x), &[x]))
    }

    // ---- convolutions ------------------------------------------------------

    fn conv_generic(&mut self, x: Var, w: Var, dims: ConvDims, geom: ConvGeom, per_frame: bool) -> Var {
        let blk = dims.co * dims.ci * geom.kt * geom.kh * geom.kw;
        let to = dims.to;
        let out = kernels::conv_fwd(self.value(x).data(), self.value(w).data(), &dims, &geom, |n, t| {
            if per_frame {
                (n * to + t) * blk
            } else {
                0
            }
        });
        let v = Tensor::new(&[dims.n, dims.co, dims.to, dims.ho, dims.wo], out).expect("conv output sized from dims");
        self.push(v, Op::Conv { x, w, dims, geom, per_frame_kernels: per_frame }, &[x, w])
    }

    fn spatial_dims(&self, x: Var, co: usize, ci_w: usize, k: usize, stride: usize, pad: usize) -> Result<ConvDims> {
        let [n, ci, t, h, w] = video5(self.shape(x), "conv2d")?;
        if ci != ci_w {
            return Err(dim_err!("conv2d: input has {} channels but kernel expects {}", ci, ci_w));
        }
        if k.is_multiple_of(2) {
            return Err(param_err!("conv2d: kernel size {} must be odd", k));
        }
        if stride == 0 {
            return Err(param_err!("conv2d: stride must be positive"));
        }
        let ho = kernels::out_extent(h, k, stride, pad)
            .ok_or_else(|| dim_err!("conv2d: frame {}x{} smaller than kernel {} with pad {}", h, w, k, pad))?;
        let wo = kernels::out_extent(w, k, stride, pad)
            .ok_or_else(|| dim_err!("conv2d: frame {}x{} smaller than kernel {} with pad {}", h, w, k, pad))?;
        Ok(ConvDims { n, ci, t, h, w, co, to: t, ho, wo })
    }

    /// Every frame convolved with the same kernel `w: [Co, Ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (co, ci, k) = match *self.shape(w) {
            [co, ci, kh, kw] if kh == kw => (co, ci, kh),
            ref s => return Err(dim_err!("conv2d: kernel must be [Co, Ci, k, k], got {:?}", s)),
        };
        let dims = self.spatial_dims(x, co, ci, k, stride, pad)?;
        let geom = ConvGeom { kt: 1, kh: k, kw: k, st: 1, sh: stride, sw: stride, pt: 0, ph: pad, pw: pad };
        Ok(self.conv_generic(x, w, dims, geom, false))
    }

    /// Frame `t` of sample `n` convolved with its own kernel `w[n, t]`,
    /// `w: [N, T, Co, Ci, k, k]`.
    pub fn conv2d_frame_kernels(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, _, t, _, _] = video5(self.shape(x), "conv2d_frame_kernels")?;
        let (co, ci, k) = match *self.shape(w) {
            [wn, wt, co, ci, kh, kw] if wn == n && wt == t && kh == kw => (co, ci, kh),
            ref s => {
                return Err(dim_err!("conv2d_frame_kernels: kernels must be [N={n}, T={t}, Co, Ci, k, k], got {:?}", s))
            }
        };
        let dims = self.spatial_dims(x, co, ci, k, stride, pad)?;
        let geom = ConvGeom { kt: 1, kh: k, kw: k, st: 1, sh: stride, sw: stride, pt: 0, ph: pad, pw: pad };
        Ok(self.conv_generic(x, w, dims, geom, true))
    }

    /// 1D cross-correlation along T of `v: [N, C, T]` with `w: [Co, C, k]`.
    pub fn conv1d(&mut self, v: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, t) = match *self.shape(v) {
            [n, c, t] => (n, c, t),
            ref s => return Err(dim_err!("conv1d: expected [N, C, T], got {:?}", s)),
        };
        let (co, k) = match *self.shape(w) {
            [co, c, k] if c == ci => (co, k),
            ref s => return Err(dim_err!("conv1d: kernel {:?} does not match {} input channels", s, ci)),
        };
        if k % 2 == 0 {
            return Err(param_err!("conv1d: kernel size {} must be odd", k));
        }
        if stride == 0 {
            return Err(param_err!("conv1d: stride must be positive"));
        }
        let to = kernels::out_extent(t, k, stride, pad)
            .ok_or_else(|| dim_err!("conv1d: sequence of length {} shorter than kernel {} with pad {}", t, k, pad))?;
        let dims = ConvDims { n, ci, t, h: 1, w: 1, co, to, ho: 1, wo: 1 };
        let geom = ConvGeom { kt: k, kh: 1, kw: 1, st: stride, sh: 1, sw: 1, pt: pad, ph: 0, pw: 0 };
        let out = self.conv_generic(v, w, dims, geom, false);
        let val = self.nodes[out.0].value.reshape(&[n, co, to])?;
        self.nodes[out.0].value = val;
        Ok(out)
    }

    /// Direct 3D cross-correlation, `w: [Co, Ci, kt, kh, kw]`, strides and
    /// zero paddings given as `[t, h, w]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let [n, ci, t, h, wd] = video5(self.shape(x), "conv3d")?;
        let (co, kt, kh, kw) = match *self.shape(w) {
            [co, c, kt, kh, kw] if c == ci => (co, kt, kh, kw),
            ref s => return Err(dim_err!("conv3d: kernel {:?} does not match {} input channels", s, ci)),
        };
        if stride.contains(&0) {
            return Err(param_err!("conv3d: strides must be positive"));
        }
        let ext = |i: usize, k: usize, s: usize, p: usize| {
            kernels::out_extent(i, k, s, p).ok_or_else(|| dim_err!("conv3d: input {:?} smaller than kernel", [t, h, wd]))
        };
        let dims = ConvDims {
            n,
            ci,
            t,
            h,
            w: wd,
            co,
            to: ext(t, kt, stride[0], pad[0])?,
            ho: ext(h, kh, stride[1], pad[1])?,
            wo: ext(wd, kw, stride[2], pad[2])?,
        };
        let geom = ConvGeom { kt, kh, kw, st: stride[0], sh: stride[1], sw: stride[2], pt: pad[0], ph: pad[1], pw: pad[2] };
        Ok(self.conv_generic(x, w, dims, geom, false))
    }

    /// Per-channel temporal filter `beta: [C, kt]`, zero padding, same length.
    pub fn depthwise_temporal(&mut self, x: Var, beta: Var) -> Result<Var> {
        let [n, c, t, h, w] = video5(self.shape(x), "depthwise_temporal")?;
        let kt = match *self.shape(beta) {
            [bc, kt] if bc == c => kt,
            ref s => return Err(dim_err!("depthwise_temporal: beta {:?} does not match {} channels", s, c)),
        };
        if kt % 2 == 0 {
            return Err(param_err!("depthwise_temporal: kernel size {} must be odd", kt));
        }
        let y = kernels::depthwise_t_fwd(self.value(x).data(), self.value(beta).data(), n, c, t, h * w, kt);
        let v = Tensor::new(&[n, c, t, h, w], y)?;
        Ok(self.push(v, Op::DepthwiseTemporal { x, beta, kt }, &[x, beta]))
    }

    // ---- normalization -----------------------------------------------------

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(dim_err!("batch_norm: need at least [N, C], got {:?}", s));
        }
        let (n, c) = (s[0], s[1]);
        let inner = numel(&s[2..]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!(
                "batch_norm: gamma {:?} / beta {:?} must have length C = {}",
                self.shape(gamma),
                self.shape(beta),
                c
            ));
        }
        Ok((n, c, inner))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], inv_std: Vec<S>, batch_stats: bool) -> Result<Var> {
        let (n, c, inner) = self.bn_layout(x, gamma, beta)?;
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); xv.numel()];
        let mut y = vec![S::zero(); xv.numel()];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * inner;
                for e in base..base + inner {
                    let h = (xv.data()[e] - mean[cc]) * inv_std[cc];
                    xhat[e] = h;
                    y[e] = g[cc] * h + b[cc];
                }
            }
        }
        let v = Tensor::new(xv.shape(), y)?;
        Ok(self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, &[x, gamma, beta]))
    }

    /// Training-mode batch normalization over every axis except 1.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, BatchStats<S>)> {
        if eps <= S::zero() {
            return Err(param_err!("batch_norm: eps must be positive, got {}", eps));
        }
        let (n, c, inner) = self.bn_layout(x, gamma, beta)?;
        let (mean, var) = kernels::channel_moments(self.value(x).data(), n, c, inner);
        let inv_std = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var, count: n * inner }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], var: &[S], eps: S) -> Result<Var> {
        if eps <= S::zero() {
            return Err(param_err!("batch_norm: eps must be positive, got {}", eps));
        }
        let (_, c, _) = self.bn_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(dim_err!("batch_norm: running stats must have length {}", c));
        }
        let inv_std = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    // ---- temporal ----------------------------------------------------------

    fn pool_layout(&self, x: Var, k: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 3 {
            return Err(dim_err!("temporal pooling: need [N, C, T, ...], got {:?}", s));
        }
        let t = s[2];
        if k == 0 {
            return Err(param_err!("temporal pooling: window must be >= 1"));
        }
        if k > t {
            return Err(param_err!("temporal pooling: window {} exceeds clip length {}", k, t));
        }
        Ok((s[0] * s[1], t, numel(&s[3..])))
    }

    /// Same-length temporal average pooling, stride 1, edge replication.
    pub fn temporal_avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (outer, t, inner) = self.pool_layout(x, k)?;
        let y = kernels::tavg_fwd(self.value(x).data(), outer, t, inner, k);
        let v = Tensor::new(self.shape(x), y)?;
        Ok(self.push(v, Op::TemporalAvgPool { x, k }, &[x]))
    }

    /// Same-length temporal max pooling, stride 1, edge replication.
    pub fn temporal_max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (outer, t, inner) = self.pool_layout(x, k)?;
        let (y, argmax, margin) = kernels::tmax_fwd(self.value(x).data(), outer, t, inner, k);
        let v = Tensor::new(self.shape(x), y)?;
        Ok(self.push(v, Op::TemporalMaxPool { x, argmax, margin }, &[x]))
    }

    /// Channels `[0, n_fwd)` move one frame later, channels
    /// `[n_fwd, n_fwd + n_bwd)` one frame earlier; vacated frames are zero.
    pub fn temporal_shift(&mut self, x: Var, n_fwd: usize, n_bwd: usize) -> Result<Var> {
        let [n, c, t, h, w] = video5(self.shape(x), "temporal_shift")?;
        if n_fwd + n_bwd > c {
            return Err(param_err!("temporal_shift: {} + {} shifted channels exceed C = {}", n_fwd, n_bwd, c));
        }
        let y = shift_frames(self.value(x).data(), [n, c, t, h * w], n_fwd, n_bwd, false);
        let v = Tensor::new(&[n, c, t, h, w], y)?;
        Ok(self.push(v, Op::TemporalShift { x, n_fwd, n_bwd }, &[x]))
    }

    // ---- dense -------------------------------------------------------------

    /// `x: [N, Ci]`, `w: [Co, Ci]`, optional `b: [Co]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, ci) = match *self.shape(x) {
            [n, ci] => (n, ci),
            ref s => return Err(dim_err!("linear: expected [N, Ci], got {:?}", s)),
        };
        let co = match *self.shape(w) {
            [co, c] if c == ci => co,
            ref s => return Err(dim_err!("linear: weight {:?} does not match {} inputs", s, ci)),
        };
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(dim_err!("linear: bias {:?} must be [{}]", self.shape(b), co));
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut y = vec![S::zero(); n * co];
        for i in 0..n {
            for o in 0..co {
                let mut acc = b.map(|b| self.value(b).data()[o]).unwrap_or_else(S::zero);
                for j in 0..ci {
                    acc += wd[o * ci + j] * xd[i * ci + j];
                }
                y[i * co + o] = acc;
            }
        }
        let v = Tensor::new(&[n, co], y)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(v, Op::Linear { x, w, b }, &parents))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.shape(logits) {
            [n, k] => (n, k),
            ref s => return Err(dim_err!("cross entropy: expected [N, K] logits, got {:?}", s)),
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(dim_err!("cross entropy: {} labels in range 0..{} required", n, k));
        }
        let z = self.value(logits).data();
        let mut probs = vec![S::zero(); n * k];
        let mut loss = S::zero();
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let se: S = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / se;
            }
            loss += se.ln() + m - row[labels[i]];
        }
        let v = Tensor::scalar(loss / S::from_count(n));
        Ok(self.push(v, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    // ---- diagnostics -------------------------------------------------------

    /// Distance to the nearest non-differentiable point among recorded
    /// ReLUs (|pre-activation|) and max pools (winner minus runner-up).
    /// Finite-difference checks need this well above the probe step.
    pub fn kink_margin(&self) -> S {
        let mut m = S::infinity();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) if node.requires_grad => {
                    m = m.min(self.value(*a).data().iter().fold(S::infinity(), |acc, v| acc.min(v.abs())));
                }
                Op::TemporalMaxPool { margin, .. } if node.requires_grad => m = m.min(*margin),
                _ => {}
            }
        }
        m
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a one-element `loss`. Every leaf recorded with
    /// `requires_grad` receives a gradient, zero when it does not reach the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backward_node(node, &gy, &mut grads)?;
            }
            grads[i] = Some(gy);
        }
        let mut grads: Vec<Option<Tensor<S>>> = grads;
        grads.resize(self.nodes.len(), None);
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => {
                acc.check_same_shape(&g)?;
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node<S>, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone())?;
                self.accumulate(grads, *b, gy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone())?;
                self.accumulate(grads, *b, gy.scale(-S::one()))?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gy.mul(vb)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gy.mul(va)?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gy.scale(*s))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, gy.clone())?,
            Op::Expand(a) => {
                let src_shape = self.shape(*a).to_vec();
                let sstr = strides_of(&src_shape);
                let eff: Vec<usize> = src_shape.iter().zip(&sstr).map(|(&n, &s)| if n == 1 { 0 } else { s }).collect();
                let mut acc = vec![S::zero(); numel(&src_shape)];
                let out_shape = gy.shape().to_vec();
                let mut idx = vec![0usize; out_shape.len()];
                for &g in gy.data() {
                    acc[idx.iter().zip(&eff).map(|(i, s)| i * s).sum::<usize>()] += g;
                    for ax in (0..out_shape.len()).rev() {
                        idx[ax] += 1;
                        if idx[ax] < out_shape[ax] {
                            break;
                        }
                        idx[ax] = 0;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(&src_shape, acc)?)?;
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gy.reshape(self.shape(*a))?)?,
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                self.accumulate(grads, *a, gy.permute(&inv)?)?;
            }
            Op::PadAxis { x, axis, before } => {
                let src_shape = self.shape(*x).to_vec();
                let g = Tensor::from_fn(&src_shape, |idx| {
                    let mut o = idx.to_vec();
                    o[*axis] += before;
                    gy.data()[gy.offset(&o).expect("padded index in bounds")]
                });
                self.accumulate(grads, *x, g)?;
            }
            Op::Relu(a) => {
                let g = self.value(*a).zip_map(gy, |x, g| if x > S::zero() { g } else { S::zero() })?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Sum(a) => self.accumulate(grads, *a, Tensor::full(self.shape(*a), gy.data()[0]))?,
            Op::Mean(a) => {
                let n = S::from_count(self.value(*a).numel().max(1));
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gy.data()[0] / n))?;
            }
            Op::GapSpatial(x) | Op::GapSpatioTemporal(x) => {
                let xs = self.shape(*x).to_vec();
                let per = numel(&xs) / gy.numel();
                let inv = S::one() / S::from_count(per);
                let data = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, per)).collect();
                self.accumulate(grads, *x, Tensor::new(&xs, data)?)?;
            }
            Op::Conv { x, w, dims, geom, per_frame_kernels } => {
                let blk = dims.co * dims.ci * geom.kt * geom.kh * geom.kw;
                let to = dims.to;
                let pf = *per_frame_kernels;
                let (dx, dw) = kernels::conv_bwd(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy.data(),
                    dims,
                    geom,
                    |n, t| if pf { (n * to + t) * blk } else { 0 },
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw)?)?;
                }
            }
            Op::DepthwiseTemporal { x, beta, kt } => {
                let [n, c, t, h, w] = video5(self.shape(*x), "depthwise_temporal")?;
                let (dx, db) = kernels::depthwise_t_bwd(
                    self.value(*x).data(),
                    self.value(*beta).data(),
                    gy.data(),
                    (n, c, t, h * w),
                    *kt,
                );
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
                self.accumulate(grads, *beta, Tensor::new(self.shape(*beta), db)?)?;
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, inner) = self.bn_layout(*x, *gamma, *beta)?;
                let g = self.value(*gamma).data();
                let dyd = gy.data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * inner;
                        for e in base..base + inner {
                            dgamma[cc] += dyd[e] * xhat[e];
                            dbeta[cc] += dyd[e];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let m = S::from_count(n * inner);
                    let mut dx = vec![S::zero(); dyd.len()];
                    for nn in 0..n {
                        for cc in 0..c {
                            let base = (nn * c + cc) * inner;
                            for e in base..base + inner {
                                dx[e] = if *batch_stats {
                                    g[cc] * inv_std[cc] / m * (m * dyd[e] - dbeta[cc] - xhat[e] * dgamma[cc])
                                } else {
                                    g[cc] * inv_std[cc] * dyd[e]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?)?;
            }
            Op::TemporalAvgPool { x, k } => {
                let (outer, t, inner) = self.pool_layout(*x, *k)?;
                let dx = kernels::tavg_bwd(gy.data(), outer, t, inner, *k);
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
            }
            Op::TemporalMaxPool { x, argmax, .. } => {
                let mut dx = vec![S::zero(); gy.numel()];
                for (g, &src) in gy.data().iter().zip(argmax) {
                    dx[src] += *g;
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
            }
            Op::TemporalShift { x, n_fwd, n_bwd } => {
                let [n, c, t, h, w] = video5(self.shape(*x), "temporal_shift")?;
                let dx = shift_frames(gy.data(), [n, c, t, h * w], *n_fwd, *n_bwd, true);
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, ci) = (xv.shape()[0], xv.shape()[1]);
                let co = wv.shape()[0];
                let g = gy.data();
                if self.requires_grad(*x) {
                    let mut dx = vec![S::zero(); n * ci];
                    for i in 0..n {
                        for o in 0..co {
                            for j in 0..ci {
                                dx[i * ci + j] += g[i * co + o] * wv.data()[o * ci + j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(&[n, ci], dx)?)?;
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![S::zero(); co * ci];
                    for i in 0..n {
                        for o in 0..co {
                            for j in 0..ci {
                                dw[o * ci + j] += g[i * co + o] * xv.data()[i * ci + j];
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(&[co, ci], dw)?)?;
                }
                if let Some(b) = b {
                    let mut db = vec![S::zero(); co];
                    for i in 0..n {
                        for o in 0..co {
                            db[o] += g[i * co + o];
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[co], db)?)?;
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (n, k) = (labels.len(), probs.len() / labels.len());
                let scale = gy.data()[0] / S::from_count(n);
                let mut dz: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * k + l] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(&[n, k], dz)?)?;
            }
        }
        Ok(())
    }
}

/// Forward shift (`adjoint == false`) or its adjoint, over `[N, C, T, inner]`.
pub(crate) fn shift_frames<S: Scalar>(x: &[S], dims: [usize; 4], n_fwd: usize, n_bwd: usize, adjoint: bool) -> Vec<S> {
    let [n, c, t, inner] = dims;
    let mut y = vec![S::zero(); x.len()];
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * t * inner;
            // offset: output frame tt reads input frame tt - offset
            let offset: isize = if cc < n_fwd {
                1
            } else if cc < n_fwd + n_bwd {
                -1
            } else {
                0
            };
            let offset = if adjoint { -offset } else { offset };
            for tt in 0..t {
                let src = tt as isize - offset;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let (o, i) = (base + tt * inner, base + src as usize * inner);
                y[o..o + inner].copy_from_slice(&x[i..i + inner]);
            }
        }
    }
    y
}
