//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! A [`Graph`] records one computation (a "tape") as a flat arena of nodes.
//! Forward values are computed eagerly as ops are issued; [`Graph::backward`]
//! then sweeps the arena in reverse, accumulating adjoints. Node creation
//! order is topological by construction, and every reduction runs in a fixed
//! sequential order, so gradients are bit-deterministic for a given op
//! sequence. Data-parallel kernels (convolution) only ever write disjoint
//! output blocks, which keeps multithreading deterministic too.
//!
//! The element type is generic over [`Scalar`] (`f32` for training speed,
//! `f64` for finite-difference gradient verification).

mod conv;
pub mod gradcheck;

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

/// Floating-point element type usable in graphs.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Element type tag used by serialization and checkpoint metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// value * c
    Scale(Var, F),
    /// value + c
    AddC(Var, F),
    Recip(Var),
    Exp(Var),
    /// ln(max(x, floor)); zero gradient where the clamp is active.
    LnClamped(Var, F),
    Square(Var),
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, F),
    /// Hard clamp to [lo, hi]; gradient passes only strictly inside.
    Clamp(Var, F, F),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<F>,
        mean: Vec<F>,
    },
    UpsampleNearest2(Var),
    MaxPool2 {
        x: Var,
        /// Offset (0..4) of the argmax inside each 2x2 window.
        argmax: Vec<u8>,
    },
    GlobalAvgPool(Var),
    ConcatCh(Var, Var),
    SliceVec {
        x: Var,
        start: usize,
    },
    SliceCh {
        x: Var,
        start: usize,
    },
    /// map[c,h,w] * vec[c]
    MulCh {
        map: Var,
        vec: Var,
    },
    /// map[c,h,w] + vec[c]
    AddCh {
        map: Var,
        vec: Var,
    },
    SoftmaxCh(Var),
    SelectClass {
        p: Var,
        labels: ndarray::Array2<usize>,
    },
    MeanAll(Var),
    SumAll(Var),
    /// Broadcast a length-C vector to a (C,h,w) map.
    TileCh {
        vec: Var,
        h: usize,
        w: usize,
    },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Identifier of a parameter tensor inside a parameter store; used to bind
/// parameters into graphs so that repeated uses share one leaf (and therefore
/// accumulate gradients).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One recorded computation.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    bound_params: Vec<(ParamId, Var)>,
    param_vars: std::collections::HashMap<ParamId, Var>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            bound_params: Vec::new(),
            param_vars: std::collections::HashMap::new(),
        }
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> Var {
        assert!(self.nodes.len() < u32::MAX as usize);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    /// Constant leaf: gradients do not flow into it.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a parameter tensor as a leaf. The same `ParamId` always returns
    /// the same `Var` within one graph, so gradients from all uses accumulate.
    /// Frozen parameters become constants (their gradient is identically
    /// zero), while activations still propagate through ops that use them.
    pub fn param(&mut self, id: ParamId, value: &ArrayD<F>, trainable: bool) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.param_vars.insert(id, v);
        if trainable {
            self.bound_params.push((id, v));
        }
        v
    }

    /// Parameters bound with `trainable = true`, in binding order.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bound_params
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, F> {
        self.nodes[v.idx()].value.view()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx()].value.shape()
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> F {
        let n = &self.nodes[v.idx()].value;
        assert_eq!(n.len(), 1, "scalar() on non-scalar node");
        n.iter().next().copied().unwrap()
    }

    /// Cut the tape: a new constant leaf sharing the node's value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.idx()].value.clone();
        self.constant(value)
    }

    fn unary<G>(&mut self, x: Var, f: G, op: Op<F>) -> Var
    where
        G: Fn(F) -> F,
    {
        let value = self.nodes[x.idx()].value.mapv(f);
        let needs = self.ng(x);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.nodes[a.idx()].value + &self.nodes[b.idx()].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = &self.nodes[a.idx()].value - &self.nodes[b.idx()].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = &self.nodes[a.idx()].value * &self.nodes[b.idx()].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_c(&mut self, x: Var, c: F) -> Var {
        self.unary(x, |v| v + c, Op::AddC(x, c))
    }

    /// 1 - x
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, F::from_f64(-1.0));
        self.add_c(neg, F::one())
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| F::one() / v, Op::Recip(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln_clamped(&mut self, x: Var, floor: F) -> Var {
        self.unary(x, |v| v.max(floor).ln(), Op::LnClamped(x, floor))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| F::one() / (F::one() + (-v).exp()),
            Op::Sigmoid(x),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(F::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        self.unary(
            x,
            |v| if v > F::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// 2D convolution. `x`: (Cin,H,W), `w`: (Cout,Cin,kh,kw), `b`: (Cout).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d: input must be (C,H,W)");
        assert_eq!(ws.len(), 4, "conv2d: weight must be (Cout,Cin,kh,kw)");
        assert_eq!(xs[0], ws[1], "conv2d: channel mismatch");
        assert_eq!(self.shape(b), [ws[0]], "conv2d: bias mismatch");
        let value = conv::conv2d(
            &self.nodes[x.idx()].value,
            &self.nodes[w.idx()].value,
            &self.nodes[b.idx()].value,
            stride,
            pad,
        );
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// Dense layer. `x`: (In,), `w`: (Out,In), `b`: (Out,).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 1, "linear: input must be a vector");
        assert_eq!(ws[1], xs[0], "linear: dimension mismatch");
        let xv = &self.nodes[x.idx()].value;
        let wv = &self.nodes[w.idx()].value;
        let bv = &self.nodes[b.idx()].value;
        let x1 = xv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out = bv.clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        ndarray::linalg::general_mat_vec_mul(F::one(), &w2, &x1, F::one(), &mut out);
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    /// Per-channel spatial instance normalization (no affine part).
    pub fn instance_norm(&mut self, x: Var, eps: F) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "instance_norm: input must be (C,H,W)");
        let (c, n) = (xs[0], xs[1] * xs[2]);
        assert!(n >= 1, "instance_norm: empty spatial extent");
        let xv = &self.nodes[x.idx()].value;
        let xsl = xv.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&xs));
        let osl = out.as_slice_mut().unwrap();
        let mut mean = vec![F::zero(); c];
        let mut inv_std = vec![F::zero(); c];
        let nf = F::from_f64(n as f64);
        for ch in 0..c {
            let xc = &xsl[ch * n..(ch + 1) * n];
            let mut m = F::zero();
            for &v in xc {
                m += v;
            }
            m = m / nf;
            let mut var = F::zero();
            for &v in xc {
                let d = v - m;
                var += d * d;
            }
            var = var / nf;
            let is = F::one() / (var + eps).sqrt();
            mean[ch] = m;
            inv_std[ch] = is;
            for (o, &v) in osl[ch * n..(ch + 1) * n].iter_mut().zip(xc) {
                *o = (v - m) * is;
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::InstanceNorm { x, inv_std, mean }, needs)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = &self.nodes[x.idx()].value;
        let xsl = xv.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[c, h * 2, w * 2]));
        {
            let osl = out.as_slice_mut().unwrap();
            let (ow, _oh) = (w * 2, h * 2);
            for ch in 0..c {
                for i in 0..h {
                    let src = &xsl[ch * h * w + i * w..ch * h * w + (i + 1) * w];
                    for di in 0..2 {
                        let row = &mut osl
                            [ch * 4 * h * w + (2 * i + di) * ow..ch * 4 * h * w + (2 * i + di + 1) * ow];
                        for j in 0..w {
                            row[2 * j] = src[j];
                            row[2 * j + 1] = src[j];
                        }
                    }
                }
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::UpsampleNearest2(x), needs)
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: odd spatial extent");
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.nodes[x.idx()].value;
        let xsl = xv.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[c, oh, ow]));
        let mut argmax = vec![0u8; c * oh * ow];
        {
            let osl = out.as_slice_mut().unwrap();
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let base = ch * h * w + 2 * i * w + 2 * j;
                        let cand = [xsl[base], xsl[base + 1], xsl[base + w], xsl[base + w + 1]];
                        let mut best = 0usize;
                        for k in 1..4 {
                            if cand[k] > cand[best] {
                                best = k;
                            }
                        }
                        let o = ch * oh * ow + i * ow + j;
                        osl[o] = cand[best];
                        argmax[o] = best as u8;
                    }
                }
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::MaxPool2 { x, argmax }, needs)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, n) = (xs[0], xs[1] * xs[2]);
        let xv = &self.nodes[x.idx()].value;
        let xsl = xv.as_slice().unwrap();
        let nf = F::from_f64(n as f64);
        let mut out = ArrayD::zeros(IxDyn(&[c]));
        {
            let osl = out.as_slice_mut().unwrap();
            for ch in 0..c {
                let mut s = F::zero();
                for &v in &xsl[ch * n..(ch + 1) * n] {
                    s += v;
                }
                osl[ch] = s / nf;
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::GlobalAvgPool(x), needs)
    }

    pub fn concat_ch(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3);
        assert_eq!(&sa[1..], &sb[1..], "concat_ch: spatial mismatch");
        let av = &self.nodes[a.idx()].value;
        let bv = &self.nodes[b.idx()].value;
        let value = ndarray::concatenate(Axis(0), &[av.view(), bv.view()]).unwrap();
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatCh(a, b), needs)
    }

    pub fn slice_vec(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 1);
        assert!(start + len <= xs[0], "slice_vec: out of range");
        let xv = &self.nodes[x.idx()].value;
        let value = xv
            .slice(ndarray::s![start..start + len])
            .to_owned()
            .into_dyn();
        let needs = self.ng(x);
        self.push(value, Op::SliceVec { x, start }, needs)
    }

    /// Select a contiguous channel range of a (C,H,W) tensor.
    pub fn slice_ch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        assert!(start + len <= xs[0], "slice_ch: out of range");
        let xv = &self.nodes[x.idx()].value;
        let value = xv
            .slice(ndarray::s![start..start + len, .., ..])
            .to_owned()
            .into_dyn();
        let needs = self.ng(x);
        self.push(value, Op::SliceCh { x, start }, needs)
    }

    /// Channel-wise multiply of a (C,H,W) map by a length-C vector.
    pub fn mul_ch(&mut self, map: Var, vec: Var) -> Var {
        let (ms, vs) = (self.shape(map).to_vec(), self.shape(vec).to_vec());
        assert_eq!(ms.len(), 3);
        assert_eq!(vs, [ms[0]], "mul_ch: vector length != channels");
        let mv = &self.nodes[map.idx()].value;
        let vv = &self.nodes[vec.idx()].value;
        let vsl = vv.as_slice().unwrap();
        let n = ms[1] * ms[2];
        let mut out = mv.clone();
        {
            let osl = out.as_slice_mut().unwrap();
            for ch in 0..ms[0] {
                let s = vsl[ch];
                for o in &mut osl[ch * n..(ch + 1) * n] {
                    *o *= s;
                }
            }
        }
        let needs = self.ng(map) || self.ng(vec);
        self.push(out, Op::MulCh { map, vec }, needs)
    }

    /// Channel-wise add of a length-C vector to a (C,H,W) map.
    pub fn add_ch(&mut self, map: Var, vec: Var) -> Var {
        let (ms, vs) = (self.shape(map).to_vec(), self.shape(vec).to_vec());
        assert_eq!(ms.len(), 3);
        assert_eq!(vs, [ms[0]], "add_ch: vector length != channels");
        let mv = &self.nodes[map.idx()].value;
        let vv = &self.nodes[vec.idx()].value;
        let vsl = vv.as_slice().unwrap();
        let n = ms[1] * ms[2];
        let mut out = mv.clone();
        {
            let osl = out.as_slice_mut().unwrap();
            for ch in 0..ms[0] {
                let s = vsl[ch];
                for o in &mut osl[ch * n..(ch + 1) * n] {
                    *o += s;
                }
            }
        }
        let needs = self.ng(map) || self.ng(vec);
        self.push(out, Op::AddCh { map, vec }, needs)
    }

    /// Softmax across the channel axis of a (C,H,W) tensor, per pixel.
    pub fn softmax_ch(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, n) = (xs[0], xs[1] * xs[2]);
        let xv = &self.nodes[x.idx()].value;
        let xsl = xv.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&xs));
        {
            let osl = out.as_slice_mut().unwrap();
            for p in 0..n {
                let mut mx = xsl[p];
                for ch in 1..c {
                    mx = mx.max(xsl[ch * n + p]);
                }
                let mut denom = F::zero();
                for ch in 0..c {
                    let e = (xsl[ch * n + p] - mx).exp();
                    osl[ch * n + p] = e;
                    denom += e;
                }
                for ch in 0..c {
                    osl[ch * n + p] = osl[ch * n + p] / denom;
                }
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::SoftmaxCh(x), needs)
    }

    /// Gather per-pixel probabilities of the labelled class:
    /// out[h,w] = p[labels[h,w], h, w].
    pub fn select_class(&mut self, p: Var, labels: &ndarray::Array2<usize>) -> Var {
        let ps = self.shape(p).to_vec();
        assert_eq!(ps.len(), 3);
        assert_eq!(labels.shape(), &ps[1..], "select_class: label shape");
        let (c, h, w) = (ps[0], ps[1], ps[2]);
        let pv = &self.nodes[p.idx()].value;
        let psl = pv.as_slice().unwrap();
        let lsl = labels.as_slice().unwrap();
        let n = h * w;
        let mut out = ArrayD::zeros(IxDyn(&[h, w]));
        {
            let osl = out.as_slice_mut().unwrap();
            for i in 0..n {
                let l = lsl[i];
                assert!(l < c, "select_class: label {} out of range", l);
                osl[i] = psl[l * n + i];
            }
        }
        let needs = self.ng(p);
        self.push(
            out,
            Op::SelectClass {
                p,
                labels: labels.clone(),
            },
            needs,
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.idx()].value;
        let n = xv.len();
        let mut s = F::zero();
        for &v in xv.iter() {
            s += v;
        }
        let value = ndarray::arr0(s / F::from_f64(n as f64)).into_dyn();
        let needs = self.ng(x);
        self.push(value, Op::MeanAll(x), needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.idx()].value;
        let mut s = F::zero();
        for &v in xv.iter() {
            s += v;
        }
        let value = ndarray::arr0(s).into_dyn();
        let needs = self.ng(x);
        self.push(value, Op::SumAll(x), needs)
    }

    /// Broadcast a length-C vector to a constant (C,h,w) map.
    pub fn tile_ch(&mut self, vec: Var, h: usize, w: usize) -> Var {
        let vs = self.shape(vec).to_vec();
        assert_eq!(vs.len(), 1);
        let c = vs[0];
        let vv = &self.nodes[vec.idx()].value;
        let vsl = vv.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        {
            let osl = out.as_slice_mut().unwrap();
            for ch in 0..c {
                for o in &mut osl[ch * h * w..(ch + 1) * h * w] {
                    *o = vsl[ch];
                }
            }
        }
        let needs = self.ng(vec);
        self.push(out, Op::TileCh { vec, h, w }, needs)
    }

    /// Mean absolute difference between two same-shape tensors.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean_all(ad)
    }

    /// Reverse sweep from a scalar root. Returns per-node adjoints.
    pub fn backward(&self, root: Var) -> GradStore<F> {
        assert_eq!(
            self.nodes[root.idx()].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.idx()] = Some(ArrayD::from_elem(
            self.nodes[root.idx()].value.raw_dim(),
            F::one(),
        ));
        for i in (0..=root.idx()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        GradStore { grads }
    }

    fn backward_node(&self, i: usize, g: &ArrayD<F>, grads: &mut Vec<Option<ArrayD<F>>>) {
        let val = |v: Var| &self.nodes[v.idx()].value;
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.view());
                self.acc(grads, *b, g.view());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.view());
                self.acc_scaled(grads, *b, g, F::from_f64(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let da = g * val(*b);
                    self.acc(grads, *a, da.view());
                }
                if self.ng(*b) {
                    let db = g * val(*a);
                    self.acc(grads, *b, db.view());
                }
            }
            Op::Scale(a, c) => self.acc_scaled(grads, *a, g, *c),
            Op::AddC(a, _) => self.acc(grads, *a, g.view()),
            Op::Recip(a) => {
                let da = out.mapv(|y| -(y * y)) * g;
                self.acc(grads, *a, da.view());
            }
            Op::Exp(a) => {
                let da = out * g;
                self.acc(grads, *a, da.view());
            }
            Op::LnClamped(a, floor) => {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(val(*a)).for_each(|d, &x| {
                    *d = if x >= *floor { *d / x } else { F::zero() };
                });
                self.acc(grads, *a, da.view());
            }
            Op::Square(a) => {
                let two = F::from_f64(2.0);
                let da = val(*a).mapv(|x| x * two) * g;
                self.acc(grads, *a, da.view());
            }
            Op::Abs(a) => {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(val(*a)).for_each(|d, &x| {
                    *d = if x > F::zero() {
                        *d
                    } else if x < F::zero() {
                        -*d
                    } else {
                        F::zero()
                    };
                });
                self.acc(grads, *a, da.view());
            }
            Op::Tanh(a) => {
                let da = out.mapv(|y| F::one() - y * y) * g;
                self.acc(grads, *a, da.view());
            }
            Op::Sigmoid(a) => {
                let da = out.mapv(|y| y * (F::one() - y)) * g;
                self.acc(grads, *a, da.view());
            }
            Op::Relu(a) => {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(val(*a)).for_each(|d, &x| {
                    if x <= F::zero() {
                        *d = F::zero();
                    }
                });
                self.acc(grads, *a, da.view());
            }
            Op::LeakyRelu(a, s) => {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(val(*a)).for_each(|d, &x| {
                    if x <= F::zero() {
                        *d *= *s;
                    }
                });
                self.acc(grads, *a, da.view());
            }
            Op::Clamp(a, lo, hi) => {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(val(*a)).for_each(|d, &x| {
                    if x <= *lo || x >= *hi {
                        *d = F::zero();
                    }
                });
                self.acc(grads, *a, da.view());
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    *stride,
                    *pad,
                    self.ng(*x),
                    self.ng(*w) || self.ng(*b),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx.view());
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw.view());
                }
                if let Some(db) = db {
                    self.acc(grads, *b, db.view());
                }
            }
            Op::Linear { x, w, b } => {
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let w2 = val(*w)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let x1 = val(*x)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                if self.ng(*x) {
                    let mut dx = ndarray::Array1::<F>::zeros(x1.len());
                    ndarray::linalg::general_mat_vec_mul(F::one(), &w2.t(), &g1, F::one(), &mut dx);
                    self.acc(grads, *x, dx.into_dyn().view());
                }
                if self.ng(*w) {
                    let mut dw = ndarray::Array2::<F>::zeros((g1.len(), x1.len()));
                    for (i, gi) in g1.iter().enumerate() {
                        for (j, xj) in x1.iter().enumerate() {
                            dw[[i, j]] = *gi * *xj;
                        }
                    }
                    self.acc(grads, *w, dw.into_dyn().view());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.view());
                }
            }
            Op::InstanceNorm { x, inv_std, mean: _ } => {
                // dx = inv_std/n * (n*g - sum(g) - xhat * sum(g*xhat))
                let xs = out.shape();
                let (c, n) = (xs[0], xs[1] * xs[2]);
                let nf = F::from_f64(n as f64);
                let gsl = g.as_slice().unwrap();
                let ysl = out.as_slice().unwrap();
                let mut dx = ArrayD::zeros(out.raw_dim());
                {
                    let dsl = dx.as_slice_mut().unwrap();
                    for ch in 0..c {
                        let gs = &gsl[ch * n..(ch + 1) * n];
                        let ys = &ysl[ch * n..(ch + 1) * n];
                        let mut sum_g = F::zero();
                        let mut sum_gy = F::zero();
                        for k in 0..n {
                            sum_g += gs[k];
                            sum_gy += gs[k] * ys[k];
                        }
                        let is = inv_std[ch] / nf;
                        for k in 0..n {
                            dsl[ch * n + k] = is * (nf * gs[k] - sum_g - ys[k] * sum_gy);
                        }
                    }
                }
                self.acc(grads, *x, dx.view());
            }
            Op::UpsampleNearest2(a) => {
                let os = out.shape();
                let (c, oh, ow) = (os[0], os[1], os[2]);
                let (h, w) = (oh / 2, ow / 2);
                let gsl = g.as_slice().unwrap();
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                {
                    let dsl = dx.as_slice_mut().unwrap();
                    for ch in 0..c {
                        for i in 0..oh {
                            let si = i / 2;
                            for j in 0..ow {
                                dsl[ch * h * w + si * w + j / 2] += gsl[ch * oh * ow + i * ow + j];
                            }
                        }
                    }
                }
                self.acc(grads, *a, dx.view());
            }
            Op::MaxPool2 { x, argmax } => {
                let os = out.shape();
                let (c, oh, ow) = (os[0], os[1], os[2]);
                let (h, w) = (oh * 2, ow * 2);
                let gsl = g.as_slice().unwrap();
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                {
                    let dsl = dx.as_slice_mut().unwrap();
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let o = ch * oh * ow + i * ow + j;
                                let base = ch * h * w + 2 * i * w + 2 * j;
                                let off = match argmax[o] {
                                    0 => 0,
                                    1 => 1,
                                    2 => w,
                                    _ => w + 1,
                                };
                                dsl[base + off] += gsl[o];
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx.view());
            }
            Op::GlobalAvgPool(a) => {
                let xs = val(*a).shape().to_vec();
                let (c, n) = (xs[0], xs[1] * xs[2]);
                let nf = F::from_f64(n as f64);
                let gsl = g.as_slice().unwrap();
                let mut dx = ArrayD::zeros(IxDyn(&xs));
                {
                    let dsl = dx.as_slice_mut().unwrap();
                    for ch in 0..c {
                        let gv = gsl[ch] / nf;
                        for d in &mut dsl[ch * n..(ch + 1) * n] {
                            *d = gv;
                        }
                    }
                }
                self.acc(grads, *a, dx.view());
            }
            Op::ConcatCh(a, b) => {
                let ca = val(*a).shape()[0];
                if self.ng(*a) {
                    let da = g.slice(ndarray::s![..ca, .., ..]);
                    self.acc(grads, *a, da.into_dyn());
                }
                if self.ng(*b) {
                    let db = g.slice(ndarray::s![ca.., .., ..]);
                    self.acc(grads, *b, db.into_dyn());
                }
            }
            Op::SliceVec { x, start } => {
                let xs = val(*x).shape().to_vec();
                let len = out.len();
                let mut dx = ndarray::Array1::<F>::zeros(xs[0]);
                dx.slice_mut(ndarray::s![*start..*start + len])
                    .assign(&g.view().into_dimensionality::<ndarray::Ix1>().unwrap());
                self.acc(grads, *x, dx.into_dyn().view());
            }
            Op::SliceCh { x, start } => {
                let xs = val(*x).shape().to_vec();
                let len = out.shape()[0];
                let mut dx = ArrayD::<F>::zeros(IxDyn(&xs));
                dx.slice_mut(ndarray::s![*start..*start + len, .., ..])
                    .assign(g);
                self.acc(grads, *x, dx.view());
            }
            Op::MulCh { map, vec } => {
                let ms = val(*map).shape().to_vec();
                let n = ms[1] * ms[2];
                let gsl = g.as_slice().unwrap();
                if self.ng(*map) {
                    let vsl = val(*vec).as_slice().unwrap().to_vec();
                    let mut dm = g.clone();
                    {
                        let dsl = dm.as_slice_mut().unwrap();
                        for ch in 0..ms[0] {
                            let s = vsl[ch];
                            for d in &mut dsl[ch * n..(ch + 1) * n] {
                                *d *= s;
                            }
                        }
                    }
                    self.acc(grads, *map, dm.view());
                }
                if self.ng(*vec) {
                    let msl = val(*map).as_slice().unwrap();
                    let mut dv = ndarray::Array1::<F>::zeros(ms[0]);
                    for ch in 0..ms[0] {
                        let mut s = F::zero();
                        for k in 0..n {
                            s += gsl[ch * n + k] * msl[ch * n + k];
                        }
                        dv[ch] = s;
                    }
                    self.acc(grads, *vec, dv.into_dyn().view());
                }
            }
            Op::AddCh { map, vec } => {
                let ms = val(*map).shape().to_vec();
                let n = ms[1] * ms[2];
                if self.ng(*map) {
                    self.acc(grads, *map, g.view());
                }
                if self.ng(*vec) {
                    let gsl = g.as_slice().unwrap();
                    let mut dv = ndarray::Array1::<F>::zeros(ms[0]);
                    for ch in 0..ms[0] {
                        let mut s = F::zero();
                        for k in 0..n {
                            s += gsl[ch * n + k];
                        }
                        dv[ch] = s;
                    }
                    self.acc(grads, *vec, dv.into_dyn().view());
                }
            }
            Op::SoftmaxCh(a) => {
                let xs = out.shape();
                let (c, n) = (xs[0], xs[1] * xs[2]);
                let ysl = out.as_slice().unwrap();
                let gsl = g.as_slice().unwrap();
                let mut dx = ArrayD::zeros(out.raw_dim());
                {
                    let dsl = dx.as_slice_mut().unwrap();
                    for p in 0..n {
                        let mut dot = F::zero();
                        for ch in 0..c {
                            dot += gsl[ch * n + p] * ysl[ch * n + p];
                        }
                        for ch in 0..c {
                            dsl[ch * n + p] = ysl[ch * n + p] * (gsl[ch * n + p] - dot);
                        }
                    }
                }
                self.acc(grads, *a, dx.view());
            }
            Op::SelectClass { p, labels } => {
                let ps = val(*p).shape().to_vec();
                let (h, w) = (ps[1], ps[2]);
                let n = h * w;
                let gsl = g.as_slice().unwrap();
                let lsl = labels.as_slice().unwrap();
                let mut dp = ArrayD::zeros(IxDyn(&ps));
                {
                    let dsl = dp.as_slice_mut().unwrap();
                    for i in 0..n {
                        dsl[lsl[i] * n + i] += gsl[i];
                    }
                }
                self.acc(grads, *p, dp.view());
            }
            Op::MeanAll(a) => {
                let n = val(*a).len();
                let gv = g.iter().next().copied().unwrap() / F::from_f64(n as f64);
                let dx = ArrayD::from_elem(val(*a).raw_dim(), gv);
                self.acc(grads, *a, dx.view());
            }
            Op::SumAll(a) => {
                let gv = g.iter().next().copied().unwrap();
                let dx = ArrayD::from_elem(val(*a).raw_dim(), gv);
                self.acc(grads, *a, dx.view());
            }
            Op::TileCh { vec, h, w } => {
                let c = val(*vec).len();
                let n = h * w;
                let gsl = g.as_slice().unwrap();
                let mut dv = ndarray::Array1::<F>::zeros(c);
                for ch in 0..c {
                    let mut s = F::zero();
                    for k in 0..n {
                        s += gsl[ch * n + k];
                    }
                    dv[ch] = s;
                }
                self.acc(grads, *vec, dv.into_dyn().view());
            }
        }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<F>>], v: Var, delta: ArrayViewD<'_, F>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.idx()] {
            Some(slot) => *slot += &delta,
            slot @ None => {
                // Keep every stored gradient in standard layout so
                // optimizers and checkers can use flat slices.
                let owned = if delta.is_standard_layout() {
                    delta.to_owned()
                } else {
                    let mut a = ArrayD::zeros(delta.raw_dim());
                    a += &delta;
                    a
                };
                *slot = Some(owned);
            }
        }
    }

    fn acc_scaled(&self, grads: &mut [Option<ArrayD<F>>], v: Var, delta: &ArrayD<F>, c: F) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.idx()] {
            Some(slot) => {
                ndarray::Zip::from(slot).and(delta).for_each(|s, &d| {
                    *s += d * c;
                });
            }
            slot @ None => *slot = Some(delta.mapv(|d| d * c)),
        }
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct GradStore<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> GradStore<F> {
    /// Gradient of the root with respect to `v`, if any was accumulated.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads[v.idx()].as_ref()
    }
}
