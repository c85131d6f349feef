//! Reverse-mode automatic differentiation on dynamically shaped dense arrays.
//!
//! The engine is a flat tape: every operation appends a node holding its
//! eagerly computed value, and [`Tape::backward`] walks the tape once in
//! reverse. Graphs are rebuilt per step (define-by-run), parameters enter as
//! leaf nodes each time.
//!
//! Generic over [`Scalar`] so training can run in `f32` while metric
//! evaluation and finite-difference gradient tests run in `f64`.
//!
//! Shape errors are programming errors and panic; public APIs validate their
//! inputs before building graphs.

pub mod check;
mod conv;

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::fmt;

pub use conv::{conv2d_out_dim, PadMode};

/// Element type the tape can differentiate through.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C = alpha * A(m×k) * B(k×n) + beta * C, row-major strides given explicitly.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Neg,
    Abs,
    Sqrt,
    Exp,
    Ln,
    Sin,
    Cos,
    Sigmoid,
    Relu,
    LeakyRelu,
    /// Hard clamp; gradient is zero outside the open interval.
    Clamp,
    /// x^p for constant p.
    PowConst,
    /// Piecewise sRGB electro-optical transfer (gamma decode).
    SrgbToLinear,
    /// CIELAB `f` with the standard linear extension below (6/29)^3.
    LabF,
}

enum Op<S: Scalar> {
    Leaf,
    Unary {
        kind: UnaryKind,
        c0: S,
        c1: S,
        a: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bcast_b: bool,
    },
    Scale {
        a: usize,
        c: S,
    },
    AddConst {
        a: usize,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        stride: usize,
        pad: usize,
    },
    MirrorPad {
        a: usize,
        ph: usize,
        pw: usize,
    },
    BiasAdd {
        a: usize,
        bias: usize,
    },
    Upsample2x {
        a: usize,
    },
    ConcatC {
        a: usize,
        b: usize,
    },
    SliceC {
        a: usize,
        start: usize,
        len: usize,
    },
    ChannelMix {
        a: usize,
        mat: ndarray::Array2<S>,
    },
    MeanAll {
        a: usize,
    },
    SumAll {
        a: usize,
    },
    MeanSpatial {
        a: usize,
    },
    RowSum {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Select {
        mask: ArrayD<S>,
        a: usize,
        b: usize,
    },
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    /// atan2(y, x): `a` is y, `b` is x.
    Atan2,
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<S: Scalar> {
    g: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss w.r.t. `v`; zero array if the node was reachable
    /// but received no gradient, `None` if it did not require one.
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }
}

/// The recording tape. Create one per forward/backward cycle.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn standardize<S: Scalar>(a: ArrayD<S>) -> ArrayD<S> {
    if a.is_standard_layout() {
        a
    } else {
        let shape = a.raw_dim();
        ArrayD::from_shape_vec(shape, a.iter().cloned().collect()).unwrap()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: ArrayD<S>, op: Op<S>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: standardize(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Constant input; no gradient will be tracked through it.
    pub fn leaf(&self, value: ArrayD<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input (network parameter or probe point).
    pub fn param(&self, value: ArrayD<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Scalar constant as a `[1]`-shaped leaf.
    pub fn scalar_leaf(&self, v: S) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn value(&self, v: Var) -> ArrayD<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> S {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap()
    }

    fn unary(&self, kind: UnaryKind, c0: S, c1: S, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let mut out = av.clone();
            out.mapv_inplace(|x| unary_eval(kind, c0, c1, x));
            out
        };
        let needs = self.needs(a);
        self.push(value, Op::Unary { kind, c0, c1, a: a.0 }, needs)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, S::zero(), S::zero(), a)
    }
    pub fn abs(&self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, S::zero(), S::zero(), a)
    }
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, S::zero(), S::zero(), a)
    }
    pub fn exp(&self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, S::zero(), S::zero(), a)
    }
    pub fn ln(&self, a: Var) -> Var {
        self.unary(UnaryKind::Ln, S::zero(), S::zero(), a)
    }
    pub fn sin(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sin, S::zero(), S::zero(), a)
    }
    pub fn cos(&self, a: Var) -> Var {
        self.unary(UnaryKind::Cos, S::zero(), S::zero(), a)
    }
    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, S::zero(), S::zero(), a)
    }
    pub fn relu(&self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, S::zero(), S::zero(), a)
    }
    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu, S::of(slope), S::zero(), a)
    }
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryKind::Clamp, S::of(lo), S::of(hi), a)
    }
    pub fn powf_const(&self, a: Var, p: f64) -> Var {
        self.unary(UnaryKind::PowConst, S::of(p), S::zero(), a)
    }
    pub fn srgb_to_linear(&self, a: Var) -> Var {
        self.unary(UnaryKind::SrgbToLinear, S::zero(), S::zero(), a)
    }
    pub fn lab_f(&self, a: Var) -> Var {
        self.unary(UnaryKind::LabF, S::zero(), S::zero(), a)
    }

    fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Var {
        let (value, bcast_b) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            if av.shape() == bv.shape() {
                let a_s = av.as_slice().unwrap();
                let b_s = bv.as_slice().unwrap();
                let out: Vec<S> = a_s
                    .iter()
                    .zip(b_s)
                    .map(|(&x, &y)| binary_eval(kind, x, y))
                    .collect();
                (ArrayD::from_shape_vec(av.raw_dim(), out).unwrap(), false)
            } else {
                // Row broadcast: a is (N, K), b is (N, 1).
                assert!(
                    av.ndim() == 2 && bv.ndim() == 2 && bv.shape()[1] == 1
                        && av.shape()[0] == bv.shape()[0],
                    "binary op shape mismatch: {:?} vs {:?}",
                    av.shape(),
                    bv.shape()
                );
                let (n, k) = (av.shape()[0], av.shape()[1]);
                let a_s = av.as_slice().unwrap();
                let b_s = bv.as_slice().unwrap();
                let mut out = Vec::with_capacity(n * k);
                for i in 0..n {
                    let y = b_s[i];
                    for j in 0..k {
                        out.push(binary_eval(kind, a_s[i * k + j], y));
                    }
                }
                (ArrayD::from_shape_vec(av.raw_dim(), out).unwrap(), true)
            }
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(
            value,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                bcast_b,
            },
            needs,
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Div, a, b)
    }
    /// atan2(y, x).
    pub fn atan2(&self, y: Var, x: Var) -> Var {
        self.binary(BinaryKind::Atan2, y, x)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let c = S::of(c);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(|x| x * c)
        };
        let needs = self.needs(a);
        self.push(value, Op::Scale { a: a.0, c }, needs)
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let c = S::of(c);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(|x| x + c)
        };
        let needs = self.needs(a);
        self.push(value, Op::AddConst { a: a.0 }, needs)
    }

    /// (M, K) x (K, N) -> (M, N).
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            assert!(av.ndim() == 2 && bv.ndim() == 2);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let (k2, n) = (bv.shape()[0], bv.shape()[1]);
            assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
            let mut out = vec![S::zero(); m * n];
            unsafe {
                S::gemm(
                    m,
                    k,
                    n,
                    S::one(),
                    av.as_ptr(),
                    k as isize,
                    1,
                    bv.as_ptr(),
                    n as isize,
                    1,
                    S::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            ArrayD::from_shape_vec(IxDyn(&[m, n]), out).unwrap()
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul { a: a.0, b: b.0 }, needs)
    }

    /// 2D cross-correlation on NCHW input with OCKK weight, zero padding.
    pub fn conv2d(&self, input: Var, weight: Var, stride: usize, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            conv::forward(&nodes[input.0].value, &nodes[weight.0].value, stride, pad)
        };
        let needs = self.needs(input) || self.needs(weight);
        self.push(
            value,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                stride,
                pad,
            },
            needs,
        )
    }

    /// Symmetric (mirror) padding of the spatial dims of an NCHW tensor.
    /// Reflection excludes the edge sample; requires pad < dim.
    pub fn mirror_pad(&self, a: Var, ph: usize, pw: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            conv::mirror_pad(&nodes[a.0].value, ph, pw)
        };
        let needs = self.needs(a);
        self.push(value, Op::MirrorPad { a: a.0, ph, pw }, needs)
    }

    /// NCHW + per-channel bias (C), or NK + per-column bias (K).
    pub fn bias_add(&self, a: Var, bias: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[bias.0].value;
            let b_s = bv.as_slice().unwrap();
            let mut out = av.clone();
            let shape = out.shape().to_vec();
            let out_s = out.as_slice_mut().unwrap();
            match shape.len() {
                4 => {
                    let (c, hw) = (shape[1], shape[2] * shape[3]);
                    assert_eq!(b_s.len(), c);
                    for chunk in out_s.chunks_mut(c * hw) {
                        for (ci, plane) in chunk.chunks_mut(hw).enumerate() {
                            let b = b_s[ci];
                            for v in plane {
                                *v += b;
                            }
                        }
                    }
                }
                2 => {
                    let k = shape[1];
                    assert_eq!(b_s.len(), k);
                    for row in out_s.chunks_mut(k) {
                        for (v, &b) in row.iter_mut().zip(b_s) {
                            *v += b;
                        }
                    }
                }
                d => panic!("bias_add expects 2D or 4D input, got {d}D"),
            }
            out
        };
        let needs = self.needs(a) || self.needs(bias);
        self.push(
            value,
            Op::BiasAdd {
                a: a.0,
                bias: bias.0,
            },
            needs,
        )
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let s = av.shape();
            assert_eq!(s.len(), 4);
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let a_s = av.as_slice().unwrap();
            let mut out = vec![S::zero(); n * c * 4 * h * w];
            let (oh, ow) = (2 * h, 2 * w);
            for nc in 0..n * c {
                let src = &a_s[nc * h * w..(nc + 1) * h * w];
                let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y / 2;
                    for x in 0..ow {
                        dst[y * ow + x] = src[sy * w + x / 2];
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap()
        };
        let needs = self.needs(a);
        self.push(value, Op::Upsample2x { a: a.0 }, needs)
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_c(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (sa, sb) = (av.shape(), bv.shape());
            assert!(sa.len() == 4 && sb.len() == 4);
            assert!(
                sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
                "concat_c shape mismatch: {sa:?} vs {sb:?}"
            );
            let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
            let a_s = av.as_slice().unwrap();
            let b_s = bv.as_slice().unwrap();
            let mut out = Vec::with_capacity(n * (ca + cb) * hw);
            for i in 0..n {
                out.extend_from_slice(&a_s[i * ca * hw..(i + 1) * ca * hw]);
                out.extend_from_slice(&b_s[i * cb * hw..(i + 1) * cb * hw]);
            }
            ArrayD::from_shape_vec(IxDyn(&[n, ca + cb, sa[2], sa[3]]), out).unwrap()
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatC { a: a.0, b: b.0 }, needs)
    }

    /// Channel slice [start, start+len) of an NCHW tensor.
    pub fn slice_c(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let s = av.shape();
            assert_eq!(s.len(), 4);
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            assert!(start + len <= c);
            let a_s = av.as_slice().unwrap();
            let mut out = Vec::with_capacity(n * len * hw);
            for i in 0..n {
                let base = i * c * hw + start * hw;
                out.extend_from_slice(&a_s[base..base + len * hw]);
            }
            ArrayD::from_shape_vec(IxDyn(&[n, len, s[2], s[3]]), out).unwrap()
        };
        let needs = self.needs(a);
        self.push(
            value,
            Op::SliceC {
                a: a.0,
                start,
                len,
            },
            needs,
        )
    }

    /// Per-pixel linear channel mix of an NCHW tensor: out[o] = sum_c mat[o,c] in[c].
    pub fn channel_mix(&self, a: Var, mat: ndarray::Array2<f64>) -> Var {
        let mat = mat.mapv(S::of);
        let value = {
            let nodes = self.nodes.borrow();
            conv::channel_mix(&nodes[a.0].value, &mat)
        };
        let needs = self.needs(a);
        self.push(value, Op::ChannelMix { a: a.0, mat }, needs)
    }

    /// Mean over all elements -> shape [1].
    pub fn mean_all(&self, a: Var) -> Var {
        let (value, _n) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let n = av.len();
            let sum: S = av.as_slice().unwrap().iter().copied().sum();
            (
                ArrayD::from_elem(IxDyn(&[1]), sum / S::of(n as f64)),
                n,
            )
        };
        let needs = self.needs(a);
        self.push(value, Op::MeanAll { a: a.0 }, needs)
    }

    /// Sum over all elements -> shape [1].
    pub fn sum_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let sum: S = av.as_slice().unwrap().iter().copied().sum();
            ArrayD::from_elem(IxDyn(&[1]), sum)
        };
        let needs = self.needs(a);
        self.push(value, Op::SumAll { a: a.0 }, needs)
    }

    /// Global average pool: (N, C, H, W) -> (N, C).
    pub fn mean_spatial(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let s = av.shape();
            assert_eq!(s.len(), 4);
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let a_s = av.as_slice().unwrap();
            let inv = S::one() / S::of(hw as f64);
            let mut out = Vec::with_capacity(n * c);
            for chunk in a_s.chunks(hw) {
                let sum: S = chunk.iter().copied().sum();
                out.push(sum * inv);
            }
            debug_assert_eq!(out.len(), n * c);
            ArrayD::from_shape_vec(IxDyn(&[n, c]), out).unwrap()
        };
        let needs = self.needs(a);
        self.push(value, Op::MeanSpatial { a: a.0 }, needs)
    }

    /// Row sums of a 2D tensor: (N, K) -> (N, 1).
    pub fn row_sum(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            assert_eq!(av.ndim(), 2);
            let (n, k) = (av.shape()[0], av.shape()[1]);
            let a_s = av.as_slice().unwrap();
            let out: Vec<S> = a_s.chunks(k).map(|r| r.iter().copied().sum()).collect();
            debug_assert_eq!(out.len(), n);
            ArrayD::from_shape_vec(IxDyn(&[n, 1]), out).unwrap()
        };
        let needs = self.needs(a);
        self.push(value, Op::RowSum { a: a.0 }, needs)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            assert_eq!(av.len(), shape.iter().product::<usize>());
            ArrayD::from_shape_vec(IxDyn(shape), av.as_slice().unwrap().to_vec()).unwrap()
        };
        let needs = self.needs(a);
        self.push(value, Op::Reshape { a: a.0 }, needs)
    }

    /// mask*a + (1-mask)*b with a constant {0,1} mask; selection boundaries
    /// carry no gradient.
    pub fn select(&self, mask: ArrayD<f64>, a: Var, b: Var) -> Var {
        let mask = mask.mapv(S::of);
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            assert_eq!(av.shape(), bv.shape());
            assert_eq!(av.shape(), mask.shape());
            let a_s = av.as_slice().unwrap();
            let b_s = bv.as_slice().unwrap();
            let m_s = mask.as_slice().unwrap();
            let out: Vec<S> = (0..a_s.len())
                .map(|i| m_s[i] * a_s[i] + (S::one() - m_s[i]) * b_s[i])
                .collect();
            ArrayD::from_shape_vec(av.raw_dim(), out).unwrap()
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(
            value,
            Op::Select {
                mask,
                a: a.0,
                b: b.0,
            },
            needs,
        )
    }

    /// Copy of `a`'s value as a fresh constant leaf (gradient barrier).
    pub fn detach(&self, a: Var) -> Var {
        let value = self.value(a);
        self.leaf(value)
    }

    /// Softmax along the last axis of a 2D tensor, shift-stabilized.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let row_max = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            assert_eq!(av.ndim(), 2);
            let (n, k) = (av.shape()[0], av.shape()[1]);
            let a_s = av.as_slice().unwrap();
            let mut out = Vec::with_capacity(n * k);
            for row in a_s.chunks(k) {
                let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                for _ in 0..k {
                    out.push(m);
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[n, k]), out).unwrap()
        };
        // Subtracting any constant leaves softmax unchanged, so the max is
        // safe to treat as a constant.
        let shift = self.leaf(row_max);
        let centered = self.sub(a, shift);
        let exps = self.exp(centered);
        let sums = self.row_sum(exps);
        self.div(exps, sums)
    }

    /// Reverse pass from a single-element loss node.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<S>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(
            nodes[loss.0].value.raw_dim(),
            S::one(),
        ));

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            backward_step(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { g: grads }
    }
}

fn unary_eval<S: Scalar>(kind: UnaryKind, c0: S, c1: S, x: S) -> S {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Ln => x.ln(),
        UnaryKind::Sin => x.sin(),
        UnaryKind::Cos => x.cos(),
        UnaryKind::Sigmoid => {
            let one = S::one();
            one / (one + (-x).exp())
        }
        UnaryKind::Relu => {
            if x > S::zero() {
                x
            } else {
                S::zero()
            }
        }
        UnaryKind::LeakyRelu => {
            if x > S::zero() {
                x
            } else {
                c0 * x
            }
        }
        UnaryKind::Clamp => x.max(c0).min(c1),
        UnaryKind::PowConst => x.powf(c0),
        UnaryKind::SrgbToLinear => crate::color::srgb_to_linear_scalar(x),
        UnaryKind::LabF => crate::color::lab_f_scalar(x),
    }
}

fn unary_deriv<S: Scalar>(kind: UnaryKind, c0: S, c1: S, x: S, y: S) -> S {
    let one = S::one();
    match kind {
        UnaryKind::Neg => -one,
        UnaryKind::Abs => {
            if x > S::zero() {
                one
            } else if x < S::zero() {
                -one
            } else {
                S::zero()
            }
        }
        UnaryKind::Sqrt => one / (S::of(2.0) * y),
        UnaryKind::Exp => y,
        UnaryKind::Ln => one / x,
        UnaryKind::Sin => x.cos(),
        UnaryKind::Cos => -x.sin(),
        UnaryKind::Sigmoid => y * (one - y),
        UnaryKind::Relu => {
            if x > S::zero() {
                one
            } else {
                S::zero()
            }
        }
        UnaryKind::LeakyRelu => {
            if x > S::zero() {
                one
            } else {
                c0
            }
        }
        UnaryKind::Clamp => {
            if x > c0 && x < c1 {
                one
            } else {
                S::zero()
            }
        }
        UnaryKind::PowConst => c0 * x.powf(c0 - one),
        UnaryKind::SrgbToLinear => crate::color::srgb_to_linear_deriv(x),
        UnaryKind::LabF => crate::color::lab_f_deriv(x),
    }
}

fn binary_eval<S: Scalar>(kind: BinaryKind, x: S, y: S) -> S {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
        BinaryKind::Atan2 => x.atan2(y),
    }
}

/// Move `arr` into an empty slot or add it elementwise; avoids a
/// zero-fill-then-add double pass on the hot single-consumer case.
fn add_into<S: Scalar>(slot: &mut Option<ArrayD<S>>, arr: ArrayD<S>) {
    match slot {
        None => *slot = Some(arr),
        Some(g) => {
            let gs = g.as_slice_mut().unwrap();
            let as_ = arr.as_slice().unwrap();
            for i in 0..gs.len() {
                gs[i] += as_[i];
            }
        }
    }
}

fn owned<S: Scalar>(shape: &[usize], data: Vec<S>) -> ArrayD<S> {
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn backward_step<S: Scalar>(
    nodes: &[Node<S>],
    i: usize,
    g: &ArrayD<S>,
    grads: &mut [Option<ArrayD<S>>],
) {
    let g_s = g.as_slice().unwrap();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Unary { kind, c0, c1, a } => {
            if nodes[*a].needs_grad {
                let av = &nodes[*a].value;
                let a_s = av.as_slice().unwrap();
                let y_s = nodes[i].value.as_slice().unwrap();
                let data: Vec<S> = (0..g_s.len())
                    .map(|j| g_s[j] * unary_deriv(*kind, *c0, *c1, a_s[j], y_s[j]))
                    .collect();
                add_into(&mut grads[*a], owned(av.shape(), data));
            }
        }
        Op::Binary {
            kind,
            a,
            b,
            bcast_b,
        } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let a_s = av.as_slice().unwrap();
            let b_s = bv.as_slice().unwrap();
            let k = if *bcast_b { av.shape()[1] } else { 1 };
            let bval = |j: usize| -> S {
                if *bcast_b {
                    b_s[j / k]
                } else {
                    b_s[j]
                }
            };
            if nodes[*a].needs_grad {
                let data: Vec<S> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g_s.to_vec(),
                    BinaryKind::Mul => (0..g_s.len()).map(|j| g_s[j] * bval(j)).collect(),
                    BinaryKind::Div => (0..g_s.len()).map(|j| g_s[j] / bval(j)).collect(),
                    BinaryKind::Atan2 => (0..g_s.len())
                        .map(|j| {
                            let (y, x) = (a_s[j], bval(j));
                            g_s[j] * x / (x * x + y * y)
                        })
                        .collect(),
                };
                add_into(&mut grads[*a], owned(av.shape(), data));
            }
            if nodes[*b].needs_grad {
                let mut data = vec![S::zero(); bv.len()];
                let fold = |data: &mut [S], j: usize, v: S| {
                    if *bcast_b {
                        data[j / k] += v;
                    } else {
                        data[j] = v;
                    }
                };
                match kind {
                    BinaryKind::Add => {
                        for j in 0..g_s.len() {
                            fold(&mut data, j, g_s[j]);
                        }
                    }
                    BinaryKind::Sub => {
                        for j in 0..g_s.len() {
                            fold(&mut data, j, -g_s[j]);
                        }
                    }
                    BinaryKind::Mul => {
                        for j in 0..g_s.len() {
                            fold(&mut data, j, g_s[j] * a_s[j]);
                        }
                    }
                    BinaryKind::Div => {
                        for j in 0..g_s.len() {
                            let b0 = bval(j);
                            fold(&mut data, j, -g_s[j] * a_s[j] / (b0 * b0));
                        }
                    }
                    BinaryKind::Atan2 => {
                        for j in 0..g_s.len() {
                            let (y, x) = (a_s[j], bval(j));
                            fold(&mut data, j, -g_s[j] * y / (x * x + y * y));
                        }
                    }
                }
                add_into(&mut grads[*b], owned(bv.shape(), data));
            }
        }
        Op::Scale { a, c } => {
            if nodes[*a].needs_grad {
                let c = *c;
                let data: Vec<S> = g_s.iter().map(|&v| v * c).collect();
                add_into(&mut grads[*a], owned(nodes[*a].value.shape(), data));
            }
        }
        Op::AddConst { a } => {
            if nodes[*a].needs_grad {
                add_into(&mut grads[*a], g.clone());
            }
        }
        Op::Matmul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].needs_grad {
                // gA = g (m,n) x B^T (n,k)
                let mut data = vec![S::zero(); m * k];
                unsafe {
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        g_s.as_ptr(),
                        n as isize,
                        1,
                        bv.as_ptr(),
                        1,
                        n as isize,
                        S::zero(),
                        data.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
                add_into(&mut grads[*a], owned(av.shape(), data));
            }
            if nodes[*b].needs_grad {
                // gB = A^T (k,m) x g (m,n)
                let mut data = vec![S::zero(); k * n];
                unsafe {
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        av.as_ptr(),
                        1,
                        k as isize,
                        g_s.as_ptr(),
                        n as isize,
                        1,
                        S::zero(),
                        data.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                add_into(&mut grads[*b], owned(bv.shape(), data));
            }
        }
        Op::Conv2d {
            input,
            weight,
            stride,
            pad,
        } => {
            let iv = &nodes[*input].value;
            let wv = &nodes[*weight].value;
            let need_i = nodes[*input].needs_grad;
            let need_w = nodes[*weight].needs_grad;
            let (gi, gw) = conv::backward(iv, wv, g, *stride, *pad, need_i, need_w);
            if let Some(gi) = gi {
                add_into(&mut grads[*input], gi);
            }
            if let Some(gw) = gw {
                add_into(&mut grads[*weight], gw);
            }
        }
        Op::MirrorPad { a, ph, pw } => {
            if nodes[*a].needs_grad {
                let gi = conv::mirror_pad_backward(g, nodes[*a].value.shape(), *ph, *pw);
                add_into(&mut grads[*a], gi);
            }
        }
        Op::BiasAdd { a, bias } => {
            if nodes[*a].needs_grad {
                add_into(&mut grads[*a], g.clone());
            }
            if nodes[*bias].needs_grad {
                let shape = nodes[i].value.shape();
                let blen = nodes[*bias].value.len();
                let mut data = vec![S::zero(); blen];
                match shape.len() {
                    4 => {
                        let (c, hw) = (shape[1], shape[2] * shape[3]);
                        for chunk in g_s.chunks(c * hw) {
                            for (ci, plane) in chunk.chunks(hw).enumerate() {
                                let sum: S = plane.iter().copied().sum();
                                data[ci] += sum;
                            }
                        }
                    }
                    2 => {
                        let kk = shape[1];
                        for row in g_s.chunks(kk) {
                            for (j, &v) in row.iter().enumerate() {
                                data[j] += v;
                            }
                        }
                    }
                    _ => unreachable!(),
                }
                add_into(&mut grads[*bias], owned(&[blen], data));
            }
        }
        Op::Upsample2x { a } => {
            if nodes[*a].needs_grad {
                let s = nodes[*a].value.shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut data = vec![S::zero(); nodes[*a].value.len()];
                for nc in 0..s[0] * s[1] {
                    let src = &g_s[nc * oh * ow..(nc + 1) * oh * ow];
                    let dst = &mut data[nc * h * w..(nc + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            dst[(y / 2) * w + x / 2] += src[y * ow + x];
                        }
                    }
                }
                add_into(&mut grads[*a], owned(s, data));
            }
        }
        Op::ConcatC { a, b } => {
            let sa = nodes[*a].value.shape();
            let sb = nodes[*b].value.shape();
            let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
            if nodes[*a].needs_grad {
                let mut data = vec![S::zero(); nodes[*a].value.len()];
                for i2 in 0..n {
                    let src = &g_s[i2 * (ca + cb) * hw..i2 * (ca + cb) * hw + ca * hw];
                    data[i2 * ca * hw..(i2 + 1) * ca * hw].copy_from_slice(src);
                }
                add_into(&mut grads[*a], owned(sa, data));
            }
            if nodes[*b].needs_grad {
                let mut data = vec![S::zero(); nodes[*b].value.len()];
                for i2 in 0..n {
                    let base = i2 * (ca + cb) * hw + ca * hw;
                    data[i2 * cb * hw..(i2 + 1) * cb * hw].copy_from_slice(&g_s[base..base + cb * hw]);
                }
                add_into(&mut grads[*b], owned(sb, data));
            }
        }
        Op::SliceC { a, start, len } => {
            if nodes[*a].needs_grad {
                let sa = nodes[*a].value.shape();
                let (n, c, hw) = (sa[0], sa[1], sa[2] * sa[3]);
                let mut data = vec![S::zero(); nodes[*a].value.len()];
                for i2 in 0..n {
                    let src = &g_s[i2 * len * hw..(i2 + 1) * len * hw];
                    let base = i2 * c * hw + start * hw;
                    data[base..base + len * hw].copy_from_slice(src);
                }
                add_into(&mut grads[*a], owned(sa, data));
            }
        }
        Op::ChannelMix { a, mat } => {
            if nodes[*a].needs_grad {
                let gi = conv::channel_mix_transposed(g, mat);
                add_into(&mut grads[*a], gi);
            }
        }
        Op::MeanAll { a } => {
            if nodes[*a].needs_grad {
                let n = nodes[*a].value.len();
                let gv = g_s[0] / S::of(n as f64);
                add_into(
                    &mut grads[*a],
                    ArrayD::from_elem(nodes[*a].value.raw_dim(), gv),
                );
            }
        }
        Op::SumAll { a } => {
            if nodes[*a].needs_grad {
                add_into(
                    &mut grads[*a],
                    ArrayD::from_elem(nodes[*a].value.raw_dim(), g_s[0]),
                );
            }
        }
        Op::MeanSpatial { a } => {
            if nodes[*a].needs_grad {
                let s = nodes[*a].value.shape();
                let hw = s[2] * s[3];
                let inv = S::one() / S::of(hw as f64);
                let mut data = vec![S::zero(); nodes[*a].value.len()];
                for (nc, chunk) in data.chunks_mut(hw).enumerate() {
                    let gv = g_s[nc] * inv;
                    for v in chunk {
                        *v = gv;
                    }
                }
                add_into(&mut grads[*a], owned(s, data));
            }
        }
        Op::RowSum { a } => {
            if nodes[*a].needs_grad {
                let s = nodes[*a].value.shape();
                let k = s[1];
                let mut data = vec![S::zero(); nodes[*a].value.len()];
                for (r, chunk) in data.chunks_mut(k).enumerate() {
                    let gv = g_s[r];
                    for v in chunk {
                        *v = gv;
                    }
                }
                add_into(&mut grads[*a], owned(s, data));
            }
        }
        Op::Reshape { a } => {
            if nodes[*a].needs_grad {
                add_into(
                    &mut grads[*a],
                    owned(nodes[*a].value.shape(), g_s.to_vec()),
                );
            }
        }
        Op::Select { mask, a, b } => {
            let m_s = mask.as_slice().unwrap();
            if nodes[*a].needs_grad {
                let data: Vec<S> = (0..g_s.len()).map(|j| g_s[j] * m_s[j]).collect();
                add_into(&mut grads[*a], owned(nodes[*a].value.shape(), data));
            }
            if nodes[*b].needs_grad {
                let data: Vec<S> = (0..g_s.len())
                    .map(|j| g_s[j] * (S::one() - m_s[j]))
                    .collect();
                add_into(&mut grads[*b], owned(nodes[*b].value.shape(), data));
            }
        }
    }
}
