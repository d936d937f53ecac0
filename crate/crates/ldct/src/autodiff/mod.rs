//! A small tape-based reverse-mode differentiation engine over [`ndarray`].
//!
//! Values are computed eagerly and recorded on a [`Tape`]; [`Tape::backward`]
//! then walks the tape once in reverse to accumulate gradients. The op set is
//! deliberately narrow — exactly what the model, losses, and alignment terms
//! need — which keeps every backward rule small enough to verify against
//! finite differences (see the tests at the bottom of this module).
//!
//! Gradients are only materialized for nodes that transitively depend on a
//! node created with [`Tape::param`], so constants (inputs, frozen feature
//! extractors, detached tensors) cost nothing during the backward pass.

pub mod conv;

use crate::{Error, Result};
use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn, NdFloat};
use num_traits::FromPrimitive;

/// Scalar element type the engine is generic over.
///
/// Training runs in `f32`; the gradient-check tests instantiate everything in
/// `f64` so finite-difference comparisons have headroom.
pub trait Elem: NdFloat + FromPrimitive {
    fn cast_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn cast_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }
}

impl Elem for f32 {}
impl Elem for f64 {}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus<E: Elem>(x: E) -> E {
    x.max(E::zero()) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus, i.e. the logistic sigmoid.
pub fn sigmoid<E: Elem>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a forward convolution, shared by its two tape ops.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

enum Op<E: Elem> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// y = x + c; gradient passes through unchanged.
    AddScalar(Var),
    MulScalar(Var, E),
    Abs(Var),
    Sqr(Var),
    Softplus(Var),
    LeakyRelu(Var, E),
    MeanAll(Var),
    SumAll(Var),
    /// `[N, C, H, W] -> [N, C]` mean over the spatial axes.
    SpatialMean(Var),
    /// `[M, C] -> [C]` mean over rows.
    RowMean(Var),
    /// `[M, C] - [C]`, the row vector broadcast over rows.
    SubRow(Var, Var),
    /// `a^T b` for `a: [M, C]`, `b: [M, D]`.
    MatmulTN(Var, Var),
    /// Stack equally-shaped tensors along a new leading axis.
    Stack0(Vec<Var>),
    /// `[A, B, ...] -> [A, ...]` picking index `i` of axis 1.
    SelectAxis1(Var, usize),
    /// Concatenate two `[N, C, H, W]` tensors along channels.
    ConcatC(Var, Var, usize),
    Im2col {
        x: Var,
        dims: ConvDims,
    },
    ConvGemm {
        w: Var,
        b: Var,
        col: Var,
        dims: ConvDims,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    InstanceNorm {
        x: Var,
        /// `1 / sqrt(var + eps)` per `(n, c)`, saved from the forward pass.
        inv_std: ArrayD<E>,
    },
    /// Total KL divergence between `N(mu, softplus(raw_sigma))` and a fixed
    /// Gaussian prior, summed over all elements. Fused into one node so the
    /// tape never materializes per-element intermediates.
    KlGaussian {
        mu: Var,
        raw_sigma: Var,
        prior_mu: ArrayD<E>,
        prior_sigma: ArrayD<E>,
    },
}

struct Node<E: Elem> {
    value: ArrayD<E>,
    requires_grad: bool,
    op: Op<E>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<E: Elem> {
    grads: Vec<Option<ArrayD<E>>>,
}

impl<E: Elem> Gradients<E> {
    /// Gradient of the root with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&ArrayD<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Remove and return the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Records eager tensor ops and replays them in reverse for gradients.
pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of nodes currently recorded.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<E>, requires_grad: bool, op: Op<E>) -> Var {
        // Node values are kept in standard layout so fused kernels can take
        // flat slices (e.g. `concatenate` returns permuted layouts for N>1).
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf; gradients will be accumulated for it.
    pub fn param(&mut self, value: ArrayD<E>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable leaf; treated as a constant.
    pub fn constant(&mut self, value: ArrayD<E>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// 0-dimensional constant.
    pub fn scalar(&mut self, v: E) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Re-enter a computed value as a constant, cutting the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &ArrayD<E> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-dimensional node.
    pub fn scalar_value(&self, v: Var) -> E {
        self.nodes[v.0].value.sum()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(value, self.requires(a) || self.requires(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(value, self.requires(a) || self.requires(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(value, self.requires(a) || self.requires(b), Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v + c);
        self.push(value, self.requires(a), Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: E) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        self.push(value, self.requires(a), Op::MulScalar(a, c))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.abs());
        self.push(value, self.requires(a), Op::Abs(a))
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * v);
        self.push(value, self.requires(a), Op::Sqr(a))
    }

    pub fn softplus_op(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(softplus);
        self.push(value, self.requires(a), Op::Softplus(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: E) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| {
            if v > E::zero() {
                v
            } else {
                slope * v
            }
        });
        self.push(value, self.requires(a), Op::LeakyRelu(a, slope))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = E::cast_usize(self.nodes[a.0].value.len());
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum() / n);
        self.push(value, self.requires(a), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        self.push(value, self.requires(a), Op::SumAll(a))
    }

    /// Global average pooling: `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.ndim() != 4 {
            return Err(Error::shape("spatial_mean", format!("{:?}", v.shape())));
        }
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let denom = E::cast_usize(h * w);
        let mut out = ArrayD::zeros(IxDyn(&[n, c]));
        let v4 = v.view().into_dimensionality::<Ix4>().expect("4-d value");
        for i in 0..n {
            for j in 0..c {
                out[[i, j]] = v4.index_axis(Axis(0), i).index_axis(Axis(0), j).sum() / denom;
            }
        }
        Ok(self.push(out, self.requires(a), Op::SpatialMean(a)))
    }

    /// Mean over rows: `[M, C] -> [C]`.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.ndim() != 2 {
            return Err(Error::shape("row_mean", format!("{:?}", v.shape())));
        }
        let value = v
            .mean_axis(Axis(0))
            .ok_or_else(|| Error::shape("row_mean", "empty axis"))?;
        Ok(self.push(value, self.requires(a), Op::RowMean(a)))
    }

    /// Subtract a row vector from every row: `[M, C] - [C]`.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if va.ndim() != 2 || vr.ndim() != 1 || va.shape()[1] != vr.shape()[0] {
            return Err(Error::shape(
                "sub_row",
                format!("{:?} vs {:?}", va.shape(), vr.shape()),
            ));
        }
        let r1 = vr.view().into_dimensionality::<Ix1>().expect("1-d");
        let mut out = va
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d")
            .to_owned();
        for mut r in out.rows_mut() {
            r -= &r1;
        }
        let value = out.into_dyn();
        Ok(self.push(
            value,
            self.requires(a) || self.requires(row),
            Op::SubRow(a, row),
        ))
    }

    /// `a^T b` for `a: [M, C]`, `b: [M, D]`, yielding `[C, D]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[0] != vb.shape()[0] {
            return Err(Error::shape(
                "matmul_tn",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let a2 = va.view().into_dimensionality::<Ix2>().expect("2-d");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("2-d");
        let value = a2.t().dot(&b2).into_dyn();
        Ok(self.push(
            value,
            self.requires(a) || self.requires(b),
            Op::MatmulTN(a, b),
        ))
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("stack0", "empty input list"))?;
        for &p in parts {
            self.same_shape("stack0", first, p)?;
        }
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::shape("stack0", e.to_string()))?;
        let requires = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(value, requires, Op::Stack0(parts.to_vec())))
    }

    /// Pick index `i` along axis 1.
    pub fn select_axis1(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.ndim() < 2 || i >= v.shape()[1] {
            return Err(Error::shape(
                "select_axis1",
                format!("index {i} in {:?}", v.shape()),
            ));
        }
        let value = v.index_axis(Axis(1), i).to_owned();
        Ok(self.push(value, self.requires(a), Op::SelectAxis1(a, i)))
    }

    /// Concatenate `[N, C1, H, W]` and `[N, C2, H, W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ok = va.ndim() == 4
            && vb.ndim() == 4
            && va.shape()[0] == vb.shape()[0]
            && va.shape()[2] == vb.shape()[2]
            && va.shape()[3] == vb.shape()[3];
        if !ok {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let c1 = va.shape()[1];
        let value = ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
            .map_err(|e| Error::shape("concat_channels", e.to_string()))?;
        Ok(self.push(
            value,
            self.requires(a) || self.requires(b),
            Op::ConcatC(a, b, c1),
        ))
    }

    /// Lower `[N, C, H, W]` input into the column matrix for a `k`-kernel
    /// convolution. Exposed separately from [`Tape::conv_gemm`] so several
    /// weight samples can share one lowering of the same input.
    pub fn im2col_op(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.ndim() != 4 {
            return Err(Error::shape("im2col", format!("{:?}", v.shape())));
        }
        let (n, c_in, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return Err(Error::shape(
                "im2col",
                format!("kernel {k} stride {stride} pad {pad} on {h}x{w}"),
            ));
        }
        let out_h = conv::conv_out_size(h, k, stride, pad);
        let out_w = conv::conv_out_size(w, k, stride, pad);
        let dims = ConvDims {
            n,
            c_in,
            h,
            w,
            c_out: 0,
            k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let positions = n * out_h * out_w;
        let mut col = ArrayD::<E>::zeros(IxDyn(&[c_in * k * k, positions]));
        {
            let xs = v.as_slice().expect("standard layout");
            let cs = col.as_slice_mut().expect("standard layout");
            let img = c_in * h * w;
            for i in 0..n {
                conv::im2col(
                    &xs[i * img..(i + 1) * img],
                    c_in,
                    h,
                    w,
                    k,
                    stride,
                    pad,
                    out_h,
                    out_w,
                    cs,
                    positions,
                    i * out_h * out_w,
                );
            }
        }
        Ok(self.push(col, self.requires(x), Op::Im2col { x, dims }))
    }

    /// Convolution as a GEMM against a previously lowered column matrix.
    ///
    /// `w: [C_out, C_in, k, k]`, `b: [C_out]`, `col` from [`Tape::im2col_op`]
    /// on an input with matching `C_in`/`k`; yields `[N, C_out, H_out, W_out]`.
    pub fn conv_gemm(&mut self, w: Var, b: Var, col: Var) -> Result<Var> {
        let dims = match &self.nodes[col.0].op {
            Op::Im2col { dims, .. } => *dims,
            _ => {
                return Err(Error::shape(
                    "conv_gemm",
                    "col argument was not produced by im2col",
                ))
            }
        };
        let (vw, vb) = (&self.nodes[w.0].value, &self.nodes[b.0].value);
        let ok = vw.ndim() == 4
            && vw.shape()[1] == dims.c_in
            && vw.shape()[2] == dims.k
            && vw.shape()[3] == dims.k
            && vb.ndim() == 1
            && vb.shape()[0] == vw.shape()[0];
        if !ok {
            return Err(Error::shape(
                "conv_gemm",
                format!(
                    "weight {:?} bias {:?} for c_in {} k {}",
                    vw.shape(),
                    vb.shape(),
                    dims.c_in,
                    dims.k
                ),
            ));
        }
        let c_out = vw.shape()[0];
        let dims = ConvDims { c_out, ..dims };
        let ckk = dims.c_in * dims.k * dims.k;
        let w2 = vw
            .view()
            .into_shape_with_order((c_out, ckk))
            .expect("contiguous weight");
        let colv = self.nodes[col.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d col");
        let y2 = w2.dot(&colv); // [c_out, n * out_h * out_w]
        let span = dims.out_h * dims.out_w;
        let mut y = ArrayD::<E>::zeros(IxDyn(&[dims.n, c_out, dims.out_h, dims.out_w]));
        {
            let ys = y.as_slice_mut().expect("standard layout");
            let y2s = y2.as_slice().expect("standard layout");
            for i in 0..dims.n {
                for co in 0..c_out {
                    let dst = (i * c_out + co) * span;
                    let src = co * dims.n * span + i * span;
                    let bias = vb[[co]];
                    for t in 0..span {
                        ys[dst + t] = y2s[src + t] + bias;
                    }
                }
            }
        }
        let requires = self.requires(w) || self.requires(b) || self.requires(col);
        Ok(self.push(y, requires, Op::ConvGemm { w, b, col, dims }))
    }

    /// Standard convolution: [`Tape::im2col_op`] followed by [`Tape::conv_gemm`].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let k = {
            let vw = self.nodes[w.0].value.shape();
            if vw.len() != 4 {
                return Err(Error::shape("conv2d", format!("weight {vw:?}")));
            }
            vw[2]
        };
        let col = self.im2col_op(x, k, stride, pad)?;
        self.conv_gemm(w, b, col)
    }

    /// Transposed convolution (the adjoint of [`Tape::conv2d`] in its spatial
    /// mapping). `x: [N, C_in, H, W]`, `w: [C_in, C_out, k, k]`, `b: [C_out]`;
    /// yields `[N, C_out, (H-1)s - 2p + k, (W-1)s - 2p + k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let ok = vx.ndim() == 4
            && vw.ndim() == 4
            && vw.shape()[0] == vx.shape()[1]
            && vw.shape()[2] == vw.shape()[3]
            && vb.ndim() == 1
            && vb.shape()[0] == vw.shape()[1];
        if !ok {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("x {:?} w {:?} b {:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let (n, c_in, h, w_in) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (c_out, k) = (vw.shape()[1], vw.shape()[2]);
        if stride == 0 || (h - 1) * stride + k < 2 * pad + 1 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("kernel {k} stride {stride} pad {pad} on {h}x{w_in}"),
            ));
        }
        let out_h = conv::tconv_out_size(h, k, stride, pad);
        let out_w = conv::tconv_out_size(w_in, k, stride, pad);
        let dims = ConvDims {
            n,
            c_in,
            h,
            w: w_in,
            c_out,
            k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let value = self.tconv_forward(vx, vw, vb, &dims);
        let requires = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, requires, Op::ConvTranspose { x, w, b, dims }))
    }

    fn tconv_forward(
        &self,
        vx: &ArrayD<E>,
        vw: &ArrayD<E>,
        vb: &ArrayD<E>,
        d: &ConvDims,
    ) -> ArrayD<E> {
        let span = d.h * d.w;
        let positions = d.n * span;
        // x2[ci, n*span + t] = x[n, ci, t]
        let mut x2 = ndarray::Array2::<E>::zeros((d.c_in, positions));
        {
            let xs = vx.as_slice().expect("standard layout");
            let x2s = x2.as_slice_mut().expect("standard layout");
            for i in 0..d.n {
                for ci in 0..d.c_in {
                    let src = (i * d.c_in + ci) * span;
                    let dst = ci * positions + i * span;
                    x2s[dst..dst + span].copy_from_slice(&xs[src..src + span]);
                }
            }
        }
        let w2 = vw
            .view()
            .into_shape_with_order((d.c_in, d.c_out * d.k * d.k))
            .expect("contiguous weight");
        let cols = w2.t().dot(&x2); // [c_out*k*k, positions]
        let mut y = ArrayD::<E>::zeros(IxDyn(&[d.n, d.c_out, d.out_h, d.out_w]));
        {
            let cs = cols.as_slice().expect("standard layout");
            let ys = y.as_slice_mut().expect("standard layout");
            let img = d.c_out * d.out_h * d.out_w;
            for i in 0..d.n {
                conv::col2im_add(
                    cs,
                    d.c_out,
                    d.k,
                    d.stride,
                    d.pad,
                    d.h,
                    d.w,
                    d.out_h,
                    d.out_w,
                    &mut ys[i * img..(i + 1) * img],
                    positions,
                    i * span,
                );
            }
            let plane = d.out_h * d.out_w;
            for i in 0..d.n {
                for co in 0..d.c_out {
                    let bias = vb[[co]];
                    let dst = (i * d.c_out + co) * plane;
                    for t in 0..plane {
                        ys[dst + t] += bias;
                    }
                }
            }
        }
        y
    }

    /// Instance normalization over the spatial axes of `[N, C, H, W]`,
    /// without learned affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: E) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.ndim() != 4 {
            return Err(Error::shape("instance_norm", format!("{:?}", v.shape())));
        }
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let span = E::cast_usize(h * w);
        let mut out = v.clone();
        let mut inv_std = ArrayD::<E>::zeros(IxDyn(&[n, c]));
        {
            let os = out.as_slice_mut().expect("standard layout");
            for i in 0..n {
                for j in 0..c {
                    let base = (i * c + j) * h * w;
                    let chunk = &mut os[base..base + h * w];
                    let mean = chunk.iter().fold(E::zero(), |a, &b| a + b) / span;
                    let var = chunk
                        .iter()
                        .fold(E::zero(), |a, &b| a + (b - mean) * (b - mean))
                        / span;
                    let r = E::one() / (var + eps).sqrt();
                    inv_std[[i, j]] = r;
                    for t in chunk.iter_mut() {
                        *t = (*t - mean) * r;
                    }
                }
            }
        }
        Ok(self.push(out, self.requires(x), Op::InstanceNorm { x, inv_std }))
    }

    /// Total KL divergence `KL(N(mu, softplus(raw_sigma)) || N(mu0, sigma0))`
    /// summed over all elements, as a single 0-dimensional node.
    ///
    /// The priors may either match the posterior shape or be 0-dimensional
    /// scalars, in which case they broadcast.
    pub fn kl_gaussian_node(
        &mut self,
        mu: Var,
        raw_sigma: Var,
        prior_mu: &ArrayD<E>,
        prior_sigma: &ArrayD<E>,
    ) -> Result<Var> {
        self.same_shape("kl_gaussian", mu, raw_sigma)?;
        let vmu = &self.nodes[mu.0].value;
        let dim = vmu.raw_dim();
        let pm = prior_mu
            .broadcast(dim.clone())
            .ok_or_else(|| Error::shape("kl_gaussian", format!("prior_mu {:?}", prior_mu.shape())))?;
        let ps = prior_sigma.broadcast(dim).ok_or_else(|| {
            Error::shape("kl_gaussian", format!("prior_sigma {:?}", prior_sigma.shape()))
        })?;
        if ps.iter().any(|&s| s <= E::zero()) {
            return Err(Error::InvalidArg(
                "kl_gaussian: prior sigma must be positive".into(),
            ));
        }
        let vraw = &self.nodes[raw_sigma.0].value;
        let half = E::cast_f64(0.5);
        let mut total = E::zero();
        ndarray::Zip::from(vmu)
            .and(vraw)
            .and(&pm)
            .and(&ps)
            .for_each(|&m, &r, &m0, &s0| {
                let s = softplus(r);
                let d = m - m0;
                total = total + s0.ln() - s.ln() + (s * s + d * d) / (s0 * s0 + s0 * s0) - half;
            });
        let requires = self.requires(mu) || self.requires(raw_sigma);
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        Ok(self.push(
            value,
            requires,
            Op::KlGaussian {
                mu,
                raw_sigma,
                prior_mu: pm.to_owned(),
                prior_sigma: ps.to_owned(),
            },
        ))
    }

    /// Run the reverse pass from `root` (which must be 0-dimensional) and
    /// return gradients for every parameter that influenced it.
    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        if self.nodes[root.0].value.ndim() != 0 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got {:?}", self.nodes[root.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<ArrayD<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let keep = matches!(self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &g, &mut grads);
            if keep {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<E>>], v: Var, delta: ArrayD<E>) {
        if !self.requires(v) {
            return;
        }
        // Same invariant as node values: stored gradients stay in standard
        // layout so backward kernels can take flat slices.
        let delta = if delta.is_standard_layout() {
            delta
        } else {
            delta.as_standard_layout().into_owned()
        };
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &ArrayD<E>, grads: &mut [Option<ArrayD<E>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    self.accumulate(grads, *a, g * &self.nodes[b.0].value);
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, g * &self.nodes[a.0].value);
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.mapv(|v| v * c));
            }
            Op::Abs(a) => {
                let sign = self.nodes[a.0].value.mapv(|v| {
                    if v > E::zero() {
                        E::one()
                    } else if v < E::zero() {
                        -E::one()
                    } else {
                        E::zero()
                    }
                });
                self.accumulate(grads, *a, g * &sign);
            }
            Op::Sqr(a) => {
                let two = E::cast_f64(2.0);
                self.accumulate(grads, *a, g * &self.nodes[a.0].value.mapv(|v| two * v));
            }
            Op::Softplus(a) => {
                self.accumulate(grads, *a, g * &self.nodes[a.0].value.mapv(sigmoid));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let mask = self.nodes[a.0].value.mapv(|v| {
                    if v > E::zero() {
                        E::one()
                    } else {
                        slope
                    }
                });
                self.accumulate(grads, *a, g * &mask);
            }
            Op::MeanAll(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                let scale = g.sum() / E::cast_usize(self.nodes[a.0].value.len());
                self.accumulate(grads, *a, ArrayD::from_elem(shape, scale));
            }
            Op::SumAll(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                self.accumulate(grads, *a, ArrayD::from_elem(shape, g.sum()));
            }
            Op::SpatialMean(a) => {
                let v = &self.nodes[a.0].value;
                let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
                let denom = E::cast_usize(h * w);
                let mut out = ArrayD::<E>::zeros(v.raw_dim());
                {
                    let os = out.as_slice_mut().expect("standard layout");
                    for i in 0..n {
                        for j in 0..c {
                            let gv = g[[i, j]] / denom;
                            let base = (i * c + j) * h * w;
                            os[base..base + h * w].fill(gv);
                        }
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::RowMean(a) => {
                let v = &self.nodes[a.0].value;
                let m = E::cast_usize(v.shape()[0]);
                let g1 = g.view().into_dimensionality::<Ix1>().expect("1-d grad");
                let mut out = ndarray::Array2::<E>::zeros((v.shape()[0], v.shape()[1]));
                for mut row in out.rows_mut() {
                    row.assign(&g1.mapv(|x| x / m));
                }
                self.accumulate(grads, *a, out.into_dyn());
            }
            Op::SubRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires(*row) {
                    let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                    let neg = g2.sum_axis(Axis(0)).mapv(|v| -v);
                    self.accumulate(grads, *row, neg.into_dyn());
                }
            }
            Op::MatmulTN(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                if self.requires(*a) {
                    let b2 = self.nodes[b.0]
                        .value
                        .view()
                        .into_dimensionality::<Ix2>()
                        .expect("2-d");
                    self.accumulate(grads, *a, b2.dot(&g2.t()).into_dyn());
                }
                if self.requires(*b) {
                    let a2 = self.nodes[a.0]
                        .value
                        .view()
                        .into_dimensionality::<Ix2>()
                        .expect("2-d");
                    self.accumulate(grads, *b, a2.dot(&g2).into_dyn());
                }
            }
            Op::Stack0(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    if self.requires(p) {
                        self.accumulate(grads, p, g.index_axis(Axis(0), i).to_owned());
                    }
                }
            }
            Op::SelectAxis1(a, i) => {
                let mut out = ArrayD::<E>::zeros(self.nodes[a.0].value.raw_dim());
                out.index_axis_mut(Axis(1), *i).assign(g);
                self.accumulate(grads, *a, out);
            }
            Op::ConcatC(a, b, c1) => {
                let c1 = *c1;
                if self.requires(*a) {
                    let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..c1)).to_owned();
                    self.accumulate(grads, *a, ga);
                }
                if self.requires(*b) {
                    let gb = g
                        .slice_axis(Axis(1), ndarray::Slice::from(c1..))
                        .to_owned();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Im2col { x, dims } => {
                let d = dims;
                let span = d.out_h * d.out_w;
                let positions = d.n * span;
                let mut dx = ArrayD::<E>::zeros(IxDyn(&[d.n, d.c_in, d.h, d.w]));
                {
                    let gs = g.as_slice().expect("standard layout");
                    let xs = dx.as_slice_mut().expect("standard layout");
                    let img = d.c_in * d.h * d.w;
                    for i in 0..d.n {
                        conv::col2im_add(
                            gs,
                            d.c_in,
                            d.k,
                            d.stride,
                            d.pad,
                            d.out_h,
                            d.out_w,
                            d.h,
                            d.w,
                            &mut xs[i * img..(i + 1) * img],
                            positions,
                            i * span,
                        );
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConvGemm { w, b, col, dims } => {
                let d = dims;
                let span = d.out_h * d.out_w;
                let positions = d.n * span;
                // g2[co, n*span + t] = g[n, co, t]
                let mut g2 = ndarray::Array2::<E>::zeros((d.c_out, positions));
                {
                    let gs = g.as_slice().expect("standard layout");
                    let g2s = g2.as_slice_mut().expect("standard layout");
                    for i in 0..d.n {
                        for co in 0..d.c_out {
                            let src = (i * d.c_out + co) * span;
                            let dst = co * positions + i * span;
                            g2s[dst..dst + span].copy_from_slice(&gs[src..src + span]);
                        }
                    }
                }
                let ckk = d.c_in * d.k * d.k;
                if self.requires(*w) {
                    let colv = self.nodes[col.0]
                        .value
                        .view()
                        .into_dimensionality::<Ix2>()
                        .expect("2-d col");
                    let dw2 = g2.dot(&colv.t()); // [c_out, ckk]
                    let dw = dw2
                        .into_shape_with_order(IxDyn(&[d.c_out, d.c_in, d.k, d.k]))
                        .expect("contiguous");
                    self.accumulate(grads, *w, dw);
                }
                if self.requires(*b) {
                    let db = g2.sum_axis(Axis(1));
                    self.accumulate(grads, *b, db.into_dyn());
                }
                if self.requires(*col) {
                    let w2 = self.nodes[w.0]
                        .value
                        .view()
                        .into_shape_with_order((d.c_out, ckk))
                        .expect("contiguous weight");
                    let dcol = w2.t().dot(&g2);
                    self.accumulate(grads, *col, dcol.into_dyn());
                }
            }
            Op::ConvTranspose { x, w, b, dims } => {
                let d = dims;
                let span = d.h * d.w;
                let positions = d.n * span;
                let ckk = d.c_out * d.k * d.k;
                // dcols[(co,kh,kw), n*span + t] = g at the scattered location
                let mut dcols = ndarray::Array2::<E>::zeros((ckk, positions));
                {
                    let gs = g.as_slice().expect("standard layout");
                    let ds = dcols.as_slice_mut().expect("standard layout");
                    let img = d.c_out * d.out_h * d.out_w;
                    for i in 0..d.n {
                        conv::im2col(
                            &gs[i * img..(i + 1) * img],
                            d.c_out,
                            d.out_h,
                            d.out_w,
                            d.k,
                            d.stride,
                            d.pad,
                            d.h,
                            d.w,
                            ds,
                            positions,
                            i * span,
                        );
                    }
                }
                if self.requires(*x) {
                    let w2 = self.nodes[w.0]
                        .value
                        .view()
                        .into_shape_with_order((d.c_in, ckk))
                        .expect("contiguous weight");
                    let dx2 = w2.dot(&dcols); // [c_in, positions]
                    let mut dx = ArrayD::<E>::zeros(IxDyn(&[d.n, d.c_in, d.h, d.w]));
                    {
                        let src = dx2.as_slice().expect("standard layout");
                        let dst = dx.as_slice_mut().expect("standard layout");
                        for i in 0..d.n {
                            for ci in 0..d.c_in {
                                let s = ci * positions + i * span;
                                let t = (i * d.c_in + ci) * span;
                                dst[t..t + span].copy_from_slice(&src[s..s + span]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires(*w) {
                    let vx = &self.nodes[x.0].value;
                    let mut x2 = ndarray::Array2::<E>::zeros((d.c_in, positions));
                    {
                        let xs = vx.as_slice().expect("standard layout");
                        let x2s = x2.as_slice_mut().expect("standard layout");
                        for i in 0..d.n {
                            for ci in 0..d.c_in {
                                let src = (i * d.c_in + ci) * span;
                                let dst = ci * positions + i * span;
                                x2s[dst..dst + span].copy_from_slice(&xs[src..src + span]);
                            }
                        }
                    }
                    let dw2 = x2.dot(&dcols.t()); // [c_in, ckk]
                    let dw = dw2
                        .into_shape_with_order(IxDyn(&[d.c_in, d.c_out, d.k, d.k]))
                        .expect("contiguous");
                    self.accumulate(grads, *w, dw);
                }
                if self.requires(*b) {
                    let g4 = g.view().into_dimensionality::<Ix4>().expect("4-d grad");
                    let db = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    self.accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &self.nodes[idx].value;
                let v = &self.nodes[x.0].value;
                let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
                let span = h * w;
                let spanf = E::cast_usize(span);
                let mut dx = ArrayD::<E>::zeros(v.raw_dim());
                {
                    let gs = g.as_slice().expect("standard layout");
                    let ys = y.as_slice().expect("standard layout");
                    let ds = dx.as_slice_mut().expect("standard layout");
                    for i in 0..n {
                        for j in 0..c {
                            let base = (i * c + j) * span;
                            let gch = &gs[base..base + span];
                            let ych = &ys[base..base + span];
                            let gmean =
                                gch.iter().fold(E::zero(), |a, &b| a + b) / spanf;
                            let gymean = gch
                                .iter()
                                .zip(ych)
                                .fold(E::zero(), |a, (&gv, &yv)| a + gv * yv)
                                / spanf;
                            let r = inv_std[[i, j]];
                            for t in 0..span {
                                ds[base + t] = r * (gch[t] - gmean - ych[t] * gymean);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::KlGaussian {
                mu,
                raw_sigma,
                prior_mu,
                prior_sigma,
            } => {
                let gv = g.sum();
                let vmu = &self.nodes[mu.0].value;
                let vraw = &self.nodes[raw_sigma.0].value;
                if self.requires(*mu) {
                    let mut dmu = ArrayD::<E>::zeros(vmu.raw_dim());
                    ndarray::Zip::from(&mut dmu)
                        .and(vmu)
                        .and(prior_mu)
                        .and(prior_sigma)
                        .for_each(|d, &m, &m0, &s0| {
                            *d = gv * (m - m0) / (s0 * s0);
                        });
                    self.accumulate(grads, *mu, dmu);
                }
                if self.requires(*raw_sigma) {
                    let mut draw = ArrayD::<E>::zeros(vraw.raw_dim());
                    ndarray::Zip::from(&mut draw)
                        .and(vraw)
                        .and(prior_sigma)
                        .for_each(|d, &r, &s0| {
                            let s = softplus(r);
                            *d = gv * (-E::one() / s + s / (s0 * s0)) * sigmoid(r);
                        });
                    self.accumulate(grads, *raw_sigma, draw);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn arr(shape: &[usize], tag: &str) -> ArrayD<f64> {
        let mut r = crate::rng::derive(7, tag, 0);
        ArrayD::from_shape_fn(IxDyn(shape), |_| r.gen_range(-1.0..1.0))
    }

    /// Random values bounded away from zero, for ops with a kink there.
    fn arr_nonzero(shape: &[usize], tag: &str) -> ArrayD<f64> {
        let mut r = crate::rng::derive(11, tag, 0);
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let mag: f64 = r.gen_range(0.25..1.0);
            if r.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
    }

    /// Reduce an arbitrary output to a scalar through a fixed random
    /// projection, so gradient errors cannot cancel by symmetry.
    fn project(t: &mut Tape<f64>, out: Var, tag: &str) -> Var {
        let shape = t.value(out).shape().to_vec();
        let p = t.constant(arr(&shape, tag));
        let m = t.mul(out, p).expect("projection");
        t.mean_all(m)
    }

    /// Compare analytic gradients of `build`'s scalar output against central
    /// finite differences, elementwise, for every input.
    fn check_grads<F>(inputs: &[ArrayD<f64>], build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|a| tape.param(a)).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root).expect("backward");
        let eval = |xs: &[ArrayD<f64>]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().cloned().map(|a| t.param(a)).collect();
            let r = build(&mut t, &vs);
            t.scalar_value(r)
        };
        let h = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            let g = grads.get(vars[i]).expect("gradient present");
            assert_eq!(g.shape(), input.shape(), "grad shape for input {i}");
            let gs = g.as_slice().expect("standard layout");
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[e] += h;
                let mut minus = inputs.to_vec();
                minus[i].as_slice_mut().unwrap()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let tol = 5e-6 * (1.0 + fd.abs());
                assert!(
                    (fd - gs[e]).abs() <= tol,
                    "input {i} elem {e}: fd {fd} vs analytic {}",
                    gs[e]
                );
            }
        }
    }

    #[test]
    fn elementwise_op_gradients() {
        let a = arr(&[3, 4], "ew-a");
        let b = arr(&[3, 4], "ew-b");
        check_grads(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            project(t, s, "p-add")
        });
        check_grads(&[a.clone(), b.clone()], |t, v| {
            let s = t.sub(v[0], v[1]).unwrap();
            project(t, s, "p-sub")
        });
        check_grads(&[a.clone(), b], |t, v| {
            let s = t.mul(v[0], v[1]).unwrap();
            project(t, s, "p-mul")
        });
        check_grads(&[a.clone()], |t, v| {
            let s = t.add_scalar(v[0], 0.7);
            project(t, s, "p-adds")
        });
        check_grads(&[a.clone()], |t, v| {
            let s = t.mul_scalar(v[0], -1.3);
            project(t, s, "p-muls")
        });
        check_grads(&[a.clone()], |t, v| {
            let s = t.sqr(v[0]);
            project(t, s, "p-sqr")
        });
        check_grads(&[a], |t, v| {
            let s = t.softplus_op(v[0]);
            project(t, s, "p-sp")
        });
        let nz = arr_nonzero(&[3, 4], "ew-nz");
        check_grads(&[nz.clone()], |t, v| {
            let s = t.abs(v[0]);
            project(t, s, "p-abs")
        });
        check_grads(&[nz], |t, v| {
            let s = t.leaky_relu(v[0], 0.01);
            project(t, s, "p-lrelu")
        });
    }

    #[test]
    fn reduction_op_gradients() {
        let a = arr(&[2, 3, 4, 5], "red-a");
        check_grads(&[a.clone()], |t, v| t.mean_all(v[0]));
        check_grads(&[a.clone()], |t, v| {
            let s = t.sum_all(v[0]);
            t.mul_scalar(s, 0.25)
        });
        check_grads(&[a], |t, v| {
            let s = t.spatial_mean(v[0]).unwrap();
            project(t, s, "p-gap")
        });
        let m = arr(&[5, 3], "red-m");
        check_grads(&[m.clone()], |t, v| {
            let s = t.row_mean(v[0]).unwrap();
            project(t, s, "p-rowmean")
        });
        let r = arr(&[3], "red-r");
        check_grads(&[m, r], |t, v| {
            let s = t.sub_row(v[0], v[1]).unwrap();
            project(t, s, "p-subrow")
        });
    }

    #[test]
    fn matmul_tn_gradients() {
        let a = arr(&[6, 3], "mm-a");
        let b = arr(&[6, 4], "mm-b");
        check_grads(&[a.clone(), b.clone()], |t, v| {
            let s = t.matmul_tn(v[0], v[1]).unwrap();
            project(t, s, "p-mm")
        });
        // value oracle: 2x2 case computed by hand
        let mut t = Tape::<f64>::new();
        let x = t.constant(ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let y = t.constant(ndarray::arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let z = t.matmul_tn(x, y).unwrap();
        // [[1,3],[2,4]] . [[5,6],[7,8]] = [[26,30],[38,44]]
        let want = ndarray::arr2(&[[26.0, 30.0], [38.0, 44.0]]).into_dyn();
        assert_eq!(t.value(z), &want);
    }

    #[test]
    fn structural_op_gradients() {
        let a = arr(&[2, 3], "st-a");
        let b = arr(&[2, 3], "st-b");
        let c = arr(&[2, 3], "st-c");
        check_grads(&[a, b, c], |t, v| {
            let s = t.stack0(&[v[0], v[1], v[2]]).unwrap();
            project(t, s, "p-stack")
        });
        let x = arr(&[2, 4, 3], "st-x");
        check_grads(&[x], |t, v| {
            let s = t.select_axis1(v[0], 2).unwrap();
            project(t, s, "p-sel")
        });
        let p = arr(&[2, 3, 4, 4], "st-p");
        let q = arr(&[2, 2, 4, 4], "st-q");
        check_grads(&[p, q], |t, v| {
            let s = t.concat_channels(v[0], v[1]).unwrap();
            project(t, s, "p-cat")
        });
    }

    /// Convolution computed straight from its definition.
    fn naive_conv2d(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        s: usize,
        p: usize,
    ) -> ArrayD<f64> {
        let (n, cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let oh = conv::conv_out_size(h, k, s, p);
        let ow = conv::conv_out_size(wid, k, s, p);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, cout, oh, ow]));
        for ni in 0..n {
            for co in 0..cout {
                for a in 0..oh {
                    for bb in 0..ow {
                        let mut acc = b[[co]];
                        for ci in 0..cin {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (a * s + kh) as isize - p as isize;
                                    let iw = (bb * s + kw) as isize - p as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < h
                                        && (iw as usize) < wid
                                    {
                                        acc += x[[ni, ci, ih as usize, iw as usize]]
                                            * w[[co, ci, kh, kw]];
                                    }
                                }
                            }
                        }
                        y[[ni, co, a, bb]] = acc;
                    }
                }
            }
        }
        y
    }

    /// Transposed convolution computed by scattering each input pixel.
    fn naive_tconv2d(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        s: usize,
        p: usize,
    ) -> ArrayD<f64> {
        let (n, cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[1], w.shape()[2]);
        let oh = conv::tconv_out_size(h, k, s, p);
        let ow = conv::tconv_out_size(wid, k, s, p);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, cout, oh, ow]));
        for ni in 0..n {
            for co in 0..cout {
                for a in 0..oh {
                    for bb in 0..ow {
                        y[[ni, co, a, bb]] = b[[co]];
                    }
                }
            }
            for ci in 0..cin {
                for i in 0..h {
                    for j in 0..wid {
                        for kh in 0..k {
                            for kw in 0..k {
                                let a = (i * s + kh) as isize - p as isize;
                                let bb = (j * s + kw) as isize - p as isize;
                                if a >= 0 && bb >= 0 && (a as usize) < oh && (bb as usize) < ow {
                                    for co in 0..cout {
                                        y[[ni, co, a as usize, bb as usize]] +=
                                            x[[ni, ci, i, j]] * w[[ci, co, kh, kw]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_naive_and_gradients_check() {
        for &(shape_x, shape_w, s, p, tag) in &[
            (
                [2usize, 3, 6, 5],
                [4usize, 3, 3, 3],
                1usize,
                1usize,
                "conv-a",
            ),
            ([1, 2, 7, 6], [3, 2, 4, 4], 2, 1, "conv-b"),
        ] {
            let x = arr(&shape_x, &format!("{tag}-x"));
            let w = arr(&shape_w, &format!("{tag}-w"));
            let b = arr(&[shape_w[0]], &format!("{tag}-b"));
            let mut t = Tape::<f64>::new();
            let (vx, vw, vb) = (
                t.constant(x.clone()),
                t.constant(w.clone()),
                t.constant(b.clone()),
            );
            let y = t.conv2d(vx, vw, vb, s, p).unwrap();
            let want = naive_conv2d(&x, &w, &b, s, p);
            assert_eq!(t.value(y).shape(), want.shape());
            for (a, b) in t.value(y).iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
            check_grads(&[x, w, b], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], s, p).unwrap();
                project(t, y, &format!("{tag}-proj"))
            });
        }
    }

    #[test]
    fn conv_gemm_shares_one_im2col_between_weight_samples() {
        let x = arr(&[2, 3, 5, 5], "share-x");
        let w1 = arr(&[2, 3, 3, 3], "share-w1");
        let w2 = arr(&[2, 3, 3, 3], "share-w2");
        let b = arr(&[2], "share-b");
        check_grads(&[x, w1, w2, b], |t, v| {
            let col = t.im2col_op(v[0], 3, 1, 1).unwrap();
            let y1 = t.conv_gemm(v[1], v[3], col).unwrap();
            let y2 = t.conv_gemm(v[2], v[3], col).unwrap();
            let p1 = project(t, y1, "share-p1");
            let p2 = project(t, y2, "share-p2");
            t.add(p1, p2).unwrap()
        });
    }

    #[test]
    fn conv_transpose2d_matches_naive_and_gradients_check() {
        for &(shape_x, shape_w, s, p, tag) in &[
            (
                [2usize, 3, 4, 5],
                [3usize, 2, 3, 3],
                1usize,
                1usize,
                "tconv-a",
            ),
            ([1, 2, 3, 4], [2, 3, 4, 4], 2, 1, "tconv-b"),
        ] {
            let x = arr(&shape_x, &format!("{tag}-x"));
            let w = arr(&shape_w, &format!("{tag}-w"));
            let b = arr(&[shape_w[1]], &format!("{tag}-b"));
            let mut t = Tape::<f64>::new();
            let (vx, vw, vb) = (
                t.constant(x.clone()),
                t.constant(w.clone()),
                t.constant(b.clone()),
            );
            let y = t.conv_transpose2d(vx, vw, vb, s, p).unwrap();
            let want = naive_tconv2d(&x, &w, &b, s, p);
            assert_eq!(t.value(y).shape(), want.shape());
            for (a, b) in t.value(y).iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
            check_grads(&[x, w, b], |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], v[2], s, p).unwrap();
                project(t, y, &format!("{tag}-proj"))
            });
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> when they share weights
        // (with zero bias), pinning the two spatial mappings to each other.
        // Needs exact geometry: (h + 2p - k) divisible by the stride.
        let x = arr(&[1, 2, 7, 7], "adj-x");
        let w = arr(&[3, 2, 3, 3], "adj-w"); // conv weight [cout, cin, k, k]
        let zero3 = ArrayD::<f64>::zeros(IxDyn(&[3]));
        let zero2 = ArrayD::<f64>::zeros(IxDyn(&[2]));
        let mut t = Tape::<f64>::new();
        let vx = t.constant(x.clone());
        let vw = t.constant(w.clone());
        let vb3 = t.constant(zero3);
        let cy = t.conv2d(vx, vw, vb3, 2, 1).unwrap();
        let y = arr(t.value(cy).shape(), "adj-y");
        let lhs: f64 = (t.value(cy) * &y).sum();
        // transposed conv expects weights as [cin_of_tconv = cout, cout, k, k]
        let mut wt = ArrayD::<f64>::zeros(IxDyn(&[3, 2, 3, 3]));
        for co in 0..3 {
            for ci in 0..2 {
                for kh in 0..3 {
                    for kw in 0..3 {
                        wt[[co, ci, kh, kw]] = w[[co, ci, kh, kw]];
                    }
                }
            }
        }
        let vy = t.constant(y);
        let vwt = t.constant(wt);
        let vb2 = t.constant(zero2);
        let back = t.conv_transpose2d(vy, vwt, vb2, 2, 1).unwrap();
        let rhs: f64 = (t.value(back) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn instance_norm_value_and_gradients() {
        let x = arr(&[2, 3, 4, 4], "in-x");
        let eps = 1e-5;
        let mut t = Tape::<f64>::new();
        let vx = t.constant(x.clone());
        let y = t.instance_norm(vx, eps).unwrap();
        // every (n, c) plane has mean ~0 and variance ~1
        for n in 0..2 {
            for c in 0..3 {
                let plane: Vec<f64> = (0..16)
                    .map(|i| t.value(y)[[n, c, i / 4, i % 4]])
                    .collect();
                let mean: f64 = plane.iter().sum::<f64>() / 16.0;
                let var: f64 = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-4);
            }
        }
        check_grads(&[x], |t, v| {
            let y = t.instance_norm(v[0], eps).unwrap();
            project(t, y, "in-proj")
        });
    }

    #[test]
    fn kl_gaussian_node_value_and_gradients() {
        // raw chosen so softplus(raw) = 1 -> KL(N(mu, 1) || N(0, 1)) = mu^2/2
        let raw_unit = (1f64.exp() - 1.0).ln();
        let mut t = Tape::<f64>::new();
        let mu = t.constant(ndarray::arr1(&[0.0, 1.0, 2.0]).into_dyn());
        let raw = t.constant(ArrayD::from_elem(IxDyn(&[3]), raw_unit));
        let pm = ArrayD::from_elem(IxDyn(&[]), 0.0);
        let ps = ArrayD::from_elem(IxDyn(&[]), 1.0);
        let kl = t.kl_gaussian_node(mu, raw, &pm, &ps).unwrap();
        let want = 0.0 + 0.5 + 2.0;
        assert!((t.scalar_value(kl) - want).abs() < 1e-10);

        let mu = arr(&[2, 3], "kl-mu");
        let raw = arr(&[2, 3], "kl-raw");
        let pmu = arr(&[2, 3], "kl-pmu");
        let psig = arr(&[2, 3], "kl-psig").mapv(|v| 0.5 + v.abs());
        check_grads(&[mu, raw], |t, v| {
            let kl = t.kl_gaussian_node(v[0], v[1], &pmu, &psig).unwrap();
            t.mul_scalar(kl, 0.37)
        });
    }

    #[test]
    fn detach_and_constants_block_gradients() {
        let a = arr(&[2, 2], "det-a");
        let mut t = Tape::<f64>::new();
        let va = t.param(a.clone());
        let sq = t.sqr(va);
        let cut = t.detach(sq);
        let root = t.mean_all(cut);
        let grads = t.backward(root).unwrap();
        assert!(grads.get(va).is_none(), "detach must stop the flow");

        let mut t = Tape::<f64>::new();
        let vc = t.constant(a);
        let sq = t.sqr(vc);
        let root = t.mean_all(sq);
        let grads = t.backward(root).unwrap();
        assert!(grads.get(vc).is_none(), "constants never get gradients");
    }

    #[test]
    fn shape_and_usage_errors_are_reported() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(arr(&[2, 3], "err-a"));
        let b = t.constant(arr(&[3, 2], "err-b"));
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.spatial_mean(a), Err(Error::Shape { .. })));
        assert!(matches!(t.backward(a), Err(Error::Shape { .. })));
        // conv_gemm demands a col node produced by im2col_op
        let w = t.constant(arr(&[2, 3, 3, 3], "err-w"));
        let bias = t.constant(arr(&[2], "err-bias"));
        assert!(matches!(
            t.conv_gemm(w, bias, a),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn scalar_helpers_round_trip() {
        let mut t = Tape::<f64>::new();
        let s = t.scalar(2.5);
        assert_eq!(t.scalar_value(s), 2.5);
        assert_eq!(t.value(s).ndim(), 0);
        let d = t.add_scalar(s, 0.5);
        assert_eq!(t.scalar_value(d), 3.0);
        assert_eq!(t.len(), 2);
        assert!(!t.is_empty());
    }
}
