//! Tape operations: elementwise math, matrix products, shape moves, softmax,
//! layer norm, token/patch rearrangement and the fused cross-entropy.
//!
//! Backward rules return dense gradients in the exact shape of each parent.
//! Elementwise kernels operate on contiguous slices; every node value is kept
//! in standard layout by construction.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array3, ArrayD, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMut3, Axis, Ix2, Ix3, IxDyn, Slice};

use crate::math::{fast_tanh, matmul_par, matmul_par_cols, par_map_inplace, par_zip_inplace, sigmoid};
use crate::tape::{BackwardOp, NodeId, Tape};

fn as2(x: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    x.view().into_dimensionality::<Ix2>().expect("expected 2-d")
}

fn reshaped(x: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    assert_eq!(x.len(), shape.iter().product::<usize>(), "reshape length");
    let v: Vec<f64> = x.as_standard_layout().iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

fn zip_map(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64 + Sync) -> ArrayD<f64> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let mut out = a.clone();
    par_zip_inplace(
        out.as_slice_mut().expect("standard layout"),
        b.as_slice().expect("standard layout"),
        f,
    );
    out
}

fn unary_map(a: &ArrayD<f64>, f: impl Fn(f64) -> f64 + Sync) -> ArrayD<f64> {
    let mut out = a.clone();
    par_map_inplace(out.as_slice_mut().expect("standard layout"), f);
    out
}

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

struct AddOp;
impl BackwardOp for AddOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![g.clone(), g.clone()]
    }
}

struct SubOp;
impl BackwardOp for SubOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![g.clone(), g.mapv(|v| -v)]
    }
}

struct MulOp;
impl BackwardOp for MulOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![zip_map(g, i[1], |gv, b| gv * b), zip_map(g, i[0], |gv, a| gv * a)]
    }
}

// ---------------------------------------------------------------------------
// Elementwise unary ops (constant captured where needed)
// ---------------------------------------------------------------------------

struct AddScalarOp;
impl BackwardOp for AddScalarOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![g.clone()]
    }
}

struct MulScalarOp {
    c: f64,
}
impl BackwardOp for MulScalarOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![g.mapv(|v| v * self.c)]
    }
}

struct MulConstOp {
    c: ArrayD<f64>,
}
impl BackwardOp for MulConstOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![zip_map(g, &self.c, |gv, c| gv * c)]
    }
}

struct TanhOp;
impl BackwardOp for TanhOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![zip_map(g, o, |gv, y| gv * (1.0 - y * y))]
    }
}

struct SigmoidOp;
impl BackwardOp for SigmoidOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![zip_map(g, o, |gv, y| gv * y * (1.0 - y))]
    }
}

struct ExpOp;
impl BackwardOp for ExpOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![zip_map(g, o, |gv, y| gv * y)]
    }
}

struct LnClampedOp {
    min: f64,
}
impl BackwardOp for LnClampedOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![zip_map(g, i[0], |gv, x| if x > self.min { gv / x } else { 0.0 })]
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

struct GeluOp;
impl BackwardOp for GeluOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![zip_map(g, i[0], |gv, x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = fast_tanh(u);
            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
        })]
    }
}

struct SiluOp;
impl BackwardOp for SiluOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![zip_map(g, i[0], |gv, x| {
            let s = sigmoid(x);
            gv * s * (1.0 + x * (1.0 - s))
        })]
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

struct MatMulOp;
impl BackwardOp for MatMulOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let g2 = as2(g);
        let a = as2(i[0]);
        let b = as2(i[1]);
        let ga = matmul_par(g2, b.t());
        let gb = matmul_par_cols(a.t(), g2);
        vec![ga.into_dyn(), gb.into_dyn()]
    }
}

struct AffineOp;
impl BackwardOp for AffineOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let g2 = as2(g);
        let x = as2(i[0]);
        let w = as2(i[1]);
        let gx = matmul_par(g2, w.t());
        let gw = matmul_par_cols(x.t(), g2);
        let gb = g2.sum_axis(Axis(0));
        vec![gx.into_dyn(), gw.into_dyn(), gb.into_dyn()]
    }
}

/// Batched matmul `[B,m,k] x [B,k,n] -> [B,m,n]`, optionally transposing the
/// second operand (`[B,n,k]` input).
struct BmmOp {
    transpose_b: bool,
}
fn bmm_backward_range(
    g3: &ArrayView3<'_, f64>,
    a: &ArrayView3<'_, f64>,
    b: &ArrayView3<'_, f64>,
    ga: &mut ArrayViewMut3<'_, f64>,
    gb: &mut ArrayViewMut3<'_, f64>,
    transpose_b: bool,
) {
    for bi in 0..a.shape()[0] {
        let gs = g3.index_axis(Axis(0), bi);
        let av = a.index_axis(Axis(0), bi);
        let bv = b.index_axis(Axis(0), bi);
        let mut gav = ga.index_axis_mut(Axis(0), bi);
        let mut gbv = gb.index_axis_mut(Axis(0), bi);
        if transpose_b {
            // out = a . b^T : ga = g . b ; gb = g^T . a
            general_mat_mul(1.0, &gs, &bv, 0.0, &mut gav);
            general_mat_mul(1.0, &gs.t(), &av, 0.0, &mut gbv);
        } else {
            general_mat_mul(1.0, &gs, &bv.t(), 0.0, &mut gav);
            general_mat_mul(1.0, &av.t(), &gs, 0.0, &mut gbv);
        }
    }
}

impl BackwardOp for BmmOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let a = i[0].view().into_dimensionality::<Ix3>().unwrap();
        let b = i[1].view().into_dimensionality::<Ix3>().unwrap();
        let mut ga = Array3::<f64>::zeros(a.raw_dim());
        let mut gb = Array3::<f64>::zeros(b.raw_dim());
        let batch = a.shape()[0];
        if batch < 2 {
            bmm_backward_range(&g3, &a, &b, &mut ga.view_mut(), &mut gb.view_mut(), self.transpose_b);
        } else {
            let mid = batch / 2;
            let (g1, g2) = g3.split_at(Axis(0), mid);
            let (a1, a2) = a.split_at(Axis(0), mid);
            let (b1, b2) = b.split_at(Axis(0), mid);
            let (mut ga1, mut ga2) = ga.view_mut().split_at(Axis(0), mid);
            let (mut gb1, mut gb2) = gb.view_mut().split_at(Axis(0), mid);
            let tb = self.transpose_b;
            rayon::join(
                || bmm_backward_range(&g1, &a1, &b1, &mut ga1, &mut gb1, tb),
                || bmm_backward_range(&g2, &a2, &b2, &mut ga2, &mut gb2, tb),
            );
        }
        vec![ga.into_dyn(), gb.into_dyn()]
    }
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

fn par_rows1(a: &mut [f64], row: usize, f: impl Fn(&mut [f64]) + Sync) {
    let rows = a.len() / row;
    if rows < 16 {
        for ra in a.chunks_exact_mut(row) {
            f(ra);
        }
    } else {
        let mid = (rows / 2) * row;
        let (a1, a2) = a.split_at_mut(mid);
        rayon::join(
            || {
                for ra in a1.chunks_exact_mut(row) {
                    f(ra);
                }
            },
            || {
                for ra in a2.chunks_exact_mut(row) {
                    f(ra);
                }
            },
        );
    }
}

fn par_rows2(
    a: &mut [f64],
    b: &[f64],
    row: usize,
    f: impl Fn(&mut [f64], &[f64]) + Sync,
) {
    let rows = a.len() / row;
    if rows < 16 {
        for (ra, rb) in a.chunks_exact_mut(row).zip(b.chunks_exact(row)) {
            f(ra, rb);
        }
    } else {
        let mid = (rows / 2) * row;
        let (a1, a2) = a.split_at_mut(mid);
        let (b1, b2) = b.split_at(mid);
        rayon::join(
            || {
                for (ra, rb) in a1.chunks_exact_mut(row).zip(b1.chunks_exact(row)) {
                    f(ra, rb);
                }
            },
            || {
                for (ra, rb) in a2.chunks_exact_mut(row).zip(b2.chunks_exact(row)) {
                    f(ra, rb);
                }
            },
        );
    }
}

struct SoftmaxOp;
impl BackwardOp for SoftmaxOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let mut gx = g.clone();
        let row = o.shape()[o.ndim() - 1];
        par_rows2(
            gx.as_slice_mut().unwrap(),
            o.as_slice().unwrap(),
            row,
            |gl, sl| {
                let dot: f64 = gl.iter().zip(sl.iter()).map(|(a, b)| a * b).sum();
                for (gv, &sv) in gl.iter_mut().zip(sl.iter()) {
                    *gv = (*gv - dot) * sv;
                }
            },
        );
        vec![gx]
    }
}

fn par_rows3(
    a: &mut [f64],
    b: &[f64],
    c: &[f64],
    row: usize,
    f: impl Fn(&mut [f64], &[f64], &[f64]) + Sync,
) {
    let rows = a.len() / row;
    if rows < 16 {
        for ((ra, rb), rc) in a
            .chunks_exact_mut(row)
            .zip(b.chunks_exact(row))
            .zip(c.chunks_exact(row))
        {
            f(ra, rb, rc);
        }
    } else {
        let mid = (rows / 2) * row;
        let (a1, a2) = a.split_at_mut(mid);
        let (b1, b2) = b.split_at(mid);
        let (c1, c2) = c.split_at(mid);
        rayon::join(
            || {
                for ((ra, rb), rc) in a1
                    .chunks_exact_mut(row)
                    .zip(b1.chunks_exact(row))
                    .zip(c1.chunks_exact(row))
                {
                    f(ra, rb, rc);
                }
            },
            || {
                for ((ra, rb), rc) in a2
                    .chunks_exact_mut(row)
                    .zip(b2.chunks_exact(row))
                    .zip(c2.chunks_exact(row))
                {
                    f(ra, rb, rc);
                }
            },
        );
    }
}

struct LayerNormOp {
    eps: f64,
}
impl BackwardOp for LayerNormOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let row = g.shape()[g.ndim() - 1];
        let n = row as f64;
        let eps = self.eps;
        let mut gx = g.clone();
        par_rows3(
            gx.as_slice_mut().unwrap(),
            i[0].as_slice().unwrap(),
            o.as_slice().unwrap(),
            row,
            |gl, xl, yl| {
                let mean = xl.iter().sum::<f64>() / n;
                let var = xl.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + eps).sqrt();
                let g_mean: f64 = gl.iter().sum::<f64>() / n;
                let gy_mean: f64 = gl.iter().zip(yl.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                for (gv, &yv) in gl.iter_mut().zip(yl.iter()) {
                    *gv = inv_std * (*gv - g_mean - yv * gy_mean);
                }
            },
        );
        vec![gx]
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

struct SumAllOp {
    shape: Vec<usize>,
}
impl BackwardOp for SumAllOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let gv = *g.iter().next().unwrap();
        vec![ArrayD::from_elem(IxDyn(&self.shape), gv)]
    }
}

struct MeanAllOp {
    shape: Vec<usize>,
}
impl BackwardOp for MeanAllOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let n: usize = self.shape.iter().product();
        let gv = *g.iter().next().unwrap() / n as f64;
        vec![ArrayD::from_elem(IxDyn(&self.shape), gv)]
    }
}

// ---------------------------------------------------------------------------
// Shape moves
// ---------------------------------------------------------------------------

struct ReshapeOp {
    orig: Vec<usize>,
}
impl BackwardOp for ReshapeOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![reshaped(g, &self.orig)]
    }
}

struct PermuteOp {
    axes: Vec<usize>,
}
impl BackwardOp for PermuteOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let mut inverse = vec![0usize; self.axes.len()];
        for (to, &from) in self.axes.iter().enumerate() {
            inverse[from] = to;
        }
        vec![g
            .view()
            .permuted_axes(IxDyn(&inverse))
            .as_standard_layout()
            .to_owned()]
    }
}

struct SliceAxisOp {
    axis: usize,
    start: usize,
}
impl BackwardOp for SliceAxisOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let mut gx = ArrayD::zeros(i[0].raw_dim());
        let len = g.shape()[self.axis];
        gx.slice_axis_mut(
            Axis(self.axis),
            Slice::from(self.start..self.start + len),
        )
        .assign(g);
        vec![gx]
    }
}

struct RepeatRowsOp {
    times: usize,
}
impl BackwardOp for RepeatRowsOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let g2 = as2(g);
        let rows = i[0].shape()[0];
        let cols = i[0].shape()[1];
        let mut gx = ndarray::Array2::<f64>::zeros((rows, cols));
        for r in 0..rows {
            for j in 0..self.times {
                let src = g2.row(r * self.times + j);
                let mut dst = gx.row_mut(r);
                dst += &src;
            }
        }
        vec![gx.into_dyn()]
    }
}

struct GatherRowsOp {
    indices: Vec<usize>,
}
impl BackwardOp for GatherRowsOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let g2 = as2(g);
        let mut gt = ndarray::Array2::<f64>::zeros((i[0].shape()[0], i[0].shape()[1]));
        for (b, &row) in self.indices.iter().enumerate() {
            let mut dst = gt.row_mut(row);
            dst += &g2.row(b);
        }
        vec![gt.into_dyn()]
    }
}

// ---------------------------------------------------------------------------
// Patch <-> grid rearrangement
// ---------------------------------------------------------------------------

/// Rearrange `[batch, channels, s, s]` into per-patch rows `[batch*n, p*p*c]`
/// where `n = (s/p)^2`. Patch vectors are flattened row-major over (py, px)
/// with the channel index fastest.
pub fn patchify_grid(grid: &ArrayViewD<'_, f64>, p: usize) -> ArrayD<f64> {
    let sh = grid.shape();
    assert_eq!(sh.len(), 4, "patchify expects [b,c,s,s]");
    let (b, c, s) = (sh[0], sh[1], sh[2]);
    assert_eq!(sh[2], sh[3], "patchify expects square grids");
    assert_eq!(s % p, 0, "patch size must divide spatial size");
    let gs = s / p;
    let n = gs * gs;
    let mut out = ndarray::Array2::<f64>::zeros((b * n, p * p * c));
    for bi in 0..b {
        for gy in 0..gs {
            for gx in 0..gs {
                let row = bi * n + gy * gs + gx;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            out[[row, (py * p + px) * c + ch]] =
                                grid[[bi, ch, gy * p + py, gx * p + px]];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

/// Exact inverse of [`patchify_grid`].
pub fn unpatchify_grid(rows: &ArrayViewD<'_, f64>, b: usize, c: usize, s: usize, p: usize) -> ArrayD<f64> {
    let gs = s / p;
    let n = gs * gs;
    assert_eq!(rows.shape(), [b * n, p * p * c], "unpatchify shape");
    let mut out = ndarray::Array4::<f64>::zeros((b, c, s, s));
    for bi in 0..b {
        for gy in 0..gs {
            for gx in 0..gs {
                let row = bi * n + gy * gs + gx;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            out[[bi, ch, gy * p + py, gx * p + px]] =
                                rows[[row, (py * p + px) * c + ch]];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

struct UnpatchifyOp {
    p: usize,
}
impl BackwardOp for UnpatchifyOp {
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![patchify_grid(&g.view(), self.p)]
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct CrossEntropyOp {
    targets: Vec<usize>,
}
impl BackwardOp for CrossEntropyOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let logits = as2(i[0]);
        let b = logits.nrows();
        let scale = *g.iter().next().unwrap() / b as f64;
        let mut gx = ndarray::Array2::<f64>::zeros(logits.raw_dim());
        for r in 0..b {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            for (cidx, &v) in row.iter().enumerate() {
                let p = (v - m).exp() / z;
                gx[[r, cidx]] = scale * (p - if cidx == self.targets[r] { 1.0 } else { 0.0 });
            }
        }
        vec![gx.into_dyn()]
    }
}

// ---------------------------------------------------------------------------
// Tape methods
// ---------------------------------------------------------------------------

impl Tape {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, vec![a, b], Some(Box::new(AddOp)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, vec![a, b], Some(Box::new(SubOp)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, vec![a, b], Some(Box::new(MulOp)))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, vec![a], Some(Box::new(AddScalarOp)))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, vec![a], Some(Box::new(MulScalarOp { c })))
    }

    /// Elementwise `a + c` with a constant array (no gradient into `c`).
    pub fn add_const(&mut self, a: NodeId, c: &ArrayD<f64>) -> NodeId {
        let v = zip_map(self.value(a), c, |x, y| x + y);
        self.push(v, vec![a], Some(Box::new(AddScalarOp)))
    }

    /// Elementwise `a * c` with a constant array.
    pub fn mul_const(&mut self, a: NodeId, c: &ArrayD<f64>) -> NodeId {
        let v = zip_map(self.value(a), c, |x, y| x * y);
        self.push(v, vec![a], Some(Box::new(MulConstOp { c: c.clone() })))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = unary_map(self.value(a), fast_tanh);
        self.push(v, vec![a], Some(Box::new(TanhOp)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = unary_map(self.value(a), sigmoid);
        self.push(v, vec![a], Some(Box::new(SigmoidOp)))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = unary_map(self.value(a), f64::exp);
        self.push(v, vec![a], Some(Box::new(ExpOp)))
    }

    /// `ln(max(x, min))`; gradient is zero on the clamped region.
    pub fn ln_clamped(&mut self, a: NodeId, min: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(min).ln());
        self.push(v, vec![a], Some(Box::new(LnClampedOp { min })))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = unary_map(self.value(a), |x| {
            0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
        });
        self.push(v, vec![a], Some(Box::new(GeluOp)))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = unary_map(self.value(a), |x| x * sigmoid(x));
        self.push(v, vec![a], Some(Box::new(SiluOp)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_par(as2(self.value(a)), as2(self.value(b)));
        self.push(v.into_dyn(), vec![a, b], Some(Box::new(MatMulOp)))
    }

    /// `x · w + bias`, with `x: [m,k]`, `w: [k,n]`, `bias: [n]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> NodeId {
        let xv = as2(self.value(x));
        let wv = as2(self.value(w));
        let bv = self.value(bias);
        assert_eq!(bv.ndim(), 1);
        let mut out = matmul_par(xv, wv);
        let bs = bv.as_slice().unwrap();
        for row in out.as_slice_mut().unwrap().chunks_exact_mut(bs.len()) {
            for (r, &bb) in row.iter_mut().zip(bs.iter()) {
                *r += bb;
            }
        }
        self.push(out.into_dyn(), vec![x, w, bias], Some(Box::new(AffineOp)))
    }

    /// Batched `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm_nn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bmm(a, b, false)
    }

    /// Batched `[B,m,k] x [B,n,k]^T -> [B,m,n]`.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bmm(a, b, true)
    }

    fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch mismatch");
        let (m, n) = if transpose_b {
            assert_eq!(av.shape()[2], bv.shape()[2], "bmm inner dim");
            (av.shape()[1], bv.shape()[1])
        } else {
            assert_eq!(av.shape()[2], bv.shape()[1], "bmm inner dim");
            (av.shape()[1], bv.shape()[2])
        };
        let batch = av.shape()[0];
        let mut out = Array3::<f64>::zeros((batch, m, n));
        let run = |a3: &ArrayView3<'_, f64>, b3: &ArrayView3<'_, f64>, o3: &mut ArrayViewMut3<'_, f64>| {
            for bi in 0..a3.shape()[0] {
                let ai = a3.index_axis(Axis(0), bi);
                let bim = b3.index_axis(Axis(0), bi);
                let mut oi = o3.index_axis_mut(Axis(0), bi);
                if transpose_b {
                    general_mat_mul(1.0, &ai, &bim.t(), 0.0, &mut oi);
                } else {
                    general_mat_mul(1.0, &ai, &bim, 0.0, &mut oi);
                }
            }
        };
        if batch < 2 {
            run(&av, &bv, &mut out.view_mut());
        } else {
            let mid = batch / 2;
            let (a1, a2) = av.split_at(Axis(0), mid);
            let (b1, b2) = bv.split_at(Axis(0), mid);
            let (mut o1, mut o2) = out.view_mut().split_at(Axis(0), mid);
            rayon::join(|| run(&a1, &b1, &mut o1), || run(&a2, &b2, &mut o2));
        }
        self.push(out.into_dyn(), vec![a, b], Some(Box::new(BmmOp { transpose_b })))
    }

    /// Softmax along the last axis (max-subtracted for stability).
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let row = v.shape()[v.ndim() - 1];
        par_rows1(v.as_slice_mut().unwrap(), row, |lane| {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in lane.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in lane.iter_mut() {
                *x /= z;
            }
        });
        self.push(v, vec![a], Some(Box::new(SoftmaxOp)))
    }

    /// Layer norm over the last axis, no learned affine.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let mut v = self.value(a).clone();
        let row = v.shape()[v.ndim() - 1];
        let n = row as f64;
        par_rows1(v.as_slice_mut().unwrap(), row, |lane| {
            let mean = lane.iter().sum::<f64>() / n;
            let var = lane.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + eps).sqrt();
            for x in lane.iter_mut() {
                *x = (*x - mean) * inv_std;
            }
        });
        self.push(v, vec![a], Some(Box::new(LayerNormOp { eps })))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let shape = self.value(a).shape().to_vec();
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(v, vec![a], Some(Box::new(SumAllOp { shape })))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let shape = self.value(a).shape().to_vec();
        let n: usize = shape.iter().product();
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum() / n as f64);
        self.push(v, vec![a], Some(Box::new(MeanAllOp { shape })))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let orig = self.value(a).shape().to_vec();
        let v = reshaped(self.value(a), shape);
        self.push(v, vec![a], Some(Box::new(ReshapeOp { orig })))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push(v, vec![a], Some(Box::new(PermuteOp { axes: axes.to_vec() })))
    }

    pub fn slice_axis(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(v, vec![a], Some(Box::new(SliceAxisOp { axis, start })))
    }

    /// Repeat each row of `[b,h]` `times` times consecutively -> `[b*times,h]`.
    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        let x = as2(self.value(a));
        let (rows, cols) = (x.nrows(), x.ncols());
        let mut out = ndarray::Array2::<f64>::zeros((rows * times, cols));
        for r in 0..rows {
            for j in 0..times {
                out.row_mut(r * times + j).assign(&x.row(r));
            }
        }
        self.push(out.into_dyn(), vec![a], Some(Box::new(RepeatRowsOp { times })))
    }

    /// Row lookup `table[[indices]] -> [len(indices), h]` with scatter-add backward.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let t = as2(self.value(table));
        let mut out = ndarray::Array2::<f64>::zeros((indices.len(), t.ncols()));
        for (b, &row) in indices.iter().enumerate() {
            assert!(row < t.nrows(), "gather index {row} out of range");
            out.row_mut(b).assign(&t.row(row));
        }
        self.push(
            out.into_dyn(),
            vec![table],
            Some(Box::new(GatherRowsOp {
                indices: indices.to_vec(),
            })),
        )
    }

    /// Patch rows back to a grid; see [`unpatchify_grid`] for the layout.
    pub fn unpatchify(&mut self, a: NodeId, b: usize, c: usize, s: usize, p: usize) -> NodeId {
        let v = unpatchify_grid(&self.value(a).view(), b, c, s, p);
        self.push(v, vec![a], Some(Box::new(UnpatchifyOp { p })))
    }

    /// Mean cross-entropy of logits `[b, classes]` against integer targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let x = as2(self.value(logits));
        assert_eq!(x.nrows(), targets.len());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            assert!(t < row.len(), "target class out of range");
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            total += m + z.ln() - row[t];
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total / targets.len() as f64);
        self.push(
            v,
            vec![logits],
            Some(Box::new(CrossEntropyOp {
                targets: targets.to_vec(),
            })),
        )
    }
}
