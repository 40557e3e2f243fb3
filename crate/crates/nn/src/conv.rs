//! Image-shaped tape ops: conv2d (im2col + GEMM), nearest-neighbour
//! upsampling, global average pooling and per-channel affine scaling.
//!
//! All take `[batch, channels, h, w]` inputs.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayD, ArrayView3, Axis, Ix1, Ix4};

use crate::tape::{BackwardOp, NodeId, Tape};

#[derive(Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

fn out_size(inp: usize, k: usize, spec: ConvSpec) -> usize {
    (inp + 2 * spec.pad - k) / spec.stride + 1
}

/// Valid `ox` range for a kernel column: indices where
/// `0 <= ox*stride + kx - pad < w`.
fn ox_range(w: usize, kx: usize, ow: usize, spec: ConvSpec) -> (usize, usize) {
    let lo = if kx >= spec.pad {
        0
    } else {
        (spec.pad - kx).div_ceil(spec.stride)
    };
    let hi_excl = {
        // largest ox with ox*stride <= w - 1 + pad - kx
        let limit = w as isize - 1 + spec.pad as isize - kx as isize;
        if limit < 0 {
            0
        } else {
            (limit as usize / spec.stride + 1).min(ow)
        }
    };
    (lo.min(hi_excl), hi_excl)
}

/// im2col for one image: `[c,h,w] -> [c*kh*kw, oh*ow]`. Stride-1 rows copy
/// contiguously; strided rows fall back to an element loop.
fn im2col(x: &ArrayView3<'_, f64>, kh: usize, kw: usize, spec: ConvSpec) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_size(h, kh, spec), out_size(w, kw, spec));
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    let xs = x.as_slice().expect("standard layout");
    let cols_s = cols.as_slice_mut().unwrap();
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let (ox_lo, ox_hi) = ox_range(w, kx, ow, spec);
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = (ch * h + iy as usize) * w;
                    let dst_base = row * oh * ow + oy * ow;
                    if spec.stride == 1 {
                        let ix0 = ox_lo + kx - spec.pad;
                        let len = ox_hi - ox_lo;
                        cols_s[dst_base + ox_lo..dst_base + ox_lo + len]
                            .copy_from_slice(&xs[src_base + ix0..src_base + ix0 + len]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * spec.stride + kx - spec.pad;
                            cols_s[dst_base + ox] = xs[src_base + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back to image space.
fn col2im(
    gcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> ndarray::Array3<f64> {
    let (oh, ow) = (out_size(h, kh, spec), out_size(w, kw, spec));
    let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
    let gs = gcols.as_slice().unwrap();
    let gxs = gx.as_slice_mut().unwrap();
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let (ox_lo, ox_hi) = ox_range(w, kx, ow, spec);
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (ch * h + iy as usize) * w;
                    let src_base = row * oh * ow + oy * ow;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * spec.stride + kx - spec.pad;
                        gxs[dst_base + ix] += gs[src_base + ox];
                    }
                }
            }
        }
    }
    gx
}

struct Conv2dOp {
    spec: ConvSpec,
}

impl BackwardOp for Conv2dOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let x = i[0].view().into_dimensionality::<Ix4>().unwrap();
        let w = i[1].view().into_dimensionality::<Ix4>().unwrap();
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (oh, ow) = (g4.shape()[2], g4.shape()[3]);
        let w_mat = w
            .to_shape((oc, c * kh * kw))
            .expect("conv weight contiguous")
            .to_owned();
        let spec = self.spec;

        let mut gx = Array4::<f64>::zeros((b, c, h, wid));
        let run = |xs: &ndarray::ArrayView4<'_, f64>,
                   gs: &ndarray::ArrayView4<'_, f64>,
                   gxs: &mut ndarray::ArrayViewMut4<'_, f64>|
         -> (Array2<f64>, ndarray::Array1<f64>) {
            let mut gw_mat = Array2::<f64>::zeros((oc, c * kh * kw));
            let mut gb = ndarray::Array1::<f64>::zeros(oc);
            for bi in 0..xs.shape()[0] {
                let cols = im2col(&xs.index_axis(Axis(0), bi), kh, kw, spec);
                let gout = gs
                    .index_axis(Axis(0), bi)
                    .to_shape((oc, oh * ow))
                    .unwrap()
                    .to_owned();
                general_mat_mul(1.0, &gout, &cols.t(), 1.0, &mut gw_mat.view_mut());
                for o in 0..oc {
                    gb[o] += gout.row(o).sum();
                }
                let mut gcols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
                general_mat_mul(1.0, &w_mat.t(), &gout.view(), 0.0, &mut gcols.view_mut());
                gxs.index_axis_mut(Axis(0), bi)
                    .assign(&col2im(&gcols, c, h, wid, kh, kw, spec));
            }
            (gw_mat, gb)
        };

        let (gw_mat, gb) = if b < 2 {
            run(&x, &g4, &mut gx.view_mut())
        } else {
            let mid = b / 2;
            let (x1, x2) = x.split_at(Axis(0), mid);
            let (g1, g2) = g4.split_at(Axis(0), mid);
            let (mut gx1, mut gx2) = gx.view_mut().split_at(Axis(0), mid);
            let ((gw1, gb1), (gw2, gb2)) =
                rayon::join(|| run(&x1, &g1, &mut gx1), || run(&x2, &g2, &mut gx2));
            (gw1 + &gw2, gb1 + &gb2)
        };
        let gw = gw_mat.into_shape_with_order((oc, c, kh, kw)).unwrap();
        vec![gx.into_dyn(), gw.into_dyn(), gb.into_dyn()]
    }
}

struct Upsample2xOp;
impl BackwardOp for Upsample2xOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let sh = i[0].shape();
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let mut gx = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        gx[[bi, ch, y, x]] = g4[[bi, ch, 2 * y, 2 * x]]
                            + g4[[bi, ch, 2 * y, 2 * x + 1]]
                            + g4[[bi, ch, 2 * y + 1, 2 * x]]
                            + g4[[bi, ch, 2 * y + 1, 2 * x + 1]];
                    }
                }
            }
        }
        vec![gx.into_dyn()]
    }
}

struct GlobalAvgPoolOp;
impl BackwardOp for GlobalAvgPoolOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let sh = i[0].shape();
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let scale = 1.0 / (h * w) as f64;
        let mut gx = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ch in 0..c {
                let gv = g2[[bi, ch]] * scale;
                gx.slice_mut(ndarray::s![bi, ch, .., ..]).fill(gv);
            }
        }
        vec![gx.into_dyn()]
    }
}

struct ChannelAffineOp;
impl BackwardOp for ChannelAffineOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let x = i[0].view().into_dimensionality::<Ix4>().unwrap();
        let wv = i[1].view().into_dimensionality::<Ix1>().unwrap();
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let mut gx = Array4::<f64>::zeros(x.raw_dim());
        let mut gw = ndarray::Array1::<f64>::zeros(c);
        let mut gbias = ndarray::Array1::<f64>::zeros(c);
        for bi in 0..b {
            for ch in 0..c {
                let gs = g4.slice(ndarray::s![bi, ch, .., ..]);
                let xs = x.slice(ndarray::s![bi, ch, .., ..]);
                gx.slice_mut(ndarray::s![bi, ch, .., ..])
                    .assign(&gs.mapv(|v| v * wv[ch]));
                gw[ch] += gs.iter().zip(xs.iter()).map(|(a, b)| a * b).sum::<f64>();
                gbias[ch] += gs.sum();
            }
        }
        vec![gx.into_dyn(), gw.into_dyn(), gbias.into_dyn()]
    }
}

impl Tape {
    /// 2-D convolution: `x [b,c,h,w]`, `w [oc,c,kh,kw]`, `bias [oc]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: NodeId, spec: ConvSpec) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        let (b, c, h, wid) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oc, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        assert_eq!(wv.shape()[1], c, "conv2d channel mismatch");
        assert_eq!(bv.len(), oc);
        let (oh, ow) = (out_size(h, kh, spec), out_size(wid, kw, spec));
        let w_mat = wv.to_shape((oc, c * kh * kw)).unwrap().to_owned();
        let mut out = Array4::<f64>::zeros((b, oc, oh, ow));
        let run = |xs: &ndarray::ArrayView4<'_, f64>, os: &mut ndarray::ArrayViewMut4<'_, f64>| {
            for bi in 0..xs.shape()[0] {
                let cols = im2col(&xs.index_axis(Axis(0), bi), kh, kw, spec);
                let mut res = Array2::<f64>::zeros((oc, oh * ow));
                general_mat_mul(1.0, &w_mat.view(), &cols.view(), 0.0, &mut res.view_mut());
                for o in 0..oc {
                    let bias_o = bv[o];
                    res.row_mut(o).mapv_inplace(|v| v + bias_o);
                }
                os.index_axis_mut(Axis(0), bi)
                    .assign(&res.into_shape_with_order((oc, oh, ow)).unwrap());
            }
        };
        if b < 2 {
            run(&xv, &mut out.view_mut());
        } else {
            let mid = b / 2;
            let (x1, x2) = xv.split_at(Axis(0), mid);
            let (mut o1, mut o2) = out.view_mut().split_at(Axis(0), mid);
            rayon::join(|| run(&x1, &mut o1), || run(&x2, &mut o2));
        }
        self.push(out.into_dyn(), vec![x, w, bias], Some(Box::new(Conv2dOp { spec })))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for x2 in 0..w {
                        let v = xv[[bi, ch, y, x2]];
                        out[[bi, ch, 2 * y, 2 * x2]] = v;
                        out[[bi, ch, 2 * y, 2 * x2 + 1]] = v;
                        out[[bi, ch, 2 * y + 1, 2 * x2]] = v;
                        out[[bi, ch, 2 * y + 1, 2 * x2 + 1]] = v;
                    }
                }
            }
        }
        self.push(out.into_dyn(), vec![x], Some(Box::new(Upsample2xOp)))
    }

    /// Mean over the spatial dims: `[b,c,h,w] -> [b,c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ch in 0..c {
                out[[bi, ch]] = xv.slice(ndarray::s![bi, ch, .., ..]).sum() / (h * w) as f64;
            }
        }
        self.push(out.into_dyn(), vec![x], Some(Box::new(GlobalAvgPoolOp)))
    }

    /// Per-channel `x * w[c] + b[c]` over `[b,c,h,w]`.
    pub fn channel_affine(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        let c = xv.shape()[1];
        assert_eq!(wv.len(), c);
        assert_eq!(bv.len(), c);
        let mut out = xv.to_owned();
        for bi in 0..xv.shape()[0] {
            for ch in 0..c {
                out.slice_mut(ndarray::s![bi, ch, .., ..])
                    .mapv_inplace(|v| v * wv[ch] + bv[ch]);
            }
        }
        self.push(out.into_dyn(), vec![x, w, bias], Some(Box::new(ChannelAffineOp)))
    }
}
