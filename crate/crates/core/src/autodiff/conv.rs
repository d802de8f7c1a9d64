//! im2col-based 2-D cross-correlation kernels with zero padding.

use crate::error::{Error, Result};
use crate::real::{matmul, Real};
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis, or `None` when the padded
/// input is smaller than the kernel.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = match *x {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::dim(format!("conv2d input must be N,C,H,W; got {x:?}"))),
        };
        let [cout, wcin, kh, kw] = match *weight {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::dim(format!("conv2d weight must be Cout,Cin,kh,kw; got {weight:?}"))),
        };
        if wcin != cin {
            return Err(Error::dim(format!("conv2d channel axis: input C={cin} but weight Cin={wcin}")));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let ho = conv_out_extent(h, kh, stride, pad)
            .ok_or_else(|| Error::dim(format!("conv2d height axis: H={h} + 2*{pad} < kh={kh}")))?;
        let wo = conv_out_extent(w, kw, stride, pad)
            .ok_or_else(|| Error::dim(format!("conv2d width axis: W={w} + 2*{pad} < kw={kw}")))?;
        Ok(ConvGeom { n, cin, h, w, cout, kh, kw, stride, pad, ho, wo })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }
}

/// Range of output columns `ox` whose input column `ox * stride + kj - pad`
/// falls inside `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let so = g.spatial_out();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * so..(row + 1) * so];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (o, s) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let so = g.spatial_out();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * so..(row + 1) * so];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + s.len()].iter_mut().zip(s) {
                            *d = *d + *v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                            *d = *d + *v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let (k, so) = (g.k(), g.spatial_out());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * so;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = vec![T::zero(); k * so];
    for n in 0..g.n {
        im2col(g, &x.data()[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_exact_mut(so).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        matmul(g.cout, k, so, weight.data(), false, &cols, false, dst, bias.is_some());
    }
    Tensor::new(g.out_shape(), out).expect("conv output shape")
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let (k, so) = (g.k(), g.spatial_out());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * so;
    let mut dx = need[0].then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = need[1].then(|| vec![T::zero(); g.cout * k]);
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, chunk) in gout[n * out_len..(n + 1) * out_len].chunks_exact(so).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return ConvGrads { dx, dw, db };
    }
    let mut cols = vec![T::zero(); k * so];
    for n in 0..g.n {
        let go = &gout[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x.data()[n * in_len..(n + 1) * in_len], &mut cols);
            matmul(g.cout, so, k, go, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            matmul(k, g.cout, so, weight.data(), true, go, false, &mut cols, false);
            col2im_add(g, &cols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}
