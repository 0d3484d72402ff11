//! im2col + GEMM cross-correlation kernels.

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Output extent of a convolution along one axis (floor division, so a
/// stride-2 conv with pad `k/2` halves an even input).
pub fn conv_output_size(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let span = (input + 2 * pad)
        .checked_sub(k)
        .ok_or_else(|| Error::Shape(format!("kernel {k} larger than padded input {input}+2*{pad}")))?;
    Ok(span / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c, h, w) = match input {
            [_, c, h, w] => (*c, *h, *w),
            _ => return Err(Error::Shape(format!("conv input must be rank 4, got {input:?}"))),
        };
        let (f, wc, k) = match weight {
            [f, wc, kh, kw] if kh == kw => (*f, *wc, *kh),
            _ => return Err(Error::Shape(format!("conv weight must be [F,C,k,k], got {weight:?}"))),
        };
        if wc != c {
            return Err(Error::Shape(format!("conv weight expects {wc} channels, input has {c}")));
        }
        if k % 2 == 0 {
            return Err(Error::Shape(format!("kernel size {k} must be odd")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Shape(format!("stride {stride} not in {{1, 2}}")));
        }
        let ho = conv_output_size(h, k, stride, pad)?;
        let wo = conv_output_size(w, k, stride, pad)?;
        Ok(Self { c, h, w, f, k, stride, pad, ho, wo })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1, stride-1, unpadded conv reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output range `[lo, hi)` along an axis for kernel offset `kk`.
    fn valid_range(&self, kk: usize, input: usize, output: usize) -> (usize, usize) {
        // o*stride + kk - pad in [0, input)
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (input as isize - off + s - 1) / s;
        (lo.max(0) as usize, (hi.max(0) as usize).min(output))
    }
}

pub(crate) fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (xlo, xhi) = g.valid_range(kx, g.w, g.wo);
                let row = &mut col[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = xlo + kx - g.pad;
                        dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (xlo, xhi) = g.valid_range(kx, g.w, g.wo);
                if xlo >= xhi {
                    continue;
                }
                let row = &col[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation without graph bookkeeping.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.f {
            return Err(Error::Shape(format!("bias has {} values for {} filters", b.numel(), g.f)));
        }
    }
    let n = input.shape()[0];
    let in_len = g.c * g.h * g.w;
    let p = g.out_pixels();
    let kk = g.col_rows();
    let mut out = vec![T::zero(); n * g.f * p];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for s in 0..n {
        let x = &input.data()[s * in_len..(s + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut col);
            &col
        };
        let y = &mut out[s * g.f * p..(s + 1) * g.f * p];
        T::gemm(g.f, kk, p, T::one(), weight.data(), (kk as isize, 1), cols, (p as isize, 1), T::zero(), y, (p as isize, 1));
        if let Some(b) = bias {
            for (f, row) in y.chunks_mut(p).enumerate() {
                let bf = b.data()[f];
                row.iter_mut().for_each(|v| *v += bf);
            }
        }
    }
    Tensor::new(vec![n, g.f, g.ho, g.wo], out)
}

/// Accumulates weight/bias/input gradients of one conv node.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    n: usize,
    input: &[T],
    weight: &[T],
    dy: &[T],
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
    mut dx: Option<&mut [T]>,
) {
    let in_len = g.c * g.h * g.w;
    let p = g.out_pixels();
    let kk = g.col_rows();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    let mut dcol = if dx.is_some() && !g.is_pointwise() { vec![T::zero(); kk * p] } else { Vec::new() };
    for s in 0..n {
        let x = &input[s * in_len..(s + 1) * in_len];
        let dys = &dy[s * g.f * p..(s + 1) * g.f * p];
        if let Some(db) = db.as_deref_mut() {
            for (f, row) in dys.chunks(p).enumerate() {
                db[f] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let cols: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            // dW[F,K] += dY[F,P] * col^T[P,K]
            T::gemm(g.f, p, kk, T::one(), dys, (p as isize, 1), cols, (1, p as isize), T::one(), dw, (kk as isize, 1));
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                // dX[C,P] += W^T[C,F] * dY[F,P]
                T::gemm(kk, g.f, p, T::one(), weight, (1, kk as isize), dys, (p as isize, 1), T::one(), dxs, (p as isize, 1));
            } else {
                T::gemm(kk, g.f, p, T::one(), weight, (1, kk as isize), dys, (p as isize, 1), T::zero(), &mut dcol, (p as isize, 1));
                col2im_add(g, &dcol, dxs);
            }
        }
    }
}
