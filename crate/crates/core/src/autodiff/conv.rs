//! Stride-1 2-D cross-correlation via im2col + GEMM.

use super::tensor::{gemm, Mat, Real, Tensor};
use crate::error::{GscError, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn check<E: Real>(input: &Tensor<E>, kernel: &Tensor<E>, bias: &Tensor<E>, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = input.dims4("conv2d")?;
        let (cout, kcin, kh, kw) = kernel.dims4("conv2d")?;
        if kcin != cin {
            return Err(GscError::ShapeMismatch {
                op: "conv2d",
                expected: vec![cout, cin, kh, kw],
                got: kernel.shape().to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(GscError::contract(
                "conv2d",
                format!("kernel must be square with odd extent, got {kh}x{kw}"),
            ));
        }
        if bias.shape() != [cout] {
            return Err(GscError::ShapeMismatch {
                op: "conv2d",
                expected: vec![cout],
                got: bias.shape().to_vec(),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(GscError::contract("conv2d", "kernel larger than padded input"));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            pad,
            oh: h + 2 * pad + 1 - kh,
            ow: w + 2 * pad + 1 - kw,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_px(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

fn im2col<E: Real>(g: &ConvGeom, img: &[E], col: &mut [E]) {
    let (k, pad, ow) = (g.k, g.pad as isize, g.ow);
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * g.out_px()..(row + 1) * g.out_px()];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<E: Real>(g: &ConvGeom, col: &[E], img: &mut [E]) {
    let (k, pad, ow) = (g.k, g.pad as isize, g.ow);
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * g.out_px()..(row + 1) * g.out_px()];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<E: Real>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    pad: usize,
) -> Result<Tensor<E>> {
    let g = ConvGeom::check(input, kernel, bias, pad)?;
    let px = g.out_px();
    let mut out = vec![E::zero(); g.n * g.cout * px];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); g.rows() * px]
    };
    let wmat = Mat::new(kernel.data(), g.cout, g.rows());
    for i in 0..g.n {
        let dst = &mut out[i * g.cout * px..(i + 1) * g.cout * px];
        for (co, chunk) in dst.chunks_mut(px).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        let img = input.image(i);
        if g.is_pointwise() {
            gemm(wmat, Mat::new(img, g.rows(), px), dst, true);
        } else {
            im2col(&g, img, &mut col);
            gemm(wmat, Mat::new(&col, g.rows(), px), dst, true);
        }
    }
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

pub(crate) struct ConvGrads<E> {
    pub input: Option<Tensor<E>>,
    pub kernel: Option<Tensor<E>>,
    pub bias: Option<Tensor<E>>,
}

/// Gradients of the convolution given the output adjoint. Only the requested
/// arguments are computed.
pub(crate) fn backward<E: Real>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    pad: usize,
    dout: &Tensor<E>,
    need: [bool; 3],
) -> Result<ConvGrads<E>> {
    let g = ConvGeom::check(input, kernel, bias, pad)?;
    let px = g.out_px();
    let rows = g.rows();
    let mut dinput = need[0].then(|| vec![E::zero(); input.len()]);
    let mut dkernel = need[1].then(|| vec![E::zero(); kernel.len()]);
    let mut dbias = need[2].then(|| vec![E::zero(); g.cout]);
    let mut col = if g.is_pointwise() || !need[1] {
        Vec::new()
    } else {
        vec![E::zero(); rows * px]
    };
    let mut dcol = if g.is_pointwise() || !need[0] {
        Vec::new()
    } else {
        vec![E::zero(); rows * px]
    };
    let wmat = Mat::new(kernel.data(), g.cout, rows);
    for i in 0..g.n {
        let dy = dout.image(i);
        let dy_mat = Mat::new(dy, g.cout, px);
        if let Some(db) = dbias.as_mut() {
            for (co, chunk) in dy.chunks(px).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<E>();
            }
        }
        if let Some(dk) = dkernel.as_mut() {
            let img = input.image(i);
            if g.is_pointwise() {
                gemm(dy_mat, Mat::new(img, rows, px).t(), dk, true);
            } else {
                im2col(&g, img, &mut col);
                gemm(dy_mat, Mat::new(&col, rows, px).t(), dk, true);
            }
        }
        if let Some(dx) = dinput.as_mut() {
            let per = g.cin * g.h * g.w;
            let dst = &mut dx[i * per..(i + 1) * per];
            if g.is_pointwise() {
                gemm(wmat.t(), dy_mat, dst, true);
            } else {
                gemm(wmat.t(), dy_mat, &mut dcol, false);
                col2im_add(&g, &dcol, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: dinput.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        kernel: dkernel.map(|d| Tensor::new(kernel.shape().to_vec(), d)).transpose()?,
        bias: dbias.map(|d| Tensor::new(vec![g.cout], d)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation.
    fn naive(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (n, cin, h, w) = input.dims4("t").unwrap();
        let (cout, _, k, _) = kernel.dims4("t").unwrap();
        let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.data()[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * kernel.data()[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        let input = Tensor::from_fn(&[2, 3, 5, 4], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
        let kernel = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) * 0.2);
        let bias = Tensor::from_fn(&[4], |i| i as f64);
        for pad in [0, 1, 2] {
            let fast = forward(&input, &kernel, &bias, pad).unwrap();
            let slow = naive(&input, &kernel, &bias, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_even_kernel() {
        let input = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let kernel = Tensor::zeros(&[1, 1, 2, 2]);
        let bias = Tensor::zeros(&[1]);
        assert!(forward(&input, &kernel, &bias, 0).is_err());
    }
}
