//! Same-padded 2D convolution kernels (im2col + GEMM).
//!
//! Odd square kernels only; padding is `k / 2` zeros so spatial extents are
//! preserved.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn geometry(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Geometry> {
    let (n, c_in, h, w) = input.nchw()?;
    let (c_out, wc_in, kh, kw) = weight
        .nchw()
        .map_err(|_| Error::invalid("conv2d", format!("weight must be rank 4, got {:?}", weight.shape())))?;
    if wc_in != c_in || kh != kw || kh % 2 == 0 {
        return Err(Error::shape("conv2d", input.shape(), weight.shape()));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape("conv2d bias", weight.shape(), b.shape()));
        }
    }
    Ok(Geometry {
        n,
        c_in,
        c_out,
        h,
        w,
        k: kh,
    })
}

/// Destination columns `[lo, hi)` of a row shifted by `d` that read inside `[0, w)`.
fn valid_span(w: isize, d: isize) -> (usize, usize) {
    ((-d).clamp(0, w) as usize, (w - d).clamp(0, w) as usize)
}

/// Unfold one sample `(C_in, H, W)` into a `(C_in*k*k, H*W)` column matrix.
fn im2col(x: &[f64], g: &Geometry, col: &mut [f64]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let pad = (k / 2) as isize;
    let plane = g.plane();
    for ci in 0..g.c_in {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (lo, hi) = valid_span(w, dx);
                for y in 0..h {
                    let sy = y + dy;
                    let out = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h || lo >= hi {
                        out.fill(0.0);
                        continue;
                    }
                    let srow = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                    out[..lo].fill(0.0);
                    out[lo..hi].copy_from_slice(&srow[(lo as isize + dx) as usize..(hi as isize + dx) as usize]);
                    out[hi..].fill(0.0);
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto a `(C_in, H, W)` gradient.
fn col2im(col: &[f64], g: &Geometry, dx: &mut [f64]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let pad = (k / 2) as isize;
    let plane = g.plane();
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                let (lo, hi) = valid_span(w, ox);
                for y in 0..h {
                    let sy = y + oy;
                    if sy < 0 || sy >= h || lo >= hi {
                        continue;
                    }
                    let s = &src[(y * w) as usize + lo..(y * w) as usize + hi];
                    let d = &mut dst[(sy * w + lo as isize + ox) as usize..(sy * w + hi as isize + ox) as usize];
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Run `f` with this thread's two scratch buffers resized to `a` and `b` elements.
/// Contents on entry are unspecified.
fn with_scratch<T>(a: usize, b: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> T) -> T {
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let (x, y) = &mut *bufs;
        if x.len() < a {
            x.resize(a, 0.0);
        }
        if y.len() < b {
            y.resize(b, 0.0);
        }
        f(&mut x[..a], &mut y[..b])
    })
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with arbitrary strides on a and b.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size every buffer to cover the strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = geometry(input, weight, bias)?;
    let plane = g.plane();
    let kc = g.cols();
    let mut out = vec![0.0; g.n * g.c_out * plane];
    let col_len = if g.k > 1 { kc * plane } else { 0 };
    with_scratch(col_len, 0, |col, _| {
        for b in 0..g.n {
            let x = &input.data()[b * g.c_in * plane..(b + 1) * g.c_in * plane];
            let y = &mut out[b * g.c_out * plane..(b + 1) * g.c_out * plane];
            let cols: &[f64] = if g.k > 1 {
                im2col(x, &g, col);
                col
            } else {
                x
            };
            if let Some(bias) = bias {
                for (co, row) in y.chunks_mut(plane).enumerate() {
                    row.fill(bias.data()[co]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(
                g.c_out,
                kc,
                plane,
                weight.data(),
                (kc as isize, 1),
                cols,
                (plane as isize, 1),
                beta,
                y,
            );
        }
    });
    Tensor::new(vec![g.n, g.c_out, g.h, g.w], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, need_input: bool) -> Result<ConvGrads> {
    let g = geometry(input, weight, None)?;
    let plane = g.plane();
    let kc = g.cols();
    if grad_out.shape() != [g.n, g.c_out, g.h, g.w] {
        return Err(Error::shape(
            "conv2d backward",
            &[g.n, g.c_out, g.h, g.w],
            grad_out.shape(),
        ));
    }
    let mut dw = vec![0.0; g.c_out * kc];
    let mut db = vec![0.0; g.c_out];
    let mut dx = if need_input {
        vec![0.0; g.n * g.c_in * plane]
    } else {
        Vec::new()
    };
    let col_len = if g.k > 1 { kc * plane } else { 0 };
    let dcol_len = if g.k > 1 && need_input { kc * plane } else { 0 };
    with_scratch(col_len, dcol_len, |col, dcol| {
        for b in 0..g.n {
            let x = &input.data()[b * g.c_in * plane..(b + 1) * g.c_in * plane];
            let dy = &grad_out.data()[b * g.c_out * plane..(b + 1) * g.c_out * plane];
            for (co, row) in dy.chunks(plane).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
            let cols: &[f64] = if g.k > 1 {
                im2col(x, &g, col);
                col
            } else {
                x
            };
            // dW += dY * cols^T
            gemm(
                g.c_out,
                plane,
                kc,
                dy,
                (plane as isize, 1),
                cols,
                (1, plane as isize),
                1.0,
                &mut dw,
            );
            if !need_input {
                continue;
            }
            let dxb = &mut dx[b * g.c_in * plane..(b + 1) * g.c_in * plane];
            // dcols = W^T * dY
            let target: &mut [f64] = if g.k > 1 { dcol } else { dxb };
            gemm(
                kc,
                g.c_out,
                plane,
                weight.data(),
                (1, kc as isize),
                dy,
                (plane as isize, 1),
                0.0,
                target,
            );
            if g.k > 1 {
                col2im(dcol, &g, &mut dx[b * g.c_in * plane..(b + 1) * g.c_in * plane]);
            }
        }
    });
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(input.shape().to_vec(), dx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.c_out], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution, independent of im2col/GEMM.
    fn naive(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
        let (n, ci, h, w) = input.nchw().unwrap();
        let (co, _, k, _) = weight.nchw().unwrap();
        let pad = (k / 2) as isize;
        Tensor::from_fn(vec![n, co, h, w], |idx| {
            let x = idx % w;
            let y = (idx / w) % h;
            let o = (idx / (w * h)) % co;
            let b = idx / (w * h * co);
            let mut acc = bias.data()[o];
            for c in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        let sx = x as isize + kx as isize - pad;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += weight.data()[((o * ci + c) * k + ky) * k + kx]
                                * input.data()[((b * ci + c) * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_naive_loops() {
        for k in [1usize, 3] {
            let x = Tensor::from_fn(vec![2, 3, 5, 4], |i| ((i * 37) % 11) as f64 - 5.0);
            let wt = Tensor::from_fn(vec![4, 3, k, k], |i| ((i * 13) % 7) as f64 * 0.25 - 0.7);
            let b = Tensor::from_fn(vec![4], |i| i as f64);
            let fast = conv2d_forward(&x, &wt, Some(&b)).unwrap();
            assert!(fast.max_abs_diff(&naive(&x, &wt, &b)) < 1e-12);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut wt = Tensor::zeros(vec![1, 1, 3, 3]);
        wt.data_mut()[4] = 1.0;
        let y = conv2d_forward(&x, &wt, Some(&Tensor::zeros(vec![1]))).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_weight_gives_bias() {
        let x = Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f64);
        let wt = Tensor::zeros(vec![1, 2, 3, 3]);
        let y = conv2d_forward(&x, &wt, Some(&Tensor::full(vec![1], 2.5))).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn mismatched_channels_report_both_shapes() {
        let x = Tensor::zeros(vec![1, 2, 3, 3]);
        let wt = Tensor::zeros(vec![1, 3, 3, 3]);
        match conv2d_forward(&x, &wt, None) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![1, 2, 3, 3]);
                assert_eq!(right, vec![1, 3, 3, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
