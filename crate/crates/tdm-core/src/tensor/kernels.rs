// Raw numeric kernels shared by graph ops: GEMM, im2col convolution, pooling.

use std::cell::RefCell;

use crate::parallel;

thread_local! {
    static COL: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on this thread's im2col scratch buffer, grown to `len`. The
/// contents on entry are unspecified; callers overwrite every element.
fn with_col<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    COL.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

const LANES: usize = 8;

/// `Σ f(x_i, y_i)` over two equal-length slices, accumulated in independent
/// lanes and combined pairwise. The summation order is fixed for a given
/// length, so results are reproducible.
#[inline]
pub(crate) fn lane_sum2(xs: &[f64], ys: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let mut acc = [0.0; LANES];
    let (xc, yc) = (xs.chunks_exact(LANES), ys.chunks_exact(LANES));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += f(a[l], b[l]);
        }
    }
    for (l, (&a, &b)) in xr.iter().zip(yr).enumerate() {
        acc[l] += f(a, b);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Single-slice form of [`lane_sum2`].
#[inline]
pub(crate) fn lane_sum(xs: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    lane_sum2(xs, xs, |x, _| f(x))
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` logically m×k and
/// `b` logically k×n. `a_t`/`b_t` mean the buffer is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to its m/k/n extent and the
    // strides never step outside it.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    /// Implicit zero padding on every side.
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad - self.kw + 1
    }
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// For kernel offset `k` along an axis of length `len`, the output range
    /// whose input coordinate `o + k - pad` lies inside the image.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k);
        let hi = (len + self.pad).saturating_sub(k).min(out_len);
        (lo, hi.max(lo))
    }
}

fn im2col(g: &ConvGeom, img: &[f64], col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = g.positions();
    for c in 0..g.in_ch {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y0, y1) = g.valid(ki, g.h, oh);
            for kj in 0..g.kw {
                let (x0, x1) = g.valid(kj, g.w, ow);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if oy < y0 || oy >= y1 {
                        line.fill(0.0);
                        continue;
                    }
                    let iy = oy + ki - g.pad;
                    line[..x0].fill(0.0);
                    line[x1..].fill(0.0);
                    let ix0 = x0 + kj - g.pad;
                    line[x0..x1].copy_from_slice(&plane[iy * g.w + ix0..][..x1 - x0]);
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, col: &[f64], img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = g.positions();
    for c in 0..g.in_ch {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y0, y1) = g.valid(ki, g.h, oh);
            for kj in 0..g.kw {
                let (x0, x1) = g.valid(kj, g.w, ow);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in y0..y1 {
                    let iy = oy + ki - g.pad;
                    let ix0 = x0 + kj - g.pad;
                    let dst = &mut plane[iy * g.w + ix0..][..x1 - x0];
                    for (d, s) in dst.iter_mut().zip(&src[oy * ow + x0..oy * ow + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with implicit zero padding, NCHW input and
/// OIHW kernel.
pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let p = g.positions();
    let img_len = g.in_ch * g.h * g.w;
    let mut out = vec![0.0; g.batch * g.out_ch * p];
    parallel::for_each_chunk_mut(&mut out, g.out_ch * p, |b, out_b| {
        with_col(g.patch() * p, |col| {
            im2col(g, &input[b * img_len..(b + 1) * img_len], col);
            gemm(g.out_ch, g.patch(), p, kernel, false, col, false, out_b, false);
        })
    });
    out
}

/// Returns `(d_kernel, d_input)`; `d_input` is skipped unless requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    need_input_grad: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let p = g.positions();
    let img_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * p;
    let per_image = parallel::map_indexed(g.batch, |b| {
        with_col(g.patch() * p, |col| {
            im2col(g, &input[b * img_len..(b + 1) * img_len], col);
            let dout_b = &d_out[b * out_len..(b + 1) * out_len];
            let mut dk = vec![0.0; g.out_ch * g.patch()];
            gemm(g.out_ch, p, g.patch(), dout_b, false, col, true, &mut dk, false);
            let dx = need_input_grad.then(|| {
                gemm(g.patch(), g.out_ch, p, kernel, true, dout_b, false, col, false);
                let mut dx = vec![0.0; img_len];
                col2im_add(g, col, &mut dx);
                dx
            });
            (dk, dx)
        })
    });
    let mut d_kernel = vec![0.0; g.out_ch * g.patch()];
    let mut d_input = need_input_grad.then(|| Vec::with_capacity(g.batch * img_len));
    for (dk, dx) in per_image {
        for (acc, v) in d_kernel.iter_mut().zip(&dk) {
            *acc += v;
        }
        if let (Some(all), Some(dx)) = (d_input.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    (d_kernel, d_input)
}

/// 2×2 stride-2 max pooling over NCHW planes. Returns the pooled values and,
/// for each output, the flat input index that won. Ties go to the first
/// element in row-major order.
pub(crate) fn maxpool2_forward(planes: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        for oy in 0..oh {
            let top = (pl * h + 2 * oy) * w;
            let (r0, r1) = (&x[top..top + w], &x[top + w..top + 2 * w]);
            for ox in 0..ow {
                let j = 2 * ox;
                let (mut best, mut at) = (r0[j], top + j);
                for (v, i) in [
                    (r0[j + 1], top + j + 1),
                    (r1[j], top + w + j),
                    (r1[j + 1], top + w + j + 1),
                ] {
                    if v > best {
                        best = v;
                        at = i;
                    }
                }
                out.push(best);
                arg.push(at);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    fn naive_conv(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy + ki) as isize - g.pad as isize;
                                    let ix = (ox + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xi = ((b * g.in_ch + c) * g.h + iy as usize) * g.w + ix as usize;
                                    let kk = ((o * g.in_ch + c) * g.kh + ki) * g.kw + kj;
                                    acc += x[xi] * k[kk];
                                }
                            }
                        }
                        out[((b * g.out_ch + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn padded_conv_matches_naive_loops() {
        for pad in 0..3 {
            let g = ConvGeom {
                batch: 2,
                in_ch: 3,
                h: 5,
                w: 4,
                out_ch: 2,
                kh: 3,
                kw: 3,
                pad,
            };
            let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let k: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.5).collect();
            let got = conv2d_forward(&g, &x, &k);
            let want = naive_conv(&g, &x, &k);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padded_conv_input_grad_is_adjoint() {
        // <conv(x), d> == <x, conv_backward(d)> for the input gradient
        let g = ConvGeom {
            batch: 1,
            in_ch: 2,
            h: 4,
            w: 5,
            out_ch: 3,
            kh: 3,
            kw: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
        let k: Vec<f64> = (0..54).map(|i| (i as f64 * 0.3).cos()).collect();
        let d: Vec<f64> = (0..60).map(|i| (i as f64 * 1.1).sin()).collect();
        let y = conv2d_forward(&g, &x, &k);
        let (dk, dx) = conv2d_backward(&g, &x, &k, &d, true);
        let lhs: f64 = y.iter().zip(&d).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dx.unwrap()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_k: f64 = k.iter().zip(&dk).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_k).abs() < 1e-10);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let (v, a) = maxpool2_forward(1, 2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
        let (_, a) = maxpool2_forward(1, 2, 2, &[0.0, 2.0, 2.0, 1.0]);
        assert_eq!(a, vec![1]);
    }
}
