//! Raw numeric kernels shared by forward ops and their backward rules.
//!
//! Everything operates on flat row-major slices. Parallel variants partition
//! work by output region only, so results do not depend on thread count.

use crate::exec;
use crate::tensor::Scalar;

/// dst[x] += wv * src[x + off] over the valid window of a width-`w` row.
#[inline]
fn row_axpy<T: Scalar>(dst: &mut [T], src: &[T], wv: T, off: isize, w: usize) {
    let x_lo = (-off).max(0) as usize;
    let x_hi = ((w as isize - off).min(w as isize)).max(0) as usize;
    if x_lo >= x_hi {
        return;
    }
    let n = x_hi - x_lo;
    let d = &mut dst[x_lo..x_hi];
    let s = &src[(x_lo as isize + off) as usize..][..n];
    for (dv, sv) in d.iter_mut().zip(s.iter()) {
        *dv = *dv + wv * *sv;
    }
}

/// Fused three-tap row update: dst[x] += w0 s[x-1] + w1 s[x] + w2 s[x+1],
/// zero-padded at the row ends. One pass instead of three.
#[inline]
fn row_axpy3<T: Scalar>(dst: &mut [T], src: &[T], w0: T, w1: T, w2: T) {
    let w = dst.len();
    if w == 1 {
        dst[0] = dst[0] + w1 * src[0];
        return;
    }
    dst[0] = dst[0] + w1 * src[0] + w2 * src[1];
    let interior = &mut dst[1..w - 1];
    let left = &src[0..w - 2];
    let mid = &src[1..w - 1];
    let right = &src[2..w];
    for (((d, &a), &b), &c) in interior.iter_mut().zip(left).zip(mid).zip(right) {
        *d = *d + w0 * a + w1 * b + w2 * c;
    }
    dst[w - 1] = dst[w - 1] + w0 * src[w - 2] + w1 * src[w - 1];
}

/// Dot product with fixed four-lane accumulation (fixed summation order,
/// lane-splittable by the vectorizer).
#[inline]
fn row_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 4];
    let mut chunks_a = a.chunks_exact(4);
    let mut chunks_b = b.chunks_exact(4);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for l in 0..4 {
            lanes[l] = lanes[l] + ca[l] * cb[l];
        }
    }
    let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (ra, rb) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        s = s + *ra * *rb;
    }
    s
}

/// Same-padded stride-1 convolution: x [cin,h,w], w [cout,cin,k,k], b [cout].
/// The accumulator row stays cache-resident across all taps of one output
/// row.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    wgt: &[T],
    bias: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), cout * h * w);
    let pad = (k / 2) as isize;
    exec::fill_chunks(out, h * w, |o, piece| {
        piece.fill(bias[o]);
        for y in 0..h {
            let row = &mut piece[y * w..(y + 1) * w];
            for i in 0..cin {
                let plane = &x[i * h * w..(i + 1) * h * w];
                let wbase = (o * cin + i) * k * k;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    if k == 3 {
                        row_axpy3(
                            row,
                            src_row,
                            wgt[wbase + dy * 3],
                            wgt[wbase + dy * 3 + 1],
                            wgt[wbase + dy * 3 + 2],
                        );
                    } else {
                        for dx in 0..k {
                            let wv = wgt[wbase + dy * k + dx];
                            row_axpy(row, src_row, wv, dx as isize - pad, w);
                        }
                    }
                }
            }
        }
    });
}

/// Gradient of conv2d w.r.t. its input.
pub(crate) fn conv2d_backward_input<T: Scalar>(
    grad_out: &[T],
    wgt: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    grad_x: &mut [T],
) {
    let pad = (k / 2) as isize;
    exec::fill_chunks(grad_x, h * w, |i, piece| {
        piece.fill(T::zero());
        for y in 0..h {
            let row = &mut piece[y * w..(y + 1) * w];
            for o in 0..cout {
                let gplane = &grad_out[o * h * w..(o + 1) * h * w];
                let wbase = (o * cin + i) * k * k;
                for dy in 0..k {
                    let sy = y as isize + pad - dy as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let g_row = &gplane[sy as usize * w..(sy as usize + 1) * w];
                    for dx in 0..k {
                        let wv = wgt[wbase + dy * k + dx];
                        row_axpy(row, g_row, wv, pad - dx as isize, w);
                    }
                }
            }
        }
    });
}

/// Gradient of conv2d w.r.t. its weights.
pub(crate) fn conv2d_backward_weight<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    grad_w: &mut [T],
) {
    let pad = (k / 2) as isize;
    exec::fill_chunks(grad_w, cin * k * k, |o, piece| {
        let gplane = &grad_out[o * h * w..(o + 1) * h * w];
        for i in 0..cin {
            let plane = &x[i * h * w..(i + 1) * h * w];
            let acc = &mut piece[i * k * k..(i + 1) * k * k];
            acc.fill(T::zero());
            for y in 0..h {
                let g_row = &gplane[y * w..(y + 1) * w];
                for dy in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for dx in 0..k {
                        let off = dx as isize - pad;
                        let x_lo = (-off).max(0) as usize;
                        let x_hi = ((w as isize - off).min(w as isize)).max(0) as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        let n = x_hi - x_lo;
                        acc[dy * k + dx] = acc[dy * k + dx]
                            + row_dot(
                                &g_row[x_lo..x_hi],
                                &x_row[(x_lo as isize + off) as usize..][..n],
                            );
                    }
                }
            }
        }
    });
}

/// a [m,k] times b [k,n] into out [m,n].
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), m * n);
    exec::fill_chunks(out, n, |row, piece| {
        piece.fill(T::zero());
        for kk in 0..k {
            let av = a[row * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, bv) in piece.iter_mut().zip(b_row.iter()) {
                *o = *o + av * *bv;
            }
        }
    });
}

/// dA[i,kk] = sum_n g[i,n] * b[kk,n].
pub(crate) fn matmul_grad_a<T: Scalar>(
    g: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    grad_a: &mut [T],
) {
    let _ = m;
    exec::fill_chunks(grad_a, k, |i, piece| {
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, slot) in piece.iter_mut().enumerate() {
            *slot = row_dot(g_row, &b[kk * n..(kk + 1) * n]);
        }
    });
}

/// dB[kk,n] = sum_m a[m,kk] * g[m,n].
pub(crate) fn matmul_grad_b<T: Scalar>(
    g: &[T],
    a: &[T],
    m: usize,
    k: usize,
    n: usize,
    grad_b: &mut [T],
) {
    exec::fill_chunks(grad_b, n, |kk, piece| {
        piece.fill(T::zero());
        for row in 0..m {
            let av = a[row * k + kk];
            let g_row = &g[row * n..(row + 1) * n];
            for (o, gv) in piece.iter_mut().zip(g_row.iter()) {
                *o = *o + av * *gv;
            }
        }
    });
}

/// Per-axis sampling positions for align-corners-false bilinear resampling.
/// Returns (low index, high index, fraction toward high).
pub(crate) fn resample_axis(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let lo = src.floor();
            let t = src - lo;
            let i0 = (lo.max(0.0) as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            // With lo below zero both taps clamp to pixel 0; collapse the
            // fraction so the lerp stays an exact copy of that pixel.
            let t = if lo < 0.0 { 0.0 } else { t };
            (i0, i1, t)
        })
        .collect()
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

/// Bilinear upsample of one channel plane (lerp form: exact on constants).
pub(crate) fn upsample_plane<T: Scalar>(
    src: &[T],
    w_in: usize,
    ys: &[(usize, usize, f64)],
    xs: &[(usize, usize, f64)],
    out: &mut [T],
) {
    let w_out = xs.len();
    for (y, &(y0, y1, ty)) in ys.iter().enumerate() {
        let ty = T::from_f64(ty);
        let row0 = &src[y0 * w_in..(y0 + 1) * w_in];
        let row1 = &src[y1 * w_in..(y1 + 1) * w_in];
        let dst = &mut out[y * w_out..(y + 1) * w_out];
        for (slot, &(x0, x1, tx)) in dst.iter_mut().zip(xs.iter()) {
            let tx = T::from_f64(tx);
            let v0 = lerp(row0[x0], row0[x1], tx);
            let v1 = lerp(row1[x0], row1[x1], tx);
            *slot = lerp(v0, v1, ty);
        }
    }
}

/// Scatter the upsample gradient back onto one source channel plane.
pub(crate) fn upsample_plane_grad<T: Scalar>(
    grad_out: &[T],
    w_in: usize,
    ys: &[(usize, usize, f64)],
    xs: &[(usize, usize, f64)],
    grad_src: &mut [T],
) {
    let w_out = xs.len();
    for (y, &(y0, y1, ty)) in ys.iter().enumerate() {
        let g_row = &grad_out[y * w_out..(y + 1) * w_out];
        for (&g, &(x0, x1, tx)) in g_row.iter().zip(xs.iter()) {
            let g = g.to_f64_lossy();
            let w00 = (1.0 - ty) * (1.0 - tx);
            let w01 = (1.0 - ty) * tx;
            let w10 = ty * (1.0 - tx);
            let w11 = ty * tx;
            grad_src[y0 * w_in + x0] = grad_src[y0 * w_in + x0] + T::from_f64(g * w00);
            grad_src[y0 * w_in + x1] = grad_src[y0 * w_in + x1] + T::from_f64(g * w01);
            grad_src[y1 * w_in + x0] = grad_src[y1 * w_in + x0] + T::from_f64(g * w10);
            grad_src[y1 * w_in + x1] = grad_src[y1 * w_in + x1] + T::from_f64(g * w11);
        }
    }
}

/// Four-neighbor taps for a continuous pixel coordinate in [0, n-1].
#[inline]
pub(crate) fn point_taps(coord: f64, n: usize) -> (usize, usize, f64) {
    let lo = coord.floor();
    let i0 = (lo.max(0.0) as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let t = if lo < 0.0 { 0.0 } else { coord - lo };
    (i0, i1, t)
}

/// Bilinear read of every channel at continuous points; out is [c, n_pts].
pub(crate) fn point_sample_forward<T: Scalar>(
    feat: &[T],
    c: usize,
    h: usize,
    w: usize,
    pts: &[(f64, f64)],
    out: &mut [T],
) {
    let _ = c;
    let n = pts.len();
    exec::fill_chunks(out, n, |ch, piece| {
        let plane = &feat[ch * h * w..(ch + 1) * h * w];
        for (slot, &(px, py)) in piece.iter_mut().zip(pts.iter()) {
            let (x0, x1, tx) = point_taps(px, w);
            let (y0, y1, ty) = point_taps(py, h);
            let tx = T::from_f64(tx);
            let ty = T::from_f64(ty);
            let v0 = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
            let v1 = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
            *slot = lerp(v0, v1, ty);
        }
    });
}

pub(crate) fn point_sample_grad<T: Scalar>(
    grad_out: &[T],
    c: usize,
    h: usize,
    w: usize,
    pts: &[(f64, f64)],
    grad_feat: &mut [T],
) {
    let _ = c;
    let n = pts.len();
    exec::fill_chunks(grad_feat, h * w, |ch, piece| {
        let g_row = &grad_out[ch * n..(ch + 1) * n];
        for (&g, &(px, py)) in g_row.iter().zip(pts.iter()) {
            let (x0, x1, tx) = point_taps(px, w);
            let (y0, y1, ty) = point_taps(py, h);
            let g = g.to_f64_lossy();
            piece[y0 * w + x0] = piece[y0 * w + x0] + T::from_f64(g * (1.0 - ty) * (1.0 - tx));
            piece[y0 * w + x1] = piece[y0 * w + x1] + T::from_f64(g * (1.0 - ty) * tx);
            piece[y1 * w + x0] = piece[y1 * w + x0] + T::from_f64(g * ty * (1.0 - tx));
            piece[y1 * w + x1] = piece[y1 * w + x1] + T::from_f64(g * ty * tx);
        }
    });
}
