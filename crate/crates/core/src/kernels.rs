//! Forward and backward kernels on raw buffers.
//!
//! All loops run in a fixed order so results are bit-reproducible.

use crate::scalar::Scalar;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Unfold a `[C, H, W]` image into `[C·9, H·W]` patch columns (3×3, zero pad 1).
pub fn im2col3<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, cols: &mut [S]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = S::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = S::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-add columns back onto `[C, H, W]`.
pub fn col2im3<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, x: &mut [S]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += *s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub fn conv3_forward<S: Scalar>(d: &ConvDims, x: &[S], wt: &[S], bias: &[S], out: &mut [S]) {
    let hw = d.h * d.w;
    let mut cols = vec![S::zero(); d.cin * 9 * hw];
    for b in 0..d.n {
        im2col3(&x[b * d.cin * hw..(b + 1) * d.cin * hw], d.cin, d.h, d.w, &mut cols);
        let o = &mut out[b * d.cout * hw..(b + 1) * d.cout * hw];
        for (co, chunk) in o.chunks_mut(hw).enumerate() {
            chunk.fill(bias[co]);
        }
        S::gemm(false, false, d.cout, d.cin * 9, hw, wt, &cols, o, true);
    }
}

/// Gradients of a 3×3 same-padded convolution. `dx` may be `None` when the
/// input does not need a gradient.
pub fn conv3_backward<S: Scalar>(
    d: &ConvDims,
    x: &[S],
    wt: &[S],
    dout: &[S],
    mut dx: Option<&mut [S]>,
    dw: &mut [S],
    db: &mut [S],
) {
    let hw = d.h * d.w;
    let mut cols = vec![S::zero(); d.cin * 9 * hw];
    let mut dcols = vec![S::zero(); d.cin * 9 * hw];
    for b in 0..d.n {
        let go = &dout[b * d.cout * hw..(b + 1) * d.cout * hw];
        im2col3(&x[b * d.cin * hw..(b + 1) * d.cin * hw], d.cin, d.h, d.w, &mut cols);
        S::gemm(false, true, d.cout, hw, d.cin * 9, go, &cols, dw, true);
        for (co, chunk) in go.chunks(hw).enumerate() {
            db[co] += chunk.iter().copied().sum::<S>();
        }
        if let Some(dx) = dx.as_deref_mut() {
            S::gemm(true, false, d.cin * 9, d.cout, hw, wt, go, &mut dcols, false);
            col2im3(&dcols, d.cin, d.h, d.w, &mut dx[b * d.cin * hw..(b + 1) * d.cin * hw]);
        }
    }
}

/// Group normalization over `[N, C, inner]`; returns per-(n, group) mean and
/// reciprocal std alongside the output.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    inner: usize,
    groups: usize,
    gamma: &[S],
    beta: &[S],
    out: &mut [S],
) -> (Vec<S>, Vec<S>) {
    let cg = c / groups;
    let len = cg * inner;
    let count = S::of(len as f64);
    let eps = S::of(GROUP_NORM_EPS);
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for b in 0..n {
        for g in 0..groups {
            let off = (b * c + g * cg) * inner;
            let seg = &x[off..off + len];
            let mean = seg.iter().copied().sum::<S>() / count;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / count;
            let rstd = S::one() / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                let o = off + ci * inner;
                for i in o..o + inner {
                    out[i] = (x[i] - mean) * rstd * ga + be;
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
    }
    (means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<S: Scalar>(
    x: &[S],
    dy: &[S],
    n: usize,
    c: usize,
    inner: usize,
    groups: usize,
    gamma: &[S],
    means: &[S],
    rstds: &[S],
    dx: &mut [S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) {
    let cg = c / groups;
    let len = cg * inner;
    let count = S::of(len as f64);
    for b in 0..n {
        for g in 0..groups {
            let idx = b * groups + g;
            let (mean, rstd) = (means[idx], rstds[idx]);
            let off = (b * c + g * cg) * inner;
            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let o = off + ci * inner;
                let mut dg = S::zero();
                let mut dbe = S::zero();
                for i in o..o + inner {
                    let xhat = (x[i] - mean) * rstd;
                    let d = dy[i] * gamma[ch];
                    sum_dxhat += d;
                    sum_dxhat_xhat += d * xhat;
                    dg += dy[i] * xhat;
                    dbe += dy[i];
                }
                dgamma[ch] += dg;
                dbeta[ch] += dbe;
            }
            let m1 = sum_dxhat / count;
            let m2 = sum_dxhat_xhat / count;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let o = off + ci * inner;
                for i in o..o + inner {
                    let xhat = (x[i] - mean) * rstd;
                    dx[i] += rstd * (dy[i] * gamma[ch] - m1 - xhat * m2);
                }
            }
        }
    }
}

pub fn softmax_rows<S: Scalar>(x: &[S], cols: usize, out: &mut [S]) {
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = xr.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut z = S::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            z += *o;
        }
        let inv = S::one() / z;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

pub fn softmax_rows_backward<S: Scalar>(y: &[S], dy: &[S], cols: usize, dx: &mut [S]) {
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: S = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - dot);
        }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn avgpool2_forward<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize, out: &mut [S]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::of(0.25);
    for p in 0..planes {
        let src = &x[p * h * w..];
        let dst = &mut out[p * oh * ow..];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
}

pub fn avgpool2_backward<S: Scalar>(dy: &[S], planes: usize, h: usize, w: usize, dx: &mut [S]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::of(0.25);
    for p in 0..planes {
        let g = &dy[p * oh * ow..];
        let d = &mut dx[p * h * w..];
        for y in 0..oh {
            for xx in 0..ow {
                let v = g[y * ow + xx] * quarter;
                let i = 2 * y * w + 2 * xx;
                d[i] += v;
                d[i + 1] += v;
                d[i + w] += v;
                d[i + w + 1] += v;
            }
        }
    }
}

pub fn upsample2_forward<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize, out: &mut [S]) {
    let ow = 2 * w;
    for p in 0..planes {
        let src = &x[p * h * w..];
        let dst = &mut out[p * 4 * h * w..];
        for y in 0..2 * h {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
}

pub fn upsample2_backward<S: Scalar>(dy: &[S], planes: usize, h: usize, w: usize, dx: &mut [S]) {
    let ow = 2 * w;
    for p in 0..planes {
        let g = &dy[p * 4 * h * w..];
        let d = &mut dx[p * h * w..];
        for y in 0..2 * h {
            for xx in 0..ow {
                d[(y / 2) * w + xx / 2] += g[y * ow + xx];
            }
        }
    }
}

/// For each flat output index, the flat index into an operand broadcast to
/// `out_shape` (size-1 axes repeat).
pub fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        in_strides[ax] = if in_shape[ax] == 1 { 0 } else { acc };
        acc *= in_shape[ax];
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += in_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= in_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_bias_layout() {
        let m = broadcast_map(&[2, 3, 2], &[1, 3, 1]);
        assert_eq!(m, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
        let same = broadcast_map(&[2, 2], &[2, 2]);
        assert_eq!(same, vec![0, 1, 2, 3]);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let mut cols = vec![0.0; 9 * 12];
        im2col3(&x, 1, 3, 4, &mut cols);
        assert_eq!(&cols[4 * 12..5 * 12], &x[..]);
        // top-left tap of pixel (0,0) is padding
        assert_eq!(cols[0], 0.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 3, 4);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..c * 9 * h * w).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col3(&x, c, h, w, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im3(&y, c, h, w, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
