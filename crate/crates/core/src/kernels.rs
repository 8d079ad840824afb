//! Raw forward/backward loops for the convolution, pooling and normalization ops.
//!
//! All functions work on flat `N, C, H, W` buffers. Convolutions are stride 1 with
//! SAME zero padding and odd square kernels; the vanilla path lowers groups of
//! samples with im2col and runs one GEMM per group.

use crate::tensor::{gemm, Layout, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn from_slice(d: &[usize]) -> Option<Self> {
        match *d {
            [n, c, h, w] => Some(Dims4 { n, c, h, w }),
            _ => None,
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.n * self.sample()
    }
}

/// Unfolds one `C, H, W` sample into a `(C*k*k) x (H*W)` row-major column buffer.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    im2col_strided(x, c, h, w, k, cols, h * w, 0);
}

/// [`im2col`] into rows of length `ld`, starting at column `offset`.
#[allow(clippy::too_many_arguments)]
fn im2col_strided<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T], ld: usize, offset: usize) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * ld + offset..row * ld + offset + hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for oi in 0..h {
                    let ii = oi as isize + di;
                    let out_row = &mut dst[oi * w..(oi + 1) * w];
                    if ii < 0 || ii >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = oj as isize + dj;
                        *o = if jj < 0 || jj >= w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample, accumulating.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    col2im_strided(cols, c, h, w, k, dx, h * w, 0);
}

#[allow(clippy::too_many_arguments)]
fn col2im_strided<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T], ld: usize, offset: usize) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * ld + offset..row * ld + offset + hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for oi in 0..h {
                    let ii = oi as isize + di;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..w {
                        let jj = oj as isize + dj;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] = dst[jj as usize] + src[oi * w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Samples lowered together so one GEMM covers a group; sized to keep the column
/// buffer around a megabyte.
fn group_size(d: Dims4, ckk: usize) -> usize {
    ((1usize << 18) / (ckk * d.plane()).max(1)).clamp(1, d.n.max(1))
}

/// Copies `[G, K, HW]` sample-major data into a `[K, G*HW]` buffer, or back.
fn regroup<T: Scalar>(src: &[T], dst: &mut [T], g: usize, k: usize, hw: usize, to_channel_major: bool) {
    for s in 0..g {
        for ko in 0..k {
            let a = (s * k + ko) * hw;
            let b = ko * g * hw + s * hw;
            if to_channel_major {
                dst[b..b + hw].copy_from_slice(&src[a..a + hw]);
            } else {
                dst[a..a + hw].copy_from_slice(&src[b..b + hw]);
            }
        }
    }
}

/// Vanilla convolution: `kernel` is `[K, C, k, k]`, `bias` is `[K]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], d: Dims4, kernel: &[T], out_ch: usize, k: usize, bias: Option<&[T]>) -> Vec<T> {
    let hw = d.plane();
    let ckk = d.c * k * k;
    let gs = group_size(d, ckk);
    let mut out = vec![T::zero(); d.n * out_ch * hw];
    let mut cols = vec![T::zero(); ckk * gs * hw];
    let mut y = vec![T::zero(); out_ch * gs * hw];
    let mut s0 = 0;
    while s0 < d.n {
        let g = gs.min(d.n - s0);
        let ld = g * hw;
        for s in 0..g {
            let xs = &x[(s0 + s) * d.sample()..(s0 + s + 1) * d.sample()];
            if k == 1 {
                for ch in 0..d.c {
                    cols[ch * ld + s * hw..ch * ld + (s + 1) * hw].copy_from_slice(&xs[ch * hw..(ch + 1) * hw]);
                }
            } else {
                im2col_strided(xs, d.c, d.h, d.w, k, &mut cols, ld, s * hw);
            }
        }
        gemm(
            out_ch,
            ckk,
            ld,
            T::one(),
            kernel,
            Layout::row_major(ckk),
            &cols[..ckk * ld],
            Layout::row_major(ld),
            T::zero(),
            &mut y[..out_ch * ld],
            Layout::row_major(ld),
        );
        let os = &mut out[s0 * out_ch * hw..(s0 + g) * out_ch * hw];
        regroup(&y[..out_ch * ld], os, g, out_ch, hw, false);
        if let Some(b) = bias {
            for (i, row) in os.chunks_exact_mut(hw).enumerate() {
                let bk = b[i % out_ch];
                for v in row {
                    *v = *v + bk;
                }
            }
        }
        s0 += g;
    }
    out
}

/// Gradients of [`conv2d_forward`]. `dkernel`/`dbias` accumulate; `dx` is only
/// produced when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    d: Dims4,
    kernel: &[T],
    out_ch: usize,
    k: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let hw = d.plane();
    let ckk = d.c * k * k;
    if let Some(db) = dbias {
        for s in 0..d.n {
            let ds = &dout[s * out_ch * hw..(s + 1) * out_ch * hw];
            for (ko, row) in ds.chunks_exact(hw).enumerate() {
                db[ko] = db[ko] + row.iter().copied().sum::<T>();
            }
        }
    }
    let gs = group_size(d, ckk);
    let mut cols = vec![T::zero(); ckk * gs * hw];
    let mut dy = vec![T::zero(); out_ch * gs * hw];
    let mut s0 = 0;
    while s0 < d.n {
        let g = gs.min(d.n - s0);
        let ld = g * hw;
        regroup(&dout[s0 * out_ch * hw..(s0 + g) * out_ch * hw], &mut dy, g, out_ch, hw, true);
        if let Some(dk) = dkernel.as_deref_mut() {
            for s in 0..g {
                let xs = &x[(s0 + s) * d.sample()..(s0 + s + 1) * d.sample()];
                if k == 1 {
                    for ch in 0..d.c {
                        cols[ch * ld + s * hw..ch * ld + (s + 1) * hw].copy_from_slice(&xs[ch * hw..(ch + 1) * hw]);
                    }
                } else {
                    im2col_strided(xs, d.c, d.h, d.w, k, &mut cols, ld, s * hw);
                }
            }
            // dK[K, CKK] += dY[K, G*HW] * cols^T
            gemm(
                out_ch,
                ld,
                ckk,
                T::one(),
                &dy[..out_ch * ld],
                Layout::row_major(ld),
                &cols[..ckk * ld],
                Layout::transposed(ld),
                T::one(),
                dk,
                Layout::row_major(ckk),
            );
        }
        if let Some(dxa) = dx.as_deref_mut() {
            gemm(
                ckk,
                out_ch,
                ld,
                T::one(),
                kernel,
                Layout::transposed(ckk),
                &dy[..out_ch * ld],
                Layout::row_major(ld),
                T::zero(),
                &mut cols[..ckk * ld],
                Layout::row_major(ld),
            );
            for s in 0..g {
                let dxs = &mut dxa[(s0 + s) * d.sample()..(s0 + s + 1) * d.sample()];
                if k == 1 {
                    for ch in 0..d.c {
                        let src = &cols[ch * ld + s * hw..ch * ld + (s + 1) * hw];
                        for (o, &v) in dxs[ch * hw..(ch + 1) * hw].iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                } else {
                    col2im_strided(&cols, d.c, d.h, d.w, k, dxs, ld, s * hw);
                }
            }
        }
        s0 += g;
    }
}

/// Per-channel spatial filtering with depth multiplier 1: `kernel` is `[C, k, k]`.
pub fn depthwise_forward<T: Scalar>(x: &[T], d: Dims4, kernel: &[T], k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let (h, w) = (d.h as isize, d.w as isize);
    let mut out = vec![T::zero(); d.numel()];
    for s in 0..d.n {
        for ch in 0..d.c {
            let base = (s * d.c + ch) * d.plane();
            let plane = &x[base..base + d.plane()];
            let kern = &kernel[ch * k * k..(ch + 1) * k * k];
            let dst = &mut out[base..base + d.plane()];
            for oi in 0..h {
                for oj in 0..w {
                    let mut acc = T::zero();
                    for ki in 0..k as isize {
                        let ii = oi + ki - pad;
                        if ii < 0 || ii >= h {
                            continue;
                        }
                        for kj in 0..k as isize {
                            let jj = oj + kj - pad;
                            if jj < 0 || jj >= w {
                                continue;
                            }
                            acc = acc + kern[(ki * k as isize + kj) as usize] * plane[(ii * w + jj) as usize];
                        }
                    }
                    dst[(oi * w + oj) as usize] = acc;
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    d: Dims4,
    kernel: &[T],
    k: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
) {
    let pad = (k / 2) as isize;
    let (h, w) = (d.h as isize, d.w as isize);
    for s in 0..d.n {
        for ch in 0..d.c {
            let base = (s * d.c + ch) * d.plane();
            let plane = &x[base..base + d.plane()];
            let dplane = &dout[base..base + d.plane()];
            let kern = &kernel[ch * k * k..(ch + 1) * k * k];
            for oi in 0..h {
                for oj in 0..w {
                    let g = dplane[(oi * w + oj) as usize];
                    if g == T::zero() {
                        continue;
                    }
                    for ki in 0..k as isize {
                        let ii = oi + ki - pad;
                        if ii < 0 || ii >= h {
                            continue;
                        }
                        for kj in 0..k as isize {
                            let jj = oj + kj - pad;
                            if jj < 0 || jj >= w {
                                continue;
                            }
                            let kidx = (ki * k as isize + kj) as usize;
                            let xidx = (ii * w + jj) as usize;
                            if let Some(dk) = dkernel.as_deref_mut() {
                                let at = ch * k * k + kidx;
                                dk[at] = dk[at] + g * plane[xidx];
                            }
                            if let Some(dxa) = dx.as_deref_mut() {
                                dxa[base + xidx] = dxa[base + xidx] + g * kern[kidx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling with floor semantics. Returns the pooled values and the
/// flat input index each output was taken from (first maximum in row-major order).
pub fn max_pool2_forward<T: Scalar>(x: &[T], d: Dims4) -> (Vec<T>, Vec<usize>, Dims4) {
    let od = Dims4 { n: d.n, c: d.c, h: d.h / 2, w: d.w / 2 };
    let mut out = Vec::with_capacity(od.numel());
    let mut arg = Vec::with_capacity(od.numel());
    for plane in 0..d.n * d.c {
        let base = plane * d.plane();
        for oi in 0..od.h {
            for oj in 0..od.w {
                let mut best = base + (2 * oi) * d.w + 2 * oj;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oi + di) * d.w + 2 * oj + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, od)
}

/// Batch statistics per channel over `(N, H, W)`: returns `(mean, biased variance)`.
pub fn channel_stats<T: Scalar>(x: &[T], d: Dims4) -> (Vec<T>, Vec<T>) {
    let m = T::from_f64((d.n * d.plane()) as f64);
    let mut mean = vec![T::zero(); d.c];
    let mut var = vec![T::zero(); d.c];
    for ch in 0..d.c {
        let mut s = T::zero();
        for n in 0..d.n {
            let base = (n * d.c + ch) * d.plane();
            s = s + x[base..base + d.plane()].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for n in 0..d.n {
            let base = (n * d.c + ch) * d.plane();
            for &xi in &x[base..base + d.plane()] {
                v = v + (xi - mu) * (xi - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let cc: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; cc.len()];
        im2col(&x, c, h, w, k, &mut cols);
        let lhs: f64 = cols.iter().zip(&cc).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im(&cc, c, h, w, k, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_ties_pick_first() {
        let x = vec![1.0f64, 1.0, 1.0, 1.0];
        let (out, arg, od) = max_pool2_forward(&x, Dims4 { n: 1, c: 1, h: 2, w: 2 });
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
        assert_eq!((od.h, od.w), (1, 1));
    }
}
