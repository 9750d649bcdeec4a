//! Forward and backward kernels on raw slices. The tape calls these; they
//! know nothing about graph bookkeeping.

use super::Real;
use crate::par;

pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `u`.
#[inline]
fn span(u: usize, pad: isize, len: usize) -> (usize, usize) {
    let shift = u as isize - pad;
    let lo = ((-shift).max(0) as usize).min(len);
    let hi = (len as isize - shift).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn dense_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    batch: usize,
    nin: usize,
    nout: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * nout];
    par::for_each_chunk_mut(&mut out, nout, batch * nin * nout, |row, o| {
        o.copy_from_slice(b);
        let xr = &x[row * nin..(row + 1) * nin];
        for (i, &xv) in xr.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wr = &w[i * nout..(i + 1) * nout];
            for (ov, &wv) in o.iter_mut().zip(wr) {
                *ov += xv * wv;
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`; each only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Real>(
    g: &[T],
    x: &[T],
    w: &[T],
    batch: usize,
    nin: usize,
    nout: usize,
    want: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let work = batch * nin * nout;
    let dx = want[0].then(|| {
        let mut dx = vec![T::zero(); batch * nin];
        par::for_each_chunk_mut(&mut dx, nin, work, |row, d| {
            let gr = &g[row * nout..(row + 1) * nout];
            for (i, dv) in d.iter_mut().enumerate() {
                let wr = &w[i * nout..(i + 1) * nout];
                *dv = gr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
            }
        });
        dx
    });
    let dw = want[1].then(|| {
        let mut dw = vec![T::zero(); nin * nout];
        par::for_each_chunk_mut(&mut dw, nout, work, |i, d| {
            for row in 0..batch {
                let xv = x[row * nin + i];
                if xv == T::zero() {
                    continue;
                }
                let gr = &g[row * nout..(row + 1) * nout];
                for (dv, &gv) in d.iter_mut().zip(gr) {
                    *dv += xv * gv;
                }
            }
        });
        dw
    });
    let db = want[2].then(|| {
        let mut db = vec![T::zero(); nout];
        for row in 0..batch {
            for (dv, &gv) in db.iter_mut().zip(&g[row * nout..(row + 1) * nout]) {
                *dv += gv;
            }
        }
        db
    });
    [dx, dw, db]
}

/// Columns per cache tile in the matrix kernels.
const TILE: usize = 256;

/// Dot product with a fixed eight-lane summation order.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let split = a.len() / 8 * 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (&x, &y) in a[split..].iter().zip(&b[split..]) {
        s += x * y;
    }
    s
}

/// `c [m, p] += a [m, r] · b [r, p]`, rows of `c` split across threads.
fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, r: usize, p: usize) {
    let rows = m.div_ceil(par::threads()).max(1);
    par::for_each_chunk_mut(c, rows * p, m * r * p, |blk, cb| {
        let row0 = blk * rows;
        let nrows = cb.len() / p;
        for t0 in (0..p).step_by(TILE) {
            let t1 = (t0 + TILE).min(p);
            for ii in 0..nrows {
                let arow = &a[(row0 + ii) * r..(row0 + ii + 1) * r];
                let crow = &mut cb[ii * p + t0..ii * p + t1];
                for (kk, &av) in arow.iter().enumerate() {
                    if av == T::zero() {
                        continue;
                    }
                    for (cv, &bv) in crow.iter_mut().zip(&b[kk * p + t0..kk * p + t1]) {
                        *cv += av * bv;
                    }
                }
            }
        }
    });
}

/// `c [m, r] += a [m, p] · b [r, p]ᵀ`, rows of `c` split across threads.
fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, r: usize, p: usize) {
    let rows = m.div_ceil(par::threads()).max(1);
    par::for_each_chunk_mut(c, rows * r, m * r * p, |blk, cb| {
        let row0 = blk * rows;
        let nrows = cb.len() / r;
        for t0 in (0..p).step_by(TILE) {
            let t1 = (t0 + TILE).min(p);
            for ii in 0..nrows {
                let arow = &a[(row0 + ii) * p + t0..(row0 + ii) * p + t1];
                for (kk, cv) in cb[ii * r..(ii + 1) * r].iter_mut().enumerate() {
                    *cv += dot(arow, &b[kk * p + t0..kk * p + t1]);
                }
            }
        }
    });
}

/// `[rows, cols] -> [cols, rows]`.
fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Swaps the two outer axes of `[a, b, inner]`.
fn swap_outer<T: Real>(x: &[T], a: usize, b: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * inner..(j * a + i + 1) * inner]
                .copy_from_slice(&x[(i * b + j) * inner..(i * b + j + 1) * inner]);
        }
    }
    out
}

/// Zero-padded patches: `[batch, cin, h, w] -> [cin·k·k, batch·h·w]`.
fn im2col<T: Real>(x: &[T], d: &ConvDims) -> Vec<T> {
    let plane = d.h * d.w;
    let kk = d.k * d.k;
    let p = d.batch * plane;
    let pad = d.pad();
    let mut col = vec![T::zero(); d.cin * kk * p];
    par::for_each_chunk_mut(&mut col, p, d.cin * kk * p, |r, row| {
        let (ci, u, v) = (r / kk, (r % kk) / d.k, r % d.k);
        let (ilo, ihi) = span(u, pad, d.h);
        let (jlo, jhi) = span(v, pad, d.w);
        if jlo == jhi {
            return;
        }
        let di = u as isize - pad;
        let dj = v as isize - pad;
        for n in 0..d.batch {
            let xp = &x[(n * d.cin + ci) * plane..(n * d.cin + ci + 1) * plane];
            let dst = &mut row[n * plane..(n + 1) * plane];
            for i in ilo..ihi {
                let s0 = ((i as isize + di) * d.w as isize + jlo as isize + dj) as usize;
                dst[i * d.w + jlo..i * d.w + jhi].copy_from_slice(&xp[s0..s0 + jhi - jlo]);
            }
        }
    });
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(dcol: &[T], d: &ConvDims) -> Vec<T> {
    let plane = d.h * d.w;
    let kk = d.k * d.k;
    let p = d.batch * plane;
    let pad = d.pad();
    let mut dx = vec![T::zero(); d.batch * d.cin * plane];
    par::for_each_chunk_mut(&mut dx, plane, dcol.len(), |nc, dxp| {
        let (n, ci) = (nc / d.cin, nc % d.cin);
        for uv in 0..kk {
            let (u, v) = (uv / d.k, uv % d.k);
            let (ilo, ihi) = span(u, pad, d.h);
            let (jlo, jhi) = span(v, pad, d.w);
            if jlo == jhi {
                continue;
            }
            let di = u as isize - pad;
            let dj = v as isize - pad;
            let row = &dcol[(ci * kk + uv) * p + n * plane..(ci * kk + uv) * p + (n + 1) * plane];
            for i in ilo..ihi {
                let s0 = ((i as isize + di) * d.w as isize + jlo as isize + dj) as usize;
                for (dv, &gv) in dxp[s0..s0 + jhi - jlo].iter_mut().zip(&row[i * d.w + jlo..i * d.w + jhi]) {
                    *dv += gv;
                }
            }
        }
    });
    dx
}

pub(crate) fn conv_forward<T: Real>(x: &[T], k: &[T], b: &[T], d: &ConvDims) -> Vec<T> {
    let plane = d.h * d.w;
    let r = d.cin * d.k * d.k;
    let p = d.batch * plane;
    let col = im2col(x, d);
    let mut out_t = vec![T::zero(); d.cout * p];
    for (co, row) in out_t.chunks_mut(p).enumerate() {
        row.iter_mut().for_each(|v| *v = b[co]);
    }
    matmul_acc(k, &col, &mut out_t, d.cout, r, p);
    swap_outer(&out_t, d.cout, d.batch, plane)
}

pub(crate) fn conv_backward<T: Real>(
    g: &[T],
    x: &[T],
    k: &[T],
    d: &ConvDims,
    want: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let plane = d.h * d.w;
    let r = d.cin * d.k * d.k;
    let p = d.batch * plane;
    // [cout, batch·plane]
    let g_t = swap_outer(g, d.batch, d.cout, plane);

    let dx = want[0].then(|| {
        let k_t = transpose(k, d.cout, r);
        let mut dcol = vec![T::zero(); r * p];
        matmul_acc(&k_t, &g_t, &mut dcol, r, d.cout, p);
        col2im(&dcol, d)
    });

    let dk = want[1].then(|| {
        let col = im2col(x, d);
        let mut dk = vec![T::zero(); d.cout * r];
        matmul_nt_acc(&g_t, &col, &mut dk, d.cout, r, p);
        dk
    });

    let db = want[2].then(|| {
        g_t.chunks(p)
            .map(|row| row.iter().copied().sum::<T>())
            .collect()
    });
    [dx, dk, db]
}

/// `[n, c, h, w] -> [n, c, 2h, 2w]` by replication.
pub(crate) fn upsample_nearest<T: Real>(x: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); nc * 4 * h * w];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Real>(
    g: &[T],
    nc: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
            }
        }
    }
    dx
}

/// Index of the input element feeding sub-pixel output `(n, c, oi, oj)`.
#[inline]
fn subpixel_src(n: usize, c: usize, oi: usize, oj: usize, cout: usize, h: usize, w: usize) -> usize {
    let (i, di, j, dj) = (oi / 2, oi % 2, oj / 2, oj % 2);
    let cin = cout * 4;
    ((n * cin + c * 4 + di * 2 + dj) * h + i) * w + j
}

/// `[n, 4c, h, w] -> [n, c, 2h, 2w]` channel shuffle.
pub(crate) fn upsample_subpixel<T: Real>(x: &[T], n: usize, cout: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * cout * 4 * h * w];
    let mut idx = 0;
    for b in 0..n {
        for c in 0..cout {
            for oi in 0..2 * h {
                for oj in 0..2 * w {
                    out[idx] = x[subpixel_src(b, c, oi, oj, cout, h, w)];
                    idx += 1;
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_subpixel_backward<T: Real>(
    g: &[T],
    n: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * cout * 4 * h * w];
    let mut idx = 0;
    for b in 0..n {
        for c in 0..cout {
            for oi in 0..2 * h {
                for oj in 0..2 * w {
                    dx[subpixel_src(b, c, oi, oj, cout, h, w)] += g[idx];
                    idx += 1;
                }
            }
        }
    }
    dx
}

/// Softmax along the middle axis of an `(outer, len, inner)` view. Masked
/// entries (`mask[c] == false`) get probability exactly zero.
pub(crate) fn softmax<T: Real>(
    x: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    mask: Option<&[bool]>,
) -> Vec<T> {
    let allowed = |c: usize| mask.is_none_or(|m| m[c]);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |c: usize| base + c * inner + i;
            let mut max = T::neg_infinity();
            for c in (0..len).filter(|&c| allowed(c)) {
                max = max.max(x[at(c)]);
            }
            let mut total = T::zero();
            for c in (0..len).filter(|&c| allowed(c)) {
                let e = (x[at(c)] - max).exp();
                out[at(c)] = e;
                total += e;
            }
            for c in (0..len).filter(|&c| allowed(c)) {
                out[at(c)] = out[at(c)] / total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(
    g: &[T],
    y: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut dot = T::zero();
            for c in 0..len {
                let at = base + c * inner + i;
                dot += y[at] * g[at];
            }
            for c in 0..len {
                let at = base + c * inner + i;
                dx[at] = y[at] * (g[at] - dot);
            }
        }
    }
    dx
}
