//! Raw numeric loops behind the graph operations. Every function works on
//! row-major slices; shape checking happens in the graph layer.

use rayon::prelude::*;

use super::{alloc_zeros, strict_mode, Float};

const PAR_MIN_WORK: usize = 1 << 16;

fn parallel(work: usize) -> bool {
    work >= PAR_MIN_WORK && !strict_mode()
}

/// `out[r, :] = x[r, :] · w + b` with `w` laid out `cin × cout`.
pub(crate) fn linear_forward<T: Float>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    rows: usize,
    cin: usize,
    cout: usize,
) -> Vec<T> {
    let mut out = alloc_zeros(rows * cout);
    let row = |(xr, or): (&[T], &mut [T])| {
        if let Some(b) = b {
            or.copy_from_slice(b);
        }
        for (i, &xi) in xr.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let wr = &w[i * cout..(i + 1) * cout];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xi * wv;
            }
        }
    };
    if parallel(rows * cin * cout) {
        x.par_chunks(cin)
            .zip(out.par_chunks_mut(cout))
            .for_each(row);
    } else {
        x.chunks(cin).zip(out.chunks_mut(cout)).for_each(row);
    }
    out
}

/// Gradients of [`linear_forward`]: returns `(dx, dw, db)`.
pub(crate) fn linear_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    cin: usize,
    cout: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let dx = need_dx.then(|| {
        let mut dx = alloc_zeros(rows * cin);
        let row = |(dxr, dyr): (&mut [T], &[T])| {
            for (i, d) in dxr.iter_mut().enumerate() {
                let wr = &w[i * cout..(i + 1) * cout];
                *d = wr.iter().zip(dyr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            }
        };
        if parallel(rows * cin * cout) {
            dx.par_chunks_mut(cin).zip(dy.par_chunks(cout)).for_each(row);
        } else {
            dx.chunks_mut(cin).zip(dy.chunks(cout)).for_each(row);
        }
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = alloc_zeros(cin * cout);
        for (xr, dyr) in x.chunks(cin).zip(dy.chunks(cout)) {
            for (i, &xi) in xr.iter().enumerate() {
                if xi == T::zero() {
                    continue;
                }
                let dwr = &mut dw[i * cout..(i + 1) * cout];
                for (d, &g) in dwr.iter_mut().zip(dyr) {
                    *d += xi * g;
                }
            }
        }
        dw
    });
    let db = need_db.then(|| {
        let mut db = alloc_zeros(cout);
        for dyr in dy.chunks(cout) {
            for (d, &g) in db.iter_mut().zip(dyr) {
                *d += g;
            }
        }
        db
    });
    (dx, dw, db)
}

/// Plain `p×q` by `q×r` product accumulated into `out`.
pub(crate) fn gemm_acc<T: Float>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let or = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let br = &b[k * r..(k + 1) * r];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is `p×r` and `b` is `q×r`, giving `p×q`.
pub(crate) fn gemm_nt_acc<T: Float>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let ar = &a[i * r..(i + 1) * r];
        for k in 0..q {
            let br = &b[k * r..(k + 1) * r];
            out[i * q + k] += ar.iter().zip(br).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }
}

/// `out += aᵀ · b` where `a` is `p×q` and `b` is `p×r`, giving `q×r`.
pub(crate) fn gemm_tn_acc<T: Float>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let br = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let or = &mut out[k * r..(k + 1) * r];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += aik * bv;
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of the Gaussian error linear unit.
#[inline]
pub(crate) fn gelu<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(SQRT_2_OVER_PI) * (T::one() + T::of(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Row softmax over contiguous chunks of length `len`, max-shifted.
pub(crate) fn softmax_rows<T: Float>(x: &[T], len: usize) -> Vec<T> {
    let mut out = alloc_zeros(x.len());
    for (xr, or) in x.chunks(len).zip(out.chunks_mut(len)) {
        let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        let inv = T::one() / s;
        or.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

pub(crate) fn softmax_rows_backward<T: Float>(y: &[T], dy: &[T], len: usize) -> Vec<T> {
    let mut dx = alloc_zeros(y.len());
    for ((yr, dyr), dxr) in y.chunks(len).zip(dy.chunks(len)).zip(dx.chunks_mut(len)) {
        let dot = yr.iter().zip(dyr).fold(T::zero(), |a, (&p, &g)| a + p * g);
        for ((d, &p), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = p * (g - dot);
        }
    }
    dx
}

/// Layer norm over rows of length `c`; returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_forward<T: Float>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    c: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let mut y = alloc_zeros(x.len());
    let mut xhat = alloc_zeros(x.len());
    let mut rstd = alloc_zeros(rows);
    let inv_c = T::one() / T::of(c as f64);
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mean = xr.iter().copied().sum::<T>() * inv_c;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..c {
            let h = (xr[i] - mean) * rs;
            xhat[r * c + i] = h;
            y[r * c + i] = h * gamma[i] + beta[i];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<T: Float>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / c;
    let mut dx = alloc_zeros(dy.len());
    let mut dg = alloc_zeros(c);
    let mut db = alloc_zeros(c);
    let inv_c = T::one() / T::of(c as f64);
    let mut dxhat = vec![T::zero(); c];
    for r in 0..rows {
        let dyr = &dy[r * c..(r + 1) * c];
        let hr = &xhat[r * c..(r + 1) * c];
        let mut mean_d = T::zero();
        let mut mean_dh = T::zero();
        for i in 0..c {
            dg[i] += dyr[i] * hr[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * gamma[i];
            mean_d += dxhat[i];
            mean_dh += dxhat[i] * hr[i];
        }
        mean_d *= inv_c;
        mean_dh *= inv_c;
        for i in 0..c {
            dx[r * c + i] = rstd[r] * (dxhat[i] - mean_d - hr[i] * mean_dh);
        }
    }
    (dx, dg, db)
}
