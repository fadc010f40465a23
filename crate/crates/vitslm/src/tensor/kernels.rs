//! Raw numeric kernels over row-major slices. No graph bookkeeping here;
//! the tape in [`super::graph`] calls these for both forward and backward.

use super::Elem;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `c[m,n] = alpha * op(a) * op(b) + beta * c` where `op` is optional
/// transposition. `a` is physically `[m,k]` (or `[k,m]` if `ta`), `b` is
/// `[k,n]` (or `[n,k]` if `tb`), `c` is always `[m,n]`. Transposition is
/// stride remapping, never a copy.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Elem>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
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

/// Exact GELU, written through `erfc` so the deep negative tail underflows
/// gracefully: `0.5 * x * erfc(-x / sqrt(2))`. The algebraically equal
/// `0.5 * x * (1 + erf(x / sqrt(2)))` rounds to -0 already at x = -10.
#[inline]
pub fn gelu<T: Elem>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (-x * inv_sqrt2).erfc()
}

/// d/dx GELU = Phi(x) + x * phi(x) with the standard normal CDF and PDF.
#[inline]
pub fn gelu_grad<T: Elem>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let cdf = half * (-x * inv_sqrt2).erfc();
    let pdf = (-(x * x) * half).exp() * T::from_f64(FRAC_1_SQRT_2PI);
    cdf + x * pdf
}

/// Per-row layer norm over the last dimension `d` with population variance
/// and eps inside the square root. Returns per-row mean and inverse std,
/// which the backward pass reuses.
pub fn layer_norm_fwd<T: Elem>(
    x: &[T],
    rows: usize,
    d: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let mut mean = vec![T::zero(); rows];
    let mut inv = vec![T::zero(); rows];
    let dn = T::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut s = T::zero();
        for &v in row {
            s = s + v;
        }
        let m = s / dn;
        let mut var = T::zero();
        for &v in row {
            let c = v - m;
            var = var + c * c;
        }
        var = var / dn;
        let iv = (var + eps).sqrt().recip();
        mean[r] = m;
        inv[r] = iv;
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            o[j] = (row[j] - m) * iv * gamma[j] + beta[j];
        }
    }
    (mean, inv)
}

/// Backward of [`layer_norm_fwd`]. Accumulates (never overwrites) into the
/// optional gradient slices.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_bwd<T: Elem>(
    g: &[T],
    x: &[T],
    rows: usize,
    d: usize,
    gamma: &[T],
    mean: &[T],
    inv: &[T],
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let dn = T::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let (m, iv) = (mean[r], inv[r]);
        if let Some(dg) = dgamma.as_deref_mut() {
            for j in 0..d {
                dg[j] = dg[j] + gr[j] * (xr[j] - m) * iv;
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for j in 0..d {
                db[j] = db[j] + gr[j];
            }
        }
        if let Some(dxr) = dx.as_deref_mut() {
            // dx = inv * (g*gamma - mean(g*gamma) - xhat * mean(g*gamma*xhat))
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..d {
                let gg = gr[j] * gamma[j];
                let xh = (xr[j] - m) * iv;
                s1 = s1 + gg;
                s2 = s2 + gg * xh;
            }
            s1 = s1 / dn;
            s2 = s2 / dn;
            let o = &mut dxr[r * d..(r + 1) * d];
            for j in 0..d {
                let gg = gr[j] * gamma[j];
                let xh = (xr[j] - m) * iv;
                o[j] = o[j] + iv * (gg - s1 - xh * s2);
            }
        }
    }
}

/// Max-subtracted softmax over rows of length `n`.
pub fn softmax_rows<T: Elem>(x: &[T], rows: usize, n: usize, out: &mut [T]) {
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let o = &mut out[r * n..(r + 1) * n];
        let mut s = T::zero();
        for j in 0..n {
            let e = (row[j] - mx).exp();
            o[j] = e;
            s = s + e;
        }
        let is = s.recip();
        for v in o.iter_mut() {
            *v = *v * is;
        }
    }
}

/// Backward of softmax given its output `y`: `dx += y * (g - sum(g * y))`.
pub fn softmax_bwd<T: Elem>(g: &[T], y: &[T], rows: usize, n: usize, dx: &mut [T]) {
    for r in 0..rows {
        let gr = &g[r * n..(r + 1) * n];
        let yr = &y[r * n..(r + 1) * n];
        let mut dot = T::zero();
        for j in 0..n {
            dot = dot + gr[j] * yr[j];
        }
        let o = &mut dx[r * n..(r + 1) * n];
        for j in 0..n {
            o[j] = o[j] + yr[j] * (gr[j] - dot);
        }
    }
}

/// Column sums of a `[rows, n]` matrix, accumulated into `out[n]`.
/// Bias gradients for every linear layer.
pub fn colsum_accum<T: Elem>(g: &[T], rows: usize, n: usize, out: &mut [T]) {
    for r in 0..rows {
        let gr = &g[r * n..(r + 1) * n];
        for j in 0..n {
            out[j] = out[j] + gr[j];
        }
    }
}
