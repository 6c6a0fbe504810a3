//! Slice-level numeric kernels shared by the graph's forward and reverse passes.
//!
//! Everything here is row-major and allocation-explicit; shape validation is the
//! caller's job.

use super::Real;

/// `c[n,m] = a[n,k] * b[k,m]`
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    matmul_into(a, b, &mut c, n, k, m);
    c
}

/// Accumulates `a * b` into `c`.
pub fn matmul_into<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[n,m] = a[n,k] * b[m,k]^T`
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let bt = transpose2(b, m, k);
    matmul(a, &bt, n, k, m)
}

/// `c[k,m] = a[n,k]^T * b[n,m]`
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose2<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Generic axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Real>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits a shape around `axis` into (outer, axis_len, inner).
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if cols == 0 {
        return out;
    }
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x * Phi(x)`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf());
    let pdf = T::of(INV_SQRT_2PI) * (-T::of(0.5) * x * x).exp();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Layer normalization over contiguous rows. Returns (normalized, reciprocal std per row).
pub fn layer_norm_rows<T: Real>(x: &[T], cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let n = T::of(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// Depthwise 1-D convolution with zero "same" padding.
/// `x[len, ch]`, `w[ch, k]`, optional `b[ch]`.
pub fn depthwise_conv1d<T: Real>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    len: usize,
    ch: usize,
    k: usize,
) -> Vec<T> {
    let pad = k / 2;
    let mut out = vec![T::zero(); len * ch];
    for t in 0..len {
        let orow = &mut out[t * ch..(t + 1) * ch];
        if let Some(b) = b {
            orow.copy_from_slice(b);
        }
        for j in 0..k {
            let src = t as isize + j as isize - pad as isize;
            if src < 0 || src as usize >= len {
                continue;
            }
            let xrow = &x[src as usize * ch..(src as usize + 1) * ch];
            for c in 0..ch {
                orow[c] += w[c * k + j] * xrow[c];
            }
        }
    }
    out
}

/// Dense 1-D convolution with zero "same" padding.
/// `x[len, cin]`, `w[cout, cin, k]`, optional `b[cout]`.
pub fn conv1d<T: Real>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    len: usize,
    cin: usize,
    cout: usize,
    k: usize,
) -> Vec<T> {
    let pad = k / 2;
    let mut out = vec![T::zero(); len * cout];
    for t in 0..len {
        for o in 0..cout {
            let mut acc = b.map_or(T::zero(), |b| b[o]);
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let xrow = &x[src as usize * cin..(src as usize + 1) * cin];
                for (i, &xv) in xrow.iter().enumerate() {
                    acc += w[(o * cin + i) * k + j] * xv;
                }
            }
            out[t * cout + o] = acc;
        }
    }
    out
}

/// Rotary embedding over `x[len, heads * head_dim]`, rotating pair `(i, i + head_dim/2)`
/// of every head by `pos * base^(-2i/head_dim)` with `pos = row + offset`.
/// `inverse` applies the transpose rotation.
pub fn rope<T: Real>(
    x: &[T],
    len: usize,
    heads: usize,
    head_dim: usize,
    base: f64,
    offset: usize,
    inverse: bool,
) -> Vec<T> {
    let half = head_dim / 2;
    let width = heads * head_dim;
    let mut out = x.to_vec();
    let sign = if inverse { -1.0 } else { 1.0 };
    for t in 0..len {
        let pos = (t + offset) as f64;
        for i in 0..half {
            let theta = pos * base.powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = (sign * theta).sin_cos();
            let (s, c) = (T::of(s), T::of(c));
            for h in 0..heads {
                let a = t * width + h * head_dim + i;
                let b = a + half;
                let (xa, xb) = (x[a], x[b]);
                out[a] = xa * c - xb * s;
                out[b] = xa * s + xb * c;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        let bt = transpose2(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), c);
        let at = transpose2(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), c);
    }

    #[test]
    fn permute_inverse_restores() {
        let data: Vec<f64> = (0..24).map(|x| x as f64).collect();
        let (p, s) = permute(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        let (back, s2) = permute(&p, &s, &inverse_permutation(&[2, 0, 1]));
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let x: Vec<f64> = (0..32).map(|v| (v as f64).sin()).collect();
        let y = rope(&x, 4, 2, 4, 10000.0, 3, false);
        let z = rope(&y, 4, 2, 4, 10000.0, 3, true);
        for (a, b) in x.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
