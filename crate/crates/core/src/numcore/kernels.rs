//! Low-level numeric kernels shared by the taped and no-grad forward paths.
//!
//! Every kernel uses a fixed sequential summation order (row-major), so the
//! same inputs produce bitwise-identical outputs on every run and platform.

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// C[m,n] = A[m,k] * B[k,n], row-major. `out` must be zeroed or overwritten.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[k,n].
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[n,m] = transpose of x[m,n].
pub fn transpose(x: &[f64], m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
}

/// Row-wise stable softmax: per row subtract the max, exponentiate, normalize.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let oi = &mut out[r * cols..(r + 1) * cols];
        let mx = xi.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (o, &v) in oi.iter_mut().zip(xi) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in oi.iter_mut() {
            *o /= sum;
        }
    }
}

/// Per-row layer normalization with affine gain/bias over the column axis.
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    cols: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(gain.len(), cols);
    debug_assert_eq!(bias.len(), cols);
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let oi = &mut out[r * cols..(r + 1) * cols];
        let mean = xi.iter().sum::<f64>() / cols as f64;
        let var = xi.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for c in 0..cols {
            oi[c] = (xi[c] - mean) * rstd * gain[c] + bias[c];
        }
    }
}

/// GELU, tanh approximation. Smooth, so finite-difference checks stay tight.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// L2-normalizes each row; returns the per-row norms. Zero rows are reported
/// so callers can reject them.
pub fn row_l2_normalize(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) -> Vec<f64> {
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let n = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(n);
        let oi = &mut out[r * cols..(r + 1) * cols];
        if n > 0.0 {
            for (o, &v) in oi.iter_mut().zip(xi) {
                *o = v / n;
            }
        } else {
            oi.fill(0.0);
        }
    }
    norms
}

/// Mean negative log-softmax probability of the true class per row.
pub fn cross_entropy_mean(logits: &[f64], rows: usize, cols: usize, labels: &[usize]) -> f64 {
    debug_assert_eq!(labels.len(), rows);
    let mut total = 0.0;
    for r in 0..rows {
        let xi = &logits[r * cols..(r + 1) * cols];
        let mx = xi.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = xi.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
        total += lse - xi[labels[r]];
    }
    total / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_selection() {
        // [[1,2],[3,4]] x I = same
        let a = [1.0, 2.0, 3.0, 4.0];
        let i2 = [1.0, 0.0, 0.0, 1.0];
        let mut out = [0.0; 4];
        matmul(&a, &i2, 2, 2, 2, &mut out);
        assert_eq!(out, a);
        // [[1,0]] x [[2],[5]] = [[2]]
        let r = [1.0, 0.0];
        let c = [2.0, 5.0];
        let mut o1 = [0.0; 1];
        matmul(&r, &c, 1, 2, 1, &mut o1);
        assert_eq!(o1, [2.0]);
    }

    #[test]
    fn softmax_hand_values() {
        let mut out = [0.0; 2];
        softmax_rows(&[0.0, 0.0], 1, 2, &mut out);
        assert_eq!(out, [0.5, 0.5]);

        softmax_rows(&[1.0, 3.0], 1, 2, &mut out);
        assert!((out[0] - 0.11920).abs() < 1e-5);
        assert!((out[1] - 0.88080).abs() < 1e-5);

        // no overflow under large logits
        softmax_rows(&[1000.0, 0.0], 1, 2, &mut out);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_hand_values() {
        // constant row maps to the bias (zero here)
        let mut out = [0.0; 3];
        layer_norm_rows(&[5.0, 5.0, 5.0], &[1.0; 3], &[0.0; 3], 1, 3, &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-9));

        // row [1,-1] is already normalized up to eps
        let mut o2 = [0.0; 2];
        layer_norm_rows(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1, 2, &mut o2);
        let expect = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((o2[0] - expect).abs() < 1e-12);
        assert!((o2[0] - 1.0).abs() < 1e-4);
        assert!((o2[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_hand_values() {
        // uniform logits, C=2 -> ln 2
        let ce = cross_entropy_mean(&[0.0, 0.0], 1, 2, &[0]);
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        // logits [10,-10], label 0 -> -ln sigma(20)
        let ce = cross_entropy_mean(&[10.0, -10.0], 1, 2, &[0]);
        let expect = (1.0 + (-20.0f64).exp()).ln();
        assert!((ce - expect).abs() < 1e-15);
        assert!(ce < 2.1e-9 && ce > 2.0e-9);
    }
}
