//! Pure `f64` kernels shared by the tape ops and the frozen backbone, which
//! never needs gradients and so runs outside the tape.

/// C[m,n] = A[m,k] @ B[k,n], row-major. ikj order keeps the inner loop on
/// contiguous slices.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// In-place max-subtracted softmax over each row of an `m x n` matrix.
pub fn softmax_rows(x: &mut [f64], m: usize, n: usize) {
    for i in 0..m {
        let row = &mut x[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Per-row layer norm with affine params: y = (x - mean) / sqrt(var + eps) * gamma + beta.
pub fn layer_norm_rows(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - mean) * inv * gamma[c] + beta[c];
        }
    }
    out
}

/// tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// d/dx of the tanh-form GELU.
pub fn gelu_grad(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Single-head scaled dot-product attention on flat buffers.
/// q: [lq, d], k: [lk, d], v: [lk, dv] -> [lq, dv].
pub fn attention(q: &[f64], k: &[f64], v: &[f64], lq: usize, lk: usize, d: usize, dv: usize) -> Vec<f64> {
    let kt = transpose(k, lk, d);
    let mut scores = matmul(q, &kt, lq, d, lk);
    let scale = 1.0 / (d as f64).sqrt();
    for s in scores.iter_mut() {
        *s *= scale;
    }
    softmax_rows(&mut scores, lq, lk);
    matmul(&scores, v, lq, lk, dv)
}
