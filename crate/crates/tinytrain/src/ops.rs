//! Dense kernels on row-major `f32` buffers.

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k`, `op(b)` is `k x n` and `c` is `m x n`.
/// `ta`/`tb` mean the buffer stores the transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32], beta: f32) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above bounds every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
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

pub const LN_EPS: f32 = 1e-5;

/// Layer norm over rows of width `d`; returns normalized inputs and reciprocal deviations.
pub fn layer_norm(
    x: &[f32],
    d: usize,
    gain: &[f32],
    bias: &[f32],
    out: &mut [f32],
    xhat: &mut [f32],
    rstd: &mut [f32],
) {
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS as f64).sqrt();
        rstd[r] = rs as f32;
        for j in 0..d {
            let h = ((row[j] as f64 - mean) * rs) as f32;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
}

/// Accumulates gain and bias gradients and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    dout: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    d: usize,
    gain: &[f32],
    dgain: &mut [f32],
    dbias: &mut [f32],
    dx: &mut [f32],
) {
    let mut dxhat = vec![0f32; d];
    for r in 0..rstd.len() {
        let o = &dout[r * d..(r + 1) * d];
        let h = &xhat[r * d..(r + 1) * d];
        let (mut mean_dh, mut mean_dh_h) = (0f64, 0f64);
        for j in 0..d {
            dgain[j] += o[j] * h[j];
            dbias[j] += o[j];
            dxhat[j] = o[j] * gain[j];
            mean_dh += dxhat[j] as f64;
            mean_dh_h += (dxhat[j] * h[j]) as f64;
        }
        mean_dh /= d as f64;
        mean_dh_h /= d as f64;
        for j in 0..d {
            dx[r * d + j] += rstd[r] * (dxhat[j] - mean_dh as f32 - h[j] * mean_dh_h as f32);
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Adds `bias` to every row.
pub fn add_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of `x` accumulated into `out`.
pub fn sum_rows_into(x: &[f32], out: &mut [f32]) {
    for row in x.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [1.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 1.0);
        assert_eq!(c2, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0f32, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-3;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-3, "{x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let x = [0.3f32, -1.2, 2.0, 0.5, 1.0, 1.5, -0.5, 0.0];
        let g = [1.0f32, 0.5, -1.0, 2.0];
        let b = [0.1f32; 4];
        let w = [0.7f32, -0.3, 0.2, 1.1, -0.4, 0.9, 0.5, -1.0];
        let f = |x: &[f32]| {
            let (mut o, mut h, mut r) = (vec![0.0; 8], vec![0.0; 8], vec![0.0; 2]);
            layer_norm(x, 4, &g, &b, &mut o, &mut h, &mut r);
            o.iter().zip(&w).map(|(a, b)| (a * b) as f64).sum::<f64>()
        };
        let (mut o, mut h, mut r) = (vec![0.0; 8], vec![0.0; 8], vec![0.0; 2]);
        layer_norm(&x, 4, &g, &b, &mut o, &mut h, &mut r);
        let (mut dg, mut db, mut dx) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 8]);
        layer_norm_backward(&w, &h, &r, 4, &g, &mut dg, &mut db, &mut dx);
        for i in 0..8 {
            let (mut p, mut m) = (x, x);
            p[i] += 1e-2;
            m[i] -= 1e-2;
            let fd = (f(&p) - f(&m)) / 2e-2;
            assert!((fd as f32 - dx[i]).abs() < 2e-3, "{i}: {fd} vs {}", dx[i]);
        }
    }
}
