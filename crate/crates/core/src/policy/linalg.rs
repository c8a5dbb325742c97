//! Row-vector / row-major matrix kernels used by forward and backward passes.
//! A weight `w` of shape `(n_in, n_out)` maps `x[n_in] -> y[n_out]`.

/// `out = x · w` (overwrites `out`).
#[inline]
pub(crate) fn vec_mat(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n_out = out.len();
    debug_assert_eq!(w.len(), x.len() * n_out);
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &r) in out.iter_mut().zip(row) {
            *o += xi * r;
        }
    }
}

/// `dx += dy · wᵀ`.
#[inline]
pub(crate) fn vec_mat_t_acc(dy: &[f64], w: &[f64], dx: &mut [f64]) {
    let n_out = dy.len();
    for (i, d) in dx.iter_mut().enumerate() {
        *d += dot(&w[i * n_out..(i + 1) * n_out], dy);
    }
}

/// `dw += xᵀ · dy`.
#[inline]
pub(crate) fn outer_acc(x: &[f64], dy: &[f64], dw: &mut [f64]) {
    let n_out = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * n_out..(i + 1) * n_out];
        for (r, &g) in row.iter_mut().zip(dy) {
            *r += xi * g;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let n = a.len().min(b.len());
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for i in chunks * 4..n {
        s0 += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3)
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn add_assign(y: &mut [f64], x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Layer norm forward. Writes the normalized vector into `xhat` and the
/// affine output into `out`; returns `1 / sigma`.
pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / crate::math::sqrt(var + LN_EPS);
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv;
        out[i] = gain[i] * xhat[i] + bias[i];
    }
    inv
}

/// Layer norm backward; accumulates parameter gradients and adds the input
/// gradient into `dx`.
pub(crate) fn layer_norm_back(dout: &[f64], xhat: &[f64], inv: f64, gain: &[f64], dgain: &mut [f64], dbias: &mut [f64], dx: &mut [f64]) {
    let n = dout.len() as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..dout.len() {
        dgain[i] += dout[i] * xhat[i];
        dbias[i] += dout[i];
        let dxh = dout[i] * gain[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for i in 0..dout.len() {
        let dxh = dout[i] * gain[i];
        dx[i] += inv * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}
