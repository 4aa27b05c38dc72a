//! Fixed-order f64 kernels.
//!
//! `dot` accumulates in eight independent lanes combined in a fixed tree so
//! results are bit-stable run to run while still vectorizing on one core.

/// Dot product with a fixed summation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] = xa[k].mul_add(xb[k], acc[k]);
        }
    }
    let mut tail = 0.0;
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        tail = xa.mul_add(*xb, tail);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`, element-wise.
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi.mul_add(alpha, *yi);
    }
}

/// `v *= alpha`, element-wise.
pub fn scale(v: &mut [f64], alpha: f64) {
    for vi in v.iter_mut() {
        *vi *= alpha;
    }
}

pub fn l2_norm_sq(v: &[f64]) -> f64 {
    dot(v, v)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    l2_norm_sq(v).sqrt()
}
