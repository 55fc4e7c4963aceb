//! Dense loops behind the graph primitives. All slices are row-major.

use super::Real;

/// `out[n×m] += a[n×k] · b[k×m]`
pub(super) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + s * bv;
            }
        }
    }
}

/// `out[n×k] += g[n×m] · b[k×m]ᵀ`
pub(super) fn matmul_bt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * k + p] = out[i * k + p] + s;
        }
    }
}

/// `out[k×m] += a[n×k]ᵀ · g[n×m]`
pub(super) fn matmul_at_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + s * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(super) fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(super) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Row-wise softmax with max subtraction.
pub(super) fn softmax_rows<T: Real>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
pub(super) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
