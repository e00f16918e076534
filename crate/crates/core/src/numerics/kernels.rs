//! Forward kernels and their vector-Jacobian products.
//!
//! Every differentiable operation on the tape is a pair here: a forward
//! function over [`Array2`] and a backward function mapping the upstream
//! gradient to input gradients.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::array::{dot, Array2, Axis};
use crate::error::{dim_err, Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// Attention masses below this (zero or subnormal) are treated as empty.
pub const MASS_EPS: f64 = f64::MIN_POSITIVE;

// ---- softmax ----

pub fn softmax(a: &Array2, axis: Axis) -> Array2 {
    match axis {
        Axis::Rows => softmax_rows(a),
        Axis::Cols => softmax_rows(&a.transpose()).transpose(),
    }
}

fn softmax_rows(a: &Array2) -> Array2 {
    let mut out = a.clone();
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn softmax_backward(out: &Array2, grad: &Array2, axis: Axis) -> Array2 {
    match axis {
        Axis::Rows => softmax_rows_backward(out, grad),
        Axis::Cols => softmax_rows_backward(&out.transpose(), &grad.transpose()).transpose(),
    }
}

fn softmax_rows_backward(s: &Array2, g: &Array2) -> Array2 {
    let mut dx = Array2::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let (sr, gr) = (s.row(r), g.row(r));
        let inner = dot(sr, gr);
        for ((d, &si), &gi) in dx.row_mut(r).iter_mut().zip(sr).zip(gr) {
            *d = si * (gi - inner);
        }
    }
    dx
}

// ---- activation ----

/// GELU, exact erf form: `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn gelu_backward(input: &Array2, grad: &Array2) -> Array2 {
    let mut dx = grad.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        *d *= gelu_derivative(x);
    }
    dx
}

// ---- row normalization ----

pub fn l2_normalize_rows(a: &Array2) -> Result<Array2> {
    let mut out = a.clone();
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        let norm = dot(row, row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Degenerate(format!(
                "row {r} has norm {norm}, cannot normalize"
            )));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

pub fn l2_normalize_rows_backward(input: &Array2, out: &Array2, grad: &Array2) -> Array2 {
    let mut dx = Array2::zeros(input.rows(), input.cols());
    for r in 0..input.rows() {
        let x = input.row(r);
        let norm = dot(x, x).sqrt();
        let (y, g) = (out.row(r), grad.row(r));
        let inner = dot(g, y);
        for ((d, &gi), &yi) in dx.row_mut(r).iter_mut().zip(g).zip(y) {
            *d = (gi - yi * inner) / norm;
        }
    }
    dx
}

// ---- column mass normalization ----

/// Divides each column by its sum: turns per-pixel attention into
/// per-token averaging weights. A column whose mass underflowed gets
/// uniform weights, so the result is always a convex weighting.
pub fn normalize_column_mass(a: &Array2) -> Array2 {
    let masses = column_masses(a);
    let uniform = 1.0 / a.rows() as f64;
    let mut out = a.clone();
    for r in 0..a.rows() {
        for (v, m) in out.row_mut(r).iter_mut().zip(&masses) {
            *v = if *m < MASS_EPS { uniform } else { *v / m };
        }
    }
    out
}

fn column_masses(a: &Array2) -> Vec<f64> {
    let mut masses = vec![0.0; a.cols()];
    for r in 0..a.rows() {
        for (m, v) in masses.iter_mut().zip(a.row(r)) {
            *m += v;
        }
    }
    masses
}

pub fn normalize_column_mass_backward(input: &Array2, out: &Array2, grad: &Array2) -> Array2 {
    let masses = column_masses(input);
    let mut inner = vec![0.0; input.cols()];
    for r in 0..input.rows() {
        for ((acc, g), b) in inner.iter_mut().zip(grad.row(r)).zip(out.row(r)) {
            *acc += g * b;
        }
    }
    let mut dx = Array2::zeros(input.rows(), input.cols());
    for r in 0..input.rows() {
        let g = grad.row(r);
        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
            // the uniform fallback does not depend on the input
            *d = if masses[c] < MASS_EPS { 0.0 } else { (g[c] - inner[c]) / masses[c] };
        }
    }
    dx
}

// ---- cross-entropy ----

/// Mean over rows of `−Σ_k y_k · ln max(p_k, ε)`.
pub fn cross_entropy(p: &Array2, y: &Array2) -> Result<f64> {
    if p.shape() != y.shape() {
        return Err(dim_err(
            "cross_entropy",
            format!("p {:?} vs y {:?}", p.shape(), y.shape()),
        ));
    }
    if p.rows() == 0 {
        return Err(Error::Degenerate("cross-entropy over zero rows".into()));
    }
    let mut total = 0.0;
    for (&pv, &yv) in p.data().iter().zip(y.data()) {
        if yv != 0.0 {
            total -= yv * pv.max(LOG_EPS).ln();
        }
    }
    Ok(total / p.rows() as f64)
}

pub fn cross_entropy_backward(p: &Array2, y: &Array2, upstream: f64) -> Array2 {
    let n = p.rows() as f64;
    let mut dp = Array2::zeros(p.rows(), p.cols());
    for ((d, &pv), &yv) in dp.data_mut().iter_mut().zip(p.data()).zip(y.data()) {
        if yv != 0.0 && pv > LOG_EPS {
            *d = -upstream * yv / (pv * n);
        }
    }
    dp
}

// ---- 3×3 same-padded patch extraction ----

/// Rearranges an `HW × C` map into `HW × 9C` neighborhoods, zero-padded at
/// the border. Block `k = (dy+1)*3 + (dx+1)` holds the neighbor at offset
/// `(dy, dx)`.
pub fn im2col3x3(x: &Array2, height: usize, width: usize) -> Result<Array2> {
    if x.rows() != height * width {
        return Err(dim_err(
            "im2col3x3",
            format!("{} rows for a {height}x{width} grid", x.rows()),
        ));
    }
    let c = x.cols();
    let mut out = Array2::zeros(height * width, 9 * c);
    for h in 0..height {
        for w in 0..width {
            let dst = out.row_mut(h * width + w);
            for (k, (dy, dx)) in offsets3x3().enumerate() {
                let (nh, nw) = (h as isize + dy, w as isize + dx);
                if nh < 0 || nw < 0 || nh >= height as isize || nw >= width as isize {
                    continue;
                }
                let src = x.row(nh as usize * width + nw as usize);
                dst[k * c..(k + 1) * c].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

pub fn im2col3x3_backward(grad: &Array2, height: usize, width: usize, channels: usize) -> Array2 {
    let c = channels;
    let mut dx = Array2::zeros(height * width, c);
    for h in 0..height {
        for w in 0..width {
            let g = grad.row(h * width + w);
            for (k, (dy, ddx)) in offsets3x3().enumerate() {
                let (nh, nw) = (h as isize + dy, w as isize + ddx);
                if nh < 0 || nw < 0 || nh >= height as isize || nw >= width as isize {
                    continue;
                }
                let dst = dx.row_mut(nh as usize * width + nw as usize);
                for (d, v) in dst.iter_mut().zip(&g[k * c..(k + 1) * c]) {
                    *d += v;
                }
            }
        }
    }
    dx
}

fn offsets3x3() -> impl Iterator<Item = (isize, isize)> {
    (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_columns_sum_to_one() {
        let a = Array2::from_rows(&[[1.0, -2.0], [0.5, 3.0], [0.0, 0.0]]).unwrap();
        let s = softmax(&a, Axis::Cols);
        for c in 0..2 {
            let total: f64 = (0..3).map(|r| s.get(r, c)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn column_mass_normalization_makes_columns_stochastic() {
        let a = Array2::from_rows(&[[0.2, 0.9], [0.8, 0.1], [0.5, 0.5]]).unwrap();
        let b = normalize_column_mass(&a);
        for c in 0..2 {
            let total: f64 = (0..3).map(|r| b.get(r, c)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn column_mass_handles_underflow() {
        let a = Array2::from_rows(&[[1e-300, 0.0], [3e-300, 0.0]]).unwrap();
        let b = normalize_column_mass(&a);
        assert_eq!(b.data(), &[0.25, 0.5, 0.75, 0.5]);
        let g = Array2::from_rows(&[[1.0, 1.0], [2.0, 2.0]]).unwrap();
        let dx = normalize_column_mass_backward(&a, &b, &g);
        assert_eq!((dx.get(0, 1), dx.get(1, 1)), (0.0, 0.0));
        assert!(dx.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn im2col_center_block_is_identity() {
        let x = Array2::from_vec(4, 2, (0..8).map(f64::from).collect()).unwrap();
        let cols = im2col3x3(&x, 2, 2).unwrap();
        for p in 0..4 {
            assert_eq!(&cols.row(p)[8..10], x.row(p));
        }
        // top-left pixel has no upper-left neighbor
        assert_eq!(&cols.row(0)[0..2], &[0.0, 0.0]);
        // its lower-right neighbor is pixel 3
        assert_eq!(&cols.row(0)[16..18], x.row(3));
    }

    #[test]
    fn zero_row_normalization_is_degenerate() {
        let a = Array2::zeros(1, 3);
        assert!(matches!(l2_normalize_rows(&a), Err(Error::Degenerate(_))));
    }
}
