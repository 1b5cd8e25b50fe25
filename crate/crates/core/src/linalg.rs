//! Dense matrix types, the complex-to-real lifting and row-group norms.
//!
//! Every matrix is a row-major `ndarray` array of `f64` (or `Complex64`).
//! A complex model `Y = S X + Z` with `S` of size `L x N` is lifted to the
//! real model `Ỹ = S̃ X̃ + Z̃` where
//!
//! ```text
//! S̃ = [[Re S, -Im S],
//!      [Im S,  Re S]]      (2L x 2N)
//! X̃ = [Re X; Im X]         (2N x M)
//! ```

use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Real matrix, row-major.
pub type RMatrix = Array2<f64>;
/// Complex matrix, row-major.
pub type CMatrix = Array2<Complex64>;

/// Default tolerance for [`row_support`].
pub const SUPPORT_TOL: f64 = 1e-10;

/// Complex model dimensions: pilot length `L`, devices `N`, antennas `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub l: usize,
    pub n: usize,
    pub m: usize,
}

/// One lifted scene: dictionary, observation, ground truth and noise energy.
#[derive(Debug, Clone)]
pub struct RealizedSystem {
    /// `2L x 2N`, shared between all scenes of a dataset.
    pub s_tilde: Arc<RMatrix>,
    /// `2L x M`
    pub y_tilde: RMatrix,
    /// `2N x M`
    pub x_star_tilde: RMatrix,
    /// `‖Z̃‖_F`
    pub noise_frobenius: f64,
    pub dims: Dims,
}

impl RealizedSystem {
    /// Builds a system and checks that all shapes agree.
    pub fn new(
        s_tilde: Arc<RMatrix>,
        y_tilde: RMatrix,
        x_star_tilde: RMatrix,
        noise_frobenius: f64,
    ) -> Result<Self> {
        let (two_l, two_n) = s_tilde.dim();
        if two_l % 2 != 0 || two_n % 2 != 0 {
            return shape_err(format!("lifted dictionary must have even dims, got {two_l}x{two_n}"));
        }
        let m = y_tilde.ncols();
        if y_tilde.nrows() != two_l || x_star_tilde.dim() != (two_n, m) {
            return shape_err(format!(
                "inconsistent system: S̃ {two_l}x{two_n}, Ỹ {:?}, X̃* {:?}",
                y_tilde.dim(),
                x_star_tilde.dim()
            ));
        }
        if !(noise_frobenius >= 0.0) {
            return Err(Error::Domain(format!("noise level must be >= 0, got {noise_frobenius}")));
        }
        Ok(Self {
            dims: Dims { l: two_l / 2, n: two_n / 2, m },
            s_tilde,
            y_tilde,
            x_star_tilde,
            noise_frobenius,
        })
    }

    /// Builds a system from a ground truth and a lifted noise matrix, `Ỹ = S̃X̃* + Z̃`.
    pub fn from_truth(s_tilde: Arc<RMatrix>, x_star_tilde: RMatrix, z_tilde: &RMatrix) -> Result<Self> {
        if z_tilde.dim() != (s_tilde.nrows(), x_star_tilde.ncols()) {
            return shape_err("noise shape does not match the observation");
        }
        let y = s_tilde.dot(&x_star_tilde) + z_tilde;
        let eps = frobenius(z_tilde);
        Self::new(s_tilde, y, x_star_tilde, eps)
    }

    /// `2N`, the number of lifted rows of the signal.
    pub fn signal_rows(&self) -> usize {
        self.s_tilde.ncols()
    }
}

/// `[[Re S, -Im S], [Im S, Re S]]`.
pub fn lift_dictionary(s: &CMatrix) -> RMatrix {
    let (l, n) = s.dim();
    let mut out = RMatrix::zeros((2 * l, 2 * n));
    for ((i, j), z) in s.indexed_iter() {
        out[[i, j]] = z.re;
        out[[i, j + n]] = -z.im;
        out[[i + l, j]] = z.im;
        out[[i + l, j + n]] = z.re;
    }
    out
}

/// `[Re X; Im X]`.
pub fn lift_signal(x: &CMatrix) -> RMatrix {
    let re = x.mapv(|z| z.re);
    let im = x.mapv(|z| z.im);
    concatenate(Axis(0), &[re.view(), im.view()]).expect("same column count")
}

/// Inverse of [`lift_signal`].
pub fn unlift_signal(x_tilde: &RMatrix) -> Result<CMatrix> {
    let rows = x_tilde.nrows();
    if rows % 2 != 0 {
        return shape_err(format!("lifted signal needs an even row count, got {rows}"));
    }
    let n = rows / 2;
    let re = x_tilde.slice(s![..n, ..]);
    let im = x_tilde.slice(s![n.., ..]);
    let mut out = CMatrix::zeros((n, x_tilde.ncols()));
    ndarray::Zip::from(&mut out)
        .and(&re)
        .and(&im)
        .for_each(|o, &r, &i| *o = Complex64::new(r, i));
    Ok(out)
}

/// Euclidean norm of every row, `ψ(X)`.
pub fn row_group_norms(x: &RMatrix) -> Array1<f64> {
    x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// `‖X‖_{2,1}`, the sum of row norms.
pub fn norm_2_1(x: &RMatrix) -> f64 {
    row_group_norms(x).sum()
}

/// Row indices whose norm exceeds `tol`.
pub fn row_support(x: &RMatrix, tol: f64) -> Vec<usize> {
    row_group_norms(x)
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > tol)
        .map(|(i, _)| i)
        .collect()
}

pub fn frobenius_sq(x: &RMatrix) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn frobenius(x: &RMatrix) -> f64 {
    frobenius_sq(x).sqrt()
}

pub fn inner(a: &RMatrix, b: &RMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub(crate) fn spd_inverse(a: ArrayView2<f64>) -> Result<RMatrix> {
    let n = a.nrows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Solver("matrix is not positive definite".into()))?;
    let inv = chol.inverse();
    Ok(RMatrix::from_shape_fn((n, n), |(i, j)| inv[(i, j)]))
}

/// Largest relative asymmetry `max |a_ij - a_ji| / max |a_ij|`.
pub(crate) fn asymmetry(a: &RMatrix) -> f64 {
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst / scale
}

/// Places sample matrices side by side: `[X_1 | X_2 | ...]`.
pub(crate) fn hstack<'a>(mats: impl IntoIterator<Item = &'a RMatrix>) -> RMatrix {
    let views: Vec<_> = mats.into_iter().map(|m| m.view()).collect();
    concatenate(Axis(1), &views).expect("equal row counts")
}

/// Splits a side-by-side stack back into blocks of `width` columns.
pub(crate) fn hsplit(x: &RMatrix, width: usize) -> Vec<RMatrix> {
    (0..x.ncols() / width)
        .map(|b| x.slice(s![.., b * width..(b + 1) * width]).to_owned())
        .collect()
}
