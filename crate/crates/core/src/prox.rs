//! MCP penalty and its proximal operators.
//!
//! For a threshold `θ ≥ 0` and concavity `η ≥ 0` with `2θη < 1` the scalar
//! operator is firm thresholding:
//!
//! ```text
//!          | 0                          |x| <= θ
//! p(x) =   | (x - θ sign x) / (1 - 2θη)  θ < |x| <= 1/(2η)
//!          | x                          |x| >  1/(2η)
//! ```
//!
//! At `2θη = 1` the middle interval is empty and `p` is hard thresholding at
//! `θ`. The row operator shrinks the Euclidean norm of a row with `p` and
//! keeps its direction.

use ndarray::{ArrayView1, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};
use crate::linalg::RMatrix;

/// `2θη` within this distance of 1 is treated as the hard-threshold limit.
pub const HARD_LIMIT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxParams {
    pub theta: f64,
    pub eta: f64,
}

impl ProxParams {
    pub fn new(theta: f64, eta: f64) -> Result<Self> {
        let p = Self { theta, eta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { theta, eta } = *self;
        if !(theta >= 0.0 && theta.is_finite()) {
            return domain_err(format!("theta must be finite and >= 0, got {theta}"));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return domain_err(format!("eta must be finite and >= 0, got {eta}"));
        }
        if 2.0 * theta * eta > 1.0 + HARD_LIMIT_TOL {
            return domain_err(format!("2*theta*eta = {} exceeds 1, minimum is ill-defined", 2.0 * theta * eta));
        }
        Ok(())
    }

    /// True when `2θη = 1` (up to [`HARD_LIMIT_TOL`]).
    pub fn is_hard_threshold(&self) -> bool {
        self.theta > 0.0 && (2.0 * self.theta * self.eta - 1.0).abs() <= HARD_LIMIT_TOL
    }

    /// Start of the identity region, `1/(2η)` (infinite for `η = 0`).
    fn knee(&self) -> f64 {
        if self.eta == 0.0 {
            f64::INFINITY
        } else {
            0.5 / self.eta
        }
    }

    /// Firm thresholding of a nonnegative or signed scalar. Assumes a validated `self`.
    #[inline]
    pub(crate) fn apply(&self, x: f64) -> f64 {
        let a = x.abs();
        if a <= self.theta {
            return 0.0;
        }
        if self.is_hard_threshold() {
            return x;
        }
        if a <= self.knee() {
            (x - self.theta * x.signum()) / (1.0 - 2.0 * self.theta * self.eta)
        } else {
            x
        }
    }
}

/// Partial derivatives of the scalar prox.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProxGrad {
    pub d_input: f64,
    pub d_theta: f64,
    pub d_eta: f64,
}

/// MCP penalty `g_η(z)`.
pub fn mcp_penalty(z: f64, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return domain_err(format!("MCP needs eta > 0, got {eta}"));
    }
    let a = z.abs();
    Ok(if a <= 0.5 / eta { a - eta * z * z } else { 0.25 / eta })
}

pub fn prox_scalar(x: f64, p: ProxParams) -> Result<f64> {
    p.validate()?;
    Ok(p.apply(x))
}

/// Multivariate prox of `θ g_η(‖u‖)`: shrinks the row norm, keeps the direction.
pub fn prox_row(row: ArrayView1<f64>, p: ProxParams) -> Result<ndarray::Array1<f64>> {
    p.validate()?;
    let mut out = row.to_owned();
    shrink_row(out.view_mut(), Shrink::Mcp(p));
    Ok(out)
}

/// Row-wise [`prox_row`].
pub fn prox_matrix(x: &RMatrix, p: ProxParams) -> Result<RMatrix> {
    p.validate()?;
    let mut out = x.clone();
    shrink_groups(&mut out, x.ncols(), Shrink::Mcp(p));
    Ok(out)
}

/// Multidimensional soft thresholding `max(0, ‖row‖ - θ) row / ‖row‖`.
pub fn group_soft_threshold(x: &RMatrix, theta: f64) -> Result<RMatrix> {
    if !(theta >= 0.0) {
        return domain_err(format!("threshold must be >= 0, got {theta}"));
    }
    let mut out = x.clone();
    shrink_groups(&mut out, x.ncols(), Shrink::Soft(theta));
    Ok(out)
}

/// Derivatives of the scalar prox with respect to the input, `θ` and `η`.
///
/// At `|x| = θ` the middle branch is used, at `|x| = 1/(2η)` the identity
/// branch.
pub fn prox_scalar_grad(x: f64, p: ProxParams) -> Result<ProxGrad> {
    p.validate()?;
    if 2.0 * p.theta * p.eta >= 1.0 - HARD_LIMIT_TOL {
        return domain_err("prox gradient is undefined at the hard-threshold limit");
    }
    Ok(mcp_branch_grad(x, p))
}

#[inline]
fn mcp_branch_grad(x: f64, p: ProxParams) -> ProxGrad {
    let a = x.abs();
    if a < p.theta {
        ProxGrad::default()
    } else if a < p.knee() {
        let s = x.signum();
        let denom = 1.0 - 2.0 * p.theta * p.eta;
        ProxGrad {
            d_input: 1.0 / denom,
            d_theta: (2.0 * p.eta * x - s) / (denom * denom),
            d_eta: 2.0 * p.theta * (x - p.theta * s) / (denom * denom),
        }
    } else {
        ProxGrad { d_input: 1.0, d_theta: 0.0, d_eta: 0.0 }
    }
}

/// Norm shrinkage rule applied to each row group.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Shrink {
    Mcp(ProxParams),
    Soft(f64),
    Identity,
}

impl Shrink {
    /// New norm for a group of norm `r >= 0`.
    #[inline]
    pub(crate) fn radial(&self, r: f64) -> f64 {
        match self {
            Shrink::Mcp(p) => p.apply(r),
            Shrink::Soft(theta) => (r - theta).max(0.0),
            Shrink::Identity => r,
        }
    }

    /// Radial derivative: `(p(r), dp/dr, dp/dθ, dp/dη)`.
    #[inline]
    pub(crate) fn radial_grad(&self, r: f64) -> (f64, ProxGrad) {
        match self {
            Shrink::Mcp(p) => (p.apply(r), mcp_branch_grad(r, *p)),
            Shrink::Soft(theta) => {
                if r < *theta {
                    (0.0, ProxGrad::default())
                } else {
                    (r - theta, ProxGrad { d_input: 1.0, d_theta: -1.0, d_eta: 0.0 })
                }
            }
            Shrink::Identity => (r, ProxGrad { d_input: 1.0, ..Default::default() }),
        }
    }
}

#[inline]
pub(crate) fn shrink_row(mut row: ArrayViewMut1<f64>, rule: Shrink) {
    let r = row.dot(&row).sqrt();
    if r == 0.0 {
        return;
    }
    let scale = rule.radial(r) / r;
    row.mapv_inplace(|v| v * scale);
}

/// Applies `rule` to every group of `width` consecutive entries of every row.
///
/// A single system uses `width = ncols`; a side-by-side stack of samples uses
/// `width = M` so each (row, sample) pair is shrunk independently.
pub(crate) fn shrink_groups(x: &mut RMatrix, width: usize, rule: Shrink) {
    debug_assert_eq!(x.ncols() % width, 0);
    for mut row in x.rows_mut() {
        let slice = row.as_slice_mut().expect("standard layout");
        for g in slice.chunks_mut(width) {
            let r = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r == 0.0 {
                continue;
            }
            let scale = rule.radial(r) / r;
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
}
