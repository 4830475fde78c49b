//! The model's formula layer: regularized energies, flux kernels, reaction
//! coefficients and the Gaussian non-local weight window.
//!
//! The regularized energy density is
//!   phi_{eps,p}(s) = (2/p)(s^2 + eps^2)^{p/2} - (2/p) eps^p
//! and its flux kernel
//!   k_{eps,p}(s) = (1/2) phi' = s (s^2 + eps^2)^{(p-2)/2},
//! finite for every s because eps > 0, covering the non-convex range 0 < p < 1.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Dims, GridField};

/// All model and scheme parameters.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FlowParams {
    /// Diffusion exponent; 0 < p <= 1 is the non-convex regime of interest.
    pub p: f64,
    /// Flux regularization; keeps (s^2+eps^2)^{(p-2)/2} finite at s = 0.
    pub epsilon: f64,
    /// Weight of the non-local diffusion term.
    pub alpha: f64,
    /// Fidelity weight.
    pub lambda: f64,
    /// Saliency slope; 1/delta is the class threshold.
    pub delta: f64,
    /// Time step.
    pub tau: f64,
    /// Outer time steps.
    pub n_steps: usize,
    /// Kernel radius in pixels; the window is the Euclidean ball |d| < 2*rho.
    pub rho: f64,
    /// Quantization levels for the kernel-based scheme.
    pub q_levels: usize,
    /// Initial penalty parameter of the r-schedule.
    pub r0: f64,
    /// Inner iterations of the r-loop.
    pub inner_iters: usize,
    /// Stopping tolerance (sup-norm of iterate differences).
    pub tol: f64,
}

impl FlowParams {
    /// Reaction coefficient a = delta^2/alpha - lambda.
    pub fn a(&self) -> f64 {
        self.delta * self.delta / self.alpha - self.lambda
    }

    /// Check every parameter inequality; error messages name the violated one.
    pub fn validate(&self) -> Result<()> {
        fn demand(ok: bool, ineq: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Parameter(ineq.to_string()))
            }
        }
        demand(self.p > 0.0, "p > 0")?;
        demand(self.epsilon > 0.0, "epsilon > 0")?;
        demand(self.alpha > 0.0, "alpha > 0")?;
        demand(self.lambda >= 0.0, "lambda >= 0")?;
        demand(self.delta > 0.0, "delta > 0")?;
        demand(self.tau > 0.0, "tau > 0")?;
        demand(self.rho > 0.0, "rho > 0")?;
        demand(self.q_levels >= 2, "Q >= 2")?;
        demand(self.r0 > 0.0, "r0 > 0")?;
        demand(self.inner_iters >= 1, "J >= 1")?;
        demand(self.tol > 0.0, "tol > 0")?;
        demand(self.a() > 0.0, "delta^2/alpha - lambda > 0")?;
        demand(self.tau * self.a() < 1.0, "tau * a < 1")?;
        Ok(())
    }
}

/// Shape of the truncated weight support.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum WindowShape {
    /// Euclidean ball |d| < 2*rho (default).
    Ball,
    /// Full box [-R, R]^dim with R = ceil(2*rho) - 1.
    Box,
}

/// Precomputed Gaussian non-local weights on an integer offset window,
/// normalized to sum 1; w(d) = w(-d) and w(0) > 0 for the Gaussian builder.
#[derive(Clone, Debug)]
pub struct WeightKernel {
    dimension: u8,
    radius: i64,
    offsets: Vec<[i64; 3]>,
    weights: Vec<f64>,
}

impl WeightKernel {
    /// Build from explicit offsets/weights (test and custom kernels).
    /// Validates normalization and radial symmetry.
    pub fn from_parts(dimension: u8, offsets: Vec<[i64; 3]>, weights: Vec<f64>) -> Result<Self> {
        if offsets.len() != weights.len() || offsets.is_empty() {
            return Err(Error::Parameter(
                "offsets and weights must be non-empty and equal length".into(),
            ));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::Parameter("w(d) > 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter("sum of weights = 1".into()));
        }
        for (d, &w) in offsets.iter().zip(&weights) {
            let neg = [-d[0], -d[1], -d[2]];
            let Some(pos) = offsets.iter().position(|&o| o == neg) else {
                return Err(Error::Parameter("w(d) = w(-d)".into()));
            };
            if weights[pos] != w {
                return Err(Error::Parameter("w(d) = w(-d)".into()));
            }
        }
        let radius = offsets
            .iter()
            .flat_map(|d| d.iter().map(|c| c.abs()))
            .max()
            .unwrap_or(0);
        Ok(WeightKernel {
            dimension,
            radius,
            offsets,
            weights,
        })
    }

    pub fn dimension(&self) -> u8 {
        self.dimension
    }

    /// Largest per-axis offset magnitude in the window.
    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn offsets(&self) -> &[[i64; 3]] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn weight_at_origin(&self) -> f64 {
        self.offsets
            .iter()
            .position(|&d| d == [0, 0, 0])
            .map_or(0.0, |i| self.weights[i])
    }
}

/// Gaussian window w(d) ∝ exp(-|d|^2 / rho^2) on the Euclidean ball |d| < 2*rho,
/// normalized to sum 1.
pub fn gaussian_weights(rho: f64, dimension: u8) -> Result<WeightKernel> {
    gaussian_weights_with(rho, dimension, WindowShape::Ball)
}

/// Gaussian window with an explicit support shape.
pub fn gaussian_weights_with(rho: f64, dimension: u8, shape: WindowShape) -> Result<WeightKernel> {
    if rho <= 0.0 {
        return Err(Error::Parameter("rho > 0".into()));
    }
    if dimension != 2 && dimension != 3 {
        return Err(Error::Parameter("dimension must be 2 or 3".into()));
    }
    let reach = 2.0 * rho;
    // Largest integer strictly below 2*rho along an axis.
    let r = (reach.ceil() as i64 - 1).max(0);
    let cutoff_sq = reach * reach;
    let s_range: Vec<i64> = if dimension == 3 {
        (-r..=r).collect()
    } else {
        vec![0]
    };
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            for &ds in &s_range {
                let d2 = (di * di + dj * dj + ds * ds) as f64;
                let keep = match shape {
                    WindowShape::Ball => d2 < cutoff_sq,
                    WindowShape::Box => true,
                };
                if keep {
                    offsets.push([di, dj, ds]);
                    weights.push((-d2 / (rho * rho)).exp());
                }
            }
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let radius = offsets
        .iter()
        .flat_map(|d| d.iter().map(|c| c.abs()))
        .max()
        .unwrap_or(0);
    Ok(WeightKernel {
        dimension,
        radius,
        offsets,
        weights,
    })
}

/// Reaction coefficients a = delta^2/alpha - lambda and b(x) = delta/alpha - lambda f(x).
#[derive(Clone, Debug)]
pub struct ReactionField {
    pub a: f64,
    pub b: GridField,
    b_min: f64,
}

impl ReactionField {
    /// Smallest b value; negative b violates the scheme's sign assumption
    /// and callers surface a warning.
    pub fn b_min(&self) -> f64 {
        self.b_min
    }

    pub fn b_nonnegative(&self) -> bool {
        self.b_min >= 0.0
    }

    /// Reaction field with forced coefficients (pure-diffusion experiments).
    pub fn forced(dims: Dims, a: f64, b: f64) -> Self {
        ReactionField {
            a,
            b: GridField::constant(dims, b),
            b_min: b,
        }
    }
}

/// Regularized energy density phi_{eps,p}(s).
#[inline]
pub fn phi(s: f64, eps: f64, p: f64) -> f64 {
    (2.0 / p) * ((s * s + eps * eps).powf(p / 2.0) - eps.powf(p))
}

/// Flux kernel k_{eps,p}(s) = s (s^2 + eps^2)^{(p-2)/2} = phi'/2.
#[inline]
pub fn flux(s: f64, eps: f64, p: f64) -> f64 {
    s * (s * s + eps * eps).powf((p - 2.0) / 2.0)
}

/// Semi-implicit flux: modulus part at `s` (previous time level), linear
/// part at `sigma` (current unknown).
#[inline]
pub fn flux_semi(s: f64, sigma: f64, eps: f64, p: f64) -> f64 {
    sigma * (s * s + eps * eps).powf((p - 2.0) / 2.0)
}

/// Modulus coefficient (s^2 + eps^2)^{(p-2)/2} shared by the semi-implicit solver.
#[inline]
pub(crate) fn flux_modulus(s: f64, eps: f64, p: f64) -> f64 {
    (s * s + eps * eps).powf((p - 2.0) / 2.0)
}

/// Build the reaction coefficients for an input f.
pub fn reaction_coefficients(params: &FlowParams, f: &GridField) -> Result<ReactionField> {
    let a = params.a();
    if a <= 0.0 {
        return Err(Error::Parameter("delta^2/alpha - lambda > 0".into()));
    }
    let base = params.delta / params.alpha;
    let data: Vec<f64> = f
        .values()
        .iter()
        .map(|&v| base - params.lambda * v)
        .collect();
    let b_min = data.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ReactionField {
        a,
        b: GridField::new(f.dims(), data)?,
        b_min,
    })
}

/// Concave saliency energy H(u) = sum_k -1/2 (1 - delta u_k)^2.
pub fn saliency_energy(u: &GridField, delta: f64) -> f64 {
    u.values()
        .iter()
        .map(|&v| {
            let t = 1.0 - delta * v;
            -0.5 * t * t
        })
        .sum()
}

/// Non-local regularized energy
/// J(u) = 1/4 sum_k sum_{m in window(k)} w[k,m] phi_{eps,p}(u[m] - u[k]),
/// with windows truncated at the boundary (out-of-domain neighbors dropped).
pub fn nonlocal_energy(u: &GridField, w: &WeightKernel, eps: f64, p: f64) -> f64 {
    let dims = u.dims();
    let (l, m, s_len) = (dims.l() as i64, dims.m() as i64, dims.s_len() as i64);
    let vals = u.values();
    let mut total = 0.0;
    for i in 0..l {
        for j in 0..m {
            for s in 0..s_len {
                let k = dims.index(i as usize, j as usize, s as usize);
                let uk = vals[k];
                let mut acc = 0.0;
                for (d, &wt) in w.offsets().iter().zip(w.weights()) {
                    let (ni, nj, ns) = (i + d[0], j + d[1], s + d[2]);
                    if ni < 0 || ni >= l || nj < 0 || nj >= m || ns < 0 || ns >= s_len {
                        continue;
                    }
                    let um = vals[dims.index(ni as usize, nj as usize, ns as usize)];
                    acc += wt * phi(um - uk, eps, p);
                }
                total += acc;
            }
        }
    }
    0.25 * total
}
