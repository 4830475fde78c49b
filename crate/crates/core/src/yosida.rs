//! Semi-implicit scheme with Yosida penalty terms: an outer time loop, an
//! inner r-loop with characteristic sets frozen from the previous inner
//! iterate, and one symmetric positive definite linear solve per inner
//! iteration (matrix-free preconditioned conjugate gradients).
//!
//! Per inner iteration the unknown u solves, at every pixel k,
//!
//!   (1 - tau*a) u[k]
//!     - tau*alpha * sum_m w[k,m] (u[m]-u[k]) ((u_n[m]-u_n[k])^2+eps^2)^{(p-2)/2}
//!     + (tau/r_j) (u[k] chi0[k] + (u[k]-1) chi1[k])
//!   = u_n[k] - tau*b[k],
//!
//! where the modulus factor uses the previous TIME step u_n and the chi sets
//! use the previous INNER iterate.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Dims, GridField};
use crate::kernels::{flux_modulus, gaussian_weights, reaction_coefficients, FlowParams, ReactionField, WeightKernel};
use crate::{RunOptions, RunTrace};

/// Yosida approximant of the lower obstacle graph: u/r for u <= 0, else 0.
pub fn yosida_beta(u: f64, r: f64) -> Result<f64> {
    if r <= 0.0 {
        return Err(Error::Parameter("r > 0".into()));
    }
    Ok(if u <= 0.0 { u / r } else { 0.0 })
}

/// Yosida approximant of the upper obstacle graph: u/r for u >= 0, else 0.
pub fn yosida_gamma(u: f64, r: f64) -> Result<f64> {
    if r <= 0.0 {
        return Err(Error::Parameter("r > 0".into()));
    }
    Ok(if u >= 0.0 { u / r } else { 0.0 })
}

/// Characteristic sets of the active penalty regions for one inner iterate.
#[derive(Clone, Debug)]
pub struct PenaltyState {
    /// 1 where u <= 0 (lower obstacle active).
    pub chi0: Vec<u8>,
    /// 1 where u >= 1 (upper obstacle active).
    pub chi1: Vec<u8>,
    /// Current penalty parameter.
    pub r: f64,
}

impl PenaltyState {
    pub fn from_field(u: &GridField, r: f64) -> Self {
        let chi0: Vec<u8> = u.values().iter().map(|&v| u8::from(v <= 0.0)).collect();
        let chi1: Vec<u8> = u.values().iter().map(|&v| u8::from(v >= 1.0)).collect();
        debug_assert!(
            chi0.iter().zip(&chi1).all(|(&a, &b)| a & b == 0),
            "both obstacles active at one pixel"
        );
        PenaltyState { chi0, chi1, r }
    }
}

/// Constraint-violation norms of a field.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct Violation {
    /// sum_k (|u^-|^2 + |(u-1)^+|^2)
    pub l2_sq: f64,
    /// max u^-
    pub sup_neg: f64,
    /// max (u-1)^+
    pub sup_over: f64,
}

pub fn violation(u: &GridField) -> Violation {
    let mut v = Violation::default();
    for &x in u.values() {
        let neg = (-x).max(0.0);
        let over = (x - 1.0).max(0.0);
        v.l2_sq += neg * neg + over * over;
        v.sup_neg = v.sup_neg.max(neg);
        v.sup_over = v.sup_over.max(over);
    }
    v
}

/// Penalty parameter schedule of the inner loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum RSchedule {
    /// r_j = 2^{-j} r0 (default).
    Halving,
    /// r_{j+1} = 2^{-j} r_j, i.e. r_j = 2^{-j(j+1)/2} r0.
    SuperGeometric,
    /// Constant r; used by the stability experiments.
    Fixed(f64),
}

impl RSchedule {
    pub fn r_value(&self, j: usize, r0: f64) -> f64 {
        match *self {
            RSchedule::Halving => r0 * 2f64.powi(-(j as i32)),
            RSchedule::SuperGeometric => r0 * 2f64.powi(-((j * (j + 1) / 2) as i32)),
            RSchedule::Fixed(r) => r,
        }
    }
}

/// Which criterion ends the inner loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum InnerStop {
    /// Exactly J solves (the fixed-count practice; default).
    FixedCount,
    /// Stop once ||u_{j+1} - u_j||_inf < tol, capped at `max_iters` solves.
    Tolerance { max_iters: usize },
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct YosidaOptions {
    pub schedule: RSchedule,
    pub stop: InnerStop,
    pub run: RunOptions,
}

impl Default for YosidaOptions {
    fn default() -> Self {
        YosidaOptions {
            schedule: RSchedule::Halving,
            stop: InnerStop::FixedCount,
            run: RunOptions::default(),
        }
    }
}

/// Iterative-solver outcome for one linear solve.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct CgStats {
    pub iterations: usize,
    pub residual: f64,
}

/// One inner iteration's diagnostics.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct InnerIterStats {
    pub r: f64,
    pub sup_diff: f64,
    pub cg: CgStats,
    pub violation_l2_sq: f64,
}

/// One outer time step's diagnostics.
#[derive(Clone, Debug, Default, Serialize)]
pub struct OuterStepStats {
    pub inner: Vec<InnerIterStats>,
    pub violation: Violation,
    pub sup_diff: f64,
}

/// Full-run diagnostics.
#[derive(Clone, Debug, Default, Serialize)]
pub struct YosidaTrace {
    pub outer: Vec<OuterStepStats>,
    pub run: RunTrace,
}

/// Frozen per-pair diffusion coefficients w[k,m] * modulus(u_n[m]-u_n[k]) for
/// one outer step. Falls back to on-the-fly evaluation above a memory cap.
struct DiffusionCoeffs<'a> {
    w: &'a WeightKernel,
    eps: f64,
    p: f64,
    cached: Option<Vec<f64>>,
    row_sum: Vec<f64>,
    u_n: Vec<f64>,
}

const COEFF_CACHE_CAP: usize = 40_000_000;

impl<'a> DiffusionCoeffs<'a> {
    fn new(u_n: &GridField, w: &'a WeightKernel, eps: f64, p: f64) -> Self {
        let dims = u_n.dims();
        let n = dims.len();
        let noff = w.len();
        let vals = u_n.values();
        let mut row_sum = vec![0.0; n];
        let cached = if n * noff <= COEFF_CACHE_CAP {
            let mut c = vec![0.0; n * noff];
            let (li, mi, si) = (dims.l() as i64, dims.m() as i64, dims.s_len() as i64);
            c.par_chunks_mut((mi * si) as usize * noff)
                .zip(row_sum.par_chunks_mut((mi * si) as usize))
                .enumerate()
                .for_each(|(i, (rows, sums))| {
                    let i = i as i64;
                    for j in 0..mi {
                        for s in 0..si {
                            let k_local = (j * si + s) as usize;
                            let k = dims.index(i as usize, j as usize, s as usize);
                            let uk = vals[k];
                            let base = k_local * noff;
                            let mut sum = 0.0;
                            for (oi, (d, &wt)) in
                                w.offsets().iter().zip(w.weights()).enumerate()
                            {
                                let (ni, nj, ns) = (i + d[0], j + d[1], s + d[2]);
                                if ni < 0 || ni >= li || nj < 0 || nj >= mi || ns < 0 || ns >= si
                                {
                                    continue;
                                }
                                let um =
                                    vals[dims.index(ni as usize, nj as usize, ns as usize)];
                                let c_km = wt * flux_modulus(um - uk, eps, p);
                                rows[base + oi] = c_km;
                                sum += c_km;
                            }
                            sums[k_local] = sum;
                        }
                    }
                });
            Some(c)
        } else {
            // Too large to cache; row sums are still needed for the
            // preconditioner.
            let (li, mi, si) = (dims.l() as i64, dims.m() as i64, dims.s_len() as i64);
            row_sum
                .par_chunks_mut((mi * si) as usize)
                .enumerate()
                .for_each(|(i, sums)| {
                    let i = i as i64;
                    for j in 0..mi {
                        for s in 0..si {
                            let k = dims.index(i as usize, j as usize, s as usize);
                            let uk = vals[k];
                            let mut sum = 0.0;
                            for (d, &wt) in w.offsets().iter().zip(w.weights()) {
                                let (ni, nj, ns) = (i + d[0], j + d[1], s + d[2]);
                                if ni < 0 || ni >= li || nj < 0 || nj >= mi || ns < 0 || ns >= si
                                {
                                    continue;
                                }
                                let um =
                                    vals[dims.index(ni as usize, nj as usize, ns as usize)];
                                sum += wt * flux_modulus(um - uk, eps, p);
                            }
                            sums[(j * si + s) as usize] = sum;
                        }
                    }
                });
            None
        };
        DiffusionCoeffs {
            w,
            eps,
            p,
            cached,
            row_sum,
            u_n: vals.to_vec(),
        }
    }

    /// out[k] = sum_m c[k,m] (x[k] - x[m]); the weighted graph Laplacian.
    fn apply_laplacian(&self, dims: Dims, x: &[f64], out: &mut [f64]) {
        let (li, mi, si) = (dims.l() as i64, dims.m() as i64, dims.s_len() as i64);
        let noff = self.w.len();
        let row_len = (mi * si) as usize;
        out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| {
            let i = i as i64;
            for j in 0..mi {
                for s in 0..si {
                    let k_local = (j * si + s) as usize;
                    let k = dims.index(i as usize, j as usize, s as usize);
                    let xk = x[k];
                    let mut acc = 0.0;
                    match &self.cached {
                        Some(c) => {
                            let base = k * noff;
                            for (oi, d) in self.w.offsets().iter().enumerate() {
                                let c_km = c[base + oi];
                                if c_km == 0.0 {
                                    continue;
                                }
                                let (ni, nj, ns) = (i + d[0], j + d[1], s + d[2]);
                                let m = dims.index(ni as usize, nj as usize, ns as usize);
                                acc += c_km * (xk - x[m]);
                            }
                        }
                        None => {
                            let uk = self.u_n[k];
                            for (d, &wt) in self.w.offsets().iter().zip(self.w.weights()) {
                                let (ni, nj, ns) = (i + d[0], j + d[1], s + d[2]);
                                if ni < 0 || ni >= li || nj < 0 || nj >= mi || ns < 0 || ns >= si
                                {
                                    continue;
                                }
                                let m = dims.index(ni as usize, nj as usize, ns as usize);
                                let c_km = wt * flux_modulus(self.u_n[m] - uk, self.eps, self.p);
                                acc += c_km * (xk - x[m]);
                            }
                        }
                    }
                    row[k_local] = acc;
                }
            }
        });
    }
}

/// The full operator A x = (1-tau*a) x + tau*alpha*L x + pen .* x, with
/// pen[k] = (tau/r)(chi0[k] + chi1[k]).
struct SystemOperator<'a> {
    dims: Dims,
    coeffs: &'a DiffusionCoeffs<'a>,
    shift: f64,
    tau_alpha: f64,
    pen: Vec<f64>,
}

impl SystemOperator<'_> {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.coeffs.apply_laplacian(self.dims, x, out);
        out.par_iter_mut()
            .zip(x.par_iter())
            .zip(self.pen.par_iter())
            .for_each(|((o, &xv), &pv)| {
                *o = (self.shift + pv) * xv + self.tau_alpha * *o;
            });
    }

    fn diagonal(&self) -> Vec<f64> {
        self.coeffs
            .row_sum
            .iter()
            .zip(&self.pen)
            .map(|(&rs, &pv)| self.shift + pv + self.tau_alpha * rs)
            .collect()
    }
}

/// Jacobi-preconditioned conjugate gradients; dot products run in a fixed
/// sequential order so residuals are reproducible.
fn pcg(op: &SystemOperator, rhs: &[f64], x0: &[f64], rel_tol: f64, max_iters: usize) -> Result<(Vec<f64>, CgStats)> {
    let n = rhs.len();
    let b_norm = rhs.iter().map(|&v| v * v).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], CgStats::default()));
    }
    let target = rel_tol * b_norm;
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|&d| 1.0 / d).collect();
    let mut x = x0.to_vec();
    let mut ax = vec![0.0; n];
    op.apply(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(&b, &a)| b - a).collect();
    let mut res = r.iter().map(|&v| v * v).sum::<f64>().sqrt();
    if res <= target {
        return Ok((x, CgStats { iterations: 0, residual: res }));
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(&ri, &di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for it in 1..=max_iters {
        op.apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(&a, &b)| a * b).sum();
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = r.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if res <= target {
            return Ok((x, CgStats { iterations: it, residual: res }));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged {
        iterations: max_iters,
        residual: res,
        target,
    })
}

fn cg_iteration_cap(n: usize) -> usize {
    let cap = (10.0 * (n as f64).sqrt()).ceil() as usize;
    cap.max(16)
}

const CG_REL_TOL: f64 = 1e-8;

fn solve_inner(
    u_n: &GridField,
    x0: &GridField,
    rx: &ReactionField,
    coeffs: &DiffusionCoeffs,
    params: &FlowParams,
    pen_state: &PenaltyState,
) -> Result<(GridField, CgStats)> {
    let shift = 1.0 - params.tau * rx.a;
    if shift <= 0.0 {
        return Err(Error::Parameter("tau * a < 1".into()));
    }
    if pen_state.r <= 0.0 {
        return Err(Error::Parameter("r > 0".into()));
    }
    let tr = params.tau / pen_state.r;
    let pen: Vec<f64> = pen_state
        .chi0
        .iter()
        .zip(&pen_state.chi1)
        .map(|(&c0, &c1)| tr * f64::from(c0 + c1))
        .collect();
    let rhs: Vec<f64> = u_n
        .values()
        .iter()
        .zip(rx.b.values())
        .zip(&pen_state.chi1)
        .map(|((&un, &bv), &c1)| un - params.tau * bv + tr * f64::from(c1))
        .collect();
    let op = SystemOperator {
        dims: u_n.dims(),
        coeffs,
        shift,
        tau_alpha: params.tau * params.alpha,
        pen,
    };
    let (x, stats) = pcg(&op, &rhs, x0.values(), CG_REL_TOL, cg_iteration_cap(rhs.len()))?;
    Ok((GridField::new(u_n.dims(), x)?, stats))
}

/// Solve one inner problem: chi sets frozen from `u_prev_j`, modulus factors
/// from `u_n`, penalty parameter `r_j`.
pub fn assemble_and_solve(
    u_n: &GridField,
    u_prev_j: &GridField,
    rx: &ReactionField,
    w: &WeightKernel,
    params: &FlowParams,
    r_j: f64,
) -> Result<GridField> {
    let coeffs = DiffusionCoeffs::new(u_n, w, params.epsilon, params.p);
    let pen = PenaltyState::from_field(u_prev_j, r_j);
    solve_inner(u_n, u_prev_j, rx, &coeffs, params, &pen).map(|(u, _)| u)
}

/// Inner r-loop for one time step.
pub fn inner_r_loop(
    u_n: &GridField,
    rx: &ReactionField,
    w: &WeightKernel,
    params: &FlowParams,
    opts: &YosidaOptions,
) -> Result<(GridField, Vec<InnerIterStats>)> {
    let coeffs = DiffusionCoeffs::new(u_n, w, params.epsilon, params.p);
    inner_r_loop_prepared(u_n, rx, &coeffs, params, opts, &mut |_, _| {})
}

fn inner_r_loop_prepared(
    u_n: &GridField,
    rx: &ReactionField,
    coeffs: &DiffusionCoeffs,
    params: &FlowParams,
    opts: &YosidaOptions,
    observe: &mut dyn FnMut(usize, &GridField),
) -> Result<(GridField, Vec<InnerIterStats>)> {
    let max_iters = match opts.stop {
        InnerStop::FixedCount => params.inner_iters,
        InnerStop::Tolerance { max_iters } => max_iters,
    };
    let mut stats = Vec::with_capacity(max_iters);
    let mut u_j = u_n.clone();
    for j in 0..max_iters {
        let r_j = opts.schedule.r_value(j, params.r0);
        let pen = PenaltyState::from_field(&u_j, r_j);
        let (u_next, cg) = solve_inner(u_n, &u_j, rx, coeffs, params, &pen)?;
        let sup = u_next.sup_diff(&u_j);
        stats.push(InnerIterStats {
            r: r_j,
            sup_diff: sup,
            cg,
            violation_l2_sq: violation(&u_next).l2_sq,
        });
        observe(j, &u_next);
        u_j = u_next;
        if matches!(opts.stop, InnerStop::Tolerance { .. }) && sup < params.tol {
            break;
        }
    }
    Ok((u_j, stats))
}

/// Run the semi-implicit scheme from u^0 = f for N outer steps.
pub fn run_yosida(f: &GridField, params: &FlowParams) -> Result<GridField> {
    run_yosida_traced(f, params, &YosidaOptions::default()).map(|(u, _)| u)
}

pub fn run_yosida_traced(
    f: &GridField,
    params: &FlowParams,
    opts: &YosidaOptions,
) -> Result<(GridField, YosidaTrace)> {
    run_yosida_observed(f, params, opts, |_, _, _| {})
}

/// Run with an observer called after every inner solve with
/// (outer step, inner index, iterate); used by the scheme-comparison report.
pub fn run_yosida_observed(
    f: &GridField,
    params: &FlowParams,
    opts: &YosidaOptions,
    mut observer: impl FnMut(usize, usize, &GridField),
) -> Result<(GridField, YosidaTrace)> {
    params.validate()?;
    let start = std::time::Instant::now();
    let w = gaussian_weights(params.rho, f.dims().dimension())?;
    let rx = reaction_coefficients(params, f)?;
    let mut trace = YosidaTrace::default();
    let mut u = f.clone();
    for n in 0..params.n_steps {
        let coeffs = DiffusionCoeffs::new(&u, &w, params.epsilon, params.p);
        let (next, inner) =
            inner_r_loop_prepared(&u, &rx, &coeffs, params, opts, &mut |j, field| {
                observer(n, j, field)
            })?;
        let sup = next.sup_diff(&u);
        trace.outer.push(OuterStepStats {
            inner,
            violation: violation(&next),
            sup_diff: sup,
        });
        trace.run.sup_diffs.push(sup);
        u = next;
        trace.run.steps += 1;
        if opts.run.early_exit && sup < params.tol {
            break;
        }
    }
    trace.run.seconds = start.elapsed().as_secs_f64();
    Ok((u, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;
    use crate::kernels::WeightKernel;

    fn params() -> FlowParams {
        FlowParams {
            p: 0.5,
            epsilon: 0.01,
            alpha: 2.0,
            lambda: 0.0,
            delta: 2.0,
            tau: 0.05,
            n_steps: 3,
            rho: 1.5,
            q_levels: 16,
            r0: 0.5,
            inner_iters: 5,
            tol: 1e-4,
        }
    }

    fn three_tap() -> WeightKernel {
        WeightKernel::from_parts(
            2,
            vec![[0, -1, 0], [0, 0, 0], [0, 1, 0]],
            vec![0.25, 0.5, 0.25],
        )
        .unwrap()
    }

    #[test]
    fn beta_gamma_examples() {
        assert_eq!(yosida_beta(0.5, 0.7).unwrap(), 0.0);
        assert!((yosida_beta(-0.2, 0.1).unwrap() + 2.0).abs() < 1e-14);
        assert!((yosida_gamma(1.3 - 1.0, 0.1).unwrap() - 3.0).abs() < 1e-14);
        assert_eq!(yosida_gamma(-0.4, 0.1).unwrap(), 0.0);
        assert!(yosida_beta(0.1, 0.0).is_err());
        assert!(yosida_gamma(0.1, -1.0).is_err());
    }

    #[test]
    fn beta_gamma_signs_and_parts() {
        for i in -20..=20 {
            let u = f64::from(i) * 0.1;
            let r = 0.25;
            let b = yosida_beta(u, r).unwrap();
            let g = yosida_gamma(u - 1.0, r).unwrap();
            assert!(b <= 0.0);
            assert!(g >= 0.0);
            // beta_r(u) = -u^-/r and gamma_r(u-1) = (u-1)^+/r.
            assert!((b - (-(-u).max(0.0) / r)).abs() < 1e-15);
            assert!((g - (u - 1.0).max(0.0) / r).abs() < 1e-15);
        }
    }

    #[test]
    fn penalty_state_never_double_active() {
        let u = GridField::new(Dims::d2(1, 4), vec![-0.1, 0.0, 0.5, 1.2]).unwrap();
        let pen = PenaltyState::from_field(&u, 0.5);
        assert_eq!(pen.chi0, vec![1, 1, 0, 0]);
        assert_eq!(pen.chi1, vec![0, 0, 0, 1]);
    }

    #[test]
    fn solve_unconstrained_constant_closed_form() {
        let prm = params();
        let dims = Dims::d2(6, 6);
        let (c, beta) = (0.5, 0.3);
        let u_n = GridField::constant(dims, c);
        let rx = ReactionField::forced(dims, prm.a(), beta);
        let w = crate::kernels::gaussian_weights(prm.rho, 2).unwrap();
        // Previous iterate strictly interior: no active chi sets.
        let out = assemble_and_solve(&u_n, &u_n, &rx, &w, &prm, 0.5).unwrap();
        let expect = (c - prm.tau * beta) / (1.0 - prm.tau * prm.a());
        for &v in out.values() {
            assert!((v - expect).abs() < 1e-9, "v={} expect={}", v, expect);
        }
    }

    #[test]
    fn solve_small_tau_returns_input() {
        let mut prm = params();
        prm.tau = 1e-13;
        let dims = Dims::d2(4, 4);
        let data: Vec<f64> = (0..16).map(|i| 0.2 + 0.03 * i as f64).collect();
        let u_n = GridField::new(dims, data).unwrap();
        let rx = ReactionField::forced(dims, prm.a(), 0.4);
        let w = crate::kernels::gaussian_weights(prm.rho, 2).unwrap();
        let out = assemble_and_solve(&u_n, &u_n, &rx, &w, &prm, 0.5).unwrap();
        for (a, b) in out.values().iter().zip(u_n.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn solve_two_pixel_matches_dense() {
        let prm = params();
        let dims = Dims::d2(1, 2);
        let u_n = GridField::new(dims, vec![0.3, 0.9]).unwrap();
        let prev = GridField::new(dims, vec![-0.1, 1.1]).unwrap(); // both obstacles active
        let rx = ReactionField::forced(dims, prm.a(), 0.25);
        let w = three_tap();
        let r_j = 0.125;

        let got = assemble_and_solve(&u_n, &prev, &rx, &w, &prm, r_j).unwrap();

        // Hand-assembled 2x2 system.
        let c = 0.25 * flux_modulus(0.9 - 0.3, prm.epsilon, prm.p); // w(±1) * modulus
        let ta = prm.tau * prm.alpha;
        let shift = 1.0 - prm.tau * rx.a;
        let tr = prm.tau / r_j;
        let a00 = shift + ta * c + tr; // chi0 active at pixel 0
        let a11 = shift + ta * c + tr; // chi1 active at pixel 1
        let a01 = -ta * c;
        let b0 = 0.3 - prm.tau * 0.25;
        let b1 = 0.9 - prm.tau * 0.25 + tr;
        let det = a00 * a11 - a01 * a01;
        let x0 = (b0 * a11 - a01 * b1) / det;
        let x1 = (a00 * b1 - a01 * b0) / det;
        assert!((got.values()[0] - x0).abs() < 1e-10);
        assert!((got.values()[1] - x1).abs() < 1e-10);
    }

    /// Dense matrix of the inner operator, built column by column.
    fn dense_matrix(
        u_n: &GridField,
        rx: &ReactionField,
        w: &WeightKernel,
        prm: &FlowParams,
        pen: &PenaltyState,
    ) -> Vec<Vec<f64>> {
        let n = u_n.len();
        let coeffs = DiffusionCoeffs::new(u_n, w, prm.epsilon, prm.p);
        let tr = prm.tau / pen.r;
        let pen_vec: Vec<f64> = pen
            .chi0
            .iter()
            .zip(&pen.chi1)
            .map(|(&c0, &c1)| tr * f64::from(c0 + c1))
            .collect();
        let op = SystemOperator {
            dims: u_n.dims(),
            coeffs: &coeffs,
            shift: 1.0 - prm.tau * rx.a,
            tau_alpha: prm.tau * prm.alpha,
            pen: pen_vec,
        };
        let mut cols = vec![vec![0.0; n]; n];
        for (kcol, col) in cols.iter_mut().enumerate() {
            let mut e = vec![0.0; n];
            e[kcol] = 1.0;
            op.apply(&e, col);
        }
        // cols[j][i] = A e_j [i] = A[i][j]; transpose into rows.
        let mut rows = vec![vec![0.0; n]; n];
        for i in 0..n {
            for (j, col) in cols.iter().enumerate() {
                rows[i][j] = col[i];
            }
        }
        rows
    }

    /// Jacobi eigenvalue sweep for small symmetric matrices (test oracle).
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let mut off = 0.0;
            let (mut p, mut q) = (0, 1);
            for i in 0..n {
                for j in (i + 1)..n {
                    if a[i][j].abs() > off {
                        off = a[i][j].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if off < 1e-14 {
                break;
            }
            let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..n {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..n {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
        }
        (0..n).map(|i| a[i][i]).collect()
    }

    #[test]
    fn system_is_symmetric_positive_definite() {
        let prm = params();
        let dims = Dims::d2(3, 3);
        let data: Vec<f64> = (0..9).map(|i| ((i * 29) % 13) as f64 / 13.0 - 0.1).collect();
        let u_n = GridField::new(dims, data.clone()).unwrap();
        let prev = GridField::new(dims, data.iter().map(|v| v * 1.4 - 0.1).collect()).unwrap();
        let rx = ReactionField::forced(dims, prm.a(), 0.2);
        let w = crate::kernels::gaussian_weights(1.0, 2).unwrap();
        let pen = PenaltyState::from_field(&prev, 0.25);
        let a = dense_matrix(&u_n, &rx, &w, &prm, &pen);
        for i in 0..9 {
            for j in 0..9 {
                assert!((a[i][j] - a[j][i]).abs() < 1e-12, "A not symmetric");
            }
        }
        let eigs = jacobi_eigenvalues(a);
        let min = eigs.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "min eigenvalue {}", min);
    }

    #[test]
    fn frozen_chi_map_is_linear_in_rhs() {
        let prm = params();
        let dims = Dims::d2(3, 3);
        let u_n = GridField::new(
            dims,
            (0..9).map(|i| ((i * 7) % 10) as f64 / 10.0).collect(),
        )
        .unwrap();
        let w = three_tap();
        let coeffs = DiffusionCoeffs::new(&u_n, &w, prm.epsilon, prm.p);
        let tr = prm.tau / 0.25;
        let chi0 = vec![1, 0, 0, 0, 0, 0, 0, 0, 1];
        let pen_vec: Vec<f64> = chi0.iter().map(|&c: &u8| tr * f64::from(c)).collect();
        let op = SystemOperator {
            dims,
            coeffs: &coeffs,
            shift: 0.9,
            tau_alpha: prm.tau * prm.alpha,
            pen: pen_vec,
        };
        let rhs1: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let rhs2: Vec<f64> = (0..9).map(|i| (i as f64 * 0.71).cos()).collect();
        let sum: Vec<f64> = rhs1.iter().zip(&rhs2).map(|(a, b)| a + b).collect();
        let x0 = vec![0.0; 9];
        let (x1, _) = pcg(&op, &rhs1, &x0, 1e-12, 500).unwrap();
        let (x2, _) = pcg(&op, &rhs2, &x0, 1e-12, 500).unwrap();
        let (xs, _) = pcg(&op, &sum, &x0, 1e-12, 500).unwrap();
        // Compare against a dense solve via the superposed CG solutions.
        for i in 0..9 {
            assert!((xs[i] - (x1[i] + x2[i])).abs() < 1e-8);
        }
    }

    #[test]
    fn inner_loop_fixed_point_exits_immediately() {
        // Constant field b/a strictly inside (0,1) is stationary.
        let mut prm = params();
        prm.delta = 2.0;
        prm.alpha = 2.0; // a = 2, b = 1 -> fixed point 0.5
        let dims = Dims::d2(5, 5);
        let f = GridField::constant(dims, 0.5);
        let rx = reaction_coefficients(&prm, &f).unwrap();
        let w = crate::kernels::gaussian_weights(prm.rho, 2).unwrap();
        let opts = YosidaOptions {
            stop: InnerStop::Tolerance { max_iters: 10 },
            ..Default::default()
        };
        let (out, stats) = {
            let coeffs = DiffusionCoeffs::new(&f, &w, prm.epsilon, prm.p);
            inner_r_loop_prepared(&f, &rx, &coeffs, &prm, &opts, &mut |_, _| {}).unwrap()
        };
        assert_eq!(stats.len(), 1);
        assert!(out.sup_diff(&f) < 1e-8);
    }

    #[test]
    fn r_schedules_match_expected_sequences() {
        let halving: Vec<f64> = (0..5).map(|j| RSchedule::Halving.r_value(j, 0.5)).collect();
        assert_eq!(halving, vec![0.5, 0.25, 0.125, 0.0625, 0.03125]);
        let sup: Vec<f64> = (0..5)
            .map(|j| RSchedule::SuperGeometric.r_value(j, 0.5))
            .collect();
        assert_eq!(sup, vec![0.5, 0.25, 0.0625, 0.0078125, 0.00048828125]);
        assert_eq!(RSchedule::Fixed(0.2).r_value(4, 0.5), 0.2);
    }

    #[test]
    fn run_zero_steps_returns_input() {
        let mut prm = params();
        prm.n_steps = 0;
        let f = GridField::new(Dims::d2(2, 2), vec![0.1, 0.4, 0.6, 0.9]).unwrap();
        let out = run_yosida(&f, &prm).unwrap();
        assert_eq!(out.values(), f.values());
    }

    #[test]
    fn violation_measures_both_sides() {
        let u = GridField::new(Dims::d2(1, 4), vec![-0.3, 0.5, 1.0, 1.2]).unwrap();
        let v = violation(&u);
        assert!((v.l2_sq - (0.09 + 0.2 * 0.2)).abs() < 1e-12);
        assert_eq!(v.sup_neg, 0.3);
        assert!((v.sup_over - 0.2).abs() < 1e-15);
    }
}
