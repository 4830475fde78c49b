//! Explicit truncated scheme: direct non-local sums per pixel, whole
//! right-hand side divided by (1 - tau*a), then hard truncation to [0,1].
//! Serves as the correctness reference for the kernel-based scheme.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{clamp01, GridField};
use crate::kernels::{flux, gaussian_weights, reaction_coefficients, FlowParams, ReactionField, WeightKernel};
use crate::{RunOptions, RunTrace};

/// Shared update expression of the explicit and kernel-based schemes:
/// (tau*alpha*diffusion + u - tau*b) / (1 - tau*a). Both schemes must go
/// through this function so their pre-truncation values agree bitwise.
#[inline]
pub(crate) fn reactive_update(diffusion: f64, u: f64, b: f64, ta: f64, tau: f64, denom: f64) -> f64 {
    (ta * diffusion + u - tau * b) / denom
}

/// Non-local diffusion operator
/// K(u)[k] = sum_{m in window(k)} w[k,m] * k_{eps,p}(u[m] - u[k]),
/// windows truncated at the boundary by dropping out-of-domain offsets.
pub fn nonlocal_operator(u: &GridField, w: &WeightKernel, eps: f64, p: f64) -> GridField {
    let dims = u.dims();
    let (l, m, s_len) = (dims.l(), dims.m(), dims.s_len());
    let (li, mi, si) = (l as i64, m as i64, s_len as i64);
    let vals = u.values();
    let mut out = vec![0.0; vals.len()];
    out.par_chunks_mut(m * s_len)
        .enumerate()
        .for_each(|(i, row)| {
            let i = i as i64;
            for j in 0..mi {
                for s in 0..si {
                    let k = dims.index(i as usize, j as usize, s as usize);
                    let uk = vals[k];
                    let mut acc = 0.0;
                    for (d, &wt) in w.offsets().iter().zip(w.weights()) {
                        let (ni, nj, ns) = (i + d[0], j + d[1], s + d[2]);
                        if ni < 0 || ni >= li || nj < 0 || nj >= mi || ns < 0 || ns >= si {
                            continue;
                        }
                        let um = vals[dims.index(ni as usize, nj as usize, ns as usize)];
                        acc += wt * flux(um - uk, eps, p);
                    }
                    row[(j * si + s) as usize] = acc;
                }
            }
        });
    GridField::new(dims, out).expect("operator preserves dims")
}

/// One explicit step before truncation:
/// (tau*alpha*K(u_n) + u_n - tau*b) / (1 - tau*a).
pub fn explicit_step_unclamped(
    u_n: &GridField,
    rx: &ReactionField,
    w: &WeightKernel,
    params: &FlowParams,
) -> Result<GridField> {
    let denom = 1.0 - params.tau * rx.a;
    if denom <= 0.0 {
        return Err(Error::Parameter("tau * a < 1".into()));
    }
    let k_field = nonlocal_operator(u_n, w, params.epsilon, params.p);
    let ta = params.tau * params.alpha;
    let data: Vec<f64> = k_field
        .values()
        .iter()
        .zip(u_n.values())
        .zip(rx.b.values())
        .map(|((&kv, &uv), &bv)| reactive_update(kv, uv, bv, ta, params.tau, denom))
        .collect();
    GridField::new(u_n.dims(), data)
}

/// One explicit step with truncation to [0,1].
pub fn explicit_step(
    u_n: &GridField,
    rx: &ReactionField,
    w: &WeightKernel,
    params: &FlowParams,
) -> Result<GridField> {
    Ok(clamp01(&explicit_step_unclamped(u_n, rx, w, params)?))
}

/// Run the explicit scheme from u^0 = f for N steps.
pub fn run_explicit(f: &GridField, params: &FlowParams) -> Result<GridField> {
    run_explicit_traced(f, params, &RunOptions::default()).map(|(u, _)| u)
}

/// Run with step statistics; early exit (when enabled) stops once
/// ||u^{n+1} - u^n||_inf < tol.
pub fn run_explicit_traced(
    f: &GridField,
    params: &FlowParams,
    opts: &RunOptions,
) -> Result<(GridField, RunTrace)> {
    params.validate()?;
    let w = gaussian_weights_for(params, f)?;
    let rx = reaction_coefficients(params, f)?;
    run_explicit_prepared(f, &rx, &w, params, opts)
}

pub(crate) fn gaussian_weights_for(params: &FlowParams, f: &GridField) -> Result<WeightKernel> {
    gaussian_weights(params.rho, f.dims().dimension())
}

pub(crate) fn run_explicit_prepared(
    f: &GridField,
    rx: &ReactionField,
    w: &WeightKernel,
    params: &FlowParams,
    opts: &RunOptions,
) -> Result<(GridField, RunTrace)> {
    let start = std::time::Instant::now();
    let mut trace = RunTrace::default();
    let mut u = f.clone();
    for _ in 0..params.n_steps {
        let next = explicit_step(&u, rx, w, params)?;
        let sup = next.sup_diff(&u);
        trace.sup_diffs.push(sup);
        if opts.record_energy {
            trace
                .energies
                .push(crate::kernels::nonlocal_energy(&next, w, params.epsilon, params.p));
        }
        u = next;
        trace.steps += 1;
        if opts.early_exit && sup < params.tol {
            break;
        }
    }
    trace.seconds = start.elapsed().as_secs_f64();
    Ok((u, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;
    use crate::kernels::WeightKernel;

    fn three_tap() -> WeightKernel {
        WeightKernel::from_parts(
            2,
            vec![[0, -1, 0], [0, 0, 0], [0, 1, 0]],
            vec![0.25, 0.5, 0.25],
        )
        .unwrap()
    }

    fn default_params() -> FlowParams {
        FlowParams {
            p: 2.0,
            epsilon: 1.0,
            alpha: 1.0,
            lambda: 0.0,
            delta: 1.0,
            tau: 0.1,
            n_steps: 3,
            rho: 1.0,
            q_levels: 16,
            r0: 0.5,
            inner_iters: 5,
            tol: 1e-4,
        }
    }

    fn pseudo_field(dims: Dims, seed: u64) -> GridField {
        let mut x = seed.max(1);
        let data = (0..dims.len())
            .map(|_| {
                x ^= x >> 12;
                x ^= x << 25;
                x ^= x >> 27;
                (x.wrapping_mul(0x2545F4914F6CDD1D) >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        GridField::new(dims, data).unwrap()
    }

    #[test]
    fn operator_vanishes_on_constants() {
        let w = crate::kernels::gaussian_weights(1.5, 2).unwrap();
        let u = GridField::constant(Dims::d2(6, 7), 0.42);
        let k = nonlocal_operator(&u, &w, 0.01, 0.5);
        assert!(k.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn operator_sums_to_zero() {
        let w = crate::kernels::gaussian_weights(2.0, 2).unwrap();
        let u = pseudo_field(Dims::d2(16, 16), 11);
        let k = nonlocal_operator(&u, &w, 0.01, 1.0);
        let total: f64 = k.values().iter().sum();
        assert!(total.abs() < 1e-9 * 256.0, "total={}", total);
    }

    #[test]
    fn operator_hand_value_three_tap() {
        // [0, 1, 0] with p = 2: flux is linear, so K = [1/4, -1/2, 1/4].
        let u = GridField::new(Dims::d2(1, 3), vec![0.0, 1.0, 0.0]).unwrap();
        let k = nonlocal_operator(&u, &three_tap(), 1.0, 2.0);
        let expect = [0.25, -0.5, 0.25];
        for (a, b) in k.values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn operator_linear_at_p_two() {
        let w = crate::kernels::gaussian_weights(1.3, 2).unwrap();
        let u = pseudo_field(Dims::d2(8, 8), 5);
        let v = pseudo_field(Dims::d2(8, 8), 9);
        let (a, b) = (0.7, -0.3);
        let combo = GridField::new(
            u.dims(),
            u.values()
                .iter()
                .zip(v.values())
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        )
        .unwrap();
        let k_combo = nonlocal_operator(&combo, &w, 0.4, 2.0);
        let k_u = nonlocal_operator(&u, &w, 0.4, 2.0);
        let k_v = nonlocal_operator(&v, &w, 0.4, 2.0);
        for ((kc, ku), kv) in k_combo.values().iter().zip(k_u.values()).zip(k_v.values()) {
            assert!((kc - (a * ku + b * kv)).abs() < 1e-10);
        }
    }

    #[test]
    fn operator_translation_equivariant_in_interior() {
        // A compactly supported bump shifted one pixel; compare away from
        // the boundary so truncation plays no role.
        let dims = Dims::d2(16, 16);
        let mut base = vec![0.0; dims.len()];
        for (i, j, v) in [(7usize, 7usize, 0.9), (7, 8, 0.6), (8, 7, 0.4)] {
            base[i * 16 + j] = v;
        }
        let mut shifted = vec![0.0; dims.len()];
        for i in 0..16 {
            for j in 0..15 {
                shifted[i * 16 + (j + 1)] = base[i * 16 + j];
            }
        }
        let w = crate::kernels::gaussian_weights(1.0, 2).unwrap();
        let k0 = nonlocal_operator(&GridField::new(dims, base).unwrap(), &w, 0.01, 0.5);
        let k1 = nonlocal_operator(&GridField::new(dims, shifted).unwrap(), &w, 0.01, 0.5);
        for i in 2..14 {
            for j in 2..13 {
                let a = k0.values()[i * 16 + j];
                let b = k1.values()[i * 16 + j + 1];
                assert!((a - b).abs() < 1e-14, "i={} j={}", i, j);
            }
        }
    }

    #[test]
    fn step_with_zero_tau_is_clamp() {
        let mut params = default_params();
        params.tau = 0.0;
        let rx = ReactionField::forced(Dims::d2(1, 3), 1.0, 1.0);
        let u = GridField::new(Dims::d2(1, 3), vec![-0.2, 0.5, 1.4]).unwrap();
        let next = explicit_step(&u, &rx, &three_tap(), &params).unwrap();
        assert_eq!(next.values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn step_constant_field_closed_form() {
        let params = default_params();
        let (c, beta) = (0.4, 0.7);
        let rx = ReactionField::forced(Dims::d2(4, 4), params.a(), beta);
        let u = GridField::constant(Dims::d2(4, 4), c);
        let raw = explicit_step_unclamped(&u, &rx, &three_tap(), &params).unwrap();
        let expect = (c - params.tau * beta) / (1.0 - params.tau * params.a());
        for &v in raw.values() {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn step_output_in_unit_interval() {
        let params = default_params();
        let u = pseudo_field(Dims::d2(9, 9), 21);
        let rx = reaction_coefficients(&params, &u).unwrap();
        let w = crate::kernels::gaussian_weights(1.5, 2).unwrap();
        let next = explicit_step(&u, &rx, &w, &params).unwrap();
        assert!(next.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn step_rejects_unstable_tau() {
        let params = default_params();
        let rx = ReactionField::forced(Dims::d2(2, 2), 20.0, 0.0); // tau*a = 2
        let u = GridField::zeros(Dims::d2(2, 2));
        assert!(explicit_step(&u, &rx, &three_tap(), &params).is_err());
    }

    #[test]
    fn run_zero_steps_returns_input() {
        let mut params = default_params();
        params.n_steps = 0;
        let f = pseudo_field(Dims::d2(5, 5), 3);
        let out = run_explicit(&f, &params).unwrap();
        assert_eq!(out.values(), f.values());
    }

    #[test]
    fn run_unrolls_as_repeated_steps() {
        let mut params = default_params();
        params.n_steps = 4;
        let f = pseudo_field(Dims::d2(6, 6), 17);
        let full = run_explicit(&f, &params).unwrap();

        params.n_steps = 3;
        let prefix = run_explicit(&f, &params).unwrap();
        let w = crate::kernels::gaussian_weights(params.rho, 2).unwrap();
        let rx = reaction_coefficients(&params, &f).unwrap();
        let last = explicit_step(&prefix, &rx, &w, &params).unwrap();
        assert_eq!(full.values(), last.values());
    }

    #[test]
    fn pure_diffusion_decreases_energy_for_convex_p() {
        // Reaction forced off (a = 0, b = 0); small step; p >= 1.
        for &p in &[1.0, 1.5, 2.0] {
            let mut params = default_params();
            params.p = p;
            params.epsilon = 0.01;
            params.tau = 0.001;
            params.alpha = 1.0;
            let dims = Dims::d2(16, 16);
            let rx = ReactionField::forced(dims, 0.0, 0.0);
            let w = crate::kernels::gaussian_weights(1.5, 2).unwrap();
            let mut u = pseudo_field(dims, 2);
            let mut prev = crate::kernels::nonlocal_energy(&u, &w, params.epsilon, p);
            for _ in 0..5 {
                u = explicit_step(&u, &rx, &w, &params).unwrap();
                let e = crate::kernels::nonlocal_energy(&u, &w, params.epsilon, p);
                assert!(e <= prev + 1e-12, "p={} e={} prev={}", p, e, prev);
                prev = e;
            }
        }
    }
}
