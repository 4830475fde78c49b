//! Kernel-based scheme: the intensity range is quantized into Q levels so
//! the non-local sum becomes per-level spatial correlations, each computable
//! by fast transforms. Two-step update per time step: evaluate the level
//! operator selected by each pixel's level, then round back to the fixed
//! partition.

use rayon::prelude::*;

use crate::conv::{correlate_direct, ConvMode, FftConvolver};
use crate::error::{Error, Result};
use crate::explicit::reactive_update;
use crate::grid::{make_partition, round_to_partition, GridField, QuantizationPartition};
use crate::kernels::{flux, gaussian_weights, reaction_coefficients, FlowParams, ReactionField, WeightKernel};
use crate::{RunOptions, RunTrace};

/// Per-level convolution operator
/// K^i(v)[k] = sum_{m in window(k)} w[k,m] * k_{eps,p}(v[m] - q_i),
/// i.e. the correlation of the pointwise-transformed field with the weight
/// window (zero extension at the boundary).
pub fn level_operator(
    v: &GridField,
    w: &WeightKernel,
    q_i: f64,
    eps: f64,
    p: f64,
    mode: ConvMode,
) -> GridField {
    let g: Vec<f64> = v.values().iter().map(|&x| flux(x - q_i, eps, p)).collect();
    let out = match mode {
        ConvMode::Direct => correlate_direct(&g, v.dims(), w),
        ConvMode::Fft => FftConvolver::new(v.dims(), w).correlate(&g),
    };
    GridField::new(v.dims(), out).expect("operator preserves dims")
}

/// Map every value of an on-partition field to its level index.
fn level_indices(u: &GridField, q: &QuantizationPartition) -> Result<Vec<u32>> {
    u.values()
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            q.exact_index(value)
                .map(|i| i as u32)
                .ok_or(Error::OffPartition { index, value })
        })
        .collect()
}

/// One kernel-based step before rounding: for each pixel at level q_i,
/// (tau*alpha*K^i(u_n) + q_i - tau*b) / (1 - tau*a).
pub fn quantized_step_unrounded(
    u_n: &GridField,
    rx: &ReactionField,
    w: &WeightKernel,
    q: &QuantizationPartition,
    params: &FlowParams,
    mode: ConvMode,
) -> Result<GridField> {
    let convolver = match mode {
        ConvMode::Fft => Some(FftConvolver::new(u_n.dims(), w)),
        ConvMode::Direct => None,
    };
    step_unrounded_prepared(u_n, rx, w, q, params, convolver.as_ref())
}

/// One full kernel-based step (evaluate, then round to the fixed partition).
pub fn quantized_step(
    u_n: &GridField,
    rx: &ReactionField,
    w: &WeightKernel,
    q: &QuantizationPartition,
    params: &FlowParams,
    mode: ConvMode,
) -> Result<GridField> {
    Ok(round_to_partition(
        &quantized_step_unrounded(u_n, rx, w, q, params, mode)?,
        q,
    ))
}

/// Shared step body; `convolver` is reused across the run in FFT mode,
/// `None` selects per-pixel direct sums. Levels with no pixels are skipped;
/// each pixel reads exactly one level's value, so scheduling cannot change
/// the output.
fn step_unrounded_prepared(
    u_n: &GridField,
    rx: &ReactionField,
    w: &WeightKernel,
    q: &QuantizationPartition,
    params: &FlowParams,
    convolver: Option<&FftConvolver>,
) -> Result<GridField> {
    let denom = 1.0 - params.tau * rx.a;
    if denom <= 0.0 {
        return Err(Error::Parameter("tau * a < 1".into()));
    }
    let ta = params.tau * params.alpha;
    let idx = level_indices(u_n, q)?;
    let vals = u_n.values();
    let b = rx.b.values();
    let out = match convolver {
        None => direct_update(u_n, b, w, params, ta, denom),
        Some(engine) => {
            let mut pixels_by_level: Vec<Vec<u32>> = vec![Vec::new(); q.q()];
            for (k, &i) in idx.iter().enumerate() {
                pixels_by_level[i as usize].push(k as u32);
            }
            let populated: Vec<usize> = (0..q.q())
                .filter(|&i| !pixels_by_level[i].is_empty())
                .collect();
            let gathered: Vec<(usize, Vec<f64>)> = populated
                .par_iter()
                .map(|&i| {
                    let qi = q.levels()[i];
                    let g: Vec<f64> = vals
                        .iter()
                        .map(|&x| flux(x - qi, params.epsilon, params.p))
                        .collect();
                    let conv_out = engine.correlate(&g);
                    let picked = pixels_by_level[i]
                        .iter()
                        .map(|&k| conv_out[k as usize])
                        .collect();
                    (i, picked)
                })
                .collect();
            let mut out = vec![0.0; vals.len()];
            for (i, picked) in gathered {
                let qi = q.levels()[i];
                for (&k, &kv) in pixels_by_level[i].iter().zip(&picked) {
                    let k = k as usize;
                    out[k] = reactive_update(kv, qi, b[k], ta, params.tau, denom);
                }
            }
            out
        }
    };
    GridField::new(u_n.dims(), out)
}

/// Direct path: per-pixel truncated sums in the same neighbor order as the
/// explicit scheme, so on-partition fields reproduce its pre-truncation
/// values exactly.
fn direct_update(
    u_n: &GridField,
    b: &[f64],
    w: &WeightKernel,
    params: &FlowParams,
    ta: f64,
    denom: f64,
) -> Vec<f64> {
    let dims = u_n.dims();
    let (l, m, s_len) = (dims.l(), dims.m(), dims.s_len());
    let (li, mi, si) = (l as i64, m as i64, s_len as i64);
    let vals = u_n.values();
    let mut out = vec![0.0; vals.len()];
    out.par_chunks_mut(m * s_len)
        .enumerate()
        .for_each(|(i, row)| {
            let i = i as i64;
            for j in 0..mi {
                for s in 0..si {
                    let k = dims.index(i as usize, j as usize, s as usize);
                    let qi = vals[k];
                    let mut acc = 0.0;
                    for (d, &wt) in w.offsets().iter().zip(w.weights()) {
                        let (ni, nj, ns) = (i + d[0], j + d[1], s + d[2]);
                        if ni < 0 || ni >= li || nj < 0 || nj >= mi || ns < 0 || ns >= si {
                            continue;
                        }
                        let um = vals[dims.index(ni as usize, nj as usize, ns as usize)];
                        acc += wt * flux(um - qi, params.epsilon, params.p);
                    }
                    row[(j * si + s) as usize] =
                        reactive_update(acc, qi, b[k], ta, params.tau, denom);
                }
            }
        });
    out
}

/// Run the kernel-based scheme: u^0 = round(f), then N evaluate+round steps.
pub fn run_quantized(f: &GridField, params: &FlowParams) -> Result<GridField> {
    run_quantized_traced(f, params, ConvMode::Fft, &RunOptions::default()).map(|(u, _)| u)
}

pub fn run_quantized_traced(
    f: &GridField,
    params: &FlowParams,
    mode: ConvMode,
    opts: &RunOptions,
) -> Result<(GridField, RunTrace)> {
    params.validate()?;
    let w = gaussian_weights(params.rho, f.dims().dimension())?;
    let rx = reaction_coefficients(params, f)?;
    run_quantized_prepared(f, &rx, &w, params, mode, opts)
}

pub(crate) fn run_quantized_prepared(
    f: &GridField,
    rx: &ReactionField,
    w: &WeightKernel,
    params: &FlowParams,
    mode: ConvMode,
    opts: &RunOptions,
) -> Result<(GridField, RunTrace)> {
    let start = std::time::Instant::now();
    let q = make_partition(params.q_levels)?;
    let convolver = match mode {
        ConvMode::Fft => Some(FftConvolver::new(f.dims(), w)),
        ConvMode::Direct => None,
    };
    let mut trace = RunTrace::default();
    let mut u = round_to_partition(f, &q);
    for _ in 0..params.n_steps {
        let raw = step_unrounded_prepared(&u, rx, w, &q, params, convolver.as_ref())?;
        let next = round_to_partition(&raw, &q);
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
