//! End-to-end segmentation: delta estimation from image statistics, solver
//! dispatch (2D, per-slice, or full 3D), final thresholding, and the naive
//! threshold baseline.

use serde::Serialize;

use crate::conv::ConvMode;
use crate::error::{Error, Result};
use crate::explicit::run_explicit_traced;
use crate::grid::{Dims, GridField, SegmentationMask};
use crate::kernels::FlowParams;
use crate::quantized::run_quantized_traced;
use crate::yosida::{run_yosida_traced, Violation, YosidaOptions};
use crate::{RunOptions, RunTrace};

/// Linear-regression coefficients mapping mean brain intensity to mean
/// tumor intensity; data constants, overridable in config.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RegressionCoeffs {
    pub slope: f64,
    pub intercept: f64,
}

impl Default for RegressionCoeffs {
    fn default() -> Self {
        RegressionCoeffs {
            slope: 1.176,
            intercept: 0.101,
        }
    }
}

/// Estimate delta from the mean intensity over the brain mask:
/// the class threshold 1/delta is placed halfway between mu_brain and the
/// regression's predicted tumor mean, giving
/// delta = 2 / ((1 + slope) * mu_brain + intercept).
pub fn estimate_delta(
    f: &GridField,
    brain_mask: &SegmentationMask,
    coeffs: RegressionCoeffs,
) -> Result<f64> {
    if f.dims() != brain_mask.dims() {
        return Err(Error::DimensionMismatch {
            left: f.dims().to_string(),
            right: brain_mask.dims().to_string(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&v, &m) in f.values().iter().zip(brain_mask.labels()) {
        if m == 1 {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mu_brain = sum / count as f64;
    let denom = (1.0 + coeffs.slope) * mu_brain + coeffs.intercept;
    if denom <= 0.0 {
        return Err(Error::Parameter(
            "(1 + slope) * mu_brain + intercept > 0".into(),
        ));
    }
    Ok(2.0 / denom)
}

/// Default brain mask: every strictly positive pixel.
pub fn default_brain_mask(f: &GridField) -> SegmentationMask {
    SegmentationMask::from_predicate(f, |v| v > 0.0)
}

/// Baseline segmentation: foreground where f > 1/delta.
pub fn naive_threshold(f: &GridField, delta: f64) -> Result<SegmentationMask> {
    if delta <= 0.0 {
        return Err(Error::Parameter("delta > 0".into()));
    }
    let threshold = 1.0 / delta;
    Ok(SegmentationMask::from_predicate(f, |v| v > threshold))
}

/// Threshold the near-binary flow output at the midpoint (>= 0.5 is foreground).
pub fn finalize_mask(u: &GridField) -> SegmentationMask {
    SegmentationMask::from_predicate(u, |v| v >= 0.5)
}

/// Which numerical scheme runs the flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Explicit,
    Quantized,
    Yosida,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(Scheme::Explicit),
            "quantized" => Ok(Scheme::Quantized),
            "yosida" => Ok(Scheme::Yosida),
            other => Err(Error::Parameter(format!(
                "unknown scheme '{}' (expected explicit|quantized|yosida)",
                other
            ))),
        }
    }
}

/// Volume handling: independent 2D slices or one 3D run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Mode {
    #[serde(rename = "2d")]
    TwoDPerSlice,
    #[serde(rename = "3d")]
    ThreeD,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" | "2d-per-slice" => Ok(Mode::TwoDPerSlice),
            "3d" => Ok(Mode::ThreeD),
            other => Err(Error::Parameter(format!(
                "unknown mode '{}' (expected 2d|3d)",
                other
            ))),
        }
    }
}

/// How delta is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaRule {
    Fixed(f64),
    Auto,
}

/// Intensity-difference amplitude the default time step is asked to keep
/// stable. Differences below this scale may oscillate under explicit
/// stepping of the non-convex flux; 0.02 is far below the mask-relevant
/// scale and below half a gap of any partition up to Q ~ 26.
pub const DIFFUSION_RESOLUTION: f64 = 0.02;

/// Default time step for a scheme that resolves intensity differences down
/// to `scale`: the reaction bound tau*a <= 0.5 intersected with diffusion
/// stability at that scale. The regularized conductivity
/// (s^2+eps^2)^{(p-2)/2} grows as differences shrink (for p < 2), and
/// explicit stepping amplifies any difference s with
/// tau*alpha*conductivity(s) > 2; the cap keeps amplification at bay for
/// every s >= scale. The kernel-based scheme's rounding absorbs motion
/// below half a quantization gap, so its scale is max(gap, resolution).
pub fn default_time_step(a: f64, alpha: f64, p: f64, epsilon: f64, scale: f64) -> f64 {
    let conductivity = (scale * scale + epsilon * epsilon).powf((p - 2.0) / 2.0);
    (0.5 / a).min(2.0 / (alpha * conductivity))
}

/// Model parameters with delta and tau possibly left for resolution.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ParamSpec {
    pub p: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub delta: DeltaRule,
    pub tau: Option<f64>,
    pub n_steps: usize,
    pub rho: f64,
    pub q_levels: usize,
    pub r0: f64,
    pub inner_iters: usize,
    pub tol: f64,
}

impl Default for ParamSpec {
    fn default() -> Self {
        ParamSpec {
            p: 0.5,
            epsilon: 1e-2,
            alpha: 1.5,
            lambda: 0.0,
            delta: DeltaRule::Auto,
            tau: None,
            n_steps: 300,
            rho: 3.0,
            q_levels: 256,
            r0: 0.5,
            inner_iters: 5,
            tol: 1e-4,
        }
    }
}

impl ParamSpec {
    /// The intensity scale whose differences a scheme must keep stable.
    pub fn resolution_scale(&self, scheme: Scheme) -> f64 {
        match scheme {
            Scheme::Quantized => {
                let gap = 1.0 / (self.q_levels.max(2) as f64 - 1.0);
                gap.max(DIFFUSION_RESOLUTION)
            }
            Scheme::Explicit | Scheme::Yosida => DIFFUSION_RESOLUTION,
        }
    }

    /// Produce concrete solver parameters for a given delta and scheme.
    pub fn resolve(&self, delta: f64, scheme: Scheme) -> Result<FlowParams> {
        let a = delta * delta / self.alpha - self.lambda;
        if a <= 0.0 {
            return Err(Error::Parameter("delta^2/alpha - lambda > 0".into()));
        }
        let params = FlowParams {
            p: self.p,
            epsilon: self.epsilon,
            alpha: self.alpha,
            lambda: self.lambda,
            delta,
            tau: self.tau.unwrap_or_else(|| {
                default_time_step(a, self.alpha, self.p, self.epsilon, self.resolution_scale(scheme))
            }),
            n_steps: self.n_steps,
            rho: self.rho,
            q_levels: self.q_levels,
            r0: self.r0,
            inner_iters: self.inner_iters,
            tol: self.tol,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Full segmentation configuration.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SegmentConfig {
    pub scheme: Scheme,
    pub mode: Mode,
    pub params: ParamSpec,
    /// In 2D-per-slice mode on volumes: estimate one delta from the whole
    /// volume instead of one per slice.
    pub global_delta: bool,
    pub regression: RegressionCoeffs,
    pub conv: ConvMode,
    pub yosida: YosidaOptions,
    pub run: RunOptions,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            scheme: Scheme::Quantized,
            mode: Mode::TwoDPerSlice,
            params: ParamSpec::default(),
            global_delta: false,
            regression: RegressionCoeffs::default(),
            conv: ConvMode::Fft,
            yosida: YosidaOptions::default(),
            run: RunOptions::default(),
        }
    }
}

/// Statistics for one solver run (one slice, or the whole volume/image).
#[derive(Clone, Debug, Serialize)]
pub struct SliceStats {
    pub slice: Option<usize>,
    pub delta: f64,
    pub tau: f64,
    pub steps: usize,
    pub seconds: f64,
    pub sup_diffs: Vec<f64>,
    pub energies: Vec<f64>,
    pub violation: Option<Violation>,
}

/// Statistics for the whole segmentation.
#[derive(Clone, Debug, Serialize)]
pub struct RunStats {
    pub scheme: Scheme,
    pub mode: Mode,
    pub runs: Vec<SliceStats>,
    pub total_seconds: f64,
}

/// Segmentation output: final mask, raw flow field, statistics.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: SegmentationMask,
    pub field: GridField,
    pub stats: RunStats,
}

fn resolve_delta(f: &GridField, cfg: &SegmentConfig) -> Result<f64> {
    match cfg.params.delta {
        DeltaRule::Fixed(d) => Ok(d),
        DeltaRule::Auto => estimate_delta(f, &default_brain_mask(f), cfg.regression),
    }
}

fn run_scheme(
    f: &GridField,
    params: &FlowParams,
    cfg: &SegmentConfig,
) -> Result<(GridField, RunTrace, Option<Violation>)> {
    match cfg.scheme {
        Scheme::Explicit => {
            let (u, trace) = run_explicit_traced(f, params, &cfg.run)?;
            Ok((u, trace, None))
        }
        Scheme::Quantized => {
            let (u, trace) = run_quantized_traced(f, params, cfg.conv, &cfg.run)?;
            Ok((u, trace, None))
        }
        Scheme::Yosida => {
            let opts = YosidaOptions {
                run: cfg.run,
                ..cfg.yosida
            };
            let (u, trace) = run_yosida_traced(f, params, &opts)?;
            let violation = trace.outer.last().map(|o| o.violation);
            Ok((u, trace.run, violation))
        }
    }
}

fn run_single(
    f: &GridField,
    cfg: &SegmentConfig,
    delta: f64,
    slice: Option<usize>,
) -> Result<(GridField, SliceStats)> {
    let params = cfg.params.resolve(delta, cfg.scheme)?;
    let (u, trace, violation) = run_scheme(f, &params, cfg)?;
    let stats = SliceStats {
        slice,
        delta,
        tau: params.tau,
        steps: trace.steps,
        seconds: trace.seconds,
        sup_diffs: trace.sup_diffs,
        energies: trace.energies,
        violation,
    };
    Ok((u, stats))
}

/// Segment an image or volume; returns the final mask, the raw flow field,
/// and per-run statistics.
pub fn segment(f: &GridField, cfg: &SegmentConfig) -> Result<Segmentation> {
    let start = std::time::Instant::now();
    let dims = f.dims();
    let per_slice = matches!(dims, Dims::D3 { .. }) && cfg.mode == Mode::TwoDPerSlice;
    let (field, runs) = if per_slice {
        let global = if cfg.global_delta {
            Some(resolve_delta(f, cfg)?)
        } else {
            match cfg.params.delta {
                DeltaRule::Fixed(d) => Some(d),
                DeltaRule::Auto => None,
            }
        };
        let s_len = dims.s_len();
        let mut volume = vec![0.0; dims.len()];
        let mut runs = Vec::with_capacity(s_len);
        for s in 0..s_len {
            let plane = f.slice(s);
            let delta = match global {
                Some(d) => d,
                None => resolve_delta(&plane, cfg)?,
            };
            let (u, stats) = run_single(&plane, cfg, delta, Some(s))?;
            for i in 0..dims.l() {
                for j in 0..dims.m() {
                    volume[dims.index(i, j, s)] = u.values()[i * dims.m() + j];
                }
            }
            runs.push(stats);
        }
        (GridField::new(dims, volume)?, runs)
    } else {
        let delta = resolve_delta(f, cfg)?;
        let (u, stats) = run_single(f, cfg, delta, None)?;
        (u, vec![stats])
    };
    let mask = finalize_mask(&field);
    Ok(Segmentation {
        mask,
        field,
        stats: RunStats {
            scheme: cfg.scheme,
            mode: cfg.mode,
            runs,
            total_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;

    fn field_1d(values: &[f64]) -> GridField {
        GridField::new(Dims::d2(1, values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn delta_from_published_formula() {
        let f = GridField::constant(Dims::d2(8, 8), 0.3);
        let mask = SegmentationMask::from_predicate(&f, |_| true);
        let d = estimate_delta(&f, &mask, RegressionCoeffs::default()).unwrap();
        assert!((d - 2.65322).abs() < 1e-5, "delta = {}", d);
    }

    #[test]
    fn delta_identity_coefficients_give_inverse_mean() {
        let f = GridField::constant(Dims::d2(4, 4), 0.4);
        let mask = SegmentationMask::from_predicate(&f, |_| true);
        let coeffs = RegressionCoeffs {
            slope: 1.0,
            intercept: 0.0,
        };
        let d = estimate_delta(&f, &mask, coeffs).unwrap();
        assert!((d - 1.0 / 0.4).abs() < 1e-12);
    }

    #[test]
    fn delta_at_zero_mean_is_intercept_bound() {
        let f = GridField::zeros(Dims::d2(4, 4));
        let mask = SegmentationMask::from_predicate(&f, |_| true);
        let d = estimate_delta(&f, &mask, RegressionCoeffs::default()).unwrap();
        assert!((d - 19.80198).abs() < 1e-5);
    }

    #[test]
    fn delta_rejects_empty_mask() {
        let f = GridField::zeros(Dims::d2(2, 2));
        let mask = default_brain_mask(&f);
        assert!(matches!(
            estimate_delta(&f, &mask, RegressionCoeffs::default()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn delta_rejects_nonpositive_denominator() {
        let f = GridField::constant(Dims::d2(2, 2), 0.5);
        let mask = SegmentationMask::from_predicate(&f, |_| true);
        let coeffs = RegressionCoeffs {
            slope: 1.0,
            intercept: -2.0,
        };
        let err = estimate_delta(&f, &mask, coeffs).unwrap_err();
        assert!(err.to_string().contains("intercept > 0"));
    }

    #[test]
    fn delta_scale_consistency_with_zero_intercept() {
        // With intercept 0, delta(c*mu) = delta(mu)/c exactly for exact scalings.
        let coeffs = RegressionCoeffs {
            slope: 1.176,
            intercept: 0.0,
        };
        for &c in &[2.0, 4.0, 0.5] {
            let f1 = GridField::constant(Dims::d2(2, 2), 0.2);
            let f2 = GridField::constant(Dims::d2(2, 2), 0.2 * c);
            let mask = SegmentationMask::from_predicate(&f1, |_| true);
            let d1 = estimate_delta(&f1, &mask, coeffs).unwrap();
            let d2 = estimate_delta(&f2, &mask, coeffs).unwrap();
            assert_eq!(d2, d1 / c);
        }
    }

    #[test]
    fn brain_mask_cases() {
        assert_eq!(
            default_brain_mask(&GridField::zeros(Dims::d2(1, 3))).foreground_count(),
            0
        );
        assert_eq!(
            default_brain_mask(&GridField::constant(Dims::d2(1, 3), 0.2)).foreground_count(),
            3
        );
        assert_eq!(
            default_brain_mask(&field_1d(&[0.0, 0.1, 0.0])).labels(),
            &[0, 1, 0]
        );
    }

    #[test]
    fn naive_threshold_cases() {
        let m = naive_threshold(&field_1d(&[0.4, 0.6]), 2.0).unwrap();
        assert_eq!(m.labels(), &[0, 1]);
        let zeros = naive_threshold(&GridField::zeros(Dims::d2(2, 2)), 2.0).unwrap();
        assert_eq!(zeros.foreground_count(), 0);
        let ones = naive_threshold(&GridField::constant(Dims::d2(2, 2), 1.0), 1.5).unwrap();
        assert_eq!(ones.foreground_count(), 4);
        assert!(naive_threshold(&field_1d(&[0.1]), 0.0).is_err());
    }

    #[test]
    fn finalize_mask_cases() {
        let binary = field_1d(&[0.0, 1.0, 1.0]);
        assert_eq!(finalize_mask(&binary).labels(), &[0, 1, 1]);
        let half = GridField::constant(Dims::d2(1, 2), 0.5);
        assert_eq!(finalize_mask(&half).labels(), &[1, 1]);
        assert_eq!(finalize_mask(&field_1d(&[0.2, 0.8])).labels(), &[0, 1]);
    }

    #[test]
    fn default_time_step_respects_both_bounds() {
        // Reaction-limited when a is large relative to alpha.
        let tau = default_time_step(100.0, 1.0, 0.5, 0.01, DIFFUSION_RESOLUTION);
        assert!(tau <= 0.5 / 100.0 + 1e-15);
        // Diffusion-limited otherwise: 2 / (alpha * (scale^2+eps^2)^{-3/4}).
        let tau2 = default_time_step(0.1, 2.0, 0.5, 0.01, DIFFUSION_RESOLUTION);
        let cond = (0.02f64 * 0.02 + 1e-4).powf(-0.75);
        assert!((tau2 - 1.0 / cond).abs() < 1e-12);
        // The conductivity cap is inactive at p = 2 (conductivity = 1).
        assert!((default_time_step(1.0, 1.0, 2.0, 0.01, DIFFUSION_RESOLUTION) - 0.5).abs() < 1e-15);
        // Coarser quantization raises the quantized scheme's scale.
        let spec = ParamSpec {
            q_levels: 8,
            ..ParamSpec::default()
        };
        assert!((spec.resolution_scale(Scheme::Quantized) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(spec.resolution_scale(Scheme::Explicit), DIFFUSION_RESOLUTION);
    }

    #[test]
    fn segment_2d_matches_direct_solver_run() {
        let (f, _) = crate::phantom::generate(&crate::phantom::PhantomSpec::new(
            Dims::d2(24, 24),
            5,
        ));
        let mut cfg = SegmentConfig::default();
        cfg.params.delta = DeltaRule::Fixed(2.2);
        cfg.params.n_steps = 10;
        let seg = segment(&f, &cfg).unwrap();

        let params = cfg.params.resolve(2.2, cfg.scheme).unwrap();
        let (u, _) =
            crate::quantized::run_quantized_traced(&f, &params, cfg.conv, &cfg.run).unwrap();
        assert_eq!(seg.field.values(), u.values());
        assert_eq!(seg.mask.labels(), finalize_mask(&u).labels());
    }

    #[test]
    fn segment_is_deterministic() {
        let (f, _) = crate::phantom::generate(&crate::phantom::PhantomSpec::new(
            Dims::d2(24, 24),
            9,
        ));
        let mut cfg = SegmentConfig::default();
        cfg.scheme = Scheme::Explicit;
        cfg.params.delta = DeltaRule::Fixed(2.3);
        cfg.params.n_steps = 8;
        let a = segment(&f, &cfg).unwrap();
        let b = segment(&f, &cfg).unwrap();
        assert_eq!(a.mask.labels(), b.mask.labels());
        assert_eq!(a.field.values(), b.field.values());
    }

    #[test]
    fn segment_volume_per_slice_assembles_slices() {
        let (f, _) = crate::phantom::generate(
            &crate::phantom::PhantomSpec::new(Dims::d3(12, 12, 3), 4).with_blobs(1),
        );
        let mut cfg = SegmentConfig::default();
        cfg.params.delta = DeltaRule::Fixed(2.0);
        cfg.params.n_steps = 5;
        cfg.params.rho = 1.5;
        cfg.params.q_levels = 32;
        let seg = segment(&f, &cfg).unwrap();
        assert_eq!(seg.stats.runs.len(), 3);
        // Slice 1 of the output equals a direct 2D run on slice 1.
        let plane = f.slice(1);
        let (u, _) = crate::quantized::run_quantized_traced(
            &plane,
            &cfg.params.resolve(2.0, cfg.scheme).unwrap(),
            cfg.conv,
            &cfg.run,
        )
        .unwrap();
        assert_eq!(seg.field.slice(1).values(), u.values());
    }
}
