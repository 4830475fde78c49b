//! Timing sweep over kernel radii and quantization levels, comparing the
//! patch-based (explicit direct-sum) and kernel-based (quantized FFT)
//! resolutions. Cells run sequentially so wall times stay meaningful.

use serde::Serialize;

use crate::conv::ConvMode;
use crate::error::{Error, Result};
use crate::explicit::run_explicit_traced;
use crate::grid::GridField;
use crate::kernels::FlowParams;
use crate::quantized::run_quantized_traced;
use crate::RunOptions;

/// Scheme under measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchScheme {
    /// Explicit per-pixel window sums; cost grows with the window area.
    Patch,
    /// Quantized per-level FFT convolutions; cost grows with Q.
    Kernel,
}

impl BenchScheme {
    pub fn name(&self) -> &'static str {
        match self {
            BenchScheme::Patch => "patch",
            BenchScheme::Kernel => "kernel",
        }
    }
}

impl std::str::FromStr for BenchScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(BenchScheme::Patch),
            "kernel" => Ok(BenchScheme::Kernel),
            other => Err(Error::Parameter(format!(
                "unknown bench scheme '{}' (expected patch|kernel)",
                other
            ))),
        }
    }
}

/// One sweep cell's measurement.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRecord {
    pub scheme: &'static str,
    pub rho: f64,
    pub q: usize,
    pub pixels: usize,
    pub steps: usize,
    pub seconds: f64,
}

/// Run every (scheme, rho, Q) combination on `f` with `base` parameters
/// (rho and Q overridden per cell, early exit disabled) and record wall time.
/// Row order is scheme, then rho, then Q.
pub fn timing_sweep(
    f: &GridField,
    rho_list: &[f64],
    q_list: &[usize],
    schemes: &[BenchScheme],
    base: &FlowParams,
) -> Result<Vec<BenchRecord>> {
    if rho_list.is_empty() || q_list.is_empty() || schemes.is_empty() {
        return Err(Error::Parameter(
            "sweep lists must be non-empty".to_string(),
        ));
    }
    let opts = RunOptions {
        early_exit: false,
        record_energy: false,
    };
    let mut records = Vec::with_capacity(schemes.len() * rho_list.len() * q_list.len());
    for &scheme in schemes {
        for &rho in rho_list {
            for &q in q_list {
                let mut params = *base;
                params.rho = rho;
                params.q_levels = q;
                let trace = match scheme {
                    BenchScheme::Patch => run_explicit_traced(f, &params, &opts)?.1,
                    BenchScheme::Kernel => {
                        run_quantized_traced(f, &params, ConvMode::Fft, &opts)?.1
                    }
                };
                records.push(BenchRecord {
                    scheme: scheme.name(),
                    rho,
                    q,
                    pixels: f.len(),
                    steps: trace.steps,
                    seconds: trace.seconds,
                });
            }
        }
    }
    Ok(records)
}

/// CSV emission: header `scheme,rho,Q,pixels,steps,seconds`, one row per cell.
pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("scheme,rho,Q,pixels,steps,seconds\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            r.scheme, r.rho, r.q, r.pixels, r.steps, r.seconds
        ));
    }
    out
}
