//! Window correlation with zero extension at the boundary, via direct sums
//! or zero-padded FFTs. Both paths compute
//!   out[k] = sum_{d in window} w(d) * g[k + d]
//! dropping out-of-domain neighbors, so they agree with the per-pixel
//! truncated sums used by the explicit scheme.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::grid::Dims;
use crate::kernels::WeightKernel;

/// Which convolution path the kernel-based scheme uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// Per-pixel truncated sums; the oracle path.
    Direct,
    /// Zero-padded frequency-domain correlation; equal to the direct sums
    /// up to FFT roundoff.
    Fft,
}

/// Direct truncated correlation; canonical neighbor order is the kernel's
/// offset storage order (shared with the explicit scheme so on-partition
/// equality is exact).
pub fn correlate_direct(g: &[f64], dims: Dims, kernel: &WeightKernel) -> Vec<f64> {
    let (l, m, s_len) = (dims.l() as i64, dims.m() as i64, dims.s_len() as i64);
    let mut out = vec![0.0; g.len()];
    for i in 0..l {
        for j in 0..m {
            for s in 0..s_len {
                let k = dims.index(i as usize, j as usize, s as usize);
                let mut acc = 0.0;
                for (d, &wt) in kernel.offsets().iter().zip(kernel.weights()) {
                    let (ni, nj, ns) = (i + d[0], j + d[1], s + d[2]);
                    if ni < 0 || ni >= l || nj < 0 || nj >= m || ns < 0 || ns >= s_len {
                        continue;
                    }
                    acc += wt * g[dims.index(ni as usize, nj as usize, ns as usize)];
                }
                out[k] = acc;
            }
        }
    }
    out
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Reusable zero-padded FFT correlator for one (dims, kernel) pair.
///
/// Padding is the next power of two >= len + R per axis, where R is the
/// kernel's per-axis reach. That is enough zero buffer to keep circular
/// wraparound inside the zero region, so the result equals the truncated
/// direct sum; the power-of-two rounding keeps transform cost flat across
/// kernel radii. Plans are shared; each call allocates its own scratch, so
/// a convolver may be used from several threads at once.
pub struct FftConvolver {
    dims: Dims,
    padded: [usize; 3],
    kernel_hat: Vec<Complex64>,
    fwd: Vec<Option<Arc<dyn Fft<f64>>>>,
    inv: Vec<Option<Arc<dyn Fft<f64>>>>,
    scratch_len: usize,
    norm: f64,
}

impl FftConvolver {
    pub fn new(dims: Dims, kernel: &WeightKernel) -> Self {
        let r = kernel.radius() as usize;
        let lens = [dims.l(), dims.m(), dims.s_len()];
        let mut padded = [1usize; 3];
        for a in 0..3 {
            padded[a] = if lens[a] == 1 && a == 2 {
                1
            } else {
                next_pow2(lens[a] + r)
            };
        }
        let mut planner = FftPlanner::<f64>::new();
        let mut fwd = Vec::with_capacity(3);
        let mut inv = Vec::with_capacity(3);
        for a in 0..3 {
            if padded[a] > 1 {
                fwd.push(Some(planner.plan_fft_forward(padded[a])));
                inv.push(Some(planner.plan_fft_inverse(padded[a])));
            } else {
                fwd.push(None);
                inv.push(None);
            }
        }
        let total = padded[0] * padded[1] * padded[2];
        let mut kernel_hat = vec![Complex64::default(); total];
        let strides = [padded[1] * padded[2], padded[2], 1usize];
        for (d, &wt) in kernel.offsets().iter().zip(kernel.weights()) {
            // Reflected placement: the transform then computes a correlation.
            let mut idx = 0usize;
            for a in 0..3 {
                let p = padded[a] as i64;
                let c = (-d[a]).rem_euclid(p) as usize;
                idx += c * strides[a];
            }
            kernel_hat[idx] += Complex64::new(wt, 0.0);
        }
        let scratch_len = fwd
            .iter()
            .chain(inv.iter())
            .flatten()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        let mut s = vec![Complex64::default(); scratch_len];
        fft_nd(&mut kernel_hat, padded, &fwd, &mut s);
        FftConvolver {
            dims,
            padded,
            kernel_hat,
            fwd,
            inv,
            scratch_len,
            norm: 1.0 / total as f64,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Correlate `g` (row-major over `dims`) with the kernel.
    pub fn correlate(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.dims.len(), "field length mismatch");
        let (l, m, s_len) = (self.dims.l(), self.dims.m(), self.dims.s_len());
        let total = self.padded[0] * self.padded[1] * self.padded[2];
        let strides = [self.padded[1] * self.padded[2], self.padded[2], 1usize];
        let mut buf = vec![Complex64::default(); total];
        for i in 0..l {
            for j in 0..m {
                let src = (i * m + j) * s_len;
                let dst = i * strides[0] + j * strides[1];
                for s in 0..s_len {
                    buf[dst + s] = Complex64::new(g[src + s], 0.0);
                }
            }
        }
        let mut scratch = vec![Complex64::default(); self.scratch_len];
        fft_nd(&mut buf, self.padded, &self.fwd, &mut scratch);
        for (b, k) in buf.iter_mut().zip(&self.kernel_hat) {
            *b *= k;
        }
        fft_nd(&mut buf, self.padded, &self.inv, &mut scratch);
        let mut out = vec![0.0; g.len()];
        for i in 0..l {
            for j in 0..m {
                let dst = (i * m + j) * s_len;
                let src = i * strides[0] + j * strides[1];
                for s in 0..s_len {
                    out[dst + s] = buf[src + s].re * self.norm;
                }
            }
        }
        out
    }
}

/// In-place N-dimensional FFT, one axis at a time. Axis 2 is contiguous;
/// axes 0 and 1 go through a gather/scatter line buffer.
fn fft_nd(
    buf: &mut [Complex64],
    padded: [usize; 3],
    plans: &[Option<Arc<dyn Fft<f64>>>],
    scratch: &mut [Complex64],
) {
    let strides = [padded[1] * padded[2], padded[2], 1usize];
    // Contiguous axis first.
    if let Some(fft) = &plans[2] {
        for line in buf.chunks_exact_mut(padded[2]) {
            fft.process_with_scratch(line, scratch);
        }
    }
    let mut line = vec![Complex64::default(); padded[0].max(padded[1])];
    for axis in [0usize, 1] {
        let Some(fft) = &plans[axis] else { continue };
        let n = padded[axis];
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            _ => (0, 2),
        };
        for c1 in 0..padded[o1] {
            for c2 in 0..padded[o2] {
                let base = c1 * strides[o1] + c2 * strides[o2];
                for t in 0..n {
                    line[t] = buf[base + t * stride];
                }
                fft.process_with_scratch(&mut line[..n], scratch);
                for t in 0..n {
                    buf[base + t * stride] = line[t];
                }
            }
        }
    }
}
