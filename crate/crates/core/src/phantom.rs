//! Deterministic synthetic phantoms: disc/ellipsoid blobs at a foreground
//! mean on a flat background, plus additive Gaussian noise, from a seeded
//! generator with a pinned algorithm so the same spec reproduces the same
//! bytes anywhere.
//!
//! Generator algorithm (normative, language-independent):
//! * PRNG: xorshift64* — state x (u64, seed 0 maps to 0x9E3779B97F4A7C15);
//!   x ^= x >> 12; x ^= x << 25; x ^= x >> 27; output x * 0x2545F4914F6CDD1D.
//! * Uniform doubles: ((output >> 11) + 0.5) / 2^53, strictly inside (0,1).
//! * Gaussians: Box-Muller on consecutive uniform pairs (u1, u2):
//!   z0 = sqrt(-2 ln u1) cos(2 pi u2), z1 = sqrt(-2 ln u1) sin(2 pi u2).
//! * Draw order: per blob, center fractions (one uniform per axis) then a
//!   radius fraction (2D) or three semi-axis fractions (3D); then one
//!   Gaussian per lattice node in row-major order.
//! * Values: fg_mean inside any blob else bg_mean, plus sigma * gaussian,
//!   clamped to [0,1]. Ground truth is the pre-noise blob union.

use serde::Serialize;

use crate::grid::{Dims, GridField, SegmentationMask};

/// xorshift64* generator; the phantom corpus depends on this exact update.
#[derive(Clone, Debug)]
pub struct Xorshift64Star {
    state: u64,
}

impl Xorshift64Star {
    pub fn new(seed: u64) -> Self {
        Xorshift64Star {
            state: if seed == 0 { 0x9E37_79B9_7F4A_7C15 } else { seed },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in (0, 1), 53-bit resolution, never exactly 0 or 1.
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Standard Gaussian pair via Box-Muller.
    pub fn next_gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let mag = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        (mag * angle.cos(), mag * angle.sin())
    }
}

/// Parameters of one synthetic phantom.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub blobs: usize,
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(dims: Dims, seed: u64) -> Self {
        PhantomSpec {
            dims,
            blobs: 3,
            fg_mean: 0.8,
            bg_mean: 0.3,
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_blobs(mut self, blobs: usize) -> Self {
        self.blobs = blobs;
        self
    }
}

struct Blob {
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Blob {
    fn contains(&self, i: usize, j: usize, s: usize) -> bool {
        let di = (i as f64 - self.center[0]) / self.semi_axes[0];
        let dj = (j as f64 - self.center[1]) / self.semi_axes[1];
        let ds = (s as f64 - self.center[2]) / self.semi_axes[2];
        di * di + dj * dj + ds * ds <= 1.0
    }
}

/// Generate the phantom field and its ground-truth mask.
pub fn generate(spec: &PhantomSpec) -> (GridField, SegmentationMask) {
    let dims = spec.dims;
    let (l, m, s_len) = (dims.l(), dims.m(), dims.s_len());
    let mut rng = Xorshift64Star::new(spec.seed);

    let mut blobs = Vec::with_capacity(spec.blobs);
    for _ in 0..spec.blobs {
        // Centers in the middle 60% of each axis, radii 12%..22% of the
        // shortest in-plane axis so blobs stay comfortably inside.
        let ci = (0.2 + 0.6 * rng.next_f64()) * (l as f64 - 1.0);
        let cj = (0.2 + 0.6 * rng.next_f64()) * (m as f64 - 1.0);
        let min_axis = l.min(m) as f64;
        match dims {
            Dims::D2 { .. } => {
                let radius = (0.12 + 0.10 * rng.next_f64()) * min_axis;
                blobs.push(Blob {
                    center: [ci, cj, 0.0],
                    semi_axes: [radius, radius, 1.0],
                });
            }
            Dims::D3 { .. } => {
                let cs = (0.2 + 0.6 * rng.next_f64()) * (s_len as f64 - 1.0);
                let ri = (0.12 + 0.10 * rng.next_f64()) * min_axis;
                let rj = (0.12 + 0.10 * rng.next_f64()) * min_axis;
                let rs = (0.20 + 0.15 * rng.next_f64()) * s_len as f64;
                blobs.push(Blob {
                    center: [ci, cj, cs],
                    semi_axes: [ri, rj, rs],
                });
            }
        }
    }

    let n = dims.len();
    let mut values = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut spare: Option<f64> = None;
    let mut next_gauss = |rng: &mut Xorshift64Star| -> f64 {
        if let Some(z) = spare.take() {
            z
        } else {
            let (z0, z1) = rng.next_gaussian_pair();
            spare = Some(z1);
            z0
        }
    };
    for i in 0..l {
        for j in 0..m {
            for s in 0..s_len {
                let inside = blobs.iter().any(|b| b.contains(i, j, s));
                let base = if inside { spec.fg_mean } else { spec.bg_mean };
                let noise = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * next_gauss(&mut rng)
                } else {
                    0.0
                };
                values.push((base + noise).clamp(0.0, 1.0));
                labels.push(u8::from(inside));
            }
        }
    }
    let field = GridField::new(dims, values).expect("phantom dims");
    let mask = SegmentationMask::new(dims, labels).expect("phantom dims");
    (field, mask)
}

/// The standard verification suite: `count` seeded 2D phantoms.
pub fn suite(dims: Dims, count: usize, noise_sigma: f64) -> Vec<(GridField, SegmentationMask)> {
    (1..=count as u64)
        .map(|seed| generate(&PhantomSpec::new(dims, seed).with_noise(noise_sigma)))
        .collect()
}
