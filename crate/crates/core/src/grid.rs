//! Dense 2D/3D scalar fields on the pixel lattice, plus the value-range
//! utilities shared by every solver: normalization, quantization partitions,
//! rounding, clamping and norms.
//!
//! Layout is row-major with dimension order (L, M) or (L, M, S); the last
//! axis is contiguous. This ordering also fixes the byte order of the file
//! formats.

use serde::Serialize;

use crate::error::{Error, Result};

/// Lattice dimensions of a field: (L, M) for images, (L, M, S) for volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Dims {
    D2 { l: usize, m: usize },
    D3 { l: usize, m: usize, s: usize },
}

impl Dims {
    pub fn d2(l: usize, m: usize) -> Self {
        Dims::D2 { l, m }
    }

    pub fn d3(l: usize, m: usize, s: usize) -> Self {
        Dims::D3 { l, m, s }
    }

    pub fn l(&self) -> usize {
        match *self {
            Dims::D2 { l, .. } | Dims::D3 { l, .. } => l,
        }
    }

    pub fn m(&self) -> usize {
        match *self {
            Dims::D2 { m, .. } | Dims::D3 { m, .. } => m,
        }
    }

    /// Slice count; 1 for 2D fields so index arithmetic is uniform.
    pub fn s_len(&self) -> usize {
        match *self {
            Dims::D2 { .. } => 1,
            Dims::D3 { s, .. } => s,
        }
    }

    pub fn dimension(&self) -> u8 {
        match self {
            Dims::D2 { .. } => 2,
            Dims::D3 { .. } => 3,
        }
    }

    pub fn len(&self) -> usize {
        self.l() * self.m() * self.s_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of lattice node (i, j, s); callers guarantee bounds.
    #[inline]
    pub fn index(&self, i: usize, j: usize, s: usize) -> usize {
        (i * self.m() + j) * self.s_len() + s
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Dims::D2 { l, m } => write!(f, "{}x{}", l, m),
            Dims::D3 { l, m, s } => write!(f, "{}x{}x{}", l, m, s),
        }
    }
}

/// Dense scalar field over a 2D or 3D lattice, 64-bit values.
///
/// Fields are immutable values after construction: all public operations
/// return new fields, so sharing read-only across threads is safe.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    dims: Dims,
    data: Vec<f64>,
}

impl GridField {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                left: format!("{} values", data.len()),
                right: format!("dims {}", dims),
            });
        }
        Ok(GridField { dims, data })
    }

    pub fn constant(dims: Dims, value: f64) -> Self {
        GridField {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::constant(dims, 0.0)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Largest pointwise |self - other|; panics on dimension mismatch
    /// (internal use between iterates of one run).
    pub fn sup_diff(&self, other: &GridField) -> f64 {
        assert_eq!(self.dims, other.dims, "sup_diff on mismatched fields");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Extract slice `s` of a volume as a 2D field. For 2D fields, slice 0
    /// returns a copy of the field itself.
    pub fn slice(&self, s: usize) -> GridField {
        let (l, m, s_len) = (self.dims.l(), self.dims.m(), self.dims.s_len());
        assert!(s < s_len, "slice index out of range");
        let mut data = Vec::with_capacity(l * m);
        for i in 0..l {
            for j in 0..m {
                data.push(self.data[self.dims.index(i, j, s)]);
            }
        }
        GridField {
            dims: Dims::d2(l, m),
            data,
        }
    }
}

/// Binary labels on the same lattice as a `GridField`: 1 foreground, 0 background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    dims: Dims,
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                left: format!("{} labels", data.len()),
                right: format!("dims {}", dims),
            });
        }
        if let Some(idx) = data.iter().position(|&v| v > 1) {
            return Err(Error::Parameter(format!(
                "mask label at index {} is {}, expected 0 or 1",
                idx, data[idx]
            )));
        }
        Ok(SegmentationMask { dims, data })
    }

    pub fn from_predicate(field: &GridField, pred: impl Fn(f64) -> bool) -> Self {
        SegmentationMask {
            dims: field.dims(),
            data: field.values().iter().map(|&v| u8::from(pred(v))).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.data
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Write slice `s` of a volume mask from a 2D mask.
    pub fn set_slice(&mut self, s: usize, plane: &SegmentationMask) {
        let (l, m) = (self.dims.l(), self.dims.m());
        assert_eq!(plane.dims(), Dims::d2(l, m), "slice dims mismatch");
        for i in 0..l {
            for j in 0..m {
                self.data[self.dims.index(i, j, s)] = plane.data[i * m + j];
            }
        }
    }

    /// Mask as a {0.0, 1.0} field (volume writers use this encoding).
    pub fn to_field(&self) -> GridField {
        GridField {
            dims: self.dims,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Sorted intensity levels 0 = q_1 < ... < q_Q = 1 for the kernel-based scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationPartition {
    levels: Vec<f64>,
}

impl QuantizationPartition {
    /// Build directly from sorted levels; endpoints must be 0 and 1.
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Parameter("Q >= 2".into()));
        }
        if levels[0] != 0.0 || *levels.last().unwrap() != 1.0 {
            return Err(Error::Parameter("q_1 = 0 and q_Q = 1".into()));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("q_1 < q_2 < ... < q_Q".into()));
        }
        Ok(QuantizationPartition { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn q(&self) -> usize {
        self.levels.len()
    }

    /// Uniform spacing of the level grid (1/(Q-1) for `make_partition`).
    pub fn gap(&self) -> f64 {
        1.0 / (self.levels.len() as f64 - 1.0)
    }

    /// Index of the level nearest to `v`; ties go to the smaller index.
    #[inline]
    pub fn nearest_index(&self, v: f64) -> usize {
        let n = self.levels.len();
        let ip = self.levels.partition_point(|&q| q < v);
        if ip == 0 {
            return 0;
        }
        if ip == n {
            return n - 1;
        }
        let lo = ip - 1;
        // v - q_lo >= 0 and q_ip - v >= 0; equality picks the lower level.
        if v - self.levels[lo] <= self.levels[ip] - v {
            lo
        } else {
            ip
        }
    }

    /// Exact level index of `v`, or None if `v` is not a partition value.
    #[inline]
    pub fn exact_index(&self, v: f64) -> Option<usize> {
        let idx = self.nearest_index(v);
        (self.levels[idx] == v).then_some(idx)
    }
}

/// Map integer codes in [0, max_code] to reals in [0, 1] by division.
pub fn normalize_input(dims: Dims, raw: &[u32], max_code: u32) -> Result<GridField> {
    if max_code == 0 {
        return Err(Error::Parameter("max_code > 0".into()));
    }
    if raw.len() != dims.len() {
        return Err(Error::DimensionMismatch {
            left: format!("{} samples", raw.len()),
            right: format!("dims {}", dims),
        });
    }
    let scale = f64::from(max_code);
    let mut data = Vec::with_capacity(raw.len());
    for (index, &v) in raw.iter().enumerate() {
        if v > max_code {
            return Err(Error::InputRange {
                index,
                value: i64::from(v),
                max_code,
            });
        }
        data.push(f64::from(v) / scale);
    }
    GridField::new(dims, data)
}

/// Uniform partition q_i = (i-1)/(Q-1) with endpoints 0 and 1.
pub fn make_partition(q: usize) -> Result<QuantizationPartition> {
    if q < 2 {
        return Err(Error::Parameter("Q >= 2".into()));
    }
    let denom = (q - 1) as f64;
    let levels: Vec<f64> = (0..q).map(|i| i as f64 / denom).collect();
    QuantizationPartition::from_levels(levels)
}

/// Round every value to its nearest partition level (ties to the smaller index).
pub fn round_to_partition(v: &GridField, q: &QuantizationPartition) -> GridField {
    let data = v
        .values()
        .iter()
        .map(|&x| q.levels()[q.nearest_index(x)])
        .collect();
    GridField {
        dims: v.dims(),
        data,
    }
}

/// Pointwise min(1, max(0, v)).
pub fn clamp01(v: &GridField) -> GridField {
    let data = v.values().iter().map(|&x| x.clamp(0.0, 1.0)).collect();
    GridField {
        dims: v.dims(),
        data,
    }
}

/// Euclidean-norm ratio ||u - ref||_2 / ||ref||_2.
pub fn relative_difference(u: &GridField, reference: &GridField) -> Result<f64> {
    if u.dims() != reference.dims() {
        return Err(Error::DimensionMismatch {
            left: u.dims().to_string(),
            right: reference.dims().to_string(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &b) in u.values().iter().zip(reference.values()) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den == 0.0 {
        return Err(Error::DegenerateReference);
    }
    Ok((num / den).sqrt())
}
