//! Layer structures, their support masks, and materialized operators.
//!
//! Convolutions are circular with stride 1 and no bias. An operator for a
//! layer with `a` input channels, `b` output channels, filter side `q` and
//! feature-map side `N` has `b·N^dim` rows and `a·N^dim` columns. Row
//! `j·N^dim + p` (output channel `j`, position `p`) reads input channel `i`
//! at position `p ⊕ k` for every filter offset `k ∈ [0, q)^dim`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_sigma, gaussian_vec, Matrix, RngStream, SparseMatrix};

/// Default cap on materialized operator cells.
pub const DEFAULT_MAX_CELLS: usize = 100_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    DenseSparse,
    ConvLike,
    Conv,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::DenseSparse => "dense_sparse",
            LayerKind::ConvLike => "conv_like",
            LayerKind::Conv => "conv",
        }
    }
}

/// Geometry shared by convolution-like and convolutional layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvShape {
    /// Input channels.
    pub a: usize,
    /// Output channels.
    pub b: usize,
    /// Filter side length.
    pub q: usize,
    /// Feature-map side length.
    pub n: usize,
    /// Spatial dimensionality, 1 or 2.
    pub dim: u32,
}

impl ConvShape {
    pub fn new(a: usize, b: usize, q: usize, n: usize, dim: u32) -> Self {
        Self { a, b, q, n, dim }
    }

    /// `N^dim`, the number of spatial positions per channel.
    pub fn positions(&self) -> usize {
        self.n.pow(self.dim)
    }

    /// `q^dim`, the number of taps per filter.
    pub fn taps(&self) -> usize {
        self.q.pow(self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a == 0 || self.b == 0 || self.q == 0 || self.n == 0 {
            return Err(Error::invalid(format!("conv dimensions must be positive: {self:?}")));
        }
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::invalid(format!("dim must be 1 or 2, got {}", self.dim)));
        }
        if self.q > self.n {
            return Err(Error::invalid(format!(
                "filter side q={} exceeds feature-map side N={}",
                self.q, self.n
            )));
        }
        Ok(())
    }

    /// Position reached from `p` after a circular shift by filter offset `k`.
    pub fn shift(&self, p: usize, k: usize) -> usize {
        match self.dim {
            1 => (p + k) % self.n,
            _ => {
                let (p1, p2) = (p / self.n, p % self.n);
                let (k1, k2) = (k / self.q, k % self.q);
                ((p1 + k1) % self.n) * self.n + (p2 + k2) % self.n
            }
        }
    }

    /// Visits every `(row, col, filter_index)` triple of the operator, where
    /// `filter_index` addresses `g[j][i][k]` flattened as `(j·a + i)·q^dim + k`.
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (pos, taps) = (self.positions(), self.taps());
        for j in 0..self.b {
            for p in 0..pos {
                let row = j * pos + p;
                for i in 0..self.a {
                    for k in 0..taps {
                        let col = i * pos + self.shift(p, k);
                        f(row, col, (j * self.a + i) * taps + k);
                    }
                }
            }
        }
    }
}

/// Structural description of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerSpec {
    DenseSparse { d_in: usize, d_out: usize, s: usize },
    ConvLike(ConvShape),
    Conv(ConvShape),
}

impl LayerSpec {
    pub fn dense(d_in: usize, d_out: usize, s: usize) -> Self {
        LayerSpec::DenseSparse { d_in, d_out, s }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::DenseSparse { .. } => LayerKind::DenseSparse,
            LayerSpec::ConvLike(_) => LayerKind::ConvLike,
            LayerSpec::Conv(_) => LayerKind::Conv,
        }
    }

    pub fn conv_shape(&self) -> Option<&ConvShape> {
        match self {
            LayerSpec::ConvLike(c) | LayerSpec::Conv(c) => Some(c),
            LayerSpec::DenseSparse { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::DenseSparse { d_in, d_out, s } => {
                if d_in == 0 || d_out == 0 || s == 0 {
                    return Err(Error::invalid(format!(
                        "dense dimensions and sparsity must be positive: d_in={d_in} d_out={d_out} s={s}"
                    )));
                }
                if s > d_in.max(d_out) {
                    return Err(Error::invalid(format!(
                        "sparsity s={s} exceeds max(d_in, d_out)={}",
                        d_in.max(d_out)
                    )));
                }
                Ok(())
            }
            LayerSpec::ConvLike(c) | LayerSpec::Conv(c) => c.validate(),
        }
    }

    /// Materialized `(rows, cols)`.
    pub fn shape(&self) -> (usize, usize) {
        match *self {
            LayerSpec::DenseSparse { d_in, d_out, .. } => (d_out, d_in),
            LayerSpec::ConvLike(c) | LayerSpec::Conv(c) => (c.b * c.positions(), c.a * c.positions()),
        }
    }

    /// Number of independent Gaussian coordinates in a perturbation.
    pub fn free_parameters(&self) -> usize {
        match *self {
            LayerSpec::DenseSparse { .. } => build_mask(self).map(|m| m.len()).unwrap_or(0),
            LayerSpec::ConvLike(c) => c.b * c.positions() * c.a * c.taps(),
            LayerSpec::Conv(c) => c.b * c.a * c.taps(),
        }
    }
}

/// Binary support pattern: sorted, deduplicated `(row, col)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportMask {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize)>,
}

impl SupportMask {
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize)>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        if let Some(&(r, c)) = entries.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::invalid(format!("mask index ({r}, {c}) outside {rows}x{cols}")));
        }
        entries.sort_unstable();
        entries.dedup();
        Ok(Self { rows, cols, entries })
    }

    /// Every cell of a `rows x cols` matrix.
    pub fn full(rows: usize, cols: usize) -> Result<Self> {
        let entries = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        Self::new(rows, cols, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.entries.binary_search(&(r, c)).is_ok()
    }

    pub fn row_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.rows];
        for &(r, _) in &self.entries {
            counts[r] += 1;
        }
        counts
    }

    pub fn col_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.cols];
        for &(_, c) in &self.entries {
            counts[c] += 1;
        }
        counts
    }

    /// True when no row and no column has more than `s` entries.
    pub fn within_cap(&self, s: usize) -> bool {
        self.row_counts().iter().all(|&n| n <= s) && self.col_counts().iter().all(|&n| n <= s)
    }
}

pub fn build_mask(spec: &LayerSpec) -> Result<SupportMask> {
    spec.validate()?;
    match *spec {
        LayerSpec::DenseSparse { d_in, d_out, s } => {
            // Cyclic band of the max(d_in, d_out) square, cropped to shape.
            let side = d_in.max(d_out);
            let entries = (0..d_out)
                .flat_map(|i| (0..s).map(move |k| (i, (i + k) % side)))
                .filter(|&(_, c)| c < d_in)
                .collect();
            SupportMask::new(d_out, d_in, entries)
        }
        LayerSpec::ConvLike(c) | LayerSpec::Conv(c) => {
            let (rows, cols) = spec.shape();
            let mut entries = Vec::with_capacity(rows * c.a * c.taps());
            c.for_each_tap(|r, col, _| entries.push((r, col)));
            SupportMask::new(rows, cols, entries)
        }
    }
}

/// A materialized layer operator with its support and free parameters.
///
/// `params` holds the independent coordinates: values on the mask (in mask
/// order) for unshared kinds, or the filter tensor `g[j][i][k]` for `Conv`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredOperator {
    pub matrix: Matrix,
    pub mask: SupportMask,
    pub spec: LayerSpec,
    pub params: Vec<f64>,
}

impl StructuredOperator {
    /// Builds an operator from its free parameters.
    pub fn from_params(spec: LayerSpec, params: Vec<f64>) -> Result<Self> {
        Self::from_params_capped(spec, params, DEFAULT_MAX_CELLS)
    }

    pub fn from_params_capped(spec: LayerSpec, params: Vec<f64>, max_cells: usize) -> Result<Self> {
        let (rows, cols) = spec.shape();
        check_cells(rows, cols, max_cells)?;
        let mask = build_mask(&spec)?;
        let expected = match spec {
            LayerSpec::Conv(c) => c.b * c.a * c.taps(),
            _ => mask.len(),
        };
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} free parameters for {spec:?}, got {}",
                params.len()
            )));
        }
        let mut matrix = Matrix::zeros(rows, cols);
        match spec {
            LayerSpec::Conv(c) => c.for_each_tap(|r, col, idx| matrix.set(r, col, params[idx])),
            _ => {
                for (&(r, col), &v) in mask.entries().iter().zip(&params) {
                    matrix.set(r, col, v);
                }
            }
        }
        if !matrix.is_finite() {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(Self {
            matrix,
            mask,
            spec,
            params,
        })
    }

    /// Conv filter value `g[j][i][k]`.
    pub fn filter(&self, j: usize, i: usize, k: usize) -> Option<f64> {
        match self.spec {
            LayerSpec::Conv(c) => Some(self.params[(j * c.a + i) * c.taps() + k]),
            _ => None,
        }
    }

    /// Sparse copy of the materialized matrix.
    pub fn to_sparse(&self) -> SparseMatrix {
        let trips: Vec<_> = self
            .mask
            .entries()
            .iter()
            .map(|&(r, c)| (r, c, self.matrix.get(r, c)))
            .collect();
        SparseMatrix::from_triplets(self.matrix.rows(), self.matrix.cols(), &trips).expect("mask indices are in range")
    }

    /// Elementwise sum with another operator of the same spec.
    pub fn perturbed_by(&self, other: &StructuredOperator) -> Result<StructuredOperator> {
        if self.spec != other.spec || self.params.len() != other.params.len() {
            return Err(Error::invalid("perturbation structure does not match layer"));
        }
        Ok(StructuredOperator {
            matrix: self.matrix.add(&other.matrix)?,
            mask: self.mask.clone(),
            spec: self.spec,
            params: self.params.iter().zip(&other.params).map(|(a, b)| a + b).collect(),
        })
    }

    /// Same structure with every value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> StructuredOperator {
        StructuredOperator {
            matrix: self.matrix.scaled(c),
            mask: self.mask.clone(),
            spec: self.spec,
            params: self.params.iter().map(|v| v * c).collect(),
        }
    }

    /// Frobenius norm over free parameters (filter taps for `Conv`).
    pub fn param_norm(&self) -> f64 {
        self.params.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_cells(rows: usize, cols: usize, max_cells: usize) -> Result<()> {
    match rows.checked_mul(cols) {
        Some(cells) if cells <= max_cells => Ok(()),
        _ => Err(Error::Resource(format!(
            "operator {rows}x{cols} exceeds the cap of {max_cells} cells"
        ))),
    }
}

pub fn sample_perturbation(spec: &LayerSpec, sigma: f64, rng: &RngStream) -> Result<StructuredOperator> {
    sample_perturbation_capped(spec, sigma, rng, DEFAULT_MAX_CELLS)
}

pub fn sample_perturbation_capped(
    spec: &LayerSpec,
    sigma: f64,
    rng: &RngStream,
    max_cells: usize,
) -> Result<StructuredOperator> {
    check_sigma(sigma)?;
    spec.validate()?;
    let (rows, cols) = spec.shape();
    check_cells(rows, cols, max_cells)?;
    let count = match spec {
        LayerSpec::Conv(c) => c.b * c.a * c.taps(),
        _ => build_mask(spec)?.len(),
    };
    StructuredOperator::from_params_capped(*spec, gaussian_vec(count, sigma, rng), max_cells)
}

/// Sparse perturbation without dense materialization. Same values as
/// [`sample_perturbation`] for the same stream.
pub fn sample_perturbation_sparse(spec: &LayerSpec, sigma: f64, rng: &RngStream) -> Result<SparseMatrix> {
    check_sigma(sigma)?;
    let mask = build_mask(spec)?;
    let (rows, cols) = spec.shape();
    let trips: Vec<(usize, usize, f64)> = match spec {
        LayerSpec::Conv(c) => {
            let g = gaussian_vec(c.b * c.a * c.taps(), sigma, rng);
            let mut t = Vec::with_capacity(mask.len());
            c.for_each_tap(|r, col, idx| t.push((r, col, g[idx])));
            t
        }
        _ => {
            let v = gaussian_vec(mask.len(), sigma, rng);
            mask.entries().iter().zip(v).map(|(&(r, c), x)| (r, c, x)).collect()
        }
    };
    SparseMatrix::from_triplets(rows, cols, &trips)
}

/// Greedy magnitude sparsification with at most `s` nonzeros per row and
/// per column. Entries are visited by decreasing magnitude, ties broken by
/// `(row, col)`; an entry survives iff its row and column both have room.
pub fn sparsify(weights: &Matrix, s: usize) -> Result<StructuredOperator> {
    if s == 0 {
        return Err(Error::invalid("sparsity cap s must be at least 1"));
    }
    let (rows, cols) = weights.shape();
    let mut order: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| weights.get(r, c) != 0.0)
        .collect();
    order.sort_by(|&(r1, c1), &(r2, c2)| {
        weights
            .get(r2, c2)
            .abs()
            .total_cmp(&weights.get(r1, c1).abs())
            .then((r1, c1).cmp(&(r2, c2)))
    });

    let mut row_used = vec![0usize; rows];
    let mut col_used = vec![0usize; cols];
    let mut kept = Vec::new();
    for (r, c) in order {
        if row_used[r] < s && col_used[c] < s {
            row_used[r] += 1;
            col_used[c] += 1;
            kept.push((r, c));
        }
    }

    let mask = SupportMask::new(rows, cols, kept)?;
    let mut matrix = Matrix::zeros(rows, cols);
    let params: Vec<f64> = mask
        .entries()
        .iter()
        .map(|&(r, c)| {
            let v = weights.get(r, c);
            matrix.set(r, c, v);
            v
        })
        .collect();
    Ok(StructuredOperator {
        matrix,
        mask,
        spec: LayerSpec::DenseSparse {
            d_in: cols,
            d_out: rows,
            s: s.min(rows.max(cols)),
        },
        params,
    })
}

/// True when every row and column of `m` has at most `s` nonzeros.
pub fn satisfies_sparsity_cap(m: &Matrix, s: usize) -> bool {
    let (rows, cols) = m.shape();
    let mut col_counts = vec![0usize; cols];
    for r in 0..rows {
        let mut n = 0;
        for (c, v) in m.row(r).iter().enumerate() {
            if *v != 0.0 {
                n += 1;
                col_counts[c] += 1;
            }
        }
        if n > s {
            return false;
        }
    }
    col_counts.iter().all(|&n| n <= s)
}

/// Smallest `γ` for which `sparse` is a `(γ, s)`-sparsification of
/// `original` on these samples: the max absolute output difference.
pub fn sparsification_margin(original: &[Vec<f64>], sparse: &[Vec<f64>]) -> Result<f64> {
    if original.len() != sparse.len() {
        return Err(Error::invalid(format!(
            "{} original outputs vs {} sparse outputs",
            original.len(),
            sparse.len()
        )));
    }
    let mut gamma = 0.0f64;
    for (k, (a, b)) in original.iter().zip(sparse).enumerate() {
        if a.len() != b.len() {
            return Err(Error::invalid(format!(
                "sample {k}: output dimension {} vs {}",
                a.len(),
                b.len()
            )));
        }
        for (x, y) in a.iter().zip(b) {
            gamma = gamma.max((x - y).abs());
        }
    }
    Ok(gamma)
}
