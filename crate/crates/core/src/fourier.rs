//! Exact spectral norms of multi-channel circular convolutions.
//!
//! A circular convolution from `a` to `b` channels is block-diagonalized by
//! the `dim`-dimensional DFT: at every frequency `n` it acts as the `b×a`
//! complex matrix `B̃_n` whose `(j, i)` entry is the DFT of filter `g[j][i]`
//! (zero-padded to `N^dim`). Its spectral norm is `max_n ‖B̃_n‖₂`.
//!
//! The operator built in [`crate::structured`] reads `x[p ⊕ k]`, so its
//! frequency response at `n` is `conj(λ_n) = λ_{−n}` for real filters. The
//! set of blocks, and therefore the norm, is the same.

use rayon::prelude::*;

use crate::concentration::CONV_UNION_CONSTANT;
use crate::error::{Error, Result};
use crate::linalg::{check_sigma, spectral_norm, spectral_norm_of, Matrix, DEFAULT_TOL};
use crate::structured::{ConvShape, LayerSpec, StructuredOperator};

/// One `b×a` complex block, stored as real and imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyBlock {
    /// Frequency multi-index, `dim` entries in `[0, N)`.
    pub index: Vec<usize>,
    pub re: Matrix,
    pub im: Matrix,
}

impl FrequencyBlock {
    /// The real `2b×2a` embedding `[[Re, −Im], [Im, Re]]`, whose singular
    /// values are those of the complex block, each repeated twice.
    pub fn real_embedding(&self) -> Matrix {
        let (b, a) = self.re.shape();
        let mut e = Matrix::zeros(2 * b, 2 * a);
        for j in 0..b {
            for i in 0..a {
                let (re, im) = (self.re.get(j, i), self.im.get(j, i));
                e.set(j, i, re);
                e.set(j, a + i, -im);
                e.set(b + j, i, im);
                e.set(b + j, a + i, re);
            }
        }
        e
    }

    pub fn spectral_norm(&self) -> Result<f64> {
        spectral_norm(&self.real_embedding(), DEFAULT_TOL)
    }
}

fn conv_shape(op: &StructuredOperator) -> Result<ConvShape> {
    match op.spec {
        LayerSpec::Conv(c) => Ok(c),
        other => Err(Error::invalid(format!(
            "frequency analysis needs a Conv operator, got {:?}",
            other.kind()
        ))),
    }
}

/// Frequency multi-indices in row-major order.
fn frequencies(shape: &ConvShape) -> Vec<Vec<usize>> {
    let n = shape.n;
    match shape.dim {
        1 => (0..n).map(|f| vec![f]).collect(),
        _ => (0..n * n).map(|f| vec![f / n, f % n]).collect(),
    }
}

/// Filter offsets `k` as multi-indices, in the flattened tap order.
fn offsets(shape: &ConvShape) -> Vec<Vec<usize>> {
    let q = shape.q;
    match shape.dim {
        1 => (0..q).map(|k| vec![k]).collect(),
        _ => (0..q * q).map(|k| vec![k / q, k % q]).collect(),
    }
}

/// DFT phase `2π(k·n mod N)/N`; reducing mod `N` first keeps it exact.
fn phase(k: &[usize], freq: &[usize], n: usize) -> f64 {
    let dot: usize = k.iter().zip(freq).map(|(a, b)| a * b).sum();
    2.0 * std::f64::consts::PI * (dot % n) as f64 / n as f64
}

fn block_at(shape: &ConvShape, params: &[f64], freq: &[usize], taps: &[Vec<usize>]) -> FrequencyBlock {
    let mut re = Matrix::zeros(shape.b, shape.a);
    let mut im = Matrix::zeros(shape.b, shape.a);
    let (cs, sn): (Vec<f64>, Vec<f64>) = taps
        .iter()
        .map(|k| {
            let t = phase(k, freq, shape.n);
            (t.cos(), t.sin())
        })
        .unzip();
    let ntaps = taps.len();
    for j in 0..shape.b {
        for i in 0..shape.a {
            let g = &params[(j * shape.a + i) * ntaps..(j * shape.a + i + 1) * ntaps];
            let (mut r, mut m) = (0.0, 0.0);
            for ((gk, c), s) in g.iter().zip(&cs).zip(&sn) {
                r += gk * c;
                m -= gk * s;
            }
            re.set(j, i, r);
            im.set(j, i, m);
        }
    }
    FrequencyBlock {
        index: freq.to_vec(),
        re,
        im,
    }
}

/// All `N^dim` frequency blocks of a Conv operator.
pub fn frequency_blocks(op: &StructuredOperator) -> Result<Vec<FrequencyBlock>> {
    let shape = conv_shape(op)?;
    Ok(blocks_from_filter(&shape, &op.params))
}

/// Frequency blocks straight from a filter tensor `g[j][i][k]`.
pub fn blocks_from_filter(shape: &ConvShape, params: &[f64]) -> Vec<FrequencyBlock> {
    let taps = offsets(shape);
    frequencies(shape)
        .par_iter()
        .map(|f| block_at(shape, params, f, &taps))
        .collect()
}

/// Spectral norm of a Conv operator as `max_n ‖B̃_n‖₂`.
pub fn conv_spectral_norm_fft(op: &StructuredOperator) -> Result<f64> {
    let shape = conv_shape(op)?;
    filter_spectral_norm(&shape, &op.params)
}

/// Same as [`conv_spectral_norm_fft`] without materializing the operator.
pub fn filter_spectral_norm(shape: &ConvShape, params: &[f64]) -> Result<f64> {
    shape.validate()?;
    if params.len() != shape.b * shape.a * shape.taps() {
        return Err(Error::invalid("filter tensor size does not match shape"));
    }
    let taps = offsets(shape);
    let norms: Result<Vec<f64>> = frequencies(shape)
        .par_iter()
        .map(|f| block_at(shape, params, f, &taps).spectral_norm())
        .collect();
    Ok(norms?.into_iter().fold(0.0, f64::max))
}

/// Spectral norm of any structured operator: frequency blocks for `Conv`,
/// sparse power iteration otherwise.
pub fn operator_spectral_norm(op: &StructuredOperator) -> Result<f64> {
    match op.spec {
        LayerSpec::Conv(c) => filter_spectral_norm(&c, &op.params),
        _ => spectral_norm_of(&op.to_sparse(), DEFAULT_TOL),
    }
}

/// `max_n (‖Re B̃_n‖₂ + ‖Im B̃_n‖₂)`, the upper bound used to split a
/// complex block into two real Gaussian matrices.
pub fn reim_split_bound(op: &StructuredOperator) -> Result<f64> {
    let blocks = frequency_blocks(op)?;
    let mut best = 0.0f64;
    for b in &blocks {
        best = best.max(spectral_norm(&b.re, DEFAULT_TOL)? + spectral_norm(&b.im, DEFAULT_TOL)?);
    }
    Ok(best)
}

/// Per-frequency standard deviations of `Re λ_n` and `Im λ_n` for unit
/// i.i.d. filter taps.
#[derive(Clone, Debug, PartialEq)]
pub struct ReImVariances {
    pub index: Vec<Vec<usize>>,
    pub sigma_re: Vec<f64>,
    pub sigma_im: Vec<f64>,
}

impl ReImVariances {
    /// `max_n (σ_re,n + σ_im,n)`.
    pub fn max_sum(&self) -> f64 {
        self.sigma_re
            .iter()
            .zip(&self.sigma_im)
            .map(|(r, i)| r + i)
            .fold(0.0, f64::max)
    }
}

pub fn reim_variances(spec: &LayerSpec) -> Result<ReImVariances> {
    let shape = match spec {
        LayerSpec::Conv(c) => *c,
        other => {
            return Err(Error::invalid(format!(
                "Re/Im variances need a Conv spec, got {:?}",
                other.kind()
            )))
        }
    };
    shape.validate()?;
    let taps = offsets(&shape);
    let index = frequencies(&shape);
    let (sigma_re, sigma_im) = index
        .iter()
        .map(|f| {
            let phases: Vec<f64> = taps.iter().map(|k| phase(k, f, shape.n)).collect();
            reim_split(&phases)
        })
        .unzip();
    Ok(ReImVariances {
        index,
        sigma_re,
        sigma_im,
    })
}

/// `(√Σcos²θ, √Σsin²θ)` over a phase vector.
pub fn reim_split(phases: &[f64]) -> (f64, f64) {
    let c: f64 = phases.iter().map(|t| t.cos().powi(2)).sum();
    let s: f64 = phases.iter().map(|t| t.sin().powi(2)).sum();
    (c.sqrt(), s.sqrt())
}

/// Threshold `τ` with `P(‖U‖₂ ≤ τ) ≥ 1 − T`, from a union bound over the
/// frequency events (`N²` in 2d, `N` in 1d):
///
/// ```text
/// τ = σ · 1.4 · q · (√a + √b + √(2 ln(2·events / T)))
/// ```
pub fn union_bound_threshold(spec: &LayerSpec, sigma: f64, confidence_t: f64) -> Result<f64> {
    let shape = match spec {
        LayerSpec::Conv(c) => *c,
        other => {
            return Err(Error::invalid(format!(
                "union bound needs a Conv spec, got {:?}",
                other.kind()
            )))
        }
    };
    shape.validate()?;
    check_sigma(sigma)?;
    if !(confidence_t > 0.0 && confidence_t < 1.0) {
        return Err(Error::invalid(format!("T must lie in (0, 1), got {confidence_t}")));
    }
    let events = shape.positions() as f64;
    let (a, b, q) = (shape.a as f64, shape.b as f64, shape.q as f64);
    Ok(sigma * CONV_UNION_CONSTANT * q * (a.sqrt() + b.sqrt() + (2.0 * (2.0 * events / confidence_t).ln()).sqrt()))
}
