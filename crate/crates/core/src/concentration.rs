//! Closed-form spectral-norm tail bounds for Gaussian perturbations with
//! sparse, banded and convolutional structure.
//!
//! Every bound has the shape `P(‖U‖₂ ≥ threshold(t)) ≤ tail_prob(t)` with
//!
//! ```text
//! threshold(t) = σ · (leading + slope · t)
//! tail_prob(t) = min(1, prefactor · exp(−t² / (2 · scale²)))
//! ```
//!
//! Logarithms are natural throughout.

use crate::error::{Error, Result};
use crate::linalg::{check_sigma, Matrix};
use crate::structured::SupportMask;

/// Rounded value of `2/√2`, the maximum of `√Σcos² + √Σsin²` per unit of
/// `√(q^dim)`, as it enters the union-bound threshold.
pub const CONV_UNION_CONSTANT: f64 = 1.4;

#[derive(Clone, Debug, PartialEq)]
pub struct TailBound {
    /// Threshold at `t = 0` for unit noise level.
    pub leading: f64,
    /// Multiplier of `t` inside the threshold.
    pub slope: f64,
    /// Noise standard deviation.
    pub sigma: f64,
    pub prefactor: f64,
    /// Gaussian tail scale, `exp(−t²/(2·scale²))`.
    pub scale: f64,
    pub description: String,
}

impl TailBound {
    pub fn threshold(&self, t: f64) -> f64 {
        self.sigma * (self.leading + self.slope * t)
    }

    pub fn tail_prob(&self, t: f64) -> f64 {
        (self.prefactor * (-t * t / (2.0 * self.scale * self.scale)).exp()).clamp(0.0, 1.0)
    }

    /// Smallest `t ≥ 0` with `prefactor · exp(−t²/(2·scale²)) ≤ level`.
    pub fn t_for_tail(&self, level: f64) -> f64 {
        if level >= self.prefactor {
            return 0.0;
        }
        self.scale * (2.0 * (self.prefactor / level).ln()).sqrt()
    }

    /// Same bound at a different noise level.
    pub fn with_sigma(&self, sigma: f64) -> TailBound {
        TailBound { sigma, ..self.clone() }
    }
}

fn positive(name: &str, v: usize) -> Result<f64> {
    if v == 0 {
        return Err(Error::invalid(format!("{name} must be at least 1")));
    }
    Ok(v as f64)
}

/// Sparse fully connected layer with row and column sparsity `s`.
pub fn bound_sparse(s: usize, sigma: f64) -> Result<TailBound> {
    let s = positive("s", s)?;
    check_sigma(sigma)?;
    Ok(TailBound {
        leading: 2.0 * s.sqrt(),
        slope: 1.0,
        sigma,
        prefactor: 1.0,
        scale: 1.0,
        description: format!("sparse s={s}"),
    })
}

/// Convolution-like layer: banded support, unshared weights.
pub fn bound_convlike(a: usize, b: usize, q: usize, sigma: f64) -> Result<TailBound> {
    let (a, b, q) = (positive("a", a)?, positive("b", b)?, positive("q", q)?);
    check_sigma(sigma)?;
    Ok(TailBound {
        leading: q * (a.sqrt() + b.sqrt()),
        slope: 1.0,
        sigma,
        prefactor: 1.0,
        scale: 1.0,
        description: format!("conv-like a={a} b={b} q={q}"),
    })
}

/// Weight-shared circular convolution over `N×N` feature maps.
///
/// With `use_conv_constant` the leading term carries the `2/√2 ≈ 1.4`
/// factor from the Re/Im maximization; otherwise the factor is 1.
pub fn bound_conv(a: usize, b: usize, q: usize, n: usize, sigma: f64, use_conv_constant: bool) -> Result<TailBound> {
    let (a, b, q, n) = (
        positive("a", a)?,
        positive("b", b)?,
        positive("q", q)?,
        positive("N", n)?,
    );
    check_sigma(sigma)?;
    let c = if use_conv_constant { CONV_UNION_CONSTANT } else { 1.0 };
    Ok(TailBound {
        leading: c * q * (a.sqrt() + b.sqrt()),
        slope: 1.0,
        sigma,
        prefactor: 2.0 * n * n,
        scale: q,
        description: format!("conv a={a} b={b} q={q} N={n} c={c:.4}"),
    })
}

/// Row/column variance proxies of a weight pattern `ψ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BvhConstants {
    /// `max_i √(Σ_j ψ_ij²)`
    pub sigma1: f64,
    /// `max_j √(Σ_i ψ_ij²)`
    pub sigma2: f64,
    /// `max |ψ_ij|`
    pub sigma_star: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Integer row/column support counts of a 0/1 mask; `σ₁² = max_row`,
/// `σ₂² = max_col`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSums {
    pub max_row: usize,
    pub max_col: usize,
}

pub fn mask_sums(mask: &SupportMask) -> MaskSums {
    MaskSums {
        max_row: mask.row_counts().into_iter().max().unwrap_or(0),
        max_col: mask.col_counts().into_iter().max().unwrap_or(0),
    }
}

pub fn bvh_constants(mask: &SupportMask) -> Result<BvhConstants> {
    if mask.is_empty() {
        return Err(Error::invalid("empty support mask"));
    }
    let sums = mask_sums(mask);
    Ok(BvhConstants {
        sigma1: (sums.max_row as f64).sqrt(),
        sigma2: (sums.max_col as f64).sqrt(),
        sigma_star: 1.0,
        rows: mask.rows(),
        cols: mask.cols(),
    })
}

/// Constants for a general scalar pattern `ψ`.
pub fn bvh_constants_weighted(psi: &Matrix) -> Result<BvhConstants> {
    if !psi.is_finite() {
        return Err(Error::invalid("non-finite weight pattern"));
    }
    let (rows, cols) = psi.shape();
    let mut col_sq = vec![0.0f64; cols];
    let mut row_max = 0.0f64;
    let mut star = 0.0f64;
    for r in 0..rows {
        let mut acc = 0.0;
        for (c, v) in psi.row(r).iter().enumerate() {
            acc += v * v;
            col_sq[c] += v * v;
            star = star.max(v.abs());
        }
        row_max = row_max.max(acc);
    }
    if star == 0.0 {
        return Err(Error::invalid("weight pattern is identically zero"));
    }
    Ok(BvhConstants {
        sigma1: row_max.sqrt(),
        sigma2: col_sq.into_iter().fold(0.0, f64::max).sqrt(),
        sigma_star: star,
        rows,
        cols,
    })
}

/// Bound for `A_ij = σ·ξ_ij·ψ_ij` with independent standard normal `ξ`,
/// given precomputed constants of `ψ`.
pub fn bound_bvh_from_constants(k: &BvhConstants, epsilon: f64, sigma: f64) -> Result<TailBound> {
    if !(epsilon > 0.0 && epsilon <= 0.5) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1/2], got {epsilon}")));
    }
    check_sigma(sigma)?;
    let min_dim = k.rows.min(k.cols) as f64;
    let log_term = 5.0 / (1.0 + epsilon).ln().sqrt() * k.sigma_star * min_dim.ln().sqrt();
    Ok(TailBound {
        leading: (1.0 + epsilon) * (k.sigma1 + k.sigma2 + log_term),
        slope: 1.0 + epsilon,
        sigma,
        prefactor: 1.0,
        scale: k.sigma_star,
        description: format!(
            "bvh eps={epsilon} s1={:.4} s2={:.4} s*={:.4}",
            k.sigma1, k.sigma2, k.sigma_star
        ),
    })
}

pub fn bound_bvh(mask: &SupportMask, epsilon: f64, sigma: f64) -> Result<TailBound> {
    bound_bvh_from_constants(&bvh_constants(mask)?, epsilon, sigma)
}

/// Dense `rows × cols` matrix with i.i.d. `N(0, σ²)` entries.
pub fn bound_gaussian_dense(rows: usize, cols: usize, sigma: f64) -> Result<TailBound> {
    let (r, c) = (positive("rows", rows)?, positive("cols", cols)?);
    check_sigma(sigma)?;
    Ok(TailBound {
        leading: r.sqrt() + c.sqrt(),
        slope: 1.0,
        sigma,
        prefactor: 1.0,
        scale: 1.0,
        description: format!("gaussian dense {rows}x{cols}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structured::{build_mask, ConvShape, LayerSpec};
    use approx::assert_relative_eq;

    #[test]
    fn sparse_examples() {
        let b = bound_sparse(4, 1.0).unwrap();
        assert_eq!(b.threshold(0.0), 4.0);
        let b = bound_sparse(1, 2.0).unwrap();
        assert_eq!(b.threshold(2.0), 8.0);
        assert_relative_eq!(b.tail_prob(2.0), (-2.0f64).exp());
        assert_relative_eq!(
            bound_sparse(100, 1.0).unwrap().threshold(0.0),
            bound_gaussian_dense(100, 100, 1.0).unwrap().threshold(0.0)
        );
    }

    #[test]
    fn convlike_examples() {
        assert_eq!(bound_convlike(1, 1, 1, 1.0).unwrap().threshold(0.0), 2.0);
        assert_relative_eq!(
            bound_convlike(2, 2, 3, 1.0).unwrap().threshold(0.0),
            6.0 * 2f64.sqrt(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn conv_examples() {
        let b = bound_conv(1, 1, 1, 4, 1.0, true).unwrap();
        assert_relative_eq!(b.threshold(0.0), 2.8, max_relative = 1e-15);
        assert_eq!(b.prefactor, 32.0);
        assert_eq!(b.tail_prob(0.0), 1.0);

        let main = bound_conv(3, 5, 2, 6, 1.0, false).unwrap();
        let app = bound_conv(3, 5, 2, 6, 1.0, true).unwrap();
        assert_relative_eq!(app.threshold(0.0) / main.threshold(0.0), CONV_UNION_CONSTANT);
    }

    #[test]
    fn conv_tail_inversion() {
        let (q, n, level) = (3usize, 8usize, 0.05);
        let b = bound_conv(2, 2, q, n, 1.0, true).unwrap();
        let t = q as f64 * (2.0 * (2.0 * (n * n) as f64 / level).ln()).sqrt();
        assert_relative_eq!(b.tail_prob(t), level, max_relative = 1e-12);
        assert_relative_eq!(b.t_for_tail(level), t, max_relative = 1e-12);
    }

    #[test]
    fn bvh_all_ones() {
        let mask = SupportMask::full(16, 16).unwrap();
        let k = bvh_constants(&mask).unwrap();
        assert_eq!((k.sigma1, k.sigma2, k.sigma_star), (4.0, 4.0, 1.0));
        let b = bound_bvh(&mask, 0.5, 1.0).unwrap();
        // independent evaluation of 1.5·(8 + 5/√ln1.5·√ln16)
        let expected = 1.5 * (8.0 + 5.0 / 1.5f64.ln().sqrt() * 16f64.ln().sqrt());
        assert_relative_eq!(b.threshold(0.0), expected, max_relative = 1e-14);
        assert!((b.threshold(0.0) - 31.6).abs() < 0.05);
    }

    #[test]
    fn bvh_convlike_recovers_leading_term() {
        let mask = build_mask(&LayerSpec::ConvLike(ConvShape::new(2, 3, 3, 8, 2))).unwrap();
        let k = bvh_constants(&mask).unwrap();
        assert_relative_eq!(k.sigma1, 3.0 * 2f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(k.sigma2, 3.0 * 3f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(
            k.sigma1 + k.sigma2,
            bound_convlike(2, 3, 3, 1.0).unwrap().threshold(0.0),
            max_relative = 1e-14
        );
    }

    #[test]
    fn bvh_weighted_matches_mask() {
        let mask = build_mask(&LayerSpec::dense(9, 6, 4)).unwrap();
        let mut psi = Matrix::zeros(6, 9);
        for &(r, c) in mask.entries() {
            psi.set(r, c, 1.0);
        }
        assert_eq!(bvh_constants(&mask).unwrap(), bvh_constants_weighted(&psi).unwrap());
        let scaled = bvh_constants_weighted(&psi.scaled(-2.0)).unwrap();
        assert_eq!(scaled.sigma_star, 2.0);
        assert_eq!(scaled.sigma1, 4.0);
    }

    #[test]
    fn bvh_rejects_bad_inputs() {
        let mask = SupportMask::full(2, 2).unwrap();
        assert!(bound_bvh(&mask, 0.0, 1.0).is_err());
        assert!(bound_bvh(&mask, 0.6, 1.0).is_err());
        let empty = SupportMask::new(2, 2, vec![]).unwrap();
        assert!(matches!(bound_bvh(&empty, 0.5, 1.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn dense_examples() {
        assert_eq!(bound_gaussian_dense(100, 100, 1.0).unwrap().threshold(0.0), 20.0);
        assert_eq!(bound_gaussian_dense(1, 1, 1.0).unwrap().threshold(0.0), 2.0);
        let one = bound_gaussian_dense(7, 3, 1.0).unwrap();
        let three = one.with_sigma(3.0);
        assert_relative_eq!(three.threshold(1.5), 3.0 * one.threshold(1.5));
    }

    #[test]
    fn convlike_threshold_independent_of_n() {
        // no N parameter at all; the full BvH term for the mask depends on N only via the log
        let small = build_mask(&LayerSpec::ConvLike(ConvShape::new(2, 2, 3, 4, 2))).unwrap();
        let large = build_mask(&LayerSpec::ConvLike(ConvShape::new(2, 2, 3, 16, 2))).unwrap();
        assert_eq!(
            bvh_constants(&small).unwrap().sigma1,
            bvh_constants(&large).unwrap().sigma1
        );
    }
}
