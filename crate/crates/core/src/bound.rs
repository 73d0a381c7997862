//! PAC-Bayes generalization bound for sparse and convolutional ReLU networks.
//!
//! The pipeline: normalize layers to a common spectral norm `β`, pick the
//! perturbation level `σ` from the per-layer capacity constants, then turn
//! the KL term into the margin bound
//!
//! ```text
//! L₀ ≤ L̂_γ + √((B²·C1²·Π‖Wᵢ‖₂²·Σ(‖Wᵢ‖_F²/‖Wᵢ‖₂²)/γ² + ln(k·m/δ)) / (m − 1))
//! ```
//!
//! with the big-O constant taken as 1. Every intermediate is reported so a
//! different constant can be applied downstream.

use crate::error::{Error, Result};
use crate::fourier::operator_spectral_norm;
use crate::linalg::{spectral_norm, Matrix, DEFAULT_TOL};
use crate::structured::{LayerSpec, StructuredOperator};

/// Denominator constant in the choice of `σ`.
pub const SIGMA_DENOMINATOR: f64 = 42.0;

/// Ordered layers plus the weight norms the bound needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub spectral_norms: Vec<f64>,
    pub frobenius_norms: Vec<f64>,
}

impl ArchitectureSpec {
    /// Architecture with every spectral and Frobenius norm set to 1.
    pub fn with_unit_norms(name: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        let d = layers.len();
        Self {
            name: name.into(),
            layers,
            spectral_norms: vec![1.0; d],
            frobenius_norms: vec![1.0; d],
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.layers.len();
        if d == 0 {
            return Err(Error::invalid("architecture has no layers"));
        }
        if self.spectral_norms.len() != d || self.frobenius_norms.len() != d {
            return Err(Error::invalid(format!(
                "{d} layers but {} spectral and {} Frobenius norms",
                self.spectral_norms.len(),
                self.frobenius_norms.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate().map_err(|e| Error::invalid(format!("layer {i}: {e}")))?;
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.spectral_norms.iter().all(positive) || !self.frobenius_norms.iter().all(positive) {
            return Err(Error::invalid("all layer norms must be positive and finite"));
        }
        Ok(())
    }

    /// Architecture whose norms are measured from actual layer operators.
    pub fn from_operators(name: impl Into<String>, layers: &[StructuredOperator]) -> Result<Self> {
        let mut spectral = Vec::with_capacity(layers.len());
        for l in layers {
            spectral.push(operator_spectral_norm(l)?);
        }
        Ok(Self {
            name: name.into(),
            layers: layers.iter().map(|l| l.spec).collect(),
            spectral_norms: spectral,
            frobenius_norms: layers.iter().map(StructuredOperator::param_norm).collect(),
        })
    }
}

/// How the confidence term inside the square root is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfidenceTerm {
    /// `ln(k·m/δ)` with `k` the number of output classes.
    ClassCount(usize),
    /// `ln(6m/δ)`.
    Lemma,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInputs {
    /// Margin `γ`.
    pub gamma: f64,
    /// Bound `B` on input 2-norms.
    pub input_bound: f64,
    /// Training-set size.
    pub m: usize,
    pub delta: f64,
    pub confidence: ConfidenceTerm,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.input_bound.is_finite() && self.input_bound > 0.0) {
            return Err(Error::invalid(format!("B must be positive, got {}", self.input_bound)));
        }
        if self.m < 2 {
            return Err(Error::invalid(format!("m must be at least 2, got {}", self.m)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if let ConfidenceTerm::ClassCount(0) = self.confidence {
            return Err(Error::invalid("class count k must be at least 1"));
        }
        Ok(())
    }

    pub fn confidence_log(&self) -> f64 {
        let k = match self.confidence {
            ConfidenceTerm::ClassCount(k) => k as f64,
            ConfidenceTerm::Lemma => 6.0,
        };
        (k * self.m as f64 / self.delta).ln()
    }
}

/// Capacity constant of one layer in a depth-`d` network.
///
/// Conv kinds: `q(√a + √b)`, plus `q√(2 ln(4·N^dim·d))` with log terms.
/// Dense: `2√s`, plus `√(2 ln(2d))` with log terms.
pub fn layer_constant(layer: &LayerSpec, d: usize, with_log_terms: bool) -> f64 {
    let d = d.max(1) as f64;
    match *layer {
        LayerSpec::DenseSparse { s, .. } => {
            let base = 2.0 * (s as f64).sqrt();
            if with_log_terms {
                base + (2.0 * (2.0 * d).ln()).sqrt()
            } else {
                base
            }
        }
        LayerSpec::ConvLike(c) | LayerSpec::Conv(c) => {
            let q = c.q as f64;
            let base = q * ((c.a as f64).sqrt() + (c.b as f64).sqrt());
            if with_log_terms {
                base + q * (2.0 * (4.0 * c.positions() as f64 * d).ln()).sqrt()
            } else {
                base
            }
        }
    }
}

/// Ambient-dimension estimate `√rows + √cols` of the materialized operator.
pub fn ambient_constant(layer: &LayerSpec) -> f64 {
    let (rows, cols) = layer.shape();
    (rows as f64).sqrt() + (cols as f64).sqrt()
}

/// Sum of layer constants.
pub fn c1(layers: &[LayerSpec], with_log_terms: bool) -> f64 {
    let d = layers.len();
    layers.iter().map(|l| layer_constant(l, d, with_log_terms)).sum()
}

pub fn compute_sigma(arch: &ArchitectureSpec, inputs: &BoundInputs, beta_tilde: f64) -> Result<f64> {
    arch.validate()?;
    inputs.validate()?;
    if !(beta_tilde.is_finite() && beta_tilde > 0.0) {
        return Err(Error::invalid(format!("beta_tilde must be positive, got {beta_tilde}")));
    }
    Ok(sigma_for_layers(
        &arch.layers,
        inputs.gamma,
        inputs.input_bound,
        beta_tilde,
    ))
}

/// `γ / (42·B·β̃^{d−1}·C1)` with `C1` including log terms.
pub fn sigma_for_layers(layers: &[LayerSpec], gamma: f64, input_bound: f64, beta_tilde: f64) -> f64 {
    let d = layers.len();
    gamma / (SIGMA_DENOMINATOR * input_bound * beta_tilde.powi(d as i32 - 1) * c1(layers, true))
}

/// `Σᵢ ‖Wᵢ‖_F² / (2σ²)` over free parameters (filter taps for Conv layers).
pub fn kl_term(weights: &[StructuredOperator], sigma: f64) -> Result<f64> {
    kl_from_norms(weights.iter().map(StructuredOperator::param_norm), sigma)
}

/// [`kl_term`] for plain dense matrices.
pub fn kl_term_dense(weights: &[Matrix], sigma: f64) -> Result<f64> {
    kl_from_norms(
        weights
            .iter()
            .map(|w| w.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()),
        sigma,
    )
}

fn kl_from_norms(norms: impl Iterator<Item = f64>, sigma: f64) -> Result<f64> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let sq: f64 = norms.map(|n| n * n).sum();
    Ok(sq / (2.0 * sigma * sigma))
}

/// Rescales every layer to spectral norm `β = (Πᵢ ‖Wᵢ‖₂)^{1/d}`.
pub fn normalize_weights(weights: &[Matrix]) -> Result<(Vec<Matrix>, f64)> {
    let norms: Result<Vec<f64>> = weights.iter().map(|w| spectral_norm(w, DEFAULT_TOL)).collect();
    let norms = norms?;
    let beta = geometric_mean(&norms)?;
    Ok((
        weights.iter().zip(&norms).map(|(w, n)| w.scaled(beta / n)).collect(),
        beta,
    ))
}

/// [`normalize_weights`] for structured layers; Conv layers stay weight-shared.
pub fn normalize_operators(layers: &[StructuredOperator]) -> Result<(Vec<StructuredOperator>, f64)> {
    let norms: Result<Vec<f64>> = layers.iter().map(operator_spectral_norm).collect();
    let norms = norms?;
    let beta = geometric_mean(&norms)?;
    Ok((
        layers.iter().zip(&norms).map(|(l, n)| l.scaled(beta / n)).collect(),
        beta,
    ))
}

fn geometric_mean(norms: &[f64]) -> Result<f64> {
    if norms.is_empty() {
        return Err(Error::invalid("no layers to normalize"));
    }
    if let Some(i) = norms.iter().position(|n| *n <= 0.0) {
        return Err(Error::invalid(format!("layer {i} is zero")));
    }
    Ok((norms.iter().map(|n| n.ln()).sum::<f64>() / norms.len() as f64).exp())
}

/// Every quantity entering the bound, for this work and the ambient baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundBreakdown {
    pub sigma: f64,
    /// Layer constants with log terms.
    pub layer_constants: Vec<f64>,
    pub layer_constants_sq: Vec<f64>,
    /// `C1 = Σ cᵢ` with log terms.
    pub c1: f64,
    /// `Σ cᵢ` without log terms.
    pub c1_no_logs: f64,
    /// KL at the chosen `σ` with `β̃ = β`.
    pub kl: f64,
    /// `B²·C1²·Π‖Wᵢ‖₂²·Σ(‖Wᵢ‖_F²/‖Wᵢ‖₂²)/γ²`.
    pub bound_argument: f64,
    pub confidence_log: f64,
    pub m: usize,
    pub empirical_margin_loss: f64,
    pub bound_value: f64,
    pub baseline_layer_constants: Vec<f64>,
    pub baseline_c1: f64,
    pub baseline_argument: f64,
    pub baseline_value: f64,
}

impl BoundBreakdown {
    /// Bound value recomputed from an argument and the stored fields.
    pub fn value_for(&self, argument: f64) -> f64 {
        self.empirical_margin_loss + ((argument + self.confidence_log) / (self.m as f64 - 1.0)).sqrt()
    }
}

pub fn generalization_bound(
    arch: &ArchitectureSpec,
    inputs: &BoundInputs,
    empirical_margin_loss: f64,
) -> Result<BoundBreakdown> {
    arch.validate()?;
    inputs.validate()?;
    if !(0.0..=1.0).contains(&empirical_margin_loss) {
        return Err(Error::invalid(format!(
            "empirical margin loss must lie in [0, 1], got {empirical_margin_loss}"
        )));
    }
    let d = arch.depth();
    let layer_constants: Vec<f64> = arch.layers.iter().map(|l| layer_constant(l, d, true)).collect();
    let c1: f64 = layer_constants.iter().sum();
    let c1_no_logs = self::c1(&arch.layers, false);
    let baseline_layer_constants: Vec<f64> = arch.layers.iter().map(ambient_constant).collect();
    let baseline_c1: f64 = baseline_layer_constants.iter().sum();

    let prod_sq: f64 = arch.spectral_norms.iter().map(|n| n * n).product();
    let ratio_sum: f64 = arch
        .frobenius_norms
        .iter()
        .zip(&arch.spectral_norms)
        .map(|(f, s)| (f * f) / (s * s))
        .sum();
    let shared = inputs.input_bound.powi(2) * prod_sq * ratio_sum / inputs.gamma.powi(2);
    let bound_argument = c1 * c1 * shared;
    let baseline_argument = baseline_c1 * baseline_c1 * shared;

    let beta = geometric_mean(&arch.spectral_norms)?;
    let sigma = compute_sigma(arch, inputs, beta)?;
    let kl = kl_from_norms(arch.frobenius_norms.iter().copied(), sigma)?;

    let confidence_log = inputs.confidence_log();
    let mut out = BoundBreakdown {
        sigma,
        layer_constants_sq: layer_constants.iter().map(|c| c * c).collect(),
        layer_constants,
        c1,
        c1_no_logs,
        kl,
        bound_argument,
        confidence_log,
        m: inputs.m,
        empirical_margin_loss,
        bound_value: 0.0,
        baseline_layer_constants,
        baseline_c1,
        baseline_argument,
        baseline_value: 0.0,
    };
    out.bound_value = out.value_for(bound_argument);
    out.baseline_value = out.value_for(baseline_argument);
    Ok(out)
}

/// Fraction of samples whose true-class score does not beat every other
/// class by more than `γ`.
pub fn empirical_margin_loss(logits: &[Vec<f64>], labels: &[usize], gamma: f64) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} score vectors but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::invalid(format!("gamma must be non-negative, got {gamma}")));
    }
    let mut losses = 0usize;
    for (k, (scores, &y)) in logits.iter().zip(labels).enumerate() {
        if y >= scores.len() {
            return Err(Error::invalid(format!(
                "sample {k}: label {y} out of range for {} classes",
                scores.len()
            )));
        }
        let runner_up = scores
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != y)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if scores[y] <= gamma + runner_up {
            losses += 1;
        }
    }
    Ok(losses as f64 / logits.len() as f64)
}

/// Multiplicative grid of `β̃` values with ratio `1 + 1/d` covering
/// `[(γ/2B)^{1/d}, (γ√m/2B)^{1/d}]` such that every `β` in range has a grid
/// point within `β/d`.
pub fn beta_grid_cover(gamma: f64, input_bound: f64, d: usize, m: usize) -> Result<(Vec<f64>, usize)> {
    if !(gamma > 0.0 && input_bound > 0.0) || d == 0 || m == 0 {
        return Err(Error::invalid("gamma, B, d and m must be positive"));
    }
    let (lo, hi) = beta_range(gamma, input_bound, d, m);
    let ratio = 1.0 + 1.0 / d as f64;
    let mut grid = vec![lo];
    loop {
        let next = grid.last().unwrap() * ratio;
        if next > hi {
            break;
        }
        grid.push(next);
    }
    let count = grid.len();
    Ok((grid, count))
}

/// The `β` range outside of which the bound holds trivially.
pub fn beta_range(gamma: f64, input_bound: f64, d: usize, m: usize) -> (f64, f64) {
    let inv_d = 1.0 / d as f64;
    let lo = (gamma / (2.0 * input_bound)).powf(inv_d);
    let hi = (gamma * (m as f64).sqrt() / (2.0 * input_bound)).powf(inv_d);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structured::ConvShape;
    use approx::assert_relative_eq;

    fn inputs(gamma: f64, b: f64, m: usize) -> BoundInputs {
        BoundInputs {
            gamma,
            input_bound: b,
            m,
            delta: 0.05,
            confidence: ConfidenceTerm::ClassCount(10),
        }
    }

    #[test]
    fn normalize_examples() {
        let w1 = Matrix::from_diag(&[2.0, 1.0]).unwrap();
        let w2 = Matrix::from_diag(&[8.0, -3.0]).unwrap();
        let (out, beta) = normalize_weights(&[w1, w2]).unwrap();
        assert_relative_eq!(beta, 4.0, max_relative = 1e-12);
        for w in &out {
            assert_relative_eq!(spectral_norm(w, DEFAULT_TOL).unwrap(), 4.0, max_relative = 1e-9);
        }

        let same = Matrix::identity(3).scaled(2.0);
        let (out, beta) = normalize_weights(&[same.clone(), same.clone()]).unwrap();
        assert_relative_eq!(beta, 2.0, max_relative = 1e-12);
        assert_eq!(out[0], same);

        assert!(normalize_weights(&[Matrix::zeros(2, 2)]).is_err());
    }

    #[test]
    fn layer_constant_examples() {
        let conv = LayerSpec::Conv(ConvShape::new(1, 6, 5, 28, 2));
        let c = layer_constant(&conv, 5, false);
        assert_relative_eq!(c, 5.0 * (1.0 + 6f64.sqrt()), max_relative = 1e-14);
        assert!((c - 17.25).abs() < 0.01);
        assert_eq!(layer_constant(&LayerSpec::dense(10, 10, 4), 3, false), 4.0);
        let amb = ambient_constant(&conv);
        assert_eq!(conv.shape(), (4704, 784));
        assert_relative_eq!(amb, 4704f64.sqrt() + 28.0, max_relative = 1e-14);
        assert!((amb - 96.6).abs() < 0.05);

        let with_logs = layer_constant(&LayerSpec::dense(10, 10, 4), 3, true);
        assert_relative_eq!(with_logs, 4.0 + (2.0 * 6f64.ln()).sqrt());
        let conv_logs = layer_constant(&conv, 5, true);
        assert_relative_eq!(conv_logs, c + 5.0 * (2.0 * (4.0 * 784.0 * 5.0f64).ln()).sqrt());
    }

    #[test]
    fn sigma_single_dense_layer() {
        let arch = ArchitectureSpec::with_unit_norms("one", vec![LayerSpec::dense(8, 8, 4)]);
        let s = compute_sigma(&arch, &inputs(1.0, 1.0, 100), 1.0).unwrap();
        let expected = 1.0 / (42.0 * (4.0 + (2.0 * 2f64.ln()).sqrt()));
        assert_relative_eq!(s, expected, max_relative = 1e-14);
        assert!((1.0 / s - 217.4).abs() < 0.1);

        let s2 = compute_sigma(&arch, &inputs(2.0, 1.0, 100), 1.0).unwrap();
        assert_relative_eq!(s2, 2.0 * s, max_relative = 1e-14);
    }

    #[test]
    fn sigma_carries_beta_power() {
        let layers = vec![LayerSpec::dense(8, 8, 4), LayerSpec::dense(8, 8, 4)];
        let arch = ArchitectureSpec::with_unit_norms("two", layers);
        let inp = inputs(1.0, 1.0, 100);
        let one = compute_sigma(&arch, &inp, 1.0).unwrap();
        let two = compute_sigma(&arch, &inp, 2.0).unwrap();
        assert_relative_eq!(one / two, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn kl_examples() {
        let spec = LayerSpec::dense(3, 3, 3);
        let zero = StructuredOperator::from_params(spec, vec![0.0; 9]).unwrap();
        assert_eq!(kl_term(&[zero], 1.0).unwrap(), 0.0);
        let w = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert_eq!(kl_term_dense(&[w], 1.0).unwrap(), 2.0);

        let conv = LayerSpec::Conv(ConvShape::new(2, 3, 2, 6, 2));
        let op = StructuredOperator::from_params(conv, vec![1.0; 24]).unwrap();
        assert!((kl_term(std::slice::from_ref(&op), 1.0).unwrap() - 12.0).abs() < 1e-12);
        // materialized matrix repeats each tap 36 times
        assert!((kl_term_dense(&[op.matrix], 1.0).unwrap() - 12.0 * 36.0).abs() < 1e-9);
    }

    #[test]
    fn bound_scaling() {
        let arch = ArchitectureSpec::with_unit_norms(
            "a",
            vec![
                LayerSpec::Conv(ConvShape::new(3, 8, 3, 16, 2)),
                LayerSpec::dense(2048, 10, 200),
            ],
        );
        let b1 = generalization_bound(&arch, &inputs(1.0, 1.0, 10_000), 0.0).unwrap();
        let b2 = generalization_bound(&arch, &inputs(1.0, 1.0, 20_000), 0.0).unwrap();
        let ratio = b2.bound_value / b1.bound_value;
        assert!((ratio - 0.5f64.sqrt()).abs() < 0.01, "ratio {ratio}");
        assert_relative_eq!(b1.bound_argument, b1.c1 * b1.c1 * 2.0, max_relative = 1e-14);
        assert_relative_eq!(b1.value_for(b1.bound_argument), b1.bound_value);
        assert!(b1.baseline_argument > b1.bound_argument);
        assert_relative_eq!(b1.c1, b1.layer_constants.iter().sum::<f64>());
    }

    #[test]
    fn bound_rejects_small_m() {
        let arch = ArchitectureSpec::with_unit_norms("a", vec![LayerSpec::dense(4, 4, 2)]);
        assert!(generalization_bound(&arch, &inputs(1.0, 1.0, 1), 0.0).is_err());
        assert!(generalization_bound(&arch, &inputs(1.0, 1.0, 10), 1.5).is_err());
    }

    #[test]
    fn margin_loss_examples() {
        let logits = vec![vec![3.0, 1.0, 0.5], vec![0.0, 2.0, -1.0]];
        assert_eq!(empirical_margin_loss(&logits, &[0, 1], 1.0).unwrap(), 0.0);
        assert_eq!(empirical_margin_loss(&logits, &[2, 2], 0.0).unwrap(), 1.0);
        let three = vec![vec![2.0, 0.0], vec![0.5, 0.0], vec![-1.0, 0.0]];
        assert_relative_eq!(empirical_margin_loss(&three, &[0, 0, 0], 1.0).unwrap(), 2.0 / 3.0);
        assert!(empirical_margin_loss(&logits, &[0], 1.0).is_err());
        assert!(empirical_margin_loss(&logits, &[0, 3], 1.0).is_err());
    }

    #[test]
    fn grid_examples() {
        let (lo, _) = beta_range(2.0, 1.0, 1, 100);
        assert_eq!(lo, 1.0);
        let (grid, count) = beta_grid_cover(1.0, 1.0, 3, 10_000).unwrap();
        assert_eq!(grid.len(), count);
        let (_, hi) = beta_range(1.0, 1.0, 3, 10_000);
        assert!(*grid.last().unwrap() <= hi);
        assert!(beta_grid_cover(0.0, 1.0, 3, 10).is_err());
    }
}
