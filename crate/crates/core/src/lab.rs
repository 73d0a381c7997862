//! Monte Carlo harness: empirical norm statistics of structured
//! perturbations and empirical checks of the perturbation bounds on small
//! ReLU networks.
//!
//! Every trial draws from its own substream `(seed, trial)` and results are
//! collected in trial order, so output is independent of the thread count.

use rayon::prelude::*;

use crate::bound::{normalize_operators, sigma_for_layers};
use crate::concentration::{bound_bvh, bound_conv, bound_convlike, bound_sparse, TailBound};
use crate::error::{Error, Result};
use crate::fourier::{filter_spectral_norm, operator_spectral_norm};
use crate::linalg::{gaussian_vec, spectral_norm_of, RngStream, DEFAULT_TOL};
use crate::report::{Cell, ExperimentReport};
use crate::structured::{
    build_mask, sample_perturbation, sample_perturbation_sparse, ConvShape, LayerKind, LayerSpec, StructuredOperator,
};

pub const DEFAULT_TRIALS: usize = 100;
pub const DEFAULT_PROBES: [f64; 4] = [0.0, 1.0, 2.0, 3.0];
pub const PROBE_INPUTS: usize = 16;
pub const MAX_REJECTIONS: usize = 1000;
/// Sigma-condition frequencies below this are flagged in reports.
pub const NOTEWORTHY_FREQUENCY: f64 = 0.9;
/// Epsilon used for the BvH reference threshold in sweeps.
pub const SWEEP_BVH_EPSILON: f64 = 0.5;

const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct McSummary {
    pub trials: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub stddev: f64,
    /// Raw per-trial norms in trial order.
    pub norms: Vec<f64>,
    pub probes: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Trials with `norm ≥ threshold(t)` for each probed `t`.
    pub exceed_counts: Vec<usize>,
}

impl McSummary {
    pub fn from_norms(norms: Vec<f64>, bound: &TailBound, probes: &[f64]) -> Result<Self> {
        if norms.is_empty() {
            return Err(Error::invalid("at least one trial is required"));
        }
        let n = norms.len() as f64;
        let mean = norms.iter().sum::<f64>() / n;
        let var = if norms.len() > 1 {
            norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let thresholds: Vec<f64> = probes.iter().map(|&t| bound.threshold(t)).collect();
        let exceed_counts = thresholds
            .iter()
            .map(|&th| norms.iter().filter(|&&v| v >= th).count())
            .collect();
        Ok(Self {
            trials: norms.len(),
            mean,
            min: norms.iter().copied().fold(f64::INFINITY, f64::min),
            max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            stddev: var.sqrt(),
            norms,
            probes: probes.to_vec(),
            thresholds,
            exceed_counts,
        })
    }

    pub fn exceed_frequency(&self, probe_index: usize) -> f64 {
        self.exceed_counts[probe_index] as f64 / self.trials as f64
    }
}

/// How the norm of each sample is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormPath {
    /// Frequency blocks for Conv, sparse power iteration otherwise.
    #[default]
    Auto,
    /// Always materialize the matrix and run power iteration.
    Materialized,
}

/// Default tail bound for a layer kind.
pub fn default_bound(spec: &LayerSpec, sigma: f64) -> Result<TailBound> {
    match spec {
        LayerSpec::DenseSparse { s, .. } => bound_sparse(*s, sigma),
        LayerSpec::ConvLike(c) => bound_convlike(c.a, c.b, c.q, sigma),
        LayerSpec::Conv(c) => bound_conv(c.a, c.b, c.q, c.n, sigma, true),
    }
}

/// Spectral norms of `trials` independent perturbations of `spec`.
pub fn mc_norms(spec: &LayerSpec, sigma: f64, trials: usize, rng: &RngStream, path: NormPath) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    spec.validate()?;
    (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let r = rng.substream(i);
            match (spec, path) {
                (LayerSpec::Conv(c), NormPath::Auto) => {
                    filter_spectral_norm(c, &gaussian_vec(c.b * c.a * c.taps(), sigma, &r))
                }
                (_, NormPath::Auto) => spectral_norm_of(&sample_perturbation_sparse(spec, sigma, &r)?, DEFAULT_TOL),
                (_, NormPath::Materialized) => {
                    spectral_norm_of(&sample_perturbation(spec, sigma, &r)?.to_sparse(), DEFAULT_TOL)
                }
            }
        })
        .collect()
}

pub fn mc_spectral_norm(spec: &LayerSpec, sigma: f64, trials: usize, rng: &RngStream) -> Result<McSummary> {
    mc_spectral_norm_with(spec, sigma, trials, rng, NormPath::Auto, &DEFAULT_PROBES)
}

pub fn mc_spectral_norm_with(
    spec: &LayerSpec,
    sigma: f64,
    trials: usize,
    rng: &RngStream,
    path: NormPath,
    probes: &[f64],
) -> Result<McSummary> {
    let bound = default_bound(spec, sigma)?;
    McSummary::from_norms(mc_norms(spec, sigma, trials, rng, path)?, &bound, probes)
}

pub const SWEEP_SCHEMA: [&str; 10] = [
    "kind",
    "channels",
    "trials",
    "mean",
    "min",
    "max",
    "stddev",
    "spread",
    "theory_t0",
    "bvh_t0",
];

/// Empirical norms for square channel counts `ã = a = b`, with the
/// closed-form `t = 0` threshold and the BvH threshold on the exact mask.
#[allow(clippy::too_many_arguments)]
pub fn channel_sweep(
    kind: LayerKind,
    dim: u32,
    q: usize,
    n: usize,
    channels: &[usize],
    sigma: f64,
    trials: usize,
    rng: &RngStream,
) -> Result<ExperimentReport> {
    if channels.is_empty() {
        return Err(Error::invalid("channel list is empty"));
    }
    let tag = match kind {
        LayerKind::ConvLike => 1,
        LayerKind::Conv => 2,
        LayerKind::DenseSparse => return Err(Error::invalid("channel sweep needs a convolutional kind")),
    };
    let mut report = ExperimentReport::new(&SWEEP_SCHEMA);
    for &c in channels {
        let shape = ConvShape::new(c, c, q, n, dim);
        let spec = match kind {
            LayerKind::Conv => LayerSpec::Conv(shape),
            _ => LayerSpec::ConvLike(shape),
        };
        let s = mc_spectral_norm(&spec, sigma, trials, &rng.substream(tag).substream(c as u64))?;
        let bvh = bound_bvh(&build_mask(&spec)?, SWEEP_BVH_EPSILON, sigma)?;
        report.push(vec![
            kind.as_str().into(),
            c.into(),
            trials.into(),
            s.mean.into(),
            s.min.into(),
            s.max.into(),
            s.stddev.into(),
            (s.max - s.min).into(),
            s.thresholds[0].into(),
            bvh.threshold(0.0).into(),
        ])?;
    }
    report.meta("kind", kind.as_str());
    report.meta("dim", dim);
    report.meta("q", q);
    report.meta("N", n);
    report.meta("sigma", sigma);
    report.meta("trials", trials);
    report.meta("seed", rng.master_seed);
    report.meta("stream", rng.stream_index);
    Ok(report)
}

/// Feedforward ReLU network over structured layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ReluNetwork {
    pub layers: Vec<StructuredOperator>,
    /// Maximum input 2-norm `B`.
    pub input_bound: f64,
}

impl ReluNetwork {
    pub fn new(layers: Vec<StructuredOperator>, input_bound: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        if !(input_bound.is_finite() && input_bound > 0.0) {
            return Err(Error::invalid(format!(
                "input bound must be positive, got {input_bound}"
            )));
        }
        check_composition(&layers.iter().map(|l| l.spec).collect::<Vec<_>>())?;
        Ok(Self { layers, input_bound })
    }

    /// Gaussian weights with entry scale `1/√(nonzeros per row)`, so every
    /// layer has spectral norm of order one.
    pub fn random(specs: &[LayerSpec], input_bound: f64, rng: &RngStream) -> Result<Self> {
        check_composition(specs)?;
        let layers: Result<Vec<_>> = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                spec.validate()?;
                let mask = build_mask(spec)?;
                let per_row = mask.row_counts().into_iter().max().unwrap_or(1).max(1);
                sample_perturbation(spec, 1.0 / (per_row as f64).sqrt(), &rng.substream(i as u64))
            })
            .collect();
        Self::new(layers?, input_bound)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.shape().1
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn spectral_norms(&self) -> Result<Vec<f64>> {
        self.layers.iter().map(operator_spectral_norm).collect()
    }

    /// Network with every layer rescaled to the geometric-mean norm `β`.
    pub fn normalized(&self) -> Result<(ReluNetwork, f64)> {
        let (layers, beta) = normalize_operators(&self.layers)?;
        Ok((ReluNetwork::new(layers, self.input_bound)?, beta))
    }

    /// `Some(β)` when all layer norms agree to within `1e-6` relative.
    pub fn common_norm(&self) -> Result<Option<f64>> {
        let norms = self.spectral_norms()?;
        let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(((hi - lo) <= NORMALIZATION_TOL * hi && lo > 0.0).then_some(hi))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.input_bound * (1.0 + 1e-9) {
            return Err(Error::invalid(format!(
                "input norm {norm} exceeds the bound {}",
                self.input_bound
            )));
        }
        forward_layers(&self.layers, x)
    }
}

fn check_composition(specs: &[LayerSpec]) -> Result<()> {
    for (i, w) in specs.windows(2).enumerate() {
        let (rows, _) = w[0].shape();
        let (_, cols) = w[1].shape();
        if rows != cols {
            return Err(Error::Validation(format!(
                "layer {i} outputs {rows} values but layer {} expects {cols}",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Linear maps with ReLU in between; no activation after the last layer.
pub fn forward_layers(layers: &[StructuredOperator], x: &[f64]) -> Result<Vec<f64>> {
    let mut h = x.to_vec();
    for (i, l) in layers.iter().enumerate() {
        h = l.matrix.matvec(&h)?;
        if i + 1 < layers.len() {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Ok(h)
}

/// Deterministic pseudo-random inputs of norm exactly `B`.
pub fn probe_inputs(dim: usize, input_bound: f64, count: usize, rng: &RngStream) -> Vec<Vec<f64>> {
    (0..count as u64)
        .map(|i| {
            let mut v = gaussian_vec(dim, 1.0, &rng.substream(i));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x *= input_bound / n);
            v
        })
        .collect()
}

fn max_output_change(base: &[Vec<f64>], layers: &[StructuredOperator], inputs: &[Vec<f64>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (x, y0) in inputs.iter().zip(base) {
        let y = forward_layers(layers, x)?;
        let d = y.iter().zip(y0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(d);
    }
    Ok(worst)
}

fn perturb(layers: &[StructuredOperator], sigma: f64, rng: &RngStream) -> Result<(Vec<StructuredOperator>, Vec<f64>)> {
    let mut out = Vec::with_capacity(layers.len());
    let mut norms = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let u = if sigma == 0.0 {
            l.scaled(0.0)
        } else {
            sample_perturbation(&l.spec, sigma, &rng.substream(i as u64))?
        };
        norms.push(operator_spectral_norm(&u)?);
        out.push(l.perturbed_by(&u)?);
    }
    Ok((out, norms))
}

fn check_inputs(net: &ReluNetwork, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if inputs.is_empty() {
        return Err(Error::invalid("no probe inputs"));
    }
    inputs.iter().map(|x| net.forward(x)).collect()
}

/// Noise level at which the largest expected layer perturbation norm is half
/// the `β/d` cap, so rejections are rare but perturbations are not tiny.
pub fn lemma_sigma(net: &ReluNetwork) -> Result<f64> {
    let norms = net.spectral_norms()?;
    let beta = (norms.iter().map(|n| n.ln()).sum::<f64>() / norms.len() as f64).exp();
    let mut worst = 0.0f64;
    for l in &net.layers {
        worst = worst.max(default_bound(&l.spec, 1.0)?.threshold(0.0));
    }
    Ok(0.5 * beta / (net.depth() as f64 * worst))
}

pub const LEMMA_SCHEMA: [&str; 6] = ["trial", "attempts", "lhs", "rhs", "ratio", "violated"];

#[derive(Clone, Debug)]
pub struct LemmaCheck {
    pub report: ExperimentReport,
    pub violations: usize,
    pub max_ratio: f64,
}

/// Compares `max_x |f_{w+u}(x) − f_w(x)|₂` with `e²·B·β^{d−1}·Σ‖Uᵢ‖₂` on a
/// normalized network. Perturbations violating `‖Uᵢ‖₂ ≤ β/d` are resampled.
pub fn check_perturbation_lemma(
    net: &ReluNetwork,
    inputs: &[Vec<f64>],
    sigma: f64,
    trials: usize,
    rng: &RngStream,
) -> Result<LemmaCheck> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let beta = net
        .common_norm()?
        .ok_or_else(|| Error::invalid("network is not normalized: layer spectral norms differ"))?;
    let base = check_inputs(net, inputs)?;
    let d = net.depth();
    let cap = beta / d as f64;
    let scale = std::f64::consts::E.powi(2) * net.input_bound * beta.powi(d as i32 - 1);

    let rows: Result<Vec<(usize, f64, f64)>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let stream = rng.substream(t);
            for attempt in 0..MAX_REJECTIONS {
                let (layers, norms) = perturb(&net.layers, sigma, &stream.substream(attempt as u64))?;
                if norms.iter().all(|&n| n <= cap) {
                    let lhs = max_output_change(&base, &layers, inputs)?;
                    return Ok((attempt + 1, lhs, scale * norms.iter().sum::<f64>()));
                }
            }
            Err(Error::RejectionExhausted {
                attempts: MAX_REJECTIONS,
                what: format!("perturbation with ‖Uᵢ‖₂ ≤ {cap:.6} in trial {t}"),
            })
        })
        .collect();

    let mut report = ExperimentReport::new(&LEMMA_SCHEMA);
    let mut violations = 0;
    let mut max_ratio = 0.0f64;
    for (t, (attempts, lhs, rhs)) in rows?.into_iter().enumerate() {
        let violated = lhs > rhs * (1.0 + 1e-12);
        let ratio = if rhs > 0.0 { lhs / rhs } else { 0.0 };
        violations += violated as usize;
        max_ratio = max_ratio.max(ratio);
        report.push(vec![
            t.into(),
            attempts.into(),
            lhs.into(),
            rhs.into(),
            ratio.into(),
            violated.into(),
        ])?;
    }
    report.meta("sigma", sigma);
    report.meta("beta", beta);
    report.meta("depth", d);
    report.meta("probe_inputs", inputs.len());
    report.meta("violations", violations);
    report.meta("seed", rng.master_seed);
    Ok(LemmaCheck {
        report,
        violations,
        max_ratio,
    })
}

pub const SIGMA_SCHEMA: [&str; 9] = [
    "sigma_multiplier",
    "sigma",
    "trials",
    "frequency",
    "conditioned_trials",
    "conditioned_frequency",
    "max_change",
    "gamma_quarter",
    "noteworthy",
];

#[derive(Clone, Debug)]
pub struct SigmaCheck {
    pub report: ExperimentReport,
    pub sigma: f64,
    pub beta: f64,
    /// Frequency of `max change ≤ γ/4` over all samples.
    pub frequency: f64,
    /// Same, over samples with every `‖Uᵢ‖₂ ≤ β/d`; `None` if there were none.
    pub conditioned_frequency: Option<f64>,
    pub conditioned_trials: usize,
}

struct SigmaRow {
    frequency: f64,
    conditioned_trials: usize,
    conditioned_frequency: Option<f64>,
    max_change: f64,
}

#[allow(clippy::too_many_arguments)]
fn sigma_row(
    net: &ReluNetwork,
    base: &[Vec<f64>],
    inputs: &[Vec<f64>],
    sigma: f64,
    cap: f64,
    gamma: f64,
    trials: usize,
    rng: &RngStream,
) -> Result<SigmaRow> {
    let samples: Result<Vec<(bool, bool, f64)>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let (layers, norms) = perturb(&net.layers, sigma, &rng.substream(t))?;
            let change = max_output_change(base, &layers, inputs)?;
            Ok((change <= gamma / 4.0, norms.iter().all(|&n| n <= cap), change))
        })
        .collect();
    let samples = samples?;
    let ok = samples.iter().filter(|s| s.0).count();
    let cond: Vec<_> = samples.iter().filter(|s| s.1).collect();
    let cond_ok = cond.iter().filter(|s| s.0).count();
    Ok(SigmaRow {
        frequency: ok as f64 / trials as f64,
        conditioned_trials: cond.len(),
        conditioned_frequency: (!cond.is_empty()).then(|| cond_ok as f64 / cond.len() as f64),
        max_change: samples.iter().map(|s| s.2).fold(0.0, f64::max),
    })
}

/// Empirical `P(max_x |f_{w+u}(x) − f_w(x)|₂ ≤ γ/4)` with `u ∼ N(0, σ²)` on
/// the free parameters of the normalized network and σ from the bound's
/// prescription at `β̃ = β`.
///
/// The report has the prescribed σ in its first row and a diagnostic row at
/// `2σ`; only the first enters the returned frequencies.
pub fn check_sigma_condition(
    net: &ReluNetwork,
    inputs: &[Vec<f64>],
    gamma: f64,
    trials: usize,
    rng: &RngStream,
) -> Result<SigmaCheck> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let (normalized, beta) = net.normalized()?;
    let sigma = sigma_for_layers(&normalized.specs(), gamma, net.input_bound, beta);
    check_sigma_condition_at(net, inputs, gamma, sigma, trials, rng)
}

/// [`check_sigma_condition`] at an explicit noise level.
pub fn check_sigma_condition_at(
    net: &ReluNetwork,
    inputs: &[Vec<f64>],
    gamma: f64,
    sigma: f64,
    trials: usize,
    rng: &RngStream,
) -> Result<SigmaCheck> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let (normalized, beta) = net.normalized()?;
    let base = check_inputs(&normalized, inputs)?;
    let d = normalized.depth();
    let cap = beta / d as f64;

    let mut report = ExperimentReport::new(&SIGMA_SCHEMA);
    let mut main = None;
    for (k, mult) in [1.0, 2.0].into_iter().enumerate() {
        let row = sigma_row(
            &normalized,
            &base,
            inputs,
            sigma * mult,
            cap,
            gamma,
            trials,
            &rng.substream(k as u64),
        )?;
        report.push(vec![
            mult.into(),
            (sigma * mult).into(),
            trials.into(),
            row.frequency.into(),
            row.conditioned_trials.into(),
            row.conditioned_frequency.into(),
            row.max_change.into(),
            (gamma / 4.0).into(),
            Cell::Bool(row.frequency < NOTEWORTHY_FREQUENCY),
        ])?;
        main.get_or_insert(row);
    }
    let main = main.expect("first row computed");
    report.meta("gamma", gamma);
    report.meta("beta", beta);
    report.meta("depth", d);
    report.meta("probe_inputs", inputs.len());
    report.meta("seed", rng.master_seed);
    Ok(SigmaCheck {
        report,
        sigma,
        beta,
        frequency: main.frequency,
        conditioned_frequency: main.conditioned_frequency,
        conditioned_trials: main.conditioned_trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, 0)
    }

    #[test]
    fn dense_full_support_mean_below_ambient_level() {
        let s = mc_spectral_norm(&LayerSpec::dense(100, 100, 100), 1.0, 100, &rng(1)).unwrap();
        assert!(s.mean >= 0.85 * 20.0 && s.mean <= 20.0, "{}", s.mean);
        assert!(s.min <= s.mean && s.mean <= s.max);
        assert!(s.exceed_counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn scalar_conv_is_half_normal() {
        let spec = LayerSpec::Conv(ConvShape::new(1, 1, 1, 4, 2));
        let s = mc_spectral_norm(&spec, 1.0, 4000, &rng(2)).unwrap();
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        // standard error of |g| is about 0.6/√4000
        assert!((s.mean - expected).abs() < 0.04, "{}", s.mean);
        for (i, n) in s.norms.iter().enumerate() {
            let g = gaussian_vec(1, 1.0, &rng(2).substream(i as u64))[0];
            assert!((n - g.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_paths_agree() {
        let spec = LayerSpec::Conv(ConvShape::new(2, 3, 3, 6, 2));
        let a = mc_spectral_norm(&spec, 0.5, 20, &rng(3)).unwrap();
        assert_eq!(a, mc_spectral_norm(&spec, 0.5, 20, &rng(3)).unwrap());
        let b = mc_spectral_norm_with(&spec, 0.5, 20, &rng(3), NormPath::Materialized, &DEFAULT_PROBES).unwrap();
        for (x, y) in a.norms.iter().zip(&b.norms) {
            assert!((x - y).abs() <= 1e-7 * x.max(1.0));
        }
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(mc_spectral_norm(&LayerSpec::dense(4, 4, 2), 1.0, 0, &rng(0)).is_err());
    }

    #[test]
    fn sweep_rows_and_monotone_mean() {
        let r = channel_sweep(LayerKind::ConvLike, 1, 3, 16, &[1, 2, 4, 8], 1.0, 30, &rng(4)).unwrap();
        assert_eq!(r.rows.len(), 4);
        let means: Vec<f64> = r.numbers("mean").into_iter().map(Option::unwrap).collect();
        assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
        let max = r.numbers("max");
        let bvh = r.numbers("bvh_t0");
        assert!(max.iter().zip(&bvh).all(|(m, b)| m.unwrap() <= b.unwrap()));
        assert!(channel_sweep(LayerKind::Conv, 1, 3, 16, &[], 1.0, 3, &rng(4)).is_err());
    }

    fn identity_layer(n: usize) -> StructuredOperator {
        let spec = LayerSpec::dense(n, n, 1);
        let mask = build_mask(&spec).unwrap();
        let params = mask
            .entries()
            .iter()
            .map(|&(r, c)| if r == c { 1.0 } else { 0.0 })
            .collect();
        StructuredOperator::from_params(spec, params).unwrap()
    }

    #[test]
    fn forward_basics() {
        let net = ReluNetwork::new(vec![identity_layer(3)], 10.0).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        assert!(net.forward(&[1.0, 2.0]).is_err());
        assert!(net.forward(&[100.0, 0.0, 0.0]).is_err());

        let specs = [
            LayerSpec::dense(6, 5, 3),
            LayerSpec::dense(5, 4, 2),
            LayerSpec::dense(4, 3, 3),
        ];
        let net = ReluNetwork::random(&specs, 5.0, &rng(5)).unwrap();
        assert_eq!(net.forward(&[0.0; 6]).unwrap(), vec![0.0; 3]);
        let x = probe_inputs(6, 1.0, 1, &rng(6)).remove(0);
        let y = net.forward(&x).unwrap();
        let y3 = net.forward(&x.iter().map(|v| v * 3.0).collect::<Vec<_>>()).unwrap();
        for (a, b) in y.iter().zip(&y3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn composition_is_checked() {
        let specs = [LayerSpec::dense(6, 5, 3), LayerSpec::dense(4, 3, 3)];
        let err = ReluNetwork::random(&specs, 1.0, &rng(0)).unwrap_err().to_string();
        assert!(err.contains("layer 0") && err.contains("layer 1"), "{err}");
    }

    #[test]
    fn probes_have_norm_b() {
        for x in probe_inputs(7, 2.5, PROBE_INPUTS, &rng(7)) {
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn lemma_requires_normalization() {
        let specs = [LayerSpec::dense(6, 5, 3), LayerSpec::dense(5, 4, 2)];
        let net = ReluNetwork::random(&specs, 1.0, &rng(8)).unwrap();
        let inputs = probe_inputs(6, 1.0, 4, &rng(9));
        assert!(check_perturbation_lemma(&net, &inputs, 0.01, 5, &rng(1)).is_err());
        let (norm, _) = net.normalized().unwrap();
        let zero = check_perturbation_lemma(&norm, &inputs, 0.0, 3, &rng(1)).unwrap();
        assert_eq!(zero.violations, 0);
        assert_eq!(zero.max_ratio, 0.0);
    }

    #[test]
    fn lemma_single_linear_layer() {
        let spec = LayerSpec::dense(5, 5, 5);
        let net = ReluNetwork::random(&[spec], 2.0, &rng(10)).unwrap();
        let inputs = probe_inputs(5, 2.0, PROBE_INPUTS, &rng(11));
        let c = check_perturbation_lemma(&net, &inputs, 0.05, 50, &rng(12)).unwrap();
        assert_eq!(c.violations, 0);
        // LHS ≤ ‖U‖·B = RHS/e²
        assert!(c.max_ratio <= (-2.0f64).exp() + 1e-12, "{}", c.max_ratio);
    }

    #[test]
    fn lemma_three_layers() {
        let specs = [
            LayerSpec::Conv(ConvShape::new(1, 2, 3, 6, 1)),
            LayerSpec::ConvLike(ConvShape::new(2, 2, 3, 6, 1)),
            LayerSpec::dense(12, 4, 4),
        ];
        let (net, _) = ReluNetwork::random(&specs, 1.0, &rng(13))
            .unwrap()
            .normalized()
            .unwrap();
        let inputs = probe_inputs(6, 1.0, PROBE_INPUTS, &rng(14));
        let c = check_perturbation_lemma(&net, &inputs, 0.05, 200, &rng(15)).unwrap();
        assert_eq!(c.violations, 0);
        assert_eq!(c.report.rows.len(), 200);
    }

    #[test]
    fn rejection_cap_errors() {
        let net = ReluNetwork::new(vec![identity_layer(4)], 1.0).unwrap();
        let inputs = probe_inputs(4, 1.0, 2, &rng(0));
        let err = check_perturbation_lemma(&net, &inputs, 100.0, 1, &rng(0)).unwrap_err();
        assert!(matches!(err, Error::RejectionExhausted { .. }));
    }

    #[test]
    fn sigma_condition_holds() {
        let specs = [
            LayerSpec::Conv(ConvShape::new(1, 2, 3, 8, 2)),
            LayerSpec::dense(128, 10, 13),
        ];
        let net = ReluNetwork::random(&specs, 1.0, &rng(16)).unwrap();
        let inputs = probe_inputs(64, 1.0, PROBE_INPUTS, &rng(17));
        let c = check_sigma_condition(&net, &inputs, 1.0, 200, &rng(18)).unwrap();
        assert!(c.frequency >= 0.5);
        assert_eq!(c.report.rows.len(), 2);
        // margin far above the network scale at the γ = 1 noise level
        let huge = check_sigma_condition_at(&net, &inputs, 1e6, c.sigma, 20, &rng(18)).unwrap();
        assert_eq!(huge.frequency, 1.0);
    }

    #[test]
    fn summary_invariants() {
        let bound = bound_sparse(4, 1.0).unwrap();
        let s = McSummary::from_norms(vec![1.0, 5.0, 3.0], &bound, &DEFAULT_PROBES).unwrap();
        assert_eq!((s.min, s.mean, s.max), (1.0, 3.0, 5.0));
        assert!((s.stddev - 2.0).abs() < 1e-12);
        assert_eq!(s.thresholds, vec![4.0, 5.0, 6.0, 7.0]);
        assert_eq!(s.exceed_counts, vec![1, 1, 0, 0]);
        assert!(McSummary::from_norms(vec![], &bound, &DEFAULT_PROBES).is_err());
    }
}
