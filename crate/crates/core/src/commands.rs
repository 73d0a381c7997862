//! Experiment commands behind the CLI. Each returns a report, an optional
//! SVG view of it, and the list of invariant failures (empty on success).

use crate::bound::{
    ambient_constant, generalization_bound, layer_constant, ArchitectureSpec, BoundInputs, ConfidenceTerm,
};
use crate::config::{emit_config, ParsedConfig};
use crate::error::{Error, Result};
use crate::lab::{
    channel_sweep, check_perturbation_lemma, check_sigma_condition, lemma_sigma, mc_spectral_norm_with, probe_inputs,
    NormPath, ReluNetwork, DEFAULT_PROBES, NOTEWORTHY_FREQUENCY, PROBE_INPUTS,
};
use crate::linalg::RngStream;
use crate::report::{line_chart_svg, Cell, ExperimentReport, Series};
use crate::structured::{build_mask, LayerKind, LayerSpec};
use crate::zoo::{self, Composition};

#[derive(Clone, Debug)]
pub struct CommandOutput {
    pub report: ExperimentReport,
    pub svg: Option<String>,
    pub failures: Vec<String>,
}

impl CommandOutput {
    fn new(report: ExperimentReport) -> Self {
        Self {
            report,
            svg: None,
            failures: Vec::new(),
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn col(report: &ExperimentReport, name: &str) -> Vec<f64> {
    report
        .numbers(name)
        .into_iter()
        .map(|v| v.unwrap_or(f64::NAN))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Figure3Options {
    pub dim: u32,
    pub q: usize,
    pub n: usize,
    pub channels: Vec<usize>,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for Figure3Options {
    fn default() -> Self {
        Self {
            dim: 1,
            q: 5,
            n: 64,
            channels: vec![1, 2, 4, 8, 16],
            sigma: 1.0,
            trials: 100,
            seed: 0,
        }
    }
}

/// Channel sweeps for conv-like and conv layers.
pub fn figure3(opts: &Figure3Options, svg: bool) -> Result<CommandOutput> {
    let rng = RngStream::new(opts.seed, 0);
    let mut report = channel_sweep(
        LayerKind::ConvLike,
        opts.dim,
        opts.q,
        opts.n,
        &opts.channels,
        opts.sigma,
        opts.trials,
        &rng,
    )?;
    let conv = channel_sweep(
        LayerKind::Conv,
        opts.dim,
        opts.q,
        opts.n,
        &opts.channels,
        opts.sigma,
        opts.trials,
        &rng,
    )?;
    report.extend(conv)?;
    report.metadata.retain(|(k, _)| k == "artifact_version");
    report.meta("command", "figure3");
    report.meta("seed", opts.seed);
    report.meta("dim", opts.dim);
    report.meta("q", opts.q);
    report.meta("N", opts.n);
    report.meta("sigma", opts.sigma);
    report.meta("trials", opts.trials);

    let mut out = CommandOutput::new(report);
    let r = &out.report;
    let (kinds, chans) = (r.strings("kind"), col(r, "channels"));
    let (mean, max, theory, bvh) = (col(r, "mean"), col(r, "max"), col(r, "theory_t0"), col(r, "bvh_t0"));
    for i in 0..kinds.len() {
        if mean[i] > theory[i] {
            out.failures.push(format!(
                "{} channels={}: mean {} above threshold {}",
                kinds[i], chans[i], mean[i], theory[i]
            ));
        }
        if max[i] > bvh[i] {
            out.failures.push(format!(
                "{} channels={}: max {} above BvH threshold {}",
                kinds[i], chans[i], max[i], bvh[i]
            ));
        }
    }
    if svg {
        let (min, colors) = (col(r, "min"), [("conv_like", "#1f77b4"), ("conv", "#d62728")]);
        let mut series = Vec::new();
        for (kind, color) in colors {
            let idx: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] == kind).collect();
            series.push(Series {
                name: format!("{kind} empirical"),
                color: color.into(),
                dashed: false,
                points: idx.iter().map(|&i| (chans[i], mean[i])).collect(),
                band: Some(idx.iter().map(|&i| (chans[i], min[i], max[i])).collect()),
            });
            series.push(Series {
                name: format!("{kind} theory"),
                color: color.into(),
                dashed: true,
                points: idx.iter().map(|&i| (chans[i], theory[i])).collect(),
                band: None,
            });
        }
        out.svg = Some(line_chart_svg(
            "Spectral norm of perturbations",
            "channels",
            "norm",
            &series,
            false,
        ));
    }
    Ok(out)
}

pub const FIGURE4_SCHEMA: [&str; 15] = [
    "network",
    "layer",
    "kind",
    "rows",
    "cols",
    "s",
    "ambient",
    "sparse",
    "conv_like",
    "conv",
    "log10_ambient",
    "log10_sparse",
    "log10_conv_like",
    "log10_conv",
    "ambient_over_conv",
];

/// Squared per-layer constants under the ambient, sparse and conv estimates.
pub fn figure4(arch: &ArchitectureSpec, svg: bool) -> Result<CommandOutput> {
    arch.validate()?;
    let d = arch.depth();
    let mut report = ExperimentReport::new(&FIGURE4_SCHEMA);
    for (i, l) in arch.layers.iter().enumerate() {
        let (rows, cols) = l.shape();
        let ambient = ambient_constant(l).powi(2);
        let (s, conv) = match l {
            LayerSpec::DenseSparse { s, .. } => (*s, None),
            LayerSpec::ConvLike(c) | LayerSpec::Conv(c) => {
                let per_line = c.a.max(c.b) * c.taps();
                (per_line, Some(layer_constant(l, d, false).powi(2)))
            }
        };
        let sparse = 4.0 * s as f64;
        let lg = |v: Option<f64>| Cell::from(v.map(f64::log10));
        report.push(vec![
            arch.name.as_str().into(),
            i.into(),
            l.kind().as_str().into(),
            rows.into(),
            cols.into(),
            s.into(),
            ambient.into(),
            sparse.into(),
            conv.into(),
            conv.into(),
            ambient.log10().into(),
            sparse.log10().into(),
            lg(conv),
            lg(conv),
            conv.map(|c| ambient / c).into(),
        ])?;
    }
    report.meta("command", "figure4");
    report.meta("network", &arch.name);
    let mut out = CommandOutput::new(report);
    if svg {
        let r = &out.report;
        let layer = col(r, "layer");
        let line = |name: &str, color: &str, dashed| Series {
            name: name.into(),
            color: color.into(),
            dashed,
            points: layer
                .iter()
                .zip(col(r, name))
                .filter(|(_, v)| v.is_finite())
                .map(|(&x, v)| (x, v))
                .collect(),
            band: None,
        };
        let series = [
            line("ambient", "#7f7f7f", true),
            line("sparse", "#2ca02c", false),
            line("conv", "#d62728", false),
        ];
        out.svg = Some(line_chart_svg(
            &format!("Layer constants, {}", arch.name),
            "layer",
            "squared constant",
            &series,
            true,
        ));
    }
    Ok(out)
}

pub const TABLE1_SCHEMA: [&str; 14] = [
    "network",
    "depth",
    "c1_ours",
    "c1_ours_logs",
    "c1_baseline",
    "log10_ours",
    "log10_ours_logs",
    "log10_baseline",
    "log10_sum_sq_ours",
    "log10_argument",
    "log10_baseline_argument",
    "sigma",
    "bound_value",
    "baseline_value",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Table1Options {
    pub gamma: f64,
    pub m: usize,
    pub delta: f64,
    pub sparsity: f64,
}

impl Default for Table1Options {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            m: 1_000_000,
            delta: 0.05,
            sparsity: zoo::DEFAULT_DENSE_SPARSITY,
        }
    }
}

/// Bound constants for every zoo network with unit spectral norms.
///
/// `log10_ours` and `log10_baseline` are `log₁₀ C1²` with `C1 = Σ cᵢ`
/// (no log terms); `log10_sum_sq_ours` is `log₁₀ Σ cᵢ²` for comparison.
pub fn table1(opts: &Table1Options) -> Result<CommandOutput> {
    let mut report = ExperimentReport::new(&TABLE1_SCHEMA);
    for entry in zoo::zoo() {
        let entry = entry.with_sparsity(opts.sparsity)?;
        let arch = &entry.arch;
        let inputs = BoundInputs {
            gamma: opts.gamma,
            input_bound: 1.0,
            m: opts.m,
            delta: opts.delta,
            confidence: ConfidenceTerm::ClassCount(entry.classes),
        };
        let b = generalization_bound(arch, &inputs, 0.0)?;
        let d = arch.depth();
        let sum_sq: f64 = arch.layers.iter().map(|l| layer_constant(l, d, false).powi(2)).sum();
        report.push(vec![
            entry.name.into(),
            d.into(),
            b.c1_no_logs.into(),
            b.c1.into(),
            b.baseline_c1.into(),
            (2.0 * b.c1_no_logs.log10()).into(),
            (2.0 * b.c1.log10()).into(),
            (2.0 * b.baseline_c1.log10()).into(),
            sum_sq.log10().into(),
            b.bound_argument.log10().into(),
            b.baseline_argument.log10().into(),
            b.sigma.into(),
            b.bound_value.into(),
            b.baseline_value.into(),
        ])?;
    }
    report.meta("command", "table1");
    report.meta("gamma", opts.gamma);
    report.meta("m", opts.m);
    report.meta("delta", opts.delta);
    report.meta("sparsity", opts.sparsity);
    Ok(CommandOutput::new(report))
}

pub const VALIDATE_SCHEMA: [&str; 7] = ["check", "sigma", "trials", "value", "threshold", "passed", "note"];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ValidateOverrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    /// Noise level for the perturbation-lemma check.
    pub lemma_sigma: Option<f64>,
}

/// Builds the network described by a config: explicit parameters if every
/// layer has them, seeded random weights otherwise.
pub fn network_from_config(cfg: &ParsedConfig, seed: u64) -> Result<ReluNetwork> {
    if cfg.composition != Composition::Strict {
        return Err(Error::invalid("network checks need composition = \"strict\""));
    }
    let net = match cfg.operators()? {
        Some(ops) => ReluNetwork::new(ops, cfg.inputs.input_bound)?,
        None => ReluNetwork::random(&cfg.arch.layers, cfg.inputs.input_bound, &RngStream::new(seed, 0))?,
    };
    if cfg.options.normalize {
        Ok(net.normalized()?.0)
    } else {
        Ok(net)
    }
}

/// Perturbation-lemma and sigma-condition checks on a desk-scale network.
pub fn validate(cfg: &ParsedConfig, ov: &ValidateOverrides) -> Result<CommandOutput> {
    let seed = ov.seed.unwrap_or(cfg.options.seed);
    let trials = ov.trials.unwrap_or(cfg.options.trials);
    let net = network_from_config(cfg, seed)?;
    if net.common_norm()?.is_none() {
        return Err(Error::invalid(
            "network is not normalized: layer spectral norms differ (set experiment.normalize = true)",
        ));
    }
    let inputs = probe_inputs(net.input_dim(), net.input_bound, PROBE_INPUTS, &RngStream::new(seed, 1));
    let ls = match ov.lemma_sigma {
        Some(s) => s,
        None => lemma_sigma(&net)?,
    };
    let lemma = check_perturbation_lemma(&net, &inputs, ls, trials, &RngStream::new(seed, 2))?;
    let gamma = cfg.inputs.gamma;
    let sig = check_sigma_condition(&net, &inputs, gamma, trials, &RngStream::new(seed, 3))?;
    let doubled = sig.report.rows[1][sig.report.column("frequency").expect("schema")].clone();

    let mut report = ExperimentReport::new(&VALIDATE_SCHEMA);
    let note = |f: f64| if f < NOTEWORTHY_FREQUENCY { "below 0.9" } else { "" };
    report.push(vec![
        "lemma_violations".into(),
        ls.into(),
        trials.into(),
        lemma.violations.into(),
        0usize.into(),
        (lemma.violations == 0).into(),
        "".into(),
    ])?;
    report.push(vec![
        "lemma_max_ratio".into(),
        ls.into(),
        trials.into(),
        lemma.max_ratio.into(),
        1.0.into(),
        (lemma.max_ratio <= 1.0).into(),
        "".into(),
    ])?;
    report.push(vec![
        "sigma_frequency".into(),
        sig.sigma.into(),
        trials.into(),
        sig.frequency.into(),
        0.5.into(),
        (sig.frequency >= 0.5).into(),
        note(sig.frequency).into(),
    ])?;
    report.push(vec![
        "sigma_conditioned_frequency".into(),
        sig.sigma.into(),
        sig.conditioned_trials.into(),
        sig.conditioned_frequency.into(),
        0.5.into(),
        sig.conditioned_frequency.map_or(Cell::Empty, |f| (f >= 0.5).into()),
        sig.conditioned_frequency.map_or("no conditioned samples", note).into(),
    ])?;
    report.push(vec![
        "sigma_doubled_frequency".into(),
        (2.0 * sig.sigma).into(),
        trials.into(),
        doubled,
        Cell::Empty,
        Cell::Empty,
        "diagnostic".into(),
    ])?;
    report.meta("command", "validate");
    report.meta("seed", seed);
    report.meta("gamma", gamma);
    report.meta("beta", sig.beta);
    report.meta("probe_inputs", inputs.len());
    report.meta("config", emit_config(cfg)?.replace('\n', "\\n"));

    let mut out = CommandOutput::new(report);
    if lemma.violations > 0 {
        out.failures
            .push(format!("{} perturbation-lemma violations", lemma.violations));
    }
    if sig.frequency < 0.5 {
        out.failures
            .push(format!("sigma-condition frequency {} below 1/2", sig.frequency));
    }
    Ok(out)
}

/// One-off bound evaluation. Measured norms are used when the config has
/// explicit parameters for every layer, unit norms otherwise.
pub fn bound(cfg: &ParsedConfig) -> Result<CommandOutput> {
    let arch = match cfg.operators()? {
        Some(ops) => ArchitectureSpec::from_operators(cfg.arch.name.clone(), &ops)?,
        None => cfg.arch.clone(),
    };
    let b = generalization_bound(&arch, &cfg.inputs, cfg.bound.margin_loss)?;
    let mut report = ExperimentReport::new(&["quantity", "value"]);
    let mut kv = |k: String, v: f64| report.push(vec![k.into(), v.into()]);
    kv("sigma".into(), b.sigma)?;
    kv("c1".into(), b.c1)?;
    kv("c1_no_logs".into(), b.c1_no_logs)?;
    kv("kl".into(), b.kl)?;
    kv("bound_argument".into(), b.bound_argument)?;
    kv("log10_bound_argument".into(), b.bound_argument.log10())?;
    kv("confidence_log".into(), b.confidence_log)?;
    kv("margin_loss".into(), b.empirical_margin_loss)?;
    kv("bound_value".into(), b.bound_value)?;
    kv("baseline_c1".into(), b.baseline_c1)?;
    kv("baseline_argument".into(), b.baseline_argument)?;
    kv("baseline_value".into(), b.baseline_value)?;
    for (i, c) in b.layer_constants.iter().enumerate() {
        kv(format!("layer_{i}_constant"), *c)?;
    }
    report.meta("command", "bound");
    report.meta("norms", if cfg.has_params() { "measured" } else { "unit" });
    report.meta("config", emit_config(cfg)?.replace('\n', "\\n"));
    Ok(CommandOutput::new(report))
}

pub const MC_SCHEMA: [&str; 10] = [
    "t",
    "threshold",
    "tail_prob",
    "exceed_count",
    "exceed_frequency",
    "trials",
    "mean",
    "min",
    "max",
    "stddev",
];

/// Raw Monte Carlo norm statistics for one layer.
pub fn mc(spec: &LayerSpec, sigma: f64, trials: usize, seed: u64, path: NormPath) -> Result<CommandOutput> {
    spec.validate()?;
    let bound = crate::lab::default_bound(spec, sigma)?;
    let s = mc_spectral_norm_with(spec, sigma, trials, &RngStream::new(seed, 0), path, &DEFAULT_PROBES)?;
    let mut report = ExperimentReport::new(&MC_SCHEMA);
    for (i, &t) in s.probes.iter().enumerate() {
        report.push(vec![
            t.into(),
            s.thresholds[i].into(),
            bound.tail_prob(t).into(),
            s.exceed_counts[i].into(),
            s.exceed_frequency(i).into(),
            s.trials.into(),
            s.mean.into(),
            s.min.into(),
            s.max.into(),
            s.stddev.into(),
        ])?;
    }
    report.meta("command", "mc");
    report.meta("seed", seed);
    report.meta("spec", format!("{spec:?}"));
    report.meta("sigma", sigma);
    report.meta("bound", &bound.description);
    report.meta("support", build_mask(spec)?.len());
    Ok(CommandOutput::new(report))
}
