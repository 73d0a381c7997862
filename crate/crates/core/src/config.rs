//! TOML network/experiment configuration.
//!
//! ```toml
//! schema_version = 1
//! name = "desk"
//! composition = "strict"      # or "pooled"
//! input_bound = 1.0
//!
//! [[layers]]
//! kind = "conv"               # "dense", "conv_like" or "conv"
//! a = 1
//! b = 2
//! q = 3
//! n = 8
//! dim = 2
//! # params = [...]            # optional free parameters
//!
//! [[layers]]
//! kind = "dense"
//! d_in = 128
//! d_out = 10
//! # s defaults to ⌈(1 − experiment.sparsity)·d_in⌉
//!
//! [bound]
//! gamma = 1.0
//! m = 10000
//! delta = 0.05
//! classes = 10
//! margin_loss = 0.0
//!
//! [experiment]
//! seed = 0
//! trials = 100
//! sparsity = 0.9
//! normalize = true
//! ```

use serde::{Deserialize, Serialize};

use crate::bound::{ArchitectureSpec, BoundInputs, ConfidenceTerm};
use crate::error::{Error, Result};
use crate::lab::DEFAULT_TRIALS;
use crate::structured::{ConvShape, LayerSpec, StructuredOperator};
use crate::zoo::{check_composition, dense_s, Composition, ZooEntry, DEFAULT_DENSE_SPARSITY};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    schema_version: u32,
    name: String,
    #[serde(default)]
    composition: Composition,
    #[serde(default = "one")]
    input_bound: f64,
    layers: Vec<LayerEntry>,
    #[serde(default)]
    bound: BoundSection,
    #[serde(default)]
    experiment: ExperimentOptions,
}

fn one() -> f64 {
    1.0
}

fn two() -> u32 {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerEntry {
    Dense {
        d_in: usize,
        d_out: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        s: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<Vec<f64>>,
    },
    ConvLike {
        a: usize,
        b: usize,
        q: usize,
        n: usize,
        #[serde(default = "two")]
        dim: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<Vec<f64>>,
    },
    Conv {
        a: usize,
        b: usize,
        q: usize,
        n: usize,
        #[serde(default = "two")]
        dim: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSection {
    pub gamma: f64,
    pub m: usize,
    pub delta: f64,
    pub classes: usize,
    pub margin_loss: f64,
}

impl Default for BoundSection {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            m: 10_000,
            delta: 0.05,
            classes: 10,
            margin_loss: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentOptions {
    pub seed: u64,
    pub trials: usize,
    pub sparsity: f64,
    /// Rescale layers to equal spectral norms before the lemma checks.
    pub normalize: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: DEFAULT_TRIALS,
            sparsity: DEFAULT_DENSE_SPARSITY,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedConfig {
    /// Unit norms; see [`ParsedConfig::operators`] for measured ones.
    pub arch: ArchitectureSpec,
    pub composition: Composition,
    pub inputs: BoundInputs,
    pub bound: BoundSection,
    pub options: ExperimentOptions,
    /// Explicit free parameters per layer, if given.
    pub params: Vec<Option<Vec<f64>>>,
}

impl ParsedConfig {
    pub fn has_params(&self) -> bool {
        self.params.iter().all(Option::is_some)
    }

    /// Operators built from explicit parameters; `None` unless every layer has them.
    pub fn operators(&self) -> Result<Option<Vec<StructuredOperator>>> {
        if !self.has_params() {
            return Ok(None);
        }
        let ops: Result<Vec<_>> = self
            .arch
            .layers
            .iter()
            .zip(&self.params)
            .enumerate()
            .map(|(i, (l, p))| {
                StructuredOperator::from_params(*l, p.clone().expect("checked"))
                    .map_err(|e| Error::Validation(format!("layer {i}: {e}")))
            })
            .collect();
        ops.map(Some)
    }

    /// Config for a zoo network with its bound defaults.
    pub fn from_zoo(entry: &ZooEntry) -> Self {
        let bound = BoundSection {
            classes: entry.classes,
            ..BoundSection::default()
        };
        Self {
            arch: entry.arch.clone(),
            composition: Composition::Pooled,
            inputs: bound_inputs(&bound, 1.0),
            bound,
            options: ExperimentOptions {
                sparsity: entry.dense_sparsity,
                ..ExperimentOptions::default()
            },
            params: vec![None; entry.arch.depth()],
        }
    }
}

fn bound_inputs(b: &BoundSection, input_bound: f64) -> BoundInputs {
    BoundInputs {
        gamma: b.gamma,
        input_bound,
        m: b.m,
        delta: b.delta,
        confidence: ConfidenceTerm::ClassCount(b.classes),
    }
}

pub fn parse_config(text: &str) -> Result<ParsedConfig> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "unsupported schema_version {}; expected {SCHEMA_VERSION}",
            file.schema_version
        )));
    }
    let o = file.experiment;
    if !(0.0..1.0).contains(&o.sparsity) {
        return Err(Error::Validation(format!(
            "experiment.sparsity must lie in [0, 1), got {}",
            o.sparsity
        )));
    }
    if o.trials == 0 {
        return Err(Error::Validation("experiment.trials must be at least 1".into()));
    }
    if file.layers.is_empty() {
        return Err(Error::Validation("at least one [[layers]] entry is required".into()));
    }
    if !(0.0..=1.0).contains(&file.bound.margin_loss) {
        return Err(Error::Validation("bound.margin_loss must lie in [0, 1]".into()));
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    let mut params = Vec::with_capacity(file.layers.len());
    for entry in file.layers {
        let (spec, p) = match entry {
            LayerEntry::Dense { d_in, d_out, s, params } => (
                LayerSpec::dense(d_in, d_out, s.unwrap_or_else(|| dense_s(d_in.max(1), o.sparsity))),
                params,
            ),
            LayerEntry::ConvLike {
                a,
                b,
                q,
                n,
                dim,
                params,
            } => (LayerSpec::ConvLike(ConvShape::new(a, b, q, n, dim)), params),
            LayerEntry::Conv {
                a,
                b,
                q,
                n,
                dim,
                params,
            } => (LayerSpec::Conv(ConvShape::new(a, b, q, n, dim)), params),
        };
        layers.push(spec);
        params.push(p);
    }
    check_composition(&layers, file.composition)?;
    for (i, (l, p)) in layers.iter().zip(&params).enumerate() {
        if let Some(p) = p {
            let expected = l.free_parameters();
            if p.len() != expected {
                return Err(Error::Validation(format!(
                    "layer {i}: expected {expected} params, got {}",
                    p.len()
                )));
            }
        }
    }
    let inputs = bound_inputs(&file.bound, file.input_bound);
    inputs.validate().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(ParsedConfig {
        arch: ArchitectureSpec::with_unit_norms(file.name, layers),
        composition: file.composition,
        inputs,
        bound: file.bound,
        options: o,
        params,
    })
}

pub fn load_config(path: &std::path::Path) -> Result<ParsedConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Canonical TOML with every default written out.
pub fn emit_config(cfg: &ParsedConfig) -> Result<String> {
    let layers = cfg
        .arch
        .layers
        .iter()
        .zip(&cfg.params)
        .map(|(l, p)| match *l {
            LayerSpec::DenseSparse { d_in, d_out, s } => LayerEntry::Dense {
                d_in,
                d_out,
                s: Some(s),
                params: p.clone(),
            },
            LayerSpec::ConvLike(c) => LayerEntry::ConvLike {
                a: c.a,
                b: c.b,
                q: c.q,
                n: c.n,
                dim: c.dim,
                params: p.clone(),
            },
            LayerSpec::Conv(c) => LayerEntry::Conv {
                a: c.a,
                b: c.b,
                q: c.q,
                n: c.n,
                dim: c.dim,
                params: p.clone(),
            },
        })
        .collect();
    let file = ConfigFile {
        schema_version: SCHEMA_VERSION,
        name: cfg.arch.name.clone(),
        composition: cfg.composition,
        input_bound: cfg.inputs.input_bound,
        layers,
        bound: cfg.bound,
        experiment: cfg.options,
    };
    toml::to_string(&file).map_err(|e| Error::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "one"

[[layers]]
kind = "dense"
d_in = 20
d_out = 5
"#;

    #[test]
    fn minimal_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.arch.layers, vec![LayerSpec::dense(20, 5, 2)]);
        assert_eq!(c.inputs.input_bound, 1.0);
        assert_eq!(c.options, ExperimentOptions::default());
        assert_eq!(c.bound, BoundSection::default());
        assert!(!c.has_params());
    }

    #[test]
    fn unknown_fields_rejected_with_location() {
        let bad = MINIMAL.replace("d_out = 5", "d_out = 5\nwidth = 3");
        let err = parse_config(&bad).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        let msg = err.to_string();
        assert!(msg.contains("width") && msg.contains("line"), "{msg}");
        let bad = format!("{MINIMAL}\n[experiment]\nseeds = 3\n");
        assert!(parse_config(&bad).is_err());
        assert!(parse_config(&MINIMAL.replace("schema_version = 1", "schema_version = 7")).is_err());
    }

    #[test]
    fn q_above_n_is_a_validation_error() {
        let text = r#"
schema_version = 1
name = "c"
[[layers]]
kind = "conv"
a = 1
b = 1
q = 5
n = 4
"#;
        assert!(matches!(parse_config(text).unwrap_err(), Error::Validation(_)));
    }

    #[test]
    fn non_composing_layers_named() {
        let text = format!("{MINIMAL}\n[[layers]]\nkind = \"dense\"\nd_in = 6\nd_out = 2\n");
        let err = parse_config(&text).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("layer 0") && msg.contains("layer 1"), "{msg}");
    }

    #[test]
    fn round_trip() {
        let text = r#"
schema_version = 1
name = "rt"
input_bound = 2.0
[[layers]]
kind = "conv"
a = 1
b = 2
q = 2
n = 3
dim = 1
params = [0.5, -1.0, 0.25, 2.0]
[[layers]]
kind = "conv_like"
a = 2
b = 1
q = 3
n = 3
dim = 1
[[layers]]
kind = "dense"
d_in = 3
d_out = 2
[bound]
gamma = 0.5
classes = 2
[experiment]
seed = 9
"#;
        let c = parse_config(text).unwrap();
        let emitted = emit_config(&c).unwrap();
        let again = parse_config(&emitted).unwrap();
        assert_eq!(c, again);
        assert_eq!(emitted, emit_config(&again).unwrap());
        assert!(c.operators().unwrap().is_none());
    }

    #[test]
    fn zoo_configs_round_trip() {
        for e in crate::zoo::zoo() {
            let c = ParsedConfig::from_zoo(&e);
            assert_eq!(parse_config(&emit_config(&c).unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn wrong_param_count() {
        let text = MINIMAL.replace("d_out = 5", "d_out = 5\nparams = [1.0]");
        assert!(matches!(parse_config(&text).unwrap_err(), Error::Validation(_)));
    }
}
