//! Canonical feedforward architectures.
//!
//! Sources for the layer shapes:
//! - LeNet-5: LeCun et al. 1998 (28×28 input padded per the common variant,
//!   5×5 filters, 6 and 16 channels, dense 400→120→84→10).
//! - AlexNet: Krizhevsky et al. 2012, single-tower channel counts
//!   (96, 256, 384, 384, 256), feature maps 55, 27, 13, 13, 13, dense
//!   9216→4096→4096→1000.
//! - VGG-16: Simonyan & Zisserman 2015, configuration D, 3×3 filters on
//!   224, 112, 56, 28, 14 maps, dense 25088→4096→4096→1000.
//!
//! Pooling and strides are not modelled, so these networks compose by
//! channel count rather than by exact operator shape; see [`Composition`].

use serde::{Deserialize, Serialize};

use crate::bound::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::structured::{ConvShape, LayerSpec};

pub const DEFAULT_DENSE_SPARSITY: f64 = 0.9;

/// How adjacent layers must fit together.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// Output size of each layer equals the input size of the next.
    #[default]
    Strict,
    /// Conv outputs may be spatially pooled: channels must match, feature
    /// maps may only shrink, and a dense layer after a conv layer takes
    /// `b·m^dim` inputs for some `m ≤ N`.
    Pooled,
}

fn describe(i: usize, l: &LayerSpec) -> String {
    match l {
        LayerSpec::DenseSparse { d_in, d_out, s } => format!("layer {i} (dense {d_in}->{d_out}, s={s})"),
        LayerSpec::ConvLike(c) | LayerSpec::Conv(c) => format!(
            "layer {i} ({} {}->{} channels, q={}, N={}, dim={})",
            l.kind().as_str(),
            c.a,
            c.b,
            c.q,
            c.n,
            c.dim
        ),
    }
}

fn is_power(x: usize, base_max: usize, dim: u32) -> bool {
    (1..=base_max).any(|m| m.checked_pow(dim) == Some(x))
}

/// Checks each layer and every adjacent pair; errors name both layers.
pub fn check_composition(layers: &[LayerSpec], mode: Composition) -> Result<()> {
    for (i, l) in layers.iter().enumerate() {
        l.validate()
            .map_err(|e| Error::Validation(format!("{}: {e}", describe(i, l))))?;
    }
    for (i, w) in layers.windows(2).enumerate() {
        let (prev, next) = (&w[0], &w[1]);
        let fits = match (mode, prev.conv_shape(), next.conv_shape()) {
            (Composition::Strict, _, _) | (_, None, _) => prev.shape().0 == next.shape().1,
            (Composition::Pooled, Some(p), Some(n)) => p.b == n.a && n.n <= p.n && n.dim == p.dim,
            (Composition::Pooled, Some(p), None) => {
                let (_, d_in) = next.shape();
                d_in % p.b == 0 && is_power(d_in / p.b, p.n, p.dim)
            }
        };
        if !fits {
            return Err(Error::Validation(format!(
                "{} does not compose with {} ({} outputs vs {} inputs)",
                describe(i, prev),
                describe(i + 1, next),
                prev.shape().0,
                next.shape().1
            )));
        }
    }
    Ok(())
}

/// Row/column sparsity for a dense layer: `⌈(1 − sparsity)·d_in⌉`, at least 1.
pub fn dense_s(d_in: usize, sparsity: f64) -> usize {
    (((1.0 - sparsity) * d_in as f64).ceil() as usize).clamp(1, d_in)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZooEntry {
    pub name: &'static str,
    pub source: &'static str,
    pub arch: ArchitectureSpec,
    pub dense_sparsity: f64,
    /// Output classes, used for the confidence term.
    pub classes: usize,
}

impl ZooEntry {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        check_composition(&self.arch.layers, Composition::Pooled)
    }

    /// Same network with dense-layer sparsity recomputed.
    pub fn with_sparsity(&self, sparsity: f64) -> Result<ZooEntry> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::invalid(format!("sparsity must lie in [0, 1), got {sparsity}")));
        }
        let layers = self
            .arch
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::DenseSparse { d_in, d_out, .. } => LayerSpec::dense(d_in, d_out, dense_s(d_in, sparsity)),
                other => other,
            })
            .collect();
        let entry = ZooEntry {
            arch: ArchitectureSpec::with_unit_norms(self.name, layers),
            dense_sparsity: sparsity,
            ..self.clone()
        };
        entry.validate()?;
        Ok(entry)
    }
}

fn build(
    name: &'static str,
    source: &'static str,
    classes: usize,
    convs: &[(usize, usize, usize, usize)],
    dense: &[(usize, usize)],
) -> ZooEntry {
    let mut layers: Vec<LayerSpec> = convs
        .iter()
        .map(|&(a, b, q, n)| LayerSpec::Conv(ConvShape::new(a, b, q, n, 2)))
        .collect();
    layers.extend(
        dense
            .iter()
            .map(|&(i, o)| LayerSpec::dense(i, o, dense_s(i, DEFAULT_DENSE_SPARSITY))),
    );
    ZooEntry {
        name,
        source,
        arch: ArchitectureSpec::with_unit_norms(name, layers),
        dense_sparsity: DEFAULT_DENSE_SPARSITY,
        classes,
    }
}

pub fn lenet5() -> ZooEntry {
    build(
        "lenet5",
        "LeCun et al. 1998",
        10,
        &[(1, 6, 5, 28), (6, 16, 5, 10)],
        &[(400, 120), (120, 84), (84, 10)],
    )
}

pub fn alexnet() -> ZooEntry {
    build(
        "alexnet",
        "Krizhevsky et al. 2012",
        1000,
        &[
            (3, 96, 11, 55),
            (96, 256, 5, 27),
            (256, 384, 3, 13),
            (384, 384, 3, 13),
            (384, 256, 3, 13),
        ],
        &[(9216, 4096), (4096, 4096), (4096, 1000)],
    )
}

pub fn vgg16() -> ZooEntry {
    let mut convs = Vec::new();
    let mut a = 3;
    for (b, n, reps) in [(64, 224, 2), (128, 112, 2), (256, 56, 3), (512, 28, 3), (512, 14, 3)] {
        for _ in 0..reps {
            convs.push((a, b, 3, n));
            a = b;
        }
    }
    build(
        "vgg16",
        "Simonyan & Zisserman 2015, configuration D",
        1000,
        &convs,
        &[(25088, 4096), (4096, 4096), (4096, 1000)],
    )
}

pub fn zoo() -> Vec<ZooEntry> {
    vec![lenet5(), alexnet(), vgg16()]
}

pub fn available() -> String {
    zoo().iter().map(|e| e.name).collect::<Vec<_>>().join(", ")
}

/// Case-insensitive lookup; `-` and `_` are ignored (`LeNet-5` → `lenet5`).
pub fn lookup(name: &str) -> Result<ZooEntry> {
    let key: String = name
        .chars()
        .filter(|c| !matches!(c, '-' | '_'))
        .flat_map(char::to_lowercase)
        .collect();
    let entry = zoo()
        .into_iter()
        .find(|e| e.name == key)
        .ok_or_else(|| Error::UnknownArchitecture {
            name: name.to_string(),
            available: available(),
        })?;
    entry.validate()?;
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_validate() {
        for e in zoo() {
            e.validate().unwrap();
        }
        assert_eq!(vgg16().arch.depth(), 16);
        assert_eq!(alexnet().arch.depth(), 8);
        assert_eq!(lenet5().arch.depth(), 5);
    }

    #[test]
    fn lookup_aliases_and_errors() {
        assert_eq!(lookup("LeNet-5").unwrap().name, "lenet5");
        assert_eq!(lookup("VGG_16").unwrap().name, "vgg16");
        let err = lookup("resnet").unwrap_err().to_string();
        assert!(err.contains("lenet5") && err.contains("alexnet") && err.contains("vgg16"));
    }

    #[test]
    fn dense_sparsity() {
        assert_eq!(dense_s(400, 0.9), 40);
        assert_eq!(dense_s(84, 0.9), 9);
        assert_eq!(dense_s(5, 0.99), 1);
        let e = lenet5().with_sparsity(0.5).unwrap();
        assert_eq!(e.arch.layers[2], LayerSpec::dense(400, 120, 200));
        assert!(lenet5().with_sparsity(1.0).is_err());
    }

    #[test]
    fn composition_modes() {
        let conv = |a, b, n| LayerSpec::Conv(ConvShape::new(a, b, 3, n, 2));
        assert!(check_composition(&[conv(1, 4, 8), conv(4, 2, 8)], Composition::Strict).is_ok());
        assert!(check_composition(&[conv(1, 4, 8), conv(4, 2, 4)], Composition::Strict).is_err());
        assert!(check_composition(&[conv(1, 4, 8), conv(4, 2, 4)], Composition::Pooled).is_ok());
        assert!(check_composition(&[conv(1, 4, 8), conv(3, 2, 4)], Composition::Pooled).is_err());
        assert!(check_composition(&[conv(1, 4, 8), LayerSpec::dense(64, 10, 7)], Composition::Pooled).is_ok());
        let err = check_composition(&[conv(1, 4, 8), LayerSpec::dense(60, 10, 6)], Composition::Pooled)
            .unwrap_err()
            .to_string();
        assert!(err.contains("layer 0") && err.contains("layer 1"), "{err}");
        let err = check_composition(&[conv(1, 2, 2)], Composition::Strict).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
