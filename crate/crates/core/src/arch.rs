//! Declarative architecture descriptions.
//!
//! An [`ArchitectureSpec`] is an ordered layer list plus early-exit
//! placement, parsed from a TOML config file (see `docs/config-grammar.md`).
//! Unknown keys are hard errors. The spec is validated structurally here;
//! shape chaining is checked when the graph is compiled.

use crate::error::{Error, Result};
use crate::ops::Padding;
use serde::{Deserialize, Serialize};

/// Early-exit block flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EeVariant {
    /// Pointwise conv doubling channels → relu → strided depthwise → relu
    /// → pool → dense.
    Trecx,
    /// Pool → dense only.
    BaselineEe,
    #[default]
    None,
}

/// One layer of the trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerCfg {
    Conv {
        filters: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "same")]
        padding: Padding,
    },
    Depthwise {
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "same")]
        padding: Padding,
    },
    Pointwise {
        filters: usize,
    },
    Batchnorm,
    Relu,
    /// Adds the output of layer `from` to the current activation; with
    /// `projection = true` the skip goes through a 1×1 conv that matches
    /// channel count and stride.
    ResidualAdd {
        from: usize,
        #[serde(default)]
        projection: bool,
    },
    /// Global average pooling (rank 4 → rank 2).
    Pool,
    Dense {
        units: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

fn same() -> Padding {
    Padding::Same
}

impl LayerCfg {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerCfg::Conv { .. } => "conv",
            LayerCfg::Depthwise { .. } => "depthwise",
            LayerCfg::Pointwise { .. } => "pointwise",
            LayerCfg::Batchnorm => "batchnorm",
            LayerCfg::Relu => "relu",
            LayerCfg::ResidualAdd { .. } => "residual_add",
            LayerCfg::Pool => "pool",
            LayerCfg::Dense { .. } => "dense",
            LayerCfg::Flatten => "flatten",
        }
    }
}

/// Declarative model description compiled by [`crate::graph::build_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Sample shape height × width × channels.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Trunk layer index after which the early exit hangs.
    #[serde(default)]
    pub attach_index: Option<usize>,
    #[serde(default)]
    pub ee_variant: EeVariant,
    #[serde(default)]
    pub early_view: bool,
    /// Ablation head: concatenate early-exit feature maps onto the final
    /// block instead of using the early view.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fmap_concat: bool,
    pub layers: Vec<LayerCfg>,
}

impl ArchitectureSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ArchitectureSpec =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("architecture spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config(format!("{}: no layers", self.name)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("{}: need at least 2 classes", self.name)));
        }
        if self.early_view && self.ee_variant != EeVariant::Trecx {
            return Err(Error::Config(format!(
                "{}: early_view requires ee_variant = \"trecx\"",
                self.name
            )));
        }
        if self.fmap_concat && (self.ee_variant != EeVariant::Trecx || self.early_view) {
            return Err(Error::Config(format!(
                "{}: fmap_concat requires ee_variant = \"trecx\" and early_view = false",
                self.name
            )));
        }
        match (self.ee_variant, self.attach_index) {
            (EeVariant::None, None) => {}
            (EeVariant::None, Some(_)) => {
                return Err(Error::Config(format!(
                    "{}: attach_index given but ee_variant is \"none\"",
                    self.name
                )));
            }
            (_, None) => {
                return Err(Error::Config(format!(
                    "{}: ee_variant {:?} needs attach_index",
                    self.name, self.ee_variant
                )));
            }
            (_, Some(idx)) => {
                // Strictly inside: at least one layer on each side.
                if idx == 0 || idx + 1 >= self.layers.len() {
                    return Err(Error::Config(format!(
                        "{}: attach_index {idx} must leave layers on both sides (0 < idx < {})",
                        self.name,
                        self.layers.len() - 1
                    )));
                }
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerCfg::ResidualAdd { from, .. } = layer {
                if *from >= i {
                    return Err(Error::Graph {
                        index: i,
                        name: layer.kind_name().into(),
                        msg: format!("residual_add must reference an earlier layer, got from={from}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Copy with early-exit configuration stripped (the plain baseline).
    pub fn baseline(&self) -> ArchitectureSpec {
        ArchitectureSpec {
            attach_index: None,
            ee_variant: EeVariant::None,
            early_view: false,
            fmap_concat: false,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = r#"
name = "mini"
input_shape = [4, 4, 1]
num_classes = 2
attach_index = 1
ee_variant = "trecx"
early_view = true

[[layers]]
kind = "conv"
filters = 2
kernel = [3, 3]

[[layers]]
kind = "relu"

[[layers]]
kind = "conv"
filters = 4
kernel = [3, 3]
stride = 2

[[layers]]
kind = "relu"

[[layers]]
kind = "pool"

[[layers]]
kind = "dense"
units = 2
"#;

    #[test]
    fn parses_and_validates() {
        let spec = ArchitectureSpec::from_toml(MINI).unwrap();
        assert_eq!(spec.layers.len(), 6);
        assert_eq!(spec.attach_index, Some(1));
        assert_eq!(spec.ee_variant, EeVariant::Trecx);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let bad = MINI.replace("early_view = true", "early_view = true\ntypo_key = 1");
        assert!(ArchitectureSpec::from_toml(&bad).is_err());
        let bad_layer = MINI.replace("kind = \"relu\"", "kind = \"relu\"\nstride = 2");
        assert!(ArchitectureSpec::from_toml(&bad_layer).is_err());
    }

    #[test]
    fn attach_index_must_be_interior() {
        let bad = MINI.replace("attach_index = 1", "attach_index = 0");
        assert!(ArchitectureSpec::from_toml(&bad).is_err());
        let bad = MINI.replace("attach_index = 1", "attach_index = 5");
        assert!(ArchitectureSpec::from_toml(&bad).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let spec = ArchitectureSpec::from_toml(MINI).unwrap();
        let again = ArchitectureSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn early_view_requires_trecx() {
        let bad = MINI.replace("ee_variant = \"trecx\"", "ee_variant = \"baseline_ee\"");
        assert!(ArchitectureSpec::from_toml(&bad).is_err());
    }
}
