//! Architecture descriptions and ablation toggles.

use std::fmt;
use std::str::FromStr;

use crate::conv::ScaleMode;
use crate::elastic_link::SqueezeGrouping;
use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    ElBottleneckTiny,
    BasicBlockTiny,
    ElMobilenetTiny,
    ElResnet26,
    ElResnet50,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::ElBottleneckTiny,
        Family::BasicBlockTiny,
        Family::ElMobilenetTiny,
        Family::ElResnet26,
        Family::ElResnet50,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::ElBottleneckTiny => "el_bottleneck_tiny",
            Family::BasicBlockTiny => "basic_block_tiny",
            Family::ElMobilenetTiny => "el_mobilenet_tiny",
            Family::ElResnet26 => "el_resnet26",
            Family::ElResnet50 => "el_resnet50",
        }
    }

    /// ImageNet-scale families use the 7x7 stride-2 stem and max-pool.
    pub fn is_full_scale(self) -> bool {
        matches!(self, Family::ElResnet26 | Family::ElResnet50)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown arch `{s}`")))
    }
}

/// Per-block switches. Suffix `s`, `i`, `e` name the reducing, spatial and
/// expanding convolution of a bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub el_s: bool,
    pub el_i: bool,
    pub el_e: bool,
    /// Keep block-level residual connections.
    pub residual: bool,
    pub gamma_learnable: bool,
    pub k_s: bool,
    pub k_i: bool,
    pub k_e: bool,
    /// Per-filter weight scaling on every binary convolution.
    pub alpha: bool,
    pub grouping: SqueezeGrouping,
    /// Real-valued projection shortcuts. When off they become binary
    /// convolutions without links.
    pub fp_shortcut: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ablation_row("el6").expect("known row")
    }
}

impl Toggles {
    pub const ROWS: [&'static str; 7] = ["baseline", "el1", "el2", "el3", "el4", "el5", "el6"];

    /// Rows of the bottleneck ablation: `baseline`, `el1` ... `el6`.
    pub fn ablation_row(name: &str) -> Result<Self> {
        // (k_s, el_s, el_i, el_e, residual, gamma_learnable)
        let row = match name.to_ascii_lowercase().as_str() {
            "baseline" => (true, false, false, false, true, false),
            "el1" => (true, true, false, false, true, false),
            "el2" => (true, true, false, true, true, false),
            "el3" => (true, true, true, true, true, false),
            "el4" => (true, true, true, true, false, false),
            "el5" => (false, true, true, true, true, true),
            "el6" => (true, true, true, true, true, true),
            _ => return Err(config_err(format!("unknown ablation row `{name}`"))),
        };
        Ok(Self {
            k_s: row.0,
            el_s: row.1,
            el_i: row.2,
            el_e: row.3,
            residual: row.4,
            gamma_learnable: row.5,
            k_i: false,
            k_e: false,
            alpha: true,
            grouping: SqueezeGrouping::GammaConsistent,
            fp_shortcut: true,
        })
    }

    /// Same switches with every link removed.
    pub fn without_links(mut self) -> Self {
        self.el_s = false;
        self.el_i = false;
        self.el_e = false;
        self
    }

    pub fn any_link(&self) -> bool {
        self.el_s || self.el_i || self.el_e
    }

    pub fn scale_mode(&self, k: bool) -> ScaleMode {
        match (k, self.alpha) {
            (true, _) => ScaleMode::AlphaAndK,
            (false, true) => ScaleMode::AlphaOnly,
            (false, false) => ScaleMode::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub family: Family,
    pub in_channels: usize,
    pub input_size: usize,
    pub classes: usize,
    /// Base channel width (stem width for tiny families, first-stage
    /// bottleneck width for the full-scale ones).
    pub width: usize,
    /// Number of blocks (tiny families only).
    pub depth: usize,
    pub toggles: Toggles,
}

impl ArchSpec {
    /// Desk-scale defaults for 32x32 RGB, 10 classes.
    pub fn tiny(family: Family) -> Self {
        Self {
            family,
            in_channels: 3,
            input_size: 32,
            classes: 10,
            width: 16,
            depth: 4,
            toggles: Toggles::default(),
        }
    }

    /// ImageNet-scale defaults. Projection shortcuts are binary here so the
    /// FLOP budget matches the usual binarized ResNet accounting.
    pub fn full_scale(family: Family) -> Self {
        Self {
            family,
            in_channels: 3,
            input_size: 224,
            classes: 1000,
            width: 64,
            depth: 0,
            toggles: Toggles {
                fp_shortcut: false,
                ..Toggles::default()
            },
        }
    }

    pub fn for_family(family: Family) -> Self {
        if family.is_full_scale() {
            Self::full_scale(family)
        } else {
            Self::tiny(family)
        }
    }

    pub fn with_toggles(mut self, toggles: Toggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.input_size == 0 || self.classes == 0 || self.width == 0 {
            return Err(config_err("arch dimensions must be positive"));
        }
        if !self.family.is_full_scale() && self.depth == 0 {
            return Err(config_err("depth must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
        }
        assert!("resnet9000".parse::<Family>().is_err());
    }

    #[test]
    fn baseline_row_has_no_links() {
        let t = Toggles::ablation_row("Baseline").unwrap();
        assert!(t.k_s && t.residual && !t.any_link() && !t.gamma_learnable);
        assert!(!Toggles::ablation_row("el4").unwrap().residual);
        assert_eq!(Toggles::default(), Toggles::ablation_row("el6").unwrap());
    }
}
