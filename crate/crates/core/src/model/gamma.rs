//! Inspection of learned link divisors.

use std::fmt::Write as _;

use super::graph::LayerGraph;
use super::layers::ConvRole;
use crate::elastic_link::LinkMode;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Change {
    Increase,
    Decrease,
    Unchanged,
}

impl Change {
    pub fn mark(self) -> &'static str {
        match self {
            Change::Increase => "+",
            Change::Decrease => "-",
            Change::Unchanged => "=",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaEntry {
    pub index: usize,
    pub layer: String,
    pub role: ConvRole,
    pub mode: LinkMode,
    pub gamma_init: f64,
    pub gamma: f64,
    pub learnable: bool,
}

impl GammaEntry {
    pub fn delta(&self) -> f64 {
        self.gamma - self.gamma_init
    }

    pub fn change(&self) -> Change {
        match self.delta() {
            d if d > 0.0 => Change::Increase,
            d if d < 0.0 => Change::Decrease,
            _ => Change::Unchanged,
        }
    }
}

/// Every link in graph order.
pub fn dump_gamma<T: Scalar>(graph: &LayerGraph<T>) -> Vec<GammaEntry> {
    graph
        .binary_layers()
        .into_iter()
        .filter_map(|b| b.link.as_ref().map(|l| (b, l)))
        .enumerate()
        .map(|(index, (b, l))| GammaEntry {
            index,
            layer: b.name.clone(),
            role: b.role,
            mode: l.mode(),
            gamma_init: l.cfg.gamma_init.to_f64_lossy(),
            gamma: l.cfg.gamma.to_f64_lossy(),
            learnable: l.cfg.gamma_learnable,
        })
        .collect()
}

pub fn render_gamma_table(entries: &[GammaEntry]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>4} {:<24} {:<10} {:<9} {:>10} {:>12} {:>12} {}",
        "idx", "layer", "role", "mode", "gamma_init", "gamma", "delta", "chg"
    );
    for e in entries {
        let _ = writeln!(
            s,
            "{:>4} {:<24} {:<10} {:<9} {:>10.4} {:>12.6} {:>12.6} {}",
            e.index,
            e.layer,
            e.role.as_str(),
            e.mode.as_str(),
            e.gamma_init,
            e.gamma,
            e.delta(),
            e.change().mark()
        );
    }
    let up = entries
        .iter()
        .filter(|e| e.change() == Change::Increase)
        .count();
    let down = entries
        .iter()
        .filter(|e| e.change() == Change::Decrease)
        .count();
    let _ = writeln!(
        s,
        "links {} increased {} decreased {}",
        entries.len(),
        up,
        down
    );
    s
}
