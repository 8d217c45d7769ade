//! Operation counting at a fixed input resolution.
//!
//! Conventions: a real multiply-accumulate is 2 operations; a binary
//! multiply-accumulate (XNOR plus popcount share) is 1 binary operation, and
//! binary operations are totaled at 1/64 of a real one. Each link output
//! element costs 1 operation (the `1/gamma` scale fused into the add).
//! BatchNorm, pooling, ReLU and residual adds are not counted.

use std::fmt::Write as _;

use super::arch::ArchSpec;
use super::builders::build_network;
use super::graph::LayerGraph;
use super::layers::Layer;
use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Shape4;

pub const BINARY_OPS_PER_REAL: f64 = 64.0;

pub const CONVENTIONS: &str =
    "real MAC = 2 ops; binary MAC = 1 binary op; binary ops / 64; link = 1 op per output element";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub kind: &'static str,
    pub output: Shape4,
    pub real_ops: u64,
    pub binary_ops: u64,
    pub el_ops: u64,
}

impl LayerFlops {
    pub fn total(&self) -> f64 {
        self.real_ops as f64 + self.binary_ops as f64 / BINARY_OPS_PER_REAL + self.el_ops as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub input: Shape4,
    pub layers: Vec<LayerFlops>,
}

impl FlopReport {
    pub fn real_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.real_ops).sum()
    }

    pub fn binary_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.binary_ops).sum()
    }

    pub fn el_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.el_ops).sum()
    }

    /// Real-equivalent operations excluding links.
    pub fn base_total(&self) -> f64 {
        self.real_ops() as f64 + self.binary_ops() as f64 / BINARY_OPS_PER_REAL
    }

    pub fn total(&self) -> f64 {
        self.base_total() + self.el_ops() as f64
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# input {}", self.input);
        let _ = writeln!(s, "# {CONVENTIONS}");
        let _ = writeln!(
            s,
            "{:<28} {:<16} {:>14} {:>14} {:>10}",
            "layer", "kind", "real_ops", "binary_ops", "el_ops"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<28} {:<16} {:>14} {:>14} {:>10}",
                l.name, l.kind, l.real_ops, l.binary_ops, l.el_ops
            );
        }
        let _ = writeln!(
            s,
            "total real {} binary {} el {} => {:.2} MFLOPs",
            self.real_ops(),
            self.binary_ops(),
            self.el_ops(),
            self.total() / 1e6
        );
        s
    }
}

fn count_chain<T: Scalar>(
    layers: &[Layer<T>],
    mut s: Shape4,
    out: &mut Vec<LayerFlops>,
) -> Result<Shape4> {
    let mut stack = Vec::new();
    for layer in layers {
        let input = s;
        let (mut real, mut binary, mut el) = (0u64, 0u64, 0u64);
        match layer {
            Layer::ResidualBegin => stack.push(s),
            Layer::ResidualJoin(j) => {
                let saved = stack
                    .pop()
                    .ok_or_else(|| config_err("unbalanced residual join"))?;
                count_chain(&j.shortcut, saved, out)?;
            }
            other => {
                s = other.output_shape(s)?;
                match other {
                    Layer::FpConv(c) => real = 2 * c.spec.macs(input)?,
                    Layer::Linear(l) => {
                        real = 2 * (input.n * l.in_features * l.out_features) as u64
                    }
                    Layer::BinConv(b) => {
                        binary = b.spec.macs(input)?;
                        if b.link.is_some() {
                            el = s.numel() as u64;
                        }
                    }
                    _ => {}
                }
            }
        }
        if real + binary + el > 0 {
            out.push(LayerFlops {
                name: layer.name().to_string(),
                kind: layer.kind(),
                output: s,
                real_ops: real,
                binary_ops: binary,
                el_ops: el,
            });
        }
    }
    Ok(s)
}

/// Per-layer counts for one image at the graph's input resolution.
pub fn flops_count<T: Scalar>(graph: &LayerGraph<T>) -> Result<FlopReport> {
    let input = graph.input_shape(1);
    let mut layers = Vec::new();
    count_chain(&graph.layers, input, &mut layers)?;
    Ok(FlopReport { input, layers })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Overhead {
    pub with_links: f64,
    pub without_links: f64,
}

impl Overhead {
    pub fn extra(&self) -> f64 {
        self.with_links - self.without_links
    }

    pub fn ratio(&self) -> f64 {
        self.extra() / self.without_links
    }
}

/// Cost of `arch` against the same graph with every link removed.
pub fn el_overhead(arch: &ArchSpec) -> Result<Overhead> {
    let with = flops_count(&build_network::<f32>(arch)?)?;
    let base_arch = arch.clone().with_toggles(arch.toggles.without_links());
    let without = flops_count(&build_network::<f32>(&base_arch)?)?;
    Ok(Overhead {
        with_links: with.total(),
        without_links: without.total(),
    })
}
