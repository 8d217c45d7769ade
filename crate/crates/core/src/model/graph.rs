//! Single-path layer chain with nested residual branches.

use rand::Rng;

use super::arch::ArchSpec;
use super::layers::{BinConvLayer, Layer, Mode, ParamKind, ParamView, ParamVisitor};
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// Half-width of the uniform initializer for binary latent weights.
pub const LATENT_INIT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct LayerGraph<T> {
    pub arch: Option<ArchSpec>,
    /// Input `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer<T>>,
}

/// One row of a shape trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub name: String,
    pub kind: &'static str,
    pub input: Shape4,
    pub output: Shape4,
}

fn non_finite(index: usize, layer: &str) -> Error {
    Error::NonFinite {
        layer: format!("#{index} {layer}"),
    }
}

fn forward_chain<T: Scalar>(
    layers: &mut [Layer<T>],
    x: Tensor<T>,
    mode: &Mode,
    prefix: &str,
) -> Result<Tensor<T>> {
    let mut stack = Vec::new();
    let mut cur = x;
    for (i, layer) in layers.iter_mut().enumerate() {
        match &mut *layer {
            Layer::ResidualBegin => stack.push(cur.clone()),
            Layer::ResidualJoin(join) => {
                let saved = stack
                    .pop()
                    .ok_or_else(|| config_err("unbalanced residual join"))?;
                let sc = forward_chain(&mut join.shortcut, saved, mode, &join.name)?;
                if sc.shape() != cur.shape() {
                    return Err(Error::Shape {
                        context: "residual join",
                        expected: cur.shape(),
                        actual: sc.shape(),
                    });
                }
                cur.add_assign(&sc)?;
            }
            other => cur = other.forward(cur, mode)?,
        }
        if !cur.is_finite() {
            let name = if prefix.is_empty() {
                layer.name().to_string()
            } else {
                format!("{prefix}/{}", layer.name())
            };
            return Err(non_finite(i, &name));
        }
    }
    if !stack.is_empty() {
        return Err(config_err("residual begin without a join"));
    }
    Ok(cur)
}

fn backward_chain<T: Scalar>(layers: &mut [Layer<T>], g: Tensor<T>) -> Result<Tensor<T>> {
    let mut stack = Vec::new();
    let mut g = g;
    for layer in layers.iter_mut().rev() {
        match layer {
            Layer::ResidualJoin(join) => stack.push(backward_chain(&mut join.shortcut, g.clone())?),
            Layer::ResidualBegin => {
                let gs = stack
                    .pop()
                    .ok_or_else(|| config_err("unbalanced residual join"))?;
                g.add_assign(&gs)?;
            }
            other => g = other.backward(&g)?,
        }
    }
    Ok(g)
}

fn trace_chain<T: Scalar>(
    layers: &[Layer<T>],
    mut s: Shape4,
    out: &mut Vec<ShapeTrace>,
) -> Result<Shape4> {
    let mut stack = Vec::new();
    for layer in layers {
        let input = s;
        match layer {
            Layer::ResidualBegin => stack.push(s),
            Layer::ResidualJoin(join) => {
                let saved = stack
                    .pop()
                    .ok_or_else(|| config_err("unbalanced residual join"))?;
                let sc = trace_chain(&join.shortcut, saved, out)?;
                if sc != s {
                    return Err(Error::Shape {
                        context: "residual join",
                        expected: s,
                        actual: sc,
                    });
                }
            }
            other => s = other.output_shape(s)?,
        }
        out.push(ShapeTrace {
            name: layer.name().to_string(),
            kind: layer.kind(),
            input,
            output: s,
        });
    }
    if !stack.is_empty() {
        return Err(config_err("residual begin without a join"));
    }
    Ok(s)
}

fn collect_bin<'a, T>(layers: &'a [Layer<T>], out: &mut Vec<&'a BinConvLayer<T>>) {
    for layer in layers {
        match layer {
            Layer::BinConv(b) => out.push(b),
            Layer::ResidualJoin(j) => collect_bin(&j.shortcut, out),
            _ => {}
        }
    }
}

fn collect_bin_mut<'a, T>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut BinConvLayer<T>>) {
    for layer in layers {
        match layer {
            Layer::BinConv(b) => out.push(b),
            Layer::ResidualJoin(j) => collect_bin_mut(&mut j.shortcut, out),
            _ => {}
        }
    }
}

fn collect_real<'a, T>(layers: &'a [Layer<T>], out: &mut Vec<&'a Layer<T>>) {
    for layer in layers {
        match layer {
            Layer::FpConv(_) | Layer::Linear(_) => out.push(layer),
            Layer::ResidualJoin(j) => collect_real(&j.shortcut, out),
            _ => {}
        }
    }
}

impl<T: Scalar> LayerGraph<T> {
    /// Wraps `layers` after checking that a batch of one traces through.
    pub fn new(input: (usize, usize, usize), layers: Vec<Layer<T>>) -> Result<Self> {
        let g = Self {
            arch: None,
            input,
            layers,
        };
        g.trace_shapes(1)?;
        Ok(g)
    }

    pub fn input_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.input.0, self.input.1, self.input.2)
    }

    pub fn trace_shapes(&self, batch: usize) -> Result<Vec<ShapeTrace>> {
        let mut out = Vec::new();
        trace_chain(&self.layers, self.input_shape(batch), &mut out)?;
        Ok(out)
    }

    pub fn output_shape(&self, batch: usize) -> Result<Shape4> {
        trace_chain(&self.layers, self.input_shape(batch), &mut Vec::new())
    }

    /// Runs the chain. Any layer emitting a non-finite value aborts with
    /// [`Error::NonFinite`] naming that layer.
    pub fn forward(&mut self, x: Tensor<T>, mode: &Mode) -> Result<Tensor<T>> {
        let (c, h, w) = self.input;
        let s = x.shape();
        if (s.c, s.h, s.w) != (c, h, w) {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_shape(s.n),
                actual: s,
            });
        }
        forward_chain(&mut self.layers, x, mode, "")
    }

    /// Accumulates parameter gradients of the last training forward pass and
    /// returns the gradient with respect to the network input.
    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        backward_chain(&mut self.layers, grad)
    }

    /// Visits every parameter and buffer in a fixed, deterministic order.
    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        for layer in &mut self.layers {
            layer.visit(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p: ParamView<'_, T>| {
            p.grad.iter_mut().for_each(|g| *g = T::zero())
        });
    }

    /// Number of trainable scalars.
    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p: ParamView<'_, T>| {
            if p.trainable {
                n += p.value.len();
            }
        });
        n
    }

    /// Fan-in uniform for real weights, `U[-0.1, 0.1]` for latent weights.
    /// Biases and BN affine parameters keep their defaults.
    pub fn init_params<R: Rng>(&mut self, rng: &mut R) {
        self.visit_params(&mut |p: ParamView<'_, T>| {
            let bound = match p.kind {
                ParamKind::Latent => LATENT_INIT,
                ParamKind::Real if p.name.ends_with(".weight") => {
                    let fan_in = (p.shape.c * p.shape.h * p.shape.w).max(1);
                    1.0 / (fan_in as f64).sqrt()
                }
                _ => return,
            };
            for v in p.value.iter_mut() {
                *v = T::lit(rng.gen_range(-bound..bound));
            }
        });
    }

    pub fn binary_layers(&self) -> Vec<&BinConvLayer<T>> {
        let mut out = Vec::new();
        collect_bin(&self.layers, &mut out);
        out
    }

    pub fn binary_layers_mut(&mut self) -> Vec<&mut BinConvLayer<T>> {
        let mut out = Vec::new();
        collect_bin_mut(&mut self.layers, &mut out);
        out
    }

    /// Layers carrying real-valued weights (convolutions and the classifier).
    pub fn real_weight_layers(&self) -> Vec<&Layer<T>> {
        let mut out = Vec::new();
        collect_real(&self.layers, &mut out);
        out
    }

    /// Re-applies the `|gamma| >= 1e-3` floor on every link.
    pub fn clamp_gammas(&mut self) {
        for b in self.binary_layers_mut() {
            if let Some(link) = &mut b.link {
                link.cfg.clamp_gamma();
            }
        }
    }

    /// Converts every parameter to another scalar type (same architecture).
    pub fn copy_params_from<U: Scalar>(&mut self, other: &mut LayerGraph<U>) -> Result<()> {
        let mut values: Vec<(String, Vec<f64>)> = Vec::new();
        other.visit_params(&mut |p: ParamView<'_, U>| {
            values.push((p.name, p.value.iter().map(|v| v.to_f64_lossy()).collect()));
        });
        let mut it = values.into_iter();
        let mut err = None;
        self.visit_params(&mut |p: ParamView<'_, T>| match it.next() {
            Some((name, v)) if name == p.name && v.len() == p.value.len() => {
                for (d, s) in p.value.iter_mut().zip(v) {
                    *d = T::lit(s);
                }
            }
            _ => {
                err.get_or_insert_with(|| {
                    config_err(format!("parameter `{}` has no counterpart", p.name))
                });
            }
        });
        match err {
            Some(e) => Err(e),
            None if it.next().is_some() => Err(config_err("source graph has extra parameters")),
            None => Ok(()),
        }
    }
}
