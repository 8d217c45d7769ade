//! Elastic-Link: a real-valued link that carries a binary convolution's
//! input around it, reshaped to the output channel count and scaled by a
//! learnable `1 / gamma`.
//!
//! * Identity (`c_in == c_out`): the input itself.
//! * Squeeze (`c_in > c_out`): the input is zero-padded at the channel tail to
//!   `g * c_out` channels, `g = ceil(c_in / c_out)`, split into `g` groups of
//!   `c_out` consecutive channels, and the groups are summed elementwise.
//! * Expand (`c_in < c_out`): the channel axis is tiled `ceil(c_out / c_in)`
//!   times and truncated to `c_out`.
//!
//! When the convolution halves the spatial size, a 2x2 / stride-2 max-pool is
//! applied to the link input first.

use std::fmt;

use crate::binarize::{activation_scale_k, weight_alpha, ScaleAlpha};
use crate::binconv::{apply_scale, binconv2d};
use crate::conv::{max_pool2d, max_pool2d_backward, ConvSpec, PoolSpec, ScaleMode};
use crate::error::{config_err, Error, Result};
use crate::norm::{batchnorm_forward, BnState};
use crate::scalar::Scalar;
use crate::tensor::{pack_bits, Shape4, Tensor};

/// Smallest magnitude gamma may take after an optimizer step.
pub const GAMMA_MIN_ABS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LinkMode {
    Identity,
    Squeeze,
    Expand,
}

impl LinkMode {
    pub fn of(c_in: usize, c_out: usize) -> Self {
        match c_in.cmp(&c_out) {
            std::cmp::Ordering::Equal => LinkMode::Identity,
            std::cmp::Ordering::Greater => LinkMode::Squeeze,
            std::cmp::Ordering::Less => LinkMode::Expand,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LinkMode::Identity => "identity",
            LinkMode::Squeeze => "squeeze",
            LinkMode::Expand => "expand",
        }
    }
}

impl fmt::Display for LinkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How Squeeze partitions the (padded) input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SqueezeGrouping {
    /// `g` groups of `c_out` consecutive channels; output `j` sums
    /// channels `j, j + c_out, j + 2 c_out, ...`.
    #[default]
    GammaConsistent,
    /// `c_out` groups of `g` consecutive channels; output `j` sums
    /// channels `j g .. j g + g`.
    LiteralSentence,
}

impl SqueezeGrouping {
    pub fn as_str(self) -> &'static str {
        match self {
            SqueezeGrouping::GammaConsistent => "gamma_consistent",
            SqueezeGrouping::LiteralSentence => "literal_sentence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gamma_consistent" => Ok(SqueezeGrouping::GammaConsistent),
            "literal_sentence" => Ok(SqueezeGrouping::LiteralSentence),
            other => Err(config_err(format!("unknown squeeze grouping `{other}`"))),
        }
    }
}

/// `ceil(c_in / c_out)` when `c_in >= c_out`, else `ceil(c_out / c_in)`.
pub fn gamma_init<T: Scalar>(c_in: usize, c_out: usize) -> T {
    let ratio = if c_in >= c_out {
        c_in.div_ceil(c_out)
    } else {
        c_out.div_ceil(c_in)
    };
    T::lit(ratio as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElConfig<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub downsample: bool,
    pub gamma: T,
    pub gamma_init: T,
    pub gamma_learnable: bool,
    pub grouping: SqueezeGrouping,
}

impl<T: Scalar> ElConfig<T> {
    pub fn new(c_in: usize, c_out: usize, downsample: bool) -> Self {
        let g = gamma_init(c_in, c_out);
        Self {
            c_in,
            c_out,
            downsample,
            gamma: g,
            gamma_init: g,
            gamma_learnable: false,
            grouping: SqueezeGrouping::default(),
        }
    }

    pub fn learnable(mut self, on: bool) -> Self {
        self.gamma_learnable = on;
        self
    }

    pub fn with_grouping(mut self, grouping: SqueezeGrouping) -> Self {
        self.grouping = grouping;
        self
    }

    pub fn with_gamma(mut self, gamma: T) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn mode(&self) -> LinkMode {
        LinkMode::of(self.c_in, self.c_out)
    }

    /// Clamps `|gamma|` to at least [`GAMMA_MIN_ABS`], keeping its sign.
    pub fn clamp_gamma(&mut self) {
        let min = T::lit(GAMMA_MIN_ABS);
        if self.gamma.abs() < min {
            self.gamma = if self.gamma < T::zero() { -min } else { min };
        }
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.c_in || self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Shape {
                context: "elastic link input",
                expected: Shape4::new(input.n, self.c_in, input.h, input.w),
                actual: input,
            });
        }
        let s = if self.downsample {
            PoolSpec::downsample().output_shape(input)?
        } else {
            input
        };
        Ok(Shape4::new(s.n, self.c_out, s.h, s.w))
    }
}

/// For every output channel, the input channels summed into it.
pub fn channel_sources(c_in: usize, c_out: usize, grouping: SqueezeGrouping) -> Vec<Vec<usize>> {
    match LinkMode::of(c_in, c_out) {
        LinkMode::Identity => (0..c_out).map(|j| vec![j]).collect(),
        LinkMode::Expand => (0..c_out).map(|j| vec![j % c_in]).collect(),
        LinkMode::Squeeze => {
            let g = c_in.div_ceil(c_out);
            (0..c_out)
                .map(|j| {
                    (0..g)
                        .map(|k| match grouping {
                            SqueezeGrouping::GammaConsistent => k * c_out + j,
                            SqueezeGrouping::LiteralSentence => j * g + k,
                        })
                        // indices past c_in are the zero padding
                        .filter(|&src| src < c_in)
                        .collect()
                })
                .collect()
        }
    }
}

fn remap_channels<T: Scalar>(x: &Tensor<T>, sources: &[Vec<usize>], inv_gamma: T) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape4::new(s.n, sources.len(), s.h, s.w));
    for n in 0..s.n {
        for (j, srcs) in sources.iter().enumerate() {
            let dst = out.plane_mut(n, j);
            for &c in srcs {
                for (d, &v) in dst.iter_mut().zip(x.plane(n, c)) {
                    *d += v;
                }
            }
            if inv_gamma != T::one() {
                dst.iter_mut().for_each(|d| *d *= inv_gamma);
            }
        }
    }
    out
}

fn check_gamma<T: Scalar>(gamma: T) -> Result<()> {
    if gamma == T::zero() || !gamma.is_finite() {
        return Err(config_err(format!(
            "gamma must be finite and non-zero, got {gamma}"
        )));
    }
    Ok(())
}

/// Channel-reduction link (`c_in > c_out`) with gamma-consistent grouping.
pub fn squeeze<T: Scalar>(x: &Tensor<T>, c_out: usize, gamma: T) -> Result<Tensor<T>> {
    let c_in = x.shape().c;
    if c_out == 0 || c_in <= c_out {
        return Err(config_err(format!(
            "squeeze needs c_in > c_out, got {c_in} -> {c_out}"
        )));
    }
    check_gamma(gamma)?;
    let src = channel_sources(c_in, c_out, SqueezeGrouping::GammaConsistent);
    Ok(remap_channels(x, &src, T::one() / gamma))
}

/// Channel-expansion link (`c_in < c_out`): tile and truncate.
pub fn expand<T: Scalar>(x: &Tensor<T>, c_out: usize, gamma: T) -> Result<Tensor<T>> {
    let c_in = x.shape().c;
    if c_in == 0 || c_in >= c_out {
        return Err(config_err(format!(
            "expand needs c_in < c_out, got {c_in} -> {c_out}"
        )));
    }
    check_gamma(gamma)?;
    let src = channel_sources(c_in, c_out, SqueezeGrouping::GammaConsistent);
    Ok(remap_channels(x, &src, T::one() / gamma))
}

/// Values retained by [`sei_forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct SeiCache<T> {
    input_shape: Shape4,
    pooled_shape: Shape4,
    argmax: Option<Vec<usize>>,
    /// Link output before division by gamma.
    pre_scale: Tensor<T>,
}

pub fn sei_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ElConfig<T>,
) -> Result<(Tensor<T>, SeiCache<T>)> {
    cfg.output_shape(x.shape())?;
    check_gamma(cfg.gamma)?;
    let (pooled, argmax) = if cfg.downsample {
        let (p, a) = max_pool2d(x, PoolSpec::downsample())?;
        (p, Some(a))
    } else {
        (x.clone(), None)
    };
    let src = channel_sources(cfg.c_in, cfg.c_out, cfg.grouping);
    let pre_scale = remap_channels(&pooled, &src, T::one());
    let mut out = pre_scale.clone();
    out.scale(T::one() / cfg.gamma);
    Ok((
        out,
        SeiCache {
            input_shape: x.shape(),
            pooled_shape: pooled.shape(),
            argmax,
            pre_scale,
        },
    ))
}

/// Optional 2x2 max-pool, then Squeeze / Expand / Identity, then `/ gamma`.
pub fn sei_forward<T: Scalar>(x: &Tensor<T>, cfg: &ElConfig<T>) -> Result<Tensor<T>> {
    sei_forward_cached(x, cfg).map(|(y, _)| y)
}

pub struct SeiGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_gamma: T,
}

/// Adjoint of [`sei_forward`]. `grad_gamma = -sum(grad_out * s) / gamma^2`
/// where `s` is the pre-division output; zero when gamma is frozen.
pub fn sei_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cfg: &ElConfig<T>,
    cache: &SeiCache<T>,
) -> Result<SeiGrads<T>> {
    grad_out.expect_shape(cache.pre_scale.shape(), "link grad")?;
    let inv = T::one() / cfg.gamma;
    let grad_gamma = if cfg.gamma_learnable {
        -grad_out.dot(&cache.pre_scale)? * inv * inv
    } else {
        T::zero()
    };
    let src = channel_sources(cfg.c_in, cfg.c_out, cfg.grouping);
    let ps = cache.pooled_shape;
    let mut gp = Tensor::zeros(ps);
    for n in 0..ps.n {
        for (j, srcs) in src.iter().enumerate() {
            for &c in srcs {
                let g = grad_out.plane(n, j);
                for (d, &v) in gp.plane_mut(n, c).iter_mut().zip(g) {
                    *d += v * inv;
                }
            }
        }
    }
    let grad_input = match &cache.argmax {
        Some(arg) => max_pool2d_backward(&gp, arg, cache.input_shape),
        None => gp,
    };
    Ok(SeiGrads {
        grad_input,
        grad_gamma,
    })
}

/// `BN(BinConv(x, w)) + SEI(x, gamma)`; `x` is binarized internally.
pub fn el_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bn: &mut BnState<T>,
    cfg: &ElConfig<T>,
    spec: &ConvSpec,
    training: bool,
) -> Result<Tensor<T>> {
    if cfg.c_in != spec.c_in || cfg.c_out != spec.c_out {
        return Err(config_err(
            "elastic link channels differ from its convolution",
        ));
    }
    let raw: Tensor<T> = binconv2d(&pack_bits(x), &pack_bits(weights), spec)?;
    let alpha = match spec.scale_mode {
        ScaleMode::None => ScaleAlpha::ones(spec.c_out),
        _ => weight_alpha(weights),
    };
    let k = match spec.scale_mode {
        ScaleMode::AlphaAndK => Some(activation_scale_k(x, spec)?),
        _ => None,
    };
    let scaled = apply_scale(&raw, k.as_ref(), &alpha, spec)?;
    let mut y = batchnorm_forward(&scaled, bn, training)?;
    let link = sei_forward(x, cfg)?;
    if link.shape() != y.shape() {
        return Err(Error::Shape {
            context: "elastic link addends",
            expected: y.shape(),
            actual: link.shape(),
        });
    }
    y.add_assign(&link)?;
    Ok(y)
}
