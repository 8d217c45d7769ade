//! Block and network constructors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchSpec, Family, Toggles};
use super::graph::LayerGraph;
use super::layers::{BatchNorm, BinConvLayer, ConvRole, FpConv, Layer, Linear, ResidualJoin};
use crate::conv::{ConvSpec, PoolSpec};
use crate::elastic_link::ElConfig;
use crate::error::Result;
use crate::scalar::Scalar;

fn link<T: Scalar>(c_in: usize, c_out: usize, downsample: bool, t: &Toggles) -> ElConfig<T> {
    ElConfig::new(c_in, c_out, downsample)
        .learnable(t.gamma_learnable)
        .with_grouping(t.grouping)
}

fn bin_conv<T: Scalar>(
    name: String,
    role: ConvRole,
    spec: ConvSpec,
    with_link: bool,
    downsample: bool,
    t: &Toggles,
) -> Result<Layer<T>> {
    let mut layer = BinConvLayer::new(name, role, spec)?;
    if with_link {
        layer = layer.with_link(link(spec.c_in, spec.c_out, downsample, t))?;
    }
    Ok(Layer::BinConv(Box::new(layer)))
}

/// Projection shortcut: optional 2x2 average pool, then a 1x1 convolution
/// and BatchNorm.
fn projection<T: Scalar>(
    name: &str,
    c_in: usize,
    c_out: usize,
    downsample: bool,
    t: &Toggles,
) -> Result<Vec<Layer<T>>> {
    let mut out = Vec::new();
    if downsample {
        out.push(Layer::avg_pool(PoolSpec::downsample()));
    }
    let spec = ConvSpec::new(c_in, c_out, 1, 1, 0).with_scale(t.scale_mode(false));
    if t.fp_shortcut {
        out.push(Layer::FpConv(FpConv::new(
            format!("{name}.shortcut.conv"),
            spec,
        )?));
        out.push(Layer::BatchNorm(BatchNorm::new(
            format!("{name}.shortcut.bn"),
            c_out,
        )));
    } else {
        out.push(bin_conv(
            format!("{name}.shortcut"),
            ConvRole::Shortcut,
            spec,
            false,
            false,
            t,
        )?);
    }
    Ok(out)
}

fn wrap_residual<T: Scalar>(
    name: &str,
    body: Vec<Layer<T>>,
    shortcut: Vec<Layer<T>>,
) -> Vec<Layer<T>> {
    let mut out = Vec::with_capacity(body.len() + 2);
    out.push(Layer::ResidualBegin);
    out.extend(body);
    out.push(Layer::ResidualJoin(ResidualJoin {
        name: format!("{name}.join"),
        shortcut,
    }));
    out
}

/// 1x1 reduce, 3x3 spatial, 1x1 expand, each a binary convolution with its
/// own link. Downsampling uses a stride-2 reducing convolution whose link
/// max-pools.
pub fn build_el_bottleneck<T: Scalar>(
    name: &str,
    c_in: usize,
    c_mid: usize,
    c_out: usize,
    downsample: bool,
    t: &Toggles,
) -> Result<Vec<Layer<T>>> {
    let stride = if downsample { 2 } else { 1 };
    let body = vec![
        bin_conv(
            format!("{name}.reduce"),
            ConvRole::Reduce,
            ConvSpec::new(c_in, c_mid, 1, stride, 0).with_scale(t.scale_mode(t.k_s)),
            t.el_s,
            downsample,
            t,
        )?,
        bin_conv(
            format!("{name}.spatial"),
            ConvRole::Spatial,
            ConvSpec::new(c_mid, c_mid, 3, 1, 1).with_scale(t.scale_mode(t.k_i)),
            t.el_i,
            false,
            t,
        )?,
        bin_conv(
            format!("{name}.expand"),
            ConvRole::Expand,
            ConvSpec::new(c_mid, c_out, 1, 1, 0).with_scale(t.scale_mode(t.k_e)),
            t.el_e,
            false,
            t,
        )?,
    ];
    if !t.residual {
        return Ok(body);
    }
    let shortcut = if downsample || c_in != c_out {
        projection(name, c_in, c_out, downsample, t)?
    } else {
        Vec::new()
    };
    Ok(wrap_residual(name, body, shortcut))
}

/// Depthwise 3x3 then pointwise 1x1, each followed by ReLU on the
/// convolution branch before its link is added. With stride 2 only the
/// depthwise link pools; the pointwise input is already downsampled.
pub fn build_el_mobilenet_block<T: Scalar>(
    name: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
    t: &Toggles,
) -> Result<Vec<Layer<T>>> {
    let dw = ConvSpec::depthwise(c_in, 3, stride, 1).with_scale(t.scale_mode(t.k_i));
    let pw = ConvSpec::new(c_in, c_out, 1, 1, 0).with_scale(t.scale_mode(t.k_e));
    let pw_link = if c_out >= c_in { t.el_e } else { t.el_s };
    let mut dw_layer =
        BinConvLayer::new(format!("{name}.dw"), ConvRole::Depthwise, dw)?.with_branch_relu(true);
    if t.el_i {
        dw_layer = dw_layer.with_link(link(c_in, c_in, stride == 2, t))?;
    }
    let mut pw_layer =
        BinConvLayer::new(format!("{name}.pw"), ConvRole::Pointwise, pw)?.with_branch_relu(true);
    if pw_link {
        pw_layer = pw_layer.with_link(link(c_in, c_out, false, t))?;
    }
    Ok(vec![
        Layer::BinConv(Box::new(dw_layer)),
        Layer::BinConv(Box::new(pw_layer)),
    ])
}

/// Two 3x3 convolutions of constant width with Identity links. A block
/// residual is only added when the links are off, since the Identity link
/// already is the per-convolution shortcut.
pub fn build_basic_block<T: Scalar>(
    name: &str,
    c: usize,
    stride: usize,
    t: &Toggles,
) -> Result<Vec<Layer<T>>> {
    let down = stride == 2;
    let body = vec![
        bin_conv(
            format!("{name}.conv1"),
            ConvRole::Spatial,
            ConvSpec::new(c, c, 3, stride, 1).with_scale(t.scale_mode(t.k_i)),
            t.el_i,
            down,
            t,
        )?,
        bin_conv(
            format!("{name}.conv2"),
            ConvRole::Spatial,
            ConvSpec::new(c, c, 3, 1, 1).with_scale(t.scale_mode(t.k_i)),
            t.el_i,
            false,
            t,
        )?,
    ];
    if !t.residual || t.el_i {
        return Ok(body);
    }
    let shortcut = if down {
        projection(name, c, c, true, t)?
    } else {
        Vec::new()
    };
    Ok(wrap_residual(name, body, shortcut))
}

/// Splits `depth` blocks into two stages.
fn two_stages(depth: usize) -> Vec<usize> {
    [depth.div_ceil(2), depth / 2]
        .into_iter()
        .filter(|&n| n > 0)
        .collect()
}

/// Builds the full graph with zero-valued parameters.
pub fn build_network<T: Scalar>(arch: &ArchSpec) -> Result<LayerGraph<T>> {
    arch.validate()?;
    let t = &arch.toggles;
    let w = arch.width;
    let mut layers: Vec<Layer<T>> = Vec::new();
    let stem_c = match arch.family {
        Family::ElBottleneckTiny => 4 * w,
        _ => w,
    };
    if arch.family.is_full_scale() {
        let spec = ConvSpec::new(arch.in_channels, stem_c, 7, 2, 3);
        layers.push(Layer::FpConv(FpConv::new("stem.conv", spec)?));
        layers.push(Layer::BatchNorm(BatchNorm::new("stem.bn", stem_c)));
        layers.push(Layer::max_pool(PoolSpec::new(3, 2, 1)));
    } else {
        let spec = ConvSpec::new(arch.in_channels, stem_c, 3, 1, 1);
        layers.push(Layer::FpConv(FpConv::new("stem.conv", spec)?));
        layers.push(Layer::BatchNorm(BatchNorm::new("stem.bn", stem_c)));
    }
    let mut c = stem_c;
    match arch.family {
        Family::ElBottleneckTiny | Family::ElResnet26 | Family::ElResnet50 => {
            let stages = match arch.family {
                Family::ElResnet26 => vec![2, 2, 2, 2],
                Family::ElResnet50 => vec![3, 4, 6, 3],
                _ => two_stages(arch.depth),
            };
            for (s, &blocks) in stages.iter().enumerate() {
                let mid = w << s;
                let out = 4 * mid;
                for b in 0..blocks {
                    let down = s > 0 && b == 0;
                    layers.extend(build_el_bottleneck(
                        &format!("s{s}.b{b}"),
                        c,
                        mid,
                        out,
                        down,
                        t,
                    )?);
                    c = out;
                }
            }
        }
        Family::BasicBlockTiny => {
            for (s, &blocks) in two_stages(arch.depth).iter().enumerate() {
                for b in 0..blocks {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    layers.extend(build_basic_block(&format!("s{s}.b{b}"), c, stride, t)?);
                }
            }
        }
        Family::ElMobilenetTiny => {
            for i in 0..arch.depth {
                let out = w << (i / 2 + 1);
                let stride = if i % 2 == 1 { 2 } else { 1 };
                layers.extend(build_el_mobilenet_block(
                    &format!("b{i}"),
                    c,
                    out,
                    stride,
                    t,
                )?);
                c = out;
            }
        }
    }
    layers.push(Layer::global_avg_pool());
    layers.push(Layer::Linear(Linear::new("head.fc", c, arch.classes)));
    let mut g = LayerGraph::new((arch.in_channels, arch.input_size, arch.input_size), layers)?;
    g.arch = Some(arch.clone());
    Ok(g)
}

/// [`build_network`] followed by seeded parameter initialization.
pub fn build_initialized<T: Scalar>(arch: &ArchSpec, seed: u64) -> Result<LayerGraph<T>> {
    let mut g = build_network(arch)?;
    g.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(g)
}
