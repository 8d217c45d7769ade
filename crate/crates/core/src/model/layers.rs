//! Typed layers with cached forward state for backpropagation.

use crate::binarize::{activation_scale_k, weight_alpha, Binarizer, ScaleAlpha, ScaleK};
use crate::binconv::{apply_scale, binconv2d, binconv_backward};
use crate::conv::{
    avg_pool2d, avg_pool2d_backward, conv2d_backward_input, conv2d_backward_weight, conv2d_forward,
    global_avg_pool, global_avg_pool_backward, max_pool2d, max_pool2d_backward, ConvSpec, PoolSpec,
    ScaleMode,
};
use crate::elastic_link::{sei_backward, sei_forward_cached, ElConfig, LinkMode, SeiCache};
use crate::error::{config_err, Error, Result};
use crate::norm::{batchnorm_backward, batchnorm_forward_cached, BnCache, BnState};
use crate::scalar::Scalar;
use crate::tensor::{pack_bits, Shape4, Tensor};

/// Which kernel computes the binary convolution term in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Backend {
    /// XNOR-popcount over channel-packed words.
    #[default]
    Packed,
    /// Dense real convolution over the unpacked +/-1 values.
    Float,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Keep forward state for a backward pass.
    pub training: bool,
    /// Normalize with batch statistics rather than running statistics.
    pub batch_stats: bool,
    /// Fold batch statistics into the running averages.
    pub update_running: bool,
    pub binarizer: Binarizer,
    pub backend: Backend,
}

impl Mode {
    pub fn train() -> Self {
        Self {
            training: true,
            batch_stats: true,
            update_running: true,
            binarizer: Binarizer::Sign,
            backend: Backend::Packed,
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            batch_stats: false,
            update_running: false,
            binarizer: Binarizer::Sign,
            backend: Backend::Packed,
        }
    }

    /// Training with running statistics frozen and used for normalization.
    pub fn train_frozen_stats() -> Self {
        Self {
            batch_stats: false,
            update_running: false,
            ..Self::train()
        }
    }

    /// Differentiable stand-in: clip instead of Sign, batch statistics, no
    /// running-stat updates.
    pub fn surrogate() -> Self {
        Self {
            training: true,
            batch_stats: true,
            update_running: false,
            binarizer: Binarizer::Clip,
            backend: Backend::Float,
        }
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Full-precision weight, bias or BN affine parameter.
    Real,
    /// Latent weight of a binary convolution; clamped to [-1, 1].
    Latent,
    /// Elastic-Link divisor.
    Gamma,
    /// Non-trainable state saved in checkpoints (BN running statistics).
    Buffer,
}

/// Mutable view of one parameter tensor and its gradient accumulator.
pub struct ParamView<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub trainable: bool,
    pub shape: Shape4,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

pub type ParamVisitor<'v, T> = dyn FnMut(ParamView<'_, T>) + 'v;

fn missing_cache(layer: &str) -> Error {
    config_err(format!(
        "backward through `{layer}` without a cached forward pass"
    ))
}

#[derive(Clone, Debug)]
pub struct FpConv<T> {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    grad: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> FpConv<T> {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            name: name.into(),
            spec,
            weight: Tensor::zeros(spec.weight_shape()),
            grad: Tensor::zeros(spec.weight_shape()),
            cache: None,
        })
    }

    fn forward(&mut self, x: Tensor<T>, mode: &Mode) -> Result<Tensor<T>> {
        let y = conv2d_forward(&x, &self.weight, &self.spec, T::zero())?;
        self.cache = mode.training.then_some(x);
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache(&self.name))?;
        let gw = conv2d_backward_weight(g, x, &self.spec, T::zero())?;
        self.grad.add_assign(&gw)?;
        conv2d_backward_input(g, &self.weight, &self.spec, x.shape())
    }

    fn visit(&mut self, f: &mut ParamVisitor<'_, T>) {
        f(ParamView {
            name: format!("{}.weight", self.name),
            kind: ParamKind::Real,
            trainable: true,
            shape: self.weight.shape(),
            value: self.weight.data_mut(),
            grad: self.grad.data_mut(),
        });
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub name: String,
    pub state: BnState<T>,
    grad_scale: Vec<T>,
    grad_shift: Vec<T>,
    // running statistics have no gradient; these stay zero
    zero_buf: Vec<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            state: BnState::new(channels),
            grad_scale: vec![T::zero(); channels],
            grad_shift: vec![T::zero(); channels],
            zero_buf: vec![T::zero(); channels],
            cache: None,
        }
    }

    fn forward(&mut self, x: Tensor<T>, mode: &Mode) -> Result<Tensor<T>> {
        let (y, cache) =
            batchnorm_forward_cached(&x, &mut self.state, mode.batch_stats, mode.update_running)?;
        self.cache = mode.training.then_some(cache);
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache(&self.name))?;
        let grads = batchnorm_backward(g, cache, &self.state)?;
        for (a, b) in self.grad_scale.iter_mut().zip(&grads.grad_scale) {
            *a += *b;
        }
        for (a, b) in self.grad_shift.iter_mut().zip(&grads.grad_shift) {
            *a += *b;
        }
        Ok(grads.grad_input)
    }

    fn visit(&mut self, f: &mut ParamVisitor<'_, T>) {
        let shape = Shape4::new(1, self.state.channels(), 1, 1);
        let st = &mut self.state;
        f(ParamView {
            name: format!("{}.scale", self.name),
            kind: ParamKind::Real,
            trainable: true,
            shape,
            value: &mut st.scale,
            grad: &mut self.grad_scale,
        });
        f(ParamView {
            name: format!("{}.shift", self.name),
            kind: ParamKind::Real,
            trainable: true,
            shape,
            value: &mut st.shift,
            grad: &mut self.grad_shift,
        });
        f(ParamView {
            name: format!("{}.running_mean", self.name),
            kind: ParamKind::Buffer,
            trainable: false,
            shape,
            value: &mut st.running_mean,
            grad: &mut self.zero_buf,
        });
        self.zero_buf.iter_mut().for_each(|v| *v = T::zero());
        f(ParamView {
            name: format!("{}.running_var", self.name),
            kind: ParamKind::Buffer,
            trainable: false,
            shape,
            value: &mut st.running_var,
            grad: &mut self.zero_buf,
        });
        self.zero_buf.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Position of a binary convolution inside its block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvRole {
    /// First 1x1 of a bottleneck (channel reduction).
    Reduce,
    /// Middle 3x3 of a bottleneck, or a basic-block 3x3.
    Spatial,
    /// Last 1x1 of a bottleneck (channel expansion).
    Expand,
    Depthwise,
    Pointwise,
    /// Binary projection on a residual shortcut.
    Shortcut,
}

impl ConvRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ConvRole::Reduce => "reduce",
            ConvRole::Spatial => "spatial",
            ConvRole::Expand => "expand",
            ConvRole::Depthwise => "depthwise",
            ConvRole::Pointwise => "pointwise",
            ConvRole::Shortcut => "shortcut",
        }
    }
}

/// Elastic-Link state attached to a binary convolution.
#[derive(Clone, Debug)]
pub struct ElLink<T> {
    pub cfg: ElConfig<T>,
    grad_gamma: T,
    cache: Option<SeiCache<T>>,
}

impl<T: Scalar> ElLink<T> {
    pub fn new(cfg: ElConfig<T>) -> Self {
        Self {
            cfg,
            grad_gamma: T::zero(),
            cache: None,
        }
    }

    pub fn mode(&self) -> LinkMode {
        self.cfg.mode()
    }
}

#[derive(Clone, Debug)]
struct BinCache<T> {
    input: Tensor<T>,
    alpha: ScaleAlpha<T>,
    k: Option<ScaleK<T>>,
    relu_mask: Option<Vec<bool>>,
    binarizer: Binarizer,
}

/// Binary convolution followed by BatchNorm, an optional ReLU on that branch,
/// and an optional Elastic-Link added on top:
/// `[ReLU](BN(scale(Sign(x) (*) Sign(W)))) + SEI(x) / gamma`.
#[derive(Clone, Debug)]
pub struct BinConvLayer<T> {
    pub name: String,
    pub role: ConvRole,
    pub spec: ConvSpec,
    /// Latent real-valued weights; binarized on every forward pass.
    pub weight: Tensor<T>,
    grad: Tensor<T>,
    pub bn: BatchNorm<T>,
    pub link: Option<ElLink<T>>,
    pub branch_relu: bool,
    cache: Option<BinCache<T>>,
}

impl<T: Scalar> BinConvLayer<T> {
    pub fn new(name: impl Into<String>, role: ConvRole, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        Ok(Self {
            bn: BatchNorm::new(format!("{name}.bn"), spec.c_out),
            name,
            role,
            spec,
            weight: Tensor::zeros(spec.weight_shape()),
            grad: Tensor::zeros(spec.weight_shape()),
            link: None,
            branch_relu: false,
            cache: None,
        })
    }

    pub fn with_link(mut self, cfg: ElConfig<T>) -> Result<Self> {
        if cfg.c_in != self.spec.c_in || cfg.c_out != self.spec.c_out {
            return Err(config_err(format!(
                "{}: link {}->{} does not match conv {}->{}",
                self.name, cfg.c_in, cfg.c_out, self.spec.c_in, self.spec.c_out
            )));
        }
        self.link = Some(ElLink::new(cfg));
        Ok(self)
    }

    pub fn with_branch_relu(mut self, on: bool) -> Self {
        self.branch_relu = on;
        self
    }

    /// Unscaled +/-1 correlation of the binarized input with the binarized weights.
    fn binary_term(&self, x: &Tensor<T>, mode: &Mode) -> Result<Tensor<T>> {
        match (mode.binarizer, mode.backend) {
            (Binarizer::Sign, Backend::Packed) => {
                binconv2d(&pack_bits(x), &pack_bits(&self.weight), &self.spec)
            }
            (b, _) => conv2d_forward(
                &b.apply_tensor(x),
                &b.apply_tensor(&self.weight),
                &self.spec,
                b.pad_value(),
            ),
        }
    }

    fn forward(&mut self, x: Tensor<T>, mode: &Mode) -> Result<Tensor<T>> {
        let raw = self.binary_term(&x, mode)?;
        let alpha = match self.spec.scale_mode {
            ScaleMode::None => ScaleAlpha::ones(self.spec.c_out),
            _ => weight_alpha(&self.weight),
        };
        let k = match self.spec.scale_mode {
            ScaleMode::AlphaAndK => Some(activation_scale_k(&x, &self.spec)?),
            _ => None,
        };
        let scaled = apply_scale(&raw, k.as_ref(), &alpha, &self.spec)?;
        let mut y = self.bn.forward(scaled, mode)?;
        let relu_mask = if self.branch_relu {
            let mask: Vec<bool> = y.data().iter().map(|&v| v > T::zero()).collect();
            for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
                if !m {
                    *v = T::zero();
                }
            }
            Some(mask)
        } else {
            None
        };
        if let Some(link) = &mut self.link {
            let (s, cache) = sei_forward_cached(&x, &link.cfg)?;
            if s.shape() != y.shape() {
                return Err(Error::Shape {
                    context: "elastic link addends",
                    expected: y.shape(),
                    actual: s.shape(),
                });
            }
            y.add_assign(&s)?;
            link.cache = mode.training.then_some(cache);
        }
        if mode.training {
            self.cache = Some(BinCache {
                input: x,
                alpha,
                k,
                relu_mask,
                binarizer: mode.binarizer,
            });
        }
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache(&self.name))?;
        let link_grad = match &mut self.link {
            Some(link) => {
                let sc = link
                    .cache
                    .as_ref()
                    .ok_or_else(|| missing_cache(&self.name))?;
                let sg = sei_backward(g, &link.cfg, sc)?;
                link.grad_gamma += sg.grad_gamma;
                Some(sg.grad_input)
            }
            None => None,
        };
        let mut gz = g.clone();
        if let Some(mask) = &cache.relu_mask {
            for (v, &m) in gz.data_mut().iter_mut().zip(mask) {
                if !m {
                    *v = T::zero();
                }
            }
        }
        let gs = self.bn.backward(&gz)?;
        let bc = binconv_backward(
            &gs,
            &cache.input,
            &self.weight,
            &self.spec,
            cache.k.as_ref(),
            &cache.alpha,
            cache.binarizer,
        )?;
        self.grad.add_assign(&bc.grad_weights)?;
        let mut gx = bc.grad_input;
        if let Some(lg) = link_grad {
            gx.add_assign(&lg)?;
        }
        Ok(gx)
    }

    fn visit(&mut self, f: &mut ParamVisitor<'_, T>) {
        f(ParamView {
            name: format!("{}.weight", self.name),
            kind: ParamKind::Latent,
            trainable: true,
            shape: self.weight.shape(),
            value: self.weight.data_mut(),
            grad: self.grad.data_mut(),
        });
        self.bn.visit(f);
        if let Some(link) = &mut self.link {
            f(ParamView {
                name: format!("{}.gamma", self.name),
                kind: ParamKind::Gamma,
                trainable: link.cfg.gamma_learnable,
                shape: Shape4::new(1, 1, 1, 1),
                value: std::slice::from_mut(&mut link.cfg.gamma),
                grad: std::slice::from_mut(&mut link.grad_gamma),
            });
        }
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        let out = self.spec.output_shape(input)?;
        if let Some(link) = &self.link {
            let ls = link.cfg.output_shape(input)?;
            if ls != out {
                return Err(Error::Shape {
                    context: "elastic link addends",
                    expected: out,
                    actual: ls,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Debug)]
pub struct Pool {
    pub kind: PoolKind,
    pub spec: PoolSpec,
    argmax: Option<Vec<usize>>,
    input_shape: Option<Shape4>,
}

impl Pool {
    pub fn new(kind: PoolKind, spec: PoolSpec) -> Self {
        Self {
            kind,
            spec,
            argmax: None,
            input_shape: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    grad_w: Tensor<T>,
    grad_b: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        let ws = Shape4::new(out_features, in_features, 1, 1);
        let bs = Shape4::new(1, out_features, 1, 1);
        Self {
            name: name.into(),
            in_features,
            out_features,
            weight: Tensor::zeros(ws),
            bias: Tensor::zeros(bs),
            grad_w: Tensor::zeros(ws),
            grad_b: Tensor::zeros(bs),
            cache: None,
        }
    }

    fn check(&self, s: Shape4) -> Result<()> {
        if s.c * s.h * s.w != self.in_features {
            return Err(Error::Shape {
                context: "linear input",
                expected: Shape4::new(s.n, self.in_features, 1, 1),
                actual: s,
            });
        }
        Ok(())
    }

    fn forward(&mut self, x: Tensor<T>, mode: &Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        self.check(s)?;
        let (fi, fo) = (self.in_features, self.out_features);
        let w = self.weight.data();
        let mut y = Tensor::zeros(Shape4::new(s.n, fo, 1, 1));
        for n in 0..s.n {
            let xi = &x.data()[n * fi..(n + 1) * fi];
            for o in 0..fo {
                let row = &w[o * fi..(o + 1) * fi];
                let acc: T = row.iter().zip(xi).map(|(&a, &b)| a * b).sum();
                y.data_mut()[n * fo + o] = acc + self.bias.data()[o];
            }
        }
        self.cache = mode.training.then_some(x);
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache(&self.name))?;
        let s = x.shape();
        let (fi, fo) = (self.in_features, self.out_features);
        let mut gx = Tensor::zeros(s);
        for n in 0..s.n {
            let xi = &x.data()[n * fi..(n + 1) * fi];
            for o in 0..fo {
                let gv = g.data()[n * fo + o];
                self.grad_b.data_mut()[o] += gv;
                let gw = &mut self.grad_w.data_mut()[o * fi..(o + 1) * fi];
                for (a, &b) in gw.iter_mut().zip(xi) {
                    *a += gv * b;
                }
                let row = &self.weight.data()[o * fi..(o + 1) * fi];
                let gxi = &mut gx.data_mut()[n * fi..(n + 1) * fi];
                for (a, &w) in gxi.iter_mut().zip(row) {
                    *a += gv * w;
                }
            }
        }
        Ok(gx)
    }

    fn visit(&mut self, f: &mut ParamVisitor<'_, T>) {
        f(ParamView {
            name: format!("{}.weight", self.name),
            kind: ParamKind::Real,
            trainable: true,
            shape: self.weight.shape(),
            value: self.weight.data_mut(),
            grad: self.grad_w.data_mut(),
        });
        f(ParamView {
            name: format!("{}.bias", self.name),
            kind: ParamKind::Real,
            trainable: true,
            shape: self.bias.shape(),
            value: self.bias.data_mut(),
            grad: self.grad_b.data_mut(),
        });
    }
}

/// Adds the output of the matching [`Layer::ResidualBegin`] (passed through
/// `shortcut`, empty for an identity shortcut) to the main path.
#[derive(Clone, Debug)]
pub struct ResidualJoin<T> {
    pub name: String,
    pub shortcut: Vec<Layer<T>>,
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    FpConv(FpConv<T>),
    BinConv(Box<BinConvLayer<T>>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu),
    Pool(Pool),
    GlobalAvgPool(Option<Shape4>),
    Linear(Linear<T>),
    ResidualBegin,
    ResidualJoin(ResidualJoin<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn relu() -> Self {
        Layer::Relu(Relu::default())
    }

    pub fn max_pool(spec: PoolSpec) -> Self {
        Layer::Pool(Pool::new(PoolKind::Max, spec))
    }

    pub fn avg_pool(spec: PoolSpec) -> Self {
        Layer::Pool(Pool::new(PoolKind::Avg, spec))
    }

    pub fn global_avg_pool() -> Self {
        Layer::GlobalAvgPool(None)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::FpConv(_) => "fp_conv",
            Layer::BinConv(_) => "bin_conv_el",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu(_) => "relu",
            Layer::Pool(p) => match p.kind {
                PoolKind::Max => "max_pool",
                PoolKind::Avg => "avg_pool",
            },
            Layer::GlobalAvgPool(_) => "global_avg_pool",
            Layer::Linear(_) => "linear",
            Layer::ResidualBegin => "residual_begin",
            Layer::ResidualJoin(_) => "residual_join",
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Layer::FpConv(l) => &l.name,
            Layer::BinConv(l) => &l.name,
            Layer::BatchNorm(l) => &l.name,
            Layer::Linear(l) => &l.name,
            Layer::ResidualJoin(j) => &j.name,
            other => other.kind(),
        }
    }

    /// Runs one non-residual layer.
    pub(crate) fn forward(&mut self, x: Tensor<T>, mode: &Mode) -> Result<Tensor<T>> {
        match self {
            Layer::FpConv(l) => l.forward(x, mode),
            Layer::BinConv(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Relu(r) => {
                let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
                let y = x.map(|v| v.max(T::zero()));
                r.mask = mode.training.then_some(mask);
                Ok(y)
            }
            Layer::Pool(p) => {
                let shape = x.shape();
                let y = match p.kind {
                    PoolKind::Max => {
                        let (y, arg) = max_pool2d(&x, p.spec)?;
                        p.argmax = mode.training.then_some(arg);
                        y
                    }
                    PoolKind::Avg => avg_pool2d(&x, p.spec)?,
                };
                p.input_shape = Some(shape);
                Ok(y)
            }
            Layer::GlobalAvgPool(s) => {
                *s = Some(x.shape());
                Ok(global_avg_pool(&x))
            }
            Layer::Linear(l) => l.forward(x, mode),
            Layer::ResidualBegin | Layer::ResidualJoin(_) => {
                Err(config_err("residual markers are handled by the graph"))
            }
        }
    }

    pub(crate) fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::FpConv(l) => l.backward(g),
            Layer::BinConv(l) => l.backward(g),
            Layer::BatchNorm(l) => l.backward(g),
            Layer::Relu(r) => {
                let mask = r.mask.as_ref().ok_or_else(|| missing_cache("relu"))?;
                let mut gx = g.clone();
                for (v, &m) in gx.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *v = T::zero();
                    }
                }
                Ok(gx)
            }
            Layer::Pool(p) => {
                let shape = p.input_shape.ok_or_else(|| missing_cache("pool"))?;
                match p.kind {
                    PoolKind::Max => {
                        let arg = p.argmax.as_ref().ok_or_else(|| missing_cache("max_pool"))?;
                        Ok(max_pool2d_backward(g, arg, shape))
                    }
                    PoolKind::Avg => Ok(avg_pool2d_backward(g, p.spec, shape)),
                }
            }
            Layer::GlobalAvgPool(s) => {
                let shape = s.ok_or_else(|| missing_cache("global_avg_pool"))?;
                Ok(global_avg_pool_backward(g, shape))
            }
            Layer::Linear(l) => l.backward(g),
            Layer::ResidualBegin | Layer::ResidualJoin(_) => {
                Err(config_err("residual markers are handled by the graph"))
            }
        }
    }

    pub(crate) fn visit(&mut self, f: &mut ParamVisitor<'_, T>) {
        match self {
            Layer::FpConv(l) => l.visit(f),
            Layer::BinConv(l) => l.visit(f),
            Layer::BatchNorm(l) => l.visit(f),
            Layer::Linear(l) => l.visit(f),
            Layer::ResidualJoin(j) => j.shortcut.iter_mut().for_each(|l| l.visit(f)),
            _ => {}
        }
    }

    /// Output shape of a non-residual layer.
    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        match self {
            Layer::FpConv(l) => l.spec.output_shape(input),
            Layer::BinConv(l) => l.output_shape(input),
            Layer::BatchNorm(l) => {
                if input.c != l.state.channels() {
                    return Err(Error::Shape {
                        context: "batchnorm channels",
                        expected: Shape4::new(input.n, l.state.channels(), input.h, input.w),
                        actual: input,
                    });
                }
                Ok(input)
            }
            Layer::Relu(_) => Ok(input),
            Layer::Pool(p) => p.spec.output_shape(input),
            Layer::GlobalAvgPool(_) => Ok(Shape4::new(input.n, input.c, 1, 1)),
            Layer::Linear(l) => {
                l.check(input)?;
                Ok(Shape4::new(input.n, l.out_features, 1, 1))
            }
            Layer::ResidualBegin | Layer::ResidualJoin(_) => Ok(input),
        }
    }
}
