//! Convolution geometry and the dense real-valued kernels shared by the
//! full-precision layers and every backward pass.

use rayon::prelude::*;

use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// Which of the scaling factors multiply a binary convolution's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ScaleMode {
    None,
    #[default]
    AlphaOnly,
    AlphaAndK,
}

impl ScaleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::None => "none",
            ScaleMode::AlphaOnly => "alpha_only",
            ScaleMode::AlphaAndK => "alpha_and_k",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub scale_mode: ScaleMode,
}

impl ConvSpec {
    /// Dense square-kernel convolution with `alpha_only` scaling.
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            c_in,
            c_out,
            k_h: k,
            k_w: k,
            stride,
            pad,
            groups: 1,
            scale_mode: ScaleMode::AlphaOnly,
        }
    }

    pub fn depthwise(c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            groups: c,
            ..Self::new(c, c, k, stride, pad)
        }
    }

    pub fn with_scale(mut self, mode: ScaleMode) -> Self {
        self.scale_mode = mode;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.c_in && self.groups == self.c_out
    }

    pub fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Elements in one output site's receptive field.
    pub fn receptive_field(&self) -> usize {
        self.in_per_group() * self.k_h * self.k_w
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(self.c_out, self.in_per_group(), self.k_h, self.k_w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.groups == 0 {
            return Err(config_err("conv channels and groups must be positive"));
        }
        if self.k_h == 0 || self.k_w == 0 || self.stride == 0 {
            return Err(config_err("conv kernel and stride must be positive"));
        }
        if self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(config_err(format!(
                "channels {}->{} not divisible by groups {}",
                self.c_in, self.c_out, self.groups
            )));
        }
        Ok(())
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.k_h || wp < self.k_w {
            return Err(config_err(format!(
                "input {h}x{w} (pad {}) smaller than kernel {}x{}",
                self.pad, self.k_h, self.k_w
            )));
        }
        Ok((
            (hp - self.k_h) / self.stride + 1,
            (wp - self.k_w) / self.stride + 1,
        ))
    }

    /// Validates `input` against the spec and returns the output shape.
    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.validate()?;
        if input.c != self.c_in {
            return Err(Error::Shape {
                context: "conv input channels",
                expected: Shape4::new(input.n, self.c_in, input.h, input.w),
                actual: input,
            });
        }
        let (ho, wo) = self.out_hw(input.h, input.w)?;
        Ok(Shape4::new(input.n, self.c_out, ho, wo))
    }

    pub fn macs(&self, input: Shape4) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok((out.numel() * self.receptive_field()) as u64)
    }
}

/// Copies `x` into a buffer padded by `pad` on each spatial side.
fn padded<T: Scalar>(x: &Tensor<T>, pad: usize, pad_value: T) -> Tensor<T> {
    if pad == 0 {
        return x.clone();
    }
    let s = x.shape();
    let ps = Shape4::new(s.n, s.c, s.h + 2 * pad, s.w + 2 * pad);
    let mut out = Tensor::full(ps, pad_value);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                let d0 = (y + pad) * ps.w + pad;
                dst[d0..d0 + s.w].copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
            }
        }
    }
    out
}

/// Accumulates `wv * src[oy*s+ky][ox*s+kx]` into every output site.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_window<T: Scalar>(
    out: &mut [T],
    src: &[T],
    src_w: usize,
    wv: T,
    ky: usize,
    kx: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    for oy in 0..ho {
        let row = (oy * stride + ky) * src_w + kx;
        let dst = &mut out[oy * wo..(oy + 1) * wo];
        if stride == 1 {
            for (o, &v) in dst.iter_mut().zip(&src[row..row + wo]) {
                *o += wv * v;
            }
        } else {
            for (ox, o) in dst.iter_mut().enumerate() {
                *o += wv * src[row + ox * stride];
            }
        }
    }
}

/// Cross-correlation of `x` with `w`; padded sites take `pad_value`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    pad_value: T,
) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(x.shape())?;
    w.expect_shape(spec.weight_shape(), "conv weight")?;
    let xp = padded(x, spec.pad, pad_value);
    let ps = xp.shape();
    let (ho, wo) = (out_shape.h, out_shape.w);
    let (cig, cog) = (spec.in_per_group(), spec.out_per_group());
    let mut out = Tensor::zeros(out_shape);
    if out_shape.numel() == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(i, plane)| {
            let (n, oc) = (i / spec.c_out, i % spec.c_out);
            let g = oc / cog;
            for icg in 0..cig {
                let src = xp.plane(n, g * cig + icg);
                for ky in 0..spec.k_h {
                    for kx in 0..spec.k_w {
                        let wv = w.at(oc, icg, ky, kx);
                        accumulate_window(plane, src, ps.w, wv, ky, kx, spec.stride, ho, wo);
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient of [`conv2d_forward`] with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    grad: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    input_shape: Shape4,
) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(input_shape)?;
    grad.expect_shape(out_shape, "conv grad")?;
    w.expect_shape(spec.weight_shape(), "conv weight")?;
    let (hp, wp) = (input_shape.h + 2 * spec.pad, input_shape.w + 2 * spec.pad);
    let ps = Shape4::new(input_shape.n, input_shape.c, hp, wp);
    let (ho, wo) = (out_shape.h, out_shape.w);
    let (cig, cog) = (spec.in_per_group(), spec.out_per_group());
    let mut buf = Tensor::<T>::zeros(ps);
    let per_item = spec.c_in * hp * wp;
    if per_item > 0 {
        buf.data_mut()
            .par_chunks_mut(per_item)
            .enumerate()
            .for_each(|(n, item)| {
                for oc in 0..spec.c_out {
                    let g = oc / cog;
                    let gp = grad.plane(n, oc);
                    for icg in 0..cig {
                        let ic = g * cig + icg;
                        let dst = &mut item[ic * hp * wp..(ic + 1) * hp * wp];
                        for ky in 0..spec.k_h {
                            for kx in 0..spec.k_w {
                                let wv = w.at(oc, icg, ky, kx);
                                for oy in 0..ho {
                                    let row = (oy * spec.stride + ky) * wp + kx;
                                    let src = &gp[oy * wo..(oy + 1) * wo];
                                    if spec.stride == 1 {
                                        for (d, &gv) in dst[row..row + wo].iter_mut().zip(src) {
                                            *d += wv * gv;
                                        }
                                    } else {
                                        for (ox, &gv) in src.iter().enumerate() {
                                            dst[row + ox * spec.stride] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
    }
    if spec.pad == 0 {
        return Ok(buf);
    }
    Ok(Tensor::from_fn(input_shape, |n, c, y, x| {
        buf.at(n, c, y + spec.pad, x + spec.pad)
    }))
}

/// Gradient of [`conv2d_forward`] with respect to its weights.
pub fn conv2d_backward_weight<T: Scalar>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    spec: &ConvSpec,
    pad_value: T,
) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(x.shape())?;
    grad.expect_shape(out_shape, "conv grad")?;
    let xp = padded(x, spec.pad, pad_value);
    let wp = xp.shape().w;
    let (ho, wo) = (out_shape.h, out_shape.w);
    let (cig, cog) = (spec.in_per_group(), spec.out_per_group());
    let per_filter = cig * spec.k_h * spec.k_w;
    let mut gw = Tensor::<T>::zeros(spec.weight_shape());
    gw.data_mut()
        .par_chunks_mut(per_filter)
        .enumerate()
        .for_each(|(oc, filt)| {
            let g = oc / cog;
            for n in 0..out_shape.n {
                let gp = grad.plane(n, oc);
                for icg in 0..cig {
                    let src = xp.plane(n, g * cig + icg);
                    for ky in 0..spec.k_h {
                        for kx in 0..spec.k_w {
                            let mut acc = T::zero();
                            for oy in 0..ho {
                                let row = (oy * spec.stride + ky) * wp + kx;
                                let gr = &gp[oy * wo..(oy + 1) * wo];
                                if spec.stride == 1 {
                                    for (&gv, &v) in gr.iter().zip(&src[row..row + wo]) {
                                        acc += gv * v;
                                    }
                                } else {
                                    for (ox, &gv) in gr.iter().enumerate() {
                                        acc += gv * src[row + ox * spec.stride];
                                    }
                                }
                            }
                            filt[(icg * spec.k_h + ky) * spec.k_w + kx] += acc;
                        }
                    }
                }
            }
        });
    Ok(gw)
}

/// Square pooling window description (floor mode).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolSpec {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// The 2x2 / stride-2 window used for downsampling.
    pub const fn downsample() -> Self {
        Self::new(2, 2, 0)
    }

    pub fn output_shape(&self, s: Shape4) -> Result<Shape4> {
        let (hp, wp) = (s.h + 2 * self.pad, s.w + 2 * self.pad);
        if hp < self.kernel || wp < self.kernel || self.stride == 0 {
            return Err(config_err(format!(
                "pool window {} larger than input {}x{}",
                self.kernel, s.h, s.w
            )));
        }
        Ok(Shape4::new(
            s.n,
            s.c,
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }
}

/// Max pooling; also returns, per output element, the flat input index of
/// the first maximal site in row-major window order.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, p: PoolSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    let os = p.output_shape(s)?;
    let mut out = Tensor::zeros(os);
    let mut arg = vec![0usize; os.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..p.kernel {
                        for kx in 0..p.kernel {
                            let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                            let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            let idx = s.index(n, c, iy as usize, ix as usize);
                            let v = x.data()[idx];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let o = os.index(n, c, oy, ox);
                    let (v, idx) = best.ok_or_else(|| config_err("empty pooling window"))?;
                    out.data_mut()[o] = v;
                    arg[o] = idx;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2d_backward<T: Scalar>(
    grad: &Tensor<T>,
    argmax: &[usize],
    input_shape: Shape4,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    for (&g, &i) in grad.data().iter().zip(argmax) {
        gx.data_mut()[i] += g;
    }
    gx
}

/// Average pooling without padding.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, p: PoolSpec) -> Result<Tensor<T>> {
    if p.pad != 0 {
        return Err(config_err("average pooling does not support padding"));
    }
    let s = x.shape();
    let os = p.output_shape(s)?;
    let inv = T::one() / T::lit((p.kernel * p.kernel) as f64);
    Ok(Tensor::from_fn(os, |n, c, oy, ox| {
        let mut acc = T::zero();
        for ky in 0..p.kernel {
            for kx in 0..p.kernel {
                acc += x.at(n, c, oy * p.stride + ky, ox * p.stride + kx);
            }
        }
        acc * inv
    }))
}

pub fn avg_pool2d_backward<T: Scalar>(
    grad: &Tensor<T>,
    p: PoolSpec,
    input_shape: Shape4,
) -> Tensor<T> {
    let os = grad.shape();
    let inv = T::one() / T::lit((p.kernel * p.kernel) as f64);
    let mut gx = Tensor::zeros(input_shape);
    for n in 0..os.n {
        for c in 0..os.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = grad.at(n, c, oy, ox) * inv;
                    for ky in 0..p.kernel {
                        for kx in 0..p.kernel {
                            let i = input_shape.index(n, c, oy * p.stride + ky, ox * p.stride + kx);
                            gx.data_mut()[i] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / T::lit(s.plane().max(1) as f64);
    Tensor::from_fn(Shape4::new(s.n, s.c, 1, 1), |n, c, _, _| {
        x.plane(n, c).iter().copied().sum::<T>() * inv
    })
}

pub fn global_avg_pool_backward<T: Scalar>(grad: &Tensor<T>, input_shape: Shape4) -> Tensor<T> {
    let inv = T::one() / T::lit(input_shape.plane().max(1) as f64);
    Tensor::from_fn(input_shape, |n, c, _, _| grad.at(n, c, 0, 0) * inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape4) -> Tensor<f64> {
        let data = (0..shape.numel())
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn output_shapes() {
        let s = ConvSpec::new(8, 4, 3, 2, 1);
        assert_eq!(
            s.output_shape(Shape4::new(2, 8, 7, 7)).unwrap(),
            Shape4::new(2, 4, 4, 4)
        );
        assert!(ConvSpec::new(3, 4, 3, 1, 0)
            .output_shape(Shape4::new(1, 8, 5, 5))
            .is_err());
        assert!(ConvSpec {
            groups: 3,
            ..ConvSpec::new(4, 6, 1, 1, 0)
        }
        .validate()
        .is_err());
    }

    // <conv(x, w), g> must equal <x, conv_input^T(g)> and <w, conv_weight^T(g)>.
    #[test]
    fn backward_kernels_are_adjoints() {
        for spec in [
            ConvSpec::new(3, 5, 3, 1, 1),
            ConvSpec::new(4, 2, 3, 2, 1),
            ConvSpec::new(6, 6, 1, 2, 0),
            ConvSpec::depthwise(4, 3, 2, 1),
        ] {
            let xs = Shape4::new(2, spec.c_in, 6, 5);
            let x = ramp(xs);
            let w = ramp(spec.weight_shape()).map(|v| v * 0.5 + 0.1);
            let y = conv2d_forward(&x, &w, &spec, 0.0).unwrap();
            let g = ramp(y.shape()).map(|v| v.cos());
            let lhs = y.dot(&g).unwrap();
            let gx = conv2d_backward_input(&g, &w, &spec, xs).unwrap();
            let gw = conv2d_backward_weight(&g, &x, &spec, 0.0).unwrap();
            assert!((lhs - x.dot(&gx).unwrap()).abs() < 1e-9);
            assert!((lhs - w.dot(&gw).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn max_pool_first_tie_wins() {
        let x = Tensor::from_vec(Shape4::new(1, 1, 2, 2), vec![3.0f32, 3.0, 1.0, 3.0]).unwrap();
        let (y, arg) = max_pool2d(&x, PoolSpec::downsample()).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(arg, vec![0]);
        let g = max_pool2d_backward(&Tensor::scalar(2.0f32), &arg, x.shape());
        assert_eq!(g.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_floor_mode_on_odd_input() {
        let x = ramp(Shape4::new(1, 2, 5, 5));
        let (y, _) = max_pool2d(&x, PoolSpec::downsample()).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 2, 2, 2));
        let a = avg_pool2d(&x, PoolSpec::downsample()).unwrap();
        assert_eq!(a.shape(), Shape4::new(1, 2, 2, 2));
    }
}
