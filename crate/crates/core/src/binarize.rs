//! Sign binarization, the straight-through gradient, and the XNOR-style
//! scaling factors applied to binary convolution outputs.

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{pack_bits, BitTensor, Shape4, Tensor};

/// `+1` for `x >= 0`, `-1` otherwise.
#[inline]
pub fn sign<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

#[inline]
pub fn clip<T: Scalar>(x: T) -> T {
    x.max(-T::one()).min(T::one())
}

/// Forward activation used in front of binary convolutions.
///
/// `Clip` replaces Sign by `clip(x, -1, 1)`; it shares the straight-through
/// backward and exists so gradient checks have a differentiable forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Binarizer {
    #[default]
    Sign,
    Clip,
}

impl Binarizer {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Binarizer::Sign => sign(x),
            Binarizer::Clip => clip(x),
        }
    }

    pub fn apply_tensor<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.apply(v))
    }

    /// Value a zero-padded site takes after binarization.
    pub fn pad_value<T: Scalar>(self) -> T {
        self.apply(T::zero())
    }
}

pub fn sign_forward<T: Scalar>(x: &Tensor<T>) -> BitTensor {
    pack_bits(x)
}

/// Passes `grad_out` through where `-1 <= x_saved <= 1`, zero elsewhere.
pub fn ste_backward<T: Scalar>(grad_out: &Tensor<T>, x_saved: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(x_saved, |g, x| {
        if x >= -T::one() && x <= T::one() {
            g
        } else {
            T::zero()
        }
    })
}

/// Per-filter mean absolute weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleAlpha<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> ScaleAlpha<T> {
    pub fn ones(c_out: usize) -> Self {
        Self {
            values: vec![T::one(); c_out],
        }
    }
}

pub fn weight_alpha<T: Scalar>(w: &Tensor<T>) -> ScaleAlpha<T> {
    let s = w.shape();
    let per = s.c * s.h * s.w;
    let inv = if per == 0 {
        T::zero()
    } else {
        T::one() / T::lit(per as f64)
    };
    ScaleAlpha {
        values: w
            .data()
            .chunks(per.max(1))
            .take(s.n)
            .map(|f| f.iter().map(|v| v.abs()).sum::<T>() * inv)
            .collect(),
    }
}

/// Activation scaling map: one `(h_out, w_out)` matrix per batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleK<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ScaleK<T> {
    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> T {
        self.data[(n * self.h + y) * self.w + x]
    }
}

/// Mean of `|a|` over each output site's receptive field: all input
/// channels and the kernel window, with padded sites contributing zero.
pub fn activation_scale_k<T: Scalar>(a: &Tensor<T>, spec: &ConvSpec) -> Result<ScaleK<T>> {
    let s = a.shape();
    let out = spec.output_shape(Shape4::new(s.n, spec.c_in, s.h, s.w))?;
    let inv_c = T::one() / T::lit(s.c as f64);
    let mut chan_mean = vec![T::zero(); s.n * s.plane()];
    for n in 0..s.n {
        let dst = &mut chan_mean[n * s.plane()..(n + 1) * s.plane()];
        for c in 0..s.c {
            for (d, v) in dst.iter_mut().zip(a.plane(n, c)) {
                *d += v.abs();
            }
        }
        dst.iter_mut().for_each(|d| *d *= inv_c);
    }
    let inv_k = T::one() / T::lit((spec.k_h * spec.k_w) as f64);
    let mut data = Vec::with_capacity(out.n * out.plane());
    for n in 0..s.n {
        let m = &chan_mean[n * s.plane()..(n + 1) * s.plane()];
        for oy in 0..out.h {
            for ox in 0..out.w {
                let mut acc = T::zero();
                for ky in 0..spec.k_h {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..spec.k_w {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        acc += m[iy as usize * s.w + ix as usize];
                    }
                }
                data.push(acc * inv_k);
            }
        }
    }
    Ok(ScaleK {
        n: out.n,
        h: out.h,
        w: out.w,
        data,
    })
}
