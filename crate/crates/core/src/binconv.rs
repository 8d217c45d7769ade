//! XNOR-popcount convolution over channel-packed tensors, scaling, and the
//! straight-through backward pass.
//!
//! Spatial padding is applied after binarization, so padded sites read as
//! `Sign(0) = +1`.

use rayon::prelude::*;

use crate::binarize::{ste_backward, Binarizer, ScaleAlpha, ScaleK};
use crate::conv::{conv2d_backward_input, conv2d_backward_weight, ConvSpec, ScaleMode};
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{popcount_dot, BitTensor, Shape4, Tensor, WORD_BITS};

/// Reads `len <= 64` bits of `words` starting at bit `start`.
#[inline]
fn extract_bits(words: &[u64], start: usize, len: usize) -> u64 {
    let (j, sh) = (start / WORD_BITS, start % WORD_BITS);
    let mut v = words[j] >> sh;
    if sh != 0 && sh + len > WORD_BITS {
        v |= words[j + 1] << (WORD_BITS - sh);
    }
    if len == WORD_BITS {
        v
    } else {
        v & ((1u64 << len) - 1)
    }
}

/// +/-1 dot product of `len` bits of `a` (from bit `start`) against the
/// first `len` bits of `w`.
#[inline]
fn range_dot(a: &[u64], start: usize, w: &[u64], len: usize) -> i32 {
    let mut differing = 0u32;
    let mut done = 0;
    for &ww in w {
        let take = (len - done).min(WORD_BITS);
        if take == 0 {
            break;
        }
        differing += (extract_bits(a, start + done, take) ^ ww).count_ones();
        done += take;
    }
    len as i32 - 2 * differing as i32
}

fn check_operands(a: &BitTensor, w: &BitTensor, spec: &ConvSpec) -> Result<Shape4> {
    let out = spec.output_shape(a.shape())?;
    if w.shape() != spec.weight_shape() {
        return Err(Error::Shape {
            context: "binconv weight",
            expected: spec.weight_shape(),
            actual: w.shape(),
        });
    }
    if spec.receptive_field() > 1 << 15 {
        return Err(config_err("receptive field exceeds 2^15 elements"));
    }
    Ok(out)
}

/// Integer-exact +/-1 correlation of packed activations with packed weights.
pub fn binconv2d<T: Scalar>(a: &BitTensor, w: &BitTensor, spec: &ConvSpec) -> Result<Tensor<T>> {
    let out_shape = check_operands(a, w, spec)?;
    let ins = a.shape();
    let (ho, wo) = (out_shape.h, out_shape.w);
    let (cig, cog) = (spec.in_per_group(), spec.out_per_group());
    // a padded site is all +1 across the valid channels
    let pad_site: Vec<u64> = a.valid_mask().to_vec();
    let mut out = Tensor::zeros(out_shape);
    if out_shape.numel() == 0 {
        return Ok(out);
    }
    let dense = spec.groups == 1;
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(i, plane)| {
            let (n, oc) = (i / spec.c_out, i % spec.c_out);
            let start = (oc / cog) * cig;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0i32;
                    for ky in 0..spec.k_h {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        for kx in 0..spec.k_w {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            let site =
                                if iy < 0 || ix < 0 || iy >= ins.h as isize || ix >= ins.w as isize
                                {
                                    &pad_site[..]
                                } else {
                                    a.site(n, iy as usize, ix as usize)
                                };
                            let ws = w.site(oc, ky, kx);
                            acc += if dense {
                                popcount_dot(site, ws, cig)
                            } else {
                                range_dot(site, start, ws, cig)
                            };
                        }
                    }
                    plane[oy * wo + ox] = T::from_count(acc);
                }
            }
        });
    Ok(out)
}

/// `y[n,f,y,x] * K[n,y,x] * alpha[f]`, with factors dropped per `spec.scale_mode`.
pub fn apply_scale<T: Scalar>(
    y: &Tensor<T>,
    k: Option<&ScaleK<T>>,
    alpha: &ScaleAlpha<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let s = y.shape();
    let mut out = y.clone();
    if spec.scale_mode == ScaleMode::None {
        return Ok(out);
    }
    if alpha.values.len() != s.c {
        return Err(config_err(format!(
            "alpha has {} entries for {} filters",
            alpha.values.len(),
            s.c
        )));
    }
    let k = match spec.scale_mode {
        ScaleMode::AlphaAndK => {
            let k = k.ok_or_else(|| config_err("alpha_and_k scaling needs a K map"))?;
            if (k.n, k.h, k.w) != (s.n, s.h, s.w) {
                return Err(config_err("K map does not match the convolution output"));
            }
            Some(k)
        }
        _ => None,
    };
    for n in 0..s.n {
        for (f, &a) in alpha.values.iter().enumerate() {
            let plane = out.plane_mut(n, f);
            match k {
                Some(k) => {
                    let km = &k.data[n * s.plane()..(n + 1) * s.plane()];
                    for (v, &kv) in plane.iter_mut().zip(km) {
                        *v = *v * kv * a;
                    }
                }
                None => plane.iter_mut().for_each(|v| *v *= a),
            }
        }
    }
    Ok(out)
}

pub struct BinConvGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_weights: Tensor<T>,
}

/// Backward of `apply_scale(binconv2d(B(x), B(w)))` with the scaling factors
/// held constant and both binarizations routed through the STE.
pub fn binconv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    saved_weights: &Tensor<T>,
    spec: &ConvSpec,
    k: Option<&ScaleK<T>>,
    alpha: &ScaleAlpha<T>,
    binarizer: Binarizer,
) -> Result<BinConvGrads<T>> {
    let grad_scaled = apply_scale(grad_out, k, alpha, spec)?;
    let act = binarizer.apply_tensor(saved_input);
    let wb = binarizer.apply_tensor(saved_weights);
    let gx = conv2d_backward_input(&grad_scaled, &wb, spec, saved_input.shape())?;
    let gw = conv2d_backward_weight(&grad_scaled, &act, spec, binarizer.pad_value())?;
    Ok(BinConvGrads {
        grad_input: ste_backward(&gx, saved_input)?,
        grad_weights: ste_backward(&gw, saved_weights)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::weight_alpha;
    use crate::tensor::pack_bits;

    #[test]
    fn extract_bits_across_words() {
        let words = [0xF000_0000_0000_0000u64, 0b1011];
        assert_eq!(extract_bits(&words, 60, 8), 0b1011_1111);
        assert_eq!(extract_bits(&words, 0, 64), words[0]);
        assert_eq!(extract_bits(&words, 64, 3), 0b011);
    }

    #[test]
    fn aligned_1x1_counts_channels() {
        let spec = ConvSpec::new(4, 1, 1, 1, 0);
        let a = pack_bits(&Tensor::<f32>::full(Shape4::new(1, 4, 3, 3), 1.0));
        let w = pack_bits(&Tensor::<f32>::full(spec.weight_shape(), 1.0));
        let y: Tensor<f32> = binconv2d(&a, &w, &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn single_site_is_popcount_dot() {
        let spec = ConvSpec::new(70, 1, 1, 1, 0);
        let x = Tensor::<f32>::from_fn(Shape4::new(1, 70, 1, 1), |_, c, _, _| {
            ((c * 7 % 5) as f32) - 2.0
        });
        let wt =
            Tensor::<f32>::from_fn(spec.weight_shape(), |_, c, _, _| ((c * 3 % 4) as f32) - 1.5);
        let (a, w) = (pack_bits(&x), pack_bits(&wt));
        let y: Tensor<f32> = binconv2d(&a, &w, &spec).unwrap();
        assert_eq!(y.data()[0] as i32, popcount_dot(a.words(), w.words(), 70));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let spec = ConvSpec::new(4, 2, 3, 1, 1);
        let a = pack_bits(&Tensor::<f32>::zeros(Shape4::new(1, 4, 4, 4)));
        let w = pack_bits(&Tensor::<f32>::zeros(Shape4::new(2, 3, 3, 3)));
        assert!(binconv2d::<f32>(&a, &w, &spec).is_err());
    }

    #[test]
    fn scale_examples() {
        let s = Shape4::new(1, 1, 1, 1);
        let y = Tensor::<f32>::full(s, 4.0);
        let id = apply_scale(
            &y,
            None,
            &ScaleAlpha::ones(1),
            &ConvSpec::new(1, 1, 1, 1, 0),
        )
        .unwrap();
        assert_eq!(id, y);
        let k = ScaleK {
            n: 1,
            h: 1,
            w: 1,
            data: vec![2.0],
        };
        let spec = ConvSpec::new(1, 1, 1, 1, 0).with_scale(ScaleMode::AlphaAndK);
        let out = apply_scale(&y, Some(&k), &ScaleAlpha { values: vec![0.5] }, &spec).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let none = ConvSpec::new(1, 1, 1, 1, 0).with_scale(ScaleMode::None);
        let out = apply_scale(&y, Some(&k), &ScaleAlpha { values: vec![0.5] }, &none).unwrap();
        assert_eq!(out, y);
        assert!(apply_scale(&y, None, &ScaleAlpha { values: vec![0.5] }, &spec).is_err());
    }

    #[test]
    fn backward_single_site_hand_chain_rule() {
        // x = (0.3, -0.6), W rows (1.2 -> +1, -0.4 -> -1), (-0.2 -> -1, -0.9 -> -1)
        let spec = ConvSpec::new(2, 2, 1, 1, 0).with_scale(ScaleMode::None);
        let x = Tensor::from_vec(Shape4::new(1, 2, 1, 1), vec![0.3f64, -0.6]).unwrap();
        let w = Tensor::from_vec(spec.weight_shape(), vec![1.2f64, -0.4, -0.2, -0.9]).unwrap();
        let g = Tensor::from_vec(Shape4::new(1, 2, 1, 1), vec![1.0f64, 2.0]).unwrap();
        let grads = binconv_backward(
            &g,
            &x,
            &w,
            &spec,
            None,
            &ScaleAlpha::ones(2),
            Binarizer::Sign,
        )
        .unwrap();
        // Sign(W)^T g = (1*1 + -1*2, -1*1 + -1*2) = (-1, -3)
        assert_eq!(grads.grad_input.data(), &[-1.0, -3.0]);
        // g_f * Sign(x_c); the latent 1.2 lies outside the STE window
        assert_eq!(grads.grad_weights.data(), &[0.0, -1.0, 2.0, -2.0]);
    }

    #[test]
    fn zero_grad_gives_zero_grads() {
        let spec = ConvSpec::new(3, 2, 3, 1, 1);
        let x = Tensor::<f64>::from_fn(Shape4::new(2, 3, 4, 4), |n, c, y, x| {
            ((n + c + y * x) as f64).sin()
        });
        let w = Tensor::<f64>::from_fn(spec.weight_shape(), |a, b, c, d| {
            ((a * 3 + b + c + d) as f64).cos() * 0.3
        });
        let g = Tensor::zeros(Shape4::new(2, 2, 4, 4));
        let alpha = weight_alpha(&w);
        let grads = binconv_backward(&g, &x, &w, &spec, None, &alpha, Binarizer::Sign).unwrap();
        assert!(grads.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_weights.data().iter().all(|&v| v == 0.0));
    }
}
