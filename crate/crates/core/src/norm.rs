//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::lit(BN_EPS),
            momentum: T::lit(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn check(&self, s: Shape4) -> Result<()> {
        if s.c != self.channels() {
            return Err(Error::Shape {
                context: "batchnorm channels",
                expected: Shape4::new(s.n, self.channels(), s.h, s.w),
                actual: s,
            });
        }
        Ok(())
    }

    /// Sets the running statistics to the (biased) statistics of `x`.
    pub fn freeze_from_batch(&mut self, x: &Tensor<T>) -> Result<()> {
        self.check(x.shape())?;
        let (mean, var) = batch_stats(x);
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }
}

/// Per-channel mean and biased variance over `(n, h, w)`.
fn batch_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = T::lit((s.n * s.plane()).max(1) as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += x.plane(n, c).iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// Values retained from a forward pass for [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Normalizes `x`. With `use_batch_stats` the batch statistics are used and,
/// if `update_running` is also set, folded into the running averages.
pub fn batchnorm_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BnState<T>,
    use_batch_stats: bool,
    update_running: bool,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let s = x.shape();
    state.check(s)?;
    let (mean, var) = if use_batch_stats {
        let (m, v) = batch_stats(x);
        if update_running {
            let mo = state.momentum;
            for c in 0..s.c {
                state.running_mean[c] = (T::one() - mo) * state.running_mean[c] + mo * m[c];
                state.running_var[c] = (T::one() - mo) * state.running_var[c] + mo * v[c];
            }
        }
        (m, v)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + state.eps).sqrt())
        .collect();
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, is, g, b) = (mean[c], inv_std[c], state.scale[c], state.shift[c]);
            let xh = x_hat.plane_mut(n, c);
            for v in xh.iter_mut() {
                *v = (*v - m) * is;
            }
            for (o, &h) in y.plane_mut(n, c).iter_mut().zip(xh.iter()) {
                *o = g * h + b;
            }
        }
    }
    Ok((
        y,
        BnCache {
            x_hat,
            inv_std,
            batch_stats: use_batch_stats,
        },
    ))
}

/// Training mode normalizes with batch statistics and updates the running
/// averages; eval mode uses the running statistics.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BnState<T>,
    training: bool,
) -> Result<Tensor<T>> {
    batchnorm_forward_cached(x, state, training, training).map(|(y, _)| y)
}

pub struct BnGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_scale: Vec<T>,
    pub grad_shift: Vec<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    grad: &Tensor<T>,
    cache: &BnCache<T>,
    state: &BnState<T>,
) -> Result<BnGrads<T>> {
    let s = grad.shape();
    cache.x_hat.expect_shape(s, "batchnorm grad")?;
    let count = T::lit((s.n * s.plane()).max(1) as f64);
    let mut grad_scale = vec![T::zero(); s.c];
    let mut grad_shift = vec![T::zero(); s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            for (&g, &h) in grad.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                grad_scale[c] += g * h;
                grad_shift[c] += g;
            }
        }
    }
    let mut gx = grad.clone();
    for c in 0..s.c {
        let k = state.scale[c] * cache.inv_std[c];
        let (mg, mgh) = (grad_shift[c] / count, grad_scale[c] / count);
        for n in 0..s.n {
            let xh = cache.x_hat.plane(n, c);
            for (o, &h) in gx.plane_mut(n, c).iter_mut().zip(xh) {
                *o = if cache.batch_stats {
                    k * (*o - mg - h * mgh)
                } else {
                    k * *o
                };
            }
        }
    }
    Ok(BnGrads {
        grad_input: gx,
        grad_scale,
        grad_shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sample_hand_normalization() {
        let x = Tensor::from_vec(Shape4::new(2, 1, 1, 1), vec![1.0f64, 3.0]).unwrap();
        let mut st = BnState::new(1);
        st.scale[0] = 2.0;
        st.shift[0] = 1.0;
        let y = batchnorm_forward(&x, &mut st, true).unwrap();
        let d = (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - (-2.0 / d + 1.0)).abs() < 1e-12);
        assert!((y.data()[1] - (2.0 / d + 1.0)).abs() < 1e-12);
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 3.0).abs() < 1e-4);
        assert!((st.running_mean[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_scale_gives_shift() {
        let x = Tensor::from_fn(Shape4::new(3, 2, 2, 2), |n, c, y, x| {
            (n * 5 + c + y * 2 + x) as f64
        });
        let mut st = BnState::new(2);
        st.scale = vec![0.0, 0.0];
        st.shift = vec![0.25, -1.5];
        let y = batchnorm_forward(&x, &mut st, true).unwrap();
        for n in 0..3 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn unit_stats_pass_through() {
        let x = Tensor::from_vec(Shape4::new(2, 1, 1, 1), vec![-1.0f64, 1.0]).unwrap();
        let mut st = BnState::new(1);
        let y = batchnorm_forward(&x, &mut st, true).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_channel_is_finite() {
        let x = Tensor::<f32>::full(Shape4::new(4, 3, 2, 2), 7.0);
        let mut st = BnState::new(3);
        let y = batchnorm_forward(&x, &mut st, true).unwrap();
        assert!(y.is_finite());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_stats_make_eval_match_train() {
        let x = Tensor::from_fn(Shape4::new(4, 3, 3, 3), |n, c, y, x| {
            ((n * 31 + c * 7 + y * 3 + x) as f64).sin() * 2.0 + c as f64
        });
        let mut st = BnState::new(3);
        st.scale = vec![1.5, 0.5, -1.0];
        st.shift = vec![0.1, 0.2, 0.3];
        let train = batchnorm_forward_cached(&x, &mut st, true, false)
            .unwrap()
            .0;
        st.freeze_from_batch(&x).unwrap();
        let eval = batchnorm_forward(&x, &mut st, false).unwrap();
        for (a, b) in train.data().iter().zip(eval.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let shape = Shape4::new(3, 2, 2, 2);
        let x = Tensor::from_fn(shape, |n, c, y, x| {
            ((n * 13 + c * 5 + y * 3 + x) as f64 * 0.7).sin()
        });
        let u = Tensor::from_fn(shape, |n, c, y, x| {
            ((n + 2 * c + 3 * y + x) as f64 * 0.3).cos()
        });
        let mut st = BnState::new(2);
        st.scale = vec![1.3, -0.7];
        st.shift = vec![0.2, 0.4];
        let loss = |x: &Tensor<f64>, st: &mut BnState<f64>| {
            let (y, _) = batchnorm_forward_cached(x, st, true, false).unwrap();
            y.dot(&u).unwrap()
        };
        let (_, cache) = batchnorm_forward_cached(&x, &mut st, true, false).unwrap();
        let g = batchnorm_backward(&u, &cache, &st).unwrap();
        let h = 1e-5;
        for i in 0..shape.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&xp, &mut st) - loss(&xm, &mut st)) / (2.0 * h);
            assert!((num - g.grad_input.data()[i]).abs() < 1e-6);
        }
        let mut sp = st.clone();
        sp.scale[1] += h;
        let mut sm = st.clone();
        sm.scale[1] -= h;
        let num = (loss(&x, &mut sp) - loss(&x, &mut sm)) / (2.0 * h);
        assert!((num - g.grad_scale[1]).abs() < 1e-6);
    }
}
