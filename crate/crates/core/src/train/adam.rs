//! Adam without weight decay, followed by the binary-network clamps.

use std::collections::BTreeMap;

use crate::elastic_link::GAMMA_MIN_ABS;
use crate::error::{config_err, Result};
use crate::model::{LayerGraph, ParamKind, ParamView};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.v.get(name).map(Vec::as_slice)
    }

    /// One bias-corrected update of a single parameter slice.
    pub fn update(&mut self, name: &str, value: &mut [T], grad: &[T], lr: f64) -> Result<()> {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); value.len()]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); value.len()]);
        if m.len() != value.len() || grad.len() != value.len() {
            return Err(config_err(format!("moment shape mismatch for `{name}`")));
        }
        let t = self.step.max(1) as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(t));
        let c2 = T::one() - T::lit(self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            value[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

/// Applies one Adam step to every trainable parameter of `graph`, then clamps
/// latent weights to `[-1, 1]` and link divisors to `|gamma| >= 1e-3`.
pub fn adam_step<T: Scalar>(
    graph: &mut LayerGraph<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let mut result = Ok(());
    graph.visit_params(&mut |p: ParamView<'_, T>| {
        if !p.trainable || result.is_err() {
            return;
        }
        result = state.update(&p.name, p.value, p.grad, lr);
        match p.kind {
            ParamKind::Latent => {
                for v in p.value.iter_mut() {
                    *v = v.max(-T::one()).min(T::one());
                }
            }
            ParamKind::Gamma => {
                let floor = T::lit(GAMMA_MIN_ABS);
                for v in p.value.iter_mut() {
                    if v.abs() < floor {
                        *v = if *v < T::zero() { -floor } else { floor };
                    }
                }
            }
            _ => {}
        }
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let mut st = AdamState::<f64>::default();
        st.step = 1;
        let mut p = vec![0.5, -0.5, 0.0];
        st.update("w", &mut p, &[0.3, -2.0, 1e-3], 1e-3).unwrap();
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-0.5 + 1e-3)).abs() < 1e-9);
        assert!((p[2] + 1e-3 * 1e-3 / (1e-3 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut st = AdamState::<f64>::default();
        st.step = 1;
        let mut p = vec![0.25];
        st.update("w", &mut p, &[0.0], 1e-3).unwrap();
        assert_eq!(p, vec![0.25]);
        st.step = 2;
        st.update("w", &mut p, &[1.0], 1e-3).unwrap();
        st.step = 3;
        st.update("w", &mut p, &[0.0], 1e-3).unwrap();
        assert!((st.first_moment("w").unwrap()[0] - 0.09).abs() < 1e-12);
    }
}
