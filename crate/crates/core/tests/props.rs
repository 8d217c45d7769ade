//! Property tests for the kernels against the naive oracles.

use elbnn_core::binarize::{clip, sign_forward, ste_backward};
use elbnn_core::binconv::binconv2d;
use elbnn_core::conv::{conv2d_forward, ConvSpec};
use elbnn_core::elastic_link::{
    sei_backward, sei_forward, sei_forward_cached, ElConfig, SqueezeGrouping,
};
use elbnn_core::oracle::{ref_binconv, ref_conv2d, ref_sei};
use elbnn_core::{Shape4, Tensor};
use proptest::prelude::*;

fn tensor(shape: Shape4, seed: u64) -> Tensor<f64> {
    let mut s = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_, _, _, _| {
        s = s
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
    })
}

fn grouping() -> impl Strategy<Value = SqueezeGrouping> {
    prop_oneof![
        Just(SqueezeGrouping::GammaConsistent),
        Just(SqueezeGrouping::LiteralSentence)
    ]
}

fn link_case() -> impl Strategy<Value = (usize, usize, bool, f64, SqueezeGrouping, u64)> {
    (
        1usize..=16,
        1usize..=16,
        any::<bool>(),
        prop_oneof![Just(0.5), Just(1.0), Just(3.0), 0.2f64..5.0],
        grouping(),
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sei_matches_explicit_matrix((ci, co, ds, gamma, grp, seed) in link_case()) {
        let cfg = ElConfig::<f64>::new(ci, co, ds).with_grouping(grp).with_gamma(gamma);
        let x = tensor(Shape4::new(2, ci, 4, 6), seed);
        let got = sei_forward(&x, &cfg).unwrap();
        let want = ref_sei(&x, &cfg).unwrap();
        prop_assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn sei_is_linear_without_pooling((ci, co, _ds, gamma, grp, seed) in link_case(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let cfg = ElConfig::<f64>::new(ci, co, false).with_grouping(grp).with_gamma(gamma);
        let s = Shape4::new(1, ci, 3, 3);
        let (x, y) = (tensor(s, seed), tensor(s, seed ^ 0x9e37));
        let mix = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
        let lhs = sei_forward(&mix, &cfg).unwrap();
        let (fx, fy) = (sei_forward(&x, &cfg).unwrap(), sei_forward(&y, &cfg).unwrap());
        let rhs = fx.zip_map(&fy, |u, v| a * u + b * v).unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((p - q).abs() <= 1e-9 * (1.0 + q.abs()));
        }
    }

    /// <sei(x), g> == <x, sei_backward(g)>, pooled or not.
    #[test]
    fn sei_backward_is_adjoint((ci, co, ds, gamma, grp, seed) in link_case()) {
        let cfg = ElConfig::<f64>::new(ci, co, ds).with_grouping(grp).with_gamma(gamma).learnable(true);
        let x = tensor(Shape4::new(2, ci, 4, 4), seed);
        let (y, cache) = sei_forward_cached(&x, &cfg).unwrap();
        let g = tensor(y.shape(), seed.rotate_left(17));
        let back = sei_backward(&g, &cfg, &cache).unwrap();
        let lhs = y.dot(&g).unwrap();
        let rhs = x.dot(&back.grad_input).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        // y is homogeneous of degree -1 in gamma
        prop_assert!((back.grad_gamma + lhs / gamma).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn binconv_matches_reference(
        ci in 1usize..=70,
        co in 1usize..=5,
        k in prop_oneof![Just(1usize), Just(3)],
        stride in 1usize..=2,
        pad in 0usize..=1,
        hw in 3usize..=7,
        depthwise in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let spec = if depthwise { ConvSpec::depthwise(ci, k, stride, pad) } else { ConvSpec::new(ci, co, k, stride, pad) };
        prop_assume!(hw + 2 * pad >= k);
        let x = tensor(Shape4::new(2, ci, hw, hw), seed);
        let w = tensor(spec.weight_shape(), !seed);
        let got: Tensor<f64> = binconv2d(&sign_forward(&x), &sign_forward(&w), &spec).unwrap();
        let want = ref_binconv(&x, &w, &spec).unwrap();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn float_conv_matches_reference(
        ci in 1usize..=6,
        co in 1usize..=4,
        k in 1usize..=3,
        stride in 1usize..=2,
        pad in 0usize..=1,
        hw in 3usize..=6,
        seed in any::<u64>(),
    ) {
        let spec = ConvSpec::new(ci, co, k, stride, pad);
        let x = tensor(Shape4::new(1, ci, hw, hw), seed);
        let w = tensor(spec.weight_shape(), seed ^ 1);
        let got = conv2d_forward(&x, &w, &spec, 0.0).unwrap();
        let want = ref_conv2d(&x, &w, &spec).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    /// Away from the clip corners the pass-through equals the derivative of clip.
    #[test]
    fn ste_is_derivative_of_clip(v in -3.0f64..3.0, g in -5.0f64..5.0) {
        prop_assume!((v.abs() - 1.0).abs() > 1e-2);
        let h = 1e-3;
        let numeric = (clip(v + h) - clip(v - h)) / (2.0 * h);
        let x = Tensor::from_vec(Shape4::new(1, 1, 1, 1), vec![v]).unwrap();
        let gt = Tensor::from_vec(Shape4::new(1, 1, 1, 1), vec![g]).unwrap();
        let analytic = ste_backward(&gt, &x).unwrap().data()[0];
        prop_assert!((analytic - g * numeric).abs() < 1e-4);
    }
}
