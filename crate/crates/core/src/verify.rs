//! Full kernel-versus-oracle suite.
//!
//! The kernels under test are passed in as plain function pointers so that a
//! deliberately broken variant can be swapped in and shown to fail.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binarize::ste_backward;
use crate::binconv::binconv2d;
use crate::conv::ConvSpec;
use crate::elastic_link::{gamma_init, sei_forward, ElConfig, SqueezeGrouping};
use crate::error::Result;
use crate::model::layers::{BatchNorm, FpConv, Layer, Linear};
use crate::model::{build_el_bottleneck, LayerGraph, Mode, ParamKind, ParamView, Toggles};
use crate::oracle::{finite_diff, ref_binconv, ref_sei, OracleReport};
use crate::tensor::{channel_mask, pack_bits, words_for, BitTensor, Shape4, Tensor};
use crate::train::softmax_cross_entropy;

pub type PopcountFn = fn(&[u64], &[u64], usize) -> i32;
pub type BinconvFn = fn(&BitTensor, &BitTensor, &ConvSpec) -> Result<Tensor<f32>>;
pub type SeiFn = fn(&Tensor<f32>, &ElConfig<f32>) -> Result<Tensor<f32>>;
pub type SteFn = fn(&Tensor<f32>, &Tensor<f32>) -> Result<Tensor<f32>>;
pub type GammaInitFn = fn(usize, usize) -> f32;

#[derive(Clone, Copy)]
pub struct Kernels {
    pub popcount_dot: PopcountFn,
    pub binconv2d: BinconvFn,
    pub sei_forward: SeiFn,
    pub ste_backward: SteFn,
    pub gamma_init: GammaInitFn,
}

impl Default for Kernels {
    fn default() -> Self {
        Self {
            popcount_dot: crate::tensor::popcount_dot,
            binconv2d: binconv2d::<f32>,
            sei_forward: sei_forward::<f32>,
            ste_backward: ste_backward::<f32>,
            gamma_init: gamma_init::<f32>,
        }
    }
}

/// Names accepted by [`Kernels::mutated`].
pub const MUTANTS: [&str; 5] = [
    "popcount_dot",
    "binconv2d",
    "sei_forward",
    "ste_backward",
    "gamma_init",
];

fn bad_popcount(a: &[u64], b: &[u64], n: usize) -> i32 {
    crate::tensor::popcount_dot(a, b, n) + 1
}

fn bump_first(mut t: Tensor<f32>) -> Tensor<f32> {
    if let Some(v) = t.data_mut().first_mut() {
        *v += 1.0;
    }
    t
}

fn bad_binconv(a: &BitTensor, w: &BitTensor, spec: &ConvSpec) -> Result<Tensor<f32>> {
    binconv2d(a, w, spec).map(bump_first)
}

fn bad_sei(x: &Tensor<f32>, cfg: &ElConfig<f32>) -> Result<Tensor<f32>> {
    sei_forward(x, cfg).map(bump_first)
}

/// Treats the clip corners as saturated.
fn bad_ste(g: &Tensor<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    g.zip_map(x, |g, x| if x.abs() < 1.0 { g } else { 0.0 })
}

fn bad_gamma_init(c_in: usize, c_out: usize) -> f32 {
    gamma_init::<f32>(c_in, c_out) + 1.0
}

impl Kernels {
    /// Production kernels with `name` replaced by an off-by-one variant.
    pub fn mutated(name: &str) -> Result<Self> {
        let mut k = Self::default();
        match name {
            "popcount_dot" => k.popcount_dot = bad_popcount,
            "binconv2d" => k.binconv2d = bad_binconv,
            "sei_forward" => k.sei_forward = bad_sei,
            "ste_backward" => k.ste_backward = bad_ste,
            "gamma_init" => k.gamma_init = bad_gamma_init,
            other => {
                return Err(crate::error::Error::Config(format!(
                    "unknown kernel `{other}` (expected one of {})",
                    MUTANTS.join(", ")
                )))
            }
        }
        Ok(k)
    }
}

const SEED: u64 = 42;

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Values in {-1, +1} with occasional exact zeros (which binarize to +1).
fn pm1_tensor(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, _, _, _| match rng.gen_range(0..10) {
        0 => 0.0,
        r if r % 2 == 0 => 1.0,
        _ => -1.0,
    })
}

/// Shapes exercised by the binary convolution check: dense 1x1, dense 3x3
/// and depthwise 3x3, strides 1-2, pads 0-1, channel counts on both sides
/// of the 64-bit word boundary.
pub fn binconv_sweep() -> Vec<(Shape4, ConvSpec)> {
    let mut out = Vec::new();
    for c_in in [1, 3, 8, 63, 64, 65, 100] {
        for kind in 0..3 {
            for stride in [1, 2] {
                for pad in [0, 1] {
                    for size in [5, 6, 7] {
                        let spec = match kind {
                            0 => ConvSpec::new(c_in, 4 + c_in % 3, 1, stride, pad),
                            1 => ConvSpec::new(c_in, 3 + c_in % 4, 3, stride, pad),
                            _ => ConvSpec::depthwise(c_in, 3, stride, pad),
                        };
                        out.push((Shape4::new(2, c_in, size, size + kind % 2), spec));
                    }
                }
            }
        }
    }
    out
}

pub fn check_popcount(k: &Kernels) -> OracleReport {
    let mut rep = OracleReport::new("popcount_dot vs explicit +/-1 dot", 0.0, false);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for case in 0..1000 {
        let n_valid = rng.gen_range(1..=260);
        let mask = channel_mask(n_valid);
        let a: Vec<u64> = mask.iter().map(|m| rng.gen::<u64>() & m).collect();
        let b: Vec<u64> = mask.iter().map(|m| rng.gen::<u64>() & m).collect();
        let expected: i64 = (0..n_valid)
            .map(|i| {
                let (ba, bb) = ((a[i / 64] >> (i % 64)) & 1, (b[i / 64] >> (i % 64)) & 1);
                if ba == bb {
                    1
                } else {
                    -1
                }
            })
            .sum();
        debug_assert_eq!(a.len(), words_for(n_valid));
        let got = (k.popcount_dot)(&a, &b, n_valid);
        rep.record(
            &format!("case {case} n={n_valid}"),
            &[got as f64],
            &[expected as f64],
        );
    }
    rep
}

pub fn check_binconv(k: &Kernels) -> OracleReport {
    let mut rep = OracleReport::new("binconv2d vs ref_conv2d on +/-1 tensors", 0.0, false);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    for (shape, spec) in binconv_sweep() {
        let x = pm1_tensor(shape, &mut rng);
        let w = pm1_tensor(spec.weight_shape(), &mut rng);
        let label = format!(
            "c_in={} c_out={} k={} s={} p={} g={} in={}",
            spec.c_in, spec.c_out, spec.k_h, spec.stride, spec.pad, spec.groups, shape
        );
        let expected = match ref_binconv(&x, &w, &spec) {
            Ok(t) => t,
            Err(e) => {
                rep.fail(format!("{label}: oracle error {e}"));
                continue;
            }
        };
        match (k.binconv2d)(&pack_bits(&x), &pack_bits(&w), &spec) {
            Ok(got) if got.shape() == expected.shape() => {
                rep.record(&label, &to_f64(&got), &to_f64(&expected))
            }
            Ok(got) => rep.fail(format!(
                "{label}: shape {} vs {}",
                got.shape(),
                expected.shape()
            )),
            Err(e) => rep.fail(format!("{label}: {e}")),
        }
    }
    rep
}

pub fn check_sei(k: &Kernels) -> OracleReport {
    let mut rep = OracleReport::new("sei_forward vs explicit link matrix", 1e-6, false);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    for grouping in [
        SqueezeGrouping::GammaConsistent,
        SqueezeGrouping::LiteralSentence,
    ] {
        for c_in in 1..=16 {
            for c_out in 1..=16 {
                for gamma in [0.5f32, 1.0, 3.0] {
                    for downsample in [false, true] {
                        let cfg = ElConfig::new(c_in, c_out, downsample)
                            .with_grouping(grouping)
                            .with_gamma(gamma);
                        let x = Tensor::from_fn(Shape4::new(2, c_in, 4, 4), |_, _, _, _| {
                            rng.gen_range(-2.0f32..2.0)
                        });
                        let label = format!(
                            "{c_in}->{c_out} gamma={gamma} pool={downsample} {}",
                            grouping.as_str()
                        );
                        let expected = ref_sei(&x, &cfg).expect("oracle shapes");
                        match (k.sei_forward)(&x, &cfg) {
                            Ok(got) if got.shape() == expected.shape() => {
                                rep.record(&label, &to_f64(&got), &to_f64(&expected))
                            }
                            Ok(got) => rep.fail(format!(
                                "{label}: shape {} vs {}",
                                got.shape(),
                                expected.shape()
                            )),
                            Err(e) => rep.fail(format!("{label}: {e}")),
                        }
                    }
                }
            }
        }
    }
    rep
}

/// Hand-computed link outputs on `x = (1, 2, ..., c_in)`.
pub fn check_link_examples(k: &Kernels) -> OracleReport {
    let mut rep = OracleReport::new("link worked examples", 1e-6, false);
    let cases: [(usize, usize, f32, &[f64]); 3] = [
        (6, 2, 3.0, &[3.0, 4.0]),
        (6, 4, 2.0, &[3.0, 4.0, 1.5, 2.0]),
        (
            2,
            5,
            3.0,
            &[1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0],
        ),
    ];
    for (c_in, c_out, gamma, expected) in cases {
        let x = Tensor::from_fn(Shape4::new(1, c_in, 1, 1), |_, c, _, _| (c + 1) as f32);
        let cfg = ElConfig::new(c_in, c_out, false).with_gamma(gamma);
        let label = format!("{c_in}->{c_out}");
        match (k.sei_forward)(&x, &cfg) {
            Ok(got) => rep.record(&label, &to_f64(&got), expected),
            Err(e) => rep.fail(format!("{label}: {e}")),
        }
    }
    rep
}

/// Ceiling channel ratio for 100 pairs, and an all-ones Squeeze at the
/// initial divisor giving exactly 1 on channels whose groups are complete.
pub fn check_gamma_init(k: &Kernels) -> OracleReport {
    let mut rep = OracleReport::new("gamma_init grid and all-ones squeeze", 0.0, false);
    for c_in in 1..=10usize {
        for c_out in 1..=10usize {
            let (hi, lo) = (c_in.max(c_out) as f64, c_in.min(c_out) as f64);
            let expected = (hi / lo).ceil();
            let g = (k.gamma_init)(c_in, c_out);
            rep.record(&format!("init {c_in}->{c_out}"), &[g as f64], &[expected]);
            if c_in > c_out {
                let cfg = ElConfig::new(c_in, c_out, false).with_gamma(g);
                let ones = Tensor::full(Shape4::new(1, c_in, 2, 2), 1.0f32);
                let groups = c_in.div_ceil(c_out);
                // channels j < c_in - (groups - 1) * c_out receive a full group
                let full = c_in - (groups - 1) * c_out;
                match (k.sei_forward)(&ones, &cfg) {
                    Ok(y) => {
                        let got: Vec<f64> = (0..full)
                            .flat_map(|j| y.plane(0, j).iter().map(|&v| v as f64))
                            .collect();
                        rep.record(
                            &format!("ones {c_in}->{c_out}"),
                            &got,
                            &vec![1.0; got.len()],
                        );
                    }
                    Err(e) => rep.fail(format!("ones {c_in}->{c_out}: {e}")),
                }
            }
        }
    }
    rep
}

pub fn check_ste(k: &Kernels) -> OracleReport {
    let mut rep = OracleReport::new("ste_backward piecewise table", 0.0, false);
    let xs = [-1.5f32, -1.0, 0.0, 1.0, 1.5];
    let g = 2.5f32;
    let s = Shape4::new(1, xs.len(), 1, 1);
    let x = Tensor::from_vec(s, xs.to_vec()).expect("shape");
    let grad = Tensor::full(s, g);
    let expected: Vec<f64> = xs
        .iter()
        .map(|&v| {
            if (-1.0..=1.0).contains(&v) {
                g as f64
            } else {
                0.0
            }
        })
        .collect();
    match (k.ste_backward)(&grad, &x) {
        Ok(got) => rep.record("x in {-1.5,-1,0,1,1.5}", &to_f64(&got), &expected),
        Err(e) => rep.fail(e.to_string()),
    }
    rep
}

/// Small network for the gradient check: a stem and two bottleneck blocks
/// (the second widens through a projection shortcut) with every link on and
/// learnable divisors. Scaling factors are off since the backward pass treats
/// them as constants. No block downsamples, because the max-pooled link input
/// switches argmax under perturbation and finite differences stop meaning
/// anything there.
pub fn surrogate_network(seed: u64) -> Result<LayerGraph<f64>> {
    let t = Toggles {
        k_s: false,
        alpha: false,
        ..Toggles::default()
    };
    let mut layers = vec![
        Layer::FpConv(FpConv::new("stem.conv", ConvSpec::new(3, 8, 3, 1, 1))?),
        Layer::BatchNorm(BatchNorm::new("stem.bn", 8)),
    ];
    layers.extend(build_el_bottleneck("s0.b0", 8, 2, 8, false, &t)?);
    layers.extend(build_el_bottleneck("s1.b0", 8, 4, 16, false, &t)?);
    layers.push(Layer::GlobalAvgPool(None));
    layers.push(Layer::Linear(Linear::new("head.fc", 16, 10)));
    let mut g = LayerGraph::new((3, 6, 6), layers)?;
    g.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(g)
}

fn surrogate_loss(g: &mut LayerGraph<f64>, x: &Tensor<f64>, labels: &[u8]) -> Result<f64> {
    let logits = g.forward(x.clone(), &Mode::surrogate())?;
    Ok(softmax_cross_entropy(&logits, labels)?.loss)
}

fn set_params(g: &mut LayerGraph<f64>, picks: &[(String, usize)], values: &[f64]) {
    g.visit_params(&mut |p: ParamView<'_, f64>| {
        for ((name, i), &v) in picks.iter().zip(values) {
            if *name == p.name {
                p.value[*i] = v;
            }
        }
    });
}

const FD_STEP: f64 = 1e-3;
/// Relative disagreement between the h and h/2 estimates that marks a kink.
/// Smooth points agree to O(h^2), far below this.
const KINK_TOL: f64 = 1e-4;

/// Engine backward against central differences (step 1e-3) on the
/// clip-surrogate network. Every link divisor is compared, plus enough
/// randomly drawn parameters that at least `samples` comparisons land away
/// from clip kinks.
pub fn check_surrogate_gradients(samples: usize) -> Result<OracleReport> {
    let mut rep =
        OracleReport::new("surrogate backward vs finite differences", 1e-3, true).with_floor(1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let mut g = surrogate_network(SEED)?;
    let shape = g.input_shape(4);
    let x = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0));
    let labels: Vec<u8> = (0..shape.n).map(|_| rng.gen_range(0..10)).collect();

    g.zero_grad();
    let logits = g.forward(x.clone(), &Mode::surrogate())?;
    let out = softmax_cross_entropy(&logits, &labels)?;
    g.backward(out.grad)?;

    let mut gammas = Vec::new();
    let mut others = Vec::new();
    let mut analytic = std::collections::HashMap::new();
    g.visit_params(&mut |p: ParamView<'_, f64>| {
        if p.kind == ParamKind::Buffer {
            return;
        }
        for i in 0..p.value.len() {
            analytic.insert((p.name.clone(), i), (p.value[i], p.grad[i]));
            if p.kind == ParamKind::Gamma {
                gammas.push((p.name.clone(), i));
            } else {
                others.push((p.name.clone(), i));
            }
        }
    });
    others.shuffle(&mut rng);
    let take = (2 * samples).saturating_sub(gammas.len());
    let is_gamma: std::collections::HashMap<(String, usize), bool> = gammas
        .iter()
        .map(|k| (k.clone(), true))
        .chain(others.iter().map(|k| (k.clone(), false)))
        .collect();
    let picks: Vec<(String, usize)> = gammas
        .into_iter()
        .chain(others.into_iter().take(take))
        .collect();
    let start: Vec<f64> = picks.iter().map(|k| analytic[k].0).collect();
    let engine: Vec<f64> = picks.iter().map(|k| analytic[k].1).collect();

    // A clip kink inside the stencil makes the central difference depend on
    // the step, so each parameter is differenced at h and h/2 and the ones
    // where the two disagree are left out.
    let mut failure = None;
    let mut diff = |step: f64| {
        finite_diff(
            |v| {
                set_params(&mut g, &picks, v);
                surrogate_loss(&mut g, &x, &labels).unwrap_or_else(|e| {
                    failure.get_or_insert(e.to_string());
                    f64::NAN
                })
            },
            &start,
            step,
        )
    };
    let numeric = diff(FD_STEP).and_then(|a| Ok((a, diff(FD_STEP / 2.0)?)));
    set_params(&mut g, &picks, &start);
    match numeric {
        Ok((num, half)) => {
            let mut skipped_gamma = Vec::new();
            for (k, (a, (n, h))) in picks.iter().zip(engine.iter().zip(num.iter().zip(&half))) {
                let label = format!("{}[{}]", k.0, k.1);
                if (n - h).abs() > KINK_TOL * n.abs().max(h.abs()).max(rep.floor) {
                    rep.skipped += 1;
                    if is_gamma[k] {
                        skipped_gamma.push(label);
                    }
                    continue;
                }
                rep.record(&label, &[*a], &[*n]);
            }
            if let Some(l) = skipped_gamma.first() {
                rep.fail(format!("{l}: gamma sits on a kink"));
            }
            if rep.cases < samples {
                rep.fail(format!(
                    "only {} of {} parameters are away from kinks",
                    rep.cases, samples
                ));
            }
        }
        Err(e) => rep.fail(failure.unwrap_or_else(|| e.to_string())),
    }
    Ok(rep)
}

/// Runs every check. The gradient check uses the production engine
/// regardless of `k`.
pub fn run_verify(k: &Kernels) -> Vec<OracleReport> {
    let grad = check_surrogate_gradients(120).unwrap_or_else(|e| {
        let mut r = OracleReport::new("surrogate backward vs finite differences", 1e-3, true);
        r.fail(e.to_string());
        r
    });
    vec![
        check_popcount(k),
        check_binconv(k),
        check_sei(k),
        check_link_examples(k),
        check_gamma_init(k),
        check_ste(k),
        grad,
    ]
}
