//! Naive reference implementations used to check the production kernels.
//!
//! Nothing here calls into `conv`, `binconv`, `tensor::pack_bits` or
//! `elastic_link` kernels; every loop is written out directly.

use std::fmt;

use crate::conv::ConvSpec;
use crate::elastic_link::{ElConfig, SqueezeGrouping};
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// Direct correlation with zero padding.
pub fn ref_conv2d<T: Scalar>(a: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let s = a.shape();
    let ws = w.shape();
    if spec.groups == 0 || spec.c_in % spec.groups != 0 || spec.c_out % spec.groups != 0 {
        return Err(config_err("groups must divide both channel counts"));
    }
    let cig = spec.c_in / spec.groups;
    let cog = spec.c_out / spec.groups;
    let expected_w = Shape4::new(spec.c_out, cig, spec.k_h, spec.k_w);
    if s.c != spec.c_in {
        return Err(Error::Shape {
            context: "oracle conv input",
            expected: Shape4::new(s.n, spec.c_in, s.h, s.w),
            actual: s,
        });
    }
    if ws != expected_w {
        return Err(Error::Shape {
            context: "oracle conv weight",
            expected: expected_w,
            actual: ws,
        });
    }
    let ph = s.h + 2 * spec.pad;
    let pw = s.w + 2 * spec.pad;
    if ph < spec.k_h || pw < spec.k_w || spec.stride == 0 {
        return Err(config_err("kernel larger than padded input"));
    }
    let ho = (ph - spec.k_h) / spec.stride + 1;
    let wo = (pw - spec.k_w) / spec.stride + 1;
    let mut out = Tensor::zeros(Shape4::new(s.n, spec.c_out, ho, wo));
    for n in 0..s.n {
        for oc in 0..spec.c_out {
            let group = oc / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ic in 0..cig {
                        for ky in 0..spec.k_h {
                            for kx in 0..spec.k_w {
                                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let xv = a.at(n, group * cig + ic, iy as usize, ix as usize);
                                acc += xv * w.at(oc, ic, ky, kx);
                            }
                        }
                    }
                    out.set(n, oc, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

fn oracle_sign<T: Scalar>(v: T) -> T {
    if v < T::zero() {
        -T::one()
    } else {
        T::one()
    }
}

/// Binary convolution by definition: zero-pad the real input, take the sign
/// of everything (so padding reads as +1), then correlate without padding.
pub fn ref_binconv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let s = x.shape();
    let p = spec.pad;
    let padded = Tensor::from_fn(
        Shape4::new(s.n, s.c, s.h + 2 * p, s.w + 2 * p),
        |n, c, y, xx| {
            if y < p || xx < p || y >= s.h + p || xx >= s.w + p {
                T::one()
            } else {
                oracle_sign(x.at(n, c, y - p, xx - p))
            }
        },
    );
    let wb = w.map(oracle_sign);
    ref_conv2d(&padded, &wb, &ConvSpec { pad: 0, ..*spec })
}

/// Explicit `c_out x c_in` 0/1 matrix of the link (before dividing by gamma).
pub fn sei_matrix(c_in: usize, c_out: usize, grouping: SqueezeGrouping) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; c_in]; c_out];
    if c_in > c_out {
        let groups = (c_in + c_out - 1) / c_out;
        for (j, row) in m.iter_mut().enumerate() {
            for k in 0..groups {
                let col = match grouping {
                    SqueezeGrouping::GammaConsistent => k * c_out + j,
                    SqueezeGrouping::LiteralSentence => j * groups + k,
                };
                // columns past c_in are the zero padding
                if col < c_in {
                    row[col] = 1.0;
                }
            }
        }
    } else {
        for (j, row) in m.iter_mut().enumerate() {
            row[j % c_in] = 1.0;
        }
    }
    m
}

fn ref_maxpool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(Shape4::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, y, xx| {
        let mut best = x.at(n, c, 2 * y, 2 * xx);
        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
            best = best.max(x.at(n, c, 2 * y + dy, 2 * xx + dx));
        }
        best
    })
}

/// Link output as a matrix product per spatial site.
pub fn ref_sei<T: Scalar>(x: &Tensor<T>, cfg: &ElConfig<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != cfg.c_in {
        return Err(Error::Shape {
            context: "oracle link input",
            expected: Shape4::new(s.n, cfg.c_in, s.h, s.w),
            actual: s,
        });
    }
    let src = if cfg.downsample {
        ref_maxpool2(x)
    } else {
        x.clone()
    };
    let ps = src.shape();
    let m = sei_matrix(cfg.c_in, cfg.c_out, cfg.grouping);
    Ok(Tensor::from_fn(
        Shape4::new(ps.n, cfg.c_out, ps.h, ps.w),
        |n, j, y, xx| {
            let mut acc = T::zero();
            for (i, &mv) in m[j].iter().enumerate() {
                acc += T::lit(mv) * src.at(n, i, y, xx);
            }
            acc / cfg.gamma
        },
    ))
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every index.
pub fn finite_diff(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(config_err("finite-difference step must be positive"));
    }
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p);
        p[i] = orig - step;
        let down = loss(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                layer: format!("loss at coordinate {i}"),
            });
        }
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Outcome of comparing a kernel against its reference over one or more cases.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub cases: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Whether `tolerance` bounds the relative (rather than absolute) error.
    pub relative: bool,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub pass: bool,
    pub detail: Option<String>,
    /// Cases left out of the comparison (counted separately from `cases`).
    pub skipped: usize,
}

impl OracleReport {
    pub fn new(case: impl Into<String>, tolerance: f64, relative: bool) -> Self {
        Self {
            case: case.into(),
            cases: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            tolerance,
            relative,
            floor: 0.0,
            pass: true,
            detail: None,
            skipped: 0,
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    /// Folds one case into the report. Length mismatches fail the case.
    pub fn record(&mut self, label: &str, actual: &[f64], expected: &[f64]) {
        self.cases += 1;
        if actual.len() != expected.len() {
            self.fail(format!(
                "{label}: {} values, expected {}",
                actual.len(),
                expected.len()
            ));
            return;
        }
        for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
            let abs = (a - e).abs();
            let rel = if abs == 0.0 {
                0.0
            } else {
                abs / a.abs().max(e.abs()).max(self.floor)
            };
            let abs = if abs.is_nan() { f64::INFINITY } else { abs };
            self.max_abs_err = self.max_abs_err.max(abs);
            self.max_rel_err = self
                .max_rel_err
                .max(if rel.is_nan() { f64::INFINITY } else { rel });
            let err = if self.relative { rel } else { abs };
            if !(err <= self.tolerance) {
                self.fail(format!("{label}[{i}]: got {a}, expected {e}"));
            }
        }
    }

    pub fn fail(&mut self, detail: String) {
        self.pass = false;
        self.detail.get_or_insert(detail);
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} cases, max abs {:.3e}, max rel {:.3e}, tol {:.1e} ({})",
            if self.pass { "PASS" } else { "FAIL" },
            self.case,
            self.cases,
            self.max_abs_err,
            self.max_rel_err,
            self.tolerance,
            if self.relative { "rel" } else { "abs" }
        )?;
        if self.skipped > 0 {
            write!(f, ", {} skipped", self.skipped)?;
        }
        if let Some(d) = &self.detail {
            write!(f, " first mismatch {d}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_copies_input() {
        let x = Tensor::from_fn(Shape4::new(2, 3, 4, 5), |n, c, y, xx| {
            (n * 100 + c * 10 + y * 3 + xx) as f64
        });
        let w = Tensor::from_fn(
            Shape4::new(3, 3, 1, 1),
            |o, i, _, _| if o == i { 1.0 } else { 0.0 },
        );
        assert_eq!(
            ref_conv2d(&x, &w, &ConvSpec::new(3, 3, 1, 1, 0)).unwrap(),
            x
        );
    }

    #[test]
    fn ones_kernel_interior_is_nine() {
        let x = Tensor::<f64>::full(Shape4::new(1, 1, 5, 5), 1.0);
        let w = Tensor::<f64>::full(Shape4::new(1, 1, 3, 3), 1.0);
        let y = ref_conv2d(&x, &w, &ConvSpec::new(1, 1, 3, 1, 1)).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn squeeze_and_expand_matrices() {
        let m = sei_matrix(6, 2, SqueezeGrouping::GammaConsistent);
        assert_eq!(m[0], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(m[1], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let m = sei_matrix(2, 5, SqueezeGrouping::GammaConsistent);
        let cols: Vec<usize> = m
            .iter()
            .map(|r| r.iter().position(|&v| v == 1.0).unwrap())
            .collect();
        assert_eq!(cols, vec![0, 1, 0, 1, 0]);
        let m = sei_matrix(4, 4, SqueezeGrouping::GammaConsistent);
        for (i, r) in m.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn ref_sei_divides_by_gamma() {
        let x = Tensor::from_vec(
            Shape4::new(1, 6, 1, 1),
            vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let cfg = ElConfig::new(6, 2, false);
        assert_eq!(ref_sei(&x, &cfg).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn finite_diff_of_quadratic_and_constant() {
        let p = [0.3, -1.2, 2.5];
        let g = finite_diff(|q| q.iter().map(|v| v * v).sum::<f64>() / 2.0, &p, 1e-3).unwrap();
        for (a, b) in g.iter().zip(&p) {
            assert!((a - b).abs() < 1e-9);
        }
        let g = finite_diff(|_| 4.0, &p, 1e-3).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let blows_up = |q: &[f64]| if q[0] > 0.3 { f64::INFINITY } else { 0.0 };
        assert!(finite_diff(blows_up, &p, 1e-3).is_err());
        assert!(finite_diff(|_| 0.0, &p, 0.0).is_err());
    }

    #[test]
    fn report_tracks_worst_error() {
        let mut r = OracleReport::new("x", 1e-6, false);
        r.record("a", &[1.0, 2.0], &[1.0, 2.0 + 1e-9]);
        assert!(r.pass);
        r.record("b", &[1.0], &[1.1]);
        assert!(!r.pass && r.max_abs_err > 0.09);
        assert!(r.to_string().starts_with("FAIL x: 2 cases"));
    }
}
