//! Shifted Box-Cox transform with maximum-likelihood λ and standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default additive shift in mm w.e./yr.
pub const DEFAULT_SHIFT: f64 = 306.001;

const LAMBDA_BOUNDS: (f64, f64) = (-2.0, 2.0);
const LAMBDA_TOL: f64 = 1e-6;
const LOG_LIMIT: f64 = 1e-10;

/// Maximum reject-and-resample attempts for out-of-image draws.
pub const MAX_RESAMPLE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransform")]
pub struct TransformSpec {
    shift: f64,
    lambda: f64,
    center: f64,
    scale: f64,
}

#[derive(Deserialize)]
struct RawTransform {
    shift: f64,
    lambda: f64,
    center: f64,
    scale: f64,
}

impl TryFrom<RawTransform> for TransformSpec {
    type Error = Error;
    fn try_from(r: RawTransform) -> Result<Self> {
        TransformSpec::new(r.shift, r.lambda, r.center, r.scale)
    }
}

impl TransformSpec {
    pub fn new(shift: f64, lambda: f64, center: f64, scale: f64) -> Result<Self> {
        if !shift.is_finite() {
            return Err(Error::param("shift", "must be finite"));
        }
        if !lambda.is_finite() {
            return Err(Error::param("lambda", "must be finite"));
        }
        if !center.is_finite() {
            return Err(Error::param("center", "must be finite"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::param(
                "scale",
                format!("must be positive, got {scale}"),
            ));
        }
        Ok(Self {
            shift,
            lambda,
            center,
            scale,
        })
    }

    /// No shift, λ = 1, and centering chosen so the transform is the identity
    /// on positive values.
    pub fn identity() -> Self {
        Self::identity_above(0.0)
    }

    /// Identity map on `(lower, inf)`.
    pub fn identity_above(lower: f64) -> Self {
        Self {
            shift: -lower,
            lambda: 1.0,
            center: -lower - 1.0,
            scale: 1.0,
        }
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Box-Cox value before centering and scaling.
    pub fn raw(&self, y: f64) -> Result<f64> {
        boxcox_raw(y + self.shift, self.lambda)
    }

    pub fn forward(&self, y: f64) -> Result<f64> {
        Ok((self.raw(y)? - self.center) / self.scale)
    }

    /// Inverse transform; errors when the de-standardized value is outside the image.
    pub fn inverse(&self, t: f64) -> Result<f64> {
        let tt = t * self.scale + self.center;
        if self.lambda.abs() < LOG_LIMIT {
            return Ok(tt.exp() - self.shift);
        }
        let base = self.lambda * tt + 1.0;
        if !(base > 0.0) {
            return Err(Error::Domain(format!(
                "value {t} maps outside the image of the transform (lambda {})",
                self.lambda
            )));
        }
        Ok(((self.lambda * tt).ln_1p() / self.lambda).exp() - self.shift)
    }

    /// Transformed-scale value of the lower image boundary, if any.
    pub fn lower_bound(&self) -> Option<f64> {
        (self.lambda > LOG_LIMIT).then(|| (-1.0 / self.lambda - self.center) / self.scale)
    }

    /// Upper image boundary for negative λ.
    pub fn upper_bound(&self) -> Option<f64> {
        (self.lambda < -LOG_LIMIT).then(|| (-1.0 / self.lambda - self.center) / self.scale)
    }

    /// Inverse of the first in-image value produced by `draw`.
    /// After [`MAX_RESAMPLE`] failures the last draw is clamped to the image boundary.
    pub fn inverse_resampled<F: FnMut() -> f64>(&self, mut draw: F) -> BackTransformed {
        let mut last = 0.0;
        for attempt in 0..MAX_RESAMPLE {
            last = draw();
            if let Ok(v) = self.inverse(last) {
                return BackTransformed {
                    value: v,
                    rejected: attempt,
                    clamped: false,
                };
            }
        }
        log::warn!("back-transform clamped after {MAX_RESAMPLE} out-of-image draws");
        let value = if self.lambda > 0.0 {
            -self.shift
        } else {
            // negative λ: the image is bounded above; clamp just inside it
            let edge = self.upper_bound().unwrap_or(last);
            self.inverse(edge - 1e-9 * edge.abs().max(1.0))
                .unwrap_or(f64::MAX)
        };
        BackTransformed {
            value,
            rejected: MAX_RESAMPLE,
            clamped: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackTransformed {
    pub value: f64,
    /// Draws rejected before success.
    pub rejected: usize,
    pub clamped: bool,
}

fn boxcox_raw(x: f64, lambda: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("shifted value {x} is not positive")));
    }
    if lambda.abs() < LOG_LIMIT {
        Ok(x.ln())
    } else {
        Ok((lambda * x.ln()).exp_m1() / lambda)
    }
}

/// Box-Cox profile log-likelihood of `lambda` for shifted data `x > 0`.
pub fn profile_loglik(x: &[f64], lambda: f64) -> f64 {
    let n = x.len() as f64;
    let t: Vec<f64> = x
        .iter()
        .map(|&v| boxcox_raw(v, lambda).expect("positive input"))
        .collect();
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let log_jac: f64 = x.iter().map(|v| v.ln()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * log_jac
}

/// Maximum-likelihood λ by golden-section search on [-2, 2].
pub fn boxcox_fit(y: &[f64], shift: f64) -> Result<f64> {
    if y.len() < 3 {
        return Err(Error::Data(format!(
            "Box-Cox fit needs at least 3 values, got {}",
            y.len()
        )));
    }
    let x: Vec<f64> = y.iter().map(|v| v + shift).collect();
    if let Some(bad) = x.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Domain(format!(
            "value {} at index {bad} is not positive after shift {shift}",
            y[bad]
        )));
    }
    let first = x[0];
    if x.iter().all(|&v| v == first) {
        return Err(Error::Data("Box-Cox fit on constant data".into()));
    }
    Ok(golden_max(
        |l| profile_loglik(&x, l),
        LAMBDA_BOUNDS.0,
        LAMBDA_BOUNDS.1,
        LAMBDA_TOL,
    ))
}

fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Fits λ, then the training mean and standard deviation of the transformed values.
pub fn fit_transform(y: &[f64], shift: f64) -> Result<TransformSpec> {
    let lambda = boxcox_fit(y, shift)?;
    let raw: Vec<f64> = y
        .iter()
        .map(|&v| boxcox_raw(v + shift, lambda))
        .collect::<Result<_>>()?;
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    TransformSpec::new(shift, lambda, mean, sd)
}

/// Affine standardization (λ = 1) with the image floor far below the data.
pub fn fit_standardize(y: &[f64]) -> Result<TransformSpec> {
    if y.len() < 2 {
        return Err(Error::Data(
            "standardization needs at least two values".into(),
        ));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = 1.0 - lo + 1e3 * (sd + 1.0);
    TransformSpec::new(shift, 1.0, mean + shift - 1.0, sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, LogNormal, Normal};

    fn grid_oracle(y: &[f64], shift: f64) -> f64 {
        let x: Vec<f64> = y.iter().map(|v| v + shift).collect();
        (0..=400)
            .map(|i| -2.0 + 0.01 * i as f64)
            .max_by(|a, b| profile_loglik(&x, *a).total_cmp(&profile_loglik(&x, *b)))
            .unwrap()
    }

    #[test]
    fn standardize_is_affine() {
        let y = [-3.0, 1.0, 4.0, 10.0];
        let t = fit_standardize(&y).unwrap();
        let f: Vec<f64> = y.iter().map(|&v| t.forward(v).unwrap()).collect();
        assert!(f.iter().sum::<f64>().abs() < 1e-9);
        for (v, fv) in y.iter().zip(&f) {
            assert!((t.inverse(*fv).unwrap() - v).abs() < 1e-9);
        }
        assert!(t.lower_bound().unwrap() < -100.0);
    }

    #[test]
    fn lognormal_data_gives_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shift = 10.0;
        let d = LogNormal::new(3.0, 0.5).unwrap();
        let y: Vec<f64> = (0..5000).map(|_| d.sample(&mut rng) - shift).collect();
        let l = boxcox_fit(&y, shift).unwrap();
        assert!(l.abs() < 0.1, "{l}");
        assert!((l - grid_oracle(&y, shift)).abs() < 0.011);
    }

    #[test]
    fn normal_data_gives_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Normal::new(100.0, 5.0).unwrap();
        let y: Vec<f64> = (0..5000).map(|_| d.sample(&mut rng)).collect();
        let l = boxcox_fit(&y, 0.0).unwrap();
        assert!((l - 1.0).abs() < 0.3, "{l}");
        assert!((l - grid_oracle(&y, 0.0)).abs() < 0.011);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(matches!(
            boxcox_fit(&[1.0, -5.0, 2.0], 1.0),
            Err(Error::Domain(_))
        ));
        assert!(boxcox_fit(&[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn identity_configuration() {
        let t = TransformSpec::identity();
        assert!((t.raw(5.0).unwrap() - 4.0).abs() < 1e-14);
        for y in [0.5, 3.0, 100.0] {
            assert!((t.forward(y).unwrap() - y).abs() < 1e-12);
        }
        let t = TransformSpec::new(2.0, 1.0, 0.0, 1.0).unwrap();
        assert!((t.inverse(3.0).unwrap() - (3.0 + 1.0 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn small_lambda_is_log() {
        let t = TransformSpec::new(1.0, 1e-12, 0.0, 1.0).unwrap();
        assert!((t.forward(4.0).unwrap() - 5f64.ln()).abs() < 1e-8);
        let t = TransformSpec::new(1.0, 1e-6, 0.0, 1.0).unwrap();
        assert!((t.forward(4.0).unwrap() - 5f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn boundary_inverse_is_finite() {
        let l = 0.347;
        let t = TransformSpec::new(DEFAULT_SHIFT, l, 0.0, 1.0).unwrap();
        let v = t.inverse(-1.0 / l + 1e-12).unwrap();
        assert!(v.is_finite());
        assert!((v + DEFAULT_SHIFT).abs() < 1e-6);
        assert!(matches!(t.inverse(-1.0 / l - 1e-6), Err(Error::Domain(_))));
        assert!(t.forward(-DEFAULT_SHIFT).is_err());
    }

    #[test]
    fn resample_counts_rejections() {
        let t = TransformSpec::new(0.0, 0.5, 0.0, 1.0).unwrap();
        let mut seq = [-10.0, -9.0, 1.0].into_iter();
        let r = t.inverse_resampled(|| seq.next().unwrap());
        assert_eq!(r.rejected, 2);
        assert!(!r.clamped);
        assert!((r.value - 2.25).abs() < 1e-12);
        let r = t.inverse_resampled(|| -100.0);
        assert!(r.clamped);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn fitted_standardization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = LogNormal::new(5.0, 0.4).unwrap();
        let y: Vec<f64> = (0..400).map(|_| d.sample(&mut rng) - 200.0).collect();
        let t = fit_transform(&y, DEFAULT_SHIFT).unwrap();
        let z: Vec<f64> = y.iter().map(|&v| t.forward(v).unwrap()).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((sd - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lambda_reduces_mean_variance_correlation() {
        // groups with spread growing with level
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut y = Vec::new();
        for g in 0..20 {
            let mu = 2.0 + 0.15 * g as f64;
            let d = LogNormal::new(mu, 0.3).unwrap();
            y.push((0..100).map(|_| d.sample(&mut rng)).collect::<Vec<f64>>());
        }
        let all: Vec<f64> = y.iter().flatten().copied().collect();
        let lam = boxcox_fit(&all, 0.0).unwrap();
        let corr_at = |l: f64| {
            let (mut ms, mut vs) = (Vec::new(), Vec::new());
            for grp in &y {
                let t: Vec<f64> = grp.iter().map(|&v| boxcox_raw(v, l).unwrap()).collect();
                let m = t.iter().sum::<f64>() / t.len() as f64;
                ms.push(m);
                vs.push(t.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (t.len() - 1) as f64);
            }
            pearson(&ms, &vs)
        };
        assert!(corr_at(lam).abs() < corr_at(1.0).abs());
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(2000))]
            #[test]
            fn roundtrip(y in -300.0f64..5000.0, lambda in -2.0f64..2.0, shift in 306.001f64..400.0,
                         center in -5.0f64..5.0, scale in 0.1f64..10.0) {
                let t = TransformSpec::new(shift, lambda, center, scale).unwrap();
                let back = t.inverse(t.forward(y).unwrap()).unwrap();
                // for lambda < 0 the raw value sits near -1/lambda and carries
                // about x^lambda relative information
                let x = y + shift;
                let cond = x.powf(-lambda).max(1.0);
                let tol = 1e-10 * x.max(1.0) * if lambda >= -1.0 { 1.0 } else { cond * 1e-2 };
                prop_assert!((back - y).abs() <= tol, "{back} vs {y}");
            }

            #[test]
            fn forward_increasing(a in -300.0f64..5000.0, b in -300.0f64..5000.0, lambda in -2.0f64..2.0) {
                let t = TransformSpec::new(DEFAULT_SHIFT, lambda, 0.3, 2.0).unwrap();
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                if hi - lo > 1e-6 {
                    prop_assert!(t.forward(lo).unwrap() < t.forward(hi).unwrap());
                }
            }
        }
    }
}
