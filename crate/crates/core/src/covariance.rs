//! Covariance kernels on the sphere crossed with an elevation axis.
//!
//! Spherical separation enters as the central angle in radians; the
//! Euclidean comparison kernel uses chordal distance in kilometers instead.
//! Elevation differences are always used as `|u|`, in kilometers.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{central_angle, GeoPoint, SphereConfig};
use crate::special::matern_correlation;

/// Spatial dimension of the Euclidean embedding used by the Gneiting kernel.
const EMBED_DIM: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    /// Matérn in great-circle angle with smoothness at most 1/2; ignores elevation.
    SphericalMatern,
    /// Spherical Matérn times a Matérn in elevation difference.
    SeparableProduct,
    /// Generalized-Cauchy-in-angle kernel with an elevation term whose decay
    /// depends on angular separation.
    NonSeparableSphere,
    /// Gneiting-class kernel on chordal distance and elevation difference.
    GneitingEuclidean,
}

/// Covariance parameters tuned by the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CovParam {
    Rho1,
    Rho2,
    Alpha,
    Delta,
    Nu,
}

impl CovParam {
    pub const ALL: [CovParam; 5] = [
        CovParam::Rho1,
        CovParam::Rho2,
        CovParam::Alpha,
        CovParam::Delta,
        CovParam::Nu,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CovParam::Rho1 => "rho1",
            CovParam::Rho2 => "rho2",
            CovParam::Alpha => "alpha",
            CovParam::Delta => "delta",
            CovParam::Nu => "nu",
        }
    }
}

impl KernelFamily {
    /// Parameters the kernel actually depends on.
    pub fn active_params(&self) -> &'static [CovParam] {
        match self {
            KernelFamily::SphericalMatern => &[CovParam::Rho1],
            KernelFamily::SeparableProduct => &[CovParam::Rho1, CovParam::Rho2],
            KernelFamily::NonSeparableSphere => &CovParam::ALL,
            KernelFamily::GneitingEuclidean => &[CovParam::Rho1, CovParam::Rho2, CovParam::Alpha],
        }
    }
}

/// Validated kernel selection and parameters. Construction rejects any value
/// outside its domain, so evaluation never fails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CovarianceConfig", into = "CovarianceConfig")]
pub struct CovarianceSpec {
    family: KernelFamily,
    sigma2: f64,
    rho1: f64,
    rho2: f64,
    alpha: f64,
    delta: f64,
    nu: f64,
    matern_smoothness: f64,
    elev_smoothness: f64,
    gneiting_alpha_u: f64,
    gneiting_beta: f64,
    sphere: SphereConfig,
}

/// Plain, unvalidated form of [`CovarianceSpec`] used for configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceConfig {
    pub family: KernelFamily,
    #[serde(default = "one")]
    pub sigma2: f64,
    pub rho1: f64,
    #[serde(default = "one")]
    pub rho2: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub delta: f64,
    #[serde(default = "half")]
    pub nu: f64,
    #[serde(default = "half")]
    pub matern_smoothness: f64,
    #[serde(default = "half")]
    pub elev_smoothness: f64,
    #[serde(default = "one")]
    pub gneiting_alpha_u: f64,
    #[serde(default = "one")]
    pub gneiting_beta: f64,
    #[serde(default)]
    pub sphere: SphereConfig,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}

impl CovarianceConfig {
    pub fn new(family: KernelFamily, rho1: f64) -> Self {
        CovarianceConfig {
            family,
            sigma2: 1.0,
            rho1,
            rho2: 1.0,
            alpha: 1.0,
            delta: 1.0,
            nu: 0.5,
            matern_smoothness: 0.5,
            elev_smoothness: 0.5,
            gneiting_alpha_u: 1.0,
            gneiting_beta: 1.0,
            sphere: SphereConfig::default(),
        }
    }

    pub fn build(self) -> Result<CovarianceSpec> {
        CovarianceSpec::try_from(self)
    }
}

impl TryFrom<CovarianceConfig> for CovarianceSpec {
    type Error = Error;

    fn try_from(c: CovarianceConfig) -> Result<Self> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} must be positive")))
            }
        };
        positive("sigma2", c.sigma2)?;
        positive("rho1", c.rho1)?;
        positive("rho2", c.rho2)?;
        positive("delta", c.delta)?;
        positive("elev_smoothness", c.elev_smoothness)?;
        if !(c.alpha > 0.0 && c.alpha <= 2.0) {
            return Err(Error::param("alpha", format!("{} outside (0, 2]", c.alpha)));
        }
        if !(0.0..=1.0).contains(&c.nu) {
            return Err(Error::param("nu", format!("{} outside [0, 1]", c.nu)));
        }
        if !(c.matern_smoothness > 0.0 && c.matern_smoothness <= 0.5) {
            return Err(Error::param(
                "matern_smoothness",
                format!(
                    "{} outside (0, 1/2]; larger smoothness is not positive definite in great-circle distance",
                    c.matern_smoothness
                ),
            ));
        }
        if !(c.gneiting_alpha_u > 0.0 && c.gneiting_alpha_u <= 2.0) {
            return Err(Error::param(
                "gneiting_alpha_u",
                format!("{} outside (0, 2]", c.gneiting_alpha_u),
            ));
        }
        if !(c.gneiting_beta > 0.0 && c.gneiting_beta <= 1.0) {
            return Err(Error::param(
                "gneiting_beta",
                format!("{} outside (0, 1]", c.gneiting_beta),
            ));
        }
        Ok(CovarianceSpec {
            family: c.family,
            sigma2: c.sigma2,
            rho1: c.rho1,
            rho2: c.rho2,
            alpha: c.alpha,
            delta: c.delta,
            nu: c.nu,
            matern_smoothness: c.matern_smoothness,
            elev_smoothness: c.elev_smoothness,
            gneiting_alpha_u: c.gneiting_alpha_u,
            gneiting_beta: c.gneiting_beta,
            sphere: c.sphere,
        })
    }
}

impl From<CovarianceSpec> for CovarianceConfig {
    fn from(s: CovarianceSpec) -> Self {
        CovarianceConfig {
            family: s.family,
            sigma2: s.sigma2,
            rho1: s.rho1,
            rho2: s.rho2,
            alpha: s.alpha,
            delta: s.delta,
            nu: s.nu,
            matern_smoothness: s.matern_smoothness,
            elev_smoothness: s.elev_smoothness,
            gneiting_alpha_u: s.gneiting_alpha_u,
            gneiting_beta: s.gneiting_beta,
            sphere: s.sphere,
        }
    }
}

/// Separation between two points as seen by the kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lag {
    /// Central angle in radians.
    pub theta: f64,
    /// Elevation difference in kilometers (sign is irrelevant).
    pub u: f64,
}

impl Lag {
    pub fn between(a: &GeoPoint, b: &GeoPoint) -> Self {
        Lag {
            theta: central_angle(a, b),
            u: a.elev() - b.elev(),
        }
    }

    pub const ZERO: Lag = Lag { theta: 0.0, u: 0.0 };
}

impl CovarianceSpec {
    pub fn family(&self) -> KernelFamily {
        self.family
    }
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
    pub fn rho1(&self) -> f64 {
        self.rho1
    }
    pub fn rho2(&self) -> f64 {
        self.rho2
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn nu(&self) -> f64 {
        self.nu
    }
    pub fn matern_smoothness(&self) -> f64 {
        self.matern_smoothness
    }
    pub fn sphere(&self) -> &SphereConfig {
        &self.sphere
    }

    pub fn config(&self) -> CovarianceConfig {
        CovarianceConfig::from(*self)
    }

    pub fn get(&self, p: CovParam) -> f64 {
        match p {
            CovParam::Rho1 => self.rho1,
            CovParam::Rho2 => self.rho2,
            CovParam::Alpha => self.alpha,
            CovParam::Delta => self.delta,
            CovParam::Nu => self.nu,
        }
    }

    /// Copy with one parameter replaced, re-validated.
    pub fn with(&self, p: CovParam, value: f64) -> Result<Self> {
        let mut c = self.config();
        match p {
            CovParam::Rho1 => c.rho1 = value,
            CovParam::Rho2 => c.rho2 = value,
            CovParam::Alpha => c.alpha = value,
            CovParam::Delta => c.delta = value,
            CovParam::Nu => c.nu = value,
        }
        c.build()
    }

    pub fn with_sigma2(&self, sigma2: f64) -> Result<Self> {
        let mut c = self.config();
        c.sigma2 = sigma2;
        c.build()
    }

    /// Kernel value at a lag.
    pub fn eval(&self, lag: Lag) -> f64 {
        match self.family {
            KernelFamily::SphericalMatern => matern_gc(lag.theta, self),
            KernelFamily::SeparableProduct => separable_product(lag.theta, lag.u, self),
            KernelFamily::NonSeparableSphere => nonsep_sphere(lag.theta, lag.u, self),
            KernelFamily::GneitingEuclidean => {
                let h = 2.0 * self.sphere.radius() * (lag.theta / 2.0).sin();
                gneiting_euclidean(h, lag.u, self)
            }
        }
    }

    pub fn between(&self, a: &GeoPoint, b: &GeoPoint) -> f64 {
        self.eval(Lag::between(a, b))
    }
}

/// Matérn covariance in great-circle angle.
pub fn matern_gc(theta: f64, spec: &CovarianceSpec) -> f64 {
    spec.sigma2 * matern_correlation(theta / spec.rho1, spec.matern_smoothness)
}

/// `sigma2 * g^-(delta + nu/2) * exp(-(|u|/rho2) / g^(nu/2))` with
/// `g = 1 + (theta/rho1)^alpha`.
pub fn nonsep_sphere(theta: f64, u: f64, spec: &CovarianceSpec) -> f64 {
    let g = 1.0 + (theta / spec.rho1).powf(spec.alpha);
    let half_nu = spec.nu / 2.0;
    let elev = (-(u.abs() / spec.rho2) / g.powf(half_nu)).exp();
    spec.sigma2 * g.powf(-(spec.delta + half_nu)) * elev
}

pub fn separable_product(theta: f64, u: f64, spec: &CovarianceSpec) -> f64 {
    spec.sigma2
        * matern_correlation(theta / spec.rho1, spec.matern_smoothness)
        * matern_correlation(u.abs() / spec.rho2, spec.elev_smoothness)
}

/// Gneiting-class covariance with a powered-exponential `phi` and a
/// Cauchy-type `psi`; `h` is chordal distance in kilometers.
pub fn gneiting_euclidean(h: f64, u: f64, spec: &CovarianceSpec) -> f64 {
    let psi = (1.0 + (u.abs() / spec.rho2).powf(spec.gneiting_alpha_u)).powf(spec.gneiting_beta);
    let spatial = (-(h / spec.rho1).powf(spec.alpha) / psi.powf(spec.alpha / 2.0)).exp();
    spec.sigma2 * psi.powf(-EMBED_DIM / 2.0) * spatial
}

/// Cross-covariance matrix between two point lists.
pub fn cov_matrix(
    points_a: &[GeoPoint],
    points_b: &[GeoPoint],
    spec: &CovarianceSpec,
) -> DMatrix<f64> {
    DMatrix::from_fn(points_a.len(), points_b.len(), |i, j| {
        spec.between(&points_a[i], &points_b[j])
    })
}

/// Symmetric covariance matrix of one point list.
pub fn cov_matrix_sym(points: &[GeoPoint], spec: &CovarianceSpec) -> DMatrix<f64> {
    let n = points.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = spec.eval(Lag::ZERO);
        for j in 0..i {
            let c = spec.between(&points[i], &points[j]);
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdCheck {
    pub is_pd: bool,
    pub min_eigenvalue: f64,
}

/// Positive-(semi)definiteness check: passes when the smallest eigenvalue
/// exceeds `-1e-8 * trace / n`.
pub fn validate_pd(matrix: &DMatrix<f64>) -> Result<PdCheck> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(Error::Dimension {
            expected: n,
            found: matrix.ncols(),
        });
    }
    if n == 0 {
        return Err(Error::Data("empty matrix".into()));
    }
    let eig = SymmetricEigen::new(matrix.clone());
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let tol = 1e-8 * matrix.trace().abs() / n as f64;
    Ok(PdCheck {
        is_pd: min > -tol,
        min_eigenvalue: min,
    })
}

/// Between-coefficient covariance `V` paired with a unit-variance base kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCovariance {
    v: DMatrix<f64>,
    base: CovarianceSpec,
}

impl CrossCovariance {
    pub fn new(v: DMatrix<f64>, base: CovarianceSpec) -> Result<Self> {
        check_spd(&v, "V")?;
        let base = base.with_sigma2(1.0)?;
        Ok(CrossCovariance { v, base })
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn base(&self) -> &CovarianceSpec {
        &self.base
    }

    /// `V * C(a, b)`.
    pub fn block(&self, a: &GeoPoint, b: &GeoPoint) -> DMatrix<f64> {
        &self.v * self.base.between(a, b)
    }
}

/// Errors unless `m` is square, symmetric and has strictly positive eigenvalues.
pub fn check_spd(m: &DMatrix<f64>, name: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::param(name, "must be square"));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::param(name, "must be symmetric"));
    }
    let min = SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Err(Error::param(
            name,
            format!("not positive definite (min eigenvalue {min:e})"),
        ));
    }
    Ok(())
}
