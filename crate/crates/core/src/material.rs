//! Constitutive laws, structural constants and their validation.
//!
//! Every law is a trait object so callers can inject their own closed forms.
//! The built-in families cover the default van Genuchten/Mualem material and
//! the smooth laws used by the manufactured cases.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};

/// Fraction of the running minimum of `a1 / S'` kept as the stored envelope.
/// Covers the dips of the ratio between tabulation points.
const CAPACITY_SAFETY: f64 = 0.9;

fn central_difference(g: impl Fn(f64) -> f64, x: f64) -> f64 {
    let step = 1e-6 * (1.0 + x.abs());
    (g(x + step) - g(x - step)) / (2.0 * step)
}

pub trait SaturationLaw: Send + Sync + fmt::Debug {
    fn value(&self, p: f64) -> f64;
    fn derivative(&self, p: f64) -> f64;
    /// Maximal saturation `S_s`.
    fn saturated(&self) -> f64;
    /// Infimum of the law as `p -> -inf`.
    fn residual(&self) -> f64;

    /// `S^{-1}(s)` for `s` strictly inside the range, by bracketing and bisection.
    fn inverse(&self, s: f64) -> Option<f64> {
        if !(s > self.residual() && s < self.saturated()) {
            return None;
        }
        let mut lo = -1.0;
        while self.value(lo) > s {
            lo *= 2.0;
            if lo < -1e300 {
                return None;
            }
        }
        let mut hi = 1.0;
        while self.value(hi) < s {
            hi *= 2.0;
            if hi > 1e300 {
                return None;
            }
        }
        for _ in 0..2200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.value(mid) < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

pub trait RelativePermeability: Send + Sync + fmt::Debug {
    fn value(&self, s: f64) -> f64;
}

/// Laws of the form `g(x, r)`: intrinsic permeability, porosity, skeleton density.
pub trait HydrationDependent: Send + Sync + fmt::Debug {
    fn value(&self, x: Point, r: f64) -> f64;
    fn derivative_r(&self, x: Point, r: f64) -> f64 {
        central_difference(|r| self.value(x, r), r)
    }
    /// Lower and upper bound over all `(x, r)`.
    fn bounds(&self) -> (f64, f64);
    /// Lipschitz constant in `r`.
    fn lipschitz(&self) -> f64;
}

pub trait ViscosityLaw: Send + Sync + fmt::Debug {
    fn value(&self, theta: f64) -> f64;
    fn bounds(&self) -> (f64, f64);
}

pub trait DiffusivityLaw: Send + Sync + fmt::Debug {
    fn value(&self, x: Point, p: f64) -> f64;
}

pub trait ConductivityLaw: Send + Sync + fmt::Debug {
    fn value(&self, x: Point, p: f64, theta: f64, r: f64) -> f64;
}

pub trait HydrationRate: Send + Sync + fmt::Debug {
    fn value(&self, x: Point, p: f64, c: f64, theta: f64, r: f64) -> f64;
    fn derivative_p(&self, x: Point, p: f64, c: f64, theta: f64, r: f64) -> f64 {
        central_difference(|p| self.value(x, p, c, theta, r), p)
    }
    /// Increasing envelope `f~(p) >= |f(x, p, ...)|`.
    fn envelope(&self, p: f64) -> f64;
    /// Global bound `C_f >= f~`.
    fn bound(&self) -> f64;
}

// ---------------------------------------------------------------------------
// built-in laws

/// Van Genuchten retention curve with a C1 extension to `p >= 0`.
///
/// On `[-sigma, 0]` the derivative is blended from the van Genuchten slope to
/// `eps0`, and for `p >= 0` the law is `S_s - eps0 exp(-p)`, so `S` stays
/// strictly increasing and below `S_s` on the whole line.
#[derive(Debug, Clone)]
pub struct VanGenuchten {
    alpha: f64,
    n: f64,
    m: f64,
    s_res: f64,
    s_sat: f64,
    sigma: f64,
    s_b: f64,
    d_b: f64,
    eps0: f64,
    k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VanGenuchtenParams {
    pub alpha: f64,
    pub n: f64,
    #[serde(default)]
    pub s_res: f64,
    #[serde(default = "one")]
    pub s_sat: f64,
    #[serde(default = "default_blend_width")]
    pub blend_width: f64,
    #[serde(default = "default_kr_floor")]
    pub kr_floor: f64,
}

fn one() -> f64 {
    1.0
}
fn default_blend_width() -> f64 {
    1e-2
}
fn default_kr_floor() -> f64 {
    1e-12
}

impl Default for VanGenuchtenParams {
    fn default() -> Self {
        VanGenuchtenParams {
            alpha: 2.0,
            n: 1.6,
            s_res: 0.0,
            s_sat: 1.0,
            blend_width: default_blend_width(),
            kr_floor: default_kr_floor(),
        }
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl VanGenuchten {
    pub fn new(params: &VanGenuchtenParams) -> Result<Self> {
        let VanGenuchtenParams {
            alpha,
            n,
            s_res,
            s_sat,
            blend_width: sigma,
            ..
        } = *params;
        let mut bad = Vec::new();
        if !(alpha > 0.0 && alpha.is_finite()) {
            bad.push("alpha must be positive");
        }
        if !(n > 1.0 && n.is_finite()) {
            bad.push("n must exceed 1");
        }
        if !(s_res >= 0.0 && s_res < s_sat && s_sat.is_finite()) {
            bad.push("need 0 <= s_res < s_sat");
        }
        if !(sigma > 0.0 && sigma < 1.0) {
            bad.push("blend_width must lie in (0, 1)");
        }
        if !bad.is_empty() {
            return Err(Error::Material(format!("van Genuchten: {}", bad.join("; "))));
        }
        let m = 1.0 - 1.0 / n;
        let mut law = VanGenuchten {
            alpha,
            n,
            m,
            s_res,
            s_sat,
            sigma,
            s_b: 0.0,
            d_b: 0.0,
            eps0: 0.0,
            k: 0.0,
        };
        law.s_b = law.raw_value(-sigma);
        law.d_b = law.raw_derivative(-sigma);
        law.eps0 = 0.5 * (s_sat - law.s_b);
        let denom = s_sat - law.s_b - law.eps0 * (1.0 + sigma);
        let k = (law.d_b - law.eps0) * sigma / denom - 1.0;
        if !(denom > 0.0 && k >= 0.0 && k.is_finite()) {
            return Err(Error::Material(format!(
                "van Genuchten: blend width {sigma} too large for a monotone C1 extension"
            )));
        }
        law.k = k;
        Ok(law)
    }

    fn raw_value(&self, p: f64) -> f64 {
        let la = (self.alpha * p.abs()).ln();
        self.s_res + (self.s_sat - self.s_res) * (-self.m * softplus(self.n * la)).exp()
    }

    fn raw_derivative(&self, p: f64) -> f64 {
        let la = (self.alpha * p.abs()).ln();
        (self.s_sat - self.s_res)
            * self.m
            * self.n
            * self.alpha
            * ((self.n - 1.0) * la - (self.m + 1.0) * softplus(self.n * la)).exp()
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    /// Slope `S'(0)` of the extension; also the distance `S_s - S(0)`.
    pub fn eps0(&self) -> f64 {
        self.eps0
    }
}

impl SaturationLaw for VanGenuchten {
    fn value(&self, p: f64) -> f64 {
        if p <= -self.sigma {
            self.raw_value(p)
        } else if p < 0.0 {
            let t = (p + self.sigma) / self.sigma;
            let w = 1.0 - (1.0 - t).powf(self.k + 1.0);
            self.s_b + self.sigma * (self.eps0 * t + (self.d_b - self.eps0) * w / (self.k + 1.0))
        } else {
            self.s_sat - self.eps0 * (-p).exp()
        }
    }

    fn derivative(&self, p: f64) -> f64 {
        if p <= -self.sigma {
            self.raw_derivative(p)
        } else if p < 0.0 {
            let t = (p + self.sigma) / self.sigma;
            self.eps0 + (self.d_b - self.eps0) * (1.0 - t).powf(self.k)
        } else {
            self.eps0 * (-p).exp()
        }
    }

    fn saturated(&self) -> f64 {
        self.s_sat
    }

    fn residual(&self) -> f64 {
        self.s_res
    }

    fn inverse(&self, s: f64) -> Option<f64> {
        if !(s > self.s_res && s < self.s_sat) {
            return None;
        }
        if s <= self.s_b {
            let se = (s - self.s_res) / (self.s_sat - self.s_res);
            let x = (-se.ln() / self.m).exp_m1();
            return Some(-x.powf(1.0 / self.n) / self.alpha);
        }
        let top = self.s_sat - self.eps0;
        if s >= top {
            return Some(-((self.s_sat - s) / self.eps0).ln());
        }
        let (mut lo, mut hi) = (-self.sigma, 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.value(mid) < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

/// `S(p) = S_s / (1 + exp(-p / scale))`.
#[derive(Debug, Clone, Copy)]
pub struct LogisticSaturation {
    pub s_sat: f64,
    pub scale: f64,
}

impl SaturationLaw for LogisticSaturation {
    fn value(&self, p: f64) -> f64 {
        let z = p / self.scale;
        if z >= 0.0 {
            self.s_sat / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            self.s_sat * e / (1.0 + e)
        }
    }

    fn derivative(&self, p: f64) -> f64 {
        let e = (-(p / self.scale).abs()).exp();
        self.s_sat / self.scale * e / ((1.0 + e) * (1.0 + e))
    }

    fn saturated(&self) -> f64 {
        self.s_sat
    }

    fn residual(&self) -> f64 {
        0.0
    }

    fn inverse(&self, s: f64) -> Option<f64> {
        if !(s > 0.0 && s < self.s_sat) {
            return None;
        }
        Some(self.scale * (s / (self.s_sat - s)).ln())
    }
}

/// Mualem relative permeability, floored so that it stays positive and
/// strictly increasing at residual saturation.
#[derive(Debug, Clone, Copy)]
pub struct Mualem {
    pub m: f64,
    pub s_res: f64,
    pub s_sat: f64,
    pub floor: f64,
}

impl RelativePermeability for Mualem {
    fn value(&self, s: f64) -> f64 {
        let se = ((s - self.s_res) / (self.s_sat - self.s_res)).clamp(0.0, 1.0);
        let x = se.powf(1.0 / self.m);
        // 1 - (1 - x)^m without cancellation for tiny x
        let inner = -(self.m * (-x).ln_1p()).exp_m1();
        let kr = se.sqrt() * inner * inner;
        kr.max(self.floor * (1.0 + s / self.s_sat))
    }
}

/// `k_R(s) = intercept + slope * s`.
#[derive(Debug, Clone, Copy)]
pub struct LinearRelativePermeability {
    pub intercept: f64,
    pub slope: f64,
}

impl RelativePermeability for LinearRelativePermeability {
    fn value(&self, s: f64) -> f64 {
        self.intercept + self.slope * s
    }
}

/// `v0 + (v_inf - v0) * clamp(r / r_scale, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampLaw {
    pub initial: f64,
    pub r#final: f64,
    #[serde(default = "one")]
    pub r_scale: f64,
}

impl RampLaw {
    pub fn constant(v: f64) -> Self {
        RampLaw {
            initial: v,
            r#final: v,
            r_scale: 1.0,
        }
    }
}

impl HydrationDependent for RampLaw {
    fn value(&self, _x: Point, r: f64) -> f64 {
        self.initial + (self.r#final - self.initial) * (r / self.r_scale).clamp(0.0, 1.0)
    }

    fn derivative_r(&self, _x: Point, r: f64) -> f64 {
        if r > 0.0 && r < self.r_scale {
            (self.r#final - self.initial) / self.r_scale
        } else {
            0.0
        }
    }

    fn bounds(&self) -> (f64, f64) {
        (self.initial.min(self.r#final), self.initial.max(self.r#final))
    }

    fn lipschitz(&self) -> f64 {
        (self.r#final - self.initial).abs() / self.r_scale
    }
}

/// `clamp(mu_ref exp(-b (theta - theta_ref)), min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentialViscosity {
    pub reference: f64,
    #[serde(default)]
    pub sensitivity: f64,
    #[serde(default)]
    pub reference_temperature: f64,
    pub min: f64,
    pub max: f64,
}

impl ViscosityLaw for ExponentialViscosity {
    fn value(&self, theta: f64) -> f64 {
        (self.reference * (-self.sensitivity * (theta - self.reference_temperature)).exp()).clamp(self.min, self.max)
    }

    fn bounds(&self) -> (f64, f64) {
        (self.min, self.max)
    }
}

/// `floor + base exp(sensitivity min(p, 0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuctionDiffusivity {
    pub floor: f64,
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub sensitivity: f64,
}

impl DiffusivityLaw for SuctionDiffusivity {
    fn value(&self, _x: Point, p: f64) -> f64 {
        self.floor + self.base * (self.sensitivity * p.min(0.0)).exp()
    }
}

/// `dry + (wet - dry) exp(sensitivity min(p, 0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoistureConductivity {
    pub dry: f64,
    pub wet: f64,
    #[serde(default)]
    pub sensitivity: f64,
}

impl ConductivityLaw for MoistureConductivity {
    fn value(&self, _x: Point, p: f64, _theta: f64, _r: f64) -> f64 {
        self.dry + (self.wet - self.dry) * (self.sensitivity * p.min(0.0)).exp()
    }
}

/// `A clamp(1 - r/r_max, 0, 1) (S(p)/S_s)^e exp(-E / (theta + theta_off))`,
/// clipped to `[0, A]`.
#[derive(Debug, Clone)]
pub struct ArrheniusHydration {
    saturation: Arc<dyn SaturationLaw>,
    pub rate: f64,
    pub r_max: f64,
    pub exponent: f64,
    pub activation: f64,
    pub offset: f64,
}

impl ArrheniusHydration {
    pub fn new(saturation: Arc<dyn SaturationLaw>, p: &HydrationParams) -> Result<Self> {
        if !(p.rate >= 0.0 && p.r_max > 0.0 && p.exponent >= 1.0 && p.activation >= 0.0) {
            return Err(Error::Material(
                "hydration: need rate >= 0, r_max > 0, exponent >= 1 (Lipschitz), activation >= 0".into(),
            ));
        }
        Ok(ArrheniusHydration {
            saturation,
            rate: p.rate,
            r_max: p.r_max,
            exponent: p.exponent,
            activation: p.activation,
            offset: p.offset,
        })
    }

    fn thermal(&self, theta: f64) -> f64 {
        let d = theta + self.offset;
        if d > 0.0 {
            (-self.activation / d).exp()
        } else {
            0.0
        }
    }

    fn relative(&self, p: f64) -> f64 {
        (self.saturation.value(p) / self.saturation.saturated()).clamp(0.0, 1.0)
    }
}

impl HydrationRate for ArrheniusHydration {
    fn value(&self, _x: Point, p: f64, _c: f64, theta: f64, r: f64) -> f64 {
        let mem = (1.0 - r / self.r_max).clamp(0.0, 1.0);
        (self.rate * mem * self.relative(p).powf(self.exponent) * self.thermal(theta)).clamp(0.0, self.rate)
    }

    fn derivative_p(&self, _x: Point, p: f64, _c: f64, theta: f64, r: f64) -> f64 {
        let mem = (1.0 - r / self.r_max).clamp(0.0, 1.0);
        let s = self.relative(p);
        if s >= 1.0 {
            return 0.0;
        }
        self.rate * mem * self.thermal(theta) * self.exponent * s.powf(self.exponent - 1.0)
            * self.saturation.derivative(p)
            / self.saturation.saturated()
    }

    fn envelope(&self, p: f64) -> f64 {
        self.rate * self.relative(p).powf(self.exponent)
    }

    fn bound(&self) -> f64 {
        self.rate
    }
}

/// Hydration at a fixed rate, independent of the state.
#[derive(Debug, Clone, Copy)]
pub struct ConstantHydration {
    pub value: f64,
}

impl HydrationRate for ConstantHydration {
    fn value(&self, _x: Point, _p: f64, _c: f64, _theta: f64, _r: f64) -> f64 {
        self.value
    }

    fn derivative_p(&self, _x: Point, _p: f64, _c: f64, _theta: f64, _r: f64) -> f64 {
        0.0
    }

    fn envelope(&self, _p: f64) -> f64 {
        self.value.abs()
    }

    fn bound(&self) -> f64 {
        self.value.abs()
    }
}

// ---------------------------------------------------------------------------
// the model

/// Constants bounding the constitutive laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StructuralConstants {
    pub s_sat: f64,
    pub s_res: f64,
    pub k1: f64,
    pub k2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub c_phi: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub c_f: f64,
    pub a2: f64,
}

/// Non-increasing step function stored on an ascending grid.
#[derive(Debug, Clone)]
pub struct StepEnvelope {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl StepEnvelope {
    /// Value at the first grid point at or above `xi`.
    pub fn value(&self, xi: f64) -> f64 {
        let i = self.grid.partition_point(|&g| g < xi);
        self.values[i.min(self.values.len() - 1)]
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
}

/// Tabulation points for the capacity envelope: dense in log scale on the
/// suction side down to `-1e40`, plus a short positive range.
fn envelope_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (0..=4800).map(|i| -(10f64).powf(40.0 - 0.01 * i as f64)).collect();
    g.push(0.0);
    g.extend((0..=200).map(|i| (10f64).powf(-8.0 + 0.05 * i as f64)));
    g
}

/// All the laws that make up a material, before the derived envelopes.
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub saturation: Arc<dyn SaturationLaw>,
    pub relative_permeability: Arc<dyn RelativePermeability>,
    pub permeability: Arc<dyn HydrationDependent>,
    pub viscosity: Arc<dyn ViscosityLaw>,
    pub porosity: Arc<dyn HydrationDependent>,
    pub density: Arc<dyn HydrationDependent>,
    pub diffusivity: Arc<dyn DiffusivityLaw>,
    pub conductivity: Arc<dyn ConductivityLaw>,
    pub hydration: Arc<dyn HydrationRate>,
    pub alpha1: f64,
    pub alpha2: f64,
}

/// The full constitutive bundle, immutable once built.
#[derive(Debug, Clone)]
pub struct MaterialModel {
    parts: ModelParts,
    constants: StructuralConstants,
    capacity: StepEnvelope,
}

impl MaterialModel {
    pub fn new(parts: ModelParts) -> Result<Self> {
        let s_sat = parts.saturation.saturated();
        let s_res = parts.saturation.residual();
        let (k1, k2) = parts.permeability.bounds();
        let (mu1, mu2) = parts.viscosity.bounds();
        let (phi1, phi2) = parts.porosity.bounds();
        let (rho1, rho2) = parts.density.bounds();
        let c_f = parts.hydration.bound();
        let positive = [("k1", k1), ("mu1", mu1), ("phi1", phi1), ("rho1", rho1), ("s_sat", s_sat)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Material(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(k2.is_finite() && mu2.is_finite() && phi2.is_finite() && rho2.is_finite() && c_f.is_finite()) {
            return Err(Error::Material("upper bounds must be finite".into()));
        }
        if !(parts.alpha1.is_finite() && parts.alpha2.is_finite()) {
            return Err(Error::Material("coupling constants must be finite".into()));
        }
        let a2 = k2 * parts.relative_permeability.value(s_sat) / mu1;
        let constants = StructuralConstants {
            s_sat,
            s_res,
            k1,
            k2,
            mu1,
            mu2,
            phi1,
            phi2,
            c_phi: parts.porosity.lipschitz(),
            rho1,
            rho2,
            c_f,
            a2,
        };
        let grid = envelope_grid();
        let ratio: Vec<f64> = grid
            .iter()
            .map(|&xi| {
                let d = parts.saturation.derivative(xi);
                let a1 = k1 * parts.relative_permeability.value(parts.saturation.value(xi)) / mu2;
                if d > 0.0 {
                    a1 / d
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let first = ratio
            .iter()
            .copied()
            .find(|v| v.is_finite())
            .ok_or_else(|| Error::Material("S' vanishes on the whole tabulation grid".into()))?;
        let mut run = first;
        let values: Vec<f64> = ratio
            .iter()
            .map(|&v| {
                run = run.min(v);
                CAPACITY_SAFETY * run
            })
            .collect();
        if !(values.last().copied().unwrap_or(0.0) > 0.0) {
            return Err(Error::Material("capacity envelope M is not positive".into()));
        }
        Ok(MaterialModel {
            parts,
            constants,
            capacity: StepEnvelope { grid, values },
        })
    }

    pub fn parts(&self) -> &ModelParts {
        &self.parts
    }

    pub fn constants(&self) -> &StructuralConstants {
        &self.constants
    }

    pub fn alpha1(&self) -> f64 {
        self.parts.alpha1
    }

    pub fn alpha2(&self) -> f64 {
        self.parts.alpha2
    }

    pub fn saturation(&self, p: f64) -> f64 {
        self.parts.saturation.value(p)
    }

    pub fn saturation_derivative(&self, p: f64) -> f64 {
        self.parts.saturation.derivative(p)
    }

    pub fn saturation_inverse(&self, s: f64) -> Option<f64> {
        self.parts.saturation.inverse(s)
    }

    pub fn relative_permeability(&self, s: f64) -> f64 {
        self.parts.relative_permeability.value(s)
    }

    pub fn permeability(&self, x: Point, r: f64) -> f64 {
        self.parts.permeability.value(x, r)
    }

    pub fn viscosity(&self, theta: f64) -> f64 {
        self.parts.viscosity.value(theta)
    }

    pub fn porosity(&self, x: Point, r: f64) -> f64 {
        self.parts.porosity.value(x, r)
    }

    pub fn porosity_derivative(&self, x: Point, r: f64) -> f64 {
        self.parts.porosity.derivative_r(x, r)
    }

    pub fn density(&self, x: Point, r: f64) -> f64 {
        self.parts.density.value(x, r)
    }

    pub fn diffusivity(&self, x: Point, p: f64) -> f64 {
        self.parts.diffusivity.value(x, p)
    }

    pub fn conductivity(&self, x: Point, p: f64, theta: f64, r: f64) -> f64 {
        self.parts.conductivity.value(x, p, theta, r)
    }

    pub fn hydration(&self, x: Point, p: f64, c: f64, theta: f64, r: f64) -> f64 {
        self.parts.hydration.value(x, p, c, theta, r)
    }

    pub fn hydration_derivative(&self, x: Point, p: f64, c: f64, theta: f64, r: f64) -> f64 {
        self.parts.hydration.derivative_p(x, p, c, theta, r)
    }

    pub fn hydration_envelope(&self, p: f64) -> f64 {
        self.parts.hydration.envelope(p)
    }

    /// Elliptic prefactor `k(x, r) / mu(theta)` that multiplies `k_R(S(p))`.
    pub fn mobility(&self, x: Point, theta: f64, r: f64) -> f64 {
        self.permeability(x, r) / self.viscosity(theta)
    }

    /// Transport coefficient `a = k(x, r) k_R(S(p)) / mu(theta)`.
    pub fn transport(&self, x: Point, p: f64, theta: f64, r: f64) -> f64 {
        self.mobility(x, theta, r) * self.relative_permeability(self.saturation(p))
    }

    /// Lower envelope `a1(p) = k1 k_R(S(p)) / mu2`.
    pub fn a1(&self, p: f64) -> f64 {
        self.constants.k1 * self.relative_permeability(self.saturation(p)) / self.constants.mu2
    }

    pub fn a2(&self) -> f64 {
        self.constants.a2
    }

    /// Non-increasing envelope `M <= a1 / S'`.
    pub fn capacity_envelope(&self, p: f64) -> f64 {
        self.capacity.value(p)
    }
}

/// `k(x, r) k_R(S(p)) / mu(theta)`, checked for range and finiteness.
pub fn evaluate_transport_coefficient(model: &MaterialModel, x: Point, p: f64, theta: f64, r: f64) -> Result<f64> {
    let s = model.saturation(p);
    let s_sat = model.constants().s_sat;
    if !(s >= 0.0 && s <= s_sat) {
        return Err(Error::ModelEvaluation {
            location: format!("x = ({}, {}), p = {p}", x[0], x[1]),
            message: format!("saturation {s} outside [0, {s_sat}]"),
        });
    }
    let a = model.transport(x, p, theta, r);
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::ModelEvaluation {
            location: format!("x = ({}, {}), p = {p}, theta = {theta}, r = {r}", x[0], x[1]),
            message: format!("transport coefficient {a} is not positive and finite"),
        });
    }
    Ok(a)
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SaturationConfig {
    VanGenuchten(VanGenuchtenParams),
    Logistic {
        #[serde(default = "one")]
        s_sat: f64,
        #[serde(default = "one")]
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RelativePermeabilityConfig {
    /// Mualem form tied to the van Genuchten parameters of the saturation law.
    Mualem,
    Linear { intercept: f64, slope: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HydrationParams {
    pub rate: f64,
    pub r_max: f64,
    #[serde(default = "two")]
    pub exponent: f64,
    #[serde(default)]
    pub activation: f64,
    #[serde(default = "one")]
    pub offset: f64,
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HydrationConfig {
    Arrhenius(HydrationParams),
    Constant { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    #[serde(default)]
    pub alpha1: f64,
    #[serde(default)]
    pub alpha2: f64,
}

/// Material description as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialConfig {
    pub saturation: SaturationConfig,
    pub relative_permeability: RelativePermeabilityConfig,
    pub permeability: RampLaw,
    pub viscosity: ExponentialViscosity,
    pub porosity: RampLaw,
    pub density: RampLaw,
    pub diffusivity: SuctionDiffusivity,
    pub conductivity: MoistureConductivity,
    pub hydration: HydrationConfig,
    pub coupling: CouplingConfig,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        MaterialConfig {
            saturation: SaturationConfig::VanGenuchten(VanGenuchtenParams::default()),
            relative_permeability: RelativePermeabilityConfig::Mualem,
            permeability: RampLaw {
                initial: 1.0,
                r#final: 0.5,
                r_scale: 0.5,
            },
            viscosity: ExponentialViscosity {
                reference: 1.0,
                sensitivity: 0.02,
                reference_temperature: 0.0,
                min: 0.5,
                max: 2.0,
            },
            porosity: RampLaw {
                initial: 0.2,
                r#final: 0.3,
                r_scale: 0.5,
            },
            density: RampLaw::constant(2.0),
            diffusivity: SuctionDiffusivity {
                floor: 1e-3,
                base: 0.1,
                sensitivity: 0.5,
            },
            conductivity: MoistureConductivity {
                dry: 0.5,
                wet: 1.5,
                sensitivity: 0.5,
            },
            hydration: HydrationConfig::Arrhenius(HydrationParams {
                rate: 2.0,
                r_max: 0.5,
                exponent: 2.0,
                activation: 0.5,
                offset: 1.0,
            }),
            coupling: CouplingConfig {
                alpha1: 0.0,
                alpha2: 5.0,
            },
        }
    }
}

impl MaterialConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| format!("byte {}..{}", s.start, s.end)).unwrap_or_default();
            Error::config(if key.is_empty() { "material".into() } else { key }, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("material config serializes")
    }

    pub fn build(&self) -> Result<MaterialModel> {
        let mut checks: Vec<String> = Vec::new();
        for (name, ramp) in [("permeability", &self.permeability), ("porosity", &self.porosity), ("density", &self.density)] {
            if !(ramp.r_scale > 0.0) {
                checks.push(format!("{name}.r_scale must be positive"));
            }
            if !(ramp.initial > 0.0 && ramp.r#final > 0.0) {
                checks.push(format!("{name} values must be positive"));
            }
        }
        let v = &self.viscosity;
        if !(v.min > 0.0 && v.min <= v.max && v.reference > 0.0) {
            checks.push("viscosity: need 0 < min <= max and reference > 0".into());
        }
        if !(self.diffusivity.floor > 0.0 && self.diffusivity.base >= 0.0) {
            checks.push("diffusivity: need floor > 0 and base >= 0".into());
        }
        if !(self.conductivity.dry > 0.0 && self.conductivity.wet > 0.0) {
            checks.push("conductivity: dry and wet must be positive".into());
        }
        if !checks.is_empty() {
            return Err(Error::Material(checks.join("; ")));
        }

        let (saturation, relative_permeability): (Arc<dyn SaturationLaw>, Arc<dyn RelativePermeability>) =
            match (&self.saturation, &self.relative_permeability) {
                (SaturationConfig::VanGenuchten(p), RelativePermeabilityConfig::Mualem) => {
                    let vg = VanGenuchten::new(p)?;
                    let kr = Mualem {
                        m: vg.m(),
                        s_res: p.s_res,
                        s_sat: p.s_sat,
                        floor: p.kr_floor,
                    };
                    (Arc::new(vg), Arc::new(kr))
                }
                (SaturationConfig::VanGenuchten(p), RelativePermeabilityConfig::Linear { intercept, slope }) => {
                    (Arc::new(VanGenuchten::new(p)?), linear_kr(*intercept, *slope)?)
                }
                (SaturationConfig::Logistic { s_sat, scale }, rel) => {
                    if !(*s_sat > 0.0 && *scale > 0.0) {
                        return Err(Error::Material("logistic saturation: s_sat and scale must be positive".into()));
                    }
                    let kr = match rel {
                        RelativePermeabilityConfig::Linear { intercept, slope } => linear_kr(*intercept, *slope)?,
                        RelativePermeabilityConfig::Mualem => {
                            return Err(Error::Material(
                                "Mualem relative permeability requires the van Genuchten saturation law".into(),
                            ))
                        }
                    };
                    (
                        Arc::new(LogisticSaturation {
                            s_sat: *s_sat,
                            scale: *scale,
                        }),
                        kr,
                    )
                }
            };
        let hydration: Arc<dyn HydrationRate> = match &self.hydration {
            HydrationConfig::Arrhenius(p) => Arc::new(ArrheniusHydration::new(saturation.clone(), p)?),
            HydrationConfig::Constant { value } => Arc::new(ConstantHydration { value: *value }),
        };
        MaterialModel::new(ModelParts {
            saturation,
            relative_permeability,
            permeability: Arc::new(self.permeability),
            viscosity: Arc::new(self.viscosity),
            porosity: Arc::new(self.porosity),
            density: Arc::new(self.density),
            diffusivity: Arc::new(self.diffusivity),
            conductivity: Arc::new(self.conductivity),
            hydration,
            alpha1: self.coupling.alpha1,
            alpha2: self.coupling.alpha2,
        })
    }
}

fn linear_kr(intercept: f64, slope: f64) -> Result<Arc<dyn RelativePermeability>> {
    if !(intercept > 0.0 && slope > 0.0) {
        return Err(Error::Material(
            "linear relative permeability must be positive and strictly increasing".into(),
        ));
    }
    Ok(Arc::new(LinearRelativePermeability { intercept, slope }))
}

/// Van Genuchten/Mualem model with the remaining laws taken from `rest`.
pub fn make_van_genuchten_model(params: &VanGenuchtenParams, rest: &MaterialConfig) -> Result<MaterialModel> {
    let mut cfg = rest.clone();
    cfg.saturation = SaturationConfig::VanGenuchten(*params);
    cfg.relative_permeability = RelativePermeabilityConfig::Mualem;
    cfg.build()
}

/// The default material: van Genuchten `alpha = 2`, `n = 1.6`, Mualem, active hydration.
pub fn default_model() -> MaterialModel {
    MaterialConfig::default().build().expect("default material is valid")
}

// ---------------------------------------------------------------------------
// validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AssumptionKind {
    SaturationRange,
    SaturationMonotone,
    PermeabilityBounds,
    RelativePermeability,
    ViscosityBounds,
    PorosityBounds,
    PorosityLipschitz,
    DensityBounds,
    PositiveDiffusivity,
    PositiveConductivity,
    HydrationEnvelope,
    TransportEnvelope,
    CapacityEnvelope,
    SmallnessLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionViolation {
    pub kind: AssumptionKind,
    pub detail: String,
}

impl fmt::Display for AssumptionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)
    }
}

/// Sampling ranges used by [`validate_assumptions`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    /// Most negative sampled pressure (log spacing on the suction side).
    pub p_min: f64,
    pub p_max: f64,
    pub p_points: usize,
    pub r_max: f64,
    pub r_points: usize,
    pub theta: Vec<f64>,
    pub c: Vec<f64>,
    pub x: Vec<Point>,
}

impl Default for SampleGrid {
    fn default() -> Self {
        SampleGrid {
            p_min: -1e8,
            p_max: 20.0,
            p_points: 400,
            r_max: 5.0,
            r_points: 41,
            theta: vec![-5.0, -1.0, 0.0, 0.5, 1.0, 5.0, 20.0, 50.0],
            c: vec![-1.0, 0.0, 0.5, 1.0, 2.0],
            x: vec![[0.0, 0.0], [0.5, 0.5], [1.0, 0.25]],
        }
    }
}

impl SampleGrid {
    pub fn pressures(&self) -> Vec<f64> {
        let neg = self.p_points * 3 / 4;
        let lo = (-self.p_min).max(1e-8).log10();
        let mut out: Vec<f64> = (0..neg)
            .map(|i| -(10f64).powf(lo + (-8.0 - lo) * i as f64 / (neg.max(2) - 1) as f64))
            .collect();
        out.push(0.0);
        let pos = self.p_points - neg;
        out.extend((1..=pos).map(|i| self.p_max * i as f64 / pos as f64));
        out
    }

    fn hydrations(&self) -> Vec<f64> {
        (0..self.r_points)
            .map(|i| self.r_max * i as f64 / (self.r_points.max(2) - 1) as f64)
            .collect()
    }
}

/// Ratio `f~(S^{-1}(delta)) / (M(S^{-1}(delta)) delta)` along `delta = 2^-j`, `j = 1..=40`.
///
/// Entries are `None` where `delta` lies outside the range of `S`.
pub fn smallness_ratios(model: &MaterialModel) -> Vec<(f64, Option<f64>)> {
    (1..=40)
        .map(|j| {
            let delta = 0.5f64.powi(j);
            let ratio = model.saturation_inverse(delta).map(|xi| {
                model.hydration_envelope(xi) / (model.capacity_envelope(xi) * delta)
            });
            (delta, ratio)
        })
        .collect()
}

const REL: f64 = 1e-12;

/// Spot-checks every structural assumption on `grid`; empty result means none failed.
pub fn validate_assumptions(model: &MaterialModel, grid: &SampleGrid) -> Vec<AssumptionViolation> {
    let mut out = Vec::new();
    let mut flag = |kind: AssumptionKind, detail: String| {
        // one report per kind keeps the list readable
        if !out.iter().any(|v: &AssumptionViolation| v.kind == kind) {
            out.push(AssumptionViolation { kind, detail });
        }
    };
    let k = *model.constants();
    let ps = grid.pressures();
    let rs = grid.hydrations();

    let mut prev: Option<(f64, f64)> = None;
    for &p in &ps {
        let s = model.saturation(p);
        if !(s >= 0.0 && s <= k.s_sat * (1.0 + REL)) {
            flag(AssumptionKind::SaturationRange, format!("S({p}) = {s} outside (0, {}]", k.s_sat));
        }
        if let Some((pp, sp)) = prev {
            // equal values that both underflowed to zero are not a monotonicity defect
            if s < sp || (s == sp && s > 0.0) {
                flag(
                    AssumptionKind::SaturationMonotone,
                    format!("S({pp}) = {sp} but S({p}) = {s}"),
                );
            }
        }
        prev = Some((p, s));
    }

    let ss: Vec<f64> = (0..=200).map(|i| k.s_sat * i as f64 / 200.0).collect();
    let mut last = f64::NEG_INFINITY;
    for &s in &ss {
        let kr = model.relative_permeability(s);
        if !(kr > 0.0 && kr.is_finite()) {
            flag(AssumptionKind::RelativePermeability, format!("k_R({s}) = {kr} is not positive"));
        }
        if kr <= last {
            flag(AssumptionKind::RelativePermeability, format!("k_R not strictly increasing at s = {s}"));
        }
        last = kr;
    }

    for &x in &grid.x {
        for (i, &r) in rs.iter().enumerate() {
            let kv = model.permeability(x, r);
            if !(kv >= k.k1 * (1.0 - REL) && kv <= k.k2 * (1.0 + REL)) {
                flag(AssumptionKind::PermeabilityBounds, format!("k({r}) = {kv} outside [{}, {}]", k.k1, k.k2));
            }
            let phi = model.porosity(x, r);
            if !(phi >= k.phi1 * (1.0 - REL) && phi <= k.phi2 * (1.0 + REL)) {
                flag(AssumptionKind::PorosityBounds, format!("phi({r}) = {phi} outside [{}, {}]", k.phi1, k.phi2));
            }
            let rho = model.density(x, r);
            if !(rho >= k.rho1 * (1.0 - REL) && rho <= k.rho2 * (1.0 + REL)) {
                flag(AssumptionKind::DensityBounds, format!("rho({r}) = {rho} outside [{}, {}]", k.rho1, k.rho2));
            }
            for &r2 in &rs[..i] {
                let d = (model.porosity(x, r2) - phi).abs();
                if d > k.c_phi * (r - r2).abs() * (1.0 + 1e-9) + 1e-15 {
                    flag(
                        AssumptionKind::PorosityLipschitz,
                        format!("|phi({r}) - phi({r2})| = {d} exceeds C_phi |dr| with C_phi = {}", k.c_phi),
                    );
                }
            }
        }
    }

    for &t in &grid.theta {
        let mu = model.viscosity(t);
        if !(mu >= k.mu1 && mu <= k.mu2) {
            flag(AssumptionKind::ViscosityBounds, format!("mu({t}) = {mu} outside [{}, {}]", k.mu1, k.mu2));
        }
    }

    let mut envelope_prev = f64::NEG_INFINITY;
    let mut capacity_prev = f64::INFINITY;
    for &p in &ps {
        let env = model.hydration_envelope(p);
        if !(env <= k.c_f * (1.0 + REL)) || env < 0.0 {
            flag(AssumptionKind::HydrationEnvelope, format!("f~({p}) = {env} outside [0, C_f = {}]", k.c_f));
        }
        if env < envelope_prev * (1.0 - 1e-12) {
            flag(AssumptionKind::HydrationEnvelope, format!("f~ decreases at p = {p}"));
        }
        envelope_prev = env;

        let a1 = model.a1(p);
        let sd = model.saturation_derivative(p);
        let m = model.capacity_envelope(p);
        if !(m > 0.0 && m.is_finite()) || m > capacity_prev {
            flag(AssumptionKind::CapacityEnvelope, format!("M({p}) = {m} is not positive and non-increasing"));
        }
        capacity_prev = m;
        if sd > 0.0 && m > a1 / sd * (1.0 + 1e-9) {
            flag(AssumptionKind::CapacityEnvelope, format!("M({p}) = {m} exceeds a1/S' = {}", a1 / sd));
        }

        for &x in &grid.x {
            let dw = model.diffusivity(x, p);
            if !(dw > 0.0 && dw.is_finite()) {
                flag(AssumptionKind::PositiveDiffusivity, format!("D_w({p}) = {dw}"));
            }
            for &t in &grid.theta {
                for &r in rs.iter().step_by(5) {
                    let a = model.transport(x, p, t, r);
                    if !(a >= a1 * (1.0 - 1e-9) && a <= k.a2 * (1.0 + 1e-9)) {
                        flag(
                            AssumptionKind::TransportEnvelope,
                            format!("a(p = {p}, theta = {t}, r = {r}) = {a} outside [a1, a2] = [{a1}, {}]", k.a2),
                        );
                    }
                    let lam = model.conductivity(x, p, t, r);
                    if !(lam > 0.0 && lam.is_finite()) {
                        flag(AssumptionKind::PositiveConductivity, format!("lambda({p}, {t}, {r}) = {lam}"));
                    }
                    for &c in &grid.c {
                        let f = model.hydration(x, p, c, t, r);
                        if !(f.abs() <= env * (1.0 + REL) + 1e-300) {
                            flag(
                                AssumptionKind::HydrationEnvelope,
                                format!("|f(p = {p}, c = {c}, theta = {t}, r = {r})| = {} exceeds f~ = {env}", f.abs()),
                            );
                        }
                    }
                }
            }
        }
    }

    // The limit at delta = 0 is replaced by decay over the tail j = 21..=40.
    let ratios = smallness_ratios(model);
    let tail = &ratios[20..];
    if let Some((delta, _)) = tail.iter().find(|(_, r)| r.is_none()) {
        flag(
            AssumptionKind::SmallnessLimit,
            format!("delta = {delta:e} is outside the range of S, S^-1(delta) undefined"),
        );
    } else {
        let vals: Vec<f64> = tail.iter().map(|(_, r)| r.unwrap()).collect();
        let increasing = vals.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-9));
        let first = vals[0];
        let lastv = *vals.last().unwrap();
        if !vals.iter().all(|v| v.is_finite()) || increasing || lastv > 1e-3 * first {
            flag(
                AssumptionKind::SmallnessLimit,
                format!("f~(S^-1(delta)) / (M delta) does not decay: {first:e} at delta = 2^-21, {lastv:e} at 2^-40"),
            );
        }
    }
    out
}

// ---------------------------------------------------------------------------
// initial data

#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub p0: Vec<f64>,
    pub c0: Vec<f64>,
    pub theta0: Vec<f64>,
    /// Strict lower bound of the initial pressure.
    pub p1: f64,
}

impl InitialData {
    /// Checks lengths, `-inf < p1 < p0 <= 0`, boundedness and the Dirichlet trace.
    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        let n = mesh.num_nodes();
        for (name, v) in [("p0", &self.p0), ("c0", &self.c0), ("theta0", &self.theta0)] {
            if v.len() != n {
                return Err(Error::InitialData(format!("{name} has {} entries, mesh has {n} nodes", v.len())));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::InitialData(format!("{name}[{i}] is not finite")));
            }
        }
        if !self.p1.is_finite() {
            return Err(Error::InitialData("p1 must be finite".into()));
        }
        for (i, &p) in self.p0.iter().enumerate() {
            if !(p > self.p1 && p <= 0.0) {
                return Err(Error::InitialData(format!(
                    "initial pressure must satisfy p1 < p0 <= 0: p0[{i}] = {p}, p1 = {}",
                    self.p1
                )));
            }
        }
        for i in mesh.dirichlet_nodes() {
            for (name, v) in [("p0", &self.p0), ("c0", &self.c0), ("theta0", &self.theta0)] {
                if v[i] != 0.0 {
                    return Err(Error::InitialData(format!(
                        "{name}[{i}] = {} on the Dirichlet boundary, must be 0",
                        v[i]
                    )));
                }
            }
        }
        Ok(())
    }
}
