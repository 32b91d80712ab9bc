//! Kirchhoff transformation, the energy density `Theta_S`, and the De Giorgi
//! machinery that produces the pressure floor `ell`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::material::MaterialModel;
use crate::quadrature::integrate;

/// `Theta_S(xi) = int_0^xi S'(z) z dz`.
pub fn theta_s(model: &MaterialModel, xi: f64) -> Result<f64> {
    if xi == 0.0 {
        return Ok(0.0);
    }
    let v = integrate(|z| model.saturation_derivative(z) * z, 0.0, xi, 1e-11)?;
    Ok(v.max(0.0))
}

/// `Theta_S(xi1) - Theta_S(xi2) <= [S(xi1) - S(xi2)] xi1`, within `1e-9`.
pub fn theta_s_inequality_check(model: &MaterialModel, xi1: f64, xi2: f64) -> Result<bool> {
    let lhs = theta_s(model, xi1)? - theta_s(model, xi2)?;
    let rhs = (model.saturation(xi1) - model.saturation(xi2)) * xi1;
    Ok(lhs <= rhs + 1e-9 * (1.0 + lhs.abs().max(rhs.abs())))
}

/// Primitive `beta` of the truncated relative permeability, tabulated with
/// cubic Hermite segments using the exact end slopes.
///
/// The table stores the lifted primitive `int_ell^xi k~_r`, which stays small
/// where `k~_r` is small and therefore keeps full relative resolution in deep
/// suction; `beta` itself is the lifted value minus its value at 0. Solvers
/// should work with the lifted form: it differs from `beta` by a constant.
#[derive(Debug, Clone)]
pub struct KirchhoffMap {
    ell: f64,
    k0: f64,
    k1: f64,
    xs: Vec<f64>,
    lifted: Vec<f64>,
    slopes: Vec<f64>,
    offset: f64,
}

/// Upper end of the tabulation; beyond it the slope is frozen. Further up,
/// `S(p)` is within rounding of `S_s` and `k_R(S(p))` turns into a staircase
/// that no interpolant can resolve.
const TABLE_TOP: f64 = 10.0;

fn hermite(x0: f64, x1: f64, b0: f64, b1: f64, m0: f64, m1: f64, x: f64) -> (f64, f64) {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    let v = (2.0 * t3 - 3.0 * t2 + 1.0) * b0 + (t3 - 2.0 * t2 + t) * h * m0 + (-2.0 * t3 + 3.0 * t2) * b1 + (t3 - t2) * h * m1;
    let d = (6.0 * t2 - 6.0 * t) / h * b0 + (3.0 * t2 - 4.0 * t + 1.0) * m0 + (-6.0 * t2 + 6.0 * t) / h * b1 + (3.0 * t2 - 2.0 * t) * m1;
    (v, d)
}

impl KirchhoffMap {
    pub fn ell(&self) -> f64 {
        self.ell
    }

    /// Lower bound `K0 = k_R(S(ell))` of the truncated permeability.
    pub fn k0(&self) -> f64 {
        self.k0
    }

    /// Upper bound `K1 = k_R(S_s)`.
    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.xs
    }

    /// Lifted primitive at 0, i.e. `beta(xi) = lifted(xi) - offset`.
    pub fn offset(&self) -> f64 {
        self.offset
    }

    fn top_slope(&self) -> f64 {
        *self.slopes.last().unwrap()
    }

    /// Lifted primitive and its derivative.
    pub fn eval_lifted(&self, xi: f64) -> (f64, f64) {
        let n = self.xs.len();
        if xi <= self.xs[0] {
            return (self.k0 * (xi - self.xs[0]), self.k0);
        }
        if xi >= self.xs[n - 1] {
            return (self.lifted[n - 1] + self.top_slope() * (xi - self.xs[n - 1]), self.top_slope());
        }
        let i = self.xs.partition_point(|&x| x <= xi) - 1;
        hermite(self.xs[i], self.xs[i + 1], self.lifted[i], self.lifted[i + 1], self.slopes[i], self.slopes[i + 1], xi)
    }

    pub fn lifted(&self, xi: f64) -> f64 {
        self.eval_lifted(xi).0
    }

    /// Inverse of [`KirchhoffMap::lifted`].
    pub fn lifted_inv(&self, v: f64) -> f64 {
        let n = self.xs.len();
        if v <= 0.0 {
            return self.xs[0] + v / self.k0;
        }
        if v >= self.lifted[n - 1] {
            return self.xs[n - 1] + (v - self.lifted[n - 1]) / self.top_slope();
        }
        let i = self.lifted.partition_point(|&b| b <= v) - 1;
        let (mut lo, mut hi) = (self.xs[i], self.xs[i + 1]);
        let span = self.lifted[i + 1] - self.lifted[i];
        let mut x = if span > 0.0 { lo + (hi - lo) * (v - self.lifted[i]) / span } else { lo };
        // safeguarded Newton inside one monotone segment
        for _ in 0..200 {
            let (y, d) = self.eval_lifted(x);
            let r = y - v;
            if r == 0.0 {
                return x;
            }
            if r > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let mut next = x - r / d;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if next == x || hi - lo <= 2.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) {
                return next;
            }
            x = next;
        }
        x
    }

    /// `beta(xi)` and `beta'(xi)` of the tabulated interpolant.
    pub fn eval(&self, xi: f64) -> (f64, f64) {
        let (v, d) = self.eval_lifted(xi);
        (v - self.offset, d)
    }

    pub fn beta(&self, xi: f64) -> f64 {
        self.eval(xi).0
    }

    pub fn beta_derivative(&self, xi: f64) -> f64 {
        self.eval_lifted(xi).1
    }

    /// Inverse of [`KirchhoffMap::beta`].
    pub fn beta_inv(&self, u: f64) -> f64 {
        self.lifted_inv(u + self.offset)
    }

    /// Truncated relative permeability `k~_r(xi)`.
    pub fn truncated_permeability(model: &MaterialModel, ell: f64, xi: f64) -> f64 {
        model.relative_permeability(model.saturation(xi.max(ell)))
    }
}

/// Tabulates `beta(xi) = int_0^xi k~_r` for the truncation level `ell`.
pub fn build_kirchhoff_map(model: &MaterialModel, ell: f64) -> Result<KirchhoffMap> {
    if !ell.is_finite() || ell >= 0.0 {
        return Err(Error::Kirchhoff(format!("truncation level must be finite and negative, got {ell}")));
    }
    let kt = |x: f64| KirchhoffMap::truncated_permeability(model, ell, x);
    let k0 = kt(ell);
    let k1 = model.relative_permeability(model.constants().s_sat);

    // coarse log-spaced skeleton, refined below
    let mut skeleton = vec![ell];
    let mut e = (-ell).log10().floor();
    while e > -6.0 {
        let x = -(10f64).powf(e);
        if x > ell {
            skeleton.push(x);
        }
        e -= 0.125;
    }
    skeleton.push(0.0);
    let mut e = -6.0;
    while (10f64).powf(e) < TABLE_TOP {
        skeleton.push((10f64).powf(e));
        e += 0.125;
    }
    skeleton.push(TABLE_TOP);

    let mut xs = vec![skeleton[0]];
    let mut incr = Vec::new();
    for w in skeleton.windows(2) {
        refine(&kt, w[0], w[1], 0, &mut xs, &mut incr)?;
    }
    let mut lifted = vec![0.0; xs.len()];
    for i in 0..incr.len() {
        lifted[i + 1] = lifted[i] + incr[i];
    }
    let zero = xs
        .iter()
        .position(|&x| x == 0.0)
        .ok_or_else(|| Error::Kirchhoff("tabulation lost the origin".into()))?;
    let slopes: Vec<f64> = xs.iter().map(|&x| kt(x)).collect();
    for i in 0..incr.len() {
        if !(incr[i] > 0.0 && lifted[i + 1] >= lifted[i] && slopes[i] > 0.0) {
            return Err(Error::Kirchhoff(format!(
                "tabulated primitive is not increasing on [{}, {}]",
                xs[i],
                xs[i + 1]
            )));
        }
    }
    Ok(KirchhoffMap {
        ell,
        k0,
        k1,
        offset: lifted[zero],
        xs,
        lifted,
        slopes,
    })
}

fn refine(
    kt: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    depth: usize,
    xs: &mut Vec<f64>,
    incr: &mut Vec<f64>,
) -> Result<()> {
    let whole = integrate(kt, a, b, 1e-11)?;
    let (ka, kb) = (kt(a), kt(b));
    let h = b - a;
    let secant = whole / h;
    // Fritsch-Carlson: the cubic through exact slopes is monotone when the
    // scaled slopes lie in the disc of radius 3
    let (al, be) = (ka / secant, kb / secant);
    let monotone = secant > 0.0 && al * al + be * be <= 9.0;
    let mid = 0.5 * (a + b);
    let left = integrate(kt, a, mid, 1e-11)?;
    let (hv, hd) = hermite(a, b, 0.0, whole, ka, kb, mid);
    let km = kt(mid);
    let accurate = (hv - left).abs() <= 1e-11 * whole && (hd - km).abs() <= 1e-7 * km.max(secant);
    // kinks (floors, clamps) cannot be resolved to full accuracy; stop once
    // the segment is at the rounding scale of its position
    let tiny = h <= 1e-11 * a.abs().max(b.abs()).max(1.0);
    if (monotone && (accurate || tiny)) || depth >= 60 {
        if !monotone {
            return Err(Error::Kirchhoff(format!(
                "cannot tabulate a monotone interpolant on [{a}, {b}]"
            )));
        }
        xs.push(b);
        incr.push(whole);
        return Ok(());
    }
    refine(kt, a, mid, depth + 1, xs, incr)?;
    refine(kt, mid, b, depth + 1, xs, incr)
}

/// Outcome of iterating `Z_{j+1} = gamma 4^j Z_j^{tau + 1}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recurrence {
    pub z: Vec<f64>,
    /// `Z_{j_max} < 1e-30`.
    pub converged: bool,
    /// The iteration overflowed.
    pub diverged: bool,
}

/// Iterates the De Giorgi recurrence in log space up to `j_max`.
pub fn degiorgi_recurrence(gamma: f64, tau: f64, z0: f64, j_max: usize) -> Recurrence {
    let mut z = vec![z0];
    if z0 == 0.0 || gamma == 0.0 {
        z.extend(std::iter::repeat_n(0.0, j_max));
        return Recurrence {
            z,
            converged: true,
            diverged: false,
        };
    }
    let (lg, ln4) = (gamma.ln(), 4f64.ln());
    let mut lz = z0.ln();
    for j in 0..j_max {
        lz = lg + j as f64 * ln4 + (tau + 1.0) * lz;
        if lz > f64::MAX.ln() || lz.is_nan() {
            return Recurrence {
                z,
                converged: false,
                diverged: true,
            };
        }
        z.push(lz.exp());
    }
    Recurrence {
        converged: lz < 1e-30f64.ln(),
        z,
        diverged: false,
    }
}

/// Largest `gamma` for which the recurrence is guaranteed to vanish.
pub fn smallness_threshold(tau: f64, z0: f64) -> f64 {
    (-tau * z0.ln() - 4f64.ln() / tau).exp()
}

/// Inputs of the pressure-floor search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeGiorgiParams {
    pub domain_area: f64,
    /// Embedding exponent, `q > 2`.
    pub q: f64,
    /// Embedding constant of the domain.
    pub c_e: f64,
    /// Lower bound of the initial pressure; the search keeps `S^{-1}(delta) < p1`.
    pub p1: Option<f64>,
}

impl DeGiorgiParams {
    pub fn tau(&self) -> f64 {
        2.0 * (self.q - 2.0) / self.q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBoundEstimate {
    /// `S^{-1}(delta / 2)`, or `-inf` when no admissible `delta` exists.
    pub ell: f64,
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
    pub tau: f64,
    pub threshold: f64,
    /// Levels `d_j = delta/2 (1 + 2^-j)` and `k_j = S^{-1}(d_j)` for `j = 0..=16`.
    pub levels: Vec<(f64, f64)>,
}

/// `gamma(delta)` from the level-set recurrence.
pub fn degiorgi_gamma(model: &MaterialModel, params: &DeGiorgiParams, delta: f64) -> Option<f64> {
    let k = model.constants();
    let xi = model.saturation_inverse(delta)?;
    let inner = params.c_e * (k.c_phi * k.s_sat + model.alpha1().abs()) * model.hydration_envelope(xi) * 4.0
        / (model.capacity_envelope(xi) * delta);
    Some(k.phi2 / k.phi1 * inner * inner)
}

/// Searches `delta = 2^-j`, `j = 0..=60`, for the largest admissible level.
pub fn estimate_pressure_lower_bound(model: &MaterialModel, domain_area: f64, q: f64, c_e: f64) -> Result<LowerBoundEstimate> {
    estimate_pressure_lower_bound_with(
        model,
        &DeGiorgiParams {
            domain_area,
            q,
            c_e,
            p1: None,
        },
    )
}

pub fn estimate_pressure_lower_bound_with(model: &MaterialModel, params: &DeGiorgiParams) -> Result<LowerBoundEstimate> {
    if !(params.q > 2.0 && params.q.is_finite()) {
        return Err(Error::config("q", format!("embedding exponent must exceed 2, got {}", params.q)));
    }
    if !(params.c_e > 0.0 && params.domain_area > 0.0) {
        return Err(Error::config("c_e", "embedding constant and domain area must be positive"));
    }
    let tau = params.tau();
    let threshold = smallness_threshold(tau, params.domain_area);
    let cap = params.p1.map(|p1| model.saturation(p1));
    for j in 0..=60 {
        let delta = 0.5f64.powi(j);
        if let Some(cap) = cap {
            if delta >= cap {
                continue;
            }
        }
        let Some(gamma) = degiorgi_gamma(model, params, delta) else {
            continue;
        };
        if gamma <= threshold {
            let ell = model
                .saturation_inverse(0.5 * delta)
                .ok_or_else(|| Error::Kirchhoff(format!("S^-1({}) undefined", 0.5 * delta)))?;
            let levels = (0..=16)
                .filter_map(|j| {
                    let d = 0.5 * delta * (1.0 + 0.5f64.powi(j));
                    model.saturation_inverse(d).map(|k| (d, k))
                })
                .collect();
            return Ok(LowerBoundEstimate {
                ell,
                delta: Some(delta),
                gamma: Some(gamma),
                tau,
                threshold,
                levels,
            });
        }
    }
    Ok(LowerBoundEstimate {
        ell: f64::NEG_INFINITY,
        delta: None,
        gamma: None,
        tau,
        threshold,
        levels: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::*;
    use std::sync::Arc;

    fn logistic_model(kr: RelativePermeabilityConfig) -> MaterialModel {
        MaterialConfig {
            saturation: SaturationConfig::Logistic { s_sat: 1.0, scale: 1.0 },
            relative_permeability: kr,
            ..Default::default()
        }
        .build()
        .unwrap()
    }

    fn logistic() -> MaterialModel {
        logistic_model(RelativePermeabilityConfig::Linear {
            intercept: 1e-9,
            slope: 1.0,
        })
    }

    #[test]
    fn theta_s_values() {
        let m = logistic();
        assert_eq!(theta_s(&m, 0.0).unwrap(), 0.0);
        for xi in [1.0, 2.0, 5.0] {
            let a = theta_s(&m, xi).unwrap();
            let b = theta_s(&m, -xi).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
        // int_0^1 z e^-z / (1 + e^-z)^2 dz, 50-digit quadrature
        let v = theta_s(&m, 1.0).unwrap();
        assert!((v - 0.110_944_071_671_727_35).abs() < 1e-12, "{v}");
    }

    #[test]
    fn theta_s_inequality_examples() {
        let m = logistic();
        assert!(theta_s_inequality_check(&m, 3.0, 3.0).unwrap());
        for xi2 in [-7.0, -1.0, 0.5, 9.0] {
            assert!(theta_s_inequality_check(&m, 0.0, xi2).unwrap());
        }
    }

    #[test]
    fn unit_permeability_gives_identity() {
        #[derive(Debug)]
        struct Unit;
        impl RelativePermeability for Unit {
            fn value(&self, _s: f64) -> f64 {
                1.0
            }
        }
        let mut parts = logistic().parts().clone();
        parts.relative_permeability = Arc::new(Unit);
        let m = MaterialModel::new(parts).unwrap();
        let map = build_kirchhoff_map(&m, -20.0).unwrap();
        assert_eq!(map.beta(0.0), 0.0);
        for xi in [-30.0, -20.0, -3.3, -1e-3, 0.0, 0.7, 12.0, 100.0] {
            assert!((map.beta(xi) - xi).abs() < 1e-12, "{xi}");
        }
    }

    #[test]
    fn truncated_primitive_matches_oracle() {
        let map = build_kirchhoff_map(&logistic_model(RelativePermeabilityConfig::Linear { intercept: 1e-9, slope: 1.0 }), -5.0).unwrap();
        // int_0^-5 (1e-9 + S(z)) dz, and the frozen slope below -5, 50 digits
        let b5 = -0.686_431_832_070_827_24 - 5e-9;
        assert!((map.beta(-5.0) - b5).abs() < 1e-12, "{}", map.beta(-5.0));
        let k0 = 0.006_692_850_924_284_855_6 + 1e-9;
        assert!((map.k0() - k0).abs() < 1e-15);
        assert!((map.beta(-10.0) - (b5 - 5.0 * k0)).abs() < 1e-12);
    }

    #[test]
    fn beta_is_bi_lipschitz_and_invertible() {
        let model = default_model();
        let map = build_kirchhoff_map(&model, -1e4).unwrap();
        let mut xs: Vec<f64> = (0..400).map(|i| -(10f64).powf(4.2 - 0.025 * i as f64)).collect();
        xs.extend([0.0, 1e-3, 0.5, 3.0, 50.0]);
        xs.sort_by(f64::total_cmp);
        for w in xs.windows(2) {
            let db = map.lifted(w[1]) - map.lifted(w[0]);
            let dx = w[1] - w[0];
            assert!(db >= map.k0() * dx * (1.0 - 1e-9), "K0 at {:?}", w);
            assert!(db <= map.k1() * dx * (1.0 + 1e-9), "K1 at {:?}", w);
        }
        for &x in &xs {
            let back = map.lifted_inv(map.lifted(x));
            assert!((back - x).abs() <= 1e-10 * x.abs().max(1e-3), "{x} -> {back}");
            // beta itself carries the O(1) offset and resolves p only where
            // the slope is not tiny
            if x > -20.0 {
                let back = map.beta_inv(map.beta(x));
                assert!((back - x).abs() <= 1e-10 * x.abs().max(1e-3), "{x} -> {back}");
            }
        }
        assert!((map.lifted(map.ell())).abs() < 1e-300);
        assert_eq!(map.beta(0.0), 0.0);
    }

    #[test]
    fn recurrence_examples() {
        let z = degiorgi_recurrence(1.0, 1.0, 0.0, 10);
        assert!(z.converged && z.z.iter().all(|&v| v == 0.0));
        let ok = degiorgi_recurrence(0.25, 1.0, 1.0, 200);
        assert!(ok.converged && !ok.diverged);
        // at equality Z_j = Z0 4^{-j / tau}
        assert!((ok.z[5] - 4f64.powi(-5)).abs() < 1e-15);
        let bad = degiorgi_recurrence(2.5, 1.0, 1.0, 200);
        assert!(bad.diverged && !bad.converged);
        assert!((smallness_threshold(1.0, 1.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_source_gives_largest_delta() {
        let mut cfg = MaterialConfig::default();
        cfg.hydration = HydrationConfig::Constant { value: 0.0 };
        let m = cfg.build().unwrap();
        let est = estimate_pressure_lower_bound(&m, 1.0, 4.0, 1.0).unwrap();
        // delta = 1 = S_s is outside the range, so the first admissible delta is 1/2
        assert_eq!(est.delta, Some(0.5));
        assert!((est.ell - m.saturation_inverse(0.25).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn lower_bound_is_monotone_in_embedding_constant() {
        let m = default_model();
        let a = estimate_pressure_lower_bound(&m, 1.0, 4.0, 1.0).unwrap();
        let b = estimate_pressure_lower_bound(&m, 1.0, 4.0, 2.0).unwrap();
        assert!(a.ell.is_finite());
        assert!(b.ell <= a.ell);
        for w in a.levels.windows(2) {
            assert!(w[1].0 < w[0].0 && w[1].1 < w[0].1);
        }
    }
}
