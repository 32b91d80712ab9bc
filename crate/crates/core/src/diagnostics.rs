//! Checks of the discrete a-priori estimates on a finished trajectory.
//!
//! Every check is a pure function of the trajectory, the mesh and the model.
//! Spatial integrals use the lumped quadrature of the scheme.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretization::{darcy_flux, element_mobility, upwind_advection, Forcing, StateFields};
use crate::error::{Error, Result};
use crate::kirchhoff::{theta_s, KirchhoffMap};
use crate::linalg::Pattern;
use crate::material::MaterialModel;
use crate::mesh::Mesh;
use crate::quadrature::gauss_legendre;
use crate::stepper::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub lags: Vec<usize>,
    /// Number of temporal test functions in the weak residual.
    pub weak_basis: usize,
    /// Relative slack on the maximum principle for the concentration.
    pub concentration_tolerance: f64,
    pub rate_tolerance: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            lags: vec![1, 2, 4, 8],
            weak_basis: 16,
            concentration_tolerance: 1e-8,
            rate_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxPrinciple {
    /// `None` when no theoretical floor exists.
    pub theoretical_ell: Option<f64>,
    pub observed_min: f64,
    pub pass: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinfBound {
    pub field: String,
    pub bound: Option<f64>,
    pub observed_max: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySeries {
    /// `E_k = sum_i m_i Theta_S(p^k_i) + h sum_{l <= k} |grad p^l|^2`.
    pub energy: Vec<f64>,
    /// The accumulated gradient part alone.
    pub dissipation: Vec<f64>,
    pub sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateRow {
    pub lag: usize,
    /// `h sum_j <S(p^{j+k}) - S(p^j), p^{j+k} - p^j>`.
    pub saturation_pairing: f64,
    pub concentration: f64,
    pub temperature: f64,
    pub hydration: f64,
    /// Plain `h sum_j |p^{j+k} - p^j|^2`, for context only.
    pub pressure_plain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateTable {
    pub h: f64,
    pub rows: Vec<TranslateRow>,
    /// Max over lags of `T(k) / (k h)`, in the order pairing, c, theta, r.
    pub max_ratios: [f64; 4],
    pub skipped_lags: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakResiduals {
    pub basis_size: usize,
    pub pressure: f64,
    pub concentration: f64,
    pub temperature: f64,
    /// `max_l |r^l - h sum_{j <= l} f^j|`.
    pub memory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateBound {
    pub c_f: f64,
    pub observed_max: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub levels: usize,
    pub h: f64,
    pub max_principle: MaxPrinciple,
    pub linf_bounds: Vec<LinfBound>,
    pub energy: EnergySeries,
    pub translates: TranslateTable,
    pub weak_residuals: WeakResiduals,
    pub hydration_rate: RateBound,
}

fn fmin(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(f64::INFINITY, f64::min)
}

fn fmax(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(f64::NEG_INFINITY, f64::max)
}

fn abs_max(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn require_levels(traj: &Trajectory, mesh: &Mesh) -> Result<()> {
    if traj.levels.is_empty() {
        return Err(Error::Diagnostics("trajectory has no levels".into()));
    }
    let n = mesh.num_nodes();
    if traj.levels.iter().any(|l| l.p.len() != n || l.c.len() != n || l.theta.len() != n || l.r.len() != n) {
        return Err(Error::Diagnostics(format!("trajectory fields do not match the mesh ({n} nodes)")));
    }
    Ok(())
}

pub fn check_max_principle(traj: &Trajectory, ell: f64) -> MaxPrinciple {
    let observed_min = fmin(traj.levels.iter().flat_map(|l| l.p.iter().cloned()));
    if ell.is_finite() {
        MaxPrinciple {
            theoretical_ell: Some(ell),
            observed_min,
            pass: observed_min >= ell,
            note: String::new(),
        }
    } else {
        MaxPrinciple {
            theoretical_ell: None,
            observed_min,
            pass: true,
            note: "no theoretical bound".into(),
        }
    }
}

pub fn check_linf_bounds(traj: &Trajectory, model: &MaterialModel, cfg: &DiagnosticsConfig) -> Vec<LinfBound> {
    let first = &traj.levels[0];
    let c0 = abs_max(&first.c);
    let c_bound = c0 * (1.0 + cfg.concentration_tolerance);
    let c_max = fmax(traj.levels.iter().map(|l| abs_max(&l.c)));
    let r_bound = traj.t_final * model.parts().hydration.bound();
    let r_max = fmax(traj.levels.iter().map(|l| abs_max(&l.r)));
    let th_max = fmax(traj.levels.iter().map(|l| abs_max(&l.theta)));
    let p_max = fmax(traj.levels.iter().flat_map(|l| l.p.iter().cloned()));
    vec![
        LinfBound {
            field: "c".into(),
            bound: Some(c_bound),
            observed_max: c_max,
            pass: c_max <= c_bound,
        },
        LinfBound {
            field: "theta".into(),
            bound: None,
            observed_max: th_max,
            pass: th_max.is_finite(),
        },
        LinfBound {
            field: "r".into(),
            bound: Some(r_bound),
            observed_max: r_max,
            pass: r_max <= r_bound,
        },
        LinfBound {
            field: "p".into(),
            bound: None,
            observed_max: p_max,
            pass: p_max.is_finite(),
        },
    ]
}

/// `sum_e |e| |grad u_e|^2`.
pub fn gradient_energy(mesh: &Mesh, u: &[f64]) -> f64 {
    mesh.elements()
        .map(|(tri, g)| {
            let mut d = [0.0; 2];
            for a in 1..3 {
                let du = u[tri[a]] - u[tri[0]];
                d[0] += du * g.grads[a][0];
                d[1] += du * g.grads[a][1];
            }
            g.area * (d[0] * d[0] + d[1] * d[1])
        })
        .sum()
}

pub fn check_energy_estimate(traj: &Trajectory, mesh: &Mesh, model: &MaterialModel) -> Result<EnergySeries> {
    require_levels(traj, mesh)?;
    let m = mesh.lumped_mass();
    let stored: Vec<f64> = traj
        .levels
        .par_iter()
        .map(|l| -> Result<f64> {
            let mut s = 0.0;
            for i in 0..l.p.len() {
                s += m[i] * theta_s(model, l.p[i])?;
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let grads: Vec<f64> = traj.levels.par_iter().map(|l| gradient_energy(mesh, &l.p)).collect();
    let mut energy = Vec::with_capacity(stored.len());
    let mut dissipation = Vec::with_capacity(stored.len());
    let mut acc = 0.0;
    for k in 0..stored.len() {
        if k > 0 {
            acc += traj.h * grads[k];
        }
        dissipation.push(acc);
        energy.push(stored[k] + acc);
    }
    let sup = fmax(energy.iter().cloned());
    Ok(EnergySeries {
        energy,
        dissipation,
        sup,
    })
}

fn lumped_pair(m: &[f64], a: impl Iterator<Item = f64>) -> f64 {
    m.iter().zip(a).map(|(mi, v)| mi * v).sum()
}

/// Time translates for one lag `k`, summed over `j = 1..=n-k`.
pub fn translate_row(traj: &Trajectory, mesh: &Mesh, model: &MaterialModel, k: usize) -> Result<TranslateRow> {
    let n = traj.n();
    if k == 0 || k >= n {
        return Err(Error::Diagnostics(format!("translate lag {k} must satisfy 0 < k < n = {n}")));
    }
    let m = mesh.lumped_mass();
    let h = traj.h;
    let sq = |a: &[f64], b: &[f64]| lumped_pair(m, a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)));
    let mut row = TranslateRow {
        lag: k,
        saturation_pairing: 0.0,
        concentration: 0.0,
        temperature: 0.0,
        hydration: 0.0,
        pressure_plain: 0.0,
    };
    for j in 1..=(n - k) {
        let (a, b) = (&traj.levels[j + k], &traj.levels[j]);
        row.saturation_pairing += h * lumped_pair(
            m,
            a.p.iter().zip(&b.p).map(|(x, y)| (model.saturation(*x) - model.saturation(*y)) * (x - y)),
        );
        row.concentration += h * sq(&a.c, &b.c);
        row.temperature += h * sq(&a.theta, &b.theta);
        row.hydration += h * sq(&a.r, &b.r);
        row.pressure_plain += h * sq(&a.p, &b.p);
    }
    Ok(row)
}

pub fn check_translate_estimates(traj: &Trajectory, mesh: &Mesh, model: &MaterialModel, lags: &[usize]) -> Result<TranslateTable> {
    require_levels(traj, mesh)?;
    let mut rows = Vec::new();
    for &k in lags {
        rows.push(translate_row(traj, mesh, model, k)?);
    }
    Ok(finish_translates(traj.h, rows, Vec::new()))
}

fn finish_translates(h: f64, rows: Vec<TranslateRow>, skipped_lags: Vec<usize>) -> TranslateTable {
    let mut max_ratios = [0.0f64; 4];
    for r in &rows {
        let kh = r.lag as f64 * h;
        for (slot, v) in max_ratios.iter_mut().zip([r.saturation_pairing, r.concentration, r.temperature, r.hydration]) {
            *slot = slot.max(v / kh);
        }
    }
    TranslateTable {
        h,
        rows,
        max_ratios,
        skipped_lags,
    }
}

pub fn check_hydration_rate_bound(traj: &Trajectory, model: &MaterialModel, tolerance: f64) -> RateBound {
    let c_f = model.parts().hydration.bound();
    let mut observed_max = 0.0f64;
    for w in traj.levels.windows(2) {
        for (a, b) in w[1].r.iter().zip(&w[0].r) {
            observed_max = observed_max.max((a - b).abs() / traj.h);
        }
    }
    RateBound {
        c_f,
        observed_max,
        pass: observed_max <= c_f * (1.0 + tolerance),
    }
}

/// Temporal test function `(1 - s)^2 s^(m-1)` on `s = t / T`.
fn bump(m: usize, s: f64) -> f64 {
    (1.0 - s) * (1.0 - s) * s.powi(m as i32 - 1)
}

/// `sum_e coef_e |e| grad u_e . grad phi_a`, the stiffness action without a matrix.
fn elliptic_action(mesh: &Mesh, coef: &[f64], u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.num_nodes()];
    for (e, (tri, g)) in mesh.elements().enumerate() {
        let mut d = [0.0; 2];
        for a in 1..3 {
            let du = u[tri[a]] - u[tri[0]];
            d[0] += du * g.grads[a][0];
            d[1] += du * g.grads[a][1];
        }
        for a in 0..3 {
            out[tri[a]] += coef[e] * g.area * (d[0] * g.grads[a][0] + d[1] * g.grads[a][1]);
        }
    }
    out
}

/// Nodal space parts of the three weak forms at one level with all
/// coefficients evaluated at that level: (stored quantity, flux part minus sources).
struct LevelTerms {
    stored: [Vec<f64>; 3],
    flux: [Vec<f64>; 3],
}

fn level_terms(
    mesh: &Mesh,
    model: &MaterialModel,
    kmap: &KirchhoffMap,
    pattern: &Arc<Pattern>,
    l: &StateFields,
    forcing: Option<&dyn Forcing>,
) -> LevelTerms {
    let nodes = mesh.nodes();
    let m = mesh.lumped_mass();
    let n = mesh.num_nodes();
    let mobility = element_mobility(mesh, model, &l.theta, &l.r);
    let u: Vec<f64> = l.p.iter().map(|&v| kmap.lifted(v)).collect();
    let mut fp = elliptic_action(mesh, &mobility, &u);
    let flux = darcy_flux(mesh, kmap, &mobility, &l.p);
    let adv = upwind_advection(mesh, pattern, &flux);
    let diff: Vec<f64> = (0..mesh.num_triangles())
        .map(|e| {
            let x = mesh.geometry(e).centroid;
            let p = mesh.centroid_value(e, &l.p);
            model.porosity(x, mesh.centroid_value(e, &l.r)) * model.saturation(p) * model.diffusivity(x, p)
        })
        .collect();
    let lam: Vec<f64> = (0..mesh.num_triangles())
        .map(|e| {
            let x = mesh.geometry(e).centroid;
            model.conductivity(
                x,
                mesh.centroid_value(e, &l.p),
                mesh.centroid_value(e, &l.theta),
                mesh.centroid_value(e, &l.r),
            )
        })
        .collect();
    let mut fc = elliptic_action(mesh, &diff, &l.c);
    let ac = adv.mul_vec(&l.c);
    let mut ft = elliptic_action(mesh, &lam, &l.theta);
    let at = adv.mul_vec(&l.theta);
    let mut sp = vec![0.0; n];
    let mut sc = vec![0.0; n];
    let mut st = vec![0.0; n];
    for i in 0..n {
        let x = nodes[i];
        let phi_s = model.porosity(x, l.r[i]) * model.saturation(l.p[i]);
        sp[i] = m[i] * phi_s;
        sc[i] = m[i] * phi_s * l.c[i];
        st[i] = m[i] * (phi_s + model.density(x, l.r[i])) * l.theta[i];
        let f = model.hydration(x, l.p[i], l.c[i], l.theta[i], l.r[i]);
        fc[i] += ac[i];
        ft[i] += at[i];
        fp[i] -= m[i] * model.alpha1() * f;
        ft[i] -= m[i] * model.alpha2() * f;
        if let Some(g) = forcing {
            fp[i] -= m[i] * g.pressure(x, l.t);
            fc[i] -= m[i] * g.concentration(x, l.t);
            ft[i] -= m[i] * g.temperature(x, l.t);
        }
    }
    LevelTerms {
        stored: [sp, sc, st],
        flux: [fp, fc, ft],
    }
}

/// Residual of the piecewise-constant interpolants in the space-time weak
/// forms, tested with `phi_i(x) (1 - t/T)^2 (t/T)^(m-1)` over interior nodes
/// `i` and `m = 1..=basis`. Reports the largest magnitude per equation.
pub fn check_weak_residual(
    traj: &Trajectory,
    mesh: &Mesh,
    model: &MaterialModel,
    kmap: &KirchhoffMap,
    basis: usize,
    forcing: Option<&dyn Forcing>,
) -> Result<WeakResiduals> {
    require_levels(traj, mesh)?;
    if basis == 0 {
        return Err(Error::Diagnostics("weak residual needs at least one test function".into()));
    }
    let n = traj.n();
    let (h, tf) = (traj.h, traj.t_final);
    let pattern = Arc::new(Pattern::for_mesh(mesh));
    let terms: Vec<LevelTerms> = traj
        .levels
        .par_iter()
        .map(|l| level_terms(mesh, model, kmap, &pattern, l, forcing))
        .collect();
    let (gx, gw) = gauss_legendre(10);
    let free = mesh.free_nodes();
    let mut worst = [0.0f64; 3];
    for mb in 1..=basis {
        let psi = |t: f64| bump(mb, t / tf);
        // exact integral of psi over each interval
        let integral: Vec<f64> = (1..=n)
            .map(|l| {
                let (a, b) = ((l - 1) as f64 * h, l as f64 * h);
                gx.iter().zip(&gw).map(|(x, w)| 0.5 * (b - a) * w * psi(0.5 * (a + b) + 0.5 * (b - a) * x)).sum()
            })
            .collect();
        for eq in 0..3 {
            for &i in &free {
                let mut res = -terms[0].stored[eq][i] * psi(0.0);
                for l in 1..=n {
                    let jump = psi(l as f64 * h) - psi((l - 1) as f64 * h);
                    res -= terms[l].stored[eq][i] * jump;
                    res += terms[l].flux[eq][i] * integral[l - 1];
                }
                worst[eq] = worst[eq].max(res.abs());
            }
        }
    }
    // the memory identity, recomputed from the stored levels
    let nodes = mesh.nodes();
    let mut memory = 0.0f64;
    let mut acc = traj.levels[0].r.clone();
    for l in 1..=n {
        let (prev, cur) = (&traj.levels[l - 1], &traj.levels[l]);
        for i in 0..acc.len() {
            acc[i] += h * model.hydration(nodes[i], cur.p[i], prev.c[i], prev.theta[i], prev.r[i]);
            memory = memory.max((cur.r[i] - acc[i]).abs());
        }
    }
    Ok(WeakResiduals {
        basis_size: basis,
        pressure: worst[0],
        concentration: worst[1],
        temperature: worst[2],
        memory,
    })
}

/// All checks on one trajectory.
pub fn build_report(
    traj: &Trajectory,
    mesh: &Mesh,
    model: &MaterialModel,
    kmap: &KirchhoffMap,
    ell: f64,
    cfg: &DiagnosticsConfig,
    forcing: Option<&dyn Forcing>,
) -> Result<DiagnosticsReport> {
    require_levels(traj, mesh)?;
    let n = traj.n();
    let (ok, skipped): (Vec<usize>, Vec<usize>) = cfg.lags.iter().partition(|&&k| k > 0 && k < n);
    let mut rows = Vec::new();
    for &k in &ok {
        rows.push(translate_row(traj, mesh, model, k)?);
    }
    Ok(DiagnosticsReport {
        levels: traj.levels.len(),
        h: traj.h,
        max_principle: check_max_principle(traj, ell),
        linf_bounds: check_linf_bounds(traj, model, cfg),
        energy: check_energy_estimate(traj, mesh, model)?,
        translates: finish_translates(traj.h, rows, skipped),
        weak_residuals: check_weak_residual(traj, mesh, model, kmap, cfg.weak_basis, forcing)?,
        hydration_rate: check_hydration_rate_bound(traj, model, cfg.rate_tolerance),
    })
}

impl DiagnosticsReport {
    /// The hard invariants: floor, L-infinity bounds and hydration rate.
    pub fn verdicts(&self) -> Vec<(String, bool, String)> {
        let mut out = Vec::new();
        let mp = &self.max_principle;
        let ell = mp.theoretical_ell.map_or("none".to_string(), |v| format!("{v:.6e}"));
        out.push(("max_principle".into(), mp.pass, format!("min p = {:.6e}, ell = {ell}", mp.observed_min)));
        for b in &self.linf_bounds {
            let bound = b.bound.map_or("none".to_string(), |v| format!("{v:.6e}"));
            out.push((format!("linf_{}", b.field), b.pass, format!("max = {:.6e}, bound = {bound}", b.observed_max)));
        }
        let hr = &self.hydration_rate;
        out.push(("hydration_rate".into(), hr.pass, format!("max = {:.6e}, C_f = {:.6e}", hr.observed_max, hr.c_f)));
        out
    }

    pub fn all_pass(&self) -> bool {
        self.verdicts().iter().all(|v| v.1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Diagnostics(format!("unreadable report: {e}")))
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "levels {}  h {:.6e}", self.levels, self.h);
        let _ = writeln!(s, "{:<16} {:<6} detail", "check", "result");
        for (name, pass, detail) in self.verdicts() {
            let _ = writeln!(s, "{:<16} {:<6} {detail}", name, if pass { "PASS" } else { "FAIL" });
        }
        let _ = writeln!(s, "energy sup {:.6e}  final dissipation {:.6e}", self.energy.sup, self.energy.dissipation.last().unwrap_or(&0.0));
        let _ = writeln!(s, "{:>4} {:>14} {:>14} {:>14} {:>14} {:>14}", "lag", "S-pairing", "c", "theta", "r", "p (plain)");
        for r in &self.translates.rows {
            let _ = writeln!(
                s,
                "{:>4} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}",
                r.lag, r.saturation_pairing, r.concentration, r.temperature, r.hydration, r.pressure_plain
            );
        }
        let q = &self.translates.max_ratios;
        let _ = writeln!(s, "max T/(kh): {:.6e} {:.6e} {:.6e} {:.6e}", q[0], q[1], q[2], q[3]);
        let w = &self.weak_residuals;
        let _ = writeln!(
            s,
            "weak residuals ({} bumps): p {:.6e}  c {:.6e}  theta {:.6e}  memory {:.3e}",
            w.basis_size, w.pressure, w.concentration, w.temperature, w.memory
        );
        s
    }
}

/// Relative growth of the finer run's bounded quantities over the coarser
/// run's: energy sup and the three L-infinity maxima.
pub fn refinement_growth(coarse: &DiagnosticsReport, fine: &DiagnosticsReport) -> Vec<(String, f64)> {
    let rel = |a: f64, b: f64| if a.abs() > 0.0 { (b - a) / a.abs() } else if b == 0.0 { 0.0 } else { f64::INFINITY };
    let mut out = vec![("energy_sup".to_string(), rel(coarse.energy.sup, fine.energy.sup))];
    for (a, b) in coarse.linf_bounds.iter().zip(&fine.linf_bounds) {
        out.push((format!("linf_{}", a.field), rel(a.observed_max, b.observed_max)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kirchhoff::build_kirchhoff_map;
    use crate::material::*;
    use crate::mesh::{build_structured_mesh, BoundaryTag, SideTags};
    use crate::stepper::{run, SchemeConfig};

    fn stationary(mesh: &Mesh, n: usize, h: f64) -> Trajectory {
        let levels = (0..=n)
            .map(|l| {
                let mut s = StateFields::zeros(mesh.num_nodes());
                s.level = l;
                s.t = l as f64 * h;
                s
            })
            .collect();
        Trajectory {
            h,
            t_final: n as f64 * h,
            halvings: 0,
            levels,
            stats: Vec::new(),
        }
    }

    fn no_hydration() -> MaterialModel {
        let mut cfg = MaterialConfig::default();
        cfg.hydration = HydrationConfig::Constant { value: 0.0 };
        cfg.build().unwrap()
    }

    #[test]
    fn zero_trajectory_is_clean() {
        let mesh = build_structured_mesh(4, 4, 1.0, 1.0, SideTags::dirichlet_left()).unwrap();
        let model = no_hydration();
        let kmap = build_kirchhoff_map(&model, -50.0).unwrap();
        let traj = stationary(&mesh, 10, 0.1);
        let rep = build_report(&traj, &mesh, &model, &kmap, -3.0, &DiagnosticsConfig::default(), None).unwrap();
        assert_eq!(rep.max_principle.observed_min, 0.0);
        assert!(rep.all_pass());
        assert!(rep.energy.energy.iter().all(|&e| e == 0.0));
        assert!(rep.translates.rows.iter().all(|r| r.saturation_pairing == 0.0 && r.hydration == 0.0));
        // the stored water phi S(0) telescopes against psi(T) = 0 up to rounding
        assert!(rep.weak_residuals.pressure < 1e-16);
        assert_eq!(rep.weak_residuals.concentration, 0.0);
        assert_eq!(rep.weak_residuals.temperature, 0.0);
        assert_eq!(rep.hydration_rate.observed_max, 0.0);
        let unbounded = check_max_principle(&traj, f64::NEG_INFINITY);
        assert!(unbounded.pass && unbounded.theoretical_ell.is_none());
        assert_eq!(unbounded.note, "no theoretical bound");
    }

    #[test]
    fn report_round_trips_through_json() {
        let mesh = build_structured_mesh(3, 3, 1.0, 1.0, SideTags::dirichlet_left()).unwrap();
        let model = no_hydration();
        let kmap = build_kirchhoff_map(&model, -50.0).unwrap();
        let traj = stationary(&mesh, 4, 0.25);
        let rep = build_report(&traj, &mesh, &model, &kmap, f64::NEG_INFINITY, &DiagnosticsConfig::default(), None).unwrap();
        assert_eq!(rep.translates.skipped_lags, vec![4, 8]);
        let back = DiagnosticsReport::from_json(&rep.to_json()).unwrap();
        assert_eq!(back.to_json(), rep.to_json());
        assert!(rep.to_table().contains("max_principle"));
    }

    #[test]
    fn single_term_translate_by_hand() {
        let mesh = build_structured_mesh(2, 2, 1.0, 1.0, SideTags::dirichlet_left()).unwrap();
        let model = no_hydration();
        let mut traj = stationary(&mesh, 2, 0.5);
        for (i, v) in traj.levels[2].p.iter_mut().enumerate() {
            *v = -0.1 * i as f64;
        }
        traj.levels[2].c = vec![0.3; 9];
        traj.levels[1].c = vec![0.1; 9];
        let row = translate_row(&traj, &mesh, &model, 1).unwrap();
        let m = mesh.lumped_mass();
        let mut pair = 0.0;
        for i in 0..9 {
            let p = -0.1 * i as f64;
            pair += m[i] * (model.saturation(p) - model.saturation(0.0)) * p;
        }
        assert!((row.saturation_pairing - 0.5 * pair).abs() < 1e-15);
        assert!((row.concentration - 0.5 * 0.04).abs() < 1e-15);
        assert!(matches!(translate_row(&traj, &mesh, &model, 2), Err(Error::Diagnostics(_))));
    }

    #[test]
    fn one_step_energy_by_hand() {
        let mesh = build_structured_mesh(1, 1, 1.0, 1.0, SideTags::dirichlet_left()).unwrap();
        let model = no_hydration();
        let mut traj = stationary(&mesh, 1, 0.5);
        traj.levels[0].p = vec![0.0, -1.0, -2.0, 0.0];
        traj.levels[1].p = vec![0.0, -0.5, -1.0, 0.0];
        let e = check_energy_estimate(&traj, &mesh, &model).unwrap();
        let m = mesh.lumped_mass();
        let th = |p: f64| theta_s(&model, p).unwrap();
        // structured 1x1 mesh: two right triangles of area 1/2
        let mut grad2 = 0.0;
        for (tri, g) in mesh.elements() {
            let mut d = [0.0; 2];
            for a in 0..3 {
                d[0] += traj.levels[1].p[tri[a]] * g.grads[a][0];
                d[1] += traj.levels[1].p[tri[a]] * g.grads[a][1];
            }
            grad2 += g.area * (d[0] * d[0] + d[1] * d[1]);
        }
        let e0 = m[1] * th(-1.0) + m[2] * th(-2.0);
        let e1 = m[1] * th(-0.5) + m[2] * th(-1.0) + 0.5 * grad2;
        assert!((e.energy[0] - e0).abs() < 1e-14);
        assert!((e.energy[1] - e1).abs() < 1e-14);
    }

    #[test]
    fn relaxation_run_diagnostics() {
        let mesh = build_structured_mesh(4, 4, 1.0, 1.0, SideTags::dirichlet_left()).unwrap();
        let model = no_hydration();
        let kmap = build_kirchhoff_map(&model, -50.0).unwrap();
        let n = mesh.num_nodes();
        let mut p0 = vec![0.0; n];
        for i in mesh.free_nodes() {
            p0[i] = -1.0;
        }
        let init = InitialData {
            p0,
            c0: vec![0.0; n],
            theta0: vec![0.0; n],
            p1: -2.0,
        };
        let cfg = SchemeConfig {
            t_final: 0.5,
            n: 10,
            ..SchemeConfig::default()
        };
        let traj = run(&mesh, &model, &kmap, &init, &cfg).unwrap();
        let mp = check_max_principle(&traj, -1.5);
        assert!(mp.observed_min >= -1.0 && mp.pass);
        let e = check_energy_estimate(&traj, &mesh, &model).unwrap();
        for w in e.dissipation.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let rate = check_hydration_rate_bound(&traj, &model, 1e-12);
        assert_eq!(rate.observed_max, 0.0);
        let w = check_weak_residual(&traj, &mesh, &model, &kmap, 4, None).unwrap();
        assert_eq!(w.memory, 0.0);
    }

    #[test]
    fn constant_rate_is_the_equality_case() {
        let mut cfg = MaterialConfig::default();
        cfg.hydration = HydrationConfig::Constant { value: 0.7 };
        cfg.porosity = RampLaw::constant(0.25);
        let model = cfg.build().unwrap();
        let mesh = build_structured_mesh(3, 3, 1.0, 1.0, SideTags::all(BoundaryTag::Dirichlet)).unwrap();
        let mut traj = stationary(&mesh, 4, 0.25);
        for l in 0..=4 {
            traj.levels[l].r = vec![0.7 * 0.25 * l as f64; mesh.num_nodes()];
        }
        let rate = check_hydration_rate_bound(&traj, &model, 1e-12);
        assert!((rate.observed_max - 0.7).abs() < 1e-14 && rate.pass);
        let kmap = build_kirchhoff_map(&model, -50.0).unwrap();
        let w = check_weak_residual(&traj, &mesh, &model, &kmap, 2, None).unwrap();
        assert!(w.memory < 1e-15);
    }
}
