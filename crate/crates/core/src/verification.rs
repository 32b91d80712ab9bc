//! Independent oracles: manufactured solutions, a brute-force single step on
//! tiny meshes, and the convergence study driver.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::discretization::{Forcing, StateFields};
use crate::error::{Error, Result};
use crate::kirchhoff::{build_kirchhoff_map, KirchhoffMap};
use crate::linalg::dense_solve;
use crate::material::{
    CouplingConfig, ExponentialViscosity, HydrationConfig, InitialData, MaterialConfig, MaterialModel, MoistureConductivity, RampLaw,
    RelativePermeabilityConfig, SaturationConfig, SuctionDiffusivity,
};
use crate::mesh::{build_structured_mesh, BoundaryTag, Mesh, Point, SideTags};
use crate::stepper::{SchemeConfig, Stepper, Trajectory};

/// Constants of the manufactured problems. The laws are fixed: logistic
/// saturation `S = 1/(1+e^-p)`, `k_R = 0.2 + s`, constant `k/mu`, porosity
/// `phi0 + phi_slope r`, and constant `rho`, `D_w`, `lambda`, `f = F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManufacturedParams {
    pub amp_p: f64,
    pub amp_c: f64,
    pub amp_theta: f64,
    pub rate: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub phi0: f64,
    pub phi_slope: f64,
    pub density: f64,
    pub diffusivity: f64,
    pub conductivity: f64,
    /// Intrinsic permeability over viscosity.
    pub mobility: f64,
    pub t_final: f64,
}

impl Default for ManufacturedParams {
    fn default() -> Self {
        ManufacturedParams {
            amp_p: 0.25,
            amp_c: 0.5,
            amp_theta: 1.0,
            rate: 0.5,
            alpha1: 0.3,
            alpha2: 2.0,
            phi0: 0.2,
            phi_slope: 0.1,
            density: 2.0,
            diffusivity: 0.2,
            conductivity: 0.2,
            mobility: 0.01,
            t_final: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManufacturedKind {
    /// `p = -A_p X e^{-2t}`, `c = A_c X e^{-2t}`, `theta = A_t X e^{-2t}`
    /// with `X = sin(pi x) sin(pi y)`.
    Smooth,
    /// All three fields identically zero; the sources balance the hydration.
    Constant,
}

/// Floors the nondegenerate case must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub min_saturation_derivative: f64,
    pub min_relative_permeability: f64,
    pub min_diffusivity: f64,
    pub min_conductivity: f64,
    pub floor: f64,
}

impl Certificate {
    pub fn holds(&self) -> bool {
        [
            self.min_saturation_derivative,
            self.min_relative_permeability,
            self.min_diffusivity,
            self.min_conductivity,
        ]
        .iter()
        .all(|&v| v >= self.floor)
    }
}

#[derive(Debug, Clone)]
pub struct ManufacturedCase {
    pub kind: ManufacturedKind,
    pub params: ManufacturedParams,
    pub model: MaterialModel,
}

fn logistic(p: f64) -> f64 {
    1.0 / (1.0 + (-p).exp())
}

impl ManufacturedCase {
    pub fn new(kind: ManufacturedKind, params: ManufacturedParams) -> Result<Self> {
        let model = Self::material(&params).build()?;
        Ok(ManufacturedCase { kind, params, model })
    }

    pub fn smooth() -> Self {
        Self::new(ManufacturedKind::Smooth, ManufacturedParams::default()).expect("default manufactured case builds")
    }

    pub fn constant() -> Self {
        Self::new(ManufacturedKind::Constant, ManufacturedParams::default()).expect("default manufactured case builds")
    }

    pub fn material(k: &ManufacturedParams) -> MaterialConfig {
        MaterialConfig {
            saturation: SaturationConfig::Logistic { s_sat: 1.0, scale: 1.0 },
            relative_permeability: RelativePermeabilityConfig::Linear {
                intercept: 0.2,
                slope: 1.0,
            },
            permeability: RampLaw::constant(k.mobility),
            viscosity: ExponentialViscosity {
                reference: 1.0,
                sensitivity: 0.0,
                reference_temperature: 0.0,
                min: 0.5,
                max: 2.0,
            },
            porosity: RampLaw {
                initial: k.phi0,
                r#final: k.phi0 + k.phi_slope,
                r_scale: 1.0,
            },
            density: RampLaw::constant(k.density),
            diffusivity: SuctionDiffusivity {
                floor: k.diffusivity,
                base: 0.0,
                sensitivity: 0.0,
            },
            conductivity: MoistureConductivity {
                dry: k.conductivity,
                wet: k.conductivity,
                sensitivity: 0.0,
            },
            hydration: HydrationConfig::Constant { value: k.rate },
            coupling: CouplingConfig {
                alpha1: k.alpha1,
                alpha2: k.alpha2,
            },
        }
    }

    /// The unit square with every side pinned.
    pub fn mesh(&self, n: usize) -> Result<Mesh> {
        build_structured_mesh(n, n, 1.0, 1.0, SideTags::all(BoundaryTag::Dirichlet))
    }

    fn amplitudes(&self) -> (f64, f64, f64) {
        match self.kind {
            ManufacturedKind::Smooth => (self.params.amp_p, self.params.amp_c, self.params.amp_theta),
            ManufacturedKind::Constant => (0.0, 0.0, 0.0),
        }
    }

    /// Exact `[p, c, theta, r]` at `(x, t)`.
    pub fn exact(&self, x: Point, t: f64) -> [f64; 4] {
        let (ap, ac, at) = self.amplitudes();
        let b = (PI * x[0]).sin() * (PI * x[1]).sin() * (-2.0 * t).exp();
        [-ap * b, ac * b, at * b, self.params.rate * t]
    }

    /// The porosity ramp must stay linear over the run.
    fn check_ramp(&self) -> Result<()> {
        if self.params.rate * self.params.t_final >= 1.0 {
            return Err(Error::config("manufactured.rate", "rate * t_final must stay below the porosity ramp scale 1"));
        }
        Ok(())
    }

    /// Induced sources `[g_p, g_c, g_theta]`, hand-expanded from the strong
    /// form (see docs/manufactured_sources.py for the symbolic derivation).
    pub fn sources(&self, x: Point, t: f64) -> [f64; 3] {
        let k = &self.params;
        let (ap, ac, at) = self.amplitudes();
        let e = (-2.0 * t).exp();
        let (sx, cx, sy, cy) = ((PI * x[0]).sin(), (PI * x[0]).cos(), (PI * x[1]).sin(), (PI * x[1]).cos());
        let xx = sx * sy;
        let grad_x = [PI * cx * sy, PI * sx * cy];
        let g2 = grad_x[0] * grad_x[0] + grad_x[1] * grad_x[1];
        let lap_x = -2.0 * PI * PI * xx;

        let p = -ap * xx * e;
        let p_t = -2.0 * p;
        let lap_p = -ap * e * lap_x;
        let c = ac * xx * e;
        let c_t = -2.0 * c;
        let lap_c = ac * e * lap_x;
        let th = at * xx * e;
        let th_t = -2.0 * th;
        let lap_th = at * e * lap_x;
        // gradients are multiples of grad X
        let gp_gc = -ap * ac * e * e * g2;
        let gp_gt = -ap * at * e * e * g2;
        let gp2 = ap * ap * e * e * g2;

        let r = k.rate * t;
        let phi = k.phi0 + k.phi_slope * r;
        let s = logistic(p);
        let ds = s * (1.0 - s);
        let a = k.mobility * (0.2 + s);
        let da = k.mobility * ds;
        let div_flux = da * gp2 + a * lap_p;
        let d_water = k.phi_slope * k.rate * s + phi * ds * p_t;

        let g_p = d_water - div_flux - k.alpha1 * k.rate;
        let g_c = d_water * c + phi * s * c_t - phi * k.diffusivity * (ds * gp_gc + s * lap_c) - (a * gp_gc + c * div_flux);
        let g_t = d_water * th + (phi * s + k.density) * th_t - k.conductivity * lap_th - (a * gp_gt + th * div_flux) - k.alpha2 * k.rate;
        [g_p, g_c, g_t]
    }

    pub fn initial_data(&self, mesh: &Mesh) -> InitialData {
        let f = |i: usize| if mesh.is_dirichlet(i) { [0.0; 4] } else { self.exact(mesh.nodes()[i], 0.0) };
        let n = mesh.num_nodes();
        InitialData {
            p0: (0..n).map(|i| f(i)[0]).collect(),
            c0: (0..n).map(|i| f(i)[1]).collect(),
            theta0: (0..n).map(|i| f(i)[2]).collect(),
            p1: -2.0 * self.params.amp_p - 1.0,
        }
    }

    /// Samples the coefficients over the range of the exact pressure.
    pub fn certificate(&self, floor: f64) -> Certificate {
        let (ap, _, _) = self.amplitudes();
        let x = [0.5, 0.5];
        let mut cert = Certificate {
            min_saturation_derivative: f64::INFINITY,
            min_relative_permeability: f64::INFINITY,
            min_diffusivity: f64::INFINITY,
            min_conductivity: f64::INFINITY,
            floor,
        };
        for j in 0..=200 {
            let p = -ap * j as f64 / 200.0;
            let m = &self.model;
            cert.min_saturation_derivative = cert.min_saturation_derivative.min(m.saturation_derivative(p));
            cert.min_relative_permeability = cert.min_relative_permeability.min(m.relative_permeability(m.saturation(p)));
            cert.min_diffusivity = cert.min_diffusivity.min(m.diffusivity(x, p));
            cert.min_conductivity = cert.min_conductivity.min(m.conductivity(x, p, 0.0, 0.0));
        }
        cert
    }

    pub fn kirchhoff_map(&self) -> Result<KirchhoffMap> {
        build_kirchhoff_map(&self.model, -50.0)
    }

    /// Final-time lumped L2 errors `[p, c, theta, r]`.
    pub fn errors(&self, mesh: &Mesh, state: &StateFields) -> [f64; 4] {
        let m = mesh.lumped_mass();
        let mut out = [0.0; 4];
        for i in 0..mesh.num_nodes() {
            let ex = self.exact(mesh.nodes()[i], state.t);
            let got = [state.p[i], state.c[i], state.theta[i], state.r[i]];
            for k in 0..4 {
                out[k] += m[i] * (got[k] - ex[k]) * (got[k] - ex[k]);
            }
        }
        out.map(f64::sqrt)
    }

    pub fn simulate(&self, mesh: &Mesh, kmap: &KirchhoffMap, n: usize, scheme: &SchemeConfig) -> Result<Trajectory> {
        self.check_ramp()?;
        let cert = self.certificate(0.1);
        if !cert.holds() {
            return Err(Error::Material(format!("manufactured case is degenerate: {cert:?}")));
        }
        let cfg = SchemeConfig {
            t_final: self.params.t_final,
            n,
            ..scheme.clone()
        };
        let stepper = Stepper::new(mesh, &self.model, kmap, &cfg).with_forcing(self);
        Ok(stepper.run(&self.initial_data(mesh))?)
    }
}

impl Forcing for ManufacturedCase {
    fn pressure(&self, x: Point, t: f64) -> f64 {
        self.sources(x, t)[0]
    }
    fn concentration(&self, x: Point, t: f64) -> f64 {
        self.sources(x, t)[1]
    }
    fn temperature(&self, x: Point, t: f64) -> f64 {
        self.sources(x, t)[2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub mesh: usize,
    pub n: usize,
    pub h: f64,
    pub errors: [f64; 4],
    pub weak_residuals: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// `log2(e_n / e_2n)` between successive `n` on the finest mesh, per field.
    pub temporal_orders: Vec<(usize, [f64; 4])>,
    /// `e_coarse / e_fine` between successive meshes at the largest `n`.
    pub spatial_ratios: Vec<(usize, [f64; 4])>,
}

pub const CONVERGENCE_HEADER: &str = "mesh,n,h,err_p,err_c,err_theta,err_r,weak_p,weak_c,weak_theta";

impl ConvergenceTable {
    /// Comma-separated rows under [`CONVERGENCE_HEADER`], then the orders as comment lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CONVERGENCE_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{:e}", r.mesh, r.n, r.h);
            for v in r.errors.iter().chain(&r.weak_residuals) {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        for (n, o) in &self.temporal_orders {
            let _ = writeln!(s, "# temporal order {n}->{}: {:.4} {:.4} {:.4} {:.4}", 2 * n, o[0], o[1], o[2], o[3]);
        }
        for (m, q) in &self.spatial_ratios {
            let _ = writeln!(s, "# spatial ratio mesh {m}: {:.4} {:.4} {:.4} {:.4}", q[0], q[1], q[2], q[3]);
        }
        s
    }

    /// Smallest order over the fields that are not at rounding level, on the finest pair.
    pub fn finest_order(&self) -> Option<f64> {
        let (_, o) = self.temporal_orders.last()?;
        let n_max = self.rows.iter().map(|r| r.n).max()?;
        let last = self.rows.iter().rfind(|r| r.n == n_max)?;
        let mut worst = f64::INFINITY;
        for k in 0..4 {
            if last.errors[k] > 1e-12 {
                worst = worst.min(o[k]);
            }
        }
        Some(worst)
    }

    pub fn max_error(&self) -> f64 {
        self.rows.iter().flat_map(|r| r.errors).fold(0.0, f64::max)
    }
}

/// Runs every `(mesh, n)` pair and measures orders. `n` values should double.
pub fn run_convergence_study(case: &ManufacturedCase, meshes: &[usize], ns: &[usize], scheme: &SchemeConfig) -> Result<ConvergenceTable> {
    if meshes.is_empty() || ns.is_empty() {
        return Err(Error::config("convergence", "need at least one mesh and one step count"));
    }
    let kmap = case.kirchhoff_map()?;
    let mut rows = Vec::new();
    for &nx in meshes {
        let mesh = case.mesh(nx)?;
        for &n in ns {
            let traj = case.simulate(&mesh, &kmap, n, scheme).map_err(|e| match e {
                Error::NewtonFailure { level, reason, residual_history } => Error::NewtonFailure {
                    level,
                    reason: format!("mesh {nx}, n {n}: {reason}"),
                    residual_history,
                },
                other => other,
            })?;
            let last = traj.levels.last().expect("run has levels");
            let w = crate::diagnostics::check_weak_residual(&traj, &mesh, &case.model, &kmap, 16, Some(case))?;
            rows.push(ConvergenceRow {
                mesh: nx,
                n,
                h: traj.h,
                errors: case.errors(&mesh, last),
                weak_residuals: [w.pressure, w.concentration, w.temperature],
            });
        }
    }
    let order = |a: &[f64; 4], b: &[f64; 4]| {
        let mut o = [0.0; 4];
        for k in 0..4 {
            o[k] = (a[k] / b[k]).log2();
        }
        o
    };
    let finest = *meshes.last().unwrap();
    let fine_rows: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.mesh == finest).collect();
    let temporal_orders = fine_rows.windows(2).map(|w| (w[0].n, order(&w[0].errors, &w[1].errors))).collect();
    let nmax = *ns.last().unwrap();
    let big: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.n == nmax).collect();
    let spatial_ratios = big
        .windows(2)
        .map(|w| {
            let mut q = [0.0; 4];
            for k in 0..4 {
                q[k] = w[0].errors[k] / w[1].errors[k];
            }
            (w[0].mesh, q)
        })
        .collect();
    Ok(ConvergenceTable {
        rows,
        temporal_orders,
        spatial_ratios,
    })
}

/// Dense reference implementation of one level on meshes with at most two
/// free nodes: nested bisection for the pressure, Gaussian elimination for
/// the transport systems. Shares no assembly code with the scheme.
pub struct BruteForce<'a> {
    mesh: &'a Mesh,
    model: &'a MaterialModel,
    kmap: &'a KirchhoffMap,
    /// Outermost bracket for the pressure bisection.
    pub bounds: (f64, f64),
}

struct DenseElement {
    nodes: [usize; 3],
    area: f64,
    grads: [[f64; 2]; 3],
    centroid: Point,
}

impl<'a> BruteForce<'a> {
    pub fn new(mesh: &'a Mesh, model: &'a MaterialModel, kmap: &'a KirchhoffMap) -> Result<Self> {
        let free = mesh.free_nodes().len();
        if free > 2 {
            return Err(Error::config("mesh", format!("brute force handles at most 2 free nodes, mesh has {free}")));
        }
        Ok(BruteForce {
            mesh,
            model,
            kmap,
            bounds: (kmap.ell().max(-1e3), 1e3),
        })
    }

    fn elements(&self) -> Vec<DenseElement> {
        // recompute geometry from coordinates
        let x = self.mesh.nodes();
        self.mesh
            .triangles()
            .iter()
            .map(|&t| {
                let [a, b, c] = t.map(|i| x[i]);
                let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
                let grads = [
                    [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
                    [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
                    [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
                ];
                DenseElement {
                    nodes: t,
                    area: 0.5 * det.abs(),
                    grads,
                    centroid: [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0],
                }
            })
            .collect()
    }

    fn mass(&self, els: &[DenseElement]) -> Vec<f64> {
        let mut m = vec![0.0; self.mesh.num_nodes()];
        for e in els {
            for &i in &e.nodes {
                m[i] += e.area / 3.0;
            }
        }
        m
    }

    fn dense_stiffness(&self, els: &[DenseElement], coef: impl Fn(&DenseElement) -> f64) -> Vec<Vec<f64>> {
        let n = self.mesh.num_nodes();
        let mut k = vec![vec![0.0; n]; n];
        for e in els {
            let c = coef(e);
            for a in 0..3 {
                for b in 0..3 {
                    k[e.nodes[a]][e.nodes[b]] += c * e.area * (e.grads[a][0] * e.grads[b][0] + e.grads[a][1] * e.grads[b][1]);
                }
            }
        }
        k
    }

    fn avg(e: &DenseElement, v: &[f64]) -> f64 {
        (v[e.nodes[0]] + v[e.nodes[1]] + v[e.nodes[2]]) / 3.0
    }

    /// Residual of the pressure equation at the free nodes.
    fn pressure_residual(&self, els: &[DenseElement], m: &[f64], k: &[Vec<f64>], prev: &StateFields, h: f64, p: &[f64]) -> Vec<f64> {
        let model = self.model;
        let x = self.mesh.nodes();
        let beta: Vec<f64> = p.iter().map(|&v| self.kmap.beta(v)).collect();
        let _ = els;
        self.mesh
            .free_nodes()
            .iter()
            .map(|&i| {
                let f = model.hydration(x[i], p[i], prev.c[i], prev.theta[i], prev.r[i]);
                let r_hat = prev.r[i] + h * f;
                let store = model.porosity(x[i], r_hat) * model.saturation(p[i]) - model.porosity(x[i], prev.r[i]) * model.saturation(prev.p[i]);
                let flux: f64 = (0..p.len()).map(|j| k[i][j] * beta[j]).sum();
                m[i] * store / h + flux - m[i] * model.alpha1() * f
            })
            .collect()
    }

    fn bisect(mut g: impl FnMut(f64) -> f64, lo0: f64, hi0: f64) -> Result<f64> {
        let (mut lo, mut hi) = (lo0, hi0);
        let (glo, ghi) = (g(lo), g(hi));
        if !(glo <= 0.0 && ghi >= 0.0) {
            return Err(Error::Kirchhoff(format!("bisection bracket [{lo}, {hi}] does not enclose a root ({glo:e}, {ghi:e})")));
        }
        if glo == 0.0 {
            return Ok(lo);
        }
        if ghi == 0.0 {
            return Ok(hi);
        }
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let gm = g(mid);
            if gm == 0.0 {
                return Ok(mid);
            }
            if gm > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let (a, b) = (g(lo).abs(), g(hi).abs());
        Ok(if a <= b { lo } else { hi })
    }

    /// Bisection on a bracket that grows outward from the previous pressure
    /// until it encloses the root or reaches `bounds`.
    fn bracketed(&self, g: &mut dyn FnMut(f64) -> f64, guess: f64) -> Result<f64> {
        let (min, max) = self.bounds;
        let mut width = 1.0;
        loop {
            let lo = (guess - width).max(min);
            let hi = (guess + width).min(max);
            let (glo, ghi) = (g(lo), g(hi));
            if glo <= 0.0 && ghi >= 0.0 {
                return Self::bisect(&mut *g, lo, hi);
            }
            if lo <= min && hi >= max {
                return Err(Error::Kirchhoff(format!("no sign change of the pressure residual inside [{min}, {max}]")));
            }
            width *= 4.0;
        }
    }

    pub fn pressure(&self, prev: &StateFields, h: f64) -> Result<Vec<f64>> {
        let els = self.elements();
        let m = self.mass(&els);
        let k = self.dense_stiffness(&els, |e| {
            self.model.permeability(e.centroid, Self::avg(e, &prev.r)) / self.model.viscosity(Self::avg(e, &prev.theta))
        });
        let free = self.mesh.free_nodes();
        let mut p = vec![0.0; self.mesh.num_nodes()];
        match free.len() {
            0 => {}
            1 => {
                let i = free[0];
                let mut g = |v: f64| {
                    let mut q = p.clone();
                    q[i] = v;
                    self.pressure_residual(&els, &m, &k, prev, h, &q)[0]
                };
                p[i] = self.bracketed(&mut g, prev.p[i])?;
            }
            _ => {
                let (a, b) = (free[0], free[1]);
                // inner solve for p_b given p_a, outer bisection on p_a
                let inner = |va: f64| -> Result<f64> {
                    let mut g = |vb: f64| {
                        let mut q = vec![0.0; self.mesh.num_nodes()];
                        q[a] = va;
                        q[b] = vb;
                        self.pressure_residual(&els, &m, &k, prev, h, &q)[1]
                    };
                    self.bracketed(&mut g, prev.p[b])
                };
                let mut failure = None;
                let mut g = |va: f64| match inner(va) {
                    Ok(vb) => {
                        let mut q = vec![0.0; self.mesh.num_nodes()];
                        q[a] = va;
                        q[b] = vb;
                        self.pressure_residual(&els, &m, &k, prev, h, &q)[0]
                    }
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                };
                let va = self.bracketed(&mut g, prev.p[a]);
                if let Some(e) = failure {
                    return Err(e);
                }
                let va = va?;
                p[a] = va;
                p[b] = inner(va)?;
            }
        }
        Ok(p)
    }

    /// Advection-diffusion system `(diag(mass) + K + C_upwind) v = rhs` on the free nodes.
    fn transport(&self, els: &[DenseElement], diag: &[f64], coef: impl Fn(&DenseElement) -> f64, q: &[[f64; 2]], rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.mesh.num_nodes();
        let mut a = self.dense_stiffness(els, coef);
        let mut c = vec![vec![0.0; n]; n];
        for (e, qe) in els.iter().zip(q) {
            for l in 0..3 {
                let v = -(e.area / 3.0) * (qe[0] * e.grads[l][0] + qe[1] * e.grads[l][1]);
                for s in 0..3 {
                    c[e.nodes[l]][e.nodes[s]] += v;
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                a[i][j] += c[i][j];
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let d = c[i][j].max(c[j][i]).max(0.0);
                a[i][j] -= d;
                a[j][i] -= d;
                a[i][i] += d;
                a[j][j] += d;
            }
        }
        let free = self.mesh.free_nodes();
        let red: Vec<Vec<f64>> = free
            .iter()
            .map(|&i| free.iter().map(|&j| a[i][j] + if i == j { diag[i] } else { 0.0 }).collect())
            .collect();
        let b: Vec<f64> = free.iter().map(|&i| rhs[i]).collect();
        let sol = if free.is_empty() { Vec::new() } else { dense_solve(red, b)? };
        let mut out = vec![0.0; n];
        for (k, &i) in free.iter().enumerate() {
            out[i] = sol[k];
        }
        Ok(out)
    }

    /// One full level.
    pub fn step(&self, prev: &StateFields, h: f64) -> Result<StateFields> {
        let model = self.model;
        let x = self.mesh.nodes();
        let n = self.mesh.num_nodes();
        let p = self.pressure(prev, h)?;
        let r: Vec<f64> = (0..n)
            .map(|i| prev.r[i] + h * model.hydration(x[i], p[i], prev.c[i], prev.theta[i], prev.r[i]))
            .collect();
        let els = self.elements();
        let m = self.mass(&els);
        let q: Vec<[f64; 2]> = els
            .iter()
            .map(|e| {
                let a = model.permeability(e.centroid, Self::avg(e, &prev.r)) / model.viscosity(Self::avg(e, &prev.theta));
                let mut g = [0.0; 2];
                for l in 0..3 {
                    let u = self.kmap.beta(p[e.nodes[l]]);
                    g[0] += u * e.grads[l][0];
                    g[1] += u * e.grads[l][1];
                }
                [-a * g[0], -a * g[1]]
            })
            .collect();
        let phi_s = |i: usize, rr: f64, pp: f64| model.porosity(x[i], rr) * model.saturation(pp);
        let diag_c: Vec<f64> = (0..n).map(|i| m[i] * phi_s(i, r[i], p[i]) / h).collect();
        let rhs_c: Vec<f64> = (0..n).map(|i| m[i] * phi_s(i, prev.r[i], prev.p[i]) * prev.c[i] / h).collect();
        let c = self.transport(
            &els,
            &diag_c,
            |e| {
                let pc = Self::avg(e, &p);
                model.porosity(e.centroid, Self::avg(e, &r)) * model.saturation(pc) * model.diffusivity(e.centroid, pc)
            },
            &q,
            &rhs_c,
        )?;
        let diag_t: Vec<f64> = (0..n).map(|i| m[i] * (phi_s(i, r[i], p[i]) + model.density(x[i], r[i])) / h).collect();
        let rhs_t: Vec<f64> = (0..n)
            .map(|i| {
                let f = model.hydration(x[i], p[i], prev.c[i], prev.theta[i], prev.r[i]);
                m[i] * ((phi_s(i, prev.r[i], prev.p[i]) + model.density(x[i], prev.r[i])) * prev.theta[i] / h + model.alpha2() * f)
            })
            .collect();
        let theta = self.transport(
            &els,
            &diag_t,
            |e| model.conductivity(e.centroid, Self::avg(e, &prev.p), Self::avg(e, &prev.theta), Self::avg(e, &prev.r)),
            &q,
            &rhs_t,
        )?;
        Ok(StateFields {
            level: prev.level + 1,
            t: (prev.level + 1) as f64 * h,
            p,
            c,
            theta,
            r,
        })
    }
}

pub fn brute_force_single_step(mesh: &Mesh, model: &MaterialModel, kmap: &KirchhoffMap, prev: &StateFields, h: f64) -> Result<StateFields> {
    BruteForce::new(mesh, model, kmap)?.step(prev, h)
}

/// Tiny meshes with one or two free nodes.
pub fn tiny_meshes() -> Vec<Mesh> {
    vec![
        build_structured_mesh(2, 2, 1.0, 1.0, SideTags::all(BoundaryTag::Dirichlet)).unwrap(),
        build_structured_mesh(3, 2, 1.5, 1.0, SideTags::all(BoundaryTag::Dirichlet)).unwrap(),
        build_structured_mesh(1, 1, 1.0, 1.0, SideTags::dirichlet_left()).unwrap(),
        build_structured_mesh(2, 2, 1.0, 0.7, SideTags::all(BoundaryTag::Dirichlet)).unwrap(),
    ]
}

/// Shared handle type for runs that need an owned case as forcing.
pub type SharedCase = Arc<ManufacturedCase>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::default_model;
    use crate::stepper::advance_one_level;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sources_match_symbolic_worksheet() {
        // values printed by docs/manufactured_sources.py
        let case = ManufacturedCase::smooth();
        let frozen = [
            ([0.3, 0.6], 0.25, [-0.129_764_478_261_044_61, 0.053_143_171_245_035_437, -1.106_004_555_202_580_5]),
            ([0.8, 0.15], 0.7, [-0.125_570_894_425_917_56, 0.008_846_460_626_022_975_4, -1.016_734_227_785_982_3]),
            ([0.5, 0.5], 0.0, [-0.134_970_744_840_408_78, 0.092_795_717_107_270_029, -1.212_258_384_050_346_1]),
        ];
        for (x, t, want) in frozen {
            let got = case.sources(x, t);
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 1e-12 * want[k].abs().max(1.0), "{x:?} {t} eq {k}: {} vs {}", got[k], want[k]);
            }
        }
    }

    #[test]
    fn constant_case_sources_balance_hydration() {
        let case = ManufacturedCase::constant();
        let k = case.params;
        let g = case.sources([0.4, 0.2], 0.3);
        assert!((g[0] - (k.phi_slope * k.rate * 0.5 - k.alpha1 * k.rate)).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
        assert!((g[2] + k.alpha2 * k.rate).abs() < 1e-15);
    }

    #[test]
    fn smooth_case_is_certified_nondegenerate() {
        let cert = ManufacturedCase::smooth().certificate(0.1);
        assert!(cert.holds(), "{cert:?}");
    }

    #[test]
    fn constant_case_is_reproduced() {
        let case = ManufacturedCase::constant();
        let t = run_convergence_study(&case, &[4], &[4, 8], &SchemeConfig::default()).unwrap();
        assert!(t.max_error() < 1e-9, "{}", t.to_csv());
    }

    #[test]
    fn brute_force_of_the_zero_state_is_zero() {
        let mut cfg = MaterialConfig::default();
        cfg.hydration = HydrationConfig::Constant { value: 0.0 };
        let model = cfg.build().unwrap();
        let kmap = build_kirchhoff_map(&model, -50.0).unwrap();
        for mesh in tiny_meshes() {
            let prev = StateFields::zeros(mesh.num_nodes());
            let s = brute_force_single_step(&mesh, &model, &kmap, &prev, 0.1).unwrap();
            assert!(s.p.iter().chain(&s.c).chain(&s.theta).chain(&s.r).all(|&v| v == 0.0), "{s:?}");
        }
        let big = build_structured_mesh(3, 3, 1.0, 1.0, SideTags::all(BoundaryTag::Dirichlet)).unwrap();
        assert!(BruteForce::new(&big, &model, &kmap).is_err());
    }

    #[test]
    fn stepper_agrees_with_brute_force() {
        let model = default_model();
        let kmap = build_kirchhoff_map(&model, -1e3).unwrap();
        let cfg = SchemeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, mesh) in tiny_meshes().iter().enumerate() {
            for _ in 0..3 {
                let mut prev = StateFields::zeros(mesh.num_nodes());
                for i in mesh.free_nodes() {
                    prev.p[i] = -rng.gen_range(0.1..6.0);
                    prev.c[i] = rng.gen_range(0.0..1.0);
                    prev.theta[i] = rng.gen_range(0.0..3.0);
                    prev.r[i] = rng.gen_range(0.0..0.4);
                }
                let h = rng.gen_range(0.005..0.2);
                let a = advance_one_level(mesh, &model, &kmap, &prev, h, &cfg).unwrap();
                let b = brute_force_single_step(mesh, &model, &kmap, &prev, h).unwrap();
                for (u, v) in [(&a.p, &b.p), (&a.c, &b.c), (&a.theta, &b.theta), (&a.r, &b.r)] {
                    for i in 0..u.len() {
                        assert!((u[i] - v[i]).abs() < 1e-9, "mesh {k}: {} vs {}", u[i], v[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn single_dof_step_is_monotone_in_the_previous_pressure() {
        let model = default_model();
        let kmap = build_kirchhoff_map(&model, -1e3).unwrap();
        let mesh = &tiny_meshes()[0];
        let mut last = f64::NEG_INFINITY;
        for j in 0..40 {
            let mut prev = StateFields::zeros(9);
            prev.p[4] = -8.0 + 0.2 * j as f64;
            let s = BruteForce::new(mesh, &model, &kmap).unwrap().pressure(&prev, 0.05).unwrap();
            assert!(s[4] > last);
            last = s[4];
        }
    }
}
