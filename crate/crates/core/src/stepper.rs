//! The time march: pressure, hydration, concentration, temperature, in that
//! order, once per level.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::discretization::{update_hydration, Forcing, PressureStep, StateFields, TransportContext};
use crate::error::{Error, Result};
use crate::kirchhoff::KirchhoffMap;
use crate::linalg::{solve, LinearSolverConfig, Pattern};
use crate::material::{InitialData, MaterialModel};
use crate::mesh::Mesh;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineSearch {
    pub factor: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        LineSearch {
            factor: 0.5,
            max_backtracks: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub t_final: f64,
    pub n: usize,
    /// Relative residual tolerance: stop once `|R| <= tol (|R_0| + 1)`.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub line_search: LineSearch,
    pub picard_max_iter: usize,
    /// Global restarts with `h / 2` after a failed step.
    pub max_halvings: usize,
    /// Fraction of `|ell|` tolerated below the pressure floor before the run aborts.
    pub lower_bound_slack: f64,
    pub linear_solver: LinearSolverConfig,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            t_final: 1.0,
            n: 32,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            line_search: LineSearch::default(),
            picard_max_iter: 500,
            max_halvings: 3,
            lower_bound_slack: 0.1,
            linear_solver: LinearSolverConfig::default(),
        }
    }
}

impl SchemeConfig {
    pub fn h(&self) -> f64 {
        self.t_final / self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("scheme.n", "need at least one step"));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::config("scheme.t_final", "final time must be positive"));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::config("scheme.newton_tol", "tolerance must be positive"));
        }
        if !(self.line_search.factor > 0.0 && self.line_search.factor < 1.0) {
            return Err(Error::config("scheme.line_search.factor", "backtracking factor must lie in (0, 1)"));
        }
        if !(self.lower_bound_slack >= 0.0) {
            return Err(Error::config("scheme.lower_bound_slack", "slack must be nonnegative"));
        }
        if !(self.linear_solver.iterative_tol > 0.0) {
            return Err(Error::config("scheme.linear_solver.iterative_tol", "tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonlinearMethod {
    Newton,
    Picard,
}

/// Solver statistics of one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub level: usize,
    pub method: NonlinearMethod,
    pub iterations: usize,
    pub backtracks: usize,
    pub residual_history: Vec<f64>,
    pub min_mobility: f64,
    pub min_pressure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub h: f64,
    pub t_final: f64,
    /// How often the step was halved before the run went through.
    pub halvings: usize,
    pub levels: Vec<StateFields>,
    pub stats: Vec<StepStats>,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }
}

/// A failed run together with the levels computed before the failure.
#[derive(Debug)]
pub struct RunError {
    pub error: Error,
    pub partial: Trajectory,
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} completed levels)", self.error, self.partial.n())
    }
}

impl std::error::Error for RunError {}

impl From<RunError> for Error {
    fn from(e: RunError) -> Self {
        e.error
    }
}

/// Receives levels as they are produced.
pub trait LevelSink {
    fn push(&mut self, state: &StateFields, stats: Option<&StepStats>) -> Result<()>;
    /// Drops everything received so far (a halving restart).
    fn reset(&mut self, h: f64) -> Result<()>;
}

/// Keeps the whole trajectory in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub levels: Vec<StateFields>,
    pub stats: Vec<StepStats>,
}

impl LevelSink for MemorySink {
    fn push(&mut self, state: &StateFields, stats: Option<&StepStats>) -> Result<()> {
        self.levels.push(state.clone());
        if let Some(s) = stats {
            self.stats.push(s.clone());
        }
        Ok(())
    }

    fn reset(&mut self, _h: f64) -> Result<()> {
        self.levels.clear();
        self.stats.clear();
        Ok(())
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scheme driver bound to one mesh, model and Kirchhoff table.
pub struct Stepper<'a> {
    pub mesh: &'a Mesh,
    pub model: &'a MaterialModel,
    pub kmap: &'a KirchhoffMap,
    pub cfg: &'a SchemeConfig,
    forcing: Option<&'a dyn Forcing>,
    pattern: Arc<Pattern>,
    bound: Option<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(mesh: &'a Mesh, model: &'a MaterialModel, kmap: &'a KirchhoffMap, cfg: &'a SchemeConfig) -> Self {
        Stepper {
            mesh,
            model,
            kmap,
            cfg,
            forcing: None,
            pattern: Arc::new(Pattern::for_mesh(mesh)),
            bound: Some(kmap.ell()),
        }
    }

    pub fn with_forcing(mut self, forcing: &'a dyn Forcing) -> Self {
        self.forcing = Some(forcing);
        self
    }

    /// Pressure bound checked after every level; `None` disables the check.
    /// Defaults to the truncation level of the Kirchhoff table.
    pub fn with_bound(mut self, bound: Option<f64>) -> Self {
        self.bound = bound;
        self
    }

    fn pressure_from_lifted(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, &v)| if self.mesh.is_dirichlet(i) { 0.0 } else { self.kmap.lifted_inv(v) })
            .collect()
    }

    /// Solves the pressure equation of one level.
    pub fn solve_pressure_step(&self, prev: &StateFields, h: f64) -> Result<(Vec<f64>, StepStats)> {
        let step = PressureStep::with_pattern(self.mesh, self.model, self.kmap, prev, h, self.forcing, self.pattern.clone())?;
        let level = prev.level + 1;
        let min_mobility = step.mobility().iter().cloned().fold(f64::INFINITY, f64::min);
        match self.newton(&step, prev) {
            Ok((p, iterations, backtracks, history)) => {
                let min_pressure = p.iter().cloned().fold(f64::INFINITY, f64::min);
                Ok((
                    p,
                    StepStats {
                        level,
                        method: NonlinearMethod::Newton,
                        iterations,
                        backtracks,
                        residual_history: history,
                        min_mobility,
                        min_pressure,
                    },
                ))
            }
            Err(newton_err) => {
                let (p, iterations, history) = self.picard(&step, prev).map_err(|_| newton_err)?;
                let min_pressure = p.iter().cloned().fold(f64::INFINITY, f64::min);
                Ok((
                    p,
                    StepStats {
                        level,
                        method: NonlinearMethod::Picard,
                        iterations,
                        backtracks: 0,
                        residual_history: history,
                        min_mobility,
                        min_pressure,
                    },
                ))
            }
        }
    }

    /// Damped Newton in the lifted Kirchhoff variable with Armijo backtracking
    /// on the residual norm.
    fn newton(&self, step: &PressureStep, prev: &StateFields) -> Result<(Vec<f64>, usize, usize, Vec<f64>)> {
        let cfg = self.cfg;
        let level = prev.level + 1;
        let mut p = prev.p.clone();
        let mut u: Vec<f64> = p.iter().map(|&v| self.kmap.lifted(v)).collect();
        let mut r = step.residual(&p)?;
        let mut norm = norm2(&r);
        let target = cfg.newton_tol * (norm + 1.0);
        let mut history = vec![norm];
        let mut backtracks = 0;
        let fail = |reason: String, history: &[f64]| Error::NewtonFailure {
            level,
            reason,
            residual_history: history.to_vec(),
        };
        for it in 0..cfg.newton_max_iter {
            if norm <= target {
                return Ok((p, it, backtracks, history));
            }
            let j = step.kirchhoff_jacobian(&p);
            let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
            let du = solve(&j, &rhs, false, &cfg.linear_solver)?;
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..=cfg.line_search.max_backtracks {
                let u_trial: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + lambda * b).collect();
                let p_trial = self.pressure_from_lifted(&u_trial);
                if let Ok(r_trial) = step.residual(&p_trial) {
                    let n_trial = norm2(&r_trial);
                    if n_trial <= (1.0 - 1e-4 * lambda) * norm || n_trial <= target {
                        u = u_trial;
                        p = p_trial;
                        r = r_trial;
                        norm = n_trial;
                        accepted = true;
                        break;
                    }
                }
                lambda *= cfg.line_search.factor;
                backtracks += 1;
            }
            history.push(norm);
            if !accepted {
                return Err(fail(format!("line search exhausted at iteration {}", it + 1), &history));
            }
        }
        if norm <= target {
            return Ok((p, cfg.newton_max_iter, backtracks, history));
        }
        Err(fail(format!("no convergence in {} iterations", cfg.newton_max_iter), &history))
    }

    /// Linearised fixed point `(K + L M)(u_{k+1} - u_k) = -R(p_k)` with a
    /// stabilisation `L` dominating the capacity in the Kirchhoff variable.
    fn picard(&self, step: &PressureStep, prev: &StateFields) -> Result<(Vec<f64>, usize, Vec<f64>)> {
        let cfg = self.cfg;
        let m = self.mesh.lumped_mass();
        let mut p = prev.p.clone();
        let mut u: Vec<f64> = p.iter().map(|&v| self.kmap.lifted(v)).collect();
        let mut r = step.residual(&p)?;
        let target = cfg.newton_tol * (norm2(&r) + 1.0);
        let mut history = vec![norm2(&r)];
        for it in 0..cfg.picard_max_iter {
            if norm2(&r) <= target {
                return Ok((p, it, history));
            }
            // local Lipschitz constant of the mass term in u, with margin
            let j = step.kirchhoff_jacobian(&p);
            let stiff = step.stiffness().diagonal();
            let l: Vec<f64> = (0..p.len())
                .map(|i| if m[i] > 0.0 { 2.0 * ((j.get(i, i) - stiff[i]) / m[i]).max(0.0) + 1e-12 } else { 0.0 })
                .collect();
            let a = step.picard_matrix(&l.iter().zip(m).map(|(li, mi)| li * mi).collect::<Vec<_>>());
            let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
            let du = solve(&a, &rhs, true, &cfg.linear_solver)?;
            for (ui, di) in u.iter_mut().zip(&du) {
                *ui += di;
            }
            p = self.pressure_from_lifted(&u);
            r = step.residual(&p)?;
            history.push(norm2(&r));
        }
        Err(Error::NewtonFailure {
            level: prev.level + 1,
            reason: format!("fixed-point fallback did not converge in {} iterations", cfg.picard_max_iter),
            residual_history: history,
        })
    }

    /// One full level: p, then r, then c and theta.
    pub fn advance(&self, prev: &StateFields, h: f64) -> Result<(StateFields, StepStats)> {
        let (p, stats) = self.solve_pressure_step(prev, h)?;
        let r = update_hydration(self.mesh, self.model, &p, prev, h);
        let ctx = TransportContext::new(self.mesh, self.model, self.kmap, prev, &p, &r, h, self.pattern.clone());
        let c = self.solve_concentration(&ctx)?;
        let theta = self.solve_temperature(&ctx)?;
        let level = prev.level + 1;
        Ok((
            StateFields {
                level,
                t: level as f64 * h,
                p,
                c,
                theta,
                r,
            },
            stats,
        ))
    }

    pub fn solve_concentration(&self, ctx: &TransportContext) -> Result<Vec<f64>> {
        let sys = ctx.concentration(self.forcing)?;
        solve(&sys.matrix, &sys.rhs, false, &self.cfg.linear_solver)
    }

    pub fn solve_temperature(&self, ctx: &TransportContext) -> Result<Vec<f64>> {
        let sys = ctx.temperature(self.forcing)?;
        solve(&sys.matrix, &sys.rhs, false, &self.cfg.linear_solver)
    }

    fn check_floor(&self, state: &StateFields) -> Result<()> {
        let ell = match self.bound {
            Some(b) if b.is_finite() => b,
            _ => return Ok(()),
        };
        let floor = ell - self.cfg.lower_bound_slack * ell.abs();
        let observed = state.p.iter().cloned().fold(f64::INFINITY, f64::min);
        if observed < floor {
            return Err(Error::LowerBoundFalsified {
                level: state.level,
                observed,
                floor,
                bound: ell,
            });
        }
        Ok(())
    }

    fn march(&self, initial: &StateFields, n: usize, h: f64, sink: &mut dyn LevelSink) -> Result<()> {
        sink.push(initial, None)?;
        let mut prev = initial.clone();
        for _ in 0..n {
            let (next, stats) = self.advance(&prev, h)?;
            self.check_floor(&next)?;
            sink.push(&next, Some(&stats))?;
            prev = next;
        }
        Ok(())
    }

    /// Marches to `t_final`, halving `h` globally on a failed pressure step.
    /// Returns the effective number of steps and halvings.
    pub fn run_into(&self, init: &InitialData, sink: &mut dyn LevelSink) -> Result<(usize, usize)> {
        self.cfg.validate()?;
        init.validate(self.mesh)?;
        let n0 = self.mesh.num_nodes();
        let initial = StateFields {
            level: 0,
            t: 0.0,
            p: init.p0.clone(),
            c: init.c0.clone(),
            theta: init.theta0.clone(),
            r: vec![0.0; n0],
        };
        let mut n = self.cfg.n;
        let mut halvings = 0;
        loop {
            let h = self.cfg.t_final / n as f64;
            match self.march(&initial, n, h, sink) {
                Ok(()) => return Ok((n, halvings)),
                Err(e @ Error::NewtonFailure { .. }) if halvings < self.cfg.max_halvings => {
                    let _ = e;
                    halvings += 1;
                    n *= 2;
                    sink.reset(self.cfg.t_final / n as f64)?;
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn run(&self, init: &InitialData) -> std::result::Result<Trajectory, RunError> {
        let mut sink = MemorySink::default();
        let out = self.run_into(init, &mut sink);
        let (n, halvings) = match &out {
            Ok(v) => *v,
            Err(_) => (sink.levels.len().saturating_sub(1).max(self.cfg.n), 0),
        };
        let traj = Trajectory {
            h: self.cfg.t_final / n as f64,
            t_final: self.cfg.t_final,
            halvings,
            levels: sink.levels,
            stats: sink.stats,
        };
        match out {
            Ok(_) => Ok(traj),
            Err(error) => Err(RunError { error, partial: traj }),
        }
    }
}

pub fn solve_pressure_step(
    mesh: &Mesh,
    model: &MaterialModel,
    kmap: &KirchhoffMap,
    prev: &StateFields,
    h: f64,
    cfg: &SchemeConfig,
) -> Result<Vec<f64>> {
    Ok(Stepper::new(mesh, model, kmap, cfg).solve_pressure_step(prev, h)?.0)
}

pub fn advance_one_level(
    mesh: &Mesh,
    model: &MaterialModel,
    kmap: &KirchhoffMap,
    prev: &StateFields,
    h: f64,
    cfg: &SchemeConfig,
) -> Result<StateFields> {
    Ok(Stepper::new(mesh, model, kmap, cfg).advance(prev, h)?.0)
}

pub fn run(
    mesh: &Mesh,
    model: &MaterialModel,
    kmap: &KirchhoffMap,
    init: &InitialData,
    cfg: &SchemeConfig,
) -> std::result::Result<Trajectory, RunError> {
    Stepper::new(mesh, model, kmap, cfg).run(init)
}
