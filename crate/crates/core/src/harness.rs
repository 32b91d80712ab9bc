//! Scenario files, the bundled scenario library and the command drivers
//! behind the `porohydra` binary.
//!
//! Every driver returns an [`Outcome`] carrying the lines to print and the
//! process exit code: 0 when all hard checks pass, 1 when a check fails,
//! 2 for configuration, input or integrity errors.

use std::env;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{build_report, DiagnosticsConfig, DiagnosticsReport};
use crate::discretization::Forcing;
use crate::error::{Error, Result};
use crate::io::{load_trajectory, save_trajectory, StreamingSink};
use crate::kirchhoff::{build_kirchhoff_map, estimate_pressure_lower_bound_with, DeGiorgiParams, KirchhoffMap};
use crate::material::{validate_assumptions, InitialData, MaterialConfig, MaterialModel, SampleGrid};
use crate::mesh::{build_structured_mesh, validate_mesh, Mesh, SideTags};
use crate::stepper::{SchemeConfig, StepStats, Stepper, Trajectory};
use crate::verification::{run_convergence_study, ManufacturedCase, ManufacturedKind, ManufacturedParams};

/// Directory searched for scenario names and material references.
pub const CONFIG_DIR_ENV: &str = "POROHYDRA_CONFIG_DIR";

pub const BUNDLED: &[(&str, &str)] = &[
    ("trivial_zero", include_str!("../../../scenarios/trivial_zero.toml")),
    ("drying_degenerate", include_str!("../../../scenarios/drying_degenerate.toml")),
    ("manufactured_smooth", include_str!("../../../scenarios/manufactured_smooth.toml")),
    ("manufactured_constant", include_str!("../../../scenarios/manufactured_constant.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    pub nx: Option<usize>,
    pub ny: Option<usize>,
    #[serde(default = "one")]
    pub lx: f64,
    #[serde(default = "one")]
    pub ly: f64,
    pub sides: Option<SideTags>,
    /// Mesh in the text format of [`Mesh::write_text`], instead of `nx`/`ny`.
    pub file: Option<String>,
}

fn one() -> f64 {
    1.0
}

/// A preset name, a path to a material TOML file, or the tables inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaterialRef {
    Named(String),
    Inline(Box<MaterialConfig>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    /// Given values on free nodes, zero on the Dirichlet boundary.
    Constant,
    /// Given values scaled by `min(1, d / ramp_width)`, `d` the distance to the Dirichlet boundary.
    Ramp,
    /// One line `p0 c0 theta0` per node.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub kind: InitialKind,
    #[serde(default)]
    pub p0: f64,
    #[serde(default)]
    pub c0: f64,
    #[serde(default)]
    pub theta0: f64,
    pub p1: f64,
    pub ramp_width: Option<f64>,
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSpec {
    /// Embedding constant used in the pressure-floor search.
    pub c_e: f64,
    pub q: f64,
    /// Explicit floor, bypassing the search.
    pub ell: Option<f64>,
    /// Truncation level of the Kirchhoff table when the search finds no floor.
    pub fallback_ell: f64,
}

impl Default for BoundSpec {
    fn default() -> Self {
        BoundSpec {
            c_e: 1.0,
            q: 4.0,
            ell: None,
            fallback_ell: -1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManufacturedSpec {
    pub kind: ManufacturedKind,
    #[serde(default)]
    pub params: ManufacturedParams,
    #[serde(default = "default_meshes")]
    pub meshes: Vec<usize>,
    #[serde(default = "default_ns")]
    pub ns: Vec<usize>,
}

fn default_meshes() -> Vec<usize> {
    vec![48]
}

fn default_ns() -> Vec<usize> {
    vec![16, 32, 64, 128]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<String>,
    pub streaming: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub mesh: MeshSpec,
    pub material: Option<MaterialRef>,
    pub initial: Option<InitialSpec>,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub bound: BoundSpec,
    #[serde(default)]
    pub output: OutputSpec,
    pub manufactured: Option<ManufacturedSpec>,
    /// Directory relative references resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn config_dir() -> Option<PathBuf> {
    env::var_os(CONFIG_DIR_ENV).map(PathBuf::from)
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!("scenario line {line}")
                })
                .unwrap_or_else(|| "scenario".into());
            Error::config(key, msg)
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn bundled(name: &str) -> Option<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_toml(text).expect("bundled scenario parses"))
    }

    /// Resolves a path, a name in the config directory, or a bundled name.
    pub fn load(arg: &str) -> Result<Self> {
        let direct = PathBuf::from(arg);
        let mut candidates = vec![direct.clone()];
        if let Some(dir) = config_dir() {
            candidates.push(dir.join(arg));
            candidates.push(dir.join(format!("{arg}.toml")));
        }
        for path in candidates {
            if path.is_file() {
                let text = fs::read_to_string(&path)?;
                let mut sc = Self::from_toml(&text).map_err(|e| match e {
                    Error::Config { key, message } => Error::config(format!("{} ({key})", path.display()), message),
                    other => other,
                })?;
                sc.base_dir = path.parent().map(Path::to_path_buf);
                return Ok(sc);
            }
        }
        Self::bundled(arg).ok_or_else(|| {
            Error::config(
                "--scenario",
                format!("`{arg}` is neither a file, an entry of ${CONFIG_DIR_ENV}, nor a bundled scenario"),
            )
        })
    }

    fn resolve_path(&self, rel: &str) -> PathBuf {
        let p = PathBuf::from(rel);
        if p.is_absolute() {
            return p;
        }
        let mut tries = Vec::new();
        if let Some(b) = &self.base_dir {
            tries.push(b.join(&p));
        }
        if let Some(d) = config_dir() {
            tries.push(d.join(&p));
        }
        tries.into_iter().find(|t| t.exists()).unwrap_or(p)
    }

    pub fn manufactured_case(&self) -> Result<Option<ManufacturedCase>> {
        self.manufactured
            .as_ref()
            .map(|m| ManufacturedCase::new(m.kind, m.params))
            .transpose()
    }

    pub fn build_mesh(&self) -> Result<Mesh> {
        let m = &self.mesh;
        if let Some(file) = &m.file {
            let path = self.resolve_path(file);
            let f = fs::File::open(&path)
                .map_err(|e| Error::config("mesh.file", format!("cannot open {}: {e}", path.display())))?;
            return Mesh::read_text(BufReader::new(f));
        }
        let nx = m.nx.ok_or_else(|| Error::config("mesh.nx", "required unless mesh.file is given"))?;
        let ny = m.ny.unwrap_or(nx);
        let sides = match (m.sides, &self.manufactured) {
            (Some(s), _) => s,
            (None, Some(_)) => SideTags::all(crate::mesh::BoundaryTag::Dirichlet),
            (None, None) => SideTags::dirichlet_left(),
        };
        build_structured_mesh(nx, ny, m.lx, m.ly, sides)
    }

    pub fn material_config(&self) -> Result<MaterialConfig> {
        if let Some(m) = &self.manufactured {
            if self.material.is_some() {
                return Err(Error::config("material", "a manufactured scenario takes its material from [manufactured]"));
            }
            return Ok(ManufacturedCase::material(&m.params));
        }
        match &self.material {
            None => Ok(MaterialConfig::default()),
            Some(MaterialRef::Inline(cfg)) => Ok((**cfg).clone()),
            Some(MaterialRef::Named(name)) if name == "default" => Ok(MaterialConfig::default()),
            Some(MaterialRef::Named(name)) => {
                let mut path = self.resolve_path(name);
                if !path.exists() {
                    path = self.resolve_path(&format!("{name}.toml"));
                }
                let text = fs::read_to_string(&path)
                    .map_err(|e| Error::config("material", format!("cannot read `{name}` ({}): {e}", path.display())))?;
                MaterialConfig::from_toml(&text)
            }
        }
    }

    pub fn initial_data(&self, mesh: &Mesh) -> Result<InitialData> {
        if let Some(case) = self.manufactured_case()? {
            if self.initial.is_some() {
                return Err(Error::config("initial", "a manufactured scenario takes its initial data from [manufactured]"));
            }
            return Ok(case.initial_data(mesh));
        }
        let spec = self
            .initial
            .as_ref()
            .ok_or_else(|| Error::config("initial", "section is required"))?;
        let n = mesh.num_nodes();
        let data = match spec.kind {
            InitialKind::Constant | InitialKind::Ramp => {
                let weight: Vec<f64> = if spec.kind == InitialKind::Ramp {
                    let w = spec
                        .ramp_width
                        .filter(|w| *w > 0.0)
                        .ok_or_else(|| Error::config("initial.ramp_width", "must be given and positive for kind = \"ramp\""))?;
                    boundary_distance(mesh).iter().map(|d| (d / w).min(1.0)).collect()
                } else {
                    (0..n).map(|i| if mesh.is_dirichlet(i) { 0.0 } else { 1.0 }).collect()
                };
                let field = |v: f64| weight.iter().map(|w| v * w).collect::<Vec<_>>();
                InitialData {
                    p0: field(spec.p0),
                    c0: field(spec.c0),
                    theta0: field(spec.theta0),
                    p1: spec.p1,
                }
            }
            InitialKind::File => {
                let file = spec
                    .file
                    .as_ref()
                    .ok_or_else(|| Error::config("initial.file", "required for kind = \"file\""))?;
                let path = self.resolve_path(file);
                let text = fs::read_to_string(&path)
                    .map_err(|e| Error::config("initial.file", format!("cannot read {}: {e}", path.display())))?;
                read_initial_file(&text, n, spec.p1)?
            }
        };
        data.validate(mesh).map_err(|e| match e {
            Error::InitialData(msg) => Error::InitialData(format!("{msg} (section [initial])")),
            other => other,
        })?;
        Ok(data)
    }

    pub fn scheme(&self, n_override: Option<usize>) -> Result<SchemeConfig> {
        let mut s = self.scheme.clone();
        if let Some(m) = &self.manufactured {
            s.t_final = m.params.t_final;
        }
        if let Some(n) = n_override {
            s.n = n;
        }
        s.validate()?;
        Ok(s)
    }
}

fn read_initial_file(text: &str, n: usize, p1: f64) -> Result<InitialData> {
    let mut d = InitialData {
        p0: Vec::with_capacity(n),
        c0: Vec::with_capacity(n),
        theta0: Vec::with_capacity(n),
        p1,
    };
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#')) {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config("initial.file", format!("line {}: expected three numbers", k + 1)))?;
        if vals.len() != 3 {
            return Err(Error::config("initial.file", format!("line {}: expected three numbers", k + 1)));
        }
        d.p0.push(vals[0]);
        d.c0.push(vals[1]);
        d.theta0.push(vals[2]);
    }
    if d.p0.len() != n {
        return Err(Error::config("initial.file", format!("{} rows for {n} mesh nodes", d.p0.len())));
    }
    Ok(d)
}

/// Euclidean distance of each node to the nearest Dirichlet node.
fn boundary_distance(mesh: &Mesh) -> Vec<f64> {
    let dir: Vec<_> = mesh.dirichlet_nodes().into_iter().map(|i| mesh.nodes()[i]).collect();
    mesh.nodes()
        .iter()
        .map(|x| {
            dir.iter()
                .map(|y| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Everything a run or an audit needs, built from one scenario.
pub struct Prepared {
    pub scenario: Scenario,
    pub mesh: Mesh,
    pub model: MaterialModel,
    pub kmap: KirchhoffMap,
    /// Theoretical floor, `None` if the search found none.
    pub ell: Option<f64>,
    pub case: Option<ManufacturedCase>,
}

impl Prepared {
    pub fn new(scenario: Scenario) -> Result<Self> {
        let mesh = scenario.build_mesh()?;
        let model = scenario.material_config()?.build()?;
        let case = scenario.manufactured_case()?;
        let (kmap, ell) = if let Some(c) = &case {
            let k = c.kirchhoff_map()?;
            let ell = k.ell();
            (k, Some(ell))
        } else {
            let init = scenario.initial_data(&mesh)?;
            let b = &scenario.bound;
            let ell = match b.ell {
                Some(v) => v,
                None => {
                    estimate_pressure_lower_bound_with(
                        &model,
                        &DeGiorgiParams {
                            domain_area: mesh.area(),
                            q: b.q,
                            c_e: b.c_e,
                            p1: Some(init.p1),
                        },
                    )
                    .map_err(|e| match e {
                        Error::Config { key, message } => Error::config(format!("bound.{key}"), message),
                        other => other,
                    })?
                    .ell
                }
            };
            if ell.is_finite() {
                if ell >= init.p1 {
                    return Err(Error::config("bound.ell", format!("floor {ell} must lie below p1 = {}", init.p1)));
                }
                (build_kirchhoff_map(&model, ell)?, Some(ell))
            } else {
                if !(b.fallback_ell < init.p1) {
                    return Err(Error::config("bound.fallback_ell", "must lie below initial.p1"));
                }
                (build_kirchhoff_map(&model, b.fallback_ell)?, None)
            }
        };
        Ok(Prepared {
            scenario,
            mesh,
            model,
            kmap,
            ell,
            case,
        })
    }

    fn forcing(&self) -> Option<&dyn Forcing> {
        self.case.as_ref().map(|c| c as &dyn Forcing)
    }

    pub fn stepper<'a>(&'a self, cfg: &'a SchemeConfig) -> Stepper<'a> {
        let s = Stepper::new(&self.mesh, &self.model, &self.kmap, cfg).with_bound(self.ell);
        match &self.case {
            Some(c) => s.with_forcing(c),
            None => s,
        }
    }

    pub fn report(&self, traj: &Trajectory) -> Result<DiagnosticsReport> {
        build_report(
            traj,
            &self.mesh,
            &self.model,
            &self.kmap,
            self.ell.unwrap_or(f64::NEG_INFINITY),
            &self.scenario.diagnostics,
            self.forcing(),
        )
    }

    /// Runs the scheme, in memory or streaming to `traj_path`.
    pub fn simulate(&self, cfg: &SchemeConfig, streaming: Option<&Path>) -> Result<(Trajectory, Vec<StepStats>)> {
        let init = self.scenario.initial_data(&self.mesh)?;
        let stepper = self.stepper(cfg);
        match streaming {
            None => {
                let traj = stepper.run(&init)?;
                let stats = traj.stats.clone();
                Ok((traj, stats))
            }
            Some(path) => {
                let mut sink = StreamingSink::create(path, self.mesh.num_nodes(), cfg.h(), cfg.t_final)?;
                stepper.run_into(&init, &mut sink)?;
                let stats = std::mem::take(&mut sink.stats);
                sink.finish()?;
                Ok((load_trajectory(path)?, stats))
            }
        }
    }
}

/// Result of a driver: printable lines plus the exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub lines: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, lines: Vec<String>) -> Self {
        Outcome {
            code: if pass { 0 } else { 1 },
            lines,
        }
    }

    /// Exit code 2 with the error text; used for every configuration, input or integrity failure.
    pub fn from_error(e: &Error) -> Self {
        Outcome {
            code: 2,
            lines: vec![format!("error: {e}")],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub n_override: Option<usize>,
    pub streaming: bool,
}

pub const TRAJECTORY_FILE: &str = "trajectory.bin";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";

fn out_dir(sc: &Scenario, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| sc.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(&sc.name))
}

fn summary_lines(report: &DiagnosticsReport) -> Vec<String> {
    report
        .verdicts()
        .into_iter()
        .map(|(name, pass, detail)| format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" }))
        .collect()
}

#[derive(Serialize)]
struct RunRecord<'a> {
    scenario: &'a str,
    nodes: usize,
    n: usize,
    h: f64,
    halvings: usize,
    theoretical_ell: Option<f64>,
    kirchhoff_ell: f64,
    newton_levels: usize,
    picard_levels: usize,
    total_iterations: usize,
    stats: &'a [StepStats],
}

/// Runs a scenario, writes the trajectory, the report and the summary.
pub fn cli_run(scenario: &Scenario, opts: &RunOptions) -> Result<Outcome> {
    let prep = Prepared::new(scenario.clone())?;
    let cfg = prep.scenario.scheme(opts.n_override)?;
    let dir = out_dir(scenario, opts.out.as_deref());
    fs::create_dir_all(&dir)?;
    let traj_path = dir.join(TRAJECTORY_FILE);
    let streaming = opts.streaming || scenario.output.streaming;
    let (traj, stats) = prep.simulate(&cfg, streaming.then_some(traj_path.as_path()))?;
    if !streaming {
        save_trajectory(&traj_path, &traj)?;
    }
    let report = prep.report(&traj)?;
    fs::write(dir.join(REPORT_FILE), report.to_json())?;
    fs::write(dir.join("report.txt"), report.to_table())?;
    let summary = summary_lines(&report);
    fs::write(dir.join(SUMMARY_FILE), summary.join("\n") + "\n")?;
    let mut resolved = prep.scenario.clone();
    if resolved.manufactured.is_none() {
        resolved.material = Some(MaterialRef::Inline(Box::new(resolved.material_config()?)));
    }
    fs::write(dir.join("scenario.toml"), resolved.to_toml())?;
    let record = RunRecord {
        scenario: &scenario.name,
        nodes: prep.mesh.num_nodes(),
        n: traj.n(),
        h: traj.h,
        halvings: traj.halvings,
        theoretical_ell: prep.ell,
        kirchhoff_ell: prep.kmap.ell(),
        newton_levels: stats.iter().filter(|s| s.method == crate::stepper::NonlinearMethod::Newton).count(),
        picard_levels: stats.iter().filter(|s| s.method == crate::stepper::NonlinearMethod::Picard).count(),
        total_iterations: stats.iter().map(|s| s.iterations).sum(),
        stats: &stats,
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record).expect("record serializes"))?;
    let mut lines = vec![format!(
        "{}: {} levels, h = {:e}, {} halvings, output in {}",
        scenario.name,
        traj.n(),
        traj.h,
        traj.halvings,
        dir.display()
    )];
    lines.extend(summary);
    Ok(Outcome::new(report.all_pass(), lines))
}

/// Re-derives the report of a stored trajectory and compares it with the
/// `report.json` stored next to it, if there is one.
pub fn cli_audit(trajectory: &Path, scenario: &Scenario, out: Option<&Path>) -> Result<Outcome> {
    let traj = load_trajectory(trajectory)?;
    let prep = Prepared::new(scenario.clone())?;
    let nodes = traj.levels.first().map_or(0, |l| l.p.len());
    if nodes != prep.mesh.num_nodes() {
        return Err(Error::Integrity(format!(
            "trajectory has {nodes} nodes, the scenario mesh has {}",
            prep.mesh.num_nodes()
        )));
    }
    let report = prep.report(&traj)?;
    let json = report.to_json();
    let dir = trajectory.parent().unwrap_or(Path::new("."));
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("audit_report.json"));
    if let Some(parent) = target.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&target, &json)?;
    let mut lines = summary_lines(&report);
    let mut pass = report.all_pass();
    let original = dir.join(REPORT_FILE);
    if original.is_file() {
        let old = fs::read_to_string(&original)?;
        if old == json {
            lines.push(format!("report identical to {}", original.display()));
        } else {
            pass = false;
            let line = old
                .lines()
                .zip(json.lines())
                .position(|(a, b)| a != b)
                .unwrap_or_else(|| old.lines().count().min(json.lines().count()))
                + 1;
            lines.push(format!("report differs from {} (first difference at line {line})", original.display()));
        }
    }
    lines.push(format!("audit report written to {}", target.display()));
    Ok(Outcome::new(pass, lines))
}

/// Convergence study of the manufactured case a scenario references.
pub fn cli_convergence(scenario: &Scenario, ns: Option<&[usize]>, meshes: Option<&[usize]>, out: Option<&Path>) -> Result<Outcome> {
    let spec = scenario
        .manufactured
        .as_ref()
        .ok_or_else(|| Error::config("manufactured", "the scenario references no manufactured case"))?;
    let case = ManufacturedCase::new(spec.kind, spec.params)?;
    let ns = ns.unwrap_or(&spec.ns);
    let meshes = meshes.unwrap_or(&spec.meshes);
    let scheme = scenario.scheme(None)?;
    let table = run_convergence_study(&case, meshes, ns, &scheme)?;
    let dir = out_dir(scenario, out);
    fs::create_dir_all(&dir)?;
    let path = dir.join("convergence.csv");
    fs::write(&path, table.to_csv())?;
    let max_err = table.max_error();
    let (pass, verdict) = if max_err <= 1e-9 {
        (true, format!("errors at rounding level (max {max_err:.3e})"))
    } else {
        match table.finest_order() {
            Some(o) => (o >= 0.8, format!("temporal order on the finest pair {o:.4} (required >= 0.8)")),
            None => (false, "fewer than two step counts, no order available".into()),
        }
    };
    let mut lines: Vec<String> = table.to_csv().lines().map(String::from).collect();
    lines.push(format!("{} convergence: {verdict}", if pass { "PASS" } else { "FAIL" }));
    lines.push(format!("table written to {}", path.display()));
    Ok(Outcome::new(pass, lines))
}

/// Spot-checks the material of a scenario and prints the pressure floor.
pub fn cli_validate_model(scenario: &Scenario) -> Result<Outcome> {
    let cfg = scenario.material_config()?;
    let model = cfg.build()?;
    let violations = validate_assumptions(&model, &SampleGrid::default());
    let mut lines: Vec<String> = violations.iter().map(|v| format!("violated: {v}")).collect();
    if scenario.manufactured.is_none() {
        let mesh = scenario.build_mesh()?;
        let p1 = scenario.initial_data(&mesh)?.p1;
        let b = &scenario.bound;
        let est = estimate_pressure_lower_bound_with(
            &model,
            &DeGiorgiParams {
                domain_area: mesh.area(),
                q: b.q,
                c_e: b.c_e,
                p1: Some(p1),
            },
        )?;
        let mut s = format!("pressure floor for C_E = {}, q = {}: ell = {:e}", b.c_e, b.q, est.ell);
        if let Some(d) = est.delta {
            let _ = write!(s, " (delta = {d:e})");
        }
        lines.push(s);
    }
    lines.push(if violations.is_empty() {
        "all structural assumptions hold on the sample grid".into()
    } else {
        format!("{} assumption(s) violated", violations.len())
    });
    Ok(Outcome::new(violations.is_empty(), lines))
}

pub fn cli_mesh_info(scenario: &Scenario) -> Result<Outcome> {
    let mesh = scenario.build_mesh()?;
    let violations = validate_mesh(&mesh);
    let mut lines = vec![
        format!("nodes {}", mesh.num_nodes()),
        format!("triangles {}", mesh.num_triangles()),
        format!("dirichlet nodes {}", mesh.dirichlet_nodes().len()),
        format!("area {:.6}", mesh.area()),
        format!("max edge {:.6e}", mesh.max_edge_length()),
        format!("max angle {:.4} deg", mesh.max_angle().to_degrees()),
    ];
    lines.extend(violations.iter().map(|v| format!("violation: {v}")));
    Ok(Outcome::new(violations.is_empty(), lines))
}

/// Sizes the global worker pool; only the first call has an effect.
pub fn configure_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::config("--threads", "must be at least 1"));
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
