//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are analysed in the decisions
//! ledger; they still print FAIL but do not fail the target. Any other
//! failure, or a known failure that starts passing, exits non-zero.

use std::time::{Duration, Instant};

use porohydra::diagnostics::check_hydration_rate_bound;
use porohydra::discretization::{PressureStep, StateFields};
use porohydra::harness::{cli_run, Prepared, RunOptions, Scenario};
use porohydra::verification::tiny_meshes;
use porohydra::{
    advance_one_level, brute_force_single_step, build_kirchhoff_map, build_structured_mesh, default_model, degiorgi_recurrence,
    run_convergence_study, DiagnosticsReport, ManufacturedCase, MaterialConfig, SchemeConfig, SideTags, Trajectory,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_FAILURES: &[usize] = &[5];

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn spread(v: &[f64]) -> f64 {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

fn max_abs(traj: &Trajectory, field: impl Fn(&StateFields) -> &Vec<f64>) -> f64 {
    traj.levels.iter().flat_map(|l| field(l).iter()).fold(0.0f64, |a, b| a.max(b.abs()))
}

struct DryingRun {
    n: usize,
    traj: Trajectory,
    report: DiagnosticsReport,
    elapsed: Duration,
}

fn drying_runs(prep: &Prepared) -> Vec<DryingRun> {
    [32, 64, 128]
        .into_iter()
        .map(|n| {
            let start = Instant::now();
            let cfg = prep.scenario.scheme(Some(n)).unwrap();
            let (traj, _) = prep.simulate(&cfg, None).unwrap();
            let report = prep.report(&traj).unwrap();
            DryingRun {
                n,
                traj,
                report,
                elapsed: start.elapsed(),
            }
        })
        .collect()
}

fn max_principle(prep: &Prepared, runs: &[DryingRun]) -> Verdict {
    let mins: Vec<f64> = runs.iter().map(|r| r.report.max_principle.observed_min).collect();
    let ell = prep.ell.expect("drying scenario has a finite floor");
    let rel = spread(&mins) / mins.iter().map(|m| m.abs()).fold(0.0, f64::max);
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap();
    let pass = rel <= 0.02 && mins.iter().all(|&m| m >= ell) && slowest <= Duration::from_secs(120);
    Verdict {
        id: 1,
        name: "max principle",
        pass,
        detail: format!("min p {mins:.6?}, spread {:.3}%, ell {ell:.4e}, slowest run {:.1?}", 100.0 * rel, slowest),
    }
}

fn linf_bounds(runs: &[DryingRun], c0: f64) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    let c_bound = c0 * (1.0 + 1e-8);
    let c_max = runs.iter().map(|r| max_abs(&r.traj, |l| &l.c)).fold(0.0, f64::max);
    pass &= c_max <= c_bound;
    parts.push(format!("max|c| {c_max:.10} <= {c_bound:.10}"));
    let th: Vec<f64> = runs.iter().map(|r| max_abs(&r.traj, |l| &l.theta)).collect();
    let worst = th.windows(2).map(|w| (w[1] - w[0]).abs() / w[0].abs().max(w[1].abs())).fold(0.0, f64::max);
    pass &= worst <= 0.05;
    parts.push(format!("max|theta| {th:.6?} (doubling change {:.2}%)", 100.0 * worst));
    for r in runs {
        let bound = r.report.linf_bounds.iter().find(|b| b.field == "r").and_then(|b| b.bound).unwrap();
        let r_max = max_abs(&r.traj, |l| &l.r);
        pass &= r_max <= bound;
        if r.n == 128 {
            parts.push(format!("max r {r_max:.6} <= T C_f = {bound}"));
        }
    }
    Verdict {
        id: 2,
        name: "L-inf bounds",
        pass,
        detail: parts.join("; "),
    }
}

fn hydration_rate(runs: &[DryingRun], prep: &Prepared, extra: &[(Trajectory, &porohydra::MaterialModel)]) -> Verdict {
    let mut worst: f64 = 0.0;
    let mut pass = true;
    let mut count = 0;
    for r in runs {
        let b = check_hydration_rate_bound(&r.traj, &prep.model, 1e-12);
        worst = worst.max(b.observed_max / b.c_f);
        pass &= b.pass;
        count += 1;
    }
    for (traj, model) in extra {
        let b = check_hydration_rate_bound(traj, model, 1e-12);
        worst = worst.max(b.observed_max / b.c_f);
        pass &= b.pass;
        count += 1;
    }
    Verdict {
        id: 3,
        name: "hydration rate bound",
        pass,
        detail: format!("{count} runs, max |dr|/h / C_f = {worst:.6}"),
    }
}

fn energy(runs: &[DryingRun]) -> Verdict {
    let sups: Vec<f64> = runs.iter().map(|r| r.report.energy.sup).collect();
    let worst = sups.windows(2).map(|w| (w[1] - w[0]).abs() / w[0].abs().max(w[1].abs())).fold(0.0, f64::max);
    Verdict {
        id: 4,
        name: "energy estimate",
        pass: worst <= 0.10,
        detail: format!("sup E {sups:.4?}, largest doubling change {:.2}%", 100.0 * worst),
    }
}

fn translates(runs: &[DryingRun]) -> Verdict {
    let names = ["p (S pairing)", "c", "theta", "r"];
    let mut pass = true;
    let mut parts = Vec::new();
    for (q, name) in names.iter().enumerate() {
        let v: Vec<f64> = runs.iter().map(|r| r.report.translates.max_ratios[q]).collect();
        let hi = v.iter().cloned().fold(0.0, f64::max);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let factor = hi / lo;
        pass &= factor < 2.0;
        parts.push(format!("{name} {:?} factor {factor:.3}", v.iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>()));
    }
    Verdict {
        id: 5,
        name: "translate estimates",
        pass,
        detail: parts.join("; "),
    }
}

fn oracle() -> Verdict {
    let model = default_model();
    let kmap = build_kirchhoff_map(&model, -1e3).unwrap();
    let cfg = SchemeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let meshes = tiny_meshes();
    let mut worst_step: f64 = 0.0;
    for s in 0..20 {
        let mesh = &meshes[s % meshes.len()];
        let mut prev = StateFields::zeros(mesh.num_nodes());
        for i in mesh.free_nodes() {
            prev.p[i] = -rng.gen_range(0.1..8.0);
            prev.c[i] = rng.gen_range(0.0..1.0);
            prev.theta[i] = rng.gen_range(0.0..3.0);
            prev.r[i] = rng.gen_range(0.0..0.45);
        }
        let h = rng.gen_range(0.005..0.25);
        let a = advance_one_level(mesh, &model, &kmap, &prev, h, &cfg).unwrap();
        let b = brute_force_single_step(mesh, &model, &kmap, &prev, h).unwrap();
        for (u, v) in [(&a.p, &b.p), (&a.c, &b.c), (&a.theta, &b.theta), (&a.r, &b.r)] {
            for (x, y) in u.iter().zip(v) {
                worst_step = worst_step.max((x - y).abs());
            }
        }
    }

    let mesh = build_structured_mesh(4, 4, 1.0, 1.0, SideTags::dirichlet_left()).unwrap();
    let mut mc = MaterialConfig::default();
    mc.coupling.alpha1 = 0.5;
    let jmodel = mc.build().unwrap();
    let jmap = build_kirchhoff_map(&jmodel, -500.0).unwrap();
    let n = mesh.num_nodes();
    let mut worst_jac: f64 = 0.0;
    for _ in 0..50 {
        let mut prev = StateFields::zeros(n);
        let mut trial = vec![0.0; n];
        for i in mesh.free_nodes() {
            prev.p[i] = -rng.gen_range(0.05..20.0);
            prev.c[i] = rng.gen_range(0.0..1.0);
            prev.theta[i] = rng.gen_range(0.0..3.0);
            prev.r[i] = rng.gen_range(0.0..0.45);
            trial[i] = -rng.gen_range(0.05..20.0);
        }
        let h = rng.gen_range(0.005..0.25);
        let step = PressureStep::new(&mesh, &jmodel, &jmap, &prev, h, None).unwrap();
        let (_, jac) = step.residual_and_jacobian(&trial).unwrap();
        let mut scale: f64 = 0.0;
        let mut err: f64 = 0.0;
        for col in mesh.free_nodes() {
            let eps = 1e-6 * trial[col].abs().max(1.0);
            let (mut a, mut b) = (trial.clone(), trial.clone());
            a[col] += eps;
            b[col] -= eps;
            let ra = step.residual(&a).unwrap();
            let rb = step.residual(&b).unwrap();
            for row in 0..n {
                let fd = (ra[row] - rb[row]) / (2.0 * eps);
                let an = jac.get(row, col);
                scale = scale.max(an.abs());
                err = err.max((fd - an).abs());
            }
        }
        worst_jac = worst_jac.max(err / scale);
    }
    Verdict {
        id: 6,
        name: "oracle equivalence",
        pass: worst_step <= 1e-9 && worst_jac <= 1e-5,
        detail: format!("20 tiny scenarios, max |stepper - brute force| {worst_step:.3e}; 50 Jacobians, max relative FD error {worst_jac:.3e}"),
    }
}

fn manufactured() -> (Verdict, Verdict) {
    let scheme = SchemeConfig::default();
    let smooth = run_convergence_study(&ManufacturedCase::smooth(), &[48], &[64, 128], &scheme).unwrap();
    let order = smooth.finest_order().unwrap_or(f64::NAN);
    let constant = run_convergence_study(&ManufacturedCase::constant(), &[16], &[8, 16], &scheme).unwrap();
    let const_err = constant.max_error();
    let c7 = Verdict {
        id: 7,
        name: "manufactured convergence",
        pass: order >= 0.8 && const_err <= 1e-9,
        detail: format!(
            "smooth case mesh 48, n 64 -> 128: orders {:.4?}, min {order:.4}; constant case max error {const_err:.3e}",
            smooth.temporal_orders.last().map(|o| o.1).unwrap_or([f64::NAN; 4])
        ),
    };
    let (a, b) = (&smooth.rows[0].weak_residuals, &smooth.rows[1].weak_residuals);
    let ratios: Vec<f64> = (0..3).map(|k| a[k] / b[k]).collect();
    let worst = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let c9 = Verdict {
        id: 9,
        name: "weak-residual decay",
        pass: worst >= 1.5,
        detail: format!("residual ratio n 64 -> 128 per equation (p, c, theta) {ratios:.4?}"),
    };
    (c7, c9)
}

fn recurrence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut worst_iter = 0;
    let mut failures = 0;
    for _ in 0..1000 {
        // tau = 2 (q - 2) / q for an embedding exponent q > 2
        let tau: f64 = rng.gen_range(0.01..2.0);
        let z0: f64 = 10f64.powf(rng.gen_range(-10.0..10.0));
        let limit = z0.powf(-tau) * 4f64.powf(-1.0 / tau);
        let gamma = limit * rng.gen_range(0.0..=1.0f64).max(1e-6);
        let rec = degiorgi_recurrence(gamma, tau, z0, 200);
        match rec.z.iter().position(|&z| z < 1e-30) {
            Some(j) => worst_iter = worst_iter.max(j),
            None => failures += 1,
        }
    }
    Verdict {
        id: 8,
        name: "level-set recurrence",
        pass: failures == 0,
        detail: format!("1000 samples, {failures} did not reach 1e-30 within 200 steps, slowest took {worst_iter}"),
    }
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let sc = Scenario::bundled("drying_degenerate").unwrap();
    let mut files = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let o = cli_run(
            &sc,
            &RunOptions {
                out: Some(out.clone()),
                n_override: Some(32),
                streaming: false,
            },
        )
        .unwrap();
        assert_eq!(o.code, 0, "{:?}", o.lines);
        files.push((std::fs::read(out.join("trajectory.bin")).unwrap(), std::fs::read(out.join("report.json")).unwrap()));
    }
    let same = files[0] == files[1];
    Verdict {
        id: 10,
        name: "determinism",
        pass: same,
        detail: format!("drying_degenerate n = 32 twice: trajectory {} bytes, report {} bytes, identical = {same}", files[0].0.len(), files[0].1.len()),
    }
}

fn main() {
    let start = Instant::now();
    let drying = Prepared::new(Scenario::bundled("drying_degenerate").unwrap()).unwrap();
    let runs = drying_runs(&drying);
    let c0 = drying.scenario.initial.as_ref().unwrap().c0.abs();

    let trivial = Prepared::new(Scenario::bundled("trivial_zero").unwrap()).unwrap();
    let (trivial_traj, _) = trivial.simulate(&trivial.scenario.scheme(None).unwrap(), None).unwrap();
    let ms = Prepared::new(Scenario::bundled("manufactured_smooth").unwrap()).unwrap();
    let (ms_traj, _) = ms.simulate(&ms.scenario.scheme(None).unwrap(), None).unwrap();

    let (c7, c9) = manufactured();
    let mut verdicts = vec![
        max_principle(&drying, &runs),
        linf_bounds(&runs, c0),
        hydration_rate(&runs, &drying, &[(trivial_traj, &trivial.model), (ms_traj, &ms.model)]),
        energy(&runs),
        translates(&runs),
        oracle(),
        c7,
        recurrence(),
        c9,
        determinism(),
    ];
    verdicts.sort_by_key(|v| v.id);

    let mut unexpected = Vec::new();
    for v in &verdicts {
        let known = KNOWN_FAILURES.contains(&v.id);
        let note = match (v.pass, known) {
            (false, true) => " [known, see decisions ledger]",
            (true, true) => " [listed as known failure but passed]",
            _ => "",
        };
        println!("{} criterion {:>2} {}: {}{note}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name, v.detail);
        if v.pass == known {
            unexpected.push(v.id);
        }
    }
    println!("acceptance suite finished in {:.1?}", start.elapsed());
    if !unexpected.is_empty() {
        eprintln!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
