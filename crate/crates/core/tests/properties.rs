use std::sync::{Arc, OnceLock};

use porohydra::discretization::{upwind_advection, StateFields};
use porohydra::io::{read_trajectory, write_trajectory};
use porohydra::linalg::Pattern;
use porohydra::{
    advance_one_level, build_kirchhoff_map, build_structured_mesh, default_model, KirchhoffMap, MaterialModel, Mesh, SchemeConfig,
    SideTags, Trajectory,
};
use proptest::prelude::*;

struct Fixture {
    model: MaterialModel,
    kmap: KirchhoffMap,
    mesh: Mesh,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let model = default_model();
        let kmap = build_kirchhoff_map(&model, -1e4).unwrap();
        let mesh = build_structured_mesh(4, 3, 1.0, 0.8, SideTags::dirichlet_left()).unwrap();
        Fixture { model, kmap, mesh }
    })
}

fn state(mesh: &Mesh, vals: &[(f64, f64, f64, f64)]) -> StateFields {
    let mut s = StateFields::zeros(mesh.num_nodes());
    for (k, i) in mesh.free_nodes().into_iter().enumerate() {
        let (p, c, th, r) = vals[k % vals.len()];
        s.p[i] = p;
        s.c[i] = c;
        s.theta[i] = th;
        s.r[i] = r;
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lifted_kirchhoff_map_round_trips(p in -5e3f64..5.0) {
        let k = &fixture().kmap;
        let u = k.lifted(p);
        let back = k.lifted_inv(u);
        prop_assert!((back - p).abs() <= 1e-8 * p.abs().max(1.0), "{p} -> {u} -> {back}");
        prop_assert!(k.lifted(p + 1e-3 * p.abs().max(1.0)) > u);
    }

    #[test]
    fn upwind_advection_is_conservative_with_nonpositive_offdiagonals(
        flux in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 24)
    ) {
        let mesh = &fixture().mesh;
        let pattern = Arc::new(Pattern::for_mesh(mesh));
        let q: Vec<[f64; 2]> = flux.iter().map(|&(a, b)| [a, b]).collect();
        let c = upwind_advection(mesh, &pattern, &q);
        let n = mesh.num_nodes();
        let mut colsum = vec![0.0; n];
        for i in 0..n {
            for (j, v) in c.row_entries(i) {
                colsum[j] += v;
                if i != j {
                    prop_assert!(v <= 1e-14, "({i}, {j}) = {v}");
                }
            }
        }
        prop_assert!(colsum.iter().all(|s| s.abs() < 1e-12), "{colsum:?}");
    }

    #[test]
    fn one_level_respects_the_discrete_bounds(
        vals in prop::collection::vec((-8.0f64..-0.01, 0.0f64..1.0, 0.0f64..2.0, 0.0f64..0.45), 1..6),
        h in 0.01f64..0.3,
    ) {
        let f = fixture();
        let prev = state(&f.mesh, &vals);
        let next = advance_one_level(&f.mesh, &f.model, &f.kmap, &prev, h, &SchemeConfig::default()).unwrap();
        let c_hi = prev.c.iter().cloned().fold(0.0, f64::max);
        let c_f = f.model.constants().c_f;
        for i in 0..f.mesh.num_nodes() {
            prop_assert!(next.c[i] >= -1e-12 && next.c[i] <= c_hi * (1.0 + 1e-10) + 1e-14, "c[{i}] = {}", next.c[i]);
            let rate = (next.r[i] - prev.r[i]) / h;
            prop_assert!(rate >= 0.0 && rate <= c_f * (1.0 + 1e-12), "rate {rate}");
            prop_assert!(next.p[i] <= 1e-12);
            if f.mesh.is_dirichlet(i) {
                prop_assert_eq!(next.p[i], 0.0);
            }
        }
    }

    #[test]
    fn trajectory_files_round_trip(
        levels in 1usize..5,
        nodes in 1usize..9,
        seed in any::<u64>(),
    ) {
        let mut x = seed | 1;
        let mut next = move || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            f64::from_bits(x >> 2)
        };
        let traj = Trajectory {
            h: 0.25,
            t_final: 0.25 * (levels as f64 - 1.0),
            halvings: 0,
            levels: (0..levels)
                .map(|l| StateFields {
                    level: l,
                    t: 0.25 * l as f64,
                    p: (0..nodes).map(|_| next()).collect(),
                    c: (0..nodes).map(|_| next()).collect(),
                    theta: (0..nodes).map(|_| next()).collect(),
                    r: (0..nodes).map(|_| next()).collect(),
                })
                .collect(),
            stats: Vec::new(),
        };
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &traj).unwrap();
        let back = read_trajectory(&buf[..]).unwrap();
        for (a, b) in traj.levels.iter().zip(&back.levels) {
            for (u, v) in [(&a.p, &b.p), (&a.c, &b.c), (&a.theta, &b.theta), (&a.r, &b.r)] {
                prop_assert!(u.iter().zip(v.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
