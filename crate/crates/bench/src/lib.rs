//! Shared fixtures for the benchmarks.

use porohydra::discretization::StateFields;
use porohydra::harness::{Prepared, Scenario};

/// The bundled drying scenario on an `nx` x `nx` mesh.
pub fn drying(nx: usize) -> Prepared {
    let mut sc = Scenario::bundled("drying_degenerate").expect("bundled scenario");
    sc.mesh.nx = Some(nx);
    sc.mesh.ny = Some(nx);
    Prepared::new(sc).expect("drying scenario prepares")
}

pub fn initial_state(prep: &Prepared) -> StateFields {
    let init = prep.scenario.initial_data(&prep.mesh).expect("initial data");
    StateFields {
        level: 0,
        t: 0.0,
        p: init.p0,
        c: init.c0,
        theta: init.theta0,
        r: vec![0.0; prep.mesh.num_nodes()],
    }
}
