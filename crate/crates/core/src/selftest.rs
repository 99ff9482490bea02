//! Fast fixtures with known answers, run by the `selftest` command.

use serde::Serialize;
use serde_json::{json, Value};

use crate::bsde::{solve_state, BsdeOptions};
use crate::chain::{left_limit_state, sample_chain, ChainPath, GeneratorMatrix};
use crate::error::Result;
use crate::forward::{simulate_forward, Brownian, Noise};
use crate::mp::{hamiltonian, CandidateMeans, HamiltonianContext};
use crate::rng::SeedStreams;
use crate::scenario::{
    lq_to_general, spike_overlay, BilinearFamily, ControlModel, ControlSet, FamilyRegime,
    LqCoefficients, LqRegime, Point, SpikeWindow,
};

/// Outcome of one fixture.
#[derive(Debug, Clone, Serialize)]
pub struct Fixture {
    pub name: &'static str,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn fixture(name: &'static str, expected: f64, observed: f64, tolerance: f64) -> Fixture {
    Fixture {
        name,
        expected,
        observed,
        tolerance,
        passed: (observed - expected).abs() <= tolerance,
    }
}

fn lq(r: LqRegime) -> BilinearFamily {
    lq_to_general(&LqCoefficients::uniform(r, 1))
}

fn noise(n: usize, steps: usize, seed: u64) -> Result<Noise> {
    let streams = SeedStreams::new(seed);
    Noise::new(
        ChainPath::constant(1.0, steps, 0)?,
        Brownian::sample(&streams, 0, n, steps, 1.0 / steps as f64),
    )
}

/// Runs every fixture; the verdict is the conjunction.
pub fn fixtures() -> Result<Vec<Fixture>> {
    let mut out = Vec::new();

    let absorbing = GeneratorMatrix::new(vec![vec![0.0, 0.0], vec![0.0, 0.0]])?;
    let path = sample_chain(&absorbing, 1, 1.0, 50, 3)?;
    out.push(fixture(
        "absorbing_chain_jumps",
        0.0,
        path.jump_count() as f64,
        0.0,
    ));

    let path = ChainPath::from_jumps(1.0, 10, vec![0.3, 0.7], vec![0, 2, 1])?;
    out.push(fixture(
        "left_limit_at_jump",
        2.0,
        left_limit_state(&path, 0.7)? as f64,
        0.0,
    ));

    let window = SpikeWindow::single(0.4, 0.1, 1.0, 100)?;
    let set = ControlSet::Finite(vec![0.0, 1.0]);
    let spiked = spike_overlay(
        &ControlModel::constant(set.clone(), 0.0)?,
        &ControlModel::constant(set.clone(), 1.0)?,
        &window,
    );
    out.push(fixture(
        "spike_overlay_inside",
        1.0,
        spiked.eval(0.45, 0.0, 0.0, 0),
        0.0,
    ));
    out.push(fixture(
        "spike_overlay_outside",
        0.0,
        spiked.eval(0.6, 0.0, 0.0, 0),
        0.0,
    ));

    let fam = BilinearFamily::new(
        vec![FamilyRegime {
            a3: 1.0,
            b0: 1.0,
            ..Default::default()
        }],
        10.0,
    )?;
    let ctx = HamiltonianContext {
        base: Point::full(0.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0),
        v: 3.0,
        p0: 2.0,
        p1: 1.0,
        q0: 0.5,
        pp0: 0.0,
        pp1: 0.0,
        means: CandidateMeans { b: 3.0, ds2: 0.0 },
    };
    out.push(fixture(
        "hamiltonian_substitution",
        9.5,
        hamiltonian(&fam, &ctx),
        1e-12,
    ));

    let opts = BsdeOptions::default();
    let free = ControlModel::constant(ControlSet::Finite(vec![-1.0, 0.0, 1.0]), 0.0)?;
    let growth = lq(LqRegime {
        a1: 1.0,
        ..Default::default()
    });
    let nz = noise(16, 200, 1)?;
    let ens = simulate_forward(&growth, &free, 1.0, &nz)?;
    let rel = (ens.x(200)[0] - 1f64.exp()).abs() / 1f64.exp();
    out.push(fixture("linear_ode_relative_error", 0.0, rel, 2.0 / 200.0));

    let running = lq(LqRegime {
        c1: 0.0,
        ..Default::default()
    });
    let traj = solve_state(&running, &free, 0.0, &nz, &opts)?;
    out.push(fixture("zero_cost", 0.0, traj.cost(), 1e-12));

    let variance = lq(LqRegime {
        a3: 1.0,
        b0: 1.0,
        d1: 1.0,
        ..Default::default()
    });
    let traj = solve_state(&variance, &free, 0.0, &noise(20_000, 50, 2)?, &opts)?;
    out.push(fixture("terminal_variance_cost", 1.0, traj.cost(), 0.03));

    Ok(out)
}

/// Verdict and JSON results for the report.
pub fn run_selftest() -> Result<(bool, Value)> {
    let fx = fixtures()?;
    let passed = fx.iter().all(|f| f.passed);
    Ok((passed, json!({ "fixtures": fx })))
}
