//! Shared fixtures for unit tests.

use crate::bsde::{solve_state, BsdeOptions, Trajectory};
use crate::chain::{sample_chain, ChainPath, GeneratorMatrix};
use crate::forward::{Brownian, Noise};
use crate::rng::{Purpose, SeedStreams};
use crate::scenario::{Coefficients, ControlModel, ControlSet, LqRegime};

pub fn noise(n: usize, steps: usize, seed: u64) -> Noise {
    let chain = ChainPath::constant(1.0, steps, 0).unwrap();
    let bw = Brownian::sample(&SeedStreams::new(seed), 0, n, steps, chain.dt());
    Noise::new(chain, bw).unwrap()
}

pub fn switching_noise(n: usize, steps: usize, seed: u64) -> Noise {
    let s = SeedStreams::new(seed);
    let gen = GeneratorMatrix::two_state(1.0).unwrap();
    let chain = sample_chain(&gen, 0, 1.0, steps, s.seed(Purpose::Chain, 0)).unwrap();
    let bw = Brownian::sample(&s, 0, n, steps, chain.dt());
    Noise::new(chain, bw).unwrap()
}

pub fn grid() -> ControlSet {
    ControlSet::Finite(vec![-1.0, -0.5, 0.0, 0.5, 1.0])
}

pub fn constant(v: f64) -> ControlModel {
    ControlModel::constant(grid(), v).unwrap()
}

/// Two-regime LQ data whose optimum over constant controls is v ≡ 0.
pub fn lq_demo_regimes() -> Vec<LqRegime> {
    let r = |b0: f64, c1: f64| LqRegime {
        a3: 1.0,
        b0,
        b3: 1.0,
        c1,
        c4: -1.0,
        c5: -b0,
        d1: 0.5,
        d2: 1.0,
        ..Default::default()
    };
    vec![r(0.4, 0.5), r(0.6, -0.3)]
}

pub fn trajectory(c: &dyn Coefficients, v: f64, noise: &Noise) -> Trajectory {
    solve_state(c, &constant(v), 0.0, noise, &BsdeOptions::default()).unwrap()
}
