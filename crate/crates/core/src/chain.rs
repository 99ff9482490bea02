//! Continuous-time Markov chain α(·) on a finite state space.
//!
//! Paths are sampled exactly from exponential holding times and then
//! projected onto the uniform simulation grid. Regimes are 0-based
//! internally; CSV output and scenario files use 1-based labels.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;

/// Generator Λ = (λ_ij) of the regime chain.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    rates: Vec<Vec<f64>>,
}

impl GeneratorMatrix {
    /// Validates off-diagonal non-negativity and zero row sums.
    pub fn new(rates: Vec<Vec<f64>>) -> Result<Self> {
        let n = rates.len();
        if n == 0 {
            return Err(Error::invalid("generator must have at least one state"));
        }
        for (i, row) in rates.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(format!(
                    "generator row {} has {} entries, expected {n}",
                    i + 1,
                    row.len()
                )));
            }
            let mut sum = 0.0;
            for (j, &r) in row.iter().enumerate() {
                if !r.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite rate at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
                if i != j && r < 0.0 {
                    return Err(Error::invalid(format!(
                        "negative off-diagonal rate {r} at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
                sum += r;
            }
            let scale = row.iter().map(|r| r.abs()).fold(1.0, f64::max);
            if sum.abs() > ROW_SUM_TOL * scale {
                return Err(Error::invalid(format!(
                    "row {} sums to {sum}, expected 0",
                    i + 1
                )));
            }
        }
        Ok(Self { rates })
    }

    /// Symmetric two-state generator with switching rate `rate`.
    pub fn two_state(rate: f64) -> Result<Self> {
        Self::new(vec![vec![-rate, rate], vec![rate, -rate]])
    }

    /// Single absorbing state.
    pub fn single() -> Self {
        Self {
            rates: vec![vec![0.0]],
        }
    }

    pub fn size(&self) -> usize {
        self.rates.len()
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates[i][j]
    }

    /// Total exit rate −λ_ii.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.rates[i][i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rates
    }
}

/// A càdlàg regime trajectory on [0, T] together with its grid projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    horizon: f64,
    steps: usize,
    jump_times: Vec<f64>,
    states: Vec<usize>,
    grid: Vec<usize>,
}

impl ChainPath {
    /// Builds a path from explicit jump times and the state on each interval.
    ///
    /// `states[0]` is active on `[0, jump_times[0])`, `states[m]` on
    /// `[jump_times[m-1], jump_times[m])`.
    pub fn from_jumps(
        horizon: f64,
        steps: usize,
        jump_times: Vec<f64>,
        states: Vec<usize>,
    ) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid("horizon must be positive"));
        }
        if steps == 0 {
            return Err(Error::invalid("step count must be positive"));
        }
        if states.len() != jump_times.len() + 1 {
            return Err(Error::invalid(
                "need exactly one more state than jump times",
            ));
        }
        let mut prev = 0.0;
        for &t in &jump_times {
            if !(t > prev) || t > horizon {
                return Err(Error::invalid(
                    "jump times must be increasing within (0, T]",
                ));
            }
            prev = t;
        }
        let mut path = Self {
            horizon,
            steps,
            jump_times,
            states,
            grid: Vec::new(),
        };
        path.grid = (0..=steps)
            .map(|k| {
                if k == 0 {
                    path.states[0]
                } else {
                    path.left_limit_index(path.node(k))
                }
            })
            .collect();
        Ok(path)
    }

    /// Path that never leaves `state`.
    pub fn constant(horizon: f64, steps: usize, state: usize) -> Result<Self> {
        Self::from_jumps(horizon, steps, Vec::new(), vec![state])
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Grid node t_k.
    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn jump_count(&self) -> usize {
        self.jump_times.len()
    }

    pub fn initial_state(&self) -> usize {
        self.states[0]
    }

    fn left_limit_index(&self, t: f64) -> usize {
        let idx = self.jump_times.partition_point(|&s| s < t);
        self.states[idx]
    }

    /// Right-continuous value α(t).
    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.jump_times.partition_point(|&s| s <= t);
        self.states[idx]
    }

    /// Regime used by coefficients on step k: α(t_k−), with α(0−) = α(0).
    pub fn step_regime(&self, k: usize) -> usize {
        self.grid[k]
    }

    /// Regime at the horizon, used by the terminal cost.
    pub fn terminal_state(&self) -> usize {
        self.state_at(self.horizon)
    }

    /// Grid projection α(t_k−) for k = 0..=steps.
    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    /// Smallest gap between consecutive jumps (including 0 and T as endpoints).
    pub fn min_gap(&self) -> f64 {
        let mut prev = 0.0;
        let mut gap = f64::INFINITY;
        for &t in self.jump_times.iter().chain(std::iter::once(&self.horizon)) {
            gap = gap.min(t - prev);
            prev = t;
        }
        gap
    }

    /// Writes `(t_k, state)` rows with 1-based state labels.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t_k,state")?;
        for k in 0..=self.steps {
            writeln!(w, "{},{}", self.node(k), self.grid[k] + 1)?;
        }
        Ok(())
    }
}

/// State active immediately before `t`.
pub fn left_limit_state(path: &ChainPath, t: f64) -> Result<usize> {
    if !(t > 0.0 && t <= path.horizon) {
        return Err(Error::invalid(format!(
            "time {t} outside (0, {}]",
            path.horizon
        )));
    }
    Ok(path.left_limit_index(t))
}

/// Samples an exact chain path started at `initial` and projects it onto a
/// grid with `steps` intervals.
pub fn sample_chain(
    gen: &GeneratorMatrix,
    initial: usize,
    horizon: f64,
    steps: usize,
    seed: u64,
) -> Result<ChainPath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_chain_with(gen, initial, horizon, steps, &mut rng)
}

/// Same as [`sample_chain`] but draws from a caller-supplied generator.
pub fn sample_chain_with<R: Rng + ?Sized>(
    gen: &GeneratorMatrix,
    initial: usize,
    horizon: f64,
    steps: usize,
    rng: &mut R,
) -> Result<ChainPath> {
    if !(horizon > 0.0) {
        return Err(Error::invalid("horizon must be positive"));
    }
    if initial >= gen.size() {
        return Err(Error::invalid(format!(
            "initial regime {} outside 1..={}",
            initial + 1,
            gen.size()
        )));
    }
    let mut t = 0.0;
    let mut state = initial;
    let mut jumps = Vec::new();
    let mut states = vec![initial];
    loop {
        let rate = gen.exit_rate(state);
        if rate <= 0.0 {
            break;
        }
        let hold = Exp::new(rate)
            .map_err(|e| Error::invalid(format!("exit rate {rate}: {e}")))?
            .sample(rng);
        t += hold;
        if t >= horizon {
            break;
        }
        let u: f64 = rng.random::<f64>() * rate;
        let mut acc = 0.0;
        let mut next = state;
        for j in 0..gen.size() {
            if j == state {
                continue;
            }
            acc += gen.rate(state, j);
            next = j;
            if u < acc {
                break;
            }
        }
        state = next;
        jumps.push(t);
        states.push(state);
    }
    ChainPath::from_jumps(horizon, steps, jumps, states)
}

/// Transition counts n_ij and occupation times τ_i aggregated over paths.
#[derive(Debug, Clone)]
pub struct TransitionStatistics {
    pub counts: Vec<Vec<f64>>,
    pub occupation: Vec<f64>,
}

impl TransitionStatistics {
    pub fn collect(paths: &[ChainPath], size: usize) -> Self {
        let mut counts = vec![vec![0.0; size]; size];
        let mut occupation = vec![0.0; size];
        for p in paths {
            let mut prev = 0.0;
            for (m, &s) in p.states.iter().enumerate() {
                let end = if m < p.jump_times.len() {
                    p.jump_times[m]
                } else {
                    p.horizon
                };
                occupation[s] += end - prev;
                prev = end;
                if m + 1 < p.states.len() {
                    counts[s][p.states[m + 1]] += 1.0;
                }
            }
        }
        Self { counts, occupation }
    }

    /// Maximum-likelihood estimate λ̂_ij = n_ij / τ_i.
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        if self.occupation[i] > 0.0 {
            self.counts[i][j] / self.occupation[i]
        } else {
            0.0
        }
    }

    /// Poisson standard error of λ̂_ij.
    pub fn rate_se(&self, i: usize, j: usize) -> f64 {
        if self.occupation[i] > 0.0 {
            self.counts[i][j].max(1.0).sqrt() / self.occupation[i]
        } else {
            f64::INFINITY
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_generators() {
        assert!(GeneratorMatrix::new(vec![vec![-1.0, 1.0], vec![-0.5, 0.5]]).is_err());
        assert!(GeneratorMatrix::new(vec![vec![-1.0, 0.5], vec![1.0, -1.0]]).is_err());
        assert!(GeneratorMatrix::new(vec![vec![-1.0, 1.0]]).is_err());
        assert!(GeneratorMatrix::new(vec![]).is_err());
        assert!(GeneratorMatrix::two_state(2.0).is_ok());
    }

    #[test]
    fn zero_generator_gives_constant_path() {
        let gen = GeneratorMatrix::new(vec![vec![0.0; 3]; 3]).unwrap();
        for seed in 0..20 {
            let p = sample_chain(&gen, 1, 1.0, 10, seed).unwrap();
            assert_eq!(p.jump_count(), 0);
            assert!(p.grid().iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn single_regime_is_constant() {
        let p = sample_chain(&GeneratorMatrix::single(), 0, 2.0, 8, 9).unwrap();
        assert_eq!(p.jump_count(), 0);
        assert!(p.grid().iter().all(|&s| s == 0));
    }

    #[test]
    fn left_limit_examples() {
        let c = ChainPath::constant(1.0, 10, 1).unwrap();
        assert_eq!(left_limit_state(&c, 0.5).unwrap(), 1);

        let j = ChainPath::from_jumps(1.0, 10, vec![0.5], vec![0, 1]).unwrap();
        assert_eq!(left_limit_state(&j, 0.5).unwrap(), 0);
        assert_eq!(j.state_at(0.5), 1);

        let p = ChainPath::from_jumps(1.0, 10, vec![0.3, 0.7], vec![0, 2, 1]).unwrap();
        assert_eq!(left_limit_state(&p, 0.7).unwrap(), 2);
        assert_eq!(left_limit_state(&p, 0.3).unwrap(), 0);
        assert_eq!(left_limit_state(&p, 1.0).unwrap(), 1);

        assert!(left_limit_state(&p, 0.0).is_err());
        assert!(left_limit_state(&p, 1.5).is_err());
    }

    #[test]
    fn grid_tie_assigns_new_state_to_next_interval() {
        // Jump exactly on node t_5 = 0.5: step 5 still uses the old state,
        // step 6 uses the new one.
        let p = ChainPath::from_jumps(1.0, 10, vec![0.5], vec![0, 1]).unwrap();
        assert_eq!(p.step_regime(5), 0);
        assert_eq!(p.step_regime(6), 1);
        assert_eq!(p.terminal_state(), 1);
    }

    #[test]
    fn csv_uses_one_based_labels() {
        let p = ChainPath::from_jumps(1.0, 2, vec![0.25], vec![0, 1]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t_k,state\n0,1\n0.5,2\n1,2\n"
        );
    }
}
