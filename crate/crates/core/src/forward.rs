//! Interacting particle approximation of the conditional mean-field SDE.
//!
//! All particles share one chain path, so the conditional expectation given
//! the chain history is the cross-particle mean at each step.

use std::io::Write;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::chain::ChainPath;
use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedStreams};
use crate::scenario::{Coefficients, ControlModel, Point};
use crate::stats;

/// Particles per rayon work item; fixed so reductions do not depend on the
/// thread count.
pub(crate) const CHUNK: usize = 1024;

/// Per-particle Brownian increments ΔW^i_k with variance Δt.
#[derive(Debug, Clone, PartialEq)]
pub struct Brownian {
    n: usize,
    steps: usize,
    dt: f64,
    dw: Vec<f64>,
}

impl Brownian {
    /// Particle i draws its whole path from stream (Brownian, scenario·2³² + i),
    /// so the first N paths do not change when N grows.
    pub fn sample(streams: &SeedStreams, scenario: u64, n: usize, steps: usize, dt: f64) -> Self {
        let sd = dt.sqrt();
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = streams.rng(Purpose::Brownian, (scenario << 32) | i as u64);
                (0..steps)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * sd
                    })
                    .collect()
            })
            .collect();
        let mut dw = vec![0.0; n * steps];
        for (i, col) in cols.iter().enumerate() {
            for k in 0..steps {
                dw[k * n + i] = col[k];
            }
        }
        Self { n, steps, dt, dw }
    }

    /// Wraps explicit increments laid out as `dw[k * n + i]`.
    pub fn from_increments(n: usize, steps: usize, dt: f64, dw: Vec<f64>) -> Result<Self> {
        if dw.len() != n * steps {
            return Err(Error::invalid("increment array has the wrong length"));
        }
        Ok(Self { n, steps, dt, dw })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Increments of step k for all particles.
    pub fn step(&self, k: usize) -> &[f64] {
        &self.dw[k * self.n..(k + 1) * self.n]
    }
}

/// Common noise of one chain scenario: a chain path and Brownian increments.
#[derive(Debug, Clone)]
pub struct Noise {
    pub chain: ChainPath,
    pub brownian: Arc<Brownian>,
}

impl Noise {
    pub fn new(chain: ChainPath, brownian: Brownian) -> Result<Self> {
        if chain.steps() != brownian.steps() {
            return Err(Error::invalid("chain grid and Brownian grid disagree"));
        }
        if (chain.dt() - brownian.dt()).abs() > 1e-12 * chain.dt() {
            return Err(Error::invalid("chain and Brownian step sizes disagree"));
        }
        Ok(Self {
            chain,
            brownian: Arc::new(brownian),
        })
    }

    pub fn n(&self) -> usize {
        self.brownian.n()
    }
}

/// N coupled forward paths sharing one chain path.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    n: usize,
    chain: ChainPath,
    brownian: Arc<Brownian>,
    x: Vec<f64>,
    xhat: Vec<f64>,
    v: Vec<f64>,
}

impl ParticleEnsemble {
    /// Assembles an ensemble from precomputed paths (`x` has steps + 1 rows,
    /// `v` has steps rows, both laid out as `[k * n + i]`).
    pub fn from_paths(noise: &Noise, x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let n = noise.n();
        let steps = noise.chain.steps();
        if x.len() != (steps + 1) * n || v.len() != steps * n {
            return Err(Error::invalid("path arrays have the wrong length"));
        }
        let xhat = (0..=steps)
            .map(|k| stats::mean(&x[k * n..(k + 1) * n]))
            .collect();
        Ok(Self {
            n,
            chain: noise.chain.clone(),
            brownian: noise.brownian.clone(),
            x,
            xhat,
            v,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.chain.steps()
    }

    pub fn dt(&self) -> f64 {
        self.chain.dt()
    }

    pub fn horizon(&self) -> f64 {
        self.chain.horizon()
    }

    pub fn node(&self, k: usize) -> f64 {
        self.chain.node(k)
    }

    pub fn chain(&self) -> &ChainPath {
        &self.chain
    }

    pub fn brownian(&self) -> &Arc<Brownian> {
        &self.brownian
    }

    /// States X^i_k of step k.
    pub fn x(&self, k: usize) -> &[f64] {
        &self.x[k * self.n..(k + 1) * self.n]
    }

    pub fn x_all(&self) -> &[f64] {
        &self.x
    }

    /// Cross-particle mean X̂_k.
    pub fn xhat(&self, k: usize) -> f64 {
        self.xhat[k]
    }

    /// Controls v^i_k used on step k.
    pub fn v(&self, k: usize) -> &[f64] {
        &self.v[k * self.n..(k + 1) * self.n]
    }

    pub fn dw(&self, k: usize) -> &[f64] {
        self.brownian.step(k)
    }

    /// Regime α(t_k−) used on step k.
    pub fn regime(&self, k: usize) -> usize {
        self.chain.step_regime(k)
    }

    pub fn terminal_regime(&self) -> usize {
        self.chain.terminal_state()
    }

    /// Coefficient evaluation point of particle i at step k (y = z = 0).
    pub fn point(&self, k: usize, i: usize) -> Point {
        let v = if k < self.steps() {
            self.v(k)[i]
        } else {
            self.v(k - 1)[i]
        };
        let regime = if k < self.steps() {
            self.regime(k)
        } else {
            self.terminal_regime()
        };
        Point::state(self.node(k), self.x(k)[i], self.xhat[k], v, regime)
    }

    /// Writes `(t_k, X̂_k, std, min, max)` rows.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t_k,xhat,std,min,max")?;
        for k in 0..=self.steps() {
            let xs = self.x(k);
            let (lo, hi) = stats::min_max(xs);
            writeln!(
                w,
                "{},{},{},{},{}",
                self.node(k),
                self.xhat[k],
                stats::std_dev(xs),
                lo,
                hi
            )?;
        }
        Ok(())
    }

    /// Writes every particle path in long format `(t_k, particle, x, v)`.
    pub fn write_paths_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t_k,particle,x,v")?;
        for k in 0..=self.steps() {
            for i in 0..self.n {
                let v = if k < self.steps() {
                    self.v(k)[i]
                } else {
                    f64::NAN
                };
                writeln!(w, "{},{},{},{}", self.node(k), i, self.x(k)[i], v)?;
            }
        }
        Ok(())
    }
}

/// Euler–Maruyama step of the particle system on a given noise.
pub fn simulate_forward(
    coeffs: &dyn Coefficients,
    control: &ControlModel,
    x0: f64,
    noise: &Noise,
) -> Result<ParticleEnsemble> {
    let n = noise.n();
    if n < 2 {
        return Err(Error::invalid("need at least 2 particles"));
    }
    let chain = &noise.chain;
    let steps = chain.steps();
    let dt = chain.dt();
    let mut x = vec![0.0; (steps + 1) * n];
    let mut v = vec![0.0; steps * n];
    let mut xhat = vec![0.0; steps + 1];
    x[..n].fill(x0);
    for k in 0..steps {
        let (head, tail) = x.split_at_mut((k + 1) * n);
        let cur = &head[k * n..];
        let next = &mut tail[..n];
        let m = stats::mean(cur);
        xhat[k] = m;
        let t = chain.node(k);
        let regime = chain.step_regime(k);
        let dw = noise.brownian.step(k);
        let vk = &mut v[k * n..(k + 1) * n];
        next.par_chunks_mut(CHUNK)
            .zip(vk.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(c, (nx, nv))| {
                for j in 0..nx.len() {
                    let i = c * CHUNK + j;
                    let xi = cur[i];
                    let vi = control.eval(t, xi, m, regime);
                    let p = Point::state(t, xi, m, vi, regime);
                    nv[j] = vi;
                    nx[j] = xi + coeffs.b(&p) * dt + coeffs.sigma(&p) * dw[i];
                }
            });
        if let Some(bad) = next.iter().position(|x| !x.is_finite()) {
            return Err(Error::numerical(
                k + 1,
                format!("non-finite state for particle {bad}"),
            ));
        }
    }
    xhat[steps] = stats::mean(&x[steps * n..]);
    Ok(ParticleEnsemble {
        n,
        chain: chain.clone(),
        brownian: noise.brownian.clone(),
        x,
        xhat,
        v,
    })
}

/// Convenience form drawing fresh Brownian increments from `seed`.
pub fn simulate_forward_seeded(
    coeffs: &dyn Coefficients,
    control: &ControlModel,
    x0: f64,
    chain: &ChainPath,
    n: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    let brownian = Brownian::sample(&SeedStreams::new(seed), 0, n, chain.steps(), chain.dt());
    simulate_forward(coeffs, control, x0, &Noise::new(chain.clone(), brownian)?)
}

/// X̂_k, the empirical conditional mean at step k.
pub fn conditional_mean(ensemble: &ParticleEnsemble, k: usize) -> Result<f64> {
    if k > ensemble.steps() {
        return Err(Error::invalid(format!(
            "step {k} outside 0..={}",
            ensemble.steps()
        )));
    }
    Ok(ensemble.xhat(k))
}

/// Empirical E[sup_k |X_k|^β] for β in [2, 8].
pub fn moment_probe(ensemble: &ParticleEnsemble, beta: f64) -> Result<f64> {
    if !(2.0..=8.0).contains(&beta) {
        return Err(Error::invalid(format!(
            "moment exponent {beta} outside [2, 8]"
        )));
    }
    let n = ensemble.n();
    let sups: Vec<f64> = (0..n)
        .map(|i| {
            (0..=ensemble.steps())
                .map(|k| ensemble.x(k)[i].abs())
                .fold(0.0, f64::max)
                .powf(beta)
        })
        .collect();
    Ok(stats::mean(&sups))
}

/// sup_k of the empirical E|v_k|^p, the admissibility moment of the control.
pub fn control_moment(ensemble: &ParticleEnsemble, p: f64) -> f64 {
    (0..ensemble.steps())
        .map(|k| {
            stats::mean(
                &ensemble
                    .v(k)
                    .iter()
                    .map(|v| v.abs().powf(p))
                    .collect::<Vec<_>>(),
            )
        })
        .fold(0.0, f64::max)
}
