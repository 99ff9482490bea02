//! Least-squares regression solver for (multi-dimensional) backward SDEs on
//! a particle ensemble.
//!
//! All particles of an ensemble share one chain path, so within a step the
//! conditional-mean and regime features are constants. They stay in the basis
//! description but are removed by the pivoted factorization together with
//! any other column that is constant or collinear at that step.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{simulate_forward, Brownian, Noise, ParticleEnsemble, CHUNK};
use crate::scenario::{Coefficients, ControlModel, Point};
use crate::stats;

/// Feature map of the regression.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionBasis {
    /// Polynomial degree in the primary state X.
    pub degree: usize,
    /// Powers of X̂ included.
    pub xhat_degree: usize,
    /// Include the X·X̂ interaction.
    pub interaction: bool,
    /// Include regime indicator columns.
    pub regime_intercepts: bool,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 3,
            xhat_degree: 2,
            interaction: true,
            regime_intercepts: true,
        }
    }
}

impl RegressionBasis {
    pub fn describe(&self, extras: usize) -> String {
        format!(
            "1, x^1..x^{}, xhat^1..xhat^{}{}{}; {} extra state column(s) with s*x^a (a<=2), s*s'*x^a (a<=1)",
            self.degree,
            self.xhat_degree,
            if self.interaction { ", x*xhat" } else { "" },
            if self.regime_intercepts { ", regime indicators" } else { "" },
            extras
        )
    }

    /// Non-intercept columns of one step.
    fn columns(&self, f: &StepFeatures) -> Vec<Vec<f64>> {
        let n = f.x.len();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut xp: Vec<Vec<f64>> = vec![vec![1.0; n]];
        for a in 1..=self.degree.max(2) {
            let prev = &xp[a - 1];
            xp.push(prev.iter().zip(f.x).map(|(p, x)| p * x).collect());
        }
        for col in xp.iter().take(self.degree + 1).skip(1) {
            cols.push(col.clone());
        }
        for a in 1..=self.xhat_degree {
            cols.push(vec![f.xhat.powi(a as i32); n]);
        }
        if self.interaction {
            cols.push(f.x.iter().map(|x| x * f.xhat).collect());
        }
        if self.regime_intercepts {
            for r in 1..f.regimes {
                cols.push(vec![if f.regime == r { 1.0 } else { 0.0 }; n]);
            }
        }
        for (j, s) in f.extras.iter().enumerate() {
            for col in xp.iter().take(3) {
                cols.push(s.iter().zip(col).map(|(s, c)| s * c).collect());
            }
            for s2 in &f.extras[j..] {
                for col in xp.iter().take(2) {
                    cols.push(
                        s.iter()
                            .zip(*s2)
                            .zip(col)
                            .map(|((a, b), c)| a * b * c)
                            .collect(),
                    );
                }
            }
        }
        cols
    }
}

/// Regression inputs of one step.
pub struct StepFeatures<'a> {
    pub x: &'a [f64],
    pub xhat: f64,
    pub regime: usize,
    pub regimes: usize,
    pub extras: Vec<&'a [f64]>,
}

/// Per-step state used as regression features: a primary state path and
/// optional extra state paths, all laid out as `[k * n + i]`.
#[derive(Clone)]
pub struct FeatureSet<'a> {
    pub ensemble: &'a ParticleEnsemble,
    pub primary: &'a [f64],
    pub extras: Vec<&'a [f64]>,
    pub regimes: usize,
}

impl<'a> FeatureSet<'a> {
    /// Features from the ensemble's own state.
    pub fn of(ensemble: &'a ParticleEnsemble, regimes: usize) -> Self {
        Self {
            ensemble,
            primary: ensemble.x_all(),
            extras: Vec::new(),
            regimes,
        }
    }

    pub fn with_extra(mut self, path: &'a [f64]) -> Self {
        self.extras.push(path);
        self
    }

    fn step(&self, k: usize) -> StepFeatures<'_> {
        let n = self.ensemble.n();
        StepFeatures {
            x: &self.primary[k * n..(k + 1) * n],
            xhat: self.ensemble.xhat(k),
            regime: self.ensemble.regime(k),
            regimes: self.regimes,
            extras: self.extras.iter().map(|e| &e[k * n..(k + 1) * n]).collect(),
        }
    }
}

/// Solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BsdeOptions {
    pub basis: RegressionBasis,
    /// Picard sweeps on the implicit Y.
    pub picard: usize,
    /// Ridge factor, multiplied by trace/p of the correlation Gram matrix.
    pub ridge: f64,
    /// Columns whose residual pivot falls below this are dropped.
    pub pivot_tol: f64,
    /// Abort when the retained Gram matrix is worse conditioned than this.
    pub max_condition: f64,
    /// Subtract Z_k ΔW_k from the Y regression target.
    pub martingale_control: bool,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::default(),
            picard: 2,
            ridge: 1e-8,
            pivot_tol: 1e-7,
            max_condition: 1e12,
            martingale_control: true,
        }
    }
}

/// Per-step regression diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub condition: f64,
    pub kept: usize,
    pub dropped: usize,
}

/// Standardized design matrix with a pivoted Cholesky factor of its Gram.
pub struct Design {
    n: usize,
    p: usize,
    /// Row-major n × p, centered and scaled retained columns.
    rows: Vec<f64>,
    chol: Vec<f64>,
    pub diagnostics: StepDiagnostics,
}

fn chunked_sum<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let parts: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

impl Design {
    pub fn new(cols: Vec<Vec<f64>>, n: usize, opts: &BsdeOptions, step: usize) -> Result<Self> {
        let total = cols.len();
        let mut kept_cols: Vec<Vec<f64>> = Vec::new();
        for col in cols {
            let m = stats::mean(&col);
            let var = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / n as f64;
            let scale = 1.0 + m.abs();
            if !var.is_finite() {
                return Err(Error::numerical(step, "non-finite regression feature"));
            }
            if var.sqrt() <= 1e-12 * scale {
                continue;
            }
            let s = var.sqrt();
            kept_cols.push(col.iter().map(|c| (c - m) / s).collect());
        }
        let p0 = kept_cols.len();
        let mut rows = vec![0.0; n * p0];
        for (j, col) in kept_cols.iter().enumerate() {
            for i in 0..n {
                rows[i * p0 + j] = col[i];
            }
        }
        let gram_flat = chunked_sum(n, p0 * p0, |i, acc| {
            let r = &rows[i * p0..(i + 1) * p0];
            for a in 0..p0 {
                let ra = r[a];
                for b in a..p0 {
                    acc[a * p0 + b] += ra * r[b];
                }
            }
        });
        let mut gram = vec![0.0; p0 * p0];
        for a in 0..p0 {
            for b in a..p0 {
                let g = gram_flat[a * p0 + b] / n as f64;
                gram[a * p0 + b] = g;
                gram[b * p0 + a] = g;
            }
        }
        let trace: f64 = (0..p0).map(|a| gram[a * p0 + a]).sum();
        let ridge = if p0 > 0 {
            opts.ridge * trace / p0 as f64
        } else {
            0.0
        };
        for a in 0..p0 {
            gram[a * p0 + a] += ridge;
        }
        let order = pivot_order(&gram, p0, opts.pivot_tol);
        let p = order.len();
        let mut sub = vec![0.0; p * p];
        for (a, &ia) in order.iter().enumerate() {
            for (b, &ib) in order.iter().enumerate() {
                sub[a * p + b] = gram[ia * p0 + ib];
            }
        }
        let condition = if p == 0 {
            1.0
        } else {
            let eig = SymmetricEigen::new(DMatrix::from_row_slice(p, p, &sub)).eigenvalues;
            let (lo, hi) = stats::min_max(eig.as_slice());
            if lo > 0.0 {
                hi / lo
            } else {
                f64::INFINITY
            }
        };
        if !(condition <= opts.max_condition) {
            return Err(Error::numerical(
                step,
                format!(
                    "regression rank-deficient beyond ridge rescue (condition {condition:.3e})"
                ),
            ));
        }
        let chol =
            cholesky(&sub, p).ok_or_else(|| Error::numerical(step, "Gram factorization failed"))?;
        let mut packed = vec![0.0; n * p];
        for i in 0..n {
            for (a, &ia) in order.iter().enumerate() {
                packed[i * p + a] = rows[i * p0 + ia];
            }
        }
        Ok(Self {
            n,
            p,
            rows: packed,
            chol,
            diagnostics: StepDiagnostics {
                condition,
                kept: p + 1,
                dropped: total - p,
            },
        })
    }

    /// Fitted values of the least-squares projection of `y` (intercept unpenalized).
    pub fn fit(&self, y: &[f64], out: &mut [f64]) {
        let n = self.n;
        let p = self.p;
        let m = stats::mean(y);
        if p == 0 {
            out.fill(m);
            return;
        }
        let rhs = chunked_sum(n, p, |i, acc| {
            let d = y[i] - m;
            let r = &self.rows[i * p..(i + 1) * p];
            for a in 0..p {
                acc[a] += r[a] * d;
            }
        });
        let rhs: Vec<f64> = rhs.iter().map(|v| v / n as f64).collect();
        let beta = cholesky_solve(&self.chol, p, &rhs);
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, o)| {
            for (j, slot) in o.iter_mut().enumerate() {
                let i = c * CHUNK + j;
                let r = &self.rows[i * p..(i + 1) * p];
                *slot = m + r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
            }
        });
    }
}

/// Greedy diagonal pivoting; columns whose residual variance falls below
/// `tol` are left out.
fn pivot_order(g: &[f64], p: usize, tol: f64) -> Vec<usize> {
    let mut a = g.to_vec();
    let mut remaining: Vec<usize> = (0..p).collect();
    let mut order = Vec::new();
    let mut l = vec![0.0; p * p];
    while !remaining.is_empty() {
        let (pos, &best) = remaining
            .iter()
            .enumerate()
            .max_by(|x, y| {
                a[*x.1 * p + *x.1]
                    .total_cmp(&a[*y.1 * p + *y.1])
                    .then(y.1.cmp(x.1))
            })
            .unwrap();
        let d = a[best * p + best];
        if d <= tol {
            break;
        }
        remaining.remove(pos);
        let col = order.len();
        let sd = d.sqrt();
        for &r in &remaining {
            l[r * p + col] = a[r * p + best] / sd;
        }
        for &r in &remaining {
            for &s in &remaining {
                a[r * p + s] -= l[r * p + col] * l[s * p + col];
            }
        }
        order.push(best);
    }
    order
}

fn cholesky(a: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..p {
        for k in 0..i {
            y[i] -= l[i * p + k] * y[k];
        }
        y[i] /= l[i * p + i];
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            y[i] -= l[k * p + i] * y[k];
        }
        y[i] /= l[i * p + i];
    }
    y
}

/// Per-particle solution paths of a d-dimensional BSDE.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    dim: usize,
    n: usize,
    steps: usize,
    dt: f64,
    y: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub basis: String,
}

impl BackwardSolution {
    /// Solution that vanishes identically.
    pub fn zeros(dim: usize, n: usize, steps: usize, dt: f64) -> Self {
        Self {
            dim,
            n,
            steps,
            dt,
            y: vec![vec![0.0; (steps + 1) * n]; dim],
            z: vec![vec![0.0; steps * n]; dim],
            diagnostics: Vec::new(),
            basis: String::from("none"),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
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

    /// Component c of Y at step k.
    pub fn y(&self, c: usize, k: usize) -> &[f64] {
        &self.y[c][k * self.n..(k + 1) * self.n]
    }

    /// Component c of Z on step k (k < steps).
    pub fn z(&self, c: usize, k: usize) -> &[f64] {
        &self.z[c][k * self.n..(k + 1) * self.n]
    }

    pub fn y_all(&self, c: usize) -> &[f64] {
        &self.y[c]
    }

    pub fn z_all(&self, c: usize) -> &[f64] {
        &self.z[c]
    }

    /// Cross-particle mean of component c at time 0.
    pub fn y0(&self, c: usize) -> f64 {
        stats::mean(self.y(c, 0))
    }

    /// Writes `(t_k, mean Y, std Y, mean Z, std Z, condition)` for component c.
    pub fn write_summary_csv<W: Write>(&self, c: usize, mut w: W) -> Result<()> {
        writeln!(w, "t_k,mean_y,std_y,mean_z,std_z,condition")?;
        for k in 0..=self.steps {
            let y = self.y(c, k);
            let (mz, sz, cond) = if k < self.steps {
                let z = self.z(c, k);
                let cond = self.diagnostics.get(k).map_or(f64::NAN, |d| d.condition);
                (stats::mean(z), stats::std_dev(z), cond)
            } else {
                (f64::NAN, f64::NAN, f64::NAN)
            };
            writeln!(
                w,
                "{},{},{},{},{},{}",
                k as f64 * self.dt,
                stats::mean(y),
                stats::std_dev(y),
                mz,
                sz,
                cond
            )?;
        }
        Ok(())
    }
}

/// Driver evaluated per particle: `(k, i, y, z, out)`.
pub trait Driver: Sync {
    fn eval(&self, k: usize, i: usize, y: &[f64], z: &[f64], out: &mut [f64]);
}

impl<F> Driver for F
where
    F: Fn(usize, usize, &[f64], &[f64], &mut [f64]) + Sync,
{
    fn eval(&self, k: usize, i: usize, y: &[f64], z: &[f64], out: &mut [f64]) {
        self(k, i, y, z, out)
    }
}

/// Backward regression recursion.
///
/// Z_k = E_k[(Y_{k+1} − E_k Y_{k+1}) ΔW_k] / Δt, then Y_k = E_k[Y_{k+1} + f Δt]
/// with f evaluated at the current Y iterate, starting from E_k Y_{k+1}.
pub fn solve_bsde(
    features: &FeatureSet,
    brownian: &Brownian,
    terminal: &[Vec<f64>],
    driver: &dyn Driver,
    opts: &BsdeOptions,
) -> Result<BackwardSolution> {
    let dim = terminal.len();
    let n = features.ensemble.n();
    let steps = features.ensemble.steps();
    let dt = features.ensemble.dt();
    if dim == 0 || terminal.iter().any(|t| t.len() != n) {
        return Err(Error::invalid(
            "terminal values must have one entry per particle",
        ));
    }
    if let Some(c) = terminal
        .iter()
        .position(|t| t.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::numerical(
            steps,
            format!("non-finite terminal value in component {c}"),
        ));
    }
    let mut y = vec![vec![0.0; (steps + 1) * n]; dim];
    let mut z = vec![vec![0.0; steps * n]; dim];
    for c in 0..dim {
        y[c][steps * n..].copy_from_slice(&terminal[c]);
    }
    let mut diagnostics = vec![
        StepDiagnostics {
            condition: f64::NAN,
            kept: 0,
            dropped: 0
        };
        steps
    ];
    let mut fit0 = vec![vec![0.0; n]; dim];
    let mut cur = vec![vec![0.0; n]; dim];
    let mut mart = vec![vec![0.0; n]; dim];
    let mut target = vec![0.0; n];
    let mut drv = vec![0.0; dim * n];
    for k in (0..steps).rev() {
        let step = features.step(k);
        let design = Design::new(opts.basis.columns(&step), n, opts, k)?;
        diagnostics[k] = design.diagnostics;
        let dw = brownian.step(k);
        let (mut head, tail) = split(&mut y, k, n);
        for c in 0..dim {
            let next = &tail[c];
            design.fit(next, &mut fit0[c]);
            for i in 0..n {
                target[i] = (next[i] - fit0[c][i]) * dw[i] / dt;
            }
            design.fit(&target, &mut z[c][k * n..(k + 1) * n]);
            if opts.martingale_control {
                let zk = &z[c][k * n..(k + 1) * n];
                let mc = &mut mart[c];
                for i in 0..n {
                    mc[i] = next[i] - zk[i] * dw[i];
                }
                design.fit(mc, &mut cur[c]);
            } else {
                mart[c].copy_from_slice(next);
                cur[c].copy_from_slice(&fit0[c]);
            }
        }
        for _ in 0..opts.picard {
            let zs: Vec<&[f64]> = z.iter().map(|zc| &zc[k * n..(k + 1) * n]).collect();
            drv.par_chunks_mut(CHUNK * dim)
                .enumerate()
                .for_each(|(ch, out)| {
                    let mut yy = vec![0.0; dim];
                    let mut zz = vec![0.0; dim];
                    for j in 0..out.len() / dim {
                        let i = ch * CHUNK + j;
                        for c in 0..dim {
                            yy[c] = cur[c][i];
                            zz[c] = zs[c][i];
                        }
                        driver.eval(k, i, &yy, &zz, &mut out[j * dim..(j + 1) * dim]);
                    }
                });
            for c in 0..dim {
                let next = &mart[c];
                for i in 0..n {
                    target[i] = next[i] + drv[i * dim + c] * dt;
                }
                design.fit(&target, &mut cur[c]);
            }
        }
        for c in 0..dim {
            if let Some(i) = cur[c].iter().position(|v| !v.is_finite()) {
                return Err(Error::numerical(
                    k,
                    format!("non-finite Y for particle {i}"),
                ));
            }
            head[c].copy_from_slice(&cur[c]);
        }
    }
    Ok(BackwardSolution {
        dim,
        n,
        steps,
        dt,
        y,
        z,
        diagnostics,
        basis: opts.basis.describe(features.extras.len()),
    })
}

/// Mutable step-k rows and shared step-(k+1) rows of every component.
fn split(y: &mut [Vec<f64>], k: usize, n: usize) -> (Vec<&mut [f64]>, Vec<&[f64]>) {
    let mut heads = Vec::with_capacity(y.len());
    let mut tails = Vec::with_capacity(y.len());
    for yc in y.iter_mut() {
        let (h, t) = yc.split_at_mut((k + 1) * n);
        heads.push(&mut h[k * n..]);
        tails.push(&t[..n]);
    }
    (heads, tails)
}

/// Forward ensemble together with the solution (Y, Z) of the cost BSDE.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub ensemble: ParticleEnsemble,
    pub backward: BackwardSolution,
}

impl Trajectory {
    /// Evaluation point of particle i at step k including (Y, Z).
    pub fn point(&self, k: usize, i: usize) -> Point {
        let mut p = self.ensemble.point(k, i);
        p.y = self.backward.y(0, k)[i];
        p.z = if k < self.ensemble.steps() {
            self.backward.z(0, k)[i]
        } else {
            0.0
        };
        p
    }

    /// J = Y(0).
    pub fn cost(&self) -> f64 {
        self.backward.y0(0)
    }
}

/// Solves the cost BSDE with driver f and terminal Φ on a simulated ensemble.
pub fn solve_cost(
    coeffs: &dyn Coefficients,
    ensemble: ParticleEnsemble,
    features: Option<FeatureSet>,
    opts: &BsdeOptions,
) -> Result<Trajectory> {
    let n = ensemble.n();
    let steps = ensemble.steps();
    let xhat_t = ensemble.xhat(steps);
    let regime_t = ensemble.terminal_regime();
    let terminal: Vec<f64> = ensemble
        .x(steps)
        .iter()
        .map(|&x| coeffs.phi(&Point::state(ensemble.horizon(), x, xhat_t, 0.0, regime_t)))
        .collect();
    let driver = |k: usize, i: usize, y: &[f64], z: &[f64], out: &mut [f64]| {
        let mut p = ensemble.point(k, i);
        p.y = y[0];
        p.z = z[0];
        out[0] = coeffs.f(&p);
    };
    let fs = features.unwrap_or_else(|| FeatureSet::of(&ensemble, coeffs.regimes()));
    let backward = solve_bsde(&fs, ensemble.brownian(), &[terminal], &driver, opts)?;
    debug_assert_eq!(backward.n(), n);
    Ok(Trajectory { ensemble, backward })
}

/// Forward simulation followed by the cost BSDE.
pub fn solve_state(
    coeffs: &dyn Coefficients,
    control: &ControlModel,
    x0: f64,
    noise: &Noise,
    opts: &BsdeOptions,
) -> Result<Trajectory> {
    let ensemble = simulate_forward(coeffs, control, x0, noise)?;
    solve_cost(coeffs, ensemble, None, opts)
}

/// Cost estimate averaged over chain scenarios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub per_scenario: Vec<f64>,
}

/// J(v) = Y(0), averaged over the given chain scenarios.
pub fn evaluate_cost(
    coeffs: &dyn Coefficients,
    control: &ControlModel,
    x0: f64,
    noises: &[Noise],
    opts: &BsdeOptions,
) -> Result<CostEstimate> {
    if noises.is_empty() {
        return Err(Error::invalid("at least one chain scenario is required"));
    }
    let per_scenario = noises
        .iter()
        .map(|noise| solve_state(coeffs, control, x0, noise, opts).map(|t| t.cost()))
        .collect::<Result<Vec<_>>>()?;
    Ok(CostEstimate {
        mean: stats::mean(&per_scenario),
        per_scenario,
    })
}

/// Continuity estimate between two solutions on the same ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    /// sup_k E|ΔY_k|².
    pub y_sup: f64,
    /// E Σ_k |ΔZ_k|² Δt.
    pub z_l2: f64,
    /// y_sup + z_l2 with e^{γ t} weights.
    pub norm: f64,
    /// Size of the data difference supplied by the caller.
    pub data_diff: f64,
    /// sqrt(norm) / data_diff.
    pub implied_constant: f64,
}

/// γ-weighted distance between two solutions of component 0, compared with
/// the size of the data perturbation that produced them.
pub fn stability_probe(
    a: &BackwardSolution,
    b: &BackwardSolution,
    data_diff: f64,
    gamma: f64,
) -> Result<StabilityReport> {
    if a.n != b.n || a.steps != b.steps {
        return Err(Error::invalid("solutions live on different grids"));
    }
    let n = a.n;
    let mut y_sup: f64 = 0.0;
    let mut wy: f64 = 0.0;
    let mut z_l2 = 0.0;
    let mut wz = 0.0;
    for k in 0..=a.steps {
        let w = (gamma * k as f64 * a.dt).exp();
        let d: f64 = a
            .y(0, k)
            .iter()
            .zip(b.y(0, k))
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / n as f64;
        y_sup = y_sup.max(d);
        wy = wy.max(w * d);
        if k < a.steps {
            let dz: f64 = a
                .z(0, k)
                .iter()
                .zip(b.z(0, k))
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                / n as f64;
            z_l2 += dz * a.dt;
            wz += w * dz * a.dt;
        }
    }
    let norm = wy + wz;
    Ok(StabilityReport {
        y_sup,
        z_l2,
        norm,
        data_diff,
        implied_constant: if data_diff > 0.0 {
            norm.sqrt() / data_diff
        } else {
            0.0
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ChainPath;
    use crate::rng::SeedStreams;
    use crate::scenario::{lq_to_general, ControlSet, LqCoefficients, LqRegime};

    fn noise(n: usize, steps: usize, seed: u64) -> Noise {
        let chain = ChainPath::constant(1.0, steps, 0).unwrap();
        let bw = Brownian::sample(&SeedStreams::new(seed), 0, n, steps, chain.dt());
        Noise::new(chain, bw).unwrap()
    }

    fn brownian_ensemble(n: usize, steps: usize, seed: u64) -> ParticleEnsemble {
        let c = lq_to_general(&LqCoefficients::uniform(
            LqRegime {
                b0: 1.0,
                ..Default::default()
            },
            1,
        ));
        let ctl = ControlModel::constant(ControlSet::Finite(vec![0.0]), 0.0).unwrap();
        simulate_forward(&c, &ctl, 0.0, &noise(n, steps, seed)).unwrap()
    }

    #[test]
    fn constant_terminal_zero_driver_is_exact() {
        let ens = brownian_ensemble(500, 20, 1);
        let fs = FeatureSet::of(&ens, 1);
        let zero = |_: usize, _: usize, _: &[f64], _: &[f64], o: &mut [f64]| o[0] = 0.0;
        let sol = solve_bsde(
            &fs,
            ens.brownian(),
            &[vec![2.5; 500]],
            &zero,
            &BsdeOptions::default(),
        )
        .unwrap();
        for k in 0..=20 {
            assert!(sol.y(0, k).iter().all(|&y| y == 2.5));
        }
        for k in 0..20 {
            assert!(sol.z(0, k).iter().all(|&z| z == 0.0));
        }
    }

    #[test]
    fn constant_driver_integrates_exactly() {
        let ens = brownian_ensemble(400, 50, 2);
        let fs = FeatureSet::of(&ens, 1);
        let r = 0.7;
        let drv = move |_: usize, _: usize, _: &[f64], _: &[f64], o: &mut [f64]| o[0] = r;
        let sol = solve_bsde(
            &fs,
            ens.brownian(),
            &[vec![1.0; 400]],
            &drv,
            &BsdeOptions::default(),
        )
        .unwrap();
        for k in 0..=50 {
            let exact = 1.0 + r * (1.0 - ens.node(k));
            assert!(sol.y(0, k).iter().all(|&y| (y - exact).abs() < 1e-10));
        }
    }

    #[test]
    fn linear_bsde_matches_closed_form() {
        let (n, steps, a) = (10_000, 100, 0.5);
        let ens = brownian_ensemble(n, steps, 3);
        let fs = FeatureSet::of(&ens, 1);
        let drv = move |_: usize, _: usize, y: &[f64], _: &[f64], o: &mut [f64]| o[0] = a * y[0];
        let sol = solve_bsde(
            &fs,
            ens.brownian(),
            &[ens.x(steps).to_vec()],
            &drv,
            &BsdeOptions::default(),
        )
        .unwrap();
        let (mut ey, mut ny, mut ez, mut nz) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..steps {
            let g = (a * (1.0 - ens.node(k))).exp();
            for i in 0..n {
                let yt = ens.x(k)[i] * g;
                ey += (sol.y(0, k)[i] - yt).powi(2);
                ny += yt * yt;
                ez += (sol.z(0, k)[i] - g).powi(2);
                nz += g * g;
            }
        }
        assert!((ey / ny).sqrt() < 0.02, "Y rmse {}", (ey / ny).sqrt());
        assert!((ez / nz).sqrt() < 0.05, "Z rmse {}", (ez / nz).sqrt());
    }

    #[test]
    fn collinear_features_are_pruned() {
        let n = 200;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let cols = vec![
            x.clone(),
            x.iter().map(|v| 2.0 * v + 1.0).collect(),
            vec![3.0; n],
        ];
        let d = Design::new(cols, n, &BsdeOptions::default(), 0).unwrap();
        assert_eq!(d.diagnostics.kept, 2);
        let y: Vec<f64> = x.iter().map(|v| 4.0 - v).collect();
        let mut out = vec![0.0; n];
        d.fit(&y, &mut out);
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn cost_examples() {
        let nz = noise(300, 20, 4);
        let ctl = ControlModel::constant(ControlSet::Finite(vec![0.0]), 0.0).unwrap();
        let opts = BsdeOptions::default();
        struct Five;
        impl Coefficients for Five {
            fn b(&self, _: &Point) -> f64 {
                0.0
            }
            fn sigma(&self, _: &Point) -> f64 {
                1.0
            }
            fn f(&self, _: &Point) -> f64 {
                0.0
            }
            fn phi(&self, _: &Point) -> f64 {
                5.0
            }
            fn b_derivs(&self, _: &Point) -> crate::scenario::StateDerivs {
                Default::default()
            }
            fn sigma_derivs(&self, _: &Point) -> crate::scenario::StateDerivs {
                crate::scenario::StateDerivs {
                    value: 1.0,
                    ..Default::default()
                }
            }
            fn f_derivs(&self, _: &Point) -> crate::scenario::DriverDerivs {
                Default::default()
            }
            fn phi_derivs(&self, _: &Point) -> crate::scenario::StateDerivs {
                crate::scenario::StateDerivs {
                    value: 5.0,
                    ..Default::default()
                }
            }
            fn lipschitz(&self) -> f64 {
                1.0
            }
            fn regimes(&self) -> usize {
                1
            }
        }
        let j = evaluate_cost(&Five, &ctl, 0.0, std::slice::from_ref(&nz), &opts).unwrap();
        assert!((j.mean - 5.0).abs() < 1e-12);
        let mut unit = LqCoefficients::uniform(
            LqRegime {
                b0: 1.0,
                c5: 1.0,
                ..Default::default()
            },
            1,
        );
        let ctl1 = ControlModel::constant(ControlSet::Finite(vec![1.0]), 1.0).unwrap();
        let j = evaluate_cost(
            &lq_to_general(&unit),
            &ctl1,
            0.0,
            std::slice::from_ref(&nz),
            &opts,
        )
        .unwrap();
        assert!((j.mean - 1.0).abs() < 1e-10);
        unit.regimes[0] = LqRegime {
            b0: 1.0,
            d1: 1.0,
            ..Default::default()
        };
        let big = noise(20_000, 50, 5);
        let j = evaluate_cost(
            &lq_to_general(&unit),
            &ctl,
            0.0,
            std::slice::from_ref(&big),
            &opts,
        )
        .unwrap();
        assert!((j.mean - 1.0).abs() < 0.03, "J = {}", j.mean);
    }

    #[test]
    fn stability_identical_inputs_give_zero() {
        let ens = brownian_ensemble(300, 10, 6);
        let fs = FeatureSet::of(&ens, 1);
        let drv = |_: usize, _: usize, y: &[f64], _: &[f64], o: &mut [f64]| o[0] = 0.3 * y[0];
        let a = solve_bsde(
            &fs,
            ens.brownian(),
            &[ens.x(10).to_vec()],
            &drv,
            &BsdeOptions::default(),
        )
        .unwrap();
        let r = stability_probe(&a, &a.clone(), 0.0, 0.0).unwrap();
        assert_eq!(r.norm, 0.0);
    }
}
