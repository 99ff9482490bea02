//! Hamiltonian, 𝓗-function and numerical checks of the maximum principle,
//! including the state-constrained variant with penalised multipliers.
//!
//! The pointwise inequality "for all v ∈ V, a.s., a.e." is checked on a grid
//! of (t_k, particle, v) cells. A cell violates when
//! Δ = 𝓗(v) − 𝓗(v̄) < −(tol + slack), with tol a multiple of the standard
//! error of Δ across the particles of step k for that v.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::{
    solve_gamma, AdjointBundle, AdjointOptions, FirstOrderAdjoint, Linearization,
    SecondOrderAdjoint,
};
use crate::bsde::{
    evaluate_cost, solve_bsde, solve_state, BackwardSolution, BsdeOptions, FeatureSet, Trajectory,
};
use crate::error::{Error, Result};
use crate::forward::Noise;
use crate::scenario::{Coefficients, ControlModel, ControlSet, LqCoefficients, Point, Policy};
use crate::stats;

/// Absolute part of the per-cell tolerance, covering roundoff in Δ.
pub const ROUNDOFF_TOL: f64 = 1e-10;

/// Cross-particle means entering H for one candidate value v.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CandidateMeans {
    /// Ê[b(t, ξ, ξ′, v, i)].
    pub b: f64,
    /// Ê[(σ(t, ξ, ξ′, v, i) − σ(t, X̄, X̂̄, v̄, i))²].
    pub ds2: f64,
}

/// Arguments of H and 𝓗 at one particle and step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianContext {
    /// Base point (t, X̄, X̂̄, Ȳ, Z̄, v̄, regime).
    pub base: Point,
    /// Candidate control value.
    pub v: f64,
    pub p0: f64,
    pub p1: f64,
    pub q0: f64,
    /// Second-order values P⁰, P¹.
    pub pp0: f64,
    pub pp1: f64,
    pub means: CandidateMeans,
}

impl HamiltonianContext {
    fn candidate(&self) -> Point {
        Point {
            v: self.v,
            ..self.base
        }
    }

    /// δσ = σ(t, ξ, ξ′, v, i) − σ(t, X̄, X̂̄, v̄, i).
    pub fn delta_sigma(&self, coeffs: &dyn Coefficients) -> f64 {
        coeffs.sigma(&self.candidate()) - coeffs.sigma(&self.base)
    }
}

/// Tilde adjoint values and Υ weighting the constrained Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Weights {
    pub tp0: f64,
    pub tp1: f64,
    pub tq0: f64,
    pub tpp0: f64,
    pub tpp1: f64,
    pub gamma: f64,
}

impl Weights {
    /// Unconstrained weighting: no tilde terms, γ = 1.
    pub const UNIT: Weights = Weights {
        tp0: 0.0,
        tp1: 0.0,
        tq0: 0.0,
        tpp0: 0.0,
        tpp1: 0.0,
        gamma: 1.0,
    };
}

fn weighted(coeffs: &dyn Coefficients, ctx: &HamiltonianContext, w: &Weights, second: bool) -> f64 {
    let cand = ctx.candidate();
    let sv = coeffs.sigma(&cand);
    let ds = sv - coeffs.sigma(&ctx.base);
    let mut shifted = cand;
    shifted.z += ctx.p0 * ds;
    let mut h = (w.tp0 + w.gamma * ctx.p0) * coeffs.b(&cand)
        + (w.tq0 + w.gamma * ctx.q0) * sv
        + (w.tp1 + w.gamma * ctx.p1) * ctx.means.b
        + w.gamma * coeffs.f(&shifted);
    if second {
        h += 0.5 * (w.tpp0 + w.gamma * ctx.pp0) * ds * ds
            + 0.5 * (w.tpp1 + w.gamma * ctx.pp1) * ctx.means.ds2;
    }
    h
}

/// H = p⁰b + p¹Ê[b] + q⁰σ + f(t, ξ, ξ′, y, z + p⁰δσ, v, i).
pub fn hamiltonian(coeffs: &dyn Coefficients, ctx: &HamiltonianContext) -> f64 {
    weighted(coeffs, ctx, &Weights::UNIT, false)
}

/// 𝓗 = H + ½P⁰(δσ)² + ½P¹Ê[(δσ)²].
pub fn h_function(coeffs: &dyn Coefficients, ctx: &HamiltonianContext) -> f64 {
    weighted(coeffs, ctx, &Weights::UNIT, true)
}

/// Constrained Hamiltonian with tilde adjoints and Υ = `w.gamma`.
pub fn constrained_hamiltonian(
    coeffs: &dyn Coefficients,
    ctx: &HamiltonianContext,
    w: &Weights,
) -> f64 {
    weighted(coeffs, ctx, w, true)
}

/// Penalised cost J_κ = |(gap + κ, EΨ)| with multipliers λ = (gap + κ)/J_κ and
/// μ = EΨ/J_κ, where gap = Y^v(0) − Ȳ(0). `None` when J_κ is zero or not finite.
pub fn penalty_multipliers(gap: f64, kappa: f64, psi: f64) -> Option<(f64, f64, f64)> {
    let j = (gap + kappa).hypot(psi);
    (j > 0.0 && j.is_finite()).then(|| (j, (gap + kappa) / j, psi / j))
}

/// Settings of the grid check.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpOptions {
    /// Largest admissible violation fraction.
    pub quantile: f64,
    /// Tolerance in local standard errors of Δ.
    pub se_multiplier: f64,
    /// Include the P⁰, P¹ terms of 𝓗.
    pub second_order: bool,
    /// Extra additive slack (√κ in the penalised problem).
    pub slack: f64,
}

impl Default for MpOptions {
    fn default() -> Self {
        Self {
            quantile: 0.01,
            se_multiplier: 3.0,
            second_order: true,
            slack: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MpVerdict {
    Pass,
    Fail,
}

/// Outcome of a grid check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpReport {
    pub candidate: String,
    pub violation_fraction: f64,
    /// Most negative Δ over the grid, or 0.
    pub worst_violation: f64,
    /// Mean per-cell tolerance.
    pub tol: f64,
    pub se_multiplier: f64,
    pub slack: f64,
    pub quantile: f64,
    pub points: usize,
    pub violations: usize,
    /// sup |P¹| along the trajectory, reported by the LQ check.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p1_sup: Option<f64>,
    pub verdict: MpVerdict,
}

impl MpReport {
    pub fn passed(&self) -> bool {
        self.verdict == MpVerdict::Pass
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct CellStats {
    points: usize,
    violations: usize,
    worst: f64,
    tol_sum: f64,
    cells: usize,
}

impl CellStats {
    fn add(&mut self, deltas: &[f64], opts: &MpOptions) {
        let scale = deltas.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let tol = opts.se_multiplier * stats::std_err(deltas) + ROUNDOFF_TOL * (1.0 + scale);
        for &d in deltas {
            if d < -(tol + opts.slack) {
                self.violations += 1;
            }
            self.worst = self.worst.min(d);
        }
        self.points += deltas.len();
        self.tol_sum += tol;
        self.cells += 1;
    }

    fn merge(mut self, o: CellStats) -> CellStats {
        self.points += o.points;
        self.violations += o.violations;
        self.worst = self.worst.min(o.worst);
        self.tol_sum += o.tol_sum;
        self.cells += o.cells;
        self
    }

    fn report(self, candidate: &str, opts: &MpOptions) -> MpReport {
        let violation_fraction = if self.points == 0 {
            0.0
        } else {
            self.violations as f64 / self.points as f64
        };
        MpReport {
            candidate: candidate.to_string(),
            violation_fraction,
            worst_violation: self.worst.min(0.0),
            tol: if self.cells == 0 {
                0.0
            } else {
                self.tol_sum / self.cells as f64
            },
            se_multiplier: opts.se_multiplier,
            slack: opts.slack,
            quantile: opts.quantile,
            points: self.points,
            violations: self.violations,
            p1_sup: None,
            verdict: if violation_fraction <= opts.quantile {
                MpVerdict::Pass
            } else {
                MpVerdict::Fail
            },
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "the control grid must be non-empty and finite",
        ));
    }
    Ok(())
}

fn check_quantile(opts: &MpOptions) -> Result<()> {
    if !(0.0..1.0).contains(&opts.quantile) || !(opts.se_multiplier >= 0.0) || !(opts.slack >= 0.0)
    {
        return Err(Error::invalid(
            "quantile must lie in [0, 1) and tolerances must be non-negative",
        ));
    }
    Ok(())
}

/// Scans Δ = 𝓗(v) − 𝓗(v̄) over (t_k, particle, v) with per-particle weights.
#[allow(clippy::too_many_arguments)]
fn scan(
    coeffs: &dyn Coefficients,
    traj: &Trajectory,
    first: &FirstOrderAdjoint,
    second: &SecondOrderAdjoint,
    grid: &[f64],
    opts: &MpOptions,
    weights: &(dyn Fn(usize, usize) -> Weights + Sync),
    candidate: &str,
) -> Result<MpReport> {
    check_grid(grid)?;
    check_quantile(opts)?;
    let ens = &traj.ensemble;
    let n = ens.n();
    let total = (0..ens.steps())
        .into_par_iter()
        .map(|k| {
            let pts: Vec<Point> = (0..n).map(|i| traj.point(k, i)).collect();
            let base_means = CandidateMeans {
                b: stats::mean(&pts.iter().map(|p| coeffs.b(p)).collect::<Vec<_>>()),
                ds2: 0.0,
            };
            let (p0, p1, q0) = (first.p0(k), first.p1(k), first.q0(k));
            let (pp0, pp1) = (second.p0(k), second.p1(k));
            let ctx = |i: usize, v: f64, means: CandidateMeans| HamiltonianContext {
                base: pts[i],
                v,
                p0: p0[i],
                p1: p1[i],
                q0: q0[i],
                pp0: if opts.second_order { pp0[i] } else { 0.0 },
                pp1: if opts.second_order { pp1[i] } else { 0.0 },
                means,
            };
            let ws: Vec<Weights> = (0..n)
                .map(|i| {
                    let mut w = weights(k, i);
                    if !opts.second_order {
                        w.tpp0 = 0.0;
                        w.tpp1 = 0.0;
                    }
                    w
                })
                .collect();
            let hbar: Vec<f64> = (0..n)
                .map(|i| {
                    weighted(
                        coeffs,
                        &ctx(i, pts[i].v, base_means),
                        &ws[i],
                        opts.second_order,
                    )
                })
                .collect();
            let mut cell = CellStats::default();
            let mut deltas = vec![0.0; n];
            for &v in grid {
                let mut bs = 0.0;
                let mut ds2 = 0.0;
                for p in &pts {
                    let c = Point { v, ..*p };
                    bs += coeffs.b(&c);
                    let d = coeffs.sigma(&c) - coeffs.sigma(p);
                    ds2 += d * d;
                }
                let means = CandidateMeans {
                    b: bs / n as f64,
                    ds2: ds2 / n as f64,
                };
                for i in 0..n {
                    deltas[i] =
                        weighted(coeffs, &ctx(i, v, means), &ws[i], opts.second_order) - hbar[i];
                }
                cell.add(&deltas, opts);
            }
            cell
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(CellStats::default(), CellStats::merge);
    Ok(total.report(candidate, opts))
}

/// Checks 𝓗(v) ≥ 𝓗(v̄) on the grid along a solved trajectory.
pub fn check_mp(
    coeffs: &dyn Coefficients,
    traj: &Trajectory,
    adj: &AdjointBundle,
    grid: &[f64],
    opts: &MpOptions,
    candidate: &str,
) -> Result<MpReport> {
    scan(
        coeffs,
        traj,
        &adj.first,
        &adj.second,
        grid,
        opts,
        &|_, _| Weights::UNIT,
        candidate,
    )
}

/// Closed LQ form: [p⁰(A3 + C4B3) + B3q⁰ + C5](v − v̄) + p¹A3Ê[v − v̄] + ½P⁰B3²(v − v̄)² ≥ 0.
pub fn check_mp_lq(
    lq: &LqCoefficients,
    traj: &Trajectory,
    adj: &AdjointBundle,
    grid: &[f64],
    opts: &MpOptions,
    candidate: &str,
) -> Result<MpReport> {
    check_grid(grid)?;
    check_quantile(opts)?;
    let ens = &traj.ensemble;
    let n = ens.n();
    let first = &adj.first;
    let second = &adj.second;
    let total = (0..ens.steps())
        .into_par_iter()
        .map(|k| {
            let r = lq.regime(ens.regime(k));
            let vbar = ens.v(k);
            let vbar_mean = stats::mean(vbar);
            let (p0, p1, q0, pp0) = (first.p0(k), first.p1(k), first.q0(k), second.p0(k));
            let mut cell = CellStats::default();
            let mut deltas = vec![0.0; n];
            for &v in grid {
                for i in 0..n {
                    let d = v - vbar[i];
                    let lin = (p0[i] * (r.a3 + r.c4 * r.b3) + r.b3 * q0[i] + r.c5) * d
                        + p1[i] * r.a3 * (v - vbar_mean);
                    let quad = if opts.second_order {
                        0.5 * pp0[i] * r.b3 * r.b3 * d * d
                    } else {
                        0.0
                    };
                    deltas[i] = lin + quad;
                }
                cell.add(&deltas, opts);
            }
            cell
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(CellStats::default(), CellStats::merge);
    let mut report = total.report(candidate, opts);
    report.p1_sup = Some(crate::adjoint::sup_abs(second.sol.y_all(1)));
    Ok(report)
}

/// Limits of the block search.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchOptions {
    /// Exhaustive enumeration up to this many block vectors, coordinate descent above.
    pub max_exhaustive: usize,
    /// Largest number of cost evaluations.
    pub budget: usize,
    /// Coordinate descent sweeps.
    pub max_sweeps: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            max_exhaustive: 100_000,
            budget: 1_000_000,
            max_sweeps: 20,
        }
    }
}

/// One evaluated block control.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub values: Vec<f64>,
    pub cost: f64,
}

/// Minimiser over piecewise-constant controls with the evaluated table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub best: Vec<f64>,
    pub best_cost: f64,
    pub table: Vec<CostRow>,
    pub exhaustive: bool,
    pub budget_exceeded: bool,
}

impl SearchResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let blocks = self.best.len();
        let head: Vec<String> = (0..blocks).map(|b| format!("block_{b}")).collect();
        writeln!(w, "{},cost", head.join(","))?;
        for row in &self.table {
            let vals: Vec<String> = row.values.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{:.12e}", vals.join(","), row.cost)?;
        }
        Ok(())
    }
}

/// Minimises `objective` over V^blocks. Enumeration is lexicographic in
/// ascending grid order and only strict improvements replace the incumbent,
/// so ties resolve to the smallest values.
pub fn block_search(
    grid: &[f64],
    blocks: usize,
    opts: &SearchOptions,
    objective: &mut dyn FnMut(&[f64]) -> Result<f64>,
) -> Result<SearchResult> {
    check_grid(grid)?;
    if blocks == 0 {
        return Err(Error::invalid("block search needs at least one block"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup();
    let m = grid.len();
    let size = (m as f64).powi(blocks as i32);
    let exhaustive = size <= opts.max_exhaustive as f64;
    let mut table = Vec::new();
    let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut budget_exceeded = false;
    let values = |idx: &[usize]| idx.iter().map(|&j| grid[j]).collect::<Vec<f64>>();
    let mut eval =
        |idx: &[usize], table: &mut Vec<CostRow>, exceeded: &mut bool| -> Result<Option<f64>> {
            if let Some(&c) = cache.get(idx) {
                return Ok(Some(c));
            }
            if table.len() >= opts.budget {
                *exceeded = true;
                return Ok(None);
            }
            let vals = values(idx);
            let c = objective(&vals)?;
            if !c.is_finite() {
                return Err(Error::numerical(
                    0,
                    format!("non-finite cost for block control {vals:?}"),
                ));
            }
            cache.insert(idx.to_vec(), c);
            table.push(CostRow {
                values: vals,
                cost: c,
            });
            Ok(Some(c))
        };
    if exhaustive {
        let mut idx = vec![0usize; blocks];
        'outer: while let Some(c) = eval(&idx, &mut table, &mut budget_exceeded)? {
            if best.as_ref().is_none_or(|(_, b)| c < *b) {
                best = Some((idx.clone(), c));
            }
            let mut pos = blocks;
            loop {
                if pos == 0 {
                    break 'outer;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < m {
                    break;
                }
                idx[pos] = 0;
            }
        }
    } else {
        let mut cur = vec![0usize; blocks];
        let mut cur_cost = match eval(&cur, &mut table, &mut budget_exceeded)? {
            Some(c) => c,
            None => return Err(Error::invalid("search budget must allow one evaluation")),
        };
        'sweeps: for _ in 0..opts.max_sweeps {
            let mut changed = false;
            for b in 0..blocks {
                let mut arg = cur[b];
                let mut val = cur_cost;
                for j in 0..m {
                    let mut trial = cur.clone();
                    trial[b] = j;
                    let Some(c) = eval(&trial, &mut table, &mut budget_exceeded)? else {
                        break 'sweeps;
                    };
                    if c < val || (c == val && j < arg) {
                        val = c;
                        arg = j;
                    }
                }
                if arg != cur[b] {
                    cur[b] = arg;
                    cur_cost = val;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        best = Some((cur, cur_cost));
    }
    let (bi, bc) = best.ok_or_else(|| Error::invalid("search budget must allow one evaluation"))?;
    Ok(SearchResult {
        best: values(&bi),
        best_cost: bc,
        table,
        exhaustive,
        budget_exceeded,
    })
}

/// Piecewise-constant control with the given block values.
pub fn block_control(set: &ControlSet, values: &[f64], horizon: f64) -> Result<ControlModel> {
    ControlModel::new(
        set.clone(),
        Policy::Blocks {
            values: values.to_vec(),
            horizon,
        },
    )
}

/// Grid search of J over block controls, all evaluated on the same noise.
#[allow(clippy::too_many_arguments)]
pub fn lq_brute_force(
    coeffs: &dyn Coefficients,
    set: &ControlSet,
    blocks: usize,
    x0: f64,
    noises: &[Noise],
    bsde: &BsdeOptions,
    opts: &SearchOptions,
) -> Result<SearchResult> {
    let horizon = noises
        .first()
        .ok_or_else(|| Error::invalid("at least one chain scenario is required"))?
        .chain
        .horizon();
    let mut objective = |vals: &[f64]| -> Result<f64> {
        let ctl = block_control(set, vals, horizon)?;
        Ok(evaluate_cost(coeffs, &ctl, x0, noises, bsde)?.mean)
    };
    block_search(&set.grid(), blocks, opts, &mut objective)
}

/// Terminal constraint function Ψ(x, x′, y) with derivative oracles.
pub trait Constraint: Send + Sync {
    fn psi(&self, x: f64, xp: f64, y: f64) -> f64;
    /// (Ψ_x, Ψ_{x′}, Ψ_y).
    fn grad(&self, x: f64, xp: f64, y: f64) -> [f64; 3];
    fn psi_xx(&self, x: f64, xp: f64, y: f64) -> f64;
}

/// Ψ = cx x + cxp x′ + cy y + ½ qxx x² − c.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraticConstraint {
    pub cx: f64,
    pub cxp: f64,
    pub cy: f64,
    pub qxx: f64,
    pub c: f64,
}

impl Constraint for QuadraticConstraint {
    fn psi(&self, x: f64, xp: f64, y: f64) -> f64 {
        self.cx * x + self.cxp * xp + self.cy * y + 0.5 * self.qxx * x * x - self.c
    }
    fn grad(&self, x: f64, _xp: f64, _y: f64) -> [f64; 3] {
        [self.cx + self.qxx * x, self.cxp, self.cy]
    }
    fn psi_xx(&self, _x: f64, _xp: f64, _y: f64) -> f64 {
        self.qxx
    }
}

/// Terminal data of the tilde adjoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TildeTerminal {
    /// (Φ_x, Φ_{x′}) and (Φ_xx, 0) of the cost.
    Displayed,
    /// μ(Ψ_x, Ψ_{x′}) and μ(Ψ_xx, 0) of the constraint.
    ConstraintGradient,
}

/// Tilde adjoints (p̃, q̃) and (P̃, Q̃).
#[derive(Debug, Clone)]
pub struct TildeAdjoint {
    pub first: BackwardSolution,
    pub second: BackwardSolution,
}

/// Solves the tilde adjoint BSDEs, whose drivers carry b and σ derivatives only.
pub fn solve_tilde_adjoints(
    lin: &Linearization,
    terminal: [Vec<f64>; 2],
    second_terminal: [Vec<f64>; 2],
    opts: &BsdeOptions,
) -> Result<TildeAdjoint> {
    let ens = &lin.traj.ensemble;
    let fs = FeatureSet::of(ens, lin.coeffs.regimes());
    let d1 = |k: usize, i: usize, p: &[f64], q: &[f64], out: &mut [f64]| {
        let l = lin.at(k, i);
        out[0] = l.b.dx * p[0] + l.s.dx * q[0];
        out[1] = l.b.dxp * p[0] + (l.b.dx + lin.bxp_hat[k]) * p[1] + l.s.dxp * q[0];
    };
    let first = solve_bsde(&fs, ens.brownian(), &terminal, &d1, opts)?;
    let d2 = |k: usize, i: usize, pp: &[f64], qq: &[f64], out: &mut [f64]| {
        let l = lin.at(k, i);
        let g = 2.0 * l.b.dx + l.s.dx * l.s.dx;
        let tp0 = first.y(0, k)[i];
        let tp1 = first.y(1, k)[i];
        let tq0 = first.z(0, k)[i];
        out[0] = g * pp[0] + 2.0 * l.s.dx * qq[0] + l.b.dxx * tp0 + l.s.dxx * tq0;
        out[1] = g * pp[1] + l.b.dxx * tp1;
    };
    let second = solve_bsde(&fs, ens.brownian(), &second_terminal, &d2, opts)?;
    Ok(TildeAdjoint { first, second })
}

/// Ψ, tilde adjoints and Υ of the penalised problem at one trajectory.
pub struct ConstraintContext<'a> {
    pub constraint: &'a dyn Constraint,
    pub kappa: f64,
    pub lambda: f64,
    pub mu: f64,
    pub tilde: TildeAdjoint,
    /// Υ(0) = λ + μE[Ψ_y].
    pub upsilon0: f64,
    /// Υ = Υ(0)Γ, laid out as `[k * n + i]`.
    pub upsilon: Vec<f64>,
}

impl<'a> ConstraintContext<'a> {
    /// Builds the context along `lin` with multipliers (λ, μ) normalised to the unit circle.
    pub fn build(
        lin: &Linearization,
        constraint: &'a dyn Constraint,
        kappa: f64,
        multipliers: (f64, f64),
        terminal: TildeTerminal,
        opts: &BsdeOptions,
    ) -> Result<Self> {
        let norm = multipliers.0.hypot(multipliers.1);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid(
                "multipliers must be finite and not both zero",
            ));
        }
        let (lambda, mu) = (multipliers.0 / norm, multipliers.1 / norm);
        let ens = &lin.traj.ensemble;
        let n = ens.n();
        let k = ens.steps();
        let xhat = ens.xhat(k);
        let y0 = lin.traj.backward.y0(0);
        let xs = ens.x(k);
        let (t1, t2) = match terminal {
            TildeTerminal::Displayed => {
                let d: Vec<_> = (0..n).map(|i| lin.terminal(i)).collect();
                (
                    [
                        d.iter().map(|d| d.dx).collect(),
                        d.iter().map(|d| d.dxp).collect(),
                    ],
                    [d.iter().map(|d| d.dxx).collect(), vec![0.0; n]],
                )
            }
            TildeTerminal::ConstraintGradient => {
                let g: Vec<[f64; 3]> = xs.iter().map(|&x| constraint.grad(x, xhat, y0)).collect();
                (
                    [
                        g.iter().map(|g| mu * g[0]).collect(),
                        g.iter().map(|g| mu * g[1]).collect(),
                    ],
                    [
                        xs.iter()
                            .map(|&x| mu * constraint.psi_xx(x, xhat, y0))
                            .collect(),
                        vec![0.0; n],
                    ],
                )
            }
        };
        let tilde = solve_tilde_adjoints(lin, t1, t2, opts)?;
        let psi_y = stats::mean(
            &xs.iter()
                .map(|&x| constraint.grad(x, xhat, y0)[2])
                .collect::<Vec<_>>(),
        );
        let upsilon0 = lambda + mu * psi_y;
        let upsilon = solve_gamma(lin).into_iter().map(|g| upsilon0 * g).collect();
        Ok(Self {
            constraint,
            kappa,
            lambda,
            mu,
            tilde,
            upsilon0,
            upsilon,
        })
    }

    fn weights(&self, k: usize, i: usize, n: usize) -> Weights {
        let t = &self.tilde;
        Weights {
            tp0: t.first.y(0, k)[i],
            tp1: t.first.y(1, k)[i],
            tq0: t.first.z(0, k)[i],
            tpp0: t.second.y(0, k)[i],
            tpp1: t.second.y(1, k)[i],
            gamma: self.upsilon[k * n + i],
        }
    }
}

/// Checks the constrained Hamiltonian inequality on the grid.
pub fn check_constrained(
    coeffs: &dyn Coefficients,
    traj: &Trajectory,
    adj: &AdjointBundle,
    ctx: &ConstraintContext,
    grid: &[f64],
    opts: &MpOptions,
    candidate: &str,
) -> Result<MpReport> {
    let n = traj.ensemble.n();
    scan(
        coeffs,
        traj,
        &adj.first,
        &adj.second,
        grid,
        opts,
        &|k, i| ctx.weights(k, i, n),
        candidate,
    )
}

/// Settings of the constrained verification.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstrainedOptions {
    /// Penalisation levels κ > 0.
    pub kappas: Vec<f64>,
    pub blocks: usize,
    pub search: SearchOptions,
    pub mp: MpOptions,
    pub terminal: TildeTerminal,
    /// Estimate E[Ψ^v] as E[Ψ^v] − E[Ψ^{v̄}] under common noise, using the
    /// candidate's feasibility as a control variate.
    pub center_constraint: bool,
    /// Feasibility tolerance in standard errors of E[Ψ].
    pub feasibility_se: f64,
    /// Successive multiplier difference accepted as converged.
    pub convergence_tol: f64,
    pub adjoint: AdjointOptions,
}

impl Default for ConstrainedOptions {
    fn default() -> Self {
        Self {
            kappas: vec![5.0, 2.5, 1.25, 0.625],
            blocks: 4,
            search: SearchOptions::default(),
            mp: MpOptions::default(),
            terminal: TildeTerminal::ConstraintGradient,
            center_constraint: true,
            feasibility_se: 3.0,
            convergence_tol: 1e-2,
            adjoint: AdjointOptions::default(),
        }
    }
}

/// Penalised minimiser and multipliers at one κ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaStep {
    pub kappa: f64,
    pub control: Vec<f64>,
    pub j_kappa: f64,
    pub lambda: f64,
    pub mu: f64,
    pub upsilon0: f64,
    /// Inequality at v_κ with slack √κ.
    pub check: MpReport,
}

/// Outcome of the constrained verification.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstrainedReport {
    pub candidate: String,
    pub candidate_y0: f64,
    pub candidate_psi: f64,
    pub psi_std_err: f64,
    pub feasible: bool,
    pub steps: Vec<KappaStep>,
    /// max |λ² + μ² − 1| over the ladder.
    pub norm_error: f64,
    /// κ at which the limit multipliers were taken.
    pub limit_kappa: Option<f64>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    /// Inequality at the candidate with the limit multipliers.
    pub check: Option<MpReport>,
    pub passed: bool,
}

impl ConstrainedReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

struct Outcome {
    y0: f64,
    psi: f64,
}

fn outcome(traj: &Trajectory, constraint: &dyn Constraint) -> (f64, Vec<f64>) {
    let ens = &traj.ensemble;
    let k = ens.steps();
    let xhat = ens.xhat(k);
    let y0 = traj.backward.y0(0);
    (
        y0,
        ens.x(k)
            .iter()
            .map(|&x| constraint.psi(x, xhat, y0))
            .collect(),
    )
}

fn solve_all(
    coeffs: &dyn Coefficients,
    control: &ControlModel,
    x0: f64,
    noises: &[Noise],
    opts: &AdjointOptions,
) -> Result<Vec<(Trajectory, AdjointBundle)>> {
    noises
        .iter()
        .map(|nz| {
            let traj = solve_state(coeffs, control, x0, nz, &opts.bsde)?;
            let adj = AdjointBundle::solve(&Linearization::new(coeffs, &traj), opts)?;
            Ok((traj, adj))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn constrained_check_all(
    coeffs: &dyn Coefficients,
    constraint: &dyn Constraint,
    solved: &[(Trajectory, AdjointBundle)],
    kappa: f64,
    multipliers: (f64, f64),
    grid: &[f64],
    opts: &ConstrainedOptions,
    mp: &MpOptions,
    candidate: &str,
) -> Result<(MpReport, f64)> {
    let mut merged: Option<MpReport> = None;
    let mut ups = Vec::new();
    for (traj, adj) in solved {
        let lin = Linearization::new(coeffs, traj);
        let ctx = ConstraintContext::build(
            &lin,
            constraint,
            kappa,
            multipliers,
            opts.terminal,
            &opts.adjoint.bsde,
        )?;
        ups.push(ctx.upsilon0);
        let r = check_constrained(coeffs, traj, adj, &ctx, grid, mp, candidate)?;
        merged = Some(match merged {
            None => r,
            Some(m) => merge_reports(m, r),
        });
    }
    let report = merged.ok_or_else(|| Error::invalid("at least one chain scenario is required"))?;
    Ok((report, stats::mean(&ups)))
}

/// Pools the counts of two reports on the same grid.
pub fn merge_reports(a: MpReport, b: MpReport) -> MpReport {
    let points = a.points + b.points;
    let violations = a.violations + b.violations;
    let violation_fraction = if points == 0 {
        0.0
    } else {
        violations as f64 / points as f64
    };
    let wa = a.points as f64 / points.max(1) as f64;
    MpReport {
        candidate: a.candidate,
        violation_fraction,
        worst_violation: a.worst_violation.min(b.worst_violation),
        tol: wa * a.tol + (1.0 - wa) * b.tol,
        se_multiplier: a.se_multiplier,
        slack: a.slack,
        quantile: a.quantile,
        points,
        violations,
        p1_sup: match (a.p1_sup, b.p1_sup) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (x, y) => x.or(y),
        },
        verdict: if violation_fraction <= a.quantile {
            MpVerdict::Pass
        } else {
            MpVerdict::Fail
        },
    }
}

/// Penalised verification of the constrained maximum principle.
///
/// For each κ the block control minimising
/// J_κ(v) = {(Y^v(0) − Ȳ(0) + κ)² + E[Ψ^v]²}^½ is found by block search,
/// (λ_κ, μ_κ) are read off the minimiser and the constrained inequality is
/// checked at v_κ with slack √κ. The limit multipliers are those at the
/// largest κ whose successor differs by less than the convergence tolerance;
/// the inequality is then checked at the candidate without slack.
#[allow(clippy::too_many_arguments)]
pub fn constrained_verify(
    coeffs: &dyn Coefficients,
    constraint: &dyn Constraint,
    set: &ControlSet,
    candidate: &ControlModel,
    candidate_name: &str,
    x0: f64,
    noises: &[Noise],
    opts: &ConstrainedOptions,
) -> Result<ConstrainedReport> {
    if noises.is_empty() {
        return Err(Error::invalid("at least one chain scenario is required"));
    }
    if opts.kappas.is_empty() || opts.kappas.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
        return Err(Error::invalid(
            "the κ ladder must be non-empty and positive",
        ));
    }
    let horizon = noises[0].chain.horizon();
    let grid = set.grid();
    let base = solve_all(coeffs, candidate, x0, noises, &opts.adjoint)?;
    let mut base_psi = Vec::new();
    let mut pooled = Vec::new();
    let mut y_bar = 0.0;
    for (traj, _) in &base {
        let (y0, psi) = outcome(traj, constraint);
        y_bar += y0 / base.len() as f64;
        base_psi.push(stats::mean(&psi));
        pooled.extend(psi);
    }
    let candidate_psi = stats::mean(&base_psi);
    let psi_std_err = stats::std_err(&pooled);
    let feasible = candidate_psi.abs() <= opts.feasibility_se * psi_std_err + 1e-12;

    let mut cache: HashMap<Vec<u64>, Outcome> = HashMap::new();
    let mut evaluate = |vals: &[f64]| -> Result<(f64, f64)> {
        let key: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
        if let Some(o) = cache.get(&key) {
            return Ok((o.y0, o.psi));
        }
        let ctl = block_control(set, vals, horizon)?;
        let mut y = 0.0;
        let mut psi = 0.0;
        for (s, nz) in noises.iter().enumerate() {
            let traj = solve_state(coeffs, &ctl, x0, nz, &opts.adjoint.bsde)?;
            let (y0, p) = outcome(&traj, constraint);
            y += y0;
            psi += stats::mean(&p)
                - if opts.center_constraint {
                    base_psi[s]
                } else {
                    0.0
                };
        }
        let m = noises.len() as f64;
        cache.insert(
            key,
            Outcome {
                y0: y / m,
                psi: psi / m,
            },
        );
        Ok((y / m, psi / m))
    };

    let mut kappas = opts.kappas.clone();
    kappas.sort_by(|a, b| b.total_cmp(a));
    let mut steps = Vec::new();
    let mut norm_error: f64 = 0.0;
    for &kappa in &kappas {
        let mut objective = |vals: &[f64]| -> Result<f64> {
            let (y, psi) = evaluate(vals)?;
            Ok(penalty_multipliers(y - y_bar, kappa, psi).map_or(0.0, |m| m.0))
        };
        let found = block_search(&grid, opts.blocks, &opts.search, &mut objective)?;
        let (y, psi) = evaluate(&found.best)?;
        let (j, lambda, mu) = penalty_multipliers(y - y_bar, kappa, psi).ok_or_else(|| {
            Error::numerical(
                0,
                format!("J_κ vanished at κ = {kappa}: a feasible control beats the candidate"),
            )
        })?;
        norm_error = norm_error.max((lambda * lambda + mu * mu - 1.0).abs());
        let ctl = block_control(set, &found.best, horizon)?;
        let solved = solve_all(coeffs, &ctl, x0, noises, &opts.adjoint)?;
        let mp = MpOptions {
            slack: kappa.sqrt(),
            ..opts.mp.clone()
        };
        let name = format!("v_kappa[{kappa}]");
        let (check, upsilon0) = constrained_check_all(
            coeffs,
            constraint,
            &solved,
            kappa,
            (lambda, mu),
            &grid,
            opts,
            &mp,
            &name,
        )?;
        steps.push(KappaStep {
            kappa,
            control: found.best,
            j_kappa: j,
            lambda,
            mu,
            upsilon0,
            check,
        });
    }
    let limit = steps.windows(2).find_map(|w| {
        let d = (w[0].lambda - w[1].lambda)
            .abs()
            .max((w[0].mu - w[1].mu).abs());
        (d < opts.convergence_tol).then_some((w[0].kappa, w[0].lambda, w[0].mu))
    });
    let check = match limit {
        Some((kappa, lambda, mu)) => Some(
            constrained_check_all(
                coeffs,
                constraint,
                &base,
                kappa,
                (lambda, mu),
                &grid,
                opts,
                &opts.mp,
                candidate_name,
            )?
            .0,
        ),
        None => None,
    };
    let passed = norm_error <= 1e-10 && check.as_ref().is_some_and(|c| c.passed());
    Ok(ConstrainedReport {
        candidate: candidate_name.to_string(),
        candidate_y0: y_bar,
        candidate_psi,
        psi_std_err,
        feasible,
        steps,
        norm_error,
        limit_kappa: limit.map(|l| l.0),
        lambda: limit.map(|l| l.1),
        mu: limit.map(|l| l.2),
        check,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{lq_to_general, BilinearFamily, FamilyRegime, LqRegime};
    use crate::testkit::{constant, grid, lq_demo_regimes, noise, switching_noise};

    fn fam(r: FamilyRegime) -> BilinearFamily {
        BilinearFamily::new(vec![r], 10.0).unwrap()
    }

    fn ctx(v: f64, vbar: f64) -> HamiltonianContext {
        HamiltonianContext {
            base: Point::full(0.0, 0.0, 0.0, 0.0, 0.0, vbar, 0),
            v,
            p0: 2.0,
            p1: 1.0,
            q0: 0.5,
            pp0: 0.0,
            pp1: 0.0,
            means: CandidateMeans { b: v, ds2: 0.0 },
        }
    }

    #[test]
    fn hamiltonian_direct_substitution() {
        let c = fam(FamilyRegime {
            a3: 1.0,
            b0: 1.0,
            ..Default::default()
        });
        assert!((hamiltonian(&c, &ctx(3.0, 3.0)) - 9.5).abs() < 1e-12);
        let zero = HamiltonianContext {
            p0: 0.0,
            p1: 0.0,
            q0: 0.0,
            ..ctx(3.0, 1.0)
        };
        assert_eq!(hamiltonian(&c, &zero), 0.0);
    }

    #[test]
    fn h_function_quadratic_term() {
        let c = fam(FamilyRegime {
            b3: 1.0,
            ..Default::default()
        });
        let x = HamiltonianContext {
            p0: 0.0,
            p1: 0.0,
            q0: 0.0,
            pp0: 2.0,
            pp1: 0.0,
            ..ctx(3.0, 0.0)
        };
        assert!((h_function(&c, &x) - 9.0).abs() < 1e-12);
        let same = HamiltonianContext {
            pp0: 2.0,
            pp1: 5.0,
            ..ctx(0.7, 0.7)
        };
        assert_eq!(h_function(&c, &same), hamiltonian(&c, &same));
        let free = fam(FamilyRegime {
            a3: 1.0,
            b0: 1.0,
            c5: 1.0,
            ..Default::default()
        });
        let x = HamiltonianContext {
            pp0: 2.0,
            pp1: 1.0,
            ..ctx(3.0, -1.0)
        };
        assert_eq!(h_function(&free, &x), hamiltonian(&free, &x));
    }

    #[test]
    fn z_shift_enters_the_driver() {
        let c = fam(FamilyRegime {
            b3: 1.0,
            c4: 1.0,
            ..Default::default()
        });
        let x = HamiltonianContext {
            p1: 0.0,
            q0: 0.0,
            ..ctx(1.5, 0.5)
        };
        // f = z + p⁰δσ = 2·1 plus p⁰b = 0 and q⁰σ = 0.
        assert!((hamiltonian(&c, &x) - 2.0).abs() < 1e-12);
    }

    fn solved(c: &dyn Coefficients, v: f64, nz: &Noise) -> (Trajectory, AdjointBundle) {
        let traj = solve_state(c, &constant(v), 0.0, nz, &BsdeOptions::default()).unwrap();
        let adj = AdjointBundle::solve(&Linearization::new(c, &traj), &AdjointOptions::default())
            .unwrap();
        (traj, adj)
    }

    #[test]
    fn singleton_grid_has_no_violations() {
        let lq = LqCoefficients::new(lq_demo_regimes()).unwrap();
        let c = lq_to_general(&lq);
        let nz = switching_noise(500, 20, 3);
        let (traj, adj) = solved(&c, 1.0, &nz);
        let r = check_mp(&c, &traj, &adj, &[1.0], &MpOptions::default(), "v=1").unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.worst_violation, 0.0);
        assert!(r.passed());
        let r = check_mp_lq(&lq, &traj, &adj, &[1.0], &MpOptions::default(), "v=1").unwrap();
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn bang_bang_lq_forces_minimum() {
        let lq = LqCoefficients::uniform(
            LqRegime {
                b0: 1.0,
                c5: 1.0,
                ..Default::default()
            },
            1,
        );
        let c = lq_to_general(&lq);
        let nz = noise(400, 10, 4);
        let g = grid().grid();
        let (traj, adj) = solved(&c, -1.0, &nz);
        let r = check_mp_lq(&lq, &traj, &adj, &g, &MpOptions::default(), "min").unwrap();
        assert_eq!(r.violations, 0);
        let (traj, adj) = solved(&c, 0.0, &nz);
        let r = check_mp_lq(&lq, &traj, &adj, &g, &MpOptions::default(), "mid").unwrap();
        assert!(r.violation_fraction > 0.3, "{r:?}");
        assert!(!r.passed());
    }

    #[test]
    fn general_and_lq_checks_agree() {
        let lq = LqCoefficients::new(lq_demo_regimes()).unwrap();
        let c = lq_to_general(&lq);
        let nz = switching_noise(1000, 20, 5);
        let g = grid().grid();
        for v in [0.0, 1.0] {
            let (traj, adj) = solved(&c, v, &nz);
            let a = check_mp(&c, &traj, &adj, &g, &MpOptions::default(), "g").unwrap();
            let b = check_mp_lq(&lq, &traj, &adj, &g, &MpOptions::default(), "l").unwrap();
            assert!(
                (a.violation_fraction - b.violation_fraction).abs() < 0.01,
                "{a:?} {b:?}"
            );
            assert!(
                (a.worst_violation - b.worst_violation).abs()
                    < 1e-8 * (1.0 + b.worst_violation.abs())
            );
        }
    }

    #[test]
    fn first_order_check_agrees_when_sigma_is_control_free() {
        let lq = LqCoefficients::uniform(
            LqRegime {
                a3: 1.0,
                b0: 0.5,
                c5: 0.3,
                d1: 1.0,
                ..Default::default()
            },
            1,
        );
        let c = lq_to_general(&lq);
        let nz = noise(800, 20, 6);
        let g = grid().grid();
        let (traj, adj) = solved(&c, 0.5, &nz);
        let full = check_mp(&c, &traj, &adj, &g, &MpOptions::default(), "full").unwrap();
        let first = MpOptions {
            second_order: false,
            ..Default::default()
        };
        let lin = check_mp(&c, &traj, &adj, &g, &first, "first").unwrap();
        assert_eq!(full.verdict, lin.verdict);
        assert_eq!(full.violations, lin.violations);
    }

    #[test]
    fn block_search_exhaustive_and_ties() {
        let g = [-1.0, 0.0, 1.0];
        let mut obj = |v: &[f64]| -> Result<f64> { Ok((v[0] - 0.2).powi(2) + v[1].abs()) };
        let r = block_search(&g, 2, &SearchOptions::default(), &mut obj).unwrap();
        assert!(r.exhaustive && !r.budget_exceeded);
        assert_eq!(r.table.len(), 9);
        assert_eq!(r.best, vec![0.0, 0.0]);
        let mut flat = |_: &[f64]| -> Result<f64> { Ok(1.0) };
        let r = block_search(&g, 2, &SearchOptions::default(), &mut flat).unwrap();
        assert_eq!(r.best, vec![-1.0, -1.0]);
        let opts = SearchOptions {
            budget: 4,
            ..Default::default()
        };
        let r = block_search(&g, 2, &opts, &mut obj).unwrap();
        assert!(r.budget_exceeded);
        assert_eq!(r.table.len(), 4);
    }

    #[test]
    fn coordinate_descent_finds_separable_minimum() {
        let g: Vec<f64> = (0..11).map(|j| j as f64 / 10.0).collect();
        let target = [0.3, 0.7, 0.1, 0.9, 0.5, 0.2];
        let mut obj = |v: &[f64]| -> Result<f64> {
            Ok(v.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum())
        };
        let opts = SearchOptions {
            max_exhaustive: 1000,
            ..Default::default()
        };
        let r = block_search(&g, 6, &opts, &mut obj).unwrap();
        assert!(!r.exhaustive);
        for (a, b) in r.best.iter().zip(target) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn brute_force_linear_cost_picks_minimum() {
        let lq = LqCoefficients::uniform(
            LqRegime {
                b0: 1.0,
                c5: 1.0,
                ..Default::default()
            },
            1,
        );
        let c = lq_to_general(&lq);
        let nz = [noise(200, 8, 1)];
        let r = lq_brute_force(
            &c,
            &grid(),
            2,
            0.0,
            &nz,
            &BsdeOptions::default(),
            &SearchOptions::default(),
        )
        .unwrap();
        assert_eq!(r.best, vec![-1.0, -1.0]);
        assert_eq!(r.table.len(), 25);
        let free = lq_to_general(&LqCoefficients::uniform(
            LqRegime {
                b0: 1.0,
                d1: 1.0,
                ..Default::default()
            },
            1,
        ));
        let r = lq_brute_force(
            &free,
            &grid(),
            2,
            0.0,
            &nz,
            &BsdeOptions::default(),
            &SearchOptions::default(),
        )
        .unwrap();
        let (lo, hi) = stats::min_max(&r.table.iter().map(|row| row.cost).collect::<Vec<_>>());
        assert!(hi - lo < 1e-10);
    }

    fn constrained_problem() -> (BilinearFamily, QuadraticConstraint) {
        let lq = LqCoefficients::uniform(
            LqRegime {
                a3: 1.0,
                b0: 0.5,
                c5: 1.0,
                ..Default::default()
            },
            1,
        );
        let q = QuadraticConstraint {
            cx: 1.0,
            cy: 1.0,
            c: 1.0,
            ..Default::default()
        };
        (lq_to_general(&lq), q)
    }

    #[test]
    fn vacuous_constraint_gives_unit_lambda() {
        let (c, _) = constrained_problem();
        let zero = QuadraticConstraint::default();
        let nz = [noise(300, 8, 2)];
        let opts = ConstrainedOptions {
            kappas: vec![1.0, 0.5],
            blocks: 2,
            ..Default::default()
        };
        let r =
            constrained_verify(&c, &zero, &grid(), &constant(-1.0), "c", 0.0, &nz, &opts).unwrap();
        for s in &r.steps {
            assert_eq!(s.mu, 0.0);
            assert!((s.lambda.abs() - 1.0).abs() < 1e-12);
        }
        assert!(r.norm_error <= 1e-10);
    }

    #[test]
    fn forced_control_passes_constrained_check() {
        let (c, q) = constrained_problem();
        let nz = [noise(400, 16, 3)];
        let opts = ConstrainedOptions {
            blocks: 4,
            ..Default::default()
        };
        let r =
            constrained_verify(&c, &q, &grid(), &constant(0.5), "forced", 0.0, &nz, &opts).unwrap();
        assert!(r.feasible, "{r:?}");
        assert!(r.norm_error <= 1e-10);
        let (l, m) = (r.lambda.unwrap(), r.mu.unwrap());
        assert!(
            (l - 2.0 / 5f64.sqrt()).abs() < 1e-6 && (m + 1.0 / 5f64.sqrt()).abs() < 1e-6,
            "{l} {m}"
        );
        assert!(r.passed, "{:?}", r.check);
        let off =
            constrained_verify(&c, &q, &grid(), &constant(0.0), "off", 0.0, &nz, &opts).unwrap();
        assert!(!off.feasible);
    }
}
