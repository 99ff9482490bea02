//! Spike variations: first- and second-order variational equations, the
//! variational BSDEs, structural identities, rate fits over an ε ladder and
//! the cost expansion check.
//!
//! Every BSDE of one ladder point (base, perturbed, Y¹, Y², Ỹ) is regressed on
//! one shared design built from X̄ and the variational states, so regression
//! errors of difference processes scale with the differences themselves.

use std::io::Write;

use serde::Serialize;

use crate::adjoint::{l2_time, solve_auxiliary_with, AdjointBundle, AdjointOptions, Linearization};
use crate::bsde::{solve_bsde, solve_cost, BackwardSolution, FeatureSet, Trajectory};
use crate::error::{Error, Result};
use crate::forward::{simulate_forward, Noise, ParticleEnsemble};
use crate::scenario::{spike_overlay, Coefficients, ControlModel, SpikeWindow};
use crate::stats;

/// Spike window E_ε together with the control used on it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikeSpec {
    pub window: SpikeWindow,
    pub alt: ControlModel,
}

/// Absolute level below which a pathwise difference is treated as roundoff.
pub const ROUNDOFF_FLOOR: f64 = 1e-12;

/// Default ε ladder of rate studies.
pub const DEFAULT_LADDER: [f64; 5] = [0.2, 0.1, 0.05, 0.025, 0.0125];

/// δ-terms of one step, evaluated along the base trajectory.
#[derive(Debug, Clone)]
pub struct StepDeltas {
    pub alt: Vec<f64>,
    pub db: Vec<f64>,
    pub ds: Vec<f64>,
    pub dbx: Vec<f64>,
    pub dsx: Vec<f64>,
    /// Cross-particle mean of δb.
    pub db_hat: f64,
    /// Cross-particle mean of (δσ)².
    pub ds2_hat: f64,
}

impl SpikeSpec {
    pub fn new(window: SpikeWindow, alt: ControlModel) -> Self {
        Self { window, alt }
    }

    /// E_ε = [t0, t0 + ε].
    pub fn single(
        t0: f64,
        eps: f64,
        horizon: f64,
        steps: usize,
        alt: ControlModel,
    ) -> Result<Self> {
        Ok(Self::new(
            SpikeWindow::single(t0, eps, horizon, steps)?,
            alt,
        ))
    }

    pub fn eps(&self) -> f64 {
        self.window.measure()
    }

    pub fn is_trivial(&self) -> bool {
        self.window.is_empty()
    }

    pub fn step_deltas(
        &self,
        coeffs: &dyn Coefficients,
        ens: &ParticleEnsemble,
        k: usize,
    ) -> StepDeltas {
        let n = ens.n();
        let t = ens.node(k);
        let xh = ens.xhat(k);
        let r = ens.regime(k);
        let mut d = StepDeltas {
            alt: vec![0.0; n],
            db: vec![0.0; n],
            ds: vec![0.0; n],
            dbx: vec![0.0; n],
            dsx: vec![0.0; n],
            db_hat: 0.0,
            ds2_hat: 0.0,
        };
        for i in 0..n {
            let base = ens.point(k, i);
            let mut alt = base;
            alt.v = self.alt.eval(t, ens.x(k)[i], xh, r);
            d.alt[i] = alt.v;
            let (bb, ba) = (coeffs.b_derivs(&base), coeffs.b_derivs(&alt));
            let (sb, sa) = (coeffs.sigma_derivs(&base), coeffs.sigma_derivs(&alt));
            d.db[i] = ba.value - bb.value;
            d.ds[i] = sa.value - sb.value;
            d.dbx[i] = ba.dx - bb.dx;
            d.dsx[i] = sa.dx - sb.dx;
        }
        d.db_hat = stats::mean(&d.db);
        d.ds2_hat = d.ds.iter().map(|s| s * s).sum::<f64>() / n as f64;
        d
    }

    /// δ-terms on every step of the window, `None` elsewhere.
    pub fn all_deltas(
        &self,
        coeffs: &dyn Coefficients,
        ens: &ParticleEnsemble,
    ) -> Vec<Option<StepDeltas>> {
        (0..ens.steps())
            .map(|k| {
                (!self.is_trivial() && self.window.contains_step(k))
                    .then(|| self.step_deltas(coeffs, ens, k))
            })
            .collect()
    }
}

/// Solution of a linear variational SDE and its conditional mean.
#[derive(Debug, Clone)]
pub struct Variation {
    /// Per-particle path laid out as `[k * n + i]`.
    pub x: Vec<f64>,
    /// Cross-particle mean per step.
    pub xhat: Vec<f64>,
    /// Euler solution of the filtered ODE for the conditional mean.
    pub filtered: Vec<f64>,
}

impl Variation {
    fn zeros(n: usize, steps: usize) -> Self {
        Self {
            x: vec![0.0; (steps + 1) * n],
            xhat: vec![0.0; steps + 1],
            filtered: vec![0.0; steps + 1],
        }
    }

    /// max_k |X̂_k − filtered_k|.
    pub fn filter_gap(&self) -> f64 {
        self.xhat
            .iter()
            .zip(&self.filtered)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// First variational SDE: drift b_x X¹ + b_{x′} X̂¹ + δb 1_E, diffusion
/// σ_x X¹ + σ_{x′} X̂¹ + δσ 1_E, X¹(0) = 0.
pub fn solve_first_variation(
    lin: &Linearization,
    deltas: &[Option<StepDeltas>],
) -> Result<Variation> {
    let ens = &lin.traj.ensemble;
    let (n, steps, dt) = (ens.n(), ens.steps(), ens.dt());
    let mut out = Variation::zeros(n, steps);
    if deltas.iter().all(Option::is_none) {
        return Ok(out);
    }
    for k in 0..steps {
        let dw = ens.dw(k);
        let xh = out.xhat[k];
        let d = deltas[k].as_ref();
        let mut bx_mean = 0.0;
        for i in 0..n {
            let l = lin.at(k, i);
            bx_mean += l.b.dx;
            let x = out.x[k * n + i];
            let (fb, fs) = d.map_or((0.0, 0.0), |d| (d.db[i], d.ds[i]));
            out.x[(k + 1) * n + i] = x
                + (l.b.dx * x + l.b.dxp * xh + fb) * dt
                + (l.s.dx * x + l.s.dxp * xh + fs) * dw[i];
        }
        bx_mean /= n as f64;
        let next = &out.x[(k + 1) * n..(k + 2) * n];
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(k + 1, "non-finite first variation"));
        }
        out.xhat[k + 1] = stats::mean(next);
        out.filtered[k + 1] = out.filtered[k]
            + ((bx_mean + lin.bxp_hat[k]) * out.filtered[k] + d.map_or(0.0, |d| d.db_hat)) * dt;
    }
    Ok(out)
}

/// Second variational SDE with forcing ½b_xx (X¹)² + δb_x X¹ 1_E (and the σ analogue).
pub fn solve_second_variation(
    lin: &Linearization,
    deltas: &[Option<StepDeltas>],
    first: &Variation,
) -> Result<Variation> {
    let ens = &lin.traj.ensemble;
    let (n, steps, dt) = (ens.n(), ens.steps(), ens.dt());
    let mut out = Variation::zeros(n, steps);
    if first.x.iter().all(|v| *v == 0.0) {
        return Ok(out);
    }
    for k in 0..steps {
        let dw = ens.dw(k);
        let xh = out.xhat[k];
        let d = deltas[k].as_ref();
        let (mut bx_mean, mut forcing_mean) = (0.0, 0.0);
        for i in 0..n {
            let l = lin.at(k, i);
            let x1 = first.x[k * n + i];
            let x = out.x[k * n + i];
            let (dbx, dsx) = d.map_or((0.0, 0.0), |d| (d.dbx[i], d.dsx[i]));
            let fb = 0.5 * l.b.dxx * x1 * x1 + dbx * x1;
            let fs = 0.5 * l.s.dxx * x1 * x1 + dsx * x1;
            bx_mean += l.b.dx;
            forcing_mean += fb;
            out.x[(k + 1) * n + i] = x
                + (l.b.dx * x + l.b.dxp * xh + fb) * dt
                + (l.s.dx * x + l.s.dxp * xh + fs) * dw[i];
        }
        bx_mean /= n as f64;
        forcing_mean /= n as f64;
        let next = &out.x[(k + 1) * n..(k + 2) * n];
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(k + 1, "non-finite second variation"));
        }
        out.xhat[k + 1] = stats::mean(next);
        out.filtered[k + 1] =
            out.filtered[k] + ((bx_mean + lin.bxp_hat[k]) * out.filtered[k] + forcing_mean) * dt;
    }
    Ok(out)
}

/// First- and second-order variational BSDEs.
pub fn solve_variational_bsdes(
    lin: &Linearization,
    adj: &AdjointBundle,
    deltas: &[Option<StepDeltas>],
    first: &Variation,
    second: &Variation,
    features: &FeatureSet,
    opts: &AdjointOptions,
) -> Result<(BackwardSolution, BackwardSolution)> {
    let ens = &lin.traj.ensemble;
    let (n, steps) = (ens.n(), ens.steps());
    if first.x.iter().all(|v| *v == 0.0) && second.x.iter().all(|v| *v == 0.0) {
        let z = BackwardSolution::zeros(1, n, steps, ens.dt());
        return Ok((z.clone(), z));
    }
    let mut t1 = vec![0.0; n];
    let mut t2 = vec![0.0; n];
    for i in 0..n {
        let d = lin.terminal(i);
        let x1 = first.x[steps * n + i];
        t1[i] = d.dx * x1 + d.dxp * first.xhat[steps];
        t2[i] = d.dx * second.x[steps * n + i] + d.dxp * second.xhat[steps] + 0.5 * d.dxx * x1 * x1;
    }
    let driver1 = |k: usize, i: usize, y: &[f64], z: &[f64], out: &mut [f64]| {
        let l = lin.at(k, i);
        let x1 = first.x[k * n + i];
        let mut v = l.f.dx * x1 + l.f.dxp * first.xhat[k] + l.f.dy * y[0] + l.f.dz * z[0];
        if let Some(d) = &deltas[k] {
            let p0 = adj.first.p0(k)[i];
            let p1 = adj.first.p1(k)[i];
            let q0 = adj.first.q0(k)[i];
            v -= l.f.dz * p0 * d.ds[i];
            v -= q0 * d.ds[i] + p0 * d.db[i] + p1 * d.db_hat;
        }
        out[0] = v;
    };
    let y1 = solve_bsde(features, ens.brownian(), &[t1], &driver1, &opts.bsde)?;
    let driver2 = |k: usize, i: usize, y: &[f64], z: &[f64], out: &mut [f64]| {
        let l = lin.at(k, i);
        let x1 = first.x[k * n + i];
        let p0 = adj.first.p0(k)[i];
        let q0 = adj.first.q0(k)[i];
        let mut v =
            l.f.dx * second.x[k * n + i] + l.f.dxp * second.xhat[k] + l.f.dy * y[0] + l.f.dz * z[0];
        v += 0.5 * l.f.xyz_quadratic([1.0, p0, p0 * l.s.dx + q0]) * x1 * x1;
        if let Some(d) = &deltas[k] {
            let p1 = adj.first.p1(k)[i];
            let mut shifted = l.point;
            shifted.z += p0 * d.ds[i];
            shifted.v = d.alt[i];
            let df = lin.coeffs.f(&shifted) - lin.coeffs.f(&l.point);
            v += df + q0 * d.ds[i] + p0 * d.db[i] + p1 * d.db_hat;
        }
        out[0] = v;
    };
    let y2 = solve_bsde(features, ens.brownian(), &[t2], &driver2, &opts.bsde)?;
    Ok((y1, y2))
}

/// Every process of one spike experiment on one chain scenario.
pub struct VariationalBundle {
    pub eps: f64,
    pub first: Variation,
    pub second: Variation,
    pub perturbed: ParticleEnsemble,
    /// Base cost BSDE re-solved on the shared design.
    pub ybar: BackwardSolution,
    pub yeps: BackwardSolution,
    pub y1: BackwardSolution,
    pub y2: BackwardSolution,
    pub ytilde: BackwardSolution,
    pub deltas: Vec<Option<StepDeltas>>,
}

impl VariationalBundle {
    pub fn n(&self) -> usize {
        self.perturbed.n()
    }

    pub fn steps(&self) -> usize {
        self.perturbed.steps()
    }
}

/// Runs the whole spike pipeline for one ε on one chain scenario.
pub fn run_spike(
    lin: &Linearization,
    adj: &AdjointBundle,
    base_control: &ControlModel,
    spike: &SpikeSpec,
    x0: f64,
    noise: &Noise,
    opts: &AdjointOptions,
) -> Result<VariationalBundle> {
    let coeffs = lin.coeffs;
    let base = &lin.traj.ensemble;
    let deltas = spike.all_deltas(coeffs, base);
    let first = solve_first_variation(lin, &deltas)?;
    let second = solve_second_variation(lin, &deltas, &first)?;
    let control = spike_overlay(base_control, &spike.alt, &spike.window);
    let perturbed = simulate_forward(coeffs, &control, x0, noise)?;
    let diff: Vec<f64> = perturbed
        .x_all()
        .iter()
        .zip(base.x_all())
        .map(|(a, b)| a - b)
        .collect();
    let features = FeatureSet::of(base, coeffs.regimes())
        .with_extra(&first.x)
        .with_extra(&second.x)
        .with_extra(&diff);
    let ybar = solve_cost(coeffs, base.clone(), Some(features.clone()), &opts.bsde)?.backward;
    let yeps = solve_cost(
        coeffs,
        perturbed.clone(),
        Some(features.clone()),
        &opts.bsde,
    )?
    .backward;
    let (y1, y2) = solve_variational_bsdes(lin, adj, &deltas, &first, &second, &features, opts)?;
    let ytilde = solve_auxiliary_with(lin, &adj.first, &adj.second, spike, &features, opts)?;
    Ok(VariationalBundle {
        eps: spike.eps(),
        first,
        second,
        perturbed,
        ybar,
        yeps,
        y1,
        y2,
        ytilde,
        deltas,
    })
}

/// Residual of one structural identity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityResidual {
    pub identity: String,
    pub relative_rms: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn relative_rms(res: &[f64], reference: &[f64]) -> f64 {
    let r: f64 = res.iter().map(|v| v * v).sum();
    let q: f64 = reference.iter().map(|v| v * v).sum();
    if r == 0.0 {
        0.0
    } else if q == 0.0 {
        f64::INFINITY
    } else {
        (r / q).sqrt()
    }
}

/// Tolerances of the identity checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentityTolerances {
    pub first_order_y: f64,
    pub first_order_z: f64,
    pub second_order_y: f64,
    pub second_order_z: f64,
    pub full_expansion: f64,
}

impl Default for IdentityTolerances {
    fn default() -> Self {
        Self {
            first_order_y: 0.05,
            first_order_z: 0.25,
            second_order_y: 0.25,
            second_order_z: 0.5,
            full_expansion: 0.10,
        }
    }
}

/// Relative RMS residuals of the first-order relation (Y and Z), the
/// second-order relation (Y and Z) and the full expansion of Y^ε − Ȳ.
pub fn check_identities(
    lin: &Linearization,
    adj: &AdjointBundle,
    b: &VariationalBundle,
    tol: &IdentityTolerances,
) -> Vec<IdentityResidual> {
    let (n, steps) = (b.n(), b.steps());
    let xh1 = &b.first.xhat;
    let xh2 = &b.second.xhat;
    let (mut r1y, mut ref1y, mut r1z, mut ref1z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut r2y, mut ref2y, mut r2z, mut ref2z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut rf, mut reff) = (Vec::new(), Vec::new());
    for k in 0..=steps {
        let x1 = &b.first.x[k * n..(k + 1) * n];
        let x2 = &b.second.x[k * n..(k + 1) * n];
        let x1sq_hat = x1.iter().map(|v| v * v).sum::<f64>() / n as f64;
        for i in 0..n {
            let p0 = adj.first.p0(k)[i];
            let p1 = adj.first.p1(k)[i];
            let pp0 = adj.second.p0(k)[i];
            let pp1 = adj.second.p1(k)[i];
            let y1 = b.y1.y(0, k)[i];
            let y2 = b.y2.y(0, k)[i];
            let yt = b.ytilde.y(0, k)[i];
            let first_y = p0 * x1[i] + p1 * xh1[k];
            let second_y =
                p0 * x2[i] + p1 * xh2[k] + 0.5 * pp0 * x1[i] * x1[i] + 0.5 * pp1 * x1sq_hat + yt;
            r1y.push(y1 - first_y);
            ref1y.push(y1);
            r2y.push(y2 - second_y);
            ref2y.push(y2);
            let dy = b.yeps.y(0, k)[i] - b.ybar.y(0, k)[i];
            rf.push(dy - first_y - second_y);
            reff.push(dy);
            if k < steps {
                let l = lin.at(k, i);
                let q0 = adj.first.q0(k)[i];
                let q1 = adj.first.q1(k)[i];
                let qq0 = adj.second.q0(k)[i];
                let qq1 = adj.second.q1(k)[i];
                let (ds, dsx) = b.deltas[k]
                    .as_ref()
                    .map_or((0.0, 0.0), |d| (d.ds[i], d.dsx[i]));
                let z1 = b.y1.z(0, k)[i];
                let z2 = b.y2.z(0, k)[i];
                let first_z = (p0 * l.s.dx + q0) * x1[i] + (p0 * l.s.dxp + q1) * xh1[k] + p0 * ds;
                let second_z = (p0 * l.s.dx + q0) * x2[i]
                    + (p0 * l.s.dxp + q1) * xh2[k]
                    + 0.5 * x1[i] * x1[i] * (p0 * l.s.dxx + 2.0 * pp0 * l.s.dx + qq0)
                    + 0.5 * x1sq_hat * qq1
                    + x1[i] * (pp0 * ds + p0 * dsx)
                    + b.ytilde.z(0, k)[i];
                r1z.push(z1 - first_z);
                ref1z.push(z1);
                r2z.push(z2 - second_z);
                ref2z.push(z2);
            }
        }
    }
    let mk = |name: &str, r: &[f64], q: &[f64], t: f64| {
        let v = relative_rms(r, q);
        IdentityResidual {
            identity: name.to_string(),
            relative_rms: v,
            tolerance: t,
            passed: v <= t,
        }
    };
    vec![
        mk("first_order_y", &r1y, &ref1y, tol.first_order_y),
        mk("first_order_z", &r1z, &ref1z, tol.first_order_z),
        mk("second_order_y", &r2y, &ref2y, tol.second_order_y),
        mk("second_order_z", &r2z, &ref2z, tol.second_order_z),
        mk("full_expansion", &rf, &reff, tol.full_expansion),
    ]
}

pub fn write_identity_csv<W: Write>(rows: &[(f64, IdentityResidual)], mut w: W) -> Result<()> {
    writeln!(w, "identity,eps,relative_rms,tolerance,verdict")?;
    for (eps, r) in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.identity,
            eps,
            r.relative_rms,
            r.tolerance,
            if r.passed { "pass" } else { "fail" }
        )?;
    }
    Ok(())
}

/// Expected log-log slope of a rate quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Band {
    /// |slope − center| ≤ tol.
    Within { center: f64, tol: f64 },
    /// slope > min.
    Above { min: f64 },
}

impl Band {
    pub fn contains(&self, s: f64) -> bool {
        match *self {
            Band::Within { center, tol } => (s - center).abs() <= tol,
            Band::Above { min } => s > min,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Band::Within { center, tol } => format!("{center}+-{tol}"),
            Band::Above { min } => format!(">{min}"),
        }
    }
}

/// Quantities tracked over the ε ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RateQuantity {
    Delta1Xhat,
    Delta1X,
    X1hat,
    X1,
    Delta2Xhat,
    Delta2X,
    Y1,
    Delta1Y,
    Delta2Y,
    X2hat,
    X2,
    Delta3X,
    Delta3Y,
}

impl RateQuantity {
    pub const ALL: [RateQuantity; 13] = [
        RateQuantity::Delta1Xhat,
        RateQuantity::Delta1X,
        RateQuantity::X1hat,
        RateQuantity::X1,
        RateQuantity::Delta2Xhat,
        RateQuantity::Delta2X,
        RateQuantity::Y1,
        RateQuantity::Delta1Y,
        RateQuantity::Delta2Y,
        RateQuantity::X2hat,
        RateQuantity::X2,
        RateQuantity::Delta3X,
        RateQuantity::Delta3Y,
    ];

    /// Quantities gated by the rate suite; the others are diagnostic.
    pub const GATED: [RateQuantity; 8] = [
        RateQuantity::Delta1X,
        RateQuantity::Delta1Xhat,
        RateQuantity::X1,
        RateQuantity::X1hat,
        RateQuantity::X2,
        RateQuantity::Delta2Y,
        RateQuantity::Delta3X,
        RateQuantity::Delta3Y,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RateQuantity::Delta1Xhat => "delta1_xhat",
            RateQuantity::Delta1X => "delta1_x",
            RateQuantity::X1hat => "x1_hat",
            RateQuantity::X1 => "x1",
            RateQuantity::Delta2Xhat => "delta2_xhat",
            RateQuantity::Delta2X => "delta2_x",
            RateQuantity::Y1 => "y1",
            RateQuantity::Delta1Y => "delta1_y",
            RateQuantity::Delta2Y => "delta2_y",
            RateQuantity::X2hat => "x2_hat",
            RateQuantity::X2 => "x2",
            RateQuantity::Delta3X => "delta3_x",
            RateQuantity::Delta3Y => "delta3_y",
        }
    }

    /// Moment exponent actually used for a nominal β.
    pub fn exponent(self, beta: f64) -> f64 {
        match self {
            RateQuantity::Delta2Y => 4.0,
            RateQuantity::Delta3X | RateQuantity::Delta3Y => 2.0,
            _ => beta,
        }
    }

    pub fn band(self, beta: f64) -> Band {
        match self {
            RateQuantity::Delta1Xhat | RateQuantity::X1hat => Band::Within {
                center: beta,
                tol: 0.2 * beta,
            },
            RateQuantity::Delta1X | RateQuantity::X1 | RateQuantity::Y1 | RateQuantity::Delta1Y => {
                Band::Within {
                    center: beta / 2.0,
                    tol: 0.3,
                }
            }
            RateQuantity::Delta2X | RateQuantity::X2 => Band::Within {
                center: beta,
                tol: 0.3,
            },
            RateQuantity::Delta2Xhat => Band::Above {
                min: 2.3 * beta / 2.0,
            },
            RateQuantity::X2hat => Band::Within {
                center: 1.5 * beta,
                tol: 0.5,
            },
            RateQuantity::Delta2Y | RateQuantity::Delta3X | RateQuantity::Delta3Y => {
                Band::Above { min: 2.0 }
            }
        }
    }

    /// Whether the metric is a function of the chain only (conditional means).
    fn is_filtered(self) -> bool {
        matches!(
            self,
            RateQuantity::Delta1Xhat
                | RateQuantity::X1hat
                | RateQuantity::Delta2Xhat
                | RateQuantity::X2hat
        )
    }
}

fn sup_pow(path: &[f64], n: usize, steps: usize, i: usize, e: f64) -> f64 {
    (0..=steps)
        .map(|k| path[k * n + i].abs())
        .fold(0.0, f64::max)
        .powf(e)
}

/// Metric samples for one quantity on one bundle (one per particle, or one
/// per chain scenario for conditional means) and the Monte Carlo noise floor,
/// the metric level of the per-step standard error of the underlying process.
fn metric_samples(
    b: &VariationalBundle,
    base: &ParticleEnsemble,
    q: RateQuantity,
    beta: f64,
) -> (Vec<f64>, f64) {
    let (n, steps, dt) = (b.n(), b.steps(), base.dt());
    let e = q.exponent(beta);
    let pert = b.perturbed.x_all();
    let bar = base.x_all();
    let x1 = &b.first.x;
    let x2 = &b.second.x;
    let path: Vec<f64> = match q {
        RateQuantity::Delta1X | RateQuantity::Delta1Xhat => {
            pert.iter().zip(bar).map(|(a, c)| a - c).collect()
        }
        RateQuantity::X1 | RateQuantity::X1hat => x1.clone(),
        RateQuantity::Delta2X | RateQuantity::Delta2Xhat => {
            (0..pert.len()).map(|j| pert[j] - bar[j] - x1[j]).collect()
        }
        RateQuantity::X2 | RateQuantity::X2hat => x2.clone(),
        RateQuantity::Delta3X => (0..pert.len())
            .map(|j| pert[j] - bar[j] - x1[j] - x2[j])
            .collect(),
        RateQuantity::Y1 => b.y1.y_all(0).to_vec(),
        RateQuantity::Delta1Y => diff_y(b, false, false),
        RateQuantity::Delta2Y => diff_y(b, true, false),
        RateQuantity::Delta3Y => diff_y(b, true, true),
    };
    if q.is_filtered() {
        let mut sup: f64 = 0.0;
        let mut floor: f64 = 0.0;
        for k in 0..=steps {
            let row = &path[k * n..(k + 1) * n];
            sup = sup.max(stats::mean(row).abs());
            floor = floor.max(stats::std_err(row));
        }
        return (vec![sup.powf(e)], floor.powf(e));
    }
    let zpath: Option<Vec<f64>> = match q {
        RateQuantity::Y1 => Some(b.y1.z_all(0).to_vec()),
        RateQuantity::Delta1Y => Some(diff_z(b, false, false)),
        RateQuantity::Delta2Y => Some(diff_z(b, true, false)),
        RateQuantity::Delta3Y => Some(diff_z(b, true, true)),
        _ => None,
    };
    let mut floor = ROUNDOFF_FLOOR.powf(e);
    for k in 0..=steps {
        floor = floor.max(stats::std_err(&path[k * n..(k + 1) * n]).powf(e));
    }
    let mut samples: Vec<f64> = (0..n).map(|i| sup_pow(&path, n, steps, i, e)).collect();
    if let Some(z) = zpath {
        for (i, s) in samples.iter_mut().enumerate() {
            let int: f64 = (0..steps).map(|k| z[k * n + i] * z[k * n + i] * dt).sum();
            if q == RateQuantity::Delta3Y {
                *s += int;
            } else {
                *s += int.powf(e / 2.0);
            }
        }
    }
    if q == RateQuantity::Delta3X {
        let mut sup: f64 = 0.0;
        for k in 0..=steps {
            sup = sup.max(stats::mean(&path[k * n..(k + 1) * n]).abs());
        }
        for s in samples.iter_mut() {
            *s += sup * sup;
        }
    }
    (samples, floor)
}

fn diff_y(b: &VariationalBundle, minus1: bool, minus2: bool) -> Vec<f64> {
    let len = b.yeps.y_all(0).len();
    (0..len)
        .map(|j| {
            let mut v = b.yeps.y_all(0)[j] - b.ybar.y_all(0)[j];
            if minus1 {
                v -= b.y1.y_all(0)[j];
            }
            if minus2 {
                v -= b.y2.y_all(0)[j];
            }
            v
        })
        .collect()
}

fn diff_z(b: &VariationalBundle, minus1: bool, minus2: bool) -> Vec<f64> {
    let len = b.yeps.z_all(0).len();
    (0..len)
        .map(|j| {
            let mut v = b.yeps.z_all(0)[j] - b.ybar.z_all(0)[j];
            if minus1 {
                v -= b.y1.z_all(0)[j];
            }
            if minus2 {
                v -= b.y2.z_all(0)[j];
            }
            v
        })
        .collect()
}

/// Outcome of a slope fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Pass,
    Fail,
    Indeterminate,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Indeterminate => "indeterminate",
        }
    }
}

/// One metric value on the ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub eps: f64,
    pub metric: f64,
    pub floor: f64,
    pub used: bool,
}

/// Slope fit of one quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub quantity: String,
    pub beta: f64,
    pub points: Vec<RatePoint>,
    pub slope: f64,
    pub slope_se: f64,
    pub band: Band,
    pub verdict: Verdict,
}

/// Least-squares slope of log(metric) against log(ε), dropping the smallest
/// ε values whose metric is below 10× the noise floor.
pub fn fit_rate(quantity: &str, beta: f64, mut points: Vec<RatePoint>, band: Band) -> RateFit {
    points.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    for p in points.iter_mut() {
        p.used = p.metric > 0.0 && p.metric.is_finite();
    }
    for p in points.iter_mut().rev() {
        if p.used && p.metric < 10.0 * p.floor.max(1e-30) {
            p.used = false;
        } else {
            break;
        }
    }
    let used: Vec<&RatePoint> = points.iter().filter(|p| p.used).collect();
    let (slope, se, verdict) = if used.len() < 3 {
        (f64::NAN, f64::NAN, Verdict::Indeterminate)
    } else {
        let xs: Vec<f64> = used.iter().map(|p| p.eps.ln()).collect();
        let ys: Vec<f64> = used.iter().map(|p| p.metric.ln()).collect();
        let (_, s, se) = stats::linear_fit(&xs, &ys);
        (
            s,
            se,
            if band.contains(s) {
                Verdict::Pass
            } else {
                Verdict::Fail
            },
        )
    };
    RateFit {
        quantity: quantity.to_string(),
        beta,
        points,
        slope,
        slope_se: se,
        band,
        verdict,
    }
}

/// Cost expansion remainder at one ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpansionPoint {
    pub eps: f64,
    pub j_eps: f64,
    pub j_bar: f64,
    pub y_tilde0: f64,
    /// |J(v^ε) − J(v̄) − Ỹ(0)| / ε.
    pub remainder: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionReport {
    pub points: Vec<ExpansionPoint>,
    /// R(smallest ε) < R(largest ε) / 2.
    pub passed: bool,
}

/// Everything measured over an ε ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderReport {
    pub beta: f64,
    pub rates: Vec<RateFit>,
    pub identities: Vec<(f64, IdentityResidual)>,
    pub expansion: ExpansionReport,
    pub filter_gap: Vec<(f64, f64)>,
}

impl LadderReport {
    pub fn rate(&self, q: RateQuantity) -> Option<&RateFit> {
        self.rates.iter().find(|r| r.quantity == q.name())
    }

    /// Every gated slope passes.
    pub fn gated_rates_pass(&self) -> bool {
        RateQuantity::GATED
            .iter()
            .all(|&q| self.rate(q).is_some_and(|r| r.verdict == Verdict::Pass))
    }
}

/// Base trajectory, linearization inputs and adjoints of one chain scenario.
pub struct BaseSolution {
    pub noise: Noise,
    pub traj: Trajectory,
    pub adjoints: AdjointBundle,
}

impl BaseSolution {
    pub fn solve(
        coeffs: &dyn Coefficients,
        control: &ControlModel,
        x0: f64,
        noise: Noise,
        opts: &AdjointOptions,
    ) -> Result<Self> {
        let traj = crate::bsde::solve_state(coeffs, control, x0, &noise, &opts.bsde)?;
        let lin = Linearization::new(coeffs, &traj);
        let adjoints = AdjointBundle::solve(&lin, opts)?;
        Ok(Self {
            noise,
            traj,
            adjoints,
        })
    }
}

/// Runs the spike pipeline over an ε ladder on every chain scenario and
/// collects slopes, identity residuals and the cost expansion remainder.
#[allow(clippy::too_many_arguments)]
pub fn rate_probe(
    coeffs: &dyn Coefficients,
    base_control: &ControlModel,
    alt: &ControlModel,
    t0: f64,
    ladder: &[f64],
    beta: f64,
    x0: f64,
    bases: &[BaseSolution],
    opts: &AdjointOptions,
    tol: &IdentityTolerances,
) -> Result<LadderReport> {
    if ladder.len() < 4 {
        return Err(Error::invalid("the ε ladder needs at least 4 values"));
    }
    if bases.is_empty() {
        return Err(Error::invalid("at least one chain scenario is required"));
    }
    let mut ladder = ladder.to_vec();
    ladder.sort_by(|a, b| b.total_cmp(a));
    let mut per_q: Vec<Vec<RatePoint>> = vec![Vec::new(); RateQuantity::ALL.len()];
    let mut identities = Vec::new();
    let mut expansion = Vec::new();
    let mut filter_gap = Vec::new();
    for &eps in &ladder {
        let mut samples: Vec<Vec<f64>> = vec![Vec::new(); RateQuantity::ALL.len()];
        let mut floors: Vec<f64> = vec![0.0; RateQuantity::ALL.len()];
        let (mut je, mut jb, mut yt) = (0.0, 0.0, 0.0);
        let mut ident_acc: Vec<IdentityResidual> = Vec::new();
        let mut gap: f64 = 0.0;
        for base in bases {
            let ens = &base.traj.ensemble;
            let spike = SpikeSpec::single(t0, eps, ens.horizon(), ens.steps(), alt.clone())?;
            let lin = Linearization::new(coeffs, &base.traj);
            let b = run_spike(
                &lin,
                &base.adjoints,
                base_control,
                &spike,
                x0,
                &base.noise,
                opts,
            )?;
            for (qi, q) in RateQuantity::ALL.iter().enumerate() {
                let (s, f) = metric_samples(&b, ens, *q, beta);
                samples[qi].extend(s);
                floors[qi] = floors[qi].max(f);
            }
            je += b.yeps.y0(0);
            jb += b.ybar.y0(0);
            yt += b.ytilde.y0(0);
            gap = gap.max(b.first.filter_gap());
            let ids = check_identities(&lin, &base.adjoints, &b, tol);
            if ident_acc.is_empty() {
                ident_acc = ids;
            } else {
                for (a, r) in ident_acc.iter_mut().zip(ids) {
                    a.relative_rms = a.relative_rms.max(r.relative_rms);
                    a.passed &= r.passed;
                }
            }
        }
        let m = bases.len() as f64;
        for (qi, s) in samples.iter().enumerate() {
            per_q[qi].push(RatePoint {
                eps,
                metric: stats::mean(s),
                floor: floors[qi],
                used: true,
            });
        }
        let (je, jb, yt) = (je / m, jb / m, yt / m);
        expansion.push(ExpansionPoint {
            eps,
            j_eps: je,
            j_bar: jb,
            y_tilde0: yt,
            remainder: (je - jb - yt).abs() / eps,
        });
        identities.extend(ident_acc.into_iter().map(|r| (eps, r)));
        filter_gap.push((eps, gap));
    }
    let rates = RateQuantity::ALL
        .iter()
        .zip(per_q)
        .map(|(q, pts)| fit_rate(q.name(), beta, pts, q.band(beta)))
        .collect();
    let passed = expansion
        .first()
        .zip(expansion.last())
        .is_some_and(|(a, b)| b.remainder < a.remainder / 2.0);
    Ok(LadderReport {
        beta,
        rates,
        identities,
        expansion: ExpansionReport {
            points: expansion,
            passed,
        },
        filter_gap,
    })
}

pub fn write_rate_csv<W: Write>(fits: &[RateFit], mut w: W) -> Result<()> {
    writeln!(
        w,
        "quantity,beta,eps,metric,floor,used,fitted_slope,band,verdict"
    )?;
    for f in fits {
        for p in &f.points {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                f.quantity,
                f.beta,
                p.eps,
                p.metric,
                p.floor,
                p.used,
                f.slope,
                f.band.label(),
                f.verdict.label()
            )?;
        }
    }
    Ok(())
}

pub fn write_expansion_csv<W: Write>(r: &ExpansionReport, mut w: W) -> Result<()> {
    writeln!(w, "eps,j_eps,j_bar,y_tilde0,remainder")?;
    for p in &r.points {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.eps, p.j_eps, p.j_bar, p.y_tilde0, p.remainder
        )?;
    }
    Ok(())
}

/// L² norm in time of a Z path, exposed for reports.
pub fn z_norm(sol: &BackwardSolution) -> f64 {
    l2_time(sol.z_all(0), sol.n(), sol.dt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{lq_to_general, BilinearFamily, FamilyRegime, LqCoefficients, LqRegime};
    use crate::testkit;

    fn lq() -> BilinearFamily {
        lq_to_general(&LqCoefficients::new(testkit::lq_demo_regimes()).unwrap())
    }

    fn base(c: &dyn Coefficients, n: usize, steps: usize) -> BaseSolution {
        let noise = testkit::switching_noise(n, steps, 21);
        BaseSolution::solve(
            c,
            &testkit::constant(0.0),
            0.0,
            noise,
            &AdjointOptions::default(),
        )
        .unwrap()
    }

    fn run(c: &dyn Coefficients, b: &BaseSolution, spike: &SpikeSpec) -> VariationalBundle {
        let lin = Linearization::new(c, &b.traj);
        run_spike(
            &lin,
            &b.adjoints,
            &testkit::constant(0.0),
            spike,
            0.0,
            &b.noise,
            &AdjointOptions::default(),
        )
        .unwrap()
    }

    fn all_zero(b: &VariationalBundle) -> bool {
        let zero = |xs: &[f64]| xs.iter().all(|v| *v == 0.0);
        zero(&b.first.x)
            && zero(&b.second.x)
            && zero(b.y1.y_all(0))
            && zero(b.y2.y_all(0))
            && zero(b.ytilde.y_all(0))
            && zero(b.ytilde.z_all(0))
    }

    #[test]
    fn empty_window_and_identical_alt_give_zero_processes() {
        let c = lq();
        let b = base(&c, 1000, 40);
        let empty = SpikeSpec::new(SpikeWindow::empty(1.0, 40), testkit::constant(1.0));
        let same = SpikeSpec::single(0.25, 0.25, 1.0, 40, testkit::constant(0.0)).unwrap();
        for spike in [empty, same] {
            let v = run(&c, &b, &spike);
            assert!(all_zero(&v));
            let lin = Linearization::new(&c, &b.traj);
            for r in check_identities(&lin, &b.adjoints, &v, &IdentityTolerances::default()) {
                assert_eq!(r.relative_rms, 0.0, "{}", r.identity);
            }
        }
    }

    #[test]
    fn empty_window_with_curvature_keeps_second_variation_zero() {
        let c = BilinearFamily::new(
            vec![FamilyRegime {
                a5: 0.8,
                b0: 0.5,
                a3: 1.0,
                d1: 0.5,
                ..Default::default()
            }],
            1.0,
        )
        .unwrap();
        let b = base(&c, 500, 20);
        let lin = Linearization::new(&c, &b.traj);
        let deltas = vec![None; 20];
        let first = solve_first_variation(&lin, &deltas).unwrap();
        let second = solve_second_variation(&lin, &deltas, &first).unwrap();
        assert!(second.x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn state_free_coefficients_give_explicit_first_variation() {
        let r = LqRegime {
            a3: 0.7,
            b0: 0.4,
            b3: 1.3,
            d1: 0.5,
            ..Default::default()
        };
        let c = lq_to_general(&LqCoefficients::uniform(r, 1));
        let steps = 50;
        let b = base(&c, 1000, steps);
        let spike = SpikeSpec::single(0.2, 0.3, 1.0, steps, testkit::constant(1.0)).unwrap();
        let v = run(&c, &b, &spike);
        let ens = &b.traj.ensemble;
        let n = ens.n();
        for i in 0..n {
            let mut expect = 0.0;
            for k in 0..steps {
                if spike.window.contains_step(k) {
                    expect += r.a3 * ens.dt() + r.b3 * ens.dw(k)[i];
                }
            }
            assert!((v.first.x[steps * n + i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn first_variational_terminal_is_exact() {
        let c = lq();
        let b = base(&c, 1000, 40);
        let spike = SpikeSpec::single(0.25, 0.25, 1.0, 40, testkit::constant(1.0)).unwrap();
        let v = run(&c, &b, &spike);
        let lin = Linearization::new(&c, &b.traj);
        let n = 1000;
        for i in 0..n {
            let d = lin.terminal(i);
            let expect = d.dx * v.first.x[40 * n + i] + d.dxp * v.first.xhat[40];
            assert_eq!(v.y1.y(0, 40)[i], expect);
        }
        assert_eq!(v.first.xhat[0], 0.0);
        assert!(v.first.x[..n]
            .iter()
            .chain(&v.second.x[..n])
            .all(|x| *x == 0.0));
    }

    #[test]
    fn identical_alt_gives_indeterminate_rates_and_zero_remainder() {
        let c = lq();
        let b = base(&c, 500, 40);
        let rep = rate_probe(
            &c,
            &testkit::constant(0.0),
            &testkit::constant(0.0),
            0.25,
            &[0.2, 0.1, 0.05, 0.025],
            2.0,
            0.0,
            std::slice::from_ref(&b),
            &AdjointOptions::default(),
            &IdentityTolerances::default(),
        )
        .unwrap();
        assert!(rep
            .rates
            .iter()
            .all(|f| f.verdict == Verdict::Indeterminate));
        assert!(rep.expansion.points.iter().all(|p| p.remainder == 0.0));
    }

    #[test]
    fn slope_fit_recovers_power_law_and_drops_noise() {
        let pts: Vec<RatePoint> = DEFAULT_LADDER
            .iter()
            .map(|&e| RatePoint {
                eps: e,
                metric: 3.0 * e * e,
                floor: 1e-4,
                used: true,
            })
            .collect();
        let fit = fit_rate(
            "q",
            2.0,
            pts,
            Band::Within {
                center: 2.0,
                tol: 0.1,
            },
        );
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert_eq!(fit.verdict, Verdict::Pass);
        assert!(!fit.points.last().unwrap().used);
        assert!(fit.points[..4].iter().all(|p| p.used));
        let flat = fit_rate(
            "q",
            2.0,
            vec![
                RatePoint {
                    eps: 0.1,
                    metric: 0.0,
                    floor: 0.0,
                    used: true
                };
                4
            ],
            Band::Above { min: 2.0 },
        );
        assert_eq!(flat.verdict, Verdict::Indeterminate);
    }

    #[test]
    fn too_short_ladder_is_rejected() {
        let c = lq();
        let b = base(&c, 200, 20);
        let err = rate_probe(
            &c,
            &testkit::constant(0.0),
            &testkit::constant(1.0),
            0.25,
            &[0.2, 0.1, 0.05],
            2.0,
            0.0,
            std::slice::from_ref(&b),
            &AdjointOptions::default(),
            &IdentityTolerances::default(),
        );
        assert!(err.is_err());
    }
}
