//! First- and second-order adjoint BSDEs, the auxiliary expansion BSDE and
//! the stochastic exponential Γ along a solved trajectory.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::bsde::{solve_bsde, BackwardSolution, BsdeOptions, FeatureSet, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedStreams};
use crate::scenario::{Coefficients, DriverDerivs, Point, StateDerivs};
use crate::stats;
use crate::variation::SpikeSpec;

/// Derivatives of (b, σ, f) at one particle and step of a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct Local {
    pub point: Point,
    pub b: StateDerivs,
    pub s: StateDerivs,
    pub f: DriverDerivs,
}

/// Evaluates coefficient derivatives along a trajectory on demand.
pub struct Linearization<'a> {
    pub coeffs: &'a dyn Coefficients,
    pub traj: &'a Trajectory,
    /// Cross-particle mean of b_{x′} per step.
    pub bxp_hat: Vec<f64>,
}

impl<'a> Linearization<'a> {
    pub fn new(coeffs: &'a dyn Coefficients, traj: &'a Trajectory) -> Self {
        let ens = &traj.ensemble;
        let bxp_hat = (0..ens.steps())
            .map(|k| {
                let v: Vec<f64> = (0..ens.n())
                    .map(|i| coeffs.b_derivs(&ens.point(k, i)).dxp)
                    .collect();
                stats::mean(&v)
            })
            .collect();
        Self {
            coeffs,
            traj,
            bxp_hat,
        }
    }

    pub fn at(&self, k: usize, i: usize) -> Local {
        let point = self.traj.point(k, i);
        Local {
            point,
            b: self.coeffs.b_derivs(&point),
            s: self.coeffs.sigma_derivs(&point),
            f: self.coeffs.f_derivs(&point),
        }
    }

    /// Φ derivatives of particle i at the terminal time.
    pub fn terminal(&self, i: usize) -> StateDerivs {
        let ens = &self.traj.ensemble;
        let k = ens.steps();
        self.coeffs.phi_derivs(&Point::state(
            ens.horizon(),
            ens.x(k)[i],
            ens.xhat(k),
            0.0,
            ens.terminal_regime(),
        ))
    }
}

/// Adjoint solver settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdjointOptions {
    pub bsde: BsdeOptions,
    /// Clip q⁰ entering the second-order driver at its per-step 0.1% and 99.9% quantiles.
    pub clip_q0: bool,
}

/// (p⁰, p¹) with martingale integrands (q⁰, q¹).
#[derive(Debug, Clone)]
pub struct FirstOrderAdjoint {
    pub sol: BackwardSolution,
}

impl FirstOrderAdjoint {
    pub fn p0(&self, k: usize) -> &[f64] {
        self.sol.y(0, k)
    }
    pub fn p1(&self, k: usize) -> &[f64] {
        self.sol.y(1, k)
    }
    pub fn q0(&self, k: usize) -> &[f64] {
        self.sol.z(0, k)
    }
    pub fn q1(&self, k: usize) -> &[f64] {
        self.sol.z(1, k)
    }
}

/// (P⁰, P¹) with martingale integrands (Q⁰, Q¹).
#[derive(Debug, Clone)]
pub struct SecondOrderAdjoint {
    pub sol: BackwardSolution,
}

impl SecondOrderAdjoint {
    pub fn p0(&self, k: usize) -> &[f64] {
        self.sol.y(0, k)
    }
    pub fn p1(&self, k: usize) -> &[f64] {
        self.sol.y(1, k)
    }
    pub fn q0(&self, k: usize) -> &[f64] {
        self.sol.z(0, k)
    }
    pub fn q1(&self, k: usize) -> &[f64] {
        self.sol.z(1, k)
    }
}

/// First-order adjoint: 2-dimensional linear BSDE with driver
/// F^p p + F^q q + F^f and terminal (Φ_x, Φ_{x′}).
pub fn solve_first_order_adjoint(
    lin: &Linearization,
    opts: &AdjointOptions,
) -> Result<FirstOrderAdjoint> {
    let ens = &lin.traj.ensemble;
    let n = ens.n();
    let mut t0 = vec![0.0; n];
    let mut t1 = vec![0.0; n];
    for i in 0..n {
        let d = lin.terminal(i);
        t0[i] = d.dx;
        t1[i] = d.dxp;
    }
    let driver = |k: usize, i: usize, p: &[f64], q: &[f64], out: &mut [f64]| {
        let l = lin.at(k, i);
        let (bx, bxp, sx, sxp) = (l.b.dx, l.b.dxp, l.s.dx, l.s.dxp);
        let (fx, fxp, fy, fz) = (l.f.dx, l.f.dxp, l.f.dy, l.f.dz);
        out[0] = (bx + fy + fz * sx) * p[0] + (sx + fz) * q[0] + fx;
        out[1] = (bxp + fz * sxp) * p[0]
            + (bx + lin.bxp_hat[k] + fy) * p[1]
            + sxp * q[0]
            + fz * q[1]
            + fxp;
    };
    let fs = FeatureSet::of(ens, lin.coeffs.regimes());
    let sol = solve_bsde(&fs, ens.brownian(), &[t0, t1], &driver, &opts.bsde)?;
    Ok(FirstOrderAdjoint { sol })
}

fn clipped(q: &[f64]) -> Vec<f64> {
    let lo = stats::quantile(q, 0.001);
    let hi = stats::quantile(q, 0.999);
    q.iter().map(|v| v.clamp(lo, hi)).collect()
}

/// Second-order adjoint: 2-dimensional linear BSDE with driver
/// G^P P + G^Q Q + G^p p + G^q q + G^f and terminal (Φ_xx, 0).
pub fn solve_second_order_adjoint(
    lin: &Linearization,
    first: &FirstOrderAdjoint,
    opts: &AdjointOptions,
) -> Result<SecondOrderAdjoint> {
    let ens = &lin.traj.ensemble;
    let n = ens.n();
    let t0: Vec<f64> = (0..n).map(|i| lin.terminal(i).dxx).collect();
    let t1 = vec![0.0; n];
    let q0: Vec<Vec<f64>> = (0..ens.steps())
        .map(|k| {
            if opts.clip_q0 {
                clipped(first.q0(k))
            } else {
                first.q0(k).to_vec()
            }
        })
        .collect();
    let driver = |k: usize, i: usize, pp: &[f64], qq: &[f64], out: &mut [f64]| {
        let l = lin.at(k, i);
        let (bx, bxx, sx, sxx) = (l.b.dx, l.b.dxx, l.s.dx, l.s.dxx);
        let (fy, fz) = (l.f.dy, l.f.dz);
        let p0 = first.p0(k)[i];
        let p1 = first.p1(k)[i];
        let q = q0[k][i];
        let gf = l.f.xyz_quadratic([1.0, p0, p0 * sx + q]);
        out[0] = (fy + 2.0 * fz * sx + 2.0 * bx + sx * sx) * pp[0]
            + (2.0 * sx + fz) * qq[0]
            + (bxx + fz * sxx) * p0
            + sxx * q
            + gf;
        out[1] = (fy + 2.0 * bx + sx * sx) * pp[1] + fz * qq[1] + bxx * p1;
    };
    let fs = FeatureSet::of(ens, lin.coeffs.regimes());
    let sol = solve_bsde(&fs, ens.brownian(), &[t0, t1], &driver, &opts.bsde)?;
    Ok(SecondOrderAdjoint { sol })
}

/// Γ_{k+1} = Γ_k exp((f_y − ½ f_z²) Δt + f_z ΔW_k), Γ_0 = 1, laid out as `[k * n + i]`.
pub fn solve_gamma(lin: &Linearization) -> Vec<f64> {
    let ens = &lin.traj.ensemble;
    let n = ens.n();
    let steps = ens.steps();
    let dt = ens.dt();
    let mut g = vec![1.0; (steps + 1) * n];
    for k in 0..steps {
        let dw = ens.dw(k);
        for i in 0..n {
            let l = lin.at(k, i);
            let (fy, fz) = (l.f.dy, l.f.dz);
            g[(k + 1) * n + i] = g[k * n + i] * ((fy - 0.5 * fz * fz) * dt + fz * dw[i]).exp();
        }
    }
    g
}

/// Per-particle spike integrand of the auxiliary BSDE at step k:
/// δf(t, v, p⁰δσ) + p⁰δb + p¹Ê[δb] + q⁰δσ + ½(P⁰(δσ)² + P¹Ê[(δσ)²]).
pub fn spike_integrand(
    lin: &Linearization,
    first: &FirstOrderAdjoint,
    second: &SecondOrderAdjoint,
    spike: &SpikeSpec,
    k: usize,
) -> Vec<f64> {
    let ens = &lin.traj.ensemble;
    let n = ens.n();
    let d = spike.step_deltas(lin.coeffs, &lin.traj.ensemble, k);
    (0..n)
        .map(|i| {
            let p0 = first.p0(k)[i];
            let p1 = first.p1(k)[i];
            let q0 = first.q0(k)[i];
            let pt = lin.traj.point(k, i);
            let mut shifted = pt;
            shifted.z += p0 * d.ds[i];
            shifted.v = d.alt[i];
            let df = lin.coeffs.f(&shifted) - lin.coeffs.f(&pt);
            df + p0 * d.db[i]
                + p1 * d.db_hat
                + q0 * d.ds[i]
                + 0.5 * (second.p0(k)[i] * d.ds[i] * d.ds[i] + second.p1(k)[i] * d.ds2_hat)
        })
        .collect()
}

/// Auxiliary BSDE: driver f_y Ỹ + f_z Z̃ + 1_E·(spike integrand), Ỹ(T) = 0.
pub fn solve_auxiliary(
    lin: &Linearization,
    first: &FirstOrderAdjoint,
    second: &SecondOrderAdjoint,
    spike: &SpikeSpec,
    opts: &AdjointOptions,
) -> Result<BackwardSolution> {
    let fs = FeatureSet::of(&lin.traj.ensemble, lin.coeffs.regimes());
    solve_auxiliary_with(lin, first, second, spike, &fs, opts)
}

/// Auxiliary BSDE regressed on a caller-supplied design.
pub fn solve_auxiliary_with(
    lin: &Linearization,
    first: &FirstOrderAdjoint,
    second: &SecondOrderAdjoint,
    spike: &SpikeSpec,
    fs: &FeatureSet,
    opts: &AdjointOptions,
) -> Result<BackwardSolution> {
    let ens = &lin.traj.ensemble;
    let n = ens.n();
    let steps = ens.steps();
    if spike.is_trivial() {
        return Ok(BackwardSolution::zeros(1, n, steps, ens.dt()));
    }
    let source: Vec<Option<Vec<f64>>> = (0..steps)
        .map(|k| {
            spike
                .window
                .contains_step(k)
                .then(|| spike_integrand(lin, first, second, spike, k))
        })
        .collect();
    let driver = |k: usize, i: usize, y: &[f64], z: &[f64], out: &mut [f64]| {
        let l = lin.at(k, i);
        out[0] = l.f.dy * y[0] + l.f.dz * z[0] + source[k].as_ref().map_or(0.0, |s| s[i]);
    };
    solve_bsde(fs, ens.brownian(), &[vec![0.0; n]], &driver, &opts.bsde)
}

/// Ỹ(0) against E[Σ_k Γ_k 1_E(t_k) (integrand) Δt].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Representation {
    pub y_tilde0: f64,
    pub expectation: f64,
    pub std_err: f64,
    /// |Ỹ(0) − expectation| / std_err.
    pub z_score: f64,
}

pub fn representation_check(
    lin: &Linearization,
    first: &FirstOrderAdjoint,
    second: &SecondOrderAdjoint,
    aux: &BackwardSolution,
    gamma: &[f64],
    spike: &SpikeSpec,
) -> Representation {
    let ens = &lin.traj.ensemble;
    let n = ens.n();
    let dt = ens.dt();
    let mut per = vec![0.0; n];
    if !spike.is_trivial() {
        for k in 0..ens.steps() {
            if spike.window.contains_step(k) {
                let s = spike_integrand(lin, first, second, spike, k);
                for i in 0..n {
                    per[i] += gamma[k * n + i] * s[i] * dt;
                }
            }
        }
    }
    let y0 = aux.y0(0);
    let e = stats::mean(&per);
    let se = stats::std_err(&per);
    let diff = (y0 - e).abs();
    Representation {
        y_tilde0: y0,
        expectation: e,
        std_err: se,
        z_score: if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        },
    }
}

/// Regression noise floor: sup-norm of Y and L² norm of Z for a zero-driver
/// BSDE whose terminal is independent N(0, scale²) noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseFloor {
    pub y_sup: f64,
    /// max_k of the particle RMS of Y_k.
    pub y_rms: f64,
    pub z_l2: f64,
}

pub fn noise_floor(
    lin: &Linearization,
    scale: f64,
    seed: u64,
    opts: &BsdeOptions,
) -> Result<NoiseFloor> {
    let ens = &lin.traj.ensemble;
    let n = ens.n();
    let steps = ens.steps();
    let mut rng = SeedStreams::new(seed).rng(Purpose::NoiseFloor, 0);
    let terminal: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    let zero = |_: usize, _: usize, _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 0.0;
    let fs = FeatureSet::of(ens, lin.coeffs.regimes());
    let sol = solve_bsde(&fs, ens.brownian(), &[terminal], &zero, opts)?;
    Ok(NoiseFloor {
        y_sup: sup_abs(&sol.y_all(0)[..steps * n]),
        y_rms: (0..steps)
            .map(|k| stats::rms(sol.y(0, k)))
            .fold(0.0, f64::max),
        z_l2: l2_time(sol.z_all(0), n, ens.dt()),
    })
}

pub fn sup_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// (E Σ_k |z_k|² Δt)^{1/2} for a path laid out as `[k * n + i]`.
pub fn l2_time(z: &[f64], n: usize, dt: f64) -> f64 {
    (z.iter().map(|v| v * v).sum::<f64>() / n as f64 * dt).sqrt()
}

/// All adjoint processes of one trajectory.
#[derive(Debug, Clone)]
pub struct AdjointBundle {
    pub first: FirstOrderAdjoint,
    pub second: SecondOrderAdjoint,
    pub gamma: Vec<f64>,
}

impl AdjointBundle {
    pub fn solve(lin: &Linearization, opts: &AdjointOptions) -> Result<Self> {
        let first = solve_first_order_adjoint(lin, opts)?;
        let second = solve_second_order_adjoint(lin, &first, opts)?;
        let gamma = solve_gamma(lin);
        if let Some(pos) = gamma.iter().position(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::numerical(
                pos / lin.traj.ensemble.n(),
                "Γ lost positivity",
            ));
        }
        Ok(Self {
            first,
            second,
            gamma,
        })
    }

    /// Writes `(t_k, mean, std)` columns for p⁰, p¹, q⁰, q¹, P⁰, P¹, Ỹ and Γ.
    pub fn write_csv<W: Write>(&self, aux: Option<&BackwardSolution>, mut w: W) -> Result<()> {
        let n = self.first.sol.n();
        let steps = self.first.sol.steps();
        let dt = self.first.sol.dt();
        writeln!(
            w,
            "t_k,p0_mean,p0_std,p1_mean,p1_std,q0_mean,q0_std,q1_mean,q1_std,P0_mean,P0_std,P1_mean,P1_std,ytilde_mean,ytilde_std,gamma_mean,gamma_std"
        )?;
        let nan = [f64::NAN; 0];
        for k in 0..=steps {
            let mut row = vec![format!("{}", k as f64 * dt)];
            let mut push = |xs: &[f64]| {
                if xs.is_empty() {
                    row.push("NaN".into());
                    row.push("NaN".into());
                } else {
                    row.push(format!("{}", stats::mean(xs)));
                    row.push(format!("{}", stats::std_dev(xs)));
                }
            };
            push(self.first.p0(k));
            push(self.first.p1(k));
            push(if k < steps { self.first.q0(k) } else { &nan });
            push(if k < steps { self.first.q1(k) } else { &nan });
            push(self.second.p0(k));
            push(self.second.p1(k));
            match aux {
                Some(a) => push(a.y(0, k)),
                None => push(&nan),
            }
            push(&self.gamma[k * n..(k + 1) * n]);
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{
        lq_to_general, BilinearFamily, FamilyRegime, LqCoefficients, LqRegime, SpikeWindow,
    };
    use crate::testkit;

    fn bundle(c: &dyn Coefficients, traj: &Trajectory) -> AdjointBundle {
        AdjointBundle::solve(&Linearization::new(c, traj), &AdjointOptions::default()).unwrap()
    }

    #[test]
    fn mean_field_free_data_gives_zero_p1() {
        let c = BilinearFamily::new(
            vec![FamilyRegime {
                a1: 0.3,
                a3: 1.0,
                b0: 0.5,
                b1: 0.2,
                c1: 0.4,
                c3: 0.1,
                c4: 0.2,
                c6: 0.3,
                d1: 0.5,
                ..Default::default()
            }],
            1.0,
        )
        .unwrap();
        let noise = testkit::noise(2000, 40, 3);
        let traj = testkit::trajectory(&c, 0.5, &noise);
        let adj = bundle(&c, &traj);
        for k in 0..=40 {
            assert!(adj.first.p1(k).iter().all(|v| *v == 0.0));
            assert!(adj.second.p1(k).iter().all(|v| *v == 0.0));
        }
        for k in 0..40 {
            assert!(adj.first.q1(k).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn lq_terminal_values_and_vanishing_second_component() {
        let lq = LqCoefficients::new(testkit::lq_demo_regimes()).unwrap();
        let c = lq_to_general(&lq);
        let noise = testkit::switching_noise(2000, 40, 5);
        let traj = testkit::trajectory(&c, 0.5, &noise);
        let adj = bundle(&c, &traj);
        let ens = &traj.ensemble;
        let r = lq.regime(ens.terminal_regime());
        for i in 0..ens.n() {
            assert_eq!(adj.first.p0(40)[i], 2.0 * r.d1 * ens.x(40)[i]);
            assert_eq!(adj.first.p1(40)[i], 2.0 * r.d2 * ens.xhat(40));
            assert_eq!(adj.second.p0(40)[i], 2.0 * r.d1);
        }
        for k in 0..=40 {
            assert!(adj.second.p1(k).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn deterministic_lq_second_order_matches_ode() {
        let r = LqRegime {
            a1: 0.3,
            b0: 0.5,
            b1: 0.4,
            c3: 0.2,
            c4: 0.3,
            d1: 0.7,
            ..Default::default()
        };
        let c = lq_to_general(&LqCoefficients::uniform(r, 1));
        let steps = 100;
        let noise = testkit::noise(2000, steps, 9);
        let traj = testkit::trajectory(&c, 0.0, &noise);
        let adj = bundle(&c, &traj);
        let rate = r.c3 + 2.0 * r.c4 * r.b1 + 2.0 * r.a1 + r.b1 * r.b1;
        for k in [0, 50, 100] {
            let t = k as f64 / steps as f64;
            let exact = 2.0 * r.d1 * (rate * (1.0 - t)).exp();
            let got = stats::mean(adj.second.p0(k));
            assert!((got / exact - 1.0).abs() < 0.01, "k={k}: {got} vs {exact}");
        }
    }

    #[test]
    fn non_recursive_reduced_adjoint_mean_solves_ode() {
        let r = LqRegime {
            a1: 0.3,
            a2: -0.2,
            a3: 1.0,
            b0: 0.6,
            c1: 0.5,
            c2: 0.4,
            d1: 0.5,
            d2: 0.8,
            ..Default::default()
        };
        let c = lq_to_general(&LqCoefficients::uniform(r, 1));
        let steps = 100;
        let noise = testkit::noise(4000, steps, 11);
        let traj = testkit::trajectory(&c, 0.5, &noise);
        let adj = bundle(&c, &traj);
        let ens = &traj.ensemble;
        let a = r.a1 + r.a2;
        let m_t = 2.0 * (r.d1 + r.d2) * ens.xhat(steps);
        let e = (a * 1.0f64).exp();
        let exact = e * m_t + (r.c1 + r.c2) * (e - 1.0) / a;
        let got = stats::mean(adj.first.p0(0)) + stats::mean(adj.first.p1(0));
        assert!((got / exact - 1.0).abs() < 0.01, "{got} vs {exact}");
    }

    #[test]
    fn gamma_is_exact_exponential_for_constant_fy() {
        let r = LqRegime {
            b0: 1.0,
            c3: 0.7,
            ..Default::default()
        };
        let c = lq_to_general(&LqCoefficients::uniform(r, 1));
        let noise = testkit::noise(100, 50, 2);
        let traj = testkit::trajectory(&c, 0.0, &noise);
        let g = solve_gamma(&Linearization::new(&c, &traj));
        for k in 0..=50 {
            let exact = (0.7 * k as f64 / 50.0).exp();
            for i in 0..100 {
                assert!((g[k * 100 + i] / exact - 1.0).abs() < 1e-12);
            }
        }
        let zero = lq_to_general(&LqCoefficients::uniform(
            LqRegime {
                b0: 1.0,
                ..Default::default()
            },
            1,
        ));
        let traj = testkit::trajectory(&zero, 0.0, &noise);
        assert!(solve_gamma(&Linearization::new(&zero, &traj))
            .iter()
            .all(|g| *g == 1.0));
    }

    #[test]
    fn auxiliary_vanishes_without_spike() {
        let c = lq_to_general(&LqCoefficients::new(testkit::lq_demo_regimes()).unwrap());
        let noise = testkit::switching_noise(1000, 40, 4);
        let traj = testkit::trajectory(&c, 0.0, &noise);
        let lin = Linearization::new(&c, &traj);
        let adj = AdjointBundle::solve(&lin, &AdjointOptions::default()).unwrap();
        let opts = AdjointOptions::default();
        let empty = SpikeSpec::new(SpikeWindow::empty(1.0, 40), testkit::constant(1.0));
        let aux = solve_auxiliary(&lin, &adj.first, &adj.second, &empty, &opts).unwrap();
        assert!(aux.y_all(0).iter().chain(aux.z_all(0)).all(|v| *v == 0.0));
        let same = SpikeSpec::single(0.3, 0.2, 1.0, 40, testkit::constant(0.0)).unwrap();
        let aux = solve_auxiliary(&lin, &adj.first, &adj.second, &same, &opts).unwrap();
        assert!(aux.y_all(0).iter().chain(aux.z_all(0)).all(|v| *v == 0.0));
    }

    #[test]
    fn auxiliary_without_driver_matches_quadrature() {
        let r = LqRegime {
            a1: 0.2,
            a3: 1.0,
            b0: 0.5,
            b3: 0.8,
            d1: 0.5,
            d2: 0.3,
            ..Default::default()
        };
        let c = lq_to_general(&LqCoefficients::uniform(r, 1));
        let noise = testkit::noise(4000, 50, 8);
        let traj = testkit::trajectory(&c, 0.0, &noise);
        let lin = Linearization::new(&c, &traj);
        let adj = AdjointBundle::solve(&lin, &AdjointOptions::default()).unwrap();
        let spike = SpikeSpec::single(0.2, 0.2, 1.0, 50, testkit::constant(1.0)).unwrap();
        let aux = solve_auxiliary(
            &lin,
            &adj.first,
            &adj.second,
            &spike,
            &AdjointOptions::default(),
        )
        .unwrap();
        let rep = representation_check(&lin, &adj.first, &adj.second, &aux, &adj.gamma, &spike);
        assert!(adj.gamma.iter().all(|g| *g == 1.0));
        assert!(rep.z_score <= 3.0, "{rep:?}");
        assert!(
            (rep.y_tilde0 / rep.expectation - 1.0).abs() < 0.02,
            "{rep:?}"
        );
    }

    #[test]
    fn noise_floor_is_small_and_positive() {
        let c = lq_to_general(&LqCoefficients::new(testkit::lq_demo_regimes()).unwrap());
        let noise = testkit::switching_noise(4000, 40, 4);
        let traj = testkit::trajectory(&c, 0.0, &noise);
        let nf = noise_floor(
            &Linearization::new(&c, &traj),
            1.0,
            1,
            &BsdeOptions::default(),
        )
        .unwrap();
        assert!(nf.y_sup > 0.0 && nf.y_rms < 0.1, "{nf:?}");
        assert!(nf.z_l2 > 0.0 && nf.z_l2 < 0.5, "{nf:?}");
    }
}
