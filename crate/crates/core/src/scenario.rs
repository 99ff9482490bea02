//! Problem data: coefficients (b, σ, f, Φ) with derivative oracles, control
//! sets and policies, spike overlays, and sampling-based assumption checks.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedStreams};

/// Evaluation point for the coefficient functions.
///
/// `b`, `σ` ignore `y` and `z`; `Φ` only reads `x`, `xp` and `regime`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub t: f64,
    pub x: f64,
    pub xp: f64,
    pub y: f64,
    pub z: f64,
    pub v: f64,
    pub regime: usize,
}

impl Point {
    pub fn state(t: f64, x: f64, xp: f64, v: f64, regime: usize) -> Self {
        Self {
            t,
            x,
            xp,
            y: 0.0,
            z: 0.0,
            v,
            regime,
        }
    }

    pub fn full(t: f64, x: f64, xp: f64, y: f64, z: f64, v: f64, regime: usize) -> Self {
        Self {
            t,
            x,
            xp,
            y,
            z,
            v,
            regime,
        }
    }
}

/// Value and derivatives in (x, x′) up to second order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivs {
    pub value: f64,
    pub dx: f64,
    pub dxp: f64,
    pub dxx: f64,
    pub dxxp: f64,
    pub dxpxp: f64,
}

/// Value, gradient and Hessian of the driver f in (x, x′, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DriverDerivs {
    pub value: f64,
    pub dx: f64,
    pub dxp: f64,
    pub dy: f64,
    pub dz: f64,
    /// Hessian with index order (x, x′, y, z).
    pub hess: [[f64; 4]; 4],
}

impl DriverDerivs {
    /// w D²_{xyz}f wᵀ for w = (w_x, w_y, w_z), dropping the x′ row and column.
    pub fn xyz_quadratic(&self, w: [f64; 3]) -> f64 {
        const IDX: [usize; 3] = [0, 2, 3];
        let mut s = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                s += w[a] * self.hess[IDX[a]][IDX[b]] * w[b];
            }
        }
        s
    }
}

/// Evaluable coefficient set (b, σ, f, Φ) with derivative oracles.
///
/// Implementations must be pure so that particles can be evaluated
/// concurrently.
pub trait Coefficients: Send + Sync {
    fn b(&self, p: &Point) -> f64;
    fn sigma(&self, p: &Point) -> f64;
    fn f(&self, p: &Point) -> f64;
    fn phi(&self, p: &Point) -> f64;
    fn b_derivs(&self, p: &Point) -> StateDerivs;
    fn sigma_derivs(&self, p: &Point) -> StateDerivs;
    fn f_derivs(&self, p: &Point) -> DriverDerivs;
    fn phi_derivs(&self, p: &Point) -> StateDerivs;
    /// Lipschitz and second-derivative bound L.
    fn lipschitz(&self) -> f64;
    /// Whether b_x, σ_x, b_xx depend only on (t, regime).
    fn field_adapted(&self) -> bool {
        false
    }
    fn regimes(&self) -> usize;
}

/// Per-regime data of the linear-quadratic system.
///
/// b = A1 x + A2 x′ + A3 v, σ = B0 + B1 x + B2 x′ + B3 v,
/// f = C1 x + C2 x′ + C3 y + C4 z + C5 v, Φ = D1 x² + D2 x′².
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqRegime {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Linear-quadratic coefficients, deterministic per regime.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqCoefficients {
    pub regimes: Vec<LqRegime>,
}

impl LqCoefficients {
    pub fn new(regimes: Vec<LqRegime>) -> Result<Self> {
        if regimes.is_empty() {
            return Err(Error::invalid("LQ table needs at least one regime"));
        }
        for (i, r) in regimes.iter().enumerate() {
            let all = [
                r.a1, r.a2, r.a3, r.b0, r.b1, r.b2, r.b3, r.c1, r.c2, r.c3, r.c4, r.c5, r.d1, r.d2,
            ];
            if all.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite LQ coefficient in regime {}",
                    i + 1
                )));
            }
        }
        Ok(Self { regimes })
    }

    /// Same data in every regime.
    pub fn uniform(r: LqRegime, regimes: usize) -> Self {
        Self {
            regimes: vec![r; regimes.max(1)],
        }
    }

    pub fn regime(&self, i: usize) -> &LqRegime {
        &self.regimes[i.min(self.regimes.len() - 1)]
    }
}

/// Per-regime data of the bilinear family, a superset of the LQ system.
///
/// b = A1 x + A2 x′ + A3 v + A4 x v + A5 cos x,
/// σ = B0 + B1 x + B2 x′ + B3 v + B4 x v,
/// f = C1 x + C2 x′ + C3 y + C4 z + C5 v + C6 cos x + ½ C7 v²,
/// Φ = D1 x² + D2 x′² + D3 x.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyRegime {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub a5: f64,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl From<LqRegime> for FamilyRegime {
    fn from(r: LqRegime) -> Self {
        Self {
            a1: r.a1,
            a2: r.a2,
            a3: r.a3,
            b0: r.b0,
            b1: r.b1,
            b2: r.b2,
            b3: r.b3,
            c1: r.c1,
            c2: r.c2,
            c3: r.c3,
            c4: r.c4,
            c5: r.c5,
            d1: r.d1,
            d2: r.d2,
            ..Default::default()
        }
    }
}

impl FamilyRegime {
    fn entries(&self) -> [f64; 20] {
        [
            self.a1, self.a2, self.a3, self.a4, self.a5, self.b0, self.b1, self.b2, self.b3,
            self.b4, self.c1, self.c2, self.c3, self.c4, self.c5, self.c6, self.c7, self.d1,
            self.d2, self.d3,
        ]
    }
}

/// Built-in bilinear coefficient family with exact derivative oracles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BilinearFamily {
    pub regimes: Vec<FamilyRegime>,
    lipschitz: f64,
}

impl BilinearFamily {
    /// `control_bound` is sup |v| over V; it enters the Lipschitz constant
    /// through the A4 x v and B4 x v terms.
    pub fn new(regimes: Vec<FamilyRegime>, control_bound: f64) -> Result<Self> {
        if regimes.is_empty() {
            return Err(Error::invalid(
                "coefficient table needs at least one regime",
            ));
        }
        let mut l: f64 = 1.0;
        for (i, r) in regimes.iter().enumerate() {
            if r.entries().iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite coefficient in regime {}",
                    i + 1
                )));
            }
            let vb = control_bound.abs();
            l = l
                .max(r.a1.abs() + r.a4.abs() * vb + r.a5.abs())
                .max(r.a2.abs())
                .max(r.b1.abs() + r.b4.abs() * vb)
                .max(r.b2.abs())
                .max(r.c6.abs())
                .max(2.0 * r.d1.abs())
                .max(2.0 * r.d2.abs());
        }
        Ok(Self {
            regimes,
            lipschitz: l,
        })
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = l;
        self
    }

    fn r(&self, i: usize) -> &FamilyRegime {
        &self.regimes[i.min(self.regimes.len() - 1)]
    }
}

/// Embeds LQ coefficients into the general coefficient interface.
pub fn lq_to_general(lq: &LqCoefficients) -> BilinearFamily {
    let regimes: Vec<FamilyRegime> = lq.regimes.iter().map(|&r| r.into()).collect();
    BilinearFamily::new(regimes, 0.0).expect("LQ coefficients were validated on construction")
}

impl Coefficients for BilinearFamily {
    fn b(&self, p: &Point) -> f64 {
        let r = self.r(p.regime);
        r.a1 * p.x + r.a2 * p.xp + r.a3 * p.v + r.a4 * p.x * p.v + r.a5 * p.x.cos()
    }

    fn sigma(&self, p: &Point) -> f64 {
        let r = self.r(p.regime);
        r.b0 + r.b1 * p.x + r.b2 * p.xp + r.b3 * p.v + r.b4 * p.x * p.v
    }

    fn f(&self, p: &Point) -> f64 {
        let r = self.r(p.regime);
        r.c1 * p.x
            + r.c2 * p.xp
            + r.c3 * p.y
            + r.c4 * p.z
            + r.c5 * p.v
            + r.c6 * p.x.cos()
            + 0.5 * r.c7 * p.v * p.v
    }

    fn phi(&self, p: &Point) -> f64 {
        let r = self.r(p.regime);
        r.d1 * p.x * p.x + r.d2 * p.xp * p.xp + r.d3 * p.x
    }

    fn b_derivs(&self, p: &Point) -> StateDerivs {
        let r = self.r(p.regime);
        StateDerivs {
            value: self.b(p),
            dx: r.a1 + r.a4 * p.v - r.a5 * p.x.sin(),
            dxp: r.a2,
            dxx: -r.a5 * p.x.cos(),
            ..Default::default()
        }
    }

    fn sigma_derivs(&self, p: &Point) -> StateDerivs {
        let r = self.r(p.regime);
        StateDerivs {
            value: self.sigma(p),
            dx: r.b1 + r.b4 * p.v,
            dxp: r.b2,
            ..Default::default()
        }
    }

    fn f_derivs(&self, p: &Point) -> DriverDerivs {
        let r = self.r(p.regime);
        let mut hess = [[0.0; 4]; 4];
        hess[0][0] = -r.c6 * p.x.cos();
        DriverDerivs {
            value: self.f(p),
            dx: r.c1 - r.c6 * p.x.sin(),
            dxp: r.c2,
            dy: r.c3,
            dz: r.c4,
            hess,
        }
    }

    fn phi_derivs(&self, p: &Point) -> StateDerivs {
        let r = self.r(p.regime);
        StateDerivs {
            value: self.phi(p),
            dx: 2.0 * r.d1 * p.x + r.d3,
            dxp: 2.0 * r.d2 * p.xp,
            dxx: 2.0 * r.d1,
            dxxp: 0.0,
            dxpxp: 2.0 * r.d2,
        }
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn field_adapted(&self) -> bool {
        self.regimes
            .iter()
            .all(|r| r.a4 == 0.0 && r.a5 == 0.0 && r.b4 == 0.0)
    }

    fn regimes(&self) -> usize {
        self.regimes.len()
    }
}

/// Control set V.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ControlSet {
    Finite(Vec<f64>),
    Interval { lo: f64, hi: f64, points: usize },
}

impl ControlSet {
    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Finite(vals) => {
                if vals.is_empty() || vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(
                        "finite control set must be non-empty and finite",
                    ));
                }
            }
            ControlSet::Interval { lo, hi, points } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) || *points < 2 && lo < hi {
                    return Err(Error::invalid(
                        "interval control set needs lo <= hi and at least 2 grid points",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Sorted evaluation grid (finite sets as given, intervals discretised).
    pub fn grid(&self) -> Vec<f64> {
        match self {
            ControlSet::Finite(vals) => {
                let mut g = vals.clone();
                g.sort_by(|a, b| a.total_cmp(b));
                g.dedup();
                g
            }
            ControlSet::Interval { lo, hi, points } => {
                if lo == hi || *points < 2 {
                    return vec![*lo];
                }
                (0..*points)
                    .map(|j| {
                        if j + 1 == *points {
                            *hi
                        } else {
                            lo + (hi - lo) * j as f64 / (*points - 1) as f64
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match self {
            ControlSet::Finite(vals) => vals
                .iter()
                .any(|&u| (u - v).abs() <= 1e-12 * (1.0 + u.abs())),
            ControlSet::Interval { lo, hi, .. } => v >= lo - 1e-12 && v <= hi + 1e-12,
        }
    }

    /// Nearest admissible value, ties to the smaller one.
    pub fn project(&self, v: f64) -> f64 {
        match self {
            ControlSet::Finite(_) => {
                let mut best = f64::NAN;
                let mut dist = f64::INFINITY;
                for u in self.grid() {
                    let d = (u - v).abs();
                    if d < dist {
                        dist = d;
                        best = u;
                    }
                }
                best
            }
            ControlSet::Interval { lo, hi, .. } => v.clamp(*lo, *hi),
        }
    }

    /// sup |v| over V.
    pub fn bound(&self) -> f64 {
        self.grid().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.grid()[0]
    }

    pub fn max(&self) -> f64 {
        *self.grid().last().expect("control grid is non-empty")
    }
}

/// Grid-aligned spike window E_ε stored as half-open step ranges.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikeWindow {
    ranges: Vec<(usize, usize)>,
    dt: f64,
}

impl SpikeWindow {
    pub fn empty(horizon: f64, steps: usize) -> Self {
        Self {
            ranges: Vec::new(),
            dt: horizon / steps as f64,
        }
    }

    /// Union of intervals `[a, b)`; every endpoint must sit on the grid.
    pub fn new(intervals: &[(f64, f64)], horizon: f64, steps: usize) -> Result<Self> {
        let dt = horizon / steps as f64;
        let to_step = |t: f64| -> Result<usize> {
            let k = t / dt;
            let r = k.round();
            if (k - r).abs() > 1e-7 || r < 0.0 || r > steps as f64 {
                return Err(Error::invalid(format!(
                    "spike endpoint {t} is not on the grid (dt = {dt})"
                )));
            }
            Ok(r as usize)
        };
        let mut ranges = Vec::new();
        for &(a, b) in intervals {
            let (ka, kb) = (to_step(a)?, to_step(b)?);
            if kb < ka {
                return Err(Error::invalid("spike interval end precedes its start"));
            }
            if kb > ka {
                ranges.push((ka, kb));
            }
        }
        ranges.sort();
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (a, b) in ranges {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        Ok(Self { ranges: merged, dt })
    }

    /// Single interval [t0, t0 + ε).
    pub fn single(t0: f64, eps: f64, horizon: f64, steps: usize) -> Result<Self> {
        if t0 + eps > horizon + 1e-12 {
            return Err(Error::invalid("spike window extends past the horizon"));
        }
        Self::new(&[(t0, t0 + eps)], horizon, steps)
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// |E_ε| on the grid.
    pub fn measure(&self) -> f64 {
        self.ranges.iter().map(|(a, b)| (b - a) as f64).sum::<f64>() * self.dt
    }

    /// Whether step k (the interval [t_k, t_{k+1})) lies in E_ε.
    pub fn contains_step(&self, k: usize) -> bool {
        self.ranges.iter().any(|&(a, b)| k >= a && k < b)
    }

    pub fn contains(&self, t: f64) -> bool {
        let tol = 1e-9 * self.dt;
        self.ranges
            .iter()
            .any(|&(a, b)| t >= a as f64 * self.dt - tol && t < b as f64 * self.dt - tol)
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }
}

/// Feedback policy evaluated along simulated states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Policy {
    Constant(f64),
    /// Piecewise constant on equal time blocks of [0, T].
    Blocks {
        values: Vec<f64>,
        horizon: f64,
    },
    /// c0 + cx x + cxp x′, projected onto V.
    Affine {
        c0: f64,
        cx: f64,
        cxp: f64,
    },
    /// `alt` on the window, `base` elsewhere.
    Spike {
        base: Box<Policy>,
        alt: Box<Policy>,
        window: SpikeWindow,
    },
}

impl Policy {
    fn eval_raw(&self, t: f64, x: f64, xp: f64) -> f64 {
        match self {
            Policy::Constant(v) => *v,
            Policy::Blocks { values, horizon } => {
                let nb = values.len();
                let idx = ((t / horizon) * nb as f64 + 1e-9).floor();
                values[(idx.max(0.0) as usize).min(nb - 1)]
            }
            Policy::Affine { c0, cx, cxp } => c0 + cx * x + cxp * xp,
            Policy::Spike { base, alt, window } => {
                if window.contains(t) {
                    alt.eval_raw(t, x, xp)
                } else {
                    base.eval_raw(t, x, xp)
                }
            }
        }
    }

    /// Whether the policy ignores the state (open loop).
    pub fn is_open_loop(&self) -> bool {
        match self {
            Policy::Constant(_) | Policy::Blocks { .. } => true,
            Policy::Affine { cx, cxp, .. } => *cx == 0.0 && *cxp == 0.0,
            Policy::Spike { base, alt, .. } => base.is_open_loop() && alt.is_open_loop(),
        }
    }
}

/// Control set together with the policy that selects values from it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlModel {
    pub set: ControlSet,
    pub policy: Policy,
}

impl ControlModel {
    pub fn new(set: ControlSet, policy: Policy) -> Result<Self> {
        set.validate()?;
        let m = Self { set, policy };
        m.validate()?;
        Ok(m)
    }

    pub fn constant(set: ControlSet, v: f64) -> Result<Self> {
        Self::new(set, Policy::Constant(v))
    }

    /// Every stored policy value lies in V.
    pub fn validate(&self) -> Result<()> {
        fn check(p: &Policy, set: &ControlSet) -> Result<()> {
            match p {
                Policy::Constant(v) => {
                    if !set.contains(*v) {
                        return Err(Error::invalid(format!("control value {v} is not in V")));
                    }
                }
                Policy::Blocks { values, horizon } => {
                    if values.is_empty() || !(*horizon > 0.0) {
                        return Err(Error::invalid(
                            "block policy needs values and a positive horizon",
                        ));
                    }
                    for v in values {
                        if !set.contains(*v) {
                            return Err(Error::invalid(format!("control value {v} is not in V")));
                        }
                    }
                }
                Policy::Affine { c0, cx, cxp } => {
                    if ![c0, cx, cxp].iter().all(|v| v.is_finite()) {
                        return Err(Error::invalid("affine policy coefficients must be finite"));
                    }
                }
                Policy::Spike { base, alt, .. } => {
                    check(base, set)?;
                    check(alt, set)?;
                }
            }
            Ok(())
        }
        check(&self.policy, &self.set)
    }

    /// v = policy(t, x, x′, regime), always inside V.
    pub fn eval(&self, t: f64, x: f64, xp: f64, _regime: usize) -> f64 {
        let raw = self.policy.eval_raw(t, x, xp);
        match self.policy {
            Policy::Constant(_) | Policy::Blocks { .. } => raw,
            _ => self.set.project(raw),
        }
    }
}

/// Control equal to `alt` on `window` and to `base` elsewhere.
pub fn spike_overlay(
    base: &ControlModel,
    alt: &ControlModel,
    window: &SpikeWindow,
) -> ControlModel {
    if window.is_empty() || base.policy == alt.policy {
        return base.clone();
    }
    ControlModel {
        set: base.set.clone(),
        policy: Policy::Spike {
            base: Box::new(base.policy.clone()),
            alt: Box::new(alt.policy.clone()),
            window: window.clone(),
        },
    }
}

/// Box on which assumptions are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingBox {
    /// Half-width for x, x′, y and z.
    pub radius: f64,
    pub horizon: f64,
}

/// Outcome of one sampled assumption.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of (violation measure / allowed), pass iff ≤ 1.
    pub worst_ratio: f64,
    pub witness: Option<String>,
}

/// Report of [`check_assumptions`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub samples: usize,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Worst {
    name: &'static str,
    ratio: f64,
    witness: Option<String>,
}

impl Worst {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            ratio: 0.0,
            witness: None,
        }
    }

    fn update(&mut self, ratio: f64, witness: impl FnOnce() -> String) {
        let r = if ratio.is_nan() { f64::INFINITY } else { ratio };
        if r > self.ratio {
            self.ratio = r;
            self.witness = Some(witness());
        }
    }

    fn finish(self) -> AssumptionCheck {
        AssumptionCheck {
            name: self.name.to_string(),
            passed: self.ratio <= 1.0,
            worst_ratio: self.ratio,
            witness: self.witness,
        }
    }
}

/// Relative tolerance for derivative oracles against central differences.
pub const DERIVATIVE_TOL: f64 = 1e-5;

fn fd_ratio(supplied: f64, fd: f64) -> f64 {
    (supplied - fd).abs() / (DERIVATIVE_TOL * fd.abs().max(1.0))
}

fn random_point<R: Rng>(rng: &mut R, bx: &SamplingBox, grid: &[f64], regimes: usize) -> Point {
    let r = bx.radius;
    Point {
        t: rng.random::<f64>() * bx.horizon,
        x: rng.random_range(-r..=r),
        xp: rng.random_range(-r..=r),
        y: rng.random_range(-r..=r),
        z: rng.random_range(-r..=r),
        v: grid[rng.random_range(0..grid.len())],
        regime: rng.random_range(0..regimes.max(1)),
    }
}

/// Samples the standing assumptions on `bx`.
///
/// Checks derivative oracles against central differences, Lipschitz ratios
/// of b and σ in (x, x′), second-derivative bounds, and (when the
/// coefficients claim it) independence of b_x, σ_x, b_xx from (x, x′, v).
pub fn check_assumptions(
    coeffs: &dyn Coefficients,
    set: &ControlSet,
    bx: &SamplingBox,
    budget: usize,
    seed: u64,
) -> AssumptionReport {
    let budget = budget.max(1000);
    let mut rng = SeedStreams::new(seed).rng(Purpose::Sampling, 0);
    let grid = set.grid();
    let l = coeffs.lipschitz();
    let regimes = coeffs.regimes();

    let mut deriv = Worst::new("derivatives");
    let mut lip = Worst::new("lipschitz");
    let mut second = Worst::new("second-derivative-bound");
    let mut adapted = Worst::new("field-adapted");

    for _ in 0..budget {
        let p = random_point(&mut rng, bx, &grid, regimes);
        let h = 1e-5 * p.x.abs().max(p.xp.abs()).max(1.0);
        let shift = |dx: f64, dxp: f64, dy: f64, dz: f64| Point {
            x: p.x + dx,
            xp: p.xp + dxp,
            y: p.y + dy,
            z: p.z + dz,
            ..p
        };
        let dirs = [
            (h, 0.0, 0.0, 0.0),
            (0.0, h, 0.0, 0.0),
            (0.0, 0.0, h, 0.0),
            (0.0, 0.0, 0.0, h),
        ];
        let central = |g: &dyn Fn(&Point) -> f64, d: (f64, f64, f64, f64)| {
            let plus = shift(d.0, d.1, d.2, d.3);
            let minus = shift(-d.0, -d.1, -d.2, -d.3);
            (g(&plus) - g(&minus)) / (2.0 * h)
        };

        type StateFn<'a> = (
            &'static str,
            Box<dyn Fn(&Point) -> f64 + 'a>,
            Box<dyn Fn(&Point) -> StateDerivs + 'a>,
        );
        let state_fns: [StateFn; 3] = [
            (
                "b",
                Box::new(|q| coeffs.b(q)),
                Box::new(|q| coeffs.b_derivs(q)),
            ),
            (
                "sigma",
                Box::new(|q| coeffs.sigma(q)),
                Box::new(|q| coeffs.sigma_derivs(q)),
            ),
            (
                "phi",
                Box::new(|q| coeffs.phi(q)),
                Box::new(|q| coeffs.phi_derivs(q)),
            ),
        ];
        for (name, val, der) in state_fns.iter() {
            let d = der(&p);
            let checks = [
                ("x", d.dx, central(val.as_ref(), dirs[0])),
                ("x'", d.dxp, central(val.as_ref(), dirs[1])),
                ("xx", d.dxx, central(&|q: &Point| der(q).dx, dirs[0])),
                ("xx'", d.dxxp, central(&|q: &Point| der(q).dx, dirs[1])),
                ("x'x'", d.dxpxp, central(&|q: &Point| der(q).dxp, dirs[1])),
            ];
            for (which, s, fd) in checks {
                deriv.update(fd_ratio(s, fd), || {
                    format!("{name}_{which} at {p:?}: supplied {s}, finite difference {fd}")
                });
            }
            let m = d.dxx.abs().max(d.dxxp.abs()).max(d.dxpxp.abs());
            second.update(m / l, || {
                format!("{name} second derivative {m} at {p:?} exceeds L = {l}")
            });
        }

        let fd = coeffs.f_derivs(&p);
        let grad = [fd.dx, fd.dxp, fd.dy, fd.dz];
        const NAMES: [&str; 4] = ["x", "x'", "y", "z"];
        for a in 0..4 {
            let g = central(&|q: &Point| coeffs.f(q), dirs[a]);
            deriv.update(fd_ratio(grad[a], g), || {
                format!(
                    "f_{} at {p:?}: supplied {}, finite difference {g}",
                    NAMES[a], grad[a]
                )
            });
            for b in 0..4 {
                let hb = central(
                    &|q: &Point| {
                        let e = coeffs.f_derivs(q);
                        [e.dx, e.dxp, e.dy, e.dz][b]
                    },
                    dirs[a],
                );
                deriv.update(fd_ratio(fd.hess[a][b], hb), || {
                    format!(
                        "f_{}{} at {p:?}: supplied {}, finite difference {hb}",
                        NAMES[a], NAMES[b], fd.hess[a][b]
                    )
                });
                second.update(fd.hess[a][b].abs() / l, || {
                    format!("f Hessian entry {} at {p:?} exceeds L = {l}", fd.hess[a][b])
                });
            }
        }

        let q = random_point(&mut rng, bx, &grid, regimes);
        let q = Point {
            t: p.t,
            v: p.v,
            regime: p.regime,
            ..q
        };
        let dist = (p.x - q.x).abs() + (p.xp - q.xp).abs();
        if dist > 0.0 {
            for (name, g) in [
                ("b", &(|r: &Point| coeffs.b(r)) as &dyn Fn(&Point) -> f64),
                ("sigma", &|r: &Point| coeffs.sigma(r)),
            ] {
                let ratio = (g(&p) - g(&q)).abs() / dist / l;
                lip.update(ratio, || {
                    format!(
                        "{name}: |Δ{name}|/|Δ(x,x')| = {} at (x,x')=({}, {}) vs ({}, {}), L = {l}",
                        ratio * l,
                        p.x,
                        p.xp,
                        q.x,
                        q.xp
                    )
                });
            }
        }

        if coeffs.field_adapted() {
            let other = Point {
                v: grid[rng.random_range(0..grid.len())],
                ..q
            };
            let (b1, b2) = (coeffs.b_derivs(&p), coeffs.b_derivs(&other));
            let (s1, s2) = (coeffs.sigma_derivs(&p), coeffs.sigma_derivs(&other));
            for (name, u, w) in [
                ("b_x", b1.dx, b2.dx),
                ("sigma_x", s1.dx, s2.dx),
                ("b_xx", b1.dxx, b2.dxx),
            ] {
                let ratio = (u - w).abs() / (1e-12 * (1.0 + u.abs()));
                adapted.update(ratio, || {
                    format!("{name} differs: {u} at {p:?} vs {w} at {other:?}")
                });
            }
        }
    }

    let mut checks = vec![deriv.finish(), lip.finish(), second.finish()];
    if coeffs.field_adapted() {
        checks.push(adapted.finish());
    }
    AssumptionReport {
        samples: budget,
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lq(r: LqRegime) -> BilinearFamily {
        lq_to_general(&LqCoefficients::uniform(r, 1))
    }

    #[test]
    fn zero_lq_is_identically_zero() {
        let c = lq(LqRegime::default());
        let p = Point::full(0.3, 1.5, -2.0, 0.7, 0.2, 0.9, 0);
        assert_eq!(c.b(&p), 0.0);
        assert_eq!(c.sigma(&p), 0.0);
        assert_eq!(c.f(&p), 0.0);
        assert_eq!(c.phi(&p), 0.0);
    }

    #[test]
    fn lq_direct_substitution() {
        let c = lq(LqRegime {
            a1: 1.0,
            ..Default::default()
        });
        assert_eq!(c.b(&Point::state(0.0, 2.0, 5.0, 7.0, 0)), 2.0);
    }

    #[test]
    fn lq_terminal_second_derivatives() {
        let c = lq(LqRegime {
            d1: 1.0,
            ..Default::default()
        });
        for x in [-3.0, 0.0, 4.5] {
            let d = c.phi_derivs(&Point::state(1.0, x, 2.0, 0.0, 0));
            assert_eq!(d.dxx, 2.0);
            assert_eq!(d.dxxp, 0.0);
        }
    }

    #[test]
    fn lq_assumptions_pass() {
        let c = lq(LqRegime {
            a1: 0.5,
            a2: -0.3,
            a3: 1.0,
            b0: 0.4,
            b1: 0.2,
            b3: 1.0,
            c1: 0.1,
            c3: 0.2,
            c4: -0.5,
            c5: 0.3,
            d1: 0.5,
            d2: 0.25,
            ..Default::default()
        });
        let set = ControlSet::Interval {
            lo: -1.0,
            hi: 1.0,
            points: 101,
        };
        let rep = check_assumptions(
            &c,
            &set,
            &SamplingBox {
                radius: 10.0,
                horizon: 1.0,
            },
            1000,
            3,
        );
        assert!(rep.passed(), "{rep:?}");
    }

    struct Quadratic;
    impl Coefficients for Quadratic {
        fn b(&self, p: &Point) -> f64 {
            p.x * p.x
        }
        fn sigma(&self, _: &Point) -> f64 {
            1.0
        }
        fn f(&self, _: &Point) -> f64 {
            0.0
        }
        fn phi(&self, _: &Point) -> f64 {
            0.0
        }
        fn b_derivs(&self, p: &Point) -> StateDerivs {
            StateDerivs {
                value: p.x * p.x,
                dx: 2.0 * p.x,
                dxx: 2.0,
                ..Default::default()
            }
        }
        fn sigma_derivs(&self, _: &Point) -> StateDerivs {
            StateDerivs {
                value: 1.0,
                ..Default::default()
            }
        }
        fn f_derivs(&self, _: &Point) -> DriverDerivs {
            DriverDerivs::default()
        }
        fn phi_derivs(&self, _: &Point) -> StateDerivs {
            StateDerivs::default()
        }
        fn lipschitz(&self) -> f64 {
            1.0
        }
        fn regimes(&self) -> usize {
            1
        }
    }

    #[test]
    fn quadratic_drift_fails_lipschitz_with_witness() {
        let set = ControlSet::Finite(vec![0.0]);
        let rep = check_assumptions(
            &Quadratic,
            &set,
            &SamplingBox {
                radius: 10.0,
                horizon: 1.0,
            },
            1000,
            1,
        );
        let lip = rep.check("lipschitz").unwrap();
        assert!(!lip.passed);
        assert!(lip.witness.as_ref().unwrap().contains("b:"));
    }

    struct WrongFy(BilinearFamily);
    impl Coefficients for WrongFy {
        fn b(&self, p: &Point) -> f64 {
            self.0.b(p)
        }
        fn sigma(&self, p: &Point) -> f64 {
            self.0.sigma(p)
        }
        fn f(&self, p: &Point) -> f64 {
            self.0.f(p)
        }
        fn phi(&self, p: &Point) -> f64 {
            self.0.phi(p)
        }
        fn b_derivs(&self, p: &Point) -> StateDerivs {
            self.0.b_derivs(p)
        }
        fn sigma_derivs(&self, p: &Point) -> StateDerivs {
            self.0.sigma_derivs(p)
        }
        fn f_derivs(&self, p: &Point) -> DriverDerivs {
            let mut d = self.0.f_derivs(p);
            d.dy *= 1.001;
            d
        }
        fn phi_derivs(&self, p: &Point) -> StateDerivs {
            self.0.phi_derivs(p)
        }
        fn lipschitz(&self) -> f64 {
            self.0.lipschitz()
        }
        fn regimes(&self) -> usize {
            1
        }
    }

    #[test]
    fn wrong_driver_derivative_is_caught() {
        let inner = lq(LqRegime {
            c3: 0.7,
            ..Default::default()
        });
        let set = ControlSet::Finite(vec![0.0]);
        let rep = check_assumptions(
            &WrongFy(inner),
            &set,
            &SamplingBox {
                radius: 10.0,
                horizon: 1.0,
            },
            1000,
            2,
        );
        let d = rep.check("derivatives").unwrap();
        assert!(!d.passed);
        assert!(
            d.witness.as_ref().unwrap().starts_with("f_y"),
            "{:?}",
            d.witness
        );
    }

    #[test]
    fn bilinear_family_derivatives_match_finite_differences() {
        let fam = BilinearFamily::new(
            vec![FamilyRegime {
                a1: 0.3,
                a4: 0.5,
                b0: 0.4,
                b4: 0.3,
                c6: 0.5,
                c7: 1.0,
                d1: 0.5,
                d3: 0.2,
                ..Default::default()
            }],
            1.0,
        )
        .unwrap();
        let set = ControlSet::Interval {
            lo: -1.0,
            hi: 1.0,
            points: 11,
        };
        let rep = check_assumptions(
            &fam,
            &set,
            &SamplingBox {
                radius: 5.0,
                horizon: 1.0,
            },
            1000,
            4,
        );
        assert!(rep.passed(), "{rep:?}");
        assert!(!fam.field_adapted());
    }

    #[test]
    fn spike_overlay_examples() {
        let set = ControlSet::Finite(vec![0.0, 1.0]);
        let base = ControlModel::constant(set.clone(), 0.0).unwrap();
        let alt = ControlModel::constant(set, 1.0).unwrap();
        let empty = SpikeWindow::empty(1.0, 10);
        assert_eq!(spike_overlay(&base, &alt, &empty), base);
        let w = SpikeWindow::single(0.4, 0.1, 1.0, 10).unwrap();
        assert_eq!(spike_overlay(&base, &base, &w), base);
        let s = spike_overlay(&base, &alt, &w);
        assert_eq!(s.eval(0.45, 0.0, 0.0, 0), 1.0);
        assert_eq!(s.eval(0.6, 0.0, 0.0, 0), 0.0);
        assert_eq!(s.eval(0.4, 0.0, 0.0, 0), 1.0);
        assert_eq!(s.eval(0.5, 0.0, 0.0, 0), 0.0);
        assert!((w.measure() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn misaligned_window_rejected() {
        assert!(SpikeWindow::single(0.43, 0.1, 1.0, 10).is_err());
        assert!(SpikeWindow::single(0.95, 0.1, 1.0, 10).is_err());
    }

    #[test]
    fn interval_grid_and_projection() {
        let set = ControlSet::Interval {
            lo: -1.0,
            hi: 1.0,
            points: 101,
        };
        let g = set.grid();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[100], 1.0);
        assert_eq!(set.project(3.0), 1.0);
        let f = ControlSet::Finite(vec![1.0, -1.0, 0.0]);
        assert_eq!(f.grid(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(f.project(0.5), 0.0);
    }

    #[test]
    fn xyz_quadratic_skips_mean_field_entries() {
        let mut d = DriverDerivs::default();
        d.hess[1][1] = 100.0;
        d.hess[0][0] = 1.0;
        d.hess[2][3] = 2.0;
        d.hess[3][2] = 2.0;
        assert_eq!(d.xyz_quadratic([1.0, 1.0, 1.0]), 1.0 + 4.0);
    }
}
