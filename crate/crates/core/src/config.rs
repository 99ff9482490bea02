//! JSON scenario files: parsing with field-path diagnostics, validation and
//! construction of coefficients, controls and common noise.

use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointOptions;
use crate::chain::{sample_chain, GeneratorMatrix};
use crate::error::{Error, Result};
use crate::forward::{Brownian, Noise};
use crate::mp::{ConstrainedOptions, MpOptions, QuadraticConstraint, SearchOptions, TildeTerminal};
use crate::rng::{Purpose, SeedStreams};
use crate::scenario::{
    lq_to_general, BilinearFamily, Coefficients, ControlModel, ControlSet, FamilyRegime,
    LqCoefficients, LqRegime, Policy, SamplingBox, SpikeWindow,
};
use crate::variation::{IdentityTolerances, DEFAULT_LADDER};

fn one_f() -> f64 {
    1.0
}

fn one_u() -> usize {
    1
}

/// Markov chain generator and the number of sampled chain scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub generator: Vec<Vec<f64>>,
    #[serde(default)]
    pub initial: usize,
    #[serde(default = "one_u")]
    pub scenarios: usize,
}

/// Coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientsConfig {
    Lq {
        regimes: Vec<LqRegime>,
    },
    Bilinear {
        regimes: Vec<FamilyRegime>,
        control_bound: f64,
    },
}

/// Control set V.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSetConfig {
    Finite(Vec<f64>),
    Interval { lo: f64, hi: f64, points: usize },
}

/// Candidate control policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    Constant(f64),
    Blocks(Vec<f64>),
    Affine { c0: f64, cx: f64, cxp: f64 },
}

/// Maximum-principle check and the brute-force search behind `lq-demo`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpConfig {
    pub check: MpOptions,
    pub blocks: usize,
    /// Particles used by the brute-force search; defaults to the scenario's.
    pub search_particles: Option<usize>,
    pub search: SearchOptions,
    /// Constant control used as the negative control.
    pub negative_control: Option<f64>,
    /// Smallest violation fraction the negative control must reach.
    pub negative_min_fraction: f64,
}

impl Default for MpConfig {
    fn default() -> Self {
        Self {
            check: MpOptions::default(),
            blocks: 3,
            search_particles: None,
            search: SearchOptions::default(),
            negative_control: None,
            negative_min_fraction: 0.1,
        }
    }
}

fn default_ladder() -> Vec<f64> {
    DEFAULT_LADDER.to_vec()
}

fn default_beta() -> f64 {
    2.0
}

/// Spike ε-ladder study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    /// Constant control used on the spike window.
    pub alt: f64,
    /// Left end of the spike window.
    pub t0: f64,
    #[serde(default = "default_ladder")]
    pub ladder: Vec<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub tolerances: IdentityTolerances,
    #[serde(default)]
    pub gates: RateGates,
}

/// Which rate-study diagnostics decide the verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateGates {
    /// Fitted slopes of the gated quantities.
    pub rates: bool,
    /// Identity residuals at ε ≤ `identity_eps`.
    pub identities: bool,
    pub identity_eps: f64,
    /// Second-order cost expansion.
    pub expansion: bool,
    /// Duality representation z-scores below 3.
    pub representation: bool,
}

impl Default for RateGates {
    fn default() -> Self {
        Self {
            rates: true,
            identities: false,
            identity_eps: 0.05,
            expansion: true,
            representation: true,
        }
    }
}

/// Terminal constraint and penalisation ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub psi: QuadraticConstraint,
    pub kappas: Vec<f64>,
    #[serde(default = "ConstraintConfig::default_blocks")]
    pub blocks: usize,
    #[serde(default = "ConstraintConfig::default_terminal")]
    pub terminal: TildeTerminal,
    #[serde(default = "ConstraintConfig::default_true")]
    pub center_constraint: bool,
    #[serde(default = "ConstraintConfig::default_feasibility")]
    pub feasibility_se: f64,
    #[serde(default = "ConstraintConfig::default_convergence")]
    pub convergence_tol: f64,
    #[serde(default)]
    pub search: SearchOptions,
}

impl ConstraintConfig {
    fn default_blocks() -> usize {
        4
    }
    fn default_terminal() -> TildeTerminal {
        TildeTerminal::ConstraintGradient
    }
    fn default_true() -> bool {
        true
    }
    fn default_feasibility() -> f64 {
        3.0
    }
    fn default_convergence() -> f64 {
        1e-2
    }
}

/// Sampling of the standing assumptions before a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssumptionConfig {
    pub radius: f64,
    pub budget: usize,
}

impl Default for AssumptionConfig {
    fn default() -> Self {
        Self {
            radius: 3.0,
            budget: 20_000,
        }
    }
}

/// Degeneracy probe: the zero-driver BSDE whose spread sets the regression noise floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FloorConfig {
    /// Standard deviation of the Gaussian terminal value.
    pub scale: f64,
    /// Allowed multiple of the floor for ‖p¹‖ and ‖q¹‖.
    pub multiple: f64,
}

impl Default for FloorConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            multiple: 5.0,
        }
    }
}

/// A complete scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "one_f")]
    pub horizon: f64,
    pub steps: usize,
    pub particles: usize,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub seed: u64,
    pub chain: ChainConfig,
    pub coefficients: CoefficientsConfig,
    pub control_set: ControlSetConfig,
    pub control: PolicyConfig,
    #[serde(default)]
    pub adjoint: AdjointOptions,
    #[serde(default)]
    pub mp: MpConfig,
    #[serde(default)]
    pub rates: Option<RatesConfig>,
    #[serde(default)]
    pub constraint: Option<ConstraintConfig>,
    #[serde(default)]
    pub assumptions: AssumptionConfig,
    #[serde(default)]
    pub floor: FloorConfig,
}

/// Runtime objects built from a scenario.
pub struct Built {
    pub coeffs: Box<dyn Coefficients>,
    pub lq: Option<LqCoefficients>,
    pub set: ControlSet,
    pub control: ControlModel,
    pub generator: GeneratorMatrix,
}

/// Parses and validates a scenario. Errors name the offending field path
/// and, for syntax and type errors, the line and column.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    sc.validate()?;
    Ok(sc)
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(
            field,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

impl Scenario {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Applies command-line overrides and validates again.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        particles: Option<usize>,
        steps: Option<usize>,
    ) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(n) = particles {
            self.particles = n;
        }
        if let Some(k) = steps {
            self.steps = k;
        }
        self.validate()?;
        Ok(self)
    }

    /// Semantic checks beyond the schema.
    pub fn validate(&self) -> Result<()> {
        positive("horizon", self.horizon)?;
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.particles < 2 {
            return Err(Error::config("particles", "must be at least 2"));
        }
        if !self.x0.is_finite() {
            return Err(Error::config("x0", "must be finite"));
        }
        let generator = GeneratorMatrix::new(self.chain.generator.clone())
            .map_err(|e| Error::config("chain.generator", e.to_string()))?;
        if self.chain.initial >= generator.size() {
            return Err(Error::config(
                "chain.initial",
                "must index a regime of the generator",
            ));
        }
        if self.chain.scenarios == 0 {
            return Err(Error::config("chain.scenarios", "must be at least 1"));
        }
        let regimes = match &self.coefficients {
            CoefficientsConfig::Lq { regimes } => regimes.len(),
            CoefficientsConfig::Bilinear { regimes, .. } => regimes.len(),
        };
        if regimes != generator.size() {
            return Err(Error::config(
                "coefficients.regimes",
                format!(
                    "{regimes} regimes given for a {}-state chain",
                    generator.size()
                ),
            ));
        }
        let built = self.build()?;
        built
            .set
            .validate()
            .map_err(|e| Error::config("control_set", e.to_string()))?;
        if self.mp.blocks == 0 {
            return Err(Error::config("mp.blocks", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.mp.check.quantile) {
            return Err(Error::config("mp.check.quantile", "must lie in [0, 1)"));
        }
        if self.mp.search_particles.is_some_and(|n| n < 2) {
            return Err(Error::config("mp.search_particles", "must be at least 2"));
        }
        if let Some(v) = self.mp.negative_control {
            if !built.set.contains(v) {
                return Err(Error::config(
                    "mp.negative_control",
                    format!("{v} is not in V"),
                ));
            }
        }
        if let Some(r) = &self.rates {
            if !built.set.contains(r.alt) {
                return Err(Error::config("rates.alt", format!("{} is not in V", r.alt)));
            }
            if !(r.t0 >= 0.0 && r.t0 < self.horizon) {
                return Err(Error::config("rates.t0", "must lie in [0, T)"));
            }
            if r.ladder.len() < 4 {
                return Err(Error::config("rates.ladder", "needs at least 4 values"));
            }
            for (j, e) in r.ladder.iter().enumerate() {
                positive(&format!("rates.ladder[{j}]"), *e)?;
                if r.t0 + e > self.horizon + 1e-12 {
                    return Err(Error::config(
                        format!("rates.ladder[{j}]"),
                        "spike window leaves [0, T]",
                    ));
                }
                SpikeWindow::single(r.t0, *e, self.horizon, self.steps).map_err(|err| {
                    Error::config(
                        format!("rates.ladder[{j}]"),
                        format!("{err}; choose `steps` so the window is on the grid"),
                    )
                })?;
            }
            positive("rates.beta", r.beta)?;
        }
        if let Some(c) = &self.constraint {
            if c.kappas.is_empty() {
                return Err(Error::config(
                    "constraint.kappas",
                    "needs at least one value",
                ));
            }
            for (j, k) in c.kappas.iter().enumerate() {
                positive(&format!("constraint.kappas[{j}]"), *k)?;
            }
            if c.blocks == 0 {
                return Err(Error::config("constraint.blocks", "must be at least 1"));
            }
        }
        positive("assumptions.radius", self.assumptions.radius)?;
        positive("floor.scale", self.floor.scale)?;
        positive("floor.multiple", self.floor.multiple)?;
        Ok(())
    }

    /// Coefficients, control set, candidate control and generator.
    pub fn build(&self) -> Result<Built> {
        let generator = GeneratorMatrix::new(self.chain.generator.clone())
            .map_err(|e| Error::config("chain.generator", e.to_string()))?;
        let set = match &self.control_set {
            ControlSetConfig::Finite(v) => ControlSet::Finite(v.clone()),
            ControlSetConfig::Interval { lo, hi, points } => ControlSet::Interval {
                lo: *lo,
                hi: *hi,
                points: *points,
            },
        };
        set.validate()
            .map_err(|e| Error::config("control_set", e.to_string()))?;
        let (coeffs, lq): (Box<dyn Coefficients>, Option<LqCoefficients>) = match &self.coefficients
        {
            CoefficientsConfig::Lq { regimes } => {
                let lq = LqCoefficients::new(regimes.clone())
                    .map_err(|e| Error::config("coefficients.regimes", e.to_string()))?;
                (Box::new(lq_to_general(&lq)), Some(lq))
            }
            CoefficientsConfig::Bilinear {
                regimes,
                control_bound,
            } => {
                let fam = BilinearFamily::new(regimes.clone(), *control_bound)
                    .map_err(|e| Error::config("coefficients.regimes", e.to_string()))?;
                (Box::new(fam), None)
            }
        };
        let policy = match &self.control {
            PolicyConfig::Constant(v) => Policy::Constant(*v),
            PolicyConfig::Blocks(values) => Policy::Blocks {
                values: values.clone(),
                horizon: self.horizon,
            },
            PolicyConfig::Affine { c0, cx, cxp } => Policy::Affine {
                c0: *c0,
                cx: *cx,
                cxp: *cxp,
            },
        };
        let control = ControlModel::new(set.clone(), policy)
            .map_err(|e| Error::config("control", e.to_string()))?;
        Ok(Built {
            coeffs,
            lq,
            set,
            control,
            generator,
        })
    }

    /// Chain path and Brownian increments of every chain scenario, with
    /// `n` particles drawn from the scenario's master seed.
    pub fn noises(&self, generator: &GeneratorMatrix, n: usize) -> Result<Vec<Noise>> {
        let streams = SeedStreams::new(self.seed);
        (0..self.chain.scenarios as u64)
            .map(|s| {
                let chain = sample_chain(
                    generator,
                    self.chain.initial,
                    self.horizon,
                    self.steps,
                    streams.seed(Purpose::Chain, s),
                )?;
                let bw = Brownian::sample(&streams, s, n, self.steps, self.dt());
                Noise::new(chain, bw)
            })
            .collect()
    }

    pub fn sampling_box(&self) -> SamplingBox {
        SamplingBox {
            radius: self.assumptions.radius,
            horizon: self.horizon,
        }
    }

    /// Options of the constrained verification, sharing the scenario's
    /// adjoint and check settings.
    pub fn constrained_options(&self) -> Option<ConstrainedOptions> {
        self.constraint.as_ref().map(|c| ConstrainedOptions {
            kappas: c.kappas.clone(),
            blocks: c.blocks,
            search: c.search.clone(),
            mp: self.mp.check.clone(),
            terminal: c.terminal,
            center_constraint: c.center_constraint,
            feasibility_se: c.feasibility_se,
            convergence_tol: c.convergence_tol,
            adjoint: self.adjoint.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "name": "t",
  "steps": 10,
  "particles": 100,
  "chain": { "generator": [[-1.0, 1.0], [1.0, -1.0]], "scenarios": 2 },
  "coefficients": { "lq": { "regimes": [{ "a3": 1.0, "b0": 0.5 }, { "a3": 1.0, "b0": 0.7 }] } },
  "control_set": { "finite": [-1.0, 0.0, 1.0] },
  "control": { "constant": 0.0 }
}"#;

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let sc = parse_scenario(MINIMAL).unwrap();
        assert_eq!(sc.horizon, 1.0);
        assert_eq!(sc.mp.blocks, 3);
        assert_eq!(sc.adjoint, AdjointOptions::default());
        let b = sc.build().unwrap();
        assert!(b.lq.is_some());
        assert_eq!(b.set.grid(), vec![-1.0, 0.0, 1.0]);
        let nz = sc.noises(&b.generator, 50).unwrap();
        assert_eq!(nz.len(), 2);
        assert_eq!(nz[0].n(), 50);
        let again = sc.noises(&b.generator, 50).unwrap();
        assert_eq!(nz[1].chain, again[1].chain);
    }

    #[test]
    fn unknown_field_reports_path_and_location() {
        let bad = MINIMAL.replace("\"b0\": 0.7", "\"b0\": 0.7, \"bogus\": 1");
        match parse_scenario(&bad) {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "coefficients.lq.regimes[1].bogus");
                assert!(
                    message.contains("bogus") && message.contains("line 6"),
                    "{message}"
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_error_reports_path() {
        let bad = MINIMAL.replace("\"steps\": 10", "\"steps\": \"ten\"");
        match parse_scenario(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "steps"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let cases = [
            ("\"particles\": 100", "\"particles\": 1", "particles"),
            ("\"constant\": 0.0", "\"constant\": 0.5", "control"),
            (
                "[[-1.0, 1.0], [1.0, -1.0]]",
                "[[-1.0, 2.0], [1.0, -1.0]]",
                "chain.generator",
            ),
            ("{ \"a3\": 1.0, \"b0\": 0.5 }, ", "", "coefficients.regimes"),
        ];
        for (from, to, field) in cases {
            match parse_scenario(&MINIMAL.replace(from, to)) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }

    #[test]
    fn overrides_are_validated() {
        let sc = parse_scenario(MINIMAL).unwrap();
        let sc2 = sc
            .clone()
            .with_overrides(Some(9), Some(40), Some(20))
            .unwrap();
        assert_eq!((sc2.seed, sc2.particles, sc2.steps), (9, 40, 20));
        assert!(sc.with_overrides(None, Some(1), None).is_err());
    }
}
