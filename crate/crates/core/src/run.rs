//! Scenario-driven pipelines behind the command-line tool.
//!
//! Every run writes `report.json` (manifest, manifest hash and results) plus
//! CSV tables into the output directory. Wall-clock timings go to a separate
//! `timings.json` so that reports are byte-identical across reruns.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::adjoint::{
    l2_time, noise_floor, representation_check, solve_auxiliary, sup_abs, Linearization,
};
use crate::bsde::solve_state;
use crate::config::{parse_scenario, Built, CoefficientsConfig, Scenario};
use crate::error::{Error, Result};
use crate::forward::{moment_probe, Noise};
use crate::mp::{
    block_control, check_mp, check_mp_lq, constrained_verify, lq_brute_force, merge_reports,
    MpReport,
};
use crate::rng::{Purpose, SeedStreams};
use crate::scenario::{check_assumptions, ControlModel};
use crate::stats;
use crate::variation::{
    rate_probe, write_expansion_csv, write_identity_csv, write_rate_csv, BaseSolution, SpikeSpec,
};

/// Subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Adjoint,
    VerifyMp,
    RateStudy,
    LqDemo,
    ConstrainedDemo,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Adjoint => "adjoint",
            Command::VerifyMp => "verify-mp",
            Command::RateStudy => "rate-study",
            Command::LqDemo => "lq-demo",
            Command::ConstrainedDemo => "constrained-demo",
            Command::Selftest => "selftest",
        }
    }
}

/// Inputs of one run.
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub command: Command,
    pub scenario: Option<PathBuf>,
    pub seed: Option<u64>,
    pub particles: Option<usize>,
    pub steps: Option<usize>,
    pub workers: Option<usize>,
    pub out: PathBuf,
    pub dump_paths: bool,
    pub skip_validate: bool,
}

/// Seed of one derived stream. Brownian entries name the first particle of
/// a chain scenario; particle i uses `index + i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamSeed {
    pub purpose: &'static str,
    pub index: u64,
    pub seed: u64,
}

/// Everything that determines the content of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Command,
    pub scenario_path: Option<String>,
    pub scenario_sha256: Option<String>,
    /// Effective scenario after command-line overrides.
    pub scenario: Option<Scenario>,
    pub seed: u64,
    pub streams: Vec<StreamSeed>,
    pub out: String,
    pub workers: Option<usize>,
    pub dump_paths: bool,
    pub skip_validate: bool,
}

impl RunManifest {
    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(serde_json::to_vec(self)?)))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Outcome of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub passed: bool,
    pub report: PathBuf,
    pub manifest_hash: String,
}

/// Process exit status for a run result: 0 pass, 1 failed check,
/// 2 configuration error, 3 numerical abort.
pub fn exit_code(r: &Result<RunOutcome>) -> i32 {
    match r {
        Ok(o) if o.passed => 0,
        Ok(_) => 1,
        Err(Error::Config { .. } | Error::Json(_) | Error::InvalidInput(_)) => 2,
        Err(Error::Numerical { .. } | Error::Io(_)) => 3,
    }
}

struct Ctx {
    scenario: Scenario,
    built: Built,
    out: PathBuf,
    dump_paths: bool,
}

impl Ctx {
    fn noises(&self, n: usize) -> Result<Vec<Noise>> {
        self.scenario.noises(&self.built.generator, n)
    }

    fn csv(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.out.join(name))?);
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn bases(&self, control: &ControlModel) -> Result<Vec<BaseSolution>> {
        self.noises(self.scenario.particles)?
            .into_iter()
            .map(|nz| {
                BaseSolution::solve(
                    self.built.coeffs.as_ref(),
                    control,
                    self.scenario.x0,
                    nz,
                    &self.scenario.adjoint,
                )
            })
            .collect()
    }
}

fn stream_schedule(sc: &Scenario) -> Vec<StreamSeed> {
    let s = SeedStreams::new(sc.seed);
    let mut out = Vec::new();
    for k in 0..sc.chain.scenarios as u64 {
        out.push(StreamSeed {
            purpose: Purpose::Chain.name(),
            index: k,
            seed: s.seed(Purpose::Chain, k),
        });
        out.push(StreamSeed {
            purpose: Purpose::Brownian.name(),
            index: k << 32,
            seed: s.seed(Purpose::Brownian, k << 32),
        });
    }
    for p in [Purpose::Sampling, Purpose::NoiseFloor] {
        out.push(StreamSeed {
            purpose: p.name(),
            index: 0,
            seed: s.seed(p, 0),
        });
    }
    out
}

/// Runs one command and writes its reports.
pub fn run(req: &RunRequest) -> Result<RunOutcome> {
    let started = Instant::now();
    if let Some(w) = req.workers {
        if w == 0 {
            return Err(Error::config("--workers", "must be at least 1"));
        }
        // The global pool can only be built once per process; later runs reuse it.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global();
    }
    fs::create_dir_all(&req.out)?;
    let (scenario, text) = match (&req.scenario, req.command) {
        (_, Command::Selftest) => (None, None),
        (None, _) => {
            return Err(Error::config(
                "--scenario",
                "this command needs a scenario file",
            ))
        }
        (Some(p), _) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::config("--scenario", format!("{}: {e}", p.display())))?;
            let sc = parse_scenario(&text)?.with_overrides(req.seed, req.particles, req.steps)?;
            (Some(sc), Some(text))
        }
    };
    let manifest = RunManifest {
        tool: "regime-smp",
        version: env!("CARGO_PKG_VERSION"),
        command: req.command,
        scenario_path: req.scenario.as_ref().map(|p| p.display().to_string()),
        scenario_sha256: text.as_ref().map(|t| hex(&Sha256::digest(t.as_bytes()))),
        seed: scenario
            .as_ref()
            .map(|s| s.seed)
            .unwrap_or(req.seed.unwrap_or(0)),
        streams: scenario.as_ref().map(stream_schedule).unwrap_or_default(),
        scenario: scenario.clone(),
        out: req.out.display().to_string(),
        workers: req.workers,
        dump_paths: req.dump_paths,
        skip_validate: req.skip_validate,
    };
    let manifest_hash = manifest.hash()?;
    let (passed, results) = match scenario {
        None => crate::selftest::run_selftest()?,
        Some(sc) => {
            let built = sc.build()?;
            let mut validation = Value::Null;
            if !req.skip_validate {
                let rep = check_assumptions(
                    built.coeffs.as_ref(),
                    &built.set,
                    &sc.sampling_box(),
                    sc.assumptions.budget,
                    SeedStreams::new(sc.seed).seed(Purpose::Sampling, 0),
                );
                if !rep.passed() {
                    let bad: Vec<String> = rep
                        .checks
                        .iter()
                        .filter(|c| !c.passed)
                        .map(|c| format!("{} ({})", c.name, c.witness.clone().unwrap_or_default()))
                        .collect();
                    return Err(Error::config(
                        "coefficients",
                        format!("assumption check failed: {}", bad.join("; ")),
                    ));
                }
                validation = serde_json::to_value(&rep)?;
            }
            let ctx = Ctx {
                scenario: sc,
                built,
                out: req.out.clone(),
                dump_paths: req.dump_paths,
            };
            let (passed, mut results) = match req.command {
                Command::Simulate => simulate(&ctx)?,
                Command::Adjoint => adjoint(&ctx)?,
                Command::VerifyMp => verify_mp(&ctx)?,
                Command::RateStudy => rate_study(&ctx)?,
                Command::LqDemo => lq_demo(&ctx)?,
                Command::ConstrainedDemo => constrained_demo(&ctx)?,
                Command::Selftest => unreachable!("selftest takes no scenario"),
            };
            if let Value::Object(m) = &mut results {
                m.insert("assumptions".into(), validation);
            }
            (passed, results)
        }
    };
    let report = json!({
        "manifest_hash": manifest_hash,
        "manifest": manifest,
        "command": req.command.name(),
        "passed": passed,
        "results": results,
    });
    let path = req.out.join("report.json");
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    fs::write(&path, bytes)?;
    let timings =
        json!({ "manifest_hash": manifest_hash, "wall_seconds": started.elapsed().as_secs_f64() });
    fs::write(
        req.out.join("timings.json"),
        serde_json::to_vec_pretty(&timings)?,
    )?;
    Ok(RunOutcome {
        passed,
        report: path,
        manifest_hash,
    })
}

fn simulate(ctx: &Ctx) -> Result<(bool, Value)> {
    let sc = &ctx.scenario;
    let coeffs = ctx.built.coeffs.as_ref();
    let mut costs = Vec::new();
    let mut scen = Vec::new();
    for (s, nz) in ctx.noises(sc.particles)?.iter().enumerate() {
        let traj = solve_state(coeffs, &ctx.built.control, sc.x0, nz, &sc.adjoint.bsde)?;
        ctx.csv(&format!("chain_s{s}.csv"), |w| nz.chain.write_csv(w))?;
        ctx.csv(&format!("ensemble_s{s}.csv"), |w| {
            traj.ensemble.write_summary_csv(w)
        })?;
        ctx.csv(&format!("cost_s{s}.csv"), |w| {
            traj.backward.write_summary_csv(0, w)
        })?;
        if ctx.dump_paths {
            ctx.csv(&format!("paths_s{s}.csv"), |w| {
                traj.ensemble.write_paths_csv(w)
            })?;
        }
        costs.push(traj.cost());
        scen.push(json!({
            "cost": traj.cost(),
            "jumps": nz.chain.jump_count(),
            "terminal_xhat": traj.ensemble.xhat(traj.ensemble.steps()),
            "second_moment_sup": moment_probe(&traj.ensemble, 2.0)?,
        }));
    }
    Ok((
        true,
        json!({ "scenario": sc.name, "cost": stats::mean(&costs), "per_scenario": scen }),
    ))
}

fn mean_field_free(c: &CoefficientsConfig) -> bool {
    match c {
        CoefficientsConfig::Lq { regimes } => regimes
            .iter()
            .all(|r| r.a2 == 0.0 && r.b2 == 0.0 && r.c2 == 0.0 && r.d2 == 0.0),
        CoefficientsConfig::Bilinear { regimes, .. } => regimes
            .iter()
            .all(|r| r.a2 == 0.0 && r.b2 == 0.0 && r.c2 == 0.0 && r.d2 == 0.0),
    }
}

fn adjoint(ctx: &Ctx) -> Result<(bool, Value)> {
    let sc = &ctx.scenario;
    let applicable = mean_field_free(&sc.coefficients);
    let mut scen = Vec::new();
    let mut passed = true;
    let floor_seed = SeedStreams::new(sc.seed).seed(Purpose::NoiseFloor, 0);
    for (s, base) in ctx.bases(&ctx.built.control)?.iter().enumerate() {
        let lin = Linearization::new(ctx.built.coeffs.as_ref(), &base.traj);
        let adj = &base.adjoints;
        ctx.csv(&format!("adjoint_s{s}.csv"), |w| adj.write_csv(None, w))?;
        let n = base.traj.ensemble.n();
        let floor = noise_floor(&lin, sc.floor.scale, floor_seed, &sc.adjoint.bsde)?;
        let p1_sup = sup_abs(adj.first.sol.y_all(1));
        let q1_l2 = l2_time(adj.first.sol.z_all(1), n, base.traj.ensemble.dt());
        let degenerate =
            p1_sup <= sc.floor.multiple * floor.y_rms && q1_l2 <= sc.floor.multiple * floor.z_l2;
        let gamma_min = adj.gamma.iter().cloned().fold(f64::INFINITY, f64::min);
        if applicable && !degenerate {
            passed = false;
        }
        if !(gamma_min > 0.0) {
            passed = false;
        }
        scen.push(json!({
            "cost": base.traj.cost(),
            "p0_0": stats::mean(adj.first.p0(0)),
            "p1_0": stats::mean(adj.first.p1(0)),
            "pp0_0": stats::mean(adj.second.p0(0)),
            "pp1_0": stats::mean(adj.second.p1(0)),
            "p1_sup": p1_sup,
            "q1_l2": q1_l2,
            "noise_floor": floor,
            "degenerate": degenerate,
            "gamma_min": gamma_min,
        }));
    }
    Ok((
        passed,
        json!({ "scenario": sc.name, "mean_field_free": applicable, "per_scenario": scen }),
    ))
}

/// General and (for LQ data) closed-form checks pooled over chain scenarios.
fn check_control(
    ctx: &Ctx,
    control: &ControlModel,
    name: &str,
) -> Result<(MpReport, Option<MpReport>)> {
    let grid = ctx.built.set.grid();
    let opts = &ctx.scenario.mp.check;
    let mut general: Option<MpReport> = None;
    let mut lq: Option<MpReport> = None;
    for base in ctx.bases(control)? {
        let g = check_mp(
            ctx.built.coeffs.as_ref(),
            &base.traj,
            &base.adjoints,
            &grid,
            opts,
            name,
        )?;
        general = Some(match general {
            None => g,
            Some(a) => merge_reports(a, g),
        });
        if let Some(coef) = &ctx.built.lq {
            let l = check_mp_lq(coef, &base.traj, &base.adjoints, &grid, opts, name)?;
            lq = Some(match lq {
                None => l,
                Some(a) => merge_reports(a, l),
            });
        }
    }
    let general =
        general.ok_or_else(|| Error::invalid("at least one chain scenario is required"))?;
    Ok((general, lq))
}

fn mp_json(scenario: &str, r: &MpReport, lq: &Option<MpReport>) -> Value {
    json!({
        "scenario": scenario,
        "candidate": r.candidate,
        "violation_fraction": r.violation_fraction,
        "worst_violation": r.worst_violation,
        "tol": r.tol,
        "verdict": r.verdict,
        "detail": r,
        "lq": lq,
    })
}

fn verify_mp(ctx: &Ctx) -> Result<(bool, Value)> {
    let (g, lq) = check_control(ctx, &ctx.built.control, "scenario control")?;
    let passed = g.passed() && lq.as_ref().is_none_or(|l| l.passed());
    Ok((passed, mp_json(&ctx.scenario.name, &g, &lq)))
}

fn lq_demo(ctx: &Ctx) -> Result<(bool, Value)> {
    let sc = &ctx.scenario;
    if ctx.built.lq.is_none() {
        return Err(Error::config(
            "coefficients",
            "lq-demo needs LQ coefficients",
        ));
    }
    let n_search = sc.mp.search_particles.unwrap_or(sc.particles);
    let search_noise = ctx.noises(n_search)?;
    let bf = lq_brute_force(
        ctx.built.coeffs.as_ref(),
        &ctx.built.set,
        sc.mp.blocks,
        sc.x0,
        &search_noise,
        &sc.adjoint.bsde,
        &sc.mp.search,
    )?;
    ctx.csv("cost_table.csv", |w| bf.write_csv(w))?;
    let best = block_control(&ctx.built.set, &bf.best, sc.horizon)?;
    let (g, lq) = check_control(ctx, &best, "brute-force optimum")?;
    let neg_v = sc
        .mp
        .negative_control
        .unwrap_or_else(|| ctx.built.set.max());
    let neg = ControlModel::constant(ctx.built.set.clone(), neg_v)?;
    let (ng, nlq) = check_control(ctx, &neg, &format!("negative control v = {neg_v}"))?;
    let neg_ok = ng.violation_fraction > sc.mp.negative_min_fraction;
    let passed =
        g.passed() && lq.as_ref().is_none_or(|l| l.passed()) && neg_ok && !bf.budget_exceeded;
    Ok((
        passed,
        json!({
            "scenario": sc.name,
            "search": {
                "best": bf.best,
                "best_cost": bf.best_cost,
                "evaluations": bf.table.len(),
                "exhaustive": bf.exhaustive,
                "budget_exceeded": bf.budget_exceeded,
                "particles": n_search,
            },
            "optimum": mp_json(&sc.name, &g, &lq),
            "negative_control": mp_json(&sc.name, &ng, &nlq),
            "negative_control_exceeds": neg_ok,
        }),
    ))
}

fn rate_study(ctx: &Ctx) -> Result<(bool, Value)> {
    let sc = &ctx.scenario;
    let rc = sc
        .rates
        .as_ref()
        .ok_or_else(|| Error::config("rates", "rate-study needs a `rates` section"))?;
    let coeffs = ctx.built.coeffs.as_ref();
    let alt = ControlModel::constant(ctx.built.set.clone(), rc.alt)?;
    let bases = ctx.bases(&ctx.built.control)?;
    let rep = rate_probe(
        coeffs,
        &ctx.built.control,
        &alt,
        rc.t0,
        &rc.ladder,
        rc.beta,
        sc.x0,
        &bases,
        &sc.adjoint,
        &rc.tolerances,
    )?;
    ctx.csv("rates.csv", |w| write_rate_csv(&rep.rates, w))?;
    ctx.csv("identities.csv", |w| write_identity_csv(&rep.identities, w))?;
    ctx.csv("expansion.csv", |w| write_expansion_csv(&rep.expansion, w))?;
    let mut reps = Vec::new();
    for base in &bases {
        let lin = Linearization::new(coeffs, &base.traj);
        for &eps in &rc.ladder {
            let spike = SpikeSpec::single(rc.t0, eps, sc.horizon, sc.steps, alt.clone())?;
            let aux = solve_auxiliary(
                &lin,
                &base.adjoints.first,
                &base.adjoints.second,
                &spike,
                &sc.adjoint,
            )?;
            let r = representation_check(
                &lin,
                &base.adjoints.first,
                &base.adjoints.second,
                &aux,
                &base.adjoints.gamma,
                &spike,
            );
            reps.push(json!({ "eps": eps, "y_tilde0": r.y_tilde0, "expectation": r.expectation, "std_err": r.std_err, "z_score": r.z_score }));
        }
    }
    let gamma_min = bases
        .iter()
        .flat_map(|b| b.adjoints.gamma.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let max_z = reps
        .iter()
        .filter_map(|r| r["z_score"].as_f64())
        .fold(0.0, f64::max);
    let gates = &rc.gates;
    let rates_ok = !gates.rates || rep.gated_rates_pass();
    let ident_ok = !gates.identities || identities_ok(&rep.identities, gates.identity_eps);
    let exp_ok = !gates.expansion || rep.expansion.passed;
    let repr_ok = !gates.representation || (max_z <= 3.0 && gamma_min > 0.0);
    Ok((
        rates_ok && ident_ok && exp_ok && repr_ok,
        json!({
            "scenario": sc.name,
            "gates": {
                "rates": rates_ok,
                "identities": ident_ok,
                "expansion": exp_ok,
                "representation": repr_ok,
            },
            "ladder": rep,
            "representation": reps,
            "representation_max_z": max_z,
            "gamma_min": gamma_min,
        }),
    ))
}

/// Identities at ε ≤ `at_eps` pass, and the full-expansion residual decreases with ε.
pub fn identities_ok(rows: &[(f64, crate::variation::IdentityResidual)], at_eps: f64) -> bool {
    let small = rows
        .iter()
        .filter(|(e, r)| {
            *e <= at_eps + 1e-12
                && (r.identity == "first_order_y" || r.identity == "full_expansion")
        })
        .all(|(_, r)| r.passed);
    let mut full: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(_, r)| r.identity == "full_expansion")
        .map(|(e, r)| (*e, r.relative_rms))
        .collect();
    full.sort_by(|a, b| b.0.total_cmp(&a.0));
    let decreasing = full.windows(2).all(|w| w[1].1 <= w[0].1);
    small && decreasing
}

fn constrained_demo(ctx: &Ctx) -> Result<(bool, Value)> {
    let sc = &ctx.scenario;
    let cc = sc.constraint.as_ref().ok_or_else(|| {
        Error::config(
            "constraint",
            "constrained-demo needs a `constraint` section",
        )
    })?;
    let opts = sc
        .constrained_options()
        .expect("constraint section is present");
    let noises = ctx.noises(sc.particles)?;
    let rep = constrained_verify(
        ctx.built.coeffs.as_ref(),
        &cc.psi,
        &ctx.built.set,
        &ctx.built.control,
        "scenario control",
        sc.x0,
        &noises,
        &opts,
    )?;
    ctx.csv("multipliers.csv", |w| {
        writeln!(
            w,
            "kappa,lambda,mu,j_kappa,upsilon0,violation_fraction,control"
        )?;
        for s in &rep.steps {
            let ctl: Vec<String> = s.control.iter().map(|v| v.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.kappa,
                s.lambda,
                s.mu,
                s.j_kappa,
                s.upsilon0,
                s.check.violation_fraction,
                ctl.join(" ")
            )?;
        }
        Ok(())
    })?;
    Ok((
        rep.passed && rep.feasible,
        json!({ "scenario": sc.name, "constrained": rep }),
    ))
}

/// Reads a report file back as JSON.
pub fn read_report(path: &Path) -> Result<Value> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
