//! Experiment runner behind the `graze` binary.

pub mod config;
pub mod output;

use config::{ConfigError, Experiment, ExperimentConfig, SampleSection};
use graze::geometry::{builtin_domain, ImplicitDomain};
use graze::jump_lab::{self, FittedConstants, FormationReport, FormationSpec, JumpError, PropagationSpec};
use graze::mild_solver::{random_queries, KineticField, MildSolver, Query, SolverConfig, SolverError};
use graze::phase_topology::{
    classify_phase_point, membership, random_boundary_point, random_interior_point, random_unit, tangent_frame,
};
use graze::trajectories::bounce_cycle;
use graze::Vec3;
use output::{num, vec3_fields, Artifacts, CsvTable, Manifest, ManifestEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("experiment failed: {0}")]
    Experiment(String),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Experiment(_) => 2,
            _ => 1,
        }
    }
}

impl From<JumpError> for RunError {
    fn from(e: JumpError) -> Self {
        RunError::Experiment(e.to_string())
    }
}

impl From<SolverError> for RunError {
    fn from(e: SolverError) -> Self {
        RunError::Experiment(e.to_string())
    }
}

pub struct RunOutcome {
    pub pass: bool,
    pub artifacts: Artifacts,
    pub manifest: Manifest,
}

/// Operator constants under their report names, with the ranges and rules
/// they were fitted on.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub C_nu: f64,
    pub C_k: f64,
    pub C_Gamma: f64,
    pub C_w: f64,
    pub C_beta_tilde: f64,
    pub C_prime: f64,
    pub fit_ranges: FitRanges,
    pub node_counts: graze::mild_solver::SolverQuadrature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRanges {
    pub domain: String,
    pub v_max: f64,
    pub speed_samples: usize,
    pub rho_values: Vec<f64>,
    pub c_prime_queries: usize,
    pub c_prime_t_max: f64,
}

impl ConstantsReport {
    pub fn constants(&self) -> FittedConstants {
        FittedConstants {
            c_nu: self.C_nu,
            c_k: self.C_k,
            c_gamma: self.C_Gamma,
            c_w: self.C_w,
            c_beta_tilde: self.C_beta_tilde,
            c_prime: self.C_prime,
        }
    }
}

fn domain(cfg: &ExperimentConfig) -> Result<ImplicitDomain, RunError> {
    builtin_domain(&cfg.domain_name).map_err(|_| ConfigError::DomainUnknown(cfg.domain_name.clone()).into())
}

fn coarse_or(c: &Option<SolverConfig>) -> SolverConfig {
    c.unwrap_or_else(SolverConfig::coarse)
}

/// Runs the configured experiment and returns the artifacts without
/// touching the file system.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let mut art = Artifacts::default();
    let mut hashed = cfg.clone();
    hashed.output_dir = Default::default();
    let config_json = output::json_bytes(&hashed);
    let config_sha256 = output::sha256_hex(&config_json);
    art.add("config.json", config_json);

    let pass = match cfg.experiment {
        Experiment::Classify => classify(cfg, &mut art)?,
        Experiment::Membership => membership_table(cfg, &mut art)?,
        Experiment::ExitTime => exit_time(cfg, &mut art)?,
        Experiment::Cycle => cycle(cfg, &mut art)?,
        Experiment::Solve => solve(cfg, &mut art)?,
        Experiment::Formation => formation(cfg, &mut art)?.pass,
        Experiment::Propagation => propagation(cfg, &mut art)?,
        Experiment::ContinuityScan => continuity(cfg, &mut art)?,
        Experiment::ConstantsFit => {
            constants(cfg, &mut art)?;
            true
        }
    };
    let constants_sha256 = art.get("constants.json").map(output::sha256_hex);
    let files = art
        .files
        .iter()
        .map(|(name, bytes)| ManifestEntry {
            name: name.clone(),
            sha256: output::sha256_hex(bytes),
            bytes: bytes.len(),
        })
        .collect();
    let manifest = Manifest {
        tool: "graze",
        version: env!("CARGO_PKG_VERSION"),
        experiment: cfg.experiment.as_str(),
        status: if pass { "pass" } else { "fail" },
        config_sha256,
        constants_sha256,
        files,
    };
    Ok(RunOutcome { pass, artifacts: art, manifest })
}

/// Phase points: a `tangential_fraction` share on the boundary with a
/// tangential velocity, the rest split between interior points and
/// boundary points with arbitrary velocity.
fn sample_points(dom: &ImplicitDomain, s: &SampleSection, seed: u64) -> Vec<(f64, Vec3, Vec3)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tan = (s.samples as f64 * s.tangential_fraction).round() as usize;
    (0..s.samples)
        .map(|i| {
            let speed = rng.gen_range(s.speed_min..s.speed_max);
            let t = rng.gen_range(0.0..s.t_max);
            if i < n_tan {
                let x = random_boundary_point(dom, &mut rng);
                let n = dom.outward_normal(&x).unwrap_or_else(|_| Vec3::z());
                let (e1, e2) = tangent_frame(&n);
                let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                (t, x, speed * (phi.cos() * e1 + phi.sin() * e2))
            } else if (i - n_tan).is_multiple_of(2) {
                (t, random_interior_point(dom, &mut rng), speed * random_unit(&mut rng))
            } else {
                (t, random_boundary_point(dom, &mut rng), speed * random_unit(&mut rng))
            }
        })
        .collect()
}

fn classify(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<bool, RunError> {
    let dom = domain(cfg)?;
    let pts = sample_points(&dom, &cfg.classify, cfg.seed);
    let rows: Vec<_> = pts.par_iter().map(|(_, x, v)| classify_phase_point(&dom, x, v)).collect();
    let mut csv = CsvTable::new(&["x1", "x2", "x3", "v1", "v2", "v3", "kind", "t_b_fwd", "t_b_bwd", "n_dot_v"]);
    let mut counts = std::collections::BTreeMap::<String, usize>::new();
    for ((_, x, v), r) in pts.iter().zip(rows) {
        let mut f: Vec<String> = vec3_fields(x).into_iter().chain(vec3_fields(v)).collect();
        match r {
            Ok(c) => {
                f.extend([c.kind.as_str().to_string(), num(c.t_b_fwd), num(c.t_b_bwd), num(c.n_dot_v)]);
                *counts.entry(c.kind.as_str().to_string()).or_default() += 1;
            }
            Err(_) => {
                f.extend(["unclassifiable".into(), String::new(), String::new(), String::new()]);
                *counts.entry("unclassifiable".into()).or_default() += 1;
            }
        }
        csv.row(f);
    }
    art.add("classify.csv", csv.into_bytes());
    art.add("classify.json", output::json_bytes(&serde_json::json!({ "samples": pts.len(), "counts": counts })));
    Ok(true)
}

fn membership_table(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<bool, RunError> {
    let dom = domain(cfg)?;
    let pts = sample_points(&dom, &cfg.membership, cfg.seed);
    let rows: Vec<_> = pts.par_iter().map(|(t, x, v)| membership(&dom, *t, x, v, cfg.bc)).collect();
    let mut csv =
        CsvTable::new(&["t", "x1", "x2", "x3", "v1", "v2", "v3", "in_D", "in_C", "in_D_bb", "in_C_bb", "reason"]);
    let mut failed = 0;
    for ((t, x, v), m) in pts.iter().zip(rows) {
        let mut f = vec![num(*t)];
        f.extend(vec3_fields(x).into_iter().chain(vec3_fields(v)));
        match m {
            Ok(m) => f.extend([
                m.in_d.to_string(),
                m.in_c.to_string(),
                m.in_d_bb.to_string(),
                m.in_c_bb.to_string(),
                serde_json::to_value(m.reason).unwrap().as_str().unwrap_or_default().to_string(),
            ]),
            Err(_) => {
                failed += 1;
                f.extend([String::new(), String::new(), String::new(), String::new(), "unclassifiable".into()]);
            }
        }
        csv.row(f);
    }
    art.add("membership.csv", csv.into_bytes());
    art.add(
        "membership.json",
        output::json_bytes(&serde_json::json!({ "samples": pts.len(), "unclassifiable": failed })),
    );
    Ok(true)
}

fn exit_time(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<bool, RunError> {
    let dom = domain(cfg)?;
    let mut s = cfg.exit_time.clone();
    s.tangential_fraction = 0.0;
    let pts: Vec<_> = sample_points(&dom, &s, cfg.seed).into_iter().filter(|(_, x, _)| dom.psi(x) < 0.0).collect();
    let rows: Vec<_> = pts.par_iter().map(|(_, x, v)| dom.backward_exit(x, v)).collect();
    let mut csv =
        CsvTable::new(&["x1", "x2", "x3", "v1", "v2", "v3", "t_b", "xb1", "xb2", "xb3", "tangential", "normal_dot_v"]);
    for ((_, x, v), r) in pts.iter().zip(rows) {
        let mut f: Vec<String> = vec3_fields(x).into_iter().chain(vec3_fields(v)).collect();
        match r {
            Ok(e) => {
                f.push(num(e.t_b));
                f.extend(vec3_fields(&e.x_b));
                f.extend([e.tangential.to_string(), num(e.normal_dot_v)]);
            }
            Err(_) => f.extend(std::iter::repeat_n(String::new(), 6)),
        }
        csv.row(f);
    }
    art.add("exit_time.csv", csv.into_bytes());

    // exit times next to the witnesses: a jump at the concave graze, none at
    // the inward inflection
    let mut pass = true;
    let mut report = serde_json::Map::new();
    if let Some((x0, v0)) = dom.witnesses.singular {
        let seq = jump_lab::exit_time_probes(&dom, &x0, &v0, 0.2, 1e-2, 12)?;
        let eps0 = 0.5 * dom.backward_exit(&x0, &(-v0)).map_err(JumpError::from)?.t_b;
        let ok = seq.gaps.iter().all(|g| *g >= eps0);
        pass &= ok;
        report.insert("singular".into(), serde_json::json!({ "epsilon0": eps0, "pass": ok, "probes": seq }));
    }
    if let Some((z, v)) = dom.witnesses.inflection_in {
        let seq = jump_lab::exit_time_probes(&dom, &z, &v, 0.2, 1e-2, 20)?;
        let ok = seq.gaps.windows(2).all(|g| g[1] < g[0]) && *seq.gaps.last().unwrap() < 0.25 * seq.gaps[0];
        pass &= ok;
        report.insert("inflection_in".into(), serde_json::json!({ "pass": ok, "probes": seq }));
    }
    if !report.is_empty() {
        art.add("exit_time_probes.json", output::json_bytes(&report));
    }
    Ok(pass)
}

fn cycle(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<bool, RunError> {
    let dom = domain(cfg)?;
    let c = &cfg.cycle;
    let cyc = bounce_cycle(&dom, c.t, &Vec3::from(c.x), &Vec3::from(c.v), c.k_max)
        .map_err(|e| RunError::Experiment(e.to_string()))?;
    let mut csv = CsvTable::new(&["k", "t_k", "x1", "x2", "x3", "v1", "v2", "v3"]);
    for (k, e) in cyc.entries.iter().enumerate() {
        let mut f = vec![k.to_string(), num(e.t)];
        f.extend(vec3_fields(&e.x).into_iter().chain(vec3_fields(&e.v)));
        csv.row(f);
    }
    art.add("cycle.csv", csv.into_bytes());
    art.add(
        "cycle.json",
        output::json_bytes(&serde_json::json!({
            "entries": cyc.entries.len(), "period_d": cyc.period_d, "truncated_at": cyc.truncated_at,
        })),
    );
    Ok(cyc.truncated_at.is_none())
}

fn read_queries(path: &std::path::Path) -> Result<Vec<Query>, RunError> {
    let invalid = |m: String| RunError::Config(ConfigError::Invalid(format!("{}: {m}", path.display())));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| invalid(e.to_string()))?;
    let header: Vec<String> = rdr.headers().map_err(|e| invalid(e.to_string()))?.iter().map(str::to_string).collect();
    if header != ["t", "x1", "x2", "x3", "v1", "v2", "v3"] {
        return Err(invalid("expected header t,x1,x2,x3,v1,v2,v3".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| invalid(e.to_string()))?;
        let f: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| invalid(e.to_string()))?;
        out.push((f[0], Vec3::new(f[1], f[2], f[3]), Vec3::new(f[4], f[5], f[6])));
    }
    Ok(out)
}

fn solve(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<bool, RunError> {
    let dom = domain(cfg)?;
    let s = &cfg.solve;
    let queries = match &s.queries {
        Some(p) => read_queries(p)?,
        None => random_queries(&dom, s.random, s.t_max, (s.speed_min, s.speed_max), cfg.seed),
    };
    let field =
        KineticField::new(dom, cfg.kernel, cfg.weights, cfg.data.initial.clone(), cfg.bc, cfg.data.inflow.clone())?;
    let solver = MildSolver::new(field, cfg.solver)?;
    let depth = cfg.solver.expansion_depth;
    let results: Vec<_> = queries.par_iter().map(|(t, x, v)| solver.eval_at_depth(depth, *t, x, v)).collect();
    let mut csv = CsvTable::new(&[
        "t",
        "x1",
        "x2",
        "x3",
        "v1",
        "v2",
        "v3",
        "h",
        "status",
        "inner_evals",
        "dropped",
        "truncated_walls",
        "stencils",
        "reflections",
    ]);
    let (mut refused, mut sup) = (0usize, 0f64);
    for ((t, x, v), r) in queries.iter().zip(results) {
        let mut f = vec![num(*t)];
        f.extend(vec3_fields(x).into_iter().chain(vec3_fields(v)));
        match r {
            Ok((h, d)) => {
                sup = sup.max(h.abs());
                f.extend([
                    num(h),
                    "ok".into(),
                    d.inner_evals.to_string(),
                    d.dropped.to_string(),
                    d.truncated_walls.to_string(),
                    d.stencils.to_string(),
                    d.reflections.to_string(),
                ]);
            }
            Err(e) => {
                refused += 1;
                f.push(String::new());
                f.push(format!("refused: {e}"));
                f.extend(std::iter::repeat_n(String::new(), 5));
            }
        }
        csv.row(f);
    }
    art.add("solve.csv", csv.into_bytes());
    art.add(
        "solve.json",
        output::json_bytes(&serde_json::json!({
            "queries": queries.len(), "refused": refused, "sup_abs_h": sup, "depth": depth,
        })),
    );
    Ok(true)
}

/// Loads `constants.file` or fits the constants, and records them as
/// `constants.json`.
fn constants(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<FittedConstants, RunError> {
    let report = match &cfg.constants.file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.clone(), source })?;
            serde_json::from_str::<ConstantsReport>(&text)
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?
        }
        None => {
            let dom = domain(cfg)?;
            let solver = coarse_or(&cfg.constants.solver);
            let c = jump_lab::fit_constants(&dom, &cfg.kernel, &cfg.weights, &solver, cfg.constants.queries, cfg.seed)?;
            let mut rhos = jump_lab::FIT_RHOS.to_vec();
            rhos.push(cfg.weights.rho);
            ConstantsReport {
                C_nu: c.c_nu,
                C_k: c.c_k,
                C_Gamma: c.c_gamma,
                C_w: c.c_w,
                C_beta_tilde: c.c_beta_tilde,
                C_prime: c.c_prime,
                fit_ranges: FitRanges {
                    domain: cfg.domain_name.clone(),
                    v_max: jump_lab::FIT_V_MAX,
                    speed_samples: jump_lab::FIT_SPEED_SAMPLES,
                    rho_values: rhos,
                    c_prime_queries: cfg.constants.queries,
                    c_prime_t_max: jump_lab::FIT_T_MAX,
                },
                node_counts: solver.vel_quad,
            }
        }
    };
    art.add("constants.json", output::json_bytes(&report));
    Ok(report.constants())
}

fn formation_spec(cfg: &ExperimentConfig) -> FormationSpec {
    let f = &cfg.formation;
    FormationSpec {
        bc: cfg.bc,
        graph_radius: f.graph_radius,
        amplitude: f.amplitude,
        speed: f.speed,
        deltas_rel: f.deltas_rel.clone(),
        probes_per_delta: f.probes_per_delta,
        seed: cfg.seed,
        safety: f.safety,
        solver: cfg.solver,
    }
}

fn jump_csv(times: &[f64], jumps: &[f64], unc: &[f64]) -> Vec<u8> {
    let mut csv = CsvTable::new(&["t", "jump", "uncertainty"]);
    for ((t, j), u) in times.iter().zip(jumps).zip(unc) {
        csv.row(vec![num(*t), num(*j), num(*u)]);
    }
    csv.into_bytes()
}

fn formation(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<FormationReport, RunError> {
    let dom = domain(cfg)?;
    let consts = constants(cfg, art)?;
    let r = jump_lab::formation_experiment(&dom, &cfg.kernel, &cfg.weights, &formation_spec(cfg), Some(&consts))?;
    art.add("formation.json", output::json_bytes(&r));
    art.add("formation.csv", jump_csv(&[r.setup.t0], &[r.jump.extrapolated_jump], &[r.jump.uncertainty]));
    let mut gaps = CsvTable::new(&["probe", "delta", "sup_gap"]);
    for (name, est) in [("witness", &r.jump), ("control", &r.control)] {
        for (d, g) in est.delta_sequence.iter().zip(&est.sup_gaps) {
            gaps.row(vec![name.into(), num(*d), num(*g)]);
        }
    }
    art.add("formation_gaps.csv", gaps.into_bytes());
    Ok(r)
}

fn propagation(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<bool, RunError> {
    let dom = domain(cfg)?;
    let form = formation(cfg, art)?;
    if !form.pass {
        return Ok(false);
    }
    let p = &cfg.propagation;
    let spec = PropagationSpec {
        samples: p.samples,
        collisionless: p.collisionless,
        span: p.span,
        deltas_rel: p.deltas_rel.clone(),
        probes_per_delta: p.probes_per_delta,
        seed: cfg.seed,
        solver: cfg.solver,
    };
    let r = jump_lab::propagation_experiment(&dom, &cfg.kernel, &cfg.weights, &form, &spec)?;
    art.add("propagation.json", output::json_bytes(&r));
    art.add("propagation.csv", jump_csv(&r.times, &r.jumps, &r.uncertainties));
    Ok(r.pass)
}

fn continuity(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<bool, RunError> {
    let dom = domain(cfg)?;
    let c = &cfg.continuity;
    let field = KineticField::new(
        dom.clone(),
        cfg.kernel,
        cfg.weights,
        cfg.data.initial.clone(),
        cfg.bc,
        cfg.data.inflow.clone(),
    )?;
    let solver = MildSolver::new(field, coarse_or(&c.solver))?;
    let centers = jump_lab::continuity_centers(
        &dom,
        cfg.bc,
        c.count,
        c.t_max,
        (c.speed_min, c.speed_max),
        c.before_exit_only,
        cfg.seed,
    )?;
    let spec = jump_lab::ContinuitySpec {
        deltas: c.deltas.clone(),
        probes_per_delta: c.probes_per_delta,
        seed: cfg.seed,
        budget_rel: c.budget_rel,
        min_slope: c.min_slope,
        min_r2: c.min_r2,
    };
    let sup = cfg.data.initial.sup_norm(&cfg.weights);
    let r = jump_lab::continuity_scan(&solver, cfg.bc, &centers, sup, &spec)?;
    let mut csv = CsvTable::new(&[
        "t",
        "x1",
        "x2",
        "x3",
        "v1",
        "v2",
        "v3",
        "reason",
        "final_gap",
        "final_rel",
        "slope",
        "r2",
        "pass",
    ]);
    for e in &r.entries {
        let p = &e.estimate.center;
        let mut f = vec![num(p.t)];
        f.extend(vec3_fields(&p.x).into_iter().chain(vec3_fields(&p.v)));
        f.extend([
            serde_json::to_value(e.membership.reason).unwrap().as_str().unwrap_or_default().to_string(),
            num(*e.estimate.sup_gaps.last().unwrap()),
            num(e.final_rel),
            e.slope.map(num).unwrap_or_default(),
            e.r2.map(num).unwrap_or_default(),
            e.pass.to_string(),
        ]);
        csv.row(f);
    }
    art.add("continuity.json", output::json_bytes(&r));
    art.add("continuity.csv", csv.into_bytes());
    Ok(r.pass)
}
