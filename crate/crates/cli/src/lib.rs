//! `kolmo` command-line front end: loads a run configuration, dispatches one
//! task and writes its artifacts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use kolmo_core::audit::{
    check_drift_condition, check_generator_bound, check_growth_condition, check_moment_bound, check_nondegeneracy,
    search_certificate, AssumptionCertificate, AuditError, AuditReport, CertificateSearch, GeneratorOptions,
    GeneratorReport, MomentOptions, MomentReport, SearchOptions, SegmentSampler, SpectrumReport,
};
use kolmo_core::classify::{
    classify_regime, estimate_basin_probabilities, BasinReport, ClassifyError, ClassifyOptions, RegimeReport,
};
use kolmo_core::invasion::{
    closed_form_estimate, default_initial, estimate_lambda_from, lyapunov_exponent, InvasionError, InvasionEstimate,
    LyapunovOptions, Method,
};
use kolmo_core::measures::{simulate_with_stats, OccupationReport, OccupationStats};
use kolmo_core::model::{build_zoo_model, Face, ModelError, ModelSpec, ZooParams};
use kolmo_core::sdde::{history_points, InvariantLog, Segment, SimConfig, SimError, Trajectory};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("classification inconclusive")]
    Inconclusive,
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Inconclusive => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Divergence { .. } | SimError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<InvasionError> for CliError {
    fn from(e: InvasionError) -> Self {
        match e {
            InvasionError::Sim(s) => s.into(),
            InvasionError::AllAborted(_) => CliError::Numerical(e.to_string()),
            InvasionError::InvalidSpecies(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<ClassifyError> for CliError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::Invasion(i) => i.into(),
            ClassifyError::Sim(s) => s.into(),
            ClassifyError::Unsupported(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::Sim(s) => s.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

/// Initial segment: constant, or an explicit sampled segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Constant(Vec<f64>),
    Segment(Segment),
}

impl InitialSpec {
    fn build(&self, model: &ModelSpec, dt: f64) -> Result<Segment, CliError> {
        let n_r = history_points(model.max_lag(), dt);
        match self {
            InitialSpec::Constant(x) => {
                if x.len() != model.dim() {
                    return Err(CliError::Config(format!("initial has {} values, model has {}", x.len(), model.dim())));
                }
                Ok(Segment::constant(x, n_r, dt))
            }
            InitialSpec::Segment(s) => {
                if s.n != model.dim() || s.values.len() != s.n * (s.n_r + 1) || !(s.dt > 0.0) {
                    return Err(CliError::Config("initial segment has the wrong shape".into()));
                }
                Ok(Segment::sample(s, n_r, dt))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvasionTask {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub lyapunov: Option<LyapunovOptions>,
}

fn default_method() -> Method {
    Method::TimeAverage
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyTask {
    /// Ignore closed forms and estimate every rate by Monte Carlo.
    #[serde(default)]
    pub monte_carlo: bool,
    #[serde(default)]
    pub basins: bool,
    #[serde(default = "default_basin_replicates")]
    pub basin_replicates: usize,
    #[serde(default = "default_basin_horizon")]
    pub basin_horizon: f64,
}

fn default_basin_replicates() -> usize {
    200
}

fn default_basin_horizon() -> f64 {
    2000.0
}

impl Default for ClassifyTask {
    fn default() -> Self {
        ClassifyTask {
            monte_carlo: false,
            basins: false,
            basin_replicates: default_basin_replicates(),
            basin_horizon: default_basin_horizon(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditCheck {
    Drift,
    Growth,
    Nondegeneracy,
    Generator,
    Moment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NondegeneracyTask {
    pub epsilon: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorTask {
    /// Number of random segments at which the bound is checked.
    pub segments: usize,
    pub pairs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditTask {
    #[serde(default)]
    pub certificate: Option<AssumptionCertificate>,
    /// Used when no certificate is given.
    #[serde(default)]
    pub search: Option<SearchOptions>,
    pub sampler: SegmentSampler,
    #[serde(default = "default_checks")]
    pub checks: Vec<AuditCheck>,
    #[serde(default)]
    pub nondegeneracy: Option<NondegeneracyTask>,
    #[serde(default)]
    pub generator: Option<GeneratorTask>,
    #[serde(default)]
    pub moment: Option<MomentOptions>,
}

fn default_checks() -> Vec<AuditCheck> {
    vec![AuditCheck::Drift]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default)]
    pub trajectory: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub model: ZooParams,
    pub sim: SimConfig,
    #[serde(default)]
    pub initial: Option<InitialSpec>,
    /// Species names spanning the face; the full system when unset.
    #[serde(default)]
    pub face: Option<Vec<String>>,
    #[serde(default)]
    pub species: Option<String>,
    #[serde(default)]
    pub invasion: Option<InvasionTask>,
    #[serde(default)]
    pub classify: Option<ClassifyTask>,
    #[serde(default)]
    pub audit: Option<AuditTask>,
    #[serde(default)]
    pub output: Option<OutputPaths>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!("unsupported schema {}, expected {SCHEMA_VERSION}", cfg.schema)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Builds the model and fills every default, so the echo is self-describing.
    pub fn materialize(&self) -> Result<(RunConfig, ModelSpec), CliError> {
        let model = build_zoo_model(&self.model)?;
        let mut cfg = self.clone();
        cfg.model = self.model.materialize();
        cfg.sim = self.sim.materialize(&model);
        cfg.sim.validate(&model)?;
        Ok((cfg, model))
    }
}

/// Parses a face given as species names; `none`, `{}` or an empty string is
/// the empty face.
pub fn parse_face(model: &ModelSpec, names: &[String]) -> Result<Face, CliError> {
    let mut face = Face::empty();
    for name in names {
        let name = name.trim();
        if name.is_empty() {
            continue;
        }
        let i = model.species_index(name).ok_or_else(|| CliError::Config(format!("unknown species {name:?}")))?;
        face = face.with(i);
    }
    Ok(face)
}

fn split_list(s: &str) -> Vec<String> {
    let s = s.trim().trim_start_matches('{').trim_end_matches('}');
    if s.eq_ignore_ascii_case("none") || s == "∅" {
        return Vec::new();
    }
    s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

#[derive(Parser, Debug)]
#[command(name = "kolmo", version, about = "Stochastic functional Kolmogorov simulation lab")]
pub struct Cli {
    /// Cap on concurrent replicates.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Report path; standard output when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Integrate trajectories and report occupation statistics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV of the first replicate.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Comma-separated species spanning the face.
        #[arg(long)]
        face: Option<String>,
    },
    /// Estimate an invasion rate.
    Invasion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        face: Option<String>,
        #[arg(long)]
        species: Option<String>,
        /// Use the closed form where one exists.
        #[arg(long)]
        closed_form: bool,
        /// Use the Lyapunov-exponent estimator.
        #[arg(long, conflicts_with = "closed_form")]
        lyapunov: bool,
    },
    /// Classify the long-run regime of a zoo model.
    Classify {
        #[command(flatten)]
        common: Common,
        /// Exit with status 4 when the regime is inconclusive.
        #[arg(long)]
        strict: bool,
        /// Also estimate basin probabilities.
        #[arg(long)]
        basins: bool,
    },
    /// Audit the standing assumptions with a certificate.
    Audit {
        #[command(flatten)]
        common: Common,
    },
    /// Print the materialized configuration.
    Echo {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Serializes with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn fmt_f64(out: &mut String, v: f64) {
    if v.is_finite() {
        let mut b = ryu::Buffer::new();
        out.push_str(b.format_finite(v));
    } else if v.is_nan() {
        out.push_str("nan");
    } else if v > 0.0 {
        out.push_str("inf");
    } else {
        out.push_str("-inf");
    }
}

/// `t,<species...>` with one row per recorded sample.
pub fn trajectory_csv(traj: &Trajectory, names: &[String]) -> String {
    let mut out = String::from("t");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (t, x) in traj.times.iter().zip(&traj.states) {
        fmt_f64(&mut out, *t);
        for v in x {
            out.push(',');
            fmt_f64(&mut out, *v);
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    model: &'a str,
    face: Vec<String>,
    replicates: usize,
    stats: OccupationReport,
    invariants: InvariantLog,
    final_log_states: Vec<Vec<f64>>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct InvasionReport<'a> {
    #[serde(flatten)]
    estimate: InvasionEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct ClassifyReport<'a> {
    #[serde(flatten)]
    report: RegimeReport,
    config: &'a RunConfig,
}

#[derive(Default, Serialize)]
struct AuditOutput<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    search: Option<CertificateSearch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate: Option<AssumptionCertificate>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    reports: Vec<AuditReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nondegeneracy: Option<SpectrumReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    generator: Vec<GeneratorReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    moment: Option<MomentReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a RunConfig>,
}

/// Artifacts produced by one task, written by the caller.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub report: String,
    pub trajectory: Option<String>,
    /// Status to exit with once the artifacts are written.
    pub status: i32,
}

fn resolve_face(model: &ModelSpec, flag: Option<&str>, cfg: &RunConfig) -> Result<Face, CliError> {
    match (flag, &cfg.face) {
        (Some(s), _) => parse_face(model, &split_list(s)),
        (None, Some(names)) => parse_face(model, names),
        (None, None) => Ok(model.restriction()),
    }
}

fn initial_for(cfg: &RunConfig, model: &ModelSpec, face: Face) -> Result<Segment, CliError> {
    let dt = cfg.sim.resolved_dt(model);
    match &cfg.initial {
        Some(spec) => spec.build(model, dt),
        None => Ok(default_initial(model, face, dt)),
    }
}

pub fn simulate(cfg: &RunConfig, face_flag: Option<&str>, want_csv: bool) -> Result<Artifacts, CliError> {
    let (echo, model) = cfg.materialize()?;
    let face = resolve_face(&model, face_flag, &echo)?;
    let init = initial_for(&echo, &model, face)?;
    let mut stats = Vec::new();
    let mut invariants = InvariantLog::default();
    let mut finals = Vec::new();
    let mut first: Option<Trajectory> = None;
    for k in 0..echo.sim.replicates as u64 {
        let (traj, s) = simulate_with_stats(&model, &init, &echo.sim, face, k)?;
        invariants.merge(&traj.invariants);
        finals.push(traj.final_log_state.clone());
        stats.push(s);
        if first.is_none() {
            first = Some(traj);
        }
    }
    let pooled = OccupationStats::merged(&stats).ok_or_else(|| CliError::Config("no replicates".into()))?;
    let names = model.species_names();
    let report = SimulateReport {
        model: model.name(),
        face: face.names(names),
        replicates: stats.len(),
        stats: pooled.report(names),
        invariants,
        final_log_states: finals,
        config: &echo,
    };
    Ok(Artifacts {
        report: to_json(&report),
        trajectory: if want_csv { first.as_ref().map(|t| trajectory_csv(t, names)) } else { None },
        status: 0,
    })
}

pub fn invasion(
    cfg: &RunConfig,
    face_flag: Option<&str>,
    species_flag: Option<&str>,
    closed_form: bool,
    lyapunov: bool,
) -> Result<Artifacts, CliError> {
    let (echo, model) = cfg.materialize()?;
    let face = match (face_flag, &echo.face) {
        (None, None) => return Err(CliError::Config("invasion needs a face".into())),
        _ => resolve_face(&model, face_flag, &echo)?,
    };
    let species_name = species_flag
        .map(str::to_string)
        .or_else(|| echo.species.clone())
        .ok_or_else(|| CliError::Config("invasion needs a species".into()))?;
    let species = model
        .species_index(species_name.trim())
        .ok_or_else(|| CliError::Config(format!("unknown species {species_name:?}")))?;
    let task = echo.invasion.clone().unwrap_or(InvasionTask { method: Method::TimeAverage, lyapunov: None });
    let method = if closed_form {
        Method::ClosedForm
    } else if lyapunov {
        Method::LyapunovExponent
    } else {
        task.method
    };
    let mut note = None;
    let estimate = match method {
        Method::ClosedForm => match closed_form_estimate(&model, face, species, echo.sim.horizon) {
            Some(e) => e,
            None => {
                note = Some("no closed form for this face and species; time-average estimate reported".into());
                let init = initial_for(&echo, &model, face)?;
                estimate_lambda_from(&model, &init, face, species, &echo.sim)?
            }
        },
        Method::LyapunovExponent => {
            let opts = task.lyapunov.unwrap_or(LyapunovOptions::new(1e-6));
            lyapunov_exponent(&model, face, species, &echo.sim, opts)?
        }
        Method::TimeAverage => {
            let init = initial_for(&echo, &model, face)?;
            estimate_lambda_from(&model, &init, face, species, &echo.sim)?
        }
    };
    Ok(Artifacts { report: to_json(&InvasionReport { estimate, note, config: &echo }), trajectory: None, status: 0 })
}

pub fn classify(cfg: &RunConfig, strict: bool, basins_flag: bool) -> Result<Artifacts, CliError> {
    let (mut echo, model) = cfg.materialize()?;
    let task = echo.classify.clone().unwrap_or_default();
    echo.classify = Some(task.clone());
    let options = if task.monte_carlo {
        ClassifyOptions::monte_carlo(echo.sim.clone())
    } else {
        ClassifyOptions::new(echo.sim.clone())
    };
    let mut report = classify_regime(&model, &options)?;
    if task.basins || basins_flag {
        let mut sim = echo.sim.clone();
        sim.horizon = task.basin_horizon;
        sim.replicates = task.basin_replicates;
        let init = initial_for(&echo, &model, model.restriction())?;
        let basins: BasinReport = estimate_basin_probabilities(&model, &init, &sim)?;
        report.basins = Some(basins);
    }
    let inconclusive = report.regime == "inconclusive";
    Ok(Artifacts {
        report: to_json(&ClassifyReport { report, config: &echo }),
        trajectory: None,
        status: if strict && inconclusive { CliError::Inconclusive.exit_code() } else { 0 },
    })
}

pub fn audit(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let (echo, model) = cfg.materialize()?;
    let task = echo.audit.clone().ok_or_else(|| CliError::Config("audit needs an audit block".into()))?;
    let mut out = AuditOutput::default();
    let cert = match (&task.certificate, &task.search) {
        (Some(c), _) => c.clone(),
        (None, Some(search)) => {
            let found = search_certificate(&model, search)?;
            let c = found.certificate.clone();
            out.search = Some(found);
            c
        }
        (None, None) => return Err(CliError::Config("audit needs a certificate or a search block".into())),
    };
    for check in &task.checks {
        match check {
            AuditCheck::Drift => out.reports.push(check_drift_condition(&model, &cert, &task.sampler)?),
            AuditCheck::Growth => out.reports.push(check_growth_condition(&model, &cert, &task.sampler)?),
            AuditCheck::Nondegeneracy => {
                let nd = task
                    .nondegeneracy
                    .as_ref()
                    .ok_or_else(|| CliError::Config("nondegeneracy check needs epsilon and radius".into()))?;
                out.nondegeneracy = Some(check_nondegeneracy(&model, &task.sampler, nd.epsilon, nd.radius)?);
            }
            AuditCheck::Generator => {
                let g = task
                    .generator
                    .as_ref()
                    .ok_or_else(|| CliError::Config("generator check needs a generator block".into()))?;
                let mut sampler = task.sampler.clone();
                sampler.samples = g.segments;
                for (k, seg) in sampler.generate(&model)?.iter().enumerate() {
                    let opts = GeneratorOptions { pairs: g.pairs, seed: g.seed.wrapping_add(k as u64) };
                    out.generator.push(check_generator_bound(&model, &cert, seg, opts)?);
                }
            }
            AuditCheck::Moment => {
                let m =
                    task.moment.as_ref().ok_or_else(|| CliError::Config("moment check needs a moment block".into()))?;
                let dt = kolmo_core::audit::SegmentSampler::grid(&model).1;
                let init = match &echo.initial {
                    Some(spec) => spec.build(&model, dt)?,
                    None => default_initial(&model, model.restriction(), dt),
                };
                out.moment = Some(check_moment_bound(&model, &cert, &init, &task.sampler, m)?);
            }
        }
    }
    out.certificate = Some(cert);
    out.config = Some(&echo);
    Ok(Artifacts { report: to_json(&out), trajectory: None, status: 0 })
}

pub fn echo(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let (echo, _) = cfg.materialize()?;
    Ok(Artifacts { report: to_json(&echo), trajectory: None, status: 0 })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Runs a parsed command, writes its artifacts and returns the exit status.
pub fn execute(cli: Cli) -> Result<i32, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (artifacts, report_path, csv_path) = match cli.command {
        Command::Simulate { common, trajectory, face } => {
            let cfg = RunConfig::load(&common.config)?;
            let out = cfg.output.clone().unwrap_or_default();
            let csv = trajectory.or(out.trajectory);
            let a = simulate(&cfg, face.as_deref(), csv.is_some())?;
            (a, common.report.or(out.report), csv)
        }
        Command::Invasion { common, face, species, closed_form, lyapunov } => {
            let cfg = RunConfig::load(&common.config)?;
            let a = invasion(&cfg, face.as_deref(), species.as_deref(), closed_form, lyapunov)?;
            (a, common.report.or(cfg.output.and_then(|o| o.report)), None)
        }
        Command::Classify { common, strict, basins } => {
            let cfg = RunConfig::load(&common.config)?;
            let a = classify(&cfg, strict, basins)?;
            (a, common.report.or(cfg.output.and_then(|o| o.report)), None)
        }
        Command::Audit { common } => {
            let cfg = RunConfig::load(&common.config)?;
            let a = audit(&cfg)?;
            (a, common.report.or(cfg.output.and_then(|o| o.report)), None)
        }
        Command::Echo { config } => (echo(&RunConfig::load(&config)?)?, None, None),
    };
    if let (Some(path), Some(text)) = (&csv_path, &artifacts.trajectory) {
        write_file(path, text)?;
    }
    match report_path {
        Some(path) => write_file(&path, &artifacts.report)?,
        None => print!("{}", artifacts.report),
    }
    Ok(artifacts.status)
}

/// Entry point shared by the binary and the tests.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            let mut line = String::new();
            let _ = write!(line, "kolmo: {e}");
            eprintln!("{}", line.replace('\n', " "));
            e.exit_code()
        }
    }
}
