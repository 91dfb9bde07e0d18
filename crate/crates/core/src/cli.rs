//! Config-driven commands behind the `phient` binary.
//!
//! A run is described by a TOML file with `[model]`, `[solver]`, `[verify]`
//! and `[output]` sections. Every command returns a [`CommandOutput`] whose
//! `code` is the process exit status: 0 success, 1 config error, 2 invalid
//! model, 3 failed checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::expr::Expression;
use crate::model::{discretize_model, Drift, Field, Grid, Model, ModelError};
use crate::operators::{cd_rho_constant_d, cd_rho_sampled, default_test_fields, OperatorError};
use crate::pde::{assemble, solve_fokker_planck, PdeError, Scheme, SolveOptions, Trajectory};
use crate::phi::{make_phi, PhiKind};
use crate::verify::{
    decay_report, run_suite, CheckId, CheckResult, DecayMode, Lab, SuiteConfig, VerifyError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_MODEL: i32 = 2;
pub const EXIT_CHECKS: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => EXIT_CONFIG,
            CliError::Model(_) => EXIT_MODEL,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<OperatorError> for CliError {
    fn from(e: OperatorError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<PdeError> for CliError {
    fn from(e: PdeError) -> Self {
        match e {
            PdeError::InvalidTime(_) | PdeError::Incommensurate { .. } | PdeError::InvalidInitialDensity => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Model(m) => m.into(),
            VerifyError::Operator(o) => o.into(),
            VerifyError::Pde(p) => p.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub label: Option<String>,
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
    /// Upper triangle of `D`, row-major.
    pub diffusion: Vec<String>,
    #[serde(default)]
    pub drift: Option<Vec<String>>,
    #[serde(default)]
    pub potential: Option<String>,
    #[serde(default)]
    pub perturbation: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default)]
    pub snapshots: Vec<f64>,
    /// Initial density expression; the lab default is used when absent.
    #[serde(default)]
    pub initial: Option<String>,
}

fn default_dt() -> f64 {
    1e-3
}

fn default_t_end() -> f64 {
    1.0
}

fn default_scheme() -> String {
    Scheme::ImplicitEuler.to_string()
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            dt: default_dt(),
            t_end: default_t_end(),
            scheme: default_scheme(),
            snapshots: Vec::new(),
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default)]
    pub checks: Option<Vec<String>>,
    #[serde(default)]
    pub phis: Option<Vec<String>>,
    #[serde(default)]
    pub ps: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub battery_size: Option<usize>,
    #[serde(default)]
    pub local_times: Option<Vec<f64>>,
    #[serde(default)]
    pub production_time: Option<f64>,
    #[serde(default)]
    pub decay_t_end: Option<f64>,
    #[serde(default)]
    pub sample_interval: Option<f64>,
    /// Φ-entropy constant for decay bounds.
    #[serde(default)]
    pub c: Option<f64>,
    /// Overrides the computed curvature constant.
    #[serde(default)]
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    /// Subset of `json`, `csv`.
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<String> {
    vec!["json".into(), "csv".into()]
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: default_directory(),
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub t_end: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(out) = &o.out {
            self.output.directory = out.clone();
        }
        if let Some(seed) = o.seed {
            self.verify.seed = Some(seed);
        }
        if let Some(dt) = o.dt {
            self.solver.dt = dt;
        }
        if let Some(t) = o.t_end {
            self.solver.t_end = t;
        }
        self.validate()
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        let m = &self.model;
        for (name, len) in [("model.lower", m.lower.len()), ("model.upper", m.upper.len()), ("model.cells", m.cells.len())] {
            if len != m.dim {
                return bad(name, format!("expected {} entries, got {len}", m.dim));
            }
        }
        match (&m.drift, &m.potential) {
            (Some(_), Some(_)) => return bad("model", "give either `drift` or `potential`, not both".into()),
            (None, None) => return bad("model", "one of `drift` or `potential` is required".into()),
            (Some(_), None) if m.perturbation.is_some() => {
                return bad("model.perturbation", "only allowed together with `potential`".into())
            }
            _ => {}
        }
        if !(self.solver.dt > 0.0 && self.solver.dt.is_finite()) {
            return bad("solver.dt", format!("must be positive, got {}", self.solver.dt));
        }
        if !(self.solver.t_end >= 0.0 && self.solver.t_end.is_finite()) {
            return bad("solver.t_end", format!("must be nonnegative, got {}", self.solver.t_end));
        }
        self.model()?;
        self.scheme()?;
        self.suite()?;
        for f in &self.output.formats {
            if f != "json" && f != "csv" {
                return bad("output.formats", format!("unknown format `{f}`; expected json or csv"));
            }
        }
        Ok(())
    }

    pub fn scheme(&self) -> Result<Scheme, CliError> {
        self.solver
            .scheme
            .parse()
            .map_err(|e: String| CliError::Config(format!("solver.scheme: {e}")))
    }

    /// Builds the model; expression syntax errors are config errors.
    pub fn model(&self) -> Result<(Model, Grid), CliError> {
        let m = &self.model;
        let parse = |field: &str, s: &str| {
            Expression::parse(s, m.dim).map_err(|e| CliError::Config(format!("{field}: {e}")))
        };
        let parse_all = |field: &str, v: &[String]| -> Result<Vec<Expression>, CliError> {
            v.iter().map(|s| parse(field, s)).collect()
        };
        let d = parse_all("model.diffusion", &m.diffusion)?;
        let drift = match (&m.drift, &m.potential) {
            (Some(a), _) => Drift::Explicit(parse_all("model.drift", a)?),
            (None, Some(v)) => Drift::Gradient {
                potential: parse("model.potential", v)?,
                perturbation: m
                    .perturbation
                    .as_ref()
                    .map(|f| parse_all("model.perturbation", f))
                    .transpose()?,
            },
            (None, None) => unreachable!("validated"),
        };
        let model = Model::new(m.dim, d, drift).map_err(|e| CliError::Config(format!("model: {e}")))?;
        let grid = Grid::new(&m.lower, &m.upper, &m.cells).map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok((model, grid))
    }

    pub fn suite(&self) -> Result<SuiteConfig, CliError> {
        let v = &self.verify;
        let mut s = SuiteConfig::default();
        if let Some(checks) = &v.checks {
            s.checks = checks
                .iter()
                .map(|c| c.parse::<CheckId>().map_err(|e| CliError::Config(format!("verify.checks: {e}"))))
                .collect::<Result<_, _>>()?;
        }
        if let Some(phis) = &v.phis {
            s.phis = phis
                .iter()
                .map(|p| {
                    let kind: PhiKind = p.parse().map_err(|e| CliError::Config(format!("verify.phis: {e}")))?;
                    make_phi(kind).map_err(|e| CliError::Config(format!("verify.phis: {e}")))?;
                    Ok(kind)
                })
                .collect::<Result<_, CliError>>()?;
        }
        if let Some(ps) = &v.ps {
            if let Some(p) = ps.iter().find(|&&p| !(p > 1.0 && p <= 2.0)) {
                return Err(CliError::Config(format!("verify.ps: p = {p} outside ]1, 2]")));
            }
            s.ps = ps.clone();
        }
        if let Some(seed) = v.seed {
            s.seed = seed;
        }
        if let Some(n) = v.battery_size {
            if n == 0 {
                return Err(CliError::Config("verify.battery_size: must be positive".into()));
            }
            s.battery_size = n;
        }
        if let Some(t) = &v.local_times {
            if t.iter().any(|&x| !(x > 0.0)) || t.windows(2).any(|w| w[1] < w[0]) {
                return Err(CliError::Config("verify.local_times: must be positive and ascending".into()));
            }
            s.local_times = t.clone();
        }
        for (name, val) in [
            ("verify.production_time", v.production_time),
            ("verify.decay_t_end", v.decay_t_end),
            ("verify.sample_interval", v.sample_interval),
            ("verify.c", v.c),
        ] {
            if let Some(x) = val {
                if !(x > 0.0 && x.is_finite()) {
                    return Err(CliError::Config(format!("{name}: must be positive, got {x}")));
                }
            }
        }
        if let Some(t) = v.production_time {
            s.production_time = t;
        }
        if let Some(t) = v.decay_t_end {
            s.decay_t_end = t;
        }
        if let Some(t) = v.sample_interval {
            s.sample_interval = t;
        }
        s.c = v.c;
        Ok(s)
    }

    fn label(&self) -> String {
        self.model.label.clone().unwrap_or_else(|| "model".into())
    }

    fn wants(&self, format: &str) -> bool {
        self.output.formats.iter().any(|f| f == format)
    }

    fn lab(&self) -> Result<Lab, CliError> {
        let (model, grid) = self.model()?;
        let mut lab = Lab::new(self.label(), &model, &grid)?.with_dt(self.solver.dt);
        if let Some(rho) = self.verify.rho {
            lab = lab.with_rho(rho);
        }
        Ok(lab)
    }

    fn initial_density(&self, lab: &Lab) -> Result<Field, CliError> {
        match &self.solver.initial {
            Some(s) => self.parse_initial(s, lab.grid()),
            None => Ok(lab.default_initial_density()),
        }
    }

    fn parse_initial(&self, s: &str, grid: &Grid) -> Result<Field, CliError> {
        let e = Expression::parse(s, self.model.dim)
            .map_err(|e| CliError::Config(format!("solver.initial: {e}")))?;
        Ok(Field::from_expression(*grid, &e)?)
    }
}

/// Result of a command: exit status, the JSON summary for standard output,
/// diagnostics for standard error and the files written.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub code: i32,
    pub stdout: Value,
    pub stderr: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl CommandOutput {
    fn ok(stdout: Value) -> Self {
        CommandOutput {
            code: EXIT_OK,
            stdout,
            stderr: Vec::new(),
            files: Vec::new(),
        }
    }
}

fn write_file(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    files.push(path);
    Ok(())
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Curvature constant of the model: exact for constant `D`, sampled otherwise.
pub fn cmd_check_cd(cfg: &RunConfig) -> Result<CommandOutput, CliError> {
    let (model, grid) = cfg.model()?;
    let dm = discretize_model(&model, &grid)?;
    let est = if dm.constant_diffusion {
        cd_rho_constant_d(&model, &grid)?
    } else {
        cd_rho_sampled(&dm, &default_test_fields(&grid))?
    };
    Ok(CommandOutput::ok(json!({
        "rho": est.rho,
        "method": est.method,
        "argmin": est.argmin,
        "upper_bound": est.upper_bound,
        "test_functions": est.test_functions,
    })))
}

/// Snapshot CSV: node coordinates then density.
pub fn snapshot_csv(u: &Field) -> String {
    let g = u.grid();
    let mut s = String::from(if g.dim == 1 { "x1,density\n" } else { "x1,x2,density\n" });
    for i in 0..u.len() {
        let x = g.node(i);
        for xk in x.iter().take(g.dim) {
            s.push_str(&format!("{xk:.17e},"));
        }
        s.push_str(&format!("{:.17e}\n", u[i]));
    }
    s
}

fn trajectory_summary(traj: &Trajectory) -> Value {
    json!({
        "scheme": traj.scheme,
        "dt": traj.dt,
        "steps": traj.step_times.len() - 1,
        "snapshot_times": traj.times,
        "max_relative_mass_drift": traj.max_relative_mass_drift(),
        "min_value": traj.min_value(),
    })
}

/// Solves the forward equation and writes snapshot CSVs.
pub fn cmd_solve(cfg: &RunConfig) -> Result<CommandOutput, CliError> {
    let (model, grid) = cfg.model()?;
    let dm = discretize_model(&model, &grid)?;
    let prop = assemble(&dm)?;
    let u0 = match &cfg.solver.initial {
        Some(s) => cfg.parse_initial(s, &grid)?,
        None => cfg.lab()?.default_initial_density(),
    };
    let mut opts = SolveOptions::new(cfg.solver.t_end, cfg.solver.dt, cfg.scheme()?);
    opts.snapshots = cfg.solver.snapshots.clone();
    let traj = solve_fokker_planck(&prop, &u0, &opts)?;
    let mut out = CommandOutput::ok(trajectory_summary(&traj));
    if cfg.wants("csv") {
        for (t, u) in traj.times.iter().zip(&traj.snapshots) {
            let path = cfg.output.directory.join(format!("snapshot_t{t:.6}.csv"));
            write_file(path, &snapshot_csv(u), &mut out.files)?;
        }
    }
    if cfg.wants("json") {
        let text = serde_json::to_string_pretty(&out.stdout).expect("serializable");
        write_file(cfg.output.directory.join("solve.json"), &text, &mut out.files)?;
    }
    Ok(out)
}

/// Runs the configured verification suite and writes `report.json` and one
/// decay CSV per Φ.
pub fn cmd_verify(cfg: &RunConfig) -> Result<CommandOutput, CliError> {
    let lab = cfg.lab()?;
    let suite = cfg.suite()?;
    let (results, skipped) = run_suite(&lab, &suite)?;
    let u0 = cfg.initial_density(&lab)?;
    let mut decays = Vec::new();
    let mut files = Vec::new();
    if !suite.checks.is_empty() {
        for &kind in suite.phis.iter().filter(|k| **k != PhiKind::GaussIsoperimetry) {
            let phi = make_phi(kind).map_err(|e| CliError::Config(e.to_string()))?;
            let rep = decay_report(
                &lab,
                &phi,
                DecayMode::FokkerPlanck,
                &u0,
                suite.decay_t_end,
                suite.sample_interval,
                suite.c,
            )?;
            if cfg.wants("csv") {
                let path = cfg.output.directory.join(format!("decay_{}.csv", phi.label));
                write_file(path, &rep.to_csv(), &mut files)?;
            }
            decays.push(rep);
        }
    }
    let failures: Vec<&CheckResult> = results.iter().filter(|r| !r.pass).collect();
    let report = json!({
        "timestamp": timestamp(),
        "model": lab.label,
        "grid": lab.grid(),
        "rho": lab.rho,
        "rho_source": lab.rho_source,
        "dt": lab.dt,
        "suite": suite,
        "battery_note": "test functions are a fixed seeded battery (affine, quadratic, smoothed step, bump profiles); they sample the inequalities, they do not exhaust them",
        "summary": { "total": results.len(), "failed": failures.len(), "skipped": skipped },
        "results": results,
        "decay": decays,
    });
    if cfg.wants("json") {
        let text = serde_json::to_string_pretty(&report).expect("serializable");
        write_file(cfg.output.directory.join("report.json"), &text, &mut files)?;
    }
    let stderr: Vec<String> = failures
        .iter()
        .map(|r| {
            format!(
                "FAILED {} function={} p={} t={} margin={:e} (tolerance {:e})",
                r.id,
                r.context.function.as_deref().unwrap_or("-"),
                r.context.p.map_or("-".into(), |p| p.to_string()),
                r.context.t.map_or("-".into(), |t| t.to_string()),
                r.margin,
                r.tolerance
            )
        })
        .collect();
    Ok(CommandOutput {
        code: if failures.is_empty() { EXIT_OK } else { EXIT_CHECKS },
        stdout: json!({ "total": results.len(), "failed": failures.len(), "skipped": skipped.len() }),
        stderr,
        files,
    })
}

/// Summarizes an existing `report.json` per check id.
pub fn cmd_report(path: &Path) -> Result<CommandOutput, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let results = v["results"]
        .as_array()
        .ok_or_else(|| CliError::Config(format!("{}: no `results` array", path.display())))?;
    let mut rows: Vec<(String, usize, usize, f64)> = Vec::new();
    for r in results {
        let id = r["id"].as_str().unwrap_or("?").to_string();
        let pass = r["pass"].as_bool().unwrap_or(false);
        let margin = r["margin"].as_f64().unwrap_or(f64::NAN);
        match rows.iter_mut().find(|row| row.0 == id) {
            Some(row) => {
                row.1 += 1;
                row.2 += usize::from(!pass);
                row.3 = row.3.min(margin);
            }
            None => rows.push((id, 1, usize::from(!pass), margin)),
        }
    }
    let failed: usize = rows.iter().map(|r| r.2).sum();
    let table: Vec<Value> = rows
        .iter()
        .map(|(id, n, f, m)| json!({ "check": id, "count": n, "failed": f, "worst_margin": m }))
        .collect();
    Ok(CommandOutput {
        code: if failed == 0 { EXIT_OK } else { EXIT_CHECKS },
        stdout: json!({ "checks": table, "failed": failed }),
        stderr: rows
            .iter()
            .filter(|r| r.2 > 0)
            .map(|(id, n, f, m)| format!("FAILED {id}: {f} of {n}, worst margin {m:e}"))
            .collect(),
        files: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CheckCd,
    Solve,
    Verify,
    Report,
}

/// Loads the config, applies overrides and runs `command`. Errors are turned
/// into their exit codes with the message on standard error.
pub fn run(command: Command, config: Option<&Path>, overrides: &Overrides) -> CommandOutput {
    let result = (|| {
        if command == Command::Report {
            let dir = match (&overrides.out, config) {
                (Some(d), _) => d.clone(),
                (None, Some(c)) => RunConfig::load(c)?.output.directory,
                (None, None) => default_directory(),
            };
            return cmd_report(&dir.join("report.json"));
        }
        let path = config.ok_or_else(|| CliError::Config("--config is required".into()))?;
        let mut cfg = RunConfig::load(path)?;
        cfg.apply(overrides)?;
        match command {
            Command::CheckCd => cmd_check_cd(&cfg),
            Command::Solve => cmd_solve(&cfg),
            Command::Verify => cmd_verify(&cfg),
            Command::Report => unreachable!(),
        }
    })();
    result.unwrap_or_else(|e| CommandOutput {
        code: e.exit_code(),
        stdout: Value::Null,
        stderr: vec![e.to_string()],
        files: Vec::new(),
    })
}
