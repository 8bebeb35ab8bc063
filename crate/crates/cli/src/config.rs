//! Run-configuration parsing and validation.
//!
//! Configs are TOML files read in strict mode: every key must be known to
//! the invoked command, and `validate` collects every violation instead of
//! stopping at the first. A config that loads cleanly is turned into a
//! ready-to-run plan holding built models and decoded states.

use std::fmt;
use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::Deserialize;

use hybridflow::dynamics::{
    ModelSpec, Perturbation, PerturbationTarget, SolverOptions,
};
use hybridflow::ensemble::{
    ClassicalProposal, DensityComponent, DensitySpec, EnsembleObservable, SamplerSpec, WeightKind,
};
use hybridflow::models::{
    build_bilinear, build_localized_bilinear, BilinearParams, LocalizedParams, QuadratureSpec,
};
use hybridflow::phase_space::{encode_state, ClassicalPoint, QuantumPhasePoint};
use hybridflow::HybridPoint;

// ---------------------------------------------------------------------------
// Errors and command identity.

/// Failure of a CLI run, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 1: the configuration or invocation is unusable. Carries every
    /// diagnostic found, not just the first.
    Validation(Vec<String>),
    /// Exit 2: integration or artifact writing failed.
    Numerical(String),
    /// Exit 3: the run completed and its property check failed.
    Property(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Property(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(diags) => {
                writeln!(f, "configuration invalid:")?;
                for d in diags {
                    writeln!(f, "  - {d}")?;
                }
                Ok(())
            }
            CliError::Numerical(msg) => writeln!(f, "numerical failure: {msg}"),
            CliError::Property(msg) => writeln!(f, "property check failed: {msg}"),
        }
    }
}

pub fn numerical(e: impl fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    Ensemble,
    BracketCheck,
    BenchmarkPeresTerno,
    Tangibility,
    ClosureCheck,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::Simulate => "simulate",
            CommandKind::Ensemble => "ensemble",
            CommandKind::BracketCheck => "bracket-check",
            CommandKind::BenchmarkPeresTerno => "benchmark-peres-terno",
            CommandKind::Tangibility => "tangibility",
            CommandKind::ClosureCheck => "closure-check",
        }
    }
}

// ---------------------------------------------------------------------------
// Strict key schema. The walker reports every unknown key with its dotted
// path; value types are checked afterwards by the section deserializers.

#[derive(Clone, Copy)]
enum Schema {
    Leaf,
    Table(&'static [(&'static str, Schema)]),
    ArrayOfTables(&'static [(&'static str, Schema)]),
}

const QUADRATURE: Schema = Schema::Table(&[
    ("nodes", Schema::Leaf),
    ("range_multiplier", Schema::Leaf),
]);

const MODEL: Schema = Schema::Table(&[
    ("kind", Schema::Leaf),
    ("mass", Schema::Leaf),
    ("frequency", Schema::Leaf),
    ("coupling", Schema::Leaf),
    ("free_mass", Schema::Leaf),
    ("quantum_mass", Schema::Leaf),
    ("quantum_frequency", Schema::Leaf),
    ("levels", Schema::Leaf),
    ("quadrature", QUADRATURE),
]);

const INITIAL: Schema = Schema::Table(&[
    ("x", Schema::Leaf),
    ("p", Schema::Leaf),
    ("amplitude_re", Schema::Leaf),
    ("amplitude_im", Schema::Leaf),
    ("quantum_x", Schema::Leaf),
    ("quantum_p", Schema::Leaf),
]);

const NUMERICS: Schema = Schema::Table(&[
    ("dt", Schema::Leaf),
    ("t_total", Schema::Leaf),
    ("record_every", Schema::Leaf),
    ("solver_tolerance", Schema::Leaf),
    ("solver_max_iterations", Schema::Leaf),
    ("renormalize", Schema::Leaf),
]);

const DENSITY: Schema = Schema::ArrayOfTables(&[
    ("mass", Schema::Leaf),
    ("center_x", Schema::Leaf),
    ("center_p", Schema::Leaf),
    ("sigma", Schema::Leaf),
    ("state_re", Schema::Leaf),
    ("state_im", Schema::Leaf),
]);

const SAMPLER: Schema = Schema::Table(&[
    ("samples", Schema::Leaf),
    ("seed", Schema::Leaf),
    ("proposal", Schema::Leaf),
    ("proposal_sigma", Schema::Leaf),
]);

const OBSERVABLES: Schema = Schema::Table(&[
    ("positions", Schema::Leaf),
    ("momenta", Schema::Leaf),
    ("occupations", Schema::Leaf),
    ("total_energy", Schema::Leaf),
]);

const PERTURBATION: Schema = Schema::Table(&[
    ("t0", Schema::Leaf),
    ("index", Schema::Leaf),
    ("target", Schema::Leaf),
    ("profile", Schema::Leaf),
    ("amplitude", Schema::Leaf),
    ("duration", Schema::Leaf),
]);

const CHECK_BRACKET: Schema = Schema::Table(&[
    ("pairs", Schema::Leaf),
    ("dim", Schema::Leaf),
    ("seed", Schema::Leaf),
]);

const CHECK_CLOSURE: Schema = Schema::Table(&[
    ("pairs", Schema::Leaf),
    ("points", Schema::Leaf),
    ("cl_dim", Schema::Leaf),
    ("levels", Schema::Leaf),
    ("seed", Schema::Leaf),
]);

const OUT_SIMULATE: Schema = Schema::Table(&[
    ("trajectory_csv", Schema::Leaf),
    ("summary_json", Schema::Leaf),
]);

const OUT_ENSEMBLE: Schema = Schema::Table(&[
    ("series_csv", Schema::Leaf),
    ("summary_json", Schema::Leaf),
    ("samples_csv_prefix", Schema::Leaf),
]);

const OUT_SUMMARY_ONLY: Schema = Schema::Table(&[("summary_json", Schema::Leaf)]);

const OUT_PERES_TERNO: Schema = Schema::Table(&[
    ("summary_json", Schema::Leaf),
    ("trajectory_csv", Schema::Leaf),
]);

const OUT_TANGIBILITY: Schema = Schema::Table(&[
    ("summary_json", Schema::Leaf),
    ("series_csv", Schema::Leaf),
]);

fn top_schema(cmd: CommandKind) -> Schema {
    match cmd {
        CommandKind::Simulate => Schema::Table(&[
            ("command", Schema::Leaf),
            ("model", MODEL),
            ("initial", INITIAL),
            ("numerics", NUMERICS),
            ("output", OUT_SIMULATE),
        ]),
        CommandKind::Ensemble => Schema::Table(&[
            ("command", Schema::Leaf),
            ("model", MODEL),
            ("density", DENSITY),
            ("sampler", SAMPLER),
            ("numerics", NUMERICS),
            ("observables", OBSERVABLES),
            ("output", OUT_ENSEMBLE),
        ]),
        CommandKind::BracketCheck => Schema::Table(&[
            ("command", Schema::Leaf),
            ("check", CHECK_BRACKET),
            ("output", OUT_SUMMARY_ONLY),
        ]),
        CommandKind::BenchmarkPeresTerno => Schema::Table(&[
            ("command", Schema::Leaf),
            ("model", MODEL),
            ("initial", INITIAL),
            ("numerics", NUMERICS),
            ("output", OUT_PERES_TERNO),
        ]),
        CommandKind::Tangibility => Schema::Table(&[
            ("command", Schema::Leaf),
            ("model", MODEL),
            ("initial", INITIAL),
            ("numerics", NUMERICS),
            ("perturbation", PERTURBATION),
            ("output", OUT_TANGIBILITY),
        ]),
        CommandKind::ClosureCheck => Schema::Table(&[
            ("command", Schema::Leaf),
            ("check", CHECK_CLOSURE),
            ("output", OUT_SUMMARY_ONLY),
        ]),
    }
}

fn join_path(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn walk_schema(value: &toml::Value, schema: &Schema, path: &str, diags: &mut Vec<String>) {
    match schema {
        Schema::Leaf => {}
        Schema::Table(allowed) => {
            if let Some(table) = value.as_table() {
                for (key, sub) in table {
                    match allowed.iter().find(|(k, _)| k == key) {
                        Some((_, s)) => walk_schema(sub, s, &join_path(path, key), diags),
                        None => diags.push(format!("unknown key `{}`", join_path(path, key))),
                    }
                }
            }
        }
        Schema::ArrayOfTables(allowed) => {
            if let Some(items) = value.as_array() {
                for (i, item) in items.iter().enumerate() {
                    walk_schema(item, &Schema::Table(allowed), &format!("{path}[{i}]"), diags);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Raw sections.

#[derive(Debug, Deserialize)]
struct QuadratureSection {
    #[serde(default)]
    nodes: usize,
    #[serde(default = "one")]
    range_multiplier: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
struct ModelSection {
    kind: String,
    mass: Vec<f64>,
    frequency: Vec<f64>,
    coupling: Vec<f64>,
    #[serde(default)]
    free_mass: Vec<f64>,
    quantum_mass: f64,
    quantum_frequency: f64,
    levels: usize,
    quadrature: Option<QuadratureSection>,
}

#[derive(Debug, Deserialize)]
struct InitialSection {
    x: Vec<f64>,
    p: Vec<f64>,
    amplitude_re: Option<Vec<f64>>,
    amplitude_im: Option<Vec<f64>>,
    quantum_x: Option<Vec<f64>>,
    quantum_p: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct NumericsSection {
    dt: f64,
    t_total: f64,
    record_every: Option<usize>,
    solver_tolerance: Option<f64>,
    solver_max_iterations: Option<usize>,
    renormalize: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
struct OutputSection {
    trajectory_csv: Option<String>,
    series_csv: Option<String>,
    summary_json: Option<String>,
    samples_csv_prefix: Option<String>,
}

#[derive(Debug, Deserialize)]
struct DensityEntry {
    mass: f64,
    center_x: Vec<f64>,
    center_p: Vec<f64>,
    sigma: f64,
    state_re: Vec<f64>,
    state_im: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct SamplerSection {
    samples: usize,
    seed: Option<u64>,
    proposal: Option<String>,
    proposal_sigma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
struct ObservablesSection {
    positions: Option<Vec<usize>>,
    momenta: Option<Vec<usize>>,
    occupations: Option<Vec<usize>>,
    total_energy: Option<bool>,
}

#[derive(Debug, Deserialize)]
struct PerturbationSection {
    t0: f64,
    index: usize,
    target: String,
    profile: String,
    amplitude: f64,
    duration: f64,
}

#[derive(Debug, Default, Deserialize)]
struct CheckSection {
    pairs: Option<usize>,
    dim: Option<usize>,
    points: Option<usize>,
    cl_dim: Option<usize>,
    levels: Option<usize>,
    seed: Option<u64>,
}

// ---------------------------------------------------------------------------
// Ready-to-run plans.

#[derive(Debug, Clone)]
pub struct NumericsPlan {
    pub dt: f64,
    pub t_total: f64,
    pub record_every: usize,
    pub renormalize: bool,
    pub solver: SolverOptions,
}

pub struct SimulatePlan {
    pub model: ModelSpec,
    pub model_kind: String,
    pub initial: HybridPoint,
    pub numerics: NumericsPlan,
    pub trajectory_csv: String,
    pub summary_json: String,
}

pub struct EnsemblePlan {
    pub model: ModelSpec,
    pub density: DensitySpec,
    pub sampler: SamplerSpec,
    pub numerics: NumericsPlan,
    pub observables: Vec<EnsembleObservable>,
    pub series_csv: String,
    pub summary_json: String,
    pub samples_csv_prefix: Option<String>,
}

pub struct BracketCheckPlan {
    pub pairs: usize,
    pub dim: usize,
    pub seed: u64,
    pub summary_json: String,
}

pub struct PeresTernoPlan {
    pub params: BilinearParams,
    pub model: ModelSpec,
    pub initial: HybridPoint,
    pub numerics: NumericsPlan,
    pub summary_json: String,
    pub trajectory_csv: Option<String>,
}

pub struct TangibilityPlan {
    pub model: ModelSpec,
    pub initial: HybridPoint,
    pub perturbation: Perturbation,
    pub numerics: NumericsPlan,
    pub summary_json: String,
    pub series_csv: Option<String>,
}

pub struct ClosureCheckPlan {
    pub pairs: usize,
    pub points: usize,
    pub cl_dim: usize,
    pub levels: usize,
    pub seed: u64,
    pub summary_json: String,
}

pub enum Plan {
    Simulate(SimulatePlan),
    Ensemble(EnsemblePlan),
    BracketCheck(BracketCheckPlan),
    PeresTerno(PeresTernoPlan),
    Tangibility(TangibilityPlan),
    ClosureCheck(ClosureCheckPlan),
}

// ---------------------------------------------------------------------------
// Loading.

struct Loader {
    diags: Vec<String>,
}

impl Loader {
    fn push(&mut self, diag: impl Into<String>) {
        self.diags.push(diag.into());
    }

    /// Deserializes one section, turning type errors into diagnostics.
    fn section<T: serde::de::DeserializeOwned>(
        &mut self,
        root: &toml::value::Table,
        name: &str,
        required: bool,
    ) -> Option<T> {
        match root.get(name) {
            Some(v) => match v.clone().try_into::<T>() {
                Ok(t) => Some(t),
                Err(e) => {
                    self.push(format!("{name}: {}", compact_toml_error(&e)));
                    None
                }
            },
            None => {
                if required {
                    self.push(format!("missing [{name}] section"));
                }
                None
            }
        }
    }
}

/// toml's errors are multi-line with a caret rendering; the key and message
/// alone read better in a diagnostics list.
fn compact_toml_error(e: &toml::de::Error) -> String {
    e.message().to_string()
}

pub fn load(cmd: CommandKind, path: &Path, seed_override: Option<u64>) -> Result<Plan, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Validation(vec![format!("cannot read config {}: {e}", path.display())])
    })?;
    let value: toml::Value = toml::from_str(&text).map_err(|e| {
        CliError::Validation(vec![format!("config parse error: {}", compact_toml_error(&e))])
    })?;

    let mut loader = Loader { diags: Vec::new() };
    walk_schema(&value, &top_schema(cmd), "", &mut loader.diags);

    let root = value.as_table().cloned().unwrap_or_default();
    if let Some(declared) = root.get("command") {
        match declared.as_str() {
            Some(name) if name == cmd.name() => {}
            Some(name) => loader.push(format!(
                "config declares command = \"{name}\" but {} was invoked",
                cmd.name()
            )),
            None => loader.push("command: expected a string".to_string()),
        }
    }

    let plan = match cmd {
        CommandKind::Simulate => load_simulate(&mut loader, &root),
        CommandKind::Ensemble => load_ensemble(&mut loader, &root, seed_override),
        CommandKind::BracketCheck => load_bracket_check(&mut loader, &root, seed_override),
        CommandKind::BenchmarkPeresTerno => load_peres_terno(&mut loader, &root),
        CommandKind::Tangibility => load_tangibility(&mut loader, &root),
        CommandKind::ClosureCheck => load_closure_check(&mut loader, &root, seed_override),
    };

    match plan {
        Some(p) if loader.diags.is_empty() => Ok(p),
        _ => {
            if loader.diags.is_empty() {
                loader.push("configuration rejected");
            }
            Err(CliError::Validation(loader.diags))
        }
    }
}

// ---------------------------------------------------------------------------
// Shared building blocks.

fn check_positive(loader: &mut Loader, key: &str, v: f64) -> bool {
    if v.is_finite() && v > 0.0 {
        true
    } else {
        loader.push(format!("{key}: must be positive and finite, got {v}"));
        false
    }
}

fn build_model(loader: &mut Loader, section: &ModelSection) -> Option<(ModelSpec, String)> {
    let quadrature = section.quadrature.as_ref().map(|q| QuadratureSpec {
        nodes: q.nodes,
        range_multiplier: q.range_multiplier,
    });
    match section.kind.as_str() {
        "bilinear" => {
            if quadrature.is_some() {
                loader.push("model.quadrature: applies only to localized models");
            }
            let params = bilinear_params(section);
            match build_bilinear(&params) {
                Ok(m) => Some((m, "bilinear".to_string())),
                Err(e) => {
                    loader.push(format!("model: {e}"));
                    None
                }
            }
        }
        "localized" => {
            let params = LocalizedParams {
                mass: section.mass.clone(),
                frequency: section.frequency.clone(),
                coupling: section.coupling.clone(),
                free_mass: section.free_mass.clone(),
                quantum_mass: section.quantum_mass,
                quantum_frequency: section.quantum_frequency,
                levels: section.levels,
                quadrature: quadrature.unwrap_or_default(),
            };
            match build_localized_bilinear(&params) {
                Ok(m) => Some((m, "localized".to_string())),
                Err(e) => {
                    loader.push(format!("model: {e}"));
                    None
                }
            }
        }
        other => {
            loader.push(format!(
                "model.kind: expected \"bilinear\" or \"localized\", got \"{other}\""
            ));
            None
        }
    }
}

fn bilinear_params(section: &ModelSection) -> BilinearParams {
    BilinearParams {
        mass: section.mass.clone(),
        frequency: section.frequency.clone(),
        coupling: section.coupling.clone(),
        free_mass: section.free_mass.clone(),
        quantum_mass: section.quantum_mass,
        quantum_frequency: section.quantum_frequency,
        levels: section.levels,
    }
}

/// Norm gate shared by every user-supplied state: the vector must sit within
/// `1e-6` of the unit sphere, and is then rescaled exactly onto it.
const STATE_NORM_TOL: f64 = 1e-6;

fn decode_amplitudes(
    loader: &mut Loader,
    key: &str,
    re: &[f64],
    im: Option<&Vec<f64>>,
    levels: usize,
) -> Option<QuantumPhasePoint> {
    if re.len() != levels {
        loader.push(format!(
            "{key}: expected {levels} entries to match model.levels, got {}",
            re.len()
        ));
        return None;
    }
    if let Some(im) = im {
        if im.len() != re.len() {
            loader.push(format!(
                "{key}: real and imaginary parts differ in length ({} vs {})",
                re.len(),
                im.len()
            ));
            return None;
        }
    }
    let amps: Vec<Complex64> = re
        .iter()
        .enumerate()
        .map(|(i, &r)| Complex64::new(r, im.map_or(0.0, |v| v[i])))
        .collect();
    let norm = amps.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > STATE_NORM_TOL {
        loader.push(format!(
            "{key}: state norm is {norm:.12}, must be 1 within {STATE_NORM_TOL:.0e}"
        ));
        return None;
    }
    let unit: Vec<Complex64> = amps.iter().map(|c| c / norm).collect();
    match encode_state(&unit) {
        Ok(q) => Some(q),
        Err(e) => {
            loader.push(format!("{key}: {e}"));
            None
        }
    }
}

fn decode_initial(
    loader: &mut Loader,
    section: &InitialSection,
    cl_dim: usize,
    levels: usize,
) -> Option<HybridPoint> {
    let mut ok = true;
    if section.x.len() != cl_dim {
        loader.push(format!(
            "initial.x: expected {cl_dim} entries to match the model, got {}",
            section.x.len()
        ));
        ok = false;
    }
    if section.p.len() != cl_dim {
        loader.push(format!(
            "initial.p: expected {cl_dim} entries to match the model, got {}",
            section.p.len()
        ));
        ok = false;
    }

    if section.amplitude_im.is_some() && section.amplitude_re.is_none() {
        loader.push("initial.amplitude_im: requires amplitude_re");
        ok = false;
    }
    let has_amp = section.amplitude_re.is_some();
    let has_coords = section.quantum_x.is_some() || section.quantum_p.is_some();
    let quantum = match (has_amp, has_coords) {
        (true, true) => {
            loader.push(
                "initial: give either amplitude_re/amplitude_im or quantum_x/quantum_p, not both",
            );
            None
        }
        (false, false) => {
            loader.push(
                "initial: a quantum state is required (amplitude_re or quantum_x/quantum_p)",
            );
            None
        }
        (true, false) => decode_amplitudes(
            loader,
            "initial.amplitude_re",
            section.amplitude_re.as_ref().unwrap(),
            section.amplitude_im.as_ref(),
            levels,
        ),
        (false, true) => {
            let (qx, qp) = match (&section.quantum_x, &section.quantum_p) {
                (Some(qx), Some(qp)) => (qx, qp),
                _ => {
                    loader.push("initial: quantum_x and quantum_p must be given together");
                    return None;
                }
            };
            if qx.len() != levels || qp.len() != levels {
                loader.push(format!(
                    "initial.quantum_x/quantum_p: expected {levels} entries to match model.levels, got {} and {}",
                    qx.len(),
                    qp.len()
                ));
                return None;
            }
            let q = match QuantumPhasePoint::raw(
                DVector::from_column_slice(qx),
                DVector::from_column_slice(qp),
            ) {
                Ok(q) => q,
                Err(e) => {
                    loader.push(format!("initial.quantum_x/quantum_p: {e}"));
                    return None;
                }
            };
            let norm = q.constraint().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > STATE_NORM_TOL {
                loader.push(format!(
                    "initial.quantum_x/quantum_p: state norm is {norm:.12}, must be 1 within {STATE_NORM_TOL:.0e}"
                ));
                return None;
            }
            match q.renormalized() {
                Ok(q) => Some(q),
                Err(e) => {
                    loader.push(format!("initial.quantum_x/quantum_p: {e}"));
                    None
                }
            }
        }
    };

    if !ok {
        return None;
    }
    let quantum = quantum?;
    let classical = match ClassicalPoint::from_slices(&section.x, &section.p) {
        Ok(c) => c,
        Err(e) => {
            loader.push(format!("initial: {e}"));
            return None;
        }
    };
    Some(HybridPoint::new(classical, quantum))
}

fn decode_numerics(loader: &mut Loader, section: &NumericsSection) -> Option<NumericsPlan> {
    let mut ok = check_positive(loader, "numerics.dt", section.dt);
    ok &= check_positive(loader, "numerics.t_total", section.t_total);
    if ok {
        let ratio = section.t_total / section.dt;
        if (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
            loader.push(format!(
                "numerics.t_total: {} is not an integer multiple of dt = {}",
                section.t_total, section.dt
            ));
            ok = false;
        }
    }
    let record_every = section.record_every.unwrap_or(1);
    if record_every == 0 {
        loader.push("numerics.record_every: must be at least 1");
        ok = false;
    }
    let mut solver = SolverOptions::default();
    if let Some(tol) = section.solver_tolerance {
        if check_positive(loader, "numerics.solver_tolerance", tol) {
            solver.tolerance = tol;
        } else {
            ok = false;
        }
    }
    if let Some(iters) = section.solver_max_iterations {
        if iters == 0 {
            loader.push("numerics.solver_max_iterations: must be at least 1");
            ok = false;
        } else {
            solver.max_iterations = iters;
        }
    }
    if !ok {
        return None;
    }
    Some(NumericsPlan {
        dt: section.dt,
        t_total: section.t_total,
        record_every,
        renormalize: section.renormalize.unwrap_or(false),
        solver,
    })
}

/// Output names are joined onto `--out`; path separators would silently
/// escape that directory.
fn check_filename(loader: &mut Loader, key: &str, name: &str) -> bool {
    if name.is_empty() || name.contains('/') || name.contains('\\') || name == "." || name == ".."
    {
        loader.push(format!("output.{key}: must be a bare file name, got {name:?}"));
        false
    } else {
        true
    }
}

fn resolved_name(
    loader: &mut Loader,
    key: &str,
    given: &Option<String>,
    default: &str,
) -> Option<String> {
    let name = given.clone().unwrap_or_else(|| default.to_string());
    check_filename(loader, key, &name).then_some(name)
}

fn resolve_seed(loader: &mut Loader, key: &str, config_seed: Option<u64>, over: Option<u64>) -> u64 {
    match over.or(config_seed) {
        Some(s) => s,
        None => {
            loader.push(format!("{key}: a seed is required (set it in the config or pass --seed)"));
            0
        }
    }
}

// ---------------------------------------------------------------------------
// Per-command loaders.

fn load_simulate(loader: &mut Loader, root: &toml::value::Table) -> Option<Plan> {
    let model_section: Option<ModelSection> = loader.section(root, "model", true);
    let initial_section: Option<InitialSection> = loader.section(root, "initial", true);
    let numerics_section: Option<NumericsSection> = loader.section(root, "numerics", true);
    let output: OutputSection = loader
        .section(root, "output", false)
        .unwrap_or_default();

    let trajectory_csv = resolved_name(loader, "trajectory_csv", &output.trajectory_csv, "trajectory.csv");
    let summary_json = resolved_name(loader, "summary_json", &output.summary_json, "summary.json");
    let numerics = numerics_section.as_ref().and_then(|s| decode_numerics(loader, s));

    let (model, model_kind) = build_model(loader, model_section.as_ref()?)?;
    let initial = decode_initial(
        loader,
        initial_section.as_ref()?,
        model.cl_dim(),
        model.qm_dim(),
    );

    Some(Plan::Simulate(SimulatePlan {
        model,
        model_kind,
        initial: initial?,
        numerics: numerics?,
        trajectory_csv: trajectory_csv?,
        summary_json: summary_json?,
    }))
}

fn decode_density(
    loader: &mut Loader,
    entries: &[DensityEntry],
    cl_dim: usize,
    levels: usize,
) -> Option<DensitySpec> {
    if entries.is_empty() {
        loader.push("density: at least one [[density]] component is required");
        return None;
    }
    let mut components = Vec::new();
    let mut ok = true;
    for (i, e) in entries.iter().enumerate() {
        if !check_positive(loader, &format!("density[{i}].mass"), e.mass) {
            ok = false;
        }
        if !check_positive(loader, &format!("density[{i}].sigma"), e.sigma) {
            ok = false;
        }
        if e.center_x.len() != cl_dim || e.center_p.len() != cl_dim {
            loader.push(format!(
                "density[{i}]: center_x/center_p must each have {cl_dim} entries, got {} and {}",
                e.center_x.len(),
                e.center_p.len()
            ));
            ok = false;
        }
        let state = decode_amplitudes(
            loader,
            &format!("density[{i}].state_re"),
            &e.state_re,
            e.state_im.as_ref(),
            levels,
        );
        match state {
            Some(state) if ok => components.push(DensityComponent {
                weight: WeightKind::Gaussian {
                    center_x: DVector::from_column_slice(&e.center_x),
                    center_p: DVector::from_column_slice(&e.center_p),
                    sigma: e.sigma,
                    mass: e.mass,
                },
                state,
            }),
            _ => ok = false,
        }
    }
    if !ok {
        return None;
    }
    let total: f64 = entries.iter().map(|e| e.mass).sum();
    if (total - 1.0).abs() > 1e-6 {
        loader.push(format!(
            "density: component masses sum to {total:.12}, must be 1 within 1e-6"
        ));
        return None;
    }
    match DensitySpec::new(components) {
        Ok(d) => Some(d),
        Err(e) => {
            loader.push(format!("density: {e}"));
            None
        }
    }
}

fn decode_observables(
    loader: &mut Loader,
    section: &ObservablesSection,
    cl_dim: usize,
    levels: usize,
) -> Vec<EnsembleObservable> {
    let mut out = Vec::new();
    for &k in section.positions.iter().flatten() {
        if k >= cl_dim {
            loader.push(format!(
                "observables.positions: index {k} out of range for {cl_dim} classical coordinates"
            ));
        } else {
            out.push(EnsembleObservable::ClassicalPosition(k));
        }
    }
    for &k in section.momenta.iter().flatten() {
        if k >= cl_dim {
            loader.push(format!(
                "observables.momenta: index {k} out of range for {cl_dim} classical coordinates"
            ));
        } else {
            out.push(EnsembleObservable::ClassicalMomentum(k));
        }
    }
    for &i in section.occupations.iter().flatten() {
        if i >= levels {
            loader.push(format!(
                "observables.occupations: level {i} out of range for {levels} levels"
            ));
        } else {
            out.push(EnsembleObservable::LevelOccupation(i));
        }
    }
    if section.total_energy.unwrap_or(false) {
        out.push(EnsembleObservable::TotalEnergy);
    }
    out
}

fn load_ensemble(
    loader: &mut Loader,
    root: &toml::value::Table,
    seed_override: Option<u64>,
) -> Option<Plan> {
    let model_section: Option<ModelSection> = loader.section(root, "model", true);
    let density_entries: Option<Vec<DensityEntry>> = loader.section(root, "density", true);
    let sampler_section: Option<SamplerSection> = loader.section(root, "sampler", true);
    let numerics_section: Option<NumericsSection> = loader.section(root, "numerics", true);
    let observables_section: ObservablesSection = loader
        .section(root, "observables", false)
        .unwrap_or_default();
    let output: OutputSection = loader
        .section(root, "output", false)
        .unwrap_or_default();

    let series_csv = resolved_name(loader, "series_csv", &output.series_csv, "series.csv");
    let summary_json = resolved_name(loader, "summary_json", &output.summary_json, "ensemble_summary.json");
    let samples_csv_prefix = match &output.samples_csv_prefix {
        Some(p) => {
            if check_filename(loader, "samples_csv_prefix", p) {
                Some(p.clone())
            } else {
                return None;
            }
        }
        None => None,
    };

    let numerics = numerics_section.as_ref().and_then(|s| decode_numerics(loader, s));

    let (model, _) = build_model(loader, model_section.as_ref()?)?;
    let density = decode_density(
        loader,
        density_entries.as_ref()?,
        model.cl_dim(),
        model.qm_dim(),
    );
    let observables =
        decode_observables(loader, &observables_section, model.cl_dim(), model.qm_dim());

    let sampler_section = sampler_section?;
    if sampler_section.samples == 0 {
        loader.push("sampler.samples: must be at least 1");
    }
    let seed = resolve_seed(loader, "sampler.seed", sampler_section.seed, seed_override);
    let proposal = match sampler_section.proposal.as_deref() {
        None | Some("component-natural") => {
            if sampler_section.proposal_sigma.is_some() {
                loader.push("sampler.proposal_sigma: applies only to the isotropic proposal");
            }
            ClassicalProposal::ComponentNatural
        }
        Some("isotropic") => match sampler_section.proposal_sigma {
            Some(sigma) if sigma.is_finite() && sigma > 0.0 => {
                ClassicalProposal::Isotropic { sigma }
            }
            Some(sigma) => {
                loader.push(format!(
                    "sampler.proposal_sigma: must be positive and finite, got {sigma}"
                ));
                ClassicalProposal::ComponentNatural
            }
            None => {
                loader.push("sampler.proposal_sigma: required for the isotropic proposal");
                ClassicalProposal::ComponentNatural
            }
        },
        Some(other) => {
            loader.push(format!(
                "sampler.proposal: expected \"component-natural\" or \"isotropic\", got \"{other}\""
            ));
            ClassicalProposal::ComponentNatural
        }
    };

    Some(Plan::Ensemble(EnsemblePlan {
        model,
        density: density?,
        sampler: SamplerSpec {
            samples: sampler_section.samples,
            seed,
            proposal,
        },
        numerics: numerics?,
        observables,
        series_csv: series_csv?,
        summary_json: summary_json?,
        samples_csv_prefix,
    }))
}

fn load_bracket_check(
    loader: &mut Loader,
    root: &toml::value::Table,
    seed_override: Option<u64>,
) -> Option<Plan> {
    let check: CheckSection = loader.section(root, "check", false).unwrap_or_default();
    let output: OutputSection = loader
        .section(root, "output", false)
        .unwrap_or_default();
    let summary_json = resolved_name(loader, "summary_json", &output.summary_json, "bracket_check.json");

    let pairs = check.pairs.unwrap_or(200);
    let dim = check.dim.unwrap_or(8);
    if pairs == 0 {
        loader.push("check.pairs: must be at least 1");
    }
    if dim < 2 {
        loader.push("check.dim: must be at least 2");
    }
    let seed = resolve_seed(loader, "check.seed", check.seed, seed_override);

    Some(Plan::BracketCheck(BracketCheckPlan {
        pairs,
        dim,
        seed,
        summary_json: summary_json?,
    }))
}

fn load_peres_terno(loader: &mut Loader, root: &toml::value::Table) -> Option<Plan> {
    let model_section: Option<ModelSection> = loader.section(root, "model", true);
    let initial_section: Option<InitialSection> = loader.section(root, "initial", true);
    let numerics_section: Option<NumericsSection> = loader.section(root, "numerics", true);
    let output: OutputSection = loader
        .section(root, "output", false)
        .unwrap_or_default();

    let summary_json = resolved_name(loader, "summary_json", &output.summary_json, "peres_terno.json");
    let trajectory_csv = match &output.trajectory_csv {
        Some(name) => {
            if check_filename(loader, "trajectory_csv", name) {
                Some(name.clone())
            } else {
                return None;
            }
        }
        None => None,
    };

    let numerics = numerics_section.as_ref().and_then(|s| decode_numerics(loader, s));

    let model_section = model_section?;
    if model_section.kind != "bilinear" {
        loader.push(format!(
            "model.kind: benchmark-peres-terno needs the bilinear model, got \"{}\"",
            model_section.kind
        ));
        return None;
    }
    let (model, _) = build_model(loader, &model_section)?;
    let params = bilinear_params(&model_section);
    let initial = decode_initial(
        loader,
        initial_section.as_ref()?,
        model.cl_dim(),
        model.qm_dim(),
    );

    Some(Plan::PeresTerno(PeresTernoPlan {
        params,
        model,
        initial: initial?,
        numerics: numerics?,
        summary_json: summary_json?,
        trajectory_csv,
    }))
}

fn decode_perturbation(
    loader: &mut Loader,
    section: &PerturbationSection,
    cl_dim: usize,
) -> Option<Perturbation> {
    let mut ok = true;
    if !section.t0.is_finite() || section.t0 < 0.0 {
        loader.push(format!(
            "perturbation.t0: must be nonnegative and finite, got {}",
            section.t0
        ));
        ok = false;
    }
    if section.index >= cl_dim {
        loader.push(format!(
            "perturbation.index: {} out of range for {cl_dim} classical coordinates",
            section.index
        ));
        ok = false;
    }
    if !section.amplitude.is_finite() {
        loader.push(format!(
            "perturbation.amplitude: must be finite, got {}",
            section.amplitude
        ));
        ok = false;
    }
    ok &= check_positive(loader, "perturbation.duration", section.duration);
    let target = match section.target.as_str() {
        "position" => Some(PerturbationTarget::Position),
        "momentum" => Some(PerturbationTarget::Momentum),
        other => {
            loader.push(format!(
                "perturbation.target: expected \"position\" or \"momentum\", got \"{other}\""
            ));
            None
        }
    };
    let build = match section.profile.as_str() {
        "smooth-step" => Some(Perturbation::smooth_step as fn(_, _, _, _, _) -> _),
        "sine-pulse" => Some(Perturbation::sine_pulse as fn(_, _, _, _, _) -> _),
        other => {
            loader.push(format!(
                "perturbation.profile: expected \"smooth-step\" or \"sine-pulse\", got \"{other}\""
            ));
            None
        }
    };
    if !ok {
        return None;
    }
    match build?(
        section.t0,
        section.index,
        target?,
        section.amplitude,
        section.duration,
    ) {
        Ok(p) => Some(p),
        Err(e) => {
            loader.push(format!("perturbation: {e}"));
            None
        }
    }
}

fn load_tangibility(loader: &mut Loader, root: &toml::value::Table) -> Option<Plan> {
    let model_section: Option<ModelSection> = loader.section(root, "model", true);
    let initial_section: Option<InitialSection> = loader.section(root, "initial", true);
    let numerics_section: Option<NumericsSection> = loader.section(root, "numerics", true);
    let perturbation_section: Option<PerturbationSection> =
        loader.section(root, "perturbation", true);
    let output: OutputSection = loader
        .section(root, "output", false)
        .unwrap_or_default();

    let summary_json = resolved_name(loader, "summary_json", &output.summary_json, "tangibility.json");
    let series_csv = match &output.series_csv {
        Some(name) => {
            if check_filename(loader, "series_csv", name) {
                Some(name.clone())
            } else {
                return None;
            }
        }
        None => None,
    };

    let numerics = numerics_section.as_ref().and_then(|s| decode_numerics(loader, s));

    let (model, _) = build_model(loader, model_section.as_ref()?)?;
    let initial = decode_initial(
        loader,
        initial_section.as_ref()?,
        model.cl_dim(),
        model.qm_dim(),
    );
    let perturbation = decode_perturbation(loader, perturbation_section.as_ref()?, model.cl_dim());

    Some(Plan::Tangibility(TangibilityPlan {
        model,
        initial: initial?,
        perturbation: perturbation?,
        numerics: numerics?,
        summary_json: summary_json?,
        series_csv,
    }))
}

fn load_closure_check(
    loader: &mut Loader,
    root: &toml::value::Table,
    seed_override: Option<u64>,
) -> Option<Plan> {
    let check: CheckSection = loader.section(root, "check", false).unwrap_or_default();
    let output: OutputSection = loader
        .section(root, "output", false)
        .unwrap_or_default();
    let summary_json = resolved_name(loader, "summary_json", &output.summary_json, "closure_check.json");

    let pairs = check.pairs.unwrap_or(20);
    let points = check.points.unwrap_or(5);
    let cl_dim = check.cl_dim.unwrap_or(2);
    let levels = check.levels.unwrap_or(3);
    if pairs == 0 {
        loader.push("check.pairs: must be at least 1");
    }
    if points == 0 {
        loader.push("check.points: must be at least 1");
    }
    if cl_dim == 0 {
        loader.push("check.cl_dim: must be at least 1");
    }
    if levels < 2 {
        loader.push("check.levels: must be at least 2");
    }
    let seed = resolve_seed(loader, "check.seed", check.seed, seed_override);

    Some(Plan::ClosureCheck(ClosureCheckPlan {
        pairs,
        points,
        cl_dim,
        levels,
        seed,
        summary_json: summary_json?,
    }))
}
