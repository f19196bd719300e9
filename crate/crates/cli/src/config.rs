//! JSON experiment configuration.
//!
//! Parsing is strict (unknown keys are rejected) and validation reports every
//! violation at once instead of stopping at the first.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use retc_core::model::base_period;
use retc_core::presets;
use retc_core::sim::{DEFAULT_CONVERGENCE_TOL, DEFAULT_HORIZON_STEPS, DEFAULT_SIGMA_GRID};
use retc_core::{BoxBounds, PlantModel, TokenBucketSpec, Variant};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TIMING_REPETITIONS: usize = 9;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: u32,
    plant: RawPlant,
    bucket: Option<RawBucket>,
    initial: Option<RawInitial>,
    #[serde(default)]
    controller: RawController,
    #[serde(default)]
    simulation: RawSimulation,
    sweep: Option<RawSweep>,
    timing: Option<RawTiming>,
    etc_search: Option<RawEtcSearch>,
    output: Option<RawOutput>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlant {
    preset: Option<String>,
    a: Option<Vec<Vec<f64>>>,
    b: Option<Vec<Vec<f64>>>,
    q: Option<Vec<Vec<f64>>>,
    r: Option<Vec<Vec<f64>>>,
    state_box: Option<RawBox>,
    input_box: Option<RawBox>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBucket {
    refill: i64,
    cost: i64,
    capacity: i64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    x0: Option<Vec<f64>>,
    u0: Option<Vec<f64>>,
    beta0: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControllerChoice {
    #[default]
    Rollout,
    Ttc,
    Etc,
}

impl ControllerChoice {
    pub fn label(self) -> &'static str {
        match self {
            ControllerChoice::Rollout => "rollout",
            ControllerChoice::Ttc => "ttc",
            ControllerChoice::Etc => "etc",
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawVariant {
    CyclicHorizon,
    PeriodicTerminal,
}

impl From<RawVariant> for Variant {
    fn from(v: RawVariant) -> Self {
        match v {
            RawVariant::CyclicHorizon => Variant::CyclicHorizon,
            RawVariant::PeriodicTerminal => Variant::PeriodicTerminal,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawController {
    #[serde(default)]
    kind: ControllerChoice,
    variant: Option<RawVariant>,
    n_bar: Option<usize>,
    sigma_bucket: Option<f64>,
    sigma_trigger: Option<f64>,
    ttc_period: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    steps: Option<usize>,
    convergence_tol: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    n_bar: Option<Vec<usize>>,
    variants: Option<Vec<RawVariant>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTiming {
    n_bar: Option<Vec<usize>>,
    repetitions: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEtcSearch {
    grid_points: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

/// A fully validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Preset name, or `"custom"` for explicit matrices.
    pub plant_name: String,
    pub plant: PlantModel,
    pub spec: TokenBucketSpec,
    pub x0: DVector<f64>,
    pub u0: DVector<f64>,
    pub beta0: i64,
    pub controller: ControllerChoice,
    pub variant: Variant,
    pub n_bar: usize,
    pub sigma_bucket: f64,
    pub sigma_trigger: Option<f64>,
    pub ttc_period: usize,
    pub steps: usize,
    pub convergence_tol: f64,
    pub sweep_n_bar: Vec<usize>,
    pub sweep_variants: Vec<Variant>,
    pub timing_n_bar: Vec<usize>,
    pub timing_repetitions: usize,
    pub etc_grid_points: usize,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn period(&self) -> usize {
        base_period(&self.spec)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_config(&text, path)
}

/// Parses and validates configuration text; `origin` is only used in messages.
pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig, CliError> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| CliError::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    validate(raw)
}

fn matrix(rows: &[Vec<f64>], name: &str, errors: &mut Vec<String>) -> Option<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || ncols == 0 {
        errors.push(format!("plant.{name}: matrix is empty"));
        return None;
    }
    if rows.iter().any(|r| r.len() != ncols) {
        errors.push(format!("plant.{name}: rows have different lengths"));
        return None;
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        errors.push(format!("plant.{name}: entries must be finite"));
        return None;
    }
    Some(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn bounds(raw: &RawBox, name: &str, errors: &mut Vec<String>) -> Option<BoxBounds> {
    let lower = DVector::from_column_slice(&raw.lower);
    let upper = DVector::from_column_slice(&raw.upper);
    BoxBounds::new(lower, upper)
        .map_err(|e| errors.push(format!("plant.{name}: {e}")))
        .ok()
}

fn build_plant(raw: &RawPlant, errors: &mut Vec<String>) -> Option<(String, PlantModel, Option<presets::Preset>)> {
    let explicit = raw.a.is_some() || raw.b.is_some() || raw.q.is_some() || raw.r.is_some();
    let (name, base, preset) = match (&raw.preset, explicit) {
        (Some(_), true) => {
            errors.push("plant: give either `preset` or explicit matrices, not both".into());
            return None;
        }
        (None, false) => {
            errors.push("plant: `preset` or matrices `a` and `b` are required".into());
            return None;
        }
        (Some(name), false) => match presets::by_name(name) {
            Some(p) => (name.clone(), p.plant.clone(), Some(p)),
            None => {
                errors.push(format!(
                    "plant.preset: unknown preset `{name}`, expected one of {}",
                    presets::PRESET_NAMES.join(", ")
                ));
                return None;
            }
        },
        (None, true) => {
            let before = errors.len();
            let a = raw.a.as_deref().map(|m| matrix(m, "a", errors));
            let b = raw.b.as_deref().map(|m| matrix(m, "b", errors));
            if a.is_none() {
                errors.push("plant.a: required with explicit matrices".into());
            }
            if b.is_none() {
                errors.push("plant.b: required with explicit matrices".into());
            }
            let (Some(Some(a)), Some(Some(b))) = (a, b) else {
                return None;
            };
            let q = match &raw.q {
                Some(m) => matrix(m, "q", errors)?,
                None => DMatrix::identity(a.nrows(), a.nrows()),
            };
            let r = match &raw.r {
                Some(m) => matrix(m, "r", errors)?,
                None => DMatrix::identity(b.ncols(), b.ncols()),
            };
            if errors.len() > before {
                return None;
            }
            match PlantModel::new(a, b, q, r) {
                Ok(p) => ("custom".to_string(), p, None),
                Err(e) => {
                    errors.push(format!("plant: {e}"));
                    return None;
                }
            }
        }
    };
    let mut plant = base;
    if let Some(sb) = &raw.state_box {
        let bx = bounds(sb, "state_box", errors)?;
        plant = plant
            .with_state_box(bx)
            .map_err(|e| errors.push(format!("plant.state_box: {e}")))
            .ok()?;
    }
    if let Some(ib) = &raw.input_box {
        let bx = bounds(ib, "input_box", errors)?;
        plant = plant
            .with_input_box(bx)
            .map_err(|e| errors.push(format!("plant.input_box: {e}")))
            .ok()?;
    }
    Some((name, plant, preset))
}

fn validate(raw: RawConfig) -> Result<ExperimentConfig, CliError> {
    let mut errors = Vec::new();
    if raw.schema_version != SCHEMA_VERSION {
        errors.push(format!(
            "schema_version: unsupported version {}, expected {SCHEMA_VERSION}",
            raw.schema_version
        ));
    }

    let plant = build_plant(&raw.plant, &mut errors);
    let preset = plant.as_ref().and_then(|p| p.2.clone());

    let spec = match (&raw.bucket, &preset) {
        (Some(b), _) => TokenBucketSpec::new(b.refill, b.cost, b.capacity)
            .map_err(|e| errors.push(format!("bucket: {e}")))
            .ok(),
        (None, Some(p)) => Some(p.spec),
        (None, None) => {
            errors.push("bucket: required with explicit matrices".into());
            None
        }
    };

    let initial = raw.initial.as_ref();
    let x0 = initial
        .and_then(|i| i.x0.clone())
        .map(DVector::from_vec)
        .or_else(|| preset.as_ref().map(|p| p.x0.clone()));
    let u0 = initial
        .and_then(|i| i.u0.clone())
        .map(DVector::from_vec)
        .or_else(|| preset.as_ref().map(|p| p.u0.clone()))
        .or_else(|| plant.as_ref().map(|p| DVector::zeros(p.1.m())));
    let beta0 = initial
        .and_then(|i| i.beta0)
        .or_else(|| preset.as_ref().filter(|_| raw.bucket.is_none()).map(|p| p.beta0))
        .or_else(|| spec.map(|s| s.b()));
    if x0.is_none() && plant.is_some() {
        errors.push("initial.x0: required with explicit matrices".into());
    }
    if let (Some(p), Some(x0)) = (&plant, &x0) {
        if x0.len() != p.1.n() {
            errors.push(format!(
                "initial.x0: length {} does not match n = {}",
                x0.len(),
                p.1.n()
            ));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            errors.push("initial.x0: entries must be finite".into());
        }
    }
    if let (Some(p), Some(u0)) = (&plant, &u0) {
        if u0.len() != p.1.m() {
            errors.push(format!(
                "initial.u0: length {} does not match m = {}",
                u0.len(),
                p.1.m()
            ));
        }
    }
    if let (Some(s), Some(b0)) = (&spec, beta0) {
        if !(0..=s.b()).contains(&b0) {
            errors.push(format!("initial.beta0: {b0} outside [0, {}]", s.b()));
        }
    }

    let period = spec.map(|s| base_period(&s));
    let ctl = &raw.controller;
    let variant: Variant = ctl.variant.map_or(Variant::CyclicHorizon, Into::into);
    let n_bar = ctl.n_bar.or(period).unwrap_or(1);
    if n_bar == 0 {
        errors.push("controller.n_bar: must be positive".into());
    }
    if let Some(m) = period {
        if ctl.kind == ControllerChoice::Rollout && variant == Variant::CyclicHorizon && n_bar < m {
            errors.push(format!(
                "controller.n_bar: {n_bar} is below the base period {m} required by the cyclic-horizon variant"
            ));
        }
    }
    let sigma_bucket = ctl.sigma_bucket.unwrap_or(0.0);
    if !(sigma_bucket >= 0.0 && sigma_bucket.is_finite()) {
        errors.push(format!(
            "controller.sigma_bucket: must be finite and nonnegative, got {sigma_bucket}"
        ));
    }
    if let Some(s) = ctl.sigma_trigger {
        if !(0.0..=1.0).contains(&s) {
            errors.push(format!("controller.sigma_trigger: must lie in [0, 1], got {s}"));
        }
    } else if ctl.kind == ControllerChoice::Etc {
        errors.push("controller.sigma_trigger: required for the etc controller".into());
    }
    let ttc_period = ctl.ttc_period.or(period).unwrap_or(1);
    if ttc_period == 0 {
        errors.push("controller.ttc_period: must be positive".into());
    }

    let steps = raw.simulation.steps.unwrap_or(DEFAULT_HORIZON_STEPS);
    if steps == 0 {
        errors.push("simulation.steps: horizon is empty".into());
    }
    let convergence_tol = raw.simulation.convergence_tol.unwrap_or(DEFAULT_CONVERGENCE_TOL);
    if !(convergence_tol > 0.0 && convergence_tol.is_finite()) {
        errors.push(format!(
            "simulation.convergence_tol: must be positive, got {convergence_tol}"
        ));
    }

    let sweep_n_bar = raw
        .sweep
        .as_ref()
        .and_then(|s| s.n_bar.clone())
        .unwrap_or_else(|| (1..=12).collect());
    let sweep_variants: Vec<Variant> = raw
        .sweep
        .as_ref()
        .and_then(|s| s.variants.clone())
        .map(|v| v.into_iter().map(Into::into).collect())
        .unwrap_or_else(|| vec![Variant::CyclicHorizon, Variant::PeriodicTerminal]);
    if sweep_n_bar.is_empty() || sweep_n_bar.contains(&0) {
        errors.push("sweep.n_bar: needs at least one entry, all positive".into());
    }
    if sweep_variants.is_empty() {
        errors.push("sweep.variants: needs at least one entry".into());
    }
    let timing_n_bar = raw
        .timing
        .as_ref()
        .and_then(|t| t.n_bar.clone())
        .unwrap_or_else(|| (6..=12).collect());
    if timing_n_bar.is_empty() || timing_n_bar.contains(&0) {
        errors.push("timing.n_bar: needs at least one entry, all positive".into());
    }
    if let Some(m) = period {
        if variant == Variant::CyclicHorizon && timing_n_bar.iter().any(|&n| n < m) {
            errors.push(format!(
                "timing.n_bar: entries below the base period {m} with the cyclic-horizon variant"
            ));
        }
    }
    let timing_repetitions = raw
        .timing
        .as_ref()
        .and_then(|t| t.repetitions)
        .unwrap_or(DEFAULT_TIMING_REPETITIONS);
    if timing_repetitions == 0 {
        errors.push("timing.repetitions: must be positive".into());
    }
    let etc_grid_points = raw
        .etc_search
        .as_ref()
        .and_then(|e| e.grid_points)
        .unwrap_or(DEFAULT_SIGMA_GRID);
    if etc_grid_points < 2 {
        errors.push(format!(
            "etc_search.grid_points: needs at least 2, got {etc_grid_points}"
        ));
    }

    if !errors.is_empty() {
        return Err(CliError::Validation(errors));
    }
    let (plant_name, plant, _) = plant.expect("no errors");
    Ok(ExperimentConfig {
        plant_name,
        plant,
        spec: spec.expect("no errors"),
        x0: x0.expect("no errors"),
        u0: u0.expect("no errors"),
        beta0: beta0.expect("no errors"),
        controller: ctl.kind,
        variant,
        n_bar,
        sigma_bucket,
        sigma_trigger: ctl.sigma_trigger,
        ttc_period,
        steps,
        convergence_tol,
        sweep_n_bar,
        sweep_variants,
        timing_n_bar,
        timing_repetitions,
        etc_grid_points,
        output_dir: raw.output.and_then(|o| o.dir),
    })
}

/// Variant name as spelled in configuration files.
pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::CyclicHorizon => "cyclic_horizon",
        Variant::PeriodicTerminal => "periodic_terminal",
    }
}
