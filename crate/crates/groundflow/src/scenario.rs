//! End-to-end experiment harness: generate a conductivity field, simulate
//! ground truth, extract (and optionally corrupt) observations, train the
//! physics-guided surrogate and its data-only baseline, and score both on a
//! held-out window.
//!
//! Six scenario kinds cover the supported studies: plain future prediction,
//! a mid-run boundary-condition change (known in advance), noisy data,
//! outlier-contaminated data, transfer retraining after an unannounced
//! boundary change, and well operation under an engineering-control floor.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::KvDoc;
use crate::error::{GfError, Result};
use crate::grid::Grid2D;
use crate::kle::{build_basis_2d, ConductivityField, CovarianceSpec, FieldFile, KlBasis2D};
use crate::loss::{Conductivity, LossWeights, PhysicsSpec, PointSets};
use crate::net::{self, Activation, MlpParams, Scaling};
use crate::solver::{
    self, extract_observations, BcSchedule, FlowProblem, HeadSolution, ObsRecord, SideBc, WellMode,
    WellSpec,
};
use crate::train::{self, FreezeMask, TrainConfig, TrainOutcome};

// ---------------------------------------------------------------------------
// Evaluation metrics
// ---------------------------------------------------------------------------

/// Relative Euclidean error `||pred - true|| / ||true||`.
pub fn relative_l2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(GfError::invalid("metric input", "length mismatch"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        num += (p - t) * (p - t);
        den += t * t;
    }
    if den == 0.0 {
        return Err(GfError::invalid("metric input", "reference has zero norm"));
    }
    Ok((num / den).sqrt())
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2_score(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(GfError::invalid("metric input", "length mismatch"));
    }
    if truth.is_empty() {
        return Err(GfError::invalid("metric input", "empty reference"));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        ss_res += (p - t) * (p - t);
        ss_tot += (t - mean) * (t - mean);
    }
    if ss_tot == 0.0 {
        return Err(GfError::invalid("metric input", "reference values are all identical"));
    }
    Ok(1.0 - ss_res / ss_tot)
}

// ---------------------------------------------------------------------------
// Data corruption models
// ---------------------------------------------------------------------------

/// Adds proportional noise: every record gets
/// `h += h_diff(x, y) * (a/100) * eps`, `eps ~ U(-1, 1)`, where `h_diff` is
/// the max-minus-min of the observed head at that location over the
/// monitored window. Requires at least two monitored times per location.
pub fn add_noise(records: &[ObsRecord], a_percent: f64, seed: u64) -> Result<Vec<ObsRecord>> {
    if !(a_percent >= 0.0) {
        return Err(GfError::invalid("noise level", "percentage must be >= 0"));
    }
    let mut spans: std::collections::HashMap<(u64, u64), (f64, f64, usize)> =
        std::collections::HashMap::new();
    for r in records {
        let key = (r.x.to_bits(), r.y.to_bits());
        let e = spans.entry(key).or_insert((f64::INFINITY, f64::NEG_INFINITY, 0));
        e.0 = e.0.min(r.h);
        e.1 = e.1.max(r.h);
        e.2 += 1;
    }
    if spans.values().any(|(_, _, n)| *n < 2) {
        return Err(GfError::invalid(
            "noise input",
            "every monitored location needs at least two observation times",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let (lo, hi, _) = spans[&(r.x.to_bits(), r.y.to_bits())];
        let eps: f64 = rng.random_range(-1.0..1.0);
        let mut rec = *r;
        rec.h += (hi - lo) * (a_percent / 100.0) * eps;
        out.push(rec);
    }
    Ok(out)
}

/// Replaces `floor(p * N)` records (chosen uniformly without replacement)
/// with draws from `U(1, 2)`.
pub fn add_outliers(records: &[ObsRecord], fraction: f64, seed: u64) -> Result<Vec<ObsRecord>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(GfError::invalid("outlier fraction", "must lie in [0, 1)"));
    }
    let n_out = (fraction * records.len() as f64).floor() as usize;
    let mut out = records.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, records.len(), n_out).into_vec();
    picks.sort_unstable();
    for idx in picks {
        out[idx].h = rng.random_range(1.0..2.0);
    }
    Ok(out)
}

/// Samples `m` distinct cells once and observes them at every listed step
/// (a fixed monitoring network), as needed by the per-location noise model.
pub fn extract_fixed_network_observations(
    solution: &HeadSolution,
    steps: &[usize],
    points_per_step: usize,
    seed: u64,
) -> Result<Vec<ObsRecord>> {
    let grid = &solution.grid;
    let n_cells = grid.n_cells();
    if points_per_step > n_cells {
        return Err(GfError::invalid(
            "observation extraction",
            format!("{points_per_step} points per step exceeds {n_cells} cells"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, n_cells, points_per_step);
    let mut out = Vec::with_capacity(steps.len() * points_per_step);
    for &step in steps {
        if step >= solution.heads.len() {
            return Err(GfError::invalid(
                "observation extraction",
                format!("step {step} outside the solution"),
            ));
        }
        for cell in picks.iter() {
            let j = cell / grid.nx;
            let i = cell % grid.nx;
            out.push(ObsRecord {
                step,
                t: solution.times[step],
                x: grid.x_center(i),
                y: grid.y_center(j),
                h: solution.heads[step][(j, i)],
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scenario specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    FuturePrediction,
    ChangedBc,
    Noisy,
    Outliers,
    Transfer,
    EngineeringControl,
}

impl ScenarioKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ScenarioKind::FuturePrediction => "future_prediction",
            ScenarioKind::ChangedBc => "changed_bc",
            ScenarioKind::Noisy => "noisy",
            ScenarioKind::Outliers => "outliers",
            ScenarioKind::Transfer => "transfer",
            ScenarioKind::EngineeringControl => "engineering_control",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "future_prediction" => ScenarioKind::FuturePrediction,
            "changed_bc" => ScenarioKind::ChangedBc,
            "noisy" => ScenarioKind::Noisy,
            "outliers" => ScenarioKind::Outliers,
            "transfer" => ScenarioKind::Transfer,
            "engineering_control" => ScenarioKind::EngineeringControl,
            other => {
                return Err(GfError::Config(format!("unknown scenario kind '{other}'")));
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IcMode {
    /// Head 1 on the left column, 0 elsewhere (sharp front).
    LeftColumn,
    /// Uniform interior value; boundary columns take their prescribed heads.
    Uniform(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WellConfig {
    pub x: f64,
    pub y: f64,
    pub rate: f64,
    pub head_floor: Option<f64>,
}

/// Complete description of one experiment. Parsed from a strict key-value
/// document; every numeric knob and seed is explicit here.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub id: String,

    // random field
    pub variance: f64,
    pub corr_len_x: f64,
    pub corr_len_y: f64,
    pub mean_logk: f64,
    pub n_terms: usize,
    pub field_seed: u64,

    // grid and flow problem
    pub nx: usize,
    pub ny: usize,
    pub domain_len_x: f64,
    pub domain_len_y: f64,
    pub specific_storage: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub left_head: f64,
    pub right_head: f64,
    pub right_change_step: Option<usize>,
    pub right_new_value: f64,
    pub ic_mode: IcMode,
    pub well: Option<WellConfig>,

    // observations
    pub obs_first_step: usize,
    pub obs_last_step: usize,
    pub obs_points_per_step: usize,
    pub obs_seed: u64,
    pub monitor_well: bool,

    // corruption
    pub noise_percent: f64,
    pub outlier_fraction: f64,
    pub corrupt_seed: u64,

    // network and training
    pub net_seed: u64,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub log_every: usize,
    pub n_colloc: usize,
    pub n_bc: usize,
    pub n_ic: usize,
    pub n_well_times: usize,
    pub colloc_seed: u64,
    /// Collocation sampling starts at this time (the sharp initial front is
    /// not resolvable by the surrogate, so configs may push the residual
    /// enforcement past it).
    pub colloc_t_min: f64,
    pub head_offset: f64,
    pub head_scale: f64,

    // loss weights (None = kind-dependent default)
    pub lambda_data: Option<f64>,
    pub lambda_pde: Option<f64>,
    pub lambda_bc: Option<f64>,
    pub lambda_ic: Option<f64>,
    pub lambda_new_bc: Option<f64>,
    pub lambda_ec: Option<f64>,
    pub lambda_ek: Option<f64>,
    pub lambda_pde_well: Option<f64>,
    pub ek_lower: Option<f64>,
    pub ek_upper: Option<f64>,

    // evaluation window
    pub eval_first_step: usize,
    pub eval_last_step: usize,

    // transfer protocol
    pub retrain_epochs: Option<usize>,
    pub retrain_lr: Option<f64>,
    pub trainable_head_layers: usize,
    pub freeze_output: bool,

    // ensemble
    pub n_realizations: usize,
}

impl ScenarioSpec {
    /// Parses and validates a spec document. Unknown keys are rejected.
    pub fn from_document(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let kind = ScenarioKind::from_tag(&doc.require_str("kind")?)?;
        let spec = ScenarioSpec {
            kind,
            id: doc.get_str("id", kind.tag()),
            variance: doc.get_f64("variance", 1.0)?,
            corr_len_x: doc.get_f64("corr_len_x", 408.0)?,
            corr_len_y: doc.get_f64("corr_len_y", 408.0)?,
            mean_logk: doc.get_f64("mean_logk", 0.0)?,
            n_terms: doc.get_usize("n_terms", 20)?,
            field_seed: doc.get_u64("field_seed", 1)?,
            nx: doc.get_usize("nx", 51)?,
            ny: doc.get_usize("ny", 51)?,
            domain_len_x: doc.get_f64("domain_len_x", 1020.0)?,
            domain_len_y: doc.get_f64("domain_len_y", 1020.0)?,
            specific_storage: doc.get_f64("specific_storage", 1e-4)?,
            dt: doc.get_f64("dt", 0.2)?,
            n_steps: doc.get_usize("n_steps", 50)?,
            left_head: doc.get_f64("left_head", 1.0)?,
            right_head: doc.get_f64("right_head", 0.0)?,
            right_change_step: doc.get_opt_usize("right_change_step")?,
            right_new_value: doc.get_f64("right_new_value", 2.0)?,
            ic_mode: match doc.get_str("ic_mode", "left_column").as_str() {
                "left_column" => IcMode::LeftColumn,
                "uniform" => IcMode::Uniform(doc.get_f64("ic_value", 200.0)?),
                other => {
                    return Err(GfError::Config(format!("unknown ic_mode '{other}'")));
                }
            },
            well: {
                if doc.has("well_x") || doc.has("well_y") || doc.has("well_rate") {
                    let x = doc.get_f64("well_x", 520.0)?;
                    let y = doc.get_f64("well_y", 520.0)?;
                    let rate = doc.get_f64("well_rate", 50.0)?;
                    let floor = doc.get_opt_f64("well_head_floor")?;
                    Some(WellConfig {
                        x,
                        y,
                        rate,
                        head_floor: floor,
                    })
                } else {
                    None
                }
            },
            obs_first_step: doc.get_usize("obs_first_step", 1)?,
            obs_last_step: doc.get_usize("obs_last_step", 18)?,
            obs_points_per_step: doc.get_usize("obs_points_per_step", 1000)?,
            obs_seed: doc.get_u64("obs_seed", 2)?,
            monitor_well: doc.get_bool("monitor_well", false)?,
            noise_percent: doc.get_f64("noise_percent", 0.0)?,
            outlier_fraction: doc.get_f64("outlier_fraction", 0.0)?,
            corrupt_seed: doc.get_u64("corrupt_seed", 3)?,
            net_seed: doc.get_u64("net_seed", 4)?,
            hidden_layers: doc.get_usize("hidden_layers", 7)?,
            hidden_width: doc.get_usize("hidden_width", 50)?,
            epochs: doc.get_usize("epochs", 20000)?,
            lr: doc.get_f64("lr", 1e-3)?,
            log_every: doc.get_usize("log_every", 100)?,
            n_colloc: doc.get_usize("n_colloc", 2000)?,
            n_bc: doc.get_usize("n_bc", 1200)?,
            n_ic: doc.get_usize("n_ic", 800)?,
            n_well_times: doc.get_usize("n_well_times", 200)?,
            colloc_seed: doc.get_u64("colloc_seed", 5)?,
            colloc_t_min: doc.get_f64("colloc_t_min", 0.0)?,
            head_offset: doc.get_f64("head_offset", 0.0)?,
            head_scale: doc.get_f64("head_scale", 1.0)?,
            lambda_data: doc.get_opt_f64("lambda_data")?,
            lambda_pde: doc.get_opt_f64("lambda_pde")?,
            lambda_bc: doc.get_opt_f64("lambda_bc")?,
            lambda_ic: doc.get_opt_f64("lambda_ic")?,
            lambda_new_bc: doc.get_opt_f64("lambda_new_bc")?,
            lambda_ec: doc.get_opt_f64("lambda_ec")?,
            lambda_ek: doc.get_opt_f64("lambda_ek")?,
            lambda_pde_well: doc.get_opt_f64("lambda_pde_well")?,
            ek_lower: doc.get_opt_f64("ek_lower")?,
            ek_upper: doc.get_opt_f64("ek_upper")?,
            eval_first_step: doc.get_usize("eval_first_step", 19)?,
            eval_last_step: doc.get_usize("eval_last_step", 50)?,
            retrain_epochs: doc.get_opt_usize("retrain_epochs")?,
            retrain_lr: doc.get_opt_f64("retrain_lr")?,
            trainable_head_layers: doc.get_usize("trainable_head_layers", 3)?,
            freeze_output: doc.get_bool("freeze_output", true)?,
            n_realizations: doc.get_usize("n_realizations", 1)?,
        };
        doc.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_first_step < 1
            || self.obs_first_step > self.obs_last_step
            || self.obs_last_step > self.n_steps
        {
            return Err(GfError::invalid(
                "scenario spec",
                format!(
                    "observation window {}..={} outside 1..={}",
                    self.obs_first_step, self.obs_last_step, self.n_steps
                ),
            ));
        }
        if self.eval_first_step > self.eval_last_step || self.eval_last_step > self.n_steps {
            return Err(GfError::invalid(
                "scenario spec",
                format!(
                    "evaluation window {}..={} outside 0..={} or empty",
                    self.eval_first_step, self.eval_last_step, self.n_steps
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(GfError::invalid("scenario spec", "outlier_fraction must be in [0, 1)"));
        }
        if self.noise_percent < 0.0 {
            return Err(GfError::invalid("scenario spec", "noise_percent must be >= 0"));
        }
        if self.hidden_layers < 1 || self.hidden_width < 1 {
            return Err(GfError::invalid("scenario spec", "network needs hidden layers and width"));
        }
        if matches!(self.kind, ScenarioKind::ChangedBc | ScenarioKind::Transfer)
            && self.right_change_step.is_none()
        {
            return Err(GfError::invalid(
                "scenario spec",
                "this kind requires right_change_step",
            ));
        }
        if matches!(self.kind, ScenarioKind::EngineeringControl) && self.well.is_none() {
            return Err(GfError::invalid("scenario spec", "this kind requires a well"));
        }
        if matches!(self.kind, ScenarioKind::Transfer)
            && self.trainable_head_layers >= self.hidden_layers
        {
            return Err(GfError::invalid(
                "scenario spec",
                "transfer must leave at least one hidden layer frozen",
            ));
        }
        Ok(())
    }

    /// Loss weights for the physics-guided model, with kind-dependent
    /// defaults for anything not set explicitly.
    pub fn guided_weights(&self) -> LossWeights {
        let d = |v: Option<f64>, def: f64| v.unwrap_or(def);
        match self.kind {
            ScenarioKind::FuturePrediction | ScenarioKind::Noisy | ScenarioKind::Outliers => {
                LossWeights {
                    data: d(self.lambda_data, 1.0),
                    pde: d(self.lambda_pde, 1.0),
                    bc: d(self.lambda_bc, 1.0),
                    ic: d(self.lambda_ic, 1.0),
                    new_bc: d(self.lambda_new_bc, 0.0),
                    ec: d(self.lambda_ec, 0.0),
                    ek: d(self.lambda_ek, 1.0),
                    pde_well: d(self.lambda_pde_well, 0.0),
                }
            }
            ScenarioKind::ChangedBc => LossWeights {
                data: d(self.lambda_data, 1.0),
                pde: d(self.lambda_pde, 1.0),
                bc: d(self.lambda_bc, 1.0),
                ic: d(self.lambda_ic, 1.0),
                new_bc: d(self.lambda_new_bc, 1.0),
                ec: d(self.lambda_ec, 0.0),
                ek: d(self.lambda_ek, 1.0),
                pde_well: d(self.lambda_pde_well, 0.0),
            },
            // pretraining phase weights; the retraining phase drops data
            ScenarioKind::Transfer => LossWeights {
                data: d(self.lambda_data, 1.0),
                pde: d(self.lambda_pde, 1.0),
                bc: d(self.lambda_bc, 1.0),
                ic: d(self.lambda_ic, 1.0),
                new_bc: d(self.lambda_new_bc, 0.0),
                ec: d(self.lambda_ec, 0.0),
                ek: d(self.lambda_ek, 1.0),
                pde_well: d(self.lambda_pde_well, 0.0),
            },
            ScenarioKind::EngineeringControl => LossWeights {
                data: d(self.lambda_data, 1.0),
                pde: d(self.lambda_pde, 1.0),
                bc: d(self.lambda_bc, 1.0),
                ic: d(self.lambda_ic, 1.0),
                new_bc: d(self.lambda_new_bc, 0.0),
                ec: d(self.lambda_ec, 1.0),
                ek: d(self.lambda_ek, 0.0),
                pde_well: d(self.lambda_pde_well, 1.0),
            },
        }
    }

    /// Expert-knowledge head bounds; after a boundary rise the known range
    /// widens accordingly.
    pub fn ek_bounds(&self) -> (f64, f64) {
        let upper_default = match self.kind {
            ScenarioKind::ChangedBc | ScenarioKind::Transfer => self.right_new_value.max(self.left_head),
            _ => self.left_head.max(self.right_head).max(1.0),
        };
        (
            self.ek_lower.unwrap_or(0.0),
            self.ek_upper.unwrap_or(upper_default),
        )
    }

    pub fn total_time(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![3];
        sizes.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        sizes.push(1);
        sizes
    }

    pub fn scaling(&self) -> Scaling {
        Scaling {
            t_scale: self.total_time(),
            x_scale: self.domain_len_x,
            y_scale: self.domain_len_y,
            head_offset: self.head_offset,
            head_scale: self.head_scale,
        }
    }

    pub fn covariance(&self) -> CovarianceSpec {
        CovarianceSpec {
            variance: self.variance,
            corr_len_x: self.corr_len_x,
            corr_len_y: self.corr_len_y,
            domain_len_x: self.domain_len_x,
            domain_len_y: self.domain_len_y,
            mean_logk: self.mean_logk,
        }
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub relative_l2: f64,
    pub r2_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scenario_id: String,
    pub model: String,
    pub relative_l2: f64,
    pub r2_score: f64,
    pub per_step: Vec<StepMetrics>,
}

/// Guided-vs-baseline outcome of a single scenario run.
#[derive(Debug, Clone, Serialize)]
pub struct PairOutcome {
    pub guided: EvalReport,
    pub baseline: EvalReport,
    /// Training wall time (not part of the deterministic metrics record).
    #[serde(skip)]
    pub guided_wall_ms: u128,
    #[serde(skip)]
    pub baseline_wall_ms: u128,
    /// Step at which the simulated well switched to head control, if any.
    pub truth_well_switch_step: Option<usize>,
    /// Predicted and true head at the well cell for every stored step:
    /// `(t, guided, baseline, true)`.
    pub well_trace: Option<Vec<(f64, f64, f64, f64)>>,
}

/// Transfer-protocol outcome: the transfer run and its two contrast runs.
#[derive(Debug, Clone, Serialize)]
pub struct TransferOutcome {
    pub transfer: EvalReport,
    pub random_tail: EvalReport,
    pub full_retrain: EvalReport,
    #[serde(skip)]
    pub pretrain_wall_ms: u128,
    #[serde(skip)]
    pub transfer_wall_ms: u128,
    #[serde(skip)]
    pub random_tail_wall_ms: u128,
    #[serde(skip)]
    pub full_retrain_wall_ms: u128,
    /// Frozen layers verified bitwise-identical to the pretrained values.
    pub frozen_layers_bitwise_equal: bool,
}

#[derive(Debug, Clone, Serialize)]
pub enum ScenarioOutcome {
    Pair(PairOutcome),
    Transfer(TransferOutcome),
}

impl ScenarioOutcome {
    pub fn pair(&self) -> Option<&PairOutcome> {
        match self {
            ScenarioOutcome::Pair(p) => Some(p),
            _ => None,
        }
    }

    pub fn transfer(&self) -> Option<&TransferOutcome> {
        match self {
            ScenarioOutcome::Transfer(t) => Some(t),
            _ => None,
        }
    }
}

/// How much to write to disk per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactLevel {
    /// Everything, including the truth and prediction CSVs.
    Full,
    /// Logs, checkpoints, and metrics only (used inside ensembles).
    Light,
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct Prepared {
    basis: Arc<KlBasis2D>,
    field: ConductivityField,
    problem: FlowProblem,
    truth: HeadSolution,
    observations: Vec<ObsRecord>,
    well_cell: Option<(usize, usize)>,
    well_sink: f64,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn prepare(spec: &ScenarioSpec) -> Result<Prepared> {
    let grid = Grid2D::from_extent(spec.nx, spec.ny, spec.domain_len_x, spec.domain_len_y)?;
    let basis = Arc::new(stage("field", build_basis_2d(&spec.covariance(), spec.n_terms))?);
    let field = ConductivityField::sample(basis.clone(), spec.field_seed);
    let k = field.k_grid(&grid);

    let right = match spec.right_change_step {
        Some(step) => SideBc::head_with_change(spec.right_head, step, spec.right_new_value),
        None => SideBc::head(spec.right_head),
    };
    let bc = BcSchedule {
        left: SideBc::head(spec.left_head),
        right,
        bottom: SideBc::NoFlow,
        top: SideBc::NoFlow,
    };
    let mut ic = Array2::zeros((grid.ny, grid.nx));
    match spec.ic_mode {
        IcMode::LeftColumn => {
            for j in 0..grid.ny {
                ic[(j, 0)] = spec.left_head;
                ic[(j, grid.nx - 1)] = spec.right_head;
            }
        }
        IcMode::Uniform(v) => {
            ic.fill(v);
            for j in 0..grid.ny {
                ic[(j, 0)] = spec.left_head;
                ic[(j, grid.nx - 1)] = spec.right_head;
            }
        }
    }

    let mut wells = Vec::new();
    let mut well_cell = None;
    let mut well_sink = 0.0;
    if let Some(w) = &spec.well {
        let cell = (grid.cell_of_x(w.x), grid.cell_of_y(w.y));
        wells.push(WellSpec {
            cell,
            rate: w.rate,
            head_floor: w.head_floor,
        });
        well_cell = Some(cell);
        well_sink = w.rate / (grid.dx * grid.dy);
    }

    let problem = FlowProblem {
        grid,
        specific_storage: spec.specific_storage,
        k,
        bc,
        ic,
        wells,
        dt: spec.dt,
        n_steps: spec.n_steps,
    };
    let truth = stage("simulate", solver::simulate(&problem))?;

    let obs_steps: Vec<usize> = (spec.obs_first_step..=spec.obs_last_step).collect();
    let mut observations = stage(
        "observe",
        if matches!(spec.kind, ScenarioKind::Noisy) {
            extract_fixed_network_observations(
                &truth,
                &obs_steps,
                spec.obs_points_per_step,
                spec.obs_seed,
            )
        } else {
            extract_observations(&truth, &obs_steps, spec.obs_points_per_step, spec.obs_seed)
        },
    )?;
    if spec.monitor_well {
        if let Some((i, j)) = well_cell {
            for &step in &obs_steps {
                observations.push(ObsRecord {
                    step,
                    t: truth.times[step],
                    x: problem.grid.x_center(i),
                    y: problem.grid.y_center(j),
                    h: truth.heads[step][(j, i)],
                });
            }
        }
    }

    let observations = match spec.kind {
        ScenarioKind::Noisy if spec.noise_percent > 0.0 => stage(
            "corrupt",
            add_noise(&observations, spec.noise_percent, spec.corrupt_seed),
        )?,
        ScenarioKind::Outliers if spec.outlier_fraction > 0.0 => stage(
            "corrupt",
            add_outliers(&observations, spec.outlier_fraction, spec.corrupt_seed),
        )?,
        _ => observations,
    };

    Ok(Prepared {
        basis,
        field,
        problem,
        truth,
        observations,
        well_cell,
        well_sink,
    })
}

/// Point-set construction for the one-phase kinds. When `known_schedule` is
/// false (transfer pretraining) the right boundary keeps its original value
/// for all times and no new-BC set is built.
fn build_point_sets(spec: &ScenarioSpec, prep: &Prepared, known_schedule: bool) -> PointSets {
    let mut sets = PointSets::default();
    let grid = &prep.problem.grid;
    let t_total = spec.total_time();
    let change_time = spec
        .right_change_step
        .map(|s| s as f64 * spec.dt)
        .unwrap_or(f64::INFINITY);
    let weights = spec.guided_weights();

    for r in &prep.observations {
        sets.data.push(r.t, r.x, r.y, r.h);
    }

    let (x_lo, x_hi) = (grid.x_center(0), grid.x_center(grid.nx - 1));
    let (y_lo, y_hi) = (grid.y_center(0), grid.y_center(grid.ny - 1));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.colloc_seed);
    sets.colloc.points = (0..spec.n_colloc)
        .map(|_| {
            [
                rng.random_range(spec.colloc_t_min..t_total),
                rng.random_range(x_lo..x_hi),
                rng.random_range(y_lo..y_hi),
            ]
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.colloc_seed.wrapping_add(1));
    for i in 0..spec.n_bc {
        let t = rng.random_range(0.0..t_total);
        let y = rng.random_range(y_lo..y_hi);
        if i % 2 == 0 {
            sets.bc.push(t, x_lo, y, spec.left_head);
        } else if known_schedule && t >= change_time {
            sets.new_bc.push(t, x_hi, y, spec.right_new_value);
        } else {
            sets.bc.push(t, x_hi, y, spec.right_head);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.colloc_seed.wrapping_add(2));
    for _ in 0..spec.n_ic {
        let i = rng.random_range(0..grid.nx);
        let j = rng.random_range(0..grid.ny);
        let (x, y) = (grid.x_center(i), grid.y_center(j));
        sets.ic.push(0.0, x, y, prep.problem.ic[(j, i)]);
    }

    if weights.pde_well > 0.0 || weights.ec > 0.0 {
        if let Some((i, j)) = prep.well_cell {
            let (wx, wy) = (grid.x_center(i), grid.y_center(j));
            sets.well.points = (0..spec.n_well_times)
                .map(|k| [(k as f64 + 0.5) * t_total / spec.n_well_times as f64, wx, wy])
                .collect();
        }
    }
    if weights.ek > 0.0 {
        sets.ek.points = sets.colloc.points.clone();
    }
    if weights.ec > 0.0 {
        // the floor binds near the well, so the penalty set is the
        // collocation cloud plus the well-time points
        let mut pts = sets.colloc.points.clone();
        pts.extend(sets.well.points.iter().copied());
        sets.ec.points = pts;
    }
    sets
}

fn physics_spec(spec: &ScenarioSpec, prep: &Prepared) -> PhysicsSpec {
    let (ek_lower, ek_upper) = spec.ek_bounds();
    PhysicsSpec {
        specific_storage: spec.specific_storage,
        ek_lower,
        ek_upper,
        ec_floor: spec.well.and_then(|w| w.head_floor).unwrap_or(0.0),
        well_sink: prep.well_sink,
    }
}

/// Scores a trained model on the evaluation window: every grid cell at every
/// step in the window, overall and per step.
fn evaluate_model(
    params: &MlpParams,
    spec: &ScenarioSpec,
    truth: &HeadSolution,
    model: &str,
) -> Result<EvalReport> {
    let grid = &truth.grid;
    let steps: Vec<usize> = (spec.eval_first_step..=spec.eval_last_step).collect();
    let n = steps.len() * grid.n_cells();
    let mut xs = Array2::zeros((3, n));
    let mut truth_vals = Vec::with_capacity(n);
    let sc = &params.scaling;
    let mut c = 0;
    for &step in &steps {
        let t = truth.times[step];
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let s = sc.scale_point(t, grid.x_center(i), grid.y_center(j));
                xs[(0, c)] = s[0];
                xs[(1, c)] = s[1];
                xs[(2, c)] = s[2];
                truth_vals.push(truth.heads[step][(j, i)]);
                c += 1;
            }
        }
    }
    let raw = net::forward_batch(params, &xs);
    let preds: Vec<f64> = raw.iter().map(|v| sc.head_offset + sc.head_scale * v).collect();

    let mut per_step = Vec::with_capacity(steps.len());
    let cells = grid.n_cells();
    for (si, &step) in steps.iter().enumerate() {
        let lo = si * cells;
        let hi = lo + cells;
        per_step.push(StepMetrics {
            step,
            relative_l2: relative_l2(&preds[lo..hi], &truth_vals[lo..hi])?,
            r2_score: r2_score(&preds[lo..hi], &truth_vals[lo..hi])?,
        });
    }
    Ok(EvalReport {
        scenario_id: spec.id.clone(),
        model: model.to_string(),
        relative_l2: relative_l2(&preds, &truth_vals)?,
        r2_score: r2_score(&preds, &truth_vals)?,
        per_step,
    })
}

fn well_trace(
    spec: &ScenarioSpec,
    prep: &Prepared,
    guided: &MlpParams,
    baseline: &MlpParams,
) -> Option<Vec<(f64, f64, f64, f64)>> {
    let (i, j) = prep.well_cell?;
    let grid = &prep.problem.grid;
    let (x, y) = (grid.x_center(i), grid.y_center(j));
    Some(
        (0..=spec.n_steps)
            .map(|s| {
                let t = prep.truth.times[s];
                (
                    t,
                    net::predict(guided, t, x, y),
                    net::predict(baseline, t, x, y),
                    prep.truth.heads[s][(j, i)],
                )
            })
            .collect(),
    )
}

fn init_params(spec: &ScenarioSpec) -> Result<MlpParams> {
    MlpParams::init(
        spec.net_seed,
        &spec.layer_sizes(),
        Activation::Tanh,
        spec.scaling(),
    )
}

fn train_config(spec: &ScenarioSpec, weights: LossWeights) -> TrainConfig {
    TrainConfig {
        epochs: spec.epochs,
        lr: spec.lr,
        weights,
        freeze_mask: None,
        log_every: spec.log_every,
    }
}

/// Runs one scenario end to end. For the transfer kind this executes the
/// pretrain-plus-three-retrains protocol; all other kinds train the guided
/// model and the data-only baseline on identical inputs.
pub fn run_scenario(
    spec: &ScenarioSpec,
    out_dir: Option<&Path>,
    level: ArtifactLevel,
) -> Result<ScenarioOutcome> {
    spec.validate()?;
    let prep = prepare(spec)?;
    if let Some(dir) = out_dir {
        write_common_artifacts(spec, &prep, dir, level)?;
    }
    match spec.kind {
        ScenarioKind::Transfer => run_transfer(spec, &prep, out_dir, level).map(ScenarioOutcome::Transfer),
        _ => run_pair(spec, &prep, out_dir, level).map(ScenarioOutcome::Pair),
    }
}

fn run_pair(
    spec: &ScenarioSpec,
    prep: &Prepared,
    out_dir: Option<&Path>,
    level: ArtifactLevel,
) -> Result<PairOutcome> {
    let phys = physics_spec(spec, prep);
    let k = Conductivity::Field(&prep.field);
    let guided_sets = build_point_sets(spec, prep, true);

    // the baseline shares everything except the loss: data term only; for a
    // known boundary change the new-BC points are handed to it as labels
    let mut baseline_sets = PointSets {
        data: guided_sets.data.clone(),
        ..PointSets::default()
    };
    if matches!(spec.kind, ScenarioKind::ChangedBc) {
        for (p, v) in guided_sets
            .new_bc
            .points
            .iter()
            .zip(&guided_sets.new_bc.values)
        {
            baseline_sets.data.push(p[0], p[1], p[2], *v);
        }
    }

    let init = init_params(spec)?;
    let guided_cfg = train_config(spec, spec.guided_weights());
    let guided_run = stage(
        "train guided",
        train::train(init.clone(), &guided_sets, &k, &phys, &guided_cfg),
    )?;
    let baseline_cfg = train_config(spec, LossWeights::data_only());
    let baseline_run = stage(
        "train baseline",
        train::train(init, &baseline_sets, &k, &phys, &baseline_cfg),
    )?;

    let guided_report = stage(
        "evaluate",
        evaluate_model(&guided_run.params, spec, &prep.truth, "guided"),
    )?;
    let baseline_report = stage(
        "evaluate",
        evaluate_model(&baseline_run.params, spec, &prep.truth, "baseline"),
    )?;

    let switch = prep
        .truth
        .well_log
        .iter()
        .position(|entries| entries.iter().any(|e| e.mode == WellMode::HeadControlled));

    let outcome = PairOutcome {
        guided: guided_report,
        baseline: baseline_report,
        guided_wall_ms: guided_run.wall_ms,
        baseline_wall_ms: baseline_run.wall_ms,
        truth_well_switch_step: switch,
        well_trace: well_trace(spec, prep, &guided_run.params, &baseline_run.params),
    };

    if let Some(dir) = out_dir {
        write_model_artifacts(spec, prep, dir, level, "guided", &guided_run)?;
        write_model_artifacts(spec, prep, dir, level, "baseline", &baseline_run)?;
        write_json(dir, "metrics.json", &MetricsDoc::pair(spec, &outcome))?;
        if let Some(trace) = &outcome.well_trace {
            let mut csv = String::from("t,h_guided,h_baseline,h_true\n");
            for (t, g, b, tr) in trace {
                use std::fmt::Write as _;
                let _ = writeln!(csv, "{t},{g},{b},{tr}");
            }
            write_text(dir, "well_trace.csv", &csv)?;
        }
    }
    Ok(outcome)
}

fn run_transfer(
    spec: &ScenarioSpec,
    prep: &Prepared,
    out_dir: Option<&Path>,
    level: ArtifactLevel,
) -> Result<TransferOutcome> {
    let phys = physics_spec(spec, prep);
    let k = Conductivity::Field(&prep.field);

    // phase 1: pretrain on the observed window, unaware of the upcoming change
    let pretrain_sets = build_point_sets(spec, prep, false);
    let init = init_params(spec)?;
    let pretrain_cfg = train_config(spec, spec.guided_weights());
    let pretrained = stage(
        "pretrain",
        train::train(init, &pretrain_sets, &k, &phys, &pretrain_cfg),
    )?;
    if let Some(dir) = out_dir {
        write_model_artifacts(spec, prep, dir, level, "pretrain", &pretrained)?;
    }
    transfer_phase(spec, prep, &pretrained.params, pretrained.wall_ms, out_dir, level)
}

/// Retraining phase of the transfer protocol, entered either after an
/// in-process pretraining or from a stored checkpoint.
fn transfer_phase(
    spec: &ScenarioSpec,
    prep: &Prepared,
    pretrained_params: &MlpParams,
    pretrain_wall_ms: u128,
    out_dir: Option<&Path>,
    level: ArtifactLevel,
) -> Result<TransferOutcome> {
    let phys = physics_spec(spec, prep);
    let k = Conductivity::Field(&prep.field);
    let change_step = spec.right_change_step.expect("validated");
    let switch_time = change_step as f64 * spec.dt;
    let t_total = spec.total_time();
    let grid = &prep.problem.grid;

    // phase 2 point sets live on the post-change window
    let mut sets = PointSets::default();
    let (x_lo, x_hi) = (grid.x_center(0), grid.x_center(grid.nx - 1));
    let (y_lo, y_hi) = (grid.y_center(0), grid.y_center(grid.ny - 1));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.colloc_seed.wrapping_add(10));
    sets.colloc.points = (0..spec.n_colloc)
        .map(|_| {
            [
                rng.random_range(switch_time..t_total),
                rng.random_range(x_lo..x_hi),
                rng.random_range(y_lo..y_hi),
            ]
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.colloc_seed.wrapping_add(11));
    for i in 0..spec.n_bc {
        let t = rng.random_range(switch_time..t_total);
        let y = rng.random_range(y_lo..y_hi);
        if i % 2 == 0 {
            sets.bc.push(t, x_lo, y, spec.left_head);
        } else {
            sets.bc.push(t, x_hi, y, spec.right_new_value);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.colloc_seed.wrapping_add(12));
    for _ in 0..spec.n_ic {
        let i = rng.random_range(0..grid.nx);
        let j = rng.random_range(0..grid.ny);
        // placeholder labels; transfer_retrain overwrites them with the
        // pretrained model's predictions at the switch time
        sets.ic.push(switch_time, grid.x_center(i), grid.y_center(j), 0.0);
    }
    sets.ek.points = sets.colloc.points.clone();

    let mut weights = spec.guided_weights();
    weights.data = 0.0;
    weights.new_bc = 0.0;
    let mask = FreezeMask::head_trainable(
        spec.hidden_layers + 1,
        spec.trainable_head_layers,
        spec.freeze_output,
    );
    let retrain_cfg = TrainConfig {
        epochs: spec.retrain_epochs.unwrap_or(spec.epochs),
        lr: spec.retrain_lr.unwrap_or(spec.lr),
        weights,
        freeze_mask: Some(mask.clone()),
        log_every: spec.log_every,
    };

    // (a) transfer: start from the pretrained parameters
    let transfer_run = stage(
        "transfer retrain",
        train::transfer_retrain(pretrained_params, sets.clone(), switch_time, &k, &phys, &retrain_cfg),
    )?;
    // frozen layers must be bitwise identical to the pretrained values
    let mut frozen_equal = true;
    for (l, trainable) in mask.trainable.iter().enumerate() {
        if !trainable {
            frozen_equal &= transfer_run.params.weights[l] == pretrained_params.weights[l]
                && transfer_run.params.biases[l] == pretrained_params.biases[l];
        }
    }

    // (b) contrast: random init, tail frozen at random values
    let fresh = MlpParams::init(
        spec.net_seed.wrapping_add(1000),
        &spec.layer_sizes(),
        Activation::Tanh,
        spec.scaling(),
    )?;
    let mut contrast_sets = sets.clone();
    for (pt, val) in contrast_sets
        .ic
        .points
        .iter_mut()
        .zip(contrast_sets.ic.values.iter_mut())
    {
        pt[0] = switch_time;
        *val = net::predict(pretrained_params, switch_time, pt[1], pt[2]);
    }
    let random_tail_run = stage(
        "contrast retrain (random tail)",
        train::train(fresh.clone(), &contrast_sets, &k, &phys, &retrain_cfg),
    )?;

    // (c) contrast: full retrain from random init
    let full_cfg = TrainConfig {
        freeze_mask: None,
        ..retrain_cfg.clone()
    };
    let full_retrain_run = stage(
        "contrast retrain (full)",
        train::train(fresh, &contrast_sets, &k, &phys, &full_cfg),
    )?;

    let transfer_rep = evaluate_model(&transfer_run.params, spec, &prep.truth, "transfer")?;
    let random_rep = evaluate_model(&random_tail_run.params, spec, &prep.truth, "random_tail")?;
    let full_rep = evaluate_model(&full_retrain_run.params, spec, &prep.truth, "full_retrain")?;

    let outcome = TransferOutcome {
        transfer: transfer_rep,
        random_tail: random_rep,
        full_retrain: full_rep,
        pretrain_wall_ms,
        transfer_wall_ms: transfer_run.wall_ms,
        random_tail_wall_ms: random_tail_run.wall_ms,
        full_retrain_wall_ms: full_retrain_run.wall_ms,
        frozen_layers_bitwise_equal: frozen_equal,
    };

    if let Some(dir) = out_dir {
        write_model_artifacts(spec, prep, dir, level, "transfer", &transfer_run)?;
        write_model_artifacts(spec, prep, dir, level, "random_tail", &random_tail_run)?;
        write_model_artifacts(spec, prep, dir, level, "full_retrain", &full_retrain_run)?;
        write_json(dir, "metrics.json", &MetricsDoc::transfer(spec, &outcome))?;
    }
    Ok(outcome)
}

/// Drives the transfer protocol from an existing pretrained checkpoint
/// instead of pretraining in-process.
pub fn run_transfer_from_checkpoint(
    spec: &ScenarioSpec,
    pretrained: MlpParams,
    out_dir: Option<&Path>,
    level: ArtifactLevel,
) -> Result<ScenarioOutcome> {
    spec.validate()?;
    if !matches!(spec.kind, ScenarioKind::Transfer) {
        return Err(GfError::invalid("transfer run", "spec kind must be 'transfer'"));
    }
    if pretrained.layer_sizes != spec.layer_sizes() {
        return Err(GfError::invalid(
            "transfer run",
            format!(
                "checkpoint architecture {:?} does not match the spec's {:?}",
                pretrained.layer_sizes,
                spec.layer_sizes()
            ),
        ));
    }
    let prep = prepare(spec)?;
    if let Some(dir) = out_dir {
        write_common_artifacts(spec, &prep, dir, level)?;
    }
    transfer_phase(spec, &prep, &pretrained, 0, out_dir, level).map(ScenarioOutcome::Transfer)
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

fn write_text(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| GfError::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| GfError::Config(format!("json encoding failed: {e}")))?;
    write_text(dir, name, &text)
}

fn write_common_artifacts(
    spec: &ScenarioSpec,
    prep: &Prepared,
    dir: &Path,
    level: ArtifactLevel,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GfError::io(dir.display().to_string(), e))?;
    let _ = &prep.basis;
    let field_doc = FieldFile::from_field(&prep.field, Some(spec.field_seed));
    write_text(dir, "field.txt", &field_doc.to_document())?;
    write_text(dir, "truth_meta.txt", &solver::solution_metadata(&prep.problem, &prep.truth))?;
    write_text(dir, "observations.csv", &solver::observations_csv(&prep.observations))?;
    if level == ArtifactLevel::Full {
        write_text(dir, "truth.csv", &solver::solution_csv(&prep.truth))?;
    }
    Ok(())
}

fn write_model_artifacts(
    spec: &ScenarioSpec,
    prep: &Prepared,
    dir: &Path,
    level: ArtifactLevel,
    name: &str,
    run: &TrainOutcome,
) -> Result<()> {
    write_text(dir, &format!("{name}_train_log.csv"), &train::epoch_log_csv(&run.log))?;
    write_text(dir, &format!("{name}_checkpoint.txt"), &net::write_checkpoint(&run.params))?;
    if level == ArtifactLevel::Full {
        let grid = &prep.truth.grid;
        let sc = &run.params.scaling;
        let mut csv = String::from("step,t,x,y,h_pred,h_true\n");
        for step in spec.eval_first_step..=spec.eval_last_step {
            let t = prep.truth.times[step];
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    let (x, y) = (grid.x_center(i), grid.y_center(j));
                    let pred = sc.head_offset
                        + sc.head_scale * net::forward(&run.params, sc.scale_point(t, x, y));
                    use std::fmt::Write as _;
                    let _ = writeln!(csv, "{step},{t},{x},{y},{pred},{}", prep.truth.heads[step][(j, i)]);
                }
            }
        }
        write_text(dir, &format!("{name}_pred.csv"), &csv)?;
    }
    Ok(())
}

/// Deterministic metrics record written per run.
#[derive(Debug, Serialize)]
pub struct MetricsDoc {
    pub scenario_id: String,
    pub kind: String,
    pub models: Vec<EvalReport>,
    pub truth_well_switch_step: Option<usize>,
}

impl MetricsDoc {
    fn pair(spec: &ScenarioSpec, p: &PairOutcome) -> Self {
        MetricsDoc {
            scenario_id: spec.id.clone(),
            kind: spec.kind.tag().to_string(),
            models: vec![p.guided.clone(), p.baseline.clone()],
            truth_well_switch_step: p.truth_well_switch_step,
        }
    }

    fn transfer(spec: &ScenarioSpec, t: &TransferOutcome) -> Self {
        MetricsDoc {
            scenario_id: spec.id.clone(),
            kind: spec.kind.tag().to_string(),
            models: vec![t.transfer.clone(), t.random_tail.clone(), t.full_retrain.clone()],
            truth_well_switch_step: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RealizationStatus {
    pub index: usize,
    pub field_seed: u64,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RealizationMetrics {
    pub index: usize,
    pub field_seed: u64,
    pub guided_l2: f64,
    pub guided_r2: f64,
    pub baseline_l2: f64,
    pub baseline_r2: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct EnsembleStats {
    pub mean_relative_l2: f64,
    pub var_relative_l2: f64,
    pub mean_r2: f64,
    pub var_r2: f64,
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() < 2 {
        0.0
    } else {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    };
    (mean, var)
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleOutcome {
    pub scenario_id: String,
    pub n_requested: usize,
    pub n_succeeded: usize,
    pub guided: EnsembleStats,
    pub baseline: EnsembleStats,
    pub raw: Vec<RealizationMetrics>,
    pub statuses: Vec<RealizationStatus>,
}

/// Runs `seeds.len()` independent realizations of the base scenario (the
/// seed replaces the field seed; the other seeds are derived from it so that
/// identical seeds give identical realizations) and aggregates the metrics.
pub fn run_ensemble(
    spec: &ScenarioSpec,
    seeds: &[u64],
    out_dir: Option<&Path>,
    parallel: usize,
) -> Result<EnsembleOutcome> {
    if seeds.len() < 2 {
        return Err(GfError::invalid("ensemble", "need at least 2 realizations"));
    }
    if matches!(spec.kind, ScenarioKind::Transfer) {
        return Err(GfError::invalid("ensemble", "ensembles cover paired-model kinds only"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| GfError::io(dir.display().to_string(), e))?;
    }

    let member_spec = |index: usize| -> ScenarioSpec {
        let seed = seeds[index];
        let mut s = spec.clone();
        s.id = format!("{}_r{:03}", spec.id, index);
        s.field_seed = seed;
        s.obs_seed = spec.obs_seed.wrapping_add(seed);
        s.net_seed = spec.net_seed.wrapping_add(seed);
        s.colloc_seed = spec.colloc_seed.wrapping_add(seed);
        s.corrupt_seed = spec.corrupt_seed.wrapping_add(seed);
        s.n_realizations = 1;
        s
    };

    let run_one = |index: usize| -> (usize, Result<PairOutcome>) {
        let member = member_spec(index);
        let member_dir = out_dir.map(|d| d.join(format!("real_{index:03}")));
        let result = run_scenario(&member, member_dir.as_deref(), ArtifactLevel::Light)
            .map(|o| match o {
                ScenarioOutcome::Pair(p) => p,
                ScenarioOutcome::Transfer(_) => unreachable!("transfer rejected above"),
            });
        (index, result)
    };

    let results: Vec<(usize, Result<PairOutcome>)> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| GfError::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..seeds.len()).into_par_iter().map(run_one).collect())
    } else {
        (0..seeds.len()).map(run_one).collect()
    };

    let mut statuses = Vec::new();
    let mut raw = Vec::new();
    for (index, result) in &results {
        match result {
            Ok(pair) => {
                statuses.push(RealizationStatus {
                    index: *index,
                    field_seed: seeds[*index],
                    ok: true,
                    error: None,
                });
                raw.push(RealizationMetrics {
                    index: *index,
                    field_seed: seeds[*index],
                    guided_l2: pair.guided.relative_l2,
                    guided_r2: pair.guided.r2_score,
                    baseline_l2: pair.baseline.relative_l2,
                    baseline_r2: pair.baseline.r2_score,
                });
            }
            Err(e) => statuses.push(RealizationStatus {
                index: *index,
                field_seed: seeds[*index],
                ok: false,
                error: Some(e.to_string()),
            }),
        }
    }
    if raw.is_empty() {
        return Err(GfError::invalid("ensemble", "every realization failed"));
    }

    let collect = |f: fn(&RealizationMetrics) -> f64| -> Vec<f64> { raw.iter().map(f).collect() };
    let (g_l2_mean, g_l2_var) = mean_var(&collect(|m| m.guided_l2));
    let (g_r2_mean, g_r2_var) = mean_var(&collect(|m| m.guided_r2));
    let (b_l2_mean, b_l2_var) = mean_var(&collect(|m| m.baseline_l2));
    let (b_r2_mean, b_r2_var) = mean_var(&collect(|m| m.baseline_r2));

    let outcome = EnsembleOutcome {
        scenario_id: spec.id.clone(),
        n_requested: seeds.len(),
        n_succeeded: raw.len(),
        guided: EnsembleStats {
            mean_relative_l2: g_l2_mean,
            var_relative_l2: g_l2_var,
            mean_r2: g_r2_mean,
            var_r2: g_r2_var,
        },
        baseline: EnsembleStats {
            mean_relative_l2: b_l2_mean,
            var_relative_l2: b_l2_var,
            mean_r2: b_r2_mean,
            var_r2: b_r2_var,
        },
        raw,
        statuses,
    };

    if let Some(dir) = out_dir {
        write_json(dir, "ensemble_metrics.json", &outcome)?;
        let mut csv = String::from("index,field_seed,model,relative_l2,r2_score\n");
        for m in &outcome.raw {
            use std::fmt::Write as _;
            let _ = writeln!(csv, "{},{},guided,{},{}", m.index, m.field_seed, m.guided_l2, m.guided_r2);
            let _ = writeln!(csv, "{},{},baseline,{},{}", m.index, m.field_seed, m.baseline_l2, m.baseline_r2);
        }
        write_text(dir, "ensemble_raw.csv", &csv)?;
    }
    Ok(outcome)
}

/// Default seed list for an ensemble: `field_seed + 0..n`.
pub fn default_ensemble_seeds(spec: &ScenarioSpec) -> Vec<u64> {
    (0..spec.n_realizations as u64)
        .map(|i| spec.field_seed.wrapping_add(i))
        .collect()
}
