//! Experiment configuration, scenario catalog and artifact emission.
//!
//! A scenario reads an [`ExperimentConfig`] (TOML, unknown keys rejected)
//! and writes into its output directory:
//!
//! - `run.csv`: one row per step, columns as listed by [`csv_header`];
//! - `summary.json`: the scenario report;
//! - `weights_initial.txt` and `weights_final.txt`: weight snapshots;
//! - `config.toml`: the effective configuration;
//! - SVG plots of tracking, error norms, weight norms, `V` and regions.
//!
//! Multi-run scenarios put each run in its own subdirectory. A run that
//! diverges still writes the rows produced so far, plus a `FAILED` marker
//! holding the reason.
//!
//! Every trace metric of a [`SummaryReport`] is a function of `run.csv`
//! alone ([`summarize`]); the term-recovery errors additionally read the two
//! weight snapshots.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::{
    collect_dataset, prefit_output_weights, ControllerKind, ControllerSpec, IdentificationLoop, LoopSetup, PdGains,
    RunLog, StepRecord,
};
use crate::estimation::{KalmanTuning, KinematicKalman};
use crate::learner::{classify_region, dead_zone_gate, nu0_from_samples, HyperParams, LearningRates, OPERATING_BAND_FACTOR};
use crate::network::{Activation, HiddenSizes, InitSpec, NetworkBundle};
use crate::plant::{excitation_reference, ground_truth_terms, ExcitationSpec, PlantModel};
use crate::plot::LinePlot;
use crate::residuals::ModifiedErrorFilter;
use crate::{fmt_f64, Error, Result};

/// Environment variable that, when set, is prepended to relative output
/// directories.
pub const OUTPUT_ROOT_ENV: &str = "NNIDENT_OUTPUT_ROOT";

/// Share of the run used for the first and last RMS windows.
pub const WINDOW_FRACTION: f64 = 0.05;

/// Share of the run, counted from the end, treated as post-transient.
pub const LATE_FRACTION: f64 = 0.5;

/// Tolerance on the relative pole error of the first-order demo.
pub const POLE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Identification,
    AlphaSweep,
    DeadzoneAblation,
    Compare,
    FirstOrderDemo,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Identification => "identification",
            Scenario::AlphaSweep => "alpha_sweep",
            Scenario::DeadzoneAblation => "deadzone_ablation",
            Scenario::Compare => "compare",
            Scenario::FirstOrderDemo => "first_order_demo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantPreset {
    #[default]
    TwoLink,
    ThreeDof,
}

/// A preset plant, or a fully specified one under `[plant.model]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSection {
    pub preset: PlantPreset,
    pub model: Option<PlantModel>,
}

impl PlantSection {
    pub fn build(&self) -> PlantModel {
        match (&self.model, self.preset) {
            (Some(m), _) => m.clone(),
            (None, PlantPreset::TwoLink) => PlantModel::two_link(),
            (None, PlantPreset::ThreeDof) => PlantModel::three_dof(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub inertia_hidden: usize,
    pub coriolis_hidden: usize,
    pub gravity_hidden: usize,
    pub activation: Activation,
    /// Layer weights start uniform in `±init_scale/√fan_in`.
    pub init_scale: f64,
    /// Defaults to the top-level seed.
    pub init_seed: Option<u64>,
    /// `M̂` at the start pose; defaults to half the upper inertia bound.
    pub inertia_diagonal: Option<f64>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            inertia_hidden: 8,
            coriolis_hidden: 8,
            gravity_hidden: 8,
            activation: Activation::Tanh,
            init_scale: 0.1,
            init_seed: None,
            inertia_diagonal: None,
        }
    }
}

/// Validation grid for the per-term recovery errors: a regular grid over
/// the reference's position envelope times a regular grid over
/// `±` its velocity bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSection {
    pub points_per_joint: usize,
    pub velocity_points: usize,
}

impl Default for ValidationSection {
    fn default() -> Self {
        Self { points_per_joint: 7, velocity_points: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    #[default]
    Alpha,
    Gamma,
    Nu0,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Gamma => "gamma",
            SweepParam::Nu0 => "nu0",
        }
    }

    fn apply(self, hp: &mut HyperParams, value: f64) {
        match self {
            SweepParam::Alpha => hp.alpha = value,
            SweepParam::Gamma => hp.gamma = value,
            SweepParam::Nu0 => hp.nu0 = value,
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "gamma" => Ok(SweepParam::Gamma),
            "nu0" => Ok(SweepParam::Nu0),
            other => Err(Error::config(format!("unknown sweep parameter '{other}' (expected alpha, gamma or nu0)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { param: SweepParam::Alpha, values: vec![1.0, 5.0, 20.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    /// Length of the logged PD dataset used for the batch pre-fit, s.
    pub prefit_duration: f64,
    /// Ridge weight relative to the largest diagonal of the normal matrix.
    pub ridge: f64,
    /// Outer-loop gains of the inverse-dynamics controller (acceleration
    /// units). When absent every joint gets the critically damped pair for
    /// `nnidc_bandwidth`.
    pub nnidc_gains: Option<PdGains>,
    /// rad/s.
    pub nnidc_bandwidth: f64,
    /// Keep adapting the networks during the comparison runs.
    pub online_learning: bool,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            prefit_duration: 60.0,
            ridge: 1e-10,
            nnidc_gains: None,
            nnidc_bandwidth: 10.0,
            online_learning: true,
        }
    }
}

impl CompareSection {
    pub fn nnidc_gains(&self, dof: usize) -> PdGains {
        self.nnidc_gains.clone().unwrap_or_else(|| {
            let w = self.nnidc_bandwidth;
            PdGains::uniform(dof, w * w, 2.0 * w)
        })
    }
}

/// Scalar plant `ẋ = -p x + b u` whose pole `p` is identified online.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirstOrderSection {
    pub pole: f64,
    pub input_gain: f64,
    pub initial_pole: f64,
    pub rate: f64,
    pub nu0: f64,
}

impl Default for FirstOrderSection {
    fn default() -> Self {
        Self {
            pole: 2.0,
            input_gain: 1.0,
            initial_pole: 0.5,
            rate: 20.0,
            nu0: 1e-3,
        }
    }
}

/// Complete description of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// s.
    pub duration: f64,
    pub seed: u64,
    /// Position-measurement noise standard deviation, rad.
    pub noise_std: f64,
    pub output_dir: PathBuf,
    pub region_window: usize,
    pub plant: PlantSection,
    pub network: NetworkSection,
    pub learner: HyperParams,
    pub kalman: KalmanTuning,
    pub controller: ControllerSpec,
    /// Defaults to [`ExcitationSpec::default_for`] the plant's joint count.
    pub reference: Option<ExcitationSpec>,
    pub validation: ValidationSection,
    pub sweep: SweepSection,
    pub compare: CompareSection,
    pub first_order: FirstOrderSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Identification,
            duration: 60.0,
            seed: 1,
            noise_std: 0.0,
            output_dir: PathBuf::from("output"),
            region_window: 1000,
            plant: PlantSection::default(),
            network: NetworkSection::default(),
            learner: HyperParams::default(),
            kalman: KalmanTuning {
                jerk_density: 1e6,
                measurement_variance: 1e-14,
                initial_variance: [1e-4, 10.0, 1000.0],
            },
            controller: ControllerSpec {
                kind: ControllerKind::Pd,
                gains: PdGains { kp: vec![40.0, 10.0], kd: vec![4.0, 0.8] },
            },
            reference: None,
            validation: ValidationSection::default(),
            sweep: SweepSection::default(),
            compare: CompareSection::default(),
            first_order: FirstOrderSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn plant_model(&self) -> PlantModel {
        self.plant.build()
    }

    pub fn reference_spec(&self) -> ExcitationSpec {
        self.reference.clone().unwrap_or_else(|| ExcitationSpec::default_for(self.plant_model().dof()))
    }

    pub fn validate(&self) -> Result<()> {
        let plant = self.plant_model();
        plant.validate()?;
        let n = plant.dof();
        crate::learner::validate_hyperparams(&self.learner).map_err(|r| Error::config(r.to_string()))?;
        self.kalman.validate()?;
        self.controller.gains.validate(n)?;
        let reference = self.reference_spec();
        if reference.dof() != n {
            return Err(Error::config(format!("reference has {} joints, plant has {n}", reference.dof())));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::config("duration must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        let net = &self.network;
        if net.inertia_hidden == 0 || net.coriolis_hidden == 0 || net.gravity_hidden == 0 {
            return Err(Error::config("hidden layer widths must be at least 1"));
        }
        if !(net.init_scale >= 0.0 && net.init_scale.is_finite()) {
            return Err(Error::config("network.init_scale must be non-negative"));
        }
        if let Some(d) = net.inertia_diagonal {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::config("network.inertia_diagonal must be positive"));
            }
        }
        if self.validation.points_per_joint < 2 || self.validation.velocity_points < 1 {
            return Err(Error::config("validation grid needs at least 2 positions and 1 velocity per joint"));
        }
        if self.sweep.values.is_empty() || self.sweep.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("sweep.values must be a non-empty list of finite numbers"));
        }
        if self.scenario == Scenario::AlphaSweep {
            for &v in &self.sweep.values {
                let mut hp = self.learner;
                self.sweep.param.apply(&mut hp, v);
                crate::learner::validate_hyperparams(&hp)
                    .map_err(|r| Error::config(format!("sweep value {} = {v}: {r}", self.sweep.param.name())))?;
            }
        }
        let cmp = &self.compare;
        if !(cmp.prefit_duration > 0.0 && cmp.prefit_duration.is_finite()) {
            return Err(Error::config("compare.prefit_duration must be positive"));
        }
        if !(cmp.ridge >= 0.0 && cmp.ridge.is_finite()) {
            return Err(Error::config("compare.ridge must be non-negative"));
        }
        if !(cmp.nnidc_bandwidth > 0.0 && cmp.nnidc_bandwidth.is_finite()) {
            return Err(Error::config("compare.nnidc_bandwidth must be positive"));
        }
        cmp.nnidc_gains(n).validate(n)?;
        let fo = &self.first_order;
        if [fo.pole, fo.input_gain, fo.rate].iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || !(fo.nu0 >= 0.0 && fo.nu0.is_finite())
            || !fo.initial_pole.is_finite()
        {
            return Err(Error::config("first_order: pole, input_gain and rate must be positive, nu0 non-negative"));
        }
        Ok(())
    }

    pub fn initial_networks(&self) -> Result<NetworkBundle> {
        let n = self.plant_model().dof();
        let net = &self.network;
        let q0 = excitation_reference(0.0, &self.reference_spec()).q;
        NetworkBundle::initialize(
            n,
            HiddenSizes {
                inertia: net.inertia_hidden,
                coriolis: net.coriolis_hidden,
                gravity: net.gravity_hidden,
            },
            net.activation,
            &InitSpec {
                seed: net.init_seed.unwrap_or(self.seed),
                scale: net.init_scale,
                inertia_diagonal: net.inertia_diagonal.unwrap_or(0.5 * self.learner.inertia_band.upper),
            },
            &q0,
        )
    }

    pub fn loop_setup(&self) -> LoopSetup {
        LoopSetup {
            reference: self.reference_spec(),
            hp: self.learner,
            kalman: self.kalman,
            controller: self.controller.clone(),
            duration: self.duration,
            noise_std: self.noise_std,
            seed: self.seed,
            theta_ref: None,
            region_window: self.region_window,
        }
    }

    /// `output_dir`, under `root` when it is relative and a root is given.
    pub fn resolve_output_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Column names of `run.csv` for `dof` joints, in file order. Joint
/// columns are suffixed `_0 .. _{dof-1}`; flags are written as 0/1 and the
/// region as its code 1–4.
pub fn csv_header(dof: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for name in [
        "q", "qdot", "qddot", "q_ref", "qdot_ref", "qddot_ref", "q_meas", "q_f", "qdot_f", "qddot_f", "tau", "e1",
    ] {
        h.extend((0..dof).map(|i| format!("{name}_{i}")));
    }
    for name in [
        "e2_norm",
        "e3_norm",
        "e4_norm",
        "eps_norm",
        "e_mod_norm",
        "gate",
        "weights_changed",
        "step_size",
        "v",
        "dv",
        "region",
        "band_penalty",
        "m_hidden_norm",
        "m_output_norm",
        "c_hidden_norm",
        "c_output_norm",
        "g_hidden_norm",
        "g_output_norm",
        "fallback",
    ] {
        h.push(name.to_string());
    }
    h
}

const BLOCK_COLUMNS: [&str; 6] = [
    "m_hidden_norm",
    "m_output_norm",
    "c_hidden_norm",
    "c_output_norm",
    "g_hidden_norm",
    "g_output_norm",
];

/// The per-step log in column form; the in-memory image of `run.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl RunTable {
    pub fn from_records(dof: usize, records: &[StepRecord]) -> Self {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let rows = records
            .iter()
            .map(|r| {
                let mut row = vec![r.t];
                for v in [
                    &r.q,
                    &r.qdot,
                    &r.qddot,
                    &r.reference.q,
                    &r.reference.qdot,
                    &r.reference.qddot,
                    &r.q_meas,
                    &r.filtered.q,
                    &r.filtered.qdot,
                    &r.filtered.qddot,
                    &r.tau,
                    &r.e1,
                ] {
                    row.extend(v.iter());
                }
                row.extend([
                    r.e2.norm(),
                    r.e3.norm(),
                    r.e4.norm(),
                    r.eps_norm,
                    r.e_mod_norm,
                    flag(r.gate),
                    flag(r.weights_changed),
                    r.step_size,
                    r.v,
                    r.dv,
                    f64::from(r.region.code()),
                    r.band_penalty,
                ]);
                for (h, o) in r.block_norms {
                    row.extend([h, o]);
                }
                row.push(flag(r.fallback));
                row
            })
            .collect();
        Self { header: csv_header(dof), rows }
    }

    pub fn dof(&self) -> usize {
        self.header.iter().filter(|h| h.starts_with("tau_")).count()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("run table has no column '{name}'")))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Per-step vectors from the columns `{prefix}_0 .. {prefix}_{dof-1}`.
    pub fn joint_columns(&self, prefix: &str) -> Result<Vec<Vec<f64>>> {
        (0..self.dof()).map(|i| self.column(&format!("{prefix}_{i}"))).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|&v| fmt_f64(v)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("unparsable value '{v}' in run.csv"))))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != header.len() {
                return Err(Error::Format("run.csv row length does not match the header".into()));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermErrors {
    /// Mean `‖M̂ − M‖_F` over the grid.
    pub mass: f64,
    /// Mean `‖Ĉ − C‖_F`.
    pub coriolis: f64,
    /// Mean `‖Ĝ − G‖`.
    pub gravity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub initial: TermErrors,
    #[serde(rename = "final")]
    pub last: TermErrors,
}

impl Recovery {
    /// Initial over final error for M, C and G.
    pub fn improvement(&self) -> [f64; 3] {
        [
            self.initial.mass / self.last.mass,
            self.initial.coriolis / self.last.coriolis,
            self.initial.gravity / self.last.gravity,
        ]
    }
}

/// Scalar metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub steps: usize,
    /// RMS of `‖e1‖` over the first and last [`WINDOW_FRACTION`] of steps.
    pub first_window_rms_e1: f64,
    pub last_window_rms_e1: f64,
    /// First-window over last-window RMS.
    pub e1_reduction: f64,
    /// `sup ‖e_mod‖` over the last [`LATE_FRACTION`] of steps.
    pub sup_e_mod_late: f64,
    /// `γ ν0 / α`.
    pub dead_zone_radius: f64,
    /// `3 γ ν0 / α`.
    pub operating_bound: f64,
    pub gate_active_fraction: f64,
    /// Share of adapting steps with `dV < 0`; absent when no step adapted.
    pub dv_negative_fraction: Option<f64>,
    /// Steps inside the dead zone that still changed the weights.
    pub frozen_step_violations: usize,
    /// First time `‖e_mod‖` falls back below `2 γ ν0 / α` after exceeding
    /// it; zero if it never exceeds it, absent if it never comes back.
    pub time_to_threshold: Option<f64>,
    /// Sum of per-step weight change norms.
    pub weight_total_variation: f64,
    /// Sum over the six block norms of their variance over the late window.
    pub late_weight_variance: f64,
    pub tracking_rms: Vec<f64>,
    pub effort_rms: Vec<f64>,
    /// `Σ_k ‖τ_k − τ_{k-1}‖_1`.
    pub effort_total_variation: f64,
    pub fallback_fraction: f64,
    /// Share of steps in regions I–IV.
    pub region_occupancy: [f64; 4],
    pub recovery: Option<Recovery>,
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64
}

/// Trace metrics of a run from its table alone; `recovery` is left empty.
pub fn summarize(table: &RunTable, hp: &HyperParams) -> Result<SummaryReport> {
    let n_rows = table.len();
    if n_rows == 0 {
        return Err(Error::Format("cannot summarize an empty run".into()));
    }
    let t = table.column("t")?;
    let e1 = table.joint_columns("e1")?;
    let e1_norm: Vec<f64> = (0..n_rows)
        .map(|k| e1.iter().map(|c| c[k] * c[k]).sum::<f64>().sqrt())
        .collect();
    let w = ((WINDOW_FRACTION * n_rows as f64).round() as usize).max(1);
    let first = rms(&e1_norm[..w]);
    let last = rms(&e1_norm[n_rows - w..]);
    let late = n_rows - ((LATE_FRACTION * n_rows as f64).round() as usize).max(1);

    let e_mod = table.column("e_mod_norm")?;
    let gate = table.column("gate")?;
    let changed = table.column("weights_changed")?;
    let dv = table.column("dv")?;
    let radius = hp.dead_zone_radius();
    let active: Vec<usize> = (0..n_rows).filter(|&k| gate[k] != 0.0).collect();
    let dv_negative_fraction =
        (!active.is_empty()).then(|| active.iter().filter(|&&k| dv[k] < 0.0).count() as f64 / active.len() as f64);
    let frozen_step_violations = (0..n_rows).filter(|&k| e_mod[k] < radius && changed[k] != 0.0).count();

    let threshold = 2.0 * radius;
    let mut exceeded = false;
    let mut time_to_threshold = None;
    for k in 0..n_rows {
        if e_mod[k] >= threshold {
            exceeded = true;
        } else if exceeded {
            time_to_threshold = Some(t[k]);
            break;
        }
    }
    if !exceeded {
        time_to_threshold = Some(0.0);
    }

    let mut late_weight_variance = 0.0;
    for name in BLOCK_COLUMNS {
        late_weight_variance += variance(&table.column(name)?[late..]);
    }

    let q = table.joint_columns("q")?;
    let q_ref = table.joint_columns("q_ref")?;
    let tau = table.joint_columns("tau")?;
    let tracking_rms = q
        .iter()
        .zip(&q_ref)
        .map(|(a, b)| rms(&a.iter().zip(b).map(|(x, y)| y - x).collect::<Vec<_>>()))
        .collect();
    let effort_rms = tau.iter().map(|c| rms(c)).collect();
    let effort_total_variation = tau
        .iter()
        .map(|c| c.windows(2).map(|p| (p[1] - p[0]).abs()).sum::<f64>())
        .sum();

    let region = table.column("region")?;
    let mut counts = [0usize; 4];
    for r in &region {
        counts[(*r as usize).clamp(1, 4) - 1] += 1;
    }
    let region_occupancy = counts.map(|c| c as f64 / n_rows as f64);

    Ok(SummaryReport {
        steps: n_rows,
        first_window_rms_e1: first,
        last_window_rms_e1: last,
        e1_reduction: first / last,
        sup_e_mod_late: e_mod[late..].iter().copied().fold(0.0, f64::max),
        dead_zone_radius: radius,
        operating_bound: OPERATING_BAND_FACTOR * radius,
        gate_active_fraction: active.len() as f64 / n_rows as f64,
        dv_negative_fraction,
        frozen_step_violations,
        time_to_threshold,
        weight_total_variation: table.column("step_size")?.iter().sum(),
        late_weight_variance,
        tracking_rms,
        effort_rms,
        effort_total_variation,
        fallback_fraction: table.column("fallback")?.iter().sum::<f64>() / n_rows as f64,
        region_occupancy,
        recovery: None,
    })
}

/// Validation points `(q, q̇)` covering the reference's workspace.
pub fn validation_grid(reference: &ExcitationSpec, section: &ValidationSection) -> Vec<(DVector<f64>, DVector<f64>)> {
    let env = reference.envelope();
    let vmax: Vec<f64> = reference
        .joints
        .iter()
        .map(|j| {
            j.harmonics
                .iter()
                .map(|h| (h.amplitude * 2.0 * std::f64::consts::PI * h.frequency).abs())
                .sum()
        })
        .collect();
    let n = env.len();
    let lin = |lo: f64, hi: f64, m: usize, i: usize| if m == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * i as f64 / (m - 1) as f64 };
    let np = section.points_per_joint;
    let nv = section.velocity_points;
    let mut out = Vec::new();
    let total_q = np.pow(n as u32);
    let total_v = nv.pow(n as u32);
    for a in 0..total_q {
        let q = DVector::from_fn(n, |i, _| lin(env[i].0, env[i].1, np, (a / np.pow(i as u32)) % np));
        for b in 0..total_v {
            let qd = DVector::from_fn(n, |i, _| lin(-vmax[i], vmax[i], nv, (b / nv.pow(i as u32)) % nv));
            out.push((q.clone(), qd));
        }
    }
    out
}

/// Mean per-term estimation errors of `nets` against the plant on `grid`.
pub fn term_errors(plant: &PlantModel, nets: &NetworkBundle, grid: &[(DVector<f64>, DVector<f64>)]) -> Result<TermErrors> {
    let mut e = TermErrors { mass: 0.0, coriolis: 0.0, gravity: 0.0 };
    for (q, qd) in grid {
        let truth = ground_truth_terms(plant, q, qd)?;
        let est = nets.assemble_terms(q, qd)?;
        e.mass += (&est.mass - &truth.mass).norm();
        e.coriolis += (&est.coriolis - &truth.coriolis).norm();
        e.gravity += (&est.gravity - &truth.gravity).norm();
    }
    let k = grid.len().max(1) as f64;
    Ok(TermErrors { mass: e.mass / k, coriolis: e.coriolis / k, gravity: e.gravity / k })
}

/// Summary of a run directory written by [`run_scenario`], recomputed from
/// its `run.csv` and weight snapshots.
pub fn summarize_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<SummaryReport> {
    let table = RunTable::read_csv(&dir.join("run.csv"))?;
    let hp = run_hyperparams(dir, cfg)?;
    let mut report = summarize(&table, &hp)?;
    let (init, last) = (dir.join("weights_initial.txt"), dir.join("weights_final.txt"));
    if init.exists() && last.exists() {
        report.recovery = Some(recovery(cfg, &NetworkBundle::load(&init)?, &NetworkBundle::load(&last)?)?);
    }
    Ok(report)
}

fn run_hyperparams(dir: &Path, cfg: &ExperimentConfig) -> Result<HyperParams> {
    let local = dir.join("config.toml");
    if local.exists() {
        let text = fs::read_to_string(&local)?;
        let c: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        Ok(c.learner)
    } else {
        Ok(cfg.learner)
    }
}

fn recovery(cfg: &ExperimentConfig, initial: &NetworkBundle, last: &NetworkBundle) -> Result<Recovery> {
    let plant = cfg.plant_model();
    let grid = validation_grid(&cfg.reference_spec(), &cfg.validation);
    Ok(Recovery {
        initial: term_errors(&plant, initial, &grid)?,
        last: term_errors(&plant, last, &grid)?,
    })
}

/// Outcome of running the loop to completion or to its first failure.
struct Drive {
    log: RunLog,
    failure: Option<Error>,
}

fn drive(plant: &PlantModel, nets: NetworkBundle, setup: &LoopSetup) -> Result<Drive> {
    let mut lp = IdentificationLoop::new(plant, nets, setup)?;
    let mut records = Vec::with_capacity(lp.n_steps());
    while !lp.is_done() {
        match lp.step() {
            Ok(r) => records.push(r),
            Err(e) => return Ok(Drive { log: lp.finish(records), failure: Some(e) }),
        }
    }
    Ok(Drive { log: lp.finish(records), failure: None })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn prepare_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let marker = dir.join("FAILED");
    if marker.exists() {
        fs::remove_file(marker)?;
    }
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(())
}

/// Writes one run's artifacts. On failure the partial CSV and the `FAILED`
/// marker are written and the failure is returned.
fn emit_run(dir: &Path, cfg: &ExperimentConfig, drive: Drive) -> Result<SummaryReport> {
    let plant = cfg.plant_model();
    let table = RunTable::from_records(plant.dof(), &drive.log.records);
    table.write_csv(&dir.join("run.csv"))?;
    drive.log.initial.save(&dir.join("weights_initial.txt"))?;
    if let Some(e) = drive.failure {
        fs::write(dir.join("FAILED"), format!("{e}\n"))?;
        return Err(e);
    }
    drive.log.nets.save(&dir.join("weights_final.txt"))?;
    let mut report = summarize(&table, &cfg.learner)?;
    report.recovery = Some(recovery(cfg, &drive.log.initial, &drive.log.nets)?);
    write_json(&dir.join("summary.json"), &report)?;
    plot_run(dir, &table, &cfg.learner)?;
    Ok(report)
}

fn plot_run(dir: &Path, table: &RunTable, hp: &HyperParams) -> Result<()> {
    let t = table.column("t")?;
    let mut tracking = LinePlot::new("Joint tracking", "t [s]", "q [rad]");
    for (i, (q, r)) in table.joint_columns("q")?.iter().zip(table.joint_columns("q_ref")?.iter()).enumerate() {
        tracking = tracking.line(&format!("q_{i}"), &t, q).dashed(&format!("q_ref_{i}"), &t, r);
    }
    fs::write(dir.join("tracking.svg"), tracking.to_svg())?;

    let e1 = table.joint_columns("e1")?;
    let e1_norm: Vec<f64> = (0..table.len())
        .map(|k| e1.iter().map(|c| c[k] * c[k]).sum::<f64>().sqrt())
        .collect();
    let radius = vec![hp.dead_zone_radius(); t.len()];
    let band = vec![OPERATING_BAND_FACTOR * hp.dead_zone_radius(); t.len()];
    let errors = LinePlot::new("Error norms", "t [s]", "norm")
        .log_y()
        .line("|e1|", &t, &e1_norm)
        .line("|e_mod|", &t, &table.column("e_mod_norm")?)
        .dashed("dead zone", &t, &radius)
        .dashed("3x dead zone", &t, &band);
    fs::write(dir.join("errors.svg"), errors.to_svg())?;

    let mut weights = LinePlot::new("Weight block norms", "t [s]", "Frobenius norm");
    for name in BLOCK_COLUMNS {
        weights = weights.line(name.trim_end_matches("_norm"), &t, &table.column(name)?);
    }
    fs::write(dir.join("weights.svg"), weights.to_svg())?;

    let v = LinePlot::new("Lyapunov candidate", "t [s]", "V").log_y().line("V", &t, &table.column("v")?);
    fs::write(dir.join("lyapunov.svg"), v.to_svg())?;

    let regions = LinePlot::new("Operating region (1-4)", "t [s]", "region").line("region", &t, &table.column("region")?);
    fs::write(dir.join("regions.svg"), regions.to_svg())?;
    Ok(())
}

/// Identification run with the post-hoc `θ*`: the loop is run once to
/// obtain the final weights, then replayed (bit-identically) with those
/// weights as the Lyapunov reference.
pub fn identification(cfg: &ExperimentConfig, out: &Path) -> Result<SummaryReport> {
    prepare_dir(out, cfg)?;
    let plant = cfg.plant_model();
    let nets = cfg.initial_networks()?;
    let mut setup = cfg.loop_setup();
    let first = drive(&plant, nets.clone(), &setup)?;
    if first.failure.is_some() {
        return emit_run(out, cfg, first);
    }
    setup.theta_ref = Some(first.log.nets.flatten());
    let second = drive(&plant, nets, &setup)?;
    emit_run(out, cfg, second)
}

fn single_pass(cfg: &ExperimentConfig, out: &Path, nets: NetworkBundle) -> Result<SummaryReport> {
    prepare_dir(out, cfg)?;
    let run = drive(&cfg.plant_model(), nets, &cfg.loop_setup())?;
    emit_run(out, cfg, run)
}

/// Runs `jobs` on scoped threads and returns their results in order.
fn parallel<T: Send>(jobs: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>) -> Vec<Result<T>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs.into_iter().map(|j| s.spawn(j)).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Format("worker thread panicked".into()))))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub time_to_threshold: Option<f64>,
    pub weight_total_variation: f64,
    pub sup_e_mod_late: f64,
    pub last_window_rms_e1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    /// Sorted by increasing value.
    pub rows: Vec<SweepRow>,
    pub time_to_threshold_non_increasing: bool,
    pub weight_variation_non_decreasing: bool,
}

/// One run per sweep value, same seed, each in `<param>_<value>/`, plus a
/// `sweep.csv` table.
pub fn parameter_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    prepare_dir(out, cfg)?;
    let nets = cfg.initial_networks()?;
    let mut values = cfg.sweep.values.clone();
    values.sort_by(f64::total_cmp);
    let param = cfg.sweep.param;
    let runs: Vec<(ExperimentConfig, PathBuf)> = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            param.apply(&mut c.learner, v);
            (c, out.join(format!("{}_{v}", param.name())))
        })
        .collect();
    let jobs = runs
        .iter()
        .map(|(c, dir)| {
            let nets = nets.clone();
            Box::new(move || single_pass(c, dir, nets)) as Box<dyn FnOnce() -> Result<SummaryReport> + Send + '_>
        })
        .collect();
    let reports = parallel(jobs).into_iter().collect::<Result<Vec<_>>>()?;
    let rows: Vec<SweepRow> = values
        .iter()
        .zip(&reports)
        .map(|(&value, r)| SweepRow {
            value,
            time_to_threshold: r.time_to_threshold,
            weight_total_variation: r.weight_total_variation,
            sup_e_mod_late: r.sup_e_mod_late,
            last_window_rms_e1: r.last_window_rms_e1,
        })
        .collect();
    let ttt = |r: &SweepRow| r.time_to_threshold.unwrap_or(f64::INFINITY);
    let report = SweepReport {
        param,
        time_to_threshold_non_increasing: rows.windows(2).all(|p| ttt(&p[1]) <= ttt(&p[0])),
        weight_variation_non_decreasing: rows
            .windows(2)
            .all(|p| p[1].weight_total_variation >= p[0].weight_total_variation),
        rows,
    };
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record([param.name(), "time_to_threshold", "weight_total_variation", "sup_e_mod_late", "last_window_rms_e1"])?;
    for r in &report.rows {
        w.write_record([
            fmt_f64(r.value),
            r.time_to_threshold.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.weight_total_variation),
            fmt_f64(r.sup_e_mod_late),
            fmt_f64(r.last_window_rms_e1),
        ])?;
    }
    w.flush()?;
    write_json(&out.join("summary.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dead_zone: SummaryReport,
    pub no_dead_zone: SummaryReport,
    pub ablation_variance_larger: bool,
}

/// The configured run next to the same run with `ν0 = 0`, in `dead_zone/`
/// and `no_dead_zone/`.
pub fn deadzone_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<AblationReport> {
    prepare_dir(out, cfg)?;
    let nets = cfg.initial_networks()?;
    let mut ablated = cfg.clone();
    ablated.learner.nu0 = 0.0;
    let (d1, d2) = (out.join("dead_zone"), out.join("no_dead_zone"));
    let (n1, n2) = (nets.clone(), nets);
    let jobs: Vec<Box<dyn FnOnce() -> Result<SummaryReport> + Send + '_>> =
        vec![Box::new(|| single_pass(cfg, &d1, n1)), Box::new(|| single_pass(&ablated, &d2, n2))];
    let mut results = parallel(jobs).into_iter();
    let dead_zone = results.next().expect("two jobs")?;
    let no_dead_zone = results.next().expect("two jobs")?;
    let report = AblationReport {
        ablation_variance_larger: no_dead_zone.late_weight_variance > dead_zone.late_weight_variance,
        dead_zone,
        no_dead_zone,
    };
    write_json(&out.join("summary.json"), &report)?;
    Ok(report)
}

/// Output weights fitted by ridge regression to a logged PD run over the
/// reference, hidden layers from the configured initialization.
pub fn warm_start(cfg: &ExperimentConfig) -> Result<NetworkBundle> {
    let plant = cfg.plant_model();
    let data = collect_dataset(
        &plant,
        &cfg.reference_spec(),
        &cfg.controller.gains,
        cfg.compare.prefit_duration,
        cfg.learner.dt,
    )?;
    prefit_output_weights(&cfg.initial_networks()?, &data, &cfg.learner, cfg.compare.ridge)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub pd: SummaryReport,
    pub nnidc: SummaryReport,
    /// Joints whose true gravity torque is nonzero somewhere on the grid.
    pub gravity_loaded_joints: Vec<usize>,
    /// NNIDC tracking RMS is no worse than PD on every gravity-loaded joint.
    pub nnidc_tracks_better: bool,
    pub pd_effort_variation_larger: bool,
}

/// PD-only and NNIDC runs from the same warm-started networks, reference
/// and seed, in `pd/` and `nnidc/`.
pub fn compare_controllers(cfg: &ExperimentConfig, out: &Path) -> Result<ComparisonReport> {
    prepare_dir(out, cfg)?;
    let warm = warm_start(cfg)?;
    warm.save(&out.join("weights_prefit.txt"))?;
    let mut pd = cfg.clone();
    pd.controller.kind = ControllerKind::Pd;
    let mut nnidc = cfg.clone();
    nnidc.controller = ControllerSpec {
        kind: ControllerKind::Nnidc,
        gains: cfg.compare.nnidc_gains(cfg.plant_model().dof()),
    };
    if !cfg.compare.online_learning {
        pd.learner.rates = LearningRates::uniform(0.0);
        nnidc.learner.rates = LearningRates::uniform(0.0);
    }
    let (d1, d2) = (out.join("pd"), out.join("nnidc"));
    let (w1, w2) = (warm.clone(), warm);
    let jobs: Vec<Box<dyn FnOnce() -> Result<SummaryReport> + Send + '_>> =
        vec![Box::new(|| single_pass(&pd, &d1, w1)), Box::new(|| single_pass(&nnidc, &d2, w2))];
    let mut results = parallel(jobs).into_iter();
    let pd = results.next().expect("two jobs")?;
    let nnidc = results.next().expect("two jobs")?;

    let plant = cfg.plant_model();
    let grid = validation_grid(&cfg.reference_spec(), &cfg.validation);
    let mut peak = vec![0.0_f64; plant.dof()];
    for (q, _) in &grid {
        for (p, g) in peak.iter_mut().zip(plant.gravity_vector(q).iter()) {
            *p = p.max(g.abs());
        }
    }
    let top = peak.iter().copied().fold(0.0, f64::max);
    let gravity_loaded_joints: Vec<usize> = (0..plant.dof()).filter(|&i| peak[i] > 1e-9 * top.max(1.0)).collect();
    let report = ComparisonReport {
        nnidc_tracks_better: gravity_loaded_joints.iter().all(|&i| nnidc.tracking_rms[i] <= pd.tracking_rms[i]),
        pd_effort_variation_larger: pd.effort_total_variation > nnidc.effort_total_variation,
        gravity_loaded_joints,
        pd,
        nnidc,
    };
    write_json(&out.join("summary.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nu0Calibration {
    /// 95th percentile of `‖ε‖`.
    pub nu0: f64,
    pub samples: usize,
}

/// Estimates `ν0` from the stacked error of the warm-started networks held
/// frozen over the configured run.
pub fn calibrate_nu0(cfg: &ExperimentConfig, out: &Path) -> Result<Nu0Calibration> {
    prepare_dir(out, cfg)?;
    let mut frozen = cfg.clone();
    frozen.learner.rates = LearningRates::uniform(0.0);
    let warm = warm_start(cfg)?;
    let run = drive(&frozen.plant_model(), warm, &frozen.loop_setup())?;
    if let Some(e) = run.failure {
        return Err(e);
    }
    let eps: Vec<f64> = run.log.records.iter().map(|r| r.eps_norm).collect();
    let nu0 = nu0_from_samples(&eps).ok_or_else(|| Error::Format("calibration run produced no samples".into()))?;
    let cal = Nu0Calibration { nu0, samples: eps.len() };
    write_json(&out.join("calibration.json"), &cal)?;
    Ok(cal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderReport {
    pub true_pole: f64,
    pub estimated_pole: f64,
    pub relative_error: f64,
    pub within_tolerance: bool,
}

/// Input applied to the first-order plant.
fn first_order_input(t: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI;
    (w * 0.2 * t).sin() + 0.5 * (w * 0.9 * t + 1.0).sin()
}

/// Online estimation of the pole of `ẋ = -p x + b u` with the same
/// filtered-error, dead-zone and gradient machinery as the manipulator
/// identifier, on a single scalar weight.
pub fn first_order_demo(cfg: &ExperimentConfig, out: &Path) -> Result<FirstOrderReport> {
    prepare_dir(out, cfg)?;
    let fo = &cfg.first_order;
    let hp = HyperParams { nu0: fo.nu0, ..cfg.learner };
    let dt = hp.dt;
    let filter = ModifiedErrorFilter::new(hp.alpha, dt)?;
    let mut kf = KinematicKalman::new(0.0, &cfg.kalman);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("finite std"));
    let f = |x: f64, u: f64| -fo.pole * x + fo.input_gain * u;

    let mut x = 0.0;
    let mut theta = fo.initial_pole;
    let mut e_mod = DVector::zeros(1);
    let mut u = first_order_input(0.0);
    let n_steps = (cfg.duration / dt).round() as usize;
    let mut w = csv::Writer::from_path(out.join("run.csv"))?;
    w.write_record(["t", "x", "u", "x_f", "xdot_f", "pole_estimate", "eps", "e_mod", "gate", "region"])?;
    for k in 1..=n_steps {
        let t = k as f64 * dt;
        let k1 = f(x, u);
        let k2 = f(x + 0.5 * dt * k1, u);
        let k3 = f(x + 0.5 * dt * k2, u);
        let k4 = f(x + dt * k3, u);
        x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let meas = x + noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
        kf.predict(dt);
        kf.update(meas);
        let (xf, xdf) = (kf.position(), kf.velocity());
        let eps = xdf - (-theta * xf + fo.input_gain * u);
        e_mod = filter.step(&e_mod, &DVector::from_element(1, eps));
        let gate = dead_zone_gate(&e_mod, &hp);
        if gate {
            theta -= dt * fo.rate * xf * eps;
        }
        if !theta.is_finite() {
            fs::write(out.join("FAILED"), "pole estimate became non-finite\n")?;
            return Err(Error::Divergence { step: k, t, reason: "pole estimate became non-finite".into() });
        }
        let region = classify_region(e_mod[0].abs(), &hp, false);
        w.write_record([
            fmt_f64(t),
            fmt_f64(x),
            fmt_f64(u),
            fmt_f64(xf),
            fmt_f64(xdf),
            fmt_f64(theta),
            fmt_f64(eps),
            fmt_f64(e_mod[0]),
            (gate as u8).to_string(),
            region.code().to_string(),
        ])?;
        u = first_order_input(t);
    }
    w.flush()?;
    let relative_error = (theta - fo.pole).abs() / fo.pole;
    let report = FirstOrderReport {
        true_pole: -fo.pole,
        estimated_pole: -theta,
        relative_error,
        within_tolerance: relative_error <= POLE_TOLERANCE,
    };
    write_json(&out.join("summary.json"), &report)?;
    let table = RunTable::read_csv(&out.join("run.csv"))?;
    let t = table.column("t")?;
    let truth = vec![-fo.pole; t.len()];
    let est: Vec<f64> = table.column("pole_estimate")?.iter().map(|p| -p).collect();
    let plot = LinePlot::new("First-order pole estimate", "t [s]", "pole")
        .line("estimate", &t, &est)
        .dashed("true pole", &t, &truth);
    fs::write(out.join("pole.svg"), plot.to_svg())?;
    Ok(report)
}

/// Report of any scenario, as written to the top-level `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum ScenarioReport {
    Identification(SummaryReport),
    AlphaSweep(SweepReport),
    DeadzoneAblation(AblationReport),
    Compare(ComparisonReport),
    FirstOrderDemo(FirstOrderReport),
}

pub fn run_scenario(cfg: &ExperimentConfig, out: &Path) -> Result<ScenarioReport> {
    cfg.validate()?;
    Ok(match cfg.scenario {
        Scenario::Identification => ScenarioReport::Identification(identification(cfg, out)?),
        Scenario::AlphaSweep => ScenarioReport::AlphaSweep(parameter_sweep(cfg, out)?),
        Scenario::DeadzoneAblation => ScenarioReport::DeadzoneAblation(deadzone_ablation(cfg, out)?),
        Scenario::Compare => ScenarioReport::Compare(compare_controllers(cfg, out)?),
        Scenario::FirstOrderDemo => ScenarioReport::FirstOrderDemo(first_order_demo(cfg, out)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn short(scenario: Scenario, duration: f64) -> ExperimentConfig {
        ExperimentConfig { scenario, duration, ..Default::default() }
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_file_means_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml_str("durration = 3.0"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("[learner]\nalpah = 3.0"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_hyperparameters_name_the_rule() {
        let err = ExperimentConfig::from_toml_str("[learner]\ngamma = 0.5").unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
        let err = ExperimentConfig::from_toml_str("[learner]\ngamma = 8.0").unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
    }

    #[test]
    fn sweep_values_are_validated_per_value() {
        let text = "scenario = \"alpha_sweep\"\n[sweep]\nvalues = [1.0, 5.0]";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
        let relaxed = format!("{text}\n[learner]\nenforce_gamma_le_alpha = false");
        assert!(ExperimentConfig::from_toml_str(&relaxed).is_ok());
    }

    #[test]
    fn gain_count_must_match_plant() {
        let text = "[plant]\npreset = \"three_dof\"";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
        let ok = format!("{text}\n[controller]\nkind = \"pd\"\nkp = [40.0, 40.0, 10.0]\nkd = [4.0, 4.0, 0.8]");
        assert!(ExperimentConfig::from_toml_str(&ok).is_ok());
    }

    #[test]
    fn output_root_applies_to_relative_dirs() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.resolve_output_dir(Some(Path::new("/r"))), PathBuf::from("/r/output"));
        assert_eq!(cfg.resolve_output_dir(None), PathBuf::from("output"));
        cfg.output_dir = PathBuf::from("/abs");
        assert_eq!(cfg.resolve_output_dir(Some(Path::new("/r"))), PathBuf::from("/abs"));
    }

    #[test]
    fn header_matches_row_width() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = short(Scenario::Identification, 0.05);
        identification(&cfg, dir.path()).unwrap();
        let table = RunTable::read_csv(&dir.path().join("run.csv")).unwrap();
        assert_eq!(table.header, csv_header(2));
        assert_eq!(table.len(), 50);
        assert_eq!(table.dof(), 2);
    }

    #[test]
    fn summary_is_recomputable_from_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = short(Scenario::Identification, 1.0);
        let report = identification(&cfg, dir.path()).unwrap();
        assert_eq!(summarize_dir(dir.path(), &cfg).unwrap(), report);
        let on_disk: SummaryReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(on_disk, report);
        for plot in ["tracking", "errors", "weights", "lyapunov", "regions"] {
            assert!(dir.path().join(format!("{plot}.svg")).exists());
        }
    }

    #[test]
    fn divergence_leaves_partial_csv_and_marker() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = short(Scenario::Identification, 2.0);
        cfg.learner.rates = LearningRates::uniform(1e6);
        let err = identification(&cfg, dir.path()).unwrap_err();
        let Error::Divergence { step, .. } = err else { panic!("{err}") };
        let table = RunTable::read_csv(&dir.path().join("run.csv")).unwrap();
        assert_eq!(table.len(), step - 1);
        assert!(fs::read_to_string(dir.path().join("FAILED")).unwrap().contains("diverged"));
        assert!(!dir.path().join("summary.json").exists());
    }

    #[test]
    fn grid_spans_envelope() {
        let spec = ExcitationSpec::default_for(2);
        let grid = validation_grid(&spec, &ValidationSection { points_per_joint: 3, velocity_points: 2 });
        assert_eq!(grid.len(), 9 * 4);
        let env = spec.envelope();
        let lo = grid.iter().map(|(q, _)| q[1]).fold(f64::INFINITY, f64::min);
        let hi = grid.iter().map(|(q, _)| q[1]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), env[1]);
    }

    #[test]
    fn initial_networks_have_term_errors() {
        let cfg = ExperimentConfig::default();
        let nets = cfg.initial_networks().unwrap();
        let grid = validation_grid(&cfg.reference_spec(), &cfg.validation);
        let e = term_errors(&cfg.plant_model(), &nets, &grid).unwrap();
        assert!(e.mass > 0.0 && e.gravity > 0.0);
    }

    fn table_from(rows: Vec<Vec<f64>>) -> RunTable {
        RunTable { header: csv_header(1), rows }
    }

    fn row(t: f64, e1: f64, e_mod: f64, gate: bool, step: f64, dv: f64) -> Vec<f64> {
        let width = csv_header(1).len();
        let mut r = vec![0.0; width];
        let h = csv_header(1);
        let set = |r: &mut Vec<f64>, name: &str, v: f64| r[h.iter().position(|c| c == name).unwrap()] = v;
        set(&mut r, "t", t);
        set(&mut r, "e1_0", e1);
        set(&mut r, "e_mod_norm", e_mod);
        set(&mut r, "gate", if gate { 1.0 } else { 0.0 });
        set(&mut r, "weights_changed", if step > 0.0 { 1.0 } else { 0.0 });
        set(&mut r, "step_size", step);
        set(&mut r, "dv", dv);
        set(&mut r, "region", 4.0);
        r
    }

    #[test]
    fn summary_metrics_on_handmade_table() {
        let hp = HyperParams::default();
        let thr = 2.0 * hp.dead_zone_radius();
        let mut rows = Vec::new();
        for k in 0..40 {
            let t = k as f64 * 0.1;
            let e_mod = if (5..10).contains(&k) { 2.0 * thr } else { 0.5 * thr };
            let e1 = if k < 2 { 4.0 } else if k >= 38 { 0.5 } else { 1.0 };
            rows.push(row(t, e1, e_mod, e_mod >= hp.dead_zone_radius(), 0.25, if k % 4 == 0 { 1.0 } else { -1.0 }));
        }
        let s = summarize(&table_from(rows), &hp).unwrap();
        assert_eq!(s.steps, 40);
        assert_eq!(s.first_window_rms_e1, 4.0);
        assert_eq!(s.last_window_rms_e1, 0.5);
        assert_eq!(s.e1_reduction, 8.0);
        assert_eq!(s.time_to_threshold, Some(1.0));
        assert_eq!(s.weight_total_variation, 10.0);
        assert_eq!(s.gate_active_fraction, 1.0);
        assert_eq!(s.dv_negative_fraction, Some(0.75));
        assert_eq!(s.region_occupancy, [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn frozen_violations_are_counted() {
        let hp = HyperParams::default();
        let inside = 0.5 * hp.dead_zone_radius();
        let rows = vec![row(0.0, 1.0, inside, false, 0.0, 0.0), row(0.1, 1.0, inside, false, 1e-3, 0.0)];
        assert_eq!(summarize(&table_from(rows), &hp).unwrap().frozen_step_violations, 1);
    }

    #[test]
    fn first_order_demo_converges() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = short(Scenario::FirstOrderDemo, 20.0);
        let r = first_order_demo(&cfg, dir.path()).unwrap();
        assert!(r.within_tolerance, "{r:?}");
        assert_eq!(r.true_pole, -2.0);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 1..60)) {
            let width = csv_header(1).len();
            let rows: Vec<Vec<f64>> = values.chunks(1).map(|c| vec![c[0]; width]).collect();
            let table = table_from(rows);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("run.csv");
            table.write_csv(&path).unwrap();
            prop_assert_eq!(RunTable::read_csv(&path).unwrap(), table);
        }
    }
}
