//! Snapshot datasets and gradient training of the Koopman predictors.
//!
//! Each training sample is a window `x_k .. x_{k+h}` (with inputs
//! `u_k .. u_{k+h-1}` for actuated data). With the default horizon `h = 1` the
//! loss is the one-step objective
//!
//! ```text
//! L = α₁‖x_{k+1} − Cˣẑ_{k+1}‖₂ + α₂‖z_{k+1} − ẑ_{k+1}‖₂ + γ₁‖W‖₁ + γ₂‖W‖₂
//! ```
//!
//! averaged over the batch, where `ẑ_{k+1} = A z_k (+ B u_k)` and `W` collects
//! every trainable parameter (encoder, `A`, and `B` when it is learned).

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{gravity_torque, step_explicit, DisturbanceSpec, ManipulatorModel};
use crate::error::{check_dim, Error, Result};
use crate::koopman::{from_explicit, kron_batch, KoopmanModel, StateConvention, Variant};
use crate::lifting::{stack_rows, EncoderArchitecture, EncoderNetwork};

/// SplitMix64 finalizer; derives independent child seeds from a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Actuated,
    Unactuated,
}

/// One recorded trajectory: `w` states and, for actuated data, `w − 1` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub states: Vec<DVector<f64>>,
    pub inputs: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    fn columns(vectors: &[DVector<f64>]) -> DMatrix<f64> {
        let rows = vectors.first().map_or(0, |v| v.len());
        DMatrix::from_fn(rows, vectors.len(), |i, j| vectors[j][i])
    }

    /// Snapshot matrix `X = [x_1 … x_{w−1}]`.
    pub fn x(&self) -> DMatrix<f64> {
        Self::columns(&self.states[..self.states.len() - 1])
    }

    /// Shifted snapshot matrix `Y = [x_2 … x_w]`.
    pub fn y(&self) -> DMatrix<f64> {
        Self::columns(&self.states[1..])
    }

    pub fn u(&self) -> Option<DMatrix<f64>> {
        self.inputs.as_deref().map(Self::columns)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub kind: DatasetKind,
    pub convention: StateConvention,
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub master_seed: u64,
    /// Trajectories that diverged during generation and were re-sampled.
    pub resampled: usize,
    pub trajectories: Vec<Trajectory>,
}

/// Initial-state box and input excitation for data generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExcitationSpec {
    /// Joint positions are drawn uniformly from `q_center + [q_min, q_max]` (rad).
    pub q_min: f64,
    pub q_max: f64,
    /// Per-joint center of the position box; empty means zero.
    pub q_center: Vec<f64>,
    /// Joint velocities are drawn uniformly from `[−qd_max, qd_max]` (rad/s).
    pub qd_max: f64,
    /// Zero-order-hold torques uniform in `[−u_max, u_max]` (N·m).
    pub u_max: f64,
    /// Interval between torque re-samples (s).
    pub hold_time: f64,
    /// Add `G(q)` to the random torques so the arm does not simply fall;
    /// the recorded input is the total torque.
    pub gravity_compensation: bool,
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        ExcitationSpec {
            q_min: -std::f64::consts::PI,
            q_max: std::f64::consts::PI,
            q_center: Vec::new(),
            qd_max: 1.0,
            u_max: 5.0,
            hold_time: 0.1,
            gravity_compensation: false,
        }
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            kind: DatasetKind::Actuated,
            trajectories: 100,
            snapshots: 300,
            dt: 0.01,
            excitation: ExcitationSpec::default(),
            convention: StateConvention::Explicit,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub kind: DatasetKind,
    /// Trajectory count `p`.
    pub trajectories: usize,
    /// Snapshots per trajectory `w`.
    pub snapshots: usize,
    pub dt: f64,
    pub excitation: ExcitationSpec,
    pub convention: StateConvention,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories < 2 {
            return Err(Error::config("trajectories", "must be at least 2"));
        }
        if self.snapshots < 2 {
            return Err(Error::config("snapshots", "must be at least 2"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "must be positive"));
        }
        let e = &self.excitation;
        if !(e.q_min <= e.q_max) {
            return Err(Error::config("excitation.q_min", "must not exceed q_max"));
        }
        if !(e.qd_max >= 0.0 && e.u_max >= 0.0) {
            return Err(Error::config("excitation.u_max", "bounds must be non-negative"));
        }
        if !(e.hold_time > 0.0) {
            return Err(Error::config("excitation.hold_time", "must be positive"));
        }
        if e.q_center.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("excitation.q_center", "must be finite"));
        }
        Ok(())
    }
}

const MAX_RESAMPLES: u64 = 64;

fn simulate_trajectory(
    manip: &ManipulatorModel,
    cfg: &GenerationConfig,
    seed: u64,
) -> Result<(Vec<DVector<f64>>, Option<Vec<DVector<f64>>>)> {
    let n = manip.n;
    let e = &cfg.excitation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
    if !e.q_center.is_empty() {
        check_dim("excitation.q_center", n, e.q_center.len())?;
    }
    let center = |i: usize| e.q_center.get(i).copied().unwrap_or(0.0);
    let mut q = DVector::from_fn(n, |i, _| center(i) + sample(&mut rng, e.q_min, e.q_max));
    let mut qd = DVector::from_fn(n, |_, _| sample(&mut rng, -e.qd_max, e.qd_max));
    let actuated = cfg.kind == DatasetKind::Actuated;
    let hold_steps = ((e.hold_time / cfg.dt).round() as usize).max(1);
    let mut random = DVector::zeros(n);
    let mut states = Vec::with_capacity(cfg.snapshots);
    let mut inputs = Vec::with_capacity(cfg.snapshots.saturating_sub(1));
    let none = DisturbanceSpec::none();
    states.push(stack_state(&q, &qd));
    for k in 0..cfg.snapshots - 1 {
        if actuated && k % hold_steps == 0 {
            random = DVector::from_fn(n, |_, _| sample(&mut rng, -e.u_max, e.u_max));
        }
        let tau = if actuated && e.gravity_compensation {
            &random + gravity_torque(manip, &q)?
        } else if actuated {
            random.clone()
        } else {
            DVector::zeros(n)
        };
        let (qn, qdn) = step_explicit(manip, &q, &qd, &tau, &none, k as f64 * cfg.dt, cfg.dt)?;
        q = qn;
        qd = qdn;
        states.push(stack_state(&q, &qd));
        if actuated {
            inputs.push(tau.clone());
        }
    }
    Ok((states, actuated.then_some(inputs)))
}

fn stack_state(q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
    let n = q.len();
    let mut x = DVector::zeros(2 * n);
    x.rows_mut(0, n).copy_from(q);
    x.rows_mut(n, n).copy_from(qd);
    x
}

/// Simulates `p` random trajectories of `w` snapshots each.
///
/// Trajectory `i` draws from a seed derived from `(seed, i)`, so the result is
/// independent of thread scheduling. Diverged trajectories are re-drawn from a
/// fresh derived seed and counted in `resampled`.
pub fn generate_dataset(manip: &ManipulatorModel, cfg: &GenerationConfig) -> Result<TrajectoryDataset> {
    generate_dataset_range(manip, cfg, 0)
}

/// As [`generate_dataset`], with trajectory streams starting at `first_stream`
/// so disjoint sets (e.g. train and test) can come from one master seed.
pub fn generate_dataset_range(
    manip: &ManipulatorModel,
    cfg: &GenerationConfig,
    first_stream: u64,
) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let results: Vec<Result<(Trajectory, usize)>> = (0..cfg.trajectories as u64)
        .into_par_iter()
        .map(|i| {
            let stream = derive_seed(cfg.seed, first_stream + i);
            for attempt in 0..MAX_RESAMPLES {
                let seed = derive_seed(stream, attempt);
                match simulate_trajectory(manip, cfg, seed) {
                    Ok((states, inputs)) => {
                        let states = from_explicit(&states, cfg.convention, manip)?;
                        return Ok((Trajectory { seed, states, inputs }, attempt as usize));
                    }
                    Err(Error::Divergence { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Training(format!("trajectory {i} diverged {MAX_RESAMPLES} times")))
        })
        .collect();
    let mut trajectories = Vec::with_capacity(results.len());
    let mut resampled = 0;
    for r in results {
        let (t, retries) = r?;
        resampled += retries;
        trajectories.push(t);
    }
    if resampled > 0 {
        warn!("{resampled} diverged trajectories were re-sampled");
    }
    Ok(TrajectoryDataset {
        kind: cfg.kind,
        convention: cfg.convention,
        n: manip.n,
        m: manip.n,
        dt: cfg.dt,
        master_seed: cfg.seed,
        resampled,
        trajectories,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: DatasetKind,
    convention: StateConvention,
    n: usize,
    m: usize,
    dt: f64,
    p: usize,
    w: usize,
    master_seed: u64,
    resampled: usize,
    trajectories: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    seed: u64,
}

impl TrajectoryDataset {
    pub fn p(&self) -> usize {
        self.trajectories.len()
    }

    pub fn w(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.states.len())
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.w();
        if w < 2 {
            return Err(Error::config("w", "trajectories need at least 2 snapshots"));
        }
        for t in &self.trajectories {
            check_dim("trajectory length", w, t.states.len())?;
            for x in &t.states {
                check_dim("dataset state", 2 * self.n, x.len())?;
            }
            match (&t.inputs, self.kind) {
                (Some(u), DatasetKind::Actuated) => {
                    check_dim("trajectory inputs", w - 1, u.len())?;
                    for v in u {
                        check_dim("dataset input", self.m, v.len())?;
                    }
                }
                (None, DatasetKind::Unactuated) => {}
                _ => return Err(Error::config("kind", "input block does not match dataset kind")),
            }
        }
        Ok(())
    }

    /// Re-expresses every state in `convention`.
    pub fn to_convention(&self, convention: StateConvention, manip: &ManipulatorModel) -> Result<Self> {
        if convention == self.convention {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        out.convention = convention;
        for t in &mut out.trajectories {
            let explicit = crate::koopman::to_explicit(&t.states, self.convention, manip)?;
            t.states = from_explicit(&explicit, convention, manip)?;
        }
        Ok(out)
    }

    /// First `p` trajectories.
    pub fn truncated(&self, p: usize) -> Self {
        let mut out = self.clone();
        out.trajectories.truncate(p);
        out
    }

    fn header(&self) -> Vec<String> {
        let second = match self.convention {
            StateConvention::Momentum => "p",
            StateConvention::Explicit => "qd",
        };
        let mut h = vec!["t".to_string()];
        h.extend((1..=self.n).map(|i| format!("q{i}")));
        h.extend((1..=self.n).map(|i| format!("{second}{i}")));
        if self.kind == DatasetKind::Actuated {
            h.extend((1..=self.m).map(|i| format!("u{i}")));
        }
        h
    }

    /// Writes `manifest.json` and one CSV per trajectory into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let header = self.header();
        let mut entries = Vec::with_capacity(self.p());
        for (i, t) in self.trajectories.iter().enumerate() {
            let file = format!("traj_{i:05}.csv");
            let mut writer = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_path(dir.join(&file))?;
            writer.write_record(&header)?;
            for (k, x) in t.states.iter().enumerate() {
                let mut row = vec![fmt_f64(k as f64 * self.dt)];
                row.extend(x.iter().map(|v| fmt_f64(*v)));
                if let Some(inputs) = &t.inputs {
                    match inputs.get(k) {
                        Some(u) => row.extend(u.iter().map(|v| fmt_f64(*v))),
                        None => row.extend(std::iter::repeat_n(String::new(), self.m)),
                    }
                }
                writer.write_record(&row)?;
            }
            writer.flush()?;
            entries.push(ManifestEntry { file, seed: t.seed });
        }
        let manifest = Manifest {
            format_version: 1,
            kind: self.kind,
            convention: self.convention,
            n: self.n,
            m: self.m,
            dt: self.dt,
            p: self.p(),
            w: self.w(),
            master_seed: self.master_seed,
            resampled: self.resampled,
            trajectories: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let state_dim = 2 * manifest.n;
        let actuated = manifest.kind == DatasetKind::Actuated;
        let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
        for entry in &manifest.trajectories {
            let path: PathBuf = dir.join(&entry.file);
            let mut reader = csv::Reader::from_path(&path)?;
            let mut states = Vec::new();
            let mut inputs = Vec::new();
            for record in reader.records() {
                let record = record?;
                let parse = |s: &str| -> Result<f64> {
                    s.parse::<f64>()
                        .map_err(|_| Error::config(path.display().to_string(), format!("bad number `{s}`")))
                };
                let values: Vec<&str> = record.iter().collect();
                let expected = 1 + state_dim + if actuated { manifest.m } else { 0 };
                check_dim("dataset CSV columns", expected, values.len())?;
                let x: Result<Vec<f64>> = values[1..1 + state_dim].iter().map(|s| parse(s)).collect();
                states.push(DVector::from_vec(x?));
                if actuated && !values[1 + state_dim].is_empty() {
                    let u: Result<Vec<f64>> = values[1 + state_dim..].iter().map(|s| parse(s)).collect();
                    inputs.push(DVector::from_vec(u?));
                }
            }
            trajectories.push(Trajectory {
                seed: entry.seed,
                states,
                inputs: actuated.then_some(inputs),
            });
        }
        let ds = TrajectoryDataset {
            kind: manifest.kind,
            convention: manifest.convention,
            n: manifest.n,
            m: manifest.m,
            dt: manifest.dt,
            master_seed: manifest.master_seed,
            resampled: manifest.resampled,
            trajectories,
        };
        ds.validate()?;
        check_dim("trajectory count", manifest.p, ds.p())?;
        Ok(ds)
    }
}

/// Shortest decimal representation that round-trips to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Initialization of the lifted state matrix before gradient descent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixInit {
    /// `A = I`, learned `B = 0`.
    Identity,
    /// Ridge least-squares fit of `A` (and learned `B`) on the lifted
    /// training snapshots of the freshly initialized encoder.
    #[default]
    LeastSquares,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha_pred: f64,
    pub alpha_lift: f64,
    pub gamma_l1: f64,
    pub gamma_l2: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub architecture: EncoderArchitecture,
    /// Prediction horizon of the loss; 1 is the one-step objective.
    pub horizon: usize,
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping early.
    pub patience: usize,
    pub init: MatrixInit,
    /// Upper bound on validation windows evaluated per epoch (evenly strided).
    pub max_validation_windows: usize,
    /// Scaling of the physical-state residuals before their norms are taken.
    pub residual_scaling: ResidualScaling,
}

/// How physical-state residuals are weighted in the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualScaling {
    /// Raw residuals.
    None,
    /// Each coordinate divided by its spread in the training data.
    Standardize,
    /// Residuals whitened with the training-state covariance, `‖L⁻¹r‖` for
    /// `Σ = LLᵀ`. Correlated coordinates (the momenta of a chain) are then
    /// weighted along the directions the data actually varies in.
    Whiten,
}

/// Linear map `W` applied to physical-state residuals, `‖W r‖`.
pub fn residual_metric<'a>(
    model: &KoopmanModel,
    scaling: ResidualScaling,
    states: impl IntoIterator<Item = &'a DVector<f64>>,
) -> DMatrix<f64> {
    let sd = model.state_dim();
    let standardized = || DMatrix::from_diagonal(&DVector::from_iterator(sd, model.encoder.input_std.iter().map(|s| 1.0 / s)));
    match scaling {
        ResidualScaling::None => DMatrix::identity(sd, sd),
        ResidualScaling::Standardize => standardized(),
        ResidualScaling::Whiten => {
            let mut count = 0usize;
            let mut sum = DVector::zeros(sd);
            let mut outer = DMatrix::zeros(sd, sd);
            for x in states {
                sum += x;
                outer += x * x.transpose();
                count += 1;
            }
            if count < 2 {
                return standardized();
            }
            let mean = sum / count as f64;
            let cov = (outer - &mean * mean.transpose() * count as f64) / (count - 1) as f64;
            // a relative ridge keeps nearly collinear coordinates invertible
            let ridge = 1e-8 * cov.trace() / sd as f64;
            match (cov + DMatrix::identity(sd, sd) * ridge).cholesky() {
                Some(chol) => chol
                    .l()
                    .solve_lower_triangular(&DMatrix::identity(sd, sd))
                    .unwrap_or_else(standardized),
                None => {
                    warn!("state covariance is not positive definite; standardizing residuals instead");
                    standardized()
                }
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha_pred: 1.0,
            alpha_lift: 1.0,
            gamma_l1: 1e-5,
            gamma_l2: 1e-4,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            batch_size: 256,
            epochs: 200,
            seed: 0,
            architecture: EncoderArchitecture::default(),
            horizon: 1,
            validation_fraction: 0.1,
            patience: 20,
            init: MatrixInit::LeastSquares,
            max_validation_windows: 20_000,
            residual_scaling: ResidualScaling::Standardize,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_pred > 0.0 && self.alpha_lift > 0.0) {
            return Err(Error::config("alpha_pred", "loss weights must be positive"));
        }
        if !(self.gamma_l1 >= 0.0 && self.gamma_l2 >= 0.0) {
            return Err(Error::config("gamma_l1", "regularization weights must be non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", "must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Loss curve and provenance stored with a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    pub config: TrainConfig,
    pub dataset_kind: DatasetKind,
    pub trajectories: usize,
    pub snapshots: usize,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
    pub early_stopped: bool,
}

/// A batch of training windows, all matrices column-aligned.
pub struct Batch {
    /// `horizon + 1` state matrices (`2n × B`).
    pub states: Vec<DMatrix<f64>>,
    /// `horizon` input matrices (`m × B`); `None` for unactuated data.
    pub inputs: Option<Vec<DMatrix<f64>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    /// Gathers windows `(trajectory, start)` of length `horizon` from `ds`.
    pub fn gather(ds: &TrajectoryDataset, windows: &[(usize, usize)], horizon: usize) -> Self {
        let sd = 2 * ds.n;
        let states = (0..=horizon)
            .map(|j| {
                DMatrix::from_fn(sd, windows.len(), |i, c| {
                    let (t, k) = windows[c];
                    ds.trajectories[t].states[k + j][i]
                })
            })
            .collect();
        let inputs = (ds.kind == DatasetKind::Actuated).then(|| {
            (0..horizon)
                .map(|j| {
                    DMatrix::from_fn(ds.m, windows.len(), |i, c| {
                        let (t, k) = windows[c];
                        ds.trajectories[t].inputs.as_ref().expect("actuated")[k + j][i]
                    })
                })
                .collect()
        });
        Batch { states, inputs }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean `‖x − Cˣẑ‖₂` over samples and horizon steps.
    pub pred: f64,
    /// Mean `‖z − ẑ‖₂`.
    pub lift: f64,
    pub l1: f64,
    pub l2: f64,
}

/// Gradient of the total loss with respect to each parameter block.
pub struct Gradient {
    pub encoder: Vec<f64>,
    pub a: DMatrix<f64>,
    /// Present only when `B` is learned.
    pub b: Option<DMatrix<f64>>,
}

fn learns_b(variant: Variant) -> bool {
    variant != Variant::Proposed
}

fn regularization(model: &KoopmanModel, enc_params: &[f64]) -> (f64, f64) {
    let mut l1 = 0.0;
    let mut sq = 0.0;
    let b_slice: &[f64] = if learns_b(model.variant) { model.b.as_slice() } else { &[] };
    for v in enc_params.iter().chain(model.a.as_slice()).chain(b_slice) {
        l1 += v.abs();
        sq += v * v;
    }
    (l1, sq.sqrt())
}

/// Column norms and the normalized direction `r/‖r‖` (zero where `r = 0`).
fn column_directions(r: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let mut dir = r.clone();
    let mut norms = Vec::with_capacity(r.ncols());
    for mut col in dir.column_iter_mut() {
        let norm = col.norm();
        norms.push(norm);
        if norm > 0.0 {
            col /= norm;
        }
    }
    (norms, dir)
}

/// Loss of `model` on `batch`, with state residuals mapped through `metric`
/// (see [`residual_metric`]).
pub fn loss(model: &KoopmanModel, batch: &Batch, cfg: &TrainConfig, metric: &DMatrix<f64>) -> Result<LossBreakdown> {
    evaluate(model, batch, cfg, metric, false).map(|(l, _)| l)
}

/// Loss and its gradient with respect to all trainable parameters.
pub fn loss_and_gradient(
    model: &KoopmanModel,
    batch: &Batch,
    cfg: &TrainConfig,
    metric: &DMatrix<f64>,
) -> Result<(LossBreakdown, Gradient)> {
    evaluate(model, batch, cfg, metric, true).map(|(l, g)| (l, g.expect("gradient requested")))
}

fn evaluate(
    model: &KoopmanModel,
    batch: &Batch,
    cfg: &TrainConfig,
    metric: &DMatrix<f64>,
    with_gradient: bool,
) -> Result<(LossBreakdown, Option<Gradient>)> {
    let sd = model.state_dim();
    check_dim("residual metric", sd, metric.nrows())?;
    check_dim("residual metric", sd, metric.ncols())?;
    let h = batch.horizon();
    let bsz = batch.len();
    if bsz == 0 || h == 0 {
        return Err(Error::Training("empty batch".into()));
    }
    check_dim("batch state dimension", sd, batch.states[0].nrows())?;
    let use_input = batch.inputs.is_some();
    if !use_input && learns_b(model.variant) {
        return Err(Error::Unsupported(format!(
            "{} must be trained on actuated data",
            model.variant
        )));
    }

    // Lift every snapshot of the window in one encoder pass.
    let mut all = DMatrix::zeros(sd, (h + 1) * bsz);
    for (j, x) in batch.states.iter().enumerate() {
        all.columns_mut(j * bsz, bsz).copy_from(x);
    }
    let cache = model.encoder.forward(&all);
    let lifted: Vec<DMatrix<f64>> = (0..=h)
        .map(|j| stack_rows(&batch.states[j], &cache.output.columns(j * bsz, bsz).into_owned()))
        .collect();

    let feature = |z: &DMatrix<f64>, u: &DMatrix<f64>| match model.variant {
        Variant::Nbk => kron_batch(z, u),
        _ => u.clone(),
    };

    let mut predicted = Vec::with_capacity(h + 1);
    let mut features = Vec::with_capacity(h);
    predicted.push(lifted[0].clone());
    for j in 1..=h {
        let prev = &predicted[j - 1];
        let mut next = &model.a * prev;
        if let Some(inputs) = &batch.inputs {
            let v = feature(prev, &inputs[j - 1]);
            next += &model.b * &v;
            features.push(v);
        }
        predicted.push(next);
    }

    let metric_t = metric.transpose();
    let weigh = |w: &DMatrix<f64>, r: &mut DMatrix<f64>| {
        let top = w * r.rows(0, sd);
        r.rows_mut(0, sd).copy_from(&top);
    };

    let scale = 1.0 / (h * bsz) as f64;
    let mut pred_sum = 0.0;
    let mut lift_sum = 0.0;
    // direct adjoints ∂L/∂ẑ_j and ∂L/∂z_j (lift targets)
    let mut adj_pred = vec![DMatrix::zeros(0, 0); h + 1];
    let mut adj_target = vec![DMatrix::zeros(0, 0); h + 1];
    for j in 1..=h {
        let mut rp = &batch.states[j] - predicted[j].rows(0, sd);
        let mut rl = &lifted[j] - &predicted[j];
        weigh(metric, &mut rp);
        weigh(metric, &mut rl);
        let (np, mut dp) = column_directions(&rp);
        let (nl, mut dl) = column_directions(&rl);
        weigh(&metric_t, &mut dp);
        weigh(&metric_t, &mut dl);
        pred_sum += np.iter().sum::<f64>();
        lift_sum += nl.iter().sum::<f64>();
        if with_gradient {
            let mut g = &dl * (-cfg.alpha_lift * scale);
            let mut top = g.rows_mut(0, sd);
            top -= &dp * (cfg.alpha_pred * scale);
            adj_pred[j] = g;
            adj_target[j] = &dl * (cfg.alpha_lift * scale);
        }
    }

    let enc_params = model.encoder.params();
    let (l1, l2) = regularization(model, &enc_params);
    let pred = pred_sum * scale;
    let lift = lift_sum * scale;
    let total = cfg.alpha_pred * pred + cfg.alpha_lift * lift + cfg.gamma_l1 * l1 + cfg.gamma_l2 * l2;
    let breakdown = LossBreakdown {
        total,
        pred,
        lift,
        l1,
        l2,
    };
    if !total.is_finite() {
        return Err(Error::Training(format!("non-finite loss {breakdown:?}")));
    }
    if !with_gradient {
        return Ok((breakdown, None));
    }

    let lifted_dim = model.lifted_dim();
    let mut grad_a = DMatrix::zeros(lifted_dim, lifted_dim);
    let mut grad_b = learns_b(model.variant).then(|| DMatrix::zeros(model.b.nrows(), model.b.ncols()));
    let mut acc = adj_pred[h].clone();
    for j in (1..=h).rev() {
        grad_a += &acc * predicted[j - 1].transpose();
        let mut back = model.a.transpose() * &acc;
        if let Some(inputs) = &batch.inputs {
            if let Some(gb) = grad_b.as_mut() {
                *gb += &acc * features[j - 1].transpose();
            }
            if model.variant == Variant::Nbk {
                let dv = model.b.transpose() * &acc;
                let u = &inputs[j - 1];
                let m = model.m;
                for c in 0..bsz {
                    for l in 0..lifted_dim {
                        let mut s = 0.0;
                        for k in 0..m {
                            s += dv[(l * m + k, c)] * u[(k, c)];
                        }
                        back[(l, c)] += s;
                    }
                }
            }
        }
        if j > 1 {
            back += &adj_pred[j - 1];
        }
        acc = back;
    }

    // ∂L/∂φ for every lifted snapshot column.
    let nf = model.features();
    let mut phi_adj = DMatrix::zeros(nf, (h + 1) * bsz);
    if nf > 0 {
        phi_adj.columns_mut(0, bsz).copy_from(&acc.rows(sd, nf));
        for j in 1..=h {
            phi_adj.columns_mut(j * bsz, bsz).copy_from(&adj_target[j].rows(sd, nf));
        }
    }
    let mut grad_enc = model.encoder.gradient(&cache, &phi_adj);

    // regularization
    let reg = |w: f64| cfg.gamma_l1 * w.signum() * (w != 0.0) as u8 as f64 + if l2 > 0.0 { cfg.gamma_l2 * w / l2 } else { 0.0 };
    for (g, w) in grad_enc.iter_mut().zip(&enc_params) {
        *g += reg(*w);
    }
    for (g, w) in grad_a.iter_mut().zip(model.a.iter()) {
        *g += reg(*w);
    }
    if let Some(gb) = grad_b.as_mut() {
        for (g, w) in gb.iter_mut().zip(model.b.iter()) {
            *g += reg(*w);
        }
    }
    Ok((
        breakdown,
        Some(Gradient {
            encoder: grad_enc,
            a: grad_a,
            b: grad_b,
        }),
    ))
}

/// Flat parameter vector `[encoder, A (column-major), B (if learned)]`.
fn pack(model: &KoopmanModel) -> Vec<f64> {
    let mut p = model.encoder.params();
    p.extend_from_slice(model.a.as_slice());
    if learns_b(model.variant) {
        p.extend_from_slice(model.b.as_slice());
    }
    p
}

fn unpack(model: &mut KoopmanModel, params: &[f64]) -> Result<()> {
    let ne = model.encoder.param_count();
    let na = model.a.len();
    model.encoder.set_params(&params[..ne])?;
    model.a.as_mut_slice().copy_from_slice(&params[ne..ne + na]);
    if learns_b(model.variant) {
        model.b.as_mut_slice().copy_from_slice(&params[ne + na..]);
    }
    Ok(())
}

fn pack_gradient(g: &Gradient) -> Vec<f64> {
    let mut out = g.encoder.clone();
    out.extend_from_slice(g.a.as_slice());
    if let Some(b) = &g.b {
        out.extend_from_slice(b.as_slice());
    }
    out
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn windows_of(ds: &TrajectoryDataset, traj: &[usize], horizon: usize) -> Vec<(usize, usize)> {
    let w = ds.w();
    traj.iter()
        .flat_map(|&t| (0..w.saturating_sub(horizon)).map(move |k| (t, k)))
        .collect()
}

/// Ridge least-squares fit of `A` (and a learned `B`) on one-step pairs.
fn least_squares_init(model: &mut KoopmanModel, ds: &TrajectoryDataset, windows: &[(usize, usize)]) -> Result<()> {
    let lifted = model.lifted_dim();
    let use_b = learns_b(model.variant) && ds.kind == DatasetKind::Actuated;
    let feat_dim = if use_b { model.input_feature_dim() } else { 0 };
    let reg_dim = lifted + feat_dim;
    let mut gram = DMatrix::zeros(reg_dim, reg_dim);
    let mut cross = DMatrix::zeros(lifted, reg_dim);
    for chunk in windows.chunks(2048) {
        let batch = Batch::gather(ds, chunk, 1);
        let z0 = model.encoder.lift_batch(&batch.states[0]);
        let mut target = model.encoder.lift_batch(&batch.states[1]);
        let regressors = match &batch.inputs {
            Some(inputs) if use_b => {
                let v = match model.variant {
                    Variant::Nbk => kron_batch(&z0, &inputs[0]),
                    _ => inputs[0].clone(),
                };
                stack_rows(&z0, &v)
            }
            Some(inputs) => {
                // fixed B: regress the input-free part of the target
                target -= &model.b * &inputs[0];
                z0
            }
            None => z0,
        };
        gram += &regressors * regressors.transpose();
        cross += &target * regressors.transpose();
    }
    let ridge = 1e-6 * (gram.trace() / reg_dim as f64).max(1e-12);
    for i in 0..reg_dim {
        gram[(i, i)] += ridge;
    }
    let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| Error::Training("singular least-squares system".into()))?;
    let solution = chol.solve(&cross.transpose()).transpose();
    model.a.copy_from(&solution.columns(0, lifted));
    if use_b {
        model.b.copy_from(&solution.columns(lifted, feat_dim));
    }
    Ok(())
}

fn mean_loss(
    model: &KoopmanModel,
    ds: &TrajectoryDataset,
    windows: &[(usize, usize)],
    cfg: &TrainConfig,
    metric: &DMatrix<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in windows.chunks(4096) {
        let batch = Batch::gather(ds, chunk, cfg.horizon);
        let l = loss(model, &batch, cfg, metric)?;
        total += (cfg.alpha_pred * l.pred + cfg.alpha_lift * l.lift) * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Trains `variant` on `ds`.
///
/// Minimizes the loss with Adam over the encoder and `A` (plus `B` for the
/// baselines), keeping the parameters with the lowest loss on a held-out
/// fraction of the trajectories. The fixed input matrix of the proposed variant
/// is never part of the parameter vector.
pub fn train(ds: &TrajectoryDataset, cfg: &TrainConfig, variant: Variant) -> Result<KoopmanModel> {
    cfg.validate()?;
    ds.validate()?;
    if ds.convention != variant.convention() {
        return Err(Error::config(
            "dataset.convention",
            format!("{variant} expects {:?} states", variant.convention()),
        ));
    }
    if ds.kind == DatasetKind::Unactuated && learns_b(variant) {
        return Err(Error::config("dataset.kind", format!("{variant} requires actuated data")));
    }
    if ds.w() <= cfg.horizon {
        return Err(Error::config("horizon", "must be shorter than the trajectories"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7261_696e));
    let mut order: Vec<usize> = (0..ds.p()).collect();
    order.shuffle(&mut rng);
    let n_val = if cfg.validation_fraction > 0.0 && ds.p() >= 2 {
        ((ds.p() as f64 * cfg.validation_fraction).round() as usize).clamp(1, ds.p() - 1)
    } else {
        0
    };
    let (val_traj, train_traj) = order.split_at(n_val);
    let mut train_windows = windows_of(ds, train_traj, cfg.horizon);
    let val_windows = {
        let all = windows_of(ds, val_traj, cfg.horizon);
        let stride = all.len().div_ceil(cfg.max_validation_windows.max(1)).max(1);
        all.into_iter().step_by(stride).collect::<Vec<_>>()
    };

    let mut encoder = EncoderNetwork::new(2 * ds.n, &cfg.architecture, derive_seed(cfg.seed, 0x656e_63));
    encoder.fit_normalization(
        train_traj
            .iter()
            .flat_map(|&t| ds.trajectories[t].states.iter()),
    );
    let mut model = KoopmanModel::new(variant, ds.n, ds.m, ds.dt, encoder)?;
    let metric = residual_metric(
        &model,
        cfg.residual_scaling,
        train_traj.iter().flat_map(|&t| ds.trajectories[t].states.iter()),
    );
    if cfg.init == MatrixInit::LeastSquares {
        least_squares_init(&mut model, ds, &train_windows)?;
    }
    let fixed_b = model.b.clone();

    let mut params = pack(&model);
    let mut adam = Adam::new(params.len());
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut lr = cfg.learning_rate;
    let mut early_stopped = false;
    for epoch in 0..cfg.epochs {
        train_windows.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in train_windows.chunks(cfg.batch_size) {
            let batch = Batch::gather(ds, chunk, cfg.horizon);
            let (l, g) = loss_and_gradient(&model, &batch, cfg, &metric)?;
            epoch_loss += l.total * chunk.len() as f64;
            adam.step(&mut params, &pack_gradient(&g), lr);
            unpack(&mut model, &params)?;
        }
        epoch_loss /= train_windows.len() as f64;
        let val = if val_windows.is_empty() {
            epoch_loss
        } else {
            mean_loss(&model, ds, &val_windows, cfg, &metric)?
        };
        train_curve.push(epoch_loss);
        val_curve.push(val);
        debug!("{variant} epoch {epoch}: train {epoch_loss:.6e} val {val:.6e}");
        if val < best.0 {
            best = (val, params.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            info!("{variant}: early stop at epoch {epoch} (best {})", best.2);
            early_stopped = true;
            break;
        }
        lr *= cfg.lr_decay;
    }
    unpack(&mut model, &best.1)?;
    debug_assert!(variant != Variant::Proposed || model.b == fixed_b);
    model.training = Some(TrainingRecord {
        seed: cfg.seed,
        config: cfg.clone(),
        dataset_kind: ds.kind,
        trajectories: ds.p(),
        snapshots: ds.w(),
        train_loss: train_curve,
        validation_loss: val_curve,
        best_epoch: best.2,
        early_stopped,
    });
    model.validate()?;
    Ok(model)
}
