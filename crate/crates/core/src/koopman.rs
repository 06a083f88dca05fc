//! Lifted linear and bilinear predictors.
//!
//! Three variants share one representation:
//!
//! * `Proposed` works on the momentum state `x = [q; p]` with a fixed input
//!   matrix `B = [0; dt·I; 0]`, so only `A` and the encoder are learned.
//! * `Nlk` works on `x = [q; q̇]` with a learned `B` (`L × m`).
//! * `Nbk` works on `x = [q; q̇]` with a learned bilinear `B` (`L × L·m`)
//!   acting on `z ⊗ u`, ordered z-major: entry `l·m + j` is `z_l u_j`.
//!
//! In every case the physical state is recovered exactly as the first `2n`
//! entries of `z`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{velocity_from_momentum, ManipulatorModel, MomentumState};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::lifting::EncoderNetwork;
use crate::training::TrainingRecord;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Proposed,
    Nlk,
    Nbk,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Proposed, Variant::Nlk, Variant::Nbk];

    pub fn convention(self) -> StateConvention {
        match self {
            Variant::Proposed => StateConvention::Momentum,
            Variant::Nlk | Variant::Nbk => StateConvention::Explicit,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::Nlk => "nlk",
            Variant::Nbk => "nbk",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Variant::Proposed),
            "nlk" => Ok(Variant::Nlk),
            "nbk" => Ok(Variant::Nbk),
            other => Err(Error::config(
                "variant",
                format!("unknown variant `{other}` (expected proposed, nlk or nbk)"),
            )),
        }
    }
}

/// Second half of the state vector: momentum `p` or velocity `q̇`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateConvention {
    Momentum,
    Explicit,
}

/// Converts `[q; p]` or `[q; q̇]` states to `[q; q̇]`.
pub fn to_explicit(
    states: &[DVector<f64>],
    convention: StateConvention,
    manip: &ManipulatorModel,
) -> Result<Vec<DVector<f64>>> {
    match convention {
        StateConvention::Explicit => Ok(states.to_vec()),
        StateConvention::Momentum => states
            .iter()
            .map(|x| {
                let s = MomentumState::from_vector(x)?;
                let qd = velocity_from_momentum(manip, &s)?;
                let mut out = x.clone();
                out.rows_mut(s.n(), s.n()).copy_from(&qd);
                Ok(out)
            })
            .collect(),
    }
}

/// Converts `[q; q̇]` states to the requested convention.
pub fn from_explicit(
    states: &[DVector<f64>],
    convention: StateConvention,
    manip: &ManipulatorModel,
) -> Result<Vec<DVector<f64>>> {
    match convention {
        StateConvention::Explicit => Ok(states.to_vec()),
        StateConvention::Momentum => states
            .iter()
            .map(|x| {
                let n = x.len() / 2;
                let q = x.rows(0, n).into_owned();
                let qd = x.rows(n, n).into_owned();
                Ok(crate::dynamics::momentum_state(manip, &q, &qd)?.to_vector())
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KoopmanModel {
    pub format_version: u32,
    pub variant: Variant,
    pub convention: StateConvention,
    /// Joint count; the physical state has `2n` entries.
    pub n: usize,
    /// Input count.
    pub m: usize,
    pub dt: f64,
    #[serde(with = "crate::serde_util")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::serde_util")]
    pub b: DMatrix<f64>,
    pub encoder: EncoderNetwork,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingRecord>,
}

/// Fixed discrete input matrix `[0_{n×m}; dt·I_{n×m}; 0_{N×m}]`.
pub fn fixed_input_matrix(n: usize, m: usize, lifted: usize, dt: f64) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(lifted, m);
    for i in 0..n.min(m) {
        b[(n + i, i)] = dt;
    }
    b
}

/// `z ⊗ u` with z-major ordering.
pub fn kron(z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let m = u.len();
    DVector::from_fn(z.len() * m, |k, _| z[k / m] * u[k % m])
}

/// Column-wise `z ⊗ u` for batches.
pub(crate) fn kron_batch(z: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let m = u.nrows();
    DMatrix::from_fn(z.nrows() * m, z.ncols(), |k, c| z[(k / m, c)] * u[(k % m, c)])
}

/// Result of an open-loop prediction.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// Recovered physical states `Cˣ z_k`, starting with `x₀`.
    pub states: Vec<DVector<f64>>,
    /// First step whose prediction was non-finite or exceeded the divergence bound.
    pub diverged_at: Option<usize>,
}

const ROLLOUT_LIMIT: f64 = 1e8;

impl KoopmanModel {
    /// Model with `A = I`; the input matrix is fixed for `Proposed` and zero otherwise.
    pub fn new(variant: Variant, n: usize, m: usize, dt: f64, encoder: EncoderNetwork) -> Result<Self> {
        check_dim("encoder input", 2 * n, encoder.input_dim)?;
        let lifted = encoder.lifted_dim();
        let b = match variant {
            Variant::Proposed => fixed_input_matrix(n, m, lifted, dt),
            Variant::Nlk => DMatrix::zeros(lifted, m),
            Variant::Nbk => DMatrix::zeros(lifted, lifted * m),
        };
        let model = KoopmanModel {
            format_version: MODEL_FORMAT_VERSION,
            variant,
            convention: variant.convention(),
            n,
            m,
            dt,
            a: DMatrix::identity(lifted, lifted),
            b,
            encoder,
            training: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn features(&self) -> usize {
        self.encoder.features()
    }

    /// Columns of `B`: `m`, or `L·m` for the bilinear variant.
    pub fn input_feature_dim(&self) -> usize {
        match self.variant {
            Variant::Nbk => self.lifted_dim() * self.m,
            _ => self.m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::config(
                "format_version",
                format!("unsupported version {}", self.format_version),
            ));
        }
        if self.n == 0 || self.m == 0 {
            return Err(Error::config("n", "n and m must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "must be positive"));
        }
        if self.convention != self.variant.convention() {
            return Err(Error::config("convention", "does not match the model variant"));
        }
        self.encoder.validate()?;
        if self.encoder.input_dim != self.state_dim() {
            return Err(Error::config("encoder.input_dim", "must equal 2n"));
        }
        let lifted = self.encoder.lifted_dim();
        if self.a.shape() != (lifted, lifted) {
            return Err(Error::config("a", format!("must be {lifted} x {lifted}")));
        }
        if self.b.shape() != (lifted, self.input_feature_dim()) {
            return Err(Error::config(
                "b",
                format!("must be {lifted} x {}", self.input_feature_dim()),
            ));
        }
        if self.variant == Variant::Proposed
            && self.b != fixed_input_matrix(self.n, self.m, lifted, self.dt)
        {
            return Err(Error::config("b", "proposed variant requires the fixed input matrix"));
        }
        check_finite("model matrix a", self.a.as_slice())?;
        check_finite("model matrix b", self.b.as_slice())?;
        Ok(())
    }

    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.encoder.lift(x)
    }

    /// `Cˣ z`: the first `2n` entries.
    pub fn recover(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(0, self.state_dim()).into_owned()
    }

    /// The vector multiplied by `B`: `u`, or `z ⊗ u` for the bilinear variant.
    pub fn input_features(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self.variant {
            Variant::Nbk => kron(z, u),
            _ => u.clone(),
        }
    }

    pub fn predict(&self, z: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("lifted state", self.lifted_dim(), z.len())?;
        check_dim("input", self.m, u.len())?;
        Ok(&self.a * z + &self.b * self.input_features(z, u))
    }

    /// Model state rate `Cˣ(A z + B u − z)/dt`, the discrete-consistent
    /// surrogate of the continuous flow.
    pub fn flow(&self, z: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let next = self.predict(z, u)?;
        Ok((self.recover(&next) - self.recover(z)) / self.dt)
    }

    /// Lifts `x0` once and iterates `predict` over `inputs`.
    pub fn rollout(&self, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<Rollout> {
        let mut z = self.lift(x0)?;
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0.clone());
        for (k, u) in inputs.iter().enumerate() {
            z = self.predict(&z, u)?;
            let x = self.recover(&z);
            if z.iter().any(|v| !v.is_finite() || v.abs() > ROLLOUT_LIMIT) {
                return Ok(Rollout {
                    states,
                    diverged_at: Some(k + 1),
                });
            }
            states.push(x);
        }
        Ok(Rollout {
            states,
            diverged_at: None,
        })
    }

    /// Encoder parameters plus `A`, plus the input coupling when it is
    /// learned: `L·m` for the linear baseline and `L·m²` for the bilinear one.
    ///
    /// The bilinear charge is the conventional ledger figure. The stored `B`
    /// of that variant has `L·L·m` entries; see [`Self::count_stored_params`].
    pub fn count_learnable_params(&self) -> usize {
        let l = self.lifted_dim();
        let b = match self.variant {
            Variant::Proposed => 0,
            Variant::Nlk => l * self.m,
            Variant::Nbk => l * self.m * self.m,
        };
        self.encoder.param_count() + self.a.len() + b
    }

    /// Number of trained floating-point values actually stored in the model.
    pub fn count_stored_params(&self) -> usize {
        let b = match self.variant {
            Variant::Proposed => 0,
            Variant::Nlk | Variant::Nbk => self.b.len(),
        };
        self.encoder.param_count() + self.a.len() + b
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: KoopmanModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Per-dimension RMSE divided by the ground-truth standard deviation, averaged
/// over dimensions. Both trajectories must be in explicit `[q; q̇]` form.
/// Dimensions with zero ground-truth variance are skipped with a warning.
pub fn standardized_error(pred: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    check_dim("trajectory length", truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::config("trajectory", "must not be empty"));
    }
    let dim = truth[0].len();
    let count = truth.len() as f64;
    let mut total = 0.0;
    let mut used = 0usize;
    for d in 0..dim {
        let mean = truth.iter().map(|x| x[d]).sum::<f64>() / count;
        let var = truth.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / count;
        if var <= 1e-24 {
            warn!("dimension {d} has zero ground-truth variance; excluded from standardized error");
            continue;
        }
        let mse = pred.iter().zip(truth).map(|(p, t)| (p[d] - t[d]).powi(2)).sum::<f64>() / count;
        total += mse.sqrt() / var.sqrt();
        used += 1;
    }
    if used == 0 {
        return Err(Error::config("trajectory", "every dimension has zero variance"));
    }
    Ok(total / used as f64)
}
