//! Linear MPC over the lifted model with disturbance compensation.
//!
//! The predicted lifted states are eliminated (condensed transcription):
//!
//! ```text
//! z_k = Aᵏ z₀ + Σ_{j<k} A^{k−1−j} (B u_j + Cˣᵀ d̂ dt)
//! ```
//!
//! so the QP decision vector is the stacked input sequence `U = [u₀ … u_{s−1}]`.
//! The cost penalizes `Cˣz_k − x_ref,k` for `k = 1..s` and every `u_k`. The
//! disturbance estimate is held constant over the horizon.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::geso::{Geso, GesoGains};
use crate::koopman::{KoopmanModel, Variant};
use crate::qp::{solve_qp, KktResiduals, QpProblem, QpSettings, QpStatus, WarmStart};

/// Interval bound; a missing side is unbounded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

impl Bound {
    pub fn symmetric(limit: f64) -> Self {
        Bound {
            lower: Some(-limit),
            upper: Some(limit),
        }
    }

    pub fn lo(&self) -> f64 {
        self.lower.unwrap_or(f64::NEG_INFINITY)
    }

    pub fn hi(&self) -> f64 {
        self.upper.unwrap_or(f64::INFINITY)
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.is_some() || self.upper.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Prediction and control horizon `s` (steps).
    pub horizon: usize,
    pub position_weight: f64,
    /// Weight on the second state block (momentum, or velocity for models in
    /// explicit coordinates).
    pub momentum_weight: f64,
    pub input_weight: f64,
    /// Per-state bounds over the horizon; empty means unbounded.
    pub state_bounds: Vec<Bound>,
    /// Per-input bounds; empty means unbounded.
    pub input_bounds: Vec<Bound>,
    pub solver: QpSettings,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 20,
            position_weight: 100.0,
            momentum_weight: 1.0,
            input_weight: 0.01,
            state_bounds: Vec::new(),
            input_bounds: Vec::new(),
            solver: QpSettings::default(),
        }
    }
}

impl MpcConfig {
    pub fn with_input_limit(mut self, m: usize, limit: f64) -> Self {
        self.input_bounds = vec![Bound::symmetric(limit); m];
        self
    }

    pub fn validate(&self, state_dim: usize, m: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if !(self.position_weight >= 0.0 && self.momentum_weight >= 0.0) {
            return Err(Error::config("position_weight", "state weights must be non-negative"));
        }
        if !(self.input_weight > 0.0 && self.input_weight.is_finite()) {
            return Err(Error::config("input_weight", "must be positive"));
        }
        let check = |field: &str, bounds: &[Bound], dim: usize| -> Result<()> {
            if !bounds.is_empty() && bounds.len() != dim {
                return Err(Error::config(field, format!("expected {dim} entries, got {}", bounds.len())));
            }
            for (i, b) in bounds.iter().enumerate() {
                if b.lo().is_nan() || b.hi().is_nan() || b.lo() > b.hi() {
                    return Err(Error::config(format!("{field}[{i}]"), "lower bound exceeds upper bound"));
                }
            }
            Ok(())
        };
        check("state_bounds", &self.state_bounds, state_dim)?;
        check("input_bounds", &self.input_bounds, m)?;
        self.solver.validate()
    }

    fn input_bound(&self, j: usize) -> Bound {
        self.input_bounds.get(j).copied().unwrap_or_default()
    }

    fn state_bound(&self, i: usize) -> Bound {
        self.state_bounds.get(i).copied().unwrap_or_default()
    }
}

/// Horizon prediction matrices of `z⁺ = Az + Bu + Cᵀ d dt`, `y = Cz`.
#[derive(Clone, Debug)]
pub struct CondensedPrediction {
    horizon: usize,
    outputs: usize,
    inputs: usize,
    dt: f64,
    /// Block row `k−1` is `C Aᵏ`, `k = 1..s`.
    free: DMatrix<f64>,
    /// Block `(k−1, j)` is `C A^{k−1−j} B` for `j < k`.
    forced: DMatrix<f64>,
    /// Block row `k−1` is `Σ_{i<k} C Aⁱ Cᵀ`.
    disturbance: DMatrix<f64>,
    /// Stage weight of every output.
    weights: DVector<f64>,
    hessian: DMatrix<f64>,
    /// `2 Γᵀ Q`, reused to form the linear cost.
    gradient_map: DMatrix<f64>,
    config: MpcConfig,
}

impl CondensedPrediction {
    pub fn new(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, dt: f64, config: &MpcConfig) -> Result<Self> {
        let lifted = a.nrows();
        check_dim("prediction A columns", lifted, a.ncols())?;
        check_dim("prediction B rows", lifted, b.nrows())?;
        check_dim("prediction C columns", lifted, c.ncols())?;
        let (ny, m, s) = (c.nrows(), b.ncols(), config.horizon);
        config.validate(ny, m)?;
        if ny % 2 != 0 && config.momentum_weight != config.position_weight {
            return Err(Error::config("momentum_weight", "state of odd dimension has no momentum block"));
        }

        // C Aⁱ for i = 0..s
        let mut ca = Vec::with_capacity(s + 1);
        ca.push(c.clone());
        for i in 1..=s {
            let next = &ca[i - 1] * a;
            ca.push(next);
        }
        let cab: Vec<DMatrix<f64>> = ca.iter().take(s).map(|m_| m_ * b).collect();
        let cac: Vec<DMatrix<f64>> = ca.iter().take(s).map(|m_| m_ * c.transpose()).collect();

        let mut free = DMatrix::zeros(s * ny, lifted);
        let mut forced = DMatrix::zeros(s * ny, s * m);
        let mut disturbance = DMatrix::zeros(s * ny, ny);
        let mut acc = DMatrix::zeros(ny, ny);
        for k in 1..=s {
            let r = (k - 1) * ny;
            free.view_mut((r, 0), (ny, lifted)).copy_from(&ca[k]);
            for j in 0..k {
                forced.view_mut((r, j * m), (ny, m)).copy_from(&cab[k - 1 - j]);
            }
            acc += &cac[k - 1];
            disturbance.view_mut((r, 0), (ny, ny)).copy_from(&acc);
        }

        let half = ny / 2;
        let stage = DVector::from_fn(ny, |i, _| {
            if ny % 2 == 0 && i >= half {
                config.momentum_weight
            } else {
                config.position_weight
            }
        });
        let weights = DVector::from_fn(s * ny, |i, _| stage[i % ny]);
        let weighted = DMatrix::from_fn(s * ny, s * m, |i, j| forced[(i, j)] * weights[i]);
        let gradient_map = weighted.transpose() * 2.0;
        let mut hessian = &gradient_map * &forced;
        for i in 0..s * m {
            hessian[(i, i)] += 2.0 * config.input_weight;
        }
        hessian = (&hessian + hessian.transpose()) * 0.5;
        Ok(CondensedPrediction {
            horizon: s,
            outputs: ny,
            inputs: m,
            dt,
            free,
            forced,
            disturbance,
            weights,
            hessian,
            gradient_map,
            config: config.clone(),
        })
    }

    /// Prediction matrices of a Koopman model; bilinear models are rejected.
    pub fn from_model(model: &KoopmanModel, config: &MpcConfig) -> Result<Self> {
        if model.variant == Variant::Nbk {
            return Err(Error::Unsupported("MPC needs a linear input matrix; bilinear models are not supported".into()));
        }
        let sd = model.state_dim();
        let c = DMatrix::from_fn(sd, model.lifted_dim(), |i, j| (i == j) as u8 as f64);
        Self::new(&model.a, &model.b, &c, model.dt, config)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// Output trajectory `[y₁ … y_s]` (stacked) for inputs `inputs`.
    pub fn predict_outputs(&self, z0: &DVector<f64>, inputs: &DVector<f64>, d_hat: &DVector<f64>) -> DVector<f64> {
        &self.free * z0 + &self.forced * inputs + &self.disturbance * d_hat * self.dt
    }

    /// QP in the stacked inputs for the current lifted state, reference window
    /// and disturbance estimate.
    pub fn qp(&self, z0: &DVector<f64>, refs: &[DVector<f64>], d_hat: &DVector<f64>) -> Result<QpProblem> {
        let (s, ny, m) = (self.horizon, self.outputs, self.inputs);
        check_dim("lifted initial state", self.free.ncols(), z0.len())?;
        check_dim("disturbance estimate", ny, d_hat.len())?;
        if refs.len() < s {
            return Err(Error::Dimension {
                context: "reference window",
                expected: s,
                actual: refs.len(),
            });
        }
        check_finite("lifted initial state", z0.as_slice())?;
        check_finite("disturbance estimate", d_hat.as_slice())?;
        let offset = &self.free * z0 + &self.disturbance * d_hat * self.dt;
        let mut target = DVector::zeros(s * ny);
        for (k, r) in refs.iter().take(s).enumerate() {
            check_dim("reference state", ny, r.len())?;
            check_finite("reference state", r.as_slice())?;
            target.rows_mut(k * ny, ny).copy_from(r);
        }
        let q = &self.gradient_map * (&offset - target);

        let state_rows: Vec<usize> = (0..s * ny)
            .filter(|&i| self.config.state_bound(i % ny).is_bounded())
            .collect();
        let rows = s * m + state_rows.len();
        let mut a = DMatrix::zeros(rows, s * m);
        let mut l = DVector::zeros(rows);
        let mut u = DVector::zeros(rows);
        for i in 0..s * m {
            a[(i, i)] = 1.0;
            let b = self.config.input_bound(i % m);
            l[i] = b.lo();
            u[i] = b.hi();
        }
        for (r, &i) in state_rows.iter().enumerate() {
            let b = self.config.state_bound(i % ny);
            a.row_mut(s * m + r).copy_from(&self.forced.row(i));
            l[s * m + r] = b.lo() - offset[i];
            u[s * m + r] = b.hi() - offset[i];
        }
        Ok(QpProblem {
            p: self.hessian.clone(),
            q,
            a,
            l,
            u,
        })
    }

    /// Tracking cost `Σ‖y_k − r_k‖²_Q + Σ‖u_k‖²_R` of an input sequence.
    pub fn cost(&self, z0: &DVector<f64>, inputs: &DVector<f64>, refs: &[DVector<f64>], d_hat: &DVector<f64>) -> f64 {
        let y = self.predict_outputs(z0, inputs, d_hat);
        let mut cost = 0.0;
        for k in 0..self.horizon {
            for i in 0..self.outputs {
                let e = y[k * self.outputs + i] - refs[k][i];
                cost += self.weights[k * self.outputs + i] * e * e;
            }
        }
        cost + self.config.input_weight * inputs.norm_squared()
    }
}

/// Condensed QP for `model` (the one-shot form of [`CondensedPrediction::qp`]).
pub fn build_qp(
    model: &KoopmanModel,
    z0: &DVector<f64>,
    refs: &[DVector<f64>],
    d_hat: &DVector<f64>,
    config: &MpcConfig,
) -> Result<QpProblem> {
    CondensedPrediction::from_model(model, config)?.qp(z0, refs, d_hat)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub u: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub residuals: KktResiduals,
    /// Disturbance estimate used by this step's QP.
    pub d_hat: DVector<f64>,
    /// The solver failed and the previous input was reapplied.
    pub fallback: bool,
}

/// Receding-horizon controller with an optional disturbance observer.
pub struct MpcController {
    model: KoopmanModel,
    prediction: CondensedPrediction,
    config: MpcConfig,
    observer: Option<Geso>,
    previous: DVector<f64>,
    warm: WarmStart,
    faults: usize,
}

impl MpcController {
    /// `gains = None` disables disturbance compensation (`d̂ ≡ 0`).
    pub fn new(model: KoopmanModel, config: MpcConfig, gains: Option<GesoGains>) -> Result<Self> {
        model.validate()?;
        let prediction = CondensedPrediction::from_model(&model, &config)?;
        let observer = gains.map(|g| Geso::new(model.state_dim(), g)).transpose()?;
        let previous = DVector::zeros(model.m);
        Ok(MpcController {
            model,
            prediction,
            config,
            observer,
            previous,
            warm: WarmStart::default(),
            faults: 0,
        })
    }

    pub fn model(&self) -> &KoopmanModel {
        &self.model
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn observer(&self) -> Option<&Geso> {
        self.observer.as_ref()
    }

    /// Steps where the solver failed and the previous input was reused.
    pub fn faults(&self) -> usize {
        self.faults
    }

    pub fn d_hat(&self) -> DVector<f64> {
        self.observer
            .as_ref()
            .map_or_else(|| DVector::zeros(self.model.state_dim()), |o| o.d_hat().clone())
    }

    /// Computes the input for measurement `x_meas` given references
    /// `x_ref[0..s]` for the next `s` states.
    ///
    /// After the input is chosen the observer advances with the same
    /// measurement, lift and input, giving the estimate for the next step.
    pub fn step(&mut self, x_meas: &DVector<f64>, refs: &[DVector<f64>]) -> Result<StepReport> {
        check_dim("measured state", self.model.state_dim(), x_meas.len())?;
        check_finite("measured state", x_meas.as_slice())?;
        let z = self.model.lift(x_meas)?;
        let d_hat = self.d_hat();
        let qp = self.prediction.qp(&z, refs, &d_hat)?;
        let m = self.model.m;
        let s = self.prediction.horizon;
        let solution = solve_qp(&qp, &self.config.solver, &self.warm)?;
        let usable = matches!(solution.status, QpStatus::Solved | QpStatus::Inaccurate)
            && solution.x.iter().all(|v| v.is_finite());
        let (u, fallback) = if usable {
            if solution.status == QpStatus::Inaccurate {
                warn!("QP hit the iteration limit (residual {:.2e})", solution.residuals.max());
            }
            let u = DVector::from_fn(m, |j, _| {
                let b = self.config.input_bound(j);
                solution.x[j].clamp(b.lo(), b.hi())
            });
            // shift the plan one step for the next warm start
            let mut x = DVector::zeros(s * m);
            let mut y = DVector::zeros(qp.constraints());
            for k in 0..s {
                let src = (k + 1).min(s - 1) * m;
                x.rows_mut(k * m, m).copy_from(&solution.x.rows(src, m));
                y.rows_mut(k * m, m).copy_from(&solution.y.rows(src, m));
            }
            self.warm = WarmStart { x: Some(x), y: Some(y) };
            (u, false)
        } else {
            self.faults += 1;
            warn!("QP {:?}; reapplying the previous input", solution.status);
            self.warm = WarmStart::default();
            (self.previous.clone(), true)
        };
        if let Some(obs) = self.observer.as_mut() {
            obs.update(x_meas, &z, &u, &self.model)?;
        }
        self.previous = u.clone();
        Ok(StepReport {
            u,
            status: solution.status,
            iterations: solution.iterations,
            residuals: solution.residuals,
            d_hat,
            fallback,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{
        gravity_torque, step, DisturbanceSpec, Link, ManipulatorModel, MomentumState, Topology,
    };
    use crate::lifting::{Activation, EncoderArchitecture, EncoderNetwork};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn one_step_scalar_qp_matches_hand_arithmetic() {
        // z⁺ = a z + b u + d dt, cost w (z₁ − r)² + ρ u²
        let (a, b, dt, w, rho) = (0.9, 0.5, 0.1, 3.0, 0.2);
        let cfg = MpcConfig {
            horizon: 1,
            position_weight: w,
            momentum_weight: w,
            input_weight: rho,
            ..MpcConfig::default()
        };
        let pred = CondensedPrediction::new(&scalar(a), &scalar(b), &scalar(1.0), dt, &cfg).unwrap();
        let (z0, r, d) = (2.0, 1.0, 4.0);
        let qp = pred
            .qp(&DVector::from_element(1, z0), &[DVector::from_element(1, r)], &DVector::from_element(1, d))
            .unwrap();
        // J(u) = w (a z0 + b u + d dt − r)² + ρ u² = ½ H u² + f u + const
        assert!((qp.p[(0, 0)] - 2.0 * (w * b * b + rho)).abs() < 1e-14);
        assert!((qp.q[0] - 2.0 * w * b * (a * z0 + d * dt - r)).abs() < 1e-14);
    }

    #[test]
    fn zero_disturbance_reduces_to_plain_tracking_problem() {
        let cfg = MpcConfig {
            horizon: 4,
            ..MpcConfig::default()
        };
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 0.1]);
        let pred = CondensedPrediction::new(&a, &b, &DMatrix::identity(2, 2), 0.1, &cfg).unwrap();
        let z0 = DVector::from_column_slice(&[0.3, -0.2]);
        let refs = vec![DVector::from_column_slice(&[1.0, 0.0]); 4];
        let qp = pred.qp(&z0, &refs, &DVector::zeros(2)).unwrap();
        // brute-force linear cost from the prediction: f = ∇J(0) = ½ (J(e_i) − J(−e_i))
        for i in 0..4 {
            let mut e = DVector::zeros(4);
            e[i] = 1.0;
            let up = pred.cost(&z0, &e, &refs, &DVector::zeros(2));
            let down = pred.cost(&z0, &(-&e), &refs, &DVector::zeros(2));
            assert!(((up - down) / 2.0 - qp.q[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn disturbance_enters_through_the_dynamics() {
        let cfg = MpcConfig {
            horizon: 3,
            ..MpcConfig::default()
        };
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 0.1]);
        let pred = CondensedPrediction::new(&a, &b, &DMatrix::identity(2, 2), 0.1, &cfg).unwrap();
        let z0 = DVector::from_column_slice(&[0.0, 0.0]);
        let d = DVector::from_column_slice(&[0.0, 2.0]);
        let y = pred.predict_outputs(&z0, &DVector::zeros(3), &d);
        // simulate z⁺ = A z + Cᵀ d dt directly
        let mut z = z0.clone();
        for k in 0..3 {
            z = &a * &z + &d * 0.1;
            assert!((y.rows(2 * k, 2) - &z).amax() < 1e-14);
        }
        // the quadratic term is unchanged by d̂; only the linear term moves
        let refs = vec![DVector::zeros(2); 3];
        let with = pred.qp(&z0, &refs, &d).unwrap();
        let without = pred.qp(&z0, &refs, &DVector::zeros(2)).unwrap();
        assert_eq!(with.p, without.p);
        assert!(with.q != without.q);
    }

    #[test]
    fn state_bounds_become_affine_rows() {
        let cfg = MpcConfig {
            horizon: 2,
            state_bounds: vec![
                Bound {
                    lower: None,
                    upper: Some(0.5),
                },
                Bound::default(),
            ],
            input_bounds: vec![Bound::symmetric(1.0)],
            ..MpcConfig::default()
        };
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 0.1]);
        let pred = CondensedPrediction::new(&a, &b, &DMatrix::identity(2, 2), 0.1, &cfg).unwrap();
        let refs = vec![DVector::from_column_slice(&[2.0, 0.0]); 2];
        // q₁ = q₀ + 0.1 p₀ = 0.55 regardless of the inputs
        let doomed = pred.qp(&DVector::from_column_slice(&[0.45, 1.0]), &refs, &DVector::zeros(2)).unwrap();
        let sol = solve_qp(&doomed, &cfg.solver, &WarmStart::default()).unwrap();
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);

        let z0 = DVector::from_column_slice(&[0.3, 1.0]);
        let qp = pred.qp(&z0, &refs, &DVector::zeros(2)).unwrap();
        assert_eq!(qp.constraints(), 2 + 2);
        let sol = solve_qp(&qp, &cfg.solver, &WarmStart::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved, "{:?} {} {:?} {}", sol.residuals, sol.iterations, sol.x, sol.polished);
        let y = pred.predict_outputs(&z0, &sol.x, &DVector::zeros(2));
        assert!(y[0] <= 0.5 + 1e-8 && y[2] <= 0.5 + 1e-8, "{y}");
        assert!(sol.x.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn rejects_inverted_bounds_and_bilinear_models() {
        let cfg = MpcConfig {
            input_bounds: vec![Bound {
                lower: Some(1.0),
                upper: Some(0.0),
            }],
            ..MpcConfig::default()
        };
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 0.1]);
        assert!(CondensedPrediction::new(&a, &b, &DMatrix::identity(2, 2), 0.1, &cfg).is_err());

        let arch = EncoderArchitecture {
            hidden: vec![],
            activation: Activation::Linear,
            features: 0,
        };
        let nbk = KoopmanModel::new(Variant::Nbk, 1, 1, 0.1, EncoderNetwork::new(2, &arch, 0)).unwrap();
        assert!(MpcController::new(nbk, MpcConfig::default(), None).is_err());
    }

    /// Pendulum with a hand-built model that knows the inertia but not gravity.
    fn pendulum() -> (ManipulatorModel, KoopmanModel, f64) {
        let mut manip = ManipulatorModel::new(vec![Link::thin_rod(1.0, 0.5)], [0.0, -9.81, 0.0], Topology::Planar).unwrap();
        manip.friction = vec![0.05];
        let dt = 0.01;
        let inertia = 1.0 * 0.25 / 3.0;
        let arch = EncoderArchitecture {
            hidden: vec![],
            activation: Activation::Linear,
            features: 0,
        };
        let mut model = KoopmanModel::new(Variant::Proposed, 1, 1, dt, EncoderNetwork::new(2, &arch, 0)).unwrap();
        model.a = DMatrix::from_row_slice(2, 2, &[1.0, dt / inertia, 0.0, 1.0]);
        (manip, model, dt)
    }

    fn regulate(gains: Option<GesoGains>, q_ref: f64, gravity: bool) -> (f64, f64, f64) {
        let (mut manip, model, dt) = pendulum();
        if !gravity {
            manip.gravity = [0.0; 3];
        }
        let cfg = MpcConfig::default().with_input_limit(1, 20.0);
        let mut ctrl = MpcController::new(model, cfg, gains).unwrap();
        let mut state = MomentumState {
            q: DVector::from_element(1, q_ref),
            p: DVector::zeros(1),
        };
        let refs = vec![DVector::from_column_slice(&[q_ref, 0.0]); 20];
        let none = DisturbanceSpec::none();
        let mut u = 0.0;
        for k in 0..400 {
            let report = ctrl.step(&state.to_vector(), &refs).unwrap();
            assert!(!report.fallback);
            u = report.u[0];
            state = step(&manip, &state, &report.u, &none, k as f64 * dt, dt).unwrap();
        }
        let g_ref = gravity_torque(&manip, &DVector::from_element(1, q_ref)).unwrap()[0];
        (u, g_ref, state.q[0])
    }

    #[test]
    fn observer_supplies_gravity_compensation() {
        let q_ref = 0.3;
        let (u, g_ref, q) = regulate(Some(GesoGains::ARM), q_ref, true);
        assert!((u - g_ref).abs() < 0.02 * g_ref.abs(), "u = {u}, G = {g_ref}");
        assert!((q - q_ref).abs() < 1e-3);
        // without the observer the unmodelled gravity leaves an offset
        let (_, _, q_off) = regulate(None, q_ref, true);
        assert!((q_off - q_ref).abs() > 10.0 * (q - q_ref).abs());
    }

    #[test]
    fn rest_state_without_gravity_needs_no_input() {
        let (u, g_ref, q) = regulate(Some(GesoGains::ARM), 0.7, false);
        assert_eq!(g_ref, 0.0);
        assert!(u.abs() < 1e-9 && (q - 0.7).abs() < 1e-9);
    }
}
