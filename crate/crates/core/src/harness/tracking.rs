//! Closed-loop tracking of task-space paths.

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    ee_position, mass_matrix, step, velocity_from_momentum, DisturbanceSpec, ManipulatorModel,
    MomentumState,
};
use crate::error::{Error, Result};
use crate::geso::GesoGains;
use crate::harness::ik::inverse_kinematics;
use crate::harness::path::{path_margin, PathKind, PathSpec};
use crate::harness::report::sha256_json;
use crate::koopman::{KoopmanModel, StateConvention, Variant};
use crate::mpc::{MpcConfig, MpcController};
use crate::qp::QpStatus;

/// Joint-space reference sampled at the control period.
#[derive(Clone, Debug)]
pub struct JointReference {
    pub dt: f64,
    pub points: Vec<Vector3<f64>>,
    pub q: Vec<DVector<f64>>,
    pub qd: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
}

impl JointReference {
    /// IK at every sample (each warm-started from the previous solution),
    /// central-difference velocities, and momenta `M(q) q̇`.
    pub fn from_path(manip: &ManipulatorModel, path: &PathSpec, dt: f64, q_guess: &DVector<f64>) -> Result<Self> {
        path.validate()?;
        let points = path.sample(dt);
        let mut q = Vec::with_capacity(points.len());
        let mut guess = q_guess.clone();
        for p in &points {
            let sol = inverse_kinematics(manip, p, &guess)?;
            guess = sol.clone();
            q.push(sol);
        }
        let k = q.len();
        let qd: Vec<DVector<f64>> = (0..k)
            .map(|i| match (i, k) {
                (_, 1) => DVector::zeros(manip.n),
                (0, _) => (&q[1] - &q[0]) / dt,
                (i, k) if i == k - 1 => (&q[k - 1] - &q[k - 2]) / dt,
                (i, _) => (&q[i + 1] - &q[i - 1]) / (2.0 * dt),
            })
            .collect();
        let p = q
            .iter()
            .zip(&qd)
            .map(|(q, qd)| Ok(mass_matrix(manip, q)? * qd))
            .collect::<Result<Vec<_>>>()?;
        Ok(JointReference { dt, points, q, qd, p })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Reference state `k` in the given convention; indices past the end
    /// repeat the final sample.
    pub fn state(&self, k: usize, convention: StateConvention) -> DVector<f64> {
        let k = k.min(self.len() - 1);
        let second = match convention {
            StateConvention::Momentum => &self.p[k],
            StateConvention::Explicit => &self.qd[k],
        };
        let n = self.q[k].len();
        let mut x = DVector::zeros(2 * n);
        x.rows_mut(0, n).copy_from(&self.q[k]);
        x.rows_mut(n, n).copy_from(second);
        x
    }
}

/// Default IK seed: elbow bent so the arm starts away from the straight,
/// singular configuration.
pub fn default_ik_guess(n: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| match i {
        0 => 0.0,
        1 => -0.5,
        _ => 0.8 / (n - 2) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    pub path: PathSpec,
    /// `d0`–`d3` or a full disturbance description.
    pub disturbance: DisturbanceChoice,
    pub mpc: MpcConfig,
    /// Observer gains; `None` runs plain Koopman MPC.
    pub geso: Option<GesoGains>,
    pub ik_guess: Option<Vec<f64>>,
    /// Required distance between the path and the workspace boundary (m).
    pub workspace_margin: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            path: PathSpec::default(),
            disturbance: DisturbanceChoice::Preset("d0".into()),
            mpc: MpcConfig {
                input_weight: 1e-3,
                ..MpcConfig::default()
            },
            geso: Some(GesoGains::ARM),
            ik_guess: None,
            workspace_margin: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DisturbanceChoice {
    Preset(String),
    Custom(DisturbanceSpec),
}

impl DisturbanceChoice {
    pub fn resolve(&self, n: usize) -> Result<DisturbanceSpec> {
        match self {
            DisturbanceChoice::Preset(name) => DisturbanceSpec::preset(name, n),
            DisturbanceChoice::Custom(spec) => Ok(spec.clone()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            DisturbanceChoice::Preset(name) => name.clone(),
            DisturbanceChoice::Custom(_) => "custom".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlLogRow {
    pub t: f64,
    pub q_ref: Vec<f64>,
    pub q: Vec<f64>,
    pub u: Vec<f64>,
    pub d_hat: Vec<f64>,
    pub solve_iters: usize,
    pub kkt_residual: f64,
    pub x_meas: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub ee_ref: [f64; 3],
    pub ee: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    /// RMS of `‖ee(q) − path‖` over the run (m).
    pub rmse_task: f64,
    /// RMS joint-position error over all joints (rad).
    pub rmse_joint: f64,
    pub max_task_error: f64,
    pub steps: usize,
    /// Steps where the QP failed and the previous input was reused.
    pub solver_faults: usize,
    pub inaccurate_solves: usize,
    /// The plant left the valid state region; errors cover the steps before.
    pub diverged: bool,
    pub path_margin: f64,
}

#[derive(Clone, Debug)]
pub struct TrackingRun {
    pub summary: TrackingSummary,
    pub log: Vec<ControlLogRow>,
}

/// Runs `model` in closed loop on the simulated manipulator along `cfg.path`.
///
/// The plant starts on the reference state. At every period the controller
/// sees the exact state (in the model's coordinates) and the next `s`
/// reference states; the plant integrates one period under the chosen input
/// plus the configured disturbance.
pub fn run_tracking(manip: &ManipulatorModel, model: &KoopmanModel, cfg: &TrackingConfig) -> Result<TrackingRun> {
    if model.n != manip.n {
        return Err(Error::config("model", format!("model has n = {}, manipulator has {}", model.n, manip.n)));
    }
    let margin = path_margin(manip, &cfg.path, model.dt);
    if margin < cfg.workspace_margin {
        return Err(Error::config(
            "path",
            format!("path comes within {margin:.3} m of the workspace boundary"),
        ));
    }
    let disturbance = cfg.disturbance.resolve(manip.n)?;
    let guess = match &cfg.ik_guess {
        Some(g) => DVector::from_column_slice(g),
        None => default_ik_guess(manip.n),
    };
    let reference = JointReference::from_path(manip, &cfg.path, model.dt, &guess)?;
    let mut controller = MpcController::new(model.clone(), cfg.mpc.clone(), cfg.geso)?;
    let s = controller.config().horizon;
    let convention = model.convention;
    let dt = model.dt;
    let n = manip.n;

    let mut state = MomentumState {
        q: reference.q[0].clone(),
        p: reference.p[0].clone(),
    };
    let measure = |state: &MomentumState| -> Result<DVector<f64>> {
        match convention {
            StateConvention::Momentum => Ok(state.to_vector()),
            StateConvention::Explicit => {
                let qd = velocity_from_momentum(manip, state)?;
                let mut x = DVector::zeros(2 * n);
                x.rows_mut(0, n).copy_from(&state.q);
                x.rows_mut(n, n).copy_from(&qd);
                Ok(x)
            }
        }
    };

    let mut log = Vec::with_capacity(reference.len());
    let (mut task_sq, mut joint_sq, mut max_err) = (0.0, 0.0, 0.0f64);
    let mut samples = 0usize;
    let mut inaccurate = 0usize;
    let mut diverged = false;
    for k in 0..reference.len() {
        let t = k as f64 * dt;
        let ee = ee_position(manip, &state.q)?;
        let e = (ee - reference.points[k]).norm();
        task_sq += e * e;
        joint_sq += (&state.q - &reference.q[k]).norm_squared() / n as f64;
        max_err = max_err.max(e);
        samples += 1;

        let x = measure(&state)?;
        let refs: Vec<DVector<f64>> = (1..=s).map(|j| reference.state(k + j, convention)).collect();
        let x_hat = controller.observer().map(|o| o.x_hat().as_slice().to_vec()).unwrap_or_default();
        let report = controller.step(&x, &refs)?;
        if report.status == QpStatus::Inaccurate {
            inaccurate += 1;
        }
        log.push(ControlLogRow {
            t,
            q_ref: reference.q[k].as_slice().to_vec(),
            q: state.q.as_slice().to_vec(),
            u: report.u.as_slice().to_vec(),
            d_hat: report.d_hat.as_slice().to_vec(),
            solve_iters: report.iterations,
            kkt_residual: report.residuals.max(),
            x_meas: x.as_slice().to_vec(),
            x_hat,
            ee_ref: reference.points[k].into(),
            ee: ee.into(),
        });
        if k + 1 == reference.len() {
            break;
        }
        match step(manip, &state, &report.u, &disturbance, t, dt) {
            Ok(next) => state = next,
            Err(Error::Divergence { .. }) | Err(Error::NotPositiveDefinite(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let summary = TrackingSummary {
        rmse_task: (task_sq / samples as f64).sqrt(),
        rmse_joint: (joint_sq / samples as f64).sqrt(),
        max_task_error: max_err,
        steps: samples,
        solver_faults: controller.faults(),
        inaccurate_solves: inaccurate,
        diverged,
        path_margin: margin,
    };
    Ok(TrackingRun { summary, log })
}

/// Writes the controller log as CSV:
/// `t, q_ref*, q*, u*, d_hat*, solve_iters, kkt_residual`.
pub fn write_control_log(path: &std::path::Path, log: &[ControlLogRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    if let Some(first) = log.first() {
        let mut header = vec!["t".to_string()];
        let named = |prefix: &'static str, len: usize| (1..=len).map(move |i| format!("{prefix}{i}"));
        header.extend(named("q_ref", first.q_ref.len()));
        header.extend(named("q", first.q.len()));
        header.extend(named("u", first.u.len()));
        header.extend(named("d_hat", first.d_hat.len()));
        header.push("solve_iters".into());
        header.push("kkt_residual".into());
        w.write_record(&header)?;
    }
    for row in log {
        let mut rec = vec![fmt(row.t)];
        for v in row.q_ref.iter().chain(&row.q).chain(&row.u).chain(&row.d_hat) {
            rec.push(fmt(*v));
        }
        rec.push(row.solve_iters.to_string());
        rec.push(fmt(row.kkt_residual));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the observer log as CSV: `t, x_meas*, x_hat*, d_hat*`.
pub fn write_observer_log(path: &std::path::Path, log: &[ControlLogRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    if let Some(first) = log.iter().find(|r| !r.x_hat.is_empty()) {
        let dim = first.x_meas.len();
        let mut header = vec!["t".to_string()];
        for prefix in ["x_meas", "x_hat", "d_hat"] {
            header.extend((1..=dim).map(|i| format!("{prefix}{i}")));
        }
        w.write_record(&header)?;
        for row in log.iter().filter(|r| !r.x_hat.is_empty()) {
            let mut rec = vec![fmt(row.t)];
            rec.extend(row.x_meas.iter().chain(&row.x_hat).chain(&row.d_hat).map(|v| fmt(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes reference and achieved end-effector positions for path overlays.
pub fn write_path_log(path: &std::path::Path, log: &[ControlLogRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(["t", "x_ref", "y_ref", "z_ref", "x", "y", "z"])?;
    for row in log {
        let mut rec = vec![fmt(row.t)];
        rec.extend(row.ee_ref.iter().chain(&row.ee).map(|v| fmt(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One closed-loop run with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub label: String,
    pub variant: Variant,
    pub path: PathKind,
    pub disturbance: String,
    pub geso: bool,
    pub summary: TrackingSummary,
    pub config_hash: String,
    pub model_hash: String,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub rows: Vec<TrackingRow>,
}

impl TrackingReport {
    pub fn find(&self, label: &str, path: PathKind, disturbance: &str, geso: bool) -> Option<&TrackingRow> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.path == path && r.disturbance == disturbance && r.geso == geso)
    }
}

/// Runs `model` on every configuration in `scenarios` (in parallel) and
/// tags each result with hashes of the configuration and the model.
pub fn run_tracking_scenarios(
    manip: &ManipulatorModel,
    model: &KoopmanModel,
    label: &str,
    scenarios: &[TrackingConfig],
) -> Result<Vec<TrackingRow>> {
    let model_hash = sha256_json(model)?;
    let seed = model.training.as_ref().map(|t| t.seed);
    scenarios
        .par_iter()
        .map(|cfg| {
            let run = run_tracking(manip, model, cfg)?;
            Ok(TrackingRow {
                label: label.to_string(),
                variant: model.variant,
                path: cfg.path.kind,
                disturbance: cfg.disturbance.label(),
                geso: cfg.geso.is_some(),
                summary: run.summary,
                config_hash: sha256_json(cfg)?,
                model_hash: model_hash.clone(),
                seed,
            })
        })
        .collect()
}

/// Every combination of `paths`, disturbance presets and observer on/off on
/// top of `base`.
pub fn scenario_grid(base: &TrackingConfig, paths: &[PathSpec], disturbances: &[&str], observer: &[bool]) -> Vec<TrackingConfig> {
    let mut out = Vec::new();
    for path in paths {
        for d in disturbances {
            for &on in observer {
                out.push(TrackingConfig {
                    path: path.clone(),
                    disturbance: DisturbanceChoice::Preset(d.to_string()),
                    geso: if on { Some(base.geso.unwrap_or(GesoGains::ARM)) } else { None },
                    ..base.clone()
                });
            }
        }
    }
    out
}

fn fmt(v: f64) -> String {
    crate::training::fmt_f64(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::gravity_torque;
    use crate::lifting::{Activation, EncoderArchitecture, EncoderNetwork};

    #[test]
    fn reference_momentum_matches_mass_matrix() {
        let arm = ManipulatorModel::three_link_arm();
        let spec = PathSpec {
            duration: 1.0,
            ..PathSpec::preset(PathKind::Hypotrochoid)
        };
        let r = JointReference::from_path(&arm, &spec, 0.01, &default_ik_guess(3)).unwrap();
        assert_eq!(r.len(), 101);
        for k in [0, 50, 100] {
            assert!((ee_position(&arm, &r.q[k]).unwrap() - r.points[k]).norm() < 1e-6);
            let p = mass_matrix(&arm, &r.q[k]).unwrap() * &r.qd[k];
            assert!((p - &r.p[k]).amax() < 1e-12);
        }
        // central differences of a smooth path: the velocity matches the
        // analytic task-space speed through the Jacobian
        let j = crate::dynamics::ee_jacobian(&arm, &r.q[50]).unwrap();
        let v = (spec.point(0.51) - spec.point(0.49)) / 0.02;
        assert!((j * &r.qd[50] - DVector::from_column_slice(v.as_slice())).amax() < 1e-3);
    }

    /// A hand-built model of the 3R arm that only knows `q⁺ = q + dt M⁻¹(q_ref) p`.
    fn frozen_inertia_model(arm: &ManipulatorModel, q: &DVector<f64>, dt: f64) -> KoopmanModel {
        let arch = EncoderArchitecture {
            hidden: vec![],
            activation: Activation::Linear,
            features: 0,
        };
        let mut model = KoopmanModel::new(Variant::Proposed, 3, 3, dt, EncoderNetwork::new(6, &arch, 0)).unwrap();
        let minv = mass_matrix(arm, q).unwrap().try_inverse().unwrap();
        model.a.view_mut((0, 3), (3, 3)).copy_from(&(minv * dt));
        model
    }

    #[test]
    fn point_reference_rmse_is_the_regulation_error() {
        let arm = ManipulatorModel::three_link_arm();
        let spec = PathSpec::preset(PathKind::Point);
        let guess = default_ik_guess(3);
        let r = JointReference::from_path(&arm, &spec, 0.01, &guess).unwrap();
        let model = frozen_inertia_model(&arm, &r.q[0], 0.01);
        let cfg = TrackingConfig {
            path: spec,
            mpc: MpcConfig::default().with_input_limit(3, 50.0),
            ..TrackingConfig::default()
        };
        let run = run_tracking(&arm, &model, &cfg).unwrap();
        let rms = (run
            .log
            .iter()
            .map(|row| (Vector3::from(row.ee) - Vector3::from(row.ee_ref)).norm_squared())
            .sum::<f64>()
            / run.log.len() as f64)
            .sqrt();
        assert!((run.summary.rmse_task - rms).abs() < 1e-15);
        assert!(!run.summary.diverged);
        // gravity is absorbed by the observer: the final torque holds the arm
        let last = run.log.last().unwrap();
        let g = gravity_torque(&arm, &DVector::from_column_slice(&last.q_ref)).unwrap();
        let u = DVector::from_column_slice(&last.u);
        assert!((u - &g).norm() < 0.02 * g.norm(), "{:?} vs {g}", last.u);
    }

    #[test]
    fn rejects_paths_near_the_workspace_boundary() {
        let arm = ManipulatorModel::three_link_arm();
        let model = frozen_inertia_model(&arm, &default_ik_guess(3), 0.01);
        let cfg = TrackingConfig {
            path: PathSpec {
                center: [0.96, 0.0, 0.0],
                ..PathSpec::preset(PathKind::Point)
            },
            ..TrackingConfig::default()
        };
        assert!(run_tracking(&arm, &model, &cfg).is_err());
    }

    #[test]
    fn logs_have_documented_columns() {
        let row = ControlLogRow {
            t: 0.0,
            q_ref: vec![1.0, 2.0],
            q: vec![1.0, 2.0],
            u: vec![0.5, 0.25],
            d_hat: vec![0.0; 4],
            solve_iters: 3,
            kkt_residual: 1e-9,
            x_meas: vec![0.0; 4],
            x_hat: vec![0.0; 4],
            ee_ref: [0.0; 3],
            ee: [0.0; 3],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("control.csv");
        write_control_log(&path, &[row.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "t,q_ref1,q_ref2,q1,q2,u1,u2,d_hat1,d_hat2,d_hat3,d_hat4,solve_iters,kkt_residual\n0.0,1.0,2.0,1.0,2.0,0.5,0.25,0.0,0.0,0.0,0.0,3,1e-9\n"
        ));
        let obs = dir.path().join("observer.csv");
        write_observer_log(&obs, &[row]).unwrap();
        assert!(std::fs::read_to_string(&obs).unwrap().starts_with("t,x_meas1,"));
    }
}
