//! Damped least-squares inverse kinematics for the end-effector position.

use nalgebra::{DVector, Matrix3, Vector3};

use crate::dynamics::{ee_jacobian, ee_position, ManipulatorModel};
use crate::error::{check_dim, Error, Result};

/// Converged once the position error is below this (m).
pub const IK_TOLERANCE: f64 = 1e-6;
const MAX_ITERATIONS: usize = 500;
const MAX_STEP: f64 = 0.5;

/// Joint positions placing the end effector at `target`, starting from
/// `q_guess`. Levenberg–Marquardt damping adapts to the error decrease.
pub fn inverse_kinematics(manip: &ManipulatorModel, target: &Vector3<f64>, q_guess: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("IK initial guess", manip.n, q_guess.len())?;
    if !target.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("IK target"));
    }
    if target.norm() > manip.reach() {
        return Err(Error::Unreachable([target.x, target.y, target.z]));
    }
    let mut q = q_guess.clone();
    let mut err = target - ee_position(manip, &q)?;
    let mut lambda = 1e-3;
    for _ in 0..MAX_ITERATIONS {
        if err.norm() < IK_TOLERANCE {
            return Ok(q);
        }
        let j = ee_jacobian(manip, &q)?;
        let jjt: Matrix3<f64> = Matrix3::from_fn(|r, c| j.row(r).dot(&j.row(c)));
        let mut accepted = false;
        for _ in 0..30 {
            let damped = jjt + Matrix3::identity() * (lambda * lambda);
            let Some(w) = damped.cholesky().map(|c| c.solve(&err)) else {
                lambda *= 4.0;
                continue;
            };
            let mut dq = j.transpose() * DVector::from_column_slice(w.as_slice());
            let step = dq.amax();
            if step > MAX_STEP {
                dq *= MAX_STEP / step;
            }
            let trial = &q + dq;
            let trial_err = target - ee_position(manip, &trial)?;
            if trial_err.norm() < err.norm() {
                q = trial;
                err = trial_err;
                lambda = (lambda * 0.5).max(1e-9);
                accepted = true;
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    if err.norm() < IK_TOLERANCE {
        Ok(q)
    } else {
        Err(Error::IkNoConvergence { residual: err.norm() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Topology;

    #[test]
    fn two_link_boundary_target_gives_straight_arm() {
        let arm = ManipulatorModel::thin_rod_chain(2, 1.0, 0.5, Topology::Planar).unwrap();
        let angle: f64 = 0.4;
        let target = Vector3::new(angle.cos(), angle.sin(), 0.0);
        let q = inverse_kinematics(&arm, &target, &DVector::from_column_slice(&[0.0, 0.8])).unwrap();
        assert!(q[1].abs() < 1e-2, "elbow {}", q[1]);
        assert!((q[0] - angle).abs() < 1e-2);
    }

    #[test]
    fn two_link_interior_target_matches_law_of_cosines() {
        let arm = ManipulatorModel::thin_rod_chain(2, 1.0, 0.5, Topology::Planar).unwrap();
        let target = Vector3::new(0.6, 0.3, 0.0);
        let q = inverse_kinematics(&arm, &target, &DVector::from_column_slice(&[0.0, 1.0])).unwrap();
        let d2 = target.x * target.x + target.y * target.y;
        let c2 = (d2 - 0.25 - 0.25) / (2.0 * 0.25);
        let q2 = c2.acos();
        let q1 = target.y.atan2(target.x) - (0.5 * q2.sin()).atan2(0.5 + 0.5 * q2.cos());
        assert!((q[1] - q2).abs() < 1e-5 && (q[0] - q1).abs() < 1e-5, "{q}");
    }

    #[test]
    fn round_trip_on_spatial_arm() {
        let arm = ManipulatorModel::three_link_arm();
        let guess = DVector::from_column_slice(&[0.0, -0.5, 1.0]);
        for target in [Vector3::new(0.6, 0.1, 0.1), Vector3::new(0.4, -0.3, -0.2), Vector3::new(0.7, 0.0, 0.3)] {
            let q = inverse_kinematics(&arm, &target, &guess).unwrap();
            assert!((ee_position(&arm, &q).unwrap() - target).norm() < IK_TOLERANCE);
        }
    }

    #[test]
    fn reports_unreachable_targets() {
        let arm = ManipulatorModel::three_link_arm();
        let far = Vector3::new(1.0, 0.1, 0.0);
        assert!(matches!(
            inverse_kinematics(&arm, &far, &DVector::zeros(3)),
            Err(Error::Unreachable(_))
        ));
        // inside the ball but off the planar chain's plane: no solution exists
        let planar = ManipulatorModel::thin_rod_chain(2, 1.0, 0.5, Topology::Planar).unwrap();
        assert!(matches!(
            inverse_kinematics(&planar, &Vector3::new(0.3, 0.0, 0.3), &DVector::from_column_slice(&[0.0, 0.5])),
            Err(Error::IkNoConvergence { .. })
        ));
    }
}
