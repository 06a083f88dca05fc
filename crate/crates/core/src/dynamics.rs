//! Rigid-body simulation of revolute serial chains.
//!
//! Every link frame has its x axis along the link. Joint `i` sits at the tip of
//! link `i - 1` (joint 0 at the base origin) and rotates link `i` about a fixed
//! axis expressed in that link's frame. With all joint axes perpendicular to x
//! the mass matrix is positive definite for every configuration.
//!
//! Joint-space dynamics follow `M(q) q̈ + C(q, q̇) q̇ + G(q) + D q̇ = τ + τ_d`,
//! evaluated with a world-frame recursive Newton-Euler pass. The mass matrix is
//! assembled column by column from unit-acceleration passes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

/// Planar chains rotate every joint about z. Spatial chains use a vertical yaw
/// joint followed by pitch joints about the local y axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    #[default]
    Planar,
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub mass: f64,
    pub length: f64,
    /// Principal inertia about the center of mass, in the link frame (kg·m²).
    pub inertia_diag: [f64; 3],
    /// Center of mass position along the link as a fraction of its length.
    #[serde(default = "default_com_ratio")]
    pub com_ratio: f64,
}

fn default_com_ratio() -> f64 {
    0.5
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

impl Link {
    /// Thin rod with inertia `diag[0, m l²/12, m l²/12]` about its midpoint.
    pub fn thin_rod(mass: f64, length: f64) -> Self {
        let i = mass * length * length / 12.0;
        Link {
            mass,
            length,
            inertia_diag: [0.0, i, i],
            com_ratio: 0.5,
        }
    }

    /// Solid cylinder of radius `radius` along the link x axis.
    pub fn cylinder(mass: f64, length: f64, radius: f64) -> Self {
        let transverse = mass * (3.0 * radius * radius + length * length) / 12.0;
        Link {
            mass,
            length,
            inertia_diag: [mass * radius * radius / 2.0, transverse, transverse],
            com_ratio: 0.5,
        }
    }

    /// Point mass at the link tip.
    pub fn tip_mass(mass: f64, length: f64) -> Self {
        Link {
            mass,
            length,
            inertia_diag: [0.0; 3],
            com_ratio: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulatorModel {
    pub n: usize,
    pub links: Vec<Link>,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    /// Viscous joint friction coefficients; empty means frictionless.
    #[serde(default)]
    pub friction: Vec<f64>,
    #[serde(default)]
    pub topology: Topology,
    /// Explicit joint axes in link frames, overriding `topology`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<Vec<[f64; 3]>>,
    /// Longest RK4 substep the plant takes; `None` integrates each step in one go.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_substep: Option<f64>,
}

impl ManipulatorModel {
    pub fn new(links: Vec<Link>, gravity: [f64; 3], topology: Topology) -> Result<Self> {
        let model = ManipulatorModel {
            n: links.len(),
            links,
            gravity,
            friction: Vec::new(),
            topology,
            axes: None,
            max_substep: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Uniform chain of thin rods.
    pub fn thin_rod_chain(n: usize, mass: f64, length: f64, topology: Topology) -> Result<Self> {
        Self::new(
            vec![Link::thin_rod(mass, length); n],
            default_gravity(),
            topology,
        )
    }

    /// The 3R spatial arm used in the tracking benchmarks: 0.6 kg, 0.33 m thin rods.
    pub fn three_link_arm() -> Self {
        Self::thin_rod_chain(3, 0.6, 0.33, Topology::Spatial).expect("valid constants")
    }

    /// Redundant 7-DoF arm with 1 m reach and link masses of a collaborative
    /// arm: base yaw, shoulder and elbow pitch, then a yaw/pitch wrist.
    pub fn seven_link_arm() -> Self {
        let masses = [2.0, 1.5, 1.5, 1.0, 0.6, 0.5, 0.4];
        let lengths = [0.1, 0.3, 0.3, 0.1, 0.1, 0.05, 0.05];
        let radii = [0.06, 0.05, 0.05, 0.05, 0.04, 0.04, 0.04];
        let links = (0..7).map(|i| Link::cylinder(masses[i], lengths[i], radii[i])).collect();
        let mut model = Self::new(links, default_gravity(), Topology::Spatial).expect("valid constants");
        let (z, y) = ([0.0, 0.0, 1.0], [0.0, 1.0, 0.0]);
        model.axes = Some(vec![z, y, y, z, y, z, y]);
        model.max_substep = Some(1e-3);
        model
    }

    /// Named models: `three_link_arm`, `seven_link_arm` and `planar_N`
    /// (uniform 0.6 kg, 0.33 m planar chain of `N` links).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "three_link_arm" => Ok(Self::three_link_arm()),
            "seven_link_arm" => Ok(Self::seven_link_arm()),
            _ => match name.strip_prefix("planar_").and_then(|n| n.parse().ok()) {
                Some(n) => Self::thin_rod_chain(n, 0.6, 0.33, Topology::Planar),
                None => Err(Error::InvalidModel(format!("unknown manipulator `{name}`"))),
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ManipulatorModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidModel("n must be at least 1".into()));
        }
        if self.links.len() != self.n {
            return Err(Error::InvalidModel(format!(
                "n = {} but {} links given",
                self.n,
                self.links.len()
            )));
        }
        for (i, link) in self.links.iter().enumerate() {
            if !(link.mass > 0.0 && link.mass.is_finite()) {
                return Err(Error::InvalidModel(format!("links[{i}].mass must be > 0")));
            }
            if !(link.length > 0.0 && link.length.is_finite()) {
                return Err(Error::InvalidModel(format!("links[{i}].length must be > 0")));
            }
            if link.inertia_diag.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidModel(format!(
                    "links[{i}].inertia_diag must be finite and non-negative"
                )));
            }
            if !link.com_ratio.is_finite() {
                return Err(Error::InvalidModel(format!("links[{i}].com_ratio must be finite")));
            }
        }
        if !self.friction.is_empty() && self.friction.len() != self.n {
            return Err(Error::InvalidModel(format!(
                "friction has {} entries, expected {}",
                self.friction.len(),
                self.n
            )));
        }
        if let Some(h) = self.max_substep {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidModel("max_substep must be positive".into()));
            }
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidModel("gravity must be finite".into()));
        }
        if let Some(axes) = &self.axes {
            if axes.len() != self.n {
                return Err(Error::InvalidModel(format!(
                    "axes has {} entries, expected {}",
                    axes.len(),
                    self.n
                )));
            }
            if axes.iter().any(|a| Vector3::from(*a).norm() < 1e-12) {
                return Err(Error::InvalidModel("joint axes must be non-zero".into()));
            }
        }
        Ok(())
    }

    /// Sum of link lengths: the outer reach radius measured from joint 0.
    pub fn reach(&self) -> f64 {
        self.links.iter().map(|l| l.length).sum()
    }

    pub fn joint_axis(&self, i: usize) -> Vector3<f64> {
        if let Some(axes) = &self.axes {
            return Vector3::from(axes[i]).normalize();
        }
        match (self.topology, i) {
            (Topology::Planar, _) | (Topology::Spatial, 0) => Vector3::z(),
            (Topology::Spatial, _) => Vector3::y(),
        }
    }

    fn gravity_vec(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    fn friction_torque(&self, qd: &DVector<f64>) -> DVector<f64> {
        if self.friction.is_empty() {
            DVector::zeros(self.n)
        } else {
            DVector::from_iterator(self.n, self.friction.iter().zip(qd.iter()).map(|(d, v)| d * v))
        }
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<()> {
        check_dim("joint positions", self.n, q.len())?;
        check_finite("joint positions", q.as_slice())
    }

    fn check_qd(&self, qd: &DVector<f64>) -> Result<()> {
        check_dim("joint velocities", self.n, qd.len())?;
        check_finite("joint velocities", qd.as_slice())
    }
}

/// World-frame placement of every link for one configuration.
struct Kinematics {
    rot: Vec<Matrix3<f64>>,
    origin: Vec<Vector3<f64>>,
    axis: Vec<Vector3<f64>>,
    com: Vec<Vector3<f64>>,
    tip: Vector3<f64>,
}

impl Kinematics {
    fn new(model: &ManipulatorModel, q: &DVector<f64>) -> Self {
        let n = model.n;
        let mut rot = Vec::with_capacity(n);
        let mut origin = Vec::with_capacity(n);
        let mut axis = Vec::with_capacity(n);
        let mut com = Vec::with_capacity(n);
        let mut parent_rot = Matrix3::identity();
        let mut joint_pos = Vector3::zeros();
        for i in 0..n {
            let local_axis = model.joint_axis(i);
            let r = parent_rot
                * Rotation3::from_axis_angle(&Unit::new_normalize(local_axis), q[i]).into_inner();
            let link = &model.links[i];
            let dir = r * Vector3::x();
            rot.push(r);
            origin.push(joint_pos);
            axis.push(parent_rot * local_axis);
            com.push(joint_pos + dir * (link.com_ratio * link.length));
            joint_pos += dir * link.length;
            parent_rot = r;
        }
        Kinematics {
            rot,
            origin,
            axis,
            com,
            tip: joint_pos,
        }
    }

    fn inertia_world(&self, model: &ManipulatorModel, i: usize) -> Matrix3<f64> {
        let local = Matrix3::from_diagonal(&Vector3::from(model.links[i].inertia_diag));
        self.rot[i] * local * self.rot[i].transpose()
    }
}

/// Recursive Newton-Euler inverse dynamics without friction.
fn rnea(
    model: &ManipulatorModel,
    kin: &Kinematics,
    qd: &DVector<f64>,
    qdd: &DVector<f64>,
    with_gravity: bool,
) -> DVector<f64> {
    let n = model.n;
    let mut omega = Vector3::zeros();
    let mut alpha = Vector3::zeros();
    // Gravity enters as an upward acceleration of the base.
    let mut acc_origin = if with_gravity {
        -model.gravity_vec()
    } else {
        Vector3::zeros()
    };
    let mut forces = Vec::with_capacity(n);
    let mut moments = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            let r = kin.origin[i] - kin.origin[i - 1];
            acc_origin += alpha.cross(&r) + omega.cross(&omega.cross(&r));
        }
        let z = kin.axis[i];
        let omega_next = omega + z * qd[i];
        alpha += z * qdd[i] + omega.cross(&(z * qd[i]));
        omega = omega_next;

        let rc = kin.com[i] - kin.origin[i];
        let acc_com = acc_origin + alpha.cross(&rc) + omega.cross(&omega.cross(&rc));
        let inertia = kin.inertia_world(model, i);
        forces.push(acc_com * model.links[i].mass);
        moments.push(inertia * alpha + omega.cross(&(inertia * omega)));
    }

    let mut tau = DVector::zeros(n);
    let mut f_child: Vector3<f64> = Vector3::zeros();
    let mut n_child: Vector3<f64> = Vector3::zeros();
    for i in (0..n).rev() {
        let child_origin = if i + 1 < n {
            kin.origin[i + 1]
        } else {
            kin.tip
        };
        let rc = kin.com[i] - kin.origin[i];
        let f = forces[i] + f_child;
        let moment = moments[i]
            + rc.cross(&forces[i])
            + n_child
            + (child_origin - kin.origin[i]).cross(&f_child);
        tau[i] = moment.dot(&kin.axis[i]);
        f_child = f;
        n_child = moment;
    }
    tau
}

fn mass_matrix_from(model: &ManipulatorModel, kin: &Kinematics) -> DMatrix<f64> {
    let n = model.n;
    let zero = DVector::zeros(n);
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        m.set_column(j, &rnea(model, kin, &zero, &e, false));
    }
    // Columns are symmetric analytically; remove round-off asymmetry.
    let mt = m.transpose();
    (m + mt) * 0.5
}

fn cholesky(m: DMatrix<f64>, q: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::NotPositiveDefinite(q.iter().copied().collect()))
}

/// Joint-space mass matrix `M(q)`.
pub fn mass_matrix(model: &ManipulatorModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.check_q(q)?;
    let kin = Kinematics::new(model, q);
    Ok(mass_matrix_from(model, &kin))
}

/// Returns `(M, C q̇, G)`.
///
/// `C q̇` equals the Christoffel-symbol Coriolis/centrifugal vector of `M`. The
/// mass matrix is verified positive definite by a Cholesky factorization.
pub fn dynamics_terms(
    model: &ManipulatorModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    model.check_q(q)?;
    model.check_qd(qd)?;
    let kin = Kinematics::new(model, q);
    let m = mass_matrix_from(model, &kin);
    cholesky(m.clone(), q)?;
    let zero = DVector::zeros(model.n);
    let coriolis = rnea(model, &kin, qd, &zero, false);
    let gravity = rnea(model, &kin, &zero, &zero, true);
    Ok((m, coriolis, gravity))
}

pub fn gravity_torque(model: &ManipulatorModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_q(q)?;
    let kin = Kinematics::new(model, q);
    let zero = DVector::zeros(model.n);
    Ok(rnea(model, &kin, &zero, &zero, true))
}

/// Kind of external disturbance applied to the plant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Disturbance {
    #[default]
    None,
    /// `τ_d = gain · u`.
    ActuatorFault { gain: f64 },
    /// Constant joint torque (N·m).
    ConstantTorque { torque: Vec<f64> },
    /// Constant force at the end effector (N), mapped through `Jᵀ`.
    EeLoad { force: [f64; 3] },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    #[serde(flatten)]
    pub kind: Disturbance,
    #[serde(default)]
    pub t_on: f64,
    /// `None` keeps the disturbance active indefinitely.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_off: Option<f64>,
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn always(kind: Disturbance) -> Self {
        DisturbanceSpec {
            kind,
            t_on: 0.0,
            t_off: None,
        }
    }

    /// Benchmark disturbance presets `d0`..`d3` for an `n`-joint chain:
    /// none, `τ_d = −0.6 u`, `τ_d = 10 N·m` per joint, and a `[20, 20, 20] N` tip load.
    pub fn preset(name: &str, n: usize) -> Result<Self> {
        let kind = match name {
            "d0" | "none" => Disturbance::None,
            "d1" => Disturbance::ActuatorFault { gain: -0.6 },
            "d2" => Disturbance::ConstantTorque {
                torque: vec![10.0; n],
            },
            "d3" => Disturbance::EeLoad {
                force: [20.0, 20.0, 20.0],
            },
            other => {
                return Err(Error::config(
                    "disturbance",
                    format!("unknown preset `{other}` (expected d0, d1, d2 or d3)"),
                ))
            }
        };
        Ok(Self::always(kind))
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.t_on && self.t_off.is_none_or(|off| t < off)
    }

    /// Disturbance torque at time `t` for configuration `q` under command `u`.
    pub fn torque(
        &self,
        model: &ManipulatorModel,
        t: f64,
        q: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if !self.is_active(t) {
            return Ok(DVector::zeros(model.n));
        }
        match &self.kind {
            Disturbance::None => Ok(DVector::zeros(model.n)),
            Disturbance::ActuatorFault { gain } => Ok(u * *gain),
            Disturbance::ConstantTorque { torque } => {
                check_dim("constant torque disturbance", model.n, torque.len())?;
                Ok(DVector::from_column_slice(torque))
            }
            Disturbance::EeLoad { force } => {
                let jac = ee_jacobian(model, q)?;
                Ok(jac.transpose() * DVector::from_column_slice(force))
            }
        }
    }
}

/// Joint accelerations under applied torque `tau` and disturbance `dist` at time `t`.
pub fn forward_dynamics(
    model: &ManipulatorModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    tau: &DVector<f64>,
    dist: &DisturbanceSpec,
    t: f64,
) -> Result<DVector<f64>> {
    model.check_q(q)?;
    model.check_qd(qd)?;
    check_dim("joint torques", model.n, tau.len())?;
    check_finite("joint torques", tau.as_slice())?;
    let kin = Kinematics::new(model, q);
    let zero = DVector::zeros(model.n);
    let bias = rnea(model, &kin, qd, &zero, true);
    let rhs = tau + dist.torque(model, t, q, tau)? - bias - model.friction_torque(qd);
    let chol = cholesky(mass_matrix_from(model, &kin), q)?;
    Ok(chol.solve(&rhs))
}

/// Implicit state `x = [q; p]` with generalized momentum `p = M(q) q̇`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl MomentumState {
    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.n();
        let mut x = DVector::zeros(2 * n);
        x.rows_mut(0, n).copy_from(&self.q);
        x.rows_mut(n, n).copy_from(&self.p);
        x
    }

    pub fn from_vector(x: &DVector<f64>) -> Result<Self> {
        if x.len() % 2 != 0 {
            return Err(Error::Dimension {
                context: "momentum state vector",
                expected: x.len() + 1,
                actual: x.len(),
            });
        }
        let n = x.len() / 2;
        Ok(MomentumState {
            q: x.rows(0, n).into_owned(),
            p: x.rows(n, n).into_owned(),
        })
    }
}

pub fn momentum_state(
    model: &ManipulatorModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
) -> Result<MomentumState> {
    model.check_qd(qd)?;
    let m = mass_matrix(model, q)?;
    Ok(MomentumState {
        q: q.clone(),
        p: m * qd,
    })
}

pub fn velocity_from_momentum(model: &ManipulatorModel, state: &MomentumState) -> Result<DVector<f64>> {
    check_dim("momentum", model.n, state.p.len())?;
    check_finite("momentum", state.p.as_slice())?;
    let m = mass_matrix(model, &state.q)?;
    Ok(cholesky(m, &state.q)?.solve(&state.p))
}

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Classical RK4 over `[t, t + dt]` for the explicit `(q, q̇)` dynamics with
/// `tau` held constant, split into substeps no longer than `model.max_substep`.
pub fn step_explicit(
    model: &ManipulatorModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    tau: &DVector<f64>,
    dist: &DisturbanceSpec,
    t: f64,
    dt: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config("dt", "must be positive"));
    }
    let substeps = match model.max_substep {
        Some(h) if h > 0.0 && dt > h => (dt / h).ceil() as usize,
        _ => 1,
    };
    let h = dt / substeps as f64;
    let (mut q, mut qd) = (q.clone(), qd.clone());
    for k in 0..substeps {
        (q, qd) = rk4_step(model, &q, &qd, tau, dist, t + k as f64 * h, h)?;
    }
    Ok((q, qd))
}

fn rk4_step(
    model: &ManipulatorModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    tau: &DVector<f64>,
    dist: &DisturbanceSpec,
    t: f64,
    dt: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let accel = |q: &DVector<f64>, qd: &DVector<f64>, t: f64| forward_dynamics(model, q, qd, tau, dist, t);
    let h = 0.5 * dt;
    let a1 = accel(q, qd, t)?;
    let (q2, v2) = (q + qd * h, qd + &a1 * h);
    let a2 = accel(&q2, &v2, t + h)?;
    let (q3, v3) = (q + &v2 * h, qd + &a2 * h);
    let a3 = accel(&q3, &v3, t + h)?;
    let (q4, v4) = (q + &v3 * dt, qd + &a3 * dt);
    let a4 = accel(&q4, &v4, t + dt)?;

    let q_next = q + (qd + &v2 * 2.0 + &v3 * 2.0 + &v4) * (dt / 6.0);
    let qd_next = qd + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
    let blown = |v: &DVector<f64>| v.iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT);
    if blown(&q_next) || blown(&qd_next) {
        return Err(Error::Divergence { t: t + dt });
    }
    Ok((q_next, qd_next))
}

/// RK4 step in momentum coordinates; the momentum of the result is re-derived
/// from the integrated `(q, q̇)`.
pub fn step(
    model: &ManipulatorModel,
    state: &MomentumState,
    tau: &DVector<f64>,
    dist: &DisturbanceSpec,
    t: f64,
    dt: f64,
) -> Result<MomentumState> {
    let qd = velocity_from_momentum(model, state)?;
    let (q, qd) = step_explicit(model, &state.q, &qd, tau, dist, t, dt)?;
    momentum_state(model, &q, &qd)
}

pub fn kinetic_energy(model: &ManipulatorModel, q: &DVector<f64>, qd: &DVector<f64>) -> Result<f64> {
    let m = mass_matrix(model, q)?;
    Ok(0.5 * qd.dot(&(m * qd)))
}

pub fn potential_energy(model: &ManipulatorModel, q: &DVector<f64>) -> Result<f64> {
    model.check_q(q)?;
    let kin = Kinematics::new(model, q);
    let g = model.gravity_vec();
    Ok(model
        .links
        .iter()
        .zip(&kin.com)
        .map(|(link, c)| -link.mass * g.dot(c))
        .sum())
}

/// Position of the chain tip (m).
pub fn ee_position(model: &ManipulatorModel, q: &DVector<f64>) -> Result<Vector3<f64>> {
    model.check_q(q)?;
    Ok(Kinematics::new(model, q).tip)
}

/// Translational tip Jacobian (3 × n).
pub fn ee_jacobian(model: &ManipulatorModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.check_q(q)?;
    let kin = Kinematics::new(model, q);
    let mut jac = DMatrix::zeros(3, model.n);
    for i in 0..model.n {
        let col = kin.axis[i].cross(&(kin.tip - kin.origin[i]));
        jac.fixed_view_mut::<3, 1>(0, i).copy_from(&col);
    }
    Ok(jac)
}
