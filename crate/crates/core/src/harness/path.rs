//! Task-space reference curves.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ManipulatorModel, Topology};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Hypotrochoid,
    Petal,
    Helix,
    /// Stationary reference at `center`.
    Point,
}

impl PathKind {
    pub const TRACKING: [PathKind; 3] = [PathKind::Hypotrochoid, PathKind::Petal, PathKind::Helix];

    pub fn name(self) -> &'static str {
        match self {
            PathKind::Hypotrochoid => "hypotrochoid",
            PathKind::Petal => "petal",
            PathKind::Helix => "helix",
            PathKind::Point => "point",
        }
    }
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PathKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hypotrochoid" => Ok(PathKind::Hypotrochoid),
            "petal" | "rose" => Ok(PathKind::Petal),
            "helix" => Ok(PathKind::Helix),
            "point" => Ok(PathKind::Point),
            other => Err(Error::config("path", format!("unknown path `{other}`"))),
        }
    }
}

/// Geometry and timing of a reference curve. The curve parameter is
/// `θ = ω t`; only the fields of the selected kind are used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathSpec {
    pub kind: PathKind,
    pub center: [f64; 3],
    /// Duration of the run (s).
    pub duration: f64,
    /// Rate of the curve parameter (rad/s).
    pub omega: f64,
    /// Hypotrochoid: fixed circle radius, rolling circle radius, pen offset
    /// (dimensionless) and the metres per unit applied to all three.
    pub big_r: f64,
    pub small_r: f64,
    pub pen: f64,
    pub scale: f64,
    /// Petal: rose amplitude (m) and frequency `k` in `r = a cos(kθ)`.
    pub amplitude: f64,
    pub petals: f64,
    /// Helix: circle radius (m) and axial speed (m/s).
    pub radius: f64,
    pub rise_rate: f64,
}

impl Default for PathSpec {
    fn default() -> Self {
        PathSpec::preset(PathKind::Hypotrochoid)
    }
}

impl PathSpec {
    /// Default curves sized for the 3 × 0.33 m arm; each closes (or, for the
    /// helix, completes two turns) in 20 s.
    pub fn preset(kind: PathKind) -> Self {
        let base = PathSpec {
            kind,
            center: [0.6, 0.0, 0.1],
            duration: 20.0,
            omega: 0.0,
            big_r: 5.0,
            small_r: 3.0,
            pen: 5.0,
            scale: 0.02,
            amplitude: 0.12,
            petals: 3.0,
            radius: 0.1,
            rise_rate: 0.01,
        };
        match kind {
            // closes after θ = 2π r / gcd(R, r) = 6π
            PathKind::Hypotrochoid => PathSpec {
                omega: 6.0 * PI / 20.0,
                ..base
            },
            // odd k: the rose closes after θ = π
            PathKind::Petal => PathSpec { omega: PI / 20.0, ..base },
            PathKind::Helix => PathSpec {
                center: [0.6, 0.0, -0.1],
                omega: 4.0 * PI / 20.0,
                ..base
            },
            PathKind::Point => PathSpec {
                duration: 5.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(Error::config("path.duration", "must be non-negative"));
        }
        let finite = [
            self.omega,
            self.big_r,
            self.small_r,
            self.pen,
            self.scale,
            self.amplitude,
            self.petals,
            self.radius,
            self.rise_rate,
        ]
        .iter()
        .chain(&self.center)
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("path", "parameters must be finite"));
        }
        if self.kind == PathKind::Hypotrochoid && self.small_r == 0.0 {
            return Err(Error::config("path.small_r", "must be non-zero"));
        }
        Ok(())
    }

    /// Position on the curve at time `t` (m).
    pub fn point(&self, t: f64) -> Vector3<f64> {
        let c = Vector3::from(self.center);
        let th = self.omega * t;
        let offset = match self.kind {
            PathKind::Hypotrochoid => {
                let (rr, r, d) = (self.big_r - self.small_r, self.small_r, self.pen);
                let inner = rr / r * th;
                Vector3::new(rr * th.cos() + d * inner.cos(), rr * th.sin() - d * inner.sin(), 0.0) * self.scale
            }
            PathKind::Petal => {
                let r = self.amplitude * (self.petals * th).cos();
                Vector3::new(r * th.cos(), r * th.sin(), 0.0)
            }
            PathKind::Helix => Vector3::new(self.radius * th.cos(), self.radius * th.sin(), self.rise_rate * t),
            PathKind::Point => Vector3::zeros(),
        };
        c + offset
    }

    /// Points at `t = k dt`, `k = 0..=round(duration/dt)`.
    pub fn sample(&self, dt: f64) -> Vec<Vector3<f64>> {
        let steps = (self.duration / dt).round() as usize;
        (0..=steps).map(|k| self.point(k as f64 * dt)).collect()
    }
}

/// Evaluates `spec` at time `t`.
pub fn reference_path(spec: &PathSpec, t: f64) -> Vector3<f64> {
    spec.point(t)
}

/// Distance from `p` to the boundary of the reachable workspace (negative
/// outside), computed from the link lengths.
///
/// Spatial chains reach a torus-like shell: the first link sweeps a
/// horizontal circle and the remaining links reach a ball around it. Other
/// layouts fall back to the ball of radius `Σl` about the base.
pub fn workspace_margin(manip: &ManipulatorModel, p: &Vector3<f64>) -> f64 {
    let reach = manip.reach();
    match (manip.topology, &manip.axes) {
        (Topology::Spatial, None) if manip.n > 1 => {
            let l0 = manip.links[0].length;
            let rho = (p.x * p.x + p.y * p.y).sqrt();
            let dist = ((rho - l0).powi(2) + p.z * p.z).sqrt();
            (reach - l0) - dist
        }
        (Topology::Planar, None) => reach - (p.x * p.x + p.y * p.y).sqrt(),
        _ => reach - p.norm(),
    }
}

/// Smallest workspace margin along the sampled path.
pub fn path_margin(manip: &ManipulatorModel, spec: &PathSpec, dt: f64) -> f64 {
    spec.sample(dt)
        .iter()
        .map(|p| workspace_margin(manip, p))
        .fold(f64::INFINITY, f64::min)
}
