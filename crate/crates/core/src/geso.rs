//! Linear extended state observer for the lumped disturbance.
//!
//! The observer runs forward Euler at the control period:
//!
//! ```text
//! x̂⁺ = x̂ + dt (f + k₁ (x − x̂) + d̂)
//! d̂⁺ = d̂ + dt k₂ (x − x̂)
//! ```
//!
//! where `f` is the state rate the model predicts. For a Koopman model the rate
//! is taken from the discrete transition, `f = Cˣ(Az + Bu − z)/dt`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::koopman::KoopmanModel;

/// Scalar observer gains; every channel uses `k₁·I` and `k₂·I`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GesoGains {
    /// 1/s
    pub k1: f64,
    /// 1/s²
    pub k2: f64,
}

impl GesoGains {
    /// Gains for the 3-link arm at 100 Hz.
    pub const ARM: GesoGains = GesoGains { k1: 40.0, k2: 800.0 };
    /// Gains for the 7-link arm at 200 Hz.
    pub const SEVEN_LINK: GesoGains = GesoGains { k1: 100.0, k2: 2000.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(Error::config("k1", "must be positive"));
        }
        if !(self.k2 > 0.0 && self.k2.is_finite()) {
            return Err(Error::config("k2", "must be positive"));
        }
        Ok(())
    }

    /// Roots of `s² + k₁s + k₂` as `(re, im)` pairs.
    pub fn continuous_poles(&self) -> [(f64, f64); 2] {
        let re = -self.k1 / 2.0;
        let disc = self.k1 * self.k1 / 4.0 - self.k2;
        if disc >= 0.0 {
            [(re + disc.sqrt(), 0.0), (re - disc.sqrt(), 0.0)]
        } else {
            [(re, (-disc).sqrt()), (re, -(-disc).sqrt())]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Geso {
    gains: GesoGains,
    x_hat: DVector<f64>,
    d_hat: DVector<f64>,
    initialized: bool,
}

impl Geso {
    /// Observer for a `dim`-dimensional state. `x̂` is set from the first
    /// measurement; `d̂` starts at zero.
    pub fn new(dim: usize, gains: GesoGains) -> Result<Self> {
        gains.validate()?;
        Ok(Geso {
            gains,
            x_hat: DVector::zeros(dim),
            d_hat: DVector::zeros(dim),
            initialized: false,
        })
    }

    pub fn gains(&self) -> GesoGains {
        self.gains
    }

    pub fn x_hat(&self) -> &DVector<f64> {
        &self.x_hat
    }

    pub fn d_hat(&self) -> &DVector<f64> {
        &self.d_hat
    }

    pub fn reset(&mut self) {
        self.x_hat.fill(0.0);
        self.d_hat.fill(0.0);
        self.initialized = false;
    }

    /// One observer step given the model's predicted state rate `flow`.
    pub fn update_with_flow(&mut self, x_meas: &DVector<f64>, flow: &DVector<f64>, dt: f64) -> Result<()> {
        check_dim("observer measurement", self.x_hat.len(), x_meas.len())?;
        check_dim("observer model flow", self.x_hat.len(), flow.len())?;
        check_finite("observer measurement", x_meas.as_slice())?;
        check_finite("observer model flow", flow.as_slice())?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config("dt", "must be positive"));
        }
        if !self.initialized {
            self.x_hat.copy_from(x_meas);
            self.initialized = true;
        }
        let innovation = x_meas - &self.x_hat;
        let rate = flow + &innovation * self.gains.k1 + &self.d_hat;
        self.x_hat += rate * dt;
        self.d_hat += innovation * (self.gains.k2 * dt);
        Ok(())
    }

    /// One observer step driven by `model`: `z` is the lift of `x_meas` and
    /// `u` the input applied over the coming period.
    pub fn update(
        &mut self,
        x_meas: &DVector<f64>,
        z: &DVector<f64>,
        u: &DVector<f64>,
        model: &KoopmanModel,
    ) -> Result<()> {
        check_finite("observer input", u.as_slice())?;
        let flow = model.flow(z, u)?;
        self.update_with_flow(x_meas, &flow, model.dt)
    }
}
