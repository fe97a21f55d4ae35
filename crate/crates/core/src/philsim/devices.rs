//! Power amplifier and emulated hardware under test.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PhilError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmplifierModel {
    #[serde(default = "one")]
    pub gain: f64,
    /// First-order bandwidth lag; 0 passes the delayed command through.
    #[serde(default)]
    pub tau_s: f64,
    /// Transport delay, an integer multiple of the simulation step.
    #[serde(default)]
    pub delay_s: f64,
    /// Additive output noise, volts.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Output clamp, volts.
    #[serde(default = "default_v_limit")]
    pub v_limit: f64,
}

fn one() -> f64 {
    1.0
}
fn default_v_limit() -> f64 {
    1000.0
}

impl AmplifierModel {
    pub fn ideal() -> Self {
        AmplifierModel { gain: 1.0, tau_s: 0.0, delay_s: 0.0, noise_sigma: 0.0, v_limit: default_v_limit() }
    }

    pub fn validate(&self, dt_s: f64) -> Result<(), PhilError> {
        let bad = |m: &str| Err(PhilError::InvalidModel(m.into()));
        if !self.gain.is_finite() {
            return bad("AmplifierModel.gain must be finite");
        }
        if !(self.tau_s >= 0.0) || !(self.delay_s >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("AmplifierModel.tau_s, delay_s and noise_sigma must be >= 0");
        }
        if !(self.v_limit > 0.0) {
            return bad("AmplifierModel.v_limit must be > 0");
        }
        let k = self.delay_s / dt_s;
        if (k - k.round()).abs() > 1e-6 {
            return bad("AmplifierModel.delay_s must be an integer multiple of dt_s");
        }
        Ok(())
    }
}

/// An amplifier instance: model parameters plus delay line and lag state.
#[derive(Debug, Clone)]
pub struct Amplifier {
    model: AmplifierModel,
    line: VecDeque<f64>,
    y: f64,
    last_clipped: bool,
}

impl Amplifier {
    pub fn new(model: AmplifierModel, dt_s: f64) -> Result<Self, PhilError> {
        model.validate(dt_s)?;
        let delay_steps = (model.delay_s / dt_s).round() as usize;
        Ok(Amplifier { model, line: VecDeque::from(vec![0.0; delay_steps]), y: 0.0, last_clipped: false })
    }

    pub fn model(&self) -> &AmplifierModel {
        &self.model
    }

    /// Whether the last output hit the clamp.
    pub fn clipped(&self) -> bool {
        self.last_clipped
    }

    /// Settles the delay line and lag at a constant command, as if it had
    /// been applied forever.
    pub fn prime(&mut self, v_cmd: f64) {
        self.line.iter_mut().for_each(|x| *x = v_cmd);
        self.y = self.model.gain * v_cmd;
    }

    pub fn step<R: Rng + ?Sized>(&mut self, v_cmd: f64, dt_s: f64, rng: &mut R) -> f64 {
        self.line.push_back(v_cmd);
        let v_delayed = self.line.pop_front().expect("line holds at least the new sample");
        let target = self.model.gain * v_delayed;
        self.y = if self.model.tau_s > 0.0 {
            self.y + dt_s / self.model.tau_s * (target - self.y)
        } else {
            target
        };
        let noise = if self.model.noise_sigma > 0.0 {
            Normal::new(0.0, self.model.noise_sigma).expect("sigma > 0").sample(rng)
        } else {
            0.0
        };
        let raw = self.y + noise;
        let lim = self.model.v_limit;
        self.last_clipped = raw.abs() > lim;
        raw.clamp(-lim, lim)
    }
}

/// Free-function form of [`Amplifier::step`].
pub fn amplifier_step<R: Rng + ?Sized>(amp: &mut Amplifier, v_cmd: f64, dt_s: f64, rng: &mut R) -> f64 {
    amp.step(v_cmd, dt_s, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HutKind {
    ResistiveLoad {
        r_ohm: f64,
    },
    /// Current-controlled inverter behind an RL filter. `p_setpoint_kw` is
    /// power drawn from the terminal; negative values inject.
    BatteryInverterHut {
        p_setpoint_kw: f64,
        r_ohm: f64,
        l_h: f64,
        uv_lockout_v: f64,
    },
    /// Nothing connected.
    Open,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HutEmulator {
    pub kind: HutKind,
    /// Terminal current, amperes, positive when drawn.
    pub i_a: f64,
}

impl HutEmulator {
    pub fn new(kind: HutKind) -> Result<Self, PhilError> {
        match kind {
            HutKind::ResistiveLoad { r_ohm } if !(r_ohm > 0.0) => {
                return Err(PhilError::InvalidModel("ResistiveLoad.r_ohm must be > 0".into()))
            }
            HutKind::BatteryInverterHut { r_ohm, l_h, uv_lockout_v, .. }
                if !(r_ohm > 0.0) || !(l_h >= 0.0) || !(uv_lockout_v >= 0.0) =>
            {
                return Err(PhilError::InvalidModel(
                    "BatteryInverterHut needs r_ohm > 0, l_h >= 0, uv_lockout_v >= 0".into(),
                ))
            }
            _ => {}
        }
        Ok(HutEmulator { kind, i_a: 0.0 })
    }

    /// Impedance seen by the interface, where one is defined.
    pub fn impedance_ohm(&self) -> Option<f64> {
        match self.kind {
            HutKind::ResistiveLoad { r_ohm } => Some(r_ohm),
            _ => None,
        }
    }
}

/// Advances the HUT by one step under the applied voltage and returns the
/// current it draws.
pub fn hut_step(hut: &mut HutEmulator, v_applied: f64, dt_s: f64) -> f64 {
    hut.i_a = match hut.kind {
        HutKind::Open => 0.0,
        HutKind::ResistiveLoad { r_ohm } => v_applied / r_ohm,
        HutKind::BatteryInverterHut { p_setpoint_kw, r_ohm, l_h, uv_lockout_v } => {
            if !(v_applied.abs() >= uv_lockout_v) || v_applied == 0.0 {
                0.0
            } else {
                let target = p_setpoint_kw * 1000.0 / v_applied;
                if l_h == 0.0 {
                    target
                } else {
                    // exact discretization of di/dt = (target - i) r / l
                    target + (hut.i_a - target) * (-dt_s * r_ohm / l_h).exp()
                }
            }
        }
    };
    hut.i_a
}
