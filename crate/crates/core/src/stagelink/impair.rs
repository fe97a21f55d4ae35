//! Virtual-time impairments for the message path and the analog I/O path.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::registers::{meas, BLOCK_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpairmentProfile {
    #[serde(default)]
    pub base_delay_s: f64,
    /// Half-width of the uniform jitter.
    #[serde(default)]
    pub jitter_s: f64,
    #[serde(default)]
    pub loss_prob: f64,
    /// `None` is an infinitely fast link.
    #[serde(default)]
    pub bandwidth_bps: Option<f64>,
    /// Additive Gaussian noise on analog channels, engineering units.
    #[serde(default)]
    pub noise_sigma: f64,
    /// `None` disables quantization.
    #[serde(default)]
    pub quant_bits: Option<u32>,
    #[serde(default = "default_v_min")]
    pub v_min: f64,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
}

fn default_v_min() -> f64 {
    -10.0
}
fn default_v_max() -> f64 {
    10.0
}

impl Default for ImpairmentProfile {
    fn default() -> Self {
        Self::null()
    }
}

impl ImpairmentProfile {
    /// No delay, no loss, infinite bandwidth, no analog error.
    pub fn null() -> Self {
        ImpairmentProfile {
            base_delay_s: 0.0,
            jitter_s: 0.0,
            loss_prob: 0.0,
            bandwidth_bps: None,
            noise_sigma: 0.0,
            quant_bits: None,
            v_min: default_v_min(),
            v_max: default_v_max(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_delay_s >= 0.0) || !(self.jitter_s >= 0.0) {
            return Err("ImpairmentProfile delays must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err("ImpairmentProfile.loss_prob must be in [0, 1]".into());
        }
        if let Some(bw) = self.bandwidth_bps {
            if !(bw > 0.0) {
                return Err("ImpairmentProfile.bandwidth_bps must be > 0".into());
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err("ImpairmentProfile.noise_sigma must be >= 0".into());
        }
        if let Some(b) = self.quant_bits {
            if !(1..=32).contains(&b) {
                return Err("ImpairmentProfile.quant_bits must be in [1, 32]".into());
            }
        }
        if !(self.v_min < self.v_max) {
            return Err("ImpairmentProfile requires v_min < v_max".into());
        }
        Ok(())
    }

    pub fn is_null(&self) -> bool {
        self.base_delay_s == 0.0
            && self.jitter_s == 0.0
            && self.loss_prob == 0.0
            && self.bandwidth_bps.is_none()
            && self.noise_sigma == 0.0
            && self.quant_bits.is_none()
    }

    pub fn analog_is_identity(&self) -> bool {
        self.noise_sigma == 0.0 && self.quant_bits.is_none()
    }

    /// Distance between adjacent quantization levels.
    pub fn quant_step(&self) -> Option<f64> {
        self.quant_bits
            .map(|b| (self.v_max - self.v_min) / ((2f64).powi(b as i32) - 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delivery {
    Delivered { t_arrive: f64 },
    Dropped,
}

/// Decides the fate of one message. Randomness is drawn only for the
/// impairments that are switched on, so a null profile leaves the stream
/// untouched.
pub fn impair_message<R: Rng + ?Sized>(
    msg_len: usize,
    profile: &ImpairmentProfile,
    rng: &mut R,
    t_send: f64,
) -> Delivery {
    if profile.loss_prob > 0.0 && rng.random::<f64>() < profile.loss_prob {
        return Delivery::Dropped;
    }
    let jitter = if profile.jitter_s > 0.0 {
        rng.random_range(-profile.jitter_s..=profile.jitter_s)
    } else {
        0.0
    };
    let serialization = profile.bandwidth_bps.map_or(0.0, |bw| 8.0 * msg_len as f64 / bw);
    let t_arrive = t_send + profile.base_delay_s + jitter + serialization;
    Delivery::Delivered { t_arrive: t_arrive.max(t_send) }
}

fn gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("sigma checked positive").sample(rng)
    } else {
        0.0
    }
}

/// Noise, clipping and quantization of one value on an analog port. Levels
/// sit at `v_min + k * (v_max - v_min) / (2^bits - 1)`, so both range ends
/// are exact levels.
pub fn analog_transduce<R: Rng + ?Sized>(value: f64, profile: &ImpairmentProfile, rng: &mut R) -> f64 {
    let noisy = value + gaussian(profile.noise_sigma, rng);
    quantize(noisy.clamp(profile.v_min, profile.v_max), profile)
}

fn quantize(v: f64, profile: &ImpairmentProfile) -> f64 {
    let Some(step) = profile.quant_step() else {
        return v;
    };
    let k = ((v - profile.v_min) / step).round();
    let levels = (2f64).powi(profile.quant_bits.unwrap_or(1) as i32) - 1.0;
    if k >= levels {
        profile.v_max
    } else {
        profile.v_min + k.max(0.0) * step
    }
}

/// Linear map between a measurement's engineering value and its port
/// voltage: `volts = (value - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalogChannel {
    pub offset: f64,
    pub scale: f64,
}

impl AnalogChannel {
    /// Transduces an engineering value: noise in engineering units, then
    /// clipping and quantization at the port.
    pub fn transduce<R: Rng + ?Sized>(&self, value: f64, profile: &ImpairmentProfile, rng: &mut R) -> f64 {
        let noisy = value + gaussian(profile.noise_sigma, rng);
        let volts = ((noisy - self.offset) / self.scale).clamp(profile.v_min, profile.v_max);
        self.offset + quantize(volts, profile) * self.scale
    }
}

/// Port scaling of each measurement register for a ±10 V class port.
/// `None` marks digital (status) channels that bypass the analog path.
pub fn measurement_channels() -> [Option<AnalogChannel>; BLOCK_LEN] {
    let ch = |offset: f64, scale: f64| Some(AnalogChannel { offset, scale });
    let mut out = [None; BLOCK_LEN];
    out[meas::F_HZ as usize] = ch(50.0, 1.0);
    out[meas::V_PU as usize] = ch(0.6, 0.06);
    for r in [meas::P_LOAD, meas::P_PV, meas::P_DIESEL, meas::P_BATT1, meas::P_BATT2, meas::P_BANK] {
        out[r as usize] = ch(0.0, 20.0);
    }
    out[meas::SOC1 as usize] = ch(0.5, 0.05);
    out[meas::SOC2 as usize] = ch(0.5, 0.05);
    out[meas::DELTA_F as usize] = ch(0.0, 0.5);
    out[meas::DELTA_V as usize] = ch(0.0, 0.12);
    out[meas::DELTA_THETA as usize] = ch(0.0, std::f64::consts::PI / 10.0);
    out[meas::DIESEL_RATIO as usize] = ch(0.0, 0.1);
    out
}
