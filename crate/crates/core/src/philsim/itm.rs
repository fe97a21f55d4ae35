//! Ideal transformer method coupling between the simulated network and the
//! emulated hardware, plus a loop monitor built on the stability probe.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::devices::{hut_step, Amplifier, HutEmulator};
use super::probe::{stability_probe, Verdict, VerdictKind, MIN_WINDOW};
use super::PhilError;
use crate::stagelink::stream_rng;
use crate::stagelink::PHIL_STREAM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhilCoupling {
    /// Thevenin source voltage of the simulated side, volts.
    #[serde(default = "default_v")]
    pub ros_source_v: f64,
    /// Thevenin impedance of the simulated side, ohms.
    #[serde(default)]
    pub z_ros_ohm: f64,
    /// Current probe noise, amperes.
    #[serde(default)]
    pub probe_noise_sigma: f64,
}

fn default_v() -> f64 {
    230.0
}

impl PhilCoupling {
    pub fn validate(&self) -> Result<(), PhilError> {
        if !self.ros_source_v.is_finite() || !(self.z_ros_ohm >= 0.0) || !(self.probe_noise_sigma >= 0.0) {
            return Err(PhilError::InvalidModel(
                "PhilCoupling needs finite ros_source_v, z_ros_ohm >= 0, probe_noise_sigma >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One coupling step. `hut_i_prev` is the HUT current from the previous
/// step, which is the loop's mandatory one-step delay. Returns the voltage
/// command for the amplifier and the current injected back into the
/// simulated side.
pub fn itm_couple<R: Rng + ?Sized>(c: &PhilCoupling, hut_i_prev: f64, rng: &mut R) -> (f64, f64) {
    let v_to_hut = c.ros_source_v - c.z_ros_ohm * hut_i_prev;
    let noise = if c.probe_noise_sigma > 0.0 {
        Normal::new(0.0, c.probe_noise_sigma).expect("sigma > 0").sample(rng)
    } else {
        0.0
    };
    (v_to_hut, hut_i_prev + noise)
}

/// Open-loop gain of the delayed loop, |z_ros / z_hut|. Below 1 the loop
/// converges, at 1 it oscillates without decay, above 1 it diverges.
pub fn gain_ratio(z_ros_ohm: f64, z_hut_ohm: f64) -> Result<f64, PhilError> {
    if z_hut_ohm == 0.0 {
        return Err(PhilError::ZeroHutImpedance);
    }
    Ok((z_ros_ohm / z_hut_ohm).abs())
}

/// Watches the step-to-step change of the HUT current and classifies each
/// full window. A window in which the amplifier clipped on most samples is
/// reported as diverging, since the clamp would otherwise hide the growth.
/// Callers restart the window when the loop's excitation changes, so each
/// window holds a free response rather than a forced step.
#[derive(Debug, Clone)]
pub struct ItmMonitor {
    window: Vec<f64>,
    clipped: usize,
    last_i: f64,
    tol: f64,
}

impl ItmMonitor {
    pub fn new(tol: f64) -> Self {
        ItmMonitor { window: Vec::with_capacity(MIN_WINDOW), clipped: 0, last_i: 0.0, tol }
    }

    /// Discards the partial window.
    pub fn restart(&mut self) {
        self.window.clear();
        self.clipped = 0;
    }

    pub fn push(&mut self, i_hut: f64, clipped: bool) -> Option<Verdict> {
        self.window.push(i_hut - self.last_i);
        self.last_i = i_hut;
        self.clipped += clipped as usize;
        if self.window.len() < MIN_WINDOW {
            return None;
        }
        let verdict = if 2 * self.clipped > self.window.len() {
            Verdict { kind: VerdictKind::Diverging, growth_rate: f64::INFINITY }
        } else {
            let scale = self.window.iter().fold(self.last_i.abs(), |m, x| m.max(x.abs()));
            let quiet = self.window.iter().all(|d| d.abs() <= 1e-9 * scale.max(1e-12));
            if quiet {
                // no motion at all: nothing to oscillate
                Verdict { kind: VerdictKind::Stable, growth_rate: 0.0 }
            } else {
                stability_probe(&self.window, self.tol).expect("window is full")
            }
        };
        self.window.clear();
        self.clipped = 0;
        Some(verdict)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterfaceSample {
    pub v_cmd: f64,
    pub v_hut: f64,
    pub i_hut: f64,
    pub i_inj: f64,
}

#[derive(Debug, Clone)]
pub struct ItmRun {
    pub samples: Vec<InterfaceSample>,
    pub verdicts: Vec<(usize, Verdict)>,
    pub first_diverging_step: Option<usize>,
}

/// Runs the bare coupling loop against a fixed source for `steps` steps.
/// Stops at the first diverging verdict.
pub fn run_itm_loop(
    coupling: &PhilCoupling,
    amp: &mut Amplifier,
    hut: &mut HutEmulator,
    steps: usize,
    dt_s: f64,
    seed: u64,
    tol: f64,
) -> Result<ItmRun, PhilError> {
    coupling.validate()?;
    let mut rng = stream_rng(seed, PHIL_STREAM);
    let mut monitor = ItmMonitor::new(tol);
    let mut run = ItmRun { samples: Vec::with_capacity(steps), verdicts: Vec::new(), first_diverging_step: None };
    let mut i_prev = hut.i_a;
    for n in 0..steps {
        let (v_cmd, i_inj) = itm_couple(coupling, i_prev, &mut rng);
        let v_hut = amp.step(v_cmd, dt_s, &mut rng);
        let i_hut = hut_step(hut, v_hut, dt_s);
        run.samples.push(InterfaceSample { v_cmd, v_hut, i_hut, i_inj });
        i_prev = i_hut;
        if let Some(v) = monitor.push(i_hut, amp.clipped()) {
            run.verdicts.push((n, v));
            if v.kind == VerdictKind::Diverging {
                run.first_diverging_step = Some(n);
                break;
            }
        }
    }
    Ok(run)
}
