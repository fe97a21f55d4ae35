//! Power-interface stage: one plant component is replaced by an emulated
//! HUT behind an amplifier, coupled through the ideal transformer method.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::devices::{hut_step, Amplifier, AmplifierModel, HutEmulator, HutKind};
use super::itm::{itm_couple, ItmMonitor, PhilCoupling};
use super::probe::{VerdictKind, DEFAULT_TOL};
use super::PhilError;
use crate::powersim::{ExternalPower, Plant};
use crate::stagelink::{stream_rng, HookOutcome, StepHook, PHIL_STREAM};

/// Which plant component the HUT stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "binding", deny_unknown_fields)]
pub enum HutBinding {
    /// The switchable load bank, emulated as a resistor sized from the
    /// active steps at base voltage.
    LoadBank,
    /// The grid-following battery, emulated as a current-controlled inverter.
    Batt2 {
        #[serde(default = "default_filter_r")]
        r_ohm: f64,
        #[serde(default = "default_filter_l")]
        l_h: f64,
        #[serde(default = "default_uv")]
        uv_lockout_v: f64,
    },
}

fn default_filter_r() -> f64 {
    0.05
}
fn default_filter_l() -> f64 {
    1e-5
}
fn default_uv() -> f64 {
    50.0
}
fn default_v_base() -> f64 {
    230.0
}
fn default_tol() -> f64 {
    DEFAULT_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhilStageConfig {
    #[serde(default = "AmplifierModel::ideal")]
    pub amplifier: AmplifierModel,
    pub hut: HutBinding,
    #[serde(default)]
    pub z_ros_ohm: f64,
    #[serde(default)]
    pub probe_noise_sigma: f64,
    /// Interface voltage at 1 pu. The interface is a single-phase
    /// equivalent carrying the full component power.
    #[serde(default = "default_v_base")]
    pub v_base_v: f64,
    #[serde(default = "default_tol")]
    pub probe_tol: f64,
}

impl PhilStageConfig {
    pub fn ideal(hut: HutBinding) -> Self {
        PhilStageConfig {
            amplifier: AmplifierModel::ideal(),
            hut,
            z_ros_ohm: 0.0,
            probe_noise_sigma: 0.0,
            v_base_v: default_v_base(),
            probe_tol: default_tol(),
        }
    }

    pub fn validate(&self, dt_s: f64) -> Result<(), PhilError> {
        self.amplifier.validate(dt_s)?;
        self.coupling(0.0).validate()?;
        if !(self.v_base_v > 0.0) || !(self.probe_tol > 0.0) {
            return Err(PhilError::InvalidModel("v_base_v and probe_tol must be > 0".into()));
        }
        if let HutBinding::Batt2 { r_ohm, l_h, uv_lockout_v } = self.hut {
            HutEmulator::new(HutKind::BatteryInverterHut { p_setpoint_kw: 0.0, r_ohm, l_h, uv_lockout_v })?;
        }
        Ok(())
    }

    fn coupling(&self, ros_source_v: f64) -> PhilCoupling {
        PhilCoupling { ros_source_v, z_ros_ohm: self.z_ros_ohm, probe_noise_sigma: self.probe_noise_sigma }
    }
}

/// One step of the power interface as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InterfaceRow {
    pub t_s: f64,
    pub v_ros_v: f64,
    pub v_cmd_v: f64,
    pub v_hut_v: f64,
    pub i_hut_a: f64,
    pub i_inj_a: f64,
    pub p_if_kw: f64,
}

pub struct PhilStage {
    cfg: PhilStageConfig,
    dt_s: f64,
    amp: Amplifier,
    hut: HutEmulator,
    rng: ChaCha8Rng,
    monitor: ItmMonitor,
    i_prev: f64,
    started: bool,
    last_verdict: Option<VerdictKind>,
    /// Source voltage and HUT parameters of the previous step.
    excitation: Option<(f64, HutKind)>,
    log: Vec<InterfaceRow>,
}

impl PhilStage {
    pub fn new(cfg: PhilStageConfig, dt_s: f64, seed: u64) -> Result<Self, PhilError> {
        cfg.validate(dt_s)?;
        let amp = Amplifier::new(cfg.amplifier.clone(), dt_s)?;
        let tol = cfg.probe_tol;
        Ok(PhilStage {
            cfg,
            dt_s,
            amp,
            hut: HutEmulator::new(HutKind::Open)?,
            rng: stream_rng(seed, PHIL_STREAM),
            monitor: ItmMonitor::new(tol),
            i_prev: 0.0,
            started: false,
            last_verdict: None,
            excitation: None,
            log: Vec::new(),
        })
    }

    pub fn interface_log(&self) -> &[InterfaceRow] {
        &self.log
    }

    pub fn into_interface_log(self) -> Vec<InterfaceRow> {
        self.log
    }

    /// Re-parameterizes the HUT from the component it stands in for,
    /// keeping its current state.
    fn bind(&mut self, plant: &Plant) {
        let v_base = self.cfg.v_base_v;
        self.hut.kind = match self.cfg.hut {
            HutBinding::LoadBank => {
                let p_kw = plant.load_bank().map_or(0.0, |b| b.active_kw());
                if p_kw > 0.0 {
                    HutKind::ResistiveLoad { r_ohm: v_base * v_base / (p_kw * 1000.0) }
                } else {
                    HutKind::Open
                }
            }
            HutBinding::Batt2 { r_ohm, l_h, uv_lockout_v } => HutKind::BatteryInverterHut {
                p_setpoint_kw: -plant.following_setpoint_kw(),
                r_ohm,
                l_h,
                uv_lockout_v,
            },
        };
    }

    fn steady_current(&self, v: f64) -> f64 {
        let mut h = self.hut.clone();
        if let HutKind::BatteryInverterHut { ref mut l_h, .. } = h.kind {
            *l_h = 0.0;
        }
        hut_step(&mut h, v, self.dt_s)
    }
}

impl StepHook for PhilStage {
    fn after_step(&mut self, plant: &mut Plant) -> HookOutcome {
        let v_ros = plant.state().v_pu * self.cfg.v_base_v;
        self.bind(plant);
        if self.excitation != Some((v_ros, self.hut.kind)) {
            self.monitor.restart();
            self.excitation = Some((v_ros, self.hut.kind));
        }
        if !self.started {
            // start from the operating point instead of a cold interface
            self.started = true;
            self.i_prev = self.steady_current(v_ros);
            self.hut.i_a = self.i_prev;
            self.amp.prime(v_ros);
        }
        let (v_cmd, i_inj) = itm_couple(&self.cfg.coupling(v_ros), self.i_prev, &mut self.rng);
        let v_hut = self.amp.step(v_cmd, self.dt_s, &mut self.rng);
        let i_hut = hut_step(&mut self.hut, v_hut, self.dt_s);
        self.i_prev = i_hut;

        let p_if_kw = v_ros * i_inj / 1000.0;
        let ext = match self.cfg.hut {
            HutBinding::LoadBank => ExternalPower { bank_kw: Some(p_if_kw), batt2_kw: None },
            HutBinding::Batt2 { .. } => ExternalPower { bank_kw: None, batt2_kw: Some(-p_if_kw) },
        };
        plant.set_external_power(ext);
        plant.solve();

        self.log.push(InterfaceRow {
            t_s: plant.time(),
            v_ros_v: v_ros,
            v_cmd_v: v_cmd,
            v_hut_v: v_hut,
            i_hut_a: i_hut,
            i_inj_a: i_inj,
            p_if_kw,
        });

        let mut out = HookOutcome::default();
        if let Some(v) = self.monitor.push(i_hut, self.amp.clipped()) {
            if self.last_verdict != Some(v.kind) {
                out.verdict_events.push(format!("phil_{:?} growth={:.3e}", v.kind, v.growth_rate).to_lowercase());
                self.last_verdict = Some(v.kind);
            }
            if v.kind == VerdictKind::Diverging {
                out.abort = Some(format!("power interface loop diverging (growth {:.3e}/step)", v.growth_rate));
            }
        }
        out
    }
}
