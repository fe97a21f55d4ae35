//! Register map shared by plant and controller.
//!
//! Addresses 0..=15 are measurements (plant-written, read-only to the
//! controller); 16..=31 are commands. Every register holds one binary64.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MEAS_BASE: u16 = 0;
pub const CMD_BASE: u16 = 16;
pub const BLOCK_LEN: usize = 16;
pub const REGISTER_COUNT: u16 = 32;

pub mod meas {
    pub const F_HZ: u16 = 0;
    pub const V_PU: u16 = 1;
    pub const P_LOAD: u16 = 2;
    pub const P_PV: u16 = 3;
    pub const P_DIESEL: u16 = 4;
    pub const P_BATT1: u16 = 5;
    pub const P_BATT2: u16 = 6;
    pub const SOC1: u16 = 7;
    pub const SOC2: u16 = 8;
    pub const BREAKER_MAIN: u16 = 9;
    pub const DELTA_F: u16 = 10;
    pub const DELTA_V: u16 = 11;
    pub const DELTA_THETA: u16 = 12;
    pub const DIESEL_RATIO: u16 = 13;
    /// Grid-forming unit ready to energize (1.0) or not (0.0).
    pub const VSI_AVAILABLE: u16 = 14;
    /// Measured load-bank consumption.
    pub const P_BANK: u16 = 15;
}

pub mod cmd {
    pub const BANK_MASK: u16 = 16;
    pub const PV_CURTAIL: u16 = 17;
    pub const BATT2_SETPOINT: u16 = 18;
    /// 1.0 close, 0.0 open.
    pub const BREAKER: u16 = 19;
    /// 0.0 grid-connected set, 1.0 islanded set.
    pub const PROTECTION_GROUP: u16 = 20;
    /// Controller echoes its restoration node code here.
    pub const BLACKSTART_ACK: u16 = 21;
    pub const VSI_ENERGIZE: u16 = 22;
    pub const FORMING_F_TRIM: u16 = 23;
    pub const CSI_ENABLE: u16 = 24;
    pub const LOAD_PICKUP: u16 = 25;
}

pub const MEAS_NAMES: [&str; BLOCK_LEN] = [
    "f_hz",
    "v_pu",
    "p_load_kw",
    "p_pv_kw",
    "p_diesel_kw",
    "p_batt1_kw",
    "p_batt2_kw",
    "soc1",
    "soc2",
    "breaker_main",
    "delta_f_hz",
    "delta_v_pu",
    "delta_theta_rad",
    "diesel_ratio",
    "vsi_available",
    "p_bank_kw",
];

pub const CMD_NAMES: [&str; BLOCK_LEN] = [
    "bank_mask",
    "pv_curtail_kw",
    "batt2_setpoint_kw",
    "breaker_cmd",
    "protection_group",
    "blackstart_ack",
    "vsi_energize",
    "forming_f_trim_hz",
    "csi_enable",
    "load_pickup_blocks",
    "reserved_26",
    "reserved_27",
    "reserved_28",
    "reserved_29",
    "reserved_30",
    "reserved_31",
];

pub fn register_name(addr: u16) -> Option<&'static str> {
    match addr {
        0..=15 => Some(MEAS_NAMES[addr as usize]),
        16..=31 => Some(CMD_NAMES[(addr - CMD_BASE) as usize]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegisterError {
    #[error("register {0} does not exist")]
    NoSuchRegister(u16),
    #[error("register {0} is a measurement and cannot be written")]
    ReadOnly(u16),
}

/// Snapshot of the sixteen measurement registers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Measurements(pub [f64; BLOCK_LEN]);

impl Measurements {
    pub fn get(&self, addr: u16) -> f64 {
        self.0[(addr - MEAS_BASE) as usize]
    }
    pub fn set(&mut self, addr: u16, v: f64) {
        self.0[(addr - MEAS_BASE) as usize] = v;
    }
    pub fn f_hz(&self) -> f64 {
        self.get(meas::F_HZ)
    }
    pub fn v_pu(&self) -> f64 {
        self.get(meas::V_PU)
    }
    pub fn p_load(&self) -> f64 {
        self.get(meas::P_LOAD)
    }
    pub fn p_pv(&self) -> f64 {
        self.get(meas::P_PV)
    }
    pub fn p_diesel(&self) -> f64 {
        self.get(meas::P_DIESEL)
    }
    pub fn p_bank(&self) -> f64 {
        self.get(meas::P_BANK)
    }
    pub fn breaker_closed(&self) -> bool {
        self.get(meas::BREAKER_MAIN) >= 0.5
    }
    /// Main-grid voltage recovered from the island voltage and mismatch.
    pub fn grid_v_pu(&self) -> f64 {
        self.v_pu() - self.get(meas::DELTA_V)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.0.iter().zip(other.0.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// The sixteen command registers as the controller wants them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CommandImage(pub [f64; BLOCK_LEN]);

impl CommandImage {
    pub fn get(&self, addr: u16) -> f64 {
        self.0[(addr - CMD_BASE) as usize]
    }
    pub fn set(&mut self, addr: u16, v: f64) {
        self.0[(addr - CMD_BASE) as usize] = v;
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.0.iter().zip(other.0.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Addresses whose values differ bitwise from `other`.
    pub fn changed_from(&self, other: &Self) -> Vec<u16> {
        (0..BLOCK_LEN)
            .filter(|&i| self.0[i].to_bits() != other.0[i].to_bits())
            .map(|i| CMD_BASE + i as u16)
            .collect()
    }
}

/// Full 32-register bank with the write discipline of the map: measurement
/// registers are read-only to clients, command registers read back the last
/// written value.
#[derive(Debug, Clone, Default)]
pub struct RegisterBank {
    pub measurements: Measurements,
    pub commands: CommandImage,
}

impl RegisterBank {
    pub fn read(&self, addr: u16) -> Result<f64, RegisterError> {
        match addr {
            0..=15 => Ok(self.measurements.get(addr)),
            16..=31 => Ok(self.commands.get(addr)),
            _ => Err(RegisterError::NoSuchRegister(addr)),
        }
    }

    pub fn write(&mut self, addr: u16, value: f64) -> Result<(), RegisterError> {
        match addr {
            0..=15 => Err(RegisterError::ReadOnly(addr)),
            16..=31 => {
                self.commands.set(addr, value);
                Ok(())
            }
            _ => Err(RegisterError::NoSuchRegister(addr)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn addresses_are_unique_and_named() {
        let mut names: Vec<&str> = (0..REGISTER_COUNT).filter_map(register_name).collect();
        assert_eq!(names.len(), 32);
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 32);
        assert_eq!(register_name(32), None);
    }

    #[test]
    fn write_discipline() {
        let mut bank = RegisterBank::default();
        assert_eq!(bank.write(meas::F_HZ, 1.0), Err(RegisterError::ReadOnly(0)));
        bank.write(cmd::PV_CURTAIL, 12.5).unwrap();
        assert_eq!(bank.read(cmd::PV_CURTAIL).unwrap(), 12.5);
        assert_eq!(bank.read(40), Err(RegisterError::NoSuchRegister(40)));
    }

    #[test]
    fn changed_registers_are_bitwise() {
        let a = CommandImage::default();
        let mut b = a;
        b.set(cmd::BREAKER, -0.0);
        assert_eq!(b.changed_from(&a), vec![cmd::BREAKER]);
    }
}
