//! Cross-stage trace comparison on the control-cycle grid.

use serde::{Deserialize, Serialize};

use super::ChainError;
use crate::stagelink::{StepRow, Trace};

pub const POWER_SIGNALS: [&str; 5] = ["p_load_kw", "p_pv_kw", "p_diesel_kw", "p_batt1_kw", "p_batt2_kw"];

/// Compared signals, in CSV column order.
pub const SIGNALS: [&str; 12] = [
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
    "bank_mask",
    "pv_curtail_kw",
];

fn values(r: &StepRow) -> [f64; 12] {
    [
        r.f_hz,
        r.v_pu,
        r.p_load_kw,
        r.p_pv_kw,
        r.p_diesel_kw,
        r.p_batt1_kw,
        r.p_batt2_kw,
        r.soc1,
        r.soc2,
        f64::from(r.breaker_main),
        f64::from(r.bank_mask),
        r.pv_curtail_kw,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalDeviation {
    pub signal: String,
    pub rms_abs: f64,
    pub max_abs: f64,
    /// RMS deviation over the quadratic mean of both signals' RMS values;
    /// 0 when both signals are identically zero.
    pub rms_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub stage_a: u8,
    pub stage_b: u8,
    pub samples: usize,
    pub signals: Vec<SignalDeviation>,
    pub max_power_rms_rel: f64,
    pub first_divergence_s: Option<f64>,
    /// Levenshtein distance between the per-cycle delivered command images.
    pub command_edit_distance: usize,
    pub tolerance: Option<f64>,
    pub pass: Option<bool>,
}

/// Rows at control boundaries, the grid both traces are aligned on.
fn boundary_rows(t: &Trace, steps_per_period: usize) -> Vec<&StepRow> {
    t.steps.iter().step_by(steps_per_period.max(1)).collect()
}

pub fn compare_traces(
    a: &Trace,
    b: &Trace,
    steps_per_period: usize,
    tolerance: Option<f64>,
) -> Result<DeviationReport, ChainError> {
    let ra = boundary_rows(a, steps_per_period);
    let rb = boundary_rows(b, steps_per_period);
    if ra.len() != rb.len() {
        return Err(ChainError::SchemaMismatch(format!(
            "stage {} has {} control-cycle samples, stage {} has {}",
            a.stage.number(),
            ra.len(),
            b.stage.number(),
            rb.len()
        )));
    }
    if let Some((x, y)) = ra.iter().zip(&rb).find(|(x, y)| x.t_s.to_bits() != y.t_s.to_bits()) {
        return Err(ChainError::SchemaMismatch(format!(
            "control-cycle grids differ (t = {} vs {})",
            x.t_s, y.t_s
        )));
    }

    let n = ra.len();
    let mut sum_d2 = [0.0f64; 12];
    let mut sum_a2 = [0.0f64; 12];
    let mut sum_b2 = [0.0f64; 12];
    let mut max_d = [0.0f64; 12];
    let mut first_divergence_s = None;
    for (x, y) in ra.iter().zip(&rb) {
        let (vx, vy) = (values(x), values(y));
        for k in 0..12 {
            let d = (vx[k] - vy[k]).abs();
            sum_d2[k] += d * d;
            sum_a2[k] += vx[k] * vx[k];
            sum_b2[k] += vy[k] * vy[k];
            max_d[k] = max_d[k].max(d);
            if first_divergence_s.is_none() && vx[k].to_bits() != vy[k].to_bits() {
                first_divergence_s = Some(x.t_s);
            }
        }
    }

    let nf = n.max(1) as f64;
    let signals: Vec<SignalDeviation> = (0..12)
        .map(|k| {
            let rms_abs = (sum_d2[k] / nf).sqrt();
            let scale = ((sum_a2[k] + sum_b2[k]) / (2.0 * nf)).sqrt();
            let rms_rel = if rms_abs == 0.0 { 0.0 } else { rms_abs / scale };
            SignalDeviation { signal: SIGNALS[k].to_string(), rms_abs, max_abs: max_d[k], rms_rel }
        })
        .collect();
    let max_power_rms_rel = signals
        .iter()
        .filter(|s| POWER_SIGNALS.contains(&s.signal.as_str()))
        .fold(0.0f64, |m, s| m.max(s.rms_rel));

    let images = |t: &Trace| -> Vec<Vec<u64>> {
        t.cycles.iter().map(|c| c.delivered.0.iter().map(|v| v.to_bits()).collect()).collect()
    };
    let command_edit_distance = strsim::generic_levenshtein(&images(a), &images(b));

    Ok(DeviationReport {
        stage_a: a.stage.number(),
        stage_b: b.stage.number(),
        samples: n,
        signals,
        max_power_rms_rel,
        first_divergence_s,
        command_edit_distance,
        tolerance,
        pass: tolerance.map(|tol| max_power_rms_rel <= tol),
    })
}
