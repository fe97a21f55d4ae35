//! CSV and JSON artifacts. Everything written here is a pure function of
//! the run, so repeated runs give byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::runner::{LadderReport, StageRun};
use super::ChainError;
use crate::philsim::InterfaceRow;
use crate::stagelink::Trace;

pub const TRACE_COLUMNS: [&str; 15] = [
    "t_s",
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
    "msg_events",
    "verdict_events",
];

fn io_err(e: impl std::fmt::Display) -> ChainError {
    ChainError::Io(e.to_string())
}

pub fn write_trace_csv<W: Write>(w: W, trace: &Trace) -> Result<(), ChainError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_COLUMNS).map_err(io_err)?;
    for r in &trace.steps {
        out.write_record([
            r.t_s.to_string(),
            r.f_hz.to_string(),
            r.v_pu.to_string(),
            r.p_load_kw.to_string(),
            r.p_pv_kw.to_string(),
            r.p_diesel_kw.to_string(),
            r.p_batt1_kw.to_string(),
            r.p_batt2_kw.to_string(),
            r.soc1.to_string(),
            r.soc2.to_string(),
            r.breaker_main.to_string(),
            r.bank_mask.to_string(),
            r.pv_curtail_kw.to_string(),
            r.msg_events.join(";"),
            r.verdict_events.join(";"),
        ])
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn write_interface_csv<W: Write>(w: W, rows: &[InterfaceRow]) -> Result<(), ChainError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t_s", "v_ros_v", "v_cmd_v", "v_hut_v", "i_hut_a", "i_inj_a", "p_if_kw"])
        .map_err(io_err)?;
    for r in rows {
        out.write_record(
            [r.t_s, r.v_ros_v, r.v_cmd_v, r.v_hut_v, r.i_hut_a, r.i_inj_a, r.p_if_kw].map(|x| x.to_string()),
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn report_json(report: &LadderReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Writes `trace_stage<k>.csv` per run, the Stage-4 interface log if
/// present, and `report.json` into `dir`.
pub fn write_outputs(dir: &Path, report: &LadderReport, runs: &[StageRun]) -> Result<(), ChainError> {
    fs::create_dir_all(dir).map_err(|e| ChainError::Io(format!("{}: {e}", dir.display())))?;
    for run in runs {
        let k = run.metrics.stage;
        let f = fs::File::create(dir.join(format!("trace_stage{k}.csv"))).map_err(io_err)?;
        write_trace_csv(std::io::BufWriter::new(f), &run.trace)?;
        if let Some(log) = &run.interface_log {
            let f = fs::File::create(dir.join(format!("phil_interface_stage{k}.csv"))).map_err(io_err)?;
            write_interface_csv(std::io::BufWriter::new(f), log)?;
        }
    }
    fs::write(dir.join("report.json"), report_json(report)).map_err(io_err)
}
