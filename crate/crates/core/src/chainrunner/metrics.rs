//! Post-run metrics derived from a trace.

use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::mgc::BlackstartNode;
use crate::stagelink::registers::cmd;
use crate::stagelink::{CommandImage, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeVisit {
    pub t_s: f64,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: u8,
    pub seed: u64,
    pub completed: bool,
    pub aborted: Option<String>,
    pub steps: usize,
    pub cycles: usize,
    /// Lowest p_diesel / S over all steps.
    pub min_diesel_ratio: Option<f64>,
    /// Lowest p_diesel / S at control boundaries outside settling windows.
    pub min_diesel_ratio_settled: Option<f64>,
    /// Time spent below the minimum load, whole run.
    pub time_below_ratio_s: f64,
    /// Time spent below the minimum load outside settling windows.
    pub time_below_ratio_settled_s: f64,
    /// Control boundaries outside settling windows with the diesel below
    /// its minimum.
    pub cycles_below_ratio_settled: usize,
    pub f_nadir_hz: f64,
    pub f_zenith_hz: f64,
    pub blackstart_path: Vec<NodeVisit>,
    pub blackstart_completion_s: Option<f64>,
    pub messages_sent: usize,
    pub messages_dropped: usize,
    pub controller_timeouts: usize,
    pub applied_commands: usize,
    pub verdicts: Vec<String>,
}

/// Whether `t_s` lies inside a settling window: the first `settling_s`
/// seconds of the run or after any scripted grid event.
pub fn in_settling(scenario: &Scenario, t_s: f64) -> bool {
    let w = scenario.tolerances.settling_s;
    let eps = 1e-9;
    std::iter::once(0.0)
        .chain(scenario.grid.events.iter().map(|e| e.t_s))
        .any(|e| t_s + eps >= e && t_s < e + w - eps)
}

pub fn compute_metrics(scenario: &Scenario, trace: &Trace, initial: &CommandImage, seed: u64) -> StageMetrics {
    let dt = scenario.sim.dt_s;
    let spp = scenario.sim.steps_per_period();
    let diesel = scenario.grid.diesel.as_ref();
    let tol = scenario.tolerances.ratio_tol_kw;

    let mut m = StageMetrics {
        stage: trace.stage.number(),
        seed,
        completed: trace.aborted.is_none(),
        aborted: trace.aborted.clone(),
        steps: trace.steps.len(),
        cycles: trace.cycles.len(),
        min_diesel_ratio: None,
        min_diesel_ratio_settled: None,
        time_below_ratio_s: 0.0,
        time_below_ratio_settled_s: 0.0,
        cycles_below_ratio_settled: 0,
        f_nadir_hz: f64::INFINITY,
        f_zenith_hz: f64::NEG_INFINITY,
        blackstart_path: Vec::new(),
        blackstart_completion_s: None,
        messages_sent: trace.messages.len(),
        messages_dropped: trace.dropped_messages(),
        controller_timeouts: 0,
        applied_commands: trace.applied.len(),
        verdicts: Vec::new(),
    };

    let mut below_steps = 0usize;
    let mut below_settled_steps = 0usize;
    for (i, row) in trace.steps.iter().enumerate() {
        m.f_nadir_hz = m.f_nadir_hz.min(row.f_hz);
        m.f_zenith_hz = m.f_zenith_hz.max(row.f_hz);
        m.controller_timeouts += row.msg_events.iter().filter(|e| e.starts_with("controller_timeout")).count();
        m.verdicts.extend(row.verdict_events.iter().cloned());
        let Some(d) = diesel else { continue };
        let ratio = row.p_diesel_kw / d.s_rated_kw;
        m.min_diesel_ratio = Some(m.min_diesel_ratio.map_or(ratio, |x| x.min(ratio)));
        let below = row.p_diesel_kw < d.min_load_kw() - tol;
        let settled = !in_settling(scenario, row.t_s);
        below_steps += below as usize;
        below_settled_steps += (below && settled) as usize;
        if settled && i % spp == 0 {
            m.min_diesel_ratio_settled = Some(m.min_diesel_ratio_settled.map_or(ratio, |x| x.min(ratio)));
            m.cycles_below_ratio_settled += below as usize;
        }
    }
    m.time_below_ratio_s = below_steps as f64 * dt;
    m.time_below_ratio_settled_s = below_settled_steps as f64 * dt;

    if matches!(scenario.controller, super::ControllerSpec::Blackstart(_)) {
        let name = |code: f64| {
            node_of(code).map_or_else(|| format!("code {code}"), |n| format!("{n:?}"))
        };
        m.blackstart_path.push(NodeVisit { t_s: 0.0, node: name(initial.get(cmd::BLACKSTART_ACK)) });
        let mut left_gc = false;
        for a in trace.applied.iter().filter(|a| a.addr == cmd::BLACKSTART_ACK) {
            m.blackstart_path.push(NodeVisit { t_s: a.t_s, node: name(a.value) });
            match node_of(a.value) {
                Some(BlackstartNode::Blackout) => left_gc = true,
                Some(BlackstartNode::GridConnected) if left_gc && m.blackstart_completion_s.is_none() => {
                    m.blackstart_completion_s = Some(a.t_s);
                }
                _ => {}
            }
        }
    }
    m
}

fn node_of(code: f64) -> Option<BlackstartNode> {
    if code.fract() == 0.0 && (0.0..=255.0).contains(&code) {
        BlackstartNode::from_code(code as u8)
    } else {
        None
    }
}

/// Expectation checks for one stage; returns a description of each failure.
pub fn expectation_failures(scenario: &Scenario, m: &StageMetrics) -> Vec<String> {
    let ex = &scenario.expectations;
    let mut out = Vec::new();
    if ex.no_abort.contains(&m.stage) && !m.completed {
        out.push(format!("stage {}: run aborted: {}", m.stage, m.aborted.as_deref().unwrap_or("")));
    }
    if ex.min_load_held.contains(&m.stage) && m.cycles_below_ratio_settled > 0 {
        out.push(format!(
            "stage {}: diesel below minimum load at {} settled control cycles (min ratio {:?})",
            m.stage, m.cycles_below_ratio_settled, m.min_diesel_ratio_settled
        ));
    }
    if ex.blackstart_completes.contains(&m.stage) && m.blackstart_completion_s.is_none() {
        out.push(format!("stage {}: blackstart did not return to grid-connected", m.stage));
    }
    out
}
