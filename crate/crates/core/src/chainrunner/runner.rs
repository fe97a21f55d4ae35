//! Stage execution and the stage ladder.

use serde::Serialize;

use super::compare::{compare_traces, DeviationReport};
use super::metrics::{compute_metrics, expectation_failures, StageMetrics};
use super::scenario::Scenario;
use super::ChainError;
use crate::philsim::{InterfaceRow, PhilStage};
use crate::powersim::Plant;
use crate::stagelink::{
    run_closed_loop, ControllerEndpoint, ControllerHost, ControllerLink, LinkSettings, LocalEndpoint, StageKind,
    Trace,
};

#[derive(Debug, Clone)]
pub struct StageRun {
    pub trace: Trace,
    pub metrics: StageMetrics,
    /// Power-interface log, Stage 4 only.
    pub interface_log: Option<Vec<InterfaceRow>>,
    pub failures: Vec<String>,
}

pub fn run_stage(scenario: &Scenario, stage: StageKind, seed: u64) -> Result<StageRun, ChainError> {
    run_stage_via(scenario, stage, seed, None)
}

/// Like [`run_stage`], but frames go to `endpoint` instead of an in-process
/// controller host. Stage 1 has no frames and rejects an endpoint.
pub fn run_stage_via(
    scenario: &Scenario,
    stage: StageKind,
    seed: u64,
    endpoint: Option<Box<dyn ControllerEndpoint>>,
) -> Result<StageRun, ChainError> {
    if !scenario.has_stage(stage) {
        return Err(ChainError::MissingStageBlock(stage.number()));
    }
    let mut sim = scenario.sim.clone();
    sim.seed = seed;
    let plant = Plant::new(&scenario.grid, &sim).map_err(|e| ChainError::Validation(e.to_string()))?;
    let initial = plant.command_registers();

    let link = match stage {
        StageKind::Stage1Pure | StageKind::Stage2Sil => LinkSettings::default(),
        StageKind::Stage3Chil => scenario.stages.stage3.clone().expect("checked by has_stage"),
        StageKind::Stage4Psil => scenario.stages.stage4.as_ref().expect("checked by has_stage").link.clone(),
    };
    let controller = match (stage, endpoint) {
        (StageKind::Stage1Pure, None) => ControllerLink::Direct(scenario.controller.build().map_err(ChainError::Validation)?),
        (StageKind::Stage1Pure, Some(_)) => {
            return Err(ChainError::Usage("stage 1 runs the controller in-process; it takes no endpoint".into()))
        }
        (_, Some(ep)) => ControllerLink::Framed(ep),
        (_, None) => {
            let host = ControllerHost::new(scenario.controller.build().map_err(ChainError::Validation)?, initial);
            ControllerLink::Framed(Box::new(LocalEndpoint::new(host)))
        }
    };

    let (trace, interface_log) = if stage == StageKind::Stage4Psil {
        let block = scenario.stages.stage4.as_ref().expect("checked by has_stage");
        let mut hook = PhilStage::new(block.phil.clone(), sim.dt_s, seed).map_err(|e| ChainError::Validation(e.to_string()))?;
        let trace = run_closed_loop(plant, controller, stage, &link, Some(&mut hook))?;
        (trace, Some(hook.into_interface_log()))
    } else {
        (run_closed_loop(plant, controller, stage, &link, None)?, None)
    };

    let metrics = compute_metrics(scenario, &trace, &initial, seed);
    let failures = expectation_failures(scenario, &metrics);
    Ok(StageRun { trace, metrics, interface_log, failures })
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderReport {
    pub scenario: Scenario,
    pub seed: u64,
    pub stages: Vec<StageMetrics>,
    pub deviations: Vec<DeviationReport>,
    pub failures: Vec<String>,
    pub pass: bool,
}

/// Report for a single run, in the same shape as a ladder report.
pub fn single_report(scenario: &Scenario, seed: u64, run: &StageRun) -> LadderReport {
    LadderReport {
        scenario: scenario.clone(),
        seed,
        stages: vec![run.metrics.clone()],
        deviations: Vec::new(),
        failures: run.failures.clone(),
        pass: run.failures.is_empty(),
    }
}

/// Runs every stage with the same seed, compares each against the lowest
/// stage and every declared tolerance pair, and judges the declared
/// tolerances and expectations. Stages run on separate threads.
pub fn run_ladder(
    scenario: &Scenario,
    stages: &[StageKind],
    seed: u64,
) -> Result<(LadderReport, Vec<StageRun>), ChainError> {
    let mut stages = stages.to_vec();
    stages.sort_by_key(|s| s.number());
    stages.dedup();
    if stages.len() < 2 {
        return Err(ChainError::Usage("a ladder needs at least two distinct stages".into()));
    }
    if let Some(s) = stages.iter().find(|s| !scenario.has_stage(**s)) {
        return Err(ChainError::MissingStageBlock(s.number()));
    }

    let results: Vec<Result<StageRun, ChainError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = stages.iter().map(|s| scope.spawn(move || run_stage(scenario, *s, seed))).collect();
        handles.into_iter().map(|h| h.join().expect("stage thread panicked")).collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let declared = scenario.tolerances.pairs().map_err(ChainError::Validation)?;
    let reference = stages[0].number();
    let mut pairs: Vec<(u8, u8)> = stages[1..].iter().map(|s| (reference, s.number())).collect();
    for (a, b, _) in &declared {
        let present = |x: u8| stages.iter().any(|s| s.number() == x);
        if present(*a) && present(*b) && !pairs.contains(&(*a, *b)) {
            pairs.push((*a, *b));
        }
    }

    let spp = scenario.sim.steps_per_period();
    let mut failures: Vec<String> = runs.iter().flat_map(|r| r.failures.iter().cloned()).collect();
    let mut deviations = Vec::new();
    for (a, b) in pairs {
        let ta = &runs.iter().find(|r| r.metrics.stage == a).expect("stage ran").trace;
        let tb = &runs.iter().find(|r| r.metrics.stage == b).expect("stage ran").trace;
        let tol = declared.iter().find(|(x, y, _)| (*x, *y) == (a, b)).map(|p| p.2);
        match compare_traces(ta, tb, spp, tol) {
            Ok(d) => {
                if d.pass == Some(false) {
                    failures.push(format!(
                        "stages {a}-{b}: power RMS deviation {:.3e} exceeds {:.3e}",
                        d.max_power_rms_rel,
                        tol.unwrap_or(0.0)
                    ));
                }
                deviations.push(d);
            }
            Err(e) if tol.is_some() => failures.push(format!("stages {a}-{b}: {e}")),
            Err(_) => {}
        }
    }

    let report = LadderReport {
        scenario: scenario.clone(),
        seed,
        stages: runs.iter().map(|r| r.metrics.clone()).collect(),
        deviations,
        pass: failures.is_empty(),
        failures,
    };
    Ok((report, runs))
}
