use std::net::TcpListener;
use std::path::Path;

use gridloop::chainrunner::{load_scenario, run_stage, run_stage_via, Scenario};
use gridloop::mgc::ControlLevel;
use gridloop::powersim::Plant;
use gridloop::stagelink::registers::cmd;
use gridloop::stagelink::{
    run_closed_loop, serve_connection, CommandImage, ControlOutput, Controller, ControllerHost, ControllerLink,
    Direction, ImpairmentProfile, LinkSettings, LocalEndpoint, Measurements, StageKind, TcpEndpoint, Trace,
};
use proptest::prelude::*;

fn fixture(name: &str) -> Scenario {
    load_scenario(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)).unwrap()
}

/// Writes a new PV ceiling every cycle, ignoring measurements, so command
/// timing can be read straight off the trace.
struct Scripted {
    image: CommandImage,
    k: u64,
}

impl Controller for Scripted {
    fn level(&self) -> ControlLevel {
        ControlLevel::d3()
    }
    fn init(&mut self, registers: &CommandImage) {
        self.image = *registers;
    }
    fn step(&mut self, _meas: &Measurements) -> ControlOutput {
        self.k += 1;
        self.image.set(cmd::PV_CURTAIL, 10.0 + (self.k % 5) as f64);
        ControlOutput { image: self.image, events: vec![] }
    }
}

fn scripted_run(sc: &Scenario, stage: StageKind, profile: ImpairmentProfile) -> Trace {
    let plant = Plant::new(&sc.grid, &sc.sim).unwrap();
    let ctl = Box::new(Scripted { image: CommandImage::default(), k: 0 });
    let host = ControllerHost::new(ctl, plant.command_registers());
    let link = LinkSettings { profile, timeout_s: 1.0 };
    run_closed_loop(plant, ControllerLink::Framed(Box::new(LocalEndpoint::new(host))), stage, &link, None).unwrap()
}

#[test]
fn delay_of_two_periods_shifts_every_command_by_two_cycles() {
    let sc = fixture("offgrid_minload.json");
    let spp = sc.sim.steps_per_period() as u64;
    let reference = scripted_run(&sc, StageKind::Stage2Sil, ImpairmentProfile::null());
    // three traversals (read request, response, write) precede actuation
    let per_traversal = 2.0 * sc.sim.control_period_s / 3.0;
    let delayed = scripted_run(
        &sc,
        StageKind::Stage3Chil,
        ImpairmentProfile { base_delay_s: per_traversal, ..ImpairmentProfile::null() },
    );

    assert!(reference.applied.len() > 250);
    let mut matched = 0;
    for a in &reference.applied {
        if let Some(b) = delayed.applied.iter().find(|b| b.seq == a.seq && b.addr == a.addr) {
            assert_eq!(b.step, a.step + 2 * spp, "seq {}", a.seq);
            assert_eq!(b.value.to_bits(), a.value.to_bits());
            matched += 1;
        }
    }
    // writes due after the last recorded step never land
    let last = (delayed.steps.len() - 1) as u64;
    let late = reference.applied.iter().filter(|a| a.step + 2 * spp > last).count();
    assert!(late >= 1);
    assert_eq!(matched, reference.applied.len() - late);

    let shift = 2 * spp as usize;
    for (n, row) in reference.steps.iter().enumerate().take(reference.steps.len() - shift) {
        assert_eq!(row.pv_curtail_kw, delayed.steps[n + shift].pv_curtail_kw, "row {n}");
    }
}

#[test]
fn tcp_controller_matches_in_process_controller() {
    let sc = fixture("offgrid_minload.json");
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server_sc = sc.clone();
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let plant = Plant::new(&server_sc.grid, &server_sc.sim).unwrap();
        let mut host = ControllerHost::new(server_sc.controller.build().unwrap(), plant.command_registers());
        serve_connection(&mut host, stream).unwrap();
    });

    let seed = sc.sim.seed;
    let endpoint = Box::new(TcpEndpoint::connect(addr).unwrap());
    let remote = run_stage_via(&sc, StageKind::Stage3Chil, seed, Some(endpoint)).unwrap();
    server.join().unwrap();
    let local = run_stage(&sc, StageKind::Stage3Chil, seed).unwrap();

    assert!(remote.trace.behavior_eq(&local.trace));
    assert_eq!(remote.trace.messages, local.trace.messages);
}

#[test]
fn total_loss_leaves_the_plant_open_loop() {
    let mut sc = fixture("offgrid_minload.json");
    let link = sc.stages.stage3.as_mut().unwrap();
    link.profile.loss_prob = 1.0;
    let run = run_stage(&sc, StageKind::Stage3Chil, 7).unwrap();
    assert!(run.trace.applied.is_empty());
    assert!(run.trace.steps.iter().all(|r| r.bank_mask == 0));
    // high irradiation from 10 s to 20 s leaves the diesel at 10 kW
    assert!(run.metrics.time_below_ratio_s >= 9.9);
    assert!(run.metrics.controller_timeouts > 0);
}

#[test]
fn stage_one_rejects_impairments() {
    let sc = fixture("offgrid_minload.json");
    let plant = Plant::new(&sc.grid, &sc.sim).unwrap();
    let link = LinkSettings { profile: ImpairmentProfile { loss_prob: 0.5, ..ImpairmentProfile::null() }, timeout_s: 1.0 };
    let ctl = sc.controller.build().unwrap();
    assert!(run_closed_loop(plant, ControllerLink::Direct(ctl), StageKind::Stage1Pure, &link, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn messages_are_conserved(
        loss in 0.0f64..1.0,
        delay in 0.0f64..0.3,
        jitter in 0.0f64..0.02,
        seed in any::<u64>(),
    ) {
        let mut sc = fixture("offgrid_minload.json");
        sc.sim.duration_s = 4.0;
        sc.grid.events.clear();
        let link = sc.stages.stage3.as_mut().unwrap();
        link.profile.loss_prob = loss;
        link.profile.base_delay_s = delay;
        link.profile.jitter_s = jitter.min(delay);
        let run = run_stage(&sc, StageKind::Stage3Chil, seed).unwrap();
        for dir in [Direction::ToPlant, Direction::ToController] {
            let c = run.trace.link_counts(dir);
            prop_assert_eq!(c.sent, c.delivered + c.dropped);
        }
        prop_assert_eq!(run.trace.dropped_messages(), run.metrics.messages_dropped);
    }
}
