use gridloop::philsim::{
    gain_ratio, itm_couple, run_itm_loop, Amplifier, AmplifierModel, HutEmulator, HutKind, PhilCoupling,
    VerdictKind, DEFAULT_TOL,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DT: f64 = 1e-4;

fn resistive_loop(z_ros: f64, r: f64, model: AmplifierModel, steps: usize, noise: f64) -> gridloop::philsim::ItmRun {
    let c = PhilCoupling { ros_source_v: 230.0, z_ros_ohm: z_ros, probe_noise_sigma: noise };
    let mut amp = Amplifier::new(model, DT).unwrap();
    let mut hut = HutEmulator::new(HutKind::ResistiveLoad { r_ohm: r }).unwrap();
    run_itm_loop(&c, &mut amp, &mut hut, steps, DT, 11, DEFAULT_TOL).unwrap()
}

fn unclamped() -> AmplifierModel {
    AmplifierModel { v_limit: 1e300, ..AmplifierModel::ideal() }
}

#[test]
fn steady_state_matches_voltage_divider() {
    for (z, r) in [(1.0, 10.0), (4.0, 5.0), (0.0, 3.0)] {
        let run = resistive_loop(z, r, unclamped(), 5000, 0.0);
        let i = run.samples.last().unwrap().i_hut;
        assert!((i - 230.0 / (z + r)).abs() < 1e-9, "z {z} r {r}: {i}");
    }
}

#[test]
fn open_circuit_first_step_and_stiff_source() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = PhilCoupling { ros_source_v: 230.0, z_ros_ohm: 3.0, probe_noise_sigma: 0.0 };
    assert_eq!(itm_couple(&c, 0.0, &mut rng), (230.0, 0.0));
    let stiff = PhilCoupling { z_ros_ohm: 0.0, ..c };
    for i in [0.0, 5.0, -40.0, 1e6] {
        assert_eq!(itm_couple(&stiff, i, &mut rng).0, 230.0);
    }
}

#[test]
fn stable_ratios_never_diverge() {
    for ratio in [0.1, 0.5, 0.85, 0.89] {
        let run = resistive_loop(ratio * 10.0, 10.0, unclamped(), 100_000, 0.0);
        assert_eq!(run.first_diverging_step, None, "ratio {ratio}");
        assert_eq!(run.samples.len(), 100_000);
        let bound = 230.0 / 10.0 / (1.0 - ratio) + 1.0;
        assert!(run.samples.iter().all(|s| s.i_hut.abs() <= bound), "ratio {ratio}");
    }
}

#[test]
fn unstable_ratios_diverge_quickly() {
    for ratio in [1.11, 1.5, 2.0, 10.0] {
        for model in [unclamped(), AmplifierModel::ideal()] {
            let run = resistive_loop(ratio * 10.0, 10.0, model, 1000, 0.0);
            assert!(run.first_diverging_step.is_some_and(|n| n < 1000), "ratio {ratio}");
        }
    }
    assert_eq!(gain_ratio(10.0, 1.0).unwrap(), 10.0);
}

#[test]
fn unit_ratio_oscillates_with_constant_envelope() {
    let run = resistive_loop(10.0, 10.0, unclamped(), 10_000, 0.0);
    assert_eq!(run.first_diverging_step, None);
    assert!(run.verdicts.iter().all(|(_, v)| v.kind == VerdictKind::Marginal && v.growth_rate.abs() < 1e-3));
    let peaks: Vec<f64> = run.samples.chunks(1000).map(|c| c.iter().fold(0.0f64, |m, s| m.max(s.i_hut.abs()))).collect();
    let (lo, hi) = peaks.iter().fold((f64::INFINITY, 0.0f64), |(l, h), p| (l.min(*p), h.max(*p)));
    assert!((hi - lo) / hi < 0.01);
}

#[test]
fn probe_noise_is_unbiased() {
    let sigma = 0.5;
    let run = resistive_loop(1.0, 10.0, AmplifierModel::ideal(), 100_000, sigma);
    let n = run.samples.len() - 1;
    let mean = run.samples.windows(2).map(|w| w[1].i_inj - w[0].i_hut).sum::<f64>() / n as f64;
    assert!(mean.abs() <= 3.0 * sigma / (n as f64).sqrt(), "{mean}");
}

#[test]
fn amplifier_dc_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for gain in [0.5, 1.0, 1.7] {
        let model = AmplifierModel { gain, tau_s: 20.0 * DT, delay_s: 3.0 * DT, ..AmplifierModel::ideal() };
        let mut amp = Amplifier::new(model, DT).unwrap();
        let mut y = 0.0;
        for _ in 0..5000 {
            y = amp.step(100.0, DT, &mut rng);
        }
        assert!((y / 100.0 - gain).abs() < 1e-6);
    }
    let mut amp = Amplifier::new(AmplifierModel { v_limit: 50.0, ..AmplifierModel::ideal() }, DT).unwrap();
    assert_eq!(amp.step(100.0, DT, &mut rng), 50.0);
}
