use wavescale_core::nn::Adam;
use wavescale_core::sphere::{build_frame, synthesize, KernelParams, TimeAxis};
use wavescale_core::synth::{generate_pyramid, generate_with_time, BiasSpec, ProcessSpec};
use wavescale_core::training::*;

#[test]
fn synthetic_truth_survives_analysis_and_synthesis() {
    let f = build_frame(8, 3, KernelParams::default()).unwrap();
    let time = TimeAxis::three_hourly(TimeAxis::DEFAULT_START, 40);
    let (stack, pyr) = generate_with_time(&ProcessSpec::default(), None, &f, time).unwrap();
    let back = synthesize(&pyr, &f, stack.grid()).unwrap();
    let scale = stack.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let err = stack
        .as_slice()
        .iter()
        .zip(back.as_slice())
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(err <= 1e-10 * scale, "{err} vs {scale}");
}

#[test]
fn debiasing_reduces_held_out_loss_and_applies_deterministically() {
    let f = build_frame(8, 3, KernelParams::default()).unwrap();
    let time = TimeAxis::three_hourly(TimeAxis::DEFAULT_START, 730);
    let spec = ProcessSpec::default();
    let bias = BiasSpec {
        level_variance: vec![4.0; 3],
        tail_suppression: 0.5,
        phase_speed: 1.5,
        slope_shift: 0.0,
    };
    let obs = generate_pyramid(&spec, None, &f, 1..=2, time).unwrap();
    let members: Vec<_> = (0..3)
        .map(|m| generate_pyramid(&ProcessSpec { seed: 20 + m, ..spec.clone() }, Some(&bias), &f, 1..=2, time).unwrap())
        .collect();

    let mut cfg = TrainingConfig::default();
    cfg.levels = [1, 2];
    cfg.debias = DebiasOptions { hidden: 2, residual_width: 4 };
    cfg.optimizer = Adam { learning_rate: 0.03, ..Adam::default() };
    let mut run = TrainingRun::new(&f, cfg).unwrap();
    let train: Vec<DataView> = members[..2].iter().map(DataView::whole).collect();
    let held = [DataView::whole(&members[2])];
    run.calibrate(&train, &train).unwrap();
    run.set_targets(&DataView::whole(&obs)).unwrap();

    let before = evaluate_outputs(&run, &held).unwrap().loss;
    for _ in 0..30 {
        debias_step(&mut run, &train).unwrap();
    }
    let snap = global_pass(&run, &held).unwrap();
    let after = evaluate_outputs(&run, &snap.views()).unwrap().loss;
    assert!(after < 0.5 * before, "{before} -> {after}");

    let a = run.apply(&members[2]).unwrap();
    let b = run.apply(&members[2]).unwrap();
    assert_eq!(a, b);
    assert_eq!(run.monitor().peak(), 1);
}
