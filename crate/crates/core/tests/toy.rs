use combiverse_core::combiner::{ablation_matrix, combine, AblationMode, CombineIo};
use combiverse_core::guidance::GuidanceMode;
use combiverse_core::scenes::{squirrel_on_box, ToyScene, ToyStart, TOY_SIZE};

fn displacement(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

#[test]
fn ssds_reaches_the_relation_from_both_starts() {
    for start in ToyStart::BOTH {
        let toy = squirrel_on_box(start);
        let provider = toy.provider(0).unwrap();
        let problem = toy.problem(&provider).unwrap();
        let config = toy.config(GuidanceMode::Ssds, 0);
        assert_eq!(config.guidance.multiplier, 25.0);
        assert_eq!(
            (config.guidance.timesteps.low, config.guidance.timesteps.high),
            (800, 900)
        );
        let out = combine(&problem, &toy.init, &config, &CombineIo::default()).unwrap();
        let err = ToyScene::relation_error_px(&out.params);
        assert!(err < 0.05 * TOY_SIZE as f64, "{start:?}: error {err:.2} px");
        assert!(ToyScene::relation_error_px(&toy.init) > 0.25 * TOY_SIZE as f64);
        // The box is frozen.
        assert_eq!(out.params[0], toy.init[0]);
    }
}

#[test]
fn plain_sds_does_not_push() {
    for start in ToyStart::BOTH {
        let toy = squirrel_on_box(start);
        let provider = toy.provider(0).unwrap();
        let problem = toy.problem(&provider).unwrap();
        let out = combine(
            &problem,
            &toy.init,
            &toy.config(GuidanceMode::Sds, 0),
            &CombineIo::default(),
        )
        .unwrap();
        let moved = displacement(
            ToyScene::squirrel_center_px(&out.params),
            ToyScene::squirrel_center_px(&toy.init),
        );
        assert!(moved < 0.01 * TOY_SIZE as f64, "{start:?}: moved {moved:.3} px");
    }
}

#[test]
fn full_range_beats_low_and_uniform_noise() {
    let modes = [AblationMode::SsdsFull, AblationMode::SsdsUniform, AblationMode::SsdsLow];
    for start in ToyStart::BOTH {
        let toy = squirrel_on_box(start);
        let mut wins = 0;
        let seeds = 0..5u64;
        for seed in seeds.clone() {
            let provider = toy.provider(seed).unwrap();
            let problem = toy.problem(&provider).unwrap();
            let rows = ablation_matrix(&problem, &toy.init, &toy.config(GuidanceMode::Ssds, seed), &modes).unwrap();
            let e: Vec<f64> = rows
                .iter()
                .map(|r| ToyScene::relation_error_px(&r.outcome.params))
                .collect();
            if e[0] < e[1] && e[0] < e[2] {
                wins += 1;
            }
        }
        assert!(
            wins * 2 > seeds.count(),
            "{start:?}: full range best in only {wins} runs"
        );
    }
}

#[test]
fn ablation_rows_are_deterministic() {
    let toy = squirrel_on_box(ToyStart::Left);
    let provider = toy.provider(2).unwrap();
    let problem = toy.problem(&provider).unwrap();
    let mut config = toy.config(GuidanceMode::Ssds, 2);
    config.optimizer.iterations = 40;
    let a = ablation_matrix(
        &problem,
        &toy.init,
        &config,
        &[AblationMode::Base, AblationMode::SsdsFull],
    )
    .unwrap();
    let b = ablation_matrix(
        &problem,
        &toy.init,
        &config,
        &[AblationMode::Base, AblationMode::SsdsFull],
    )
    .unwrap();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.outcome.params, y.outcome.params);
        assert_eq!(x.outcome.run.losses, y.outcome.run.losses);
    }
    let single = ablation_matrix(&problem, &toy.init, &config, &[AblationMode::Base]).unwrap();
    assert_eq!(single.len(), 1);
}
