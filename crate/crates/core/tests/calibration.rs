//! Exploratory calibration runs (ignored by default; run with
//! `cargo test -p spheretune-core --test calibration -- --ignored --nocapture`).

use spheretune_core::config::{Precision, TrainConfig};
use spheretune_core::data::synthetic::{build_suite, SyntheticSpec};
use spheretune_core::experiments::{ablation_config, derive_seed};
use spheretune_core::eval;
use spheretune_core::model::{build_model, EncoderSpec};
use spheretune_core::trainer::train;

fn desk_config() -> TrainConfig {
    TrainConfig {
        batch_size: 60,
        extended_batch_size: 240,
        lr_max: 3e-3,
        warmup_epochs: 1,
        decay_epochs: 7,
        max_cycles: 1,
        precision: Precision::Reduced,
        ..TrainConfig::default()
    }
}

#[test]
#[ignore]
fn probe_setup_learning() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        name: "cal".into(),
        identities_train: 20,
        identities_val: 10,
        identities_test: 12,
        generators: 5,
        frames_per_video: 6,
        artifact_amplitude: 0.10,
        noise_std: 0.02,
        ..SyntheticSpec::default()
    };
    let t0 = std::time::Instant::now();
    let suite = build_suite(&spec, dir.path(), 2).unwrap();
    println!("suite generated in {:?}", t0.elapsed());
    println!(
        "train: {} videos / {} frames, val {}, tests {}x{}",
        suite.train.records.len(),
        suite.train.records.iter().map(|r| r.frame_paths.len()).sum::<usize>(),
        suite.val.records.len(),
        suite.tests.len(),
        suite.tests[0].records.len()
    );

    let base = desk_config();
    let encoder = EncoderSpec::tiny_vit();
    for setup in [1usize, 2, 3, 4, 5] {
        for seed_ix in 0..2u64 {
            let mut config = ablation_config(&base, setup);
            config.seed = derive_seed(7, "cal", &[setup as u64, seed_ix]);
            let model = build_model(&encoder, &config.policy, config.seed).unwrap();
            let t = std::time::Instant::now();
            let outcome = train(model, &suite.train, &suite.val, config.clone(), None).unwrap();
            let mut test_aurocs = Vec::new();
            for m in &suite.tests {
                let (scores, _) = eval::score_manifest(&outcome.best_model, &config, m, None).unwrap();
                test_aurocs.push(eval::auroc_of_scores(&scores).unwrap());
            }
            println!(
                "setup {setup} seed {seed_ix}: best_val={:.3} (epoch {}), test={:?}, ce0={:.3}, {:?}",
                outcome.best_val_auroc,
                outcome.best_epoch,
                test_aurocs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                outcome.steps.first().map(|s| s.cross_entropy).unwrap_or(f64::NAN),
                t.elapsed()
            );
        }
    }
}
