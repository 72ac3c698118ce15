use std::time::Instant;
use pet::config::{RunConfig, SplitMode};
use pet::data::{generate, SynthConfig};
use pet::model::PetModel;
use pet::trainer::{evaluate_on_scenes, Trainer};

fn main() {
    let synth = SynthConfig {
        width: 128, height: 128,
        count_min: 3, count_max: 80,
        head_radius_min: 1.5, head_radius_max: 4.0,
        perspective: 6.0, overlap_cap: 0.25, clutter: 4, seed: 11,
    };
    let train = generate(&synth, 600).unwrap();
    let test = generate(&SynthConfig { seed: 999, ..synth }, 100).unwrap();
    let mean_count: f64 = train.iter().map(|s| s.count() as f64).sum::<f64>() / train.len() as f64;
    let baseline_mae: f64 = test.iter().map(|s| (s.count() as f64 - mean_count).abs()).sum::<f64>() / test.len() as f64;
    println!("baseline MAE {baseline_mae:.2}");

    for (label, mode) in [
        ("quad", SplitMode::Learned),
        ("sparse", SplitMode::Never),
        ("dense", SplitMode::Always),
    ] {
        let cfg = RunConfig {
            backbone_channels: vec![8, 16, 32],
            feature_channels: 32,
            crop: 128,
            batch_size: 8,
            epochs: 5,
            split_mode: mode,
            lr_backbone: 1e-3,
            lr_transformer: 1e-3,
            scale_min: 1.0, scale_max: 1.0,
            flip_prob: 0.5,
            seed: 1,
            ..RunConfig::default()
        };
        let (model, store) = PetModel::new(&cfg).unwrap();
        let mut tr = Trainer::new(&model, store, cfg.clone());
        for epoch in 0..5 {
            let t1 = Instant::now();
            let stats = tr.train_epoch(&train, epoch).unwrap();
            let te = t1.elapsed().as_secs_f64();
            let report = evaluate_on_scenes(&model, &tr.store, &test, 0.5, &[4.0, 8.0]).unwrap();
            println!(
                "{label} ep{epoch}: loss {:.4} ({te:.0}s) MAE {:.2} F1@4 {:.3} F1@8 {:.3}",
                stats.mean_total, report.mae,
                report.thresholds[0].f1, report.thresholds[1].f1,
            );
        }
    }
}
