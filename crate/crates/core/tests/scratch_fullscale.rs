//! Temporary full-scale direction probe (not part of the suite).

use std::time::Instant;

use xmd_core::config::ProjectConfig;
use xmd_core::dataset::generate_dataset;
use xmd_core::models::TapLayer;
use xmd_core::pipeline::{run_depth_probes, run_pipeline};
use xmd_core::training::TrainMode;

#[test]
#[ignore]
fn fullscale_seed0() {
    let root = std::path::PathBuf::from("/tmp/xmd_fullscale");
    let data = root.join("data");
    let exp = root.join("exp");
    let cfg = ProjectConfig::default();
    if !data.join("domain_A/train/manifest.jsonl").exists() {
        let t = Instant::now();
        generate_dataset(&cfg, &data, 1234).unwrap();
        println!("dataset: {:.1?}", t.elapsed());
    }
    for mode in [
        TrainMode::Baseline,
        TrainMode::Paired,
        TrainMode::BnAblation,
        TrainMode::Unpaired,
    ] {
        let t = Instant::now();
        let s = run_pipeline(&cfg, mode, 0, &data, &exp).unwrap();
        println!(
            "{}: val mIoU {:.4}, domainB {:.4}, 3d acc {:?} ({:.1?})",
            mode.as_str(),
            s.best_val_miou,
            s.domain_b_miou,
            s.point_accuracy,
            t.elapsed()
        );
    }
    for mode in ["baseline", "paired"] {
        let t = Instant::now();
        let probes = run_depth_probes(
            &cfg,
            &exp.join(format!("{mode}-s0")),
            &data,
            &[TapLayer::Stem, TapLayer::Stage3],
        )
        .unwrap();
        println!("{mode} probes: {probes:?} ({:.1?})", t.elapsed());
    }
}
