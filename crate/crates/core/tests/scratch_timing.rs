//! Temporary timing probe (not part of the suite).

use std::time::Instant;

use xmd_core::config::ProjectConfig;
use xmd_core::dataset::*;
use xmd_core::pipeline::run_pipeline;
use xmd_core::training::*;

#[test]
#[ignore]
fn timing_probe() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut cfg = ProjectConfig::default();
    cfg.data.train_scenes = 24;
    cfg.data.val_scenes = 8;
    cfg.data.aux3d_scenes = 12;
    // Full-size points and images.
    let t0 = Instant::now();
    generate_dataset(&cfg, &data, 7).unwrap();
    println!("dataset gen (44 scenes @8192pts): {:.1?}", t0.elapsed());

    let a_train = data.join("domain_A/train");
    let a_val = data.join("domain_A/val");
    let train_clouds = load_clouds(&a_train).unwrap();
    let holdout = load_clouds(&a_val).unwrap();

    let t1 = Instant::now();
    let mut cfg3 = cfg.clone();
    cfg3.pretrain3d.iters = 100;
    let teacher = pretrain_3d(&cfg3, &train_clouds, &holdout, 0, &dir.path().join("t")).unwrap();
    println!(
        "3D pretrain 100 iters (incl knn for 24 scenes): {:.1?}, acc {:.3}",
        t1.elapsed(),
        teacher.point_accuracy
    );

    let t2 = Instant::now();
    let stats = compute_3d_feature_stats(&teacher.net, &teacher.store, &train_clouds, 8).unwrap();
    println!("3D stats over 24 scenes: {:.1?} (count {})", t2.elapsed(), stats.count);

    // Paired training speed at full batch/image size.
    let mut fast = cfg.clone();
    fast.train.total_iters = 50;
    fast.train.eval_every = 50;
    fast.pretrain3d.iters = 100;
    let t3 = Instant::now();
    let _ = run_pipeline(&fast, TrainMode::Baseline, 0, &data, &dir.path().join("e")).unwrap();
    println!("baseline 50 iters + 1 eval(8 scenes): {:.1?}", t3.elapsed());

    let t4 = Instant::now();
    let _ = run_pipeline(&fast, TrainMode::Paired, 0, &data, &dir.path().join("e")).unwrap();
    println!("paired pipeline (pretrain100 + stats + 50 iters): {:.1?}", t4.elapsed());

    let t5 = Instant::now();
    let _ = run_pipeline(&fast, TrainMode::Unpaired, 0, &data, &dir.path().join("e")).unwrap();
    println!("unpaired pipeline: {:.1?}", t5.elapsed());
}
