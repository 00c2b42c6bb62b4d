//! Temporary depth-probe direction check (not part of the suite).

use xmd_core::config::ProjectConfig;
use xmd_core::models::TapLayer;
use xmd_core::pipeline::run_depth_probes;

#[test]
#[ignore]
fn probe_direction() {
    let root = std::path::PathBuf::from("/tmp/xmd_fullscale");
    let data = root.join("data");
    let cfg = ProjectConfig::default();
    for mode in ["baseline", "paired"] {
        let exp = root.join(format!("exp/{mode}-s0"));
        let t = std::time::Instant::now();
        let probes = run_depth_probes(
            &cfg,
            &exp,
            &data,
            &[TapLayer::Stem, TapLayer::Stage3],
        )
        .unwrap();
        for (tap, ssim) in probes {
            println!("{mode} {}: SSIM {ssim:.4}", tap.name());
        }
        println!("  ({:.1?})", t.elapsed());
    }
}
