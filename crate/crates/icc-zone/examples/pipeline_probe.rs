// temporary diagnostic for scene tuning
use icc_zone::acoustics::{Geometry, Point3};
use icc_zone::estimator::{build_model, AlphaSpec, EstimatorConfig, IccForwardModel};
use icc_zone::harness::{run_detection, ExperimentConfig};
use icc_zone::sim::{simulate, IccConfig, NoiseSpec};
use icc_zone::zone::SprConfig;

fn candidate(name: &str, geometry: Geometry, depth_db: f64) {
    let mut cfg = ExperimentConfig::default();
    cfg.scene.geometry = geometry;
    cfg.source.modulation_depth_db = depth_db;
    let scene = cfg.build_scene().unwrap();
    let cal = match icc_zone::harness::ensure_calibration(&cfg, &scene) {
        Ok(c) => c,
        Err(e) => {
            println!("{name}: calibration failed: {e}");
            return;
        }
    };
    let stft = cfg.stft_config().unwrap();
    let source = cfg.source_signal().unwrap();
    let model0 = build_model(
        &scene.geometry,
        &stft,
        &IccForwardModel { tau_icc: 0.015, fixed_gain: cal.forward_gain },
        &EstimatorConfig::new(0.0),
    )
    .unwrap();

    println!("--- {name}: fg={:.4} sigma={:.4}", cal.forward_gain, cal.mismatch_sigma);
    for alpha in [f64::NEG_INFINITY, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0] {
        let mut icc = IccConfig::new(alpha);
        icc.forward_gain = cal.forward_gain;
        icc.mismatch_sigma = cal.mismatch_sigma;
        let out = simulate(&scene, &icc, &source, NoiseSpec::SnrDb(20.0), 99).unwrap();
        let model = model0.with_alpha(&AlphaSpec::BroadbandDb(alpha)).unwrap();
        let trace = run_detection(&out, &model, &stft, &SprConfig::default(), 0.8, 40.0).unwrap();
        let frames = trace.frames();
        let strict = |sprs: &Vec<Vec<f64>>| {
            sprs.iter().filter(|f| f.iter().skip(1).all(|&v| f[0] > v)).count() as f64 / frames as f64
        };
        let rate = |dec: &Vec<usize>| dec.iter().filter(|&&d| d == 0).count() as f64 / frames as f64;
        println!(
            "{alpha:5.1} | {:5} | rate {:.3} {:.3} | sep {:.3} {:.3}",
            !out.unstable,
            rate(&trace.decisions_unprocessed), rate(&trace.decisions_processed),
            strict(&trace.spr_unprocessed), strict(&trace.spr_processed),
        );
    }
}

fn geom(front_x: f64, spk: [f64; 3], spk_y_off: f64) -> Geometry {
    Geometry {
        mic_positions: vec![
            Point3::new(front_x, 0.42, 1.22),
            Point3::new(front_x, 1.08, 1.22),
            Point3::new(2.28, 0.45, 1.10),
            Point3::new(2.28, 1.05, 1.10),
        ],
        loudspeaker_positions: vec![
            Point3::new(spk[0], spk_y_off, spk[2]),
            Point3::new(spk[0], 1.5 - spk_y_off, spk[2]),
        ],
        zone_sources: vec![
            Point3::new(0.90, 0.40, 0.95),
            Point3::new(0.90, 1.10, 0.95),
            Point3::new(1.95, 0.42, 0.95),
            Point3::new(1.95, 1.08, 0.95),
        ],
        speed_of_sound: 343.0,
    }
}

fn main() {
    candidate("C8: front 1.55, depth 8", geom(1.55, [2.12, 0.0, 0.85], 0.20), 8.0);
    candidate("D6: front 1.60, близк spk, depth 6", geom(1.60, [2.16, 0.0, 0.95], 0.28), 6.0);
    candidate("D8: front 1.60, close spk, depth 8", geom(1.60, [2.16, 0.0, 0.95], 0.28), 8.0);
}
