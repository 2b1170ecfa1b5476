use std::collections::BTreeMap;

use mmsr_core::data::{CtVolume, Modality, Spacing};
use mmsr_core::eval::{
    bicubic_upsample, consistency_metrics, emit_montage, export_slice_pngs, oracle_metrics, psnr,
    volume_consistency, volume_oracle, ConsistencyMetrics, IntensityWindow, MetricsReport, OracleMetrics,
    ReportSettings, PSNR_CAP_DB,
};
use mmsr_core::infer::{plan_tiles, super_resolve_slice, NearestUpsampler};
use mmsr_core::loss::{nn_upsample, SsimParams};
use mmsr_core::{Error, ImagePatch};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_patch(h: usize, w: usize, seed: u64) -> ImagePatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImagePatch::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0))
}

/// Pixel-loop MSE and standard global SSIM.
fn naive(a: &ImagePatch, b: &ImagePatch) -> (f64, f64) {
    let (h, w) = a.dims();
    let n = (h * w) as f64;
    let (mut sa, mut sb, mut se) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            sa += a.get(r, c);
            sb += b.get(r, c);
            se += (a.get(r, c) - b.get(r, c)).powi(2);
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let (da, db) = (a.get(r, c) - ma, b.get(r, c) - mb);
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    let (c1, c2) = (0.02, 0.06);
    let ssim = (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    (se / n, ssim)
}

#[test]
fn perfect_consistency_hits_the_psnr_cap() {
    let x = random_patch(12, 9, 1);
    let m = consistency_metrics(&x, &nn_upsample(&x, 8).unwrap()).unwrap();
    assert_eq!(m.consistency_mse, 0.0);
    assert_eq!(m.consistency_psnr, PSNR_CAP_DB);
    assert!((m.consistency_ssim - 1.0).abs() < 1e-12);
}

#[test]
fn unit_offset_gives_six_decibels() {
    let x = ImagePatch::filled(4, 4, 0.0);
    let sr = ImagePatch::filled(32, 32, 1.0);
    let m = consistency_metrics(&x, &sr).unwrap();
    assert_eq!(m.consistency_mse, 1.0);
    assert!((m.consistency_psnr - 10.0 * 4.0f64.log10()).abs() < 1e-12);
    assert!((m.consistency_psnr - 6.0206).abs() < 1e-4);
}

#[test]
fn shape_errors() {
    let x = ImagePatch::filled(4, 4, 0.0);
    assert!(matches!(consistency_metrics(&x, &ImagePatch::filled(32, 24, 0.0)), Err(Error::Shape(_))));
    assert!(matches!(oracle_metrics(&x, &ImagePatch::filled(4, 5, 0.0)), Err(Error::Shape(_))));
}

#[test]
fn oracle_metrics_match_pixel_loops() {
    let t = random_patch(16, 16, 2);
    assert_eq!(oracle_metrics(&t, &t).unwrap().hr_mse, 0.0);
    let shifted = ImagePatch::from_fn(16, 16, |r, c| t.get(r, (c + 1) % 16));
    assert!(oracle_metrics(&shifted, &t).unwrap().hr_mse > 0.0);
    for seed in 0..20 {
        let a = random_patch(24, 20, 100 + seed);
        let b = random_patch(24, 20, 200 + seed);
        let got = oracle_metrics(&a, &b).unwrap();
        let (m, s) = naive(&a, &b);
        assert!((got.hr_mse - m).abs() < 1e-9);
        assert!((got.hr_ssim - s).abs() < 1e-9);
        assert!((got.hr_psnr - 10.0 * (4.0 / m).log10()).abs() < 1e-9);
    }
}

#[test]
fn consistency_does_not_depend_on_tiling() {
    let x = ImagePatch::from_fn(40, 40, |r, c| (((r * 7 + c * 3) % 17) as f32 / 8.5 - 1.0) as f64);
    let whole = consistency_metrics(&x, &nn_upsample(&x, 8).unwrap()).unwrap();
    for (tile, overlap) in [(16, 0), (16, 8), (32, 4)] {
        let sr = super_resolve_slice(&NearestUpsampler, &x, &plan_tiles((40, 40), tile, overlap).unwrap()).unwrap();
        assert_eq!(consistency_metrics(&x, &sr).unwrap(), whole);
    }
}

#[test]
fn volume_metrics_pool_slices() {
    let lr_slices: Vec<ImagePatch> = (0..3).map(|z| random_patch(6, 5, z)).collect();
    let sp = Spacing::mm(0.6, 0.6, 0.6);
    let lr = CtVolume::from_slices("v", Modality::Clinical, sp, &lr_slices).unwrap();
    let up: Vec<ImagePatch> = lr_slices.iter().map(|s| nn_upsample(s, 8).unwrap()).collect();
    let sr = CtVolume::from_slices("v-sr", Modality::SyntheticMicro, sp, &up).unwrap();
    assert_eq!(volume_consistency(&lr, &sr).unwrap().consistency_mse, 0.0);
    assert_eq!(volume_oracle(&sr, &sr).unwrap().hr_mse, 0.0);
    let off: Vec<ImagePatch> = up.iter().map(|s| s.map(|v| v + 0.25)).collect();
    let shifted = CtVolume::from_slices("v-off", Modality::SyntheticMicro, sp, &off).unwrap();
    let m = volume_oracle(&shifted, &sr).unwrap();
    assert!((m.hr_mse - 0.0625).abs() < 1e-6);
    assert!(matches!(volume_consistency(&lr, &lr), Err(Error::Shape(_))));
}

#[test]
fn bicubic_keeps_constants_and_shape() {
    let c = bicubic_upsample(&ImagePatch::filled(5, 7, -0.25), 8).unwrap();
    assert_eq!(c.dims(), (40, 56));
    assert!(c.data().iter().all(|v| (v + 0.25).abs() < 1e-6));
    let ramp = ImagePatch::from_fn(8, 8, |_, col| col as f64 / 8.0 - 0.5);
    let up = bicubic_upsample(&ramp, 8).unwrap();
    // Interior columns follow the ramp at pixel-centre positions.
    let want = |x: usize| ((x as f64 + 0.5) / 8.0 - 0.5) / 8.0 - 0.5;
    for x in 16..48 {
        assert!((up.get(30, x) - want(x)).abs() < 1e-5, "column {x}");
    }
}

#[test]
fn montage_layout_errors_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let lr = random_patch(8, 8, 3);
    let sr = nn_upsample(&lr, 8).unwrap();
    let base = bicubic_upsample(&lr, 8).unwrap();
    let path = dir.path().join("m.png");
    emit_montage(&lr, &sr, &base, &path).unwrap();
    let img = image::open(&path).unwrap();
    assert_eq!(img.width(), 3 * 64);
    assert!(img.height() > 64);
    let first = std::fs::read(&path).unwrap();
    emit_montage(&lr, &sr, &base, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    let small = ImagePatch::filled(32, 64, 0.0);
    assert!(matches!(emit_montage(&lr, &sr, &small, &path), Err(Error::Shape(_))));
}

#[test]
fn sixteen_bit_slices_and_window_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let slices = vec![ImagePatch::from_fn(4, 6, |r, c| (r * 6 + c) as f64 * 10.0 - 100.0); 2];
    let vol = CtVolume::from_slices("s", Modality::Clinical, Spacing::mm(1.0, 1.0, 1.0), &slices).unwrap();
    let paths = export_slice_pngs(&vol, dir.path(), IntensityWindow { lo: -100.0, hi: 130.0 }).unwrap();
    assert_eq!(paths.len(), 2);
    let img = image::open(&paths[1]).unwrap().into_luma16();
    assert_eq!(img.dimensions(), (6, 4));
    assert_eq!(img.get_pixel(0, 0)[0], 0);
    assert_eq!(img.get_pixel(5, 3)[0], u16::MAX);
    let w: IntensityWindow =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("window.json")).unwrap()).unwrap();
    assert_eq!(w.hi, 130.0);
}

#[test]
fn report_round_trips_through_json() {
    let c = ConsistencyMetrics {
        consistency_mse: 0.1 + 0.2,
        consistency_psnr: psnr(0.3),
        consistency_ssim: 0.987654321,
    };
    let o = OracleMetrics {
        hr_mse: 1.0 / 3.0,
        hr_psnr: psnr(1.0 / 3.0),
        hr_ssim: 0.5,
    };
    let report = MetricsReport {
        per_volume: BTreeMap::from([("a".to_string(), c)]),
        oracle: Some(BTreeMap::from([("a".to_string(), o)])),
        bicubic_per_volume: BTreeMap::from([("a".to_string(), c)]),
        bicubic_oracle: None,
        settings: ReportSettings {
            training_ssim: SsimParams::default(),
            reporting_ssim: SsimParams::standard(),
            tile_size: 64,
            overlap: 8,
        },
        config_digest: "abc".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.json");
    report.write(&path).unwrap();
    assert_eq!(MetricsReport::read(&path).unwrap(), report);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(!text.contains("bicubic_oracle"));
}

proptest! {
    #[test]
    fn psnr_decreases_with_mse(a in 1e-12f64..10.0, b in 1e-12f64..10.0) {
        prop_assume!(a < b);
        prop_assert!(psnr(a) >= psnr(b));
        if psnr(a) < PSNR_CAP_DB {
            prop_assert!(psnr(a) > psnr(b));
        }
    }

    #[test]
    fn nn_upsampled_slices_are_perfectly_consistent(h in 1usize..10, w in 1usize..10, seed in 0u64..1000) {
        let x = random_patch(h, w, seed);
        prop_assert_eq!(consistency_metrics(&x, &nn_upsample(&x, 8).unwrap()).unwrap().consistency_mse, 0.0);
    }
}
