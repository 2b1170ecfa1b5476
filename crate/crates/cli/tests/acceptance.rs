//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mmsr_core::data::{extract_patches, make_synthetic_dataset, DatasetManifest, PatchSet, PatchSizes, SyntheticConfig};
use mmsr_core::infer::{plan_tiles, super_resolve_slice, weight_map, NearestUpsampler};
use mmsr_core::loss::{
    avg_downsample, downsample_loss, mmsr_total, mmsr_total_grad, mse, nn_upsample, patch_stats, ssim_loss,
    ssim_loss_grad, upsample_loss, LossBreakdown, LossWeights, SsimParams,
};
use mmsr_core::nn::{
    build_down_generator, build_sr_generator, build_unit_pair, Domain, DownGeneratorSpec, ModelBundle, ModelSpecs,
    SrGeneratorSpec,
};
use mmsr_core::pipeline::{evaluate_dataset, super_resolve_dataset};
use mmsr_core::tensor::Tensor;
use mmsr_core::train::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use mmsr_core::ImagePatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:.1?}, limit {limit:?}"))
}

fn random_patch(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImagePatch {
    ImagePatch::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0))
}

fn patch(rows: &[&[f64]]) -> ImagePatch {
    ImagePatch::new(rows.len(), rows[0].len(), rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
}

fn close(got: f64, want: f64, what: &str) -> Result<(), String> {
    ensure((got - want).abs() < 1e-6, format!("{what}: got {got}, want {want}"))
}

fn synthetic_patches(cases: usize, per_case: usize, seed: u64) -> PatchSet {
    let cfg = SyntheticConfig {
        seed,
        cases_per_domain: cases,
        micro_dims: [256, 256, 4],
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_synthetic_dataset(&cfg).unwrap().write(dir.path(), per_case, seed).unwrap();
    extract_patches(&manifest, PatchSizes::default(), 0).unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelSpecs::compact(8, 2),
        seed,
        ..Default::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn loss_kernel_exactness() -> Check {
    let start = Instant::now();
    let p = SsimParams::default();
    let half = ImagePatch::filled(3, 3, 0.5);
    let s = patch_stats(&half, &half).unwrap();
    for (got, want) in [(s.mu_x, 0.5), (s.mu_y, 0.5), (s.var_x, 0.0), (s.var_y, 0.0), (s.cov_xy, 0.0)] {
        close(got, want, "constant stats")?;
    }
    let s = patch_stats(&patch(&[&[0.0, 1.0], &[0.0, 1.0]]), &patch(&[&[0.0, 0.0], &[1.0, 1.0]])).unwrap();
    for (got, want) in [(s.mu_x, 0.5), (s.mu_y, 0.5), (s.var_x, 0.25), (s.var_y, 0.25), (s.cov_xy, 0.0)] {
        close(got, want, "hand stats")?;
    }
    let w = random_patch(5, 5, &mut ChaCha8Rng::seed_from_u64(1));
    let s = patch_stats(&w, &w).unwrap();
    close(s.var_x, s.cov_xy, "x = y covariance")?;

    let zero_mean = patch(&[&[0.5, -0.5], &[-0.25, 0.25]]);
    close(ssim_loss(&zero_mean, &zero_mean, &p).unwrap(), 0.0, "zero-mean identity")?;
    let ones = ImagePatch::filled(8, 8, 1.0);
    let identity = ssim_loss(&ones, &ones, &p).unwrap();
    close(identity, 1.0 - 1.02 / 2.02, "all-ones identity")?;
    ensure((identity - 0.49505).abs() < 1e-5, format!("all-ones identity {identity}"))?;
    let a = random_patch(6, 6, &mut ChaCha8Rng::seed_from_u64(2));
    let b = random_patch(6, 6, &mut ChaCha8Rng::seed_from_u64(3));
    close(ssim_loss(&a, &b, &p).unwrap(), ssim_loss(&b, &a, &p).unwrap(), "symmetry")?;

    ensure(nn_upsample(&patch(&[&[0.3]]), 8).unwrap() == ImagePatch::filled(8, 8, 0.3), "1x1 replication")?;
    let up = nn_upsample(&patch(&[&[1.0, 2.0], &[3.0, 4.0]]), 2).unwrap();
    ensure(
        up == patch(&[&[1.0, 1.0, 2.0, 2.0], &[1.0, 1.0, 2.0, 2.0], &[3.0, 3.0, 4.0, 4.0], &[3.0, 3.0, 4.0, 4.0]]),
        "2x2 replication",
    )?;
    ensure(nn_upsample(&a, 1).unwrap() == a, "factor 1")?;
    close(avg_downsample(&ImagePatch::filled(8, 8, 0.7), 8).unwrap().get(0, 0), 0.7, "constant block")?;
    close(avg_downsample(&patch(&[&[0.0, 2.0], &[4.0, 6.0]]), 2).unwrap().get(0, 0), 3.0, "block mean")?;

    let zeros = ImagePatch::filled(2, 2, 0.0);
    close(mse(&a, &a).unwrap(), 0.0, "mse a=a")?;
    close(mse(&zeros, &ImagePatch::filled(2, 2, 1.0)).unwrap(), 1.0, "mse 0 vs 1")?;
    close(mse(&zeros, &patch(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap(), 7.5, "mse hand")?;

    close(upsample_loss(&ImagePatch::filled(16, 16, 0.4), &ImagePatch::filled(2, 2, 0.4)).unwrap(), 0.0, "U const")?;
    close(upsample_loss(&nn_upsample(&a, 8).unwrap(), &a).unwrap(), 0.0, "U matched")?;
    close(upsample_loss(&ImagePatch::filled(8, 8, 1.0), &ImagePatch::filled(1, 1, 0.0)).unwrap(), 1.0, "U 1 vs 0")?;
    close(downsample_loss(&a, &nn_upsample(&a, 8).unwrap()).unwrap(), 0.0, "D matched")?;
    close(downsample_loss(&ImagePatch::filled(1, 1, 0.0), &ImagePatch::filled(8, 8, 1.0)).unwrap(), 1.0, "D 0 vs 1")?;
    let textured = ImagePatch::from_fn(8, 8, |r, c| if (r + c) % 2 == 0 { 1.5 } else { 0.5 });
    close(downsample_loss(&ImagePatch::filled(1, 1, 1.0), &textured).unwrap(), 0.0, "D pooled")?;

    let y_lr = patch(&[&[0.75, -0.75], &[0.1, -0.1]]);
    let matched = mmsr_total(
        0.7,
        &zero_mean,
        &nn_upsample(&zero_mean, 8).unwrap(),
        &nn_upsample(&y_lr, 8).unwrap(),
        &y_lr,
        &LossWeights::default(),
        &p,
    )
    .unwrap();
    close(matched.total, 0.7, "matched total")?;
    close(
        LossBreakdown::from_terms(1.0, 0.1, 0.2, 0.3, 0.4, &LossWeights::default()).total,
        2.1,
        "hand total",
    )?;
    let zero = LossWeights::default().without_mmsr();
    let lr2 = patch(&[&[0.2]]);
    let t = mmsr_total(0.3, &lr2, &textured, &ImagePatch::filled(8, 8, 0.1), &lr2, &zero, &p).unwrap();
    close(t.total, 0.3, "zero lambdas")?;
    within(Duration::from_secs(1), start)?;
    Ok(format!("all examples within 1e-6, identity value {identity:.6}, {:.0?}", start.elapsed()))
}

const STEP: f64 = 1e-3;

fn numeric_grad(p: &ImagePatch, f: impl Fn(&ImagePatch) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.len())
        .map(|i| {
            let v = p.data()[i];
            q.data_mut()[i] = v + STEP;
            let up = f(&q);
            q.data_mut()[i] = v - STEP;
            let down = f(&q);
            q.data_mut()[i] = v;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn rel_err(analytic: &ImagePatch, numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.data().iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.data().iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-12)
}

fn gradient_check() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let p = SsimParams::default();
    let only = |l3: f64, l4: f64| LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: l3,
        lambda4: l4,
        ..LossWeights::default()
    };
    let mut worst = 0.0f64;
    let mut track = |name: &str, e: f64| -> Result<(), String> {
        worst = worst.max(e);
        ensure(e < 1e-4, format!("{name}: relative error {e:.3e}"))
    };
    for trial in 0..20 {
        let size = if trial % 2 == 0 { 8 } else { 64 };
        let a = random_patch(size, size, &mut rng);
        let b = random_patch(size, size, &mut rng);
        let (_, ga, gb) = ssim_loss_grad(&a, &b, &p).unwrap();
        track("ssim x", rel_err(&ga, &numeric_grad(&a, |q| ssim_loss(q, &b, &p).unwrap())))?;
        track("ssim y", rel_err(&gb, &numeric_grad(&b, |q| ssim_loss(&a, q, &p).unwrap())))?;

        let x = random_patch(8, 8, &mut rng);
        let x_sr = random_patch(64, 64, &mut rng);
        let y = random_patch(64, 64, &mut rng);
        let y_lr = random_patch(8, 8, &mut rng);
        let gd = mmsr_total_grad(0.0, &x, &x_sr, &y, &y_lr, &only(1.0, 0.0), &p).unwrap();
        track("L_D x", rel_err(&gd.x, &numeric_grad(&x, |q| downsample_loss(q, &x_sr).unwrap())))?;
        track("L_D x_sr", rel_err(&gd.x_sr, &numeric_grad(&x_sr, |q| downsample_loss(&x, q).unwrap())))?;
        let gu = mmsr_total_grad(0.0, &x, &x_sr, &y, &y_lr, &only(0.0, 1.0), &p).unwrap();
        track("L_U y", rel_err(&gu.y, &numeric_grad(&y, |q| upsample_loss(q, &y_lr).unwrap())))?;
        track("L_U y_lr", rel_err(&gu.y_lr, &numeric_grad(&y_lr, |q| upsample_loss(&y, q).unwrap())))?;

        let w = LossWeights::default();
        let g = mmsr_total_grad(0.0, &x, &x_sr, &y, &y_lr, &w, &p).unwrap();
        let total = |x: &ImagePatch, x_sr: &ImagePatch, y: &ImagePatch, y_lr: &ImagePatch| {
            mmsr_total(0.0, x, x_sr, y, y_lr, &w, &p).unwrap().total
        };
        track("total x", rel_err(&g.x, &numeric_grad(&x, |q| total(q, &x_sr, &y, &y_lr))))?;
        track("total x_sr", rel_err(&g.x_sr, &numeric_grad(&x_sr, |q| total(&x, q, &y, &y_lr))))?;
        track("total y", rel_err(&g.y, &numeric_grad(&y, |q| total(&x, &x_sr, q, &y_lr))))?;
        track("total y_lr", rel_err(&g.y_lr, &numeric_grad(&y_lr, |q| total(&x, &x_sr, &y, q))))?;
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!("20 trials, worst relative error {worst:.2e}, {:.1?}", start.elapsed()))
}

fn rescale_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (h, w) = (1 + i % 7, 1 + (i * 3) % 11);
        let p = random_patch(h, w, &mut rng);
        let back = avg_downsample(&nn_upsample(&p, 8).unwrap(), 8).unwrap();
        for (a, b) in back.data().iter().zip(p.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-6, format!("max deviation {worst:e}"))?;
    Ok(format!("100 patches, max deviation {worst:e}"))
}

fn wavy(h: usize, w: usize) -> ImagePatch {
    ImagePatch::from_fn(h, w, |r, c| (r as f64 * 0.7 + c as f64 * 0.3).sin() * 0.9)
}

fn shape_law() -> Check {
    let start = Instant::now();
    let sr = SrGeneratorSpec {
        base_width: 8,
        ..Default::default()
    };
    let down = DownGeneratorSpec {
        base_width: 8,
        ..Default::default()
    };
    let g1 = build_sr_generator(sr, 1).unwrap();
    let g2 = build_down_generator(down, 2).unwrap();
    let got = g1.apply(&wavy(32, 32)).unwrap().dims();
    ensure(got == (256, 256), format!("G1 32x32 -> {got:?}"))?;
    for h in [8, 16, 32, 64] {
        for w in [8, 16, 32, 64] {
            let up = g1.apply(&wavy(h, w)).unwrap();
            ensure(up.dims() == (8 * h, 8 * w), format!("G1 {h}x{w} -> {:?}", up.dims()))?;
            let back = g2.apply(&up).unwrap();
            ensure(back.dims() == (h, w), format!("G2 {:?} -> {:?}", up.dims(), back.dims()))?;
        }
    }
    let unit = build_unit_pair(sr, down, 3).unwrap();
    for n in [8, 16, 32] {
        let zx = unit.encode(Domain::Low, &Tensor::from_patch(&wavy(n, n))).unwrap();
        let zy = unit.encode(Domain::High, &Tensor::from_patch(&wavy(8 * n, 8 * n))).unwrap();
        ensure(zx.shape() == zy.shape(), format!("latents {:?} vs {:?}", zx.shape(), zy.shape()))?;
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("G1/G2 over 16 sizes, UNIT latents equal, {:.1?}", start.elapsed()))
}

fn optimization_sanity() -> Check {
    let mut data = synthetic_patches(1, 1, 21);
    data.clinical.truncate(1);
    data.micro.truncate(1);
    let x = data.clinical[0].patch.clone();
    let config = TrainConfig {
        epochs: 1000,
        lr: 2e-3,
        weights: LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 1.0,
            lambda4: 0.0,
            w_adv: 0.0,
            w_cyc: 0.0,
            w_idt: 0.0,
        },
        ..tiny_config(21)
    };
    let mut t = Trainer::new(config, data).map_err(|e| e.to_string())?;
    let before = downsample_loss(&x, &t.bundle.super_resolver().unwrap().super_resolve(&x).unwrap()).unwrap();
    t.run(Some(500), |_| Ok(())).map_err(|e| e.to_string())?;
    let after = downsample_loss(&x, &t.bundle.super_resolver().unwrap().super_resolve(&x).unwrap()).unwrap();
    ensure(t.state.iteration == 500, format!("ran {} steps", t.state.iteration))?;
    ensure(after < 1e-3, format!("consistency MSE {before:.4e} -> {after:.4e}"))?;
    Ok(format!("consistency MSE {before:.4e} -> {after:.4e} after 500 steps"))
}

fn training_descent() -> Check {
    let start = Instant::now();
    let mut t = Trainer::new(tiny_config(5), synthetic_patches(2, 32, 11)).map_err(|e| e.to_string())?;
    ensure(t.data().clinical.len() == 64 && t.data().micro.len() == 64, "expected 64 patches per domain")?;
    t.run(Some(200), |_| Ok(())).map_err(|e| e.to_string())?;
    let logs = &t.state.loss_history;
    ensure(logs.len() == 200, format!("{} iterations", logs.len()))?;
    ensure(
        logs.iter().all(|l| l.breakdown.is_finite() && l.d_x_loss.is_finite() && l.d_y_loss.is_finite()),
        "non-finite loss",
    )?;
    let d: Vec<f64> = logs.iter().map(|l| l.breakdown.d_term).collect();
    let (first, last) = (mean(&d[..10]), mean(&d[190..]));
    let ratio = last / first;
    ensure(ratio < 0.5, format!("d_term {first:.4} -> {last:.4}, ratio {ratio:.3}"))?;
    within(Duration::from_secs(600), start)?;
    Ok(format!("d_term {first:.4} -> {last:.4} (ratio {ratio:.3}), {:.0?}", start.elapsed()))
}

fn stitcher_equivalence() -> Check {
    let slice = ImagePatch::from_fn(50, 70, |r, c| (((r * 131 + c * 71) % 251) as f32 / 125.0 - 1.0) as f64);
    let whole = nn_upsample(&slice, 8).unwrap();
    let mut worst = 0.0f64;
    for (tile, overlap) in [(16, 0), (16, 4), (24, 8), (32, 31), (64, 8), (128, 8)] {
        let plan = plan_tiles(slice.dims(), tile, overlap).unwrap();
        let tiled = super_resolve_slice(&NearestUpsampler, &slice, &plan).unwrap();
        ensure(tiled == whole, format!("tile {tile} overlap {overlap} differs"))?;
        let m = weight_map(&plan);
        worst = m.data().iter().fold(worst, |acc, w| acc.max((w - 1.0).abs()));
    }
    ensure(worst <= 1e-6, format!("weight map deviates by {worst:e}"))?;
    Ok(format!("6 tilings exact, weight map max deviation {worst:e}"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmsr")).args(args).output().map_err(|e| e.to_string())?;
    ensure(
        out.status.code() == Some(0),
        format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)),
    )
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.example.json");
    let c = config.to_str().unwrap();
    let p = |name: &str| r.join(name).to_str().unwrap().to_string();
    let (data, patches, run, sr, eval) = (p("data"), p("patches"), p("run"), p("sr"), p("eval"));
    let ckpt = format!("{run}/model.ckpt");
    run_cli(&["make-synthetic", "--config", c, "--out", &data])?;
    run_cli(&["extract-patches", "--config", c, "--dataset", &data, "--out", &patches])?;
    run_cli(&["train", "--config", c, "--dataset", &data, "--patches", &patches, "--out", &run])?;
    run_cli(&["super-resolve", "--config", c, "--dataset", &data, "--checkpoint", &ckpt, "--out", &sr])?;
    run_cli(&["evaluate", "--config", c, "--sr", &sr, "--out", &eval])?;

    let report = mmsr_core::eval::MetricsReport::read(&r.join("eval/metrics.json")).map_err(|e| e.to_string())?;
    let trained = report.mean_consistency_mse();
    ensure(trained.is_finite(), format!("consistency_mse {trained}"))?;

    let (_, state) = load_checkpoint(Path::new(&ckpt)).map_err(|e| e.to_string())?;
    ensure(state.epoch == 2, format!("trained {} epochs", state.epoch))?;
    let cfg = &state.config;
    let untrained = ModelBundle::init(cfg.variant, cfg.model, cfg.seed).map_err(|e| e.to_string())?;
    let manifest = DatasetManifest::load(&r.join("data/dataset.json")).map_err(|e| e.to_string())?;
    let base_dir = r.join("sr-untrained");
    super_resolve_dataset(&untrained, cfg, &manifest, report.settings.tile_size, report.settings.overlap, &base_dir)
        .map_err(|e| e.to_string())?;
    let baseline = evaluate_dataset(&base_dir).map_err(|e| e.to_string())?.mean_consistency_mse();
    ensure(trained < baseline, format!("trained {trained:.4e} vs untrained {baseline:.4e}"))?;
    within(Duration::from_secs(1200), start)?;
    Ok(format!(
        "consistency_mse trained {trained:.4e} < untrained {baseline:.4e}, {:.0?}",
        start.elapsed()
    ))
}

fn checkpoint_fidelity() -> Check {
    let data = synthetic_patches(2, 4, 3);
    let config = TrainConfig {
        pool_size: 2,
        ..tiny_config(9)
    };
    let mut straight = Trainer::new(config.clone(), data.clone()).map_err(|e| e.to_string())?;
    straight.run(Some(11), |_| Ok(())).map_err(|e| e.to_string())?;

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let mut t = Trainer::new(config, data.clone()).map_err(|e| e.to_string())?;
    t.run(Some(5), |_| Ok(())).map_err(|e| e.to_string())?;
    save_checkpoint(&t.bundle, &t.state, &a).map_err(|e| e.to_string())?;
    let (bundle, state) = load_checkpoint(&a).map_err(|e| e.to_string())?;
    ensure(bundle == t.bundle, "parameters changed in round trip")?;
    ensure(state == t.state, "training state changed in round trip")?;
    save_checkpoint(&bundle, &state, &b).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(), "re-saved checkpoint differs")?;
    drop(t);

    let mut resumed = Trainer::resume(bundle, state, data).map_err(|e| e.to_string())?;
    resumed.run(Some(6), |_| Ok(())).map_err(|e| e.to_string())?;
    ensure(
        resumed.state.loss_history == straight.state.loss_history,
        "resumed trajectory diverged",
    )?;
    ensure(resumed.bundle == straight.bundle, "resumed parameters diverged")?;
    Ok("bit-exact round trip, 6 resumed steps identical".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("loss-kernel exactness", loss_kernel_exactness),
        ("gradient check", gradient_check),
        ("rescale identity", rescale_identity),
        ("shape law", shape_law),
        ("optimization sanity", optimization_sanity),
        ("training descent", training_descent),
        ("stitcher equivalence", stitcher_equivalence),
        ("end-to-end pipeline", end_to_end),
        ("checkpoint fidelity", checkpoint_fidelity),
    ];
    println!();
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL {} {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
