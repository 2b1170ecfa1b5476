mod common;

use common::{mean, patches_64, patches_8, tiny_config};
use mmsr_core::loss::LossWeights;
use mmsr_core::nn::{ModelBundle, Variant};
use mmsr_core::train::{load_checkpoint, save_checkpoint, IterationLog, TrainConfig, Trainer};
use mmsr_core::Error;

fn run(config: TrainConfig, iterations: u64) -> Vec<IterationLog> {
    let mut t = Trainer::new(config, patches_8().clone()).unwrap();
    t.run(Some(iterations), |_| Ok(())).unwrap();
    t.state.loss_history
}

fn checksums(b: &ModelBundle) -> Vec<(String, String)> {
    b.groups().into_iter().map(|(g, p)| (g.to_string(), p.checksum())).collect()
}

#[test]
fn cyclegan_smoke_losses_are_finite_and_consistent() {
    let config = tiny_config(1);
    let w = config.weights;
    let logs = run(config, 10);
    assert_eq!(logs.len(), 10);
    for (i, l) in logs.iter().enumerate() {
        assert_eq!(l.iteration, i as u64);
        assert!(l.breakdown.is_finite(), "{l:?}");
        assert!(l.d_x_loss.is_finite() && l.d_y_loss.is_finite());
        assert!(l.breakdown.is_consistent(&w, 1e-6));
        assert!(l.parts.adversarial > 0.0 && l.parts.cycle > 0.0);
    }
}

#[test]
fn unit_smoke_losses_are_finite() {
    let config = TrainConfig {
        variant: Variant::SrUnit,
        ..tiny_config(2)
    };
    let logs = run(config, 10);
    assert_eq!(logs.len(), 10);
    for l in &logs {
        assert!(l.breakdown.is_finite(), "{l:?}");
        assert!(l.parts.reconstruction > 0.0 && l.parts.latent.is_finite());
    }
}

#[test]
fn zero_lambdas_reduce_total_to_base_objective() {
    for variant in [Variant::SrCycleGan, Variant::SrUnit] {
        let mut config = tiny_config(4);
        config.variant = variant;
        config.weights = LossWeights::default().without_mmsr();
        for l in run(config, 3) {
            assert_eq!(l.breakdown.total, l.breakdown.orig);
        }
    }
}

#[test]
fn iteration_counter_tracks_epochs() {
    let mut t = Trainer::new(tiny_config(6), patches_8().clone()).unwrap();
    let ipe = t.state.iterations_per_epoch;
    assert_eq!(ipe, 8);
    t.run(Some(ipe + 2), |_| Ok(())).unwrap();
    assert_eq!(t.state.epoch, 1);
    assert_eq!(t.state.iteration, t.state.epoch as u64 * ipe + t.state.within_epoch());
    assert_eq!(t.state.within_epoch(), 2);
    assert_eq!(t.state.loss_history.len() as u64, t.state.iteration);
    assert_eq!(t.state.loss_history[ipe as usize].epoch, 1);
}

#[test]
fn half_steps_touch_only_their_own_networks() {
    let mut t = Trainer::new(tiny_config(7), patches_8().clone()).unwrap();
    for _ in 0..2 {
        let before = checksums(&t.bundle);
        let mut mid = Vec::new();
        t.step_observed(|b| mid = checksums(b)).unwrap();
        let after = checksums(&t.bundle);
        for i in 0..before.len() {
            let disc = before[i].0.starts_with('d');
            if disc {
                assert_eq!(before[i], mid[i], "generator half-step moved {}", before[i].0);
                assert_ne!(mid[i], after[i]);
            } else {
                assert_ne!(before[i], mid[i]);
                assert_eq!(mid[i], after[i], "discriminator half-step moved {}", mid[i].0);
            }
        }
    }
}

#[test]
fn same_seed_gives_identical_history() {
    for variant in [Variant::SrCycleGan, Variant::SrUnit] {
        let mut config = tiny_config(8);
        config.variant = variant;
        let a = run(config.clone(), 4);
        let b = run(config, 4);
        assert_eq!(a, b);
    }
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    for variant in [Variant::SrCycleGan, Variant::SrUnit] {
        let mut config = tiny_config(9);
        config.variant = variant;
        config.pool_size = 2;
        let straight = run(config.clone(), 11);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut t = Trainer::new(config, patches_8().clone()).unwrap();
        t.run(Some(5), |_| Ok(())).unwrap();
        save_checkpoint(&t.bundle, &t.state, &path).unwrap();
        drop(t);

        let (bundle, state) = load_checkpoint(&path).unwrap();
        assert_eq!(state.iteration, 5);
        let mut t = Trainer::resume(bundle, state, patches_8().clone()).unwrap();
        t.run(Some(6), |_| Ok(())).unwrap();
        assert_eq!(t.state.loss_history, straight, "{variant}");
    }
}

#[test]
fn non_finite_parameters_abort_with_the_offending_term() {
    let mut t = Trainer::new(tiny_config(10), patches_8().clone()).unwrap();
    t.step().unwrap();
    for (_, p) in t.bundle.g1.iter_mut() {
        p.data_mut().fill(f32::NAN);
    }
    match t.step() {
        Err(Error::NonFinite { term, iteration }) => {
            assert_eq!(iteration, 1);
            assert_eq!(term, "x_sr");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
    assert_eq!(t.state.loss_history.len(), 1);
}

#[test]
fn finished_training_refuses_more_steps() {
    let config = TrainConfig {
        epochs: 1,
        ..tiny_config(12)
    };
    let mut t = Trainer::new(config, patches_8().clone()).unwrap();
    t.run(None, |_| Ok(())).unwrap();
    assert_eq!(t.state.iteration, 8);
    assert!(t.state.is_finished());
    assert!(matches!(t.step(), Err(Error::Param(_))));
}

#[test]
fn unit_reconstruction_decreases_over_200_iterations() {
    let config = TrainConfig {
        variant: Variant::SrUnit,
        ..tiny_config(5)
    };
    let mut t = Trainer::new(config, patches_64().clone()).unwrap();
    t.run(Some(200), |_| Ok(())).unwrap();
    let rec: Vec<f64> = t.state.loss_history.iter().map(|l| l.parts.reconstruction).collect();
    assert!(t.state.loss_history.iter().all(|l| l.breakdown.is_finite()));
    let (first, last) = (mean(&rec[..10]), mean(&rec[190..]));
    assert!(last < first, "reconstruction {first} -> {last}");
}
