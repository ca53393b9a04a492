use std::fs;

use particle_augment::filter::FilterConfig;
use particle_augment::nn::TrainableModel;
use particle_augment::pipeline::synthetic::{l1_distance, linf_distance};
use particle_augment::pipeline::{
    filter_step, initial_checkpoint, load_datasets, read_trajectory, replay, run_plain, run_synthetic, run_training,
    Checkpoint, DistanceOracle, FilterStepReport, NullObserver, OutputObserver, PipelineConfig, RunObserver,
    SkipReason, CHECKPOINT_FILE, TRAJECTORY_FILE,
};
use particle_augment::Result;

fn small_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        ..Default::default()
    };
    cfg.data.samples = 200;
    cfg.data.val_samples = 0;
    cfg.data.classes = 4;
    cfg.data.image_size = 9;
    cfg.model.hidden = 12;
    cfg.filter.particles = 6;
    cfg.pipeline.epochs = 5;
    cfg.pipeline.vp_size = 40;
    cfg.optimizer.batch_size = 32;
    cfg
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[derive(Default)]
struct Recorder {
    checkpoints: Vec<Checkpoint>,
    reports: Vec<FilterStepReport>,
}

impl RunObserver for Recorder {
    fn filter_step(&mut self, report: &FilterStepReport) -> Result<()> {
        self.reports.push(report.clone());
        Ok(())
    }

    fn checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        self.checkpoints.push(checkpoint.clone());
        Ok(())
    }
}

#[test]
fn filter_step_leaves_reference_untouched() {
    let cfg = small_config(1);
    let (train, _) = load_datasets(&cfg).unwrap();
    let start = initial_checkpoint(&cfg, &train).unwrap();
    let snapshot = start.trainer.clone();
    let report = filter_step(&start.particles, &start.trainer, &train, &cfg, 2).unwrap();
    assert_eq!(
        bits(start.trainer.model.parameters()),
        bits(snapshot.model.parameters())
    );
    assert_eq!(start.trainer, snapshot);
    assert_eq!(report.evaluation_passes, 7);
    assert_eq!(report.measurement.sample_count, 40);
    assert_eq!(report.measurement.d.len(), 6);
    assert!(report.measurement.d_0.is_finite());
    assert!((report.particles.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn zero_prediction_epochs_are_skipped_by_the_guard() {
    let mut cfg = small_config(2);
    let (train, _) = load_datasets(&cfg).unwrap();
    let start = initial_checkpoint(&cfg, &train).unwrap();
    cfg.pipeline.prediction_epochs = 0;
    let report = filter_step(&start.particles, &start.trainer, &train, &cfg, 2).unwrap();
    assert_eq!(report.skipped, Some(SkipReason::SmallCleanDifference));
    assert_eq!(report.w_after, start.particles.weights());
    assert!(report.rows().iter().all(|r| r.delta.is_nan()));
}

#[test]
fn weights_follow_the_logged_measurements() {
    let cfg = small_config(3);
    let (train, _) = load_datasets(&cfg).unwrap();
    let mut rec = Recorder::default();
    run_training(initial_checkpoint(&cfg, &train).unwrap(), &train, None, &mut rec).unwrap();
    assert_eq!(rec.reports.len(), 4);
    for r in &rec.reports {
        if r.skipped.is_some() {
            assert_eq!(r.w_after, r.predicted.weights());
            continue;
        }
        let delta = r.measurement.deltas();
        let raw: Vec<f64> = r
            .predicted
            .weights()
            .iter()
            .zip(&delta)
            .map(|(w, d)| ((d - 1.0).tanh() + 1.0).powf(cfg.filter.eta) * w)
            .collect();
        let total: f64 = raw.iter().sum();
        for (got, want) in r.w_after.iter().zip(&raw) {
            assert!((got - want / total).abs() < 1e-12);
        }
    }
}

#[test]
fn same_seed_gives_identical_logs() {
    let cfg = small_config(4);
    let (train, _) = load_datasets(&cfg).unwrap();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut obs = OutputObserver::new(dir.path(), &cfg, 15, false).unwrap();
        let out = run_training(initial_checkpoint(&cfg, &train).unwrap(), &train, None, &mut obs).unwrap();
        drop(obs);
        (fs::read_to_string(dir.path().join(TRAJECTORY_FILE)).unwrap(), out)
    };
    let (log_a, a) = run();
    let (log_b, b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(bits(a.trainer.model.parameters()), bits(b.trainer.model.parameters()));
}

#[test]
fn thread_count_does_not_change_results() {
    let mut cfg = small_config(5);
    let (train, _) = load_datasets(&cfg).unwrap();
    let one = run_training(
        initial_checkpoint(&cfg, &train).unwrap(),
        &train,
        None,
        &mut NullObserver,
    )
    .unwrap();
    cfg.threads = 4;
    let four = run_training(
        initial_checkpoint(&cfg, &train).unwrap(),
        &train,
        None,
        &mut NullObserver,
    )
    .unwrap();
    assert_eq!(
        bits(one.trainer.model.parameters()),
        bits(four.trainer.model.parameters())
    );
    assert_eq!(one.particles, four.particles);
}

#[test]
fn zero_baseline_policy_equals_plain_training() {
    let mut cfg = small_config(6);
    cfg.pipeline.baseline = true;
    let (train, _) = load_datasets(&cfg).unwrap();
    let out = run_training(
        initial_checkpoint(&cfg, &train).unwrap(),
        &train,
        None,
        &mut NullObserver,
    )
    .unwrap();
    assert!(out.reports.is_empty());
    let plain = run_plain(&cfg, &train).unwrap();
    assert_eq!(bits(out.trainer.model.parameters()), bits(plain.model.parameters()));
}

#[test]
fn resuming_from_a_checkpoint_is_exact() {
    let cfg = small_config(7);
    let (train, _) = load_datasets(&cfg).unwrap();
    let mut rec = Recorder::default();
    let full = run_training(initial_checkpoint(&cfg, &train).unwrap(), &train, None, &mut rec).unwrap();
    let mid = rec
        .checkpoints
        .iter()
        .find(|c| c.completed_epochs == 2)
        .unwrap()
        .clone();
    let reloaded = Checkpoint::decode(&mid.encode()).unwrap();
    let resumed = run_training(reloaded, &train, None, &mut NullObserver).unwrap();
    assert_eq!(
        bits(full.trainer.model.parameters()),
        bits(resumed.trainer.model.parameters())
    );
    assert_eq!(full.particles, resumed.particles);
    assert_eq!(resumed.reports, full.reports[2..]);
}

#[test]
fn default_run_logs_nine_replayable_steps() {
    let mut cfg = PipelineConfig {
        seed: 8,
        ..Default::default()
    };
    cfg.pipeline.vp_size = 128;
    cfg.data.val_samples = 0;
    let (train, _) = load_datasets(&cfg).unwrap();
    assert_eq!(train.len(), 2000);
    let dir = tempfile::tempdir().unwrap();
    let mut obs = OutputObserver::new(dir.path(), &cfg, 15, false).unwrap();
    let out = run_training(initial_checkpoint(&cfg, &train).unwrap(), &train, None, &mut obs).unwrap();
    drop(obs);
    assert_eq!(
        out.reports.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        (2..=10).collect::<Vec<_>>()
    );

    let traj = read_trajectory(&dir.path().join(TRAJECTORY_FILE)).unwrap();
    assert_eq!(traj.rows.len(), 9 * 50);
    let echoed = traj.config().unwrap();
    assert_eq!(echoed, cfg);
    assert_eq!(
        (echoed.filter.particles, echoed.filter.sigma, echoed.filter.eta),
        (50, 0.05, 1.0)
    );
    assert_eq!(
        (echoed.pipeline.prediction_epochs, echoed.pipeline.filter_interval),
        (1, 1)
    );
    assert_eq!(echoed.pipeline.warmup_epochs, 1);
    let summary = replay(&traj, cfg.filter.eta, 1e-9).unwrap();
    assert_eq!(summary.steps, 9);

    let ckpt = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.completed_epochs, 10);
    assert_eq!(ckpt.particles, out.particles);
}

fn synthetic_filter(seed: u64) -> FilterConfig {
    FilterConfig {
        rng_seed: seed,
        ..FilterConfig::default()
    }
}

#[test]
fn synthetic_log_replays() {
    let oracle = DistanceOracle {
        target: vec![0.5; 15],
        gamma: 0.5,
    };
    let run = run_synthetic(&synthetic_filter(1), &oracle, 60).unwrap();
    let traj = particle_augment::pipeline::Trajectory {
        config_text: String::new(),
        rows: run.steps.iter().flat_map(|s| s.rows.clone()).collect(),
    };
    let s = replay(&traj, 1.0, 1e-9).unwrap();
    assert_eq!(s.steps, 60);
}

#[test]
fn synthetic_distance_trends_down_across_windows() {
    let oracle = DistanceOracle {
        target: vec![0.5; 15],
        gamma: 0.5,
    };
    for seed in 0..3 {
        let run = run_synthetic(&synthetic_filter(seed), &oracle, 200).unwrap();
        let d: Vec<f64> = run
            .steps
            .iter()
            .map(|s| l1_distance(&s.expected_state, &oracle.target))
            .collect();
        let windows: Vec<f64> = d.chunks(20).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        let falling = windows.windows(2).filter(|p| p[1] < p[0]).count();
        assert!(falling * 2 > windows.len() - 1, "seed {seed}: {windows:?}");
        assert!(windows[9] < windows[0], "seed {seed}: {windows:?}");
    }
}

// A target on the boundary of the unit box is never approached: clipping at 0
// turns the zero-mean process noise into a positive drift that the weight
// update cannot outpace.
#[test]
#[ignore = "does not hold: expected state drifts away from the zero vector under clipped noise"]
fn synthetic_zero_target_linf_decreases() {
    let oracle = DistanceOracle {
        target: vec![0.0; 15],
        gamma: 0.5,
    };
    let run = run_synthetic(&synthetic_filter(0), &oracle, 200).unwrap();
    let first = linf_distance(&run.initial_expected_state, &oracle.target);
    let last = linf_distance(run.final_expected_state(), &oracle.target);
    assert!(last < first, "{first} -> {last}");
}
