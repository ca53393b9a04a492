//! End-to-end training with online policy search.
//!
//! Every epoch trains the reference model on the full training set, each
//! sample augmented by a policy drawn from the current particle weights.
//! Filter steps run at the epoch boundaries listed by
//! [`PipelineConfig::filter_epochs`]: the particles are predicted, a clone of
//! the reference model is trained on a stratified subset with the predicted
//! particles, and both models are compared on a second subset to weight the
//! particles.

pub mod checkpoint;
pub mod config;
pub mod synthetic;
pub mod trajectory;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::augment::PolicyApplicator;
use crate::data::{self, stratified_sample_indices, stratified_split_indices, toy, Dataset};
use crate::error::{Error, Result};
use crate::filter::{initialize, ParticleSet};
use crate::imaging::Image;
use crate::nn::{
    accuracy, mean_loss, steps_per_epoch, BuiltinClassifier, ClassifierSpec, CosineSchedule, TrainableModel, Trainer,
};
use crate::rng::{Purpose, Streams};

pub use checkpoint::Checkpoint;
pub use config::{DataKind, PipelineConfig, Resplit};
pub use synthetic::{run_synthetic, DistanceOracle, SyntheticRun};
pub use trajectory::{read_trajectory, replay, Trajectory, TrajectoryRow, TrajectoryWriter};

/// Loss differences between the reference and the updated model.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// Per particle: summed reference loss minus summed updated loss on the
    /// measurement subset augmented by that particle.
    pub d: Vec<f64>,
    /// The same difference on the unaugmented measurement subset.
    pub d_0: f64,
    pub sample_count: usize,
}

impl Measurement {
    pub fn deltas(&self) -> Vec<f64> {
        self.d.iter().map(|d| d / self.d_0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    /// `|d_0|` fell below the configured epsilon.
    SmallCleanDifference,
    /// The updated model got worse on clean data.
    NegativeCleanDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStepReport {
    /// The epoch this step precedes.
    pub epoch: u64,
    /// The predicted particles that were measured, with their prior weights.
    pub predicted: ParticleSet,
    pub measurement: Measurement,
    /// Normalized weights after the update, before any resampling.
    pub w_after: Vec<f64>,
    pub skipped: Option<SkipReason>,
    /// The update collapsed and the weights were reset to uniform.
    pub degenerate: bool,
    pub resampled: bool,
    /// The particle set carried forward.
    pub particles: ParticleSet,
    /// Loss passes over the measurement subset: one clean plus one per particle.
    pub evaluation_passes: usize,
}

impl FilterStepReport {
    pub fn rows(&self) -> Vec<TrajectoryRow> {
        let m = &self.measurement;
        self.predicted
            .particles
            .iter()
            .enumerate()
            .map(|(i, p)| TrajectoryRow {
                epoch: self.epoch,
                particle_index: i,
                d_i: m.d[i],
                d_0: m.d_0,
                delta: if self.skipped.is_some() {
                    f64::NAN
                } else {
                    m.d[i] / m.d_0
                },
                w_before: p.weight,
                w_after: self.w_after[i],
                resampled: self.resampled,
                state: p.state.clone(),
            })
            .collect()
    }
}

fn applicator(config: &PipelineConfig) -> PolicyApplicator {
    PolicyApplicator::new(config.pipeline.magnitude, config.pipeline.order).with_base(config.pipeline.base_augment)
}

fn finite_or_fail(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!("{what} is {value}")))
    }
}

/// Trains `trainer` for `epochs` passes over `indices`, augmenting every
/// sample with a policy drawn from `particles`. Randomness comes from the
/// streams keyed by `(epoch, index)`.
#[allow(clippy::too_many_arguments)]
fn train_with_particles<M: TrainableModel>(
    trainer: &mut Trainer<M>,
    dataset: &Dataset,
    indices: &[usize],
    epochs: usize,
    particles: &ParticleSet,
    config: &PipelineConfig,
    streams: &Streams,
    (epoch, index): (u64, u64),
) -> Vec<f64> {
    let app = applicator(config);
    let sampler = particles.sampler();
    let mut policy_rng = streams.stream(Purpose::PolicySampling, epoch, index);
    let mut aug_rng = streams.stream(Purpose::Augment, epoch, index);
    let mut shuffle_rng = streams.stream(Purpose::Shuffle, epoch, index);
    trainer.train_epochs(
        dataset,
        indices,
        epochs,
        |img| {
            let i = sampler.sample(&mut policy_rng);
            app.apply(&particles.particles[i].state, img, &mut aug_rng)
        },
        &mut shuffle_rng,
    )
}

/// Runs one filter step before `epoch` and returns the outcome. `reference`
/// is left untouched.
pub fn filter_step<M: TrainableModel>(
    particles: &ParticleSet,
    reference: &Trainer<M>,
    dataset: &Dataset,
    config: &PipelineConfig,
    epoch: u64,
) -> Result<FilterStepReport> {
    let filter = config.filter_config()?;
    let p = &config.pipeline;
    let streams = Streams::new(config.seed);
    let labels = dataset.labels();
    let classes = dataset.class_count();

    let predicted = particles.predict(&filter, &mut streams.stream(Purpose::Transition, epoch, 0));

    let tp_key = if p.tp_resplit == Resplit::PerStep { epoch } else { 0 };
    let (tp, rest) = stratified_split_indices(
        &labels,
        classes,
        p.tp_fraction,
        &mut streams.stream(Purpose::SplitTrain, tp_key, 0),
    )?;
    let mut updated = reference.clone();
    train_with_particles(
        &mut updated,
        dataset,
        &tp,
        p.prediction_epochs,
        &predicted,
        config,
        &streams,
        (epoch, 1),
    );

    let vp_key = if p.vp_resplit == Resplit::PerStep { epoch } else { 0 };
    let mut vp_rng = streams.stream(Purpose::SplitMeasure, vp_key, 0);
    let vp: Vec<usize> = if p.vp_disjoint {
        if rest.is_empty() {
            return Err(Error::Invalid(
                "no samples left outside the filter-training subset".into(),
            ));
        }
        let rest_labels: Vec<usize> = rest.iter().map(|&i| labels[i]).collect();
        stratified_sample_indices(&rest_labels, classes, p.vp_size, &mut vp_rng)?
            .into_iter()
            .map(|k| rest[k])
            .collect()
    } else {
        stratified_sample_indices(&labels, classes, p.vp_size, &mut vp_rng)?
    };
    let clean: Vec<(Image, usize)> = vp
        .iter()
        .map(|&i| {
            let s = dataset.get(i);
            (s.image.clone(), s.label)
        })
        .collect();

    let difference =
        |samples: &[(Image, usize)]| mean_loss(&reference.model, samples).sum - mean_loss(&updated.model, samples).sum;
    let d_0 = finite_or_fail(difference(&clean), "clean loss difference d_0")?;
    let app = applicator(config);
    let d: Vec<f64> = predicted
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, particle)| {
            let mut rng = streams.stream(Purpose::Measurement, epoch, i as u64);
            let augmented: Vec<(Image, usize)> = clean
                .iter()
                .map(|(img, label)| (app.apply(&particle.state, img, &mut rng), *label))
                .collect();
            difference(&augmented)
        })
        .collect();
    for (i, &di) in d.iter().enumerate() {
        finite_or_fail(di, &format!("loss difference of particle {i}"))?;
    }
    let measurement = Measurement {
        d,
        d_0,
        sample_count: clean.len(),
    };

    let skipped = if d_0.abs() < p.d0_epsilon {
        Some(SkipReason::SmallCleanDifference)
    } else if d_0 < 0.0 {
        Some(SkipReason::NegativeCleanDifference)
    } else {
        None
    };
    let mut degenerate = false;
    let updated_set = match skipped {
        Some(reason) => {
            log::warn!("epoch {epoch}: skipping weight update ({reason:?}, d_0 = {d_0:e})");
            predicted.clone()
        }
        None => match predicted.update_weights(&measurement.deltas(), filter.update_rate) {
            Ok(s) => s,
            Err(Error::DegenerateUpdate) => {
                log::warn!("epoch {epoch}: degenerate weight update, resetting to uniform weights");
                degenerate = true;
                let mut s = predicted.clone();
                s.reset_uniform();
                s
            }
            Err(e) => return Err(e),
        },
    };
    let w_after = updated_set.weights();
    let (next, resampled) = updated_set.resample_if_needed(
        filter.resample_fraction,
        &mut streams.stream(Purpose::Resampling, epoch, 0),
    );
    Ok(FilterStepReport {
        epoch,
        predicted,
        measurement,
        w_after,
        skipped,
        degenerate,
        resampled,
        particles: next,
        evaluation_passes: 1 + particles.len(),
    })
}

/// Receives progress events from [`run_training`].
pub trait RunObserver: Send {
    fn filter_step(&mut self, _report: &FilterStepReport) -> Result<()> {
        Ok(())
    }

    /// Called at every epoch boundary that had a filter step, and at the end.
    fn checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }

    fn epoch_end(&mut self, _epoch: u64, _mean_loss: f64) {}
}

pub struct NullObserver;

impl RunObserver for NullObserver {}

/// Writes `trajectory.csv` and `checkpoint.bin` into an output directory.
pub struct OutputObserver {
    dir: PathBuf,
    trajectory: TrajectoryWriter<BufWriter<fs::File>>,
}

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

impl OutputObserver {
    /// Starts a new trajectory log, or appends to the existing one when
    /// `resume` is set.
    pub fn new(dir: &Path, config: &PipelineConfig, state_dim: usize, resume: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(TRAJECTORY_FILE);
        let trajectory = if resume && path.exists() {
            TrajectoryWriter::append(&path)?
        } else {
            TrajectoryWriter::create(&path, config, state_dim)?
        };
        Ok(OutputObserver {
            dir: dir.to_path_buf(),
            trajectory,
        })
    }
}

impl RunObserver for OutputObserver {
    fn filter_step(&mut self, report: &FilterStepReport) -> Result<()> {
        self.trajectory.write_rows(&report.rows())
    }

    fn checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        let tmp = self.dir.join("checkpoint.bin.tmp");
        checkpoint.save(&tmp)?;
        let path = self.dir.join(CHECKPOINT_FILE);
        fs::rename(&tmp, &path).map_err(|e| Error::io(path, e))
    }

    fn epoch_end(&mut self, epoch: u64, mean_loss: f64) {
        log::info!("epoch {epoch}: mean training loss {mean_loss:.5}");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub trainer: Trainer<BuiltinClassifier>,
    pub particles: ParticleSet,
    pub reports: Vec<FilterStepReport>,
    /// Mean reference training loss of each epoch run in this invocation.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

pub fn classifier_spec(config: &PipelineConfig, dataset: &Dataset) -> Result<ClassifierSpec> {
    let (width, height) = dataset
        .image_dims()
        .ok_or_else(|| Error::Invalid("training images must all have the same size".into()))?;
    let spec = ClassifierSpec {
        width,
        height,
        classes: dataset.class_count(),
        conv_filters: config.model.conv_filters,
        hidden: config.model.hidden,
    };
    spec.validate()?;
    Ok(spec)
}

/// Fresh model, optimizer and particles for `config`.
pub fn initial_checkpoint(config: &PipelineConfig, dataset: &Dataset) -> Result<Checkpoint> {
    config.validate()?;
    let streams = Streams::new(config.seed);
    let spec = classifier_spec(config, dataset)?;
    let model = BuiltinClassifier::new(spec, &mut streams.stream(Purpose::ModelInit, 0, 0))?;
    let total_steps = config.pipeline.epochs as u64 * steps_per_epoch(dataset.len(), config.optimizer.batch_size);
    let schedule = CosineSchedule::new(config.optimizer.learning_rate, total_steps);
    let trainer = Trainer::new(model, config.optimizer, schedule);
    Ok(Checkpoint {
        config: config.clone(),
        seed: config.seed,
        completed_epochs: 0,
        trainer,
        particles: initialize(&config.filter_config()?)?,
    })
}

/// Runs the schedule from `start` (a fresh [`initial_checkpoint`] or a saved
/// one) to the configured number of epochs, using `start.config`.
pub fn run_training(
    start: Checkpoint,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    let config = start.config.clone();
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Invalid(format!("creating thread pool: {e}")))?;
    pool.install(|| run_inner(start, &config, dataset, validation, observer))
}

fn run_inner(
    start: Checkpoint,
    config: &PipelineConfig,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    let started = Instant::now();
    let streams = Streams::new(config.seed);
    let filter_epochs = config.filter_epochs();
    let all: Vec<usize> = (0..dataset.len()).collect();
    let Checkpoint {
        mut trainer,
        mut particles,
        completed_epochs,
        ..
    } = start;
    if trainer.model.spec() != &classifier_spec(config, dataset)? {
        return Err(Error::Checkpoint("model shape does not match the dataset".into()));
    }
    let baseline = config.pipeline.baseline.then(|| {
        let mut set = particles.clone();
        set.particles.truncate(1);
        set.particles[0].state = config.baseline_policy();
        set.particles[0].weight = 1.0;
        set
    });

    let mut reports = Vec::new();
    let mut epoch_losses = Vec::new();
    for epoch in completed_epochs + 1..=config.pipeline.epochs as u64 {
        // A checkpoint written after a filter step already holds its particles.
        let due = filter_epochs
            .iter()
            .position(|&e| e as u64 == epoch)
            .is_some_and(|k| k as u64 >= particles.epoch);
        if due {
            let report = filter_step(&particles, &trainer, dataset, config, epoch)?;
            particles = report.particles.clone();
            observer.filter_step(&report)?;
            observer.checkpoint(&Checkpoint {
                config: config.clone(),
                seed: config.seed,
                completed_epochs: epoch - 1,
                trainer: trainer.clone(),
                particles: particles.clone(),
            })?;
            reports.push(report);
        }
        let policy = baseline.as_ref().unwrap_or(&particles);
        let loss = train_with_particles(&mut trainer, dataset, &all, 1, policy, config, &streams, (epoch, 0))[0];
        finite_or_fail(loss, &format!("training loss in epoch {epoch}"))?;
        observer.epoch_end(epoch, loss);
        epoch_losses.push(loss);
    }
    let end = Checkpoint {
        config: config.clone(),
        seed: config.seed,
        completed_epochs: (config.pipeline.epochs as u64).max(completed_epochs),
        trainer,
        particles,
    };
    observer.checkpoint(&end)?;
    let train_accuracy = accuracy(&end.trainer.model, dataset, &all);
    let val_accuracy = validation.map(|v| accuracy(&end.trainer.model, v, &(0..v.len()).collect::<Vec<_>>()));
    Ok(RunOutcome {
        trainer: end.trainer,
        particles: end.particles,
        reports,
        epoch_losses,
        train_accuracy,
        val_accuracy,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Trains the same initial model without any augmentation, drawing batch
/// order from the same streams as [`run_training`].
pub fn run_plain(config: &PipelineConfig, dataset: &Dataset) -> Result<Trainer<BuiltinClassifier>> {
    let Checkpoint { mut trainer, .. } = initial_checkpoint(config, dataset)?;
    let streams = Streams::new(config.seed);
    let all: Vec<usize> = (0..dataset.len()).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Invalid(format!("creating thread pool: {e}")))?;
    pool.install(|| {
        for epoch in 1..=config.pipeline.epochs as u64 {
            let mut shuffle = streams.stream(Purpose::Shuffle, epoch, 0);
            trainer.train_epochs(dataset, &all, 1, Image::clone, &mut shuffle);
        }
    });
    Ok(trainer)
}

/// Loads the training and optional validation sets described by `config.data`.
pub fn load_datasets(config: &PipelineConfig) -> Result<(Dataset, Option<Dataset>)> {
    let d = &config.data;
    let load = |path: &Path| match d.kind {
        DataKind::Manifest => data::load_png_manifest(path),
        DataKind::Cifar => data::load_cifar_binary(path),
        DataKind::Synthetic => unreachable!("synthetic data has no path"),
    };
    match d.kind {
        DataKind::Synthetic => {
            let streams = Streams::new(config.seed);
            let train = toy::glyphs(
                d.samples,
                d.classes,
                d.image_size,
                &mut streams.stream(Purpose::Data, 0, 0),
            );
            let val = (d.val_samples > 0).then(|| {
                toy::glyphs(
                    d.val_samples,
                    d.classes,
                    d.image_size,
                    &mut streams.stream(Purpose::Data, 0, 1),
                )
            });
            Ok((train, val))
        }
        _ => {
            let path = d
                .path
                .as_deref()
                .ok_or_else(|| Error::config("data.path", "required for manifest and cifar data"))?;
            let train = load(path)?;
            let val = d.val_path.as_deref().map(load).transpose()?;
            Ok((train, val))
        }
    }
}
