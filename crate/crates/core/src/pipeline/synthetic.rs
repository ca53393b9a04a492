//! Filter-only runs against an analytic measurement, no neural training.

use std::io::Write;

use crate::error::{Error, Result};
use crate::filter::{initialize, FilterConfig, ParticleSet};
use crate::rng::{Purpose, Streams};

use super::trajectory::TrajectoryRow;

/// `delta(x) = 1 + gamma * (1 - |x - target|_1 / n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceOracle {
    pub target: Vec<f64>,
    pub gamma: f64,
}

impl DistanceOracle {
    pub fn delta(&self, state: &[f64]) -> f64 {
        1.0 + self.gamma * (1.0 - l1_distance(state, &self.target) / self.target.len() as f64)
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStep {
    pub step: u64,
    /// Weighted mean of the updated particles, before resampling.
    pub expected_state: Vec<f64>,
    pub effective_sample_size: f64,
    pub resampled: bool,
    pub rows: Vec<TrajectoryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRun {
    pub initial_expected_state: Vec<f64>,
    pub steps: Vec<SyntheticStep>,
    pub particles: ParticleSet,
}

impl SyntheticRun {
    pub fn final_expected_state(&self) -> &[f64] {
        self.steps
            .last()
            .map_or(&self.initial_expected_state, |s| &s.expected_state)
    }
}

/// Runs `steps` predict / update / resample cycles scoring every predicted
/// particle with `oracle`. Logged rows carry `d_i = delta_i` and `d_0 = 1`.
pub fn run_synthetic(config: &FilterConfig, oracle: &DistanceOracle, steps: usize) -> Result<SyntheticRun> {
    if oracle.target.len() != config.state_dim {
        return Err(Error::Invalid(format!(
            "oracle target has {} entries, filter state has {}",
            oracle.target.len(),
            config.state_dim
        )));
    }
    let streams = Streams::new(config.rng_seed);
    let mut set = initialize(config)?;
    let initial_expected_state = set.expected_state();
    let mut log = Vec::with_capacity(steps);
    for t in 1..=steps as u64 {
        let predicted = set.predict(config, &mut streams.stream(Purpose::Transition, t, 0));
        let deltas: Vec<f64> = predicted.particles.iter().map(|p| oracle.delta(&p.state)).collect();
        let updated = match predicted.update_weights(&deltas, config.update_rate) {
            Ok(s) => s,
            Err(Error::DegenerateUpdate) => {
                log::warn!("step {t}: degenerate weight update, resetting to uniform weights");
                let mut s = predicted.clone();
                s.reset_uniform();
                s
            }
            Err(e) => return Err(e),
        };
        let expected_state = updated.expected_state();
        let effective_sample_size = updated.effective_sample_size();
        let (next, resampled) =
            updated.resample_if_needed(config.resample_fraction, &mut streams.stream(Purpose::Resampling, t, 0));
        let rows = predicted
            .particles
            .iter()
            .zip(&updated.particles)
            .zip(&deltas)
            .enumerate()
            .map(|(i, ((before, after), &delta))| TrajectoryRow {
                epoch: t,
                particle_index: i,
                d_i: delta,
                d_0: 1.0,
                delta,
                w_before: before.weight,
                w_after: after.weight,
                resampled,
                state: before.state.clone(),
            })
            .collect();
        log.push(SyntheticStep {
            step: t,
            expected_state,
            effective_sample_size,
            resampled,
            rows,
        });
        set = next;
    }
    Ok(SyntheticRun {
        initial_expected_state,
        steps: log,
        particles: set,
    })
}

pub fn expected_state_header(state_dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "effective_sample_size", "resampled_flag", "l1_distance"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=state_dim).map(|j| format!("p_{j}")));
    h
}

/// Writes one row per step: step, N_eff, resampled flag, L1 distance of the
/// expected state to the oracle target, expected state.
pub fn write_expected_states<W: Write>(run: &SyntheticRun, oracle: &DistanceOracle, out: W) -> Result<()> {
    let fail = |e: csv::Error| Error::Invalid(format!("writing expected states: {e}"));
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(expected_state_header(oracle.target.len()))
        .map_err(fail)?;
    for s in &run.steps {
        let mut rec = vec![
            s.step.to_string(),
            s.effective_sample_size.to_string(),
            u8::from(s.resampled).to_string(),
            l1_distance(&s.expected_state, &oracle.target).to_string(),
        ];
        rec.extend(s.expected_state.iter().map(|x| x.to_string()));
        csv.write_record(&rec).map_err(fail)?;
    }
    csv.flush()
        .map_err(|e| Error::Invalid(format!("writing expected states: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(seed: u64) -> FilterConfig {
        FilterConfig {
            rng_seed: seed,
            ..FilterConfig::default()
        }
    }

    #[test]
    fn oracle_values() {
        let o = DistanceOracle {
            target: vec![0.0; 4],
            gamma: 0.5,
        };
        assert_eq!(o.delta(&[0.0; 4]), 1.5);
        assert_eq!(o.delta(&[1.0; 4]), 1.0);
        assert_eq!(o.delta(&[0.5, 0.5, 0.0, 0.0]), 1.375);
    }

    #[test]
    fn constant_oracle_keeps_uniform_weights() {
        let cfg = FilterConfig {
            process_noise_sigma: 0.0,
            ..config(4)
        };
        let o = DistanceOracle {
            target: vec![0.0; 15],
            gamma: 0.0,
        };
        let run = run_synthetic(&cfg, &o, 25).unwrap();
        let w0 = run.particles.particles[0].weight;
        assert!((w0 - 1.0 / 50.0).abs() < 1e-15);
        assert!(run.particles.particles.iter().all(|p| p.weight == w0));
        assert!(run.steps.iter().all(|s| !s.resampled));
    }

    #[test]
    fn single_particle_is_pinned() {
        let cfg = FilterConfig {
            particle_count: 1,
            ..config(2)
        };
        let o = DistanceOracle {
            target: vec![0.5; 15],
            gamma: 0.5,
        };
        let run = run_synthetic(&cfg, &o, 20).unwrap();
        for s in &run.steps {
            assert_eq!(s.rows[0].w_after, 1.0);
            assert_eq!(s.effective_sample_size, 1.0);
        }
        assert_eq!(run.particles.particles[0].weight, 1.0);
    }

    #[test]
    fn zero_steps() {
        let o = DistanceOracle {
            target: vec![0.5; 15],
            gamma: 0.5,
        };
        let run = run_synthetic(&config(1), &o, 0).unwrap();
        assert!(run.steps.is_empty());
        let mut out = Vec::new();
        write_expected_states(&run, &o, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1);
    }
}
