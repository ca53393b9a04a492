//! Sequential importance resampling over augmentation policies.
//!
//! A particle is one policy: a vector of per-operation application
//! probabilities plus a weight. The set of weights is always a discrete
//! probability distribution over the particles.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Streams};

/// How the initial particle states are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// `l` random entries per particle set to the init value, the rest zero.
    #[default]
    Sparse,
    /// The first `min(n, r)` particles are scaled unit vectors, the rest sparse.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub particle_count: usize,
    pub state_dim: usize,
    /// Standard deviation of the Gaussian process noise.
    pub process_noise_sigma: f64,
    /// Constant velocity `c`, subtracted from every state on transition.
    /// All zeros gives the constant position model.
    pub velocity: Vec<f64>,
    /// Exponent applied to the weight multipliers.
    pub update_rate: f64,
    /// Resample when the effective sample size drops below `r * alpha`.
    pub resample_fraction: f64,
    pub sparse_init_count: usize,
    pub init_value: f64,
    pub init_mode: InitMode,
    pub rng_seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            particle_count: 50,
            state_dim: 15,
            process_noise_sigma: 0.05,
            velocity: vec![0.0; 15],
            update_rate: 1.0,
            resample_fraction: 0.5,
            sparse_init_count: 3,
            init_value: 0.25,
            init_mode: InitMode::Sparse,
            rng_seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particle_count == 0 {
            return Err(Error::config("particles", "must be at least 1"));
        }
        if self.state_dim == 0 {
            return Err(Error::config("state_dim", "must be at least 1"));
        }
        if !(self.process_noise_sigma >= 0.0 && self.process_noise_sigma.is_finite()) {
            return Err(Error::config("sigma", "must be finite and nonnegative"));
        }
        if self.velocity.len() != self.state_dim {
            return Err(Error::config(
                "velocity",
                format!("expected {} entries, got {}", self.state_dim, self.velocity.len()),
            ));
        }
        if self.velocity.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("velocity", "entries must be finite"));
        }
        if !(self.update_rate > 0.0 && self.update_rate.is_finite()) {
            return Err(Error::config("eta", "must be finite and positive"));
        }
        if !(self.resample_fraction > 0.0 && self.resample_fraction <= 1.0) {
            return Err(Error::config("alpha", "must lie in (0, 1]"));
        }
        if self.sparse_init_count > self.state_dim {
            return Err(Error::config(
                "sparse_init_count",
                format!("must not exceed the state dimension {}", self.state_dim),
            ));
        }
        if !(0.0..=1.0).contains(&self.init_value) {
            return Err(Error::config("init_value", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub state: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    pub epoch: u64,
}

/// Builds the initial particle set described by `config.init_mode`.
/// Deterministic given `config.rng_seed`.
pub fn initialize(config: &FilterConfig) -> Result<ParticleSet> {
    match config.init_mode {
        InitMode::Sparse => sparse_init(config),
        InitMode::Orthogonal => orthogonal_init(config),
    }
}

pub fn sparse_init(config: &FilterConfig) -> Result<ParticleSet> {
    config.validate()?;
    let mut rng = Streams::new(config.rng_seed).stream(Purpose::Init, 0, 0);
    let r = config.particle_count;
    let particles = (0..r)
        .map(|_| Particle {
            state: sparse_state(config, &mut rng),
            weight: 1.0 / r as f64,
        })
        .collect();
    Ok(ParticleSet { particles, epoch: 0 })
}

pub fn orthogonal_init(config: &FilterConfig) -> Result<ParticleSet> {
    config.validate()?;
    let mut rng = Streams::new(config.rng_seed).stream(Purpose::Init, 0, 0);
    let (r, n) = (config.particle_count, config.state_dim);
    let particles = (0..r)
        .map(|i| {
            let state = if i < n {
                let mut s = vec![0.0; n];
                s[i] = config.init_value;
                s
            } else {
                sparse_state(config, &mut rng)
            };
            Particle {
                state,
                weight: 1.0 / r as f64,
            }
        })
        .collect();
    Ok(ParticleSet { particles, epoch: 0 })
}

fn sparse_state<R: Rng + ?Sized>(config: &FilterConfig, rng: &mut R) -> Vec<f64> {
    let mut state = vec![0.0; config.state_dim];
    for j in index::sample(rng, config.state_dim, config.sparse_init_count) {
        state[j] = config.init_value;
    }
    state
}

/// Draws one element-wise i.i.d. `N(0, sigma^2)` noise vector.
pub fn transition_noise<R: Rng + ?Sized>(sigma: f64, dim: usize, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; dim];
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated as finite and nonnegative");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

/// `clip(x - c + noise, 0, 1)`, saturating at the bounds.
pub fn transition(state: &[f64], velocity: &[f64], noise: &[f64]) -> Vec<f64> {
    state
        .iter()
        .zip(velocity)
        .zip(noise)
        .map(|((x, c), e)| (x - c + e).clamp(0.0, 1.0))
        .collect()
}

/// Unnormalized weight multiplier `(tanh(delta - 1) + 1)^eta`, in `[0, 2^eta)`.
pub fn weight_multiplier(delta: f64, eta: f64) -> f64 {
    ((delta - 1.0).tanh() + 1.0).powf(eta)
}

/// The resample condition `N_eff < r * alpha`.
pub fn needs_resample(effective_sample_size: f64, particle_count: usize, alpha: f64) -> bool {
    effective_sample_size < particle_count as f64 * alpha
}

/// Ancestor indices for systematic resampling: one uniform offset, `r`
/// evenly spaced positions on the cumulative weight axis.
pub fn systematic_ancestors<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let r = weights.len();
    let step = 1.0 / r as f64;
    let offset = rng.random::<f64>() * step;
    let last_positive = weights.iter().rposition(|&w| w > 0.0).unwrap_or(r - 1);

    let mut ancestors = Vec::with_capacity(r);
    let mut cumulative = weights[0];
    let mut i = 0;
    for k in 0..r {
        let position = offset + k as f64 * step;
        while cumulative <= position && i < last_positive {
            i += 1;
            cumulative += weights[i];
        }
        ancestors.push(i);
    }
    ancestors
}

/// Categorical sampler over particle indices built from a cumulative table.
#[derive(Debug, Clone)]
pub struct PolicySampler {
    cumulative: Vec<f64>,
    last_positive: usize,
}

impl PolicySampler {
    pub fn new(weights: &[f64]) -> Self {
        let mut total = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                total += w;
                total
            })
            .collect();
        PolicySampler {
            cumulative,
            last_positive: weights.iter().rposition(|&w| w > 0.0).unwrap_or(0),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = self.cumulative[self.cumulative.len() - 1];
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        i.min(self.last_positive)
    }
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.particles.first().map_or(0, |p| p.state.len())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.weight).collect()
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.particles.iter().map(|p| p.state.clone()).collect()
    }

    /// State transition: every state becomes `clip(x - c + eps, 0, 1)`.
    /// Weights are carried over and the epoch advances by one.
    pub fn predict<R: Rng + ?Sized>(&self, config: &FilterConfig, rng: &mut R) -> ParticleSet {
        let particles = self
            .particles
            .iter()
            .map(|p| {
                let noise = transition_noise(config.process_noise_sigma, p.state.len(), rng);
                Particle {
                    state: transition(&p.state, &config.velocity, &noise),
                    weight: p.weight,
                }
            })
            .collect();
        ParticleSet {
            particles,
            epoch: self.epoch + 1,
        }
    }

    /// Multiplies each weight by `weight_multiplier(delta_i, eta)` and renormalizes.
    pub fn update_weights(&self, deltas: &[f64], eta: f64) -> Result<ParticleSet> {
        if deltas.len() != self.len() {
            return Err(Error::Invalid(format!(
                "expected {} relative improvements, got {}",
                self.len(),
                deltas.len()
            )));
        }
        if let Some(d) = deltas.iter().find(|d| !d.is_finite()) {
            return Err(Error::Invalid(format!("non-finite relative improvement {d}")));
        }
        let unnormalized: Vec<f64> = self
            .particles
            .iter()
            .zip(deltas)
            .map(|(p, &d)| weight_multiplier(d, eta) * p.weight)
            .collect();
        let total: f64 = unnormalized.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::DegenerateUpdate);
        }
        let mut next = self.clone();
        for (p, w) in next.particles.iter_mut().zip(unnormalized) {
            p.weight = w / total;
        }
        Ok(next)
    }

    /// Sets every weight to `1/r`.
    pub fn reset_uniform(&mut self) {
        let w = 1.0 / self.len() as f64;
        for p in &mut self.particles {
            p.weight = w;
        }
    }

    /// `1 / sum(w_i^2)`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
    }

    /// Systematic resampling. The output has uniform weights.
    pub fn resample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParticleSet {
        let ancestors = systematic_ancestors(&self.weights(), rng);
        let w = 1.0 / self.len() as f64;
        let particles = ancestors
            .into_iter()
            .map(|a| Particle {
                state: self.particles[a].state.clone(),
                weight: w,
            })
            .collect();
        ParticleSet {
            particles,
            epoch: self.epoch,
        }
    }

    /// Resamples iff `N_eff < r * alpha`. Returns the new set and whether it resampled.
    pub fn resample_if_needed<R: Rng + ?Sized>(&self, alpha: f64, rng: &mut R) -> (ParticleSet, bool) {
        if needs_resample(self.effective_sample_size(), self.len(), alpha) {
            (self.resample(rng), true)
        } else {
            (self.clone(), false)
        }
    }

    /// Weighted first moment of the particle states.
    pub fn expected_state(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.state_dim()];
        for p in &self.particles {
            for (m, x) in mean.iter_mut().zip(&p.state) {
                *m += p.weight * x;
            }
        }
        mean
    }

    pub fn sampler(&self) -> PolicySampler {
        PolicySampler::new(&self.weights())
    }

    /// Draws a particle index with probability equal to its weight.
    pub fn sample_policy_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler().sample(rng)
    }

    /// CSV header for [`ParticleSet::write_csv`]: `epoch,particle_index,w,p_1..p_n`.
    pub fn csv_header(state_dim: usize) -> Vec<String> {
        let mut h = vec!["epoch".to_string(), "particle_index".into(), "w".into()];
        h.extend((1..=state_dim).map(|j| format!("p_{j}")));
        h
    }

    /// Writes one row per particle. Floats use the shortest round-trip form.
    pub fn write_csv<W: Write>(&self, writer: &mut csv::Writer<W>) -> csv::Result<()> {
        for (i, p) in self.particles.iter().enumerate() {
            let mut row = vec![self.epoch.to_string(), i.to_string(), p.weight.to_string()];
            row.extend(p.state.iter().map(|x| x.to_string()));
            writer.write_record(&row)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    fn set_from(states: Vec<Vec<f64>>, weights: Vec<f64>) -> ParticleSet {
        ParticleSet {
            particles: states
                .into_iter()
                .zip(weights)
                .map(|(state, weight)| Particle { state, weight })
                .collect(),
            epoch: 0,
        }
    }

    #[test]
    fn sparse_init_sets_l_entries() {
        let cfg = FilterConfig::default();
        let set = sparse_init(&cfg).unwrap();
        assert_eq!(set.len(), 50);
        for p in &set.particles {
            assert_eq!(p.state.iter().filter(|&&x| x == 0.25).count(), 3);
            assert_eq!(p.state.iter().filter(|&&x| x == 0.0).count(), 12);
            assert_eq!(p.weight, 0.02);
        }
        assert_eq!(set, sparse_init(&cfg).unwrap());
    }

    #[test]
    fn sparse_init_with_zero_count_is_all_zero() {
        let cfg = FilterConfig {
            sparse_init_count: 0,
            ..FilterConfig::default()
        };
        let set = sparse_init(&cfg).unwrap();
        assert!(set.particles.iter().all(|p| p.state.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn orthogonal_init_leads_with_unit_vectors() {
        let cfg = FilterConfig {
            init_value: 1.0,
            init_mode: InitMode::Orthogonal,
            ..FilterConfig::default()
        };
        let set = initialize(&cfg).unwrap();
        for (i, p) in set.particles.iter().take(15).enumerate() {
            for (j, &x) in p.state.iter().enumerate() {
                assert_eq!(x, if i == j { 1.0 } else { 0.0 });
            }
        }
        for p in &set.particles[15..] {
            assert_eq!(p.state.iter().filter(|&&x| x == 1.0).count(), 3);
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = [
            FilterConfig {
                particle_count: 0,
                ..Default::default()
            },
            FilterConfig {
                sparse_init_count: 16,
                ..Default::default()
            },
            FilterConfig {
                resample_fraction: 0.0,
                ..Default::default()
            },
            FilterConfig {
                resample_fraction: 1.5,
                ..Default::default()
            },
            FilterConfig {
                velocity: vec![0.0; 3],
                ..Default::default()
            },
            FilterConfig {
                update_rate: 0.0,
                ..Default::default()
            },
            FilterConfig {
                process_noise_sigma: -0.1,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config { .. })), "{cfg:?}");
        }
    }

    #[test]
    fn noiseless_constant_position_is_identity() {
        let cfg = FilterConfig {
            state_dim: 3,
            velocity: vec![0.0; 3],
            process_noise_sigma: 0.0,
            ..Default::default()
        };
        let set = set_from(vec![vec![0.25, 0.0, 0.5]], vec![1.0]);
        let next = set.predict(&cfg, &mut rng(1));
        assert_eq!(next.particles[0].state, vec![0.25, 0.0, 0.5]);
        assert_eq!(next.epoch, 1);
    }

    #[test]
    fn negative_velocity_clips_at_one() {
        let cfg = FilterConfig {
            state_dim: 2,
            velocity: vec![-0.001; 2],
            process_noise_sigma: 0.0,
            ..Default::default()
        };
        let set = set_from(vec![vec![0.9995, 0.5]], vec![1.0]);
        let next = set.predict(&cfg, &mut rng(1));
        assert_eq!(next.particles[0].state[0], 1.0);
        assert_eq!(next.particles[0].state[1], 0.5 + 0.001);
    }

    #[test]
    fn unit_delta_leaves_weights_unchanged() {
        let set = set_from(vec![vec![0.0]; 3], vec![0.5, 0.3, 0.2]);
        for eta in [0.1, 1.0, 4.0] {
            let next = set.update_weights(&[1.0; 3], eta).unwrap();
            assert_eq!(next.weights(), vec![0.5, 0.3, 0.2]);
        }
    }

    #[test]
    fn single_particle_normalizes_to_one() {
        let set = set_from(vec![vec![0.0]], vec![1.0]);
        for d in [-3.0, 0.0, 1.0, 7.5] {
            assert_eq!(set.update_weights(&[d], 1.0).unwrap().weights(), vec![1.0]);
        }
    }

    #[test]
    fn two_particle_update_matches_closed_form() {
        // Reference values evaluated at 40 significant digits.
        let set = set_from(vec![vec![0.0]; 2], vec![0.5, 0.5]);
        let next = set.update_weights(&[2.0, 1.0], 1.0).unwrap();
        let w = next.weights();
        assert!((weight_multiplier(2.0, 1.0) - 1.761_594_155_955_764_9).abs() < 1e-15);
        assert!((w[0] - 0.637_890_311_346_669_2).abs() < 1e-12, "{w:?}");
        assert!((w[1] - 0.362_109_688_653_330_8).abs() < 1e-12, "{w:?}");
        // (tanh(1) + 1)^0.25
        assert!((weight_multiplier(2.0, 0.25) - 1.152_063_626_838_628_7).abs() < 1e-12);
    }

    #[test]
    fn collapsed_weights_are_degenerate() {
        let set = set_from(vec![vec![0.0]; 2], vec![0.5, 0.5]);
        assert!(matches!(
            set.update_weights(&[-100.0, -100.0], 1.0),
            Err(Error::DegenerateUpdate)
        ));
        assert!(matches!(set.update_weights(&[1.0], 1.0), Err(Error::Invalid(_))));
        assert!(matches!(
            set.update_weights(&[f64::NAN, 1.0], 1.0),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn effective_sample_size_cases() {
        let uniform = set_from(vec![vec![0.0]; 50], vec![0.02; 50]);
        assert!((uniform.effective_sample_size() - 50.0).abs() < 1e-9);
        let mut point = vec![0.0; 50];
        point[0] = 1.0;
        assert_eq!(set_from(vec![vec![0.0]; 50], point).effective_sample_size(), 1.0);
        let mut two = vec![0.0; 50];
        two[0] = 0.5;
        two[1] = 0.5;
        assert_eq!(set_from(vec![vec![0.0]; 50], two).effective_sample_size(), 2.0);
    }

    #[test]
    fn resample_point_mass_copies_particle_zero() {
        let mut w = vec![0.0; 5];
        w[0] = 1.0;
        let states = (0..5).map(|i| vec![i as f64 / 10.0]).collect();
        let set = set_from(states, w);
        let out = set.resample(&mut rng(3));
        assert!(out.particles.iter().all(|p| p.state == vec![0.0] && p.weight == 0.2));
    }

    #[test]
    fn resample_uniform_is_permutation() {
        let mut r = rng(9);
        for n in [1, 2, 7, 50] {
            let w = vec![1.0 / n as f64; n];
            for _ in 0..100 {
                let mut a = systematic_ancestors(&w, &mut r);
                a.sort_unstable();
                assert_eq!(a, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn resample_never_selects_zero_weight() {
        let mut r = rng(4);
        let w = [0.0, 0.5, 0.0, 0.5, 0.0];
        for _ in 0..1000 {
            assert!(systematic_ancestors(&w, &mut r).iter().all(|&a| a == 1 || a == 3));
        }
    }

    #[test]
    fn expected_state_cases() {
        let two = set_from(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![0.5, 0.5]);
        assert_eq!(two.expected_state(), vec![0.5, 0.5]);
        let one = set_from(vec![vec![0.3, 0.7]], vec![1.0]);
        assert_eq!(one.expected_state(), vec![0.3, 0.7]);
        let skew = set_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.75, 0.25]);
        assert_eq!(skew.expected_state(), vec![0.75, 0.25]);
    }

    #[test]
    fn policy_sampler_point_mass() {
        let mut w = vec![0.0; 10];
        w[0] = 1.0;
        let set = set_from(vec![vec![0.0]; 10], w);
        let mut r = rng(5);
        assert!((0..1000).all(|_| set.sample_policy_index(&mut r) == 0));
    }

    #[test]
    fn policy_sampler_frequencies() {
        let draws = 100_000;
        let mut r = rng(6);

        let set = set_from(vec![vec![0.0]; 2], vec![0.9, 0.1]);
        let sampler = set.sampler();
        let hits = (0..draws).filter(|_| sampler.sample(&mut r) == 0).count();
        let se = (0.9f64 * 0.1 / draws as f64).sqrt();
        assert!((hits as f64 / draws as f64 - 0.9).abs() < 3.0 * se);

        let n = 10;
        let set = set_from(vec![vec![0.0]; n], vec![0.1; n]);
        let sampler = set.sampler();
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            counts[sampler.sample(&mut r)] += 1;
        }
        let p = 1.0 / n as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for c in counts {
            assert!((c as f64 / draws as f64 - p).abs() < 3.0 * se, "{c}");
        }
    }

    #[test]
    fn csv_rows_follow_header() {
        let set = set_from(vec![vec![0.25, 0.0], vec![0.0, 1.0]], vec![0.5, 0.5]);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(ParticleSet::csv_header(2)).unwrap();
        set.write_csv(&mut w).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text, "epoch,particle_index,w,p_1,p_2\n0,0,0.5,0.25,0\n0,1,0.5,0,1\n");
    }
}
