//! Rao-Blackwellized particle filter for jump Markov nonlinear systems.
//!
//! Particles carry the continuous state only; the discrete mode is
//! marginalized by a per-particle conditional HMM filter whose filtered
//! probabilities `alpha` travel with the particle.

use rand::{Rng, RngCore};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModeId, ModelSpec, StatLayout, Theta, TransitionMatrix};
use crate::numerics::{log_sum_exp, normalize_log_weights, softmax};
use crate::rng::{substream, RESAMPLE_SLOT};
use crate::smoothing::IntermediateStat;

/// One weighted state sample with its conditional mode distribution.
#[derive(Clone, Debug)]
pub struct Particle {
    pub x: Vec<f64>,
    /// State of the particle this one was proposed from.
    pub x_prev: Vec<f64>,
    /// Log importance weight (normalized after every step).
    pub log_w: f64,
    /// Filtered mode probabilities `P(r_t = l | x_{1:t}, y_{1:t})`.
    pub alpha: Vec<f64>,
    pub t_stat: IntermediateStat,
}

#[derive(Clone, Debug)]
pub struct ParticleSystem {
    pub particles: Vec<Particle>,
    /// Index of the last processed observation (0 before any step).
    pub time: usize,
    /// Whether the most recent step resampled before proposing.
    pub last_resampled: bool,
}

impl ParticleSystem {
    /// Uniformly weighted system at `t = 0` with zero intermediate statistics.
    pub fn new(states: Vec<Vec<f64>>, alpha0: &[f64], layout: &StatLayout) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Config("particle system needs at least one particle".into()));
        }
        check_simplex(alpha0, "initial mode distribution")?;
        let log_w = -(states.len() as f64).ln();
        let particles = states
            .into_iter()
            .map(|x| Particle {
                x_prev: x.clone(),
                x,
                log_w,
                alpha: alpha0.to_vec(),
                t_stat: IntermediateStat::zeros(layout),
            })
            .collect();
        Ok(Self { particles, time: 0, last_resampled: false })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Normalized weights.
    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_w.exp()).collect()
    }
}

pub(crate) fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("{what} is not a probability vector")));
    }
    Ok(())
}

/// Proposal kernel `q_t(x_t | x_{t-1}, y_t)`.
pub trait Proposal<M: ModelSpec>: Sync {
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        model: &M,
        t: usize,
        x_prev: &[f64],
        alpha_pred: &[f64],
        y: &[f64],
        theta: &Theta<M::Params>,
        rng: &mut dyn RngCore,
    ) -> Vec<f64>;

    #[allow(clippy::too_many_arguments)]
    fn log_density(
        &self,
        model: &M,
        t: usize,
        x: &[f64],
        x_prev: &[f64],
        alpha_pred: &[f64],
        y: &[f64],
        theta: &Theta<M::Params>,
    ) -> f64;
}

/// Mixture of the per-mode transition densities weighted by the predicted
/// mode probabilities.
#[derive(Clone, Copy, Debug, Default)]
pub struct BootstrapProposal;

impl<M: ModelSpec> Proposal<M> for BootstrapProposal {
    fn sample(
        &self,
        model: &M,
        t: usize,
        x_prev: &[f64],
        alpha_pred: &[f64],
        _y: &[f64],
        theta: &Theta<M::Params>,
        rng: &mut dyn RngCore,
    ) -> Vec<f64> {
        bootstrap_propose(model, t, x_prev, alpha_pred, theta, rng).0
    }

    fn log_density(
        &self,
        model: &M,
        t: usize,
        x: &[f64],
        x_prev: &[f64],
        alpha_pred: &[f64],
        _y: &[f64],
        theta: &Theta<M::Params>,
    ) -> f64 {
        mixture_log_density(model, t, x, x_prev, alpha_pred, theta)
    }
}

/// `alpha_pred(l) = sum_k pi_{kl} alpha(k)`.
pub fn predict_mode_probs(alpha: &[f64], tpm: &TransitionMatrix) -> Vec<f64> {
    let k_modes = tpm.num_modes();
    let mut out = vec![0.0; k_modes];
    for (k, a) in alpha.iter().enumerate() {
        if *a == 0.0 {
            continue;
        }
        for (l, o) in out.iter_mut().enumerate() {
            *o += tpm.get(k, l) * a;
        }
    }
    out
}

/// Draws an index from a probability vector by inversion with one uniform.
/// Single-entry vectors consume no randomness.
pub(crate) fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    if probs.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

fn mixture_log_density<M: ModelSpec>(
    model: &M,
    t: usize,
    x: &[f64],
    x_prev: &[f64],
    alpha_pred: &[f64],
    theta: &Theta<M::Params>,
) -> f64 {
    let terms: Vec<f64> = alpha_pred
        .iter()
        .enumerate()
        .map(|(k, a)| {
            if *a == 0.0 {
                f64::NEG_INFINITY
            } else {
                a.ln() + model.log_trans_density(k, t, x, x_prev, &theta.modes[k])
            }
        })
        .collect();
    log_sum_exp(&terms)
}

/// Draws `j ~ alpha_pred`, then `x ~ f_j(. | x_prev)`. The returned
/// log-density is that of the full mixture, not of the selected branch.
pub fn bootstrap_propose<M: ModelSpec>(
    model: &M,
    t: usize,
    x_prev: &[f64],
    alpha_pred: &[f64],
    theta: &Theta<M::Params>,
    rng: &mut dyn RngCore,
) -> (Vec<f64>, f64) {
    let j = sample_index(alpha_pred, rng);
    let mut x = vec![0.0; model.state_dim()];
    model.sample_transition(j, t, x_prev, &theta.modes[j], rng, &mut x);
    let log_q = mixture_log_density(model, t, &x, x_prev, alpha_pred, theta);
    (x, log_q)
}

/// `log gamma(l) = log g_l(y | x_next) + log f_l(x_next | x_prev) + log alpha_pred(l)`.
/// Entries are `-inf` for modes with zero predicted mass or zero density.
pub fn gamma_table<M: ModelSpec>(
    model: &M,
    t: usize,
    x_next: &[f64],
    x_prev: &[f64],
    y: &[f64],
    alpha_pred: &[f64],
    theta: &Theta<M::Params>,
) -> Vec<f64> {
    alpha_pred
        .iter()
        .enumerate()
        .map(|(l, a)| {
            if *a == 0.0 {
                return f64::NEG_INFINITY;
            }
            let p = &theta.modes[l];
            let v = model.log_meas_density(l, t, y, x_next, p) + model.log_trans_density(l, t, x_next, x_prev, p) + a.ln();
            if v.is_nan() { f64::NEG_INFINITY } else { v }
        })
        .collect()
}

/// Returned when every mode of a particle has zero joint density.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegenerateParticle;

/// Normalizes `gamma` into filtered mode probabilities.
pub fn update_mode_probs(log_gamma: &[f64]) -> std::result::Result<Vec<f64>, DegenerateParticle> {
    softmax(log_gamma).ok_or(DegenerateParticle)
}

/// `log_w_prev + logsumexp(log_gamma) - log_q`; `-inf` for degenerate particles.
pub fn weight_update(log_w_prev: f64, log_gamma: &[f64], log_q: f64) -> f64 {
    let evidence = log_sum_exp(log_gamma);
    if evidence == f64::NEG_INFINITY || evidence.is_nan() || !log_q.is_finite() {
        return f64::NEG_INFINITY;
    }
    log_w_prev + evidence - log_q
}

/// Effective sample size `1 / sum w^2` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: offspring positions `(u + i) / N`, `u` in `[0, 1)`.
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut j = 0;
    for i in 0..n {
        let position = (u + i as f64) / n as f64;
        while position >= cumulative && j + 1 < n {
            j += 1;
            cumulative += weights[j];
        }
        out.push(j);
    }
    out
}

/// Resamples a whole system; offspring copy state, mode probabilities and
/// intermediate statistics, and weights become uniform.
pub fn systematic_resample(system: &ParticleSystem, rng: &mut dyn RngCore) -> ParticleSystem {
    let u: f64 = rng.random();
    let indices = systematic_indices(&system.weights(), u);
    let log_w = -(system.len() as f64).ln();
    let particles = indices
        .into_iter()
        .map(|a| Particle { log_w, ..system.particles[a].clone() })
        .collect();
    ParticleSystem { particles, time: system.time, last_resampled: true }
}

/// Pre-resampling particles of the previous step plus ancestry, as needed by
/// the smoothers: forward smoothing uses every weighted particle in `prev`,
/// path-based smoothing follows `ancestors`.
#[derive(Debug)]
pub struct StepTrace {
    pub prev: Vec<Particle>,
    /// `ancestors[i]` indexes the entry of `prev` that particle `i` descends from.
    pub ancestors: Vec<usize>,
    pub resampled: bool,
    /// Particles killed by a zero joint density this step.
    pub degenerate: usize,
}

pub(crate) fn should_resample(weights: &[f64], threshold: f64) -> bool {
    threshold >= 1.0 || ess(weights) < threshold * weights.len() as f64
}

/// Advances the filter by one observation. The returned trace hands the
/// smoothing stage the pre-resampling system at `t - 1`; the new particles'
/// `t_stat` are zeroed and must be filled by a smoother.
#[allow(clippy::too_many_arguments)]
pub fn rbpf_step<M: ModelSpec, Q: Proposal<M>>(
    system: &mut ParticleSystem,
    y: &[f64],
    theta: &Theta<M::Params>,
    model: &M,
    proposal: &Q,
    resample_threshold: f64,
    seed: u64,
    layout: &StatLayout,
) -> Result<StepTrace> {
    let t = system.time + 1;
    let n = system.len();
    let weights = system.weights();
    let resampled = should_resample(&weights, resample_threshold);
    let ancestors = if resampled {
        let u: f64 = substream(seed, t as u64, RESAMPLE_SLOT).random();
        systematic_indices(&weights, u)
    } else {
        (0..n).collect()
    };
    let uniform = -(n as f64).ln();

    let prev = std::mem::take(&mut system.particles);
    let mut degenerate = 0;
    let mut particles = Vec::with_capacity(n);
    for (i, &a) in ancestors.iter().enumerate() {
        let parent = &prev[a];
        let mut rng = substream(seed, t as u64, i as u64);
        let alpha_pred = predict_mode_probs(&parent.alpha, &theta.tpm);
        let x = proposal.sample(model, t, &parent.x, &alpha_pred, y, theta, &mut rng);
        let log_q = proposal.log_density(model, t, &x, &parent.x, &alpha_pred, y, theta);
        let log_gamma = gamma_table(model, t, &x, &parent.x, y, &alpha_pred, theta);
        let log_w_prev = if resampled { uniform } else { parent.log_w };
        let (alpha, log_w) = match update_mode_probs(&log_gamma) {
            Ok(alpha) => (alpha, weight_update(log_w_prev, &log_gamma, log_q)),
            Err(DegenerateParticle) => {
                degenerate += 1;
                (alpha_pred, f64::NEG_INFINITY)
            }
        };
        particles.push(Particle {
            x_prev: parent.x.clone(),
            x,
            log_w,
            alpha,
            t_stat: IntermediateStat::zeros(layout),
        });
    }

    let mut log_w: Vec<f64> = particles.iter().map(|p| p.log_w).collect();
    let normalizer = normalize_log_weights(&mut log_w);
    if !normalizer.is_finite() {
        system.particles = prev;
        return Err(Error::FilterCollapse {
            t,
            diagnostics: format!("{degenerate} of {n} particles degenerate, log normalizer {normalizer}"),
        });
    }
    for (p, w) in particles.iter_mut().zip(log_w) {
        p.log_w = w;
    }
    system.particles = particles;
    system.time = t;
    system.last_resampled = resampled;
    Ok(StepTrace { prev, ancestors, resampled, degenerate })
}

/// Point estimates from a filtered system.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub state_mean: Vec<f64>,
    pub mode_marginal: Vec<f64>,
    pub map_mode: ModeId,
}

/// Weighted state mean, weighted mode marginal, and its argmax (ties go to
/// the lowest mode).
pub fn estimate(system: &ParticleSystem) -> Estimate {
    let dx = system.particles[0].x.len();
    let k_modes = system.particles[0].alpha.len();
    let mut state_mean = vec![0.0; dx];
    let mut mode_marginal = vec![0.0; k_modes];
    for p in &system.particles {
        let w = p.log_w.exp();
        for (m, x) in state_mean.iter_mut().zip(&p.x) {
            *m += w * x;
        }
        for (m, a) in mode_marginal.iter_mut().zip(&p.alpha) {
            *m += w * a;
        }
    }
    let map_mode = ModeId::from_index(argmax_lowest(&mode_marginal));
    Estimate { state_mean, mode_marginal, map_mode }
}

pub(crate) fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tpm(rows: &[[f64; 2]; 2]) -> TransitionMatrix {
        TransitionMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn predict_examples() {
        let p = predict_mode_probs(&[1.0, 0.0], &tpm(&[[0.95, 0.05], [0.8, 0.2]]));
        assert_eq!(p, vec![0.95, 0.05]);
        let alpha = [0.3, 0.7];
        assert_eq!(predict_mode_probs(&alpha, &TransitionMatrix::identity(2)), alpha.to_vec());
        let p = predict_mode_probs(&alpha, &tpm(&[[0.6, 0.4], [0.85, 0.15]]));
        assert!((p[0] - 0.775).abs() < 1e-15 && (p[1] - 0.225).abs() < 1e-15);
    }

    #[test]
    fn update_mode_probs_examples() {
        assert_eq!(update_mode_probs(&[-3.7, -3.7]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(update_mode_probs(&[f64::NEG_INFINITY, 2.0]).unwrap(), vec![0.0, 1.0]);
        let p = update_mode_probs(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert_eq!(update_mode_probs(&[f64::NEG_INFINITY; 2]), Err(DegenerateParticle));
    }

    #[test]
    fn weight_update_kills_degenerate() {
        assert_eq!(weight_update(0.0, &[f64::NEG_INFINITY; 2], 0.0), f64::NEG_INFINITY);
        assert!((weight_update(-1.0, &[0.0, 0.0], 0.5) - (-1.0 + 2f64.ln() - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.25; 4]) - 4.0).abs() < 1e-12);
        assert_eq!(ess(&[1.0, 0.0, 0.0]), 1.0);
        assert!((ess(&[0.5, 0.25, 0.25]) - 1.0 / 0.375).abs() < 1e-12);
    }

    #[test]
    fn systematic_examples() {
        assert_eq!(systematic_indices(&[0.25; 4], 0.5), vec![0, 1, 2, 3]);
        assert_eq!(systematic_indices(&[1.0, 0.0, 0.0], 0.9), vec![0, 0, 0]);
        assert_eq!(systematic_indices(&[0.0, 0.0, 1.0], 0.0), vec![2, 2, 2]);
        assert_eq!(systematic_indices(&[0.5, 0.5], 0.999_999), vec![0, 1]);
    }

    #[test]
    fn systematic_is_unbiased() {
        let w = [0.1, 0.35, 0.05, 0.3, 0.2];
        let n = w.len() as f64;
        let trials = 10_000;
        let mut counts = [0.0; 5];
        let mut sq = [0.0; 5];
        for trial in 0..trials {
            let u: f64 = substream(99, trial, 0).random();
            let mut c = [0.0; 5];
            for i in systematic_indices(&w, u) {
                c[i] += 1.0;
            }
            for i in 0..5 {
                counts[i] += c[i];
                sq[i] += c[i] * c[i];
            }
        }
        for i in 0..5 {
            let mean = counts[i] / trials as f64;
            let var = sq[i] / trials as f64 - mean * mean;
            let se = (var / trials as f64).sqrt().max(1e-3);
            assert!((mean - n * w[i]).abs() < 3.0 * se, "particle {i}: {mean} vs {}", n * w[i]);
        }
    }

    #[test]
    fn sample_index_skips_zero_mass() {
        let mut rng = substream(1, 1, 1);
        for _ in 0..1000 {
            assert_eq!(sample_index(&[1.0, 0.0], &mut rng), 0);
            assert_eq!(sample_index(&[0.0, 1.0], &mut rng), 1);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.3, 0.7]), 1);
    }
}
