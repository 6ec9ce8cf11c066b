//! Baseline particle filters that sample the mode as part of the particle.
//!
//! These share resampling, step sizes, the M-step and record formats with
//! the Rao-Blackwellized path so that comparisons isolate the effect of
//! marginalizing the mode.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{ModeId, ModelSpec, StatLayout, SuffStats, Theta};
use crate::numerics::normalize_log_weights;
use crate::rbpf::{argmax_lowest, sample_index, should_resample, systematic_indices, Estimate};
use crate::rng::{substream, RESAMPLE_SLOT};
use crate::smoothing::SmoothingReport;

/// Particle over the joint state `(r_t, x_t)`.
#[derive(Clone, Debug)]
pub struct JointParticle {
    pub x: Vec<f64>,
    pub x_prev: Vec<f64>,
    pub r: ModeId,
    pub log_w: f64,
    /// Single stacked statistic of length `D`; the mode is sampled, so there
    /// is one row instead of `K`.
    pub t_stat: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct JointSystem {
    pub particles: Vec<JointParticle>,
    pub time: usize,
    pub last_resampled: bool,
}

impl JointSystem {
    /// Uniformly weighted system at `t = 0`; `modes[i]` is the initial mode of particle `i`.
    pub fn new(states: Vec<Vec<f64>>, modes: Vec<ModeId>, layout: &StatLayout) -> Result<Self> {
        if states.is_empty() || states.len() != modes.len() {
            return Err(Error::Config("joint system needs one mode per particle and at least one particle".into()));
        }
        let log_w = -(states.len() as f64).ln();
        let particles = states
            .into_iter()
            .zip(modes)
            .map(|(x, r)| JointParticle { x_prev: x.clone(), x, r, log_w, t_stat: vec![0.0; layout.dim()] })
            .collect();
        Ok(Self { particles, time: 0, last_resampled: false })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_w.exp()).collect()
    }
}

#[derive(Debug)]
pub struct JointTrace {
    pub prev: Vec<JointParticle>,
    pub ancestors: Vec<usize>,
    pub resampled: bool,
}

/// Bootstrap step: `r ~ Pi(. | r_prev)`, `x ~ f_r(. | x_prev)`, weight
/// multiplied by `g_r(y | x)`.
pub fn pf_step<M: ModelSpec>(
    system: &mut JointSystem,
    y: &[f64],
    theta: &Theta<M::Params>,
    model: &M,
    resample_threshold: f64,
    seed: u64,
) -> Result<JointTrace> {
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
    let dim = prev[0].t_stat.len();
    let mut particles = Vec::with_capacity(n);
    for (i, &a) in ancestors.iter().enumerate() {
        let parent = &prev[a];
        let mut rng = substream(seed, t as u64, i as u64);
        let r = sample_index(theta.tpm.row(parent.r.index()), &mut rng);
        let mut x = vec![0.0; model.state_dim()];
        model.sample_transition(r, t, &parent.x, &theta.modes[r], &mut rng, &mut x);
        let log_g = model.log_meas_density(r, t, y, &x, &theta.modes[r]);
        let log_w_prev = if resampled { uniform } else { parent.log_w };
        let log_w = if log_g.is_nan() { f64::NEG_INFINITY } else { log_w_prev + log_g };
        particles.push(JointParticle {
            x_prev: parent.x.clone(),
            x,
            r: ModeId::from_index(r),
            log_w,
            t_stat: vec![0.0; dim],
        });
    }
    let mut log_w: Vec<f64> = particles.iter().map(|p| p.log_w).collect();
    let normalizer = normalize_log_weights(&mut log_w);
    if !normalizer.is_finite() {
        system.particles = prev;
        return Err(Error::FilterCollapse { t, diagnostics: format!("all {n} joint particles have zero weight") });
    }
    for (p, w) in particles.iter_mut().zip(log_w) {
        p.log_w = w;
    }
    system.particles = particles;
    system.time = t;
    system.last_resampled = resampled;
    Ok(JointTrace { prev, ancestors, resampled })
}

/// Adds `weight * s_t` given the mode-`l_next` statistic already in `scratch`.
fn add_transition_stat(layout: &StatLayout, weight: f64, k_prev: usize, l_next: usize, scratch: &[f64], out: &mut [f64]) {
    out[layout.s1_index(k_prev, l_next)] += weight;
    out[layout.s2_index(l_next)] += weight;
    for idx in layout.s3_range(l_next) {
        out[idx] += weight * scratch[idx];
    }
}

/// `T^i = (1 - gamma) T~^{a(i)} + gamma s_t(xi~^{a(i)}, xi^i)`.
#[allow(clippy::too_many_arguments)]
pub fn pf_path_update<M: ModelSpec>(
    prev: &[JointParticle],
    ancestors: &[usize],
    new: &mut [JointParticle],
    y: &[f64],
    t: usize,
    gamma: f64,
    model: &M,
    layout: &StatLayout,
) -> SmoothingReport {
    let mut scratch = vec![0.0; layout.dim()];
    for (p, &a) in new.iter_mut().zip(ancestors) {
        let parent = &prev[a];
        let l = p.r.index();
        let mut row: Vec<f64> = parent.t_stat.iter().map(|v| (1.0 - gamma) * v).collect();
        model.suffstat(l, t, y, &p.x, &parent.x, &mut scratch[layout.s3_range(l)]);
        add_transition_stat(layout, gamma, parent.r.index(), l, &scratch, &mut row);
        p.t_stat = row;
    }
    SmoothingReport::default()
}

/// Forward-smoothing update with backward weights
/// `f_{r^i}(x^i | x^j) pi_{r^j r^i} w^j` over the pre-resampling system.
#[allow(clippy::too_many_arguments)]
pub fn pf_fs_update<M: ModelSpec>(
    prev: &[JointParticle],
    new: &mut [JointParticle],
    y: &[f64],
    t: usize,
    theta: &Theta<M::Params>,
    gamma: f64,
    model: &M,
    layout: &StatLayout,
) -> SmoothingReport {
    let k_modes = layout.num_modes();
    let dim = layout.dim();
    let dx = model.state_dim();
    let n_prev = prev.len();
    let keep = 1.0 - gamma;

    let mut anchors = vec![0.0; k_modes * n_prev * dx];
    for l in 0..k_modes {
        for (j, p) in prev.iter().enumerate() {
            let off = (l * n_prev + j) * dx;
            model.transition_anchor(l, t, &p.x, &theta.modes[l], &mut anchors[off..off + dx]);
        }
    }
    let mut fallback = vec![0.0; dim];
    for p in prev {
        let w = p.log_w.exp();
        for (f, v) in fallback.iter_mut().zip(&p.t_stat) {
            *f += w * v;
        }
    }

    let mut report = SmoothingReport::default();
    let mut log_bw = vec![0.0; n_prev];
    let mut scratch = vec![0.0; dim];
    let mut pair_mass = vec![0.0; k_modes];
    for p in new.iter_mut() {
        let l = p.r.index();
        let p_l = &theta.modes[l];
        let mut max = f64::NEG_INFINITY;
        for (j, pj) in prev.iter().enumerate() {
            let pi = theta.tpm.get(pj.r.index(), l);
            let v = if pi == 0.0 {
                f64::NEG_INFINITY
            } else {
                let off = (l * n_prev + j) * dx;
                model.log_trans_density_anchored(l, t, &p.x, &anchors[off..off + dx], p_l) + pi.ln() + pj.log_w
            };
            let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
            log_bw[j] = v;
            max = max.max(v);
        }
        let mut row = vec![0.0; dim];
        if max == f64::NEG_INFINITY {
            report.unreachable_rows += 1;
            for (r, f) in row.iter_mut().zip(&fallback) {
                *r = keep * f;
            }
            p.t_stat = row;
            continue;
        }
        let uses_prev = model.suffstat_uses_prev(l);
        let s3_range = layout.s3_range(l);
        pair_mass.iter_mut().for_each(|m| *m = 0.0);
        let mut total = 0.0;
        for (j, pj) in prev.iter().enumerate() {
            let w = (log_bw[j] - max).exp();
            if w == 0.0 {
                continue;
            }
            total += w;
            pair_mass[pj.r.index()] += w;
            if keep != 0.0 {
                for (r, v) in row.iter_mut().zip(&pj.t_stat) {
                    *r += w * keep * v;
                }
            }
            if uses_prev {
                let off = (l * n_prev + j) * dx;
                model.suffstat_anchored(l, t, y, &p.x, &anchors[off..off + dx], &mut scratch[s3_range.clone()]);
                for idx in s3_range.clone() {
                    row[idx] += w * gamma * scratch[idx];
                }
            }
        }
        for r in row.iter_mut() {
            *r /= total;
        }
        for (k, m) in pair_mass.iter().enumerate() {
            row[layout.s1_index(k, l)] += gamma * m / total;
        }
        row[layout.s2_index(l)] += gamma;
        if !uses_prev {
            let anchor = &anchors[l * n_prev * dx..(l * n_prev + 1) * dx];
            model.suffstat_anchored(l, t, y, &p.x, anchor, &mut scratch[s3_range.clone()]);
            for idx in s3_range {
                row[idx] += gamma * scratch[idx];
            }
        }
        p.t_stat = row;
    }
    report
}

/// `sum_i w^i T^i`.
pub fn aggregate_joint(system: &JointSystem, layout: &StatLayout) -> SuffStats {
    let mut out = vec![0.0; layout.dim()];
    for p in &system.particles {
        let w = p.log_w.exp();
        for (o, v) in out.iter_mut().zip(&p.t_stat) {
            *o += w * v;
        }
    }
    layout.unstack(&out)
}

/// Weighted state mean and weighted mode histogram.
pub fn estimate_joint(system: &JointSystem, num_modes: usize) -> Estimate {
    let dx = system.particles[0].x.len();
    let mut state_mean = vec![0.0; dx];
    let mut mode_marginal = vec![0.0; num_modes];
    for p in &system.particles {
        let w = p.log_w.exp();
        for (m, x) in state_mean.iter_mut().zip(&p.x) {
            *m += w * x;
        }
        mode_marginal[p.r.index()] += w;
    }
    let map_mode = ModeId::from_index(argmax_lowest(&mode_marginal));
    Estimate { state_mean, mode_marginal, map_mode }
}
