//! Forward-only smoothing of the complete-data sufficient statistic.
//!
//! Each particle keeps one row per mode, `T(x_t^i, r_t = l)`, approximating
//! the expected accumulated statistic given the particle's state and mode.
//! Two backward-kernel approximations update the rows:
//!
//! * [`fs_update`] weighs every previous particle as a possible ancestor,
//!   `O(K^2 N^2 D)` per step;
//! * [`path_update`] only follows the actual ancestor, `O(K^2 N D)`.
//!
//! [`aggregate`] then averages the rows under the filter weights and mode
//! probabilities to give the smoothed statistic used by the M-step.

use serde::Serialize;

use crate::model::{ModelSpec, StatLayout, SuffStats, Theta};
use crate::rbpf::{Particle, ParticleSystem};

/// `K` rows of length `D`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct IntermediateStat {
    modes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl IntermediateStat {
    pub fn zeros(layout: &StatLayout) -> Self {
        Self {
            modes: layout.num_modes(),
            dim: layout.dim(),
            data: vec![0.0; layout.num_modes() * layout.dim()],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let modes = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == dim), "ragged intermediate statistic");
        Self { modes, dim, data: rows.concat() }
    }

    pub fn num_modes(&self) -> usize {
        self.modes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, l: usize) -> &[f64] {
        &self.data[l * self.dim..(l + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.data[l * self.dim..(l + 1) * self.dim]
    }
}

/// Counters reported by a smoothing update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SmoothingReport {
    /// Rows `(i, l)` whose backward weights summed to zero.
    pub unreachable_rows: usize,
}

/// Stacked statistic `s_t` for the joint transition
/// `(x_prev, r_{t-1} = k_prev) -> (x_next, r_t = l_next)`.
#[allow(clippy::too_many_arguments)]
pub fn stack_stat<M: ModelSpec>(
    model: &M,
    layout: &StatLayout,
    k_prev: usize,
    l_next: usize,
    t: usize,
    y: &[f64],
    x_next: &[f64],
    x_prev: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; layout.dim()];
    out[layout.s1_index(k_prev, l_next)] = 1.0;
    out[layout.s2_index(l_next)] = 1.0;
    model.suffstat(l_next, t, y, x_next, x_prev, &mut out[layout.s3_range(l_next)]);
    out
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `sum_l alpha(l) T(l)` of one particle, scaled by `scale`, added into `out`.
fn add_alpha_mixture(p: &Particle, scale: f64, out: &mut [f64]) {
    for (l, a) in p.alpha.iter().enumerate() {
        if *a != 0.0 {
            axpy(scale * a, p.t_stat.row(l), out);
        }
    }
}

/// Forward-smoothing update over the full previous particle system.
///
/// `prev` must be the weighted (pre-resampling) system at `t - 1`. For each
/// new particle `i` and mode `l`, the backward weights are
/// `f_l(x^i | x^j) pi_{kl} alpha^j(k) w^j`, normalized over `(j, k)`.
/// A row with no reachable ancestor falls back to
/// `(1 - gamma) sum_j w^j sum_k alpha^j(k) T^j(k)`.
#[allow(clippy::too_many_arguments)]
pub fn fs_update<M: ModelSpec>(
    prev: &[Particle],
    new: &mut [Particle],
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

    // anchors[(l * n_prev + j) * dx ..] holds the mode-l anchor of x^j.
    let mut anchors = vec![0.0; k_modes * n_prev * dx];
    for l in 0..k_modes {
        for (j, p) in prev.iter().enumerate() {
            let off = (l * n_prev + j) * dx;
            model.transition_anchor(l, t, &p.x, &theta.modes[l], &mut anchors[off..off + dx]);
        }
    }

    // mixed[(l * n_prev + j) * dim ..] = sum_k pi_{kl} alpha^j(k) T^j(k), with
    // mass[l * n_prev + j] its total weight and pair[(l * n_prev + j) * K + k]
    // the individual terms.
    let mut mixed = vec![0.0; k_modes * n_prev * dim];
    let mut mass = vec![0.0; k_modes * n_prev];
    let mut pair = vec![0.0; k_modes * n_prev * k_modes];
    for l in 0..k_modes {
        for (j, p) in prev.iter().enumerate() {
            let idx = l * n_prev + j;
            for k in 0..k_modes {
                let w = theta.tpm.get(k, l) * p.alpha[k];
                if w == 0.0 {
                    continue;
                }
                pair[idx * k_modes + k] = w;
                mass[idx] += w;
                if keep != 0.0 {
                    axpy(w, p.t_stat.row(k), &mut mixed[idx * dim..(idx + 1) * dim]);
                }
            }
        }
    }

    let mut fallback = vec![0.0; dim];
    for p in prev {
        add_alpha_mixture(p, p.log_w.exp(), &mut fallback);
    }

    let mut report = SmoothingReport::default();
    let mut log_bw = vec![0.0; n_prev];
    let mut pair_mass = vec![0.0; k_modes];
    let mut s3_buf = vec![0.0; dim];
    let mut s3_acc = vec![0.0; dim];
    for particle in new.iter_mut() {
        let mut t_stat = IntermediateStat::zeros(layout);
        for l in 0..k_modes {
            let s3_range = layout.s3_range(l);
            let p_l = &theta.modes[l];
            let mut max = f64::NEG_INFINITY;
            for (j, pj) in prev.iter().enumerate() {
                let off = (l * n_prev + j) * dx;
                let v = model.log_trans_density_anchored(l, t, &particle.x, &anchors[off..off + dx], p_l) + pj.log_w;
                let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
                log_bw[j] = v;
                max = max.max(v);
            }

            let row = t_stat.row_mut(l);
            if max == f64::NEG_INFINITY {
                report.unreachable_rows += 1;
                axpy(keep, &fallback, row);
                continue;
            }

            let uses_prev = model.suffstat_uses_prev(l);
            pair_mass.iter_mut().for_each(|m| *m = 0.0);
            s3_acc[s3_range.clone()].iter_mut().for_each(|v| *v = 0.0);
            let mut total = 0.0;
            for j in 0..n_prev {
                let e = (log_bw[j] - max).exp();
                if e == 0.0 {
                    continue;
                }
                let idx = l * n_prev + j;
                if mass[idx] == 0.0 {
                    continue;
                }
                let mass_j = e * mass[idx];
                for (m, w) in pair_mass.iter_mut().zip(&pair[idx * k_modes..(idx + 1) * k_modes]) {
                    *m += e * w;
                }
                if keep != 0.0 {
                    axpy(e, &mixed[idx * dim..(idx + 1) * dim], row);
                }
                total += mass_j;
                if uses_prev {
                    let off = (l * n_prev + j) * dx;
                    model.suffstat_anchored(l, t, y, &particle.x, &anchors[off..off + dx], &mut s3_buf[s3_range.clone()]);
                    for idx in s3_range.clone() {
                        s3_acc[idx] += mass_j * s3_buf[idx];
                    }
                }
            }

            if !(total > 0.0) {
                report.unreachable_rows += 1;
                row.iter_mut().for_each(|v| *v = 0.0);
                axpy(keep, &fallback, row);
                continue;
            }

            let scale = keep / total;
            row.iter_mut().for_each(|v| *v *= scale);
            for k in 0..k_modes {
                row[layout.s1_index(k, l)] += gamma * pair_mass[k] / total;
            }
            row[layout.s2_index(l)] += gamma;
            if uses_prev {
                for idx in s3_range {
                    row[idx] += gamma * s3_acc[idx] / total;
                }
            } else {
                // Any anchor works when the statistic ignores x_prev.
                let anchor = &anchors[l * n_prev * dx..(l * n_prev + 1) * dx];
                model.suffstat_anchored(l, t, y, &particle.x, anchor, &mut s3_buf[s3_range.clone()]);
                for idx in s3_range {
                    row[idx] += gamma * s3_buf[idx];
                }
            }
        }
        particle.t_stat = t_stat;
    }
    report
}

/// Path-based update following each particle's actual ancestor
/// `prev[ancestors[i]]`. The transition density factors cancel, leaving
/// weights `pi_{kl} alpha~(k)` over the ancestor's modes.
#[allow(clippy::too_many_arguments)]
pub fn path_update<M: ModelSpec>(
    prev: &[Particle],
    ancestors: &[usize],
    new: &mut [Particle],
    y: &[f64],
    t: usize,
    theta: &Theta<M::Params>,
    gamma: f64,
    model: &M,
    layout: &StatLayout,
) -> SmoothingReport {
    let k_modes = layout.num_modes();
    let dim = layout.dim();
    let keep = 1.0 - gamma;
    let mut report = SmoothingReport::default();
    let mut weights = vec![0.0; k_modes];
    let mut s3_buf = vec![0.0; dim];
    for (particle, &a) in new.iter_mut().zip(ancestors) {
        let parent = &prev[a];
        let mut t_stat = IntermediateStat::zeros(layout);
        for l in 0..k_modes {
            let row = t_stat.row_mut(l);
            let mut total = 0.0;
            for k in 0..k_modes {
                weights[k] = theta.tpm.get(k, l) * parent.alpha[k];
                total += weights[k];
            }
            if !(total > 0.0) {
                report.unreachable_rows += 1;
                add_alpha_mixture(parent, keep, row);
                continue;
            }
            for k in 0..k_modes {
                let w = weights[k] / total;
                if w == 0.0 {
                    continue;
                }
                if keep != 0.0 {
                    axpy(keep * w, parent.t_stat.row(k), row);
                }
                row[layout.s1_index(k, l)] += gamma * w;
            }
            row[layout.s2_index(l)] += gamma;
            let range = layout.s3_range(l);
            model.suffstat(l, t, y, &particle.x, &parent.x, &mut s3_buf[range.clone()]);
            for idx in range {
                row[idx] += gamma * s3_buf[idx];
            }
        }
        particle.t_stat = t_stat;
    }
    report
}

/// `sum_i sum_l w^i alpha^i(l) T^i(l)`, unstacked by the layout.
pub fn aggregate(system: &ParticleSystem, layout: &StatLayout) -> SuffStats {
    layout.unstack(&aggregate_flat(&system.particles, layout))
}

pub(crate) fn aggregate_flat(particles: &[Particle], layout: &StatLayout) -> Vec<f64> {
    let mut out = vec![0.0; layout.dim()];
    for p in particles {
        add_alpha_mixture(p, p.log_w.exp(), &mut out);
    }
    out
}
