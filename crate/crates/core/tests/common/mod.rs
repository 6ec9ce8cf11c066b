//! Independent reference computations shared by the integration tests and
//! the acceptance suite.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switchem::rbpf::Particle;
use switchem::smoothing::IntermediateStat;
use switchem::{
    FeasibilityConfig, GaussianChannel, GaussianModeParams, GaussianModel, LinearDynamics, ModelSpec, NoiseChannels,
    StatLayout, Theta, TransitionMatrix,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn log_npdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + var.ln() + (x - mean) * (x - mean) / var)
}

/// Scalar pure HMM: `x_t ~ N(0, 1)` independent of everything, `y_t ~ N(mu_r, var_r)`.
pub struct PureHmm {
    pub mus: Vec<f64>,
    pub vars: Vec<f64>,
    pub tpm: Vec<Vec<f64>>,
}

impl PureHmm {
    pub fn model(&self) -> (GaussianModel<LinearDynamics>, Theta<GaussianModeParams>) {
        let k = self.mus.len();
        let zero = || DMatrix::<f64>::zeros(1, 1);
        let dynamics = LinearDynamics::new((0..k).map(|_| (zero(), zero())).collect()).unwrap();
        let model = GaussianModel::new(dynamics, NoiseChannels::MEASUREMENT);
        let modes = (0..k).map(|i| GaussianModeParams::scalar(0.0, 1.0, self.mus[i], self.vars[i]).unwrap()).collect();
        (model, Theta::new(modes, TransitionMatrix::new(self.tpm.clone()).unwrap()).unwrap())
    }

    fn likelihoods(&self, y: f64) -> Vec<f64> {
        self.mus.iter().zip(&self.vars).map(|(m, v)| log_npdf(y, *m, *v).exp()).collect()
    }

    /// Filtered probabilities `P(r_t | y_{1:t})` for `t = 1..=n`.
    pub fn forward(&self, ys: &[f64], alpha0: &[f64]) -> Vec<Vec<f64>> {
        let k = self.mus.len();
        let mut alpha = alpha0.to_vec();
        let mut out = Vec::with_capacity(ys.len());
        for &y in ys {
            let g = self.likelihoods(y);
            let mut next: Vec<f64> = (0..k).map(|l| g[l] * (0..k).map(|j| alpha[j] * self.tpm[j][l]).sum::<f64>()).collect();
            let c: f64 = next.iter().sum();
            next.iter_mut().for_each(|v| *v /= c);
            out.push(next.clone());
            alpha = next;
        }
        out
    }

    /// Offline smoothed sums `sum_t E[s_t | y_{1:n}]` as a stacked vector
    /// `[pair counts (K^2); occupancies (K); per mode (sum P y, sum P y^2)]`.
    pub fn smoothed_functional(&self, ys: &[f64], alpha0: &[f64]) -> Vec<f64> {
        let k = self.mus.len();
        let n = ys.len();
        let mut alphas = vec![alpha0.to_vec()];
        let mut scale = Vec::with_capacity(n);
        for &y in ys {
            let g = self.likelihoods(y);
            let prev = alphas.last().unwrap();
            let mut next: Vec<f64> = (0..k).map(|l| g[l] * (0..k).map(|j| prev[j] * self.tpm[j][l]).sum::<f64>()).collect();
            let c: f64 = next.iter().sum();
            next.iter_mut().for_each(|v| *v /= c);
            alphas.push(next);
            scale.push(c);
        }
        let mut betas = vec![vec![1.0; k]; n + 1];
        for t in (1..n).rev() {
            let g = self.likelihoods(ys[t]);
            for j in 0..k {
                betas[t][j] = (0..k).map(|l| self.tpm[j][l] * g[l] * betas[t + 1][l]).sum::<f64>() / scale[t];
            }
        }
        let mut out = vec![0.0; k * k + k + 2 * k];
        for t in 1..=n {
            let y = ys[t - 1];
            let g = self.likelihoods(y);
            for j in 0..k {
                for l in 0..k {
                    let xi = alphas[t - 1][j] * self.tpm[j][l] * g[l] * betas[t][l] / scale[t - 1];
                    out[j * k + l] += xi;
                    out[k * k + l] += xi;
                    out[k * k + k + 2 * l] += xi * y;
                    out[k * k + k + 2 * l + 1] += xi * y * y;
                }
            }
        }
        out
    }
}

/// Stacked statistic for `(x_prev, k) -> (x_next, l)` built from the model's
/// plain `suffstat`.
pub fn stacked<M: ModelSpec>(model: &M, k: usize, l: usize, t: usize, y: &[f64], x_next: &[f64], x_prev: &[f64]) -> Vec<f64> {
    let kk = model.num_modes();
    let dims: Vec<usize> = (0..kk).map(|m| model.suffstat_dim(m)).collect();
    let total = kk * kk + kk + dims.iter().sum::<usize>();
    let mut out = vec![0.0; total];
    out[k * kk + l] = 1.0;
    out[kk * kk + l] = 1.0;
    let off = kk * kk + kk + dims[..l].iter().sum::<usize>();
    model.suffstat(l, t, y, x_next, x_prev, &mut out[off..off + dims[l]]);
    out
}

/// Forward-smoothing rows by direct double enumeration over `(j, k)`.
#[allow(clippy::too_many_arguments)]
pub fn brute_fs<M: ModelSpec>(
    model: &M,
    theta: &Theta<M::Params>,
    prev: &[Particle],
    new_x: &[Vec<f64>],
    y: &[f64],
    t: usize,
    gamma: f64,
) -> Vec<Vec<Vec<f64>>> {
    let kk = model.num_modes();
    new_x
        .iter()
        .map(|xi| {
            (0..kk)
                .map(|l| {
                    let mut terms = Vec::new();
                    for pj in prev {
                        let f = model.log_trans_density(l, t, xi, &pj.x, &theta.modes[l]).exp();
                        for k in 0..kk {
                            let w = f * theta.tpm.get(k, l) * pj.alpha[k] * pj.log_w.exp();
                            let s = stacked(model, k, l, t, y, xi, &pj.x);
                            let row: Vec<f64> =
                                pj.t_stat.row(k).iter().zip(&s).map(|(a, b)| (1.0 - gamma) * a + gamma * b).collect();
                            terms.push((w, row));
                        }
                    }
                    let total: f64 = terms.iter().map(|(w, _)| w).sum();
                    let mut row = vec![0.0; terms[0].1.len()];
                    for (w, r) in &terms {
                        for (o, v) in row.iter_mut().zip(r) {
                            *o += w / total * v;
                        }
                    }
                    row
                })
                .collect()
        })
        .collect()
}

/// Path-based rows following `ancestors`.
#[allow(clippy::too_many_arguments)]
pub fn brute_path<M: ModelSpec>(
    model: &M,
    theta: &Theta<M::Params>,
    prev: &[Particle],
    ancestors: &[usize],
    new_x: &[Vec<f64>],
    y: &[f64],
    t: usize,
    gamma: f64,
) -> Vec<Vec<Vec<f64>>> {
    let kk = model.num_modes();
    new_x
        .iter()
        .zip(ancestors)
        .map(|(xi, &a)| {
            let pa = &prev[a];
            (0..kk)
                .map(|l| {
                    let w: Vec<f64> = (0..kk).map(|k| theta.tpm.get(k, l) * pa.alpha[k]).collect();
                    let total: f64 = w.iter().sum();
                    let mut row = vec![0.0; pa.t_stat.dim()];
                    for (k, wk) in w.iter().enumerate() {
                        let s = stacked(model, k, l, t, y, xi, &pa.x);
                        for ((o, a), b) in row.iter_mut().zip(pa.t_stat.row(k)).zip(&s) {
                            *o += wk / total * ((1.0 - gamma) * a + gamma * b);
                        }
                    }
                    row
                })
                .collect()
        })
        .collect()
}

/// Random point on the simplex, sometimes with an exact zero.
pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
    if k > 1 && rng.random::<f64>() < 0.2 {
        let z = rng.random_range(0..k);
        v[z] = 0.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let l = DMatrix::from_fn(d, d, |i, j| if j <= i { rng.random_range(-0.6..0.6) } else { 0.0 });
    &l * l.transpose() + DMatrix::identity(d, d) * 0.5
}

/// A random small smoothing problem.
pub struct SmoothingInstance {
    pub model: GaussianModel<LinearDynamics>,
    pub theta: Theta<GaussianModeParams>,
    pub layout: StatLayout,
    pub prev: Vec<Particle>,
    pub new_x: Vec<Vec<f64>>,
    pub ancestors: Vec<usize>,
    pub y: Vec<f64>,
    pub t: usize,
    pub gamma: f64,
}

impl SmoothingInstance {
    pub fn random(rng: &mut ChaCha8Rng, k: usize, max_particles: usize) -> Self {
        let dx = rng.random_range(1..=2);
        let dy = rng.random_range(1..=2);
        let channels = if rng.random::<bool>() { NoiseChannels::ALL } else { NoiseChannels::MEASUREMENT };
        let maps = (0..k)
            .map(|_| {
                (
                    DMatrix::from_fn(dx, dx, |_, _| rng.random_range(-0.9..0.9)),
                    DMatrix::from_fn(dy, dx, |_, _| rng.random_range(-1.0..1.0)),
                )
            })
            .collect();
        let model = GaussianModel::new(LinearDynamics::new(maps).unwrap(), channels);
        let modes = (0..k)
            .map(|_| {
                let mv: Vec<f64> = (0..dx).map(|_| rng.random_range(-0.5..0.5)).collect();
                let me: Vec<f64> = (0..dy).map(|_| rng.random_range(-0.5..0.5)).collect();
                GaussianModeParams::new(
                    GaussianChannel::new(mv, random_spd(rng, dx)).unwrap(),
                    GaussianChannel::new(me, random_spd(rng, dy)).unwrap(),
                )
            })
            .collect();
        let tpm = TransitionMatrix::new((0..k).map(|_| random_simplex_dense(rng, k)).collect()).unwrap();
        let theta = Theta::new(modes, tpm).unwrap();
        let layout = StatLayout::for_model(&model);
        let n = rng.random_range(1..=max_particles);
        let mut log_w: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..0.0)).collect();
        let lse = log_w.iter().map(|v| v.exp()).sum::<f64>().ln();
        log_w.iter_mut().for_each(|v| *v -= lse);
        let prev = (0..n)
            .map(|j| {
                let rows = (0..k).map(|_| (0..layout.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                Particle {
                    x: (0..dx).map(|_| rng.random_range(-1.5..1.5)).collect(),
                    x_prev: vec![0.0; dx],
                    log_w: log_w[j],
                    alpha: random_simplex(rng, k),
                    t_stat: IntermediateStat::from_rows(rows),
                }
            })
            .collect();
        let new_x = (0..n).map(|_| (0..dx).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let ancestors = (0..n).map(|_| rng.random_range(0..n)).collect();
        let y = (0..dy).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gamma = rng.random_range(0.05..1.0);
        let t = rng.random_range(1..50);
        Self { model, theta, layout, prev, new_x, ancestors, y, t, gamma }
    }

    /// Fresh particles at `new_x` with empty statistics.
    pub fn new_particles(&self) -> Vec<Particle> {
        self.new_x
            .iter()
            .map(|x| Particle {
                x: x.clone(),
                x_prev: vec![0.0; x.len()],
                log_w: 0.0,
                alpha: vec![1.0 / self.layout.num_modes() as f64; self.layout.num_modes()],
                t_stat: IntermediateStat::zeros(&self.layout),
            })
            .collect()
    }
}

fn random_simplex_dense(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

pub fn max_abs_diff(a: &[Vec<Vec<f64>>], b: &[Particle]) -> f64 {
    let mut worst = 0.0f64;
    for (rows, p) in a.iter().zip(b) {
        for (l, row) in rows.iter().enumerate() {
            for (x, y) in row.iter().zip(p.t_stat.row(l)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

/// Weighted scalar Gaussian MLE by Newton's method on `(mu, log var)`,
/// working from the raw samples.
pub fn newton_gaussian_mle(samples: &[f64], weights: &[f64]) -> (f64, f64) {
    let w_sum: f64 = weights.iter().sum();
    let mut mu = samples.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / w_sum + 0.3;
    let mut s = 0.0f64;
    let loglik = |mu: f64, s: f64| -> f64 {
        samples.iter().zip(weights).map(|(x, w)| w * log_npdf(*x, mu, s.exp())).sum()
    };
    for _ in 0..200 {
        let var = s.exp();
        let mut g_mu = 0.0;
        let mut g_s = 0.0;
        let mut h_mm = 0.0;
        let mut h_ms = 0.0;
        let mut h_ss = 0.0;
        for (x, w) in samples.iter().zip(weights) {
            let r = x - mu;
            g_mu += w * r / var;
            g_s += w * (-0.5 + r * r / (2.0 * var));
            h_mm -= w / var;
            h_ms -= w * r / var;
            h_ss -= w * r * r / (2.0 * var);
        }
        let det = h_mm * h_ss - h_ms * h_ms;
        let (mut d_mu, mut d_s) = if det > 0.0 && h_mm < 0.0 {
            (-(h_ss * g_mu - h_ms * g_s) / det, -(-h_ms * g_mu + h_mm * g_s) / det)
        } else {
            (g_mu * 0.1, g_s * 0.1)
        };
        let base = loglik(mu, s);
        let mut step = 1.0;
        while loglik(mu + step * d_mu, s + step * d_s) < base && step > 1e-12 {
            step *= 0.5;
        }
        d_mu *= step;
        d_s *= step;
        mu += d_mu;
        s += d_s;
        if d_mu.abs() < 1e-15 && d_s.abs() < 1e-15 {
            break;
        }
    }
    (mu, s.exp())
}

pub fn default_feasibility() -> FeasibilityConfig {
    FeasibilityConfig::default()
}
