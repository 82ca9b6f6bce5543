//! Synthetic regime-switching demonstrations with known ground truth.
//!
//! Each trajectory walks a Markov chain over regimes. Inside a regime the
//! state follows the stationary Gaussian process whose stacked-window
//! precision is block-Toeplitz; every new state is drawn from its conditional
//! given the previous `window - 1` states, so overlapping windows are
//! consistent. Gaps between timestamps are exponential with a per-regime rate
//! and actions come from a softmax policy tied to the regime.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::Real;
use crate::seeding::{derive_seed, rng_from_seed, streams, Rng};
use crate::trajdata::{default_feature_names, Dataset, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub regimes: usize,
    pub policies: usize,
    pub state_dim: usize,
    pub action_count: usize,
    pub window: usize,
    pub trajectories: usize,
    pub mean_length: usize,
    pub mean_segment_length: usize,
    pub timestamp_rate_per_regime: Vec<f64>,
    /// Distance between regime means in units of the average state std.
    pub mean_separation: f64,
    /// Probability that an off-diagonal precision entry is nonzero.
    pub sparsity: f64,
    /// Logit scale of the softmax policies.
    pub policy_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            regimes: 4,
            policies: 2,
            state_dim: 6,
            action_count: 2,
            window: 2,
            trajectories: 60,
            mean_length: 120,
            mean_segment_length: 30,
            timestamp_rate_per_regime: vec![1.0, 0.5, 2.0, 1.0],
            mean_separation: 2.0,
            sparsity: 0.4,
            policy_scale: 5.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Named presets: `default` (desk-scale benchmark) and `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "tiny" => Ok(GeneratorConfig {
                regimes: 2,
                policies: 2,
                state_dim: 3,
                trajectories: 12,
                mean_length: 40,
                mean_segment_length: 12,
                timestamp_rate_per_regime: vec![1.0, 0.5],
                mean_separation: 4.0,
                ..Self::default()
            }),
            other => Err(Error::arg(format!("unknown preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("regimes", self.regimes),
            ("policies", self.policies),
            ("state_dim", self.state_dim),
            ("action_count", self.action_count),
            ("window", self.window),
            ("trajectories", self.trajectories),
            ("mean_length", self.mean_length),
            ("mean_segment_length", self.mean_segment_length),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.policies > self.regimes {
            return Err(Error::Config("policies must not exceed regimes".into()));
        }
        if self.timestamp_rate_per_regime.len() != self.regimes
            || self.timestamp_rate_per_regime.iter().any(|&r| !(r > 0.0) || !r.is_finite())
        {
            return Err(Error::Config(
                "timestamp_rate_per_regime needs one positive rate per regime".into(),
            ));
        }
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return Err(Error::Config("sparsity must lie in (0, 1)".into()));
        }
        if !(self.mean_separation >= 0.0) || !(self.policy_scale >= 0.0) {
            return Err(Error::Config("mean_separation and policy_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Affine softmax policy `logits = W x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    /// `A × m`, row-major per action.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearPolicy {
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect();
        let mut p = vec![0.0; logits.len()];
        crate::scalar::softmax_into(&logits, &mut p);
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueSegment {
    pub start: usize,
    pub end: usize,
    pub regime: usize,
    pub policy: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GeneratorConfig,
    pub trajectory_ids: Vec<String>,
    pub regime_labels: Vec<Vec<usize>>,
    /// One entry per true segment, aligned with `segments`.
    pub policy_labels: Vec<Vec<usize>>,
    pub segments: Vec<Vec<TrueSegment>>,
    pub regime_to_policy: Vec<usize>,
    /// Per-state mean of each regime.
    pub regime_means: Vec<Vec<f64>>,
    pub true_precisions: Vec<Matrix<f64>>,
    pub true_policy_params: Vec<LinearPolicy>,
}

impl GroundTruth {
    /// Stacked-window mean of regime `k`.
    pub fn window_mean(&self, k: usize) -> Vec<f64> {
        self.regime_means[k].repeat(self.config.window)
    }

    /// Per-timestep policy label.
    pub fn step_policies(&self) -> Vec<Vec<usize>> {
        self.regime_labels
            .iter()
            .map(|l| l.iter().map(|&k| self.regime_to_policy[k]).collect())
            .collect()
    }

    /// Regime labels of each trajectory of `d`, matched by id.
    pub fn regimes_for<T: Real>(&self, d: &Dataset<T>) -> Result<Vec<Vec<usize>>> {
        d.trajectories
            .iter()
            .map(|tr| {
                let i = self
                    .trajectory_ids
                    .iter()
                    .position(|id| *id == tr.id)
                    .ok_or_else(|| Error::Consistency(format!("no ground truth for trajectory '{}'", tr.id)))?;
                if self.regime_labels[i].len() != tr.len() {
                    return Err(Error::Consistency(format!("ground truth length differs for '{}'", tr.id)));
                }
                Ok(self.regime_labels[i].clone())
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Random sparse symmetric positive-definite block-Toeplitz precision of size
/// `m * window`. Positive definiteness comes from strict diagonal dominance.
pub fn make_block_toeplitz_precision(m: usize, window: usize, sparsity: f64, seed: u64) -> Matrix<f64> {
    build_precision(m, window, sparsity, false, &mut rng_from_seed(seed))
}

fn build_precision(m: usize, window: usize, sparsity: f64, symmetric_lags: bool, rng: &mut Rng) -> Matrix<f64> {
    let mut draw = |scale: f64| -> f64 {
        if rng.random::<f64>() < sparsity {
            let mag = scale * (0.4 + 0.6 * rng.random::<f64>());
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        } else {
            0.0
        }
    };
    let mut blocks = Vec::with_capacity(window);
    let mut a0 = Matrix::zeros(m, m);
    for p in 0..m {
        for q in (p + 1)..m {
            let v = draw(0.5);
            a0[(p, q)] = v;
            a0[(q, p)] = v;
        }
    }
    blocks.push(a0);
    for lag in 1..window {
        let mut a = Matrix::from_fn(m, m, |_, _| draw(0.4 / lag as f64));
        if symmetric_lags {
            a.symmetrize();
        }
        blocks.push(a);
    }
    // Largest absolute off-diagonal row sum over every row carrying feature p.
    let full = crate::tglasso::from_blocks(&blocks).expect("A0 symmetric by construction");
    let d = m * window;
    let mut need = vec![0.0f64; m];
    for i in 0..d {
        let s: f64 = (0..d).filter(|&j| j != i).map(|j| full[(i, j)].abs()).sum();
        need[i % m] = need[i % m].max(s);
    }
    for (p, n) in need.iter().enumerate() {
        blocks[0][(p, p)] = n + 0.5 + 0.5 * rng.random::<f64>();
    }
    crate::tglasso::from_blocks(&blocks).expect("A0 symmetric by construction")
}

/// Precomputed conditional sampler for one regime.
struct RegimeSampler {
    mean: Vec<f64>,
    /// For `j` available past states: regression matrix `m × j·m` and the
    /// Cholesky factor of the conditional covariance.
    conditionals: Vec<(Matrix<f64>, Cholesky<f64>)>,
}

impl RegimeSampler {
    fn new(mean: Vec<f64>, covariance: &Matrix<f64>, m: usize, window: usize) -> Option<Self> {
        let mut conditionals = Vec::with_capacity(window);
        for j in 0..window {
            // Covariance of the last j+1 states of the window.
            let off = (window - 1 - j) * m;
            let size = (j + 1) * m;
            let sub = Matrix::from_fn(size, size, |a, b| covariance[(off + a, off + b)]);
            let past = j * m;
            let s_cc = Matrix::from_fn(m, m, |a, b| sub[(past + a, past + b)]);
            if j == 0 {
                conditionals.push((Matrix::zeros(m, 0), s_cc.cholesky()?));
                continue;
            }
            let s_pp = Matrix::from_fn(past, past, |a, b| sub[(a, b)]);
            let s_cp = Matrix::from_fn(m, past, |a, b| sub[(past + a, b)]);
            let pp = s_pp.cholesky()?;
            // B = S_cp S_pp^{-1}, row by row.
            let mut reg = Matrix::zeros(m, past);
            for r in 0..m {
                let row = pp.solve(s_cp.row(r));
                for c in 0..past {
                    reg[(r, c)] = row[c];
                }
            }
            let cond = s_cc.sub(&reg.matmul(&s_cp.transpose()));
            let mut cond = cond;
            cond.symmetrize();
            conditionals.push((reg, cond.cholesky()?));
        }
        Some(RegimeSampler { mean, conditionals })
    }

    fn sample(&self, history: &[Vec<f64>], rng: &mut Rng) -> Vec<f64> {
        let m = self.mean.len();
        let j = history.len().min(self.conditionals.len() - 1);
        let (reg, chol) = &self.conditionals[j];
        let mut mu = self.mean.clone();
        if j > 0 {
            let past: Vec<f64> = history[history.len() - j..]
                .iter()
                .flat_map(|s| s.iter().zip(&self.mean).map(|(x, m)| x - m))
                .collect();
            for (o, d) in mu.iter_mut().zip(reg.matvec(&past)) {
                *o += d;
            }
        }
        let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        mu.iter().zip(chol.lower_mul(&z)).map(|(a, b)| a + b).collect()
    }
}

struct Params {
    precisions: Vec<Matrix<f64>>,
    samplers: Vec<RegimeSampler>,
    means: Vec<Vec<f64>>,
    policies: Vec<LinearPolicy>,
    regime_to_policy: Vec<usize>,
}

fn build_params(cfg: &GeneratorConfig) -> Result<Params> {
    let m = cfg.state_dim;
    let w = cfg.window;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, streams::SYNTH_PARAMS, 0));
    let mut precisions = Vec::with_capacity(cfg.regimes);
    let mut covariances = Vec::with_capacity(cfg.regimes);
    for k in 0..cfg.regimes {
        let mut built = None;
        for attempt in 0..100u64 {
            let mut prng = rng_from_seed(derive_seed(cfg.seed, streams::SYNTH_PARAMS, 1000 + 100 * k as u64 + attempt));
            let theta = build_precision(m, w, cfg.sparsity, true, &mut prng);
            if let Some(ch) = theta.cholesky() {
                built = Some((theta, ch.inverse()));
                break;
            }
        }
        let (theta, cov) = built.ok_or_else(|| {
            Error::Construction(format!("regime {k}: no positive-definite precision after 100 attempts"))
        })?;
        precisions.push(theta);
        covariances.push(cov);
    }
    let avg_var: f64 = covariances
        .iter()
        .map(|c| (0..m).map(|i| c[(i, i)]).sum::<f64>() / m as f64)
        .sum::<f64>()
        / cfg.regimes as f64;
    let avg_std = avg_var.sqrt();
    let radius = cfg.mean_separation * avg_std / std::f64::consts::SQRT_2;
    let mut means = Vec::with_capacity(cfg.regimes);
    for _ in 0..cfg.regimes {
        let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        means.push(if cfg.regimes == 1 {
            vec![0.0; m]
        } else {
            z.iter().map(|x| radius * x / norm).collect()
        });
    }
    let regime_to_policy: Vec<usize> = (0..cfg.regimes).map(|k| k % cfg.policies).collect();
    // Decision directions are orthogonalised across policies (while G <= m)
    // so that different policies disagree on the same states.
    let scale = cfg.policy_scale / avg_std;
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(cfg.policies);
    for g in 0..cfg.policies {
        let mut d: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        if g < m {
            for prev in &directions {
                let dot: f64 = d.iter().zip(prev).map(|(a, b)| a * b).sum();
                d.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        directions.push(d.iter().map(|x| x / norm).collect());
    }
    let mut policies = Vec::with_capacity(cfg.policies);
    for (g, dir) in directions.iter().enumerate() {
        let members: Vec<usize> = (0..cfg.regimes).filter(|&k| regime_to_policy[k] == g).collect();
        let center: Vec<f64> = (0..m)
            .map(|i| members.iter().map(|&k| means[k][i]).sum::<f64>() / members.len() as f64)
            .collect();
        let half = (cfg.action_count as f64 - 1.0) / 2.0;
        let weights: Vec<Vec<f64>> = (0..cfg.action_count)
            .map(|a| dir.iter().map(|v| scale * (a as f64 - half) * v).collect())
            .collect();
        let bias = weights
            .iter()
            .map(|wa| -wa.iter().zip(&center).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        policies.push(LinearPolicy { weights, bias });
    }
    let samplers = (0..cfg.regimes)
        .map(|k| {
            RegimeSampler::new(means[k].clone(), &covariances[k], m, w)
                .ok_or_else(|| Error::Construction(format!("regime {k}: conditional covariance not PD")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Params {
        precisions,
        samplers,
        means,
        policies,
        regime_to_policy,
    })
}

struct GeneratedTrajectory {
    traj: Trajectory,
    regimes: Vec<usize>,
}

fn generate_one(cfg: &GeneratorConfig, params: &Params, n: usize) -> GeneratedTrajectory {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, streams::SYNTH_TRAJ, n as u64));
    let lo = (cfg.mean_length / 2).max(1);
    let hi = (cfg.mean_length * 3 / 2).max(lo);
    let len = rng.random_range(lo..=hi);
    let switch_prob = 1.0 / cfg.mean_segment_length as f64;
    let mut regime = rng.random_range(0..cfg.regimes);
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(len);
    let mut actions = Vec::with_capacity(len);
    let mut timestamps = Vec::with_capacity(len);
    let mut regimes = Vec::with_capacity(len);
    let mut clock = rng.random::<f64>();
    for t in 0..len {
        if t > 0 && cfg.regimes > 1 && rng.random::<f64>() < switch_prob {
            let mut next = rng.random_range(0..cfg.regimes - 1);
            if next >= regime {
                next += 1;
            }
            regime = next;
        }
        if t > 0 {
            let gap: f64 = Exp::new(cfg.timestamp_rate_per_regime[regime])
                .expect("validated rate")
                .sample(&mut rng);
            clock += gap.max(1e-6);
        }
        let hist_start = states.len().saturating_sub(cfg.window - 1);
        let x = params.samplers[regime].sample(&states[hist_start..], &mut rng);
        let probs = params.policies[params.regime_to_policy[regime]].probabilities(&x);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut a = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                a = i;
                break;
            }
        }
        states.push(x);
        actions.push(a);
        timestamps.push(clock);
        regimes.push(regime);
    }
    GeneratedTrajectory {
        traj: Trajectory {
            id: format!("traj{n:04}"),
            states,
            actions,
            timestamps,
        },
        regimes,
    }
}

fn segments_of(labels: &[usize], regime_to_policy: &[usize]) -> Vec<TrueSegment> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            out.push(TrueSegment {
                start,
                end: t,
                regime: labels[start],
                policy: regime_to_policy[labels[start]],
            });
            start = t;
        }
    }
    out
}

pub fn generate(cfg: &GeneratorConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let params = build_params(cfg)?;
    let generated: Vec<GeneratedTrajectory> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|n| generate_one(cfg, &params, n))
        .collect();
    let segments: Vec<Vec<TrueSegment>> = generated
        .iter()
        .map(|g| segments_of(&g.regimes, &params.regime_to_policy))
        .collect();
    let truth = GroundTruth {
        config: cfg.clone(),
        trajectory_ids: generated.iter().map(|g| g.traj.id.clone()).collect(),
        regime_labels: generated.iter().map(|g| g.regimes.clone()).collect(),
        policy_labels: segments.iter().map(|s| s.iter().map(|x| x.policy).collect()).collect(),
        segments,
        regime_to_policy: params.regime_to_policy,
        regime_means: params.means,
        true_precisions: params.precisions,
        true_policy_params: params.policies,
    };
    let data = Dataset::new(
        generated.into_iter().map(|g| g.traj).collect(),
        default_feature_names(cfg.state_dim),
        cfg.action_count,
    )?;
    Ok((data, truth))
}
