//! Reward-regulated, time-aware Toeplitz inverse-covariance clustering.
//!
//! Windows are assigned to clusters by a penalised Viterbi pass and each
//! cluster's Gaussian is refit with the block-Toeplitz graphical lasso. The
//! cost of switching label between consecutive steps is
//! `β / clamp(Φ(Δr, log(e + ΔT)), floor, cap)` for a bivariate Gaussian `Φ`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::seeding::{derive_seed, rng_from_seed, streams};
use crate::tglasso::{self, AdmmSettings, GlassoProblem};
use crate::trajdata::{stack_windows, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ClusterModel<T = f64> {
    pub mean: Vec<T>,
    pub theta: Matrix<T>,
    pub log_det: T,
}

impl<T: Real> ClusterModel<T> {
    pub fn new(mean: Vec<T>, theta: Matrix<T>) -> Result<Self> {
        if !theta.is_square() || theta.rows() != mean.len() {
            return Err(Error::arg(format!(
                "mean of length {} does not match a {}x{} precision",
                mean.len(),
                theta.rows(),
                theta.cols()
            )));
        }
        let ch = theta
            .cholesky()
            .ok_or_else(|| Error::Numerical("cluster precision is not positive definite".into()))?;
        let log_det = ch.log_det();
        if !log_det.is_finite() {
            return Err(Error::Numerical("cluster precision has non-finite log determinant".into()));
        }
        Ok(ClusterModel { mean, theta, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Real>(&self) -> Result<ClusterModel<U>> {
        ClusterModel::new(
            self.mean.iter().map(|x| U::lit(x.as_f64())).collect(),
            self.theta.map(|x| U::lit(x.as_f64())),
        )
    }
}

fn emission_unchecked<T: Real>(w: &[T], c: &ClusterModel<T>) -> T {
    let d = c.dim();
    let diff: Vec<T> = w.iter().zip(&c.mean).map(|(&a, &b)| a - b).collect();
    let half = T::lit(0.5);
    half * c.theta.quad_form(&diff) - half * c.log_det
        + half * T::from_usize_lossy(d) * T::lit((2.0 * std::f64::consts::PI).ln())
}

/// Negative Gaussian log-density of a stacked window under a cluster.
pub fn emission_negloglik<T: Real>(w: &[T], c: &ClusterModel<T>) -> Result<T> {
    if w.len() != c.dim() {
        return Err(Error::arg(format!(
            "window has dimension {} but cluster has {}",
            w.len(),
            c.dim()
        )));
    }
    Ok(emission_unchecked(w, c))
}

/// Bivariate Gaussian over `(Δr, log(e + ΔT))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PhiParams<T = f64> {
    pub mean: [T; 2],
    pub cov: [[T; 2]; 2],
}

impl<T: Real> PhiParams<T> {
    pub fn new(mean: [T; 2], cov: [[T; 2]; 2]) -> Result<Self> {
        let p = PhiParams { mean, cov };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let [[a, b], [c, d]] = self.cov.map(|r| r.map(|x| x.as_f64()));
        if !(a > 0.0) || !(a * d - b * c > 0.0) || b != c || !a.is_finite() || !d.is_finite() {
            return Err(Error::Config("Φ covariance must be symmetric positive definite".into()));
        }
        if !self.mean.iter().all(|m| m.is_finite()) {
            return Err(Error::Config("Φ mean must be finite".into()));
        }
        Ok(())
    }

    /// Sample mean and covariance of `(Δr, log(e + ΔT))` pairs, plus a ridge.
    pub fn fit(pairs: &[[T; 2]], ridge: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::arg("Φ needs at least one pair"));
        }
        let n = pairs.len() as f64;
        let mut mean = [0.0; 2];
        for p in pairs {
            mean[0] += p[0].as_f64() / n;
            mean[1] += p[1].as_f64() / n;
        }
        let mut cov = [[0.0; 2]; 2];
        for p in pairs {
            let d = [p[0].as_f64() - mean[0], p[1].as_f64() - mean[1]];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += d[i] * d[j] / n;
                }
            }
        }
        cov[0][0] += ridge;
        cov[1][1] += ridge;
        cov[1][0] = cov[0][1];
        Self::new(mean.map(T::lit), cov.map(|r| r.map(T::lit)))
    }

    fn parts(&self) -> (f64, f64, f64, f64, f64) {
        let s0 = self.cov[0][0].as_f64().sqrt();
        let s1 = self.cov[1][1].as_f64().sqrt();
        let rho = (self.cov[0][1].as_f64() / (s0 * s1)).clamp(-1.0, 1.0);
        (self.mean[0].as_f64(), self.mean[1].as_f64(), s0, s1, rho)
    }

    pub fn density(&self, z: [T; 2]) -> T {
        let (m0, m1, s0, s1, rho) = self.parts();
        let u = (z[0].as_f64() - m0) / s0;
        let v = (z[1].as_f64() - m1) / s1;
        let one_m = 1.0 - rho * rho;
        let q = (u * u - 2.0 * rho * u * v + v * v) / one_m;
        T::lit((-0.5 * q).exp() / (2.0 * std::f64::consts::PI * s0 * s1 * one_m.sqrt()))
    }

    pub fn mode_density(&self) -> T {
        self.density(self.mean)
    }

    /// Joint CDF `P(Z0 ≤ z0, Z1 ≤ z1)`.
    pub fn cdf(&self, z: [T; 2]) -> T {
        let (m0, m1, s0, s1, rho) = self.parts();
        T::lit(bivariate_normal_cdf(
            (z[0].as_f64() - m0) / s0,
            (z[1].as_f64() - m1) / s1,
            rho,
        ))
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn gauss_legendre_20() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        let n = 20;
        (1..=n)
            .map(|i| {
                let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let dx = p1 / dp;
                    x -= dx;
                    if dx.abs() < 1e-15 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    })
}

/// Standard bivariate normal CDF with correlation `rho`, via Plackett's
/// identity integrated over `r = sin θ`.
pub fn bivariate_normal_cdf(h: f64, k: f64, rho: f64) -> f64 {
    let base = normal_cdf(h) * normal_cdf(k);
    if rho == 0.0 {
        return base;
    }
    let top = rho.clamp(-1.0, 1.0).asin();
    let half = 0.5 * top;
    let mut acc = 0.0;
    for &(x, w) in gauss_legendre_20() {
        let th = half * (x + 1.0);
        let (s, c) = th.sin_cos();
        if c <= 0.0 {
            continue;
        }
        acc += w * (-(h * h - 2.0 * h * k * s + k * k) / (2.0 * c * c)).exp();
    }
    (base + half * acc / (2.0 * std::f64::consts::PI)).clamp(0.0, 1.0)
}

/// How `Φ` enters the switching cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiMode {
    /// `Φ` is the density; atypical `(Δr, gap)` pairs cost more.
    Density,
    /// `Φ` is the joint CDF; large reward changes and long gaps cost less.
    Cdf,
}

impl fmt::Display for PhiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhiMode::Density => "density",
            PhiMode::Cdf => "cdf",
        })
    }
}

impl FromStr for PhiMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(PhiMode::Density),
            "cdf" => Ok(PhiMode::Cdf),
            other => Err(Error::Config(format!("unknown phi mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PenaltyInputs<T = f64> {
    pub beta: T,
    pub phi: PhiParams<T>,
    pub mode: PhiMode,
    /// Multiply `β` by the reference value (`Φ` at its mean) so the cost at
    /// the mean is exactly `β` whatever the scale of `Φ`.
    pub normalize: bool,
    pub density_floor: T,
    pub density_cap: T,
}

impl<T: Real> PenaltyInputs<T> {
    /// Floor `1e-4` times the reference value; cap the mode density (density
    /// mode) or 1 (CDF mode).
    pub fn new(beta: T, phi: PhiParams<T>, mode: PhiMode, normalize: bool) -> Result<Self> {
        phi.check()?;
        if !(beta >= T::zero()) || !beta.is_finite() {
            return Err(Error::Config("β must be finite and non-negative".into()));
        }
        let reference = match mode {
            PhiMode::Density => phi.mode_density(),
            PhiMode::Cdf => phi.cdf(phi.mean),
        };
        let cap = match mode {
            PhiMode::Density => reference,
            PhiMode::Cdf => T::one(),
        };
        Ok(PenaltyInputs {
            beta,
            phi,
            mode,
            normalize,
            density_floor: T::lit(1e-4) * reference,
            density_cap: cap,
        })
    }

    /// Same floor, cap and scaling as [`PenaltyInputs::new`], with `Φ`
    /// centred at `(0, log(e + 1))` and unit covariance.
    pub fn with_unit_phi(beta: T, mode: PhiMode, normalize: bool) -> Result<Self> {
        let phi = PhiParams::new(
            [T::zero(), T::lit((std::f64::consts::E + 1.0).ln())],
            [[T::one(), T::zero()], [T::zero(), T::one()]],
        )?;
        Self::new(beta, phi, mode, normalize)
    }

    pub fn reference(&self) -> T {
        match self.mode {
            PhiMode::Density => self.phi.mode_density(),
            PhiMode::Cdf => self.phi.cdf(self.phi.mean),
        }
    }
}

/// `(Δr, log(e + ΔT))`.
pub fn penalty_features<T: Real>(delta_r: T, delta_t: T) -> [T; 2] {
    [delta_r, (T::lit(std::f64::consts::E) + delta_t).ln()]
}

/// Cost of a label change between consecutive steps.
pub fn switch_penalty<T: Real>(delta_r: T, delta_t: T, p: &PenaltyInputs<T>) -> Result<T> {
    if !(delta_t > T::zero()) {
        return Err(Error::arg("time gap must be positive"));
    }
    p.phi.check()?;
    if p.beta == T::zero() {
        return Ok(T::zero());
    }
    let z = penalty_features(delta_r, delta_t);
    let v = match p.mode {
        PhiMode::Density => p.phi.density(z),
        PhiMode::Cdf => p.phi.cdf(z),
    };
    let clamped = v.max(p.density_floor).min(p.density_cap);
    let scale = if p.normalize { p.reference() } else { T::one() };
    Ok(p.beta * scale / clamped)
}

/// Minimum-cost label path for per-step costs `emission[t][k]` and a
/// per-step switching cost (`switch[0]` is ignored).
pub fn viterbi_decode<T: Real>(emission: &[Vec<T>], switch: &[T]) -> Result<Vec<usize>> {
    let t_len = emission.len();
    if t_len == 0 {
        return Err(Error::arg("empty window sequence"));
    }
    if switch.len() != t_len {
        return Err(Error::arg("switch costs and emissions differ in length"));
    }
    let k = emission[0].len();
    if k == 0 || emission.iter().any(|e| e.len() != k) {
        return Err(Error::arg("every step needs one cost per cluster"));
    }
    let mut cost = emission[0].clone();
    let mut back = vec![vec![0usize; k]; t_len];
    let mut next = vec![T::zero(); k];
    for t in 1..t_len {
        for j in 0..k {
            let mut best = T::infinity();
            let mut arg = j;
            for (i, &c) in cost.iter().enumerate() {
                let v = if i == j { c } else { c + switch[t] };
                if v < best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + emission[t][j];
            back[t][j] = arg;
        }
        std::mem::swap(&mut cost, &mut next);
    }
    let mut last = 0;
    for j in 1..k {
        if cost[j] < cost[last] {
            last = j;
        }
    }
    if !cost[last].is_finite() {
        return Err(Error::Numerical("non-finite Viterbi path cost".into()));
    }
    let mut labels = vec![0; t_len];
    labels[t_len - 1] = last;
    for t in (1..t_len).rev() {
        labels[t - 1] = back[t][labels[t]];
    }
    Ok(labels)
}

/// Total cost of a given label path.
pub fn path_cost<T: Real>(emission: &[Vec<T>], switch: &[T], labels: &[usize]) -> T {
    let mut c = T::zero();
    for (t, &l) in labels.iter().enumerate() {
        c += emission[t][l];
        if t > 0 && labels[t - 1] != l {
            c += switch[t];
        }
    }
    c
}

fn switch_costs<T: Real>(delta_ts: &[T], delta_rs: &[T], p: &PenaltyInputs<T>) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); delta_ts.len()];
    for t in 1..delta_ts.len() {
        out[t] = switch_penalty(delta_rs[t], delta_ts[t], p)?;
    }
    Ok(out)
}

fn emission_matrix<T: Real, W: AsRef<[T]>>(windows: &[W], models: &[ClusterModel<T>]) -> Vec<Vec<T>> {
    windows
        .iter()
        .map(|w| models.iter().map(|c| emission_unchecked(w.as_ref(), c)).collect())
        .collect()
}

/// Clusters plus the marginals of their trailing blocks, used to score the
/// left-padded windows at the start of each trajectory by the states they
/// actually contain.
struct Scorer<'a, T: Real> {
    models: &'a [ClusterModel<T>],
    /// `marginals[k][j - 1]` covers the last `j` blocks.
    marginals: Vec<Vec<ClusterModel<T>>>,
    m: usize,
    window: usize,
}

impl<'a, T: Real> Scorer<'a, T> {
    fn new(models: &'a [ClusterModel<T>], m: usize, window: usize) -> Result<Self> {
        let marginals = models
            .iter()
            .map(|c| {
                if window < 2 {
                    return Ok(Vec::new());
                }
                let cov = c
                    .theta
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("cluster precision is not positive definite".into()))?
                    .inverse();
                (1..window)
                    .map(|j| {
                        let off = (window - j) * m;
                        let size = j * m;
                        let sub = Matrix::from_fn(size, size, |a, b| cov[(off + a, off + b)]);
                        let mut prec = sub
                            .cholesky()
                            .ok_or_else(|| Error::Numerical("marginal covariance is not positive definite".into()))?
                            .inverse();
                        prec.symmetrize();
                        ClusterModel::new(c.mean[off..].to_vec(), prec)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scorer { models, marginals, m, window })
    }

    fn cost(&self, w: &[T], t: usize, k: usize) -> T {
        if t + 1 < self.window {
            let j = t + 1;
            emission_unchecked(&w[(self.window - j) * self.m..], &self.marginals[k][j - 1])
        } else {
            emission_unchecked(w, &self.models[k])
        }
    }

    fn costs(&self, windows: &[Vec<T>]) -> Vec<Vec<T>> {
        windows
            .iter()
            .enumerate()
            .map(|(t, w)| (0..self.models.len()).map(|k| self.cost(w, t, k)).collect())
            .collect()
    }
}

/// Penalised assignment of one trajectory's windows. `delta_ts[t]` and
/// `delta_rs[t]` describe the step from `t - 1` to `t`; index 0 is unused.
pub fn viterbi_assign<T: Real, W: AsRef<[T]>>(
    windows: &[W],
    models: &[ClusterModel<T>],
    p: &PenaltyInputs<T>,
    delta_ts: &[T],
    delta_rs: &[T],
) -> Result<Vec<usize>> {
    if windows.is_empty() {
        return Err(Error::arg("empty window sequence"));
    }
    if models.is_empty() {
        return Err(Error::arg("at least one cluster is required"));
    }
    if delta_ts.len() != windows.len() || delta_rs.len() != windows.len() {
        return Err(Error::arg("windows, gaps and reward changes must be aligned"));
    }
    for w in windows {
        if w.as_ref().len() != models[0].dim() {
            return Err(Error::arg("window dimension does not match the clusters"));
        }
    }
    let switch = switch_costs(delta_ts, delta_rs, p)?;
    viterbi_decode(&emission_matrix(windows, models), &switch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubTrajectory {
    pub trajectory_id: String,
    pub trajectory: usize,
    pub start: usize,
    pub end: usize,
    pub cluster: usize,
}

impl SubTrajectory {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub labels: Vec<Vec<usize>>,
    pub sub_trajectories: Vec<SubTrajectory>,
}

impl Segmentation {
    /// Run-length encodes the labels into maximal constant runs.
    pub fn from_labels(ids: &[String], labels: Vec<Vec<usize>>) -> Self {
        let mut subs = Vec::new();
        for (n, l) in labels.iter().enumerate() {
            let mut start = 0;
            for t in 1..=l.len() {
                if t == l.len() || l[t] != l[start] {
                    subs.push(SubTrajectory {
                        trajectory_id: ids[n].clone(),
                        trajectory: n,
                        start,
                        end: t,
                        cluster: l[start],
                    });
                    start = t;
                }
            }
        }
        Segmentation {
            labels,
            sub_trajectories: subs,
        }
    }

    pub fn cluster_sizes(&self, k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for &l in self.labels.iter().flatten() {
            if l < k {
                c[l] += 1;
            }
        }
        c
    }

    pub fn flat_labels(&self) -> Vec<usize> {
        self.labels.iter().flatten().copied().collect()
    }
}

/// Stacked windows and gaps for every trajectory of a dataset.
#[derive(Clone, Debug)]
pub struct SegmentationInput<T = f64> {
    pub ids: Vec<String>,
    pub windows: Vec<Vec<Vec<T>>>,
    /// `delta_ts[n][t] = t_t - t_{t-1}`, with `delta_ts[n][0] = 0`.
    pub delta_ts: Vec<Vec<T>>,
    pub m: usize,
    pub window: usize,
}

impl<T: Real> SegmentationInput<T> {
    pub fn new(d: &Dataset<T>, window: usize) -> Result<Self> {
        let mut windows = Vec::with_capacity(d.len());
        let mut delta_ts = Vec::with_capacity(d.len());
        for tr in &d.trajectories {
            windows.push(stack_windows(tr, window)?.into_iter().map(|w| w.vector).collect());
            delta_ts.push(tr.delta_ts());
        }
        Ok(SegmentationInput {
            ids: d.ids(),
            windows,
            delta_ts,
            m: d.state_dim(),
            window,
        })
    }

    pub fn dim(&self) -> usize {
        self.m * self.window
    }

    pub fn total_windows(&self) -> usize {
        self.windows.iter().map(Vec::len).sum()
    }

    pub fn zero_delta_rs(&self) -> Vec<Vec<T>> {
        self.windows.iter().map(|w| vec![T::zero(); w.len()]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiccSettings {
    pub lambda: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Clusters with fewer windows are not refitted (see `fit`); 0 means the stacked
    /// dimension `m * window`.
    pub min_cluster_size: usize,
    pub admm: AdmmSettings,
    pub seed: u64,
}

impl Default for TiccSettings {
    fn default() -> Self {
        TiccSettings {
            lambda: 1e-5,
            max_iters: 100,
            rel_tol: 1e-5,
            min_cluster_size: 0,
            admm: AdmmSettings::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TiccFit<T = f64> {
    pub models: Vec<ClusterModel<T>>,
    pub segmentation: Segmentation,
    pub objective_trace: Vec<T>,
    /// One flag per trace entry: whether that iteration re-seeded a cluster.
    pub reseeded: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
}

struct Workspace<'a, T: Real> {
    input: &'a SegmentationInput<T>,
    switch: Vec<Vec<T>>,
    lambda: f64,
    min_size: usize,
    admm: &'a AdmmSettings,
    pooled: OnceLock<Matrix<T>>,
}

impl<'a, T: Real> Workspace<'a, T> {
    fn glasso(&self, windows: &[&[T]]) -> Result<(Vec<T>, Matrix<T>)> {
        let (mu, s, _) = tglasso::empirical_stats(windows, None)?;
        let n = windows.len();
        let sol = tglasso::solve(
            &GlassoProblem {
                empirical_covariance: s,
                sample_count: n,
                lambda: T::lit(2.0 * self.lambda / n as f64),
                window: self.input.window,
                m: self.input.m,
            },
            self.admm,
        )?;
        Ok((mu, sol.theta))
    }

    fn pooled(&self) -> Result<Matrix<T>> {
        if let Some(p) = self.pooled.get() {
            return Ok(p.clone());
        }
        let skip = self.input.window - 1;
        let all: Vec<&[T]> = self.input.windows.iter().flat_map(|ws| ws.iter().skip(skip)).map(Vec::as_slice).collect();
        let (_, th) = self.glasso(&all)?;
        Ok(self.pooled.get_or_init(|| th).clone())
    }

    /// Refits every cluster. Clusters below the minimum size keep their
    /// `previous` parameters, or are seeded afresh when there are none.
    /// Returns the models and the under-populated cluster indices.
    fn m_step(
        &self,
        labels: &[Vec<usize>],
        k: usize,
        previous: Option<&[ClusterModel<T>]>,
    ) -> Result<(Vec<ClusterModel<T>>, Vec<usize>)> {
        let mut members: Vec<Vec<&[T]>> = vec![Vec::new(); k];
        for (n, l) in labels.iter().enumerate() {
            for (t, &c) in l.iter().enumerate() {
                if t + 1 >= self.input.window {
                    members[c].push(&self.input.windows[n][t]);
                }
            }
        }
        let fitted: Vec<Option<Result<ClusterModel<T>>>> = members
            .par_iter()
            .map(|ws| {
                if ws.len() < self.min_size {
                    None
                } else {
                    Some(self.glasso(ws).and_then(|(mu, th)| ClusterModel::new(mu, th)))
                }
            })
            .collect();
        let small: Vec<usize> = (0..k).filter(|&c| fitted[c].is_none()).collect();
        let mut fresh = match previous {
            Some(_) => Vec::new(),
            None => self.seeds(labels, small.len(), None)?,
        }
        .into_iter();
        let models = fitted
            .into_iter()
            .enumerate()
            .map(|(c, f)| match (f, previous) {
                (Some(r), _) => r,
                (None, Some(prev)) => Ok(prev[c].clone()),
                (None, None) => Ok(fresh.next().expect("one seed per small cluster")),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((models, small))
    }

    /// New clusters centred on the windows that fit their current cluster
    /// worst under `previous`, with the pooled precision.
    fn seeds(&self, labels: &[Vec<usize>], count: usize, previous: Option<&[ClusterModel<T>]>) -> Result<Vec<ClusterModel<T>>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let scorer = previous.map(|p| Scorer::new(p, self.input.m, self.input.window)).transpose()?;
        let mut scored: Vec<(T, usize, usize)> = Vec::new();
        for (n, l) in labels.iter().enumerate() {
            for (t, &c) in l.iter().enumerate() {
                if t + 1 < self.input.window {
                    continue;
                }
                let cost = match &scorer {
                    Some(sc) => sc.cost(&self.input.windows[n][t], t, c),
                    None => T::zero(),
                };
                scored.push((cost, n, t));
            }
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let pooled = self.pooled()?;
        (0..count)
            .map(|i| {
                let (_, n, t) = scored[i % scored.len()];
                ClusterModel::new(self.input.windows[n][t].clone(), pooled.clone())
            })
            .collect()
    }

    fn e_step(&self, models: &[ClusterModel<T>]) -> Result<Vec<Vec<usize>>> {
        let scorer = Scorer::new(models, self.input.m, self.input.window)?;
        self.input
            .windows
            .par_iter()
            .zip(self.switch.par_iter())
            .map(|(w, s)| viterbi_decode(&scorer.costs(w), s))
            .collect()
    }

    fn objective(&self, models: &[ClusterModel<T>], labels: &[Vec<usize>]) -> Result<T> {
        let scorer = Scorer::new(models, self.input.m, self.input.window)?;
        let mut j = T::zero();
        for (n, l) in labels.iter().enumerate() {
            let e = scorer.costs(&self.input.windows[n]);
            j += path_cost(&e, &self.switch[n], l);
        }
        let lam = T::lit(self.lambda);
        for c in models {
            j += lam * c.theta.off_diagonal_l1();
        }
        Ok(j)
    }
}

fn sqdist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x - *y).as_f64().powi(2)).sum()
}

fn nearest(w: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.iter().enumerate() {
        let d: f64 = w.iter().zip(ctr).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding refined by Lloyd iterations; the lowest-inertia of a few
/// seeded trials labels every window by its nearest centre.
fn kmeans_labels<T: Real>(input: &SegmentationInput<T>, k: usize, seed: u64) -> Vec<Vec<usize>> {
    const TRIALS: u64 = 4;
    const LLOYD: usize = 20;
    let mut pts: Vec<Vec<f64>> = Vec::new();
    for ws in &input.windows {
        for (t, w) in ws.iter().enumerate() {
            if t + 1 >= input.window {
                pts.push(w.iter().map(|x| x.as_f64()).collect());
            }
        }
    }
    if pts.len() < k {
        pts = input.windows.iter().flatten().map(|w| w.iter().map(|x| x.as_f64()).collect()).collect();
    }
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for trial in 0..TRIALS {
        let mut rng = rng_from_seed(derive_seed(seed, streams::TICC_INIT, trial));
        let mut centers = vec![pts[rng.random_range(0..pts.len())].clone()];
        let mut d2: Vec<f64> = pts.iter().map(|w| sqdist(w, &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = d2.iter().sum();
            let idx = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = pts.len() - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if u < d {
                        pick = i;
                        break;
                    }
                    u -= d;
                }
                pick
            } else {
                rng.random_range(0..pts.len())
            };
            centers.push(pts[idx].clone());
            for (i, w) in pts.iter().enumerate() {
                d2[i] = d2[i].min(sqdist(w, &pts[idx]));
            }
        }
        let dim = pts[0].len();
        let mut inertia = f64::INFINITY;
        for _ in 0..LLOYD {
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            let mut total = 0.0;
            for w in &pts {
                let (c, d) = nearest(w, &centers);
                total += d;
                counts[c] += 1;
                for (s, x) in sums[c].iter_mut().zip(w) {
                    *s += x;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
            if total >= inertia * (1.0 - 1e-9) {
                inertia = inertia.min(total);
                break;
            }
            inertia = total;
        }
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, centers));
        }
    }
    let centers = best.expect("at least one trial").1;
    input
        .windows
        .iter()
        .map(|ws| {
            ws.iter()
                .map(|w| nearest(&w.iter().map(|x| x.as_f64()).collect::<Vec<_>>(), &centers).0)
                .collect()
        })
        .collect()
}

/// EM over assignments and cluster Gaussians. `delta_rs` defaults to zero
/// reward changes; `init` warm-starts from existing clusters.
pub fn fit<T: Real>(
    input: &SegmentationInput<T>,
    k: usize,
    penalty: &PenaltyInputs<T>,
    delta_rs: Option<&[Vec<T>]>,
    settings: &TiccSettings,
    init: Option<&[ClusterModel<T>]>,
) -> Result<TiccFit<T>> {
    if k == 0 {
        return Err(Error::arg("K must be at least 1"));
    }
    let total = input.total_windows();
    if k > total {
        return Err(Error::arg(format!("K = {k} exceeds the {total} available windows")));
    }
    if settings.max_iters == 0 {
        return Err(Error::Config("rmtticc needs at least one iteration".into()));
    }
    if !(settings.lambda >= 0.0) {
        return Err(Error::Config("λ must be non-negative".into()));
    }
    let zeros;
    let drs = match delta_rs {
        Some(d) => d,
        None => {
            zeros = input.zero_delta_rs();
            &zeros
        }
    };
    if drs.len() != input.windows.len() || drs.iter().zip(&input.windows).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::arg("reward changes are not aligned with the windows"));
    }
    let switch = input
        .delta_ts
        .iter()
        .zip(drs)
        .map(|(dt, dr)| switch_costs(dt, dr, penalty))
        .collect::<Result<Vec<_>>>()?;
    let ws = Workspace {
        input,
        switch,
        lambda: settings.lambda,
        min_size: if settings.min_cluster_size == 0 {
            input.dim()
        } else {
            settings.min_cluster_size
        }
        .min(total / k)
        .max(1),
        admm: &settings.admm,
        pooled: OnceLock::new(),
    };

    let mut models = match init {
        Some(m) if m.len() == k && m.iter().all(|c| c.dim() == input.dim()) => m.to_vec(),
        Some(_) => return Err(Error::arg("initial clusters do not match K or the window dimension")),
        None => {
            let labels = kmeans_labels(input, k, settings.seed);
            ws.m_step(&labels, k, None)?.0
        }
    };
    let mut labels: Option<Vec<Vec<usize>>> = None;
    let mut trace = Vec::new();
    let mut reseeded = Vec::new();
    // Each cluster gets one re-seeding attempt per fit, so the loop cannot
    // cycle between collapsing and re-seeding the same cluster.
    let mut attempted = vec![false; k];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..settings.max_iters {
        iterations += 1;
        let new_labels = ws.e_step(&models)?;
        let last_reseeded = reseeded.last().copied().unwrap_or(false);
        if labels.as_ref() == Some(&new_labels) && !last_reseeded {
            converged = true;
            break;
        }
        let (mut new_models, small) = ws.m_step(&new_labels, k, Some(&models))?;
        let mut new_labels = new_labels;
        let mut obj = ws.objective(&new_models, &new_labels)?;
        let eligible: Vec<usize> = small.into_iter().filter(|&c| !attempted[c]).collect();
        let mut re = false;
        if !eligible.is_empty() {
            // Keep the re-seed only if it pays off after one reassignment.
            let mut candidate = new_models.clone();
            for (&c, seed) in eligible.iter().zip(ws.seeds(&new_labels, eligible.len(), Some(&models))?) {
                candidate[c] = seed;
                attempted[c] = true;
            }
            let relabeled = ws.e_step(&candidate)?;
            let cand_obj = ws.objective(&candidate, &relabeled)?;
            if cand_obj <= obj {
                new_models = candidate;
                new_labels = relabeled;
                obj = cand_obj;
                re = true;
            }
        }
        models = new_models;
        labels = Some(new_labels);
        if !obj.is_finite() {
            return Err(Error::Numerical("rmtticc objective is not finite".into()));
        }
        let prev = trace.last().copied();
        trace.push(obj);
        reseeded.push(re);
        if let Some(p) = prev {
            let rel = ((p - obj).abs() / p.abs().max(T::lit(1e-12))).as_f64();
            if !re && rel < settings.rel_tol {
                converged = true;
                break;
            }
        }
    }
    let labels = labels.expect("at least one iteration ran");
    Ok(TiccFit {
        models,
        segmentation: Segmentation::from_labels(&input.ids, labels),
        objective_trace: trace,
        reseeded,
        iterations,
        converged,
    })
}

/// Segments every trajectory with frozen clusters.
pub fn decode<T: Real>(
    input: &SegmentationInput<T>,
    models: &[ClusterModel<T>],
    penalty: &PenaltyInputs<T>,
    delta_rs: Option<&[Vec<T>]>,
) -> Result<Segmentation> {
    let zeros;
    let drs = match delta_rs {
        Some(d) => d,
        None => {
            zeros = input.zero_delta_rs();
            &zeros
        }
    };
    if drs.len() != input.windows.len() {
        return Err(Error::arg("reward changes are not aligned with the windows"));
    }
    if models.is_empty() || models.iter().any(|c| c.dim() != input.dim()) {
        return Err(Error::arg("clusters do not match the window dimension"));
    }
    let scorer = Scorer::new(models, input.m, input.window)?;
    let labels = input
        .windows
        .par_iter()
        .zip(input.delta_ts.par_iter())
        .zip(drs.par_iter())
        .map(|((w, dt), dr)| {
            if dr.len() != w.len() {
                return Err(Error::arg("reward changes are not aligned with the windows"));
            }
            viterbi_decode(&scorer.costs(w), &switch_costs(dt, dr, penalty)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Segmentation::from_labels(&input.ids, labels))
}

/// Sum of Gaussian log-likelihoods of each window under its assigned cluster.
/// Padded windows contribute the marginal density of their real states.
pub fn assigned_loglik<T: Real>(
    input: &SegmentationInput<T>,
    models: &[ClusterModel<T>],
    labels: &[Vec<usize>],
) -> Result<f64> {
    let scorer = Scorer::new(models, input.m, input.window)?;
    let mut ll = 0.0;
    for (n, l) in labels.iter().enumerate() {
        for (t, &c) in l.iter().enumerate() {
            ll -= scorer.cost(&input.windows[n][t], t, c).as_f64();
        }
    }
    Ok(ll)
}

/// `-2 log L + df log n` with `df` counting free precision entries and means.
pub fn bic_score<T: Real>(input: &SegmentationInput<T>, fit: &TiccFit<T>) -> Result<f64> {
    let ll = assigned_loglik(input, &fit.models, &fit.segmentation.labels)?;
    let df: usize = fit
        .models
        .iter()
        .map(|c| tglasso::toeplitz_nonzeros(&c.theta, input.m, input.window) + input.dim())
        .sum();
    Ok(-2.0 * ll + df as f64 * (input.total_windows() as f64).ln())
}

#[derive(Clone, Debug)]
pub struct BicSelection<T: Real = f64> {
    pub best_k: usize,
    /// `(K, score)`; `None` when the fit for that K failed.
    pub scores: Vec<(usize, Option<f64>)>,
    pub best: TiccFit<T>,
}

pub fn bic_select<T: Real>(
    input: &SegmentationInput<T>,
    candidates: &[usize],
    penalty: &PenaltyInputs<T>,
    delta_rs: Option<&[Vec<T>]>,
    settings: &TiccSettings,
) -> Result<BicSelection<T>> {
    if candidates.is_empty() {
        return Err(Error::arg("no K candidates"));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, usize, TiccFit<T>)> = None;
    let mut last_err = None;
    for &k in candidates {
        match fit(input, k, penalty, delta_rs, settings, None).and_then(|f| bic_score(input, &f).map(|s| (f, s))) {
            Ok((f, s)) => {
                log::debug!("bic K={k}: {s:.3}");
                scores.push((k, Some(s)));
                if best.as_ref().is_none_or(|b| s < b.0) {
                    best = Some((s, k, f));
                }
            }
            Err(e) => {
                log::warn!("bic candidate K={k} failed: {e}");
                scores.push((k, None));
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((_, best_k, best)) => Ok(BicSelection { best_k, scores, best }),
        None => Err(last_err.expect("at least one candidate ran")),
    }
}
