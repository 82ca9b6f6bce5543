//! EM mixture of EDM policies over demonstration units (sub-trajectories or
//! whole trajectories).

use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edm::{self, EdmConfig, PolicyNet, WeightedSample};
use crate::error::{Error, Result};
use crate::rmtticc::Segmentation;
use crate::scalar::{logsumexp, Real};
use crate::seeding::{derive_seed, rng_from_seed, streams};
use crate::trajdata::Dataset;

/// A contiguous run of demonstrated `(state, action)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoUnit<T = f64> {
    pub states: Vec<Vec<T>>,
    pub actions: Vec<usize>,
}

impl<T: Real> DemoUnit<T> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// One unit per sub-trajectory, in segmentation order.
pub fn units_from_segmentation<T: Real>(d: &Dataset<T>, seg: &Segmentation) -> Result<Vec<DemoUnit<T>>> {
    seg.sub_trajectories
        .iter()
        .map(|s| {
            let tr = d
                .trajectories
                .get(s.trajectory)
                .filter(|tr| tr.id == s.trajectory_id && s.end <= tr.len())
                .ok_or_else(|| Error::Consistency(format!("sub-trajectory of '{}' does not match the dataset", s.trajectory_id)))?;
            Ok(DemoUnit {
                states: tr.states[s.start..s.end].to_vec(),
                actions: tr.actions[s.start..s.end].to_vec(),
            })
        })
        .collect()
}

pub fn units_from_trajectories<T: Real>(d: &Dataset<T>) -> Vec<DemoUnit<T>> {
    d.trajectories
        .iter()
        .map(|tr| DemoUnit {
            states: tr.states.clone(),
            actions: tr.actions.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PolicyMixture<T = f64> {
    pub priors: Vec<T>,
    pub policies: Vec<PolicyNet<T>>,
    /// `N̂ × G`, row-stochastic.
    pub responsibilities: Vec<Vec<T>>,
}

impl<T: Real> PolicyMixture<T> {
    pub fn components(&self) -> usize {
        self.policies.len()
    }

    /// Most responsible component per unit; ties go to the smaller index.
    pub fn hard_assignments(&self) -> Vec<usize> {
        self.responsibilities.iter().map(|r| argmax(r)).collect()
    }
}

pub(crate) fn argmax<T: Real>(r: &[T]) -> usize {
    let mut best = 0;
    for (g, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = g;
        }
    }
    best
}

/// `Σ log Π_g(a|x)` for every unit and component.
pub fn unit_logliks<T: Real>(units: &[DemoUnit<T>], policies: &[PolicyNet<T>]) -> Vec<Vec<T>> {
    units
        .par_iter()
        .map(|u| {
            policies
                .iter()
                .map(|p| u.states.iter().zip(&u.actions).map(|(x, &a)| p.log_prob(x, a)).sum())
                .collect()
        })
        .collect()
}

fn posterior<T: Real>(logliks: &[Vec<T>], priors: &[T]) -> Result<(Vec<Vec<T>>, T)> {
    let mut total = T::zero();
    let mut rows = Vec::with_capacity(logliks.len());
    for l in logliks {
        let joint: Vec<T> = l.iter().zip(priors).map(|(&a, &p)| a + p.ln()).collect();
        let lse = logsumexp(&joint);
        if !lse.is_finite() {
            return Err(Error::Numerical("a unit has zero likelihood under every component".into()));
        }
        total += lse;
        rows.push(joint.iter().map(|&j| (j - lse).exp()).collect());
    }
    Ok((rows, total))
}

/// Posterior component probabilities of every unit.
pub fn responsibilities<T: Real>(units: &[DemoUnit<T>], mixture: &PolicyMixture<T>) -> Result<Vec<Vec<T>>> {
    if mixture.components() == 0 {
        return Err(Error::arg("mixture has no components"));
    }
    if units.iter().any(DemoUnit::is_empty) {
        return Err(Error::arg("empty demonstration unit"));
    }
    Ok(posterior(&unit_logliks(units, &mixture.policies), &mixture.priors)?.0)
}

/// Observed-data log-likelihood `Σ_n log Σ_g ν_g Π_n Π_g(a|x)`.
pub fn observed_loglik<T: Real>(units: &[DemoUnit<T>], mixture: &PolicyMixture<T>) -> Result<T> {
    Ok(posterior(&unit_logliks(units, &mixture.policies), &mixture.priors)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmSettings {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Epochs of continued training per M-step after the first.
    pub warm_epochs: usize,
    /// Replace responsibilities by one-hot argmax before each M-step.
    pub hard: bool,
    /// Samples with smaller weight are left out of a component's training.
    pub min_weight: f64,
    pub seed: u64,
}

impl Default for EmSettings {
    fn default() -> Self {
        EmSettings {
            max_iters: 50,
            rel_tol: 1e-4,
            warm_epochs: 5,
            hard: false,
            min_weight: 1e-6,
            seed: 0,
        }
    }
}

/// Starting point of EM: responsibilities plus one seed stream per component.
#[derive(Clone, Debug, PartialEq)]
pub struct EmInit<T = f64> {
    pub responsibilities: Vec<Vec<T>>,
    pub component_seeds: Vec<u64>,
    /// Networks to continue training instead of starting fresh.
    pub policies: Option<Vec<PolicyNet<T>>>,
}

impl<T: Real> EmInit<T> {
    /// Dirichlet(1) rows. A single component uses the EDM seed unchanged.
    pub fn random(n_units: usize, g: usize, edm_seed: u64, em_seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(em_seed, streams::EM_INIT, 0));
        let responsibilities = (0..n_units)
            .map(|_| {
                let e: Vec<f64> = (0..g).map(|_| Exp1.sample(&mut rng)).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| T::lit(v / s)).collect()
            })
            .collect();
        EmInit {
            responsibilities,
            component_seeds: component_seeds(g, edm_seed),
            policies: None,
        }
    }

    /// Same components in a new order: `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        EmInit {
            responsibilities: self.responsibilities.iter().map(|r| perm.iter().map(|&o| r[o]).collect()).collect(),
            component_seeds: perm.iter().map(|&o| self.component_seeds[o]).collect(),
            policies: self.policies.as_ref().map(|p| perm.iter().map(|&o| p[o].clone()).collect()),
        }
    }
}

pub fn component_seeds(g: usize, edm_seed: u64) -> Vec<u64> {
    if g == 1 {
        vec![edm_seed]
    } else {
        (0..g as u64).map(|i| derive_seed(edm_seed, streams::EM_COMPONENT, i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MixtureFit<T = f64> {
    pub mixture: PolicyMixture<T>,
    /// Observed-data log-likelihood after each iteration.
    pub loglik_trace: Vec<T>,
    /// Whether a collapsed component was re-seeded in that iteration.
    pub reseeded: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
}

fn weighted_samples<T: Real>(units: &[DemoUnit<T>], weights: &[T], min_weight: T) -> Vec<WeightedSample<T>> {
    let mut out = Vec::new();
    for (u, &w) in units.iter().zip(weights) {
        if w < min_weight {
            continue;
        }
        for (x, &a) in u.states.iter().zip(&u.actions) {
            out.push(WeightedSample::new(x.clone(), a, w));
        }
    }
    out
}

fn component_objective<T: Real>(net: &PolicyNet<T>, samples: &[WeightedSample<T>]) -> T {
    samples.iter().map(|s| s.weight * net.log_prob(&s.state, s.action)).sum()
}

fn one_hot<T: Real>(rows: &[Vec<T>]) -> Vec<Vec<T>> {
    rows.iter()
        .map(|r| {
            let b = argmax(r);
            (0..r.len()).map(|g| if g == b { T::one() } else { T::zero() }).collect()
        })
        .collect()
}

/// Soft (or hard) EM. Each policy refit is kept only when it raises that
/// component's responsibility-weighted log-likelihood.
pub fn fit<T: Real>(
    units: &[DemoUnit<T>],
    g: usize,
    action_count: usize,
    edm_config: &EdmConfig,
    settings: &EmSettings,
    init: Option<EmInit<T>>,
) -> Result<MixtureFit<T>> {
    edm_config.validate()?;
    if g == 0 {
        return Err(Error::arg("G must be at least 1"));
    }
    if g > units.len() {
        return Err(Error::arg(format!("G = {g} exceeds the {} demonstration units", units.len())));
    }
    if units.iter().any(DemoUnit::is_empty) {
        return Err(Error::arg("empty demonstration unit"));
    }
    if settings.max_iters == 0 {
        return Err(Error::Config("EM needs at least one iteration".into()));
    }
    let n = units.len();
    let init = init.unwrap_or_else(|| EmInit::random(n, g, edm_config.seed, settings.seed));
    if init.responsibilities.len() != n
        || init.responsibilities.iter().any(|r| r.len() != g)
        || init.component_seeds.len() != g
    {
        return Err(Error::arg("initial responsibilities do not match the units and G"));
    }
    let min_w = T::lit(settings.min_weight);
    let mut resp = init.responsibilities;
    let seeds = init.component_seeds;
    let mut policies: Option<Vec<PolicyNet<T>>> = init.policies;
    let mut priors = vec![T::zero(); g];
    let mut trace = Vec::new();
    let mut reseeded = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..settings.max_iters {
        iterations += 1;
        let weights = if settings.hard { one_hot(&resp) } else { resp.clone() };
        let nf = T::from_usize_lossy(n);
        for (k, p) in priors.iter_mut().enumerate() {
            *p = weights.iter().map(|r| r[k]).sum::<T>() / nf;
        }
        let previous = policies.take();
        let trained = (0..g)
            .into_par_iter()
            .map(|k| {
                let col: Vec<T> = weights.iter().map(|r| r[k]).collect();
                let samples = weighted_samples(units, &col, min_w);
                match &previous {
                    None => {
                        if samples.is_empty() {
                            return Err(Error::Numerical(format!("component {k} has no training weight")));
                        }
                        let cfg = EdmConfig { seed: seeds[k], ..edm_config.clone() };
                        Ok(edm::train(&samples, action_count, &cfg)?.net)
                    }
                    Some(prev) => {
                        if samples.is_empty() {
                            return Ok(prev[k].clone());
                        }
                        let cfg = EdmConfig {
                            seed: derive_seed(seeds[k], streams::EM_WARM, iter as u64),
                            ..edm_config.clone()
                        };
                        let cand = edm::train_from(prev[k].clone(), &samples, &cfg, settings.warm_epochs)?.net;
                        if component_objective(&cand, &samples) >= component_objective(&prev[k], &samples) {
                            Ok(cand)
                        } else {
                            Ok(prev[k].clone())
                        }
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (new_resp, ll) = posterior(&unit_logliks(units, &trained), &priors)?;
        policies = Some(trained);
        resp = new_resp;
        let prev_ll = trace.last().copied();
        trace.push(ll);
        // A component with essentially no responsibility left is re-seeded
        // from the unit the mixture explains least confidently.
        let mass: Vec<T> = (0..g).map(|k| resp.iter().map(|r| r[k]).sum()).collect();
        let collapsed: Vec<usize> = (0..g).filter(|&k| mass[k] < T::lit(1e-3)).collect();
        let mut re = false;
        if !collapsed.is_empty() && iter + 1 < settings.max_iters {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let ma = resp[a][argmax(&resp[a])];
                let mb = resp[b][argmax(&resp[b])];
                ma.partial_cmp(&mb).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
            for (i, &k) in collapsed.iter().enumerate() {
                let u = order[i % n];
                for (j, v) in resp[u].iter_mut().enumerate() {
                    *v = if j == k { T::one() } else { T::zero() };
                }
            }
            re = true;
        }
        reseeded.push(re);
        if g == 1 {
            converged = true;
            break;
        }
        if let Some(p) = prev_ll {
            if !re && ((ll - p).abs() / p.abs().max(T::lit(1e-12))).as_f64() < settings.rel_tol {
                converged = true;
                break;
            }
        }
    }
    let final_weights = resp;
    let nf = T::from_usize_lossy(n);
    let priors_out: Vec<T> = (0..g).map(|k| final_weights.iter().map(|r| r[k]).sum::<T>() / nf).collect();
    Ok(MixtureFit {
        mixture: PolicyMixture {
            priors: if g == 1 { vec![T::one()] } else { priors_out },
            policies: policies.expect("at least one iteration ran"),
            responsibilities: final_weights,
        },
        loglik_trace: trace,
        reseeded,
        iterations,
        converged,
    })
}

#[derive(Clone, Debug)]
pub struct GSelection<T: Real = f64> {
    pub best_g: usize,
    /// Best observed log-likelihood per G tried.
    pub logliks: Vec<(usize, f64)>,
    pub best: MixtureFit<T>,
}

/// Grows G from 1 until a component is effectively empty or the
/// log-likelihood gains less than 1%.
pub fn select_g<T: Real>(
    units: &[DemoUnit<T>],
    g_max: usize,
    action_count: usize,
    edm_config: &EdmConfig,
    settings: &EmSettings,
) -> Result<GSelection<T>> {
    let n = units.len();
    let g_max = g_max.max(1).min(n.max(1));
    let mut best = fit(units, 1, action_count, edm_config, settings, None)?;
    let mut best_ll = best.loglik_trace.last().copied().unwrap_or_else(T::neg_infinity).as_f64();
    let mut logliks = vec![(1, best_ll)];
    let mut best_g = 1;
    for g in 2..=g_max {
        let f = fit(units, g, action_count, edm_config, settings, None)?;
        let ll = f.loglik_trace.last().copied().unwrap_or_else(T::neg_infinity).as_f64();
        logliks.push((g, ll));
        let empty = f.mixture.priors.iter().any(|&p| p.as_f64() < 1.0 / (10.0 * n as f64));
        let gain = (ll - best_ll) / best_ll.abs().max(1e-12);
        log::debug!("select G={g}: loglik {ll:.3} gain {gain:.4} empty {empty}");
        if empty || gain < 0.01 {
            break;
        }
        best = f;
        best_ll = ll;
        best_g = g;
    }
    Ok(GSelection { best_g, logliks, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use approx::assert_relative_eq;
    use rand::Rng as _;

    fn fixed_policy(p1: f64) -> PolicyNet<f64> {
        // Constant policy with P(a=1) = p1.
        let mut net = PolicyNet::new(1, 1, 2, 0);
        net.w2 = Matrix::zeros(2, 1);
        net.b2 = vec![0.0, (p1 / (1.0 - p1)).ln()];
        net
    }

    #[test]
    fn single_component_responsibilities_are_one() {
        let units = vec![DemoUnit { states: vec![vec![0.0]], actions: vec![1] }; 3];
        let m = PolicyMixture { priors: vec![1.0], policies: vec![fixed_policy(0.3)], responsibilities: vec![] };
        for r in responsibilities(&units, &m).unwrap() {
            assert_eq!(r, vec![1.0]);
        }
    }

    #[test]
    fn identical_policies_split_evenly() {
        let units = vec![DemoUnit { states: vec![vec![0.0], vec![1.0]], actions: vec![1, 0] }];
        let m = PolicyMixture { priors: vec![0.5, 0.5], policies: vec![fixed_policy(0.3), fixed_policy(0.3)], responsibilities: vec![] };
        let r = responsibilities(&units, &m).unwrap();
        assert_relative_eq!(r[0][0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(r[0][1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn bayes_rule_hand_case() {
        let units = vec![DemoUnit { states: vec![vec![0.0]], actions: vec![1] }];
        let m = PolicyMixture { priors: vec![0.5, 0.5], policies: vec![fixed_policy(0.9), fixed_policy(0.1)], responsibilities: vec![] };
        let r = responsibilities(&units, &m).unwrap();
        assert_relative_eq!(r[0][0], 0.9, epsilon = 1e-12);
        assert_relative_eq!(r[0][1], 0.1, epsilon = 1e-12);
    }

    /// Units from two opposite logistic policies on a 2-d state.
    fn two_policy_units(n: usize, len: usize, seed: u64) -> (Vec<DemoUnit<f64>>, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let mut units = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n {
            let g = i % 2;
            let mut states = Vec::new();
            let mut actions = Vec::new();
            for _ in 0..len {
                let x: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
                let s = if g == 0 { 3.0 * x[0] } else { -3.0 * x[0] + 2.0 * x[1] };
                let p = 1.0 / (1.0 + (-s).exp());
                actions.push(usize::from(rng.random::<f64>() < p));
                states.push(x);
            }
            units.push(DemoUnit { states, actions });
            truth.push(g);
        }
        (units, truth)
    }

    fn quick_edm() -> EdmConfig {
        EdmConfig { epochs: 15, hidden: 16, occupancy_weight: 0.0, ..Default::default() }
    }

    #[test]
    fn recovers_two_policies() {
        let (units, truth) = two_policy_units(40, 25, 1);
        let f = fit(&units, 2, 2, &quick_edm(), &EmSettings::default(), None).unwrap();
        let pred = f.mixture.hard_assignments();
        let f1 = crate::metrics::aligned_macro_f1(&truth, &pred).unwrap();
        assert!(f1 >= 0.9, "aligned F1 {f1}");
        for r in &f.mixture.responsibilities {
            assert_relative_eq!(r.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
        assert_relative_eq!(f.mixture.priors.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn loglik_is_monotone() {
        let (units, _) = two_policy_units(20, 15, 2);
        for seed in 0..3 {
            let f = fit(&units, 2, 2, &quick_edm(), &EmSettings { seed, ..Default::default() }, None).unwrap();
            for i in 1..f.loglik_trace.len() {
                if !f.reseeded[i - 1] {
                    let (a, b) = (f.loglik_trace[i - 1], f.loglik_trace[i]);
                    assert!(b >= a - 1e-6 * a.abs(), "seed {seed} iter {i}: {a} -> {b}");
                }
            }
        }
    }

    #[test]
    fn single_component_equals_plain_edm() {
        let (units, _) = two_policy_units(6, 10, 3);
        let cfg = EdmConfig { seed: 42, ..quick_edm() };
        let f = fit(&units, 1, 2, &cfg, &EmSettings::default(), None).unwrap();
        let pooled: Vec<WeightedSample<f64>> = units
            .iter()
            .flat_map(|u| u.states.iter().zip(&u.actions).map(|(x, &a)| WeightedSample::new(x.clone(), a, 1.0)))
            .collect();
        let direct = edm::train(&pooled, 2, &cfg).unwrap();
        assert_eq!(f.mixture.policies[0], direct.net);
        assert_eq!(f.iterations, 1);
    }

    #[test]
    fn permuted_init_permutes_result() {
        let (units, _) = two_policy_units(10, 10, 4);
        let cfg = quick_edm();
        let settings = EmSettings { max_iters: 3, ..Default::default() };
        let init = EmInit::random(units.len(), 3, cfg.seed, 9);
        let perm = [2, 0, 1];
        let a = fit(&units, 3, 2, &cfg, &settings, Some(init.clone())).unwrap();
        let b = fit(&units, 3, 2, &cfg, &settings, Some(init.permuted(&perm))).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(b.mixture.policies[new], a.mixture.policies[old]);
            assert_relative_eq!(b.mixture.priors[new], a.mixture.priors[old], max_relative = 1e-12);
        }
    }

    #[test]
    fn frozen_one_hot_matches_independent_training() {
        let (units, truth) = two_policy_units(8, 10, 5);
        let cfg = quick_edm();
        let resp: Vec<Vec<f64>> = truth.iter().map(|&g| (0..2).map(|k| if k == g { 1.0 } else { 0.0 }).collect()).collect();
        let init = EmInit { responsibilities: resp.clone(), component_seeds: component_seeds(2, cfg.seed), policies: None };
        let f = fit(&units, 2, 2, &cfg, &EmSettings { max_iters: 1, ..Default::default() }, Some(init)).unwrap();
        for k in 0..2 {
            let col: Vec<f64> = resp.iter().map(|r| r[k]).collect();
            let samples = weighted_samples(&units, &col, 1e-6);
            let direct = edm::train(&samples, 2, &EdmConfig { seed: component_seeds(2, cfg.seed)[k], ..cfg.clone() }).unwrap();
            assert_eq!(f.mixture.policies[k], direct.net);
        }
    }

    #[test]
    fn too_many_components_is_an_error() {
        let (units, _) = two_policy_units(2, 5, 6);
        assert!(fit(&units, 3, 2, &quick_edm(), &EmSettings::default(), None).is_err());
    }

    #[test]
    fn select_g_bounds_and_plateau() {
        let (units, _) = two_policy_units(60, 50, 7);
        let s = EmSettings::default();
        assert_eq!(select_g(&units, 1, 2, &quick_edm(), &s).unwrap().best_g, 1);
        let sel = select_g(&units, 4, 2, &quick_edm(), &s).unwrap();
        assert_eq!(sel.best_g, 2);
        // Actions independent of the state: extra components only fit noise.
        let mut rng = rng_from_seed(8);
        let single: Vec<DemoUnit<f64>> = (0..60)
            .map(|_| DemoUnit {
                states: (0..50).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect(),
                actions: (0..50).map(|_| usize::from(rng.random::<f64>() < 0.5)).collect(),
            })
            .collect();
        let sel = select_g(&single, 3, 2, &quick_edm(), &s).unwrap();
        assert_eq!(sel.best_g, 1);
    }
}
