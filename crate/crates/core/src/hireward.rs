//! High-level MDP over (cluster, policy) pairs and the reward regulator
//! learned from it by maximum-likelihood IRL.

use serde::{Deserialize, Serialize};

use crate::emedm::{argmax, PolicyMixture};
use crate::error::{Error, Result};
use crate::rmtticc::Segmentation;
use crate::scalar::{logsumexp, Real};
use crate::trajdata::Dataset;

/// Per-trajectory `(k, g)` episodes, one pair per sub-trajectory.
pub type Episodes = Vec<Vec<(usize, usize)>>;

pub fn build_highlevel_episodes<T: Real>(seg: &Segmentation, mixture: &PolicyMixture<T>) -> Result<Episodes> {
    if seg.sub_trajectories.len() != mixture.responsibilities.len() {
        return Err(Error::Consistency(format!(
            "{} sub-trajectories but {} responsibility rows",
            seg.sub_trajectories.len(),
            mixture.responsibilities.len()
        )));
    }
    let mut out: Episodes = Vec::new();
    let mut current: Option<usize> = None;
    for (s, r) in seg.sub_trajectories.iter().zip(&mixture.responsibilities) {
        if current != Some(s.trajectory) {
            out.push(Vec::new());
            current = Some(s.trajectory);
        }
        out.last_mut().expect("pushed above").push((s.cluster, argmax(r)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct HighLevelMdp<T = f64> {
    pub states: usize,
    pub actions: usize,
    /// `T̂[k][g][k']`, add-one smoothed.
    pub transitions: Vec<Vec<Vec<T>>>,
    pub gamma: T,
    pub episodes: Episodes,
}

impl<T: Real> HighLevelMdp<T> {
    pub fn new(states: usize, actions: usize, gamma: T, episodes: Episodes) -> Result<Self> {
        if states == 0 || actions == 0 {
            return Err(Error::arg("high-level MDP needs K, G >= 1"));
        }
        if !(gamma >= T::zero() && gamma < T::one()) {
            return Err(Error::arg("discount must lie in [0, 1)"));
        }
        if episodes.is_empty() || episodes.iter().any(Vec::is_empty) {
            return Err(Error::arg("episodes must be non-empty"));
        }
        let mut counts = vec![vec![vec![1usize; states]; actions]; states];
        for ep in &episodes {
            for &(k, g) in ep {
                if k >= states || g >= actions {
                    return Err(Error::Consistency(format!("pair ({k}, {g}) outside a {states}x{actions} MDP")));
                }
            }
            for w in ep.windows(2) {
                counts[w[0].0][w[0].1][w[1].0] += 1;
            }
        }
        let transitions = counts
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| {
                        let total = T::from_usize_lossy(c.iter().sum());
                        c.iter().map(|&v| T::from_usize_lossy(v) / total).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(HighLevelMdp { states, actions, transitions, gamma, episodes })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlirlSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub temp: f64,
    /// Value-iteration sweeps differentiated through.
    pub sweeps: usize,
    pub tol: f64,
}

impl Default for MlirlSettings {
    fn default() -> Self {
        MlirlSettings {
            steps: 100,
            learning_rate: 1e-2,
            gamma: 0.95,
            temp: 1.0,
            sweeps: 50,
            tol: 1e-8,
        }
    }
}

impl MlirlSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.temp > 0.0) || !self.learning_rate.is_finite() || !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("MLIRL needs temp > 0, a finite learning rate and gamma in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct RewardRegulator<T = f64> {
    /// `K × G`.
    pub rbar: Vec<Vec<T>>,
    pub boltzmann_temp: T,
    pub gamma: T,
    /// Outer iteration that produced it; 0 for the unit initialisation.
    pub iteration: usize,
}

impl<T: Real> RewardRegulator<T> {
    pub fn ones(k: usize, g: usize, settings: &MlirlSettings) -> Self {
        RewardRegulator {
            rbar: vec![vec![T::one(); g]; k],
            boltzmann_temp: T::lit(settings.temp),
            gamma: T::lit(settings.gamma),
            iteration: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rbar.len(), self.rbar.first().map_or(0, Vec::len))
    }
}

struct SoftValues<T> {
    q: Vec<Vec<T>>,
    v: Vec<T>,
    /// `dQ[k][g][p]` with `p = k'·G + g'`.
    dq: Vec<Vec<Vec<T>>>,
    dv: Vec<Vec<T>>,
}

fn soft_v<T: Real>(q: &[T], temp: T) -> T {
    let scaled: Vec<T> = q.iter().map(|&x| x / temp).collect();
    temp * logsumexp(&scaled)
}

/// Soft value iteration with forward-mode derivatives w.r.t. every `R̄` entry.
fn soft_values<T: Real>(mdp: &HighLevelMdp<T>, rbar: &[Vec<T>], sweeps: usize, tol: T, temp: T) -> SoftValues<T> {
    let (k_n, g_n) = (mdp.states, mdp.actions);
    let p_n = k_n * g_n;
    let unit = |k: usize, g: usize| -> Vec<T> {
        let mut e = vec![T::zero(); p_n];
        e[k * g_n + g] = T::one();
        e
    };
    let mut q: Vec<Vec<T>> = rbar.to_vec();
    let mut dq: Vec<Vec<Vec<T>>> = (0..k_n).map(|k| (0..g_n).map(|g| unit(k, g)).collect()).collect();
    let values = |q: &[Vec<T>], dq: &[Vec<Vec<T>>]| -> (Vec<T>, Vec<Vec<T>>) {
        let mut v = Vec::with_capacity(k_n);
        let mut dv = Vec::with_capacity(k_n);
        for k in 0..k_n {
            let vk = soft_v(&q[k], temp);
            let mut d = vec![T::zero(); p_n];
            for g in 0..g_n {
                let pi = ((q[k][g] - vk) / temp).exp();
                for (dp, &x) in d.iter_mut().zip(&dq[k][g]) {
                    *dp += pi * x;
                }
            }
            v.push(vk);
            dv.push(d);
        }
        (v, dv)
    };
    for _ in 0..sweeps {
        let (v, dv) = values(&q, &dq);
        let mut delta = T::zero();
        let mut nq = vec![vec![T::zero(); g_n]; k_n];
        let mut ndq = vec![vec![vec![T::zero(); p_n]; g_n]; k_n];
        for k in 0..k_n {
            for g in 0..g_n {
                let tr = &mdp.transitions[k][g];
                let mut cont = T::zero();
                let d = &mut ndq[k][g];
                d[k * g_n + g] = T::one();
                for (k2, &p) in tr.iter().enumerate() {
                    cont += p * v[k2];
                    for (x, &y) in d.iter_mut().zip(&dv[k2]) {
                        *x += mdp.gamma * p * y;
                    }
                }
                nq[k][g] = rbar[k][g] + mdp.gamma * cont;
                delta = delta.max((nq[k][g] - q[k][g]).abs());
            }
        }
        q = nq;
        dq = ndq;
        if delta < tol {
            break;
        }
    }
    let (v, dv) = values(&q, &dq);
    SoftValues { q, v, dq, dv }
}

/// `π_B(g | k)` for the given regulator.
pub fn boltzmann_policy<T: Real>(mdp: &HighLevelMdp<T>, rbar: &[Vec<T>], settings: &MlirlSettings) -> Vec<Vec<T>> {
    let temp = T::lit(settings.temp);
    let sv = soft_values(mdp, rbar, settings.sweeps, T::lit(settings.tol), temp);
    sv.q.iter()
        .zip(&sv.v)
        .map(|(row, &v)| row.iter().map(|&q| ((q - v) / temp).exp()).collect())
        .collect()
}

/// Episode log-likelihood under `π_B` and its gradient (flattened `k·G + g`).
pub fn log_likelihood<T: Real>(mdp: &HighLevelMdp<T>, rbar: &[Vec<T>], settings: &MlirlSettings) -> (T, Vec<T>) {
    let temp = T::lit(settings.temp);
    let sv = soft_values(mdp, rbar, settings.sweeps, T::lit(settings.tol), temp);
    let mut ll = T::zero();
    let mut grad = vec![T::zero(); mdp.states * mdp.actions];
    for &(k, g) in mdp.episodes.iter().flatten() {
        ll += (sv.q[k][g] - sv.v[k]) / temp;
        for ((x, &a), &b) in grad.iter_mut().zip(&sv.dq[k][g]).zip(&sv.dv[k]) {
            *x += (a - b) / temp;
        }
    }
    (ll, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MlirlFit<T = f64> {
    pub regulator: RewardRegulator<T>,
    pub loglik_trace: Vec<T>,
}

/// Gradient ascent on the episode likelihood starting from `init`.
pub fn mlirl_fit<T: Real>(mdp: &HighLevelMdp<T>, init: &RewardRegulator<T>, settings: &MlirlSettings) -> Result<MlirlFit<T>> {
    settings.validate()?;
    if init.shape() != (mdp.states, mdp.actions) {
        return Err(Error::Consistency(format!(
            "regulator is {:?} but the MDP is {}x{}",
            init.shape(),
            mdp.states,
            mdp.actions
        )));
    }
    let lr = T::lit(settings.learning_rate);
    let mut rbar = init.rbar.clone();
    let mut trace = Vec::with_capacity(settings.steps + 1);
    for step in 0..=settings.steps {
        let (ll, grad) = log_likelihood(mdp, &rbar, settings);
        if !ll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { epoch: step });
        }
        trace.push(ll);
        if step == settings.steps {
            break;
        }
        for (i, row) in rbar.iter_mut().enumerate() {
            for (j, r) in row.iter_mut().enumerate() {
                *r += lr * grad[i * mdp.actions + j];
            }
        }
    }
    Ok(MlirlFit {
        regulator: RewardRegulator {
            rbar,
            boltzmann_temp: T::lit(settings.temp),
            gamma: T::lit(settings.gamma),
            iteration: init.iteration,
        },
        loglik_trace: trace,
    })
}

/// `r_t = (1/G) Σ_g Π_g(a_t | x_t) R̄(k_t, g)` for every timestep.
pub fn per_timestep_rewards<T: Real>(
    dataset: &Dataset<T>,
    seg: &Segmentation,
    mixture: &PolicyMixture<T>,
    regulator: &RewardRegulator<T>,
) -> Result<Vec<Vec<T>>> {
    let g_n = mixture.components();
    let (k_n, g_r) = regulator.shape();
    if g_n == 0 || g_r != g_n {
        return Err(Error::Consistency(format!("regulator has {g_r} policy columns, mixture has {g_n} policies")));
    }
    if seg.labels.len() != dataset.len() {
        return Err(Error::Consistency("segmentation and dataset have different trajectory counts".into()));
    }
    let gf = T::from_usize_lossy(g_n);
    dataset
        .trajectories
        .iter()
        .zip(&seg.labels)
        .map(|(tr, labels)| {
            if labels.len() != tr.len() {
                return Err(Error::Consistency(format!("label length mismatch in '{}'", tr.id)));
            }
            tr.states
                .iter()
                .zip(&tr.actions)
                .zip(labels)
                .map(|((x, &a), &k)| {
                    if k >= k_n {
                        return Err(Error::Consistency(format!("cluster {k} outside the regulator")));
                    }
                    let s: T = mixture.policies.iter().zip(&regulator.rbar[k]).map(|(p, &r)| p.probs(x)[a] * r).sum();
                    Ok(s / gf)
                })
                .collect()
        })
        .collect()
}

/// `|r_t − r_{t−1}|`, zero at the first step.
pub fn reward_deltas<T: Real>(rewards: &[Vec<T>]) -> Vec<Vec<T>> {
    rewards
        .iter()
        .map(|r| {
            (0..r.len())
                .map(|t| if t == 0 { T::zero() } else { (r[t] - r[t - 1]).abs() })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edm::PolicyNet;
    use crate::linalg::Matrix;
    use crate::rmtticc::Segmentation;
    use crate::trajdata::{default_feature_names, Trajectory};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn mixture_from_resp(resp: Vec<Vec<f64>>) -> PolicyMixture<f64> {
        let g = resp[0].len();
        PolicyMixture {
            priors: vec![1.0 / g as f64; g],
            policies: (0..g).map(|i| PolicyNet::new(1, 2, 2, i as u64)).collect(),
            responsibilities: resp,
        }
    }

    #[test]
    fn run_length_episodes() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let seg = Segmentation::from_labels(&ids, vec![vec![0, 0, 1, 1, 0], vec![1, 1]]);
        let m = mixture_from_resp(vec![vec![0.2, 0.8], vec![0.9, 0.1], vec![0.5, 0.5], vec![0.3, 0.7]]);
        let eps = build_highlevel_episodes(&seg, &m).unwrap();
        assert_eq!(eps, vec![vec![(0, 1), (1, 0), (0, 0)], vec![(1, 1)]]);
        let short = mixture_from_resp(vec![vec![1.0, 0.0]]);
        assert!(matches!(build_highlevel_episodes(&seg, &short), Err(Error::Consistency(_))));
    }

    #[test]
    fn smoothed_transitions_are_distributions() {
        let mdp = HighLevelMdp::<f64>::new(3, 2, 0.9, vec![vec![(0, 1), (2, 0), (2, 0), (1, 1)]]).unwrap();
        for row in mdp.transitions.iter().flatten() {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        }
        // (2,0) -> 2 once and -> 1 once, plus one pseudo-count each.
        assert_relative_eq!(mdp.transitions[2][0][2], 2.0 / 5.0);
        assert_relative_eq!(mdp.transitions[2][0][1], 2.0 / 5.0);
        assert_relative_eq!(mdp.transitions[2][0][0], 1.0 / 5.0);
    }

    fn instance() -> HighLevelMdp<f64> {
        HighLevelMdp::new(
            2,
            2,
            0.95,
            vec![vec![(0, 0), (1, 1), (0, 0), (1, 1)], vec![(1, 1), (0, 0)], vec![(0, 1), (1, 1)]],
        )
        .unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mdp = instance();
        let s = MlirlSettings { sweeps: 5, tol: 0.0, ..Default::default() };
        let r = vec![vec![0.3, -0.2], vec![1.1, 0.4]];
        let (_, g) = log_likelihood(&mdp, &r, &s);
        let h = 1e-5;
        for i in 0..2 {
            for j in 0..2 {
                let mut rp = r.clone();
                rp[i][j] += h;
                let mut rm = r.clone();
                rm[i][j] -= h;
                let fd = (log_likelihood(&mdp, &rp, &s).0 - log_likelihood(&mdp, &rm, &s).0) / (2.0 * h);
                let rel = (fd - g[i * 2 + j]).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-4, "entry ({i},{j}): fd {fd} analytic {}", g[i * 2 + j]);
            }
        }
    }

    #[test]
    fn recovers_identity_preference_with_monotone_trace() {
        let mdp = HighLevelMdp::<f64>::new(2, 2, 0.95, vec![vec![(0, 0), (1, 1), (0, 0), (1, 1), (0, 0)]; 4]).unwrap();
        let s = MlirlSettings { steps: 200, ..Default::default() };
        let fit = mlirl_fit(&mdp, &RewardRegulator::ones(2, 2, &s), &s).unwrap();
        let r = &fit.regulator.rbar;
        assert!(r[0][0] > r[0][1] && r[1][1] > r[1][0], "{r:?}");
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn trivial_mdp_has_unit_policy() {
        let mdp = HighLevelMdp::<f64>::new(1, 1, 0.95, vec![vec![(0, 0); 3]]).unwrap();
        let s = MlirlSettings::default();
        let fit = mlirl_fit(&mdp, &RewardRegulator::ones(1, 1, &s), &s).unwrap();
        assert_relative_eq!(boltzmann_policy(&mdp, &fit.regulator.rbar, &s)[0][0], 1.0, epsilon = 1e-12);
        for &ll in &fit.loglik_trace {
            assert!(ll.abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn boltzmann_rows_and_shift_invariance(r in prop::collection::vec(-3.0..3.0f64, 6), c in -5.0..5.0f64) {
            let mdp = HighLevelMdp::<f64>::new(2, 3, 0.95, vec![vec![(0, 2), (1, 0), (0, 1)]]).unwrap();
            let s = MlirlSettings::default();
            let rbar: Vec<Vec<f64>> = r.chunks(3).map(<[f64]>::to_vec).collect();
            let shifted: Vec<Vec<f64>> = rbar.iter().map(|row| row.iter().map(|v| v + c).collect()).collect();
            let p = boltzmann_policy(&mdp, &rbar, &s);
            let q = boltzmann_policy(&mdp, &shifted, &s);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    fn constant_net(p1: f64) -> PolicyNet<f64> {
        let mut net = PolicyNet::new(1, 1, 2, 0);
        net.w2 = Matrix::zeros(2, 1);
        net.b2 = vec![0.0, (p1 / (1.0 - p1)).ln()];
        net
    }

    fn small_dataset(actions: Vec<usize>) -> Dataset<f64> {
        let t = actions.len();
        let tr = Trajectory {
            id: "a".into(),
            states: (0..t).map(|i| vec![i as f64]).collect(),
            actions,
            timestamps: (0..t).map(|i| i as f64).collect(),
        };
        Dataset::new(vec![tr], default_feature_names(1), 2).unwrap()
    }

    #[test]
    fn unit_regulator_single_policy() {
        let d = small_dataset(vec![1, 1]);
        let seg = Segmentation::from_labels(&["a".to_string()], vec![vec![0, 0]]);
        let m = PolicyMixture { priors: vec![1.0], policies: vec![constant_net(0.7)], responsibilities: vec![vec![1.0]] };
        let reg = RewardRegulator::ones(1, 1, &MlirlSettings::default());
        for r in &per_timestep_rewards(&d, &seg, &m, &reg).unwrap()[0] {
            assert_relative_eq!(*r, 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_rewards_and_linearity() {
        let d = small_dataset(vec![1, 0, 1]);
        let seg = Segmentation::from_labels(&["a".to_string()], vec![vec![0, 1, 1]]);
        let m = PolicyMixture {
            priors: vec![0.5, 0.5],
            policies: vec![constant_net(0.2), constant_net(0.6)],
            responsibilities: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        let mut reg = RewardRegulator::ones(2, 2, &MlirlSettings::default());
        reg.rbar = vec![vec![2.0, -1.0], vec![0.5, 3.0]];
        let r = per_timestep_rewards(&d, &seg, &m, &reg).unwrap();
        // t0: k=0, a=1 -> (0.2*2 + 0.6*-1)/2; t1: k=1, a=0 -> (0.8*0.5 + 0.4*3)/2; t2: k=1, a=1 -> (0.2*0.5 + 0.6*3)/2
        let expect = [-0.1, 0.8, 0.95];
        for (a, b) in r[0].iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        let deltas = reward_deltas(&r);
        assert_relative_eq!(deltas[0][1], 0.9, epsilon = 1e-12);
        assert_eq!(deltas[0][0], 0.0);
        let mut scaled = reg.clone();
        scaled.rbar.iter_mut().flatten().for_each(|v| *v *= -2.5);
        for (a, b) in per_timestep_rewards(&d, &seg, &m, &scaled).unwrap()[0].iter().zip(&r[0]) {
            assert_relative_eq!(*a, -2.5 * b, epsilon = 1e-12);
        }
    }
}
