//! Offline policy learning by energy-based distribution matching.
//!
//! A softmax policy `Π(a|x) ∝ exp f(x)[a]` doubles as an energy model over
//! states with `E(x) = -logsumexp f(x)`. Training minimises behaviour cloning
//! plus `α` times the occupancy loss `mean E(demo) - mean E(negatives)`, with
//! negatives drawn by Langevin dynamics from a persistent replay buffer.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{logsumexp, softmax_into, Real};
use crate::seeding::{rng_from_seed, Rng};

/// Anything with a differentiable scalar energy over states.
pub trait Energy<T: Real> {
    fn dim(&self) -> usize;
    fn energy(&self, x: &[T]) -> T;
    fn energy_grad_x(&self, x: &[T]) -> Vec<T>;
}

/// `E(x) = ½ xᵀ x / σ²`.
#[derive(Clone, Debug)]
pub struct QuadraticEnergy<T = f64> {
    pub dim: usize,
    pub precision: T,
}

impl<T: Real> Energy<T> for QuadraticEnergy<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: &[T]) -> T {
        T::lit(0.5) * self.precision * x.iter().map(|&v| v * v).sum::<T>()
    }

    fn energy_grad_x(&self, x: &[T]) -> Vec<T> {
        x.iter().map(|&v| self.precision * v).collect()
    }
}

/// One-hidden-layer tanh network mapping standardised states to logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PolicyNet<T = f64> {
    pub input_shift: Vec<T>,
    pub input_scale: Vec<T>,
    /// `H × m`.
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    /// `A × H`.
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Gradient with the same layout as the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrad<T = f64> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Real> NetGrad<T> {
    fn zeros_like(net: &PolicyNet<T>) -> Self {
        NetGrad {
            w1: vec![T::zero(); net.w1.as_slice().len()],
            b1: vec![T::zero(); net.b1.len()],
            w2: vec![T::zero(); net.w2.as_slice().len()],
            b2: vec![T::zero(); net.b2.len()],
        }
    }

    pub fn slices(&self) -> [&[T]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

struct Forward<T> {
    z: Vec<T>,
    h: Vec<T>,
    logits: Vec<T>,
}

impl<T: Real> PolicyNet<T> {
    /// Small random weights; identity standardisation.
    pub fn new(state_dim: usize, hidden: usize, actions: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        Self::init(state_dim, hidden, actions, &mut rng)
    }

    fn init(m: usize, h: usize, a: usize, rng: &mut Rng) -> Self {
        let s1 = (1.0 / m.max(1) as f64).sqrt();
        let s2 = (1.0 / h.max(1) as f64).sqrt();
        PolicyNet {
            input_shift: vec![T::zero(); m],
            input_scale: vec![T::one(); m],
            w1: Matrix::from_fn(h, m, |_, _| T::lit(s1 * rng.sample::<f64, _>(StandardNormal))),
            b1: vec![T::zero(); h],
            w2: Matrix::from_fn(a, h, |_, _| T::lit(s2 * rng.sample::<f64, _>(StandardNormal))),
            b2: vec![T::zero(); a],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn actions(&self) -> usize {
        self.w2.rows()
    }

    fn forward(&self, x: &[T]) -> Forward<T> {
        let z: Vec<T> = x
            .iter()
            .zip(&self.input_shift)
            .zip(&self.input_scale)
            .map(|((&v, &s), &c)| (v - s) * c)
            .collect();
        let mut h = self.w1.matvec(&z);
        for (v, &b) in h.iter_mut().zip(&self.b1) {
            *v = (*v + b).tanh();
        }
        let mut logits = self.w2.matvec(&h);
        for (v, &b) in logits.iter_mut().zip(&self.b2) {
            *v += b;
        }
        Forward { z, h, logits }
    }

    pub fn logits(&self, x: &[T]) -> Vec<T> {
        self.forward(x).logits
    }

    pub fn log_probs(&self, x: &[T]) -> Vec<T> {
        let l = self.logits(x);
        let lse = logsumexp(&l);
        l.into_iter().map(|v| v - lse).collect()
    }

    pub fn probs(&self, x: &[T]) -> Vec<T> {
        let l = self.logits(x);
        let mut p = vec![T::zero(); l.len()];
        softmax_into(&l, &mut p);
        p
    }

    pub fn log_prob(&self, x: &[T], a: usize) -> T {
        self.log_probs(x)[a]
    }

    /// Accumulates `scale * ∂(output)/∂θ` given `∂output/∂logits`.
    fn backward(&self, f: &Forward<T>, g_logits: &[T], scale: T, grad: &mut NetGrad<T>) -> Vec<T> {
        let hid = self.hidden();
        let mut g_h = vec![T::zero(); hid];
        for (a, &g) in g_logits.iter().enumerate() {
            let g = g * scale;
            grad.b2[a] += g;
            let row = &mut grad.w2[a * hid..(a + 1) * hid];
            for (j, r) in row.iter_mut().enumerate() {
                *r += g * f.h[j];
            }
            for (j, gh) in g_h.iter_mut().enumerate() {
                *gh += g * self.w2[(a, j)];
            }
        }
        let m = self.state_dim();
        for j in 0..hid {
            let g_pre = g_h[j] * (T::one() - f.h[j] * f.h[j]);
            g_h[j] = g_pre;
            grad.b1[j] += g_pre;
            let row = &mut grad.w1[j * m..(j + 1) * m];
            for (i, r) in row.iter_mut().enumerate() {
                *r += g_pre * f.z[i];
            }
        }
        g_h
    }

    /// Weighted mean and standard deviation of the states become the input
    /// standardisation.
    pub fn standardize_from(&mut self, samples: &[WeightedSample<T>]) {
        let m = self.state_dim();
        let total: f64 = samples.iter().map(|s| s.weight.as_f64()).sum();
        if !(total > 0.0) {
            return;
        }
        for i in 0..m {
            let mean = samples.iter().map(|s| s.weight.as_f64() * s.state[i].as_f64()).sum::<f64>() / total;
            let var = samples
                .iter()
                .map(|s| s.weight.as_f64() * (s.state[i].as_f64() - mean).powi(2))
                .sum::<f64>()
                / total;
            self.input_shift[i] = T::lit(mean);
            self.input_scale[i] = T::lit(if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 });
        }
    }
}

impl<T: Real> Energy<T> for PolicyNet<T> {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn energy(&self, x: &[T]) -> T {
        -logsumexp(&self.logits(x))
    }

    fn energy_grad_x(&self, x: &[T]) -> Vec<T> {
        let f = self.forward(x);
        let mut p = vec![T::zero(); f.logits.len()];
        softmax_into(&f.logits, &mut p);
        let g_logits: Vec<T> = p.iter().map(|&v| -v).collect();
        let hid = self.hidden();
        let mut g_pre = vec![T::zero(); hid];
        for (a, &g) in g_logits.iter().enumerate() {
            for j in 0..hid {
                g_pre[j] += g * self.w2[(a, j)];
            }
        }
        for j in 0..hid {
            g_pre[j] *= T::one() - f.h[j] * f.h[j];
        }
        let mut gx = self.w1.transpose().matvec(&g_pre);
        for (g, &c) in gx.iter_mut().zip(&self.input_scale) {
            *g *= c;
        }
        gx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct WeightedSample<T = f64> {
    pub state: Vec<T>,
    pub action: usize,
    pub weight: T,
}

impl<T: Real> WeightedSample<T> {
    pub fn new(state: Vec<T>, action: usize, weight: T) -> Self {
        WeightedSample { state, action, weight }
    }
}

fn check_weights<T: Real>(batch: &[WeightedSample<T>]) -> Result<T> {
    if batch.iter().any(|s| !(s.weight >= T::zero()) || !s.weight.is_finite()) {
        return Err(Error::arg("sample weights must be finite and non-negative"));
    }
    let total: T = batch.iter().map(|s| s.weight).sum();
    if !(total > T::zero()) {
        return Err(Error::arg("total sample weight is zero"));
    }
    Ok(total)
}

/// Weighted mean negative log-probability of the demonstrated actions.
pub fn bc_loss<T: Real>(batch: &[WeightedSample<T>], net: &PolicyNet<T>) -> Result<T> {
    let total = check_weights(batch)?;
    let mut acc = T::zero();
    for s in batch {
        if s.action >= net.actions() {
            return Err(Error::arg(format!("action {} out of range", s.action)));
        }
        acc += s.weight * -net.log_prob(&s.state, s.action);
    }
    Ok(acc / total)
}

/// `mean E(demo) - mean E(negatives)`.
pub fn occupancy_loss<T: Real, E: Energy<T>>(demo: &[Vec<T>], negatives: &[Vec<T>], net: &E) -> Result<T> {
    if demo.is_empty() || negatives.is_empty() {
        return Err(Error::arg("occupancy loss needs non-empty batches"));
    }
    let mean = |xs: &[Vec<T>]| xs.iter().map(|x| net.energy(x)).sum::<T>() / T::from_usize_lossy(xs.len());
    Ok(mean(demo) - mean(negatives))
}

/// Value and parameter gradient of
/// `Σ w·(−log Π(a|x)) / norm + α (Σ w·E(x) / norm_w − mean E(neg))`,
/// where `norm` defaults to the total weight of `batch`.
pub fn composite_loss_grad<T: Real>(
    net: &PolicyNet<T>,
    batch: &[WeightedSample<T>],
    negatives: &[Vec<T>],
    alpha: T,
    norm: Option<T>,
) -> Result<(T, NetGrad<T>)> {
    let total = check_weights(batch)?;
    let norm = norm.unwrap_or(total);
    let mut grad = NetGrad::zeros_like(net);
    let mut loss = T::zero();
    let a_count = net.actions();
    let use_occ = alpha != T::zero() && !negatives.is_empty();
    let mut p = vec![T::zero(); a_count];
    let mut g = vec![T::zero(); a_count];
    for s in batch {
        if s.action >= a_count {
            return Err(Error::arg(format!("action {} out of range", s.action)));
        }
        if s.weight == T::zero() {
            continue;
        }
        let f = net.forward(&s.state);
        let lse = logsumexp(&f.logits);
        softmax_into(&f.logits, &mut p);
        let w = s.weight / norm;
        loss += w * (lse - f.logits[s.action]);
        // d(−log p_a)/dlogits = p − e_a; d(αE)/dlogits = −α p.
        for a in 0..a_count {
            let onehot = if a == s.action { T::one() } else { T::zero() };
            g[a] = p[a] - onehot;
            if use_occ {
                g[a] -= alpha * p[a];
            }
        }
        if use_occ {
            loss += w * alpha * -lse;
        }
        net.backward(&f, &g, w, &mut grad);
    }
    if use_occ {
        let inv = T::one() / T::from_usize_lossy(negatives.len());
        for x in negatives {
            let f = net.forward(x);
            let lse = logsumexp(&f.logits);
            softmax_into(&f.logits, &mut p);
            loss += alpha * inv * lse;
            for a in 0..a_count {
                g[a] = alpha * p[a];
            }
            net.backward(&f, &g, inv, &mut grad);
        }
    }
    Ok((loss, grad))
}

/// Langevin dynamics `x ← x − (s/2)∇E(x) + σ ξ` on every state.
pub fn sgld_sample<T: Real, E: Energy<T>>(
    energy: &E,
    init: &[Vec<T>],
    steps: usize,
    step_size: T,
    noise_scale: T,
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    if steps < 1 {
        return Err(Error::arg("SGLD needs at least one step"));
    }
    let mut rng = rng_from_seed(seed);
    let mut xs = init.to_vec();
    sgld_in_place(energy, &mut xs, steps, step_size, noise_scale, &mut rng)?;
    Ok(xs)
}

fn sgld_in_place<T: Real, E: Energy<T>>(
    energy: &E,
    xs: &mut [Vec<T>],
    steps: usize,
    step_size: T,
    noise_scale: T,
    rng: &mut Rng,
) -> Result<()> {
    let half = T::lit(0.5) * step_size;
    for step in 0..steps {
        for x in xs.iter_mut() {
            let g = energy.energy_grad_x(x);
            for (v, gv) in x.iter_mut().zip(g) {
                let xi: f64 = rng.sample(StandardNormal);
                *v = *v - half * gv + noise_scale * T::lit(xi);
                if !v.is_finite() {
                    return Err(Error::Sampler { step });
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdmConfig {
    /// `α`, weight of the occupancy loss.
    pub occupancy_weight: f64,
    pub sgld_steps: usize,
    pub sgld_step_size: f64,
    pub sgld_noise_scale: f64,
    pub replay_buffer_size: usize,
    pub reinit_prob: f64,
    pub negatives_per_batch: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    /// Discount of the occupancy measure; the sample-based loss never uses it.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for EdmConfig {
    fn default() -> Self {
        EdmConfig {
            occupancy_weight: 0.5,
            sgld_steps: 20,
            sgld_step_size: 1e-2,
            sgld_noise_scale: 1e-2,
            replay_buffer_size: 1024,
            reinit_prob: 0.05,
            negatives_per_batch: 16,
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 256,
            hidden: 64,
            gamma: 0.99,
            seed: 0,
        }
    }
}

impl EdmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.occupancy_weight >= 0.0) || !self.occupancy_weight.is_finite() {
            return bad("occupancy_weight must be finite and non-negative");
        }
        if self.sgld_steps == 0 || self.replay_buffer_size == 0 || self.negatives_per_batch == 0 {
            return bad("SGLD steps, buffer size and negatives per batch must be positive");
        }
        if !(self.sgld_step_size > 0.0) || !(self.sgld_noise_scale > 0.0) || !(self.learning_rate > 0.0) {
            return bad("SGLD step, noise scale and learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.reinit_prob) {
            return bad("reinit_prob must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return bad("batch_size and hidden must be positive");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TrainedPolicy<T = f64> {
    pub net: PolicyNet<T>,
    /// Mean composite loss per epoch.
    pub loss_trace: Vec<T>,
}

struct Adam<T> {
    m: NetGrad<T>,
    v: NetGrad<T>,
    t: i32,
    lr: f64,
}

impl<T: Real> Adam<T> {
    fn new(net: &PolicyNet<T>, lr: f64) -> Self {
        Adam {
            m: NetGrad::zeros_like(net),
            v: NetGrad::zeros_like(net),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, net: &mut PolicyNet<T>, g: &NetGrad<T>) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let lr = T::lit(self.lr);
        let upd = |p: &mut [T], m: &mut [T], v: &mut [T], g: &[T]| {
            for i in 0..p.len() {
                m[i] = T::lit(B1) * m[i] + T::lit(1.0 - B1) * g[i];
                v[i] = T::lit(B2) * v[i] + T::lit(1.0 - B2) * g[i] * g[i];
                let mh = m[i] / T::lit(c1);
                let vh = v[i] / T::lit(c2);
                p[i] -= lr * mh / (vh.sqrt() + T::lit(EPS));
            }
        };
        upd(net.w1.as_mut_slice(), &mut self.m.w1, &mut self.v.w1, &g.w1);
        upd(&mut net.b1, &mut self.m.b1, &mut self.v.b1, &g.b1);
        upd(net.w2.as_mut_slice(), &mut self.m.w2, &mut self.v.w2, &g.w2);
        upd(&mut net.b2, &mut self.m.b2, &mut self.v.b2, &g.b2);
    }
}

/// Trains a fresh network whose input standardisation comes from `demos`.
pub fn train<T: Real>(demos: &[WeightedSample<T>], action_count: usize, config: &EdmConfig) -> Result<TrainedPolicy<T>> {
    config.validate()?;
    if demos.is_empty() {
        return Err(Error::arg("no demonstrations"));
    }
    check_weights(demos)?;
    let m = demos[0].state.len();
    let mut rng = rng_from_seed(config.seed);
    let mut net = PolicyNet::init(m, config.hidden, action_count, &mut rng);
    net.standardize_from(demos);
    fit_loop(net, demos, config, config.epochs, &mut rng)
}

/// Continues training an existing network for `epochs` epochs.
pub fn train_from<T: Real>(
    net: PolicyNet<T>,
    demos: &[WeightedSample<T>],
    config: &EdmConfig,
    epochs: usize,
) -> Result<TrainedPolicy<T>> {
    config.validate()?;
    if demos.is_empty() {
        return Err(Error::arg("no demonstrations"));
    }
    check_weights(demos)?;
    let mut rng = rng_from_seed(config.seed);
    fit_loop(net, demos, config, epochs, &mut rng)
}

fn fit_loop<T: Real>(
    mut net: PolicyNet<T>,
    demos: &[WeightedSample<T>],
    config: &EdmConfig,
    epochs: usize,
    rng: &mut Rng,
) -> Result<TrainedPolicy<T>> {
    let m = net.state_dim();
    if demos.iter().any(|s| s.state.len() != m || s.action >= net.actions()) {
        return Err(Error::arg("demonstrations do not match the network shape"));
    }
    let n = demos.len();
    let total: T = demos.iter().map(|s| s.weight).sum();
    let bsz = config.batch_size.min(n);
    let alpha = T::lit(config.occupancy_weight);
    let use_occ = config.occupancy_weight > 0.0;
    let picker = if use_occ {
        Some(
            WeightedIndex::new(demos.iter().map(|s| s.weight.as_f64()))
                .map_err(|e| Error::arg(format!("invalid sample weights: {e}")))?,
        )
    } else {
        None
    };
    let mut buffer: Vec<Vec<T>> = match &picker {
        Some(p) => (0..config.replay_buffer_size)
            .map(|_| demos[p.sample(rng)].state.clone())
            .collect(),
        None => Vec::new(),
    };
    let mut adam = Adam::new(&net, config.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(epochs);
    let step = T::lit(config.sgld_step_size);
    let noise = T::lit(config.sgld_noise_scale);
    let mut batch: Vec<WeightedSample<T>> = Vec::with_capacity(bsz);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = T::zero();
        let mut batches = 0usize;
        for chunk in order.chunks(bsz) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| demos[i].clone()));
            if !batch.iter().any(|s| s.weight > T::zero()) {
                continue;
            }
            let negatives = match &picker {
                Some(p) => {
                    let mut idx = Vec::with_capacity(config.negatives_per_batch);
                    let mut negs = Vec::with_capacity(config.negatives_per_batch);
                    for _ in 0..config.negatives_per_batch {
                        let b = rng.random_range(0..buffer.len());
                        if rng.random::<f64>() < config.reinit_prob {
                            buffer[b] = demos[p.sample(rng)].state.clone();
                        }
                        idx.push(b);
                        negs.push(buffer[b].clone());
                    }
                    sgld_in_place(&net, &mut negs, config.sgld_steps, step, noise, rng)?;
                    for (b, x) in idx.into_iter().zip(&negs) {
                        buffer[b].clone_from(x);
                    }
                    negs
                }
                None => Vec::new(),
            };
            // Normalising by the expected batch weight keeps low-weight
            // batches from being inflated.
            let norm = total * T::from_usize_lossy(chunk.len()) / T::from_usize_lossy(n);
            let (loss, grad) = composite_loss_grad(&net, &batch, &negatives, alpha, Some(norm))?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Training { epoch });
            }
            adam.step(&mut net, &grad);
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / T::from_usize_lossy(batches.max(1));
        if !mean.is_finite() {
            return Err(Error::Training { epoch });
        }
        trace.push(mean);
    }
    Ok(TrainedPolicy { net, loss_trace: trace })
}

/// Fraction of samples whose most likely action is the demonstrated one.
pub fn accuracy<T: Real>(net: &PolicyNet<T>, samples: &[WeightedSample<T>]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| {
            let p = net.logits(&s.state);
            let mut best = 0;
            for a in 1..p.len() {
                if p[a] > p[best] {
                    best = a;
                }
            }
            best == s.action
        })
        .count();
    hits as f64 / samples.len() as f64
}
