//! The full pipeline: segmentation, policy mixture and reward regulator in an
//! outer loop, plus test-time action prediction and the ablation variants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::edm::{self, EdmConfig, WeightedSample};
use crate::emedm::{self, component_seeds, units_from_segmentation, units_from_trajectories, DemoUnit, EmInit, EmSettings, MixtureFit, PolicyMixture};
use crate::error::{Error, Result};
use crate::metrics::{self, RunMetrics};
use crate::hireward::{self, HighLevelMdp, MlirlSettings, RewardRegulator};
use crate::persist::{self, SCHEMA_VERSION};
use crate::rmtticc::{self, ClusterModel, PenaltyInputs, PhiMode, PhiParams, Segmentation, SegmentationInput, TiccFit, TiccSettings};
use crate::scalar::{softmax_into, Real};
use crate::seeding::{derive_seed, streams};
use crate::trajdata::Dataset;

/// One value kind of the flat configuration file.
trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_config_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("cannot parse '{s}': {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_config_value!(usize, u64, f64, bool, PhiMode);

impl ConfigValue for Option<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(None)
        } else {
            usize::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.to_string())
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| usize::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThemesConfig {
    /// Fixed number of clusters, or `None` to pick one by BIC.
    pub k: Option<usize>,
    pub k_candidates: Vec<usize>,
    pub window: usize,
    pub beta: f64,
    pub phi_mode: PhiMode,
    /// Scale the switch penalty so it equals `beta` at the Φ mean.
    pub phi_normalize: bool,
    pub phi_ridge: f64,
    /// Fixed number of policies, or `None` to grow G up to `g_max`.
    pub g: Option<usize>,
    pub g_max: usize,
    pub outer_iters: usize,
    /// Stop after the first segmentation and mixture fit.
    pub skip_regulator: bool,
    pub ticc: TiccSettings,
    pub em: EmSettings,
    pub edm: EdmConfig,
    pub mlirl: MlirlSettings,
    pub seed: u64,
}

impl Default for ThemesConfig {
    fn default() -> Self {
        ThemesConfig {
            k: None,
            k_candidates: (2..=7).collect(),
            window: 2,
            beta: 4.0,
            phi_mode: PhiMode::Density,
            phi_normalize: true,
            phi_ridge: 1e-6,
            g: None,
            g_max: 4,
            outer_iters: 10,
            skip_regulator: false,
            ticc: TiccSettings::default(),
            em: EmSettings::default(),
            edm: EdmConfig::default(),
            mlirl: MlirlSettings::default(),
            seed: 0,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal, $doc:literal => $($field:ident).+;)*) => {
        /// Every configuration key with a one-line description.
        pub const CONFIG_KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl ThemesConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value.trim())
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
                }
                Ok(())
            }

            /// `(key, rendered value)` in canonical order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

config_keys! {
    "k", "number of clusters, or auto for BIC selection" => k;
    "k_candidates", "comma-separated K values tried by BIC" => k_candidates;
    "window", "window size" => window;
    "lambda", "sparsity weight of the Toeplitz graphical lasso" => ticc.lambda;
    "beta", "switch penalty scale" => beta;
    "phi_mode", "density or cdf" => phi_mode;
    "phi_normalize", "scale the penalty to equal beta at the mean of (dr, dt)" => phi_normalize;
    "phi_ridge", "ridge added to the fitted (dr, dt) covariance" => phi_ridge;
    "ticc_max_iters", "segmentation EM iterations" => ticc.max_iters;
    "ticc_rel_tol", "segmentation relative objective tolerance" => ticc.rel_tol;
    "ticc_min_cluster_size", "clusters smaller than this keep their previous fit; 0 uses the window dimension" => ticc.min_cluster_size;
    "admm_rho", "ADMM penalty parameter" => ticc.admm.penalty_rho;
    "admm_max_iters", "ADMM iteration cap" => ticc.admm.max_iters;
    "admm_abs_tol", "ADMM absolute tolerance" => ticc.admm.abs_tol;
    "admm_rel_tol", "ADMM relative tolerance" => ticc.admm.rel_tol;
    "g", "number of policies, or auto" => g;
    "g_max", "largest G tried when g = auto" => g_max;
    "em_max_iters", "policy mixture EM iterations" => em.max_iters;
    "em_rel_tol", "policy mixture relative log-likelihood tolerance" => em.rel_tol;
    "em_warm_epochs", "training epochs per warm-started M-step" => em.warm_epochs;
    "em_min_weight", "ignore units with smaller responsibility when training a policy" => em.min_weight;
    "edm_alpha", "weight of the occupancy loss" => edm.occupancy_weight;
    "edm_sgld_steps", "Langevin steps per negative sample" => edm.sgld_steps;
    "edm_sgld_step_size", "Langevin step size" => edm.sgld_step_size;
    "edm_sgld_noise", "Langevin noise scale" => edm.sgld_noise_scale;
    "edm_buffer", "replay buffer size" => edm.replay_buffer_size;
    "edm_reinit_prob", "probability of restarting a chain from a demonstration" => edm.reinit_prob;
    "edm_negatives", "negative samples per batch" => edm.negatives_per_batch;
    "edm_learning_rate", "Adam learning rate" => edm.learning_rate;
    "edm_epochs", "training epochs of a fresh policy" => edm.epochs;
    "edm_batch_size", "minibatch size" => edm.batch_size;
    "edm_hidden", "hidden units of the policy network" => edm.hidden;
    "edm_gamma", "occupancy discount" => edm.gamma;
    "mlirl_steps", "gradient ascent steps of the reward regulator" => mlirl.steps;
    "mlirl_learning_rate", "reward regulator learning rate" => mlirl.learning_rate;
    "mlirl_gamma", "high-level discount" => mlirl.gamma;
    "mlirl_temp", "Boltzmann temperature" => mlirl.temp;
    "mlirl_sweeps", "value iteration sweeps" => mlirl.sweeps;
    "mlirl_tol", "value iteration sup-norm tolerance" => mlirl.tol;
    "outer_iters", "outer iteration cap" => outer_iters;
    "skip_regulator", "stop after the first segmentation and mixture fit" => skip_regulator;
    "seed", "base random seed" => seed;
}

impl ThemesConfig {
    /// `key = value` lines with `#` comments; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ThemesConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            c.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ((key, value), (_, doc)) in self.entries().into_iter().zip(CONFIG_KEYS) {
            out.push_str(&format!("# {doc}\n{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.outer_iters < 1 {
            return bad("outer_iters must be at least 1");
        }
        if self.window < 1 {
            return bad("window must be at least 1");
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta must be finite and non-negative");
        }
        if !(self.phi_ridge >= 0.0) {
            return bad("phi_ridge must be non-negative");
        }
        if self.k == Some(0) || self.g == Some(0) || self.g_max == 0 {
            return bad("K and G must be at least 1");
        }
        if self.k.is_none() && (self.k_candidates.is_empty() || self.k_candidates.contains(&0)) {
            return bad("k_candidates must list positive values");
        }
        if !(self.ticc.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.ticc.max_iters == 0 || self.em.max_iters == 0 {
            return bad("iteration caps must be positive");
        }
        self.ticc.admm.validate()?;
        self.edm.validate()?;
        self.mlirl.validate()
    }

    fn penalty<T: Real>(&self, phi: Option<PhiParams<T>>) -> Result<PenaltyInputs<T>> {
        let beta = T::lit(self.beta);
        match phi {
            Some(p) => PenaltyInputs::new(beta, p, self.phi_mode, self.phi_normalize),
            None => PenaltyInputs::with_unit_phi(beta, self.phi_mode, self.phi_normalize),
        }
    }

    fn edm_config(&self) -> EdmConfig {
        EdmConfig { seed: self.seed, ..self.edm.clone() }
    }

    fn ticc_settings(&self, iteration: usize) -> TiccSettings {
        TiccSettings { seed: derive_seed(self.seed, streams::TICC_INIT, iteration as u64), ..self.ticc.clone() }
    }

    fn em_settings(&self, iteration: usize) -> EmSettings {
        EmSettings { seed: derive_seed(self.seed, streams::EM_INIT, iteration as u64), ..self.em.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "EDM")]
    Edm,
    #[serde(rename = "EM-EDM")]
    EmEdm,
    #[serde(rename = "MT-TICC&EDM")]
    MtTiccEdm,
    #[serde(rename = "THEMES_0")]
    Themes0,
    #[serde(rename = "THEMES")]
    Themes,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Edm, Ablation::EmEdm, Ablation::MtTiccEdm, Ablation::Themes0, Ablation::Themes];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Edm => "EDM",
            Ablation::EmEdm => "EM-EDM",
            Ablation::MtTiccEdm => "MT-TICC&EDM",
            Ablation::Themes0 => "THEMES_0",
            Ablation::Themes => "THEMES",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::arg(format!("unknown ablation '{s}' (expected EDM, EM-EDM, MT-TICC&EDM, THEMES_0 or THEMES)")))
    }
}

/// How test-time mixture weights are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routing {
    /// Causal posterior over policies within each sub-trajectory.
    Mixture,
    /// Policy index equals the cluster label.
    ByCluster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterDiagnostics {
    pub iteration: usize,
    pub k: usize,
    pub g: usize,
    pub ticc_objective: f64,
    pub ticc_iterations: usize,
    pub em_loglik: f64,
    pub em_iterations: usize,
    pub mlirl_loglik: Option<f64>,
    /// Timesteps whose cluster changed since the previous iteration.
    pub label_changes: Option<usize>,
    /// Units whose argmax policy changed; only defined when labels did not change.
    pub assignment_changes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ThemesModel<T = f64> {
    pub schema_version: u32,
    pub method: Ablation,
    pub config: ThemesConfig,
    pub state_dim: usize,
    pub action_count: usize,
    pub trajectory_ids: Vec<String>,
    pub k: usize,
    pub g: usize,
    /// `None` when every trajectory is a single unit.
    pub clusters: Option<Vec<ClusterModel<T>>>,
    pub penalty: PenaltyInputs<T>,
    pub segmentation: Segmentation,
    pub mixture: PolicyMixture<T>,
    pub regulator: RewardRegulator<T>,
    pub routing: Routing,
    pub diagnostics: Vec<OuterDiagnostics>,
    pub bic_scores: Option<Vec<(usize, Option<f64>)>>,
    pub g_logliks: Option<Vec<(usize, f64)>>,
}

pub const MODEL_FILE: &str = "model.json";

impl<T: Real> ThemesModel<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        persist::save_json(&dir.join(MODEL_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let m: Self = persist::load_json(&path)?;
        persist::check_schema(&path, m.schema_version)?;
        m.check_alignment()?;
        Ok(m)
    }

    pub fn check_alignment(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Consistency(m));
        if self.mixture.components() != self.g || self.regulator.shape() != (self.k, self.g) {
            return fail(format!("model components disagree with K = {}, G = {}", self.k, self.g));
        }
        if let Some(c) = &self.clusters {
            if c.len() != self.k || c.iter().any(|c| c.dim() != self.state_dim * self.config.window) {
                return fail("cluster models disagree with K or the window dimension".into());
            }
        }
        if self.segmentation.sub_trajectories.len() != self.mixture.responsibilities.len() {
            return fail("every sub-trajectory needs one responsibility row".into());
        }
        if self.segmentation.labels.len() != self.trajectory_ids.len() {
            return fail("segmentation does not cover the training trajectories".into());
        }
        if self.routing == Routing::ByCluster && self.g != self.k {
            return fail("cluster routing needs one policy per cluster".into());
        }
        Ok(())
    }
}

fn whole_trajectory_segmentation<T: Real>(d: &Dataset<T>) -> Segmentation {
    let ids: Vec<String> = d.trajectories.iter().map(|t| t.id.clone()).collect();
    Segmentation::from_labels(&ids, d.trajectories.iter().map(|t| vec![0; t.len()]).collect())
}

fn in_iteration<V>(iteration: usize, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        e @ Error::OuterIteration { .. } => e,
        e => Error::OuterIteration { iteration, source: Box::new(e) },
    })
}

fn changed_labels(a: &[Vec<usize>], b: &[Vec<usize>]) -> usize {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).filter(|(p, q)| p != q).count()).sum()
}

fn last_or_nan<T: Real>(v: &[T]) -> f64 {
    v.last().map_or(f64::NAN, |x| x.as_f64())
}

struct FirstPass<T: Real> {
    input: SegmentationInput<T>,
    ticc: TiccFit<T>,
    k: usize,
    bic_scores: Option<Vec<(usize, Option<f64>)>>,
    penalty: PenaltyInputs<T>,
}

/// Φ fitted to the training `(Δr, Δt)` pairs; zero reward changes when
/// `deltas` is `None`. Falls back to the unit Φ without at least two pairs.
fn fit_phi<T: Real>(input: &SegmentationInput<T>, deltas: Option<&[Vec<T>]>, config: &ThemesConfig) -> Result<PenaltyInputs<T>> {
    let pairs: Vec<[T; 2]> = input
        .delta_ts
        .iter()
        .enumerate()
        .flat_map(|(n, dt)| {
            (1..dt.len()).map(move |t| rmtticc::penalty_features(deltas.map_or_else(T::zero, |d| d[n][t]), dt[t]))
        })
        .collect();
    if pairs.len() < 2 {
        return config.penalty(None);
    }
    config.penalty(Some(PhiParams::fit(&pairs, config.phi_ridge)?))
}

/// Segmentation with unit rewards, so every reward change is zero.
fn first_segmentation<T: Real>(train: &Dataset<T>, config: &ThemesConfig) -> Result<FirstPass<T>> {
    let input = SegmentationInput::new(train, config.window)?;
    let penalty = fit_phi(&input, None, config)?;
    let settings = config.ticc_settings(0);
    let (ticc, k, bic_scores) = match config.k {
        Some(k) => (rmtticc::fit(&input, k, &penalty, None, &settings, None)?, k, None),
        None => {
            let sel = rmtticc::bic_select(&input, &config.k_candidates, &penalty, None, &settings)?;
            log::info!("BIC selected K = {} from {:?}", sel.best_k, sel.scores);
            (sel.best, sel.best_k, Some(sel.scores))
        }
    };
    Ok(FirstPass { input, ticc, k, bic_scores, penalty })
}

fn fit_mixture<T: Real>(
    units: &[DemoUnit<T>],
    g: Option<usize>,
    action_count: usize,
    config: &ThemesConfig,
    iteration: usize,
    init: Option<EmInit<T>>,
) -> Result<(MixtureFit<T>, Option<Vec<(usize, f64)>>)> {
    let edm_cfg = config.edm_config();
    let settings = config.em_settings(iteration);
    match g {
        Some(g) => Ok((emedm::fit(units, g, action_count, &edm_cfg, &settings, init)?, None)),
        None => {
            let sel = emedm::select_g(units, config.g_max, action_count, &edm_cfg, &settings)?;
            log::info!("selected G = {} from {:?}", sel.best_g, sel.logliks);
            Ok((sel.best, Some(sel.logliks)))
        }
    }
}

/// Runs the outer loop on a training set.
pub fn fit<T: Real>(train: &Dataset<T>, config: &ThemesConfig) -> Result<ThemesModel<T>> {
    Ok(fit_impl(train, config, false)?.0)
}

/// Full fit plus the model as it stood after the first segmentation and
/// mixture pass, which is what the regulator-free variant returns.
pub fn fit_with_first_pass<T: Real>(train: &Dataset<T>, config: &ThemesConfig) -> Result<(ThemesModel<T>, ThemesModel<T>)> {
    let (full, first) = fit_impl(train, config, true)?;
    Ok((full, first.expect("requested")))
}

#[allow(clippy::too_many_arguments)]
fn assemble<T: Real>(
    method: Ablation,
    config: &ThemesConfig,
    input: &SegmentationInput<T>,
    action_count: usize,
    ticc: TiccFit<T>,
    mixture: PolicyMixture<T>,
    penalty: PenaltyInputs<T>,
    regulator: RewardRegulator<T>,
    diagnostics: Vec<OuterDiagnostics>,
    bic_scores: Option<Vec<(usize, Option<f64>)>>,
    g_logliks: Option<Vec<(usize, f64)>>,
) -> Result<ThemesModel<T>> {
    let model = ThemesModel {
        schema_version: SCHEMA_VERSION,
        method,
        config: config.clone(),
        state_dim: input.m,
        action_count,
        trajectory_ids: input.ids.clone(),
        k: ticc.models.len(),
        g: mixture.components(),
        clusters: Some(ticc.models),
        penalty,
        segmentation: ticc.segmentation,
        mixture,
        regulator,
        routing: Routing::Mixture,
        diagnostics,
        bic_scores,
        g_logliks,
    };
    model.check_alignment()?;
    Ok(model)
}

fn fit_impl<T: Real>(train: &Dataset<T>, config: &ThemesConfig, keep_first: bool) -> Result<(ThemesModel<T>, Option<ThemesModel<T>>)> {
    config.validate()?;
    let a = train.action_count;
    let first = in_iteration(0, first_segmentation(train, config))?;
    let FirstPass { input, mut ticc, k, bic_scores, mut penalty } = first;
    let units = in_iteration(0, units_from_segmentation(train, &ticc.segmentation))?;
    let (mut em, g_logliks) = in_iteration(0, fit_mixture(&units, config.g, a, config, 0, None))?;
    let g = em.mixture.components();
    let mut regulator = RewardRegulator::<T>::ones(k, g, &config.mlirl);
    let mut diagnostics = Vec::new();
    let mut iteration = 0;
    let mut diag = OuterDiagnostics {
        iteration,
        k,
        g,
        ticc_objective: last_or_nan(&ticc.objective_trace),
        ticc_iterations: ticc.iterations,
        em_loglik: last_or_nan(&em.loglik_trace),
        em_iterations: em.iterations,
        mlirl_loglik: None,
        label_changes: None,
        assignment_changes: None,
    };
    let first = if keep_first && !config.skip_regulator {
        let c = ThemesConfig { skip_regulator: true, ..config.clone() };
        Some(assemble(
            Ablation::Themes0,
            &c,
            &input,
            a,
            ticc.clone(),
            em.mixture.clone(),
            penalty.clone(),
            regulator.clone(),
            vec![diag.clone()],
            bic_scores.clone(),
            g_logliks.clone(),
        )?)
    } else {
        None
    };
    loop {
        // Segmentation and policy assignments unchanged: the regulator
        // would see the same episodes again.
        if config.skip_regulator || diag.assignment_changes == Some(0) {
            diagnostics.push(diag);
            break;
        }
        let step = (|| -> Result<(RewardRegulator<T>, f64, Vec<Vec<T>>, PenaltyInputs<T>)> {
            let episodes = hireward::build_highlevel_episodes(&ticc.segmentation, &em.mixture)?;
            let mdp = HighLevelMdp::new(k, g, T::lit(config.mlirl.gamma), episodes)?;
            let mut fit = hireward::mlirl_fit(&mdp, &regulator, &config.mlirl)?;
            fit.regulator.iteration = iteration;
            let rewards = hireward::per_timestep_rewards(train, &ticc.segmentation, &em.mixture, &fit.regulator)?;
            let deltas = hireward::reward_deltas(&rewards);
            let pen = fit_phi(&input, Some(&deltas), config)?;
            Ok((fit.regulator, last_or_nan(&fit.loglik_trace), deltas, pen))
        })();
        let (reg, mlirl_ll, deltas, pen) = in_iteration(iteration, step)?;
        regulator = reg;
        penalty = pen;
        diag.mlirl_loglik = Some(mlirl_ll);
        diagnostics.push(diag);
        if diagnostics.len() >= config.outer_iters {
            break;
        }

        iteration += 1;
        let prev_labels = std::mem::take(&mut ticc.segmentation.labels);
        let prev_assign = em.mixture.hard_assignments();
        let prev_mixture = em.mixture.clone();
        ticc = in_iteration(
            iteration,
            rmtticc::fit(&input, k, &penalty, Some(&deltas), &config.ticc_settings(iteration), Some(&ticc.models)),
        )?;
        let label_changes = changed_labels(&prev_labels, &ticc.segmentation.labels);
        let units = in_iteration(iteration, units_from_segmentation(train, &ticc.segmentation))?;
        let init = EmInit {
            responsibilities: in_iteration(iteration, emedm::responsibilities(&units, &prev_mixture))?,
            component_seeds: component_seeds(g, config.seed),
            policies: Some(prev_mixture.policies),
        };
        em = in_iteration(iteration, fit_mixture(&units, Some(g), a, config, iteration, Some(init)))?.0;
        let assignment_changes = (label_changes == 0).then(|| {
            em.mixture
                .hard_assignments()
                .iter()
                .zip(&prev_assign)
                .filter(|(x, y)| x != y)
                .count()
        });
        log::info!("outer iteration {iteration}: {label_changes} label changes, {assignment_changes:?} assignment changes");
        diag = OuterDiagnostics {
            iteration,
            k,
            g,
            ticc_objective: last_or_nan(&ticc.objective_trace),
            ticc_iterations: ticc.iterations,
            em_loglik: last_or_nan(&em.loglik_trace),
            em_iterations: em.iterations,
            mlirl_loglik: None,
            label_changes: Some(label_changes),
            assignment_changes,
        };
    }
    let method = if config.skip_regulator { Ablation::Themes0 } else { Ablation::Themes };
    let model = assemble(method, config, &input, a, ticc, em.mixture, penalty, regulator, diagnostics, bic_scores, g_logliks)?;
    let first = match (keep_first, first) {
        (true, None) => Some(model.clone()),
        (_, f) => f,
    };
    Ok((model, first))
}

fn pooled_samples<T: Real>(units: &[DemoUnit<T>]) -> Vec<WeightedSample<T>> {
    units
        .iter()
        .flat_map(|u| u.states.iter().zip(&u.actions).map(|(x, &a)| WeightedSample::new(x.clone(), a, T::one())))
        .collect()
}

/// Fits one of the named pipeline variants.
pub fn run_ablation<T: Real>(name: Ablation, train: &Dataset<T>, config: &ThemesConfig) -> Result<ThemesModel<T>> {
    config.validate()?;
    let a = train.action_count;
    let m = train.trajectories.first().map_or(0, |t| t.state_dim());
    let ids: Vec<String> = train.trajectories.iter().map(|t| t.id.clone()).collect();
    let unsegmented = |mixture: PolicyMixture<T>, g_logliks| -> Result<ThemesModel<T>> {
        let g = mixture.components();
        Ok(ThemesModel {
            schema_version: SCHEMA_VERSION,
            method: name,
            config: config.clone(),
            state_dim: m,
            action_count: a,
            trajectory_ids: ids.clone(),
            k: 1,
            g,
            clusters: None,
            penalty: config.penalty(None)?,
            segmentation: whole_trajectory_segmentation(train),
            mixture,
            regulator: RewardRegulator::ones(1, g, &config.mlirl),
            routing: Routing::Mixture,
            diagnostics: Vec::new(),
            bic_scores: None,
            g_logliks,
        })
    };
    match name {
        Ablation::Themes => fit(train, &ThemesConfig { skip_regulator: false, ..config.clone() }),
        Ablation::Themes0 => fit(train, &ThemesConfig { skip_regulator: true, ..config.clone() }),
        Ablation::Edm => {
            let samples = pooled_samples(&units_from_trajectories(train));
            let net = edm::train(&samples, a, &config.edm_config())?.net;
            unsegmented(
                PolicyMixture { priors: vec![T::one()], policies: vec![net], responsibilities: vec![vec![T::one()]; train.len()] },
                None,
            )
        }
        Ablation::EmEdm => {
            let units = units_from_trajectories(train);
            let (em, g_logliks) = fit_mixture(&units, config.g, a, config, 0, None)?;
            unsegmented(em.mixture, g_logliks)
        }
        Ablation::MtTiccEdm => {
            let FirstPass { ticc, k, bic_scores, penalty, input } = first_segmentation(train, config)?;
            let units = units_from_segmentation(train, &ticc.segmentation)?;
            let seeds = component_seeds(k, config.seed);
            let policies = (0..k)
                .map(|c| {
                    let members: Vec<DemoUnit<T>> = units
                        .iter()
                        .zip(&ticc.segmentation.sub_trajectories)
                        .filter(|(_, s)| s.cluster == c)
                        .map(|(u, _)| u.clone())
                        .collect();
                    if members.is_empty() {
                        return Err(Error::Numerical(format!("cluster {c} has no training steps")));
                    }
                    Ok(edm::train(&pooled_samples(&members), a, &EdmConfig { seed: seeds[c], ..config.edm.clone() })?.net)
                })
                .collect::<Result<Vec<_>>>()?;
            let responsibilities: Vec<Vec<T>> = ticc
                .segmentation
                .sub_trajectories
                .iter()
                .map(|s| (0..k).map(|c| if c == s.cluster { T::one() } else { T::zero() }).collect())
                .collect();
            let nf = T::from_usize_lossy(responsibilities.len());
            let priors = (0..k).map(|c| responsibilities.iter().map(|r| r[c]).sum::<T>() / nf).collect();
            let model = ThemesModel {
                schema_version: SCHEMA_VERSION,
                method: name,
                config: config.clone(),
                state_dim: input.m,
                action_count: a,
                trajectory_ids: input.ids.clone(),
                k,
                g: k,
                clusters: Some(ticc.models),
                penalty,
                segmentation: ticc.segmentation,
                mixture: PolicyMixture { priors, policies, responsibilities },
                regulator: RewardRegulator::ones(k, k, &config.mlirl),
                routing: Routing::ByCluster,
                diagnostics: Vec::new(),
                bic_scores,
                g_logliks: None,
            };
            model.check_alignment()?;
            Ok(model)
        }
    }
}

/// Segments unseen trajectories with the frozen clusters. Only states and
/// timestamps are read; the reward-change channel sits at its training mean.
pub fn segment<T: Real>(model: &ThemesModel<T>, test: &Dataset<T>) -> Result<Segmentation> {
    check_test_dims(model, test)?;
    match &model.clusters {
        None => Ok(whole_trajectory_segmentation(test)),
        Some(clusters) => {
            let input = SegmentationInput::new(test, model.config.window)?;
            let dr = model.penalty.phi.mean[0];
            let drs: Vec<Vec<T>> = input.windows.iter().map(|w| vec![dr; w.len()]).collect();
            rmtticc::decode(&input, clusters, &model.penalty, Some(&drs))
        }
    }
}

fn check_test_dims<T: Real>(model: &ThemesModel<T>, test: &Dataset<T>) -> Result<()> {
    for tr in &test.trajectories {
        if tr.state_dim() != model.state_dim {
            return Err(Error::arg(format!(
                "trajectory '{}' has {} features, the model expects {}",
                tr.id,
                tr.state_dim(),
                model.state_dim
            )));
        }
        if let Some(&a) = tr.actions.iter().find(|&&a| a >= model.action_count) {
            return Err(Error::arg(format!("trajectory '{}' has action {a} outside the model's {} actions", tr.id, model.action_count)));
        }
    }
    Ok(())
}

/// Per-timestep action distributions for every test trajectory. Within a
/// sub-trajectory the policy weights are the posterior given the steps
/// strictly before `t`, starting from the priors.
pub fn predict_actions<T: Real>(model: &ThemesModel<T>, test: &Dataset<T>) -> Result<Vec<Vec<Vec<T>>>> {
    let seg = segment(model, test)?;
    let g = model.g;
    let mut out: Vec<Vec<Vec<T>>> = test.trajectories.iter().map(|t| Vec::with_capacity(t.len())).collect();
    let log_priors: Vec<T> = model.mixture.priors.iter().map(|p| p.ln()).collect();
    let mut weights = vec![T::zero(); g];
    for s in &seg.sub_trajectories {
        let tr = &test.trajectories[s.trajectory];
        let mut logw = match model.routing {
            Routing::Mixture => log_priors.clone(),
            Routing::ByCluster => (0..g).map(|c| if c == s.cluster { T::zero() } else { T::neg_infinity() }).collect(),
        };
        for t in s.start..s.end {
            softmax_into(&logw, &mut weights);
            let x = &tr.states[t];
            let per: Vec<Vec<T>> = model.mixture.policies.iter().map(|p| p.probs(x)).collect();
            let probs: Vec<T> = (0..model.action_count)
                .map(|a| weights.iter().zip(&per).map(|(&w, p)| w * p[a]).sum())
                .collect();
            out[s.trajectory].push(probs);
            if model.routing == Routing::Mixture {
                let a = tr.actions[t];
                for (l, p) in logw.iter_mut().zip(&per) {
                    *l += p[a].max(T::min_positive_value()).ln();
                }
            }
        }
    }
    Ok(out)
}

/// Held-out classification metrics, plus segmentation agreement when the
/// true regimes of `test` are known.
pub fn evaluate<T: Real>(model: &ThemesModel<T>, test: &Dataset<T>, regimes: Option<&[Vec<usize>]>) -> Result<RunMetrics> {
    if test.action_count != 2 || model.action_count != 2 {
        return Err(Error::arg("evaluation metrics need binary actions"));
    }
    let probs = predict_actions(model, test)?;
    let p1: Vec<f64> = probs.iter().flatten().map(|p| p[1].as_f64()).collect();
    let truth: Vec<usize> = test.trajectories.iter().flat_map(|t| t.actions.iter().copied()).collect();
    let classification = metrics::classification_metrics(&truth, &p1, 0.5)?;
    let segmentation = match (regimes, &model.clusters) {
        (Some(r), Some(_)) => {
            let seg = segment(model, test)?;
            let t: Vec<usize> = r.iter().flatten().copied().collect();
            Some(metrics::segmentation_metrics(&t, &seg.flat_labels())?)
        }
        _ => None,
    };
    Ok(RunMetrics { method: model.method.name().to_string(), seed: model.config.seed, classification, segmentation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{self, GeneratorConfig};
    use approx::assert_relative_eq;

    fn quick_config() -> ThemesConfig {
        let mut c = ThemesConfig { k: Some(2), g: Some(2), outer_iters: 3, ..Default::default() };
        c.edm.epochs = 5;
        c.edm.hidden = 8;
        c.edm.sgld_steps = 5;
        c.em.max_iters = 5;
        c.mlirl.steps = 20;
        c
    }

    fn tiny() -> Dataset<f64> {
        synthgen::generate(&GeneratorConfig::preset("tiny").unwrap()).unwrap().0
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = ThemesConfig::default();
        c.k = Some(5);
        c.k_candidates = vec![3, 4];
        c.phi_mode = PhiMode::Cdf;
        c.edm.learning_rate = 3.25e-3;
        c.seed = 17;
        let back = ThemesConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(ThemesConfig::parse(&ThemesConfig::default().to_text()).unwrap(), ThemesConfig::default());
        assert_eq!(CONFIG_KEYS.len(), c.entries().len());
    }

    #[test]
    fn config_errors() {
        assert!(matches!(ThemesConfig::parse("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(ThemesConfig::parse("beta 4"), Err(Error::Config(_))));
        assert!(matches!(ThemesConfig::parse("outer_iters = 0"), Err(Error::Config(_))));
        assert!(matches!(ThemesConfig::parse("window = two"), Err(Error::Config(_))));
        let c = ThemesConfig::parse("# comment\n\nk = auto  # trailing\ng = 3\n").unwrap();
        assert_eq!((c.k, c.g), (None, Some(3)));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("GP&DQN".parse::<Ablation>().is_err());
    }

    #[test]
    fn diagnostics_respect_the_cap_and_alignment() {
        let d = tiny();
        let m = fit(&d, &quick_config()).unwrap();
        assert!(!m.diagnostics.is_empty() && m.diagnostics.len() <= 3);
        assert_eq!(m.regulator.shape(), (2, 2));
        for (labels, tr) in m.segmentation.labels.iter().zip(&d.trajectories) {
            assert_eq!(labels.len(), tr.len());
        }
        let eps = hireward::build_highlevel_episodes(&m.segmentation, &m.mixture).unwrap();
        assert!(eps.iter().flatten().all(|&(k, g)| k < m.k && g < m.g));
    }

    #[test]
    fn predictions_are_distributions_and_start_from_priors() {
        let d = tiny();
        let m = fit(&d, &quick_config()).unwrap();
        let p = predict_actions(&m, &d).unwrap();
        let seg = segment(&m, &d).unwrap();
        for (probs, tr) in p.iter().zip(&d.trajectories) {
            assert_eq!(probs.len(), tr.len());
            for row in probs {
                assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
        for s in &seg.sub_trajectories {
            let x = &d.trajectories[s.trajectory].states[s.start];
            let expect: Vec<f64> = (0..2)
                .map(|a| m.mixture.priors.iter().zip(&m.mixture.policies).map(|(w, n)| w * n.probs(x)[a]).sum())
                .collect();
            for (a, b) in p[s.trajectory][s.start].iter().zip(&expect) {
                assert_relative_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn predictions_ignore_future_actions() {
        let d = tiny();
        let m = fit(&d, &quick_config()).unwrap();
        let base = predict_actions(&m, &d).unwrap();
        let mut flipped = d.clone();
        let tr = &mut flipped.trajectories[0];
        let last = tr.len() - 1;
        tr.actions[last] = 1 - tr.actions[last];
        let p = predict_actions(&m, &flipped).unwrap();
        assert_eq!(p[0], base[0]);
    }

    #[test]
    fn single_policy_prediction_is_that_policy() {
        let d = tiny();
        let c = ThemesConfig { k: Some(1), g: Some(1), ..quick_config() };
        let m = run_ablation(Ablation::Edm, &d, &c).unwrap();
        let p = predict_actions(&m, &d).unwrap();
        let x = &d.trajectories[1].states[3];
        assert_eq!(p[1][3], m.mixture.policies[0].probs(x));
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let d = tiny();
        let m = run_ablation(Ablation::Edm, &d, &quick_config()).unwrap();
        let mut bad = d.clone();
        for tr in &mut bad.trajectories {
            for x in &mut tr.states {
                x.push(0.0);
            }
        }
        bad.feature_names.push("extra".into());
        assert!(matches!(predict_actions(&m, &bad), Err(Error::Argument(_))));
    }

    #[test]
    fn cluster_routing_uses_the_cluster_policy() {
        let d = tiny();
        let m = run_ablation(Ablation::MtTiccEdm, &d, &quick_config()).unwrap();
        assert_eq!(m.routing, Routing::ByCluster);
        let p = predict_actions(&m, &d).unwrap();
        let seg = segment(&m, &d).unwrap();
        let s = &seg.sub_trajectories[0];
        let x = &d.trajectories[s.trajectory].states[s.start];
        assert_eq!(p[s.trajectory][s.start], m.mixture.policies[s.cluster].probs(x));
    }

    #[test]
    fn save_load_round_trip() {
        let d = tiny();
        let m = fit(&d, &ThemesConfig { outer_iters: 1, ..quick_config() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(ThemesModel::<f64>::load(dir.path()).unwrap(), m);
    }
}
