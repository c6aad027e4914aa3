//! The training loop: factor-pool sampling, behavior selection, option
//! rollout, loss assembly, optimization, and checkpointing.

pub mod checkpoint;
pub mod optim;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::env::{
    observe, permissible_actions, preset, EnvState, GridSpec, ObsMode, Observation,
};
use crate::error::{IcfError, Result};
use crate::models::{EncoderKind, IcfModel, ModelConfig, ProjectionMode};
use crate::objective::{self, KernelKind, KernelSpec, SurrogateSample};
use checkpoint::CheckpointData;
use optim::{Optimizer, OptimizerKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Floor inside log of action probabilities.
const LOGP_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Joint,
    DiscreteOnly,
}

fn d_obs_mode() -> ObsMode {
    ObsMode::Symbolic
}
fn d_steps() -> u64 {
    1000
}
fn d_n_pool() -> usize {
    1024
}
fn d_t_option() -> usize {
    1
}
fn d_eps_greedy() -> f64 {
    0.05
}
fn d_episode_len() -> u64 {
    50
}
fn d_lr() -> f64 {
    1e-3
}
fn d_latent() -> usize {
    2
}
fn d_noise() -> usize {
    2
}
fn d_hidden() -> usize {
    32
}
fn d_encoder() -> EncoderKind {
    EncoderKind::Mlp
}
fn d_projection() -> ProjectionMode {
    ProjectionMode::Hypercube
}
fn d_leaky() -> f64 {
    0.1
}
fn d_kernel() -> KernelKind {
    KernelKind::Gaussian
}
fn d_one() -> f64 {
    1.0
}
fn d_beta_h() -> f64 {
    0.01
}
fn d_true() -> bool {
    true
}
fn d_w_max() -> f64 {
    objective::DEFAULT_W_MAX
}
fn d_n_factors() -> usize {
    4
}
fn d_ckpt_every() -> u64 {
    1000
}

/// Full run configuration; everything except `preset` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    #[serde(default)]
    pub redundant_actions: bool,
    #[serde(default = "d_obs_mode")]
    pub obs_mode: ObsMode,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_n_pool")]
    pub n_pool: usize,
    #[serde(default = "d_t_option")]
    pub t_option: usize,
    #[serde(default = "d_eps_greedy")]
    pub eps_greedy: f64,
    #[serde(default = "d_episode_len")]
    pub episode_len: u64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_latent")]
    pub latent_dim: usize,
    #[serde(default = "d_noise")]
    pub noise_dim: usize,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_encoder")]
    pub encoder: EncoderKind,
    #[serde(default = "d_projection")]
    pub projection: ProjectionMode,
    #[serde(default = "d_leaky")]
    pub leaky_slope: f64,
    #[serde(default = "d_kernel")]
    pub kernel: KernelKind,
    /// Gaussian kernel width; None means sqrt(latent_dim).
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "d_one")]
    pub lambda_ae: f64,
    #[serde(default = "d_beta_h")]
    pub beta_h: f64,
    #[serde(default = "d_one")]
    pub lambda_mb: f64,
    /// Differentiate selectivity through h' and phi in addition to the
    /// score-function term.
    #[serde(default = "d_true")]
    pub pathwise: bool,
    /// Restrict the pathwise term to the executed factor. Off-policy factors
    /// then learn through the pool-mean denominator and the score-function
    /// term only, which breaks the symmetric pull that lets two factors
    /// settle on the same variation.
    #[serde(default)]
    pub pathwise_behavior_only: bool,
    /// Restrict behavioral action sampling to state-changing actions.
    /// Recorded log-probabilities stay under the unrestricted policy.
    #[serde(default = "d_true")]
    pub permissible_only: bool,
    /// Reset episodes to a uniformly random state instead of the fixed
    /// initial state, matching the uniform state distribution the analysis
    /// tooling evaluates on.
    #[serde(default)]
    pub random_reset: bool,
    /// Normalize encoder output with running mean/variance statistics so the
    /// latent scale stays pinned relative to the selectivity kernel width.
    #[serde(default)]
    pub encoder_norm: bool,
    /// Let the model-based loss backpropagate into the encoder.
    #[serde(default)]
    pub mb_through_encoder: bool,
    #[serde(default = "d_w_max")]
    pub w_max: f64,
    /// Head count in discrete mode (one-hot factors).
    #[serde(default = "d_n_factors")]
    pub n_factors: usize,
    #[serde(default = "d_ckpt_every")]
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Minimal config for a preset, everything else defaulted.
    pub fn for_preset(preset: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "preset": preset })).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pool < 2 {
            return Err(IcfError::Config("n_pool must be >= 2".into()));
        }
        if self.t_option < 1 {
            return Err(IcfError::Config("t_option must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.eps_greedy) {
            return Err(IcfError::Config("eps_greedy must be in [0, 1)".into()));
        }
        if self.episode_len == 0 {
            return Err(IcfError::Config("episode_len must be >= 1".into()));
        }
        if self.mode == TrainMode::DiscreteOnly {
            if self.n_factors < 2 {
                return Err(IcfError::Config("discrete mode needs n_factors >= 2".into()));
            }
            if self.latent_dim != self.n_factors {
                return Err(IcfError::Config(format!(
                    "discrete mode requires latent_dim == n_factors (got {} vs {})",
                    self.latent_dim, self.n_factors
                )));
            }
        }
        self.kernel_spec().validate()?;
        Ok(())
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        KernelSpec {
            kind: self.kernel,
            sigma: self.sigma.unwrap_or((self.latent_dim as f64).sqrt()),
            eps_floor: 1e-8,
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        preset(&self.preset, self.redundant_actions)
    }

    pub fn model_config(&self, grid: &GridSpec) -> ModelConfig {
        let obs = observe(grid, &grid.initial_state(), self.obs_mode);
        ModelConfig {
            latent_dim: self.latent_dim,
            noise_dim: self.noise_dim,
            // kernels compare dh against phi componentwise, so the factor
            // embedding lives in latent space
            factor_dim: self.latent_dim,
            hidden: self.hidden,
            encoder: self.encoder,
            projection: self.projection,
            leaky_slope: self.leaky_slope,
            n_actions: grid.n_actions(),
            obs_shape: obs.data.shape().to_vec(),
            n_factors: if self.mode == TrainMode::DiscreteOnly {
                self.n_factors
            } else {
                0
            },
            encoder_norm: self.encoder_norm,
        }
    }
}

/// Per-step scalar metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub step: u64,
    pub selectivity: f64,
    pub ae_loss: f64,
    pub mb_loss: f64,
    pub entropy: f64,
    /// Running mean of behavior selectivity: the variational bound estimate.
    pub dv_bound: f64,
    /// Mean distance of pool factors from their pool mean: 0 when the
    /// generator ignores its noise input.
    pub phi_spread: f64,
    /// Mean total-variation distance between each pool member's policy and
    /// the behavior policy at the first step: 0 when the policy ignores phi.
    pub policy_tv: f64,
    /// Actions taken this step (length = action count).
    pub behavior_action_hist: Vec<u64>,
}

pub fn metrics_csv_header(n_actions: usize) -> String {
    let mut s = String::from("step,selectivity,ae_loss,mb_loss,entropy,dv_bound,phi_spread,policy_tv");
    for i in 0..n_actions {
        s.push_str(&format!(",behavior_action_hist_{i}"));
    }
    s
}

impl Metrics {
    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.selectivity,
            self.ae_loss,
            self.mb_loss,
            self.entropy,
            self.dv_bound,
            self.phi_spread,
            self.policy_tv
        );
        for c in &self.behavior_action_hist {
            s.push_str(&format!(",{c}"));
        }
        s
    }

    pub fn all_finite(&self) -> bool {
        [self.selectivity, self.ae_loss, self.mb_loss, self.entropy, self.dv_bound]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Training state: model, optimizer, RNG, environment, step counter.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub grid: GridSpec,
    pub model: IcfModel,
    pub optimizer: Optimizer,
    pub rng: ChaCha20Rng,
    pub env_state: EnvState,
    pub step: u64,
    selectivity_sum: f64,
    pub degenerate_factors: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let model_cfg = cfg.model_config(&grid);
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let model = IcfModel::new(model_cfg, &mut rng)?;
        let shapes: Vec<Vec<usize>> = model
            .named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &shapes);
        let env_state = grid.initial_state();
        Ok(Trainer {
            cfg,
            grid,
            model,
            optimizer,
            rng,
            env_state,
            step: 0,
            selectivity_sum: 0.0,
            degenerate_factors: 0,
        })
    }

    fn n_pool(&self) -> usize {
        match self.cfg.mode {
            TrainMode::Joint => self.cfg.n_pool,
            TrainMode::DiscreteOnly => self.cfg.n_factors,
        }
    }

    /// One full optimization step; returns the step's metrics.
    pub fn train_step(&mut self) -> Result<Metrics> {
        if self.step % self.cfg.episode_len == 0 {
            self.env_state = if self.cfg.random_reset {
                let states = crate::env::enumerate_states(&self.grid)?;
                states[self.rng.gen_range(0..states.len())].clone()
            } else {
                self.grid.initial_state()
            };
        }
        let discrete = self.cfg.mode == TrainMode::DiscreteOnly;
        let n_pool = self.n_pool();
        let n_actions = self.grid.n_actions();
        let kspec = self.cfg.kernel_spec();

        let obs0 = observe(&self.grid, &self.env_state, self.cfg.obs_mode);
        let mut tape = Tape::new();
        let step_result = {
            let bound = self.model.bind(&mut tape);
            let obs0_node = tape.leaf(obs0.data.clone());
            let (h0, h0_pre) = bound.encode_node_pre(&mut tape, obs0_node)?;

            // factor pool
            let mut phis: Vec<NodeId> = Vec::with_capacity(n_pool);
            if discrete {
                for i in 0..n_pool {
                    let mut one_hot = Tensor::zeros(&[self.model.cfg.factor_dim]);
                    one_hot.data_mut()[i] = 1.0;
                    phis.push(tape.leaf(one_hot));
                }
            } else {
                for _ in 0..n_pool {
                    let z = Tensor::vector(
                        (0..self.cfg.noise_dim)
                            .map(|_| self.rng.sample(StandardNormal))
                            .collect(),
                    );
                    let zid = tape.leaf(z);
                    let (phi, degen) = bound.generate_factor(&mut tape, h0, zid)?;
                    if degen {
                        self.degenerate_factors += 1;
                    }
                    phis.push(phi);
                }
            }
            let b = self.rng.gen_range(0..n_pool);

            // option rollout under the behavior factor
            let policy_for = |tape: &mut Tape, h: NodeId, i: usize| -> Result<NodeId> {
                if discrete {
                    bound.discrete_policy(tape, h, i)
                } else {
                    bound.policy(tape, h, phis[i])
                }
            };
            let mut h_t = h0;
            let mut state = self.env_state.clone();
            let mut logp_steps: Vec<Vec<NodeId>> = vec![Vec::new(); n_pool];
            let mut entropy_nodes = Vec::new();
            let mut hist = vec![0u64; n_actions];
            let mut actions = Vec::new();
            let mut policy_tv_sum = 0.0;
            let phi_spread = {
                let vals: Vec<&[f64]> = phis.iter().map(|&p| tape.value(p).data()).collect();
                let dim = vals[0].len();
                let mut mean = vec![0.0; dim];
                for v in &vals {
                    for (m, x) in mean.iter_mut().zip(*v) {
                        *m += x / n_pool as f64;
                    }
                }
                vals.iter()
                    .map(|v| {
                        v.iter()
                            .zip(&mean)
                            .map(|(x, m)| (x - m) * (x - m))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .sum::<f64>()
                    / n_pool as f64
            };
            for t in 0..self.cfg.t_option {
                let p_b = policy_for(&mut tape, h_t, b)?;
                let probs = tape.value(p_b).data().to_vec();
                let all: Vec<usize> = (0..n_actions).collect();
                let candidates = if self.cfg.permissible_only {
                    let perm = permissible_actions(&self.grid, &state);
                    if perm.is_empty() {
                        all
                    } else {
                        perm
                    }
                } else {
                    all
                };
                let a = if self.rng.gen::<f64>() < self.cfg.eps_greedy {
                    candidates[self.rng.gen_range(0..candidates.len())]
                } else {
                    sample_from(&probs, &candidates, &mut self.rng)
                };
                hist[a] += 1;
                actions.push(a);
                for (i, steps) in logp_steps.iter_mut().enumerate() {
                    let p_i = if i == b { p_b } else { policy_for(&mut tape, h_t, i)? };
                    if t == 0 {
                        let d: f64 = tape
                            .value(p_i)
                            .data()
                            .iter()
                            .zip(&probs)
                            .map(|(x, y)| (x - y).abs())
                            .sum();
                        policy_tv_sum += 0.5 * d;
                    }
                    let pa = tape.index(p_i, a)?;
                    steps.push(tape.log(pa, LOGP_EPS)?);
                }
                entropy_nodes.push(objective::entropy(&mut tape, p_b)?);
                state = crate::env::step(&self.grid, &state, a)?;
                if t + 1 < self.cfg.t_option {
                    let obs_t = observe(&self.grid, &state, self.cfg.obs_mode);
                    let node = tape.leaf(obs_t.data.clone());
                    h_t = bound.encode_node(&mut tape, node)?;
                }
            }
            let obs_end = observe(&self.grid, &state, self.cfg.obs_mode);
            let obs_end_node = tape.leaf(obs_end.data.clone());
            let h_end = bound.encode_node(&mut tape, obs_end_node)?;

            // attribution scores and per-factor selectivity (shared pool mean)
            let scores: Vec<NodeId> = phis
                .iter()
                .map(|&phi| objective::kernel_score(&mut tape, h_end, h0, phi, &kspec))
                .collect::<Result<_>>()?;
            let mut total = scores[0];
            for &s in &scores[1..] {
                total = tape.add(total, s)?;
            }
            let mean = tape.scale(total, 1.0 / n_pool as f64);
            let log_mean = tape.log(mean, kspec.eps_floor)?;
            let mut s_nodes = Vec::with_capacity(n_pool);
            let mut s_values = Vec::with_capacity(n_pool);
            for &sc in &scores {
                let lb = tape.log(sc, kspec.eps_floor)?;
                let s = tape.sub(lb, log_mean)?;
                s_values.push(tape.value(s).item());
                s_nodes.push(s);
            }

            // importance weights from summed log-probs
            let mut logp_sums = Vec::with_capacity(n_pool);
            let mut logp_sum_values = Vec::with_capacity(n_pool);
            for steps in &logp_steps {
                let mut acc = steps[0];
                for &lp in &steps[1..] {
                    acc = tape.add(acc, lp)?;
                }
                logp_sum_values.push(tape.value(acc).item());
                logp_sums.push(acc);
            }
            let weights = objective::importance_weights(&logp_sum_values, b, self.cfg.w_max);

            let baseline = bound.baseline(&mut tape, h0)?;
            let samples: Vec<SurrogateSample> = (0..n_pool)
                .map(|i| SurrogateSample {
                    weight: weights[i],
                    s_value: s_values[i],
                    s_pathwise: (self.cfg.pathwise
                        && (!self.cfg.pathwise_behavior_only || i == b))
                        .then(|| s_nodes[i]),
                    logp_sum: logp_sums[i],
                    baseline,
                })
                .collect();
            let mut loss = objective::reinforce_surrogate(&mut tape, &samples)?;

            // entropy bonus on the behavior policy
            let mut ent = entropy_nodes[0];
            for &e in &entropy_nodes[1..] {
                ent = tape.add(ent, e)?;
            }
            let ent_mean = tape.scale(ent, 1.0 / entropy_nodes.len() as f64);
            let entropy_value = tape.value(ent_mean).item();
            let neg_ent = tape.neg(ent_mean);
            let ent_term = tape.scale(neg_ent, self.cfg.beta_h);
            loss = tape.add(loss, ent_term)?;

            // reconstruction
            let ae_value = if self.model.decoder.is_some() {
                let recon = bound.decode(&mut tape, h0)?;
                let ae = objective::autoencoder_loss(&mut tape, obs0_node, recon)?;
                let term = tape.scale(ae, self.cfg.lambda_ae);
                loss = tape.add(loss, term)?;
                tape.value(ae).item()
            } else {
                0.0
            };

            // latent transition model
            let mb_value = if self.model.transition.is_some() {
                let (hs, he, ph) = if self.cfg.mb_through_encoder {
                    (h0, h_end, phis[b])
                } else {
                    (tape.detach(h0), tape.detach(h_end), tape.detach(phis[b]))
                };
                let pred = bound.transition(&mut tape, hs, ph)?;
                let mb = objective::model_based_loss(&mut tape, he, pred)?;
                let term = tape.scale(mb, self.cfg.lambda_mb);
                loss = tape.add(loss, term)?;
                tape.value(mb).item()
            } else {
                0.0
            };

            if !tape.value(loss).all_finite() {
                return Err(IcfError::NumericalAbort {
                    step: self.step,
                    detail: format!(
                        "non-finite loss (S_b={}, ae={}, mb={}, entropy={}, actions={:?})",
                        s_values[b], ae_value, mb_value, entropy_value, actions
                    ),
                });
            }
            let grads = tape.backward(loss)?;
            let grad_tensors: Vec<Tensor> = bound
                .ids
                .iter()
                .map(|&id| {
                    let shape = tape.value(id).shape().to_vec();
                    grads.get_or_zeros(id, &shape)
                })
                .collect();
            for (i, g) in grad_tensors.iter().enumerate() {
                if !g.all_finite() {
                    return Err(IcfError::NumericalAbort {
                        step: self.step,
                        detail: format!("non-finite gradient for parameter index {i}"),
                    });
                }
            }
            let h0_pre_value = tape.value(h0_pre).data().to_vec();
            let policy_tv = policy_tv_sum / n_pool as f64;
            (
                grad_tensors,
                state,
                hist,
                s_values[b],
                ae_value,
                mb_value,
                entropy_value,
                h0_pre_value,
                phi_spread,
                policy_tv,
            )
        };
        let (
            grad_tensors,
            state,
            hist,
            s_b,
            ae_value,
            mb_value,
            entropy_value,
            h0_pre_value,
            phi_spread,
            policy_tv,
        ) = step_result;

        let mut params = self.model.named_params_mut();
        self.optimizer.apply(&mut params, &grad_tensors)?;
        drop(params);
        if let Some(norm) = &mut self.model.norm {
            norm.update(&h0_pre_value);
        }
        for (name, t) in self.model.named_params() {
            if !t.all_finite() {
                return Err(IcfError::NumericalAbort {
                    step: self.step,
                    detail: format!("parameter `{name}` became non-finite after update"),
                });
            }
        }

        self.env_state = state;
        self.selectivity_sum += s_b;
        let metrics = Metrics {
            step: self.step,
            selectivity: s_b,
            ae_loss: ae_value,
            mb_loss: mb_value,
            entropy: entropy_value,
            dv_bound: self.selectivity_sum / (self.step + 1) as f64,
            phi_spread,
            policy_tv,
            behavior_action_hist: hist,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Run until cfg.steps, invoking the callback per step and optionally
    /// writing periodic checkpoints.
    pub fn run(
        &mut self,
        mut on_metrics: impl FnMut(&Metrics) -> Result<()>,
        ckpt_dir: Option<&Path>,
    ) -> Result<()> {
        while self.step < self.cfg.steps {
            let m = self.train_step()?;
            on_metrics(&m)?;
            if let Some(dir) = ckpt_dir {
                if self.cfg.checkpoint_every > 0
                    && self.step % self.cfg.checkpoint_every == 0
                    && self.step < self.cfg.steps
                {
                    self.save_checkpoint(&dir.join(format!("step_{:08}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(dir) = ckpt_dir {
            self.save_checkpoint(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }

    // -- checkpointing -----------------------------------------------------

    pub fn to_checkpoint(&self) -> Result<CheckpointData> {
        let tensors: Vec<(String, Tensor)> = self
            .model
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), (*t).clone()))
            .collect();

        let mut opt = Vec::new();
        opt.extend_from_slice(&self.optimizer.step.to_le_bytes());
        opt.extend_from_slice(&(self.optimizer.m.len() as u64).to_le_bytes());
        for (i, t) in self.optimizer.m.iter().enumerate() {
            checkpoint::encode_tensor(&mut opt, &format!("m{i}"), t);
        }
        for (i, t) in self.optimizer.v.iter().enumerate() {
            checkpoint::encode_tensor(&mut opt, &format!("v{i}"), t);
        }

        let mut rng_block = Vec::with_capacity(48);
        rng_block.extend_from_slice(&self.rng.get_seed());
        rng_block.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());

        let mut stats = Vec::with_capacity(16);
        stats.extend_from_slice(&self.selectivity_sum.to_le_bytes());
        stats.extend_from_slice(&self.degenerate_factors.to_le_bytes());

        let mut blocks = vec![
            ("config".into(), serde_json::to_vec(&self.cfg)?),
            ("optimizer".into(), opt),
            ("rng".into(), rng_block),
            ("env".into(), serde_json::to_vec(&self.env_state)?),
            ("step".into(), self.step.to_le_bytes().to_vec()),
            ("stats".into(), stats),
        ];
        if let Some(norm) = &self.model.norm {
            let mut nb = Vec::with_capacity(16 * norm.mean.len() + 8);
            for &v in norm.mean.data() {
                nb.extend_from_slice(&v.to_le_bytes());
            }
            for &v in norm.var.data() {
                nb.extend_from_slice(&v.to_le_bytes());
            }
            nb.extend_from_slice(&norm.count.to_le_bytes());
            blocks.push(("latent_norm".into(), nb));
        }
        Ok(CheckpointData { tensors, blocks })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint()?)
    }

    pub fn from_checkpoint_data(data: &CheckpointData) -> Result<Self> {
        let missing = |name: &str| IcfError::CorruptCheckpoint(format!("missing block `{name}`"));
        let cfg: TrainConfig =
            serde_json::from_slice(data.block("config").ok_or_else(|| missing("config"))?)?;
        let mut trainer = Trainer::new(cfg)?;

        // parameters by name, strictly matching the model layout
        {
            let mut params = trainer.model.named_params_mut();
            if params.len() != data.tensors.len() {
                return Err(IcfError::CorruptCheckpoint(format!(
                    "expected {} parameter tensors, found {}",
                    params.len(),
                    data.tensors.len()
                )));
            }
            for ((name, slot), (saved_name, saved)) in params.iter_mut().zip(&data.tensors) {
                if name != saved_name || slot.shape() != saved.shape() {
                    return Err(IcfError::CorruptCheckpoint(format!(
                        "parameter mismatch: model has `{name}` {:?}, checkpoint has `{saved_name}` {:?}",
                        slot.shape(),
                        saved.shape()
                    )));
                }
                **slot = saved.clone();
            }
        }

        let opt = data.block("optimizer").ok_or_else(|| missing("optimizer"))?;
        let mut r = checkpoint::Reader::new(opt);
        trainer.optimizer.step = r.u64()?;
        let n = r.u64()? as usize;
        if n != trainer.optimizer.m.len() {
            return Err(IcfError::CorruptCheckpoint(format!(
                "optimizer state holds {n} moment tensors, model has {}",
                trainer.optimizer.m.len()
            )));
        }
        for i in 0..n {
            let (_, t) = checkpoint::decode_tensor(&mut r)?;
            trainer.optimizer.m[i] = t;
        }
        for i in 0..n {
            let (_, t) = checkpoint::decode_tensor(&mut r)?;
            trainer.optimizer.v[i] = t;
        }

        let rng_block = data.block("rng").ok_or_else(|| missing("rng"))?;
        if rng_block.len() != 48 {
            return Err(IcfError::CorruptCheckpoint("rng block must be 48 bytes".into()));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&rng_block[..32]);
        let word_pos = u128::from_le_bytes(rng_block[32..].try_into().unwrap());
        trainer.rng = ChaCha20Rng::from_seed(seed);
        trainer.rng.set_word_pos(word_pos);

        trainer.env_state =
            serde_json::from_slice(data.block("env").ok_or_else(|| missing("env"))?)?;
        let step_block = data.block("step").ok_or_else(|| missing("step"))?;
        trainer.step = u64::from_le_bytes(
            step_block
                .try_into()
                .map_err(|_| IcfError::CorruptCheckpoint("step block must be 8 bytes".into()))?,
        );
        let stats = data.block("stats").ok_or_else(|| missing("stats"))?;
        if stats.len() != 16 {
            return Err(IcfError::CorruptCheckpoint("stats block must be 16 bytes".into()));
        }
        trainer.selectivity_sum = f64::from_le_bytes(stats[..8].try_into().unwrap());
        trainer.degenerate_factors = u64::from_le_bytes(stats[8..].try_into().unwrap());
        if let Some(norm) = &mut trainer.model.norm {
            let k = norm.mean.len();
            let nb = data.block("latent_norm").ok_or_else(|| missing("latent_norm"))?;
            if nb.len() != 16 * k + 8 {
                return Err(IcfError::CorruptCheckpoint(format!(
                    "latent_norm block must be {} bytes, got {}",
                    16 * k + 8,
                    nb.len()
                )));
            }
            for (i, slot) in norm.mean.data_mut().iter_mut().enumerate() {
                *slot = f64::from_le_bytes(nb[8 * i..8 * i + 8].try_into().unwrap());
            }
            for (i, slot) in norm.var.data_mut().iter_mut().enumerate() {
                let off = 8 * k + 8 * i;
                *slot = f64::from_le_bytes(nb[off..off + 8].try_into().unwrap());
            }
            norm.count = u64::from_le_bytes(nb[16 * k..].try_into().unwrap());
        }
        Ok(trainer)
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint_data(&checkpoint::load(path)?)
    }
}

/// Sample an index from `candidates` with probability proportional to
/// `probs[i]`; uniform fallback when all candidate mass vanishes.
fn sample_from(probs: &[f64], candidates: &[usize], rng: &mut ChaCha20Rng) -> usize {
    let total: f64 = candidates.iter().map(|&i| probs[i]).sum();
    if total <= 0.0 {
        return candidates[rng.gen_range(0..candidates.len())];
    }
    let mut u = rng.gen::<f64>() * total;
    for &i in candidates {
        u -= probs[i];
        if u <= 0.0 {
            return i;
        }
    }
    *candidates.last().unwrap()
}

/// Convenience for analysis and planning: run one option from a given state
/// under a fixed factor vector, greedily sampling the policy. Returns the
/// actions taken and the terminal state.
pub fn rollout_option(
    model: &IcfModel,
    grid: &GridSpec,
    obs_mode: ObsMode,
    state: &EnvState,
    phi: &Tensor,
    t_option: usize,
    permissible_only: bool,
    rng: &mut ChaCha20Rng,
) -> Result<(Vec<usize>, EnvState)> {
    let mut s = state.clone();
    let mut actions = Vec::with_capacity(t_option);
    for _ in 0..t_option {
        let obs = observe(grid, &s, obs_mode);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let h = bound.encode(&mut tape, &obs)?;
        let p = if model.cfg.is_discrete() {
            let head = phi
                .data()
                .iter()
                .position(|&v| v == 1.0)
                .ok_or_else(|| IcfError::Degenerate("discrete rollout needs a one-hot factor".into()))?;
            bound.discrete_policy(&mut tape, h, head)?
        } else {
            let phi_node = tape.leaf(phi.clone());
            bound.policy(&mut tape, h, phi_node)?
        };
        let probs = tape.value(p).data().to_vec();
        let all: Vec<usize> = (0..grid.n_actions()).collect();
        let candidates = if permissible_only {
            let perm = permissible_actions(grid, &s);
            if perm.is_empty() {
                all
            } else {
                perm
            }
        } else {
            all
        };
        let a = sample_from(&probs, &candidates, rng);
        actions.push(a);
        s = crate::env::step(grid, &s, a)?;
    }
    Ok((actions, s))
}

/// Encode an observation of a state with a model (fresh tape helper).
pub fn encode_state(
    model: &IcfModel,
    grid: &GridSpec,
    obs_mode: ObsMode,
    state: &EnvState,
) -> Result<Tensor> {
    crate::models::encode_value(model, &observe(grid, state, obs_mode))
}

/// Observation helper for the trainer's configured mode.
pub fn observation_for(cfg: &TrainConfig, grid: &GridSpec, state: &EnvState) -> Observation {
    observe(grid, state, cfg.obs_mode)
}
