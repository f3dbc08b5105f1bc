//! The outer training loop: collect real rollouts, improve the world model
//! and return predictors, generate adversarial synthetic trajectories, and
//! improve the policy on them. Also owns checkpoint serialization of the
//! whole agent and the parameter-sweep evaluation harness.

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::cvar::{empirical_cvar, CvarError};
use crate::diffusion::{denoiser_loss, DiffusionSchedule, DiffusionError, Standardizer};
use crate::env::{
    collect_rollout, discounted_return, make_env, EnvError, EnvKind, EnvParams, ReplayBuffer,
    TrajLayout, Trajectory,
};
use crate::guidance::{adversarial_sample, ActionGuide};
use crate::nn::{sgd_adam_step, Activation, Adam, MlpConfig, MlpModel, NnError};
use crate::policy::{a2c_update, Critic, GaussianPolicy, PolicyError};
use crate::return_model::{
    train_return_model, train_reward_model, ReturnModel, ReturnModelError, RewardModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    ReturnModel(#[from] ReturnModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Cvar(#[from] CvarError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint does not match environment: {0}")]
    Mismatch(String),
}

/// Deterministic per-purpose random stream derived from the run seed.
pub fn derive_rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    // FNV-1a over the purpose tag, mixed with the index
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^= index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// All trained state of one run.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: RunConfig,
    pub kind: EnvKind,
    pub layout: TrajLayout,
    pub schedule: DiffusionSchedule,
    pub standardizer: Standardizer,
    pub denoiser: MlpModel,
    pub zphi: ReturnModel,
    pub reward: RewardModel,
    pub policy: GaussianPolicy,
    pub critic: Critic,
    pub iteration: u64,
}

impl Agent {
    pub fn init(config: &RunConfig) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let kind = config.env.env_kind()?;
        let layout = TrajLayout {
            d_s: kind.state_dim(),
            d_a: kind.action_dim(),
            len: config.env.window,
        };
        let schedule = DiffusionSchedule::cosine(config.diffusion.n_steps)?;
        let seed = config.run.seed;
        let d = &config.diffusion;

        let mut sizes = vec![layout.tensor_dim()];
        sizes.extend(std::iter::repeat(d.hidden).take(d.layers));
        sizes.push(layout.tensor_dim());
        let denoiser_cfg = MlpConfig::new(sizes)
            .with_step_embedding(d.embed_dim)
            .with_skip_connections()
            .with_hidden_activation(Activation::Relu);
        let denoiser = MlpModel::new(&denoiser_cfg, &mut derive_rng(seed, "init.denoiser", 0))?;

        let standardizer = Standardizer::identity(layout.tensor_dim());
        let zphi = ReturnModel::new(
            layout.tensor_dim(),
            layout.state_block(),
            d.hidden,
            d.layers,
            d.embed_dim,
            standardizer.clone(),
            &mut derive_rng(seed, "init.zphi", 0),
        )?;
        let reward = RewardModel::new(
            layout.d_s,
            layout.d_a,
            config.a2c.hidden,
            config.a2c.layers,
            &mut derive_rng(seed, "init.reward", 0),
        )?;
        let policy = GaussianPolicy::new(
            layout.d_s,
            layout.d_a,
            config.a2c.hidden,
            config.a2c.layers,
            &mut derive_rng(seed, "init.policy", 0),
        )?;
        let critic = Critic::new(
            layout.d_s,
            config.a2c.hidden,
            config.a2c.layers,
            &mut derive_rng(seed, "init.critic", 0),
        )?;

        Ok(Self {
            config: config.clone(),
            kind,
            layout,
            schedule,
            standardizer,
            denoiser,
            zphi,
            reward,
            policy,
            critic,
            iteration: 0,
        })
    }

    /// Standardized initial-state slot for inpainting a raw state.
    fn encode_s0(&self, s0: &[f64]) -> Vec<f64> {
        s0.iter()
            .enumerate()
            .map(|(j, x)| (x - self.standardizer.mean[j]) / self.standardizer.std[j])
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let toml = toml::to_string(&self.config).expect("config serializes");
        c.insert_vec("config.toml", toml.bytes().map(|b| b as f64).collect());
        c.insert_u64("run.seed", self.config.run.seed);
        c.insert_u64("run.iteration", self.iteration);
        c.insert_vec("standardizer.mean", self.standardizer.mean.clone());
        c.insert_vec("standardizer.std", self.standardizer.std.clone());
        c.insert_vec("denoiser.params", self.denoiser.params().to_vec());
        c.insert_vec("zphi.params", self.zphi.mlp.params().to_vec());
        c.insert_vec("reward.params", self.reward.mlp.params().to_vec());
        c.insert_vec("policy.mean.params", self.policy.mean_net.params().to_vec());
        c.insert_vec("policy.log_std", self.policy.log_std.clone());
        c.insert_vec("critic.params", self.critic.value_net.params().to_vec());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, OrchestratorError> {
        let bytes: Vec<u8> = c
            .get_vec("config.toml")?
            .iter()
            .map(|&x| x as u8)
            .collect();
        let text = String::from_utf8(bytes)
            .map_err(|_| OrchestratorError::Mismatch("config payload not UTF-8".into()))?;
        let config = RunConfig::from_str_with_env(&text, &[])?;
        let mut agent = Self::init(&config)?;

        let restore = |model: &mut MlpModel, data: Vec<f64>, name: &str| {
            if data.len() != model.params().len() {
                return Err(OrchestratorError::Mismatch(format!(
                    "{name}: {} params in checkpoint, {} in model",
                    data.len(),
                    model.params().len()
                )));
            }
            model.params_mut().copy_from_slice(&data);
            Ok(())
        };
        restore(&mut agent.denoiser, c.get_vec("denoiser.params")?, "denoiser")?;
        restore(&mut agent.zphi.mlp, c.get_vec("zphi.params")?, "zphi")?;
        restore(&mut agent.reward.mlp, c.get_vec("reward.params")?, "reward")?;
        restore(
            &mut agent.policy.mean_net,
            c.get_vec("policy.mean.params")?,
            "policy",
        )?;
        restore(&mut agent.critic.value_net, c.get_vec("critic.params")?, "critic")?;
        agent.policy.log_std = c.get_vec("policy.log_std")?;
        agent.standardizer = Standardizer {
            mean: c.get_vec("standardizer.mean")?,
            std: c.get_vec("standardizer.std")?,
        };
        agent.zphi.standardizer = agent.standardizer.clone();
        agent.iteration = c.get_u64("run.iteration")?;
        Ok(agent)
    }
}

/// One metrics row per outer iteration. The `phase` stamp records that model
/// improvement ran before sampling within the iteration.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub iteration: u64,
    pub diffusion_loss: f64,
    pub return_loss: f64,
    pub reward_loss: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub real_return: f64,
    pub synth_return: f64,
    pub mean_c: f64,
}

pub const METRICS_HEADER: &str = "# adrrl metrics v1\niteration,diffusion_loss,return_loss,reward_loss,actor_loss,critic_loss,entropy,real_return,synth_return,mean_c";

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.diffusion_loss,
            r.return_loss,
            r.reward_loss,
            r.actor_loss,
            r.critic_loss,
            r.entropy,
            r.real_return,
            r.synth_return,
            r.mean_c
        );
    }
    out
}

/// Runs the full training loop. Deterministic given the config (seed
/// included). Returns the trained agent and per-iteration metrics.
pub fn adrrl_train(config: &RunConfig) -> Result<(Agent, Vec<MetricsRow>), OrchestratorError> {
    let mut agent = Agent::init(config)?;
    let seed = config.run.seed;
    let gamma = config.a2c.gamma;
    let window = config.env.window;
    let mut buffer = ReplayBuffer::new(config.run.buffer_capacity);

    let mut diff_opt = Adam::new(config.diffusion.lr, agent.denoiser.params().len());
    let mut zphi_opt = Adam::new(config.return_model.lr, agent.zphi.mlp.params().len());
    let mut reward_opt = Adam::new(config.return_model.lr, agent.reward.mlp.params().len());
    let mut actor_opt = Adam::new(config.a2c.actor_lr, agent.policy.mean_net.params().len());
    let mut critic_opt = Adam::new(config.a2c.critic_lr, agent.critic.value_net.params().len());
    let mut log_std_opt = Adam::new(config.a2c.actor_lr, agent.layout.d_a);

    let guidance = config.guidance.guidance_config()?;
    let mut rows = Vec::with_capacity(config.run.m_iterations);

    for m in 1..=config.run.m_iterations as u64 {
        agent.iteration = m;

        // 1. real-environment interaction: one episode sliced into windows
        let mut env = make_env(agent.kind, config.env.env_params())?;
        let mut ep_rng = derive_rng(seed, "episode", m);
        env.reset(&mut ep_rng);
        let mut real_return = 0.0;
        let mut real_windows = 0;
        while env.remaining_steps() >= window {
            let policy = &agent.policy;
            let traj = collect_rollout(
                &mut env,
                |s, rng| {
                    let (a, _) = policy.act(s, rng).expect("policy act");
                    a.iter().map(|x| x.clamp(-1.0, 1.0)).collect()
                },
                window,
                gamma,
                &mut ep_rng,
            )?;
            real_return += discounted_return(&traj);
            real_windows += 1;
            buffer.push(traj);
        }
        let real_return = real_return / real_windows.max(1) as f64;

        // 2. world-model improvement on the real buffer
        let tensors: Vec<Vec<f64>> = buffer.iter().map(|t| t.to_tensor()).collect();
        agent.standardizer = Standardizer::fit(&tensors);
        agent.zphi.standardizer = agent.standardizer.clone();
        let std_tensors: Vec<Vec<f64>> = tensors
            .iter()
            .map(|t| agent.standardizer.encode(t))
            .collect();

        let mut diff_rng = derive_rng(seed, "diffusion", m);
        let mut diffusion_loss = 0.0;
        for _ in 0..config.run.k_iterations {
            let batch: Vec<Vec<f64>> = (0..config.diffusion.batch.min(std_tensors.len()))
                .map(|_| std_tensors[diff_rng.gen_range(0..std_tensors.len())].clone())
                .collect();
            let (loss, grads) = denoiser_loss(&agent.denoiser, &batch, &agent.schedule, &mut diff_rng)?;
            sgd_adam_step(&mut agent.denoiser, &grads, &mut diff_opt)?;
            diffusion_loss = loss;
        }

        let return_losses = train_return_model(
            &mut agent.zphi,
            &buffer,
            &agent.schedule,
            config.return_model.iterations,
            config.diffusion.batch.min(buffer.len()),
            &mut zphi_opt,
            &mut derive_rng(seed, "zphi", m),
        )?;
        let reward_losses = train_reward_model(
            &mut agent.reward,
            &buffer,
            config.return_model.iterations,
            config.diffusion.batch.min(buffer.len()),
            &mut reward_opt,
            &mut derive_rng(seed, "reward", m),
        )?;

        // 3. adversarial synthetic generation (strictly after model updates)
        let mut sample_rng = derive_rng(seed, "sample", m);
        let mut synth = Vec::with_capacity(config.run.synthetic_batch);
        let mut synth_return = 0.0;
        let mut c_sum = 0.0;
        let mut c_count = 0usize;
        for _ in 0..config.run.synthetic_batch {
            let src = buffer.sample(&mut sample_rng);
            let s0 = src.states[sample_rng.gen_range(0..=src.len())].clone();
            let s0_std = agent.encode_s0(&s0);
            let (tensor_std, records) = adversarial_sample(
                &agent.denoiser,
                &agent.zphi,
                &agent.schedule,
                &guidance,
                &agent.layout,
                Some(&s0_std),
                Some(&agent.policy as &dyn ActionGuide),
                &mut sample_rng,
            );
            c_sum += records.iter().map(|r| r.c_i).sum::<f64>();
            c_count += records.len();
            let tensor = agent.standardizer.decode(&tensor_std);
            let mut traj =
                Trajectory::from_tensor(&tensor, agent.layout.d_s, agent.layout.d_a, window, gamma);
            for a in &mut traj.actions {
                for x in a.iter_mut() {
                    *x = x.clamp(-1.0, 1.0);
                }
            }
            for t in 0..window {
                traj.rewards[t] = agent.reward.predict(&traj.states[t], &traj.actions[t])?;
            }
            synth_return += discounted_return(&traj);
            synth.push(traj);
        }
        let synth_return = synth_return / synth.len().max(1) as f64;

        // 4. policy improvement on the synthetic batch
        let stats = a2c_update(
            &mut agent.policy,
            &mut agent.critic,
            &synth,
            &config.a2c.a2c_config(),
            &mut actor_opt,
            &mut critic_opt,
            &mut log_std_opt,
            &mut derive_rng(seed, "a2c", m),
            m as usize,
        )?;

        rows.push(MetricsRow {
            iteration: m,
            diffusion_loss,
            return_loss: return_losses.last().copied().unwrap_or(f64::NAN),
            reward_loss: reward_losses.last().copied().unwrap_or(f64::NAN),
            actor_loss: stats.actor_loss,
            critic_loss: stats.critic_loss,
            entropy: stats.entropy,
            real_return,
            synth_return,
            mean_c: c_sum / c_count.max(1) as f64,
        });
    }

    Ok((agent, rows))
}

/// Writes the agent checkpoint and metrics CSV into the output directory.
pub fn persist_run(
    agent: &Agent,
    rows: &[MetricsRow],
    out_dir: &Path,
) -> Result<(), OrchestratorError> {
    std::fs::create_dir_all(out_dir)?;
    agent.to_checkpoint().save(&out_dir.join("checkpoint.adrl"))?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_to_csv(rows))?;
    Ok(())
}

/// One evaluation grid cell.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub params: EnvParams,
    pub mean_return: f64,
    pub std_error: f64,
    pub cvar: f64,
}

/// Rolls the policy in the real environment across a parameter grid. With
/// `deterministic` the policy mean is executed; otherwise actions are
/// sampled with a per-cell random stream.
pub fn evaluate_policy(
    agent: &Agent,
    kind: EnvKind,
    grid: &[EnvParams],
    episodes: usize,
    alpha: f64,
    deterministic: bool,
    seed: u64,
) -> Result<Vec<EvalRow>, OrchestratorError> {
    assert!(!grid.is_empty());
    assert!(episodes >= 1);
    if kind.state_dim() != agent.layout.d_s || kind.action_dim() != agent.layout.d_a {
        return Err(OrchestratorError::Mismatch(format!(
            "agent trained for {}, asked to run {}",
            agent.kind.name(),
            kind.name()
        )));
    }
    let gamma = agent.config.a2c.gamma;
    let mut rows = Vec::with_capacity(grid.len());
    for (cell, &params) in grid.iter().enumerate() {
        let mut returns = Vec::with_capacity(episodes);
        for ep in 0..episodes {
            let mut rng = derive_rng(seed, "eval", (cell as u64) << 32 | ep as u64);
            let mut env = make_env(kind, params)?;
            env.reset(&mut rng);
            let mut total = 0.0;
            let mut disc = 1.0;
            while !env.is_done() {
                let action = if deterministic {
                    agent.policy.mean(env.state())?
                } else {
                    agent.policy.act(env.state(), &mut rng)?.0
                };
                let action: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
                let (_, r, _) = env.step(&action)?;
                total += disc * r;
                disc *= gamma;
            }
            returns.push(total);
        }
        let mean_return = crate::stats::mean(&returns);
        let std_error = if returns.len() > 1 {
            crate::stats::standard_error(&returns)
        } else {
            0.0
        };
        let cvar = if returns.len() > 1 {
            empirical_cvar(&returns, alpha)?
        } else {
            returns[0]
        };
        rows.push(EvalRow {
            params,
            mean_return,
            std_error,
            cvar,
        });
    }
    Ok(rows)
}

pub fn eval_to_csv(rows: &[EvalRow]) -> String {
    let mut out =
        String::from("mass,friction,gravity,dt,episode_horizon,mean_return,std_error,cvar\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.params.mass,
            r.params.friction,
            r.params.gravity,
            r.params.dt,
            r.params.episode_horizon,
            r.mean_return,
            r.std_error,
            r.cvar
        );
    }
    out
}

/// Two-column plot data (parameter value, mean return) with a third column
/// for the standard error.
pub fn eval_to_plot_tsv(rows: &[EvalRow], param: &str) -> String {
    let mut out = String::new();
    for r in rows {
        let x = match param {
            "mass" => r.params.mass,
            "friction" => r.params.friction,
            "gravity" => r.params.gravity,
            "dt" => r.params.dt,
            _ => r.params.mass,
        };
        let _ = writeln!(out, "{x}\t{}\t{}", r.mean_return, r.std_error);
    }
    out
}
