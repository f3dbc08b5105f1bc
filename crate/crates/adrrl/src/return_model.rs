//! Cumulative-return predictor over noisy trajectory tensors, whose input
//! gradient drives adversarial guidance, plus a per-step reward model used to
//! label synthetic trajectories for policy updates.

use crate::diffusion::{forward_noise, DiffusionSchedule, Standardizer};
use crate::env::{discounted_return, ReplayBuffer};
use crate::nn::{sgd_adam_step, Activation, Adam, MlpConfig, MlpModel, NnError};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReturnModelError {
    #[error("empty replay buffer")]
    EmptyBuffer,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Scalar predictor of the discounted window return from a noisy trajectory
/// tensor at a given diffusion step. Operates in standardized coordinates;
/// the standardizer is shared with the diffusion model.
#[derive(Debug, Clone)]
pub struct ReturnModel {
    pub mlp: MlpModel,
    pub standardizer: Standardizer,
    /// Length of the state block in the flattened layout: `(L + 1) * d_s`.
    pub state_block: usize,
}

impl ReturnModel {
    pub fn new<R: Rng + ?Sized>(
        tensor_dim: usize,
        state_block: usize,
        hidden: usize,
        layers: usize,
        embed_dim: usize,
        standardizer: Standardizer,
        rng: &mut R,
    ) -> Result<Self, ReturnModelError> {
        assert!(state_block <= tensor_dim);
        let mut sizes = vec![tensor_dim];
        sizes.extend(std::iter::repeat(hidden).take(layers));
        sizes.push(1);
        let cfg = MlpConfig::new(sizes)
            .with_step_embedding(embed_dim)
            .with_skip_connections()
            .with_hidden_activation(Activation::Relu);
        Ok(Self {
            mlp: MlpModel::new(&cfg, rng)?,
            standardizer,
            state_block,
        })
    }

    /// Predicted return from a standardized noisy tensor.
    pub fn predict_std(&self, tensor_std: &[f64], step: usize) -> Result<f64, ReturnModelError> {
        Ok(self.mlp.forward(tensor_std, Some(step))?[0])
    }

    /// Predicted return from a raw (unstandardized) tensor.
    pub fn predict_raw(&self, tensor_raw: &[f64], step: usize) -> Result<f64, ReturnModelError> {
        self.predict_std(&self.standardizer.encode(tensor_raw), step)
    }
}

/// Gradient of the predicted return with respect to the standardized tensor,
/// with the action block zeroed so only states are adversarially corrupted.
pub fn return_gradient(
    model: &ReturnModel,
    tensor_std: &[f64],
    step: usize,
) -> Result<Vec<f64>, ReturnModelError> {
    let mut g = model.mlp.input_gradient(tensor_std, &[1.0], Some(step))?;
    for x in g.iter_mut().skip(model.state_block) {
        *x = 0.0;
    }
    Ok(g)
}

/// Gradient with respect to the raw tensor: chain rule through the
/// standardizer divides each standardized-space entry by the per-dim std.
pub fn return_gradient_raw(
    model: &ReturnModel,
    tensor_raw: &[f64],
    step: usize,
) -> Result<Vec<f64>, ReturnModelError> {
    let std_grad = return_gradient(model, &model.standardizer.encode(tensor_raw), step)?;
    Ok(std_grad
        .iter()
        .zip(&model.standardizer.std)
        .map(|(g, s)| g / s)
        .collect())
}

/// Noise trajectories from the buffer to a random diffusion step and regress
/// the predicted return onto the clean window's discounted return.
pub fn train_return_model<R: Rng + ?Sized>(
    model: &mut ReturnModel,
    buffer: &ReplayBuffer,
    schedule: &DiffusionSchedule,
    iterations: usize,
    batch_size: usize,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<Vec<f64>, ReturnModelError> {
    if buffer.is_empty() {
        return Err(ReturnModelError::EmptyBuffer);
    }
    let mut losses = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut grads = vec![0.0; model.mlp.params().len()];
        let mut loss = 0.0;
        let scale = 1.0 / batch_size as f64;
        for _ in 0..batch_size {
            let traj = buffer.sample(rng);
            let target = discounted_return(traj);
            let clean = model.standardizer.encode(&traj.to_tensor());
            let step = rng.gen_range(1..=schedule.n);
            let (noisy, _) = forward_noise(&clean, step, schedule, rng)
                .expect("step within schedule range");
            let (out, tape) = model.mlp.forward_tape(&noisy, Some(step))?;
            let diff = out[0] - target;
            loss += diff * diff * scale;
            model
                .mlp
                .backward_into(&tape, &[2.0 * diff * scale], &mut grads)?;
        }
        sgd_adam_step(&mut model.mlp, &grads, opt)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Per-step reward predictor `(s_t, a_t) -> r_t`, trained only on real
/// transitions.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub mlp: MlpModel,
    pub d_s: usize,
    pub d_a: usize,
}

impl RewardModel {
    pub fn new<R: Rng + ?Sized>(
        d_s: usize,
        d_a: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self, ReturnModelError> {
        let mut sizes = vec![d_s + d_a];
        sizes.extend(std::iter::repeat(hidden).take(layers));
        sizes.push(1);
        let cfg = MlpConfig::new(sizes).with_hidden_activation(Activation::Tanh);
        Ok(Self {
            mlp: MlpModel::new(&cfg, rng)?,
            d_s,
            d_a,
        })
    }

    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<f64, ReturnModelError> {
        assert_eq!(state.len(), self.d_s);
        assert_eq!(action.len(), self.d_a);
        let mut input = Vec::with_capacity(self.d_s + self.d_a);
        input.extend_from_slice(state);
        input.extend_from_slice(action);
        Ok(self.mlp.forward(&input, None)?[0])
    }
}

/// L2 regression of observed rewards on (state, action) pairs sampled
/// uniformly from the buffer.
pub fn train_reward_model<R: Rng + ?Sized>(
    model: &mut RewardModel,
    buffer: &ReplayBuffer,
    iterations: usize,
    batch_size: usize,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<Vec<f64>, ReturnModelError> {
    if buffer.is_empty() {
        return Err(ReturnModelError::EmptyBuffer);
    }
    let mut losses = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut grads = vec![0.0; model.mlp.params().len()];
        let mut loss = 0.0;
        let scale = 1.0 / batch_size as f64;
        for _ in 0..batch_size {
            let traj = buffer.sample(rng);
            let t = rng.gen_range(0..traj.len());
            let mut input = Vec::with_capacity(model.d_s + model.d_a);
            input.extend_from_slice(&traj.states[t]);
            input.extend_from_slice(&traj.actions[t]);
            let (out, tape) = model.mlp.forward_tape(&input, None)?;
            let diff = out[0] - traj.rewards[t];
            loss += diff * diff * scale;
            model
                .mlp
                .backward_into(&tape, &[2.0 * diff * scale], &mut grads)?;
        }
        sgd_adam_step(&mut model.mlp, &grads, opt)?;
        losses.push(loss);
    }
    Ok(losses)
}
