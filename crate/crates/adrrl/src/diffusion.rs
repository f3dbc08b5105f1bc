//! Trajectory-level denoising diffusion: cosine noise schedule, forward
//! noising, the epsilon-prediction training objective, the closed-form
//! posterior mean and unguided ancestral sampling with initial-state
//! inpainting.

use crate::nn::{MlpModel, NnError};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("diffusion step {step} outside [1, {n}]")]
    BadStep { step: usize, n: usize },
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Cosine noise schedule. Index 0 of the internal vectors corresponds to
/// diffusion step 1; accessors take 1-based steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub n: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// `alpha_bar(i)` proportional to `cos^2(((i/N + s)/(1 + s)) * pi/2)` with
    /// `s = 0.008`, normalized to 1 at step 0; `beta_i` clipped to
    /// `(1e-8, 0.999)`.
    pub fn cosine(n: usize) -> Result<Self, DiffusionError> {
        if n < 2 {
            return Err(DiffusionError::TooFewSteps(n));
        }
        let s = 0.008;
        let f = |i: f64| {
            let x = ((i / n as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut beta = Vec::with_capacity(n);
        let mut alpha_bar = Vec::with_capacity(n);
        let mut prev = 1.0;
        for i in 1..=n {
            let ab_raw = f(i as f64) / f0;
            let b = (1.0 - ab_raw / prev).clamp(1e-8, 0.999);
            let ab = prev * (1.0 - b);
            beta.push(b);
            alpha_bar.push(ab);
            prev = ab;
        }
        Ok(Self { n, beta, alpha_bar })
    }

    /// Builds a schedule from explicit beta values (tests and analytic
    /// single-step setups).
    pub fn from_betas(betas: Vec<f64>) -> Self {
        assert!(!betas.is_empty());
        assert!(betas.iter().all(|&b| b > 0.0 && b < 1.0));
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Self {
            n: betas.len(),
            beta: betas,
            alpha_bar,
        }
    }

    pub fn beta(&self, step: usize) -> f64 {
        self.check(step);
        self.beta[step - 1]
    }

    pub fn alpha_bar(&self, step: usize) -> f64 {
        self.check(step);
        self.alpha_bar[step - 1]
    }

    /// Per-coordinate standard deviation of the reverse kernel at this step.
    pub fn sigma(&self, step: usize) -> f64 {
        self.beta(step).sqrt()
    }

    fn check(&self, step: usize) {
        assert!(step >= 1 && step <= self.n, "step {step} outside [1, {}]", self.n);
    }
}

/// Per-dimension affine standardizer fit on the replay buffer. Trajectories
/// are diffused in standardized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(tensors: &[Vec<f64>]) -> Self {
        assert!(!tensors.is_empty());
        let d = tensors[0].len();
        let n = tensors.len() as f64;
        let mut mean = vec![0.0; d];
        for t in tensors {
            assert_eq!(t.len(), d);
            for (m, x) in mean.iter_mut().zip(t) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for t in tensors {
            for ((v, x), m) in var.iter_mut().zip(t).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n).sqrt().max(1e-8))
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }
}

/// Noise predictor interface. The trained network implements it; tests swap
/// in analytic oracles.
pub trait EpsModel {
    fn eps(&self, tensor: &[f64], step: usize) -> Vec<f64>;
}

impl EpsModel for MlpModel {
    fn eps(&self, tensor: &[f64], step: usize) -> Vec<f64> {
        self.forward(tensor, Some(step)).expect("eps model forward")
    }
}

impl<F: Fn(&[f64], usize) -> Vec<f64>> EpsModel for F {
    fn eps(&self, tensor: &[f64], step: usize) -> Vec<f64> {
        self(tensor, step)
    }
}

/// `tau_i = sqrt(alpha_bar_i) tau_0 + sqrt(1 - alpha_bar_i) eps`.
pub fn forward_noise<R: Rng + ?Sized>(
    traj0: &[f64],
    step: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>), DiffusionError> {
    if step < 1 || step > schedule.n {
        return Err(DiffusionError::BadStep {
            step,
            n: schedule.n,
        });
    }
    let ab = schedule.alpha_bar(step);
    let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps: Vec<f64> = (0..traj0.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let noisy = traj0
        .iter()
        .zip(&eps)
        .map(|(x, e)| c0 * x + c1 * e)
        .collect();
    Ok((noisy, eps))
}

/// Mean squared error of the noise prediction over a batch, with parameter
/// gradients. The diffusion step is drawn uniformly per batch element.
pub fn denoiser_loss<R: Rng + ?Sized>(
    model: &MlpModel,
    batch: &[Vec<f64>],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), DiffusionError> {
    if batch.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let mut grads = vec![0.0; model.params().len()];
    let mut loss = 0.0;
    let d = batch[0].len() as f64;
    let scale = 1.0 / (batch.len() as f64 * d);
    for traj0 in batch {
        let step = rng.gen_range(1..=schedule.n);
        let (noisy, eps) = forward_noise(traj0, step, schedule, rng)?;
        let (pred, tape) = model.forward_tape(&noisy, Some(step))?;
        let mut dloss = Vec::with_capacity(pred.len());
        for (p, e) in pred.iter().zip(&eps) {
            let diff = p - e;
            loss += diff * diff * scale;
            dloss.push(2.0 * diff * scale);
        }
        model.backward_into(&tape, &dloss, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Closed-form reverse mean
/// `mu = (tau_i - (beta_i / sqrt(1 - alpha_bar_i)) eps_theta) / sqrt(1 - beta_i)`.
pub fn posterior_mean<M: EpsModel>(
    model: &M,
    tensor: &[f64],
    step: usize,
    schedule: &DiffusionSchedule,
) -> Vec<f64> {
    let beta = schedule.beta(step);
    let ab = schedule.alpha_bar(step);
    let eps = model.eps(tensor, step);
    assert_eq!(eps.len(), tensor.len());
    let k = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / (1.0 - beta).sqrt();
    tensor
        .iter()
        .zip(&eps)
        .map(|(x, e)| inv * (x - k * e))
        .collect()
}

/// Clamp applied to the predicted clean sample during ancestral sampling.
/// Data is standardized, so the unit is standard deviations. Without this
/// the division by `sqrt(1 - beta)` at the noisiest steps amplifies any
/// noise-prediction error and the reverse chain diverges.
pub const X0_CLIP: f64 = 5.0;

/// Posterior mean computed through the predicted clean sample, which is
/// clamped to `[-clip, clip]`. Algebraically identical to `posterior_mean`
/// whenever the prediction already lies inside the clamp.
pub fn posterior_mean_clipped<M: EpsModel>(
    model: &M,
    tensor: &[f64],
    step: usize,
    schedule: &DiffusionSchedule,
    clip: f64,
) -> Vec<f64> {
    let beta = schedule.beta(step);
    let ab = schedule.alpha_bar(step);
    let ab_prev = if step > 1 { schedule.alpha_bar(step - 1) } else { 1.0 };
    let eps = model.eps(tensor, step);
    assert_eq!(eps.len(), tensor.len());
    let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let coef_t = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    tensor
        .iter()
        .zip(&eps)
        .map(|(x, e)| {
            let x0 = ((x - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-clip, clip);
            coef_x0 * x0 + coef_t * x
        })
        .collect()
}

/// Overwrites the first `d_s` coordinates (the initial-state slot in the
/// flattened layout) with the conditioning state.
pub fn inpaint_initial_state(tensor: &mut [f64], s0: &[f64]) {
    assert!(s0.len() <= tensor.len());
    tensor[..s0.len()].copy_from_slice(s0);
}

/// Ancestral sampling from pure noise. Each step draws from
/// `N(mu, beta_i I)` except the last, which is noise-free. When `inpaint`
/// is given, the initial-state slot is pinned at every step.
pub fn unguided_sample<M: EpsModel, R: Rng + ?Sized>(
    model: &M,
    dim: usize,
    schedule: &DiffusionSchedule,
    inpaint: Option<&[f64]>,
    rng: &mut R,
) -> Vec<f64> {
    let mut tau: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    if let Some(s0) = inpaint {
        inpaint_initial_state(&mut tau, s0);
    }
    for step in (1..=schedule.n).rev() {
        let mu = posterior_mean_clipped(model, &tau, step, schedule, X0_CLIP);
        if step > 1 {
            let sigma = schedule.sigma(step);
            tau = mu
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + sigma * z
                })
                .collect();
        } else {
            tau = mu;
        }
        if let Some(s0) = inpaint {
            inpaint_initial_state(&mut tau, s0);
        }
    }
    tau
}
