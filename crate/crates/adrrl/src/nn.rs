//! Minimal multilayer perceptron with reverse-mode gradients.
//!
//! All learned components in the crate (denoiser, return model, reward model,
//! policy mean, critic) are instances of [`MlpModel`]. Parameters live in a
//! single flat `Vec<f64>` so that the optimizer, checkpointing and
//! finite-difference checks can treat every model uniformly.
//!
//! Architecture: dense layers with ReLU hidden activations and an identity
//! output layer by default. An optional sinusoidal embedding of the diffusion
//! step is projected through one linear map and added to the first hidden
//! pre-activation. When skip connections are enabled, the first hidden
//! activation is added to the pre-activation of every later hidden layer
//! (this requires all hidden widths to match).

use rand::Rng;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("model has a step embedding but no step was provided")]
    MissingStep,
    #[error("step provided but model has no step embedding")]
    UnexpectedStep,
    #[error("gradient tape is stale: parameters changed since the forward pass")]
    StaleTape,
    #[error("non-finite gradient encountered during optimization")]
    NonFiniteGradient,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpConfig {
    /// `[input, hidden..., output]`; at least two entries.
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Sinusoidal step embedding dimension, if the model is step-conditioned.
    pub step_embed_dim: Option<usize>,
    /// First-hidden-to-each-hidden additive skips.
    pub skip_connections: bool,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>) -> Self {
        Self {
            layer_sizes,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
            step_embed_dim: None,
            skip_connections: false,
        }
    }

    pub fn with_step_embedding(mut self, dim: usize) -> Self {
        self.step_embed_dim = Some(dim);
        self
    }

    pub fn with_skip_connections(mut self) -> Self {
        self.skip_connections = true;
        self
    }

    pub fn with_hidden_activation(mut self, act: Activation) -> Self {
        self.hidden_activation = act;
        self
    }
}

/// Offsets of one dense layer's weight matrix and bias in the flat buffer.
#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    sizes: Vec<usize>,
    hidden_act: Activation,
    output_act: Activation,
    skip: bool,
    embed_dim: Option<usize>,
    layers: Vec<LayerOffsets>,
    /// Projection of the step embedding into the first hidden layer, if any.
    proj: Option<LayerOffsets>,
    params: Vec<f64>,
    /// Bumped on every mutable parameter access; lets tapes detect staleness.
    version: u64,
}

/// Cached intermediate values from one forward pass, sufficient to compute
/// parameter and input gradients of any scalar function of the output.
#[derive(Debug, Clone)]
pub struct GradientTape {
    input: Vec<f64>,
    embed: Option<Vec<f64>>,
    /// Pre-activations per layer.
    zs: Vec<Vec<f64>>,
    /// Post-activations per layer (last entry is the model output).
    acts: Vec<Vec<f64>>,
    version: u64,
}

impl MlpModel {
    pub fn new<R: Rng + ?Sized>(config: &MlpConfig, rng: &mut R) -> Result<Self, NnError> {
        let sizes = config.layer_sizes.clone();
        if sizes.len() < 2 {
            return Err(NnError::BadConfig(
                "layer_sizes needs at least input and output".into(),
            ));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(NnError::BadConfig("layer sizes must be positive".into()));
        }
        if config.skip_connections {
            let hidden = &sizes[1..sizes.len() - 1];
            if hidden.windows(2).any(|w| w[0] != w[1]) {
                return Err(NnError::BadConfig(
                    "skip connections require equal hidden widths".into(),
                ));
            }
        }

        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut off = 0usize;
        for l in 0..sizes.len() - 1 {
            let (rows, cols) = (sizes[l + 1], sizes[l]);
            layers.push(LayerOffsets {
                w: off,
                b: off + rows * cols,
                rows,
                cols,
            });
            off += rows * cols + rows;
        }
        let proj = config.step_embed_dim.map(|dim| {
            let o = LayerOffsets {
                w: off,
                b: off, // projection carries no bias; the first layer bias covers it
                rows: sizes[1],
                cols: dim,
            };
            off += o.rows * o.cols;
            o
        });

        let mut params = vec![0.0; off];
        for lo in layers.iter().chain(proj.iter()) {
            let bound = 1.0 / (lo.cols as f64).sqrt();
            for p in &mut params[lo.w..lo.w + lo.rows * lo.cols] {
                *p = rng.gen_range(-bound..bound);
            }
        }

        Ok(Self {
            sizes,
            hidden_act: config.hidden_activation,
            output_act: config.output_activation,
            skip: config.skip_connections,
            embed_dim: config.step_embed_dim,
            layers,
            proj,
            params,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn has_step_embedding(&self) -> bool {
        self.embed_dim.is_some()
    }

    pub fn step_embed_dim(&self) -> Option<usize> {
        self.embed_dim
    }

    pub fn skip_connections(&self) -> bool {
        self.skip
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the flat parameter vector. Invalidates existing tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    /// Rebuilds a model from an architecture description plus a flat parameter
    /// vector (checkpoint restore path).
    pub fn from_parts(config: &MlpConfig, params: Vec<f64>) -> Result<Self, NnError> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = Self::new(config, &mut rng)?;
        if params.len() != model.params.len() {
            return Err(NnError::DimMismatch {
                expected: model.params.len(),
                got: params.len(),
                context: "from_parts parameter count",
            });
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> MlpConfig {
        MlpConfig {
            layer_sizes: self.sizes.clone(),
            hidden_activation: self.hidden_act,
            output_activation: self.output_act,
            step_embed_dim: self.embed_dim,
            skip_connections: self.skip,
        }
    }

    fn w(&self, lo: &LayerOffsets) -> &[f64] {
        &self.params[lo.w..lo.w + lo.rows * lo.cols]
    }

    fn b(&self, lo: &LayerOffsets) -> &[f64] {
        &self.params[lo.b..lo.b + lo.rows]
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_act
        } else {
            self.hidden_act
        }
    }

    fn check_step(&self, step: Option<usize>) -> Result<(), NnError> {
        match (self.embed_dim, step) {
            (Some(_), None) => Err(NnError::MissingStep),
            (None, Some(_)) => Err(NnError::UnexpectedStep),
            _ => Ok(()),
        }
    }

    /// Deterministic forward pass.
    pub fn forward(&self, input: &[f64], step: Option<usize>) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_tape(input, step)?.0)
    }

    /// Forward pass that also records the tape needed by [`Self::backward`].
    pub fn forward_tape(
        &self,
        input: &[f64],
        step: Option<usize>,
    ) -> Result<(Vec<f64>, GradientTape), NnError> {
        if input.len() != self.sizes[0] {
            return Err(NnError::DimMismatch {
                expected: self.sizes[0],
                got: input.len(),
                context: "forward input",
            });
        }
        self.check_step(step)?;

        let embed = match (self.embed_dim, step) {
            (Some(dim), Some(s)) => Some(sinusoidal_embedding(s, dim)),
            _ => None,
        };

        let n_layers = self.layers.len();
        let mut zs = Vec::with_capacity(n_layers);
        let mut acts = Vec::with_capacity(n_layers);
        let mut cur: &[f64] = input;
        for (l, lo) in self.layers.iter().enumerate() {
            let mut z = matvec(self.w(lo), lo.rows, lo.cols, cur);
            for (zj, bj) in z.iter_mut().zip(self.b(lo)) {
                *zj += bj;
            }
            if l == 0 {
                if let (Some(p), Some(e)) = (&self.proj, &embed) {
                    let pe = matvec(self.w(p), p.rows, p.cols, e);
                    for (zj, pj) in z.iter_mut().zip(&pe) {
                        *zj += pj;
                    }
                }
            } else if self.skip && l + 1 < n_layers {
                // first hidden activation feeds every later hidden layer
                for (zj, aj) in z.iter_mut().zip(&acts[0]) {
                    *zj += aj;
                }
            }
            let act = self.activation_for(l);
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            zs.push(z);
            acts.push(a);
            cur = acts.last().unwrap().as_slice();
        }

        let output = acts.last().unwrap().clone();
        let tape = GradientTape {
            input: input.to_vec(),
            embed,
            zs,
            acts,
            version: self.version,
        };
        Ok((output, tape))
    }

    /// Parameter gradients of `loss = loss_grad . output` for the forward pass
    /// recorded on `tape`. Returns a flat vector aligned with [`Self::params`].
    pub fn backward(&self, tape: &GradientTape, loss_grad: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(tape, loss_grad, &mut grads)?;
        Ok(grads)
    }

    /// Accumulating variant of [`Self::backward`] for minibatch training.
    pub fn backward_into(
        &self,
        tape: &GradientTape,
        loss_grad: &[f64],
        grads: &mut [f64],
    ) -> Result<(), NnError> {
        self.backprop(tape, loss_grad, Some(grads), None)
    }

    /// Gradient of `output_weights . forward(input)` with respect to the input.
    pub fn input_gradient(
        &self,
        input: &[f64],
        output_weights: &[f64],
        step: Option<usize>,
    ) -> Result<Vec<f64>, NnError> {
        let (_, tape) = self.forward_tape(input, step)?;
        let mut dx = vec![0.0; self.sizes[0]];
        self.backprop(&tape, output_weights, None, Some(&mut dx))?;
        Ok(dx)
    }

    /// Input gradient computed from an existing tape.
    pub fn input_gradient_from_tape(
        &self,
        tape: &GradientTape,
        output_weights: &[f64],
    ) -> Result<Vec<f64>, NnError> {
        let mut dx = vec![0.0; self.sizes[0]];
        self.backprop(tape, output_weights, None, Some(&mut dx))?;
        Ok(dx)
    }

    fn backprop(
        &self,
        tape: &GradientTape,
        loss_grad: &[f64],
        mut param_grads: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) -> Result<(), NnError> {
        if tape.version != self.version {
            return Err(NnError::StaleTape);
        }
        let n_layers = self.layers.len();
        if loss_grad.len() != self.output_dim() {
            return Err(NnError::DimMismatch {
                expected: self.output_dim(),
                got: loss_grad.len(),
                context: "backward loss gradient",
            });
        }

        // da[l] = dL/d(acts[l]); skip contributions into acts[0] accumulate as we go.
        let mut da: Vec<Vec<f64>> = self.layers.iter().map(|lo| vec![0.0; lo.rows]).collect();
        da[n_layers - 1].copy_from_slice(loss_grad);

        let mut dinput = vec![0.0; self.sizes[0]];
        for l in (0..n_layers).rev() {
            let lo = &self.layers[l];
            let act = self.activation_for(l);
            let delta: Vec<f64> = da[l]
                .iter()
                .zip(&tape.zs[l])
                .map(|(&d, &z)| d * act.derivative(z))
                .collect();

            let below: &[f64] = if l == 0 {
                &tape.input
            } else {
                &tape.acts[l - 1]
            };
            if let Some(g) = param_grads.as_deref_mut() {
                for (r, &dr) in delta.iter().enumerate() {
                    let row = &mut g[lo.w + r * lo.cols..lo.w + (r + 1) * lo.cols];
                    for (c, &xc) in below.iter().enumerate() {
                        row[c] += dr * xc;
                    }
                    g[lo.b + r] += dr;
                }
            }
            // propagate through the weight matrix
            if l == 0 {
                matvec_t_add(self.w(lo), lo.rows, lo.cols, &delta, &mut dinput);
                if let (Some(p), Some(e)) = (&self.proj, &tape.embed) {
                    if let Some(g) = param_grads.as_deref_mut() {
                        for (r, &dr) in delta.iter().enumerate() {
                            let row = &mut g[p.w + r * p.cols..p.w + (r + 1) * p.cols];
                            for (c, &ec) in e.iter().enumerate() {
                                row[c] += dr * ec;
                            }
                        }
                    }
                }
            } else {
                let (head, tail) = da.split_at_mut(l);
                let _ = tail;
                matvec_t_add(self.w(lo), lo.rows, lo.cols, &delta, &mut head[l - 1]);
                if self.skip && l + 1 < n_layers {
                    for (a0, &d) in head[0].iter_mut().zip(&delta) {
                        *a0 += d;
                    }
                }
            }
        }
        if let Some(dx) = input_grad {
            dx.copy_from_slice(&dinput);
        }
        Ok(())
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wc, xc) in row.iter().zip(x) {
            acc += wc * xc;
        }
        out[r] = acc;
    }
    out
}

/// `out += W^T d`
fn matvec_t_add(w: &[f64], rows: usize, cols: usize, d: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let dr = d[r];
        for (oc, wc) in out.iter_mut().zip(row) {
            *oc += dr * wc;
        }
    }
}

/// Standard sinusoidal position embedding of the diffusion step.
pub fn sinusoidal_embedding(step: usize, dim: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    let half = dim / 2;
    for k in 0..half {
        let freq = (10_000f64).powf(-(k as f64) / half as f64);
        let x = step as f64 * freq;
        e[2 * k] = x.sin();
        e[2 * k + 1] = x.cos();
    }
    if dim % 2 == 1 {
        e[dim - 1] = 1.0;
    }
    e
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn state(&self) -> (u64, &[f64], &[f64]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(lr: f64, t: u64, m: Vec<f64>, v: Vec<f64>) -> Self {
        let mut a = Self::new(lr, m.len());
        a.t = t;
        a.m = m;
        a.v = v;
        a
    }

    /// One Adam update in place. Rejects non-finite gradients.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient);
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Adam update for an [`MlpModel`]; checks shapes and keeps the tape version
/// handling in one place.
pub fn sgd_adam_step(
    model: &mut MlpModel,
    grads: &[f64],
    opt: &mut Adam,
) -> Result<(), NnError> {
    if grads.len() != model.n_params() {
        return Err(NnError::DimMismatch {
            expected: model.n_params(),
            got: grads.len(),
            context: "adam gradient vector",
        });
    }
    opt.step(model.params_mut(), grads)
}
