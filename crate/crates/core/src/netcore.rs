//! Function approximators: the diagonal-Gaussian MLP policy and the learned
//! advantage network.
//!
//! Parameters live in flat vectors. The layout is layer-major with weights
//! before biases: for each layer `l` with `fan_in` inputs and `fan_out`
//! outputs, a row-major `fan_in x fan_out` weight block (so a batch of row
//! inputs is multiplied as `X * W`) followed by `fan_out` biases. Hidden
//! layers apply the configured activation; the output layer is linear.
//!
//! A policy's full vector is `theta = [theta_mu, theta_sigma]`, where
//! `theta_sigma` holds one log standard deviation per action dimension.
//!
//! Every forward pass exists twice: a plain-arithmetic version used while
//! sampling, and a graph version used when gradients are needed.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Graph, Var};
use crate::error::{shape_mismatch, Error, Result};

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    fn graph(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Fully connected network shape: `[input, hidden..., output]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let config = Self {
            layer_sizes,
            activation,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::Contract(format!(
                "an MLP needs at least one hidden layer, got sizes {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Contract(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    /// `(fan_in, fan_out, offset)` for every layer.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let here = offset;
            offset += w[0] * w[1] + w[1];
            (w[0], w[1], here)
        })
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Indices of all bias entries in the flat layout.
    pub fn bias_indices(&self) -> Vec<usize> {
        self.layers()
            .flat_map(|(fan_in, fan_out, off)| {
                (off + fan_in * fan_out)..(off + fan_in * fan_out + fan_out)
            })
            .collect()
    }
}

/// Weight initialization. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform weights with standard deviation `gain / sqrt(fan_in)`; the
    /// output layer uses `output_gain` instead.
    FanInUniform {
        gain: f64,
        output_gain: f64,
    },
    Zeros,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::FanInUniform {
            gain: 1.0,
            output_gain: 0.1,
        }
    }
}

pub fn init_params<R: Rng + ?Sized>(
    config: &MlpConfig,
    rng: &mut R,
    scheme: InitScheme,
) -> Vec<f64> {
    let mut params = vec![0.0; config.param_count()];
    let InitScheme::FanInUniform { gain, output_gain } = scheme else {
        return params;
    };
    let n_layers = config.layer_sizes.len() - 1;
    for (l, (fan_in, fan_out, offset)) in config.layers().enumerate() {
        let g = if l + 1 == n_layers { output_gain } else { gain };
        let std = g / (fan_in as f64).sqrt();
        if std == 0.0 {
            continue;
        }
        // uniform on [-b, b] has std b / sqrt(3)
        let bound = std * 3f64.sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in &mut params[offset..offset + fan_in * fan_out] {
            *w = dist.sample(rng);
        }
    }
    params
}

/// Forward pass for a single input row.
pub fn mlp_forward(params: &[f64], config: &MlpConfig, input: &[f64]) -> Result<Vec<f64>> {
    if params.len() != config.param_count() {
        return Err(shape_mismatch(
            "mlp parameters",
            config.param_count(),
            params.len(),
        ));
    }
    if input.len() != config.input_dim() {
        return Err(shape_mismatch("mlp input", config.input_dim(), input.len()));
    }
    Ok(forward_unchecked(params, config, input))
}

pub(crate) fn forward_unchecked(params: &[f64], config: &MlpConfig, input: &[f64]) -> Vec<f64> {
    let n_layers = config.layer_sizes.len() - 1;
    let mut x = input.to_vec();
    for (l, (fan_in, fan_out, off)) in config.layers().enumerate() {
        let weights = &params[off..off + fan_in * fan_out];
        let mut y = params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out].to_vec();
        for (i, xi) in x.iter().enumerate() {
            let w_row = &weights[i * fan_out..(i + 1) * fan_out];
            for (yj, wij) in y.iter_mut().zip(w_row) {
                *yj += xi * wij;
            }
        }
        if l + 1 < n_layers {
            for v in &mut y {
                *v = config.activation.apply(*v);
            }
        }
        x = y;
    }
    x
}

/// Records the network on `g`. `params` is a `1 x P` row, `input` is `N x in`.
pub fn mlp_graph(g: &mut Graph, params: Var, config: &MlpConfig, input: Var) -> Var {
    let n_layers = config.layer_sizes.len() - 1;
    let mut x = input;
    for (l, (fan_in, fan_out, off)) in config.layers().enumerate() {
        let w = g.slice(params, off, (fan_in, fan_out));
        let b = g.slice(params, off + fan_in * fan_out, (1, fan_out));
        let h = g.matmul(x, w);
        x = g.add(h, b);
        if l + 1 < n_layers {
            x = config.activation.graph(g, x);
        }
    }
    x
}

/// Parameters of the Gaussian policy `N(f(s | theta_mu), diag(exp(theta_sigma))^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: MlpConfig,
    pub theta_mu: Vec<f64>,
    pub theta_sigma: Vec<f64>,
}

impl PolicyParams {
    pub fn new<R: Rng + ?Sized>(
        config: MlpConfig,
        init_log_std: f64,
        rng: &mut R,
        scheme: InitScheme,
    ) -> Self {
        let theta_mu = init_params(&config, rng, scheme);
        let theta_sigma = vec![init_log_std; config.output_dim()];
        Self {
            config,
            theta_mu,
            theta_sigma,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Length of the flat vector `theta`.
    pub fn len(&self) -> usize {
        self.theta_mu.len() + self.theta_sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.len());
        theta.extend_from_slice(&self.theta_mu);
        theta.extend_from_slice(&self.theta_sigma);
        theta
    }

    pub fn from_flat(config: MlpConfig, theta: &[f64]) -> Result<Self> {
        let n_mu = config.param_count();
        let expected = n_mu + config.output_dim();
        if theta.len() != expected {
            return Err(shape_mismatch("policy theta", expected, theta.len()));
        }
        Ok(Self {
            theta_mu: theta[..n_mu].to_vec(),
            theta_sigma: theta[n_mu..].to_vec(),
            config,
        })
    }

    pub fn mean(&self, s: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(&self.theta_mu, &self.config, s)
    }

    fn check_io(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim() {
            return Err(shape_mismatch("policy state", self.state_dim(), s.len()));
        }
        if a.len() != self.action_dim() {
            return Err(shape_mismatch("policy action", self.action_dim(), a.len()));
        }
        Ok(())
    }
}

/// `sum_d [ -(a_d - mu_d)^2 / (2 exp(2 sigma_d)) - sigma_d - ln(2 pi) / 2 ]`
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(a)
        .map(|((m, ls), x)| {
            let z = (x - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LN_TWO_PI
        })
        .sum()
}

pub fn log_prob(policy: &PolicyParams, s: &[f64], a: &[f64]) -> Result<f64> {
    policy.check_io(s, a)?;
    let mean = forward_unchecked(&policy.theta_mu, &policy.config, s);
    Ok(gaussian_log_prob(&mean, &policy.theta_sigma, a))
}

/// Draws `a = mu(s) + exp(theta_sigma) * z` with `z ~ N(0, I)`; also returns
/// the log-probability of the draw.
pub fn sample_action<R: Rng + ?Sized>(
    policy: &PolicyParams,
    s: &[f64],
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    if s.len() != policy.state_dim() {
        return Err(shape_mismatch("policy state", policy.state_dim(), s.len()));
    }
    let mean = forward_unchecked(&policy.theta_mu, &policy.config, s);
    Ok(sample_from_mean(&mean, &policy.theta_sigma, rng))
}

pub(crate) fn sample_from_mean<R: Rng + ?Sized>(
    mean: &[f64],
    log_std: &[f64],
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let action: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(m, ls)| {
            let z: f64 = StandardNormal.sample(rng);
            m + ls.exp() * z
        })
        .collect();
    let lp = gaussian_log_prob(mean, log_std, &action);
    (action, lp)
}

/// Per-row log-probabilities (`N x 1`) of `actions` under the policy whose
/// flat parameters are the `1 x (P + A)` row `theta`.
pub fn log_prob_graph(
    g: &mut Graph,
    theta: Var,
    config: &MlpConfig,
    states: Var,
    actions: Var,
) -> Var {
    let n_mu = config.param_count();
    let action_dim = config.output_dim();
    let theta_mu = g.slice(theta, 0, (1, n_mu));
    let log_std = g.slice(theta, n_mu, (1, action_dim));
    let mean = mlp_graph(g, theta_mu, config, states);
    let diff = g.sub(actions, mean);
    let neg_log_std = g.neg(log_std);
    let inv_std = g.exp(neg_log_std);
    let z = g.mul(diff, inv_std);
    let z2 = g.square(z);
    let half = g.scale(z2, -0.5);
    let t = g.sub(half, log_std);
    let c = g.scalar(HALF_LN_TWO_PI);
    let t = g.sub(t, c);
    let rows = g.shape(t).0;
    g.sum_to(t, (rows, 1))
}

/// Parameters of the learned advantage `A_psi(s, a, s')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageParams {
    pub state_dim: usize,
    pub action_dim: usize,
    pub config: MlpConfig,
    pub psi: Vec<f64>,
}

impl AdvantageParams {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
        scheme: InitScheme,
    ) -> Result<Self> {
        let config = advantage_config(state_dim, action_dim, hidden)?;
        let psi = init_params(&config, rng, scheme);
        Ok(Self {
            state_dim,
            action_dim,
            config,
            psi,
        })
    }

    pub fn zeros(state_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<Self> {
        let config = advantage_config(state_dim, action_dim, hidden)?;
        Ok(Self {
            state_dim,
            action_dim,
            psi: vec![0.0; config.param_count()],
            config,
        })
    }
}

/// ReLU network `[2 * state + action, hidden..., 1]`.
pub fn advantage_config(
    state_dim: usize,
    action_dim: usize,
    hidden: &[usize],
) -> Result<MlpConfig> {
    let mut sizes = vec![2 * state_dim + action_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    MlpConfig::new(sizes, Activation::Relu)
}

pub fn advantage_forward(
    adv: &AdvantageParams,
    s: &[f64],
    a: &[f64],
    s_next: &[f64],
) -> Result<f64> {
    let mut input = Vec::with_capacity(s.len() + a.len() + s_next.len());
    input.extend_from_slice(s);
    input.extend_from_slice(a);
    input.extend_from_slice(s_next);
    if s.len() != s_next.len() || input.len() != adv.config.input_dim() {
        return Err(shape_mismatch(
            "advantage input (s, a, s')",
            adv.config.input_dim(),
            (s.len(), a.len(), s_next.len()),
        ));
    }
    Ok(mlp_forward(&adv.psi, &adv.config, &input)?[0])
}

/// `N x 1` advantages for the concatenated `[s | a | s']` rows in `inputs`.
pub fn advantage_graph(g: &mut Graph, psi: Var, config: &MlpConfig, inputs: Var) -> Var {
    mlp_graph(g, psi, config, inputs)
}

/// Stacks transitions into the `N x (2s + a)` input matrix of the advantage net.
pub fn advantage_inputs(
    states: &Array2<f64>,
    actions: &Array2<f64>,
    next_states: &Array2<f64>,
) -> Array2<f64> {
    ndarray::concatenate(
        ndarray::Axis(1),
        &[states.view(), actions.view(), next_states.view()],
    )
    .expect("transition arrays share a row count")
}

/// On-disk parameter vector: a header naming the network followed by the
/// flat values in the documented layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub format: String,
    pub version: u32,
    pub config: MlpConfig,
    /// Number of trailing log-std entries after the network parameters
    /// (zero for the advantage net).
    pub log_std_len: usize,
    /// `(state, action)` widths, present for the advantage net only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage_dims: Option<(usize, usize)>,
    pub values: Vec<f64>,
}

pub const PARAM_FORMAT: &str = "norml-params";

impl ParamFile {
    pub fn from_policy(p: &PolicyParams) -> Self {
        Self {
            format: PARAM_FORMAT.into(),
            version: 1,
            config: p.config.clone(),
            log_std_len: p.theta_sigma.len(),
            advantage_dims: None,
            values: p.flatten(),
        }
    }

    pub fn from_advantage(a: &AdvantageParams) -> Self {
        Self {
            format: PARAM_FORMAT.into(),
            version: 1,
            config: a.config.clone(),
            log_std_len: 0,
            advantage_dims: Some((a.state_dim, a.action_dim)),
            values: a.psi.clone(),
        }
    }

    pub fn to_policy(&self) -> Result<PolicyParams> {
        self.check()?;
        PolicyParams::from_flat(self.config.clone(), &self.values)
    }

    pub fn to_advantage(&self) -> Result<AdvantageParams> {
        self.check()?;
        if self.log_std_len != 0 || self.config.output_dim() != 1 {
            return Err(Error::Format(
                "parameter file does not hold an advantage net".into(),
            ));
        }
        let (state_dim, action_dim) = self
            .advantage_dims
            .ok_or_else(|| Error::Format("advantage file lacks state/action dims".into()))?;
        if 2 * state_dim + action_dim != self.config.input_dim() {
            return Err(Error::Format(
                "advantage dims do not match the input width".into(),
            ));
        }
        Ok(AdvantageParams {
            state_dim,
            action_dim,
            config: self.config.clone(),
            psi: self.values.clone(),
        })
    }

    fn check(&self) -> Result<()> {
        if self.format != PARAM_FORMAT || self.version != 1 {
            return Err(Error::Format(format!(
                "expected {PARAM_FORMAT} v1, found {} v{}",
                self.format, self.version
            )));
        }
        self.config.validate()?;
        if self.values.len() != self.config.param_count() + self.log_std_len {
            return Err(Error::Format("value count does not match header".into()));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
