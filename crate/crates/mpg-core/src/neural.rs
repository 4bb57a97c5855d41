//! Feed-forward preference networks with hand-rolled backpropagation,
//! horizon encodings for sharing one network across lookahead depths,
//! and the end-of-training tangent-kernel positive-definiteness
//! certificate.
//!
//! Networks are small on purpose: a scalar-output MLP whose exact
//! reverse-mode gradient fits in a flat vector, so the tangent Gram
//! matrix over an evaluation set can be eigen-solved directly.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::certify::GramSpectrum;
use crate::error::{MpgError, Result};
use crate::train::BaselineState;

/// How the lookahead depth `i` enters the preference model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonEncoding {
    /// One network per block; no horizon input. Matches the
    /// disjoint-parameter assumption of the exact theory.
    Separate,
    /// One shared network with `i` appended to the input as a raw float.
    SharedRaw,
    /// One shared network with `g(i) = 1 - 1/i` appended: increasing in
    /// `i` with decreasing increments, so deep-lookahead blocks look
    /// nearly identical to the network.
    SharedShrinking,
}

impl HorizonEncoding {
    /// Extra input produced by the encoding, if any.
    pub fn feature(&self, i: usize) -> Option<f64> {
        match self {
            HorizonEncoding::Separate => None,
            HorizonEncoding::SharedRaw => Some(i as f64),
            HorizonEncoding::SharedShrinking => Some(1.0 - 1.0 / i as f64),
        }
    }

    pub fn is_shared(&self) -> bool {
        !matches!(self, HorizonEncoding::Separate)
    }
}

/// Scalar-output multilayer perceptron, tanh hidden activations,
/// linear output. `sizes = [input, hidden..., 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    /// `weights[l][r * sizes[l] + c]`: row-major `sizes[l+1] x sizes[l]`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Gaussian init with per-layer variance `1 / fan_in`, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let weights = (0..sizes.len() - 1)
            .map(|l| vec![0.0; sizes[l] * sizes[l + 1]])
            .collect();
        let biases = (0..sizes.len() - 1).map(|l| vec![0.0; sizes[l + 1]]).collect();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 {
            return Err(MpgError::InvalidArgument(
                "network needs at least input and output layers".into(),
            ));
        }
        if *sizes.last().unwrap() != 1 {
            return Err(MpgError::InvalidArgument(
                "preference network output must be scalar".into(),
            ));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(MpgError::InvalidArgument("zero-width layer".into()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.sizes[0] {
            return Err(MpgError::DimensionMismatch(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.sizes[0]
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MpgError::InvalidArgument("non-finite network input".into()));
        }
        Ok(())
    }

    /// Forward pass; returns the scalar preference.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Forward pass keeping every layer's activations (`acts[0] = x`).
    fn forward_cached(&self, x: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_input(x)?;
        let mut acts = vec![x.to_vec()];
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let prev = &acts[l];
            let mut out = Vec::with_capacity(fan_out);
            for r in 0..fan_out {
                let mut z = self.biases[l][r];
                let row = &self.weights[l][r * fan_in..(r + 1) * fan_in];
                for (w, a) in row.iter().zip(prev) {
                    z += w * a;
                }
                out.push(if l + 1 < self.n_layers() { z.tanh() } else { z });
            }
            acts.push(out);
        }
        Ok((acts.last().unwrap()[0], acts))
    }

    /// Exact reverse-mode gradient of the scalar output, flattened in
    /// layer order as `[w_0, b_0, w_1, b_1, ...]`.
    pub fn grad_params(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, acts) = self.forward_cached(x)?;
        let nl = self.n_layers();
        // upstream sensitivity per layer output; output layer is linear
        let mut delta = vec![1.0];
        let mut grads_w: Vec<Vec<f64>> = vec![Vec::new(); nl];
        let mut grads_b: Vec<Vec<f64>> = vec![Vec::new(); nl];
        for l in (0..nl).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &acts[l];
            let mut gw = vec![0.0; fan_in * fan_out];
            for r in 0..fan_out {
                for c in 0..fan_in {
                    gw[r * fan_in + c] = delta[r] * input[c];
                }
            }
            grads_w[l] = gw;
            grads_b[l] = delta.clone();
            if l > 0 {
                // push sensitivity through W_l and the tanh of layer l-1
                let mut next = vec![0.0; fan_in];
                for r in 0..fan_out {
                    let row = &self.weights[l][r * fan_in..(r + 1) * fan_in];
                    for (nc, w) in next.iter_mut().zip(row) {
                        *nc += delta[r] * w;
                    }
                }
                for (nc, a) in next.iter_mut().zip(&acts[l]) {
                    *nc *= 1.0 - a * a;
                }
                delta = next;
            }
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for l in 0..nl {
            flat.extend_from_slice(&grads_w[l]);
            flat.extend_from_slice(&grads_b[l]);
        }
        Ok(flat)
    }

    /// `params += coeff * flat` using the same flattening as
    /// [`Mlp::grad_params`].
    pub fn apply_flat(&mut self, flat: &[f64], coeff: f64) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(MpgError::DimensionMismatch(format!(
                "delta has {} entries, network has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut k = 0;
        for l in 0..self.n_layers() {
            for w in &mut self.weights[l] {
                *w += coeff * flat[k];
                k += 1;
            }
            for b in &mut self.biases[l] {
                *b += coeff * flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.n_layers() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(MpgError::DimensionMismatch(
                "parameter vector length mismatch".into(),
            ));
        }
        let mut k = 0;
        for l in 0..self.n_layers() {
            for w in &mut self.weights[l] {
                *w = flat[k];
                k += 1;
            }
            for b in &mut self.biases[l] {
                *b = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn max_abs_param(&self) -> f64 {
        self.flat_params()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let mlp: Mlp = serde_json::from_value(value.clone())?;
        Mlp::check_sizes(&mlp.sizes)?;
        Ok(mlp)
    }
}

/// Tangent-kernel Gram matrix over an evaluation set, with its spectrum
/// and the positive-definiteness verdict.
#[derive(Debug, Clone)]
pub struct NtkGram {
    pub size: usize,
    /// Row-major `size x size`.
    pub matrix: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub min_eig: f64,
    pub max_eig: f64,
    pub pass: bool,
}

impl NtkGram {
    pub fn report_json(&self) -> serde_json::Value {
        serde_json::json!({
            "min_eig": self.min_eig,
            "max_eig": self.max_eig,
            "pass": self.pass,
        })
    }
}

/// Builds `K[x][y] = <grad_params(x), grad_params(y)>` from the encoded
/// inputs of an evaluation set and eigen-solves it. The certificate
/// passes iff `min_eig > tol * max_eig`; a failure is inconclusive
/// about optimality, never a proof of suboptimality.
pub fn ntk_gram(mlp: &Mlp, inputs: &[Vec<f64>], tol: f64) -> Result<NtkGram> {
    if inputs.is_empty() {
        return Err(MpgError::InvalidArgument("empty evaluation set".into()));
    }
    let grads: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| mlp.grad_params(x))
        .collect::<Result<_>>()?;
    let g = grads.len();
    let mut matrix = vec![0.0; g * g];
    for i in 0..g {
        for j in i..g {
            let v: f64 = grads[i].iter().zip(&grads[j]).map(|(x, y)| x * y).sum();
            matrix[i * g + j] = v;
            matrix[j * g + i] = v;
        }
    }
    let spec = GramSpectrum::from_gram(&matrix, g)?;
    let max_eig = spec.eigenvalues[0];
    let min_eig = *spec.eigenvalues.last().unwrap();
    Ok(NtkGram {
        size: g,
        matrix,
        eigenvalues: spec.eigenvalues,
        min_eig,
        max_eig,
        pass: min_eig > tol * max_eig.max(0.0),
    })
}

/// Default relative tolerance for the tangent-kernel certificate.
pub const NTK_TOL: f64 = 1e-8;

/// Extended policy with neural preferences over continuous or encoded
/// states: `pi^{(i)}(a|s) ~ exp(h(a, s, i) / tau)` with a uniform
/// baseline. Depending on the encoding the blocks either own one
/// network each or share a single network that receives the horizon as
/// an input.
#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    pub encoding: HorizonEncoding,
    pub nets: Vec<Mlp>,
    pub n_actions: usize,
    pub state_dim: usize,
    pub horizon: usize,
    /// Fixed multiplier on the network output: `h = out_scale * f(x)`.
    /// Scales the tangent kernel by `out_scale^2`, so it acts as an
    /// effective step-size knob in preference space.
    pub out_scale: f64,
    /// When set, the input is the outer product of the action one-hot
    /// and the state features (plus the horizon feature) instead of
    /// their concatenation. With one-hot states and no hidden layers
    /// this reproduces the tabular linear model, shared across blocks.
    pub product_input: bool,
    tau: f64,
}

impl NeuralPolicy {
    pub fn new(
        n_actions: usize,
        state_dim: usize,
        horizon: usize,
        hidden: &[usize],
        encoding: HorizonEncoding,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::with_input(
            n_actions, state_dim, horizon, hidden, encoding, false, tau, seed,
        )
    }

    /// As [`NeuralPolicy::new`] with an explicit input layout
    /// (`product_input = true` for the action/state outer product).
    #[allow(clippy::too_many_arguments)]
    pub fn with_input(
        n_actions: usize,
        state_dim: usize,
        horizon: usize,
        hidden: &[usize],
        encoding: HorizonEncoding,
        product_input: bool,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        if tau <= 0.0 {
            return Err(MpgError::InvalidArgument("tau must be positive".into()));
        }
        if n_actions == 0 || horizon == 0 {
            return Err(MpgError::InvalidArgument(
                "need at least one action and horizon >= 1".into(),
            ));
        }
        let extra = if encoding.is_shared() { 1 } else { 0 };
        let base = if product_input {
            n_actions * state_dim
        } else {
            n_actions + state_dim
        };
        let mut sizes = vec![base + extra];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let n_nets = if encoding.is_shared() { 1 } else { horizon };
        let nets = (0..n_nets)
            .map(|k| Mlp::new(&sizes, seed.wrapping_add(k as u64)))
            .collect::<Result<_>>()?;
        Ok(NeuralPolicy {
            encoding,
            nets,
            n_actions,
            state_dim,
            horizon,
            out_scale: 1.0,
            product_input,
            tau,
        })
    }

    /// Zeroes the output layer of every net so the initial preferences
    /// are exactly zero (uniform policy at any temperature), like the
    /// tabular zero init. Hidden layers keep their random weights, so
    /// the parameter gradients stay non-degenerate.
    pub fn zero_output_layer(&mut self) {
        for net in &mut self.nets {
            let last = net.n_layers() - 1;
            net.weights[last].iter_mut().for_each(|w| *w = 0.0);
            net.biases[last].iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        assert!(tau > 0.0, "tau must be positive");
        self.tau = tau;
    }

    fn net_index(&self, i: usize) -> usize {
        if self.encoding.is_shared() {
            0
        } else {
            i - 1
        }
    }

    pub fn net(&self, i: usize) -> &Mlp {
        &self.nets[self.net_index(i)]
    }

    /// Encoded network input: one-hot action and state features —
    /// concatenated, or their outer product when `product_input` is set
    /// — plus the optional horizon feature.
    pub fn encode(&self, a: usize, state: &[f64], i: usize) -> Vec<f64> {
        let mut x;
        if self.product_input {
            x = vec![0.0; self.n_actions * state.len()];
            x[a * state.len()..(a + 1) * state.len()].copy_from_slice(state);
        } else {
            x = vec![0.0; self.n_actions];
            x[a] = 1.0;
            x.extend_from_slice(state);
        }
        if let Some(f) = self.encoding.feature(i) {
            x.push(f);
        }
        x
    }

    pub fn preference(&self, a: usize, state: &[f64], i: usize) -> Result<f64> {
        Ok(self.out_scale * self.net(i).forward(&self.encode(a, state, i))?)
    }

    pub fn action_distribution(&self, state: &[f64], i: usize) -> Result<Vec<f64>> {
        let mut logits = Vec::with_capacity(self.n_actions);
        for a in 0..self.n_actions {
            logits.push(self.preference(a, state, i)? / self.tau);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Ok(probs)
    }

    /// `grad_params log pi^{(i)}(a|s) = (1/tau) [grad h(a) - sum_a' pi(a') grad h(a')]`
    /// over the parameters of block `i`'s network.
    pub fn grad_log_policy(&self, a: usize, state: &[f64], i: usize) -> Result<Vec<f64>> {
        let net = self.net(i);
        let probs = self.action_distribution(state, i)?;
        let mut out = net.grad_params(&self.encode(a, state, i))?;
        for a2 in 0..self.n_actions {
            let g = net.grad_params(&self.encode(a2, state, i))?;
            for (o, v) in out.iter_mut().zip(&g) {
                *o -= probs[a2] * v;
            }
        }
        for o in &mut out {
            *o *= self.out_scale / self.tau;
        }
        Ok(out)
    }

    pub fn max_abs_param(&self) -> f64 {
        self.nets
            .iter()
            .fold(0.0f64, |m, n| m.max(n.max_abs_param()))
    }

    pub fn to_checkpoint(&self) -> serde_json::Value {
        serde_json::json!({
            "encoding": serde_json::to_value(self.encoding).expect("serializable"),
            "n_actions": self.n_actions,
            "state_dim": self.state_dim,
            "horizon": self.horizon,
            "out_scale": self.out_scale,
            "product_input": self.product_input,
            "tau": self.tau,
            "nets": self.nets.iter().map(Mlp::to_json).collect::<Vec<_>>(),
        })
    }

    pub fn from_checkpoint(value: &serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| MpgError::InvalidArgument("checkpoint is not an object".into()))?;
        let get = |k: &str| {
            obj.get(k)
                .ok_or_else(|| MpgError::InvalidArgument(format!("checkpoint missing '{k}'")))
        };
        let encoding: HorizonEncoding = serde_json::from_value(get("encoding")?.clone())?;
        let nets: Vec<Mlp> = get("nets")?
            .as_array()
            .ok_or_else(|| MpgError::InvalidArgument("'nets' is not an array".into()))?
            .iter()
            .map(Mlp::from_json)
            .collect::<Result<_>>()?;
        Ok(NeuralPolicy {
            encoding,
            nets,
            n_actions: serde_json::from_value(get("n_actions")?.clone())?,
            state_dim: serde_json::from_value(get("state_dim")?.clone())?,
            horizon: serde_json::from_value(get("horizon")?.clone())?,
            out_scale: obj
                .get("out_scale")
                .map(|v| serde_json::from_value(v.clone()))
                .transpose()?
                .unwrap_or(1.0),
            product_input: obj
                .get("product_input")
                .map(|v| serde_json::from_value(v.clone()))
                .transpose()?
                .unwrap_or(false),
            tau: serde_json::from_value(get("tau")?.clone())?,
        })
    }
}

/// One nested update from a trajectory of encoded states: for each
/// block `i`, `C_i` sums the last `i` regularized rewards and scales
/// the log-policy gradient at the transition where block `i` acted.
/// Returns the per-block update norms.
pub fn neural_sampled_update(
    policy: &mut NeuralPolicy,
    states: &[Vec<f64>],
    actions: &[usize],
    rewards: &[f64],
    eta: f64,
    tau: f64,
    gamma: f64,
    v_t: &BaselineState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = policy.horizon;
    if actions.len() != n || rewards.len() != n || states.len() < n {
        return Err(MpgError::DimensionMismatch(format!(
            "trajectory length {} does not match horizon {n}",
            actions.len()
        )));
    }
    let log_unif = (1.0 / policy.n_actions as f64).ln();
    // per-transition regularized rewards under the pre-update policy
    let mut step_terms = vec![0.0; n];
    for l in 0..n {
        let probs = policy.action_distribution(&states[l], n - l)?;
        step_terms[l] = rewards[l] - tau * (probs[actions[l]].ln() - log_unif);
    }
    // per-net accumulated deltas (shared nets receive every block's term)
    let mut deltas: Vec<Vec<f64>> = policy
        .nets
        .iter()
        .map(|net| vec![0.0; net.param_count()])
        .collect();
    let mut norms = vec![0.0; n];
    let mut returns = vec![0.0; n];
    let mut c = 0.0;
    for i in 1..=n {
        // window-relative discounted return with a gamma^{n-i} prefactor,
        // matching the tabular sampled update
        c = step_terms[n - i] + gamma * c;
        returns[i - 1] = c;
        let g = policy.grad_log_policy(actions[n - i], &states[n - i], i)?;
        let k = policy.net_index(i);
        let disc = gamma.powi((n - i) as i32);
        let coeff = eta * disc * (c - v_t.value(i));
        let mut sq = 0.0;
        for (d, v) in deltas[k].iter_mut().zip(&g) {
            let step = coeff * v;
            *d += step;
            sq += step * step;
        }
        norms[i - 1] = sq.sqrt();
    }
    for (net, delta) in policy.nets.iter_mut().zip(&deltas) {
        net.apply_flat(delta, 1.0)?;
    }
    Ok((norms, returns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(dim: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(&[5, 8, 1]).unwrap();
        let x = vec![0.3, -0.2, 0.9, 0.0, 1.0];
        assert_eq!(mlp.forward(&x).unwrap(), 0.0);
    }

    #[test]
    fn single_linear_layer_is_a_dot_product() {
        let mut mlp = Mlp::zeros(&[4, 1]).unwrap();
        mlp.weights[0] = vec![0.5, -1.0, 2.0, 0.25];
        mlp.biases[0] = vec![0.1];
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let want = 0.5 - 2.0 + 6.0 + 1.0 + 0.1;
        assert!((mlp.forward(&x).unwrap() - want).abs() < 1e-15);
        // gradient: weights get the input, bias gets 1
        let g = mlp.grad_params(&x).unwrap();
        assert_eq!(&g[..4], x.as_slice());
        assert_eq!(g[4], 1.0);
    }

    /// Independent forward pass with a different summation order
    /// (column-major accumulation instead of row dot products).
    fn forward_alt(mlp: &Mlp, x: &[f64]) -> f64 {
        let mut act = x.to_vec();
        for l in 0..mlp.n_layers() {
            let fan_in = mlp.sizes[l];
            let mut z = mlp.biases[l].clone();
            for c in 0..fan_in {
                for (r, zr) in z.iter_mut().enumerate() {
                    *zr += mlp.weights[l][r * fan_in + c] * act[c];
                }
            }
            act = if l + 1 < mlp.n_layers() {
                z.iter().map(|v| v.tanh()).collect()
            } else {
                z
            };
        }
        act[0]
    }

    #[test]
    fn forward_matches_independent_implementation() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[6, 16, 8, 1], 7).unwrap();
        for _ in 0..20 {
            let x = random_input(6, &mut rng);
            let a = mlp.forward(&x).unwrap();
            let b = forward_alt(&mlp, &x);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mlp = Mlp::new(&[5, 12, 12, 1], 3).unwrap();
        let x = random_input(5, &mut rng);
        let g = mlp.grad_params(&x).unwrap();
        let params = mlp.flat_params();
        let h = 1e-5;
        for _ in 0..100 {
            let k = rng.random_range(0..params.len());
            let mut plus = mlp.clone();
            let mut p = params.clone();
            p[k] += h;
            plus.set_flat_params(&p).unwrap();
            let mut minus = mlp.clone();
            p[k] -= 2.0 * h;
            minus.set_flat_params(&p).unwrap();
            let fd = (plus.forward(&x).unwrap() - minus.forward(&x).unwrap()) / (2.0 * h);
            let denom = g[k].abs().max(1e-6);
            assert!(
                (fd - g[k]).abs() / denom < 1e-5,
                "coord {k}: fd {fd} vs exact {}",
                g[k]
            );
        }
    }

    #[test]
    fn zero_output_layer_kills_upstream_gradients() {
        let mut mlp = Mlp::new(&[4, 8, 1], 11).unwrap();
        let last = mlp.n_layers() - 1;
        mlp.weights[last].iter_mut().for_each(|w| *w = 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = random_input(4, &mut rng);
        let g = mlp.grad_params(&x).unwrap();
        // first layer owns 4*8 weights + 8 biases; all must vanish
        for v in &g[..4 * 8 + 8] {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mlp = Mlp::new(&[3, 6, 1], 5).unwrap();
        let back = Mlp::from_json(&mlp.to_json()).unwrap();
        assert_eq!(back.flat_params(), mlp.flat_params());
        let pol = NeuralPolicy::new(2, 4, 3, &[8], HorizonEncoding::SharedShrinking, 0.5, 9)
            .unwrap();
        let back = NeuralPolicy::from_checkpoint(&pol.to_checkpoint()).unwrap();
        assert_eq!(back.horizon, 3);
        assert_eq!(back.nets[0].flat_params(), pol.nets[0].flat_params());
        let s = vec![0.1, -0.2, 0.3, 0.0];
        assert_eq!(
            back.action_distribution(&s, 2).unwrap(),
            pol.action_distribution(&s, 2).unwrap()
        );
    }

    #[test]
    fn horizon_encoding_shapes() {
        assert_eq!(HorizonEncoding::Separate.feature(5), None);
        assert_eq!(HorizonEncoding::SharedRaw.feature(5), Some(5.0));
        // g increasing with decreasing increments
        let g = |i: usize| HorizonEncoding::SharedShrinking.feature(i).unwrap();
        let mut prev_inc = f64::INFINITY;
        for i in 1..20 {
            assert!(g(i + 1) > g(i));
            let inc = g(i + 1) - g(i);
            assert!(inc < prev_inc);
            prev_inc = inc;
        }
        assert!(g(1) == 0.0 && g(1000) < 1.0);
    }

    #[test]
    fn ntk_single_point_and_duplicates() {
        let mlp = Mlp::new(&[4, 8, 1], 21).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = random_input(4, &mut rng);
        let one = ntk_gram(&mlp, &[x.clone()], NTK_TOL).unwrap();
        let g = mlp.grad_params(&x).unwrap();
        let sq: f64 = g.iter().map(|v| v * v).sum();
        assert!((one.matrix[0] - sq).abs() < 1e-12);
        assert!(one.min_eig >= 0.0);

        // duplicated input: rank-deficient Gram, certificate fails
        let dup = ntk_gram(&mlp, &[x.clone(), x], NTK_TOL).unwrap();
        assert!(dup.min_eig.abs() < 1e-8 * dup.max_eig);
        assert!(!dup.pass);
    }

    #[test]
    fn ntk_is_symmetric_psd_and_definite_when_wide() {
        // 64 grid inputs (16 states x 4 actions) as in a 4x4 grid world
        let mut inputs = Vec::new();
        let policy =
            NeuralPolicy::new(4, 2, 1, &[256], HorizonEncoding::Separate, 0.5, 123).unwrap();
        for a in 0..4 {
            for row in 0..4 {
                for col in 0..4 {
                    inputs.push(policy.encode(a, &[row as f64 / 4.0, col as f64 / 4.0], 1));
                }
            }
        }
        let k = ntk_gram(policy.net(1), &inputs, NTK_TOL).unwrap();
        assert_eq!(k.size, 64);
        for i in 0..64 {
            for j in 0..64 {
                assert!((k.matrix[i * 64 + j] - k.matrix[j * 64 + i]).abs() < 1e-12);
            }
        }
        assert!(k.min_eig >= -1e-8 * k.max_eig);
        // strictly positive and well above the eigen-solver noise floor
        // (~machine epsilon times the top eigenvalue); the relative
        // `pass` flag is a much stronger demand than strict positivity
        // because the tangent kernel of a smooth network on a coarse
        // grid is severely ill-conditioned
        assert!(
            k.min_eig > 100.0 * f64::EPSILON * k.max_eig,
            "min eigenvalue {} vs max {}",
            k.min_eig,
            k.max_eig
        );
    }

    #[test]
    fn neural_softmax_normalizes_and_shifts() {
        let pol = NeuralPolicy::new(3, 2, 2, &[8], HorizonEncoding::SharedRaw, 0.7, 17).unwrap();
        let s = vec![0.4, -0.6];
        for i in 1..=2 {
            let d = pol.action_distribution(&s, i).unwrap();
            let sum: f64 = d.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(d.iter().all(|&p| p > 0.0));
        }
        // grad log pi has zero expectation under pi
        let probs = pol.action_distribution(&s, 1).unwrap();
        let dim = pol.net(1).param_count();
        let mut acc = vec![0.0; dim];
        for a in 0..3 {
            let g = pol.grad_log_policy(a, &s, 1).unwrap();
            for (x, v) in acc.iter_mut().zip(&g) {
                *x += probs[a] * v;
            }
        }
        for v in acc {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn neural_sampled_update_is_unbiased_on_a_finite_mdp() {
        use crate::instances;
        use crate::mdp::sample_trajectory_with;
        use crate::policy::PolicyTable;
        use crate::softdp::objective;

        // small MDP, one-hot state encoding, separate tiny nets
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mdp = instances::random_mdp(3, 2, &mut rng);
        let tau = 0.6;
        let n = 2;
        let pol0 = NeuralPolicy::new(2, 3, n, &[6], HorizonEncoding::Separate, tau, 77).unwrap();
        let encode_state = |s: usize| {
            let mut v = vec![0.0; 3];
            v[s] = 1.0;
            v
        };
        let tables = |p: &NeuralPolicy| -> Vec<PolicyTable> {
            (1..=n)
                .map(|i| {
                    PolicyTable::from_rows(
                        (0..3)
                            .map(|s| p.action_distribution(&encode_state(s), i).unwrap())
                            .collect(),
                    )
                    .unwrap()
                })
                .collect()
        };
        let baseline = PolicyTable::uniform(3, 2);
        let j_of = |p: &NeuralPolicy| objective(&mdp, &tables(p), &baseline, tau, 1.0).unwrap();

        // finite-difference gradient of J over a handful of coordinates
        let h = 1e-5;
        let dim = pol0.net(1).param_count();
        let mut probe_coords = Vec::new();
        for _ in 0..10 {
            probe_coords.push((rng.random_range(1..=n), rng.random_range(0..dim)));
        }
        let mut fd = Vec::new();
        for &(i, k) in &probe_coords {
            let mut plus = pol0.clone();
            let mut p = plus.nets[i - 1].flat_params();
            p[k] += h;
            plus.nets[i - 1].set_flat_params(&p).unwrap();
            let mut minus = pol0.clone();
            p[k] -= 2.0 * h;
            minus.nets[i - 1].set_flat_params(&p).unwrap();
            fd.push((j_of(&plus) - j_of(&minus)) / (2.0 * h));
        }

        // Monte-Carlo mean of the sampled update at the same coordinates
        let trials = 100_000;
        let mut mean = vec![0.0; probe_coords.len()];
        let mut m2 = vec![0.0; probe_coords.len()];
        for t in 0..trials {
            let traj = sample_trajectory_with(
                &mdp,
                |s, steps_left| {
                    pol0.action_distribution(&encode_state(s), steps_left)
                        .unwrap()
                },
                n,
                &mut rng,
            );
            let states: Vec<Vec<f64>> = traj.states.iter().map(|&s| encode_state(s)).collect();
            let mut p = pol0.clone();
            let before: Vec<f64> = probe_coords
                .iter()
                .map(|&(i, k)| p.nets[i - 1].flat_params()[k])
                .collect();
            neural_sampled_update(&mut p, &states, &traj.actions, &traj.rewards, 1.0, tau, 1.0, &BaselineState::zero(n))
                .unwrap();
            for (c, &(i, k)) in probe_coords.iter().enumerate() {
                let x = p.nets[i - 1].flat_params()[k] - before[c];
                let d = x - mean[c];
                mean[c] += d / (t + 1) as f64;
                m2[c] += d * (x - mean[c]);
            }
        }
        for c in 0..probe_coords.len() {
            let se = (m2[c] / (trials as f64 * (trials - 1) as f64)).sqrt();
            let gap = (mean[c] - fd[c]).abs();
            assert!(
                gap <= 3.0 * se + 1e-7,
                "coord {:?}: gap {gap:.3e} > 3 se {:.3e}",
                probe_coords[c],
                3.0 * se
            );
        }
    }
}
