//! MAP and Langevin baselines over the network input.
//!
//! Both work with the Hamiltonian
//! `H(z₀) = ν/2 ‖y − f(z₀)‖² + ½‖z₀‖²` (additive constants dropped), where
//! `f` is the noiseless forward map and `ν` the precision of the output noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::linalg::{gaussian_vector, rng_for};
use crate::network::{ChannelNoise, NetworkSpec, Stage};

/// Loss above which an optimizer run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

const INIT_STREAM: u64 = 500;
const SGLD_STREAM: u64 = 501;

enum Layer {
    Affine { w: DMatrix<f64>, b: DVector<f64> },
    Activation(crate::network::Activation),
}

/// Everything needed to evaluate `H` and its gradient for one observation.
pub struct HamiltonianContext {
    layers: Vec<Layer>,
    y: DVector<f64>,
    noise_precision: f64,
    input_dim: usize,
}

impl HamiltonianContext {
    /// Requires noiseless hidden stages and a noisy output stage, either a
    /// linear stage with finite ν or an activation with Gaussian noise.
    pub fn new(net: &NetworkSpec, y: &DVector<f64>) -> Result<Self> {
        ensure_len("observation", net.output_dim(), y.len())?;
        ensure_finite(y.as_slice(), "observation")?;
        if !net.hidden_is_deterministic() {
            return Err(Error::Unsupported("Hamiltonian of a network with noisy hidden stages".into()));
        }
        let noise_precision = match net.stages().last().unwrap() {
            Stage::Linear(l) => l.nu(),
            Stage::Nonlinear(nl) => match nl.noise {
                ChannelNoise::Gaussian { variance } => variance.recip(),
                ChannelNoise::None => f64::INFINITY,
            },
        };
        if !noise_precision.is_finite() {
            return Err(Error::Unsupported("Hamiltonian of a noiseless observation".into()));
        }
        let layers = net
            .stages()
            .iter()
            .map(|s| match s {
                Stage::Linear(l) => Layer::Affine {
                    w: l.dense_weight(),
                    b: l.bias().clone(),
                },
                Stage::Nonlinear(nl) => Layer::Activation(nl.activation),
            })
            .collect();
        Ok(HamiltonianContext {
            layers,
            y: y.clone(),
            noise_precision,
            input_dim: net.input_dim(),
        })
    }

    pub fn noise_precision(&self) -> f64 {
        self.noise_precision
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// All layers of the noiseless forward map, `z₀` included.
    fn forward(&self, z0: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        out.push(z0.clone());
        for layer in &self.layers {
            let prev = out.last().unwrap();
            let next = match layer {
                Layer::Affine { w, b } => w * prev + b,
                Layer::Activation(a) => prev.map(|x| a.apply(x)),
            };
            out.push(next);
        }
        out
    }

    /// The noiseless network output `f(z₀)`.
    pub fn output(&self, z0: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(z0)?;
        Ok(self.forward(z0).pop().unwrap())
    }

    /// The input of the output stage, i.e. the signal being measured.
    pub fn signal(&self, z0: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(z0)?;
        let mut layers = self.forward(z0);
        layers.pop();
        Ok(layers.pop().unwrap())
    }

    fn check(&self, z0: &DVector<f64>) -> Result<()> {
        ensure_len("network input", self.input_dim, z0.len())?;
        ensure_finite(z0.as_slice(), "z0")
    }

    fn value_and_grad(&self, z0: &DVector<f64>) -> (f64, DVector<f64>) {
        let layers = self.forward(z0);
        let resid = layers.last().unwrap() - &self.y;
        let h = 0.5 * self.noise_precision * resid.norm_squared() + 0.5 * z0.norm_squared();
        let mut g = resid * self.noise_precision;
        for (layer, input) in self.layers.iter().zip(&layers).rev() {
            g = match layer {
                Layer::Affine { w, .. } => w.tr_mul(&g),
                Layer::Activation(a) => g.zip_map(input, |gi, x| gi * a.derivative(x)),
            };
        }
        (h, g + z0)
    }
}

pub fn hamiltonian(ctx: &HamiltonianContext, z0: &DVector<f64>) -> Result<f64> {
    ctx.check(z0)?;
    let resid = ctx.forward(z0).pop().unwrap() - &ctx.y;
    Ok(0.5 * ctx.noise_precision * resid.norm_squared() + 0.5 * z0.norm_squared())
}

/// Backpropagated `∇H(z₀)`; the ReLU contributes slope 0 at its kink.
pub fn grad_hamiltonian(ctx: &HamiltonianContext, z0: &DVector<f64>) -> Result<DVector<f64>> {
    ctx.check(z0)?;
    Ok(ctx.value_and_grad(z0).1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapOptions {
    pub steps: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Backtrack any step that increases `H`, making the loss trace
    /// nonincreasing.
    pub safeguard: bool,
    /// Standard deviation of the random initial point; 0 starts at the origin.
    pub init_std: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            steps: 500,
            step_size: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            safeguard: false,
            init_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub z0: DVector<f64>,
    /// `H` at the initial point followed by its value after every step.
    pub loss: Vec<f64>,
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() && loss <= DIVERGENCE_LOSS {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}

/// Minimizes `H` with Adam.
pub fn map_estimate(ctx: &HamiltonianContext, opts: &MapOptions, seed: u64) -> Result<MapResult> {
    if !(opts.step_size > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {}", opts.step_size)));
    }
    let mut rng = rng_for(seed, INIT_STREAM);
    let mut z = gaussian_vector(&mut rng, ctx.input_dim, 1.0) * opts.init_std;
    let (mut h, mut g) = ctx.value_and_grad(&z);
    check_loss(0, h)?;
    let mut loss = Vec::with_capacity(opts.steps + 1);
    loss.push(h);
    let mut m = DVector::zeros(z.len());
    let mut v = DVector::zeros(z.len());
    let (mut b1t, mut b2t) = (1.0, 1.0);

    for step in 1..=opts.steps {
        m = m * opts.beta1 + &g * (1.0 - opts.beta1);
        v = v * opts.beta2 + g.map(|x| x * x) * (1.0 - opts.beta2);
        b1t *= opts.beta1;
        b2t *= opts.beta2;
        let dir = m.zip_map(&v, |mi, vi| (mi / (1.0 - b1t)) / ((vi / (1.0 - b2t)).sqrt() + opts.epsilon));

        let mut scale = opts.step_size;
        let mut candidate = &z - &dir * scale;
        let (mut h_new, mut g_new) = ctx.value_and_grad(&candidate);
        if opts.safeguard {
            let mut tries = 0;
            while !(h_new <= h) && tries < 40 {
                scale *= 0.5;
                candidate = &z - &dir * scale;
                (h_new, g_new) = ctx.value_and_grad(&candidate);
                tries += 1;
            }
            if !(h_new <= h) {
                candidate = z.clone();
                (h_new, g_new) = (h, g.clone());
            }
        }
        check_loss(step, h_new)?;
        z = candidate;
        h = h_new;
        g = g_new;
        loss.push(h);
    }
    Ok(MapResult { z0: z, loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgldOptions {
    pub steps: usize,
    pub lambda: f64,
    pub burn_in: usize,
    /// Turning this off leaves plain gradient descent with step `lambda`.
    pub inject_noise: bool,
    pub init_std: f64,
    /// Keep every post-burn-in sample of `z₀`.
    pub keep_samples: bool,
}

impl Default for SgldOptions {
    fn default() -> Self {
        SgldOptions {
            steps: 10_000,
            lambda: 0.002,
            burn_in: 5000,
            inject_noise: true,
            init_std: 1.0,
            keep_samples: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgldResult {
    /// Post-burn-in average of `z₀`.
    pub mean_z0: DVector<f64>,
    /// Post-burn-in average of the measured signal.
    pub mean_signal: DVector<f64>,
    /// `H` at every iterate, the initial point included.
    pub loss: Vec<f64>,
    pub samples: Vec<DVector<f64>>,
    pub final_z0: DVector<f64>,
}

/// Langevin iterations `z ← z − λ∇H(z) + √(2λ) w`.
pub fn sgld_run(ctx: &HamiltonianContext, opts: &SgldOptions, seed: u64) -> Result<SgldResult> {
    if !(opts.lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", opts.lambda)));
    }
    if opts.burn_in >= opts.steps {
        return Err(Error::InvalidArgument(format!(
            "burn-in {} leaves no samples out of {} steps",
            opts.burn_in, opts.steps
        )));
    }
    let mut rng = rng_for(seed, INIT_STREAM);
    let mut z = gaussian_vector(&mut rng, ctx.input_dim, 1.0) * opts.init_std;
    let mut noise_rng = rng_for(seed, SGLD_STREAM);
    let noise_scale = (2.0 * opts.lambda).sqrt();

    let (h, mut g) = ctx.value_and_grad(&z);
    check_loss(0, h)?;
    let mut loss = Vec::with_capacity(opts.steps + 1);
    loss.push(h);
    let mut mean_z0 = DVector::zeros(z.len());
    let mut mean_signal: Option<DVector<f64>> = None;
    let mut samples = Vec::new();

    for step in 1..=opts.steps {
        z -= &g * opts.lambda;
        if opts.inject_noise {
            for zi in z.iter_mut() {
                let w: f64 = noise_rng.sample(StandardNormal);
                *zi += noise_scale * w;
            }
        }
        let (h, g_new) = ctx.value_and_grad(&z);
        check_loss(step, h)?;
        g = g_new;
        loss.push(h);
        if step > opts.burn_in {
            mean_z0 += &z;
            let s = ctx.signal(&z)?;
            match mean_signal.as_mut() {
                Some(acc) => *acc += s,
                None => mean_signal = Some(s),
            }
            if opts.keep_samples {
                samples.push(z.clone());
            }
        }
    }
    let n = (opts.steps - opts.burn_in) as f64;
    Ok(SgldResult {
        mean_z0: mean_z0 / n,
        mean_signal: mean_signal.unwrap() / n,
        loss,
        samples,
        final_z0: z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_synthetic_network, sample_trajectory, svd_decompose_stage, SyntheticConfig};
    use approx::assert_relative_eq;

    fn small_relu() -> (NetworkSpec, DVector<f64>) {
        let net = build_synthetic_network(&SyntheticConfig {
            dims: vec![4, 12, 16],
            n_meas: 10,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let y = sample_trajectory(&net, 9).observation().clone();
        (net, y)
    }

    #[test]
    fn zero_at_perfect_fit() {
        let (net, _) = small_relu();
        let z0 = DVector::zeros(4);
        let y = net.forward_deterministic(&z0).unwrap().pop().unwrap();
        let ctx = HamiltonianContext::new(&net, &y).unwrap();
        assert!(hamiltonian(&ctx, &z0).unwrap() < 1e-20);
    }

    #[test]
    fn matches_forward_map() {
        let (net, y) = small_relu();
        let ctx = HamiltonianContext::new(&net, &y).unwrap();
        let z0 = DVector::from_vec(vec![0.3, -1.0, 0.7, 0.1]);
        let out = net.forward_deterministic(&z0).unwrap().pop().unwrap();
        let expect = 0.5 * ctx.noise_precision() * (&y - out).norm_squared() + 0.5 * z0.norm_squared();
        assert_relative_eq!(hamiltonian(&ctx, &z0).unwrap(), expect, max_relative = 1e-12);
    }

    #[test]
    fn gradient_of_linear_model() {
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.1]);
        let b = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let stage = svd_decompose_stage(&w, &b, 4.0).unwrap();
        let net = NetworkSpec::new(vec![2, 3], vec![Stage::Linear(stage)]).unwrap();
        let y = DVector::from_vec(vec![1.0, 0.0, -1.0]);
        let ctx = HamiltonianContext::new(&net, &y).unwrap();
        let z = DVector::from_vec(vec![0.4, -0.6]);
        let expect = &z + w.transpose() * (&w * &z + &b - &y) * 4.0;
        assert!((grad_hamiltonian(&ctx, &z).unwrap() - expect).amax() < 1e-10);
    }

    #[test]
    fn noisy_hidden_stage_is_rejected() {
        let w = DMatrix::identity(2, 2);
        let s1 = svd_decompose_stage(&w, &DVector::zeros(2), 5.0).unwrap();
        let s2 = svd_decompose_stage(&w, &DVector::zeros(2), 5.0).unwrap();
        let net = NetworkSpec::new(vec![2, 2, 2], vec![Stage::Linear(s1), Stage::Linear(s2)]).unwrap();
        assert!(matches!(
            HamiltonianContext::new(&net, &DVector::zeros(2)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn zero_steps_returns_initializer() {
        let (net, y) = small_relu();
        let ctx = HamiltonianContext::new(&net, &y).unwrap();
        let r = map_estimate(&ctx, &MapOptions { steps: 0, ..Default::default() }, 5).unwrap();
        let mut rng = rng_for(5, INIT_STREAM);
        assert_eq!(r.z0, gaussian_vector(&mut rng, 4, 1.0));
        assert_eq!(r.loss.len(), 1);
    }

    #[test]
    fn safeguard_makes_loss_monotone() {
        let (net, y) = small_relu();
        let ctx = HamiltonianContext::new(&net, &y).unwrap();
        let opts = MapOptions {
            safeguard: true,
            step_size: 0.3,
            steps: 300,
            ..Default::default()
        };
        let r = map_estimate(&ctx, &opts, 1).unwrap();
        assert!(r.loss.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn noiseless_sgld_is_gradient_descent() {
        let (net, y) = small_relu();
        let ctx = HamiltonianContext::new(&net, &y).unwrap();
        let opts = SgldOptions {
            steps: 50,
            burn_in: 10,
            lambda: 1e-5,
            inject_noise: false,
            ..Default::default()
        };
        let r = sgld_run(&ctx, &opts, 2).unwrap();
        let mut rng = rng_for(2, INIT_STREAM);
        let mut z = gaussian_vector(&mut rng, 4, 1.0);
        for _ in 0..50 {
            z = &z - grad_hamiltonian(&ctx, &z).unwrap() * 1e-5;
        }
        assert_eq!(r.final_z0, z);
    }

    #[test]
    fn sgld_is_deterministic() {
        let (net, y) = small_relu();
        let ctx = HamiltonianContext::new(&net, &y).unwrap();
        let opts = SgldOptions {
            steps: 200,
            burn_in: 100,
            lambda: 1e-5,
            ..Default::default()
        };
        assert_eq!(sgld_run(&ctx, &opts, 4).unwrap(), sgld_run(&ctx, &opts, 4).unwrap());
    }

    #[test]
    fn burn_in_must_leave_samples() {
        let (net, y) = small_relu();
        let ctx = HamiltonianContext::new(&net, &y).unwrap();
        let opts = SgldOptions {
            steps: 10,
            burn_in: 10,
            ..Default::default()
        };
        assert!(sgld_run(&ctx, &opts, 0).is_err());
    }
}
