//! Multi-layer stochastic generative networks.
//!
//! A network is a chain `z₀ → z₁ → … → z_L` of stages. Linear stages apply
//! `z_ℓ = W z_{ℓ-1} + b + ξ` with `ξ ~ N(0, ν⁻¹ I)` (ν = ∞ for a
//! deterministic stage); nonlinear stages apply a componentwise activation
//! with optional i.i.d. Gaussian noise. Weights are always held in factored
//! form `W = V_out · Σ · V_in` with square orthogonal factors, because the
//! estimators only ever need the rotated coordinates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::linalg::{self, rng_for};
use crate::special::{norm_cdf, norm_inv_cdf, norm_pdf};

const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    /// Placeholder for a probit output channel; not supported by the
    /// estimators.
    SigmoidProbit,
}

/// One linear piece `slope·x + intercept` of an activation on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub lo: f64,
    pub hi: f64,
    pub slope: f64,
    pub intercept: f64,
}

const RELU_PIECES: [Piece; 2] = [
    Piece {
        lo: f64::NEG_INFINITY,
        hi: 0.0,
        slope: 0.0,
        intercept: 0.0,
    },
    Piece {
        lo: 0.0,
        hi: f64::INFINITY,
        slope: 1.0,
        intercept: 0.0,
    },
];

const IDENTITY_PIECES: [Piece; 1] = [Piece {
    lo: f64::NEG_INFINITY,
    hi: f64::INFINITY,
    slope: 1.0,
    intercept: 0.0,
}];

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::SigmoidProbit => norm_cdf(x),
        }
    }

    /// Derivative, taking the value 0 at the ReLU kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::SigmoidProbit => norm_pdf(x),
        }
    }

    /// Piecewise-linear decomposition, split at every kink.
    pub fn pieces(self) -> Option<&'static [Piece]> {
        match self {
            Activation::Relu => Some(&RELU_PIECES),
            Activation::Identity => Some(&IDENTITY_PIECES),
            Activation::SigmoidProbit => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelNoise {
    None,
    Gaussian { variance: f64 },
}

impl ChannelNoise {
    pub fn variance(self) -> f64 {
        match self {
            ChannelNoise::None => 0.0,
            ChannelNoise::Gaussian { variance } => variance,
        }
    }
}

/// `z_ℓ = φ(z_{ℓ-1}) + ξ` componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearStage {
    pub activation: Activation,
    pub noise: ChannelNoise,
}

impl NonlinearStage {
    pub fn relu() -> Self {
        NonlinearStage {
            activation: Activation::Relu,
            noise: ChannelNoise::None,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.noise, ChannelNoise::None)
    }
}

/// How a stage's orthogonal factors were produced, so that large factors can
/// be regenerated from a seed instead of being stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FactorSource {
    Explicit,
    /// SVD of an i.i.d. Gaussian `n_out × n_in` weight matrix.
    GaussianSvd {
        seed: u64,
        stream: u64,
        weight_std: f64,
    },
    /// `V_out` then `V_in` drawn Haar from one stream; singular values are
    /// stored separately.
    Haar { seed: u64, stream: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearStage {
    v_out: DMatrix<f64>,
    v_in: DMatrix<f64>,
    s: Vec<f64>,
    b: DVector<f64>,
    b_bar: DVector<f64>,
    nu: f64,
    source: FactorSource,
}

impl LinearStage {
    /// Builds a stage from `W = v_out · diag(s) · v_in` (Σ zero-padded to
    /// `n_out × n_in`). `nu = f64::INFINITY` marks a noiseless stage.
    pub fn from_factors(
        v_out: DMatrix<f64>,
        s: Vec<f64>,
        v_in: DMatrix<f64>,
        b: DVector<f64>,
        nu: f64,
    ) -> Result<Self> {
        let n_out = v_out.nrows();
        let n_in = v_in.nrows();
        if !v_out.is_square() || !v_in.is_square() {
            return Err(Error::InvalidArgument("orthogonal factors must be square".into()));
        }
        if s.len() > n_in.min(n_out) {
            return Err(Error::InvalidArgument(format!(
                "{} singular values for a {n_out}x{n_in} stage",
                s.len()
            )));
        }
        ensure_len("bias", n_out, b.len())?;
        ensure_finite(v_out.as_slice(), "V_out")?;
        ensure_finite(v_in.as_slice(), "V_in")?;
        ensure_finite(&s, "singular values")?;
        ensure_finite(b.as_slice(), "bias")?;
        if s.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument("singular values must be nonnegative".into()));
        }
        if !(nu > 0.0) || nu.is_nan() {
            return Err(Error::InvalidArgument(format!("noise precision must be positive, got {nu}")));
        }
        for (name, q) in [("V_out", &v_out), ("V_in", &v_in)] {
            let defect = linalg::orthogonality_defect(q);
            if defect > ORTHO_TOL {
                return Err(Error::InvalidArgument(format!(
                    "{name} is not orthogonal (defect {defect:.2e})"
                )));
            }
        }
        let b_bar = v_out.tr_mul(&b);
        Ok(LinearStage {
            v_out,
            v_in,
            s,
            b,
            b_bar,
            nu,
            source: FactorSource::Explicit,
        })
    }

    pub fn with_source(mut self, source: FactorSource) -> Self {
        self.source = source;
        self
    }

    pub fn source(&self) -> FactorSource {
        self.source
    }

    pub fn n_in(&self) -> usize {
        self.v_in.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.v_out.nrows()
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.s
    }

    /// Singular values zero-padded to length `n`.
    pub fn padded_singular_values(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        out[..self.s.len().min(n)].copy_from_slice(&self.s[..self.s.len().min(n)]);
        out
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.b
    }

    /// `V_outᵀ b`
    pub fn bias_transformed(&self) -> &DVector<f64> {
        &self.b_bar
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn is_deterministic(&self) -> bool {
        self.nu.is_infinite()
    }

    pub fn v_out(&self) -> &DMatrix<f64> {
        &self.v_out
    }

    pub fn v_in(&self) -> &DMatrix<f64> {
        &self.v_in
    }

    /// `V_in · x`, the input side of the rotated coordinates.
    pub fn rotate_in(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.v_in * x
    }

    /// `V_outᵀ · x`, the output side of the rotated coordinates.
    pub fn rotate_out(&self, x: &DVector<f64>) -> DVector<f64> {
        self.v_out.tr_mul(x)
    }

    /// `W x` without bias or noise.
    pub fn weight_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let u = self.rotate_in(x);
        let mut t = DVector::zeros(self.n_out());
        for (i, si) in self.s.iter().enumerate() {
            t[i] = si * u[i];
        }
        &self.v_out * t
    }

    /// `Wᵀ x`
    pub fn weight_apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        let u = self.rotate_out(x);
        let mut t = DVector::zeros(self.n_in());
        for (i, si) in self.s.iter().enumerate() {
            t[i] = si * u[i];
        }
        self.v_in.tr_mul(&t)
    }

    pub fn dense_weight(&self) -> DMatrix<f64> {
        let mut sigma = DMatrix::zeros(self.n_out(), self.n_in());
        for (i, si) in self.s.iter().enumerate() {
            sigma[(i, i)] = *si;
        }
        &self.v_out * sigma * &self.v_in
    }
}

/// Factors a dense weight matrix into stage form and caches `b̄ = V_outᵀ b`.
pub fn svd_decompose_stage(w: &DMatrix<f64>, b: &DVector<f64>, nu: f64) -> Result<LinearStage> {
    ensure_finite(w.as_slice(), "weight matrix")?;
    ensure_len("bias", w.nrows(), b.len())?;
    let (u, s, vt) = linalg::full_svd(w);
    LinearStage::from_factors(u, s, vt, b.clone(), nu)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Linear(LinearStage),
    Nonlinear(NonlinearStage),
}

impl Stage {
    pub fn as_linear(&self) -> Option<&LinearStage> {
        match self {
            Stage::Linear(l) => Some(l),
            Stage::Nonlinear(_) => None,
        }
    }
}

/// Parameters of the synthetic random network used in the experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Input dimension followed by the hidden widths.
    pub dims: Vec<usize>,
    pub n_meas: usize,
    /// Fraction of hidden pre-activations that are positive.
    pub rho: f64,
    /// Condition number of the measurement matrix.
    pub kappa: f64,
    pub snr_db: f64,
    /// Standard deviation of the i.i.d. bias entries around their mean.
    pub bias_std: f64,
    /// Measure the last hidden pre-activation instead of its ReLU output.
    pub measure_pre_activation: bool,
    pub pilot_trajectories: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dims: vec![20, 100, 500, 784],
            n_meas: 300,
            rho: 0.4,
            kappa: 10.0,
            snr_db: 30.0,
            bias_std: 0.1,
            measure_pre_activation: false,
            pilot_trajectories: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub config: Option<SyntheticConfig>,
    /// The measurement asks for more rows than its input has components.
    pub rank_deficient_measurement: bool,
    /// Pilot estimate of ‖A z‖² used to set the measurement noise.
    pub pilot_signal_energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    dims: Vec<usize>,
    stages: Vec<Stage>,
    pub meta: NetworkMeta,
}

impl NetworkSpec {
    pub fn new(dims: Vec<usize>, stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one stage".into()));
        }
        ensure_len("network dims", stages.len() + 1, dims.len())?;
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("layer dimensions must be positive".into()));
        }
        for (i, stage) in stages.iter().enumerate() {
            match stage {
                Stage::Linear(l) => {
                    ensure_len("linear stage input", dims[i], l.n_in())?;
                    ensure_len("linear stage output", dims[i + 1], l.n_out())?;
                }
                Stage::Nonlinear(nl) => {
                    ensure_len("nonlinear stage", dims[i], dims[i + 1])?;
                    if let ChannelNoise::Gaussian { variance } = nl.noise {
                        if !(variance > 0.0 && variance.is_finite()) {
                            return Err(Error::InvalidArgument(format!(
                                "channel noise variance must be positive, got {variance}"
                            )));
                        }
                    }
                }
            }
        }
        if let Some(Stage::Linear(l)) = stages.last() {
            if l.is_deterministic() {
                return Err(Error::InvalidArgument(
                    "the observed linear stage needs finite noise precision".into(),
                ));
            }
        }
        Ok(NetworkSpec {
            dims,
            stages,
            meta: NetworkMeta::default(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Number of stages L; the observed output is `z_L`.
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Stage ℓ maps layer ℓ-1 to layer ℓ (1-based, matching the layer index).
    pub fn stage(&self, l: usize) -> &Stage {
        &self.stages[l - 1]
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// The orthogonal matrix `V_ℓ` with `p⁰_ℓ = V_ℓ q⁰_ℓ`, and whether layer ℓ
    /// is the output of a linear stage (so that `q = V_ℓᵀ z`). `None` means
    /// the layer touches no linear stage and `p = q = z`.
    pub fn layer_transform(&self, l: usize) -> Option<(&DMatrix<f64>, bool)> {
        if l >= 1 {
            if let Stage::Linear(stage) = self.stage(l) {
                return Some((stage.v_out(), true));
            }
        }
        if l < self.n_stages() {
            if let Stage::Linear(stage) = self.stage(l + 1) {
                return Some((stage.v_in(), false));
            }
        }
        None
    }

    /// Whether every hidden stage is noiseless, so the output mean is a
    /// deterministic function of `z₀`.
    pub fn hidden_is_deterministic(&self) -> bool {
        self.stages[..self.n_stages() - 1].iter().all(|s| match s {
            Stage::Linear(l) => l.is_deterministic(),
            Stage::Nonlinear(nl) => nl.is_deterministic(),
        })
    }

    /// Noiseless forward map; returns all layers `z₀ … z_L` (the last one
    /// without measurement noise).
    pub fn forward_deterministic(&self, z0: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        ensure_len("network input", self.input_dim(), z0.len())?;
        let mut layers = Vec::with_capacity(self.n_stages() + 1);
        layers.push(z0.clone());
        for stage in &self.stages {
            let prev = layers.last().unwrap();
            let next = match stage {
                Stage::Linear(l) => l.weight_apply(prev) + l.bias(),
                Stage::Nonlinear(nl) => prev.map(|x| nl.activation.apply(x)),
            };
            layers.push(next);
        }
        Ok(layers)
    }
}

fn propagate(stages: &[Stage], z0: DVector<f64>, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let mut layers = Vec::with_capacity(stages.len() + 1);
    layers.push(z0);
    for stage in stages {
        let prev = layers.last().unwrap();
        let next = match stage {
            Stage::Linear(l) => {
                let mut z = l.weight_apply(prev) + l.bias();
                if !l.is_deterministic() {
                    z += linalg::gaussian_vector(rng, z.len(), l.nu().recip().sqrt());
                }
                z
            }
            Stage::Nonlinear(nl) => {
                let mut z = prev.map(|x| nl.activation.apply(x));
                if let ChannelNoise::Gaussian { variance } = nl.noise {
                    z += linalg::gaussian_vector(rng, z.len(), variance.sqrt());
                }
                z
            }
        };
        layers.push(next);
    }
    layers
}

/// E[max(0, H)²] for H ~ N(mean, var).
fn relu_second_moment(mean: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let t = mean / sd;
    (mean * mean + var) * norm_cdf(t) + mean * sd * norm_pdf(t)
}

/// Builds the synthetic network: Gaussian hidden layers with ReLUs whose bias
/// mean makes a fraction `rho` of pre-activations positive, followed by a
/// Haar-rotated measurement with log-spaced singular values of condition
/// number `kappa` and noise set to the requested SNR.
pub fn build_synthetic_network(cfg: &SyntheticConfig) -> Result<NetworkSpec> {
    if cfg.dims.is_empty() || cfg.dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument("dims must be nonempty and positive".into()));
    }
    if !(cfg.kappa >= 1.0) {
        return Err(Error::InvalidArgument(format!("kappa must be >= 1, got {}", cfg.kappa)));
    }
    if !(cfg.rho > 0.0 && cfg.rho < 1.0) {
        return Err(Error::InvalidArgument(format!("rho must lie in (0,1), got {}", cfg.rho)));
    }
    if cfg.n_meas == 0 {
        return Err(Error::InvalidArgument("n_meas must be positive".into()));
    }
    if !cfg.snr_db.is_finite() || !(cfg.bias_std >= 0.0) {
        return Err(Error::InvalidArgument("snr_db and bias_std must be finite".into()));
    }

    let mut stages = Vec::new();
    let mut dims = vec![cfg.dims[0]];
    // second moment of the current layer, propagated analytically
    let mut tau = 1.0;
    let n_hidden = cfg.dims.len() - 1;
    for i in 1..cfg.dims.len() {
        let (n_in, n_out) = (cfg.dims[i - 1], cfg.dims[i]);
        let weight_std = (n_in as f64).recip().sqrt();
        let stream = 100 + i as u64;
        let w = linalg::gaussian_matrix(&mut rng_for(cfg.seed, stream), n_out, n_in, weight_std);
        let pre_var = tau + cfg.bias_std * cfg.bias_std;
        let bias_mean = pre_var.sqrt() * norm_inv_cdf(cfg.rho);
        let mut bias_rng = rng_for(cfg.seed, 200 + i as u64);
        let b = linalg::gaussian_vector(&mut bias_rng, n_out, cfg.bias_std).add_scalar(bias_mean);
        let stage = svd_decompose_stage(&w, &b, f64::INFINITY)?.with_source(FactorSource::GaussianSvd {
            seed: cfg.seed,
            stream,
            weight_std,
        });
        stages.push(Stage::Linear(stage));
        dims.push(n_out);
        if i < n_hidden || !cfg.measure_pre_activation {
            stages.push(Stage::Nonlinear(NonlinearStage::relu()));
            dims.push(n_out);
            tau = relu_second_moment(bias_mean, pre_var);
        } else {
            tau = pre_var + bias_mean * bias_mean;
        }
    }

    let n_in = *dims.last().unwrap();
    let m = cfg.n_meas;
    let rank = m.min(n_in);
    let s: Vec<f64> = if rank == 1 {
        vec![1.0]
    } else {
        (0..rank)
            .map(|i| cfg.kappa.powf(-(i as f64) / (rank - 1) as f64))
            .collect()
    };
    let stream = 300;
    let mut rng = rng_for(cfg.seed, stream);
    let u = linalg::haar_orthogonal(&mut rng, m);
    let v = linalg::haar_orthogonal(&mut rng, n_in);

    // Pilot estimate of the measured signal energy ‖A z‖² = ‖Σ V_in z‖².
    let mut energy = 0.0;
    let pilots = cfg.pilot_trajectories.max(1);
    let v_in = v.transpose();
    for t in 0..pilots {
        let mut rng = rng_for(cfg.seed, 400 + t as u64);
        let z0 = linalg::gaussian_vector(&mut rng, cfg.dims[0], 1.0);
        let layers = propagate(&stages, z0, &mut rng);
        let rotated = &v_in * layers.last().unwrap();
        energy += s.iter().zip(rotated.iter()).map(|(si, x)| (si * x).powi(2)).sum::<f64>();
    }
    energy /= pilots as f64;
    let noise_var = energy * 10f64.powf(-cfg.snr_db / 10.0) / m as f64;
    let measurement = LinearStage::from_factors(u, s, v_in, DVector::zeros(m), noise_var.recip())?
        .with_source(FactorSource::Haar { seed: cfg.seed, stream });
    stages.push(Stage::Linear(measurement));
    dims.push(m);

    let mut net = NetworkSpec::new(dims, stages)?;
    net.meta = NetworkMeta {
        config: Some(cfg.clone()),
        rank_deficient_measurement: m > n_in,
        pilot_signal_energy: Some(energy),
    };
    Ok(net)
}

/// One realization of the network with its rotated truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `z⁰_ℓ` for ℓ = 0..L; the last entry is the observation `y`.
    pub z: Vec<DVector<f64>>,
    pub p0: Vec<DVector<f64>>,
    pub q0: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn observation(&self) -> &DVector<f64> {
        self.z.last().unwrap()
    }
}

pub fn sample_trajectory(net: &NetworkSpec, seed: u64) -> Trajectory {
    let mut rng = rng_for(seed, 0);
    let z0 = linalg::gaussian_vector(&mut rng, net.input_dim(), 1.0);
    let z = propagate(net.stages(), z0, &mut rng);
    rotate_layers(net, z)
}

/// Rebuilds a trajectory from stored layers `z₀ … z_L`.
pub fn trajectory_from_layers(net: &NetworkSpec, z: Vec<DVector<f64>>) -> Result<Trajectory> {
    if z.len() != net.dims().len() {
        return Err(Error::DimensionMismatch {
            context: "trajectory layers",
            expected: net.dims().len(),
            actual: z.len(),
        });
    }
    for (zl, &d) in z.iter().zip(net.dims()) {
        ensure_len("trajectory layer", d, zl.len())?;
        ensure_finite(zl.as_slice(), "trajectory")?;
    }
    Ok(rotate_layers(net, z))
}

fn rotate_layers(net: &NetworkSpec, z: Vec<DVector<f64>>) -> Trajectory {
    let (p0, q0) = z
        .iter()
        .enumerate()
        .map(|(l, zl)| match net.layer_transform(l) {
            Some((v, true)) => (zl.clone(), v.tr_mul(zl)),
            Some((v, false)) => (v * zl, zl.clone()),
            None => (zl.clone(), zl.clone()),
        })
        .unzip();
    Trajectory { z, p0, q0 }
}

/// `(1/N_ℓ)‖q⁰_ℓ‖²` for every layer ℓ = 0..L.
pub fn empirical_layer_moments(traj: &Trajectory) -> Vec<f64> {
    traj.q0
        .iter()
        .map(|q| q.norm_squared() / q.len() as f64)
        .collect()
}

// ---------------------------------------------------------------------------
// JSON document

const FORMAT: &str = "mlvamp-network/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
enum FactorsDoc {
    Explicit {
        v_out: Vec<Vec<f64>>,
        v_in: Vec<Vec<f64>>,
    },
    GaussianSvd {
        seed: u64,
        stream: u64,
        weight_std: f64,
    },
    Haar {
        seed: u64,
        stream: u64,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum StageDoc {
    Linear {
        n_in: usize,
        n_out: usize,
        s: Vec<f64>,
        b_bar: Vec<f64>,
        /// `null` encodes a noiseless stage (ν = ∞).
        nu: Option<f64>,
        factors: FactorsDoc,
    },
    Nonlinear {
        activation: Activation,
        noise: ChannelNoise,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkDoc {
    format: String,
    dims: Vec<usize>,
    stages: Vec<StageDoc>,
    #[serde(default)]
    meta: NetworkMeta,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], n: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument(format!("{what} must be {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl NetworkSpec {
    /// Serializes to the JSON document. With `explicit` set, orthogonal
    /// factors are written out in full; otherwise seeded factors are stored
    /// as their generation recipe.
    pub fn to_json(&self, explicit: bool) -> Result<String> {
        let stages = self
            .stages
            .iter()
            .map(|stage| match stage {
                Stage::Nonlinear(nl) => StageDoc::Nonlinear {
                    activation: nl.activation,
                    noise: nl.noise,
                },
                Stage::Linear(l) => {
                    let factors = match (explicit, l.source()) {
                        (false, FactorSource::GaussianSvd { seed, stream, weight_std }) => {
                            FactorsDoc::GaussianSvd { seed, stream, weight_std }
                        }
                        (false, FactorSource::Haar { seed, stream }) => FactorsDoc::Haar { seed, stream },
                        _ => FactorsDoc::Explicit {
                            v_out: rows(l.v_out()),
                            v_in: rows(l.v_in()),
                        },
                    };
                    StageDoc::Linear {
                        n_in: l.n_in(),
                        n_out: l.n_out(),
                        s: l.singular_values().to_vec(),
                        b_bar: l.bias_transformed().iter().cloned().collect(),
                        nu: l.nu().is_finite().then_some(l.nu()),
                        factors,
                    }
                }
            })
            .collect();
        let doc = NetworkDoc {
            format: FORMAT.to_string(),
            dims: self.dims.clone(),
            stages,
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDoc = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(Error::InvalidArgument(format!("unknown network format {:?}", doc.format)));
        }
        let mut stages = Vec::with_capacity(doc.stages.len());
        for stage in doc.stages {
            stages.push(match stage {
                StageDoc::Nonlinear { activation, noise } => Stage::Nonlinear(NonlinearStage { activation, noise }),
                StageDoc::Linear {
                    n_in,
                    n_out,
                    s,
                    b_bar,
                    nu,
                    factors,
                } => {
                    ensure_len("b_bar", n_out, b_bar.len())?;
                    let (v_out, v_in, source) = match factors {
                        FactorsDoc::Explicit { v_out, v_in } => (
                            from_rows(&v_out, n_out, "v_out")?,
                            from_rows(&v_in, n_in, "v_in")?,
                            FactorSource::Explicit,
                        ),
                        FactorsDoc::Haar { seed, stream } => {
                            let mut rng = rng_for(seed, stream);
                            let u = linalg::haar_orthogonal(&mut rng, n_out);
                            let v = linalg::haar_orthogonal(&mut rng, n_in);
                            (u, v.transpose(), FactorSource::Haar { seed, stream })
                        }
                        FactorsDoc::GaussianSvd { seed, stream, weight_std } => {
                            let w = linalg::gaussian_matrix(&mut rng_for(seed, stream), n_out, n_in, weight_std);
                            let (u, s_regen, vt) = linalg::full_svd(&w);
                            let matches = s_regen.len() == s.len()
                                && s_regen
                                    .iter()
                                    .zip(&s)
                                    .all(|(a, b)| (a - b).abs() <= 1e-9 * b.abs().max(1.0));
                            if !matches {
                                return Err(Error::InvalidArgument(
                                    "regenerated singular values disagree with the stored ones".into(),
                                ));
                            }
                            (u, vt, FactorSource::GaussianSvd { seed, stream, weight_std })
                        }
                    };
                    let b_bar = DVector::from_vec(b_bar);
                    let b = &v_out * &b_bar;
                    let mut stage = LinearStage::from_factors(v_out, s, v_in, b, nu.unwrap_or(f64::INFINITY))?
                        .with_source(source);
                    // keep the stored transformed bias bit-exact
                    stage.b_bar = b_bar;
                    Stage::Linear(stage)
                }
            });
        }
        let mut net = NetworkSpec::new(doc.dims, stages)?;
        net.meta = doc.meta;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            dims: vec![6, 10, 12],
            n_meas: 8,
            seed,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn identity_weight_decomposes_exactly() {
        let n = 5;
        let stage = svd_decompose_stage(&DMatrix::identity(n, n), &DVector::zeros(n), 2.0).unwrap();
        assert_eq!(stage.rank(), n);
        assert!(stage.singular_values().iter().all(|s| (s - 1.0).abs() < 1e-14));
        assert!((stage.v_out() * stage.v_in() - DMatrix::<f64>::identity(n, n)).amax() < 1e-14);
        assert!((stage.dense_weight() - DMatrix::<f64>::identity(n, n)).amax() < 1e-14);
    }

    #[test]
    fn zero_weight_has_empty_spectrum() {
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let stage = svd_decompose_stage(&DMatrix::zeros(3, 4), &b, 1.0).unwrap();
        assert_eq!(stage.rank(), 0);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(stage.weight_apply(&x), DVector::zeros(3));
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 1)] = f64::NAN;
        assert!(matches!(
            svd_decompose_stage(&w, &DVector::zeros(2), 1.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn transposed_apply_matches_dense() {
        let w = linalg::gaussian_matrix(&mut rng_for(5, 0), 7, 4, 1.0);
        let stage = svd_decompose_stage(&w, &DVector::zeros(7), 1.0).unwrap();
        let x = linalg::gaussian_vector(&mut rng_for(5, 1), 7, 1.0);
        assert!((stage.weight_apply_transpose(&x) - w.transpose() * &x).amax() < 1e-12);
    }

    #[test]
    fn kappa_below_one_is_rejected() {
        let cfg = SyntheticConfig {
            kappa: 0.5,
            ..small_config(1)
        };
        assert!(matches!(build_synthetic_network(&cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn chain_layout_follows_alternation() {
        let net = build_synthetic_network(&small_config(3)).unwrap();
        assert_eq!(net.dims(), &[6, 10, 10, 12, 12, 8]);
        assert!(matches!(net.stage(1), Stage::Linear(_)));
        assert!(matches!(net.stage(2), Stage::Nonlinear(_)));
        assert!(matches!(net.stage(5), Stage::Linear(_)));
        let pre = build_synthetic_network(&SyntheticConfig {
            measure_pre_activation: true,
            ..small_config(3)
        })
        .unwrap();
        assert_eq!(pre.dims(), &[6, 10, 10, 12, 8]);
    }

    #[test]
    fn oversized_measurement_is_flagged() {
        let net = build_synthetic_network(&SyntheticConfig {
            n_meas: 20,
            ..small_config(2)
        })
        .unwrap();
        assert!(net.meta.rank_deficient_measurement);
        let meas = net.stage(net.n_stages()).as_linear().unwrap();
        assert_eq!(meas.rank(), 12);
    }

    #[test]
    fn json_round_trip_in_both_modes() {
        let net = build_synthetic_network(&small_config(11)).unwrap();
        for explicit in [false, true] {
            let text = net.to_json(explicit).unwrap();
            let back = NetworkSpec::from_json(&text).unwrap();
            assert_eq!(back.dims(), net.dims());
            assert_eq!(back.to_json(explicit).unwrap(), text);
            for (a, b) in back.stages().iter().zip(net.stages()) {
                if let (Stage::Linear(a), Stage::Linear(b)) = (a, b) {
                    assert!((a.dense_weight() - b.dense_weight()).amax() < 1e-12);
                    assert!((a.bias() - b.bias()).amax() < 1e-12);
                    assert_eq!(a.nu(), b.nu());
                }
            }
        }
    }

    #[test]
    fn layer_transforms_match_definitions() {
        let net = build_synthetic_network(&small_config(4)).unwrap();
        let traj = sample_trajectory(&net, 9);
        for l in 0..=net.n_stages() {
            let (p, q) = (&traj.p0[l], &traj.q0[l]);
            match net.layer_transform(l) {
                Some((v, _)) => assert!((v * q - p).amax() < 1e-12),
                None => assert_eq!(p, q),
            }
            if l % 2 == 1 {
                assert_eq!(p, &traj.z[l]);
            } else {
                assert_eq!(q, &traj.z[l]);
            }
        }
    }
}
