//! The ML-VAMP iteration: alternating forward and reverse sweeps over the
//! chain, each stage producing an estimate from its two incoming messages and
//! sending back the extrinsic part.
//!
//! Layer ℓ (0 ≤ ℓ < L) carries a forward message `(r⁺_ℓ, γ⁺_ℓ)` and a reverse
//! message `(r⁻_ℓ, γ⁻_ℓ)`. Precisions come from the average posterior
//! variance `v̄`: `η = 1/v̄`, `α = γ_opp·v̄`, `γ_new = η − γ_opp`.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::denoise::{
    denoise_input, denoise_linear, denoise_linear_observed, denoise_middle, denoise_output_nonlinear, ScalarChannel,
};
use crate::error::{ensure_len, Error, Result};
use crate::experiment::nmse_db;
use crate::network::{NetworkSpec, Stage, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClampLimits {
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub alpha_min: f64,
}

impl Default for ClampLimits {
    fn default() -> Self {
        ClampLimits {
            gamma_min: 1e-8,
            gamma_max: 1e11,
            alpha_min: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineOptions {
    pub max_iter: usize,
    pub clamp: ClampLimits,
    /// Weight of the new message in `(γ, r)` updates; 1 disables damping.
    pub damping: f64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            max_iter: 50,
            clamp: ClampLimits::default(),
            damping: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionUpdate {
    pub eta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub clamp_events: usize,
}

/// `η = γ_opp/α`, `γ_new = η − γ_opp`, with α and γ_new clamped. The
/// returned η is `γ_new + γ_opp` after clamping.
pub fn precision_update(alpha: f64, gamma_opposite: f64, clamp: &ClampLimits) -> Result<PrecisionUpdate> {
    if !alpha.is_finite() {
        return Err(Error::NonFinite("alpha"));
    }
    if !(gamma_opposite > 0.0 && gamma_opposite.is_finite()) {
        return Err(Error::InvalidArgument(format!("opposite precision must be positive, got {gamma_opposite}")));
    }
    let mut events = 0;
    let a = alpha.clamp(clamp.alpha_min, 1.0 - clamp.alpha_min);
    if a != alpha {
        events += 1;
    }
    let raw = gamma_opposite / a - gamma_opposite;
    let gamma = raw.clamp(clamp.gamma_min, clamp.gamma_max);
    if gamma != raw {
        events += 1;
    }
    Ok(PrecisionUpdate {
        eta: gamma + gamma_opposite,
        gamma,
        alpha: a,
        clamp_events: events,
    })
}

/// Precision update from an average posterior variance. With
/// `gamma_opposite = 0` the opposite message carries no information, α is 0
/// and the new precision is the posterior precision itself.
pub fn precision_from_variance(mean_var: f64, gamma_opposite: f64, clamp: &ClampLimits) -> Result<PrecisionUpdate> {
    if !(mean_var >= 0.0) || mean_var.is_infinite() {
        return Err(Error::NonFinite("posterior variance"));
    }
    if gamma_opposite > 0.0 {
        return precision_update(gamma_opposite * mean_var, gamma_opposite, clamp);
    }
    let raw = mean_var.recip();
    let gamma = raw.clamp(clamp.gamma_min, clamp.gamma_max);
    Ok(PrecisionUpdate {
        eta: gamma,
        gamma,
        alpha: 0.0,
        clamp_events: usize::from(gamma != raw),
    })
}

/// `r = (η ẑ − γ_opp r_opp)/γ_new`
pub fn extrinsic_mean(
    eta: f64,
    z_hat: &DVector<f64>,
    gamma_opposite: f64,
    r_opposite: &DVector<f64>,
    gamma_new: f64,
) -> DVector<f64> {
    (z_hat * eta - r_opposite * gamma_opposite) / gamma_new
}

#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub r_plus: Vec<DVector<f64>>,
    pub r_minus: Vec<DVector<f64>>,
    pub gamma_plus: Vec<f64>,
    pub gamma_minus: Vec<f64>,
    /// Completed iterations.
    pub k: usize,
}

impl MessageState {
    /// Zero means and zero precisions on every layer.
    pub fn initial(net: &NetworkSpec) -> Self {
        let layers = net.n_stages();
        let zeros: Vec<DVector<f64>> = (0..layers).map(|l| DVector::zeros(net.dims()[l])).collect();
        MessageState {
            r_plus: zeros.clone(),
            r_minus: zeros,
            gamma_plus: vec![0.0; layers],
            gamma_minus: vec![0.0; layers],
            k: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerUpdate {
    pub z_hat: DVector<f64>,
    pub eta: f64,
    pub alpha: f64,
    /// Precision of the message produced at this layer.
    pub gamma: f64,
    /// Precision of the incoming opposite message.
    pub gamma_opposite: f64,
    pub clamp_events: usize,
}

/// One forward or reverse sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfIteration {
    pub index: usize,
    pub direction: Direction,
    pub layers: Vec<LayerUpdate>,
    /// Message precisions after the sweep.
    pub gamma_plus: Vec<f64>,
    pub gamma_minus: Vec<f64>,
    /// NMSE of each layer's estimate against the truth, when supplied.
    pub nmse_db: Vec<f64>,
    pub runtime_ms: f64,
}

impl HalfIteration {
    pub fn clamp_events(&self) -> usize {
        self.layers.iter().map(|l| l.clamp_events).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub forward: HalfIteration,
    pub reverse: HalfIteration,
}

/// Single-owner ML-VAMP state for one observation.
pub struct MlVamp<'a> {
    net: &'a NetworkSpec,
    y: &'a DVector<f64>,
    opts: EngineOptions,
    state: MessageState,
    half_iter: usize,
}

fn componentwise<F>(a: &DVector<f64>, b: &DVector<f64>, mut f: F) -> Result<(DVector<f64>, f64)>
where
    F: FnMut(f64, f64) -> Result<(f64, f64)>,
{
    let mut out = DVector::zeros(a.len());
    let mut var = 0.0;
    for n in 0..a.len() {
        let (m, v) = f(a[n], b[n])?;
        out[n] = m;
        var += v;
    }
    Ok((out, var / a.len() as f64))
}

impl<'a> MlVamp<'a> {
    pub fn new(net: &'a NetworkSpec, y: &'a DVector<f64>, opts: EngineOptions) -> Result<Self> {
        ensure_len("observation", net.output_dim(), y.len())?;
        if !(opts.damping > 0.0 && opts.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("damping must lie in (0, 1], got {}", opts.damping)));
        }
        Ok(MlVamp {
            net,
            y,
            opts,
            state: MessageState::initial(net),
            half_iter: 0,
        })
    }

    pub fn state(&self) -> &MessageState {
        &self.state
    }

    fn layers(&self) -> usize {
        self.net.n_stages()
    }

    /// Estimate of layer ℓ from stage ℓ's output side and its average
    /// posterior variance.
    fn forward_estimate(&self, l: usize) -> Result<(DVector<f64>, f64)> {
        let st = &self.state;
        if l == 0 {
            let g = st.gamma_minus[0];
            return componentwise(&st.r_minus[0], &st.r_minus[0], |r, _| denoise_input(r, g));
        }
        let (gp, gm) = (st.gamma_plus[l - 1], st.gamma_minus[l]);
        match self.net.stage(l) {
            Stage::Linear(stage) => {
                let est = denoise_linear(stage, &st.r_plus[l - 1], &st.r_minus[l], gp, gm)?;
                Ok((est.z_hat_plus, est.mean_var_out))
            }
            Stage::Nonlinear(stage) => {
                let ch = ScalarChannel::from(*stage);
                componentwise(&st.r_plus[l - 1], &st.r_minus[l], |rp, rm| {
                    let r = denoise_middle(ch, rp, rm, gp, gm)?;
                    Ok((r.mean_out, r.var_out))
                })
            }
        }
    }

    /// Estimate of layer ℓ from stage ℓ+1's input side.
    fn reverse_estimate(&self, l: usize) -> Result<(DVector<f64>, f64)> {
        let st = &self.state;
        let gp = st.gamma_plus[l];
        if l + 1 == self.layers() {
            return match self.net.stage(l + 1) {
                Stage::Linear(stage) => {
                    let est = denoise_linear_observed(stage, self.y, &st.r_plus[l], gp)?;
                    Ok((est.z_hat_minus, est.mean_var_in))
                }
                Stage::Nonlinear(stage) => {
                    let ch = ScalarChannel::from(*stage);
                    componentwise(&st.r_plus[l], self.y, |rp, y| denoise_output_nonlinear(ch, y, rp, gp))
                }
            };
        }
        let gm = st.gamma_minus[l + 1];
        match self.net.stage(l + 1) {
            Stage::Linear(stage) => {
                let est = denoise_linear(stage, &st.r_plus[l], &st.r_minus[l + 1], gp, gm)?;
                Ok((est.z_hat_minus, est.mean_var_in))
            }
            Stage::Nonlinear(stage) => {
                let ch = ScalarChannel::from(*stage);
                componentwise(&st.r_plus[l], &st.r_minus[l + 1], |rp, rm| {
                    let r = denoise_middle(ch, rp, rm, gp, gm)?;
                    Ok((r.mean_in, r.var_in))
                })
            }
        }
    }

    fn dump_state(&self, l: usize, err: &Error) {
        log::error!(
            "ML-VAMP failed at layer {l}, half-iteration {}: {err}; gamma+ = {:?}, gamma- = {:?}",
            self.half_iter,
            self.state.gamma_plus,
            self.state.gamma_minus
        );
    }

    fn update_layer(&mut self, l: usize, direction: Direction) -> Result<LayerUpdate> {
        let estimate = match direction {
            Direction::Forward => self.forward_estimate(l),
            Direction::Reverse => self.reverse_estimate(l),
        };
        let (z_hat, mean_var) = estimate.map_err(|e| {
            self.dump_state(l, &e);
            e.at_layer(l, self.half_iter)
        })?;
        let st = &mut self.state;
        let (gamma_opp, r_opp, gamma_old, r_old) = match direction {
            Direction::Forward => (st.gamma_minus[l], &st.r_minus[l], st.gamma_plus[l], &st.r_plus[l]),
            Direction::Reverse => (st.gamma_plus[l], &st.r_plus[l], st.gamma_minus[l], &st.r_minus[l]),
        };
        let upd = precision_from_variance(mean_var, gamma_opp, &self.opts.clamp).map_err(|e| e.at_layer(l, self.half_iter))?;
        let mut r = extrinsic_mean(upd.eta, &z_hat, gamma_opp, r_opp, upd.gamma);
        let mut gamma = upd.gamma;
        let d = self.opts.damping;
        if d < 1.0 && gamma_old > 0.0 {
            r = r * d + r_old * (1.0 - d);
            gamma = d * gamma + (1.0 - d) * gamma_old;
        }
        match direction {
            Direction::Forward => {
                st.r_plus[l] = r;
                st.gamma_plus[l] = gamma;
            }
            Direction::Reverse => {
                st.r_minus[l] = r;
                st.gamma_minus[l] = gamma;
            }
        }
        Ok(LayerUpdate {
            z_hat,
            eta: upd.eta,
            alpha: upd.alpha,
            gamma: upd.gamma,
            gamma_opposite: gamma_opp,
            clamp_events: upd.clamp_events,
        })
    }

    fn sweep(&mut self, direction: Direction, truth: Option<&Trajectory>) -> Result<HalfIteration> {
        let start = Instant::now();
        let n = self.layers();
        let mut layers = Vec::with_capacity(n);
        match direction {
            Direction::Forward => {
                for l in 0..n {
                    layers.push(self.update_layer(l, direction)?);
                }
            }
            Direction::Reverse => {
                for l in (0..n).rev() {
                    layers.push(self.update_layer(l, direction)?);
                }
                layers.reverse();
            }
        }
        let nmse = truth
            .map(|t| layers.iter().enumerate().map(|(l, u)| nmse_db(&t.z[l], &u.z_hat).unwrap_or(f64::NAN)).collect())
            .unwrap_or_default();
        let rec = HalfIteration {
            index: self.half_iter,
            direction,
            layers,
            gamma_plus: self.state.gamma_plus.clone(),
            gamma_minus: self.state.gamma_minus.clone(),
            nmse_db: nmse,
            runtime_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.half_iter += 1;
        Ok(rec)
    }

    pub fn forward_pass(&mut self, truth: Option<&Trajectory>) -> Result<HalfIteration> {
        self.sweep(Direction::Forward, truth)
    }

    pub fn backward_pass(&mut self, truth: Option<&Trajectory>) -> Result<HalfIteration> {
        let rec = self.sweep(Direction::Reverse, truth)?;
        self.state.k += 1;
        Ok(rec)
    }
}

/// Runs `opts.max_iter` iterations (two half-iterations each).
pub fn run(
    net: &NetworkSpec,
    y: &DVector<f64>,
    opts: &EngineOptions,
    truth: Option<&Trajectory>,
) -> Result<Vec<IterationRecord>> {
    let mut engine = MlVamp::new(net, y, *opts)?;
    let mut records = Vec::with_capacity(opts.max_iter);
    for k in 0..opts.max_iter {
        let forward = engine.forward_pass(truth)?;
        let reverse = engine.backward_pass(truth)?;
        records.push(IterationRecord { k, forward, reverse });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn precision_update_formulas() {
        let c = ClampLimits::default();
        let u = precision_update(0.25, 0.5, &c).unwrap();
        assert_eq!((u.eta, u.gamma, u.clamp_events), (2.0, 1.5, 0));
        let u = precision_update(0.5, 1.0, &c).unwrap();
        assert_eq!((u.eta, u.gamma), (2.0, 1.0));
        let u = precision_update(1.0 - 1e-12, 1e-3, &c).unwrap();
        assert_eq!(u.gamma, c.gamma_min);
        assert_eq!(u.clamp_events, 2);
        assert!(precision_update(f64::NAN, 1.0, &c).is_err());
    }

    #[test]
    fn uninformative_opposite_message() {
        let c = ClampLimits::default();
        let u = precision_from_variance(0.25, 0.0, &c).unwrap();
        assert_eq!((u.eta, u.gamma, u.alpha, u.clamp_events), (4.0, 4.0, 0.0, 0));
        let z = DVector::from_vec(vec![0.3, -1.0]);
        let r = extrinsic_mean(u.eta, &z, 0.0, &DVector::zeros(2), u.gamma);
        assert_eq!(r, z);
    }

    #[test]
    fn extrinsic_mean_inverts() {
        let z = DVector::from_vec(vec![1.0]);
        let r = extrinsic_mean(2.0, &z, 0.5, &DVector::zeros(1), 1.5);
        assert_relative_eq!(r[0], 4.0 / 3.0, epsilon = 1e-15);
        let (eta, g_opp, g_new) = (3.7, 1.2, 2.5);
        let z = DVector::from_vec(vec![0.4, -2.0, 7.5]);
        let r_opp = DVector::from_vec(vec![1.0, 0.5, -3.0]);
        let r = extrinsic_mean(eta, &z, g_opp, &r_opp, g_new);
        let back = (r * g_new + &r_opp * g_opp) / eta;
        assert!((back - z).amax() < 1e-12);
    }
}
