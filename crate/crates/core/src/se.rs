//! State evolution: the scalar recursion that predicts the per-layer mean
//! squared error of ML-VAMP in the large-system limit.
//!
//! The recursion mirrors [`crate::engine`] sweep for sweep, with the average
//! posterior variance of each stage replaced by its expectation under a
//! scalar model. On the input side of a nonlinear stage that model is
//! `R⁺ ~ N(μ, τ − μ² − 1/γ⁺)`, `Z_in | R⁺ ~ N(R⁺, 1/γ⁺)`; on the output side
//! `R⁻ = Z_out + N(0, 1/γ⁻)`. The mean μ of the layer is carried along so that
//! biased layers are handled; with μ = 0 this is the usual zero-mean model.

use serde::{Deserialize, Serialize};

use crate::denoise::linear::component_variances;
use crate::denoise::scalar::{denoise_middle, denoise_middle_with_evidence, ScalarChannel};
use crate::engine::{precision_from_variance, ClampLimits, Direction};
use crate::error::{Error, Result};
use crate::network::{ChannelNoise, NetworkSpec, Piece, Stage};
use crate::quadrature::{feature_breaks, integrate_panels, integrate_recursive};
use crate::special::{lower_truncated_std_moments, norm_cdf, norm_pdf, upper_truncated_std_moments};

const WINDOW: f64 = 12.0;

/// What state evolution needs to know about a linear stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStatistics {
    pub n_in: usize,
    pub n_out: usize,
    pub s: Vec<f64>,
    /// `(1/N_out) ‖b̄‖²`
    pub b_bar_second_moment: f64,
    /// Average bias entry, the mean of the layer this stage produces.
    pub bias_mean: f64,
    /// `None` for a noiseless stage.
    pub nu: Option<f64>,
}

impl LinearStatistics {
    fn nu(&self) -> f64 {
        self.nu.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerStatistics {
    Linear(LinearStatistics),
    Nonlinear(ScalarChannel),
}

pub fn statistics_from_network(net: &NetworkSpec) -> Vec<LayerStatistics> {
    net.stages()
        .iter()
        .map(|stage| match stage {
            Stage::Linear(l) => LayerStatistics::Linear(LinearStatistics {
                n_in: l.n_in(),
                n_out: l.n_out(),
                s: l.singular_values().to_vec(),
                b_bar_second_moment: l.bias_transformed().norm_squared() / l.n_out() as f64,
                bias_mean: l.bias().mean(),
                nu: l.nu().is_finite().then_some(l.nu()),
            }),
            Stage::Nonlinear(nl) => LayerStatistics::Nonlinear(ScalarChannel::from(*nl)),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeOptions {
    pub clamp: ClampLimits,
    /// Track the mean of biased layers; off reproduces the zero-mean model.
    pub mean_aware: bool,
    /// Gauss–Legendre panels per bracketing interval.
    pub panel_subdivisions: usize,
    /// Use recursive bisection to `adaptive_tol` instead of fixed panels.
    pub adaptive: bool,
    pub adaptive_tol: f64,
}

impl Default for SeOptions {
    fn default() -> Self {
        SeOptions {
            clamp: ClampLimits::default(),
            mean_aware: true,
            panel_subdivisions: 1,
            adaptive: false,
            adaptive_tol: 1e-8,
        }
    }
}

impl SeOptions {
    fn integrate<const K: usize>(&self, f: impl FnMut(f64) -> [f64; K], breaks: &[f64]) -> Result<[f64; K]> {
        if self.adaptive {
            integrate_recursive(f, breaks, self.adaptive_tol)
        } else {
            Ok(integrate_panels(f, breaks, self.panel_subdivisions))
        }
    }
}

/// `(E φ(P), E φ(P)²)` for `P ~ N(mean, var)` and a piecewise-linear `φ`.
fn piecewise_moments(pieces: &[Piece], mean: f64, var: f64) -> (f64, f64) {
    if var <= 0.0 {
        let x = pieces
            .iter()
            .find(|p| mean >= p.lo && mean <= p.hi)
            .map(|p| p.slope * mean + p.intercept)
            .unwrap_or(0.0);
        return (x, x * x);
    }
    let sd = var.sqrt();
    let (mut m1, mut m2) = (0.0, 0.0);
    for p in pieces {
        let (a, b) = ((p.lo - mean) / sd, (p.hi - mean) / sd);
        let mass = (norm_cdf(b) - norm_cdf(a)).max(0.0);
        if mass == 0.0 {
            continue;
        }
        let (tm, tv) = match (a == f64::NEG_INFINITY, b == f64::INFINITY) {
            (true, true) => (0.0, 1.0),
            (true, false) => lower_truncated_std_moments(b),
            (false, true) => upper_truncated_std_moments(a),
            (false, false) => {
                let (pa, pb) = (norm_pdf(a), norm_pdf(b));
                let m = (pa - pb) / mass;
                (m, 1.0 + (a * pa - b * pb) / mass - m * m)
            }
        };
        let (pm, pv) = (mean + sd * tm, tv * var);
        let om = p.slope * pm + p.intercept;
        m1 += mass * om;
        m2 += mass * (om * om + p.slope * p.slope * pv);
    }
    (m1, m2)
}

fn channel_pieces(ch: ScalarChannel) -> Result<&'static [Piece]> {
    ch.activation
        .pieces()
        .ok_or_else(|| Error::Unsupported(format!("state evolution for {:?}", ch.activation)))
}

/// Second moments `τ⁰_ℓ` and means `μ_ℓ` of every layer ℓ = 0..L.
pub fn compute_tau0(stats: &[LayerStatistics], mean_aware: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tau = vec![1.0];
    let mut mean = vec![0.0];
    for st in stats {
        let (t_prev, m_prev) = (*tau.last().unwrap(), *mean.last().unwrap());
        let (t, m) = match st {
            LayerStatistics::Linear(l) => {
                if l.s.iter().any(|s| !s.is_finite()) {
                    return Err(Error::NonFinite("singular values"));
                }
                let gain: f64 = l.s.iter().map(|s| s * s).sum::<f64>() / l.n_out as f64;
                let noise = l.nu.map_or(0.0, |nu| nu.recip());
                let m = if mean_aware { l.bias_mean } else { 0.0 };
                (gain * t_prev + l.b_bar_second_moment + noise, m)
            }
            LayerStatistics::Nonlinear(ch) => {
                let (m1, m2) = piecewise_moments(channel_pieces(*ch)?, m_prev, (t_prev - m_prev * m_prev).max(0.0));
                (m2 + ch.noise.variance(), if mean_aware { m1 } else { 0.0 })
            }
        };
        tau.push(t);
        mean.push(m);
    }
    Ok((tau, mean))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorPair {
    /// Expected posterior variance on the output side.
    pub e_plus: f64,
    /// Expected posterior variance on the input side.
    pub e_minus: f64,
    /// The variance of `R⁺` came out negative and was set to zero.
    pub variance_clamped: bool,
}

/// `E[var(R⁺, R⁻)]` over `R⁻` for fixed `R⁺ = r_plus`, integrating against
/// the exact density `p(r⁻ | r⁺)` of the channel.
fn inner_error(
    ch: ScalarChannel,
    pieces: &[Piece],
    r_plus: f64,
    gp: f64,
    gm: f64,
    opts: &SeOptions,
) -> Result<[f64; 2]> {
    if gm == 0.0 {
        let r = denoise_middle(ch, r_plus, 0.0, gp, 0.0)?;
        return Ok([r.var_in, r.var_out]);
    }
    let v = ch.noise.variance() + gm.recip();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut features = Vec::new();
    for p in pieces {
        let center = p.slope * r_plus + p.intercept;
        let width = (v + p.slope * p.slope / gp).sqrt();
        lo = lo.min(center - WINDOW * width);
        hi = hi.max(center + WINDOW * width);
        features.push((center, width));
        if p.slope != 0.0 {
            let prec = gp + p.slope * p.slope / v;
            for e in [p.lo, p.hi] {
                if e.is_finite() {
                    let cross = p.intercept + v * (e * prec - gp * r_plus) / p.slope;
                    features.push((cross, v.sqrt() / p.slope.abs()));
                }
            }
        }
    }
    let breaks = feature_breaks(lo, hi, &features);
    let mut failure = None;
    let m = opts.integrate(
        |r_minus| match denoise_middle_with_evidence(ch, r_plus, r_minus, gp, gm) {
            Ok((r, log_ev)) => {
                let w = log_ev.exp();
                [w, w * r.var_in, w * r.var_out]
            }
            Err(e) => {
                failure.get_or_insert(e);
                [0.0; 3]
            }
        },
        &breaks,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    if !(m[0] > 0.0) {
        return Err(Error::Quadrature {
            what: "downstream message density integrates to zero".into(),
            estimate: f64::INFINITY,
            tolerance: opts.adaptive_tol,
        });
    }
    Ok([m[1] / m[0], m[2] / m[0]])
}

/// Expected posterior variances of a nonlinear stage.
pub fn error_nonlinear(
    ch: ScalarChannel,
    gamma_plus: f64,
    gamma_minus: f64,
    tau0_prev: f64,
    mean_prev: f64,
    opts: &SeOptions,
) -> Result<ErrorPair> {
    let pieces = channel_pieces(ch)?;
    let raw = tau0_prev - mean_prev * mean_prev - gamma_plus.recip();
    let var_r = raw.max(0.0);
    let variance_clamped = raw < 0.0;
    let [e_minus, e_plus] = if var_r == 0.0 {
        inner_error(ch, pieces, mean_prev, gamma_plus, gamma_minus, opts)?
    } else {
        let sd = var_r.sqrt();
        let v = ch.noise.variance() + if gamma_minus > 0.0 { gamma_minus.recip() } else { 0.0 };
        let kink_width = gamma_plus.recip().sqrt().max(v.sqrt()).min(sd);
        let mut features = vec![(mean_prev, sd)];
        for p in pieces {
            for e in [p.lo, p.hi] {
                if e.is_finite() {
                    features.push((e, kink_width));
                }
            }
        }
        let breaks = feature_breaks(mean_prev - WINDOW * sd, mean_prev + WINDOW * sd, &features);
        let mut failure = None;
        let m = opts.integrate(
            |r| {
                let w = norm_pdf((r - mean_prev) / sd);
                match inner_error(ch, pieces, r, gamma_plus, gamma_minus, opts) {
                    Ok(e) => [w, w * e[0], w * e[1]],
                    Err(e) => {
                        failure.get_or_insert(e);
                        [0.0; 3]
                    }
                }
            },
            &breaks,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        [m[1] / m[0], m[2] / m[0]]
    };
    Ok(ErrorPair {
        e_plus,
        e_minus,
        variance_clamped,
    })
}

/// Expected posterior variances of a hidden linear stage, averaged over its
/// zero-padded singular values.
pub fn error_linear(stats: &LinearStatistics, gamma_plus: f64, gamma_minus: f64) -> Result<ErrorPair> {
    let nu = stats.nu();
    let rank = stats.s.len();
    let (mut sum_in, mut sum_out) = (0.0, 0.0);
    for &s in &stats.s {
        let (vi, vo) = component_variances(s, gamma_plus, gamma_minus, nu)?;
        sum_in += vi;
        sum_out += vo;
    }
    if stats.n_in > rank {
        sum_in += (stats.n_in - rank) as f64 / gamma_plus;
    }
    if stats.n_out > rank {
        let (_, vo) = component_variances(0.0, 1.0, gamma_minus, nu)?;
        sum_out += (stats.n_out - rank) as f64 * vo;
    }
    Ok(ErrorPair {
        e_plus: sum_out / stats.n_out as f64,
        e_minus: sum_in / stats.n_in as f64,
        variance_clamped: false,
    })
}

/// Input-side error of the observed last stage.
pub fn error_observed(
    stage: &LayerStatistics,
    gamma_plus: f64,
    tau0_prev: f64,
    mean_prev: f64,
    opts: &SeOptions,
) -> Result<ErrorPair> {
    match stage {
        LayerStatistics::Linear(l) => {
            let nu = l.nu.ok_or_else(|| Error::InvalidArgument("observed stage needs finite noise".into()))?;
            let mut sum: f64 = l.s.iter().map(|s| 1.0 / (gamma_plus + nu * s * s)).sum();
            sum += (l.n_in - l.s.len()) as f64 / gamma_plus;
            Ok(ErrorPair {
                e_plus: 0.0,
                e_minus: sum / l.n_in as f64,
                variance_clamped: false,
            })
        }
        LayerStatistics::Nonlinear(ch) => match ch.noise {
            ChannelNoise::Gaussian { variance } => {
                let det = ScalarChannel {
                    activation: ch.activation,
                    noise: ChannelNoise::None,
                };
                error_nonlinear(det, gamma_plus, variance.recip(), tau0_prev, mean_prev, opts)
            }
            ChannelNoise::None => observed_deterministic(*ch, gamma_plus, tau0_prev, mean_prev, opts),
        },
    }
}

fn observed_deterministic(
    ch: ScalarChannel,
    gamma_plus: f64,
    tau0_prev: f64,
    mean_prev: f64,
    opts: &SeOptions,
) -> Result<ErrorPair> {
    use crate::network::Activation;
    if ch.activation != Activation::Relu {
        // an identity output pins its input exactly
        return Ok(ErrorPair {
            e_plus: 0.0,
            e_minus: 0.0,
            variance_clamped: false,
        });
    }
    let raw = tau0_prev - mean_prev * mean_prev - gamma_plus.recip();
    let var_r = raw.max(0.0);
    let sd_z = gamma_plus.recip().sqrt();
    // only y = 0 leaves uncertainty: N(r⁺, 1/γ⁺) truncated to z ≤ 0
    let at = |r: f64| {
        let b = -r / sd_z;
        let (_, v) = lower_truncated_std_moments(b);
        norm_cdf(b) * v * sd_z * sd_z
    };
    let e = if var_r == 0.0 {
        at(mean_prev)
    } else {
        let sd = var_r.sqrt();
        let breaks = feature_breaks(
            mean_prev - WINDOW * sd,
            mean_prev + WINDOW * sd,
            &[(mean_prev, sd), (0.0, sd_z.min(sd))],
        );
        let m = opts.integrate(
            |r| {
                let w = norm_pdf((r - mean_prev) / sd);
                [w, w * at(r)]
            },
            &breaks,
        )?;
        m[1] / m[0]
    };
    Ok(ErrorPair {
        e_plus: 0.0,
        e_minus: e,
        variance_clamped: raw < 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeLayer {
    pub gamma: f64,
    pub gamma_opposite: f64,
    pub alpha: f64,
    pub eta: f64,
    pub clamp_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeHalfIteration {
    pub index: usize,
    pub direction: Direction,
    pub layers: Vec<SeLayer>,
    pub gamma_plus: Vec<f64>,
    pub gamma_minus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeState {
    pub tau0: Vec<f64>,
    pub mean0: Vec<f64>,
    pub half_iterations: Vec<SeHalfIteration>,
    /// Evaluations where `τ − μ² − 1/γ⁺` was negative.
    pub variance_clamps: usize,
}

impl SeState {
    pub fn clamp_events(&self) -> usize {
        self.half_iterations
            .iter()
            .flat_map(|h| h.layers.iter())
            .map(|l| l.clamp_events)
            .sum()
    }

    /// Predicted MSE `1/η̄` of layer `layer` after half-iteration `half_iter`.
    pub fn predicted_mse(&self, layer: usize, half_iter: usize) -> Result<f64> {
        let h = self
            .half_iterations
            .get(half_iter)
            .ok_or_else(|| Error::InvalidArgument(format!("half-iteration {half_iter} out of range")))?;
        let l = h
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range")))?;
        Ok(l.eta.recip())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `10·log10((1/η̄)/τ⁰_ℓ)`
pub fn predicted_nmse_db(se: &SeState, layer: usize, half_iter: usize) -> Result<f64> {
    let mse = se.predicted_mse(layer, half_iter)?;
    Ok(10.0 * (mse / se.tau0[layer]).log10())
}

/// Runs `n_iter` iterations of state evolution from `γ̄⁻ = 0`.
pub fn run_se(stats: &[LayerStatistics], n_iter: usize, opts: &SeOptions) -> Result<SeState> {
    if stats.is_empty() {
        return Err(Error::InvalidArgument("no stages".into()));
    }
    let layers = stats.len();
    let (tau0, mean0) = compute_tau0(stats, opts.mean_aware)?;
    let mut gp = vec![0.0; layers];
    let mut gm = vec![0.0; layers];
    let mut halves = Vec::with_capacity(2 * n_iter);
    let mut variance_clamps = 0;

    let stage_error = |l: usize, gp: f64, gm: f64, clamps: &mut usize| -> Result<ErrorPair> {
        let e = match &stats[l - 1] {
            LayerStatistics::Linear(ls) => error_linear(ls, gp, gm)?,
            LayerStatistics::Nonlinear(ch) => error_nonlinear(*ch, gp, gm, tau0[l - 1], mean0[l - 1], opts)?,
        };
        *clamps += usize::from(e.variance_clamped);
        Ok(e)
    };

    for _ in 0..n_iter {
        let mut rows = Vec::with_capacity(layers);
        for l in 0..layers {
            let e = if l == 0 {
                1.0 / (1.0 + gm[0])
            } else {
                stage_error(l, gp[l - 1], gm[l], &mut variance_clamps)
                    .map_err(|e| e.at_layer(l, halves.len()))?
                    .e_plus
            };
            let upd = precision_from_variance(e, gm[l], &opts.clamp)?;
            gp[l] = upd.gamma;
            rows.push(SeLayer {
                gamma: upd.gamma,
                gamma_opposite: gm[l],
                alpha: upd.alpha,
                eta: upd.eta,
                clamp_events: upd.clamp_events,
            });
        }
        halves.push(SeHalfIteration {
            index: halves.len(),
            direction: Direction::Forward,
            layers: rows,
            gamma_plus: gp.clone(),
            gamma_minus: gm.clone(),
        });

        let mut rows = Vec::with_capacity(layers);
        for l in (0..layers).rev() {
            let e = if l + 1 == layers {
                let e = error_observed(&stats[l], gp[l], tau0[l], mean0[l], opts)
                    .map_err(|e| e.at_layer(l, halves.len()))?;
                variance_clamps += usize::from(e.variance_clamped);
                e.e_minus
            } else {
                stage_error(l + 1, gp[l], gm[l + 1], &mut variance_clamps)
                    .map_err(|e| e.at_layer(l, halves.len()))?
                    .e_minus
            };
            let upd = precision_from_variance(e, gp[l], &opts.clamp)?;
            gm[l] = upd.gamma;
            rows.push(SeLayer {
                gamma: upd.gamma,
                gamma_opposite: gp[l],
                alpha: upd.alpha,
                eta: upd.eta,
                clamp_events: upd.clamp_events,
            });
        }
        rows.reverse();
        halves.push(SeHalfIteration {
            index: halves.len(),
            direction: Direction::Reverse,
            layers: rows,
            gamma_plus: gp.clone(),
            gamma_minus: gm.clone(),
        });
    }
    Ok(SeState {
        tau0,
        mean0,
        half_iterations: halves,
        variance_clamps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn relu_second_moment_of_standard_normal() {
        let stats = vec![LayerStatistics::Nonlinear(ScalarChannel::relu())];
        let (tau, _) = compute_tau0(&stats, true).unwrap();
        assert_eq!(tau[0], 1.0);
        assert_relative_eq!(tau[1], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn identity_error_is_conjugate() {
        let e = error_nonlinear(ScalarChannel::identity(), 2.0, 3.0, 1.0, 0.0, &SeOptions::default()).unwrap();
        assert_relative_eq!(e.e_plus, 0.2, epsilon = 1e-10);
        assert_relative_eq!(e.e_minus, 0.2, epsilon = 1e-10);
    }

    #[test]
    fn linear_error_special_cases() {
        let zero = LinearStatistics {
            n_in: 3,
            n_out: 3,
            s: vec![],
            b_bar_second_moment: 0.0,
            bias_mean: 0.0,
            nu: Some(4.0),
        };
        let e = error_linear(&zero, 2.0, 1.0).unwrap();
        assert_relative_eq!(e.e_minus, 0.5, epsilon = 1e-15);
        assert_relative_eq!(e.e_plus, 0.2, epsilon = 1e-15);
        let ident = LinearStatistics {
            s: vec![1.0; 3],
            nu: None,
            ..zero
        };
        let e = error_linear(&ident, 2.0, 3.0).unwrap();
        assert_relative_eq!(e.e_minus, 0.2, epsilon = 1e-15);
        assert_relative_eq!(e.e_plus, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn fixed_panels_match_adaptive() {
        let fixed = SeOptions::default();
        let adaptive = SeOptions {
            adaptive: true,
            ..fixed
        };
        for &(gp, gm, tau, mu) in &[(1.0, 1.0, 1.0, 0.0), (20.0, 300.0, 0.8, -0.2), (3.0, 1e4, 1.2, 0.3), (50.0, 0.5, 0.5, 0.1)] {
            for ch in [ScalarChannel::relu(), ScalarChannel::relu().with_noise(0.05)] {
                let a = error_nonlinear(ch, gp, gm, tau, mu, &fixed).unwrap();
                let b = error_nonlinear(ch, gp, gm, tau, mu, &adaptive).unwrap();
                assert!((a.e_plus - b.e_plus).abs() < 1e-6 * b.e_plus, "{gp} {gm}: {a:?} {b:?}");
                assert!((a.e_minus - b.e_minus).abs() < 1e-6 * b.e_minus, "{gp} {gm}: {a:?} {b:?}");
            }
        }
    }

    #[test]
    fn nmse_arithmetic() {
        let se = SeState {
            tau0: vec![2.0],
            mean0: vec![0.0],
            half_iterations: vec![SeHalfIteration {
                index: 0,
                direction: Direction::Forward,
                layers: vec![SeLayer {
                    gamma: 0.25,
                    gamma_opposite: 0.25,
                    alpha: 0.5,
                    eta: 0.5,
                    clamp_events: 0,
                }],
                gamma_plus: vec![0.25],
                gamma_minus: vec![0.25],
            }],
            variance_clamps: 0,
        };
        assert_relative_eq!(predicted_nmse_db(&se, 0, 0).unwrap(), 0.0, epsilon = 1e-14);
        let mut se2 = se.clone();
        se2.half_iterations[0].layers[0].eta = 50.0;
        assert_relative_eq!(predicted_nmse_db(&se2, 0, 0).unwrap(), -20.0, epsilon = 1e-12);
    }
}
