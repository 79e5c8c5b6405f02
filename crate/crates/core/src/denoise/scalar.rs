//! Componentwise MMSE denoisers for activation stages and the input prior.
//!
//! The local belief of one component of a nonlinear stage is
//! `∝ N(z_in; r⁺, 1/γ⁺) · p(z_out | z_in) · N(z_out; r⁻, 1/γ⁻)`. For a
//! piecewise-linear activation without channel noise the belief lives on the
//! graph `z_out = φ(z_in)` and on every piece it is a truncated Gaussian, so
//! the moments are available in closed form. Gaussian channel noise reduces
//! to the noiseless case with an effective output precision.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::rng_for;
use crate::network::{Activation, ChannelNoise, NonlinearStage, Piece};
use crate::quadrature::{gaussian_expectation, hermite63, integrate_adaptive};
use crate::special::{
    log_norm_cdf, log_sum_exp, lower_truncated_std_moments, upper_truncated_std_moments, LN_SQRT_2PI,
};

pub const VAR_FLOOR: f64 = 1e-300;
const QUAD_TOL: f64 = 1e-8;
const WINDOW: f64 = 12.0;
const MIN_ESS: f64 = 100.0;
const MAX_PIECES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarChannel {
    pub activation: Activation,
    pub noise: ChannelNoise,
}

impl ScalarChannel {
    pub fn relu() -> Self {
        ScalarChannel {
            activation: Activation::Relu,
            noise: ChannelNoise::None,
        }
    }

    pub fn identity() -> Self {
        ScalarChannel {
            activation: Activation::Identity,
            noise: ChannelNoise::None,
        }
    }

    pub fn with_noise(mut self, variance: f64) -> Self {
        self.noise = ChannelNoise::Gaussian { variance };
        self
    }

    fn deterministic(self) -> Self {
        ScalarChannel {
            activation: self.activation,
            noise: ChannelNoise::None,
        }
    }
}

impl From<NonlinearStage> for ScalarChannel {
    fn from(stage: NonlinearStage) -> Self {
        ScalarChannel {
            activation: stage.activation,
            noise: stage.noise,
        }
    }
}

/// Posterior moments of `(z_in, z_out)` under the local belief.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseResult {
    pub mean_in: f64,
    pub mean_out: f64,
    pub var_in: f64,
    pub var_out: f64,
}

fn check_precisions(gamma_plus: f64, gamma_minus: f64) -> Result<()> {
    if !(gamma_plus > 0.0 && gamma_plus.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma_plus must be positive and finite, got {gamma_plus}")));
    }
    if !(gamma_minus >= 0.0 && gamma_minus.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gamma_minus must be nonnegative and finite, got {gamma_minus}"
        )));
    }
    Ok(())
}

/// Output precision seen by `φ(z_in)` once the channel noise is folded in,
/// plus the map `E[z_out | z_in] = c·φ(z_in) + d` and `Var[z_out | z_in]`.
struct NoiseFold {
    gamma_eff: f64,
    c: f64,
    d: f64,
    cond_var: f64,
}

fn fold_noise(noise: ChannelNoise, r_minus: f64, gamma_minus: f64) -> NoiseFold {
    match noise {
        ChannelNoise::None => NoiseFold {
            gamma_eff: gamma_minus,
            c: 1.0,
            d: 0.0,
            cond_var: 0.0,
        },
        ChannelNoise::Gaussian { variance } => {
            let prec = variance.recip() + gamma_minus;
            NoiseFold {
                gamma_eff: if gamma_minus == 0.0 {
                    0.0
                } else {
                    1.0 / (variance + 1.0 / gamma_minus)
                },
                c: variance.recip() / prec,
                d: gamma_minus * r_minus / prec,
                cond_var: prec.recip(),
            }
        }
    }
}

fn lift(fold: &NoiseFold, det: DenoiseResult) -> DenoiseResult {
    DenoiseResult {
        mean_in: det.mean_in,
        var_in: det.var_in,
        mean_out: fold.c * det.mean_out + fold.d,
        var_out: fold.cond_var + fold.c * fold.c * det.var_out,
    }
}

/// log(Φ(b) − Φ(a)) for a < b.
fn log_gauss_mass(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        log_norm_cdf(b)
    } else if b == f64::INFINITY {
        log_norm_cdf(-a)
    } else if a > 0.0 {
        let (hi, lo) = (log_norm_cdf(-a), log_norm_cdf(-b));
        hi + (-(lo - hi).exp()).ln_1p()
    } else {
        let (hi, lo) = (log_norm_cdf(b), log_norm_cdf(a));
        hi + (-(lo - hi).exp()).ln_1p()
    }
}

/// Mean and variance of N(0,1) restricted to [a, b].
fn truncated_std_moments(a: f64, b: f64) -> (f64, f64) {
    match (a == f64::NEG_INFINITY, b == f64::INFINITY) {
        (true, true) => (0.0, 1.0),
        (true, false) => lower_truncated_std_moments(b),
        (false, true) => upper_truncated_std_moments(a),
        (false, false) => {
            let z = (log_gauss_mass(a, b)).exp();
            let (pa, pb) = (crate::special::norm_pdf(a), crate::special::norm_pdf(b));
            let m = (pa - pb) / z;
            let v = 1.0 + (a * pa - b * pb) / z - m * m;
            (m, v.max(0.0))
        }
    }
}

/// Combines per-piece (log mass, mean_in, var_in, mean_out, var_out); also
/// returns the log of the total mass.
fn mix(pieces: &[(f64, f64, f64, f64, f64)]) -> Option<(DenoiseResult, f64)> {
    let top = pieces.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return None;
    }
    let mut w = [0.0; MAX_PIECES];
    let mut sum = 0.0;
    for (i, p) in pieces.iter().enumerate() {
        w[i] = (p.0 - top).exp();
        sum += w[i];
    }
    let w = &mut w[..pieces.len()];
    w.iter_mut().for_each(|x| *x /= sum);
    let mean_in: f64 = pieces.iter().zip(w.iter()).map(|(p, w)| w * p.1).sum();
    let mean_out: f64 = pieces.iter().zip(w.iter()).map(|(p, w)| w * p.3).sum();
    let var_in: f64 = pieces
        .iter()
        .zip(w.iter())
        .map(|(p, w)| w * (p.2 + (p.1 - mean_in).powi(2)))
        .sum();
    let var_out: f64 = pieces
        .iter()
        .zip(w.iter())
        .map(|(p, w)| w * (p.4 + (p.3 - mean_out).powi(2)))
        .sum();
    Some((
        DenoiseResult {
            mean_in,
            mean_out,
            var_in,
            var_out,
        },
        top + sum.ln(),
    ))
}

/// Gaussian envelope of the belief restricted to one linear piece: combined
/// precision, center, and the log of the constant factor.
fn piece_envelope(piece: &Piece, r_plus: f64, r_minus: f64, gp: f64, gm: f64) -> (f64, f64, f64) {
    let a = piece.slope;
    let prec = gp + gm * a * a;
    let center = (gp * r_plus + gm * a * (r_minus - piece.intercept)) / prec;
    let resid = a * r_plus + piece.intercept - r_minus;
    let log_const = -0.5 * gp * gm * resid * resid / prec;
    (prec, center, log_const)
}

fn closed_form_deterministic(
    pieces: &[Piece],
    r_plus: f64,
    r_minus: f64,
    gp: f64,
    gm: f64,
) -> Result<(DenoiseResult, f64)> {
    let mut parts = [(0.0, 0.0, 0.0, 0.0, 0.0); MAX_PIECES];
    let mut n = 0;
    for piece in pieces {
        let (prec, center, log_const) = piece_envelope(piece, r_plus, r_minus, gp, gm);
        let sd = prec.sqrt().recip();
        let (lo, hi) = ((piece.lo - center) / sd, (piece.hi - center) / sd);
        let log_mass = log_const - 0.5 * prec.ln() + log_gauss_mass(lo, hi);
        if log_mass == f64::NEG_INFINITY {
            continue;
        }
        let (tm, tv) = truncated_std_moments(lo, hi);
        let (m, v) = (center + sd * tm, tv * sd * sd);
        let a = piece.slope;
        parts[n] = (log_mass, m, v, a * m + piece.intercept, a * a * v);
        n += 1;
    }
    mix(&parts[..n]).ok_or_else(|| Error::Quadrature {
        what: "belief has no mass on any activation piece".into(),
        estimate: f64::INFINITY,
        tolerance: QUAD_TOL,
    })
}

fn floor(mut r: DenoiseResult) -> DenoiseResult {
    r.var_in = r.var_in.max(VAR_FLOOR);
    r.var_out = r.var_out.max(VAR_FLOOR);
    r
}

/// Posterior moments of one component of a nonlinear stage. `gamma_minus`
/// may be 0 (no information from downstream yet).
pub fn denoise_middle(
    ch: ScalarChannel,
    r_plus: f64,
    r_minus: f64,
    gamma_plus: f64,
    gamma_minus: f64,
) -> Result<DenoiseResult> {
    check_precisions(gamma_plus, gamma_minus)?;
    let fold = fold_noise(ch.noise, r_minus, gamma_minus);
    let det = match ch.activation.pieces() {
        Some(pieces) => closed_form_deterministic(pieces, r_plus, r_minus, gamma_plus, fold.gamma_eff)?.0,
        None => quadrature_deterministic(ch.activation, r_plus, r_minus, gamma_plus, fold.gamma_eff)?,
    };
    Ok(floor(lift(&fold, det)))
}

/// [`denoise_middle`] together with `ln p(r⁻ | r⁺)`, the density of the
/// downstream message given the upstream one. Needs `gamma_minus > 0` and a
/// piecewise-linear activation.
pub fn denoise_middle_with_evidence(
    ch: ScalarChannel,
    r_plus: f64,
    r_minus: f64,
    gamma_plus: f64,
    gamma_minus: f64,
) -> Result<(DenoiseResult, f64)> {
    check_precisions(gamma_plus, gamma_minus)?;
    if gamma_minus == 0.0 {
        return Err(Error::InvalidArgument("evidence needs a positive gamma_minus".into()));
    }
    let pieces = ch
        .activation
        .pieces()
        .ok_or_else(|| Error::Unsupported(format!("{:?} is not piecewise linear", ch.activation)))?;
    let fold = fold_noise(ch.noise, r_minus, gamma_minus);
    let (det, log_mass) = closed_form_deterministic(pieces, r_plus, r_minus, gamma_plus, fold.gamma_eff)?;
    let log_ev = log_mass + 0.5 * (gamma_plus.ln() + fold.gamma_eff.ln()) - LN_SQRT_2PI;
    Ok((floor(lift(&fold, det)), log_ev))
}

/// Same moments as [`denoise_middle`] by numerical integration over `z_in`:
/// Gauss–Hermite on pieces covering the whole line, adaptive Gauss–Legendre
/// on truncated pieces, each centered and scaled by its Gaussian envelope.
pub fn denoise_middle_quadrature(
    ch: ScalarChannel,
    r_plus: f64,
    r_minus: f64,
    gamma_plus: f64,
    gamma_minus: f64,
) -> Result<DenoiseResult> {
    check_precisions(gamma_plus, gamma_minus)?;
    let fold = fold_noise(ch.noise, r_minus, gamma_minus);
    let det = quadrature_deterministic(ch.activation, r_plus, r_minus, gamma_plus, fold.gamma_eff)?;
    Ok(floor(lift(&fold, det)))
}

fn quadrature_deterministic(
    act: Activation,
    r_plus: f64,
    r_minus: f64,
    gp: f64,
    gm: f64,
) -> Result<DenoiseResult> {
    let whole = [Piece {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
        slope: f64::NAN,
        intercept: f64::NAN,
    }];
    let pieces: &[Piece] = act.pieces().unwrap_or(&whole);
    let log_density = |z: f64| {
        let o = act.apply(z) - r_minus;
        -0.5 * gp * (z - r_plus).powi(2) - 0.5 * gm * o * o
    };

    let mut parts = Vec::with_capacity(pieces.len());
    for piece in pieces {
        let (prec, center) = if piece.slope.is_nan() {
            (gp, r_plus)
        } else {
            let (p, c, _) = piece_envelope(piece, r_plus, r_minus, gp, gm);
            (p, c)
        };
        let sd = prec.sqrt().recip();
        let lo = ((piece.lo - center) / sd).max(-WINDOW);
        let hi = ((piece.hi - center) / sd).min(WINDOW);
        if lo >= hi {
            continue;
        }
        let anchor = center + sd * 0.0f64.clamp(lo, hi);
        let log_ref = log_density(anchor);
        let out_ref = act.apply(anchor);
        // moments in the standardized variable t = (z - center)/sd
        let f = |t: f64| {
            let z = center + sd * t;
            let w = (log_density(z) - log_ref).exp();
            let o = act.apply(z) - out_ref;
            [w, w * t, w * t * t, w * o, w * o * o]
        };
        let full_line = piece.lo == f64::NEG_INFINITY && piece.hi == f64::INFINITY;
        let m = if full_line && !piece.slope.is_nan() {
            // the integrand is Gaussian here; Hermite against exp(-t²/2)
            let g = gaussian_expectation(hermite63(), 0.0, 1.0, |t| {
                let v = f(t);
                let back = (0.5 * t * t).exp();
                [v[0] * back, v[1] * back, v[2] * back, v[3] * back, v[4] * back]
            });
            let s = (2.0 * std::f64::consts::PI).sqrt();
            [g[0] * s, g[1] * s, g[2] * s, g[3] * s, g[4] * s]
        } else {
            integrate_adaptive(f, lo, hi, QUAD_TOL)?
        };
        if !(m[0] > 0.0) {
            continue;
        }
        let log_mass = log_ref + sd.ln() + m[0].ln();
        let tm = m[1] / m[0];
        let tv = (m[2] / m[0] - tm * tm).max(0.0);
        let om = m[3] / m[0];
        let ov = (m[4] / m[0] - om * om).max(0.0);
        parts.push((log_mass, center + sd * tm, tv * sd * sd, out_ref + om, ov));
    }
    mix(&parts)
        .map(|m| m.0)
        .ok_or_else(|| Error::Quadrature {
            what: format!("zero mass on the integration grid (r+ = {r_plus}, r- = {r_minus})"),
            estimate: f64::INFINITY,
            tolerance: QUAD_TOL,
        })
}

/// Posterior of a standard Gaussian input given a pseudo-observation
/// `N(r⁻, 1/γ⁻)`; `gamma_minus = 0` returns the prior.
pub fn denoise_input(r_minus: f64, gamma_minus: f64) -> Result<(f64, f64)> {
    if !(gamma_minus >= 0.0) || gamma_minus.is_infinite() {
        return Err(Error::InvalidArgument(format!(
            "precision must be nonnegative and finite, got {gamma_minus}"
        )));
    }
    let var = 1.0 / (1.0 + gamma_minus);
    Ok((gamma_minus * r_minus * var, var))
}

/// Moments of `z_in` when the stage output `y` is observed directly.
pub fn denoise_output_nonlinear(ch: ScalarChannel, y: f64, r_plus: f64, gamma_plus: f64) -> Result<(f64, f64)> {
    check_precisions(gamma_plus, 0.0)?;
    if let ChannelNoise::Gaussian { variance } = ch.noise {
        let r = denoise_middle(ch.deterministic(), r_plus, y, gamma_plus, variance.recip())?;
        return Ok((r.mean_in, r.var_in));
    }
    match ch.activation {
        Activation::Identity => Ok((y, VAR_FLOOR)),
        Activation::Relu => {
            if y > 0.0 {
                Ok((y, VAR_FLOOR))
            } else if y == 0.0 {
                let sd = gamma_plus.sqrt().recip();
                let (m, v) = lower_truncated_std_moments(-r_plus / sd);
                Ok((r_plus + sd * m, (v * sd * sd).max(VAR_FLOOR)))
            } else {
                Err(Error::InconsistentObservation(format!("ReLU output {y} is negative")))
            }
        }
        Activation::SigmoidProbit => Err(Error::Unsupported("probit output channel".into())),
    }
}

/// Importance-sampling estimate with delta-method standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McMoments {
    pub estimate: DenoiseResult,
    pub std_error: DenoiseResult,
    pub ess: f64,
}

/// Self-normalized importance sampling of the same belief as
/// [`denoise_middle`]. The proposal is an equal mixture of the prior side
/// `N(r⁺, 1/γ⁺)` and a widened Gaussian fit of the whole belief.
pub fn mc_oracle_moments(
    ch: ScalarChannel,
    r_plus: f64,
    r_minus: f64,
    gamma_plus: f64,
    gamma_minus: f64,
    n_samples: usize,
    seed: u64,
) -> Result<McMoments> {
    check_precisions(gamma_plus, gamma_minus)?;
    if n_samples < 10_000 {
        return Err(Error::InvalidArgument(format!("need at least 10^4 samples, got {n_samples}")));
    }
    let fold = fold_noise(ch.noise, r_minus, gamma_minus);
    let gm = fold.gamma_eff;
    let act = ch.activation;

    let sd1 = gamma_plus.sqrt().recip();
    let prec2 = gamma_plus + gm;
    let m2 = (gamma_plus * r_plus + gm * r_minus) / prec2;
    let sd2 = 2.0 / prec2.sqrt();
    let log_q = |z: f64| {
        let a = -0.5 * ((z - r_plus) / sd1).powi(2) - sd1.ln();
        let b = -0.5 * ((z - m2) / sd2).powi(2) - sd2.ln();
        log_sum_exp(&[a, b]) - std::f64::consts::LN_2 - LN_SQRT_2PI
    };
    let log_target = |z: f64| -0.5 * gamma_plus * (z - r_plus).powi(2) - 0.5 * gm * (act.apply(z) - r_minus).powi(2);

    let mut rng = rng_for(seed, 0x5ca1a);
    let mut z = Vec::with_capacity(n_samples);
    let mut lw = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let e: f64 = rng.sample(StandardNormal);
        let x = if rng.random::<bool>() { r_plus + sd1 * e } else { m2 + sd2 * e };
        z.push(x);
        lw.push(log_target(x) - log_q(x));
    }
    let top = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|l| (l - top).exp()).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    let ess = sw * sw / sw2;
    if ess < MIN_ESS {
        return Err(Error::DegenerateSampler { ess, min: MIN_ESS });
    }

    // per-sample conditional output moments given z_in
    let g1: Vec<f64> = z.iter().map(|&x| fold.c * act.apply(x) + fold.d).collect();
    let wmean = |f: &dyn Fn(usize) -> f64| (0..n_samples).map(|i| w[i] * f(i)).sum::<f64>() / sw;
    let mean_in = wmean(&|i| z[i]);
    let mean_out = wmean(&|i| g1[i]);
    let var_in = wmean(&|i| (z[i] - mean_in).powi(2));
    let var_out = fold.cond_var + wmean(&|i| (g1[i] - mean_out).powi(2));
    let se = |psi: &dyn Fn(usize) -> f64| ((0..n_samples).map(|i| (w[i] * psi(i)).powi(2)).sum::<f64>()).sqrt() / sw;
    let std_error = DenoiseResult {
        mean_in: se(&|i| z[i] - mean_in),
        mean_out: se(&|i| g1[i] - mean_out),
        var_in: se(&|i| (z[i] - mean_in).powi(2) - var_in),
        var_out: se(&|i| (g1[i] - mean_out).powi(2) + fold.cond_var - var_out),
    };
    Ok(McMoments {
        estimate: DenoiseResult {
            mean_in,
            mean_out,
            var_in,
            var_out,
        },
        std_error,
        ess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::norm_cdf;
    use approx::assert_relative_eq;

    #[test]
    fn identity_is_conjugate_product() {
        let r = denoise_middle(ScalarChannel::identity(), 0.3, -1.2, 2.0, 0.5).unwrap();
        let m = (2.0 * 0.3 + 0.5 * -1.2) / 2.5;
        assert_relative_eq!(r.mean_in, m, epsilon = 1e-14);
        assert_relative_eq!(r.mean_out, m, epsilon = 1e-14);
        assert_relative_eq!(r.var_in, 0.4, epsilon = 1e-14);
        assert_relative_eq!(r.var_out, 0.4, epsilon = 1e-14);
    }

    #[test]
    fn relu_without_downstream_is_prior() {
        let r = denoise_middle(ScalarChannel::relu(), 0.7, 5.0, 4.0, 0.0).unwrap();
        assert_relative_eq!(r.mean_in, 0.7, epsilon = 1e-14);
        assert_relative_eq!(r.var_in, 0.25, epsilon = 1e-14);
        // E max(0, N(0.7, 0.25))
        let (mu, sd) = (0.7, 0.5);
        let t = mu / sd;
        let e = mu * norm_cdf(t) + sd * crate::special::norm_pdf(t);
        assert_relative_eq!(r.mean_out, e, epsilon = 1e-13);
    }

    #[test]
    fn closed_form_matches_quadrature() {
        for &(rp, rm, gp, gm) in &[
            (0.0, 1.0, 1.0, 1.0),
            (-2.0, 0.5, 0.3, 20.0),
            (3.0, -1.0, 50.0, 0.01),
            (0.1, 0.0, 1e-2, 1e2),
            (-0.4, 2.5, 7.0, 0.0),
        ] {
            for ch in [ScalarChannel::relu(), ScalarChannel::relu().with_noise(0.3)] {
                let a = denoise_middle(ch, rp, rm, gp, gm).unwrap();
                let b = denoise_middle_quadrature(ch, rp, rm, gp, gm).unwrap();
                for (x, y) in [(a.mean_in, b.mean_in), (a.mean_out, b.mean_out), (a.var_in, b.var_in), (a.var_out, b.var_out)] {
                    assert!((x - y).abs() < 1e-7 * (1.0 + x.abs()), "{rp} {rm} {gp} {gm}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn pinned_output() {
        for ch in [ScalarChannel::relu(), ScalarChannel::identity(), ScalarChannel::relu().with_noise(0.1)] {
            let r = denoise_middle(ch, -0.5, 1.3, 1.0, 1e12).unwrap();
            assert!((r.mean_out - 1.3).abs() < 1e-5, "{ch:?} {r:?}");
            assert!(r.var_out < 1e-10);
        }
    }

    #[test]
    fn input_denoiser_cases() {
        assert_eq!(denoise_input(3.0, 0.0).unwrap(), (0.0, 1.0));
        assert_eq!(denoise_input(2.0, 1.0).unwrap(), (1.0, 0.5));
        assert!((denoise_input(-3.0, 1e12).unwrap().0 + 3.0).abs() < 1e-5);
        assert!(denoise_input(1.0, -1.0).is_err());
    }

    #[test]
    fn observed_relu_output() {
        assert_eq!(denoise_output_nonlinear(ScalarChannel::relu(), 0.8, 0.0, 1.0).unwrap().0, 0.8);
        let (m, v) = denoise_output_nonlinear(ScalarChannel::relu(), 0.0, 0.0, 1.0).unwrap();
        let half_normal = (2.0 / std::f64::consts::PI).sqrt();
        assert_relative_eq!(m, -half_normal, epsilon = 1e-13);
        assert_relative_eq!(v, 1.0 - 2.0 / std::f64::consts::PI, epsilon = 1e-13);
        assert!(matches!(
            denoise_output_nonlinear(ScalarChannel::relu(), -0.1, 0.0, 1.0),
            Err(Error::InconsistentObservation(_))
        ));
        let (m, _) = denoise_output_nonlinear(ScalarChannel::identity().with_noise(0.5), 1.0, 0.0, 2.0).unwrap();
        assert_relative_eq!(m, (2.0 * 0.0 + 1.0 / 0.5) / (2.0 + 2.0), epsilon = 1e-14);
        let (m, _) = denoise_output_nonlinear(ScalarChannel::relu().with_noise(0.5), 1.0, -0.7, 1e12).unwrap();
        assert!((m + 0.7).abs() < 1e-6);
    }

    #[test]
    fn divergence_matches_finite_difference() {
        let h = 1e-5;
        for ch in [ScalarChannel::relu(), ScalarChannel::relu().with_noise(0.2)] {
            let (rp, rm, gp, gm) = (0.2, 0.6, 1.5, 3.0);
            let r = denoise_middle(ch, rp, rm, gp, gm).unwrap();
            let up = denoise_middle(ch, rp, rm + h, gp, gm).unwrap().mean_out;
            let dn = denoise_middle(ch, rp, rm - h, gp, gm).unwrap().mean_out;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gm * r.var_out).abs() < 1e-4 * fd.abs());
            let up = denoise_middle(ch, rp + h, rm, gp, gm).unwrap().mean_in;
            let dn = denoise_middle(ch, rp - h, rm, gp, gm).unwrap().mean_in;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gp * r.var_in).abs() < 1e-4 * fd.abs());
        }
    }

    #[test]
    fn mc_oracle_agrees_on_identity() {
        let exact = denoise_middle(ScalarChannel::identity(), 0.5, -0.5, 1.0, 2.0).unwrap();
        let mc = mc_oracle_moments(ScalarChannel::identity(), 0.5, -0.5, 1.0, 2.0, 200_000, 3).unwrap();
        assert!((mc.estimate.mean_in - exact.mean_in).abs() < 4.0 * mc.std_error.mean_in);
        assert!((mc.estimate.var_in - exact.var_in).abs() < 4.0 * mc.std_error.var_in);
        assert!(mc_oracle_moments(ScalarChannel::identity(), 0.0, 0.0, 1.0, 1.0, 100, 0).is_err());
    }
}
