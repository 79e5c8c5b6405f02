//! MMSE estimation for linear stages in SVD coordinates.
//!
//! With `ū_in = V_in r⁺` and `ū_out = V_outᵀ r⁻` the belief of a linear stage
//! factors into independent two-dimensional Gaussians, one per singular
//! value, so every estimate is a 2×2 solve.

use nalgebra::DVector;

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::network::LinearStage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentSolve {
    /// Estimate on the input side.
    pub g_minus: f64,
    /// Estimate on the output side.
    pub g_plus: f64,
    /// ∂g_plus/∂u_out
    pub d_plus: f64,
    /// ∂g_minus/∂u_in
    pub d_minus: f64,
    pub var_in: f64,
    pub var_out: f64,
}

/// Posterior variances `([P⁻¹]₁₁, [P⁻¹]₂₂)` of one component; they do not
/// depend on the means.
pub fn component_variances(s: f64, gamma_plus: f64, gamma_minus: f64, nu: f64) -> Result<(f64, f64)> {
    if nu.is_infinite() {
        let p = gamma_plus + gamma_minus * s * s;
        if !(p > 0.0) {
            return Err(Error::Singular { det: p });
        }
        let var_in = p.recip();
        return Ok((var_in, s * s * var_in));
    }
    let det = gamma_plus * gamma_minus + gamma_plus * nu + gamma_minus * nu * s * s;
    if !(det > 0.0) {
        return Err(Error::Singular { det });
    }
    Ok(((gamma_minus + nu) / det, (gamma_plus + nu * s * s) / det))
}

/// Joint MMSE estimate of `(u_in, u_out)` under
/// `γ⁺/2 (x − u_in)² + γ⁻/2 (y − u_out)² + ν/2 (y − s x − b̄)²`.
/// With `nu = ∞` the last term becomes the constraint `y = s x + b̄`.
pub fn component_solve(
    u_in: f64,
    u_out: f64,
    s: f64,
    b_bar: f64,
    gamma_plus: f64,
    gamma_minus: f64,
    nu: f64,
) -> Result<ComponentSolve> {
    let (var_in, var_out) = component_variances(s, gamma_plus, gamma_minus, nu)?;
    let (g_minus, g_plus) = if nu.is_infinite() {
        let x = (gamma_plus * u_in + gamma_minus * s * (u_out - b_bar)) * var_in;
        (x, s * x + b_bar)
    } else {
        let det = gamma_plus * gamma_minus + gamma_plus * nu + gamma_minus * nu * s * s;
        let d1 = gamma_plus * u_in - nu * s * b_bar;
        let d2 = gamma_minus * u_out + nu * b_bar;
        (
            ((gamma_minus + nu) * d1 + nu * s * d2) / det,
            (nu * s * d1 + (gamma_plus + nu * s * s) * d2) / det,
        )
    };
    Ok(ComponentSolve {
        g_minus,
        g_plus,
        d_plus: gamma_minus * var_out,
        d_minus: gamma_plus * var_in,
        var_in,
        var_out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEstimate {
    pub z_hat_minus: DVector<f64>,
    pub z_hat_plus: DVector<f64>,
    pub alpha_minus: f64,
    pub alpha_plus: f64,
    /// Average posterior variance on the input side.
    pub mean_var_in: f64,
    /// Average posterior variance on the output side.
    pub mean_var_out: f64,
}

/// Estimates both sides of a hidden linear stage from the incoming messages
/// `(r⁺, γ⁺)` on its input and `(r⁻, γ⁻)` on its output.
pub fn denoise_linear(
    stage: &LinearStage,
    r_plus: &DVector<f64>,
    r_minus: &DVector<f64>,
    gamma_plus: f64,
    gamma_minus: f64,
) -> Result<LinearEstimate> {
    ensure_len("linear stage input message", stage.n_in(), r_plus.len())?;
    ensure_len("linear stage output message", stage.n_out(), r_minus.len())?;
    ensure_finite(r_plus.as_slice(), "r_plus")?;
    ensure_finite(r_minus.as_slice(), "r_minus")?;
    let (n_in, n_out, rank) = (stage.n_in(), stage.n_out(), stage.rank());
    let nu = stage.nu();
    let s = stage.singular_values();
    let b_bar = stage.bias_transformed();
    let mut g_in = stage.rotate_in(r_plus);
    let mut g_out = stage.rotate_out(r_minus);
    let (mut sum_in, mut sum_out) = (0.0, 0.0);

    for n in 0..rank {
        let c = component_solve(g_in[n], g_out[n], s[n], b_bar[n], gamma_plus, gamma_minus, nu)?;
        g_in[n] = c.g_minus;
        g_out[n] = c.g_plus;
        sum_in += c.var_in;
        sum_out += c.var_out;
    }
    if n_in > rank {
        // input-only coordinates keep their message
        if !(gamma_plus > 0.0) {
            return Err(Error::Singular { det: gamma_plus });
        }
        sum_in += (n_in - rank) as f64 / gamma_plus;
    }
    for n in rank..n_out {
        let c = component_solve(0.0, g_out[n], 0.0, b_bar[n], 1.0, gamma_minus, nu)?;
        g_out[n] = c.g_plus;
        sum_out += c.var_out;
    }
    let mean_var_in = sum_in / n_in as f64;
    let mean_var_out = sum_out / n_out as f64;
    Ok(LinearEstimate {
        z_hat_minus: stage.v_in().tr_mul(&g_in),
        z_hat_plus: stage.v_out() * g_out,
        alpha_minus: gamma_plus * mean_var_in,
        alpha_plus: gamma_minus * mean_var_out,
        mean_var_in,
        mean_var_out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedEstimate {
    pub z_hat_minus: DVector<f64>,
    pub alpha_minus: f64,
    pub mean_var_in: f64,
}

/// Estimates the input of the measurement stage given its observed output
/// `y` and the message `(r⁺, γ⁺)`.
pub fn denoise_linear_observed(
    stage: &LinearStage,
    y: &DVector<f64>,
    r_plus: &DVector<f64>,
    gamma_plus: f64,
) -> Result<ObservedEstimate> {
    ensure_len("observation", stage.n_out(), y.len())?;
    ensure_len("measurement input message", stage.n_in(), r_plus.len())?;
    ensure_finite(y.as_slice(), "observation")?;
    ensure_finite(r_plus.as_slice(), "r_plus")?;
    if !(gamma_plus > 0.0 && gamma_plus.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma_plus must be positive, got {gamma_plus}")));
    }
    let nu = stage.nu();
    if nu.is_infinite() {
        return Err(Error::InvalidArgument("observed stage needs finite noise precision".into()));
    }
    let s = stage.singular_values();
    let b_bar = stage.bias_transformed();
    let y_bar = stage.rotate_out(y);
    let mut u = stage.rotate_in(r_plus);
    let mut sum = 0.0;
    for n in 0..stage.rank() {
        let var = 1.0 / (gamma_plus + nu * s[n] * s[n]);
        u[n] = (gamma_plus * u[n] + nu * s[n] * (y_bar[n] - b_bar[n])) * var;
        sum += var;
    }
    sum += (stage.n_in() - stage.rank()) as f64 / gamma_plus;
    let mean_var_in = sum / stage.n_in() as f64;
    Ok(ObservedEstimate {
        z_hat_minus: stage.v_in().tr_mul(&u),
        alpha_minus: gamma_plus * mean_var_in,
        mean_var_in,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, Matrix2, Vector2};

    #[test]
    fn zero_singular_value_decouples() {
        let c = component_solve(0.7, -0.3, 0.0, 0.4, 2.0, 3.0, 5.0).unwrap();
        assert_relative_eq!(c.g_minus, 0.7, epsilon = 1e-15);
        assert_relative_eq!(c.g_plus, (3.0 * -0.3 + 5.0 * 0.4) / 8.0, epsilon = 1e-15);
        assert_relative_eq!(c.d_minus, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn hard_constraint_averages() {
        let c = component_solve(1.0, 3.0, 1.0, 0.0, 1.0, 3.0, f64::INFINITY).unwrap();
        assert_relative_eq!(c.g_minus, 2.5, epsilon = 1e-15);
        assert_relative_eq!(c.g_plus, 2.5, epsilon = 1e-15);
        assert_relative_eq!(c.d_plus, 3.0 / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn matches_direct_inverse() {
        let (u_in, u_out, s, b, gp, gm, nu) = (0.3, -1.1, 1.7, 0.25, 0.8, 2.2, 4.0);
        let p = Matrix2::new(gp + nu * s * s, -nu * s, -nu * s, gm + nu);
        let d = Vector2::new(gp * u_in - nu * s * b, gm * u_out + nu * b);
        let pinv = p.try_inverse().unwrap();
        let x = pinv * d;
        let c = component_solve(u_in, u_out, s, b, gp, gm, nu).unwrap();
        assert_relative_eq!(c.g_minus, x[0], epsilon = 1e-13);
        assert_relative_eq!(c.g_plus, x[1], epsilon = 1e-13);
        assert_relative_eq!(c.var_in, pinv[(0, 0)], epsilon = 1e-13);
        assert_relative_eq!(c.var_out, pinv[(1, 1)], epsilon = 1e-13);
    }

    #[test]
    fn identity_stage_averages_messages() {
        let stage = crate::network::svd_decompose_stage(&DMatrix::identity(4, 4), &DVector::zeros(4), f64::INFINITY)
            .unwrap();
        let a = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let b = DVector::from_vec(vec![3.0, 0.0, 1.0, 0.5]);
        let est = denoise_linear(&stage, &a, &b, 2.0, 2.0).unwrap();
        let avg = (&a + &b) * 0.5;
        assert!((est.z_hat_minus - &avg).amax() < 1e-12);
        assert!((est.z_hat_plus - &avg).amax() < 1e-12);
        assert_relative_eq!(est.alpha_plus, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn observed_stage_pins() {
        let stage = crate::network::svd_decompose_stage(&DMatrix::identity(3, 3), &DVector::zeros(3), 1e12).unwrap();
        let y = DVector::from_vec(vec![0.4, -2.0, 1.0]);
        let r = DVector::zeros(3);
        let est = denoise_linear_observed(&stage, &y, &r, 1.0).unwrap();
        assert!((est.z_hat_minus - &y).amax() < 1e-4);
        let stage = crate::network::svd_decompose_stage(&DMatrix::identity(3, 3), &DVector::zeros(3), 1.0).unwrap();
        let est = denoise_linear_observed(&stage, &y, &y.map(|v| v + 1.0), 1e12).unwrap();
        assert!((est.z_hat_minus - y.map(|v| v + 1.0)).amax() < 1e-8);
    }
}
