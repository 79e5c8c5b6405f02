//! Standard normal helpers that stay accurate far into the tails.

use statrs::function::erf::erfc;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Lentz evaluation of 1/(t + k₀/(t + (k₀+1)/(t + ...))), valid for t > 0.
fn mills_fraction(t: f64, k0: usize) -> f64 {
    let tiny = 1e-300;
    let mut f = t;
    let mut c = t;
    let mut d = 0.0;
    for k in k0..k0 + 500 {
        let a = k as f64;
        d = t + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = t + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// Φ(x)/φ(x) for x < 0, i.e. the Mills ratio R(-x).
fn mills_ratio_neg(x: f64) -> f64 {
    mills_fraction(-x, 1)
}

pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -5.0 {
        norm_cdf(x).ln()
    } else {
        -0.5 * x * x - LN_SQRT_2PI + mills_ratio_neg(x).ln()
    }
}

/// φ(x)/Φ(x), the hazard of the lower tail, finite for every x.
pub fn inv_mills(x: f64) -> f64 {
    if x > -5.0 {
        norm_pdf(x) / norm_cdf(x)
    } else {
        1.0 / mills_ratio_neg(x)
    }
}

/// Φ⁻¹(p) via Acklam's rational approximation refined by one Halley step.
pub fn norm_inv_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0,1)");
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let plow = 0.02425;
    let x = if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = norm_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// log-sum-exp of a slice, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// First two moments of X ~ N(0,1) truncated to [a, ∞).
pub fn upper_truncated_std_moments(a: f64) -> (f64, f64) {
    // E = λ, Var = 1 + aλ - λ² with λ = φ(a)/(1-Φ(a)).
    if a > 5.0 {
        // λ = a + δ with δ from the shifted fraction, so Var = 1 - λδ
        // without the O(a²) cancellation.
        let delta = mills_fraction(a, 2);
        let lambda = a + delta;
        return (lambda, (1.0 - lambda * delta).max(0.0));
    }
    let lambda = inv_mills(-a);
    let var = (1.0 + a * lambda - lambda * lambda).max(0.0);
    (lambda, var)
}

/// First two moments of X ~ N(0,1) truncated to (-∞, b].
pub fn lower_truncated_std_moments(b: f64) -> (f64, f64) {
    let (m, v) = upper_truncated_std_moments(-b);
    (-m, v)
}
