use mlvamp::denoise::{denoise_middle, ScalarChannel};
use mlvamp::engine::{precision_from_variance, precision_update, ClampLimits};
use proptest::prelude::*;

proptest! {
    #[test]
    fn precision_sum_is_exact(alpha in -0.5f64..1.5, g in 1e-6f64..1e6) {
        let u = precision_update(alpha, g, &ClampLimits::default()).unwrap();
        prop_assert_eq!(u.eta, u.gamma + g);
        prop_assert!(u.alpha > 0.0 && u.alpha < 1.0);
        prop_assert!(u.gamma > 0.0);
    }

    #[test]
    fn variance_route_keeps_the_sum(var in 1e-9f64..1e3, g in 1e-6f64..1e6) {
        let u = precision_from_variance(var, g, &ClampLimits::default()).unwrap();
        prop_assert_eq!(u.eta, u.gamma + g);
    }

    #[test]
    fn relu_moments_are_admissible(
        rp in -20f64..20.0,
        rm in -20f64..20.0,
        gp in 1e-3f64..1e4,
        gm in 0f64..1e4,
    ) {
        let d = denoise_middle(ScalarChannel::relu(), rp, rm, gp, gm).unwrap();
        prop_assert!(d.mean_out >= 0.0);
        prop_assert!(d.var_in > 0.0 && d.var_in.is_finite());
        prop_assert!(d.var_out >= 0.0 && d.var_out.is_finite());
        prop_assert!(d.mean_in.is_finite());
    }

    #[test]
    fn identity_channel_is_gaussian(
        rp in -5f64..5.0,
        rm in -5f64..5.0,
        gp in 1e-2f64..1e2,
        gm in 1e-2f64..1e2,
        noise in 1e-3f64..1.0,
    ) {
        let d = denoise_middle(ScalarChannel::identity().with_noise(noise), rp, rm, gp, gm).unwrap();
        // z_out = z_in + w: prior precision on z_out is 1/(1/γ⁺ + noise).
        let prior = 1.0 / (1.0 / gp + noise);
        let var_out = 1.0 / (prior + gm);
        let mean_out = var_out * (prior * rp + gm * rm);
        prop_assert!((d.var_out - var_out).abs() <= 1e-9 * var_out);
        prop_assert!((d.mean_out - mean_out).abs() <= 1e-9 * (1.0 + mean_out.abs()));
    }
}
