#![allow(dead_code)]

use mlvamp::linalg::{gaussian_matrix, gaussian_vector, rng_for};
use mlvamp::network::{ChannelNoise, LinearStage, NetworkSpec, NonlinearStage, Stage, svd_decompose_stage, Activation};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Random stage with `W = B C` of the given rank.
pub fn random_stage(rng: &mut impl Rng, n_in: usize, n_out: usize, rank: usize, nu: f64) -> LinearStage {
    let b = gaussian_matrix(rng, n_out, rank, 1.0);
    let c = gaussian_matrix(rng, rank, n_in, 1.0 / (n_in as f64).sqrt());
    let bias = gaussian_vector(rng, n_out, 0.5);
    svd_decompose_stage(&(b * c), &bias, nu).unwrap()
}

pub struct DenseLinear {
    pub mean_in: DVector<f64>,
    pub mean_out: DVector<f64>,
    pub mean_var_in: f64,
    pub mean_var_out: f64,
}

/// Joint Gaussian solve of
/// `γ⁺/2‖x − r⁺‖² + γ⁻/2‖z − r⁻‖² + ν/2‖z − W x − b‖²`, or with `z = W x + b`
/// imposed when `nu` is infinite.
pub fn dense_linear(
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    nu: f64,
    r_plus: &DVector<f64>,
    r_minus: &DVector<f64>,
    gp: f64,
    gm: f64,
) -> DenseLinear {
    let (n_out, n_in) = w.shape();
    if nu.is_infinite() {
        let p = DMatrix::identity(n_in, n_in) * gp + w.tr_mul(w) * gm;
        let cov = p.try_inverse().unwrap();
        let mean_in = &cov * (r_plus * gp + w.tr_mul(&(r_minus - b)) * gm);
        let mean_out = w * &mean_in + b;
        let cov_out = w * &cov * w.transpose();
        return DenseLinear {
            mean_in,
            mean_out,
            mean_var_in: cov.trace() / n_in as f64,
            mean_var_out: cov_out.trace() / n_out as f64,
        };
    }
    let n = n_in + n_out;
    let mut p = DMatrix::zeros(n, n);
    p.view_mut((0, 0), (n_in, n_in))
        .copy_from(&(DMatrix::identity(n_in, n_in) * gp + w.tr_mul(w) * nu));
    p.view_mut((n_in, n_in), (n_out, n_out))
        .copy_from(&(DMatrix::identity(n_out, n_out) * (gm + nu)));
    p.view_mut((n_in, 0), (n_out, n_in)).copy_from(&(w * -nu));
    p.view_mut((0, n_in), (n_in, n_out)).copy_from(&(w.transpose() * -nu));
    let mut h = DVector::zeros(n);
    h.rows_mut(0, n_in).copy_from(&(r_plus * gp - w.tr_mul(b) * nu));
    h.rows_mut(n_in, n_out).copy_from(&(r_minus * gm + b * nu));
    let cov = p.try_inverse().unwrap();
    let mean = &cov * h;
    let d = cov.diagonal();
    DenseLinear {
        mean_in: mean.rows(0, n_in).into_owned(),
        mean_out: mean.rows(n_in, n_out).into_owned(),
        mean_var_in: d.rows(0, n_in).sum() / n_in as f64,
        mean_var_out: d.rows(n_in, n_out).sum() / n_out as f64,
    }
}

pub fn max_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Stage kinds of a linear-Gaussian chain.
#[derive(Clone, Copy)]
pub enum ChainStage {
    /// Gaussian weight matrix to the given width, noise precision ν.
    Linear(usize, f64),
    /// Identity activation with noise variance.
    Identity(f64),
}

pub fn gaussian_chain(n0: usize, kinds: &[ChainStage], seed: u64) -> NetworkSpec {
    let mut rng = rng_for(seed, 77);
    let mut dims = vec![n0];
    let mut stages = Vec::new();
    for k in kinds {
        let n_in = *dims.last().unwrap();
        match *k {
            ChainStage::Linear(n_out, nu) => {
                let w = gaussian_matrix(&mut rng, n_out, n_in, 1.0 / (n_in as f64).sqrt());
                let b = gaussian_vector(&mut rng, n_out, 0.3);
                stages.push(Stage::Linear(svd_decompose_stage(&w, &b, nu).unwrap()));
                dims.push(n_out);
            }
            ChainStage::Identity(var) => {
                stages.push(Stage::Nonlinear(NonlinearStage {
                    activation: Activation::Identity,
                    noise: ChannelNoise::Gaussian { variance: var },
                }));
                dims.push(n_in);
            }
        }
    }
    NetworkSpec::new(dims, stages).unwrap()
}

/// Posterior means and covariance diagonals of `z₀ … z_{L−1}` given `y`,
/// for a chain whose every stage is affine with Gaussian noise.
pub fn dense_chain_posterior(net: &NetworkSpec, y: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let dims = net.dims();
    let l_count = net.n_stages();
    let offsets: Vec<usize> = dims[..l_count]
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let n: usize = dims[..l_count].iter().sum();
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut h = DVector::<f64>::zeros(n);
    p.view_mut((0, 0), (dims[0], dims[0])).fill_with_identity();

    for (i, stage) in net.stages().iter().enumerate() {
        let (a, c, prec) = match stage {
            Stage::Linear(l) => (l.dense_weight(), l.bias().clone(), l.nu()),
            Stage::Nonlinear(nl) => {
                assert_eq!(nl.activation, Activation::Identity);
                let var = nl.noise.variance();
                (DMatrix::identity(dims[i], dims[i]), DVector::zeros(dims[i]), var.recip())
            }
        };
        assert!(prec.is_finite(), "every stage must be noisy");
        let (oi, di) = (offsets[i], dims[i]);
        let ata = a.tr_mul(&a) * prec;
        let mut blk = p.view_mut((oi, oi), (di, di));
        blk += ata;
        if i + 1 < l_count {
            let (oo, dout) = (offsets[i + 1], dims[i + 1]);
            let mut blk = p.view_mut((oo, oo), (dout, dout));
            blk += DMatrix::<f64>::identity(dout, dout) * prec;
            let mut blk = p.view_mut((oo, oi), (dout, di));
            blk -= &a * prec;
            let mut blk = p.view_mut((oi, oo), (di, dout));
            blk -= a.transpose() * prec;
            let mut hb = h.rows_mut(oo, dout);
            hb += &c * prec;
            let mut hb = h.rows_mut(oi, di);
            hb -= a.tr_mul(&c) * prec;
        } else {
            let mut hb = h.rows_mut(oi, di);
            hb += a.tr_mul(&(y - &c)) * prec;
        }
    }
    let cov = p.try_inverse().unwrap();
    let mean = &cov * h;
    let d = cov.diagonal();
    let means = (0..l_count).map(|i| mean.rows(offsets[i], dims[i]).into_owned()).collect();
    let vars = (0..l_count).map(|i| d.rows(offsets[i], dims[i]).into_owned()).collect();
    (means, vars)
}
