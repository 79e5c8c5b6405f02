//! Gaussian quadrature rules built with the Golub–Welsch eigenvalue method.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Nodes and weights of an n-point Gaussian rule.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    fn golub_welsch(n: usize, offdiag: impl Fn(usize) -> f64, mu0: f64) -> Self {
        assert!(n >= 1);
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = offdiag(k);
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], mu0 * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // The rules are symmetric; enforce it exactly.
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let x = 0.5 * (pairs[j].0 - pairs[i].0);
            let w = 0.5 * (pairs[i].1 + pairs[j].1);
            pairs[i] = (-x, w);
            pairs[j] = (x, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        GaussRule {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Rule for ∫ f(x) φ(x) dx with φ the standard normal density.
    pub fn hermite(n: usize) -> Self {
        let mut rule = Self::golub_welsch(n, |k| (k as f64).sqrt(), 1.0);
        let total: f64 = rule.weights.iter().sum();
        rule.weights.iter_mut().for_each(|w| *w /= total);
        rule
    }

    /// Rule for ∫_{-1}^{1} f(x) dx.
    pub fn legendre(n: usize) -> Self {
        Self::golub_welsch(
            n,
            |k| {
                let k = k as f64;
                k / (4.0 * k * k - 1.0).sqrt()
            },
            2.0,
        )
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// The 63-node Hermite rule used by the scalar denoisers.
pub fn hermite63() -> &'static GaussRule {
    static RULE: OnceLock<GaussRule> = OnceLock::new();
    RULE.get_or_init(|| GaussRule::hermite(63))
}

fn legendre16() -> &'static GaussRule {
    static RULE: OnceLock<GaussRule> = OnceLock::new();
    RULE.get_or_init(|| GaussRule::legendre(16))
}

/// Expectation of `f(Z)` with `Z ~ N(mean, var)` by Gauss–Hermite.
pub fn gaussian_expectation<const K: usize>(
    rule: &GaussRule,
    mean: f64,
    var: f64,
    mut f: impl FnMut(f64) -> [f64; K],
) -> [f64; K] {
    let sd = var.max(0.0).sqrt();
    let mut acc = [0.0; K];
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let v = f(mean + sd * x);
        for k in 0..K {
            acc[k] += w * v[k];
        }
    }
    acc
}

fn panel_sum<const K: usize>(
    f: &mut impl FnMut(f64) -> [f64; K],
    a: f64,
    b: f64,
    panels: usize,
) -> [f64; K] {
    let rule = legendre16();
    let h = (b - a) / panels as f64;
    let mut acc = [0.0; K];
    for p in 0..panels {
        let lo = a + h * p as f64;
        let half = 0.5 * h;
        let mid = lo + half;
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            let v = f(mid + half * x);
            for k in 0..K {
                acc[k] += half * w * v[k];
            }
        }
    }
    acc
}

/// Composite 16-point Gauss–Legendre on [a, b], doubling the panel count
/// until the first component converges to `rel_tol`.
pub fn integrate_adaptive<const K: usize>(
    mut f: impl FnMut(f64) -> [f64; K],
    a: f64,
    b: f64,
    rel_tol: f64,
) -> Result<[f64; K]> {
    if b <= a {
        return Ok([0.0; K]);
    }
    let mut panels = 4;
    let mut prev = panel_sum(&mut f, a, b, panels);
    let mut estimate = f64::INFINITY;
    while panels <= 4096 {
        panels *= 2;
        let next = panel_sum(&mut f, a, b, panels);
        let scale = next[0].abs().max(f64::MIN_POSITIVE);
        estimate = (next[0] - prev[0]).abs() / scale;
        // higher moments must settle too, relative to their own size
        let settled = (1..K).all(|k| {
            (next[k] - prev[k]).abs() <= rel_tol * (next[k].abs() + next[0].abs())
        });
        if estimate <= rel_tol && settled {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Quadrature {
        what: format!("composite Gauss-Legendre on [{a:.4e}, {b:.4e}]"),
        estimate,
        tolerance: rel_tol,
    })
}

fn panel<const K: usize>(f: &mut impl FnMut(f64) -> [f64; K], a: f64, b: f64) -> [f64; K] {
    panel_sum(f, a, b, 1)
}

/// Breakpoints on `[lo, hi]` that bracket each `(center, width)` feature at
/// a few multiples of its width.
pub fn feature_breaks(lo: f64, hi: f64, features: &[(f64, f64)]) -> Vec<f64> {
    let mut b = vec![lo, hi];
    for &(c, w) in features {
        if !(c.is_finite() && w.is_finite() && w > 0.0) {
            continue;
        }
        for k in [-8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0] {
            let x = c + k * w;
            if x > lo && x < hi {
                b.push(x);
            }
        }
    }
    b.sort_by(f64::total_cmp);
    b.dedup();
    b
}

/// One 16-point Gauss–Legendre panel per interval between consecutive
/// `breaks`, each split into `sub` equal parts.
pub fn integrate_panels<const K: usize>(mut f: impl FnMut(f64) -> [f64; K], breaks: &[f64], sub: usize) -> [f64; K] {
    let mut acc = [0.0; K];
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            let v = panel_sum(&mut f, w[0], w[1], sub.max(1));
            for k in 0..K {
                acc[k] += v[k];
            }
        }
    }
    acc
}

/// Recursive bisection with a 16-point Gauss–Legendre rule on each panel,
/// for integrands with features much narrower than the interval. Narrow
/// features must be bracketed by `breaks` (see [`feature_breaks`]), otherwise
/// the first panels can miss them entirely. A panel is
/// accepted once splitting it changes every component by at most
/// `rel_tol` times that component's coarse global magnitude.
pub fn integrate_recursive<const K: usize>(
    mut f: impl FnMut(f64) -> [f64; K],
    breaks: &[f64],
    rel_tol: f64,
) -> Result<[f64; K]> {
    let mut acc = [0.0; K];
    if breaks.len() < 2 {
        return Ok(acc);
    }
    // coarse magnitude per component from 4 panels per interval
    let mut scale = [0.0f64; K];
    for w in breaks.windows(2) {
        let c = panel_sum(&mut f, w[0], w[1], 4);
        for k in 0..K {
            scale[k] += c[k].abs();
        }
    }
    let tol: [f64; K] = std::array::from_fn(|k| rel_tol * scale[k].max(f64::MIN_POSITIVE));
    let mut stack: Vec<(f64, f64, [f64; K], u32)> = Vec::new();
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            let whole = panel(&mut f, w[0], w[1]);
            stack.push((w[0], w[1], whole, 0));
        }
    }
    let mut worst = 0.0f64;
    while let Some((a, b, whole, depth)) = stack.pop() {
        let m = 0.5 * (a + b);
        let left = panel(&mut f, a, m);
        let right = panel(&mut f, m, b);
        let split: [f64; K] = std::array::from_fn(|k| left[k] + right[k]);
        // width-weighted share of the tolerance
        let share = (b - a) / (breaks[breaks.len() - 1] - breaks[0]);
        let ok = (0..K).all(|k| (split[k] - whole[k]).abs() <= (tol[k] * share).max(1e-300));
        if ok || depth >= 40 {
            if !ok {
                let rel = (0..K)
                    .map(|k| (split[k] - whole[k]).abs() / tol[k] * rel_tol)
                    .fold(0.0, f64::max);
                worst = worst.max(rel);
            }
            for k in 0..K {
                acc[k] += split[k];
            }
        } else {
            stack.push((a, m, left, depth + 1));
            stack.push((m, b, right, depth + 1));
        }
    }
    if worst > 10.0 * rel_tol {
        return Err(Error::Quadrature {
            what: format!("recursive Gauss-Legendre on [{:.4e}, {:.4e}]", breaks[0], breaks[breaks.len() - 1]),
            estimate: worst,
            tolerance: rel_tol,
        });
    }
    Ok(acc)
}
