//! Posterior of the normal scale-mixture variable given a Gaussian quadratic form.

use super::generator::{Generator, Mixing};
use super::special::log_sum_exp;

/// h(s), h'(s), h''(s) for s = log W, up to an additive constant, where
/// h(s) = log p_W(e^s) + s − (d/2)s − q e^{−s}/2.
fn log_post(m: Mixing, s: f64, q: f64, d: f64) -> (f64, f64, f64) {
    let e = (-s).exp();
    match m {
        Mixing::Degenerate => (0.0, 0.0, -1.0),
        Mixing::Exponential => {
            let es = s.exp();
            let a = 1.0 - d / 2.0;
            (-es + a * s - 0.5 * q * e, -es + a + 0.5 * q * e, -es - 0.5 * q * e)
        }
        Mixing::InverseChiSquare(nu) => {
            let a = 0.5 * (nu + d);
            let b = 0.5 * (nu + q);
            (-a * s - b * e, -a + b * e, -b * e)
        }
    }
}

/// Quadrature nodes `(√w, log weight)` for E[f(√W) | q, d] under the generator's mixing law,
/// from a Gauss–Hermite rule centred at the Laplace approximation in log W.
/// Weights are self-normalized; a degenerate mixing returns the single node (1, 0).
pub fn mixing_nodes(g: Generator, q: f64, d: usize, gh: &(Vec<f64>, Vec<f64>)) -> Vec<(f64, f64)> {
    let m = g.mixing();
    if m == Mixing::Degenerate {
        return vec![(1.0, 0.0)];
    }
    let d = d as f64;
    let mut s = match m {
        Mixing::InverseChiSquare(nu) => ((nu + q) / (nu + d)).ln(),
        _ => 0.0,
    };
    for _ in 0..100 {
        let (_, h1, h2) = log_post(m, s, q, d);
        let step = (h1 / h2).clamp(-2.0, 2.0);
        s -= step;
        if step.abs() < 1e-12 {
            break;
        }
    }
    let sd = 1.0 / (-log_post(m, s, q, d).2).sqrt();
    let mut out: Vec<(f64, f64)> = gh
        .0
        .iter()
        .zip(&gh.1)
        .map(|(&x, &w)| {
            let si = s + sd * x;
            (si, w.ln() + log_post(m, si, q, d).0 + 0.5 * x * x)
        })
        .collect();
    let lw: Vec<f64> = out.iter().map(|p| p.1).collect();
    let norm = log_sum_exp(&lw);
    for p in &mut out {
        p.0 = (0.5 * p.0).exp();
        p.1 -= norm;
    }
    out
}
