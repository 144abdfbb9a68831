//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerics; inputs and outputs are plain vectors.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug)]
pub enum RefLoss {
    Ce,
    Softmax,
    Relu,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn lse(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `Φ = Θ f` with `Θ` row-major `c×f`.
pub fn logits(theta: &[f64], c: usize, f: &[f64]) -> Vec<f64> {
    (0..c)
        .map(|j| (0..f.len()).map(|k| theta[j * f.len() + k] * f[k]).sum())
        .collect()
}

/// `(1/n) Σ L_i + λ‖Θ‖²`, written directly from the loss definitions.
pub fn objective(
    theta: &[f64],
    c: usize,
    feats: &[Vec<f64>],
    labels: &[usize],
    given: &[Vec<f64>],
    loss: RefLoss,
    lambda: f64,
) -> f64 {
    let n = feats.len() as f64;
    let mut total = 0.0;
    for (i, f) in feats.iter().enumerate() {
        let phi = logits(theta, c, f);
        total += match loss {
            RefLoss::Ce => lse(&phi) - phi[labels[i]],
            RefLoss::Softmax => {
                let q = softmax(&given[i]);
                lse(&phi) - q.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>()
            }
            RefLoss::Relu => phi
                .iter()
                .zip(&given[i])
                .map(|(&p, &g)| 0.5 * p.max(0.0) * p - g.max(0.0) * p)
                .sum(),
        };
    }
    total / n + lambda * theta.iter().map(|t| t * t).sum::<f64>()
}

/// Central differences with step `h` of any scalar function.
pub fn central_diff(x: &[f64], h: f64, func: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut p = x.to_vec();
            p[k] += h;
            let mut m = x.to_vec();
            m[k] -= h;
            (func(&p) - func(&m)) / (2.0 * h)
        })
        .collect()
}

/// `|a − e| ≤ rel · max(|a|, |e|, floor)`.
pub fn close(a: f64, e: f64, rel: f64, floor: f64) -> bool {
    (a - e).abs() <= rel * a.abs().max(e.abs()).max(floor)
}

/// Dense Hessian of the weighted cross-entropy objective
/// `(1/n) Σ w_i CE_i + λ‖Θ‖²` plus `damping·I`.
pub fn ce_hessian(
    theta: &[f64],
    c: usize,
    feats: &[Vec<f64>],
    weights: &[f64],
    lambda: f64,
    damping: f64,
) -> DMatrix<f64> {
    let d = feats[0].len();
    let p_dim = c * d;
    let n = feats.len() as f64;
    let mut h = DMatrix::zeros(p_dim, p_dim);
    for (i, f) in feats.iter().enumerate() {
        let p = softmax(&logits(theta, c, f));
        for j in 0..c {
            for l in 0..c {
                let a = (if j == l { p[j] } else { 0.0 } - p[j] * p[l]) * weights[i] / n;
                for k in 0..d {
                    for m in 0..d {
                        h[(j * d + k, l * d + m)] += a * f[k] * f[m];
                    }
                }
            }
        }
    }
    for k in 0..p_dim {
        h[(k, k)] += 2.0 * lambda + damping;
    }
    h
}

pub fn ce_point_grad(theta: &[f64], c: usize, f: &[f64], y: usize) -> Vec<f64> {
    let mut p = softmax(&logits(theta, c, f));
    p[y] -= 1.0;
    let mut g = Vec::with_capacity(c * f.len());
    for pj in &p {
        for fk in f {
            g.push(pj * fk);
        }
    }
    g
}

pub fn ce_loss(theta: &[f64], c: usize, f: &[f64], y: usize) -> f64 {
    let phi = logits(theta, c, f);
    lse(&phi) - phi[y]
}

/// Newton's method on the weighted cross-entropy objective, from zero, to a
/// gradient norm of 1e-14.
pub fn newton_weighted_ce(
    c: usize,
    feats: &[Vec<f64>],
    labels: &[usize],
    weights: &[f64],
    lambda: f64,
) -> Vec<f64> {
    let d = feats[0].len();
    let n = feats.len() as f64;
    let mut theta = vec![0.0; c * d];
    for _ in 0..200 {
        let mut g = DVector::from_iterator(c * d, theta.iter().map(|t| 2.0 * lambda * t));
        for (i, f) in feats.iter().enumerate() {
            for (k, v) in ce_point_grad(&theta, c, f, labels[i]).into_iter().enumerate() {
                g[k] += weights[i] * v / n;
            }
        }
        if g.norm() < 1e-14 {
            break;
        }
        let h = ce_hessian(&theta, c, feats, weights, lambda, 0.0);
        let step = h.cholesky().expect("objective is strongly convex").solve(&g);
        for (t, s) in theta.iter_mut().zip(step.iter()) {
            *t -= s;
        }
    }
    theta
}

/// Influence of each training point on the test loss by re-solving with the
/// point's weight raised to `1 + eps`: returns `n · ΔL_test / eps`, which is
/// the scale of `−∇L_testᵀ H⁻¹ ∇L_i` for the unweighted mean objective.
pub fn upweighting_influence(
    c: usize,
    feats: &[Vec<f64>],
    labels: &[usize],
    lambda: f64,
    test_f: &[f64],
    test_y: usize,
    eps: f64,
) -> Vec<f64> {
    let n = feats.len();
    let base = newton_weighted_ce(c, feats, labels, &vec![1.0; n], lambda);
    let base_loss = ce_loss(&base, c, test_f, test_y);
    (0..n)
        .map(|i| {
            let mut w = vec![1.0; n];
            w[i] = 1.0 + eps;
            let theta = newton_weighted_ce(c, feats, labels, &w, lambda);
            n as f64 * (ce_loss(&theta, c, test_f, test_y) - base_loss) / eps
        })
        .collect()
}

/// Plain fixed-step gradient descent on the reference objective, with the
/// gradient taken analytically from the same definitions.
pub fn plain_gd_ce(
    c: usize,
    feats: &[Vec<f64>],
    labels: &[usize],
    lambda: f64,
    step: f64,
    iters: usize,
) -> Vec<f64> {
    let d = feats[0].len();
    let n = feats.len() as f64;
    let mut theta = vec![0.0; c * d];
    for _ in 0..iters {
        let mut g: Vec<f64> = theta.iter().map(|t| 2.0 * lambda * t).collect();
        for (i, f) in feats.iter().enumerate() {
            for (k, v) in ce_point_grad(&theta, c, f, labels[i]).into_iter().enumerate() {
                g[k] += v / n;
            }
        }
        for (t, gk) in theta.iter_mut().zip(&g) {
            *t -= step * gk;
        }
    }
    theta
}
