//! Representer values and the kernel-sum decomposition of predictions.
//!
//! At a stationary point `Θ₁* = Σ_i α_i f_iᵀ` with
//! `α_i = −(1/2λn) ∂L_i/∂Φ_i`, so for any test point
//! `Φ(x_t) = Σ_i α_i (f_iᵀ f_t)`. A positive term `α_ij f_iᵀ f_t` pushes the
//! class-`j` pre-activation up (excitatory), a negative one pushes it down
//! (inhibitory).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::numerics::{dot, pearson, softmax_into, DenseMatrix};
use crate::solver::{LastLayerWeights, LossKind, Objective};

/// `n_train × c` representer values together with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMatrix {
    pub alphas: DenseMatrix,
    pub lambda: f64,
    pub loss_kind: LossKind,
    /// Gradient sup-norm of the weights the alphas were derived from.
    pub source_grad_inf_norm: f64,
}

impl AlphaMatrix {
    pub fn n_train(&self) -> usize {
        self.alphas.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.alphas.cols()
    }
}

/// Representer values for certified weights.
///
/// The gradient is recomputed at `weights`; if its sup-norm exceeds
/// `grad_tol` the decomposition does not hold and `Error::Staleness` is
/// returned.
pub fn compute_alphas(
    weights: &LastLayerWeights,
    bundle: &DatasetBundle,
    loss: LossKind,
    lambda: f64,
    grad_tol: f64,
) -> Result<AlphaMatrix> {
    let alphas = compute_alphas_unchecked(weights, bundle, loss, lambda)?;
    if !(alphas.source_grad_inf_norm <= grad_tol) {
        return Err(Error::Staleness {
            grad_inf_norm: alphas.source_grad_inf_norm,
            grad_tol,
        });
    }
    Ok(alphas)
}

/// Same as [`compute_alphas`] without the stationarity gate; the measured
/// gradient norm is still recorded.
pub fn compute_alphas_unchecked(
    weights: &LastLayerWeights,
    bundle: &DatasetBundle,
    loss: LossKind,
    lambda: f64,
) -> Result<AlphaMatrix> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
    }
    let objective = Objective::new(bundle, loss, lambda)?;
    let (_, grad) = objective.value_and_grad(&weights.theta1)?;
    let mut alphas = objective.phi_gradients(&weights.theta1)?;
    let n = bundle.n_train().max(1) as f64;
    alphas.scale(-1.0 / (2.0 * lambda * n));
    Ok(AlphaMatrix {
        alphas,
        lambda,
        loss_kind: loss,
        source_grad_inf_norm: grad.inf_norm(),
    })
}

/// `Σ_i α_i f_iᵀ`, the head implied by the representer values.
pub fn implied_weights(alphas: &AlphaMatrix, train_features: &DenseMatrix) -> Result<DenseMatrix> {
    alphas.alphas.transpose().matmul(train_features)
}

/// `‖Θ₁ − Σ_i α_i f_iᵀ‖_F / max(‖Θ₁‖_F, 1e-300)`.
pub fn theta_residual(
    weights: &LastLayerWeights,
    alphas: &AlphaMatrix,
    bundle: &DatasetBundle,
) -> Result<f64> {
    let mut diff = implied_weights(alphas, &bundle.train_features)?;
    if diff.shape() != weights.theta1.shape() {
        return Err(Error::ShapeMismatch(format!(
            "alphas imply a {}x{} head, weights are {}x{}",
            diff.rows(),
            diff.cols(),
            weights.theta1.rows(),
            weights.theta1.cols()
        )));
    }
    diff.axpy(-1.0, &weights.theta1)?;
    Ok(diff.frobenius_norm() / weights.theta1.frobenius_norm().max(1e-300))
}

/// Largest decomposition residual a gradient certificate allows:
/// `Φ − Σ_i k_i = (∇/2λ) f_t`, so each entry is at most `grad_tol ‖f_t‖₁ / 2λ`.
pub fn decomposition_bound(grad_tol: f64, feature: &[f64], lambda: f64) -> f64 {
    grad_tol * feature.iter().map(|v| v.abs()).sum::<f64>() / (2.0 * lambda)
}

/// Per-training-point contribution `k(x_t, x_i, α_i) = α_i f_iᵀ f_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionVector {
    pub train_index: usize,
    pub values: Vec<f64>,
    pub similarity: f64,
}

fn check_alignment(alphas: &AlphaMatrix, bundle: &DatasetBundle) -> Result<()> {
    if alphas.n_train() != bundle.n_train() {
        return Err(Error::ShapeMismatch(format!(
            "{} alpha rows for {} training points",
            alphas.n_train(),
            bundle.n_train()
        )));
    }
    Ok(())
}

/// All `n` contribution vectors for a single feature vector `f_t`.
pub fn contributions(
    alphas: &AlphaMatrix,
    bundle: &DatasetBundle,
    feature: &[f64],
) -> Result<Vec<ContributionVector>> {
    check_alignment(alphas, bundle)?;
    if feature.len() != bundle.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature of length {} for dimension {}",
            feature.len(),
            bundle.feature_dim()
        )));
    }
    Ok((0..bundle.n_train())
        .map(|i| {
            let similarity = dot(bundle.train_features.row(i), feature);
            ContributionVector {
                train_index: i,
                values: alphas.alphas.row(i).iter().map(|a| a * similarity).collect(),
                similarity,
            }
        })
        .collect())
}

/// `Σ_i α_i f_iᵀ f_t`, accumulated in training-index order.
pub fn reconstruct_logits(
    alphas: &AlphaMatrix,
    train_features: &DenseMatrix,
    feature: &[f64],
) -> Vec<f64> {
    let c = alphas.num_classes();
    let mut out = vec![0.0; c];
    for i in 0..train_features.rows() {
        let s = dot(train_features.row(i), feature);
        for (o, a) in out.iter_mut().zip(alphas.alphas.row(i)) {
            *o += a * s;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedContribution {
    pub index: usize,
    pub k: f64,
}

/// Ranked excitatory and inhibitory training points for one test point and class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub test_index: usize,
    pub class: usize,
    /// `k > 0`, largest first; ties by ascending index.
    pub excitatory: Vec<RankedContribution>,
    /// `k < 0`, most negative first; ties by ascending index.
    pub inhibitory: Vec<RankedContribution>,
    /// `|Φ_j(x_t) − Σ_i k_j|`.
    pub residual: f64,
}

pub fn explain(
    weights: &LastLayerWeights,
    alphas: &AlphaMatrix,
    bundle: &DatasetBundle,
    test_index: usize,
    class: usize,
    top_k: usize,
) -> Result<Explanation> {
    if test_index >= bundle.n_test() {
        return Err(Error::IndexOutOfRange {
            index: test_index,
            len: bundle.n_test(),
        });
    }
    explain_feature(
        weights,
        alphas,
        bundle,
        bundle.test_features.row(test_index),
        test_index,
        class,
        top_k,
    )
}

/// [`explain`] for an arbitrary feature vector; `test_index` is only echoed.
pub fn explain_feature(
    weights: &LastLayerWeights,
    alphas: &AlphaMatrix,
    bundle: &DatasetBundle,
    feature: &[f64],
    test_index: usize,
    class: usize,
    top_k: usize,
) -> Result<Explanation> {
    if class >= alphas.num_classes() {
        return Err(Error::IndexOutOfRange {
            index: class,
            len: alphas.num_classes(),
        });
    }
    if weights.theta1.shape() != (alphas.num_classes(), bundle.feature_dim()) {
        return Err(Error::ShapeMismatch(
            "weights do not match alphas and features".into(),
        ));
    }
    let contribs = contributions(alphas, bundle, feature)?;
    let ks: Vec<(usize, f64)> = contribs
        .iter()
        .map(|cv| (cv.train_index, cv.values[class]))
        .collect();
    let total: f64 = ks.iter().map(|(_, k)| k).sum();
    let actual = dot(weights.theta1.row(class), feature);

    let mut positive: Vec<(usize, f64)> = ks.iter().copied().filter(|(_, k)| *k > 0.0).collect();
    positive.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut negative: Vec<(usize, f64)> = ks.iter().copied().filter(|(_, k)| *k < 0.0).collect();
    negative.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));

    let take = |v: Vec<(usize, f64)>| -> Vec<RankedContribution> {
        v.into_iter()
            .take(top_k)
            .map(|(index, k)| RankedContribution { index, k })
            .collect()
    };
    Ok(Explanation {
        test_index,
        class,
        excitatory: take(positive),
        inhibitory: take(negative),
        residual: (actual - total).abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub split: Split,
    /// Per-point correlation over classes; `None` where it is undefined
    /// (a constant softmax vector).
    pub per_point_pearson: Vec<Option<f64>>,
    pub pooled_pearson: f64,
    pub skipped_points: usize,
    /// Set when the alphas came from weights that are not certified stationary.
    pub staleness_warning: Option<String>,
}

/// Correlation between actual softmax outputs `σ(Θ₁ f_t)` and the
/// reconstruction `σ(Σ_i k(x_t, x_i, α_i))`, per point and pooled over all
/// (point, class) pairs.
pub fn fidelity_report(
    weights: &LastLayerWeights,
    alphas: &AlphaMatrix,
    bundle: &DatasetBundle,
    split: Split,
    grad_tol: f64,
) -> Result<FidelityReport> {
    check_alignment(alphas, bundle)?;
    let feats = bundle.features(split);
    let c = alphas.num_classes();
    let mut actual = vec![0.0; c];
    let mut approx = vec![0.0; c];
    let mut pooled_actual = Vec::with_capacity(feats.rows() * c);
    let mut pooled_approx = Vec::with_capacity(feats.rows() * c);
    let mut per_point = Vec::with_capacity(feats.rows());
    let mut skipped = 0;
    for t in 0..feats.rows() {
        let f = feats.row(t);
        softmax_into(&weights.logits_for(f), &mut actual);
        softmax_into(&reconstruct_logits(alphas, &bundle.train_features, f), &mut approx);
        match pearson(&actual, &approx) {
            Ok(r) => per_point.push(Some(r)),
            Err(Error::DegenerateInput(_)) => {
                skipped += 1;
                per_point.push(None);
            }
            Err(e) => return Err(e),
        }
        pooled_actual.extend_from_slice(&actual);
        pooled_approx.extend_from_slice(&approx);
    }
    let pooled_pearson = if pooled_actual == pooled_approx {
        1.0
    } else {
        pearson(&pooled_actual, &pooled_approx)?
    };
    let staleness_warning = (!(alphas.source_grad_inf_norm <= grad_tol)).then(|| {
        Error::Staleness {
            grad_inf_norm: alphas.source_grad_inf_norm,
            grad_tol,
        }
        .to_string()
    });
    Ok(FidelityReport {
        split,
        per_point_pearson: per_point,
        pooled_pearson,
        skipped_points: skipped,
        staleness_warning,
    })
}

/// Training indices ordered by `|α_{i, y_i}|`, largest first; ties by index.
pub fn global_importance(alphas: &AlphaMatrix, labels: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..alphas.n_train().min(labels.len())).collect();
    let score = |i: usize| alphas.alphas.get(i, labels[i]).abs();
    order.sort_by(|&a, &b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}
