//! Last-layer influence functions for the cross-entropy objective.
//!
//! `influence(i, t) = −⟨∇L_t, H⁻¹ ∇L_i⟩` over the flattened `c×f` gradient,
//! with `H = (1/n) Σ_i (diag p_i − p_i p_iᵀ) ⊗ f_i f_iᵀ + (2λ + damping) I`.
//! `H` is never materialized; products are formed point by point and the
//! inverse is applied by conjugate gradients.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_into, DenseMatrix};
use crate::representer::AlphaMatrix;
use crate::solver::{project, LastLayerWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    pub damping: f64,
    pub cg_tol: f64,
    /// `None` means ten times the parameter count.
    pub cg_max_iters: Option<usize>,
    /// Regularization strength the weights were trained with.
    pub lambda: f64,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            damping: 1e-3,
            cg_tol: 1e-8,
            cg_max_iters: None,
            lambda: 1e-2,
        }
    }
}

impl InfluenceConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("damping and lambda must be non-negative".into()));
        }
        if !(2.0 * self.lambda + self.damping > 0.0) {
            return Err(Error::InvalidConfig(
                "2 lambda + damping must be positive for a definite Hessian".into(),
            ));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::InvalidConfig("cg_tol must be positive".into()));
        }
        Ok(())
    }

    fn shift(&self) -> f64 {
        2.0 * self.lambda + self.damping
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub test_index: usize,
    pub values: Vec<f64>,
    pub max_abs: f64,
    pub zero_fraction: f64,
    pub damping: f64,
    pub cg_tol: f64,
}

impl InfluenceReport {
    fn new(test_index: usize, values: Vec<f64>, config: &InfluenceConfig) -> Self {
        let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let zeros = values.iter().filter(|v| **v == 0.0).count();
        Self {
            test_index,
            max_abs,
            zero_fraction: if values.is_empty() {
                0.0
            } else {
                zeros as f64 / values.len() as f64
            },
            values,
            damping: config.damping,
            cg_tol: config.cg_tol,
        }
    }
}

/// Cross-entropy gradient in `Θ₁` at a single point: `(σ(Θ₁ f) − onehot(y)) fᵀ`.
pub fn loss_grad_theta1(weights: &LastLayerWeights, feature: &[f64], label: usize) -> DenseMatrix {
    let (c, f) = weights.theta1.shape();
    let logits = weights.logits_for(feature);
    let mut p = vec![0.0; c];
    softmax_into(&logits, &mut p);
    p[label] -= 1.0;
    let mut g = DenseMatrix::zeros(c, f);
    for (j, pj) in p.iter().enumerate() {
        for (gjk, fk) in g.row_mut(j).iter_mut().zip(feature) {
            *gjk = pj * fk;
        }
    }
    g
}

fn train_probabilities(weights: &LastLayerWeights, bundle: &DatasetBundle) -> DenseMatrix {
    let mut probs = project(&bundle.train_features, &weights.theta1);
    let c = probs.cols();
    let mut row = vec![0.0; c];
    for i in 0..probs.rows() {
        softmax_into(probs.row(i), &mut row);
        probs.row_mut(i).copy_from_slice(&row);
    }
    probs
}

fn hvp_with(
    v: &DenseMatrix,
    probs: &DenseMatrix,
    features: &DenseMatrix,
    shift: f64,
) -> DenseMatrix {
    let (c, f) = v.shape();
    let n = features.rows();
    let mut out = v.scaled(shift);
    if n == 0 {
        return out;
    }
    let inv_n = 1.0 / n as f64;
    let mut u = vec![0.0; c];
    for i in 0..n {
        let fi = features.row(i);
        let p = probs.row(i);
        for (j, uj) in u.iter_mut().enumerate() {
            *uj = dot(v.row(j), fi);
        }
        let pu = dot(p, &u);
        for j in 0..c {
            let w = p[j] * (u[j] - pu) * inv_n;
            if w != 0.0 {
                for (o, fk) in out.row_mut(j)[..f].iter_mut().zip(fi) {
                    *o += w * fk;
                }
            }
        }
    }
    out
}

fn check_direction(v: &DenseMatrix, weights: &LastLayerWeights) -> Result<()> {
    if v.shape() != weights.theta1.shape() {
        return Err(Error::ShapeMismatch(format!(
            "direction is {}x{}, weights are {}x{}",
            v.rows(),
            v.cols(),
            weights.theta1.rows(),
            weights.theta1.cols()
        )));
    }
    Ok(())
}

/// Hessian-vector product of the training objective (plus damping).
pub fn hvp(
    v: &DenseMatrix,
    weights: &LastLayerWeights,
    bundle: &DatasetBundle,
    config: &InfluenceConfig,
) -> Result<DenseMatrix> {
    check_direction(v, weights)?;
    let probs = train_probabilities(weights, bundle);
    Ok(hvp_with(v, &probs, &bundle.train_features, config.shift()))
}

fn conjugate_gradient(
    v: &DenseMatrix,
    apply: impl Fn(&DenseMatrix) -> DenseMatrix,
    tol: f64,
    max_iters: usize,
) -> Result<DenseMatrix> {
    let target = tol * v.frobenius_norm();
    let mut x = DenseMatrix::zeros(v.rows(), v.cols());
    if target == 0.0 {
        return Ok(x);
    }
    let mut r = v.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r)?;
    for _ in 0..max_iters {
        if rr.sqrt() <= target {
            return Ok(x);
        }
        let hp = apply(&p);
        let php = p.dot(&hp)?;
        if !(php > 0.0) {
            break;
        }
        let step = rr / php;
        x.axpy(step, &p)?;
        r.axpy(-step, &hp)?;
        let rr_next = r.dot(&r)?;
        let beta = rr_next / rr;
        rr = rr_next;
        p.scale(beta);
        p.axpy(1.0, &r)?;
    }
    // the recurrence residual drifts; decide on the true one
    let mut true_r = apply(&x);
    true_r.axpy(-1.0, v)?;
    let residual = true_r.frobenius_norm();
    if residual <= target {
        Ok(x)
    } else {
        Err(Error::CgNoConvergence {
            iterations: max_iters,
            residual: residual / v.frobenius_norm(),
        })
    }
}

/// Solves `H x = v` by conjugate gradients to `‖Hx − v‖ ≤ cg_tol ‖v‖`.
pub fn inverse_hvp(
    v: &DenseMatrix,
    weights: &LastLayerWeights,
    bundle: &DatasetBundle,
    config: &InfluenceConfig,
) -> Result<DenseMatrix> {
    InfluenceEngine::new(weights, bundle, *config)?.inverse_hvp(v)
}

/// Influence computations against one fitted head, with the training
/// softmax outputs and per-test inverse-HVP solves cached.
pub struct InfluenceEngine<'a> {
    weights: &'a LastLayerWeights,
    bundle: &'a DatasetBundle,
    config: InfluenceConfig,
    probs: DenseMatrix,
    test_solves: Mutex<HashMap<usize, Arc<DenseMatrix>>>,
}

impl<'a> InfluenceEngine<'a> {
    pub fn new(
        weights: &'a LastLayerWeights,
        bundle: &'a DatasetBundle,
        config: InfluenceConfig,
    ) -> Result<Self> {
        config.validate()?;
        if weights.theta1.shape() != (bundle.num_classes(), bundle.feature_dim()) {
            return Err(Error::ShapeMismatch(
                "weights do not match the bundle's classes and features".into(),
            ));
        }
        Ok(Self {
            weights,
            bundle,
            config,
            probs: train_probabilities(weights, bundle),
            test_solves: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &InfluenceConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.theta1.rows() * self.weights.theta1.cols()
    }

    pub fn hvp(&self, v: &DenseMatrix) -> Result<DenseMatrix> {
        check_direction(v, self.weights)?;
        Ok(hvp_with(v, &self.probs, &self.bundle.train_features, self.config.shift()))
    }

    pub fn inverse_hvp(&self, v: &DenseMatrix) -> Result<DenseMatrix> {
        check_direction(v, self.weights)?;
        let max_iters = self
            .config
            .cg_max_iters
            .unwrap_or(10 * self.parameter_count().max(1));
        conjugate_gradient(
            v,
            |p| hvp_with(p, &self.probs, &self.bundle.train_features, self.config.shift()),
            self.config.cg_tol,
            max_iters,
        )
    }

    pub fn point_grad(&self, split: Split, index: usize) -> Result<DenseMatrix> {
        let feats = self.bundle.features(split);
        if index >= feats.rows() {
            return Err(Error::IndexOutOfRange {
                index,
                len: feats.rows(),
            });
        }
        Ok(loss_grad_theta1(
            self.weights,
            feats.row(index),
            self.bundle.labels(split)[index],
        ))
    }

    /// `H⁻¹ ∇L_t` for test point `t`, solved once and reused.
    pub fn test_solve(&self, test_index: usize) -> Result<Arc<DenseMatrix>> {
        if let Some(hit) = self.test_solves.lock().unwrap().get(&test_index) {
            return Ok(Arc::clone(hit));
        }
        let g = self.point_grad(Split::Test, test_index)?;
        let solved = Arc::new(self.inverse_hvp(&g)?);
        self.test_solves
            .lock()
            .unwrap()
            .insert(test_index, Arc::clone(&solved));
        Ok(solved)
    }

    pub fn influence(&self, train_index: usize, test_index: usize) -> Result<f64> {
        let s = self.test_solve(test_index)?;
        let g = self.point_grad(Split::Train, train_index)?;
        Ok(-s.dot(&g)?)
    }

    /// Influence of every training point on one test point.
    pub fn report(&self, test_index: usize) -> Result<InfluenceReport> {
        let s = self.test_solve(test_index)?;
        let values = (0..self.bundle.n_train())
            .map(|i| Ok(-s.dot(&self.point_grad(Split::Train, i)?)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(InfluenceReport::new(test_index, values, &self.config))
    }

    /// `influence(i, i)` on the training loss for every training point.
    pub fn self_influence(&self) -> Result<Vec<f64>> {
        (0..self.bundle.n_train())
            .map(|i| {
                let g = self.point_grad(Split::Train, i)?;
                let s = self.inverse_hvp(&g)?;
                Ok(-s.dot(&g)?)
            })
            .collect()
    }
}

/// Single influence value; see [`InfluenceEngine`] to reuse solves.
pub fn influence(
    train_index: usize,
    test_index: usize,
    weights: &LastLayerWeights,
    bundle: &DatasetBundle,
    config: &InfluenceConfig,
) -> Result<f64> {
    InfluenceEngine::new(weights, bundle, *config)?.influence(train_index, test_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueMethod {
    Influence,
    Representer,
}

/// Log-scale histogram of non-zero magnitudes plus an exact-zero bin.
///
/// Bins span four decades each: `counts[k]` covers
/// `[bin_edges[k], bin_edges[k + 1])`. Exact zeros are reported only through
/// `zero_count` / `zero_fraction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub zero_fraction: f64,
    pub zero_count: usize,
    pub total: usize,
}

const DECADES_PER_BIN: i32 = 4;

impl ValueHistogram {
    pub fn from_values(values: &[f64]) -> Self {
        let mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        let zero_count = mags.iter().filter(|v| **v == 0.0).count();
        let bin_of = |v: f64| (v.log10() / DECADES_PER_BIN as f64).floor() as i32;
        let nonzero: Vec<i32> = mags.iter().filter(|v| **v > 0.0).map(|v| bin_of(*v)).collect();
        let (bin_edges, counts) = match (nonzero.iter().min(), nonzero.iter().max()) {
            (Some(&lo), Some(&hi)) => {
                let mut counts = vec![0; (hi - lo + 1) as usize];
                for b in &nonzero {
                    counts[(b - lo) as usize] += 1;
                }
                let edges = (lo..=hi + 1)
                    .map(|b| 10f64.powi(b * DECADES_PER_BIN))
                    .collect();
                (edges, counts)
            }
            _ => (Vec::new(), Vec::new()),
        };
        Self {
            bin_edges,
            counts,
            zero_fraction: if mags.is_empty() {
                0.0
            } else {
                zero_count as f64 / mags.len() as f64
            },
            zero_count,
            total: mags.len(),
        }
    }
}

/// Representer contributions `k_j(x_t, x_i)` of every training point for
/// the class the head predicts at test point `t`.
pub fn representer_values(
    weights: &LastLayerWeights,
    alphas: &AlphaMatrix,
    bundle: &DatasetBundle,
    test_index: usize,
) -> Result<Vec<f64>> {
    if test_index >= bundle.n_test() {
        return Err(Error::IndexOutOfRange {
            index: test_index,
            len: bundle.n_test(),
        });
    }
    let f_t = bundle.test_features.row(test_index);
    let logits = weights.logits_for(f_t);
    let class = argmax(&logits);
    Ok((0..bundle.n_train())
        .map(|i| alphas.alphas.get(i, class) * dot(bundle.train_features.row(i), f_t))
        .collect())
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = j;
        }
    }
    best
}

/// Histogram of per-test-point maxima of `|value|` over the training set.
pub fn value_distribution(
    test_indices: &[usize],
    weights: &LastLayerWeights,
    alphas: Option<&AlphaMatrix>,
    bundle: &DatasetBundle,
    config: &InfluenceConfig,
    method: ValueMethod,
) -> Result<ValueHistogram> {
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let maxima = match method {
        ValueMethod::Influence => {
            let engine = InfluenceEngine::new(weights, bundle, *config)?;
            test_indices
                .iter()
                .map(|&t| Ok(engine.report(t)?.max_abs))
                .collect::<Result<Vec<_>>>()?
        }
        ValueMethod::Representer => {
            let alphas = alphas.ok_or_else(|| {
                Error::InvalidConfig("representer distribution needs alphas".into())
            })?;
            test_indices
                .iter()
                .map(|&t| Ok(max_abs(&representer_values(weights, alphas, bundle, t)?)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(ValueHistogram::from_values(&maxima))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::GaussianClasses;
    use proptest::prelude::*;

    fn small_instance(seed: u64, n: usize, f: usize, c: usize) -> (LastLayerWeights, DatasetBundle) {
        let b = GaussianClasses {
            n_train: n,
            n_test: 3,
            feature_dim: f,
            num_classes: c,
            separation: 1.0,
            noise: 1.0,
            seed,
        }
        .generate()
        .unwrap();
        (LastLayerWeights::random(c, f, 0.7, seed + 100), b)
    }

    /// Explicit `(c·f)²` Hessian, row-major flattening of `Θ₁`.
    fn dense_hessian(w: &LastLayerWeights, b: &DatasetBundle, shift: f64) -> Vec<Vec<f64>> {
        let (c, f) = w.theta1.shape();
        let p_dim = c * f;
        let mut h = vec![vec![0.0; p_dim]; p_dim];
        let n = b.n_train() as f64;
        for i in 0..b.n_train() {
            let fi = b.train_features.row(i);
            let logits = w.logits_for(fi);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|x| x / s).collect();
            for j in 0..c {
                for l in 0..c {
                    let a = if j == l { p[j] } else { 0.0 } - p[j] * p[l];
                    for k in 0..f {
                        for m in 0..f {
                            h[j * f + k][l * f + m] += a * fi[k] * fi[m] / n;
                        }
                    }
                }
            }
        }
        for (d, row) in h.iter_mut().enumerate() {
            row[d] += shift;
        }
        h
    }

    fn random_direction(c: usize, f: usize, seed: u64) -> DenseMatrix {
        LastLayerWeights::random(c, f, 1.0, seed).theta1
    }

    #[test]
    fn closed_form_gradient() {
        let w = LastLayerWeights::zeros(2, 2);
        let g = loss_grad_theta1(&w, &[1.0, 0.0], 0);
        assert_eq!(g, DenseMatrix::from_rows(&[[-0.5, 0.0], [0.5, 0.0]]).unwrap());
    }

    #[test]
    fn saturated_point_has_negligible_gradient() {
        let w = LastLayerWeights {
            theta1: DenseMatrix::from_rows(&[[50.0, 0.0], [-50.0, 0.0]]).unwrap(),
        };
        let g = loss_grad_theta1(&w, &[1.0, 0.3], 0);
        assert!(g.frobenius_norm() <= 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (w, b) = small_instance(seed, 5, 3, 4);
            let fi = b.train_features.row(0);
            let y = b.train_labels[0];
            let loss = |t: &DenseMatrix| {
                let logits = LastLayerWeights { theta1: t.clone() }.logits_for(fi);
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln() - logits[y]
            };
            let g = loss_grad_theta1(&w, fi, y);
            let h = 1e-6;
            for j in 0..4 {
                for k in 0..3 {
                    let mut plus = w.theta1.clone();
                    plus.set(j, k, plus.get(j, k) + h);
                    let mut minus = w.theta1.clone();
                    minus.set(j, k, minus.get(j, k) - h);
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let a = g.get(j, k);
                    assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3));
                }
            }
        }
    }

    #[test]
    fn one_hot_probabilities_leave_only_the_shift() {
        let feats = DenseMatrix::from_rows(&[[1.0, 0.5], [-1.0, 0.2]]).unwrap();
        let b = DatasetBundle::from_parts("s", 2, feats.clone(), vec![0, 1], feats, vec![0, 1], None, None)
            .unwrap();
        let w = LastLayerWeights {
            theta1: DenseMatrix::from_rows(&[[1000.0, 0.0], [-1000.0, 0.0]]).unwrap(),
        };
        let config = InfluenceConfig::default();
        let v = random_direction(2, 2, 5);
        assert_eq!(hvp(&v, &w, &b, &config).unwrap(), v.scaled(config.shift()));
        let x = inverse_hvp(&v, &w, &b, &config).unwrap();
        let expect = v.scaled(1.0 / config.shift());
        for (a, e) in x.data().iter().zip(expect.data()) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
        let zero = DenseMatrix::zeros(2, 2);
        assert_eq!(hvp(&zero, &w, &b, &config).unwrap(), zero);
        assert_eq!(inverse_hvp(&zero, &w, &b, &config).unwrap(), zero);
    }

    #[test]
    fn hvp_matches_dense_hessian() {
        let (w, b) = small_instance(3, 4, 2, 2);
        let config = InfluenceConfig::default();
        let h = dense_hessian(&w, &b, config.shift());
        for seed in 0..5 {
            let v = random_direction(2, 2, seed);
            let hv = hvp(&v, &w, &b, &config).unwrap();
            for (r, row) in h.iter().enumerate() {
                let e: f64 = row.iter().zip(v.data()).map(|(a, b)| a * b).sum();
                assert!((hv.data()[r] - e).abs() <= 1e-10 * e.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn inverse_matches_dense_solve() {
        let (w, b) = small_instance(4, 12, 3, 3);
        let config = InfluenceConfig::default();
        let h = dense_hessian(&w, &b, config.shift());
        let p = h.len();
        let hm = nalgebra::DMatrix::from_fn(p, p, |r, c| h[r][c]);
        let v = random_direction(3, 3, 9);
        let expect = hm
            .cholesky()
            .unwrap()
            .solve(&nalgebra::DVector::from_column_slice(v.data()));
        let x = inverse_hvp(&v, &w, &b, &config).unwrap();
        let diff: f64 = x
            .data()
            .iter()
            .zip(expect.iter())
            .map(|(a, e)| (a - e).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-8 * expect.norm());

        let back = hvp(&x, &w, &b, &config).unwrap();
        let mut r = back;
        r.axpy(-1.0, &v).unwrap();
        assert!(r.frobenius_norm() <= config.cg_tol * v.frobenius_norm());
    }

    #[test]
    fn cg_budget_exhaustion_is_reported() {
        let (w, b) = small_instance(5, 30, 6, 4);
        let config = InfluenceConfig {
            cg_max_iters: Some(1),
            cg_tol: 1e-14,
            ..InfluenceConfig::default()
        };
        let v = random_direction(4, 6, 1);
        assert!(matches!(
            inverse_hvp(&v, &w, &b, &config),
            Err(Error::CgNoConvergence { .. })
        ));
    }

    #[test]
    fn zero_test_gradient_gives_exact_zero_influence() {
        let feats = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let test = DenseMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let b = DatasetBundle::from_parts("z", 2, feats, vec![0, 1, 0], test, vec![1], None, None).unwrap();
        let w = LastLayerWeights::random(2, 2, 1.0, 3);
        let engine = InfluenceEngine::new(&w, &b, InfluenceConfig::default()).unwrap();
        let r = engine.report(0).unwrap();
        assert!(r.values.iter().all(|v| *v == 0.0));
        assert_eq!(r.zero_fraction, 1.0);
    }

    #[test]
    fn cached_and_direct_values_agree() {
        let (w, b) = small_instance(6, 20, 4, 3);
        let config = InfluenceConfig::default();
        let engine = InfluenceEngine::new(&w, &b, config).unwrap();
        let r = engine.report(1).unwrap();
        for i in [0, 7, 19] {
            assert_eq!(r.values[i], influence(i, 1, &w, &b, &config).unwrap());
        }
        let s = engine.self_influence().unwrap();
        // H is positive definite, so self-influence is never positive
        assert!(s.iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn histogram_bins() {
        let h = ValueHistogram::from_values(&[0.5]);
        assert_eq!(h.counts, vec![1]);
        assert_eq!(h.bin_edges, vec![1e-4, 1.0]);
        assert_eq!(h.zero_fraction, 0.0);

        let h = ValueHistogram::from_values(&[0.0, 0.0, 1e-30, 2.0]);
        assert_eq!(h.zero_count, 2);
        assert_eq!(h.zero_fraction, 0.5);
        assert_eq!(h.counts.iter().sum::<usize>(), 2);
        assert_eq!(h.bin_edges.len(), h.counts.len() + 1);
        assert_eq!(h.counts[0], 1);
        assert_eq!(*h.counts.last().unwrap(), 1);

        let h = ValueHistogram::from_values(&[0.0]);
        assert!(h.counts.is_empty());
        assert_eq!(h.zero_fraction, 1.0);
    }

    #[test]
    fn rejects_indefinite_config() {
        let config = InfluenceConfig {
            damping: 0.0,
            lambda: 0.0,
            ..InfluenceConfig::default()
        };
        assert!(config.validate().is_err());
    }

    proptest! {
        #[test]
        fn hvp_is_linear_and_symmetric(seed in 0u64..1000, a in -3.0f64..3.0, bcoef in -3.0f64..3.0) {
            let (w, b) = small_instance(seed, 8, 3, 3);
            let config = InfluenceConfig::default();
            let u = random_direction(3, 3, seed + 1);
            let v = random_direction(3, 3, seed + 2);
            let hu = hvp(&u, &w, &b, &config).unwrap();
            let hv = hvp(&v, &w, &b, &config).unwrap();

            let mut comb = u.scaled(a);
            comb.axpy(bcoef, &v).unwrap();
            let lhs = hvp(&comb, &w, &b, &config).unwrap();
            let mut rhs = hu.scaled(a);
            rhs.axpy(bcoef, &hv).unwrap();
            let mut d = lhs.clone();
            d.axpy(-1.0, &rhs).unwrap();
            prop_assert!(d.frobenius_norm() <= 1e-10 * rhs.frobenius_norm().max(1e-12));

            let uhv = u.dot(&hv).unwrap();
            let vhu = v.dot(&hu).unwrap();
            prop_assert!((uhv - vhu).abs() <= 1e-10 * uhv.abs().max(vhu.abs()).max(1e-12));
        }
    }
}
