//! L2-regularized last-layer fitting with a gradient-norm certificate.
//!
//! The objective over the `c×f` head `Θ` is
//!
//! ```text
//! (1/n) Σ_i L_i(Θ f_i) + λ ‖Θ‖_F²
//! ```
//!
//! where `L_i` is cross-entropy against labels, softmax cross-entropy against
//! a teacher's softmax outputs, or the ReLU-matching loss
//! `½ relu(Φ)⊙Φ − relu(Φ_given)⊙Φ`. All three are convex in `Θ`, so with
//! `λ > 0` the problem has a unique minimizer.
//!
//! The finisher is full-batch gradient descent (or optionally L-BFGS) with
//! backtracking on the Armijo condition. Close to the optimum, objective
//! decreases fall far below the rounding error of the objective value itself,
//! so the line search measures `f(Θ + tD) − f(Θ)` directly from per-point
//! differences (`log1p`/`expm1` forms) instead of subtracting two rounded
//! objective values. That keeps the sufficient-decrease test meaningful down
//! to gradient norms around 1e-12.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetBundle;
use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, relu, softmax_into, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Softmax cross-entropy against the training labels.
    #[serde(rename = "ce")]
    CrossEntropyWithLabels,
    /// Cross-entropy between teacher and student softmax outputs.
    SoftmaxDistill,
    /// `½ relu(Φ)⊙Φ − relu(Φ_given)⊙Φ`, summed over classes.
    ReluDistill,
}

impl LossKind {
    pub fn needs_teacher(self) -> bool {
        !matches!(self, LossKind::CrossEntropyWithLabels)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropyWithLabels => "ce",
            LossKind::SoftmaxDistill => "softmax-distill",
            LossKind::ReluDistill => "relu-distill",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::CrossEntropyWithLabels),
            "softmax-distill" => Ok(LossKind::SoftmaxDistill),
            "relu-distill" => Ok(LossKind::ReluDistill),
            other => Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdWarmup {
    pub epochs: usize,
    pub step: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub initial_step: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Finisher {
    GradientDescent,
    Lbfgs { memory: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub sgd_warmup: Option<SgdWarmup>,
    pub line_search: LineSearch,
    pub finisher: Finisher,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            grad_tol: 1e-9,
            max_iters: 100_000,
            sgd_warmup: None,
            line_search: LineSearch::default(),
            finisher: Finisher::GradientDescent,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    /// Default for teacher distillation (λ = 1e-3).
    pub fn distillation() -> Self {
        Self::with_lambda(1e-3)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "grad_tol must be positive, got {}",
                self.grad_tol
            )));
        }
        let ls = &self.line_search;
        if !(ls.shrink > 0.0 && ls.shrink < 1.0)
            || !(ls.sufficient_decrease > 0.0 && ls.sufficient_decrease < 1.0)
            || !(ls.initial_step > 0.0)
        {
            return Err(Error::InvalidConfig("bad line-search constants".into()));
        }
        if let Finisher::Lbfgs { memory: 0 } = self.finisher {
            return Err(Error::InvalidConfig("L-BFGS memory must be >= 1".into()));
        }
        if let Some(w) = &self.sgd_warmup {
            if w.batch == 0 || !(w.step > 0.0) {
                return Err(Error::InvalidConfig("bad SGD warm-up settings".into()));
            }
        }
        Ok(())
    }
}

/// The `c×f` head `Θ₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct LastLayerWeights {
    pub theta1: DenseMatrix,
}

impl LastLayerWeights {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            theta1: DenseMatrix::zeros(num_classes, feature_dim),
        }
    }

    /// Entries drawn from `N(0, scale²)`.
    pub fn random(num_classes: usize, feature_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("valid scale");
        let data = (0..num_classes * feature_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            theta1: DenseMatrix::from_raw_unchecked(num_classes, feature_dim, data),
        }
    }

    /// `Φ = F Θᵀ`, one row of logits per row of `features`.
    pub fn logits(&self, features: &DenseMatrix) -> DenseMatrix {
        project(features, &self.theta1)
    }

    pub fn logits_for(&self, feature_row: &[f64]) -> Vec<f64> {
        (0..self.theta1.rows())
            .map(|j| dot(self.theta1.row(j), feature_row))
            .collect()
    }
}

/// `F Θᵀ` for `F` (n×f) and `Θ` (c×f).
pub(crate) fn project(features: &DenseMatrix, theta: &DenseMatrix) -> DenseMatrix {
    let n = features.rows();
    let c = theta.rows();
    let mut out = DenseMatrix::zeros(n, c);
    for i in 0..n {
        let f = features.row(i);
        let row = out.row_mut(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(theta.row(j), f);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    #[serde(rename = "objective")]
    pub final_objective: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted full-batch step, tracked by accumulating
    /// the directly measured decreases.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

enum Targets<'a> {
    Labels(&'a [usize]),
    /// Teacher softmax outputs, n×c.
    Probabilities(DenseMatrix),
    /// Teacher relu outputs, n×c.
    Rectified(DenseMatrix),
}

/// The regularized objective for one bundle and loss.
pub struct Objective<'a> {
    features: &'a DenseMatrix,
    targets: Targets<'a>,
    num_classes: usize,
    lambda: f64,
}

impl<'a> Objective<'a> {
    pub fn new(bundle: &'a DatasetBundle, loss: LossKind, lambda: f64) -> Result<Self> {
        let c = bundle.num_classes();
        let targets = match loss {
            LossKind::CrossEntropyWithLabels => Targets::Labels(&bundle.train_labels),
            LossKind::SoftmaxDistill => {
                let given = bundle
                    .given_train_logits
                    .as_ref()
                    .ok_or(Error::MissingGivenLogits)?;
                let mut probs = DenseMatrix::zeros(given.rows(), c);
                for i in 0..given.rows() {
                    softmax_into(given.row(i), probs.row_mut(i));
                }
                Targets::Probabilities(probs)
            }
            LossKind::ReluDistill => {
                let given = bundle
                    .given_train_logits
                    .as_ref()
                    .ok_or(Error::MissingGivenLogits)?;
                let mut r = given.clone();
                r.data_mut().iter_mut().for_each(|v| *v = relu(*v));
                Targets::Rectified(r)
            }
        };
        Ok(Self {
            features: &bundle.train_features,
            targets,
            num_classes: c,
            lambda,
        })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn check_shape(&self, theta: &DenseMatrix) -> Result<()> {
        if theta.shape() != (self.num_classes, self.features.cols()) {
            return Err(Error::ShapeMismatch(format!(
                "weights are {}x{}, expected {}x{}",
                theta.rows(),
                theta.cols(),
                self.num_classes,
                self.features.cols()
            )));
        }
        Ok(())
    }

    fn point_loss(&self, i: usize, phi: &[f64]) -> f64 {
        match &self.targets {
            Targets::Labels(y) => log_sum_exp(phi) - phi[y[i]],
            Targets::Probabilities(q) => log_sum_exp(phi) - dot(q.row(i), phi),
            Targets::Rectified(r) => phi
                .iter()
                .zip(r.row(i))
                .map(|(&p, &rt)| 0.5 * relu(p) * p - rt * p)
                .sum(),
        }
    }

    /// `∂L_i/∂Φ_i` written into `out`.
    pub(crate) fn point_phi_grad(&self, i: usize, phi: &[f64], out: &mut [f64]) {
        match &self.targets {
            Targets::Labels(y) => {
                softmax_into(phi, out);
                out[y[i]] -= 1.0;
            }
            Targets::Probabilities(q) => {
                softmax_into(phi, out);
                for (o, t) in out.iter_mut().zip(q.row(i)) {
                    *o -= t;
                }
            }
            Targets::Rectified(r) => {
                for ((o, &p), &rt) in out.iter_mut().zip(phi).zip(r.row(i)) {
                    *o = relu(p) - rt;
                }
            }
        }
    }

    /// `L_i(φ + δ) − L_i(φ)`, accurate when `δ` is tiny.
    fn point_loss_delta(&self, i: usize, phi: &[f64], delta: &[f64], scratch: &mut [f64]) -> f64 {
        let max_delta = delta.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
        match &self.targets {
            Targets::Labels(_) | Targets::Probabilities(_) => {
                let lse_delta = if max_delta < 1.0 {
                    softmax_into(phi, scratch);
                    let s: f64 = scratch
                        .iter()
                        .zip(delta)
                        .map(|(p, d)| p * d.exp_m1())
                        .sum();
                    s.ln_1p()
                } else {
                    let moved: Vec<f64> = phi.iter().zip(delta).map(|(p, d)| p + d).collect();
                    log_sum_exp(&moved) - log_sum_exp(phi)
                };
                let linear = match &self.targets {
                    Targets::Labels(y) => delta[y[i]],
                    Targets::Probabilities(q) => dot(q.row(i), delta),
                    Targets::Rectified(_) => unreachable!(),
                };
                lse_delta - linear
            }
            Targets::Rectified(r) => phi
                .iter()
                .zip(delta)
                .zip(r.row(i))
                .map(|((&p, &d), &rt)| {
                    let moved = p + d;
                    let quad = if p > 0.0 && moved > 0.0 {
                        0.5 * d * (2.0 * p + d)
                    } else if p <= 0.0 && moved <= 0.0 {
                        0.0
                    } else {
                        0.5 * (relu(moved) * moved - relu(p) * p)
                    };
                    quad - rt * d
                })
                .sum(),
        }
    }

    fn value_from_logits(&self, theta: &DenseMatrix, phi: &DenseMatrix) -> f64 {
        let n = self.n();
        let data: f64 = (0..n).map(|i| self.point_loss(i, phi.row(i))).sum();
        let reg = theta.data().iter().map(|v| v * v).sum::<f64>();
        let mean = if n == 0 { 0.0 } else { data / n as f64 };
        mean + self.lambda * reg
    }

    pub fn value(&self, theta: &DenseMatrix) -> Result<f64> {
        self.check_shape(theta)?;
        Ok(self.value_from_logits(theta, &project(self.features, theta)))
    }

    /// Per-point `Φ`-space gradients, n×c.
    pub fn phi_gradients(&self, theta: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_shape(theta)?;
        let phi = project(self.features, theta);
        Ok(self.phi_gradients_from_logits(&phi))
    }

    fn phi_gradients_from_logits(&self, phi: &DenseMatrix) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(phi.rows(), self.num_classes);
        for i in 0..phi.rows() {
            self.point_phi_grad(i, phi.row(i), g.row_mut(i));
        }
        g
    }

    fn grad_from_logits(&self, theta: &DenseMatrix, phi: &DenseMatrix) -> DenseMatrix {
        let n = self.n();
        let c = self.num_classes;
        let mut grad = DenseMatrix::zeros(c, self.features.cols());
        let mut point = vec![0.0; c];
        for i in 0..n {
            self.point_phi_grad(i, phi.row(i), &mut point);
            let f = self.features.row(i);
            for (j, &gj) in point.iter().enumerate() {
                if gj == 0.0 {
                    continue;
                }
                for (o, &fk) in grad.row_mut(j).iter_mut().zip(f) {
                    *o += gj * fk;
                }
            }
        }
        if n > 0 {
            grad.scale(1.0 / n as f64);
        }
        grad.axpy(2.0 * self.lambda, theta).expect("same shape");
        grad
    }

    /// Objective and its exact gradient in `Θ`.
    pub fn value_and_grad(&self, theta: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
        self.check_shape(theta)?;
        let phi = project(self.features, theta);
        Ok((
            self.value_from_logits(theta, &phi),
            self.grad_from_logits(theta, &phi),
        ))
    }

    /// `f(Θ + tD) − f(Θ)` from cached `Φ = FΘᵀ` and `Ψ = FDᵀ`.
    fn step_delta(
        &self,
        theta: &DenseMatrix,
        direction: &DenseMatrix,
        phi: &DenseMatrix,
        psi: &DenseMatrix,
        t: f64,
    ) -> f64 {
        let n = self.n();
        let c = self.num_classes;
        let mut delta = vec![0.0; c];
        let mut scratch = vec![0.0; c];
        let mut data = 0.0;
        for i in 0..n {
            for (d, &p) in delta.iter_mut().zip(psi.row(i)) {
                *d = t * p;
            }
            data += self.point_loss_delta(i, phi.row(i), &delta, &mut scratch);
        }
        let mean = if n == 0 { 0.0 } else { data / n as f64 };
        let cross = dot(theta.data(), direction.data());
        let dd = dot(direction.data(), direction.data());
        mean + self.lambda * (2.0 * t * cross + t * t * dd)
    }
}

/// Objective and exact gradient for `w` on the bundle's training split.
pub fn objective_and_grad(
    w: &LastLayerWeights,
    bundle: &DatasetBundle,
    loss: LossKind,
    lambda: f64,
) -> Result<(f64, DenseMatrix)> {
    Objective::new(bundle, loss, lambda)?.value_and_grad(&w.theta1)
}

/// Fits from zero initialization.
pub fn fit(
    bundle: &DatasetBundle,
    loss: LossKind,
    config: &SolverConfig,
) -> Result<(LastLayerWeights, StationarityReport)> {
    fit_from(bundle, loss, config, None)
}

/// Fits from `init` (zeros when `None`), e.g. a teacher head.
pub fn fit_from(
    bundle: &DatasetBundle,
    loss: LossKind,
    config: &SolverConfig,
    init: Option<&LastLayerWeights>,
) -> Result<(LastLayerWeights, StationarityReport)> {
    config.validate()?;
    let objective = Objective::new(bundle, loss, config.lambda)?;
    let mut theta = match init {
        Some(w) => {
            objective.check_shape(&w.theta1)?;
            w.theta1.clone()
        }
        None => DenseMatrix::zeros(bundle.num_classes(), bundle.feature_dim()),
    };
    if let Some(warmup) = &config.sgd_warmup {
        sgd_warmup(&objective, &mut theta, warmup, config.seed);
    }
    finish(&objective, theta, config)
}

fn sgd_warmup(objective: &Objective<'_>, theta: &mut DenseMatrix, warmup: &SgdWarmup, seed: u64) {
    let n = objective.n();
    if n == 0 {
        return;
    }
    let c = objective.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut point = vec![0.0; c];
    let mut phi = vec![0.0; c];
    for _ in 0..warmup.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(warmup.batch) {
            let mut grad = theta.scaled(2.0 * objective.lambda);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let f = objective.features.row(i);
                for (j, p) in phi.iter_mut().enumerate() {
                    *p = dot(theta.row(j), f);
                }
                objective.point_phi_grad(i, &phi, &mut point);
                for (j, &gj) in point.iter().enumerate() {
                    for (o, &fk) in grad.row_mut(j).iter_mut().zip(f) {
                        *o += scale * gj * fk;
                    }
                }
            }
            theta.axpy(-warmup.step, &grad).expect("same shape");
        }
    }
}

const MIN_STEP: f64 = 1e-30;
const MAX_STEP: f64 = 1e12;

fn finish(
    objective: &Objective<'_>,
    mut theta: DenseMatrix,
    config: &SolverConfig,
) -> Result<(LastLayerWeights, StationarityReport)> {
    let ls = config.line_search;
    let (mut f, mut grad) = objective.value_and_grad(&theta)?;
    let mut gnorm = grad.inf_norm();
    let mut trace = vec![f];
    let mut step = ls.initial_step;
    let mut history: VecDeque<(DenseMatrix, DenseMatrix, f64)> = VecDeque::new();
    let mut iterations = 0;

    while gnorm > config.grad_tol && iterations < config.max_iters {
        let phi = project(objective.features, &theta);
        let (direction, quasi_newton) = match config.finisher {
            Finisher::GradientDescent => (grad.scaled(-1.0), false),
            Finisher::Lbfgs { .. } if history.is_empty() => (grad.scaled(-1.0), false),
            Finisher::Lbfgs { .. } => (lbfgs_direction(&grad, &history), true),
        };
        let mut slope = dot(grad.data(), direction.data());
        let (direction, quasi_newton) = if quasi_newton && !(slope < 0.0) {
            history.clear();
            let d = grad.scaled(-1.0);
            slope = dot(grad.data(), d.data());
            (d, false)
        } else {
            (direction, quasi_newton)
        };
        let psi = project(objective.features, &direction);

        let mut t = if quasi_newton { 1.0 } else { step };
        let mut first_trial = true;
        let accepted = loop {
            let delta = objective.step_delta(&theta, &direction, &phi, &psi, t);
            if delta.is_finite() && delta <= ls.sufficient_decrease * t * slope && delta <= 0.0 {
                break Some(delta);
            }
            first_trial = false;
            t *= ls.shrink;
            if t < MIN_STEP {
                break None;
            }
        };
        let Some(delta) = accepted else {
            return Err(Error::LineSearchStall {
                iteration: iterations,
                grad_inf_norm: gnorm,
            });
        };

        let prev_theta = theta.clone();
        let prev_grad = grad.clone();
        theta.axpy(t, &direction)?;
        let (f_new, g_new) = objective.value_and_grad(&theta)?;
        grad = g_new;
        gnorm = grad.inf_norm();
        let tracked = trace.last().copied().unwrap_or(f) + delta;
        trace.push(tracked);
        f = f_new;
        iterations += 1;

        if !quasi_newton {
            step = if first_trial { (t * 2.0).min(MAX_STEP) } else { t };
        }
        if let Finisher::Lbfgs { memory } = config.finisher {
            let mut s = theta.clone();
            s.axpy(-1.0, &prev_theta)?;
            let mut y = grad.clone();
            y.axpy(-1.0, &prev_grad)?;
            let sy = dot(s.data(), y.data());
            if sy > 1e-300 {
                if history.len() == memory {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
        }
    }

    let report = StationarityReport {
        final_objective: f,
        grad_inf_norm: gnorm,
        iterations,
        converged: gnorm <= config.grad_tol,
        objective_trace: trace,
    };
    Ok((LastLayerWeights { theta1: theta }, report))
}

/// Two-loop recursion for `−H⁻¹ g`.
fn lbfgs_direction(
    grad: &DenseMatrix,
    history: &VecDeque<(DenseMatrix, DenseMatrix, f64)>,
) -> DenseMatrix {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s.data(), q.data());
        q.axpy(-a, y).expect("same shape");
        alphas.push(a);
    }
    let (s, y, _) = history.back().expect("non-empty history");
    let gamma = dot(s.data(), y.data()) / dot(y.data(), y.data());
    q.scale(gamma);
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y.data(), q.data());
        q.axpy(a - b, s).expect("same shape");
    }
    q.scale(-1.0);
    q
}

/// Largest gap between student and teacher activations over training points:
/// softmax outputs for the softmax losses, relu outputs for `ReluDistill`.
/// For `CrossEntropyWithLabels` the "teacher" is the one-hot label.
pub fn suitability_check(
    w: &LastLayerWeights,
    bundle: &DatasetBundle,
    loss: LossKind,
) -> Result<f64> {
    let c = bundle.num_classes();
    let phi = w.logits(&bundle.train_features);
    let mut student = vec![0.0; c];
    let mut teacher = vec![0.0; c];
    let mut worst = 0.0_f64;
    for i in 0..phi.rows() {
        match loss {
            LossKind::CrossEntropyWithLabels => {
                softmax_into(phi.row(i), &mut student);
                teacher.fill(0.0);
                teacher[bundle.train_labels[i]] = 1.0;
            }
            LossKind::SoftmaxDistill => {
                let given = bundle
                    .given_train_logits
                    .as_ref()
                    .ok_or(Error::MissingGivenLogits)?;
                softmax_into(phi.row(i), &mut student);
                softmax_into(given.row(i), &mut teacher);
            }
            LossKind::ReluDistill => {
                let given = bundle
                    .given_train_logits
                    .as_ref()
                    .ok_or(Error::MissingGivenLogits)?;
                for j in 0..c {
                    student[j] = relu(phi.get(i, j));
                    teacher[j] = relu(given.get(i, j));
                }
            }
        }
        for (s, t) in student.iter().zip(&teacher) {
            worst = worst.max((s - t).abs());
        }
    }
    Ok(worst)
}
