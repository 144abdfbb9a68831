//! A small ReLU MLP standing in for the feature network, the sensitivity-map
//! decomposition built on it, and the two-blob stability study.
//!
//! ReLU is applied on every layer up to and including the feature layer, so
//! features are non-negative and `f_iᵀ f_t ≥ 0` for every pair.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetBundle;
use crate::error::{Error, Result};
use crate::influence::{InfluenceConfig, InfluenceEngine};
use crate::numerics::{dot, softmax_into, DenseMatrix};
use crate::representer::{compute_alphas, explain, theta_residual, AlphaMatrix};
use crate::solver::{fit_from, Finisher, LastLayerWeights, LossKind, SolverConfig};
use crate::synth::blobs_2d;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `[d, h₁, …, h_k, f]`.
    pub widths: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer widths must have at least two positive entries, got {:?}",
                self.widths
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub head: LastLayerWeights,
}

struct Trace {
    /// Post-activation outputs; `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// He-initialized weights, small positive biases, small random head.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                Layer {
                    weights: DenseMatrix::from_raw_unchecked(fan_out, fan_in, data),
                    bias: vec![0.1; fan_out],
                }
            })
            .collect();
        let head_scale = (1.0 / spec.feature_dim() as f64).sqrt();
        let head_seed = rand::Rng::random::<u64>(&mut rng);
        Ok(Self {
            layers,
            head: LastLayerWeights::random(spec.num_classes, spec.feature_dim(), head_scale, head_seed),
        })
    }

    pub fn spec(&self) -> MlpSpec {
        let mut widths = vec![self.layers[0].weights.cols()];
        widths.extend(self.layers.iter().map(|l| l.weights.rows()));
        MlpSpec {
            widths,
            num_classes: self.head.theta1.rows(),
        }
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = acts.last().unwrap();
            let z: Vec<f64> = (0..layer.weights.rows())
                .map(|r| dot(layer.weights.row(r), input) + layer.bias[r])
                .collect();
            acts.push(z.iter().map(|&v| v.max(0.0)).collect());
            pre.push(z);
        }
        Trace { acts, pre }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).acts.pop().unwrap()
    }

    pub fn feature_matrix(&self, xs: &DenseMatrix) -> DenseMatrix {
        let f = self.head.theta1.cols();
        let mut data = Vec::with_capacity(xs.rows() * f);
        for i in 0..xs.rows() {
            data.extend(self.features(xs.row(i)));
        }
        DenseMatrix::from_raw_unchecked(xs.rows(), f, data)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.head.logits_for(&self.features(x))
    }

    fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum::<usize>()
            + self.head.theta1.data().len()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(self.head.theta1.data());
        out
    }

    fn assign(&mut self, params: &[f64]) {
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&params[at..at + dst.len()]);
            at += dst.len();
        };
        for l in &mut self.layers {
            take(l.weights.data_mut());
            take(&mut l.bias);
        }
        take(self.head.theta1.data_mut());
    }

    /// Mean cross-entropy and its gradient in flattened parameter order.
    fn loss_and_grad(&self, xs: &DenseMatrix, ys: &[usize]) -> (f64, Vec<f64>) {
        let n = xs.rows();
        let mut layer_grads: Vec<(DenseMatrix, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (DenseMatrix::zeros(l.weights.rows(), l.weights.cols()), vec![0.0; l.bias.len()]))
            .collect();
        let (c, f) = self.head.theta1.shape();
        let mut head_grad = DenseMatrix::zeros(c, f);
        let mut total = 0.0;
        let mut p = vec![0.0; c];
        for i in 0..n {
            let tr = self.trace(xs.row(i));
            let feat = tr.acts.last().unwrap();
            let phi = self.head.logits_for(feat);
            total += cross_entropy(&phi, ys[i]);
            softmax_into(&phi, &mut p);
            p[ys[i]] -= 1.0;
            let mut delta_a = vec![0.0; f];
            for j in 0..c {
                let dj = p[j] / n as f64;
                for k in 0..f {
                    *head_grad.row_mut(j).get_mut(k).unwrap() += dj * feat[k];
                    delta_a[k] += dj * self.head.theta1.get(j, k);
                }
            }
            for l in (0..self.layers.len()).rev() {
                let delta_z: Vec<f64> = delta_a
                    .iter()
                    .zip(&tr.pre[l])
                    .map(|(d, z)| if *z > 0.0 { *d } else { 0.0 })
                    .collect();
                let input = &tr.acts[l];
                let (gw, gb) = &mut layer_grads[l];
                for (r, dz) in delta_z.iter().enumerate() {
                    if *dz == 0.0 {
                        continue;
                    }
                    gb[r] += dz;
                    for (g, a) in gw.row_mut(r).iter_mut().zip(input) {
                        *g += dz * a;
                    }
                }
                if l > 0 {
                    let w = &self.layers[l].weights;
                    delta_a = vec![0.0; w.cols()];
                    for (r, dz) in delta_z.iter().enumerate() {
                        for (d, wv) in delta_a.iter_mut().zip(w.row(r)) {
                            *d += dz * wv;
                        }
                    }
                }
            }
        }
        let mut grad = Vec::with_capacity(self.param_count());
        for (gw, gb) in &layer_grads {
            grad.extend_from_slice(gw.data());
            grad.extend_from_slice(gb);
        }
        grad.extend_from_slice(head_grad.data());
        (total / n.max(1) as f64, grad)
    }

    fn mean_loss(&self, xs: &DenseMatrix, ys: &[usize]) -> f64 {
        let n = xs.rows();
        (0..n).map(|i| cross_entropy(&self.logits(xs.row(i)), ys[i])).sum::<f64>() / n.max(1) as f64
    }

    pub fn accuracy(&self, xs: &DenseMatrix, ys: &[usize]) -> f64 {
        if xs.rows() == 0 {
            return 0.0;
        }
        let hits = (0..xs.rows())
            .filter(|&i| crate::influence::argmax(&self.logits(xs.row(i))) == ys[i])
            .count();
        hits as f64 / xs.rows() as f64
    }
}

/// Cross-entropy written as `log1p(Σ_{j≠y} e^{φ_j − φ_y})` when the label
/// wins, so tiny losses of saturated points are not rounded to zero.
fn cross_entropy(phi: &[f64], y: usize) -> f64 {
    let top = phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if phi[y] >= top {
        let s: f64 = phi
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != y)
            .map(|(_, z)| (z - phi[y]).exp())
            .sum();
        s.ln_1p()
    } else {
        crate::numerics::log_sum_exp(phi) - phi[y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Smallest `Φ_y − max_{j≠y} Φ_j` over training points.
    pub min_margin: f64,
}

/// Full-batch gradient descent on mean cross-entropy.
///
/// `step` is the first trial step; each epoch backtracks by halving until
/// the Armijo condition holds and the next epoch starts from twice the
/// accepted step.
pub fn train_toy(
    spec: &MlpSpec,
    xs: &DenseMatrix,
    ys: &[usize],
    epochs: usize,
    step: f64,
    seed: u64,
) -> Result<(Mlp, TrainSummary)> {
    if xs.cols() != spec.input_dim() || xs.rows() != ys.len() {
        return Err(Error::ShapeMismatch(format!(
            "inputs {}x{} with {} labels for input dimension {}",
            xs.rows(),
            xs.cols(),
            ys.len(),
            spec.input_dim()
        )));
    }
    if let Some(&bad) = ys.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::LabelOutOfRange {
            index: ys.iter().position(|&y| y == bad).unwrap(),
            label: bad,
            num_classes: spec.num_classes,
        });
    }
    let mut model = Mlp::init(spec, seed)?;
    let mut params = model.flatten();
    let mut trial = step;
    for epoch in 0..epochs {
        let (loss, grad) = model.loss_and_grad(xs, ys);
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if g2 == 0.0 {
            break;
        }
        let mut t = trial;
        let mut candidate = model.clone();
        loop {
            let next: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - t * g).collect();
            candidate.assign(&next);
            let new_loss = candidate.mean_loss(xs, ys);
            if !new_loss.is_finite() && t < 1e-300 {
                return Err(Error::Divergence { epoch });
            }
            if new_loss <= loss - 1e-4 * t * g2 {
                params = next;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                // no progress possible at this precision
                return Ok(summarize(model, xs, ys, epoch));
            }
        }
        model = candidate;
        trial = (2.0 * t).min(1e6);
    }
    Ok(summarize(model, xs, ys, epochs))
}

fn summarize(model: Mlp, xs: &DenseMatrix, ys: &[usize], epochs: usize) -> (Mlp, TrainSummary) {
    let min_margin = (0..xs.rows())
        .map(|i| {
            let phi = model.logits(xs.row(i));
            let rival = phi
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != ys[i])
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            phi[ys[i]] - rival
        })
        .fold(f64::INFINITY, f64::min);
    let summary = TrainSummary {
        epochs,
        final_loss: model.mean_loss(xs, ys),
        train_accuracy: model.accuracy(xs, ys),
        min_margin,
    };
    (model, summary)
}

/// Features `f(x)` and the exact Jacobian `∂f/∂x` (`f × d`); the ReLU
/// derivative at exactly zero is taken as zero.
pub fn feature_and_input_jacobian(model: &Mlp, x: &[f64]) -> (Vec<f64>, DenseMatrix) {
    let tr = model.trace(x);
    let d = x.len();
    let mut jac = DenseMatrix::identity(d);
    for (layer, z) in model.layers.iter().zip(&tr.pre) {
        let mut next = layer.weights.matmul(&jac).expect("layer widths chain");
        for (r, zr) in z.iter().enumerate() {
            if *zr <= 0.0 {
                next.row_mut(r).fill(0.0);
            }
        }
        jac = next;
    }
    (tr.acts.into_iter().last().unwrap(), jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothGrad {
    pub num_samples: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SmoothGrad {
    pub fn plain() -> Self {
        Self {
            num_samples: 1,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    /// 50 samples with `σ` at a tenth of the input range.
    pub fn default_for(inputs: &DenseMatrix, seed: u64) -> Self {
        let (lo, hi) = inputs
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let range = if hi > lo { hi - lo } else { 0.0 };
        Self {
            num_samples: 50,
            noise_sigma: 0.1 * range,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMap {
    pub train_index: usize,
    pub map: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityDecomposition {
    pub class: usize,
    /// `∂Φ_j/∂x_t`, averaged over the SmoothGrad draws.
    pub total_map: Vec<f64>,
    pub per_train_maps: Vec<TrainMap>,
    /// `‖Σ_i map_i − total_map‖_∞`.
    pub residual: f64,
    /// `residual / max(‖total_map‖_∞, 1e-300)`.
    pub relative_residual: f64,
}

impl SensitivityDecomposition {
    pub fn summed_maps(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.total_map.len()];
        for m in &self.per_train_maps {
            for (s, v) in sum.iter_mut().zip(&m.map) {
                *s += v;
            }
        }
        sum
    }
}

/// Splits `∂Φ_j/∂x_t` into per-training-point maps
/// `α_ij (∂f_t/∂x_t)ᵀ f_i`. With SmoothGrad every map and the total are
/// averaged over the same noisy copies of `x_t`.
///
/// `train_features` must be this model's features of the training inputs
/// and `alphas` must be certified against `model.head` within `grad_tol`.
pub fn decompose_sensitivity(
    model: &Mlp,
    alphas: &AlphaMatrix,
    train_features: &DenseMatrix,
    x_t: &[f64],
    class: usize,
    smoothgrad: &SmoothGrad,
    grad_tol: f64,
) -> Result<SensitivityDecomposition> {
    if !(alphas.source_grad_inf_norm <= grad_tol) {
        return Err(Error::Staleness {
            grad_inf_norm: alphas.source_grad_inf_norm,
            grad_tol,
        });
    }
    let (c, f) = model.head.theta1.shape();
    if class >= c {
        return Err(Error::IndexOutOfRange { index: class, len: c });
    }
    if train_features.cols() != f || alphas.n_train() != train_features.rows() || alphas.num_classes() != c {
        return Err(Error::ShapeMismatch(
            "alphas, training features and model head disagree".into(),
        ));
    }
    let d = model.layers[0].weights.cols();
    if x_t.len() != d {
        return Err(Error::ShapeMismatch(format!("input of length {} for dimension {d}", x_t.len())));
    }
    if smoothgrad.num_samples == 0 || !(smoothgrad.noise_sigma >= 0.0) {
        return Err(Error::InvalidConfig("SmoothGrad needs at least one sample and sigma >= 0".into()));
    }
    let n = train_features.rows();
    let noise = if smoothgrad.noise_sigma > 0.0 {
        Some(Normal::new(0.0, smoothgrad.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(smoothgrad.seed);
    let mut total = vec![0.0; d];
    let mut maps = vec![vec![0.0; d]; n];
    let mut x = x_t.to_vec();
    for _ in 0..smoothgrad.num_samples {
        if let Some(noise) = &noise {
            for (xi, base) in x.iter_mut().zip(x_t) {
                *xi = base + noise.sample(&mut rng);
            }
        }
        let (_, jac) = feature_and_input_jacobian(model, &x);
        let jt = jac.transpose();
        for (acc, v) in total.iter_mut().zip(jt.matvec(model.head.theta1.row(class))?) {
            *acc += v;
        }
        for (i, map) in maps.iter_mut().enumerate() {
            let a = alphas.alphas.get(i, class);
            if a == 0.0 {
                continue;
            }
            for (acc, v) in map.iter_mut().zip(jt.matvec(train_features.row(i))?) {
                *acc += a * v;
            }
        }
    }
    let inv = 1.0 / smoothgrad.num_samples as f64;
    if smoothgrad.num_samples > 1 {
        total.iter_mut().for_each(|v| *v *= inv);
        maps.iter_mut().flatten().for_each(|v| *v *= inv);
    }
    let per_train_maps: Vec<TrainMap> = maps
        .into_iter()
        .enumerate()
        .map(|(i, map)| TrainMap {
            train_index: i,
            map,
            alpha: alphas.alphas.get(i, class),
        })
        .collect();
    let mut decomposition = SensitivityDecomposition {
        class,
        total_map: total,
        per_train_maps,
        residual: 0.0,
        relative_residual: 0.0,
    };
    let summed = decomposition.summed_maps();
    let residual = summed
        .iter()
        .zip(&decomposition.total_map)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = decomposition.total_map.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    decomposition.residual = residual;
    decomposition.relative_residual = residual / scale.max(1e-300);
    Ok(decomposition)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStudyConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub centers: [[f64; 2]; 2],
    pub sigma: f64,
    /// Hidden and feature widths; the input width 2 is implied.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub step: f64,
    /// Distillation regularizer for the student head.
    pub lambda: f64,
    pub grad_tol: f64,
    pub influence: InfluenceConfig,
    pub probe: [f64; 2],
    pub top_k: usize,
}

impl Default for ToyStudyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_per_class: 50,
            centers: [[-3.0, 0.0], [3.0, 0.0]],
            sigma: 0.3,
            hidden: vec![16, 8],
            epochs: 1000,
            step: 0.1,
            lambda: 1e-3,
            // toy features are large next to 2λ, so the head is certified tighter
            grad_tol: 1e-11,
            // the teacher is trained without a penalty; damping keeps H definite
            influence: InfluenceConfig {
                lambda: 0.0,
                ..InfluenceConfig::default()
            },
            probe: [3.0, 0.0],
            top_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPoint {
    pub index: usize,
    pub value: f64,
    pub x: f64,
    pub y: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStudyReport {
    pub config: ToyStudyConfig,
    pub train: TrainSummary,
    pub probe_class: usize,
    pub max_abs_influence: f64,
    pub influence_zero_fraction: f64,
    pub max_abs_alpha: f64,
    pub head_grad_inf_norm: f64,
    pub theta_residual: f64,
    pub decomposition_residual: f64,
    pub top_excitatory: Vec<ToyPoint>,
    pub top_inhibitory: Vec<ToyPoint>,
    pub seconds: f64,
}

/// Everything the study builds, for callers that need more than the report.
pub struct ToyArtifacts {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
    pub teacher: Mlp,
    /// Same feature layers as `teacher` with the distilled head.
    pub student: Mlp,
    pub bundle: DatasetBundle,
    pub alphas: AlphaMatrix,
}

/// Builds the large-margin two-blob set, trains the MLP, distills its head
/// and returns the feature-level bundle (the probe is the only test point).
pub fn build_toy(config: &ToyStudyConfig) -> Result<(ToyArtifacts, TrainSummary)> {
    let (inputs, labels) = blobs_2d(config.n_per_class, config.centers, config.sigma, config.seed);
    let mut widths = vec![2];
    widths.extend(&config.hidden);
    let spec = MlpSpec {
        widths,
        num_classes: 2,
    };
    let (teacher, summary) = train_toy(&spec, &inputs, &labels, config.epochs, config.step, config.seed)?;
    let probe_class = crate::influence::argmax(&teacher.logits(&config.probe));
    let train_features = teacher.feature_matrix(&inputs);
    let probe_features = DenseMatrix::from_raw_unchecked(1, train_features.cols(), teacher.features(&config.probe));
    let given_train = teacher.head.logits(&train_features);
    let given_test = teacher.head.logits(&probe_features);
    let bundle = DatasetBundle::from_parts(
        "toy-blobs",
        2,
        train_features,
        labels.clone(),
        probe_features,
        vec![probe_class],
        Some(given_train),
        Some(given_test),
    )?;
    let (alphas, head) = distill_head(&bundle, &teacher.head, config.lambda, config.grad_tol)?;
    let student = Mlp {
        layers: teacher.layers.clone(),
        head,
    };
    Ok((
        ToyArtifacts {
            inputs,
            labels,
            teacher,
            student,
            bundle,
            alphas,
        },
        summary,
    ))
}

/// Softmax distillation of `teacher` at `lambda`, starting from the teacher.
pub fn distill_head(
    bundle: &DatasetBundle,
    teacher: &LastLayerWeights,
    lambda: f64,
    grad_tol: f64,
) -> Result<(AlphaMatrix, LastLayerWeights)> {
    let config = SolverConfig {
        lambda,
        grad_tol,
        finisher: Finisher::Lbfgs { memory: 10 },
        ..SolverConfig::default()
    };
    let (head, report) = fit_from(bundle, LossKind::SoftmaxDistill, &config, Some(teacher))?;
    if !report.converged {
        return Err(Error::Staleness {
            grad_inf_norm: report.grad_inf_norm,
            grad_tol,
        });
    }
    let alphas = compute_alphas(&head, bundle, LossKind::SoftmaxDistill, lambda, grad_tol)?;
    Ok((alphas, head))
}

pub fn toy_stability_study(config: &ToyStudyConfig) -> Result<ToyStudyReport> {
    let started = Instant::now();
    let (art, train) = build_toy(config)?;
    let probe_class = art.bundle.test_labels[0];

    let engine = InfluenceEngine::new(&art.teacher.head, &art.bundle, config.influence)?;
    let influence = engine.report(0)?;

    let explanation = explain(&art.student.head, &art.alphas, &art.bundle, 0, probe_class, config.top_k)?;
    let point = |index: usize, value: f64| ToyPoint {
        index,
        value,
        x: art.inputs.get(index, 0),
        y: art.inputs.get(index, 1),
        label: art.labels[index],
    };
    Ok(ToyStudyReport {
        config: config.clone(),
        train,
        probe_class,
        max_abs_influence: influence.max_abs,
        influence_zero_fraction: influence.zero_fraction,
        max_abs_alpha: art.alphas.alphas.inf_norm(),
        head_grad_inf_norm: art.alphas.source_grad_inf_norm,
        theta_residual: theta_residual(&art.student.head, &art.alphas, &art.bundle)?,
        decomposition_residual: explanation.residual,
        top_excitatory: explanation.excitatory.iter().map(|r| point(r.index, r.k)).collect(),
        top_inhibitory: explanation.inhibitory.iter().map(|r| point(r.index, r.k)).collect(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// `x,y,label` rows for plotting the training set.
pub fn points_csv(inputs: &DenseMatrix, labels: &[usize]) -> String {
    let mut out = String::from("x,y,label\n");
    for i in 0..inputs.rows() {
        out.push_str(&format!("{},{},{}\n", inputs.get(i, 0), inputs.get(i, 1), labels[i]));
    }
    out
}

/// One row per training point: index, alpha, then the map entries.
pub fn maps_csv(decomposition: &SensitivityDecomposition) -> String {
    let d = decomposition.total_map.len();
    let mut out = String::from("train_index,alpha");
    for k in 0..d {
        out.push_str(&format!(",m{k}"));
    }
    out.push('\n');
    out.push_str("total,");
    for v in &decomposition.total_map {
        out.push_str(&format!(",{v}"));
    }
    out.push('\n');
    for m in &decomposition.per_train_maps {
        out.push_str(&format!("{},{}", m.train_index, m.alpha));
        for v in &m.map {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_identity(d: usize) -> Mlp {
        Mlp {
            layers: vec![Layer {
                weights: DenseMatrix::identity(d),
                bias: vec![0.0; d],
            }],
            head: LastLayerWeights::zeros(2, d),
        }
    }

    #[test]
    fn identity_layer_has_identity_jacobian() {
        let m = linear_identity(3);
        let (f, j) = feature_and_input_jacobian(&m, &[0.5, 1.0, 2.0]);
        assert_eq!(f, vec![0.5, 1.0, 2.0]);
        assert_eq!(j, DenseMatrix::identity(3));
    }

    #[test]
    fn dead_units_give_zero_jacobian() {
        let mut m = linear_identity(2);
        m.layers[0].bias = vec![-100.0, -100.0];
        let (f, j) = feature_and_input_jacobian(&m, &[1.0, -1.0]);
        assert_eq!(f, vec![0.0, 0.0]);
        assert_eq!(j, DenseMatrix::zeros(2, 2));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let spec = MlpSpec {
            widths: vec![3, 7, 5],
            num_classes: 2,
        };
        let m = Mlp::init(&spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        while checked < 20 {
            let x: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            if m.trace(&x).pre.iter().flatten().any(|z| z.abs() < 1e-3) {
                continue;
            }
            let (_, j) = feature_and_input_jacobian(&m, &x);
            for k in 0..3 {
                let mut xp = x.clone();
                xp[k] += 1e-6;
                let mut xm = x.clone();
                xm[k] -= 1e-6;
                let (fp, fm) = (m.features(&xp), m.features(&xm));
                for r in 0..5 {
                    let fd = (fp[r] - fm[r]) / 2e-6;
                    let a = j.get(r, k);
                    assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3));
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let spec = MlpSpec {
            widths: vec![2, 4, 3],
            num_classes: 2,
        };
        let (xs, ys) = blobs_2d(4, [[-1.0, 0.0], [1.0, 0.5]], 0.5, 3);
        let m = Mlp::init(&spec, 5).unwrap();
        let (_, g) = m.loss_and_grad(&xs, &ys);
        let base = m.flatten();
        for k in 0..base.len() {
            let mut plus = m.clone();
            let mut p = base.clone();
            p[k] += 1e-6;
            plus.assign(&p);
            let mut minus = m.clone();
            p[k] -= 2e-6;
            minus.assign(&p);
            let fd = (plus.mean_loss(&xs, &ys) - minus.mean_loss(&xs, &ys)) / 2e-6;
            assert!((g[k] - fd).abs() <= 1e-5 * g[k].abs().max(fd.abs()).max(1e-3), "param {k}");
        }
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let spec = MlpSpec {
            widths: vec![2, 6, 4],
            num_classes: 2,
        };
        let (xs, ys) = blobs_2d(10, [[-3.0, 0.0], [3.0, 0.0]], 0.3, 1);
        let (m0, _) = train_toy(&spec, &xs, &ys, 0, 0.1, 9).unwrap();
        assert_eq!(m0, Mlp::init(&spec, 9).unwrap());
        let (a, _) = train_toy(&spec, &xs, &ys, 50, 0.1, 9).unwrap();
        let (b, _) = train_toy(&spec, &xs, &ys, 50, 0.1, 9).unwrap();
        assert_eq!(a.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn blobs_are_fitted_perfectly() {
        let spec = MlpSpec {
            widths: vec![2, 16, 8],
            num_classes: 2,
        };
        let (xs, ys) = blobs_2d(50, [[-3.0, 0.0], [3.0, 0.0]], 0.3, 0);
        let (_, s) = train_toy(&spec, &xs, &ys, 300, 0.1, 0).unwrap();
        assert_eq!(s.train_accuracy, 1.0);
    }

    #[test]
    fn plain_smoothgrad_is_the_gradient() {
        let config = ToyStudyConfig {
            epochs: 200,
            ..ToyStudyConfig::default()
        };
        let (art, _) = build_toy(&config).unwrap();
        let x = [2.5, 0.4];
        let dec = decompose_sensitivity(
            &art.student,
            &art.alphas,
            &art.bundle.train_features,
            &x,
            1,
            &SmoothGrad::plain(),
            config.grad_tol,
        )
        .unwrap();
        let (_, j) = feature_and_input_jacobian(&art.student, &x);
        let direct = j.transpose().matvec(art.student.head.theta1.row(1)).unwrap();
        assert_eq!(dec.total_map, direct);
        assert!(dec.relative_residual <= 1e-6);

        let noisy = SmoothGrad {
            num_samples: 8,
            noise_sigma: 0.5,
            seed: 4,
        };
        let dec = decompose_sensitivity(&art.student, &art.alphas, &art.bundle.train_features, &x, 1, &noisy, 1e-9)
            .unwrap();
        assert!(dec.relative_residual <= 1e-6);
    }

    #[test]
    fn stale_alphas_are_refused() {
        let config = ToyStudyConfig {
            epochs: 50,
            ..ToyStudyConfig::default()
        };
        let (mut art, _) = build_toy(&config).unwrap();
        art.alphas.source_grad_inf_norm = 1.0;
        let r = decompose_sensitivity(&art.student, &art.alphas, &art.bundle.train_features, &[0.0, 0.0], 0, &SmoothGrad::plain(), 1e-9);
        assert!(matches!(r, Err(Error::Staleness { .. })));
    }

    #[test]
    fn saturated_losses_are_not_rounded_away() {
        assert!(cross_entropy(&[50.0, 0.0], 0) > 0.0);
        assert!((cross_entropy(&[0.0, 0.0], 1) - 2f64.ln()).abs() < 1e-15);
    }
}
