//! Simulated dataset debugging: corrupt labels, rank training points by a
//! metric, "inspect" a prefix of the ranking restoring true labels, refit and
//! record test accuracy and the fraction of flips recovered.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{flip_labels, DatasetBundle};
use crate::error::{Error, Result};
use crate::influence::{argmax, InfluenceConfig, InfluenceEngine};
use crate::representer::{compute_alphas, global_importance};
use crate::solver::{fit, LastLayerWeights, LossKind, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Representer,
    Influence,
    Random,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Representer, Metric::Influence, Metric::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Representer => "representer",
            Metric::Influence => "influence",
            Metric::Random => "random",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "representer" => Ok(Metric::Representer),
            "influence" => Ok(Metric::Influence),
            "random" => Ok(Metric::Random),
            other => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }
}

pub const INFLUENCE_RANKING_NOTE: &str =
    "influence ranking uses self-influence |influence(i, i)| on the training loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub metrics: Vec<Metric>,
    pub inspect_fractions: Vec<f64>,
    /// Labels flipped per seed; `None` uses the bundle's own ground truth.
    pub corruption_fraction: Option<f64>,
    pub num_seeds: usize,
    pub base_seed: u64,
    pub lambda: f64,
    pub solver: SolverConfig,
    pub influence: InfluenceConfig,
    /// Run seeds on separate threads. Results do not depend on this.
    pub parallel: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            inspect_fractions: (1..=10).map(|k| k as f64 * 0.05).collect(),
            corruption_fraction: Some(0.4),
            num_seeds: 5,
            base_seed: 0,
            lambda: 1e-2,
            solver: SolverConfig::with_lambda(1e-2),
            influence: InfluenceConfig::with_lambda(1e-2),
            parallel: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_seeds == 0 {
            return Err(Error::InvalidConfig("num_seeds must be at least 1".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::InvalidConfig("no metrics selected".into()));
        }
        let ascending = self.inspect_fractions.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.inspect_fractions.iter().all(|f| *f > 0.0 && *f <= 1.0);
        if !ascending || !in_range {
            return Err(Error::InvalidConfig(
                "inspect fractions must be strictly ascending within (0, 1]".into(),
            ));
        }
        if let Some(c) = self.corruption_fraction {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidConfig(format!("corruption fraction {c} outside [0, 1]")));
            }
        }
        self.solver.validate()?;
        self.influence.validate()
    }

    fn solver(&self) -> SolverConfig {
        SolverConfig {
            lambda: self.lambda,
            ..self.solver.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction_checked: f64,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
    pub mean_flips_recovered: f64,
    pub std_flips_recovered: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCurve {
    pub seed: u64,
    pub test_accuracy: Vec<f64>,
    pub flips_recovered: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub metric: Metric,
    pub points: Vec<CurvePoint>,
    pub per_seed: Vec<SeedCurve>,
}

impl MetricCurve {
    pub fn at(&self, fraction: f64) -> Option<&CurvePoint> {
        self.points
            .iter()
            .find(|p| (p.fraction_checked - fraction).abs() < 1e-9)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetadata {
    pub influence_ranking: String,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_test: usize,
    /// Mean test accuracy of the model fitted on corrupted labels.
    pub corrupted_test_accuracy: f64,
    /// Mean test accuracy of the model fitted on the true labels.
    pub clean_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCurves {
    pub config: SimConfig,
    pub metadata: SimMetadata,
    pub curves: Vec<MetricCurve>,
}

impl SimCurves {
    pub fn curve(&self, metric: Metric) -> Option<&MetricCurve> {
        self.curves.iter().find(|c| c.metric == metric)
    }

    /// One row per metric × checkpoint.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "metric,fraction_checked,mean_test_accuracy,std_test_accuracy,mean_flips_recovered,std_flips_recovered\n",
        );
        for c in &self.curves {
            for p in &c.points {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    c.metric.as_str(),
                    p.fraction_checked,
                    p.mean_test_accuracy,
                    p.std_test_accuracy,
                    p.mean_flips_recovered,
                    p.std_flips_recovered
                ));
            }
        }
        out
    }
}

pub fn test_accuracy(weights: &LastLayerWeights, bundle: &DatasetBundle) -> f64 {
    if bundle.n_test() == 0 {
        return 0.0;
    }
    let hits = (0..bundle.n_test())
        .filter(|&t| argmax(&weights.logits_for(bundle.test_features.row(t))) == bundle.test_labels[t])
        .count();
    hits as f64 / bundle.n_test() as f64
}

fn random_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0f5a_4d0e
}

/// Full inspection order for `metric` given a head fitted on the bundle's
/// current labels. Ties go to the lower index.
pub fn rank_for_metric(
    metric: Metric,
    weights: &LastLayerWeights,
    bundle: &DatasetBundle,
    lambda: f64,
    grad_tol: f64,
    influence: &InfluenceConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    match metric {
        Metric::Representer => {
            let alphas = compute_alphas(weights, bundle, LossKind::CrossEntropyWithLabels, lambda, grad_tol)?;
            Ok(global_importance(&alphas, &bundle.train_labels))
        }
        Metric::Influence => {
            let config = InfluenceConfig {
                lambda,
                ..*influence
            };
            let scores = InfluenceEngine::new(weights, bundle, config)?.self_influence()?;
            Ok(rank_by_magnitude(&scores))
        }
        Metric::Random => {
            let mut order: Vec<usize> = (0..bundle.n_train()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(random_seed(seed)));
            Ok(order)
        }
    }
}

/// Indices sorted by `|score|` descending, ties by ascending index.
pub fn rank_by_magnitude(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .abs()
            .partial_cmp(&scores[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

struct SeedOutcome {
    seed: u64,
    corrupted_accuracy: f64,
    clean_accuracy: f64,
    per_metric: Vec<(Vec<f64>, Vec<f64>)>,
}

fn corrupted_for_seed(bundle: &DatasetBundle, config: &SimConfig, seed: u64) -> Result<DatasetBundle> {
    match config.corruption_fraction {
        Some(fraction) => {
            let mut clean = bundle.clone();
            clean.ground_truth_train_labels = None;
            clean.corruption = None;
            if let Some(gt) = &bundle.ground_truth_train_labels {
                clean.train_labels = gt.clone();
            }
            Ok(flip_labels(&clean, fraction, seed)?.0)
        }
        None => {
            if bundle.ground_truth_train_labels.is_none() {
                return Err(Error::MissingGroundTruth);
            }
            Ok(bundle.clone())
        }
    }
}

fn fit_ce(bundle: &DatasetBundle, solver: &SolverConfig) -> Result<LastLayerWeights> {
    Ok(fit(bundle, LossKind::CrossEntropyWithLabels, solver)?.0)
}

fn run_seed(bundle: &DatasetBundle, config: &SimConfig, seed: u64) -> Result<SeedOutcome> {
    let solver = config.solver();
    let corrupted = corrupted_for_seed(bundle, config, seed)?;
    let truth = corrupted
        .ground_truth_train_labels
        .clone()
        .ok_or(Error::MissingGroundTruth)?;
    let flipped: Vec<usize> = (0..corrupted.n_train())
        .filter(|&i| corrupted.train_labels[i] != truth[i])
        .collect();
    let recovered = |labels: &[usize]| {
        if flipped.is_empty() {
            1.0
        } else {
            flipped.iter().filter(|&&i| labels[i] == truth[i]).count() as f64 / flipped.len() as f64
        }
    };

    let weights = fit_ce(&corrupted, &solver)?;
    let corrupted_accuracy = test_accuracy(&weights, &corrupted);
    let clean_accuracy = test_accuracy(&fit_ce(&corrupted.with_train_labels(truth.clone())?, &solver)?, &corrupted);

    let n = corrupted.n_train();
    let mut per_metric = Vec::with_capacity(config.metrics.len());
    for &metric in &config.metrics {
        let ranking = rank_for_metric(
            metric,
            &weights,
            &corrupted,
            config.lambda,
            solver.grad_tol,
            &config.influence,
            seed,
        )?;
        let mut labels = corrupted.train_labels.clone();
        let mut inspected = 0;
        let mut accuracy = Vec::with_capacity(config.inspect_fractions.len());
        let mut recovery = Vec::with_capacity(config.inspect_fractions.len());
        for &fraction in &config.inspect_fractions {
            let upto = ((fraction * n as f64).round() as usize).min(n);
            for &i in &ranking[inspected..upto.max(inspected)] {
                labels[i] = truth[i];
            }
            inspected = upto.max(inspected);
            let refit = fit_ce(&corrupted.with_train_labels(labels.clone())?, &solver)?;
            accuracy.push(test_accuracy(&refit, &corrupted));
            recovery.push(recovered(&labels));
        }
        per_metric.push((accuracy, recovery));
    }
    Ok(SeedOutcome {
        seed,
        corrupted_accuracy,
        clean_accuracy,
        per_metric,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn run_sim(bundle: &DatasetBundle, config: &SimConfig) -> Result<SimCurves> {
    config.validate()?;
    let seeds: Vec<u64> = (0..config.num_seeds as u64).map(|s| config.base_seed + s).collect();
    let outcomes: Vec<SeedOutcome> = if config.parallel && seeds.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&s| scope.spawn(move || run_seed(bundle, config, s)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("simulation thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        seeds
            .iter()
            .map(|&s| run_seed(bundle, config, s))
            .collect::<Result<Vec<_>>>()?
    };

    let curves = config
        .metrics
        .iter()
        .enumerate()
        .map(|(m, &metric)| {
            let per_seed: Vec<SeedCurve> = outcomes
                .iter()
                .map(|o| SeedCurve {
                    seed: o.seed,
                    test_accuracy: o.per_metric[m].0.clone(),
                    flips_recovered: o.per_metric[m].1.clone(),
                })
                .collect();
            let points = config
                .inspect_fractions
                .iter()
                .enumerate()
                .map(|(k, &fraction)| {
                    let acc: Vec<f64> = per_seed.iter().map(|s| s.test_accuracy[k]).collect();
                    let rec: Vec<f64> = per_seed.iter().map(|s| s.flips_recovered[k]).collect();
                    let (mean_test_accuracy, std_test_accuracy) = mean_std(&acc);
                    let (mean_flips_recovered, std_flips_recovered) = mean_std(&rec);
                    CurvePoint {
                        fraction_checked: fraction,
                        mean_test_accuracy,
                        std_test_accuracy,
                        mean_flips_recovered,
                        std_flips_recovered,
                    }
                })
                .collect();
            MetricCurve {
                metric,
                points,
                per_seed,
            }
        })
        .collect();

    let corrupted: Vec<f64> = outcomes.iter().map(|o| o.corrupted_accuracy).collect();
    let clean: Vec<f64> = outcomes.iter().map(|o| o.clean_accuracy).collect();
    Ok(SimCurves {
        config: config.clone(),
        metadata: SimMetadata {
            influence_ranking: INFLUENCE_RANKING_NOTE.into(),
            seeds,
            n_train: bundle.n_train(),
            n_test: bundle.n_test(),
            corrupted_test_accuracy: mean_std(&corrupted).0,
            clean_test_accuracy: mean_std(&clean).0,
        },
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::GaussianClasses;

    fn small() -> DatasetBundle {
        GaussianClasses {
            n_train: 60,
            n_test: 40,
            feature_dim: 5,
            num_classes: 2,
            separation: 1.5,
            noise: 1.0,
            seed: 3,
        }
        .generate()
        .unwrap()
    }

    fn quick(fractions: Vec<f64>, corruption: f64) -> SimConfig {
        SimConfig {
            inspect_fractions: fractions,
            corruption_fraction: Some(corruption),
            num_seeds: 2,
            ..SimConfig::default()
        }
    }

    #[test]
    fn full_inspection_recovers_everything() {
        let b = small();
        let r = run_sim(&b, &quick(vec![0.5, 1.0], 0.4)).unwrap();
        for c in &r.curves {
            let last = c.points.last().unwrap();
            assert_eq!(last.mean_flips_recovered, 1.0);
            assert_eq!(last.std_flips_recovered, 0.0);
            assert!((last.mean_test_accuracy - r.metadata.clean_test_accuracy).abs() < 1e-12);
        }
    }

    #[test]
    fn no_corruption_gives_flat_curves() {
        let b = small();
        let r = run_sim(&b, &quick(vec![0.1, 0.3, 0.6], 0.0)).unwrap();
        for c in &r.curves {
            for p in &c.points {
                assert!((p.mean_test_accuracy - r.metadata.clean_test_accuracy).abs() < 1e-12);
                assert_eq!(p.mean_flips_recovered, 1.0);
            }
        }
    }

    #[test]
    fn recovery_is_monotone_and_seeds_are_isolated() {
        let b = small();
        let config = quick(vec![0.1, 0.2, 0.4, 0.8], 0.3);
        let serial = run_sim(&b, &config).unwrap();
        let parallel = run_sim(&b, &SimConfig { parallel: true, ..config.clone() }).unwrap();
        assert_eq!(serial.curves, parallel.curves);
        for c in &serial.curves {
            for s in &c.per_seed {
                assert!(s.flips_recovered.windows(2).all(|w| w[0] <= w[1]));
                assert!(s.flips_recovered.iter().chain(&s.test_accuracy).all(|v| (0.0..=1.0).contains(v)));
            }
        }
        // a seed's curve does not depend on which other seeds ran
        let single = run_sim(&b, &SimConfig { num_seeds: 1, base_seed: 1, ..config }).unwrap();
        assert_eq!(single.curves[0].per_seed[0], serial.curves[0].per_seed[1]);
    }

    #[test]
    fn ranking_rules() {
        let b = small();
        let (w, _) = fit(&b, LossKind::CrossEntropyWithLabels, &SolverConfig::default()).unwrap();
        let infl = InfluenceConfig::default();
        let r1 = rank_for_metric(Metric::Random, &w, &b, 1e-2, 1e-9, &infl, 7).unwrap();
        let r2 = rank_for_metric(Metric::Random, &w, &b, 1e-2, 1e-9, &infl, 7).unwrap();
        assert_eq!(r1, r2);
        let mut sorted = r1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..b.n_train()).collect::<Vec<_>>());

        let rep = rank_for_metric(Metric::Representer, &w, &b, 1e-2, 1e-9, &infl, 0).unwrap();
        let a = compute_alphas(&w, &b, LossKind::CrossEntropyWithLabels, 1e-2, 1e-9).unwrap();
        assert_eq!(rep, global_importance(&a, &b.train_labels));

        assert_eq!(rank_by_magnitude(&[0.0, 0.0, 0.0]), vec![0, 1, 2]);
        assert_eq!(rank_by_magnitude(&[0.1, -0.5, 0.3]), vec![1, 2, 0]);
    }

    #[test]
    fn ground_truth_is_required_without_corruption() {
        let b = small();
        let config = SimConfig {
            corruption_fraction: None,
            num_seeds: 1,
            ..SimConfig::default()
        };
        assert!(matches!(run_sim(&b, &config), Err(Error::MissingGroundTruth)));
    }

    #[test]
    fn csv_has_one_row_per_metric_and_checkpoint() {
        let b = small();
        let r = run_sim(&b, &quick(vec![0.25, 0.5], 0.2)).unwrap();
        assert_eq!(r.to_csv().lines().count(), 1 + 3 * 2);
        assert!(r.metadata.influence_ranking.contains("self-influence"));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let b = small();
        for config in [
            SimConfig { num_seeds: 0, ..SimConfig::default() },
            SimConfig { inspect_fractions: vec![0.3, 0.2], ..SimConfig::default() },
            SimConfig { inspect_fractions: vec![0.0, 0.2], ..SimConfig::default() },
        ] {
            assert!(matches!(run_sim(&b, &config), Err(Error::InvalidConfig(_))));
        }
    }
}
