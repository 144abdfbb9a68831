//! Wall-clock comparison of per-test-point representer and influence costs.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetBundle;
use crate::error::Result;
use crate::influence::{representer_values, InfluenceConfig, InfluenceEngine};
use crate::representer::compute_alphas;
use crate::solver::{fit, LossKind, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub samples: usize,
}

impl TimingStats {
    pub fn from_samples(seconds: &[f64]) -> Self {
        let (mean, std) = crate::debug_sim::mean_std(seconds);
        let mut sorted = seconds.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median = match sorted.len() {
            0 => 0.0,
            n if n % 2 == 1 => sorted[n / 2],
            n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        Self {
            mean,
            std,
            median,
            samples: seconds.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub fine_tuning_seconds: TimingStats,
    pub per_test_seconds: TimingStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub num_test_points: usize,
    pub seeds: Vec<u64>,
    pub solver: SolverConfig,
    pub influence: InfluenceConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let solver = SolverConfig::distillation();
        Self {
            num_test_points: 50,
            seeds: vec![0],
            influence: InfluenceConfig::with_lambda(solver.lambda),
            solver,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub representer: MethodTiming,
    pub influence: MethodTiming,
    /// Loss used for the representer fine-tuning solve.
    pub fine_tuning_loss: LossKind,
    pub n_train: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub threads: usize,
    pub environment: String,
}

impl BenchReport {
    /// Influence per-test mean over representer per-test mean.
    pub fn per_test_speedup(&self) -> f64 {
        self.influence.per_test_seconds.mean / self.representer.per_test_seconds.mean.max(1e-300)
    }

    pub fn to_table(&self) -> String {
        let row = |name: &str, m: &MethodTiming| {
            format!(
                "| {:<18} | {:>10.4} ± {:<10.4} | {:>10.6} ± {:<10.6} | {:>10.6} |\n",
                name,
                m.fine_tuning_seconds.mean,
                m.fine_tuning_seconds.std,
                m.per_test_seconds.mean,
                m.per_test_seconds.std,
                m.per_test_seconds.median,
            )
        };
        let mut out = String::new();
        out.push_str("| Method             | Fine-tuning (s)           | Per test point (s)        | Median (s) |\n");
        out.push_str("|--------------------|---------------------------|---------------------------|------------|\n");
        out.push_str(&row("Influence function", &self.influence));
        out.push_str(&row("Representer", &self.representer));
        out.push_str(&format!(
            "n={} f={} c={} threads={} ({})\n",
            self.n_train, self.feature_dim, self.num_classes, self.threads, self.environment
        ));
        out
    }
}

pub fn environment_note() -> String {
    format!(
        "{}-{}, {} logical cpus, {} build",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        if cfg!(debug_assertions) { "debug" } else { "optimized" }
    )
}

/// Times both pipelines single-threaded.
///
/// Representer: one fine-tuning solve per seed (softmax distillation when
/// the bundle has teacher logits, cross-entropy otherwise), then per test
/// point one pass of `n` inner products. Influence: no fine-tuning (the
/// fitted head is taken as given), then per test point one inverse-HVP
/// solve and `n` inner products. One warm-up point per method is discarded.
pub fn run_bench(bundle: &DatasetBundle, config: &BenchConfig) -> Result<BenchReport> {
    let loss = if bundle.given_train_logits.is_some() {
        LossKind::SoftmaxDistill
    } else {
        LossKind::CrossEntropyWithLabels
    };
    let mut fine_tuning = Vec::new();
    let mut rep_per_test = Vec::new();
    let mut infl_per_test = Vec::new();
    for &seed in &config.seeds {
        let started = Instant::now();
        let (weights, _) = fit(bundle, loss, &config.solver)?;
        let alphas = compute_alphas(&weights, bundle, loss, config.solver.lambda, config.solver.grad_tol)?;
        fine_tuning.push(started.elapsed().as_secs_f64());

        let count = config.num_test_points.min(bundle.n_test());
        if count == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = index::sample(&mut rng, bundle.n_test(), count).into_vec();

        std::hint::black_box(representer_values(&weights, &alphas, bundle, points[0])?);
        for &t in &points {
            let started = Instant::now();
            std::hint::black_box(representer_values(&weights, &alphas, bundle, t)?);
            rep_per_test.push(started.elapsed().as_secs_f64());
        }

        let influence = InfluenceConfig {
            lambda: config.solver.lambda,
            ..config.influence
        };
        let warm = InfluenceEngine::new(&weights, bundle, influence)?;
        std::hint::black_box(warm.report(points[0])?);
        let engine = InfluenceEngine::new(&weights, bundle, influence)?;
        for &t in &points {
            let started = Instant::now();
            std::hint::black_box(engine.report(t)?);
            infl_per_test.push(started.elapsed().as_secs_f64());
        }
    }
    Ok(BenchReport {
        representer: MethodTiming {
            fine_tuning_seconds: TimingStats::from_samples(&fine_tuning),
            per_test_seconds: TimingStats::from_samples(&rep_per_test),
        },
        influence: MethodTiming {
            fine_tuning_seconds: TimingStats::from_samples(&vec![0.0; config.seeds.len()]),
            per_test_seconds: TimingStats::from_samples(&infl_per_test),
        },
        fine_tuning_loss: loss,
        n_train: bundle.n_train(),
        feature_dim: bundle.feature_dim(),
        num_classes: bundle.num_classes(),
        threads: 1,
        environment: environment_note(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::GaussianClasses;

    fn bundle() -> DatasetBundle {
        GaussianClasses {
            n_train: 120,
            n_test: 10,
            feature_dim: 8,
            num_classes: 3,
            separation: 2.0,
            noise: 1.0,
            seed: 1,
        }
        .generate_with_teacher(1.0)
        .unwrap()
    }

    #[test]
    fn zero_test_points_report_fine_tuning_only() {
        let r = run_bench(
            &bundle(),
            &BenchConfig {
                num_test_points: 0,
                ..BenchConfig::default()
            },
        )
        .unwrap();
        assert_eq!(r.representer.fine_tuning_seconds.samples, 1);
        assert!(r.representer.fine_tuning_seconds.mean > 0.0);
        assert_eq!(r.representer.per_test_seconds.samples, 0);
        assert_eq!(r.influence.per_test_seconds.samples, 0);
        assert_eq!(r.influence.fine_tuning_seconds.mean, 0.0);
    }

    #[test]
    fn sampled_points_are_timed() {
        let r = run_bench(
            &bundle(),
            &BenchConfig {
                num_test_points: 4,
                seeds: vec![0, 1],
                ..BenchConfig::default()
            },
        )
        .unwrap();
        assert_eq!(r.representer.per_test_seconds.samples, 8);
        assert_eq!(r.influence.per_test_seconds.samples, 8);
        assert_eq!(r.fine_tuning_loss, LossKind::SoftmaxDistill);
        assert!(r.to_table().contains("Representer"));
        let s = TimingStats::from_samples(&[3.0, 1.0, 2.0, 10.0]);
        assert_eq!(s.median, 2.5);
        assert!(s.std >= 0.0);
    }
}
