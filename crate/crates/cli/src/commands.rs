use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use repkit_core::bench::{run_bench, BenchConfig};
use repkit_core::dataset::{flip_labels, load_bundle, save_bundle, DatasetBundle, Split};
use repkit_core::debug_sim::{run_sim, test_accuracy, Metric, SimConfig};
use repkit_core::influence::{
    argmax, value_distribution, InfluenceConfig, InfluenceEngine, ValueMethod,
};
use repkit_core::representer::{
    compute_alphas, decomposition_bound, explain, fidelity_report,
    theta_residual, AlphaMatrix,
};
use repkit_core::rpmx;
use repkit_core::solver::{fit, objective_and_grad, Finisher, LastLayerWeights, LossKind, SolverConfig};
use repkit_core::synth::GaussianClasses;
use repkit_core::toy_net::{
    build_toy, decompose_sensitivity, maps_csv, points_csv, toy_stability_study, SmoothGrad, ToyStudyConfig,
};
use repkit_core::Error;
use repkit_service::{ServiceConfig, Session};

use crate::args::*;
use crate::error::{CliError, Result};
use crate::run::Run;

/// What a command hands back to `main`.
pub struct Outcome {
    pub report: Value,
    pub summary: String,
    pub exit_code: u8,
}

impl Outcome {
    fn ok(report: Value, summary: String) -> Self {
        Self {
            report,
            summary,
            exit_code: 0,
        }
    }
}

/// Threads available to commands that parallelize internally.
pub fn threads() -> Result<usize> {
    match std::env::var("REPKIT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("REPKIT_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn parse_loss(s: &str) -> Result<LossKind> {
    s.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

fn load_weights(path: &Path) -> Result<LastLayerWeights> {
    Ok(LastLayerWeights {
        theta1: rpmx::load_matrix(path)?,
    })
}

/// Alphas for `weights`, either recomputed or loaded and checked against
/// the weights. Uncertified weights are refused in both cases.
fn certified_alphas(
    weights: &LastLayerWeights,
    bundle: &DatasetBundle,
    loss: LossKind,
    lambda: f64,
    tol: f64,
    stored: Option<&Path>,
) -> Result<AlphaMatrix> {
    let Some(path) = stored else {
        return Ok(compute_alphas(weights, bundle, loss, lambda, tol)?);
    };
    let fresh = compute_alphas(weights, bundle, loss, lambda, tol)?;
    let alphas = AlphaMatrix {
        alphas: rpmx::load_matrix(path)?,
        ..fresh
    };
    let residual = theta_residual(weights, &alphas, bundle)?;
    if !(residual <= 1e-6) {
        return Err(CliError::StaleAlphas(residual));
    }
    Ok(alphas)
}

fn finish<T: Serialize>(run: &mut Run, name: &str, result: &T, summary: String) -> Result<Outcome> {
    let report = run.envelope(result)?;
    run.write_json(name, &report)?;
    Ok(Outcome::ok(report, summary))
}

pub fn synth(p: SynthParams, run: &mut Run) -> Result<Outcome> {
    let out = run.require_out()?.to_path_buf();
    let gen = GaussianClasses {
        n_train: p.n_train,
        n_test: p.n_test,
        feature_dim: p.feature_dim,
        num_classes: p.num_classes,
        separation: p.separation,
        noise: p.noise,
        seed: p.seed,
    };
    let mut bundle = match p.teacher_scale {
        Some(scale) => gen.generate_with_teacher(scale)?,
        None => gen.generate()?,
    };
    if p.bias {
        bundle = bundle.with_bias_feature();
    }
    if let Some(fraction) = p.corruption {
        bundle = flip_labels(&bundle, fraction, p.corruption_seed)?.0;
    }
    let manifest = save_bundle(&bundle, &out.join("bundle"))?;
    let result = json!({
        "manifest": manifest,
        "n_train": bundle.n_train(),
        "n_test": bundle.n_test(),
        "feature_dim": bundle.feature_dim(),
        "num_classes": bundle.num_classes(),
        "flipped": bundle.corruption.as_ref().map_or(0, |c| c.flipped_indices.len()),
    });
    let summary = format!("wrote {}", manifest.display());
    finish(run, "synth.json", &result, summary)
}

pub fn ingest(p: IngestParams, run: &mut Run) -> Result<Outcome> {
    let bundle = load_bundle(&p.manifest)?;
    run.copy_manifest(&p.manifest)?;
    let normalized = match run.out_dir() {
        Some(dir) => Some(save_bundle(&bundle, &dir.join("bundle"))?),
        None => None,
    };
    let result = json!({
        "name": bundle.manifest.name,
        "n_train": bundle.n_train(),
        "n_test": bundle.n_test(),
        "feature_dim": bundle.feature_dim(),
        "num_classes": bundle.num_classes(),
        "has_given_logits": bundle.given_train_logits.is_some(),
        "has_ground_truth": bundle.ground_truth_train_labels.is_some(),
        "corrupted": bundle.corruption.is_some(),
        "warnings": bundle.warnings,
        "normalized_manifest": normalized,
    });
    let summary = format!(
        "{}: n_train={} n_test={} f={} c={} warnings={}",
        bundle.manifest.name,
        bundle.n_train(),
        bundle.n_test(),
        bundle.feature_dim(),
        bundle.num_classes(),
        bundle.warnings.len()
    );
    finish(run, "ingest.json", &result, summary)
}

pub fn fit_cmd(p: FitParams, run: &mut Run) -> Result<Outcome> {
    let loss = parse_loss(&p.loss)?;
    let finisher = match p.finisher.as_str() {
        "gd" => Finisher::GradientDescent,
        "lbfgs" => Finisher::Lbfgs {
            memory: p.lbfgs_memory,
        },
        other => return Err(CliError::Usage(format!("unknown finisher {other:?} (gd or lbfgs)"))),
    };
    let config = SolverConfig {
        lambda: p.lambda,
        grad_tol: p.tol,
        max_iters: p.max_iters,
        finisher,
        ..SolverConfig::default()
    };
    let bundle = load_bundle(&p.manifest)?;
    run.copy_manifest(&p.manifest)?;
    let (weights, report) = fit(&bundle, loss, &config)?;
    run.write_matrix("weights.rpmx", &weights.theta1)?;
    let result = json!({
        "loss": loss,
        "lambda": p.lambda,
        "report": report,
        "test_accuracy": test_accuracy(&weights, &bundle),
        "weights_file": "weights.rpmx",
    });
    let summary = format!(
        "{} after {} iterations: objective {:e}, grad inf-norm {:e}",
        if report.converged { "converged" } else { "NOT converged" },
        report.iterations,
        report.final_objective,
        report.grad_inf_norm
    );
    let mut outcome = finish(run, "fit.json", &result, summary)?;
    if !report.converged {
        outcome.exit_code = 3;
    }
    Ok(outcome)
}

pub fn alphas_cmd(p: AlphasParams, run: &mut Run) -> Result<Outcome> {
    let loss = parse_loss(&p.loss)?;
    let bundle = load_bundle(&p.manifest)?;
    let weights = load_weights(&p.weights)?;
    let alphas = compute_alphas(&weights, &bundle, loss, p.lambda, p.tol)?;
    run.write_matrix("alphas.rpmx", &alphas.alphas)?;
    let residual = theta_residual(&weights, &alphas, &bundle)?;
    let result = json!({
        "loss": loss,
        "lambda": p.lambda,
        "source_grad_inf_norm": alphas.source_grad_inf_norm,
        "theta_residual": residual,
        "max_abs_alpha": alphas.alphas.inf_norm(),
        "alphas_file": "alphas.rpmx",
    });
    let summary = format!(
        "alphas {}x{}, theta residual {:e}",
        alphas.n_train(),
        alphas.num_classes(),
        residual
    );
    finish(run, "alphas.json", &result, summary)
}

pub fn explain_cmd(p: ExplainParams, run: &mut Run) -> Result<Outcome> {
    let loss = parse_loss(&p.loss)?;
    let bundle = load_bundle(&p.manifest)?;
    let weights = load_weights(&p.weights)?;
    if p.test >= bundle.n_test() {
        return Err(Error::IndexOutOfRange {
            index: p.test,
            len: bundle.n_test(),
        }
        .into());
    }
    let alphas = certified_alphas(&weights, &bundle, loss, p.lambda, p.tol, p.alphas.as_deref())?;
    let feature = bundle.test_features.row(p.test);
    let predicted = argmax(&weights.logits_for(feature));
    let class = p.class.unwrap_or(predicted);
    let e = explain(&weights, &alphas, &bundle, p.test, class, p.top_k)?;
    let fmt = |v: &[repkit_core::representer::RankedContribution]| {
        v.iter()
            .map(|r| format!("{}({:+.4e})", r.index, r.k))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let summary = format!(
        "test {} class {} (predicted {})\n  excitatory: {}\n  inhibitory: {}\n  residual {:e}",
        p.test,
        class,
        predicted,
        fmt(&e.excitatory),
        fmt(&e.inhibitory),
        e.residual
    );
    let result = json!({
        "explanation": e,
        "predicted_class": predicted,
        "residual_bound": decomposition_bound(p.tol, feature, p.lambda),
    });
    finish(run, "explain.json", &result, summary)
}

pub fn fidelity_cmd(p: FidelityParams, run: &mut Run) -> Result<Outcome> {
    let loss = parse_loss(&p.loss)?;
    let bundle = load_bundle(&p.manifest)?;
    let weights = load_weights(&p.weights)?;
    let alphas = certified_alphas(&weights, &bundle, loss, p.lambda, p.tol, p.alphas.as_deref())?;
    let train = fidelity_report(&weights, &alphas, &bundle, Split::Train, p.tol)?;
    let test = fidelity_report(&weights, &alphas, &bundle, Split::Test, p.tol)?;
    let summary = format!(
        "pooled pearson: train {:.6}, test {:.6}",
        train.pooled_pearson, test.pooled_pearson
    );
    finish(run, "fidelity.json", &json!({ "train": train, "test": test }), summary)
}

pub fn influence_cmd(p: InfluenceParams, run: &mut Run) -> Result<Outcome> {
    let loss = parse_loss(&p.loss)?;
    let bundle = load_bundle(&p.manifest)?;
    let weights = load_weights(&p.weights)?;
    let (_, grad) = objective_and_grad(&weights, &bundle, loss, p.lambda)?;
    if !(grad.inf_norm() <= p.tol) {
        return Err(Error::Staleness {
            grad_inf_norm: grad.inf_norm(),
            grad_tol: p.tol,
        }
        .into());
    }
    let config = InfluenceConfig {
        damping: p.damping,
        cg_tol: p.cg_tol,
        ..InfluenceConfig::with_lambda(p.lambda)
    };
    let report = InfluenceEngine::new(&weights, &bundle, config)?.report(p.test)?;
    let distributions = match p.distribution {
        Some(count) => {
            let tests: Vec<usize> = (0..count.min(bundle.n_test())).collect();
            let alphas = compute_alphas(&weights, &bundle, loss, p.lambda, p.tol)?;
            Some(json!({
                "influence": value_distribution(&tests, &weights, None, &bundle, &config, ValueMethod::Influence)?,
                "representer": value_distribution(&tests, &weights, Some(&alphas), &bundle, &config, ValueMethod::Representer)?,
            }))
        }
        None => None,
    };
    let summary = format!(
        "test {}: max |influence| {:e}, zero fraction {}",
        p.test, report.max_abs, report.zero_fraction
    );
    finish(
        run,
        "influence.json",
        &json!({ "report": report, "distributions": distributions }),
        summary,
    )
}

pub fn debug_sim_cmd(p: DebugSimParams, run: &mut Run) -> Result<Outcome> {
    let metrics = p
        .metrics
        .iter()
        .map(|m| m.parse::<Metric>().map_err(|e| CliError::Usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let bundle = load_bundle(&p.manifest)?;
    run.copy_manifest(&p.manifest)?;
    let config = SimConfig {
        metrics,
        inspect_fractions: p.fractions.clone(),
        corruption_fraction: (!p.use_ground_truth).then_some(p.corruption),
        num_seeds: p.seeds,
        base_seed: p.base_seed,
        lambda: p.lambda,
        solver: SolverConfig {
            grad_tol: p.tol,
            ..SolverConfig::with_lambda(p.lambda)
        },
        influence: InfluenceConfig {
            damping: p.damping,
            ..InfluenceConfig::with_lambda(p.lambda)
        },
        parallel: threads()? > 1,
    };
    let curves = run_sim(&bundle, &config)?;
    run.write_csv("curves.csv", &curves.to_csv())?;
    let mut result = serde_json::to_value(&curves).expect("json");
    // scheduling only; the curves do not depend on it
    if let Some(cfg) = result.get_mut("config").and_then(Value::as_object_mut) {
        cfg.remove("parallel");
    }
    let mut summary = String::from("metric       checked  accuracy  recovered\n");
    for c in &curves.curves {
        for pt in &c.points {
            summary.push_str(&format!(
                "{:<12} {:>7.2}  {:>8.4}  {:>9.4}\n",
                c.metric.as_str(),
                pt.fraction_checked,
                pt.mean_test_accuracy,
                pt.mean_flips_recovered
            ));
        }
    }
    finish(run, "sim.json", &result, summary.trim_end().to_string())
}

fn probe(v: &[f64]) -> Result<[f64; 2]> {
    match v {
        [x, y] => Ok([*x, *y]),
        _ => Err(CliError::Usage(format!("--probe takes two values, got {}", v.len()))),
    }
}

fn toy_config(seed: u64, epochs: usize, lambda: f64, probe_xy: [f64; 2]) -> ToyStudyConfig {
    ToyStudyConfig {
        seed,
        epochs,
        lambda,
        probe: probe_xy,
        ..ToyStudyConfig::default()
    }
}

pub fn toy_study_cmd(p: ToyStudyParams, run: &mut Run) -> Result<Outcome> {
    let config = ToyStudyConfig {
        n_per_class: p.n_per_class,
        sigma: p.sigma,
        top_k: p.top_k,
        ..toy_config(p.seed, p.epochs, p.lambda, probe(&p.probe)?)
    };
    let report = toy_stability_study(&config)?;
    let (art, _) = build_toy(&config)?;
    run.write_csv("points.csv", &points_csv(&art.inputs, &art.labels))?;
    let mut result = serde_json::to_value(&report).expect("json");
    // wall-clock time is not part of the reproducible report
    if let Some(obj) = result.as_object_mut() {
        obj.remove("seconds");
    }
    let summary = format!(
        "max |influence| {:e}, max |alpha| {:e}, probe class {}, top excitatory {:?}",
        report.max_abs_influence,
        report.max_abs_alpha,
        report.probe_class,
        report.top_excitatory.iter().map(|t| (t.index, t.label)).collect::<Vec<_>>()
    );
    finish(run, "toy_report.json", &result, summary)
}

pub fn sensitivity_cmd(p: SensitivityParams, run: &mut Run) -> Result<Outcome> {
    let config = toy_config(p.seed, p.epochs, p.lambda, probe(&p.probe)?);
    let (art, _) = build_toy(&config)?;
    let smoothgrad = if p.plain {
        SmoothGrad::plain()
    } else {
        let base = SmoothGrad::default_for(&art.inputs, p.smooth_seed);
        SmoothGrad {
            num_samples: p.samples,
            noise_sigma: p.sigma.unwrap_or(base.noise_sigma),
            seed: p.smooth_seed,
        }
    };
    let class = p.class.unwrap_or(art.bundle.test_labels[0]);
    let d = decompose_sensitivity(
        &art.student,
        &art.alphas,
        &art.bundle.train_features,
        &config.probe,
        class,
        &smoothgrad,
        config.grad_tol,
    )?;
    run.write_csv("maps.csv", &maps_csv(&d))?;
    let summary = format!(
        "class {}: total map {:?}, relative residual {:e}",
        class, d.total_map, d.relative_residual
    );
    let result = json!({
        "smoothgrad": smoothgrad,
        "summed_maps": d.summed_maps(),
        "decomposition": d,
    });
    finish(run, "sensitivity.json", &result, summary)
}

pub fn bench_cmd(p: BenchParams, run: &mut Run) -> Result<Outcome> {
    let bundle = match &p.manifest {
        Some(path) => load_bundle(path)?,
        None => GaussianClasses {
            n_train: 1000,
            n_test: 100,
            feature_dim: 128,
            num_classes: 10,
            separation: 2.0,
            noise: 1.0,
            seed: 0,
        }
        .generate_with_teacher(1.0)?,
    };
    let config = BenchConfig {
        num_test_points: p.test_points,
        seeds: p.seeds.clone(),
        solver: SolverConfig::with_lambda(p.lambda),
        influence: InfluenceConfig {
            damping: p.damping,
            ..InfluenceConfig::with_lambda(p.lambda)
        },
    };
    let report = run_bench(&bundle, &config)?;
    let table = report.to_table();
    run.write_text("bench.txt", &format!("config_hash={}\n{table}", run.config_hash))?;
    let summary = format!("{table}per-test speedup {:.1}x", report.per_test_speedup());
    let result = json!({ "report": report, "per_test_speedup": report.per_test_speedup() });
    finish(run, "bench.json", &result, summary)
}

pub fn serve_cmd(p: ServeParams, run: &mut Run) -> Result<Outcome> {
    let bundle = load_bundle(&p.manifest)?;
    let addr: SocketAddr = format!("{}:{}", p.host, p.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address: {e}")))?;
    let config = ServiceConfig {
        lambda: p.lambda,
        solver: SolverConfig {
            grad_tol: p.tol,
            ..SolverConfig::with_lambda(p.lambda)
        },
        influence: InfluenceConfig {
            damping: p.damping,
            ..InfluenceConfig::with_lambda(p.lambda)
        },
        random_seed: p.seed,
    };
    let session = Arc::new(Session::new(bundle, config).map_err(|e| CliError::Usage(e.to_string()))?);
    if !p.no_initial_fit {
        let status = session.retrain_now().map_err(|e| CliError::Usage(e.to_string()))?;
        eprintln!("initial fit: {}", serde_json::to_string(&status).expect("json"));
    }
    run.log("serving")?;
    eprintln!("listening on http://{addr}");
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(threads()?.max(2))
        .enable_all()
        .build()
        .map_err(|e| CliError::io("tokio runtime", e))?;
    runtime
        .block_on(repkit_service::serve(session, addr, p.static_dir.clone()))
        .map_err(|e| CliError::io(addr.to_string(), e))?;
    Ok(Outcome::ok(Value::Null, String::new()))
}
