//! Flags and their resolved configurations. Each command has a flag struct
//! (every field optional) and a params struct (the effective config);
//! precedence is flags, then the command's table in `--config`, then defaults.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "repkit", version, about = "Representer-point explanations for last-layer classifiers")]
pub struct Cli {
    /// Print the report as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Write artifacts under this directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML file with one table per command, e.g. `[fit]`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a Gaussian-cluster bundle.
    Synth(SynthArgs),
    /// Validate a dataset manifest and normalize it to RPMX files.
    Ingest(IngestArgs),
    /// Fit the last layer.
    Fit(FitArgs),
    /// Representer values for fitted weights.
    Alphas(AlphasArgs),
    /// Top excitatory and inhibitory training points for one test point.
    Explain(ExplainArgs),
    /// Correlation between actual and reconstructed softmax outputs.
    Fidelity(FidelityArgs),
    /// Influence-function values for one test point.
    Influence(InfluenceArgs),
    /// Simulated label-debugging curves.
    DebugSim(DebugSimArgs),
    /// Two-blob toy network: influence vs representer values.
    ToyStudy(ToyStudyArgs),
    /// Per-training-point sensitivity maps on the toy network.
    Sensitivity(SensitivityArgs),
    /// Time representer against influence computation.
    Bench(BenchArgs),
    /// Run the label-debugging HTTP service.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Fit(_) => "fit",
            Command::Alphas(_) => "alphas",
            Command::Explain(_) => "explain",
            Command::Fidelity(_) => "fidelity",
            Command::Influence(_) => "influence",
            Command::DebugSim(_) => "debug-sim",
            Command::ToyStudy(_) => "toy-study",
            Command::Sensitivity(_) => "sensitivity",
            Command::Bench(_) => "bench",
            Command::Serve(_) => "serve",
        }
    }
}

/// Declares a flag struct and its params struct. Fields without a default
/// are required; boolean fields accept a bare `--flag`.
macro_rules! params {
    (
        $args:ident => $params:ident {
            $( $(#[$fm:meta])* $field:ident : $ty:ty $(= $default:expr)? ; )*
        }
    ) => {
        #[derive(clap::Args, Debug, Default, Serialize)]
        pub struct $args {
            $(
                $(#[$fm])*
                #[arg(long)]
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $params {
            $( pub $field: $ty, )*
        }

        impl $params {
            pub fn defaults() -> Map<String, Value> {
                #[allow(unused_mut)]
                let mut m = Map::new();
                $($(
                    let v: $ty = $default;
                    m.insert(stringify!($field).into(), serde_json::to_value(v).expect("serializable default"));
                )?)*
                m
            }
        }
    };
}

params!(SynthArgs => SynthParams {
    n_train: usize = 500;
    n_test: usize = 500;
    feature_dim: usize = 20;
    num_classes: usize = 2;
    /// Norm of each class mean.
    separation: f64 = 1.0;
    /// Expected norm of the per-point noise.
    noise: f64 = 1.0;
    seed: u64 = 0;
    /// Add teacher logits from a random head with this entry scale.
    teacher_scale: Option<f64> = None;
    /// Flip this fraction of training labels, keeping the ground truth.
    corruption: Option<f64> = None;
    corruption_seed: u64 = 0;
    /// Append a constant-1 feature.
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    bias: bool = false;
});

params!(IngestArgs => IngestParams {
    manifest: PathBuf;
});

params!(FitArgs => FitParams {
    manifest: PathBuf;
    /// ce, softmax-distill or relu-distill.
    loss: String = "ce".into();
    lambda: f64 = 1e-2;
    /// Gradient sup-norm certificate.
    tol: f64 = 1e-9;
    max_iters: usize = 100_000;
    /// gd or lbfgs.
    finisher: String = "gd".into();
    lbfgs_memory: usize = 10;
});

params!(AlphasArgs => AlphasParams {
    manifest: PathBuf;
    weights: PathBuf;
    loss: String = "ce".into();
    lambda: f64 = 1e-2;
    tol: f64 = 1e-9;
});

params!(ExplainArgs => ExplainParams {
    manifest: PathBuf;
    weights: PathBuf;
    /// Precomputed alphas; recomputed from the weights when absent.
    alphas: Option<PathBuf> = None;
    loss: String = "ce".into();
    lambda: f64 = 1e-2;
    tol: f64 = 1e-9;
    test: usize = 0;
    /// Defaults to the predicted class.
    class: Option<usize> = None;
    top_k: usize = 5;
});

params!(FidelityArgs => FidelityParams {
    manifest: PathBuf;
    weights: PathBuf;
    alphas: Option<PathBuf> = None;
    loss: String = "ce".into();
    lambda: f64 = 1e-2;
    tol: f64 = 1e-9;
});

params!(InfluenceArgs => InfluenceParams {
    manifest: PathBuf;
    weights: PathBuf;
    /// Loss the weights were fitted with; used for the stationarity check.
    loss: String = "ce".into();
    lambda: f64 = 1e-2;
    tol: f64 = 1e-9;
    test: usize = 0;
    damping: f64 = 1e-3;
    cg_tol: f64 = 1e-8;
    /// Also histogram both value kinds over the first N test points.
    distribution: Option<usize> = None;
});

params!(DebugSimArgs => DebugSimParams {
    manifest: PathBuf;
    /// Number of corruption seeds.
    seeds: usize = 5;
    base_seed: u64 = 0;
    /// Fraction of training labels flipped per seed.
    corruption: f64 = 0.4;
    /// Use the bundle's own ground truth instead of flipping.
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    use_ground_truth: bool = false;
    lambda: f64 = 1e-2;
    tol: f64 = 1e-9;
    damping: f64 = 1e-3;
    #[arg(value_delimiter = ',')]
    fractions: Vec<f64> = (1..=10).map(|k| k as f64 * 0.05).collect();
    #[arg(value_delimiter = ',')]
    metrics: Vec<String> = vec!["representer".into(), "influence".into(), "random".into()];
});

params!(ToyStudyArgs => ToyStudyParams {
    seed: u64 = 0;
    n_per_class: usize = 50;
    sigma: f64 = 0.3;
    epochs: usize = 1000;
    lambda: f64 = 1e-3;
    #[arg(value_delimiter = ',', allow_hyphen_values = true)]
    probe: Vec<f64> = vec![3.0, 0.0];
    top_k: usize = 3;
});

params!(SensitivityArgs => SensitivityParams {
    seed: u64 = 0;
    epochs: usize = 1000;
    lambda: f64 = 1e-3;
    #[arg(value_delimiter = ',', allow_hyphen_values = true)]
    probe: Vec<f64> = vec![3.0, 0.0];
    /// Defaults to the predicted class.
    class: Option<usize> = None;
    samples: usize = 50;
    /// SmoothGrad noise; defaults to a tenth of the input range.
    sigma: Option<f64> = None;
    smooth_seed: u64 = 0;
    /// Plain gradient: one sample, no noise.
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    plain: bool = false;
});

params!(BenchArgs => BenchParams {
    /// Defaults to a synthetic n=1000, f=128, c=10 bundle with teacher logits.
    manifest: Option<PathBuf> = None;
    test_points: usize = 50;
    #[arg(value_delimiter = ',')]
    seeds: Vec<u64> = vec![0];
    lambda: f64 = 1e-3;
    damping: f64 = 1e-3;
});

params!(ServeArgs => ServeParams {
    manifest: PathBuf;
    host: String = "127.0.0.1".into();
    port: u16 = 8080;
    /// Directory with the triage UI bundle.
    static_dir: Option<PathBuf> = None;
    lambda: f64 = 1e-2;
    tol: f64 = 1e-9;
    damping: f64 = 1e-3;
    seed: u64 = 0;
    /// Skip the fit at startup.
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    no_initial_fit: bool = false;
});

/// Merges defaults, the `[command]` table of the config file and the flags.
pub fn resolve<P: DeserializeOwned>(
    command: &str,
    mut merged: Map<String, Value>,
    file: Option<&toml::Table>,
    flags: &impl Serialize,
) -> Result<P> {
    if let Some(table) = file.and_then(|t| t.get(command)) {
        let Value::Object(section) = serde_json::to_value(table).map_err(|e| CliError::Usage(e.to_string()))? else {
            return Err(CliError::Usage(format!("config: [{command}] must be a table")));
        };
        merged.extend(section);
    }
    if let Value::Object(given) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? {
        merged.extend(given.into_iter().filter(|(_, v)| !v.is_null()));
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::Usage(format!("{command}: {}", e.to_string().replace("missing field", "missing option"))))
}
