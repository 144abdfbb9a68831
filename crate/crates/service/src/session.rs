//! Session state: the current labels, the latest fitted snapshot, the retrain
//! job table and the append-only audit log.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use repkit_core::dataset::DatasetBundle;
use repkit_core::debug_sim::{rank_by_magnitude, rank_for_metric, test_accuracy, Metric};
use repkit_core::influence::{InfluenceConfig, InfluenceEngine};
use repkit_core::representer::{compute_alphas, global_importance, AlphaMatrix};
use repkit_core::solver::{fit, LastLayerWeights, LossKind, SolverConfig};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub lambda: f64,
    pub solver: SolverConfig,
    pub influence: InfluenceConfig,
    /// Seed for the random ranking when the request gives none.
    pub random_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            solver: SolverConfig::with_lambda(1e-2),
            influence: InfluenceConfig::with_lambda(1e-2),
            random_seed: 0,
        }
    }
}

impl ServiceConfig {
    fn solver(&self) -> SolverConfig {
        SolverConfig {
            lambda: self.lambda,
            ..self.solver.clone()
        }
    }

    fn influence(&self) -> InfluenceConfig {
        InfluenceConfig {
            lambda: self.lambda,
            ..self.influence
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub index: usize,
    pub old_label: usize,
    pub new_label: usize,
    /// Labels version produced by this edit.
    pub labels_version: u64,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum JobStatus {
    Running { labels_version: u64 },
    Done { labels_version: u64, weights_version: u64 },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveEntry {
    pub weights_version: u64,
    pub labels_version: u64,
    pub test_accuracy: f64,
    /// Fraction of initially wrong labels (against ground truth) that are now
    /// correct; absent without ground truth.
    pub flips_recovered: Option<f64>,
}

/// Scores and the order they induce.
type Ranking = (Vec<f64>, Vec<usize>);

/// One immutable fitted state. Weights, alphas and every ranking derived
/// from them come from the same fit.
pub struct Snapshot {
    pub weights_version: u64,
    pub labels_version: u64,
    pub bundle: Arc<DatasetBundle>,
    pub weights: LastLayerWeights,
    pub alphas: AlphaMatrix,
    /// `|α_{i,y_i}|` with the labels of this fit.
    pub representer_scores: Vec<f64>,
    pub representer_order: Vec<usize>,
    pub test_accuracy: f64,
    pub flips_recovered: Option<f64>,
    influence: OnceLock<Result<Ranking, String>>,
    influence_config: InfluenceConfig,
}

impl Snapshot {
    /// Self-influence scores and order, computed on first use.
    pub fn influence_ranking(&self) -> Result<(&[f64], &[usize]), ApiError> {
        let cached = self.influence.get_or_init(|| {
            InfluenceEngine::new(&self.weights, &self.bundle, self.influence_config)
                .and_then(|e| e.self_influence())
                .map(|scores| {
                    let order = rank_by_magnitude(&scores);
                    (scores, order)
                })
                .map_err(|e| e.to_string())
        });
        match cached {
            Ok((scores, order)) => Ok((scores, order)),
            Err(reason) => Err(ApiError::Internal(reason.clone())),
        }
    }
}

struct LabelState {
    labels: Arc<Vec<usize>>,
    version: u64,
    audit: Vec<AuditEntry>,
}

#[derive(Default)]
struct Jobs {
    next_id: u64,
    running: Option<u64>,
    statuses: BTreeMap<u64, JobStatus>,
}

pub struct Session {
    bundle: Arc<DatasetBundle>,
    config: ServiceConfig,
    initial_labels: Arc<Vec<usize>>,
    labels: Mutex<LabelState>,
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    jobs: Mutex<Jobs>,
    curve: Mutex<Vec<CurveEntry>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Session {
    pub fn new(bundle: DatasetBundle, config: ServiceConfig) -> Result<Self, ApiError> {
        config.solver().validate()?;
        config.influence().validate()?;
        let labels = Arc::new(bundle.train_labels.clone());
        Ok(Self {
            bundle: Arc::new(bundle),
            config,
            initial_labels: labels.clone(),
            labels: Mutex::new(LabelState {
                labels,
                version: 0,
                audit: Vec::new(),
            }),
            snapshot: RwLock::new(None),
            jobs: Mutex::new(Jobs {
                next_id: 1,
                ..Jobs::default()
            }),
            curve: Mutex::new(Vec::new()),
        })
    }

    pub fn bundle(&self) -> &DatasetBundle {
        &self.bundle
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn labels(&self) -> (u64, Arc<Vec<usize>>) {
        let state = self.labels.lock().expect("labels lock");
        (state.version, state.labels.clone())
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        self.labels.lock().expect("labels lock").audit.clone()
    }

    pub fn initial_labels(&self) -> &[usize] {
        &self.initial_labels
    }

    /// Indices touched by at least one edit.
    pub fn inspected(&self) -> HashSet<usize> {
        let state = self.labels.lock().expect("labels lock");
        state.audit.iter().map(|e| e.index).collect()
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn curve(&self) -> Vec<CurveEntry> {
        self.curve.lock().expect("curve lock").clone()
    }

    pub fn job(&self, id: u64) -> Option<JobStatus> {
        self.jobs.lock().expect("jobs lock").statuses.get(&id).cloned()
    }

    pub fn running_job(&self) -> Option<u64> {
        self.jobs.lock().expect("jobs lock").running
    }

    /// Records an edit and returns the new labels version. Setting a label to
    /// its current value still counts as an edit.
    pub fn set_label(&self, index: usize, label: usize) -> Result<u64, ApiError> {
        let c = self.bundle.num_classes();
        if label >= c {
            return Err(ApiError::LabelOutOfRange {
                label,
                num_classes: c,
            });
        }
        let mut state = self.labels.lock().expect("labels lock");
        let Some(&old_label) = state.labels.get(index) else {
            return Err(ApiError::NotFound {
                what: "training index",
                index: index as u64,
            });
        };
        let mut next = (*state.labels).clone();
        next[index] = label;
        state.labels = Arc::new(next);
        state.version += 1;
        let entry = AuditEntry {
            seq: state.audit.len() as u64,
            index,
            old_label,
            new_label: label,
            labels_version: state.version,
            timestamp_ms: now_ms(),
        };
        state.audit.push(entry);
        Ok(state.version)
    }

    fn flips_recovered(&self, labels: &[usize]) -> Option<f64> {
        let gt = self.bundle.ground_truth_train_labels.as_ref()?;
        let flipped: Vec<usize> = (0..gt.len())
            .filter(|&i| self.initial_labels[i] != gt[i])
            .collect();
        if flipped.is_empty() {
            return Some(1.0);
        }
        let fixed = flipped.iter().filter(|&&i| labels[i] == gt[i]).count();
        Some(fixed as f64 / flipped.len() as f64)
    }

    fn compute(&self, labels_version: u64, labels: &[usize]) -> Result<Snapshot, ApiError> {
        let bundle = Arc::new(self.bundle.with_train_labels(labels.to_vec())?);
        let solver = self.config.solver();
        let (weights, _) = fit(&bundle, LossKind::CrossEntropyWithLabels, &solver)?;
        let alphas = compute_alphas(
            &weights,
            &bundle,
            LossKind::CrossEntropyWithLabels,
            solver.lambda,
            solver.grad_tol,
        )?;
        let representer_scores = (0..bundle.n_train())
            .map(|i| alphas.alphas.get(i, labels[i]).abs())
            .collect();
        let representer_order = global_importance(&alphas, labels);
        Ok(Snapshot {
            weights_version: 0,
            labels_version,
            test_accuracy: test_accuracy(&weights, &bundle),
            flips_recovered: self.flips_recovered(labels),
            bundle,
            weights,
            alphas,
            representer_scores,
            representer_order,
            influence: OnceLock::new(),
            influence_config: self.config.influence(),
        })
    }

    fn install(&self, mut snapshot: Snapshot) -> Arc<Snapshot> {
        let mut slot = self.snapshot.write().expect("snapshot lock");
        snapshot.weights_version = slot.as_ref().map_or(1, |s| s.weights_version + 1);
        let snapshot = Arc::new(snapshot);
        self.curve.lock().expect("curve lock").push(CurveEntry {
            weights_version: snapshot.weights_version,
            labels_version: snapshot.labels_version,
            test_accuracy: snapshot.test_accuracy,
            flips_recovered: snapshot.flips_recovered,
        });
        *slot = Some(snapshot.clone());
        snapshot
    }

    /// Reserves the single retrain slot.
    pub fn begin_retrain(&self) -> Result<(u64, u64, Arc<Vec<usize>>), ApiError> {
        let mut jobs = self.jobs.lock().expect("jobs lock");
        if let Some(id) = jobs.running {
            return Err(ApiError::RetrainInProgress(id));
        }
        let (version, labels) = self.labels();
        let id = jobs.next_id;
        jobs.next_id += 1;
        jobs.running = Some(id);
        jobs.statuses.insert(
            id,
            JobStatus::Running {
                labels_version: version,
            },
        );
        Ok((id, version, labels))
    }

    /// Runs a reserved job to completion on the calling thread.
    pub fn run_retrain(&self, job_id: u64, labels_version: u64, labels: &[usize]) -> JobStatus {
        let status = match self.compute(labels_version, labels) {
            Ok(snapshot) => {
                let installed = self.install(snapshot);
                JobStatus::Done {
                    labels_version,
                    weights_version: installed.weights_version,
                }
            }
            Err(e) => JobStatus::Failed {
                reason: e.to_string(),
            },
        };
        let mut jobs = self.jobs.lock().expect("jobs lock");
        jobs.statuses.insert(job_id, status.clone());
        jobs.running = None;
        status
    }

    /// Reserves and runs a retrain synchronously.
    pub fn retrain_now(&self) -> Result<JobStatus, ApiError> {
        let (id, version, labels) = self.begin_retrain()?;
        Ok(self.run_retrain(id, version, &labels))
    }

    /// Order for the random metric; independent of the fit.
    pub fn random_order(&self, snapshot: &Snapshot, seed: u64) -> Result<Vec<usize>, ApiError> {
        Ok(rank_for_metric(
            Metric::Random,
            &snapshot.weights,
            &snapshot.bundle,
            self.config.lambda,
            self.config.solver.grad_tol,
            &self.config.influence(),
            seed,
        )?)
    }
}
