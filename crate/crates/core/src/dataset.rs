//! Datasets of pre-extracted features, labels and optional teacher logits.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::rpmx;

/// JSON manifest describing a dataset on disk. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub n_train: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub train_features: PathBuf,
    pub test_features: PathBuf,
    pub train_labels: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub given_train_logits: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub given_test_logits: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption_record: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Non-fatal findings collected while loading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum LoadWarning {
    /// `‖f_i‖ = 0`: the decomposition still holds, but such a point cannot
    /// steer the last layer and teacher reproduction is not guaranteed for it.
    ZeroFeatureRow { split: Split, index: usize },
}

/// Bookkeeping for a synthetic label corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub seed: u64,
    pub fraction: f64,
    pub flipped_indices: Vec<usize>,
    pub original_labels: Vec<usize>,
}

impl CorruptionRecord {
    /// Writes the original labels back over `labels`.
    pub fn restore(&self, labels: &mut [usize]) {
        for (&i, &orig) in self.flipped_indices.iter().zip(&self.original_labels) {
            labels[i] = orig;
        }
    }
}

/// A validated in-memory dataset.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub manifest: DatasetManifest,
    pub train_features: DenseMatrix,
    pub test_features: DenseMatrix,
    pub train_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
    pub given_train_logits: Option<DenseMatrix>,
    pub given_test_logits: Option<DenseMatrix>,
    pub ground_truth_train_labels: Option<Vec<usize>>,
    pub corruption: Option<CorruptionRecord>,
    pub warnings: Vec<LoadWarning>,
}

impl DatasetBundle {
    /// Assembles a bundle from in-memory parts, filling the manifest's shape
    /// fields and running the same validation as [`load_bundle`].
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        name: impl Into<String>,
        num_classes: usize,
        train_features: DenseMatrix,
        train_labels: Vec<usize>,
        test_features: DenseMatrix,
        test_labels: Vec<usize>,
        given_train_logits: Option<DenseMatrix>,
        given_test_logits: Option<DenseMatrix>,
    ) -> Result<Self> {
        let manifest = DatasetManifest {
            name: name.into(),
            n_train: train_features.rows(),
            n_test: test_features.rows(),
            feature_dim: train_features.cols(),
            num_classes,
            train_features: "train_features.rpmx".into(),
            test_features: "test_features.rpmx".into(),
            train_labels: "train_labels.txt".into(),
            test_labels: "test_labels.txt".into(),
            given_train_logits: given_train_logits
                .as_ref()
                .map(|_| "given_train_logits.rpmx".into()),
            given_test_logits: given_test_logits
                .as_ref()
                .map(|_| "given_test_logits.rpmx".into()),
            ground_truth_train_labels: None,
            corruption_record: None,
            class_names: None,
        };
        let mut bundle = Self {
            manifest,
            train_features,
            test_features,
            train_labels,
            test_labels,
            given_train_logits,
            given_test_logits,
            ground_truth_train_labels: None,
            corruption: None,
            warnings: Vec::new(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn n_train(&self) -> usize {
        self.train_features.rows()
    }

    pub fn n_test(&self) -> usize {
        self.test_features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.train_features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn features(&self, split: Split) -> &DenseMatrix {
        match split {
            Split::Train => &self.train_features,
            Split::Test => &self.test_features,
        }
    }

    pub fn labels(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_labels,
            Split::Test => &self.test_labels,
        }
    }

    pub fn given_logits(&self, split: Split) -> Option<&DenseMatrix> {
        match split {
            Split::Train => self.given_train_logits.as_ref(),
            Split::Test => self.given_test_logits.as_ref(),
        }
    }

    /// Checks every shape and label invariant and refreshes `warnings`.
    pub fn validate(&mut self) -> Result<()> {
        let m = &self.manifest;
        let c = m.num_classes;
        if c < 2 {
            return Err(Error::ManifestParse(format!(
                "num_classes must be at least 2, got {c}"
            )));
        }
        let f = self.train_features.cols();
        let expect = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(Error::ShapeMismatch(format!(
                    "{what}: expected {}x{}, found {}x{}",
                    want.0, want.1, got.0, got.1
                )))
            } else {
                Ok(())
            }
        };
        expect(
            "train features",
            self.train_features.shape(),
            (m.n_train, m.feature_dim),
        )?;
        expect(
            "test features",
            self.test_features.shape(),
            (m.n_test, m.feature_dim),
        )?;
        expect("train labels", (self.train_labels.len(), 1), (m.n_train, 1))?;
        expect("test labels", (self.test_labels.len(), 1), (m.n_test, 1))?;
        if let Some(g) = &self.given_train_logits {
            expect("given train logits", g.shape(), (m.n_train, c))?;
        }
        if let Some(g) = &self.given_test_logits {
            expect("given test logits", g.shape(), (m.n_test, c))?;
        }
        check_labels(&self.train_labels, c)?;
        check_labels(&self.test_labels, c)?;
        if let Some(gt) = &self.ground_truth_train_labels {
            expect("ground-truth labels", (gt.len(), 1), (m.n_train, 1))?;
            check_labels(gt, c)?;
        }
        if let Some(names) = &m.class_names {
            if names.len() != c {
                return Err(Error::ManifestParse(format!(
                    "{} class names for {c} classes",
                    names.len()
                )));
            }
        }
        debug_assert_eq!(f, m.feature_dim);

        self.warnings.clear();
        for (split, feats) in [
            (Split::Train, &self.train_features),
            (Split::Test, &self.test_features),
        ] {
            for i in 0..feats.rows() {
                if feats.row(i).iter().all(|&v| v == 0.0) {
                    self.warnings
                        .push(LoadWarning::ZeroFeatureRow { split, index: i });
                }
            }
        }
        Ok(())
    }

    /// New bundle with replaced training labels (ground truth and corruption
    /// record are kept so recovery can still be measured).
    pub fn with_train_labels(&self, labels: Vec<usize>) -> Result<Self> {
        check_labels(&labels, self.num_classes())?;
        if labels.len() != self.n_train() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} training points",
                labels.len(),
                self.n_train()
            )));
        }
        let mut out = self.clone();
        out.train_labels = labels;
        Ok(out)
    }

    /// Appends a constant-1 feature to every row so the last layer gets an
    /// (L2-regularized) bias.
    pub fn with_bias_feature(&self) -> Self {
        let mut out = self.clone();
        out.train_features = self.train_features.with_appended_column(1.0);
        out.test_features = self.test_features.with_appended_column(1.0);
        out.manifest.feature_dim += 1;
        out.warnings.clear();
        out
    }

    /// Fraction of originally flipped labels currently equal to ground truth.
    pub fn flips_recovered(&self) -> Option<f64> {
        let gt = self.ground_truth_train_labels.as_ref()?;
        let rec = self.corruption.as_ref()?;
        if rec.flipped_indices.is_empty() {
            return Some(1.0);
        }
        let fixed = rec
            .flipped_indices
            .iter()
            .filter(|&&i| self.train_labels[i] == gt[i])
            .count();
        Some(fixed as f64 / rec.flipped_indices.len() as f64)
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= num_classes) {
        Some(index) => Err(Error::LabelOutOfRange {
            index,
            label: labels[index],
            num_classes,
        }),
        None => Ok(()),
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::ManifestParse(format!("{}: {e}", path.display())))
}

/// Loads and validates the bundle described by a JSON manifest.
pub fn load_bundle(manifest_path: &Path) -> Result<DatasetBundle> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let load_opt = |p: &Option<PathBuf>| -> Result<Option<DenseMatrix>> {
        p.as_ref()
            .map(|p| rpmx::load_matrix(&resolve(base, p)))
            .transpose()
    };
    let corruption = match &manifest.corruption_record {
        Some(p) => {
            let p = resolve(base, p);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| Error::ManifestParse(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let mut bundle = DatasetBundle {
        train_features: rpmx::load_matrix(&resolve(base, &manifest.train_features))?,
        test_features: rpmx::load_matrix(&resolve(base, &manifest.test_features))?,
        train_labels: rpmx::load_labels(&resolve(base, &manifest.train_labels))?,
        test_labels: rpmx::load_labels(&resolve(base, &manifest.test_labels))?,
        given_train_logits: load_opt(&manifest.given_train_logits)?,
        given_test_logits: load_opt(&manifest.given_test_logits)?,
        ground_truth_train_labels: manifest
            .ground_truth_train_labels
            .as_ref()
            .map(|p| rpmx::load_labels(&resolve(base, p)))
            .transpose()?,
        corruption,
        manifest,
        warnings: Vec::new(),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes the bundle as RPMX/text files plus `manifest.json` under `dir`.
/// Returns the manifest path.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = bundle.manifest.clone();
    m.n_train = bundle.n_train();
    m.n_test = bundle.n_test();
    m.feature_dim = bundle.feature_dim();
    m.train_features = "train_features.rpmx".into();
    m.test_features = "test_features.rpmx".into();
    m.train_labels = "train_labels.txt".into();
    m.test_labels = "test_labels.txt".into();
    rpmx::save_matrix(&bundle.train_features, &dir.join(&m.train_features))?;
    rpmx::save_matrix(&bundle.test_features, &dir.join(&m.test_features))?;
    rpmx::save_labels(&bundle.train_labels, &dir.join(&m.train_labels))?;
    rpmx::save_labels(&bundle.test_labels, &dir.join(&m.test_labels))?;
    m.given_train_logits = match &bundle.given_train_logits {
        Some(g) => {
            let p = PathBuf::from("given_train_logits.rpmx");
            rpmx::save_matrix(g, &dir.join(&p))?;
            Some(p)
        }
        None => None,
    };
    m.given_test_logits = match &bundle.given_test_logits {
        Some(g) => {
            let p = PathBuf::from("given_test_logits.rpmx");
            rpmx::save_matrix(g, &dir.join(&p))?;
            Some(p)
        }
        None => None,
    };
    m.ground_truth_train_labels = match &bundle.ground_truth_train_labels {
        Some(gt) => {
            let p = PathBuf::from("ground_truth_train_labels.txt");
            rpmx::save_labels(gt, &dir.join(&p))?;
            Some(p)
        }
        None => None,
    };
    m.corruption_record = match &bundle.corruption {
        Some(rec) => {
            let p = PathBuf::from("corruption.json");
            let full = dir.join(&p);
            let json = serde_json::to_string_pretty(rec).expect("record serializes");
            fs::write(&full, json + "\n").map_err(|e| Error::io(&full, e))?;
            Some(p)
        }
        None => None,
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Flips `round(fraction * n_train)` training labels chosen uniformly without
/// replacement. Binary labels go to the other class; multi-class labels go to
/// a uniformly drawn different class. The originals become ground truth.
pub fn flip_labels(
    bundle: &DatasetBundle,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetBundle, CorruptionRecord)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "corruption fraction {fraction} outside [0, 1]"
        )));
    }
    if bundle.corruption.is_some() {
        return Err(Error::AlreadyCorrupted);
    }
    if let Some(gt) = &bundle.ground_truth_train_labels {
        if gt != &bundle.train_labels {
            return Err(Error::AlreadyCorrupted);
        }
    }
    let n = bundle.n_train();
    let c = bundle.num_classes();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flipped = index::sample(&mut rng, n, count).into_vec();
    flipped.sort_unstable();

    let mut labels = bundle.train_labels.clone();
    let mut original = Vec::with_capacity(count);
    for &i in &flipped {
        let orig = labels[i];
        original.push(orig);
        labels[i] = if c == 2 {
            1 - orig
        } else {
            let r = rng.random_range(0..c - 1);
            if r >= orig {
                r + 1
            } else {
                r
            }
        };
    }
    let record = CorruptionRecord {
        seed,
        fraction,
        flipped_indices: flipped,
        original_labels: original,
    };
    let mut out = bundle.clone();
    out.ground_truth_train_labels = Some(bundle.train_labels.clone());
    out.train_labels = labels;
    out.corruption = Some(record.clone());
    Ok((out, record))
}
