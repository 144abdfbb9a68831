//! Seeded synthetic datasets for desk-scale runs and tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::DatasetBundle;
use crate::error::Result;
use crate::numerics::DenseMatrix;
use crate::solver::LastLayerWeights;

/// Gaussian clusters, one per class. Class means have norm `separation`;
/// the isotropic noise has expected norm `noise`, independent of the
/// feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClasses {
    pub n_train: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl GaussianClasses {
    fn sample(&self) -> (DenseMatrix, Vec<usize>, DenseMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let f = self.feature_dim;
        let means: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * self.separation / norm).collect()
            })
            .collect();
        let per_coord = self.noise / (f as f64).sqrt();
        let mut draw = |n: usize| {
            let mut data = Vec::with_capacity(n * f);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let y = i % self.num_classes;
                labels.push(y);
                for mu in &means[y] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(mu + per_coord * z);
                }
            }
            (DenseMatrix::from_raw_unchecked(n, f, data), labels)
        };
        let (train, train_y) = draw(self.n_train);
        let (test, test_y) = draw(self.n_test);
        (train, train_y, test, test_y)
    }

    pub fn generate(&self) -> Result<DatasetBundle> {
        let (train, train_y, test, test_y) = self.sample();
        DatasetBundle::from_parts(
            format!("gaussian-{}x{}-c{}-s{}", self.n_train, self.feature_dim, self.num_classes, self.seed),
            self.num_classes,
            train,
            train_y,
            test,
            test_y,
            None,
            None,
        )
    }

    /// Adds teacher logits from a random linear head with `N(0, scale²)` entries.
    pub fn generate_with_teacher(&self, scale: f64) -> Result<DatasetBundle> {
        Ok(self.generate_with_teacher_head(scale)?.0)
    }

    pub fn generate_with_teacher_head(
        &self,
        scale: f64,
    ) -> Result<(DatasetBundle, LastLayerWeights)> {
        let mut bundle = self.generate()?;
        let head = LastLayerWeights::random(
            self.num_classes,
            self.feature_dim,
            scale,
            self.seed ^ 0x7eac_4e12,
        );
        bundle.given_train_logits = Some(head.logits(&bundle.train_features));
        bundle.given_test_logits = Some(head.logits(&bundle.test_features));
        bundle.manifest.given_train_logits = Some("given_train_logits.rpmx".into());
        bundle.manifest.given_test_logits = Some("given_test_logits.rpmx".into());
        bundle.validate()?;
        Ok((bundle, head))
    }
}

/// Two isotropic 2-D Gaussian blobs; class `k` is centred at `centers[k]`.
pub fn blobs_2d(
    n_per_class: usize,
    centers: [[f64; 2]; 2],
    sigma: f64,
    seed: u64,
) -> (DenseMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let y = i % 2;
        labels.push(y);
        data.push(centers[y][0] + normal.sample(&mut rng));
        data.push(centers[y][1] + normal.sample(&mut rng));
    }
    (
        DenseMatrix::from_raw_unchecked(2 * n_per_class, 2, data),
        labels,
    )
}
