//! Synthetic bag generators with a known instance-level ground truth.
//!
//! Every scenario works in 10 features. Each instance is positive with a
//! fixed probability and draws its sample cloud from the positive or negative
//! sampling distribution; a bag is positive exactly when it contains at least
//! one positive instance. The four scenarios differ in *how* the positive
//! distribution deviates: heavier tails with matched covariance, a shifted
//! correlation pair, a mean offset, or a block of strong correlations moving
//! across feature groups.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{dataset_from_parts, Bag, Dataset, DistInstance};
use crate::error::{Error, Result};

/// Feature dimension shared by all scenarios.
pub const SIM_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Positive: features 1–5 follow a heavy-tailed elliptical distribution
    /// whose covariance matches the standard normal of the negatives.
    TVsNormal,
    /// Positive: features 1 and 2 correlate at −0.5; negative: features 2
    /// and 3 correlate at +0.5.
    CovDiff,
    /// Positive: features 1–5 shift their mean to 0.2.
    MeanDiff,
    /// Positive: features 1–5 share 0.5 correlations; negative: features
    /// 6–10 do instead.
    LargeCovDiff,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t_vs_normal" => Ok(Self::TVsNormal),
            "cov_diff" => Ok(Self::CovDiff),
            "mean_diff" => Ok(Self::MeanDiff),
            "large_cov_diff" => Ok(Self::LargeCovDiff),
            other => Err(Error::InvalidParameter(format!(
                "unknown scenario '{other}' (expected t_vs_normal, cov_diff, mean_diff, or large_cov_diff)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::TVsNormal => "t_vs_normal",
            Self::CovDiff => "cov_diff",
            Self::MeanDiff => "mean_diff",
            Self::LargeCovDiff => "large_cov_diff",
        }
    }

    pub const ALL: [Scenario; 4] =
        [Self::TVsNormal, Self::CovDiff, Self::MeanDiff, Self::LargeCovDiff];
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub n_bags: usize,
    pub instances_per_bag: usize,
    pub samples_per_instance: usize,
    /// Probability that any given instance is positive.
    pub p_pos: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(scenario: Scenario, n_bags: usize, instances_per_bag: usize, samples_per_instance: usize, seed: u64) -> Self {
        Self { scenario, n_bags, instances_per_bag, samples_per_instance, p_pos: 0.15, seed }
    }
}

/// A generated dataset together with the hidden per-instance labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub dataset: Dataset,
    /// +1/−1 per instance, aligned with `dataset.instances`.
    pub instance_labels: Vec<i8>,
}

/// Symmetric square root of a covariance matrix via its eigendecomposition.
/// Small negative eigenvalues from round-off are clamped to zero; genuinely
/// negative ones are an error.
fn matrix_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::InvalidParameter("covariance must be square".into()));
    }
    for i in 0..n {
        for j in 0..n {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 {
                return Err(Error::InvalidParameter("covariance must be symmetric".into()));
            }
        }
    }
    let eig = cov.clone().symmetric_eigen();
    let max_lambda = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l));
    let mut d = DMatrix::zeros(n, n);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -1e-8 * max_lambda.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "covariance is not positive semidefinite (eigenvalue {lambda:.3e})"
            )));
        }
        d[(i, i)] = lambda.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Draw `n` rows from a multivariate normal.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if cov.nrows() != mean.len() {
        return Err(Error::DimensionMismatch { expected: mean.len(), got: cov.nrows() });
    }
    let sqrt = matrix_sqrt(cov)?;
    Ok(sample_mvn_with_sqrt(mean, &sqrt, n, rng))
}

fn sample_mvn_with_sqrt<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    sqrt: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let d = mean.len();
    let mut out = DMatrix::zeros(n, d);
    for row in 0..n {
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let x = mean + sqrt * z;
        out.row_mut(row).copy_from(&x.transpose());
    }
    out
}

/// Draw `n` rows from an elliptical heavy-tailed distribution: a centred
/// normal with the given scale, divided by an independent `sqrt(χ²_ν / ν)`
/// per row, shifted by `delta`. Requires `ν ≥ 3` so the covariance
/// `ν/(ν−2) · scale` is finite.
pub fn sample_mvt<R: Rng + ?Sized>(
    delta: &DVector<f64>,
    scale: &DMatrix<f64>,
    nu: f64,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if nu < 3.0 {
        return Err(Error::InvalidParameter(format!(
            "degrees of freedom must be at least 3, got {nu}"
        )));
    }
    if scale.nrows() != delta.len() {
        return Err(Error::DimensionMismatch { expected: delta.len(), got: scale.nrows() });
    }
    let sqrt = matrix_sqrt(scale)?;
    Ok(sample_mvt_with_sqrt(delta, &sqrt, nu, n, rng))
}

fn sample_mvt_with_sqrt<R: Rng + ?Sized>(
    delta: &DVector<f64>,
    sqrt: &DMatrix<f64>,
    nu: f64,
    n: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let d = delta.len();
    let chi = ChiSquared::new(nu).expect("nu validated by the caller");
    let mut out = DMatrix::zeros(n, d);
    for row in 0..n {
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let denom = (chi.sample(rng) / nu).sqrt();
        let x = delta + (sqrt * z) / denom;
        out.row_mut(row).copy_from(&x.transpose());
    }
    out
}

/// One block of features with its own sampling law.
enum Block {
    Gaussian { mean: DVector<f64>, sqrt: DMatrix<f64> },
    HeavyTail { delta: DVector<f64>, sqrt: DMatrix<f64>, nu: f64 },
}

impl Block {
    fn dim(&self) -> usize {
        match self {
            Block::Gaussian { mean, .. } => mean.len(),
            Block::HeavyTail { delta, .. } => delta.len(),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        match self {
            Block::Gaussian { mean, sqrt } => sample_mvn_with_sqrt(mean, sqrt, n, rng),
            Block::HeavyTail { delta, sqrt, nu } => sample_mvt_with_sqrt(delta, sqrt, *nu, n, rng),
        }
    }
}

struct BlockDist {
    blocks: Vec<Block>,
}

impl BlockDist {
    fn dim(&self) -> usize {
        self.blocks.iter().map(Block::dim).sum()
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, self.dim());
        let mut col = 0;
        for block in &self.blocks {
            let part = block.sample(n, rng);
            out.view_mut((0, col), (n, block.dim())).copy_from(&part);
            col += block.dim();
        }
        out
    }
}

fn std_normal_block(d: usize) -> Block {
    Block::Gaussian { mean: DVector::zeros(d), sqrt: DMatrix::identity(d, d) }
}

fn gaussian_block(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Block> {
    let sqrt = matrix_sqrt(&cov)?;
    Ok(Block::Gaussian { mean, sqrt })
}

/// Identity covariance with one correlated pair.
fn paired_cov(d: usize, i: usize, j: usize, rho: f64) -> DMatrix<f64> {
    let mut cov = DMatrix::identity(d, d);
    cov[(i, j)] = rho;
    cov[(j, i)] = rho;
    cov
}

/// Unit variances with a constant 0.5 correlation everywhere off-diagonal.
fn equicorrelated_cov(d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.5 })
}

fn positive_distribution(scenario: Scenario) -> Result<BlockDist> {
    let blocks = match scenario {
        Scenario::TVsNormal => {
            // Heavy tails on the first five features; the 1/3 scale with 3
            // degrees of freedom keeps the covariance at the identity.
            let sqrt = matrix_sqrt(&(DMatrix::identity(5, 5) / 3.0))?;
            vec![
                Block::HeavyTail { delta: DVector::zeros(5), sqrt, nu: 3.0 },
                std_normal_block(5),
            ]
        }
        Scenario::CovDiff => {
            vec![gaussian_block(DVector::zeros(10), paired_cov(10, 0, 1, -0.5))?]
        }
        Scenario::MeanDiff => {
            let mut mean = DVector::zeros(10);
            for i in 0..5 {
                mean[i] = 0.2;
            }
            vec![gaussian_block(mean, DMatrix::identity(10, 10))?]
        }
        Scenario::LargeCovDiff => {
            vec![
                gaussian_block(DVector::zeros(5), equicorrelated_cov(5))?,
                std_normal_block(5),
            ]
        }
    };
    Ok(BlockDist { blocks })
}

fn negative_distribution(scenario: Scenario) -> Result<BlockDist> {
    let blocks = match scenario {
        Scenario::TVsNormal | Scenario::MeanDiff => vec![std_normal_block(10)],
        Scenario::CovDiff => {
            vec![gaussian_block(DVector::zeros(10), paired_cov(10, 1, 2, 0.5))?]
        }
        Scenario::LargeCovDiff => {
            vec![
                std_normal_block(5),
                gaussian_block(DVector::zeros(5), equicorrelated_cov(5))?,
            ]
        }
    };
    Ok(BlockDist { blocks })
}

/// Generate a dataset: each instance flips positive with `p_pos`, draws its
/// samples from the matching distribution, and every bag takes the maximum of
/// its instance labels.
pub fn generate(config: &SimConfig) -> Result<LabeledDataset> {
    if config.n_bags == 0 || config.instances_per_bag == 0 || config.samples_per_instance == 0 {
        return Err(Error::InvalidParameter(
            "bags, instances per bag, and samples per instance must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&config.p_pos) {
        return Err(Error::InvalidParameter(format!(
            "p_pos must lie in [0, 1], got {}",
            config.p_pos
        )));
    }
    let pos_dist = positive_distribution(config.scenario)?;
    let neg_dist = negative_distribution(config.scenario)?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    let mut instances = Vec::with_capacity(config.n_bags * config.instances_per_bag);
    let mut instance_labels = Vec::with_capacity(instances.capacity());
    let mut bags = Vec::with_capacity(config.n_bags);
    for b in 0..config.n_bags {
        let mut idxs = Vec::with_capacity(config.instances_per_bag);
        let mut any_positive = false;
        for i in 0..config.instances_per_bag {
            let positive = rng.gen_bool(config.p_pos);
            any_positive |= positive;
            let dist = if positive { &pos_dist } else { &neg_dist };
            let samples = dist.sample(config.samples_per_instance, &mut rng);
            idxs.push(instances.len());
            instances.push(DistInstance::new(format!("bag{b}_inst{i}"), samples));
            instance_labels.push(if positive { 1 } else { -1 });
        }
        bags.push(Bag {
            bag_id: format!("bag{b}"),
            instance_indices: idxs,
            label: if any_positive { 1 } else { -1 },
        });
    }
    let feature_names = (1..=SIM_DIM).map(|i| format!("x{i}")).collect();
    Ok(LabeledDataset { dataset: dataset_from_parts(instances, bags, feature_names)?, instance_labels })
}
