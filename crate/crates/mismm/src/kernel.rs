//! Embedding kernels on sample vectors and the empirical kernel on
//! distributional instances, with Gram-matrix precomputation.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DistInstance;
use crate::error::{Error, Result};

/// Embedding-kernel configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    /// k(x,z) = exp(−‖x−z‖² / 2σ²)
    Gaussian { sigma: f64 },
    /// k(x,z) = ⟨x,z⟩
    Linear,
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        Ok(KernelSpec::Gaussian { sigma })
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Gaussian { .. } => "gaussian",
            KernelSpec::Linear => "linear",
        }
    }
}

/// Kernel value between two sample vectors.
pub fn embed_kernel(x: &[f64], z: &[f64], spec: &KernelSpec) -> Result<f64> {
    if x.len() != z.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: z.len() });
    }
    Ok(match spec {
        KernelSpec::Gaussian { sigma } => {
            let sq: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            (-sq / (2.0 * sigma * sigma)).exp()
        }
        KernelSpec::Linear => x.iter().zip(z).map(|(a, b)| a * b).sum(),
    })
}

/// All embedding-kernel values between the rows of two sample matrices,
/// computed through one matrix product: for the gaussian kernel the squared
/// distances come from ‖x‖² + ‖z‖² − 2⟨x,z⟩, clamped at zero against
/// cancellation. One such block per instance pair is what makes Gram
/// construction and scoring affordable.
pub fn kernel_block(si: &DMatrix<f64>, sj: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    if si.ncols() != sj.ncols() {
        return Err(Error::DimensionMismatch { expected: si.ncols(), got: sj.ncols() });
    }
    let mut cross = si * sj.transpose();
    if let KernelSpec::Gaussian { sigma } = spec {
        let inv = 1.0 / (2.0 * sigma * sigma);
        let ni: Vec<f64> = si.row_iter().map(|r| r.norm_squared()).collect();
        let nj: Vec<f64> = sj.row_iter().map(|r| r.norm_squared()).collect();
        for j in 0..cross.ncols() {
            for i in 0..cross.nrows() {
                let sq = (ni[i] + nj[j] - 2.0 * cross[(i, j)]).max(0.0);
                cross[(i, j)] = (-sq * inv).exp();
            }
        }
    }
    Ok(cross)
}

/// Empirical kernel between two instances: the mean of the embedding kernel
/// over all cross pairs of their samples.
pub fn smm_kernel(pi: &DistInstance, pj: &DistInstance, spec: &KernelSpec) -> Result<f64> {
    let block = kernel_block(&pi.samples, &pj.samples, spec)?;
    Ok(block.sum() / (pi.len() as f64 * pj.len() as f64))
}

/// Precomputed instance-level kernel values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub spec: KernelSpec,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Smallest eigenvalue, for the PSD diagnostics.
    pub fn min_eigenvalue(&self) -> f64 {
        self.values
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn trace(&self) -> f64 {
        self.values.trace()
    }

    /// Writes the matrix as CSV with instance ids as header, for debugging.
    pub fn dump_csv(&self, ids: &[String], path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(ids)?;
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.n()).map(|j| format!("{}", self.get(i, j))).collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Computes the instance-level Gram matrix, one evaluation per unordered pair.
/// Pairs are computed in parallel; each entry is a fixed-order double sum, so
/// the result does not depend on the schedule and is bitwise symmetric.
pub fn gram(instances: &[DistInstance], spec: &KernelSpec) -> Result<GramMatrix> {
    if instances.is_empty() {
        return Err(Error::Data("gram of an empty instance list".into()));
    }
    let d = instances[0].dim();
    for inst in instances {
        if inst.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: inst.dim() });
        }
    }
    let n = instances.len();
    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let entries: Vec<((usize, usize), f64)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let v = smm_kernel(&instances[i], &instances[j], spec).expect("dims checked above");
            ((i, j), v)
        })
        .collect();
    let mut values = DMatrix::zeros(n, n);
    for ((i, j), v) in entries {
        values[(i, j)] = v;
        values[(j, i)] = v;
    }
    Ok(GramMatrix { values, spec: *spec })
}

/// Kernel values of one instance against a list of reference instances.
pub fn kernel_row(p: &DistInstance, refs: &[DistInstance], spec: &KernelSpec) -> Result<Vec<f64>> {
    refs.iter().map(|r| smm_kernel(p, r, spec)).collect()
}
