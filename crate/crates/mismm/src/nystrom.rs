//! Low-rank kernel feature maps built from a subsample of anchor points.
//!
//! A subset of the pooled sample points is drawn (stratified across bags),
//! the kernel matrix of those anchors is eigendecomposed, and each point is
//! mapped to `D^{-1/2} Vᵀ (k(x, x̂₁), …, k(x, x̂_m))ᵀ`. Averaging the mapped
//! sample points of an instance gives a finite-dimensional vector whose inner
//! products approximate the instance-level kernel, exactly so when the
//! anchors span all sample points.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{kernel_block, KernelSpec};

/// Eigenvalues below this fraction of the largest one are dropped.
const EIGENVALUE_CUTOFF: f64 = 1e-10;

/// A fitted feature map: anchor points plus the projection that turns a
/// kernel column against the anchors into coordinates.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NystromMap {
    pub anchors: DMatrix<f64>,
    /// Rows scale-and-rotate a kernel column; shape (rank, n_anchors).
    pub projection: DMatrix<f64>,
    pub spec: KernelSpec,
}

impl NystromMap {
    /// Output dimension of the map (at most the requested rank).
    pub fn rank(&self) -> usize {
        self.projection.nrows()
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.nrows()
    }

    /// Map a single sample point.
    pub fn embed_point(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.anchors.ncols() {
            return Err(Error::DimensionMismatch { expected: self.anchors.ncols(), got: x.len() });
        }
        let point = DMatrix::from_row_slice(1, x.len(), x);
        let block = kernel_block(&self.anchors, &point, &self.spec)?;
        Ok(&self.projection * block.column(0))
    }

    /// Map an instance: the average of its mapped sample points.
    pub fn embed_samples(&self, samples: &DMatrix<f64>) -> Result<DVector<f64>> {
        if samples.nrows() == 0 {
            return Err(Error::NoSamples);
        }
        // Mean kernel column against the anchors, then one projection.
        let block = kernel_block(&self.anchors, samples, &self.spec)?;
        let mean = block.column_sum() / samples.nrows() as f64;
        Ok(&self.projection * mean)
    }

    /// Map every instance of a dataset; row `i` holds instance `i`.
    pub fn embed_dataset(&self, dataset: &Dataset) -> Result<DMatrix<f64>> {
        let n = dataset.n_instances();
        let mut out = DMatrix::zeros(n, self.rank());
        for (i, inst) in dataset.instances.iter().enumerate() {
            let z = self.embed_samples(&inst.samples)?;
            out.row_mut(i).copy_from(&z.transpose());
        }
        Ok(out)
    }
}

/// Draw `m` anchor rows from the pooled sample points, spreading the budget
/// across bags round-robin and sampling uniformly without replacement inside
/// each bag. Anchor order is bag-major with ascending row index, so equal
/// RNG state reproduces equal anchors.
pub fn stratified_subsample<R: Rng>(dataset: &Dataset, m: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let total = dataset.total_samples();
    if m == 0 {
        return Err(Error::InvalidParameter("anchor count must be positive".into()));
    }
    if m > total {
        return Err(Error::InvalidParameter(format!(
            "anchor count {m} exceeds the {total} pooled sample points"
        )));
    }

    // Pooled rows per bag, in dataset order.
    let n_bags = dataset.n_bags();
    let mut bag_rows: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_bags];
    for (b, bag) in dataset.bags.iter().enumerate() {
        for &inst in &bag.instance_indices {
            for r in 0..dataset.instances[inst].len() {
                bag_rows[b].push((inst, r));
            }
        }
    }

    let mut allocated = vec![0usize; n_bags];
    let mut assigned = 0;
    while assigned < m {
        let before = assigned;
        for b in 0..n_bags {
            if assigned == m {
                break;
            }
            if allocated[b] < bag_rows[b].len() {
                allocated[b] += 1;
                assigned += 1;
            }
        }
        debug_assert!(assigned > before, "total sample count was checked above");
        if assigned == before {
            break;
        }
    }

    let d = dataset.dim();
    let mut anchors = DMatrix::zeros(m, d);
    let mut out_row = 0;
    for b in 0..n_bags {
        if allocated[b] == 0 {
            continue;
        }
        let mut picks: Vec<usize> =
            rand::seq::index::sample(rng, bag_rows[b].len(), allocated[b]).into_vec();
        picks.sort_unstable();
        for p in picks {
            let (inst, r) = bag_rows[b][p];
            anchors.row_mut(out_row).copy_from(&dataset.instances[inst].samples.row(r));
            out_row += 1;
        }
    }
    Ok(anchors)
}

/// Eigendecompose the anchor kernel matrix and keep up to `rank` leading
/// eigenpairs, dropping directions whose eigenvalue falls below a fixed
/// fraction of the largest one.
pub fn fit_nystrom(anchors: DMatrix<f64>, spec: &KernelSpec, rank: usize) -> Result<NystromMap> {
    let m = anchors.nrows();
    if m == 0 {
        return Err(Error::InvalidParameter("no anchor points".into()));
    }
    if rank == 0 {
        return Err(Error::InvalidParameter("rank must be positive".into()));
    }
    if anchors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("anchor matrix contains non-finite values".into()));
    }

    let mut k_hat = kernel_block(&anchors, &anchors, spec)?;
    // The block product is only symmetric up to rounding; the
    // eigendecomposition needs it exact.
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 0.5 * (k_hat[(i, j)] + k_hat[(j, i)]);
            k_hat[(i, j)] = v;
            k_hat[(j, i)] = v;
        }
    }

    let eig = k_hat.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let lead = eig.eigenvalues[order[0]];
    if !(lead > 0.0) {
        return Err(Error::Numerical("anchor kernel matrix has no positive spectrum".into()));
    }

    let mut kept = Vec::new();
    for &idx in order.iter().take(rank) {
        let lambda = eig.eigenvalues[idx];
        if lambda > EIGENVALUE_CUTOFF * lead {
            kept.push(idx);
        }
    }
    if kept.len() < rank.min(m) {
        warn!(
            "anchor kernel matrix is rank deficient: keeping {} of {} requested dimensions",
            kept.len(),
            rank.min(m)
        );
    }

    let mut projection = DMatrix::zeros(kept.len(), m);
    for (r, &idx) in kept.iter().enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        // Deterministic orientation: make the largest-magnitude entry positive.
        let mut lead_entry = 0.0f64;
        for &e in v.iter() {
            if e.abs() > lead_entry.abs() {
                lead_entry = e;
            }
        }
        if lead_entry < 0.0 {
            v = -v;
        }
        let scale = eig.eigenvalues[idx].sqrt().recip();
        projection.row_mut(r).copy_from(&(v.transpose() * scale));
    }

    Ok(NystromMap { anchors, projection, spec: spec.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Bag, Dataset, DistInstance};
    use crate::kernel::smm_kernel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_dataset(seed: u64, bag_sizes: &[(usize, usize)], d: usize) -> Dataset {
        // bag_sizes: (instances, samples per instance) per bag
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut instances = Vec::new();
        let mut bags = Vec::new();
        for (b, &(n_inst, n_samp)) in bag_sizes.iter().enumerate() {
            let mut idxs = Vec::new();
            for _ in 0..n_inst {
                idxs.push(instances.len());
                let samples = DMatrix::from_fn(n_samp, d, |_, _| rng.gen_range(-1.0..1.0));
                instances.push(DistInstance {
                    instance_id: format!("b{b}i{}", idxs.len()),
                    samples,
                });
            }
            bags.push(Bag {
                bag_id: format!("bag{b}"),
                instance_indices: idxs,
                label: if b % 2 == 0 { 1 } else { -1 },
            });
        }
        Dataset { instances, bags, feature_names: (0..d).map(|i| format!("x{i}")).collect() }
    }

    use rand::Rng;

    #[test]
    fn subsample_spreads_budget_across_bags() {
        // Bags with 8, 8, and 4 pooled samples; asking for 12 anchors gives
        // each bag its fair share via round-robin: 4, 4, 4.
        let ds = random_dataset(1, &[(2, 4), (4, 2), (1, 4)], 3);
        assert_eq!(ds.total_samples(), 20);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let anchors = stratified_subsample(&ds, 12, &mut rng).unwrap();
        assert_eq!(anchors.nrows(), 12);
        assert_eq!(anchors.ncols(), 3);
    }

    #[test]
    fn subsample_rejects_oversized_request() {
        let ds = random_dataset(2, &[(1, 3)], 2);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(stratified_subsample(&ds, 4, &mut rng).is_err());
        assert!(stratified_subsample(&ds, 0, &mut rng).is_err());
    }

    #[test]
    fn subsample_exhausts_small_bags_gracefully() {
        // One bag with 2 samples, one with 10: asking for 8 anchors must give
        // the small bag both of its rows and the rest to the big one.
        let ds = random_dataset(3, &[(1, 2), (2, 5)], 2);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let anchors = stratified_subsample(&ds, 8, &mut rng).unwrap();
        assert_eq!(anchors.nrows(), 8);
        // First two anchor rows must come from bag 0's unique samples.
        let bag0: Vec<Vec<f64>> = (0..2)
            .map(|r| ds.instances[0].samples.row(r).iter().copied().collect())
            .collect();
        for r in 0..2 {
            let row: Vec<f64> = anchors.row(r).iter().copied().collect();
            assert!(bag0.contains(&row));
        }
    }

    #[test]
    fn map_shapes_follow_requested_rank() {
        let ds = random_dataset(5, &[(2, 5), (2, 5)], 4);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let anchors = stratified_subsample(&ds, 12, &mut rng).unwrap();
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let map = fit_nystrom(anchors, &spec, 8).unwrap();
        assert_eq!(map.rank(), 8);
        assert_eq!(map.n_anchors(), 12);
        let z = map.embed_dataset(&ds).unwrap();
        assert_eq!(z.nrows(), 4);
        assert_eq!(z.ncols(), 8);
    }

    #[test]
    fn full_anchor_set_reproduces_instance_kernel() {
        // With anchors covering every pooled sample and full rank, mapped
        // inner products equal the exact instance-level kernel.
        let ds = random_dataset(7, &[(2, 4), (2, 4)], 3);
        let total = ds.total_samples();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let anchors = stratified_subsample(&ds, total, &mut rng).unwrap();
        let spec = KernelSpec::gaussian(0.8).unwrap();
        let map = fit_nystrom(anchors, &spec, total).unwrap();
        let z = map.embed_dataset(&ds).unwrap();
        for i in 0..ds.n_instances() {
            for j in 0..ds.n_instances() {
                let exact = smm_kernel(&ds.instances[i], &ds.instances[j], &spec).unwrap();
                let approx = z.row(i).dot(&z.row(j));
                assert!(
                    (exact - approx).abs() < 1e-8,
                    "({i},{j}): exact {exact} vs approx {approx}"
                );
            }
        }
    }

    #[test]
    fn duplicate_anchors_reduce_rank_but_still_reconstruct() {
        let ds = random_dataset(8, &[(1, 3), (1, 3)], 2);
        let total = ds.total_samples();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let base = stratified_subsample(&ds, total, &mut rng).unwrap();
        // Duplicate the first anchor row: span unchanged, matrix rank drops.
        let mut rows: Vec<f64> = Vec::new();
        for r in 0..base.nrows() {
            rows.extend(base.row(r).iter());
        }
        rows.extend(base.row(0).iter());
        let doubled = DMatrix::from_row_slice(base.nrows() + 1, 2, &rows);
        let spec = KernelSpec::gaussian(0.7).unwrap();
        let map = fit_nystrom(doubled, &spec, total + 1).unwrap();
        assert!(map.rank() < total + 1, "duplicated anchor must drop a dimension");
        let z = map.embed_dataset(&ds).unwrap();
        for i in 0..ds.n_instances() {
            for j in 0..ds.n_instances() {
                let exact = smm_kernel(&ds.instances[i], &ds.instances[j], &spec).unwrap();
                let approx = z.row(i).dot(&z.row(j));
                assert!((exact - approx).abs() < 1e-6, "({i},{j})");
            }
        }
    }

    #[test]
    fn approximation_error_shrinks_with_rank() {
        let ds = random_dataset(21, &[(3, 6), (3, 6)], 3);
        let total = ds.total_samples();
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let anchors = stratified_subsample(&ds, total, &mut rng).unwrap();
        let n = ds.n_instances();
        let mut exact = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                exact[(i, j)] = smm_kernel(&ds.instances[i], &ds.instances[j], &spec).unwrap();
            }
        }
        let mut prev = f64::INFINITY;
        for rank in [2, 4, 8, 16, total] {
            let map = fit_nystrom(anchors.clone(), &spec, rank).unwrap();
            let z = map.embed_dataset(&ds).unwrap();
            let approx = &z * z.transpose();
            let err = (&exact - &approx).norm();
            assert!(
                err <= prev + 1e-9,
                "rank {rank}: error {err} exceeds previous {prev}"
            );
            prev = err;
        }
        assert!(prev < 1e-8, "full rank must reconstruct exactly, got {prev}");
    }

    #[test]
    fn fitting_is_deterministic_for_equal_seeds() {
        let ds = random_dataset(31, &[(2, 5), (2, 5)], 3);
        let spec = KernelSpec::gaussian(1.2).unwrap();
        let run = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let anchors = stratified_subsample(&ds, 10, &mut rng).unwrap();
            fit_nystrom(anchors, &spec, 6).unwrap()
        };
        let (a, b) = (run(99), run(99));
        assert_eq!(a.anchors, b.anchors);
        assert_eq!(a.projection, b.projection);
        let c = run(100);
        assert!(a.anchors != c.anchors, "different seeds should draw different anchors");
    }

    #[test]
    fn singleton_instance_embeds_its_only_point() {
        let ds = random_dataset(41, &[(1, 1), (1, 4)], 2);
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let anchors = stratified_subsample(&ds, 5, &mut rng).unwrap();
        let spec = KernelSpec::gaussian(0.9).unwrap();
        let map = fit_nystrom(anchors, &spec, 5).unwrap();
        let point: Vec<f64> = ds.instances[0].samples.row(0).iter().copied().collect();
        let via_point = map.embed_point(&point).unwrap();
        let via_instance = map.embed_samples(&ds.instances[0].samples).unwrap();
        assert_eq!(via_point, via_instance);
    }
}
