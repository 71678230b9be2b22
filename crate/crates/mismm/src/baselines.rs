//! Reference methods that collapse the distributional structure.
//!
//! One baseline imputes every instance's label from its bag and trains a
//! single balanced dual solve over singleton bags. The other replaces each
//! instance's sample cloud by a fixed-length summary vector (moments,
//! quartiles, optionally pairwise correlations), standardises the summaries
//! with training statistics, and runs the witness-alternating trainer on the
//! resulting point instances.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{apply_scaler, dataset_from_parts, fit_scaler, Bag, Dataset, DistInstance, ScaleParams};
use crate::error::{Error, Result};
use crate::heuristic::{fit_heuristic, DualModel, HeuristicConfig};

/// Which summary blocks to compute. Means and standard deviations are always
/// included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummarySpec {
    /// Add skewness, kurtosis, and the first/third quartiles per feature.
    pub univ2: bool,
    /// Add pairwise correlations between features.
    pub cor: bool,
}

impl SummarySpec {
    pub fn univ1() -> Self {
        Self { univ2: false, cor: false }
    }

    /// Parses a comma-separated block list such as `"univ1,univ2,cor"`.
    /// `univ1` is implied and accepted for readability.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = Self::univ1();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "univ1" => {}
                "univ2" => spec.univ2 = true,
                "cor" => spec.cor = true,
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown summary block '{other}' (expected univ1, univ2, or cor)"
                    )))
                }
            }
        }
        Ok(spec)
    }

    /// Summary vector length for `d` input features.
    pub fn dim(&self, d: usize) -> usize {
        let mut n = 2 * d;
        if self.univ2 {
            n += 4 * d;
        }
        if self.cor {
            n += d * (d - 1) / 2;
        }
        n
    }

    /// Column names of the summary vector, derived from the input names.
    pub fn names(&self, features: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim(features.len()));
        for f in features {
            out.push(format!("mean_{f}"));
        }
        for f in features {
            out.push(format!("sd_{f}"));
        }
        if self.univ2 {
            for f in features {
                out.push(format!("skew_{f}"));
            }
            for f in features {
                out.push(format!("kurt_{f}"));
            }
            for f in features {
                out.push(format!("q1_{f}"));
            }
            for f in features {
                out.push(format!("q3_{f}"));
            }
        }
        if self.cor {
            for j in 0..features.len() {
                for k in (j + 1)..features.len() {
                    out.push(format!("cor_{}_{}", features[j], features[k]));
                }
            }
        }
        out
    }

    pub fn label(&self) -> String {
        let mut parts = vec!["univ1"];
        if self.univ2 {
            parts.push("univ2");
        }
        if self.cor {
            parts.push("cor");
        }
        parts.join(",")
    }
}

/// Linear-interpolation quantile of a sorted slice (the convention where the
/// `p`-quantile sits at fractional rank `(n−1)p`).
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Collapse one instance's sample cloud into a summary vector. Means and
/// standard deviations need at least 2 samples; skewness and kurtosis need 3.
pub fn summarize(instance: &DistInstance, spec: &SummarySpec) -> Result<Vec<f64>> {
    let r = instance.len();
    let d = instance.dim();
    if r < 2 {
        return Err(Error::Data(format!(
            "instance '{}' has {r} sample(s); summaries need at least 2",
            instance.instance_id
        )));
    }
    if spec.univ2 && r < 3 {
        return Err(Error::Data(format!(
            "instance '{}' has {r} samples; skewness and kurtosis need at least 3",
            instance.instance_id
        )));
    }

    let mut means = vec![0.0; d];
    let mut sds = vec![0.0; d];
    // Central moments with a 1/n denominator; the standard deviation itself
    // uses 1/(n−1).
    let mut m2 = vec![0.0; d];
    let mut m3 = vec![0.0; d];
    let mut m4 = vec![0.0; d];
    for j in 0..d {
        let col = instance.samples.column(j);
        let mean = col.mean();
        means[j] = mean;
        let (mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0);
        for &x in col.iter() {
            let delta = x - mean;
            let d2 = delta * delta;
            s2 += d2;
            s3 += d2 * delta;
            s4 += d2 * d2;
        }
        sds[j] = (s2 / (r as f64 - 1.0)).sqrt();
        m2[j] = s2 / r as f64;
        m3[j] = s3 / r as f64;
        m4[j] = s4 / r as f64;
    }

    let mut out = Vec::with_capacity(spec.dim(d));
    out.extend_from_slice(&means);
    out.extend_from_slice(&sds);

    if spec.univ2 {
        let mut skews = Vec::with_capacity(d);
        let mut kurts = Vec::with_capacity(d);
        for j in 0..d {
            if m2[j] <= 0.0 {
                return Err(Error::ZeroVariance(format!(
                    "feature {j} of instance '{}' is constant; skewness is undefined",
                    instance.instance_id
                )));
            }
            skews.push(m3[j] / m2[j].powf(1.5));
            kurts.push(m4[j] / (m2[j] * m2[j]));
        }
        out.extend_from_slice(&skews);
        out.extend_from_slice(&kurts);
        for j in 0..d {
            let mut col: Vec<f64> = instance.samples.column(j).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            out.push(quantile_sorted(&col, 0.25));
        }
        for j in 0..d {
            let mut col: Vec<f64> = instance.samples.column(j).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            out.push(quantile_sorted(&col, 0.75));
        }
    }

    if spec.cor {
        for j in 0..d {
            for k in (j + 1)..d {
                let denom = (m2[j] * m2[k]).sqrt();
                if denom <= 0.0 {
                    warn!(
                        "constant feature in instance '{}': correlation ({j},{k}) set to 0",
                        instance.instance_id
                    );
                    out.push(0.0);
                    continue;
                }
                let mut cov = 0.0;
                for row in 0..r {
                    cov += (instance.samples[(row, j)] - means[j])
                        * (instance.samples[(row, k)] - means[k]);
                }
                cov /= r as f64;
                out.push(cov / denom);
            }
        }
    }
    Ok(out)
}

/// Replace each instance by a single-point instance holding its summary
/// vector; bag structure and labels are preserved.
pub fn summarize_dataset(ds: &Dataset, spec: &SummarySpec) -> Result<Dataset> {
    let instances = ds
        .instances
        .iter()
        .map(|inst| {
            let v = summarize(inst, spec)?;
            Ok(DistInstance::new(inst.instance_id.clone(), DMatrix::from_row_slice(1, v.len(), &v)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        instances,
        bags: ds.bags.clone(),
        feature_names: spec.names(&ds.feature_names),
    })
}

/// Give every instance its bag's label and its own singleton bag. This is
/// the label-imputation reduction: weak supervision is treated as exact.
pub fn singletonize(ds: &Dataset) -> Dataset {
    let bags = ds
        .bags
        .iter()
        .flat_map(|bag| {
            bag.instance_indices.iter().map(move |&i| Bag {
                bag_id: format!("{}/{}", bag.bag_id, ds.instances[i].instance_id),
                instance_indices: vec![i],
                label: bag.label,
            })
        })
        .collect();
    dataset_from_parts(ds.instances.clone(), bags, ds.feature_names.clone())
        .expect("singleton bags over a valid dataset always partition its instances")
}

/// Label-imputation baseline: one balanced dual solve over all instances,
/// each treated as a singleton bag carrying its bag's label.
pub fn fit_si_smm(ds: &Dataset, config: &HeuristicConfig) -> Result<DualModel> {
    fit_heuristic(&singletonize(ds), config)
}

/// Summary-vector baseline model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiSvmModel {
    pub spec: SummarySpec,
    pub scaler: ScaleParams,
    pub inner: DualModel,
}

impl MiSvmModel {
    fn transformed(&self, instance: &DistInstance) -> Result<DistInstance> {
        let v = summarize(instance, &self.spec)?;
        let scaled: Vec<f64> = self
            .scaler
            .keep
            .iter()
            .enumerate()
            .map(|(jj, &j)| (v[j] - self.scaler.means[jj]) / self.scaler.sds[jj])
            .collect();
        Ok(DistInstance::new(
            instance.instance_id.clone(),
            DMatrix::from_row_slice(1, scaled.len(), &scaled),
        ))
    }

    pub fn score_instance(&self, instance: &DistInstance) -> Result<f64> {
        self.inner.score_instance(&self.transformed(instance)?)
    }

    pub fn score_bag(&self, instances: &[&DistInstance]) -> Result<f64> {
        if instances.is_empty() {
            return Err(Error::Data("cannot score an empty bag".into()));
        }
        let mut best = f64::NEG_INFINITY;
        for inst in instances {
            best = best.max(self.score_instance(inst)?);
        }
        Ok(best)
    }

    pub fn predict_bag(&self, instances: &[&DistInstance]) -> Result<i8> {
        Ok(if self.score_bag(instances)? > 0.0 { 1 } else { -1 })
    }
}

/// Summary-vector baseline: summarise, standardise with training statistics
/// (dropping constant summary columns), then run the witness-alternating
/// trainer on the point instances.
pub fn fit_mi_svm(ds: &Dataset, spec: &SummarySpec, config: &HeuristicConfig) -> Result<MiSvmModel> {
    let summarized = summarize_dataset(ds, spec)?;
    let scaler = fit_scaler(&summarized, true)?;
    let scaled = apply_scaler(&summarized, &scaler)?;
    let inner = fit_heuristic(&scaled, config)?;
    Ok(MiSvmModel { spec: *spec, scaler, inner })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn instance_1d(values: &[f64]) -> DistInstance {
        DistInstance::new("t", DMatrix::from_fn(values.len(), 1, |i, _| values[i]))
    }

    #[test]
    fn mean_and_sd_of_small_sample() {
        let v = summarize(&instance_1d(&[1.0, 2.0, 3.0]), &SummarySpec::univ1()).unwrap();
        assert_eq!(v.len(), 2);
        assert!((v[0] - 2.0).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn higher_moments_of_symmetric_sample() {
        // {1,2,3}: skewness 0; kurtosis m4/m2² = (2/3)/(4/9) = 1.5.
        let spec = SummarySpec { univ2: true, cor: false };
        let v = summarize(&instance_1d(&[1.0, 2.0, 3.0]), &spec).unwrap();
        assert_eq!(v.len(), 6);
        assert!(v[2].abs() < 1e-12, "skewness {}", v[2]);
        assert!((v[3] - 1.5).abs() < 1e-12, "kurtosis {}", v[3]);
    }

    #[test]
    fn quartiles_interpolate_between_order_statistics() {
        // {0,0,0,4}: Q1 at rank 0.75 → 0; Q3 at rank 2.25 → 1.
        let spec = SummarySpec { univ2: true, cor: false };
        let v = summarize(&instance_1d(&[0.0, 0.0, 0.0, 4.0]), &spec).unwrap();
        let (q1, q3) = (v[4], v[5]);
        assert_eq!(q1, 0.0);
        assert!((q3 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlations_detect_linear_dependence() {
        let spec = SummarySpec { univ2: false, cor: true };
        let samples = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let v = summarize(&DistInstance::new("t", samples), &spec).unwrap();
        assert_eq!(v.len(), 5);
        assert!((v[4] - 1.0).abs() < 1e-12, "perfectly dependent columns");

        let anti = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 2.0, -2.0, 3.0, -3.0]);
        let v = summarize(&DistInstance::new("t", anti), &spec).unwrap();
        assert!((v[4] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_feature_yields_zero_correlation() {
        let spec = SummarySpec { univ2: false, cor: true };
        let samples = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let v = summarize(&DistInstance::new("t", samples), &spec).unwrap();
        assert_eq!(v[4], 0.0);
    }

    #[test]
    fn summary_lengths_for_ten_features() {
        let d = 10;
        assert_eq!(SummarySpec::univ1().dim(d), 20);
        assert_eq!(SummarySpec { univ2: true, cor: false }.dim(d), 60);
        assert_eq!(SummarySpec { univ2: false, cor: true }.dim(d), 65);
        assert_eq!(SummarySpec { univ2: true, cor: true }.dim(d), 105);
        let names = SummarySpec { univ2: true, cor: true }
            .names(&(0..d).map(|i| format!("x{i}")).collect::<Vec<_>>());
        assert_eq!(names.len(), 105);
        assert_eq!(names[0], "mean_x0");
        assert_eq!(names[104], "cor_x8_x9");
    }

    #[test]
    fn parse_accepts_block_lists() {
        assert_eq!(SummarySpec::parse("univ1").unwrap(), SummarySpec::univ1());
        assert_eq!(
            SummarySpec::parse("univ1,univ2,cor").unwrap(),
            SummarySpec { univ2: true, cor: true }
        );
        assert_eq!(SummarySpec::parse("cor").unwrap(), SummarySpec { univ2: false, cor: true });
        assert!(SummarySpec::parse("median").is_err());
    }

    #[test]
    fn too_few_samples_is_an_error() {
        assert!(summarize(&instance_1d(&[1.0]), &SummarySpec::univ1()).is_err());
        let spec = SummarySpec { univ2: true, cor: false };
        assert!(summarize(&instance_1d(&[1.0, 2.0]), &spec).is_err());
    }

    fn tiny_training_set() -> Dataset {
        // Positive bags carry one instance sampled around +1, negatives
        // around −1; 5 samples each so every summary block is defined.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut instances = Vec::new();
        let mut bags = Vec::new();
        for b in 0..8 {
            let center = if b % 2 == 0 { 1.0 } else { -1.0 };
            let samples = DMatrix::from_fn(5, 2, |_, _| center + rand::Rng::gen_range(&mut rng, -0.3..0.3));
            instances.push(DistInstance::new(format!("i{b}"), samples));
            bags.push(Bag {
                bag_id: format!("b{b}"),
                instance_indices: vec![b],
                label: if b % 2 == 0 { 1 } else { -1 },
            });
        }
        dataset_from_parts(instances, bags, vec!["x0".into(), "x1".into()]).unwrap()
    }

    #[test]
    fn label_imputation_matches_direct_fit_on_singleton_bags() {
        // When bags are already singletons, imputing instance labels changes
        // nothing: both fits must agree exactly.
        let ds = tiny_training_set();
        let cfg = HeuristicConfig::new(1.0, KernelSpec::gaussian(1.0).unwrap());
        let a = fit_si_smm(&ds, &cfg).unwrap();
        let b = fit_heuristic(&ds, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
    }

    #[test]
    fn label_imputation_splits_multi_instance_bags() {
        let ds = tiny_training_set();
        // Merge the instances into two bags of four.
        let bags = vec![
            Bag { bag_id: "pos".into(), instance_indices: vec![0, 2, 4, 6], label: 1 },
            Bag { bag_id: "neg".into(), instance_indices: vec![1, 3, 5, 7], label: -1 },
        ];
        let merged = dataset_from_parts(ds.instances.clone(), bags, ds.feature_names.clone()).unwrap();
        let singles = singletonize(&merged);
        assert_eq!(singles.n_bags(), 8);
        assert!(singles.bags.iter().take(4).all(|b| b.label == 1));
        let cfg = HeuristicConfig::new(1.0, KernelSpec::gaussian(1.0).unwrap());
        let model = fit_si_smm(&merged, &cfg).unwrap();
        let s_pos = model.score_instance(&merged.instances[0]).unwrap();
        let s_neg = model.score_instance(&merged.instances[1]).unwrap();
        assert!(s_pos > s_neg);
    }

    #[test]
    fn summary_baseline_separates_shifted_clouds() {
        let ds = tiny_training_set();
        let spec = SummarySpec { univ2: true, cor: true };
        let cfg = HeuristicConfig::new(10.0, KernelSpec::Linear);
        let model = fit_mi_svm(&ds, &spec, &cfg).unwrap();
        for (i, bag) in ds.bags.iter().enumerate() {
            let inst = &ds.instances[bag.instance_indices[0]];
            let score = model.score_instance(inst).unwrap();
            assert!(
                (score > 0.0) == (bag.label == 1),
                "bag {i} score {score} against label {}",
                bag.label
            );
        }
    }

    #[test]
    fn summary_baseline_standardizes_with_training_statistics() {
        let ds = tiny_training_set();
        let spec = SummarySpec::univ1();
        let model = fit_mi_svm(&ds, &spec, &HeuristicConfig::new(1.0, KernelSpec::Linear)).unwrap();
        // The scaler must be fit on the summary columns, not raw features.
        assert_eq!(model.scaler.keep.len() + model.scaler.dropped.len(), spec.dim(2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn summaries_ignore_sample_order(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let r = rand::Rng::gen_range(&mut rng, 3..12usize);
            let d = rand::Rng::gen_range(&mut rng, 1..4usize);
            let rows: Vec<Vec<f64>> = (0..r)
                .map(|_| (0..d).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect())
                .collect();
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rng);
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let flat_s: Vec<f64> = shuffled.iter().flatten().copied().collect();
            let a = DistInstance::new("a", DMatrix::from_row_slice(r, d, &flat));
            let b = DistInstance::new("b", DMatrix::from_row_slice(r, d, &flat_s));
            let spec = SummarySpec { univ2: true, cor: d > 1 };
            let va = summarize(&a, &spec).unwrap();
            let vb = summarize(&b, &spec).unwrap();
            for (x, y) in va.iter().zip(&vb) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
