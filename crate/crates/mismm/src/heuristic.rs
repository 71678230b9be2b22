//! Alternating trainer for weakly supervised bags: repeatedly solve the dual
//! sub-problem for a fixed choice of witness instance per positive bag, then
//! re-pick each witness as the bag's highest-scoring instance, until the
//! choices stop changing. Random restarts keep the best run, judged by the
//! regularised hinge objective of the resulting classifier.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DistInstance};
use crate::dual::{self, DualProblem};
use crate::error::{Error, Result};
use crate::kernel::{self, GramMatrix, KernelSpec};

/// Coefficients below this fraction of the cost bound are treated as zero
/// when collecting support instances.
const SUPPORT_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct HeuristicConfig {
    pub kernel: KernelSpec,
    /// Cost bound for positive bags' witnesses.
    pub c_pos: f64,
    /// Cost bound shared by each negative bag's instances.
    pub c_neg: f64,
    /// Cap on witness re-selection rounds per restart.
    pub max_selector_updates: usize,
    pub n_restarts: usize,
    pub seed: u64,
    /// Tolerance handed to the dual solver.
    pub qp_tol: f64,
}

impl HeuristicConfig {
    pub fn new(c: f64, kernel: KernelSpec) -> Self {
        Self {
            kernel,
            c_pos: c,
            c_neg: c,
            max_selector_updates: 50,
            n_restarts: 1,
            seed: 0,
            qp_tol: 1e-9,
        }
    }
}

/// A trained kernel classifier: support instances with signed coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualModel {
    pub kernel: KernelSpec,
    pub support: Vec<DistInstance>,
    /// Signed coefficients αᵢyᵢ aligned with `support`.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub bias_fallback: bool,
    /// Regularised hinge objective of the classifier on its training set.
    pub objective: f64,
    pub dual_objective: f64,
    pub kkt_residual: f64,
    /// Witness instance (dataset index) chosen for each positive bag.
    pub selector: Vec<usize>,
    /// Witness re-selection rounds used by the winning restart.
    pub selector_updates: usize,
    pub converged: bool,
}

impl DualModel {
    /// Decision score of one distributional instance.
    pub fn score_instance(&self, instance: &DistInstance) -> Result<f64> {
        let row = kernel::kernel_row(instance, &self.support, &self.kernel)?;
        Ok(row.iter().zip(&self.weights).map(|(k, w)| k * w).sum::<f64>() + self.bias)
    }

    /// Bag score: the maximum over its instances.
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

    /// Predicted label for a bag: +1 when the score is positive.
    pub fn predict_bag(&self, instances: &[&DistInstance]) -> Result<i8> {
        Ok(if self.score_bag(instances)? > 0.0 { 1 } else { -1 })
    }
}

/// The effective instance set for a fixed witness choice: every instance of
/// every negative bag plus the chosen witness of each positive bag.
struct EffectiveSet {
    /// Dataset instance indices, bag-major.
    indices: Vec<usize>,
    labels: Vec<f64>,
    /// Positions (into `indices`) of each negative bag's instances.
    neg_groups: Vec<Vec<usize>>,
}

fn effective_set(dataset: &Dataset, pos_bags: &[usize], selector: &[usize]) -> EffectiveSet {
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    let mut neg_groups = Vec::new();
    let mut next_pos = 0;
    for (b, bag) in dataset.bags.iter().enumerate() {
        if bag.is_positive() {
            debug_assert_eq!(pos_bags[next_pos], b);
            indices.push(selector[next_pos]);
            labels.push(1.0);
            next_pos += 1;
        } else {
            let mut group = Vec::with_capacity(bag.instance_indices.len());
            for &inst in &bag.instance_indices {
                group.push(indices.len());
                indices.push(inst);
                labels.push(-1.0);
            }
            neg_groups.push(group);
        }
    }
    EffectiveSet { indices, labels, neg_groups }
}

fn sub_gram(gram: &GramMatrix, indices: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(indices.len(), indices.len(), |i, j| gram.get(indices[i], indices[j]))
}

/// Regularised hinge objective of a kernel expansion on the training bags:
/// ½‖w‖² plus the weighted hinge losses of the bag scores (each bag scored by
/// its best instance, bias included).
pub fn primal_objective(
    gram: &GramMatrix,
    dataset: &Dataset,
    effective: &[usize],
    labels: &[f64],
    alphas: &DVector<f64>,
    bias: f64,
    c_pos: f64,
    c_neg: f64,
) -> f64 {
    let ne = effective.len();
    let mut quad = 0.0;
    for i in 0..ne {
        if alphas[i] == 0.0 {
            continue;
        }
        for j in 0..ne {
            quad += alphas[i] * alphas[j] * labels[i] * labels[j] * gram.get(effective[i], effective[j]);
        }
    }

    let score = |inst: usize| -> f64 {
        (0..ne).map(|j| alphas[j] * labels[j] * gram.get(inst, effective[j])).sum::<f64>() + bias
    };
    let mut hinge = 0.0;
    for bag in &dataset.bags {
        let bag_score = bag
            .instance_indices
            .iter()
            .map(|&i| score(i))
            .fold(f64::NEG_INFINITY, f64::max);
        if bag.is_positive() {
            hinge += c_pos * (1.0 - bag_score).max(0.0);
        } else {
            hinge += c_neg * (1.0 + bag_score).max(0.0);
        }
    }
    0.5 * quad + hinge
}

struct RestartOutcome {
    selector: Vec<usize>,
    solution: dual::DualSolution,
    effective: EffectiveSet,
    objective: f64,
    updates: usize,
    converged: bool,
}

fn run_restart(
    dataset: &Dataset,
    gram: &GramMatrix,
    pos_bags: &[usize],
    config: &HeuristicConfig,
    rng: &mut ChaCha12Rng,
) -> Result<RestartOutcome> {
    let mut selector: Vec<usize> = pos_bags
        .iter()
        .map(|&b| {
            let choices = &dataset.bags[b].instance_indices;
            choices[rng.gen_range(0..choices.len())]
        })
        .collect();

    let mut updates = 0;
    let mut converged = false;
    let mut current: Option<(dual::DualSolution, EffectiveSet)> = None;
    while updates < config.max_selector_updates {
        updates += 1;
        let eff = effective_set(dataset, pos_bags, &selector);
        let sub = sub_gram(gram, &eff.indices);
        let problem = DualProblem {
            gram: &sub,
            labels: eff.labels.clone(),
            neg_groups: eff.neg_groups.clone(),
            c_pos: config.c_pos,
            c_neg: config.c_neg,
        };
        let sol = dual::solve_dual(&problem, config.qp_tol)?;

        // Re-pick each positive bag's witness as its highest-scoring
        // instance; ties keep the earliest instance in bag order.
        let mut next = Vec::with_capacity(selector.len());
        for &b in pos_bags {
            let mut best_idx = dataset.bags[b].instance_indices[0];
            let mut best_score = f64::NEG_INFINITY;
            for &inst in &dataset.bags[b].instance_indices {
                let s: f64 = (0..eff.indices.len())
                    .map(|j| sol.alphas[j] * eff.labels[j] * gram.get(inst, eff.indices[j]))
                    .sum::<f64>()
                    + sol.bias;
                if s > best_score {
                    best_score = s;
                    best_idx = inst;
                }
            }
            next.push(best_idx);
        }

        let unchanged = next == selector;
        current = Some((sol, eff));
        if unchanged {
            converged = true;
            break;
        }
        selector = next;
    }

    let (solution, effective) = current.expect("at least one dual solve runs");
    let objective = primal_objective(
        gram,
        dataset,
        &effective.indices,
        &effective.labels,
        &solution.alphas,
        solution.bias,
        config.c_pos,
        config.c_neg,
    );
    Ok(RestartOutcome { selector, solution, effective, objective, updates, converged })
}

/// Train by alternating witness selection and dual solves, keeping the best
/// restart.
pub fn fit_heuristic(dataset: &Dataset, config: &HeuristicConfig) -> Result<DualModel> {
    dataset.validate()?;
    if config.c_pos <= 0.0 || config.c_neg <= 0.0 {
        return Err(Error::InvalidParameter("cost bounds must be positive".into()));
    }
    if config.n_restarts == 0 || config.max_selector_updates == 0 {
        return Err(Error::InvalidParameter("restarts and selector updates must be positive".into()));
    }
    let pos_bags: Vec<usize> = dataset
        .bags
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_positive())
        .map(|(i, _)| i)
        .collect();
    if pos_bags.is_empty() || pos_bags.len() == dataset.n_bags() {
        return Err(Error::Data("training needs both positive and negative bags".into()));
    }

    let gram = kernel::gram(&dataset.instances, &config.kernel)?;
    let mut master = ChaCha12Rng::seed_from_u64(config.seed);
    let mut best: Option<RestartOutcome> = None;
    for restart in 0..config.n_restarts {
        let mut rng = ChaCha12Rng::seed_from_u64(master.gen());
        let outcome = run_restart(dataset, &gram, &pos_bags, config, &mut rng)?;
        debug!(
            "restart {restart}: objective {:.6}, {} updates, converged = {}",
            outcome.objective, outcome.updates, outcome.converged
        );
        let better = match &best {
            None => true,
            Some(b) => outcome.objective < b.objective,
        };
        if better {
            best = Some(outcome);
        }
    }
    let best = best.expect("n_restarts >= 1");

    let mut support = Vec::new();
    let mut weights = Vec::new();
    let cutoff = SUPPORT_CUTOFF * config.c_pos.max(config.c_neg);
    for (k, &inst) in best.effective.indices.iter().enumerate() {
        let alpha = best.solution.alphas[k];
        if alpha > cutoff {
            support.push(dataset.instances[inst].clone());
            weights.push(alpha * best.effective.labels[k]);
        }
    }

    Ok(DualModel {
        kernel: config.kernel.clone(),
        support,
        weights,
        bias: best.solution.bias,
        bias_fallback: best.solution.bias_fallback,
        objective: best.objective,
        dual_objective: best.solution.objective,
        kkt_residual: best.solution.kkt_residual,
        selector: best.selector,
        selector_updates: best.updates,
        converged: best.converged,
    })
}

/// Convenience for scoring every bag of a dataset.
pub fn score_bags(model: &DualModel, dataset: &Dataset) -> Result<Vec<f64>> {
    dataset
        .bags
        .iter()
        .map(|bag| {
            let insts: Vec<&DistInstance> =
                bag.instance_indices.iter().map(|&i| &dataset.instances[i]).collect();
            model.score_bag(&insts)
        })
        .collect()
}

/// Bag labels of a dataset as ±1 floats, aligned with `score_bags`.
pub fn bag_labels(dataset: &Dataset) -> Vec<f64> {
    dataset.bags.iter().map(|b| f64::from(b.label)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dataset_from_parts, Bag};

    fn singleton_dataset(points: &[(f64, i8)]) -> Dataset {
        let mut instances = Vec::new();
        let mut bags = Vec::new();
        for (i, &(x, y)) in points.iter().enumerate() {
            instances.push(DistInstance::new(format!("i{i}"), DMatrix::from_element(1, 1, x)));
            bags.push(Bag { bag_id: format!("b{i}"), instance_indices: vec![i], label: y });
        }
        dataset_from_parts(instances, bags, vec!["x".into()]).unwrap()
    }

    #[test]
    fn separable_singletons_recover_unit_margin() {
        let ds = singleton_dataset(&[(1.0, 1), (-1.0, -1)]);
        let model = fit_heuristic(&ds, &HeuristicConfig::new(10.0, KernelSpec::Linear)).unwrap();
        assert!((model.objective - 0.5).abs() < 1e-6, "objective {}", model.objective);
        assert!(model.bias.abs() < 1e-6);
        assert!(model.converged);
        assert_eq!(model.selector, vec![0]);
        let s = model.score_instance(&ds.instances[0]).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "positive point must sit on the margin");
    }

    #[test]
    fn singleton_bags_match_single_dual_solve() {
        // With one instance per bag there is nothing to select, so the
        // trainer must reproduce a single dual solve exactly.
        let pts = [(0.4, 1), (1.3, 1), (-0.2, -1), (-1.0, -1)];
        let ds = singleton_dataset(&pts);
        let cfg = HeuristicConfig::new(1.0, KernelSpec::Linear);
        let model = fit_heuristic(&ds, &cfg).unwrap();

        let gram = DMatrix::from_fn(4, 4, |i, j| pts[i].0 * pts[j].0);
        let problem = DualProblem {
            gram: &gram,
            labels: vec![1.0, 1.0, -1.0, -1.0],
            neg_groups: vec![vec![2], vec![3]],
            c_pos: 1.0,
            c_neg: 1.0,
        };
        let direct = dual::solve_dual(&problem, 1e-9).unwrap();
        assert!((model.bias - direct.bias).abs() < 1e-9);
        assert!((model.dual_objective - direct.objective).abs() < 1e-9);
        assert_eq!(model.selector_updates, 1);
        assert!(model.converged);
    }

    fn two_instance_positive_dataset() -> Dataset {
        // One positive bag holding a decoy near the negatives and a clear
        // positive point, plus two negative singletons.
        let instances = vec![
            DistInstance::new("pos_decoy", DMatrix::from_element(1, 1, -0.8)),
            DistInstance::new("pos_clear", DMatrix::from_element(1, 1, 1.0)),
            DistInstance::new("neg_a", DMatrix::from_element(1, 1, -1.0)),
            DistInstance::new("neg_b", DMatrix::from_element(1, 1, -0.6)),
        ];
        let bags = vec![
            Bag { bag_id: "p".into(), instance_indices: vec![0, 1], label: 1 },
            Bag { bag_id: "n1".into(), instance_indices: vec![2], label: -1 },
            Bag { bag_id: "n2".into(), instance_indices: vec![3], label: -1 },
        ];
        dataset_from_parts(instances, bags, vec!["x".into()]).unwrap()
    }

    #[test]
    fn witness_moves_to_separable_instance() {
        let ds = two_instance_positive_dataset();
        let mut cfg = HeuristicConfig::new(10.0, KernelSpec::Linear);
        cfg.n_restarts = 3;
        let model = fit_heuristic(&ds, &cfg).unwrap();
        assert_eq!(model.selector, vec![1], "the clear positive must be chosen");
        assert!(model.converged);
        let s_pos = model.score_instance(&ds.instances[1]).unwrap();
        let s_neg = model.score_instance(&ds.instances[3]).unwrap();
        assert!(s_pos > 0.0 && s_neg < 0.0);
    }

    #[test]
    fn final_selector_is_a_fixed_point() {
        let ds = two_instance_positive_dataset();
        let cfg = HeuristicConfig { n_restarts: 2, ..HeuristicConfig::new(2.0, KernelSpec::Linear) };
        let model = fit_heuristic(&ds, &cfg).unwrap();
        assert!(model.converged);
        // Re-score every positive bag's instances under the final model: the
        // stored witness must already be the argmax.
        for (k, &b) in ds
            .bags
            .iter()
            .enumerate()
            .filter(|(_, bag)| bag.is_positive())
            .map(|(i, _)| i)
            .collect::<Vec<_>>()
            .iter()
            .enumerate()
        {
            let bag = &ds.bags[b];
            let mut best = (f64::NEG_INFINITY, 0usize);
            for &inst in &bag.instance_indices {
                let s = model.score_instance(&ds.instances[inst]).unwrap();
                if s > best.0 {
                    best = (s, inst);
                }
            }
            assert_eq!(model.selector[k], best.1);
        }
    }

    #[test]
    fn zero_expansion_objective_is_cost_times_bags() {
        let ds = singleton_dataset(&[(0.5, 1), (-0.5, -1), (-0.7, -1)]);
        let gram = kernel::gram(&ds.instances, &KernelSpec::Linear).unwrap();
        let alphas = DVector::zeros(3);
        let obj = primal_objective(
            &gram,
            &ds,
            &[0, 1, 2],
            &[1.0, -1.0, -1.0],
            &alphas,
            0.0,
            2.0,
            2.0,
        );
        assert!((obj - 6.0).abs() < 1e-12, "three bags at cost 2 each");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = two_instance_positive_dataset();
        let mut cfg = HeuristicConfig::new(1.0, KernelSpec::Linear);
        cfg.n_restarts = 2;
        cfg.seed = 7;
        let a = fit_heuristic(&ds, &cfg).unwrap();
        let b = fit_heuristic(&ds, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
        assert_eq!(a.selector, b.selector);
    }

    #[test]
    fn rejects_single_class_training_sets() {
        let ds = singleton_dataset(&[(1.0, 1), (2.0, 1)]);
        let err = fit_heuristic(&ds, &HeuristicConfig::new(1.0, KernelSpec::Linear));
        assert!(err.is_err());
    }
}
