//! Soft-margin dual sub-problem over an effective instance set.
//!
//! The effective set holds every instance of every negative bag plus one
//! chosen instance per positive bag. Box bounds apply to the chosen positive
//! instances individually, while the instances of each negative bag share a
//! budget on their coefficient sum. An equality row keeps the signed
//! coefficients balanced, exactly as in a classical SVM dual.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::qp::{self, QpOptions, QpProblem};

/// Relative slack used to decide whether a coefficient sits strictly inside
/// its bounds when estimating the bias.
const BOUND_SLACK: f64 = 1e-8;

/// Dual sub-problem data. `gram` is the kernel matrix over the effective
/// instances, `labels` their bag-inherited signs, and `neg_groups` the index
/// sets of each negative bag (every index with label −1 must appear in
/// exactly one group).
#[derive(Debug, Clone)]
pub struct DualProblem<'a> {
    pub gram: &'a DMatrix<f64>,
    pub labels: Vec<f64>,
    pub neg_groups: Vec<Vec<usize>>,
    /// Upper bound on each chosen positive instance's coefficient.
    pub c_pos: f64,
    /// Upper bound on each negative bag's coefficient sum.
    pub c_neg: f64,
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alphas: DVector<f64>,
    pub bias: f64,
    /// Value of the maximised dual objective Σα − ½ Σ αᵢαⱼyᵢyⱼKᵢⱼ.
    pub objective: f64,
    pub kkt_residual: f64,
    /// True when no coefficient was strictly inside its bounds and the bias
    /// fell back to the midpoint between the extreme class scores.
    pub bias_fallback: bool,
    pub iterations: usize,
}

impl DualProblem<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.gram.nrows();
        if self.gram.ncols() != n {
            return Err(Error::InvalidParameter("gram matrix must be square".into()));
        }
        if self.labels.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.labels.len() });
        }
        if self.c_pos <= 0.0 || self.c_neg <= 0.0 {
            return Err(Error::InvalidParameter("cost bounds must be positive".into()));
        }
        let mut seen = vec![false; n];
        for group in &self.neg_groups {
            for &i in group {
                if i >= n {
                    return Err(Error::InvalidParameter(format!("group index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::InvalidParameter(format!("instance {i} in two negative groups")));
                }
                seen[i] = true;
                if self.labels[i] != -1.0 {
                    return Err(Error::InvalidParameter(format!("instance {i} in a negative group has label {}", self.labels[i])));
                }
            }
        }
        let mut n_pos = 0;
        for (i, &y) in self.labels.iter().enumerate() {
            if y == 1.0 {
                n_pos += 1;
            } else if y == -1.0 {
                if !seen[i] {
                    return Err(Error::InvalidParameter(format!("negative instance {i} not covered by any group")));
                }
            } else {
                return Err(Error::InvalidParameter(format!("label at {i} must be ±1, got {y}")));
            }
        }
        if n_pos == 0 || n_pos == n {
            return Err(Error::InvalidParameter("dual problem needs both classes".into()));
        }
        Ok(())
    }
}

/// Solve the dual sub-problem to the given KKT tolerance.
pub fn solve_dual(problem: &DualProblem, tol: f64) -> Result<DualSolution> {
    problem.validate()?;
    let n = problem.gram.nrows();
    let y = DVector::from_iterator(n, problem.labels.iter().copied());

    // Minimise ½αᵀ(yyᵀ∘K)α − 1ᵀα.
    let mut q = problem.gram.clone();
    for i in 0..n {
        for j in 0..n {
            q[(i, j)] *= y[i] * y[j];
        }
    }
    // Symmetrise against accumulated round-off so the QP sees an exact
    // symmetric matrix.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (q[(i, j)] + q[(j, i)]);
            q[(i, j)] = v;
            q[(j, i)] = v;
        }
    }
    let c = DVector::from_element(n, -1.0);

    let n_pos = problem.labels.iter().filter(|&&l| l == 1.0).count();
    let m = n + n_pos + problem.neg_groups.len();
    let mut a_in = DMatrix::zeros(m, n);
    let mut b_in = DVector::zeros(m);
    for i in 0..n {
        a_in[(i, i)] = -1.0; // α ≥ 0
    }
    let mut row = n;
    for i in 0..n {
        if problem.labels[i] == 1.0 {
            a_in[(row, i)] = 1.0;
            b_in[row] = problem.c_pos;
            row += 1;
        }
    }
    for group in &problem.neg_groups {
        for &i in group {
            a_in[(row, i)] = 1.0;
        }
        b_in[row] = problem.c_neg;
        row += 1;
    }

    let a_eq = DMatrix::from_fn(1, n, |_, j| y[j]);
    let qp_problem = QpProblem { q: q.clone(), c, a_eq, b_eq: DVector::zeros(1), a_in, b_in };
    // Aim below the caller's tolerance, but only fail when even the best
    // iterate misses it.
    let opts = QpOptions { tol: tol.min(1e-9), accept: tol.max(1e-6), ..QpOptions::default() };
    let sol = qp::solve(&qp_problem, &opts)?;

    let alphas = sol.x;
    let objective = -sol.objective; // back to the maximised form
    let (bias, bias_fallback) = estimate_bias(problem, &alphas);
    Ok(DualSolution {
        alphas,
        bias,
        objective,
        kkt_residual: sol.kkt_residual,
        bias_fallback,
        iterations: sol.iterations,
    })
}

/// Kernel-weighted score of effective instance `i` before adding the bias:
/// Σⱼ αⱼ yⱼ K(i, j).
fn raw_score(problem: &DualProblem, alphas: &DVector<f64>, i: usize) -> f64 {
    (0..alphas.len()).map(|j| alphas[j] * problem.labels[j] * problem.gram[(i, j)]).sum()
}

/// Bias from coefficients strictly inside their bounds: the average of
/// yᵢ − Σⱼ αⱼyⱼKᵢⱼ over those instances. A chosen positive instance counts
/// when its own coefficient is interior; a negative instance counts when its
/// coefficient is active and its bag's sum is below the shared budget. With
/// no interior instance at all the bias falls back to the midpoint between
/// the highest-scoring negative and the lowest-scoring positive instance.
fn estimate_bias(problem: &DualProblem, alphas: &DVector<f64>) -> (f64, bool) {
    let n = alphas.len();
    let mut group_of = vec![usize::MAX; n];
    let mut group_sum = vec![0.0; problem.neg_groups.len()];
    for (g, group) in problem.neg_groups.iter().enumerate() {
        for &i in group {
            group_of[i] = g;
            group_sum[g] += alphas[i];
        }
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let interior = if problem.labels[i] == 1.0 {
            alphas[i] > BOUND_SLACK * problem.c_pos && alphas[i] < problem.c_pos * (1.0 - BOUND_SLACK)
        } else {
            alphas[i] > BOUND_SLACK * problem.c_neg
                && group_sum[group_of[i]] < problem.c_neg * (1.0 - BOUND_SLACK)
        };
        if interior {
            total += problem.labels[i] - raw_score(problem, alphas, i);
            count += 1;
        }
    }
    if count > 0 {
        return (total / count as f64, false);
    }

    let mut max_neg = f64::NEG_INFINITY;
    let mut min_pos = f64::INFINITY;
    for i in 0..n {
        let g = raw_score(problem, alphas, i);
        if problem.labels[i] == 1.0 {
            min_pos = min_pos.min(g);
        } else {
            max_neg = max_neg.max(g);
        }
    }
    (-(max_neg + min_pos) / 2.0, true)
}

/// Decision score of an out-of-sample point given its kernel row against the
/// effective instances.
pub fn score_from_kernel_row(alphas: &DVector<f64>, labels: &[f64], kernel_row: &[f64], bias: f64) -> f64 {
    alphas
        .iter()
        .zip(labels)
        .zip(kernel_row)
        .map(|((&a, &y), &k)| a * y * k)
        .sum::<f64>()
        + bias
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn pair_problem(gram: &DMatrix<f64>, c: f64) -> DualProblem<'_> {
        DualProblem {
            gram,
            labels: vec![1.0, -1.0],
            neg_groups: vec![vec![1]],
            c_pos: c,
            c_neg: c,
        }
    }

    #[test]
    fn separable_pair_recovers_unit_margin() {
        // Points +1 and −1 with a linear kernel and a loose cost: both
        // coefficients settle at 0.5, the objective at 0.5, the bias at 0.
        let gram = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let sol = solve_dual(&pair_problem(&gram, 10.0), 1e-9).unwrap();
        assert!((sol.alphas[0] - 0.5).abs() < 1e-7);
        assert!((sol.alphas[1] - 0.5).abs() < 1e-7);
        assert!((sol.objective - 0.5).abs() < 1e-8);
        assert!(sol.bias.abs() < 1e-6);
        assert!(!sol.bias_fallback);
        assert!(sol.kkt_residual <= 1e-9);
    }

    #[test]
    fn bound_constrained_pair_uses_midpoint_bias() {
        // Same pair with C = 0.1: both coefficients hit the bound, the
        // objective is 0.2 − ½·(0.2)² = 0.18 and the bias falls back to the
        // midpoint rule, which lands at 0 by symmetry.
        let gram = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let sol = solve_dual(&pair_problem(&gram, 0.1), 1e-9).unwrap();
        assert!((sol.alphas[0] - 0.1).abs() < 1e-7);
        assert!((sol.alphas[1] - 0.1).abs() < 1e-7);
        assert!((sol.objective - 0.18).abs() < 1e-8);
        assert!(sol.bias_fallback);
        assert!(sol.bias.abs() < 1e-6);
    }

    #[test]
    fn asymmetric_pair_shifts_bias() {
        // Points 2 (positive) and 0 (negative), linear kernel: the separating
        // threshold sits at 1, so the bias is −1.
        let gram = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]);
        let sol = solve_dual(&pair_problem(&gram, 10.0), 1e-9).unwrap();
        assert!((sol.bias - (-1.0)).abs() < 1e-6);
        let row = [2.0 * 1.5, 0.0]; // linear kernel of x = 1.5 against (2, 0)
        let s = score_from_kernel_row(&sol.alphas, &[1.0, -1.0], &row, sol.bias);
        assert!((s - 0.5).abs() < 1e-6);
    }

    #[test]
    fn shared_budget_concentrates_on_best_negative() {
        // One negative bag with two instances (points 0 and −0.5) against a
        // positive singleton at 1. The bag budget flows entirely to the
        // instance closer to the boundary; the optimum is α = (1, 0, 1) with
        // objective 1.5 and a fallback bias of −0.5.
        let pts = [0.0, -0.5, 1.0];
        let gram = DMatrix::from_fn(3, 3, |i, j| pts[i] * pts[j]);
        let problem = DualProblem {
            gram: &gram,
            labels: vec![-1.0, -1.0, 1.0],
            neg_groups: vec![vec![0, 1]],
            c_pos: 1.0,
            c_neg: 1.0,
        };
        let sol = solve_dual(&problem, 1e-9).unwrap();
        assert!((sol.alphas[0] - 1.0).abs() < 1e-6);
        assert!(sol.alphas[1].abs() < 1e-6);
        assert!((sol.alphas[2] - 1.0).abs() < 1e-6);
        assert!((sol.objective - 1.5).abs() < 1e-7);
        assert!(sol.bias_fallback);
        assert!((sol.bias - (-0.5)).abs() < 1e-6);
    }

    /// Brute-force oracle for the three-instance shared-budget problem:
    /// searches (α₀, α₁) on a refining grid with α₂ tied by the balance row.
    fn grid_oracle_shared_budget(gram: &DMatrix<f64>, c: f64) -> f64 {
        let labels = [-1.0, -1.0, 1.0];
        let objective = |a: [f64; 3]| -> f64 {
            let mut quad = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    quad += a[i] * a[j] * labels[i] * labels[j] * gram[(i, j)];
                }
            }
            a.iter().sum::<f64>() - 0.5 * quad
        };
        let (mut lo0, mut hi0, mut lo1, mut hi1) = (0.0f64, c, 0.0f64, c);
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for _round in 0..4 {
            let steps = 200;
            for i in 0..=steps {
                let a0 = lo0 + (hi0 - lo0) * i as f64 / steps as f64;
                for j in 0..=steps {
                    let a1 = lo1 + (hi1 - lo1) * j as f64 / steps as f64;
                    let a2 = a0 + a1;
                    if a0 + a1 > c || a2 > c {
                        continue;
                    }
                    let v = objective([a0, a1, a2]);
                    if v > best.0 {
                        best = (v, a0, a1);
                    }
                }
            }
            let w0 = (hi0 - lo0) / steps as f64 * 4.0;
            let w1 = (hi1 - lo1) / steps as f64 * 4.0;
            lo0 = (best.1 - w0).max(0.0);
            hi0 = (best.1 + w0).min(c);
            lo1 = (best.2 - w1).max(0.0);
            hi1 = (best.2 + w1).min(c);
        }
        best.0
    }

    #[test]
    fn matches_refining_grid_search() {
        let pts = [0.3, -0.7, 1.2];
        let gram = DMatrix::from_fn(3, 3, |i, j| pts[i] * pts[j] + if i == j { 0.5 } else { 0.0 });
        let problem = DualProblem {
            gram: &gram,
            labels: vec![-1.0, -1.0, 1.0],
            neg_groups: vec![vec![0, 1]],
            c_pos: 1.0,
            c_neg: 1.0,
        };
        let sol = solve_dual(&problem, 1e-9).unwrap();
        let oracle = grid_oracle_shared_budget(&gram, 1.0);
        assert!(
            (sol.objective - oracle).abs() <= 1e-4,
            "solver {} vs grid {}",
            sol.objective,
            oracle
        );
    }

    #[test]
    fn rejects_single_class() {
        let gram = DMatrix::identity(2, 2);
        let problem = DualProblem {
            gram: &gram,
            labels: vec![1.0, 1.0],
            neg_groups: vec![],
            c_pos: 1.0,
            c_neg: 1.0,
        };
        assert!(solve_dual(&problem, 1e-9).is_err());
    }

    #[test]
    fn rejects_uncovered_negative() {
        let gram = DMatrix::identity(2, 2);
        let problem = DualProblem {
            gram: &gram,
            labels: vec![1.0, -1.0],
            neg_groups: vec![],
            c_pos: 1.0,
            c_neg: 1.0,
        };
        assert!(solve_dual(&problem, 1e-9).is_err());
    }

    fn random_psd_problem(seed: u64) -> (DMatrix<f64>, Vec<f64>, Vec<Vec<usize>>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n_neg_bags = rng.gen_range(1..3usize);
        let mut labels = Vec::new();
        let mut neg_groups = Vec::new();
        for _ in 0..n_neg_bags {
            let size = rng.gen_range(1..3usize);
            let start = labels.len();
            labels.extend(std::iter::repeat(-1.0).take(size));
            neg_groups.push((start..start + size).collect());
        }
        let n_pos = rng.gen_range(1..3usize);
        labels.extend(std::iter::repeat(1.0).take(n_pos));
        let n = labels.len();
        let a = DMatrix::from_fn(n, n + 2, |_, _| rng.gen_range(-1.0..1.0));
        let gram = &a * a.transpose();
        (gram, labels, neg_groups)
    }

    #[test]
    fn objective_grows_with_cost_budget() {
        for seed in 0..6 {
            let (gram, labels, neg_groups) = random_psd_problem(seed);
            let mut prev = f64::NEG_INFINITY;
            for c in [0.1, 1.0, 10.0] {
                let problem = DualProblem {
                    gram: &gram,
                    labels: labels.clone(),
                    neg_groups: neg_groups.clone(),
                    c_pos: c,
                    c_neg: c,
                };
                let sol = solve_dual(&problem, 1e-9).unwrap();
                assert!(sol.objective >= prev - 1e-7, "seed {seed}, C {c}");
                prev = sol.objective;
            }
        }
    }

    #[test]
    fn solution_is_feasible() {
        for seed in 10..16 {
            let (gram, labels, neg_groups) = random_psd_problem(seed);
            let c = 1.0;
            let problem = DualProblem {
                gram: &gram,
                labels: labels.clone(),
                neg_groups: neg_groups.clone(),
                c_pos: c,
                c_neg: c,
            };
            let sol = solve_dual(&problem, 1e-9).unwrap();
            let balance: f64 = sol
                .alphas
                .iter()
                .zip(&labels)
                .map(|(&a, &y)| a * y)
                .sum();
            assert!(balance.abs() < 1e-7);
            for (i, &a) in sol.alphas.iter().enumerate() {
                assert!(a >= -1e-8, "α{i} = {a}");
                if labels[i] == 1.0 {
                    assert!(a <= c + 1e-8);
                }
            }
            for group in &neg_groups {
                let sum: f64 = group.iter().map(|&i| sol.alphas[i]).sum();
                assert!(sum <= c + 1e-8);
            }
        }
    }

    #[test]
    fn singleton_groups_match_plain_box_duals() {
        // When every negative bag is a singleton the shared budgets reduce to
        // per-coefficient boxes; solving with the groups or with a rebuilt
        // plain problem must agree.
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let n = 6;
        let a = DMatrix::from_fn(n, n + 2, |_, _| rng.gen_range(-1.0..1.0));
        let gram = &a * a.transpose();
        let labels: Vec<f64> = vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        let grouped = DualProblem {
            gram: &gram,
            labels: labels.clone(),
            neg_groups: vec![vec![0], vec![1], vec![2]],
            c_pos: 2.0,
            c_neg: 2.0,
        };
        let sol = solve_dual(&grouped, 1e-9).unwrap();
        // Oracle: projected gradient on the box-constrained balanced dual.
        let mut alpha = DVector::from_element(n, 0.1);
        let y = DVector::from_row_slice(&labels);
        let mut q = gram.clone();
        for i in 0..n {
            for j in 0..n {
                q[(i, j)] *= y[i] * y[j];
            }
        }
        let lip = q.norm() + 1.0;
        for _ in 0..400_000 {
            let g = &q * &alpha - DVector::from_element(n, 1.0);
            alpha -= &g / lip;
            // project onto { 0 ≤ α ≤ 2, yᵀα = 0 } by alternating projections
            for _ in 0..60 {
                let shift = alpha.dot(&y) / n as f64;
                for i in 0..n {
                    alpha[i] = (alpha[i] - shift * y[i]).clamp(0.0, 2.0);
                }
            }
        }
        let obj = alpha.sum() - 0.5 * alpha.dot(&(&q * &alpha));
        assert!(
            (sol.objective - obj).abs() < 1e-4,
            "grouped {} vs oracle {}",
            sol.objective,
            obj
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn feasible_for_random_costs(seed in 0u64..40, c_pos in 0.05f64..5.0, c_neg in 0.05f64..5.0) {
            let (gram, labels, neg_groups) = random_psd_problem(seed);
            let problem = DualProblem {
                gram: &gram,
                labels: labels.clone(),
                neg_groups: neg_groups.clone(),
                c_pos,
                c_neg,
            };
            let sol = solve_dual(&problem, 1e-9).unwrap();
            prop_assert!(sol.kkt_residual <= 1e-9);
            let balance: f64 = sol.alphas.iter().zip(&labels).map(|(&a, &y)| a * y).sum();
            prop_assert!(balance.abs() < 1e-7);
            for group in &neg_groups {
                let sum: f64 = group.iter().map(|&i| sol.alphas[i]).sum();
                prop_assert!(sum <= c_neg + 1e-7);
            }
        }
    }
}
