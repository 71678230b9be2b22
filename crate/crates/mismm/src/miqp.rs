//! Exact trainer: a mixed-integer quadratic program over a low-rank feature
//! embedding of the instances.
//!
//! Each positive-bag instance gets a binary switch that can disable its
//! margin constraint by adding a large slack `L`; at least one instance per
//! positive bag must stay enforced. Branch-and-bound explores the switches,
//! solving a convex relaxation per node with the same QP engine used by the
//! dual sub-problem solver. An exhaustive enumerator over witness choices
//! serves as an independent oracle for small problems.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DistInstance};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::nystrom::{fit_nystrom, stratified_subsample, NystromMap};
use crate::qp::{self, QpOptions, QpProblem};

/// Hard cap on the number of witness combinations the enumerator will try.
const ENUMERATION_CAP: u64 = 10_000;
/// Nodes are pruned when their bound cannot beat the incumbent by more than
/// this slack.
const PRUNE_SLACK: f64 = 1e-9;
/// Switch counts above this skip the big-L doubling check.
const BIG_L_CHECK_LIMIT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiqpStatus {
    Optimal,
    TimeLimit,
    NodeLimit,
}

impl std::fmt::Display for MiqpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MiqpStatus::Optimal => "optimal",
            MiqpStatus::TimeLimit => "time_limit",
            MiqpStatus::NodeLimit => "node_limit",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct BnbOptions {
    /// Slack added to a disabled margin constraint.
    pub big_l: f64,
    /// Distance from an integer below which a switch counts as integral.
    pub int_tol: f64,
    pub time_limit: Option<f64>,
    pub node_limit: Option<usize>,
    /// Tolerance for the per-node convex solves.
    pub qp_tol: f64,
}

impl Default for BnbOptions {
    fn default() -> Self {
        Self { big_l: 100.0, int_tol: 1e-6, time_limit: None, node_limit: None, qp_tol: 1e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct MiqpSolution {
    pub w: DVector<f64>,
    pub bias: f64,
    /// Slack variable per bag, in dataset bag order.
    pub xi: DVector<f64>,
    /// Final switch values, one per positive-bag instance (bag-major order).
    pub zeta: Vec<u8>,
    pub objective: f64,
    pub lower_bound: f64,
    /// Relative optimality gap, `(objective − lower_bound) / max(1, |objective|)`.
    pub gap: f64,
    pub status: MiqpStatus,
    /// Convex relaxations solved.
    pub nodes: usize,
}

/// Static description of the bag structure in switch coordinates.
struct Layout<'a> {
    z: &'a DMatrix<f64>,
    dataset: &'a Dataset,
    dim: usize,
    n_bags: usize,
    /// (positive-bag ordinal, dataset instance index) per switch.
    switch_instance: Vec<(usize, usize)>,
    /// Global switch indices per positive-bag ordinal.
    bag_switches: Vec<Vec<usize>>,
    /// Dataset bag index per positive-bag ordinal.
    pos_bags: Vec<usize>,
    costs: Vec<f64>,
}

impl<'a> Layout<'a> {
    fn new(dataset: &'a Dataset, z: &'a DMatrix<f64>, c_pos: f64, c_neg: f64) -> Result<Self> {
        if z.nrows() != dataset.n_instances() {
            return Err(Error::DimensionMismatch { expected: dataset.n_instances(), got: z.nrows() });
        }
        let mut switch_instance = Vec::new();
        let mut bag_switches = Vec::new();
        let mut pos_bags = Vec::new();
        let mut costs = Vec::with_capacity(dataset.n_bags());
        for (b, bag) in dataset.bags.iter().enumerate() {
            if bag.is_positive() {
                let ordinal = pos_bags.len();
                pos_bags.push(b);
                let mut switches = Vec::new();
                for &inst in &bag.instance_indices {
                    switches.push(switch_instance.len());
                    switch_instance.push((ordinal, inst));
                }
                bag_switches.push(switches);
                costs.push(c_pos);
            } else {
                costs.push(c_neg);
            }
        }
        if pos_bags.is_empty() || pos_bags.len() == dataset.n_bags() {
            return Err(Error::Data("training needs both positive and negative bags".into()));
        }
        Ok(Self {
            z,
            dataset,
            dim: z.ncols(),
            n_bags: dataset.n_bags(),
            switch_instance,
            bag_switches,
            pos_bags,
            costs,
        })
    }

    fn n_switches(&self) -> usize {
        self.switch_instance.len()
    }
}

/// Convex relaxation (or fully fixed sub-problem) for one node. Fixed
/// switches are substituted into the constraints; free switches get a column
/// and a `[0, 1]` box. Returns `None` when the node's fixed switches already
/// exhaust a bag's disable budget.
fn solve_node(
    layout: &Layout,
    fixed: &[Option<bool>],
    opts: &BnbOptions,
) -> Result<Option<(qp::QpSolution, Vec<f64>, Vec<usize>)>> {
    // Cardinality pre-check per positive bag.
    for switches in &layout.bag_switches {
        let n_disabled = switches.iter().filter(|&&g| fixed[g] == Some(true)).count();
        if n_disabled + 1 > switches.len() {
            return Ok(None);
        }
    }

    let free: Vec<usize> = (0..fixed.len()).filter(|&g| fixed[g].is_none()).collect();
    let col_of_free: std::collections::HashMap<usize, usize> =
        free.iter().enumerate().map(|(c, &g)| (g, c)).collect();
    let q_dim = layout.dim;
    let n = q_dim + 1 + layout.n_bags + free.len();
    let b_col = q_dim;
    let xi_col = |bag: usize| q_dim + 1 + bag;
    let zeta_col = |c: usize| q_dim + 1 + layout.n_bags + c;

    let mut q = DMatrix::zeros(n, n);
    for i in 0..q_dim {
        q[(i, i)] = 1.0;
    }
    let mut c = DVector::zeros(n);
    for bag in 0..layout.n_bags {
        c[xi_col(bag)] = layout.costs[bag];
    }

    // Count rows: one margin row per instance, one nonnegativity row per ξ,
    // two box rows per free switch, one cardinality row per bag with free
    // switches.
    let n_margin = layout.dataset.n_instances();
    let n_card = layout
        .bag_switches
        .iter()
        .filter(|sw| sw.iter().any(|&g| fixed[g].is_none()))
        .count();
    let m = n_margin + layout.n_bags + 2 * free.len() + n_card;
    let mut a_in = DMatrix::zeros(m, n);
    let mut b_in = DVector::zeros(m);
    let mut row = 0;

    let mut pos_ordinal = 0usize;
    for (b, bag) in layout.dataset.bags.iter().enumerate() {
        if bag.is_positive() {
            for &g in &layout.bag_switches[pos_ordinal] {
                let (_, inst) = layout.switch_instance[g];
                // −⟨w, z⟩ − b − ξ (− L·ζ) ≤ −1 (+ L when disabled)
                for d in 0..q_dim {
                    a_in[(row, d)] = -layout.z[(inst, d)];
                }
                a_in[(row, b_col)] = -1.0;
                a_in[(row, xi_col(b))] = -1.0;
                match fixed[g] {
                    None => {
                        a_in[(row, zeta_col(col_of_free[&g]))] = -opts.big_l;
                        b_in[row] = -1.0;
                    }
                    Some(true) => b_in[row] = -1.0 + opts.big_l,
                    Some(false) => b_in[row] = -1.0,
                }
                row += 1;
            }
            pos_ordinal += 1;
        } else {
            for &inst in &bag.instance_indices {
                // ⟨w, z⟩ + b − ξ ≤ −1
                for d in 0..q_dim {
                    a_in[(row, d)] = layout.z[(inst, d)];
                }
                a_in[(row, b_col)] = 1.0;
                a_in[(row, xi_col(b))] = -1.0;
                b_in[row] = -1.0;
                row += 1;
            }
        }
    }
    for bag in 0..layout.n_bags {
        a_in[(row, xi_col(bag))] = -1.0;
        row += 1;
    }
    for cidx in 0..free.len() {
        a_in[(row, zeta_col(cidx))] = -1.0;
        row += 1;
        a_in[(row, zeta_col(cidx))] = 1.0;
        b_in[row] = 1.0;
        row += 1;
    }
    for switches in &layout.bag_switches {
        let frees: Vec<usize> = switches.iter().copied().filter(|&g| fixed[g].is_none()).collect();
        if frees.is_empty() {
            continue;
        }
        let n_disabled = switches.iter().filter(|&&g| fixed[g] == Some(true)).count();
        for &g in &frees {
            a_in[(row, zeta_col(col_of_free[&g]))] = 1.0;
        }
        b_in[row] = (switches.len() - 1 - n_disabled) as f64;
        row += 1;
    }
    debug_assert_eq!(row, m);

    let problem = QpProblem {
        q,
        c,
        a_eq: DMatrix::zeros(0, n),
        b_eq: DVector::zeros(0),
        a_in,
        b_in,
    };
    let sol = qp::solve(
        &problem,
        &QpOptions { tol: opts.qp_tol, accept: opts.qp_tol.max(1e-6), ..QpOptions::default() },
    )?;
    let zeta_free: Vec<f64> = (0..free.len()).map(|c| sol.x[zeta_col(c)]).collect();
    Ok(Some((sol, zeta_free, free)))
}

fn assemble_zeta(fixed: &[Option<bool>], free: &[usize], values: &[f64]) -> Vec<f64> {
    let mut zeta: Vec<f64> = fixed
        .iter()
        .map(|f| match f {
            Some(true) => 1.0,
            Some(false) => 0.0,
            None => f64::NAN,
        })
        .collect();
    for (c, &g) in free.iter().enumerate() {
        zeta[g] = values[c];
    }
    zeta
}

struct Node {
    fixed: Vec<Option<bool>>,
    bound: f64,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on the bound: reverse the comparison.
        other.bound.total_cmp(&self.bound)
    }
}

struct Incumbent {
    objective: f64,
    w: DVector<f64>,
    bias: f64,
    xi: DVector<f64>,
    zeta: Vec<u8>,
}

/// Record a solved, fully fixed assignment as the incumbent when it improves
/// on the current one.
fn update_incumbent(
    layout: &Layout,
    fixed: &[Option<bool>],
    sol: &qp::QpSolution,
    incumbent: &mut Option<Incumbent>,
) {
    let better = incumbent.as_ref().map_or(true, |inc| sol.objective < inc.objective);
    if better {
        let q_dim = layout.dim;
        *incumbent = Some(Incumbent {
            objective: sol.objective,
            w: sol.x.rows(0, q_dim).into_owned(),
            bias: sol.x[q_dim],
            xi: sol.x.rows(q_dim + 1, layout.n_bags).into_owned(),
            zeta: fixed.iter().map(|f| u8::from(*f == Some(true))).collect(),
        });
    }
}

/// Solve a fully fixed switch assignment exactly and, when it beats the
/// incumbent, replace it.
fn try_incumbent(
    layout: &Layout,
    fixed: &[Option<bool>],
    opts: &BnbOptions,
    incumbent: &mut Option<Incumbent>,
    nodes: &mut usize,
) -> Result<()> {
    let Some((sol, _, _)) = solve_node(layout, fixed, opts)? else {
        return Ok(());
    };
    *nodes += 1;
    update_incumbent(layout, fixed, &sol, incumbent);
    Ok(())
}

/// After disabling switch `g`, pin the bag's remaining free switches to
/// enforced when the bag's disable budget is spent. This keeps every
/// cardinality row of a node strictly satisfiable, which the interior-point
/// solver needs.
fn propagate_budget(layout: &Layout, fixed: &mut [Option<bool>], g: usize) {
    let (ordinal, _) = layout.switch_instance[g];
    let switches = &layout.bag_switches[ordinal];
    let n_disabled = switches.iter().filter(|&&s| fixed[s] == Some(true)).count();
    if n_disabled + 1 == switches.len() {
        for &s in switches {
            if fixed[s].is_none() {
                fixed[s] = Some(false);
            }
        }
    }
}

/// Round a relaxed solution to a full switch assignment: per positive bag,
/// keep the best-scoring instance enforced and disable the rest.
fn rounded_assignment(layout: &Layout, sol: &qp::QpSolution) -> Vec<Option<bool>> {
    let q_dim = layout.dim;
    let w = sol.x.rows(0, q_dim);
    let bias = sol.x[q_dim];
    let mut fixed = vec![Some(true); layout.n_switches()];
    for switches in &layout.bag_switches {
        let mut best = (f64::NEG_INFINITY, switches[0]);
        for &g in switches {
            let (_, inst) = layout.switch_instance[g];
            let score = layout.z.row(inst).transpose().rows(0, q_dim).dot(&w) + bias;
            if score > best.0 {
                best = (score, g);
            }
        }
        fixed[best.1] = Some(false);
    }
    fixed
}

/// Branch-and-bound over the disable switches. Every node solves a convex
/// relaxation; integral nodes are re-solved with the switches fixed exactly
/// before they may become the incumbent.
pub fn branch_and_bound(
    dataset: &Dataset,
    z: &DMatrix<f64>,
    c_pos: f64,
    c_neg: f64,
    opts: &BnbOptions,
) -> Result<MiqpSolution> {
    if c_pos <= 0.0 || c_neg <= 0.0 {
        return Err(Error::InvalidParameter("cost bounds must be positive".into()));
    }
    if opts.big_l <= 0.0 {
        return Err(Error::InvalidParameter("the disable slack must be positive".into()));
    }
    let layout = Layout::new(dataset, z, c_pos, c_neg)?;
    let start = Instant::now();
    let mut nodes = 0usize;

    // Root: singleton positive bags have no real choice; pin their switch.
    let mut root_fixed = vec![None; layout.n_switches()];
    for switches in &layout.bag_switches {
        if switches.len() == 1 {
            root_fixed[switches[0]] = Some(false);
        }
    }

    let Some((root_sol, root_zeta, root_free)) = solve_node(&layout, &root_fixed, opts)? else {
        return Err(Error::Data("no feasible switch assignment exists".into()));
    };
    nodes += 1;
    let root_bound = root_sol.objective;

    let mut incumbent: Option<Incumbent> = None;
    if root_free.is_empty() {
        // No switch is actually free (all positive bags are singletons): the
        // root relaxation is already exact.
        update_incumbent(&layout, &root_fixed, &root_sol, &mut incumbent);
    } else {
        try_incumbent(&layout, &rounded_assignment(&layout, &root_sol), opts, &mut incumbent, &mut nodes)?;
    }

    let mut heap = BinaryHeap::new();
    heap.push(Node { fixed: root_fixed.clone(), bound: root_bound });
    // Cache the root relaxation so the first pop does not re-solve it.
    let mut cached_root = Some((root_sol, root_zeta, root_free));

    let mut status = MiqpStatus::Optimal;
    while let Some(node) = heap.pop() {
        let inc_obj = incumbent.as_ref().map_or(f64::INFINITY, |i| i.objective);
        if node.bound >= inc_obj - PRUNE_SLACK {
            continue; // bound can no longer improve on the incumbent
        }
        if let Some(limit) = opts.time_limit {
            if start.elapsed().as_secs_f64() > limit {
                status = MiqpStatus::TimeLimit;
                heap.push(node);
                break;
            }
        }
        if let Some(limit) = opts.node_limit {
            if nodes >= limit {
                status = MiqpStatus::NodeLimit;
                heap.push(node);
                break;
            }
        }

        let solved = match cached_root.take() {
            Some(cached) => Some(cached),
            None => {
                let res = solve_node(&layout, &node.fixed, opts)?;
                if res.is_some() {
                    nodes += 1;
                }
                res
            }
        };
        let Some((sol, zeta_free, free)) = solved else {
            continue; // fixed switches exhausted a bag's budget
        };
        if sol.objective >= inc_obj - PRUNE_SLACK {
            continue;
        }

        // Most fractional free switch.
        let mut branch: Option<(usize, f64)> = None;
        for (c, &g) in free.iter().enumerate() {
            let frac = zeta_free[c].min(1.0 - zeta_free[c]);
            if frac > opts.int_tol && branch.map_or(true, |(_, bf)| frac > bf) {
                branch = Some((g, frac));
            }
        }

        match branch {
            None if free.is_empty() => {
                // Fully fixed node: its relaxation is already the exact value.
                update_incumbent(&layout, &node.fixed, &sol, &mut incumbent);
            }
            None => {
                // Integral within tolerance: re-solve with the rounding fixed
                // exactly so the incumbent is a true feasible point.
                let zeta = assemble_zeta(&node.fixed, &free, &zeta_free);
                let fixed: Vec<Option<bool>> = zeta.iter().map(|&v| Some(v > 0.5)).collect();
                try_incumbent(&layout, &fixed, opts, &mut incumbent, &mut nodes)?;
            }
            Some((g, _)) => {
                for value in [false, true] {
                    let mut fixed = node.fixed.clone();
                    fixed[g] = Some(value);
                    if value {
                        propagate_budget(&layout, &mut fixed, g);
                    }
                    heap.push(Node { fixed, bound: sol.objective });
                }
            }
        }
    }

    let incumbent = incumbent.ok_or_else(|| {
        Error::NoConvergence("branch-and-bound finished without any feasible assignment".into())
    })?;
    let lower_bound = if status == MiqpStatus::Optimal {
        incumbent.objective
    } else {
        heap.iter()
            .map(|n| n.bound)
            .fold(incumbent.objective, f64::min)
    };
    let gap = if status == MiqpStatus::Optimal {
        0.0
    } else {
        ((incumbent.objective - lower_bound) / incumbent.objective.abs().max(1.0)).max(0.0)
    };
    Ok(MiqpSolution {
        w: incumbent.w,
        bias: incumbent.bias,
        xi: incumbent.xi,
        zeta: incumbent.zeta,
        objective: incumbent.objective,
        lower_bound,
        gap,
        status,
        nodes,
    })
}

#[derive(Debug, Clone)]
pub struct MiqpConfig {
    pub kernel: KernelSpec,
    pub c_pos: f64,
    pub c_neg: f64,
    /// Anchor budget for the feature map; capped by the pooled sample count.
    pub anchors: usize,
    /// Rank of the feature map; defaults to the anchor count.
    pub rank: Option<usize>,
    pub big_l: f64,
    pub time_limit: Option<f64>,
    pub node_limit: Option<usize>,
    pub seed: u64,
    /// Re-solve with a doubled slack after an optimal finish to confirm the
    /// slack did not clip the solution.
    pub check_big_l: bool,
}

impl MiqpConfig {
    pub fn new(c: f64, kernel: KernelSpec) -> Self {
        Self {
            kernel,
            c_pos: c,
            c_neg: c,
            anchors: 240,
            rank: None,
            big_l: 100.0,
            time_limit: None,
            node_limit: None,
            seed: 0,
            check_big_l: true,
        }
    }
}

/// A trained linear classifier in the feature-map space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimalModel {
    pub map: NystromMap,
    pub w: DVector<f64>,
    pub bias: f64,
    pub objective: f64,
    pub lower_bound: f64,
    pub gap: f64,
    pub status: MiqpStatus,
    pub nodes: usize,
    pub big_l: f64,
}

impl PrimalModel {
    pub fn score_instance(&self, instance: &DistInstance) -> Result<f64> {
        let zvec = self.map.embed_samples(&instance.samples)?;
        Ok(self.w.dot(&zvec) + self.bias)
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

/// Fit the exact trainer end to end: subsample anchors, build the feature
/// map, embed every instance, and run branch-and-bound.
pub fn fit_miqp(dataset: &Dataset, config: &MiqpConfig) -> Result<PrimalModel> {
    dataset.validate()?;
    let total = dataset.total_samples();
    let m2 = config.anchors.min(total);
    if m2 == 0 {
        return Err(Error::NoSamples);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let anchors = stratified_subsample(dataset, m2, &mut rng)?;
    let rank = config.rank.unwrap_or(m2).min(m2);
    let map = fit_nystrom(anchors, &config.kernel, rank)?;
    let z = map.embed_dataset(dataset)?;

    let opts = BnbOptions {
        big_l: config.big_l,
        time_limit: config.time_limit,
        node_limit: config.node_limit,
        ..BnbOptions::default()
    };
    let mut sol = branch_and_bound(dataset, &z, config.c_pos, config.c_neg, &opts)?;

    let n_switches: usize = dataset
        .bags
        .iter()
        .filter(|b| b.is_positive())
        .map(|b| b.instance_indices.len())
        .sum();
    if config.check_big_l && sol.status == MiqpStatus::Optimal && n_switches <= BIG_L_CHECK_LIMIT {
        let doubled = BnbOptions { big_l: 2.0 * config.big_l, ..opts };
        let sol2 = branch_and_bound(dataset, &z, config.c_pos, config.c_neg, &doubled)?;
        if (sol2.objective - sol.objective).abs() > 1e-6 {
            warn!(
                "disable slack {} looks too small: doubling it moved the objective from {:.8} to {:.8}",
                config.big_l, sol.objective, sol2.objective
            );
            sol = sol2;
        }
    }

    Ok(PrimalModel {
        map,
        w: sol.w,
        bias: sol.bias,
        objective: sol.objective,
        lower_bound: sol.lower_bound,
        gap: sol.gap,
        status: sol.status,
        nodes: sol.nodes,
        big_l: config.big_l,
    })
}

#[derive(Debug, Clone)]
pub struct Enumeration {
    pub objective: f64,
    /// Chosen witness (dataset instance index) per positive bag.
    pub selector: Vec<usize>,
    pub w: DVector<f64>,
    pub bias: f64,
}

/// Convex problem for one fixed witness choice: only the chosen instance's
/// margin constraint is kept per positive bag, sibling constraints are
/// dropped outright (no disable slack involved).
fn solve_for_selector(
    layout: &Layout,
    witnesses: &[usize],
    qp_tol: f64,
) -> Result<qp::QpSolution> {
    let q_dim = layout.dim;
    let n = q_dim + 1 + layout.n_bags;
    let b_col = q_dim;
    let xi_col = |bag: usize| q_dim + 1 + bag;

    let mut q = DMatrix::zeros(n, n);
    for i in 0..q_dim {
        q[(i, i)] = 1.0;
    }
    let mut c = DVector::zeros(n);
    for bag in 0..layout.n_bags {
        c[xi_col(bag)] = layout.costs[bag];
    }

    let n_neg_rows: usize = layout
        .dataset
        .bags
        .iter()
        .filter(|b| !b.is_positive())
        .map(|b| b.instance_indices.len())
        .sum();
    let m = n_neg_rows + layout.pos_bags.len() + layout.n_bags;
    let mut a_in = DMatrix::zeros(m, n);
    let mut b_in = DVector::zeros(m);
    let mut row = 0;
    let mut pos_ordinal = 0usize;
    for (b, bag) in layout.dataset.bags.iter().enumerate() {
        if bag.is_positive() {
            let inst = witnesses[pos_ordinal];
            for d in 0..q_dim {
                a_in[(row, d)] = -layout.z[(inst, d)];
            }
            a_in[(row, b_col)] = -1.0;
            a_in[(row, xi_col(b))] = -1.0;
            b_in[row] = -1.0;
            row += 1;
            pos_ordinal += 1;
        } else {
            for &inst in &bag.instance_indices {
                for d in 0..q_dim {
                    a_in[(row, d)] = layout.z[(inst, d)];
                }
                a_in[(row, b_col)] = 1.0;
                a_in[(row, xi_col(b))] = -1.0;
                b_in[row] = -1.0;
                row += 1;
            }
        }
    }
    for bag in 0..layout.n_bags {
        a_in[(row, xi_col(bag))] = -1.0;
        row += 1;
    }
    debug_assert_eq!(row, m);

    let problem = QpProblem {
        q,
        c,
        a_eq: DMatrix::zeros(0, n),
        b_eq: DVector::zeros(0),
        a_in,
        b_in,
    };
    qp::solve(&problem, &QpOptions { tol: qp_tol, accept: qp_tol.max(1e-6), ..QpOptions::default() })
}

/// Exhaustively try every witness combination, solving the convex problem
/// that enforces only the chosen instance per positive bag, and return the
/// best. Guarded by a hard cap on the number of combinations.
pub fn enumerate_selectors(
    dataset: &Dataset,
    z: &DMatrix<f64>,
    c_pos: f64,
    c_neg: f64,
) -> Result<Enumeration> {
    let layout = Layout::new(dataset, z, c_pos, c_neg)?;
    let mut combos: u64 = 1;
    for switches in &layout.bag_switches {
        combos = combos.saturating_mul(switches.len() as u64);
        if combos > ENUMERATION_CAP {
            return Err(Error::TooManySelectors(combos));
        }
    }

    let n_pos = layout.bag_switches.len();
    let mut choice = vec![0usize; n_pos];
    let mut best: Option<Enumeration> = None;
    loop {
        let witnesses: Vec<usize> = (0..n_pos)
            .map(|ordinal| {
                let g = layout.bag_switches[ordinal][choice[ordinal]];
                layout.switch_instance[g].1
            })
            .collect();
        let sol = solve_for_selector(&layout, &witnesses, 1e-9)?;
        if best.as_ref().map_or(true, |b| sol.objective < b.objective) {
            best = Some(Enumeration {
                objective: sol.objective,
                selector: witnesses,
                w: sol.x.rows(0, layout.dim).into_owned(),
                bias: sol.x[layout.dim],
            });
        }

        // Odometer increment over the cartesian product.
        let mut pos = 0;
        loop {
            if pos == n_pos {
                return Ok(best.expect("at least one combination was solved"));
            }
            choice[pos] += 1;
            if choice[pos] < layout.bag_switches[pos].len() {
                break;
            }
            choice[pos] = 0;
            pos += 1;
        }
    }
}
