//! Evaluation and experiment machinery: ranking quality, class-balance cost
//! weighting, hyper-parameter grids with nested cross-validation, and a
//! benchmark driver that streams one CSV row per (scenario, method,
//! replicate) cell as soon as it finishes.

use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::data::{apply_log_transform, apply_scaler, fit_scaler, load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::model::{fit, FitOptions, Method, Preprocess, TrainedModel};
use crate::simulate::{generate, Scenario, SimConfig};

/// Cost values searched by default.
pub const DEFAULT_C_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
/// Multipliers applied to the median pairwise squared distance to form the
/// default squared-bandwidth grid.
pub const DEFAULT_SIGMA_SQ_MULTIPLIERS: [f64; 3] = [0.25, 1.0, 4.0];

/// Area under the ROC curve by the rank statistic, with tied scores counted
/// as half. Labels are ±1; both classes must be present and scores finite.
pub fn auroc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: scores.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("ranking quality needs both classes".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score {bad}")));
    }
    if labels.iter().any(|&l| l != 1 && l != -1) {
        return Err(Error::Data("labels must be ±1".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average ranks over runs of tied scores (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Cost multipliers balancing positive bags against negative instances: the
/// positive multiplier is `(p + n) / 2p`, the negative `(p + n) / 2n`, where
/// `p` counts positive bags and `n` negative instances. Both sides then
/// carry the same total budget.
pub fn weighted_costs(n_pos_bags: usize, n_neg_instances: usize) -> Result<(f64, f64)> {
    if n_pos_bags == 0 || n_neg_instances == 0 {
        return Err(Error::Data("cost weighting needs both classes".into()));
    }
    let total = (n_pos_bags + n_neg_instances) as f64;
    Ok((total / (2.0 * n_pos_bags as f64), total / (2.0 * n_neg_instances as f64)))
}

/// Class-balance multipliers computed from a dataset's composition.
pub fn dataset_cost_weights(ds: &Dataset) -> Result<(f64, f64)> {
    let n_pos_bags = ds.bags.iter().filter(|b| b.is_positive()).count();
    let n_neg_instances: usize = ds
        .bags
        .iter()
        .filter(|b| !b.is_positive())
        .map(|b| b.instance_indices.len())
        .sum();
    weighted_costs(n_pos_bags, n_neg_instances)
}

/// Median squared Euclidean distance between instance mean vectors.
pub fn median_squared_distance(ds: &Dataset) -> Result<f64> {
    let n = ds.n_instances();
    if n < 2 {
        return Err(Error::Data("bandwidth heuristic needs at least 2 instances".into()));
    }
    let means: Vec<Vec<f64>> = ds.instances.iter().map(|i| i.mean_vector()).collect();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2);
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 { dists[m / 2] } else { (dists[m / 2 - 1] + dists[m / 2]) / 2.0 };
    if median <= 0.0 {
        return Err(Error::Numerical(
            "median pairwise distance is zero; the bandwidth heuristic is undefined".into(),
        ));
    }
    Ok(median)
}

/// Default bandwidth grid: σ = sqrt(multiplier · median squared distance).
pub fn default_sigma_grid(ds: &Dataset) -> Result<Vec<f64>> {
    let median = median_squared_distance(ds)?;
    Ok(DEFAULT_SIGMA_SQ_MULTIPLIERS.iter().map(|m| (m * median).sqrt()).collect())
}

/// Bandwidth grid in the representation the method actually sees: summary
/// methods measure distances between standardised summary vectors, the rest
/// between instance means.
pub fn sigma_grid_for_method(ds: &Dataset, method: &Method) -> Result<Vec<f64>> {
    match method.uses_summaries() {
        None => default_sigma_grid(ds),
        Some(spec) => {
            let summarized = baselines::summarize_dataset(ds, spec)?;
            let scaler = fit_scaler(&summarized, true)?;
            let scaled = apply_scaler(&summarized, &scaler)?;
            default_sigma_grid(&scaled)
        }
    }
}

/// Fold assignment per bag, stratified by bag label. The effective fold
/// count shrinks to the smaller class when needed and class counts per fold
/// differ by at most one.
#[derive(Debug, Clone)]
pub struct Folds {
    pub assignment: Vec<usize>,
    pub k: usize,
}

pub fn stratified_folds(labels: &[i8], k: usize, seed: u64) -> Result<Folds> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    let k_eff = k.min(pos.len()).min(neg.len());
    if k_eff < 2 {
        return Err(Error::Data(format!(
            "cannot build {k} folds from {} positive and {} negative bags",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; labels.len()];
    for class in [pos, neg] {
        let mut shuffled = class;
        shuffled.shuffle(&mut rng);
        for (i, &bag) in shuffled.iter().enumerate() {
            assignment[bag] = i % k_eff;
        }
    }
    Ok(Folds { assignment, k: k_eff })
}

/// Deterministic seed derivation for nested experiment loops.
pub(crate) fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z ^= p.wrapping_mul(0xFF51_AFD7_ED55_8CCD).wrapping_add(0x2545_F491_4F6C_DD1D);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Hyper-parameter grid and inner-CV settings.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub c_grid: Vec<f64>,
    /// Bandwidths to try; empty means a linear kernel.
    pub sigma_grid: Vec<f64>,
    pub inner_k: usize,
    /// Scale the cost bounds by the class-balance multipliers.
    pub weighted: bool,
}

impl GridSpec {
    pub fn new(c_grid: Vec<f64>, sigma_grid: Vec<f64>) -> Self {
        Self { c_grid, sigma_grid, inner_k: 5, weighted: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridChoice {
    pub c: f64,
    pub sigma: Option<f64>,
    /// Mean ranking quality over the inner folds at the chosen cell.
    pub inner_auroc: f64,
}

fn kernel_for(sigma: Option<f64>) -> Result<KernelSpec> {
    match sigma {
        Some(s) => KernelSpec::gaussian(s),
        None => Ok(KernelSpec::Linear),
    }
}

fn options_for(
    template: &FitOptions,
    ds: &Dataset,
    c: f64,
    sigma: Option<f64>,
    weighted: bool,
    seed: u64,
) -> Result<FitOptions> {
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(format!("cost bound must be positive, got {c}")));
    }
    let (w_pos, w_neg) = if weighted { dataset_cost_weights(ds)? } else { (1.0, 1.0) };
    let mut opts = template.clone();
    opts.kernel = kernel_for(sigma)?;
    opts.c_pos = c * w_pos;
    opts.c_neg = c * w_neg;
    opts.seed = seed;
    Ok(opts)
}

/// Pick (C, σ) by stratified inner cross-validation on `train`, then refit on
/// all of it. Ties prefer the smallest C, then the smallest σ. Cells whose
/// fit fails are skipped with a warning; every cell failing is an error.
pub fn grid_search_fit(
    train: &Dataset,
    method: &Method,
    template: &FitOptions,
    grid: &GridSpec,
    seed: u64,
) -> Result<(TrainedModel, GridChoice)> {
    if grid.c_grid.is_empty() {
        return Err(Error::InvalidParameter("empty cost grid".into()));
    }
    let labels: Vec<i8> = train.bags.iter().map(|b| b.label).collect();
    let mut c_grid = grid.c_grid.clone();
    c_grid.sort_by(f64::total_cmp);
    c_grid.dedup();
    let sigma_grid: Vec<Option<f64>> = if grid.sigma_grid.is_empty() {
        vec![None]
    } else {
        let mut s = grid.sigma_grid.clone();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s.into_iter().map(Some).collect()
    };

    let single_cell = c_grid.len() == 1 && sigma_grid.len() == 1;
    let mut best: Option<GridChoice> = None;
    if single_cell {
        // Nothing to select; skip the inner solves entirely.
        best = Some(GridChoice { c: c_grid[0], sigma: sigma_grid[0], inner_auroc: f64::NAN });
    } else {
        let folds = stratified_folds(&labels, grid.inner_k, mix_seed(seed, &[0]))?;
        let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds.k)
            .map(|f| {
                let train_idx: Vec<usize> =
                    (0..labels.len()).filter(|&b| folds.assignment[b] != f).collect();
                let val_idx: Vec<usize> =
                    (0..labels.len()).filter(|&b| folds.assignment[b] == f).collect();
                (train_idx, val_idx)
            })
            .collect();

        // Every (cell, fold) solve is independent; seeds are fixed up front,
        // so the parallel evaluation stays deterministic.
        let mut tasks = Vec::new();
        for ci in 0..c_grid.len() {
            for si in 0..sigma_grid.len() {
                for f in 0..splits.len() {
                    tasks.push((ci, si, f));
                }
            }
        }
        let outcomes: Vec<((usize, usize), Result<f64>)> = tasks
            .par_iter()
            .map(|&(ci, si, f)| {
                let (train_idx, val_idx) = &splits[f];
                let quality = (|| {
                    let sub_train = train.subset_bags(train_idx);
                    let sub_val = train.subset_bags(val_idx);
                    let cell_seed = mix_seed(seed, &[1, ci as u64, si as u64, f as u64]);
                    let opts = options_for(
                        template,
                        &sub_train,
                        c_grid[ci],
                        sigma_grid[si],
                        grid.weighted,
                        cell_seed,
                    )?;
                    let scores = fit(&sub_train, method, &opts)?.score_bags(&sub_val)?;
                    let val_labels: Vec<i8> = sub_val.bags.iter().map(|b| b.label).collect();
                    auroc(&scores, &val_labels)
                })();
                ((ci, si), quality)
            })
            .collect();

        // Aggregate in (C asc, σ asc) order so exact ties keep the smallest.
        for (ci, &c) in c_grid.iter().enumerate() {
            for (si, &sigma) in sigma_grid.iter().enumerate() {
                let mut fold_scores = Vec::with_capacity(splits.len());
                let mut failed = false;
                for ((cell, quality), &(_, _, f)) in outcomes.iter().zip(&tasks) {
                    if *cell != (ci, si) {
                        continue;
                    }
                    match quality {
                        Ok(v) => fold_scores.push(*v),
                        Err(e) => {
                            warn!("grid cell (C = {c}, sigma = {sigma:?}) fold {f} failed: {e}");
                            failed = true;
                        }
                    }
                }
                if failed || fold_scores.is_empty() {
                    continue;
                }
                let mean = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
                if best.as_ref().map_or(true, |b| mean > b.inner_auroc) {
                    best = Some(GridChoice { c, sigma, inner_auroc: mean });
                }
            }
        }
    }

    let choice = best.ok_or_else(|| {
        Error::NoConvergence("every grid cell failed during inner cross-validation".into())
    })?;
    let final_seed = mix_seed(seed, &[2]);
    let opts = options_for(template, train, choice.c, choice.sigma, grid.weighted, final_seed)?;
    let model = fit(train, method, &opts)?;
    Ok((model, choice))
}

/// One line of the benchmark report.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub scenario: String,
    pub n_bags: usize,
    pub n_inst: usize,
    pub n_samp: usize,
    pub method: String,
    pub replicate: usize,
    pub auroc: f64,
    pub wall_time_s: f64,
    pub chosen_c: f64,
    pub chosen_sigma: Option<f64>,
    pub gap: Option<f64>,
}

pub const REPORT_HEADER: [&str; 11] = [
    "scenario",
    "n_bags",
    "n_inst",
    "n_samp",
    "method",
    "replicate",
    "auroc",
    "wall_time_s",
    "chosen_C",
    "chosen_sigma",
    "gap",
];

fn write_row<W: Write>(w: &mut csv::Writer<W>, row: &ReportRow) -> Result<()> {
    w.write_record([
        row.scenario.clone(),
        row.n_bags.to_string(),
        row.n_inst.to_string(),
        row.n_samp.to_string(),
        row.method.clone(),
        row.replicate.to_string(),
        format!("{:.6}", row.auroc),
        format!("{:.3}", row.wall_time_s),
        if row.chosen_c.is_nan() { String::new() } else { format!("{}", row.chosen_c) },
        row.chosen_sigma.map_or(String::new(), |s| format!("{s}")),
        row.gap.map_or(String::new(), |g| format!("{g:.6}")),
    ])?;
    w.flush()?;
    Ok(())
}

/// One training-set size to simulate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SizeSpec {
    pub n_bags: usize,
    pub instances_per_bag: usize,
    pub samples_per_instance: usize,
}

/// Experiment layout: fresh simulated train/test pairs, or repeated
/// cross-validation of one fixed dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchmarkMode {
    Simulation {
        scenarios: Vec<String>,
        sizes: Vec<SizeSpec>,
        replicates: usize,
        test_bags: Option<usize>,
        p_pos: Option<f64>,
    },
    CrossValidation {
        data: String,
        folds: Option<usize>,
        replications: Option<usize>,
        log_columns: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub methods: Vec<String>,
    pub mode: BenchmarkMode,
    pub c_grid: Option<Vec<f64>>,
    /// Bandwidths σ; when absent the per-method median heuristic applies.
    pub sigma_grid: Option<Vec<f64>>,
    /// `"gaussian"` (default) or `"linear"`.
    pub kernel: Option<String>,
    pub inner_k: Option<usize>,
    pub weighted: Option<bool>,
    pub standardize: Option<bool>,
    pub seed: Option<u64>,
    pub restarts: Option<usize>,
    pub miqp_anchors: Option<usize>,
    pub miqp_time_limit: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub scenario: String,
    pub method: String,
    pub mean_auroc: f64,
    pub sd_auroc: f64,
    pub mean_rank: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub rows: Vec<ReportRow>,
    pub cells: Vec<CellSummary>,
}

/// Ranks of `values` with 1 for the largest; tied values share the average
/// of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

struct ResolvedConfig {
    methods: Vec<Method>,
    c_grid: Vec<f64>,
    sigma_grid: Option<Vec<f64>>,
    gaussian: bool,
    inner_k: usize,
    weighted: bool,
    standardize: Option<bool>,
    seed: u64,
    template: FitOptions,
}

fn resolve(config: &BenchmarkConfig) -> Result<ResolvedConfig> {
    if config.methods.is_empty() {
        return Err(Error::InvalidParameter("no methods requested".into()));
    }
    let methods = config
        .methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<Vec<_>>>()?;
    let gaussian = match config.kernel.as_deref() {
        None | Some("gaussian") => true,
        Some("linear") => false,
        Some(other) => {
            return Err(Error::InvalidParameter(format!(
                "unknown kernel '{other}' (expected gaussian or linear)"
            )))
        }
    };
    let mut template = FitOptions::new(1.0, KernelSpec::Linear);
    template.restarts = config.restarts.unwrap_or(1);
    template.miqp_anchors = config.miqp_anchors.unwrap_or(240);
    // Inside benchmarks the exact trainer always runs under a time budget,
    // so a single slow cell cannot stall the whole matrix.
    template.miqp_time_limit = Some(config.miqp_time_limit.unwrap_or(60.0));
    Ok(ResolvedConfig {
        methods,
        c_grid: config.c_grid.clone().unwrap_or_else(|| DEFAULT_C_GRID.to_vec()),
        sigma_grid: config.sigma_grid.clone(),
        gaussian,
        inner_k: config.inner_k.unwrap_or(5),
        weighted: config.weighted.unwrap_or(true),
        standardize: config.standardize,
        seed: config.seed.unwrap_or(0),
        template,
    })
}

fn grid_for(resolved: &ResolvedConfig, train: &Dataset, method: &Method) -> Result<GridSpec> {
    let sigma_grid = if !resolved.gaussian {
        Vec::new()
    } else if let Some(explicit) = &resolved.sigma_grid {
        explicit.clone()
    } else {
        sigma_grid_for_method(train, method)?
    };
    Ok(GridSpec {
        c_grid: resolved.c_grid.clone(),
        sigma_grid,
        inner_k: resolved.inner_k,
        weighted: resolved.weighted,
    })
}

/// Run the configured benchmark, streaming finished rows to `out` (header
/// first, one flush per row so partial output stays a valid CSV).
pub fn run_benchmark<W: Write>(config: &BenchmarkConfig, out: W) -> Result<BenchmarkReport> {
    let resolved = resolve(config)?;
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(REPORT_HEADER)?;
    writer.flush()?;

    let mut rows = Vec::new();
    match &config.mode {
        BenchmarkMode::Simulation { scenarios, sizes, replicates, test_bags, p_pos } => {
            if sizes.is_empty() {
                return Err(Error::InvalidParameter("no sizes requested".into()));
            }
            let scenarios = scenarios
                .iter()
                .map(|s| Scenario::parse(s))
                .collect::<Result<Vec<_>>>()?;
            let standardize = resolved.standardize.unwrap_or(false);
            for (s_idx, &scenario) in scenarios.iter().enumerate() {
                for (z_idx, size) in sizes.iter().enumerate() {
                    for rep in 0..*replicates {
                        let mut train_cfg = SimConfig::new(
                            scenario,
                            size.n_bags,
                            size.instances_per_bag,
                            size.samples_per_instance,
                            mix_seed(resolved.seed, &[s_idx as u64, z_idx as u64, rep as u64, 0]),
                        );
                        let mut test_cfg = SimConfig::new(
                            scenario,
                            test_bags.unwrap_or(500),
                            size.instances_per_bag,
                            size.samples_per_instance,
                            mix_seed(resolved.seed, &[s_idx as u64, z_idx as u64, rep as u64, 1]),
                        );
                        if let Some(p) = p_pos {
                            train_cfg.p_pos = *p;
                            test_cfg.p_pos = *p;
                        }
                        let train = generate(&train_cfg)?.dataset;
                        let test = generate(&test_cfg)?.dataset;
                        let test_labels: Vec<i8> = test.bags.iter().map(|b| b.label).collect();

                        for (m_idx, method) in resolved.methods.iter().enumerate() {
                            let t0 = Instant::now();
                            let outcome = (|| {
                                let (prepared_train, prep) = prepare(&train, &[], standardize)?;
                                let grid = grid_for(&resolved, &prepared_train, method)?;
                                let cell_seed = mix_seed(
                                    resolved.seed,
                                    &[s_idx as u64, z_idx as u64, rep as u64, m_idx as u64, 2],
                                );
                                let (model, choice) = grid_search_fit(
                                    &prepared_train,
                                    method,
                                    &resolved.template,
                                    &grid,
                                    cell_seed,
                                )?;
                                let prepared_test = prep.apply(&test)?;
                                let scores = model.score_bags(&prepared_test)?;
                                Ok(CellOutcome {
                                    auroc: auroc(&scores, &test_labels)?,
                                    chosen_c: choice.c,
                                    chosen_sigma: choice.sigma,
                                    gap: model.gap(),
                                })
                            })();
                            let row = finish_row(
                                outcome,
                                scenario.name().into(),
                                *size,
                                method.name(),
                                rep,
                                t0,
                            );
                            write_row(&mut writer, &row)?;
                            rows.push(row);
                        }
                    }
                }
            }
        }
        BenchmarkMode::CrossValidation { data, folds, replications, log_columns } => {
            let raw = load_dataset(data)?;
            let k = folds.unwrap_or(10);
            let reps = replications.unwrap_or(10);
            let logs = log_columns.clone().unwrap_or_default();
            let standardize = resolved.standardize.unwrap_or(true);
            let labels: Vec<i8> = raw.bags.iter().map(|b| b.label).collect();
            let name = std::path::Path::new(data)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".into());
            let n_inst_per_bag = raw.n_instances() / raw.n_bags().max(1);
            let n_samp = raw.total_samples() / raw.n_instances().max(1);

            let size = SizeSpec {
                n_bags: raw.n_bags(),
                instances_per_bag: n_inst_per_bag,
                samples_per_instance: n_samp,
            };
            for rep in 0..reps {
                let fold_plan =
                    stratified_folds(&labels, k, mix_seed(resolved.seed, &[rep as u64, 10]))?;
                for (m_idx, method) in resolved.methods.iter().enumerate() {
                    let t0 = Instant::now();
                    let outcome = (|| {
                        let mut pooled = vec![f64::NAN; raw.n_bags()];
                        let mut chosen_cs = Vec::new();
                        let mut chosen_sigmas = Vec::new();
                        let mut worst_gap: Option<f64> = None;
                        for f in 0..fold_plan.k {
                            let train_idx: Vec<usize> = (0..raw.n_bags())
                                .filter(|&b| fold_plan.assignment[b] != f)
                                .collect();
                            let test_idx: Vec<usize> = (0..raw.n_bags())
                                .filter(|&b| fold_plan.assignment[b] == f)
                                .collect();
                            let train_raw = raw.subset_bags(&train_idx);
                            let test_raw = raw.subset_bags(&test_idx);
                            let (train_prep, prep) = prepare(&train_raw, &logs, standardize)?;
                            let grid = grid_for(&resolved, &train_prep, method)?;
                            let cell_seed = mix_seed(
                                resolved.seed,
                                &[rep as u64, m_idx as u64, f as u64, 3],
                            );
                            let (model, choice) = grid_search_fit(
                                &train_prep,
                                method,
                                &resolved.template,
                                &grid,
                                cell_seed,
                            )?;
                            let test_prep = prep.apply(&test_raw)?;
                            let scores = model.score_bags(&test_prep)?;
                            for (local, &bag) in test_idx.iter().enumerate() {
                                pooled[bag] = scores[local];
                            }
                            chosen_cs.push(choice.c);
                            chosen_sigmas.extend(choice.sigma);
                            if let Some(g) = model.gap() {
                                worst_gap = Some(worst_gap.map_or(g, |w: f64| w.max(g)));
                            }
                        }
                        Ok(CellOutcome {
                            auroc: auroc(&pooled, &labels)?,
                            chosen_c: modal_value(&chosen_cs),
                            chosen_sigma: if chosen_sigmas.is_empty() {
                                None
                            } else {
                                Some(modal_value(&chosen_sigmas))
                            },
                            gap: worst_gap,
                        })
                    })();
                    let row =
                        finish_row(outcome, format!("cv:{name}"), size, method.name(), rep, t0);
                    write_row(&mut writer, &row)?;
                    rows.push(row);
                }
            }
        }
    }

    let cells = summarize_rows(&rows);
    Ok(BenchmarkReport { rows, cells })
}

struct CellOutcome {
    auroc: f64,
    chosen_c: f64,
    chosen_sigma: Option<f64>,
    gap: Option<f64>,
}

/// Turn a finished (or failed) benchmark cell into a report row. Failures
/// are recorded — empty hyper-parameters, NaN quality — rather than aborting
/// the remaining cells.
fn finish_row(
    outcome: Result<CellOutcome>,
    scenario: String,
    size: SizeSpec,
    method: String,
    replicate: usize,
    t0: Instant,
) -> ReportRow {
    let wall_time_s = t0.elapsed().as_secs_f64();
    match outcome {
        Ok(cell) => {
            info!(
                "{scenario} / {method} replicate {replicate}: ranking quality {:.4} in {wall_time_s:.1}s",
                cell.auroc
            );
            ReportRow {
                scenario,
                n_bags: size.n_bags,
                n_inst: size.instances_per_bag,
                n_samp: size.samples_per_instance,
                method,
                replicate,
                auroc: cell.auroc,
                wall_time_s,
                chosen_c: cell.chosen_c,
                chosen_sigma: cell.chosen_sigma,
                gap: cell.gap,
            }
        }
        Err(e) => {
            warn!("{scenario} / {method} replicate {replicate} failed: {e}");
            ReportRow {
                scenario,
                n_bags: size.n_bags,
                n_inst: size.instances_per_bag,
                n_samp: size.samples_per_instance,
                method,
                replicate,
                auroc: f64::NAN,
                wall_time_s,
                chosen_c: f64::NAN,
                chosen_sigma: None,
                gap: None,
            }
        }
    }
}

/// Log/scale preprocessing used by the benchmark loops and grid-search fits.
pub fn prepare(raw: &Dataset, log_columns: &[String], standardize: bool) -> Result<(Dataset, Preprocess)> {
    let logged = if log_columns.is_empty() { raw.clone() } else { apply_log_transform(raw, log_columns)? };
    if standardize {
        let scaler = fit_scaler(&logged, true)?;
        let scaled = apply_scaler(&logged, &scaler)?;
        Ok((scaled, Preprocess { log_columns: log_columns.to_vec(), scaler: Some(scaler) }))
    } else {
        Ok((logged, Preprocess { log_columns: log_columns.to_vec(), scaler: None }))
    }
}

/// Most frequent value; ties prefer the smallest.
fn modal_value(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (sorted[0], 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let count = j - i + 1;
        if count > best.1 {
            best = (sorted[i], count);
        }
        i = j + 1;
    }
    best.0
}

/// Per-(scenario, method) means, standard deviations, and average ranks
/// across replicates (ranks computed within each replicate, ties averaged).
pub fn summarize_rows(rows: &[ReportRow]) -> Vec<CellSummary> {
    use std::collections::BTreeMap;
    let mut scenarios: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for row in rows {
        if !scenarios.contains(&row.scenario) {
            scenarios.push(row.scenario.clone());
        }
        if !methods.contains(&row.method) {
            methods.push(row.method.clone());
        }
    }

    let mut cells = Vec::new();
    for scenario in &scenarios {
        // replicate → method → auroc; failed cells (NaN) are left out so one
        // bad replicate does not poison a method's mean.
        let mut by_rep: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
        for row in rows
            .iter()
            .filter(|r| &r.scenario == scenario && !r.auroc.is_nan())
        {
            let m_idx = methods.iter().position(|m| m == &row.method).unwrap();
            by_rep.entry(row.replicate).or_default().insert(m_idx, row.auroc);
        }
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); methods.len()]; // Σx, Σx², n
        let mut rank_sums = vec![(0.0f64, 0usize); methods.len()];
        for per_method in by_rep.values() {
            let present: Vec<usize> = per_method.keys().copied().collect();
            let values: Vec<f64> = present.iter().map(|m| per_method[m]).collect();
            let ranks = average_ranks(&values);
            for (pos, &m_idx) in present.iter().enumerate() {
                let v = values[pos];
                sums[m_idx].0 += v;
                sums[m_idx].1 += v * v;
                sums[m_idx].2 += 1;
                rank_sums[m_idx].0 += ranks[pos];
                rank_sums[m_idx].1 += 1;
            }
        }
        for (m_idx, method) in methods.iter().enumerate() {
            let (sx, sxx, n) = sums[m_idx];
            if n == 0 {
                continue;
            }
            let mean = sx / n as f64;
            let var = if n > 1 { (sxx - sx * sx / n as f64) / (n as f64 - 1.0) } else { 0.0 };
            cells.push(CellSummary {
                scenario: scenario.clone(),
                method: method.clone(),
                mean_auroc: mean,
                sd_auroc: var.max(0.0).sqrt(),
                mean_rank: rank_sums[m_idx].0 / rank_sums[m_idx].1.max(1) as f64,
            });
        }
    }
    cells
}
