//! Unified training entry point and a serialisable trained-model wrapper.
//!
//! A [`Method`] names one of the four trainers (witness-alternating kernel
//! trainer, exact mixed-integer trainer, label imputation, summary vectors);
//! [`fit`] dispatches to it and wraps the result together with any
//! preprocessing so that prediction on raw data replays the same transforms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, MiSvmModel, SummarySpec};
use crate::data::{apply_log_transform, apply_scaler, fit_scaler, Dataset, DistInstance, ScaleParams};
use crate::error::{Error, Result};
use crate::heuristic::{fit_heuristic, DualModel, HeuristicConfig};
use crate::kernel::KernelSpec;
use crate::miqp::{fit_miqp, MiqpConfig, PrimalModel};

/// Training method selector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    /// Witness-alternating kernel trainer on distributional instances.
    Heuristic,
    /// Exact mixed-integer trainer on a low-rank feature embedding.
    Miqp,
    /// Label imputation: every instance inherits its bag label.
    SiSmm,
    /// Summary-vector reduction with the witness-alternating trainer.
    MiSvm(SummarySpec),
}

impl Method {
    /// Accepts `mi-smm`, `mi-smm-miqp`, `si-smm`, and `mi-svm[:blocks]`
    /// where blocks is a comma list of `univ1`, `univ2`, `cor`. The spellings
    /// `mismm-heuristic` and `mismm-miqp` are accepted as aliases.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mi-smm" | "mismm-heuristic" => Ok(Self::Heuristic),
            "mi-smm-miqp" | "mismm-miqp" => Ok(Self::Miqp),
            "si-smm" => Ok(Self::SiSmm),
            "mi-svm" => Ok(Self::MiSvm(SummarySpec::univ1())),
            other => {
                if let Some(blocks) = other.strip_prefix("mi-svm:") {
                    Ok(Self::MiSvm(SummarySpec::parse(blocks)?))
                } else {
                    Err(Error::InvalidParameter(format!(
                        "unknown method '{other}' (expected mi-smm, mi-smm-miqp, si-smm, or mi-svm[:blocks])"
                    )))
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Heuristic => "mi-smm".into(),
            Self::Miqp => "mi-smm-miqp".into(),
            Self::SiSmm => "si-smm".into(),
            Self::MiSvm(spec) => format!("mi-svm:{}", spec.label()),
        }
    }

    /// Methods whose instances are summary vectors rather than sample clouds.
    pub fn uses_summaries(&self) -> Option<&SummarySpec> {
        match self {
            Self::MiSvm(spec) => Some(spec),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Knobs shared by all trainers plus the trainer-specific extras.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub kernel: KernelSpec,
    pub c_pos: f64,
    pub c_neg: f64,
    pub seed: u64,
    /// Restarts for the witness-alternating trainer.
    pub restarts: usize,
    pub max_selector_updates: usize,
    /// Anchor budget for the exact trainer's feature map.
    pub miqp_anchors: usize,
    pub miqp_rank: Option<usize>,
    pub miqp_time_limit: Option<f64>,
    pub big_l: f64,
    pub check_big_l: bool,
}

impl FitOptions {
    pub fn new(c: f64, kernel: KernelSpec) -> Self {
        Self {
            kernel,
            c_pos: c,
            c_neg: c,
            seed: 0,
            restarts: 1,
            max_selector_updates: 50,
            miqp_anchors: 240,
            miqp_rank: None,
            miqp_time_limit: None,
            big_l: 100.0,
            check_big_l: true,
        }
    }

    fn heuristic_config(&self) -> HeuristicConfig {
        HeuristicConfig {
            kernel: self.kernel.clone(),
            c_pos: self.c_pos,
            c_neg: self.c_neg,
            max_selector_updates: self.max_selector_updates,
            n_restarts: self.restarts,
            seed: self.seed,
            qp_tol: 1e-9,
        }
    }
}

/// Input transforms captured at training time and replayed at prediction.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Preprocess {
    /// Columns log-transformed before anything else.
    pub log_columns: Vec<String>,
    /// Centering/scaling fit on the training data.
    pub scaler: Option<ScaleParams>,
}

impl Preprocess {
    pub fn is_identity(&self) -> bool {
        self.log_columns.is_empty() && self.scaler.is_none()
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let logged = if self.log_columns.is_empty() {
            ds.clone()
        } else {
            apply_log_transform(ds, &self.log_columns)?
        };
        match &self.scaler {
            Some(params) => apply_scaler(&logged, params),
            None => Ok(logged),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelKind {
    Kernel(DualModel),
    Embedded(PrimalModel),
    Summary(MiSvmModel),
}

/// A trained classifier plus everything needed to score raw data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub method: String,
    pub kind: ModelKind,
    pub preprocess: Preprocess,
    pub kernel: KernelSpec,
    pub c_pos: f64,
    pub c_neg: f64,
    /// Feature columns the model expects in raw input data.
    pub feature_names: Vec<String>,
    /// Name of the pseudo-random generator used during training.
    pub rng_algorithm: String,
    /// Free-form diagnostics (dimension counts, solver statistics, …).
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Train with `method` on an already-preprocessed dataset.
pub fn fit(ds: &Dataset, method: &Method, opts: &FitOptions) -> Result<TrainedModel> {
    let mut metadata = BTreeMap::new();
    metadata.insert("n_train_bags".into(), ds.n_bags().into());
    metadata.insert("n_train_instances".into(), ds.n_instances().into());

    let kind = match method {
        Method::Heuristic => {
            let model = fit_heuristic(ds, &opts.heuristic_config())?;
            metadata.insert("selector_updates".into(), model.selector_updates.into());
            metadata.insert("converged".into(), model.converged.into());
            metadata.insert("objective".into(), model.objective.into());
            ModelKind::Kernel(model)
        }
        Method::SiSmm => {
            let model = baselines::fit_si_smm(ds, &opts.heuristic_config())?;
            metadata.insert("objective".into(), model.objective.into());
            ModelKind::Kernel(model)
        }
        Method::MiSvm(spec) => {
            let model = baselines::fit_mi_svm(ds, spec, &opts.heuristic_config())?;
            metadata.insert("summary_dim".into(), spec.dim(ds.dim()).into());
            metadata
                .insert("summary_columns_kept".into(), model.scaler.keep.len().into());
            ModelKind::Summary(model)
        }
        Method::Miqp => {
            let config = MiqpConfig {
                kernel: opts.kernel.clone(),
                c_pos: opts.c_pos,
                c_neg: opts.c_neg,
                anchors: opts.miqp_anchors,
                rank: opts.miqp_rank,
                big_l: opts.big_l,
                time_limit: opts.miqp_time_limit,
                node_limit: None,
                seed: opts.seed,
                check_big_l: opts.check_big_l,
            };
            let model = fit_miqp(ds, &config)?;
            metadata.insert("status".into(), model.status.to_string().into());
            metadata.insert("gap".into(), model.gap.into());
            metadata.insert("nodes".into(), model.nodes.into());
            metadata.insert("objective".into(), model.objective.into());
            metadata.insert("embedding_rank".into(), model.map.rank().into());
            ModelKind::Embedded(model)
        }
    };
    Ok(TrainedModel {
        method: method.name(),
        kind,
        preprocess: Preprocess::default(),
        kernel: opts.kernel.clone(),
        c_pos: opts.c_pos,
        c_neg: opts.c_neg,
        feature_names: ds.feature_names.clone(),
        rng_algorithm: crate::RNG_ALGORITHM.into(),
        metadata,
    })
}

/// Train on raw data: log-transform the named columns, optionally
/// standardise (fitting the scaler on this data), then fit. The returned
/// model replays the same transforms when scoring.
pub fn fit_with_preprocess(
    raw: &Dataset,
    method: &Method,
    opts: &FitOptions,
    log_columns: &[String],
    standardize: bool,
) -> Result<TrainedModel> {
    let logged = if log_columns.is_empty() { raw.clone() } else { apply_log_transform(raw, log_columns)? };
    let (prepared, scaler) = if standardize {
        let params = fit_scaler(&logged, true)?;
        (apply_scaler(&logged, &params)?, Some(params))
    } else {
        (logged, None)
    };
    let mut model = fit(&prepared, method, opts)?;
    model.preprocess = Preprocess { log_columns: log_columns.to_vec(), scaler };
    model.feature_names = raw.feature_names.clone();
    Ok(model)
}

impl TrainedModel {
    fn score_prepared_bag(&self, instances: &[&DistInstance]) -> Result<f64> {
        match &self.kind {
            ModelKind::Kernel(m) => m.score_bag(instances),
            ModelKind::Embedded(m) => m.score_bag(instances),
            ModelKind::Summary(m) => m.score_bag(instances),
        }
    }

    /// Bag scores for a raw dataset, replaying the stored preprocessing.
    pub fn score_bags(&self, raw: &Dataset) -> Result<Vec<f64>> {
        let ds = self.preprocess.apply(raw)?;
        ds.bags
            .iter()
            .map(|bag| {
                let insts: Vec<&DistInstance> =
                    bag.instance_indices.iter().map(|&i| &ds.instances[i]).collect();
                self.score_prepared_bag(&insts)
            })
            .collect()
    }

    /// Per-instance scores for a raw dataset.
    pub fn score_instances(&self, raw: &Dataset) -> Result<Vec<f64>> {
        let ds = self.preprocess.apply(raw)?;
        ds.instances
            .iter()
            .map(|inst| match &self.kind {
                ModelKind::Kernel(m) => m.score_instance(inst),
                ModelKind::Embedded(m) => m.score_instance(inst),
                ModelKind::Summary(m) => m.score_instance(inst),
            })
            .collect()
    }

    /// Predicted ±1 labels per bag.
    pub fn predict_bags(&self, raw: &Dataset) -> Result<Vec<i8>> {
        Ok(self.score_bags(raw)?.into_iter().map(|s| if s > 0.0 { 1 } else { -1 }).collect())
    }

    /// Optimality gap when the trainer reports one (exact trainer only).
    pub fn gap(&self) -> Option<f64> {
        match &self.kind {
            ModelKind::Embedded(m) => Some(m.gap),
            _ => None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}
