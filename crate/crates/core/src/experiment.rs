//! End-to-end drivers: taxonomy expansion, hierarchical classification and a
//! sample-size sanity check of the kernel estimator.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, features_from_closure_pca, make_splits, similarity_sigma, synthetic_tree, EmbeddedDataset, Split, SplitPlan};
use crate::embedding::{build_augmented, train_embedding_with_retry, AugmentExample, ClosureGraph, EmbedConfig};
use crate::error::{invalid_argument, Result};
use crate::eval::{classify_nearest, f1_scores, map_and_mean_rank};
use crate::manifold::{lorentz_dist, lorentz_exp, lorentz_to_poincare, poincare_to_lorentz, LorentzPoint, PoincarePoint, TangentVector};
use crate::neural::{self, MlpModel, OutputMode, TrainConfig};
use crate::regression::{cross_validate, cross_validate_holdout, hsp_predict_many, krls_predict, CvGrid, CvSelection, Decoder, InferenceConfig, KernelRegressor, BALL_EPS};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hsp,
    Krls,
    Nng,
    Nne,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Hsp, ModelKind::Krls, ModelKind::Nng, ModelKind::Nne];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Hsp => "hsp",
            ModelKind::Krls => "krls",
            ModelKind::Nng => "nng",
            ModelKind::Nne => "nne",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid_argument(format!("unknown model '{s}' (expected one of hsp, krls, nng, nne)")))
    }
}

/// Stage of the per-split pipeline, recorded by [`AuditedFeatures`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    CrossValidation,
    Fit,
    Predict,
}

/// Feature rows behind an accessor that logs every read.
#[derive(Debug)]
pub struct AuditedFeatures<'a> {
    rows: &'a [Vec<f64>],
    log: Mutex<Vec<(Stage, usize)>>,
}

impl<'a> AuditedFeatures<'a> {
    pub fn new(rows: &'a [Vec<f64>]) -> Self {
        Self { rows, log: Mutex::new(Vec::new()) }
    }

    pub fn get(&self, stage: Stage, idx: usize) -> &'a [f64] {
        self.log.lock().expect("audit log poisoned").push((stage, idx));
        &self.rows[idx]
    }

    fn gather(&self, stage: Stage, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter().map(|&k| self.get(stage, k).to_vec()).collect()
    }

    pub fn accesses(&self) -> Vec<(Stage, usize)> {
        self.log.lock().expect("audit log poisoned").clone()
    }
}

/// Settings of the taxonomy-expansion protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    pub models: Vec<ModelKind>,
    pub splits: SplitPlan,
    pub grid: CvGrid,
    /// Solver settings for validation predictions during the grid search.
    pub cv_inference: InferenceConfig,
    /// Solver settings for test predictions.
    pub inference: InferenceConfig,
    pub nn_hidden: Vec<usize>,
    pub nn_train: TrainConfig,
    /// Rank predicted nodes against other predicted nodes as well as the
    /// original ones.
    pub pool_predictions: bool,
    pub rng_seed: u64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::Hsp, ModelKind::Krls],
            splits: SplitPlan::default(),
            grid: CvGrid::default(),
            cv_inference: InferenceConfig { grad_tol: 1e-3, max_iters: 5000, ..InferenceConfig::default() },
            inference: InferenceConfig::default(),
            nn_hidden: vec![64, 64, 32, 16, 8],
            nn_train: TrainConfig::default(),
            pool_predictions: true,
            rng_seed: 0,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(invalid_argument("at least one model is required"));
        }
        if self.nn_hidden.contains(&0) {
            return Err(invalid_argument("hidden widths must be positive"));
        }
        self.grid.validate()?;
        self.cv_inference.validate()?;
        self.inference.validate()?;
        self.nn_train.validate()
    }
}

/// Outcome of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub model: ModelKind,
    pub test_size: usize,
    pub repetition: usize,
    pub map_score: f64,
    pub mean_rank: f64,
    /// The same metrics with the true embeddings in place of predictions.
    pub orig_map: f64,
    pub orig_mean_rank: f64,
    pub selection: Option<CvSelection>,
    /// HSP test inferences that met the gradient tolerance.
    pub converged: Option<usize>,
    pub inferences: Option<usize>,
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub test_size: usize,
    pub runs: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub rank_mean: f64,
    pub rank_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionResults {
    pub schema_version: u32,
    pub node_count: usize,
    pub embedding_map: f64,
    pub records: Vec<SplitRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(records: &[SplitRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&SplitRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.model.to_string(), r.test_size)).or_default().push(r);
        groups.entry(("orig".to_string(), r.test_size)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((model, test_size), rs)| {
            let orig = model == "orig";
            // every model of a split shares the same orig numbers
            let rs: Vec<&SplitRecord> = if orig {
                let mut seen = std::collections::BTreeSet::new();
                rs.into_iter().filter(|r| seen.insert(r.repetition)).collect()
            } else {
                rs
            };
            let maps: Vec<f64> = rs.iter().map(|r| if orig { r.orig_map } else { r.map_score }).collect();
            let ranks: Vec<f64> = rs.iter().map(|r| if orig { r.orig_mean_rank } else { r.mean_rank }).collect();
            let (map_mean, map_std) = mean_std(&maps);
            let (rank_mean, rank_std) = mean_std(&ranks);
            SummaryRow { model, test_size, runs: rs.len(), map_mean, map_std, rank_mean, rank_std }
        })
        .collect()
}

impl ExpansionResults {
    pub fn summary_for(&self, model: &str, test_size: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.model == model && r.test_size == test_size)
    }

    /// Fraction of HSP test inferences that converged.
    pub fn hsp_convergence_rate(&self) -> Option<f64> {
        let (c, n) = self
            .records
            .iter()
            .filter_map(|r| Some((r.converged?, r.inferences?)))
            .fold((0, 0), |(a, b), (c, n)| (a + c, b + n));
        (n > 0).then(|| c as f64 / n as f64)
    }

    /// Aligned `mean ± std` tables of mAP and mean rank, one row per model.
    pub fn to_text(&self) -> String {
        let mut sizes: Vec<usize> = self.summary.iter().map(|r| r.test_size).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut models: Vec<&str> = self.summary.iter().map(|r| r.model.as_str()).collect();
        models.sort_by_key(|m| (*m != "orig", ModelKind::from_str(m).ok()));
        models.dedup();

        let mut out = String::new();
        let _ = writeln!(out, "taxonomy expansion: {} nodes, embedding mAP {:.4}", self.node_count, self.embedding_map);
        for (title, pick) in [("mAP", 0usize), ("mean rank", 1)] {
            let _ = writeln!(out, "\n{title}");
            let _ = write!(out, "{:<6}", "model");
            for s in &sizes {
                let _ = write!(out, "{:>18}", format!("test={s}"));
            }
            out.push('\n');
            for m in &models {
                let _ = write!(out, "{m:<6}");
                for &s in &sizes {
                    let cell = match self.summary_for(m, s) {
                        Some(r) if pick == 0 => format!("{:.3} ± {:.3}", r.map_mean, r.map_std),
                        Some(r) => format!("{:.2} ± {:.2}", r.rank_mean, r.rank_std),
                        None => "-".to_string(),
                    };
                    let _ = write!(out, "{cell:>18}");
                }
                out.push('\n');
            }
        }
        if let Some(rate) = self.hsp_convergence_rate() {
            let _ = writeln!(out, "\nhsp inferences converged: {:.1}%", 100.0 * rate);
        }
        out
    }
}

/// Synthetic taxonomy with adjacency-PCA features and a trained embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub node_count: usize,
    pub feature_dim: usize,
    pub tree_seed: u64,
    pub embed: EmbedConfig,
    /// Learning rates tried in turn until `target_map` is reached.
    pub embed_learning_rates: Vec<f64>,
    pub target_map: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            node_count: 226,
            feature_dim: 50,
            tree_seed: 0,
            embed: EmbedConfig::default(),
            embed_learning_rates: vec![0.3],
            target_map: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedTaxonomy {
    pub dataset: EmbeddedDataset,
    pub embedding_map: f64,
    pub loss_trace: Vec<f64>,
}

pub fn prepare_synthetic(cfg: &SyntheticConfig) -> Result<PreparedTaxonomy> {
    let g = synthetic_tree(cfg.node_count, cfg.tree_seed)?;
    let pca = features_from_closure_pca(&g, cfg.feature_dim)?;
    let (state, score) = train_embedding_with_retry(&g, &cfg.embed, &cfg.embed_learning_rates, cfg.target_map)?;
    log::info!("embedded {} nodes, mAP {score:.4}", g.len());
    let targets = state.points();
    Ok(PreparedTaxonomy {
        dataset: EmbeddedDataset::new(g, pca.rows, targets)?,
        embedding_map: score,
        loss_trace: state.loss_trace,
    })
}

fn ranking(
    g: &ClosureGraph,
    targets: &[LorentzPoint],
    split: &Split,
    predictions: &[LorentzPoint],
    pool: bool,
) -> Result<crate::eval::RankingReport> {
    let mut is_test = vec![false; g.len()];
    split.test.iter().for_each(|&k| is_test[k] = true);
    let context: HashMap<String, LorentzPoint> =
        (0..g.len()).filter(|&k| !is_test[k]).map(|k| (g.id(k).to_string(), targets[k].clone())).collect();
    if pool {
        let predicted: HashMap<String, LorentzPoint> =
            split.test.iter().zip(predictions).map(|(&k, p)| (g.id(k).to_string(), p.clone())).collect();
        return map_and_mean_rank(&predicted, &context, g);
    }
    let mut details = Vec::new();
    let mut excluded = Vec::new();
    for (&k, p) in split.test.iter().zip(predictions) {
        let one = HashMap::from([(g.id(k).to_string(), p.clone())]);
        let r = map_and_mean_rank(&one, &context, g)?;
        details.extend(r.details);
        excluded.extend(r.excluded);
    }
    let n = details.len().max(1) as f64;
    let map_score = details.iter().map(|d| d.average_precision).sum::<f64>() / n;
    let ranks: Vec<usize> = details.iter().flat_map(|d| d.neighbor_ranks.iter().copied()).collect();
    let mean_rank = if ranks.is_empty() { 0.0 } else { ranks.iter().sum::<usize>() as f64 / ranks.len() as f64 };
    Ok(crate::eval::RankingReport { map_score, mean_rank, details, excluded })
}

fn to_ball(points: &[LorentzPoint]) -> Vec<PoincarePoint> {
    points.iter().map(lorentz_to_poincare).collect()
}

/// Runs one model on one split. Features are read only through `features`,
/// so callers can audit which rows each stage touched.
pub fn run_split(
    data: &EmbeddedDataset,
    split: &Split,
    model: ModelKind,
    cfg: &ExpansionConfig,
    features: &AuditedFeatures<'_>,
) -> Result<SplitRecord> {
    let g = &data.graph;
    let targets = &data.targets;
    let pick = |idx: &[usize]| -> Vec<LorentzPoint> { idx.iter().map(|&k| targets[k].clone()).collect() };
    let fit_idx: Vec<usize> = split.train.iter().chain(&split.validation).copied().collect();
    let seed = derive_seed(cfg.rng_seed, &[split.test_size as u64, split.repetition as u64, model as u64]);

    let mut selection = None;
    let mut converged = None;
    let predictions: Vec<LorentzPoint> = match model {
        ModelKind::Hsp | ModelKind::Krls => {
            let decoder = if model == ModelKind::Hsp { Decoder::Hsp } else { Decoder::Krls };
            let cv_infer = InferenceConfig { rng_seed: seed, ..cfg.cv_inference.clone() };
            let sel = cross_validate_holdout(
                &features.gather(Stage::CrossValidation, &split.train),
                &pick(&split.train),
                &features.gather(Stage::CrossValidation, &split.validation),
                &pick(&split.validation),
                &cfg.grid,
                decoder,
                &cv_infer,
            )?;
            let fitted = KernelRegressor::fit(features.gather(Stage::Fit, &fit_idx), pick(&fit_idx), sel.sigma, sel.lambda)?;
            let test_x = features.gather(Stage::Predict, &split.test);
            let preds = if model == ModelKind::Hsp {
                let infer =
                    InferenceConfig { learning_rate: sel.learning_rate, rng_seed: seed, ..cfg.inference.clone() };
                let out = hsp_predict_many(&fitted, &test_x, &infer)?;
                converged = Some(out.iter().filter(|r| r.converged).count());
                out.into_iter().map(|r| r.point).collect()
            } else {
                test_x
                    .iter()
                    .map(|x| krls_predict(&fitted, x, BALL_EPS).map(|p| poincare_to_lorentz(&p)))
                    .collect::<Result<_>>()?
            };
            selection = Some(sel);
            preds
        }
        ModelKind::Nng | ModelKind::Nne => {
            let mode = if model == ModelKind::Nng { OutputMode::Geodesic } else { OutputMode::Euclidean };
            let train_x = features.gather(Stage::Fit, &fit_idx);
            let train_y = to_ball(&pick(&fit_idx));
            let mut dims = vec![data.feature_dim()];
            dims.extend(&cfg.nn_hidden);
            dims.push(train_y[0].dim());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = MlpModel::init(&dims, mode, &mut rng)?;
            let pairs: Vec<(Vec<f64>, PoincarePoint)> = train_x.into_iter().zip(train_y).collect();
            let net = neural::train(init, &pairs, &TrainConfig { rng_seed: seed, ..cfg.nn_train.clone() })?;
            features
                .gather(Stage::Predict, &split.test)
                .iter()
                .map(|x| neural::predict(&net, x, BALL_EPS).map(|p| poincare_to_lorentz(&p)))
                .collect::<Result<_>>()?
        }
    };

    let report = ranking(g, targets, split, &predictions, cfg.pool_predictions)?;
    let orig = ranking(g, targets, split, &pick(&split.test), cfg.pool_predictions)?;
    log::info!(
        "{model} test={} rep={}: mAP {:.4} (orig {:.4})",
        split.test_size,
        split.repetition,
        report.map_score,
        orig.map_score
    );
    Ok(SplitRecord {
        model,
        test_size: split.test_size,
        repetition: split.repetition,
        map_score: report.map_score,
        mean_rank: report.mean_rank,
        orig_map: orig.map_score,
        orig_mean_rank: orig.mean_rank,
        selection,
        converged,
        inferences: converged.map(|_| split.test.len()),
        excluded: report.excluded,
    })
}

/// Every configured model on every split of `cfg.splits`.
pub fn run_expansion(data: &EmbeddedDataset, embedding_map: f64, cfg: &ExpansionConfig) -> Result<ExpansionResults> {
    cfg.validate()?;
    let splits = make_splits(data.len(), &data.graph.roots(), &cfg.splits)?;
    run_expansion_on(data, embedding_map, &splits, cfg)
}

/// Like [`run_expansion`] with explicit splits.
pub fn run_expansion_on(
    data: &EmbeddedDataset,
    embedding_map: f64,
    splits: &[Split],
    cfg: &ExpansionConfig,
) -> Result<ExpansionResults> {
    cfg.validate()?;
    let jobs: Vec<(&Split, ModelKind)> =
        splits.iter().flat_map(|s| cfg.models.iter().map(move |&m| (s, m))).collect();
    let records = jobs
        .par_iter()
        .map(|&(split, model)| run_split(data, split, model, cfg, &AuditedFeatures::new(&data.features)))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records);
    Ok(ExpansionResults {
        schema_version: RESULTS_SCHEMA_VERSION,
        node_count: data.len(),
        embedding_map,
        records,
        summary,
    })
}

/// Synthetic hierarchical classification: `root -> group_k -> class_kj`
/// with Gaussian features drawn around hierarchical class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationConfig {
    pub groups: usize,
    pub classes_per_group: usize,
    pub examples: usize,
    pub feature_dim: usize,
    /// Spread of group means, of class means around their group, and of
    /// examples around their class.
    pub group_spread: f64,
    pub class_spread: f64,
    pub noise: f64,
    pub test_fraction: f64,
    pub embed: EmbedConfig,
    pub embed_learning_rates: Vec<f64>,
    pub target_map: f64,
    pub grid: CvGrid,
    pub cv_inference: InferenceConfig,
    pub inference: InferenceConfig,
    pub rng_seed: u64,
}

impl Default for ClassificationConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            classes_per_group: 2,
            examples: 200,
            feature_dim: 10,
            group_spread: 2.0,
            class_spread: 1.0,
            noise: 1.0,
            test_fraction: 0.2,
            embed: EmbedConfig { epochs: 300, ..EmbedConfig::default() },
            embed_learning_rates: vec![0.1, 0.3, 0.5, 1.0],
            target_map: 0.99,
            grid: CvGrid { learning_rates: vec![1e-2, 1e-1], ..CvGrid::default() },
            cv_inference: InferenceConfig { grad_tol: 1e-3, max_iters: 5000, ..InferenceConfig::default() },
            inference: InferenceConfig::default(),
            rng_seed: 0,
        }
    }
}

impl ClassificationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.classes_per_group == 0 || self.feature_dim == 0 {
            return Err(invalid_argument("groups, classes_per_group and feature_dim must be positive"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(invalid_argument("test_fraction must lie in (0, 1)"));
        }
        let n_test = (self.test_fraction * self.examples as f64).round() as usize;
        if n_test == 0 || self.examples - n_test < 12 {
            return Err(invalid_argument("too few examples for a train/test split"));
        }
        if !(self.group_spread >= 0.0 && self.class_spread >= 0.0 && self.noise > 0.0) {
            return Err(invalid_argument("spreads must be non-negative and noise positive"));
        }
        self.grid.validate()?;
        self.cv_inference.validate()?;
        self.inference.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResults {
    pub schema_version: u32,
    pub classes: Vec<String>,
    pub train_size: usize,
    pub test_size: usize,
    pub embedding_map: f64,
    pub selection: CvSelection,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub predictions: Vec<(String, String)>,
}

impl ClassificationResults {
    pub fn to_text(&self) -> String {
        format!(
            "hierarchical classification: {} classes, {} train / {} test\n\
             embedding mAP  {:.4}\nsigma          {:.4e}\nlambda         {:.1e}\n\
             micro-F1       {:.4}\nmacro-F1       {:.4}\n",
            self.classes.len(),
            self.train_size,
            self.test_size,
            self.embedding_map,
            self.selection.sigma,
            self.selection.lambda,
            self.micro_f1,
            self.macro_f1
        )
    }
}

fn gaussian_vec(rng: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
}

/// Taxonomy, labelled examples and class ids of the synthetic task.
pub fn synthetic_classification(cfg: &ClassificationConfig) -> Result<(ClosureGraph, Vec<AugmentExample>, Vec<String>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut ids = vec!["root".to_string()];
    let mut edges = Vec::new();
    let mut classes = Vec::new();
    let mut means = Vec::new();
    for gi in 0..cfg.groups {
        let group_mean = gaussian_vec(&mut rng, cfg.feature_dim, cfg.group_spread);
        let gidx = ids.len();
        ids.push(format!("group{gi}"));
        edges.push((gidx, 0));
        for ci in 0..cfg.classes_per_group {
            let offset = gaussian_vec(&mut rng, cfg.feature_dim, cfg.class_spread);
            means.push(group_mean.iter().zip(&offset).map(|(a, b)| a + b).collect::<Vec<f64>>());
            edges.push((ids.len(), gidx));
            classes.push(format!("class{gi}{ci}"));
            ids.push(format!("class{gi}{ci}"));
        }
    }
    let g = ClosureGraph::from_edges(ids, &edges)?;
    let examples = (0..cfg.examples)
        .map(|k| {
            let c = k % classes.len();
            let noise = gaussian_vec(&mut rng, cfg.feature_dim, cfg.noise);
            AugmentExample {
                example_id: format!("x{k:04}"),
                class_id: classes[c].clone(),
                features: means[c].iter().zip(&noise).map(|(a, b)| a + b).collect(),
            }
        })
        .collect();
    Ok((g, examples, classes))
}

/// Embeds the taxonomy augmented with training examples, regresses example
/// features onto their embeddings with HSP and labels each test example by
/// its nearest class embedding.
pub fn run_classification(cfg: &ClassificationConfig) -> Result<ClassificationResults> {
    let (g, examples, classes) = synthetic_classification(cfg)?;
    let n_test = (cfg.test_fraction * cfg.examples as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[1]));
    let mut is_test = vec![false; examples.len()];
    rand::seq::index::sample(&mut rng, examples.len(), n_test).into_iter().for_each(|k| is_test[k] = true);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (e, t) in examples.iter().zip(&is_test) {
        if *t { test.push(e) } else { train.push(e) }
    }

    let train_owned: Vec<AugmentExample> = train.iter().map(|e| (*e).clone()).collect();
    let train_x: Vec<Vec<f64>> = train.iter().map(|e| e.features.clone()).collect();
    let sigma = similarity_sigma(&train_x)?;
    let augmented = build_augmented(&g, &HashMap::new(), &train_owned, sigma)?;
    let embed = EmbedConfig { rng_seed: derive_seed(cfg.rng_seed, &[2]), ..cfg.embed.clone() };
    let (state, score) = train_embedding_with_retry(&augmented, &embed, &cfg.embed_learning_rates, cfg.target_map)?;
    log::info!("augmented hierarchy of {} nodes embedded, mAP {score:.4}", augmented.len());

    let train_y: Vec<LorentzPoint> = train
        .iter()
        .map(|e| state.get(&e.example_id).expect("example was embedded"))
        .collect();
    let infer_seed = derive_seed(cfg.rng_seed, &[3]);
    let cv_infer = InferenceConfig { rng_seed: infer_seed, ..cfg.cv_inference.clone() };
    let selection = cross_validate(&train_x, &train_y, &cfg.grid, Decoder::Hsp, &cv_infer, 0.2, infer_seed)?;
    let model = KernelRegressor::fit(train_x, train_y, selection.sigma, selection.lambda)?;
    let test_x: Vec<Vec<f64>> = test.iter().map(|e| e.features.clone()).collect();
    let infer = InferenceConfig { learning_rate: selection.learning_rate, rng_seed: infer_seed, ..cfg.inference.clone() };
    let outputs = hsp_predict_many(&model, &test_x, &infer)?;

    let class_points: BTreeMap<String, LorentzPoint> =
        classes.iter().map(|c| (c.clone(), state.get(c).expect("class was embedded"))).collect();
    let predicted: Vec<String> = outputs
        .iter()
        .map(|o| classify_nearest(&o.point, &class_points).map(str::to_string))
        .collect::<Result<_>>()?;
    let truth: Vec<String> = test.iter().map(|e| e.class_id.clone()).collect();
    let (micro_f1, macro_f1) = f1_scores(&predicted, &truth)?;
    Ok(ClassificationResults {
        schema_version: RESULTS_SCHEMA_VERSION,
        classes,
        train_size: train.len(),
        test_size: test.len(),
        embedding_map: score,
        selection,
        micro_f1,
        macro_f1,
        predictions: test.iter().map(|e| e.example_id.clone()).zip(predicted).collect(),
    })
}

/// Regression task `y = exp_o(A x)` on `L^n` with `x` uniform in
/// `[-1, 1]^d`, used to compare held-out risk across training-set sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    pub input_dim: usize,
    pub target_dim: usize,
    pub train_sizes: Vec<usize>,
    pub test_points: usize,
    pub trials: usize,
    pub sigma: f64,
    pub lambda_scale: f64,
    pub inference: InferenceConfig,
    pub rng_seed: u64,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            input_dim: 3,
            target_dim: 2,
            train_sizes: vec![50, 200],
            test_points: 100,
            trials: 3,
            sigma: 0.5,
            lambda_scale: 1e-2,
            inference: InferenceConfig::default(),
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResults {
    pub train_sizes: Vec<usize>,
    /// Mean squared geodesic test error per training size.
    pub risks: Vec<f64>,
}

/// Held-out HSP risk for each training size, with `lambda = scale / sqrt(m)`.
pub fn rate_check(cfg: &RateConfig) -> Result<RateResults> {
    if cfg.input_dim == 0 || cfg.target_dim == 0 || cfg.trials == 0 || cfg.test_points == 0 {
        return Err(invalid_argument("dimensions, trials and test_points must be positive"));
    }
    if cfg.train_sizes.is_empty() || cfg.train_sizes.contains(&0) {
        return Err(invalid_argument("train_sizes must be nonempty and positive"));
    }
    cfg.inference.validate()?;
    let origin = LorentzPoint::origin(cfg.target_dim);
    let mut risks = vec![0.0; cfg.train_sizes.len()];
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[trial as u64]));
        let a: Vec<Vec<f64>> = (0..cfg.target_dim).map(|_| gaussian_vec(&mut rng, cfg.input_dim, 1.0)).collect();
        let draw = |rng: &mut ChaCha8Rng| -> Result<(Vec<f64>, LorentzPoint)> {
            let x: Vec<f64> = (0..cfg.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut z = vec![0.0];
            z.extend(a.iter().map(|row| row.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>()));
            let y = lorentz_exp(&origin, &TangentVector::new(origin.clone(), z)?)?;
            Ok((x, y))
        };
        let test: Vec<(Vec<f64>, LorentzPoint)> = (0..cfg.test_points).map(|_| draw(&mut rng)).collect::<Result<_>>()?;
        let test_x: Vec<Vec<f64>> = test.iter().map(|t| t.0.clone()).collect();
        let max_m = *cfg.train_sizes.iter().max().expect("nonempty");
        let pool: Vec<(Vec<f64>, LorentzPoint)> = (0..max_m).map(|_| draw(&mut rng)).collect::<Result<_>>()?;
        for (slot, &m) in cfg.train_sizes.iter().enumerate() {
            let (x, y): (Vec<Vec<f64>>, Vec<LorentzPoint>) = pool[..m].iter().cloned().unzip();
            let lambda = cfg.lambda_scale / (m as f64).sqrt();
            let model = KernelRegressor::fit(x, y, cfg.sigma, lambda)?;
            let infer = InferenceConfig { rng_seed: derive_seed(cfg.rng_seed, &[trial as u64, m as u64]), ..cfg.inference.clone() };
            let preds = hsp_predict_many(&model, &test_x, &infer)?;
            let risk = preds.iter().zip(&test).map(|(p, t)| lorentz_dist(&p.point, &t.1).powi(2)).sum::<f64>()
                / test.len() as f64;
            log::debug!("rate trial {trial} m={m}: risk {risk:.5}");
            risks[slot] += risk / cfg.trials as f64;
        }
    }
    Ok(RateResults { train_sizes: cfg.train_sizes.clone(), risks })
}
