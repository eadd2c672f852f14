//! Run configuration: one JSON document with a block per command.

use std::path::{Path, PathBuf};

use hypreg::data::SplitPlan;
use hypreg::embedding::EmbedConfig;
use hypreg::experiment::{ClassificationConfig, ExpansionConfig, ModelKind, SyntheticConfig};
use hypreg::neural::TrainConfig;
use hypreg::regression::{CvGrid, InferenceConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Embed,
    Fit,
    Predict,
    Evaluate,
    ExpansionExperiment,
    ClassifyExperiment,
}

impl Command {
    pub fn block(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Embed => "embed",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::ExpansionExperiment => "expansion",
            Command::ClassifyExperiment => "classify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub synth: SynthBlock,
    #[serde(default)]
    pub embed: EmbedBlock,
    #[serde(default)]
    pub fit: FitBlock,
    #[serde(default)]
    pub predict: PredictBlock,
    #[serde(default)]
    pub evaluate: EvaluateBlock,
    #[serde(default)]
    pub expansion: ExpansionBlock,
    #[serde(default)]
    pub classify: ClassificationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            synth: SynthBlock::default(),
            embed: EmbedBlock::default(),
            fit: FitBlock::default(),
            predict: PredictBlock::default(),
            evaluate: EvaluateBlock::default(),
            expansion: ExpansionBlock::default(),
            classify: ClassificationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthBlock {
    pub node_count: usize,
    pub feature_dim: usize,
    pub tree_seed: u64,
    pub splits: SplitPlan,
}

impl Default for SynthBlock {
    fn default() -> Self {
        Self { node_count: 226, feature_dim: 50, tree_seed: 0, splits: SplitPlan::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedBlock {
    pub edges: Option<PathBuf>,
    pub config: EmbedConfig,
    /// Tried in order until `target_map` is reached; empty uses
    /// `config.learning_rate` alone.
    pub learning_rates: Vec<f64>,
    pub target_map: f64,
}

impl Default for EmbedBlock {
    fn default() -> Self {
        Self { edges: None, config: EmbedConfig::default(), learning_rates: Vec::new(), target_map: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitBlock {
    pub model: ModelKind,
    pub features: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// With a manifest, the model is cross-validated on the split's
    /// train/validation sets and refit on their union.
    pub manifest: Option<PathBuf>,
    pub split_index: usize,
    pub grid: CvGrid,
    pub cv_inference: InferenceConfig,
    pub validation_ratio: f64,
    pub nn_hidden: Vec<usize>,
    pub nn_train: TrainConfig,
    pub seed: u64,
}

impl Default for FitBlock {
    fn default() -> Self {
        let exp = ExpansionConfig::default();
        Self {
            model: ModelKind::Hsp,
            features: None,
            embeddings: None,
            manifest: None,
            split_index: 0,
            grid: exp.grid,
            cv_inference: exp.cv_inference,
            validation_ratio: 0.2,
            nn_hidden: exp.nn_hidden,
            nn_train: exp.nn_train,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictBlock {
    pub model: ModelKind,
    pub model_path: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Predict only the test nodes of this split; all rows otherwise.
    pub manifest: Option<PathBuf>,
    pub split_index: usize,
    pub inference: InferenceConfig,
}

impl Default for PredictBlock {
    fn default() -> Self {
        Self {
            model: ModelKind::Hsp,
            model_path: None,
            features: None,
            manifest: None,
            split_index: 0,
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateBlock {
    pub edges: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Predicted points ranked against the remaining embeddings.
    pub predictions: Option<PathBuf>,
    pub pool_predictions: bool,
}

impl Default for EvaluateBlock {
    fn default() -> Self {
        Self { edges: None, embeddings: None, predictions: None, pool_predictions: true }
    }
}

/// Existing data files to run the expansion protocol on instead of a
/// generated tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionBlock {
    pub synthetic: SyntheticConfig,
    pub data: Option<DataPaths>,
    pub experiment: ExpansionConfig,
}

/// Small-tree settings with network widths scaled for a desktop.
pub fn preset(name: &str) -> Option<RunConfig> {
    match name {
        "synthetic-small" => {
            let mut cfg = RunConfig::default();
            cfg.expansion.experiment.models = ModelKind::ALL.to_vec();
            cfg.expansion.experiment.grid.learning_rates = vec![1e-2, 1e-1];
            cfg.fit.grid.learning_rates = vec![1e-2, 1e-1];
            Some(cfg)
        }
        _ => None,
    }
}

pub const PRESETS: &[&str] = &["synthetic-small"];

/// A problem with the configuration, located by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `text` on top of `base`, reporting the path of the first bad
/// field.
pub fn parse_config(text: &str, base: &RunConfig) -> Result<RunConfig, Diagnostic> {
    let over: Value = serde_json::from_str(text).map_err(|e| Diagnostic { path: "<root>".into(), message: e.to_string() })?;
    let Value::Object(ref fields) = over else {
        return Err(Diagnostic { path: "<root>".into(), message: "expected a JSON object".into() });
    };
    match fields.get("version") {
        None => return Err(Diagnostic { path: "version".into(), message: "missing field".into() }),
        Some(v) if v.as_u64() != Some(CONFIG_VERSION as u64) => {
            return Err(Diagnostic {
                path: "version".into(),
                message: format!("unsupported version {v} (expected {CONFIG_VERSION})"),
            })
        }
        _ => {}
    }
    let mut merged = serde_json::to_value(base).expect("config serializes");
    merge(&mut merged, over);
    serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        Diagnostic { path: if path == "." { "<root>".into() } else { path }, message: e.into_inner().to_string() }
    })
}

struct Checker {
    out: Vec<Diagnostic>,
}

impl Checker {
    fn push(&mut self, path: &str, message: impl Into<String>) {
        self.out.push(Diagnostic { path: path.into(), message: message.into() });
    }

    fn positive(&mut self, path: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.push(path, format!("must be positive and finite, got {v}"));
        }
    }

    fn non_negative(&mut self, path: &str, v: f64) {
        if !(v >= 0.0 && v.is_finite()) {
            self.push(path, format!("must be non-negative and finite, got {v}"));
        }
    }

    fn count(&mut self, path: &str, v: usize) {
        if v == 0 {
            self.push(path, "must be at least 1");
        }
    }

    fn unit_open(&mut self, path: &str, v: f64) {
        if !(v > 0.0 && v < 1.0) {
            self.push(path, format!("must lie strictly between 0 and 1, got {v}"));
        }
    }

    fn file(&mut self, path: &str, p: &Option<PathBuf>) {
        match p {
            None => self.push(path, "required for this command"),
            Some(p) => self.existing(path, p),
        }
    }

    fn existing(&mut self, path: &str, p: &Path) {
        if !p.is_file() {
            self.push(path, format!("file not found: {}", p.display()));
        }
    }

    fn grid(&mut self, path: &str, g: &CvGrid) {
        for (name, values) in [("sigmas", &g.sigmas), ("lambdas", &g.lambdas), ("learning_rates", &g.learning_rates)] {
            if values.is_empty() {
                self.push(&format!("{path}.{name}"), "must not be empty");
            }
            for (k, v) in values.iter().enumerate() {
                self.positive(&format!("{path}.{name}[{k}]"), *v);
            }
        }
    }

    fn inference(&mut self, path: &str, c: &InferenceConfig) {
        self.count(&format!("{path}.batch_size"), c.batch_size);
        self.count(&format!("{path}.max_iters"), c.max_iters);
        self.count(&format!("{path}.check_every"), c.check_every);
        self.positive(&format!("{path}.grad_tol"), c.grad_tol);
        self.positive(&format!("{path}.learning_rate"), c.learning_rate);
        self.positive(&format!("{path}.max_step"), c.max_step);
        self.positive(&format!("{path}.max_radius"), c.max_radius);
    }

    fn train(&mut self, path: &str, c: &TrainConfig) {
        self.count(&format!("{path}.batch_size"), c.batch_size);
        self.count(&format!("{path}.max_epochs"), c.max_epochs);
        self.count(&format!("{path}.patience"), c.patience);
        self.count(&format!("{path}.convergence_window"), c.convergence_window);
        self.non_negative(&format!("{path}.initial_lr"), c.initial_lr);
        self.non_negative(&format!("{path}.convergence_tol"), c.convergence_tol);
        if !(c.lr_decay > 0.0 && c.lr_decay <= 1.0) {
            self.push(&format!("{path}.lr_decay"), format!("must lie in (0, 1], got {}", c.lr_decay));
        }
        if !(c.momentum >= 0.0 && c.momentum < 1.0) {
            self.push(&format!("{path}.momentum"), format!("must lie in [0, 1), got {}", c.momentum));
        }
    }

    fn embed(&mut self, path: &str, c: &EmbedConfig) {
        self.count(&format!("{path}.dim"), c.dim);
        self.count(&format!("{path}.epochs"), c.epochs);
        self.count(&format!("{path}.negatives_per_pair"), c.negatives_per_pair);
        self.positive(&format!("{path}.learning_rate"), c.learning_rate);
        self.positive(&format!("{path}.burn_in_lr_divisor"), c.burn_in_lr_divisor);
        self.positive(&format!("{path}.init_scale"), c.init_scale);
        self.positive(&format!("{path}.max_radius"), c.max_radius);
    }

    fn splits(&mut self, path: &str, s: &SplitPlan, node_count: Option<usize>) {
        if s.test_sizes.is_empty() {
            self.push(&format!("{path}.test_sizes"), "must not be empty");
        }
        for (k, &t) in s.test_sizes.iter().enumerate() {
            self.count(&format!("{path}.test_sizes[{k}]"), t);
            if let Some(n) = node_count {
                if t >= n {
                    self.push(&format!("{path}.test_sizes[{k}]"), format!("must be below the node count {n}"));
                }
            }
        }
        self.count(&format!("{path}.repeats"), s.repeats);
        self.unit_open(&format!("{path}.validation_ratio"), s.validation_ratio);
    }

    fn widths(&mut self, path: &str, w: &[usize]) {
        for (k, &v) in w.iter().enumerate() {
            self.count(&format!("{path}[{k}]"), v);
        }
    }

    fn synthetic(&mut self, path: &str, s: &SyntheticConfig) {
        if s.node_count < 12 {
            self.push(&format!("{path}.node_count"), "must be at least 12");
        }
        self.count(&format!("{path}.feature_dim"), s.feature_dim);
        if s.feature_dim > s.node_count {
            self.push(&format!("{path}.feature_dim"), "must not exceed node_count");
        }
        self.embed(&format!("{path}.embed"), &s.embed);
        for (k, v) in s.embed_learning_rates.iter().enumerate() {
            self.positive(&format!("{path}.embed_learning_rates[{k}]"), *v);
        }
    }
}

/// Every problem that would stop `command` from running. Input files are
/// checked for existence here so no work starts on a bad config.
pub fn validate_config(cfg: &RunConfig, command: Command) -> Vec<Diagnostic> {
    let mut c = Checker { out: Vec::new() };
    if cfg.version != CONFIG_VERSION {
        c.push("version", format!("unsupported version {} (expected {CONFIG_VERSION})", cfg.version));
    }
    match command {
        Command::Synth => {
            let s = &cfg.synth;
            if s.node_count < 12 {
                c.push("synth.node_count", "must be at least 12");
            }
            c.count("synth.feature_dim", s.feature_dim);
            if s.feature_dim > s.node_count {
                c.push("synth.feature_dim", "must not exceed node_count");
            }
            c.splits("synth.splits", &s.splits, Some(s.node_count));
        }
        Command::Embed => {
            c.file("embed.edges", &cfg.embed.edges);
            c.embed("embed.config", &cfg.embed.config);
            for (k, v) in cfg.embed.learning_rates.iter().enumerate() {
                c.positive(&format!("embed.learning_rates[{k}]"), *v);
            }
        }
        Command::Fit => {
            let f = &cfg.fit;
            c.file("fit.features", &f.features);
            c.file("fit.embeddings", &f.embeddings);
            if let Some(m) = &f.manifest {
                c.existing("fit.manifest", m);
            }
            c.grid("fit.grid", &f.grid);
            c.inference("fit.cv_inference", &f.cv_inference);
            c.unit_open("fit.validation_ratio", f.validation_ratio);
            c.widths("fit.nn_hidden", &f.nn_hidden);
            c.train("fit.nn_train", &f.nn_train);
        }
        Command::Predict => {
            let p = &cfg.predict;
            c.file("predict.model_path", &p.model_path);
            c.file("predict.features", &p.features);
            if let Some(m) = &p.manifest {
                c.existing("predict.manifest", m);
            }
            c.inference("predict.inference", &p.inference);
        }
        Command::Evaluate => {
            c.file("evaluate.edges", &cfg.evaluate.edges);
            c.file("evaluate.embeddings", &cfg.evaluate.embeddings);
            if let Some(p) = &cfg.evaluate.predictions {
                c.existing("evaluate.predictions", p);
            }
        }
        Command::ExpansionExperiment => {
            let e = &cfg.expansion;
            match &e.data {
                Some(d) => {
                    c.existing("expansion.data.edges", &d.edges);
                    c.existing("expansion.data.features", &d.features);
                    if let Some(p) = &d.embeddings {
                        c.existing("expansion.data.embeddings", p);
                    } else {
                        c.embed("expansion.synthetic.embed", &e.synthetic.embed);
                    }
                }
                None => c.synthetic("expansion.synthetic", &e.synthetic),
            }
            let x = &e.experiment;
            if x.models.is_empty() {
                c.push("expansion.experiment.models", "must name at least one of hsp, krls, nng, nne");
            }
            let n = e.data.is_none().then_some(e.synthetic.node_count);
            c.splits("expansion.experiment.splits", &x.splits, n);
            c.grid("expansion.experiment.grid", &x.grid);
            c.inference("expansion.experiment.cv_inference", &x.cv_inference);
            c.inference("expansion.experiment.inference", &x.inference);
            c.widths("expansion.experiment.nn_hidden", &x.nn_hidden);
            c.train("expansion.experiment.nn_train", &x.nn_train);
        }
        Command::ClassifyExperiment => {
            let k = &cfg.classify;
            c.count("classify.groups", k.groups);
            c.count("classify.classes_per_group", k.classes_per_group);
            c.count("classify.feature_dim", k.feature_dim);
            c.unit_open("classify.test_fraction", k.test_fraction);
            c.positive("classify.noise", k.noise);
            c.non_negative("classify.group_spread", k.group_spread);
            c.non_negative("classify.class_spread", k.class_spread);
            let n_test = (k.test_fraction * k.examples as f64).round() as usize;
            if k.examples < n_test + 12 || n_test == 0 {
                c.push("classify.examples", "too few examples for a train/test split");
            }
            c.embed("classify.embed", &k.embed);
            c.grid("classify.grid", &k.grid);
            c.inference("classify.cv_inference", &k.cv_inference);
            c.inference("classify.inference", &k.inference);
        }
    }
    c.out
}

/// Replaces every RNG seed of the command's block.
pub fn apply_seed(cfg: &mut RunConfig, command: Command, seed: u64) {
    match command {
        Command::Synth => {
            cfg.synth.tree_seed = seed;
            cfg.synth.splits.rng_seed = seed;
        }
        Command::Embed => cfg.embed.config.rng_seed = seed,
        Command::Fit => cfg.fit.seed = seed,
        Command::Predict => cfg.predict.inference.rng_seed = seed,
        Command::Evaluate => {}
        Command::ExpansionExperiment => {
            let e = &mut cfg.expansion;
            e.synthetic.tree_seed = seed;
            e.synthetic.embed.rng_seed = seed;
            e.experiment.rng_seed = seed;
            e.experiment.splits.rng_seed = seed;
        }
        Command::ClassifyExperiment => cfg.classify.rng_seed = seed,
    }
}
