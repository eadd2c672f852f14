use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hypreg::data::{features_from_closure_pca, make_splits, synthetic_tree, EmbeddedDataset, Split};
use hypreg::embedding::{train_embedding_with_retry, EmbedConfig, EmbeddingState};
use hypreg::eval::{map_and_mean_rank, reconstruction_report, EvalReport};
use hypreg::experiment::{prepare_synthetic, run_classification, run_expansion, ModelKind, PreparedTaxonomy};
use hypreg::io::{self, SplitManifest};
use hypreg::manifold::{lorentz_to_poincare, poincare_to_lorentz, LorentzPoint, PoincarePoint};
use hypreg::neural::{self, MlpModel, OutputMode, TrainConfig};
use hypreg::regression::{
    cross_validate, cross_validate_holdout, hsp_predict_many, krls_predict, CvSelection, Decoder, InferenceConfig,
    KernelRegressor, BALL_EPS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Command, RunConfig};

const RESULTS_VERSION: u32 = 1;

fn write_results<T: Serialize>(out: &Path, command: &str, body: T, text: &str) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("schema_version".into(), RESULTS_VERSION.into());
    doc.insert("command".into(), command.into());
    match serde_json::to_value(body)? {
        serde_json::Value::Object(fields) => doc.extend(fields),
        other => {
            doc.insert("result".into(), other);
        }
    }
    fs::write(out.join("results.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    fs::write(out.join("results.txt"), text)?;
    print!("{text}");
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("{field} is not set"))
}

pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    log::info!("{} -> {}", command.block(), out.display());
    match command {
        Command::Synth => synth(cfg, out),
        Command::Embed => embed(cfg, out),
        Command::Fit => fit(cfg, out),
        Command::Predict => predict(cfg, out),
        Command::Evaluate => evaluate(cfg, out),
        Command::ExpansionExperiment => expansion(cfg, out),
        Command::ClassifyExperiment => classify(cfg, out),
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = &cfg.synth;
    let g = synthetic_tree(s.node_count, s.tree_seed).context("generating tree")?;
    let pca = features_from_closure_pca(&g, s.feature_dim).context("computing features")?;
    let splits = make_splits(g.len(), &g.roots(), &s.splits).context("drawing splits")?;
    io::write_edges(&out.join("edges.tsv"), &g)?;
    io::write_features(&out.join("features.tsv"), g.node_ids().iter().map(String::as_str).zip(pca.rows.iter().map(Vec::as_slice)))?;
    SplitManifest::from_splits(&g, &splits).write(&out.join("splits.json"))?;
    #[derive(Serialize)]
    struct Body {
        node_count: usize,
        edge_count: usize,
        closure_count: usize,
        feature_dim: usize,
        splits: usize,
    }
    let body = Body {
        node_count: g.len(),
        edge_count: g.edges().len(),
        closure_count: g.closure().len(),
        feature_dim: s.feature_dim,
        splits: splits.len(),
    };
    let text = format!(
        "nodes          {}\nedges          {}\nclosure pairs  {}\nfeature dim    {}\nsplits         {}\n",
        body.node_count, body.edge_count, body.closure_count, body.feature_dim, body.splits
    );
    write_results(out, "synth", body, &text)
}

fn embed(cfg: &RunConfig, out: &Path) -> Result<()> {
    let e = &cfg.embed;
    let g = io::read_graph(required(&e.edges, "embed.edges")?).context("reading edges")?;
    let (state, score) = train_embedding_with_retry(&g, &e.config, &e.learning_rates, e.target_map).context("training embedding")?;
    io::write_embedding_state(&out.join("embeddings.tsv"), &state)?;
    io::write_loss_csv(&out.join("loss.csv"), &state.loss_trace)?;
    #[derive(Serialize)]
    struct Body<'a> {
        node_count: usize,
        map_score: f64,
        learning_rate: f64,
        config: &'a EmbedConfig,
    }
    let text = format!("nodes  {}\nmAP    {score:.4}\n", g.len());
    write_results(out, "embed", Body { node_count: g.len(), map_score: score, learning_rate: state.config.learning_rate, config: &state.config }, &text)
}

fn read_map(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    Ok(io::read_features(path).with_context(|| format!("reading {}", path.display()))?.into_iter().collect())
}

fn read_points(path: &Path) -> Result<Vec<(String, LorentzPoint)>> {
    io::read_embeddings(path).with_context(|| format!("reading {}", path.display()))
}

/// `(features, targets)` of the named nodes.
fn rows(ids: &[String], feats: &HashMap<String, Vec<f64>>, targets: &HashMap<String, LorentzPoint>) -> Result<(Vec<Vec<f64>>, Vec<LorentzPoint>)> {
    ids.iter()
        .map(|id| {
            let x = feats.get(id).ok_or_else(|| anyhow!("node '{id}' has no features"))?;
            let y = targets.get(id).ok_or_else(|| anyhow!("node '{id}' has no embedding"))?;
            Ok((x.clone(), y.clone()))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

fn manifest_entry(path: &Path, index: usize) -> Result<hypreg::io::ManifestEntry> {
    let manifest = SplitManifest::read(path).with_context(|| format!("reading {}", path.display()))?;
    let n = manifest.splits.len();
    manifest.splits.into_iter().nth(index).ok_or_else(|| anyhow!("split_index {index} out of range ({n} splits)"))
}

fn fit(cfg: &RunConfig, out: &Path) -> Result<()> {
    let f = &cfg.fit;
    let feats = read_map(required(&f.features, "fit.features")?)?;
    let points = read_points(required(&f.embeddings, "fit.embeddings")?)?;
    let order: Vec<String> = points.iter().map(|(k, _)| k.clone()).collect();
    let targets: HashMap<String, LorentzPoint> = points.into_iter().collect();

    let (train_ids, val_ids) = match &f.manifest {
        Some(m) => {
            let entry = manifest_entry(m, f.split_index)?;
            (entry.train, Some(entry.validation))
        }
        None => (order, None),
    };
    let infer = InferenceConfig { rng_seed: f.seed, ..f.cv_inference.clone() };
    #[derive(Serialize)]
    struct Body {
        model: ModelKind,
        train_size: usize,
        selection: Option<CvSelection>,
        final_loss: Option<f64>,
    }
    let body = match f.model {
        ModelKind::Hsp | ModelKind::Krls => {
            let decoder = if f.model == ModelKind::Hsp { Decoder::Hsp } else { Decoder::Krls };
            let (x, y) = rows(&train_ids, &feats, &targets)?;
            let (sel, fit_x, fit_y) = match &val_ids {
                Some(v) => {
                    let (vx, vy) = rows(v, &feats, &targets)?;
                    let sel = cross_validate_holdout(&x, &y, &vx, &vy, &f.grid, decoder, &infer).context("cross-validation")?;
                    let (mut ax, mut ay) = (x, y);
                    ax.extend(vx);
                    ay.extend(vy);
                    (sel, ax, ay)
                }
                None => {
                    let sel = cross_validate(&x, &y, &f.grid, decoder, &infer, f.validation_ratio, f.seed).context("cross-validation")?;
                    (sel, x, y)
                }
            };
            let n = fit_x.len();
            let model = KernelRegressor::fit(fit_x, fit_y, sel.sigma, sel.lambda).context("fitting kernel model")?;
            model.save_json(&out.join("model.json"))?;
            Body { model: f.model, train_size: n, selection: Some(sel), final_loss: None }
        }
        ModelKind::Nng | ModelKind::Nne => {
            let mut ids = train_ids;
            ids.extend(val_ids.unwrap_or_default());
            let (x, y) = rows(&ids, &feats, &targets)?;
            let pairs: Vec<(Vec<f64>, PoincarePoint)> = x.into_iter().zip(y.iter().map(lorentz_to_poincare)).collect();
            let mode = if f.model == ModelKind::Nng { OutputMode::Geodesic } else { OutputMode::Euclidean };
            let mut dims = vec![pairs[0].0.len()];
            dims.extend(&f.nn_hidden);
            dims.push(pairs[0].1.dim());
            let mut rng = ChaCha8Rng::seed_from_u64(f.seed);
            let init = MlpModel::init(&dims, mode, &mut rng)?;
            let net = neural::train(init, &pairs, &TrainConfig { rng_seed: f.seed, ..f.nn_train.clone() }).context("training network")?;
            net.save_json(&out.join("model.json"))?;
            io::write_loss_csv(&out.join("loss.csv"), &net.loss_trace)?;
            Body { model: f.model, train_size: pairs.len(), selection: None, final_loss: net.loss_trace.last().copied() }
        }
    };
    let mut text = format!("model       {}\ntrain size  {}\n", body.model, body.train_size);
    if let Some(s) = &body.selection {
        text += &format!("sigma       {:.4e}\nlambda      {:.1e}\nlr          {:.1e}\nval error   {:.4}\n", s.sigma, s.lambda, s.learning_rate, s.validation_error);
    }
    if let Some(l) = body.final_loss {
        text += &format!("final loss  {l:.6}\n");
    }
    write_results(out, "fit", body, &text)
}

fn predict(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = &cfg.predict;
    let rows_all = io::read_features(required(&p.features, "predict.features")?).context("reading features")?;
    let ids: Vec<String> = match &p.manifest {
        Some(m) => manifest_entry(m, p.split_index)?.test,
        None => rows_all.iter().map(|(k, _)| k.clone()).collect(),
    };
    let feats: HashMap<String, Vec<f64>> = rows_all.into_iter().collect();
    let xs: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| feats.get(id).cloned().ok_or_else(|| anyhow!("node '{id}' has no features")))
        .collect::<Result<_>>()?;
    let model_path = required(&p.model_path, "predict.model_path")?;
    let mut converged = None;
    let preds: Vec<LorentzPoint> = match p.model {
        ModelKind::Hsp | ModelKind::Krls => {
            let model = KernelRegressor::load_json(model_path).context("loading kernel model")?;
            if p.model == ModelKind::Hsp {
                let res = hsp_predict_many(&model, &xs, &p.inference).context("HSP inference")?;
                converged = Some(res.iter().filter(|r| r.converged).count());
                res.into_iter().map(|r| r.point).collect()
            } else {
                xs.iter().map(|x| krls_predict(&model, x, BALL_EPS).map(|q| poincare_to_lorentz(&q))).collect::<hypreg::Result<_>>()?
            }
        }
        ModelKind::Nng | ModelKind::Nne => {
            let net = MlpModel::load_json(model_path).context("loading network")?;
            xs.iter().map(|x| neural::predict(&net, x, BALL_EPS).map(|q| poincare_to_lorentz(&q))).collect::<hypreg::Result<_>>()?
        }
    };
    io::write_embeddings(&out.join("predictions.tsv"), ids.iter().map(String::as_str).zip(preds.iter()))?;
    #[derive(Serialize)]
    struct Body {
        model: ModelKind,
        predictions: usize,
        converged: Option<usize>,
    }
    let mut text = format!("model        {}\npredictions  {}\n", p.model, ids.len());
    if let Some(c) = converged {
        text += &format!("converged    {c}/{}\n", ids.len());
    }
    write_results(out, "predict", Body { model: p.model, predictions: ids.len(), converged }, &text)
}

fn evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let e = &cfg.evaluate;
    let g = io::read_graph(required(&e.edges, "evaluate.edges")?).context("reading edges")?;
    let points = read_points(required(&e.embeddings, "evaluate.embeddings")?)?;
    let report = match &e.predictions {
        None => {
            let by_id: HashMap<String, LorentzPoint> = points.into_iter().collect();
            let ordered: Vec<LorentzPoint> = g
                .node_ids()
                .iter()
                .map(|id| by_id.get(id).cloned().ok_or_else(|| anyhow!("node '{id}' has no embedding")))
                .collect::<Result<_>>()?;
            let width = ordered[0].coords().len();
            let flat: Vec<f64> = ordered.iter().flat_map(|p| p.coords().iter().copied()).collect();
            reconstruction_report(&g, &flat, width)
        }
        Some(path) => {
            let predicted: HashMap<String, LorentzPoint> = read_points(path)?.into_iter().collect();
            let context: HashMap<String, LorentzPoint> = points.into_iter().filter(|(k, _)| !predicted.contains_key(k)).collect();
            if e.pool_predictions {
                map_and_mean_rank(&predicted, &context, &g)?
            } else {
                let mut merged = hypreg::eval::RankingReport { map_score: 0.0, mean_rank: 0.0, details: Vec::new(), excluded: Vec::new() };
                let mut keys: Vec<&String> = predicted.keys().collect();
                keys.sort();
                for k in keys {
                    let one = HashMap::from([(k.clone(), predicted[k].clone())]);
                    let r = map_and_mean_rank(&one, &context, &g)?;
                    merged.details.extend(r.details);
                    merged.excluded.extend(r.excluded);
                }
                let n = merged.details.len().max(1) as f64;
                merged.map_score = merged.details.iter().map(|d| d.average_precision).sum::<f64>() / n;
                let ranks: Vec<usize> = merged.details.iter().flat_map(|d| d.neighbor_ranks.iter().copied()).collect();
                merged.mean_rank = if ranks.is_empty() { 0.0 } else { ranks.iter().sum::<usize>() as f64 / ranks.len() as f64 };
                merged
            }
        }
    };
    let report = EvalReport::from(report);
    fs::write(out.join("details.csv"), report.details_csv())?;
    let text = report.to_text();
    write_results(out, "evaluate", &report, &text)
}

fn load_expansion_data(cfg: &RunConfig) -> Result<PreparedTaxonomy> {
    let e = &cfg.expansion;
    let Some(paths) = &e.data else {
        return prepare_synthetic(&e.synthetic).context("preparing synthetic taxonomy");
    };
    let g = io::read_graph(&paths.edges).context("reading edges")?;
    let feats = read_map(&paths.features)?;
    let (targets, score, trace): (HashMap<String, LorentzPoint>, f64, Vec<f64>) = match &paths.embeddings {
        Some(p) => {
            let pts = read_points(p)?;
            let ordered: Vec<LorentzPoint> = {
                let m: HashMap<&str, &LorentzPoint> = pts.iter().map(|(k, v)| (k.as_str(), v)).collect();
                g.node_ids()
                    .iter()
                    .map(|id| m.get(id.as_str()).map(|p| (*p).clone()).ok_or_else(|| anyhow!("node '{id}' has no embedding")))
                    .collect::<Result<_>>()?
            };
            let state = EmbeddingState::from_points(g.node_ids().to_vec(), &ordered, EmbedConfig::default())?;
            let score = hypreg::embedding::embedding_map(&g, &state);
            (pts.into_iter().collect(), score, Vec::new())
        }
        None => {
            let s = &e.synthetic;
            let (state, score) = train_embedding_with_retry(&g, &s.embed, &s.embed_learning_rates, s.target_map)?;
            let m = g.node_ids().iter().cloned().zip(state.points()).collect();
            (m, score, state.loss_trace)
        }
    };
    let dataset = EmbeddedDataset::from_maps(g, &feats, &targets)?;
    Ok(PreparedTaxonomy { dataset, embedding_map: score, loss_trace: trace })
}

fn expansion(cfg: &RunConfig, out: &Path) -> Result<()> {
    let prepared = load_expansion_data(cfg)?;
    let d = &prepared.dataset;
    if cfg.expansion.data.is_none() {
        io::write_edges(&out.join("edges.tsv"), &d.graph)?;
        io::write_features(&out.join("features.tsv"), d.graph.node_ids().iter().map(String::as_str).zip(d.features.iter().map(Vec::as_slice)))?;
    }
    io::write_embeddings(&out.join("embeddings.tsv"), d.graph.node_ids().iter().map(String::as_str).zip(d.targets.iter()))?;
    if !prepared.loss_trace.is_empty() {
        io::write_loss_csv(&out.join("loss.csv"), &prepared.loss_trace)?;
    }
    let x = &cfg.expansion.experiment;
    let splits: Vec<Split> = make_splits(d.len(), &d.graph.roots(), &x.splits).context("drawing splits")?;
    SplitManifest::from_splits(&d.graph, &splits).write(&out.join("splits.json"))?;
    let results = run_expansion(d, prepared.embedding_map, x).context("running expansion protocol")?;
    let text = results.to_text();
    write_results(out, "expansion-experiment", &results, &text)
}

fn classify(cfg: &RunConfig, out: &Path) -> Result<()> {
    let results = run_classification(&cfg.classify).context("running classification")?;
    if results.predictions.is_empty() {
        bail!("no test predictions");
    }
    let text = results.to_text();
    write_results(out, "classify-experiment", &results, &text)
}
