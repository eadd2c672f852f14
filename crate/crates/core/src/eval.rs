//! Ranking and classification metrics.
//!
//! Rankings order candidates by ascending geodesic distance to the query and
//! break ties by node identifier, so results never depend on insertion order.
//! Ranks are 1-based and exclude the query itself.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::embedding::ClosureGraph;
use crate::error::{invalid_argument, invalid_input, Result};
use crate::manifold::{raw, Geodesic, LorentzPoint};

/// Sorted 1-based ranks of the relevant candidates.
///
/// `candidates` holds `(distance, id, relevant)` for every candidate other
/// than the query.
fn relevant_ranks(candidates: &mut [(f64, &str, bool)]) -> Vec<usize> {
    candidates.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.2)
        .map(|(pos, _)| pos + 1)
        .collect()
}

/// Average of precision-at-rank over the sorted ranks of relevant items.
fn ap_from_ranks(ranks: &[usize]) -> f64 {
    let total: f64 = ranks.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / r as f64).sum();
    total / ranks.len() as f64
}

/// Average precision of `query`'s true neighbours among all other points.
pub fn average_precision(
    query: &str,
    points: &HashMap<String, LorentzPoint>,
    truth: &HashSet<String>,
) -> Result<f64> {
    let q = points
        .get(query)
        .ok_or_else(|| invalid_argument(format!("query '{query}' is not embedded")))?;
    let mut candidates: Vec<(f64, &str, bool)> = points
        .iter()
        .filter(|(id, _)| id.as_str() != query)
        .map(|(id, p)| (q.distance(p), id.as_str(), truth.contains(id)))
        .collect();
    let ranks = relevant_ranks(&mut candidates);
    if ranks.is_empty() {
        return Err(invalid_input(format!("query '{query}' has no embedded true neighbour")));
    }
    Ok(ap_from_ranks(&ranks))
}

/// Per-query detail row of a ranking evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDetail {
    pub node_id: String,
    pub average_precision: f64,
    /// Ranks of the true neighbours, ascending.
    pub neighbor_ranks: Vec<usize>,
}

/// Ranking metrics over a set of evaluated nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub map_score: f64,
    pub mean_rank: f64,
    pub details: Vec<NodeDetail>,
    /// Evaluated nodes without any embedded closure neighbour.
    pub excluded: Vec<String>,
}

/// mAP and mean rank of `predicted` nodes ranked against the pool
/// `context ∪ predicted` (predicted points replace context points with the
/// same identifier). Truth for each node is its set of closure neighbours.
pub fn map_and_mean_rank(
    predicted: &HashMap<String, LorentzPoint>,
    context: &HashMap<String, LorentzPoint>,
    g: &ClosureGraph,
) -> Result<RankingReport> {
    let mut pool: HashMap<&str, &LorentzPoint> = context.iter().map(|(k, v)| (k.as_str(), v)).collect();
    for (k, v) in predicted {
        if g.index_of(k).is_none() {
            return Err(invalid_argument(format!("predicted node '{k}' is not in the graph")));
        }
        pool.insert(k.as_str(), v);
    }
    let mut pool: Vec<(&str, &LorentzPoint)> = pool.into_iter().collect();
    pool.sort_unstable_by(|a, b| a.0.cmp(b.0));

    let mut queries: Vec<&String> = predicted.keys().collect();
    queries.sort();
    let mut details = Vec::with_capacity(queries.len());
    let mut excluded = Vec::new();
    for query in queries {
        let qi = g.index_of(query).expect("checked above");
        let q = predicted[query].coords();
        let mut candidates: Vec<(f64, &str, bool)> = pool
            .iter()
            .filter(|(id, _)| *id != query.as_str())
            .map(|(id, p)| {
                let relevant = g.index_of(id).is_some_and(|k| g.adjacent(qi, k));
                (raw::dist(q, p.coords()), *id, relevant)
            })
            .collect();
        let ranks = relevant_ranks(&mut candidates);
        if ranks.is_empty() {
            excluded.push(query.clone());
            continue;
        }
        details.push(NodeDetail {
            node_id: query.clone(),
            average_precision: ap_from_ranks(&ranks),
            neighbor_ranks: ranks,
        });
    }
    Ok(summarize(details, excluded))
}

fn summarize(details: Vec<NodeDetail>, excluded: Vec<String>) -> RankingReport {
    let n = details.len().max(1) as f64;
    let map_score = details.iter().map(|d| d.average_precision).sum::<f64>() / n;
    let (rank_sum, rank_count) = details.iter().fold((0usize, 0usize), |(s, c), d| {
        (s + d.neighbor_ranks.iter().sum::<usize>(), c + d.neighbor_ranks.len())
    });
    let mean_rank = if rank_count == 0 { 0.0 } else { rank_sum as f64 / rank_count as f64 };
    RankingReport { map_score, mean_rank, details, excluded }
}

/// Full ranking report of an embedding against its own closure, every node
/// a query. `flat` holds `width` coordinates per node in graph order.
pub fn reconstruction_report(g: &ClosureGraph, flat: &[f64], width: usize) -> RankingReport {
    let m = g.len();
    let mut details = Vec::with_capacity(m);
    let mut excluded = Vec::new();
    let mut candidates: Vec<(f64, &str, bool)> = Vec::with_capacity(m);
    for i in 0..m {
        let q = &flat[i * width..(i + 1) * width];
        candidates.clear();
        candidates.extend((0..m).filter(|&k| k != i).map(|k| {
            (raw::dist(q, &flat[k * width..(k + 1) * width]), g.id(k), g.adjacent(i, k))
        }));
        let ranks = relevant_ranks(&mut candidates);
        if ranks.is_empty() {
            excluded.push(g.id(i).to_string());
            continue;
        }
        details.push(NodeDetail {
            node_id: g.id(i).to_string(),
            average_precision: ap_from_ranks(&ranks),
            neighbor_ranks: ranks,
        });
    }
    summarize(details, excluded)
}

/// mAP of an embedding against its own closure.
pub fn reconstruction_map(g: &ClosureGraph, flat: &[f64], width: usize) -> f64 {
    reconstruction_report(g, flat, width).map_score
}

/// Nearest class embedding to a prediction; ties go to the smallest class id.
pub fn classify_nearest<'a, P: Geodesic>(f_out: &P, class_embeddings: &'a BTreeMap<String, P>) -> Result<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for (class, y) in class_embeddings {
        let d = f_out.distance(y);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((class.as_str(), d));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| invalid_argument("class set is empty"))
}

/// Micro- and macro-averaged F1 for single-label predictions. Macro F1
/// averages over classes present in `truth`.
pub fn f1_scores<T: Eq + Hash + Ord + Clone>(predictions: &[T], truth: &[T]) -> Result<(f64, f64)> {
    if predictions.len() != truth.len() {
        return Err(invalid_argument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(invalid_argument("no labels to score"));
    }
    #[derive(Default, Clone, Copy)]
    struct Counts {
        tp: usize,
        fp: usize,
        fn_: usize,
    }
    let mut per_class: BTreeMap<&T, Counts> = BTreeMap::new();
    for (p, t) in predictions.iter().zip(truth) {
        if p == t {
            per_class.entry(t).or_default().tp += 1;
        } else {
            per_class.entry(p).or_default().fp += 1;
            per_class.entry(t).or_default().fn_ += 1;
        }
    }
    let (tp, fp, fn_) = per_class
        .values()
        .fold((0, 0, 0), |(a, b, c), k| (a + k.tp, b + k.fp, c + k.fn_));
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 || tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let micro = f1(tp, fp, fn_);
    let present: HashSet<&T> = truth.iter().collect();
    let macro_sum: f64 = per_class
        .iter()
        .filter(|(c, _)| present.contains(*c))
        .map(|(_, k)| f1(k.tp, k.fp, k.fn_))
        .sum();
    Ok((micro, macro_sum / present.len() as f64))
}

/// Combined evaluation output, serialisable as JSON or an aligned table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_score: f64,
    pub mean_rank: f64,
    pub micro_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub details: Vec<NodeDetail>,
    pub excluded: Vec<String>,
}

impl From<RankingReport> for EvalReport {
    fn from(r: RankingReport) -> Self {
        Self {
            map_score: r.map_score,
            mean_rank: r.mean_rank,
            micro_f1: None,
            macro_f1: None,
            details: r.details,
            excluded: r.excluded,
        }
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12}{:>12}", "metric", "value");
        let _ = writeln!(out, "{:<12}{:>12.6}", "mAP", self.map_score);
        let _ = writeln!(out, "{:<12}{:>12.4}", "mean_rank", self.mean_rank);
        if let Some(v) = self.micro_f1 {
            let _ = writeln!(out, "{:<12}{:>12.6}", "micro_f1", v);
        }
        if let Some(v) = self.macro_f1 {
            let _ = writeln!(out, "{:<12}{:>12.6}", "macro_f1", v);
        }
        let _ = writeln!(out, "{:<12}{:>12}", "nodes", self.details.len());
        if !self.excluded.is_empty() {
            let _ = writeln!(out, "{:<12}{:>12}", "excluded", self.excluded.len());
        }
        out
    }

    /// Per-node rows: `node_id,ap,ranks` with ranks joined by spaces.
    pub fn details_csv(&self) -> String {
        let mut out = String::from("node_id,average_precision,neighbor_ranks\n");
        for d in &self.details {
            let ranks: Vec<String> = d.neighbor_ranks.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{},{:.17e},{}", d.node_id, d.average_precision, ranks.join(" "));
        }
        out
    }
}
