//! Taxonomy embeddings in the Lorentz model.
//!
//! A taxonomy is stored as a [`ClosureGraph`]: its `is-a` edges, their
//! transitive closure, and a similarity function that is 1 for pairs related
//! in the closure and 0 otherwise, optionally overridden by a Gaussian kernel
//! on node features (augmented hierarchies).
//!
//! Embeddings minimise, for every related pair `(i, j)`, the ranking loss
//! `-log( exp(-d(u_i,u_j)) / sum_{k in N(i,j)} exp(-d(u_i,u_k)) )` where
//! `N(i,j)` holds `j` plus a random subset of nodes less similar to `i` than
//! `j` is. Updates follow Riemannian SGD through the exponential map.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_argument, invalid_input, Result};
use crate::manifold::{raw, LorentzPoint, TangentVector};

/// A taxonomy with its transitive closure and pairwise similarity.
#[derive(Debug, Clone)]
pub struct ClosureGraph {
    node_ids: Vec<String>,
    index: HashMap<String, usize>,
    /// `(child, parent)` pairs.
    edges: Vec<(usize, usize)>,
    /// `(descendant, ancestor)` pairs, sorted.
    closure: Vec<(usize, usize)>,
    /// Row-major `m x m`, symmetric.
    adjacency: Vec<bool>,
    features: Vec<Option<Vec<f64>>>,
    sigma: Option<f64>,
}

impl ClosureGraph {
    /// Builds the graph from `(child, parent)` index pairs.
    pub fn from_edges(node_ids: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let m = node_ids.len();
        let mut index = HashMap::with_capacity(m);
        for (k, id) in node_ids.iter().enumerate() {
            if index.insert(id.clone(), k).is_some() {
                return Err(invalid_input(format!("duplicate node id '{id}'")));
            }
        }
        let mut edges: Vec<(usize, usize)> = edges.to_vec();
        edges.sort_unstable();
        edges.dedup();
        if let Some(&(c, p)) = edges.iter().find(|(c, p)| *c >= m || *p >= m) {
            return Err(invalid_input(format!("edge ({c}, {p}) references a missing node")));
        }
        let closure = transitive_closure(&edges, m).map_err(|e| match e {
            ClosureError::Cycle(node) => {
                invalid_input(format!("cycle detected through node '{}'", node_ids[node]))
            }
        })?;
        let mut adjacency = vec![false; m * m];
        for &(a, b) in &closure {
            adjacency[a * m + b] = true;
            adjacency[b * m + a] = true;
        }
        Ok(Self {
            node_ids,
            index,
            edges,
            closure,
            adjacency,
            features: vec![None; m],
            sigma: None,
        })
    }

    /// Builds the graph from `(child, parent)` identifier pairs; nodes are
    /// numbered in order of first appearance.
    pub fn from_named_edges(pairs: &[(String, String)]) -> Result<Self> {
        let mut ids: Vec<String> = Vec::new();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut edges = Vec::with_capacity(pairs.len());
        for (child, parent) in pairs {
            let mut endpoints = [0usize; 2];
            for (slot, name) in [child, parent].into_iter().enumerate() {
                endpoints[slot] = *seen.entry(name.as_str()).or_insert_with(|| {
                    ids.push(name.clone());
                    ids.len() - 1
                });
            }
            edges.push((endpoints[0], endpoints[1]));
        }
        Self::from_edges(ids, &edges)
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.node_ids[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn closure(&self) -> &[(usize, usize)] {
        &self.closure
    }

    /// Whether `i` and `j` are related in the closure (either direction).
    #[inline]
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.len() + j]
    }

    /// Closure neighbours of `i`: ancestors and descendants.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let m = self.len();
        (0..m).filter(|&k| self.adjacency[i * m + k]).collect()
    }

    pub fn parents(&self, i: usize) -> Vec<usize> {
        self.edges.iter().filter(|(c, _)| *c == i).map(|(_, p)| *p).collect()
    }

    /// Nodes without a parent.
    pub fn roots(&self) -> Vec<usize> {
        let mut has_parent = vec![false; self.len()];
        for &(c, _) in &self.edges {
            has_parent[c] = true;
        }
        (0..self.len()).filter(|&k| !has_parent[k]).collect()
    }

    /// Nodes without a child.
    pub fn leaves(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.len()];
        for &(_, p) in &self.edges {
            has_child[p] = true;
        }
        (0..self.len()).filter(|&k| !has_child[k]).collect()
    }

    pub fn has_features(&self, i: usize) -> bool {
        self.sigma.is_some() && self.features[i].is_some()
    }

    /// Similarity used by the ranking loss: a Gaussian kernel on features when
    /// both nodes carry one, closure adjacency otherwise.
    #[inline]
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        if let (Some(sigma), Some(a), Some(b)) = (self.sigma, &self.features[i], &self.features[j]) {
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            return (-sq / (2.0 * sigma * sigma)).exp();
        }
        if self.adjacent(i, j) {
            1.0
        } else {
            0.0
        }
    }

    fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| invalid_argument(format!("unknown node id '{id}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosureError {
    /// A cycle passes through this node.
    Cycle(usize),
}

/// Transitive closure of `(child, parent)` edges over `node_count` nodes,
/// returned as sorted `(descendant, ancestor)` pairs.
pub fn transitive_closure(
    edges: &[(usize, usize)],
    node_count: usize,
) -> std::result::Result<Vec<(usize, usize)>, ClosureError> {
    let mut parents = vec![Vec::new(); node_count];
    for &(c, p) in edges {
        if c == p {
            return Err(ClosureError::Cycle(c));
        }
        parents[c].push(p);
    }

    // Iterative DFS with colouring; the finishing order gives ancestors before
    // descendants so each ancestor set is built from already-final parent sets.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark = vec![Mark::New; node_count];
    let mut order = Vec::with_capacity(node_count);
    for start in 0..node_count {
        if mark[start] != Mark::New {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        mark[start] = Mark::Active;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if *next < parents[node].len() {
                let p = parents[node][*next];
                *next += 1;
                match mark[p] {
                    Mark::New => {
                        mark[p] = Mark::Active;
                        stack.push((p, 0));
                    }
                    Mark::Active => return Err(ClosureError::Cycle(p)),
                    Mark::Done => {}
                }
            } else {
                mark[node] = Mark::Done;
                order.push(node);
                stack.pop();
            }
        }
    }

    let mut ancestors: Vec<Vec<usize>> = vec![Vec::new(); node_count];
    for &node in &order {
        let mut set: Vec<usize> = Vec::new();
        for &p in &parents[node] {
            set.push(p);
            set.extend_from_slice(&ancestors[p]);
        }
        set.sort_unstable();
        set.dedup();
        ancestors[node] = set;
    }
    let mut closure: Vec<(usize, usize)> = ancestors
        .iter()
        .enumerate()
        .flat_map(|(c, anc)| anc.iter().map(move |&a| (c, a)))
        .collect();
    closure.sort_unstable();
    Ok(closure)
}

/// Similarity of two nodes by identifier.
pub fn base_similarity(g: &ClosureGraph, i: &str, j: &str) -> Result<f64> {
    let (a, b) = (g.require(i)?, g.require(j)?);
    Ok(g.similarity(a, b))
}

/// A labelled example to attach below its class in an augmented hierarchy.
#[derive(Debug, Clone)]
pub struct AugmentExample {
    pub example_id: String,
    pub class_id: String,
    pub features: Vec<f64>,
}

/// Adds one node per example as a child of its class and registers Gaussian
/// feature similarities with bandwidth `sigma`. `features` may attach
/// feature vectors to existing nodes as well.
pub fn build_augmented(
    g: &ClosureGraph,
    features: &HashMap<String, Vec<f64>>,
    examples: &[AugmentExample],
    sigma: f64,
) -> Result<ClosureGraph> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid_argument(format!("sigma must be positive, got {sigma}")));
    }
    if examples.is_empty() && features.is_empty() {
        return Ok(g.clone());
    }
    let mut ids = g.node_ids.clone();
    let mut edges = g.edges.clone();
    let mut seen: HashSet<String> = ids.iter().cloned().collect();
    for ex in examples {
        let class = g
            .index_of(&ex.class_id)
            .ok_or_else(|| invalid_input(format!("example '{}' names unknown class '{}'", ex.example_id, ex.class_id)))?;
        if !seen.insert(ex.example_id.clone()) {
            return Err(invalid_input(format!("duplicate node id '{}'", ex.example_id)));
        }
        edges.push((ids.len(), class));
        ids.push(ex.example_id.clone());
    }
    let mut out = ClosureGraph::from_edges(ids, &edges)?;
    let dim = examples
        .first()
        .map(|e| e.features.len())
        .or_else(|| features.values().next().map(Vec::len));
    for (id, x) in features {
        let k = out.require(id)?;
        out.features[k] = Some(x.clone());
    }
    let base = g.len();
    for (offset, ex) in examples.iter().enumerate() {
        out.features[base + offset] = Some(ex.features.clone());
    }
    if out
        .features
        .iter()
        .flatten()
        .any(|x| Some(x.len()) != dim || x.iter().any(|v| !v.is_finite()))
    {
        return Err(invalid_input("feature vectors must be finite and of equal dimension"));
    }
    out.sigma = Some(sigma);
    Ok(out)
}

/// Hyperparameters for [`train_embedding`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_pair: usize,
    pub burn_in_epochs: usize,
    pub burn_in_lr_divisor: f64,
    pub init_scale: f64,
    /// Points are pulled back to this geodesic distance from the origin
    /// after every update.
    pub max_radius: f64,
    pub rng_seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: 5,
            learning_rate: 0.3,
            epochs: 1000,
            negatives_per_pair: 50,
            burn_in_epochs: 10,
            burn_in_lr_divisor: 10.0,
            init_scale: 1e-3,
            max_radius: 8.0,
            rng_seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.epochs == 0 || self.negatives_per_pair == 0 {
            return Err(invalid_argument("dim, epochs and negatives_per_pair must be positive"));
        }
        if !(self.learning_rate > 0.0)
            || !(self.burn_in_lr_divisor > 0.0)
            || !(self.init_scale > 0.0)
            || !(self.max_radius > 0.0)
        {
            return Err(invalid_argument(
                "learning_rate, burn_in_lr_divisor, init_scale and max_radius must be positive",
            ));
        }
        Ok(())
    }
}

/// Embedded taxonomy: one Lorentz point per node, stored contiguously.
#[derive(Debug, Clone)]
pub struct EmbeddingState {
    node_ids: Vec<String>,
    dim: usize,
    coords: Vec<f64>,
    pub config: EmbedConfig,
    /// Mean ranking loss per epoch.
    pub loss_trace: Vec<f64>,
}

impl EmbeddingState {
    /// Wraps existing points; all must share the same dimension.
    pub fn from_points(node_ids: Vec<String>, points: &[LorentzPoint], config: EmbedConfig) -> Result<Self> {
        if node_ids.len() != points.len() || points.is_empty() {
            return Err(invalid_argument("need one point per node id"));
        }
        let dim = points[0].dim();
        if points.iter().any(|p| p.dim() != dim) {
            return Err(invalid_argument("points have different dimensions"));
        }
        let coords = points.iter().flat_map(|p| p.coords().iter().copied()).collect();
        Ok(Self { node_ids, dim, coords, config, loss_trace: Vec::new() })
    }

    /// Spatial coordinates uniform in `[-scale, scale]`, time coordinate completed.
    pub fn random_init(node_ids: Vec<String>, config: EmbedConfig, rng: &mut impl Rng) -> Self {
        let n = config.dim;
        let scale = config.init_scale;
        let mut coords = vec![0.0; node_ids.len() * (n + 1)];
        for row in coords.chunks_mut(n + 1) {
            for c in &mut row[1..] {
                *c = rng.gen_range(-scale..=scale);
            }
            raw::reproject(row);
        }
        Self { node_ids, dim: n, coords, config, loss_trace: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    /// Intrinsic dimension `n`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> &[f64] {
        let w = self.dim + 1;
        &self.coords[idx * w..(idx + 1) * w]
    }

    pub fn point(&self, idx: usize) -> LorentzPoint {
        LorentzPoint::from_vec_unchecked(self.coords(idx).to_vec())
    }

    pub fn get(&self, id: &str) -> Option<LorentzPoint> {
        self.node_ids.iter().position(|n| n == id).map(|k| self.point(k))
    }

    pub fn points(&self) -> Vec<LorentzPoint> {
        (0..self.len()).map(|k| self.point(k)).collect()
    }

    pub(crate) fn flat(&self) -> &[f64] {
        &self.coords
    }
}

/// Draws negatives for a positive pair without per-call allocation.
#[derive(Debug, Default)]
pub struct NegativeSampler {
    stamp: Vec<u32>,
    epoch: u32,
    candidates: Vec<usize>,
}

impl NegativeSampler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fills `out` with up to `count` distinct nodes `l` with
    /// `similarity(i, l) < similarity(i, j)`, sampled uniformly without
    /// replacement, followed by `j`.
    pub fn sample(
        &mut self,
        g: &ClosureGraph,
        i: usize,
        j: usize,
        count: usize,
        rng: &mut impl Rng,
        out: &mut Vec<usize>,
    ) {
        out.clear();
        let m = g.len();
        if self.stamp.len() != m {
            self.stamp = vec![0; m];
            self.epoch = 0;
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 1;
        }
        let tag = self.epoch;
        let threshold = g.similarity(i, j);
        let eligible = |l: usize| l != i && l != j && g.similarity(i, l) < threshold;

        // Rejection sampling is uniform over distinct eligible nodes; if it
        // stalls, finish by drawing from the full eligible list.
        let max_attempts = 4 * count + 16;
        let mut attempts = 0;
        while out.len() < count && attempts < max_attempts && m > 0 {
            attempts += 1;
            let l = rng.gen_range(0..m);
            if self.stamp[l] == tag {
                continue;
            }
            if eligible(l) {
                self.stamp[l] = tag;
                out.push(l);
            }
        }
        if out.len() < count {
            self.candidates.clear();
            self.candidates
                .extend((0..m).filter(|&l| self.stamp[l] != tag && eligible(l)));
            let need = (count - out.len()).min(self.candidates.len());
            let (chosen, _) = self.candidates.partial_shuffle(rng, need);
            out.extend_from_slice(chosen);
        }
        out.push(j);
    }
}

/// Negative set `N(i, j)` by node index: sampled less-similar nodes plus `j`.
pub fn sample_negatives(g: &ClosureGraph, i: usize, j: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count + 1);
    NegativeSampler::new().sample(g, i, j, count, rng, &mut out);
    out
}

/// Loss of one positive pair and the Riemannian gradients it induces.
#[derive(Debug, Clone)]
pub struct PairGradients {
    pub loss: f64,
    /// `(node index, gradient at that node)`, anchor `i` first.
    pub grads: Vec<(usize, TangentVector)>,
}

#[derive(Debug, Default)]
struct PairScratch {
    dists: Vec<f64>,
    log_buf: Vec<f64>,
    /// `(1 + negatives) x (n + 1)`: anchor gradient then one per negative.
    grads: Vec<f64>,
}

/// Writes gradients into `scratch.grads` and returns the loss.
fn pair_loss_grads(flat: &[f64], width: usize, i: usize, negatives: &[usize], j: usize, scratch: &mut PairScratch) -> f64 {
    let k = negatives.len();
    scratch.dists.resize(k, 0.0);
    scratch.log_buf.resize(width, 0.0);
    scratch.grads.clear();
    scratch.grads.resize((k + 1) * width, 0.0);
    let ui = &flat[i * width..(i + 1) * width];

    let mut dmin = f64::INFINITY;
    let mut dj = 0.0;
    for (slot, &l) in negatives.iter().enumerate() {
        let ul = &flat[l * width..(l + 1) * width];
        let d = raw::dist(ui, ul);
        scratch.dists[slot] = d;
        dmin = dmin.min(d);
        if l == j {
            dj = d;
        }
    }
    let denom: f64 = scratch.dists.iter().map(|d| (dmin - d).exp()).sum();
    let loss = dj - dmin + denom.ln();

    let (anchor, rest) = scratch.grads.split_at_mut(width);
    for (slot, &l) in negatives.iter().enumerate() {
        let d = scratch.dists[slot];
        let p = (dmin - d).exp() / denom;
        let coef = if l == j { 1.0 - p } else { -p };
        if d < 1e-12 || coef == 0.0 {
            continue;
        }
        let ul = &flat[l * width..(l + 1) * width];
        // grad_u d(u, v) = -log_u(v) / d(u, v)
        raw::log_into(ui, ul, &mut scratch.log_buf);
        for (a, lg) in anchor.iter_mut().zip(&scratch.log_buf) {
            *a -= coef * lg / d;
        }
        raw::log_into(ul, ui, &mut scratch.log_buf);
        let g = &mut rest[slot * width..(slot + 1) * width];
        for (gv, lg) in g.iter_mut().zip(&scratch.log_buf) {
            *gv = -coef * lg / d;
        }
    }
    loss
}

/// Ranking loss of the pair `(i, j)` against `negatives` (which must contain
/// `j`) and the Riemannian gradients for `u_i` and every `u_k`.
pub fn ranking_loss_and_grads(state: &EmbeddingState, i: usize, j: usize, negatives: &[usize]) -> Result<PairGradients> {
    let m = state.len();
    if i >= m || negatives.iter().any(|&k| k >= m) {
        return Err(invalid_argument("node index out of range"));
    }
    if !negatives.contains(&j) {
        return Err(invalid_argument("negative set must contain the positive node"));
    }
    let width = state.dim + 1;
    let mut scratch = PairScratch::default();
    let loss = pair_loss_grads(&state.coords, width, i, negatives, j, &mut scratch);
    let mut grads = Vec::with_capacity(negatives.len() + 1);
    grads.push((i, TangentVector::from_parts_unchecked(state.point(i), scratch.grads[..width].to_vec())));
    for (slot, &k) in negatives.iter().enumerate() {
        let g = scratch.grads[(slot + 1) * width..(slot + 2) * width].to_vec();
        grads.push((k, TangentVector::from_parts_unchecked(state.point(k), g)));
    }
    Ok(PairGradients { loss, grads })
}

/// One Riemannian SGD update: `theta <- exp_theta(-lr * grad)` for every
/// touched node, followed by re-projection onto the hyperboloid.
pub fn rsgd_step(state: &mut EmbeddingState, grads: &[(usize, TangentVector)], learning_rate: f64) {
    let width = state.dim + 1;
    let mut step = vec![0.0; width];
    for (k, g) in grads {
        debug_assert_eq!(g.vec().len(), width);
        for (s, v) in step.iter_mut().zip(g.vec()) {
            *s = -learning_rate * v;
        }
        let row = &mut state.coords[k * width..(k + 1) * width];
        raw::exp_in_place(row, &step);
        raw::clip_radius(row, state.config.max_radius);
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_scratch(
    coords: &mut [f64],
    width: usize,
    i: usize,
    negatives: &[usize],
    grads: &[f64],
    lr: f64,
    max_radius: f64,
    step: &mut [f64],
) {
    let targets = std::iter::once(i).chain(negatives.iter().copied());
    for (slot, k) in targets.enumerate() {
        let g = &grads[slot * width..(slot + 1) * width];
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        for (s, v) in step.iter_mut().zip(g) {
            *s = -lr * v;
        }
        let row = &mut coords[k * width..(k + 1) * width];
        raw::exp_in_place(row, step);
        raw::clip_radius(row, max_radius);
    }
}

/// Positive training pairs: every closure pair in both orientations.
pub fn positive_pairs(g: &ClosureGraph) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(2 * g.closure().len());
    for &(a, b) in g.closure() {
        pairs.push((a, b));
        pairs.push((b, a));
    }
    pairs.sort_unstable();
    pairs
}

/// Trains an embedding of `g` from a small random initialisation.
pub fn train_embedding(g: &ClosureGraph, cfg: &EmbedConfig) -> Result<EmbeddingState> {
    cfg.validate()?;
    if g.is_empty() {
        return Err(invalid_input("cannot embed an empty graph"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut state = EmbeddingState::random_init(g.node_ids().to_vec(), cfg.clone(), &mut rng);
    let width = cfg.dim + 1;
    let mut pairs = positive_pairs(g);
    let mut sampler = NegativeSampler::new();
    let mut negatives = Vec::with_capacity(cfg.negatives_per_pair + 1);
    let mut scratch = PairScratch::default();
    let mut step = vec![0.0; width];

    for epoch in 0..cfg.epochs {
        let lr = if epoch < cfg.burn_in_epochs {
            cfg.learning_rate / cfg.burn_in_lr_divisor
        } else {
            cfg.learning_rate
        };
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        for &(i, j) in &pairs {
            sampler.sample(g, i, j, cfg.negatives_per_pair, &mut rng, &mut negatives);
            total += pair_loss_grads(&state.coords, width, i, &negatives, j, &mut scratch);
            apply_scratch(&mut state.coords, width, i, &negatives, &scratch.grads, lr, cfg.max_radius, &mut step);
        }
        let mean = if pairs.is_empty() { 0.0 } else { total / pairs.len() as f64 };
        if !mean.is_finite() {
            return Err(crate::Error::TrainingFailure {
                epoch,
                reason: "ranking loss is not finite".into(),
            });
        }
        state.loss_trace.push(mean);
        if epoch % 100 == 0 {
            log::debug!("embedding epoch {epoch}: loss {mean:.5}");
        }
    }
    Ok(state)
}

/// Mean average precision of an embedding against its own closure.
pub fn embedding_map(g: &ClosureGraph, state: &EmbeddingState) -> f64 {
    crate::eval::reconstruction_map(g, state.flat(), state.dim() + 1)
}

/// Trains once per learning rate, stopping early once `target_map` is reached,
/// and keeps the state with the highest mAP.
pub fn train_embedding_with_retry(
    g: &ClosureGraph,
    cfg: &EmbedConfig,
    learning_rates: &[f64],
    target_map: f64,
) -> Result<(EmbeddingState, f64)> {
    let mut best: Option<(EmbeddingState, f64)> = None;
    let rates: Vec<f64> = if learning_rates.is_empty() { vec![cfg.learning_rate] } else { learning_rates.to_vec() };
    for lr in rates {
        let attempt = EmbedConfig { learning_rate: lr, ..cfg.clone() };
        let state = train_embedding(g, &attempt)?;
        let score = embedding_map(g, &state);
        log::info!("embedding lr {lr}: mAP {score:.4}");
        let better = best.as_ref().map_or(true, |(_, s)| score > *s);
        if better {
            best = Some((state, score));
        }
        if score >= target_map {
            break;
        }
    }
    Ok(best.expect("at least one learning rate"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{grad_sq_dist_lorentz, lorentz_dist, lorentz_exp, lorentz_inner, lorentz_to_poincare};
    use approx::assert_abs_diff_eq;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("n{k}")).collect()
    }

    fn chain3() -> ClosureGraph {
        ClosureGraph::from_edges(ids(3), &[(1, 0), (2, 1)]).unwrap()
    }

    fn star5() -> ClosureGraph {
        ClosureGraph::from_edges(ids(5), &[(1, 0), (2, 0), (3, 0), (4, 0)]).unwrap()
    }

    #[test]
    fn closure_of_chain() {
        assert_eq!(transitive_closure(&[(0, 1), (1, 2)], 3).unwrap(), vec![(0, 1), (0, 2), (1, 2)]);
        assert!(transitive_closure(&[], 1).unwrap().is_empty());
    }

    #[test]
    fn closure_detects_cycles() {
        assert!(transitive_closure(&[(0, 1), (1, 2), (2, 0)], 3).is_err());
        assert!(transitive_closure(&[(1, 1)], 2).is_err());
        let err = ClosureGraph::from_edges(ids(2), &[(0, 1), (1, 0)]).unwrap_err();
        assert!(err.to_string().contains("cycle"));
    }

    #[test]
    fn closure_is_transitively_closed() {
        let g = ClosureGraph::from_edges(ids(7), &[(1, 0), (2, 0), (3, 1), (4, 1), (5, 3), (6, 5)]).unwrap();
        let set: HashSet<(usize, usize)> = g.closure().iter().copied().collect();
        for &(a, b) in g.edges() {
            assert!(set.contains(&(a, b)));
        }
        for &(a, b) in &set {
            for &(c, d) in &set {
                if b == c {
                    assert!(set.contains(&(a, d)));
                }
            }
            assert_ne!(a, b);
        }
        assert_eq!(g.roots(), vec![0]);
    }

    #[test]
    fn named_edges_keep_first_appearance_order() {
        let pairs = vec![("b".to_string(), "a".to_string()), ("c".to_string(), "b".to_string())];
        let g = ClosureGraph::from_named_edges(&pairs).unwrap();
        assert_eq!(g.node_ids(), &["b", "a", "c"]);
        assert_eq!(g.closure().len(), 3);
    }

    #[test]
    fn similarity_follows_closure() {
        let g = ClosureGraph::from_edges(ids(6), &[(1, 0), (2, 1), (3, 2), (4, 0), (5, 0)]).unwrap();
        assert_eq!(base_similarity(&g, "n1", "n0").unwrap(), 1.0);
        assert_eq!(base_similarity(&g, "n4", "n5").unwrap(), 0.0);
        // n3 -> n0 spans three edges
        assert_eq!(base_similarity(&g, "n3", "n0").unwrap(), 1.0);
        assert_eq!(base_similarity(&g, "n0", "n3").unwrap(), 1.0);
        assert!(base_similarity(&g, "zz", "n0").is_err());
    }

    #[test]
    fn augmentation() {
        let g = ClosureGraph::from_edges(ids(3), &[(1, 0), (2, 0)]).unwrap();
        let same = build_augmented(&g, &HashMap::new(), &[], 1.0).unwrap();
        assert_eq!(same.len(), 3);
        assert_eq!(same.closure(), g.closure());

        let ex = |id: &str, class: &str, x: Vec<f64>| AugmentExample {
            example_id: id.into(),
            class_id: class.into(),
            features: x,
        };
        let aug = build_augmented(&g, &HashMap::new(), &[ex("e0", "n1", vec![0.5, 1.0])], 1.0).unwrap();
        assert_eq!(aug.len(), 4);
        let e0 = aug.index_of("e0").unwrap();
        assert!(aug.closure().contains(&(e0, 1)));
        assert!(aug.closure().contains(&(e0, 0)));
        assert_eq!(aug.closure().len(), g.closure().len() + 2);

        let aug = build_augmented(
            &g,
            &HashMap::new(),
            &[ex("e0", "n1", vec![0.5, 1.0]), ex("e1", "n2", vec![0.5, 1.0]), ex("e2", "n2", vec![1.5, 1.0])],
            1.0,
        )
        .unwrap();
        let (e0, e1, e2) = (aug.index_of("e0").unwrap(), aug.index_of("e1").unwrap(), aug.index_of("e2").unwrap());
        assert_eq!(aug.similarity(e0, e1), 1.0);
        assert_abs_diff_eq!(aug.similarity(e1, e2), (-0.5f64).exp(), epsilon = 1e-15);
        // class nodes carry no features: fall back to closure similarity
        assert_eq!(aug.similarity(e2, 2), 1.0);
        assert_eq!(aug.similarity(e2, 1), 0.0);

        assert!(build_augmented(&g, &HashMap::new(), &[ex("e0", "missing", vec![0.0])], 1.0).is_err());
        assert!(build_augmented(&g, &HashMap::new(), &[ex("e0", "n1", vec![0.0])], 0.0).is_err());
    }

    #[test]
    fn negatives_on_star() {
        let g = star5();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // centre 0 is adjacent to everything: no negatives exist
        assert_eq!(sample_negatives(&g, 0, 1, 10, &mut rng), vec![1]);
        // leaf 1 with positive 0: the other leaves are the only negatives
        let mut got = sample_negatives(&g, 1, 0, 10, &mut rng);
        assert_eq!(got.pop(), Some(0));
        got.sort_unstable();
        assert_eq!(got, vec![2, 3, 4]);
        assert_eq!(sample_negatives(&g, 1, 0, 0, &mut rng), vec![0]);
    }

    #[test]
    fn negatives_are_distinct_and_deterministic() {
        let edges: Vec<(usize, usize)> = (1..40).map(|k| (k, (k - 1) / 3)).collect();
        let g = ClosureGraph::from_edges(ids(40), &edges).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_negatives(&g, 39, 0, 20, &mut rng)
        };
        let a = draw(4);
        assert_eq!(a, draw(4));
        let set: HashSet<usize> = a.iter().copied().collect();
        assert_eq!(set.len(), a.len());
        assert_eq!(a.len(), 21);
        for &l in &a[..20] {
            assert!(!g.adjacent(39, l) && l != 39);
        }
    }

    fn state_from(points: &[Vec<f64>]) -> EmbeddingState {
        let pts: Vec<LorentzPoint> = points.iter().map(|s| LorentzPoint::from_spatial(s)).collect();
        EmbeddingState::from_points(ids(points.len()), &pts, EmbedConfig::default()).unwrap()
    }

    #[test]
    fn singleton_negative_set_has_zero_loss() {
        let s = state_from(&[vec![0.1, 0.2], vec![-0.3, 0.4]]);
        let out = ranking_loss_and_grads(&s, 0, 1, &[1]).unwrap();
        assert_abs_diff_eq!(out.loss, 0.0, epsilon = 1e-15);
        for (_, g) in &out.grads {
            assert!(g.vec().iter().all(|v| v.abs() < 1e-15));
        }
        assert!(ranking_loss_and_grads(&s, 0, 1, &[0]).is_err());
    }

    #[test]
    fn equal_distances_give_log_two() {
        let s = state_from(&[vec![0.0, 0.0], vec![0.5, 0.0], vec![-0.5, 0.0]]);
        let out = ranking_loss_and_grads(&s, 0, 1, &[2, 1]).unwrap();
        assert_abs_diff_eq!(out.loss, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn pair_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let points: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let s = state_from(&points);
        let negatives = [2, 3, 4, 5, 1];
        let out = ranking_loss_and_grads(&s, 0, 1, &negatives).unwrap();
        let loss_at = |st: &EmbeddingState| ranking_loss_and_grads(st, 0, 1, &negatives).unwrap().loss;
        let h = 1e-5;
        for (node, grad) in &out.grads {
            let u = s.point(*node);
            for dir in 0..3 {
                // unit tangent direction built from a spatial basis vector
                let mut e = vec![0.0; 4];
                e[dir + 1] = 1.0;
                let t = crate::manifold::tangent_project(&u, &e);
                let norm = t.lorentz_norm();
                let t = t.scaled(1.0 / norm);
                let moved = |sign: f64| {
                    let mut st = s.clone();
                    let p = lorentz_exp(&u, &t.scaled(sign * h)).unwrap();
                    let w = st.dim + 1;
                    st.coords[node * w..(node + 1) * w].copy_from_slice(p.coords());
                    loss_at(&st)
                };
                let fd = (moved(1.0) - moved(-1.0)) / (2.0 * h);
                let analytic = lorentz_inner(grad.vec(), t.vec()).unwrap();
                assert!(
                    (analytic - fd).abs() <= 1e-3 * fd.abs().max(1e-3),
                    "node {node} dir {dir}: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn rsgd_step_descends() {
        let mut s = state_from(&[vec![0.4, -0.2], vec![-0.5, 0.3]]);
        let v = s.point(1);
        let before = lorentz_dist(&s.point(0), &v);
        let g = grad_sq_dist_lorentz(&s.point(0), &v);
        rsgd_step(&mut s, &[(0, g.clone())], 0.05);
        assert!(lorentz_dist(&s.point(0), &v) < before);

        let snapshot = s.clone();
        rsgd_step(&mut s, &[(0, g.scaled(0.0))], 0.3);
        assert_eq!(s.coords, snapshot.coords);
        let g = grad_sq_dist_lorentz(&s.point(0), &v);
        rsgd_step(&mut s, &[(0, g)], 0.0);
        assert_eq!(s.coords, snapshot.coords);
    }

    #[test]
    fn chain_embedding_is_perfect_and_deterministic() {
        let g = chain3();
        let cfg = EmbedConfig { dim: 2, epochs: 500, learning_rate: 0.3, rng_seed: 3, ..EmbedConfig::default() };
        let s = train_embedding(&g, &cfg).unwrap();
        assert_eq!(embedding_map(&g, &s), 1.0);
        let again = train_embedding(&g, &cfg).unwrap();
        assert_eq!(s.coords, again.coords);
        for k in 0..s.len() {
            let c = s.coords(k);
            assert!((raw::inner(c, c) + 1.0).abs() <= 1e-9 * c[0] * c[0]);
        }
    }

    #[test]
    fn chain_loss_settles() {
        // On the 3-chain the only negatives for the leaf are absent, so most
        // pairs have zero loss; the trace must not drift upward at the end.
        let g = ClosureGraph::from_edges(ids(5), &[(1, 0), (2, 1), (3, 0), (4, 3)]).unwrap();
        let cfg = EmbedConfig { dim: 2, epochs: 400, rng_seed: 5, ..EmbedConfig::default() };
        let s = train_embedding(&g, &cfg).unwrap();
        let tail = &s.loss_trace[360..];
        let violations = tail.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
        assert!(violations as f64 <= 0.05 * tail.len() as f64 + 0.5 || tail.iter().all(|l| *l < 1e-2), "{tail:?}");
    }

    #[test]
    fn training_beats_random_and_centres_root() {
        let edges: Vec<(usize, usize)> = (1..31).map(|k| (k, (k - 1) / 2)).collect();
        let g = ClosureGraph::from_edges(ids(31), &edges).unwrap();
        let cfg = EmbedConfig { dim: 3, epochs: 300, rng_seed: 9, ..EmbedConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let random = EmbeddingState::random_init(g.node_ids().to_vec(), cfg.clone(), &mut rng);
        let trained = train_embedding(&g, &cfg).unwrap();
        let (before, after) = (embedding_map(&g, &random), embedding_map(&g, &trained));
        assert!(after > before, "{after} <= {before}");
        assert!(after > 0.9, "{after}");

        let norm = |k: usize| lorentz_to_poincare(&trained.point(k)).norm();
        let leaves = g.leaves();
        let mean_leaf = leaves.iter().map(|&k| norm(k)).sum::<f64>() / leaves.len() as f64;
        assert!(norm(0) < mean_leaf);
    }
}
