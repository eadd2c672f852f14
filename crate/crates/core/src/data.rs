//! Synthetic taxonomies, adjacency-PCA features and the split protocol.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::ClosureGraph;
use crate::error::{invalid_argument, invalid_input, Result};
use crate::manifold::LorentzPoint;

/// Mixes a base seed with stream coordinates (splitmix64 finaliser), so
/// independent tasks get independent, schedule-free RNG streams.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    stream.iter().fold(mix(base), |acc, &s| mix(acc ^ mix(s)))
}

/// Random recursive tree: node `k >= 1` attaches to a uniform node in
/// `0..k`. Returns `(child, parent)` pairs.
pub fn gen_random_tree(node_count: usize, rng_seed: u64) -> Result<Vec<(usize, usize)>> {
    if node_count < 2 {
        return Err(invalid_argument(format!("a tree needs at least 2 nodes, got {node_count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((1..node_count).map(|k| (k, rng.gen_range(0..k))).collect())
}

/// Node identifiers used for generated trees.
pub fn synthetic_ids(node_count: usize) -> Vec<String> {
    (0..node_count).map(|k| k.to_string()).collect()
}

/// Generated tree wrapped as a [`ClosureGraph`]; node 0 is the root.
pub fn synthetic_tree(node_count: usize, rng_seed: u64) -> Result<ClosureGraph> {
    let edges = gen_random_tree(node_count, rng_seed)?;
    ClosureGraph::from_edges(synthetic_ids(node_count), &edges)
}

/// Principal-component features of the symmetrised closure adjacency.
#[derive(Debug, Clone)]
pub struct PcaFeatures {
    /// One row of length `d` per node, in graph order.
    pub rows: Vec<Vec<f64>>,
    /// `m x d` projection matrix with orthonormal columns (zero columns
    /// beyond the rank).
    pub components: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

/// Projects each row of the column-centred closure adjacency matrix onto
/// its top `d` principal directions.
pub fn features_from_closure_pca(g: &ClosureGraph, d: usize) -> Result<PcaFeatures> {
    let m = g.len();
    if d == 0 || d > m {
        return Err(invalid_argument(format!("feature dimension must lie in 1..={m}, got {d}")));
    }
    let mut a = DMatrix::<f64>::from_fn(m, m, |i, j| if g.adjacent(i, j) { 1.0 } else { 0.0 });
    for mut col in a.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]).then(x.cmp(&y)));

    let s_max = order.first().map_or(0.0, |&k| svd.singular_values[k]);
    let mut components = DMatrix::<f64>::zeros(m, d);
    let mut singular_values = Vec::with_capacity(d);
    for (c, &k) in order.iter().take(d).enumerate() {
        let s = svd.singular_values[k];
        singular_values.push(s);
        if s <= 1e-10 * s_max.max(1.0) {
            continue;
        }
        let mut dir = v_t.row(k).transpose();
        // deterministic sign: largest-magnitude entry positive
        let pivot = dir.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            dir.neg_mut();
        }
        components.set_column(c, &dir);
    }
    singular_values.resize(d, 0.0);
    let projected = &a * &components;
    let rows = projected.row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok(PcaFeatures { rows, components, singular_values })
}

/// Mean distance from each point to its 10th nearest other point.
pub fn similarity_sigma(features: &[Vec<f64>]) -> Result<f64> {
    const K: usize = 10;
    if features.len() <= K {
        return Err(invalid_input(format!(
            "need at least {} points for the 10th-neighbour bandwidth, got {}",
            K + 1,
            features.len()
        )));
    }
    let mut dists = Vec::with_capacity(features.len());
    let mut total = 0.0;
    for (i, x) in features.iter().enumerate() {
        dists.clear();
        dists.extend(features.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, y)| {
            x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        }));
        let (_, kth, _) = dists.select_nth_unstable_by(K - 1, f64::total_cmp);
        total += *kth;
    }
    let sigma = total / features.len() as f64;
    if !(sigma > 0.0) {
        return Err(invalid_input("all points coincide with their 10 nearest neighbours"));
    }
    Ok(sigma)
}

/// Paired Euclidean features and Lorentz targets over a taxonomy.
#[derive(Debug, Clone)]
pub struct EmbeddedDataset {
    pub graph: ClosureGraph,
    /// Indexed like `graph.node_ids()`.
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<LorentzPoint>,
}

impl EmbeddedDataset {
    pub fn new(graph: ClosureGraph, features: Vec<Vec<f64>>, targets: Vec<LorentzPoint>) -> Result<Self> {
        let m = graph.len();
        if features.len() != m || targets.len() != m {
            return Err(invalid_input(format!(
                "{m} nodes but {} feature rows and {} targets",
                features.len(),
                targets.len()
            )));
        }
        let d = features.first().map_or(0, Vec::len);
        if features.iter().any(|f| f.len() != d || f.iter().any(|v| !v.is_finite())) {
            return Err(invalid_input("feature rows must be finite and of equal dimension"));
        }
        let n = targets.first().map_or(0, LorentzPoint::dim);
        if targets.iter().any(|t| t.dim() != n) {
            return Err(invalid_input("targets must share one dimension"));
        }
        Ok(Self { graph, features, targets })
    }

    /// Assembles a dataset from identifier-keyed maps.
    pub fn from_maps(
        graph: ClosureGraph,
        features: &HashMap<String, Vec<f64>>,
        targets: &HashMap<String, LorentzPoint>,
    ) -> Result<Self> {
        let mut f = Vec::with_capacity(graph.len());
        let mut t = Vec::with_capacity(graph.len());
        for id in graph.node_ids() {
            f.push(features.get(id).cloned().ok_or_else(|| invalid_input(format!("node '{id}' has no features")))?);
            t.push(targets.get(id).cloned().ok_or_else(|| invalid_input(format!("node '{id}' has no target")))?);
        }
        Self::new(graph, f, t)
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

/// Sizes and repetitions of the train/validation/test protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    pub test_sizes: Vec<usize>,
    pub repeats: usize,
    pub validation_ratio: f64,
    pub rng_seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self { test_sizes: vec![5, 10, 20, 30, 50], repeats: 20, validation_ratio: 0.2, rng_seed: 0 }
    }
}

impl SplitPlan {
    pub fn validate(&self, node_count: usize) -> Result<()> {
        if self.test_sizes.is_empty() || self.test_sizes.iter().any(|&t| t == 0 || t >= node_count) {
            return Err(invalid_argument(format!(
                "test sizes must be positive and below the node count {node_count}"
            )));
        }
        if self.repeats == 0 {
            return Err(invalid_argument("repeats must be positive"));
        }
        if !(self.validation_ratio > 0.0 && self.validation_ratio < 1.0) {
            return Err(invalid_argument("validation_ratio must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One train/validation/test partition, by node index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub test_size: usize,
    pub repetition: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws every `(test size, repetition)` split. Nodes in `never_test` (the
/// roots) are kept out of test sets; the validation set takes
/// `floor(ratio * (m - test))` of the remaining nodes.
pub fn make_splits(node_count: usize, never_test: &[usize], plan: &SplitPlan) -> Result<Vec<Split>> {
    plan.validate(node_count)?;
    let eligible: Vec<usize> = (0..node_count).filter(|k| !never_test.contains(k)).collect();
    let mut out = Vec::with_capacity(plan.test_sizes.len() * plan.repeats);
    for &test_size in &plan.test_sizes {
        if test_size > eligible.len() {
            return Err(invalid_argument(format!(
                "test size {test_size} exceeds the {} eligible nodes",
                eligible.len()
            )));
        }
        for repetition in 0..plan.repeats {
            let seed = derive_seed(plan.rng_seed, &[test_size as u64, repetition as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut test: Vec<usize> = sample(&mut rng, eligible.len(), test_size)
                .into_iter()
                .map(|k| eligible[k])
                .collect();
            test.sort_unstable();
            let mut rest: Vec<usize> = (0..node_count).filter(|k| test.binary_search(k).is_err()).collect();
            let n_val = (plan.validation_ratio * rest.len() as f64).floor() as usize;
            let picks = sample(&mut rng, rest.len(), n_val).into_vec();
            let mut in_val = vec![false; rest.len()];
            picks.iter().for_each(|&k| in_val[k] = true);
            let mut validation: Vec<usize> = picks.iter().map(|&k| rest[k]).collect();
            validation.sort_unstable();
            let mut flag = in_val.into_iter();
            rest.retain(|_| !flag.next().unwrap_or(false));
            out.push(Split { test_size, repetition, train: rest, validation, test });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::HashSet;

    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut y = x;
        while parent[y] != r {
            let next = parent[y];
            parent[y] = r;
            y = next;
        }
        r
    }

    #[test]
    fn tree_generation() {
        assert_eq!(gen_random_tree(2, 0).unwrap(), vec![(1, 0)]);
        assert!(gen_random_tree(1, 0).is_err());
        let a = gen_random_tree(226, 42).unwrap();
        assert_eq!(a, gen_random_tree(226, 42).unwrap());
        assert_eq!(a.len(), 225);
        // union-find: connected and acyclic
        let mut parent: Vec<usize> = (0..226).collect();
        for &(c, p) in &a {
            let (rc, rp) = (find(&mut parent, c), find(&mut parent, p));
            assert_ne!(rc, rp, "edge closes a cycle");
            parent[rc] = rp;
        }
        let root = find(&mut parent, 0);
        assert!((0..226).all(|k| find(&mut parent, k) == root));
        let g = synthetic_tree(226, 42).unwrap();
        assert!((500..5000).contains(&g.closure().len()), "{}", g.closure().len());
    }

    #[test]
    fn pca_on_chain() {
        let g = ClosureGraph::from_edges(synthetic_ids(3), &[(1, 0), (2, 1)]).unwrap();
        // a 3-chain's closure is complete: identical rows up to the diagonal
        let f = features_from_closure_pca(&g, 2).unwrap();
        assert_eq!(f.rows.len(), 3);
        for i in 0..3 {
            for j in (i + 1)..3 {
                let d: f64 = f.rows[i].iter().zip(&f.rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 1e-6);
            }
        }
    }

    #[test]
    fn pca_full_rank_is_isometric() {
        let g = synthetic_tree(30, 1).unwrap();
        let m = g.len();
        let f = features_from_closure_pca(&g, m).unwrap();
        let centred: Vec<Vec<f64>> = {
            let rows: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| if g.adjacent(i, j) { 1.0 } else { 0.0 }).collect()).collect();
            let means: Vec<f64> = (0..m).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
            rows.iter().map(|r| r.iter().zip(&means).map(|(v, mu)| v - mu).collect()).collect()
        };
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        for i in 0..m {
            for j in 0..m {
                assert_abs_diff_eq!(dist(&f.rows[i], &f.rows[j]), dist(&centred[i], &centred[j]), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pca_components_are_orthonormal() {
        let g = synthetic_tree(60, 2).unwrap();
        let f = features_from_closure_pca(&g, 10).unwrap();
        let gram = f.components.transpose() * &f.components;
        for i in 0..10 {
            for j in 0..10 {
                let expected = if i == j && f.singular_values[i] > 1e-10 { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[(i, j)], expected, epsilon = 1e-9);
            }
        }
        assert!(f.rows.iter().flatten().all(|v| v.is_finite()));
        assert!(f.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(features_from_closure_pca(&g, 61).is_err());
    }

    fn brute_sigma(points: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (i, x) in points.iter().enumerate() {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, y)| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            total += d[9];
        }
        total / points.len() as f64
    }

    #[test]
    fn sigma_on_simplex() {
        // 11 vertices of a regular simplex: scaled standard basis in R^11
        let pts: Vec<Vec<f64>> = (0..11).map(|i| (0..11).map(|j| if i == j { 2f64.sqrt() / 2.0 } else { 0.0 }).collect()).collect();
        assert_abs_diff_eq!(similarity_sigma(&pts).unwrap(), 1.0, epsilon = 1e-12);
        assert!(similarity_sigma(&pts[..10]).is_err());
    }

    #[test]
    fn sigma_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        assert_abs_diff_eq!(similarity_sigma(&pts).unwrap(), brute_sigma(&pts), epsilon = 1e-12);
        let doubled: Vec<Vec<f64>> = pts[..12].iter().flat_map(|p| [p.clone(), p.clone()]).collect();
        assert_abs_diff_eq!(similarity_sigma(&doubled).unwrap(), brute_sigma(&doubled), epsilon = 1e-12);
    }

    #[test]
    fn split_sizes_and_partition() {
        let plan = SplitPlan { test_sizes: vec![5], repeats: 20, rng_seed: 3, ..SplitPlan::default() };
        let splits = make_splits(226, &[0], &plan).unwrap();
        assert_eq!(splits.len(), 20);
        let s = &splits[0];
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (177, 44, 5));
        let mut distinct = HashSet::new();
        for s in &splits {
            assert!(!s.test.contains(&0));
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..226).collect::<Vec<_>>());
            distinct.insert(s.test.clone());
        }
        assert_eq!(distinct.len(), 20);
        assert_eq!(splits, make_splits(226, &[0], &plan).unwrap());
    }

    #[test]
    fn split_plan_validation() {
        let plan = SplitPlan { test_sizes: vec![300], ..SplitPlan::default() };
        assert!(make_splits(226, &[0], &plan).is_err());
        let plan = SplitPlan { validation_ratio: 1.0, ..SplitPlan::default() };
        assert!(plan.validate(226).is_err());
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, &[5, 0]), derive_seed(1, &[5, 1]));
        assert_ne!(derive_seed(1, &[5, 0]), derive_seed(2, &[5, 0]));
        assert_eq!(derive_seed(1, &[5, 0]), derive_seed(1, &[5, 0]));
    }
}
