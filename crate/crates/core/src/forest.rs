//! Balanced random forest.
//!
//! Every tree is grown on a balanced bootstrap: each class contributes
//! `min_class_count` rows drawn with replacement. Nodes split on the best
//! Gini decrease among `⌊√d⌋` randomly drawn candidate features, thresholds
//! at midpoints between consecutive distinct values, `x[f] ≤ threshold`
//! going left. Equal gains resolve to the lower feature index, then the
//! lower threshold.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::emcorpus::derive_seed;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"EMWFRST1";
pub const FORMAT_VERSION: u32 = 1;
const LEAF: u32 = u32::MAX;
const TREE_TAG: u64 = 0x7472_6565;

const PREDICT_BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
    /// Candidate features per node; `None` means `⌊√d⌋`.
    #[serde(default)]
    pub max_features: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 500, max_depth: 15, min_leaf: 2, seed: 0, max_features: None }
    }
}

impl ForestParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_leaf == 0 {
            return Err(Error::InvalidArgument("n_trees and min_leaf must be at least 1".into()));
        }
        if self.max_features == Some(0) {
            return Err(Error::InvalidArgument("max_features must be at least 1".into()));
        }
        Ok(())
    }

    fn mtry(&self, d: usize) -> usize {
        self.max_features
            .unwrap_or(((d as f64).sqrt().floor() as usize).max(1))
            .min(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Split feature, or `u32::MAX` for a leaf.
    pub feature: u32,
    pub threshold: f64,
    /// Left child; for a leaf, the leaf index.
    pub left: u32,
    pub right: u32,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.feature == LEAF
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    /// Class counts, `n_classes` per leaf.
    pub leaf_counts: Vec<u32>,
    pub depth: usize,
    /// Rows drawn per class in this tree's bootstrap.
    pub bootstrap_tallies: Vec<u32>,
}

impl Tree {
    fn leaf(&self, x: &[f64]) -> usize {
        let mut n = 0usize;
        loop {
            let node = &self.nodes[n];
            if node.is_leaf() {
                return node.left as usize;
            }
            n = if x[node.feature as usize] <= node.threshold { node.left } else { node.right } as usize;
        }
    }

    pub fn n_leaves(&self, n_classes: usize) -> usize {
        self.leaf_counts.len() / n_classes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub classes: Vec<String>,
    pub n_features: usize,
    pub trees: Vec<Tree>,
    /// Weighted impurity decrease per feature, normalized to sum 1.
    pub importances: Vec<f64>,
}

fn gini(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

/// Row indices of tree `t`'s balanced bootstrap.
pub fn bootstrap_indices(y: &[usize], n_classes: usize, seed: u64, t: usize) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in y.iter().enumerate() {
        by_class[c].push(i);
    }
    let per = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TREE_TAG, t as u64]));
    let mut out = Vec::with_capacity(per * n_classes);
    for rows in &by_class {
        for _ in 0..per {
            out.push(rows[rng.random_range(0..rows.len())]);
        }
    }
    out
}

struct Grower<'a> {
    cols: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    params: &'a ForestParams,
    n_root: f64,
    importance: Vec<f64>,
    nodes: Vec<Node>,
    leaf_counts: Vec<u32>,
    depth: usize,
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
    n_left: usize,
}

impl Grower<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<u32> {
        let mut c = vec![0u32; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    fn push_leaf(&mut self, counts: &[u32]) -> u32 {
        let leaf = (self.leaf_counts.len() / self.n_classes) as u32;
        self.leaf_counts.extend_from_slice(counts);
        self.nodes.push(Node { feature: LEAF, threshold: 0.0, left: leaf, right: leaf });
        (self.nodes.len() - 1) as u32
    }

    fn best_split(&self, idx: &[usize], counts: &[u32], features: &[usize]) -> Option<Split> {
        let n = idx.len();
        let parent = gini(counts, n as u32);
        let min_leaf = self.params.min_leaf;
        let mut best: Option<Split> = None;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n);
        for &f in features {
            let col = &self.cols[f];
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (col[i], self.y[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0u32; self.n_classes];
            let mut right = counts.to_vec();
            for k in 0..n - 1 {
                let c = pairs[k].1;
                left[c] += 1;
                right[c] -= 1;
                let nl = k + 1;
                if pairs[k].0 == pairs[k + 1].0 || nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let nr = n - nl;
                let gain = parent
                    - (nl as f64 * gini(&left, nl as u32) + nr as f64 * gini(&right, nr as u32)) / n as f64;
                let better = match &best {
                    None => gain > 0.0,
                    Some(b) => gain > b.gain + 1e-12 * b.gain.abs().max(1e-300),
                };
                if better {
                    let (a, b) = (pairs[k].0, pairs[k + 1].0);
                    let mut threshold = a + (b - a) / 2.0;
                    if !(threshold < b) {
                        threshold = a;
                    }
                    best = Some(Split { feature: f, threshold, gain, n_left: nl });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        self.depth = self.depth.max(depth);
        let counts = self.counts(&idx);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.params.max_depth || idx.len() < 2 * self.params.min_leaf {
            return self.push_leaf(&counts);
        }
        let d = self.cols.len();
        let mut features = sample(rng, d, self.params.mtry(d)).into_vec();
        features.sort_unstable();
        let Some(split) = self.best_split(&idx, &counts, &features) else {
            return self.push_leaf(&counts);
        };
        self.importance[split.feature] += idx.len() as f64 / self.n_root * split.gain;
        let col = &self.cols[split.feature];
        let (left, right): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| col[i] <= split.threshold);
        debug_assert_eq!(left.len(), split.n_left);
        let at = self.nodes.len();
        self.nodes.push(Node { feature: split.feature as u32, threshold: split.threshold, left: 0, right: 0 });
        let l = self.grow(left, depth + 1, rng);
        let r = self.grow(right, depth + 1, rng);
        self.nodes[at].left = l;
        self.nodes[at].right = r;
        at as u32
    }
}

/// Class list (sorted, unique) and per-row class indices.
pub fn encode_labels<S: AsRef<str>>(y: &[S]) -> (Vec<String>, Vec<usize>) {
    let mut classes: Vec<String> = y.iter().map(|s| s.as_ref().to_string()).collect();
    classes.sort();
    classes.dedup();
    let idx = y
        .iter()
        .map(|s| classes.binary_search_by(|c| c.as_str().cmp(s.as_ref())).unwrap())
        .collect();
    (classes, idx)
}

pub fn train_forest<S: AsRef<str>>(x: &Matrix, y: &[S], params: &ForestParams) -> Result<ForestModel> {
    params.validate()?;
    if x.n_rows == 0 {
        return Err(Error::Empty("training matrix"));
    }
    if y.len() != x.n_rows {
        return Err(Error::DimensionMismatch { expected: x.n_rows, got: y.len() });
    }
    if let Some(i) = x.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite feature at row {}, column {}",
            i / x.n_cols,
            i % x.n_cols
        )));
    }
    let (classes, yi) = encode_labels(y);
    if classes.len() < 2 {
        return Err(Error::SingleClass(0));
    }
    let n_classes = classes.len();
    let cols: Vec<Vec<f64>> = (0..x.n_cols).map(|j| x.column(j)).collect();
    let grown: Vec<(Tree, Vec<f64>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let idx = bootstrap_indices(&yi, n_classes, params.seed, t);
            let mut tallies = vec![0u32; n_classes];
            for &i in &idx {
                tallies[yi[i]] += 1;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &[TREE_TAG, t as u64, 1]));
            let mut g = Grower {
                cols: &cols,
                y: &yi,
                n_classes,
                params,
                n_root: idx.len() as f64,
                importance: vec![0.0; x.n_cols],
                nodes: Vec::new(),
                leaf_counts: Vec::new(),
                depth: 0,
            };
            g.grow(idx, 0, &mut rng);
            let tree = Tree { nodes: g.nodes, leaf_counts: g.leaf_counts, depth: g.depth, bootstrap_tallies: tallies };
            (tree, g.importance)
        })
        .collect();
    let mut importances = vec![0.0; x.n_cols];
    let mut trees = Vec::with_capacity(grown.len());
    for (tree, imp) in grown {
        for (a, b) in importances.iter_mut().zip(imp) {
            *a += b;
        }
        trees.push(tree);
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        importances.iter_mut().for_each(|v| *v /= total);
    }
    Ok(ForestModel { params: params.clone(), classes, n_features: x.n_cols, trees, importances })
}

impl ForestModel {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    fn add_leaf(&self, tree: &Tree, leaf: usize, out: &mut [f64]) {
        let k = self.n_classes();
        let counts = &tree.leaf_counts[leaf * k..(leaf + 1) * k];
        let total: u32 = counts.iter().sum();
        for (o, c) in out.iter_mut().zip(counts) {
            *o += *c as f64 / total as f64;
        }
    }

    /// Mean of the per-tree leaf class frequencies.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, got: x.len() });
        }
        let mut out = vec![0.0; self.n_classes()];
        for t in &self.trees {
            self.add_leaf(t, t.leaf(x), &mut out);
        }
        let n = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }

    /// Posteriors for every row, walking one tree over all rows at a time.
    pub fn predict_proba_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.n_cols != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, got: x.n_cols });
        }
        let k = self.n_classes();
        let mut out = Matrix::zeros(x.n_rows, k);
        // Blocks of rows keep both the rows and the current tree in cache.
        // When a block has more rows than the tree has leaves, the leaf
        // frequencies are computed once per tree instead of once per row.
        let mut freqs = Vec::new();
        for start in (0..x.n_rows).step_by(PREDICT_BLOCK) {
            let end = (start + PREDICT_BLOCK).min(x.n_rows);
            for t in &self.trees {
                let n_leaves = t.n_leaves(k);
                if end - start < n_leaves {
                    for i in start..end {
                        self.add_leaf(t, t.leaf(x.row(i)), &mut out.data[i * k..(i + 1) * k]);
                    }
                    continue;
                }
                freqs.clear();
                for counts in t.leaf_counts.chunks_exact(k) {
                    let total: u32 = counts.iter().sum();
                    freqs.extend(counts.iter().map(|&c| c as f64 / total as f64));
                }
                for i in start..end {
                    let leaf = t.leaf(x.row(i));
                    for (o, f) in out.data[i * k..(i + 1) * k].iter_mut().zip(&freqs[leaf * k..(leaf + 1) * k]) {
                        *o += *f;
                    }
                }
            }
        }
        let n = self.trees.len() as f64;
        out.data.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }

    /// Index of the most probable class, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    pub fn feature_importance(&self) -> &[f64] {
        &self.importances
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            format_version: u32,
            params: &'a ForestParams,
            classes: &'a [String],
            n_features: usize,
            n_trees: usize,
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            params: &self.params,
            classes: &self.classes,
            n_features: self.n_features,
            n_trees: self.trees.len(),
        })
        .map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for t in &self.trees {
            w.write_all(&(t.nodes.len() as u32).to_le_bytes())?;
            w.write_all(&(t.leaf_counts.len() as u32).to_le_bytes())?;
            w.write_all(&(t.depth as u32).to_le_bytes())?;
            for n in &t.nodes {
                w.write_all(&n.feature.to_le_bytes())?;
                w.write_all(&n.threshold.to_le_bytes())?;
                w.write_all(&n.left.to_le_bytes())?;
                w.write_all(&n.right.to_le_bytes())?;
            }
            for c in t.leaf_counts.iter().chain(&t.bootstrap_tallies) {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for v in &self.importances {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_from(r: &mut impl Read) -> Result<ForestModel> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
            params: ForestParams,
            classes: Vec<String>,
            n_features: usize,
            n_trees: usize,
        }
        let fmt = |m: &str| Error::Format(format!("forest model: {m}"));
        let mut rd = |n: usize| -> Result<Vec<u8>> {
            let mut b = vec![0u8; n];
            r.read_exact(&mut b).map_err(|_| fmt("truncated"))?;
            Ok(b)
        };
        if rd(8)? != MAGIC {
            return Err(fmt("bad magic"));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let hlen = u32_of(&rd(4)?) as usize;
        let h: Header = serde_json::from_slice(&rd(hlen)?)?;
        if h.format_version != FORMAT_VERSION {
            return Err(fmt("unsupported version"));
        }
        let k = h.classes.len();
        let mut trees = Vec::with_capacity(h.n_trees);
        for _ in 0..h.n_trees {
            let head = rd(12)?;
            let (n_nodes, n_counts, depth) =
                (u32_of(&head[0..4]) as usize, u32_of(&head[4..8]) as usize, u32_of(&head[8..12]) as usize);
            let raw = rd(n_nodes * 20)?;
            let nodes = raw
                .chunks_exact(20)
                .map(|c| Node {
                    feature: u32_of(&c[0..4]),
                    threshold: f64::from_le_bytes(c[4..12].try_into().unwrap()),
                    left: u32_of(&c[12..16]),
                    right: u32_of(&c[16..20]),
                })
                .collect();
            let counts: Vec<u32> = rd((n_counts + k) * 4)?.chunks_exact(4).map(u32_of).collect();
            trees.push(Tree {
                nodes,
                leaf_counts: counts[..n_counts].to_vec(),
                depth,
                bootstrap_tallies: counts[n_counts..].to_vec(),
            });
        }
        let importances = rd(h.n_features * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|_| fmt("read error"))?;
        if !rest.is_empty() {
            return Err(fmt("trailing bytes"));
        }
        Ok(ForestModel { params: h.params, classes: h.classes, n_features: h.n_features, trees, importances })
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, sep: f64, seed: u64) -> (Matrix, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -sep } else { sep };
            rows.push(vec![centre + noise.sample(&mut rng), centre + noise.sample(&mut rng)]);
            y.push(format!("c{c}"));
        }
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    fn small(n_trees: usize) -> ForestParams {
        ForestParams { n_trees, ..Default::default() }
    }

    #[test]
    fn defaults() {
        let p = ForestParams::default();
        assert_eq!((p.n_trees, p.max_depth, p.min_leaf), (500, 15, 2));
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let (x, y) = blobs(200, 6.0, 1);
        let m = train_forest(&x, &y, &small(25)).unwrap();
        for (i, row) in x.rows().enumerate() {
            assert_eq!(m.classes[m.predict(row).unwrap()], y[i]);
        }
    }

    #[test]
    fn posteriors_sum_to_one_and_batch_agrees() {
        let (x, y) = blobs(120, 1.0, 2);
        let m = train_forest(&x, &y, &small(30)).unwrap();
        let batch = m.predict_proba_batch(&x).unwrap();
        for (i, row) in x.rows().enumerate() {
            let p = m.predict_proba(row).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, b) in p.iter().zip(batch.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(m.predict_proba(&[1.0]).is_err());
    }

    #[test]
    fn bootstrap_is_balanced() {
        let (x, mut y) = blobs(100, 2.0, 3);
        for v in y.iter_mut().take(30) {
            *v = "c2".into();
        }
        let m = train_forest(&x, &y, &small(10)).unwrap();
        let (_, yi) = encode_labels(&y);
        let min = (0..3).map(|c| yi.iter().filter(|&&v| v == c).count()).min().unwrap() as u32;
        for t in &m.trees {
            assert!(t.bootstrap_tallies.iter().all(|&c| c == min));
            assert!(t.depth <= 15);
        }
    }

    #[test]
    fn serialization_round_trips_byte_exact() {
        let (x, y) = blobs(80, 1.5, 4);
        let m = train_forest(&x, &y, &small(7)).unwrap();
        let bytes = m.to_bytes();
        let back = ForestModel::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(train_forest(&x, &y, &small(7)).unwrap().to_bytes(), bytes);
        assert!(ForestModel::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn single_class_and_empty_are_rejected() {
        let x = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        assert!(matches!(train_forest(&x, &["a", "a"], &small(1)), Err(Error::SingleClass(_))));
        assert!(train_forest(&Matrix::zeros(0, 1), &[] as &[&str], &small(1)).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.3, 0.3]), 1);
    }
}
