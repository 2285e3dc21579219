//! Bagging: map every anchor instance to the set of instances related to it
//! under teacher-embedding similarity (k-nearest neighbors or spherical
//! k-means) or under ground-truth labels.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{EncoderParams, FeatureSource};
use crate::rng::{keyed, Stream};
use crate::tensor::{dot, norm, Tensor};

/// Row-norm tolerance for embedding matrices.
pub const UNIT_TOLERANCE: f64 = 1e-5;

/// `N × D` matrix of unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * d || (n > 0 && d == 0) {
            return Err(Error::Dimension(format!(
                "{} values for {n}x{d} embeddings",
                values.len()
            )));
        }
        let m = Self { n, d, values };
        for r in 0..n {
            let nr = norm(m.row(r));
            if !nr.is_finite() || (nr - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::NotUnitNorm { row: r, norm: nr });
            }
        }
        Ok(m)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.rows(), t.cols(), t.values().to_vec())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n, self.d, self.values.clone())
    }

    /// `S_a = {v_a · v_i}` over all `i`.
    pub fn similarity_row(&self, anchor: usize) -> Vec<f64> {
        let va = self.row(anchor);
        (0..self.n).map(|i| dot(va, self.row(i))).collect()
    }
}

/// Embeds every row of `data` (un-augmented) in chunks of `chunk` rows.
pub fn extract_embeddings(
    params: &EncoderParams,
    data: &Dataset,
    source: FeatureSource,
    chunk: usize,
) -> Result<EmbeddingMatrix> {
    if data.input_dim() != params.spec.input_dim {
        return Err(Error::InputWidth {
            expected: params.spec.input_dim,
            got: data.input_dim(),
        });
    }
    let chunk = chunk.max(1);
    let mut values = Vec::new();
    let mut d = 0;
    for start in (0..data.len()).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(data.len())).collect();
        let feats = params.features(&data.rows(&idx), source)?;
        d = feats.cols();
        values.extend_from_slice(feats.values());
    }
    if data.is_empty() {
        d = match source {
            FeatureSource::Projection => params.spec.embed_dim,
            FeatureSource::Backbone => params.spec.backbone_dim(),
        };
    }
    EmbeddingMatrix::new(data.len(), d, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BagStrategy {
    Knn { k: usize },
    KMeans { clusters: usize },
    Labels { classes: usize },
}

impl BagStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            BagStrategy::Knn { .. } => "knn",
            BagStrategy::KMeans { .. } => "kmeans",
            BagStrategy::Labels { .. } => "labels",
        }
    }

    pub fn param(&self) -> usize {
        match *self {
            BagStrategy::Knn { k } => k,
            BagStrategy::KMeans { clusters } => clusters,
            BagStrategy::Labels { classes } => classes,
        }
    }

    pub fn from_parts(name: &str, param: usize) -> Option<Self> {
        match name {
            "knn" => Some(BagStrategy::Knn { k: param }),
            "kmeans" => Some(BagStrategy::KMeans { clusters: param }),
            "labels" => Some(BagStrategy::Labels { classes: param }),
            _ => None,
        }
    }
}

impl fmt::Display for BagStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.name(), self.param())
    }
}

/// Per-anchor sorted member lists; every bag contains its anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BagTable {
    strategy: BagStrategy,
    members: Vec<Vec<usize>>,
}

impl BagTable {
    /// Validates and wraps member lists.
    ///
    /// Checks: sorted unique in-range members, anchor membership, `K+1`
    /// members per knn bag, and for partition strategies that membership is
    /// symmetric with exactly `param` distinct bags.
    pub fn new(strategy: BagStrategy, members: Vec<Vec<usize>>) -> Result<Self> {
        let n = members.len();
        for (a, m) in members.iter().enumerate() {
            if m.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Bags(format!("bag {a} is not sorted and unique")));
            }
            if m.last().is_some_and(|&i| i >= n) {
                return Err(Error::Bags(format!("bag {a} references an index >= {n}")));
            }
            if m.binary_search(&a).is_err() {
                return Err(Error::Bags(format!("anchor {a} missing from its own bag")));
            }
        }
        match strategy {
            BagStrategy::Knn { k } => {
                if let Some(a) = members.iter().position(|m| m.len() != k + 1) {
                    return Err(Error::Bags(format!(
                        "knn bag {a} has {} members, expected {}",
                        members[a].len(),
                        k + 1
                    )));
                }
            }
            BagStrategy::KMeans { clusters: c } | BagStrategy::Labels { classes: c } => {
                // Each bag must equal the bag of its smallest member, and the
                // bags owned by those representatives must be disjoint.
                let mut owner = vec![usize::MAX; n];
                let mut blocks = 0;
                for (a, m) in members.iter().enumerate() {
                    if members[m[0]] != *m {
                        return Err(Error::Bags(format!("bag {a} is not a partition block")));
                    }
                    if m[0] == a {
                        blocks += 1;
                        for &i in m {
                            if owner[i] != usize::MAX {
                                return Err(Error::Bags(format!("index {i} belongs to two bags")));
                            }
                            owner[i] = a;
                        }
                    }
                }
                if blocks != c {
                    return Err(Error::Bags(format!("{blocks} distinct bags, header says {c}")));
                }
            }
        }
        Ok(Self { strategy, members })
    }

    pub fn strategy(&self) -> BagStrategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self, anchor: usize) -> &[usize] {
        &self.members[anchor]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.members.iter().map(Vec::as_slice)
    }

    /// Fraction of non-anchor members sharing the anchor's label.
    pub fn purity(&self, labels: &[u32]) -> f64 {
        let (mut same, mut total) = (0usize, 0usize);
        for (a, m) in self.members.iter().enumerate() {
            for &i in m.iter().filter(|&&i| i != a) {
                total += 1;
                same += usize::from(labels[i] == labels[a]);
            }
        }
        if total == 0 {
            1.0
        } else {
            same as f64 / total as f64
        }
    }
}

/// Descending score, then ascending index.
fn rank_order(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j))
}

/// `Ω_a = {a} ∪ top-K_{i≠a} v_a·v_i`, ties broken toward lower indices.
pub fn bag_knn(e: &EmbeddingMatrix, k: usize) -> Result<BagTable> {
    let n = e.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidParameter(format!(
            "knn bagging needs 1 <= K < N, got K={k}, N={n}"
        )));
    }
    let mut members = Vec::with_capacity(n);
    let mut candidates: Vec<usize> = Vec::with_capacity(n - 1);
    for a in 0..n {
        let scores = e.similarity_row(a);
        candidates.clear();
        candidates.extend((0..n).filter(|&i| i != a));
        let order = rank_order(&scores);
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, &order);
        }
        let mut bag: Vec<usize> = candidates[..k].to_vec();
        bag.push(a);
        bag.sort_unstable();
        members.push(bag);
    }
    BagTable::new(BagStrategy::Knn { k }, members)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub clusters: usize,
    /// Cluster index in `0..clusters` per instance.
    pub labels: Vec<usize>,
    /// `clusters × D` unit centroids.
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct KMeansOutcome {
    pub assignment: ClusterAssignment,
    pub bags: BagTable,
    /// `(1/N) Σ −v_iᵀ c_{q_i}` after each completed iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `(iteration, cluster)` pairs where an empty cluster was reseeded.
    pub reseeded: Vec<(usize, usize)>,
}

pub fn kmeans_objective(e: &EmbeddingMatrix, labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    if e.is_empty() {
        return 0.0;
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &q)| -dot(e.row(i), &centroids[q]))
        .sum();
    total / e.len() as f64
}

fn nearest_centroid(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (q, c) in centroids.iter().enumerate() {
        let s = dot(v, c);
        if s > best.1 {
            best = (q, s);
        }
    }
    best
}

/// Spherical Lloyd iterations on unit embeddings.
pub fn bag_kmeans(e: &EmbeddingMatrix, clusters: usize, max_iters: usize, seed: u64) -> Result<KMeansOutcome> {
    let n = e.len();
    if clusters == 0 || clusters > n {
        return Err(Error::InvalidParameter(format!(
            "kmeans needs 1 <= C <= N, got C={clusters}, N={n}"
        )));
    }
    let mut rng = keyed(seed, Stream::KMeans, 0, 0);
    let mut init: Vec<usize> = index::sample(&mut rng, n, clusters).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|&i| e.row(i).to_vec()).collect();
    let mut labels: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut reseeded = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..max_iters {
        let next: Vec<usize> = (0..n).map(|i| nearest_centroid(e.row(i), &centroids).0).collect();
        if next == labels {
            converged = true;
            break;
        }
        labels = next;
        iterations = it + 1;

        let mut sums = vec![vec![0.0; e.dim()]; clusters];
        let mut counts = vec![0usize; clusters];
        for (i, &q) in labels.iter().enumerate() {
            counts[q] += 1;
            sums[q].iter_mut().zip(e.row(i)).for_each(|(s, v)| *s += v);
        }
        for q in 0..clusters {
            let nr = norm(&sums[q]);
            if counts[q] > 0 && nr > 0.0 {
                centroids[q] = sums[q].iter().map(|s| s / nr).collect();
            }
        }
        for q in 0..clusters {
            if counts[q] == 0 {
                // Farthest point from its nearest centroid.
                let far = (0..n)
                    .min_by(|&i, &j| {
                        let si = nearest_centroid(e.row(i), &centroids).1;
                        let sj = nearest_centroid(e.row(j), &centroids).1;
                        si.total_cmp(&sj).then(i.cmp(&j))
                    })
                    .expect("n >= 1");
                centroids[q] = e.row(far).to_vec();
                reseeded.push((it, q));
            }
        }
        trace.push(kmeans_objective(e, &labels, &centroids));
    }
    if labels.is_empty() {
        labels = (0..n).map(|i| nearest_centroid(e.row(i), &centroids).0).collect();
    }

    let mut blocks: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &q) in labels.iter().enumerate() {
        blocks.entry(q).or_default().push(i);
    }
    let members = labels.iter().map(|q| blocks[q].clone()).collect();
    let bags = BagTable::new(BagStrategy::KMeans { clusters: blocks.len() }, members)?;
    Ok(KMeansOutcome {
        assignment: ClusterAssignment {
            clusters,
            labels,
            centroids,
        },
        bags,
        objective_trace: trace,
        iterations,
        converged,
        reseeded,
    })
}

/// `Ω_a = {i | y_i = y_a}`.
pub fn bag_labels(labels: &[u32]) -> Result<BagTable> {
    let mut blocks: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        blocks.entry(y).or_default().push(i);
    }
    let members = labels.iter().map(|y| blocks[y].clone()).collect();
    BagTable::new(BagStrategy::Labels { classes: blocks.len() }, members)
}

/// Builds bags with `strategy`; `labels` is consulted only by the label strategy.
pub fn bag_by_strategy(
    strategy: BagStrategy,
    e: &EmbeddingMatrix,
    labels: Option<&[u32]>,
    kmeans_max_iters: usize,
    seed: u64,
) -> Result<BagTable> {
    match strategy {
        BagStrategy::Knn { k } => bag_knn(e, k),
        BagStrategy::KMeans { clusters } => Ok(bag_kmeans(e, clusters, kmeans_max_iters, seed)?.bags),
        BagStrategy::Labels { .. } => {
            let labels = labels.ok_or_else(|| Error::Labels("label bagging needs labels".into()))?;
            if labels.len() != e.len() {
                return Err(Error::Labels(format!(
                    "{} labels for {} embeddings",
                    labels.len(),
                    e.len()
                )));
            }
            bag_labels(labels)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositiveDraw {
    pub index: usize,
    /// The bag was a singleton; the anchor stands in for its own positive.
    pub fallback: bool,
}

/// Uniform draw from `Ω_a \ {a}`.
pub fn sample_positive<R: Rng + ?Sized>(bags: &BagTable, anchor: usize, rng: &mut R) -> PositiveDraw {
    let m = bags.members(anchor);
    if m.len() <= 1 {
        return PositiveDraw {
            index: anchor,
            fallback: true,
        };
    }
    let pick = rng.random_range(0..m.len() - 1);
    let pos = m.iter().position(|&i| i == anchor).expect("anchor in bag");
    let index = if pick >= pos { m[pick + 1] } else { m[pick] };
    PositiveDraw { index, fallback: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        let d = rows[0].len();
        EmbeddingMatrix::new(rows.len(), d, rows.concat()).unwrap()
    }

    #[test]
    fn rejects_non_unit_rows() {
        assert!(matches!(
            EmbeddingMatrix::new(1, 2, vec![1.0, 1.0]),
            Err(Error::NotUnitNorm { row: 0, .. })
        ));
    }

    #[test]
    fn knn_orthogonal_rows_tie_to_lowest_index() {
        let e = emb(&[
            vec![1., 0., 0., 0.],
            vec![0., 1., 0., 0.],
            vec![0., 0., 1., 0.],
            vec![0., 0., 0., 1.],
        ]);
        let bags = bag_knn(&e, 1).unwrap();
        assert_eq!(bags.members(0), &[0, 1]);
        assert_eq!(bags.members(1), &[0, 1]);
        assert_eq!(bags.members(3), &[0, 3]);
    }

    #[test]
    fn knn_picks_closest_neighbor() {
        let e = emb(&[
            vec![1., 0.],
            vec![0.866, 0.5]
                .iter()
                .map(|v| v / (0.866f64 * 0.866 + 0.25).sqrt())
                .collect(),
            vec![0., 1.],
        ]);
        assert_eq!(bag_knn(&e, 1).unwrap().members(0), &[0, 1]);
    }

    #[test]
    fn knn_exhaustive_and_errors() {
        let e = emb(&[vec![1., 0.], vec![0., 1.], vec![-1., 0.]]);
        let bags = bag_knn(&e, 2).unwrap();
        assert!(bags.iter().all(|m| m == [0, 1, 2]));
        assert!(bag_knn(&e, 3).is_err());
        assert!(bag_knn(&e, 0).is_err());
    }

    #[test]
    fn kmeans_separates_antipodal_groups() {
        let mut rows = Vec::new();
        for t in [0.0f64, 0.05, -0.05, 0.1] {
            rows.push(vec![t.cos(), t.sin()]);
            rows.push(vec![-t.cos(), -t.sin()]);
        }
        let e = emb(&rows);
        let out = bag_kmeans(&e, 2, 50, 1).unwrap();
        assert!(out.converged);
        assert_eq!(out.bags.members(0), &[0, 2, 4, 6]);
        assert_eq!(out.bags.members(1), &[1, 3, 5, 7]);
    }

    #[test]
    fn kmeans_single_and_singleton_clusters() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let t = i as f64;
                vec![t.cos(), t.sin()]
            })
            .collect();
        let e = emb(&rows);
        let one = bag_kmeans(&e, 1, 20, 0).unwrap();
        assert!(one.bags.iter().all(|m| m.len() == 6));
        let all = bag_kmeans(&e, 6, 20, 0).unwrap();
        for a in 0..6 {
            assert_eq!(all.bags.members(a), &[a]);
        }
        let j = kmeans_objective(&e, &all.assignment.labels, &all.assignment.centroids);
        assert!((j + 1.0).abs() < 1e-12);
        assert!(bag_kmeans(&e, 7, 20, 0).is_err());
    }

    #[test]
    fn label_bags() {
        let b = bag_labels(&[0, 0, 1]).unwrap();
        assert_eq!(b.members(0), &[0, 1]);
        assert_eq!(b.members(1), &[0, 1]);
        assert_eq!(b.members(2), &[2]);
        assert!(bag_labels(&[4; 5]).unwrap().iter().all(|m| m == [0, 1, 2, 3, 4]));
        let distinct = bag_labels(&[3, 1, 2]).unwrap();
        assert_eq!(distinct.members(1), &[1]);
    }

    #[test]
    fn table_validation() {
        assert!(BagTable::new(BagStrategy::Knn { k: 1 }, vec![vec![1], vec![0, 1]]).is_err());
        assert!(BagTable::new(BagStrategy::Knn { k: 1 }, vec![vec![0, 1], vec![0, 1]]).is_ok());
        assert!(BagTable::new(BagStrategy::Labels { classes: 1 }, vec![vec![0, 1], vec![1]]).is_err());
        assert!(BagTable::new(BagStrategy::Knn { k: 1 }, vec![vec![1, 0], vec![0, 1]]).is_err());
        assert!(BagTable::new(BagStrategy::Knn { k: 3 }, vec![]).is_ok());
    }

    #[test]
    fn positive_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = BagTable::new(BagStrategy::Knn { k: 1 }, vec![vec![0, 1], vec![0, 1]]).unwrap();
        for _ in 0..20 {
            assert_eq!(
                sample_positive(&pair, 0, &mut rng),
                PositiveDraw {
                    index: 1,
                    fallback: false
                }
            );
        }
        let single = bag_labels(&[0, 1]).unwrap();
        assert_eq!(
            sample_positive(&single, 1, &mut rng),
            PositiveDraw {
                index: 1,
                fallback: true
            }
        );
    }

    #[test]
    fn positive_sampling_is_uniform() {
        let bags = bag_labels(&[0, 0, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| sample_positive(&bags, 1, &mut rng).index == 0)
            .count();
        // Binomial(10^4, 0.5): σ = 50.
        assert!((hits as f64 - 5000.0).abs() < 150.0, "{hits}");
    }
}
