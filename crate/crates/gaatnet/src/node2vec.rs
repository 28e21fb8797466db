//! Topology-only node embeddings: second-order biased random walks fed to
//! skip-gram with negative sampling. Used to produce the initial embedding
//! matrix consumed by the attention layers.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{substream_keyed, Stream};

#[derive(Debug, Clone)]
pub struct Node2VecConfig {
    /// Embedding dimension d0.
    pub dim: usize,
    pub walk_length: usize,
    pub walks_per_node: usize,
    /// Return parameter p: weight 1/p for stepping back to the previous node.
    pub return_param: f64,
    /// In-out parameter q: weight 1/q for stepping to a node not adjacent
    /// to the previous one.
    pub inout_param: f64,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Node2VecConfig {
    fn default() -> Self {
        Node2VecConfig {
            dim: 256,
            walk_length: 80,
            walks_per_node: 10,
            return_param: 1.0,
            inout_param: 1.0,
            window: 10,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WalkCorpus {
    pub walks: Vec<Vec<u32>>,
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub return_param: f64,
    pub inout_param: f64,
}

#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Self {
        assert!(values.iter().all(|v| v.is_finite()), "non-finite embedding");
        EmbeddingMatrix { values }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn num_nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Unnormalized second-order transition weights from `current`, having
/// arrived from `prev`: 1/p back to `prev`, 1 to common neighbors of
/// `prev`, 1/q to everything else.
fn transition_weights(g: &Graph, prev: u32, current: u32, p: f64, q: f64, out: &mut Vec<f64>) {
    out.clear();
    for &x in g.neighbors(current) {
        let w = if x == prev {
            1.0 / p
        } else if g.has_edge(prev, x) {
            1.0
        } else {
            1.0 / q
        };
        out.push(w);
    }
}

fn weighted_pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Generate `walks_per_node` second-order walks of length `walk_length`
/// from every non-isolated node. Walks are drawn from per-(round, node)
/// substreams, so generation parallelizes without changing the output.
pub fn generate_walks(
    g: &Graph,
    p: f64,
    q: f64,
    walk_length: usize,
    walks_per_node: usize,
    seed: u64,
) -> WalkCorpus {
    assert!(p > 0.0 && q > 0.0, "walk bias parameters must be positive");
    assert!(walk_length >= 2, "walk_length must be at least 2");
    let starts: Vec<u32> = (0..g.num_nodes() as u32)
        .filter(|&v| g.degree(v) > 0)
        .collect();
    let uniform = p == 1.0 && q == 1.0;
    let mut walks = Vec::with_capacity(starts.len() * walks_per_node);
    for round in 0..walks_per_node as u64 {
        let mut round_walks: Vec<Vec<u32>> = starts
            .par_iter()
            .map(|&start| {
                let mut rng = substream_keyed(seed, Stream::Walks, &[round, start as u64]);
                let mut walk = Vec::with_capacity(walk_length);
                walk.push(start);
                let first = g.neighbors(start);
                walk.push(first[rng.random_range(0..first.len())]);
                let mut weights = Vec::new();
                while walk.len() < walk_length {
                    let current = walk[walk.len() - 1];
                    let prev = walk[walk.len() - 2];
                    let neighbors = g.neighbors(current);
                    let next = if uniform {
                        neighbors[rng.random_range(0..neighbors.len())]
                    } else {
                        transition_weights(g, prev, current, p, q, &mut weights);
                        neighbors[weighted_pick(&weights, &mut rng)]
                    };
                    walk.push(next);
                }
                walk
            })
            .collect();
        walks.append(&mut round_walks);
    }
    WalkCorpus {
        walks,
        walk_length,
        walks_per_node,
        return_param: p,
        inout_param: q,
    }
}

/// Noise distribution for negative draws: degree^0.75 over non-isolated
/// nodes, sampled through the cumulative table.
pub struct NegativeTable {
    nodes: Vec<u32>,
    cdf: Vec<f64>,
    total: f64,
}

impl NegativeTable {
    pub fn from_degrees(g: &Graph) -> Self {
        let mut nodes = Vec::new();
        let mut cdf = Vec::new();
        let mut total = 0.0;
        for v in 0..g.num_nodes() as u32 {
            let d = g.degree(v);
            if d > 0 {
                total += (d as f64).powf(0.75);
                nodes.push(v);
                cdf.push(total);
            }
        }
        NegativeTable { nodes, cdf, total }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> u32 {
        let u = rng.random::<f64>() * self.total;
        let i = self.cdf.partition_point(|&c| c < u);
        self.nodes[i.min(self.nodes.len() - 1)]
    }

    /// Probability mass of each listed node, for distribution tests.
    pub fn probabilities(&self) -> Vec<(u32, f64)> {
        let mut prev = 0.0;
        self.nodes
            .iter()
            .zip(self.cdf.iter())
            .map(|(&v, &c)| {
                let p = (c - prev) / self.total;
                prev = c;
                (v, p)
            })
            .collect()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0f64; 4];
    let n4 = a.len() / 4 * 4;
    let mut i = 0;
    while i < n4 {
        s[0] += a[i] * b[i];
        s[1] += a[i + 1] * b[i + 1];
        s[2] += a[i + 2] * b[i + 2];
        s[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut acc = s[0] + s[1] + s[2] + s[3];
    for j in n4..a.len() {
        acc += a[j] * b[j];
    }
    acc
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Skip-gram with negative sampling over the walk corpus. Center vectors
/// start uniform in [-0.5/d, 0.5/d], context vectors at zero; the center
/// matrix is returned. Per-center context windows are reduced uniformly
/// (the word2vec convention), and the learning rate decays linearly over
/// processed tokens.
pub fn train_skipgram(
    g: &Graph,
    corpus: &WalkCorpus,
    cfg: &Node2VecConfig,
) -> Result<EmbeddingMatrix> {
    train_skipgram_observed(g, corpus, cfg, |_, _| {})
}

pub(crate) fn train_skipgram_observed(
    g: &Graph,
    corpus: &WalkCorpus,
    cfg: &Node2VecConfig,
    mut after_epoch: impl FnMut(usize, &Array2<f64>),
) -> Result<EmbeddingMatrix> {
    if corpus.walks.is_empty() {
        return Err(Error::MalformedInput("empty walk corpus".into()));
    }
    assert!(cfg.dim >= 2, "embedding dimension must be at least 2");
    let n = g.num_nodes();
    let d = cfg.dim;

    let mut init_rng = substream_keyed(cfg.seed, Stream::SkipGram, &[0]);
    let span = 0.5 / d as f64;
    let mut centers: Vec<f64> = (0..n * d)
        .map(|_| init_rng.random_range(-span..span))
        .collect();
    let mut contexts = vec![0.0f64; n * d];

    let table = NegativeTable::from_degrees(g);
    let mut rng = substream_keyed(cfg.seed, Stream::SkipGram, &[1]);

    let tokens_per_epoch: usize = corpus.walks.iter().map(Vec::len).sum();
    let total_tokens = (tokens_per_epoch * cfg.epochs.max(1)) as f64;
    let mut processed = 0usize;
    let mut err = vec![0.0f64; d];
    let mut center_buf = vec![0.0f64; d];

    for epoch in 0..cfg.epochs {
        for walk in &corpus.walks {
            for (i, &center) in walk.iter().enumerate() {
                processed += 1;
                let lr = cfg.lr * (1.0 - processed as f64 / total_tokens).max(1e-4);
                let b = rng.random_range(1..=cfg.window);
                let lo = i.saturating_sub(b);
                let hi = (i + b).min(walk.len() - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let context = walk[j];
                    let crow = center as usize * d;
                    err.iter_mut().for_each(|e| *e = 0.0);
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            // Noise draws that hit either end of the positive
                            // pair are skipped, not resampled.
                            let t = table.draw(&mut rng);
                            if t == context || t == center {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let trow = target as usize * d;
                        let f = dot(&centers[crow..crow + d], &contexts[trow..trow + d]);
                        let gcoef = (label - 1.0 / (1.0 + (-f).exp())) * lr;
                        axpy(&mut err, gcoef, &contexts[trow..trow + d]);
                        center_buf.copy_from_slice(&centers[crow..crow + d]);
                        axpy(&mut contexts[trow..trow + d], gcoef, &center_buf);
                    }
                    axpy(&mut centers[crow..crow + d], 1.0, &err);
                }
            }
        }
        let snapshot = Array2::from_shape_vec((n, d), centers.clone()).unwrap();
        after_epoch(epoch, &snapshot);
    }

    let values = Array2::from_shape_vec((n, d), centers).unwrap();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericFailure("skip-gram diverged".into()));
    }
    Ok(EmbeddingMatrix::new(values))
}

/// Walks plus skip-gram with the configured defaults. A graph with no
/// edges yields the random initialization (with a warning), so downstream
/// stages always receive an n x d matrix.
pub fn node2vec(g: &Graph, cfg: &Node2VecConfig) -> Result<EmbeddingMatrix> {
    let any_edges = (0..g.num_nodes() as u32).any(|v| g.degree(v) > 0);
    if !any_edges || cfg.epochs == 0 {
        if !any_edges {
            eprintln!("node2vec: graph has no edges; returning random initialization");
        }
        let mut rng = substream_keyed(cfg.seed, Stream::SkipGram, &[0]);
        let span = 0.5 / cfg.dim as f64;
        let values =
            Array2::from_shape_fn((g.num_nodes(), cfg.dim), |_| rng.random_range(-span..span));
        return Ok(EmbeddingMatrix::new(values));
    }
    let corpus = generate_walks(
        g,
        cfg.return_param,
        cfg.inout_param,
        cfg.walk_length,
        cfg.walks_per_node,
        cfg.seed,
    );
    train_skipgram(g, &corpus, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let na = dot(a, a).sqrt().max(1e-12);
        let nb = dot(b, b).sqrt().max(1e-12);
        dot(a, b) / (na * nb)
    }

    fn row(values: &Array2<f64>, i: usize) -> Vec<f64> {
        values.row(i).to_vec()
    }

    #[test]
    fn walks_follow_edges_and_count() {
        let g = Graph::stochastic_block_model(&[15, 15], 0.3, 0.05, 3);
        let corpus = generate_walks(&g, 1.0, 1.0, 20, 4, 7);
        let non_isolated = (0..g.num_nodes() as u32)
            .filter(|&v| g.degree(v) > 0)
            .count();
        assert_eq!(corpus.walks.len(), 4 * non_isolated);
        for walk in &corpus.walks {
            assert_eq!(walk.len(), 20);
            for w in walk.windows(2) {
                assert!(g.has_edge(w[0], w[1]), "non-edge in walk: {w:?}");
            }
        }
    }

    #[test]
    fn walks_are_deterministic() {
        let g = Graph::stochastic_block_model(&[10, 10], 0.4, 0.05, 1);
        let a = generate_walks(&g, 0.5, 2.0, 10, 2, 42);
        let b = generate_walks(&g, 0.5, 2.0, 10, 2, 42);
        assert_eq!(a.walks, b.walks);
    }

    #[test]
    fn path_walk_stays_on_path() {
        let g = Graph::from_edges(3, vec![(0, 1), (1, 2)]).unwrap();
        for seed in 0..20 {
            let corpus = generate_walks(&g, 1.0, 1.0, 3, 1, seed);
            let from_zero = corpus.walks.iter().find(|w| w[0] == 0).unwrap();
            assert!(from_zero == &vec![0, 1, 0] || from_zero == &vec![0, 1, 2]);
        }
    }

    #[test]
    fn triangle_transition_weight_table() {
        // In a triangle, from v=1 having arrived from t=0: the step back to
        // 0 carries weight 1/p, the third node (adjacent to 0) weight 1.
        let g = Graph::from_edges(3, vec![(0, 1), (1, 2), (0, 2)]).unwrap();
        let mut w = Vec::new();
        transition_weights(&g, 0, 1, 4.0, 7.0, &mut w);
        // neighbors(1) = [0, 2]
        assert_eq!(w, vec![0.25, 1.0]);
        // Path 0-1-2: from 1 having arrived from 0, node 2 is at distance
        // 2 from 0, so it gets 1/q.
        let p3 = Graph::from_edges(3, vec![(0, 1), (1, 2)]).unwrap();
        transition_weights(&p3, 0, 1, 4.0, 8.0, &mut w);
        assert_eq!(w, vec![0.25, 0.125]);
    }

    #[test]
    fn negative_table_matches_degree_power_distribution() {
        // Star plus extra edges: a spread of degrees.
        let g = Graph::from_edges(6, vec![(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (4, 5)]).unwrap();
        let table = NegativeTable::from_degrees(&g);
        let probs = table.probabilities();
        let mut rng = substream_keyed(0, Stream::SkipGram, &[99]);
        let draws = 100_000usize;
        let mut counts = vec![0usize; g.num_nodes()];
        for _ in 0..draws {
            counts[table.draw(&mut rng) as usize] += 1;
        }
        // Chi-square statistic vs 3 sigma of its own sampling distribution.
        let mut stat = 0.0;
        for &(v, p) in &probs {
            let expected = draws as f64 * p;
            let diff = counts[v as usize] as f64 - expected;
            stat += diff * diff / expected;
        }
        let dof = (probs.len() - 1) as f64;
        assert!(
            stat < dof + 3.0 * (2.0 * dof).sqrt(),
            "chi-square {stat} too large for dof {dof}"
        );
    }

    #[test]
    fn epochs_zero_returns_finite_random_init() {
        let g = Graph::from_edges(4, vec![(0, 1), (2, 3)]).unwrap();
        let cfg = Node2VecConfig {
            dim: 8,
            epochs: 0,
            ..Node2VecConfig::default()
        };
        let emb = node2vec(&g, &cfg).unwrap();
        assert_eq!((emb.num_nodes(), emb.dim()), (4, 8));
    }

    #[test]
    fn single_edge_cosine_rises_each_epoch() {
        let g = Graph::from_edges(2, vec![(0, 1)]).unwrap();
        let cfg = Node2VecConfig {
            dim: 4,
            walk_length: 10,
            walks_per_node: 4,
            window: 2,
            negatives: 2,
            epochs: 5,
            seed: 3,
            ..Node2VecConfig::default()
        };
        let corpus = generate_walks(&g, 1.0, 1.0, cfg.walk_length, cfg.walks_per_node, cfg.seed);
        let mut series = Vec::new();
        train_skipgram_observed(&g, &corpus, &cfg, |_, values| {
            series.push(cosine(&row(values, 0), &row(values, 1)));
        })
        .unwrap();
        assert_eq!(series.len(), 5);
        for w in series.windows(2) {
            assert!(w[1] > w[0], "cosine not increasing: {series:?}");
        }
    }

    #[test]
    fn cliques_cluster_in_embedding_space() {
        // Two disconnected 6-cliques.
        let mut edges = Vec::new();
        for u in 0..6u32 {
            for v in (u + 1)..6 {
                edges.push((u, v));
                edges.push((u + 6, v + 6));
            }
        }
        let g = Graph::from_edges(12, edges).unwrap();
        let cfg = Node2VecConfig {
            dim: 16,
            walk_length: 20,
            walks_per_node: 8,
            window: 4,
            negatives: 3,
            epochs: 4,
            seed: 11,
            ..Node2VecConfig::default()
        };
        let emb = node2vec(&g, &cfg).unwrap();
        let v = emb.values();
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for a in 0..12usize {
            for b in (a + 1)..12 {
                let c = cosine(&row(v, a), &row(v, b));
                if (a < 6) == (b < 6) {
                    intra.push(c);
                } else {
                    inter.push(c);
                }
            }
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(
            mean(&intra) > mean(&inter),
            "intra {} <= inter {}",
            mean(&intra),
            mean(&inter)
        );
    }

    #[test]
    fn node2vec_is_deterministic() {
        let g = Graph::stochastic_block_model(&[8, 8], 0.5, 0.1, 5);
        let cfg = Node2VecConfig {
            dim: 8,
            walk_length: 12,
            walks_per_node: 3,
            window: 3,
            negatives: 2,
            epochs: 2,
            seed: 21,
            ..Node2VecConfig::default()
        };
        let a = node2vec(&g, &cfg).unwrap();
        let b = node2vec(&g, &cfg).unwrap();
        assert_eq!(a.values(), b.values());
    }
}
