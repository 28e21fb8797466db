//! Immutable undirected simple graphs, edge splits, negative sampling,
//! distant-neighbor sampling, and feature diffusion.
//!
//! Node ids are contiguous `0..n`. Edges are stored canonically as
//! `(min, max)` pairs; adjacency lists are sorted. A [`Graph`] is immutable
//! after construction and safe to share across threads.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

pub type Edge = (u32, u32);

/// Canonical unordered form of an edge.
#[inline]
pub fn canon(u: u32, v: u32) -> Edge {
    if u <= v {
        (u, v)
    } else {
        (v, u)
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    num_nodes: usize,
    /// Canonical edges, sorted.
    edges: Vec<Edge>,
    /// Sorted neighbor list per node.
    adj: Vec<Vec<u32>>,
    /// Internal id -> id in the source file (identity for generated graphs).
    original_ids: Vec<u64>,
}

/// Counts of lines dropped while reading an edge-list file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub self_loops_dropped: usize,
    pub duplicates_dropped: usize,
}

impl Graph {
    /// Build a graph from an edge iterator over ids already in `0..n`.
    /// Self-loops and duplicates are rejected here (construction from
    /// trusted sources); file ingestion tolerates and counts them.
    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut canonical: Vec<Edge> = Vec::new();
        for (u, v) in edges {
            if u == v {
                return Err(Error::MalformedInput(format!("self-loop ({u},{u})")));
            }
            if (u as usize) >= num_nodes || (v as usize) >= num_nodes {
                return Err(Error::MalformedInput(format!(
                    "edge ({u},{v}) out of range for n={num_nodes}"
                )));
            }
            canonical.push(canon(u, v));
        }
        canonical.sort_unstable();
        canonical.windows(2).try_for_each(|w| {
            if w[0] == w[1] {
                Err(Error::MalformedInput(format!(
                    "duplicate edge ({},{})",
                    w[0].0, w[0].1
                )))
            } else {
                Ok(())
            }
        })?;
        Ok(Self::from_canonical(num_nodes, canonical))
    }

    fn from_canonical(num_nodes: usize, edges: Vec<Edge>) -> Self {
        let mut adj = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            adj[u as usize].push(v);
            adj[v as usize].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        Graph {
            num_nodes,
            edges,
            adj,
            original_ids: (0..num_nodes as u64).collect(),
        }
    }

    /// Read a UTF-8 edge-list file: one edge per line, two whitespace
    /// separated integer tokens, `#` starts a comment line. Node ids are
    /// reindexed to `0..n` in order of first appearance; self-loops and
    /// duplicate edges are dropped and counted.
    pub fn load_edge_list(path: impl AsRef<Path>) -> Result<(Self, LoadReport)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_edge_list(&text)
    }

    /// Parse edge-list text (see [`Graph::load_edge_list`]).
    pub fn parse_edge_list(text: &str) -> Result<(Self, LoadReport)> {
        let mut report = LoadReport::default();
        let mut index = std::collections::HashMap::new();
        let mut original_ids: Vec<u64> = Vec::new();
        let mut intern = |id: u64, index: &mut std::collections::HashMap<u64, u32>| -> u32 {
            *index.entry(id).or_insert_with(|| {
                original_ids.push(id);
                (original_ids.len() - 1) as u32
            })
        };
        let mut seen = HashSet::new();
        let mut edges: Vec<Edge> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let (a, b) = match (tokens.next(), tokens.next(), tokens.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => {
                    return Err(Error::MalformedInput(format!(
                        "line {}: expected two tokens, got {:?}",
                        lineno + 1,
                        line
                    )))
                }
            };
            let parse = |tok: &str| -> Result<u64> {
                tok.parse::<u64>().map_err(|_| {
                    Error::MalformedInput(format!(
                        "line {}: non-integer token {:?}",
                        lineno + 1,
                        tok
                    ))
                })
            };
            let (oa, ob) = (parse(a)?, parse(b)?);
            let u = intern(oa, &mut index);
            let v = intern(ob, &mut index);
            if u == v {
                report.self_loops_dropped += 1;
                continue;
            }
            let e = canon(u, v);
            if !seen.insert(e) {
                report.duplicates_dropped += 1;
                continue;
            }
            edges.push(e);
        }
        if edges.is_empty() {
            return Err(Error::EmptyGraph("edge list contains no edges".into()));
        }
        edges.sort_unstable();
        let mut g = Self::from_canonical(original_ids.len(), edges);
        g.original_ids = original_ids;
        Ok((g, report))
    }

    /// Two-parameter stochastic block model: nodes are partitioned into
    /// `blocks`, each intra-block pair is an edge with probability `p_in`,
    /// each inter-block pair with probability `p_out`.
    pub fn stochastic_block_model(blocks: &[usize], p_in: f64, p_out: f64, seed: u64) -> Self {
        let n: usize = blocks.iter().sum();
        let mut block_of = vec![0usize; n];
        let mut next = 0usize;
        for (b, &size) in blocks.iter().enumerate() {
            for _ in 0..size {
                block_of[next] = b;
                next += 1;
            }
        }
        let mut rng = substream(seed, Stream::Sbm);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                let p = if block_of[u] == block_of[v] { p_in } else { p_out };
                if rng.random::<f64>() < p {
                    edges.push((u as u32, v as u32));
                }
            }
        }
        Self::from_canonical(n, edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical sorted edge list.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn neighbors(&self, v: u32) -> &[u32] {
        &self.adj[v as usize]
    }

    pub fn degree(&self, v: u32) -> usize {
        self.adj[v as usize].len()
    }

    pub fn has_edge(&self, u: u32, v: u32) -> bool {
        u != v && self.adj[u as usize].binary_search(&v).is_ok()
    }

    pub fn original_id(&self, v: u32) -> u64 {
        self.original_ids[v as usize]
    }

    /// Map an id from the source file back to the internal id.
    pub fn internal_id(&self, original: u64) -> Option<u32> {
        // The map is small enough at desk scale; avoid carrying a HashMap.
        self.original_ids
            .iter()
            .position(|&o| o == original)
            .map(|i| i as u32)
    }

    /// Copy of this graph with the given edges removed (node set unchanged).
    pub fn without_edges(&self, remove: &[Edge]) -> Self {
        let removal: HashSet<Edge> = remove.iter().map(|&(u, v)| canon(u, v)).collect();
        let edges: Vec<Edge> = self
            .edges
            .iter()
            .copied()
            .filter(|e| !removal.contains(e))
            .collect();
        let mut g = Self::from_canonical(self.num_nodes, edges);
        g.original_ids = self.original_ids.clone();
        g
    }

    /// Graph density in the `2m * 10^3 / (n (n - 1))` convention.
    pub fn density(&self) -> Result<f64> {
        if self.num_nodes < 2 {
            return Err(Error::GraphTooSmall(
                "density needs at least 2 nodes".into(),
            ));
        }
        let n = self.num_nodes as f64;
        Ok(2.0 * self.edges.len() as f64 * 1e3 / (n * (n - 1.0)))
    }

    /// Serialize as an edge-list file using original ids.
    pub fn write_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for &(u, v) in &self.edges {
            writeln!(out, "{} {}", self.original_id(u), self.original_id(v)).unwrap();
        }
        std::fs::write(path.as_ref(), out).map_err(|source| Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        })
    }
}

// ---------------------------------------------------------------------------
// Edge splitting and negative sampling
// ---------------------------------------------------------------------------

/// Positive train/val/test edges plus sampled negative sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSplit {
    pub train_pos: Vec<Edge>,
    pub val_pos: Vec<Edge>,
    pub test_pos: Vec<Edge>,
    pub train_neg: Vec<Edge>,
    pub val_neg: Vec<Edge>,
    pub test_neg: Vec<Edge>,
    /// Negatives per positive.
    pub neg_ratio: u32,
    pub seed: u64,
}

fn fisher_yates<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Split the edge set 8:1:1 (train gets `floor(0.8 m)`, validation
/// `floor(0.1 m)`, test the remainder) and return the split together with
/// the training-view graph (validation/test positives deleted).
pub fn split_edges(g: &Graph, seed: u64) -> Result<(EdgeSplit, Graph)> {
    let m = g.num_edges();
    if m < 10 {
        return Err(Error::GraphTooSmall(format!(
            "need at least 10 edges to split 8:1:1, got {m}"
        )));
    }
    let mut shuffled = g.edges().to_vec();
    let mut rng = substream(seed, Stream::Split);
    fisher_yates(&mut shuffled, &mut rng);
    let n_train = (m * 8) / 10;
    let n_val = m / 10;
    let train_pos = shuffled[..n_train].to_vec();
    let val_pos = shuffled[n_train..n_train + n_val].to_vec();
    let test_pos = shuffled[n_train + n_val..].to_vec();
    let mut held_out = val_pos.clone();
    held_out.extend_from_slice(&test_pos);
    let train_view = g.without_edges(&held_out);
    let split = EdgeSplit {
        train_pos,
        val_pos,
        test_pos,
        train_neg: Vec::new(),
        val_neg: Vec::new(),
        test_neg: Vec::new(),
        neg_ratio: 0,
        seed,
    };
    Ok((split, train_view))
}

/// Uniformly sample `count` distinct non-edges, excluding the graph's edge
/// set and everything in `exclude`. Deterministic per seed.
pub fn sample_negatives(
    g: &Graph,
    count: usize,
    exclude: &HashSet<Edge>,
    seed: u64,
) -> Result<Vec<Edge>> {
    let mut rng = substream(seed, Stream::Negatives);
    sample_negatives_with(g, count, exclude, &mut rng)
}

/// As [`sample_negatives`] but drawing from a caller-provided generator,
/// so several pools can come from one stream.
pub fn sample_negatives_with(
    g: &Graph,
    count: usize,
    exclude: &HashSet<Edge>,
    rng: &mut impl Rng,
) -> Result<Vec<Edge>> {
    let n = g.num_nodes();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let mut forbidden: HashSet<Edge> = g.edges().iter().copied().collect();
    for &(u, v) in exclude {
        forbidden.insert(canon(u, v));
    }
    let available = total_pairs - forbidden.len();
    if count > available {
        return Err(Error::InfeasibleSampling(format!(
            "requested {count} negatives but only {available} non-edges exist"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }

    // Small graphs: enumerate the complement and take a uniform subset.
    // Large graphs: rejection-sample (requests are tiny next to the
    // complement there, so acceptance is near-certain).
    const ENUMERATE_LIMIT: usize = 6_000_000;
    if total_pairs <= ENUMERATE_LIMIT {
        let mut pool: Vec<Edge> = Vec::with_capacity(available);
        for u in 0..n as u32 {
            for v in (u + 1)..n as u32 {
                if !forbidden.contains(&(u, v)) {
                    pool.push((u, v));
                }
            }
        }
        // Partial Fisher–Yates: the first `count` items after the walk are
        // a uniform sample without replacement.
        for i in 0..count.min(pool.len().saturating_sub(1)) {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool.sort_unstable();
        Ok(pool)
    } else {
        let mut chosen: HashSet<Edge> = HashSet::with_capacity(count);
        let mut out: Vec<Edge> = Vec::with_capacity(count);
        let mut attempts: u64 = 0;
        let max_attempts = 200 * count as u64 + 1_000_000;
        while out.len() < count {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::InfeasibleSampling(format!(
                    "rejection sampling stalled after {attempts} attempts"
                )));
            }
            let u = rng.random_range(0..n as u32);
            let v = rng.random_range(0..n as u32);
            if u == v {
                continue;
            }
            let e = canon(u, v);
            if forbidden.contains(&e) || chosen.contains(&e) {
                continue;
            }
            chosen.insert(e);
            out.push(e);
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// Fill the split's negative sets: `neg_ratio` negatives per positive,
/// drawn jointly without replacement (no negative repeats within or across
/// splits) and excluding the full edge set.
pub fn populate_negatives(g: &Graph, split: &mut EdgeSplit, neg_ratio: u32) -> Result<()> {
    let r = neg_ratio as usize;
    let want_train = split.train_pos.len() * r;
    let want_val = split.val_pos.len() * r;
    let want_test = split.test_pos.len() * r;
    let all = sample_negatives(g, want_train + want_val + want_test, &HashSet::new(), split.seed)?;
    // `sample_negatives` sorts its output; reshuffle so the partition into
    // splits is independent of edge ordering.
    let mut all = all;
    let mut rng = substream(split.seed ^ 0x4e45_47, Stream::Negatives);
    fisher_yates(&mut all, &mut rng);
    split.train_neg = all[..want_train].to_vec();
    split.val_neg = all[want_train..want_train + want_val].to_vec();
    split.test_neg = all[want_train + want_val..].to_vec();
    split.neg_ratio = neg_ratio;
    Ok(())
}

impl EdgeSplit {
    /// Check the structural invariants: positive sets partition E exactly
    /// and negatives avoid E. Used by tests and debug assertions.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        let mut union: Vec<Edge> = Vec::with_capacity(g.num_edges());
        union.extend_from_slice(&self.train_pos);
        union.extend_from_slice(&self.val_pos);
        union.extend_from_slice(&self.test_pos);
        union.sort_unstable();
        if union.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::MalformedInput("overlapping positive sets".into()));
        }
        if union != g.edges() {
            return Err(Error::MalformedInput(
                "positive sets do not partition the edge set".into(),
            ));
        }
        for set in [&self.train_neg, &self.val_neg, &self.test_neg] {
            for &(u, v) in set {
                if g.has_edge(u, v) {
                    return Err(Error::MalformedInput(format!(
                        "negative ({u},{v}) is a real edge"
                    )));
                }
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::MalformedInput(
                    "duplicate negative within a split".into(),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Split manifest file format
// ---------------------------------------------------------------------------

const MANIFEST_HEADER: &str = "src dst split label";

/// Write the split as a columnar text manifest (`src dst split label`,
/// original node ids). Deterministic: identical splits produce identical
/// bytes.
pub fn write_split_manifest(path: impl AsRef<Path>, g: &Graph, split: &EdgeSplit) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# neg_ratio {}", split.neg_ratio).unwrap();
    writeln!(out, "# seed {}", split.seed).unwrap();
    writeln!(out, "{MANIFEST_HEADER}").unwrap();
    let mut emit = |edges: &[Edge], which: &str, label: u8| {
        for &(u, v) in edges {
            writeln!(
                out,
                "{} {} {} {}",
                g.original_id(u),
                g.original_id(v),
                which,
                label
            )
            .unwrap();
        }
    };
    emit(&split.train_pos, "train", 1);
    emit(&split.train_neg, "train", 0);
    emit(&split.val_pos, "val", 1);
    emit(&split.val_neg, "val", 0);
    emit(&split.test_pos, "test", 1);
    emit(&split.test_neg, "test", 0);
    std::fs::write(path.as_ref(), out).map_err(|source| Error::Io {
        path: path.as_ref().display().to_string(),
        source,
    })
}

/// Read a split manifest back, mapping original ids through the graph.
pub fn read_split_manifest(path: impl AsRef<Path>, g: &Graph) -> Result<EdgeSplit> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut split = EdgeSplit {
        train_pos: Vec::new(),
        val_pos: Vec::new(),
        test_pos: Vec::new(),
        train_neg: Vec::new(),
        val_neg: Vec::new(),
        test_neg: Vec::new(),
        neg_ratio: 1,
        seed: 0,
    };
    let mut lookup = std::collections::HashMap::new();
    for v in 0..g.num_nodes() as u32 {
        lookup.insert(g.original_id(v), v);
    }
    let mut saw_header = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut it = comment.split_whitespace();
            match (it.next(), it.next()) {
                (Some("neg_ratio"), Some(v)) => {
                    split.neg_ratio = v.parse().map_err(|_| {
                        Error::MalformedInput(format!("line {}: bad neg_ratio", lineno + 1))
                    })?
                }
                (Some("seed"), Some(v)) => {
                    split.seed = v.parse().map_err(|_| {
                        Error::MalformedInput(format!("line {}: bad seed", lineno + 1))
                    })?
                }
                _ => {}
            }
            continue;
        }
        if !saw_header {
            if line != MANIFEST_HEADER {
                return Err(Error::MalformedInput(format!(
                    "line {}: expected header {:?}",
                    lineno + 1,
                    MANIFEST_HEADER
                )));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::MalformedInput(format!(
                "line {}: expected 4 columns",
                lineno + 1
            )));
        }
        let parse_id = |tok: &str| -> Result<u32> {
            let orig: u64 = tok.parse().map_err(|_| {
                Error::MalformedInput(format!("line {}: bad node id {:?}", lineno + 1, tok))
            })?;
            lookup.get(&orig).copied().ok_or_else(|| {
                Error::MalformedInput(format!(
                    "line {}: node {orig} not present in the graph",
                    lineno + 1
                ))
            })
        };
        let u = parse_id(fields[0])?;
        let v = parse_id(fields[1])?;
        let e = canon(u, v);
        let bucket = match (fields[2], fields[3]) {
            ("train", "1") => &mut split.train_pos,
            ("train", "0") => &mut split.train_neg,
            ("val", "1") => &mut split.val_pos,
            ("val", "0") => &mut split.val_neg,
            ("test", "1") => &mut split.test_pos,
            ("test", "0") => &mut split.test_neg,
            _ => {
                return Err(Error::MalformedInput(format!(
                    "line {}: split must be train|val|test and label 0|1",
                    lineno + 1
                )))
            }
        };
        bucket.push(e);
    }
    if !saw_header {
        return Err(Error::MalformedInput("manifest has no header line".into()));
    }
    Ok(split)
}

// ---------------------------------------------------------------------------
// Hop frontiers and distant-neighbor sampling
// ---------------------------------------------------------------------------

/// Nodes at shortest-path distance exactly `k` from `node` (sorted).
pub fn exact_khop(g: &Graph, node: u32, k: usize) -> Vec<u32> {
    assert!(k >= 1, "exact_khop requires k >= 1");
    let mut dist = vec![usize::MAX; g.num_nodes()];
    dist[node as usize] = 0;
    let mut frontier = vec![node];
    for depth in 1..=k {
        let mut next = Vec::new();
        for &v in &frontier {
            for &w in g.neighbors(v) {
                if dist[w as usize] == usize::MAX {
                    dist[w as usize] = depth;
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            return Vec::new();
        }
        frontier = next;
    }
    frontier.sort_unstable();
    frontier
}

/// Per-node samples of exact-`g`-hop neighbors (union over the configured
/// hop distances), at most `per_node` each.
#[derive(Debug, Clone)]
pub struct DistantSampleTable {
    pub hops: Vec<usize>,
    pub samples: Vec<Vec<u32>>,
    pub per_node: usize,
}

/// Sample up to `per_node` nodes per anchor, uniformly without replacement
/// from the union of the anchor's exact-`h` frontiers over `hops`.
pub fn build_distant_table(
    g: &Graph,
    hops: &[usize],
    per_node: usize,
    seed: u64,
) -> DistantSampleTable {
    assert!(per_node >= 1, "per_node must be at least 1");
    let samples: Vec<Vec<u32>> = (0..g.num_nodes() as u32)
        .into_par_iter()
        .map(|v| {
            let mut pool: Vec<u32> = Vec::new();
            for &h in hops {
                pool.extend(exact_khop(g, v, h));
            }
            pool.sort_unstable();
            pool.dedup();
            let mut rng = substream_keyed_distant(seed, v);
            if pool.len() > per_node {
                for i in 0..per_node {
                    let j = rng.random_range(i..pool.len());
                    pool.swap(i, j);
                }
                pool.truncate(per_node);
                pool.sort_unstable();
            }
            pool
        })
        .collect();
    DistantSampleTable {
        hops: hops.to_vec(),
        samples,
        per_node,
    }
}

fn substream_keyed_distant(seed: u64, node: u32) -> rand_chacha::ChaCha8Rng {
    crate::rng::substream_keyed(seed, Stream::DistantTable, &[node as u64])
}

// ---------------------------------------------------------------------------
// Normalized adjacency and diffusion
// ---------------------------------------------------------------------------

/// Dense symmetrically normalized adjacency `D^{-1/2} A D^{-1/2}`.
/// Rows/columns of degree-0 nodes are zero.
pub fn normalized_adjacency(g: &Graph) -> Array2<f64> {
    let n = g.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|v| {
            let d = g.degree(v as u32);
            if d == 0 {
                0.0
            } else {
                1.0 / (d as f64).sqrt()
            }
        })
        .collect();
    let mut s = Array2::<f64>::zeros((n, n));
    for &(u, v) in g.edges() {
        let w = inv_sqrt[u as usize] * inv_sqrt[v as usize];
        s[(u as usize, v as usize)] = w;
        s[(v as usize, u as usize)] = w;
    }
    s
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::MalformedInput(format!(
            "diffusion alpha must lie in [0,1), got {alpha}"
        )));
    }
    Ok(())
}

/// Iterate `X <- (1-alpha) X_init + alpha S X` for `steps` steps against a
/// dense normalized adjacency.
pub fn diffuse(
    x_init: &Array2<f64>,
    norm_adj: &Array2<f64>,
    alpha: f64,
    steps: usize,
) -> Result<Array2<f64>> {
    check_alpha(alpha)?;
    let n = x_init.nrows();
    if norm_adj.nrows() != n || norm_adj.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "norm_adj is {}x{}, expected {n}x{n}",
            norm_adj.nrows(),
            norm_adj.ncols()
        )));
    }
    let mut x = x_init.clone();
    for _ in 0..steps {
        x = (1.0 - alpha) * x_init + alpha * norm_adj.dot(&x);
    }
    Ok(x)
}

/// Same recurrence computed against adjacency lists (`O(m T d)`); used by
/// the pipeline so no dense n*n matrix is ever formed.
pub fn diffuse_graph(
    x_init: &Array2<f64>,
    g: &Graph,
    alpha: f64,
    steps: usize,
) -> Result<Array2<f64>> {
    check_alpha(alpha)?;
    if x_init.nrows() != g.num_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "x_init has {} rows for a graph with {} nodes",
            x_init.nrows(),
            g.num_nodes()
        )));
    }
    let n = g.num_nodes();
    let d = x_init.ncols();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|v| {
            let deg = g.degree(v as u32);
            if deg == 0 {
                0.0
            } else {
                1.0 / (deg as f64).sqrt()
            }
        })
        .collect();
    let mut x = x_init.clone();
    for _ in 0..steps {
        let mut next = Array2::<f64>::zeros((n, d));
        next.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut row)| {
                let mut acc = vec![0.0f64; d];
                let wi = inv_sqrt[i];
                for &j in g.neighbors(i as u32) {
                    let w = wi * inv_sqrt[j as usize];
                    let src = x.row(j as usize);
                    for (a, &s) in acc.iter_mut().zip(src.iter()) {
                        *a += w * s;
                    }
                }
                let init = x_init.row(i);
                for (k, cell) in row.iter_mut().enumerate() {
                    *cell = (1.0 - alpha) * init[k] + alpha * acc[k];
                }
            });
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path_graph(n: usize) -> Graph {
        Graph::from_edges(n, (0..n as u32 - 1).map(|i| (i, i + 1))).unwrap()
    }

    #[test]
    fn parse_basic_edge_list() {
        let (g, rep) = Graph::parse_edge_list("0 1\n1 2").unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_edges(), 2);
        assert_eq!(
            (0..3).map(|v| g.degree(v)).collect::<Vec<_>>(),
            vec![1, 2, 1]
        );
        assert_eq!(rep, LoadReport::default());
    }

    #[test]
    fn parse_drops_self_loops_and_duplicates() {
        let (g, rep) = Graph::parse_edge_list("5 5\n5 7\n7 5\n# comment\n").unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(rep.self_loops_dropped, 1);
        assert_eq!(rep.duplicates_dropped, 1);
        assert_eq!(g.original_id(0), 5);
        assert_eq!(g.original_id(1), 7);
    }

    #[test]
    fn parse_rejects_bad_tokens_and_empty() {
        assert!(matches!(
            Graph::parse_edge_list("0 x"),
            Err(Error::MalformedInput(_))
        ));
        assert!(matches!(
            Graph::parse_edge_list("# nothing\n"),
            Err(Error::EmptyGraph(_))
        ));
        assert!(matches!(
            Graph::parse_edge_list("0 1 2"),
            Err(Error::MalformedInput(_))
        ));
    }

    #[test]
    fn split_ratio_floor_remainder() {
        let g = Graph::stochastic_block_model(&[30, 30], 0.25, 0.05, 3);
        let m = g.num_edges();
        let (split, view) = split_edges(&g, 7).unwrap();
        assert_eq!(split.train_pos.len(), m * 8 / 10);
        assert_eq!(split.val_pos.len(), m / 10);
        assert_eq!(
            split.test_pos.len(),
            m - m * 8 / 10 - m / 10
        );
        assert_eq!(view.num_edges(), split.train_pos.len());
        assert_eq!(view.num_nodes(), g.num_nodes());
        split.validate(&g).unwrap();
        // 5429 edges (the documented worked example for the remainder rule).
        assert_eq!((5429 * 8 / 10, 5429 / 10, 5429 - 4343 - 542), (4343, 542, 544));
    }

    #[test]
    fn split_is_deterministic() {
        let g = Graph::stochastic_block_model(&[20, 20], 0.3, 0.05, 1);
        let (a, _) = split_edges(&g, 99).unwrap();
        let (b, _) = split_edges(&g, 99).unwrap();
        assert_eq!(a, b);
        let (c, _) = split_edges(&g, 100).unwrap();
        assert_ne!(a.train_pos, c.train_pos);
    }

    #[test]
    fn split_rejects_tiny_graphs() {
        let g = path_graph(5);
        assert!(matches!(split_edges(&g, 1), Err(Error::GraphTooSmall(_))));
    }

    #[test]
    fn negatives_avoid_edges_and_are_exact_on_small_graphs() {
        // Complete graph: no non-edges.
        let k4 = Graph::from_edges(4, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
            .unwrap();
        assert!(matches!(
            sample_negatives(&k4, 1, &HashSet::new(), 0),
            Err(Error::InfeasibleSampling(_))
        ));
        // Path 0-1-2: the unique non-edge.
        let p3 = path_graph(3);
        assert_eq!(
            sample_negatives(&p3, 1, &HashSet::new(), 5).unwrap(),
            vec![(0, 2)]
        );
        // Empty graph on 6 nodes: asking for all pairs returns all pairs.
        let e6 = Graph::from_canonical(6, vec![]);
        let negs = sample_negatives(&e6, 15, &HashSet::new(), 9).unwrap();
        assert_eq!(negs.len(), 15);
        let expected: Vec<Edge> = (0..6u32)
            .flat_map(|u| ((u + 1)..6).map(move |v| (u, v)))
            .collect();
        assert_eq!(negs, expected);
    }

    #[test]
    fn populate_negatives_fills_all_splits() {
        let g = Graph::stochastic_block_model(&[25, 25], 0.3, 0.1, 11);
        let (mut split, _) = split_edges(&g, 11).unwrap();
        populate_negatives(&g, &mut split, 2).unwrap();
        assert_eq!(split.train_neg.len(), 2 * split.train_pos.len());
        assert_eq!(split.val_neg.len(), 2 * split.val_pos.len());
        assert_eq!(split.test_neg.len(), 2 * split.test_pos.len());
        split.validate(&g).unwrap();
        // Joint draw: no repeats across splits either.
        let mut all = split.train_neg.clone();
        all.extend_from_slice(&split.val_neg);
        all.extend_from_slice(&split.test_neg);
        let unique: HashSet<Edge> = all.iter().copied().collect();
        assert_eq!(unique.len(), all.len());
    }

    #[test]
    fn khop_matches_hand_cases() {
        let p4 = path_graph(4);
        assert_eq!(exact_khop(&p4, 0, 2), vec![2]);
        // Star: all leaves at distance 1 from the center.
        let star = Graph::from_edges(5, vec![(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        assert!(exact_khop(&star, 0, 2).is_empty());
        // 4-cycle: opposite corner at distance 2.
        let c4 = Graph::from_edges(4, vec![(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        assert_eq!(exact_khop(&c4, 0, 2), vec![2]);
    }

    #[test]
    fn distant_table_respects_frontiers() {
        let p3 = path_graph(3);
        let t = build_distant_table(&p3, &[2], 1, 0);
        assert_eq!(t.samples[0], vec![2]);
        assert!(t.samples[1].is_empty());
        assert_eq!(t.samples[2], vec![0]);

        // Isolated node gets an empty list.
        let mut edges = vec![(0, 1), (1, 2)];
        edges.sort_unstable();
        let g = Graph::from_edges(4, edges).unwrap();
        let t = build_distant_table(&g, &[2, 3], 2, 0);
        assert!(t.samples[3].is_empty());

        // 5-cycle: each sampled list is a subset of the exact {2,3} frontier.
        let c5 = Graph::from_edges(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]).unwrap();
        let t = build_distant_table(&c5, &[2, 3], 4, 123);
        for v in 0..5u32 {
            let mut frontier = exact_khop(&c5, v, 2);
            frontier.extend(exact_khop(&c5, v, 3));
            for s in &t.samples[v as usize] {
                assert!(frontier.contains(s));
            }
        }
    }

    #[test]
    fn normalized_adjacency_hand_cases() {
        let single = Graph::from_edges(2, vec![(0, 1)]).unwrap();
        assert_eq!(normalized_adjacency(&single), array![[0.0, 1.0], [1.0, 0.0]]);

        let tri = Graph::from_edges(3, vec![(0, 1), (1, 2), (0, 2)]).unwrap();
        let s = normalized_adjacency(&tri);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 0.5 };
                assert!((s[(i, j)] - expect).abs() < 1e-15);
            }
        }

        // Degree-0 node: zero row and column.
        let g = Graph::from_edges(3, vec![(0, 1)]).unwrap();
        let s = normalized_adjacency(&g);
        assert!(s.row(2).iter().all(|&x| x == 0.0));
        assert!(s.column(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn diffuse_hand_iteration() {
        let g = Graph::from_edges(2, vec![(0, 1)]).unwrap();
        let s = normalized_adjacency(&g);
        let x0 = array![[1.0], [0.0]];
        // T=0 and alpha=0 leave the input unchanged.
        assert_eq!(diffuse(&x0, &s, 0.5, 0).unwrap(), x0);
        assert_eq!(diffuse(&x0, &s, 0.0, 3).unwrap(), x0);
        // Two steps at alpha = 1/2.
        let x2 = diffuse(&x0, &s, 0.5, 2).unwrap();
        assert!((x2[(0, 0)] - 0.75).abs() < 1e-12);
        assert!((x2[(1, 0)] - 0.25).abs() < 1e-12);
        // Graph-backed product matches the dense product.
        let x2g = diffuse_graph(&x0, &g, 0.5, 2).unwrap();
        assert_eq!(x2, x2g);
        // Bad alpha rejected.
        assert!(diffuse(&x0, &s, 1.0, 1).is_err());
        assert!(diffuse(&x0, &s, -0.1, 1).is_err());
    }

    #[test]
    fn density_values() {
        let k3 = Graph::from_edges(3, vec![(0, 1), (1, 2), (0, 2)]).unwrap();
        assert!((k3.density().unwrap() - 1000.0).abs() < 1e-12);
        let e2 = Graph::from_edges(2, vec![(0, 1)]).unwrap();
        assert!((e2.density().unwrap() - 1000.0).abs() < 1e-12);
        // Cora-shaped counts reproduce the published density to 3 decimals.
        let n = 2708.0f64;
        let m = 5429.0f64;
        let d = 2.0 * m * 1e3 / (n * (n - 1.0));
        assert!((d - 1.481).abs() < 5e-4);
    }

    #[test]
    fn manifest_round_trip() {
        let g = Graph::stochastic_block_model(&[20, 20], 0.3, 0.05, 2);
        let (mut split, _) = split_edges(&g, 5).unwrap();
        populate_negatives(&g, &mut split, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        write_split_manifest(&path, &g, &split).unwrap();
        let back = read_split_manifest(&path, &g).unwrap();
        assert_eq!(split, back);
        // Byte determinism.
        let bytes_a = std::fs::read(&path).unwrap();
        write_split_manifest(&path, &g, &split).unwrap();
        assert_eq!(bytes_a, std::fs::read(&path).unwrap());
    }
}
