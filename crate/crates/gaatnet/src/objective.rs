//! Link scoring and the training objectives: exponential path-distance
//! scores, a dot-product ablation scorer, binary cross-entropy over edge
//! labels, and the per-anchor InfoNCE contrastive loss.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::autodiff::{Segments, Tensor};
use crate::error::{Error, Result};
use crate::graph::Edge;

const BCE_EPS: f64 = 1e-12;
const COS_EPS: f64 = 1e-12;

fn edge_endpoints(edges: &[Edge]) -> (Rc<Vec<u32>>, Rc<Vec<u32>>) {
    let src: Vec<u32> = edges.iter().map(|&(u, _)| u).collect();
    let dst: Vec<u32> = edges.iter().map(|&(_, v)| v).collect();
    (Rc::new(src), Rc::new(dst))
}

/// Exponential path-distance scores: `s = exp(-ReLU(psi . (z_i - z_j)^2))`,
/// one per edge, each in (0, 1]. `psi` is a d'' x 1 column.
pub fn link_scores(z: &Tensor, edges: &[Edge], psi: &Tensor) -> Tensor {
    assert!(!edges.is_empty(), "link_scores: empty edge list");
    assert_eq!(
        psi.shape(),
        (z.shape().1, 1),
        "psi must be {} x 1",
        z.shape().1
    );
    let (src, dst) = edge_endpoints(edges);
    let diff = z.gather_rows(&src).sub(&z.gather_rows(&dst));
    diff.mul_elem(&diff).matmul(psi).relu().neg().exp()
}

/// Ablation scorer: sigmoid of the dot product.
pub fn dot_scores(z: &Tensor, edges: &[Edge]) -> Tensor {
    assert!(!edges.is_empty(), "dot_scores: empty edge list");
    let (src, dst) = edge_endpoints(edges);
    z.gather_rows(&src)
        .mul_elem(&z.gather_rows(&dst))
        .row_sum()
        .sigmoid()
}

/// Mean binary cross-entropy of scores against labels (scores clamped to
/// `[1e-12, 1 - 1e-12]` inside the logs).
pub fn link_loss(scores: &Tensor, labels: &Rc<Vec<f64>>) -> Tensor {
    Tensor::bce_loss(scores, labels, BCE_EPS)
}

/// `L_total = L_link + lambda * L_con`.
pub fn total_loss(l_link: &Tensor, l_con: &Tensor, lambda: f64) -> Tensor {
    l_link.add(&l_con.scale(lambda))
}

/// Precomputed anchor/candidate layout for the contrastive loss.
///
/// For every positive edge, the anchor is the edge's first endpoint. In
/// the default per-anchor mode, an anchor's candidate set is every partner
/// it touches in `positives + negatives`; in full-denominator mode every
/// anchor shares one candidate set holding every endpoint of the combined
/// edge set.
pub struct ContrastiveGroups {
    /// Anchor node per flattened entry.
    entry_anchor: Rc<Vec<u32>>,
    /// Candidate node per flattened entry.
    entry_cand: Rc<Vec<u32>>,
    seg: Rc<Segments>,
    /// Flattened entry index of each positive pair.
    pos_entries: Rc<Vec<u32>>,
    /// Segment index of each positive pair's anchor.
    pos_segments: Rc<Vec<u32>>,
}

impl ContrastiveGroups {
    pub fn num_positives(&self) -> usize {
        self.pos_entries.len()
    }

    pub fn num_entries(&self) -> usize {
        self.entry_anchor.len()
    }
}

pub fn build_contrastive_groups(
    positives: &[Edge],
    negatives: &[Edge],
    full_denominator: bool,
) -> Result<ContrastiveGroups> {
    if positives.is_empty() {
        return Err(Error::Evaluation("contrastive loss needs positives".into()));
    }
    // Partner lists over the combined edge set, both directions.
    let mut partners: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for &(u, v) in positives.iter().chain(negatives.iter()) {
        partners.entry(u).or_default().push(v);
        partners.entry(v).or_default().push(u);
    }
    let shared_pool: Vec<u32> = if full_denominator {
        let mut pool: Vec<u32> = positives
            .iter()
            .chain(negatives.iter())
            .flat_map(|&(u, v)| [u, v])
            .collect();
        pool.sort_unstable();
        pool.dedup();
        pool
    } else {
        Vec::new()
    };

    // One segment per distinct anchor, ascending.
    let mut anchors: Vec<u32> = positives.iter().map(|&(u, _)| u).collect();
    anchors.sort_unstable();
    anchors.dedup();

    let mut entry_anchor = Vec::new();
    let mut entry_cand = Vec::new();
    let mut lengths = Vec::with_capacity(anchors.len());
    let mut segment_of: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (si, &a) in anchors.iter().enumerate() {
        let cands: &[u32] = if full_denominator {
            &shared_pool
        } else {
            &partners[&a]
        };
        segment_of.insert(a, (si, entry_anchor.len()));
        let mut sorted = cands.to_vec();
        sorted.sort_unstable();
        lengths.push(sorted.len());
        for c in sorted {
            entry_anchor.push(a);
            entry_cand.push(c);
        }
    }
    let seg = Segments::from_lengths(lengths.iter().copied());

    let mut pos_entries = Vec::with_capacity(positives.len());
    let mut pos_segments = Vec::with_capacity(positives.len());
    for &(u, v) in positives {
        let (si, start) = segment_of[&u];
        let range = seg.range(si);
        let slice = &entry_cand[range.clone()];
        let offset = slice.binary_search(&v).map_err(|_| {
            Error::Evaluation(format!("positive ({u},{v}) missing from candidates"))
        })?;
        pos_entries.push((start + offset) as u32);
        pos_segments.push(si as u32);
    }
    Ok(ContrastiveGroups {
        entry_anchor: Rc::new(entry_anchor),
        entry_cand: Rc::new(entry_cand),
        seg: Rc::new(seg),
        pos_entries: Rc::new(pos_entries),
        pos_segments: Rc::new(pos_segments),
    })
}

/// Row-wise cosine similarity between gathered anchor and candidate rows,
/// with zero-norm rows treated as cosine 0 through clamped denominators.
fn entry_cosines(z: &Tensor, groups: &ContrastiveGroups) -> Tensor {
    let a = z.gather_rows(&groups.entry_anchor);
    let c = z.gather_rows(&groups.entry_cand);
    let dots = a.mul_elem(&c).row_sum();
    let na = a
        .mul_elem(&a)
        .row_sum()
        .max_scalar(COS_EPS * COS_EPS)
        .sqrt();
    let nc = c
        .mul_elem(&c)
        .row_sum()
        .max_scalar(COS_EPS * COS_EPS)
        .sqrt();
    dots.div_elem(&na.mul_elem(&nc))
}

/// InfoNCE over the grouped candidates: the mean over positive pairs of
/// `log-sum-exp(cos/tau over the anchor's candidates) - cos(pos)/tau`.
pub fn contrastive_loss(z: &Tensor, groups: &ContrastiveGroups, tau: f64) -> Tensor {
    assert!(tau > 0.0, "temperature must be positive");
    let scores = entry_cosines(z, groups).scale(1.0 / tau);
    let lse = scores.segment_logsumexp(&groups.seg);
    let pos_scores = scores.gather_rows(&groups.pos_entries);
    let lse_per_pos = lse.gather_rows(&groups.pos_segments);
    lse_per_pos.sub(&pos_scores).mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, grad_check};
    use crate::optim::xavier_uniform;
    use crate::rng::{substream, Stream};
    use ndarray::array;

    #[test]
    fn link_score_hand_values() {
        // Identical embeddings score exactly 1.
        let z = Tensor::constant(array![[0.4, -1.0], [0.4, -1.0], [1.0, 0.0], [0.0, 0.0]]);
        let psi = Tensor::constant(array![[0.5], [0.5]]);
        let s = link_scores(&z, &[(0, 1)], &psi).to_array();
        assert_eq!(s[(0, 0)], 1.0);
        // z_i=(1,0), z_j=(0,0), psi=(0.5,0.5): s = e^{-0.5}.
        let s = link_scores(&z, &[(2, 3)], &psi).to_array();
        assert!((s[(0, 0)] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((s[(0, 0)] - 0.6065).abs() < 1e-4);
        // psi = 0 scores 1 for any pair.
        let zero_psi = Tensor::constant(array![[0.0], [0.0]]);
        let s = link_scores(&z, &[(0, 2), (1, 3)], &zero_psi).to_array();
        assert!(s.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn link_score_range_and_symmetry() {
        let mut rng = substream(4, Stream::ParamInit);
        let z = Tensor::constant(xavier_uniform(10, 4, &mut rng));
        let psi = Tensor::constant(xavier_uniform(4, 1, &mut rng));
        let fwd: Vec<Edge> = (0..9).map(|i| (i as u32, i as u32 + 1)).collect();
        let rev: Vec<Edge> = fwd.iter().map(|&(u, v)| (v, u)).collect();
        let a = link_scores(&z, &fwd, &psi).to_array();
        let b = link_scores(&z, &rev, &psi).to_array();
        for i in 0..9 {
            assert!(a[(i, 0)] > 0.0 && a[(i, 0)] <= 1.0);
            assert_eq!(a[(i, 0)].to_bits(), b[(i, 0)].to_bits(), "asymmetric score");
        }
    }

    #[test]
    fn dot_score_hand_values() {
        let z = Tensor::constant(array![[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]]);
        // Orthogonal vectors: sigmoid(0) = 1/2.
        let s = dot_scores(&z, &[(0, 1)]).to_array();
        assert!((s[(0, 0)] - 0.5).abs() < 1e-15);
        // (2,0).(2,0) = 4: sigmoid(4).
        let s = dot_scores(&z, &[(2, 2)]).to_array();
        let expect = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((s[(0, 0)] - expect).abs() < 1e-12);
        assert!((s[(0, 0)] - 0.9820).abs() < 1e-4);
    }

    #[test]
    fn bce_hand_values() {
        let labels = Rc::new(vec![1.0, 0.0]);
        let s = Tensor::constant(array![[0.5], [0.5]]);
        let l = link_loss(&s, &labels).item();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);

        let s = Tensor::constant(array![[0.9], [0.2]]);
        let l = link_loss(&s, &labels).item();
        let expect = -0.5 * (0.9f64.ln() + 0.8f64.ln());
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.1643).abs() < 1e-4);

        // Saturated-but-correct scores tend to zero loss.
        let s = Tensor::constant(array![[1.0 - 1e-12], [1e-12]]);
        let l = link_loss(&s, &labels).item();
        assert!(l < 1e-10);
    }

    #[test]
    fn total_loss_arithmetic() {
        let a = Tensor::constant(array![[0.5]]);
        let b = Tensor::constant(array![[0.2]]);
        assert!((total_loss(&a, &b, 0.5).item() - 0.6).abs() < 1e-15);
        assert_eq!(total_loss(&a, &b, 0.0).item(), 0.5);
        let zero = Tensor::constant(array![[0.0]]);
        assert_eq!(total_loss(&a, &zero, 1.0).item(), 0.5);
    }

    #[test]
    fn contrastive_degenerate_and_hand_case() {
        // One positive pair, candidate set only itself: loss = 0.
        let z = Tensor::constant(array![[1.0, 0.0], [1.0, 0.0]]);
        let groups = build_contrastive_groups(&[(0, 1)], &[], false).unwrap();
        let l = contrastive_loss(&z, &groups, 0.5).item();
        assert!(l.abs() < 1e-12);

        // Anchor 0: positive partner with cos=1, negative candidate with
        // cos=0, tau=0.5: -log(e^2 / (e^2 + 1)).
        let z = Tensor::constant(array![[1.0, 0.0], [2.0, 0.0], [0.0, 3.0]]);
        let groups = build_contrastive_groups(&[(0, 1)], &[(0, 2)], false).unwrap();
        let l = contrastive_loss(&z, &groups, 0.5).item();
        let expect = -(2.0f64.exp() / (2.0f64.exp() + 1.0)).ln();
        assert!((l - expect).abs() < 1e-12, "got {l}, expect {expect}");
        assert!((l - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn contrastive_uniform_limit_is_log_candidate_count() {
        // tau -> inf: every candidate weighs equally, loss -> log P.
        let mut rng = substream(6, Stream::ParamInit);
        let z = Tensor::constant(xavier_uniform(5, 3, &mut rng));
        let pos = vec![(0u32, 1u32)];
        let neg = vec![(0u32, 2u32), (0u32, 3u32), (0u32, 4u32)];
        let groups = build_contrastive_groups(&pos, &neg, false).unwrap();
        let l = contrastive_loss(&z, &groups, 1e9).item();
        assert!((l - 4.0f64.ln()).abs() < 1e-6, "got {l}");
    }

    #[test]
    fn contrastive_is_nonnegative_and_monotone_in_positive_cosine() {
        let groups = build_contrastive_groups(&[(0, 1)], &[(0, 2)], false).unwrap();
        let mut prev = f64::INFINITY;
        // Rotating the positive partner toward the anchor increases cos and
        // must decrease the loss.
        for &angle in &[1.2f64, 0.8, 0.4, 0.1] {
            let z = Tensor::constant(array![[1.0, 0.0], [angle.cos(), angle.sin()], [-0.3, 0.9]]);
            let l = contrastive_loss(&z, &groups, 0.5).item();
            assert!(l >= 0.0);
            assert!(l < prev, "loss not decreasing: {l} vs {prev}");
            prev = l;
        }
    }

    #[test]
    fn contrastive_zero_norm_rows_are_safe() {
        let z = Tensor::constant(array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]);
        let groups = build_contrastive_groups(&[(0, 1)], &[(0, 2)], false).unwrap();
        let l = contrastive_loss(&z, &groups, 0.5).item();
        // Anchor has zero norm: all cosines 0, softmax uniform over 2.
        assert!((l - 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn full_denominator_mode_shares_candidates() {
        let groups = build_contrastive_groups(&[(0, 1), (2, 3)], &[(1, 3)], true).unwrap();
        // Shared pool = {0,1,2,3} for both anchors.
        assert_eq!(groups.num_entries(), 8);
        let per_anchor = build_contrastive_groups(&[(0, 1), (2, 3)], &[(1, 3)], false).unwrap();
        assert!(per_anchor.num_entries() < groups.num_entries());
    }

    #[test]
    fn empty_positive_set_is_an_error() {
        assert!(matches!(
            build_contrastive_groups(&[], &[(0, 1)], false),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let mut rng = substream(8, Stream::ParamInit);
        let z0 = xavier_uniform(6, 3, &mut rng);
        let psi0 = xavier_uniform(3, 1, &mut rng).mapv(f64::abs) + 0.05;
        let edges = vec![(0u32, 1u32), (2, 3), (4, 5), (1, 4)];
        let labels = Rc::new(vec![1.0, 0.0, 1.0, 0.0]);
        let err = grad_check(
            |ts| link_loss(&link_scores(&ts[0], &edges, &ts[1]), &labels),
            &[z0.clone(), psi0],
            1e-5,
        );
        assert!(err < 1e-4, "link loss grad: {err}");

        let groups = build_contrastive_groups(&[(0, 1), (2, 3)], &[(0, 4), (2, 5)], false).unwrap();
        let err = grad_check(
            |ts| contrastive_loss(&ts[0], &groups, 0.5),
            &[z0.clone()],
            1e-5,
        );
        assert!(err < 1e-4, "contrastive grad: {err}");

        let err = grad_check(
            |ts| {
                let l1 = link_loss(&dot_scores(&ts[0], &edges), &labels);
                let l2 = contrastive_loss(&ts[0], &groups, 0.5);
                total_loss(&l1, &l2, 0.7)
            },
            &[z0],
            1e-5,
        );
        assert!(err < 1e-4, "total loss grad: {err}");
    }

    #[test]
    fn psi_receives_gradient_through_scores() {
        let mut rng = substream(13, Stream::ParamInit);
        let z = Tensor::constant(xavier_uniform(4, 2, &mut rng));
        let psi = Tensor::leaf(array![[0.1], [0.1]], true);
        let labels = Rc::new(vec![1.0, 0.0]);
        let loss = link_loss(&link_scores(&z, &[(0, 1), (2, 3)], &psi), &labels);
        backward(&loss);
        let g = psi.grad().expect("psi gradient");
        assert!(g.iter().any(|&x| x != 0.0));
    }
}
