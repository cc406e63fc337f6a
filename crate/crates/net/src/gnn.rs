//! Guided graph blocks: exact k-nearest-neighbor graphs over node features,
//! training-time node labels from downsampled masks, a triplet loss with
//! hard-negative mining, and max-relative graph convolution.
//!
//! Guidance acts only through the loss: the graph construction is identical
//! at train and test time, and no inference path reads a guided mask.

use iml_tensor::{Scalar, SplitMix64, Tape, Tensor};
use rayon::prelude::*;

use crate::error::{NetError, Result};
use crate::layers::LinearLayer;
use crate::params::{join, Params};
use crate::util::{to_grid, to_tokens};

/// Binary node labels for one pyramid level; training-only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuidedMask {
    /// Pyramid level index (1..=3 in the full model).
    pub level: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major grid; 1 = manipulated pixel, 0 = authentic.
    pub labels: Vec<u8>,
}

/// Nearest-neighbor downsample of a full-resolution binary mask:
/// out(r,c) = mask(floor(r·H/target_h), floor(c·W/target_w)).
/// Labels stay exactly binary; no interpolation can blur them.
pub fn downsample_mask(
    mask: &[u8],
    h: usize,
    w: usize,
    target_h: usize,
    target_w: usize,
    level: usize,
) -> Result<GuidedMask> {
    if target_h > h || target_w > w {
        return Err(NetError::MaskTargetTooLarge(target_h, target_w, h, w));
    }
    let mut labels = Vec::with_capacity(target_h * target_w);
    for r in 0..target_h {
        let src_r = r * h / target_h;
        for c in 0..target_w {
            labels.push(mask[src_r * w + c * w / target_w]);
        }
    }
    Ok(GuidedMask {
        level,
        h: target_h,
        w: target_w,
        labels,
    })
}

/// k-nearest-neighbor table over node features.
pub struct NodeGraph<T: Scalar> {
    /// (M, D) node feature table the graph was built from.
    pub features: Tensor<T>,
    /// Row-major (M, k) neighbor indices; `neighbors[j]` never contains `j`.
    pub neighbors: Vec<usize>,
    pub k: usize,
}

impl<T: Scalar> NodeGraph<T> {
    pub fn node_count(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn neighbors_of(&self, node: usize) -> &[usize] {
        &self.neighbors[node * self.k..(node + 1) * self.k]
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

/// Exact k-nearest neighbors under squared L2 distance, self excluded, ties
/// broken toward the lower index. The same procedure runs at train and test
/// time.
pub fn build_knn_graph<T: Scalar>(features: &Tensor<T>, k: usize) -> Result<NodeGraph<T>> {
    let s = features.shape();
    let (m, d) = (s[0], s[1]);
    if k >= m {
        return Err(NetError::KnnTooLarge { k, m });
    }
    let data = features.values();
    let mut neighbors = vec![0usize; m * k];
    let fill = |j: usize, row: &mut [usize]| {
        let fj = &data[j * d..(j + 1) * d];
        let mut dists: Vec<(T, usize)> = (0..m)
            .filter(|&i| i != j)
            .map(|i| (sq_dist(fj, &data[i * d..(i + 1) * d]), i))
            .collect();
        dists.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for (slot, (_, idx)) in row.iter_mut().zip(&dists[..k]) {
            *slot = *idx;
        }
    };
    if m * m * d >= 1 << 16 {
        neighbors.par_chunks_mut(k).enumerate().for_each(|(j, row)| fill(j, row));
    } else {
        for (j, row) in neighbors.chunks_mut(k).enumerate() {
            fill(j, row);
        }
    }
    Ok(NodeGraph {
        features: features.clone(),
        neighbors,
        k,
    })
}

/// Split the other nodes around `anchor` into positives (same label),
/// negatives (different label), and hard negatives: negatives lying closer
/// to the anchor than its furthest positive. Empty positives give an empty
/// hard set.
pub fn partition_pnh<T: Scalar>(
    features: &Tensor<T>,
    labels: &[u8],
    anchor: usize,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let s = features.shape();
    let (m, d) = (s[0], s[1]);
    debug_assert_eq!(labels.len(), m);
    let data = features.values();
    let fa = &data[anchor * d..(anchor + 1) * d];
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut max_pos = None::<T>;
    for i in 0..m {
        if i == anchor {
            continue;
        }
        if labels[i] == labels[anchor] {
            let dist = sq_dist(fa, &data[i * d..(i + 1) * d]);
            max_pos = Some(match max_pos {
                Some(mp) if mp >= dist => mp,
                _ => dist,
            });
            positives.push(i);
        } else {
            negatives.push(i);
        }
    }
    let hard = match max_pos {
        None => Vec::new(),
        Some(mp) => negatives
            .iter()
            .copied()
            .filter(|&n| sq_dist(fa, &data[n * d..(n + 1) * d]) < mp)
            .collect(),
    };
    (positives, negatives, hard)
}

/// Differentiable (M, M) matrix of pairwise squared distances, entry (j, i)
/// holding d(j, i), built from the norm expansion ‖a‖² + ‖b‖² − 2a·b.
fn pairwise_distance_matrix<T: Scalar>(tape: &Tape<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    let d = features.shape()[1];
    let sq = tape.mul(features, features)?;
    let ones = Tensor::full(&[d, 1], T::one());
    let row_norms = tape.matmul(&sq, &ones)?; // (M,1)
    let gram = tape.matmul(features, &tape.transpose2d(features)?)?; // (M,M)
    let sums = tape.add(&row_norms, &tape.transpose2d(&row_norms)?)?; // (M,M) broadcast
    Ok(tape.sub(&sums, &tape.mul_scalar(&gram, 2.0)?)?)
}

/// Evenly strided anchor subset of at most `max_anchors` nodes.
fn anchor_set(m: usize, max_anchors: usize) -> Vec<usize> {
    if m <= max_anchors {
        (0..m).collect()
    } else {
        let stride = m.div_ceil(max_anchors);
        (0..m).step_by(stride).collect()
    }
}

/// Metric loss for one level: mean over anchors of
///   mean_P d + hinge(margin − mean_N d) + mean_H hinge(margin − d),
/// with empty sets contributing zero. Distances are squared L2 on the raw
/// node features; set membership comes from the current (detached) values
/// while the loss differentiates through the distances themselves.
///
/// The per-anchor brackets are evaluated for all anchors at once: class-sum
/// matmuls over the distance matrix give the positive/negative means, and a
/// precomputed hard-pair weight matrix turns the hard term into one
/// elementwise hinge and a row sum.
pub fn triplet_level_loss<T: Scalar>(
    tape: &Tape<T>,
    features: &Tensor<T>,
    labels: &[u8],
    margin: f64,
    max_anchors: usize,
) -> Result<Tensor<T>> {
    let s = features.shape();
    let m = s[0];
    if labels.len() != m {
        return Err(NetError::LevelMismatch(format!(
            "{m} nodes but {} labels",
            labels.len()
        )));
    }
    if m < 2 {
        return Ok(Tensor::scalar(T::zero()));
    }
    let dist = pairwise_distance_matrix(tape, features)?;
    let dvals = dist.values();

    let count1 = labels.iter().filter(|&&l| l != 0).count();
    let counts = [m - count1, count1];
    let mut sel0 = vec![T::zero(); m];
    let mut sel1 = vec![T::zero(); m];
    let mut inv_p = vec![T::zero(); m];
    let mut inv_n = vec![T::zero(); m];
    let mut mask_n = vec![T::zero(); m];
    let mut hard_w = vec![T::zero(); m * m];
    for j in 0..m {
        let lab = usize::from(labels[j] != 0);
        if lab == 0 {
            sel0[j] = T::one();
        } else {
            sel1[j] = T::one();
        }
        let same = counts[lab];
        let other = m - same;
        if same >= 2 {
            inv_p[j] = T::from_f64c(1.0 / (same - 1) as f64);
        }
        if other > 0 {
            inv_n[j] = T::from_f64c(1.0 / other as f64);
            mask_n[j] = T::one();
        }
        // Hard negatives: different-label nodes closer than the furthest
        // positive. Requires a non-empty positive set.
        if same >= 2 && other > 0 {
            let row = &dvals[j * m..(j + 1) * m];
            let mut max_pos = T::neg_infinity();
            for i in 0..m {
                if i != j && (labels[i] != 0) == (labels[j] != 0) && row[i] > max_pos {
                    max_pos = row[i];
                }
            }
            let hard: Vec<usize> = (0..m)
                .filter(|&i| (labels[i] != 0) != (labels[j] != 0) && row[i] < max_pos)
                .collect();
            if !hard.is_empty() {
                let w = T::from_f64c(1.0 / hard.len() as f64);
                for i in hard {
                    hard_w[j * m + i] = w;
                }
            }
        }
    }

    // Per-class distance sums via indicator matmuls: s_c(j) = Σ_{i∈c} d(j,i).
    // d(j,j) = 0 exactly in the norm expansion, so self-pairs drop out.
    let ind0 = Tensor::from_vec(sel0.clone(), &[m, 1]);
    let ind1 = Tensor::from_vec(sel1.clone(), &[m, 1]);
    let s0 = tape.matmul(&dist, &ind0)?;
    let s1 = tape.matmul(&dist, &ind1)?;
    let sel0_col = Tensor::from_vec(sel0, &[m, 1]);
    let sel1_col = Tensor::from_vec(sel1, &[m, 1]);
    let same_sum = tape.add(&tape.mul(&s0, &sel0_col)?, &tape.mul(&s1, &sel1_col)?)?;
    let other_sum = tape.add(&tape.mul(&s0, &sel1_col)?, &tape.mul(&s1, &sel0_col)?)?;

    let p_term = tape.mul(&same_sum, &Tensor::from_vec(inv_p, &[m, 1]))?;

    let n_mean = tape.mul(&other_sum, &Tensor::from_vec(inv_n, &[m, 1]))?;
    let margin_t = Tensor::scalar(T::from_f64c(margin));
    let n_hinge = tape.relu(&tape.sub(&margin_t, &n_mean)?)?;
    let n_term = tape.mul(&n_hinge, &Tensor::from_vec(mask_n, &[m, 1]))?;

    let hinges = tape.relu(&tape.sub(&margin_t, &dist)?)?; // (M,M)
    let weighted = tape.mul(&hinges, &Tensor::from_vec(hard_w, &[m, m]))?;
    let h_term = tape.matmul(&weighted, &Tensor::full(&[m, 1], T::one()))?;

    let totals = tape.add(&tape.add(&p_term, &n_term)?, &h_term)?;
    let anchors = anchor_set(m, max_anchors);
    let selected = if anchors.len() == m {
        totals
    } else {
        tape.gather_rows(&totals, anchors)?
    };
    Ok(tape.reduce_mean(&selected)?)
}

/// Sum of per-level metric losses.
pub fn triplet_loss<T: Scalar>(
    tape: &Tape<T>,
    levels: &[(Tensor<T>, GuidedMask)],
    margin: f64,
    max_anchors: usize,
) -> Result<Tensor<T>> {
    let mut total = Tensor::scalar(T::zero());
    for (features, mask) in levels {
        let term = triplet_level_loss(tape, features, &mask.labels, margin, max_anchors)?;
        total = tape.add(&total, &term)?;
    }
    Ok(total)
}

/// Learnable maps of the graph convolution: aggregation over the
/// concatenated (node ‖ max-relative) features, then the node update.
#[derive(Clone)]
pub struct GnnWeights<T: Scalar> {
    pub agg: LinearLayer<T>,
    pub update: LinearLayer<T>,
}

impl<T: Scalar> GnnWeights<T> {
    pub fn new(rng: &mut SplitMix64, d: usize) -> Self {
        GnnWeights {
            agg: LinearLayer::new(rng, 2 * d, d),
            // Zero update keeps a fresh block an identity under the residual.
            update: LinearLayer::zeros(d, d),
        }
    }
}

impl<T: Scalar> Params<T> for GnnWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.agg.visit(&join(prefix, "agg"), f);
        self.update.visit(&join(prefix, "update"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.agg.visit_mut(&join(prefix, "agg"), f);
        self.update.visit_mut(&join(prefix, "update"), f);
    }
}

/// Max-relative graph convolution over every node at once:
/// r_j = max_k (neighbor_k − node_j) elementwise, g = agg(node ‖ r),
/// out = relu(update(g)). The residual add belongs to the caller.
pub fn max_relative_conv<T: Scalar>(
    tape: &Tape<T>,
    nodes: &Tensor<T>,
    graph: &NodeGraph<T>,
    weights: &GnnWeights<T>,
) -> Result<Tensor<T>> {
    let s = nodes.shape();
    let (m, d) = (s[0], s[1]);
    let k = graph.k;
    if k == 0 {
        return Err(NetError::KnnTooLarge { k: 0, m });
    }
    let gathered = tape.gather_rows(nodes, graph.neighbors.clone())?; // (M·k, D)
    let stacked = tape.reshape(&gathered, &[m, k, d])?;
    let expanded = tape.reshape(nodes, &[m, 1, d])?;
    let diffs = tape.sub(&stacked, &expanded)?; // (M,k,D) broadcast
    let rel = tape.max_stack(&diffs, 1)?; // (M,D)
    let cat = tape.concat(&[nodes, &rel], 1)?; // (M,2D)
    let g = weights.agg.forward(tape, &cat)?;
    let updated = weights.update.forward(tape, &g)?;
    Ok(tape.relu(&updated)?)
}

/// Scalar-loop oracle for one node of the graph convolution; mirrors
/// [`max_relative_conv`] independently of the tape path.
pub fn max_relative_conv_node(
    node: &[f64],
    neighbor_feats: &[Vec<f64>],
    agg_w: &[f64],
    agg_b: &[f64],
    update_w: &[f64],
    update_b: &[f64],
) -> Vec<f64> {
    assert!(!neighbor_feats.is_empty(), "graph convolution needs at least one neighbor");
    let d = node.len();
    let mut rel = vec![f64::NEG_INFINITY; d];
    for nf in neighbor_feats {
        for j in 0..d {
            rel[j] = rel[j].max(nf[j] - node[j]);
        }
    }
    let mut cat = Vec::with_capacity(2 * d);
    cat.extend_from_slice(node);
    cat.extend_from_slice(&rel);
    // cat (1,2D) · agg_w (2D,D) + agg_b
    let mut g = vec![0.0; d];
    for (i, &cv) in cat.iter().enumerate() {
        for j in 0..d {
            g[j] += cv * agg_w[i * d + j];
        }
    }
    for j in 0..d {
        g[j] += agg_b[j];
    }
    let mut out = vec![0.0; d];
    for (i, &gv) in g.iter().enumerate() {
        for j in 0..d {
            out[j] += gv * update_w[i * d + j];
        }
    }
    for j in 0..d {
        out[j] = (out[j] + update_b[j]).max(0.0);
    }
    out
}

/// One guided graph block on a (D, H, W) pyramid feature: flatten to nodes,
/// build the k-NN graph, aggregate with max-relative convolution, residual
/// add, and reshape back. When a guided mask is supplied the block also
/// returns its metric-loss term computed on the pre-convolution features;
/// the output itself is identical with and without the mask.
pub struct GgnnBlock<T: Scalar> {
    pub weights: GnnWeights<T>,
    pub k: usize,
}

impl<T: Scalar> GgnnBlock<T> {
    pub fn new(rng: &mut SplitMix64, d: usize, k: usize) -> Self {
        GgnnBlock {
            weights: GnnWeights::new(rng, d),
            k,
        }
    }

    pub fn forward(
        &self,
        tape: &Tape<T>,
        s: &Tensor<T>,
        guided: Option<&GuidedMask>,
        margin: f64,
        max_anchors: usize,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let shape = s.shape();
        let (h, w) = (shape[1], shape[2]);
        let nodes = to_tokens(tape, s)?; // (M, D)
        let m = nodes.shape()[0];
        let k = self.k.min(m.saturating_sub(1)).max(1);
        let graph = build_knn_graph(&nodes.detach(), k)?;
        let gmn = match guided {
            Some(mask) => {
                if mask.h != h || mask.w != w {
                    return Err(NetError::LevelMismatch(format!(
                        "guided mask {}x{} does not match feature {h}x{w}",
                        mask.h, mask.w
                    )));
                }
                Some(triplet_level_loss(tape, &nodes, &mask.labels, margin, max_anchors)?)
            }
            None => None,
        };
        let aggregated = max_relative_conv(tape, &nodes, &graph, &self.weights)?;
        let out_tokens = tape.add(&nodes, &aggregated)?;
        let out = to_grid(tape, &out_tokens, h, w)?;
        Ok((out, gmn))
    }
}

impl<T: Scalar> Params<T> for GgnnBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.weights.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.weights.visit_mut(prefix, f);
    }
}

/// Literal per-anchor bracket of the metric loss, evaluated with plain
/// scalar arithmetic: mean_P d + hinge(margin − mean_N d) + mean_H
/// hinge(margin − d). Independent oracle for [`triplet_level_loss`].
pub fn anchor_triplet_bracket<T: Scalar>(
    features: &Tensor<T>,
    labels: &[u8],
    anchor: usize,
    margin: f64,
) -> f64 {
    let s = features.shape();
    let (m, d) = (s[0], s[1]);
    let data = features.values();
    let (positives, negatives, hard) = partition_pnh(features, labels, anchor);
    let fa = &data[anchor * d..(anchor + 1) * d];
    let dist = |i: usize| sq_dist(fa, &data[i * d..(i + 1) * d]).to_f64c();
    debug_assert!(anchor < m);
    let mut total = 0.0;
    if !positives.is_empty() {
        total += positives.iter().map(|&p| dist(p)).sum::<f64>() / positives.len() as f64;
    }
    if !negatives.is_empty() {
        let mean_n = negatives.iter().map(|&n| dist(n)).sum::<f64>() / negatives.len() as f64;
        total += (margin - mean_n).max(0.0);
    }
    if !hard.is_empty() {
        total += hard.iter().map(|&h| (margin - dist(h)).max(0.0)).sum::<f64>() / hard.len() as f64;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Params;

    fn rng() -> SplitMix64 {
        SplitMix64::new(0x69A)
    }

    #[test]
    fn downsample_top_left_block() {
        #[rustfmt::skip]
        let mask = vec![
            1, 1, 0, 0,
            1, 1, 0, 0,
            0, 0, 0, 0,
            0, 0, 0, 0,
        ];
        let g = downsample_mask(&mask, 4, 4, 2, 2, 1).unwrap();
        assert_eq!(g.labels, vec![1, 0, 0, 0]);
    }

    #[test]
    fn downsample_constant_mask_stays_constant() {
        let mask = vec![1u8; 64];
        for t in [1usize, 2, 4, 8] {
            let g = downsample_mask(&mask, 8, 8, t, t, 1).unwrap();
            assert!(g.labels.iter().all(|&v| v == 1));
        }
    }

    #[test]
    fn downsample_identity_when_sizes_match() {
        let mut r = rng();
        let mask: Vec<u8> = (0..36).map(|_| (r.next_bool()) as u8).collect();
        let g = downsample_mask(&mask, 6, 6, 6, 6, 2).unwrap();
        assert_eq!(g.labels, mask);
    }

    #[test]
    fn downsample_rejects_upscaling() {
        assert!(downsample_mask(&[0; 4], 2, 2, 4, 4, 1).is_err());
    }

    #[test]
    fn knn_one_dimensional_example() {
        let f = Tensor::from_vec(vec![0.0f64, 1.0, 10.0], &[3, 1]);
        let g = build_knn_graph(&f, 1).unwrap();
        assert_eq!(g.neighbors_of(0), &[1]);
        assert_eq!(g.neighbors_of(1), &[0]);
        assert_eq!(g.neighbors_of(2), &[1]);
    }

    #[test]
    fn knn_identical_features_tie_break_to_lowest_indices() {
        let f = Tensor::from_vec(vec![0.5f64; 5 * 3], &[5, 3]);
        let g = build_knn_graph(&f, 2).unwrap();
        assert_eq!(g.neighbors_of(0), &[1, 2]);
        assert_eq!(g.neighbors_of(1), &[0, 2]);
        assert_eq!(g.neighbors_of(4), &[0, 1]);
    }

    #[test]
    fn knn_rejects_k_not_below_node_count() {
        let f = Tensor::from_vec(vec![0.0f64; 6], &[3, 2]);
        assert!(matches!(
            build_knn_graph(&f, 3),
            Err(NetError::KnnTooLarge { k: 3, m: 3 })
        ));
    }

    /// Brute-force oracle: full pairwise distances, full sort, take k.
    fn knn_oracle<T: Scalar>(features: &Tensor<T>, k: usize) -> Vec<usize> {
        let s = features.shape();
        let (m, d) = (s[0], s[1]);
        let data = features.values();
        let mut out = Vec::with_capacity(m * k);
        for j in 0..m {
            let fj = &data[j * d..(j + 1) * d];
            let mut all: Vec<(T, usize)> = (0..m)
                .filter(|&i| i != j)
                .map(|i| {
                    let fi = &data[i * d..(i + 1) * d];
                    let mut acc = T::zero();
                    for (a, b) in fj.iter().zip(fi) {
                        let diff = *a - *b;
                        acc += diff * diff;
                    }
                    (acc, i)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            out.extend(all[..k].iter().map(|&(_, i)| i));
        }
        out
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        let mut r = rng();
        for _ in 0..30 {
            let m = 2 + r.usize_below(40);
            let d = 1 + r.usize_below(8);
            let k = 1 + r.usize_below(m - 1);
            let f = Tensor::from_vec(
                (0..m * d).map(|_| r.uniform(-1.0, 1.0) as f32).collect::<Vec<f32>>(),
                &[m, d],
            );
            let g = build_knn_graph(&f, k).unwrap();
            assert_eq!(g.neighbors, knn_oracle(&f, k), "m={m} d={d} k={k}");
        }
    }

    #[test]
    fn partition_far_negative_is_not_hard() {
        let f = Tensor::from_vec(vec![0.0f64, 1.0, 10.0], &[3, 1]);
        let (p, n, h) = partition_pnh(&f, &[0, 0, 1], 0);
        assert_eq!(p, vec![1]);
        assert_eq!(n, vec![2]);
        assert!(h.is_empty());
    }

    #[test]
    fn partition_near_negative_is_hard() {
        let f = Tensor::from_vec(vec![0.0f64, 5.0, 1.0], &[3, 1]);
        let (p, n, h) = partition_pnh(&f, &[0, 0, 1], 0);
        assert_eq!(p, vec![1]);
        assert_eq!(n, vec![2]);
        assert_eq!(h, vec![2]); // d=1 < 25
    }

    #[test]
    fn partition_single_class_has_no_negatives() {
        let f = Tensor::from_vec(vec![0.0f64, 1.0, 2.0], &[3, 1]);
        let (p, n, h) = partition_pnh(&f, &[1, 1, 1], 1);
        assert_eq!(p, vec![0, 2]);
        assert!(n.is_empty());
        assert!(h.is_empty());
    }

    #[test]
    fn anchor_bracket_worked_example_is_22() {
        // Anchor at 0, one positive at squared distance 4, one negative at
        // squared distance 1 (hence hard): 4 + (10−1) + (10−1) = 22.
        let f = Tensor::from_vec(vec![0.0f64, 2.0, 1.0], &[3, 1]);
        let bracket = anchor_triplet_bracket(&f, &[0, 0, 1], 0, 10.0);
        assert!((bracket - 22.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_zero_when_margins_satisfied() {
        // Two coincident clusters 16 > margin apart: every term vanishes.
        let f = Tensor::from_vec(vec![0.0f64, 0.0, 0.0, 4.0, 4.0, 4.0], &[6, 1]);
        let labels = [0, 0, 0, 1, 1, 1];
        let tape = Tape::new();
        let feats = f.requires_grad(true);
        let loss = triplet_level_loss(&tape, &feats, &labels, 10.0, 1024).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn triplet_single_class_is_mean_positive_distance() {
        let mut r = rng();
        let m = 7;
        let f = Tensor::from_vec((0..m * 2).map(|_| r.uniform(-1.0, 1.0)).collect::<Vec<f64>>(), &[m, 2]);
        let labels = vec![0u8; m];
        let tape = Tape::inference();
        let loss = triplet_level_loss(&tape, &f, &labels, 10.0, 1024).unwrap();
        let expected: f64 =
            (0..m).map(|j| anchor_triplet_bracket(&f, &labels, j, 10.0)).sum::<f64>() / m as f64;
        assert!((loss.item() - expected).abs() < 1e-9, "{} vs {expected}", loss.item());
    }

    #[test]
    fn triplet_matches_per_anchor_oracle_on_random_instances() {
        let mut r = rng();
        for _ in 0..25 {
            let m = 2 + r.usize_below(24);
            let d = 1 + r.usize_below(6);
            let f = Tensor::from_vec(
                (0..m * d).map(|_| r.uniform(-2.0, 2.0)).collect::<Vec<f64>>(),
                &[m, d],
            );
            let labels: Vec<u8> = (0..m).map(|_| r.next_bool() as u8).collect();
            let tape = Tape::inference();
            let loss = triplet_level_loss(&tape, &f, &labels, 10.0, 1024).unwrap();
            let expected: f64 = (0..m)
                .map(|j| anchor_triplet_bracket(&f, &labels, j, 10.0))
                .sum::<f64>()
                / m as f64;
            assert!(
                (loss.item() - expected).abs() < 1e-9,
                "m={m} d={d}: {} vs {expected}",
                loss.item()
            );
        }
    }

    #[test]
    fn triplet_gradient_step_decreases_positive_loss() {
        let mut r = rng();
        for trial in 0..20 {
            let m = 6 + r.usize_below(10);
            let d = 2 + r.usize_below(4);
            let data: Vec<f64> = (0..m * d).map(|_| r.uniform(-1.0, 1.0)).collect();
            let labels: Vec<u8> = (0..m).map(|i| (i % 2) as u8).collect();
            let tape = Tape::new();
            let feats = Tensor::from_vec(data.clone(), &[m, d]).requires_grad(true);
            let loss = triplet_level_loss(&tape, &feats, &labels, 10.0, 1024).unwrap();
            if loss.item() <= 0.0 {
                continue;
            }
            let grads = tape.backward(&loss).unwrap();
            let g = grads.get(&feats).unwrap();
            let stepped: Vec<f64> = data.iter().zip(g).map(|(v, gv)| v - 1e-3 * gv).collect();
            let tape2 = Tape::inference();
            let after = triplet_level_loss(&tape2, &Tensor::from_vec(stepped, &[m, d]), &labels, 10.0, 1024)
                .unwrap();
            assert!(
                after.item() < loss.item(),
                "trial {trial}: {} -> {}",
                loss.item(),
                after.item()
            );
        }
    }

    #[test]
    fn max_relative_hand_example() {
        // node (1,2), neighbors (2,2) and (0,5): diffs (1,0) and (−1,3),
        // elementwise max (1,3), aggregation input (1,2,1,3).
        let agg_identity: Vec<f64> = {
            // (2D, D) identity on the first D rows reproduces the node.
            let mut w = vec![0.0; 4 * 2];
            w[0] = 1.0;
            w[3] = 1.0;
            w
        };
        let update_identity = vec![1.0, 0.0, 0.0, 1.0];
        let out = max_relative_conv_node(
            &[1.0, 2.0],
            &[vec![2.0, 2.0], vec![0.0, 5.0]],
            &agg_identity,
            &[0.0, 0.0],
            &update_identity,
            &[0.0, 0.0],
        );
        // Identity aggregation keeps the node part; relu(identity·node).
        assert_eq!(out, vec![1.0, 2.0]);

        // Pick out the max-relative part instead (rows D..2D of the
        // aggregation weights).
        let mut agg_rel = vec![0.0; 4 * 2];
        agg_rel[2 * 2] = 1.0;
        agg_rel[3 * 2 + 1] = 1.0;
        let rel = max_relative_conv_node(
            &[1.0, 2.0],
            &[vec![2.0, 2.0], vec![0.0, 5.0]],
            &agg_rel,
            &[0.0, 0.0],
            &update_identity,
            &[0.0, 0.0],
        );
        assert_eq!(rel, vec![1.0, 3.0]);
    }

    #[test]
    fn max_relative_all_neighbors_equal_node_gives_zero_relative() {
        let node = vec![0.3, -0.7, 1.1];
        let out = max_relative_conv_node(
            &node,
            &[node.clone(), node.clone()],
            &vec![0.5; 6 * 3],
            &[0.0; 3],
            &{
                let mut w = vec![0.0; 9];
                w[0] = 1.0;
                w[4] = 1.0;
                w[8] = 1.0;
                w
            },
            &[0.0; 3],
        );
        // r = 0, so the aggregation sees (node ‖ 0).
        let expect: f64 = node.iter().sum::<f64>() * 0.5;
        for v in out {
            assert!((v - expect.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn vectorized_graph_conv_matches_node_oracle() {
        let mut r = rng();
        for _ in 0..15 {
            let m = 4 + r.usize_below(12);
            let d = 2 + r.usize_below(5);
            let k = 1 + r.usize_below(m - 1);
            let feats = Tensor::from_vec(
                (0..m * d).map(|_| r.uniform(-1.0, 1.0)).collect::<Vec<f64>>(),
                &[m, d],
            );
            let graph = build_knn_graph(&feats, k).unwrap();
            let weights = GnnWeights {
                agg: crate::layers::LinearLayer::new(&mut r, 2 * d, d),
                update: crate::layers::LinearLayer::new(&mut r, d, d),
            };
            let tape = Tape::inference();
            let out = max_relative_conv(&tape, &feats, &graph, &weights).unwrap();
            for j in 0..m {
                let node = feats.values()[j * d..(j + 1) * d].to_vec();
                let neigh: Vec<Vec<f64>> = graph
                    .neighbors_of(j)
                    .iter()
                    .map(|&i| feats.values()[i * d..(i + 1) * d].to_vec())
                    .collect();
                let expect = max_relative_conv_node(
                    &node,
                    &neigh,
                    weights.agg.weight.values(),
                    weights.agg.bias.values(),
                    weights.update.weight.values(),
                    weights.update.bias.values(),
                );
                for (a, b) in out.values()[j * d..(j + 1) * d].iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn ggnn_block_shape_and_zero_update_residual() {
        let mut r = rng();
        let block = GgnnBlock::<f64>::new(&mut r, 8, 4);
        let tape = Tape::inference();
        let s = Tensor::from_vec((0..8 * 36).map(|_| r.uniform(-1.0, 1.0)).collect::<Vec<f64>>(), &[8, 6, 6]);
        let (out, gmn) = block.forward(&tape, &s, None, 10.0, 1024).unwrap();
        assert_eq!(out.shape(), &[8, 6, 6]);
        assert!(gmn.is_none());
        // Default update weights are zero, so the block is a pure residual.
        assert_eq!(out.values(), s.values());
    }

    #[test]
    fn ggnn_block_output_is_identical_with_and_without_guidance() {
        let mut r = rng();
        let mut block = GgnnBlock::<f32>::new(&mut r, 6, 5);
        block.weights.update = crate::layers::LinearLayer::new(&mut r, 6, 6);
        for _ in 0..20 {
            let s = Tensor::from_vec(
                (0..6 * 16).map(|_| r.uniform(-1.0, 1.0) as f32).collect::<Vec<f32>>(),
                &[6, 4, 4],
            );
            let labels: Vec<u8> = (0..16).map(|_| r.next_bool() as u8).collect();
            let mask = GuidedMask { level: 1, h: 4, w: 4, labels };
            let train_tape = Tape::new();
            let (train_out, gmn) = block.forward(&train_tape, &s, Some(&mask), 10.0, 1024).unwrap();
            assert!(gmn.is_some());
            let infer_tape = Tape::inference();
            let (infer_out, none) = block.forward(&infer_tape, &s, None, 10.0, 1024).unwrap();
            assert!(none.is_none());
            assert_eq!(train_out.values(), infer_out.values());
        }
    }

    #[test]
    fn ggnn_params_enumerate_in_stable_order() {
        let mut r = rng();
        let block = GgnnBlock::<f32>::new(&mut r, 4, 3);
        let mut names = Vec::new();
        block.visit("gnn", &mut |n, _| names.push(n.to_string()));
        assert_eq!(names, vec!["gnn.agg.weight", "gnn.agg.bias", "gnn.update.weight", "gnn.update.bias"]);
    }
}
