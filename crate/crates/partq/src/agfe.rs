//! Adaptive global feature extraction.
//!
//! For every image pair the `K` pooled global part vectors are aggregated
//! with weights proportional to the product of both images' quality scores,
//! so the two global features are built from the regions both images have
//! reliable. The same weights apply to both images of a pair, which keeps the
//! resulting pairwise distance symmetric.

use ndarray::{Array1, Array2};

use crate::autodiff::{NodeId, Tape};
use crate::model::{Linear, Session};
use crate::part_branch::{cosine_distance, triplet_loss};
use crate::{sc, Scalar};

/// Normalized pair weights `w̃_k = q_k^a q_k^b / Σ_i q_i^a q_i^b`.
///
/// Strictly positive inputs guarantee a positive denominator; the smallest
/// representable positive value guards against underflow of every product.
pub fn pair_weights<F: Scalar>(q_a: &Array1<F>, q_b: &Array1<F>) -> Array1<F> {
    assert_eq!(q_a.len(), q_b.len(), "part count mismatch");
    let mut w = Array1::<F>::zeros(q_a.len());
    let mut total = F::zero();
    for k in 0..q_a.len() {
        let p = q_a[k] * q_b[k];
        w[k] = p;
        total = total + p;
    }
    let denom = total + F::min_positive_value();
    w.mapv_inplace(|v| v / denom);
    w
}

/// Pairwise global features: the same weights aggregate each image's own
/// part vectors, `h^a = Σ_k w̃_k g̃_k^a` and `h^b = Σ_k w̃_k g̃_k^b`.
pub fn pairwise_global<F: Scalar>(
    parts_a: &Array2<F>,
    parts_b: &Array2<F>,
    w: &Array1<F>,
) -> (Array1<F>, Array1<F>) {
    assert_eq!(parts_a.shape(), parts_b.shape(), "part shape mismatch");
    assert_eq!(parts_a.shape()[0], w.len(), "weight count mismatch");
    let c = parts_a.shape()[1];
    let mut h_a = Array1::<F>::zeros(c);
    let mut h_b = Array1::<F>::zeros(c);
    for k in 0..w.len() {
        let coef = w[k];
        h_a.zip_mut_with(&parts_a.row(k), |acc, &x| *acc = *acc + coef * x);
        h_b.zip_mut_with(&parts_b.row(k), |acc, &x| *acc = *acc + coef * x);
    }
    (h_a, h_b)
}

/// Cosine distance between the pairwise global features of two images.
pub fn pairwise_global_distance<F: Scalar>(
    parts_a: &Array2<F>,
    q_a: &Array1<F>,
    parts_b: &Array2<F>,
    q_b: &Array1<F>,
    eps: F,
) -> F {
    let w = pair_weights(q_a, q_b);
    let (h_a, h_b) = pairwise_global(parts_a, parts_b, &w);
    cosine_distance(h_a.view(), h_b.view(), eps)
}

/// Batched pair weights `(n, n, K)` from the quality matrix `(n, K)`.
pub fn pair_weight_tensor<F: Scalar>(tape: &mut Tape<F>, quality: NodeId) -> NodeId {
    let k = tape.value(quality).shape()[1];
    let qq = tape.pair_product(quality, quality);
    let den = tape.sum_last(qq);
    let den_guarded = tape.affine(den, F::one(), F::min_positive_value());
    let den_b = tape.broadcast_last(den_guarded, k);
    tape.div(qq, den_b)
}

/// Pairwise global features `(n, n, C')`: entry `(p, g)` aggregates image
/// `p`'s part vectors with the weights of pair `(p, g)`.
pub fn pairwise_features<F: Scalar>(
    tape: &mut Tape<F>,
    weights: NodeId,
    global_parts: NodeId,
) -> NodeId {
    tape.pair_mix_rows(weights, global_parts)
}

/// Identity loss over pairwise global features.
///
/// Every ordered pair contributes the cross-entropies of both directions; by
/// symmetry of the weights this equals twice the mean cross-entropy of the
/// `(p, g)` features labelled by `p`. The loss normalizes by the number of
/// included ordered pairs (all `n²`, or `n(n−1)` when self-pairs are
/// excluded).
pub fn pair_id_loss<F: Scalar>(
    s: &mut Session<F>,
    pair_feats: NodeId,
    classifier: Linear,
    labels: &[usize],
    include_diagonal: bool,
) -> NodeId {
    let n = labels.len();
    let c = s.tape.value(pair_feats).shape()[2];
    let flat = s.tape.reshape(pair_feats, vec![n * n, c]);
    let logits = classifier.apply(s, flat);
    let tiled: Vec<usize> = (0..n).flat_map(|p| std::iter::repeat_n(labels[p], n)).collect();
    let ce = s.tape.softmax_cross_entropy(logits, tiled);
    if include_diagonal {
        let total = s.tape.sum_all(ce);
        s.tape
            .affine(total, sc::<F>(2.0 / (n * n) as f64), F::zero())
    } else {
        let grid = s.tape.reshape(ce, vec![n, n]);
        let off_diag: Vec<(usize, usize)> = (0..n)
            .flat_map(|p| (0..n).filter(move |&g| g != p).map(move |g| (p, g)))
            .collect();
        let count = off_diag.len().max(1);
        let picked = s.tape.gather_pairs(grid, off_diag);
        let total = s.tape.sum_all(picked);
        s.tape
            .affine(total, sc::<F>(2.0 / count as f64), F::zero())
    }
}

/// Pairwise global distance matrix `(n, n)`:
/// `D[a, b] = 1 − cos(H[a, b], H[b, a])`.
pub fn global_distance_matrix<F: Scalar>(tape: &mut Tape<F>, pair_feats: NodeId, eps: F) -> NodeId {
    let sim = tape.swap_pair_cosine(pair_feats, eps);
    tape.affine(sim, -F::one(), F::one())
}

/// Batch-hard triplet loss over the pairwise global distance matrix.
pub fn global_triplet_loss<F: Scalar>(
    tape: &mut Tape<F>,
    dmat: NodeId,
    labels: &[usize],
    margin: F,
) -> NodeId {
    triplet_loss(tape, dmat, labels, margin)
}

/// Identity + triplet losses for a single-image global vector `(n, C')`,
/// used by the pooled-global ablation baselines.
pub fn single_global_losses<F: Scalar>(
    s: &mut Session<F>,
    vectors: NodeId,
    classifier: Linear,
    labels: &[usize],
    margin: F,
    eps: F,
) -> (NodeId, NodeId) {
    let logits = classifier.apply(s, vectors);
    let ce = s.tape.softmax_cross_entropy(logits, labels.to_vec());
    let total = s.tape.sum_all(ce);
    let id_loss = s
        .tape
        .affine(total, F::one() / sc::<F>(labels.len() as f64), F::zero());
    let sim = s.tape.cosine_sim_t(vectors, vectors, eps);
    let dmat = s.tape.affine(sim, -F::one(), F::one());
    let tp_loss = triplet_loss(&mut s.tape, dmat, labels, margin);
    (id_loss, tp_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamStore, Session};
    use ndarray::{ArrayD, Ix2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_scores_give_uniform_weights() {
        let q = Array1::from_elem(6, 0.4);
        let w = pair_weights(&q, &q);
        for &v in w.iter() {
            assert!((v - 1.0 / 6.0f64).abs() < 1e-12);
        }
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn occluded_part_is_suppressed_regardless_of_partner() {
        let mut qa = Array1::from_elem(4, 0.8);
        qa[1] = 1e-9;
        let qb = Array1::from_elem(4, 0.9);
        let w = pair_weights(&qa, &qb);
        assert!(w[1] < 1e-8, "suppressed weight {:?}", w[1]);
    }

    #[test]
    fn weights_match_oracle_and_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let qa = Array1::<f64>::from_shape_fn(6, |_| rng.random_range(0.001..0.999));
            let qb = Array1::<f64>::from_shape_fn(6, |_| rng.random_range(0.001..0.999));
            let w = pair_weights(&qa, &qb);
            let w_swapped = pair_weights(&qb, &qa);
            assert_eq!(w, w_swapped, "pair weights must be symmetric");
            let total: f64 = (0..6).map(|k| qa[k] * qb[k]).sum();
            for k in 0..6 {
                let expect = qa[k] * qb[k] / total;
                assert!((w[k] - expect).abs() < 1e-7);
            }
            assert!((w.sum() - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_part_sets_give_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let parts = Array2::<f64>::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0));
        let w = Array1::from_elem(4, 0.25);
        let (ha, hb) = pairwise_global(&parts, &parts, &w);
        assert_eq!(ha, hb);
    }

    #[test]
    fn one_hot_weights_select_one_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pa = Array2::<f64>::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let pb = Array2::<f64>::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let mut w = Array1::zeros(4);
        w[2] = 1.0;
        let (ha, hb) = pairwise_global(&pa, &pb, &w);
        assert_eq!(ha, pa.row(2).to_owned());
        assert_eq!(hb, pb.row(2).to_owned());
    }

    #[test]
    fn pairwise_global_matches_weighted_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pa = Array2::<f64>::from_shape_fn((6, 7), |_| rng.random_range(-1.0..1.0));
        let pb = Array2::<f64>::from_shape_fn((6, 7), |_| rng.random_range(-1.0..1.0));
        let qa = Array1::<f64>::from_shape_fn(6, |_| rng.random_range(0.01..0.99));
        let qb = Array1::<f64>::from_shape_fn(6, |_| rng.random_range(0.01..0.99));
        let w = pair_weights(&qa, &qb);
        let (ha, hb) = pairwise_global(&pa, &pb, &w);
        for c in 0..7 {
            let mut ea = 0.0;
            let mut eb = 0.0;
            for k in 0..6 {
                ea += w[k] * pa[[k, c]];
                eb += w[k] * pb[[k, c]];
            }
            assert!((ha[c] - ea).abs() < 1e-7);
            assert!((hb[c] - eb).abs() < 1e-7);
        }
    }

    #[test]
    fn pairwise_distance_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let pa = Array2::<f64>::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
            let pb = Array2::<f64>::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
            let qa = Array1::<f64>::from_shape_fn(4, |_| rng.random_range(0.01..0.99));
            let qb = Array1::<f64>::from_shape_fn(4, |_| rng.random_range(0.01..0.99));
            let d_ab = pairwise_global_distance(&pa, &qa, &pb, &qb, 1e-8);
            let d_ba = pairwise_global_distance(&pb, &qb, &pa, &qa, 1e-8);
            assert_eq!(d_ab, d_ba, "pairwise distance must be bitwise symmetric");
        }
    }

    #[test]
    fn suppressed_parts_cannot_move_the_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut pa = Array2::<f64>::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let pb = Array2::<f64>::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let mut qa = Array1::from_elem(4, 0.9);
        qa[3] = 1e-8; // part 3 effectively occluded
        let qb = Array1::from_elem(4, 0.9);
        let w = pair_weights(&qa, &qb);
        assert!(w[3] < 1e-6);
        let before = pairwise_global_distance(&pa, &qa, &pb, &qb, 1e-8);
        for c in 0..6 {
            pa[[3, c]] = rng.random_range(-100.0..100.0);
        }
        let after = pairwise_global_distance(&pa, &qa, &pb, &qb, 1e-8);
        assert!(
            (before - after).abs() < 1e-4,
            "suppressed part changed distance by {}",
            (before - after).abs()
        );
    }

    #[test]
    fn batched_tensors_agree_with_plain_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, k, c) = (4, 3, 5);
        let quality = ArrayD::from_shape_fn(vec![n, k], |_| rng.random_range(0.05..0.95));
        let gparts = ArrayD::from_shape_fn(vec![n, k, c], |_| rng.random_range(-1.0..1.0));

        let mut tape = Tape::<f64>::new();
        let qn = tape.leaf(quality.clone());
        let gn = tape.leaf(gparts.clone());
        let w = pair_weight_tensor(&mut tape, qn);
        let feats = pairwise_features(&mut tape, w, gn);
        let dmat = global_distance_matrix(&mut tape, feats, 1e-8);
        let dv = tape.value(dmat).view().into_dimensionality::<Ix2>().unwrap().to_owned();

        for a in 0..n {
            for b in 0..n {
                let pa = Array2::from_shape_fn((k, c), |(kk, cc)| gparts[[a, kk, cc]]);
                let pb = Array2::from_shape_fn((k, c), |(kk, cc)| gparts[[b, kk, cc]]);
                let qa = Array1::from_shape_fn(k, |kk| quality[[a, kk]]);
                let qb = Array1::from_shape_fn(k, |kk| quality[[b, kk]]);
                let expect = pairwise_global_distance(&pa, &qa, &pb, &qb, 1e-8);
                assert!((dv[[a, b]] - expect).abs() < 1e-9, "pair ({a},{b})");
                assert!((dv[[a, b]] - dv[[b, a]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_pair_loss_is_twice_cross_entropy() {
        // N = 1, zeroed classifier over 10 classes: loss = 2 ln 10
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let cls = Linear::init(&mut store, &mut rng, "cls", 6, 10, 0.0);
        let mut s = Session::new(&store);
        let quality = s.tape.leaf(ArrayD::from_elem(vec![1, 3], 0.5));
        let gparts = ArrayD::from_shape_fn(vec![1, 3, 6], |_| 0.3);
        let gp = s.tape.leaf(gparts);
        let w = pair_weight_tensor(&mut s.tape, quality);
        let feats = pairwise_features(&mut s.tape, w, gp);
        let loss = pair_id_loss(&mut s, feats, cls, &[4], true);
        let got = *s.tape.value(loss).first().unwrap();
        assert!((got - 2.0 * 10.0f64.ln()).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn pair_loss_matches_explicit_loop_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (n, k, c, classes) = (3, 4, 5, 6);
        let cls = Linear::init(&mut store, &mut rng, "cls", c, classes, 0.3);
        let labels = vec![2usize, 0, 5];
        let quality = ArrayD::from_shape_fn(vec![n, k], |_| rng.random_range(0.05..0.95));
        let gparts = ArrayD::from_shape_fn(vec![n, k, c], |_| rng.random_range(-1.0..1.0));

        let mut s = Session::new(&store);
        let qn = s.tape.leaf(quality.clone());
        let gn = s.tape.leaf(gparts.clone());
        let w = pair_weight_tensor(&mut s.tape, qn);
        let feats = pairwise_features(&mut s.tape, w, gn);
        let loss = pair_id_loss(&mut s, feats, cls, &labels, true);
        let got = *s.tape.value(loss).first().unwrap();

        // oracle: explicit double loop over ordered pairs, both CE terms
        let wmat = store.value(cls.w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let bvec = store
            .value(cls.b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let ce = |feat: &Array1<f64>, label: usize| -> f64 {
            let logits = feat.dot(&wmat) + &bvec;
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - logits[label]
        };
        let mut total = 0.0;
        for g in 0..n {
            for p in 0..n {
                let qp = Array1::from_shape_fn(k, |kk| quality[[p, kk]]);
                let qg = Array1::from_shape_fn(k, |kk| quality[[g, kk]]);
                let pp = Array2::from_shape_fn((k, c), |(kk, cc)| gparts[[p, kk, cc]]);
                let pg = Array2::from_shape_fn((k, c), |(kk, cc)| gparts[[g, kk, cc]]);
                let wts = pair_weights(&qp, &qg);
                let (hp, hg) = pairwise_global(&pp, &pg, &wts);
                total += ce(&hp, labels[p]) + ce(&hg, labels[g]);
            }
        }
        let expect = total / (n * n) as f64;
        assert!((got - expect).abs() < 1e-9, "got {got} expect {expect}");
    }

    #[test]
    fn identical_images_cost_margin_in_global_triplet() {
        let labels = vec![0, 0, 1, 1];
        let mut tape = Tape::<f64>::new();
        let dmat = tape.leaf(ArrayD::zeros(vec![4, 4]));
        let loss = global_triplet_loss(&mut tape, dmat, &labels, 0.3);
        assert!((tape.value(loss).first().unwrap() - 0.3).abs() < 1e-12);
    }
}
