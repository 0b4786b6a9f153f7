//! Part branch: per-stripe pooling, embedding, quality prediction, and the
//! quality-weighted part distance with its identity and triplet losses.
//!
//! Each stripe is pooled to a vector `z_k`, embedded by a non-shared affine
//! map to `f_k`, and scored by a non-shared predictor `sigmoid(BN(w·z + c))`.
//! Two images are compared by part-wise cosine distances averaged with
//! weights `q_k^a q_k^b`, so parts either image finds unreliable contribute
//! little. Because that distance feeds the triplet loss, quality scores are
//! learned jointly with the features without any quality annotation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis, Ix2};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::config::ModelConfig;
use crate::model::{Linear, Mode, ParamId, ParamStore, Session};
use crate::{sc, Scalar};

/// Scalar-channel batch norm of the quality pre-activation.
#[derive(Debug, Clone, Copy)]
pub struct BnScalar {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Buffer ids (separate store).
    pub run_mean: ParamId,
    pub run_var: ParamId,
}

/// Non-shared quality predictor for one part.
#[derive(Debug, Clone, Copy)]
pub struct QualityPredictor {
    pub lin: Linear,
    pub bn: BnScalar,
}

/// Tape nodes produced by one quality predictor.
pub struct QualityNodes {
    /// Raw pre-activation `w·z + c`, shape `(n, 1)`.
    pub preact: NodeId,
    /// Normalized pre-activation before the BN affine, shape `(n, 1)`.
    pub normalized: NodeId,
    /// Quality score in `(0, 1)`, shape `(n, 1)`.
    pub score: NodeId,
}

impl QualityPredictor {
    pub fn forward<F: Scalar>(
        &self,
        s: &mut Session<F>,
        buffers: &ParamStore<F>,
        z: NodeId,
        mode: Mode,
        bn_eps: F,
    ) -> QualityNodes {
        let n = s.tape.value(z).shape()[0];
        let preact = self.lin.apply(s, z);
        let normalized = match mode {
            Mode::Train => {
                let mu = s.tape.mean_axis0(preact);
                let mu_b = s.tape.broadcast_axis0(mu, n);
                let centered = s.tape.sub(preact, mu_b);
                let sq = s.tape.mul(centered, centered);
                let var = s.tape.mean_axis0(sq);
                let var_eps = s.tape.affine(var, F::one(), bn_eps);
                let std = s.tape.sqrt(var_eps);
                let std_b = s.tape.broadcast_axis0(std, n);
                s.tape.div(centered, std_b)
            }
            Mode::Eval => {
                let rm = buffers.value(self.bn.run_mean)[0];
                let rv = buffers.value(self.bn.run_var)[0];
                let inv = F::one() / (rv + bn_eps).sqrt();
                s.tape.affine(preact, inv, -rm * inv)
            }
        };
        let gamma = s.param(self.bn.gamma);
        let beta = s.param(self.bn.beta);
        let gamma_b = s.tape.broadcast_axis0(gamma, n);
        let beta_b = s.tape.broadcast_axis0(beta, n);
        let scaled = s.tape.mul(normalized, gamma_b);
        let shifted = s.tape.add(scaled, beta_b);
        let score = s.tape.sigmoid(shifted);
        QualityNodes {
            preact,
            normalized,
            score,
        }
    }
}

/// Per-part layers of the branch. Nothing is shared between parts.
pub struct PartBranch {
    pub embed: Vec<Linear>,
    pub quality: Vec<QualityPredictor>,
    pub classifiers: Vec<Linear>,
}

impl PartBranch {
    pub fn init<F: Scalar>(
        cfg: &ModelConfig,
        params: &mut ParamStore<F>,
        buffers: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c = cfg.backbone.output_channels;
        let std_lin = (1.0 / c as f64).sqrt();
        let mut embed = Vec::with_capacity(cfg.parts);
        let mut quality = Vec::with_capacity(cfg.parts);
        let mut classifiers = Vec::with_capacity(cfg.parts);
        for k in 0..cfg.parts {
            embed.push(Linear::init(
                params,
                rng,
                &format!("part_embed.{k}"),
                c,
                cfg.embed_dim,
                std_lin,
            ));
            let lin = Linear::init(params, rng, &format!("quality.{k}.lin"), c, 1, std_lin);
            let gamma = params.insert(
                format!("quality.{k}.bn.gamma"),
                ndarray::ArrayD::from_elem(vec![1], F::one()),
            );
            let beta = params.insert(
                format!("quality.{k}.bn.beta"),
                ndarray::ArrayD::zeros(vec![1]),
            );
            let run_mean = buffers.insert(
                format!("quality.{k}.bn.run_mean"),
                ndarray::ArrayD::zeros(vec![1]),
            );
            let run_var = buffers.insert(
                format!("quality.{k}.bn.run_var"),
                ndarray::ArrayD::from_elem(vec![1], F::one()),
            );
            quality.push(QualityPredictor {
                lin,
                bn: BnScalar {
                    gamma,
                    beta,
                    run_mean,
                    run_var,
                },
            });
            classifiers.push(Linear::init(
                params,
                rng,
                &format!("cls.part.{k}"),
                cfg.embed_dim,
                cfg.num_classes,
                0.01,
            ));
        }
        PartBranch {
            embed,
            quality,
            classifiers,
        }
    }
}

/// Region average pooling: per-channel spatial mean over one stripe.
pub fn rap<F: Scalar>(stripe: ArrayView3<F>) -> Array1<F> {
    let (c, h, w) = (stripe.shape()[0], stripe.shape()[1], stripe.shape()[2]);
    let scale = F::one() / sc::<F>((h * w) as f64);
    Array1::from_iter(
        (0..c).map(|ch| stripe.index_axis(Axis(0), ch).iter().copied().sum::<F>() * scale),
    )
}

/// Cosine distance `1 − x·y / (|x||y| + eps)`.
pub fn cosine_distance<F: Scalar>(x: ArrayView1<F>, y: ArrayView1<F>, eps: F) -> F {
    let dot = x.iter().zip(y.iter()).map(|(&a, &b)| a * b).sum::<F>();
    let nx = x.iter().map(|&a| a * a).sum::<F>().sqrt();
    let ny = y.iter().map(|&b| b * b).sum::<F>().sqrt();
    F::one() - dot / (nx * ny + eps)
}

/// Part-wise cosine distances between two `K × d` embedding sets.
pub fn part_cosine_distances<F: Scalar>(
    a: &Array2<F>,
    b: &Array2<F>,
    eps: F,
) -> Array1<F> {
    assert_eq!(a.shape(), b.shape(), "part embedding shape mismatch");
    Array1::from_iter(
        a.rows()
            .into_iter()
            .zip(b.rows())
            .map(|(x, y)| cosine_distance(x, y, eps)),
    )
}

/// Quality-weighted average of part distances:
/// `Σ q_a q_b d / (Σ q_a q_b + eps)`.
pub fn quality_weighted_distance<F: Scalar>(
    d: &Array1<F>,
    q_a: &Array1<F>,
    q_b: &Array1<F>,
    eps: F,
) -> F {
    assert!(d.len() == q_a.len() && d.len() == q_b.len(), "part count mismatch");
    let mut num = F::zero();
    let mut den = F::zero();
    for k in 0..d.len() {
        let w = q_a[k] * q_b[k];
        num = num + w * d[k];
        den = den + w;
    }
    num / (den + eps)
}

/// Batched quality-weighted distance matrix between all rows of a batch.
///
/// `part_embeds` holds one `(n, d)` node per part; `quality` is `(n, K)`.
/// Output is the `(n, n)` matrix used for triplet mining.
pub fn part_distance_matrix<F: Scalar>(
    tape: &mut Tape<F>,
    part_embeds: &[NodeId],
    quality: NodeId,
    eps: F,
) -> NodeId {
    let per_part: Vec<NodeId> = part_embeds
        .iter()
        .map(|&f| {
            let sim = tape.cosine_sim_t(f, f, eps);
            tape.affine(sim, -F::one(), F::one())
        })
        .collect();
    let dstack = tape.stack(&per_part, 2);
    let qq = tape.pair_product(quality, quality);
    let weighted = tape.mul(qq, dstack);
    let num = tape.sum_last(weighted);
    let den_raw = tape.sum_last(qq);
    let den = tape.affine(den_raw, F::one(), eps);
    tape.div(num, den)
}

/// Identity loss over all parts: mean over the batch of the summed per-part
/// cross-entropies. The sum over parts is intentionally not divided by `K`.
pub fn part_id_loss<F: Scalar>(
    s: &mut Session<F>,
    part_embeds: &[NodeId],
    classifiers: &[Linear],
    labels: &[usize],
) -> NodeId {
    assert_eq!(part_embeds.len(), classifiers.len());
    let mut total: Option<NodeId> = None;
    for (&f, cls) in part_embeds.iter().zip(classifiers.iter()) {
        let logits = cls.apply(s, f);
        let ce = s.tape.softmax_cross_entropy(logits, labels.to_vec());
        total = Some(match total {
            Some(t) => s.tape.add(t, ce),
            None => ce,
        });
    }
    let summed = s.tape.sum_all(total.expect("at least one part"));
    s.tape
        .affine(summed, F::one() / sc::<F>(labels.len() as f64), F::zero())
}

/// Hardest positive / hardest negative per anchor, by raw distance values.
/// Positives include the anchor itself (distance 0, never selected unless all
/// positives coincide); every anchor must see at least one negative.
pub(crate) fn batch_hard_pairs<F: Scalar>(
    d: &ArrayView2<F>,
    labels: &[usize],
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let n = labels.len();
    let mut ap = Vec::with_capacity(n);
    let mut an = Vec::with_capacity(n);
    for anchor in 0..n {
        let mut hardest_pos = (anchor, F::neg_infinity());
        let mut hardest_neg: Option<(usize, F)> = None;
        for other in 0..n {
            let dist = d[[anchor, other]];
            if labels[other] == labels[anchor] {
                if dist > hardest_pos.1 {
                    hardest_pos = (other, dist);
                }
            } else {
                match hardest_neg {
                    Some((_, best)) if dist >= best => {}
                    _ => hardest_neg = Some((other, dist)),
                }
            }
        }
        let neg = hardest_neg.expect("batch must contain at least two identities");
        ap.push((anchor, hardest_pos.0));
        an.push((anchor, neg.0));
    }
    (ap, an)
}

/// Batch-hard triplet loss over a distance matrix node. The average runs over
/// the anchors whose hardest triplet violates the margin; when none do the
/// loss is exactly zero.
pub fn triplet_loss<F: Scalar>(
    tape: &mut Tape<F>,
    dmat: NodeId,
    labels: &[usize],
    margin: F,
) -> NodeId {
    let (ap, an) = {
        let d = tape.value(dmat).view().into_dimensionality::<Ix2>().unwrap();
        batch_hard_pairs(&d, labels)
    };
    let dap = tape.gather_pairs(dmat, ap);
    let dan = tape.gather_pairs(dmat, an);
    let diff = tape.sub(dap, dan);
    let shifted = tape.affine(diff, F::one(), margin);
    let violating = tape.value(shifted).iter().filter(|v| **v > F::zero()).count();
    let hinged = tape.relu(shifted);
    let total = tape.sum_all(hinged);
    let scale = if violating > 0 {
        F::one() / sc::<F>(violating as f64)
    } else {
        F::zero()
    };
    tape.affine(total, scale, F::zero())
}

/// Part triplet loss: batch-hard mining over the quality-weighted part
/// distance matrix.
pub fn part_triplet_loss<F: Scalar>(
    tape: &mut Tape<F>,
    dmat: NodeId,
    labels: &[usize],
    margin: F,
) -> NodeId {
    triplet_loss(tape, dmat, labels, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rap_of_constant_stripe_is_constant() {
        let stripe = Array3::<f64>::from_elem((5, 2, 3), 3.0);
        let z = rap(stripe.view());
        assert_eq!(z.len(), 5);
        for &v in z.iter() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rap_of_single_pixel_is_that_pixel() {
        let stripe = Array3::<f64>::from_shape_fn((4, 1, 1), |(c, _, _)| c as f64 * 1.5);
        let z = rap(stripe.view());
        for (c, &v) in z.iter().enumerate() {
            assert_eq!(v, c as f64 * 1.5);
        }
    }

    #[test]
    fn rap_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stripe = Array3::<f64>::from_shape_fn((6, 4, 8), |_| rng.random_range(-1.0..1.0));
        let z = rap(stripe.view());
        for c in 0..6 {
            let mut acc = 0.0;
            for y in 0..4 {
                for x in 0..8 {
                    acc += stripe[[c, y, x]];
                }
            }
            assert!((z[c] - acc / 32.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_distance_limits() {
        let a = Array1::from_vec(vec![1.0, 2.0, -0.5]);
        let b = a.mapv(|x: f64| -x);
        assert!(cosine_distance(a.view(), a.view(), 1e-8) < 1e-6);
        assert!((cosine_distance(a.view(), b.view(), 1e-8) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn part_distances_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Array2::<f64>::from_shape_fn((6, 16), |_| rng.random_range(-1.0..1.0));
        let b = Array2::<f64>::from_shape_fn((6, 16), |_| rng.random_range(-1.0..1.0));
        let d = part_cosine_distances(&a, &b, 1e-8);
        for k in 0..6 {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for j in 0..16 {
                dot += a[[k, j]] * b[[k, j]];
                na += a[[k, j]] * a[[k, j]];
                nb += b[[k, j]] * b[[k, j]];
            }
            let expect = 1.0 - dot / (na.sqrt() * nb.sqrt() + 1e-8);
            assert!((d[k] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_quality_reduces_to_arithmetic_mean() {
        let d = Array1::<f64>::from_vec(vec![0.1, 0.5, 0.9, 0.3]);
        let q = Array1::<f64>::from_elem(4, 1.0);
        let got = quality_weighted_distance(&d, &q, &q, 0.0);
        assert!((got - 0.45).abs() < 1e-12);
    }

    #[test]
    fn one_hot_quality_selects_single_part() {
        let d = Array1::<f64>::from_vec(vec![0.1, 0.5, 0.9, 0.3]);
        let mut q = Array1::<f64>::from_elem(4, 1e-12);
        q[2] = 1.0;
        let got = quality_weighted_distance(&d, &q, &q, 1e-8);
        assert!((got - 0.9).abs() < 1e-4);
    }

    #[test]
    fn weighted_distance_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let d = Array1::<f64>::from_shape_fn(6, |_| rng.random_range(0.0..2.0));
            let qa = Array1::<f64>::from_shape_fn(6, |_| rng.random_range(0.01..0.99));
            let qb = Array1::<f64>::from_shape_fn(6, |_| rng.random_range(0.01..0.99));
            let got = quality_weighted_distance(&d, &qa, &qb, 1e-8);
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..6 {
                num += qa[k] * qb[k] * d[k];
                den += qa[k] * qb[k];
            }
            assert!((got - num / (den + 1e-8)).abs() < 1e-7);
        }
    }

    #[test]
    fn distance_matrix_node_agrees_with_plain_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 5;
        let k = 3;
        let d = 7;
        let embeds: Vec<ArrayD<f64>> = (0..k)
            .map(|_| ArrayD::from_shape_fn(vec![n, d], |_| rng.random_range(-1.0..1.0)))
            .collect();
        let quality = ArrayD::from_shape_fn(vec![n, k], |_| rng.random_range(0.05..0.95));

        let mut tape = Tape::new();
        let embed_nodes: Vec<NodeId> = embeds.iter().map(|e| tape.leaf(e.clone())).collect();
        let qnode = tape.leaf(quality.clone());
        let dmat = part_distance_matrix(&mut tape, &embed_nodes, qnode, 1e-8);
        let dv = tape.value(dmat).view().into_dimensionality::<Ix2>().unwrap().to_owned();

        for i in 0..n {
            for j in 0..n {
                let fa = Array2::from_shape_fn((k, d), |(kk, t)| embeds[kk][[i, t]]);
                let fb = Array2::from_shape_fn((k, d), |(kk, t)| embeds[kk][[j, t]]);
                let qa = Array1::from_shape_fn(k, |kk| quality[[i, kk]]);
                let qb = Array1::from_shape_fn(k, |kk| quality[[j, kk]]);
                let dist = part_cosine_distances(&fa, &fb, 1e-8);
                let expect = quality_weighted_distance(&dist, &qa, &qb, 1e-8);
                assert!((dv[[i, j]] - expect).abs() < 1e-9, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn identical_embeddings_cost_margin_per_anchor() {
        let n = 4;
        let labels = vec![0, 0, 1, 1];
        let mut tape = Tape::<f64>::new();
        let dmat = tape.leaf(ArrayD::zeros(vec![n, n]));
        let loss = triplet_loss(&mut tape, dmat, &labels, 0.3);
        assert!((tape.value(loss).first().unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn satisfied_margin_gives_zero_loss() {
        // positives at distance 0, negatives at distance 1, margin 0.3
        let labels = vec![0, 0, 1, 1];
        let d = ArrayD::from_shape_fn(vec![4, 4], |ix| {
            let (i, j) = (ix[0], ix[1]);
            if labels[i] == labels[j] {
                0.0
            } else {
                1.0
            }
        });
        let mut tape = Tape::<f64>::new();
        let dmat = tape.leaf(d);
        let loss = triplet_loss(&mut tape, dmat, &labels, 0.3);
        assert_eq!(*tape.value(loss).first().unwrap(), 0.0);
    }

    #[test]
    fn mining_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels = vec![0, 0, 1, 1];
        let n = 4;
        for _ in 0..25 {
            let mut d = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        d[[i, j]] = rng.random_range(0.0..2.0);
                    }
                }
            }
            let margin = 0.3;
            // oracle: exhaustive hardest positive / negative per anchor
            let mut expected_sum = 0.0;
            let mut violating = 0usize;
            for a in 0..n {
                let mut worst_pos = f64::NEG_INFINITY;
                let mut best_neg = f64::INFINITY;
                for o in 0..n {
                    if labels[o] == labels[a] {
                        worst_pos = worst_pos.max(d[[a, o]]);
                    } else {
                        best_neg = best_neg.min(d[[a, o]]);
                    }
                }
                let term = margin + worst_pos - best_neg;
                if term > 0.0 {
                    violating += 1;
                    expected_sum += term;
                }
            }
            let expected = if violating > 0 {
                expected_sum / violating as f64
            } else {
                0.0
            };
            let mut tape = Tape::<f64>::new();
            let dmat = tape.leaf(d.clone().into_dyn());
            let loss = triplet_loss(&mut tape, dmat, &labels, margin);
            assert!((tape.value(loss).first().unwrap() - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn quality_head_saturation_and_midpoint() {
        // zero weights => constant pre-activation, BN leaves zeros, so the
        // sigmoid input equals beta.
        use crate::config::ModelConfig;
        use crate::model::{Mode, Model};
        let mut cfg = ModelConfig::default();
        cfg.backbone.input_height = 32;
        cfg.backbone.input_width = 16;
        cfg.backbone.output_channels = 8;
        cfg.parts = 2;
        cfg.embed_dim = 4;
        cfg.global_dim = 4;
        cfg.num_classes = 2;
        let mut model = Model::<f64>::new(cfg, 0).unwrap();
        // zero the quality linear layers; beta drives the output
        for part in 0..2 {
            let lin = model.part_branch().quality[part].lin;
            model.params_mut().value_mut(lin.w).fill(0.0);
            model.params_mut().value_mut(lin.b).fill(0.0);
        }
        let images = ndarray::Array4::<f64>::from_shape_fn((3, 3, 32, 16), |(i, c, y, x)| {
            ((i + c + y + x) % 5) as f64 * 0.1
        });
        let fwd = model.forward(images.view(), Mode::Train).unwrap();
        let q = fwd.session.tape.value(fwd.nodes.quality_mat);
        for &v in q.iter() {
            assert!((v - 0.5).abs() < 1e-9, "beta=0 should give q=0.5, got {v}");
        }
        drop(fwd);

        let beta = model.part_branch().quality[0].bn.beta;
        model.params_mut().value_mut(beta)[0] = 20.0;
        let fwd = model.forward(images.view(), Mode::Train).unwrap();
        let q = fwd.session.tape.value(fwd.nodes.quality_mat);
        let v = q[[0, 0]];
        assert!(v > 0.999999 && v < 1.0, "saturated score {v}");
    }

    #[test]
    fn batch_norm_moments_are_unit_scale() {
        use crate::config::ModelConfig;
        use crate::model::{Mode, Model};
        let mut cfg = ModelConfig::default();
        cfg.backbone.input_height = 32;
        cfg.backbone.input_width = 16;
        cfg.backbone.output_channels = 8;
        cfg.parts = 2;
        cfg.embed_dim = 4;
        cfg.global_dim = 4;
        cfg.num_classes = 2;
        let mut model = Model::<f64>::new(cfg, 2).unwrap();
        // scale the predictor weights up so the pre-activation variance
        // dominates the batch-norm epsilon
        for part in 0..2 {
            let lin = model.part_branch().quality[part].lin;
            model.params_mut().value_mut(lin.w).mapv_inplace(|v| v * 20.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let images =
            ndarray::Array4::<f64>::from_shape_fn((64, 3, 32, 16), |_| rng.random_range(0.0..1.0));
        let fwd = model.forward(images.view(), Mode::Train).unwrap();
        for &node in &fwd.nodes.quality_normed {
            let vals = fwd.session.tape.value(node);
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-4, "normalized mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "normalized var {var}");
        }
    }

    #[test]
    fn different_parts_use_different_embeddings() {
        use crate::config::ModelConfig;
        use crate::model::{Model, Session};
        let mut cfg = ModelConfig::default();
        cfg.backbone.input_height = 32;
        cfg.backbone.input_width = 16;
        cfg.backbone.output_channels = 8;
        cfg.parts = 2;
        cfg.embed_dim = 4;
        cfg.global_dim = 4;
        cfg.num_classes = 2;
        let model = Model::<f64>::new(cfg, 4).unwrap();
        // identical pooled vector fed into both non-shared embeddings
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let z = ndarray::ArrayD::from_shape_fn(vec![1, 8], |_| rng.random_range(-1.0..1.0));
        let mut s = Session::new(model.params());
        let zn = s.tape.leaf(z);
        let f0 = model.part_branch().embed[0].apply(&mut s, zn);
        let f1 = model.part_branch().embed[1].apply(&mut s, zn);
        assert_ne!(s.tape.value(f0), s.tape.value(f1));
    }
}
