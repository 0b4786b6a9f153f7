//! Identity-aware spatial attention.
//!
//! A coarse global vector is built by pooling the projected feature map per
//! stripe and averaging with normalized part quality weights, refined through
//! a two-layer bottleneck (reduce, ReLU, expand), and dotted against every
//! pixel to produce a sigmoid attention map. The map re-weights the feature
//! map residually, suppressing pixels that do not belong to the identity the
//! coarse vector describes — including pixels of other pedestrians.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis, Ix1};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::NodeId;
use crate::config::ModelConfig;
use crate::model::{ConvSpec, Linear, ParamStore, Session};
use crate::{sc, Scalar};

pub struct IsaModule {
    /// 1x1 projection of the backbone map to `C'` channels.
    pub project: ConvSpec,
    /// Bottleneck reduction `C' -> C'/r`.
    pub reduce: Linear,
    /// Re-expansion `C'/r -> C'`.
    pub expand: Linear,
    /// Identity classifier applied to the reduced vector.
    pub classifier: Linear,
    use_bias: bool,
}

impl IsaModule {
    pub fn init<F: Scalar>(
        cfg: &ModelConfig,
        params: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c = cfg.backbone.output_channels;
        let cg = cfg.global_dim;
        let hidden = cg / cfg.reduction;
        let project = ConvSpec::init(params, rng, "isa.project", c, cg, 1, 1, 0);
        let reduce = Linear::init(params, rng, "isa.reduce", cg, hidden, (2.0 / cg as f64).sqrt());
        let expand = Linear::init(
            params,
            rng,
            "isa.expand",
            hidden,
            cg,
            (1.0 / hidden as f64).sqrt(),
        );
        let classifier = Linear::init(params, rng, "cls.global", hidden, cfg.num_classes, 0.01);
        IsaModule {
            project,
            reduce,
            expand,
            classifier,
            use_bias: cfg.excite_bias,
        }
    }

    /// Two-layer bottleneck: returns the reduced (post-ReLU) and re-expanded
    /// vectors.
    pub fn excite<F: Scalar>(&self, s: &mut Session<F>, h: NodeId) -> (NodeId, NodeId) {
        let pre = if self.use_bias {
            self.reduce.apply(s, h)
        } else {
            self.reduce.apply_no_bias(s, h)
        };
        let hidden = s.tape.relu(pre);
        let expanded = if self.use_bias {
            self.expand.apply(s, hidden)
        } else {
            self.expand.apply_no_bias(s, hidden)
        };
        (hidden, expanded)
    }

    /// Sigmoid of the per-pixel inner product between the map `(n, C', h, w)`
    /// and the refined vector `(n, C')`.
    pub fn attention_map<F: Scalar>(&self, s: &mut Session<F>, g: NodeId, refined: NodeId) -> NodeId {
        let pre = s.tape.pixel_dot(g, refined);
        s.tape.sigmoid(pre)
    }

    /// Residual re-weighting `G̃ = M ⊙ G + G`.
    pub fn apply_attention<F: Scalar>(&self, s: &mut Session<F>, g: NodeId, m: NodeId) -> NodeId {
        let scaled = s.tape.scale_spatial(g, m);
        s.tape.add(scaled, g)
    }

    /// Cross-entropy on the reduced bottleneck vector, averaged over the batch.
    pub fn global_id_loss<F: Scalar>(
        &self,
        s: &mut Session<F>,
        hidden: NodeId,
        labels: &[usize],
    ) -> NodeId {
        let logits = self.classifier.apply(s, hidden);
        let ce = s.tape.softmax_cross_entropy(logits, labels.to_vec());
        let total = s.tape.sum_all(ce);
        s.tape
            .affine(total, F::one() / sc::<F>(labels.len() as f64), F::zero())
    }
}

/// Normalized quality weights and the coarse global vector
/// `h = Σ_k q̂_k g_k` for one image.
pub fn coarse_global<F: Scalar>(g_parts: &Array2<F>, q: &Array1<F>) -> (Array1<F>, Array1<F>) {
    assert_eq!(g_parts.shape()[0], q.len(), "part count mismatch");
    let total: F = q.iter().copied().sum();
    let qhat = q.mapv(|v| v / total);
    let c = g_parts.shape()[1];
    let mut h = Array1::<F>::zeros(c);
    for (k, row) in g_parts.rows().into_iter().enumerate() {
        let w = qhat[k];
        h.zip_mut_with(&row, |acc, &x| *acc = *acc + w * x);
    }
    (h, qhat)
}

/// Plain-array 1x1 projection for verification: per-pixel `w·x + b`.
pub fn project_global_array<F: Scalar>(
    store: &ParamStore<F>,
    conv: &ConvSpec,
    f: ArrayView3<F>,
) -> Array3<F> {
    let w = store.value(conv.w);
    let b = store.value(conv.b).view().into_dimensionality::<Ix1>().unwrap();
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let (c, h, wd) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    assert_eq!(c, cin);
    let wmat = w
        .view()
        .into_shape_with_order((cout, cin))
        .unwrap()
        .to_owned();
    let mut out = Array3::<F>::zeros((cout, h, wd));
    for y in 0..h {
        for x in 0..wd {
            for o in 0..cout {
                let mut acc = b[o];
                for i in 0..cin {
                    acc = acc + wmat[[o, i]] * f[[i, y, x]];
                }
                out[[o, y, x]] = acc;
            }
        }
    }
    out
}

/// Plain-array attention map: `sigmoid(G[:, y, x] · refined)` per pixel,
/// clamped into the open interval like the tape op.
pub fn attention_map_array<F: Scalar>(g: ArrayView3<F>, refined: ArrayView1<F>) -> Array2<F> {
    let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    assert_eq!(c, refined.len());
    let lo = F::min_positive_value();
    let hi = F::one() - F::epsilon();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut dot = F::zero();
        for ch in 0..c {
            dot = dot + g[[ch, y, x]] * refined[ch];
        }
        let s = F::one() / (F::one() + (-dot).exp());
        s.max(lo).min(hi)
    })
}

/// Plain-array residual re-weighting `G̃ = M ⊙ G + G`.
pub fn apply_attention_array<F: Scalar>(g: ArrayView3<F>, m: &Array2<F>) -> Array3<F> {
    let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    assert_eq!(m.shape(), &[h, w]);
    let mut out = g.to_owned();
    for ch in 0..c {
        let mut plane = out.index_axis_mut(Axis(0), ch);
        plane.zip_mut_with(m, |v, &mm| *v = *v + *v * mm);
    }
    out
}
