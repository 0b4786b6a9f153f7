//! Model assembly: parameter registry, tape sessions, and the full forward
//! pass producing part embeddings, quality scores, and global features.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView4, Axis, Ix2, Ix3, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape};
use crate::backbone::BackboneNet;
use crate::config::{GlobalMode, ModelConfig};
use crate::error::{Error, Result};
use crate::isa::IsaModule;
use crate::part_branch::PartBranch;
use crate::{sc, Scalar};

pub type ParamId = usize;

/// Named tensor registry. Parameters and persistent buffers (batch-norm
/// running statistics) each live in one of these; checkpoints serialize them
/// by name.
pub struct ParamStore<F: Scalar> {
    entries: Vec<(String, ArrayD<F>)>,
    index: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.clone(), value));
        let id = self.entries.len() - 1;
        self.index.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Total scalar element count across all entries.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

/// One tape-building pass over a parameter store. Parameters enter the tape
/// lazily and exactly once, so gradients can be read back per [`ParamId`].
pub struct Session<'m, F: Scalar> {
    pub tape: Tape<F>,
    store: &'m ParamStore<F>,
    nodes: Vec<Option<NodeId>>,
}

impl<'m, F: Scalar> Session<'m, F> {
    pub fn new(store: &'m ParamStore<F>) -> Self {
        Session {
            tape: Tape::new(),
            store,
            nodes: vec![None; store.len()],
        }
    }

    /// Tape node for a parameter, inserting the leaf on first use.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        match self.nodes[id] {
            Some(n) => n,
            None => {
                let n = self.tape.leaf(self.store.value(id).clone());
                self.nodes[id] = Some(n);
                n
            }
        }
    }

    /// Node id of a parameter if it participated in this pass.
    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.nodes[id]
    }
}

pub(crate) fn normal_init<F: Scalar>(
    rng: &mut ChaCha8Rng,
    std: f64,
    shape: &[usize],
) -> ArrayD<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(shape.to_vec(), |_| sc::<F>(dist.sample(rng)))
}

/// Fully connected layer handle (weights live in the store).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
    ) -> Self {
        let w = store.insert(format!("{name}.w"), normal_init(rng, std, &[fan_in, fan_out]));
        let b = store.insert(format!("{name}.b"), ArrayD::zeros(vec![fan_out]));
        Linear { w, b }
    }

    pub fn apply<F: Scalar>(&self, s: &mut Session<F>, x: NodeId) -> NodeId {
        let w = s.param(self.w);
        let b = s.param(self.b);
        let y = s.tape.matmul(x, w);
        s.tape.add_bias(y, b)
    }

    pub fn apply_no_bias<F: Scalar>(&self, s: &mut Session<F>, x: NodeId) -> NodeId {
        let w = s.param(self.w);
        s.tape.matmul(x, w)
    }

    /// Plain-array application for tape-free inference helpers.
    pub fn apply_array<F: Scalar>(&self, store: &ParamStore<F>, x: &Array2<F>) -> Array2<F> {
        let w = store.value(self.w).view().into_dimensionality::<Ix2>().unwrap();
        let b = store
            .value(self.b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let mut y = x.dot(&w);
        for mut row in y.rows_mut() {
            row += &b;
        }
        y
    }
}

/// 2-d convolution handle.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = store.insert(
            format!("{name}.w"),
            normal_init(rng, std, &[cout, cin, kernel, kernel]),
        );
        let b = store.insert(format!("{name}.b"), ArrayD::zeros(vec![cout]));
        ConvSpec { w, b, stride, pad }
    }

    pub fn apply<F: Scalar>(&self, s: &mut Session<F>, x: NodeId) -> NodeId {
        let w = s.param(self.w);
        let b = s.param(self.b);
        s.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Forward-pass mode. Training mode normalizes quality pre-activations with
/// batch statistics; eval mode uses the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Node ids of everything downstream code needs from one forward pass.
pub struct BatchNodes {
    pub batch: usize,
    pub feature_map: NodeId,
    /// Pooled stripe vectors `z_k`, each `(n, C)`.
    pub part_pooled: Vec<NodeId>,
    /// Part embeddings `f_k`, each `(n, d)`.
    pub part_embeds: Vec<NodeId>,
    /// Raw quality pre-activations, each `(n, 1)` (only when quality is learned).
    pub quality_preact: Vec<NodeId>,
    /// Batch-normalized pre-activations before the affine, for diagnostics.
    pub quality_normed: Vec<NodeId>,
    /// Quality scores as one `(n, K)` matrix (all ones when pinned).
    pub quality_mat: NodeId,
    /// Projected global feature map `(n, C', hf, wf)`.
    pub global_map: NodeId,
    /// Per-stripe pooled vectors of the projected map, `(n, K, C')`.
    pub global_parts_pre: NodeId,
    /// Normalized quality weights `(n, K)` when the coarse vector is built.
    pub quality_normalized: Option<NodeId>,
    /// Coarse identity-aware global vector `(n, C')`.
    pub coarse: Option<NodeId>,
    /// Reduced excitation `(n, C'/r)`.
    pub excited_hidden: Option<NodeId>,
    /// Re-expanded excitation `(n, C')`.
    pub excited: Option<NodeId>,
    /// Attention map `(n, hf, wf)`.
    pub attention: Option<NodeId>,
    /// Post-attention feature map (equals `global_map` when attention is off).
    pub attended_map: NodeId,
    /// Per-stripe pooled vectors of the attended map, `(n, K, C')`.
    pub global_parts: NodeId,
}

pub struct Forward<'m, F: Scalar> {
    pub session: Session<'m, F>,
    pub nodes: BatchNodes,
}

/// Owned per-part batch-norm statistics from one training pass.
pub struct BnBatchStats<F: Scalar> {
    per_part: Vec<(F, F)>,
}

/// Everything retrieval needs for one image, extracted from an eval pass.
#[derive(Debug, Clone)]
pub struct ImageEmbedding<F: Scalar> {
    /// `K × d` part embeddings.
    pub part_features: Array2<F>,
    /// `K` quality scores in `(0, 1)`.
    pub quality: Array1<F>,
    /// `K × C'` pooled global part vectors.
    pub global_parts: Array2<F>,
    /// Attention map over the feature grid, when the model uses attention.
    pub attention: Option<Array2<F>>,
}

pub struct Model<F: Scalar> {
    cfg: ModelConfig,
    params: ParamStore<F>,
    buffers: ParamStore<F>,
    backbone: BackboneNet,
    part_branch: PartBranch,
    isa: IsaModule,
    /// Shared classifier for pairwise / single-image global features.
    pair_classifier: Linear,
    bn_batches: ParamId,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();

        let backbone = BackboneNet::init(&cfg.backbone, &mut params, &mut rng)?;
        let part_branch = PartBranch::init(&cfg, &mut params, &mut buffers, &mut rng);
        let isa = IsaModule::init(&cfg, &mut params, &mut rng);
        let pair_classifier = Linear::init(
            &mut params,
            &mut rng,
            "cls.pair",
            cfg.global_dim,
            cfg.num_classes,
            0.01,
        );
        let bn_batches = buffers.insert("bn.batches", ArrayD::zeros(vec![1]));

        Ok(Model {
            cfg,
            params,
            buffers,
            backbone,
            part_branch,
            isa,
            pair_classifier,
            bn_batches,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<F> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.buffers
    }

    pub fn part_branch(&self) -> &PartBranch {
        &self.part_branch
    }

    pub fn isa(&self) -> &IsaModule {
        &self.isa
    }

    pub fn pair_classifier(&self) -> Linear {
        self.pair_classifier
    }

    pub fn backbone(&self) -> &BackboneNet {
        &self.backbone
    }

    /// True once running batch-norm statistics exist.
    pub fn calibrated(&self) -> bool {
        self.buffers.value(self.bn_batches)[0] > F::zero()
    }

    /// Build the forward tape for a normalized image batch `(n, 3, H, W)`.
    pub fn forward(&self, images: ArrayView4<F>, mode: Mode) -> Result<Forward<'_, F>> {
        let shape = images.shape();
        let bb = &self.cfg.backbone;
        if shape[1] != 3 || shape[2] != bb.input_height || shape[3] != bb.input_width {
            return Err(Error::config(format!(
                "image batch {:?} does not match configured input 3x{}x{}",
                shape, bb.input_height, bb.input_width
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite pixel values"));
        }
        if mode == Mode::Eval && self.cfg.ablation.learn_quality && !self.calibrated() {
            return Err(Error::UncalibratedPredictor);
        }
        let n = shape[0];
        let k = self.cfg.parts;
        let mut s = Session::new(&self.params);
        let x = s.tape.leaf(images.to_owned().into_dyn());

        let feature_map = self.backbone.forward(&mut s, x);
        let stripe_h = self.cfg.stripe_height();

        // Part branch: pool each stripe, embed, and score.
        let mut part_pooled = Vec::with_capacity(k);
        let mut part_embeds = Vec::with_capacity(k);
        for part in 0..k {
            let stripe = s
                .tape
                .slice_rows(feature_map, part * stripe_h, (part + 1) * stripe_h);
            let z = s.tape.mean_spatial(stripe);
            part_pooled.push(z);
            part_embeds.push(self.part_branch.embed[part].apply(&mut s, z));
        }

        let mut quality_preact = Vec::new();
        let mut quality_normed = Vec::new();
        let quality_mat = if self.cfg.ablation.learn_quality {
            let mut cols = Vec::with_capacity(k);
            for part in 0..k {
                let out = self.part_branch.quality[part].forward(
                    &mut s,
                    &self.buffers,
                    part_pooled[part],
                    mode,
                    sc::<F>(self.cfg.bn_eps),
                );
                quality_preact.push(out.preact);
                quality_normed.push(out.normalized);
                cols.push(s.tape.reshape(out.score, vec![n]));
            }
            s.tape.stack(&cols, 1)
        } else {
            s.tape.leaf(ArrayD::from_elem(vec![n, k], F::one()))
        };

        // Global branch.
        let global_map = self.isa.project.apply(&mut s, feature_map);
        let global_parts_pre = pool_stripes(&mut s.tape, global_map, k, stripe_h);

        let need_coarse = self.cfg.ablation.use_attention
            || self.cfg.ablation.global_mode == GlobalMode::SingleImage;
        let mut quality_normalized = None;
        let mut coarse = None;
        if need_coarse {
            let qsum = s.tape.sum_last(quality_mat);
            let qsum_b = s.tape.broadcast_last(qsum, k);
            let qhat = s.tape.div(quality_mat, qsum_b);
            coarse = Some(s.tape.weighted_sum_rows(qhat, global_parts_pre));
            quality_normalized = Some(qhat);
        }

        let mut excited_hidden = None;
        let mut excited = None;
        let mut attention = None;
        let attended_map = if self.cfg.ablation.use_attention {
            let h = coarse.expect("coarse built when attention enabled");
            let (hidden, expanded) = self.isa.excite(&mut s, h);
            let m = self.isa.attention_map(&mut s, global_map, expanded);
            let attended = self.isa.apply_attention(&mut s, global_map, m);
            excited_hidden = Some(hidden);
            excited = Some(expanded);
            attention = Some(m);
            attended
        } else {
            global_map
        };

        let global_parts = if self.cfg.ablation.use_attention {
            pool_stripes(&mut s.tape, attended_map, k, stripe_h)
        } else {
            global_parts_pre
        };

        Ok(Forward {
            session: s,
            nodes: BatchNodes {
                batch: n,
                feature_map,
                part_pooled,
                part_embeds,
                quality_preact,
                quality_normed,
                quality_mat,
                global_map,
                global_parts_pre,
                quality_normalized,
                coarse,
                excited_hidden,
                excited,
                attention,
                attended_map,
                global_parts,
            },
        })
    }

    /// Per-part batch statistics of the quality pre-activations, extracted as
    /// owned data so the forward pass can be dropped before mutating buffers.
    pub fn batch_stats(fwd: &Forward<F>) -> BnBatchStats<F> {
        let per_part = fwd
            .nodes
            .quality_preact
            .iter()
            .map(|&pre| {
                let vals = fwd.session.tape.value(pre);
                let n = sc::<F>(vals.len() as f64);
                let mean = vals.iter().copied().sum::<F>() / n;
                let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                (mean, var)
            })
            .collect();
        BnBatchStats { per_part }
    }

    /// Fold batch statistics into the running batch-norm buffers.
    pub fn apply_bn_update(&mut self, stats: &BnBatchStats<F>) {
        if stats.per_part.is_empty() {
            return;
        }
        let momentum = sc::<F>(self.cfg.bn_momentum);
        let one_m = F::one() - momentum;
        let first = self.buffers.value(self.bn_batches)[0] == F::zero();
        for (part, &(mean, var)) in stats.per_part.iter().enumerate() {
            let bn = &self.part_branch.quality[part].bn;
            let (rm, rv) = (bn.run_mean, bn.run_var);
            if first {
                self.buffers.value_mut(rm)[0] = mean;
                self.buffers.value_mut(rv)[0] = var;
            } else {
                let old_m = self.buffers.value(rm)[0];
                let old_v = self.buffers.value(rv)[0];
                self.buffers.value_mut(rm)[0] = one_m * old_m + momentum * mean;
                self.buffers.value_mut(rv)[0] = one_m * old_v + momentum * var;
            }
        }
        let c = self.buffers.value(self.bn_batches)[0];
        self.buffers.value_mut(self.bn_batches)[0] = c + F::one();
    }

    /// Run a training-mode pass purely to populate batch-norm statistics.
    pub fn calibrate(&mut self, images: ArrayView4<F>) -> Result<()> {
        let stats = {
            let fwd = self.forward(images, Mode::Train)?;
            Self::batch_stats(&fwd)
        };
        self.apply_bn_update(&stats);
        Ok(())
    }

    /// Eval-mode embeddings for a batch of images.
    pub fn embed_batch(&self, images: ArrayView4<F>) -> Result<Vec<ImageEmbedding<F>>> {
        let fwd = self.forward(images, Mode::Eval)?;
        Ok(self.extract_embeddings(&fwd))
    }

    /// Pull per-image embeddings out of a finished forward pass.
    pub fn extract_embeddings(&self, fwd: &Forward<F>) -> Vec<ImageEmbedding<F>> {
        let tape = &fwd.session.tape;
        let n = fwd.nodes.batch;
        let k = self.cfg.parts;
        let d = self.cfg.embed_dim;

        let qmat = tape
            .value(fwd.nodes.quality_mat)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let gparts = tape
            .value(fwd.nodes.global_parts)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let attention = fwd.nodes.attention.map(|a| {
            tape.value(a)
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .to_owned()
        });

        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut part_features = Array2::<F>::zeros((k, d));
            for (part, &f) in fwd.nodes.part_embeds.iter().enumerate() {
                let fv = tape.value(f).view().into_dimensionality::<Ix2>().unwrap();
                part_features.row_mut(part).assign(&fv.row(i));
            }
            let quality = qmat.row(i).to_owned();
            let global_parts = gparts.index_axis(Axis(0), i).to_owned();
            out.push(ImageEmbedding {
                part_features,
                quality,
                global_parts,
                attention: attention.as_ref().map(|a| a.index_axis(Axis(0), i).to_owned()),
            });
        }
        out
    }

    /// Shared feature map for a single normalized image `(3, H, W)`.
    pub fn feature_map(&self, image: &Array3<F>) -> Result<Array3<F>> {
        let shape = image.shape();
        let bb = &self.cfg.backbone;
        if shape != [3, bb.input_height, bb.input_width] {
            return Err(Error::config(format!(
                "image {:?} does not match configured input 3x{}x{}",
                shape, bb.input_height, bb.input_width
            )));
        }
        let batch = image
            .view()
            .insert_axis(Axis(0))
            .to_owned()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let mut s = Session::new(&self.params);
        let x = s.tape.leaf(batch.into_dyn());
        let fm = self.backbone.forward(&mut s, x);
        let out = s
            .tape
            .value(fm)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<Ix3>()
            .unwrap();
        Ok(out)
    }
}

/// RAP over each of `k` horizontal stripes of a `(n, c, h, w)` map, stacked
/// to `(n, k, c)`.
pub(crate) fn pool_stripes<F: Scalar>(
    tape: &mut Tape<F>,
    map: NodeId,
    k: usize,
    stripe_h: usize,
) -> NodeId {
    let pooled: Vec<NodeId> = (0..k)
        .map(|part| {
            let stripe = tape.slice_rows(map, part * stripe_h, (part + 1) * stripe_h);
            tape.mean_spatial(stripe)
        })
        .collect();
    tape.stack(&pooled, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackboneVariant;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.backbone.input_height = 32;
        cfg.backbone.input_width = 16;
        cfg.backbone.output_channels = 16;
        cfg.backbone.variant = BackboneVariant::Toy;
        cfg.parts = 2;
        cfg.embed_dim = 8;
        cfg.global_dim = 8;
        cfg.num_classes = 3;
        cfg
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let model = Model::<f32>::new(cfg, 42).unwrap();
        let images = ndarray::Array4::<f32>::from_shape_fn((2, 3, 32, 16), |(i, c, y, x)| {
            ((i + c + y + x) % 7) as f32 * 0.1 - 0.3
        });
        let a = model.forward(images.view(), Mode::Train).unwrap();
        let b = model.forward(images.view(), Mode::Train).unwrap();
        let fa = a.session.tape.value(a.nodes.feature_map);
        let fb = b.session.tape.value(b.nodes.feature_map);
        assert_eq!(fa, fb);
        let qa = a.session.tape.value(a.nodes.quality_mat);
        assert!(qa.iter().all(|&q| q > 0.0 && q < 1.0));
    }

    #[test]
    fn eval_before_calibration_is_an_error() {
        let cfg = tiny_cfg();
        let model = Model::<f32>::new(cfg, 1).unwrap();
        let images = ndarray::Array4::<f32>::zeros((1, 3, 32, 16));
        match model.forward(images.view(), Mode::Eval) {
            Err(Error::UncalibratedPredictor) => {}
            other => panic!("expected UncalibratedPredictor, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn calibration_enables_single_image_eval() {
        let cfg = tiny_cfg();
        let mut model = Model::<f32>::new(cfg, 7).unwrap();
        let images = ndarray::Array4::<f32>::from_shape_fn((4, 3, 32, 16), |(i, c, y, x)| {
            ((i * 31 + c * 7 + y * 3 + x) % 11) as f32 * 0.05
        });
        model.calibrate(images.view()).unwrap();
        let single = images.slice(ndarray::s![0..1, .., .., ..]);
        let emb = model.embed_batch(single).unwrap();
        assert_eq!(emb.len(), 1);
        assert_eq!(emb[0].part_features.shape(), &[2, 8]);
        assert!(emb[0].quality.iter().all(|&q| q > 0.0 && q < 1.0));
    }

    #[test]
    fn model_is_shareable_across_threads() {
        let cfg = tiny_cfg();
        let mut model = Model::<f32>::new(cfg, 3).unwrap();
        let images = ndarray::Array4::<f32>::from_shape_fn((2, 3, 32, 16), |(i, c, y, x)| {
            ((i + c * 5 + y + x * 2) % 9) as f32 * 0.1
        });
        model.calibrate(images.view()).unwrap();
        let model = std::sync::Arc::new(model);
        let mut handles = Vec::new();
        for _ in 0..4 {
            let m = model.clone();
            let imgs = images.clone();
            handles.push(std::thread::spawn(move || {
                m.embed_batch(imgs.view()).unwrap().len()
            }));
        }
        for h in handles {
            assert_eq!(h.join().unwrap(), 2);
        }
    }
}
