//! Training engine: identity-balanced batch sampling, augmentation, the joint
//! objective, and the SGD schedule.
//!
//! Batches hold `A` images for each of `P` identities so every anchor sees
//! positives and negatives for batch-hard mining. Images are flipped, then
//! randomly erased (simulated occlusion), and the five loss terms are summed
//! with unit weights. Plain SGD with a step learning-rate schedule is the
//! reference optimizer; momentum exists behind a config switch and is off by
//! default.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agfe;
use crate::config::{EraseParams, GlobalMode, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Forward, Mode, Model, ParamId};
use crate::part_branch;
use crate::{sc, Scalar};

/// In-memory training set with contiguous class labels.
pub struct TrainSet<F: Scalar> {
    pub images: Vec<Array3<F>>,
    pub labels: Vec<usize>,
    /// Original identity per class index.
    pub classes: Vec<u32>,
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl<F: Scalar> TrainSet<F> {
    /// Build from `(image, identity)` pairs; identities are mapped to
    /// contiguous class ids in ascending order.
    pub fn new(samples: Vec<(Array3<F>, u32)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("empty training set"));
        }
        let mut ids: Vec<u32> = samples.iter().map(|(_, id)| *id).collect();
        ids.sort_unstable();
        ids.dedup();
        let class_of: BTreeMap<u32, usize> =
            ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        let mut images = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (idx, (img, id)) in samples.into_iter().enumerate() {
            let class = class_of[&id];
            images.push(img);
            labels.push(class);
            by_class.entry(class).or_default().push(idx);
        }
        Ok(TrainSet {
            images,
            labels,
            classes: ids,
            by_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Sample `P` distinct identities with `A` images each. Identities with fewer
/// than `A` images are resampled with replacement. Deterministic under a
/// seeded RNG.
pub fn pk_sample<F: Scalar>(
    set: &TrainSet<F>,
    identities: usize,
    per_identity: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let classes: Vec<usize> = set.by_class.keys().copied().collect();
    if classes.len() < identities {
        return Err(Error::data(format!(
            "need {identities} identities, dataset has {}",
            classes.len()
        )));
    }
    // partial Fisher-Yates over class list
    let mut pool = classes;
    let mut chosen = Vec::with_capacity(identities);
    for _ in 0..identities {
        let pick = rng.random_range(0..pool.len());
        chosen.push(pool.swap_remove(pick));
    }
    let mut batch = Vec::with_capacity(identities * per_identity);
    for class in chosen {
        let members = &set.by_class[&class];
        if members.len() >= per_identity {
            let mut pool = members.clone();
            for _ in 0..per_identity {
                let pick = rng.random_range(0..pool.len());
                batch.push(pool.swap_remove(pick));
            }
        } else {
            for _ in 0..per_identity {
                batch.push(members[rng.random_range(0..members.len())]);
            }
        }
    }
    Ok(batch)
}

/// Flip image columns in place.
pub fn horizontal_flip<F: Scalar>(image: &mut Array3<F>) {
    let w = image.shape()[2];
    for mut plane in image.axis_iter_mut(Axis(0)) {
        for mut row in plane.rows_mut() {
            for x in 0..w / 2 {
                row.swap(x, w - 1 - x);
            }
        }
    }
}

/// Random erasing: with the configured probability, fill one random rectangle
/// (area fraction and aspect ratio drawn from the configured ranges) with the
/// fill value.
pub fn random_erase<F: Scalar>(image: &mut Array3<F>, params: &EraseParams, rng: &mut ChaCha8Rng) {
    if !rng.random_bool(params.probability) {
        return;
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let total = (h * w) as f64;
    for _ in 0..32 {
        let frac = if params.area_range.0 < params.area_range.1 {
            rng.random_range(params.area_range.0..params.area_range.1)
        } else {
            params.area_range.0
        };
        let aspect = if params.aspect_range.0 < params.aspect_range.1 {
            rng.random_range(params.aspect_range.0..params.aspect_range.1)
        } else {
            params.aspect_range.0
        };
        let target = frac * total;
        let eh = (target * aspect).sqrt().round().max(1.0) as usize;
        let ew = (target / aspect).sqrt().round().max(1.0) as usize;
        if eh > h || ew > w {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        let fill = sc::<F>(params.fill);
        for c in 0..image.shape()[0] {
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    image[[c, y, x]] = fill;
                }
            }
        }
        return;
    }
}

/// Values of the five loss terms plus their sum, in `f64` for logging.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub part_id: f64,
    pub part_triplet: f64,
    pub global_id: f64,
    pub pair_id: f64,
    pub global_triplet: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }

    fn accumulate(&mut self, other: &LossBreakdown) {
        self.part_id += other.part_id;
        self.part_triplet += other.part_triplet;
        self.global_id += other.global_id;
        self.pair_id += other.pair_id;
        self.global_triplet += other.global_triplet;
        self.total += other.total;
    }

    fn scale(&mut self, by: f64) {
        self.part_id *= by;
        self.part_triplet *= by;
        self.global_id *= by;
        self.pair_id *= by;
        self.global_triplet *= by;
        self.total *= by;
    }
}

/// Assemble the enabled loss terms on the forward tape. Returns the total
/// node and the numeric breakdown.
pub fn build_losses<F: Scalar>(
    model: &Model<F>,
    fwd: &mut Forward<F>,
    labels: &[usize],
    margin: F,
) -> (crate::autodiff::NodeId, LossBreakdown) {
    let cfg = model.cfg();
    let toggles = cfg.ablation.losses;
    let eps = sc::<F>(cfg.eps);
    let mut breakdown = LossBreakdown::default();
    let mut terms: Vec<crate::autodiff::NodeId> = Vec::new();

    let scalar = |fwd: &Forward<F>, node: crate::autodiff::NodeId| -> f64 {
        fwd.session.tape.value(node).first().unwrap().to_f64().unwrap()
    };

    if toggles.part_id {
        let node = {
            let s = &mut fwd.session;
            part_branch::part_id_loss(
                s,
                &fwd.nodes.part_embeds,
                &model.part_branch().classifiers,
                labels,
            )
        };
        breakdown.part_id = scalar(fwd, node);
        terms.push(node);
    }
    if toggles.part_triplet {
        let dmat = part_branch::part_distance_matrix(
            &mut fwd.session.tape,
            &fwd.nodes.part_embeds,
            fwd.nodes.quality_mat,
            eps,
        );
        let node = part_branch::part_triplet_loss(&mut fwd.session.tape, dmat, labels, margin);
        breakdown.part_triplet = scalar(fwd, node);
        terms.push(node);
    }

    if toggles.global_id && cfg.ablation.use_attention {
        let hidden = fwd
            .nodes
            .excited_hidden
            .expect("attention path provides the reduced vector");
        let node = {
            let s = &mut fwd.session;
            model.isa().global_id_loss(s, hidden, labels)
        };
        breakdown.global_id = scalar(fwd, node);
        terms.push(node);
    }

    match cfg.ablation.global_mode {
        GlobalMode::None => {}
        GlobalMode::PairAdaptive => {
            if toggles.pair_id || toggles.global_triplet {
                let w = agfe::pair_weight_tensor(&mut fwd.session.tape, fwd.nodes.quality_mat);
                let feats =
                    agfe::pairwise_features(&mut fwd.session.tape, w, fwd.nodes.global_parts);
                if toggles.pair_id {
                    let node = {
                        let s = &mut fwd.session;
                        agfe::pair_id_loss(
                            s,
                            feats,
                            model.pair_classifier(),
                            labels,
                            cfg.ablation.pair_loss_diagonal,
                        )
                    };
                    breakdown.pair_id = scalar(fwd, node);
                    terms.push(node);
                }
                if toggles.global_triplet {
                    let dmat = agfe::global_distance_matrix(&mut fwd.session.tape, feats, eps);
                    let node =
                        agfe::global_triplet_loss(&mut fwd.session.tape, dmat, labels, margin);
                    breakdown.global_triplet = scalar(fwd, node);
                    terms.push(node);
                }
            }
        }
        GlobalMode::Gap | GlobalMode::SingleImage => {
            if toggles.pair_id || toggles.global_triplet {
                let vec = match cfg.ablation.global_mode {
                    GlobalMode::Gap => fwd.session.tape.mean_spatial(fwd.nodes.attended_map),
                    _ => fwd.nodes.coarse.expect("single-image mode builds the coarse vector"),
                };
                let (id_node, tp_node) = {
                    let s = &mut fwd.session;
                    agfe::single_global_losses(
                        s,
                        vec,
                        model.pair_classifier(),
                        labels,
                        margin,
                        eps,
                    )
                };
                if toggles.pair_id {
                    breakdown.pair_id = scalar(fwd, id_node);
                    terms.push(id_node);
                }
                if toggles.global_triplet {
                    breakdown.global_triplet = scalar(fwd, tp_node);
                    terms.push(tp_node);
                }
            }
        }
    }

    let total = match terms.split_first() {
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = fwd.session.tape.add(acc, t);
            }
            acc
        }
        None => fwd.session.tape.leaf(ArrayD::zeros(vec![])),
    };
    breakdown.total = scalar(fwd, total);
    (total, breakdown)
}

/// One epoch row of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(
            f,
            "epoch,lr,part_id,part_triplet,global_id,pair_id,global_triplet,total"
        )?;
        for r in &self.epochs {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.loss.part_id,
                r.loss.part_triplet,
                r.loss.global_id,
                r.loss.pair_id,
                r.loss.global_triplet,
                r.loss.total
            )?;
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for r in &self.epochs {
            let line = serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

pub struct Trainer<F: Scalar> {
    model: Model<F>,
    cfg: TrainConfig,
    set: TrainSet<F>,
    rng: ChaCha8Rng,
    velocity: Option<Vec<ArrayD<F>>>,
    pub log: TrainLog,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Model<F>, cfg: TrainConfig, set: TrainSet<F>) -> Result<Self> {
        cfg.validate()?;
        if model.cfg().num_classes != set.num_classes() {
            return Err(Error::config(format!(
                "model built for {} classes but training set has {}",
                model.cfg().num_classes,
                set.num_classes()
            )));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            model,
            cfg,
            set,
            rng,
            velocity: None,
            log: TrainLog::default(),
        })
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn into_model(self) -> Model<F> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn assemble_batch(&mut self, indices: &[usize]) -> (Array4<F>, Vec<usize>) {
        let shape = self.set.images[0].raw_dim();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut batch = Array4::<F>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (slot, &idx) in indices.iter().enumerate() {
            let mut img = self.set.images[idx].clone();
            if self.cfg.horizontal_flip && self.rng.random_bool(0.5) {
                horizontal_flip(&mut img);
            }
            random_erase(&mut img, &self.cfg.erase, &mut self.rng);
            batch.index_axis_mut(Axis(0), slot).assign(&img);
            labels.push(self.set.labels[idx]);
        }
        (batch, labels)
    }

    /// One optimization step at the given learning rate.
    pub fn step(&mut self, lr: f64, epoch: usize, step: usize) -> Result<LossBreakdown> {
        let indices = pk_sample(
            &self.set,
            self.cfg.identities_per_batch,
            self.cfg.images_per_identity,
            &mut self.rng,
        )?;
        let (batch, labels) = self.assemble_batch(&indices);
        let margin = sc::<F>(self.cfg.margin);

        let (breakdown, stats, grads) = {
            let mut fwd = self.model.forward(batch.view(), Mode::Train)?;
            let (total, breakdown) = build_losses(&self.model, &mut fwd, &labels, margin);
            if !breakdown.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("{breakdown:?}"),
                });
            }
            let stats = Model::batch_stats(&fwd);
            let grads = fwd.session.tape.backward(total);
            let by_param: Vec<Option<ArrayD<F>>> = (0..self.model.params().len())
                .map(|pid| {
                    fwd.session
                        .param_node(pid)
                        .and_then(|node| grads.get(node).cloned())
                })
                .collect();
            (breakdown, stats, by_param)
        };
        self.model.apply_bn_update(&stats);
        self.apply_sgd(lr, grads);
        Ok(breakdown)
    }

    fn apply_sgd(&mut self, lr: f64, grads: Vec<Option<ArrayD<F>>>) {
        let lr = sc::<F>(lr);
        if self.cfg.momentum_enabled && self.velocity.is_none() {
            self.velocity = Some(
                (0..self.model.params().len())
                    .map(|pid| ArrayD::zeros(self.model.params().value(pid).shape()))
                    .collect(),
            );
        }
        let momentum = sc::<F>(self.cfg.momentum);
        for (pid, grad) in grads.into_iter().enumerate() {
            let Some(g) = grad else { continue };
            match &mut self.velocity {
                Some(vel) => {
                    let v = &mut vel[pid];
                    v.zip_mut_with(&g, |vv, &gg| *vv = momentum * *vv + gg);
                    let step = v.mapv(|vv| vv * lr);
                    let w = self.model.params_mut().value_mut(pid);
                    *w -= &step;
                }
                None => {
                    let w = self.model.params_mut().value_mut(pid);
                    w.zip_mut_with(&g, |wv, &gv| *wv = *wv - lr * gv);
                }
            }
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.set.len() / self.cfg.batch_size()).max(1)
    }

    /// Full training run following the step learning-rate schedule.
    pub fn train(&mut self) -> Result<&TrainLog> {
        let steps = self.steps_per_epoch();
        for epoch in 0..self.cfg.epochs {
            let lr = self.cfg.lr_at_epoch(epoch);
            let mut mean = LossBreakdown::default();
            for step in 0..steps {
                let b = self.step(lr, epoch, step)?;
                mean.accumulate(&b);
            }
            mean.scale(1.0 / steps as f64);
            self.log.epochs.push(EpochRecord {
                epoch,
                lr,
                loss: mean,
            });
        }
        Ok(&self.log)
    }

    /// Ids of the quality-predictor parameters, for joint-learning checks.
    pub fn quality_param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for q in &self.model.part_branch().quality {
            out.extend_from_slice(&[q.lin.w, q.lin.b, q.bn.gamma, q.bn.beta]);
        }
        out
    }
}


#[cfg(test)]
mod perf_probe {
    use super::*;
    use crate::config::ModelConfig;
    use ndarray::Array3;

    #[test]
    #[ignore]
    fn step_timing_probe() {
        let mut cfg = ModelConfig::default();
        cfg.backbone.input_height = 64;
        cfg.backbone.input_width = 32;
        cfg.backbone.output_channels = 64;
        cfg.parts = 4;
        cfg.embed_dim = 64;
        cfg.global_dim = 64;
        cfg.num_classes = 8;
        let mut samples = Vec::new();
        for id in 0..8u32 {
            for j in 0..8 {
                let img = Array3::<f32>::from_shape_fn((3, 64, 32), |(c, y, x)| {
                    ((id as usize * 37 + j * 11 + c * 5 + y * 2 + x) % 13) as f32 / 13.0 - 0.5
                });
                samples.push((img, id));
            }
        }
        let set = TrainSet::new(samples).unwrap();
        let model = Model::<f32>::new(cfg, 3).unwrap();
        let tcfg = TrainConfig {
            identities_per_batch: 8,
            images_per_identity: 8,
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model, tcfg, set).unwrap();
        for i in 0..3 {
            let t0 = std::time::Instant::now();
            trainer.step(0.01, 0, i).unwrap();
            println!("step {i}: {:?}", t0.elapsed());
        }
    }
}
