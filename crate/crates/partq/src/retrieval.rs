//! Gallery indexing and two-stage quality-weighted retrieval.
//!
//! A [`GalleryRecord`] caches, per image, everything the distance math needs:
//! the `K` part embeddings, the `K` quality scores, and the `K` pooled global
//! part vectors. Stage 1 ranks the whole gallery by the quality-weighted part
//! distance; stage 2 recomputes only the top `n` candidates with the blended
//! part + pairwise-global distance, so the adaptive global features cost `n`
//! evaluations per query regardless of gallery size.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::agfe;
use crate::config::GlobalMode;
use crate::data::{normalize_image, ReidSample};
use crate::error::{Error, Result};
use crate::model::{ImageEmbedding, Model};
use crate::part_branch::{cosine_distance, part_cosine_distances, quality_weighted_distance};
use crate::{sc, Scalar};

/// Cached per-image quantities for inference-time matching.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryRecord<F: Scalar> {
    pub identity: i64,
    pub camera: u32,
    /// `K × d` part embeddings.
    pub part_features: Array2<F>,
    /// `K` quality scores.
    pub quality: Array1<F>,
    /// `K × C'` pooled global part vectors.
    pub global_parts: Array2<F>,
}

impl<F: Scalar> GalleryRecord<F> {
    pub fn from_embedding(emb: ImageEmbedding<F>, identity: i64, camera: u32) -> Self {
        GalleryRecord {
            identity,
            camera,
            part_features: emb.part_features,
            quality: emb.quality,
            global_parts: emb.global_parts,
        }
    }
}

/// Forward a sample set through the model in eval mode and cache records.
pub fn index_gallery<F: Scalar>(
    model: &Model<F>,
    samples: &[ReidSample<F>],
    batch_size: usize,
) -> Result<Vec<GalleryRecord<F>>> {
    let cfg = model.cfg();
    let mut records = Vec::with_capacity(samples.len());
    let batch_size = batch_size.max(1);
    for chunk in samples.chunks(batch_size) {
        let (c, h, w) = (
            3,
            cfg.backbone.input_height,
            cfg.backbone.input_width,
        );
        let mut batch = ndarray::Array4::<F>::zeros((chunk.len(), c, h, w));
        for (i, sample) in chunk.iter().enumerate() {
            let normalized = normalize_image(&sample.pixels, &cfg.pixel_mean, &cfg.pixel_std);
            if normalized.shape() != [c, h, w] {
                return Err(Error::config(format!(
                    "sample shape {:?} does not match configured input {}x{}",
                    normalized.shape(),
                    h,
                    w
                )));
            }
            batch.index_axis_mut(Axis(0), i).assign(&normalized);
        }
        let embeddings = model.embed_batch(batch.view())?;
        for (emb, sample) in embeddings.into_iter().zip(chunk.iter()) {
            records.push(GalleryRecord::from_embedding(
                emb,
                sample.identity,
                sample.camera,
            ));
        }
    }
    Ok(records)
}

/// How query/gallery distances are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMode {
    /// Stage-1 part ranking, blended re-ranking of the top `n`.
    TwoStage,
    /// Quality-weighted part distance only.
    PartOnly,
    /// Full sort by the pairwise adaptive global distance.
    GlobalPairwise,
    /// Full sort by cosine distance of mean-pooled global vectors.
    GlobalGap,
    /// Full sort by cosine distance of quality-weighted single-image vectors.
    GlobalSingleImage,
}

#[derive(Debug, Clone, Copy)]
pub struct SearchParams {
    pub mode: DistanceMode,
    pub top_n: usize,
    /// Weight of the part distance in the blended distance.
    pub gamma: f64,
    /// Guard for cosine/quality denominators.
    pub eps: f64,
}

impl SearchParams {
    pub fn new(mode: DistanceMode, top_n: usize, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::config(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if top_n == 0 {
            return Err(Error::config("top_n must be positive"));
        }
        Ok(SearchParams {
            mode,
            top_n,
            gamma,
            eps: 1e-8,
        })
    }

    pub fn two_stage(top_n: usize, gamma: f64) -> Result<Self> {
        Self::new(DistanceMode::TwoStage, top_n, gamma)
    }

    /// Natural mode for a model's ablation configuration.
    pub fn for_model_cfg(cfg: &crate::config::ModelConfig, top_n: usize, gamma: f64) -> Result<Self> {
        let mode = match cfg.ablation.global_mode {
            GlobalMode::None => DistanceMode::PartOnly,
            GlobalMode::Gap => DistanceMode::GlobalGap,
            GlobalMode::SingleImage => DistanceMode::GlobalSingleImage,
            GlobalMode::PairAdaptive => DistanceMode::TwoStage,
        };
        Self::new(mode, top_n, gamma)
    }
}

/// Ranked gallery for one query.
#[derive(Debug, Clone)]
pub struct RankingResult<F: Scalar> {
    /// Gallery indices in final order: re-ranked prefix, then stage-1 order.
    pub order: Vec<usize>,
    /// Stage-1 distance aligned with `order`.
    pub stage1: Vec<F>,
    /// Final blended distance for the re-ranked prefix.
    pub reranked: Vec<F>,
    /// Number of stage-2 candidates actually used (`min(top_n, gallery)`).
    pub n_used: usize,
    pub gamma: f64,
    /// Pairwise-global evaluations performed (complexity contract: one per
    /// stage-2 candidate).
    pub stage2_evaluations: usize,
}

/// Quality-weighted part distance between two records.
pub fn part_distance<F: Scalar>(a: &GalleryRecord<F>, b: &GalleryRecord<F>, eps: F) -> F {
    let d = part_cosine_distances(&a.part_features, &b.part_features, eps);
    quality_weighted_distance(&d, &a.quality, &b.quality, eps)
}

/// Pairwise adaptive global distance between two records.
pub fn global_distance<F: Scalar>(a: &GalleryRecord<F>, b: &GalleryRecord<F>, eps: F) -> F {
    agfe::pairwise_global_distance(
        &a.global_parts,
        &a.quality,
        &b.global_parts,
        &b.quality,
        eps,
    )
}

/// Blended final distance `γ·D_part + (1−γ)·D_global`.
pub fn final_distance<F: Scalar>(
    query: &GalleryRecord<F>,
    candidate: &GalleryRecord<F>,
    gamma: f64,
    eps: F,
) -> F {
    let g = sc::<F>(gamma);
    let dp = part_distance(query, candidate, eps);
    let dg = global_distance(query, candidate, eps);
    g * dp + (F::one() - g) * dg
}

fn sort_ascending<F: Scalar>(mut scored: Vec<(usize, F)>) -> Vec<(usize, F)> {
    scored.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored
}

/// Stage 1: ascending quality-weighted part distance over the whole gallery,
/// ties broken by gallery index.
pub fn stage1_rank<F: Scalar>(
    query: &GalleryRecord<F>,
    gallery: &[GalleryRecord<F>],
    eps: F,
) -> Vec<(usize, F)> {
    let scored: Vec<(usize, F)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (i, part_distance(query, g, eps)))
        .collect();
    sort_ascending(scored)
}

fn mean_global_vector<F: Scalar>(rec: &GalleryRecord<F>) -> Array1<F> {
    let k = rec.global_parts.shape()[0];
    let mut v = Array1::<F>::zeros(rec.global_parts.shape()[1]);
    for row in rec.global_parts.rows() {
        v.zip_mut_with(&row, |a, &b| *a = *a + b);
    }
    v.mapv(|x| x / sc::<F>(k as f64))
}

fn single_image_vector<F: Scalar>(rec: &GalleryRecord<F>) -> Array1<F> {
    let total: F = rec.quality.iter().copied().sum();
    let mut v = Array1::<F>::zeros(rec.global_parts.shape()[1]);
    for (k, row) in rec.global_parts.rows().into_iter().enumerate() {
        let w = rec.quality[k] / total;
        v.zip_mut_with(&row, |a, &b| *a = *a + w * b);
    }
    v
}

/// Rank the gallery for one query.
pub fn search<F: Scalar>(
    query: &GalleryRecord<F>,
    gallery: &[GalleryRecord<F>],
    params: &SearchParams,
) -> Result<RankingResult<F>> {
    if gallery.is_empty() {
        return Err(Error::data("empty gallery"));
    }
    let eps = sc::<F>(params.eps);
    match params.mode {
        DistanceMode::TwoStage => {
            let stage1 = stage1_rank(query, gallery, eps);
            let n_used = params.top_n.min(gallery.len());
            let mut evaluations = 0usize;
            let prefix: Vec<(usize, F, F)> = stage1[..n_used]
                .iter()
                .map(|&(idx, d1)| {
                    evaluations += 1;
                    (idx, d1, final_distance(query, &gallery[idx], params.gamma, eps))
                })
                .collect();
            // stable sort keeps stage-1 relative order on equal final distances
            let mut reranked = prefix;
            reranked.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap_or(std::cmp::Ordering::Equal));
            let mut order = Vec::with_capacity(gallery.len());
            let mut stage1_aligned = Vec::with_capacity(gallery.len());
            let mut finals = Vec::with_capacity(n_used);
            for &(idx, d1, df) in &reranked {
                order.push(idx);
                stage1_aligned.push(d1);
                finals.push(df);
            }
            for &(idx, d1) in &stage1[n_used..] {
                order.push(idx);
                stage1_aligned.push(d1);
            }
            Ok(RankingResult {
                order,
                stage1: stage1_aligned,
                reranked: finals,
                n_used,
                gamma: params.gamma,
                stage2_evaluations: evaluations,
            })
        }
        DistanceMode::PartOnly => {
            let stage1 = stage1_rank(query, gallery, eps);
            let (order, dists): (Vec<usize>, Vec<F>) = stage1.into_iter().unzip();
            Ok(RankingResult {
                order,
                stage1: dists,
                reranked: Vec::new(),
                n_used: 0,
                gamma: params.gamma,
                stage2_evaluations: 0,
            })
        }
        DistanceMode::GlobalPairwise => {
            let scored: Vec<(usize, F)> = gallery
                .iter()
                .enumerate()
                .map(|(i, g)| (i, global_distance(query, g, eps)))
                .collect();
            let (order, dists): (Vec<usize>, Vec<F>) = sort_ascending(scored).into_iter().unzip();
            let evals = order.len();
            Ok(RankingResult {
                order,
                stage1: dists,
                reranked: Vec::new(),
                n_used: 0,
                gamma: params.gamma,
                stage2_evaluations: evals,
            })
        }
        DistanceMode::GlobalGap | DistanceMode::GlobalSingleImage => {
            let qv = if params.mode == DistanceMode::GlobalGap {
                mean_global_vector(query)
            } else {
                single_image_vector(query)
            };
            let scored: Vec<(usize, F)> = gallery
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let gv = if params.mode == DistanceMode::GlobalGap {
                        mean_global_vector(g)
                    } else {
                        single_image_vector(g)
                    };
                    (i, cosine_distance(qv.view(), gv.view(), eps))
                })
                .collect();
            let (order, dists): (Vec<usize>, Vec<F>) = sort_ascending(scored).into_iter().unzip();
            Ok(RankingResult {
                order,
                stage1: dists,
                reranked: Vec::new(),
                n_used: 0,
                gamma: params.gamma,
                stage2_evaluations: 0,
            })
        }
    }
}

/// One row of the component ablation matrix: structural switches plus the
/// inference mode that evaluates exactly the feature under study.
pub struct AblationRow {
    pub name: &'static str,
    pub ablation: crate::config::AblationConfig,
    pub eval_mode: DistanceMode,
}

/// The standard ablation matrix, from the plain stripe baseline to the full
/// model. Rows that consume quality scores keep the part losses on, since
/// the part branch is what produces those scores.
pub fn ablation_table() -> Vec<AblationRow> {
    use crate::config::{AblationConfig, LossToggles};
    let base = AblationConfig::default();
    let part_losses = |id: bool, tp: bool| {
        let mut t = LossToggles::none();
        t.part_id = id;
        t.part_triplet = tp;
        t
    };
    vec![
        AblationRow {
            name: "baseline",
            ablation: AblationConfig {
                learn_quality: false,
                use_attention: false,
                global_mode: GlobalMode::None,
                losses: part_losses(true, false),
                ..base
            },
            eval_mode: DistanceMode::PartOnly,
        },
        AblationRow {
            name: "baseline-triplet",
            ablation: AblationConfig {
                learn_quality: false,
                use_attention: false,
                global_mode: GlobalMode::None,
                losses: part_losses(true, true),
                ..base
            },
            eval_mode: DistanceMode::PartOnly,
        },
        AblationRow {
            name: "part-branch",
            ablation: AblationConfig {
                learn_quality: true,
                use_attention: false,
                global_mode: GlobalMode::None,
                losses: part_losses(true, true),
                ..base
            },
            eval_mode: DistanceMode::PartOnly,
        },
        AblationRow {
            name: "gap-global",
            ablation: AblationConfig {
                learn_quality: false,
                use_attention: false,
                global_mode: GlobalMode::Gap,
                losses: {
                    let mut t = LossToggles::none();
                    t.pair_id = true;
                    t.global_triplet = true;
                    t
                },
                ..base
            },
            eval_mode: DistanceMode::GlobalGap,
        },
        AblationRow {
            name: "gap-global-isa",
            ablation: AblationConfig {
                learn_quality: true,
                use_attention: true,
                global_mode: GlobalMode::Gap,
                losses: LossToggles::default(),
                ..base
            },
            eval_mode: DistanceMode::GlobalGap,
        },
        AblationRow {
            name: "agfe-global",
            ablation: AblationConfig {
                learn_quality: true,
                use_attention: false,
                global_mode: GlobalMode::PairAdaptive,
                losses: {
                    let mut t = LossToggles::default();
                    t.global_id = false;
                    t
                },
                ..base
            },
            eval_mode: DistanceMode::GlobalPairwise,
        },
        AblationRow {
            name: "agfe-global-isa",
            ablation: AblationConfig {
                learn_quality: true,
                use_attention: true,
                global_mode: GlobalMode::PairAdaptive,
                losses: LossToggles::default(),
                ..base
            },
            eval_mode: DistanceMode::GlobalPairwise,
        },
        AblationRow {
            name: "full",
            ablation: AblationConfig::default(),
            eval_mode: DistanceMode::TwoStage,
        },
    ]
}

const DUMP_MAGIC: &[u8; 8] = b"PARTQIDX";
const DUMP_VERSION: u32 = 1;

/// Write records as the fixed-width binary feature dump.
///
/// Layout: magic, version u32, dtype u8, K u32, d u32, C' u32, count u64,
/// then per record: identity i64, camera u32, `K*d` part features, `K`
/// qualities, `K*C'` global part values, all little-endian.
pub fn write_feature_dump<F: Scalar>(path: &Path, records: &[GalleryRecord<F>]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::data("refusing to write an empty feature dump"));
    }
    let k = records[0].quality.len();
    let d = records[0].part_features.shape()[1];
    let cg = records[0].global_parts.shape()[1];
    let mut buf = Vec::new();
    buf.extend_from_slice(DUMP_MAGIC);
    buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    buf.push(F::DTYPE);
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(cg as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for rec in records {
        if rec.quality.len() != k
            || rec.part_features.shape() != [k, d]
            || rec.global_parts.shape() != [k, cg]
        {
            return Err(Error::format("inconsistent record shapes in feature dump"));
        }
        buf.extend_from_slice(&rec.identity.to_le_bytes());
        buf.extend_from_slice(&rec.camera.to_le_bytes());
        for &v in rec.part_features.iter() {
            v.write_le(&mut buf);
        }
        for &v in rec.quality.iter() {
            v.write_le(&mut buf);
        }
        for &v in rec.global_parts.iter() {
            v.write_le(&mut buf);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a binary feature dump written by [`write_feature_dump`].
pub fn read_feature_dump<F: Scalar>(path: &Path) -> Result<Vec<GalleryRecord<F>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::format("truncated feature dump"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 8)? != DUMP_MAGIC {
        return Err(Error::format("bad feature dump magic"));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(Error::format(format!(
            "unsupported feature dump version {version}"
        )));
    }
    let dtype = take(&mut off, 1)?[0];
    if dtype != F::DTYPE {
        return Err(Error::format(format!(
            "feature dump dtype {dtype} does not match requested scalar {}",
            F::DTYPE
        )));
    }
    let k = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let cg = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count);
    let width = F::WIDTH;
    for _ in 0..count {
        let identity = i64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let camera = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        let mut part_features = Array2::<F>::zeros((k, d));
        for v in part_features.iter_mut() {
            *v = F::read_le(take(&mut off, width)?);
        }
        let mut quality = Array1::<F>::zeros(k);
        for v in quality.iter_mut() {
            *v = F::read_le(take(&mut off, width)?);
        }
        let mut global_parts = Array2::<F>::zeros((k, cg));
        for v in global_parts.iter_mut() {
            *v = F::read_le(take(&mut off, width)?);
        }
        records.push(GalleryRecord {
            identity,
            camera,
            part_features,
            quality,
            global_parts,
        });
    }
    if off != bytes.len() {
        return Err(Error::format("trailing bytes in feature dump"));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_record(
        rng: &mut ChaCha8Rng,
        identity: i64,
        camera: u32,
        k: usize,
        d: usize,
        cg: usize,
    ) -> GalleryRecord<f64> {
        GalleryRecord {
            identity,
            camera,
            part_features: Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0..1.0)),
            quality: Array1::from_shape_fn(k, |_| rng.random_range(0.05..0.95)),
            global_parts: Array2::from_shape_fn((k, cg), |_| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn exact_copy_ranks_first_with_near_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gallery: Vec<_> = (0..20)
            .map(|i| random_record(&mut rng, i, 0, 4, 8, 8))
            .collect();
        let query = gallery[7].clone();
        let params = SearchParams::two_stage(5, 0.6).unwrap();
        let result = search(&query, &gallery, &params).unwrap();
        assert_eq!(result.order[0], 7);
        assert!(result.stage1[0] < 1e-6);
        assert_eq!(result.n_used, 5);
        assert_eq!(result.stage2_evaluations, 5);
    }

    #[test]
    fn stage1_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gallery: Vec<_> = (0..50)
            .map(|i| random_record(&mut rng, i, 0, 4, 8, 8))
            .collect();
        let query = random_record(&mut rng, 99, 1, 4, 8, 8);
        let ranked = stage1_rank(&query, &gallery, 1e-8);
        // oracle: compute all distances, full sort
        let mut oracle: Vec<(usize, f64)> = gallery
            .iter()
            .enumerate()
            .map(|(i, g)| (i, part_distance(&query, g, 1e-8)))
            .collect();
        oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(
            ranked.iter().map(|r| r.0).collect::<Vec<_>>(),
            oracle.iter().map(|r| r.0).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gamma_one_is_part_distance_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_record(&mut rng, 0, 0, 4, 8, 8);
        let b = random_record(&mut rng, 1, 0, 4, 8, 8);
        let dp = part_distance(&a, &b, 1e-8);
        let df = final_distance(&a, &b, 1.0, 1e-8);
        assert_eq!(dp, df);
    }

    #[test]
    fn final_distance_matches_two_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = random_record(&mut rng, 0, 0, 6, 8, 10);
            let b = random_record(&mut rng, 1, 0, 6, 8, 10);
            let gamma = rng.random_range(0.0..1.0);
            let expect = gamma * part_distance(&a, &b, 1e-8)
                + (1.0 - gamma) * global_distance(&a, &b, 1e-8);
            let got = final_distance(&a, &b, gamma, 1e-8);
            assert!((got - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn final_distance_is_symmetric_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_record(&mut rng, 0, 0, 4, 8, 8);
        let b = random_record(&mut rng, 1, 0, 4, 8, 8);
        assert_eq!(
            final_distance(&a, &b, 0.6, 1e-8),
            final_distance(&b, &a, 0.6, 1e-8)
        );
    }

    #[test]
    fn oversized_n_clamps_to_gallery_and_equals_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gallery: Vec<_> = (0..12)
            .map(|i| random_record(&mut rng, i, 0, 4, 8, 8))
            .collect();
        let query = random_record(&mut rng, 99, 1, 4, 8, 8);
        let params = SearchParams::two_stage(100, 0.6).unwrap();
        let result = search(&query, &gallery, &params).unwrap();
        assert_eq!(result.n_used, 12);
        // oracle: full sort by final distance
        let mut oracle: Vec<(usize, f64)> = gallery
            .iter()
            .enumerate()
            .map(|(i, g)| (i, final_distance(&query, g, 0.6, 1e-8)))
            .collect();
        oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(
            result.order,
            oracle.iter().map(|r| r.0).collect::<Vec<_>>()
        );
    }

    #[test]
    fn reranked_prefix_equals_restricted_blended_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gallery: Vec<_> = (0..40)
            .map(|i| random_record(&mut rng, i, 0, 4, 8, 8))
            .collect();
        let query = random_record(&mut rng, 99, 1, 4, 8, 8);
        let params = SearchParams::two_stage(10, 0.6).unwrap();
        let result = search(&query, &gallery, &params).unwrap();
        // oracle: stage-1 top-10 set, sorted by final distance
        let stage1 = stage1_rank(&query, &gallery, 1e-8);
        let mut subset: Vec<(usize, f64)> = stage1[..10]
            .iter()
            .map(|&(i, _)| (i, final_distance(&query, &gallery[i], 0.6, 1e-8)))
            .collect();
        subset.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        assert_eq!(
            result.order[..10],
            subset.iter().map(|r| r.0).collect::<Vec<_>>()[..]
        );
        // remainder keeps stage-1 order
        assert_eq!(
            result.order[10..],
            stage1[10..].iter().map(|r| r.0).collect::<Vec<_>>()[..]
        );
        assert_eq!(result.stage2_evaluations, 10);
    }

    #[test]
    fn gamma_one_two_stage_keeps_stage1_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gallery: Vec<_> = (0..30)
            .map(|i| random_record(&mut rng, i, 0, 4, 8, 8))
            .collect();
        let query = random_record(&mut rng, 99, 1, 4, 8, 8);
        let params = SearchParams::two_stage(10, 1.0).unwrap();
        let result = search(&query, &gallery, &params).unwrap();
        let stage1 = stage1_rank(&query, &gallery, 1e-8);
        assert_eq!(
            result.order,
            stage1.iter().map(|r| r.0).collect::<Vec<_>>()
        );
    }

    #[test]
    fn repeated_search_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gallery: Vec<_> = (0..25)
            .map(|i| random_record(&mut rng, i, 0, 4, 8, 8))
            .collect();
        let query = random_record(&mut rng, 99, 1, 4, 8, 8);
        let params = SearchParams::two_stage(8, 0.6).unwrap();
        let a = search(&query, &gallery, &params).unwrap();
        let b = search(&query, &gallery, &params).unwrap();
        assert_eq!(a.order, b.order);
        assert_eq!(a.stage1, b.stage1);
        assert_eq!(a.reranked, b.reranked);
    }

    #[test]
    fn invalid_gamma_is_rejected() {
        assert!(SearchParams::two_stage(10, 1.5).is_err());
        assert!(SearchParams::two_stage(10, -0.1).is_err());
        assert!(SearchParams::two_stage(0, 0.5).is_err());
    }

    #[test]
    fn empty_gallery_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let query = random_record(&mut rng, 0, 0, 4, 8, 8);
        let params = SearchParams::two_stage(5, 0.6).unwrap();
        assert!(search(&query, &[], &params).is_err());
    }

    #[test]
    fn feature_dump_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let records: Vec<_> = (0..7)
            .map(|i| random_record(&mut rng, i, (i % 3) as u32, 4, 8, 8))
            .collect();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("features.bin");
        write_feature_dump(&path, &records).unwrap();
        let back = read_feature_dump::<f64>(&path).unwrap();
        assert_eq!(records, back);
        // dtype mismatch must fail loudly
        assert!(read_feature_dump::<f32>(&path).is_err());
    }
}
