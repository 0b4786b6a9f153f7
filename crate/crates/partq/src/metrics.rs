//! Retrieval evaluation: cumulated matching characteristics and mean average
//! precision under the single-query protocol.
//!
//! For each query, gallery entries sharing both identity and camera are
//! excluded from scoring (standard protocol); the partial protocol keeps all
//! gallery entries. Junk identities (negative ids) never score. Queries with
//! no valid positive are skipped and counted.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{search, GalleryRecord, SearchParams};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Same-identity same-camera gallery entries are excluded per query.
    Standard,
    /// No camera exclusion (partial/occluded sets with one gallery image per
    /// identity).
    Partial,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    /// `cmc[r]` is the fraction of queries with a correct match in the top
    /// `r + 1`.
    pub cmc: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_queries: usize,
    pub skipped_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_query_ap: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// CMC curve as `rank,cmc` CSV rows.
    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("rank,cmc\n");
        for (i, v) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, v));
        }
        out
    }
}

/// Outcome for one query: 0-based first-hit rank and average precision.
fn score_query<F: Scalar>(
    query: &GalleryRecord<F>,
    gallery: &[GalleryRecord<F>],
    protocol: Protocol,
    params: &SearchParams,
) -> Result<Option<(usize, f64)>> {
    let ranking = search(query, gallery, params)?;
    let keep = |idx: usize| -> bool {
        let g = &gallery[idx];
        if g.identity < 0 {
            return false;
        }
        match protocol {
            Protocol::Standard => !(g.identity == query.identity && g.camera == query.camera),
            Protocol::Partial => true,
        }
    };
    let mut num_gt = 0usize;
    for (idx, g) in gallery.iter().enumerate() {
        if keep(idx) && g.identity == query.identity {
            num_gt += 1;
        }
    }
    if num_gt == 0 {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = None;
    let mut position = 0usize;
    for &idx in &ranking.order {
        if !keep(idx) {
            continue;
        }
        position += 1; // 1-based rank among valid entries
        if gallery[idx].identity == query.identity {
            hits += 1;
            precision_sum += hits as f64 / position as f64;
            if first_hit.is_none() {
                first_hit = Some(position - 1);
            }
            if hits == num_gt {
                break;
            }
        }
    }
    let ap = precision_sum / num_gt as f64;
    Ok(Some((first_hit.expect("num_gt > 0 implies a hit"), ap)))
}

/// Evaluate a query set against a gallery. Queries run in parallel; results
/// are order-stable.
pub fn evaluate<F: Scalar>(
    queries: &[GalleryRecord<F>],
    gallery: &[GalleryRecord<F>],
    protocol: Protocol,
    params: &SearchParams,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::data("empty query set"));
    }
    if gallery.is_empty() {
        return Err(Error::data("empty gallery"));
    }
    let outcomes: Result<Vec<Option<(usize, f64)>>> = queries
        .par_iter()
        .map(|q| score_query(q, gallery, protocol, params))
        .collect();
    let outcomes = outcomes?;

    let max_rank = gallery.len().min(100).max(10);
    let mut cmc_counts = vec![0usize; max_rank];
    let mut ap_values = Vec::new();
    let mut skipped = 0usize;
    for outcome in &outcomes {
        match outcome {
            None => skipped += 1,
            Some((first_hit, ap)) => {
                ap_values.push(*ap);
                // a first hit beyond the curve still counts for mAP
                for r in *first_hit..max_rank {
                    cmc_counts[r] += 1;
                }
            }
        }
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} queries with no valid gallery match");
    }
    let scored = ap_values.len();
    if scored == 0 {
        return Err(Error::data("no query had a valid gallery match"));
    }
    let cmc: Vec<f64> = cmc_counts
        .iter()
        .map(|&c| c as f64 / scored as f64)
        .collect();
    let rank_at = |r: usize| cmc.get(r - 1).copied().unwrap_or(1.0);
    Ok(EvalReport {
        rank1: rank_at(1),
        rank5: rank_at(5),
        rank10: rank_at(10),
        map: ap_values.iter().sum::<f64>() / scored as f64,
        cmc,
        num_queries: scored,
        skipped_queries: skipped,
        per_query_ap: Some(ap_values),
    })
}
