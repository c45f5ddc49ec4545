//! Query-time semantic retrieval: query decoding, IDF-weighted feature voting,
//! box smoothing and greedy non-maximum suppression.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::activation::ActivationStream;
use crate::error::{Error, Result};
use crate::index::InvertedSemanticIndex;
use crate::sae::SaeParams;

/// Features whose total frequency exceeds this are skipped when scoring.
pub const DEFAULT_STOP_FEATURE_THRESHOLD: u64 = 5000;
/// A grown span keeps neighbours scoring at least this fraction of its peak.
pub const SPAN_GROWTH_FRACTION: f64 = 0.25;

/// Smoothed inverse frequency `1 / (ln(1 + freq) + 1)`.
pub fn idf(freq: u64) -> f64 {
    1.0 / ((freq as f64).ln_1p() + 1.0)
}

/// IDF weight, or `None` if the feature is too common to score.
pub fn idf_weight(freq: u64, stop_threshold: u64) -> Option<f64> {
    (freq <= stop_threshold).then(|| idf(freq))
}

/// Per-layer query features with their activation weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryFeatures {
    layers: Vec<(u32, Vec<(u32, f64)>)>,
}

impl QueryFeatures {
    /// Layers are ordered by id and features by feature id; this is also the
    /// accumulation order used when scoring.
    pub fn new(layers: BTreeMap<u32, BTreeMap<u32, f64>>) -> Result<Self> {
        let mut out = Vec::with_capacity(layers.len());
        for (layer, feats) in layers {
            if let Some((f, w)) = feats.iter().find(|(_, w)| !(**w > 0.0 && w.is_finite())) {
                return Err(Error::contract(format!(
                    "query feature {f} in layer {layer} has non-positive weight {w}"
                )));
            }
            out.push((layer, feats.into_iter().collect()));
        }
        Ok(QueryFeatures { layers: out })
    }

    pub fn layers(&self) -> &[(u32, Vec<(u32, f64)>)] {
        &self.layers
    }

    pub fn features(&self, layer: u32) -> &[(u32, f64)] {
        self.layers
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, f)| f.as_slice())
            .unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|(_, f)| f.is_empty())
    }

    pub fn feature_count(&self) -> usize {
        self.layers.iter().map(|(_, f)| f.len()).sum()
    }
}

/// Encodes every query token with the shared SAE and merges the codes per
/// layer, keeping the largest activation seen for each feature.
pub fn encode_query(query: &ActivationStream, params: &SaeParams) -> Result<QueryFeatures> {
    if query.d_in() != params.d_in() {
        return Err(Error::contract(format!(
            "query activations have dimension {}, SAE expects {}",
            query.d_in(),
            params.d_in()
        )));
    }
    let mut merged: BTreeMap<u32, BTreeMap<u32, f64>> = BTreeMap::new();
    for (li, &layer) in query.layers().iter().enumerate() {
        let slot = merged.entry(layer).or_default();
        for t in 0..query.len() {
            let code = params.encode(query.vector(t, li))?;
            for &(f, a) in code.features() {
                let w = slot.entry(f).or_insert(a);
                if a > *w {
                    *w = a;
                }
            }
        }
    }
    QueryFeatures::new(merged)
}

/// Raw and smoothed relevance over the context.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreSignal {
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub kernel_size: usize,
}

impl ScoreSignal {
    pub fn new(raw: Vec<f64>, kernel_size: usize) -> Result<Self> {
        let smoothed = smooth(&raw, kernel_size)?;
        Ok(ScoreSignal {
            raw,
            smoothed,
            kernel_size,
        })
    }
}

/// Feature voting: every position collects `w * idf(freq)` for each query
/// feature whose posting list contains it.
pub fn score(
    index: &InvertedSemanticIndex,
    query: &QueryFeatures,
    stop_threshold: u64,
) -> Result<Vec<f64>> {
    if !index.is_frozen() {
        return Err(Error::contract("index must be frozen before scoring"));
    }
    let mut s = vec![0.0; index.context_len() as usize];
    for (layer, feats) in query.layers() {
        for &(f, w) in feats {
            let Some(list) = index.postings(*layer, f)? else {
                continue;
            };
            let Some(weight) = idf_weight(index.freq(f), stop_threshold) else {
                continue;
            };
            let vote = w * weight;
            for t in list.iter() {
                s[t as usize] += vote;
            }
        }
    }
    Ok(s)
}

/// Box filter of odd width `kernel_size`, normalized by the width, with zero
/// padding outside the signal.
pub fn smooth(raw: &[f64], kernel_size: usize) -> Result<Vec<f64>> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(Error::contract(format!(
            "kernel_size must be odd and positive, got {kernel_size}"
        )));
    }
    let half = kernel_size / 2;
    let n = raw.len();
    let scale = kernel_size as f64;
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n.saturating_sub(1));
            raw[lo..=hi].iter().sum::<f64>() / scale
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanSource {
    Semantic,
    Lexical,
    Bias,
}

/// An inclusive token range `[start, end]` with the position and value of its
/// highest score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSpan {
    pub start: usize,
    pub end: usize,
    pub peak_position: usize,
    pub peak_score: f64,
    pub source: SpanSource,
}

impl EvidenceSpan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// Greedy NMS: repeatedly take the best remaining position (ties to the
/// smaller index) and suppress everything within `radius` of it.
pub fn nms_centers(smoothed: &[f64], top_n: usize, radius: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..smoothed.len()).filter(|&i| smoothed[i] > 0.0).collect();
    order.sort_by(|&a, &b| smoothed[b].total_cmp(&smoothed[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; smoothed.len()];
    let mut centers = Vec::new();
    for c in order {
        if centers.len() == top_n {
            break;
        }
        if suppressed[c] {
            continue;
        }
        centers.push(c);
        let lo = c.saturating_sub(radius);
        let hi = (c + radius).min(smoothed.len() - 1);
        suppressed[lo..=hi].iter_mut().for_each(|s| *s = true);
    }
    centers
}

/// NMS centers grown into spans while the score stays at or above a quarter
/// of the center's score, capped at `radius` either side. Overlapping spans
/// are merged and each span reports the maximum score inside it.
pub fn select_spans(smoothed: &[f64], top_n: usize, radius: usize) -> Vec<EvidenceSpan> {
    let centers = nms_centers(smoothed, top_n, radius);
    let last = smoothed.len().saturating_sub(1);
    let mut ranges: Vec<(usize, usize)> = centers
        .into_iter()
        .map(|c| {
            let floor = smoothed[c] * SPAN_GROWTH_FRACTION;
            let left_cap = c.saturating_sub(radius);
            let right_cap = (c + radius).min(last);
            let mut start = c;
            while start > left_cap && smoothed[start - 1] >= floor {
                start -= 1;
            }
            let mut end = c;
            while end < right_cap && smoothed[end + 1] >= floor {
                end += 1;
            }
            (start, end)
        })
        .collect();
    ranges.sort_unstable();

    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in ranges {
        match merged.last_mut() {
            Some(prev) if s <= prev.1 => prev.1 = prev.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
        .into_iter()
        .map(|(start, end)| {
            let mut peak_position = start;
            for i in start..=end {
                if smoothed[i] > smoothed[peak_position] {
                    peak_position = i;
                }
            }
            EvidenceSpan {
                start,
                end,
                peak_position,
                peak_score: smoothed[peak_position],
                source: SpanSource::Semantic,
            }
        })
        .collect()
}
