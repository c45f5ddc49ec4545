//! Retrieval strategies behind a common trait, registered by name.
//!
//! Built-ins:
//! - `s3-pure`: feature voting over the inverted index, smoothing and NMS.
//! - `s3-hybrid`: `s3-pure` plus BM25 windows.
//! - `bm25`: BM25 windows only.
//! - `oracle`: brute-force feature voting over dense per-position codes,
//!   without the inverted index. Used as a reference for the others.

use std::collections::{BTreeMap, HashMap};

use crate::activation::ActivationStream;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::index::InvertedSemanticIndex;
use crate::lexical::LexicalIndex;
use crate::retrieval::{
    idf_weight, score, select_spans, EvidenceSpan, QueryFeatures, ScoreSignal, SpanSource,
    SPAN_GROWTH_FRACTION,
};
use crate::sae::{SaeParams, SparseCode};
use crate::timing::PhaseTimer;

/// Sparse codes for every (position, layer) of a context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextCodes {
    layers: Vec<u32>,
    codes: Vec<SparseCode>,
}

impl ContextCodes {
    pub fn encode(stream: &ActivationStream, params: &SaeParams) -> Result<Self> {
        let vectors: Vec<&[f32]> = (0..stream.len())
            .flat_map(|t| (0..stream.layers().len()).map(move |l| (t, l)))
            .map(|(t, l)| stream.vector(t, l))
            .collect();
        Ok(ContextCodes {
            layers: stream.layers().to_vec(),
            codes: params.encode_batch(&vectors)?,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn layers(&self) -> &[u32] {
        &self.layers
    }

    pub fn code(&self, position: usize, layer: u32) -> Result<&SparseCode> {
        let li = self
            .layers
            .iter()
            .position(|&l| l == layer)
            .ok_or(Error::UnknownLayer(layer))?;
        Ok(&self.codes[position * self.layers.len() + li])
    }

    pub fn all(&self) -> &[SparseCode] {
        &self.codes
    }
}

/// Everything a strategy may look at for one query.
pub struct RetrievalInput<'a> {
    pub index: &'a InvertedSemanticIndex,
    pub lexical: &'a LexicalIndex,
    pub query: &'a QueryFeatures,
    pub query_terms: &'a [String],
    pub config: &'a PipelineConfig,
    /// Dense codes of the context, for strategies that bypass the index.
    pub context_codes: Option<&'a ContextCodes>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Retrieved {
    pub semantic: Vec<EvidenceSpan>,
    pub lexical: Vec<EvidenceSpan>,
    pub signal: Option<ScoreSignal>,
}

pub trait Retriever: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    fn needs_context_codes(&self) -> bool {
        false
    }

    fn retrieve(&self, input: &RetrievalInput<'_>, timer: &mut PhaseTimer) -> Result<Retrieved>;
}

fn semantic_spans(
    input: &RetrievalInput<'_>,
    timer: &mut PhaseTimer,
) -> Result<(Vec<EvidenceSpan>, ScoreSignal)> {
    let cfg = input.config;
    let raw = score(input.index, input.query, cfg.stop_feature_threshold)?;
    timer.lap("score");
    let signal = ScoreSignal::new(raw, cfg.smoothing_kernel())?;
    timer.lap("smooth");
    let spans = select_spans(&signal.smoothed, cfg.top_centers, cfg.radius());
    timer.lap("select");
    Ok((spans, signal))
}

fn lexical_spans(input: &RetrievalInput<'_>, timer: &mut PhaseTimer) -> Vec<EvidenceSpan> {
    let spans = input
        .lexical
        .retrieve(input.query_terms, input.config.top_m);
    timer.lap("bm25");
    spans
}

pub struct SemanticRetriever;

impl Retriever for SemanticRetriever {
    fn name(&self) -> &'static str {
        "s3-pure"
    }

    fn description(&self) -> &'static str {
        "IDF-weighted feature co-activation, smoothed, NMS spans"
    }

    fn retrieve(&self, input: &RetrievalInput<'_>, timer: &mut PhaseTimer) -> Result<Retrieved> {
        let (semantic, signal) = semantic_spans(input, timer)?;
        Ok(Retrieved {
            semantic,
            lexical: Vec::new(),
            signal: Some(signal),
        })
    }
}

pub struct HybridRetriever;

impl Retriever for HybridRetriever {
    fn name(&self) -> &'static str {
        "s3-hybrid"
    }

    fn description(&self) -> &'static str {
        "semantic spans fused with BM25 windows"
    }

    fn retrieve(&self, input: &RetrievalInput<'_>, timer: &mut PhaseTimer) -> Result<Retrieved> {
        let (semantic, signal) = semantic_spans(input, timer)?;
        Ok(Retrieved {
            semantic,
            lexical: lexical_spans(input, timer),
            signal: Some(signal),
        })
    }
}

pub struct LexicalRetriever;

impl Retriever for LexicalRetriever {
    fn name(&self) -> &'static str {
        "bm25"
    }

    fn description(&self) -> &'static str {
        "BM25 over fixed token windows"
    }

    fn retrieve(&self, input: &RetrievalInput<'_>, timer: &mut PhaseTimer) -> Result<Retrieved> {
        Ok(Retrieved {
            semantic: Vec::new(),
            lexical: lexical_spans(input, timer),
            signal: None,
        })
    }
}

/// Reference retriever: scores every position directly from its dense codes
/// and picks centers by repeated full scans.
pub struct OracleRetriever;

impl OracleRetriever {
    pub fn dense_scores(
        codes: &ContextCodes,
        query: &QueryFeatures,
        stop_threshold: u64,
    ) -> Result<Vec<f64>> {
        let mut freq: HashMap<u32, u64> = HashMap::new();
        for code in codes.all() {
            for f in code.ids() {
                *freq.entry(f).or_insert(0) += 1;
            }
        }
        let mut out = Vec::with_capacity(codes.len());
        for t in 0..codes.len() {
            let mut s = 0.0;
            for (layer, feats) in query.layers() {
                let code = codes.code(t, *layer)?;
                for &(f, w) in feats {
                    if !code.contains(f) {
                        continue;
                    }
                    if let Some(weight) = idf_weight(freq[&f], stop_threshold) {
                        s += w * weight;
                    }
                }
            }
            out.push(s);
        }
        Ok(out)
    }

    fn box_filter(raw: &[f64], kernel: usize) -> Vec<f64> {
        let half = (kernel / 2) as isize;
        let n = raw.len() as isize;
        (0..n)
            .map(|i| {
                let mut acc = 0.0;
                for j in i - half..=i + half {
                    if (0..n).contains(&j) {
                        acc += raw[j as usize];
                    }
                }
                acc / kernel as f64
            })
            .collect()
    }

    fn scan_spans(s: &[f64], top_n: usize, radius: usize) -> Vec<EvidenceSpan> {
        let n = s.len();
        let mut suppressed = vec![false; n];
        let mut ranges = Vec::new();
        for _ in 0..top_n {
            let mut best: Option<usize> = None;
            for i in 0..n {
                if !suppressed[i] && s[i] > 0.0 && best.is_none_or(|b| s[i] > s[b]) {
                    best = Some(i);
                }
            }
            let Some(c) = best else { break };
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(n - 1);
            for flag in &mut suppressed[lo..=hi] {
                *flag = true;
            }
            let floor = s[c] * SPAN_GROWTH_FRACTION;
            let start = (lo..=c)
                .rev()
                .take_while(|&j| s[j] >= floor)
                .last()
                .unwrap_or(c);
            let end = (c..=hi).take_while(|&j| s[j] >= floor).last().unwrap_or(c);
            ranges.push((start, end));
        }
        ranges.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (a, b) in ranges {
            if let Some(last) = merged.last_mut() {
                if a <= last.1 {
                    last.1 = last.1.max(b);
                    continue;
                }
            }
            merged.push((a, b));
        }
        merged
            .into_iter()
            .map(|(start, end)| {
                let peak_position =
                    (start..=end).fold(start, |best, j| if s[j] > s[best] { j } else { best });
                EvidenceSpan {
                    start,
                    end,
                    peak_position,
                    peak_score: s[peak_position],
                    source: SpanSource::Semantic,
                }
            })
            .collect()
    }
}

impl Retriever for OracleRetriever {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn description(&self) -> &'static str {
        "brute-force reference scoring without the inverted index"
    }

    fn needs_context_codes(&self) -> bool {
        true
    }

    fn retrieve(&self, input: &RetrievalInput<'_>, timer: &mut PhaseTimer) -> Result<Retrieved> {
        let codes = input
            .context_codes
            .ok_or_else(|| Error::contract("the oracle retriever needs dense context codes"))?;
        let cfg = input.config;
        let raw = Self::dense_scores(codes, input.query, cfg.stop_feature_threshold)?;
        timer.lap("score");
        let kernel = cfg.smoothing_kernel();
        let smoothed = Self::box_filter(&raw, kernel);
        timer.lap("smooth");
        let semantic = Self::scan_spans(&smoothed, cfg.top_centers, cfg.radius());
        timer.lap("select");
        Ok(Retrieved {
            semantic,
            lexical: Vec::new(),
            signal: Some(ScoreSignal {
                raw,
                smoothed,
                kernel_size: kernel,
            }),
        })
    }
}

/// Name-keyed collection of retrieval strategies.
pub struct RetrieverRegistry {
    entries: BTreeMap<&'static str, Box<dyn Retriever>>,
}

impl Default for RetrieverRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl RetrieverRegistry {
    pub fn empty() -> Self {
        RetrieverRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(SemanticRetriever));
        r.register(Box::new(HybridRetriever));
        r.register(Box::new(LexicalRetriever));
        r.register(Box::new(OracleRetriever));
        r
    }

    /// Adds or replaces the strategy under its own name.
    pub fn register(&mut self, retriever: Box<dyn Retriever>) {
        self.entries.insert(retriever.name(), retriever);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Retriever> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownRetriever {
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Retriever> {
        self.entries.values().map(|b| b.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::smooth;

    #[test]
    fn builtins_are_registered() {
        let r = RetrieverRegistry::with_builtins();
        assert_eq!(r.names(), vec!["bm25", "oracle", "s3-hybrid", "s3-pure"]);
        assert_eq!(r.get("s3-pure").unwrap().name(), "s3-pure");
        assert!(r.get("oracle").unwrap().needs_context_codes());
        let err = r.get("dense").err().unwrap();
        assert!(err.to_string().contains("s3-hybrid"));
    }

    #[test]
    fn custom_strategy_can_replace_builtin() {
        struct Nothing;
        impl Retriever for Nothing {
            fn name(&self) -> &'static str {
                "bm25"
            }
            fn description(&self) -> &'static str {
                "returns nothing"
            }
            fn retrieve(&self, _: &RetrievalInput<'_>, _: &mut PhaseTimer) -> Result<Retrieved> {
                Ok(Retrieved::default())
            }
        }
        let mut r = RetrieverRegistry::with_builtins();
        r.register(Box::new(Nothing));
        assert_eq!(r.get("bm25").unwrap().description(), "returns nothing");
        assert_eq!(r.names().len(), 4);
    }

    #[test]
    fn oracle_helpers_agree_with_pipeline_primitives() {
        let raw = [0.0, 1.0, 0.5, 0.0, 0.0, 2.0, 2.0, 0.0, 0.1];
        assert_eq!(
            OracleRetriever::box_filter(&raw, 3),
            smooth(&raw, 3).unwrap()
        );
        let s = smooth(&raw, 3).unwrap();
        for (n, r) in [(1, 1), (3, 1), (5, 2), (2, 4)] {
            assert_eq!(
                OracleRetriever::scan_spans(&s, n, r),
                select_spans(&s, n, r)
            );
        }
    }
}
