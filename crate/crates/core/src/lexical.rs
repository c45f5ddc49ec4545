//! Okapi BM25 over fixed, non-overlapping token windows.

use std::collections::HashMap;

use crate::retrieval::{EvidenceSpan, SpanSource};

pub const DEFAULT_WINDOW: usize = 256;
pub const BM25_K1: f64 = 1.5;
pub const BM25_B: f64 = 0.75;

/// Lowercases and strips surrounding punctuation. Returns `None` when nothing
/// is left.
pub fn normalize_term(token: &str) -> Option<String> {
    let trimmed = token.trim_matches(|c: char| !c.is_alphanumeric());
    (!trimmed.is_empty()).then(|| trimmed.to_lowercase())
}

#[derive(Debug, Clone)]
struct Window {
    start: usize,
    end: usize,
    terms: HashMap<String, u32>,
    length: usize,
}

#[derive(Debug, Clone)]
pub struct LexicalIndex {
    window: usize,
    context_len: usize,
    windows: Vec<Window>,
    df: HashMap<String, u32>,
    avg_len: f64,
}

impl LexicalIndex {
    pub fn build<S: AsRef<str>>(tokens: &[S], window: usize) -> Self {
        let window = window.max(1);
        let mut windows = Vec::new();
        let mut df: HashMap<String, u32> = HashMap::new();
        for (w, chunk) in tokens.chunks(window).enumerate() {
            let mut terms: HashMap<String, u32> = HashMap::new();
            let mut length = 0;
            for term in chunk.iter().filter_map(|t| normalize_term(t.as_ref())) {
                *terms.entry(term).or_insert(0) += 1;
                length += 1;
            }
            for term in terms.keys() {
                *df.entry(term.clone()).or_insert(0) += 1;
            }
            windows.push(Window {
                start: w * window,
                end: w * window + chunk.len(),
                terms,
                length,
            });
        }
        let avg_len = if windows.is_empty() {
            0.0
        } else {
            windows.iter().map(|w| w.length as f64).sum::<f64>() / windows.len() as f64
        };
        LexicalIndex {
            window,
            context_len: tokens.len(),
            windows,
            df,
            avg_len,
        }
    }

    pub fn window_size(&self) -> usize {
        self.window
    }

    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    /// Half-open `[start, end)` bounds of every window.
    pub fn window_bounds(&self) -> Vec<(usize, usize)> {
        self.windows.iter().map(|w| (w.start, w.end)).collect()
    }

    pub fn df(&self, term: &str) -> u32 {
        normalize_term(term)
            .and_then(|t| self.df.get(&t).copied())
            .unwrap_or(0)
    }

    fn idf(&self, df: u32) -> f64 {
        let n = self.windows.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 score of every window. Query terms are normalized and summed in
    /// sorted order, so term order never changes the result.
    pub fn window_scores<S: AsRef<str>>(&self, query_terms: &[S]) -> Vec<f64> {
        let mut terms: Vec<String> = query_terms
            .iter()
            .filter_map(|t| normalize_term(t.as_ref()))
            .collect();
        terms.sort();
        self.windows
            .iter()
            .map(|w| {
                let norm = if self.avg_len > 0.0 {
                    1.0 - BM25_B + BM25_B * w.length as f64 / self.avg_len
                } else {
                    1.0
                };
                terms
                    .iter()
                    .map(|t| {
                        let tf = w.terms.get(t).copied().unwrap_or(0) as f64;
                        if tf == 0.0 {
                            return 0.0;
                        }
                        let df = self.df.get(t).copied().unwrap_or(0);
                        self.idf(df) * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
                    })
                    .sum()
            })
            .collect()
    }

    /// The `top_m` best windows with a positive score, as lexical spans.
    pub fn retrieve<S: AsRef<str>>(&self, query_terms: &[S], top_m: usize) -> Vec<EvidenceSpan> {
        let scores = self.window_scores(query_terms);
        let mut ranked: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        ranked
            .into_iter()
            .take(top_m)
            .map(|i| {
                let w = &self.windows[i];
                EvidenceSpan {
                    start: w.start,
                    end: w.end - 1,
                    peak_position: w.start,
                    peak_score: scores[i],
                    source: SpanSource::Lexical,
                }
            })
            .collect()
    }
}
