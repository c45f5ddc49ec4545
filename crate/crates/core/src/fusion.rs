//! Hybrid fusion of semantic spans, lexical spans and lead/tail bias into a
//! compressed context.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{EvidenceSpan, SpanSource};

pub const DEFAULT_LEAD_TOKENS: usize = 64;
pub const DEFAULT_TAIL_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lead_tokens: usize,
    pub tail_tokens: usize,
    pub token_budget: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lead_tokens: DEFAULT_LEAD_TOKENS,
            tail_tokens: DEFAULT_TAIL_TOKENS,
            token_budget: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub semantic: bool,
    pub lexical: bool,
    pub bias: bool,
}

impl Provenance {
    fn mark(&mut self, source: SpanSource) {
        match source {
            SpanSource::Semantic => self.semantic = true,
            SpanSource::Lexical => self.lexical = true,
            SpanSource::Bias => self.bias = true,
        }
    }

    fn any(&self) -> bool {
        self.semantic || self.lexical || self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedContext {
    pub positions: Vec<usize>,
    pub tokens: Vec<String>,
    pub provenance: Vec<Provenance>,
}

impl CompressedContext {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Gathered tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Maximal runs of consecutive positions as inclusive ranges.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &p in &self.positions {
            match runs.last_mut() {
                Some(run) if run.1 + 1 == p => run.1 = p,
                _ => runs.push((p, p)),
            }
        }
        runs
    }

    pub fn contains(&self, position: usize) -> bool {
        self.positions.binary_search(&position).is_ok()
    }
}

/// Union of all spans plus the first `lead_tokens` and last `tail_tokens`
/// positions. When a budget is set and exceeded, non-bias positions are
/// dropped lowest peak score first (later positions first on ties).
pub fn fuse<S: AsRef<str>>(
    semantic: &[EvidenceSpan],
    lexical: &[EvidenceSpan],
    config: &FusionConfig,
    tokens: &[S],
) -> Result<CompressedContext> {
    let len = tokens.len();
    let mut provenance = vec![Provenance::default(); len];
    let mut priority = vec![f64::NEG_INFINITY; len];

    for span in semantic.iter().chain(lexical) {
        if span.start > span.end || span.end >= len {
            return Err(Error::contract(format!(
                "span [{}, {}] outside context of length {len}",
                span.start, span.end
            )));
        }
        for p in span.positions() {
            provenance[p].mark(span.source);
            priority[p] = priority[p].max(span.peak_score);
        }
    }
    let lead = config.lead_tokens.min(len);
    let tail = config.tail_tokens.min(len);
    for p in (0..lead).chain(len - tail..len) {
        provenance[p].bias = true;
    }

    if let Some(budget) = config.token_budget {
        let selected = provenance.iter().filter(|p| p.any()).count();
        if selected > budget {
            let mut droppable: Vec<usize> = (0..len)
                .filter(|&p| provenance[p].any() && !provenance[p].bias)
                .collect();
            droppable.sort_by(|&a, &b| priority[a].total_cmp(&priority[b]).then(b.cmp(&a)));
            for &p in droppable.iter().take(selected - budget) {
                provenance[p] = Provenance::default();
            }
        }
    }

    let positions: Vec<usize> = (0..len).filter(|&p| provenance[p].any()).collect();
    Ok(CompressedContext {
        tokens: positions
            .iter()
            .map(|&p| tokens[p].as_ref().to_string())
            .collect(),
        provenance: positions.iter().map(|&p| provenance[p]).collect(),
        positions,
    })
}
