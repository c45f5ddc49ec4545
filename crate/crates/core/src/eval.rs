//! Corpus evaluation: per-case and mean metrics over a directory of cases.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::activation::{read_activations, ActivationStream};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::index::build_index;
use crate::metrics::{default_probes, evidence_recall, iou, kl_divergence, ToyLanguageModel};
use crate::pipeline::{answer_metrics, run_query, QueryOutcome, QueryRequest};
use crate::sae::{read_params, SaeParams};
use crate::strategy::RetrieverRegistry;
use crate::synth::{Gold, SyntheticCase, CONTEXT_FILE, GOLD_FILE, QUERY_FILE, SAE_FILE};

#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    pub context: ActivationStream,
    pub query: ActivationStream,
    pub gold: Option<Gold>,
}

impl From<SyntheticCase> for EvalCase {
    fn from(c: SyntheticCase) -> Self {
        EvalCase {
            id: c.id,
            context: c.context,
            query: c.query,
            gold: Some(c.gold),
        }
    }
}

fn read_stream(path: &Path) -> Result<ActivationStream> {
    let f = File::open(path)
        .map_err(|e| Error::input(format!("cannot open {}: {e}", path.display())))?;
    read_activations(BufReader::new(f))
}

/// Loads the SAE and every case directory (sorted by name) under `dir`.
/// A case without `gold.json` is evaluated without answer or evidence metrics.
pub fn read_corpus(dir: &Path) -> Result<(SaeParams, Vec<EvalCase>)> {
    let sae_path = dir.join(SAE_FILE);
    let sae_file = File::open(&sae_path)
        .map_err(|e| Error::input(format!("cannot open {}: {e}", sae_path.display())))?;
    let sae = read_params(BufReader::new(sae_file))?;

    let mut dirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(CONTEXT_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::input(format!(
            "no cases found under {}",
            dir.display()
        )));
    }
    let mut cases = Vec::with_capacity(dirs.len());
    for d in dirs {
        let gold_path = d.join(GOLD_FILE);
        let gold = if gold_path.is_file() {
            let text = fs::read_to_string(&gold_path)?;
            Some(serde_json::from_str(&text).map_err(|e| {
                Error::format(format!("bad gold file {}: {e}", gold_path.display()))
            })?)
        } else {
            None
        };
        cases.push(EvalCase {
            id: d
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            context: read_stream(&d.join(CONTEXT_FILE))?,
            query: read_stream(&d.join(QUERY_FILE))?,
            gold,
        });
    }
    Ok((sae, cases))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub id: String,
    pub retriever: String,
    pub context_tokens: usize,
    pub compressed_tokens: usize,
    pub evidence_recall: Option<f64>,
    pub evidence_iou: Option<f64>,
    pub answer_recall: Option<u8>,
    /// `None` without an answer or when an answer token had zero probability.
    pub nll: Option<f64>,
    pub nll_zero_probability: bool,
    pub kl: f64,
}

pub fn evaluate_case(
    case: &EvalCase,
    sae: &SaeParams,
    config: &PipelineConfig,
    registry: &RetrieverRegistry,
) -> Result<(CaseMetrics, QueryOutcome)> {
    let index = build_index(&mut case.context.source(), sae, config.chunk_size)?;
    let tokens = case.context.token_texts();
    let query_tokens = case.query.token_texts();
    let outcome = run_query(
        &QueryRequest {
            index: &index,
            sae,
            query: &case.query,
            context_tokens: &tokens,
            context: Some(&case.context),
        },
        config,
        registry,
    )?;
    let compressed = &outcome.compressed;

    let mut m = CaseMetrics {
        id: case.id.clone(),
        retriever: outcome.retriever.clone(),
        context_tokens: tokens.len(),
        compressed_tokens: compressed.len(),
        evidence_recall: None,
        evidence_iou: None,
        answer_recall: None,
        nll: None,
        nll_zero_probability: false,
        kl: 0.0,
    };
    match &case.gold {
        Some(gold) => {
            if !gold.evidence.is_empty() {
                let positions = gold.evidence_positions();
                let selected: BTreeSet<usize> = compressed.positions.iter().copied().collect();
                m.evidence_recall = Some(evidence_recall(compressed, &positions));
                m.evidence_iou = Some(iou(&selected, &positions));
            }
            let a = answer_metrics(&tokens, compressed, &query_tokens, &gold.answer)?;
            m.answer_recall = Some(a.answer_recall);
            m.nll_zero_probability = a.nll.is_none();
            m.nll = a.nll;
            m.kl = a.kl;
        }
        None => {
            let mut corpus = tokens.clone();
            corpus.extend_from_slice(&query_tokens);
            let lm = ToyLanguageModel::new(&corpus, &[] as &[String]).with_context_adaptation(true);
            m.kl = kl_divergence(
                &lm,
                &tokens,
                &compressed.tokens,
                &default_probes(&query_tokens, &[]),
            )?;
        }
    }
    Ok((m, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub cases: usize,
    pub retriever: String,
    pub mean_evidence_recall: Option<f64>,
    pub mean_evidence_iou: Option<f64>,
    pub mean_answer_recall: Option<f64>,
    /// Mean over cases with a finite NLL.
    pub mean_nll: Option<f64>,
    pub zero_probability_cases: usize,
    pub mean_kl: f64,
    pub mean_compression_ratio: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalSummary {
    pub fn from_cases(retriever: &str, cases: &[CaseMetrics]) -> Self {
        EvalSummary {
            cases: cases.len(),
            retriever: retriever.to_string(),
            mean_evidence_recall: mean(cases.iter().filter_map(|c| c.evidence_recall)),
            mean_evidence_iou: mean(cases.iter().filter_map(|c| c.evidence_iou)),
            mean_answer_recall: mean(cases.iter().filter_map(|c| c.answer_recall.map(f64::from))),
            mean_nll: mean(cases.iter().filter_map(|c| c.nll)),
            zero_probability_cases: cases.iter().filter(|c| c.nll_zero_probability).count(),
            mean_kl: mean(cases.iter().map(|c| c.kl)).unwrap_or(0.0),
            mean_compression_ratio: mean(
                cases
                    .iter()
                    .map(|c| c.compressed_tokens as f64 / c.context_tokens.max(1) as f64),
            )
            .unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub summary: EvalSummary,
}

impl EvalReport {
    /// One JSON object per case followed by the summary object.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.cases {
            out.push_str(&crate::pipeline::to_json_line(c)?);
            out.push('\n');
        }
        out.push_str(&crate::pipeline::to_json_line(
            &serde_json::json!({ "summary": &self.summary }),
        )?);
        out.push('\n');
        Ok(out)
    }
}

/// Cases are evaluated in parallel; the report keeps input order.
pub fn evaluate_corpus(
    sae: &SaeParams,
    cases: &[EvalCase],
    config: &PipelineConfig,
    registry: &RetrieverRegistry,
) -> Result<EvalReport> {
    let retriever = registry.get(&config.retriever)?.name();
    let metrics = cases
        .par_iter()
        .map(|c| evaluate_case(c, sae, config, registry).map(|(m, _)| m))
        .collect::<Result<Vec<_>>>()?;
    let summary = EvalSummary::from_cases(retriever, &metrics);
    Ok(EvalReport {
        cases: metrics,
        summary,
    })
}
