//! End-to-end query path and the file-level commands behind the CLI.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::activation::{read_activations, read_header, ActivationReader, ActivationStream};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, read_corpus, EvalReport};
use crate::fusion::{fuse, CompressedContext};
use crate::index::{build_index_with_stats, BuildStats, InvertedSemanticIndex, MemoryReport};
use crate::lexical::{normalize_term, LexicalIndex};
use crate::metrics::{answer_recall, default_probes, kl_divergence, nll, ToyLanguageModel};
use crate::retrieval::{encode_query, EvidenceSpan, ScoreSignal, SpanSource};
use crate::sae::{read_params, SaeParams};
use crate::strategy::{ContextCodes, RetrievalInput, RetrieverRegistry};
use crate::synth::{generate_corpus, write_corpus, SynthConfig};
use crate::timing::{PhaseTimer, TimingReport};

/// Everything needed to answer a query against one context.
pub struct QueryRequest<'a> {
    pub index: &'a InvertedSemanticIndex,
    pub sae: &'a SaeParams,
    pub query: &'a ActivationStream,
    /// Context token texts, one per indexed position.
    pub context_tokens: &'a [String],
    /// Dense context activations; only read by strategies that need them.
    pub context: Option<&'a ActivationStream>,
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub retriever: String,
    pub spans: Vec<EvidenceSpan>,
    pub compressed: CompressedContext,
    pub signal: Option<ScoreSignal>,
    pub timings: TimingReport,
}

pub fn check_compatible(index: &InvertedSemanticIndex, sae: &SaeParams) -> Result<()> {
    let actual = sae.fingerprint();
    if index.fingerprint() != actual {
        return Err(Error::FingerprintMismatch {
            expected: index.fingerprint().to_string(),
            actual: actual.to_string(),
        });
    }
    Ok(())
}

pub fn query_terms(query: &ActivationStream) -> Vec<String> {
    query
        .tokens()
        .iter()
        .filter_map(|t| normalize_term(&t.text))
        .collect()
}

pub fn run_query(
    req: &QueryRequest<'_>,
    config: &PipelineConfig,
    registry: &RetrieverRegistry,
) -> Result<QueryOutcome> {
    let mut timer = PhaseTimer::new();
    config.validate()?;
    check_compatible(req.index, req.sae)?;
    if req.context_tokens.len() as u64 != req.index.context_len() {
        return Err(Error::contract(format!(
            "token table has {} entries but the index covers {} positions",
            req.context_tokens.len(),
            req.index.context_len()
        )));
    }
    if req.query.layers() != req.index.layer_ids() {
        return Err(Error::contract(
            "query layers differ from the indexed layers",
        ));
    }
    let retriever = registry.get(&config.retriever)?;
    timer.lap("setup");

    let query = encode_query(req.query, req.sae)?;
    let terms = query_terms(req.query);
    timer.lap("encode_query");

    let codes = if retriever.needs_context_codes() {
        let context = req.context.ok_or_else(|| {
            Error::contract(format!(
                "retriever '{}' needs the context activations",
                retriever.name()
            ))
        })?;
        Some(ContextCodes::encode(context, req.sae)?)
    } else {
        None
    };
    let lexical = LexicalIndex::build(req.context_tokens, config.bm25_window);
    timer.lap("prepare");

    let input = RetrievalInput {
        index: req.index,
        lexical: &lexical,
        query: &query,
        query_terms: &terms,
        config,
        context_codes: codes.as_ref(),
    };
    let retrieved = retriever.retrieve(&input, &mut timer)?;
    let compressed = fuse(
        &retrieved.semantic,
        &retrieved.lexical,
        &config.fusion(),
        req.context_tokens,
    )?;
    timer.lap("fuse");

    let mut spans = retrieved.semantic;
    spans.extend(retrieved.lexical);
    Ok(QueryOutcome {
        retriever: retriever.name().to_string(),
        spans,
        compressed,
        signal: retrieved.signal,
        timings: timer.report(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanRecord {
    pub start: usize,
    pub end: usize,
    pub peak: usize,
    pub score: f64,
    pub source: SpanSource,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnswerMetrics {
    pub answer_recall: u8,
    /// `None` when some answer token had zero probability.
    pub nll: Option<f64>,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub context_tokens: usize,
    pub compressed_tokens: usize,
    pub compression_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<AnswerMetrics>,
}

/// Deterministic part of a query result; timings are reported separately.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRecord {
    pub retriever: String,
    pub spans: Vec<SpanRecord>,
    pub positions: Vec<usize>,
    pub text: String,
    pub metrics: QueryMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingRecord {
    pub timings: TimingReport,
}

/// Answer metrics under a context-adaptive bigram model fitted to the full
/// context, the query and the answer.
pub fn answer_metrics(
    context_tokens: &[String],
    compressed: &CompressedContext,
    query_tokens: &[String],
    answer: &str,
) -> Result<AnswerMetrics> {
    let answer_tokens: Vec<String> = answer.split_whitespace().map(str::to_string).collect();
    let mut corpus = context_tokens.to_vec();
    corpus.extend_from_slice(query_tokens);
    let lm = ToyLanguageModel::new(&corpus, &answer_tokens).with_context_adaptation(true);

    let mut history = compressed.tokens.clone();
    history.extend_from_slice(query_tokens);
    let n = nll(&lm, &history, &answer_tokens)?;
    let kl = kl_divergence(
        &lm,
        context_tokens,
        &compressed.tokens,
        &default_probes(query_tokens, &answer_tokens),
    )?;
    Ok(AnswerMetrics {
        answer_recall: answer_recall(compressed, answer)?,
        nll: (!n.zero_probability).then_some(n.value),
        kl,
    })
}

impl ResultRecord {
    pub fn new(
        outcome: &QueryOutcome,
        context_tokens: &[String],
        query_tokens: &[String],
        answer: Option<&str>,
    ) -> Result<Self> {
        let c = &outcome.compressed;
        let answer = answer
            .map(|a| answer_metrics(context_tokens, c, query_tokens, a))
            .transpose()?;
        Ok(ResultRecord {
            retriever: outcome.retriever.clone(),
            spans: outcome
                .spans
                .iter()
                .map(|s| SpanRecord {
                    start: s.start,
                    end: s.end,
                    peak: s.peak_position,
                    score: s.peak_score,
                    source: s.source,
                })
                .collect(),
            positions: c.positions.clone(),
            text: c.text(),
            metrics: QueryMetrics {
                context_tokens: context_tokens.len(),
                compressed_tokens: c.len(),
                compression_ratio: c.len() as f64 / context_tokens.len().max(1) as f64,
                answer,
            },
        })
    }
}

pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::format(format!("cannot serialize record: {e}")))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("cannot serialize report: {e}")))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::input(format!("cannot open {}: {e}", path.display())))
}

pub fn load_sae(path: &Path) -> Result<SaeParams> {
    read_params(open(path)?)
}

pub fn load_index(path: &Path) -> Result<InvertedSemanticIndex> {
    InvertedSemanticIndex::read_from(open(path)?)
}

/// Reads context tokens from an activation file's token table, or from a
/// text file with one token per line.
pub fn load_tokens(path: &Path) -> Result<Vec<String>> {
    let mut head = [0u8; 4];
    let is_activation = {
        use std::io::Read;
        let mut f = File::open(path)?;
        f.read(&mut head)? == 4 && &head == crate::activation::ACTIVATION_MAGIC
    };
    if is_activation {
        let header = read_header(&mut open(path)?)?;
        return Ok(header.tokens.into_iter().map(|t| t.text).collect());
    }
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::format(format!(
            "{} is neither an activation file nor UTF-8 text: {e}",
            path.display()
        ))
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct IndexReport {
    pub context_len: u64,
    pub layers: Vec<u32>,
    pub fingerprint: String,
    pub memory: MemoryReport,
    pub build: BuildStats,
}

pub fn cmd_index(
    activations: &Path,
    sae_path: &Path,
    out: &Path,
    config: &PipelineConfig,
) -> Result<IndexReport> {
    config.validate()?;
    let sae = load_sae(sae_path)?;
    let mut reader = ActivationReader::new(open(activations)?)?;
    let (index, build) = build_index_with_stats(&mut reader, &sae, config.chunk_size)?;
    let mut w = BufWriter::new(File::create(out)?);
    index.write_to(&mut w)?;
    w.flush()?;
    Ok(IndexReport {
        context_len: index.context_len(),
        layers: index.layer_ids().to_vec(),
        fingerprint: index.fingerprint().to_string(),
        memory: index.memory_report()?,
        build,
    })
}

pub struct QueryPaths<'a> {
    pub index: &'a Path,
    pub sae: &'a Path,
    pub query: &'a Path,
    pub tokens: &'a Path,
    /// Context activations, for retrievers that bypass the index.
    pub context: Option<&'a Path>,
    pub answer: Option<&'a str>,
}

pub fn cmd_query(
    paths: &QueryPaths<'_>,
    config: &PipelineConfig,
    registry: &RetrieverRegistry,
) -> Result<(ResultRecord, TimingRecord)> {
    let sae = load_sae(paths.sae)?;
    let index = load_index(paths.index)?;
    check_compatible(&index, &sae)?;
    let query = read_activations(open(paths.query)?)?;
    let tokens = load_tokens(paths.tokens)?;
    let context = paths
        .context
        .map(|p| read_activations(open(p)?))
        .transpose()?;
    let outcome = run_query(
        &QueryRequest {
            index: &index,
            sae: &sae,
            query: &query,
            context_tokens: &tokens,
            context: context.as_ref(),
        },
        config,
        registry,
    )?;
    let record = ResultRecord::new(&outcome, &tokens, &query.token_texts(), paths.answer)?;
    Ok((
        record,
        TimingRecord {
            timings: outcome.timings,
        },
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub out_dir: PathBuf,
    pub cases: usize,
    pub fingerprint: String,
}

pub fn cmd_synth(synth: &SynthConfig, n_cases: usize, out_dir: &Path) -> Result<SynthReport> {
    let corpus = generate_corpus(synth, n_cases)?;
    write_corpus(&corpus, out_dir)?;
    Ok(SynthReport {
        out_dir: out_dir.to_path_buf(),
        cases: corpus.cases.len(),
        fingerprint: corpus.sae.fingerprint().to_string(),
    })
}

pub fn cmd_eval(
    corpus_dir: &Path,
    config: &PipelineConfig,
    registry: &RetrieverRegistry,
) -> Result<EvalReport> {
    let (sae, cases) = read_corpus(corpus_dir)?;
    evaluate_corpus(&sae, &cases, config, registry)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerStats {
    pub layer: u32,
    pub features: usize,
    pub postings: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub context_len: u64,
    pub fingerprint: String,
    pub layers: Vec<LayerStats>,
    pub distinct_features: usize,
    pub memory: MemoryReport,
    /// Most frequent features as `(feature, freq)`, highest first.
    pub top_features: Vec<(u32, u64)>,
}

pub fn cmd_inspect(index_path: &Path, top: usize) -> Result<InspectReport> {
    let index = load_index(index_path)?;
    let mut layers = Vec::new();
    for &layer in index.layer_ids() {
        let mut features = 0;
        let mut postings = 0;
        for (_, list) in index.layer_features(layer)? {
            features += 1;
            postings += list.len();
        }
        layers.push(LayerStats {
            layer,
            features,
            postings,
        });
    }
    let mut top_features: Vec<(u32, u64)> =
        index.frequencies().iter().map(|(f, n)| (*f, *n)).collect();
    top_features.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    top_features.truncate(top);
    Ok(InspectReport {
        context_len: index.context_len(),
        fingerprint: index.fingerprint().to_string(),
        layers,
        distinct_features: index.frequencies().len(),
        memory: index.memory_report()?,
        top_features,
    })
}
