use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s3attn::config::{ConfigOverrides, PipelineConfig, Preset};
use s3attn::pipeline::{
    cmd_eval, cmd_index, cmd_inspect, cmd_query, cmd_synth, to_json_line, to_json_pretty,
    QueryPaths,
};
use s3attn::strategy::RetrieverRegistry;
use s3attn::synth::SynthConfig;
use s3attn::Result;

#[derive(Parser)]
#[command(
    name = "s3attn",
    version,
    about = "Sparse-feature evidence retrieval over long contexts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an inverted index from an activation file.
    Index {
        #[arg(long)]
        activations: PathBuf,
        #[arg(long)]
        sae: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Retrieve evidence for a query and print the compressed context.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        sae: PathBuf,
        /// Query activation file.
        #[arg(long)]
        query: PathBuf,
        /// Context tokens: an activation file or a text file with one token per line.
        #[arg(long)]
        tokens: PathBuf,
        /// Context activations, needed by the `oracle` retriever.
        #[arg(long)]
        context: Option<PathBuf>,
        /// Expected answer; adds recall, NLL and KL to the record.
        #[arg(long)]
        answer: Option<String>,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Write a seeded synthetic corpus with planted evidence.
    Synth {
        #[arg(long, default_value_t = 10)]
        n_cases: usize,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        context_len: Option<usize>,
        #[arg(long)]
        train_steps: Option<usize>,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Evaluate a corpus directory and print per-case and mean metrics.
    Eval {
        corpus: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Print statistics of an index file.
    Inspect {
        index: PathBuf,
        /// Number of most frequent features to list.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// List the registered retrievers.
    Retrievers,
}

#[derive(Args, Debug, Clone)]
struct ConfigFlags {
    /// TOML file whose values override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    retriever: Option<String>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    top_centers: Option<usize>,
    #[arg(long)]
    nms_radius: Option<usize>,
    #[arg(long)]
    lead_tokens: Option<usize>,
    #[arg(long)]
    tail_tokens: Option<usize>,
    #[arg(long)]
    stop_feature_threshold: Option<u64>,
    #[arg(long)]
    bm25_window: Option<usize>,
    #[arg(long)]
    top_m: Option<usize>,
    #[arg(long)]
    token_budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum PresetArg {
    Default,
    Qa,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<PipelineConfig> {
        let flags = ConfigOverrides {
            preset: self.preset.map(|p| match p {
                PresetArg::Default => Preset::Default,
                PresetArg::Qa => Preset::Qa,
            }),
            chunk_size: self.chunk_size,
            kernel_size: self.kernel_size,
            top_centers: self.top_centers,
            nms_radius: self.nms_radius,
            lead_tokens: self.lead_tokens,
            tail_tokens: self.tail_tokens,
            stop_feature_threshold: self.stop_feature_threshold,
            bm25_window: self.bm25_window,
            top_m: self.top_m,
            token_budget: self.token_budget,
            seed: self.seed,
            retriever: self.retriever.clone(),
        };
        let file = self
            .config
            .as_deref()
            .map(ConfigOverrides::from_file)
            .transpose()?;
        PipelineConfig::resolve(&flags, file.as_ref())
    }
}

fn run(cli: Cli) -> Result<()> {
    let registry = RetrieverRegistry::with_builtins();
    match cli.command {
        Command::Index {
            activations,
            sae,
            out,
            config,
        } => {
            let report = cmd_index(&activations, &sae, &out, &config.resolve()?)?;
            println!("{}", to_json_pretty(&report)?);
        }
        Command::Query {
            index,
            sae,
            query,
            tokens,
            context,
            answer,
            config,
        } => {
            let paths = QueryPaths {
                index: &index,
                sae: &sae,
                query: &query,
                tokens: &tokens,
                context: context.as_deref(),
                answer: answer.as_deref(),
            };
            let (record, timings) = cmd_query(&paths, &config.resolve()?, &registry)?;
            println!("{}", to_json_line(&record)?);
            eprintln!("{}", to_json_line(&timings)?);
        }
        Command::Synth {
            n_cases,
            out,
            context_len,
            train_steps,
            config,
        } => {
            let pipeline = config.resolve()?;
            let defaults = SynthConfig::default();
            let synth = SynthConfig {
                context_len: context_len.unwrap_or(defaults.context_len),
                train_steps: train_steps.unwrap_or(defaults.train_steps),
                seed: pipeline.seed,
                ..defaults
            };
            let report = cmd_synth(&synth, n_cases, &out)?;
            println!("{}", to_json_pretty(&report)?);
        }
        Command::Eval { corpus, config } => {
            let report = cmd_eval(&corpus, &config.resolve()?, &registry)?;
            print!("{}", report.to_json_lines()?);
        }
        Command::Inspect { index, top } => {
            println!("{}", to_json_pretty(&cmd_inspect(&index, top)?)?);
        }
        Command::Retrievers => {
            for r in registry.iter() {
                println!("{:<10} {}", r.name(), r.description());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
