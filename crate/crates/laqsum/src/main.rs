use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use laqsum::bpe::encode;
use laqsum::data::{self, SyntheticSpec};
use laqsum::error::Error;
use laqsum::lcs::AnnotationRecord;
use laqsum::mds::{iterative_summarize, Cluster};
use laqsum::rouge::{score_multi, RougeVariant};
use laqsum::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "laqsum", about = "Latent-query abstractive summarization", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a JSONL corpus.
    Train(TrainArgs),
    /// Emit weak labels for a corpus as JSONL.
    Tag(TagArgs),
    /// Summarize a document or a cluster of documents.
    Summarize(SummarizeArgs),
    /// Score candidate summaries against references.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic query-copy corpus.
    Synth(SynthArgs),
    /// Dump per-unit query beliefs for a document.
    InspectBelief(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TagArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Merge operations for the tokenizer trained on this corpus.
    #[arg(long, default_value_t = 220)]
    merges: usize,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Bundle directory produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Plain-text document, or a cluster source with --cluster.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    query: Option<String>,
    /// Treat the input as a multi-document cluster source.
    #[arg(long)]
    cluster: bool,
    /// Word budget for cluster summaries.
    #[arg(long, default_value_t = laqsum::mds::DEFAULT_BUDGET_WORDS)]
    budget: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    references: PathBuf,
    /// Comma-separated list among R1,R2,RL,RSU4.
    #[arg(long, default_value = "R1,R2,RL,RSU4")]
    variants: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 13)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    noise_rate: f64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    query: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ScoredText {
    id: String,
    text: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's help/version on stdout with success status.
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Data { .. } | Error::Io(_) | Error::Json(_) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn verbose() -> bool {
    !matches!(
        std::env::var("LAQSUM_LOG").as_deref(),
        Ok("quiet") | Ok("off")
    )
}

fn run(cli: Cli) -> laqsum::Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = match a.config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::desk(),
            };
            let (examples, warnings) = data::load_jsonl(&a.corpus, true)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let table = trainer::train_tokenizer(&examples, cfg.num_merges)?;
            let vocab = laqsum::model::Vocab {
                bpe_size: table.vocab_size(),
            };
            let corpus = trainer::prepare_corpus(&examples, &table, &vocab, &cfg.model)?;
            let chatty = verbose();
            let out = trainer::train_loop::<f32>(&corpus, &cfg, &vocab, Some(&a.out), |m| {
                if chatty && m.step % 50 == 0 {
                    eprintln!(
                        "step {} l_lm {:.4} l_tag {:.4} delta {:.3} lr {:.2e}",
                        m.step, m.l_lm, m.l_tag, m.delta, m.lr
                    );
                }
            })?;
            trainer::save_bundle(&a.out, &cfg, &table, &out.params, &out.opt_state, out.final_step)?;
            Ok(())
        }
        Command::Tag(a) => {
            let (examples, warnings) = data::load_jsonl(&a.corpus, true)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let table = trainer::train_tokenizer(&examples, a.merges)?;
            let records: Vec<laqsum::Result<AnnotationRecord>> =
                laqsum::par::map(&examples, |ex| {
                    ex.validate_for_training()?;
                    let doc = encode(&ex.document, &table);
                    let summary = encode(ex.summary.as_deref().unwrap_or(""), &table);
                    Ok(AnnotationRecord::new(&ex.id, &doc, &summary))
                });
            let mut lines = Vec::with_capacity(records.len());
            for r in records {
                let record: AnnotationRecord = r?;
                lines.push(serde_json::to_string(&record)?);
            }
            atomic_write(&a.out, &(lines.join("\n") + "\n"))?;
            Ok(())
        }
        Command::Summarize(a) => {
            let summarizer = trainer::load_summarizer::<f32>(&a.model)?;
            if a.cluster {
                let clusters = data::load_clusters(&a.input)?;
                for raw in clusters {
                    let mut cluster = Cluster::new(
                        raw.id,
                        raw.documents,
                        a.query.clone().unwrap_or(raw.query),
                    );
                    cluster.budget_words = a.budget;
                    let summary = iterative_summarize(&summarizer, &cluster)?;
                    println!("{}", summary.text);
                }
            } else {
                let doc = std::fs::read_to_string(&a.input)?;
                let text = summarizer.summarize_text(
                    &doc,
                    a.query.as_deref(),
                    &laqsum::model::DecodeConfig::default(),
                )?;
                println!("{text}");
            }
            Ok(())
        }
        Command::Evaluate(a) => {
            let variants: Vec<RougeVariant> = a
                .variants
                .split(',')
                .map(|v| {
                    RougeVariant::parse(v.trim())
                        .ok_or_else(|| Error::Config(format!("unknown metric variant: {v}")))
                })
                .collect::<laqsum::Result<_>>()?;
            let candidates = load_scored(&a.candidates)?;
            let references = load_scored_multi(&a.references)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "id,variant,precision,recall,f1")?;
            for c in &candidates {
                let refs = references.get(&c.id).ok_or_else(|| Error::Data {
                    path: a.references.display().to_string(),
                    msg: format!("no reference for id {}", c.id),
                })?;
                for v in &variants {
                    let s = score_multi(&c.text, refs, *v)?;
                    writeln!(
                        out,
                        "{},{},{:.6},{:.6},{:.6}",
                        c.id,
                        v.name(),
                        s.precision,
                        s.recall,
                        s.f1
                    )?;
                }
            }
            Ok(())
        }
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                seed: a.seed,
                noise_rate: a.noise_rate,
                ..SyntheticSpec::default()
            };
            let examples = data::generate_synthetic(&spec, a.n)?;
            data::write_jsonl(&a.out, &examples)?;
            Ok(())
        }
        Command::InspectBelief(a) => {
            let summarizer = trainer::load_summarizer::<f32>(&a.model)?;
            let doc = std::fs::read_to_string(&a.input)?;
            let (units, belief) = summarizer.belief_for_text(&doc, a.query.as_deref())?;
            let mut out = std::io::stdout().lock();
            for (surface, p) in units.iter().zip(&belief.probs) {
                writeln!(out, "{surface}\t{p:.6}")?;
            }
            Ok(())
        }
    }
}

fn load_scored(path: &PathBuf) -> laqsum::Result<Vec<ScoredText>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ScoredText = serde_json::from_str(line).map_err(|e| Error::Data {
            path: path.display().to_string(),
            msg: format!("line {}: {}", i + 1, e),
        })?;
        out.push(row);
    }
    Ok(out)
}

fn load_scored_multi(path: &PathBuf) -> laqsum::Result<BTreeMap<String, Vec<String>>> {
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in load_scored(path)? {
        map.entry(row.id).or_default().push(row.text);
    }
    Ok(map)
}

fn atomic_write(path: &PathBuf, text: &str) -> laqsum::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
