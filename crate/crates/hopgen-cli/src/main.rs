//! Command-line driver: data generation, graph inspection, training,
//! generation, evaluation, and gradient checking.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hopgen::corpus::{flatten, load_hotpot_jsonl, Example, Vocab};
use hopgen::entgraph::{annotate, build_graph, identify_answer_entities, EdgeMode, Lexicon};
use hopgen::harness::{
    check_gradients, evaluate, generate, load_checkpoint, prepare, train, CheckScope, Config,
};
use hopgen::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hopgen",
    about = "Multi-hop question generation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bridge-question dataset plus its lexicon.
    GenData {
        /// RNG seed; the same seed always yields the same corpus.
        #[arg(long)]
        seed: u64,
        /// Number of examples to generate.
        #[arg(long)]
        count: usize,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        /// Entity pool size; triples are drawn from this pool.
        #[arg(long, default_value_t = 50)]
        pool: usize,
        /// Skip this many pool entities before drawing (disjoint splits).
        #[arg(long, default_value_t = 0)]
        pool_offset: usize,
        /// Distractor paragraphs appended to each example.
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        /// Shuffle paragraph order instead of supporting-first.
        #[arg(long)]
        shuffle_paragraphs: bool,
        /// Lexicon output path; defaults to the data path with a
        /// `lexicon.txt` extension.
        #[arg(long)]
        lexicon_out: Option<PathBuf>,
    },
    /// Build entity graphs for a dataset and dump them as DOT or JSONL.
    BuildGraph {
        /// Input dataset (JSONL, internal or HotpotQA-style records).
        #[arg(long)]
        data: PathBuf,
        /// Lexicon file (one entity surface per line).
        #[arg(long)]
        lexicon: PathBuf,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
        /// Output format.
        #[arg(long, default_value = "json")]
        format: GraphFormat,
        /// Entity cap per example.
        #[arg(long, default_value_t = 80)]
        max_entities: usize,
        /// Edge policy: sentence, paragraph, or both.
        #[arg(long, default_value = "both")]
        edges: String,
        /// Flattened context length cap.
        #[arg(long, default_value_t = 400)]
        max_context_len: usize,
    },
    /// Train a model from a JSON config file.
    Train {
        /// Path to the JSON config.
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate questions for a dataset with a trained checkpoint.
    Generate {
        /// Checkpoint JSON produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input dataset (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Beam width; defaults to the value stored in the checkpoint.
        #[arg(long)]
        beam: Option<usize>,
        /// Decode length cap; defaults to the checkpoint value.
        #[arg(long)]
        max_len: Option<usize>,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset's reference questions.
    Evaluate {
        /// Predictions JSONL with `id` and `prediction` fields.
        #[arg(long)]
        pred: PathBuf,
        /// Reference dataset (JSONL).
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Finite-difference gradient check on a small fixed example.
    GradCheck {
        /// Parameter family to sweep: all, encoder, or decoder.
        #[arg(long, default_value = "all")]
        module: String,
        /// Central-difference step size.
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GraphFormat {
    Json,
    Dot,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        let msg = serde_json::json!({ "error": e.to_string() });
        eprintln!("{msg}");
        std::process::exit(1);
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            seed,
            count,
            out,
            pool,
            pool_offset,
            distractors,
            shuffle_paragraphs,
            lexicon_out,
        } => gen_data(
            seed,
            count,
            &out,
            pool,
            pool_offset,
            distractors,
            shuffle_paragraphs,
            lexicon_out,
        ),
        Command::BuildGraph {
            data,
            lexicon,
            out,
            format,
            max_entities,
            edges,
            max_context_len,
        } => build_graphs(
            &data,
            &lexicon,
            &out,
            format,
            max_entities,
            &edges,
            max_context_len,
        ),
        Command::Train { config } => run_train(&config),
        Command::Generate {
            checkpoint,
            data,
            beam,
            max_len,
            out,
        } => run_generate(&checkpoint, &data, beam, max_len, &out),
        Command::Evaluate { pred, reference } => run_evaluate(&pred, &reference),
        Command::GradCheck {
            module,
            epsilon,
            tolerance,
        } => run_grad_check(&module, epsilon, tolerance),
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    seed: u64,
    count: usize,
    out: &Path,
    pool: usize,
    pool_offset: usize,
    distractors: usize,
    shuffle_paragraphs: bool,
    lexicon_out: Option<PathBuf>,
) -> Result<()> {
    let mut opts = hopgen::corpus::SynthOpts::new(seed, count, pool);
    opts.pool_offset = pool_offset;
    opts.distractors = distractors;
    opts.shuffle_paragraphs = shuffle_paragraphs;
    let ds = hopgen::corpus::generate_with(&opts)?;
    ds.write_jsonl(out)?;
    let lex_path = lexicon_out.unwrap_or_else(|| out.with_extension("lexicon.txt"));
    Lexicon::new(ds.lexicon_tokens()).save(&lex_path)?;
    let summary = serde_json::json!({
        "examples": ds.len(),
        "lexicon_entries": ds.lexicon.len(),
        "data": out,
        "lexicon": lex_path,
    });
    println!("{summary}");
    Ok(())
}

/// One analyzed example in the JSON graph dump.
#[derive(Serialize)]
struct GraphLine<'a> {
    id: &'a str,
    entities: usize,
    answer_entities: Vec<usize>,
    mentions: Vec<MentionLine>,
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize)]
struct MentionLine {
    entity: usize,
    surface: String,
    paragraph: usize,
    sentence: Option<usize>,
    span: (usize, usize),
}

fn analyze(
    ex: &Example,
    lexicon: &Lexicon,
    max_entities: usize,
    mode: EdgeMode,
    max_context_len: usize,
) -> Result<hopgen::entgraph::EntityGraph> {
    let flat = flatten(ex, max_context_len)?;
    let ann = annotate(&flat, lexicon, max_entities, true)?;
    let mut graph = build_graph(&ann.mentions, ann.g, mode);
    identify_answer_entities(&mut graph, &ex.answer.text, flat.answer_span);
    Ok(graph)
}

fn build_graphs(
    data: &Path,
    lexicon: &Path,
    out: &Path,
    format: GraphFormat,
    max_entities: usize,
    edges: &str,
    max_context_len: usize,
) -> Result<()> {
    let ds = load_hotpot_jsonl(data)?;
    let lexicon = Lexicon::load(lexicon)?;
    let mode: EdgeMode = edges.parse()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    for ex in &ds.examples {
        let graph = analyze(ex, &lexicon, max_entities, mode, max_context_len)?;
        match format {
            GraphFormat::Json => {
                let line = GraphLine {
                    id: &ex.id,
                    entities: graph.g,
                    answer_entities: graph.answer_entities.iter().copied().collect(),
                    mentions: graph
                        .mentions
                        .iter()
                        .map(|m| MentionLine {
                            entity: m.entity_idx,
                            surface: m.surface.join(" "),
                            paragraph: m.paragraph_idx,
                            sentence: m.sentence_idx,
                            span: m.span,
                        })
                        .collect(),
                    edges: graph.edges(),
                };
                serde_json::to_writer(&mut f, &line)?;
                writeln!(f)?;
            }
            GraphFormat::Dot => write_dot(&mut f, &ex.id, &graph)?,
        }
    }
    f.flush()?;
    let summary = serde_json::json!({ "examples": ds.len(), "out": out });
    println!("{summary}");
    Ok(())
}

/// Emit one undirected DOT graph. Node labels use the entity's first
/// mention surface; answer entities are drawn with doubled outlines.
fn write_dot(f: &mut impl Write, id: &str, graph: &hopgen::entgraph::EntityGraph) -> Result<()> {
    let safe: String = id
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '_' })
        .collect();
    writeln!(f, "graph ex_{safe} {{")?;
    writeln!(f, "  label=\"{id}\";")?;
    for e in 0..graph.g {
        let surface = graph
            .mentions
            .iter()
            .find(|m| m.entity_idx == e)
            .map(|m| m.surface.join(" "))
            .unwrap_or_default();
        let marker = if graph.answer_entities.contains(&e) {
            ", peripheries=2"
        } else {
            ""
        };
        writeln!(f, "  n{e} [label=\"{surface}\"{marker}];")?;
    }
    for (i, j) in graph.edges() {
        writeln!(f, "  n{i} -- n{j};")?;
    }
    writeln!(f, "}}")?;
    Ok(())
}

fn run_train(config: &Path) -> Result<()> {
    let cfg = Config::load(config)?;
    let outcome = train(&cfg)?;
    let summary = serde_json::json!({
        "epochs": outcome.epochs.len(),
        "steps": outcome.steps,
        "best_epoch": outcome.best_epoch,
        "best_dev_nll": outcome.best_dev,
        "stopped_early": outcome.stopped_early,
        "log": outcome.log_path,
        "best_checkpoint": outcome.best_checkpoint,
        "last_checkpoint": outcome.last_checkpoint,
    });
    println!("{summary}");
    Ok(())
}

/// Find a file written by `train` next to the checkpoint: first in the
/// checkpoint's own directory, then one level up (checkpoints live in a
/// `checkpoints/` subdirectory of the run).
fn sidecar(checkpoint: &Path, name: &str) -> Result<PathBuf> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let here = dir.join(name);
    if here.is_file() {
        return Ok(here);
    }
    if let Some(up) = dir.parent() {
        let above = up.join(name);
        if above.is_file() {
            return Ok(above);
        }
    }
    Err(Error::data(format!(
        "cannot find {name} next to {} or one directory up",
        checkpoint.display()
    )))
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    prediction: String,
    logprob: f64,
    score: f64,
}

fn run_generate(
    checkpoint: &Path,
    data: &Path,
    beam: Option<usize>,
    max_len: Option<usize>,
    out: &Path,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let store = ckpt.restore()?;
    let vocab = Vocab::load(&sidecar(checkpoint, "vocab.txt")?)?;
    let lexicon = Lexicon::load(&sidecar(checkpoint, "lexicon.txt")?)?;
    let embed = store.get("embed.word")?;
    if embed.rows() != vocab.len() {
        return Err(Error::data(format!(
            "vocab has {} tokens but the checkpoint embedding has {} rows",
            vocab.len(),
            embed.rows()
        )));
    }
    let cfg = &ckpt.config;
    let hp = cfg.encoder_hp(vocab.len());
    let beam = beam.unwrap_or(cfg.beam);
    let max_len = max_len.unwrap_or(cfg.max_decode_len);
    let ds = load_hotpot_jsonl(data)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    for ex in &ds.examples {
        let pe = prepare(ex, &vocab, &lexicon, cfg)?;
        let g = generate(&store, &pe, &hp, &vocab, beam, max_len)?;
        let line = PredictionLine {
            id: &ex.id,
            prediction: g.tokens.join(" "),
            logprob: g.logp,
            score: g.score,
        };
        serde_json::to_writer(&mut f, &line)?;
        writeln!(f)?;
    }
    f.flush()?;
    let summary = serde_json::json!({
        "examples": ds.len(),
        "beam": beam,
        "max_len": max_len,
        "out": out,
    });
    println!("{summary}");
    Ok(())
}

/// Prediction record as read back; unknown fields are ignored so
/// `generate` output feeds straight in.
#[derive(Deserialize)]
struct PredLine {
    id: String,
    prediction: String,
}

fn run_evaluate(pred: &Path, reference: &Path) -> Result<()> {
    let text = std::fs::read_to_string(pred)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", pred.display())))?;
    let mut preds = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: PredLine = serde_json::from_str(raw)
            .map_err(|e| Error::data_at(i + 1, format!("bad prediction record: {e}")))?;
        let tokens = line
            .prediction
            .split_whitespace()
            .map(str::to_string)
            .collect();
        preds.push((line.id, tokens));
    }
    let ds = load_hotpot_jsonl(reference)?;
    let refs: Vec<(String, Vec<String>)> = ds
        .examples
        .iter()
        .map(|ex| (ex.id.clone(), ex.question.clone()))
        .collect();
    let metrics = evaluate(&preds, &refs)?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

fn run_grad_check(module: &str, epsilon: f64, tolerance: f64) -> Result<()> {
    let scope: CheckScope = module.parse()?;
    let report = check_gradients(scope, epsilon)?;
    let worst = report
        .entries
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err));
    let summary = serde_json::json!({
        "module": module,
        "epsilon": epsilon,
        "tolerance": tolerance,
        "params_checked": report.entries.len(),
        "max_rel_err": report.max_rel_err(),
        "passed": report.passes(tolerance),
        "worst": worst.map(|w| serde_json::json!({
            "param": w.name,
            "index": w.index,
            "analytic": w.analytic,
            "numeric": w.numeric,
            "rel_err": w.rel_err,
        })),
    });
    println!("{summary}");
    if !report.passes(tolerance) {
        return Err(Error::data(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.3e}",
            report.max_rel_err(),
            tolerance
        )));
    }
    Ok(())
}
