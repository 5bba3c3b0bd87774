mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use depht::corpus::{self, evaluate, load_corpus, to_prolog, Instance};
use depht::funql::SignatureTable;
use depht::hybridtree::Sentence;
use depht::model::{Model, ModelError};
use depht::neural::EmbeddingTable;
use serde_json::json;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }

    fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Diverged(_) => "diverged",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Diverged(m) => m,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diverged(m) => CliError::Diverged(m),
            ModelError::MissingEmbeddings => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn data_err(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

#[derive(Parser)]
#[command(name = "depht", version, about = "Semantic parsing with dependency-based hybrid trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.depht and trace.tsv to the output directory.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: RunConfig,
    },
    /// Decode sentences with a trained model.
    Decode {
        #[arg(long)]
        model: PathBuf,
        /// Corpus file, or one sentence per line with --sentences.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sentences: bool,
        /// Predictions file (stdout when absent).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write one Prolog query per line.
        #[arg(long)]
        emit_prolog: Option<PathBuf>,
        /// Overrides the embedding path recorded in the model.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Score predictions against a gold corpus; prints metrics JSON.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        signatures: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Show the Viterbi hybrid tree of a sentence and its chart marginals.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sentence: String,
        /// Marginal TSV path (stdout after the diagram when absent).
        #[arg(long)]
        marginals: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, flags } => train(config.as_deref(), &flags),
        Command::Decode {
            model,
            input,
            sentences,
            output,
            emit_prolog,
            embeddings,
        } => decode(&model, &input, sentences, output.as_deref(), emit_prolog.as_deref(), embeddings.as_deref()),
        Command::Eval {
            predictions,
            gold,
            signatures,
            output,
        } => eval(&predictions, &gold, &signatures, output.as_deref()),
        Command::Inspect {
            model,
            sentence,
            marginals,
            embeddings,
        } => inspect(&model, &sentence, marginals.as_deref(), embeddings.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_signatures(path: &Path) -> Result<SignatureTable, CliError> {
    SignatureTable::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_instances(path: &Path, table: &SignatureTable, language: &str) -> Result<Vec<Instance>, CliError> {
    let loaded = load_corpus(path, table, language).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for err in &loaded.errors {
        log::warn!("{}: {err}", path.display());
    }
    if !loaded.errors.is_empty() {
        eprintln!("{}: skipped {} malformed records", path.display(), loaded.errors.len());
    }
    Ok(loaded.instances)
}

fn load_embeddings(path: &Path) -> Result<EmbeddingTable, CliError> {
    EmbeddingTable::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn train(config_path: Option<&Path>, flags: &RunConfig) -> Result<(), CliError> {
    let file = match config_path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let run = file.merge(flags);
    let config = run.model_config()?;
    let optimizer = run.optimizer()?;
    run.check_paths()?;
    let train_path = run.train.as_ref().ok_or_else(|| CliError::Config("missing `train`".into()))?;
    let sig_path = run
        .signatures
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `signatures`".into()))?;
    let out_dir = run.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));

    let table = load_signatures(sig_path)?;
    let data = load_instances(train_path, &table, run.language())?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{}: no usable instances", train_path.display())));
    }
    let embeddings = match &run.embeddings {
        Some(p) if config.neural || config.features.embedding => Some(load_embeddings(p)?),
        _ => None,
    };
    let mut model = Model::from_corpus(config, &data, embeddings)?;
    if let Some(p) = &run.embeddings {
        let abs = std::fs::canonicalize(p).unwrap_or_else(|_| p.clone());
        model.set_embedding_path(abs);
    }
    let report = model.train(&data, &optimizer)?;
    eprintln!(
        "trained on {} instances ({} dropped), {} iterations, objective {:.6}",
        report.used,
        report.dropped,
        report.iterations,
        report.trace.last().copied().unwrap_or(f64::NAN)
    );

    std::fs::create_dir_all(&out_dir).map_err(data_err(out_dir.display()))?;
    model.save(out_dir.join("model.depht")).map_err(CliError::from)?;
    let mut trace = String::from("iteration\tobjective\n");
    for (i, v) in report.trace.iter().enumerate() {
        let _ = writeln!(trace, "{i}\t{v}");
    }
    std::fs::write(out_dir.join("trace.tsv"), trace).map_err(data_err("trace.tsv"))?;

    if let Some(test_path) = &run.test {
        let test = load_instances(test_path, &table, run.language())?;
        let preds: Vec<_> = test
            .iter()
            .map(|i| model.decode(&i.sentence).ok().map(|d| d.meaning))
            .collect();
        let golds: Vec<_> = test.iter().map(|i| i.gold.clone()).collect();
        let m = evaluate(&preds, &golds).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(out_dir.join("test_predictions.txt"), corpus::format_predictions(&preds))
            .map_err(data_err("test_predictions.txt"))?;
        std::fs::write(out_dir.join("test_metrics.json"), metrics_json(&m)).map_err(data_err("test_metrics.json"))?;
    }
    Ok(())
}

fn open_model(path: &Path, embeddings: Option<&Path>) -> Result<Model, CliError> {
    let table = embeddings.map(load_embeddings).transpose()?;
    Model::load(path, table).map_err(|e| match e {
        ModelError::Io(io) => CliError::Data(format!("{}: {io}", path.display())),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

/// Sentence lines of a corpus file (the first line of every record), or
/// every non-empty line.
fn read_sentences(text: &str, plain: bool) -> Vec<String> {
    if plain {
        return text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    }
    let mut out = Vec::new();
    let mut first = true;
    for line in text.lines().map(str::trim) {
        if line.is_empty() {
            first = true;
        } else if first {
            out.push(line.to_string());
            first = false;
        }
    }
    out
}

fn decode(
    model_path: &Path,
    input: &Path,
    plain: bool,
    output: Option<&Path>,
    prolog: Option<&Path>,
    embeddings: Option<&Path>,
) -> Result<(), CliError> {
    let model = open_model(model_path, embeddings)?;
    let text = std::fs::read_to_string(input).map_err(data_err(input.display()))?;
    let mut preds = Vec::new();
    for line in read_sentences(&text, plain) {
        let sentence = Sentence::from_text(&line).map_err(|e| CliError::Data(e.to_string()))?;
        preds.push(model.decode(&sentence).ok().map(|d| d.meaning));
    }
    let rendered = corpus::format_predictions(&preds);
    match output {
        Some(p) => std::fs::write(p, rendered).map_err(data_err(p.display()))?,
        None => print!("{rendered}"),
    }
    if let Some(p) = prolog {
        let mut lines = String::new();
        for pred in &preds {
            if let Some(mr) = pred {
                lines.push_str(&to_prolog(mr));
            }
            lines.push('\n');
        }
        std::fs::write(p, lines).map_err(data_err(p.display()))?;
    }
    Ok(())
}

fn metrics_json(m: &corpus::Metrics) -> String {
    let value = json!({
        "accuracy": m.accuracy,
        "precision": m.precision,
        "recall": m.recall,
        "f1": m.f1,
        "n": m.n,
    });
    serde_json::to_string_pretty(&value).expect("metrics serialize") + "\n"
}

fn eval(predictions: &Path, gold: &Path, signatures: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let table = load_signatures(signatures)?;
    let text = std::fs::read_to_string(predictions).map_err(data_err(predictions.display()))?;
    let preds = corpus::parse_predictions(&text, &table).map_err(|e| CliError::Data(format!("{}: {e}", predictions.display())))?;
    let golds: Vec<_> = load_instances(gold, &table, "en")?.into_iter().map(|i| i.gold).collect();
    let metrics = evaluate(&preds, &golds).map_err(|e| CliError::Data(e.to_string()))?;
    let rendered = metrics_json(&metrics);
    match output {
        Some(p) => std::fs::write(p, &rendered).map_err(data_err(p.display()))?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn inspect(model_path: &Path, text: &str, marginals: Option<&Path>, embeddings: Option<&Path>) -> Result<(), CliError> {
    let model = open_model(model_path, embeddings)?;
    let sentence = Sentence::from_text(text).map_err(|e| CliError::Data(e.to_string()))?;
    let decoded = model
        .decode(&sentence)
        .map_err(|e| CliError::Data(format!("no derivation: {e}")))?;
    let grammar = model.grammar();
    println!("{}", decoded.meaning);
    println!("score {}", decoded.score);
    print!("{}", decoded.tree.diagram(&sentence, grammar));
    print!("{}", decoded.tree.to_lines(grammar));

    let pot = model.potentials(&sentence);
    let chart = depht::Chart::inside(&pot, model.label_space(), model.config().cap);
    let (_, spans) = chart.marginals_with_spans();
    let mut tsv = String::from("i\tj\tk\tdirection\tpattern\tunit\tlog_marginal\n");
    for s in spans {
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.head,
            s.end,
            s.modifier,
            s.direction.name(),
            s.pattern.name(),
            grammar.unit(s.unit),
            s.log_marginal
        );
    }
    match marginals {
        Some(p) => std::fs::write(p, tsv).map_err(data_err(p.display()))?,
        None => print!("{tsv}"),
    }
    Ok(())
}
