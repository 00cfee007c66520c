//! Command-line surface: prepare datasets, train, evaluate, syllabify, and
//! generate the synthetic demo corpus.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use syllabel_core::checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION,
};
use syllabel_core::lexicon::{
    clean_duplicates, entry_to_line, parse_lexicon, read_split, split_dataset, LexiconError,
    LexiconFormat, PhoneTokenization, SplitMeta, write_split,
};
use syllabel_core::network::{ConfigPreset, ModelConfig, NetworkError, OutputHead};
use syllabel_core::synthetic::generate_synthetic_language;
use syllabel_core::tensor::TensorError;
use syllabel_core::training::{
    evaluate_word_accuracy, train, ExperimentReport, TrainError, TrainOptions,
    vocabulary_for_split,
};
use syllabel_core::Real;

#[derive(Parser)]
#[command(name = "syllabel", version, about = "Neural phonetic syllabification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a lexicon, drop duplicated words, and write an 80/10/10 split.
    Prepare(PrepareArgs),
    /// Train a model on a prepared split and save a checkpoint.
    Train(TrainArgs),
    /// Report word accuracy of one or more checkpoints on a dataset.
    Evaluate(EvaluateArgs),
    /// Syllabify lines of phones with a trained model.
    Syllabify(SyllabifyArgs),
    /// Generate a synthetic syllabified lexicon.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Lexicon file: one `word<TAB>syllabified-pronunciation` per line.
    lexicon: PathBuf,
    /// Directory for train.tsv, dev.tsv, test.tsv, and split.meta.
    #[arg(long)]
    out_dir: PathBuf,
    /// Phone tokenization: `char` or `whitespace`.
    #[arg(long, default_value = "char")]
    tokenization: PhoneTokenization,
    /// Syllable delimiter character.
    #[arg(long, default_value = "-")]
    delimiter: char,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory produced by `prepare`.
    split_dir: PathBuf,
    /// Model preset: `base`, `small`, or `base-softmax`.
    #[arg(long, default_value = "base")]
    preset: ConfigPreset,
    /// Checkpoint output path.
    #[arg(long)]
    output: PathBuf,
    /// Per-epoch JSON log; defaults to history.jsonl next to the checkpoint.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    lstm_dim: Option<usize>,
    #[arg(long)]
    conv_blocks: Option<usize>,
    #[arg(long)]
    conv_filters: Option<usize>,
    #[arg(long)]
    conv_width: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    dropout: Option<Real>,
    /// Output head override: `crf` or `softmax`.
    #[arg(long)]
    output_head: Option<OutputHead>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    clip_threshold: Option<Real>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset in the lexicon file format (gold syllabifications).
    dataset: PathBuf,
    /// Checkpoint path; repeat to aggregate several models.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args)]
struct SyllabifyArgs {
    /// Input file with one word's phones per line; stdin when omitted.
    input: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output lexicon file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    words: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Network(NetworkError::InvalidConfig { .. }) => 1,
            CliError::Train(TrainError::NonFiniteLoss { .. }) => 3,
            CliError::Train(TrainError::Tensor(TensorError::NonFinite { .. })) => 3,
            _ => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap's help/version output is not an error
            if err.use_stderr() {
                let _ = err.print();
                return ExitCode::from(1);
            }
            let _ = err.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Syllabify(args) => cmd_syllabify(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn cmd_prepare(args: PrepareArgs) -> Result<(), CliError> {
    let format = LexiconFormat {
        tokenization: args.tokenization,
        syllable_delimiter: args.delimiter,
    };
    let file = std::fs::File::open(&args.lexicon)?;
    let entries = parse_lexicon(std::io::BufReader::new(file), &format)?;
    let total = entries.len();
    let cleaned = clean_duplicates(entries);
    let removed = total - cleaned.len();
    let split = split_dataset(cleaned, args.seed)?;
    let meta = SplitMeta {
        seed: args.seed,
        removed,
        format,
    };
    write_split(&args.out_dir, &split, &meta)?;
    println!(
        "prepared {} entries ({} removed as duplicates): train {} / dev {} / test {}",
        split.total(),
        removed,
        split.train.len(),
        split.dev.len(),
        split.test.len()
    );
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn apply_overrides(config: &mut ModelConfig, args: &TrainArgs) {
    macro_rules! set {
        ($field:ident, $arg:expr) => {
            if let Some(v) = $arg {
                config.$field = v;
            }
        };
    }
    set!(embedding_dim, args.embedding_dim);
    set!(lstm_dim, args.lstm_dim);
    set!(conv_blocks, args.conv_blocks);
    set!(conv_filters, args.conv_filters);
    set!(conv_width, args.conv_width);
    set!(pool_size, args.pool_size);
    set!(dropout_rate, args.dropout);
    set!(output_head, args.output_head);
    set!(batch_size, args.batch_size);
    set!(max_epochs, args.max_epochs);
    set!(patience, args.patience);
    set!(clip_threshold, args.clip_threshold);
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let (split, _meta) = read_split(&args.split_dir)?;
    let mut config = args.preset.config();
    apply_overrides(&mut config, &args);
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let history_path = args.history.clone().unwrap_or_else(|| {
        args.output
            .parent()
            .unwrap_or(Path::new("."))
            .join("history.jsonl")
    });
    let mut history_file = std::io::BufWriter::new(std::fs::File::create(&history_path)?);

    let vocab = vocabulary_for_split(&split);
    let run = train(
        &config,
        &split,
        &vocab,
        args.seed,
        &TrainOptions::default(),
        |stats| {
            println!(
                "epoch {} train_loss {:.6} dev_word_accuracy {:.6}",
                stats.epoch, stats.train_loss, stats.dev_word_accuracy
            );
            let line = serde_json::to_string(stats).expect("stats serialize");
            let _ = writeln!(history_file, "{line}");
        },
    )?;
    let dev_accuracy = evaluate_word_accuracy(&run.final_params, &config, &vocab, &split.dev)?;
    let test_accuracy = evaluate_word_accuracy(&run.final_params, &config, &vocab, &split.test)?;
    println!(
        "best epoch {} (stopped_early: {}) dev {:.6} test {:.6}",
        run.best_epoch, run.stopped_early, dev_accuracy, test_accuracy
    );

    let (split2, meta) = (split, _meta);
    let mut metadata = BTreeMap::new();
    metadata.insert("preset".into(), format!("{:?}", args.preset).to_lowercase());
    metadata.insert("train_words".into(), split2.train.len().to_string());
    metadata.insert("dev_words".into(), split2.dev.len().to_string());
    metadata.insert("test_words".into(), split2.test.len().to_string());
    metadata.insert("best_epoch".into(), run.best_epoch.to_string());
    metadata.insert("dev_word_accuracy".into(), format!("{dev_accuracy:.6}"));
    metadata.insert("test_word_accuracy".into(), format!("{test_accuracy:.6}"));
    let ckpt = Checkpoint {
        format_version: FORMAT_VERSION,
        config,
        vocabulary: vocab,
        lexicon_format: meta.format,
        parameters: run.final_params,
        training_seed: args.seed,
        metadata,
    };
    save_checkpoint(&ckpt, &args.output)?;
    println!("saved {}", args.output.display());
    println!("history {}", history_path.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let mut accuracies = Vec::new();
    let mut shared_format: Option<LexiconFormat> = None;
    for path in &args.checkpoints {
        let ckpt = load_checkpoint(path)?;
        if let Some(f) = shared_format {
            if f != ckpt.lexicon_format {
                return Err(CliError::Usage(format!(
                    "checkpoint {} uses a different lexicon format than the others",
                    path.display()
                )));
            }
        } else {
            shared_format = Some(ckpt.lexicon_format);
        }
        let file = std::fs::File::open(&args.dataset)?;
        let entries = parse_lexicon(std::io::BufReader::new(file), &ckpt.lexicon_format)?;
        let oov_phones: usize = entries
            .iter()
            .flat_map(|e| &e.phones)
            .filter(|p| ckpt.vocabulary.index_of(p).is_none())
            .count();
        let accuracy =
            evaluate_word_accuracy(&ckpt.parameters, &ckpt.config, &ckpt.vocabulary, &entries)?;
        println!(
            "{}: word_accuracy {:.6} words {} oov_phones {}",
            path.display(),
            accuracy,
            entries.len(),
            oov_phones
        );
        accuracies.push(accuracy);
    }
    if accuracies.len() > 1 {
        let report = ExperimentReport::from_accuracies(accuracies);
        println!("aggregate: {}", report.format_row());
    }
    Ok(())
}

fn cmd_syllabify(args: SyllabifyArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let reader: Box<dyn BufRead> = match &args.input {
        Some(path) => Box::new(std::io::BufReader::new(std::fs::File::open(path)?)),
        None => Box::new(std::io::BufReader::new(std::io::stdin())),
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        match ckpt.syllabify_line(&line)? {
            None => eprintln!("warning: line {line_no}: empty line skipped"),
            Some(result) => {
                for phone in &result.unknown_phones {
                    eprintln!(
                        "warning: line {line_no}: unknown phone {phone:?} mapped to UNK"
                    );
                }
                if result.trailing_boundary {
                    eprintln!(
                        "warning: line {line_no}: trailing boundary predicted after final phone"
                    );
                }
                writeln!(out, "{}", result.text)?;
            }
        }
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let entries = generate_synthetic_language(args.words, args.seed);
    let format = LexiconFormat::default();
    let mut text = String::new();
    for entry in &entries {
        text.push_str(&entry_to_line(entry, &format));
        text.push('\n');
    }
    std::fs::write(&args.out, text)?;
    println!("wrote {} synthetic entries to {}", entries.len(), args.out.display());
    Ok(())
}
