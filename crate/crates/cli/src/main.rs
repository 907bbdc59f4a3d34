use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use logtrans::corpus::{self, CorpusError, DatasetProfile, FormatSource, Preset};
use logtrans::metrics::{self, MetricsError, ReportEntry, Summary};
use logtrans::neural::{
    self, Arch, CellKind, Checkpoint, Decoding, ModelConfig, NeuralError, OptimizerConfig,
};
use logtrans::truth::{self, KnownFormat, TruthError};

#[derive(Parser)]
#[command(name = "logtrans", version, about = "Generate, annotate, train on and evaluate web-server log corpora")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated corpus.
    Generate(GenerateArgs),
    /// Annotate a real CLF/ELF log file.
    Annotate(AnnotateArgs),
    /// Train a translator on a corpus.
    Train(TrainArgs),
    /// Evaluate a trained translator on a corpus.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct GenerateArgs {
    /// JSON file with any of these options; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// TT, TE, TM, TMp, TH or custom.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output stem; writes STEM.raw and STEM.ann.
    #[arg(long)]
    out: Option<PathBuf>,
    /// custom: fewest fields in a random layout.
    #[arg(long)]
    min_fields: Option<usize>,
    /// custom: most fields in a random layout.
    #[arg(long)]
    max_fields: Option<usize>,
    /// custom: share of ELF records.
    #[arg(long)]
    elf_share: Option<f64>,
    /// custom: share of CLF records.
    #[arg(long)]
    clf_share: Option<f64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct AnnotateArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// elf, clf or quoted-elf.
    #[arg(long)]
    format: Option<String>,
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    /// Output stem; writes STEM.raw, STEM.ann and STEM.rejects.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// mc, ml or ms.
    #[arg(long)]
    arch: Option<String>,
    /// lstm or gru.
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    reverse_source: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus stem (STEM.raw / STEM.ann).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint path; the loss history goes to CKPT.history.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Beam width; 1 or absent decodes greedily unless the checkpoint says otherwise.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Dataset label in the report (default: corpus file name).
    #[arg(long)]
    dataset: Option<String>,
}

/// Error carrying its process exit code.
enum Failure {
    Io(String),
    Args(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Args(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Args(m) | Failure::Numeric(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn args_err(m: impl ToString) -> Failure {
    Failure::Args(m.to_string())
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Args(e.to_string()),
        }
    }
}

impl From<NeuralError> for Failure {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::Io { .. } => Failure::Io(e.to_string()),
            NeuralError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Args(e.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io { .. } | MetricsError::Csv(_) => Failure::Io(e.to_string()),
            _ => Failure::Args(e.to_string()),
        }
    }
}

impl From<TruthError> for Failure {
    fn from(e: TruthError) -> Self {
        Failure::Io(e.to_string())
    }
}

/// Fills every unset flag from the `--config` file.
macro_rules! overlay {
    ($args:ident, $($field:ident),+) => {
        if let Some(path) = $args.config.clone() {
            let file: Self = read_config(&path)?;
            $( if $args.$field.is_none() { $args.$field = file.$field; } )+
        }
    };
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| args_err(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| args_err(format!("config {}: {e}", path.display())))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, Failure> {
    value.ok_or_else(|| args_err(format!("--{flag} is required")))
}

fn print_resolved<T: Serialize>(value: &T) {
    println!("config: {}", serde_json::to_string(value).expect("config serializes"));
}

fn existing_corpus(stem: &Path) -> Result<(), Failure> {
    let (raw, ann) = corpus::corpus_paths(stem);
    for p in [raw, ann] {
        if !p.is_file() {
            return Err(args_err(format!("corpus file {} does not exist", p.display())));
        }
    }
    Ok(())
}

impl GenerateArgs {
    fn resolve(mut self) -> Result<Self, Failure> {
        overlay!(self, profile, count, seed, out, min_fields, max_fields, elf_share, clf_share);
        Ok(self)
    }

    fn profile(&self) -> Result<DatasetProfile, Failure> {
        let name = self.profile.clone().unwrap_or_else(|| "TT".into());
        let seed = self.seed.unwrap_or(0);
        let mut profile = if name.eq_ignore_ascii_case("custom") {
            let elf = self.elf_share.unwrap_or(0.0);
            let clf = self.clf_share.unwrap_or(0.0);
            let random = 1.0 - elf - clf;
            if random.is_nan() || random < -1e-12 {
                return Err(args_err("--elf-share and --clf-share exceed 1"));
            }
            let source = FormatSource::Random {
                min_fields: self.min_fields.unwrap_or(2),
                max_fields: self.max_fields.unwrap_or(15),
            };
            let mix = [(FormatSource::Elf, elf), (FormatSource::Clf, clf), (source, random.max(0.0))]
                .into_iter()
                .filter(|(_, p)| *p > 0.0)
                .collect();
            DatasetProfile {
                name: "custom".into(),
                count: corpus::DEFAULT_COUNT,
                mix,
                seed,
                grammar: Default::default(),
            }
        } else {
            let preset: Preset = name.parse()?;
            if self.min_fields.is_some() || self.max_fields.is_some() || self.elf_share.is_some() || self.clf_share.is_some() {
                return Err(args_err("field bounds and shares apply to --profile custom only"));
            }
            DatasetProfile::preset(preset, seed)
        };
        if let Some(n) = self.count {
            profile = profile.with_count(n);
        }
        profile.validate()?;
        Ok(profile)
    }
}

fn cmd_generate(args: GenerateArgs) -> Outcome {
    let args = args.resolve()?;
    let out = required(args.out.clone(), "out")?;
    let profile = args.profile()?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        profile: &'a DatasetProfile,
        out: &'a Path,
    }
    print_resolved(&Resolved { profile: &profile, out: &out });
    let records = corpus::generate_dataset(&profile)?;
    corpus::write_corpus(&records, &out)?;
    let stats = corpus::length_stats(&records).expect("count is positive");
    println!("records: {}", records.len());
    println!("length: min {} median {} max {}", stats.min, stats.median, stats.max);
    Ok(())
}

fn cmd_annotate(args: AnnotateArgs) -> Outcome {
    let mut args = args;
    if let Some(path) = args.config.clone() {
        let file: AnnotateArgs = read_config(&path)?;
        args.format = args.format.or(file.format);
        args.input = args.input.or(file.input);
        args.out = args.out.or(file.out);
    }
    let format: KnownFormat = required(args.format.clone(), "format")?.parse().map_err(args_err)?;
    let input = required(args.input.clone(), "in")?;
    let out = required(args.out.clone(), "out")?;
    print_resolved(&args);
    let annotated = truth::annotate_file(&input, format)?;
    corpus::write_corpus(&annotated.records, &out)?;
    let rejects_path = out.with_file_name(format!(
        "{}.rejects.csv",
        out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    truth::write_rejects(&annotated.rejects, &rejects_path)?;
    println!("annotated: {}", annotated.records.len());
    println!("rejected: {}", annotated.rejects.len());
    if let Some(stats) = corpus::length_stats(&annotated.records) {
        println!("length: min {} median {} max {}", stats.min, stats.median, stats.max);
    }
    Ok(())
}

impl TrainArgs {
    fn resolve(mut self) -> Result<Self, Failure> {
        overlay!(
            self,
            arch,
            cell,
            cells,
            layers,
            dropout,
            embedding_dim,
            max_len,
            beam_width,
            reverse_source,
            epochs,
            batch,
            patience,
            learning_rate,
            validation_fraction,
            clip_norm,
            seed,
            corpus,
            out
        );
        Ok(self)
    }

    fn configs(&self) -> Result<(ModelConfig, OptimizerConfig), Failure> {
        let d = ModelConfig::default();
        let model = ModelConfig {
            arch: match &self.arch {
                Some(s) => s.parse::<Arch>().map_err(args_err)?,
                None => d.arch,
            },
            cell: match &self.cell {
                Some(s) => s.parse::<CellKind>().map_err(args_err)?,
                None => d.cell,
            },
            cells: self.cells.unwrap_or(d.cells),
            layers: self.layers.unwrap_or(d.layers),
            dropout: self.dropout.unwrap_or(d.dropout),
            embedding_dim: self.embedding_dim.unwrap_or(d.embedding_dim),
            max_len: self.max_len.unwrap_or(d.max_len),
            beam_width: self.beam_width.unwrap_or(d.beam_width),
            reverse_source: self.reverse_source.unwrap_or(d.reverse_source),
            init_scale: d.init_scale,
        };
        let o = OptimizerConfig::default();
        let opt = OptimizerConfig {
            learning_rate: self.learning_rate.unwrap_or(o.learning_rate),
            batch_size: self.batch.unwrap_or(o.batch_size),
            max_epochs: self.epochs.unwrap_or(o.max_epochs),
            patience: self.patience.unwrap_or(o.patience),
            validation_fraction: self.validation_fraction.unwrap_or(o.validation_fraction),
            clip_norm: self.clip_norm.or(o.clip_norm),
            ..o
        };
        model.validate()?;
        opt.validate()?;
        Ok((model, opt))
    }
}

fn history_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".history.csv");
    PathBuf::from(name)
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let args = args.resolve()?;
    let (model, opt) = args.configs()?;
    let corpus_stem = required(args.corpus.clone(), "corpus")?;
    let out = required(args.out.clone(), "out")?;
    let seed = args.seed.unwrap_or(0);
    #[derive(Serialize)]
    struct Resolved<'a> {
        model: &'a ModelConfig,
        optimizer: &'a OptimizerConfig,
        seed: u64,
        corpus: &'a Path,
        out: &'a Path,
    }
    print_resolved(&Resolved { model: &model, optimizer: &opt, seed, corpus: &corpus_stem, out: &out });
    if !neural::PAPER_CELL_GRID.contains(&model.cells) {
        eprintln!("warning: cells {} outside the paper grid {:?}", model.cells, neural::PAPER_CELL_GRID);
    }
    if !neural::PAPER_DROPOUT_GRID.iter().any(|d| (d - model.dropout).abs() < 1e-12) {
        eprintln!("warning: dropout {} outside the paper grid {:?}", model.dropout, neural::PAPER_DROPOUT_GRID);
    }
    existing_corpus(&corpus_stem)?;
    let records = corpus::read_corpus(&corpus_stem)?;
    let outcome = neural::train(&model, &opt, &records, seed, |s| {
        println!("epoch {} train_loss {:.6} val_loss {:.6}", s.epoch, s.train_loss, s.val_loss);
    })?;
    if outcome.truncated > 0 {
        eprintln!("warning: {} records were truncated to {} characters", outcome.truncated, model.max_len);
    }
    outcome.checkpoint.save(&out)?;
    neural::write_history(&history_path(&out), &outcome.history)?;
    let last = outcome.history.last().expect("at least one epoch");
    println!("final train_loss {:.6}", last.train_loss);
    println!(
        "best epoch {} val_loss {:.6}{}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.best_val_loss,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn summary_line(metric: &str, s: &Summary, decimals: usize) -> String {
    let cells: Vec<String> = s.columns().iter().map(|v| format!("{v:>8.decimals$}")).collect();
    format!("{metric:<3}{}", cells.join(""))
}

fn cmd_evaluate(args: EvaluateArgs) -> Outcome {
    let mut args = args;
    if let Some(path) = args.config.clone() {
        let file: EvaluateArgs = read_config(&path)?;
        args.model = args.model.or(file.model);
        args.corpus = args.corpus.or(file.corpus);
        args.beam = args.beam.or(file.beam);
        args.report = args.report.or(file.report);
        args.dataset = args.dataset.or(file.dataset);
    }
    let model_path = required(args.model.clone(), "model")?;
    let corpus_stem = required(args.corpus.clone(), "corpus")?;
    let report = required(args.report.clone(), "report")?;
    if args.beam == Some(0) {
        return Err(args_err("--beam must be at least 1"));
    }
    if !model_path.is_file() {
        return Err(args_err(format!("checkpoint {} does not exist", model_path.display())));
    }
    existing_corpus(&corpus_stem)?;
    let checkpoint = Checkpoint::load(&model_path)?;
    let decoding = Decoding::from_width(args.beam.unwrap_or(checkpoint.config.beam_width));
    let dataset = args.dataset.clone().unwrap_or_else(|| {
        corpus_stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
    });
    #[derive(Serialize)]
    struct Resolved<'a> {
        model: &'a Path,
        corpus: &'a Path,
        decoding: String,
        report: &'a Path,
        dataset: &'a str,
    }
    print_resolved(&Resolved {
        model: &model_path,
        corpus: &corpus_stem,
        decoding: decoding.to_string(),
        report: &report,
        dataset: &dataset,
    });
    let records = corpus::read_corpus(&corpus_stem)?;
    let evaluation = metrics::evaluate_corpus(&checkpoint, &records, decoding)?;
    metrics::emit_report(&[ReportEntry { dataset: &dataset, evaluation: &evaluation }], &report)?;
    println!("records: {} ({:.4}% unknown source characters)", records.len(), 100.0 * evaluation.unk_fraction);
    let header: String = ["min", "avg", "q50", "q75", "q90", "q95", "q99", "max"].iter().map(|h| format!("{h:>8}")).collect();
    println!("   {header}");
    println!("{}", summary_line("DA", &evaluation.summary.da, 0));
    println!("{}", summary_line("DR", &evaluation.summary.dr, 2));
    println!("median DA {} DR {:.2}", evaluation.summary.da.q50, evaluation.summary.dr.q50);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Annotate(a) => cmd_annotate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
