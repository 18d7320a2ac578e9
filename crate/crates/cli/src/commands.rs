use crate::http;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kvret_core::checkpoint::Checkpoint;
use kvret_core::corpus::{load_corpus, Domain};
use kvret_core::data::{preprocess, Dataset, PreparedCorpus, DEFAULT_MIN_COUNT};
use kvret_core::network::Ablation;
use kvret_core::server::{infer_domain, parse_kb, BusyPolicy, ServerConfig, SessionManager};
use kvret_core::synth;
use kvret_core::trainer::{evaluate, random_search, train, RunDir, SearchSpace, TrainConfig};
use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const DATA_ENV: &str = "KVRET_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "kvret", version, about = "Key-value retrieval network for in-car assistant dialogue", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Canonicalize and split a corpus, and build its vocabulary and lexicon.
    Preprocess(PreprocessArgs),
    /// Train a model on a preprocessed corpus.
    Train(TrainArgs),
    /// Random hyperparameter search scored on the validation split.
    Search(SearchArgs),
    /// Score a checkpoint: BLEU and entity F1, overall and per domain.
    Eval(EvalArgs),
    /// Serve the chat API over HTTP.
    Serve(ServeArgs),
    /// Chat with a checkpoint in the terminal.
    Chat(ChatArgs),
    /// Write a synthetic corpus in the released JSON layout.
    Synth(SynthArgs),
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ENV).map(PathBuf::from)
}

fn prepared_dir(explicit: Option<PathBuf>) -> Result<PathBuf> {
    explicit.or_else(|| data_root().map(|r| r.join("prepared"))).with_context(|| format!("no --data given and {DATA_ENV} is not set"))
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Corpus JSON file or directory [default: $KVRET_DATA_DIR]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory [default: $KVRET_DATA_DIR/prepared]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimum training-set count for a word to enter the vocabulary
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    pub min_count: usize,
}

/// Flags that override values from the config file.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long = "keep")]
    pub dropout_keep: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_decode_len: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblationArg {
    Full,
    EncOnly,
    KbOnly,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::EncOnly => Ablation::EncoderOnly,
            AblationArg::KbOnly => Ablation::KbOnly,
        }
    }
}

impl TrainOverrides {
    fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(dim, epochs, learning_rate, dropout_keep, l2, clip_norm, batch_size, seed, patience, max_decode_len, workers);
        if let Some(a) = self.ablation {
            c.ablation = a.into();
        }
        c
    }
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preprocessed corpus directory [default: $KVRET_DATA_DIR/prepared]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TOML file with training settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for best.ckpt and metrics.jsonl
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Base settings; sampled values replace learning rate, keep rate and L2
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Where to write the best configuration as TOML [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub search_seed: u64,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Attention paths to use at decoding time [default: as trained]
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    /// Also write the predictions as JSON lines
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Allowed CORS origin (repeatable) [default: any]
    #[arg(long = "cors-origin")]
    pub cors_origins: Vec<String>,
    /// Reject a message for a session that is still answering, instead of queueing it
    #[arg(long)]
    pub reject_busy: bool,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// KB as JSON: `{"column_names": [...], "items": [...]}` or a list of row objects
    #[arg(long)]
    pub kb: PathBuf,
    /// [default: inferred from the KB columns]
    #[arg(long, value_enum)]
    pub domain: Option<DomainArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print canonical tokens next to each reply
    #[arg(long)]
    pub show_canonical: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DomainArg {
    Schedule,
    Weather,
    Navigate,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Schedule => Domain::Schedule,
            DomainArg::Weather => Domain::Weather,
            DomainArg::Navigate => Domain::Navigate,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthKind {
    /// Multi-turn dialogues in all three domains
    Mixed,
    /// Single-turn questions answerable only from the KB
    Retrieval,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub dialogues: usize,
    #[arg(long, value_enum, default_value = "mixed")]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 2 for usage errors, 1 for any other failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command, &mut std::io::stdout().lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Preprocess(a) => cmd_preprocess(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Search(a) => cmd_search(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Serve(a) => cmd_serve(a),
        Command::Chat(a) => cmd_chat(a, &mut std::io::stdin().lock(), out),
        Command::Synth(a) => cmd_synth(a, out),
    }
}

fn cmd_preprocess(a: PreprocessArgs, out: &mut dyn Write) -> Result<()> {
    let corpus_path = a.corpus.or_else(data_root).with_context(|| format!("no --corpus given and {DATA_ENV} is not set"))?;
    let out_dir = prepared_dir(a.out)?;
    let corpus = load_corpus(&corpus_path)?;
    for e in &corpus.errors {
        log::warn!("skipping {e}");
    }
    let rejected = corpus.errors.len();
    let total = corpus.dialogues.len();
    let prepared = preprocess(corpus, a.seed, a.min_count);
    prepared.save(&out_dir)?;
    let summary = serde_json::json!({
        "dialogues": total,
        "rejected_records": rejected,
        "skipped_kbs": prepared.skipped.len(),
        "train": prepared.train.len(),
        "validation": prepared.validation.len(),
        "test": prepared.test.len(),
        "vocabulary": prepared.vocab.len(),
        "base_vocabulary": prepared.vocab.base_len(),
        "canonical_tokens": prepared.vocab.canonical_len(),
        "lexicon_entities": prepared.lexicon.len(),
        "out": out_dir,
    });
    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

struct Loaded {
    corpus: PreparedCorpus,
    train: Dataset,
    validation: Dataset,
}

fn load_prepared(dir: &Path) -> Result<Loaded> {
    let corpus = PreparedCorpus::load(dir).with_context(|| format!("loading preprocessed corpus from {}", dir.display()))?;
    let train = Dataset::new(&corpus.train, &corpus.vocab, &corpus.lexicon)?;
    let validation = Dataset::new(&corpus.validation, &corpus.vocab, &corpus.lexicon)?;
    Ok(Loaded { corpus, train, validation })
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let config = a.overrides.apply(load_config(a.config.as_deref())?);
    let data = load_prepared(&prepared_dir(a.data)?)?;
    let run = RunDir(a.out);
    let result = train(&data.train, &data.validation, &data.corpus.vocab, &data.corpus.lexicon, &config, Some(&run))?;
    let summary = serde_json::json!({
        "checkpoint": run.checkpoint(),
        "metrics": run.metrics(),
        "best_epoch": result.best_epoch,
        "val_entity_f1": result.best_val_f1,
        "val_loss": result.best_val_loss,
    });
    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn cmd_search(a: SearchArgs, out: &mut dyn Write) -> Result<()> {
    let base = a.overrides.apply(load_config(a.config.as_deref())?);
    let data = load_prepared(&prepared_dir(a.data)?)?;
    let result = random_search(&data.train, &data.validation, &data.corpus.vocab, &data.corpus.lexicon, &base, &SearchSpace::default(), a.trials, a.search_seed)?;
    for (i, t) in result.trials.iter().enumerate() {
        log::info!("trial {}: val entity F1 {:.4}, val loss {:.4}", i + 1, t.val_entity_f1, t.val_loss);
    }
    let best = toml::to_string(&result.best_trial().config)?;
    match a.out {
        Some(p) => {
            std::fs::write(&p, &best).with_context(|| format!("writing {}", p.display()))?;
            writeln!(out, "{}", serde_json::to_string_pretty(&result.trials)?)?;
        }
        None => write!(out, "{best}")?,
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let dir = prepared_dir(a.data)?;
    let corpus = PreparedCorpus::load(&dir).with_context(|| format!("loading preprocessed corpus from {}", dir.display()))?;
    let dialogues = match a.split {
        SplitArg::Train => &corpus.train,
        SplitArg::Validation => &corpus.validation,
        SplitArg::Test => &corpus.test,
    };
    let data = Dataset::new(dialogues, &ckpt.vocab, &corpus.lexicon)?;
    let model = match a.ablation {
        Some(ab) => ckpt.model.clone().with_ablation(ab.into()),
        None => ckpt.model.clone(),
    };
    let eval = evaluate(&ckpt.params, &model, &ckpt.vocab, &data, a.max_len)?;
    if let Some(p) = a.predictions {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?);
        for pair in &eval.pairs {
            writeln!(f, "{}", serde_json::to_string(pair)?)?;
        }
    }
    writeln!(out, "{}", serde_json::to_string_pretty(&eval.scores)?)?;
    Ok(())
}

fn manager(ckpt_path: &Path, config: ServerConfig) -> Result<SessionManager> {
    let ckpt = Checkpoint::load(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    Ok(SessionManager::new(ckpt, config))
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let config = ServerConfig { max_decode_len: a.max_len, busy: if a.reject_busy { BusyPolicy::Reject } else { BusyPolicy::Queue } };
    let state = Arc::new(manager(&a.ckpt, config)?);
    let cors = http::cors(&a.cors_origins)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(http::serve(state, cors, std::net::SocketAddr::new(a.host, a.port)))
}

pub fn cmd_chat(a: ChatArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let m = manager(&a.ckpt, ServerConfig::default())?;
    let text = std::fs::read_to_string(&a.kb).with_context(|| format!("reading {}", a.kb.display()))?;
    let kb = parse_kb(&serde_json::from_str(&text).with_context(|| format!("parsing {}", a.kb.display()))?)?;
    let domain = match a.domain.map(Domain::from).or_else(|| infer_domain(&kb)) {
        Some(d) => d,
        None => bail!("cannot tell the domain from the KB columns; pass --domain"),
    };
    let id = m.create_session(kb, domain, None, Some(a.seed))?;
    let mut line = String::new();
    loop {
        write!(out, "you> ")?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            writeln!(out)?;
            return Ok(());
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if matches!(text, "/quit" | "/exit") {
            return Ok(());
        }
        let r = m.respond(&id, text)?;
        writeln!(out, "bot> {}", r.reply)?;
        if a.show_canonical {
            writeln!(out, "     [{}]", r.canonical.join(" "))?;
        }
        if !r.unresolved.is_empty() {
            writeln!(out, "     (not in this KB: {})", r.unresolved.join(", "))?;
        }
    }
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let records = match a.kind {
        SynthKind::Mixed => synth::generate(a.dialogues, a.seed),
        SynthKind::Retrieval => synth::retrieval_task(a.dialogues, a.seed),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, synth::to_json(&records))?;
    writeln!(out, "wrote {} dialogues to {}", records.len(), a.out.display())?;
    Ok(())
}
