mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_rag::checkpoint::{load_checkpoint, save_checkpoint};
use latent_rag::control::ControlHead;
use latent_rag::datakit::{
    check_references, evaluate, generate_synthetic, load_corpus, load_dataset, save_corpus, save_dataset, Document,
    EvalMode, QAExample, SyntheticConfig,
};
use latent_rag::entropy_lab::entropy_experiment;
use latent_rag::index::VectorIndex;
use latent_rag::model::{ModelConfig, MicroTransformer};
use latent_rag::orchestrator::{write_traces, Orchestrator, StopPolicy};
use latent_rag::tokenizer::Vocab;
use latent_rag::trainer::{train, PositiveChoice, TrainConfig, TrainOutputs};
use latent_rag::Error;

#[derive(Parser)]
#[command(name = "latent-rag", version, about = "Latent-space retrieval-augmented generation with a micro transformer")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train and eval question sets.
    GenData(GenDataArgs),
    /// Train model and control head; writes a checkpoint.
    Train(TrainArgs),
    /// Encode a corpus into an index file.
    BuildIndex(BuildIndexArgs),
    /// Answer one question and print the retrieval trace.
    Query(QueryArgs),
    /// Evaluate on a dataset and write a JSON report.
    Eval(EvalArgs),
    /// Answer-token entropy versus number of gold documents in context.
    Entropy(EntropyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5000)]
    n_entities: usize,
    #[arg(long, default_value_t = 8)]
    n_relations: usize,
    #[arg(long, default_value_t = 4000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_eval: usize,
    /// Fraction of 1-hop questions; the rest are 2-hop.
    #[arg(long, default_value_t = 0.5)]
    hop_mix: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    ffn: usize,
    #[arg(long, default_value_t = 256)]
    max_context: usize,
    /// Control-head hidden width; defaults to d.
    #[arg(long)]
    head_hidden: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    mu: f64,
    #[arg(long, default_value_t = 15)]
    n_neg: usize,
    /// Sample the negatives from this many top-ranked non-positives.
    #[arg(long, default_value_t = 15)]
    neg_pool: usize,
    /// Contrastive target among leftover positives: hop-order or uniform.
    #[arg(long, default_value = "hop-order")]
    positive: PositiveChoice,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    max_turns: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f32,
    /// Steps of linear learning-rate warmup.
    #[arg(long, default_value_t = 0)]
    lr_warmup_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f32,
    #[arg(long, default_value_t = 200)]
    refresh_period: usize,
    /// Next-token passes over the corpus before joint training.
    #[arg(long, default_value_t = 0)]
    warmup_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long)]
    max_steps: Option<usize>,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            tau: self.tau,
            lambda: self.lambda,
            mu: self.mu,
            n_neg: self.n_neg,
            neg_pool: self.neg_pool,
            positive: self.positive,
            k: self.k,
            max_turns: self.max_turns,
            lr: self.lr,
            lr_warmup_steps: self.lr_warmup_steps,
            clip_norm: self.clip_norm,
            refresh_period: self.refresh_period,
            warmup_epochs: self.warmup_epochs,
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    train_set: PathBuf,
    /// Output checkpoint (also written after every epoch).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Line-delimited JSON training metrics.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Index over the corpus under the final weights.
    #[arg(long)]
    index_out: Option<PathBuf>,
    /// JSON summary (steps, epochs, refreshes, wall-clock seconds).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Continue from an existing checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Artifacts {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    max_turns: usize,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    artifacts: Artifacts,
    /// adaptive, single-shot or always-max.
    #[arg(long, default_value = "adaptive")]
    policy: String,
    question: String,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    artifacts: Artifacts,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of adaptive, single-shot, always-max, no-retrieval.
    #[arg(long, default_value = "adaptive,single-shot,always-max,no-retrieval")]
    modes: String,
    /// Directory for per-mode trace files.
    #[arg(long)]
    traces_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EntropyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    k_max: usize,
    /// Documents in every context (gold plus distractors).
    #[arg(long, default_value_t = 3)]
    docs: usize,
    /// Only use items with this many hops.
    #[arg(long, default_value_t = 2)]
    hops: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::Numerical(_) | Error::Domain(_) => 3,
        _ => 2,
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> latent_rag::Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(a: &GenDataArgs) -> latent_rag::Result<()> {
    let cfg = SyntheticConfig {
        n_entities: a.n_entities,
        n_relations: a.n_relations,
        n_train: a.n_train,
        n_eval: a.n_eval,
        hop_mix: [a.hop_mix, 1.0 - a.hop_mix],
        seed: a.seed,
    };
    let data = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    save_corpus(a.out_dir.join("corpus.jsonl"), &data.corpus)?;
    save_dataset(a.out_dir.join("train.jsonl"), &data.train)?;
    save_dataset(a.out_dir.join("eval.jsonl"), &data.eval)?;
    println!(
        "wrote {} documents, {} train and {} eval questions to {}",
        data.corpus.len(),
        data.train.len(),
        data.eval.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn vocab_for(corpus: &[Document], dataset: &[QAExample]) -> Vocab {
    Vocab::build(
        corpus
            .iter()
            .map(|d| d.text.as_str())
            .chain(dataset.iter().flat_map(|e| [e.question.as_str(), e.answer.as_str()])),
    )
}

fn run_train(a: &TrainArgs) -> latent_rag::Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let dataset = load_dataset(&a.train_set)?;
    check_references(&dataset, &corpus)?;
    let cfg = a.train.config();
    cfg.validate()?;
    let (mut model, mut head) = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => {
            let vocab = vocab_for(&corpus, &dataset);
            let mc = ModelConfig {
                d: a.model.d,
                n_layers: a.model.layers,
                n_heads: a.model.heads,
                ffn_dim: a.model.ffn,
                max_context: a.model.max_context,
                ..ModelConfig::micro(&vocab)
            };
            let model = MicroTransformer::new(mc, vocab, cfg.seed)?;
            let head = ControlHead::new(a.model.d, a.model.head_hidden.unwrap_or(a.model.d), cfg.seed.wrapping_add(1));
            (model, head)
        }
    };
    let mut index = VectorIndex::build(&corpus, &model)?;
    let report = train(
        &mut model,
        &mut head,
        &mut index,
        &corpus,
        &dataset,
        &cfg,
        &TrainOutputs {
            metrics_path: a.metrics.clone(),
            checkpoint_path: Some(a.checkpoint.clone()),
        },
    )?;
    save_checkpoint(&a.checkpoint, &model, &head)?;
    if let Some(p) = &a.index_out {
        index.save(p)?;
    }
    if let Some(p) = &a.report {
        let summary = serde_json::json!({
            "steps": report.steps,
            "epochs_completed": report.epochs_completed,
            "refreshes": report.refreshes,
            "elapsed_secs": report.elapsed_secs,
            "config": cfg,
        });
        write_json(p, &summary)?;
    }
    let last = report.metrics.last();
    println!(
        "trained {} steps over {} epochs in {:.1}s; final total loss {:.4}",
        report.steps,
        report.epochs_completed,
        report.elapsed_secs,
        last.map_or(f64::NAN, |m| m.total)
    );
    Ok(())
}

fn build_index(a: &BuildIndexArgs) -> latent_rag::Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let index = VectorIndex::build(&corpus, &model)?;
    index.save(&a.out)?;
    println!("indexed {} documents (dim {}) into {}", index.len(), index.dim(), a.out.display());
    Ok(())
}

struct Loaded {
    model: MicroTransformer,
    head: ControlHead,
    index: VectorIndex,
    corpus: Vec<Document>,
}

fn load_artifacts(a: &Artifacts) -> latent_rag::Result<Loaded> {
    let (model, head) = load_checkpoint(&a.checkpoint)?;
    let index = VectorIndex::load_for_model(&a.index, &model)?;
    index.check_model(&model)?;
    let corpus = load_corpus(&a.corpus)?;
    Ok(Loaded {
        model,
        head,
        index,
        corpus,
    })
}

fn parse_policy(s: &str) -> latent_rag::Result<StopPolicy> {
    match s {
        "adaptive" => Ok(StopPolicy::Adaptive),
        "single-shot" => Ok(StopPolicy::SingleShot),
        "always-max" => Ok(StopPolicy::AlwaysMax),
        other => Err(Error::InvalidArgument(format!("unknown policy `{other}`"))),
    }
}

fn query(a: &QueryArgs) -> latent_rag::Result<()> {
    let policy = parse_policy(&a.policy)?;
    let l = load_artifacts(&a.artifacts)?;
    let orch = Orchestrator::new(&l.model, &l.head, &l.index, &l.corpus, a.artifacts.k, a.artifacts.max_turns)?
        .with_policy(policy);
    let (answer, trace) = orch.run(&a.question)?;
    for t in &trace.turns {
        println!("turn {}  y_hat {:.4}  {:?}", t.turn, t.y_hat, t.decision);
        for d in &t.retrieved {
            println!("    {:<12} {:+.4}", d.doc_id, d.score);
        }
    }
    if trace.overflow {
        println!("(retrieval stopped early: context full)");
    }
    println!("answer: {answer}");
    Ok(())
}

fn eval(a: &EvalArgs) -> latent_rag::Result<()> {
    let modes: Vec<EvalMode> = a.modes.split(',').map(|m| m.trim().parse()).collect::<latent_rag::Result<_>>()?;
    let l = load_artifacts(&a.artifacts)?;
    let dataset = load_dataset(&a.dataset)?;
    check_references(&dataset, &l.corpus)?;
    let mut reports = Vec::new();
    for mode in modes {
        let (report, traces) = evaluate(
            &l.model,
            &l.head,
            &l.index,
            &l.corpus,
            &dataset,
            a.artifacts.k,
            a.artifacts.max_turns,
            mode,
        )?;
        println!(
            "{:<13} EM {:.3}  recall@hop1 {:.3}  both-gold {:.3}  turns {:.2}  ctrl-acc {:.3}",
            mode.name(),
            report.em,
            report.recall_hop1,
            report.both_gold_two_hop,
            report.mean_turns,
            report.control_accuracy
        );
        if let Some(dir) = &a.traces_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            write_traces(dir.join(format!("{}.jsonl", mode.name())), &traces)?;
        }
        reports.push(report);
    }
    write_json(
        &a.out,
        &serde_json::json!({
            "k": a.artifacts.k,
            "max_turns": a.artifacts.max_turns,
            "reports": reports,
        }),
    )
}

fn entropy(a: &EntropyArgs) -> latent_rag::Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let dataset: Vec<QAExample> = load_dataset(&a.dataset)?.into_iter().filter(|e| e.hops == a.hops).collect();
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(format!("no {}-hop items in the dataset", a.hops)));
    }
    let report = entropy_experiment(&dataset, &model, &corpus, a.k_max, a.docs, a.seed)?;
    report.save(&a.out, a.csv.as_deref())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: &Cli) -> latent_rag::Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::BuildIndex(a) => build_index(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Entropy(a) => entropy(a),
    }
}

fn main() -> ExitCode {
    let mut args: Vec<String> = std::env::args().collect();
    match config::take_config_flag(&mut args) {
        Ok(Some(path)) => match std::fs::read_to_string(&path) {
            Ok(text) => match config::parse(&text, Path::new(&path)) {
                Ok(entries) => config::merge(&mut args, &entries),
                Err(e) => {
                    eprintln!("error: {}", e.0);
                    return ExitCode::from(1);
                }
            },
            Err(e) => {
                eprintln!("error: cannot read config {path}: {e}");
                return ExitCode::from(1);
            }
        },
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {}", e.0);
            return ExitCode::from(1);
        }
    }
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
