use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use hiergen::config::{Config, Dataset};
use hiergen::data::{load_embeddings, load_marco, load_squad, read_jsonl, write_jsonl, Corpus, QGInstance, TokenizedExample, Vocab};
use hiergen::decode::{generate, inspect_attention, GeneratedQuestion};
use hiergen::eval::EvalReport;
use hiergen::model::{Architecture, Model, ModelConfig};
use hiergen::tensor::{load_checkpoint, save_checkpoint};
use hiergen::train::{gradcheck, train, GradCheckOptions};

#[derive(Parser)]
#[command(name = "hiergen", version, about = "Answer-aware question generation with hierarchical paragraph encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "NAME")]
    arch: Option<String>,
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize, tag and split a SQuAD or MS MARCO file; build the vocabulary.
    Preprocess {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a preprocessed directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Generate questions for the dev split with a trained model.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Training output directory (config.txt, vocab.txt, best.ckpt).
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
    },
    /// Score generated questions (BLEU-1..4, ROUGE-L).
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Hypotheses, one per line (with --ref).
        #[arg(long, value_name = "PATH", requires = "reference")]
        hyp: Option<PathBuf>,
        /// References, one per line (with --hyp).
        #[arg(long = "ref", id = "reference", value_name = "PATH", requires = "hyp")]
        reference: Option<PathBuf>,
    },
    /// Finite-difference gradient check on a toy instance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Dump per-step sentence and word attention for one dev instance.
    InspectAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// Instance id, or its index in the dev split.
        #[arg(long, value_name = "ID", default_value = "0")]
        instance: String,
    },
}

/// Failure classes mapped to exit codes 1 and 2.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

fn classify(e: anyhow::Error) -> Failure {
    use hiergen::Error as E;
    let invalid = match e.downcast_ref::<E>() {
        Some(E::Config(_) | E::Parse { .. } | E::Argument(_)) => true,
        Some(E::Io { source, .. }) => source.kind() == std::io::ErrorKind::NotFound,
        Some(_) => false,
        None => e.downcast_ref::<Invalid>().is_some(),
    };
    if invalid {
        Failure::Invalid(e)
    } else {
        Failure::Runtime(e)
    }
}

/// Marks an error as a validation failure.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

fn resolve(common: &Common, base: Config) -> anyhow::Result<Config> {
    let mut cfg = base;
    if let Some(p) = &common.config {
        cfg.apply_file(p)?;
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(a) = &common.arch {
        cfg.set("arch", a)?;
    }
    cfg.validate()?;
    eprintln!("# resolved configuration (hash {})", cfg.hash());
    eprint!("{}", cfg.to_text());
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref().ok_or_else(|| invalid(format!("{flag} is required for this command")))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn make_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn json<T: serde::Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn raw_corpus_file(data: &Path, dataset: Dataset) -> anyhow::Result<PathBuf> {
    if data.is_file() {
        return Ok(data.to_path_buf());
    }
    let name = match dataset {
        Dataset::Squad => "train.json",
        Dataset::Marco => "train.jsonl",
    };
    let p = data.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(invalid(format!("no corpus file at {} (expected a file or a directory holding {name})", data.display())))
    }
}

fn preprocess(common: &Common) -> anyhow::Result<()> {
    let cfg = resolve(common, Config::default())?;
    let data = require(&common.data, "--data")?;
    let out = require(&common.out, "--out")?;
    let file = raw_corpus_file(data, cfg.data.dataset)?;
    let records = match cfg.data.dataset {
        Dataset::Squad => load_squad(&file)?,
        Dataset::Marco => load_marco(&file)?,
    };
    let corpus = Corpus::prepare(
        records,
        &cfg.model.limits,
        cfg.model.vocab_size,
        cfg.data.min_freq,
        cfg.data.split_ratio,
        cfg.model.seed,
    )?;
    make_dir(out)?;
    write_jsonl(out.join("train.jsonl"), &corpus.train)?;
    write_jsonl(out.join("dev.jsonl"), &corpus.dev)?;
    corpus.vocab.save(out.join("vocab.txt"))?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    let with_span = corpus.train.iter().chain(&corpus.dev).filter(|e| e.answer_span.is_some()).count();
    let report = serde_json::json!({
        "source": file.display().to_string(),
        "train": corpus.train.len(),
        "dev": corpus.dev.len(),
        "with_answer_span": with_span,
        "vocab_size": corpus.vocab.len(),
        "config_hash": cfg.hash(),
    });
    print!("{}", json(&report));
    Ok(())
}

struct Prepared {
    vocab: Vocab,
    train: Vec<QGInstance>,
    dev: Vec<QGInstance>,
}

fn load_prepared(dir: &Path) -> anyhow::Result<Prepared> {
    let vocab = Vocab::load(dir.join("vocab.txt"))?;
    let enc = |name: &str| -> anyhow::Result<Vec<QGInstance>> {
        let ex: Vec<TokenizedExample> = read_jsonl(dir.join(name))?;
        Ok(ex.iter().map(|e| QGInstance::encode(e, &vocab)).collect())
    };
    Ok(Prepared {
        train: enc("train.jsonl")?,
        dev: enc("dev.jsonl")?,
        vocab,
    })
}

fn train_cmd(common: &Common) -> anyhow::Result<()> {
    let mut cfg = resolve(common, Config::default())?;
    let data = require(&common.data, "--data")?;
    let out = require(&common.out, "--out")?;
    let prepared = load_prepared(data)?;
    cfg.model.vocab_size = prepared.vocab.len();
    let mut model = Model::build(cfg.model.clone())?;
    if let Some(p) = &cfg.data.embeddings {
        let table = load_embeddings(p, &prepared.vocab, cfg.model.emb_dim, cfg.model.seed)?;
        log::info!("pretrained vectors: {} hits, {} misses", table.hits, table.misses);
        model.set_embeddings(&table)?;
    }
    make_dir(out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    prepared.vocab.save(out.join("vocab.txt"))?;
    let record = train(&mut model, &prepared.train, &prepared.dev, &cfg.train, Some(out))?;
    save_checkpoint(model.params(), out.join("last.ckpt"))?;
    if record.best_checkpoint.is_none() {
        save_checkpoint(model.params(), out.join("best.ckpt"))?;
    }
    write_text(&out.join("train_record.json"), &json(&record))?;
    print!("{}", json(&record));
    Ok(())
}

fn load_model(dir: &Path, common: &Common) -> anyhow::Result<(Config, Model, Vocab)> {
    let mut base = Config::default();
    base.apply_file(dir.join("config.txt"))?;
    let cfg = resolve(common, base)?;
    let vocab = Vocab::load(dir.join("vocab.txt"))?;
    let mut mc: ModelConfig = cfg.model.clone();
    mc.vocab_size = vocab.len();
    let mut model = Model::build(mc)?;
    let ckpt = dir.join("best.ckpt");
    model.params_mut().assign(load_checkpoint(&ckpt)?)?;
    Ok((cfg, model, vocab))
}

fn generate_cmd(common: &Common, model_dir: &Path) -> anyhow::Result<()> {
    let (cfg, model, vocab) = load_model(model_dir, common)?;
    let data = require(&common.data, "--data")?;
    let ex: Vec<TokenizedExample> = read_jsonl(data.join("dev.jsonl"))?;
    let instances: Vec<QGInstance> = ex.iter().map(|e| QGInstance::encode(e, &vocab)).collect();
    let generated = generate(&model, &vocab, &instances, &cfg.decode)?;
    match &common.out {
        Some(out) => {
            make_dir(out)?;
            write_jsonl(out.join("generated.jsonl"), &generated)?;
            eprintln!("wrote {} questions to {}", generated.len(), out.join("generated.jsonl").display());
        }
        None => {
            for g in &generated {
                println!("{}", serde_json::to_string(g)?);
            }
        }
    }
    Ok(())
}

fn read_lines(p: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(p).map_err(|e| hiergen::Error::Io {
        path: p.to_path_buf(),
        source: e,
    })?;
    Ok(text.lines().map(String::from).collect())
}

fn evaluate_cmd(common: &Common, hyp: Option<&Path>, reference: Option<&Path>) -> anyhow::Result<()> {
    let cfg = resolve(common, Config::default())?;
    let (hyps, refs) = match (hyp, reference) {
        (Some(h), Some(r)) => (read_lines(h)?, read_lines(r)?),
        _ => {
            let data = require(&common.data, "--data or --hyp/--ref")?;
            let file = if data.is_dir() { data.join("generated.jsonl") } else { data.to_path_buf() };
            let rows: Vec<GeneratedQuestion> = read_jsonl(&file)?;
            rows.into_iter().map(|g| (g.generated, g.reference)).unzip()
        }
    };
    if hyps.len() != refs.len() {
        return Err(invalid(format!(
            "corpus lengths differ: {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut report = EvalReport::from_text(&hyps, &refs)?;
    report.config_hash = Some(cfg.hash());
    report.seed = Some(cfg.model.seed);
    let text = json(&report);
    if let Some(out) = &common.out {
        make_dir(out)?;
        write_text(&out.join("eval.json"), &text)?;
    }
    print!("{text}");
    Ok(())
}

/// Toy paragraph used when `gradcheck` gets no `--data`.
fn toy_gradcheck_instance() -> anyhow::Result<(Vocab, QGInstance)> {
    let vocab = Vocab::from_tokens(["the", "cat", "sat", ".", "a", "dog", "ran", "where", "did", "?"])?;
    let raw = hiergen::data::RawExample {
        id: "toy".into(),
        paragraph_id: "toy".into(),
        paragraph: "The cat sat. A dog ran.".into(),
        question: "Where did a dog ?".into(),
        answer: "dog ran".into(),
        answer_start: Some(15),
    };
    let ex = TokenizedExample::from_raw(&raw, &Default::default());
    Ok((vocab.clone(), QGInstance::encode(&ex, &vocab)))
}

fn gradcheck_cmd(common: &Common) -> anyhow::Result<bool> {
    let mut base = Config::default();
    base.model = ModelConfig::toy(Architecture::HierSeq2SeqAE, 16);
    let mut cfg = resolve(common, base)?;
    let (vocab_len, inst) = match &common.data {
        Some(dir) => {
            let p = load_prepared(dir)?;
            let inst = p
                .train
                .first()
                .cloned()
                .ok_or_else(|| invalid("preprocessed train split is empty"))?;
            (p.vocab.len(), inst)
        }
        None => {
            let (v, i) = toy_gradcheck_instance()?;
            (v.len(), i)
        }
    };
    cfg.model.vocab_size = vocab_len;
    let mut model = Model::build(cfg.model.clone())?;
    let opts = GradCheckOptions {
        seed: cfg.model.seed,
        ..GradCheckOptions::default()
    };
    let report = gradcheck(&mut model, &[inst], &opts)?;
    let text = json(&report);
    if let Some(out) = &common.out {
        make_dir(out)?;
        write_text(&out.join("gradcheck.json"), &text)?;
    }
    print!("{text}");
    if let Some(f) = report.failure() {
        eprintln!("{f}");
    }
    Ok(report.passed)
}

fn inspect_cmd(common: &Common, model_dir: &Path, which: &str) -> anyhow::Result<()> {
    let (cfg, model, vocab) = load_model(model_dir, common)?;
    if !cfg.model.arch.is_hierarchical() {
        return Err(invalid(format!(
            "{} has no sentence-level attention; inspect-attention needs HierSeq2SeqAE or HierTransSeq2SeqAE",
            cfg.model.arch
        )));
    }
    let data = require(&common.data, "--data")?;
    let ex: Vec<TokenizedExample> = read_jsonl(data.join("dev.jsonl"))?;
    let found = ex
        .iter()
        .find(|e| e.id == which)
        .or_else(|| which.parse::<usize>().ok().and_then(|i| ex.get(i)))
        .ok_or_else(|| invalid(format!("no dev instance `{which}`")))?;
    let inst = QGInstance::encode(found, &vocab);
    let report = inspect_attention(&model, &vocab, &inst, cfg.decode.max_len)?;
    let text = json(&report);
    if let Some(out) = &common.out {
        make_dir(out)?;
        write_text(&out.join("attention.json"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("HIERGEN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| invalid(format!("HIERGEN_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads().map_err(classify)?;
    let result = match &cli.command {
        Command::Preprocess { common } => preprocess(common),
        Command::Train { common } => train_cmd(common),
        Command::Generate { common, model } => generate_cmd(common, model),
        Command::Evaluate { common, hyp, reference } => evaluate_cmd(common, hyp.as_deref(), reference.as_deref()),
        Command::Gradcheck { common } => match gradcheck_cmd(common) {
            Ok(true) => Ok(()),
            Ok(false) => return Err(Failure::Runtime(anyhow!("gradient check failed"))),
            Err(e) => Err(e),
        },
        Command::InspectAttention { common, model, instance } => inspect_cmd(common, model, instance),
    };
    result.map_err(classify)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
