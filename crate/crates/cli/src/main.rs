//! `idnp`: ingest interaction logs, train, evaluate and query the model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idnp::config::RunConfig;
use idnp::corpus::{load_interactions, synth_generate, write_interactions, window, Catalog, Dataset, PAD};
use idnp::decoder::top_k;
use idnp::evalkit::{eval_cases, evaluate, EvalReport, Ranker};
use idnp::model::{Idnp, LatentMode, UserRef};
use idnp::trainer::{fit, load_checkpoint, FitOutputs, Trainer};
use idnp::verify::{run_all, VerifyOptions};
use idnp::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "idnp", version, about = "Few-shot sequential recommendation with interest dynamics")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a TSV log, build sequences and the user split, and cache them.
    Ingest,
    /// Write a synthetic TSV log drawn from the genre model.
    Synth {
        /// Destination; defaults to `<output_dir>/synth.tsv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with per-epoch checkpoints and a learning-curve CSV.
    Train {
        /// Continue from the configured checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score held-out users and the popularity and random baselines.
    Eval {
        /// Which users to score.
        #[arg(long, default_value = "test", value_parser = ["test", "validation"])]
        split: String,
    },
    /// Top-k items for one window of item ids.
    Predict {
        /// Comma-separated item ids, oldest first.
        #[arg(long, value_delimiter = ',', required = true)]
        items: Vec<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Known user id; unseen users fall back to the configured embedding.
        #[arg(long)]
        user: Option<String>,
    },
    /// Gradient checks, oracles and invariants.
    Verify {
        /// Smaller case counts.
        #[arg(long)]
        quick: bool,
    },
}

struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config { .. } => EXIT_CONFIG,
            Error::Io { .. } | Error::Format { .. } | Error::Catalog(_) => EXIT_DATA,
            _ => EXIT_OTHER,
        };
        Self { code, error }
    }
}

type Outcome = Result<(), Failure>;

/// Anything that goes wrong while reading the corpus is a data error.
fn data_error(error: Error) -> Failure {
    match error {
        Error::Config { .. } => error.into(),
        error => Failure { code: EXIT_DATA, error },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let result = match cli.command {
        Command::Ingest => ingest(&cfg),
        Command::Synth { out } => synth(&cfg, out),
        Command::Train { resume } => train(&cfg, resume),
        Command::Eval { split } => eval(&cfg, &split),
        Command::Predict { items, k, user } => predict(&cfg, &items, k, user.as_deref()),
        Command::Verify { quick } => return verify(quick),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(g: &Global) -> idnp::Result<RunConfig> {
    let text = match &g.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config {
            key: "config".into(),
            detail: format!("{}: {e}", p.display()),
        })?,
        None => String::new(),
    };
    let mut text = text;
    for o in &g.overrides {
        if !o.contains('=') {
            return Err(Error::Config {
                key: o.clone(),
                detail: "override must be KEY=VALUE".into(),
            });
        }
        text.push('\n');
        text.push_str(o);
    }
    RunConfig::parse(&text)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn prepare_output(cfg: &RunConfig) -> idnp::Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io(dir))?;
    let echo = dir.join("config.txt");
    fs::write(&echo, cfg.echo()).map_err(io(&echo))
}

fn write_json(path: &Path, value: serde_json::Result<String>) -> idnp::Result<()> {
    let text = value.map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(path, text).map_err(io(path))
}

/// Builds the dataset from the configured TSV log, or reads a cached one.
fn load_dataset(cfg: &RunConfig) -> idnp::Result<Dataset> {
    let path = cfg.data.as_ref().ok_or_else(|| Error::Config {
        key: "data".into(),
        detail: "no data file configured".into(),
    })?;
    let data = if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Catalog(format!("{}: {e}", path.display())))?
    } else {
        let loaded = load_interactions(path, cfg.rating_max)?;
        if !loaded.malformed.is_empty() {
            eprintln!("skipped {} malformed lines: {:?}", loaded.malformed.len(), loaded.malformed);
        }
        let feedback = cfg.feedback.unwrap_or_else(|| loaded.feedback_kind());
        Dataset::build(&loaded.interactions, feedback, cfg.cap, cfg.train.split, cfg.train.seed)?
    };
    let data: Dataset = data;
    if data.feedback != cfg.train.feedback && cfg.feedback.is_some() {
        return Err(Error::Config {
            key: "feedback".into(),
            detail: format!("cached data is {:?}", data.feedback),
        });
    }
    Ok(data)
}

fn ingest(cfg: &RunConfig) -> Outcome {
    let data = load_dataset(cfg).map_err(data_error)?;
    prepare_output(cfg)?;
    write_json(&cfg.output_dir.join("dataset.json"), serde_json::to_string(&data))?;
    write_json(&cfg.output_dir.join("catalog.json"), serde_json::to_string(&data.catalog))?;
    println!(
        "users {}  items {}  train {}  validation {}  test {}  feedback {:?}",
        data.user_count(),
        data.item_count(),
        data.train.len(),
        data.validation.len(),
        data.test.len(),
        data.feedback
    );
    Ok(())
}

fn synth(cfg: &RunConfig, out: Option<PathBuf>) -> Outcome {
    prepare_output(cfg)?;
    let path = out.unwrap_or_else(|| cfg.output_dir.join("synth.tsv"));
    let data = synth_generate(&cfg.synth, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    write_interactions(&path, &data.interactions)?;
    println!("wrote {} interactions to {}", data.interactions.len(), path.display());
    Ok(())
}

fn train(cfg: &RunConfig, resume: bool) -> Outcome {
    let mut train_cfg = cfg.train.clone();
    let data = load_dataset(cfg).map_err(data_error)?;
    train_cfg.feedback = data.feedback;
    prepare_output(cfg)?;
    write_json(&cfg.output_dir.join("catalog.json"), serde_json::to_string(&data.catalog))?;
    let ck_path = cfg.checkpoint_path();
    let mut trainer = if resume {
        let ck = load_checkpoint(&ck_path)?;
        ck.check_config(&train_cfg)?;
        eprintln!("resuming from epoch {}", ck.epoch);
        Trainer::resume(ck)?
    } else {
        Trainer::new(&train_cfg, &data)?
    };
    let outputs = FitOutputs::in_dir(&cfg.output_dir, ck_path);
    fit(&mut trainer, &data, cfg.workers, Some(&outputs), |s| {
        eprintln!(
            "epoch {:>3}  nll {:.5}  wass {:.5}  total {:.5}  val ndcg@10 {:.4}",
            s.epoch, s.nll, s.wass, s.total, s.val_ndcg
        );
    })?;
    if let Some((epoch, _)) = &trainer.best {
        println!("best epoch {epoch}; checkpoint {}", outputs.best_checkpoint.display());
    }
    Ok(())
}

fn trained_model(cfg: &RunConfig) -> idnp::Result<Idnp> {
    let ck_path = cfg.checkpoint_path();
    let best = ck_path.with_extension("best.idnp");
    let path = if best.exists() { best } else { ck_path };
    load_checkpoint(&path)?.as_best().model()
}

fn labeled(name: &str, report: &EvalReport) -> String {
    let mut v: serde_json::Value = serde_json::from_str(&report.json_line()).expect("valid json");
    v["ranker"] = name.into();
    v.to_string()
}

fn eval(cfg: &RunConfig, split: &str) -> Outcome {
    let data = load_dataset(cfg).map_err(data_error)?;
    let model = trained_model(cfg)?;
    prepare_output(cfg)?;
    let mut ecfg = model.cfg.clone();
    ecfg.cutoffs = cfg.train.cutoffs.clone();
    ecfg.exclude_seen = cfg.train.exclude_seen;
    ecfg.eval_context_mode = cfg.train.eval_context_mode;
    ecfg.eval_nc = cfg.train.eval_nc;
    ecfg.basket = cfg.train.basket;
    ecfg.eval_sample_z = cfg.train.eval_sample_z;
    let users = if split == "validation" { &data.validation } else { &data.test };
    let (cases, skipped) = eval_cases(&data, users, &ecfg, false);
    let freq = data.item_frequency(&data.train);
    let rankers = [
        ("model", Ranker::Model(&model)),
        ("popularity", Ranker::Popularity(&freq)),
        (
            "random",
            Ranker::Random {
                seed: ecfg.seed,
                items: data.item_count(),
            },
        ),
    ];
    let mut lines = String::new();
    for (name, ranker) in rankers {
        let mut report = evaluate(ranker, &cases, &ecfg, cfg.workers)?;
        report.skipped = skipped;
        report.config = cfg.echo();
        println!("{name}\n{}", report.table());
        lines.push_str(&labeled(name, &report));
        lines.push('\n');
    }
    let path = cfg.output_dir.join("eval.jsonl");
    fs::write(&path, &lines).map_err(io(&path))?;
    print!("{lines}");
    Ok(())
}

fn resolve_items(catalog: Option<&Catalog>, ids: &[String], items: usize) -> idnp::Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            let idx = match catalog {
                Some(c) => c.item_index(id),
                None => id.parse::<usize>().ok().filter(|i| (1..=items).contains(i)),
            };
            idx.ok_or_else(|| Error::Catalog(format!("unknown item `{id}`")))
        })
        .collect()
}

fn predict(cfg: &RunConfig, ids: &[String], k: usize, user: Option<&str>) -> Outcome {
    let model = trained_model(cfg)?;
    let dir = cfg.checkpoint_path().parent().map(Path::to_path_buf).unwrap_or_default();
    let catalog: Option<Catalog> = match fs::read_to_string(dir.join("catalog.json")) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| Error::Catalog(e.to_string()))?),
        Err(_) => None,
    };
    let items = resolve_items(catalog.as_ref(), ids, model.items)?;
    let l = model.cfg.window;
    let seq = idnp::corpus::UserSequence {
        user: 0,
        items: items.clone(),
        ratings: None,
        feedback: model.cfg.feedback,
    };
    let windows: Vec<Vec<usize>> = window(&seq, l, 1)?.into_iter().map(|w| w.items).collect();
    let query = windows.last().expect("at least one window").clone();
    let context: Vec<&[usize]> = windows.iter().map(Vec::as_slice).collect();
    let user_ref = match (user, &catalog) {
        (Some(u), Some(c)) => match c.user_index(u) {
            Some(i) if model.trained_users.contains(&i) => UserRef::Trained(i),
            _ => UserRef::Unseen,
        },
        _ => UserRef::Unseen,
    };
    let p = model.predict(user_ref, &context, &query, LatentMode::ContextMean)?;
    let exclude: Vec<usize> = if model.cfg.exclude_seen || cfg.train.exclude_seen {
        items.iter().copied().filter(|i| *i != PAD).collect()
    } else {
        Vec::new()
    };
    let top = top_k(&p.y, k, &exclude);
    if let Some(w) = &top.warning {
        eprintln!("warning: {w}");
    }
    for i in top.items {
        let id = catalog
            .as_ref()
            .and_then(|c| c.item_id(i).map(str::to_string))
            .unwrap_or_else(|| i.to_string());
        println!("{id}\t{:.6}", p.y[i - 1]);
    }
    Ok(())
}

fn verify(quick: bool) -> ExitCode {
    let opts = if quick {
        VerifyOptions {
            seeds: 3,
            conv_cases: 200,
            metric_cases: 2000,
            sinkhorn_pairs: 3,
            sinkhorn_samples: 2000,
        }
    } else {
        VerifyOptions::default()
    };
    let results = run_all(&opts);
    for r in &results {
        println!("{}", r.line());
    }
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY)
    }
}
