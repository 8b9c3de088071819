//! `tsdiff`: data generation, training, evaluation, indexing, search and serving.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tsdiff_core::config::Profile;
use tsdiff_core::loss::LossMode;
use tsdiff_core::nn::{MergeMethod, SignalArch};
use tsdiff_core::perturb::Split;
use tsdiff_core::pipeline;
use tsdiff_core::retrieval::{build_index, search, EvalReport, Index};
use tsdiff_core::storage::{self, fingerprint};
use tsdiff_core::train::EpochMetrics;
use tsdiff_core::{par, ErrorClass};
use tsdiff_service::{AppState, Loaded};

#[derive(Parser, Debug)]
#[command(
    name = "tsdiff",
    version,
    about = "Retrieve time-series pairs by describing their difference"
)]
struct Cli {
    /// Master seed; overrides the profile.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Profile TOML; defaults apply to anything it leaves out. Without it the
    /// bundled desk profile is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate reference/target pairs for train, val and test.
    GenData(GenData),
    /// Generate the query pool and its train/test split.
    GenQueries(GenQueries),
    /// Train the dual encoder and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Per-relationship mAP of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Embed a split into a searchable index.
    Index(IndexArgs),
    /// Rank indexed pairs against one query.
    Search(SearchArgs),
    /// HTTP search service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct GenData {
    /// `synthetic` or a CSV file of base series.
    #[arg(long)]
    bases: Option<String>,
    #[arg(long)]
    n_bases: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenQueries {
    #[arg(long)]
    per_label: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = ["supervised", "selfsup"])]
    loss: Option<String>,
    #[arg(long, value_parser = ["conv", "transformer"])]
    signal_arch: Option<String>,
    #[arg(long, value_parser = ["diff", "concat"])]
    merge: Option<String>,
    #[arg(long)]
    cross_attention: Option<bool>,
    #[arg(long)]
    freeze_text: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: PathBuf,
    /// Row label in the report; defaults to the checkpoint's architecture.
    #[arg(long)]
    method: Option<String>,
    /// Add a row to an existing report instead of replacing it.
    #[arg(long)]
    append: bool,
    /// Optional index whose fingerprint must match the checkpoint.
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Dataset directory holding the indexed pairs.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

const DESK_PROFILE: &str = include_str!("../../../configs/desk.toml");

fn profile(cli: &Cli) -> Result<Profile> {
    Ok(match &cli.config {
        Some(p) => Profile::load(p)?,
        None => Profile::from_toml(DESK_PROFILE)?,
    })
}

fn split_of(name: &str) -> Split {
    match name {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

fn gen_data(cli: &Cli, a: &GenData) -> Result<()> {
    let mut p = profile(cli)?;
    let d = &mut p.data;
    if let Some(b) = &a.bases {
        d.bases = b.clone();
    }
    d.n_bases = a.n_bases.unwrap_or(d.n_bases);
    d.train = a.train.unwrap_or(d.train);
    d.val = a.val.unwrap_or(d.val);
    d.test = a.test.unwrap_or(d.test);
    d.length = a.length.unwrap_or(d.length);
    let p = p.resolve(cli.seed)?;
    let (header, splits) = pipeline::generate_data(&p)?;
    storage::write_dataset(&a.out, &header, &splits)?;
    p.write_resolved(&a.out)?;
    println!(
        "wrote {} train / {} val / {} test pairs of length {} to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        header.length,
        a.out.display()
    );
    Ok(())
}

fn gen_queries(cli: &Cli, a: &GenQueries) -> Result<()> {
    let mut p = profile(cli)?;
    p.queries.per_label = a.per_label.unwrap_or(p.queries.per_label);
    let p = p.resolve(cli.seed)?;
    let q = pipeline::generate_queries(p.queries.per_label, p.seed)?;
    pipeline::write_query_sets(&a.out, &q)?;
    p.write_resolved(&a.out)?;
    println!(
        "wrote {} queries ({} train / {} test) to {}",
        q.all.len(),
        q.train.len(),
        q.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut p = profile(cli)?;
    let header = storage::read_dataset_header(&a.dataset)?;
    p.data.length = header.length;
    p.data.bases = header.bases.clone();
    p.data.train = header.counts.train;
    p.data.val = header.counts.val;
    p.data.test = header.counts.test;
    p.train.epochs = a.epochs.unwrap_or(p.train.epochs);
    if let Some(l) = &a.loss {
        p.train.loss_mode = if l == "selfsup" {
            LossMode::Selfsup
        } else {
            LossMode::Supervised
        };
    }
    if let Some(s) = &a.signal_arch {
        p.encoder.signal_arch = if s == "conv" {
            SignalArch::Conv
        } else {
            SignalArch::Transformer
        };
    }
    if let Some(m) = &a.merge {
        p.encoder.merge_method = if m == "concat" {
            MergeMethod::Concat
        } else {
            MergeMethod::Diff
        };
    }
    p.encoder.use_cross_attention = a.cross_attention.unwrap_or(p.encoder.use_cross_attention);
    p.train.freeze_text_encoder |= a.freeze_text;
    let p = p.resolve(cli.seed)?;

    let train_pairs = storage::read_split(&a.dataset, Split::Train)?;
    let val_pairs = storage::read_split(&a.dataset, Split::Val)?;
    let splits = tsdiff_core::perturb::DatasetSplits {
        train: train_pairs,
        val: val_pairs,
        test: Vec::new(),
    };
    let q = pipeline::read_query_sets(&a.queries)?;
    let (tr, va) = pipeline::bind_splits(&splits, &q, p.seed)?;
    pipeline::write_bindings(&a.out, &tr, &va)?;
    p.write_resolved(&a.out)?;

    let metrics_path = a.out.join("metrics.jsonl");
    let mut lines = String::new();
    let mut write_err = None;
    let (model, report) = pipeline::train_model(&p, &tr, &va, &q.train, |m: &EpochMetrics| {
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4}  {:.1}s{}",
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.wall_secs,
            if m.improved { "  *" } else { "" }
        );
        lines.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        lines.push('\n');
        if let Err(e) = storage::atomic_write(&metrics_path, lines.as_bytes()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let ckpt = a.out.join("checkpoint.bin");
    storage::write_checkpoint(&ckpt, &model, &pipeline::checkpoint_meta(&p, &report))?;
    println!(
        "best epoch {} val loss {:.4}; checkpoint {} fingerprint {}",
        report.best_epoch,
        report.best_val_loss,
        ckpt.display(),
        fingerprint(&model)
    );
    Ok(())
}

fn method_name(c: &tsdiff_core::nn::EncoderConfig) -> String {
    format!(
        "{}-{}-{}",
        if c.signal_arch == SignalArch::Conv {
            "conv"
        } else {
            "transformer"
        },
        if c.merge_method == MergeMethod::Concat {
            "concat"
        } else {
            "diff"
        },
        if c.use_cross_attention {
            "xattn"
        } else {
            "noxattn"
        }
    )
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (model, _) = storage::read_checkpoint(&a.checkpoint)?;
    let fp = fingerprint(&model);
    if let Some(ix) = &a.index {
        let index = Index::read(ix)?;
        if index.fingerprint != fp {
            return Err(tsdiff_core::Error::Data(format!(
                "index fingerprint {} does not match checkpoint {fp}",
                index.fingerprint
            ))
            .into());
        }
    }
    let pairs = storage::read_split(&a.dataset, Split::Test)?;
    let q = pipeline::read_query_sets(&a.queries)?;
    let scores = pipeline::evaluate(&model, &q.test, &pairs)?;
    let mut report = if a.append && a.report.exists() {
        storage::read_json::<EvalReport>(&a.report)?
    } else {
        EvalReport::default()
    };
    let method = a
        .method
        .clone()
        .unwrap_or_else(|| method_name(model.config()));
    report.push(method, fp, &scores);
    storage::write_json(&a.report, &report)?;
    print!("{}", report.render());
    Ok(())
}

fn load_model_checked(
    ckpt: &Path,
    index: &Path,
) -> Result<(tsdiff_core::nn::DualEncoder<f32>, Index)> {
    let (model, _) = storage::read_checkpoint(ckpt)?;
    let index = Index::read(index)?;
    let fp = fingerprint(&model);
    if index.fingerprint != fp {
        return Err(tsdiff_core::Error::Data(format!(
            "index fingerprint {} does not match checkpoint {fp}",
            index.fingerprint
        ))
        .into());
    }
    Ok((model, index))
}

fn index(a: &IndexArgs) -> Result<()> {
    let (model, _) = storage::read_checkpoint(&a.checkpoint)?;
    let pairs = storage::read_split(&a.dataset, split_of(&a.split))?;
    let index = build_index(&model, &pairs)?;
    index.write(&a.out)?;
    println!(
        "indexed {} pairs, fingerprint {}",
        index.len(),
        index.fingerprint
    );
    Ok(())
}

fn search_cmd(a: &SearchArgs) -> Result<()> {
    let (model, index) = load_model_checked(&a.checkpoint, &a.index)?;
    let q = model.embed_texts(&[a.query.as_str()])?;
    let ranked = search(&index, &q[0], a.k)?;
    for (rank, h) in ranked.hits.iter().enumerate() {
        println!(
            "{}",
            serde_json::json!({ "rank": rank + 1, "pair_id": h.pair_id, "label": h.label, "score": h.score })
        );
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().map_err(|e| {
        tsdiff_core::Error::InvalidInput(format!("bad address {}:{}: {e}", a.host, a.port))
    })?;
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| tsdiff_core::Error::InvalidInput(format!("cannot bind {addr}: {e}")))?;
        let state = AppState::new();
        let loader = {
            let state = state.clone();
            let (ckpt, ix, ds, split) = (
                a.checkpoint.clone(),
                a.index.clone(),
                a.dataset.clone(),
                split_of(&a.split),
            );
            tokio::task::spawn_blocking(move || -> Result<()> {
                let (model, index) = load_model_checked(&ckpt, &ix)?;
                let pairs = storage::read_split(&ds, split)?;
                state.set_ready(Loaded::new(model, index, pairs)?);
                Ok(())
            })
        };
        eprintln!("listening on http://{addr}");
        let server = tokio::spawn(tsdiff_service::serve(state, listener));
        loader.await.context("loader task")??;
        eprintln!("ready");
        server.await.context("server task")?.context("server")?;
        Ok(())
    })
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Command::GenData(a) => gen_data(cli, a),
        Command::GenQueries(a) => gen_queries(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(a),
        Command::Index(a) => index(a),
        Command::Search(a) => search_cmd(a),
        Command::Serve(a) => serve(a),
    }
}

fn classify(e: &anyhow::Error) -> (ErrorClass, &'static str) {
    let class = e
        .chain()
        .find_map(|c| c.downcast_ref::<tsdiff_core::Error>())
        .map(|c| c.class())
        .unwrap_or(ErrorClass::Data);
    let tag = match class {
        ErrorClass::Usage => "usage",
        ErrorClass::Data => "data",
        ErrorClass::Numeric => "numeric",
    };
    (class, tag)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("bad arguments");
            eprintln!(
                "error[usage]: {}",
                one_line(first.trim_start_matches("error:"))
            );
            return ExitCode::from(2);
        }
    };
    if let Ok(v) = std::env::var("TSDIFF_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                par::init_threads(n);
                if n == 1 {
                    par::set_sequential(true);
                }
            }
            _ => {
                eprintln!("error[usage]: TSDIFF_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (class, tag) = classify(&e);
            eprintln!("error[{tag}]: {}", one_line(&format!("{e:#}")));
            ExitCode::from(match class {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
