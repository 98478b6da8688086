//! `esr` command-line interface.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use esr_core::corpus::{
    load_corpus, load_wav, read_manifest, save_corpus, split_corpus, synth_corpus, Manifest,
    MelExtractor, SyntheticCorpusSpec, Utterance,
};
use esr_core::encoders::Pooling;
use esr_core::evalsuite::{
    dump_embeddings, entries_from_index, evaluate, evaluate_classifier_baseline, EvalConfig,
};
use esr_core::gradsuite;
use esr_core::index::{build_index, EmbeddingIndex};
use esr_core::model::Checkpoint;
use esr_core::prompts::PromptBank;
use esr_core::trainer::{train, Ablation, EpochLog, TrainerConfig};
use esr_core::StyleRegistry;

use crate::query::{run_query, QueryRequest};
use crate::server::{self, AppState, SnapshotPaths};

#[derive(Debug, Parser)]
#[command(
    name = "esr",
    version,
    about = "Expressive speech retrieval from free-form style descriptions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Write a seeded synthetic corpus with train/val/test manifests.
    Synth(SynthArgs),
    /// Train encoders; prints one TSV line per epoch.
    Train(TrainArgs),
    /// Encode a corpus into a retrieval index.
    Embed(EmbedArgs),
    /// Rank index rows against a text description.
    Query(QueryArgs),
    /// Recall@k evaluation over an index; prints a JSON report.
    Eval(EvalArgs),
    /// Serve the HTTP API (and optionally a static UI bundle).
    Serve(ServeArgs),
    /// Finite-difference check of every op and loss graph.
    Gradcheck(GradcheckArgs),
    /// Export index (and optionally prompt) embeddings as TSV.
    DumpEmbeddings(DumpArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub per_style: usize,
    #[arg(long, default_value_t = 0.9)]
    pub separability: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub min_duration: f64,
    #[arg(long, default_value_t = 12.0)]
    pub max_duration: f64,
    /// Train/val/test fractions, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub split: Vec<f64>,
}

/// One flag per trainer configuration key; given flags override `--config`.
#[derive(Debug, Default, Args)]
pub struct TrainerFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub total_epochs: Option<usize>,
    #[arg(long)]
    pub lr_main: Option<f64>,
    #[arg(long)]
    pub lr_disc: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_contrast: Option<f64>,
    #[arg(long)]
    pub lambda_adv: Option<f64>,
    #[arg(long)]
    pub lambda_cls: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub speech_hidden: Option<usize>,
    #[arg(long)]
    pub text_hidden: Option<usize>,
    #[arg(long)]
    pub disc_hidden: Option<usize>,
    #[arg(long)]
    pub cls_hidden: Option<usize>,
    #[arg(long)]
    pub pooling: Option<Pooling>,
    #[arg(long)]
    pub tau_init: Option<f64>,
    #[arg(long)]
    pub max_segment_s: Option<f64>,
    #[arg(long)]
    pub n_mels: Option<usize>,
    #[arg(long)]
    pub fixed_prompt: Option<bool>,
    #[arg(long)]
    pub text_projection_only: Option<bool>,
}

impl TrainerFlags {
    pub fn apply(&self, cfg: &mut TrainerConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { cfg.$f = v; })*};
        }
        set!(
            batch_size,
            stage1_epochs,
            stage2_epochs,
            total_epochs,
            lr_main,
            lr_disc,
            beta1,
            beta2,
            eps,
            weight_decay,
            seed,
            lambda_contrast,
            lambda_adv,
            lambda_cls,
            dim,
            speech_hidden,
            text_hidden,
            disc_hidden,
            cls_hidden,
            pooling,
            tau_init,
            max_segment_s,
            n_mels,
            fixed_prompt,
            text_projection_only
        );
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation manifest.
    #[arg(long)]
    pub val: PathBuf,
    /// Where the best checkpoint is written.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML trainer configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prompt bank JSON; the built-in bank by default.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Applied after the config and flags; repeatable.
    #[arg(long)]
    pub ablation: Vec<Ablation>,
    #[command(flatten)]
    pub flags: TrainerFlags,
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
pub struct EmbedSource {
    /// Corpus manifest (ids, styles, durations).
    #[arg(long, group = "source")]
    pub corpus: Option<PathBuf>,
    /// Directory of WAV files; ids are file stems, styles unknown.
    #[arg(long, group = "source")]
    pub wav_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub source: EmbedSource,
    #[arg(long)]
    pub out: PathBuf,
    /// Leading crop length; defaults to the value the checkpoint was trained with.
    #[arg(long)]
    pub max_segment_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// 1000 trials with 400 distractors unless overridden.
    #[arg(long)]
    pub full_scale: bool,
    /// Rank by classifier logits instead of text queries.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, env = "ESR_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Static files served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// With a checkpoint, every prompt of every style is appended as a text row.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

/// Runs one command, writing machine-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Embed(a) => embed(a, out),
        Command::Query(a) => query(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Serve(a) => serve(a),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::DumpEmbeddings(a) => dump(a, out),
    }
}

fn load_bank(path: Option<&Path>) -> Result<PromptBank> {
    Ok(match path {
        Some(p) => PromptBank::load(p)?,
        None => PromptBank::default_bank(),
    })
}

fn subset_manifest(full: &Manifest, part: &[Utterance]) -> Manifest {
    part.iter()
        .map(|u| (u.id.clone(), full[&u.id].clone()))
        .collect()
}

fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(m)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticCorpusSpec {
        utterances_per_style: a.per_style,
        duration_range_s: (a.min_duration, a.max_duration),
        separability: a.separability,
        seed: a.seed,
        ..SyntheticCorpusSpec::default()
    };
    let &[ft, fv, fs] = a.split.as_slice() else {
        bail!(
            "--split takes exactly three fractions, got {}",
            a.split.len()
        );
    };
    let fractions = (ft, fv, fs);
    let corpus = synth_corpus(&spec)?;
    let (tr, va, te) = split_corpus(&corpus, fractions, spec.seed, &spec.styles)?;
    let manifest_path = save_corpus(&a.out, &corpus, &spec.styles)?;
    let full = read_manifest(&manifest_path)?;
    let mut written = BTreeMap::new();
    written.insert("manifest", manifest_path);
    for (name, part) in [("train", &tr), ("val", &va), ("test", &te)] {
        let p = a.out.join(format!("{name}.json"));
        write_manifest(&p, &subset_manifest(&full, part))?;
        written.insert(name, p);
    }
    log::info!("wrote {} utterances to {}", corpus.len(), a.out.display());
    writeln!(out, "{}", serde_json::to_string_pretty(&written)?)?;
    Ok(())
}

fn trainer_config(a: &TrainArgs) -> Result<TrainerConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainerConfig::load(p)?,
        None => TrainerConfig::default(),
    };
    a.flags.apply(&mut cfg);
    for ab in &a.ablation {
        cfg = ab.apply(&cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = trainer_config(&a)?;
    let bank = load_bank(a.bank.as_deref())?;
    let registry = StyleRegistry::default();
    let tr = load_corpus(&a.train, &registry)?.utterances;
    let va = load_corpus(&a.val, &registry)?.utterances;
    writeln!(out, "{}", EpochLog::TSV_HEADER)?;
    let mut io_err = None;
    let outcome = train(&cfg, &tr, &va, &bank, &registry, |log| {
        if let Err(e) = writeln!(out, "{}", log.tsv_line()).and_then(|_| out.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    outcome.best.save(&a.out)?;
    log::info!(
        "best checkpoint (epoch {}, val loss {:?}) written to {}",
        outcome.best.epoch,
        outcome.best.val_loss,
        a.out.display()
    );
    Ok(())
}

fn wav_dir_corpus(dir: &Path) -> Result<(Vec<Utterance>, BTreeMap<String, PathBuf>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let mut corpus = Vec::new();
    let mut sources = BTreeMap::new();
    for p in paths {
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .context("non-UTF-8 file name")?
            .to_string();
        match load_wav(&p) {
            Ok(mut u) => {
                u.id = id.clone();
                corpus.push(u);
                sources.insert(id, p);
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    Ok((corpus, sources))
}

fn embed(a: EmbedArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let max_s = match a.max_segment_s {
        Some(s) => s,
        None => match &ckpt.trainer {
            Some(v) => serde_json::from_value::<TrainerConfig>(v.clone())?.max_segment_s,
            None => TrainerConfig::default().max_segment_s,
        },
    };
    let (corpus, sources) = match (&a.source.corpus, &a.source.wav_dir) {
        (Some(manifest), _) => {
            let loaded = load_corpus(manifest, &ckpt.model.registry)?;
            let sources = loaded
                .utterances
                .iter()
                .zip(loaded.paths)
                .map(|(u, p)| (u.id.clone(), std::path::absolute(&p).unwrap_or(p)))
                .collect();
            (loaded.utterances, sources)
        }
        (None, Some(dir)) => wav_dir_corpus(dir)?,
        (None, None) => bail!("one of --corpus or --wav-dir is required"),
    };
    let extractor = MelExtractor::new(
        ckpt.model.config.n_mels,
        esr_core::corpus::DEFAULT_WINDOW_S,
        esr_core::corpus::DEFAULT_HOP_S,
    )?;
    let (index, report) = build_index(&ckpt.model, &corpus, &sources, &extractor, max_s)?;
    index.save(&a.out)?;
    let summary = serde_json::json!({
        "index": a.out,
        "rows": index.len(),
        "skipped": report.skipped.iter().map(|(id, _)| id).collect::<Vec<_>>(),
    });
    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn query(a: QueryArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let index = EmbeddingIndex::load(&a.index)?;
    let snap = server::Snapshot::new(ckpt.model, index)?;
    let req = QueryRequest {
        text: a.text,
        k: a.k,
        threshold: a.threshold,
    };
    let resp = run_query(&snap.model, &snap.index, &req)?;
    for hit in &resp.results {
        // `{}` on f64 prints the shortest string that parses back to the same value
        writeln!(out, "{}\t{}", hit.id, hit.score)?;
    }
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let index = EmbeddingIndex::load(&a.index)?;
    let base = if a.full_scale {
        EvalConfig::full_scale(EvalConfig::default().seed)
    } else {
        EvalConfig::default()
    };
    let cfg = EvalConfig {
        n_trials: a.trials.unwrap_or(base.n_trials),
        n_distractors: a.distractors.unwrap_or(base.n_distractors),
        seed: a.seed.unwrap_or(base.seed),
    };
    let entries = entries_from_index(&index, &ckpt.model.registry)?;
    let report = if a.baseline {
        evaluate_classifier_baseline(&ckpt.model, &index, &entries, &cfg)?
    } else {
        let bank = load_bank(a.bank.as_deref())?;
        evaluate(&ckpt.model, &index, &bank, &entries, &cfg)?
    };
    eprint!("{}", report.to_table());
    writeln!(out, "{}", report.to_json())?;
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let state = AppState::from_paths(SnapshotPaths {
        index: a.index,
        checkpoint: a.ckpt,
    })?;
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(server::serve(state, addr, a.static_dir))?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let results = gradsuite::full_suite(a.seed)?;
    for r in &results {
        writeln!(
            out,
            "{}\t{:.3e}\t{}",
            r.name,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        )?;
    }
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    if !failed.is_empty() {
        bail!(
            "{} check(s) exceed relative error {:e}: {}",
            failed.len(),
            gradsuite::GRADCHECK_TOL,
            failed.join(", ")
        );
    }
    Ok(())
}

fn dump(a: DumpArgs, out: &mut dyn Write) -> Result<()> {
    let index = EmbeddingIndex::load(&a.index)?;
    let rows = match &a.ckpt {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let bank = load_bank(a.bank.as_deref())?;
            dump_embeddings(&index, &a.out, Some((&ckpt.model, &bank)))?
        }
        None => dump_embeddings(&index, &a.out, None)?,
    };
    writeln!(out, "{rows}")?;
    Ok(())
}
