//! Seeded end-to-end run: synthesize, split, train, index the test split and
//! evaluate. Optional `key=value` args: sep, per, epochs, seed, maxdur,
//! ablation, train (split fraction).

use std::collections::BTreeMap;
use std::time::Instant;

use esr_core::corpus::{split_corpus, synth_corpus, MelExtractor, SyntheticCorpusSpec};
use esr_core::evalsuite::{entries_from_corpus, evaluate, EvalConfig};
use esr_core::index::build_index;
use esr_core::prompts::PromptBank;
use esr_core::trainer::{train, EpochLog, TrainerConfig};
use esr_core::StyleRegistry;

fn main() -> esr_core::Result<()> {
    let args: Vec<(String, String)> = std::env::args()
        .skip(1)
        .map(|a| {
            let (k, v) = a.split_once('=').expect("key=value argument");
            (k.to_string(), v.to_string())
        })
        .collect();
    let get = |k: &str| {
        args.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
    };
    let arg = |k: &str, d: f64| get(k).map_or(d, |s| s.parse().expect("numeric argument"));
    let start = Instant::now();
    let spec = SyntheticCorpusSpec {
        separability: arg("sep", 0.9),
        utterances_per_style: arg("per", 60.0) as usize,
        duration_range_s: (0.5, arg("maxdur", 12.0)),
        ..SyntheticCorpusSpec::default()
    };
    let registry = StyleRegistry::default();
    let corpus = synth_corpus(&spec)?;
    let ft = arg("train", 0.8);
    let (tr, va, te) = split_corpus(
        &corpus,
        (ft, (1.0 - ft) / 2.0, (1.0 - ft) / 2.0),
        spec.seed,
        &registry,
    )?;
    eprintln!(
        "corpus {} utterances in {:.1?}",
        corpus.len(),
        start.elapsed()
    );
    let config = TrainerConfig {
        total_epochs: arg("epochs", 30.0) as usize,
        seed: arg("seed", 7.0) as u64,
        ..TrainerConfig::default()
    };
    let config = match get("ablation") {
        Some(a) => a.parse::<esr_core::trainer::Ablation>()?.apply(&config),
        None => config,
    };
    let bank = PromptBank::default_bank();
    println!("{}", EpochLog::TSV_HEADER);
    let out = train(&config, &tr, &va, &bank, &registry, |log| {
        println!(
            "{}\t# {:?} {:.1?}",
            log.tsv_line(),
            log.val,
            start.elapsed()
        );
    })?;
    let extractor = MelExtractor::default();
    let (index, _) = build_index(
        &out.best.model,
        &te,
        &BTreeMap::new(),
        &extractor,
        config.max_segment_s,
    )?;
    let report = evaluate(
        &out.best.model,
        &index,
        &bank,
        &entries_from_corpus(&te)?,
        &EvalConfig::default(),
    )?;
    print!("{}", report.to_table());
    eprintln!("total {:.1?}", start.elapsed());
    Ok(())
}
