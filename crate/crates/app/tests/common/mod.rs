#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use esr_core::corpus::{load_corpus, save_corpus, synth_corpus, MelExtractor, SyntheticCorpusSpec};
use esr_core::index::build_index;
use esr_core::model::{Checkpoint, ModelBundle, ModelConfig};
use esr_core::prompts::{PromptBank, Vocabulary};
use esr_core::StyleRegistry;

/// An untrained checkpoint plus an index over a small synthetic corpus,
/// all on disk under a temporary directory.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub ckpt: PathBuf,
    pub index: PathBuf,
    pub manifest: PathBuf,
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let registry = StyleRegistry::default();
    let spec = SyntheticCorpusSpec {
        utterances_per_style: 2,
        duration_range_s: (0.5, 1.0),
        seed: 11,
        ..SyntheticCorpusSpec::default()
    };
    let manifest = save_corpus(
        &dir.path().join("corpus"),
        &synth_corpus(&spec).unwrap(),
        &registry,
    )
    .unwrap();
    let loaded = load_corpus(&manifest, &registry).unwrap();
    let sources: BTreeMap<_, _> = loaded
        .utterances
        .iter()
        .zip(&loaded.paths)
        .map(|(u, p)| (u.id.clone(), p.clone()))
        .collect();
    let config = ModelConfig {
        seed: 5,
        ..ModelConfig::default()
    };
    let model = ModelBundle::new(
        config,
        registry,
        Vocabulary::from_bank(&PromptBank::default_bank()),
    )
    .unwrap();
    let (index, _) = build_index(
        &model,
        &loaded.utterances,
        &sources,
        &MelExtractor::default(),
        8.0,
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let index_path = dir.path().join("idx.esrx");
    Checkpoint::untrained(model).save(&ckpt).unwrap();
    index.save(&index_path).unwrap();
    Fixture {
        dir,
        ckpt,
        index: index_path,
        manifest,
    }
}
