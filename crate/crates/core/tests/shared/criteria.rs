//! Acceptance-level checks with independent oracles. Each returns a short
//! summary on success and the first violation otherwise. Shared by this
//! crate's tests and the workspace acceptance target.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use esr_core::autodiff::{Graph, Tensor};
use esr_core::corpus::{synth_corpus, FeatureSequence, SyntheticCorpusSpec};
use esr_core::encoders::Embedding;
use esr_core::evalsuite::{
    entries_from_index, make_trials, recall_report, PromptScorer, TrialResult, RECALL_KS,
};
use esr_core::gradsuite::tiny_model;
use esr_core::index::EmbeddingIndex;
use esr_core::model::{Checkpoint, ModelBundle, ModelConfig};
use esr_core::nn::{Bound, ParamGroup, ParamStore};
use esr_core::objectives::{
    adversarial_path, classification_loss, contrastive_loss, discriminator_loss, Discriminator,
    StyleClassifier,
};
use esr_core::prompts::{PromptBank, Vocabulary};
use esr_core::trainer::{Trainer, TrainerConfig};
use esr_core::{Error, StyleId, StyleRegistry};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// Direct evaluation of the symmetric contrastive objective with two
/// explicit loops over the batch.
fn naive_contrastive(s: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let n = s.len();
    let sim = |i: usize, j: usize| {
        let dot: f64 = s[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum();
        let ns = s[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nt = t[j].iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (ns * nt) / tau
    };
    let mut s2t = 0.0;
    let mut t2s = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        let mut col = 0.0;
        for j in 0..n {
            row += sim(i, j).exp();
            col += sim(j, i).exp();
        }
        s2t -= (sim(i, i).exp() / row).ln();
        t2s -= (sim(i, i).exp() / col).ln();
    }
    0.5 * (s2t / n as f64 + t2s / n as f64)
}

fn graph_contrastive(s: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> Result<f64, String> {
    let mut g = Graph::new();
    let es = g.constant(tensor(s));
    let et = g.constant(tensor(t));
    let scale = g.constant(Tensor::scalar(1.0 / tau));
    let l = ok(contrastive_loss(&mut g, es, et, scale))?;
    ok(g.value(l).item())
}

pub fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(2..=6);
        let tau = rng.random_range(0.05..1.0);
        let s = unit_rows(&mut rng, n, d);
        let t = unit_rows(&mut rng, n, d);
        let got = graph_contrastive(&s, &t, tau)?;
        let want = naive_contrastive(&s, &t, tau);
        worst = worst.max((got - want).abs());
        ensure!(
            (got - want).abs() <= 1e-9,
            "contrastive N={n} d={d} tau={tau}: {got} vs oracle {want}"
        );

        // relabelling pairs and swapping modalities leave the loss unchanged
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        let ps: Vec<_> = perm.iter().map(|&i| s[i].clone()).collect();
        let pt: Vec<_> = perm.iter().map(|&i| t[i].clone()).collect();
        ensure!(
            (graph_contrastive(&ps, &pt, tau)? - got).abs() <= 1e-12,
            "not permutation invariant"
        );
        ensure!(
            (graph_contrastive(&t, &s, tau)? - got).abs() <= 1e-12,
            "not symmetric in modalities"
        );
    }

    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let hand = graph_contrastive(&eye, &eye, 1.0)?;
    let hand_want = (1.0 + (-1.0f64).exp()).ln();
    ensure!(
        (hand - hand_want).abs() <= 1e-9,
        "hand case {hand} vs {hand_want}"
    );

    // zeroed output layers: D ≡ 0.5 and uniform class logits
    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(1);
    let disc = Discriminator::new(&mut store, 8, 16, &mut prng);
    let cls = StyleClassifier::new(&mut store, 8, 16, 22, &mut prng);
    for id in [disc.out.weight, disc.out.bias, cls.out.weight, cls.out.bias] {
        *store.get_mut(id) = Tensor::zeros(store.get(id).rows(), store.get(id).cols());
    }
    let mut g = Graph::new();
    let b = Bound::frozen(&mut g, &store);
    let es = g.constant(tensor(&unit_rows(&mut rng, 3, 8)));
    let et = g.constant(tensor(&unit_rows(&mut rng, 3, 8)));
    let ld = ok(discriminator_loss(&mut g, &b, &disc, es, et))?;
    let ld = ok(g.value(ld).item())?;
    ensure!((ld - 2.0 * 2f64.ln()).abs() <= 1e-9, "D≡0.5 gives {ld}");
    let labels = [StyleId(0), StyleId(7), StyleId(21)];
    let lc = ok(classification_loss(&mut g, &b, &cls, es, &labels))?;
    let lc = ok(g.value(lc).item())?;
    ensure!(
        (lc - 22f64.ln()).abs() <= 1e-9,
        "uniform 22-class CE gives {lc}"
    );

    Ok(format!(
        "100 batches max |Δ| {worst:.1e}; hand {hand:.6}; D≡0.5 {ld:.6}; uniform CE {lc:.6}"
    ))
}

fn tiny_batch(model: &ModelBundle, rng: &mut ChaCha8Rng) -> (Vec<FeatureSequence>, Vec<String>) {
    let n_mels = model.config.n_mels;
    let feats = (0..4)
        .map(|i| {
            let v = (0..(3 + i) * n_mels)
                .map(|_| rng.random_range(-2.0f32..2.0))
                .collect();
            FeatureSequence::new(v, n_mels, 0.01).unwrap()
        })
        .collect();
    let texts = ["speech that is angry", "calm", "sad sad speech", "that is"]
        .map(String::from)
        .to_vec();
    (feats, texts)
}

/// Gradients of every parameter, in store order.
fn param_grads(
    model: &ModelBundle,
    feats: &[FeatureSequence],
    texts: &[String],
    reversed: bool,
) -> Result<Vec<Vec<f64>>, String> {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, &model.store, |grp| grp != ParamGroup::FeatureNorm);
    let refs: Vec<&FeatureSequence> = feats.iter().collect();
    let tokens: Vec<_> = texts.iter().map(|t| model.vocab.tokenize(t)).collect();
    let es = ok(model.speech.forward_batch(&mut g, &b, &refs))?;
    let et = ok(model.text.forward_batch(&mut g, &b, &tokens))?;
    let disc = model
        .discriminator
        .as_ref()
        .ok_or("model has no discriminator")?;
    let loss = if reversed {
        ok(adversarial_path(&mut g, &b, disc, es, et))?
    } else {
        ok(discriminator_loss(&mut g, &b, disc, es, et))?
    };
    ok(g.backward(loss))?;
    Ok(model
        .store
        .iter()
        .map(|(id, _)| b.grad(&g, &model.store, id))
        .collect())
}

pub fn grl_contract() -> Outcome {
    let start = Instant::now();
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let model = ok(tiny_model(seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let (feats, texts) = tiny_batch(&model, &mut rng);
        let with = param_grads(&model, &feats, &texts, true)?;
        let without = param_grads(&model, &feats, &texts, false)?;
        let mut nonzero_encoder = false;
        for ((_, p), (gw, go)) in model.store.iter().zip(with.iter().zip(&without)) {
            let sign = match p.group {
                ParamGroup::Discriminator => 1.0,
                ParamGroup::SpeechEncoder
                | ParamGroup::TextEmbedding
                | ParamGroup::TextProjection => -1.0,
                _ => continue,
            };
            for (a, b) in gw.iter().zip(go) {
                let d = (a - sign * b).abs();
                worst = worst.max(d);
                ensure!(d <= 1e-9, "{}: {a} vs {}·{b}", p.name, sign);
                nonzero_encoder |= sign < 0.0 && b.abs() > 1e-8;
                checked += 1;
            }
        }
        ensure!(
            nonzero_encoder,
            "seed {seed}: encoder gradients vanish, comparison is vacuous"
        );
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2} s");
    Ok(format!(
        "{checked} gradient entries, max deviation {worst:.1e}, {secs:.2} s"
    ))
}

pub fn stage_gating() -> Outcome {
    let registry = StyleRegistry::default();
    let spec = SyntheticCorpusSpec {
        utterances_per_style: 4,
        duration_range_s: (0.5, 1.0),
        seed: 3,
        ..SyntheticCorpusSpec::default()
    };
    let corpus = ok(synth_corpus(&spec))?;
    let (train, val): (Vec<_>, Vec<_>) = corpus.into_iter().partition(|u| !u.id.ends_with("_003"));
    let config = TrainerConfig {
        batch_size: 16,
        dim: 16,
        speech_hidden: 32,
        text_hidden: 16,
        disc_hidden: 16,
        cls_hidden: 16,
        seed: 9,
        ..TrainerConfig::default()
    };
    let bank = PromptBank::default_bank();
    let mut trainer = ok(Trainer::new(config.clone(), &train, &val, &bank, &registry))?;
    let before = trainer.model().store.clone();
    for _ in 0..config.stage1_epochs {
        let log = ok(trainer.run_epoch())?;
        ensure!(
            log.stage == 1,
            "epoch {} ran in stage {}",
            log.epoch,
            log.stage
        );
    }
    let after = &trainer.model().store;
    let frozen = [
        ParamGroup::TextEmbedding,
        ParamGroup::TextProjection,
        ParamGroup::Discriminator,
    ];
    let mut identical = 0usize;
    let mut moved = Vec::new();
    for ((_, p0), (_, p1)) in before.iter().zip(after.iter()) {
        let same = p0
            .value
            .data()
            .iter()
            .zip(p1.value.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if frozen.contains(&p0.group) {
            ensure!(same, "{} changed during stage 1", p0.name);
            identical += p0.value.len();
        } else if !same {
            moved.push(p0.group);
        }
    }
    // the check is only meaningful if stage 1 actually trained something
    ensure!(
        moved.contains(&ParamGroup::SpeechEncoder) && moved.contains(&ParamGroup::Classifier),
        "speech encoder or classifier did not move in stage 1"
    );
    Ok(format!(
        "{} epochs: {identical} text-encoder/discriminator values bit-identical; speech encoder and classifier updated",
        config.stage1_epochs
    ))
}

fn full_sort(scores: &[(String, f64)]) -> Vec<(String, f64)> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

fn cosine_f32(q: &[f64], row: &[f32]) -> f64 {
    let dot: f64 = q.iter().zip(row).map(|(a, &b)| a * b as f64).sum();
    let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nr = row.iter().map(|&b| (b as f64).powi(2)).sum::<f64>().sqrt();
    dot / (nq * nr)
}

pub fn retrieval_oracle() -> Outcome {
    let start = Instant::now();
    let registry = StyleRegistry::default();
    let bank = PromptBank::default_bank();
    let model = ok(ModelBundle::new(
        ModelConfig {
            seed: 21,
            ..ModelConfig::default()
        },
        registry.clone(),
        Vocabulary::from_bank(&bank),
    ))?;
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut index = EmbeddingIndex::new(d);
    for (i, v) in unit_rows(&mut rng, 1000, d).iter().enumerate() {
        let style = registry.names()[rng.random_range(0..registry.len())].clone();
        let meta = esr_core::index::RowMeta {
            style: Some(style),
            duration_s: rng.random_range(0.5..12.0),
            path: None,
        };
        ok(index.push(format!("row{i:04}"), v, Some(meta)))?;
    }

    // query() against a full sort of independently computed cosines
    let mut query_checks = 0;
    for q in unit_rows(&mut rng, 20, d) {
        let all: Vec<(String, f64)> = (0..index.len())
            .map(|i| (index.ids()[i].clone(), cosine_f32(&q, index.row(i))))
            .collect();
        let sorted = full_sort(&all);
        let emb = ok(Embedding::new(
            q.clone(),
            esr_core::encoders::Modality::Text,
        ))?;
        for k in RECALL_KS {
            let hits = ok(index.query(&emb, k, None))?;
            ensure!(
                hits.len() == k,
                "query returned {} rows for k={k}",
                hits.len()
            );
            for (h, (id, s)) in hits.iter().zip(&sorted) {
                ensure!(
                    h.id == *id,
                    "k={k}: got {} where the full sort has {id}",
                    h.id
                );
                // rows are stored in f32, so scores agree to storage precision only
                ensure!(
                    (h.score - s).abs() < 1e-6,
                    "k={k}: score {} vs {s}",
                    h.score
                );
            }
            query_checks += 1;
        }
    }

    // score_trial() against re-encoding every prompt, re-averaging and a full sort
    let entries = ok(entries_from_index(&index, &registry))?;
    let styles: Vec<StyleId> = (0..5).map(|i| StyleId(i * 4)).collect();
    let mut scorer = ok(PromptScorer::new(&index, &model, &bank))?;
    let mut by_style: BTreeMap<String, Vec<TrialResult>> = BTreeMap::new();
    let mut n_trials = 0;
    for &style in &styles {
        let name = ok(registry.name(style))?.to_string();
        let queries: Vec<Vec<f64>> = ok(bank.enumerate_all(&name))?
            .iter()
            .map(|p| model.encode_text(p).map(|e| e.vector().to_vec()))
            .collect::<Result<_, Error>>()
            .map_err(|e| e.to_string())?;
        for trial in ok(make_trials(&entries, style, 20, 50, 5))? {
            let avg: Vec<(String, f64)> = trial
                .candidates()
                .map(|id| {
                    let row = index.vector(id).unwrap();
                    let mean = queries.iter().map(|q| cosine_f32(q, row)).sum::<f64>()
                        / queries.len() as f64;
                    (id.to_string(), mean)
                })
                .collect();
            let sorted = full_sort(&avg);
            let want = sorted
                .iter()
                .position(|(id, _)| *id == trial.positive_id)
                .unwrap()
                + 1;
            let got = ok(scorer.score_trial(&trial))?;
            ensure!(
                got.rank == want,
                "trial for {}: rank {} vs oracle {want}",
                trial.positive_id,
                got.rank
            );
            for k in RECALL_KS {
                ensure!(got.hit(k) == (want <= k), "recall flag at k={k} disagrees");
            }
            by_style.entry(name.clone()).or_default().push(got);
            n_trials += 1;
        }
    }
    ensure!(n_trials == 100, "{n_trials} trials");
    let report = ok(recall_report(&by_style))?;
    ensure!(
        report.overall.is_monotone(),
        "overall recall not monotone: {:?}",
        report.overall
    );
    for (s, r) in &report.styles {
        ensure!(r.is_monotone(), "{s} recall not monotone: {r:?}");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "1000 rows: {query_checks} query/k checks and {n_trials} trials match full-sort oracles; recall monotone; {secs:.1} s"
    ))
}

pub fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name);
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut model = ok(tiny_model(4))?;
    // perturb every value so nothing sits at its initialization
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.random_range(-1e-3..1e-3);
        }
    }
    let ckpt = Checkpoint {
        model,
        trainer: Some(ok(serde_json::to_value(TrainerConfig::default()))?),
        epoch: 17,
        val_loss: Some(0.1 + 0.2),
    };
    ok(ckpt.save(&p("a.ckpt")))?;
    let loaded = ok(Checkpoint::load(&p("a.ckpt")))?;
    ok(loaded.save(&p("b.ckpt")))?;
    let (a, b) = (
        ok(std::fs::read(p("a.ckpt")))?,
        ok(std::fs::read(p("b.ckpt")))?,
    );
    ensure!(a == b, "checkpoint save→load→save differs");

    let mut index = EmbeddingIndex::new(12);
    for (i, v) in unit_rows(&mut rng, 50, 12).iter().enumerate() {
        let meta = esr_core::index::RowMeta {
            style: Some(format!("s{}", i % 3)),
            duration_s: rng.random_range(0.5..12.0),
            path: Some(format!("/clips/{i}.wav")),
        };
        ok(index.push(format!("id{i}"), v, Some(meta)))?;
    }
    ok(index.save(&p("a.esrx")))?;
    ok(EmbeddingIndex::load(&p("a.esrx")).and_then(|i| i.save(&p("b.esrx"))))?;
    for (x, y) in [
        (p("a.esrx"), p("b.esrx")),
        (
            EmbeddingIndex::meta_path(&p("a.esrx")),
            EmbeddingIndex::meta_path(&p("b.esrx")),
        ),
    ] {
        ensure!(
            ok(std::fs::read(&x))? == ok(std::fs::read(&y))?,
            "{} differs after reload",
            y.display()
        );
    }

    // corrupted headers
    let mut bad_magic = a.clone();
    bad_magic[0] ^= 0xFF;
    let mut bad_version = a.clone();
    bad_version[4] = bad_version[4].wrapping_add(1);
    ensure!(
        matches!(
            Checkpoint::from_bytes(&bad_magic),
            Err(Error::BadMagic { .. })
        ),
        "checkpoint with bad magic not rejected as such"
    );
    ensure!(
        matches!(
            Checkpoint::from_bytes(&bad_version),
            Err(Error::VersionMismatch { .. })
        ),
        "checkpoint with bad version not rejected as such"
    );
    let ib = index.to_bytes();
    let mut bad_magic = ib.clone();
    bad_magic[1] ^= 0xFF;
    let mut bad_version = ib.clone();
    bad_version[4] = bad_version[4].wrapping_add(1);
    ensure!(
        matches!(
            EmbeddingIndex::from_bytes(&bad_magic),
            Err(Error::BadMagic { .. })
        ),
        "index with bad magic not rejected as such"
    );
    ensure!(
        matches!(
            EmbeddingIndex::from_bytes(&bad_version),
            Err(Error::VersionMismatch { .. })
        ),
        "index with bad version not rejected as such"
    );
    ensure!(
        matches!(
            EmbeddingIndex::from_bytes(&ib[..ib.len() - 3]),
            Err(Error::Truncated(_))
        ),
        "truncated index not rejected as such"
    );
    Ok(format!(
        "checkpoint ({} bytes) and index ({} bytes + sidecar) byte-identical after reload; magic/version/truncation errors distinct",
        a.len(),
        ib.len()
    ))
}
