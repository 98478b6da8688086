//! Retrieval trials, Recall@k, duration bins and the classifier baseline.
//!
//! A trial is one positive utterance of the target style among distractors
//! of other styles. Candidates are ranked by their similarity to the style's
//! queries averaged over every template × substitution prompt.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::index::EmbeddingIndex;
use crate::model::ModelBundle;
use crate::prompts::PromptBank;
use crate::{Error, Result, StyleId, StyleRegistry};

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 20];

/// Left edges of the duration bins in seconds; the last bin is open above.
pub const DURATION_EDGES_S: [f64; 5] = [0.0, 4.0, 6.0, 8.0, 10.0];
pub const DURATION_LABELS: [&str; 5] = ["<4 s", "4-6 s", "6-8 s", "8-10 s", ">=10 s"];

/// What the trial builder needs to know about each candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub style: StyleId,
    pub duration_s: f64,
}

pub fn entries_from_corpus(corpus: &[Utterance]) -> Result<Vec<CorpusEntry>> {
    corpus
        .iter()
        .map(|u| {
            Ok(CorpusEntry {
                id: u.id.clone(),
                style: u
                    .style
                    .ok_or_else(|| Error::Config(format!("utterance {} has no style", u.id)))?,
                duration_s: u.duration_s(),
            })
        })
        .collect()
}

/// Candidates from an index's metadata sidecar, in row order.
pub fn entries_from_index(
    index: &EmbeddingIndex,
    registry: &StyleRegistry,
) -> Result<Vec<CorpusEntry>> {
    index
        .ids()
        .iter()
        .map(|id| {
            let meta = index
                .meta(id)
                .ok_or_else(|| Error::Config(format!("index row {id} has no metadata")))?;
            let style = meta
                .style
                .as_deref()
                .ok_or_else(|| Error::Config(format!("index row {id} has no style")))?;
            Ok(CorpusEntry {
                id: id.clone(),
                style: registry.id(style)?,
                duration_s: meta.duration_s,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalTrial {
    pub target_style: StyleId,
    pub positive_id: String,
    pub distractor_ids: Vec<String>,
}

impl RetrievalTrial {
    pub fn candidates(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.positive_id.as_str())
            .chain(self.distractor_ids.iter().map(String::as_str))
    }

    pub fn n_candidates(&self) -> usize {
        1 + self.distractor_ids.len()
    }
}

/// Seeded trials for one style. Each draws its positive uniformly from the
/// style and its distractors without replacement from all other styles.
pub fn make_trials(
    corpus: &[CorpusEntry],
    style: StyleId,
    n_trials: usize,
    n_distractors: usize,
    seed: u64,
) -> Result<Vec<RetrievalTrial>> {
    let positives: Vec<&CorpusEntry> = corpus.iter().filter(|e| e.style == style).collect();
    let pool: Vec<&CorpusEntry> = corpus.iter().filter(|e| e.style != style).collect();
    if positives.is_empty() {
        return Err(Error::Config(format!("no utterances of style {}", style.0)));
    }
    if pool.len() < n_distractors {
        return Err(Error::Config(format!(
            "style {} needs {n_distractors} distractors, only {} available",
            style.0,
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(style.0 as u64);
    Ok((0..n_trials)
        .map(|_| {
            let positive = positives[rng.random_range(0..positives.len())];
            let distractor_ids = sample(&mut rng, pool.len(), n_distractors)
                .into_iter()
                .map(|i| pool[i].id.clone())
                .collect();
            RetrievalTrial {
                target_style: style,
                positive_id: positive.id.clone(),
                distractor_ids,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialResult {
    /// 1-based rank of the positive.
    pub rank: usize,
    pub n_candidates: usize,
}

impl TrialResult {
    pub fn hit(&self, k: usize) -> bool {
        self.rank <= k
    }
}

/// Rank of the positive given a score per candidate: one plus the number of
/// candidates ordered before it (higher score, or equal score and smaller id).
pub fn rank_of_positive(
    trial: &RetrievalTrial,
    score: impl Fn(&str) -> Result<f64>,
) -> Result<TrialResult> {
    let pos = score(&trial.positive_id)?;
    let mut ahead = 0;
    for id in &trial.distractor_ids {
        let s = score(id)?;
        if s > pos || (s == pos && id.as_str() < trial.positive_id.as_str()) {
            ahead += 1;
        }
    }
    Ok(TrialResult {
        rank: 1 + ahead,
        n_candidates: trial.n_candidates(),
    })
}

/// Prompt-averaged scores for every index row, computed once per style.
pub struct PromptScorer<'a> {
    index: &'a EmbeddingIndex,
    model: &'a ModelBundle,
    bank: &'a PromptBank,
    cache: HashMap<StyleId, Vec<f64>>,
}

impl<'a> PromptScorer<'a> {
    pub fn new(
        index: &'a EmbeddingIndex,
        model: &'a ModelBundle,
        bank: &'a PromptBank,
    ) -> Result<Self> {
        if index.dim() != model.dim() {
            return Err(Error::shape(format!(
                "index dim {} vs model dim {}",
                index.dim(),
                model.dim()
            )));
        }
        Ok(Self {
            index,
            model,
            bank,
            cache: HashMap::new(),
        })
    }

    fn compute(&self, style: StyleId) -> Result<Vec<f64>> {
        let prompts = self.bank.enumerate_all(self.model.registry.name(style)?)?;
        let queries = self.model.encode_texts(&prompts)?;
        let sims = self.index.batch_similarities(&queries)?;
        let mut avg = vec![0.0; self.index.len()];
        for row in &sims {
            for (a, s) in avg.iter_mut().zip(row) {
                *a += s;
            }
        }
        let n = queries.len() as f64;
        avg.iter_mut().for_each(|a| *a /= n);
        Ok(avg)
    }

    /// Fills the cache for `styles` in parallel.
    pub fn warm(&mut self, styles: &[StyleId]) -> Result<()> {
        let todo: Vec<StyleId> = styles
            .iter()
            .copied()
            .filter(|s| !self.cache.contains_key(s))
            .collect();
        let done = todo
            .par_iter()
            .map(|&s| self.compute(s).map(|v| (s, v)))
            .collect::<Result<Vec<_>>>()?;
        self.cache.extend(done);
        Ok(())
    }

    /// Average similarity of every index row to the style's prompts.
    pub fn style_scores(&mut self, style: StyleId) -> Result<&[f64]> {
        self.warm(&[style])?;
        Ok(&self.cache[&style])
    }

    pub fn score_trial(&mut self, trial: &RetrievalTrial) -> Result<TrialResult> {
        let index = self.index;
        let scores = self.style_scores(trial.target_style)?;
        rank_of_positive(trial, |id| Ok(scores[index.row_of(id)?]))
    }
}

/// Target-class classifier logits for every index row.
pub struct ClassifierScorer<'a> {
    index: &'a EmbeddingIndex,
    logits: Vec<Vec<f64>>,
}

impl<'a> ClassifierScorer<'a> {
    pub fn new(
        model: &ModelBundle,
        index: &'a EmbeddingIndex,
        registry: &StyleRegistry,
    ) -> Result<Self> {
        if &model.registry != registry {
            return Err(Error::Config(
                "classifier was trained over a different style registry".into(),
            ));
        }
        let rows: Vec<Vec<f64>> = (0..index.len())
            .map(|i| index.row(i).iter().map(|&v| v as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let t = model.classifier_logits(&refs)?;
        Ok(Self {
            index,
            logits: (0..t.rows()).map(|i| t.row(i).to_vec()).collect(),
        })
    }

    pub fn logit(&self, id: &str, style: StyleId) -> Result<f64> {
        let row = &self.logits[self.index.row_of(id)?];
        row.get(style.index()).copied().ok_or(Error::Bounds {
            what: "style",
            index: style.index(),
            len: row.len(),
        })
    }

    pub fn rank(&self, trial: &RetrievalTrial) -> Result<TrialResult> {
        rank_of_positive(trial, |id| self.logit(id, trial.target_style))
    }
}

/// Ranks candidates by descending target-class logit.
pub fn classifier_baseline_rank(
    scorer: &ClassifierScorer<'_>,
    trial: &RetrievalTrial,
) -> Result<TrialResult> {
    scorer.rank(trial)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RecallAtK {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r20: f64,
}

impl RecallAtK {
    pub fn from_results(results: &[TrialResult]) -> Self {
        let n = results.len().max(1) as f64;
        let frac = |k| results.iter().filter(|r| r.hit(k)).count() as f64 / n;
        Self {
            r1: frac(1),
            r5: frac(5),
            r10: frac(10),
            r20: frac(20),
        }
    }

    pub fn mean(items: &[RecallAtK]) -> Self {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&RecallAtK) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            r1: avg(|r| r.r1),
            r5: avg(|r| r.r5),
            r10: avg(|r| r.r10),
            r20: avg(|r| r.r20),
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.r1, self.r5, self.r10, self.r20]
    }

    pub fn is_monotone(&self) -> bool {
        self.values().windows(2).all(|w| w[0] <= w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationBin {
    pub label: String,
    pub n_trials: usize,
    pub recall: Option<RecallAtK>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub styles: BTreeMap<String, RecallAtK>,
    /// Unweighted mean over styles.
    pub overall: RecallAtK,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bins: Option<Vec<DurationBin>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let width = self
            .styles
            .keys()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(7);
        let _ = writeln!(
            s,
            "{:<width$}  {:>6} {:>6} {:>6} {:>6}",
            "style", "R@1", "R@5", "R@10", "R@20"
        );
        let row = |s: &mut String, name: &str, r: &RecallAtK| {
            let _ = writeln!(
                s,
                "{name:<width$}  {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                r.r1, r.r5, r.r10, r.r20
            );
        };
        for (name, r) in &self.styles {
            row(&mut s, name, r);
        }
        row(&mut s, "overall", &self.overall);
        if let Some(bins) = &self.bins {
            let _ = writeln!(
                s,
                "\n{:<width$}  {:>6} {:>6} {:>6} {:>6}  trials",
                "duration", "R@1", "R@5", "R@10", "R@20"
            );
            for b in bins {
                match &b.recall {
                    Some(r) => {
                        let _ = writeln!(
                            s,
                            "{:<width$}  {:>6.3} {:>6.3} {:>6.3} {:>6.3}  {}",
                            b.label, r.r1, r.r5, r.r10, r.r20, b.n_trials
                        );
                    }
                    None => {
                        let _ = writeln!(
                            s,
                            "{:<width$}  {:>6} {:>6} {:>6} {:>6}  0",
                            b.label, "-", "-", "-", "-"
                        );
                    }
                }
            }
        }
        s
    }
}

/// Per-style Recall@k and their macro average.
pub fn recall_report(results: &BTreeMap<String, Vec<TrialResult>>) -> Result<EvalReport> {
    if results.is_empty() || results.values().any(Vec::is_empty) {
        return Err(Error::Config(
            "recall report needs results for every style".into(),
        ));
    }
    let styles: BTreeMap<String, RecallAtK> = results
        .iter()
        .map(|(k, v)| (k.clone(), RecallAtK::from_results(v)))
        .collect();
    let overall = RecallAtK::mean(&styles.values().copied().collect::<Vec<_>>());
    Ok(EvalReport {
        styles,
        overall,
        bins: None,
    })
}

/// Index into [`DURATION_LABELS`]; bins are closed on the left.
pub fn duration_bin(duration_s: f64) -> usize {
    DURATION_EDGES_S
        .iter()
        .rposition(|&e| duration_s >= e)
        .unwrap_or(0)
}

/// Recall@k over the trials whose positive falls in each duration bin.
pub fn duration_binned_report(
    trials: &[(RetrievalTrial, TrialResult)],
    corpus: &[CorpusEntry],
) -> Result<Vec<DurationBin>> {
    let durations: HashMap<&str, f64> = corpus
        .iter()
        .map(|e| (e.id.as_str(), e.duration_s))
        .collect();
    let mut grouped: Vec<Vec<TrialResult>> = vec![Vec::new(); DURATION_LABELS.len()];
    for (t, r) in trials {
        let d = durations
            .get(t.positive_id.as_str())
            .ok_or_else(|| Error::Lookup {
                what: "utterance duration",
                key: t.positive_id.clone(),
            })?;
        grouped[duration_bin(*d)].push(*r);
    }
    Ok(grouped
        .into_iter()
        .zip(DURATION_LABELS)
        .map(|(rs, label)| DurationBin {
            label: label.to_string(),
            n_trials: rs.len(),
            recall: (!rs.is_empty()).then(|| RecallAtK::from_results(&rs)),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_trials: usize,
    pub n_distractors: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_trials: 200,
            n_distractors: 50,
            seed: 17,
        }
    }
}

impl EvalConfig {
    /// Trial counts of the full protocol (1000 trials, 400 distractors).
    pub fn full_scale(seed: u64) -> Self {
        Self {
            n_trials: 1000,
            n_distractors: 400,
            seed,
        }
    }
}

/// Builds trials for every style present in `corpus`.
pub fn make_all_trials(corpus: &[CorpusEntry], cfg: &EvalConfig) -> Result<Vec<RetrievalTrial>> {
    let mut styles: Vec<StyleId> = corpus.iter().map(|e| e.style).collect();
    styles.sort();
    styles.dedup();
    let mut out = Vec::new();
    for s in styles {
        out.extend(make_trials(
            corpus,
            s,
            cfg.n_trials,
            cfg.n_distractors,
            cfg.seed,
        )?);
    }
    Ok(out)
}

fn report_from(
    registry: &StyleRegistry,
    corpus: &[CorpusEntry],
    scored: Vec<(RetrievalTrial, TrialResult)>,
) -> Result<EvalReport> {
    let mut by_style: BTreeMap<String, Vec<TrialResult>> = BTreeMap::new();
    for (t, r) in &scored {
        by_style
            .entry(registry.name(t.target_style)?.to_string())
            .or_default()
            .push(*r);
    }
    let mut report = recall_report(&by_style)?;
    report.bins = Some(duration_binned_report(&scored, corpus)?);
    Ok(report)
}

/// Full prompt-averaged retrieval evaluation over an index.
pub fn evaluate(
    model: &ModelBundle,
    index: &EmbeddingIndex,
    bank: &PromptBank,
    corpus: &[CorpusEntry],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let trials = make_all_trials(corpus, cfg)?;
    let mut scorer = PromptScorer::new(index, model, bank)?;
    let mut styles: Vec<StyleId> = trials.iter().map(|t| t.target_style).collect();
    styles.dedup();
    scorer.warm(&styles)?;
    let scored = trials
        .into_iter()
        .map(|t| scorer.score_trial(&t).map(|r| (t, r)))
        .collect::<Result<Vec<_>>>()?;
    report_from(&model.registry, corpus, scored)
}

/// The same protocol ranking by classifier logits instead of text queries.
pub fn evaluate_classifier_baseline(
    model: &ModelBundle,
    index: &EmbeddingIndex,
    corpus: &[CorpusEntry],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let trials = make_all_trials(corpus, cfg)?;
    let scorer = ClassifierScorer::new(model, index, &model.registry)?;
    let scored = trials
        .into_iter()
        .map(|t| classifier_baseline_rank(&scorer, &t).map(|r| (t, r)))
        .collect::<Result<Vec<_>>>()?;
    report_from(&model.registry, corpus, scored)
}

/// Writes `id, modality, style, v0..v(d-1)` rows with a header. With a
/// model and bank, every prompt embedding is appended as a text row.
pub fn dump_embeddings(
    index: &EmbeddingIndex,
    path: &Path,
    prompts: Option<(&ModelBundle, &PromptBank)>,
) -> Result<usize> {
    let mut out = String::new();
    out.push_str("id\tmodality\tstyle");
    for j in 0..index.dim() {
        let _ = write!(out, "\tv{j}");
    }
    out.push('\n');
    let mut rows = 0;
    for (i, id) in index.ids().iter().enumerate() {
        let style = index
            .meta(id)
            .and_then(|m| m.style.as_deref())
            .unwrap_or("");
        let _ = write!(out, "{id}\tspeech\t{style}");
        for v in index.row(i) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
        rows += 1;
    }
    if let Some((model, bank)) = prompts {
        for name in model.registry.names() {
            let texts = bank.enumerate_all(name)?;
            let embs = model.encode_texts(&texts)?;
            for (j, e) in embs.iter().enumerate() {
                let _ = write!(out, "{name}/prompt{j}\ttext\t{name}");
                for &v in e.vector() {
                    let _ = write!(out, "\t{}", v as f32);
                }
                out.push('\n');
                rows += 1;
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(rows)
}
