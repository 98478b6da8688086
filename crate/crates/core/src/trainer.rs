//! Multi-stage training with AdamW.
//!
//! Stage 1 trains the speech encoder through the style classifier alone,
//! stage 2 adds the contrastive loss, stage 3 adds the adversarial
//! discriminator (at its own learning rate). The best validation checkpoint
//! among final-stage epochs is kept.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{segment_samples, FeatureSequence, MelExtractor, Utterance};
use crate::encoders::Pooling;
use crate::model::{Checkpoint, ModelBundle, ModelConfig};
use crate::nn::{Bound, ParamGroup, ParamId};
use crate::objectives::{
    adversarial_path, classification_loss, contrastive_loss, total_loss, weighted_sum, LossWeights,
};
use crate::prompts::{PromptBank, Vocabulary};
use crate::{Error, Result, StyleId, StyleRegistry};

/// Floor on per-channel feature standard deviation.
const MIN_FEATURE_STD: f64 = 1e-3;

/// Every field has a default, so a config file need only list overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub total_epochs: usize,
    pub lr_main: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub lambda_contrast: f64,
    pub lambda_adv: f64,
    pub lambda_cls: f64,
    pub dim: usize,
    pub speech_hidden: usize,
    pub text_hidden: usize,
    pub disc_hidden: usize,
    pub cls_hidden: usize,
    pub pooling: Pooling,
    pub tau_init: f64,
    pub max_segment_s: f64,
    pub n_mels: usize,
    /// Train on the single template with canonical labels only.
    pub fixed_prompt: bool,
    /// Freeze the token table; only the text projection learns.
    pub text_projection_only: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        Self {
            batch_size: 32,
            stage1_epochs: 5,
            stage2_epochs: 5,
            total_epochs: 30,
            lr_main: 5e-5,
            lr_disc: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            lambda_contrast: w.lambda_contrast,
            lambda_adv: w.lambda_adv,
            lambda_cls: w.lambda_cls,
            dim: m.dim,
            speech_hidden: m.speech_hidden,
            text_hidden: m.text_hidden,
            disc_hidden: m.disc_hidden,
            cls_hidden: m.cls_hidden,
            pooling: m.pooling,
            tau_init: m.tau_init,
            max_segment_s: 8.0,
            n_mels: m.n_mels,
            fixed_prompt: false,
            text_projection_only: false,
        }
    }
}

impl TrainerConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.stage1_epochs + self.stage2_epochs > self.total_epochs {
            return bad(format!(
                "stage1_epochs + stage2_epochs ({}) exceeds total_epochs ({})",
                self.stage1_epochs + self.stage2_epochs,
                self.total_epochs
            ));
        }
        for (name, v) in [
            ("lr_main", self.lr_main),
            ("lr_disc", self.lr_disc),
            ("eps", self.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_contrast", self.lambda_contrast),
            ("lambda_adv", self.lambda_adv),
            ("lambda_cls", self.lambda_cls),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if self.max_segment_s.is_nan() || self.max_segment_s <= 0.0 {
            return bad("max_segment_s must be positive".into());
        }
        self.model_config().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_contrast: self.lambda_contrast,
            lambda_adv: self.lambda_adv,
            lambda_cls: self.lambda_cls,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_mels: self.n_mels,
            speech_hidden: self.speech_hidden,
            text_hidden: self.text_hidden,
            dim: self.dim,
            disc_hidden: self.disc_hidden,
            cls_hidden: self.cls_hidden,
            pooling: self.pooling,
            tau_init: self.tau_init,
            discriminator: self.lambda_adv > 0.0,
            seed: self.seed,
        }
    }

    /// Training stage (1, 2 or 3) of a 1-based epoch.
    pub fn stage(&self, epoch: usize) -> u8 {
        if epoch <= self.stage1_epochs {
            1
        } else if epoch <= self.stage1_epochs + self.stage2_epochs {
            2
        } else {
            3
        }
    }

    /// Loss terms switched on in `stage`.
    pub fn active_terms(&self, stage: u8) -> ActiveTerms {
        ActiveTerms {
            contrast: stage >= 2 && self.lambda_contrast > 0.0,
            adv: stage >= 3 && self.lambda_adv > 0.0,
            cls: self.lambda_cls > 0.0,
        }
    }

    /// Parameter groups the optimizer updates in `stage`.
    pub fn trainable_groups(&self, stage: u8) -> BTreeSet<ParamGroup> {
        let t = self.active_terms(stage);
        let mut g = BTreeSet::new();
        let text = |g: &mut BTreeSet<ParamGroup>| {
            g.insert(ParamGroup::TextProjection);
            if !self.text_projection_only {
                g.insert(ParamGroup::TextEmbedding);
            }
        };
        if t.cls {
            g.extend([ParamGroup::SpeechEncoder, ParamGroup::Classifier]);
        }
        if t.contrast {
            g.extend([ParamGroup::SpeechEncoder, ParamGroup::Temperature]);
            text(&mut g);
        }
        if t.adv {
            g.extend([ParamGroup::SpeechEncoder, ParamGroup::Discriminator]);
            text(&mut g);
        }
        g
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Discriminator => self.lr_disc,
            _ => self.lr_main,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerms {
    pub contrast: bool,
    pub adv: bool,
    pub cls: bool,
}

impl ActiveTerms {
    pub fn any(&self) -> bool {
        self.contrast || self.adv || self.cls
    }
}

/// The four single-component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoPretraining,
    NoClassifier,
    NoDiscriminator,
    FixedPrompt,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoPretraining,
        Ablation::NoClassifier,
        Ablation::NoDiscriminator,
        Ablation::FixedPrompt,
    ];

    pub fn apply(self, base: &TrainerConfig) -> TrainerConfig {
        let mut c = base.clone();
        match self {
            Ablation::NoPretraining => c.stage1_epochs = 0,
            Ablation::NoClassifier => c.lambda_cls = 0.0,
            Ablation::NoDiscriminator => c.lambda_adv = 0.0,
            Ablation::FixedPrompt => c.fixed_prompt = true,
        }
        c
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_pretraining" | "no-pretraining" => Ok(Ablation::NoPretraining),
            "no_classifier" | "no-classifier" => Ok(Ablation::NoClassifier),
            "no_discriminator" | "no-discriminator" => Ok(Ablation::NoDiscriminator),
            "fixed_prompt" | "fixed-prompt" => Ok(Ablation::FixedPrompt),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Base config plus each ablation variant.
pub fn ablation_flags(base: &TrainerConfig) -> Vec<(Ablation, TrainerConfig)> {
    Ablation::ALL.iter().map(|&a| (a, a.apply(base))).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// AdamW with bias correction and decoupled weight decay. State is kept per
/// parameter, including its own step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            state: HashMap::new(),
        }
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |s| s.step)
    }

    /// Rejects non-finite gradients before touching any state.
    pub fn step(&mut self, id: ParamId, param: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::shape(format!(
                "gradient of {} values for parameter of {}",
                grad.len(),
                param.len()
            )));
        }
        let s = self.state.entry(id).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            step: 0,
        });
        s.step += 1;
        let t = s.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = lr * self.weight_decay;
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(&mut s.m)
            .zip(&mut s.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= decay * *p;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Features and labels for a labeled corpus, extracted once.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub ids: Vec<String>,
    pub features: Vec<FeatureSequence>,
    pub labels: Vec<StyleId>,
}

impl PreparedSet {
    /// Round-robin over styles: the first utterance of every style, then the
    /// second, and so on. Evaluation batches taken in this order hold as many
    /// distinct styles as possible whatever order the set is stored in, so
    /// in-batch losses are comparable between sets of different make-up.
    pub fn interleaved_order(&self) -> Vec<usize> {
        let mut seen: BTreeMap<StyleId, usize> = BTreeMap::new();
        let mut keyed: Vec<(usize, StyleId, usize)> = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let rank = seen.entry(l).or_insert(0);
                *rank += 1;
                (*rank, l, i)
            })
            .collect();
        keyed.sort_unstable();
        keyed.into_iter().map(|(_, _, i)| i).collect()
    }

    pub fn new(corpus: &[Utterance], extractor: &MelExtractor) -> Result<Self> {
        let labels = corpus
            .iter()
            .map(|u| {
                u.style
                    .ok_or_else(|| Error::Config(format!("utterance {} has no style label", u.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let features = corpus
            .par_iter()
            .map(|u| extractor.extract(&u.samples))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: corpus.iter().map(|u| u.id.clone()).collect(),
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Per-channel mean and standard deviation over every frame.
    pub fn feature_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let n_mels = self.features.first().map_or(0, |f| f.n_mels());
        let mut sum = vec![0.0; n_mels];
        let mut sq = vec![0.0; n_mels];
        let mut count = 0usize;
        for f in &self.features {
            for t in 0..f.n_frames() {
                for (c, &v) in f.frame(t).iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += v as f64 * v as f64;
                }
            }
            count += f.n_frames();
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(MIN_FEATURE_STD))
            .collect();
        (mean, std)
    }
}

/// Loss components of one evaluation, each already averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub contrast: Option<f64>,
    pub disc: Option<f64>,
    pub cls: Option<f64>,
}

impl LossParts {
    /// Weighted total with `L_adv = -L_disc`; inactive parts count as zero.
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(
            w,
            self.contrast.unwrap_or(0.0),
            -self.disc.unwrap_or(0.0),
            self.cls.unwrap_or(0.0),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub train_loss: f64,
    pub val_loss: f64,
    pub tau: f64,
    pub train: LossParts,
    pub val: LossParts,
}

impl EpochLog {
    pub const TSV_HEADER: &'static str = "epoch\tstage\ttrain_loss\tval_loss\ttau";

    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.stage, self.train_loss, self.val_loss, self.tau
        )
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: ModelBundle,
    pub history: Vec<EpochLog>,
}

struct Batch {
    features: Vec<FeatureSequence>,
    labels: Vec<StyleId>,
    prompts: Vec<String>,
}

struct StepValues {
    parts: LossParts,
    /// Weighted sum of the active terms as optimized; None when nothing is active.
    objective: Option<Var>,
}

pub struct Trainer {
    config: TrainerConfig,
    bank: PromptBank,
    model: ModelBundle,
    optimizer: AdamW,
    train_set: PreparedSet,
    val_set: PreparedSet,
    max_frames: usize,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    /// Prepares features, builds the model and fits the input normalization
    /// on the training set.
    pub fn new(
        config: TrainerConfig,
        train: &[Utterance],
        val: &[Utterance],
        bank: &PromptBank,
        registry: &StyleRegistry,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        if val.is_empty() {
            return Err(Error::Config("validation corpus is empty".into()));
        }
        for u in train.iter().chain(val) {
            let style = u
                .style
                .ok_or_else(|| Error::Config(format!("utterance {} has no style label", u.id)))?;
            let name = registry.name(style)?;
            bank.substitutions(name)
                .map_err(|_| Error::Config(format!("style {name:?} is not in the prompt bank")))?;
        }
        let full_bank = bank;
        let bank = if config.fixed_prompt {
            bank.fixed_prompt()
        } else {
            bank.clone()
        };
        // built from the full bank even in fixed-prompt mode, so every eval
        // prompt keeps its own token ids
        let vocab = Vocabulary::from_bank(full_bank);
        let extractor = MelExtractor::new(
            config.n_mels,
            crate::corpus::DEFAULT_WINDOW_S,
            crate::corpus::DEFAULT_HOP_S,
        )?;
        let train_set = PreparedSet::new(train, &extractor)?;
        let val_set = PreparedSet::new(val, &extractor)?;
        let mut model = ModelBundle::new(config.model_config(), registry.clone(), vocab)?;
        let (mean, std) = train_set.feature_stats();
        model
            .speech
            .set_normalization(&mut model.store, &mean, &std)?;
        let max_frames = extractor
            .frame_count(segment_samples(config.max_segment_s))
            .max(1);
        let optimizer = AdamW::new(config.beta1, config.beta2, config.eps, config.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
        Ok(Self {
            config,
            bank,
            model,
            optimizer,
            train_set,
            val_set,
            max_frames,
            rng,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelBundle {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ModelBundle {
        &mut self.model
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Bank actually used for training prompts.
    pub fn bank(&self) -> &PromptBank {
        &self.bank
    }

    fn style_name(&self, s: StyleId) -> Result<&str> {
        self.model.registry.name(s)
    }

    /// Evaluates the stage's loss terms for a batch. Parameters in
    /// `trainable` become gradient leaves.
    fn forward(&self, g: &mut Graph, b: &Bound, batch: &Batch, stage: u8) -> Result<StepValues> {
        let terms = self.config.active_terms(stage);
        let w = self.config.weights();
        let m = &self.model;
        let feats: Vec<&FeatureSequence> = batch.features.iter().collect();
        let es = m.speech.forward_batch(g, b, &feats)?;
        let et = if terms.contrast || terms.adv {
            let tokens: Vec<_> = batch.prompts.iter().map(|p| m.vocab.tokenize(p)).collect();
            Some(m.text.forward_batch(g, b, &tokens)?)
        } else {
            None
        };
        let contrast = match (terms.contrast, et) {
            (true, Some(et)) => {
                let scale = m.temperature.logit_scale(g, b)?;
                Some(contrastive_loss(g, es, et, scale)?)
            }
            _ => None,
        };
        let adv = match (terms.adv, et, &m.discriminator) {
            (true, Some(et), Some(d)) => Some(adversarial_path(g, b, d, es, et)?),
            _ => None,
        };
        let cls = if terms.cls {
            Some(classification_loss(g, b, &m.classifier, es, &batch.labels)?)
        } else {
            None
        };
        let value = |v: Option<Var>| v.map(|v| g.value(v).item()).transpose();
        let parts = LossParts {
            contrast: value(contrast)?,
            disc: value(adv)?,
            cls: value(cls)?,
        };
        // the reversal node turns +λ_adv·L_disc into the encoders' -L_disc
        let objective = weighted_sum(
            g,
            &[
                (w.lambda_contrast, contrast),
                (w.lambda_adv, adv),
                (w.lambda_cls, cls),
            ],
        )?;
        Ok(StepValues { parts, objective })
    }

    /// Runs one epoch of optimization followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        self.epoch += 1;
        let epoch = self.epoch;
        let stage = self.config.stage(epoch);
        let groups = self.config.trainable_groups(stage);
        let w = self.config.weights();

        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = PartSums::default();
        for chunk in order.chunks(self.config.batch_size) {
            let batch = self.train_batch(chunk)?;
            let mut g = Graph::new();
            let b = Bound::new(&mut g, &self.model.store, |grp| groups.contains(&grp));
            let step = self.forward(&mut g, &b, &batch, stage)?;
            sums.add(&step.parts, chunk.len());
            let Some(objective) = step.objective else {
                continue;
            };
            g.backward(objective)?;
            self.apply_gradients(&g, &b, &groups)?;
        }
        let train = sums.mean();
        let val = self.validate_parts(stage)?;
        Ok(EpochLog {
            epoch,
            stage,
            train_loss: train.total(&w),
            val_loss: val.total(&w),
            tau: self.model.tau(),
            train,
            val,
        })
    }

    fn apply_gradients(
        &mut self,
        g: &Graph,
        b: &Bound,
        groups: &BTreeSet<ParamGroup>,
    ) -> Result<()> {
        let ids: Vec<(ParamId, ParamGroup)> = self
            .model
            .store
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, p)| (id, p.group))
            .collect();
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&(id, _)| b.grad(g, &self.model.store, id))
            .collect();
        for (&(id, _), grad) in ids.iter().zip(&grads) {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    param: self.model.store.param(id).name.clone(),
                    step: self.optimizer.steps(id) + 1,
                });
            }
        }
        for ((id, group), grad) in ids.into_iter().zip(grads) {
            let lr = self.config.lr_for(group);
            self.optimizer
                .step(id, self.model.store.get_mut(id), &grad, lr)?;
        }
        Ok(())
    }

    /// Random hop-aligned crops and freshly sampled prompts.
    fn train_batch(&mut self, chunk: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        let mut prompts = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let f = &self.train_set.features[i];
            let excess = f.n_frames().saturating_sub(self.max_frames);
            features.push(if excess > 0 {
                let start = self.rng.random_range(0..=excess);
                f.slice(start, self.max_frames)?
            } else {
                f.clone()
            });
            let label = self.train_set.labels[i];
            labels.push(label);
            let name = self.model.registry.name(label)?;
            prompts.push(self.bank.sample(name, &mut self.rng)?);
        }
        Ok(Batch {
            features,
            labels,
            prompts,
        })
    }

    /// Leading crops and the canonical prompt (template 0, substitution 0).
    fn val_batch(&self, set: &PreparedSet, chunk: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        let mut prompts = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let f = &set.features[i];
            features.push(if f.n_frames() > self.max_frames {
                f.slice(0, self.max_frames)?
            } else {
                f.clone()
            });
            labels.push(set.labels[i]);
            prompts.push(self.bank.render(self.style_name(set.labels[i])?, 0, 0)?);
        }
        Ok(Batch {
            features,
            labels,
            prompts,
        })
    }

    /// Mean loss components of `stage` over the validation set, batched like
    /// training (the last batch may be short).
    pub fn validate_parts(&self, stage: u8) -> Result<LossParts> {
        self.evaluate_parts(&self.val_set, stage)
    }

    /// Same evaluation over the training utterances.
    pub fn train_set_parts(&self, stage: u8) -> Result<LossParts> {
        self.evaluate_parts(&self.train_set, stage)
    }

    fn evaluate_parts(&self, set: &PreparedSet, stage: u8) -> Result<LossParts> {
        if set.is_empty() {
            return Err(Error::Config("validation corpus is empty".into()));
        }
        let order = set.interleaved_order();
        let mut sums = PartSums::default();
        for chunk in order.chunks(self.config.batch_size) {
            let batch = self.val_batch(set, chunk)?;
            let mut g = Graph::new();
            let b = Bound::frozen(&mut g, &self.model.store);
            let step = self.forward(&mut g, &b, &batch, stage)?;
            sums.add(&step.parts, chunk.len());
        }
        Ok(sums.mean())
    }

    /// Validation loss of the stage's objective.
    pub fn validate(&self, stage: u8) -> Result<f64> {
        Ok(self.validate_parts(stage)?.total(&self.config.weights()))
    }

    pub fn checkpoint(&self, val_loss: Option<f64>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model.clone(),
            trainer: Some(serde_json::to_value(&self.config)?),
            epoch: self.epoch,
            val_loss,
        })
    }
}

/// Batch-size-weighted running means of loss components.
#[derive(Debug, Default)]
struct PartSums {
    contrast: (f64, usize),
    disc: (f64, usize),
    cls: (f64, usize),
}

impl PartSums {
    fn add(&mut self, p: &LossParts, n: usize) {
        for (acc, v) in [
            (&mut self.contrast, p.contrast),
            (&mut self.disc, p.disc),
            (&mut self.cls, p.cls),
        ] {
            if let Some(v) = v {
                acc.0 += v * n as f64;
                acc.1 += n;
            }
        }
    }

    fn mean(&self) -> LossParts {
        let m = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        LossParts {
            contrast: m(self.contrast),
            disc: m(self.disc),
            cls: m(self.cls),
        }
    }
}

/// Trains for `config.total_epochs`, calling `on_epoch` after each. The
/// returned best checkpoint has the lowest validation loss among epochs of
/// the final stage; losses of earlier stages measure different objectives.
pub fn train(
    config: &TrainerConfig,
    train: &[Utterance],
    val: &[Utterance],
    bank: &PromptBank,
    registry: &StyleRegistry,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), train, val, bank, registry)?;
    let final_stage = config.stage(config.total_epochs.max(1));
    let mut history = Vec::with_capacity(config.total_epochs);
    let mut best: Option<Checkpoint> = None;
    for _ in 0..config.total_epochs {
        let log = trainer.run_epoch()?;
        on_epoch(&log);
        let improves = best
            .as_ref()
            .is_none_or(|b| b.val_loss.is_none_or(|v| log.val_loss < v));
        if log.stage == final_stage && improves {
            best = Some(trainer.checkpoint(Some(log.val_loss))?);
        }
        history.push(log);
    }
    let best = match best {
        Some(b) => b,
        None => trainer.checkpoint(None)?,
    };
    Ok(TrainOutcome {
        best,
        last: trainer.model.clone(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adam() -> AdamW {
        AdamW::new(0.9, 0.999, 1e-8, 0.0)
    }

    #[test]
    fn interleaved_order_cycles_through_styles() {
        let set = PreparedSet {
            ids: (0..7).map(|i| i.to_string()).collect(),
            features: Vec::new(),
            labels: [2, 2, 2, 0, 0, 1, 2].map(StyleId).to_vec(),
        };
        assert_eq!(set.interleaved_order(), [3, 5, 0, 4, 1, 2, 6]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = adam();
        let mut p = Tensor::scalar(0.0);
        opt.step(ParamId::for_tests(0), &mut p, &[1.0], 5e-5)
            .unwrap();
        // bias correction makes m_hat = v_hat = 1
        assert_eq!(p.data()[0], -5e-5 / (1.0 + 1e-8));
        assert_eq!(opt.steps(ParamId::for_tests(0)), 1);
    }

    #[test]
    fn decoupled_decay() {
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
        let mut p = Tensor::scalar(1.0);
        opt.step(ParamId::for_tests(0), &mut p, &[0.0], 5e-5)
            .unwrap();
        assert!((1.0 - p.data()[0] - 5e-7).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut opt = adam();
        let mut p = Tensor::row_vector(vec![0.3, -2.0, 7.5]);
        for _ in 0..5 {
            opt.step(ParamId::for_tests(1), &mut p, &[0.0; 3], 1e-3)
                .unwrap();
        }
        assert_eq!(p.data(), &[0.3, -2.0, 7.5]);
    }

    #[test]
    fn two_steps_match_closed_form() {
        let (b1, b2, eps, lr, wd) = (0.9f64, 0.999f64, 1e-8, 1e-2, 0.1);
        let mut opt = AdamW::new(b1, b2, eps, wd);
        let mut p = Tensor::scalar(0.5);
        opt.step(ParamId::for_tests(0), &mut p, &[2.0], lr).unwrap();
        opt.step(ParamId::for_tests(0), &mut p, &[-1.0], lr)
            .unwrap();
        let mut x = 0.5;
        x -= lr * wd * x;
        // m_hat = 2, v_hat = 4 after one step
        x -= lr * 2.0 / (2.0 + eps);
        let m = 0.9 * (0.1 * 2.0) - 0.1;
        let v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0;
        let (mh, vh) = (m / (1.0 - b1 * b1), v / (1.0 - b2 * b2));
        x -= lr * wd * x;
        x -= lr * mh / (vh.sqrt() + eps);
        assert!((p.data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn step_counters_are_per_parameter() {
        let mut opt = adam();
        let mut p = Tensor::scalar(0.0);
        opt.step(ParamId::for_tests(0), &mut p, &[1.0], 1e-3)
            .unwrap();
        opt.step(ParamId::for_tests(0), &mut p, &[1.0], 1e-3)
            .unwrap();
        let mut q = Tensor::scalar(0.0);
        opt.step(ParamId::for_tests(5), &mut q, &[1.0], 1e-3)
            .unwrap();
        assert_eq!(opt.steps(ParamId::for_tests(0)), 2);
        assert_eq!(opt.steps(ParamId::for_tests(5)), 1);
        assert_eq!(q.data()[0], -1e-3 / (1.0 + 1e-8));
        assert!(opt
            .step(ParamId::for_tests(5), &mut q, &[1.0, 2.0], 1e-3)
            .is_err());
    }

    #[test]
    fn stage_schedule_and_groups() {
        use ParamGroup::*;
        let c = TrainerConfig::default();
        let stages: Vec<u8> = (1..=12).map(|e| c.stage(e)).collect();
        assert_eq!(stages, [1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3]);
        assert_eq!(c.trainable_groups(1), [SpeechEncoder, Classifier].into());
        assert_eq!(
            c.trainable_groups(2),
            [
                SpeechEncoder,
                TextEmbedding,
                TextProjection,
                Temperature,
                Classifier
            ]
            .into()
        );
        assert!(c.trainable_groups(3).contains(&Discriminator));
        assert!(!c.trainable_groups(3).contains(&FeatureNorm));
        assert_eq!(c.lr_for(Discriminator), 2e-5);
        assert_eq!(c.lr_for(TextProjection), 5e-5);

        let frozen_table = TrainerConfig {
            text_projection_only: true,
            ..c.clone()
        };
        assert!(!frozen_table.trainable_groups(3).contains(&TextEmbedding));
    }

    #[test]
    fn ablations() {
        let base = TrainerConfig::default();
        let v: BTreeMap<_, _> = ablation_flags(&base).into_iter().collect();
        assert_eq!(v.len(), 4);
        let np = &v[&Ablation::NoPretraining];
        assert_eq!(np.stage(1), 2);
        assert!(np.active_terms(np.stage(1)).contrast);
        assert_eq!(v[&Ablation::NoClassifier].lambda_cls, 0.0);
        assert!(!v[&Ablation::NoClassifier].active_terms(1).any());
        assert!(!v[&Ablation::NoDiscriminator].model_config().discriminator);
        assert!(v[&Ablation::FixedPrompt].fixed_prompt);
        assert_eq!(
            "no-classifier".parse::<Ablation>().unwrap(),
            Ablation::NoClassifier
        );
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn toml_overrides_and_round_trip() {
        let c = TrainerConfig::from_toml(
            "total_epochs = 12\nlr_main = 1e-4\npooling = \"first_token\"\n",
        )
        .unwrap();
        assert_eq!(c.total_epochs, 12);
        assert_eq!(c.lr_main, 1e-4);
        assert_eq!(c.pooling, Pooling::FirstToken);
        assert_eq!(c.batch_size, 32);
        assert_eq!(TrainerConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(matches!(
            TrainerConfig::from_toml("batch = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainerConfig::from_toml("stage1_epochs = 40"),
            Err(Error::Config(_))
        ));
        assert!(TrainerConfig::from_toml("lr_disc = 0.0").is_err());
    }

    #[test]
    fn loss_parts_total_negates_disc() {
        let p = LossParts {
            contrast: Some(0.31326),
            disc: Some(1.3863),
            cls: Some(3.0910),
        };
        let w = LossWeights::default();
        assert!((p.total(&w) - total_loss(&w, 0.31326, -1.3863, 3.0910)).abs() < 1e-15);
        assert_eq!(LossParts::default().total(&w), 0.0);
    }
}
