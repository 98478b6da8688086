//! Training objectives: symmetric contrastive loss with a learnable
//! temperature, modality discriminator with gradient reversal, auxiliary
//! style classifier, and their weighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::nn::{Bound, Linear, ParamGroup, ParamId, ParamStore};
use crate::{Error, Result, StyleId};

/// Upper bound on the logit scale `1 / τ`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Learnable temperature stored as `log τ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Temperature {
    pub log_tau: ParamId,
}

impl Temperature {
    pub fn new(store: &mut ParamStore, tau_init: f64) -> Self {
        assert!(tau_init > 0.0, "temperature must be positive");
        let log_tau = store.add(
            "temperature.log_tau",
            ParamGroup::Temperature,
            Tensor::scalar(tau_init.ln()),
        );
        Self { log_tau }
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).data()[0].exp()
    }

    /// `min(exp(-log τ), MAX_LOGIT_SCALE)` as a graph node.
    pub fn logit_scale(&self, g: &mut Graph, b: &Bound) -> Result<Var> {
        let neg = g.scalar_mul(b.var(self.log_tau), -1.0)?;
        let inv = g.exp(neg)?;
        g.clamp_max(inv, MAX_LOGIT_SCALE)
    }
}

/// Symmetric in-batch contrastive loss. Row `i` of `speech` pairs with row
/// `i` of `text`; `scale` is the `1 × 1` logit scale node.
pub fn contrastive_loss(g: &mut Graph, speech: Var, text: Var, scale: Var) -> Result<Var> {
    let (ns, nt) = (g.value(speech).rows(), g.value(text).rows());
    if ns != nt || ns == 0 {
        return Err(Error::shape(format!(
            "contrastive batch sizes {ns} vs {nt}"
        )));
    }
    let sims = g.matmul_t(speech, text)?;
    let logits = g.scale(sims, scale)?;
    let targets: Vec<usize> = (0..ns).collect();
    let speech_to_text = g.softmax_cross_entropy(logits, &targets)?;
    let logits_t = g.transpose(logits)?;
    let text_to_speech = g.softmax_cross_entropy(logits_t, &targets)?;
    let both = g.add(speech_to_text, text_to_speech)?;
    g.scalar_mul(both, 0.5)
}

/// Two-layer modality classifier `d → d_D → 1`, ReLU then sigmoid.
/// Outputs the probability that an embedding came from speech.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Discriminator {
    pub hidden: Linear,
    pub out: Linear,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Discriminator;
        Self {
            hidden: Linear::new(store, "disc.hidden", g, dim, hidden, rng),
            out: Linear::new(store, "disc.out", g, hidden, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, b, x)?;
        let h = g.relu(h)?;
        let z = self.out.forward(g, b, h)?;
        g.sigmoid(z)
    }
}

/// `-mean log D(speech) - mean log(1 - D(text))`. Speech is label 1.
pub fn discriminator_loss(
    g: &mut Graph,
    b: &Bound,
    disc: &Discriminator,
    speech: Var,
    text: Var,
) -> Result<Var> {
    let ns = g.value(speech).rows();
    let nt = g.value(text).rows();
    if ns == 0 || nt == 0 {
        return Err(Error::shape("discriminator needs nonempty batches"));
    }
    let ps = disc.forward(g, b, speech)?;
    let pt = disc.forward(g, b, text)?;
    let ls = g.binary_cross_entropy(ps, &vec![1.0; ns])?;
    let lt = g.binary_cross_entropy(pt, &vec![0.0; nt])?;
    g.add(ls, lt)
}

/// Discriminator loss evaluated on gradient-reversed embeddings. Its value
/// equals [`discriminator_loss`]; the discriminator receives the gradient
/// that minimizes it while the encoders receive the negation, which is the
/// gradient of `L_adv = -L_disc`.
pub fn adversarial_path(
    g: &mut Graph,
    b: &Bound,
    disc: &Discriminator,
    speech: Var,
    text: Var,
) -> Result<Var> {
    let rs = g.grad_reverse(speech)?;
    let rt = g.grad_reverse(text)?;
    discriminator_loss(g, b, disc, rs, rt)
}

/// Two-layer style classifier `d → d_C → |styles|` with ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StyleClassifier {
    pub hidden: Linear,
    pub out: Linear,
}

impl StyleClassifier {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        n_styles: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Classifier;
        Self {
            hidden: Linear::new(store, "cls.hidden", g, dim, hidden, rng),
            out: Linear::new(store, "cls.out", g, hidden, n_styles, rng),
        }
    }

    pub fn n_styles(&self, store: &ParamStore) -> usize {
        self.out.out_dim(store)
    }

    pub fn logits(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, b, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, b, h)
    }
}

/// Mean cross-entropy of the classifier over speech embeddings.
pub fn classification_loss(
    g: &mut Graph,
    b: &Bound,
    cls: &StyleClassifier,
    speech: Var,
    labels: &[StyleId],
) -> Result<Var> {
    if g.value(speech).rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} embeddings, {} labels",
            g.value(speech).rows(),
            labels.len()
        )));
    }
    let logits = cls.logits(g, b, speech)?;
    let targets: Vec<usize> = labels.iter().map(|s| s.index()).collect();
    g.softmax_cross_entropy(logits, &targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_contrast: f64,
    pub lambda_adv: f64,
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_contrast: 1.0,
            lambda_adv: 0.1,
            lambda_cls: 0.5,
        }
    }
}

/// `λ_contrast·L_contrast + λ_adv·L_adv + λ_cls·L_cls`.
pub fn total_loss(w: &LossWeights, l_contrast: f64, l_adv: f64, l_cls: f64) -> f64 {
    w.lambda_contrast * l_contrast + w.lambda_adv * l_adv + w.lambda_cls * l_cls
}

/// Weighted sum of graph terms; `None` terms and zero weights are skipped.
pub fn weighted_sum(g: &mut Graph, terms: &[(f64, Option<Var>)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let Some(v) = v else { continue };
        if w == 0.0 {
            continue;
        }
        let t = g.scalar_mul(v, w)?;
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    Ok(acc)
}
