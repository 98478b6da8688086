//! Finite-difference checks of every autodiff op and every training loss
//! graph, shared by the test suite and the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    analytic_grads, gradcheck_many, gradcheck_signed, Axis, Graph, Tensor, Var, FD_STEP,
};
use crate::corpus::FeatureSequence;
use crate::encoders::Pooling;
use crate::model::{ModelBundle, ModelConfig};
use crate::nn::{Bound, ParamGroup};
use crate::objectives::{
    adversarial_path, classification_loss, contrastive_loss, discriminator_loss, weighted_sum,
    LossWeights,
};
use crate::prompts::{TokenSequence, Vocabulary};
use crate::{Result, StyleId, StyleRegistry};

/// Maximum tolerated relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Values with magnitude in [0.1, 1.5), so relu and clamp kinks stay far
/// outside a finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Reduces `x` to a scalar through a fixed random weighting, so that
/// upstream gradients are not all ones.
fn weighted(g: &mut Graph, x: Var, weights: &[f64]) -> Result<Var> {
    let (r, c) = g.value(x).shape();
    let data = (0..r * c).map(|i| weights[i % weights.len()]).collect();
    let w = g.constant(Tensor::new(r, c, data)?);
    let p = g.mul(x, w)?;
    g.sum(p)
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Runs every op check plus the grad-reversal check.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&mut rng, 3, 4, -1.0, 1.0);
    let b = uniform(&mut rng, 4, 2, -1.0, 1.0);
    let c = uniform(&mut rng, 3, 4, -1.0, 1.0);
    let row = uniform(&mut rng, 1, 4, -1.0, 1.0);
    let pos = uniform(&mut rng, 3, 4, 0.2, 2.0);
    let s = uniform(&mut rng, 1, 1, 0.5, 2.0);
    let kinked = away_from_zero(&mut rng, 3, 4);
    let logits = uniform(&mut rng, 4, 1, -2.0, 2.0);
    let table = uniform(&mut rng, 5, 3, -1.0, 1.0);
    let weights: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();

    let checks: Vec<(&'static str, OpFn, Vec<Tensor>)> = vec![
        (
            "matmul",
            |g, x| g.matmul(x[0], x[1]),
            vec![a.clone(), b.clone()],
        ),
        (
            "matmul_t",
            |g, x| g.matmul_t(x[0], x[1]),
            vec![a.clone(), c.clone()],
        ),
        ("transpose", |g, x| g.transpose(x[0]), vec![a.clone()]),
        ("add", |g, x| g.add(x[0], x[1]), vec![a.clone(), c.clone()]),
        (
            "add_row",
            |g, x| g.add_row(x[0], x[1]),
            vec![a.clone(), row.clone()],
        ),
        ("mul", |g, x| g.mul(x[0], x[1]), vec![a.clone(), c.clone()]),
        (
            "scalar_mul",
            |g, x| g.scalar_mul(x[0], -2.5),
            vec![a.clone()],
        ),
        ("scale", |g, x| g.scale(x[0], x[1]), vec![a.clone(), s]),
        ("relu", |g, x| g.relu(x[0]), vec![kinked.clone()]),
        ("sigmoid", |g, x| g.sigmoid(x[0]), vec![a.clone()]),
        ("exp", |g, x| g.exp(x[0]), vec![a.clone()]),
        ("log", |g, x| g.log(x[0]), vec![pos]),
        ("clamp_max", |g, x| g.clamp_max(x[0], 0.05), vec![kinked]),
        (
            "mean_over_rows",
            |g, x| g.mean_over_axis(x[0], Axis::Rows),
            vec![a.clone()],
        ),
        (
            "mean_over_cols",
            |g, x| g.mean_over_axis(x[0], Axis::Cols),
            vec![a.clone()],
        ),
        ("sum", |g, x| g.sum(x[0]), vec![a.clone()]),
        ("l2_normalize", |g, x| g.l2_normalize(x[0]), vec![a.clone()]),
        (
            "embedding_lookup",
            |g, x| g.embedding_lookup(x[0], &[4, 0, 4]),
            vec![table],
        ),
        (
            "concat",
            |g, x| g.concat(&[x[0], x[1]]),
            vec![a.clone(), row],
        ),
        (
            "softmax_cross_entropy",
            |g, x| {
                let z = g.matmul(x[0], x[1])?;
                g.softmax_cross_entropy(z, &[1, 0, 1])
            },
            vec![a.clone(), b],
        ),
        (
            "binary_cross_entropy",
            |g, x| {
                let p = g.sigmoid(x[0])?;
                g.binary_cross_entropy(p, &[1.0, 0.0, 0.0, 1.0])
            },
            vec![logits],
        ),
    ];

    let mut out = Vec::with_capacity(checks.len() + 1);
    for (name, op, inputs) in checks {
        let err = gradcheck_many(
            |g, x| {
                let y = op(g, x)?;
                weighted(g, y, &weights)
            },
            &inputs,
        )?;
        out.push(CheckResult {
            name,
            max_rel_error: err,
        });
    }
    let err = gradcheck_signed(
        |g, x| {
            let r = g.grad_reverse(x[0])?;
            let e = g.exp(r)?;
            weighted(g, e, &weights)
        },
        std::slice::from_ref(&a),
        &[-1.0],
    )?;
    out.push(CheckResult {
        name: "grad_reverse",
        max_rel_error: err,
    });
    Ok(out)
}

/// A small model with all heads, used for the loss-graph checks.
pub fn tiny_model(seed: u64) -> Result<ModelBundle> {
    let registry = StyleRegistry::new(["angry", "calm", "sad"])?;
    let vocab = Vocabulary::from_tokens(
        ["angry", "calm", "is", "sad", "speech", "that"]
            .map(String::from)
            .to_vec(),
    )?;
    let config = ModelConfig {
        n_mels: 4,
        speech_hidden: 5,
        text_hidden: 4,
        dim: 3,
        disc_hidden: 4,
        cls_hidden: 4,
        pooling: Pooling::Mean,
        tau_init: 0.5,
        discriminator: true,
        seed,
    };
    let mut model = ModelBundle::new(config, registry, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
    let std: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
    model
        .speech
        .set_normalization(&mut model.store, &mean, &std)?;
    // zero-initialized biases would put dead-relu frames exactly on the kink
    let biases: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".bias"))
        .map(|(id, _)| id)
        .collect();
    for id in biases {
        for v in model.store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    Ok(model)
}

struct LossBatch {
    feats: Vec<FeatureSequence>,
    tokens: Vec<TokenSequence>,
    labels: Vec<StyleId>,
}

fn loss_batch(rng: &mut ChaCha8Rng) -> Result<LossBatch> {
    let feats = (0..3)
        .map(|i| {
            let frames = 2 + i;
            let v = (0..frames * 4)
                .map(|_| rng.random_range(-2.0f32..2.0))
                .collect();
            FeatureSequence::new(v, 4, 0.01)
        })
        .collect::<Result<Vec<_>>>()?;
    let tokens = [vec![5, 6, 3, 1], vec![2, 5], vec![4, 4, 0]]
        .into_iter()
        .map(TokenSequence::new)
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBatch {
        feats,
        tokens,
        labels: vec![StyleId(0), StyleId(2), StyleId(1)],
    })
}

#[derive(Clone, Copy)]
enum Objective {
    Contrastive,
    Discriminator,
    Adversarial,
    Classification,
    Total,
}

fn objective(
    model: &ModelBundle,
    batch: &LossBatch,
    which: Objective,
    g: &mut Graph,
    b: &Bound,
) -> Result<Var> {
    let feats: Vec<&FeatureSequence> = batch.feats.iter().collect();
    let es = model.speech.forward_batch(g, b, &feats)?;
    let et = model.text.forward_batch(g, b, &batch.tokens)?;
    let disc = model
        .discriminator
        .as_ref()
        .expect("tiny model has a discriminator");
    let contrast = |g: &mut Graph| -> Result<Var> {
        let s = model.temperature.logit_scale(g, b)?;
        contrastive_loss(g, es, et, s)
    };
    match which {
        Objective::Contrastive => contrast(g),
        Objective::Discriminator => discriminator_loss(g, b, disc, es, et),
        Objective::Adversarial => adversarial_path(g, b, disc, es, et),
        Objective::Classification => {
            classification_loss(g, b, &model.classifier, es, &batch.labels)
        }
        Objective::Total => {
            let w = LossWeights::default();
            let c = contrast(g)?;
            let a = adversarial_path(g, b, disc, es, et)?;
            let l = classification_loss(g, b, &model.classifier, es, &batch.labels)?;
            let total = weighted_sum(
                g,
                &[
                    (w.lambda_contrast, Some(c)),
                    (w.lambda_adv, Some(a)),
                    (w.lambda_cls, Some(l)),
                ],
            )?;
            Ok(total.expect("all weights are nonzero"))
        }
    }
}

/// Differentiable parameters of the tiny model. Feature statistics are
/// fixed inputs and enter the graph as constants.
struct Checked<'a> {
    model: &'a ModelBundle,
    batch: LossBatch,
    /// Store indices of the checked parameters.
    slots: Vec<usize>,
    values: Vec<Tensor>,
    groups: Vec<ParamGroup>,
}

impl<'a> Checked<'a> {
    fn new(model: &'a ModelBundle, batch: LossBatch) -> Self {
        let mut slots = Vec::new();
        let mut values = Vec::new();
        let mut groups = Vec::new();
        for (id, p) in model.store.iter() {
            if p.group != ParamGroup::FeatureNorm {
                slots.push(id.index());
                values.push(p.value.clone());
                groups.push(p.group);
            }
        }
        Self {
            model,
            batch,
            slots,
            values,
            groups,
        }
    }

    fn eval(&self, which: Objective, g: &mut Graph, vars: &[Var]) -> Result<Var> {
        let mut all = Vec::with_capacity(self.model.store.len());
        let mut next = vars.iter();
        for (id, p) in self.model.store.iter() {
            if self.slots.contains(&id.index()) {
                all.push(*next.next().expect("one var per checked slot"));
            } else {
                all.push(g.constant(p.value.clone()));
            }
        }
        objective(self.model, &self.batch, which, g, &Bound::from_vars(all))
    }

    fn check(&self, which: Objective, signs: &[f64]) -> Result<f64> {
        gradcheck_signed(|g, v| self.eval(which, g, v), &self.values, signs)
    }

    fn numeric(&self, which: Objective, k: usize, i: usize) -> Result<f64> {
        let at = |h: f64| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = self
                .values
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    let mut x = x.clone();
                    if j == k {
                        x.data_mut()[i] += h;
                    }
                    g.leaf(x, false)
                })
                .collect();
            let out = self.eval(which, &mut g, &vars)?;
            g.value(out).item()
        };
        Ok((at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP))
    }

    /// The full objective mixes plain and reversed paths, so its numeric
    /// reference is assembled from parts:
    /// `λc·∂Lc + λcls·∂Lcls + λadv·s·∂L_disc`, with `s = +1` for the
    /// discriminator and `-1` for everything below the reversal.
    fn check_total(&self) -> Result<f64> {
        let w = LossWeights::default();
        let analytic = analytic_grads(
            &|g: &mut Graph, v: &[Var]| self.eval(Objective::Total, g, v),
            &self.values,
        )?;
        let mut worst = 0.0f64;
        for (k, grads) in analytic.iter().enumerate() {
            let s = adversarial_sign(self.groups[k]);
            for (i, a) in grads.iter().enumerate() {
                let numeric = w.lambda_contrast * self.numeric(Objective::Contrastive, k, i)?
                    + w.lambda_cls * self.numeric(Objective::Classification, k, i)?
                    + w.lambda_adv * s * self.numeric(Objective::Discriminator, k, i)?;
                worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
            }
        }
        Ok(worst)
    }
}

fn adversarial_sign(group: ParamGroup) -> f64 {
    if group == ParamGroup::Discriminator {
        1.0
    } else {
        -1.0
    }
}

/// Checks each training loss against every differentiable parameter of a
/// tiny model.
pub fn loss_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let model = tiny_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    let checked = Checked::new(&model, loss_batch(&mut rng)?);
    let plain = vec![1.0; checked.values.len()];
    let reversed: Vec<f64> = checked
        .groups
        .iter()
        .map(|&g| adversarial_sign(g))
        .collect();
    Ok(vec![
        CheckResult {
            name: "contrastive_loss",
            max_rel_error: checked.check(Objective::Contrastive, &plain)?,
        },
        CheckResult {
            name: "discriminator_loss",
            max_rel_error: checked.check(Objective::Discriminator, &plain)?,
        },
        CheckResult {
            name: "adversarial_path",
            max_rel_error: checked.check(Objective::Adversarial, &reversed)?,
        },
        CheckResult {
            name: "classification_loss",
            max_rel_error: checked.check(Objective::Classification, &plain)?,
        },
        CheckResult {
            name: "total_objective",
            max_rel_error: checked.check_total()?,
        },
    ])
}

/// Op checks followed by loss checks.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_suite(seed)?;
    out.extend(loss_suite(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for r in full_suite(3).unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn a_wrong_sign_is_caught() {
        let model = tiny_model(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let checked = Checked::new(&model, loss_batch(&mut rng).unwrap());
        let plain = vec![1.0; checked.values.len()];
        assert!(checked.check(Objective::Adversarial, &plain).unwrap() > 1e-3);
    }
}
