//! Speech and text encoders into the joint style space.
//!
//! Speech: per-frame two-layer MLP, temporal mean pool, linear projection,
//! L2 normalization. Text: token embedding lookup, first-token or mean
//! pooling, linear projection, L2 normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Tensor, Var};
use crate::corpus::FeatureSequence;
use crate::nn::{Bound, Linear, ParamGroup, ParamId, ParamStore};
use crate::prompts::TokenSequence;
use crate::{Error, Result};

/// Allowed deviation of an embedding's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Token embeddings start as `U(-TEXT_TABLE_INIT, TEXT_TABLE_INIT)`. Small
/// relative to the distance AdamW can move a weight over a short run, so the
/// table is shaped by training rather than by its random start.
pub const TEXT_TABLE_INIT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Speech,
    Text,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Speech => "speech",
            Modality::Text => "text",
        })
    }
}

/// Unit-norm vector in the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vector: Vec<f64>,
    modality: Modality,
}

impl Embedding {
    pub fn new(vector: Vec<f64>, modality: Modality) -> Result<Self> {
        let n = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::DegenerateInput(format!(
                "embedding norm {n} is not 1"
            )));
        }
        Ok(Self { vector, modality })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Cosine similarity of unit vectors (their dot product).
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "similarity: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(dot(a.vector(), b.vector()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Keep only the first token's embedding.
    FirstToken,
    #[default]
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_token" | "first-token" | "cls" => Ok(Pooling::FirstToken),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::Config(format!("unknown pooling mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeechEncoder {
    pub feat_mean: ParamId,
    pub feat_std: ParamId,
    pub frame1: Linear,
    pub frame2: Linear,
    pub proj: Linear,
}

impl SpeechEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        n_mels: usize,
        hidden: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let feat_mean = store.add(
            "speech.feat_mean",
            ParamGroup::FeatureNorm,
            Tensor::zeros(1, n_mels),
        );
        let feat_std = store.add(
            "speech.feat_std",
            ParamGroup::FeatureNorm,
            Tensor::row_vector(vec![1.0; n_mels]),
        );
        let g = ParamGroup::SpeechEncoder;
        Self {
            feat_mean,
            feat_std,
            frame1: Linear::new(store, "speech.frame1", g, n_mels, hidden, rng),
            frame2: Linear::new(store, "speech.frame2", g, hidden, hidden, rng),
            proj: Linear::new(store, "speech.proj", g, hidden, dim, rng),
        }
    }

    pub fn n_mels(&self, store: &ParamStore) -> usize {
        self.frame1.in_dim(store)
    }

    /// Sets the per-channel standardization applied to input frames.
    pub fn set_normalization(
        &self,
        store: &mut ParamStore,
        mean: &[f64],
        std: &[f64],
    ) -> Result<()> {
        let n = self.n_mels(store);
        if mean.len() != n || std.len() != n {
            return Err(Error::shape("normalization statistics do not match n_mels"));
        }
        if std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::DegenerateInput(
                "feature std must be positive".into(),
            ));
        }
        *store.get_mut(self.feat_mean) = Tensor::row_vector(mean.to_vec());
        *store.get_mut(self.feat_std) = Tensor::row_vector(std.to_vec());
        Ok(())
    }

    /// Pooled, projected but unnormalized output (`1 × d`).
    fn pooled(&self, g: &mut Graph, b: &Bound, feats: &FeatureSequence) -> Result<Var> {
        let n_mels = g.value(b.var(self.feat_mean)).cols();
        if feats.n_mels() != n_mels {
            return Err(Error::shape(format!(
                "speech encoder expects {n_mels} mels, got {}",
                feats.n_mels()
            )));
        }
        let mean = g.value(b.var(self.feat_mean)).data().to_vec();
        let std = g.value(b.var(self.feat_std)).data().to_vec();
        let x: Vec<f64> = feats
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 - mean[i % n_mels]) / std[i % n_mels])
            .collect();
        let x = g.constant(Tensor::new(feats.n_frames(), n_mels, x)?);
        let h = self.frame1.forward(g, b, x)?;
        let h = g.relu(h)?;
        let h = self.frame2.forward(g, b, h)?;
        let h = g.relu(h)?;
        let pooled = g.mean_over_axis(h, Axis::Rows)?;
        self.proj.forward(g, b, pooled)
    }

    /// Unit-norm embedding node (`1 × d`).
    pub fn forward(&self, g: &mut Graph, b: &Bound, feats: &FeatureSequence) -> Result<Var> {
        let z = self.pooled(g, b, feats)?;
        g.l2_normalize(z)
    }

    /// One unit-norm row per input (`N × d`).
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        b: &Bound,
        feats: &[&FeatureSequence],
    ) -> Result<Var> {
        let rows = feats
            .iter()
            .map(|f| self.pooled(g, b, f))
            .collect::<Result<Vec<_>>>()?;
        let z = g.concat(&rows)?;
        g.l2_normalize(z)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEncoder {
    pub table: ParamId,
    pub proj: Linear,
    pub pooling: Pooling,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        hidden: usize,
        dim: usize,
        pooling: Pooling,
        rng: &mut R,
    ) -> Self {
        let bound = TEXT_TABLE_INIT;
        let table = Tensor::new(
            vocab_size,
            hidden,
            (0..vocab_size * hidden)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        )
        .expect("shape matches");
        let table = store.add("text.embedding", ParamGroup::TextEmbedding, table);
        Self {
            table,
            proj: Linear::new(
                store,
                "text.proj",
                ParamGroup::TextProjection,
                hidden,
                dim,
                rng,
            ),
            pooling,
        }
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.get(self.table).rows()
    }

    fn pooled(&self, g: &mut Graph, b: &Bound, tokens: &TokenSequence) -> Result<Var> {
        let ids: Vec<usize> = match self.pooling {
            Pooling::FirstToken => vec![tokens.ids()[0] as usize],
            Pooling::Mean => tokens.ids().iter().map(|&i| i as usize).collect(),
        };
        let e = g.embedding_lookup(b.var(self.table), &ids)?;
        let pooled = match self.pooling {
            Pooling::FirstToken => e,
            Pooling::Mean => g.mean_over_axis(e, Axis::Rows)?,
        };
        self.proj.forward(g, b, pooled)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, tokens: &TokenSequence) -> Result<Var> {
        let z = self.pooled(g, b, tokens)?;
        g.l2_normalize(z)
    }

    pub fn forward_batch(&self, g: &mut Graph, b: &Bound, tokens: &[TokenSequence]) -> Result<Var> {
        let rows = tokens
            .iter()
            .map(|t| self.pooled(g, b, t))
            .collect::<Result<Vec<_>>>()?;
        let z = g.concat(&rows)?;
        g.l2_normalize(z)
    }
}

/// Splits an `N × d` node value into embeddings.
pub fn embeddings_from_rows(t: &Tensor, modality: Modality) -> Result<Vec<Embedding>> {
    (0..t.rows())
        .map(|i| Embedding::new(t.row(i).to_vec(), modality))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn speech_setup() -> (ParamStore, SpeechEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = SpeechEncoder::new(&mut store, 6, 16, 8, &mut rng);
        (store, enc)
    }

    fn feats(frames: &[Vec<f32>]) -> FeatureSequence {
        FeatureSequence::new(frames.concat(), frames[0].len(), 0.01).unwrap()
    }

    fn random_frames(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Vec<Vec<f32>> {
        (0..t)
            .map(|_| (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect())
            .collect()
    }

    fn encode_speech(store: &ParamStore, enc: &SpeechEncoder, f: &FeatureSequence) -> Vec<f64> {
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, store);
        let e = enc.forward(&mut g, &b, f).unwrap();
        g.value(e).data().to_vec()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn speech_embedding_is_unit_norm_and_pool_invariant() {
        let (store, enc) = speech_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = random_frames(&mut rng, 5, 6);
        let e = encode_speech(&store, &enc, &feats(&frames));
        let n: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);

        let doubled: Vec<Vec<f32>> = frames.iter().flat_map(|f| [f.clone(), f.clone()]).collect();
        assert!(max_diff(&e, &encode_speech(&store, &enc, &feats(&doubled))) < 1e-9);

        let mut shuffled = frames.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        assert!(max_diff(&e, &encode_speech(&store, &enc, &feats(&shuffled))) < 1e-9);
        assert_eq!(e, encode_speech(&store, &enc, &feats(&frames)));
    }

    #[test]
    fn single_frame_is_mlp_then_projection() {
        let (store, enc) = speech_setup();
        let frame = vec![0.5f32, -1.0, 0.25, 2.0, 0.0, -0.3];
        let e = encode_speech(&store, &enc, &feats(std::slice::from_ref(&frame)));
        // hand evaluation with plain loops
        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            let w = store.get(l.weight);
            let b = store.get(l.bias);
            (0..w.cols())
                .map(|j| b.data()[j] + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>())
                .collect()
        };
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let x: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
        let h = relu(lin(&enc.frame2, &relu(lin(&enc.frame1, &x))));
        let z = lin(&enc.proj, &h);
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let expect: Vec<f64> = z.iter().map(|v| v / n).collect();
        assert!(max_diff(&e, &expect) < 1e-12);
    }

    #[test]
    fn batch_rows_match_single_encodes() {
        let (store, enc) = speech_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = feats(&random_frames(&mut rng, 3, 6));
        let c = feats(&random_frames(&mut rng, 7, 6));
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &store);
        let batch = enc.forward_batch(&mut g, &b, &[&a, &c]).unwrap();
        let t = g.value(batch).clone();
        assert_eq!(t.row(0), encode_speech(&store, &enc, &a).as_slice());
        assert_eq!(t.row(1), encode_speech(&store, &enc, &c).as_slice());
    }

    #[test]
    fn mel_count_mismatch() {
        let (store, enc) = speech_setup();
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &store);
        let f = FeatureSequence::new(vec![0.0; 10], 5, 0.01).unwrap();
        assert!(matches!(enc.forward(&mut g, &b, &f), Err(Error::Shape(_))));
    }

    fn encode_text(store: &ParamStore, enc: &TextEncoder, ids: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, store);
        let e = enc.forward(&mut g, &b, &TokenSequence::new(ids.to_vec()).unwrap())?;
        Ok(g.value(e).data().to_vec())
    }

    #[test]
    fn text_pooling_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mean = TextEncoder::new(&mut store, 10, 8, 4, Pooling::Mean, &mut rng);
        let a = encode_text(&store, &mean, &[3]).unwrap();
        assert!(max_diff(&a, &encode_text(&store, &mean, &[3, 3]).unwrap()) < 1e-12);
        assert!(max_diff(&a, &encode_text(&store, &mean, &[3, 4]).unwrap()) > 1e-6);

        let first = TextEncoder {
            pooling: Pooling::FirstToken,
            ..mean.clone()
        };
        assert_eq!(
            encode_text(&store, &first, &[3, 5]).unwrap(),
            encode_text(&store, &first, &[3, 7]).unwrap()
        );
        let n: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(matches!(
            encode_text(&store, &mean, &[10]),
            Err(Error::Bounds { .. })
        ));
    }

    #[test]
    fn similarity_basics() {
        let x = Embedding::new(vec![1.0, 0.0, 0.0], Modality::Speech).unwrap();
        let y = Embedding::new(vec![0.0, 1.0, 0.0], Modality::Text).unwrap();
        assert_eq!(similarity(&x, &x).unwrap(), 1.0);
        assert_eq!(similarity(&x, &y).unwrap(), 0.0);
        let z = Embedding::new(vec![1.0, 0.0], Modality::Text).unwrap();
        assert!(similarity(&x, &z).is_err());
        assert!(Embedding::new(vec![2.0, 0.0], Modality::Text).is_err());
    }

    proptest::proptest! {
        #[test]
        fn similarity_is_symmetric(a in proptest::collection::vec(-1.0f64..1.0, 5), b in proptest::collection::vec(-1.0f64..1.0, 5)) {
            let norm = |v: Vec<f64>| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
                v.into_iter().map(|x| x / n).collect::<Vec<_>>()
            };
            let (a, b) = (norm(a), norm(b));
            proptest::prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 0.5);
            proptest::prop_assume!(b.iter().map(|x| x * x).sum::<f64>() > 0.5);
            let ea = Embedding::new(a, Modality::Speech);
            let eb = Embedding::new(b, Modality::Text);
            if let (Ok(ea), Ok(eb)) = (ea, eb) {
                let s = similarity(&ea, &eb).unwrap();
                proptest::prop_assert_eq!(s, similarity(&eb, &ea).unwrap());
                proptest::prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
            }
        }
    }
}
