//! Persistent speech-embedding index with exact cosine top-k search.
//!
//! File layout (little-endian): `ESRX`, u32 version, u32 d, u64 rows, then
//! per row a u16 id length, the UTF-8 id and d f32 values. Metadata lives in
//! a JSON sidecar at `<path>.meta.json`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{crop_to_max, CropMode, MelExtractor, Utterance};
use crate::encoders::{Embedding, Modality};
use crate::model::ModelBundle;
use crate::{Error, Result, StyleRegistry};

pub const INDEX_MAGIC: [u8; 4] = *b"ESRX";
pub const INDEX_VERSION: u32 = 1;

/// Rows whose stored norm is further than this from 1 are re-normalized on
/// load. Well-formed files are within f32 rounding, so loading leaves them
/// bit-identical.
pub const RENORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub style: Option<String>,
    pub duration_s: f64,
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    rows_by_id: HashMap<String, usize>,
    meta: BTreeMap<String, RowMeta>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            rows_by_id: HashMap::new(),
            meta: BTreeMap::new(),
        }
    }

    /// Appends a row; the vector is normalized in double precision, then
    /// stored as f32.
    pub fn push(
        &mut self,
        id: impl Into<String>,
        vector: &[f64],
        meta: Option<RowMeta>,
    ) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::shape(format!(
                "index dim {} got vector of {}",
                self.dim,
                vector.len()
            )));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::Format(format!(
                "id of {} bytes is too long",
                id.len()
            )));
        }
        if self.rows_by_id.contains_key(&id) {
            return Err(Error::Format(format!("duplicate index id {id:?}")));
        }
        let n = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() || n <= 1e-12 {
            return Err(Error::DegenerateInput(format!("row {id} has norm {n}")));
        }
        self.data.extend(vector.iter().map(|v| (v / n) as f32));
        self.rows_by_id.insert(id.clone(), self.ids.len());
        if let Some(m) = meta {
            self.meta.insert(id.clone(), m);
        }
        self.ids.push(id);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of(&self, id: &str) -> Result<usize> {
        self.rows_by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::Lookup {
                what: "index id",
                key: id.to_string(),
            })
    }

    pub fn vector(&self, id: &str) -> Result<&[f32]> {
        Ok(self.row(self.row_of(id)?))
    }

    pub fn meta(&self, id: &str) -> Option<&RowMeta> {
        self.meta.get(id)
    }

    pub fn metadata(&self) -> &BTreeMap<String, RowMeta> {
        &self.meta
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::shape(format!(
                "query dim {} vs index dim {}",
                q.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Score of row `i` against `q`; the single scoring routine behind every
    /// search path.
    pub fn score_row(&self, q: &[f64], i: usize) -> f64 {
        row_dot(q, self.row(i))
    }

    pub fn similarities(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.check_query(q)?;
        Ok((0..self.len()).map(|i| self.score_row(q, i)).collect())
    }

    /// `|queries| × rows` score matrix.
    pub fn batch_similarities(&self, queries: &[Embedding]) -> Result<Vec<Vec<f64>>> {
        queries
            .iter()
            .map(|q| self.similarities(q.vector()))
            .collect()
    }

    /// Exact top-k by descending score, ties broken by ascending id. Rows
    /// scoring below `threshold` are dropped, so fewer than `k` may return.
    pub fn query(&self, q: &Embedding, k: usize, threshold: Option<f64>) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        let scores = self.similarities(q.vector())?;
        let mut cand: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| threshold.is_none_or(|t| s >= t))
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| {
            rank_order(a.1, &self.ids[a.0], b.1, &self.ids[b.0])
        };
        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_unstable_by(cmp);
        Ok(cand
            .into_iter()
            .map(|(i, score)| Hit {
                id: self.ids[i].clone(),
                score,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * (2 + 16 + 4 * self.dim));
        out.extend_from_slice(&INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in self.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>("index magic")?;
        if magic != INDEX_MAGIC {
            return Err(Error::BadMagic {
                expected: INDEX_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("index version")?;
        if version != INDEX_VERSION {
            return Err(Error::VersionMismatch {
                expected: INDEX_VERSION,
                found: version,
            });
        }
        let dim = r.u32("index dim")? as usize;
        let rows = r.u64("row count")?;
        let mut index = Self::new(dim);
        for row in 0..rows {
            let len = r.u16("id length")? as usize;
            let id = std::str::from_utf8(r.take(len, "row id")?)
                .map_err(|_| Error::Format(format!("row {row} id is not UTF-8")))?
                .to_string();
            let raw = r.take(4 * dim, "row vector")?;
            let mut v: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if !n.is_finite() || n <= 1e-12 {
                return Err(Error::Format(format!("row {id} has norm {n}")));
            }
            if (n - 1.0).abs() > RENORM_TOL {
                v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
            }
            if index
                .rows_by_id
                .insert(id.clone(), index.ids.len())
                .is_some()
            {
                return Err(Error::Format(format!("duplicate index id {id:?}")));
            }
            index.ids.push(id);
            index.data.extend(v);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after index",
                r.remaining()
            )));
        }
        Ok(index)
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta.json");
        PathBuf::from(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let meta_path = Self::meta_path(path);
        let json = serde_json::to_vec_pretty(&self.meta)?;
        std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
    }

    /// Loads an index and, if present, its metadata sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut index = Self::from_bytes(&bytes)?;
        let meta_path = Self::meta_path(path);
        if meta_path.exists() {
            let text = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            index.meta = serde_json::from_slice(&text)?;
        }
        Ok(index)
    }
}

fn row_dot(q: &[f64], row: &[f32]) -> f64 {
    q.iter().zip(row).map(|(a, &b)| a * b as f64).sum()
}

/// Ranking order: higher score first, then ascending id.
pub fn rank_order(score_a: f64, id_a: &str, score_b: f64, id_b: &str) -> Ordering {
    score_b.total_cmp(&score_a).then_with(|| id_a.cmp(id_b))
}

/// Rows that could not be encoded while building an index.
#[derive(Debug, Default)]
pub struct BuildReport {
    pub skipped: Vec<(String, Error)>,
}

/// Encodes every utterance (leading crop of at most `max_segment_s`) into a
/// new index. Utterances that fail to encode are skipped with a warning.
pub fn build_index(
    model: &ModelBundle,
    corpus: &[Utterance],
    sources: &BTreeMap<String, PathBuf>,
    extractor: &MelExtractor,
    max_segment_s: f64,
) -> Result<(EmbeddingIndex, BuildReport)> {
    let mut index = EmbeddingIndex::new(model.dim());
    let mut report = BuildReport::default();
    let registry: &StyleRegistry = &model.registry;
    for u in corpus {
        let embedded = extractor
            .extract(&crop_to_max(u, max_segment_s, CropMode::Leading).samples)
            .and_then(|f| model.encode_speech(&f));
        let e = match embedded {
            Ok(e) => e,
            Err(err) => {
                log::warn!("skipping {}: {err}", u.id);
                report.skipped.push((u.id.clone(), err));
                continue;
            }
        };
        let style = u
            .style
            .map(|s| registry.name(s).map(str::to_string))
            .transpose()?;
        let meta = RowMeta {
            style,
            duration_s: u.duration_s(),
            path: sources.get(&u.id).map(|p| p.to_string_lossy().into_owned()),
        };
        index.push(u.id.clone(), e.vector(), Some(meta))?;
    }
    Ok((index, report))
}

/// Index rows as speech embeddings (f32 values widened to f64).
pub fn row_embedding(index: &EmbeddingIndex, i: usize) -> Result<Embedding> {
    let v: Vec<f64> = index.row(i).iter().map(|&x| x as f64).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Embedding::new(v.into_iter().map(|x| x / n).collect(), Modality::Speech)
}

/// Bounds-checked little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec(), Modality::Text).unwrap()
    }

    fn ab() -> EmbeddingIndex {
        let mut ix = EmbeddingIndex::new(2);
        ix.push("a", &[1.0, 0.0], None).unwrap();
        ix.push("b", &[0.0, 1.0], None).unwrap();
        ix
    }

    #[test]
    fn orthogonal_pair() {
        let ix = ab();
        let q = emb(&[1.0, 0.0]);
        assert_eq!(
            ix.query(&q, 1, None).unwrap(),
            vec![Hit {
                id: "a".into(),
                score: 1.0
            }]
        );
        assert_eq!(ix.query(&q, 2, Some(0.5)).unwrap().len(), 1);
        assert_eq!(ix.query(&q, 5, None).unwrap().len(), 2);
        assert!(matches!(ix.query(&q, 0, None), Err(Error::Contract(_))));
        assert!(matches!(
            ix.query(&emb(&[1.0, 0.0, 0.0]), 1, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ties_break_by_id() {
        let mut ix = EmbeddingIndex::new(2);
        for id in ["c", "a", "b"] {
            ix.push(id, &[0.6, 0.8], None).unwrap();
        }
        let ids: Vec<_> = ix
            .query(&emb(&[1.0, 0.0]), 2, None)
            .unwrap()
            .into_iter()
            .map(|h| h.id)
            .collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn push_validation() {
        let mut ix = ab();
        assert!(ix.push("a", &[1.0, 0.0], None).is_err());
        assert!(matches!(
            ix.push("z", &[0.0, 0.0], None),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(ix.push("z", &[1.0], None), Err(Error::Shape(_))));
        ix.push("c", &[3.0, 4.0], None).unwrap();
        assert_eq!(ix.vector("c").unwrap(), &[0.6f32, 0.8]);
    }

    #[test]
    fn bytes_round_trip_and_errors() {
        let ix = ab();
        let bytes = ix.to_bytes();
        assert_eq!(&bytes[..4], b"ESRX");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 2 * (2 + 1 + 8));
        let back = EmbeddingIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[1] = b'Z';
        assert!(matches!(
            EmbeddingIndex::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            EmbeddingIndex::from_bytes(&bad),
            Err(Error::VersionMismatch { .. })
        ));
        assert!(matches!(
            EmbeddingIndex::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn empty_index_round_trips() {
        let ix = EmbeddingIndex::new(8);
        let back = EmbeddingIndex::from_bytes(&ix.to_bytes()).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 8);
    }

    #[test]
    fn unnormalized_file_rows_are_renormalized() {
        let mut bytes = ab().to_bytes();
        // scale row "a" to (2, 0)
        let off = 20 + 2 + 1;
        bytes[off..off + 4].copy_from_slice(&2f32.to_le_bytes());
        let ix = EmbeddingIndex::from_bytes(&bytes).unwrap();
        assert_eq!(ix.vector("a").unwrap(), &[1.0f32, 0.0]);
    }

    #[test]
    fn batch_matches_single() {
        let ix = ab();
        let qs = [emb(&[0.6, 0.8]), emb(&[0.6, 0.8])];
        let m = ix.batch_similarities(&qs).unwrap();
        assert_eq!(m[0], m[1]);
        assert_eq!(m[0], ix.similarities(&[0.6, 0.8]).unwrap());
    }
}
