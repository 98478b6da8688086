//! Audio ingestion, log-mel features, synthetic corpora and splits.

mod audio;
mod features;
mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use audio::{
    crop_to_max, load_wav, resample_linear, segment_samples, write_wav, CropMode, Utterance,
};
pub use features::{
    hann, hz_to_mel, mel_centers_hz, mel_features, mel_filterbank, mel_to_hz, FeatureSequence,
    MelExtractor, DEFAULT_HOP_S, DEFAULT_N_MELS, DEFAULT_WINDOW_S, LOG_FLOOR,
};
pub use synth::{synth_corpus, SyntheticCorpusSpec};

use crate::{Error, Result, StyleId, StyleRegistry};

/// Stratified, seeded partition into (train, val, test).
///
/// Per style, `round(n * f_train)` go to train and `round(n * f_val)` to
/// validation; the rest go to test. Each part keeps the input order.
pub fn split_corpus(
    corpus: &[Utterance],
    fractions: (f64, f64, f64),
    seed: u64,
    registry: &StyleRegistry,
) -> Result<(Vec<Utterance>, Vec<Utterance>, Vec<Utterance>)> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let mut by_style: BTreeMap<StyleId, Vec<usize>> = BTreeMap::new();
    for (i, u) in corpus.iter().enumerate() {
        let style = u.style.ok_or_else(|| {
            Error::Config(format!(
                "utterance {} has no style label to stratify on",
                u.id
            ))
        })?;
        by_style.entry(style).or_default().push(i);
    }
    let mut part = vec![2u8; corpus.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (style, mut idx) in by_style {
        let n = idx.len();
        if n < 3 {
            let name = registry.name(style).unwrap_or("?").to_string();
            return Err(Error::Stratification {
                style: name,
                count: n,
            });
        }
        idx.shuffle(&mut rng);
        let n_train = ((n as f64 * ft).round() as usize).min(n);
        let n_val = ((n as f64 * fv).round() as usize).min(n - n_train);
        for (j, &i) in idx.iter().enumerate() {
            part[i] = if j < n_train {
                0
            } else if j < n_train + n_val {
                1
            } else {
                2
            };
        }
    }
    let pick = |p: u8| -> Vec<Utterance> {
        corpus
            .iter()
            .zip(&part)
            .filter(|(_, &q)| q == p)
            .map(|(u, _)| u.clone())
            .collect()
    };
    Ok((pick(0), pick(1), pick(2)))
}

/// One manifest entry. `path` is relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub style: Option<String>,
    pub duration_s: f64,
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every utterance as `<dir>/<id>.wav` plus `<dir>/manifest.json`.
pub fn save_corpus(dir: &Path, corpus: &[Utterance], registry: &StyleRegistry) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::new();
    for u in corpus {
        let file = format!("{}.wav", u.id);
        write_wav(&dir.join(&file), &u.samples)?;
        let style = u
            .style
            .map(|s| registry.name(s).map(str::to_string))
            .transpose()?;
        let prev = manifest.insert(
            u.id.clone(),
            ManifestEntry {
                path: file,
                style,
                duration_s: u.duration_s(),
            },
        );
        if prev.is_some() {
            return Err(Error::Config(format!("duplicate utterance id {}", u.id)));
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Resolves a manifest entry's audio path against the manifest location.
pub fn resolve_entry_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// A loaded corpus together with the source path of each utterance.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub utterances: Vec<Utterance>,
    pub paths: Vec<PathBuf>,
}

/// Loads every manifest entry (in id order), resolving style names through `registry`.
pub fn load_corpus(manifest_path: &Path, registry: &StyleRegistry) -> Result<LoadedCorpus> {
    let manifest = read_manifest(manifest_path)?;
    let mut utterances = Vec::with_capacity(manifest.len());
    let mut paths = Vec::with_capacity(manifest.len());
    for (id, entry) in &manifest {
        let path = resolve_entry_path(manifest_path, entry);
        let mut u = load_wav(&path)?;
        u.id = id.clone();
        u.style = entry.style.as_deref().map(|s| registry.id(s)).transpose()?;
        utterances.push(u);
        paths.push(path);
    }
    Ok(LoadedCorpus { utterances, paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn labeled(per_style: usize, styles: usize) -> Vec<Utterance> {
        (0..styles)
            .flat_map(|s| {
                (0..per_style).map(move |i| {
                    Utterance::new(format!("s{s}_{i}"), vec![0.0; 10], Some(StyleId(s as u16)))
                        .unwrap()
                })
            })
            .collect()
    }

    #[test]
    fn split_60_per_style() {
        let reg = StyleRegistry::default();
        let c = labeled(60, 22);
        let (tr, va, te) = split_corpus(&c, (0.8, 0.1, 0.1), 3, &reg).unwrap();
        for s in 0..22u16 {
            let count = |v: &[Utterance]| v.iter().filter(|u| u.style == Some(StyleId(s))).count();
            assert_eq!((count(&tr), count(&va), count(&te)), (48, 6, 6));
        }
        let ids = |v: &[Utterance]| v.iter().map(|u| u.id.clone()).collect::<BTreeSet<_>>();
        let (a, b, d) = (ids(&tr), ids(&va), ids(&te));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&d) && b.is_disjoint(&d));
        let all: BTreeSet<_> = a.union(&b).chain(d.iter()).cloned().collect();
        assert_eq!(all, ids(&c));
    }

    #[test]
    fn split_errors() {
        let reg = StyleRegistry::default();
        let c = labeled(2, 1);
        assert!(matches!(
            split_corpus(&c, (0.8, 0.1, 0.1), 0, &reg),
            Err(Error::Stratification { count: 2, .. })
        ));
        assert!(split_corpus(&labeled(5, 1), (0.8, 0.1, 0.2), 0, &reg).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let reg = StyleRegistry::default();
        let dir = tempfile::tempdir().unwrap();
        let corpus = vec![
            Utterance::new("angry_000", vec![0.1; 800], Some(StyleId(0))).unwrap(),
            Utterance::new("plain", vec![-0.2; 400], None).unwrap(),
        ];
        let m = save_corpus(dir.path(), &corpus, &reg).unwrap();
        let manifest = read_manifest(&m).unwrap();
        assert_eq!(manifest["angry_000"].style.as_deref(), Some("angry"));
        assert_eq!(manifest["plain"].duration_s, 400.0 / 16_000.0);
        let loaded = load_corpus(&m, &reg).unwrap();
        assert_eq!(loaded.utterances, corpus);
    }

    proptest::proptest! {
        #[test]
        fn split_is_a_stratified_partition(per in proptest::collection::vec(3usize..30, 1..6), seed in 0u64..100) {
            let reg = StyleRegistry::default();
            let c: Vec<Utterance> = per.iter().enumerate().flat_map(|(s, &n)| {
                (0..n).map(move |i| Utterance::new(format!("{s}-{i}"), vec![0.0], Some(StyleId(s as u16))).unwrap())
            }).collect();
            let (tr, va, te) = split_corpus(&c, (0.7, 0.15, 0.15), seed, &reg).unwrap();
            proptest::prop_assert_eq!(tr.len() + va.len() + te.len(), c.len());
            for (s, &n) in per.iter().enumerate() {
                let k = tr.iter().filter(|u| u.style == Some(StyleId(s as u16))).count();
                proptest::prop_assert!((k as f64 - 0.7 * n as f64).abs() <= 1.0);
            }
        }
    }
}
