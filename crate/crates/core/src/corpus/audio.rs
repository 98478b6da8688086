use std::path::Path;

use rand::Rng;

use crate::{Error, Result, StyleId, SAMPLE_RATE};

/// One mono clip at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f32>,
    pub style: Option<StyleId>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, samples: Vec<f32>, style: Option<StyleId>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Format("utterance has no samples".into()));
        }
        Ok(Self {
            id: id.into(),
            samples,
            style,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// Reads a mono RIFF/WAVE file (16-bit PCM or 32-bit float, any rate) and
/// resamples it to 16 kHz. The id is the file stem.
pub fn load_wav(path: &Path) -> Result<Utterance> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    let fmt_err = |e: hound::Error| Error::Format(format!("{}: {e}", path.display()));
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(fmt_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(fmt_err)?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Format(format!("{}: no usable file stem", path.display())))?
        .to_string();
    Utterance::new(id, resample_linear(&samples, spec.sample_rate), None)
}

/// Writes a 32-bit float mono WAV at 16 kHz.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let map = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(map)?;
    for &s in samples {
        w.write_sample(s).map_err(map)?;
    }
    w.finalize().map_err(map)
}

/// Linear-interpolation resampling to [`SAMPLE_RATE`].
pub fn resample_linear(samples: &[f32], from_rate: u32) -> Vec<f32> {
    if from_rate == SAMPLE_RATE || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = from_rate as f64 / SAMPLE_RATE as f64;
    let out_len = ((samples.len() as f64) / ratio).round().max(1.0) as usize;
    let last = samples.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (pos - i0 as f64).clamp(0.0, 1.0);
            (samples[i0] as f64 * (1.0 - frac) + samples[i1] as f64 * frac) as f32
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Uniform random offset drawn from a generator seeded with this value.
    Random(u64),
    /// Keep the leading segment. Used for evaluation.
    Leading,
}

/// Number of samples in a `max_s`-second segment.
pub fn segment_samples(max_s: f64) -> usize {
    (max_s * SAMPLE_RATE as f64).round() as usize
}

/// Crops to at most `max_s` seconds. Shorter utterances are returned unchanged.
pub fn crop_to_max(u: &Utterance, max_s: f64, mode: CropMode) -> Utterance {
    let max = segment_samples(max_s).max(1);
    if u.samples.len() <= max {
        return u.clone();
    }
    let start = match mode {
        CropMode::Leading => 0,
        CropMode::Random(seed) => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            random_offset(&mut rng, u.samples.len() - max)
        }
    };
    Utterance {
        id: u.id.clone(),
        samples: u.samples[start..start + max].to_vec(),
        style: u.style,
    }
}

fn random_offset<R: Rng + ?Sized>(rng: &mut R, max_offset: usize) -> usize {
    rng.random_range(0..=max_offset)
}
