//! Labeled synthetic corpus.
//!
//! Each style owns a smooth log-power envelope over the mel axis and a
//! loudness modulation (rate, depth). An utterance perturbs its style's
//! parameters by a style-independent draw scaled by `1 - separability`,
//! then is rendered as random-phase filtered noise by overlap-add.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::features::{hann, hz_to_mel, mel_centers_hz, DEFAULT_N_MELS};
use super::Utterance;
use crate::{Error, Result, StyleId, StyleRegistry, SAMPLE_RATE};

const SYNTH_FFT: usize = 512;
const SYNTH_HOP: usize = 160;
const ENVELOPE_HARMONICS: usize = 4;
const OUTPUT_GAIN: f64 = 0.12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub styles: StyleRegistry,
    pub utterances_per_style: usize,
    pub duration_range_s: (f64, f64),
    pub separability: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            styles: StyleRegistry::default(),
            utterances_per_style: 60,
            duration_range_s: (0.5, 12.0),
            separability: 0.9,
            seed: 7,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.duration_range_s;
        if !(lo >= 0.5 && hi <= 12.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "duration range ({lo}, {hi}) must satisfy 0.5 <= min <= max <= 12"
            )));
        }
        if !(self.separability > 0.0 && self.separability <= 1.0) {
            return Err(Error::Config(format!(
                "separability {} must lie in (0, 1]",
                self.separability
            )));
        }
        if self.utterances_per_style == 0 {
            return Err(Error::Config(
                "utterances_per_style must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Smooth curve over the mel axis: a tilt plus a few cosine harmonics.
#[derive(Debug, Clone)]
struct Envelope {
    tilt: f64,
    harmonics: [(f64, f64); ENVELOPE_HARMONICS],
}

impl Envelope {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let tilt = 2.0 * normal(rng);
        let mut harmonics = [(0.0, 0.0); ENVELOPE_HARMONICS];
        for h in harmonics.iter_mut() {
            *h = (normal(rng), rng.random_range(0.0..std::f64::consts::TAU));
        }
        Self { tilt, harmonics }
    }

    /// Value at normalized mel position `x` in [0, 1].
    fn at(&self, x: f64) -> f64 {
        let mut v = self.tilt * (x - 0.5);
        for (j, (a, phase)) in self.harmonics.iter().enumerate() {
            v += a * (std::f64::consts::PI * (j + 1) as f64 * x + phase).cos();
        }
        v
    }
}

#[derive(Debug, Clone)]
struct StylePrototype {
    envelope: Envelope,
    mod_rate_hz: f64,
    mod_depth: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn prototypes(n_styles: usize, seed: u64) -> Vec<StylePrototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
    (0..n_styles)
        .map(|_| StylePrototype {
            envelope: Envelope::draw(&mut rng),
            mod_rate_hz: rng.random_range(1.5..7.0),
            mod_depth: rng.random_range(0.0..1.5),
        })
        .collect()
}

/// Generates `utterances_per_style` utterances for every style, ids `<style>_<nnn>`.
pub fn synth_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let protos = prototypes(spec.styles.len(), spec.seed);
    let spread = 1.0 - spec.separability;
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(SYNTH_FFT);
    let window = hann(SYNTH_FFT);
    let n_bins = SYNTH_FFT / 2 + 1;
    // mel position of every FFT bin, normalized to [0, 1] across the channel centers
    let centers: Vec<f64> = mel_centers_hz(DEFAULT_N_MELS, SAMPLE_RATE)
        .into_iter()
        .map(hz_to_mel)
        .collect();
    let (c0, c1) = (centers[0], centers[centers.len() - 1]);
    let bin_pos: Vec<f64> = (0..n_bins)
        .map(|k| {
            let hz = k as f64 * SAMPLE_RATE as f64 / SYNTH_FFT as f64;
            ((hz_to_mel(hz) - c0) / (c1 - c0)).clamp(0.0, 1.0)
        })
        .collect();

    let mut out = Vec::with_capacity(spec.styles.len() * spec.utterances_per_style);
    for (s, proto) in protos.iter().enumerate() {
        let style = StyleId(s as u16);
        let name = spec.styles.name(style)?;
        for i in 0..spec.utterances_per_style {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                spec.seed,
                1 + (s as u64) * 1_000_003 + i as u64,
            ));
            let (lo, hi) = spec.duration_range_s;
            let duration = if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            };
            let n = ((duration * SAMPLE_RATE as f64).round() as usize).max(1);
            // style-independent perturbation, scaled by the spread
            let offset = Envelope::draw(&mut rng);
            let rate = proto.mod_rate_hz * (1.0 + spread * 0.3 * normal(&mut rng)).max(0.1);
            let depth = (proto.mod_depth + spread * 0.5 * normal(&mut rng)).max(0.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let log_power: Vec<f64> = bin_pos
                .iter()
                .map(|&x| proto.envelope.at(x) + spread * offset.at(x))
                .collect();

            let mut signal = vec![0.0f64; n + SYNTH_FFT];
            let mut buf = vec![Complex::new(0.0, 0.0); SYNTH_FFT];
            let n_frames = n.div_ceil(SYNTH_HOP) + 1;
            for t in 0..n_frames {
                let time_s = (t * SYNTH_HOP) as f64 / SAMPLE_RATE as f64;
                let gain = depth * (std::f64::consts::TAU * rate * time_s + phase).sin();
                for k in 0..n_bins {
                    let amp = (0.5 * (log_power[k] + gain)).exp();
                    let c = if k == 0 || k == n_bins - 1 {
                        Complex::new(amp * if rng.random::<bool>() { 1.0 } else { -1.0 }, 0.0)
                    } else {
                        Complex::from_polar(amp, rng.random_range(0.0..std::f64::consts::TAU))
                    };
                    buf[k] = c;
                    if k > 0 && k < n_bins - 1 {
                        buf[SYNTH_FFT - k] = c.conj();
                    }
                }
                ifft.process(&mut buf);
                let start = t * SYNTH_HOP;
                for (j, c) in buf.iter().enumerate() {
                    if start + j < signal.len() {
                        signal[start + j] += c.re * window[j];
                    }
                }
            }
            let samples: Vec<f32> = signal[..n]
                .iter()
                .map(|&v| (v * OUTPUT_GAIN / SYNTH_FFT as f64).clamp(-1.0, 1.0) as f32)
                .collect();
            out.push(Utterance::new(
                format!("{name}_{i:03}"),
                samples,
                Some(style),
            )?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(sep: f64, seed: u64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            styles: StyleRegistry::new(["a", "b", "c"]).unwrap(),
            utterances_per_style: 4,
            duration_range_s: (0.5, 1.0),
            separability: sep,
            seed,
        }
    }

    #[test]
    fn counts_and_ids() {
        let c = synth_corpus(&small(0.9, 1)).unwrap();
        assert_eq!(c.len(), 12);
        assert_eq!(c[0].id, "a_000");
        assert_eq!(c[11].id, "c_003");
        assert!(c.iter().all(|u| (0.5..=1.0).contains(&u.duration_s())));
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            synth_corpus(&small(0.5, 3)).unwrap(),
            synth_corpus(&small(0.5, 3)).unwrap()
        );
        assert_ne!(
            synth_corpus(&small(0.5, 3)).unwrap(),
            synth_corpus(&small(0.5, 4)).unwrap()
        );
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = small(0.5, 1);
        s.separability = 0.0;
        assert!(synth_corpus(&s).is_err());
        s.separability = 1.0;
        s.duration_range_s = (0.2, 1.0);
        assert!(synth_corpus(&s).is_err());
        s.duration_range_s = (1.0, 13.0);
        assert!(synth_corpus(&s).is_err());
    }

    #[test]
    fn rarely_clips() {
        let c = synth_corpus(&small(0.5, 9)).unwrap();
        let total: usize = c.iter().map(|u| u.samples.len()).sum();
        let clipped: usize = c
            .iter()
            .flat_map(|u| &u.samples)
            .filter(|s| s.abs() >= 1.0)
            .count();
        assert!((clipped as f64) < 1e-3 * total as f64, "{clipped}/{total}");
    }
}
