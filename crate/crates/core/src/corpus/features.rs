use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::Utterance;
use crate::{Error, Result, SAMPLE_RATE};

pub const DEFAULT_N_MELS: usize = 40;
pub const DEFAULT_WINDOW_S: f64 = 0.025;
pub const DEFAULT_HOP_S: f64 = 0.010;
/// Floor added before the log.
pub const LOG_FLOOR: f64 = 1e-6;

/// Log-mel frames, row-major `n_frames × n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<f32>,
    n_frames: usize,
    n_mels: usize,
    frame_hop_s: f64,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f32>, n_mels: usize, frame_hop_s: f64) -> Result<Self> {
        if n_mels == 0 || frames.is_empty() || !frames.len().is_multiple_of(n_mels) {
            return Err(Error::shape(format!(
                "{} values do not form whole frames of {n_mels} mels",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite feature value".into()));
        }
        Ok(Self {
            n_frames: frames.len() / n_mels,
            frames,
            n_mels,
            frame_hop_s,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frame_hop_s(&self) -> f64 {
        self.frame_hop_s
    }

    pub fn values(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Contiguous frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.n_frames {
            return Err(Error::Bounds {
                what: "frame range end",
                index: start + len,
                len: self.n_frames,
            });
        }
        Ok(Self {
            frames: self.frames[start * self.n_mels..(start + len) * self.n_mels].to_vec(),
            n_frames: len,
            n_mels: self.n_mels,
            frame_hop_s: self.frame_hop_s,
        })
    }

    /// Per-mel average over frames.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_mels];
        for t in 0..self.n_frames {
            for (a, &v) in acc.iter_mut().zip(self.frame(t)) {
                *a += v as f64;
            }
        }
        acc.iter_mut().for_each(|a| *a /= self.n_frames as f64);
        acc
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters spanning 0 Hz to Nyquist, peak 1, shape
/// `n_mels × (n_fft / 2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let max_mel = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(max_mel * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Center frequency in Hz of every mel channel.
pub fn mel_centers_hz(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let max_mel = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(max_mel * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Log-mel analysis settings. Window and hop are stored in samples.
#[derive(Clone)]
pub struct MelExtractor {
    n_mels: usize,
    window: usize,
    hop: usize,
    n_fft: usize,
    hann: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor")
            .field("n_mels", &self.n_mels)
            .field("window", &self.window)
            .field("hop", &self.hop)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_N_MELS, DEFAULT_WINDOW_S, DEFAULT_HOP_S)
            .expect("default settings are valid")
    }
}

impl MelExtractor {
    pub fn new(n_mels: usize, window_s: f64, hop_s: f64) -> Result<Self> {
        let window = (window_s * SAMPLE_RATE as f64).round() as usize;
        let hop = (hop_s * SAMPLE_RATE as f64).round() as usize;
        if n_mels == 0 || window == 0 || hop == 0 {
            return Err(Error::Config(format!(
                "invalid mel settings: n_mels={n_mels} window={window} hop={hop}"
            )));
        }
        let n_fft = window.next_power_of_two();
        Ok(Self {
            n_mels,
            window,
            hop,
            n_fft,
            hann: hann(window),
            filters: mel_filterbank(n_mels, n_fft, SAMPLE_RATE),
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    /// `floor((n - window) / hop) + 1`, or 0 when shorter than a window.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.window {
            0
        } else {
            (n_samples - self.window) / self.hop + 1
        }
    }

    pub fn extract(&self, samples: &[f32]) -> Result<FeatureSequence> {
        let n_frames = self.frame_count(samples.len());
        if n_frames == 0 {
            return Err(Error::TooShort {
                samples: samples.len(),
                window: self.window,
            });
        }
        let n_bins = self.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; n_bins];
        let mut out = Vec::with_capacity(n_frames * self.n_mels);
        for t in 0..n_frames {
            let frame = &samples[t * self.hop..t * self.hop + self.window];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = match frame.get(i) {
                    Some(&s) => Complex::new(s as f64 * self.hann[i], 0.0),
                    None => Complex::new(0.0, 0.0),
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push((e + LOG_FLOOR).ln() as f32);
            }
        }
        FeatureSequence::new(out, self.n_mels, self.hop as f64 / SAMPLE_RATE as f64)
    }
}

/// Log-mel features of an utterance with the given settings.
pub fn mel_features(
    u: &Utterance,
    n_mels: usize,
    window_s: f64,
    hop_s: f64,
) -> Result<FeatureSequence> {
    MelExtractor::new(n_mels, window_s, hop_s)?.extract(&u.samples)
}
