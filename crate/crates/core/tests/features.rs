use std::f64::consts::PI;

use esr_core::corpus::{synth_corpus, MelExtractor, SyntheticCorpusSpec, Utterance};
use esr_core::{StyleId, StyleRegistry};

const SR: f64 = 16_000.0;

fn mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn inv_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Log-mel energies of one frame by a direct O(n²) DFT and independently
/// built triangular filters.
fn oracle_frame(frame: &[f32], n_fft: usize, n_mels: usize) -> Vec<f64> {
    let w = frame.len();
    let x: Vec<f64> = (0..w)
        .map(|n| frame[n] as f64 * (0.5 - 0.5 * (2.0 * PI * n as f64 / w as f64).cos()))
        .collect();
    let power: Vec<f64> = (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re * re + im * im
        })
        .collect();
    let top = mel(SR / 2.0);
    (0..n_mels)
        .map(|m| {
            let edge = |i: usize| inv_mel(top * i as f64 / (n_mels + 1) as f64);
            let (lo, mid, hi) = (edge(m), edge(m + 1), edge(m + 2));
            let e: f64 = power
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let f = k as f64 * SR / n_fft as f64;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    w * p
                })
                .sum();
            (e + 1e-6).ln()
        })
        .collect()
}

#[test]
fn one_second_gives_98_frames_of_40_mels() {
    let f = MelExtractor::default().extract(&vec![0.1; 16_000]).unwrap();
    assert_eq!((f.n_frames(), f.n_mels()), ((16_000 - 400) / 160 + 1, 40));
    assert_eq!(f.n_frames(), 98);
}

#[test]
fn tone_matches_direct_dft_oracle() {
    let ex = MelExtractor::default();
    let tone: Vec<f32> = (0..4_000)
        .map(|n| (0.5 * (2.0 * PI * 1000.0 * n as f64 / SR).sin()) as f32)
        .collect();
    let feats = ex.extract(&tone).unwrap();
    for t in [0, 7, feats.n_frames() - 1] {
        let frame = &tone[t * 160..t * 160 + 400];
        let want = oracle_frame(frame, 512, 40);
        for (m, (&got, want)) in feats.frame(t).iter().zip(&want).enumerate() {
            assert!(
                (got as f64 - want).abs() < 1e-4,
                "frame {t} mel {m}: {got} vs {want}"
            );
        }
        // the loudest channel is the one whose band is centred nearest 1 kHz
        let loudest = (0..40)
            .max_by(|&a, &b| want[a].total_cmp(&want[b]))
            .unwrap();
        let centre = inv_mel(mel(SR / 2.0) * (loudest + 1) as f64 / 41.0);
        let nearest = (1..=40)
            .map(|i| inv_mel(mel(SR / 2.0) * i as f64 / 41.0))
            .map(|c| (c - 1000.0).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(((centre - 1000.0).abs() - nearest).abs() < 1e-9);
        // and it dwarfs channels far from the tone
        assert!(want[loudest] - want[0] > 5.0 && want[loudest] - want[39] > 5.0);
    }
}

fn centroid_accuracy(separability: f64, seed: u64) -> f64 {
    let registry = StyleRegistry::default();
    let spec = SyntheticCorpusSpec {
        utterances_per_style: 12,
        duration_range_s: (0.5, 1.5),
        separability,
        seed,
        styles: registry.clone(),
    };
    let corpus = synth_corpus(&spec).unwrap();
    let ex = MelExtractor::default();
    let mean_vec = |u: &Utterance| ex.extract(&u.samples).unwrap().mean_frame();
    // prototypes from the first half of each style, tested on the second
    let mut protos = vec![vec![0.0; 40]; registry.len()];
    let mut counts = vec![0usize; registry.len()];
    let mut tests: Vec<(StyleId, Vec<f64>)> = Vec::new();
    let mut seen = vec![0usize; registry.len()];
    for u in &corpus {
        let s = u.style.unwrap();
        let v = mean_vec(u);
        if seen[s.index()] < 6 {
            protos[s.index()]
                .iter_mut()
                .zip(&v)
                .for_each(|(p, x)| *p += x);
            counts[s.index()] += 1;
        } else {
            tests.push((s, v));
        }
        seen[s.index()] += 1;
    }
    for (p, c) in protos.iter_mut().zip(&counts) {
        p.iter_mut().for_each(|x| *x /= *c as f64);
    }
    let correct = tests
        .iter()
        .filter(|(s, v)| {
            let d = |p: &Vec<f64>| p.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..protos.len())
                .min_by(|&a, &b| d(&protos[a]).total_cmp(&d(&protos[b])))
                .unwrap();
            best == s.index()
        })
        .count();
    correct as f64 / tests.len() as f64
}

#[test]
fn fully_separable_corpus_is_centroid_classifiable() {
    for seed in [1, 2, 3] {
        assert_eq!(centroid_accuracy(1.0, seed), 1.0, "seed {seed}");
    }
}

#[test]
fn separability_orders_centroid_accuracy() {
    let mean = |sep: f64| {
        [1, 2, 3]
            .iter()
            .map(|&s| centroid_accuracy(sep, s))
            .sum::<f64>()
            / 3.0
    };
    let (hi, mid, lo) = (mean(1.0), mean(0.5), mean(0.1));
    assert!(hi >= mid && mid > lo, "{hi} {mid} {lo}");
    assert!(lo < 0.5, "{lo}");
}
