//! 39-dimensional MFCC features (13 cepstra + deltas + delta-deltas) used to
//! generate first-iteration k-means targets. Conventional analysis chain:
//! pre-emphasis, 25 ms Hamming windows at a 10 ms hop, 23 mel filters,
//! floored log, DCT-II.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::model::FrameSequence;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub num_mel_filters: usize,
    pub num_cepstra: usize,
    pub log_floor: f64,
    pub pre_emphasis: f64,
    pub delta_window: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            num_mel_filters: 23,
            num_cepstra: 13,
            log_floor: 1e-10,
            pre_emphasis: 0.97,
            delta_window: 2,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.num_cepstra
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank: [num_filters x (fft_size/2 + 1)].
fn mel_filterbank(cfg: &MfccConfig, fft_size: usize) -> Vec<Vec<f64>> {
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let n_bins = fft_size / 2 + 1;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..cfg.num_mel_filters + 2)
        .map(|i| {
            let mel = mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.num_mel_filters + 1) as f64;
            mel_to_hz(mel) * fft_size as f64 / cfg.sample_rate as f64
        })
        .collect();
    let mut bank = vec![vec![0.0; n_bins]; cfg.num_mel_filters];
    for (f, filter) in bank.iter_mut().enumerate() {
        let (lo, mid, hi) = (points[f], points[f + 1], points[f + 2]);
        for (b, w) in filter.iter_mut().enumerate() {
            let x = b as f64;
            if x > lo && x < mid {
                *w = (x - lo) / (mid - lo);
            } else if x >= mid && x < hi {
                *w = (hi - x) / (hi - mid);
            }
        }
    }
    bank
}

/// Orthonormal DCT-II matrix rows (num_cepstra x num_mel_filters).
fn dct_matrix(num_cepstra: usize, num_filters: usize) -> Vec<Vec<f64>> {
    let n = num_filters as f64;
    (0..num_cepstra)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            (0..num_filters)
                .map(|j| {
                    scale
                        * (std::f64::consts::PI * k as f64 * (2.0 * j as f64 + 1.0) / (2.0 * n))
                            .cos()
                })
                .collect()
        })
        .collect()
}

fn append_deltas(features: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    let t = features.len();
    let d = features[0].len();
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let clamp = |i: isize| -> usize { i.clamp(0, t as isize - 1) as usize };
    (0..t)
        .map(|i| {
            (0..d)
                .map(|j| {
                    (1..=window)
                        .map(|n| {
                            n as f64
                                * (features[clamp(i as isize + n as isize)][j]
                                    - features[clamp(i as isize - n as isize)][j])
                        })
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

struct FftBundle {
    fft: Arc<dyn Fft<f64>>,
    size: usize,
}

fn plan_fft(window: usize) -> FftBundle {
    let size = window.next_power_of_two();
    let mut planner = FftPlanner::new();
    FftBundle {
        fft: planner.plan_fft_forward(size),
        size,
    }
}

/// Waveform -> 39-dim MFCC frames. Errors when the waveform is shorter than
/// one analysis window.
pub fn mfcc_features(waveform: &[f64], cfg: &MfccConfig) -> Result<FrameSequence> {
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    if waveform.len() < win {
        return Err(Error::WaveformTooShort {
            got: waveform.len(),
            need: win,
        });
    }
    let num_frames = (waveform.len() - win) / hop + 1;
    let bundle = plan_fft(win);
    let bank = mel_filterbank(cfg, bundle.size);
    let dct = dct_matrix(cfg.num_cepstra, cfg.num_mel_filters);
    let hamming: Vec<f64> = (0..win)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos())
        .collect();

    let mut statics = Vec::with_capacity(num_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); bundle.size];
    for f in 0..num_frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < win {
                let x = waveform[start + i];
                let prev = if start + i == 0 {
                    0.0
                } else {
                    waveform[start + i - 1]
                };
                (x - cfg.pre_emphasis * prev) * hamming[i]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        bundle.fft.process(&mut buf);
        let n_bins = bundle.size / 2 + 1;
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        let log_mel: Vec<f64> = bank
            .iter()
            .map(|filter| {
                let e: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(cfg.log_floor).ln()
            })
            .collect();
        let ceps: Vec<f64> = dct
            .iter()
            .map(|row| row.iter().zip(&log_mel).map(|(a, b)| a * b).sum())
            .collect();
        statics.push(ceps);
    }

    let deltas = append_deltas(&statics, cfg.delta_window);
    let ddeltas = append_deltas(&deltas, cfg.delta_window);
    let rows: Vec<Vec<f64>> = statics
        .iter()
        .zip(&deltas)
        .zip(&ddeltas)
        .map(|((s, d), dd)| {
            let mut row = Vec::with_capacity(cfg.feature_dim());
            row.extend_from_slice(s);
            row.extend_from_slice(d);
            row.extend_from_slice(dd);
            row
        })
        .collect();
    Ok(FrameSequence::exact(Mat::from_rows(&rows)))
}
