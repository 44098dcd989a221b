//! Framing, FFT power spectra, and mel filterbank energies.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{truncate, AudioError, Result, Waveform};
use crate::report::fingerprint_of;

/// Energy floor added before the log so silence stays finite.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub frame_len_ms: u32,
    pub frame_shift_ms: u32,
    pub n_fft: usize,
    pub sample_rate: u32,
    pub max_seconds: f64,
    /// Per-utterance mean/variance normalization of the log energies.
    /// Off by default.
    pub mean_var_normalize: bool,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            n_mels: 80,
            frame_len_ms: 25,
            frame_shift_ms: 10,
            n_fft: 512,
            sample_rate: 16_000,
            max_seconds: 30.0,
            mean_var_normalize: false,
        }
    }
}

impl FbankConfig {
    pub fn with_mels(n_mels: usize) -> FbankConfig {
        FbankConfig { n_mels, ..FbankConfig::default() }
    }

    pub fn frame_len_samples(&self) -> usize {
        (self.frame_len_ms as u64 * self.sample_rate as u64 / 1000) as usize
    }

    pub fn frame_shift_samples(&self) -> usize {
        (self.frame_shift_ms as u64 * self.sample_rate as u64 / 1000) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n_fft.is_power_of_two() {
            return Err(AudioError::Config(format!(
                "n_fft {} is not a power of two",
                self.n_fft
            )));
        }
        if self.n_fft < self.frame_len_samples() {
            return Err(AudioError::Config(format!(
                "n_fft {} smaller than the {}-sample frame",
                self.n_fft,
                self.frame_len_samples()
            )));
        }
        if self.n_mels < 2 {
            return Err(AudioError::Config(format!("n_mels {} < 2", self.n_mels)));
        }
        if self.sample_rate == 0 || self.frame_shift_ms == 0 || self.frame_len_ms == 0 {
            return Err(AudioError::Config("zero rate or frame geometry".into()));
        }
        if self.max_seconds <= 0.0 {
            return Err(AudioError::Config("max_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

/// Per-utterance matrix of log-mel energies, frames x n_mels row-major.
#[derive(Debug, Clone)]
pub struct FbankMatrix {
    pub values: Vec<f64>,
    pub frames: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fingerprint: String,
}

impl FbankMatrix {
    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.n_mels..(frame + 1) * self.n_mels]
    }
}

fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Split into Hamming-windowed frames zero-padded to n_fft. The trailing
/// partial frame is dropped.
pub fn frame_signal(w: &Waveform, cfg: &FbankConfig) -> Result<Vec<Vec<f64>>> {
    let frame_len = cfg.frame_len_samples();
    let shift = cfg.frame_shift_samples();
    if w.len() < frame_len {
        return Err(AudioError::TooShort {
            samples: w.len(),
            needed: frame_len,
        });
    }
    let n_frames = 1 + (w.len() - frame_len) / shift;
    let window = hamming(frame_len);
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let start = i * shift;
        let mut frame = vec![0.0; cfg.n_fft];
        for (j, out) in frame[..frame_len].iter_mut().enumerate() {
            *out = w.samples[start + j] * window[j];
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Closed-form frame count for a signal of `len` samples after truncation.
pub fn expected_frames(len: usize, cfg: &FbankConfig) -> usize {
    let max = (cfg.max_seconds * cfg.sample_rate as f64).round() as usize;
    let len = len.min(max);
    let frame_len = cfg.frame_len_samples();
    if len < frame_len {
        0
    } else {
        1 + (len - frame_len) / cfg.frame_shift_samples()
    }
}

/// Iterative radix-2 Cooley-Tukey over a real frame; returns the one-sided
/// power spectrum |X[k]|^2 for k in 0..=n/2.
pub fn fft_power_spectrum(frame: &[f64]) -> Result<Vec<f64>> {
    let n = frame.len();
    if !n.is_power_of_two() || n < 2 {
        return Err(AudioError::NotPowerOfTwo { len: n });
    }
    let mut re = frame.to_vec();
    let mut im = vec![0.0; n];
    fft_in_place(&mut re, &mut im);
    Ok((0..=n / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect())
}

fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let half = len / 2;
        for start in (0..n).step_by(len) {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in start..start + half {
                let (er, ei) = (re[k], im[k]);
                let (or, oi) = (
                    re[k + half] * cr - im[k + half] * ci,
                    re[k + half] * ci + im[k + half] * cr,
                );
                re[k] = er + or;
                im[k] = ei + oi;
                re[k + half] = er - or;
                im[k + half] = ei - oi;
                let next_cr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = next_cr;
            }
        }
        len <<= 1;
    }
}

/// m = 2595 * log10(1 + f / 700)
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with centers uniform on the mel scale between 0 Hz
/// and Nyquist. Rows are n_mels x (n_fft/2 + 1); every row is non-negative
/// with at least one positive entry.
pub fn mel_filterbank(cfg: &FbankConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let n_bins = cfg.n_fft / 2 + 1;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut bank = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row = vec![0.0; n_bins];
        let mut any_positive = false;
        for (k, slot) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            let w = rising.min(falling).max(0.0);
            if w > 0.0 {
                any_positive = true;
            }
            *slot = w;
        }
        if !any_positive {
            return Err(AudioError::Resolution {
                n_mels: cfg.n_mels,
                n_fft: cfg.n_fft,
            });
        }
        bank.push(row);
    }
    Ok(bank)
}

/// Full FBank chain: truncate -> frame -> power spectrum -> mel filterbank
/// -> log(energy + floor).
pub fn fbank(w: &Waveform, cfg: &FbankConfig) -> Result<FbankMatrix> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(AudioError::Config(format!(
            "waveform rate {} does not match config rate {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let clipped = truncate(w, cfg.max_seconds);
    let frames = frame_signal(&clipped, cfg)?;
    let bank = mel_filterbank(cfg)?;
    let mut values = Vec::with_capacity(frames.len() * cfg.n_mels);
    for frame in &frames {
        let power = fft_power_spectrum(frame)?;
        for row in &bank {
            let energy: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            values.push((energy + LOG_FLOOR).ln());
        }
    }
    if cfg.mean_var_normalize {
        normalize_per_dim(&mut values, frames.len(), cfg.n_mels);
    }
    Ok(FbankMatrix {
        values,
        frames: frames.len(),
        n_mels: cfg.n_mels,
        sample_rate: cfg.sample_rate,
        fingerprint: cfg.fingerprint(),
    })
}

fn normalize_per_dim(values: &mut [f64], frames: usize, n_mels: usize) {
    if frames == 0 {
        return;
    }
    for c in 0..n_mels {
        let mut mean = 0.0;
        for f in 0..frames {
            mean += values[f * n_mels + c];
        }
        mean /= frames as f64;
        let mut var = 0.0;
        for f in 0..frames {
            let d = values[f * n_mels + c] - mean;
            var += d * d;
        }
        var /= frames as f64;
        let inv = 1.0 / (var + 1e-12).sqrt();
        for f in 0..frames {
            values[f * n_mels + c] = (values[f * n_mels + c] - mean) * inv;
        }
    }
}
