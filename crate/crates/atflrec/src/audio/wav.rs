//! RIFF/WAV reading and writing, plus ingestion normalization.
//!
//! Readers accept 16-bit PCM and 32-bit IEEE float, mono or stereo. Stereo
//! is averaged to mono and everything is resampled to 16 kHz so downstream
//! frame geometry is reproducible.

use std::io::Read;
use std::path::Path;

use super::{AudioError, Result};

/// All ingestion normalizes to this rate.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Waveform {
        assert!(sample_rate > 0, "sample rate must be positive");
        Waveform { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn read_u32(buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(AudioError::Parse {
            offset: offset as u64,
            what: "truncated while reading u32".into(),
        })
}

fn read_u16(buf: &[u8], offset: usize) -> Result<u16> {
    buf.get(offset..offset + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or(AudioError::Parse {
            offset: offset as u64,
            what: "truncated while reading u16".into(),
        })
}

/// Load a WAV file, average to mono, scale to [-1, 1], and resample to
/// 16 kHz. Integer samples are scaled by 1/32768.
pub fn load_wav<P: AsRef<Path>>(path: P) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode_wav(&bytes)
}

pub(crate) fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(AudioError::Parse {
            offset: 0,
            what: format!("file too small for a RIFF header ({} bytes)", bytes.len()),
        });
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(AudioError::Parse {
            offset: 0,
            what: "missing RIFF magic".into(),
        });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(AudioError::Parse {
            offset: 8,
            what: "missing WAVE form type".into(),
        });
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<(usize, usize)> = None; // offset, len
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4)? as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(AudioError::Parse {
                offset: pos as u64,
                what: format!("chunk '{}' overruns file", String::from_utf8_lossy(id)),
            });
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Parse {
                        offset: pos as u64,
                        what: "fmt chunk shorter than 16 bytes".into(),
                    });
                }
                fmt = Some((
                    read_u16(bytes, body)?,
                    read_u16(bytes, body + 2)?,
                    read_u32(bytes, body + 4)?,
                    read_u16(bytes, body + 14)?,
                ));
            }
            b"data" => data = Some((body, size)),
            _ => {}
        }
        pos = body + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or(AudioError::Parse {
        offset: 12,
        what: "no fmt chunk".into(),
    })?;
    let (data_off, data_len) = data.ok_or(AudioError::Parse {
        offset: 12,
        what: "no data chunk".into(),
    })?;
    if rate == 0 {
        return Err(AudioError::Parse {
            offset: data_off as u64,
            what: "sample rate of zero".into(),
        });
    }
    if channels == 0 || channels > 2 {
        return Err(AudioError::Codec { format, bits, channels });
    }

    let raw = &bytes[data_off..data_off + data_len];
    let interleaved: Vec<f64> = match (format, bits) {
        (1, 16) => raw
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        _ => return Err(AudioError::Codec { format, bits, channels }),
    };

    let mono: Vec<f64> = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(2).map(|p| (p[0] + p[1]) / 2.0).collect()
    };

    let wave = Waveform::new(mono, rate);
    if rate == TARGET_SAMPLE_RATE {
        Ok(wave)
    } else {
        Ok(resample_linear(&wave, TARGET_SAMPLE_RATE))
    }
}

/// Linear-interpolation resampling between nearest samples.
pub fn resample_linear(w: &Waveform, target_rate: u32) -> Waveform {
    if w.sample_rate == target_rate || w.samples.is_empty() {
        return Waveform::new(w.samples.clone(), target_rate);
    }
    let ratio = w.sample_rate as f64 / target_rate as f64;
    let out_len = ((w.samples.len() as f64) / ratio).floor() as usize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let src = i as f64 * ratio;
        let lo = src.floor() as usize;
        let frac = src - lo as f64;
        let a = w.samples[lo];
        let b = if lo + 1 < w.samples.len() { w.samples[lo + 1] } else { a };
        out.push(a + (b - a) * frac);
    }
    Waveform::new(out, target_rate)
}

/// Keep at most `max_seconds` of signal; shorter inputs pass through.
pub fn truncate(w: &Waveform, max_seconds: f64) -> Waveform {
    let max_samples = (max_seconds * w.sample_rate as f64).round() as usize;
    if w.samples.len() <= max_samples {
        w.clone()
    } else {
        Waveform::new(w.samples[..max_samples].to_vec(), w.sample_rate)
    }
}

/// Write a mono 16-bit PCM WAV file. Samples are clamped to [-1, 1].
pub fn write_wav_pcm16<P: AsRef<Path>>(path: P, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm16_file(samples: &[i16], channels: u16, rate: u32) -> Vec<u8> {
        let data_len = samples.len() * 2;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data_len as u32).to_le_bytes());
        for &s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    #[test]
    fn int16_scaling() {
        let wave = decode_wav(&pcm16_file(&[32767, -32768, 0], 1, 16000)).unwrap();
        assert!((wave.samples[0] - 32767.0 / 32768.0).abs() < 1e-12);
        assert!((wave.samples[1] + 1.0).abs() < 1e-12);
        assert_eq!(wave.samples[2], 0.0);
    }

    #[test]
    fn silence_stays_zero() {
        let wave = decode_wav(&pcm16_file(&[0; 64], 1, 16000)).unwrap();
        assert!(wave.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_averages_to_mono() {
        // L = 0.2, R = 0.4 -> 0.3
        let l = (0.2f64 * 32768.0) as i16;
        let r = (0.4f64 * 32768.0) as i16;
        let wave = decode_wav(&pcm16_file(&[l, r], 2, 16000)).unwrap();
        assert_eq!(wave.samples.len(), 1);
        assert!((wave.samples[0] - 0.3).abs() < 1e-4);
    }

    #[test]
    fn malformed_header_reports_offset() {
        let mut bytes = pcm16_file(&[0; 4], 1, 16000);
        bytes[9] = b'X'; // corrupt "WAVE"
        match decode_wav(&bytes) {
            Err(AudioError::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_codec_rejected() {
        let mut bytes = pcm16_file(&[0; 4], 1, 16000);
        bytes[20] = 7; // mu-law
        assert!(matches!(decode_wav(&bytes), Err(AudioError::Codec { format: 7, .. })));
    }

    #[test]
    fn resampling_normalizes_rate() {
        let wave = decode_wav(&pcm16_file(&[1000; 800], 1, 8000)).unwrap();
        assert_eq!(wave.sample_rate, TARGET_SAMPLE_RATE);
        assert_eq!(wave.samples.len(), 1600);
    }

    #[test]
    fn truncate_caps_at_max_seconds() {
        let w = Waveform::new(vec![0.1; 45 * 16000], 16000);
        assert_eq!(truncate(&w, 30.0).len(), 480_000);
        let short = Waveform::new(vec![0.1; 10 * 16000], 16000);
        assert_eq!(truncate(&short, 30.0).len(), 160_000);
        let exact = Waveform::new(vec![0.1; 30 * 16000], 16000);
        assert_eq!(truncate(&exact, 30.0).len(), 480_000);
    }

    #[test]
    fn wav_write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..256).map(|i| (i as f64 * 0.1).sin() * 0.7).collect();
        write_wav_pcm16(&path, &samples, 16000).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.samples.len(), samples.len());
        for (a, b) in back.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
