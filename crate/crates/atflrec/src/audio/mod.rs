//! Audio ingestion and log-mel filterbank (FBank) feature extraction.

mod dsp;
mod fbk;
mod wav;

pub use dsp::{
    expected_frames, fbank, fft_power_spectrum, frame_signal, hz_to_mel, mel_filterbank,
    mel_to_hz, FbankConfig, FbankMatrix,
};
pub use fbk::{read_fbk, write_fbk};
pub use wav::{load_wav, resample_linear, truncate, write_wav_pcm16, Waveform, TARGET_SAMPLE_RATE};

use std::fmt;

#[derive(Debug)]
pub enum AudioError {
    Io(std::io::Error),
    /// Structurally malformed file; `offset` is the byte position.
    Parse { offset: u64, what: String },
    /// A WAV codec this reader does not handle.
    Codec { format: u16, bits: u16, channels: u16 },
    /// Signal shorter than one analysis frame.
    TooShort { samples: usize, needed: usize },
    /// FFT input whose length is not a power of two.
    NotPowerOfTwo { len: usize },
    /// More mel filters than the FFT resolution can support.
    Resolution { n_mels: usize, n_fft: usize },
    /// Invalid feature configuration.
    Config(String),
}

impl fmt::Display for AudioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Parse { offset, what } => write!(f, "malformed file at byte {offset}: {what}"),
            Self::Codec { format, bits, channels } => write!(
                f,
                "unsupported codec: format {format}, {bits}-bit, {channels} channel(s)"
            ),
            Self::TooShort { samples, needed } => {
                write!(f, "signal too short: {samples} samples, need at least {needed}")
            }
            Self::NotPowerOfTwo { len } => write!(f, "fft size {len} is not a power of two"),
            Self::Resolution { n_mels, n_fft } => write!(
                f,
                "{n_mels} mel filters exceed the resolution of a {n_fft}-point fft (empty filter)"
            ),
            Self::Config(msg) => write!(f, "invalid fbank config: {msg}"),
        }
    }
}

impl std::error::Error for AudioError {}

impl From<std::io::Error> for AudioError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, AudioError>;
