//! FBK1 sidecar format: little-endian header (magic "FBK1", u32 frames,
//! u32 n_mels, u32 sample_rate) followed by row-major f64 log energies.

use std::io::{Read, Write};
use std::path::Path;

use super::{AudioError, FbankMatrix, Result};

const MAGIC: &[u8; 4] = b"FBK1";

pub fn write_fbk<P: AsRef<Path>>(path: P, m: &FbankMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(16 + m.values.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.frames as u32).to_le_bytes());
    out.extend_from_slice(&(m.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&m.sample_rate.to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_fbk<P: AsRef<Path>>(path: P) -> Result<FbankMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(AudioError::Parse {
            offset: 0,
            what: format!("file too small for an FBK1 header ({} bytes)", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(AudioError::Parse {
            offset: 0,
            what: "missing FBK1 magic".into(),
        });
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let sample_rate = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let expected = 16 + frames * n_mels * 8;
    if bytes.len() != expected {
        return Err(AudioError::Parse {
            offset: 16,
            what: format!("expected {expected} bytes for {frames}x{n_mels}, got {}", bytes.len()),
        });
    }
    let values = bytes[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(FbankMatrix {
        values,
        frames,
        n_mels,
        sample_rate,
        fingerprint: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{fbank, FbankConfig, Waveform};

    #[test]
    fn fbk_roundtrip_is_bit_exact() {
        let cfg = FbankConfig::default();
        let w = Waveform::new(
            (0..8000).map(|i| (i as f64 * 0.05).sin() * 0.4).collect(),
            16_000,
        );
        let m = fbank(&w, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("item.fbk");
        write_fbk(&path, &m).unwrap();
        let back = read_fbk(&path).unwrap();
        assert_eq!((back.frames, back.n_mels, back.sample_rate), (m.frames, m.n_mels, 16_000));
        assert!(m.values.iter().zip(&back.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn fbk_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fbk");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_fbk(&path), Err(AudioError::Parse { offset: 0, .. })));
    }
}
