//! ATFL checkpoint format.
//!
//! Layout, all little-endian:
//!   magic "ATFL" | u32 format version | u8 variant tag |
//!   u32 config blob length | config JSON |
//!   u32 parameter count | per parameter:
//!     u32 name length | name bytes | u32 rank | u64 dims... | f64 data...
//!
//! Round-trips are bit-exact.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ModelError, ModelParams, Result, Variant, VariantConfig};

const MAGIC: &[u8; 4] = b"ATFL";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    encoder: EncoderConfig,
    variant: VariantConfig,
    n_mels: usize,
}

pub fn save<P: AsRef<Path>>(model: &ModelParams, path: P) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn to_bytes(model: &ModelParams) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        encoder: model.cfg.clone(),
        variant: model.variant_cfg.clone(),
        n_mels: model.n_mels,
    };
    let meta_json =
        serde_json::to_vec(&meta).map_err(|e| ModelError::Checkpoint(format!("meta: {e}")))?;
    let snap = model.snapshot();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.variant().tag());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(snap.len() as u32).to_le_bytes());
    for (name, shape, data) in &snap {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(ModelError::Checkpoint("missing ATFL magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let tag = r.take(1)?[0];
    let variant = Variant::from_tag(tag)?;
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| ModelError::Checkpoint(format!("meta json: {e}")))?;
    if meta.variant.variant != variant {
        return Err(ModelError::Checkpoint(
            "variant tag disagrees with config blob".into(),
        ));
    }
    let n_params = r.u32()? as usize;
    let mut snap = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("non-utf8 parameter name".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        snap.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let model = ModelParams::init(meta.encoder, meta.variant, meta.n_mels, 0)?;
    model.restore(&snap)?;
    Ok(model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(variant: Variant) -> ModelParams {
        let cfg = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_width: 16,
            vocab_size: 10,
            dropout: 0.0,
            ..EncoderConfig::default()
        };
        let vcfg = VariantConfig { variant, ..VariantConfig::default() };
        ModelParams::init(cfg, vcfg, 6, 123).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for variant in Variant::all() {
            let m = tiny_model(variant);
            let bytes = to_bytes(&m).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back.variant(), variant);
            let again = to_bytes(&back).unwrap();
            assert_eq!(bytes, again, "{variant}: checkpoint bytes drifted");
            // values identical bit for bit
            let a = m.snapshot();
            let b = back.snapshot();
            assert_eq!(a.len(), b.len());
            for ((n1, s1, d1), (n2, s2, d2)) in a.iter().zip(&b) {
                assert_eq!((n1, s1), (n2, s2));
                assert!(d1.iter().zip(d2).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.atfl");
        let m = tiny_model(Variant::DualLora);
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.frozen_checksum(), m.frozen_checksum());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            from_bytes(b"NOTACHECKPOINT"),
            Err(ModelError::Checkpoint(_))
        ));
        let m = tiny_model(Variant::TextOnlyLora);
        let mut bytes = to_bytes(&m).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(from_bytes(&bytes), Err(ModelError::Checkpoint(_))));
    }
}
