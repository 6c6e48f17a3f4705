//! Versioned named-tensor checkpoints.
//!
//! Layout: magic `CSTG`, u32 version, u32 tensor count, per tensor
//! {u16 name length, name bytes, u8 ndim, u32 dims..., little-endian f32
//! payload}, then a trailing UTF-8 metadata block of `key=value` lines.
//! All integers little-endian. Parameters are kept f32-snapped in memory,
//! so a save/load round trip reproduces values bit-identically.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSTG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub version: u32,
    /// Named tensors in a stable order.
    pub tensors: Vec<(String, Tensor)>,
    /// Metadata lines; keys may repeat (e.g. one `loss` line per epoch).
    pub metadata: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            version: VERSION,
            tensors: Vec::new(),
            metadata: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn meta_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> {
        self.metadata
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.push((key.to_string(), value.to_string()));
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| {
                n.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), t.clone()))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::Format(format!("tensor name too long: {name}")));
            }
            if tensor.shape().len() > u8::MAX as usize {
                return Err(Error::Format(format!("tensor rank too high: {name}")));
            }
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for (k, v) in &self.metadata {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Format(format!("metadata key/value not line-safe: {k}")));
            }
            buf.extend_from_slice(k.as_bytes());
            buf.push(b'=');
            buf.extend_from_slice(v.as_bytes());
            buf.push(b'\n');
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("truncated checkpoint".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = take(&mut pos, numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let meta_text = std::str::from_utf8(&bytes[pos..])
            .map_err(|_| Error::Format("metadata block is not UTF-8".into()))?;
        let mut metadata = Vec::new();
        for line in meta_text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("metadata line without '=': {line}")))?;
            metadata.push((k.to_string(), v.to_string()));
        }
        Ok(Checkpoint {
            version,
            tensors,
            metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ck = Checkpoint::new();
        let mut t = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
        t.snap_f32();
        ck.tensors.push(("gen_f.enc0.weight".into(), t));
        let mut b = Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0));
        b.snap_f32();
        ck.tensors.push(("gen_f.enc0.bias".into(), b));
        ck.push_meta("epoch", 7);
        ck.push_meta("loss", "1,0.5,0.5,1.2,0.8");
        ck.push_meta("loss", "2,0.4,0.4,1.1,0.6");
        ck
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cstg");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.version, ck.version);
        assert_eq!(back.metadata, ck.metadata);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cstg");
        sample().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        std::fs::write(&path, &bytes[..20]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn meta_lookup_keeps_repeats_in_order() {
        let ck = sample();
        assert_eq!(ck.meta("epoch"), Some("7"));
        let losses: Vec<_> = ck.meta_all("loss").collect();
        assert_eq!(losses.len(), 2);
        assert!(losses[0].starts_with("1,"));
        assert!(losses[1].starts_with("2,"));
    }

    #[test]
    fn prefix_extraction() {
        let ck = sample();
        let named = ck.tensors_with_prefix("gen_f.");
        assert_eq!(named.len(), 2);
        assert_eq!(named[0].0, "enc0.weight");
    }
}
