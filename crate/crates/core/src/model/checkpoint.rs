//! Flat binary checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic, ASCII "SELFLOOP"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H in bytes, u64 little-endian
//! 20      H     header, UTF-8 text, one `key=value` per line
//! 20+H    ...   payload: every tensor's f32 values, little-endian, row-major
//! ```
//!
//! The header carries free-form metadata lines followed by
//! `tensor_count=N` and then exactly N lines of the form
//! `tensor=<name> <d0>x<d1>... <offset>`, where `offset` is the tensor's
//! byte offset from the start of the payload. Tensors are laid out in header
//! order without gaps, so the payload length equals the sum of the tensor
//! sizes. Model checkpoints carry the config keys `n_layer`, `n_head`,
//! `n_embd`, `block_size`, `vocab_size`, `dropout`, `bias` and `vocab_kind`.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::VocabKind;

pub const MAGIC: &[u8; 8] = b"SELFLOOP";
pub const VERSION: u32 = 1;

/// Metadata plus named tensors, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("missing header key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value {raw:?} for header key {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') || k == "tensor" || k == "tensor_count" {
                return Err(Error::Format(format!("unencodable header entry {k:?}")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str(&format!("tensor_count={}\n", self.tensors.len()));
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.contains([' ', '\n']) || name.is_empty() {
                return Err(Error::Format(format!("unencodable tensor name {name:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor={name} {} {offset}\n", dims.join("x")));
            offset += t.numel() * 4;
        }
        let mut out = Vec::with_capacity(20 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Format(format!(
                "truncated: {} bytes is shorter than the fixed preamble",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated: header extends past end of file".into()))?;
        let header = std::str::from_utf8(&bytes[20..header_end])
            .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
        let payload = &bytes[header_end..];

        let mut meta = Vec::new();
        let mut specs: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut count: Option<usize> = None;
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed header line {line:?}")))?;
            match k {
                "tensor_count" => {
                    count = Some(v.parse().map_err(|_| {
                        Error::Format(format!("bad tensor_count {v:?}"))
                    })?)
                }
                "tensor" => specs.push(parse_tensor_line(v)?),
                _ => meta.push((k.to_string(), v.to_string())),
            }
        }
        let count = count.ok_or_else(|| Error::Format("missing tensor_count".into()))?;
        if count != specs.len() {
            return Err(Error::Format(format!(
                "tensor_count says {count} but {} tensor lines follow",
                specs.len()
            )));
        }
        let mut expected = 0usize;
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, offset) in specs {
            if offset != expected {
                return Err(Error::Format(format!(
                    "tensor {name} at offset {offset}, expected {expected} (gap or overlap)"
                )));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * 4;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "truncated: tensor {name} needs payload bytes up to {end}, have {}",
                    payload.len()
                )));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
            expected = end;
        }
        if expected != payload.len() {
            return Err(Error::Format(format!(
                "payload is {} bytes but tensors account for {expected}",
                payload.len()
            )));
        }
        Ok(Container { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_tensor_line(v: &str) -> Result<(String, Vec<usize>, usize)> {
    let bad = || Error::Format(format!("malformed tensor line {v:?}"));
    let mut parts = v.split(' ');
    let name = parts.next().filter(|s| !s.is_empty()).ok_or_else(bad)?;
    let shape: Vec<usize> = parts
        .next()
        .ok_or_else(bad)?
        .split('x')
        .map(|d| d.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let offset = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if parts.next().is_some() || shape.iter().any(|&d| d == 0) {
        return Err(bad());
    }
    Ok((name.to_string(), shape, offset))
}

pub fn config_meta(config: &ModelConfig, vocab: VocabKind) -> Vec<(String, String)> {
    vec![
        ("n_layer".into(), config.n_layer.to_string()),
        ("n_head".into(), config.n_head.to_string()),
        ("n_embd".into(), config.n_embd.to_string()),
        ("block_size".into(), config.block_size.to_string()),
        ("vocab_size".into(), config.vocab_size.to_string()),
        ("dropout".into(), config.dropout.to_string()),
        ("bias".into(), config.bias.to_string()),
        ("vocab_kind".into(), vocab.as_str().into()),
    ]
}

pub fn config_from(c: &Container) -> Result<(ModelConfig, VocabKind)> {
    let config = ModelConfig {
        n_layer: c.parse("n_layer")?,
        n_head: c.parse("n_head")?,
        n_embd: c.parse("n_embd")?,
        block_size: c.parse("block_size")?,
        vocab_size: c.parse("vocab_size")?,
        dropout: c.parse("dropout")?,
        bias: c.parse("bias")?,
    };
    Ok((config, VocabKind::parse(c.require("vocab_kind")?)?))
}

impl ModelState {
    pub fn to_container(&self) -> Container {
        let mut meta = vec![("kind".to_string(), "model".to_string())];
        meta.extend(config_meta(self.config(), self.vocab_kind()));
        let tensors = self
            .names()
            .iter()
            .zip(self.params())
            .map(|(n, t)| {
                let mut t = t.clone();
                t.drop_grad();
                (n.clone(), t)
            })
            .collect();
        Container { meta, tensors }
    }

    /// Rebuilds a model from the first `schema` tensors of a container;
    /// anything after them (optimizer moments in snapshots) is ignored.
    pub fn from_container(c: &Container) -> Result<Self> {
        let (config, vocab) = config_from(c)?;
        config
            .validate()
            .map_err(|e| Error::Format(format!("stored config is invalid: {e}")))?;
        let n = super::parameter_schema(&config).len();
        if c.tensors.len() < n {
            return Err(Error::Format(format!(
                "expected {n} model tensors, found {}",
                c.tensors.len()
            )));
        }
        ModelState::from_named(&config, vocab, c.tensors[..n].to_vec())
    }
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    model.to_container().write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    ModelState::from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelState {
        ModelState::init(&ModelConfig::tiny(), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(m.same_weights(&back));
        assert_eq!(back.config(), m.config());
        // Re-encoding gives the same bytes.
        assert_eq!(
            std::fs::read(&path).unwrap(),
            back.to_container().to_bytes().unwrap()
        );
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = tiny().to_container().to_bytes().unwrap();
        for cut in [0, 10, 25, bytes.len() - 1] {
            let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "{cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version_are_named() {
        let mut bytes = tiny().to_container().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = tiny().to_container().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(Container::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = tiny().to_container().to_bytes().unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn layout_is_as_documented() {
        let c = Container {
            meta: vec![("kind".into(), "test".into())],
            tensors: vec![
                ("a".into(), Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()),
                ("b".into(), Tensor::new(vec![1, 1], vec![0.5]).unwrap()),
            ],
        };
        let bytes = c.to_bytes().unwrap();
        let header = "kind=test\ntensor_count=2\ntensor=a 2 0\ntensor=b 1x1 8\n";
        assert_eq!(&bytes[..8], b"SELFLOOP");
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), header.len() as u64);
        assert_eq!(&bytes[20..20 + header.len()], header.as_bytes());
        assert_eq!(&bytes[20 + header.len()..][..4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + header.len() + 12);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }
}
