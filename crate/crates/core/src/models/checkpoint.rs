//! Named-tensor container.
//!
//! ```text
//! SERCKPT 1
//! key=value            (descriptor, any number of lines)
//! index <n>
//! name,offset,length   (n lines; offsets relative to the data blob)
//! data
//! <concatenated SERT tensors>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor};

pub const CHECKPOINT_MAGIC: &str = "SERCKPT 1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub descriptor: BTreeMap<String, String>,
    /// Stored in insertion order.
    pub tensors: Vec<(String, Tensor)>,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedContainer(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.descriptor.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn desc(&self, key: &str) -> Result<&str> {
        self.descriptor
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| malformed(format!("descriptor lacks {key:?}")))
    }

    pub fn desc_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.desc(key)?;
        raw.parse()
            .map_err(|_| malformed(format!("descriptor {key}={raw:?} does not parse")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::from(CHECKPOINT_MAGIC);
        header.push('\n');
        for (k, v) in &self.descriptor {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') || k.starts_with("index ") || k == "data" {
                return Err(Error::InvalidConfig(format!("descriptor entry {k:?} cannot be stored")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        let mut blob = Vec::new();
        let mut index = String::new();
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains([',', '\n']) {
                return Err(Error::InvalidConfig(format!("tensor name {name:?} cannot be stored")));
            }
            let bytes = t.to_sert_bytes(Dtype::F64);
            index.push_str(&format!("{name},{},{}\n", blob.len(), bytes.len()));
            blob.extend_from_slice(&bytes);
        }
        header.push_str(&format!("index {}\n", self.tensors.len()));
        header.push_str(&index);
        header.push_str("data\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| malformed("unterminated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| malformed("header is not UTF-8"))
        };
        if next_line()? != CHECKPOINT_MAGIC {
            return Err(malformed("missing SERCKPT magic"));
        }
        let mut descriptor = BTreeMap::new();
        let count: usize = loop {
            let line = next_line()?;
            if let Some(n) = line.strip_prefix("index ") {
                break n.parse().map_err(|_| malformed(format!("bad index count {n:?}")))?;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| malformed(format!("bad descriptor line {line:?}")))?;
            descriptor.insert(k.to_string(), v.to_string());
        };
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?;
            let mut parts = line.rsplitn(3, ',');
            let (len, off, name) = match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(o), Some(n)) => (l, o, n),
                _ => return Err(malformed(format!("bad index line {line:?}"))),
            };
            let off: usize = off.parse().map_err(|_| malformed(format!("bad offset in {line:?}")))?;
            let len: usize = len.parse().map_err(|_| malformed(format!("bad length in {line:?}")))?;
            entries.push((name.to_string(), off, len));
        }
        if next_line()? != "data" {
            return Err(malformed("missing data marker"));
        }
        let blob = &bytes[pos..];
        let mut tensors = Vec::with_capacity(count);
        for (name, off, len) in entries {
            let end = off
                .checked_add(len)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| malformed(format!("tensor {name} extends past end of file")))?;
            tensors.push((name, Tensor::from_sert_bytes(&blob[off..end])?));
        }
        Ok(Checkpoint { descriptor, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set("kind", "cnn_lite");
        c.set("input_size", 128);
        c.push("conv1.weight", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.1 - 0.35));
        c.push("fc.bias", Tensor::new(vec![3], vec![1e-300, -0.0, f64::MAX]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.descriptor, c.descriptor);
        assert_eq!(back.tensors.len(), 2);
        for ((na, ta), (nb, tb)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.dims(), tb.dims());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_is_text_index() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("SERCKPT 1\ninput_size=128\nkind=cnn_lite\nindex 2\nconv1.weight,0,"));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 4]),
            Err(Error::MalformedContainer(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(b"SERCKPT 2\n"), Err(Error::MalformedContainer(_))));
        assert!(matches!(Checkpoint::from_bytes(b""), Err(Error::MalformedContainer(_))));
    }

    #[test]
    fn missing_tensor_is_named() {
        match sample().require("layer1.0.conv1.weight") {
            Err(Error::MissingTensor(n)) => assert_eq!(n, "layer1.0.conv1.weight"),
            other => panic!("{other:?}"),
        }
    }
}
