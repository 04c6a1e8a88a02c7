//! Single-file tensor container: a plain-text manifest (tensor name, shape,
//! element type, byte offset) followed by a raw little-endian f32 payload in
//! manifest order. Round-trips are bit-exact.
//!
//! ```text
//! raspforge-tensorfile v1
//! meta <key> <value>
//! tensor <name> f32 <d0>x<d1>... @<offset>
//! end <payload-bytes>
//! <raw payload>
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &str = "raspforge-tensorfile v1";

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad tensor file: {0}")]
    Format(String),
    #[error("tensor {0:?} not found")]
    Missing(String),
}

/// One named tensor: shape plus row-major f32 data.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory form of a tensor file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<TensorEntry>,
}

impl TensorFile {
    pub fn new() -> TensorFile {
        TensorFile::default()
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!key.contains(char::is_whitespace), "meta key {key:?} has whitespace");
        debug_assert!(!value.contains('\n'), "meta value for {key:?} has a newline");
        self.meta.push((key.to_string(), value));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, TensorFileError> {
        self.meta(key)
            .ok_or_else(|| TensorFileError::Format(format!("missing meta key {key:?}")))?
            .parse()
            .map_err(|_| TensorFileError::Format(format!("meta key {key:?} failed to parse")))
    }

    pub fn push_tensor(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert!(!name.contains(char::is_whitespace), "tensor name {name:?} has whitespace");
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorEntry, TensorFileError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| TensorFileError::Missing(name.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), TensorFileError> {
        let mut file = BufWriter::new(fs::File::create(path)?);
        writeln!(file, "{MAGIC}")?;
        for (k, v) in &self.meta {
            writeln!(file, "meta {k} {v}")?;
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            writeln!(file, "tensor {} f32 {} @{offset}", t.name, dims.join("x"))?;
            offset += t.data.len() * 4;
        }
        writeln!(file, "end {offset}")?;
        for t in &self.tensors {
            for x in &t.data {
                file.write_all(&x.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<TensorFile, TensorFileError> {
        let bytes = fs::read(path)?;
        let mut out = TensorFile::new();
        let mut pos = 0usize;
        fn next_line(bytes: &[u8], pos: usize) -> Result<(String, usize), TensorFileError> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| TensorFileError::Format("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| TensorFileError::Format("non-utf8 header".into()))?;
            Ok((line.to_string(), pos + end + 1))
        }

        let (magic, p) = next_line(&bytes, pos)?;
        if magic != MAGIC {
            return Err(TensorFileError::Format(format!("bad magic line {magic:?}")));
        }
        pos = p;

        struct Pending {
            name: String,
            shape: Vec<usize>,
            offset: usize,
        }
        let mut pending: Vec<Pending> = Vec::new();
        let payload_len;
        loop {
            let (line, p) = next_line(&bytes, pos)?;
            pos = p;
            if let Some(rest) = line.strip_prefix("meta ") {
                let (key, value) = rest
                    .split_once(' ')
                    .ok_or_else(|| TensorFileError::Format(format!("bad meta line {line:?}")))?;
                out.meta.push((key.to_string(), value.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 4 || parts[1] != "f32" {
                    return Err(TensorFileError::Format(format!("bad tensor line {line:?}")));
                }
                let shape: Vec<usize> = parts[2]
                    .split('x')
                    .map(|d| d.parse().map_err(|_| TensorFileError::Format(format!("bad dims {line:?}"))))
                    .collect::<Result<_, _>>()?;
                let offset: usize = parts[3]
                    .strip_prefix('@')
                    .and_then(|o| o.parse().ok())
                    .ok_or_else(|| TensorFileError::Format(format!("bad offset {line:?}")))?;
                pending.push(Pending {
                    name: parts[0].to_string(),
                    shape,
                    offset,
                });
            } else if let Some(rest) = line.strip_prefix("end ") {
                payload_len = rest
                    .parse::<usize>()
                    .map_err(|_| TensorFileError::Format(format!("bad end line {line:?}")))?;
                break;
            } else {
                return Err(TensorFileError::Format(format!("unexpected header line {line:?}")));
            }
        }

        let payload = &bytes[pos..];
        if payload.len() != payload_len {
            return Err(TensorFileError::Format(format!(
                "payload is {} bytes, manifest says {payload_len}",
                payload.len()
            )));
        }
        let mut expect_offset = 0usize;
        for t in pending {
            if t.offset != expect_offset {
                return Err(TensorFileError::Format(format!(
                    "tensor {} at offset {}, expected {expect_offset}",
                    t.name, t.offset
                )));
            }
            let count: usize = t.shape.iter().product();
            let nbytes = count * 4;
            let slice = payload
                .get(t.offset..t.offset + nbytes)
                .ok_or_else(|| TensorFileError::Format(format!("tensor {} overruns payload", t.name)))?;
            let mut data = Vec::with_capacity(count);
            for chunk in slice.chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            expect_offset += nbytes;
            out.tensors.push(TensorEntry {
                name: t.name,
                shape: t.shape,
                data,
            });
        }
        if expect_offset != payload_len {
            return Err(TensorFileError::Format(
                "manifest tensors do not cover the payload".into(),
            ));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.tensors");
        let mut tf = TensorFile::new();
        tf.push_meta("step", 42u64);
        tf.push_meta("config_hash", "deadbeef");
        tf.push_tensor("emb", &[3, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, 3.25e-7, 1e30]);
        tf.push_tensor("bias", &[4], vec![0.1, 0.2, -0.3, 0.4]);
        tf.write(&path).unwrap();
        let back = TensorFile::read(&path).unwrap();
        assert_eq!(back, tf);
        // bitwise: compare the raw bit patterns too
        for (a, b) in tf.tensors[0].data.iter().zip(&back.tensors[0].data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.meta("step"), Some("42"));
        assert_eq!(back.meta_parsed::<u64>("step").unwrap(), 42);
    }

    #[test]
    fn rejects_corrupt_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.tensors");
        let mut tf = TensorFile::new();
        tf.push_tensor("w", &[2], vec![1.0, 2.0]);
        tf.write(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(TensorFile::read(&path), Err(TensorFileError::Format(_))));
    }

    #[test]
    fn missing_tensor_is_reported() {
        let tf = TensorFile::new();
        assert!(matches!(tf.tensor("nope"), Err(TensorFileError::Missing(_))));
    }
}
