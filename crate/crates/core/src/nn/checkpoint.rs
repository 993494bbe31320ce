//! Binary parameter checkpoints.
//!
//! Layout (little-endian):
//! ```text
//! b"ICQLCKPT"            8-byte magic
//! u32                    format version
//! u64                    header length in bytes
//! [u8; header length]    JSON header: {"version", "tensors": [{"name","rows","cols"}], "meta"}
//! f64 * Σ rows·cols      tensor payloads in header order
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Matrix, NnError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ICQLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub tensors: Vec<TensorHeader>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorHeader {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| NnError::Format(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, m) in &self.tensors {
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Format("bad checkpoint magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; hlen];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| NnError::Format(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let mut data = Vec::with_capacity(th.rows * th.cols);
            for _ in 0..th.rows * th.cols {
                r.read_exact(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
            tensors.push((th.name, Matrix::from_vec(th.rows, th.cols, data)?));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NnError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NnError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let ck = Checkpoint {
            meta: serde_json::json!({"kind": "critic", "layers": 2}),
            tensors: vec![
                ("a".into(), Matrix::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 3.0]]).unwrap()),
                ("b".into(), Matrix::row_vector(&[0.1, 0.2, 0.3])),
            ],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("b").unwrap().cols(), 3);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut buf = Vec::new();
        Checkpoint {
            meta: serde_json::Value::Null,
            tensors: vec![],
        }
        .write_to(&mut buf)
        .unwrap();
        buf[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&buf[..]), Err(NnError::Format(_))));
    }
}
