//! Binary named-tensor container and model checkpoints.
//!
//! Container layout (little-endian throughout):
//!
//! ```text
//! magic "GAAT" | version u16 | entry count u32
//! per entry: name len u16 | name UTF-8 | dtype u8 (1 = f64)
//!            | rank u8 | dims u64 x rank | payload f64 x prod(dims)
//! trailing: FNV-1a 64 checksum of all preceding bytes
//! ```
//!
//! Checkpoints are containers whose reserved `__meta.*` entries carry the
//! config fingerprint, source-graph identity, and best-validation info.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::Fnv1a;

const MAGIC: &[u8; 4] = b"GAAT";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;
const META_PREFIX: &str = "__meta.";

/// Ordered name -> dense f64 matrix container.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamContainer {
    entries: BTreeMap<String, Array2<f64>>,
}

impl ParamContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, values: Array2<f64>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate entry {name}")));
        }
        self.entries.insert(name.to_string(), values);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<f64>> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_entries(self) -> BTreeMap<String, Array2<f64>> {
        self.entries
    }

    pub fn from_entries(entries: BTreeMap<String, Array2<f64>>) -> Self {
        ParamContainer { entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, values) in &self.entries {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(DTYPE_F64);
            out.push(2); // rank
            out.extend_from_slice(&(values.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(values.ncols() as u64).to_le_bytes());
            for &x in values.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut hash = Fnv1a::new();
        hash.update(&out);
        out.extend_from_slice(&hash.finish().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 2 + 4 + 8 {
            return Err(fail("container too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let mut hash = Fnv1a::new();
        hash.update(body);
        if hash.finish() != stored {
            return Err(fail("checksum mismatch"));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(Error::Checkpoint("truncated container".into()));
            }
            let slice = &body[*pos..*pos + n];
            *pos += n;
            Ok(slice)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| fail("entry name is not UTF-8"))?
                .to_string();
            let dtype = take(&mut pos, 1)?[0];
            if dtype != DTYPE_F64 {
                return Err(fail(&format!("unsupported dtype tag {dtype}")));
            }
            let rank = take(&mut pos, 1)?[0];
            if rank != 2 {
                return Err(fail(&format!("unsupported rank {rank}")));
            }
            let rows = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let payload = take(&mut pos, rows * cols * 8)?;
            let mut data = Vec::with_capacity(rows * cols);
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            let values = Array2::from_shape_vec((rows, cols), data)
                .map_err(|_| fail("bad entry shape"))?;
            if entries.insert(name.clone(), values).is_some() {
                return Err(fail(&format!("duplicate entry {name}")));
            }
        }
        if pos != body.len() {
            return Err(fail("trailing bytes after entries"));
        }
        Ok(ParamContainer { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|source| Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|source| Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// A trained model snapshot: parameter tensors plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Array2<f64>>,
    /// Fingerprint of the resolved configuration that produced it.
    pub fingerprint: u64,
    /// Identity of the source graph (path or generator description).
    pub source_id: String,
    pub best_val_auc: f64,
    pub best_epoch: u64,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut container = ParamContainer::new();
        for (name, values) in &self.tensors {
            if name.starts_with(META_PREFIX) {
                return Err(Error::Checkpoint(format!(
                    "tensor name {name} collides with the reserved meta prefix"
                )));
            }
            container.insert(name, values.clone())?;
        }
        container.insert(
            "__meta.fingerprint",
            Array2::from_elem((1, 1), f64::from_bits(self.fingerprint)),
        )?;
        container.insert(
            "__meta.best_val_auc",
            Array2::from_elem((1, 1), self.best_val_auc),
        )?;
        container.insert(
            "__meta.best_epoch",
            Array2::from_elem((1, 1), self.best_epoch as f64),
        )?;
        let id_bytes: Vec<f64> = self.source_id.bytes().map(f64::from).collect();
        let id_row = Array2::from_shape_vec((1, id_bytes.len().max(1)), {
            if id_bytes.is_empty() {
                vec![0.0]
            } else {
                id_bytes
            }
        })
        .unwrap();
        container.insert("__meta.source_id", id_row)?;
        container.insert(
            "__meta.source_id_len",
            Array2::from_elem((1, 1), self.source_id.len() as f64),
        )?;
        container.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut container = ParamContainer::read(path)?;
        let meta_scalar = |c: &mut ParamContainer, name: &str| -> Result<f64> {
            c.remove(name)
                .filter(|a| a.dim() == (1, 1))
                .map(|a| a[(0, 0)])
                .ok_or_else(|| Error::Checkpoint(format!("missing meta entry {name}")))
        };
        let fingerprint = meta_scalar(&mut container, "__meta.fingerprint")?.to_bits();
        let best_val_auc = meta_scalar(&mut container, "__meta.best_val_auc")?;
        let best_epoch = meta_scalar(&mut container, "__meta.best_epoch")? as u64;
        let id_len = meta_scalar(&mut container, "__meta.source_id_len")? as usize;
        let id_row = container
            .remove("__meta.source_id")
            .ok_or_else(|| Error::Checkpoint("missing meta entry __meta.source_id".into()))?;
        let bytes: Vec<u8> = id_row.iter().take(id_len).map(|&x| x as u8).collect();
        let source_id = String::from_utf8(bytes)
            .map_err(|_| Error::Checkpoint("source id is not UTF-8".into()))?;
        Ok(Checkpoint {
            tensors: container.into_entries(),
            fingerprint,
            source_id,
            best_val_auc,
            best_epoch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn container_round_trip_includes_special_values() {
        let mut c = ParamContainer::new();
        c.insert(
            "a",
            array![[0.0, -0.0], [f64::MIN_POSITIVE, 4.9e-324], [1.5, -2.5]],
        )
        .unwrap();
        c.insert("b", Array2::zeros((1, 1))).unwrap();
        let bytes = c.to_bytes();
        let back = ParamContainer::from_bytes(&bytes).unwrap();
        let a = back.get("a").unwrap();
        let orig = c.get("a").unwrap();
        for (x, y) in a.iter().zip(orig.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn corrupted_checksum_is_rejected() {
        let mut c = ParamContainer::new();
        c.insert("w", array![[1.0, 2.0]]).unwrap();
        let mut bytes = c.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(
            ParamContainer::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn bad_magic_and_duplicates_are_rejected() {
        let mut c = ParamContainer::new();
        c.insert("w", array![[1.0]]).unwrap();
        assert!(c.insert("w", array![[2.0]]).is_err());
        let mut bytes = c.to_bytes();
        bytes[0] = b'X';
        // Fix up the checksum so only the magic is wrong.
        let body_len = bytes.len() - 8;
        let mut hash = Fnv1a::new();
        hash.update(&bytes[..body_len]);
        let checksum = hash.finish().to_le_bytes();
        bytes[body_len..].copy_from_slice(&checksum);
        assert!(matches!(
            ParamContainer::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gaat");
        let mut tensors = BTreeMap::new();
        tensors.insert("gat.h0.weight".to_string(), array![[1.0, -0.0], [0.5, 2.0]]);
        tensors.insert("psi".to_string(), array![[0.1], [0.1]]);
        let ckpt = Checkpoint {
            tensors,
            fingerprint: 0xdead_beef_cafe_f00d,
            source_id: "sbm(blocks=[100,100],p_in=0.2,p_out=0.01,seed=7)".into(),
            best_val_auc: 0.9321,
            best_epoch: 41,
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        // Bitwise on values, including the negative zero.
        assert_eq!(
            back.tensors["gat.h0.weight"][(0, 1)].to_bits(),
            (-0.0f64).to_bits()
        );
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bitwise(
            rows in 1usize..5,
            cols in 1usize..5,
            bits in proptest::collection::vec(any::<u64>(), 1..25),
        ) {
            let mut data: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            data.resize(rows * cols, 0.0);
            let values = Array2::from_shape_vec((rows, cols), data).unwrap();
            let mut c = ParamContainer::new();
            c.insert("t", values.clone()).unwrap();
            let back = ParamContainer::from_bytes(&c.to_bytes()).unwrap();
            let rt = back.get("t").unwrap();
            for (a, b) in rt.iter().zip(values.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
