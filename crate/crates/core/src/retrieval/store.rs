//! Index file: magic `PIIDX1`, `u32` version, length-prefixed encoder id,
//! `u32` d_joint, `u32` count, then per record a length-prefixed media id,
//! `u8` kind (0 image, 1 video), `u32` frame count, length-prefixed JSON
//! labels and `frames × d_joint` little-endian `f64`s.

use std::path::Path;

use super::{Index, IndexEntry, MediaKind};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::scalar::{cast_vec, Scalar};

pub const INDEX_MAGIC: &[u8; 6] = b"PIIDX1";
pub const INDEX_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::corrupt(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let path = self.path;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::corrupt(path, "string is not UTF-8"))
    }
}

impl<T: Scalar> Index<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        put_str(&mut out, &self.encoder_id);
        out.extend_from_slice(&(self.d_joint as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.media_id);
            out.push(match e.kind {
                MediaKind::Image => 0,
                MediaKind::Video => 1,
            });
            out.extend_from_slice(&(e.embeddings.len() as u32).to_le_bytes());
            put_str(&mut out, &serde_json::to_string(&e.labels).expect("labels serialize"));
            for f in &e.embeddings {
                for v in cast_vec::<T, f64>(f) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(6).ok() != Some(&INDEX_MAGIC[..]) {
            return Err(Error::corrupt(path, "missing PIIDX1 magic"));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Version {
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let encoder_id = r.string()?;
        let d = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut index = Index::new(encoder_id, d);
        for _ in 0..count {
            let media_id = r.string()?;
            let kind = match r.take(1)?[0] {
                0 => MediaKind::Image,
                1 => MediaKind::Video,
                k => return Err(Error::corrupt(path, format!("unknown media kind {k}"))),
            };
            let frames = r.u32()? as usize;
            let labels = serde_json::from_str(&r.string()?).map_err(|e| Error::corrupt(path, format!("labels: {e}")))?;
            let mut embeddings = Vec::with_capacity(frames);
            for _ in 0..frames {
                let raw = r.take(8 * d)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::corrupt(path, format!("non-finite embedding for `{media_id}`")));
                }
                embeddings.push(cast_vec(&v));
            }
            index
                .insert(IndexEntry {
                    media_id,
                    kind,
                    embeddings,
                    labels,
                })
                .map_err(|e| Error::corrupt(path, e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::corrupt(path, "trailing bytes after last record"));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn index_file_round_trip() {
        let mut idx = Index::new("toy-1", 2);
        idx.insert(IndexEntry {
            media_id: "a".into(),
            kind: MediaKind::Image,
            embeddings: vec![vec![0.5, -0.25]],
            labels: [("instance".to_string(), "dog_0".to_string())].into_iter().collect(),
        })
        .unwrap();
        idx.insert(IndexEntry {
            media_id: "v".into(),
            kind: MediaKind::Video,
            embeddings: vec![vec![1.0, 0.0], vec![0.1, 0.2]],
            labels: BTreeMap::new(),
        })
        .unwrap();
        let p = Path::new("x.idx");
        let bytes = idx.to_bytes();
        let back = Index::<f64>::from_bytes(&bytes, p).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            Index::<f64>::from_bytes(&bytes[..bytes.len() - 1], p),
            Err(Error::Corrupt { .. })
        ));
    }
}
