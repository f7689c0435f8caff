//! Embedding exchange files used to talk to out-of-process encoders.
//!
//! Text form: one record per line, `id space dim v_1 … v_dim`, separated by
//! single spaces. Binary form: magic `PIEMB1`, `u32` record count, then per
//! record `u32` id length, id bytes, `u8` space (0 joint, 1 token), `u32` dim
//! and `dim` little-endian `f64`s.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::Space;
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 6] = b"PIEMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeRecord {
    pub id: String,
    pub space: Space,
    pub values: Vec<f64>,
}

pub fn to_text(records: &[ExchangeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        write!(out, "{} {} {}", r.id, r.space.as_str(), r.values.len()).unwrap();
        for v in &r.values {
            write!(out, " {v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn to_binary(records: &[ExchangeRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        out.push(match r.space {
            Space::Joint => 0,
            Space::Token => 1,
        });
        out.extend_from_slice(&(r.values.len() as u32).to_le_bytes());
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_text(path: &Path, records: &[ExchangeRecord]) -> Result<()> {
    std::fs::write(path, to_text(records))?;
    Ok(())
}

pub fn write_binary(path: &Path, records: &[ExchangeRecord]) -> Result<()> {
    std::fs::write(path, to_binary(records))?;
    Ok(())
}

/// Reads either variant, detected by the binary magic.
pub fn read(path: &Path) -> Result<Vec<ExchangeRecord>> {
    let bytes = std::fs::read(path)?;
    parse(&bytes, path)
}

pub fn parse(bytes: &[u8], path: &Path) -> Result<Vec<ExchangeRecord>> {
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(bytes, path)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::corrupt(path, format!("not UTF-8: {e}")))?;
        parse_text(text, path)
    }
}

pub fn parse_text(text: &str, path: &Path) -> Result<Vec<ExchangeRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: String| Error::corrupt(path, format!("line {}: {why}", lineno + 1));
        let mut fields = line.split_whitespace();
        let id = fields.next().ok_or_else(|| bad("missing id".into()))?.to_string();
        let space: Space = fields
            .next()
            .ok_or_else(|| bad("missing space".into()))?
            .parse()
            .map_err(|e: Error| bad(e.to_string()))?;
        let dim: usize = fields
            .next()
            .ok_or_else(|| bad("missing dim".into()))?
            .parse()
            .map_err(|e| bad(format!("bad dim: {e}")))?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("bad float `{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(bad(format!("declared dim {dim} but found {} values", values.len())));
        }
        out.push(ExchangeRecord { id, space, values });
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn parse_binary(bytes: &[u8], path: &Path) -> Result<Vec<ExchangeRecord>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(BINARY_MAGIC.len())? != BINARY_MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = c.u32()? as usize;
        let id = String::from_utf8(c.take(id_len)?.to_vec()).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let space = match c.take(1)?[0] {
            0 => Space::Joint,
            1 => Space::Token,
            other => return Err(Error::corrupt(path, format!("unknown space tag {other}"))),
        };
        let dim = c.u32()? as usize;
        let raw = c.take(dim * 8)?;
        let values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        out.push(ExchangeRecord { id, space, values });
    }
    if c.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes after last record"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn records() -> impl Strategy<Value = Vec<ExchangeRecord>> {
        prop::collection::vec(
            ("[a-z0-9_#/-]{1,12}", any::<bool>(), prop::collection::vec(-1e6f64..1e6, 0..6)).prop_map(|(id, joint, values)| {
                ExchangeRecord {
                    id,
                    space: if joint { Space::Joint } else { Space::Token },
                    values,
                }
            }),
            0..5,
        )
    }

    proptest! {
        #[test]
        fn both_encodings_round_trip_exactly(recs in records()) {
            let p = Path::new("mem");
            prop_assert_eq!(&parse(to_text(&recs).as_bytes(), p).unwrap(), &recs);
            prop_assert_eq!(&parse(&to_binary(&recs), p).unwrap(), &recs);
        }
    }

    #[test]
    fn text_dim_mismatch_is_reported_with_line() {
        let err = parse_text("a joint 3 1.0 2.0\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn truncated_binary_is_corrupt() {
        let recs = vec![ExchangeRecord {
            id: "m".into(),
            space: Space::Joint,
            values: vec![1.0, 2.0],
        }];
        let bytes = to_binary(&recs);
        assert!(matches!(
            parse(&bytes[..bytes.len() - 3], Path::new("x")),
            Err(Error::Corrupt { .. })
        ));
    }
}
