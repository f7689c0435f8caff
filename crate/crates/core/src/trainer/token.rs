use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const TOKEN_MAGIC: &[u8; 6] = b"PITOK1";
pub const TOKEN_VERSION: u32 = 1;

/// A learned persona token with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaToken {
    pub instance_id: String,
    pub encoder_id: String,
    pub n_templates_used: usize,
    pub config_hash: String,
    /// Unix seconds; left unset by training so reruns are byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<u64>,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    instance_id: String,
    encoder_id: String,
    d_tok: usize,
    n_templates_used: usize,
    config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    created_at: Option<u64>,
}

impl PersonaToken {
    pub fn d_tok(&self) -> usize {
        self.values.len()
    }

    /// `PITOK1`, `u32` header length, JSON header, then `d_tok`
    /// little-endian `f64`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            version: TOKEN_VERSION,
            instance_id: self.instance_id.clone(),
            encoder_id: self.encoder_id.clone(),
            d_tok: self.values.len(),
            n_templates_used: self.n_templates_used,
            config_hash: self.config_hash.clone(),
            created_at: self.created_at,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(10 + header.len() + 8 * self.values.len());
        out.extend_from_slice(TOKEN_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |why: &str| Error::corrupt(path, why);
        if bytes.len() < 10 || &bytes[..6] != TOKEN_MAGIC {
            return Err(corrupt("missing PITOK1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(10..10 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let h: Header = serde_json::from_slice(body).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        if h.version != TOKEN_VERSION {
            return Err(Error::Version {
                found: h.version,
                expected: TOKEN_VERSION,
            });
        }
        let rest = &bytes[10 + hlen..];
        if rest.len() != 8 * h.d_tok {
            return Err(corrupt(&format!("expected {} value bytes, found {}", 8 * h.d_tok, rest.len())));
        }
        let values: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(corrupt("non-finite token value"));
        }
        Ok(Self {
            instance_id: h.instance_id,
            encoder_id: h.encoder_id,
            n_templates_used: h.n_templates_used,
            config_hash: h.config_hash,
            created_at: h.created_at,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    /// `L`
    pub total: f64,
    /// `L_t`
    pub text: f64,
    /// `L_i`
    pub image: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    /// Appends the records as JSON lines.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn token() -> PersonaToken {
        PersonaToken {
            instance_id: "dog_0".into(),
            encoder_id: "toy-abc".into(),
            n_templates_used: 3,
            config_hash: "0123".into(),
            created_at: None,
            values: vec![0.1, -2.5, 1e-300],
        }
    }

    #[test]
    fn token_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tok");
        token().save(&p).unwrap();
        let back = PersonaToken::load(&p).unwrap();
        assert_eq!(back, token());
        assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn truncated_token_file_is_corrupt() {
        let bytes = token().to_bytes();
        let p = Path::new("t.tok");
        assert!(matches!(
            PersonaToken::from_bytes(&bytes[..bytes.len() - 3], p),
            Err(Error::Corrupt { .. })
        ));
        assert!(matches!(PersonaToken::from_bytes(b"nope", p), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let log = TrainingLog {
            records: vec![LogRecord {
                step: 0,
                lr: 0.0,
                total: 2.5,
                text: 2.0,
                image: 4.0,
            }],
        };
        log.append_to(&p).unwrap();
        log.append_to(&p).unwrap();
        assert_eq!(TrainingLog::read(&p).unwrap().records.len(), 2);
    }
}
