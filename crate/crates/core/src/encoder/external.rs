//! Out-of-process encoder adapter.
//!
//! The adapter runs a user-supplied program:
//!
//! * `<program> <args…> describe` prints an [`EncoderPairDescriptor`] as JSON.
//! * `<program> <args…> encode <requests.jsonl> <output>` reads one
//!   [`Request`] per line and writes one exchange record per request (text
//!   or `PIEMB1` binary). Gradient requests produce one token-space record
//!   per injection, with ids `<request id>/<k>`.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::exchange::{self, ExchangeRecord};
use super::{Embedding, EncoderPair, EncoderPairDescriptor, MediaDescriptor, Space, TokenElement, TokenSequence};
use crate::error::{Error, Result};
use crate::scalar::{cast_vec, Scalar};

/// Wire form of a token: a vocabulary word or a continuous vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireToken {
    Word(String),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Image {
        id: String,
        media: MediaDescriptor,
    },
    Text {
        id: String,
        tokens: Vec<WireToken>,
    },
    TextGrad {
        id: String,
        tokens: Vec<WireToken>,
        upstream: Vec<f64>,
    },
}

impl Request {
    pub fn id(&self) -> &str {
        match self {
            Request::Image { id, .. } | Request::Text { id, .. } | Request::TextGrad { id, .. } => id,
        }
    }
}

pub struct ExternalEncoder {
    program: PathBuf,
    args: Vec<String>,
    descriptor: EncoderPairDescriptor,
    words: Mutex<Interner>,
    image_cache: Mutex<HashMap<String, Vec<f64>>>,
}

#[derive(Default)]
struct Interner {
    ids: HashMap<String, u32>,
    words: Vec<String>,
}

impl ExternalEncoder {
    /// Starts the adapter by asking the program to describe itself.
    pub fn spawn(program: impl Into<PathBuf>, args: Vec<String>) -> Result<Self> {
        let program = program.into();
        let out = run(&program, &args, &["describe".into()])?;
        let descriptor: EncoderPairDescriptor =
            serde_json::from_slice(&out).map_err(|e| Error::External(format!("bad describe output: {e}")))?;
        descriptor.validate()?;
        Ok(Self {
            program,
            args,
            descriptor,
            words: Mutex::default(),
            image_cache: Mutex::default(),
        })
    }

    /// Sends a batch of requests and returns the records in output order.
    pub fn call(&self, requests: &[Request]) -> Result<Vec<ExchangeRecord>> {
        let dir = tempfile::tempdir()?;
        let req_path = dir.path().join("requests.jsonl");
        let out_path = dir.path().join("output");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&req_path)?);
        for r in requests {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        run(
            &self.program,
            &self.args,
            &["encode".into(), req_path.display().to_string(), out_path.display().to_string()],
        )?;
        exchange::read(&out_path)
    }

    fn wire(&self, seq: &TokenSequence<impl Scalar>) -> Result<Vec<WireToken>> {
        let words = self.words.lock().expect("interner poisoned");
        seq.elements()
            .iter()
            .map(|e| match e {
                TokenElement::Word(id) => words
                    .words
                    .get(*id as usize)
                    .cloned()
                    .map(WireToken::Word)
                    .ok_or(Error::Vocabulary(*id)),
                TokenElement::Continuous(v) => Ok(WireToken::Vector(cast_vec(v))),
            })
            .collect()
    }

    fn joint_record<T: Scalar>(&self, rec: &ExchangeRecord, id: &str) -> Result<Embedding<T>> {
        if rec.id != id || rec.space != Space::Joint || rec.values.len() != self.descriptor.d_joint {
            return Err(Error::External(format!(
                "expected joint record `{id}` of dimension {}, got `{}` ({}, {})",
                self.descriptor.d_joint,
                rec.id,
                rec.space.as_str(),
                rec.values.len()
            )));
        }
        Embedding::joint(cast_vec(&rec.values))
    }
}

fn run(program: &PathBuf, args: &[String], extra: &[String]) -> Result<Vec<u8>> {
    let out = Command::new(program)
        .args(args)
        .args(extra)
        .output()
        .map_err(|e| Error::External(format!("{}: {e}", program.display())))?;
    if !out.status.success() {
        return Err(Error::External(format!(
            "{} exited with {}: {}",
            program.display(),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(out.stdout)
}

impl<T: Scalar> EncoderPair<T> for ExternalEncoder {
    fn descriptor(&self) -> &EncoderPairDescriptor {
        &self.descriptor
    }

    fn encode_image(&self, media: &MediaDescriptor) -> Result<Embedding<T>> {
        Ok(self.encode_images(std::slice::from_ref(media))?.remove(0))
    }

    fn encode_images(&self, media: &[MediaDescriptor]) -> Result<Vec<Embedding<T>>> {
        let key = |m: &MediaDescriptor| serde_json::to_string(m).expect("descriptor serializes");
        let missing: Vec<Request> = {
            let cache = self.image_cache.lock().expect("cache poisoned");
            let mut seen = std::collections::HashSet::new();
            media
                .iter()
                .filter(|m| !cache.contains_key(&key(m)) && seen.insert(key(m)))
                .enumerate()
                .map(|(i, m)| Request::Image {
                    id: format!("img{i}"),
                    media: m.clone(),
                })
                .collect()
        };
        if !missing.is_empty() {
            let records = self.call(&missing)?;
            if records.len() != missing.len() {
                return Err(Error::External(format!("{} requests but {} records", missing.len(), records.len())));
            }
            let mut cache = self.image_cache.lock().expect("cache poisoned");
            for (req, rec) in missing.iter().zip(&records) {
                let emb: Embedding<f64> = self.joint_record(rec, req.id())?;
                if let Request::Image { media, .. } = req {
                    cache.insert(key(media), emb.into_values());
                }
            }
        }
        let cache = self.image_cache.lock().expect("cache poisoned");
        media.iter().map(|m| Embedding::joint(cast_vec(&cache[&key(m)]))).collect()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut w = self.words.lock().expect("interner poisoned");
        Ok(text
            .split_whitespace()
            .map(|word| {
                if let Some(&id) = w.ids.get(word) {
                    return id;
                }
                let id = w.words.len() as u32;
                w.words.push(word.to_string());
                w.ids.insert(word.to_string(), id);
                id
            })
            .collect())
    }

    fn encode_text(&self, seq: &TokenSequence<T>) -> Result<Embedding<T>> {
        seq.validate(self.descriptor.d_tok)?;
        let req = Request::Text {
            id: "t".into(),
            tokens: self.wire(seq)?,
        };
        let records = self.call(std::slice::from_ref(&req))?;
        let rec = records.first().ok_or_else(|| Error::External("no record returned".into()))?;
        self.joint_record(rec, "t")
    }

    fn encode_text_grad(&self, seq: &TokenSequence<T>, upstream: &[T]) -> Result<Vec<Vec<T>>> {
        seq.validate(self.descriptor.d_tok)?;
        let n = seq.injection_positions().len();
        if n == 0 {
            return Err(Error::Usage("gradient requested for a sequence without injections".into()));
        }
        let req = Request::TextGrad {
            id: "g".into(),
            tokens: self.wire(seq)?,
            upstream: cast_vec(upstream),
        };
        let records = self.call(std::slice::from_ref(&req))?;
        if records.len() != n {
            return Err(Error::External(format!("expected {n} gradient records, got {}", records.len())));
        }
        records
            .iter()
            .enumerate()
            .map(|(k, r)| {
                if r.id != format!("g/{k}") || r.space != Space::Token || r.values.len() != self.descriptor.d_tok {
                    return Err(Error::External(format!("unexpected gradient record `{}`", r.id)));
                }
                Ok(cast_vec(&r.values))
            })
            .collect()
    }
}

/// Serves `encode` requests with an in-process encoder, producing the
/// output an external program is expected to write. Used by the CLI's
/// reference adapter and by tests.
pub fn serve_requests<E: EncoderPair<f64> + ?Sized>(encoder: &E, requests: &[Request]) -> Result<Vec<ExchangeRecord>> {
    let mut out = Vec::new();
    let to_seq = |tokens: &[WireToken]| -> Result<TokenSequence<f64>> {
        let mut elements = Vec::new();
        for t in tokens {
            match t {
                WireToken::Word(w) => elements.extend(encoder.tokenize(w)?.into_iter().map(TokenElement::Word)),
                WireToken::Vector(v) => elements.push(TokenElement::Continuous(v.clone())),
            }
        }
        Ok(TokenSequence::new(elements))
    };
    for r in requests {
        match r {
            Request::Image { id, media } => out.push(ExchangeRecord {
                id: id.clone(),
                space: Space::Joint,
                values: encoder.encode_image(media)?.into_values(),
            }),
            Request::Text { id, tokens } => out.push(ExchangeRecord {
                id: id.clone(),
                space: Space::Joint,
                values: encoder.encode_text(&to_seq(tokens)?)?.into_values(),
            }),
            Request::TextGrad { id, tokens, upstream } => {
                for (k, g) in encoder.encode_text_grad(&to_seq(tokens)?, upstream)?.into_iter().enumerate() {
                    out.push(ExchangeRecord {
                        id: format!("{id}/{k}"),
                        space: Space::Token,
                        values: g,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Parses a JSON-lines request file.
pub fn read_requests(text: &str) -> Result<Vec<Request>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Decode(format!("request line {}: {e}", i + 1))))
        .collect()
}
