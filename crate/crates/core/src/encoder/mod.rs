//! Frozen encoder-pair contract.
//!
//! An [`EncoderPair`] bundles an image encoder and a text encoder that share
//! a joint embedding space. The text side accepts continuous pseudo-tokens
//! injected at the token-embedding layer and exposes the gradient of a
//! linear probe of its output with respect to those injections, which is all
//! the mapping network needs to train through a frozen text encoder.

pub mod exchange;
pub mod external;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::world::SyntheticMediaDescriptor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderPairDescriptor {
    pub encoder_id: String,
    pub d_joint: usize,
    pub d_tok: usize,
    pub normalizes_output: bool,
}

impl EncoderPairDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.d_joint < 2 {
            return Err(Error::Config(format!("d_joint must be >= 2, got {}", self.d_joint)));
        }
        if self.d_tok < 1 {
            return Err(Error::Config("d_tok must be >= 1".into()));
        }
        if self.encoder_id.is_empty() {
            return Err(Error::Config("encoder_id must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Joint,
    Token,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Joint => "joint",
            Space::Token => "token",
        }
    }
}

impl std::str::FromStr for Space {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Space::Joint),
            "token" => Ok(Space::Token),
            other => Err(Error::Decode(format!("unknown embedding space `{other}`"))),
        }
    }
}

/// A finite real vector tagged with the space it lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    values: Vec<T>,
    space: Space,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(values: Vec<T>, space: Space) -> Result<Self> {
        if !linalg::all_finite(&values) {
            return Err(Error::Domain("embedding contains non-finite values".into()));
        }
        Ok(Self { values, space })
    }

    pub fn joint(values: Vec<T>) -> Result<Self> {
        Self::new(values, Space::Joint)
    }

    pub fn token(values: Vec<T>) -> Result<Self> {
        Self::new(values, Space::Token)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Embedding<U> {
        Embedding {
            values: crate::scalar::cast_vec(&self.values),
            space: self.space,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenElement<T> {
    Word(u32),
    Continuous(Vec<T>),
}

/// Mixed sequence of vocabulary ids and continuous token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    elements: Vec<TokenElement<T>>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(elements: Vec<TokenElement<T>>) -> Self {
        Self { elements }
    }

    pub fn from_words(ids: &[u32]) -> Self {
        Self::new(ids.iter().map(|&i| TokenElement::Word(i)).collect())
    }

    pub fn elements(&self) -> &[TokenElement<T>] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Strictly increasing indices of the continuous elements.
    pub fn injection_positions(&self) -> Vec<usize> {
        self.elements
            .iter()
            .enumerate()
            .filter_map(|(i, e)| matches!(e, TokenElement::Continuous(_)).then_some(i))
            .collect()
    }

    pub fn validate(&self, d_tok: usize) -> Result<()> {
        if self.elements.is_empty() {
            return Err(Error::Usage("empty token sequence".into()));
        }
        for (i, e) in self.elements.iter().enumerate() {
            if let TokenElement::Continuous(v) = e {
                if v.len() != d_tok {
                    return Err(Error::Shape(format!(
                        "continuous token at position {i} has length {}, encoder expects {d_tok}",
                        v.len()
                    )));
                }
                if !linalg::all_finite(v) {
                    return Err(Error::Domain(format!("continuous token at position {i} is not finite")));
                }
            }
        }
        Ok(())
    }
}

/// Reference to one piece of visual media.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MediaDescriptor {
    Synthetic(SyntheticMediaDescriptor),
    Image {
        media_id: String,
        path: PathBuf,
    },
    /// Frames already dumped to disk (one file per sampled frame).
    Video {
        media_id: String,
        frames: Vec<PathBuf>,
    },
}

impl MediaDescriptor {
    pub fn media_id(&self) -> &str {
        match self {
            MediaDescriptor::Synthetic(s) => &s.media_id,
            MediaDescriptor::Image { media_id, .. } | MediaDescriptor::Video { media_id, .. } => media_id,
        }
    }

    pub fn is_video(&self) -> bool {
        match self {
            MediaDescriptor::Synthetic(s) => s.is_video,
            MediaDescriptor::Image { .. } => false,
            MediaDescriptor::Video { .. } => true,
        }
    }

    pub fn n_frames(&self) -> usize {
        match self {
            MediaDescriptor::Synthetic(s) => s.n_frames as usize,
            MediaDescriptor::Image { .. } => 1,
            MediaDescriptor::Video { frames, .. } => frames.len(),
        }
    }

    /// Single-frame descriptor for frame `k` (identity for images).
    pub fn frame(&self, k: usize) -> Result<MediaDescriptor> {
        if k >= self.n_frames() {
            return Err(Error::Usage(format!(
                "frame {k} out of range for `{}` with {} frames",
                self.media_id(),
                self.n_frames()
            )));
        }
        Ok(match self {
            MediaDescriptor::Synthetic(s) if s.is_video => MediaDescriptor::Synthetic(s.frame(k as u32)),
            MediaDescriptor::Video { media_id, frames } => MediaDescriptor::Image {
                media_id: format!("{media_id}#{k}"),
                path: frames[k].clone(),
            },
            other => other.clone(),
        })
    }

    pub fn frames(&self) -> Result<Vec<MediaDescriptor>> {
        (0..self.n_frames()).map(|k| self.frame(k)).collect()
    }
}

/// A frozen image/text encoder pair sharing a joint embedding space.
pub trait EncoderPair<T: Scalar>: Send + Sync {
    fn descriptor(&self) -> &EncoderPairDescriptor;

    /// Embeds one image or video frame. Videos are embedded as the mean of
    /// their frame embeddings.
    fn encode_image(&self, media: &MediaDescriptor) -> Result<Embedding<T>>;

    /// Maps free text to vocabulary ids. Never fails on unknown words;
    /// encoders map them to out-of-vocabulary ids.
    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;

    fn encode_text(&self, seq: &TokenSequence<T>) -> Result<Embedding<T>>;

    /// Gradient of `upstream · encode_text(seq)` with respect to each
    /// injected continuous element, in injection order.
    fn encode_text_grad(&self, seq: &TokenSequence<T>, upstream: &[T]) -> Result<Vec<Vec<T>>>;

    /// Per-frame embeddings (one entry for a still image).
    fn encode_frames(&self, media: &MediaDescriptor) -> Result<Vec<Embedding<T>>> {
        if !media.is_video() {
            return Ok(vec![self.encode_image(media)?]);
        }
        media.frames()?.iter().map(|f| self.encode_image(f)).collect()
    }

    fn encode_images(&self, media: &[MediaDescriptor]) -> Result<Vec<Embedding<T>>> {
        media.iter().map(|m| self.encode_image(m)).collect()
    }

    fn encoder_id(&self) -> &str {
        &self.descriptor().encoder_id
    }

    fn encode_plain_text(&self, text: &str) -> Result<Embedding<T>> {
        let ids = self.tokenize(text)?;
        self.encode_text(&TokenSequence::from_words(&ids))
    }
}

/// Placeholder syntax recognised when composing sequences from text.
pub const TOKEN_PLACEHOLDER: &str = "<tok>";

/// Splits `text` on whitespace; each word for which `bind` returns a vector
/// becomes a continuous injection, everything else is tokenized by the
/// encoder. Words that look like placeholders but are unbound fail with
/// [`Error::Unbound`].
pub fn compose_sequence<T: Scalar, E: EncoderPair<T> + ?Sized>(
    encoder: &E,
    text: &str,
    mut bind: impl FnMut(&str) -> Option<Vec<T>>,
) -> Result<TokenSequence<T>> {
    let mut elements = Vec::new();
    let mut pending = String::new();
    let flush = |pending: &mut String, elements: &mut Vec<TokenElement<T>>| -> Result<()> {
        if !pending.trim().is_empty() {
            elements.extend(encoder.tokenize(pending)?.into_iter().map(TokenElement::Word));
        }
        pending.clear();
        Ok(())
    };
    for word in text.split_whitespace() {
        let (core, trailing) = split_trailing_punct(word);
        if let Some(name) = placeholder_name(core) {
            flush(&mut pending, &mut elements)?;
            let v = bind(name).ok_or_else(|| Error::Unbound(name.to_string()))?;
            elements.push(TokenElement::Continuous(v));
            pending.push_str(trailing);
            pending.push(' ');
        } else {
            pending.push_str(word);
            pending.push(' ');
        }
    }
    flush(&mut pending, &mut elements)?;
    let seq = TokenSequence::new(elements);
    seq.validate(encoder.descriptor().d_tok)?;
    Ok(seq)
}

/// Returns the binding name of a placeholder word: `<tok>` binds `tok`,
/// `@name` binds `name`.
pub fn placeholder_name(word: &str) -> Option<&str> {
    if word == TOKEN_PLACEHOLDER {
        return Some("tok");
    }
    let name = word.strip_prefix('@')?;
    (!name.is_empty() && name.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-')).then_some(name)
}

fn split_trailing_punct(word: &str) -> (&str, &str) {
    let end = word
        .char_indices()
        .rev()
        .take_while(|(_, c)| matches!(c, ',' | '.' | '!' | '?' | ';' | ':'))
        .last()
        .map(|(i, _)| i)
        .unwrap_or(word.len());
    word.split_at(end)
}

/// Names of all placeholders mentioned in `text`, in order of appearance.
pub fn mentions(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| placeholder_name(split_trailing_punct(w).0).map(str::to_string))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_parsing() {
        assert_eq!(placeholder_name("<tok>"), Some("tok"));
        assert_eq!(placeholder_name("@chia"), Some("chia"));
        assert_eq!(placeholder_name("@"), None);
        assert_eq!(placeholder_name("chia"), None);
        assert_eq!(mentions("@chia, playing with @rex."), vec!["chia", "rex"]);
    }

    #[test]
    fn injection_positions_are_strictly_increasing() {
        let seq: TokenSequence<f64> = TokenSequence::new(vec![
            TokenElement::Word(1),
            TokenElement::Continuous(vec![0.0; 3]),
            TokenElement::Word(2),
            TokenElement::Continuous(vec![1.0; 3]),
        ]);
        assert_eq!(seq.injection_positions(), vec![1, 3]);
        assert!(seq.validate(3).is_ok());
        assert!(matches!(seq.validate(4), Err(Error::Shape(_))));
    }

    #[test]
    fn embeddings_reject_non_finite_values() {
        assert!(Embedding::joint(vec![1.0, f64::NAN]).is_err());
        assert!(Embedding::joint(vec![1.0, 2.0]).is_ok());
    }
}
