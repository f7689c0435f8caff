//! Embedding index, query composition, scoring, ranking and metrics.

mod metrics;
mod store;

pub use metrics::{average_precision, compute_metrics, max_tr5, MetricsReport, QueryOutcome};
pub use store::{INDEX_MAGIC, INDEX_VERSION};

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{compose_sequence, mentions, Embedding, EncoderPair, MediaDescriptor};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::scalar::{cast_vec, Scalar};
use crate::trainer::PersonaToken;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Image,
    Video,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry<T> {
    pub media_id: String,
    pub kind: MediaKind,
    /// One vector for an image, one per sampled frame for a video.
    pub embeddings: Vec<Vec<T>>,
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index<T> {
    pub encoder_id: String,
    pub d_joint: usize,
    entries: Vec<IndexEntry<T>>,
    ids: HashSet<String>,
}

impl<T: Scalar> Index<T> {
    pub fn new(encoder_id: impl Into<String>, d_joint: usize) -> Self {
        Self {
            encoder_id: encoder_id.into(),
            d_joint,
            entries: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn entries(&self) -> &[IndexEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, media_id: &str) -> Option<&IndexEntry<T>> {
        self.entries.iter().find(|e| e.media_id == media_id)
    }

    pub fn insert(&mut self, entry: IndexEntry<T>) -> Result<()> {
        if entry.embeddings.is_empty() {
            return Err(Error::Validation(format!("`{}` has no embeddings", entry.media_id)));
        }
        if entry.kind == MediaKind::Image && entry.embeddings.len() != 1 {
            return Err(Error::Validation(format!(
                "image `{}` must have exactly one embedding",
                entry.media_id
            )));
        }
        if let Some(e) = entry.embeddings.iter().find(|e| e.len() != self.d_joint) {
            return Err(Error::Shape(format!(
                "`{}` has an embedding of length {}, index expects {}",
                entry.media_id,
                e.len(),
                self.d_joint
            )));
        }
        if !self.ids.insert(entry.media_id.clone()) {
            return Err(Error::Validation(format!("duplicate media id `{}`", entry.media_id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Embeds every item (in parallel) and inserts it in input order.
    pub fn build<E: EncoderPair<T> + ?Sized>(encoder: &E, items: &[(MediaDescriptor, BTreeMap<String, String>)]) -> Result<Self> {
        let d = encoder.descriptor();
        let entries: Vec<IndexEntry<T>> = items
            .par_iter()
            .map(|(m, labels)| {
                let embeddings = encoder.encode_frames(m)?.into_iter().map(Embedding::into_values).collect();
                Ok(IndexEntry {
                    media_id: m.media_id().to_string(),
                    kind: if m.is_video() { MediaKind::Video } else { MediaKind::Image },
                    embeddings,
                    labels: labels.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let mut index = Self::new(d.encoder_id.clone(), d.d_joint);
        for e in entries {
            index.insert(e)?;
        }
        Ok(index)
    }
}

/// Dot product for an image, maximum over frames for a video.
pub fn score<T: Scalar>(query: &[T], entry: &IndexEntry<T>) -> Result<T> {
    let mut best = T::neg_infinity();
    for e in &entry.embeddings {
        if e.len() != query.len() {
            return Err(Error::Shape(format!(
                "query has length {}, `{}` has length {}",
                query.len(),
                entry.media_id,
                e.len()
            )));
        }
        best = best.max(dot(query, e));
    }
    if entry.embeddings.is_empty() {
        return Err(Error::Validation(format!("`{}` has no embeddings", entry.media_id)));
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub media_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub hits: Vec<Hit>,
}

impl RankedResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.media_id.as_str()).collect()
    }
}

/// Descending score, then ascending media id.
pub fn hit_order<T: Scalar>(a: (&str, T), b: (&str, T)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(b.0))
}

/// Top `k` entries (all of them when `k` exceeds the index size).
pub fn rank<T: Scalar>(query: &[T], index: &Index<T>, k: usize) -> Result<RankedResult> {
    if k == 0 {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if !crate::linalg::all_finite(query) {
        return Err(Error::Domain("query embedding is not finite".into()));
    }
    let mut scored: Vec<(&str, T)> = index
        .entries
        .iter()
        .map(|e| Ok((e.media_id.as_str(), score(query, e)?)))
        .collect::<Result<_>>()?;
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |a, b| hit_order(*a, *b));
        scored.truncate(k);
    }
    scored.sort_by(|a, b| hit_order(*a, *b));
    Ok(RankedResult {
        hits: scored
            .into_iter()
            .map(|(id, s)| Hit {
                media_id: id.to_string(),
                score: s.to_f64_lossy(),
            })
            .collect(),
    })
}

/// Persona tokens available to queries, keyed by mention name.
pub type Bindings = BTreeMap<String, PersonaToken>;

/// Encodes `template`, injecting the bound token at every `@name` (and
/// `<tok>`) placeholder.
pub fn compose_query<T: Scalar, E: EncoderPair<T> + ?Sized>(encoder: &E, template: &str, tokens: &Bindings) -> Result<Embedding<T>> {
    for name in mentions(template) {
        let tok = tokens.get(&name).ok_or_else(|| Error::Unbound(name.clone()))?;
        if tok.encoder_id != encoder.encoder_id() {
            return Err(Error::EncoderMismatch {
                token: tok.encoder_id.clone(),
                active: encoder.encoder_id().to_string(),
            });
        }
    }
    let seq = compose_sequence(encoder, template, |name| tokens.get(name).map(|t| cast_vec(&t.values)))?;
    encoder.encode_text(&seq)
}

/// Encodes `template` with an explicit vector bound to every placeholder,
/// e.g. a mapped image for image-as-query search.
pub fn compose_query_with_vector<T: Scalar, E: EncoderPair<T> + ?Sized>(encoder: &E, template: &str, token: &[T]) -> Result<Embedding<T>> {
    let seq = compose_sequence(encoder, template, |_| Some(token.to_vec()))?;
    encoder.encode_text(&seq)
}

/// Human-readable account of how a query was resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDescription {
    pub text: String,
    pub personas: Vec<ResolvedPersona>,
    pub encoder_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPersona {
    pub mention: String,
    pub instance_id: String,
    pub n_templates_used: usize,
    pub config_hash: String,
}

pub fn describe_query(template: &str, tokens: &Bindings, encoder_id: &str) -> Result<QueryDescription> {
    let mut personas = Vec::new();
    for name in mentions(template) {
        let t = tokens.get(&name).ok_or_else(|| Error::Unbound(name.clone()))?;
        personas.push(ResolvedPersona {
            mention: name,
            instance_id: t.instance_id.clone(),
            n_templates_used: t.n_templates_used,
            config_hash: t.config_hash.clone(),
        });
    }
    Ok(QueryDescription {
        text: template.to_string(),
        personas,
        encoder_id: encoder_id.to_string(),
    })
}

/// A resolved query with its ranked hits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub query: QueryDescription,
    pub hits: Vec<Hit>,
}

/// Composes, describes and ranks `text` against `index`. An empty index
/// yields no hits.
pub fn search<E: EncoderPair<f64> + ?Sized>(
    encoder: &E,
    index: &Index<f64>,
    text: &str,
    k: usize,
    tokens: &Bindings,
) -> Result<SearchOutcome> {
    if k == 0 {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    let query = describe_query(text, tokens, encoder.encoder_id())?;
    let emb = compose_query(encoder, text, tokens)?;
    let hits = match rank(emb.values(), index, k) {
        Ok(r) => r.hits,
        Err(Error::EmptyIndex) => Vec::new(),
        Err(e) => return Err(e),
    };
    Ok(SearchOutcome { query, hits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, frames: Vec<Vec<f64>>) -> IndexEntry<f64> {
        IndexEntry {
            media_id: id.into(),
            kind: if frames.len() > 1 { MediaKind::Video } else { MediaKind::Image },
            embeddings: frames,
            labels: BTreeMap::new(),
        }
    }

    #[test]
    fn video_scores_take_the_best_frame() {
        let q = [1.0, 0.0];
        let v = entry("v", vec![vec![0.2, 1.0], vec![0.8, 0.0], vec![0.5, 3.0]]);
        assert_eq!(score(&q, &v).unwrap(), 0.8);
        let single = entry("s", vec![vec![0.3, 0.7]]);
        assert_eq!(score(&q, &single).unwrap(), dot(&q, &[0.3, 0.7]));
        assert_eq!(score(&[0.0, 1.0], &entry("o", vec![vec![1.0, 0.0], vec![2.0, 0.0]])).unwrap(), 0.0);
        assert!(score(&[1.0], &single).is_err());
    }

    #[test]
    fn ties_break_by_media_id() {
        let mut idx = Index::new("e", 2);
        for id in ["c", "a", "b"] {
            idx.insert(entry(id, vec![vec![1.0, 0.0]])).unwrap();
        }
        let r = rank(&[1.0, 0.0], &idx, 2).unwrap();
        assert_eq!(r.ids(), vec!["a", "b"]);
        assert_eq!(rank(&[1.0, 0.0], &idx, 10).unwrap().hits.len(), 3);
        assert!(matches!(rank(&[1.0, 0.0], &Index::<f64>::new("e", 2), 1), Err(Error::EmptyIndex)));
        assert!(idx.insert(entry("a", vec![vec![0.0, 1.0]])).is_err());
    }
}
