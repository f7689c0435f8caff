//! JSON manifests describing personalization targets, galleries and query
//! sets. Every manifest carries a `version` field.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::encoder::{mentions, MediaDescriptor};
use crate::error::{Error, Result};
use crate::localize::BoundingBox;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceManifest {
    pub instance_id: String,
    /// Generic category text `y_g`, e.g. `dog`.
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub templates: Vec<MediaDescriptor>,
    /// Extra templates from the evaluation split, used when a profile
    /// trains on both splits.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval_templates: Vec<MediaDescriptor>,
    /// Ground-truth boxes keyed by template media id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub boxes: BTreeMap<String, BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainManifest {
    pub version: u32,
    pub instances: Vec<InstanceManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryItem {
    pub media: MediaDescriptor,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryManifest {
    pub version: u32,
    pub dataset: String,
    pub items: Vec<GalleryItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySetting {
    /// Scene or action text around the persona; exactly one correct match.
    Context,
    /// Persona alone; every item showing the instance is correct.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalQuery {
    pub query_id: String,
    /// Query text; `@instance_id` marks the persona slot.
    pub template: String,
    pub positives: Vec<String>,
    pub setting: QuerySetting,
}

impl EvalQuery {
    pub fn personas(&self) -> Vec<String> {
        mentions(&self.template)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    pub version: u32,
    pub queries: Vec<EvalQuery>,
    /// Media ids of the searchable gallery.
    pub gallery: Vec<String>,
}

/// Best-effort line number of the first occurrence of `needle`.
fn line_of(text: &str, needle: &str) -> Option<usize> {
    text.find(needle).map(|pos| text[..pos].lines().count().max(1))
}

fn located(text: Option<&str>, needle: &str, msg: String) -> Error {
    match text.and_then(|t| line_of(t, needle)) {
        Some(line) => Error::Validation(format!("line {line}: {msg}")),
        None => Error::Validation(msg),
    }
}

fn parse<M: DeserializeOwned>(text: &str, path: &Path) -> Result<M> {
    serde_json::from_str(text).map_err(|e| Error::Validation(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())))
}

fn check_version(found: u32) -> Result<()> {
    if found != MANIFEST_VERSION {
        return Err(Error::Version {
            found,
            expected: MANIFEST_VERSION,
        });
    }
    Ok(())
}

impl TrainManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Self = parse(&text, path)?;
        m.validate_with(Some(&text))?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(None)
    }

    fn validate_with(&self, text: Option<&str>) -> Result<()> {
        check_version(self.version)?;
        let mut seen = HashSet::new();
        let mut media = HashSet::new();
        for inst in &self.instances {
            if !seen.insert(inst.instance_id.as_str()) {
                return Err(located(
                    text,
                    &inst.instance_id,
                    format!("duplicate instance_id `{}`", inst.instance_id),
                ));
            }
            if inst.templates.is_empty() {
                return Err(located(
                    text,
                    &inst.instance_id,
                    format!("instance `{}` has no templates", inst.instance_id),
                ));
            }
            if inst.category.trim().is_empty() {
                return Err(located(
                    text,
                    &inst.instance_id,
                    format!("instance `{}` has an empty category", inst.instance_id),
                ));
            }
            for t in inst.templates.iter().chain(&inst.eval_templates) {
                if !media.insert(t.media_id().to_string()) {
                    return Err(located(text, t.media_id(), format!("duplicate media_id `{}`", t.media_id())));
                }
            }
            for (id, b) in &inst.boxes {
                if !inst.templates.iter().chain(&inst.eval_templates).any(|t| t.media_id() == id) {
                    return Err(located(text, id, format!("box for unknown template `{id}`")));
                }
                b.validate()?;
            }
        }
        Ok(())
    }

    pub fn instance(&self, id: &str) -> Option<&InstanceManifest> {
        self.instances.iter().find(|i| i.instance_id == id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }
}

impl GalleryManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Self = parse(&text, path)?;
        m.validate_with(Some(&text))?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(None)
    }

    fn validate_with(&self, text: Option<&str>) -> Result<()> {
        check_version(self.version)?;
        let mut seen = HashSet::new();
        for item in &self.items {
            let id = item.media.media_id();
            if !seen.insert(id) {
                return Err(located(text, &format!("\"{id}\""), format!("duplicate media_id `{id}`")));
            }
            if let MediaDescriptor::Synthetic(s) = &item.media {
                s.validate()?;
            }
            if item.media.n_frames() == 0 {
                return Err(located(text, id, format!("media `{id}` has no frames")));
            }
        }
        Ok(())
    }

    pub fn by_id(&self) -> HashMap<&str, &GalleryItem> {
        self.items.iter().map(|i| (i.media.media_id(), i)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }
}

impl EvalManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Self = parse(&text, path)?;
        m.validate_with(Some(&text))?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(None)
    }

    fn validate_with(&self, text: Option<&str>) -> Result<()> {
        check_version(self.version)?;
        let gallery: HashSet<&str> = self.gallery.iter().map(String::as_str).collect();
        if gallery.len() != self.gallery.len() {
            let mut seen = HashSet::new();
            let dup = self.gallery.iter().find(|g| !seen.insert(g.as_str())).unwrap();
            return Err(located(text, dup, format!("duplicate media_id `{dup}` in gallery")));
        }
        let mut qids = HashSet::new();
        for q in &self.queries {
            let here = |msg: String| located(text, &format!("\"{}\"", q.query_id), msg);
            if !qids.insert(q.query_id.as_str()) {
                return Err(here(format!("duplicate query_id `{}`", q.query_id)));
            }
            match q.setting {
                QuerySetting::Context if q.positives.len() != 1 => {
                    return Err(here(format!(
                        "context query `{}` has {} positives; context queries have exactly one correct match",
                        q.query_id,
                        q.positives.len()
                    )))
                }
                QuerySetting::Generic if q.positives.is_empty() => {
                    return Err(here(format!("generic query `{}` has no positives", q.query_id)))
                }
                _ => {}
            }
            if let Some(p) = q.positives.iter().find(|p| !gallery.contains(p.as_str())) {
                return Err(here(format!("query `{}` lists positive `{p}` not in the gallery", q.query_id)));
            }
        }
        Ok(())
    }

    /// Cross-checks the query set against a gallery and a training manifest.
    pub fn validate_against(&self, gallery: &GalleryManifest, train: Option<&TrainManifest>) -> Result<()> {
        let ids = gallery.by_id();
        if let Some(missing) = self.gallery.iter().find(|g| !ids.contains_key(g.as_str())) {
            return Err(Error::Validation(format!("eval gallery references unknown media `{missing}`")));
        }
        if let Some(train) = train {
            for q in &self.queries {
                for p in q.personas() {
                    if train.instance(&p).is_none() {
                        return Err(Error::Validation(format!(
                            "query `{}` mentions `@{p}`, which is not a training instance",
                            q.query_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }
}

pub(crate) fn save_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    crate::io::atomic_write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::SyntheticMediaDescriptor;

    fn gallery() -> GalleryManifest {
        GalleryManifest {
            version: MANIFEST_VERSION,
            dataset: "synthetic".into(),
            items: ["g1", "g2"]
                .iter()
                .map(|id| GalleryItem {
                    media: MediaDescriptor::Synthetic(SyntheticMediaDescriptor::image(*id, "dog_0", "park", 0.3)),
                    labels: BTreeMap::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn duplicate_media_id_is_named() {
        let mut g = gallery();
        g.items.push(g.items[0].clone());
        let text = serde_json::to_string_pretty(&g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        std::fs::write(&p, text).unwrap();
        let err = GalleryManifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("g1") && err.contains("line"), "{err}");
    }

    #[test]
    fn context_query_needs_exactly_one_positive() {
        let m = EvalManifest {
            version: MANIFEST_VERSION,
            gallery: vec!["g1".into(), "g2".into()],
            queries: vec![EvalQuery {
                query_id: "q".into(),
                template: "a photo of @dog_0 in the park".into(),
                positives: vec!["g1".into(), "g2".into()],
                setting: QuerySetting::Context,
            }],
        };
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("exactly one correct match"), "{err}");
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.json");
        std::fs::write(&p, "{\n  \"version\": 1,\n  \"queries\": 3\n}").unwrap();
        let err = EvalManifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut g = gallery();
        g.version = 7;
        assert!(matches!(g.validate(), Err(Error::Version { found: 7, .. })));
    }
}
