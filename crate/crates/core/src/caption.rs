//! Detailed instance descriptions from a localized template via a
//! pluggable LLM client, with prompt templates and a persistent cache.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::Engine as _;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::MediaDescriptor;
use crate::error::{Error, Result};
use crate::seed::{sha256_hex, substream};
use crate::world::World;

pub const DEFAULT_TEMPLATE_ID: &str = "detailed-v1";
pub const DEFAULT_PROMPT: &str = "Describe the {category} inside the red ellipse in one detailed sentence: breed/type, colors, markings, size, and distinctive features. Do not mention the background.";

/// Environment variables read by [`HttpLlm::from_env`].
pub const ENV_ENDPOINT: &str = "PIMAP_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "PIMAP_LLM_MODEL";
pub const ENV_API_KEY: &str = "PIMAP_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSource {
    Llm,
    Mock,
    User,
    /// `a photo of a {category}` when neither a client nor a user caption
    /// is available.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    templates: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            templates: [(DEFAULT_TEMPLATE_ID.to_string(), DEFAULT_PROMPT.to_string())]
                .into_iter()
                .collect(),
        }
    }
}

impl PromptTemplates {
    pub fn insert(&mut self, id: impl Into<String>, text: impl Into<String>) {
        self.templates.insert(id.into(), text.into());
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    /// Substitutes `{category}`; templates without it come back verbatim.
    pub fn render(&self, template_id: &str, category: &str) -> Result<String> {
        let t = self
            .get(template_id)
            .ok_or_else(|| Error::Validation(format!("unknown prompt template `{template_id}`")))?;
        if category.trim().is_empty() {
            return Err(Error::Validation("generic category must not be empty".into()));
        }
        Ok(t.replace("{category}", category))
    }
}

pub fn render_prompt(template_id: &str, category: &str) -> Result<String> {
    PromptTemplates::default().render(template_id, category)
}

#[derive(Debug, Clone)]
pub struct AugmentRequest {
    pub media_id: String,
    /// Localized template.
    pub media: MediaDescriptor,
    pub category: String,
    pub template_id: String,
    pub seed_caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedCaption {
    pub text: String,
    pub source: CaptionSource,
    pub template_id: String,
    pub created_at: u64,
    /// SHA-256 of `text`.
    pub content_hash: String,
}

impl AugmentedCaption {
    pub fn new(text: String, source: CaptionSource, template_id: &str) -> Self {
        Self {
            content_hash: sha256_hex(text.as_bytes()),
            text,
            source,
            template_id: template_id.to_string(),
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    pub fn is_consistent(&self) -> bool {
        !self.text.trim().is_empty() && self.content_hash == sha256_hex(self.text.as_bytes())
    }
}

/// One client call.
#[derive(Debug, Clone)]
pub struct LlmCall<'a> {
    pub key: &'a str,
    pub media: &'a MediaDescriptor,
    pub image_png: Option<&'a [u8]>,
    pub prompt: &'a str,
}

pub trait LlmClient: Send + Sync {
    fn describe(&self, call: &LlmCall<'_>) -> Result<String>;

    fn source(&self) -> CaptionSource {
        CaptionSource::Llm
    }
}

/// Deterministic stand-in that never looks at pixels: picks a few
/// descriptive words from a seeded stream keyed by the call.
#[derive(Debug, Clone)]
pub struct MockLlm {
    pub seed: u64,
}

const MOCK_WORDS: &[&str] = &[
    "small",
    "bright",
    "striped",
    "worn",
    "glossy",
    "patterned",
    "round",
    "dark",
    "pale",
    "tall",
];

impl LlmClient for MockLlm {
    fn describe(&self, call: &LlmCall<'_>) -> Result<String> {
        let mut rng = substream(self.seed, &format!("mock-llm/{}", call.key));
        let words: Vec<&str> = MOCK_WORDS.choose_multiple(&mut rng, 3).copied().collect();
        Ok(format!("a {} object, {}", words.join(" "), call.media.media_id()))
    }

    fn source(&self) -> CaptionSource {
        CaptionSource::Mock
    }
}

/// Mock that reads the planted attributes of synthetic media and returns
/// the instance's full description, plus the background for unlocalized
/// media. Fails on non-synthetic media.
#[derive(Debug, Clone)]
pub struct WorldCaptioner {
    pub world: Arc<World>,
}

impl LlmClient for WorldCaptioner {
    fn describe(&self, call: &LlmCall<'_>) -> Result<String> {
        match call.media {
            MediaDescriptor::Synthetic(s) => {
                let inst = self.world.instance(&s.instance_id)?;
                let text = self.world.full_description(inst);
                if s.localized {
                    Ok(text)
                } else {
                    // Without the ellipse the description covers the whole scene.
                    Ok(format!("{text} in the {}", s.background_id))
                }
            }
            other => Err(Error::External(format!("`{}` is not synthetic media", other.media_id()))),
        }
    }

    fn source(&self) -> CaptionSource {
        CaptionSource::Mock
    }
}

/// Answers from previously recorded captions keyed by request key.
#[derive(Debug, Clone, Default)]
pub struct ReplayLlm {
    pub captions: HashMap<String, String>,
}

impl ReplayLlm {
    pub fn from_cache_file(path: &Path) -> Result<Self> {
        let captions = read_cache_records(path)?.into_iter().map(|r| (r.key, r.caption.text)).collect();
        Ok(Self { captions })
    }
}

impl LlmClient for ReplayLlm {
    fn describe(&self, call: &LlmCall<'_>) -> Result<String> {
        self.captions
            .get(call.key)
            .cloned()
            .ok_or_else(|| Error::External(format!("no recorded caption for key {}", call.key)))
    }
}

/// Client for an OpenAI-style chat-completions endpoint.
#[derive(Debug, Clone)]
pub struct HttpLlm {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
}

impl HttpLlm {
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty())?;
        Some(Self {
            endpoint,
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".into()),
            api_key: std::env::var(ENV_API_KEY).ok(),
        })
    }

    pub fn request_body(&self, call: &LlmCall<'_>) -> serde_json::Value {
        let mut content = vec![serde_json::json!({"type": "text", "text": call.prompt})];
        if let Some(png) = call.image_png {
            let b64 = base64::engine::general_purpose::STANDARD.encode(png);
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{b64}")}
            }));
        }
        serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

impl LlmClient for HttpLlm {
    fn describe(&self, call: &LlmCall<'_>) -> Result<String> {
        let body = serde_json::to_string(&self.request_body(call))?;
        let mut req = ureq::post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req
            .send(body.as_str())
            .map_err(|e| Error::External(format!("{}: {e}", self.endpoint)))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::External(format!("{}: {e}", self.endpoint)))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::External("response has no message content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub caption: AugmentedCaption,
}

fn read_cache_records(path: &Path) -> Result<Vec<CacheRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // a torn final line from an interrupted append is skipped
        match serde_json::from_str::<CacheRecord>(&line) {
            Ok(r) => out.push(r),
            Err(e) => tracing::warn!(path = %path.display(), line = i + 1, "skipping unreadable cache record: {e}"),
        }
    }
    Ok(out)
}

/// Caption cache, optionally backed by an append-only JSON-lines file.
#[derive(Default)]
pub struct CaptionCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, AugmentedCaption>>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl CaptionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            for r in read_cache_records(&path)? {
                entries.insert(r.key, r.caption);
            }
        }
        Ok(Self {
            path: Some(path),
            entries: Mutex::new(entries),
            key_locks: Mutex::default(),
        })
    }

    pub fn get(&self, key: &str) -> Option<AugmentedCaption> {
        self.entries.lock().expect("cache poisoned").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, key: &str, caption: &AugmentedCaption) -> Result<()> {
        let mut entries = self.entries.lock().expect("cache poisoned");
        if let Some(path) = &self.path {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_vec(&CacheRecord {
                key: key.to_string(),
                caption: caption.clone(),
            })?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.sync_data()?;
        }
        entries.insert(key.to_string(), caption.clone());
        Ok(())
    }

    fn lock_key(&self, key: &str) -> Arc<Mutex<()>> {
        self.key_locks
            .lock()
            .expect("cache poisoned")
            .entry(key.to_string())
            .or_default()
            .clone()
    }
}

/// Hash of the media content: file bytes for images and frames, the
/// descriptor itself for synthetic media.
pub fn media_content_hash(media: &MediaDescriptor) -> Result<String> {
    let bytes = match media {
        MediaDescriptor::Synthetic(s) => serde_json::to_vec(s)?,
        MediaDescriptor::Image { path, .. } => std::fs::read(path)?,
        MediaDescriptor::Video { frames, .. } => {
            let mut all = Vec::new();
            for f in frames {
                all.extend_from_slice(sha256_hex(&std::fs::read(f)?).as_bytes());
            }
            all
        }
    };
    Ok(sha256_hex(&bytes))
}

/// Cache key for a request: content hash of media, category and prompt,
/// combined with the template id.
pub fn cache_key(req: &AugmentRequest, prompt: &str) -> Result<String> {
    let content = format!("{}\n{}\n{}", media_content_hash(&req.media)?, req.category, prompt);
    Ok(sha256_hex(
        format!("{}\n{}", sha256_hex(content.as_bytes()), req.template_id).as_bytes(),
    ))
}

fn first_frame_png(media: &MediaDescriptor) -> Option<Vec<u8>> {
    let path = match media {
        MediaDescriptor::Image { path, .. } => path,
        MediaDescriptor::Video { frames, .. } => frames.first()?,
        MediaDescriptor::Synthetic(_) => return None,
    };
    let img = image::open(path).ok()?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).ok()?;
    Some(out.into_inner())
}

/// Returns the cached caption for the request or calls the client once and
/// caches its answer. Client failures fall back to the seed caption, then to
/// a generic caption; fallbacks are not cached.
pub fn augment_caption(
    req: &AugmentRequest,
    templates: &PromptTemplates,
    client: Option<&dyn LlmClient>,
    cache: &CaptionCache,
) -> Result<AugmentedCaption> {
    let prompt = templates.render(&req.template_id, &req.category)?;
    let key = cache_key(req, &prompt)?;
    let guard = cache.lock_key(&key);
    let _held = guard.lock().expect("key lock poisoned");
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let outcome = match client {
        Some(c) => {
            let png = first_frame_png(&req.media);
            c.describe(&LlmCall {
                key: &key,
                media: &req.media,
                image_png: png.as_deref(),
                prompt: &prompt,
            })
            .and_then(|text| {
                if text.trim().is_empty() {
                    Err(Error::External("client returned an empty caption".into()))
                } else {
                    Ok((text, c.source()))
                }
            })
        }
        None => Err(Error::External("no caption client configured".into())),
    };
    match outcome {
        Ok((text, source)) => {
            let cap = AugmentedCaption::new(text, source, &req.template_id);
            cache.insert(&key, &cap)?;
            Ok(cap)
        }
        Err(e) => {
            tracing::warn!(media_id = %req.media_id, "caption augmentation failed, falling back: {e}");
            Ok(match req.seed_caption.as_deref().filter(|s| !s.trim().is_empty()) {
                Some(user) => AugmentedCaption::new(user.to_string(), CaptionSource::User, &req.template_id),
                None => AugmentedCaption::new(format!("a photo of a {}", req.category), CaptionSource::Generic, &req.template_id),
            })
        }
    }
}

/// Index of the template used to generate the description: one seeded draw
/// over templates sorted by media id, fixed for the run.
pub fn pick_caption_template(templates: &[MediaDescriptor], seed: u64, instance_id: &str) -> Result<usize> {
    if templates.is_empty() {
        return Err(Error::Usage(format!("instance `{instance_id}` has no templates")));
    }
    let mut order: Vec<usize> = (0..templates.len()).collect();
    order.sort_by(|&a, &b| templates[a].media_id().cmp(templates[b].media_id()));
    let mut rng = substream(seed, &format!("caption-template/{instance_id}"));
    Ok(*order.choose(&mut rng).expect("non-empty"))
}
