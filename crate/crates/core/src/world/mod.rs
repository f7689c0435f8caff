//! Seeded synthetic joint-embedding worlds and the toy encoder pair.
//!
//! Geometry: a semantic subspace of the joint space (all coordinates except
//! the two modality-gap dimensions) is linked to the token space by a pair
//! of orthonormal bases, so every vocabulary word has an exact meaning vector
//! in the joint space. One basis direction is reserved for function words
//! ("a", "photo", "of", unknown words) and carries no visual content.
//!
//! * category concepts `c_g` are random unit vectors in the content subspace;
//! * instances are `c_i = normalize(c_g + s·δ_i)`, where `δ_i` mixes the
//!   instance's attribute words with a residual no word expresses;
//! * images embed as `normalize((1-w)·c_i + w·b + noise)` plus an offset on
//!   the gap dimensions, text as the normalized linear image of the mean
//!   unit-normalized token embedding plus the opposite offset.

mod bench;
mod encoder;
pub mod render;

pub use bench::{emit_benchmark, generic_dataset, BenchmarkSpec, TemplateBackgrounds};
pub use encoder::ToyEncoder;

use std::collections::HashMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, axpy, gaussian_vec, normalized, random_orthonormal};
use crate::seed::{config_hash, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub d_joint: usize,
    pub d_tok: usize,
    pub n_categories: usize,
    pub n_instances_per_category: usize,
    /// Extra unnamed instances per category, used only by generic
    /// (pretraining) data.
    pub n_population_per_category: usize,
    pub instance_offset_scale: f64,
    pub background_pool_size: usize,
    pub modality_gap_dims: [usize; 2],
    pub modality_gap_magnitude: f64,
    pub noise_scale: f64,
    pub attributes_per_instance: usize,
    pub attribute_pool_per_category: usize,
    /// Share of each instance offset that no attribute word expresses.
    pub unverbalized_fraction: f64,
    pub localization_factor: f64,
    pub normalizes_output: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            d_joint: 64,
            d_tok: 48,
            n_categories: 4,
            n_instances_per_category: 3,
            n_population_per_category: 16,
            instance_offset_scale: 0.8,
            background_pool_size: 24,
            modality_gap_dims: [0, 1],
            modality_gap_magnitude: 0.5,
            noise_scale: 0.1,
            attributes_per_instance: 3,
            attribute_pool_per_category: 5,
            unverbalized_fraction: 0.5,
            localization_factor: 0.2,
            normalizes_output: true,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_joint < 5 {
            return bad("d_joint must be at least 5 (two gap dims plus content)");
        }
        if self.d_tok < 3 {
            return bad("d_tok must be at least 3");
        }
        if self.n_categories == 0 || self.n_instances_per_category == 0 || self.background_pool_size == 0 {
            return bad("category, instance and background counts must be positive");
        }
        let [a, b] = self.modality_gap_dims;
        if a == b || a >= self.d_joint || b >= self.d_joint {
            return bad("modality_gap_dims must be distinct and < d_joint");
        }
        for (name, v) in [
            ("instance_offset_scale", self.instance_offset_scale),
            ("modality_gap_magnitude", self.modality_gap_magnitude),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.unverbalized_fraction) || !(0.0..=1.0).contains(&self.localization_factor) {
            return bad("unverbalized_fraction and localization_factor must lie in [0, 1]");
        }
        if self.attributes_per_instance == 0 || self.attributes_per_instance > self.attribute_pool_per_category {
            return bad("attributes_per_instance must be in 1..=attribute_pool_per_category");
        }
        Ok(())
    }

    /// Reads a plain-text `key = value` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_kv(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let cfg: WorldConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        toml::to_string(self).expect("world config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv())?;
        Ok(())
    }
}

/// Abstract description of a synthetic image or video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMediaDescriptor {
    pub media_id: String,
    pub instance_id: String,
    pub background_id: String,
    pub background_weight: f64,
    #[serde(default)]
    pub is_video: bool,
    #[serde(default = "one")]
    pub n_frames: u32,
    #[serde(default)]
    pub localized: bool,
    /// Set on single-frame views of a video.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<u32>,
}

fn one() -> u32 {
    1
}

impl SyntheticMediaDescriptor {
    pub fn image(media_id: impl Into<String>, instance_id: impl Into<String>, background_id: impl Into<String>, w: f64) -> Self {
        Self {
            media_id: media_id.into(),
            instance_id: instance_id.into(),
            background_id: background_id.into(),
            background_weight: w,
            is_video: false,
            n_frames: 1,
            localized: false,
            frame: None,
        }
    }

    pub fn frame(&self, k: u32) -> Self {
        Self {
            is_video: false,
            n_frames: 1,
            frame: Some(k),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.background_weight) {
            return Err(Error::Validation(format!(
                "`{}`: background_weight {} outside [0, 1]",
                self.media_id, self.background_weight
            )));
        }
        if self.n_frames == 0 || (!self.is_video && self.n_frames != 1) {
            return Err(Error::Validation(format!(
                "`{}`: n_frames must be >= 1, and 1 for still images",
                self.media_id
            )));
        }
        Ok(())
    }

    /// Seed label for this view's noise draw.
    pub(crate) fn noise_label(&self) -> String {
        format!("noise/{}#{}", self.media_id, self.frame.unwrap_or(0))
    }
}

/// Simulated red-ellipse prompting: shrinks the background share by
/// `factor`. Already-localized descriptors are returned unchanged.
pub fn localize_descriptor(m: &SyntheticMediaDescriptor, factor: f64) -> SyntheticMediaDescriptor {
    if m.localized {
        return m.clone();
    }
    SyntheticMediaDescriptor {
        localized: true,
        background_weight: m.background_weight * factor,
        ..m.clone()
    }
}

#[derive(Debug, Clone)]
pub struct Category {
    pub name: String,
    pub concept: Vec<f64>,
    pub attribute_pool: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub id: String,
    pub category: usize,
    pub attributes: Vec<String>,
    pub concept: Vec<f64>,
    /// Population members are not benchmark targets.
    pub population: bool,
}

#[derive(Debug, Clone)]
pub struct Background {
    pub name: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub words: Vec<String>,
    pub index: HashMap<String, u32>,
    /// Meaning of each word in the joint space (unit norm).
    pub meanings: Vec<Vec<f64>>,
    pub unk: u32,
}

impl Vocabulary {
    fn push(&mut self, word: &str, meaning: Vec<f64>) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        self.meanings.push(meaning);
        id
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "photo", "image", "picture", "of", "in", "at", "on", "with", "my", "is", "and", "inside", "near", "by",
];
const CATEGORY_NAMES: &[&str] = &[
    "dog", "cat", "mug", "backpack", "bicycle", "lamp", "sneaker", "hat", "guitar", "teddy", "kettle", "umbrella",
];
const ATTRIBUTE_NAMES: &[&str] = &[
    "fluffy", "spotted", "striped", "golden", "grey", "white", "black", "brown", "tiny", "chunky", "shaggy", "sleek", "faded", "glossy",
    "chipped", "patched", "curly", "freckled", "tall", "squat", "rusty", "velvet", "woolly", "plaid", "dotted", "scuffed", "bright",
    "pale", "speckled", "matte", "dented", "braided", "ribbed", "knitted", "crimson", "teal", "amber", "ivory", "olive", "lilac", "copper",
    "silver", "bronze", "navy", "coral", "mossy", "sandy", "smoky",
];
const PLACE_NAMES: &[&str] = &[
    "park", "forest", "street", "beach", "kitchen", "garden", "office", "bedroom", "library", "market", "snow", "lake", "desert", "garage",
    "stadium", "subway", "bridge", "field", "harbor", "cafe", "studio", "balcony", "alley", "meadow", "attic", "porch", "mall", "farm",
    "river", "station", "museum", "hallway",
];

fn name_from(list: &[&str], k: usize, fallback: &str) -> String {
    list.get(k).map(|s| s.to_string()).unwrap_or_else(|| format!("{fallback}{k}"))
}

/// A generated synthetic world. Immutable after generation.
#[derive(Debug, Clone)]
pub struct World {
    pub cfg: WorldConfig,
    pub categories: Vec<Category>,
    pub instances: Vec<Instance>,
    pub backgrounds: Vec<Background>,
    pub vocab: Vocabulary,
    /// Orthonormal joint-space basis of the semantic subspace; entry 0 is
    /// the function-word direction.
    pub joint_basis: Vec<Vec<f64>>,
    /// Matching token-space basis.
    pub token_basis: Vec<Vec<f64>>,
    pub image_gap: Vec<f64>,
    pub text_gap: Vec<f64>,
    instance_index: HashMap<String, usize>,
    background_index: HashMap<String, usize>,
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let d = cfg.d_joint;
    let content_dims: Vec<usize> = (0..d).filter(|i| !cfg.modality_gap_dims.contains(i)).collect();
    let rank = content_dims.len().min(cfg.d_tok);
    let mut basis_rng = substream(cfg.seed, "world/basis");
    let joint_basis = random_orthonormal(&mut basis_rng, d, rank, &content_dims);
    let all_tok: Vec<usize> = (0..cfg.d_tok).collect();
    let token_basis = random_orthonormal(&mut basis_rng, cfg.d_tok, rank, &all_tok);

    let content = &joint_basis[1..];
    let mut concept_rng = substream(cfg.seed, "world/concepts");
    let draw_unit = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let z = gaussian_vec(rng, content.len(), 1.0);
        let mut v = vec![0.0; d];
        for (zk, b) in z.iter().zip(content) {
            axpy(*zk, b, &mut v);
        }
        normalized(&v)
    };

    let mut vocab = Vocabulary {
        words: Vec::new(),
        index: HashMap::new(),
        meanings: Vec::new(),
        unk: 0,
    };
    let function_dir = joint_basis[0].clone();
    vocab.unk = vocab.push("<unk>", function_dir.clone());
    for w in FUNCTION_WORDS {
        vocab.push(w, function_dir.clone());
    }

    let mut categories = Vec::with_capacity(cfg.n_categories);
    let mut attr_counter = 0usize;
    for g in 0..cfg.n_categories {
        let name = name_from(CATEGORY_NAMES, g, "category");
        let concept = draw_unit(&mut concept_rng);
        vocab.push(&name, concept.clone());
        let mut pool = Vec::new();
        for _ in 0..cfg.attribute_pool_per_category {
            let word = name_from(ATTRIBUTE_NAMES, attr_counter, "attr");
            attr_counter += 1;
            let meaning = draw_unit(&mut concept_rng);
            vocab.push(&word, meaning);
            pool.push(word);
        }
        categories.push(Category {
            name,
            concept,
            attribute_pool: pool,
        });
    }

    let mut backgrounds = Vec::with_capacity(cfg.background_pool_size);
    for j in 0..cfg.background_pool_size {
        let name = name_from(PLACE_NAMES, j, "place");
        let vector = draw_unit(&mut concept_rng);
        vocab.push(&name, vector.clone());
        backgrounds.push(Background { name, vector });
    }

    let mut instance_rng = substream(cfg.seed, "world/instances");
    let mut instances = Vec::new();
    for (g, cat) in categories.iter().enumerate() {
        let per_cat = cfg.n_instances_per_category + cfg.n_population_per_category;
        for k in 0..per_cat {
            let population = k >= cfg.n_instances_per_category;
            let id = if population {
                format!("{}_p{}", cat.name, k - cfg.n_instances_per_category)
            } else {
                format!("{}_{}", cat.name, k)
            };
            let mut attributes: Vec<String> = cat
                .attribute_pool
                .choose_multiple(&mut instance_rng, cfg.attributes_per_instance)
                .cloned()
                .collect();
            attributes.shuffle(&mut instance_rng);
            let mut verbal = vec![0.0; d];
            for a in &attributes {
                axpy(1.0, &vocab.meanings[vocab.index[a] as usize], &mut verbal);
            }
            let verbal = normalized(&verbal);
            let residual = draw_unit(&mut instance_rng);
            let eta = cfg.unverbalized_fraction;
            let mut offset = linalg::scale(1.0 - eta, &verbal);
            axpy(eta, &residual, &mut offset);
            let offset = normalized(&offset);
            let mut concept = cat.concept.clone();
            axpy(cfg.instance_offset_scale, &offset, &mut concept);
            instances.push(Instance {
                id,
                category: g,
                attributes,
                concept: normalized(&concept),
                population,
            });
        }
    }

    let [ga, gb] = cfg.modality_gap_dims;
    let half = cfg.modality_gap_magnitude / 2.0;
    let mut image_gap = vec![0.0; d];
    image_gap[ga] = half;
    image_gap[gb] = -half;
    let text_gap: Vec<f64> = image_gap.iter().map(|x| -x).collect();

    let instance_index = instances.iter().enumerate().map(|(i, x)| (x.id.clone(), i)).collect();
    let background_index = backgrounds.iter().enumerate().map(|(i, b)| (b.name.clone(), i)).collect();
    Ok(World {
        cfg: cfg.clone(),
        categories,
        instances,
        backgrounds,
        vocab,
        joint_basis,
        token_basis,
        image_gap,
        text_gap,
        instance_index,
        background_index,
    })
}

impl World {
    pub fn encoder_id(&self) -> String {
        format!("toy-{}", config_hash(&self.cfg))
    }

    pub fn instance(&self, id: &str) -> Result<&Instance> {
        self.instance_index
            .get(id)
            .map(|&i| &self.instances[i])
            .ok_or_else(|| Error::Decode(format!("unknown synthetic instance `{id}`")))
    }

    pub fn background(&self, name: &str) -> Result<&Background> {
        self.background_index
            .get(name)
            .map(|&i| &self.backgrounds[i])
            .ok_or_else(|| Error::Decode(format!("unknown synthetic background `{name}`")))
    }

    /// Benchmark target instances, in generation order.
    pub fn named_instances(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| !i.population)
    }

    pub fn category_of(&self, inst: &Instance) -> &Category {
        &self.categories[inst.category]
    }

    /// Text a user would type: the category plus one attribute.
    pub fn user_caption(&self, inst: &Instance) -> String {
        format!("my {} {}", self.category_of(inst).name, inst.attributes[0])
    }

    /// Detailed description naming every attribute word of the instance.
    pub fn full_description(&self, inst: &Instance) -> String {
        format!("my {} {}", self.category_of(inst).name, inst.attributes.join(" "))
    }

    pub fn generic_caption(&self, inst: &Instance) -> String {
        format!("a photo of a {}", self.category_of(inst).name)
    }

    /// Noise-free, localization-free image content of an instance on a
    /// background, before the modality offset.
    pub fn clean_mix(&self, inst: &Instance, background: &Background, w: f64) -> Vec<f64> {
        let mut v = linalg::scale(1.0 - w, &inst.concept);
        axpy(w, &background.vector, &mut v);
        v
    }

    pub(crate) fn noise(&self, label: &str) -> Vec<f64> {
        let content = &self.joint_basis[1..];
        if self.cfg.noise_scale == 0.0 || content.is_empty() {
            return vec![0.0; self.cfg.d_joint];
        }
        let mut rng = substream(self.cfg.seed, label);
        let std = self.cfg.noise_scale / (content.len() as f64).sqrt();
        let z = gaussian_vec(&mut rng, content.len(), std);
        let mut v = vec![0.0; self.cfg.d_joint];
        for (zk, b) in z.iter().zip(content) {
            axpy(*zk, b, &mut v);
        }
        v
    }

    pub(crate) fn uniform(&self, rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    }
}
