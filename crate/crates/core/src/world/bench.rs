use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::MediaDescriptor;
use crate::error::{Error, Result};
use crate::harness::manifest::{
    EvalManifest, EvalQuery, GalleryItem, GalleryManifest, InstanceManifest, QuerySetting, TrainManifest, MANIFEST_VERSION,
};
use crate::seed::substream;
use crate::world::{SyntheticMediaDescriptor, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateBackgrounds {
    /// All templates of an instance share one home background.
    Shared,
    /// Each template has its own random background.
    Varied,
}

/// Shape of a synthetic benchmark drawn from a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub n_instances: usize,
    pub gallery_items: usize,
    pub templates_per_instance: usize,
    pub eval_templates_per_instance: usize,
    pub template_backgrounds: TemplateBackgrounds,
    pub template_background_weight: [f64; 2],
    pub gallery_background_weight: [f64; 2],
    pub context_queries_per_instance: usize,
    pub generic_queries: bool,
    /// Share of gallery items that are videos.
    pub video_fraction: f64,
    /// Inclusive range of frames (sampled at 1 fps) per gallery video.
    pub video_frames: [u32; 2],
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 1234,
            n_instances: 12,
            gallery_items: 200,
            templates_per_instance: 10,
            eval_templates_per_instance: 0,
            template_backgrounds: TemplateBackgrounds::Shared,
            template_background_weight: [0.4, 0.6],
            gallery_background_weight: [0.3, 0.6],
            context_queries_per_instance: 4,
            generic_queries: true,
            video_fraction: 0.5,
            video_frames: [3, 8],
        }
    }
}

/// Draws train, gallery and query manifests for the first `n_instances`
/// named instances of `world`.
pub fn emit_benchmark(world: &World, spec: &BenchmarkSpec) -> Result<(TrainManifest, GalleryManifest, EvalManifest)> {
    let named: Vec<_> = world.named_instances().collect();
    if spec.n_instances == 0 || spec.n_instances > named.len() {
        return Err(Error::Capacity(format!(
            "benchmark asks for {} instances, world has {}",
            spec.n_instances,
            named.len()
        )));
    }
    let instances = &named[..spec.n_instances];
    let n_bg = world.backgrounds.len();
    if spec.gallery_items < spec.n_instances || spec.gallery_items > spec.n_instances * n_bg {
        return Err(Error::Capacity(format!(
            "gallery of {} items needs between {} and {} (instance, background) pairs",
            spec.gallery_items,
            spec.n_instances,
            spec.n_instances * n_bg
        )));
    }
    if spec.templates_per_instance == 0 {
        return Err(Error::Capacity("templates_per_instance must be positive".into()));
    }
    let frames_lo = spec.video_frames[0].max(1);
    let frames_hi = spec.video_frames[1].max(frames_lo);

    // Gallery: distinct (instance, background) pairs, dealt round-robin so
    // every instance appears at least once.
    let mut rng = substream(spec.seed, "bench/gallery");
    let mut bg_orders: Vec<Vec<usize>> = instances
        .iter()
        .map(|_| {
            let mut o: Vec<usize> = (0..n_bg).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let mut pairs = Vec::with_capacity(spec.gallery_items);
    for k in 0..spec.gallery_items {
        let i = k % instances.len();
        let bg = bg_orders[i].pop().expect("capacity checked");
        pairs.push((i, bg));
    }
    pairs.shuffle(&mut rng);
    let mut items = Vec::with_capacity(pairs.len());
    let mut per_instance: Vec<Vec<(String, usize)>> = vec![Vec::new(); instances.len()];
    for (k, &(i, bg)) in pairs.iter().enumerate() {
        let media_id = format!("g{k:04}");
        let [lo, hi] = spec.gallery_background_weight;
        let w = world.uniform(&mut rng, lo, hi);
        let is_video = rng.random_bool(spec.video_fraction.clamp(0.0, 1.0));
        let n_frames = if is_video { rng.random_range(frames_lo..=frames_hi) } else { 1 };
        let mut d = SyntheticMediaDescriptor::image(&media_id, &instances[i].id, &world.backgrounds[bg].name, w);
        d.is_video = is_video;
        d.n_frames = n_frames;
        let mut labels = BTreeMap::new();
        labels.insert("instance".to_string(), instances[i].id.clone());
        labels.insert("background".to_string(), world.backgrounds[bg].name.clone());
        items.push(GalleryItem {
            media: MediaDescriptor::Synthetic(d),
            labels,
        });
        per_instance[i].push((media_id, bg));
    }

    let mut rng = substream(spec.seed, "bench/templates");
    let train_instances = instances
        .iter()
        .map(|inst| {
            let home = rng.random_range(0..n_bg);
            let make = |prefix: &str, count: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<MediaDescriptor> {
                (0..count)
                    .map(|k| {
                        let bg = match spec.template_backgrounds {
                            TemplateBackgrounds::Shared => home,
                            TemplateBackgrounds::Varied => rng.random_range(0..n_bg),
                        };
                        let [lo, hi] = spec.template_background_weight;
                        let w = world.uniform(rng, lo, hi);
                        MediaDescriptor::Synthetic(SyntheticMediaDescriptor::image(
                            format!("{prefix}_{}_{k:02}", inst.id),
                            &inst.id,
                            &world.backgrounds[bg].name,
                            w,
                        ))
                    })
                    .collect()
            };
            let templates = make("t", spec.templates_per_instance, &mut rng);
            let eval_templates = make("e", spec.eval_templates_per_instance, &mut rng);
            InstanceManifest {
                instance_id: inst.id.clone(),
                category: world.category_of(inst).name.clone(),
                caption: Some(world.user_caption(inst)),
                templates,
                eval_templates,
                boxes: BTreeMap::new(),
            }
        })
        .collect();

    let mut rng = substream(spec.seed, "bench/queries");
    let mut queries = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let mut own = per_instance[i].clone();
        own.sort();
        let mut picks = own.clone();
        picks.shuffle(&mut rng);
        picks.truncate(spec.context_queries_per_instance);
        picks.sort();
        for (k, (media_id, bg)) in picks.into_iter().enumerate() {
            queries.push(EvalQuery {
                query_id: format!("ctx_{}_{k}", inst.id),
                template: format!("a photo of @{} in the {}", inst.id, world.backgrounds[bg].name),
                positives: vec![media_id],
                setting: QuerySetting::Context,
            });
        }
        if spec.generic_queries {
            queries.push(EvalQuery {
                query_id: format!("gen_{}", inst.id),
                template: format!("a photo of @{}", inst.id),
                positives: own.into_iter().map(|(m, _)| m).collect(),
                setting: QuerySetting::Generic,
            });
        }
    }

    let gallery = GalleryManifest {
        version: MANIFEST_VERSION,
        dataset: "synthetic".into(),
        items,
    };
    let eval = EvalManifest {
        version: MANIFEST_VERSION,
        gallery: gallery.items.iter().map(|i| i.media.media_id().to_string()).collect(),
        queries,
    };
    let train = TrainManifest {
        version: MANIFEST_VERSION,
        instances: train_instances,
    };
    train.validate()?;
    gallery.validate()?;
    eval.validate()?;
    Ok((train, gallery, eval))
}

/// Generic image/caption pairs for pretraining: population instances on
/// random backgrounds with templated class captions.
pub fn generic_dataset(world: &World, n: usize, seed: u64) -> Vec<(MediaDescriptor, String)> {
    let mut pool: Vec<_> = world.instances.iter().filter(|i| i.population).collect();
    if pool.is_empty() {
        pool = world.instances.iter().collect();
    }
    let mut rng = substream(seed, "generic-dataset");
    (0..n)
        .map(|k| {
            let inst = pool[rng.random_range(0..pool.len())];
            let bg = &world.backgrounds[rng.random_range(0..world.backgrounds.len())];
            let w = world.uniform(&mut rng, 0.2, 0.7);
            let d = SyntheticMediaDescriptor::image(format!("pre{seed}_{k:06}"), &inst.id, &bg.name, w);
            (MediaDescriptor::Synthetic(d), world.generic_caption(inst))
        })
        .collect()
}
