//! End-to-end evaluation: personalize every instance of a train manifest,
//! index a gallery, run the query set through each arm and score it.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{EvalManifest, GalleryManifest, InstanceManifest, QuerySetting, TrainManifest};
use crate::caption::{
    augment_caption, pick_caption_template, AugmentRequest, CaptionCache, CaptionSource, HttpLlm, LlmClient, MockLlm, PromptTemplates,
    WorldCaptioner, DEFAULT_TEMPLATE_ID,
};
use crate::encoder::{mentions, Embedding, EncoderPair, MediaDescriptor};
use crate::error::{Error, Result};
use crate::linalg;
use crate::localize::{GroundTruthDetector, Localizer, DEFAULT_STROKE_WIDTH};
use crate::objectives::{BatchItem, Caption};
use crate::pimap::{Activation, PiMapParams};
use crate::retrieval::{compose_query, compose_query_with_vector, compute_metrics, rank, Bindings, Index, MetricsReport, QueryOutcome};
use crate::seed::{config_hash, substream};
use crate::trainer::{
    personalize_observed, pretrain, template_embedding, PersonaToken, PersonalizeInput, PretrainReport, Profile, TrainConfig, TrainingLog,
};
use crate::world::{emit_benchmark, generic_dataset, BenchmarkSpec, ToyEncoder, World, WorldConfig};

/// Query-embedding strategies compared on one index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Query text with the learned persona token.
    Personalized,
    /// Persona replaced by its generic category word.
    GenericText,
    /// Persona replaced by its specific description.
    SpecificText,
    /// Mean raw template embedding, ignoring the query text.
    ImageOnly,
    /// Pretrained mapping of the mean template bound into the query text.
    ImageAsQuery,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Personalized => "personalized",
            Arm::GenericText => "generic-text",
            Arm::SpecificText => "specific-text",
            Arm::ImageOnly => "image-only",
            Arm::ImageAsQuery => "image-as-query",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionClientKind {
    /// Reads planted attributes of synthetic media.
    World,
    /// Seeded mock words.
    Mock,
    /// OpenAI-style endpoint from the environment.
    Http,
    /// No client; the user caption is used.
    None,
}

impl CaptionClientKind {
    /// Builds the client. `World` needs a synthetic world; `Http` needs the
    /// endpoint environment variable.
    pub fn client(self, world: Option<&Arc<World>>, seed: u64) -> Result<Option<Box<dyn LlmClient>>> {
        Ok(match self {
            CaptionClientKind::World => {
                let world = world.ok_or_else(|| Error::Config("the `world` caption client needs synthetic media".into()))?;
                Some(Box::new(WorldCaptioner { world: world.clone() }))
            }
            CaptionClientKind::Mock => Some(Box::new(MockLlm { seed })),
            CaptionClientKind::Http => {
                Some(Box::new(HttpLlm::from_env().ok_or_else(|| {
                    Error::Config(format!("the `http` caption client needs {}", crate::caption::ENV_ENDPOINT))
                })?))
            }
            CaptionClientKind::None => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub seed: u64,
    pub profile: Profile,
    pub hidden: Option<usize>,
    pub activation: Activation,
    /// Generic image-caption pairs drawn for pretraining (synthetic only).
    pub pretrain_samples: usize,
    pub pretrain: TrainConfig,
    pub personalize: TrainConfig,
    pub localize: bool,
    pub caption_augmentation: bool,
    pub caption_client: CaptionClientKind,
    pub caption_template_id: String,
    /// Keep only the first `n` templates (by media id) of each instance.
    pub max_templates: Option<usize>,
    /// Add each instance's evaluation-split templates to its training set.
    pub train_on_eval: bool,
    pub arms: Vec<Arm>,
    pub ks: Vec<usize>,
    pub stroke_width: f64,
    /// Where localized image files and caption cache go for real media.
    pub work_dir: Option<PathBuf>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let mut pretrain = TrainConfig::pretrain();
        pretrain.batch_size = 32;
        pretrain.base_lr = 1e-3;
        pretrain.epochs = 10;
        let mut personalize = TrainConfig::personalize(Profile::Synthetic);
        personalize.base_lr = 1e-3;
        Self {
            seed: 1234,
            profile: Profile::Synthetic,
            hidden: None,
            activation: Activation::Tanh,
            pretrain_samples: 2048,
            pretrain,
            personalize,
            localize: true,
            caption_augmentation: true,
            caption_client: CaptionClientKind::World,
            caption_template_id: DEFAULT_TEMPLATE_ID.into(),
            max_templates: None,
            train_on_eval: false,
            arms: vec![Arm::Personalized, Arm::GenericText, Arm::ImageOnly],
            ks: vec![1, 5, 10],
            stroke_width: DEFAULT_STROKE_WIDTH,
            work_dir: None,
        }
    }
}

impl ProtocolConfig {
    /// Training configs with the run seed threaded through.
    fn seeded(&self) -> (TrainConfig, TrainConfig) {
        let mut pre = self.pretrain.clone();
        pre.seed = crate::seed::substream_seed(self.seed, "pretrain");
        let mut per = self.personalize.clone();
        per.seed = crate::seed::substream_seed(self.seed, "personalize");
        (pre, per)
    }

    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.work_dir = None;
        config_hash(&c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Reproducibility block written with every run's output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repro {
    pub seed: u64,
    pub config_hash: String,
    pub encoder_id: String,
}

impl Repro {
    pub fn to_text(&self) -> String {
        format!(
            "[reproducibility]\nseed = {}\nconfig_hash = {}\nencoder_id = {}\n",
            self.seed, self.config_hash, self.encoder_id
        )
    }
}

/// Fresh mapping network for `encoder`.
pub fn init_params<T: crate::Scalar, E: EncoderPair<T> + ?Sized>(encoder: &E, cfg: &ProtocolConfig) -> Result<PiMapParams<T>> {
    let d = encoder.descriptor();
    let hidden = cfg.hidden.unwrap_or(d.d_joint);
    PiMapParams::init(d.d_joint, d.d_tok, hidden, cfg.activation, &mut substream(cfg.seed, "pimap/init"))
}

/// Pretrains on generic data drawn from the world's population instances.
pub fn pretrain_synthetic<E: EncoderPair<f64> + ?Sized>(
    encoder: &E,
    world: &World,
    cfg: &ProtocolConfig,
) -> Result<(PiMapParams<f64>, PretrainReport)> {
    let data = generic_dataset(world, cfg.pretrain_samples, crate::seed::substream_seed(cfg.seed, "generic"));
    let media: Vec<MediaDescriptor> = data.into_iter().map(|(m, _)| m).collect();
    pretrain_on_media(encoder, &media, cfg)
}

/// Pretrains a fresh mapping network on the given generic images.
pub fn pretrain_on_media<E: EncoderPair<f64> + ?Sized>(
    encoder: &E,
    media: &[MediaDescriptor],
    cfg: &ProtocolConfig,
) -> Result<(PiMapParams<f64>, PretrainReport)> {
    let (pre, _) = cfg.seeded();
    let mut params = init_params(encoder, cfg)?;
    let images: Vec<Embedding<f64>> = media.par_iter().map(|m| encoder.encode_image(m)).collect::<Result<_>>()?;
    let report = pretrain(encoder, &mut params, &images, &pre)?;
    Ok((params, report))
}

/// Everything personalization needs about one instance.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub instance_id: String,
    pub category: String,
    pub template_ids: Vec<String>,
    pub raw: Vec<Embedding<f64>>,
    pub localized: Vec<Embedding<f64>>,
    pub specific: Caption<f64>,
    pub specific_source: CaptionSource,
    pub generic: Caption<f64>,
}

pub struct Pipeline<'a, E: EncoderPair<f64> + ?Sized> {
    pub encoder: &'a E,
    pub world: Option<Arc<World>>,
    pub cfg: &'a ProtocolConfig,
    pub caption_cache: &'a CaptionCache,
    pub llm: Option<&'a dyn LlmClient>,
}

fn selected_templates(inst: &InstanceManifest, cfg: &ProtocolConfig) -> Vec<MediaDescriptor> {
    let mut t = inst.templates.clone();
    t.sort_by(|a, b| a.media_id().cmp(b.media_id()));
    if let Some(n) = cfg.max_templates {
        t.truncate(n);
    }
    if cfg.train_on_eval {
        let mut e = inst.eval_templates.clone();
        e.sort_by(|a, b| a.media_id().cmp(b.media_id()));
        t.extend(e);
    }
    t
}

impl<E: EncoderPair<f64> + ?Sized> Pipeline<'_, E> {
    pub fn prepare(&self, inst: &InstanceManifest) -> Result<PreparedInstance> {
        let cfg = self.cfg;
        let templates = selected_templates(inst, cfg);
        if templates.is_empty() {
            return Err(Error::Usage(format!("instance `{}` has no templates", inst.instance_id)));
        }
        let frames = cfg.personalize.video_template_frames;
        let detector = GroundTruthDetector { boxes: inst.boxes.clone() };
        let localizer = Localizer {
            detector: &detector,
            out_dir: cfg.work_dir.as_ref().map(|d| d.join("localized").join(&inst.instance_id)),
            stroke_width: cfg.stroke_width,
            synthetic_factor: self.world.as_ref().map_or(1.0, |w| w.cfg.localization_factor),
        };
        let mut raw = Vec::with_capacity(templates.len());
        let mut loc_media = Vec::with_capacity(templates.len());
        let mut localized = Vec::with_capacity(templates.len());
        for m in &templates {
            raw.push(template_embedding(self.encoder, m, frames)?);
            if cfg.localize {
                let lm = localizer.localize(m, &inst.category)?;
                localized.push(template_embedding(self.encoder, &lm, frames)?);
                loc_media.push(lm);
            } else {
                localized.push(raw.last().expect("pushed").clone());
                loc_media.push(m.clone());
            }
        }

        let generic_text = format!("a photo of a {}", inst.category);
        let fallback = inst.caption.clone().unwrap_or_else(|| generic_text.clone());
        let (specific_text, specific_source) = if cfg.caption_augmentation {
            let k = pick_caption_template(&templates, cfg.seed, &inst.instance_id)?;
            let req = AugmentRequest {
                media_id: templates[k].media_id().to_string(),
                media: loc_media[k].clone(),
                category: inst.category.clone(),
                template_id: cfg.caption_template_id.clone(),
                seed_caption: inst.caption.clone(),
            };
            let cap = augment_caption(&req, &PromptTemplates::default(), self.llm, self.caption_cache)?;
            (cap.text, cap.source)
        } else if inst.caption.is_some() {
            (fallback, CaptionSource::User)
        } else {
            (fallback, CaptionSource::Generic)
        };
        Ok(PreparedInstance {
            instance_id: inst.instance_id.clone(),
            category: inst.category.clone(),
            template_ids: templates.iter().map(|m| m.media_id().to_string()).collect(),
            raw,
            localized,
            specific: Caption::encode(self.encoder, &specific_text)?,
            specific_source,
            generic: Caption::encode(self.encoder, &generic_text)?,
        })
    }
}

/// Batch items of every instance other than `skip`.
pub fn distractor_pool(prepared: &[PreparedInstance], skip: usize) -> Vec<BatchItem<f64>> {
    prepared
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .flat_map(|(_, p)| {
            p.raw.iter().zip(&p.localized).map(move |(r, l)| BatchItem {
                image_raw: r.clone(),
                image_localized: l.clone(),
                specific: p.specific.clone(),
                generic: p.generic.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PersonalizedInstance {
    pub prepared: PreparedInstance,
    pub token: PersonaToken,
    pub log: TrainingLog,
}

/// Prepares every instance of the manifest (in parallel, manifest order).
pub fn prepare_all<E: EncoderPair<f64> + ?Sized>(pipeline: &Pipeline<'_, E>, train: &TrainManifest) -> Result<Vec<PreparedInstance>> {
    train.instances.par_iter().map(|inst| pipeline.prepare(inst)).collect()
}

/// Personalizes `prepared[i]`, drawing distractors from the other entries.
pub fn personalize_prepared<E: EncoderPair<f64> + ?Sized>(
    pipeline: &Pipeline<'_, E>,
    pretrained: &PiMapParams<f64>,
    prepared: &[PreparedInstance],
    i: usize,
) -> Result<PersonalizedInstance> {
    personalize_one(pipeline, pretrained, &prepared[i], distractor_pool(prepared, i), &mut |_, _| {})
}

/// Personalizes one prepared instance against explicit distractors,
/// reporting `(done, total)` steps.
pub fn personalize_one<E: EncoderPair<f64> + ?Sized>(
    pipeline: &Pipeline<'_, E>,
    pretrained: &PiMapParams<f64>,
    p: &PreparedInstance,
    distractors: Vec<BatchItem<f64>>,
    on_step: &mut dyn FnMut(usize, usize),
) -> Result<PersonalizedInstance> {
    let (_, per) = pipeline.cfg.seeded();
    let input = PersonalizeInput {
        instance_id: p.instance_id.clone(),
        template_ids: p.template_ids.clone(),
        templates_raw: p.raw.clone(),
        templates_localized: p.localized.clone(),
        specific: p.specific.clone(),
        generic: p.generic.clone(),
        distractors,
    };
    let out = personalize_observed(pipeline.encoder, pretrained, &input, &per, on_step)?;
    Ok(PersonalizedInstance {
        prepared: p.clone(),
        token: out.token,
        log: out.log,
    })
}

/// Personalizes every instance of the manifest (in parallel, results in
/// manifest order).
pub fn personalize_all<E: EncoderPair<f64> + ?Sized>(
    pipeline: &Pipeline<'_, E>,
    pretrained: &PiMapParams<f64>,
    train: &TrainManifest,
) -> Result<Vec<PersonalizedInstance>> {
    let prepared = prepare_all(pipeline, train)?;
    (0..prepared.len())
        .into_par_iter()
        .map(|i| personalize_prepared(pipeline, pretrained, &prepared, i))
        .collect()
}

/// Pairs prepared instances with previously trained tokens.
pub fn with_tokens(prepared: Vec<PreparedInstance>, tokens: &Bindings) -> Result<Vec<PersonalizedInstance>> {
    prepared
        .into_iter()
        .map(|p| {
            let token = tokens
                .get(&p.instance_id)
                .cloned()
                .ok_or_else(|| Error::Usage(format!("no token for instance `{}`", p.instance_id)))?;
            Ok(PersonalizedInstance {
                prepared: p,
                token,
                log: TrainingLog::default(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub settings: BTreeMap<QuerySetting, MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub instance_id: String,
    pub n_templates: usize,
    pub caption: String,
    pub caption_source: CaptionSource,
    /// Absent when the token was loaded rather than trained.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub repro: Repro,
    pub index_size: usize,
    pub instances: Vec<InstanceSummary>,
    pub arms: Vec<ArmReport>,
}

impl ProtocolReport {
    pub fn metrics(&self, arm: Arm, setting: QuerySetting) -> Option<&MetricsReport> {
        self.arms.iter().find(|a| a.arm == arm)?.settings.get(&setting)
    }

    /// Deterministic text rendering (percentages).
    pub fn to_text(&self, ks: &[usize]) -> String {
        let mut s = self.repro.to_text();
        s.push_str(&format!(
            "\n[benchmark]\nindex_size = {}\ninstances = {}\n",
            self.index_size,
            self.instances.len()
        ));
        s.push_str("\n[instances]\n");
        for i in &self.instances {
            let loss = match (i.initial_loss, i.final_loss) {
                (Some(a), Some(b)) => format!("loss {a:.6} -> {b:.6}"),
                _ => "loaded token".to_string(),
            };
            s.push_str(&format!(
                "{}\ttemplates={}\tcaption_source={:?}\t{loss}\n",
                i.instance_id, i.n_templates, i.caption_source
            ));
        }
        for setting in [QuerySetting::Context, QuerySetting::Generic] {
            let rows: Vec<String> = self
                .arms
                .iter()
                .filter_map(|a| a.settings.get(&setting).map(|m| m.table_row(a.arm.name())))
                .collect();
            if rows.is_empty() {
                continue;
            }
            s.push_str(&format!(
                "\n[{} queries]\n{}\n",
                setting_name(setting),
                MetricsReport::table_header(ks)
            ));
            for r in rows {
                s.push_str(&r);
                s.push('\n');
            }
        }
        s
    }
}

pub fn setting_name(s: QuerySetting) -> &'static str {
    match s {
        QuerySetting::Context => "context",
        QuerySetting::Generic => "generic",
    }
}

/// Replaces every `@name` mention by `f(name)`.
pub fn substitute_mentions(template: &str, mut f: impl FnMut(&str) -> Option<String>) -> Result<String> {
    let mut out = Vec::new();
    for word in template.split_whitespace() {
        match mentions(word).first() {
            Some(name) => {
                let rep = f(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                out.push(word.replacen(&format!("@{name}"), &rep, 1));
            }
            None => out.push(word.to_string()),
        }
    }
    Ok(out.join(" "))
}

/// Scores every query of `eval` under every configured arm.
pub fn evaluate_arms<E: EncoderPair<f64> + ?Sized>(
    encoder: &E,
    index: &Index<f64>,
    eval: &EvalManifest,
    personalized: &[PersonalizedInstance],
    pretrained: &PiMapParams<f64>,
    cfg: &ProtocolConfig,
) -> Result<Vec<ArmReport>> {
    let by_id: BTreeMap<&str, &PersonalizedInstance> = personalized.iter().map(|p| (p.prepared.instance_id.as_str(), p)).collect();
    let bindings: Bindings = personalized
        .iter()
        .map(|p| (p.prepared.instance_id.clone(), p.token.clone()))
        .collect();
    let lookup = |name: &str| by_id.get(name).copied().ok_or_else(|| Error::Unbound(name.to_string()));
    let mean_raw = |p: &PersonalizedInstance| -> Result<Vec<f64>> {
        let v: Vec<Vec<f64>> = p.prepared.raw.iter().map(|e| e.values().to_vec()).collect();
        linalg::mean_of(&v)
    };
    let mut arms = Vec::new();
    for &arm in &cfg.arms {
        let outcomes: Vec<(QuerySetting, QueryOutcome)> = eval
            .queries
            .par_iter()
            .map(|q| {
                let emb: Vec<f64> = match arm {
                    Arm::Personalized => compose_query(encoder, &q.template, &bindings)?.into_values(),
                    Arm::GenericText => {
                        let text = substitute_mentions(&q.template, |n| lookup(n).ok().map(|p| p.prepared.category.clone()))?;
                        encoder.encode_plain_text(&text)?.into_values()
                    }
                    Arm::SpecificText => {
                        let text = substitute_mentions(&q.template, |n| lookup(n).ok().map(|p| p.prepared.specific.text.clone()))?;
                        encoder.encode_plain_text(&text)?.into_values()
                    }
                    Arm::ImageOnly => {
                        let names = q.personas();
                        let first = names
                            .first()
                            .ok_or_else(|| Error::Usage(format!("query `{}` mentions no persona", q.query_id)))?;
                        mean_raw(lookup(first)?)?
                    }
                    Arm::ImageAsQuery => {
                        let names = q.personas();
                        let first = names
                            .first()
                            .ok_or_else(|| Error::Usage(format!("query `{}` mentions no persona", q.query_id)))?;
                        let tok = pretrained.forward(&mean_raw(lookup(first)?)?)?;
                        compose_query_with_vector(encoder, &q.template, &tok)?.into_values()
                    }
                };
                let ranking = rank(&emb, index, index.len())?;
                Ok((
                    q.setting,
                    QueryOutcome {
                        query_id: q.query_id.clone(),
                        ranking: ranking.hits.into_iter().map(|h| h.media_id).collect(),
                        positives: q.positives.iter().cloned().collect(),
                    },
                ))
            })
            .collect::<Result<_>>()?;
        let mut settings = BTreeMap::new();
        for setting in [QuerySetting::Context, QuerySetting::Generic] {
            let subset: Vec<QueryOutcome> = outcomes.iter().filter(|(s, _)| *s == setting).map(|(_, o)| o.clone()).collect();
            if !subset.is_empty() {
                settings.insert(setting, compute_metrics(&subset, &cfg.ks));
            }
        }
        arms.push(ArmReport { arm, settings });
    }
    Ok(arms)
}

/// Builds the gallery index from a manifest.
pub fn build_index<E: EncoderPair<f64> + ?Sized>(encoder: &E, gallery: &GalleryManifest) -> Result<Index<f64>> {
    let items: Vec<_> = gallery.items.iter().map(|i| (i.media.clone(), i.labels.clone())).collect();
    Index::build(encoder, &items)
}

/// Personalizes, indexes and evaluates.
pub fn run_protocol<E: EncoderPair<f64> + ?Sized>(
    pipeline: &Pipeline<'_, E>,
    pretrained: &PiMapParams<f64>,
    train: &TrainManifest,
    gallery: &GalleryManifest,
    eval: &EvalManifest,
) -> Result<(ProtocolReport, Vec<PersonalizedInstance>)> {
    run_protocol_with(pipeline, pretrained, train, gallery, eval, None)
}

/// [`run_protocol`], optionally reusing trained tokens instead of
/// personalizing.
pub fn run_protocol_with<E: EncoderPair<f64> + ?Sized>(
    pipeline: &Pipeline<'_, E>,
    pretrained: &PiMapParams<f64>,
    train: &TrainManifest,
    gallery: &GalleryManifest,
    eval: &EvalManifest,
    tokens: Option<&Bindings>,
) -> Result<(ProtocolReport, Vec<PersonalizedInstance>)> {
    eval.validate_against(gallery, Some(train))?;
    let encoder = pipeline.encoder;
    let index = build_index(encoder, gallery)?;
    let personalized = match tokens {
        Some(t) => {
            for tok in t.values() {
                if tok.encoder_id != encoder.encoder_id() {
                    return Err(Error::EncoderMismatch {
                        token: tok.encoder_id.clone(),
                        active: encoder.encoder_id().to_string(),
                    });
                }
            }
            with_tokens(prepare_all(pipeline, train)?, t)?
        }
        None => personalize_all(pipeline, pretrained, train)?,
    };
    let arms = evaluate_arms(encoder, &index, eval, &personalized, pretrained, pipeline.cfg)?;
    let instances = personalized
        .iter()
        .map(|p| InstanceSummary {
            instance_id: p.prepared.instance_id.clone(),
            n_templates: p.prepared.template_ids.len(),
            caption: p.prepared.specific.text.clone(),
            caption_source: p.prepared.specific_source,
            initial_loss: p.log.records.first().map(|r| r.total),
            final_loss: p.log.records.last().map(|r| r.total),
        })
        .collect();
    let report = ProtocolReport {
        repro: Repro {
            seed: pipeline.cfg.seed,
            config_hash: pipeline.cfg.hash(),
            encoder_id: encoder.encoder_id().to_string(),
        },
        index_size: index.len(),
        instances,
        arms,
    };
    Ok((report, personalized))
}

/// Output of [`run_synthetic`].
pub struct SyntheticRun {
    pub world: Arc<World>,
    pub encoder: ToyEncoder<f64>,
    pub pretrained: PiMapParams<f64>,
    pub pretrain_report: PretrainReport,
    pub report: ProtocolReport,
    pub personalized: Vec<PersonalizedInstance>,
}

/// Generates a world and benchmark, pretrains, personalizes every instance
/// and evaluates, all from the given seeds and configs.
pub fn run_synthetic(world_cfg: &WorldConfig, spec: &BenchmarkSpec, cfg: &ProtocolConfig) -> Result<SyntheticRun> {
    let world = Arc::new(crate::world::generate_world(world_cfg)?);
    let encoder = ToyEncoder::new(world.clone());
    let (train, gallery, eval) = emit_benchmark(&world, spec)?;
    let (pretrained, pretrain_report) = pretrain_synthetic(&encoder, &world, cfg)?;
    let (report, personalized) = run_with_pretrained(&encoder, &world, cfg, &pretrained, &train, &gallery, &eval)?;
    Ok(SyntheticRun {
        world,
        encoder,
        pretrained,
        pretrain_report,
        report,
        personalized,
    })
}

/// Runs the protocol on synthetic manifests with an existing pretrained map
/// and a fresh in-memory caption cache.
pub fn run_with_pretrained<E: EncoderPair<f64> + ?Sized>(
    encoder: &E,
    world: &Arc<World>,
    cfg: &ProtocolConfig,
    pretrained: &PiMapParams<f64>,
    train: &TrainManifest,
    gallery: &GalleryManifest,
    eval: &EvalManifest,
) -> Result<(ProtocolReport, Vec<PersonalizedInstance>)> {
    let cache = CaptionCache::in_memory();
    let client = cfg.caption_client.client(Some(world), cfg.seed)?;
    let pipeline = Pipeline {
        encoder,
        world: Some(world.clone()),
        cfg,
        caption_cache: &cache,
        llm: client.as_deref(),
    };
    run_protocol(&pipeline, pretrained, train, gallery, eval)
}
