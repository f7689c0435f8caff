//! Pretraining of the mapping network and per-instance personalization.

mod optim;
mod token;

pub use optim::AdamW;
pub use token::{LogRecord, PersonaToken, TrainingLog, TOKEN_MAGIC, TOKEN_VERSION};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::encoder::{Embedding, EncoderPair, MediaDescriptor};
use crate::error::{Error, Result};
use crate::linalg;
use crate::objectives::{persona_objective, prompt_sequence, symmetric_ce_loss, Batch, BatchItem, Caption, LossConfig};
use crate::pimap::{init_conditioning, PiMapParams};
use crate::scalar::Scalar;
use crate::seed::{config_hash, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Personalize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

/// Dataset profiles that fix the personalization epoch count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Synthetic,
    ThisIsMy,
    Deepfashion2,
}

impl Profile {
    pub fn personalize_epochs(self) -> usize {
        match self {
            Profile::Synthetic | Profile::ThisIsMy => 50,
            Profile::Deepfashion2 => 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    /// Optimizer steps per personalization epoch; pretraining epochs are
    /// full passes over the dataset.
    pub steps_per_epoch: usize,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub adamw: AdamWConfig,
    pub loss: LossConfig,
    /// Re-initialize conditioning vectors from the templates before
    /// personalizing.
    pub reinit_conditioning: bool,
    /// Frames kept per video template.
    pub video_template_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::personalize(Profile::ThisIsMy)
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            batch_size: 256,
            base_lr: 3e-4,
            epochs: 10,
            steps_per_epoch: 0,
            warmup_steps: 0,
            schedule: Schedule::Constant,
            seed: 0,
            adamw: AdamWConfig::default(),
            loss: LossConfig::default(),
            reinit_conditioning: false,
            video_template_frames: 10,
        }
    }

    pub fn personalize(profile: Profile) -> Self {
        Self {
            phase: Phase::Personalize,
            batch_size: 16,
            base_lr: 1e-4,
            epochs: profile.personalize_epochs(),
            steps_per_epoch: 10,
            warmup_steps: 200,
            schedule: Schedule::Cosine,
            seed: 0,
            adamw: AdamWConfig::default(),
            loss: LossConfig::default(),
            reinit_conditioning: true,
            video_template_frames: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        if self.phase == Phase::Personalize && self.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        if self.video_template_frames == 0 {
            return Err(Error::Config("video_template_frames must be positive".into()));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Learning rate at optimizer step `step` of `total_steps`: linear warmup
/// from 0 to `base_lr`, then constant or cosine decay reaching 0 at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig, total_steps: usize) -> f64 {
    let base = cfg.base_lr;
    if step >= total_steps && cfg.schedule == Schedule::Cosine {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return base * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let span = (total_steps - cfg.warmup_steps) as f64;
            let progress = (step - cfg.warmup_steps) as f64 / span;
            base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Uniformly spaced frame indices `floor(k (T - 1) / (n - 1))`; all frames
/// when the video has at most `n`.
pub fn prepare_video_templates(n_frames: usize, n: usize) -> Result<Vec<usize>> {
    if n_frames == 0 {
        return Err(Error::Usage("video has no frames".into()));
    }
    if n == 0 {
        return Err(Error::Usage("at least one frame must be kept".into()));
    }
    if n_frames <= n {
        return Ok((0..n_frames).collect());
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    Ok((0..n).map(|k| k * (n_frames - 1) / (n - 1)).collect())
}

/// Embedding of one template: the image embedding, or for a video the mean
/// over its subsampled frames.
pub fn template_embedding<T: Scalar, E: EncoderPair<T> + ?Sized>(
    encoder: &E,
    media: &MediaDescriptor,
    frames_per_video: usize,
) -> Result<Embedding<T>> {
    if !media.is_video() {
        return encoder.encode_image(media);
    }
    let idx = prepare_video_templates(media.n_frames(), frames_per_video)?;
    let embs: Vec<Vec<T>> = idx
        .iter()
        .map(|&k| Ok(encoder.encode_image(&media.frame(k)?)?.into_values()))
        .collect::<Result<_>>()?;
    Embedding::joint(linalg::mean_of(&embs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_mean_losses: Vec<f64>,
    pub steps: usize,
}

/// Optimizes the symmetric cross-entropy between each image embedding and
/// the encoding of the prompt holding the mapped image. Conditioning
/// vectors stay fixed.
pub fn pretrain<T: Scalar, E: EncoderPair<T> + ?Sized>(
    encoder: &E,
    params: &mut PiMapParams<T>,
    images: &[Embedding<T>],
    cfg: &TrainConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(PretrainReport {
            epoch_mean_losses: Vec::new(),
            steps: 0,
        });
    }
    if images.len() < 2 {
        return Err(Error::Usage("pretraining needs at least two images".into()));
    }
    let batch = cfg.batch_size.min(images.len());
    let batches_per_epoch = images.len() / batch;
    let total = batches_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(params, cfg.adamw, &["cond1", "cond2"]);
    let tau = T::lit(cfg.loss.tau);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_mean_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, &format!("pretrain/shuffle/{epoch}")));
        let mut sum = 0.0;
        for b in 0..batches_per_epoch {
            let idx = &order[b * batch..(b + 1) * batch];
            let mut caches = Vec::with_capacity(batch);
            let mut seqs = Vec::with_capacity(batch);
            let mut texts = Vec::with_capacity(batch);
            let mut imgs = Vec::with_capacity(batch);
            for &i in idx {
                let x = images[i].values();
                let (tok, cache) = params.forward_cached(x)?;
                let seq = prompt_sequence(encoder, &cfg.loss.y_star_prompt_template, &tok)?;
                texts.push(encoder.encode_text(&seq)?.into_values());
                seqs.push(seq);
                caches.push(cache);
                imgs.push(x.to_vec());
            }
            let out = symmetric_ce_loss(&imgs, &texts, tau)?;
            let loss = out.loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: format!("pretraining loss is {loss}"),
                });
            }
            let mut grads = params.zeros_like();
            for ((seq, cache), g_text) in seqs.iter().zip(&caches).zip(&out.grad_texts) {
                let g_tok = encoder.encode_text_grad(seq, g_text)?.remove(0);
                params.backward(cache, &g_tok, &mut grads);
            }
            opt.step(params, &grads, T::lit(lr_at(step, cfg, total)));
            sum += loss;
            step += 1;
        }
        epoch_mean_losses.push(sum / batches_per_epoch as f64);
        tracing::debug!(epoch, loss = epoch_mean_losses[epoch], "pretrain epoch");
    }
    if !params.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: "non-finite parameters after pretraining".into(),
        });
    }
    Ok(PretrainReport {
        epoch_mean_losses,
        steps: step,
    })
}

/// Precomputed inputs for personalizing one instance.
#[derive(Debug, Clone)]
pub struct PersonalizeInput<T> {
    pub instance_id: String,
    /// Template media ids; training cycles over templates in id order.
    pub template_ids: Vec<String>,
    pub templates_raw: Vec<Embedding<T>>,
    pub templates_localized: Vec<Embedding<T>>,
    pub specific: Caption<T>,
    pub generic: Caption<T>,
    /// Items of other instances used as in-batch negatives.
    pub distractors: Vec<BatchItem<T>>,
}

impl<T: Scalar> PersonalizeInput<T> {
    fn validate(&self) -> Result<()> {
        if self.templates_raw.is_empty() {
            return Err(Error::Usage(format!("instance `{}` has no templates", self.instance_id)));
        }
        if self.templates_raw.len() != self.templates_localized.len() || self.templates_raw.len() != self.template_ids.len() {
            return Err(Error::Shape("template lists differ in length".into()));
        }
        if self.distractors.is_empty() {
            return Err(Error::Usage("personalization needs at least one distractor for negatives".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PersonalizeOutput<T> {
    pub token: PersonaToken,
    pub params: PiMapParams<T>,
    pub log: TrainingLog,
}

/// Fine-tunes a copy of `pretrained` on one instance and returns the mean
/// mapped localized template as its token.
pub fn personalize<T: Scalar, E: EncoderPair<T> + ?Sized>(
    encoder: &E,
    pretrained: &PiMapParams<T>,
    input: &PersonalizeInput<T>,
    cfg: &TrainConfig,
) -> Result<PersonalizeOutput<T>> {
    personalize_observed(encoder, pretrained, input, cfg, &mut |_, _| {})
}

/// [`personalize`] calling `on_step(done, total)` after every optimizer step.
pub fn personalize_observed<T: Scalar, E: EncoderPair<T> + ?Sized>(
    encoder: &E,
    pretrained: &PiMapParams<T>,
    input: &PersonalizeInput<T>,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(usize, usize),
) -> Result<PersonalizeOutput<T>> {
    cfg.validate()?;
    input.validate()?;
    let mut params = pretrained.clone();
    let mut order: Vec<usize> = (0..input.template_ids.len()).collect();
    order.sort_by(|&a, &b| input.template_ids[a].cmp(&input.template_ids[b]));

    if cfg.reinit_conditioning && params.hidden == params.d_joint {
        let (c1, c2) = init_conditioning(&input.templates_localized, std::slice::from_ref(&input.specific.embedding))?;
        params.cond1 = c1;
        params.cond2 = c2;
    }

    let total = cfg.epochs * cfg.steps_per_epoch;
    let mut opt = AdamW::new(&params, cfg.adamw, &[]);
    let mut rng = substream(cfg.seed, &format!("personalize/batches/{}", input.instance_id));
    let n_distract = (cfg.batch_size - 1).min(input.distractors.len());
    let mut log = TrainingLog::default();
    for step in 0..total {
        let k = order[step % order.len()];
        let mut items = vec![BatchItem {
            image_raw: input.templates_raw[k].clone(),
            image_localized: input.templates_localized[k].clone(),
            specific: input.specific.clone(),
            generic: input.generic.clone(),
        }];
        items.extend(input.distractors.choose_multiple(&mut rng, n_distract).cloned());
        let batch = Batch { items };

        let (tok, cache) = params.forward_cached(input.templates_localized[k].values())?;
        let obj = persona_objective(&tok, 0, &batch, &cfg.loss, encoder)?;
        let lr = lr_at(step, cfg, total);
        let rec = LogRecord {
            step,
            lr,
            total: obj.total.to_f64_lossy(),
            text: obj.text.to_f64_lossy(),
            image: obj.image.to_f64_lossy(),
        };
        if !(rec.total.is_finite() && rec.text.is_finite() && rec.image.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is not finite (L={}, L_t={}, L_i={})", rec.total, rec.text, rec.image),
            });
        }
        log.records.push(rec);
        let mut grads = params.zeros_like();
        params.backward(&cache, &obj.grad_token, &mut grads);
        opt.step(&mut params, &grads, T::lit(lr));
        on_step(step + 1, total);
    }
    if !params.is_finite() {
        return Err(Error::Diverged {
            step: total,
            reason: "non-finite parameters after personalization".into(),
        });
    }

    let token = mean_projection(&params, &input.templates_localized)?;
    Ok(PersonalizeOutput {
        token: PersonaToken {
            instance_id: input.instance_id.clone(),
            encoder_id: encoder.encoder_id().to_string(),
            n_templates_used: input.templates_raw.len(),
            config_hash: cfg.hash(),
            created_at: None,
            values: crate::scalar::cast_vec(&token),
        },
        params,
        log,
    })
}

/// Mean of the mapped embeddings.
pub fn mean_projection<T: Scalar>(params: &PiMapParams<T>, embs: &[Embedding<T>]) -> Result<Vec<T>> {
    let outs: Vec<Vec<T>> = embs.iter().map(|e| params.forward(e.values())).collect::<Result<_>>()?;
    linalg::mean_of(&outs)
}
