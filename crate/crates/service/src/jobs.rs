//! Job submission and execution.

use std::collections::BTreeMap;
use std::sync::Arc;

use pimap::encoder::EncoderPair;
use pimap::harness::manifest::InstanceManifest;
use pimap::harness::protocol::{distractor_pool, personalize_one, Pipeline, PreparedInstance};
use pimap::objectives::{BatchItem, Caption};
use pimap::retrieval::Index;
use pimap::seed::substream_seed;
use pimap::world::generic_dataset;
use tokio::sync::mpsc::error::TrySendError;

use crate::error::{ServiceError, ServiceResult};
use crate::store::{JobKind, JobRecord, JobState, PersonaRecord, PersonaStatus};
use crate::{now, AppState};

/// Progress is persisted in steps of this size.
const PROGRESS_STEP: f64 = 0.05;

impl AppState {
    /// Records a queued job and hands it to the workers. `before_enqueue`
    /// runs once a queue slot is reserved; its error aborts the submission.
    pub(crate) fn submit(
        &self,
        kind: JobKind,
        persona: Option<String>,
        media: Vec<String>,
        before_enqueue: impl FnOnce(&str) -> ServiceResult<()>,
    ) -> ServiceResult<JobRecord> {
        let inner = &self.inner;
        let permit = inner.queue.try_reserve().map_err(|e| match e {
            TrySendError::Full(()) => ServiceError::new(axum::http::StatusCode::TOO_MANY_REQUESTS, "job queue is full"),
            TrySendError::Closed(()) => ServiceError::internal("job queue is closed"),
        })?;
        let job_id = format!("job-{:06}", inner.store.next_id("job")?);
        before_enqueue(&job_id)?;
        let t = now();
        let job = JobRecord {
            job_id: job_id.clone(),
            kind,
            persona,
            media,
            state: JobState::Queued,
            progress: 0.0,
            result: None,
            error: None,
            created_at: t,
            updated_at: t,
        };
        inner.store.put_job(&job)?;
        permit.send(job_id);
        Ok(job)
    }

    fn update_job(&self, job: &mut JobRecord, f: impl FnOnce(&mut JobRecord)) {
        f(job);
        job.updated_at = now();
        if let Err(e) = self.inner.store.put_job(job) {
            tracing::error!(job = job.job_id, "cannot persist job: {e}");
        }
    }

    fn pipeline(&self) -> Pipeline<'_, dyn EncoderPair<f64>> {
        let inner = &self.inner;
        Pipeline {
            encoder: &*inner.backend.encoder,
            world: inner.backend.world.clone(),
            cfg: &inner.cfg.protocol,
            caption_cache: &inner.captions,
            llm: inner.llm.as_deref(),
        }
    }

    fn prepare(&self, pipeline: &Pipeline<'_, dyn EncoderPair<f64>>, p: &PersonaRecord) -> ServiceResult<PreparedInstance> {
        if let Some(hit) = self.inner.prepared.lock().expect("prepared cache poisoned").get(&p.id) {
            return Ok(hit.clone());
        }
        let templates = p
            .templates
            .iter()
            .map(|id| {
                self.inner
                    .store
                    .media(id)?
                    .map(|m| m.descriptor)
                    .ok_or_else(|| ServiceError::internal(format!("template `{id}` missing from the store")))
            })
            .collect::<ServiceResult<Vec<_>>>()?;
        let manifest = InstanceManifest {
            instance_id: p.id.clone(),
            category: p.category.clone(),
            caption: p.caption.clone(),
            templates,
            eval_templates: Vec::new(),
            boxes: BTreeMap::new(),
        };
        let prepared = pipeline.prepare(&manifest)?;
        self.inner
            .prepared
            .lock()
            .expect("prepared cache poisoned")
            .insert(p.id.clone(), prepared.clone());
        Ok(prepared)
    }

    fn population(&self) -> ServiceResult<&[BatchItem<f64>]> {
        let inner = &self.inner;
        if let Some(p) = inner.population.get() {
            return Ok(p);
        }
        let mut items = Vec::new();
        if let Some(world) = &inner.backend.world {
            let seed = substream_seed(inner.cfg.protocol.seed, "service/population");
            for (media, caption) in generic_dataset(world, inner.cfg.population_distractors, seed) {
                let image = inner.backend.encoder.encode_image(&media)?;
                let cap = Caption::encode(&*inner.backend.encoder, &caption)?;
                items.push(BatchItem {
                    image_raw: image.clone(),
                    image_localized: image,
                    specific: cap.clone(),
                    generic: cap,
                });
            }
        }
        Ok(inner.population.get_or_init(|| items))
    }

    fn personalize_job(&self, job: &mut JobRecord) -> ServiceResult<String> {
        let store = &self.inner.store;
        let id = job
            .persona
            .clone()
            .ok_or_else(|| ServiceError::internal("personalization job without persona"))?;
        let persona = store
            .persona(&id)?
            .ok_or_else(|| ServiceError::not_found(format!("persona `{id}` no longer exists")))?;
        store.update_persona(&id, |p| {
            p.status = PersonaStatus::Training;
            Ok(())
        })?;
        let pipeline = self.pipeline();
        let target = self.prepare(&pipeline, &persona)?;
        let mut others = Vec::new();
        for p in store.personas()? {
            if p.id != id {
                others.push(self.prepare(&pipeline, &p)?);
            }
        }
        let mut distractors = distractor_pool(&others, usize::MAX);
        distractors.extend_from_slice(self.population()?);
        if distractors.is_empty() {
            return Err(ServiceError::bad_request(
                "personalization needs negatives: add a second persona first",
            ));
        }
        let mut saved = 0.0;
        let mut on_step = |done: usize, total: usize| {
            let p = done as f64 / total.max(1) as f64;
            if p - saved >= PROGRESS_STEP && p < 1.0 {
                saved = p;
                self.update_job(job, |j| j.progress = p);
            }
        };
        let out = personalize_one(&pipeline, &self.inner.pretrained, &target, distractors, &mut on_step)?;
        let mut token = out.token;
        token.created_at = Some(now());
        store.put_token(&id, &token)?;
        store.update_persona(&id, |p| {
            p.status = PersonaStatus::Trained;
            Ok(())
        })?;
        Ok(format!("/personas/{id}/token"))
    }

    fn index_job(&self, job: &JobRecord) -> ServiceResult<String> {
        let inner = &self.inner;
        let mut items = Vec::new();
        for id in &job.media {
            let m = inner
                .store
                .media(id)?
                .ok_or_else(|| ServiceError::internal(format!("media `{id}` missing from the store")))?;
            items.push((m.descriptor, m.labels));
        }
        let _writer = inner.index_writer.lock().expect("index writer poisoned");
        let current = self.index();
        items.retain(|(m, _)| current.get(m.media_id()).is_none());
        let added = Index::build(&*inner.backend.encoder, &items)?;
        let mut next = (*current).clone();
        for e in added.entries() {
            next.insert(e.clone())?;
        }
        next.save(&self.index_path())?;
        let size = next.len();
        *inner.index.write().expect("index lock poisoned") = Arc::new(next);
        Ok(format!("index_size={size}"))
    }
}

/// Runs one job to completion, recording its outcome.
pub(crate) fn run(state: &AppState, job_id: &str) {
    let mut job = match state.inner.store.job(job_id) {
        Ok(Some(j)) => j,
        Ok(None) => return,
        Err(e) => {
            tracing::error!(job = job_id, "cannot load job: {e}");
            return;
        }
    };
    state.update_job(&mut job, |j| j.state = JobState::Running);
    let outcome = match job.kind {
        JobKind::Personalize => state.personalize_job(&mut job),
        JobKind::Index => state.index_job(&job),
    };
    match outcome {
        Ok(result) => state.update_job(&mut job, |j| {
            j.state = JobState::Done;
            j.progress = 1.0;
            j.result = Some(result);
        }),
        Err(e) => {
            tracing::warn!(job = job_id, "job failed: {}", e.message);
            if let Some(p) = &job.persona {
                let _ = state.inner.store.update_persona(p, |p| {
                    p.status = PersonaStatus::Failed;
                    Ok(())
                });
            }
            state.update_job(&mut job, |j| {
                j.state = JobState::Failed;
                j.error = Some(e.message);
            });
        }
    }
}
