use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pimap::harness::protocol::pretrain_synthetic;
use pimap::harness::{Backend, ProtocolConfig};
use pimap::pimap::PiMapParams;
use pimap::retrieval::{search, Bindings, Index};
use pimap::world::render::{encode_png, render};
use pimap::world::{emit_benchmark, generate_world, BenchmarkSpec, SyntheticMediaDescriptor, ToyEncoder, World, WorldConfig};
use pimap_service::store::{JobRecord, JobState, PersonaRecord, PersonaStatus};
use pimap_service::{start, AppState, ServiceConfig, CONFIG_HEADER, ENCODER_HEADER};
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "pimap-test-boundary";

fn world_cfg() -> WorldConfig {
    WorldConfig {
        seed: 11,
        d_joint: 16,
        d_tok: 12,
        n_categories: 2,
        n_instances_per_category: 2,
        n_population_per_category: 4,
        background_pool_size: 8,
        attribute_pool_per_category: 4,
        ..WorldConfig::default()
    }
}

fn protocol() -> ProtocolConfig {
    let mut cfg = ProtocolConfig {
        seed: 11,
        pretrain_samples: 64,
        ..Default::default()
    };
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 16;
    cfg.personalize.epochs = 3;
    cfg.personalize.warmup_steps = 5;
    cfg
}

struct Fixture {
    world: Arc<World>,
    params: PiMapParams<f64>,
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let world = Arc::new(generate_world(&world_cfg()).unwrap());
        let enc = ToyEncoder::<f64>::new(world.clone());
        let (params, _) = pretrain_synthetic(&enc, &world, &protocol()).unwrap();
        Self {
            world,
            params,
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn config(&self) -> ServiceConfig {
        let mut c = ServiceConfig::new(self.dir.path());
        c.protocol = protocol();
        c.population_distractors = 8;
        c
    }

    fn start(&self, cfg: ServiceConfig) -> (Router, AppState) {
        start(cfg, Backend::toy(self.world.clone()), self.params.clone()).unwrap()
    }

    /// Tagged PNG renders of an instance's templates.
    fn templates(&self, instance: &str, n: usize) -> Vec<Vec<u8>> {
        (0..n)
            .map(|k| {
                let bg = &self.world.backgrounds[k % self.world.backgrounds.len()].name;
                let d = SyntheticMediaDescriptor::image(format!("{instance}-{k}"), instance, bg, 0.5);
                let (img, _) = render(&self.world, &d, 48, 48).unwrap();
                encode_png(&img, Some(&d)).unwrap()
            })
            .collect()
    }
}

enum Part<'a> {
    Text(&'a str, &'a str),
    File(&'a str, &'a str, &'a [u8]),
}

fn multipart_body(parts: &[Part<'_>]) -> Vec<u8> {
    let mut b = Vec::new();
    for p in parts {
        b.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match p {
            Part::Text(name, value) => {
                b.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n").as_bytes());
            }
            Part::File(name, filename, bytes) => {
                b.extend_from_slice(
                    format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{filename}\"\r\nContent-Type: image/png\r\n\r\n")
                        .as_bytes(),
                );
                b.extend_from_slice(bytes);
                b.extend_from_slice(b"\r\n");
            }
        }
    }
    b.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    b
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

async fn send(router: &Router, req: Request<Body>) -> Reply {
    let res = router.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

async fn get(router: &Router, uri: &str) -> Reply {
    send(router, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(router: &Router, uri: &str, body: &Value) -> Reply {
    send(
        router,
        Request::post(uri)
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(body).unwrap()))
            .unwrap(),
    )
    .await
}

async fn post_multipart(router: &Router, uri: &str, parts: &[Part<'_>]) -> Reply {
    send(
        router,
        Request::post(uri)
            .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
            .body(Body::from(multipart_body(parts)))
            .unwrap(),
    )
    .await
}

async fn create_persona(router: &Router, name: &str, category: &str, templates: &[Vec<u8>]) -> Reply {
    let mut parts = vec![Part::Text("name", name), Part::Text("category", category)];
    for (k, t) in templates.iter().enumerate() {
        let _ = k;
        parts.push(Part::File("templates", "t.png", t));
    }
    post_multipart(router, "/personas", &parts).await
}

async fn wait_for_job(router: &Router, id: &str) -> JobRecord {
    let start = Instant::now();
    loop {
        let r = get(router, &format!("/jobs/{id}")).await;
        assert_eq!(r.status, StatusCode::OK);
        let job: JobRecord = serde_json::from_slice(&r.body).unwrap();
        if matches!(job.state, JobState::Done | JobState::Failed) {
            return job;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "job {id} did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

fn gallery_json(world: &World) -> Value {
    let spec = BenchmarkSpec {
        seed: 11,
        n_instances: 4,
        gallery_items: 16,
        templates_per_instance: 3,
        ..Default::default()
    };
    let (_, gallery, _) = emit_benchmark(world, &spec).unwrap();
    serde_json::to_value(&gallery).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn persona_lifecycle_index_and_search() {
    let fx = Fixture::new();
    let (router, state) = fx.start(fx.config());
    let encoder_id = fx.world.encoder_id();
    let config_hash = protocol().hash();
    let stamped = |r: &Reply| {
        assert_eq!(r.headers[ENCODER_HEADER], encoder_id.as_str());
        assert_eq!(r.headers[CONFIG_HEADER], config_hash.as_str());
    };

    let templates = fx.templates("dog_0", 3);
    let r = create_persona(&router, "dog_0", "dog", &templates).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.body));
    stamped(&r);
    let persona: PersonaRecord = serde_json::from_slice(&r.body).unwrap();
    assert_eq!(persona.status, PersonaStatus::Untrained);
    assert_eq!(persona.templates.len(), 3);
    for id in &persona.templates {
        assert!(state.data_dir().join("thumbs").join(format!("{id}.png")).exists());
    }

    let r = create_persona(&router, "dog_0", "dog", &templates).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    stamped(&r);
    let r = post_multipart(
        &router,
        "/personas",
        &[Part::Text("category", "dog"), Part::File("templates", "a.png", &templates[0])],
    )
    .await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = create_persona(&router, "bad name!", "dog", &templates).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = create_persona(&router, "junk", "dog", &[b"not an image".to_vec()]).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let (plain, _) = render(
        &fx.world,
        &SyntheticMediaDescriptor::image("p", "dog_0", &fx.world.backgrounds[0].name, 0.5),
        8,
        8,
    )
    .unwrap();
    let r = create_persona(&router, "plain", "dog", &[encode_png(&plain, None).unwrap()]).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST, "the toy encoder only reads tagged renders");
    let r = create_persona(&router, "nothing", "dog", &[]).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    let listed: Vec<PersonaRecord> = serde_json::from_slice(&get(&router, "/personas").await.body).unwrap();
    assert_eq!(listed.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), vec!["dog_0"]);

    let r = post_json(&router, "/search", &json!({"query_text": "a photo of @dog_0"})).await;
    assert_eq!(r.status, StatusCode::CONFLICT, "untrained persona");
    stamped(&r);
    let r = post_json(&router, "/search", &json!({"query_text": "a photo of @ghost"})).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "unbound persona");
    let r = post_json(&router, "/search", &json!({"query_text": "a photo of a dog", "k": 0})).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = post_json(&router, "/search", &json!({"query_text": "a photo of a dog"})).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["hits"], json!([]), "empty index yields no hits");

    let r = post_json(&router, "/index", &gallery_json(&fx.world)).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&r.body));
    let job: JobRecord = serde_json::from_slice(&r.body).unwrap();
    let job = wait_for_job(&router, &job.job_id).await;
    assert_eq!(job.state, JobState::Done, "{:?}", job.error);
    assert_eq!(state.index().len(), 16);
    assert_eq!(*state.index(), Index::load(&state.index_path()).unwrap());
    let r = post_json(&router, "/index", &gallery_json(&fx.world)).await;
    let again = wait_for_job(&router, &serde_json::from_slice::<JobRecord>(&r.body).unwrap().job_id).await;
    assert_eq!(again.state, JobState::Done);
    assert_eq!(state.index().len(), 16, "re-indexing the same media is idempotent");

    assert_eq!(get(&router, "/personas/ghost").await.status, StatusCode::NOT_FOUND);
    let r = post_json(&router, "/personas/ghost/train", &json!({})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    stamped(&r);
    let r = post_json(&router, "/personas/dog_0/train", &json!({})).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let job: JobRecord = serde_json::from_slice(&r.body).unwrap();
    assert_eq!(job.state, JobState::Queued);
    let job = wait_for_job(&router, &job.job_id).await;
    assert_eq!(job.state, JobState::Done, "{:?}", job.error);
    assert_eq!(job.progress, 1.0);
    assert_eq!(job.result.as_deref(), Some("/personas/dog_0/token"));
    let persona: PersonaRecord = serde_json::from_slice(&get(&router, "/personas/dog_0").await.body).unwrap();
    assert_eq!(persona.status, PersonaStatus::Trained);
    let token_bytes = get(&router, "/personas/dog_0/token").await.body;
    let token = pimap::trainer::PersonaToken::from_bytes(&token_bytes, std::path::Path::new("dog_0")).unwrap();
    assert_eq!(token.encoder_id, encoder_id);
    assert!(token.created_at.is_some());

    let text = "a photo of @dog_0 in the park";
    let r = post_json(&router, "/search", &json!({"query_text": text, "k": 5})).await;
    assert_eq!(r.status, StatusCode::OK);
    stamped(&r);
    let v = r.json();
    assert_eq!(v["hits"].as_array().unwrap().len(), 5);
    assert_eq!(v["query"]["personas"][0]["instance_id"], "dog_0");
    assert_eq!(v["query"]["personas"][0]["n_templates_used"], 3);
    assert_eq!(v["query"]["encoder_id"], encoder_id.as_str());

    // The handler adds nothing to the library result: same bytes from an
    // independently built encoder, the persisted index and the stored token.
    let encoder = ToyEncoder::<f64>::new(Arc::new(generate_world(&world_cfg()).unwrap()));
    let index = Index::<f64>::load(&state.index_path()).unwrap();
    let bindings: Bindings = [("dog_0".to_string(), token)].into_iter().collect();
    let direct = serde_json::to_vec(&search(&encoder, &index, text, 5, &bindings).unwrap()).unwrap();
    assert_eq!(r.body, direct);

    let r = post_json(&router, "/search", &json!({"query_text": "@dog_0", "k": 1000})).await;
    assert_eq!(
        r.json()["hits"].as_array().unwrap().len(),
        16,
        "k beyond the index returns everything"
    );

    let thumb = get(&router, &format!("/media/{}/thumbnail", persona.templates[0])).await;
    assert_eq!(thumb.status, StatusCode::OK);
    assert_eq!(thumb.headers["content-type"], "image/png");
    let img = image::load_from_memory(&thumb.body).unwrap();
    assert!(img.width() <= 128 && img.height() <= 128);
    assert_eq!(get(&router, "/media/g0000/thumbnail").await.status, StatusCode::OK);
    let r = get(&router, "/media/nope/thumbnail").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    stamped(&r);
    let r = get(&router, "/no/such/route").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    stamped(&r);
    assert_eq!(get(&router, "/jobs/job-999999").await.status, StatusCode::NOT_FOUND);

    let status = get(&router, "/status").await.json();
    assert_eq!(status["index_size"], 16);
    assert_eq!(status["workers"], 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn multipart_index_upload_is_content_addressed() {
    let fx = Fixture::new();
    let (router, state) = fx.start(fx.config());
    let files = fx.templates("cat_0", 2);
    let parts = [
        Part::File("media", "a.png", &files[0]),
        Part::File("media", "b.png", &files[1]),
        Part::File("media", "a-again.png", &files[0]),
    ];
    let r = post_multipart(&router, "/index", &parts).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&r.body));
    let job: JobRecord = serde_json::from_slice(&r.body).unwrap();
    assert_eq!(job.media.len(), 2, "duplicate content collapses to one media id");
    let done = wait_for_job(&router, &job.job_id).await;
    assert_eq!(done.state, JobState::Done, "{:?}", done.error);
    assert_eq!(state.index().len(), 2);
    let stored: Vec<_> = std::fs::read_dir(state.data_dir().join("media")).unwrap().collect();
    assert_eq!(stored.len(), 2);
    let want = &pimap::seed::sha256_hex(&files[0])[..16];
    assert!(state.index().get(want).is_some());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn oversized_uploads_are_rejected() {
    let fx = Fixture::new();
    let mut cfg = fx.config();
    cfg.max_upload_bytes = 4096;
    let (router, _) = fx.start(cfg);
    let big = vec![0u8; 64 * 1024];
    let r = create_persona(&router, "dog_0", "dog", &[big]).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);
    assert!(r.headers.contains_key(ENCODER_HEADER));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_queue_refuses_and_busy_persona_conflicts() {
    let fx = Fixture::new();
    let mut cfg = fx.config();
    cfg.workers = 0;
    cfg.queue_capacity = 1;
    let (router, state) = fx.start(cfg);
    for (name, cat) in [("dog_0", "dog"), ("cat_0", "cat")] {
        let r = create_persona(&router, name, cat, &fx.templates(name, 2)).await;
        assert_eq!(r.status, StatusCode::CREATED);
    }
    let r = post_json(&router, "/personas/dog_0/train", &json!({})).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let queued: JobRecord = serde_json::from_slice(&r.body).unwrap();
    let r = post_json(&router, "/personas/dog_0/train", &json!({})).await;
    assert_eq!(r.status, StatusCode::TOO_MANY_REQUESTS, "queue is checked before persona state");
    let r = post_json(&router, "/personas/cat_0/train", &json!({})).await;
    assert_eq!(r.status, StatusCode::TOO_MANY_REQUESTS);
    let cat = state.store().persona("cat_0").unwrap().unwrap();
    assert_eq!(cat.status, PersonaStatus::Untrained);
    assert_eq!(state.store().jobs().unwrap().len(), 1, "refused jobs leave no record");
    let dog = state.store().persona("dog_0").unwrap().unwrap();
    assert_eq!(dog.status, PersonaStatus::Queued);
    assert_eq!(dog.last_job.as_deref(), Some(queued.job_id.as_str()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn busy_persona_conflicts() {
    let fx = Fixture::new();
    let mut cfg = fx.config();
    cfg.workers = 0;
    let (router, _) = fx.start(cfg);
    let r = create_persona(&router, "dog_0", "dog", &fx.templates("dog_0", 2)).await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(
        post_json(&router, "/personas/dog_0/train", &json!({})).await.status,
        StatusCode::ACCEPTED
    );
    assert_eq!(
        post_json(&router, "/personas/dog_0/train", &json!({})).await.status,
        StatusCode::CONFLICT
    );
}

#[test]
fn state_survives_restart_and_interrupted_jobs_fail() {
    let fx = Fixture::new();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let job_id = {
        let state = AppState::open(fx.config(), Backend::toy(fx.world.clone()), fx.params.clone()).unwrap();
        let router = pimap_service::router(state.clone());
        rt.block_on(async {
            let r = create_persona(&router, "dog_0", "dog", &fx.templates("dog_0", 2)).await;
            assert_eq!(r.status, StatusCode::CREATED);
            let r = post_json(&router, "/personas/dog_0/train", &json!({})).await;
            serde_json::from_slice::<JobRecord>(&r.body).unwrap().job_id
        })
    };
    let state = AppState::open(fx.config(), Backend::toy(fx.world.clone()), fx.params.clone()).unwrap();
    let job = state.store().job(&job_id).unwrap().unwrap();
    assert_eq!(job.state, JobState::Failed);
    assert!(job.error.unwrap().contains("restart"));
    let dog = state.store().persona("dog_0").unwrap().unwrap();
    assert_eq!(dog.status, PersonaStatus::Failed);
    assert_eq!(dog.templates.len(), 2);
    let files: Vec<_> = std::fs::read_dir(fx.dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(
        files.iter().filter(|f| f.to_string_lossy().ends_with(".redb")).count(),
        1,
        "one store file"
    );
}
