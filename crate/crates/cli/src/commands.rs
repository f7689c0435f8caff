use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pimap::caption::CaptionCache;
use pimap::encoder::exchange;
use pimap::encoder::external::{read_requests, serve_requests};
use pimap::encoder::EncoderPair;
use pimap::harness::manifest::{EvalManifest, GalleryManifest, TrainManifest};
use pimap::harness::protocol::{
    build_index, init_params, personalize_prepared, prepare_all, pretrain_on_media, pretrain_synthetic, run_protocol_with,
};
use pimap::harness::{
    ablation_variants, run_study, template_sweep_variants, Backend, EncoderSpec, Pipeline, ProtocolConfig, Repro, STUDY_SEEDS,
};
use pimap::io::atomic_write;
use pimap::pimap::{load_params, save_params, PiMapParams};
use pimap::retrieval::{search, Bindings, Index};
use pimap::seed::config_hash;
use pimap::trainer::PersonaToken;
use pimap::world::render::write_rendered;
use pimap::world::{emit_benchmark, generate_world, BenchmarkSpec, ToyEncoder, WorldConfig};
use pimap::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pimap",
    version,
    about = "Personalized retrieval tokens over frozen joint-embedding encoders"
)]
pub struct Cli {
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic world and benchmark manifests.
    SynthGen(SynthGenArgs),
    /// Pretrain the mapping network on generic images.
    Pretrain(PretrainArgs),
    /// Learn persona tokens for the instances of a train manifest.
    Personalize(PersonalizeArgs),
    /// Embed a gallery into an index file.
    Index(IndexArgs),
    /// Rank an index against a query that may mention personas.
    Search(SearchArgs),
    /// Score query arms on a benchmark, or run a multi-seed study.
    Evaluate(EvaluateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Reference external-encoder adapter backed by the toy encoder.
    #[command(hide = true)]
    ToyEncoder(ToyEncoderArgs),
}

#[derive(Args, Clone)]
struct EncoderArgs {
    /// Toy encoder world config (TOML), e.g. from `synth-gen`.
    #[arg(long, conflicts_with = "encoder_cmd")]
    world: Option<PathBuf>,
    /// External encoder adapter program.
    #[arg(long)]
    encoder_cmd: Option<PathBuf>,
    /// Argument for the adapter program (repeatable).
    #[arg(long = "encoder-arg", allow_hyphen_values = true, requires = "encoder_cmd")]
    encoder_args: Vec<String>,
}

impl EncoderArgs {
    fn spec(&self) -> Result<EncoderSpec> {
        match (&self.world, &self.encoder_cmd) {
            (Some(w), None) => Ok(EncoderSpec::Toy {
                world: WorldConfig::load(w)?,
            }),
            (None, Some(p)) => Ok(EncoderSpec::Command {
                program: p.clone(),
                args: self.encoder_args.clone(),
            }),
            _ => Err(Error::Usage("choose an encoder with --world or --encoder-cmd".into())),
        }
    }

    fn open(&self) -> Result<Backend> {
        Backend::open(&self.spec()?)
    }
}

#[derive(Args, Clone)]
struct ProtocolArgs {
    /// Protocol config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ProtocolArgs {
    fn load(&self) -> Result<ProtocolConfig> {
        let mut cfg = match &self.config {
            Some(p) => ProtocolConfig::load(p)?,
            None => ProtocolConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthGenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// World and benchmark seed; overrides the config files.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    world_config: Option<PathBuf>,
    #[arg(long)]
    bench_config: Option<PathBuf>,
    /// Also write tagged PNG renders of every template and gallery item.
    #[arg(long)]
    render: bool,
    /// Render side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: u32,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Gallery manifest of generic images; synthetic data is drawn from
    /// the world when omitted.
    #[arg(long)]
    media: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PersonalizeArgs {
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long)]
    train: PathBuf,
    /// Pretrained mapping network.
    #[arg(long)]
    params: PathBuf,
    /// Output directory for `<instance>.pitok` and training logs.
    #[arg(long)]
    out: PathBuf,
    /// Only these instances (repeatable); all when omitted.
    #[arg(long)]
    instance: Vec<String>,
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long)]
    gallery: PathBuf,
    /// Index file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long)]
    index: PathBuf,
    /// Directory of `<name>.pitok` files; `@name` mentions bind to them.
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long)]
    query: String,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    /// Print the result as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    /// Full method against each component removed.
    Ablations,
    /// Localized vs unlocalized templates across template counts.
    Templates,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long, required_unless_present = "study")]
    train: Option<PathBuf>,
    #[arg(long, required_unless_present = "study")]
    gallery: Option<PathBuf>,
    #[arg(long, required_unless_present = "study")]
    eval: Option<PathBuf>,
    #[arg(long, required_unless_present = "study")]
    params: Option<PathBuf>,
    /// Reuse tokens from this directory instead of personalizing.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Run a multi-seed synthetic study (needs --world).
    #[arg(long, value_enum)]
    study: Option<Study>,
    /// Benchmark spec for studies (TOML).
    #[arg(long)]
    bench: Option<PathBuf>,
    /// Template counts for the template study.
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    template_counts: Vec<usize>,
    /// Output directory for the report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Data directory (store, media, thumbnails, index).
    #[arg(long)]
    data: PathBuf,
    /// Pretrained mapping network; pretrained on synthetic data at startup
    /// when omitted with the toy encoder.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 64)]
    queue: usize,
    #[arg(long, default_value_t = 16)]
    max_upload_mb: usize,
}

#[derive(Args)]
struct ToyEncoderArgs {
    #[arg(long)]
    world: PathBuf,
    #[command(subcommand)]
    op: ToyOp,
}

#[derive(Subcommand)]
enum ToyOp {
    Describe,
    Encode {
        requests: PathBuf,
        output: PathBuf,
        /// Write the binary exchange format.
        #[arg(long)]
        binary: bool,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Unbound(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SynthGen(a) => synth_gen(a),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Personalize(a) => personalize(a),
        Cmd::Index(a) => index(a),
        Cmd::Search(a) => search_cmd(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Serve(a) => serve(a),
        Cmd::ToyEncoder(a) => toy_encoder(a),
    }
}

/// Prints the block and, when given, writes it to `path`.
fn emit_repro(repro: &Repro, path: Option<&Path>) -> Result<()> {
    let text = repro.to_text();
    print!("{text}");
    if let Some(p) = path {
        atomic_write(p, text.as_bytes())?;
    }
    Ok(())
}

fn repro(cfg: &ProtocolConfig, encoder_id: &str) -> Repro {
    Repro {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        encoder_id: encoder_id.to_string(),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn synth_gen(a: SynthGenArgs) -> Result<()> {
    let mut world_cfg = match &a.world_config {
        Some(p) => WorldConfig::load(p)?,
        None => WorldConfig::default(),
    };
    let mut spec: BenchmarkSpec = match &a.bench_config {
        Some(p) => load_toml(p)?,
        None => BenchmarkSpec::default(),
    };
    if let Some(s) = a.seed {
        world_cfg.seed = s;
        spec.seed = s;
    }
    let world = generate_world(&world_cfg)?;
    let (train, gallery, eval) = emit_benchmark(&world, &spec)?;
    std::fs::create_dir_all(&a.out)?;
    world_cfg.save(&a.out.join("world.toml"))?;
    atomic_write(
        &a.out.join("bench.toml"),
        toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?.as_bytes(),
    )?;
    train.save(&a.out.join("train.json"))?;
    gallery.save(&a.out.join("gallery.json"))?;
    eval.save(&a.out.join("eval.json"))?;
    if a.render {
        let dir = a.out.join("media");
        let media = train
            .instances
            .iter()
            .flat_map(|i| i.templates.iter().chain(&i.eval_templates))
            .chain(gallery.items.iter().map(|g| &g.media));
        for m in media {
            if let pimap::encoder::MediaDescriptor::Synthetic(d) = m {
                write_rendered(&world, d, &dir.join(format!("{}.png", d.media_id)), a.size)?;
            }
        }
    }
    let r = Repro {
        seed: world_cfg.seed,
        config_hash: config_hash(&(&world_cfg, &spec)),
        encoder_id: world.encoder_id(),
    };
    emit_repro(&r, Some(&a.out.join("repro.txt")))?;
    println!(
        "wrote {} instances, {} gallery items, {} queries to {}",
        train.instances.len(),
        gallery.items.len(),
        eval.queries.len(),
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let backend = a.encoder.open()?;
    let cfg = a.protocol.load()?;
    let encoder = &*backend.encoder;
    let (params, report) = match (&a.media, &backend.world) {
        (Some(m), _) => {
            let g = GalleryManifest::load(m)?;
            let media: Vec<_> = g.items.into_iter().map(|i| i.media).collect();
            pretrain_on_media(encoder, &media, &cfg)?
        }
        (None, Some(world)) => pretrain_synthetic(encoder, world, &cfg)?,
        (None, None) => return Err(Error::Usage("--media is required without a synthetic world".into())),
    };
    std::fs::create_dir_all(&a.out)?;
    save_params(&params, &a.out.join("params.pimap"))?;
    write_json(&a.out.join("pretrain.json"), &report)?;
    emit_repro(&repro(&cfg, encoder.encoder_id()), Some(&a.out.join("repro.txt")))?;
    for (e, l) in report.epoch_mean_losses.iter().enumerate() {
        println!("epoch {e}\tmean loss {l:.6}");
    }
    Ok(())
}

fn load_params_for(path: &Path, encoder: &dyn EncoderPair<f64>) -> Result<PiMapParams<f64>> {
    load_params(path, Some(encoder.descriptor()))
}

fn personalize(a: PersonalizeArgs) -> Result<()> {
    let backend = a.encoder.open()?;
    let mut cfg = a.protocol.load()?;
    if cfg.work_dir.is_none() {
        cfg.work_dir = Some(a.out.join("work"));
    }
    let encoder = &*backend.encoder;
    let train = TrainManifest::load(&a.train)?;
    for id in &a.instance {
        if train.instance(id).is_none() {
            return Err(Error::Usage(format!("instance `{id}` is not in {}", a.train.display())));
        }
    }
    let params = load_params_for(&a.params, encoder)?;
    std::fs::create_dir_all(&a.out)?;
    let cache = CaptionCache::open(a.out.join("captions.jsonl"))?;
    let llm = cfg.caption_client.client(backend.world.as_ref(), cfg.seed)?;
    let pipeline = Pipeline {
        encoder,
        world: backend.world.clone(),
        cfg: &cfg,
        caption_cache: &cache,
        llm: llm.as_deref(),
    };
    let prepared = prepare_all(&pipeline, &train)?;
    for (i, p) in prepared.iter().enumerate() {
        if !a.instance.is_empty() && !a.instance.contains(&p.instance_id) {
            continue;
        }
        let out = personalize_prepared(&pipeline, &params, &prepared, i)?;
        out.token.save(&a.out.join(format!("{}.pitok", p.instance_id)))?;
        let log_path = a.out.join(format!("{}.log.jsonl", p.instance_id));
        if log_path.exists() {
            std::fs::remove_file(&log_path)?;
        }
        out.log.append_to(&log_path)?;
        let (first, last) = (out.log.records.first(), out.log.records.last());
        println!(
            "{}\ttemplates={}\tcaption={:?}\tloss {:.6} -> {:.6}",
            p.instance_id,
            p.template_ids.len(),
            p.specific.text,
            first.map_or(f64::NAN, |r| r.total),
            last.map_or(f64::NAN, |r| r.total)
        );
    }
    emit_repro(&repro(&cfg, encoder.encoder_id()), Some(&a.out.join("repro.txt")))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn index(a: IndexArgs) -> Result<()> {
    let backend = a.encoder.open()?;
    let cfg = a.protocol.load()?;
    let gallery = GalleryManifest::load(&a.gallery)?;
    let idx = build_index(&*backend.encoder, &gallery)?;
    idx.save(&a.out)?;
    emit_repro(&repro(&cfg, backend.encoder_id()), Some(&sibling(&a.out, ".repro.txt")))?;
    println!("indexed {} items into {}", idx.len(), a.out.display());
    Ok(())
}

/// Every `<name>.pitok` in `dir`, keyed by file stem.
fn load_tokens(dir: &Path) -> Result<Bindings> {
    let mut b = BTreeMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.extension().is_some_and(|x| x == "pitok") {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            b.insert(name, PersonaToken::load(&p)?);
        }
    }
    Ok(b)
}

fn search_cmd(a: SearchArgs) -> Result<()> {
    let tokens = match &a.tokens {
        Some(d) => load_tokens(d)?,
        None => Bindings::new(),
    };
    if let Some(name) = pimap::encoder::mentions(&a.query).into_iter().find(|n| !tokens.contains_key(n)) {
        return Err(Error::Unbound(name));
    }
    let backend = a.encoder.open()?;
    let cfg = a.protocol.load()?;
    let encoder = &*backend.encoder;
    let idx = Index::<f64>::load(&a.index)?;
    if idx.encoder_id != encoder.encoder_id() {
        return Err(Error::EncoderMismatch {
            token: idx.encoder_id.clone(),
            active: encoder.encoder_id().to_string(),
        });
    }
    let out = search(encoder, &idx, &a.query, a.k, &tokens)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    emit_repro(&repro(&cfg, encoder.encoder_id()), None)?;
    println!("query = {}", out.query.text);
    for p in &out.query.personas {
        println!("persona @{} -> {} ({} templates)", p.mention, p.instance_id, p.n_templates_used);
    }
    for (r, h) in out.hits.iter().enumerate() {
        println!("{}\t{}\t{:.6}", r + 1, h.media_id, h.score);
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = a.protocol.load()?;
    std::fs::create_dir_all(&a.out)?;
    if let Some(study) = a.study {
        let world = match a.encoder.spec()? {
            EncoderSpec::Toy { world } => world,
            EncoderSpec::Command { .. } => return Err(Error::Usage("studies need the toy encoder (--world)".into())),
        };
        let spec: BenchmarkSpec = match &a.bench {
            Some(p) => load_toml(p)?,
            None => BenchmarkSpec::default(),
        };
        let variants = match study {
            Study::Ablations => ablation_variants(),
            Study::Templates => template_sweep_variants(&a.template_counts),
        };
        let report = run_study(&STUDY_SEEDS, &variants, &world, &spec, &cfg)?;
        let text = report.to_text();
        atomic_write(&a.out.join("study.txt"), text.as_bytes())?;
        write_json(&a.out.join("study.json"), &report)?;
        let r = Repro {
            seed: STUDY_SEEDS[0],
            config_hash: config_hash(&(&cfg, &world, &spec)),
            encoder_id: ToyEncoder::<f64>::new(Arc::new(generate_world(&world)?)).encoder_id().to_string(),
        };
        emit_repro(&r, Some(&a.out.join("repro.txt")))?;
        print!("\n{text}");
        return Ok(());
    }
    let missing = |what: &str| Error::Usage(format!("--{what} is required"));
    let train = TrainManifest::load(a.train.as_deref().ok_or_else(|| missing("train"))?)?;
    let gallery = GalleryManifest::load(a.gallery.as_deref().ok_or_else(|| missing("gallery"))?)?;
    let eval = EvalManifest::load(a.eval.as_deref().ok_or_else(|| missing("eval"))?)?;
    let backend = a.encoder.open()?;
    let encoder = &*backend.encoder;
    let params = load_params_for(a.params.as_deref().ok_or_else(|| missing("params"))?, encoder)?;
    let tokens = a.tokens.as_deref().map(load_tokens).transpose()?;
    let mut cfg = cfg;
    if cfg.work_dir.is_none() {
        cfg.work_dir = Some(a.out.join("work"));
    }
    let cache = CaptionCache::open(a.out.join("captions.jsonl"))?;
    let llm = cfg.caption_client.client(backend.world.as_ref(), cfg.seed)?;
    let pipeline = Pipeline {
        encoder,
        world: backend.world.clone(),
        cfg: &cfg,
        caption_cache: &cache,
        llm: llm.as_deref(),
    };
    let (report, _) = run_protocol_with(&pipeline, &params, &train, &gallery, &eval, tokens.as_ref())?;
    let text = report.to_text(&cfg.ks);
    atomic_write(&a.out.join("report.txt"), text.as_bytes())?;
    write_json(&a.out.join("report.json"), &report)?;
    atomic_write(&a.out.join("repro.txt"), report.repro.to_text().as_bytes())?;
    print!("{text}");
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let backend = a.encoder.open()?;
    let cfg = a.protocol.load()?;
    let params = match (&a.params, &backend.world) {
        (Some(p), _) => load_params_for(p, &*backend.encoder)?,
        (None, Some(world)) => {
            eprintln!("pretraining on synthetic data...");
            pretrain_synthetic(&*backend.encoder, world, &cfg)?.0
        }
        (None, None) => {
            tracing::warn!("no --params given; serving with an untrained mapping network");
            init_params(&*backend.encoder, &cfg)?
        }
    };
    let mut service_cfg = pimap_service::ServiceConfig::new(&a.data);
    service_cfg.workers = a.workers;
    service_cfg.queue_capacity = a.queue;
    service_cfg.max_upload_bytes = a.max_upload_mb << 20;
    service_cfg.protocol = cfg.clone();
    let encoder_id = backend.encoder_id().to_string();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let (router, _) = pimap_service::start(service_cfg, backend, params).map_err(|e| Error::External(e.message))?;
        let listener = tokio::net::TcpListener::bind(&a.addr).await?;
        emit_repro(&repro(&cfg, &encoder_id), Some(&a.data.join("repro.txt")))?;
        println!("listening on http://{}", listener.local_addr()?);
        pimap_service::serve(listener, router).await?;
        Ok(())
    })
}

fn toy_encoder(a: ToyEncoderArgs) -> Result<()> {
    let world = Arc::new(generate_world(&WorldConfig::load(&a.world)?)?);
    let encoder = ToyEncoder::<f64>::new(world);
    match a.op {
        ToyOp::Describe => println!("{}", serde_json::to_string(encoder.descriptor())?),
        ToyOp::Encode { requests, output, binary } => {
            let reqs = read_requests(&std::fs::read_to_string(&requests)?)?;
            let records = serve_requests(&encoder, &reqs)?;
            if binary {
                exchange::write_binary(&output, &records)?;
            } else {
                exchange::write_text(&output, &records)?;
            }
        }
    }
    Ok(())
}
