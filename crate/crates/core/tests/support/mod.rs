//! Shared oracles for the integration tests: central finite differences
//! and direct-definition retrieval metrics.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use pimap::encoder::{Embedding, EncoderPair, TokenElement, TokenSequence};
use pimap::linalg::{gaussian_vec, normalized};
use pimap::objectives::{
    image_loss, persona_objective, symmetric_ce_loss, text_loss, Batch, BatchItem, Caption, ComparisonSpace, LossConfig,
};
use pimap::pimap::{Activation, PiMapParams};
use pimap::retrieval::QueryOutcome;
use pimap::seed::substream;
use pimap::world::{generate_world, ToyEncoder, WorldConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Central differences of `f` at `x`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with a floor for vanishing gradients.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    n(&diff) / n(a).max(n(b)).max(1e-8)
}

pub fn small_encoder(seed: u64) -> ToyEncoder<f64> {
    let cfg = WorldConfig {
        seed,
        d_joint: 16,
        d_tok: 12,
        n_categories: 2,
        n_instances_per_category: 2,
        n_population_per_category: 2,
        background_pool_size: 4,
        attribute_pool_per_category: 4,
        ..WorldConfig::default()
    };
    ToyEncoder::new(Arc::new(generate_world(&cfg).unwrap()))
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    normalized(&gaussian_vec(rng, d, 1.0))
}

/// Random batch of unit vectors with distinct caption texts.
pub fn random_batch(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Batch<f64> {
    let items = (0..n)
        .map(|i| BatchItem {
            image_raw: Embedding::joint(unit(rng, d)).unwrap(),
            image_localized: Embedding::joint(unit(rng, d)).unwrap(),
            specific: Caption {
                text: format!("s{i}"),
                embedding: Embedding::joint(unit(rng, d)).unwrap(),
            },
            generic: Caption {
                text: format!("g{i}"),
                embedding: Embedding::joint(unit(rng, d)).unwrap(),
            },
        })
        .collect();
    Batch { items }
}

fn random_cfg(rng: &mut ChaCha8Rng) -> LossConfig {
    LossConfig {
        include_positive_in_denominator: rng.random_bool(0.5),
        tau: rng.random_range(0.3..1.0),
        ..LossConfig::default()
    }
}

pub fn probe_image_loss(seed: u64) -> f64 {
    let mut rng = substream(seed, "probe/image-loss");
    let d = rng.random_range(3..12);
    let n = rng.random_range(2..6);
    let batch = random_batch(&mut rng, d, n);
    let cfg = random_cfg(&mut rng);
    let x = gaussian_vec(&mut rng, d, 1.0);
    let anchor = rng.random_range(0..n);
    let (_, g) = image_loss(&x, anchor, &batch, &cfg).unwrap();
    let fd = fd_gradient(|p| image_loss(p, anchor, &batch, &cfg).unwrap().0, &x, FD_STEP);
    rel_err(&g, &fd)
}

pub fn probe_text_loss(seed: u64, enc: &ToyEncoder<f64>) -> f64 {
    let mut rng = substream(seed, "probe/text-loss");
    let d = enc.descriptor().d_joint;
    let n = rng.random_range(2..6);
    let batch = random_batch(&mut rng, d, n);
    let cfg = random_cfg(&mut rng);
    let tok = gaussian_vec(&mut rng, enc.descriptor().d_tok, 1.0);
    let anchor = rng.random_range(0..n);
    let g = text_loss(&tok, anchor, &batch, &cfg, enc).unwrap().grad_token;
    let fd = fd_gradient(|p| text_loss(p, anchor, &batch, &cfg, enc).unwrap().loss, &tok, FD_STEP);
    rel_err(&g, &fd)
}

/// Total objective through the encoded-prompt comparison route.
pub fn probe_total_objective(seed: u64, enc: &ToyEncoder<f64>) -> f64 {
    let mut rng = substream(seed, "probe/total");
    let d = enc.descriptor().d_joint;
    let n = rng.random_range(2..5);
    let batch = random_batch(&mut rng, d, n);
    let cfg = LossConfig {
        comparison_space: ComparisonSpace::Encoded,
        alpha: rng.random_range(0.0..1.0),
        ..random_cfg(&mut rng)
    };
    let tok = gaussian_vec(&mut rng, enc.descriptor().d_tok, 1.0);
    let g = persona_objective(&tok, 0, &batch, &cfg, enc).unwrap().grad_token;
    let fd = fd_gradient(|p| persona_objective(p, 0, &batch, &cfg, enc).unwrap().total, &tok, FD_STEP);
    rel_err(&g, &fd)
}

pub fn probe_symmetric_ce(seed: u64) -> f64 {
    let mut rng = substream(seed, "probe/symmetric-ce");
    let d = rng.random_range(2..10);
    let n = rng.random_range(2..6);
    let tau = rng.random_range(0.3..1.0);
    let imgs: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
    let txts: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
    let out = symmetric_ce_loss(&imgs, &txts, tau).unwrap();
    let flat = |v: &[Vec<f64>]| v.concat();
    let analytic = [flat(&out.grad_images), flat(&out.grad_texts)].concat();
    let x = [flat(&imgs), flat(&txts)].concat();
    let fd = fd_gradient(
        |p| {
            let a: Vec<Vec<f64>> = p[..n * d].chunks(d).map(<[f64]>::to_vec).collect();
            let b: Vec<Vec<f64>> = p[n * d..].chunks(d).map(<[f64]>::to_vec).collect();
            symmetric_ce_loss(&a, &b, tau).unwrap().loss
        },
        &x,
        FD_STEP,
    );
    rel_err(&analytic, &fd)
}

/// Gradient of `w · π(x)` with respect to every parameter and the input.
pub fn probe_pi_forward(seed: u64) -> f64 {
    let mut rng = substream(seed, "probe/pi-forward");
    let d_joint = rng.random_range(2..7);
    let d_tok = rng.random_range(1..6);
    let hidden = if rng.random_bool(0.5) { d_joint } else { rng.random_range(2..7) };
    let act = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Silu };
    let mut params = PiMapParams::<f64>::init(d_joint, d_tok, hidden, act, &mut rng).unwrap();
    for (_, t) in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
    let x = gaussian_vec(&mut rng, d_joint, 1.0);
    let w = gaussian_vec(&mut rng, d_tok, 1.0);
    let objective = |p: &PiMapParams<f64>, x: &[f64]| p.forward(x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();

    let (_, cache) = params.forward_cached(&x).unwrap();
    let mut grads = params.zeros_like();
    let g_x = params.backward(&cache, &w, &mut grads);
    let mut analytic: Vec<f64> = grads.tensors().into_iter().flat_map(|(_, t)| t.to_vec()).collect();
    analytic.extend(&g_x);

    let flat: Vec<f64> = params.tensors().into_iter().flat_map(|(_, t)| t.to_vec()).collect();
    let n_params = flat.len();
    let mut point = flat.clone();
    point.extend(&x);
    let mut scratch = params.clone();
    let fd = fd_gradient(
        |p| {
            let mut off = 0;
            for (_, t) in scratch.tensors_mut() {
                let len = t.len();
                t.copy_from_slice(&p[off..off + len]);
                off += len;
            }
            objective(&scratch, &p[n_params..])
        },
        &point,
        FD_STEP,
    );
    rel_err(&analytic, &fd)
}

/// Gradient of `upstream · f_t(seq)` with respect to every injection.
pub fn probe_encode_text_grad(seed: u64, enc: &ToyEncoder<f64>) -> f64 {
    let mut rng = substream(seed, "probe/encode-text");
    let d_tok = enc.descriptor().d_tok;
    let vocab = enc.world().vocab.len() as u32;
    let len = rng.random_range(1..6);
    let mut elements = Vec::new();
    let mut injections = Vec::new();
    for k in 0..len {
        if k == 0 || rng.random_bool(0.4) {
            injections.push(elements.len());
            elements.push(TokenElement::Continuous(gaussian_vec(&mut rng, d_tok, 1.0)));
        } else {
            elements.push(TokenElement::Word(rng.random_range(0..vocab)));
        }
    }
    let up = gaussian_vec(&mut rng, enc.descriptor().d_joint, 1.0);
    let seq = TokenSequence::new(elements.clone());
    let analytic: Vec<f64> = enc.encode_text_grad(&seq, &up).unwrap().concat();
    let point: Vec<f64> = injections
        .iter()
        .flat_map(|&i| match &elements[i] {
            TokenElement::Continuous(v) => v.clone(),
            TokenElement::Word(_) => unreachable!(),
        })
        .collect();
    let fd = fd_gradient(
        |p| {
            let mut el = elements.clone();
            for (k, &i) in injections.iter().enumerate() {
                el[i] = TokenElement::Continuous(p[k * d_tok..(k + 1) * d_tok].to_vec());
            }
            let out = enc.encode_text(&TokenSequence::new(el)).unwrap();
            out.values().iter().zip(&up).map(|(a, b)| a * b).sum()
        },
        &point,
        FD_STEP,
    );
    rel_err(&analytic, &fd)
}

/// Metric values computed straight from the definitions, independent of
/// the library implementation.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleMetrics {
    pub map: f64,
    pub mrr: f64,
    pub recall: Vec<(usize, f64)>,
    pub tr5: f64,
    pub p5: f64,
}

pub fn oracle_metrics(outcomes: &[QueryOutcome], ks: &[usize]) -> OracleMetrics {
    let used: Vec<&QueryOutcome> = outcomes.iter().filter(|o| !o.positives.is_empty()).collect();
    let nq = used.len() as f64;
    let rank_of = |o: &QueryOutcome, id: &str| o.ranking.iter().position(|r| r == id).map(|p| p + 1);
    let mut map = 0.0;
    let mut mrr = 0.0;
    let mut top5 = 0.0;
    let mut all = 0.0;
    for o in &used {
        // AP: for every positive at rank r, the number of positives at
        // ranks ≤ r divided by r; missing positives add nothing.
        let ranks: Vec<usize> = o.positives.iter().filter_map(|p| rank_of(o, p)).collect();
        let ap: f64 = ranks
            .iter()
            .map(|&r| ranks.iter().filter(|&&s| s <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / o.positives.len() as f64;
        map += ap;
        mrr += ranks.iter().min().map_or(0.0, |&r| 1.0 / r as f64);
        top5 += ranks.iter().filter(|&&r| r <= 5).count() as f64;
        all += o.positives.len() as f64;
    }
    let recall = ks
        .iter()
        .map(|&k| {
            let hit = used
                .iter()
                .filter(|o| o.positives.iter().any(|p| rank_of(o, p).is_some_and(|r| r <= k)))
                .count();
            (k, hit as f64 / nq)
        })
        .collect();
    OracleMetrics {
        map: map / nq,
        mrr: mrr / nq,
        recall,
        tr5: top5 / all,
        p5: top5 / (5.0 * nq),
    }
}

/// Random retrieval instance: up to `max_q` queries over up to `max_items`
/// items, each with a random subset of positives and a random ranking.
pub fn random_outcomes(rng: &mut ChaCha8Rng, max_q: usize, max_items: usize) -> Vec<QueryOutcome> {
    let n_items = rng.random_range(1..=max_items);
    let n_q = rng.random_range(1..=max_q);
    (0..n_q)
        .map(|q| {
            let mut ranking: Vec<String> = (0..n_items).map(|i| format!("m{i:02}")).collect();
            rand::seq::SliceRandom::shuffle(&mut ranking[..], rng);
            let positives: BTreeSet<String> = (0..n_items).filter(|_| rng.random_bool(0.25)).map(|i| format!("m{i:02}")).collect();
            QueryOutcome {
                query_id: format!("q{q}"),
                ranking,
                positives,
            }
        })
        .collect()
}

/// Small world, benchmark and training budget for fast end-to-end tests.
pub fn tiny_setup(seed: u64) -> (WorldConfig, pimap::world::BenchmarkSpec, pimap::harness::ProtocolConfig) {
    let world = WorldConfig {
        seed,
        d_joint: 16,
        d_tok: 12,
        n_categories: 2,
        n_instances_per_category: 2,
        n_population_per_category: 4,
        background_pool_size: 8,
        attribute_pool_per_category: 4,
        ..WorldConfig::default()
    };
    let spec = pimap::world::BenchmarkSpec {
        seed,
        n_instances: 4,
        gallery_items: 16,
        templates_per_instance: 3,
        context_queries_per_instance: 2,
        ..Default::default()
    };
    let mut cfg = pimap::harness::ProtocolConfig {
        seed,
        pretrain_samples: 64,
        ..Default::default()
    };
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 16;
    cfg.personalize.epochs = 3;
    cfg.personalize.warmup_steps = 5;
    (world, spec, cfg)
}

/// Golden files live with the core crate; also included from other crates.
pub fn golden_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

/// Compares `actual` with the golden file, or rewrites the file when
/// `PIMAP_BLESS` is set.
pub fn check_golden(name: &str, actual: &str) {
    let path = golden_dir().join(name);
    if std::env::var_os("PIMAP_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}; run with PIMAP_BLESS=1 to create it", path.display()));
    assert_eq!(actual, want, "output differs from {}", path.display());
}

/// Reference benchmark: seed 1234, 12 instances over 4 categories, 200
/// gallery items, every arm.
pub fn reference_run() -> pimap::harness::SyntheticRun {
    use pimap::harness::{Arm, ProtocolConfig};
    let cfg = ProtocolConfig {
        arms: vec![
            Arm::Personalized,
            Arm::GenericText,
            Arm::SpecificText,
            Arm::ImageOnly,
            Arm::ImageAsQuery,
        ],
        ..ProtocolConfig::default()
    };
    pimap::harness::run_synthetic(&WorldConfig::default(), &pimap::world::BenchmarkSpec::default(), &cfg).unwrap()
}

/// Pretraining on the synthetic generic set with seed 7.
pub fn pretrain_seed7() -> pimap::trainer::PretrainReport {
    let world = generate_world(&WorldConfig {
        seed: 7,
        ..WorldConfig::default()
    })
    .unwrap();
    let enc = ToyEncoder::new(Arc::new(world.clone()));
    let cfg = pimap::harness::ProtocolConfig {
        seed: 7,
        ..Default::default()
    };
    pimap::harness::protocol::pretrain_synthetic(&enc, &world, &cfg).unwrap().1
}

pub fn pretrain_golden_text(r: &pimap::trainer::PretrainReport) -> String {
    let mut s = format!("steps = {}\n", r.steps);
    for (i, l) in r.epoch_mean_losses.iter().enumerate() {
        s.push_str(&format!("epoch {i} mean loss = {l:?}\n"));
    }
    s
}
