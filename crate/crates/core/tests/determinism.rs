mod support;

use std::sync::Arc;

use pimap::encoder::{EncoderPair, MediaDescriptor};
use pimap::harness::{protocol::build_index, run_synthetic};
use pimap::pimap::params_to_bytes as to_bytes;
use pimap::trainer::{pretrain, TrainConfig};
use pimap::world::{emit_benchmark, generate_world, ToyEncoder};

fn probe_bits(enc: &ToyEncoder<f64>, media: &[MediaDescriptor]) -> Vec<u64> {
    let mut bits = Vec::new();
    for m in media {
        bits.extend(enc.encode_image(m).unwrap().values().iter().map(|v| v.to_bits()));
    }
    for text in ["a photo of a dog", "my red mug in the kitchen", "zebra unknown words"] {
        bits.extend(enc.encode_plain_text(text).unwrap().values().iter().map(|v| v.to_bits()));
    }
    bits
}

#[test]
fn encoder_outputs_are_unchanged_by_training() {
    let (world_cfg, spec, cfg) = support::tiny_setup(21);
    let world = Arc::new(generate_world(&world_cfg).unwrap());
    let enc = ToyEncoder::new(world.clone());
    let (_, gallery, _) = emit_benchmark(&world, &spec).unwrap();
    let media: Vec<MediaDescriptor> = gallery.items.iter().take(6).map(|i| i.media.clone()).collect();
    let before = probe_bits(&enc, &media);
    let (train, gallery, eval) = emit_benchmark(&world, &spec).unwrap();
    let (pre, _) = pimap::harness::protocol::pretrain_synthetic(&enc, &world, &cfg).unwrap();
    pimap::harness::run_with_pretrained(&enc, &world, &cfg, &pre, &train, &gallery, &eval).unwrap();
    assert_eq!(before, probe_bits(&enc, &media));
}

#[test]
fn same_seed_same_tokens_index_and_report() {
    let (world, spec, cfg) = support::tiny_setup(5);
    let a = run_synthetic(&world, &spec, &cfg).unwrap();
    let b = run_synthetic(&world, &spec, &cfg).unwrap();
    assert_eq!(a.report.to_text(&cfg.ks), b.report.to_text(&cfg.ks));
    assert_eq!(a.report, b.report);
    assert_eq!(to_bytes(&a.pretrained), to_bytes(&b.pretrained));
    for (x, y) in a.personalized.iter().zip(&b.personalized) {
        assert_eq!(x.token.to_bytes(), y.token.to_bytes());
    }
    let (_, gallery, _) = emit_benchmark(&a.world, &spec).unwrap();
    let ia = build_index(&a.encoder, &gallery).unwrap();
    let ib = build_index(&b.encoder, &gallery).unwrap();
    assert_eq!(ia.to_bytes(), ib.to_bytes());
}

#[test]
fn different_seed_changes_tokens() {
    let (world, spec, cfg) = support::tiny_setup(5);
    let a = run_synthetic(&world, &spec, &cfg).unwrap();
    let cfg2 = pimap::harness::ProtocolConfig { seed: 6, ..cfg };
    let b = run_synthetic(&world, &spec, &cfg2).unwrap();
    assert_ne!(a.personalized[0].token.values, b.personalized[0].token.values);
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let (world_cfg, _, cfg) = support::tiny_setup(9);
    let world = Arc::new(generate_world(&world_cfg).unwrap());
    let enc = ToyEncoder::new(world);
    let params = pimap::harness::protocol::init_params::<f64, _>(&enc, &cfg).unwrap();
    let mut trained = params.clone();
    let images: Vec<_> = (0..4)
        .map(|k| {
            pimap::encoder::Embedding::joint(pimap::linalg::normalized(&[
                1.0, k as f64, 0.5, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ]))
            .unwrap()
        })
        .collect();
    let zero = TrainConfig {
        epochs: 0,
        ..TrainConfig::pretrain()
    };
    pretrain(&enc, &mut trained, &images, &zero).unwrap();
    assert_eq!(to_bytes(&params), to_bytes(&trained));
}

#[test]
fn pretraining_is_bit_reproducible() {
    let (world_cfg, _, cfg) = support::tiny_setup(10);
    let world = Arc::new(generate_world(&world_cfg).unwrap());
    let enc = ToyEncoder::new(world.clone());
    let a = pimap::harness::protocol::pretrain_synthetic(&enc, &world, &cfg).unwrap();
    let b = pimap::harness::protocol::pretrain_synthetic(&enc, &world, &cfg).unwrap();
    assert_eq!(to_bytes(&a.0), to_bytes(&b.0));
    assert_eq!(a.1, b.1);
}

#[test]
fn template_order_does_not_change_the_token() {
    let (world_cfg, spec, cfg) = support::tiny_setup(12);
    let world = Arc::new(generate_world(&world_cfg).unwrap());
    let enc = ToyEncoder::new(world.clone());
    let (train, gallery, eval) = emit_benchmark(&world, &spec).unwrap();
    let mut shuffled = train.clone();
    for inst in &mut shuffled.instances {
        inst.templates.reverse();
    }
    let (pre, _) = pimap::harness::protocol::pretrain_synthetic(&enc, &world, &cfg).unwrap();
    let (_, a) = pimap::harness::run_with_pretrained(&enc, &world, &cfg, &pre, &train, &gallery, &eval).unwrap();
    let (_, b) = pimap::harness::run_with_pretrained(&enc, &world, &cfg, &pre, &shuffled, &gallery, &eval).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.token.to_bytes(), y.token.to_bytes());
    }
}

#[test]
fn plug_and_play_dimensions() {
    for (d_joint, d_tok) in [(16, 16), (64, 48), (512, 512)] {
        let (mut world, spec, mut cfg) = support::tiny_setup(31);
        world.d_joint = d_joint;
        world.d_tok = d_tok;
        cfg.pretrain.epochs = 1;
        cfg.personalize.epochs = 1;
        let run = run_synthetic(&world, &spec, &cfg).unwrap();
        for p in &run.personalized {
            assert_eq!(p.token.values.len(), d_tok);
            assert!(p.token.values.iter().all(|v| v.is_finite()));
        }
        assert_eq!(run.report.index_size, spec.gallery_items);
    }
}
