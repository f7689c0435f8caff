mod support;

use std::time::{Duration, Instant};

use pimap::harness::manifest::QuerySetting;
use pimap::harness::{ablation_variants, run_study, template_sweep_variants, Arm, ProtocolConfig, Variant, STUDY_SEEDS};
use pimap::world::{BenchmarkSpec, WorldConfig};

#[test]
fn reference_benchmark_beats_generic_text_and_matches_golden() {
    let t = Instant::now();
    let run = support::reference_run();
    let elapsed = t.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    let ks = ProtocolConfig::default().ks;
    support::check_golden("reference_report.txt", &run.report.to_text(&ks));
    support::check_golden(
        "reference_report.json",
        &(serde_json::to_string_pretty(&run.report).unwrap() + "\n"),
    );

    let personalized = run.report.metrics(Arm::Personalized, QuerySetting::Context).unwrap().mrr;
    let generic = run.report.metrics(Arm::GenericText, QuerySetting::Context).unwrap().mrr;
    assert!(personalized - generic > 0.10, "personalized {personalized} vs generic {generic}");
    for p in &run.personalized {
        let first = p.log.records.first().unwrap().total;
        let last = p.log.records.last().unwrap().total;
        assert!(last < first, "{}: {first} -> {last}", p.token.instance_id);
    }
}

#[test]
fn pretraining_halves_the_loss_and_matches_golden() {
    let r = support::pretrain_seed7();
    assert_eq!(r.epoch_mean_losses.len(), 10);
    let (first, last) = (r.epoch_mean_losses[0], r.epoch_mean_losses[9]);
    assert!(last < 0.5 * first, "{first} -> {last}");
    support::check_golden("pretrain_seed7.txt", &support::pretrain_golden_text(&r));
}

#[test]
fn ablations_and_template_sweep_go_the_expected_way() {
    let mut variants = ablation_variants();
    variants.extend(template_sweep_variants(&[1, 3]));
    let study = run_study(
        &STUDY_SEEDS,
        &variants,
        &WorldConfig::default(),
        &BenchmarkSpec::default(),
        &ProtocolConfig::default(),
    )
    .unwrap();
    let full = study.row(&Variant::FULL).unwrap().mean_tr5();
    for v in &ablation_variants()[1..] {
        let ablated = study.row(v).unwrap().mean_tr5();
        assert!(ablated < full, "{}: {ablated} vs full {full}", v.name());
    }
    let tr5 = |localize, n| {
        study
            .row(&Variant {
                localize,
                templates: Some(n),
                ..Variant::FULL
            })
            .unwrap()
            .mean_tr5()
    };
    assert!(tr5(true, 1) >= tr5(false, 3), "{} vs {}", tr5(true, 1), tr5(false, 3));
}
