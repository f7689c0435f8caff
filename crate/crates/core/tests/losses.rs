mod support;

use pimap::harness::run_synthetic;
use pimap::objectives::{similarity_d, total_loss, Kernel};
use pimap::seed::substream;
use pimap::trainer::TrainingLog;
use proptest::prelude::*;

#[test]
fn logged_total_is_the_weighted_sum_at_every_step() {
    let (world, spec, cfg) = support::tiny_setup(3);
    let alpha = cfg.personalize.loss.alpha;
    let run = run_synthetic(&world, &spec, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for p in &run.personalized {
        assert!(!p.log.records.is_empty());
        let path = dir.path().join(format!("{}.jsonl", p.token.instance_id));
        p.log.append_to(&path).unwrap();
        let back = TrainingLog::read(&path).unwrap();
        assert_eq!(back, p.log);
        for r in &back.records {
            assert_eq!(r.total, (1.0 - alpha) * r.text + alpha * r.image, "step {}", r.step);
            assert_eq!(r.total, total_loss(r.text, r.image, alpha));
        }
    }
}

#[test]
fn self_similarity_is_exp_inverse_tau() {
    let want = (1.0f64 / 0.07).exp();
    let mut rng = substream(1, "self-similarity");
    for _ in 0..100 {
        let a = pimap::linalg::gaussian_vec(&mut rng, 32, 3.0);
        let got = similarity_d(&a, &a, 0.07, Kernel::Temperature).unwrap();
        assert!(((got - want) / want).abs() <= 1e-9, "{got} vs {want}");
    }
}

proptest! {
    #[test]
    fn kernel_is_symmetric(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        for kernel in [Kernel::Temperature, Kernel::Literal] {
            prop_assert_eq!(similarity_d(&a, &b, 0.07, kernel).unwrap(), similarity_d(&b, &a, 0.07, kernel).unwrap());
        }
    }

    #[test]
    fn kernel_ignores_positive_scale(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        c in 1e-3f64..1e3,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
        for kernel in [Kernel::Temperature, Kernel::Literal] {
            let x = similarity_d(&a, &b, 0.07, kernel).unwrap();
            let y = similarity_d(&scaled, &b, 0.07, kernel).unwrap();
            // exp(cos/τ) amplifies an ulp of cos by 1/τ.
            prop_assert!(((x - y) / x).abs() <= 64.0 * f64::EPSILON / 0.07, "{} vs {}", x, y);
        }
    }
}
