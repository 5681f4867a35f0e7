use proptest::prelude::*;

use tempscale_core::attack::{
    attack_dataset, dlr_loss, input_grad_decomposition, input_gradient, pgd, robust_accuracy, AttackConfig, LossKind,
    Target,
};
use tempscale_core::data::{gen_blobs_split, BlobSpec};
use tempscale_core::model::{EncoderSpec, Model};
use tempscale_core::softmax::Logits;
use tempscale_core::Exec;

fn model() -> Model {
    Model::init(EncoderSpec::default_mlp(6), 4, 21).unwrap()
}

fn any_loss() -> impl Strategy<Value = LossKind> {
    prop_oneof![Just(LossKind::Ce), Just(LossKind::CwMargin), Just(LossKind::Dlr)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adversarial_inputs_respect_the_box(
        x in prop::collection::vec(0.0f64..=1.0, 6),
        y in 0usize..4,
        eps in 0.0f64..0.5,
        loss in any_loss(),
        start in any::<bool>(),
        s in any::<u64>(),
    ) {
        let mut cfg = AttackConfig::pgd20(eps, s);
        cfg.loss = loss;
        cfg.random_start = start;
        cfg.step_size = eps.max(1e-3) / 3.0;
        let adv = pgd(&model(), &x, y, &cfg).unwrap();
        for (a, c) in adv.iter().zip(&x) {
            prop_assert!((0.0..=1.0).contains(a));
            prop_assert!((a - c).abs() <= eps);
        }
    }

    #[test]
    fn dlr_invariances(
        z in prop::collection::vec(-50.0f64..50.0, 3..10),
        y in 0usize..10,
        shift in -1e3f64..1e3,
        scale in 1e-3f64..1e3,
    ) {
        let y = y % z.len();
        let mut sorted = z.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(sorted[0] - sorted[2] > 1e-3);
        let base = dlr_loss(&Logits::new(z.clone()).unwrap(), y).unwrap();
        let shifted = dlr_loss(&Logits::new(z.iter().map(|v| v + shift).collect()).unwrap(), y).unwrap();
        let scaled = dlr_loss(&Logits::new(z.iter().map(|v| v * scale).collect()).unwrap(), y).unwrap();
        prop_assert!((base - shifted).abs() <= 1e-9 * (1.0 + shift.abs() / (sorted[0] - sorted[2])));
        prop_assert!((base - scaled).abs() <= 1e-12 * base.abs().max(1.0));
    }
}

#[test]
fn zero_radius_is_identity() {
    let m = model();
    let x = vec![0.1, 0.5, 0.9, 0.0, 1.0, 0.33];
    for loss in [LossKind::Ce, LossKind::CwMargin, LossKind::Dlr] {
        for target in [Target::Untargeted, Target::Class(2), Target::ErrorProne] {
            let mut cfg = AttackConfig::pgd20(0.0, 3).targeted(target);
            cfg.loss = loss;
            cfg.step_size = 0.1;
            let adv = pgd(&m, &x, 1, &cfg).unwrap();
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&adv), bits(&x));
        }
    }
}

#[test]
fn dataset_attacks_are_deterministic_across_modes() {
    let (_, test) = gen_blobs_split(&BlobSpec {
        classes: 4,
        shape: vec![6],
        per_class: 10,
        test_per_class: 60,
        separation: 0.5,
        noise: 0.1,
        seed: 1,
    })
    .unwrap();
    let cfg = AttackConfig::pgd20(0.05, 8);
    let a = attack_dataset(&model(), &test, &cfg, Exec::Sequential).unwrap();
    let b = attack_dataset(&model(), &test, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    let r = robust_accuracy(&model(), &test, &cfg, Exec::Parallel).unwrap();
    assert!(r.robust_accuracy <= r.clean_accuracy);
    assert_eq!(r.outcomes.len(), test.len());
    let t = robust_accuracy(&model(), &test, &cfg.clone().targeted(Target::Class(0)), Exec::Parallel).unwrap();
    assert!(t.outcomes.iter().filter(|o| o.label != 0).all(|o| o.target == Some(0)));
}

#[test]
fn decomposition_sums_to_the_input_gradient() {
    for s in 0..20u64 {
        let m = Model::init(EncoderSpec::default_mlp(6), 5, s).unwrap();
        let x: Vec<f64> = (0..6).map(|i| ((i as u64 + s) as f64 * 0.71).sin().abs()).collect();
        let y = (s % 5) as usize;
        let d = input_grad_decomposition(&m, &x, y).unwrap();
        let g = input_gradient(&m, &x, y, LossKind::Ce).unwrap();
        for (a, b) in d.total.iter().zip(g.data()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
        let sum: f64 = d.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(d.contributions.len(), 5);
    }
}

#[test]
fn bad_configs_are_rejected() {
    let m = model();
    let x = vec![0.5; 6];
    assert!(pgd(&m, &x, 9, &AttackConfig::pgd20(0.1, 0)).is_err());
    assert!(pgd(&m, &x, 0, &AttackConfig::pgd20(-0.1, 0)).is_err());
    assert!(pgd(&m, &x, 0, &AttackConfig::pgd20(0.1, 0).targeted(Target::Class(4))).is_err());
}
