use proptest::prelude::*;

use tempscale_core::autodiff::logsumexp;
use tempscale_core::softmax::{
    ce_loss_tau, grad_feature, grad_negative_prototype, grad_positive_prototype, softmax_tau, Logits, Probabilities,
    Temperature,
};
use tempscale_core::tensor::argmax;
use tempscale_core::Tensor;

const TAUS: [f64; 5] = [0.1, 0.5, 1.0, 10.0, 100.0];

fn logits(max_len: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, 2..=max_len)
}

fn t(v: f64) -> Temperature {
    Temperature::new(v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn normalized_at_every_temperature(z in logits(20, 100.0), log_tau in (0.05f64).ln()..(1e9f64).ln()) {
        let p = softmax_tau(&Logits::new(z).unwrap(), t(log_tau.exp()));
        let sum: f64 = p.values().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {}", sum);
        prop_assert!(p.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn argmax_ignores_temperature(z in logits(12, 10.0)) {
        let x = Logits::new(z.clone()).unwrap();
        for tau in TAUS {
            prop_assert_eq!(softmax_tau(&x, t(tau)).argmax(), argmax(&z));
        }
    }

    #[test]
    fn higher_temperature_flattens(z in logits(12, 10.0)) {
        prop_assume!(z.iter().any(|&v| v != z[0]));
        let x = Logits::new(z).unwrap();
        let peaks: Vec<f64> = TAUS
            .iter()
            .map(|&tau| softmax_tau(&x, t(tau)).values().iter().copied().fold(0.0, f64::max))
            .collect();
        for w in peaks.windows(2) {
            prop_assert!(w[0] >= w[1], "{:?}", peaks);
        }
    }

    #[test]
    fn ce_is_scaled_logsumexp(z in logits(10, 20.0), pick in 0usize..10, tau_i in 0usize..5) {
        let y = pick % z.len();
        let tau = TAUS[tau_i];
        let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
        let expect = logsumexp(&scaled) - scaled[y];
        let got = ce_loss_tau(&Logits::new(z).unwrap(), y, t(tau)).unwrap();
        prop_assert!(got >= 0.0);
        prop_assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    /// With P held fixed, halving or doubling τ rescales every closed form
    /// by exactly the same power of two.
    #[test]
    fn closed_forms_scale_as_inverse_tau(
        raw in prop::collection::vec(0.01f64..1.0, 3..8),
        f in prop::collection::vec(-2.0f64..2.0, 4),
        k in -6i32..7,
    ) {
        let sum: f64 = raw.iter().sum();
        let p = Probabilities::new(raw.iter().map(|v| v / sum).collect()).unwrap();
        let m = p.len();
        let w = Tensor::new(vec![4, m], (0..4 * m).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let tau = 2f64.powi(k);
        let s = 1.0 / tau;
        let check = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).all(|(x, y)| *x == y * s);
        prop_assert!(check(
            grad_positive_prototype(&f, &p, 0, t(tau)).unwrap(),
            grad_positive_prototype(&f, &p, 0, Temperature::ONE).unwrap()
        ));
        prop_assert!(check(
            grad_negative_prototype(&f, &p, 0, 1, t(tau)).unwrap(),
            grad_negative_prototype(&f, &p, 0, 1, Temperature::ONE).unwrap()
        ));
        prop_assert!(check(
            grad_feature(&w, &p, 1, t(tau)).unwrap(),
            grad_feature(&w, &p, 1, Temperature::ONE).unwrap()
        ));
    }

    /// For arbitrary τ the 1/τ law holds to rounding.
    #[test]
    fn closed_forms_scale_as_inverse_tau_to_rounding(
        raw in prop::collection::vec(0.01f64..1.0, 3..8),
        f in prop::collection::vec(-2.0f64..2.0, 4),
        tau in 0.05f64..200.0,
    ) {
        let sum: f64 = raw.iter().sum();
        let p = Probabilities::new(raw.iter().map(|v| v / sum).collect()).unwrap();
        let a = grad_positive_prototype(&f, &p, 2, t(tau)).unwrap();
        let b = grad_positive_prototype(&f, &p, 2, Temperature::ONE).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x * tau - y).abs() <= 1e-14 * y.abs().max(1e-300));
        }
    }
}

#[test]
fn reference_values() {
    let p = softmax_tau(&Logits::new(vec![1.0, 0.0]).unwrap(), Temperature::ONE);
    assert!((p.values()[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
    let p = softmax_tau(&Logits::new(vec![1.0, 0.0]).unwrap(), t(0.1));
    assert!((p.values()[1] - 4.539_786_870_243_439e-5).abs() < 1e-18);
}
