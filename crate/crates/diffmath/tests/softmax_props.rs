use diffmath::{loss_mse, softmax, Tensor};
use proptest::prelude::*;

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn softmax_is_a_distribution_preserving_argmax(
        values in prop::collection::vec(-50.0f64..50.0, 1..32),
        temperature in 0.01f64..10.0,
    ) {
        let p = softmax(&values, temperature).unwrap();
        prop_assert_eq!(p.len(), values.len());
        // Strict positivity holds whenever no logit gap underflows exp().
        let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        if spread / temperature < 700.0 {
            prop_assert!(p.iter().all(|x| *x > 0.0));
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let top = argmax(&values);
        prop_assert!(p.iter().all(|x| *x <= p[top]));
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(p[i] <= p[j]);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn mse_is_nonnegative_and_zero_only_on_equality(
        a in prop::collection::vec(-10.0f64..10.0, 1..16),
        shift in prop::collection::vec(-1.0f64..1.0, 16),
    ) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let ta = Tensor::vector(a.clone()).unwrap();
        let tb = Tensor::vector(b.clone()).unwrap();
        let l = loss_mse(&ta, &tb).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, a == b);
        prop_assert_eq!(loss_mse(&ta, &ta).unwrap(), 0.0);
    }
}
