use c3de::eval::{metrics, MAPE_MASK};
use c3de::model::huber_loss;
use c3de::numcore::Tensor;
use proptest::prelude::*;

fn pair(max: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..max).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n),
            prop::collection::vec(-100.0f64..100.0, n),
        )
            .prop_map(move |(a, f)| {
                (
                    Tensor::new(&[1, n, 1], a).unwrap(),
                    Tensor::new(&[1, n, 1], f).unwrap(),
                )
            })
    })
}

fn single(r: f64, delta: f64) -> f64 {
    huber_loss(&Tensor::scalar(0.0), &Tensor::scalar(r), delta).unwrap()
}

proptest! {
    #[test]
    fn huber_is_bounded_by_half_mse_and_delta_mae(r in -10.0f64..10.0, delta in 0.1f64..5.0) {
        let h = single(r, delta);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= 0.5 * r * r + 1e-12);
        prop_assert!(h <= delta * r.abs() + 1e-12);
    }

    #[test]
    fn huber_is_c1_at_the_threshold(delta in 0.1f64..5.0) {
        let eps = 1e-7;
        let (below, above) = (single(delta - eps, delta), single(delta + eps, delta));
        prop_assert!((single(delta, delta) - 0.5 * delta * delta).abs() <= 1e-12);
        // one-sided slopes both approach δ
        let left = (single(delta, delta) - below) / eps;
        let right = (above - single(delta, delta)) / eps;
        prop_assert!((left - delta).abs() < 1e-5 && (right - delta).abs() < 1e-5);
    }

    #[test]
    fn mae_at_most_rmse((a, f) in pair(50)) {
        let m = metrics(&a, &f, &[1]).unwrap();
        prop_assert!(m.mae <= m.rmse * (1.0 + 1e-12));
    }

    #[test]
    fn mae_and_rmse_are_symmetric((a, f) in pair(30)) {
        let (x, y) = (metrics(&a, &f, &[1]).unwrap(), metrics(&f, &a, &[1]).unwrap());
        prop_assert_eq!(x.mae, y.mae);
        prop_assert_eq!(x.rmse, y.rmse);
    }

    #[test]
    fn mae_and_rmse_scale_with_units((a, f) in pair(30), c in 0.01f64..100.0) {
        let m = metrics(&a, &f, &[1]).unwrap();
        let s = metrics(&a.map(|v| v * c), &f.map(|v| v * c), &[1]).unwrap();
        prop_assert!((s.mae - c * m.mae).abs() <= 1e-9 * (c * m.mae).max(1.0));
        prop_assert!((s.rmse - c * m.rmse).abs() <= 1e-9 * (c * m.rmse).max(1.0));
    }

    #[test]
    fn mape_ignores_scale_and_counts_masked((a, f) in pair(30), c in 0.5f64..100.0) {
        let m = metrics(&a, &f, &[1]).unwrap();
        let s = metrics(&a.map(|v| v * c), &f.map(|v| v * c), &[1]).unwrap();
        let masked = a.data().iter().filter(|v| v.abs() < MAPE_MASK).count();
        prop_assert_eq!(m.mape_masked, masked);
        // scaling can move an element across the mask threshold
        if let (Some(x), Some(y), true) = (m.mape, s.mape, m.mape_masked == s.mape_masked) {
            prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0));
        }
    }
}
