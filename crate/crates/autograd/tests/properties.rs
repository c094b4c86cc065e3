use ebmdmo_autograd::{Tape, Tensor};
use proptest::prelude::*;

fn grid() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..6, 2usize..6).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(-5.0f64..5.0, h * w)))
}

fn sample(h: usize, w: usize, f: &[f64], pts: &[f64]) -> Vec<f64> {
    let mut t = Tape::new();
    let fv = t.constant(Tensor::from_vec(&[1, h, w], f.to_vec()));
    let p = t.constant(Tensor::from_vec(&[pts.len() / 2, 2], pts.to_vec()));
    let s = t.bilinear_sample(fv, p);
    t.value(s).data().to_vec()
}

proptest! {
    #[test]
    fn bilinear_is_exact_on_pixel_centres((h, w, f) in grid(), r in 0usize..6, c in 0usize..6) {
        let (r, c) = (r % h, c % w);
        let got = sample(h, w, &f, &[c as f64, r as f64]);
        prop_assert_eq!(got[0], f[r * w + c]);
    }

    #[test]
    fn bilinear_stays_within_the_grid_range((h, w, f) in grid(), u in -3.0f64..9.0, v in -3.0f64..9.0) {
        let got = sample(h, w, &f, &[u, v])[0];
        let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
    }

    #[test]
    fn bilinear_is_linear_in_the_map((h, w, f) in grid(), a in -2.0f64..2.0, u in 0.0f64..5.0, v in 0.0f64..5.0) {
        let scaled: Vec<f64> = f.iter().map(|x| a * x + 1.0).collect();
        let base = sample(h, w, &f, &[u, v])[0];
        let got = sample(h, w, &scaled, &[u, v])[0];
        prop_assert!((got - (a * base + 1.0)).abs() < 1e-9);
    }
}
