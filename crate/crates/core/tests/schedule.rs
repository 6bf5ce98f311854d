use ddad_core::schedule::{perturb, ScheduleConfig, VarianceSchedule};
use ddad_core::ImageTensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn schedule_params() -> impl Strategy<Value = (usize, f64, f64)> {
    (1usize..1500, 1e-5f64..0.05, 1e-4f64..0.5).prop_filter_map("start < end", |(t, a, d)| {
        let end = a + d;
        (end < 1.0).then_some((t.max(2), a, end))
    })
}

proptest! {
    #[test]
    fn schedule_invariants((t, start, end) in schedule_params()) {
        let s = VarianceSchedule::linear(t, start, end).unwrap();
        let b = s.betas();
        prop_assert_eq!(b.len(), t);
        prop_assert!(b.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(b.iter().all(|&x| x > 0.0 && x < 1.0));
        prop_assert!((b[0] - start).abs() < 1e-15 && (b[t - 1] - end).abs() < 1e-15);

        let ab = s.alpha_bars();
        prop_assert!(ab.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(ab.iter().all(|&x| x > 0.0 && x < 1.0));
        // independent running product
        let mut prod = 1.0f64;
        for (i, &beta) in b.iter().enumerate() {
            prod *= 1.0 - beta;
            prop_assert!(((ab[i] - prod) / prod).abs() <= 1e-12, "t={} {} vs {}", i + 1, ab[i], prod);
        }
    }

    #[test]
    fn bounds_are_validated(start in 0.0f64..1.0, end in 0.0f64..1.0, t in 0usize..4) {
        let ok = VarianceSchedule::linear(t, start, end).is_ok();
        let valid = t >= 1 && 0.0 < start && start < end && end < 1.0;
        prop_assert_eq!(ok, valid);
    }

    /// Iterating single-step noising with per-step noises and folding the
    /// noise into one draw reproduces the closed form.
    #[test]
    fn closed_form_matches_sequential_noising(seed in any::<u64>(), t in 1usize..=1000) {
        let s = VarianceSchedule::new(ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * 4 * 4;
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut xt = x.clone();
        let mut acc = vec![0.0f64; n];
        for &beta in &s.betas()[..t] {
            for k in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                xt[k] = (1.0 - beta).sqrt() * xt[k] + beta.sqrt() * z;
                acc[k] = (1.0 - beta).sqrt() * acc[k] + beta.sqrt() * z;
            }
        }
        let ab = s.alpha_bar(t).unwrap();
        let eps: Vec<f32> = acc.iter().map(|a| (a / (1.0 - ab).sqrt()) as f32).collect();
        let xi = ImageTensor::from_vec(3, 4, 4, x.iter().map(|&v| v as f32).collect()).unwrap();
        let ei = ImageTensor::from_vec(3, 4, 4, eps).unwrap();
        let out = perturb(&xi, t, &ei, &s).unwrap();
        for (o, want) in out.as_slice().iter().zip(&xt) {
            prop_assert!((*o as f64 - want).abs() < 1e-6, "{} vs {}", o, want);
        }
    }

    #[test]
    fn perturb_is_deterministic(seed in any::<u64>(), t in 1usize..=1000) {
        let s = VarianceSchedule::new(ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ImageTensor::randn(3, 8, 8, &mut rng);
        let e = ImageTensor::randn(3, 8, 8, &mut rng);
        let a = perturb(&x, t, &e, &s).unwrap();
        let b = perturb(&x, t, &e, &s).unwrap();
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }
}

/// Least squares of `perturb(x, t, eps)` on `(x, eps)` recovers the signal
/// and noise coefficients. Images are stored in f32, so the target is the
/// coefficient pair as rounded to f32.
#[test]
fn regression_recovers_coefficients() {
    let s = VarianceSchedule::new(ScheduleConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in [1, 10, 250, 500, 999, 1000] {
        let x = ImageTensor::randn(3, 64, 64, &mut rng);
        let e = ImageTensor::randn(3, 64, 64, &mut rng);
        let out = perturb(&x, t, &e, &s).unwrap();
        let (mut sxx, mut sxe, mut see, mut sxy, mut sey) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ((&a, &b), &y) in x.as_slice().iter().zip(e.as_slice()).zip(out.as_slice()) {
            let (a, b, y) = (a as f64, b as f64, y as f64);
            sxx += a * a;
            sxe += a * b;
            see += b * b;
            sxy += a * y;
            sey += b * y;
        }
        let det = sxx * see - sxe * sxe;
        let ca = (sxy * see - sey * sxe) / det;
        let cb = (sey * sxx - sxy * sxe) / det;
        let ab = s.alpha_bar(t).unwrap();
        let (fa, fb) = (ab.sqrt() as f32 as f64, (1.0 - ab).sqrt() as f32 as f64);
        assert!((ca - fa).abs() < 1e-8, "t={t}: signal {ca} vs {fa}");
        assert!((cb - fb).abs() < 1e-8, "t={t}: noise {cb} vs {fb}");
        assert!((ca - ab.sqrt()).abs() < 1e-7 && (cb - (1.0 - ab).sqrt()).abs() < 1e-7);
    }
}

#[test]
fn config_roundtrips_through_json() {
    let c = ScheduleConfig::default();
    let j = serde_json::to_value(c).unwrap();
    assert_eq!(j["T"], 1000);
    assert_eq!(j["kind"], "linear");
    let back: ScheduleConfig = serde_json::from_value(j).unwrap();
    assert_eq!(back, c);
}
