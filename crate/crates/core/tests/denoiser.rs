use ddad_core::denoiser::*;
use ddad_core::nn::Optimizer;
use ddad_core::schedule::{perturb, ScheduleConfig, VarianceSchedule};
use ddad_core::synth::{synth_dataset, SynthSpec};
use ddad_core::{DdadError, ImageTensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schedule() -> VarianceSchedule {
    VarianceSchedule::new(ScheduleConfig::default()).unwrap()
}

fn randn(seed: u64, n: usize, size: usize) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| ImageTensor::randn(3, size, size, &mut rng)).collect()
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let configs = [UNetConfig::tiny(), UNetConfig { patch_size: 2, ..UNetConfig::tiny() }];
    for cfg in configs {
        let mut m = UNetDenoiser::<f64>::new(cfg.clone(), ScheduleConfig::default(), 3).unwrap();
        if cfg.patch_size == 1 {
            assert!(m.num_parameters() <= 1000, "{}", m.num_parameters());
        }
        // zero-initialised output layers would hide most gradients
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ids: Vec<_> = m.params().ids().collect();
        for &id in &ids {
            for v in &mut m.params_mut().get_mut(id).data {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = randn(5, 2, 8);
        let eps = randn(6, 2, 8);
        let t = [17, 640];
        let (_, g) = m.loss_and_gradients(&x, &t, &eps).unwrap();
        let analytic = g.flatten(m.params());
        for _ in 0..10 {
            let mut k = rng.random_range(0..analytic.len());
            let want = analytic[k];
            let (mut id, mut off) = (ids[0], 0);
            for &i in &ids {
                let n = m.params().get(i).len();
                if k < n {
                    (id, off) = (i, k);
                    break;
                }
                k -= n;
            }
            let h = 1e-5;
            let eval = |d: f64| {
                let mut p = m.cast::<f64>();
                p.params_mut().get_mut(id).data[off] += d;
                p.loss_and_gradients(&x, &t, &eps).unwrap().0
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = want.abs().max(num.abs()).max(1e-6);
            assert!((want - num).abs() / denom <= 1e-4, "{cfg:?} {}[{off}]: {want} vs {num}", m.params().name(id));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn oracle_objective_is_zero(seed in any::<u64>(), t in 1usize..=1000) {
        let s = schedule();
        let x = randn(seed, 3, 6);
        let eps = randn(seed ^ 1, 3, 6);
        let mut o = OracleDenoiser::from_noise(1000, eps.clone());
        let xt: Vec<ImageTensor> = x.iter().zip(&eps).map(|(a, e)| perturb(a, t, e, &s).unwrap()).collect();
        prop_assert_eq!(denoising_objective(&o, &xt, &vec![t; 3], &eps).unwrap(), 0.0);
        let mut opt = Optimizer::adam(1e-3, 0.0);
        prop_assert_eq!(o.fit_batch(&xt, &vec![t; 3], &eps, &mut opt).unwrap(), 0.0);
    }
}

#[test]
fn zero_predictor_on_unit_noise_has_unit_loss() {
    let z = ZeroDenoiser { timesteps: 1000 };
    let ones = vec![ImageTensor::filled(3, 4, 4, 1.0); 2];
    let xt = randn(1, 2, 4);
    assert_eq!(denoising_objective(&z, &xt, &[3, 900], &ones).unwrap(), 1.0);
}

#[test]
fn fresh_model_output_is_finite_and_shaped() {
    let m = DenoiserModel::new(UNetConfig::desk(), ScheduleConfig::default(), 0).unwrap();
    let x = randn(2, 1, 32).remove(0);
    for t in [1, 500, 1000] {
        let e = m.predict_noise(&x, t).unwrap();
        assert_eq!(e.shape(), x.shape());
        assert!(e.all_finite());
        assert_eq!(e, m.predict_noise(&x, t).unwrap());
    }
    assert!(matches!(m.predict_noise(&x, 0), Err(DdadError::TimestepOutOfRange { .. })));
    assert!(matches!(m.predict_noise(&x, 1001), Err(DdadError::TimestepOutOfRange { .. })));
    // desk preset needs sizes divisible by its down-sampling factor
    assert!(m.predict_noise(&randn(3, 1, 30)[0], 10).is_err());
}

fn mean_abs_error(m: &dyn Denoiser, s: &VarianceSchedule, x: &[ImageTensor], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for img in x {
        let t = rng.random_range(1..=1000);
        let eps = ImageTensor::randn(3, img.height(), img.width(), &mut rng);
        let xt = perturb(img, t, &eps, s).unwrap();
        total += m.predict_noise(&xt, t).unwrap().mean_abs_diff(&eps);
    }
    total / x.len() as f64
}

#[test]
fn training_on_zero_images_learns_the_noise() {
    let s = schedule();
    let data = vec![ImageTensor::zeros(3, 16, 16); 16];
    let mut m = DenoiserModel::new(UNetConfig::tiny(), ScheduleConfig::default(), 1).unwrap();
    let before = mean_abs_error(&m, &s, &data, 99);
    let cfg = TrainConfig { learning_rate: 3e-3, weight_decay: 0.0, batch_size: 8, epochs: 40, seed: 2 };
    train(&mut m, &data, &s, &cfg, |_, _| {}).unwrap();
    let after = mean_abs_error(&m, &s, &data, 99);
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn training_lowers_the_running_loss() {
    let s = schedule();
    let spec = SynthSpec { n_train: 64, n_test: 1, resolution: 32, ..SynthSpec::default() };
    let data = synth_dataset(&spec, 3).unwrap().train_images();
    assert_eq!(data.len(), 64);
    let mut m = DenoiserModel::new(UNetConfig::desk(), ScheduleConfig::default(), 0).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-3, weight_decay: 0.0, batch_size: 8, epochs: 25, seed: 0 };
    let losses = train(&mut m, &data, &s, &cfg, |_, _| {}).unwrap();
    assert_eq!(losses.len(), 200);
    let window = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
    let (first, last) = (window(&losses[..20]), window(&losses[180..]));
    assert!(last < first, "running loss {first} -> {last}");
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn training_is_reproducible() {
    let s = schedule();
    let data = randn(8, 12, 16);
    let cfg = TrainConfig { learning_rate: 1e-3, weight_decay: 0.05, batch_size: 4, epochs: 3, seed: 5 };
    let run = || {
        let mut m = DenoiserModel::new(UNetConfig::tiny(), ScheduleConfig::default(), 7).unwrap();
        let l = train(&mut m, &data, &s, &cfg, |_, _| {}).unwrap();
        (l, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a.len(), 9);
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6));
    assert_eq!(ma.params().max_abs_diff(mb.params()), 0.0);
}

#[test]
fn checkpoint_roundtrip_and_guards() {
    let s = schedule();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("den.ckpt");
    let mut m = DenoiserModel::new(UNetConfig::tiny(), ScheduleConfig::default(), 3).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-2, weight_decay: 0.0, batch_size: 4, epochs: 2, seed: 0 };
    train(&mut m, &randn(1, 8, 16), &s, &cfg, |_, _| {}).unwrap();
    m.save(&path).unwrap();

    let back = DenoiserModel::load(&path, &ScheduleConfig::default()).unwrap();
    let probe = randn(2, 3, 16);
    let t = [5, 250, 999];
    let a = m.predict_noise_batch(&probe, &t).unwrap();
    let b = back.predict_noise_batch(&probe, &t).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.max_abs_diff(y) <= 1e-7);
    }
    assert_eq!(back.config(), m.config());

    let wrong = ScheduleConfig { timesteps: 500, ..ScheduleConfig::default() };
    assert!(matches!(DenoiserModel::load(&path, &wrong), Err(DdadError::ScheduleMismatch { .. })));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    let err = DenoiserModel::load(&cut, &ScheduleConfig::default()).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x55;
    std::fs::write(&cut, &flipped).unwrap();
    assert!(DenoiserModel::load(&cut, &ScheduleConfig::default()).is_err());
}
