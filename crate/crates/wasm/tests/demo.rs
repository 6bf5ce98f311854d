use ddad_wasm::{Demo, RESOLUTION};

#[test]
fn demo_operations_run_natively() {
    let d = Demo::build(3).unwrap();
    assert_eq!(d.count(), 16);
    assert_eq!(d.image_rgba(0).len(), RESOLUTION * RESOLUTION * 4);
    assert!(d.is_defect(15) && !d.is_defect(0));
    assert!(d.image_rgba(99).is_empty());

    // forward process: clean at t = 1, noise-dominated at t = T
    let x = &Demo::build(3).unwrap();
    let early = x.forward(0, 1, 7).unwrap();
    let other = x.forward(0, 1, 8).unwrap();
    let late = x.forward(0, 1000, 7).unwrap();
    assert!(early.mean_abs_diff(&other) < 0.02);
    assert!(late.as_slice().iter().map(|v| v.abs() as f64).sum::<f64>() / late.as_slice().len() as f64 > 0.6);
    assert!(x.forward(0, 0, 7).is_err());
    assert!(x.forward(99, 10, 7).is_err());

    let (recon, map, score) = d.detect_one(15, 3.0, 5, 250).unwrap();
    assert_eq!(recon.shape(), [3, RESOLUTION, RESOLUTION]);
    assert_eq!(map.dim(), (RESOLUTION, RESOLUTION));
    assert!(score.is_finite() && score >= 0.0);

    let summary = d.evaluate_all(3.0, 5, 250).unwrap();
    for p in ["pixel", "feature", "combined"] {
        let v = summary[p]["image_auroc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{p}: {v}");
    }
}

#[test]
fn guidance_pulls_reconstructions_toward_the_input() {
    let d = Demo::build(5).unwrap();
    let (r0, _, _) = d.detect_one(10, 0.0, 5, 250).unwrap();
    let (r6, _, _) = d.detect_one(10, 6.0, 5, 250).unwrap();
    let x = d.forward(10, 1, 0).unwrap();
    assert!(r6.mean_abs_diff(&x) < r0.mean_abs_diff(&x));
}
