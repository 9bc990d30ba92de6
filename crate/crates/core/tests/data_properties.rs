use l2d_core::data::{generate_dataset, SceneGenerator, SceneSpec};

const SAMPLES: u64 = 10_000;

fn labels(spec: &SceneSpec) -> Vec<Vec<u8>> {
    let g = SceneGenerator::new(spec.clone()).unwrap();
    (0..SAMPLES).map(|i| g.example(i).labels).collect()
}

#[test]
fn twenty_class_density_matches_target() {
    let spec = SceneSpec {
        height: 40,
        width: 40,
        ..SceneSpec::with_classes(20, 1.6, 17)
    };
    let ys = labels(&spec);
    assert!(ys.iter().all(|y| y.contains(&1)));
    let mean = ys.iter().map(|y| y.iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / SAMPLES as f64;
    assert!((mean - 1.6).abs() <= 0.1, "mean labels per scene {mean}");
}

#[test]
fn class_frequencies_within_three_sigma() {
    let spec = SceneSpec::default();
    let ys = labels(&spec);
    for (k, p) in spec.target_frequencies().into_iter().enumerate() {
        let hits = ys.iter().filter(|y| y[k] == 1).count() as f64;
        let sigma = (SAMPLES as f64 * p * (1.0 - p)).sqrt();
        let expected = SAMPLES as f64 * p;
        assert!((hits - expected).abs() <= 3.0 * sigma, "class {k}: {hits} vs {expected} ± {sigma}");
    }
}

#[test]
fn cooccurrence_boost_raises_conditional_rate() {
    let mut spec = SceneSpec::with_classes(8, 2.0, 5);
    spec.cooccurrence = vec![vec![0.0; 8]; 8];
    spec.frequencies = vec![1.0; 8];
    spec.cooccurrence[0][1] = 0.9;
    spec.cooccurrence[1][0] = 0.9;
    let ys = labels(&spec);
    let p1 = ys.iter().filter(|y| y[1] == 1).count() as f64 / SAMPLES as f64;
    let with0: Vec<_> = ys.iter().filter(|y| y[0] == 1).collect();
    let p1_given_0 = with0.iter().filter(|y| y[1] == 1).count() as f64 / with0.len() as f64;
    assert!(p1_given_0 > p1 + 0.1, "P(y1|y0) = {p1_given_0}, P(y1) = {p1}");
}

#[test]
fn parallel_generation_is_identical() {
    let spec = SceneSpec::default();
    let (train, _) = generate_dataset(&spec, 64, 0).unwrap();
    let parts: Vec<Vec<f32>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let spec = spec.clone();
                s.spawn(move || {
                    let g = SceneGenerator::new(spec).unwrap();
                    (t * 16..(t + 1) * 16).flat_map(|i| g.example(i as u64).grid).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(parts.concat(), train.images);
}
