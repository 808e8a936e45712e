use super::*;

fn pooled(set: &VideoSet<f64>) -> Vec<Vec<f64>> {
    (0..set.n)
        .map(|i| {
            let s = set.sample(i);
            (0..set.d)
                .map(|c| (0..set.t).map(|r| s[r * set.d + c]).sum::<f64>() / set.t as f64)
                .collect()
        })
        .collect()
}

/// Logistic regression by full-batch gradient descent; returns held-out accuracy.
fn linear_probe(train: &[(Vec<f64>, f64)], test: &[(Vec<f64>, f64)]) -> f64 {
    let d = train[0].0.len();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..500 {
        let (mut gw, mut gb) = (vec![0.0; d], 0.0);
        for (x, y) in train {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            gb += err;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
        }
        let n = train.len() as f64;
        b -= 0.5 * gb / n;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 0.5 * g / n;
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) == (*y > 0.5)
        })
        .count();
    correct as f64 / test.len() as f64
}

fn domain_probe(pair: &DomainPair) -> f64 {
    let label = |set: &VideoSet<f64>, y: f64| pooled(set).into_iter().map(move |x| (x, y));
    let train: Vec<_> = label(&pair.source_train.set, 0.0)
        .chain(label(&pair.target_train.set, 1.0))
        .collect();
    let test: Vec<_> = label(&pair.source_eval.set, 0.0)
        .chain(label(&pair.target_eval.set, 1.0))
        .collect();
    linear_probe(&train, &test)
}

#[test]
fn noise_free_samples_are_mean_plus_template() {
    let mut spec = GeneratorSpec::benchmark(3);
    spec.static_scale = 0.0;
    spec.dynamic_sigma = 0.0;
    spec.n_per_domain = SplitCounts { train: 12, eval: 4 };
    let pair = generate_domain_pair(&spec).unwrap();
    let templates = spec.templates().unwrap();
    for (_, split) in pair.splits() {
        let mean = match split.set.domain {
            Domain::Source => &spec.static_source_mean,
            Domain::Target => &spec.static_target_mean,
        };
        for i in 0..split.set.n {
            let k = split.set.label(i).unwrap();
            for (j, v) in split.set.sample(i).iter().enumerate() {
                assert_eq!(*v, mean[j % spec.d] + templates[k][j]);
            }
        }
        for p in pooled(&split.set) {
            for (a, b) in p.iter().zip(mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = GeneratorSpec::benchmark(9);
    assert_eq!(generate_domain_pair(&spec).unwrap(), generate_domain_pair(&spec).unwrap());
    let other = GeneratorSpec::benchmark(10);
    assert_ne!(
        generate_domain_pair(&spec).unwrap().source_train,
        generate_domain_pair(&other).unwrap().source_train
    );
}

#[test]
fn benchmark_shift_has_the_documented_size() {
    let spec = GeneratorSpec::benchmark(0);
    let shift: f64 = spec
        .static_target_mean
        .iter()
        .zip(&spec.static_source_mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!((shift - BENCHMARK_SHIFT * spec.static_scale).abs() < 1e-12);
    assert!(spec.static_target_mean.iter().sum::<f64>().abs() < 1e-12);
}

#[test]
fn toml_round_trip_and_field_errors() {
    let spec = GeneratorSpec::benchmark(1);
    let text = spec.to_toml();
    assert!(text.contains("T = 16") && text.contains("K = 4"));
    assert_eq!(GeneratorSpec::from_toml(&text).unwrap(), spec);

    let err = |text: &str| match GeneratorSpec::from_toml(text) {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected a config error, got {other:?}"),
    };
    let short = text.replacen("static_scale = 1.0", "static_scale = -1.0", 1);
    assert_eq!(err(&short), "static_scale");
    assert_eq!(err(&format!("bogus = 1\n{text}")), "bogus");
    let mut bad = spec.clone();
    bad.static_target_mean.pop();
    assert_eq!(err(&bad.to_toml()), "static_target_mean");
}

#[test]
fn separability_guard_and_centering_are_enforced() {
    let mut spec = GeneratorSpec::benchmark(2);
    spec.dynamic_sigma = 10.0;
    assert!(matches!(spec.validate(), Err(Error::Config { field, .. }) if field == "class_patterns"));

    let mut spec = GeneratorSpec::benchmark(2);
    spec.k = 2;
    spec.t = 2;
    spec.d = 2;
    spec.static_source_mean = vec![0.0; 2];
    spec.static_target_mean = vec![1.0, -1.0];
    spec.dynamic_sigma = 0.1;
    spec.class_patterns = ClassPatterns::Explicit {
        templates: vec![vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![vec![0.0, 2.0], vec![0.0, 1.0]]],
    };
    assert!(matches!(spec.validate(), Err(Error::Config { field, .. }) if field == "class_patterns"));
    spec.class_patterns = ClassPatterns::Explicit {
        templates: vec![vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![vec![0.0, 2.0], vec![0.0, -2.0]]],
    };
    spec.validate().unwrap();
}

#[test]
fn dynamic_part_concentrates_around_zero() {
    let spec = GeneratorSpec::benchmark(4);
    let pair = generate_domain_pair(&spec).unwrap();
    let sigma = spec.dynamic_sigma;
    let bound = 3.0 * sigma * (spec.d as f64 / spec.t as f64).sqrt();
    let mut total = 0;
    let mut inside = 0;
    for (_, split) in pair.splits() {
        for (p, s) in pooled(&split.set).iter().zip(&split.statics) {
            let norm = p.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            total += 1;
            inside += usize::from(norm <= bound);
        }
    }
    assert!(inside as f64 >= 0.99 * total as f64, "{inside}/{total}");
}

#[test]
fn domain_probe_detects_only_real_shifts() {
    let spec = GeneratorSpec::benchmark(5);
    let acc = domain_probe(&generate_domain_pair(&spec).unwrap());
    assert!(acc > 0.95, "shifted domains separated at {acc}");

    let mut same = spec.clone();
    same.static_target_mean = same.static_source_mean.clone();
    let acc = domain_probe(&generate_domain_pair(&same).unwrap());
    assert!((acc - 0.5).abs() <= 0.05, "identical domains separated at {acc}");
}
