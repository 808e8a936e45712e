use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn small(share: bool) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        d_head: 4,
        d_ff: 12,
        layers: 2,
        t_max: 10,
        d_v: 6,
        head_hidden: 5,
        classes: 3,
        share_encoder: share,
    }
}

fn rand_seq(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn zero_all_but_norms(model: &mut MetaTransModel<f64>) {
    for id in model.params.ids().collect::<Vec<_>>() {
        if !model.params.name(id).ends_with(".gain") {
            let shape = model.params.get(id).shape().to_vec();
            model.params.set(id, Tensor::zeros(shape)).unwrap();
        }
    }
}

#[test]
fn temporal_stream_on_zero_input_is_normalized_positional_table() {
    let mut model = MetaTransModel::<f64>::new(small(true), 1).unwrap();
    zero_all_but_norms(&mut model);
    let t = 6;
    let z = model.temporal_repr(&Tensor::zeros(vec![t, 8]), t).unwrap();
    assert_eq!(z.shape(), &[t, 8]);

    // with zero weights every block is LN(LN(x)); two blocks give four norms
    let mut g = Graph::new();
    let h0 = g.constant(model.pos.table().slice_rows(0, t).unwrap()).unwrap();
    let one = g.constant(Tensor::full(vec![8], 1.0)).unwrap();
    let zero = g.constant(Tensor::zeros(vec![8])).unwrap();
    let mut h = h0;
    for _ in 0..4 {
        h = g.layer_norm(h, one, zero, LN_EPS).unwrap();
    }
    assert!(z.max_abs_diff(g.value(h)) < 1e-12);
}

#[test]
fn temporal_stream_rejects_long_sequences() {
    let model = MetaTransModel::<f64>::new(small(true), 1).unwrap();
    assert!(matches!(
        model.temporal_repr(&Tensor::zeros(vec![11, 8]), 11),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn temporal_stream_is_order_sensitive() {
    let model = MetaTransModel::<f64>::new(small(true), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_seq(&mut rng, 8, 8);
    let pooled = |x: &Tensor<f64>| {
        let z = model.temporal_repr(x, 8).unwrap();
        let mut g = Graph::new();
        let v = g.constant(z).unwrap();
        let m = g.mean_segments(v, 8).unwrap();
        g.value(m).clone()
    };
    let base = pooled(&x);
    let found = (0..20).any(|_| {
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        pooled(&x.permute_rows(&perm).unwrap()).max_abs_diff(&base) > 1e-3
    });
    assert!(found);
}

#[test]
fn static_stream_is_permutation_invariant_and_never_reads_positions() {
    for share in [true, false] {
        let model = MetaTransModel::<f64>::new(small(share), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let before = model.positional_reads();
        for _ in 0..5 {
            let x = rand_seq(&mut rng, 7, 8);
            let base = model.static_repr(&x, 7).unwrap();
            assert_eq!(base.shape(), &[1, 8]);
            for _ in 0..5 {
                let mut perm: Vec<usize> = (0..7).collect();
                perm.shuffle(&mut rng);
                let s = model.static_repr(&x.permute_rows(&perm).unwrap(), 7).unwrap();
                assert!(s.max_abs_diff(&base) <= 1e-9);
            }
        }
        assert_eq!(model.positional_reads(), before);
    }
}

#[test]
fn static_stream_on_constant_and_single_frames() {
    let model = MetaTransModel::<f64>::new(small(true), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let row = rand_seq(&mut rng, 1, 8);
    let single = model.static_repr(&row, 1).unwrap();

    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false).unwrap();
    let v = g.constant(row.clone()).unwrap();
    let enc = model.m2.forward(&mut g, &p, v, 1).unwrap();
    assert_eq!(g.value(enc), &single);

    let x = Tensor::concat_rows(&[&row, &row, &row, &row, &row]).unwrap();
    let s = model.static_repr(&x, 5).unwrap();
    assert!(s.max_abs_diff(&single) < 1e-12);
}

#[test]
fn subtraction_vanishes_when_streams_agree() {
    let mut model = MetaTransModel::<f64>::new(small(true), 5).unwrap();
    model.set_positional_table(Tensor::zeros(vec![10, 8])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let row = rand_seq(&mut rng, 1, 8);
    let x = Tensor::concat_rows(&[&row, &row, &row]).unwrap();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false).unwrap();
    let v = g.constant(x).unwrap();
    let (_, _, f) = model.subtract_features(&mut g, &p, v, 3, StaticMode::Encoder).unwrap();
    assert!(g.value(f).max_abs() < 1e-12);
}

#[test]
fn subtraction_matches_independent_streams() {
    let model = MetaTransModel::<f64>::new(small(false), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = 5;
    let x = rand_seq(&mut rng, 2 * t, 8);
    let z = model.temporal_repr(&x, t).unwrap();
    let s = model.static_repr(&x, t).unwrap();

    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false).unwrap();
    let v = g.constant(x).unwrap();
    let (_, _, f) = model.subtract_features(&mut g, &p, v, t, StaticMode::Encoder).unwrap();
    let f = g.value(f).clone();
    for r in 0..2 * t {
        for c in 0..8 {
            // identical evaluation order, so equality is exact
            assert_eq!(f.at(r, c), z.at(r, c) - s.at(r / t, c));
        }
    }
    for b in 0..2 {
        for c in 0..8 {
            let mean_f: f64 = (0..t).map(|r| f.at(b * t + r, c)).sum::<f64>() / t as f64;
            let mean_z: f64 = (0..t).map(|r| z.at(b * t + r, c)).sum::<f64>() / t as f64;
            assert!((mean_f - (mean_z - s.at(b, c))).abs() < 1e-12);
        }
    }
}

#[test]
fn pooled_subtraction_has_zero_temporal_mean() {
    let model = MetaTransModel::<f64>::new(small(true), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false).unwrap();
    let v = g.constant(rand_seq(&mut rng, 6, 8)).unwrap();
    let (_, _, f) = model.subtract_features(&mut g, &p, v, 6, StaticMode::PooledTemporal).unwrap();
    let m = g.mean_segments(f, 6).unwrap();
    assert!(g.value(m).max_abs() < 1e-12);
}

#[test]
fn identity_aggregation_returns_constant_row() {
    let mut model = MetaTransModel::<f64>::new(ModelConfig { d_v: 8, ..small(true) }, 8).unwrap();
    model.fan.frame = None;
    model.params.set(model.fan.out.w, Tensor::eye(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let row = rand_seq(&mut rng, 1, 8);
    let f = Tensor::concat_rows(&[&row, &row, &row, &row]).unwrap();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false).unwrap();
    let v = g.constant(f).unwrap();
    let out = model.aggregate(&mut g, &p, v, 4).unwrap();
    assert!(g.value(out).max_abs_diff(&row) < 1e-15);
}

#[test]
fn aggregation_matches_composed_oracle() {
    let model = MetaTransModel::<f64>::new(small(true), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in [1, 3, 7] {
        let f = rand_seq(&mut rng, t, 8);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false).unwrap();
        let v = g.constant(f.clone()).unwrap();
        let out = model.aggregate(&mut g, &p, v, t).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 6]);

        let frame = model.fan.frame.as_ref().unwrap();
        let h = f.matmul(model.params.get(frame.w)).unwrap();
        let mut pooled = vec![0.0; 6];
        for r in 0..t {
            for c in 0..6 {
                pooled[c] += (h.at(r, c) + model.params.get(frame.b).data()[c]).max(0.0) / t as f64;
            }
        }
        let pooled = Tensor::new(vec![1, 6], pooled).unwrap();
        let want = pooled
            .matmul(model.params.get(model.fan.out.w))
            .unwrap()
            .zip_map(model.params.get(model.fan.out.b), |a, b| a + b)
            .unwrap();
        assert!(g.value(out).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn forward_shapes_and_determinism() {
    let model = MetaTransModel::<f64>::new(small(true), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_seq(&mut rng, 3 * 4, 8);
    let run = || {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true).unwrap();
        let v = g.constant(x.clone()).unwrap();
        let o = model.forward(&mut g, &p, v, 4, 0.5, StaticMode::Encoder).unwrap();
        assert_eq!(g.value(o.task_logits).shape(), &[3, 3]);
        assert_eq!(g.value(o.frame_domain_logits).shape(), &[12, 2]);
        assert_eq!(g.value(o.video_domain_logits).shape(), &[3, 2]);
        let a = g.value(o.task_logits).clone();
        let b = g.value(o.frame_domain_logits).clone();
        (a, b)
    };
    let first = run();
    let second = run();
    assert_eq!(first, second);
}

#[test]
fn zero_reversal_scale_blocks_domain_gradients() {
    let model = MetaTransModel::<f64>::new(small(true), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_seq(&mut rng, 8, 8);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true).unwrap();
    let v = g.constant(x).unwrap();
    let o = model.forward(&mut g, &p, v, 4, 0.0, StaticMode::Encoder).unwrap();
    let lf = g.cross_entropy(o.frame_domain_logits, &vec![Some(0); 8]).unwrap();
    let lv = g.cross_entropy(o.video_domain_logits, &[Some(0), Some(1)]).unwrap();
    let loss = g.add(lf, lv).unwrap();
    g.backward(loss).unwrap();
    for id in model.encoder_param_ids() {
        let grad = g.grad(p[id]);
        assert!(grad.map_or(true, |t| t.max_abs() == 0.0), "{}", model.params.name(id));
    }
    let head = model.domain_head_frame.layers[0].w;
    assert!(g.grad(p[head]).unwrap().max_abs() > 0.0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for share in [true, false] {
        let model = MetaTransModel::<f64>::new(small(share), 12).unwrap();
        let a = dir.path().join(format!("a{share}.mtck"));
        let b = dir.path().join(format!("b{share}.mtck"));
        write_checkpoint(&model, &a).unwrap();
        let back = read_checkpoint::<f64>(&a).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.params, model.params);
        write_checkpoint(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn checkpoint_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let model = MetaTransModel::<f64>::new(small(true), 13).unwrap();
    let path = dir.path().join("m.mtck");
    write_checkpoint(&model, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let field = |bytes: &[u8]| {
        std::fs::write(&path, bytes).unwrap();
        match read_checkpoint::<f64>(&path) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected a format error, got {other:?}"),
        }
    };
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(field(&bad), "magic");
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(field(&bad), "version");
    assert_eq!(field(&bytes[..bytes.len() - 3]), "payload");
}

#[test]
fn checkpoint_header_layout() {
    let mut buf = Vec::new();
    let t = Tensor::<f64>::from_f64(vec![1, 2], &[1.5, -2.0]).unwrap();
    write_params(&mut buf, [("w", &t)]).unwrap();
    let mut want = b"MTCK".to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.push(b'w');
    want.extend(2u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(2u32.to_le_bytes());
    want.extend(1.5f64.to_le_bytes());
    want.extend((-2.0f64).to_le_bytes());
    assert_eq!(buf, want);
    let back = read_params::<f64, _>(&mut buf.as_slice()).unwrap();
    assert_eq!(back, vec![("w".to_string(), t)]);
}
