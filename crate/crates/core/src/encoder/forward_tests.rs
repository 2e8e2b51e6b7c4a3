use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{Graph, ParamStore};

fn small_config(domain_vector: bool) -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        width: 8,
        ffn: 16,
        dropout: 0.0,
        feature_dim: 3,
        stack: 2,
        stride: 2,
        input_frame_ms: 30.0,
        domain_vector,
        max_positions: 64,
    }
}

fn random_input(frames: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(frames, dim, (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn streaming_matches_full_forward() {
    let mut store = ParamStore::new();
    let enc = Encoder::seeded(small_config(true), &mut store, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(base, center, right, cap) in &[
        (4, 4, 1, None),
        (4, 2, 1, Some(3)),
        (5, 3, 0, Some(2)),
        (6, 1, 2, None),
        (3, 3, 0, Some(1)),
    ] {
        for frames in [1, 5, 13] {
            let x = random_input(frames, enc.config.stacked_dim(), &mut rng);
            let plan = plan_contexts(frames, base, center, right, cap).unwrap();
            let full = enc.embed(&store, &x, &plan, Some(DomainId::Dictation)).unwrap();
            let mut s = StreamingEncoder::new(&enc, &store, base, center, right, cap, Some(DomainId::Dictation)).unwrap();
            let streamed = s.encode_all(&x).unwrap();
            assert!(max_abs_diff(&full, &streamed) < 1e-10, "base {base} center {center} right {right} cap {cap:?} T {frames}");
        }
    }
}

#[test]
fn out_of_order_chunks_rejected() {
    let mut store = ParamStore::new();
    let enc = Encoder::seeded(small_config(false), &mut store, 1).unwrap();
    let mut s = StreamingEncoder::new(&enc, &store, 2, 2, 0, None, None).unwrap();
    let chunk = Tensor::zeros(vec![2, 6]);
    let none = Tensor::zeros(vec![0, 6]);
    assert!(s.step(2, &chunk, &none).is_err());
    s.step(0, &chunk, &none).unwrap();
    assert!(s.step(0, &chunk, &none).is_err());
    s.step(2, &chunk, &none).unwrap();
}

#[test]
fn first_chunk_equals_forward_on_truncated_plan() {
    let mut store = ParamStore::new();
    let enc = Encoder::seeded(small_config(false), &mut store, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_input(3, 6, &mut rng);
    // Chunk of 2 center frames with 1 look-ahead frame, vs a 3-frame utterance.
    let plan = plan_contexts(3, 2, 2, 1, None).unwrap();
    let full = enc.embed(&store, &x, &plan, None).unwrap();
    let mut s = StreamingEncoder::new(&enc, &store, 2, 2, 1, None, None).unwrap();
    let center = Tensor::matrix(2, 6, x.data()[..12].to_vec()).unwrap();
    let right = Tensor::matrix(1, 6, x.data()[12..].to_vec()).unwrap();
    let first = s.step(0, &center, &right).unwrap();
    assert!(max_abs_diff(&first, &Tensor::matrix(2, 8, full.data()[..16].to_vec()).unwrap()) < 1e-10);
}

#[test]
fn embeddings_ignore_frames_beyond_look_ahead() {
    let mut store = ParamStore::new();
    let enc = Encoder::seeded(small_config(false), &mut store, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frames = 12;
    let plan = plan_contexts(frames, 4, 2, 1, Some(4)).unwrap();
    let x = random_input(frames, 6, &mut rng);
    let base = enc.embed(&store, &x, &plan, None).unwrap();
    for f in 0..frames {
        let seg = &plan.segments[plan.segment_of(f)];
        let horizon = seg.right.end.max(seg.center.end);
        if horizon >= frames {
            continue;
        }
        let mut y = x.clone();
        for v in &mut y.data_mut()[horizon * 6..] {
            *v += 5.0;
        }
        let out = enc.embed(&store, &y, &plan, None).unwrap();
        assert!(out.row_slice(f).iter().zip(base.row_slice(f)).all(|(a, b)| (a - b).abs() < 1e-12));
        // And the first frame past the horizon does matter somewhere.
        assert!(max_abs_diff(&out, &base) > 1e-6);
    }
}

#[test]
fn domain_vector_changes_first_layer_inputs() {
    let mut store = ParamStore::new();
    let enc = Encoder::seeded(small_config(true), &mut store, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_input(6, 6, &mut rng);
    let plan = plan_contexts(6, 2, 2, 1, None).unwrap();
    let a = enc.embed(&store, &x, &plan, Some(DomainId::VCmd)).unwrap();
    let b = enc.embed(&store, &x, &plan, Some(DomainId::Dictation)).unwrap();
    assert!(max_abs_diff(&a, &b) > 1e-6);
    // Wrong flag combinations are rejected.
    assert!(enc.embed(&store, &x, &plan, None).is_err());
    let mut store2 = ParamStore::new();
    let plain = Encoder::seeded(small_config(false), &mut store2, 11).unwrap();
    assert!(plain.embed(&store2, &x, &plan, Some(DomainId::VCmd)).is_err());
    // QKV input widens by the two domain columns.
    let qkv = store.get(store.find("enc.layer0.qkv.weight").unwrap());
    assert_eq!(qkv.rows(), 8 + 2);
}

#[test]
fn single_segment_forward_is_unmasked_and_shaped() {
    let mut store = ParamStore::new();
    let enc = Encoder::seeded(small_config(false), &mut store, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_input(5, 6, &mut rng);
    let plan = plan_contexts(5, 5, 5, 0, None).unwrap();
    let out = enc.embed(&store, &x, &plan, None).unwrap();
    assert_eq!(out.shape(), &[5, 8]);
    // With the whole utterance in one block every output depends on every input.
    let mut y = x.clone();
    y.data_mut()[4 * 6] += 1.0;
    let out2 = enc.embed(&store, &y, &plan, None).unwrap();
    assert!(out.row_slice(0).iter().zip(out2.row_slice(0)).any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn shape_mismatch_rejected() {
    let mut store = ParamStore::new();
    let enc = Encoder::seeded(small_config(false), &mut store, 1).unwrap();
    let plan = plan_contexts(4, 2, 2, 0, None).unwrap();
    assert!(enc.embed(&store, &Tensor::zeros(vec![4, 5]), &plan, None).is_err());
    assert!(enc.embed(&store, &Tensor::zeros(vec![3, 6]), &plan, None).is_err());
}

#[test]
fn training_mode_dropout_is_seeded() {
    let mut cfg = small_config(false);
    cfg.dropout = 0.3;
    let mut store = ParamStore::new();
    let enc = Encoder::seeded(cfg, &mut store, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_input(4, 6, &mut rng);
    let plan = plan_contexts(4, 2, 2, 1, None).unwrap();
    let run = |seed| {
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let out = enc.forward(&mut g, &store, &x, &plan, None, Some(&mut r)).unwrap();
        g.value(out).clone()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
    assert_ne!(run(3), enc.embed(&store, &x, &plan, None).unwrap());
}
