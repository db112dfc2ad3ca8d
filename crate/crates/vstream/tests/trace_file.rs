use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vstream::trace_io::*;
use vstream_core::trace::{AttentionTrace, Span};

fn random_trace(seed: u64, l: usize, h: usize, t: usize, rows: usize, cols: usize, d: usize) -> AttentionTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rows * cols;
    let words = ["a", " b", ".", " ", "é", "\n", "Step 2:", "<think>"];
    let tokens: Vec<String> = (0..t).map(|_| words[rng.random_range(0..words.len())].to_string()).collect();
    let mut spans = Vec::new();
    let mut start = 0;
    while start < t {
        let end = rng.random_range(start + 1..=t);
        spans.push(Span::labeled(start, end, format!("span {start}")));
        start = end;
    }
    AttentionTrace {
        num_layers: l,
        num_heads: h,
        num_steps: t,
        num_vision_tokens: m,
        feature_dim: d,
        grid_dims: (rows, cols),
        tokens,
        attn: (0..l * h * t * m).map(|_| rng.random::<f32>() / (m + 1) as f32).collect(),
        feature_grid: (0..m * d).map(|_| rng.random_range(-3.0f32..3.0)).collect(),
        saliency: (0..m).map(|_| rng.random::<f32>()).collect(),
        spans,
    }
}

#[test]
fn file_round_trip() {
    let trace = random_trace(1, 2, 3, 5, 4, 4, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.vstr");
    save_trace_file(&trace, &path).unwrap();
    assert_eq!(load_trace_file(&path).unwrap(), trace);
    let mut buf = Vec::new();
    let n = save_trace(&trace, &mut buf).unwrap();
    assert_eq!(n, buf.len());
    assert_eq!(buf, std::fs::read(&path).unwrap());
    assert_eq!(load_trace(buf.as_slice()).unwrap(), trace);
    assert!(matches!(load_trace_file(dir.path().join("missing")), Err(TraceFileError::Io(_))));
}

#[test]
fn every_single_byte_flip_is_caught() {
    let bytes = encode_trace(&random_trace(2, 1, 2, 3, 2, 3, 2)).unwrap();
    for i in 0..bytes.len() {
        for bit in [0x01u8, 0x80] {
            let mut b = bytes.clone();
            b[i] ^= bit;
            assert!(decode_trace(&b).is_err(), "flip at byte {i}");
        }
    }
    for n in 0..bytes.len() {
        assert!(decode_trace(&bytes[..n]).is_err(), "truncated to {n}");
    }
}

#[test]
fn huge_header_dimensions_fail_without_allocating() {
    let bytes = encode_trace(&random_trace(3, 1, 1, 2, 2, 2, 1)).unwrap();
    for field in 0..7 {
        let mut b = bytes.clone();
        let at = 8 + 4 * field;
        b[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_trace(&b).is_err());
    }
}

#[test]
fn validation_names_the_field() {
    let good = random_trace(4, 1, 2, 4, 2, 2, 3);
    assert!(validate_trace(&good).is_empty());

    let mut t = good.clone();
    t.attn[3] = -0.1;
    assert_eq!(validate_trace(&t)[0].field, "attn");
    let mut t = good.clone();
    for x in t.attn[..4].iter_mut() {
        *x = 0.3;
    }
    assert_eq!(validate_trace(&t)[0].index, vec![0, 0, 0]);
    let mut t = good.clone();
    t.feature_grid[1] = f32::NAN;
    assert_eq!(validate_trace(&t)[0].field, "feature_grid");
    let mut t = good.clone();
    t.saliency[0] = f32::INFINITY;
    assert_eq!(validate_trace(&t)[0].field, "saliency");
    let mut t = good.clone();
    t.spans = vec![Span::new(0, 3), Span::new(2, 4)];
    assert_eq!(validate_trace(&t)[0].field, "spans");
    let mut t = good.clone();
    t.spans = vec![Span::new(0, 5)];
    assert_eq!(validate_trace(&t)[0].field, "spans");
    let mut t = good.clone();
    t.grid_dims = (3, 2);
    assert_eq!(validate_trace(&t)[0].field, "grid_dims");
    let mut t = good;
    t.tokens.pop();
    assert_eq!(validate_trace(&t)[0].field, "tokens");
    assert_eq!(encode_trace(&t).unwrap_err().field(), Some("tokens"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_any_shape(
        seed in any::<u64>(), l in 1usize..3, h in 1usize..4, t in 1usize..8,
        rows in 1usize..5, cols in 1usize..5, d in 1usize..5,
    ) {
        let trace = random_trace(seed, l, h, t, rows, cols, d);
        let bytes = encode_trace(&trace).unwrap();
        prop_assert_eq!(decode_trace(&bytes).unwrap(), trace);
    }

    #[test]
    fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let mut b = b"VSTR\x01\x00\x00\x00".to_vec();
        b.extend(bytes);
        let _ = decode_trace(&b);
    }
}
