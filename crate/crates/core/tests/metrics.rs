use proptest::prelude::*;
use vstream_core::metrics::*;
use vstream_core::oracle::*;

fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Rank by counting: one plus the number strictly below, plus half the
/// other ties.
fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|a| {
            let below = x.iter().filter(|b| *b < a).count() as f64;
            let ties = x.iter().filter(|b| *b == a).count() as f64 - 1.0;
            1.0 + below + ties / 2.0
        })
        .collect()
}

#[test]
fn spearman_hand_cases() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    // monotone but nonlinear
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 1e6]).unwrap() - 1.0).abs() < 1e-15);
    assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(lds(&[1.0], &[1.0]).is_err());
    assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn top_k_ties_go_low() {
    assert_eq!(top_k_regions(&[0.0; 6], 3), vec![0, 1, 2]);
    assert_eq!(top_k_regions(&[0.1, 0.5, 0.5, 0.9], 2), vec![3, 1]);
    assert_eq!(top_k_regions(&[0.1, 0.2], 5), vec![1, 0]);
}

#[test]
fn r_squared_hand_cases() {
    assert!((r_squared(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!(r_squared(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap().abs() < 1e-15);
    assert!(r_squared(&[1.0, 2.0], &[5.0, 5.0]).is_err());
}

#[test]
fn fidelity_bins_by_progress() {
    let mut points = Vec::new();
    for i in 0..20 {
        let x = i as f64;
        points.push(FidelityPoint { progress: 0.1, predicted: x, actual: 2.0 * x + 1.0 });
        points.push(FidelityPoint { progress: 0.9, predicted: x, actual: if i % 2 == 0 { x } else { -x } });
    }
    points.push(FidelityPoint { progress: 1.0, predicted: 0.0, actual: 0.0 });
    let curve = fidelity_curve(&points, 4).unwrap();
    assert!((curve[0].unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(curve[1], None);
    assert_eq!(curve[2], None);
    let p: Vec<f64> = points.iter().filter(|p| p.progress >= 0.75).map(|p| p.predicted).collect();
    let a: Vec<f64> = points.iter().filter(|p| p.progress >= 0.75).map(|p| p.actual).collect();
    assert!((curve[3].unwrap() - naive_pearson(&p, &a).powi(2)).abs() < 1e-12);
    assert!(fidelity_curve(&points, 0).is_err());
    assert!(fidelity_curve(&[FidelityPoint { progress: 1.5, predicted: 0.0, actual: 0.0 }], 2).is_err());
}

fn planted_example() -> (SpecOracle, GeneratedExample) {
    let mut spec = DatasetSpec {
        num_examples: 1,
        num_steps: 12,
        mode: OracleMode::Planted { noise_fraction: 0.0, plant_seed: 3 },
        ..DatasetSpec::default()
    };
    spec.model.seed = 17;
    let oracle = SpecOracle::build(&spec).unwrap();
    let ex = generate_example(&oracle, &spec, 0).unwrap();
    (oracle, ex)
}

#[test]
fn top_k_drop_on_planted_model() {
    let (oracle, ex) = planted_example();
    let truth = region_effects(&oracle, &ex.input, &ex.baseline, &ex.partition, &ex.spans).unwrap();
    let k = ex.partition.num_regions();
    for (s, effects) in truth.iter().enumerate() {
        // the planted model is additive over regions
        let top = top_k_regions(effects, 2);
        let drop = top_k_drop(effects, &oracle, &ex, s, 2).unwrap();
        assert!((drop - top.iter().map(|&r| effects[r]).sum::<f64>()).abs() < 1e-7);

        let all = ablation_effect(&oracle, &ex.input, &ex.baseline, &ex.spans[s], &VisionMask::all(64)).unwrap();
        assert_eq!(top_k_drop(effects, &oracle, &ex, s, k).unwrap(), all.span_effect);
        assert_eq!(top_k_drop(effects, &oracle, &ex, s, k + 5).unwrap(), all.span_effect);
    }
    assert!(top_k_drop(&truth[0], &oracle, &ex, 0, 0).is_err());
    assert!(top_k_drop(&truth[0][1..], &oracle, &ex, 0, 1).is_err());
    assert!(top_k_drop(&truth[0], &oracle, &ex, ex.spans.len(), 1).is_err());
}

#[test]
fn evaluation_of_the_truth_is_perfect() {
    let (oracle, ex) = planted_example();
    let examples = vec![ex];
    let truth = ground_truth(&oracle, &examples).unwrap();
    let before = oracle.pass_count();
    let report = evaluate("truth", &oracle, &examples, &truth, &truth, 3).unwrap();
    assert_eq!(oracle.pass_count() - before, examples[0].spans.len() as u64);
    assert_eq!(report.spans.len(), examples[0].spans.len());
    assert!((report.mean_lds().unwrap() - 1.0).abs() < 1e-12);
    assert!((report.r_squared.unwrap().mean - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn spearman_matches_rank_counting(
        pairs in prop::collection::vec((0i32..6, -50i32..50), 3..30)
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let y: Vec<f64> = pairs.iter().map(|p| f64::from(p.1) * 0.25).collect();
        let want = naive_pearson(&naive_ranks(&x), &naive_ranks(&y));
        match spearman(&x, &y) {
            Ok(got) => prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want),
            Err(_) => prop_assert!(!want.is_finite()),
        }
    }

    #[test]
    fn r_squared_is_pearson_squared(xy in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..40)) {
        let x: Vec<f64> = xy.iter().map(|p| p.0).collect();
        let y: Vec<f64> = xy.iter().map(|p| p.1).collect();
        let r = naive_pearson(&x, &y);
        prop_assert!((r_squared(&x, &y).unwrap() - r * r).abs() < 1e-9);
    }
}
