use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vstream_core::estimator::*;
use vstream_core::features::*;
use vstream_core::oracle::{generate_dataset, DatasetSpec, OracleMode, SpecOracle};
use vstream_core::stats::{cosine_similarity, pearson};
use vstream_core::trace::{AttentionTrace, Span};
use vstream_core::unitization::{PartitionMethod, RegionPartition};

fn random_features(rng: &mut ChaCha8Rng, k: usize, l: usize, h: usize) -> SpanFeatureMatrix {
    let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..l * h).map(|_| rng.random::<f64>()).collect()).collect();
    SpanFeatureMatrix::from_rows(l, h, &rows).unwrap()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_trace(rng: &mut ChaCha8Rng, l: usize, h: usize, t: usize, grid: (usize, usize)) -> AttentionTrace {
    let m = grid.0 * grid.1;
    let mut attn = Vec::with_capacity(l * h * t * m);
    for _ in 0..l * h * t {
        let row: Vec<f64> = (0..m + 1).map(|_| rng.random::<f64>()).collect();
        let z: f64 = row.iter().sum();
        attn.extend(row[..m].iter().map(|x| (x / z) as f32));
    }
    AttentionTrace {
        num_layers: l,
        num_heads: h,
        num_steps: t,
        num_vision_tokens: m,
        feature_dim: 1,
        grid_dims: grid,
        tokens: (0..t).map(|i| format!("w{i}")).collect(),
        attn,
        feature_grid: vec![1.0; m],
        saliency: vec![1.0; m],
        spans: vec![],
    }
}

/// Central differences of the per-sample Pearson correlation.
fn numeric_gradient(w: &[f64], design: &[Vec<f64>], targets: &[f64]) -> Vec<f64> {
    let eps = 1e-5;
    (0..w.len())
        .map(|i| {
            let mut plus = w.to_vec();
            let mut minus = w.to_vec();
            plus[i] += eps;
            minus[i] -= eps;
            let f = |v: &[f64]| {
                let preds: Vec<f64> = design.iter().map(|g| g.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
                pearson(&preds, targets).unwrap()
            };
            (f(&plus) - f(&minus)) / (2.0 * eps)
        })
        .collect()
}

#[test]
fn pooling_matches_quadruple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let trace = random_trace(&mut rng, 2, 2, 6, (3, 3));
    let part = RegionPartition::from_labels(PartitionMethod::RandomBlocks, (3, 3), &[0, 0, 1, 0, 0, 1, 2, 2, 1]).unwrap();
    let span = Span::new(1, 5);
    let f = pool_span_region(&trace, &span, &part).unwrap();
    for k in 0..3 {
        for l in 0..2 {
            for h in 0..2 {
                let mut total = 0.0;
                for t in span.start..span.end {
                    for &i in part.region(k) {
                        total += f64::from(trace.attn[((l * 2 + h) * 6 + t) * 9 + i]);
                    }
                }
                let want = total / (span.len() * part.region_size(k)) as f64;
                assert!((f.row(k)[l * 2 + h] - want).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn pooling_identity_and_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trace = random_trace(&mut rng, 1, 2, 3, (2, 2));
    let tw = RegionPartition::tokenwise((2, 2)).unwrap();
    let f = pool_span_region(&trace, &Span::new(2, 3), &tw).unwrap();
    for i in 0..4 {
        for h in 0..2 {
            assert_eq!(f.row(i)[h], f64::from(trace.attn[(h * 3 + 2) * 4 + i]));
        }
    }
    let mut uniform = trace.clone();
    uniform.attn.iter_mut().for_each(|a| *a = 0.25);
    let f = pool_span_region(&uniform, &Span::new(0, 3), &RegionPartition::from_labels(PartitionMethod::Voronoi, (2, 2), &[0, 0, 1, 1]).unwrap()).unwrap();
    assert!(f.data.iter().all(|&x| x == 0.25));
    assert!(pool_span_region(&trace, &Span::new(1, 1), &tw).is_err());
    assert!(pool_span_region(&trace, &Span::new(0, 1), &RegionPartition::tokenwise((1, 3)).unwrap()).is_err());
}

#[test]
fn mask_sampling() {
    assert_eq!(sample_masks(8, 20, 42), sample_masks(8, 20, 42));
    let masks = sample_masks(8, 10_000, 42);
    for k in 0..8 {
        let kept = masks.iter().filter(|m| m.retained()[k]).count() as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&kept), "region {k}: {kept}");
    }
    assert!(sample_masks(1, 5, 3).iter().all(|m| m.len() == 1));
}

#[test]
fn baselines() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trace = random_trace(&mut rng, 2, 3, 4, (2, 3));
    let part = RegionPartition::from_labels(PartitionMethod::RandomBlocks, (2, 3), &[0, 1, 1, 0, 2, 2]).unwrap();
    let span = Span::new(0, 4);
    let att = attention_baseline(&trace, &span, &part).unwrap();
    let f = pool_span_region(&trace, &span, &part).unwrap();
    for k in 0..3 {
        let mut total = 0.0;
        for lh in 0..6 {
            for t in 0..4 {
                for &i in part.region(k) {
                    total += f64::from(trace.attn[(lh * 4 + t) * 6 + i]);
                }
            }
        }
        let want = total / (6 * 4 * part.region_size(k)) as f64;
        assert!((att[k] - want).abs() < 1e-14);
    }
    assert_eq!(att, score_regions(&EstimatorWeights::uniform(2, 3), &f).unwrap());

    assert_eq!(random_baseline(5, 9), random_baseline(5, 9));
    assert_eq!(random_baseline(1, 9).len(), 1);
    let draws = random_baseline(100_000, 11);
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((0.497..=0.503).contains(&mean), "{mean}");
    assert!(draws.iter().all(|x| (0.0..1.0).contains(x)));
}

#[test]
fn exact_targets_reach_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w0 = normals(&mut rng, 6);
    let w0 = EstimatorWeights::new(2, 3, w0).unwrap();
    let samples = (0..40)
        .map(|_| {
            let features = random_features(&mut rng, 6, 2, 3);
            let masks = sample_masks(6, 32, rng.random());
            let targets = masks.iter().map(|m| predict_mask_effect(&w0, &features, m).unwrap()).collect();
            TrainingSample {
                features,
                masks,
                targets,
                correct: true,
            }
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: 256,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let out = train(&TrainingSet { samples }, &cfg).unwrap();
    let last = *out.loss_history.last().unwrap();
    assert!(last <= -0.999, "final loss {last}");
    assert!(cosine_similarity(&out.weights.w, &w0.w) > 0.99);
}

#[test]
fn planted_recovery_and_smoothed_loss() {
    let spec = DatasetSpec {
        num_examples: 60,
        mode: OracleMode::Planted {
            noise_fraction: 0.05,
            plant_seed: 7,
        },
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let SpecOracle::Planted(planted) = SpecOracle::build(&spec).unwrap() else {
        unreachable!()
    };
    let out = train(&data.training, &TrainConfig::default()).unwrap();
    let cos = cosine_similarity(&out.weights.w, planted.plant());
    assert!(cos >= 0.95, "cosine {cos}");

    let window = 50;
    let smooth: Vec<f64> = out
        .loss_history
        .windows(window)
        .step_by(window)
        .map(|w| w.iter().filter(|x| x.is_finite()).sum::<f64>() / w.len() as f64)
        .collect();
    for pair in smooth.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-3, "smoothed loss rose: {pair:?}");
    }
}

#[test]
fn training_is_deterministic_and_rejects_degenerate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let features = random_features(&mut rng, 4, 1, 2);
    let masks = sample_masks(4, 8, 1);
    let flat = TrainingSample {
        features: features.clone(),
        masks: masks.clone(),
        targets: vec![1.0; 8],
        correct: true,
    };
    let cfg = TrainConfig {
        iterations: 20,
        ..TrainConfig::default()
    };
    assert!(train(&TrainingSet { samples: vec![flat] }, &cfg).is_err());

    let good = TrainingSample {
        features,
        masks,
        targets: normals(&mut rng, 8),
        correct: true,
    };
    let set = TrainingSet { samples: vec![good] };
    assert_eq!(train(&set, &cfg).unwrap().weights, train(&set, &cfg).unwrap().weights);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pearson_affine_invariance(seed in any::<u64>(), a in 1e-3f64..1e3, b in -1e3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normals(&mut rng, 20);
        let y = normals(&mut rng, 20);
        let r = pearson(&x, &y).unwrap();
        let ay: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let ny: Vec<f64> = y.iter().map(|v| -a * v + b).collect();
        prop_assert!((pearson(&x, &ay).unwrap() - r).abs() <= 1e-12);
        prop_assert!((pearson(&x, &ny).unwrap() + r).abs() <= 1e-12);
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson(&x, &ax).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), k in 2usize..8, n in 4usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_features(&mut rng, k, 2, 2);
        let masks = sample_masks(k, n, rng.random());
        let design: Vec<Vec<f64>> = masks.iter().map(|m| ablated_feature(&f, m).unwrap()).collect();
        let targets = normals(&mut rng, n);
        let w = normals(&mut rng, 4);
        let Ok((_, g)) = pearson_with_gradient(&w, &design, &targets) else { return Ok(()) };
        let num = numeric_gradient(&w, &design, &targets);
        let scale = num.iter().map(|x| x.abs()).fold(1e-3, f64::max);
        for (a, b) in g.iter().zip(&num) {
            prop_assert!((a - b).abs() / scale <= 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn standardized_mse_identity(seed in any::<u64>(), n in 5usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = normals(&mut rng, n);
        let y: Vec<f64> = z.iter().map(|v| 0.7 * v + rng.sample::<f64, _>(StandardNormal)).collect();
        let fit = standardized_affine_fit(&z, &y).unwrap();
        let rho = pearson(&z, &y).unwrap();
        prop_assert!((fit.mse - (1.0 - rho * rho)).abs() <= 1e-8);
    }

    #[test]
    fn region_scores_sum_over_every_mask(seed in any::<u64>(), k in 1usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_features(&mut rng, k, 2, 2);
        let w = EstimatorWeights::new(2, 2, normals(&mut rng, 4)).unwrap();
        let scores = score_regions(&w, &f).unwrap();
        for bits in 0u32..(1 << k) {
            let mask = MaskSample::from_retained((0..k).map(|j| bits >> j & 1 == 1).collect());
            let want: f64 = mask.ablated().map(|j| scores[j]).sum();
            let got = predict_mask_effect(&w, &f, &mask).unwrap();
            prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn signed_binary_identity(seed in any::<u64>(), k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_features(&mut rng, k, 1, 3);
        let mask = sample_masks(k, 1, rng.random()).remove(0);
        let signed = combine_signed(&f, &mask.signed()).unwrap();
        let binary = combine_binary(&f, mask.retained()).unwrap();
        let cols = f.column_sums();
        for j in 0..3 {
            prop_assert!((signed[j] - (2.0 * binary[j] - cols[j])).abs() <= 1e-12);
            let mut naive = 0.0;
            for r in 0..k {
                naive += if mask.retained()[r] { f.row(r)[j] } else { -f.row(r)[j] };
            }
            prop_assert!((signed[j] - naive).abs() <= 1e-12);
        }
        let neg: Vec<f64> = mask.signed().iter().map(|v| -v).collect();
        let flipped = combine_signed(&f, &neg).unwrap();
        prop_assert!(signed.iter().zip(&flipped).all(|(a, b)| a == &-b));
    }

    #[test]
    fn dummy_region_scores_zero(seed in any::<u64>(), k in 2usize..8, zero in 0usize..8) {
        let zero = zero % k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = (0..k).map(|_| normals(&mut rng, 4)).collect();
        rows[zero] = vec![0.0; 4];
        let f = SpanFeatureMatrix::from_rows(2, 2, &rows).unwrap();
        let w = EstimatorWeights::new(2, 2, normals(&mut rng, 4)).unwrap();
        prop_assert_eq!(score_regions(&w, &f).unwrap()[zero], 0.0);
        let mask = sample_masks(k, 1, rng.random()).remove(0);
        let mut toggled = mask.retained().to_vec();
        toggled[zero] = !toggled[zero];
        prop_assert_eq!(
            predict_mask_effect(&w, &f, &mask).unwrap(),
            predict_mask_effect(&w, &f, &MaskSample::from_retained(toggled)).unwrap()
        );
    }

    #[test]
    fn ranking_invariant_to_positive_scale(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_features(&mut rng, 7, 2, 2);
        let w = normals(&mut rng, 4);
        let a = score_regions(&EstimatorWeights::new(2, 2, w.clone()).unwrap(), &f).unwrap();
        let b = score_regions(&EstimatorWeights::new(2, 2, w.iter().map(|x| x * c).collect()).unwrap(), &f).unwrap();
        let order = |s: &[f64]| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
            idx
        };
        prop_assert_eq!(order(&a), order(&b));
    }

    #[test]
    fn pooling_is_length_weighted(seed in any::<u64>(), cut in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = random_trace(&mut rng, 1, 2, 8, (2, 2));
        let part = RegionPartition::from_labels(PartitionMethod::Voronoi, (2, 2), &[0, 1, 1, 1]).unwrap();
        let whole = pool_span_region(&trace, &Span::new(0, 8), &part).unwrap();
        let a = pool_span_region(&trace, &Span::new(0, cut), &part).unwrap();
        let b = pool_span_region(&trace, &Span::new(cut, 8), &part).unwrap();
        for i in 0..whole.data.len() {
            let want = (cut as f64 * a.data[i] + (8 - cut) as f64 * b.data[i]) / 8.0;
            prop_assert!((whole.data[i] - want).abs() <= 1e-14);
        }
    }
}
