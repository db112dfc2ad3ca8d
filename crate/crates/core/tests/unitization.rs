use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vstream_core::unitization::*;

fn gaussian_grid(m: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// Textbook Ward: every step recomputes the variance increase of every pair
/// of live clusters from their centroids.
fn ward_reference(features: &[Vec<f64>], tau: f64) -> (Vec<usize>, Vec<f64>) {
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut clusters: Vec<Vec<usize>> = (0..x.len()).map(|i| vec![i]).collect();
    let mut costs = Vec::new();
    let centroid = |c: &[usize]| -> Vec<f64> {
        let d = x[0].len();
        let mut m = vec![0.0; d];
        for &i in c {
            for j in 0..d {
                m[j] += x[i][j];
            }
        }
        m.iter().map(|v| v / c.len() as f64).collect()
    };
    while clusters.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let (ca, cb) = (centroid(&clusters[a]), centroid(&clusters[b]));
                let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
                let dist: f64 = ca.iter().zip(&cb).map(|(p, q)| (p - q) * (p - q)).sum();
                let cost = na * nb / (na + nb) * dist;
                if cost < best.0 - 1e-12 {
                    best = (cost, a, b);
                }
            }
        }
        if best.0 > tau {
            break;
        }
        let moved = clusters.remove(best.2);
        clusters[best.1].extend(moved);
        costs.push(best.0);
    }
    let mut labels = vec![0; x.len()];
    for (k, c) in clusters.iter().enumerate() {
        for &i in c {
            labels[i] = k;
        }
    }
    (labels, costs)
}

fn check_cover(p: &RegionPartition) {
    let m = p.membership();
    assert_eq!(m.len(), p.num_regions());
    for i in 0..p.num_tokens() {
        assert_eq!(m.iter().filter(|row| row[i]).count(), 1, "token {i}");
    }
    assert!(m.iter().all(|row| row.iter().any(|&b| b)));
}

#[test]
fn ward_matches_reference_on_16x8() {
    let f = gaussian_grid(128, 8, 42);
    let (p, merges) = agglomerate(&f, (16, 8), AgglomerativeConfig::with_tau(0.5)).unwrap();
    let (labels, costs) = ward_reference(&f, 0.5);
    let q = RegionPartition::from_labels(PartitionMethod::Agglomerative, (16, 8), &labels).unwrap();
    assert_eq!(p, q);
    assert_eq!(merges.len(), costs.len());
    for (m, c) in merges.iter().zip(&costs) {
        assert!((m.cost - c).abs() < 1e-9, "{} vs {c}", m.cost);
    }
    assert!(p.num_regions() > 1 && p.num_regions() < 128);
}

#[test]
fn ward_identical_and_orthogonal() {
    let same = vec![vec![1.0, 2.0]; 4];
    assert_eq!(cluster_agglomerative(&same, (2, 2), AgglomerativeConfig::with_tau(0.5)).unwrap().num_regions(), 1);
    let f = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    let p = cluster_agglomerative(&f, (2, 2), AgglomerativeConfig::with_tau(0.5)).unwrap();
    assert_eq!(p.labels(), &[0, 1, 0, 1]);
}

#[test]
fn ward_errors() {
    let f = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
    assert!(matches!(
        cluster_agglomerative(&f, (1, 2), AgglomerativeConfig::with_tau(0.5)),
        Err(vstream_core::Error::ZeroNormFeature { row: 1 })
    ));
    let f = vec![vec![1.0, f64::NAN], vec![0.0, 1.0]];
    assert!(cluster_agglomerative(&f, (1, 2), AgglomerativeConfig::with_tau(0.5)).is_err());
}

#[test]
fn k_clamps() {
    let f = gaussian_grid(36, 4, 3);
    let free = cluster_agglomerative(&f, (6, 6), AgglomerativeConfig::with_tau(0.5)).unwrap().num_regions();
    let mut cfg = AgglomerativeConfig::with_tau(0.5);
    cfg.k_max = Some(free - 2);
    assert_eq!(cluster_agglomerative(&f, (6, 6), cfg).unwrap().num_regions(), free - 2);
    let mut cfg = AgglomerativeConfig::with_tau(1.9);
    cfg.k_min = Some(5);
    assert_eq!(cluster_agglomerative(&f, (6, 6), cfg).unwrap().num_regions(), 5);
}

#[test]
fn random_blocks_are_exact_rectangles() {
    let p = partition_random_blocks((8, 8), 4, 42).unwrap();
    assert_eq!(p.num_regions(), 4);
    check_cover(&p);
    for k in 0..4 {
        let cells = p.region(k);
        let rows: Vec<usize> = cells.iter().map(|i| i / 8).collect();
        let cols: Vec<usize> = cells.iter().map(|i| i % 8).collect();
        let (r0, r1) = (*rows.iter().min().unwrap(), *rows.iter().max().unwrap());
        let (c0, c1) = (*cols.iter().min().unwrap(), *cols.iter().max().unwrap());
        assert_eq!(cells.len(), (r1 - r0 + 1) * (c1 - c0 + 1), "region {k} is not a filled rectangle");
    }
    assert_eq!(partition_random_blocks((2, 2), 4, 1).unwrap().num_regions(), 4);
    assert_eq!(partition_random_blocks((3, 3), 1, 1).unwrap().num_regions(), 1);
    assert!(partition_random_blocks((2, 2), 5, 1).is_err());
    assert_eq!(partition_random_blocks((8, 8), 6, 9).unwrap(), partition_random_blocks((8, 8), 6, 9).unwrap());
}

#[test]
fn voronoi_matches_nearest_site() {
    for (grid, k) in [((6, 6), 9), ((4, 4), 4), ((8, 8), 16), ((5, 7), 6)] {
        let p = partition_voronoi(grid, k).unwrap();
        let sites = voronoi_sites(grid, k).unwrap();
        assert_eq!(sites.len(), k);
        let mut labels = Vec::new();
        for r in 0..grid.0 {
            for c in 0..grid.1 {
                let d = |s: &(f64, f64)| (s.0 - r as f64).powi(2) + (s.1 - c as f64).powi(2);
                let mut best = 0;
                for (i, s) in sites.iter().enumerate() {
                    if d(s) < d(&sites[best]) {
                        best = i;
                    }
                }
                labels.push(best);
            }
        }
        let q = RegionPartition::from_labels(PartitionMethod::Voronoi, grid, &labels).unwrap();
        assert_eq!(p, q, "{grid:?} K={k}");
    }
    let quadrants = partition_voronoi((4, 4), 4).unwrap();
    assert_eq!(quadrants.region(0), &[0, 1, 4, 5]);
    assert_eq!(partition_voronoi((3, 3), 1).unwrap().num_regions(), 1);
    assert!(partition_voronoi((2, 2), 5).is_err());
}

#[test]
fn kmeans_cases() {
    let f = gaussian_grid(12, 3, 5);
    let r = cluster_kmeans(&f, (3, 4), 12, 1, 50).unwrap();
    assert_eq!(r.partition.num_regions(), 12);
    assert!(r.inertia.abs() < 1e-12);

    let r = cluster_kmeans(&f, (3, 4), 1, 1, 50).unwrap();
    let norm: Vec<Vec<f64>> = f
        .iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    for j in 0..3 {
        let mean = norm.iter().map(|v| v[j]).sum::<f64>() / 12.0;
        assert!((r.centroids[0][j] - mean).abs() < 1e-12);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut blobs = Vec::new();
    let mut truth = Vec::new();
    for i in 0..20 {
        let side = i % 2;
        let centre = if side == 0 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
        blobs.push(centre.iter().map(|c| c + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect());
        truth.push(side);
    }
    let r = cluster_kmeans(&blobs, (4, 5), 2, 3, 100).unwrap();
    for k in 0..2 {
        let sides: Vec<usize> = r.partition.region(k).iter().map(|&i| truth[i]).collect();
        assert!(sides.iter().all(|&s| s == sides[0]), "impure cluster {k}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_method_covers(seed in 0u64..10_000, rows in 1usize..7, cols in 1usize..7, kf in 0.0f64..1.0, tau in 0.05f64..1.95) {
        let m = rows * cols;
        let k = 1 + (kf * (m - 1) as f64) as usize;
        let f = gaussian_grid(m, 4, seed);
        check_cover(&cluster_agglomerative(&f, (rows, cols), AgglomerativeConfig::with_tau(tau)).unwrap());
        check_cover(&partition_random_blocks((rows, cols), k, seed).unwrap());
        check_cover(&cluster_kmeans(&f, (rows, cols), k, seed, 30).unwrap().partition);
        if let Ok(p) = partition_voronoi((rows, cols), k) {
            check_cover(&p);
        }
        let t = RegionPartition::tokenwise((rows, cols)).unwrap();
        prop_assert_eq!(t.num_regions(), m);
        for i in 0..m {
            prop_assert_eq!(t.region(i), &[i][..]);
        }
    }

    #[test]
    fn k_monotone_in_tau(seed in 0u64..10_000, t1 in 0.05f64..1.9, dt in 0.0f64..0.5) {
        let f = gaussian_grid(30, 5, seed);
        let t2 = (t1 + dt).min(1.99);
        let k1 = cluster_agglomerative(&f, (5, 6), AgglomerativeConfig::with_tau(t1)).unwrap().num_regions();
        let k2 = cluster_agglomerative(&f, (5, 6), AgglomerativeConfig::with_tau(t2)).unwrap().num_regions();
        prop_assert!(k1 >= k2);
    }

    #[test]
    fn scale_invariant(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let f = gaussian_grid(20, 4, seed);
        let g: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
        let cfg = AgglomerativeConfig::with_tau(0.5);
        prop_assert_eq!(
            cluster_agglomerative(&f, (4, 5), cfg).unwrap().labels().to_vec(),
            cluster_agglomerative(&g, (4, 5), cfg).unwrap().labels().to_vec()
        );
    }
}
