mod common;

use common::classic::{brute_ifps, interleaved_bits, quantize, reference_dbscan, same_partition};
use convot_core::sampling::{dbscan, ifps, zorder_keys, zorder_window_sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<[f64; 3]> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..scale))).collect()
}

#[test]
fn ifps_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..60 {
        let n = rng.random_range(1..=120);
        let mut pts = cloud(&mut rng, n, 1.0);
        if n > 4 && rng.random_bool(0.3) {
            // Lattice points produce distance ties.
            for p in &mut pts {
                *p = p.map(|v| (v * 4.0).floor());
            }
        }
        let m = rng.random_range(1..=n);
        let start = rng.random_range(0..n);
        assert_eq!(ifps(&pts, m, start).unwrap(), brute_ifps(&pts, m, start));
    }
}

#[test]
fn dbscan_partitions_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..60 {
        let n = rng.random_range(0..150);
        let pts = cloud(&mut rng, n, 1.0);
        let eps = rng.random_range(0.03..0.3);
        let min_pts = rng.random_range(1..8);
        let got = dbscan(&pts, eps, min_pts).unwrap();
        assert!(same_partition(&got, &reference_dbscan(&pts, eps, min_pts)));
    }
}

#[test]
fn zorder_sort_matches_bit_string_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..30 {
        let n = rng.random_range(1..200);
        let pts = cloud(&mut rng, n, 10.0);
        let keys = zorder_keys(&pts);
        let q = quantize(&pts);
        let mut by_key: Vec<usize> = (0..n).collect();
        by_key.sort_by_key(|&i| (keys[i], i));
        let mut by_bits: Vec<usize> = (0..n).collect();
        by_bits.sort_by(|&i, &j| interleaved_bits(q[i]).cmp(&interleaved_bits(q[j])).then(i.cmp(&j)));
        assert_eq!(by_key, by_bits);
    }
}

#[test]
fn windowed_sampling_returns_distinct_indices() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..30 {
        let n = rng.random_range(1..300);
        let pts = cloud(&mut rng, n, 1.0);
        let m = rng.random_range(1..=n);
        let w = rng.random_range(1..10);
        let mut s = zorder_window_sample(&pts, m, w).unwrap();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), m);
        assert!(s.iter().all(|&i| i < n));
    }
}
