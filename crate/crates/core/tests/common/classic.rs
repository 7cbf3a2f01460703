//! Straightforward reference versions of the classical point algorithms.

use std::collections::HashMap;

/// Farthest point sampling recomputing every distance from scratch.
pub fn brute_ifps(points: &[[f64; 3]], m: usize, start: usize) -> Vec<usize> {
    let d = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let near = chosen.iter().map(|&c| d(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| near > bd) {
                best = Some((near, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

/// Textbook DBSCAN with linear-scan range queries.
pub fn reference_dbscan(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<i32> {
    let range = |i: usize| -> Vec<usize> {
        (0..points.len())
            .filter(|&j| (0..3).map(|k| (points[i][k] - points[j][k]).powi(2)).sum::<f64>() <= eps * eps)
            .collect()
    };
    let mut label: Vec<Option<i32>> = vec![None; points.len()];
    let mut c = 0;
    for p in 0..points.len() {
        if label[p].is_some() {
            continue;
        }
        let n = range(p);
        if n.len() < min_pts {
            label[p] = Some(-1);
            continue;
        }
        label[p] = Some(c);
        let mut seeds: Vec<usize> = n.into_iter().filter(|&q| q != p).collect();
        let mut k = 0;
        while k < seeds.len() {
            let q = seeds[k];
            k += 1;
            if label[q] == Some(-1) {
                label[q] = Some(c);
            }
            if label[q].is_some() {
                continue;
            }
            label[q] = Some(c);
            let nq = range(q);
            if nq.len() >= min_pts {
                seeds.extend(nq);
            }
        }
        c += 1;
    }
    label.into_iter().map(|l| l.unwrap()).collect()
}

/// Same noise set and a one-to-one correspondence of cluster ids.
pub fn same_partition(a: &[i32], b: &[i32]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x < 0) != (y < 0) {
            return false;
        }
        if x < 0 {
            continue;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

/// Quantizes within the bounding box exactly as the sampler documents.
pub fn quantize(points: &[[f64; 3]]) -> Vec<[u32; 3]> {
    let top = ((1u64 << 21) - 1) as f64;
    let lo: [f64; 3] = std::array::from_fn(|a| points.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min));
    let hi: [f64; 3] = std::array::from_fn(|a| points.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max));
    points
        .iter()
        .map(|p| {
            std::array::from_fn(|a| {
                let span = hi[a] - lo[a];
                if span > 0.0 {
                    ((p[a] - lo[a]) / span * top).floor() as u32
                } else {
                    0
                }
            })
        })
        .collect()
}

/// The interleaved code as a most-significant-first bit string, z above y
/// above x at every level.
pub fn interleaved_bits(q: [u32; 3]) -> Vec<bool> {
    let mut bits = Vec::with_capacity(63);
    for level in (0..21).rev() {
        for axis in [2, 1, 0] {
            bits.push(q[axis] >> level & 1 == 1);
        }
    }
    bits
}
