//! Point-set reduction and cleanup: farthest point sampling, z-order
//! windowed sampling, DBSCAN, distance pruning and mask denoising.

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::frame::{InstanceMask, PointFrame};
use crate::geometry::percentile_rank;
use crate::scalar::Scalar;

fn to_f64<T: Scalar>(points: &[[T; 3]]) -> Vec<[f64; 3]> {
    points.iter().map(|p| p.map(|v| v.as_f64())).collect()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy farthest point sampling of `m` indices starting at `start`.
/// Ties go to the lowest index.
pub fn ifps<T: Scalar>(points: &[[T; 3]], m: usize, start: usize) -> Result<Vec<usize>> {
    ifps_f64(&to_f64(points), m, start)
}

fn ifps_f64(pts: &[[f64; 3]], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = pts.len();
    if m == 0 || m > n {
        return Err(Error::Config(format!("cannot sample {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::Index {
            what: "ifps start",
            index: start,
            limit: n,
        });
    }
    let mut mind = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut cur = start;
    loop {
        out.push(cur);
        mind[cur] = -1.0;
        if out.len() == m {
            return Ok(out);
        }
        let c = pts[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if mind[i] < 0.0 {
                continue;
            }
            let d = dist2(&c, p);
            if d < mind[i] {
                mind[i] = d;
            }
            if mind[i] > best_d {
                best_d = mind[i];
                best = i;
            }
        }
        cur = best;
    }
}

/// Bits per axis of the z-order quantization.
pub const ZORDER_BITS: u32 = 21;

/// Interleaves the low 21 bits of each axis: bit `i` of x goes to bit
/// `3i`, of y to `3i + 1`, of z to `3i + 2`.
pub fn interleave3(x: u32, y: u32, z: u32) -> u64 {
    fn spread(v: u32) -> u64 {
        let mut v = u64::from(v) & 0x1f_ffff;
        v = (v | v << 32) & 0x001f_0000_0000_ffff;
        v = (v | v << 16) & 0x001f_0000_ff00_00ff;
        v = (v | v << 8) & 0x100f_00f0_0f00_f00f;
        v = (v | v << 4) & 0x10c3_0c30_c30c_30c3;
        v = (v | v << 2) & 0x1249_2492_4924_9249;
        v
    }
    spread(x) | spread(y) << 1 | spread(z) << 2
}

/// Z-order keys of points quantized within their bounding box.
pub fn zorder_keys<T: Scalar>(points: &[[T; 3]]) -> Vec<u64> {
    let pts = to_f64(points);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let top = f64::from((1u32 << ZORDER_BITS) - 1);
    let q = |v: f64, a: usize| -> u32 {
        let span = hi[a] - lo[a];
        if span > 0.0 {
            ((v - lo[a]) / span * top).floor().clamp(0.0, top) as u32
        } else {
            0
        }
    };
    pts.iter().map(|p| interleave3(q(p[0], 0), q(p[1], 1), q(p[2], 2))).collect()
}

/// Sorts points by z-order key, splits them into `windows` contiguous runs
/// and runs farthest point sampling inside each run for its share of `m`.
/// Remainders go to the earliest windows.
pub fn zorder_window_sample<T: Scalar>(points: &[[T; 3]], m: usize, windows: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if windows == 0 {
        return Err(Error::Config("zero sampling windows".into()));
    }
    if m == 0 || m > n {
        return Err(Error::Config(format!("cannot sample {m} of {n} points")));
    }
    let keys = zorder_keys(points);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (keys[i], i));
    let sizes = split_even(n, windows);
    let mut shares: Vec<usize> = split_even(m, windows);
    let mut spill = 0;
    for (s, &size) in shares.iter_mut().zip(&sizes) {
        *s += spill;
        spill = s.saturating_sub(size);
        *s -= spill;
    }
    let pts = to_f64(points);
    let mut out = Vec::with_capacity(m);
    let mut begin = 0;
    for (&size, &share) in sizes.iter().zip(&shares) {
        let mut window: Vec<usize> = order[begin..begin + size].to_vec();
        begin += size;
        if share == 0 {
            continue;
        }
        window.sort_unstable();
        let local: Vec<[f64; 3]> = window.iter().map(|&i| pts[i]).collect();
        out.extend(ifps_f64(&local, share, 0)?.into_iter().map(|j| window[j]));
    }
    Ok(out)
}

fn split_even(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// Noise label returned by [`dbscan`].
pub const NOISE: i32 = -1;

/// Density clustering. Points are visited in index order; clusters are
/// numbered from 0 in discovery order; border points join the first
/// cluster that reaches them.
pub fn dbscan<T: Scalar>(points: &[[T; 3]], eps: f64, min_pts: usize) -> Result<Vec<i32>> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(Error::Config(format!("dbscan eps={eps}, min_pts={min_pts}")));
    }
    let pts = to_f64(points);
    let cell = |p: &[f64; 3]| p.map(|v| (v / eps).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in pts.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let eps2 = eps * eps;
    let neighbors = |i: usize, out: &mut Vec<usize>| {
        out.clear();
        let c = cell(&pts[i]);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(v) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        out.extend(v.iter().copied().filter(|&j| dist2(&pts[i], &pts[j]) <= eps2));
                    }
                }
            }
        }
    };
    const UNSEEN: i32 = i32::MIN;
    let mut labels = vec![UNSEEN; pts.len()];
    let mut cluster = 0;
    let mut nb = Vec::new();
    let mut queue = VecDeque::new();
    for i in 0..pts.len() {
        if labels[i] != UNSEEN {
            continue;
        }
        neighbors(i, &mut nb);
        if nb.len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = cluster;
        queue.extend(nb.iter().copied());
        while let Some(q) = queue.pop_front() {
            if labels[q] == NOISE {
                labels[q] = cluster;
            }
            if labels[q] != UNSEEN {
                continue;
            }
            labels[q] = cluster;
            neighbors(q, &mut nb);
            if nb.len() >= min_pts {
                queue.extend(nb.iter().copied());
            }
        }
        cluster += 1;
    }
    Ok(labels)
}

/// Indices of the cluster owning the clustered point nearest `centroid`.
/// With no clusters every index is kept.
pub fn keep_main_cluster<T: Scalar>(points: &[[T; 3]], labels: &[i32], centroid: [T; 3]) -> Vec<usize> {
    let c = centroid.map(|v| v.as_f64());
    let mut best: Option<(f64, i32)> = None;
    for (p, &l) in points.iter().zip(labels) {
        if l == NOISE {
            continue;
        }
        let d = dist2(&p.map(|v| v.as_f64()), &c);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, l));
        }
    }
    match best {
        Some((_, l)) => (0..labels.len()).filter(|&i| labels[i] == l).collect(),
        None => (0..labels.len()).collect(),
    }
}

fn distances<T: Scalar>(frame: &PointFrame<T>, centroid: [T; 3]) -> Vec<f64> {
    let c = centroid.map(|v| v.as_f64());
    frame.points.iter().map(|p| dist2(&p.map(|v| v.as_f64()), &c).sqrt()).collect()
}

/// Keeps points within `limit` of `centroid`.
pub fn prune_metric<T: Scalar>(frame: &PointFrame<T>, centroid: [T; 3], limit: f64) -> PointFrame<T> {
    let d = distances(frame, centroid);
    frame.filter(|i, _| d[i] <= limit)
}

/// Keeps points whose centroid distance lies within the `[lo, hi]`
/// nearest-rank percentile band, inclusive.
pub fn prune_percentile<T: Scalar>(frame: &PointFrame<T>, centroid: [T; 3], lo: f64, hi: f64) -> PointFrame<T> {
    if frame.is_empty() {
        return frame.clone();
    }
    let d = distances(frame, centroid);
    let mut sorted = d.clone();
    sorted.sort_by(f64::total_cmp);
    let (a, b) = (sorted[percentile_rank(d.len(), lo)], sorted[percentile_rank(d.len(), hi)]);
    frame.filter(|i, _| d[i] >= a && d[i] <= b)
}

/// 8-connected component label per pixel (`None` for unset pixels) and the
/// component count. Components are numbered in row-major discovery order.
pub fn connected_components(mask: &InstanceMask) -> (Vec<Option<u32>>, usize) {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![None; w * h];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || label[start].is_some() {
            continue;
        }
        label[start] = Some(count as u32);
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] && label[j].is_none() {
                        label[j] = Some(count as u32);
                        stack.push(j);
                    }
                }
            }
        }
        count += 1;
    }
    (label, count)
}

fn cross(o: [i64; 2], a: [i64; 2], b: [i64; 2]) -> i64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull of integer points, counter-clockwise, collinear points
/// dropped.
pub fn convex_hull(points: &[[i64; 2]]) -> Vec<[i64; 2]> {
    let mut p = points.to_vec();
    p.sort_unstable();
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut hull: Vec<[i64; 2]> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let base = hull.len();
        let iter: Box<dyn Iterator<Item = &[i64; 2]>> = if pass == 0 {
            Box::new(p.iter())
        } else {
            Box::new(p.iter().rev())
        };
        for &q in iter {
            while hull.len() >= base + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

/// Sets every pixel whose center lies inside or on the convex hull of the
/// set pixels.
pub fn fill_convex_hull(mask: &InstanceMask) -> InstanceMask {
    let pts: Vec<[i64; 2]> = mask.pixels().iter().map(|p| [p[0] as i64, p[1] as i64]).collect();
    let mut out = InstanceMask::empty(mask.width, mask.height);
    let hull = convex_hull(&pts);
    if hull.is_empty() {
        return out;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for q in &hull {
        x0 = x0.min(q[0]);
        y0 = y0.min(q[1]);
        x1 = x1.max(q[0]);
        y1 = y1.max(q[1]);
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = [x, y];
            let inside = match hull.len() {
                1 => p == hull[0],
                2 => cross(hull[0], hull[1], p) == 0,
                n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
            };
            if inside {
                out.set(x as usize, y as usize, true);
            }
        }
    }
    out
}

/// Drops 8-connected components smaller than `min_area` pixels, then
/// replaces what remains by its filled convex hull.
pub fn denoise_mask(mask: &InstanceMask, min_area: usize) -> InstanceMask {
    let (label, count) = connected_components(mask);
    let mut area = vec![0usize; count];
    for l in label.iter().flatten() {
        area[*l as usize] += 1;
    }
    let kept = InstanceMask {
        width: mask.width,
        height: mask.height,
        data: label.iter().map(|l| l.is_some_and(|l| area[l as usize] >= min_area)).collect(),
    };
    fill_convex_hull(&kept)
}
