//! Camera-space geometry: pinhole projection, disparity conversion, surface
//! normals, normalization and augmentation.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::frame::{Image, InstanceMask, PersonSequence, PointFrame};
use crate::scalar::Scalar;

/// Pinhole intrinsics with a single focal length in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics<T> {
    pub f: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(f: T, cx: T, cy: T) -> Result<Self> {
        if !(f > T::zero()) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Config(format!("camera intrinsics f={f}, cx={cx}, cy={cy}")));
        }
        Ok(Self { f, cx, cy })
    }

    /// Camera-space point of pixel `(x, y)` at depth `z`.
    pub fn back_project(&self, x: T, y: T, z: T) -> [T; 3] {
        [(x - self.cx) * z / self.f, (y - self.cy) * z / self.f, z]
    }

    /// Pixel coordinates of a camera-space point; `None` behind the camera.
    pub fn project(&self, p: [T; 3]) -> Option<[T; 2]> {
        if !(p[2] > T::zero()) {
            return None;
        }
        Some([p[0] * self.f / p[2] + self.cx, p[1] * self.f / p[2] + self.cy])
    }
}

/// Lifts every masked pixel with a valid depth (finite, `> 0`) into camera
/// space. Also returns each point's source pixel `(x, y)`.
pub fn project_instance<T: Scalar>(
    depth: &Image<T>,
    mask: &InstanceMask,
    cam: &CameraIntrinsics<T>,
) -> Result<(PointFrame<T>, Vec<[u32; 2]>)> {
    if depth.width != mask.width || depth.height != mask.height {
        return Err(shape_err(
            "project_instance",
            format!(
                "depth {}x{} vs mask {}x{}",
                depth.width, depth.height, mask.width, mask.height
            ),
        ));
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let z = depth.get(x, y);
            if mask.get(x, y) && z.is_finite() && z > T::zero() {
                points.push(cam.back_project(T::of(x as f64), T::of(y as f64), z));
                pixels.push([x as u32, y as u32]);
            }
        }
    }
    Ok((PointFrame::from_points(points), pixels))
}

/// `S / (eps + d)` per pixel.
pub fn disparity_to_depth<T: Scalar>(disp: &Image<T>, scale: T, eps: T) -> Result<Image<T>> {
    if !(scale > T::zero()) || !(eps > T::zero()) {
        return Err(Error::Config(format!("disparity scale {scale}, eps {eps}")));
    }
    Ok(disp.map(|d| scale / (eps + d)))
}

/// Nearest-rank percentile: the value at sorted index `ceil(q/100 * n) - 1`.
pub fn percentile<T: Scalar>(values: &[T], q: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Empty("percentile"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(v[percentile_rank(v.len(), q)])
}

pub(crate) fn percentile_rank(n: usize, q: f64) -> usize {
    let r = (q / 100.0 * n as f64).ceil() as isize - 1;
    r.clamp(0, n as isize - 1) as usize
}

/// Clamps to the 5th..90th percentile band and rescales to `[0, 1]`.
/// A band of zero width yields all zeros.
pub fn normalize_ir<T: Scalar>(image: &Image<T>) -> Result<Image<T>> {
    let lo = percentile(&image.data, 5.0)?;
    let hi = percentile(&image.data, 90.0)?;
    if !(hi > lo) {
        return Ok(image.map(|_| T::zero()));
    }
    Ok(image.map(|v| (v.max(lo).min(hi) - lo) / (hi - lo)))
}

/// Per-point unit normals and the points whose neighborhood was degenerate.
#[derive(Clone, Debug)]
pub struct Normals<T> {
    pub normals: Vec<[T; 3]>,
    pub degenerate: Vec<bool>,
}

/// Fallback normal for neighborhoods of rank below two.
pub const FALLBACK_NORMAL: [f64; 3] = [0.0, 0.0, -1.0];

/// Local plane fit: the smallest-eigenvalue eigenvector of the covariance
/// of each point's `k` nearest neighbors (itself included), oriented so that
/// `n . p <= 0`.
pub fn estimate_normals<T: Scalar>(points: &[[T; 3]], k: usize) -> Result<Normals<T>> {
    let m = points.len();
    if k < 3 || m < k {
        return Err(Error::Config(format!("normal estimation with k={k} on {m} points")));
    }
    let pts: Vec<[f64; 3]> = points.iter().map(|p| p.map(|v| v.as_f64())).collect();
    let res: Vec<([T; 3], bool)> = (0..m)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(m),
            |buf: &mut Vec<(f64, usize)>, i| {
                buf.clear();
                buf.extend(pts.iter().enumerate().map(|(j, q)| (dist2(&pts[i], q), j)));
                buf.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite"));
                let nb = &buf[..k];
                let (n, degenerate) = plane_normal(nb.iter().map(|&(_, j)| pts[j]));
                let p = pts[i];
                let sign = if n[0] * p[0] + n[1] * p[1] + n[2] * p[2] > 0.0 { -1.0 } else { 1.0 };
                (n.map(|v| T::of(v * sign)), degenerate)
            },
        )
        .collect();
    let (normals, degenerate) = res.into_iter().unzip();
    Ok(Normals { normals, degenerate })
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn plane_normal(nb: impl Iterator<Item = [f64; 3]> + Clone) -> ([f64; 3], bool) {
    let n = nb.clone().count() as f64;
    let mut c = [0.0; 3];
    for p in nb.clone() {
        for a in 0..3 {
            c[a] += p[a] / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in nb {
        let d = nalgebra::Vector3::new(p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (mid, top) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(top > 1e-300) || mid <= 1e-12 * top {
        return (FALLBACK_NORMAL, true);
    }
    let v = eig.eigenvectors.column(order[0]);
    let len = v.norm();
    ([v[0] / len, v[1] / len, v[2] / len], false)
}

/// Per-person min-max normalization of each coordinate axis over all
/// frames. An axis with zero extent maps to 0.5.
pub fn minmax_normalize_sequence<T: Scalar>(mut person: PersonSequence<T>) -> Result<PersonSequence<T>> {
    let mut lo = [T::infinity(); 3];
    let mut hi = [T::neg_infinity(); 3];
    for p in person.points() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if person.point_count() == 0 {
        return Err(Error::Empty("minmax_normalize_sequence"));
    }
    let half = T::of(0.5);
    for p in person.points_mut() {
        for a in 0..3 {
            let span = hi[a] - lo[a];
            p[a] = if span > T::zero() {
                ((p[a] - lo[a]) / span).max(T::zero()).min(T::one())
            } else {
                half
            };
        }
    }
    Ok(person)
}

/// Rotation about the y axis through `pivot`, applied to every point (and
/// to the 3 feature columns at `normal_offset`, if given).
pub fn rotate_y<T: Scalar>(
    mut person: PersonSequence<T>,
    theta: T,
    pivot: [T; 3],
    normal_offset: Option<usize>,
) -> PersonSequence<T> {
    let (s, c) = theta.sin_cos();
    let rot = |x: T, z: T| (c * x + s * z, c * z - s * x);
    for frame in &mut person.frames {
        for p in &mut frame.points {
            let (x, z) = rot(p[0] - pivot[0], p[2] - pivot[2]);
            p[0] = x + pivot[0];
            p[2] = z + pivot[2];
        }
        if let Some(o) = normal_offset {
            let dim = frame.feature_dim;
            for row in frame.features.chunks_mut(dim) {
                let (x, z) = rot(row[o], row[o + 2]);
                row[o] = x;
                row[o + 2] = z;
            }
        }
    }
    person
}

/// Training-time augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotation angle is drawn from `[-max_angle, max_angle]`.
    pub max_angle: f64,
    pub jitter_sigma: f64,
    /// Jitter is clipped to `clip * sigma`.
    pub jitter_clip: f64,
    pub pivot: [f64; 3],
    pub normal_offset: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_angle: std::f64::consts::FRAC_PI_4,
            jitter_sigma: 0.005,
            jitter_clip: 3.0,
            pivot: [0.0; 3],
            normal_offset: None,
        }
    }
}

/// One random y-rotation for the whole sequence, then independent clipped
/// Gaussian jitter per point coordinate.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    person: PersonSequence<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> PersonSequence<T> {
    let theta = if cfg.max_angle > 0.0 {
        rng.random_range(-cfg.max_angle..=cfg.max_angle)
    } else {
        0.0
    };
    let mut person = rotate_y(person, T::of(theta), cfg.pivot.map(T::of), cfg.normal_offset);
    if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).expect("positive sigma");
        let clip = cfg.jitter_clip * cfg.jitter_sigma;
        for p in person.points_mut() {
            for v in p.iter_mut() {
                *v += T::of(normal.sample(rng).clamp(-clip, clip));
            }
        }
    }
    person
}
