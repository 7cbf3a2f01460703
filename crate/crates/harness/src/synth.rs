//! Synthetic action sequences from an articulated ellipsoid body.
//!
//! Every class shares the same body model; classes differ only in how the
//! joints move over time. Coordinates are camera space in metres with `y`
//! pointing down and `z` along the optical axis, like projected depth.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use convot_core::frame::{PersonSequence, PointFrame};
use convot_core::geometry::CameraIntrinsics;
use convot_core::{Image, Scalar};

use crate::error::{Error, Result};
use crate::seqfile::{save_sequence, write_manifest, ManifestEntry, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    RaiseArm,
    Wave,
    Squat,
    WalkInPlace,
    Handshake,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::RaiseArm,
        Action::Wave,
        Action::Squat,
        Action::WalkInPlace,
        Action::Handshake,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::RaiseArm => "raise-arm",
            Action::Wave => "wave",
            Action::Squat => "squat",
            Action::WalkInPlace => "walk-in-place",
            Action::Handshake => "handshake",
        }
    }

    pub fn persons(self) -> usize {
        if self == Action::Handshake {
            2
        } else {
            1
        }
    }
}

/// Body-part labels written alongside every point.
pub mod part {
    pub const HEAD: u16 = 1;
    pub const TORSO: u16 = 2;
    pub const UPPER_ARM: [u16; 2] = [3, 5];
    pub const FOREARM: [u16; 2] = [4, 6];
    pub const THIGH: [u16; 2] = [7, 9];
    pub const SHIN: [u16; 2] = [8, 10];
    pub const HAND: [u16; 2] = [11, 12];
    pub const FOOT: [u16; 2] = [13, 14];
    pub const COUNT: usize = 14;
}

/// Body proportions in metres.
#[derive(Clone, Copy, Debug)]
struct Body {
    torso: f64,
    shoulder_w: f64,
    hip_w: f64,
    upper_arm: f64,
    forearm: f64,
    thigh: f64,
    shin: f64,
    head_r: f64,
    arm_r: f64,
    leg_r: f64,
}

impl Body {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let s = rng.random_range(0.85..1.15);
        let mut j = || s * rng.random_range(0.95..1.05);
        Self {
            torso: 0.52 * j(),
            shoulder_w: 0.19 * j(),
            hip_w: 0.10 * j(),
            upper_arm: 0.30 * j(),
            forearm: 0.27 * j(),
            thigh: 0.44 * j(),
            shin: 0.42 * j(),
            head_r: 0.11 * j(),
            arm_r: 0.045 * j(),
            leg_r: 0.07 * j(),
        }
    }
}

/// Limb angles in radians. Arm directions are `(abduction, flexion)`;
/// legs are flexion only, the shin angle absolute rather than relative.
#[derive(Clone, Copy, Debug, Default)]
struct Pose {
    lean: f64,
    upper_arm: [(f64, f64); 2],
    forearm: [(f64, f64); 2],
    thigh: [f64; 2],
    shin: [f64; 2],
}

const LEFT: usize = 0;
const RIGHT: usize = 1;
const SIDE: [f64; 2] = [-1.0, 1.0];

/// Body frame: `x` right, `y` up, `z` forward.
fn arm_dir(side: f64, (abd, flex): (f64, f64)) -> [f64; 3] {
    [side * abd.sin(), -abd.cos() * flex.cos(), abd.cos() * flex.sin()]
}

fn leg_dir(flex: f64) -> [f64; 3] {
    [0.0, -flex.cos(), flex.sin()]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    a.map(|v| v * s)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    a.map(|v| v / n)
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [[f64; 3]; 3],
    radii: [f64; 3],
    label: u16,
}

impl Ellipsoid {
    fn sphere(center: [f64; 3], r: f64, label: u16) -> Self {
        Self {
            center,
            axes: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            radii: [r; 3],
            label,
        }
    }

    /// Spans `a..b` with the given cross-section radius.
    fn limb(a: [f64; 3], b: [f64; 3], r: f64, label: u16) -> Self {
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let axis = scale(d, 1.0 / len);
        let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let u = normalize(cross(axis, helper));
        let v = cross(axis, u);
        Self {
            center: scale(add(a, b), 0.5),
            axes: [u, axis, v],
            radii: [r, len / 2.0 + r * 0.5, r],
            label,
        }
    }

    /// Thomsen's approximation of the surface area.
    fn area(&self) -> f64 {
        let p = 1.6075;
        let [a, b, c] = self.radii.map(|r| r.powf(p));
        4.0 * PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let u = normalize(g);
        let mut p = self.center;
        for ((axis, r), ui) in self.axes.iter().zip(self.radii).zip(u) {
            p = add(p, scale(*axis, r * ui));
        }
        p
    }
}

fn body_parts(body: &Body, pose: &Pose) -> Vec<Ellipsoid> {
    let foot_h = 0.06;
    let reach = |l: usize| body.thigh * pose.thigh[l].cos() + body.shin * pose.shin[l].cos();
    let pelvis = [0.0, reach(LEFT).max(reach(RIGHT)) + foot_h, 0.0];
    let up = [0.0, pose.lean.cos(), pose.lean.sin()];
    let neck = add(pelvis, scale(up, body.torso));
    let mut parts = vec![
        Ellipsoid {
            center: scale(add(pelvis, neck), 0.5),
            axes: [[1.0, 0.0, 0.0], up, cross([1.0, 0.0, 0.0], up)],
            radii: [body.shoulder_w * 0.9, body.torso / 2.0 + 0.04, 0.11],
            label: part::TORSO,
        },
        Ellipsoid::sphere(add(neck, scale(up, body.head_r + 0.04)), body.head_r, part::HEAD),
    ];
    for l in [LEFT, RIGHT] {
        let side = SIDE[l];
        let shoulder = add(neck, [side * body.shoulder_w, -0.04, 0.0]);
        let elbow = add(shoulder, scale(arm_dir(side, pose.upper_arm[l]), body.upper_arm));
        let fore = arm_dir(side, pose.forearm[l]);
        let wrist = add(elbow, scale(fore, body.forearm));
        parts.push(Ellipsoid::limb(shoulder, elbow, body.arm_r, part::UPPER_ARM[l]));
        parts.push(Ellipsoid::limb(elbow, wrist, body.arm_r * 0.85, part::FOREARM[l]));
        parts.push(Ellipsoid::sphere(add(wrist, scale(fore, 0.06)), 0.05, part::HAND[l]));

        let hip = add(pelvis, [side * body.hip_w, 0.0, 0.0]);
        let knee = add(hip, scale(leg_dir(pose.thigh[l]), body.thigh));
        let ankle = add(knee, scale(leg_dir(pose.shin[l]), body.shin));
        parts.push(Ellipsoid::limb(hip, knee, body.leg_r, part::THIGH[l]));
        parts.push(Ellipsoid::limb(knee, ankle, body.leg_r * 0.8, part::SHIN[l]));
        parts.push(Ellipsoid::limb(
            add(ankle, [0.0, -0.03, -0.03]),
            add(ankle, [0.0, -0.03, 0.17]),
            0.04,
            part::FOOT[l],
        ));
    }
    parts
}

/// Per-sequence motion parameters.
#[derive(Clone, Debug)]
pub struct SyntheticActionSpec {
    pub action: Action,
    /// Source frame count `T'`.
    pub frames: usize,
    /// Points generated per person and frame.
    pub points: usize,
    pub cycles: f64,
    pub phase: f64,
    /// Rotation of the body (or pair) about the vertical axis.
    pub yaw: f64,
    /// Lateral offset and distance from the camera, metres.
    pub offset: [f64; 2],
    /// Gaussian surface noise, metres.
    pub noise: f64,
    pub seed: u64,
}

/// Draw ranges for [`SyntheticActionSpec::random`].
#[derive(Clone, Debug)]
pub struct SpecRanges {
    pub frames: (usize, usize),
    pub points: usize,
    pub max_yaw: f64,
    pub noise: f64,
}

impl Default for SpecRanges {
    fn default() -> Self {
        Self {
            frames: (24, 96),
            points: 640,
            max_yaw: 0.6,
            noise: 0.005,
        }
    }
}

impl SyntheticActionSpec {
    pub fn random(action: Action, ranges: &SpecRanges, rng: &mut ChaCha8Rng) -> Self {
        let (lo, hi) = ranges.frames;
        let cycles = match action {
            Action::RaiseArm => rng.random_range(1.0..2.0),
            Action::Wave => rng.random_range(3.0..6.0),
            Action::Squat => rng.random_range(1.0..2.5),
            Action::WalkInPlace => rng.random_range(2.0..4.0),
            Action::Handshake => rng.random_range(3.0..5.0),
        };
        Self {
            action,
            frames: rng.random_range(lo..=hi.max(lo)),
            points: ranges.points,
            cycles,
            phase: rng.random_range(0.0..2.0 * PI),
            yaw: rng.random_range(-ranges.max_yaw..=ranges.max_yaw),
            offset: [rng.random_range(-0.5..0.5), rng.random_range(2.5..3.5)],
            noise: ranges.noise,
            seed: rng.random(),
        }
    }
}

/// Slow idle sway added to every joint angle.
struct Sway {
    amp: [f64; 12],
    freq: [f64; 12],
    phase: [f64; 12],
}

impl Sway {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            amp: std::array::from_fn(|_| rng.random_range(0.0..0.06)),
            freq: std::array::from_fn(|_| rng.random_range(0.3..1.5)),
            phase: std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI)),
        }
    }

    fn at(&self, i: usize, t: f64) -> f64 {
        self.amp[i] * (2.0 * PI * self.freq[i] * t + self.phase[i]).sin()
    }
}

/// `0 -> 1 -> 0` raised-cosine pulse train.
fn pulse(x: f64) -> f64 {
    0.5 - 0.5 * x.cos()
}

fn pose_at(spec: &SyntheticActionSpec, sway: &Sway, t: f64) -> Pose {
    let w = 2.0 * PI * spec.cycles * t + spec.phase;
    let rest_upper = (0.1, 0.05);
    let rest_fore = (0.1, 0.2);
    let mut p = Pose {
        lean: 0.03,
        upper_arm: [rest_upper; 2],
        forearm: [rest_fore; 2],
        thigh: [0.0; 2],
        shin: [0.0; 2],
    };
    match spec.action {
        Action::RaiseArm => {
            let r = pulse(w);
            p.upper_arm[RIGHT] = (0.1, 2.9 * r);
            p.forearm[RIGHT] = (0.1, 2.9 * r + 0.15);
        }
        Action::Wave => {
            p.upper_arm[RIGHT] = (1.2, 0.3);
            p.forearm[RIGHT] = (PI - 0.35 + 0.45 * w.sin(), 0.2);
        }
        Action::Squat => {
            let d = pulse(w);
            p.lean = 0.03 + 0.5 * d;
            p.thigh = [1.6 * d; 2];
            p.shin = [-0.7 * d; 2];
            p.upper_arm = [(0.1, 1.4 * d); 2];
            p.forearm = [(0.1, 1.5 * d + 0.1); 2];
        }
        Action::WalkInPlace => {
            let s = w.sin();
            for (l, lift) in [(LEFT, s.max(0.0)), (RIGHT, (-s).max(0.0))] {
                p.thigh[l] = 1.0 * lift;
                p.shin[l] = -0.2 * lift;
            }
            p.upper_arm[LEFT] = (0.1, -0.4 * s);
            p.upper_arm[RIGHT] = (0.1, 0.4 * s);
            p.forearm[LEFT] = (0.1, -0.4 * s + 0.3);
            p.forearm[RIGHT] = (0.1, 0.4 * s + 0.3);
        }
        Action::Handshake => {
            // Reach out, pump, withdraw.
            let e = (t / 0.25).min(1.0).min((1.0 - t) / 0.2).max(0.0);
            let pump = 0.15 * (2.0 * PI * spec.cycles * t).sin() * e;
            p.upper_arm[RIGHT] = (-0.15 * e + 0.1 * (1.0 - e), 0.7 * e);
            p.forearm[RIGHT] = (-0.1 * e + 0.1 * (1.0 - e), 1.3 * e + pump + 0.2 * (1.0 - e));
        }
    }
    let mut i = 0;
    let mut next = || {
        i += 1;
        sway.at(i - 1, t)
    };
    p.lean += next() * 0.5;
    for l in [LEFT, RIGHT] {
        p.upper_arm[l].1 += next();
        p.forearm[l].1 += next();
        p.upper_arm[l].0 += next() * 0.5;
        p.thigh[l] += next() * 0.3;
        p.shin[l] += next() * 0.3;
    }
    p
}

/// Splits `total` proportionally to `weights` by largest remainder.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Body-frame point to camera space for a body at `origin` (metres, on
/// the floor) rotated by `yaw`.
fn to_camera(p: [f64; 3], yaw: f64, origin: [f64; 2]) -> [f64; 3] {
    const CAMERA_HEIGHT: f64 = 1.0;
    let (s, c) = yaw.sin_cos();
    let x = c * p[0] + s * p[2];
    let z = -s * p[0] + c * p[2];
    [x + origin[0], CAMERA_HEIGHT - p[1], z + origin[1]]
}

/// One or two person sequences for `spec`; deterministic in `spec.seed`.
pub fn generate_synthetic_sequence<T: Scalar>(spec: &SyntheticActionSpec) -> Vec<PersonSequence<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let persons = spec.action.persons();
    // Facing the camera means body +z points towards -z in camera space.
    let placements: Vec<(f64, [f64; 2])> = if persons == 1 {
        vec![(PI + spec.yaw, spec.offset)]
    } else {
        let sep = rng.random_range(0.75..0.95) / 2.0;
        let (s, c) = spec.yaw.sin_cos();
        let at = |d: f64| [spec.offset[0] + c * d, spec.offset[1] - s * d];
        vec![(FRAC_PI_2 + spec.yaw, at(-sep)), (-FRAC_PI_2 + spec.yaw, at(sep))]
    };
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite sigma");
    placements
        .iter()
        .enumerate()
        .map(|(id, &(yaw, origin))| {
            let body = Body::random(&mut rng);
            let sway = Sway::random(&mut rng);
            let frames = (0..spec.frames.max(1))
                .map(|f| {
                    let t = f as f64 / spec.frames.max(1) as f64;
                    let parts = body_parts(&body, &pose_at(spec, &sway, t));
                    let areas: Vec<f64> = parts.iter().map(Ellipsoid::area).collect();
                    let counts = apportion(spec.points, &areas);
                    let mut points = Vec::with_capacity(spec.points);
                    let mut labels = Vec::with_capacity(spec.points);
                    for (e, &n) in parts.iter().zip(&counts) {
                        for _ in 0..n {
                            let p = to_camera(e.sample(&mut rng), yaw, origin);
                            points.push(p.map(|v| T::of(v + noise.sample(&mut rng))));
                            labels.push(e.label);
                        }
                    }
                    PointFrame::new(points, Vec::new(), 0, labels).expect("consistent lengths")
                })
                .collect();
            PersonSequence::new(frames, id as u32)
        })
        .collect()
}

/// Dataset layout for [`generate_dataset`].
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub ranges: SpecRanges,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            test: 100,
            ranges: SpecRanges::default(),
            seed: 0,
        }
    }
}

/// Spec of sequence `i` in split `split`; class is `i mod 5`.
pub fn dataset_spec(cfg: &SynthConfig, split: Split, i: usize) -> SyntheticActionSpec {
    let stream = match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((stream as u64) << 32) | i as u64);
    SyntheticActionSpec::random(Action::ALL[i % Action::ALL.len()], &cfg.ranges, &mut rng)
}

/// Writes one sequence file per sample plus the manifest into `dir`.
pub fn generate_dataset(dir: &Path, cfg: &SynthConfig) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let jobs: Vec<(Split, usize)> = [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)]
        .iter()
        .flat_map(|&(s, n)| (0..n).map(move |i| (s, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(split, i)| {
            let spec = dataset_spec(cfg, split, i);
            let file = format!("{}_{i:04}.hpcs", split.name());
            save_sequence(&dir.join(&file), &generate_synthetic_sequence::<f32>(&spec))?;
            Ok(ManifestEntry {
                file,
                label: spec.action.index(),
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(dir, &entries)?;
    Ok(entries)
}

/// Rendered views of one frame.
#[derive(Clone, Debug)]
pub struct Rendering {
    /// Depth in metres; 0 where nothing was hit.
    pub depth: Image<f32>,
    /// Instance ids starting at 1; 0 is background.
    pub instances: Image<u8>,
    pub parts: Image<u8>,
}

/// Z-buffered point splatting of camera-space clouds, one per instance.
pub fn render<T: Scalar>(
    persons: &[&PointFrame<T>],
    cam: &CameraIntrinsics<f64>,
    width: usize,
    height: usize,
    splat: usize,
) -> Rendering {
    let mut depth = Image::filled(width, height, f32::INFINITY);
    let mut instances = Image::filled(width, height, 0u8);
    let mut parts = Image::filled(width, height, 0u8);
    for (id, frame) in persons.iter().enumerate() {
        for (p, &label) in frame.points.iter().zip(&frame.labels) {
            let p = p.map(|v| v.as_f64());
            let Some([u, v]) = cam.project(p) else { continue };
            let (u, v) = (u.round() as i64, v.round() as i64);
            let r = splat as i64 / 2;
            for y in v - r..=v - r + splat as i64 - 1 {
                for x in u - r..=u - r + splat as i64 - 1 {
                    if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                        continue;
                    }
                    let (x, y) = (x as usize, y as usize);
                    if (p[2] as f32) < depth.get(x, y) {
                        depth.set(x, y, p[2] as f32);
                        instances.set(x, y, id as u8 + 1);
                        parts.set(x, y, label as u8);
                    }
                }
            }
        }
    }
    Rendering {
        depth: depth.map(|d| if d.is_finite() { d } else { 0.0 }),
        instances,
        parts,
    }
}
