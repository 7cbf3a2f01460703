//! Depth maps and instance masks to person point-cloud sequences.
//!
//! A clip directory holds, per frame `i` (zero-padded to four digits):
//!
//! - `depth_i.png`: 16-bit depth in sensor units, or `disparity_i.dmap`
//!   for monocular estimates;
//! - `instances_i.png`: 8-bit instance ids, 0 for background;
//! - optionally `parts_i.png` (8-bit part labels), `ir_i.png` (8/16-bit
//!   infrared) and `rgb_i.png`.
//!
//! An optional `scores.tsv` lists `frame<TAB>instance<TAB>score` mask
//! confidences; unlisted masks score 1.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use convot_core::geometry::{
    disparity_to_depth, estimate_normals, normalize_ir, project_instance, CameraIntrinsics, FALLBACK_NORMAL,
};
use convot_core::model::Appearance;
use convot_core::sampling::{dbscan, denoise_mask, ifps, keep_main_cluster, prune_metric, prune_percentile, zorder_window_sample};
use convot_core::tracking::{fit_bbox, Tracker, TrackerConfig};
use convot_core::{Image, InstanceMask, PersonSequence, PointFrame, Scalar};

use crate::error::{Error, Result};
use crate::imageio::{read_dmap, read_gray, read_rgb};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthSource {
    /// Metric sensor depth; raw levels times `unit` give meters.
    Sensor { unit: f64 },
    /// Monocular disparity, converted as `scale / (eps + d)`.
    Monocular { scale: f64, eps: f64 },
}

#[derive(Clone, Debug)]
pub struct PreprocessConfig {
    pub camera: CameraIntrinsics<f64>,
    pub source: DepthSource,
    pub min_area: usize,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    /// Sensor path: maximum distance from the body centroid.
    pub prune_limit: f64,
    /// Monocular path: kept band of centroid-distance percentiles.
    pub percentile_band: (f64, f64),
    pub points: usize,
    /// Monocular path: z-order windows for sampling.
    pub windows: usize,
    /// Neighbors for plane-fit normals; `None` skips normals.
    pub normal_k: Option<usize>,
    pub appearance: Appearance,
    pub tracker: TrackerConfig,
    pub max_persons: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            camera: CameraIntrinsics {
                f: 365.0,
                cx: 256.0,
                cy: 212.0,
            },
            source: DepthSource::Sensor { unit: 1e-3 },
            min_area: 64,
            dbscan_eps: 0.05,
            dbscan_min_pts: 8,
            prune_limit: 1.5,
            percentile_band: (5.0, 90.0),
            points: 2048,
            windows: 8,
            normal_k: Some(16),
            appearance: Appearance::None,
            tracker: TrackerConfig::default(),
            max_persons: 2,
        }
    }
}

impl PreprocessConfig {
    pub fn feature_dim(&self) -> usize {
        3 * usize::from(self.normal_k.is_some()) + self.appearance.width()
    }
}

/// Everything known about one frame, already decoded.
#[derive(Clone, Debug)]
pub struct FrameInputs {
    /// Depth in output units; non-positive or non-finite means no return.
    pub depth: Image<f64>,
    pub instances: Image<u8>,
    pub scores: HashMap<u8, f64>,
    pub parts: Option<Image<u8>>,
    /// Already normalized to `[0, 1]`.
    pub intensity: Option<Image<f64>>,
    pub rgb: Option<Image<[u8; 3]>>,
}

/// Frame-by-frame accumulation of tracked person clouds.
pub struct Preprocessor<T> {
    config: PreprocessConfig,
    camera: CameraIntrinsics<T>,
    tracker: Tracker,
    tracks: BTreeMap<u32, Vec<PointFrame<T>>>,
    frames: usize,
}

impl<T: Scalar> Preprocessor<T> {
    pub fn new(config: PreprocessConfig) -> Result<Self> {
        let c = config.camera;
        let camera = CameraIntrinsics::new(T::of(c.f), T::of(c.cx), T::of(c.cy))?;
        if config.points == 0 || config.windows == 0 || config.max_persons == 0 {
            return Err(Error::Invalid("points, windows and max_persons must be positive".into()));
        }
        Ok(Self {
            tracker: Tracker::new(config.tracker),
            config,
            camera,
            tracks: BTreeMap::new(),
            frames: 0,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Adds one frame; returns how many instances produced a cloud.
    pub fn push(&mut self, inputs: &FrameInputs) -> Result<usize> {
        let (w, h) = (inputs.depth.width, inputs.depth.height);
        let same = |iw: usize, ih: usize| iw == w && ih == h;
        if !same(inputs.instances.width, inputs.instances.height)
            || inputs.parts.as_ref().is_some_and(|p| !same(p.width, p.height))
            || inputs.intensity.as_ref().is_some_and(|p| !same(p.width, p.height))
            || inputs.rgb.as_ref().is_some_and(|p| !same(p.width, p.height))
        {
            return Err(Error::Invalid(format!("frame {}: image sizes differ", self.frames)));
        }
        let mut ids: Vec<u8> = inputs.instances.data.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut masks = Vec::new();
        let mut detections = Vec::new();
        for id in ids {
            let raw = InstanceMask {
                width: w,
                height: h,
                data: inputs.instances.data.iter().map(|&v| v == id).collect(),
            };
            let mask = denoise_mask(&raw, self.config.min_area);
            if mask.area() == 0 {
                continue;
            }
            detections.push(fit_bbox(&mask, inputs.scores.get(&id).copied())?);
            masks.push(mask);
        }
        let assigned = self.tracker.update(&detections);
        let depth = inputs.depth.map(T::of);
        let mut produced = 0;
        for (mask, track) in masks.iter().zip(assigned) {
            let Some(track) = track else { continue };
            if let Some(cloud) = self.person_cloud(&depth, mask, inputs)? {
                self.tracks.entry(track).or_default().push(cloud);
                produced += 1;
            }
        }
        self.frames += 1;
        Ok(produced)
    }

    fn person_cloud(&self, depth: &Image<T>, mask: &InstanceMask, inputs: &FrameInputs) -> Result<Option<PointFrame<T>>> {
        let cfg = &self.config;
        let (raw, pixels) = project_instance(depth, mask, &self.camera)?;
        let Some(centroid) = raw.centroid() else {
            return Ok(None);
        };
        let labels: Vec<u16> = match &inputs.parts {
            Some(p) => pixels.iter().map(|&[x, y]| p.get(x as usize, y as usize) as u16).collect(),
            None => vec![0; raw.len()],
        };
        let mut appearance = Vec::with_capacity(raw.len() * cfg.appearance.width());
        for &[x, y] in &pixels {
            let (x, y) = (x as usize, y as usize);
            match cfg.appearance {
                Appearance::None => {}
                Appearance::Intensity => {
                    let ir = inputs
                        .intensity
                        .as_ref()
                        .ok_or_else(|| Error::Invalid("intensity features need infrared images".into()))?;
                    appearance.push(T::of(ir.get(x, y)));
                }
                Appearance::Rgb => {
                    let rgb = inputs
                        .rgb
                        .as_ref()
                        .ok_or_else(|| Error::Invalid("color features need RGB images".into()))?;
                    appearance.extend(rgb.get(x, y).map(|c| T::of(c as f64 / 255.0)));
                }
            }
        }
        let frame = PointFrame::new(raw.points, appearance, cfg.appearance.width(), labels)?;

        let clusters = dbscan(&frame.points, cfg.dbscan_eps, cfg.dbscan_min_pts)?;
        let body = frame.select(&keep_main_cluster(&frame.points, &clusters, centroid));
        let (body, sampled) = match cfg.source {
            DepthSource::Sensor { .. } => {
                let c = body.centroid().unwrap_or(centroid);
                let body = prune_metric(&body, c, cfg.prune_limit);
                let idx = (body.len() > cfg.points)
                    .then(|| ifps(&body.points, cfg.points, 0))
                    .transpose()?;
                (body, idx)
            }
            DepthSource::Monocular { .. } => {
                let (lo, hi) = cfg.percentile_band;
                let body = prune_percentile(&body, centroid, lo, hi);
                let idx = (body.len() > cfg.points)
                    .then(|| zorder_window_sample(&body.points, cfg.points, cfg.windows))
                    .transpose()?;
                (body, idx)
            }
        };
        let body = match sampled {
            Some(idx) => body.select(&idx),
            None => body,
        };
        if body.is_empty() {
            return Ok(None);
        }
        let Some(k) = cfg.normal_k else {
            return Ok(Some(body));
        };
        let normals: Vec<T> = if body.len() >= k {
            estimate_normals(&body.points, k)?.normals.into_iter().flatten().collect()
        } else {
            (0..body.len()).flat_map(|_| FALLBACK_NORMAL.map(T::of)).collect()
        };
        let dim = body.feature_dim;
        let bare = PointFrame::new(body.points, Vec::new(), 0, body.labels)?;
        Ok(Some(bare.with_features(&normals, 3)?.with_features(&body.features, dim)?))
    }

    /// The longest tracks (at most `max_persons`), in track-id order.
    pub fn finish(self) -> Vec<PersonSequence<T>> {
        let mut tracks: Vec<(u32, Vec<PointFrame<T>>)> = self.tracks.into_iter().collect();
        tracks.sort_by_key(|(id, frames)| (std::cmp::Reverse(frames.len()), *id));
        tracks.truncate(self.config.max_persons);
        tracks.sort_by_key(|(id, _)| *id);
        tracks
            .into_iter()
            .map(|(id, frames)| PersonSequence::new(frames, id))
            .collect()
    }
}

fn frame_file(dir: &Path, stem: &str, i: usize, ext: &str) -> std::path::PathBuf {
    dir.join(format!("{stem}_{i:04}.{ext}"))
}

fn read_scores(dir: &Path) -> Result<HashMap<(usize, u8), f64>> {
    let path = dir.join("scores.tsv");
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::format(&path, format!("line {}: expected frame, instance, score", n + 1));
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [frame, id, score] = f[..] else { return Err(bad()) };
        let score: f64 = score.parse().map_err(|_| bad())?;
        if !(0.0..=1.0).contains(&score) {
            return Err(bad());
        }
        out.insert((frame.parse().map_err(|_| bad())?, id.parse().map_err(|_| bad())?), score);
    }
    Ok(out)
}

/// Decodes frame `i` of a clip directory; `None` once no depth file exists.
pub fn load_frame(dir: &Path, i: usize, cfg: &PreprocessConfig, scores: &HashMap<(usize, u8), f64>) -> Result<Option<FrameInputs>> {
    let depth = match cfg.source {
        DepthSource::Sensor { unit } => {
            let path = frame_file(dir, "depth", i, "png");
            if !path.exists() {
                return Ok(None);
            }
            read_gray(&path)?.map(|v| v as f64 * unit)
        }
        DepthSource::Monocular { scale, eps } => {
            let path = frame_file(dir, "disparity", i, "dmap");
            if !path.exists() {
                return Ok(None);
            }
            disparity_to_depth(&read_dmap(&path)?.map(|v| v as f64), scale, eps)?
        }
    };
    let instances = read_gray(&frame_file(dir, "instances", i, "png"))?;
    if instances.data.iter().any(|&v| v > 255) {
        return Err(Error::Invalid(format!("frame {i}: instance ids must fit in 8 bits")));
    }
    let optional = |stem: &str| {
        let p = frame_file(dir, stem, i, "png");
        p.exists().then_some(p)
    };
    let parts = optional("parts").map(|p| read_gray(&p)).transpose()?.map(|img| img.map(|v| v.min(255) as u8));
    let intensity = match (cfg.appearance, optional("ir")) {
        (Appearance::Intensity, Some(p)) => Some(normalize_ir(&read_gray(&p)?.map(|v| v as f64))?),
        _ => None,
    };
    let rgb = match (cfg.appearance, optional("rgb")) {
        (Appearance::Rgb, Some(p)) => Some(read_rgb(&p)?),
        _ => None,
    };
    let scores = scores
        .iter()
        .filter(|((f, _), _)| *f == i)
        .map(|((_, id), &s)| (*id, s))
        .collect();
    Ok(Some(FrameInputs {
        depth,
        instances: instances.map(|v| v as u8),
        scores,
        parts,
        intensity,
        rgb,
    }))
}

/// Runs the whole pipeline over a clip directory.
pub fn preprocess_clip<T: Scalar>(dir: &Path, cfg: &PreprocessConfig) -> Result<Vec<PersonSequence<T>>> {
    let scores = read_scores(dir)?;
    let mut pre = Preprocessor::new(cfg.clone())?;
    let mut i = 0;
    while let Some(frame) = load_frame(dir, i, cfg, &scores)? {
        pre.push(&frame)?;
        i += 1;
    }
    if i == 0 {
        return Err(Error::Invalid(format!("{}: no frames found", dir.display())));
    }
    Ok(pre.finish())
}
