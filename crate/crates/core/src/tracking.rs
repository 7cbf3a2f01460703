//! Identity assignment across frames from per-frame instance boxes.
//!
//! Two-stage greedy IoU association: high-confidence detections are
//! matched first, then the remaining tracks are offered the
//! low-confidence ones. Tracks keep their last matched box as the
//! prediction for the next frame.

use crate::error::{Error, Result};
use crate::frame::InstanceMask;

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl BBox {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::Config(format!("empty box ({x0},{y0},{x1},{y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> i64 {
        i64::from(self.x1 - self.x0) * i64::from(self.y1 - self.y0)
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = i64::from((a.x1.min(b.x1) - a.x0.max(b.x0)).max(0));
    let h = i64::from((a.y1.min(b.y1) - a.y0.max(b.y0)).max(0));
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Tightest box around the set pixels of `mask`.
pub fn fit_bbox(mask: &InstanceMask, score: Option<f64>) -> Result<Detection> {
    let px = mask.pixels();
    if px.is_empty() {
        return Err(Error::Empty("fit_bbox"));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for [x, y] in px {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    Ok(Detection {
        bbox: BBox::new(x0 as i32, y0 as i32, x1 as i32, y1 as i32)?,
        score: score.unwrap_or(1.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Track {
    pub id: u32,
    pub bbox: BBox,
    /// Frames since the last match.
    pub age: u32,
    pub hits: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerConfig {
    pub thresh_high: f64,
    pub thresh_low: f64,
    pub iou_min: f64,
    pub max_age: u32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            thresh_high: 0.6,
            thresh_low: 0.1,
            iou_min: 0.3,
            max_age: 30,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tracker {
    pub config: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u32,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self {
            config,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    /// Live tracks in ascending id order.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Processes one frame. Returns the track id assigned to each
    /// detection, or `None` for detections that were not used.
    pub fn update(&mut self, detections: &[Detection]) -> Vec<Option<u32>> {
        let cfg = self.config;
        let mut assigned = vec![None; detections.len()];
        let mut matched = vec![false; self.tracks.len()];
        let high: Vec<usize> = (0..detections.len())
            .filter(|&d| detections[d].score >= cfg.thresh_high)
            .collect();
        let low: Vec<usize> = (0..detections.len())
            .filter(|&d| (cfg.thresh_low..cfg.thresh_high).contains(&detections[d].score))
            .collect();
        for stage in [&high, &low] {
            let mut pairs = Vec::new();
            for (t, track) in self.tracks.iter().enumerate() {
                if matched[t] {
                    continue;
                }
                for &d in stage.iter() {
                    let o = iou(&track.bbox, &detections[d].bbox);
                    if o >= cfg.iou_min {
                        pairs.push((o, t, d));
                    }
                }
            }
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for (_, t, d) in pairs {
                if matched[t] || assigned[d].is_some() {
                    continue;
                }
                matched[t] = true;
                let track = &mut self.tracks[t];
                track.bbox = detections[d].bbox;
                track.age = 0;
                track.hits += 1;
                assigned[d] = Some(track.id);
            }
        }
        for (track, &m) in self.tracks.iter_mut().zip(&matched) {
            if !m {
                track.age += 1;
            }
        }
        self.tracks.retain(|t| t.age <= cfg.max_age);
        for &d in &high {
            if assigned[d].is_none() {
                let id = self.next_id;
                self.next_id += 1;
                self.tracks.push(Track {
                    id,
                    bbox: detections[d].bbox,
                    age: 0,
                    hits: 1,
                });
                assigned[d] = Some(id);
            }
        }
        assigned
    }
}
