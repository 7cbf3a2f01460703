//! Point clouds, person sequences and image rasters.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// One frame of one person: coordinates plus per-point auxiliary channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFrame<T> {
    pub points: Vec<[T; 3]>,
    /// `points.len() * feature_dim` values, point-major.
    pub features: Vec<T>,
    pub feature_dim: usize,
    /// Body-part label per point; 0 is background.
    pub labels: Vec<u16>,
}

impl<T: Scalar> PointFrame<T> {
    pub fn empty(feature_dim: usize) -> Self {
        Self {
            points: Vec::new(),
            features: Vec::new(),
            feature_dim,
            labels: Vec::new(),
        }
    }

    /// Coordinates only, zero-width features, background labels.
    pub fn from_points(points: Vec<[T; 3]>) -> Self {
        let n = points.len();
        Self {
            points,
            features: Vec::new(),
            feature_dim: 0,
            labels: vec![0; n],
        }
    }

    pub fn new(points: Vec<[T; 3]>, features: Vec<T>, feature_dim: usize, labels: Vec<u16>) -> Result<Self> {
        let f = Self {
            points,
            features,
            feature_dim,
            labels,
        };
        f.check()?;
        Ok(f)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.points.len();
        if self.features.len() != n * self.feature_dim || self.labels.len() != n {
            return Err(shape_err(
                "point frame",
                format!(
                    "{n} points, {} feature values (dim {}), {} labels",
                    self.features.len(),
                    self.feature_dim,
                    self.labels.len()
                ),
            ));
        }
        let finite = self.points.iter().flatten().chain(&self.features).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Format("non-finite point value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[T] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Rows in the given order; indices may repeat.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.feature_dim);
        for &i in indices {
            out.points.push(self.points[i]);
            out.features.extend_from_slice(self.feature(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Rows whose predicate holds, in original order.
    pub fn filter(&self, mut keep: impl FnMut(usize, &[T; 3]) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i, &self.points[i])).collect();
        self.select(&idx)
    }

    /// Appends feature columns, one row of `dim` values per point.
    pub fn with_features(mut self, extra: &[T], dim: usize) -> Result<Self> {
        if extra.len() != self.len() * dim {
            return Err(shape_err("with_features", "one row per point"));
        }
        let old = self.feature_dim;
        let mut merged = Vec::with_capacity(self.len() * (old + dim));
        for i in 0..self.len() {
            merged.extend_from_slice(&self.features[i * old..(i + 1) * old]);
            merged.extend_from_slice(&extra[i * dim..(i + 1) * dim]);
        }
        self.features = merged;
        self.feature_dim += dim;
        Ok(self)
    }

    pub fn centroid(&self) -> Option<[T; 3]> {
        if self.is_empty() {
            return None;
        }
        let mut c = [T::zero(); 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = T::of(self.len() as f64);
        Some(c.map(|v| v / n))
    }
}

/// All frames of one tracked person.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonSequence<T> {
    pub frames: Vec<PointFrame<T>>,
    pub track_id: u32,
}

impl<T: Scalar> PersonSequence<T> {
    pub fn new(frames: Vec<PointFrame<T>>, track_id: u32) -> Self {
        Self { frames, track_id }
    }

    pub fn point_count(&self) -> usize {
        self.frames.iter().map(PointFrame::len).sum()
    }

    pub fn points(&self) -> impl Iterator<Item = &[T; 3]> {
        self.frames.iter().flat_map(|f| f.points.iter())
    }

    pub fn points_mut(&mut self) -> impl Iterator<Item = &mut [T; 3]> {
        self.frames.iter_mut().flat_map(|f| f.points.iter_mut())
    }
}

/// Single-channel row-major raster (depth, disparity, intensity).
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err(
                "image",
                format!("{} values for {width}x{height}", data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: T) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Binary per-instance mask.
pub type InstanceMask = Image<bool>;

impl InstanceMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Set pixels as `(x, y)`, row-major order.
    pub fn pixels(&self) -> Vec<[usize; 2]> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| [x, y]))
            .filter(|&[x, y]| self.get(x, y))
            .collect()
    }

    /// Set-inclusion test: every pixel of `self` is set in `other`.
    pub fn is_subset_of(&self, other: &InstanceMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}
