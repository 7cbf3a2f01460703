//! Frame sampling, point subsampling and minibatch assembly.

use rand::Rng;
use rayon::prelude::*;

use convot_core::frame::{PersonSequence, PointFrame};
use convot_core::geometry::{augment, minmax_normalize_sequence, AugmentConfig};
use convot_core::model::{ModelConfig, ModelInput, PersonInput};
use convot_core::sampling::ifps;
use convot_core::Scalar;

use crate::error::{Error, Result};
use crate::seqfile::{load_sequence, DatasetIndex, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// Picks `target` source frames out of `total` by splitting `[0, total)`
/// into equal intervals: a uniform draw per interval when training, the
/// interval midpoints otherwise. Short sequences repeat frames.
pub fn sample_frames<R: Rng + ?Sized>(total: usize, target: usize, mode: SampleMode, rng: &mut R) -> Vec<usize> {
    assert!(total >= 1, "sample_frames needs at least one frame");
    let width = total as f64 / target as f64;
    (0..target)
        .map(|k| {
            let pos = match mode {
                SampleMode::Train => (k as f64 + rng.random::<f64>()) * width,
                SampleMode::Eval => (k as f64 + 0.5) * width,
            };
            (pos.floor() as usize).min(total - 1)
        })
        .collect()
}

/// Exactly `n` points per frame: farthest-point sampling from the first
/// point when there are more, cyclic repetition when there are fewer.
pub fn fix_point_count<T: Scalar>(frame: &PointFrame<T>, n: usize) -> Result<PointFrame<T>> {
    if frame.is_empty() {
        return Err(Error::Invalid("frame without points".into()));
    }
    let idx: Vec<usize> = if frame.len() > n {
        ifps(&frame.points, n, 0)?
    } else {
        (0..n).map(|i| i % frame.len()).collect()
    };
    Ok(frame.select(&idx))
}

/// One labelled sequence with a fixed point count per frame.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub persons: Vec<PersonSequence<T>>,
    pub label: usize,
}

impl<T: Scalar> Sample<T> {
    pub fn new(persons: Vec<PersonSequence<T>>, label: usize, points: usize) -> Result<Self> {
        if persons.is_empty() || persons.len() > 2 {
            return Err(Error::Invalid(format!("{} persons in a sequence (need 1 or 2)", persons.len())));
        }
        let persons = persons
            .into_iter()
            .map(|p| {
                if p.frames.is_empty() {
                    return Err(Error::Invalid("person without frames".into()));
                }
                let frames = p
                    .frames
                    .iter()
                    .map(|f| fix_point_count(f, points))
                    .collect::<Result<Vec<_>>>()?;
                Ok(PersonSequence::new(frames, p.track_id))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { persons, label })
    }
}

/// Loads and subsamples every sequence of one split.
pub fn load_split<T: Scalar>(index: &DatasetIndex, split: Split, points: usize) -> Result<Vec<Sample<T>>> {
    let entries: Vec<_> = index.split(split).collect();
    entries
        .par_iter()
        .map(|e| Sample::new(load_sequence(&index.path(e))?, e.label, points))
        .collect()
}

/// The network input for one person: sampled frames, min-max normalized,
/// optionally augmented and normalized again so coordinates stay in
/// `[0, 1]`.
pub fn person_input<T: Scalar, R: Rng + ?Sized>(
    person: &PersonSequence<T>,
    frames: &[usize],
    config: &ModelConfig,
    augmentation: Option<&AugmentConfig>,
    rng: &mut R,
) -> Result<PersonInput<T>> {
    let picked = PersonSequence::new(
        frames.iter().map(|&f| person.frames[f].clone()).collect(),
        person.track_id,
    );
    let mut seq = minmax_normalize_sequence(picked)?;
    if let Some(aug) = augmentation {
        seq = minmax_normalize_sequence(augment(seq, aug, rng))?;
    }
    let extra = config.raw_channels() - 3;
    let mut feats = Vec::with_capacity(frames.len() * config.points * config.raw_channels());
    let mut labels = Vec::with_capacity(frames.len() * config.points);
    for frame in &seq.frames {
        if frame.feature_dim != extra || frame.len() != config.points {
            return Err(Error::Invalid(format!(
                "frame has {} points with {} extra channels; model expects {} with {extra}",
                frame.len(),
                frame.feature_dim,
                config.points
            )));
        }
        for i in 0..frame.len() {
            feats.extend_from_slice(&frame.points[i]);
            feats.extend_from_slice(frame.feature(i));
        }
        labels.extend_from_slice(&frame.labels);
    }
    Ok(PersonInput { feats, labels })
}

/// Builds a minibatch; frame sampling is shared by the people of one
/// sequence so they stay synchronized.
pub fn make_batch<T: Scalar, R: Rng + ?Sized>(
    samples: &[&Sample<T>],
    config: &ModelConfig,
    mode: SampleMode,
    augmentation: Option<&AugmentConfig>,
    rng: &mut R,
) -> Result<(ModelInput<T>, Vec<usize>)> {
    let mut persons = Vec::new();
    let mut sequence_of = Vec::new();
    for (s, sample) in samples.iter().enumerate() {
        let total = sample.persons.iter().map(|p| p.frames.len()).min().unwrap_or(0);
        let frames = sample_frames(total, config.frames, mode, rng);
        for p in &sample.persons {
            persons.push(person_input(p, &frames, config, augmentation, rng)?);
            sequence_of.push(s);
        }
    }
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((
        ModelInput {
            persons,
            sequence_of,
            sequences: samples.len(),
        },
        labels,
    ))
}
