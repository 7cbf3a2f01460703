//! Forward-pass throughput over point counts and person counts.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use convot_core::model::{Appearance, ModelConfig};
use convot_core::{Network, Scalar};

use crate::data::{make_batch, Sample, SampleMode};
use crate::error::{Error, Result};
use crate::synth::{generate_synthetic_sequence, Action, SpecRanges, SyntheticActionSpec};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub points: Vec<usize>,
    pub persons: Vec<usize>,
    pub warmup: usize,
    /// Timed runs per cell; each run is at least `iters` forward passes
    /// and lasts at least `min_seconds`.
    pub repeats: usize,
    pub iters: usize,
    pub min_seconds: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            points: vec![512, 1024, 2048],
            persons: vec![1, 2],
            warmup: 2,
            repeats: 3,
            iters: 3,
            min_seconds: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub points: usize,
    pub persons: usize,
    /// Sequences per second of each timed run.
    pub runs: Vec<f64>,
}

impl BenchRow {
    pub fn median(&self) -> f64 {
        let mut v = self.runs.clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    /// `(max - min) / min` over the runs.
    pub fn spread(&self) -> f64 {
        let lo = self.runs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.runs.iter().copied().fold(0.0, f64::max);
        (hi - lo) / lo
    }
}

/// Geometry-only variant of `base`: no normals, appearance or parts.
pub fn geometry_only(base: &ModelConfig, points: usize) -> ModelConfig {
    ModelConfig {
        points,
        normals: false,
        appearance: Appearance::None,
        parts: false,
        ..base.clone()
    }
}

/// Batch-1 forward throughput for every `(points, persons)` cell. All
/// cells share one synthetic two-person clip and one set of weights.
pub fn benchmark<T: Scalar>(base: &ModelConfig, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 || cfg.iters == 0 {
        return Err(Error::Invalid("repeats and iters must be positive".into()));
    }
    if cfg.persons.iter().any(|&p| p == 0 || p > 2) {
        return Err(Error::Invalid("persons must be 1 or 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_points = cfg.points.iter().copied().max().unwrap_or(0);
    let ranges = SpecRanges {
        frames: (base.frames, base.frames),
        points: max_points.max(1) + max_points / 4,
        ..SpecRanges::default()
    };
    let spec = SyntheticActionSpec::random(Action::Handshake, &ranges, &mut rng);
    let clip = generate_synthetic_sequence::<T>(&spec);
    let mut rows = Vec::new();
    for &points in &cfg.points {
        let model = geometry_only(base, points);
        let net = Network::<T>::new(model.clone(), cfg.seed)?;
        for &persons in &cfg.persons {
            let sample = Sample::new(clip[..persons].to_vec(), 0, points)?;
            let (input, _) = make_batch(&[&sample], &model, SampleMode::Eval, None, &mut rng)?;
            for _ in 0..cfg.warmup {
                net.logits(&input)?;
            }
            let mut runs = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let start = Instant::now();
                let mut n = 0;
                while n < cfg.iters || start.elapsed().as_secs_f64() < cfg.min_seconds {
                    net.logits(&input)?;
                    n += 1;
                }
                runs.push(n as f64 / start.elapsed().as_secs_f64());
            }
            rows.push(BenchRow { points, persons, runs });
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = String::from("points\tpersons\tseq_per_s\tspread\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{:.2}\t{:.3}\n", r.points, r.persons, r.median(), r.spread()));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_statistics() {
        let r = BenchRow {
            points: 1,
            persons: 1,
            runs: vec![10.0, 12.0, 11.0],
        };
        assert_eq!(r.median(), 11.0);
        assert!((r.spread() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn tiny_bench_runs() {
        let base = ModelConfig {
            frames: 4,
            grid: 8,
            classes: 2,
            ..crate::desk_config()
        };
        let cfg = BenchConfig {
            points: vec![32],
            persons: vec![1, 2],
            warmup: 0,
            repeats: 1,
            iters: 1,
            min_seconds: 0.0,
            seed: 1,
        };
        let rows = benchmark::<f32>(&base, &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.median() > 0.0));
        assert!(format_table(&rows).lines().count() == 3);
    }
}
