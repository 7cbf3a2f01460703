//! Training and evaluation loops.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use convot_core::geometry::AugmentConfig;
use convot_core::layers::{apply_stat_updates, Session};
use convot_core::model::{argmax_rows, ModelConfig};
use convot_core::tensor::{lr_schedule, AdamW, AdamWConfig, NormMode};
use convot_core::{DenseTensor, Network, Scalar};

use crate::data::{make_batch, Sample, SampleMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Written whenever validation accuracy improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch: 16,
            lr0: 1e-3,
            lr_min: 1e-8,
            weight_decay: 1e-5,
            augment: Some(AugmentConfig {
                pivot: [0.5; 3],
                ..AugmentConfig::default()
            }),
            seed: 0,
            patience: None,
            checkpoint: None,
        }
    }
}

/// Top-1 accuracy, per-class F1 and the confusion matrix (rows = truth).
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub loss: f64,
}

impl Metrics {
    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize, loss: f64) -> Self {
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &l) in preds.iter().zip(labels) {
            confusion[l][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_f1 = (0..classes)
            .map(|c| {
                let tp = confusion[c][c] as f64;
                let predicted: usize = (0..classes).map(|r| confusion[r][c]).sum();
                let actual: usize = confusion[c].iter().sum();
                let denom = (predicted + actual) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect();
        Self {
            accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
            per_class_f1,
            confusion,
            loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tlr\ttrain_loss\ttrain_acc\tval_loss\tval_acc\tseconds";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.3e}\t{:.6}\t{:.4}\t{:.6}\t{:.4}\t{:.1}",
            self.epoch, self.lr, self.train_loss, self.train_accuracy, self.val_loss, self.val_accuracy, self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Logits `[sequences x classes]` and metrics in inference mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, samples: &[Sample<T>], batch: usize) -> Result<(Vec<Vec<f64>>, Metrics)> {
    let cfg = net.config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        let (input, labels) = make_batch(&refs, cfg, SampleMode::Eval, None, &mut rng)?;
        let mut s = Session::new(&net.params, NormMode::Eval, false);
        let out = net.model.forward(&mut s, &input)?;
        let l = s.tape.cross_entropy(out.logits, &labels)?;
        loss += s.tape.value(l).data()[0].as_f64() * chunk.len() as f64;
        let logits = s.tape.value(out.logits);
        let c = cfg.classes;
        rows.extend(logits.data().chunks(c).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let preds = argmax_f64(&rows);
    let metrics = Metrics::from_predictions(&preds, &labels, net.config().classes, loss / samples.len().max(1) as f64);
    Ok((rows, metrics))
}

pub fn argmax_f64(rows: &[Vec<f64>]) -> Vec<usize> {
    let t = DenseTensor::new(
        [rows.len(), rows.first().map_or(0, Vec::len)],
        rows.iter().flatten().copied().collect(),
    )
    .expect("rectangular logits");
    argmax_rows(&t)
}

/// One optimizer step; returns the batch loss and predictions.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut AdamW<T>,
    input: &convot_core::ModelInput<T>,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, Vec<usize>)> {
    let (loss, preds, grads, stats) = {
        let mut s = Session::training(&net.params);
        let out = net.model.forward(&mut s, input)?;
        let loss = s.tape.cross_entropy(out.logits, labels)?;
        let value = s.tape.value(loss).data()[0].as_f64();
        let preds = argmax_rows(s.tape.value(out.logits));
        if !value.is_finite() {
            return Ok((value, preds));
        }
        let g = s.tape.backward(loss)?;
        let grads = s.param_grads(&g);
        (value, preds, grads, s.take_stat_updates())
    };
    if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Invalid(format!(
            "non-finite gradient for {}",
            net.params.name(*id)
        )));
    }
    apply_stat_updates(&mut net.params, stats);
    let views: Vec<&[T]> = grads.iter().map(|(_, g)| g.as_slice()).collect();
    opt.step(lr, &mut net.params.trainable_mut(), &views)?;
    Ok((loss, preds))
}

/// Runs up to `cfg.epochs` epochs and leaves the best-validation parameters in
/// `net`. `on_epoch` sees each log line as it is produced.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    // Normals follow the rotation when the model consumes them.
    let augment = cfg.augment.map(|a| AugmentConfig {
        normal_offset: net.config().normals.then_some(0),
        ..a
    });
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::new();
    let mut best: Option<(usize, f64, convot_core::ParamStore<T>)> = None;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_schedule(epoch, cfg.epochs, cfg.lr0, cfg.lr_min);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch.max(1)).enumerate() {
            let refs: Vec<&Sample<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (input, labels) = make_batch(&refs, net.config(), SampleMode::Train, augment.as_ref(), &mut rng)?;
            let (loss, preds) = train_step(net, &mut opt, &input, &labels, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss}, lr {lr:.3e}, labels {labels:?}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let (val_loss, val_accuracy) = if val_set.is_empty() {
            (f64::NAN, 0.0)
        } else {
            let (_, m) = evaluate(net, val_set, cfg.batch)?;
            (m.loss, m.accuracy)
        };
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss,
            val_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            if let Some(path) = &cfg.checkpoint {
                let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
                net.params.write_checkpoint(std::io::BufWriter::new(file))?;
            }
            best = Some((epoch, val_accuracy, net.params.clone()));
        }
        logs.push(log);
        let stalled = best.as_ref().map_or(0, |(e, _, _)| epoch - e);
        if cfg.patience.is_some_and(|p| stalled >= p) {
            break;
        }
    }
    let (best_epoch, best_val_accuracy) = match best {
        Some((e, acc, params)) => {
            net.params = params;
            (e, acc)
        }
        None => (0, 0.0),
    };
    Ok(TrainReport {
        logs,
        best_epoch,
        best_val_accuracy,
    })
}

/// File names inside a trained-model directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "model.cfg";
pub const METRICS_FILE: &str = "metrics.tsv";

pub fn save_config(dir: &Path, config: &ModelConfig) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, config.to_text()).map_err(|e| Error::io(&path, e))
}

/// Rebuilds a network from `model.cfg` and `model.ckpt`.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<Network<T>> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let mut net = Network::new(ModelConfig::parse(&text)?, 0)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let file = std::fs::File::open(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    net.params.load_checkpoint(std::io::BufReader::new(file))?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_match_hand_counts() {
        let m = Metrics::from_predictions(&[0, 1, 1, 2], &[0, 1, 2, 2], 3, 0.5);
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.confusion[2], vec![0, 1, 1]);
        assert_eq!(m.per_class_f1[0], 1.0);
        assert!((m.per_class_f1[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.per_class_f1[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_scores_zero() {
        let m = Metrics::from_predictions(&[0, 0], &[0, 0], 2, 0.0);
        assert_eq!(m.per_class_f1, vec![1.0, 0.0]);
    }
}
