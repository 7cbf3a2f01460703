//! The full recognition network: part embeddings, T-Net, sparse backbone,
//! multi-person fusion and the classification head.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{init_tensor, BatchNorm, Init, Linear, Session};
use crate::scalar::Scalar;
use crate::sparse::{Bottleneck, ConvBnRelu, MsTcn, PoolSpec, RowPlacement, SparseVar};
use crate::tensor::{DenseTensor, NormMode, ParamId, ParamStore, Reduce, Tape, Var};
use crate::tnet::{TNet, TNetWidths};

/// Per-point appearance channel group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Appearance {
    None,
    /// One infrared intensity channel.
    Intensity,
    Rgb,
}

impl Appearance {
    pub fn width(self) -> usize {
        match self {
            Appearance::None => 0,
            Appearance::Intensity => 1,
            Appearance::Rgb => 3,
        }
    }
}

/// How per-person feature vectors of one sequence are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Second person's vector (or zeros) appended: head width `2F`.
    ConcatZeroPad,
    /// Element-wise mean: head width `F`.
    Average,
}

/// Every hyperparameter of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub points: usize,
    /// Spatial grid extent per axis.
    pub grid: usize,
    pub classes: usize,
    pub fusion: Fusion,
    pub normals: bool,
    pub appearance: Appearance,
    pub parts: bool,
    /// Non-background part labels; the embedding table has one more row.
    pub part_labels: usize,
    pub part_dim: usize,
    pub tnet: TNetWidths,
    pub conv1: usize,
    pub conv1_extent: [usize; 4],
    pub conv2: usize,
    pub conv2_extent: [usize; 4],
    pub temporal_kernels: Vec<usize>,
    /// `(bottleneck width, output width)` of the two residual blocks.
    pub bottleneck1: (usize, usize),
    pub bottleneck2: (usize, usize),
    pub aggregation: Reduce,
    pub pool: PoolSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            points: 2048,
            grid: 64,
            classes: 120,
            fusion: Fusion::ConcatZeroPad,
            normals: false,
            appearance: Appearance::None,
            parts: false,
            part_labels: 20,
            part_dim: 3,
            tnet: TNetWidths::default(),
            conv1: 64,
            conv1_extent: [5; 4],
            conv2: 128,
            conv2_extent: [1, 7, 7, 7],
            temporal_kernels: vec![3, 5, 7, 9],
            bottleneck1: (64, 256),
            bottleneck2: (128, 1024),
            aggregation: Reduce::Mean,
            pool: PoolSpec::default(),
        }
    }
}

impl ModelConfig {
    /// Stored per-point channels: xyz, optional normals, appearance.
    pub fn raw_channels(&self) -> usize {
        3 + if self.normals { 3 } else { 0 } + self.appearance.width()
    }

    /// Network input channels `C` (raw plus part embedding).
    pub fn input_channels(&self) -> usize {
        self.raw_channels() + if self.parts { self.part_dim } else { 0 }
    }

    pub fn feature_width(&self) -> usize {
        self.bottleneck2.1
    }

    pub fn head_width(&self) -> usize {
        match self.fusion {
            Fusion::ConcatZeroPad => 2 * self.feature_width(),
            Fusion::Average => self.feature_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("classes = {} (need >= 2)", self.classes));
        }
        if self.frames == 0 || self.points == 0 || self.grid == 0 {
            return bad("frames, points and grid must be positive".into());
        }
        if self.temporal_kernels.is_empty() || !self.conv2.is_multiple_of(self.temporal_kernels.len()) {
            return bad(format!(
                "conv2 width {} not divisible by {} temporal branches",
                self.conv2,
                self.temporal_kernels.len()
            ));
        }
        if self.bottleneck1.0 * 2 != self.conv2 || self.bottleneck2.0 * 2 != self.bottleneck1.1 {
            return bad("bottleneck widths must be half of their block inputs".into());
        }
        Ok(())
    }

    /// Parses the flat `key = value` format; `#` starts a comment.
    /// Unlisted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", ln + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            let err = |what: &str| Error::Config(format!("line {}: bad {what} '{v}'", ln + 1));
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| err(k));
            let list = |s: &str| s.split(',').map(num).collect::<Result<Vec<usize>>>();
            let boolean = |s: &str| match s {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(err(k)),
            };
            let extent = |s: &str| -> Result<[usize; 4]> {
                let l = list(s)?;
                match l.len() {
                    1 => Ok([l[0]; 4]),
                    4 => Ok([l[0], l[1], l[2], l[3]]),
                    _ => Err(err(k)),
                }
            };
            let pair = |s: &str| -> Result<(usize, usize)> {
                let l = list(s)?;
                if l.len() == 2 {
                    Ok((l[0], l[1]))
                } else {
                    Err(err(k))
                }
            };
            match k {
                "frames" => c.frames = num(v)?,
                "points" => c.points = num(v)?,
                "grid" => c.grid = num(v)?,
                "classes" => c.classes = num(v)?,
                "fusion" => {
                    c.fusion = match v {
                        "concat_zero_pad" => Fusion::ConcatZeroPad,
                        "average" => Fusion::Average,
                        _ => return Err(err(k)),
                    }
                }
                "normals" => c.normals = boolean(v)?,
                "appearance" => {
                    c.appearance = match v {
                        "none" => Appearance::None,
                        "intensity" => Appearance::Intensity,
                        "rgb" => Appearance::Rgb,
                        _ => return Err(err(k)),
                    }
                }
                "parts" => c.parts = boolean(v)?,
                "part_labels" => c.part_labels = num(v)?,
                "part_dim" => c.part_dim = num(v)?,
                "tnet_point" => {
                    let l = list(v)?;
                    c.tnet.point = l.try_into().map_err(|_| err(k))?;
                }
                "tnet_global" => {
                    let l = list(v)?;
                    c.tnet.global = l.try_into().map_err(|_| err(k))?;
                }
                "conv1" => c.conv1 = num(v)?,
                "conv1_extent" => c.conv1_extent = extent(v)?,
                "conv2" => c.conv2 = num(v)?,
                "conv2_extent" => c.conv2_extent = extent(v)?,
                "temporal_kernels" => c.temporal_kernels = list(v)?,
                "bottleneck1" => c.bottleneck1 = pair(v)?,
                "bottleneck2" => c.bottleneck2 = pair(v)?,
                "aggregation" => {
                    c.aggregation = match v {
                        "mean" => Reduce::Mean,
                        "max" => Reduce::Max,
                        _ => return Err(err(k)),
                    }
                }
                "pool" => {
                    let l = list(v)?;
                    let [kernel, stride, padding] = l[..] else {
                        return Err(err(k));
                    };
                    c.pool = PoolSpec {
                        kernel,
                        stride,
                        padding,
                    };
                }
                _ => return Err(Error::Config(format!("line {}: unknown key '{k}'", ln + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let join = |l: &[usize]| l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "points = {}", self.points);
        let _ = writeln!(s, "grid = {}", self.grid);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(
            s,
            "fusion = {}",
            match self.fusion {
                Fusion::ConcatZeroPad => "concat_zero_pad",
                Fusion::Average => "average",
            }
        );
        let _ = writeln!(s, "normals = {}", self.normals);
        let _ = writeln!(
            s,
            "appearance = {}",
            match self.appearance {
                Appearance::None => "none",
                Appearance::Intensity => "intensity",
                Appearance::Rgb => "rgb",
            }
        );
        let _ = writeln!(s, "parts = {}", self.parts);
        let _ = writeln!(s, "part_labels = {}", self.part_labels);
        let _ = writeln!(s, "part_dim = {}", self.part_dim);
        let _ = writeln!(s, "tnet_point = {}", join(&self.tnet.point));
        let _ = writeln!(s, "tnet_global = {}", join(&self.tnet.global));
        let _ = writeln!(s, "conv1 = {}", self.conv1);
        let _ = writeln!(s, "conv1_extent = {}", join(&self.conv1_extent));
        let _ = writeln!(s, "conv2 = {}", self.conv2);
        let _ = writeln!(s, "conv2_extent = {}", join(&self.conv2_extent));
        let _ = writeln!(s, "temporal_kernels = {}", join(&self.temporal_kernels));
        let _ = writeln!(s, "bottleneck1 = {},{}", self.bottleneck1.0, self.bottleneck1.1);
        let _ = writeln!(s, "bottleneck2 = {},{}", self.bottleneck2.0, self.bottleneck2.1);
        let _ = writeln!(
            s,
            "aggregation = {}",
            match self.aggregation {
                Reduce::Mean => "mean",
                Reduce::Max => "max",
            }
        );
        let _ = writeln!(s, "pool = {},{},{}", self.pool.kernel, self.pool.stride, self.pool.padding);
        s
    }
}

/// One person's sampled sequence: `frames x points` rows of raw channels.
#[derive(Clone, Debug)]
pub struct PersonInput<T> {
    /// `frames * points * raw_channels` values, frame-major.
    pub feats: Vec<T>,
    /// `frames * points` part labels (0 = background).
    pub labels: Vec<u16>,
}

/// A minibatch: persons plus the sequence each belongs to.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    pub persons: Vec<PersonInput<T>>,
    pub sequence_of: Vec<usize>,
    pub sequences: usize,
}

/// Dense-form output shape of one stage, for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

pub struct ModelOutput {
    pub logits: Var,
    /// `[persons x F]` pooled backbone features.
    pub person_features: Var,
    pub trace: Vec<StageShape>,
}

/// The recognition network's layer structure; parameters live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SpHpConvoT {
    pub config: ModelConfig,
    part_table: Option<ParamId>,
    tnet: TNet,
    conv1: ConvBnRelu,
    conv2: ConvBnRelu,
    mstcn: MsTcn,
    mstcn_norm: BatchNorm,
    block1: Bottleneck,
    block2: Bottleneck,
    head: Linear,
}

impl SpHpConvoT {
    pub fn new<T: Scalar>(config: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.input_channels();
        let part_table = config.parts.then(|| {
            store.add(
                "parts.embedding",
                init_tensor(&[config.part_labels + 1, config.part_dim], 1, Init::FanIn, &mut rng),
                true,
            )
        });
        let tnet = TNet::new(store, "tnet", c, config.tnet, &mut rng);
        let conv1 = ConvBnRelu::new(store, "conv1", config.conv1_extent, 2 * c, config.conv1, &mut rng)?;
        let conv2 = ConvBnRelu::new(store, "conv2", config.conv2_extent, config.conv1, config.conv2, &mut rng)?;
        let mstcn = MsTcn::new(store, "mstcn", config.conv2, &config.temporal_kernels, &mut rng)?;
        let mstcn_norm = BatchNorm::new(store, "mstcn.bn", config.conv2);
        let (b1, o1) = config.bottleneck1;
        let (b2, o2) = config.bottleneck2;
        let block1 = Bottleneck::new(store, "block1", config.conv2, b1, o1, &mut rng)?;
        let block2 = Bottleneck::new(store, "block2", o1, b2, o2, &mut rng)?;
        let head = Linear::new(store, "head", config.head_width(), config.classes, Init::FanIn, &mut rng);
        Ok(Self {
            config,
            part_table,
            tnet,
            conv1,
            conv2,
            mstcn,
            mstcn_norm,
            block1,
            block2,
            head,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, input: &ModelInput<T>) -> Result<ModelOutput> {
        let cfg = &self.config;
        let (frames, n, raw) = (cfg.frames, cfg.points, cfg.raw_channels());
        let persons = input.persons.len();
        if persons == 0 {
            return Err(Error::Empty("model input"));
        }
        if input.sequence_of.len() != persons {
            return Err(shape_err("model", "sequence_of must have one entry per person"));
        }
        let mut feats = Vec::with_capacity(persons * frames * n * raw);
        let mut labels = Vec::new();
        for (p, person) in input.persons.iter().enumerate() {
            if person.feats.len() != frames * n * raw {
                return Err(shape_err(
                    "model",
                    format!(
                        "person {p}: {} values, expected {frames} x {n} x {raw}",
                        person.feats.len()
                    ),
                ));
            }
            feats.extend_from_slice(&person.feats);
            if cfg.parts {
                if person.labels.len() != frames * n {
                    return Err(shape_err("model", format!("person {p}: label count")));
                }
                labels.extend(person.labels.iter().map(|&l| l as usize));
            }
        }
        let rows = persons * frames * n;
        let mut x = s.tape.constant(DenseTensor::new([rows, raw], feats)?);
        if let Some(table) = self.part_table {
            let table = s.param(table);
            let e = s.tape.embedding(table, &labels)?;
            x = s.tape.concat(&[x, e], 1)?;
        }
        let c = cfg.input_channels();
        let x = s.tape.reshape(x, &[persons * frames, n, c])?;
        let mut trace = Vec::new();
        let tn = self.tnet.forward(s, x)?;
        trace.push(StageShape {
            name: "input",
            shape: vec![persons, frames, n, 2 * c],
        });
        let y = s.tape.reshape(tn.embedding, &[rows, 2 * c])?;
        let placement: Vec<RowPlacement> = (0..rows)
            .map(|r| RowPlacement {
                batch: (r / (frames * n)) as u32,
                t: ((r / n) % frames) as u32,
            })
            .collect();
        let vox = s.tape.voxelize(
            y,
            &placement,
            [frames, cfg.grid, cfg.grid, cfg.grid],
            persons,
            cfg.aggregation,
        )?;
        let dense = |v: &SparseVar, tape: &Tape<T>| {
            let r = v.layout.resolution();
            vec![persons, r[0], r[1], r[2], r[3], v.channels(tape)]
        };
        trace.push(StageShape {
            name: "voxel mapping",
            shape: dense(&vox, &s.tape),
        });
        let h = self.conv1.forward(s, &vox)?;
        trace.push(StageShape {
            name: "submanifold conv 1",
            shape: dense(&h, &s.tape),
        });
        let h = s.tape.sparse_max_pool(&h, cfg.pool)?;
        trace.push(StageShape {
            name: "sparse max pool 1",
            shape: dense(&h, &s.tape),
        });
        let h = self.conv2.forward(s, &h)?;
        trace.push(StageShape {
            name: "submanifold conv 2",
            shape: dense(&h, &s.tape),
        });
        let h = self.mstcn.forward(s, &h)?;
        let nf = self.mstcn_norm.forward(s, h.feats)?;
        let h = SparseVar {
            layout: h.layout,
            feats: s.tape.relu(nf),
        };
        trace.push(StageShape {
            name: "ms-tcn",
            shape: dense(&h, &s.tape),
        });
        let h = s.tape.sparse_max_pool(&h, cfg.pool)?;
        trace.push(StageShape {
            name: "sparse max pool 2",
            shape: dense(&h, &s.tape),
        });
        let h = self.block1.forward(s, &h)?;
        trace.push(StageShape {
            name: "bottleneck 1",
            shape: dense(&h, &s.tape),
        });
        let h = self.block2.forward(s, &h)?;
        trace.push(StageShape {
            name: "bottleneck 2",
            shape: dense(&h, &s.tape),
        });
        let pooled = s.tape.global_sparse_max_pool(&h)?;
        trace.push(StageShape {
            name: "global max pool",
            shape: s.tape.shape(pooled).to_vec(),
        });
        let fused = fuse_people(&mut s.tape, pooled, &input.sequence_of, input.sequences, cfg.fusion)?;
        let logits = self.head.forward(s, fused)?;
        trace.push(StageShape {
            name: "fc head",
            shape: s.tape.shape(logits).to_vec(),
        });
        Ok(ModelOutput {
            logits,
            person_features: pooled,
            trace,
        })
    }
}

/// Combines per-person rows of `features[P x F]` into one row per
/// sequence. At most two persons per sequence.
pub fn fuse_people<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    sequence_of: &[usize],
    sequences: usize,
    mode: Fusion,
) -> Result<Var> {
    let &[p, f] = tape.shape(features) else {
        return Err(shape_err("fuse_people", "features must be rank 2"));
    };
    if sequence_of.len() != p {
        return Err(shape_err("fuse_people", "one sequence index per person"));
    }
    let mut members = vec![Vec::new(); sequences];
    for (person, &sq) in sequence_of.iter().enumerate() {
        if sq >= sequences {
            return Err(Error::Index {
                what: "sequence",
                index: sq,
                limit: sequences,
            });
        }
        members[sq].push(person);
    }
    for (sq, m) in members.iter().enumerate() {
        if m.is_empty() || m.len() > 2 {
            return Err(Error::Config(format!(
                "sequence {sq} has {} persons (supported: 1 or 2)",
                m.len()
            )));
        }
    }
    match mode {
        Fusion::ConcatZeroPad => {
            let rows: Vec<Option<usize>> = members
                .iter()
                .flat_map(|m| [Some(m[0]), m.get(1).copied()])
                .collect();
            let g = tape.gather_rows(features, &rows)?;
            tape.reshape(g, &[sequences, 2 * f])
        }
        Fusion::Average => {
            let seg: Arc<[u32]> = sequence_of.iter().map(|&s| s as u32).collect();
            tape.segment_reduce(features, seg, sequences, Reduce::Mean)
        }
    }
}

/// A model together with its parameters.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub model: SpHpConvoT,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let model = SpHpConvoT::new(config, &mut params, seed)?;
        Ok(Self { model, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Inference-mode logits `[sequences x classes]`.
    pub fn logits(&self, input: &ModelInput<T>) -> Result<DenseTensor<T>> {
        let mut s = Session::new(&self.params, NormMode::Eval, false);
        let out = self.model.forward(&mut s, input)?;
        Ok(s.tape.value(out.logits).clone())
    }

    /// Inference-mode stage shapes.
    pub fn trace(&self, input: &ModelInput<T>) -> Result<Vec<StageShape>> {
        let mut s = Session::new(&self.params, NormMode::Eval, false);
        Ok(self.model.forward(&mut s, input)?.trace)
    }
}

/// Row-wise argmax; ties go to the lowest class.
pub fn argmax_rows<T: Scalar>(logits: &DenseTensor<T>) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(0);
    logits
        .data()
        .chunks(c.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `lambda1 * A + lambda2 * B` and its predicted classes.
pub fn ensemble_predict<T: Scalar>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    lambda1: T,
    lambda2: T,
) -> Result<(DenseTensor<T>, Vec<usize>)> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(shape_err(
            "ensemble",
            format!("logit shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| lambda1 * x + lambda2 * y)
        .collect();
    let combined = DenseTensor::new(a.shape().to_vec(), data)?;
    let pred = argmax_rows(&combined);
    Ok((combined, pred))
}

/// Result of [`search_lambda`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaChoice {
    pub lambda1: f64,
    pub lambda2: f64,
    pub accuracy: f64,
}

/// Exhaustive search over `lambda1 = i * step`, `lambda2 = 1 - lambda1`,
/// maximizing validation accuracy. The first best grid point wins.
pub fn search_lambda<T: Scalar>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    labels: &[usize],
    step: f64,
) -> Result<LambdaChoice> {
    if labels.is_empty() {
        return Err(Error::Empty("search_lambda"));
    }
    if a.rank() != 2 || a.shape()[0] != labels.len() {
        return Err(shape_err("search_lambda", "one label per logit row"));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("grid step {step}")));
    }
    let steps = (1.0 / step).round() as usize;
    let mut best: Option<LambdaChoice> = None;
    for i in 0..=steps {
        let l1 = (i as f64 * step).min(1.0);
        let l2 = 1.0 - l1;
        let (_, pred) = ensemble_predict(a, b, T::of(l1), T::of(l2))?;
        let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        let acc = correct as f64 / labels.len() as f64;
        if best.is_none_or(|b| acc > b.accuracy) {
            best = Some(LambdaChoice {
                lambda1: l1,
                lambda2: l2,
                accuracy: acc,
            });
        }
    }
    Ok(best.expect("grid has at least one point"))
}
