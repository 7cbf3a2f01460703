//! Finite-difference gradient cases for every differentiable operation,
//! the composite layers and a miniature end-to-end model.

use std::sync::Arc;

use convot_core::gradcheck::{check_gradients, check_param_gradients, GradReport};
use convot_core::layers::{BatchNorm, Init, Linear, PointwiseConv, Session};
use convot_core::model::{ModelConfig, ModelInput, PersonInput, SpHpConvoT};
use convot_core::sparse::{Bottleneck, ConvBnRelu, MsTcn, PoolSpec, RowPlacement, SparseTensor, SparseVar};
use convot_core::tensor::{NormMode, Reduce, RunningStats};
use convot_core::tnet::{TNet, TNetWidths};
use convot_core::{DenseTensor, ParamStore, Result, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step for central differences.
pub const H: f64 = 1e-5;
pub const TOL_ELEMENTWISE: f64 = 1e-6;
pub const TOL: f64 = 1e-5;

pub struct GradCase {
    pub name: &'static str,
    pub err: f64,
    pub tol: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.err <= self.tol
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor<f64> {
    let n = shape.iter().product();
    DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for kinks at the origin.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    DenseTensor::new(shape.to_vec(), data).unwrap()
}

fn case(name: &'static str, tol: f64, r: Result<GradReport>) -> GradCase {
    let err = r.map(|r| r.max_rel_err()).unwrap_or(f64::INFINITY);
    GradCase { name, err, tol }
}

fn sparse_input(rng: &mut ChaCha8Rng, channels: usize) -> SparseTensor<f64> {
    super::random_sparse(rng, 2, [3, 4, 4, 4], 0.3, channels)
}

fn sparse_var(layout: &SparseTensor<f64>, feats: Var) -> SparseVar {
    SparseVar {
        layout: layout.layout.clone(),
        feats,
    }
}

/// Every primitive tape operation.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let e = TOL_ELEMENTWISE;

    let (a, b) = (rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[3, 4]));
    out.push(case("add", e, check_gradients(&[a.clone(), b], H, |t, v| t.add(v[0], v[1]))));
    out.push(case("sum", e, check_gradients(std::slice::from_ref(&a), H, |t, v| Ok(t.sum(v[0])))));
    let w: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
    out.push(case("dot_const", e, check_gradients(std::slice::from_ref(&a), H, |t, v| t.dot_const(v[0], &w))));
    out.push(case("reshape", e, check_gradients(std::slice::from_ref(&a), H, |t, v| t.reshape(v[0], &[2, 6]))));
    let r = rand_off_zero(&mut rng, &[4, 5]);
    out.push(case("relu", e, check_gradients(&[r], H, |t, v| Ok(t.relu(v[0])))));
    let x3 = rand_t(&mut rng, &[2, 3, 4]);
    out.push(case("transpose12", e, check_gradients(std::slice::from_ref(&x3), H, |t, v| t.transpose12(v[0]))));
    let y3 = rand_t(&mut rng, &[2, 2, 4]);
    out.push(case(
        "concat",
        e,
        check_gradients(&[x3.clone(), y3], H, |t, v| t.concat(&[v[0], v[1]], 1)),
    ));

    let (p, q) = (rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[2, 4, 5]));
    out.push(case("bmm", TOL, check_gradients(&[p, q], H, |t, v| t.bmm(v[0], v[1]))));
    let (x, wt, bias) = (rand_t(&mut rng, &[5, 3]), rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4]));
    out.push(case("affine", TOL, check_gradients(&[x, wt, bias], H, |t, v| t.affine(v[0], v[1], v[2]))));
    let (x, wt, bias) = (rand_t(&mut rng, &[2, 3, 6]), rand_t(&mut rng, &[4, 3]), rand_t(&mut rng, &[4]));
    out.push(case(
        "pointwise_conv1d",
        TOL,
        check_gradients(&[x, wt, bias], H, |t, v| t.pointwise_conv1d(v[0], v[1], v[2])),
    ));
    for (name, shape, mode) in [
        ("batch_norm train rank 2", vec![7, 3], NormMode::Train),
        ("batch_norm train rank 3", vec![3, 2, 5], NormMode::Train),
        ("batch_norm eval", vec![4, 3], NormMode::Eval),
    ] {
        let x = rand_t(&mut rng, &shape);
        let (g, b) = (rand_t(&mut rng, &[shape[1]]), rand_t(&mut rng, &[shape[1]]));
        let stats = RunningStats {
            mean: vec![0.1; shape[1]],
            var: vec![0.7; shape[1]],
        };
        let r = check_gradients(&[x, g, b], H, |t, v| t.batch_norm(v[0], v[1], v[2], &mut stats.clone(), mode));
        out.push(case(name, TOL, r));
    }
    let x = rand_t(&mut rng, &[2, 3, 7]);
    out.push(case("max_over_points", TOL, check_gradients(&[x], H, |t, v| t.max_over_points(v[0]))));
    let logits = rand_t(&mut rng, &[4, 3]);
    out.push(case(
        "cross_entropy",
        TOL,
        check_gradients(&[logits], H, |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
    ));
    let table = rand_t(&mut rng, &[5, 3]);
    out.push(case(
        "embedding",
        TOL,
        check_gradients(std::slice::from_ref(&table), H, |t, v| t.embedding(v[0], &[0, 3, 3, 1, 0, 4])),
    ));
    out.push(case(
        "gather_rows",
        TOL,
        check_gradients(&[table], H, |t, v| t.gather_rows(v[0], &[Some(2), None, Some(2), Some(0)])),
    ));
    let seg: Arc<[u32]> = Arc::from(vec![1u32, 0, 1, 2, 1, 0]);
    for (name, mode) in [("segment_reduce mean", Reduce::Mean), ("segment_reduce max", Reduce::Max)] {
        let x = rand_t(&mut rng, &[6, 3]);
        let s = seg.clone();
        out.push(case(name, TOL, check_gradients(&[x], H, |t, v| t.segment_reduce(v[0], s.clone(), 3, mode))));
    }

    let xs = sparse_input(&mut rng, 2);
    let (wt, bias) = (rand_t(&mut rng, &[81, 2, 3]), rand_t(&mut rng, &[3]));
    out.push(case(
        "submanifold_conv",
        TOL,
        check_gradients(&[xs.feats.clone(), wt, bias], H, |t, v| {
            let sv = sparse_var(&xs, v[0]);
            Ok(t.submanifold_conv(&sv, [3; 4], v[1], v[2])?.feats)
        }),
    ));
    out.push(case(
        "sparse_max_pool",
        TOL,
        check_gradients(std::slice::from_ref(&xs.feats), H, |t, v| {
            let sv = sparse_var(&xs, v[0]);
            Ok(t.sparse_max_pool(&sv, PoolSpec::default())?.feats)
        }),
    ));
    out.push(case(
        "global_sparse_max_pool",
        TOL,
        check_gradients(std::slice::from_ref(&xs.feats), H, |t, v| {
            let sv = sparse_var(&xs, v[0]);
            t.global_sparse_max_pool(&sv)
        }),
    ));

    // Coordinates sit near cell centers so small steps never change cells.
    let rows = 24;
    let mut pts = Vec::with_capacity(rows * 5);
    for _ in 0..rows {
        for _ in 0..3 {
            let cell = rng.random_range(0..2) as f64;
            pts.push((cell + 0.5 + rng.random_range(-0.2..0.2)) / 2.0);
        }
        pts.push(rng.random_range(-1.0..1.0));
        pts.push(rng.random_range(-1.0..1.0));
    }
    let pts = DenseTensor::new([rows, 5], pts).unwrap();
    let placement: Vec<RowPlacement> = (0..rows)
        .map(|r| RowPlacement {
            batch: (r % 2) as u32,
            t: (r / 2 % 2) as u32,
        })
        .collect();
    for (name, mode) in [("voxelize mean", Reduce::Mean), ("voxelize max", Reduce::Max)] {
        out.push(case(
            name,
            TOL,
            check_gradients(std::slice::from_ref(&pts), H, |t, v| Ok(t.voxelize(v[0], &placement, [2, 2, 2, 2], 2, mode)?.feats)),
        ));
    }
    out
}

/// Parameter gradients of the composite layers.
pub fn layer_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let all = usize::MAX;

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "fc", 3, 4, Init::FanIn, &mut rng);
    let x = rand_t(&mut rng, &[5, 3]);
    out.push(case(
        "linear",
        TOL,
        check_param_gradients(&store, NormMode::Train, H, all, |s| {
            let v = s.tape.constant(x.clone());
            lin.forward(s, v)
        }),
    ));

    let mut store = ParamStore::new();
    let pc = PointwiseConv::unbiased(&mut store, "pc", 3, 4, &mut rng);
    let bn = BatchNorm::new(&mut store, "bn", 4);
    let pc_biased = PointwiseConv::new(&mut store, "pc_biased", 3, 4, &mut rng);
    let x = rand_t(&mut rng, &[2, 3, 6]);
    out.push(case(
        "pointwise conv",
        TOL,
        check_param_gradients(&store, NormMode::Train, H, all, |s| {
            let v = s.tape.constant(x.clone());
            pc_biased.forward(s, v)
        }),
    ));
    out.push(case(
        "pointwise conv + batch norm",
        TOL,
        check_param_gradients(&store, NormMode::Train, H, all, |s| {
            let v = s.tape.constant(x.clone());
            let h = pc.forward(s, v)?;
            bn.forward(s, h)
        }),
    ));

    let mut store = ParamStore::new();
    let widths = TNetWidths {
        point: [4, 5, 6],
        global: [5, 4],
    };
    let tnet = TNet::new(&mut store, "tnet", 3, widths, &mut rng);
    // The transform head starts at zero; give it values so the product
    // with the input is exercised away from the identity.
    for id in store.trainable_ids() {
        if store.name(id).starts_with("tnet.transform") {
            let n = store.get(id).numel();
            let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
            store.get_mut(id).data_mut().copy_from_slice(&vals);
        }
    }
    let x = rand_t(&mut rng, &[3, 8, 3]);
    out.push(case(
        "t-net",
        TOL,
        check_param_gradients(&store, NormMode::Train, H, all, |s| {
            let v = s.tape.constant(x.clone());
            Ok(tnet.forward(s, v)?.embedding)
        }),
    ));

    let xs = sparse_input(&mut rng, 4);
    let mut store = ParamStore::new();
    let cbr = ConvBnRelu::new(&mut store, "cbr", [3, 3, 3, 3], 4, 3, &mut rng).unwrap();
    let tcn = MsTcn::new(&mut store, "tcn", 4, &[3, 5], &mut rng).unwrap();
    let block = Bottleneck::new(&mut store, "block", 4, 2, 6, &mut rng).unwrap();
    let run = |s: &mut Session<'_, f64>, which: usize| -> Result<Var> {
        let v = xs.to_var(&mut s.tape, false);
        Ok(match which {
            0 => cbr.forward(s, &v)?.feats,
            1 => tcn.forward(s, &v)?.feats,
            _ => block.forward(s, &v)?.feats,
        })
    };
    for (i, name) in ["conv + bn + relu", "ms-tcn", "bottleneck"].into_iter().enumerate() {
        out.push(case(
            name,
            TOL,
            check_param_gradients(&store, NormMode::Train, H, all, |s| run(s, i)),
        ));
    }
    out
}

/// Miniature configuration used for the end-to-end check.
pub fn mini_config() -> ModelConfig {
    ModelConfig {
        frames: 4,
        points: 32,
        grid: 8,
        classes: 2,
        parts: true,
        part_labels: 4,
        tnet: TNetWidths {
            point: [4, 6, 8],
            global: [6, 4],
        },
        conv1: 4,
        conv2: 4,
        temporal_kernels: vec![3, 5],
        bottleneck1: (2, 6),
        bottleneck2: (3, 8),
        ..ModelConfig::default()
    }
}

/// Two sequences: one with two persons, one with a single person.
pub fn mini_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelInput<f64> {
    let person = |rng: &mut ChaCha8Rng| {
        let n = cfg.frames * cfg.points;
        let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
        let feats = (0..n)
            .flat_map(|_| center.map(|c| (c + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0)))
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..=cfg.part_labels as u16)).collect();
        PersonInput { feats, labels }
    };
    ModelInput {
        persons: vec![person(rng), person(rng), person(rng)],
        sequence_of: vec![0, 0, 1],
        sequences: 2,
    }
}

/// Cross-entropy of the miniature model, differentiated with respect to
/// (a sample of) every trainable parameter.
pub fn model_case(seed: u64, per_param: usize) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = mini_config();
    let mut store = ParamStore::new();
    let model = SpHpConvoT::new(cfg.clone(), &mut store, seed).unwrap();
    for id in store.trainable_ids() {
        if store.name(id).starts_with("tnet.transform") {
            let n = store.get(id).numel();
            let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
            store.get_mut(id).data_mut().copy_from_slice(&vals);
        }
    }
    let input = mini_input(&cfg, &mut rng);
    case(
        "end-to-end miniature model",
        TOL,
        check_param_gradients(&store, NormMode::Train, H, per_param, |s| {
            let out = model.forward(s, &input)?;
            s.tape.cross_entropy(out.logits, &[1, 0])
        }),
    )
}
