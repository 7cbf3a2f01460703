mod common;

use common::ensemble::{brute_force_lambda, lambda_cases};
use common::gradsuite::{mini_config, mini_input};
use convot_core::layers::Session;
use convot_core::model::{
    argmax_rows, ensemble_predict, fuse_people, search_lambda, Appearance, Fusion, ModelConfig, ModelInput,
    PersonInput,
};
use convot_core::tensor::NormMode;
use convot_core::{DenseTensor, Error, Network, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blob_person(rng: &mut ChaCha8Rng, frames: usize, points: usize) -> PersonInput<f32> {
    let mut feats = Vec::with_capacity(frames * points * 3);
    for t in 0..frames {
        let sway = 0.1 * (t as f32 * 0.3).sin();
        for _ in 0..points {
            let h: f32 = rng.random_range(0.0..1.0);
            let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let r = 0.15 + 0.1 * (h * 6.0).sin().abs();
            feats.extend_from_slice(&[0.5 + sway + r * a.cos() * 0.5, h, 0.5 + r * a.sin() * 0.5]);
        }
    }
    PersonInput {
        feats: feats.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        labels: vec![0; frames * points],
    }
}

#[test]
fn shape_trace_matches_backbone_table() {
    let cfg = ModelConfig {
        frames: 32,
        points: 512,
        grid: 64,
        classes: 5,
        ..ModelConfig::default()
    };
    assert_eq!(cfg.input_channels(), 3);
    let net = Network::<f32>::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input = ModelInput {
        persons: vec![blob_person(&mut rng, 32, 512)],
        sequence_of: vec![0],
        sequences: 1,
    };
    let trace = net.trace(&input).unwrap();
    let shapes: Vec<Vec<usize>> = trace.iter().map(|s| s.shape.clone()).collect();
    let expected: Vec<Vec<usize>> = vec![
        vec![1, 32, 512, 6],
        vec![1, 32, 64, 64, 64, 6],
        vec![1, 32, 64, 64, 64, 64],
        vec![1, 16, 32, 32, 32, 64],
        vec![1, 16, 32, 32, 32, 128],
        vec![1, 16, 32, 32, 32, 128],
        vec![1, 8, 16, 16, 16, 128],
        vec![1, 8, 16, 16, 16, 256],
        vec![1, 8, 16, 16, 16, 1024],
        vec![1, 1024],
        vec![1, 5],
    ];
    assert_eq!(shapes, expected);
}

#[test]
fn fusion_modes() {
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(DenseTensor::from_f64([3, 2], &[1.0, 2.0, 1.0, 2.0, 5.0, -1.0]).unwrap());
    let avg = fuse_people(&mut tape, f, &[0, 0, 1], 2, Fusion::Average).unwrap();
    assert_eq!(tape.data(avg), &[1.0, 2.0, 5.0, -1.0]);
    let cat = fuse_people(&mut tape, f, &[0, 0, 1], 2, Fusion::ConcatZeroPad).unwrap();
    assert_eq!(tape.shape(cat), &[2, 4]);
    assert_eq!(tape.data(cat), &[1.0, 2.0, 1.0, 2.0, 5.0, -1.0, 0.0, 0.0]);

    let g = tape.constant(DenseTensor::from_f64([2, 2], &[0.25, 3.0, -1.5, 0.5]).unwrap());
    let fwd = fuse_people(&mut tape, g, &[0, 0], 1, Fusion::Average).unwrap();
    let swapped = tape.constant(DenseTensor::from_f64([2, 2], &[-1.5, 0.5, 0.25, 3.0]).unwrap());
    let rev = fuse_people(&mut tape, swapped, &[0, 0], 1, Fusion::Average).unwrap();
    assert_eq!(tape.data(fwd), tape.data(rev));

    let crowd = tape.constant(DenseTensor::zeros([3, 2]));
    assert!(matches!(
        fuse_people(&mut tape, crowd, &[0, 0, 0], 1, Fusion::Average),
        Err(Error::Config(_))
    ));
}

#[test]
fn part_embedding_gradient_counts_rows() {
    let mut tape = Tape::<f64>::new();
    let table = tape.leaf(DenseTensor::zeros([21, 3]), true);
    let ids = [0, 4, 4, 20, 0, 0, 7];
    let e = tape.embedding(table, &ids).unwrap();
    let total = tape.sum(e);
    let g = tape.backward(total).unwrap();
    let grad = g.get(table).unwrap();
    for row in 0..21 {
        let count = ids.iter().filter(|&&i| i == row).count() as f64;
        assert_eq!(&grad[row * 3..row * 3 + 3], &[count; 3], "row {row}");
    }
    assert!(tape.embedding(table, &[21]).is_err());
}

#[test]
fn logits_ignore_point_order_within_frames() {
    let cfg = mini_config();
    let net = Network::<f64>::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = mini_input(&cfg, &mut rng);
    let base = net.logits(&input).unwrap();

    let mut shuffled = input.clone();
    let (n, c) = (cfg.points, cfg.raw_channels());
    for person in &mut shuffled.persons {
        for t in 0..cfg.frames {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let f: Vec<f64> = perm
                .iter()
                .flat_map(|&i| person.feats[(t * n + i) * c..(t * n + i + 1) * c].to_vec())
                .collect();
            let l: Vec<u16> = perm.iter().map(|&i| person.labels[t * n + i]).collect();
            person.feats[t * n * c..(t + 1) * n * c].copy_from_slice(&f);
            person.labels[t * n..(t + 1) * n].copy_from_slice(&l);
        }
    }
    let moved = net.logits(&shuffled).unwrap();
    let err = common::rel_err(base.data(), moved.data());
    assert!(err < 1e-12, "{err:e}");
}

#[test]
fn training_session_records_running_stats() {
    let cfg = mini_config();
    let mut net = Network::<f64>::new(cfg.clone(), 9).unwrap();
    let input = mini_input(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let mut s = Session::new(&net.params, NormMode::Train, true);
    net.model.forward(&mut s, &input).unwrap();
    let updates = s.take_stat_updates();
    assert!(!updates.is_empty());
    convot_core::layers::apply_stat_updates(&mut net.params, updates);
    let id = net.params.find("conv1.bn.running_mean").unwrap();
    assert!(net.params.get(id).data().iter().any(|&v| v != 0.0));
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let cfg = mini_config();
    let net = Network::<f64>::new(cfg.clone(), 3).unwrap();
    let input = mini_input(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let mut buf = Vec::new();
    net.params.write_checkpoint(&mut buf).unwrap();
    let mut other = Network::<f64>::new(cfg, 4).unwrap();
    assert_ne!(other.logits(&input).unwrap(), net.logits(&input).unwrap());
    other.params.load_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(other.logits(&input).unwrap(), net.logits(&input).unwrap());
}

fn logits(rows: &[[f64; 3]]) -> DenseTensor<f64> {
    DenseTensor::new([rows.len(), 3], rows.iter().flatten().copied().collect()).unwrap()
}

#[test]
fn ensemble_identity_and_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.random_range(1..30);
        let a = DenseTensor::new([n, 4], (0..4 * n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let b = DenseTensor::new([n, 4], (0..4 * n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let (_, p) = ensemble_predict(&a, &b, 1.0, 0.0).unwrap();
        assert_eq!(p, argmax_rows(&a));
    }
    let a = logits(&[[1.0, 0.0, 0.0], [0.0, 0.0, 2.0]]);
    let b = logits(&[[3.0, 1.0, 0.0], [0.0, 1.0, 1.5]]);
    assert_eq!(ensemble_predict(&a, &b, 0.5, 0.5).unwrap().1, vec![0, 2]);
}

#[test]
fn lambda_search_matches_brute_force() {
    for (a, b, labels) in lambda_cases() {
        let choice = search_lambda(&logits(&a), &logits(&b), &labels, 0.05).unwrap();
        let (l1, acc) = brute_force_lambda(&a, &b, &labels);
        assert_eq!((choice.lambda1, choice.accuracy), (l1, acc));
        assert!((choice.lambda1 + choice.lambda2 - 1.0).abs() < 1e-15);
    }
    // Identical models: every grid point ties, so the first one wins.
    let a = logits(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
    assert_eq!(search_lambda(&a, &a, &[0, 0], 0.05).unwrap().lambda1, 0.0);
    // Perfect A, uninformative B.
    let b = logits(&[[0.0, 0.0, 9.0], [0.0, 0.0, 9.0]]);
    let c = search_lambda(&a, &b, &[0, 1], 0.05).unwrap();
    assert_eq!(c.accuracy, 1.0);
    assert!(search_lambda(&a, &b, &[], 0.05).is_err());
}

#[test]
fn config_text_round_trip_and_variants() {
    let sensor = ModelConfig {
        normals: true,
        appearance: Appearance::Intensity,
        parts: true,
        classes: 120,
        fusion: Fusion::Average,
        ..ModelConfig::default()
    };
    assert_eq!(sensor.input_channels(), 10);
    let mde = ModelConfig {
        appearance: Appearance::Rgb,
        ..sensor.clone()
    };
    assert_eq!(mde.input_channels(), 12);
    assert_eq!(ModelConfig::parse(&sensor.to_text()).unwrap(), sensor);
    assert_eq!(ModelConfig::parse(&mde.to_text()).unwrap(), mde);
    assert_eq!(ModelConfig::default().head_width(), 2048);
    assert_eq!(sensor.head_width(), 1024);

    let parsed = ModelConfig::parse("# desk\ngrid = 32\npoints=512\nconv1_extent = 3\n").unwrap();
    assert_eq!((parsed.grid, parsed.points, parsed.conv1_extent), (32, 512, [3; 4]));
    assert!(ModelConfig::parse("grid = many").is_err());
    assert!(ModelConfig::parse("colour = red").is_err());
    assert!(ModelConfig::parse("classes = 1").is_err());
}
