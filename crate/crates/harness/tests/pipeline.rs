use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use convot_core::geometry::CameraIntrinsics;
use convot_core::model::ModelConfig;
use convot_core::tnet::TNetWidths;
use convot_core::Network;
use convot_harness::data::{load_split, make_batch, Sample, SampleMode};
use convot_harness::imageio::{write_gray16, write_gray8};
use convot_harness::preprocess::{preprocess_clip, PreprocessConfig};
use convot_harness::seqfile::{DatasetIndex, Split};
use convot_harness::synth::{generate_dataset, generate_synthetic_sequence, render, Action, SpecRanges, SynthConfig, SyntheticActionSpec};
use convot_harness::train::{load_model, save_config, train, TrainConfig, CHECKPOINT_FILE};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        frames: 4,
        points: 64,
        grid: 8,
        classes: 5,
        parts: true,
        tnet: TNetWidths {
            point: [8, 8, 16],
            global: [8, 8],
        },
        conv1: 8,
        conv1_extent: [3; 4],
        conv2: 8,
        conv2_extent: [1, 3, 3, 3],
        temporal_kernels: vec![3, 5],
        bottleneck1: (4, 16),
        bottleneck2: (8, 32),
        ..ModelConfig::default()
    }
}

fn dataset(dir: &Path, train: usize, val: usize) -> DatasetIndex {
    let cfg = SynthConfig {
        train,
        val,
        test: 0,
        ranges: SpecRanges {
            frames: (8, 16),
            points: 96,
            ..SpecRanges::default()
        },
        seed: 5,
    };
    generate_dataset(dir, &cfg).unwrap();
    DatasetIndex::open(dir).unwrap()
}

#[test]
fn one_epoch_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let index = dataset(dir.path(), 8, 2);
    let cfg = tiny_config();
    let tr = load_split::<f32>(&index, Split::Train, cfg.points).unwrap();
    let va = load_split::<f32>(&index, Split::Val, cfg.points).unwrap();
    let mut net = Network::new(cfg, 1).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        batch: 4,
        ..TrainConfig::default()
    };
    let report = train(&mut net, &tr, &va, &tc, |_| {}).unwrap();
    assert_eq!(report.logs.len(), 1);
    assert!(report.logs[0].train_loss.is_finite());
    assert!(report.logs[0].val_loss.is_finite());
}

#[test]
fn memorizes_two_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let index = dataset(dir.path(), 2, 0);
    let cfg = tiny_config();
    let tr = load_split::<f32>(&index, Split::Train, cfg.points).unwrap();
    assert_ne!(tr[0].label, tr[1].label);
    let mut net = Network::new(cfg, 2).unwrap();
    let tc = TrainConfig {
        epochs: 80,
        batch: 2,
        lr0: 1e-2,
        augment: None,
        ..TrainConfig::default()
    };
    let report = train(&mut net, &tr, &[], &tc, |_| {}).unwrap();
    let last = report.logs.last().unwrap().train_loss;
    assert!(last < 0.01, "final training loss {last}");
}

#[test]
fn fixed_seed_reproduces_logs() {
    let dir = tempfile::tempdir().unwrap();
    let index = dataset(dir.path(), 6, 2);
    let cfg = tiny_config();
    let tr = load_split::<f64>(&index, Split::Train, cfg.points).unwrap();
    let va = load_split::<f64>(&index, Split::Val, cfg.points).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || {
        pool.install(|| {
            let mut net = Network::new(cfg.clone(), 3).unwrap();
            let tc = TrainConfig {
                epochs: 2,
                batch: 3,
                seed: 9,
                ..TrainConfig::default()
            };
            let mut logs = train(&mut net, &tr, &va, &tc, |_| {}).unwrap().logs;
            for l in &mut logs {
                l.seconds = 0.0;
            }
            logs
        })
    };
    assert_eq!(run(), run());
}

#[test]
fn model_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let net = Network::<f64>::new(cfg.clone(), 4).unwrap();
    save_config(dir.path(), &cfg).unwrap();
    let f = std::fs::File::create(dir.path().join(CHECKPOINT_FILE)).unwrap();
    net.params.write_checkpoint(f).unwrap();
    let back = load_model::<f64>(dir.path()).unwrap();
    assert_eq!(back.config(), &cfg);

    let spec = SyntheticActionSpec::random(
        Action::Wave,
        &SpecRanges {
            points: 80,
            ..SpecRanges::default()
        },
        &mut ChaCha8Rng::seed_from_u64(1),
    );
    let sample = Sample::new(generate_synthetic_sequence(&spec), 1, cfg.points).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (input, _) = make_batch(&[&sample], &cfg, SampleMode::Eval, None, &mut rng).unwrap();
    assert_eq!(net.logits(&input).unwrap(), back.logits(&input).unwrap());
}

#[test]
fn preprocess_recovers_rendered_people() {
    let spec = SyntheticActionSpec::random(
        Action::Handshake,
        &SpecRanges {
            frames: (5, 5),
            points: 4000,
            noise: 0.0,
            ..SpecRanges::default()
        },
        &mut ChaCha8Rng::seed_from_u64(3),
    );
    let people = generate_synthetic_sequence::<f64>(&spec);
    assert_eq!(people.len(), 2);
    let cam = CameraIntrinsics::new(300.0, 160.0, 120.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for t in 0..5 {
        let r = render(&[&people[0].frames[t], &people[1].frames[t]], &cam, 320, 240, 2);
        let mm = r.depth.map(|d| (d as f64 * 1000.0).round() as u16);
        write_gray16(&dir.path().join(format!("depth_{t:04}.png")), &mm).unwrap();
        write_gray8(&dir.path().join(format!("instances_{t:04}.png")), &r.instances).unwrap();
        write_gray8(&dir.path().join(format!("parts_{t:04}.png")), &r.parts).unwrap();
    }
    let cfg = PreprocessConfig {
        camera: cam,
        points: 256,
        ..PreprocessConfig::default()
    };
    let out = preprocess_clip::<f64>(dir.path(), &cfg).unwrap();
    assert_eq!(out.len(), 2);
    let dist = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
    for (k, person) in out.iter().enumerate() {
        assert_eq!(person.frames.len(), 5);
        for (t, frame) in person.frames.iter().enumerate() {
            assert_eq!(frame.len(), 256);
            assert_eq!(frame.feature_dim, 3);
            assert!(frame.labels.iter().all(|&l| (1..=14).contains(&l)));
            // Every point lies on one of the rendered surfaces.
            let sources: Vec<&[f64; 3]> = people.iter().flat_map(|p| &p.frames[t].points).collect();
            for p in &frame.points {
                let near = sources.iter().map(|s| dist(p, s)).fold(f64::INFINITY, f64::min);
                assert!(near < 0.03, "person {k} frame {t}: {near}");
            }
            let c = frame.centroid().unwrap();
            let truth = people[k].frames[t].centroid().unwrap();
            assert!(dist(&c, &truth) < 0.15, "person {k} frame {t}: {c:?} vs {truth:?}");
        }
    }
}

#[test]
fn monocular_path_reads_disparity() {
    let spec = SyntheticActionSpec::random(
        Action::Squat,
        &SpecRanges {
            frames: (3, 3),
            points: 3000,
            ..SpecRanges::default()
        },
        &mut ChaCha8Rng::seed_from_u64(4),
    );
    let people = generate_synthetic_sequence::<f64>(&spec);
    let cam = CameraIntrinsics::new(300.0, 160.0, 120.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let scale = 2.0f32;
    for t in 0..3 {
        let r = render(&[&people[0].frames[t]], &cam, 320, 240, 2);
        let disp = r.depth.map(|d| if d > 0.0 { scale / d } else { 0.0 });
        convot_harness::imageio::write_dmap(&dir.path().join(format!("disparity_{t:04}.dmap")), &disp).unwrap();
        write_gray8(&dir.path().join(format!("instances_{t:04}.png")), &r.instances).unwrap();
    }
    let cfg = PreprocessConfig {
        camera: cam,
        source: convot_harness::preprocess::DepthSource::Monocular { scale: scale.into(), eps: 1e-6 },
        points: 200,
        normal_k: None,
        ..PreprocessConfig::default()
    };
    let out = preprocess_clip::<f64>(dir.path(), &cfg).unwrap();
    assert_eq!(out.len(), 1);
    for frame in &out[0].frames {
        assert_eq!(frame.len(), 200);
        assert!(frame.labels.iter().all(|&l| l == 0));
    }
}
