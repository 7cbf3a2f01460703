use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use convot_core::geometry::CameraIntrinsics;
use convot_core::model::{ensemble_predict, search_lambda, Appearance, ModelConfig};
use convot_core::{DenseTensor, Network, Scalar};
use convot_harness::bench::{benchmark, format_table, BenchConfig};
use convot_harness::data::{load_split, make_batch, Sample, SampleMode};
use convot_harness::preprocess::{preprocess_clip, DepthSource, PreprocessConfig};
use convot_harness::seqfile::{load_sequence, save_sequence, DatasetIndex, Split};
use convot_harness::synth::{generate_dataset, Action, SynthConfig};
use convot_harness::train::{
    evaluate, load_model, save_config, train, EpochLog, Metrics, TrainConfig, CHECKPOINT_FILE, METRICS_FILE,
};
use convot_harness::{desk_config, Error, Result};

#[derive(Parser)]
#[command(name = "convot", version, about = "Point-cloud sequence action recognition")]
struct Cli {
    /// Model configuration file (key = value); defaults to the desk config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Depth maps and instance masks of one clip to a sequence file.
    Preprocess(PreprocessArgs),
    /// Generate the synthetic action dataset.
    Synth(SynthArgs),
    /// Train on a dataset directory; writes model.ckpt, model.cfg and metrics.tsv.
    Train(TrainArgs),
    /// Evaluate a trained model on one split.
    Eval(EvalArgs),
    /// Classify sequence files.
    Infer(InferArgs),
    /// Weighted logit ensemble of two models, tuned on the validation split.
    Ensemble(EnsembleArgs),
    /// Forward throughput over point and person counts.
    Bench(BenchArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    focal: f64,
    #[arg(long)]
    cx: f64,
    #[arg(long)]
    cy: f64,
    /// Meters per depth level.
    #[arg(long, default_value_t = 1e-3)]
    depth_unit: f64,
    /// Read `disparity_*.dmap` and convert with this scale.
    #[arg(long)]
    disparity_scale: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    disparity_eps: f64,
    #[arg(long, default_value_t = 2048)]
    points: usize,
    #[arg(long, default_value_t = 8)]
    windows: usize,
    #[arg(long, default_value_t = 16)]
    normal_k: usize,
    #[arg(long)]
    no_normals: bool,
    #[arg(long, value_enum, default_value_t = AppearanceArg::None)]
    appearance: AppearanceArg,
    #[arg(long, default_value_t = 64)]
    min_area: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum AppearanceArg {
    None,
    Intensity,
    Rgb,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long)]
    no_augment: bool,
    /// Stop after this many epochs without a validation improvement.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write per-sequence logits here.
    #[arg(long)]
    logits: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [512, 1024, 2048])]
    points: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2])]
    persons: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    iters: usize,
    /// Minimum wall time of one timed run, in seconds.
    #[arg(long, default_value_t = 1.0)]
    min_seconds: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.precision {
        Precision::F32 => run::<f32>(&cli),
        Precision::F64 => run::<f64>(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn model_config(cli: &Cli) -> Result<Option<ModelConfig>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(Some(ModelConfig::parse(&text)?))
}

fn split(name: &str) -> Result<Split> {
    Split::parse(name).ok_or_else(|| Error::Invalid(format!("unknown split '{name}'")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn print_metrics(name: &str, m: &Metrics) {
    if m.loss.is_finite() {
        println!("{name}: accuracy {:.4}, loss {:.6}", m.accuracy, m.loss);
    } else {
        println!("{name}: accuracy {:.4}", m.accuracy);
    }
    for (c, f1) in m.per_class_f1.iter().enumerate() {
        let label = Action::from_index(c).map_or_else(|| c.to_string(), |a| a.name().to_string());
        println!("  {label:<14} F1 {f1:.4}");
    }
}

fn logits_tensor<T: Scalar>(rows: &[Vec<f64>]) -> Result<DenseTensor<T>> {
    let cols = rows.first().map_or(0, Vec::len);
    Ok(DenseTensor::new(
        [rows.len(), cols],
        rows.iter().flatten().map(|&v| T::of(v)).collect(),
    )?)
}

fn run<T: Scalar>(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess(a) => {
            let cfg = PreprocessConfig {
                camera: CameraIntrinsics::new(a.focal, a.cx, a.cy)?,
                source: match a.disparity_scale {
                    Some(scale) => DepthSource::Monocular {
                        scale,
                        eps: a.disparity_eps,
                    },
                    None => DepthSource::Sensor { unit: a.depth_unit },
                },
                min_area: a.min_area,
                points: a.points,
                windows: a.windows,
                normal_k: (!a.no_normals).then_some(a.normal_k),
                appearance: match a.appearance {
                    AppearanceArg::None => Appearance::None,
                    AppearanceArg::Intensity => Appearance::Intensity,
                    AppearanceArg::Rgb => Appearance::Rgb,
                },
                ..PreprocessConfig::default()
            };
            let persons = preprocess_clip::<T>(&a.input, &cfg)?;
            if persons.is_empty() {
                return Err(Error::Invalid("no person survived preprocessing".into()));
            }
            save_sequence(&a.output, &persons)?;
            for p in &persons {
                println!("track {}: {} frames, {} points", p.track_id, p.frames.len(), p.point_count());
            }
        }
        Command::Synth(a) => {
            let cfg = SynthConfig {
                train: a.train,
                val: a.val,
                test: a.test,
                seed: cli.seed,
                ..SynthConfig::default()
            };
            fs::create_dir_all(&a.out).map_err(|e| Error::Io {
                path: a.out.display().to_string(),
                source: e,
            })?;
            let entries = generate_dataset(&a.out, &cfg)?;
            println!("wrote {} sequences to {}", entries.len(), a.out.display());
        }
        Command::Train(a) => {
            let index = DatasetIndex::open(&a.data)?;
            let config = match model_config(cli)? {
                Some(c) => c,
                None => ModelConfig {
                    classes: index.classes().max(2),
                    ..desk_config()
                },
            };
            if index.classes() > config.classes {
                return Err(Error::Invalid(format!(
                    "dataset has {} classes, model {}",
                    index.classes(),
                    config.classes
                )));
            }
            let train_set = load_split::<T>(&index, Split::Train, config.points)?;
            let val_set = load_split::<T>(&index, Split::Val, config.points)?;
            fs::create_dir_all(&a.out).map_err(|e| Error::Io {
                path: a.out.display().to_string(),
                source: e,
            })?;
            save_config(&a.out, &config)?;
            let tc = TrainConfig {
                epochs: a.epochs,
                batch: a.batch,
                lr0: a.lr,
                weight_decay: a.weight_decay,
                augment: if a.no_augment { None } else { TrainConfig::default().augment },
                seed: cli.seed,
                patience: a.patience,
                checkpoint: Some(a.out.join(CHECKPOINT_FILE)),
                ..TrainConfig::default()
            };
            let mut net = Network::<T>::new(config, cli.seed)?;
            let mut log = format!("{}\n", EpochLog::HEADER);
            println!("{}", EpochLog::HEADER);
            let report = train(&mut net, &train_set, &val_set, &tc, |l| {
                println!("{}", l.to_tsv());
                let _ = std::io::stdout().flush();
                log.push_str(&l.to_tsv());
                log.push('\n');
            })?;
            write_text(&a.out.join(METRICS_FILE), &log)?;
            println!(
                "best epoch {} (val accuracy {:.4})",
                report.best_epoch, report.best_val_accuracy
            );
            let test_set = load_split::<T>(&index, Split::Test, net.config().points)?;
            if !test_set.is_empty() {
                let (_, m) = evaluate(&net, &test_set, a.batch)?;
                print_metrics("test", &m);
            }
        }
        Command::Eval(a) => {
            let net = load_model::<T>(&a.model)?;
            let index = DatasetIndex::open(&a.data)?;
            let samples = load_split::<T>(&index, split(&a.split)?, net.config().points)?;
            if samples.is_empty() {
                return Err(Error::Invalid(format!("split '{}' is empty", a.split)));
            }
            let (rows, m) = evaluate(&net, &samples, 16)?;
            print_metrics(&a.split, &m);
            if let Some(path) = &a.logits {
                let mut text = String::new();
                for (s, row) in samples.iter().zip(&rows) {
                    let vals: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
                    text.push_str(&format!("{}\t{}\n", s.label, vals.join("\t")));
                }
                write_text(path, &text)?;
            }
        }
        Command::Infer(a) => {
            let net = load_model::<T>(&a.model)?;
            let cfg = net.config().clone();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cli.seed);
            for path in &a.inputs {
                let sample = Sample::new(load_sequence::<T>(path)?, 0, cfg.points)?;
                let (input, _) = make_batch(&[&sample], &cfg, SampleMode::Eval, None, &mut rng)?;
                let logits = net.logits(&input)?;
                let row: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
                let best = convot_harness::train::argmax_f64(std::slice::from_ref(&row))[0];
                let name = Action::from_index(best)
                    .filter(|_| cfg.classes == Action::ALL.len())
                    .map_or_else(|| best.to_string(), |a| a.name().to_string());
                let vals: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
                println!("{}\t{name}\t{}", path.display(), vals.join("\t"));
            }
        }
        Command::Ensemble(a) => {
            let net_a = load_model::<T>(&a.model_a)?;
            let net_b = load_model::<T>(&a.model_b)?;
            if net_a.config().classes != net_b.config().classes {
                return Err(Error::Invalid("models disagree on the class count".into()));
            }
            let index = DatasetIndex::open(&a.data)?;
            let logits_of = |net: &Network<T>, s: Split| -> Result<(DenseTensor<T>, Vec<usize>)> {
                let samples = load_split::<T>(&index, s, net.config().points)?;
                if samples.is_empty() {
                    return Err(Error::Invalid(format!("split '{}' is empty", s.name())));
                }
                let (rows, _) = evaluate(net, &samples, 16)?;
                Ok((logits_tensor(&rows)?, samples.iter().map(|s| s.label).collect()))
            };
            let (va, labels) = logits_of(&net_a, Split::Val)?;
            let (vb, _) = logits_of(&net_b, Split::Val)?;
            let choice = search_lambda(&va, &vb, &labels, a.step)?;
            println!(
                "lambda = ({:.3}, {:.3}), val accuracy {:.4}",
                choice.lambda1, choice.lambda2, choice.accuracy
            );
            let (ta, test_labels) = logits_of(&net_a, Split::Test)?;
            let (tb, _) = logits_of(&net_b, Split::Test)?;
            let (_, pred) = ensemble_predict(&ta, &tb, T::of(choice.lambda1), T::of(choice.lambda2))?;
            let m = Metrics::from_predictions(&pred, &test_labels, net_a.config().classes, f64::NAN);
            print_metrics("test (ensemble)", &m);
        }
        Command::Bench(a) => {
            let base = model_config(cli)?.unwrap_or_else(desk_config);
            let cfg = BenchConfig {
                points: a.points.clone(),
                persons: a.persons.clone(),
                repeats: a.repeats,
                iters: a.iters,
                min_seconds: a.min_seconds,
                seed: cli.seed,
                ..BenchConfig::default()
            };
            print!("{}", format_table(&benchmark::<T>(&base, &cfg)?));
        }
    }
    Ok(())
}
