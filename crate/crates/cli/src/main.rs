mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Arg, ArgMatches, Args, FromArgMatches, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vagcn_core::autodiff::Tape;
use vagcn_core::checkpoint;
use vagcn_core::data::{load_container, save_container, synth_parts, synth_shapes, Dataset, Primitive, ALL_PRIMITIVES};
use vagcn_core::error::Error;
use vagcn_core::geometry::AngularMode;
use vagcn_core::gradcheck::{run_suite, DEFAULT_EPS, DEFAULT_TOLERANCE};
use vagcn_core::layers::{AggregationMode, Ctx, GraphBatch, ParamStore, VaConv};
use vagcn_core::model::{Model, ModelConfig, Task};
use vagcn_core::spatial::{knn_bruteforce, knn_grid, KnnParams, PointSet};
use vagcn_core::tensor::Tensor;
use vagcn_core::train::{
    check_dataset, config_sidecar, evaluate, load_config, metrics_from_scores, msi_probabilities, train, truncate_points,
};

use config::RunConfig;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_MISMATCH: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "vagcn", version, about = "Vector-attention graph convolution networks for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and metrics stream.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally with multi-sample inference.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Time neighbour search and VAConv forward passes (CSV on stdout).
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Comma-separated shape classes, or `all`.
    #[arg(long, default_value = "all")]
    classes: String,
    /// Clouds per class (per category for part segmentation).
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// classification or part_segmentation.
    #[arg(long, default_value = "classification")]
    task: String,
    #[arg(long)]
    out: PathBuf,
}

/// `--key value` for every configuration key.
#[derive(Clone, Debug, Default)]
struct Overrides(Vec<(String, String)>);

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(Self(
            config::all_keys()
                .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        config::all_keys().fold(cmd, |c, (k, help)| {
            c.arg(
                Arg::new(*k)
                    .long(*k)
                    .value_name("VALUE")
                    .help(*help)
                    .help_heading("Configuration"),
            )
        })
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shorthand for parallel_variant.
    #[arg(long)]
    variant: Option<String>,
    /// Shorthand for channel_variant.
    #[arg(long)]
    channels: Option<String>,
    /// Shorthand for aggregation_mode.
    #[arg(long)]
    agg: Option<String>,
    /// Shorthand for angular_mode.
    #[arg(long)]
    angular: Option<String>,
    /// Radii of layer 1, layer 2 and fusion as `a,b/c,d/e,f`.
    #[arg(long)]
    radii: Option<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[command(flatten)]
    overrides: Overrides,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let shorthands = [
            ("parallel_variant", &self.variant),
            ("channel_variant", &self.channels),
            ("aggregation_mode", &self.agg),
            ("angular_mode", &self.angular),
        ];
        for (k, v) in shorthands {
            if let Some(v) = v {
                rc.set(k, v)?;
            }
        }
        if let Some(r) = &self.radii {
            let sets: Vec<&str> = r.split('/').collect();
            if sets.len() != 3 {
                return Err(Error::Config(format!("--radii wants three sets separated by '/', got {r:?}")));
            }
            for (k, v) in ["radii_layer1", "radii_layer2", "radii_fusion"].into_iter().zip(sets) {
                rc.set(k, v)?;
            }
        }
        for (k, v) in &self.overrides.0 {
            rc.set(k, v)?;
        }
        Ok(rc)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation set; the training set is used when absent.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Checkpoint path (the best epoch is kept).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON-lines metrics path.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Thread count recorded with the run.
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint; its `.json` sidecar supplies the model configuration.
    #[arg(long)]
    model: PathBuf,
    /// Multi-sample inference repeats.
    #[arg(long)]
    msi: Option<usize>,
    /// Seed of the multi-sample subsampling.
    #[arg(long, default_value_t = 0)]
    msi_seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only items whose name contains this text.
    #[arg(long)]
    only: Option<String>,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "256,1024,4096", value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value = "8,20", value_delimiter = ',')]
    ks: Vec<usize>,
    /// Repetitions per measurement (at least 5).
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Search radius for the neighbour graphs.
    #[arg(long, default_value_t = 0.2)]
    radius: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
            Error::NanLoss { .. } | Error::NonFinite(_) => EXIT_NUMERIC,
            Error::CheckpointMismatch(_)
            | Error::DatasetMismatch(_)
            | Error::BadMagic { .. }
            | Error::Version(_)
            | Error::Length { .. }
            | Error::LabelRange { .. }
            | Error::OffParse { .. } => EXIT_MISMATCH,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse_task(s: &str) -> Result<Task, Error> {
    s.parse()
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let ds = match parse_task(&a.task)? {
        Task::Classification => {
            let classes: Vec<Primitive> = if a.classes == "all" {
                ALL_PRIMITIVES.to_vec()
            } else {
                a.classes.split(',').map(|c| c.trim().parse()).collect::<Result<_, _>>()?
            };
            synth_shapes(&classes, a.per_class, a.points, a.seed)?
        }
        Task::PartSegmentation => synth_parts(a.per_class, a.points, a.seed)?,
    };
    save_container(&ds, &a.out)?;
    let mut counts = vec![0usize; if ds.segmentation { 16 } else { ds.num_classes }];
    for s in &ds.samples {
        counts[s.label as usize] += 1;
    }
    println!(
        "wrote {} samples ({} points, {} {}) to {}",
        ds.len(),
        ds.num_points,
        ds.num_classes,
        if ds.segmentation { "part labels" } else { "classes" },
        a.out.display()
    );
    for (label, n) in counts.iter().enumerate().filter(|(_, n)| **n > 0) {
        println!("  label {label}: {n}");
    }
    Ok(())
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn dataset_model(rc: &RunConfig, ds: &Dataset) -> Result<ModelConfig, Error> {
    let task = if ds.segmentation { Task::PartSegmentation } else { Task::Classification };
    rc.model(task, ds.num_classes, ds.num_points, ds.extra_dim)
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    Ok(load_container(path)?)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let rc = a.cfg.resolve()?;
    let data = match (&a.data, a.cfg.print_config) {
        (Some(p), _) => Some(load(p)?),
        (None, true) => None,
        (None, false) => return Err(Error::Config("train needs --data".into()).into()),
    };
    let model_cfg = match &data {
        Some(ds) => dataset_model(&rc, ds)?,
        None => rc.model(Task::Classification, 8, 256, 0)?,
    };
    let mut tc = rc.train()?;
    if a.cfg.print_config {
        print!("{}", rc.render(&model_cfg, &tc));
        return Ok(());
    }
    let ds = data.expect("data loaded");
    let eval_set = a.eval.as_deref().map(load).transpose()?;
    tc.checkpoint = a.out;
    tc.metrics = a.metrics;
    tc.threads = a.threads.unwrap_or_else(default_threads);
    let mut model = Model::<f32>::new(model_cfg)?;
    let report = train(&mut model, &ds, eval_set.as_ref(), &tc)?;
    let last = report.history.last().expect("at least one epoch");
    println!(
        "{}",
        json!({
            "best_epoch": report.best_epoch,
            "best": report.best,
            "final": last.metrics,
            "final_loss": last.loss,
            "wall_s": last.wall_s,
        })
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let rc = a.cfg.resolve()?;
    let ds = load(&a.data)?;
    let sidecar = config_sidecar(&a.model);
    let model_cfg = if sidecar.exists() {
        rc.apply_model(load_config(&sidecar)?)?
    } else {
        dataset_model(&rc, &ds)?
    };
    if a.cfg.print_config {
        print!("{}", rc.render(&model_cfg, &rc.train()?));
        return Ok(());
    }
    let _threads = a.threads.unwrap_or_else(default_threads);
    let mut model = Model::<f32>::new(model_cfg)?;
    checkpoint::load(&mut model.store, &a.model)?;
    let batch = rc.train()?.batch_size;
    let out = match a.msi {
        Some(r) => {
            let probs = msi_probabilities(&model, &ds, r, a.msi_seed, batch)?;
            let m = metrics_from_scores(&model, &ds, &probs)?;
            let mut v = serde_json::to_value(m).expect("metrics serialise");
            v["msi"] = json!(r);
            v
        }
        None => {
            check_dataset(&model.cfg, &ds, true)?;
            let n = model.cfg.points_per_sample;
            let ds = if ds.num_points > n { truncate_points(&ds, n)? } else { ds };
            serde_json::to_value(evaluate(&model, &ds, batch)?).expect("metrics serialise")
        }
    };
    println!("{out}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if !(a.eps > 0.0) {
        return Err(Error::Config("--eps must be positive".into()).into());
    }
    let results = run_suite(a.only.as_deref(), a.eps);
    if results.is_empty() {
        return Err(Error::Config(format!("no gradcheck item matches {:?}", a.only.unwrap_or_default())).into());
    }
    let mut worst: Option<(f64, String)> = None;
    for (name, r) in &results {
        let (err, detail) = match r {
            Ok(rep) => (
                rep.max_rel_err,
                format!(
                    "{name}: input {} element {} analytic {:e} numeric {:e}",
                    rep.worst_input, rep.worst_element, rep.analytic, rep.numeric
                ),
            ),
            Err(e) => (f64::INFINITY, format!("{name}: {e}")),
        };
        let status = if err < DEFAULT_TOLERANCE { "ok" } else { "FAIL" };
        println!("{name:<20} {err:.3e} {status}");
        if err >= DEFAULT_TOLERANCE && worst.as_ref().is_none_or(|(w, _)| err > *w) {
            worst = Some((err, detail));
        }
    }
    match worst {
        None => Ok(()),
        Some((err, detail)) => Err(Failure {
            code: EXIT_GRADCHECK,
            message: format!("relative error {err:.3e} exceeds {DEFAULT_TOLERANCE:e}; worst offender {detail}"),
        }),
    }
}

fn time_us(reps: usize, mut f: impl FnMut() -> Result<(), Error>) -> Result<(f64, f64), Error> {
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64() * 1e6);
    }
    t.sort_by(f64::total_cmp);
    Ok((t[reps / 2], t[0]))
}

fn bench(a: BenchArgs) -> CmdResult {
    if a.reps < 5 {
        return Err(Error::Config(format!("--reps must be at least 5, got {}", a.reps)).into());
    }
    println!("op,n,k,median_us,min_us");
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for &n in &a.sizes {
        let cloud: Vec<[f64; 3]> = (0..n)
            .map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let ps = PointSet::new(cloud.clone())?;
        for &k in &a.ks {
            let params = KnnParams::new(k, a.radius);
            let (med, min) = time_us(a.reps, || knn_bruteforce(&ps, params).map(drop))?;
            println!("knn_bruteforce,{n},{k},{med:.1},{min:.1}");
            let (med, min) = time_us(a.reps, || knn_grid(&ps, params).map(drop))?;
            println!("knn_grid,{n},{k},{med:.1},{min:.1}");

            let graph = GraphBatch::new(&[&knn_grid(&ps, params)?])?;
            let mut store = ParamStore::<f32>::new();
            let (cin, cout) = (16, 32);
            let conv = VaConv::new(&mut store, &mut rng, "bench", cin, cout, a.radius, AggregationMode::Sum, AngularMode::CosOfRatio);
            let pos = Tensor::new(&[1, n, 3], cloud.iter().flatten().map(|&v| v as f32).collect())?;
            let x = Tensor::new(&[1, n, cin], (0..n * cin).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
            let (med, min) = time_us(a.reps, || {
                let mut tape = Tape::new();
                let (p, xv) = (tape.constant(pos.clone()), tape.constant(x.clone()));
                let mut ctx = Ctx::new(&mut tape, &store, false, false);
                conv.forward(&mut ctx, xv, p, &graph).map(drop)
            })?;
            println!("vaconv_forward,{n},{k},{med:.1},{min:.1}");
        }
    }
    Ok(())
}
