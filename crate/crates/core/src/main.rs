//! `stewart-fk` command line: dataset generation, training, solving,
//! evaluation and benchmarking.
//!
//! Exit codes: 0 ok, 1 other runtime failure, 2 usage or input error,
//! 3 training failure, 4 singular Jacobian in the solver.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector6;
use serde::Serialize;

use stewart_fk::datagen::{self, Dataset, DatasetMeta, RotationMode};
use stewart_fk::evalbench::{run_benchmark, EvalSummary};
use stewart_fk::gnn::{checkpoint, train, Arch, Dims, Model, Schedule, TrainConfig, TrainError};
use stewart_fk::liegroup::{se3_log, Twist};
use stewart_fk::nrsolver::{refine, FkObjective, SolveParams, SolveReport, DEFAULT_GAMMA, DEFAULT_Z_MAX};
use stewart_fk::platform::{default_config, PlatformConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const SEED_ENV: &str = "STEWART_KIN_SEED";

#[derive(Parser, Debug)]
#[command(name = "stewart-fk", version, about = "Forward kinematics of the 6-6 Gough-Stewart platform")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Platform config (TOML); the built-in desk platform if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run; `STEWART_KIN_SEED` overrides it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Sample poses, solve IK and write a dataset with its train/test split.
    Gen(GenArgs),
    /// Train a network on a dataset file.
    Train(TrainArgs),
    /// Solve forward kinematics for one or many leg displacement vectors.
    Solve(SolveArgs),
    /// Network-only accuracy on a dataset.
    Eval(EvalArgs),
    /// Two-stage benchmark: network initializer then refinement.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Translation bounds, mm.
    #[arg(long, default_value_t = -50.0, allow_hyphen_values = true)]
    lmin: f64,
    #[arg(long, default_value_t = 50.0, allow_hyphen_values = true)]
    lmax: f64,
    /// Euler angle bounds, degrees.
    #[arg(long, default_value_t = -30.0, allow_hyphen_values = true)]
    theta_min: f64,
    #[arg(long, default_value_t = 30.0, allow_hyphen_values = true)]
    theta_max: f64,
    /// Rotation coordinates stored per record: quaternion or euler.
    #[arg(long, default_value = "quaternion")]
    rotation: String,
    /// Fraction of records in the training split.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    /// Also write CSV exports.
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Training dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Optional held-out dataset, evaluated after every epoch.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long, default_value = "disgnet")]
    arch: String,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Feature width H.
    #[arg(long, default_value_t = 16)]
    h: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Learning-rate schedule: constant or cosine.
    #[arg(long, default_value = "constant")]
    schedule: String,
    /// Rotation loss weight.
    #[arg(long, default_value_t = 250.0)]
    beta: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Args, Debug, Serialize)]
struct SolveArgs {
    /// Leg displacements l̄ − l, mm, comma separated.
    #[arg(long, allow_hyphen_values = true, conflicts_with_all = ["lbar", "los_file"])]
    los: Option<String>,
    /// Absolute leg lengths l̄, mm, comma separated.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "los_file")]
    lbar: Option<String>,
    /// Batch mode: one displacement vector per line.
    #[arg(long)]
    los_file: Option<PathBuf>,
    /// Initial guess: `zero`, a comma-separated twist, or a checkpoint path.
    #[arg(long, default_value = "zero", allow_hyphen_values = true)]
    init: String,
    /// Twist-step precision level.
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_Z_MAX)]
    z_max: usize,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Accuracy thresholds (mm and degrees), comma separated.
    #[arg(long, default_value = "0.5,1,1.5,2,3")]
    thresholds: String,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Use only the first N records.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "0.5,1,1.5,2,3")]
    thresholds: String,
}

/// A failed run and the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
    fn runtime(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }
}

type Run<T = ()> = Result<T, Failure>;

#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    version: String,
    /// Seconds since the Unix epoch.
    timestamp: u64,
    seed: u64,
    seed_from_env: bool,
    jobs: usize,
    config: Option<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    args: toml::Value,
}

struct Ctx {
    common: Common,
    seed: u64,
    seed_from_env: bool,
    cfg: PlatformConfig,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.common.out.join(name)
    }

    fn write(&self, name: &str, content: impl AsRef<[u8]>) -> Run {
        let p = self.path(name);
        std::fs::write(&p, content).map_err(|e| Failure::runtime(format!("writing {}: {e}", p.display())))
    }

    fn manifest<A: Serialize>(&self, sub: &str, args: &A, inputs: &[&Path], outputs: &[&str]) -> Run {
        let m = RunManifest {
            subcommand: sub,
            version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            seed: self.seed,
            seed_from_env: self.seed_from_env,
            jobs: self.common.jobs,
            config: self.common.config.as_ref().map(|p| p.display().to_string()),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            args: toml::Value::try_from(args).map_err(|e| Failure::runtime(e.to_string()))?,
        };
        let text = toml::to_string(&m).map_err(|e| Failure::runtime(e.to_string()))?;
        self.write(&format!("{sub}.manifest.toml"), text)
    }
}

fn parse_vec6(s: &str, what: &str) -> Run<Vector6<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(format!("{what}: {e}")))?;
    if v.len() != 6 || v.iter().any(|x| !x.is_finite()) {
        return Err(Failure::usage(format!("{what}: expected 6 finite comma-separated numbers, got {s:?}")));
    }
    Ok(Vector6::from_column_slice(&v))
}

fn parse_list(s: &str, what: &str) -> Run<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(format!("{what}: {e}")))?;
    if v.is_empty() || v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Failure::usage(format!("{what}: expected positive numbers, got {s:?}")));
    }
    Ok(v)
}

fn load_dataset(p: &Path) -> Run<Dataset> {
    datagen::load(p).map_err(|e| Failure::usage(format!("dataset {}: {e}", p.display())))
}

fn load_model(p: &Path) -> Run<Model> {
    checkpoint::load(p).map_err(|e| Failure::usage(format!("checkpoint {}: {e}", p.display())))
}

fn cmd_gen(ctx: &Ctx, a: &GenArgs) -> Run {
    let ordered = |lo: f64, hi: f64| lo <= hi;
    if !ordered(a.lmin, a.lmax) || !ordered(a.theta_min, a.theta_max) {
        return Err(Failure::usage(format!(
            "bounds must satisfy lmin <= lmax and theta-min <= theta-max (got {}..{} mm, {}..{} deg)",
            a.lmin, a.lmax, a.theta_min, a.theta_max
        )));
    }
    if !(a.split > 0.0 && a.split < 1.0) {
        return Err(Failure::usage("--split must lie in (0, 1)"));
    }
    let rotation_mode = match a.rotation.as_str() {
        "quaternion" => RotationMode::Quaternion,
        "euler" => RotationMode::Euler,
        r => return Err(Failure::usage(format!("--rotation: unknown mode {r:?} (quaternion | euler)"))),
    };
    let meta = DatasetMeta {
        l_min: a.lmin,
        l_max: a.lmax,
        theta_min: a.theta_min.to_radians(),
        theta_max: a.theta_max.to_radians(),
        rotation_mode,
        split_ratio: a.split,
        ..DatasetMeta::standard(&ctx.cfg, a.count, ctx.seed)
    };
    let ds = datagen::generate(&ctx.cfg, &meta).map_err(|e| Failure::usage(e.to_string()))?;
    let (tr, te) = datagen::split(&ds, a.split, ctx.seed);
    let mut outputs = vec!["dataset.gsfk", "train.gsfk", "test.gsfk"];
    for (name, d) in [("dataset.gsfk", &ds), ("train.gsfk", &tr), ("test.gsfk", &te)] {
        ctx.write(name, datagen::to_bytes(d))?;
    }
    if a.csv {
        for (name, d) in [("dataset.csv", &ds), ("train.csv", &tr), ("test.csv", &te)] {
            datagen::export_csv(d, &ctx.path(name)).map_err(|e| Failure::runtime(e.to_string()))?;
            outputs.push(name);
        }
    }
    ctx.manifest("gen", a, &[], &outputs)?;
    println!("wrote {} records ({} train, {} test) to {}", ds.records.len(), tr.records.len(), te.records.len(), ctx.common.out.display());
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Run {
    let arch: Arch = a.arch.parse().map_err(Failure::usage)?;
    let schedule: Schedule = a.schedule.parse().map_err(Failure::usage)?;
    if a.h == 0 || a.epochs == 0 {
        return Err(Failure::usage("--h and --epochs must be positive"));
    }
    let ds = load_dataset(&a.data)?;
    let valid = a.valid.as_deref().map(load_dataset).transpose()?;
    let tc = TrainConfig {
        learning_rate: a.lr,
        schedule,
        beta: a.beta,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: ctx.seed,
        ..TrainConfig::default()
    };
    let model = Model::init(arch, Dims::with_width(&ctx.cfg, a.h), ctx.seed, &ds);
    let (model, log) = train(model, &ds, valid.as_ref(), &tc).map_err(|e| match e {
        TrainError::InvalidConfig(_) | TrainError::EmptyDataset => Failure::usage(e.to_string()),
        TrainError::NonFiniteLoss { .. } => Failure { code: 3, msg: e.to_string() },
    })?;
    ctx.write("model.ckpt", checkpoint::to_bytes(&model))?;
    ctx.write("train_log.tsv", log.to_tsv())?;
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.valid.as_deref());
    ctx.manifest("train", a, &inputs, &["model.ckpt", "train_log.tsv"])?;
    if let Some(last) = log.epochs.last() {
        println!("epoch {} mean loss {:?}", last.epoch, last.mean_loss);
    }
    Ok(())
}

enum Init {
    Zero,
    Twist(Twist),
    Network(Model),
}

fn print_report(out: &mut String, r: &SolveReport) {
    let t = r.pose().homogeneous();
    let _ = writeln!(out, "T_final =");
    for i in 0..4 {
        let _ = writeln!(out, "  [{:>14.9} {:>14.9} {:>14.9} {:>14.9}]", t[(i, 0)], t[(i, 1)], t[(i, 2)], t[(i, 3)]);
    }
    let _ = writeln!(out, "xi_final = {:?}", r.xi_final.0.as_slice());
    let _ = writeln!(out, "converged = {}", r.converged);
    let _ = writeln!(out, "outer_iterations = {}", r.outer_iterations);
    let _ = writeln!(out, "final_step_norm = {:?}", r.final_step_norm);
    let _ = writeln!(out, "residual_norm_mm = {:?}", r.residual_norm);
    let _ = writeln!(out, "singular = {}", r.singular_flag);
    let _ = writeln!(out, "left_chart = {}", r.left_chart);
}

/// False for NaN as well as for non-positive values.
fn positive(x: f64) -> bool {
    x > 0.0
}

fn cmd_solve(ctx: &Ctx, a: &SolveArgs) -> Run {
    if !positive(a.gamma) || a.z_max == 0 {
        return Err(Failure::usage("--gamma and --z-max must be positive"));
    }
    let cfg = &ctx.cfg;
    let (batch, los): (bool, Vec<Vector6<f64>>) = match (&a.los, &a.lbar, &a.los_file) {
        (Some(s), None, None) => (false, vec![parse_vec6(s, "--los")?]),
        (None, Some(s), None) => (false, vec![parse_vec6(s, "--lbar")? - cfg.l0]),
        (None, None, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            let rows = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
                .map(|(i, l)| parse_vec6(l, &format!("{} line {}", p.display(), i + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            (true, rows)
        }
        _ => return Err(Failure::usage("give exactly one of --los, --lbar, --los-file")),
    };
    let init = match a.init.as_str() {
        "zero" => Init::Zero,
        s if s.contains(',') => Init::Twist(Twist(parse_vec6(s, "--init")?)),
        s => Init::Network(load_model(Path::new(s))?),
    };
    let xi0: Vec<Twist> = match &init {
        Init::Zero => vec![Twist::zero(); los.len()],
        Init::Twist(t) => vec![*t; los.len()],
        Init::Network(m) => {
            let lbars: Vec<Vector6<f64>> = los.iter().map(|l| l + cfg.l0).collect();
            m.predict_lbar(cfg, &lbars).iter().map(|p| se3_log(p).unwrap_or_else(|_| Twist::zero())).collect()
        }
    };
    let params = SolveParams { gamma: a.gamma, z_max: a.z_max, ..SolveParams::default() };
    let reports: Vec<SolveReport> = los.iter().zip(&xi0).map(|(l, x)| refine(&FkObjective::new(cfg, *l), x, &params)).collect();

    let mut inputs: Vec<&Path> = a.los_file.iter().map(|p| p.as_path()).collect();
    if let Init::Network(_) = init {
        inputs.push(Path::new(&a.init));
    }
    if batch {
        let mut s = String::from("index\tconverged\tsingular\tleft_chart\titerations\tresidual_mm\tx\ty\tz\tr00\tr01\tr02\tr10\tr11\tr12\tr20\tr21\tr22\n");
        for (i, r) in reports.iter().enumerate() {
            let p = r.pose();
            let m = p.r.matrix();
            let _ = write!(s, "{i}\t{}\t{}\t{}\t{}\t{:?}", r.converged, r.singular_flag, r.left_chart, r.outer_iterations, r.residual_norm);
            for v in p.t.iter() {
                let _ = write!(s, "\t{v:?}");
            }
            for row in 0..3 {
                for col in 0..3 {
                    let _ = write!(s, "\t{:?}", m[(row, col)]);
                }
            }
            s.push('\n');
        }
        ctx.write("solve_results.tsv", s)?;
        ctx.manifest("solve", a, &inputs, &["solve_results.tsv"])?;
        let ok = reports.iter().filter(|r| r.converged).count();
        println!("{ok}/{} converged", reports.len());
    } else {
        let mut s = String::new();
        print_report(&mut s, &reports[0]);
        ctx.write("solve_report.txt", &s)?;
        ctx.manifest("solve", a, &inputs, &["solve_report.txt"])?;
        print!("{s}");
    }
    if let Some(i) = reports.iter().position(|r| r.singular_flag) {
        return Err(Failure { code: 4, msg: format!("singular Jacobian at sample {i}") });
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Run {
    let thresholds = parse_list(&a.thresholds, "--thresholds")?;
    let model = load_model(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    if ds.records.is_empty() {
        return Err(Failure::usage("dataset has no records"));
    }
    let preds = model.predict_dataset(&ds);
    let truth: Vec<_> = ds.records.iter().map(|r| r.pose()).collect();
    let los: Vec<_> = ds.records.iter().map(|r| r.los(&ctx.cfg.l0)).collect();
    let summary = EvalSummary::compute(&ctx.cfg, &preds, &truth, &los, &thresholds).map_err(|e| Failure::runtime(e.to_string()))?;
    let mut tsv = String::from("index\ttrans_mm\trot_frobenius\n");
    for (i, (p, g)) in preds.iter().zip(&truth).enumerate() {
        let _ = writeln!(tsv, "{i}\t{:?}\t{:?}", (p.t - g.t).norm(), (p.r.matrix() - g.r.matrix()).norm());
    }
    let kv = summary.to_kv("");
    ctx.write("eval.txt", &kv)?;
    ctx.write("eval_samples.tsv", tsv)?;
    ctx.manifest("eval", a, &[&a.checkpoint, &a.data], &["eval.txt", "eval_samples.tsv"])?;
    print!("{kv}");
    Ok(())
}

fn cmd_bench(ctx: &Ctx, a: &BenchArgs) -> Run {
    let thresholds = parse_list(&a.thresholds, "--thresholds")?;
    if !positive(a.gamma) {
        return Err(Failure::usage("--gamma must be positive"));
    }
    let model = load_model(&a.checkpoint)?;
    let mut ds = load_dataset(&a.data)?;
    if let Some(n) = a.limit {
        ds.records.truncate(n);
        ds.meta.count = ds.records.len();
    }
    if ds.records.is_empty() {
        return Err(Failure::usage("dataset has no records"));
    }
    let out = run_benchmark(&ctx.cfg, &ds, &model, &SolveParams::with_gamma(a.gamma), &thresholds)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    let mut kv = out.report.to_kv();
    kv.push_str(&out.network.to_kv("network."));
    kv.push_str(&out.refined.to_kv("refined."));
    ctx.write("bench.txt", &kv)?;
    ctx.write("bench_samples.tsv", out.samples_tsv(&ctx.cfg))?;
    ctx.write("bench_failures.txt", out.failure_dump())?;
    ctx.manifest("bench", a, &[&a.checkpoint, &a.data], &["bench.txt", "bench_samples.tsv", "bench_failures.txt"])?;
    print!("{}", out.report.to_kv());
    Ok(())
}

fn run(cli: Cli) -> Run {
    let (seed, seed_from_env) = match std::env::var(SEED_ENV) {
        Ok(v) => (v.trim().parse::<u64>().map_err(|e| Failure::usage(format!("{SEED_ENV}={v:?}: {e}")))?, true),
        Err(_) => (cli.common.seed, false),
    };
    if cli.common.jobs == 0 {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.jobs)
        .build_global()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    let cfg = match &cli.common.config {
        Some(p) => PlatformConfig::load(p).map_err(|e| Failure::usage(format!("config {}: {e}", p.display())))?,
        None => default_config(),
    };
    std::fs::create_dir_all(&cli.common.out)
        .map_err(|e| Failure::runtime(format!("creating {}: {e}", cli.common.out.display())))?;
    let ctx = Ctx { common: cli.common, seed, seed_from_env, cfg };
    match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(&ctx, a),
        Cmd::Train(a) => cmd_train(&ctx, a),
        Cmd::Solve(a) => cmd_solve(&ctx, a),
        Cmd::Eval(a) => cmd_eval(&ctx, a),
        Cmd::Bench(a) => cmd_bench(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
