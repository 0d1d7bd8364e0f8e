//! Single command-line entry point binding all subsystems: dataset dumps,
//! training and grid search, checkpoint evaluation, scaling benchmarks,
//! counter-synthesis soundness runs, and kernel/block gradient checks.
//!
//! Every run writes exactly one `manifest.json` (resolved configuration,
//! seeds, artifact paths, version, timestamps) under the output directory.
//! Exit codes: 0 success, 1 contract/usage error, 2 failed acceptance check.

use aussm_core::bench::{BenchConfig, ImplKind, KernelKind};
use aussm_core::blocks::ModelConfig;
use aussm_core::kernels::fd;
use aussm_core::kernels::{AussmParams, S6Params, SeqTensor};
use aussm_core::oracle;
use aussm_core::tasks::{self, SplitSpec, TaskSpec};
use aussm_core::train::{self, GridAxes, TrainConfig};
use aussm_core::{checkpoint, Error};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Parser, Debug)]
#[command(name = "aussm", version, about = "adaptive unitary / selective SSM toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = "aussm-out")]
    out: PathBuf,
    /// Root seed; all randomness derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate task splits and dump them as TSV token files.
    Gen(GenArgs),
    /// Train one configuration (or a grid) on a task.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a task split.
    Eval(EvalArgs),
    /// Runtime/memory scaling benchmark of both kernels.
    Bench(BenchArgs),
    /// Synthesized mod-k counter soundness report against the FSA oracle.
    Oracle(OracleArgs),
    /// Finite-difference gradient check of a kernel or a full block model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    task: String,
    /// Use the reduced split sizes instead of the full 10k/1k/10k protocol.
    #[arg(long)]
    small: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    task: String,
    /// Block pattern over {a, m}, e.g. "ma".
    #[arg(long, default_value = "ma")]
    pattern: String,
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    n_state: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    wd: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 20_000)]
    max_steps: usize,
    /// JSON config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated training seeds; the best seed is reported.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Run the full hyperparameter grid instead of a single configuration.
    #[arg(long)]
    grid: bool,
    /// Use the reduced split sizes (quick runs).
    #[arg(long)]
    small: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    small: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024,2048,4096,8192,16384")]
    lens: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    repeats: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Comma-separated subset of {recurrent, separable}.
    #[arg(long, value_delimiter = ',', default_value = "recurrent,separable")]
    impls: Vec<String>,
    /// Comma-separated subset of {aussm, s6}.
    #[arg(long, value_delimiter = ',', default_value = "aussm,s6")]
    kernels: Vec<String>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// Comma-separated moduli.
    #[arg(long, value_delimiter = ',', default_value = "2,3,5,7,97")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    len: usize,
    #[arg(long, default_value_t = 10)]
    words: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// One of: aussm, s6, block.
    #[arg(long, default_value = "aussm")]
    kernel: String,
    #[arg(long, default_value_t = 16)]
    l: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    n: usize,
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    artifacts: Vec<String>,
    tool_version: String,
    started_unix: u64,
    finished_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct ManifestSink {
    out: PathBuf,
    subcommand: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    artifacts: Vec<String>,
    started: u64,
}

impl ManifestSink {
    fn new(out: &Path, subcommand: &str, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        ManifestSink {
            out: out.to_path_buf(),
            subcommand: subcommand.into(),
            config,
            seeds,
            artifacts: Vec::new(),
            started: now_unix(),
        }
    }

    fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    fn finish(self) -> aussm_core::Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let manifest = RunManifest {
            subcommand: self.subcommand,
            config: self.config,
            seeds: self.seeds,
            artifacts: self.artifacts,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: self.started,
            finished_unix: now_unix(),
        };
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Input(e.to_string()))?;
        std::fs::write(&path, text)?;
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Explicit --help/--version exit 0; anything else (including a
            // missing subcommand) prints usage and exits 1.
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprintln!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> aussm_core::Result<ExitCode> {
    std::fs::create_dir_all(&cli.out)?;
    match &cli.cmd {
        Cmd::Gen(args) => cmd_gen(&cli, args),
        Cmd::Train(args) => cmd_train(&cli, args),
        Cmd::Eval(args) => cmd_eval(&cli, args),
        Cmd::Bench(args) => cmd_bench(&cli, args),
        Cmd::Oracle(args) => cmd_oracle(&cli, args),
        Cmd::Gradcheck(args) => cmd_gradcheck(&cli, args),
    }
}

fn split_spec(small: bool, seed: u64) -> SplitSpec {
    if small {
        SplitSpec::small(seed)
    } else {
        SplitSpec::new(seed)
    }
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> aussm_core::Result<ExitCode> {
    let spec = TaskSpec::new(tasks::TaskId::parse(&args.task)?);
    let split = split_spec(args.small, cli.seed);
    let mut sink = ManifestSink::new(
        &cli.out,
        "gen",
        json!({"task": args.task, "small": args.small, "split": split}),
        vec![cli.seed],
    );
    let splits = tasks::make_splits(&spec, &split)?;
    for (name, samples) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        let path = cli.out.join(format!("{}_{}.tsv", spec.id.name(), name));
        let mut f = std::fs::File::create(&path)?;
        tasks::dump_samples(&mut f, &spec, name, samples)?;
        sink.artifact(&path);
        println!(
            "wrote {} ({} samples, lengths {}..{})",
            path.display(),
            samples.len(),
            samples.iter().map(|s| s.len()).min().unwrap_or(0),
            samples.iter().map(|s| s.len()).max().unwrap_or(0)
        );
    }
    sink.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> aussm_core::Result<ExitCode> {
    let spec = TaskSpec::new(tasks::TaskId::parse(&args.task)?);
    let split = split_spec(args.small, cli.seed);
    let base_cfg = match &args.config {
        Some(path) => TrainConfig::from_json_file(path)?,
        None => TrainConfig::default(),
    };
    let cfg = TrainConfig {
        learning_rate: args.lr,
        weight_decay: args.wd,
        batch_size: args.batch_size,
        max_steps: args.max_steps,
        ..base_cfg
    };
    let mut sink = ManifestSink::new(
        &cli.out,
        "train",
        json!({
            "task": args.task, "pattern": args.pattern, "d_model": args.d_model,
            "n_state": args.n_state, "cfg": cfg, "grid": args.grid, "small": args.small,
            "split": split,
        }),
        args.seeds.clone(),
    );
    let splits = tasks::make_splits(&spec, &split)?;

    if args.grid {
        let axes = GridAxes::default();
        let result = train::grid_search(&axes, &args.seeds, |d, n, wd, lr, seed| {
            let cell_cfg = TrainConfig {
                learning_rate: lr,
                weight_decay: wd,
                seed,
                ..cfg.clone()
            };
            let report = train::train_task(&spec, &args.pattern, d, n, &cell_cfg, &splits)?;
            println!(
                "grid cell d={d} n={n} wd={wd} lr={lr} seed={seed}: val scaled {:.4}",
                report.summary.best_val_scaled
            );
            Ok(report.summary.best_val_scaled)
        })?;
        let path = cli.out.join(format!("{}_grid.csv", spec.id.name()));
        train::write_grid_csv(&path, &result)?;
        sink.artifact(&path);
        println!(
            "best cell: d={} n={} wd={} lr={} mean val scaled {:.4}",
            result.best.d_model,
            result.best.n_state,
            result.best.weight_decay,
            result.best.learning_rate,
            result.best.mean_val_scaled
        );
        sink.finish()?;
        return Ok(ExitCode::SUCCESS);
    }

    let mut best: Option<train::TrainReport> = None;
    for &seed in &args.seeds {
        let seed_cfg = TrainConfig { seed, ..cfg.clone() };
        let report = train::train_task(&spec, &args.pattern, args.d_model, args.n_state, &seed_cfg, &splits)?;
        println!(
            "seed {seed}: steps {} best val scaled {:.4} test scaled {:.4}{}",
            report.summary.steps_run,
            report.summary.best_val_scaled,
            report.summary.test_scaled,
            report
                .summary
                .failed
                .as_deref()
                .map(|f| format!(" [failed: {f}]"))
                .unwrap_or_default()
        );
        train::save_report(&cli.out, &report)?;
        let better = match &best {
            None => true,
            Some(b) => report.summary.best_val_scaled > b.summary.best_val_scaled,
        };
        if better {
            best = Some(report);
        }
    }
    let best = best.expect("at least one seed");
    let ckpt = cli.out.join(format!(
        "{}_{}_best.aussm",
        spec.id.name(),
        best.summary.pattern
    ));
    checkpoint::save_model(&ckpt, &best.best_params)?;
    sink.artifact(&ckpt);
    println!(
        "best seed {}: test accuracy {:.4}, scaled {:.4}; checkpoint {}",
        best.summary.seed,
        best.summary.test_accuracy,
        best.summary.test_scaled,
        ckpt.display()
    );
    sink.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> aussm_core::Result<ExitCode> {
    let spec = TaskSpec::new(tasks::TaskId::parse(&args.task)?);
    let model = checkpoint::load_model(&args.checkpoint)?;
    if model.cfg.vocab_size != spec.vocab_size() {
        return Err(Error::Input(format!(
            "checkpoint vocab {} does not match task vocab {}",
            model.cfg.vocab_size,
            spec.vocab_size()
        )));
    }
    let split = split_spec(args.small, cli.seed);
    let splits = tasks::make_splits(&spec, &split)?;
    let samples = match args.split.as_str() {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => return Err(Error::Input(format!("unknown split {other:?}"))),
    };
    let mut sink = ManifestSink::new(
        &cli.out,
        "eval",
        json!({"task": args.task, "checkpoint": args.checkpoint.display().to_string(),
               "split": args.split, "small": args.small}),
        vec![cli.seed],
    );
    let start = Instant::now();
    let acc = train::eval_accuracy(&model, samples)?;
    let scaled = train::scaled_accuracy(acc, spec.num_classes());
    println!(
        "{} {}: accuracy {:.4}, scaled {:.4} ({} samples, {:.1}s)",
        spec.id.name(),
        args.split,
        acc,
        scaled,
        samples.len(),
        start.elapsed().as_secs_f64()
    );
    let path = cli.out.join("eval.csv");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "task,split,samples,accuracy,scaled_accuracy")?;
    writeln!(f, "{},{},{},{},{}", spec.id.name(), args.split, samples.len(), acc, scaled)?;
    sink.artifact(&path);
    sink.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> aussm_core::Result<ExitCode> {
    let impls = args
        .impls
        .iter()
        .map(|s| match s.as_str() {
            "recurrent" => Ok(ImplKind::Recurrent),
            "separable" => Ok(ImplKind::Separable),
            other => Err(Error::Input(format!("unknown impl {other:?}"))),
        })
        .collect::<aussm_core::Result<Vec<_>>>()?;
    let kernels = args
        .kernels
        .iter()
        .map(|s| match s.as_str() {
            "aussm" => Ok(KernelKind::Aussm),
            "s6" => Ok(KernelKind::S6),
            other => Err(Error::Input(format!("unknown kernel {other:?}"))),
        })
        .collect::<aussm_core::Result<Vec<_>>>()?;
    let cfg = BenchConfig {
        lens: args.lens.clone(),
        batch: args.batch,
        d: args.d,
        n: args.n,
        repeats: args.repeats,
        warmup: args.warmup,
        impls,
        kernels,
        seed: cli.seed,
        ..Default::default()
    };
    let mut sink = ManifestSink::new(
        &cli.out,
        "bench",
        json!({"lens": cfg.lens, "batch": cfg.batch, "d": cfg.d, "n": cfg.n,
               "repeats": cfg.repeats, "warmup": cfg.warmup}),
        vec![cli.seed],
    );
    let rows = aussm_core::bench::run_bench(&cfg)?;
    for r in &rows {
        println!(
            "{:<9} {:<5} L={:<6} median {:>12} ns  peak {:>12} B{}",
            r.impl_kind.name(),
            r.kernel.name(),
            r.len,
            r.median_wall_ns,
            r.peak_tracked_bytes,
            if r.skipped { "  [skipped]" } else { "" }
        );
    }
    let path = cli.out.join("bench.csv");
    aussm_core::bench::write_bench_csv(&path, &rows)?;
    sink.artifact(&path);
    sink.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(cli: &Cli, args: &OracleArgs) -> aussm_core::Result<ExitCode> {
    let mut sink = ManifestSink::new(
        &cli.out,
        "oracle",
        json!({"k": args.k, "len": args.len, "words": args.words}),
        vec![cli.seed],
    );
    let path = cli.out.join("oracle.csv");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "k,len,words,mismatches,max_angle_err,drift_budget,pass")?;
    let mut all_pass = true;
    for &k in &args.k {
        let report = oracle::counter_soundness(k, args.len, args.words, cli.seed ^ k as u64)?;
        if let Some(w) = &report.horizon_warning {
            eprintln!("warning: {w}");
        }
        let pass = report.passed();
        all_pass &= pass;
        println!(
            "k={k} len={} words={}: mismatches={} max_angle_err={:.3e} budget={:.3e} [{}]",
            report.len,
            report.words,
            report.mismatches,
            report.max_angle_err,
            report.drift_budget,
            if pass { "PASS" } else { "FAIL" }
        );
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            k, report.len, report.words, report.mismatches, report.max_angle_err,
            report.drift_budget, pass
        )?;
    }
    sink.artifact(&path);
    sink.finish()?;
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> aussm_core::Result<ExitCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let data: Vec<f64> = (0..args.d * args.l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let u = SeqTensor::from_vec(data, 1, args.d, args.l)?;
    let report = match args.kernel.as_str() {
        "aussm" => {
            let p = AussmParams::init(args.d, args.n, &mut rng);
            fd::gradcheck_aussm(&p, &u, cli.seed ^ 1)?
        }
        "s6" => {
            let p = S6Params::init(args.d, args.n, &mut rng);
            fd::gradcheck_s6(&p, &u, cli.seed ^ 1)?
        }
        "block" => {
            use aussm_core::blocks::{model_backward, model_forward, ModelGrads, ModelParams};
            use aussm_core::kernels::TensorVisit;
            let cfg = ModelConfig::new("ma", 5, args.d.max(2), args.n);
            let model = ModelParams::init(cfg, &mut rng)?;
            let tokens: Vec<usize> = (0..args.l).map(|_| rng.gen_range(0..5)).collect();
            let probe: Vec<f64> = (0..args.l * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, cache) = model_forward(&model, &tokens)?;
            let mut grads = ModelGrads::zeros(&model);
            model_backward(&model, &cache, &probe, &mut grads)?;
            let analytic = grads.named_tensors();
            let numeric = fd::numeric_grads(
                &model,
                |m| {
                    let (lg, _) = model_forward(m, &tokens).unwrap();
                    lg.iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
                },
                fd::FD_STEP,
            );
            fd::compare_named(&analytic, &numeric)
        }
        other => return Err(Error::Input(format!("unknown gradcheck target {other:?}"))),
    };
    let sink = ManifestSink::new(
        &cli.out,
        "gradcheck",
        json!({"kernel": args.kernel, "l": args.l, "d": args.d, "n": args.n,
               "max_rel_err": report.max_rel_err, "worst": report.worst,
               "checked": report.checked}),
        vec![cli.seed],
    );
    println!(
        "gradcheck {}: {} elements, max rel err {:.3e} at {}",
        args.kernel, report.checked, report.max_rel_err, report.worst
    );
    sink.finish()?;
    Ok(if report.max_rel_err < 1e-5 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
