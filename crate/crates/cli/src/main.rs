use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use injectnet::config::{Profile, TrainConfig};
use injectnet::experiment;
use injectnet::grad_check::{self, SuiteConfig};
use injectnet::network::{InjectionSite, NetworkParams};
use injectnet::synth::{self, GeneratorConfig};
use injectnet::trainer::{self, StageConfig};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(
    name = "injectnet",
    version,
    about = "Event recognition with injected detection features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (train and test splits).
    GenData(GenData),
    /// Train one stage or all three.
    Train(Train),
    /// Evaluate a checkpoint on the test split.
    Eval(Eval),
    /// Train stages 1-2 once, then stage 3 per injection site.
    Ablate(Ablate),
    /// Check every differentiable op against finite differences.
    Gradcheck(Gradcheck),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Images per split.
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Training config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config file seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum SiteArg {
    None,
    C6,
    C7,
    Both,
}

impl From<SiteArg> for InjectionSite {
    fn from(s: SiteArg) -> Self {
        match s {
            SiteArg::None => InjectionSite::None,
            SiteArg::C6 => InjectionSite::C6,
            SiteArg::C7 => InjectionSite::C7,
            SiteArg::Both => InjectionSite::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum TaskArg {
    Event,
    Rigid,
    Nonrigid,
    All,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory; stage N is written to `stageN.dodc`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = StageArg::All)]
    stage: StageArg,
    /// Stage-3 injection site (defaults to the config's).
    #[arg(long, value_enum)]
    injection: Option<SiteArg>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Injection site the checkpoint was trained with (defaults to the config's).
    #[arg(long, value_enum)]
    injection: Option<SiteArg>,
    #[arg(long, value_enum, default_value_t = TaskArg::All)]
    task: TaskArg,
    /// Also report event AP after late fusion with the detection scores.
    #[arg(long)]
    fusion: bool,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "none,c6,c7,both"
    )]
    injection: Vec<SiteArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per op.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<injectnet::Error> for Failure {
    fn from(e: injectnet::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(common: &Common) -> Result<TrainConfig, Failure> {
    let profile = match common.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    };
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::Usage(format!("cannot read config {}: {}", path.display(), e))
            })?;
            TrainConfig::parse(&text, profile)
                .map_err(|e| Failure::Usage(format!("{}: {}", path.display(), e)))?
        }
        None => TrainConfig::for_profile(profile),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn provenance(cfg: &TrainConfig) -> Value {
    json!({
        "seed": cfg.seed,
        "config_hash": format!("{:016x}", cfg.hash()),
        "version": VERSION,
    })
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Some(b), Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
    base
}

fn emit(value: &Value, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("json") + "\n";
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {}", path.display(), e))),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{} {} is not a directory",
            what,
            path.display()
        )))
    }
}

fn gen_data(args: GenData) -> Result<(), Failure> {
    if args.n < 2 {
        return Err(Failure::Usage(
            "--n must be at least 2 (one image per event class)".into(),
        ));
    }
    let cfg = GeneratorConfig::default();
    let ds = synth::generate_dataset(&cfg, args.n, args.n, args.seed)?;
    synth::write_dataset(&args.out, &ds)?;
    log::info!(
        "wrote {} + {} images to {}",
        args.n,
        args.n,
        args.out.display()
    );
    emit(
        &json!({
            "command": "gen-data",
            "out": args.out,
            "train": args.n,
            "test": args.n,
            "seed": args.seed,
            "version": VERSION,
        }),
        None,
    )
}

fn stage_record(stage: u8, path: &Path, losses: &[f64]) -> Value {
    let tail = &losses[losses.len() - (losses.len() / 10).max(1).min(losses.len())..];
    let final_loss = if tail.is_empty() {
        Value::Null
    } else {
        json!(tail.iter().sum::<f64>() / tail.len() as f64)
    };
    json!({
        "stage": stage,
        "checkpoint": path,
        "iterations": losses.len(),
        "final_loss": final_loss,
    })
}

fn train(args: Train) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    if let Some(site) = args.injection {
        cfg.arch.injection_site = site.into();
    }
    require_dir(&args.data, "--data")?;
    let site = cfg.arch.injection_site;
    let base = cfg.arch.with_injection(InjectionSite::None);
    let stages: Vec<u8> = match args.stage {
        StageArg::One => vec![1],
        StageArg::Two => vec![2],
        StageArg::Three => vec![3],
        StageArg::All => vec![1, 2, 3],
    };
    let ckpt = |s: u8| args.out.join(format!("stage{}.dodc", s));
    let mut params: Option<NetworkParams> = None;
    if stages[0] > 1 {
        let prev = ckpt(stages[0] - 1);
        if !prev.is_file() {
            return Err(Failure::Usage(format!(
                "stage {} needs {} from a previous run",
                stages[0],
                prev.display()
            )));
        }
        params = Some(NetworkParams::load(&prev, &base)?);
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {}", args.out.display(), e)))?;

    let ds = synth::read_dataset(&args.data)?;
    let set = experiment::training_set(&cfg, &ds.train)?;
    let mut records = Vec::new();
    for stage in stages {
        let started = Instant::now();
        let input = match params.take() {
            Some(p) => p,
            None => experiment::initial_params(&cfg)?,
        };
        let out = trainer::run_stage(
            &StageConfig::from_config(&cfg, stage, site)?,
            input,
            &set,
            &cfg,
            &mut experiment::stage_rng(cfg.seed, stage),
        )?;
        let (next, losses) = (out.params, out.losses);
        let path = ckpt(stage);
        next.save(&path)?;
        log::info!(
            "stage {} done in {:.1}s, wrote {}",
            stage,
            started.elapsed().as_secs_f64(),
            path.display()
        );
        records.push(stage_record(stage, &path, &losses));
        params = Some(next);
    }
    emit(
        &merge(
            json!({ "command": "train", "injection": site, "stages": records }),
            provenance(&cfg),
        ),
        None,
    )
}

fn eval(args: Eval) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    if let Some(site) = args.injection {
        cfg.arch.injection_site = site.into();
    }
    require_dir(&args.data, "--data")?;
    if !args.checkpoint.is_file() {
        return Err(Failure::Usage(format!(
            "--checkpoint {} does not exist",
            args.checkpoint.display()
        )));
    }
    let params = NetworkParams::load(&args.checkpoint, &cfg.arch)?;
    let ds = synth::read_dataset(&args.data)?;
    let reports = experiment::evaluate(&params, &ds.test, "test", args.fusion)?;
    let keep = |task: &str| match args.task {
        TaskArg::All => true,
        TaskArg::Event => task.starts_with("event"),
        TaskArg::Rigid => task == "rigid",
        TaskArg::Nonrigid => task == "nonrigid",
    };
    let reports: Vec<_> = reports.into_iter().filter(|r| keep(&r.task)).collect();
    emit(
        &merge(
            json!({
                "command": "eval",
                "checkpoint": args.checkpoint,
                "stage": params.stage,
                "reports": reports,
            }),
            provenance(&cfg),
        ),
        args.out.as_deref(),
    )
}

fn ablate(args: Ablate) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    require_dir(&args.data, "--data")?;
    let sites: Vec<InjectionSite> = args.injection.iter().map(|&s| s.into()).collect();
    let ds = synth::read_dataset(&args.data)?;
    let rows = experiment::ablate(&cfg, &ds.train, &ds.test, &sites)?;
    emit(
        &merge(
            json!({ "command": "ablate", "rows": rows }),
            provenance(&cfg),
        ),
        args.out.as_deref(),
    )
}

fn gradcheck(args: Gradcheck) -> Result<bool, Failure> {
    let cfg = SuiteConfig {
        seed: args.seed,
        instances: args.instances,
        ..SuiteConfig::default()
    };
    let reports = grad_check::run_suite(&cfg)?;
    let passed = reports.iter().all(|r| r.passed());
    for r in &reports {
        log::info!("{:<24} {}", r.op, r.status);
    }
    emit(
        &json!({
            "command": "gradcheck",
            "seed": cfg.seed,
            "eps": cfg.eps,
            "tolerance": cfg.tolerance,
            "passed": passed,
            "ops": reports,
            "version": VERSION,
        }),
        args.out.as_deref(),
    )?;
    Ok(passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Failure::Runtime("gradient check failed".into())),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(2)
        }
    }
}
