use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use equigrasp_core::error::{Error, Result};
use equigrasp_core::group::CyclicGroup;
use equigrasp_core::runtime::{
    audit, evaluate, infer, load_model, load_split, nms, train, AlwaysFailPolicy, AuditOptions, EpochRecord, Mode,
    ModelPolicy, OraclePolicy, Policy, RunConfig,
};
use equigrasp_core::scene::{generate_dataset, read_record, Dataset, SceneRecord, SceneSpec};
use equigrasp_core::tensor::{DType, Scalar};

#[derive(Parser)]
#[command(name = "equigrasp", version, about = "C4-equivariant tri-plane grasp learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dtype: Option<DType>,
    /// Encoder family: strict, mixed or conventional.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Voxels per side for both the data and the encoder.
    #[arg(long, global = true)]
    grid: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a scene dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: Option<usize>,
        /// Keep existing scene files and write only the missing ones.
        #[arg(long)]
        resume: bool,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode and select grasps for one scene.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene record file, or a dataset directory together with `--index`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Quarter turns applied to the input TSDF before inference.
        #[arg(long, default_value_t = 0)]
        rotate: usize,
    },
    /// Equivariance audit of a checkpoint or a freshly initialised model.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Perturbs the audited kernel off its constraint space.
        #[arg(long, hide = true)]
        corrupt_kernel: bool,
    },
    /// Synthetic declutter evaluation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Declutter the scenes of this dataset instead of fresh ones.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyKind::Model)]
        policy: PolicyKind,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Model,
    Oracle,
    AlwaysFail,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = common.mode {
        m.apply(&mut cfg.encoder);
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    if let Some(d) = common.dtype {
        cfg.dtype = d;
    }
    if let Some(g) = common.grid {
        cfg.set_grid(g);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn print_epoch(e: &EpochRecord) {
    let val = e.val.map_or(String::from("-"), |v| format!("{:.4} (graspness {:.4})", v.total, v.graspness));
    println!(
        "epoch {:>2}  lr {:.1e}  train {:.4} (graspness {:.4})  val {val}  {:.1}s",
        e.epoch, e.lr, e.train.total, e.train.graspness, e.seconds
    );
}

fn run_train<T: Scalar>(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    let split = load_split(&ds, cfg.train.validation_fraction)?;
    println!("training on {} scenes, validating on {}", split.train.len(), split.val.len());
    let outcome = train::<T>(cfg, &split, Some(out))?;
    outcome.epochs.iter().for_each(print_epoch);
    println!("best epoch {}; checkpoints in {}", outcome.best_epoch, out.display());
    Ok(())
}

fn load_input(input: &Path, index: usize) -> Result<SceneRecord> {
    if input.is_dir() {
        Dataset::open(input)?.record(index)
    } else {
        read_record(input)
    }
}

fn run_infer<T: Scalar>(checkpoint: &Path, rec: &SceneRecord, rotate: usize, out: &Path) -> Result<()> {
    let (cfg, model, store) = load_model::<T>(checkpoint)?;
    let tsdf = rec.tsdf.rotate(CyclicGroup::C4.element(rotate % 4))?;
    let res = infer(&model, &store, &cfg.infer, &cfg.data.gripper, &tsdf)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    write_text(&out.join("inference.json"), &serde_json::to_string_pretty(&res)?)?;
    println!(
        "encode {:.1} ms  decode {:.1} ms  select {:.1} ms",
        res.timing.encode_ms, res.timing.decode_ms, res.timing.select_ms
    );
    if res.no_grasp {
        println!("no grasp above threshold {}", cfg.infer.quality_threshold);
    }
    for g in nms(&res.grasps, cfg.infer.nms_radius) {
        println!(
            "voxel {:?}  quality {:.3}  position [{:.3}, {:.3}, {:.3}]  quaternion [{:.3}, {:.3}, {:.3}, {:.3}]",
            g.voxel, g.quality, g.position[0], g.position[1], g.position[2], g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]
        );
    }
    Ok(())
}

fn run_audit<T: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>, opts: &AuditOptions, out: Option<&Path>) -> Result<bool> {
    let report = match checkpoint {
        Some(p) => {
            let (ckpt_cfg, model, store) = load_model::<T>(p)?;
            audit::<T>(&ckpt_cfg, Some((&model, &store)), opts)?
        }
        None => audit::<T>(cfg, None, opts)?,
    };
    print!("{}", report.table());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
        write_text(&dir.join("audit.json"), &serde_json::to_string_pretty(&report)?)?;
        write_text(&dir.join("audit.txt"), &report.table())?;
    }
    Ok(report.passed)
}

fn run_eval<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    policy: PolicyKind,
    out: &Path,
) -> Result<()> {
    let (cfg, model) = match checkpoint {
        Some(p) => {
            let (c, m, s) = load_model::<T>(p)?;
            (c, Some((m, s)))
        }
        None if policy == PolicyKind::Model => {
            return Err(Error::Config("the model policy needs --checkpoint".into()));
        }
        None => (cfg.clone(), None),
    };
    let scenes: Option<Vec<SceneSpec>> = match data {
        Some(d) => {
            let ds = Dataset::open(d)?;
            Some((0..ds.len()).map(|i| ds.record(i).map(|r| r.spec)).collect::<Result<_>>()?)
        }
        None => None,
    };
    let gripper = cfg.data.gripper;
    let mut make = |seed: u64| -> Box<dyn Policy + '_> {
        match (policy, &model) {
            (PolicyKind::Model, Some((m, s))) => {
                let mut config = cfg.infer.clone();
                config.seed = seed;
                Box::new(ModelPolicy { model: m, store: s, config, gripper })
            }
            (PolicyKind::AlwaysFail, _) => Box::new(AlwaysFailPolicy),
            _ => Box::new(OraclePolicy { gripper, samples_per_object: cfg.eval.oracle_samples }),
        }
    };
    let report = evaluate(&cfg.eval, &gripper, cfg.encoder.grid, scenes.as_deref(), &mut make, Some(out))?;
    print!("{}", report.summary());
    println!("attempt log, report and plot in {}", out.display());
    Ok(())
}

macro_rules! by_dtype {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { common, scenes, resume } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = scenes {
                cfg.data.scenes = n;
            }
            let dir = out_dir(&common, "data");
            let report = generate_dataset(&dir, &cfg.data, resume)?;
            println!(
                "{} scenes written, {} kept, index at {}",
                report.written.len(),
                report.skipped.len(),
                dir.join("index.json").display()
            );
        }
        Command::Train { common, data, epochs } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let out = out_dir(&common, "runs/train");
            by_dtype!(cfg.dtype, run_train(&cfg, &data, &out))?;
        }
        Command::Infer { common, checkpoint, input, index, rotate } => {
            let rec = load_input(&input, index)?;
            let dtype = common.dtype.unwrap_or(DType::F32);
            let out = out_dir(&common, "runs/infer");
            by_dtype!(dtype, run_infer(&checkpoint, &rec, rotate, &out))?;
        }
        Command::Audit { common, checkpoint, samples, corrupt_kernel } => {
            let cfg = resolve(&common)?;
            let opts = AuditOptions { corrupt_kernel, samples };
            return by_dtype!(cfg.dtype, run_audit(&cfg, checkpoint.as_deref(), &opts, common.out.as_deref()));
        }
        Command::Eval { common, checkpoint, data, policy } => {
            let cfg = resolve(&common)?;
            let out = out_dir(&common, "runs/eval");
            by_dtype!(cfg.dtype, run_eval(&cfg, checkpoint.as_deref(), data.as_deref(), policy, &out))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("equivariance audit failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
