use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mgkd_core::config::{ExperimentConfig, SweepAxis, SweepSection};
use mgkd_core::distill::DistillScheme;
use mgkd_core::pipeline;
use mgkd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mgkd", version, about = "Multi-granularity knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run seed; repeat for several. Replaces the config's seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output root, replacing `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Schedule multiplier applied before per-stage overrides.
    #[arg(long)]
    scale: Option<f64>,
    /// Distillation scheme: gwd, se or plain.
    #[arg(long)]
    scheme: Option<String>,
    /// Base KD hook name.
    #[arg(long)]
    hook: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Dims,
    Temperatures,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised teacher pretraining.
    TrainTeacher(Common),
    /// Attach and fit the AK/DK branches of a trained teacher.
    SelfAnalyze(Common),
    /// Distill a student from the self-analyzed teacher.
    Distill(Common),
    /// Compare a teacher and a student checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Accuracy under additive Gaussian input noise.
    Noise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Grid over encoder dimensions or branch temperatures.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
    },
    /// Frozen-backbone classifier fine-tuning on the configured target set.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Every stage whose table is present in the config, seed by seed.
    Run(Common),
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if !c.seeds.is_empty() {
        cfg.seeds = c.seeds.clone();
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = c.scale {
        cfg.scale = s;
    }
    if c.scheme.is_some() || c.hook.is_some() {
        let d = cfg
            .distill
            .as_mut()
            .ok_or_else(|| Error::Config("--scheme and --hook need a [distill] table".into()))?;
        if let Some(s) = &c.scheme {
            d.scheme = s.parse::<DistillScheme>()?;
        }
        if let Some(h) = &c.hook {
            d.hook = h.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn default_student(cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let d = cfg.distill_section()?;
    Ok(pipeline::distill_dir(cfg, d.scheme, &d.hook, seed).join("student.ckpt"))
}

fn say(path: &Path) {
    println!("wrote {}", path.display());
}

fn evaluate(cfg: &ExperimentConfig, data: &mgkd_core::data::Dataset, seed: u64, t: Option<&Path>, s: Option<&Path>) -> Result<()> {
    let teacher = t.map(Path::to_path_buf).unwrap_or_else(|| pipeline::t_sa_checkpoint_path(cfg, seed));
    let student = match s {
        Some(p) => p.to_path_buf(),
        None => default_student(cfg, seed)?,
    };
    let out = pipeline::stage_dir(cfg, "evaluate", seed);
    let r = pipeline::evaluate(cfg, data, &teacher, &student, &out)?;
    println!(
        "seed {seed}: teacher {:.4}, student {:.4}",
        r.teacher_accuracy, r.student_accuracy
    );
    say(&out.join("report.json"));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher(c) => {
            let cfg = load_config(&c)?;
            let data = pipeline::load_data(&cfg)?;
            for &seed in &cfg.seeds {
                pipeline::train_teacher(&cfg, &data, seed)?;
                say(&pipeline::stage_dir(&cfg, "teacher", seed).join("summary.json"));
            }
        }
        Command::SelfAnalyze(c) => {
            let cfg = load_config(&c)?;
            let data = pipeline::load_data(&cfg)?;
            for &seed in &cfg.seeds {
                let sa = pipeline::self_analyze(&cfg, &data, seed, true)?;
                say(&sa.dir.join("summary.json"));
            }
        }
        Command::Distill(c) => {
            let cfg = load_config(&c)?;
            cfg.distill_section()?;
            let data = pipeline::load_data(&cfg)?;
            for &seed in &cfg.seeds {
                let d = pipeline::distill(&cfg, &data, seed)?;
                println!("seed {seed}: {} test accuracy {:.4}", d.summary.scheme, d.summary.test_accuracy);
                say(&d.dir.join("summary.json"));
            }
        }
        Command::Evaluate { common, teacher, student } => {
            let cfg = load_config(&common)?;
            let data = pipeline::load_data(&cfg)?;
            evaluate(&cfg, &data, first_seed(&cfg), teacher.as_deref(), student.as_deref())?;
        }
        Command::Noise { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let seed = first_seed(&cfg);
            let model = match checkpoint {
                Some(p) => p,
                None => default_student(&cfg, seed)?,
            };
            let data = pipeline::load_data(&cfg)?;
            let out = pipeline::stage_dir(&cfg, "noise", seed);
            let curve = pipeline::noise(&cfg, &data, &model, &out)?;
            println!("variance of accuracy deltas {:.3e}", curve.variance);
            say(&out.join("noise.json"));
        }
        Command::Sweep { common, axis } => {
            let mut cfg = load_config(&common)?;
            if let Some(a) = axis {
                let s = cfg.sweep.get_or_insert_with(SweepSection::default);
                s.axis = match a {
                    AxisArg::Dims => SweepAxis::Dims,
                    AxisArg::Temperatures => SweepAxis::Temperatures,
                };
            }
            let plan = pipeline::plan_sweep(&cfg)?;
            for (p, why) in &plan.rejected {
                eprintln!("rejected {p:?}: {why}");
            }
            let data = pipeline::load_data(&cfg)?;
            let (_, rows) = pipeline::sweep(&cfg, &data)?;
            for r in rows {
                println!(
                    "dim_ak {} dim_dk {} tau_akb {} tau_dkb {}: {:.4}",
                    r.point.dim_ak, r.point.dim_dk, r.point.tau_akb, r.point.tau_dkb, r.mean_accuracy
                );
            }
            say(&cfg.out_dir.join("sweep/sweep.csv"));
        }
        Command::Transfer { common, checkpoint } => {
            let cfg = load_config(&common)?;
            if cfg.transfer.is_none() {
                return Err(Error::Config("the [transfer] table is missing".into()));
            }
            let seed = first_seed(&cfg);
            let model = match checkpoint {
                Some(p) => p,
                None => default_student(&cfg, seed)?,
            };
            let data = pipeline::load_data(&cfg)?;
            let out = pipeline::stage_dir(&cfg, "transfer", seed);
            let r = pipeline::transfer(&cfg, &data, &model, seed, &out)?;
            println!("source {:.4}, target {:.4}", r.source_accuracy, r.target_accuracy);
            say(&out.join("transfer.json"));
        }
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let data = pipeline::load_data(&cfg)?;
            for &seed in &cfg.seeds {
                let sa = pipeline::self_analyze(&cfg, &data, seed, true)?;
                say(&sa.dir.join("summary.json"));
                if cfg.distill.is_none() {
                    continue;
                }
                let d = pipeline::distill_with_teacher(&cfg, &data, seed, &sa.bundle)?;
                println!("seed {seed}: {} test accuracy {:.4}", d.summary.scheme, d.summary.test_accuracy);
                say(&d.dir.join("summary.json"));
                if cfg.evaluate.is_some() {
                    evaluate(&cfg, &data, seed, None, None)?;
                }
                if cfg.transfer.is_some() {
                    let out = pipeline::stage_dir(&cfg, "transfer", seed);
                    pipeline::transfer(&cfg, &data, &d.dir.join("student.ckpt"), seed, &out)?;
                    say(&out.join("transfer.json"));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
