use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mot::checkpoint::{Checkpoint, Precision};
use mot::closed_loop::{rollout_closed_loop, scenario_suite, ClosedLoopConfig, Driver, PolicyDriver};
use mot::config::{ClockMode, Head, RunConfig};
use mot::diagnostics::{check_action_expert, check_moa_block};
use mot::metrics::eval_open_loop;
use mot::numeric::gradcheck::GradCheckConfig;
use mot::policy::Policy;
use mot::scene::{build_dataset, Dataset, Renderer};
use mot::scheduler::{bench_config, compute_per_tick, run_rollout, staleness_sweep, ClockConfig, TickFeed};
use mot::train::{loss_curve_csv, RefinerData, RefinerTrainer, TrainData, Trainer};

#[derive(Parser)]
#[command(name = "mot", version, about = "Fast-slow mixture-of-transformers driving policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config file (`key = value` lines). Use `desk` or `default` for a built-in preset.
    config: String,
    /// Overrides applied after the file, as `key=value`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match self.config.as_str() {
            "desk" => RunConfig::desk(),
            "default" => RunConfig::default(),
            path => RunConfig::load(Path::new(path)).with_context(|| format!("reading config {path}"))?,
        };
        Ok(base.with_overrides(&self.overrides)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config with every key documented.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a synthetic dataset file and its manifest.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the action expert, then the refiner when `head = diffusion`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training dataset; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Continue from a 64-bit checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Store weights as 32-bit floats (drops optimiser state).
        #[arg(long)]
        f32: bool,
    },
    /// Open-loop L2, collision proxy and decision accuracy on the held-out split.
    EvalOpenloop {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pass trajectories through the diffusion refiner.
        #[arg(long)]
        refiner: bool,
        /// Understanding lag in frames.
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Staleness sweep: open-loop metrics at every stored understanding lag.
    EvalDecision {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        refiner: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Closed-loop driving on the generated scenario suite.
    Rollout {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Omit to drive the untrained policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        refiner: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-tick latency of coupled or decoupled inference on one scenario.
    BenchLatency {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        period: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ClockMode>,
        #[arg(long)]
        ue_scale: Option<usize>,
        #[arg(long, default_value_t = 32)]
        ticks: usize,
        /// Run understanding on a worker thread instead of inline.
        #[arg(long)]
        threaded: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of action-expert and refiner-block gradients.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        instances: u64,
        #[arg(long, default_value_t = 0)]
        block: usize,
    },
}

fn parse_mode(s: &str) -> Result<ClockMode, String> {
    s.parse().map_err(|e: mot::Error| e.to_string())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Config { cfg } => print!("{}", cfg.load()?.to_text()),
        Command::SynthData { cfg, split, out } => synth_data(&cfg.load()?, split, &out)?,
        Command::Train {
            cfg,
            data,
            out,
            loss_csv,
            resume,
            f32,
        } => train(&cfg.load()?, data.as_deref(), &out, loss_csv.as_deref(), resume.as_deref(), f32)?,
        Command::EvalOpenloop {
            cfg,
            checkpoint,
            data,
            refiner,
            offset,
            csv,
        } => {
            let cfg = cfg.load()?;
            let policy = load_policy(&cfg, &checkpoint, refiner)?;
            let data = eval_data(&cfg, data.as_deref())?;
            let report = eval_open_loop(&data, &policy, offset, cfg.ego_radius)?;
            println!("{report}");
            println!("collision is a proxy: predicted waypoints inside an obstacle circle inflated by the ego radius");
            write_opt(csv.as_deref(), &report.to_csv())?;
        }
        Command::EvalDecision {
            cfg,
            checkpoint,
            data,
            refiner,
            csv,
        } => {
            let cfg = cfg.load()?;
            let policy = load_policy(&cfg, &checkpoint, refiner)?;
            let data = eval_data(&cfg, data.as_deref())?;
            let offsets: Vec<usize> = (0..=cfg.stale_frames).collect();
            let table = staleness_sweep(&data, &policy, &offsets, cfg.ego_radius)?;
            print!("{table}");
            println!(
                "worst L2 increase {:.2}%, worst joint drop {:.2} points",
                100.0 * table.worst_l2_increase(),
                table.worst_joint_drop()
            );
            write_opt(csv.as_deref(), &table.to_csv())?;
        }
        Command::Rollout {
            cfg,
            checkpoint,
            refiner,
            csv,
        } => {
            let cfg = cfg.load()?;
            let policy = match checkpoint {
                Some(p) => load_policy(&cfg, &p, refiner)?,
                None => Policy::new(&cfg),
            };
            let renderer = Renderer::new(cfg.render_seed, cfg.width, cfg.rgb_tokens, cfg.bev_tokens);
            let suite = scenario_suite(cfg.rollout_scenarios, cfg.eval_seed, &cfg.synth_config())?;
            let report = rollout_closed_loop(
                &suite,
                || Box::new(PolicyDriver::new(&policy, cfg.ue_period)) as Box<dyn Driver>,
                &renderer,
                &ClosedLoopConfig::from_run(&cfg),
            )?;
            print!("{report}");
            write_opt(csv.as_deref(), &report.to_csv())?;
        }
        Command::BenchLatency {
            cfg,
            period,
            mode,
            ue_scale,
            ticks,
            threaded,
            csv,
        } => {
            let mut cfg = cfg.load()?;
            if let Some(p) = period {
                cfg.ue_period = p;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = ue_scale {
                cfg.ue_scale = s;
            }
            if threaded {
                cfg.deterministic = false;
            }
            bench_latency(&bench_config(&cfg), ticks, csv.as_deref())?;
        }
        Command::Gradcheck { cfg, instances, block } => {
            let cfg = cfg.load()?;
            let check = GradCheckConfig::default();
            let mut failed = false;
            for i in 0..instances {
                for (what, r) in [
                    ("action expert", check_action_expert(&cfg, i, &check)?),
                    ("refiner block", check_moa_block(&cfg, i, block, &check)?),
                ] {
                    println!(
                        "instance {i} {what}: {} scalars, {} failures, max rel error {:.3e}",
                        r.checked, r.failures, r.max_rel_error
                    );
                    if !r.passed() {
                        if let Some((name, k, a, n)) = &r.worst {
                            println!("  worst {name}[{k}]: analytic {a:.6e}, numeric {n:.6e}");
                        }
                        failed = true;
                    }
                }
            }
            if failed {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn write_opt(path: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn split_dataset(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let (n, fraction, seed) = match split {
        Split::Train => (cfg.train_scenarios, cfg.async_fraction, cfg.train_seed),
        Split::Eval => (cfg.eval_scenarios, 0.0, cfg.eval_seed),
    };
    Ok(build_dataset(n, fraction, seed, &cfg.dataset_header(), &cfg.synth_config())?)
}

fn read_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let data = Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
    data.check_compatible(cfg)?;
    Ok(data)
}

fn eval_data(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => read_dataset(cfg, p),
        None => split_dataset(cfg, Split::Eval),
    }
}

fn synth_data(cfg: &RunConfig, split: Split, out: &Path) -> Result<()> {
    let data = split_dataset(cfg, split)?;
    data.write(out)?;
    let manifest = data.manifest();
    fs::write(out.with_extension("manifest"), &manifest)?;
    print!("{manifest}");
    println!("digest = {}", data.digest()?);
    Ok(())
}

fn load_policy(cfg: &RunConfig, path: &Path, refiner: bool) -> Result<Policy> {
    let ck = Checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    ck.check_compatible(cfg)?;
    let mut policy = ck.restore()?;
    policy.cfg = cfg.clone();
    policy.use_refiner = refiner;
    if refiner && ck.refiner_step == 0 {
        eprintln!("warning: checkpoint carries an untrained refiner");
    }
    Ok(policy)
}

fn train(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
    loss_csv: Option<&Path>,
    resume: Option<&Path>,
    f32: bool,
) -> Result<()> {
    let dataset = match data {
        Some(p) => read_dataset(cfg, p)?,
        None => split_dataset(cfg, Split::Train)?,
    };
    let precision = if f32 { Precision::F32 } else { Precision::F64 };
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            ck.check_compatible(cfg)?;
            let mut t = Trainer::resume(&ck)?;
            t.policy.cfg = cfg.clone();
            t
        }
        None => Trainer::new(Policy::new(cfg)),
    };
    let ue_digest = trainer.policy.ue.store().digest();
    let prepared = TrainData::new(&trainer.policy, &dataset)?;
    println!("{} training samples", prepared.len());
    let every = if cfg.checkpoint_every == 0 { cfg.steps } else { cfg.checkpoint_every };
    while trainer.step < cfg.steps {
        let until = ((trainer.step / every + 1) * every).min(cfg.steps);
        trainer.train(&prepared, until, |r| {
            if (r.step + 1) % 100 == 0 {
                println!(
                    "step {:>5} decision {:.4} temporal {:.4} spatial {:.4} total {:.4} lr {:.2e}",
                    r.step + 1,
                    r.decision,
                    r.temporal,
                    r.spatial,
                    r.total,
                    r.lr
                );
            }
        })?;
        if until < cfg.steps {
            let path = out.with_extension(format!("step{until}.ck"));
            trainer.checkpoint(precision).write(&path)?;
            println!("checkpoint {}", path.display());
        }
    }
    if trainer.policy.ue.store().digest() != ue_digest {
        bail!("understanding weights changed during training");
    }
    let mut ck = trainer.checkpoint(precision);
    let mut curve = loss_curve_csv(&trainer.history);
    if cfg.head == Head::Diffusion {
        let mut policy = trainer.policy;
        let rdata = RefinerData::new(&policy, &prepared)?;
        let mut rt = RefinerTrainer::new(&policy);
        rt.train(&mut policy, &rdata, cfg.refiner_steps, |r| {
            if (r.step + 1) % 100 == 0 {
                println!("refiner step {:>5} total {:.4} lr {:.2e}", r.step + 1, r.total, r.lr);
            }
        })?;
        let ae_optimizer = ck.ae_optimizer.take();
        ck = Checkpoint::capture(&policy, precision, ck.step, rt.step as u64);
        ck.ae_optimizer = ae_optimizer;
        ck.refiner_optimizer = Some(mot::checkpoint::OptimizerState::capture(&rt.optimizer));
        curve.push_str("# refiner\n");
        curve.push_str(&loss_curve_csv(&rt.history));
    }
    ck.write(out)?;
    println!("checkpoint {} ({})", out.display(), ck.digest()?);
    write_opt(loss_csv, &curve)?;
    Ok(())
}

fn bench_latency(cfg: &RunConfig, ticks: usize, csv: Option<&Path>) -> Result<()> {
    let policy = Policy::new(cfg);
    let (ue, ae) = compute_per_tick(&policy);
    let renderer = Renderer::new(cfg.render_seed, cfg.width, cfg.rgb_tokens, cfg.bev_tokens);
    let scenario = scenario_suite(1, cfg.eval_seed, &cfg.synth_config())?.remove(0);
    let feed = TickFeed {
        scenario: &scenario,
        renderer: &renderer,
        tick_s: cfg.tick_s,
        history_frames: cfg.history_frames,
    };
    let rollout = run_rollout(&feed, &policy, ClockConfig::from_run(cfg), ticks)?;
    let text = rollout.to_csv();
    print!("{text}");
    eprintln!(
        "mode {} period {} ue/ae compute {:.1}x mean tick latency {:.3} ms",
        cfg.mode,
        cfg.ue_period,
        ue as f64 / ae as f64,
        1e3 * rollout.mean_tick_latency()
    );
    write_opt(csv, &text)?;
    Ok(())
}
