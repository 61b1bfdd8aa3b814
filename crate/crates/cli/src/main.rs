use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dcgn::data::{save_ppm, save_tensor};
use dcgn::harness::config::parse_override;
use dcgn::harness::suites::{run_suite, suites, STEP, TOLERANCE};
use dcgn::harness::{dump_attention, evaluate, resume, train, Checkpoint, EvalSpec, ExperimentConfig, Model};
use dcgn::Error;

#[derive(Parser)]
#[command(name = "dcgn", version, about = "Desk-scale GAN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file with `namespace.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and logs to output.dir.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint instead of starting fresh (only --set
        /// overrides apply on top of the checkpoint's config).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print key=value metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides applied to the checkpoint's config (eval.* keys).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Write FDDF features (real rows, then fake rows) to this NTF1 file.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Run gradient-check suites.
    Gradcheck {
        /// Run every registered suite.
        #[arg(long)]
        all: bool,
        /// Run the named suite (repeatable).
        #[arg(long)]
        suite: Vec<String>,
        /// List suite names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Dump generator attention maps for sampled images.
    AttnMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Feature-map position `i,j` (repeatable; default: center).
        #[arg(long = "pos", value_name = "I,J")]
        pos: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Materialize a dataset as an NTF1 tensor (and optionally PPM files).
    MakeData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Also write each image as `<dir>/<index>.ppm`.
        #[arg(long)]
        images: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs) -> dcgn::Result<ExperimentConfig> {
    let base = match &args.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            ExperimentConfig::from_text(&text)?
        }
        None => ExperimentConfig::default(),
    };
    apply_overrides(&base, &args.set)
}

fn apply_overrides(base: &ExperimentConfig, set: &[String]) -> dcgn::Result<ExperimentConfig> {
    let pairs = set
        .iter()
        .map(|s| parse_override(s))
        .collect::<dcgn::Result<Vec<_>>>()?;
    base.with_overrides(pairs)
}

fn parse_pos(s: &str) -> dcgn::Result<(usize, usize)> {
    s.split_once(',')
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
        .ok_or_else(|| Error::Config(format!("position {s:?} is not i,j")))
}

fn print_line(l: &str) {
    println!("{l}");
}

fn run(cli: Cli) -> dcgn::Result<bool> {
    match cli.command {
        Command::Train { cfg, resume: from } => {
            let outcome = match from {
                Some(path) => {
                    let mut ckpt = Checkpoint::load(&path)?;
                    let base = ExperimentConfig::from_text(&ckpt.config_text)?;
                    ckpt.config_text = apply_overrides(&base, &cfg.set)?.to_text();
                    resume(&ckpt, &mut print_line)?
                }
                None => train(&load_config(&cfg)?, &mut print_line)?,
            };
            println!("event=done checkpoint={}", outcome.run_dir.join("final.ckpt").display());
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            set,
            features,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut model = Model::from_checkpoint(&ckpt)?;
            model.config = apply_overrides(&model.config, &set)?;
            let report = evaluate(&model, &EvalSpec::from_config(&model.config))?;
            if let Some(path) = features {
                let f = report
                    .features
                    .as_ref()
                    .ok_or_else(|| Error::Contract("no features: fddf was not computed".into()))?;
                save_tensor(&path, f)?;
            }
            println!("{}", report.to_line());
            Ok(true)
        }
        Command::Gradcheck { all, suite, list } => {
            let registry = suites();
            if list {
                registry.iter().for_each(|s| println!("{}", s.name));
                return Ok(true);
            }
            let chosen: Vec<_> = if all {
                registry.iter().collect()
            } else {
                let mut v = Vec::new();
                for name in &suite {
                    v.push(
                        registry
                            .iter()
                            .find(|s| s.name == name)
                            .ok_or_else(|| Error::Config(format!("unknown suite {name:?}")))?,
                    );
                }
                v
            };
            if chosen.is_empty() {
                return Err(Error::Config("pass --all or --suite NAME".into()));
            }
            let mut ok = true;
            for s in chosen {
                let out = run_suite(s);
                let pass = out.pass();
                ok &= pass;
                for (seed, r) in &out.reports {
                    match r {
                        Ok(r) => println!(
                            "suite={} seed={seed} pass={} max_rel_err={:e} worst={}:{} checked={} step={STEP:e} tol={TOLERANCE:e}",
                            out.name, r.pass, r.max_rel_err, r.worst.0, r.worst.1, r.checked
                        ),
                        Err(e) => println!("suite={} seed={seed} pass=false error={e:?}", out.name),
                    }
                }
            }
            println!("gradcheck pass={ok}");
            Ok(ok)
        }
        Command::AttnMap {
            checkpoint,
            out,
            n,
            pos,
            seed,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = Model::from_checkpoint(&ckpt)?;
            let mut positions = pos.iter().map(|p| parse_pos(p)).collect::<dcgn::Result<Vec<_>>>()?;
            if positions.is_empty() {
                let r = model.gen.attention_resolution().unwrap_or(0);
                positions.push((r / 2, r / 2));
            }
            let files = dump_attention(&model, n, &positions, &out, seed)?;
            println!("event=attn_map files={} dir={}", files.len(), out.display());
            Ok(true)
        }
        Command::MakeData { cfg, out, n, images } => {
            let config = load_config(&cfg)?;
            let data = config.data.generate(n, config.train.seed)?;
            save_tensor(&out, &data)?;
            if let Some(dir) = images {
                write_images(&dir, &data)?;
            }
            println!(
                "event=make_data kind={} shape={:?} out={}",
                config.data.kind(),
                data.shape(),
                out.display()
            );
            Ok(true)
        }
    }
}

fn write_images(dir: &Path, data: &dcgn::tensor::Tensor) -> dcgn::Result<()> {
    if data.rank() != 4 {
        return Err(Error::Contract("--images needs an image dataset".into()));
    }
    std::fs::create_dir_all(dir)?;
    for i in 0..data.shape()[0] {
        save_ppm(dir.join(format!("{i:06}.ppm")), &data.select_first(i)?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
