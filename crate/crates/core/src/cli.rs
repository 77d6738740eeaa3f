//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{model_from_pretrained, run_ablation, AblationPlan};
use crate::checkpoint::{self, load_model, save_model};
use crate::config::RunConfig;
use crate::data::{generate_split, write_dataset, Split};
use crate::dit::Phase;
use crate::error::{Error, Result};
use crate::gates::gate_maps;
use crate::imageio::write_ppm;
use crate::metrics::{evaluate, FeatureExtractor};
use crate::model::{generate_many, sampler_config, train, Model, TrainSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISSING_CHECKPOINT: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "mogle",
    version,
    about = "Mask- and text-conditioned diffusion with a mixture of global and local experts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic dataset shards.
    GenData {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.pretrain_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train adapters, experts and gate on top of a pretrained backbone.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Pretraining checkpoint.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate images for test-split conditions.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        guidance: Option<f64>,
        /// Drop both conditions.
        #[arg(long)]
        unconditional: bool,
    },
    /// Score samples from a checkpoint and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the composition, gating and expert × gating grids.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Pretraining checkpoint shared by every cell.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long)]
        sample_steps: Option<usize>,
    },
    /// Dump gate weight maps of a finetuned checkpoint.
    Gates {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1000usize, 750, 500, 250, 1])]
        timesteps: Vec<usize>,
        /// Test-split sample index.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Load { .. } => EXIT_MISSING_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}

/// Parse and run; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".step{step}"));
    out.with_file_name(name)
}

fn train_and_save(model: &mut Model, steps: usize, out: &Path) -> Result<()> {
    let cfg = model.cfg.clone();
    let samples = generate_split(cfg.seed, Split::Train, cfg.data.n_train, cfg.data.n_test);
    let set = TrainSet::new(model, &samples)?;
    let every = cfg.train.checkpoint_every;
    let phase = format!("{:?}", model.phase).to_lowercase();
    train(model, &set, steps, |m, step, loss| {
        if step % 100 == 0 || step == steps {
            eprintln!("{phase} step {step}/{steps} loss {loss:.5}");
        }
        if every > 0 && step % every == 0 && step != steps {
            save_model(m, step, &checkpoint_path(out, step))?;
        }
        Ok(())
    })?;
    save_model(model, steps, out)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, out } => {
            let c = cfg.load()?;
            let m = write_dataset(&out, c.seed, c.data.n_train, c.data.n_test)?;
            eprintln!(
                "wrote {} train / {} test samples to {}",
                m.n_train,
                m.n_test,
                out.display()
            );
        }
        Command::Pretrain { cfg, out, steps } => {
            let c = cfg.load()?;
            let mut model = Model::new(&c, Phase::Pretrain)?;
            train_and_save(&mut model, steps.unwrap_or(c.train.pretrain_steps), &out)?;
        }
        Command::Finetune {
            cfg,
            init,
            out,
            steps,
        } => {
            let c = cfg.load()?;
            let pre = checkpoint::load(&init)?;
            let mut model = model_from_pretrained(&c, &pre)?;
            train_and_save(&mut model, steps.unwrap_or(c.train.steps), &out)?;
        }
        Command::Sample {
            ckpt,
            out,
            steps,
            seed,
            n,
            guidance,
            unconditional,
        } => {
            let (model, _) = load_model(&ckpt)?;
            let c = &model.cfg;
            let test = generate_split(c.seed, Split::Test, c.data.n_train, c.data.n_test);
            let n = n.min(test.len());
            let mut sampler = sampler_config(c);
            if let Some(s) = steps {
                sampler.steps = s;
            }
            if let Some(g) = guidance {
                sampler.guidance = g;
            }
            let (prompts, masks): (Vec<_>, Vec<_>) = test[..n]
                .iter()
                .map(|s| {
                    if unconditional {
                        (None, None)
                    } else {
                        (Some(s.prompt), Some(&s.mask))
                    }
                })
                .unzip();
            let imgs = generate_many(&model, &prompts, &masks, sampler, seed, 32)?;
            std::fs::create_dir_all(&out)?;
            for (img, s) in imgs.iter().zip(&test) {
                write_ppm(&out.join(format!("sample_{:06}.ppm", s.index)), img)?;
            }
            eprintln!("wrote {n} samples to {}", out.display());
        }
        Command::Eval { ckpt, out, n, seed } => {
            let (model, _) = load_model(&ckpt)?;
            let c = &model.cfg;
            let test = generate_split(c.seed, Split::Test, c.data.n_train, c.data.n_test);
            let n = n.unwrap_or(c.eval.n_samples).min(test.len());
            let prompts: Vec<_> = test[..n].iter().map(|s| Some(s.prompt)).collect();
            let masks: Vec<_> = test[..n].iter().map(|s| Some(&s.mask)).collect();
            let imgs = generate_many(&model, &prompts, &masks, sampler_config(c), seed, 32)?;
            let refs: Vec<_> = test.iter().map(|s| s.image.clone()).collect();
            let report = evaluate(
                &imgs,
                &refs,
                &test[..n].iter().map(|s| &s.mask).collect::<Vec<_>>(),
                &test[..n].iter().map(|s| s.prompt).collect::<Vec<_>>(),
                &FeatureExtractor::new(c.eval.feature_seed),
                seed,
                &c.config_hash(),
            )?;
            let mut doc = serde_json::to_value(&report)?;
            doc["config"] = serde_json::to_value(c)?;
            std::fs::write(&out, serde_json::to_string_pretty(&doc)?)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Ablate {
            cfg,
            init,
            out,
            seeds,
            steps,
            samples,
            sample_steps,
        } => {
            let c = cfg.load()?;
            let pre = checkpoint::load(&init)?;
            let plan = AblationPlan {
                seeds,
                finetune_steps: steps.unwrap_or(c.train.steps),
                eval_samples: samples,
                sample_steps: sample_steps.unwrap_or(c.sample.steps),
            };
            let summary = run_ablation(&c, &pre, &plan, |r| {
                eprintln!(
                    "seed {} {:>16} {:<22} fid {:.4}",
                    r.seed, r.table, r.row, r.report.desk_fid
                )
            })?;
            summary.write(&out)?;
            println!(
                "full model best in {}/{} seeds",
                summary.wins(),
                summary.full_model_best.len()
            );
        }
        Command::Gates {
            ckpt,
            out,
            timesteps,
            index,
        } => {
            let (model, _) = load_model(&ckpt)?;
            if model.phase != Phase::Finetune {
                return Err(Error::Config(
                    "gate maps need a finetuned checkpoint".into(),
                ));
            }
            let c = &model.cfg;
            let test = generate_split(c.seed, Split::Test, c.data.n_train, c.data.n_test);
            let sample = test
                .get(index)
                .ok_or_else(|| Error::Config(format!("test index {index} out of range")))?;
            let maps = gate_maps(&model, sample, &timesteps, c.seed)?;
            let paths = maps.write(&out)?;
            println!(
                "wrote {} grids; token variance {:.3e}, timestep variance {:.3e}",
                paths.len(),
                maps.token_variance(),
                maps.time_variance()
            );
        }
    }
    Ok(())
}
