//! `matlat`: desk-scale PBR texture pipeline driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure,
//! 4 ordering-assertion failure.

mod ablate;
mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use matlat_core::config::Config;

#[derive(Parser)]
#[command(name = "matlat", version, about = "Material latent space pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Master seed; stages derive their own streams from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Config file overlaying the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Force fixed seeds and reduction order (already the default; kept as
    /// an explicit switch for scripts).
    #[arg(long, global = true, default_value_t = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset generation.
    Data {
        #[command(subcommand)]
        sub: DataCmd,
    },
    /// Base VAE pretraining and material VAE training.
    Vae {
        #[command(subcommand)]
        sub: VaeCmd,
    },
    /// Velocity-model training.
    Diffusion {
        #[command(subcommand)]
        sub: DiffusionCmd,
    },
    /// Draw canonical-view samples from a trained run.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        /// Diffusion run directory (its manifest links the VAE run).
        #[arg(long)]
        run: PathBuf,
        /// Restrict to one style id (default: all styles).
        #[arg(long)]
        style: Option<usize>,
    },
    /// Bake generated views into UV textures.
    Bake {
        #[command(flatten)]
        common: CommonArgs,
        /// Sample stage directory.
        #[arg(long)]
        views: PathBuf,
    },
    /// Evaluate generated views against references.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Sample stage directory holding the generated views.
        #[arg(long)]
        generated: PathBuf,
        /// Dataset (data stage) directory used for references/diagnostics.
        #[arg(long)]
        reference: PathBuf,
    },
    /// Run the full pipeline for the configured variant.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the component ablation matrix with ordering assertions.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-render the ablation table from a completed ablation directory.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// Ablation output directory (defaults to --out).
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generate the synthetic multi-view PBR dataset.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Subcommand)]
enum VaeCmd {
    /// Pretrain the base 3-channel VAE on albedo views.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Data stage directory (generated if omitted).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a material VAE variant on top of the frozen base.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// frozen | res_reg | res_id | direct_reg
        #[arg(long)]
        variant: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Base run directory (pretrained if omitted).
        #[arg(long)]
        base: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DiffusionCmd {
    /// Train the multi-view velocity model.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// VAE run directory (trained if omitted).
        #[arg(long)]
        vae: Option<PathBuf>,
        /// on | off
        #[arg(long)]
        caa: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(common: &CommonArgs) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path).map_err(|e| anyhow!("{e}"))?,
        None => Config::default_desk(),
    };
    cfg.set("seed", common.seed);
    cfg.set("deterministic", common.deterministic);
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ablate::OrderingFailure>().is_some() {
                ExitCode::from(4)
            } else if e.downcast_ref::<matlat_core::config::ConfigError>().is_some()
                || e.to_string().contains("config")
            {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data { sub } => match sub {
            DataCmd::Gen { common } => {
                let cfg = load_config(&common)?;
                let dir = pipeline::stage_data(&cfg, &common.out, common.seed)?;
                println!("data: {}", dir.display());
                Ok(())
            }
        },
        Command::Vae { sub } => match sub {
            VaeCmd::Pretrain { common, data } => {
                let cfg = load_config(&common)?;
                let data_dir = match data {
                    Some(d) => d,
                    None => pipeline::stage_data(&cfg, &common.out, common.seed)?,
                };
                let dir = pipeline::stage_base(&cfg, &common.out, common.seed, &data_dir)?;
                println!("base: {}", dir.display());
                Ok(())
            }
            VaeCmd::Train {
                common,
                variant,
                data,
                base,
            } => {
                let mut cfg = load_config(&common)?;
                cfg.set("vae.variant", &variant);
                // validate early so bad variants exit with a config error
                matlat_core::matvae::Variant::parse(&variant)
                    .map_err(|e| anyhow!("config: {e}"))?;
                let data_dir = match data {
                    Some(d) => d,
                    None => pipeline::stage_data(&cfg, &common.out, common.seed)?,
                };
                let base_dir = match base {
                    Some(b) => b,
                    None => pipeline::stage_base(&cfg, &common.out, common.seed, &data_dir)?,
                };
                let dir =
                    pipeline::stage_vae(&cfg, &common.out, common.seed, &data_dir, &base_dir)?;
                println!("vae: {}", dir.display());
                Ok(())
            }
        },
        Command::Diffusion { sub } => match sub {
            DiffusionCmd::Train {
                common,
                vae,
                caa,
                data,
            } => {
                let mut cfg = load_config(&common)?;
                if let Some(flag) = caa {
                    match flag.as_str() {
                        "on" => cfg.set("diffusion.caa", "true"),
                        "off" => cfg.set("diffusion.caa", "false"),
                        other => return Err(anyhow!("config: --caa must be on|off, got {other}")),
                    }
                }
                let data_dir = match data {
                    Some(d) => d,
                    None => pipeline::stage_data(&cfg, &common.out, common.seed)?,
                };
                let base_dir = pipeline::stage_base(&cfg, &common.out, common.seed, &data_dir)?;
                let vae_dir = match vae {
                    Some(v) => v,
                    None => {
                        pipeline::stage_vae(&cfg, &common.out, common.seed, &data_dir, &base_dir)?
                    }
                };
                let dir = pipeline::stage_diffusion(
                    &cfg,
                    &common.out,
                    common.seed,
                    &data_dir,
                    &base_dir,
                    &vae_dir,
                )?;
                println!("diffusion: {}", dir.display());
                Ok(())
            }
        },
        Command::Sample { common, run, style } => {
            let mut cfg = load_config(&common)?;
            if let Some(style) = style {
                // restrict the style loop; single-style sampling is a
                // debugging convenience
                cfg.set("data.num_styles", style + 1);
            }
            let m = manifest::RunManifest::read(&run).context("reading diffusion manifest")?;
            let vae_id = m
                .parents
                .first()
                .ok_or_else(|| anyhow!("diffusion run has no vae parent"))?
                .clone();
            let vae_dir = common.out.join(&vae_id);
            let vae_manifest = manifest::RunManifest::read(&vae_dir)?;
            let base_id = vae_manifest
                .parents
                .first()
                .ok_or_else(|| anyhow!("vae run has no base parent"))?;
            let base_dir = common.out.join(base_id);
            let dir =
                pipeline::stage_sample(&cfg, &common.out, common.seed, &base_dir, &vae_dir, &run)?;
            println!("sample: {}", dir.display());
            Ok(())
        }
        Command::Bake { common, views } => {
            let cfg = load_config(&common)?;
            let dir = pipeline::stage_bake(&cfg, &common.out, &views)?;
            println!("bake: {}", dir.display());
            Ok(())
        }
        Command::Eval {
            common,
            generated,
            reference,
        } => {
            let cfg = load_config(&common)?;
            // locate the vae/base parents through the sample manifest chain
            let sm = manifest::RunManifest::read(&generated)?;
            let diff_dir = common.out.join(
                sm.parents
                    .first()
                    .ok_or_else(|| anyhow!("sample run has no diffusion parent"))?,
            );
            let dm = manifest::RunManifest::read(&diff_dir)?;
            let vae_dir = common.out.join(
                dm.parents
                    .first()
                    .ok_or_else(|| anyhow!("diffusion run has no vae parent"))?,
            );
            let vm = manifest::RunManifest::read(&vae_dir)?;
            let base_dir = common.out.join(
                vm.parents
                    .first()
                    .ok_or_else(|| anyhow!("vae run has no base parent"))?,
            );
            let dir = pipeline::stage_eval(
                &cfg,
                &common.out,
                &reference,
                &base_dir,
                &vae_dir,
                &generated,
            )?;
            println!("eval: {}", dir.display());
            Ok(())
        }
        Command::Pipeline { common } => {
            let cfg = load_config(&common)?;
            let dirs = pipeline::run_pipeline(&cfg, &common.out, common.seed)?;
            println!("data:      {}", dirs.data.display());
            println!("base:      {}", dirs.base.display());
            println!("vae:       {}", dirs.vae.display());
            println!("diffusion: {}", dirs.diffusion.display());
            println!("sample:    {}", dirs.sample.display());
            println!("bake:      {}", dirs.bake.display());
            println!("eval:      {}", dirs.eval.join("report.json").display());
            Ok(())
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common)?;
            let summary = ablate::run_ablation(&cfg, &common.out, common.seed)?;
            println!("{}", ablate::render_table(&summary));
            if !summary.orderings_pass {
                let failures = summary
                    .ordering_votes
                    .iter()
                    .filter(|(_, yes)| *yes < summary.seeds.len() / 2 + 1)
                    .map(|(name, yes)| format!("{name} ({yes}/{} seeds)", summary.seeds.len()))
                    .collect();
                return Err(ablate::OrderingFailure { failures }.into());
            }
            Ok(())
        }
        Command::Report { common, run } => {
            let dir = run.unwrap_or_else(|| common.out.clone());
            let text = std::fs::read_to_string(dir.join("ablation.json"))
                .with_context(|| format!("no ablation.json under {}", dir.display()))?;
            let summary: ablate::AblationSummary = serde_json::from_str(&text)?;
            let table = ablate::render_table(&summary);
            std::fs::write(dir.join("ablation.csv"), &table)?;
            println!("{table}");
            Ok(())
        }
    }
}
