use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use pti_core::datagen::{save_dataset, Factor};
use pti_core::editing::apply_edit;
use pti_core::gan::{synthesize, GeneratorCheckpoint, LatentSpace};
use pti_core::inversion::invert;
use pti_core::metrics::{evaluate_reconstruction, Oracles};
use pti_core::pivotal::{pivotal_tune, PivotSet, PivotTarget};
use pti_core::ImageTensor;
use pti_harness::bundle::{load_tuning, read_inversion_bundle, save_tuning, write_inversion_bundle, write_tuning_trace};
use pti_harness::experiments::{regenerate_summaries, run_experiment, ExperimentId, Summary};
use pti_harness::fixtures::{self, FixtureStack};
use pti_harness::{HarnessError, RunConfig};

#[derive(Parser)]
#[command(name = "pti", version, about = "Generator inversion, pivotal tuning and latent editing")]
struct Cli {
    /// Flat TOML run configuration. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true, value_parser = ["32", "64"])]
    resolution: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the training dataset (or the held-out evaluation set) to PNGs.
    Datagen {
        #[arg(long)]
        eval: bool,
    },
    /// Pretrain the generator fixture and record its quality gate.
    Pretrain,
    /// Fit the factor regressor, identity embedder and perceptual backbone.
    FitOracles,
    /// Invert one image into W or W+.
    Invert {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "w")]
        space: String,
    },
    /// Tune the generator around a pivot written by `invert`.
    Tune {
        /// Directory written by `pti invert`.
        #[arg(long)]
        inversion: PathBuf,
        #[arg(long)]
        no_regularization: bool,
    },
    /// Fit supervised and PCA edit directions on the pretrained generator.
    FitDirections,
    /// Edit an inverted (and optionally tuned) image along a factor direction.
    Edit {
        #[arg(long)]
        inversion: PathBuf,
        /// Directory written by `pti tune`; the pretrained generator is used otherwise.
        #[arg(long)]
        tuned: Option<PathBuf>,
        #[arg(long)]
        factor: String,
        #[arg(long, allow_hyphen_values = true)]
        beta: f64,
    },
    /// Reconstruction metrics of an inversion or tuning result against its target.
    Evaluate {
        #[arg(long)]
        inversion: PathBuf,
        #[arg(long)]
        tuned: Option<PathBuf>,
    },
    /// Run a scripted experiment.
    Experiment {
        /// ReconTable, EditTable, RegStudy, AlphaSweep, AblationGrid, MultiId, PivotDriftProbe or OodSuite.
        id: ExperimentId,
    },
    /// Regenerate summary.json from results.json under --out.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("", Path::new("."))?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = &cli.resolution {
        cfg.resolution = r.parse().expect("validated by clap");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gate_result(summaries: &[Summary]) -> Result<(), HarnessError> {
    let failures: Vec<String> = summaries.iter().flat_map(Summary::failures).collect();
    for s in summaries {
        for g in &s.gates {
            let status = if g.passed { "PASS" } else { "FAIL" };
            println!("{} criterion {} {status}: {} ({})", s.experiment.name(), g.criterion, g.name, g.detail);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::GateFailure(failures))
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Datagen { eval } => {
            let (data, dir) = if *eval {
                (fixtures::eval_set(&cfg)?, out.join("eval"))
            } else {
                (fixtures::train_dataset(&cfg)?, out.join("dataset"))
            };
            save_dataset(&data, &dir)?;
            println!("wrote {} images to {}", data.len(), dir.display());
        }
        Command::Pretrain => {
            let rec = fixtures::pretrain_fixture(&cfg, Some(&out.join("pretrain")))?;
            println!(
                "gate value {:.5} (reference {:.5}): {}",
                rec.value,
                rec.reference,
                if rec.passed() { "pass" } else { "fail" }
            );
            if !rec.passed() {
                return Err(HarnessError::GateFailure(vec!["pretraining quality gate".into()]).into());
            }
        }
        Command::FitOracles => fixtures::fit_oracles(&cfg)?,
        Command::FitDirections => fixtures::fit_directions(&cfg)?,
        Command::Invert { image, space } => {
            let fx = FixtureStack::load(&cfg)?;
            let target = ImageTensor::load_png(image).with_context(|| format!("reading {}", image.display()))?;
            let r = invert(&target, &fx.generator, &fx.backbone, &cfg.inversion(LatentSpace::parse(space)?))?;
            write_inversion_bundle(out, &r, &target)?;
            println!("best loss {:.5} at step {}; wrote {}", r.best.total, r.best_step, out.display());
        }
        Command::Tune {
            inversion,
            no_regularization,
        } => {
            let fx = FixtureStack::load(&cfg)?;
            let (inv, target) = read_inversion_bundle(inversion)?;
            let mut tcfg = cfg.tuning()?;
            tcfg.regularization_enabled &= !no_regularization;
            let set = PivotSet::single(PivotTarget::from((&inv, &target)), &fx.generator)?;
            let r = pivotal_tune(&fx.generator, &set, &fx.backbone, &tcfg)?;
            save_tuning(out, &r)?;
            write_tuning_trace(&out.join("trace.csv"), &r.loss_trace)?;
            r.final_images[0].save_png(&out.join("recon.png"))?;
            println!("final reconstruction loss {:.5}; wrote {}", r.final_recon[0], out.display());
        }
        Command::Edit {
            inversion,
            tuned,
            factor,
            beta,
        } => {
            let fx = FixtureStack::load(&cfg)?;
            let (inv, _) = read_inversion_bundle(inversion)?;
            let (gen, code): (GeneratorCheckpoint, _) = match tuned {
                Some(d) => {
                    let t = load_tuning(d)?;
                    (t.checkpoint, t.pivots[0].clone())
                }
                None => (fx.generator.clone(), inv.pivot.clone()),
            };
            let f = Factor::parse(factor)?;
            let edited = apply_edit(&code, fx.direction(f), *beta, None)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join(format!("edit_{}_{beta}.png", f.name()));
            synthesize(&edited, &inv.noise, 1.0, &gen)?.save_png(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate { inversion, tuned } => {
            let fx = FixtureStack::load(&cfg)?;
            let (inv, target) = read_inversion_bundle(inversion)?;
            let (method, output) = match tuned {
                Some(d) => ("pti", load_tuning(d)?.final_images.remove(0)),
                None => (inv.pivot.space().name(), inv.final_image.clone()),
            };
            let oracles = Oracles {
                regressor: &fx.regressor,
                embedder: &fx.embedder,
                backbone: &fx.backbone,
            };
            let report = evaluate_reconstruction(method, &["image".into()], &[output], &[target], oracles, &cfg.hash())?;
            report.write(out, &format!("evaluate_{method}"))?;
            println!("{}", report.to_json()?);
        }
        Command::Experiment { id } => {
            let summary = run_experiment(*id, &cfg, out)?;
            gate_result(&[summary])?;
        }
        Command::Report => gate_result(&regenerate_summaries(out)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<HarnessError>().map_or(1, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
