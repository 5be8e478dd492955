use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use motion_mae::checkpoint::Checkpoint;
use motion_mae::config::ExperimentConfig;
use motion_mae::dataset::{self, Manifest, Split};
use motion_mae::experiment::{self, Baseline, Init, SweepAxis};
use motion_mae::render::{render_svg, MaskInfo, SceneView};
use motion_mae::{report, scenario_json, Error};
use motion_mae_core::masking::plan_masks;
use motion_mae_core::numerics::RngStream;
use motion_mae_core::scene::normalize_to_focal;

#[derive(Parser)]
#[command(
    name = "motion-mae",
    version,
    about = "Masked-autoencoder pre-training and motion forecasting on synthetic driving scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON config; unset fields come from its profile (default desk).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Proceed even if the config differs from the one stored in a
    /// checkpoint or dataset manifest.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Shift,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Shift => Split::Shift,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    /// Constant-velocity extrapolation.
    Cv,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Alpha,
    Beta,
    EncoderDepth,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train / val / shift scenario files and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Masked-autoencoder pre-training.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// History masking ratio.
        #[arg(long)]
        alpha: Option<f64>,
        /// Lane masking ratio.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train the forecasting model from scratch or from a pre-training checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// `scratch` or the path of a pre-training checkpoint.
        #[arg(long, default_value = "scratch")]
        init: String,
    },
    /// Evaluate a forecasting checkpoint or a baseline on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, required_unless_present_any = ["baseline", "ground_truth"])]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with_all = ["ckpt", "ground_truth"])]
        baseline: Option<BaselineArg>,
        /// Score the recorded futures themselves (all metrics zero); a
        /// pipeline check.
        #[arg(long, conflicts_with = "ckpt")]
        ground_truth: bool,
    },
    /// Mask one scene and dump the pre-trained model's reconstructions.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Scenario JSON file.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        /// Also write an SVG next to the JSON.
        #[arg(long)]
        svg: bool,
    },
    /// Pre-train and fine-tune once per axis value and seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Render a scenario or reconstruction JSON to SVG.
    Render {
        /// Scenario file or reconstruction output.
        #[arg(long)]
        input: PathBuf,
        /// Overlay this forecasting checkpoint's predictions (scenario input only).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// SVG file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn mismatch<T: PartialEq + serde::Serialize>(what: &str, stored: &T, requested: &T, force: bool) -> Result<()> {
    if stored != requested {
        if !force {
            return Err(Error::ConfigMismatch(format!("{what} section")).into());
        }
        eprintln!("warning: {what} differs from the stored config; continuing because of --force");
    }
    Ok(())
}

fn prepare_out(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    report::write(&dir.join("config.json"), &cfg.to_json())?;
    Ok(())
}

fn load_scenes(
    data: &Path,
    split: Split,
    cfg: &ExperimentConfig,
    force: bool,
) -> Result<Vec<motion_mae_core::scene::ProcessedScene>> {
    let manifest = Manifest::load(data).with_context(|| format!("reading dataset at {}", data.display()))?;
    mismatch("dataset", &manifest.config.data, &cfg.data, force)?;
    let raws = dataset::load_split(data, split)?;
    eprintln!("loaded {} {} scenes", raws.len(), split.name());
    Ok(dataset::process(&raws)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            let m = dataset::write_dataset(&cfg, &common.out)?;
            for (split, s) in &m.splits {
                eprintln!("{}: {} scenes {:?}", split.name(), s.count, s.cities);
            }
            println!("manifest hash {}", m.hash());
        }
        Command::Pretrain { common, data, alpha, beta } => {
            let mut cfg = resolve_config(&common)?;
            cfg.masking.alpha = alpha.unwrap_or(cfg.masking.alpha);
            cfg.masking.beta = beta.unwrap_or(cfg.masking.beta);
            cfg.validate()?;
            let train = load_scenes(&data, Split::Train, &cfg, common.force)?;
            prepare_out(&common.out, &cfg)?;
            let run = experiment::pretrain(&cfg, &train)?;
            for e in &run.log {
                eprintln!(
                    "epoch {:>3}  L_MAE {:.4}  (H {:.4} F {:.4} L {:.4})  lr {:.2e}",
                    e.epoch, e.l_mae, e.l_h, e.l_f, e.l_l, e.lr
                );
            }
            report::write(&common.out.join("pretrain_log.csv"), &report::pretrain_log_csv(&run.log)?)?;
            Checkpoint::from_mae(&run.model, &cfg).save(&common.out.join("pretrain.ckpt"))?;
        }
        Command::Finetune { common, data, init } => {
            let cfg = resolve_config(&common)?;
            let pretrained = match init.as_str() {
                "scratch" => None,
                path => {
                    let ck = Checkpoint::load(Path::new(path))?;
                    mismatch("model", &ck.header.config.model, &cfg.model, common.force)?;
                    Some(ck)
                }
            };
            let train = load_scenes(&data, Split::Train, &cfg, common.force)?;
            let val = load_scenes(&data, Split::Val, &cfg, common.force)?;
            prepare_out(&common.out, &cfg)?;
            let start = match &pretrained {
                None => Init::Scratch,
                Some(ck) => Init::Pretrained(&ck.params),
            };
            let run = experiment::finetune(&cfg, start, &train, &val)?;
            for e in &run.log {
                let val = e.val.map_or(String::new(), |v| {
                    format!("  val minADE_6 {:.4} minFDE_6 {:.4}", v.min_ade_6, v.min_fde_6)
                });
                eprintln!("epoch {:>3}  loss {:.4}  lr {:.2e}{val}", e.epoch, e.loss, e.lr);
            }
            report::write(&common.out.join("finetune_log.csv"), &report::finetune_log_csv(&run.log)?)?;
            Checkpoint::from_forecast(&run.model, &cfg).save(&common.out.join("finetune.ckpt"))?;
        }
        Command::Eval { common, data, split, ckpt, baseline, ground_truth } => {
            let split = Split::from(split);
            let (cfg, report) = if let Some(path) = ckpt {
                let ck = Checkpoint::load(&path)?;
                let cfg = match &common.config {
                    Some(_) => {
                        let cfg = resolve_config(&common)?;
                        mismatch("model", &ck.header.config.model, &cfg.model, common.force)?;
                        cfg
                    }
                    None => ck.header.config.clone(),
                };
                let scenes = load_scenes(&data, split, &cfg, common.force)?;
                let model = ck.into_forecast()?;
                (cfg, experiment::evaluate_model(&model, &scenes)?)
            } else {
                let cfg = resolve_config(&common)?;
                let scenes = load_scenes(&data, split, &cfg, common.force)?;
                let b = if ground_truth { Baseline::GroundTruth } else { Baseline::ConstantVelocity };
                let _ = baseline;
                (cfg, experiment::evaluate_baseline(b, &scenes)?)
            };
            prepare_out(&common.out, &cfg)?;
            report::write(&common.out.join("metrics.csv"), &report::metric_report_csv(&report)?)?;
            let m = report.mean;
            println!(
                "{} scenes  minADE_1 {:.4}  minFDE_1 {:.4}  MR_1 {:.4}  minADE_6 {:.4}  minFDE_6 {:.4}  MR_6 {:.4}  brier-minFDE_6 {:.4}",
                report.n_scenes(),
                m.min_ade_1,
                m.min_fde_1,
                m.mr_1,
                m.min_ade_6,
                m.min_fde_6,
                m.mr_6,
                m.brier_min_fde_6
            );
        }
        Command::Reconstruct { common, ckpt, scene, alpha, beta, svg } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut cfg = ck.header.config.clone();
            if common.config.is_some() {
                let requested = resolve_config(&common)?;
                mismatch("model", &cfg.model, &requested.model, common.force)?;
            }
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            let model = ck.into_mae()?;
            let raw = scenario_json::load(&scene)?;
            let processed = normalize_to_focal(&raw)?;
            let mut rng = RngStream::new(cfg.seed);
            let plan = plan_masks(processed.num_agents(), processed.num_lanes(), alpha, beta, &mut rng)?;
            let (masked, recon) = model.reconstruct_scene(&processed, &plan)?;
            let loss = model.eval_loss(&processed, &plan)?;
            eprintln!("L_MAE {:.4}  (H {:.4} F {:.4} L {:.4})", loss.total, loss.history, loss.future, loss.lane);
            let view = SceneView::new(&raw, &processed).with_reconstruction(
                &processed,
                &masked,
                &recon,
                MaskInfo { alpha, beta, seed: cfg.seed },
            );
            prepare_out(&common.out, &cfg)?;
            report::write(&common.out.join("reconstruction.json"), &view.to_json())?;
            if svg {
                report::write(&common.out.join("reconstruction.svg"), &render_svg(&view))?;
            }
        }
        Command::Sweep { common, data, axis, values, seeds } => {
            let cfg = resolve_config(&common)?;
            let axis = match axis {
                AxisArg::Alpha => SweepAxis::Alpha,
                AxisArg::Beta => SweepAxis::Beta,
                AxisArg::EncoderDepth => SweepAxis::EncoderDepth,
            };
            let train = load_scenes(&data, Split::Train, &cfg, common.force)?;
            let val = load_scenes(&data, Split::Val, &cfg, common.force)?;
            prepare_out(&common.out, &cfg)?;
            let rows = experiment::sweep(&cfg, axis, &values, &seeds, &train, &val, |r| {
                eprintln!(
                    "{} = {}  seed {}  minADE_6 {:.4}  minFDE_6 {:.4}",
                    r.axis.name(),
                    r.value,
                    r.seed,
                    r.metrics.min_ade_6,
                    r.metrics.min_fde_6
                );
            })?;
            report::write(&common.out.join("sweep.csv"), &report::sweep_csv(&rows)?)?;
        }
        Command::Render { input, ckpt, out } => {
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let view = match SceneView::from_json(&text) {
                Ok(v) => {
                    if ckpt.is_some() {
                        bail!("--ckpt overlays need a scenario file, not a rendered view");
                    }
                    v
                }
                Err(_) => {
                    let raw = scenario_json::from_json(&text)
                        .with_context(|| format!("{} is neither a scene view nor a scenario", input.display()))?;
                    let processed = normalize_to_focal(&raw)?;
                    let view = SceneView::new(&raw, &processed);
                    match ckpt {
                        Some(p) => {
                            let model = Checkpoint::load(&p)?.into_forecast()?;
                            view.with_forecast(&processed, &model.forecast(&processed)?)
                        }
                        None => view,
                    }
                }
            };
            report::write(&out, &render_svg(&view))?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
