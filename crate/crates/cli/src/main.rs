//! `multibox` command-line tool: one subcommand per pipeline stage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use multibox::config::RunConfig;
use multibox::io::read_dataset;
use multibox::pipeline;
use multibox::Error;

#[derive(Parser)]
#[command(name = "multibox", version, about = "Multi-scale MultiBox proposals on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed; every random stream derives from it. Overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 is the reference deterministic mode; results are identical for any N).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (images/*.png and gt.jsonl).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Build a grid prior set and write it as JSON.
    Priors {
        /// Grid resolutions, e.g. 8,6,4,3,2.
        #[arg(long, value_delimiter = ',')]
        grids: Option<Vec<usize>>,
        /// Templates per grid.
        #[arg(long)]
        templates: Option<usize>,
        /// Append the single whole-image prior.
        #[arg(long)]
        global: bool,
        /// Leave out the whole-image prior.
        #[arg(long, conflicts_with = "global")]
        no_global: bool,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write a threshold,coverage CSV against the ground truth of this dataset.
        #[arg(long, requires = "coverage_data")]
        coverage_csv: Option<PathBuf>,
        #[arg(long)]
        coverage_data: Option<PathBuf>,
    },
    /// Train the proposer on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write (the run configuration goes to <out>.json).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Location loss weight.
        #[arg(long)]
        alpha: Option<f64>,
        /// Most confident slots exempted from the confidence loss.
        #[arg(long)]
        bootstrap_l: Option<usize>,
        /// Fraction of ground-truth labels hidden from training.
        #[arg(long)]
        label_drop: Option<f64>,
    },
    /// Train the context network and post-classifier into one bundle.
    TrainPc {
        #[arg(long)]
        data: PathBuf,
        /// Proposal JSONL whose boxes join the training crop pool.
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate proposals for every image of a dataset.
    Propose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Proposals kept per image (0 keeps all).
        #[arg(long)]
        top_k: Option<usize>,
        /// Sliding-window crop scales relative to the image side.
        #[arg(long, value_delimiter = ',')]
        crop_scales: Option<Vec<f64>>,
        #[arg(long)]
        min_overlap: Option<f64>,
        /// NMS IoU threshold.
        #[arg(long)]
        nms: Option<f64>,
        /// Run the network on the whole image only.
        #[arg(long)]
        single_crop: bool,
    },
    /// Post-classify proposals.
    Classify {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feed absent context instead of averaging over context crops.
        #[arg(long)]
        no_context: bool,
    },
    /// Ensemble the detections of several models.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        nms: f64,
    },
    /// Recall table and AP of a proposal or detection file.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Report JSON.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        recall_csv: PathBuf,
    },
    /// Recall and AP against the per-image proposal budget.
    Sweep {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Error>().is_some_and(Error::is_format);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    cfg.reseed(seed);
    Ok(cfg)
}

fn set_if<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn dataset_gt_boxes(dir: &Path) -> anyhow::Result<Vec<multibox::BBox>> {
    let (_, scenes) = read_dataset(dir)?;
    Ok(scenes.iter().flat_map(|s| s.gt_boxes()).collect())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.common.threads {
        anyhow::ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synth { out, count } => {
            pipeline::synth_dataset(&out, count, &cfg.scene, cfg.seed)?;
            log::info!("wrote {count} scenes to {}", out.display());
        }
        Command::Priors { grids, templates, global, no_global, out, coverage_csv, coverage_data } => {
            set_if(&mut cfg.priors.grids, grids);
            set_if(&mut cfg.priors.templates, templates);
            if global {
                cfg.priors.include_global = true;
            }
            if no_global {
                cfg.priors.include_global = false;
            }
            let gts = coverage_data.as_deref().map(dataset_gt_boxes).transpose()?;
            let cov = coverage_csv.as_deref().zip(gts.as_deref());
            let priors = pipeline::priors_stage(&cfg.priors, out.as_deref(), cov)?;
            if out.is_none() {
                println!("{}", priors.to_json()?);
            }
            log::info!("{} priors", priors.len());
        }
        Command::Train { data, out, loss_csv, steps, batch_size, lr, alpha, bootstrap_l, label_drop } => {
            set_if(&mut cfg.train.steps, steps);
            set_if(&mut cfg.train.batch_size, batch_size);
            set_if(&mut cfg.train.lr, lr);
            set_if(&mut cfg.train.loss.alpha, alpha);
            set_if(&mut cfg.train.loss.bootstrap_l, bootstrap_l);
            set_if(&mut cfg.train.label_drop, label_drop);
            let logs = pipeline::train_stage(&data, &cfg, &out, loss_csv.as_deref())?;
            if let Some(last) = logs.last() {
                log::info!("final loss {:.4} (conf {:.4}, loc {:.5})", last.f_total, last.f_conf, last.f_loc);
            }
        }
        Command::TrainPc { data, proposals, out, steps } => {
            set_if(&mut cfg.classifier_train.steps, steps);
            pipeline::train_classifier_stage(&data, proposals.as_deref(), &cfg, &out)?;
        }
        Command::Propose { model, data, out, top_k, crop_scales, min_overlap, nms, single_crop } => {
            set_if(&mut cfg.eval.top_k, top_k);
            set_if(&mut cfg.crops.scales, crop_scales);
            set_if(&mut cfg.crops.min_overlap, min_overlap);
            set_if(&mut cfg.crops.nms, nms);
            let crops = (!single_crop).then_some(&cfg.crops);
            pipeline::propose_stage(&model, &data, &out, crops, cfg.crops.nms, cfg.eval.top_k)?;
        }
        Command::Classify { bundle, data, proposals, out, no_context } => {
            pipeline::classify_stage(&bundle, &data, &proposals, &out, !no_context)?;
        }
        Command::Ensemble { inputs, out, nms } => {
            pipeline::ensemble_stage(&inputs, &out, cfg.classifier.num_classes, nms)?;
        }
        Command::Eval { gt, predictions, report, recall_csv } => {
            let r = pipeline::eval_stage(&gt, &predictions, &cfg.eval, cfg.classifier.num_classes, &report, &recall_csv)?;
            if let Some(m) = r.map {
                println!("mAP@0.5 {m:.4}");
            }
            if let Some(ap) = r.agnostic_ap {
                println!("class-agnostic AP@0.5 {ap:.4}");
            }
        }
        Command::Sweep { gt, proposals, out, svg, budgets, iou } => {
            let ks = budgets.unwrap_or_else(|| cfg.eval.budgets.clone());
            for p in pipeline::sweep_stage(&gt, &proposals, &ks, iou, &out, svg.as_deref())? {
                println!("K={:<5} recall={:.4} ap={:.4}", p.k, p.recall, p.ap);
            }
        }
    }
    Ok(())
}
