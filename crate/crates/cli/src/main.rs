use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvdet::config::RunConfig;
use mvdet::detect::MetricsReport;
use mvdet::pipeline;
use mvdet::tensorio::DatasetLayout;
use mvdet::Result;

#[derive(Parser)]
#[command(name = "mvdet", version, about = "Unsupervised multi-view pedestrian localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-camera dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pseudo-label masks by iterative PCA.
    Segment {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Optimize the scene volume against the masks.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Extract BEV detections from the fitted volume.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// segment, fit, detect and eval in one go.
    Pipeline {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn print_metrics(m: &MetricsReport) {
    println!(
        "moda {:.4}  modp {:.4}  precision {:.4}  recall {:.4}  (tp {} fp {} fn {} gt {})",
        m.moda, m.modp, m.precision, m.recall, m.tp, m.fp, m.fn_, m.gt_count
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, common } => {
            let cfg = load_config(&common)?;
            let synth = pipeline::cmd_synth(&cfg, &out)?;
            println!("wrote {} views, {} pedestrians to {}", synth.dataset.num_views(), synth.scene.pedestrians.len(), out.display());
        }
        Command::Segment { data, common } => {
            let masks = pipeline::cmd_segment(&data, &load_config(&common)?)?;
            let fg: f64 = masks.data.iter().map(|&m| m as f64).sum::<f64>() / masks.data.len().max(1) as f64;
            println!("segmented {} views, foreground fraction {fg:.4}", masks.views);
        }
        Command::Fit { data, common } => {
            let fit = pipeline::cmd_fit(&data, &load_config(&common)?)?;
            let best = &fit.history[fit.best_iteration];
            println!(
                "best iteration {}: total {:.6} (color {:.6}, mask {:.6}, vbr {:.6})",
                best.iteration, best.total, best.l_color, best.l_mask, best.l_vbr
            );
        }
        Command::Detect { data, common } => {
            let dets = pipeline::cmd_detect(&data, &load_config(&common)?)?;
            println!("{} detections written to {}", dets.len(), DatasetLayout::new(&data).detections().display());
        }
        Command::Eval { data, common } => print_metrics(&pipeline::cmd_eval(&data, &load_config(&common)?)?),
        Command::Pipeline { data, common } => print_metrics(&pipeline::cmd_pipeline(&data, &load_config(&common)?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // usage errors share the validation exit code; 2 is reserved for i/o
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 4 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
