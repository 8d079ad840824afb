use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polsar_cli::commands::{
    ablate_command, ablation_table, classify_map_command, evaluate_command, gradient_check_command, preprocess, synth_command,
    train_command,
};
use polsar_cli::config::RunConfig;
use polsar_cli::{exit_code, EXIT_USAGE};
use polsar_mcnn::polsar::CubeForm;
use polsar_mcnn::synth::SynthSpec;
use polsar_mcnn::{Error, Result};

#[derive(Parser)]
#[command(name = "polsar", version, about = "PolSAR classification with two-branch amplitude/phase CNNs")]
struct Cli {
    /// Run configuration (flat `key = value` file, `schema = 1`).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (default: the config's `out`, else the current directory).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for batch-parallel inference.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert scattering or coherency planes into a channel cube plus statistics.
    Preprocess {
        #[arg(long, value_name = "PTC1")]
        input: PathBuf,
        /// amp_phase or real_imag.
        #[arg(long)]
        form: Option<String>,
        /// Odd boxcar window for coherency estimation.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Train the configured variant; writes checkpoint, epoch log and config copy.
    Train,
    /// Score a checkpoint on every labeled pixel.
    Evaluate {
        #[arg(long, value_name = "PCKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PTC1")]
        raster: Option<PathBuf>,
        #[arg(long, value_name = "PLBL1")]
        labels: Option<PathBuf>,
    },
    /// Classify every pixel; writes a label map and a PNG.
    ClassifyMap {
        #[arg(long, value_name = "PCKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PTC1")]
        raster: Option<PathBuf>,
        /// Ground truth for the overlay (default: the training labels).
        #[arg(long, value_name = "PLBL1")]
        ground_truth: Option<PathBuf>,
        /// Draw pixels unlabeled in the ground truth black.
        #[arg(long)]
        overlay: bool,
    },
    /// Train and compare the ablation variants M1..M6.
    Ablate,
    /// Generate a synthetic scene and its label map.
    Synth {
        /// Scene description; the built-in three-class 128x128 scene when absent.
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
    },
    /// Finite-difference check of every layer's gradients.
    GradientCheck,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."))
}

fn require_config(cli: &Cli, cmd: &str) -> Result<RunConfig> {
    if cli.config.is_none() {
        return Err(Error::Config(format!("`{cmd}` needs --config")));
    }
    load_config(cli)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))?;
    }
    match &cli.command {
        Command::Preprocess { input, form, window } => {
            let cfg = load_config(cli)?;
            let form = match form {
                Some(f) => CubeForm::parse(f)?,
                None if cli.config.is_some() => cfg.input_form()?,
                None => CubeForm::AmpPhase,
            };
            let out = preprocess(input, form, window.unwrap_or(cfg.window), &out_dir(cli, &cfg))?;
            println!("wrote {} and {}", out.cube.display(), out.stats.display());
        }
        Command::Train => {
            let cfg = require_config(cli, "train")?;
            let out = out_dir(cli, &cfg);
            let trained = train_command(&cfg, &out)?;
            if let Some(last) = trained.log.last() {
                println!(
                    "{} epochs, final loss {:.5}, train OA {:.4}, test OA {}",
                    last.epoch,
                    last.loss,
                    last.train_oa,
                    last.test_oa.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate { checkpoint, raster, labels } => {
            let out = out_dir(cli, &RunConfig::default());
            let eval = evaluate_command(checkpoint, raster.as_deref(), labels.as_deref(), &out)?;
            print!("{}", eval.text);
        }
        Command::ClassifyMap { checkpoint, raster, ground_truth, overlay } => {
            let out = out_dir(cli, &RunConfig::default());
            let res = classify_map_command(checkpoint, raster.as_deref(), ground_truth.as_deref(), *overlay, &out)?;
            println!("wrote {} and {}", res.map_path.display(), res.png_path.display());
        }
        Command::Ablate => {
            let cfg = require_config(cli, "ablate")?;
            let rows = ablate_command(&cfg, &out_dir(cli, &cfg))?;
            print!("{}", ablation_table(&rows));
        }
        Command::Synth { spec } => {
            let mut s = match spec {
                Some(p) => SynthSpec::parse(&read_text(p)?)?,
                None => SynthSpec::three_class(0),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let out = synth_command(&s, &out_dir(cli, &RunConfig::default()))?;
            println!("wrote {} and {}", out.raster.display(), out.labels.display());
        }
        Command::GradientCheck => {
            let out = cli.out.as_deref();
            print!("{}", gradient_check_command(cli.seed.unwrap_or(1), out)?);
        }
    }
    Ok(())
}

fn read_text(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
