use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedquant::attack::AttackView;
use fedquant::experiment::{
    preset, preset_names, report, run_experiment, ExperimentConfig, ExperimentManifest, MANIFEST_FILE,
};

#[derive(Parser)]
#[command(name = "fedquant", version, about = "Federated learning with mixed-precision gradient quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train under each configured defense and write metrics.csv.
    Train(RunArgs),
    /// Run the gradient-inversion suite against every configured view.
    Attack(RunArgs),
    /// Attack with correctly and wrongly dequantized gradients.
    AblateMode(RunArgs),
    /// Summarize a manifest (path to manifest.json or its directory).
    Report {
        path: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// List shipped presets, or print one as JSON.
    Presets {
        #[arg(long, value_name = "NAME")]
        show: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset name (see `fedquant presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to out/<preset>.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self, default_preset: &str) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => {
                ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?
            }
            (None, Some(name)) => preset(name)?,
            (None, None) => preset(default_preset)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| Path::new("out").join(cfg.preset.as_deref().unwrap_or("custom")))
    }
}

fn execute(args: &RunArgs, cfg: ExperimentConfig) -> Result<()> {
    let out = args.out_dir(&cfg);
    cfg.validate()?;
    let manifest = run_experiment(&cfg, &out).with_context(|| format!("running experiment into {}", out.display()))?;
    print!("{}", report(&manifest));
    println!("wrote {} ({} files)", out.join(MANIFEST_FILE).display(), manifest.files.len() + 1);
    Ok(())
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let mut cfg = args.load("table1-desk")?;
            if cfg.defenses.is_empty() {
                bail!("config lists no defenses to train");
            }
            cfg.attack = None;
            execute(&args, cfg)
        }
        Command::Attack(args) => {
            let mut cfg = args.load("attack-desk")?;
            if cfg.attack.is_none() {
                bail!("config has no attack suite; try --preset attack-desk");
            }
            cfg.defenses.clear();
            execute(&args, cfg)
        }
        Command::AblateMode(args) => {
            let mut cfg = args.load("mode-mismatch")?;
            let mut suite = match cfg.attack.take() {
                Some(s) => s,
                None => preset("mode-mismatch")?.attack.expect("preset has an attack suite"),
            };
            suite.views = vec![AttackView::DequantizedCorrect, AttackView::DequantizedWrongMode];
            cfg.attack = Some(suite);
            cfg.defenses.clear();
            execute(&args, cfg)
        }
        Command::Report { path, out_dir } => {
            let Some(path) = path.or(out_dir) else {
                bail!("report needs a manifest path or --out-dir");
            };
            let file = manifest_path(&path);
            let manifest =
                ExperimentManifest::load(&file).with_context(|| format!("reading manifest {}", file.display()))?;
            print!("{}", report(&manifest));
            Ok(())
        }
        Command::Presets { show } => {
            match show {
                Some(name) => println!("{}", preset(&name)?.to_json()),
                None => {
                    for name in preset_names() {
                        println!("{name}");
                    }
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
