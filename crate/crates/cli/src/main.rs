use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moequant::io::{load_manifest, read_json, save_model, write_atomic, write_json};
use moequant::pipeline::{apply_plan, build_plan, compute_metrics, random_checkpoint, PlanFile};
use moequant::quantizer::QuantMode;
use moequant::ranking::DEFAULT_ZETA;
use moequant::synthetic::{bit_gap_experiment, lemma1_report, train, BitGapRow, SyntheticConfig, TraceRow};
use moequant::{Error, Result};

#[derive(Parser)]
#[command(
    name = "moequant",
    version,
    about = "Expert-wise mixed-precision planning for MoE layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Router-norm change and MaxVar for every expert.
    Metrics {
        /// Directory holding manifest.json.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
        /// Use the final router norm even where initial routers exist.
        #[arg(long)]
        surrogate: bool,
    },
    /// Rank experts and assign bit-widths.
    Plan {
        #[arg(long)]
        model: PathBuf,
        /// High[,mid],low bit-widths, e.g. `3,2` or `3,2,1`.
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<u32>,
        #[arg(long)]
        avg_bits: f64,
        #[arg(long, default_value_t = DEFAULT_ZETA)]
        zeta: f64,
        #[arg(long)]
        surrogate: bool,
        #[arg(long, default_value = "plan.json")]
        out: PathBuf,
    },
    /// Apply a plan and write the quantized checkpoint.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Output directory: tensors, manifest.json and quant_report.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Affine)]
        mode: Mode,
    },
    /// Write a random checkpoint for trying the pipeline.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        #[arg(long, default_value_t = 8)]
        experts: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 64)]
        neurons: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Synthetic two-layer MoE bench.
    #[command(subcommand)]
    Synth(Synth),
}

#[derive(Subcommand)]
enum Synth {
    /// Print a preset configuration as JSON.
    Preset {
        #[arg(value_enum)]
        name: Preset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once; writes config.json, traces.csv and lemma1_report.json.
    Train(SynthArgs),
    /// Train once per alpha and measure the bit gap; writes bitgap.csv.
    Bitgap {
        #[command(flatten)]
        common: SynthArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
        alphas: Vec<f64>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Affine,
    ZeroPointFree,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Ci,
}

impl From<Mode> for QuantMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Affine => QuantMode::Affine,
            Mode::ZeroPointFree => QuantMode::ZeroPointFree,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", dir.display())))
}

fn load_config(args: &SynthArgs) -> Result<SyntheticConfig> {
    let mut cfg: SyntheticConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Metrics { model, out, surrogate } => {
            let m = compute_metrics(&load_manifest(&model)?, surrogate)?;
            write_json(&out, &m)
        }
        Command::Plan {
            model,
            levels,
            avg_bits,
            zeta,
            surrogate,
            out,
        } => {
            moequant::pipeline::validate_levels(&levels)?;
            let (high, low) = (levels[0], levels[levels.len() - 1]);
            if !(avg_bits >= f64::from(low) && avg_bits <= f64::from(high)) {
                return Err(Error::Infeasible(format!(
                    "--avg-bits {avg_bits} outside [{low}, {high}]"
                )));
            }
            if !(zeta > 1.0 && zeta.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "--zeta must be a finite value > 1, got {zeta}"
                )));
            }
            let metrics = compute_metrics(&load_manifest(&model)?, surrogate)?;
            write_json(&out, &build_plan(&metrics, &levels, avg_bits, zeta)?)
        }
        Command::Quantize { model, plan, out, mode } => {
            let loaded = load_manifest(&model)?;
            let plan: PlanFile = read_json(&plan)?;
            let (layers, report) = apply_plan(&loaded, &plan, mode.into())?;
            save_model(&out, &loaded.manifest.model_name, &layers)?;
            write_json(&out.join("quant_report.json"), &report)
        }
        Command::Fixture {
            out,
            layers,
            experts,
            dim,
            neurons,
            seed,
        } => {
            if layers == 0 || experts == 0 || dim == 0 || neurons == 0 {
                return Err(Error::InvalidArgument("fixture sizes must be positive".into()));
            }
            let layers = random_checkpoint(layers, experts, dim, neurons, seed);
            save_model(&out, &format!("fixture-seed{seed}"), &layers).map(|_| ())
        }
        Command::Synth(Synth::Preset { name, out }) => {
            let cfg = match name {
                Preset::Paper => SyntheticConfig::paper_scale(),
                Preset::Ci => SyntheticConfig::ci(),
            };
            match out {
                Some(path) => write_json(&path, &cfg),
                None => {
                    println!("{}", serde_json::to_string_pretty(&cfg)?);
                    Ok(())
                }
            }
        }
        Command::Synth(Synth::Train(args)) => {
            let cfg = load_config(&args)?;
            create_dir(&args.out)?;
            let run = train(&cfg)?;
            write_json(&args.out.join("config.json"), &cfg)?;
            let mut csv = String::from(TraceRow::CSV_HEADER);
            csv.push('\n');
            for row in &run.traces {
                csv.push_str(&row.csv_line());
                csv.push('\n');
            }
            write_atomic(&args.out.join("traces.csv"), csv.as_bytes())?;
            write_json(&args.out.join("lemma1_report.json"), &lemma1_report(&run))
        }
        Command::Synth(Synth::Bitgap { common, alphas }) => {
            let cfg = load_config(&common)?;
            for &a in &alphas {
                cfg.clone().with_alpha(a).validate()?;
            }
            create_dir(&common.out)?;
            write_json(&common.out.join("config.json"), &cfg)?;
            let rows = bit_gap_experiment(&cfg, &alphas)?;
            let mut csv = String::from(BitGapRow::CSV_HEADER);
            csv.push('\n');
            for row in &rows {
                csv.push_str(&row.csv_line());
                csv.push('\n');
            }
            write_atomic(&common.out.join("bitgap.csv"), csv.as_bytes())
        }
    }
}

fn error_json(code: &str, message: &str) -> String {
    serde_json::json!({ "error": { "code": code, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(e.code(), &e.to_string()));
            ExitCode::from(1)
        }
    }
}
