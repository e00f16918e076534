use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use isa_core::config::parse_override;
use isa_core::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "isa", version, about = "Asymmetric composed image retrieval on synthetic concept grids")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML config file layered over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData {
        /// Datagen preset: default, toy or tiny.
        #[arg(long)]
        profile: Option<String>,
    },
    /// Train the query-side model against the frozen teacher.
    Train {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum, default_value_t = LossArg::Both)]
        loss: LossArg,
        /// Token length L.
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Embed the gallery with the teacher and write the embedding file.
    EmbedGallery,
    /// Score a checkpoint on the triplets.
    Eval {
        /// Also score the image-only, text-only and image+text baselines.
        #[arg(long)]
        baselines: bool,
        /// Retrain at each token length (comma-separated) and tabulate.
        #[arg(long, value_name = "LENGTHS")]
        token_length_sweep: Option<String>,
        /// Seeds averaged by the sweep.
        #[arg(long, default_value = "0,1,2")]
        sweep_seeds: String,
    },
    /// Finite-difference check of the loss gradients at toy shapes.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = TermArg::All)]
        term: TermArg,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Finite-difference step (default 2e-4).
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Test hook: corrupt the analytic gradient of this parameter.
        #[arg(long, value_name = "PARAM")]
        inject_error: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        inject_delta: f64,
    },
    /// Write the spatial attention maps of one image.
    ExportAttention {
        /// Image id from the dataset file.
        #[arg(long)]
        image: String,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ModeArg {
    Asymmetric,
    Symmetric,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossArg {
    Both,
    GcdOnly,
    LarOnly,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermArg {
    Gcd,
    Lar,
    Total,
    All,
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut overrides = cli
        .global
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = cli.global.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.global.out {
        overrides.push(("paths.out".into(), toml_string(&out.to_string_lossy())));
    }
    let file = match &cli.global.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", p.display()))
        })?),
        None => None,
    };
    let mut resolve = |extra: Vec<(String, String)>| {
        overrides.extend(extra);
        isa_core::config::RunConfig::resolve(file.as_deref(), &overrides)
    };
    match cli.command {
        Command::GenData { profile } => {
            let extra = profile.map(|p| ("profile".into(), toml_string(&p)));
            commands::gen_data(&resolve(extra.into_iter().collect())?)
        }
        Command::Train {
            mode,
            loss,
            tokens,
            epochs,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                let m = match m {
                    ModeArg::Asymmetric => "asymmetric",
                    ModeArg::Symmetric => "symmetric",
                };
                extra.push(("train.mode".into(), toml_string(m)));
            }
            let (g, l) = match loss {
                LossArg::Both => (None, None),
                LossArg::GcdOnly => (None, Some("0.0")),
                LossArg::LarOnly => (Some("0.0"), None),
            };
            if let Some(g) = g {
                extra.push(("train.loss.gcd_weight".into(), g.into()));
            }
            if let Some(l) = l {
                extra.push(("train.loss.lar_weight".into(), l.into()));
            }
            if let Some(t) = tokens {
                extra.push(("train.tokens".into(), t.to_string()));
            }
            if let Some(e) = epochs {
                extra.push(("train.epochs".into(), e.to_string()));
            }
            commands::train(&resolve(extra)?)
        }
        Command::EmbedGallery => commands::embed_gallery(&resolve(Vec::new())?),
        Command::Eval {
            baselines,
            token_length_sweep,
            sweep_seeds,
        } => {
            let sweep = match token_length_sweep {
                Some(spec) => Some((
                    isa_core::experiment::parse_lengths(&spec)?,
                    commands::parse_seeds(&sweep_seeds)?,
                )),
                None => None,
            };
            commands::eval(&resolve(Vec::new())?, baselines, sweep)
        }
        Command::Gradcheck {
            term,
            seeds,
            eps,
            tolerance,
            inject_error,
            inject_delta,
        } => {
            let config = resolve(Vec::new())?;
            let opts = commands::GradcheckOptions {
                term,
                seeds: commands::parse_seeds(&seeds)?,
                eps,
                tolerance,
                inject: inject_error.map(|param| isa_core::gradcheck::InjectedError {
                    param,
                    delta: inject_delta,
                }),
            };
            commands::gradcheck(&config, &opts)
        }
        Command::ExportAttention { image } => {
            commands::export_attention(&resolve(Vec::new())?, &image)
        }
    }
}

/// Quotes a raw string as a TOML basic string.
fn toml_string(s: &str) -> String {
    let mut out = String::from("\"");
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}
