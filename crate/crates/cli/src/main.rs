use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use convpac::commands::{self, CommandOutput, Figure3Options, Table1Options, ValidateOverrides};
use convpac::config::{emit_config, load_config, ParsedConfig};
use convpac::lab::{NormPath, DEFAULT_TRIALS};
use convpac::structured::{ConvShape, LayerSpec};
use convpac::{zoo, Error};

/// Spectral-norm bounds for structured perturbations and generalization
/// bounds for convolutional networks.
#[derive(Parser)]
#[command(name = "convpac", version)]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write an SVG chart.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Empirical vs theoretical perturbation norms over a channel sweep.
    Figure3 {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        dim: u32,
        #[arg(long, default_value_t = 5)]
        q: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Comma-separated channel counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        channels: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Per-layer constants under the ambient, sparse and conv estimates.
    Figure4 {
        /// Zoo network (lenet5, alexnet, vgg16).
        #[arg(long, conflicts_with = "config")]
        network: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dense-layer sparsity for zoo networks.
        #[arg(long)]
        sparsity: Option<f64>,
        #[command(flatten)]
        output: Output,
    },
    /// Bound constants for every zoo network.
    Table1 {
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1_000_000)]
        m: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = zoo::DEFAULT_DENSE_SPARSITY)]
        sparsity: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Empirical perturbation-lemma and sigma-condition checks.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Noise level for the perturbation-lemma check.
        #[arg(long)]
        lemma_sigma: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the generalization bound for a config.
    Bound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo spectral-norm statistics for one layer.
    Mc {
        /// Take the layer from a config instead of the flags below.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Layer index within the config.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        #[arg(long)]
        d_in: Option<usize>,
        #[arg(long)]
        d_out: Option<usize>,
        #[arg(long)]
        s: Option<usize>,
        #[arg(long, default_value_t = 1)]
        a: usize,
        #[arg(long, default_value_t = 1)]
        b: usize,
        #[arg(long, default_value_t = 1)]
        q: usize,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        dim: u32,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        /// Materialize Conv operators instead of using frequency blocks.
        #[arg(long)]
        materialized: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List zoo networks or print one as an editable config.
    Zoo {
        #[arg(long)]
        export: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Dense,
    ConvLike,
    Conv,
}

fn mc_spec(
    kind: Option<Kind>,
    d_in: Option<usize>,
    d_out: Option<usize>,
    s: Option<usize>,
    shape: ConvShape,
) -> Result<LayerSpec, Error> {
    match kind {
        None => Err(Error::InvalidInput("mc needs --config or --kind".into())),
        Some(Kind::Dense) => {
            let (Some(i), Some(o)) = (d_in, d_out) else {
                return Err(Error::InvalidInput("dense layers need --d-in and --d-out".into()));
            };
            Ok(LayerSpec::dense(i, o, s.unwrap_or(i.max(o))))
        }
        Some(Kind::ConvLike) => Ok(LayerSpec::ConvLike(shape)),
        Some(Kind::Conv) => Ok(LayerSpec::Conv(shape)),
    }
}

fn write(out: &CommandOutput, csv: Option<&Path>, svg: Option<&Path>) -> Result<(), Error> {
    match csv {
        Some(p) => out.report.write_csv(p)?,
        None => print!("{}", out.report.to_csv()?),
    }
    if let (Some(p), Some(s)) = (svg, &out.svg) {
        std::fs::write(p, s)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Option<CommandOutput>, Error> {
    let result = match cli.command {
        Command::Figure3 {
            seed,
            trials,
            dim,
            q,
            n,
            channels,
            sigma,
            output,
        } => {
            let opts = Figure3Options {
                dim,
                q,
                n,
                channels,
                sigma,
                trials,
                seed,
            };
            let out = commands::figure3(&opts, output.svg.is_some())?;
            write(&out, output.out.as_deref(), output.svg.as_deref())?;
            out
        }
        Command::Figure4 {
            network,
            config,
            sparsity,
            output,
        } => {
            let arch = match (network, config) {
                (_, Some(path)) => {
                    if sparsity.is_some() {
                        return Err(Error::InvalidInput(
                            "--sparsity applies to zoo networks; set it in the config".into(),
                        ));
                    }
                    load_config(&path)?.arch
                }
                (name, None) => {
                    let entry = zoo::lookup(name.as_deref().unwrap_or("lenet5"))?;
                    match sparsity {
                        Some(s) => entry.with_sparsity(s)?.arch,
                        None => entry.arch,
                    }
                }
            };
            let out = commands::figure4(&arch, output.svg.is_some())?;
            write(&out, output.out.as_deref(), output.svg.as_deref())?;
            out
        }
        Command::Table1 {
            gamma,
            m,
            delta,
            sparsity,
            out,
        } => {
            let res = commands::table1(&Table1Options {
                gamma,
                m,
                delta,
                sparsity,
            })?;
            write(&res, out.as_deref(), None)?;
            res
        }
        Command::Validate {
            config,
            seed,
            trials,
            lemma_sigma,
            out,
        } => {
            let cfg = load_config(&config)?;
            let res = commands::validate(
                &cfg,
                &ValidateOverrides {
                    seed,
                    trials,
                    lemma_sigma,
                },
            )?;
            write(&res, out.as_deref(), None)?;
            res
        }
        Command::Bound { config, out } => {
            let res = commands::bound(&load_config(&config)?)?;
            write(&res, out.as_deref(), None)?;
            res
        }
        Command::Mc {
            config,
            layer,
            kind,
            d_in,
            d_out,
            s,
            a,
            b,
            q,
            n,
            dim,
            sigma,
            seed,
            trials,
            materialized,
            out,
        } => {
            let spec = match config {
                Some(path) => {
                    let cfg = load_config(&path)?;
                    *cfg.arch.layers.get(layer).ok_or_else(|| {
                        Error::InvalidInput(format!("config has {} layers, no layer {layer}", cfg.arch.depth()))
                    })?
                }
                None => mc_spec(kind, d_in, d_out, s, ConvShape::new(a, b, q, n, dim))?,
            };
            let path = if materialized {
                NormPath::Materialized
            } else {
                NormPath::Auto
            };
            let res = commands::mc(&spec, sigma, trials, seed, path)?;
            write(&res, out.as_deref(), None)?;
            res
        }
        Command::Zoo { export } => {
            match export {
                Some(name) => print!("{}", emit_config(&ParsedConfig::from_zoo(&zoo::lookup(&name)?))?),
                None => {
                    for e in zoo::zoo() {
                        println!("{}\t{} layers\t{}", e.name, e.arch.depth(), e.source);
                    }
                }
            }
            return Ok(None);
        }
    };
    Ok(Some(result))
}

fn is_input_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidInput(_)
            | Error::Parse(_)
            | Error::Validation(_)
            | Error::UnknownArchitecture { .. }
            | Error::Io(_)
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(Some(out)) if !out.ok() => {
            for f in &out.failures {
                eprintln!("invariant violated: {f}");
            }
            ExitCode::from(1)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_input_error(&e) { 2 } else { 1 })
        }
    }
}
