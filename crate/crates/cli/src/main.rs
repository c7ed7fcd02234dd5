use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ntex_cli::commands::{self, InterpArgs, MeshArgs, MetricsArgs, RenderArgs, Window, ZoomArgs};
use ntex_cli::{CliError, CliResult};
use ntex_core::sampler::DEFAULT_TILE;
use ntex_core::ExtractorKind;

/// Train and render point-wise neural textures over unbounded 2D and 3D domains.
#[derive(Parser)]
#[command(name = "ntex", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Render {
    /// Model archive written by `ntex train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output resolution.
    #[arg(long, default_value = "512x512", value_parser = parse_size)]
    size: (usize, usize),
    /// Tile edge in pixels used while streaming the render.
    #[arg(long, default_value_t = DEFAULT_TILE)]
    tile: usize,
    /// Exemplar image to encode (texture-space checkpoints only).
    #[arg(long)]
    exemplar: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

impl Render {
    fn args(&self) -> RenderArgs {
        RenderArgs {
            checkpoint: self.checkpoint.clone(),
            seed: self.seed,
            size: self.size,
            tile: self.tile,
            exemplar: self.exemplar.clone(),
            out: self.out.clone(),
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    commands::parse_size(s).map_err(|e| e.message)
}

fn parse_window(s: &str) -> Result<Window, String> {
    Window::parse(s).map_err(|e| e.message)
}

/// Comma-separated numbers given as one argument.
#[derive(Clone, Debug)]
struct Numbers(Vec<f64>);

fn parse_list(s: &str) -> Result<Numbers, String> {
    commands::parse_list(s).map(Numbers).map_err(|e| e.message)
}

fn parse_axis(s: &str) -> Result<usize, String> {
    commands::parse_axis(s).map_err(|e| e.message)
}

fn parse_extractor(s: &str) -> Result<ExtractorKind, String> {
    s.parse().map_err(|e: ntex_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render a window of the texture to PNG or PPM.
    Sample {
        #[command(flatten)]
        render: Render,
        /// `ox,oy[,oz]:ex,ey` in lattice units; defaults to 4 units wide at the origin.
        #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
        window: Option<Window>,
    },
    /// Render an axis-aligned plane through a 3D texture.
    Slice {
        #[command(flatten)]
        render: Render,
        /// Axis normal to the plane.
        #[arg(long, value_parser = parse_axis)]
        axis: usize,
        /// Plane position along the axis, in lattice units.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        offset: f64,
        /// In-plane `ox,oy:ex,ey`.
        #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
        window: Option<Window>,
    },
    /// Color the vertices of an OBJ mesh with a 3D texture (.ply or .obj output).
    Mesh {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Lattice units per model unit; default maps the bounding-box diagonal to 4 cells.
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        exemplar: Option<PathBuf>,
    },
    /// Interpolate between two exemplars' codes; frames are laid out left to right.
    Interp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "128x128", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = DEFAULT_TILE)]
        tile: usize,
        #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
        window: Option<Window>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render frames zooming into a fixed center; `--out` is a directory.
    Zoom {
        #[command(flatten)]
        render: Render,
        /// Fixed point, `x,y[,z]`.
        #[arg(long, value_parser = parse_list, allow_hyphen_values = true)]
        center: Numbers,
        /// Magnifications, one frame each.
        #[arg(long, value_parser = parse_list, default_value = "1,2,4,8,16")]
        factors: Numbers,
        /// Lattice units covered at magnification 1.
        #[arg(long, default_value_t = 4.0)]
        extent: f64,
    },
    /// Similarity, diversity and success for checkpoints against exemplar folders.
    Metrics {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long, default_value_t = 16)]
        seeds: usize,
        #[arg(long, default_value = "vgg", value_parser = parse_extractor)]
        extractor: ExtractorKind,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config } => {
            let path = commands::train(&config, |step, loss| {
                if step % 50 == 0 {
                    eprintln!("step {step:>6}  loss {loss:.6e}");
                }
            })?;
            println!("{}", path.display());
        }
        Command::Sample { render, window } => commands::sample(&render.args(), window.as_ref())?,
        Command::Slice {
            render,
            axis,
            offset,
            window,
        } => commands::slice(&render.args(), axis, offset, window.as_ref())?,
        Command::Mesh {
            checkpoint,
            input,
            out,
            seed,
            scale,
            exemplar,
        } => commands::mesh(&MeshArgs {
            checkpoint,
            input,
            out,
            seed,
            scale,
            exemplar,
        })?,
        Command::Interp {
            checkpoint,
            a,
            b,
            steps,
            seed,
            size,
            tile,
            window,
            out,
        } => commands::interp(
            &InterpArgs {
                checkpoint,
                a,
                b,
                steps,
                seed,
                size,
                tile,
                out,
            },
            window.as_ref(),
        )?,
        Command::Zoom {
            render,
            center,
            factors,
            extent,
        } => {
            let (center, factors) = (center.0, factors.0);
            if !(2..=3).contains(&center.len()) {
                return Err(CliError::usage("--center needs 2 or 3 coordinates"));
            }
            for p in commands::zoom(&ZoomArgs {
                render: render.args(),
                center,
                factors,
                extent,
            })? {
                println!("{}", p.display());
            }
        }
        Command::Metrics {
            checkpoints,
            corpora,
            seeds,
            extractor,
            weights,
            out,
        } => {
            let table = commands::metrics(&MetricsArgs {
                checkpoints,
                corpora,
                seeds,
                extractor,
                weights,
                out,
            })?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ntex: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
