use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vitprobe::graphlayout::{self, GraphSpec, LayoutParams, LayoutReport, DEFAULT_ITERATIONS};
use vitprobe::ingest::{self, RasterImage};
use vitprobe::interpret::{self, sig9_list};
use vitprobe::model::forward;
use vitprobe::weights_io;
use vitprobe::{ActivationTrace, HeatGrid, ViTConfig, ViTWeights};
use vitprobe_service::{AppState, Model, ServeOptions, DEFAULT_CAPACITY, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "vitprobe", version, about = "ViT inference with activation tracing and interpretability maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify an image and print the top classes.
    Classify {
        #[command(flatten)]
        input: ModelInput,
        /// Number of classes to list under `top`.
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine similarity of one token against every token of a layer.
    Similarity {
        #[command(flatten)]
        input: ModelInput,
        /// 0 is the embedding output, l is the output of block l.
        #[arg(long)]
        layer: usize,
        /// Reference token: 0 is CLS, 1.. are patches in row-major order.
        #[arg(long)]
        patch: usize,
        #[command(flatten)]
        output: GridOutput,
    },
    /// One row of a head's attention matrix.
    Attention {
        #[command(flatten)]
        input: ModelInput,
        /// Block index, 1-based.
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        #[arg(long)]
        patch: usize,
        #[command(flatten)]
        output: GridOutput,
    },
    /// One embedding channel across all tokens of a layer.
    Channel {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        channel: usize,
        #[command(flatten)]
        output: GridOutput,
    },
    /// Classification head applied to a patch token instead of CLS.
    Probe {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        patch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine similarity between positional-embedding rows.
    Positional {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        patch: usize,
        #[command(flatten)]
        output: GridOutput,
    },
    /// Force-directed layout of a graph (the shipped knowledge graph by default).
    Layout {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iterations: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write deterministic random weights, for trying the pipeline without a checkpoint.
    RandomWeights {
        #[arg(long, value_enum, default_value_t = Preset::VitB16)]
        preset: Preset,
        /// JSON config file; overrides --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        scale: f32,
        /// Manifest path; the blob is written next to it with a `.bin` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP API (and serve the web UI bundle if --static-dir is given).
    Serve {
        #[arg(long, env = "VITPROBE_WEIGHTS")]
        weights: Option<PathBuf>,
        #[arg(long, env = "VITPROBE_PORT", default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = DEFAULT_CAPACITY)]
        capacity: usize,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    VitB16,
    Tiny,
}

#[derive(Args)]
struct ModelInput {
    /// Weight manifest; the blob is the sibling file with a `.bin` extension.
    #[arg(long)]
    weights: PathBuf,
    /// PNG, JPEG, or raw `.rgb8` with a `<file>.json` header.
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct GridOutput {
    /// JSON output file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the normalized grid as an 8-bit binary PGM.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

struct Loaded {
    weights: ViTWeights,
    labels: Vec<String>,
}

fn load_model(manifest: &Path) -> Result<Loaded> {
    let labels = weights_io::read_manifest(manifest)
        .with_context(|| format!("reading weights manifest {}", manifest.display()))?
        .class_labels();
    let blob = weights_io::blob_path_for(manifest);
    let weights = weights_io::load_weights(manifest, &blob)
        .with_context(|| format!("loading weights {}", manifest.display()))?;
    Ok(Loaded { weights, labels })
}

fn run_image(input: &ModelInput) -> Result<(Loaded, ActivationTrace)> {
    let model = load_model(&input.weights)?;
    let raster = RasterImage::load(&input.image)
        .with_context(|| format!("reading image {}", input.image.display()))?;
    let c = &model.weights.config;
    let trace = forward(&ingest::preprocess_to(&raster, c.image_h, c.image_w), &model.weights)?;
    Ok((model, trace))
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Binary PGM of the normalized grid, one byte per cell: `round(v * 255)`.
fn pgm_bytes(grid: &HeatGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.cols, grid.rows).into_bytes();
    out.extend(grid.normalized.iter().map(|&v| (v * 255.0).round() as u8));
    out
}

fn emit_grid(grid: &HeatGrid, output: &GridOutput) -> Result<()> {
    if let Some(path) = &output.pgm {
        fs::write(path, pgm_bytes(grid)).with_context(|| format!("writing {}", path.display()))?;
    }
    write_json(grid, output.out.as_deref())
}

#[derive(Serialize)]
struct RankedClass {
    class: usize,
    label: String,
    prob: f64,
}

#[derive(Serialize)]
struct Classification {
    predicted_class: usize,
    predicted_label: String,
    top: Vec<RankedClass>,
    #[serde(serialize_with = "sig9_list")]
    probs: Vec<f32>,
}

fn classification(probs: &[f32], labels: &[String], top: usize) -> Classification {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Stable sort keeps the lower class index first on ties.
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let ranked = order
        .iter()
        .take(top)
        .map(|&i| RankedClass {
            class: i,
            label: labels[i].clone(),
            prob: interpret::round_sig9(probs[i] as f64),
        })
        .collect();
    Classification {
        predicted_class: order[0],
        predicted_label: labels[order[0]].clone(),
        top: ranked,
        probs: probs.to_vec(),
    }
}

#[derive(Serialize)]
struct ProbeOutput {
    ref_index: usize,
    predicted_class: usize,
    predicted_label: String,
    #[serde(serialize_with = "sig9_list")]
    logits: Vec<f32>,
    #[serde(serialize_with = "sig9_list")]
    probs: Vec<f32>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Classify { input, top, out } => {
            let (model, trace) = run_image(&input)?;
            let c = classification(trace.probs().data(), &model.labels, top);
            write_json(&c, out.as_deref())
        }
        Command::Similarity {
            input,
            layer,
            patch,
            output,
        } => {
            let (_, trace) = run_image(&input)?;
            emit_grid(&interpret::similarity_map(&trace, layer, patch)?, &output)
        }
        Command::Attention {
            input,
            layer,
            head,
            patch,
            output,
        } => {
            let (_, trace) = run_image(&input)?;
            emit_grid(&interpret::attention_map(&trace, layer, head, patch)?, &output)
        }
        Command::Channel {
            input,
            layer,
            channel,
            output,
        } => {
            let (_, trace) = run_image(&input)?;
            emit_grid(&interpret::channel_grid(&trace, layer, channel)?, &output)
        }
        Command::Probe { input, patch, out } => {
            let (model, trace) = run_image(&input)?;
            let p = interpret::patch_probe(&trace, &model.weights, patch)?;
            let predicted = classification(&p.probs, &model.labels, 1).predicted_class;
            let report = ProbeOutput {
                ref_index: p.ref_index,
                predicted_class: predicted,
                predicted_label: model.labels[predicted].clone(),
                logits: p.logits,
                probs: p.probs,
            };
            write_json(&report, out.as_deref())
        }
        Command::Positional {
            weights,
            patch,
            output,
        } => {
            let model = load_model(&weights)?;
            emit_grid(&interpret::positional_similarity(&model.weights, patch)?, &output)
        }
        Command::Layout {
            graph,
            seed,
            iterations,
            out,
        } => {
            let spec = match graph {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading graph {}", path.display()))?;
                    GraphSpec::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => graphlayout::knowledge_graph(),
            };
            let state = graphlayout::layout(&spec, seed, iterations, &LayoutParams::default())?;
            write_json(&LayoutReport::new(&spec, seed, &state), out.as_deref())
        }
        Command::RandomWeights {
            preset,
            config,
            seed,
            scale,
            out,
        } => {
            let config = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading config {}", path.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => match preset {
                    Preset::VitB16 => ViTConfig::vit_b16(),
                    Preset::Tiny => ViTConfig::tiny(),
                },
            };
            let w = ViTWeights::random(config, seed, scale)?;
            weights_io::save_weights(&w, &out, &weights_io::blob_path_for(&out))?;
            eprintln!(
                "wrote {} and {}",
                out.display(),
                weights_io::blob_path_for(&out).display()
            );
            Ok(())
        }
        Command::Serve {
            weights,
            port,
            host,
            capacity,
            static_dir,
        } => {
            let model = match weights {
                Some(path) => Some(
                    Model::load(&path).with_context(|| format!("loading weights {}", path.display()))?,
                ),
                None => {
                    eprintln!("no weights given; session endpoints will answer 503");
                    None
                }
            };
            if let Some(dir) = &static_dir {
                if !dir.is_dir() {
                    bail!("static directory {} does not exist", dir.display());
                }
            }
            let state = AppState::new(model, capacity);
            let opts = ServeOptions {
                addr: SocketAddr::new(host, port),
                static_dir,
            };
            vitprobe_service::serve_blocking(state, opts).context("running server")
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
