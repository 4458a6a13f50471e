//! `slidestitch`: whole-slide reconstruction from swept microscope frames.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use slidestitch::coregister::{coregister, extract_pairs, write_pairs, CoregResult};
use slidestitch::error::{Error, Result, StageContext};
use slidestitch::frame_extract::extract_frames;
use slidestitch::imagecore::ImageBuffer;
use slidestitch::metrics::{aggregate, evaluate_paths, render_table};
use slidestitch::pipeline::{load_records, run_pipeline, run_stitch, write_extraction, write_metrics, write_stitch, PipelineConfig};
use slidestitch::stitcher::{BlendMode, StitchMethod};
use slidestitch::synthgen::{generate, SweepSpec};
use slidestitch::wsi_output::{build_pyramid, verify, TileFormat};

mod exit {
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const INPUT: u8 = 5;
    pub const REGISTRATION: u8 = 6;
    pub const NO_TILES: u8 = 7;
    pub const PYRAMID: u8 = 8;
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::InvalidParameter(_) | Error::SpecInfeasible(_) => exit::CONFIG,
        Error::Io { .. } | Error::Codec { .. } | Error::Json { .. } => exit::IO,
        Error::NoFramesFound(_)
        | Error::InconsistentDimensions { .. }
        | Error::ImageTooSmall { .. }
        | Error::DimensionMismatch(..)
        | Error::InvalidImage(_)
        | Error::EmptyInput => exit::INPUT,
        Error::StitchFailed(_) | Error::NoConsensus { .. } | Error::InsufficientMatches { .. } | Error::SingularTransform(_) => {
            exit::REGISTRATION
        }
        Error::NoValidTiles => exit::NO_TILES,
        Error::CorruptPyramid(_) => exit::PYRAMID,
        Error::Stage { .. } => unreachable!("root() strips stage context"),
    }
}

#[derive(Parser)]
#[command(name = "slidestitch", version, about = "Whole-slide images from manually swept microscope frames")]
struct Cli {
    /// Pipeline configuration (TOML). Unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true, env = "SLIDESTITCH_THREADS")]
    threads: Option<usize>,
    /// Emit log events and results as JSON lines.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct StitchFlags {
    /// Frames per batch at each recursion level.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    blend: Option<Blend>,
    /// Per-frame gain compensation.
    #[arg(long)]
    gain_comp: Option<bool>,
    /// Seed for every randomized stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Register all frame pairs instead of recursing.
    #[arg(long)]
    naive: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Blend {
    Feather,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Jpeg,
}

#[derive(Subcommand)]
enum Command {
    /// Extract, stitch and tile; with --reference also co-register, cut pairs and score.
    Run {
        /// Directory of numbered video frames.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scanned reference image of the same slide.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        stitch: StitchFlags,
    },
    /// Pick one sharp frame per pause and drop revisits.
    Extract {
        /// Directory of numbered video frames.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stitch a directory of frames (e.g. the output of `extract`) into a mosaic.
    Stitch {
        /// Directory of numbered frames, stitched in name order.
        #[arg(long)]
        frames: PathBuf,
        /// Receives mosaic.png, stitch.json and timings.json.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stitch: StitchFlags,
    },
    /// Affine co-registration of a mosaic against a scanned image.
    Coregister {
        #[arg(long)]
        stitched: PathBuf,
        #[arg(long)]
        scanned: PathBuf,
        /// Magnification of the scanned image relative to the mosaic.
        #[arg(long)]
        scale: Option<f64>,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut aligned low/high-quality tile pairs.
    Pairs {
        #[arg(long)]
        stitched: PathBuf,
        #[arg(long)]
        scanned: PathBuf,
        /// JSON written by `coregister`.
        #[arg(long)]
        coreg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tile: Option<u32>,
        #[arg(long)]
        stride: Option<u32>,
        #[arg(long)]
        scale: Option<u32>,
        #[arg(long)]
        slide_id: Option<String>,
    },
    /// SSIM and PSNR of a test image (or directory of tiles) against a reference.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Directory for metrics.json and metrics.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        label: String,
    },
    /// Write a tile pyramid, or check an existing one with --verify.
    Tile {
        /// Pyramid directory.
        #[arg(long)]
        out: PathBuf,
        /// Source image; required unless --verify.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        tile_size: Option<u32>,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Render a synthetic sweep with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Sweep spec (TOML); defaults apply to absent fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_stops: Option<usize>,
        /// Also write the full virtual slide as slide.png.
        #[arg(long)]
        slide: bool,
    },
    /// Print the effective configuration as TOML.
    Config,
}

struct Log {
    json: bool,
    clock: Instant,
}

impl Log {
    fn event(&self, event: &str, message: &str, fields: Value) {
        if self.json {
            let mut v = json!({ "t": self.clock.elapsed().as_secs_f64(), "event": event, "message": message });
            if let (Some(obj), Value::Object(extra)) = (v.as_object_mut(), fields) {
                obj.extend(extra);
            }
            eprintln!("{v}");
        } else {
            eprintln!("[{event}] {message}");
        }
    }

    fn result(&self, human: &str, fields: Value) {
        if self.json {
            println!("{}", json!({ "event": "result", "result": fields }));
        } else {
            print!("{human}");
            if !human.ends_with('\n') {
                println!();
            }
        }
    }
}

fn apply_stitch_flags(config: &mut PipelineConfig, flags: &StitchFlags) {
    if let Some(b) = flags.batch_size {
        config.stitch.batch_size = b;
    }
    if let Some(b) = flags.blend {
        config.stitch.blend = match b {
            Blend::Feather => BlendMode::Feather,
            Blend::None => BlendMode::None,
        };
    }
    if let Some(g) = flags.gain_comp {
        config.stitch.gain_compensation = g;
    }
    if let Some(s) = flags.seed {
        config.seed = s;
    }
    if flags.naive {
        config.method = StitchMethod::Naive;
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn run(cli: Cli, log: &Log) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Run {
            frames,
            out,
            reference,
            stitch,
        } => {
            apply_stitch_flags(&mut config, &stitch);
            log.event("run", &format!("frames from {}", frames.display()), json!({}));
            let run = run_pipeline(&frames, &out, &config.effective(), reference.as_deref())?;
            for t in &run.timings {
                log.event("timing", &format!("{} {:.2}s", t.stage, t.seconds), json!({ "stage": t.stage, "seconds": t.seconds }));
            }
            let m = &run.manifest;
            log.result(
                &format!(
                    "{} frames -> {} extracted -> {}x{} mosaic ({} placed, {} dropped), outputs in {}",
                    m.source_frames,
                    m.extracted_frames,
                    m.stitch.mosaic_width,
                    m.stitch.mosaic_height,
                    m.stitch.placed,
                    m.stitch.dropped,
                    out.display()
                ),
                serde_json::to_value(m).expect("serializable"),
            );
        }
        Command::Extract { frames, out } => {
            let ex = extract_frames(&frames, &config.extract).stage("extract")?;
            let manifest = write_extraction(&out, &ex)?;
            log.result(
                &format!("{} frames -> {} records in {}", ex.log.frame_count, ex.records.len(), out.display()),
                json!({ "frames": ex.log.frame_count, "records": manifest.records }),
            );
        }
        Command::Stitch { frames, out, stitch } => {
            apply_stitch_flags(&mut config, &stitch);
            let config = config.effective();
            config.validate()?;
            let records = load_records(&frames).stage("load")?;
            log.event("stitch", &format!("{} frames", records.len()), json!({ "frames": records.len() }));
            let (node, manifest) = run_stitch(&records, &config.stitch, config.method).stage("stitch")?;
            write_stitch(&out, &node, &manifest)?;
            log.result(
                &format!(
                    "{} placed, {} dropped, {} registrations, mosaic {}x{} in {}",
                    manifest.frames.len(),
                    manifest.dropped.len(),
                    manifest.registration_calls,
                    node.image.width(),
                    node.image.height(),
                    out.display()
                ),
                json!({
                    "placed": manifest.frames.len(),
                    "dropped": manifest.dropped.len(),
                    "registration_calls": manifest.registration_calls,
                    "timings": manifest.timings_json(),
                }),
            );
        }
        Command::Coregister {
            stitched,
            scanned,
            scale,
            out,
        } => {
            let a = ImageBuffer::load(&stitched)?;
            let b = ImageBuffer::load(&scanned)?;
            let config = config.effective();
            let r = coregister(&a, &b, scale.unwrap_or(config.scale_hint), &config.coregister).stage("coregister")?;
            write_json(&out, &r)?;
            log.result(
                &format!(
                    "{} inliers, rms {:.3} px, overlap {:.3} -> {}",
                    r.inliers,
                    r.rms_error,
                    r.overlap_fraction,
                    out.display()
                ),
                serde_json::to_value(&r).expect("serializable"),
            );
        }
        Command::Pairs {
            stitched,
            scanned,
            coreg,
            out,
            tile,
            stride,
            scale,
            slide_id,
        } => {
            let mut p = config.pairs.clone();
            p.tile = tile.unwrap_or(p.tile);
            p.stride = stride.unwrap_or(p.stride);
            p.scale = scale.unwrap_or(p.scale);
            p.slide_id = slide_id.unwrap_or(p.slide_id);
            let a = ImageBuffer::load(&stitched)?;
            let b = ImageBuffer::load(&scanned)?;
            let c: CoregResult = read_json(&coreg)?;
            let pairs = extract_pairs(&a, &b, &c, &p).stage("pairs")?;
            let m = write_pairs(&out, &pairs, &c, &p)?;
            log.result(
                &format!(
                    "{} pairs (train {}, val {}, test {}) in {}",
                    m.pairs.len(),
                    m.counts.train,
                    m.counts.val,
                    m.counts.test,
                    out.display()
                ),
                json!({ "pairs": m.pairs.len(), "counts": m.counts }),
            );
        }
        Command::Metrics {
            reference,
            test,
            out,
            label,
        } => {
            let samples = evaluate_paths(&reference, &test).stage("metrics")?;
            let report = match &out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                        path: dir.clone(),
                        source: e,
                    })?;
                    write_metrics(dir, &label, samples.clone())?
                }
                None => aggregate(&samples)?,
            };
            log.result(
                &render_table(&[(label, report.clone())]),
                json!({ "report": report, "samples": samples }),
            );
        }
        Command::Tile {
            out,
            image,
            verify: check,
            tile_size,
            format,
        } => {
            let source = image.as_deref().map(ImageBuffer::load).transpose()?;
            if check {
                let v = verify(&out, source.as_ref())?;
                log.result(
                    &format!("pyramid OK: {} levels, {} tiles round-trip", v.levels, v.tiles),
                    serde_json::to_value(&v).expect("serializable"),
                );
            } else {
                let img = source.ok_or_else(|| Error::InvalidParameter("tile needs --image unless --verify".into()))?;
                let mut params = config.pyramid.clone();
                params.tile_size = tile_size.unwrap_or(params.tile_size);
                if let Some(f) = format {
                    params.format = match f {
                        Format::Png => TileFormat::Png,
                        Format::Jpeg => TileFormat::Jpeg,
                    };
                }
                let p = build_pyramid(&img, &out, &params)?;
                log.result(
                    &format!("{} levels, {} tiles in {}", p.levels, p.tile_count(), out.display()),
                    serde_json::to_value(&p).expect("serializable"),
                );
            }
        }
        Command::Synth {
            out,
            spec,
            seed,
            max_stops,
            slide,
        } => {
            let mut s = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p, source: e })?;
                    SweepSpec::from_toml(&text)?
                }
                None => SweepSpec::default(),
            };
            s.seed = seed.unwrap_or(s.seed);
            s.max_stops = max_stops.or(s.max_stops);
            let truth = generate(&s, &out)?;
            if slide {
                slidestitch::synthgen::render_slide(s.slide_width, s.slide_height, s.seed).save(out.join("slide.png"))?;
            }
            log.result(
                &format!(
                    "{} frames, {} stops, {} pauses in {}",
                    truth.frames.len(),
                    truth.stops.len(),
                    truth.pauses.len(),
                    out.display()
                ),
                json!({ "frames": truth.frames.len(), "stops": truth.stops.len(), "pauses": truth.pauses.len() }),
            );
        }
        Command::Config => {
            let c = config.effective();
            log.result(&c.to_toml(), serde_json::to_value(&c).expect("serializable"));
        }
    }
    Ok(())
}

fn configure_threads(threads: Option<usize>) -> std::result::Result<(), String> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err("--threads must be at least 1".into());
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log = Log {
        json: cli.json,
        clock: Instant::now(),
    };
    if let Err(msg) = configure_threads(cli.threads) {
        log.event("error", &msg, json!({ "code": exit::USAGE }));
        return ExitCode::from(exit::USAGE);
    }
    match run(cli, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            log.event("error", &e.to_string(), json!({ "code": code }));
            ExitCode::from(code)
        }
    }
}
