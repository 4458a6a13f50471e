//! Configuration file and the end-to-end run: frames, mosaic, pyramid and,
//! given a scanned reference, tile pairs and metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coregister::{coregister, extract_pairs, write_pairs, CoregParams, CoregResult, PairParams, SplitCounts, TilePair};
use crate::error::{Error, Result, StageContext};
use crate::frame_extract::{extract_frames, DirSource, Extraction, ExtractionLog, ExtractionParams, FrameRecord, FrameSource};
use crate::imagecore::{upscale, ImageBuffer};
use crate::metrics::{aggregate, render_table, sample, MetricSample, MetricsOutput, MetricsReport};
use crate::par;
use crate::stitcher::{stitch_naive, stitch_recursive, MosaicNode, StageTiming, StitchManifest, StitchMethod, StitchPlan};
use crate::wsi_output::{build_pyramid, PyramidParams, TilePyramid};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const EXTRACTION_FILE: &str = "extraction.json";
pub const STITCH_MANIFEST_FILE: &str = "stitch.json";
pub const MOSAIC_FILE: &str = "mosaic.png";
pub const FRAMES_DIR: &str = "frames";
pub const PYRAMID_DIR: &str = "pyramid";
pub const PAIRS_DIR: &str = "pairs";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_TABLE_FILE: &str = "metrics.txt";

/// Every tunable of the pipeline. Unknown keys are rejected and every field
/// has a default, so an empty file is a valid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds every randomized stage; overrides the per-stage RANSAC seeds.
    pub seed: u64,
    pub method: StitchMethod,
    /// Magnification of the scanned reference relative to the mosaic.
    pub scale_hint: f64,
    pub extract: ExtractionParams,
    pub stitch: StitchPlan,
    pub pyramid: PyramidParams,
    pub coregister: CoregParams,
    pub pairs: PairParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            method: StitchMethod::Recursive,
            scale_hint: 4.0,
            extract: ExtractionParams::default(),
            stitch: StitchPlan::default(),
            pyramid: PyramidParams::default(),
            coregister: CoregParams::default(),
            pairs: PairParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str::<PipelineConfig>(text)
            .map(|c| c.effective())
            .map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    /// The configuration with the global seed pushed into every stage.
    pub fn effective(mut self) -> Self {
        self.stitch.ransac.seed = self.seed;
        self.coregister.ransac.seed = self.seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.stitch.validate().map_err(|e| Error::Config(format!("stitch: {e}")))?;
        self.pairs.validate().map_err(|e| Error::Config(format!("pairs: {e}")))?;
        if !(self.scale_hint.is_finite() && self.scale_hint >= 1.0) {
            return Err(Error::Config(format!("scale_hint {} must be >= 1", self.scale_hint)));
        }
        if self.pyramid.tile_size < 2 {
            return Err(Error::Config("pyramid.tile_size must be >= 2".into()));
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// One extracted frame as listed in `extraction.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub seq_index: usize,
    pub file: String,
    pub source_indices: (usize, usize),
    pub source_frame: usize,
    pub motion: f64,
    pub focus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionManifest {
    pub records: Vec<RecordEntry>,
    pub log: ExtractionLog,
}

pub fn record_file_name(seq_index: usize) -> String {
    format!("frame_{seq_index:05}.png")
}

/// Saves the records as numbered PNGs plus `extraction.json`.
pub fn write_extraction(out_dir: &Path, extraction: &Extraction) -> Result<ExtractionManifest> {
    create_dir(out_dir)?;
    let records: Vec<RecordEntry> = extraction
        .records
        .iter()
        .map(|r| RecordEntry {
            seq_index: r.seq_index,
            file: record_file_name(r.seq_index),
            source_indices: r.source_indices,
            source_frame: r.source_frame,
            motion: r.motion.0,
            focus: r.focus.0,
        })
        .collect();
    par::map(&extraction.records, |r| r.image.save(out_dir.join(record_file_name(r.seq_index))))
        .into_iter()
        .collect::<Result<()>>()?;
    let manifest = ExtractionManifest {
        records,
        log: extraction.log.clone(),
    };
    write_json(&out_dir.join(EXTRACTION_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads a directory of frames as records in file order.
pub fn load_records(dir: &Path) -> Result<Vec<FrameRecord>> {
    let src = DirSource::open(dir)?;
    let indices: Vec<usize> = (0..src.len()).collect();
    par::map(&indices, |&i| FrameRecord::from_image(i, src.load(i)?))
        .into_iter()
        .collect()
}

pub fn run_stitch(records: &[FrameRecord], plan: &StitchPlan, method: StitchMethod) -> Result<(MosaicNode, StitchManifest)> {
    match method {
        StitchMethod::Recursive => stitch_recursive(records, plan),
        StitchMethod::Naive => stitch_naive(records, plan),
    }
}

/// Writes `mosaic.png`, `stitch.json` and `timings.json` into `out_dir`.
pub fn write_stitch(out_dir: &Path, node: &MosaicNode, manifest: &StitchManifest) -> Result<()> {
    create_dir(out_dir)?;
    node.image.save(out_dir.join(MOSAIC_FILE))?;
    write_json(&out_dir.join(STITCH_MANIFEST_FILE), manifest)?;
    write_json(&out_dir.join(TIMINGS_FILE), &manifest.timings_json())
}

/// No-enhancement baseline: each low-quality tile upscaled to the high-quality
/// size and scored against it.
pub fn baseline_metrics(pairs: &[TilePair], slide_id: &str, scale: u32) -> Result<Vec<MetricSample>> {
    par::map(pairs, |p| sample(p.id(slide_id), &p.highq, &upscale(&p.lowq, scale)))
        .into_iter()
        .collect()
}

pub fn write_metrics(out_dir: &Path, label: &str, samples: Vec<MetricSample>) -> Result<MetricsReport> {
    let report = aggregate(&samples)?;
    write_json(
        &out_dir.join(METRICS_FILE),
        &MetricsOutput {
            report: report.clone(),
            samples,
        },
    )?;
    let table = render_table(&[(label.to_string(), report.clone())]);
    let path = out_dir.join(METRICS_TABLE_FILE);
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchSummary {
    pub method: StitchMethod,
    pub registration_calls: usize,
    pub placed: usize,
    pub dropped: usize,
    pub mosaic_width: u32,
    pub mosaic_height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub coreg: CoregResult,
    pub pairs: SplitCounts,
    pub baseline_metrics: MetricsReport,
}

/// Top-level record of a pipeline run; contains no timings or absolute paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub config: PipelineConfig,
    pub source_frames: usize,
    pub extracted_frames: usize,
    pub stitch: StitchSummary,
    pub pyramid: TilePyramid,
    pub reference: Option<ReferenceSummary>,
    pub outputs: Vec<String>,
}

#[derive(Debug)]
pub struct PipelineRun {
    pub manifest: PipelineManifest,
    pub timings: Vec<StageTiming>,
    pub out_dir: PathBuf,
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let clock = Instant::now();
    let out = f()?;
    timings.push(StageTiming {
        stage: stage.into(),
        seconds: clock.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Runs extraction, stitching and pyramid building on `frame_dir`; with
/// `reference`, also co-registers, extracts tile pairs and scores the
/// no-enhancement baseline. Everything lands in `out_dir`, `manifest.json` last.
pub fn run_pipeline(
    frame_dir: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
    reference: Option<&Path>,
) -> Result<PipelineRun> {
    let config = config.clone().effective();
    config.validate()?;
    create_dir(out_dir)?;
    let mut timings = Vec::new();
    let mut outputs = vec![FRAMES_DIR.to_string(), MOSAIC_FILE.into(), STITCH_MANIFEST_FILE.into(), PYRAMID_DIR.into()];

    let extraction = timed(&mut timings, "extract", || {
        let ex = extract_frames(frame_dir, &config.extract)?;
        write_extraction(&out_dir.join(FRAMES_DIR), &ex)?;
        Ok(ex)
    })
    .stage("extract")?;

    let (node, stitch) = timed(&mut timings, "stitch", || {
        let (node, manifest) = run_stitch(&extraction.records, &config.stitch, config.method)?;
        node.image.save(out_dir.join(MOSAIC_FILE))?;
        write_json(&out_dir.join(STITCH_MANIFEST_FILE), &manifest)?;
        Ok((node, manifest))
    })
    .stage("stitch")?;
    timings.extend(stitch.timings.iter().map(|t| StageTiming {
        stage: format!("stitch.{}", t.stage),
        seconds: t.seconds,
    }));

    let pyramid = timed(&mut timings, "pyramid", || {
        build_pyramid(&node.image, out_dir.join(PYRAMID_DIR), &config.pyramid)
    })
    .stage("pyramid")?;

    let reference = match reference {
        None => None,
        Some(path) => {
            let scanned = ImageBuffer::load(path).stage("reference")?;
            let coreg = timed(&mut timings, "coregister", || {
                coregister(&node.image, &scanned, config.scale_hint, &config.coregister)
            })
            .stage("coregister")?;
            let (pairs, manifest) = timed(&mut timings, "pairs", || {
                let pairs = extract_pairs(&node.image, &scanned, &coreg, &config.pairs)?;
                let manifest = write_pairs(out_dir.join(PAIRS_DIR), &pairs, &coreg, &config.pairs)?;
                Ok((pairs, manifest))
            })
            .stage("pairs")?;
            let report = timed(&mut timings, "metrics", || {
                let samples = baseline_metrics(&pairs, &config.pairs.slide_id, config.pairs.scale)?;
                write_metrics(out_dir, "upscaled", samples)
            })
            .stage("metrics")?;
            outputs.extend([PAIRS_DIR.to_string(), METRICS_FILE.into(), METRICS_TABLE_FILE.into()]);
            Some(ReferenceSummary {
                coreg,
                pairs: manifest.counts,
                baseline_metrics: report,
            })
        }
    };

    let manifest = PipelineManifest {
        source_frames: extraction.log.frame_count,
        extracted_frames: extraction.records.len(),
        stitch: StitchSummary {
            method: stitch.method,
            registration_calls: stitch.registration_calls,
            placed: stitch.frames.len(),
            dropped: stitch.dropped.len(),
            mosaic_width: node.image.width(),
            mosaic_height: node.image.height(),
        },
        pyramid,
        reference,
        outputs,
        config,
    };
    write_json(&out_dir.join(TIMINGS_FILE), &serde_json::json!({ "stages": timings }))?;
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(PipelineRun {
        manifest,
        timings,
        out_dir: out_dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{frame_file_name, render_slide};

    #[test]
    fn empty_config_is_default() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default().effective());
    }

    #[test]
    fn unknown_key_is_named() {
        match PipelineConfig::from_toml("[stitch]\nbatch_sise = 10\n") {
            Err(Error::Config(msg)) => assert!(msg.contains("batch_sise"), "{msg}"),
            other => panic!("{other:?}"),
        }
        match PipelineConfig::from_toml("colour = 1\n") {
            Err(Error::Config(msg)) => assert!(msg.contains("colour"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = PipelineConfig::default();
        c.seed = 9;
        c.stitch.batch_size = 12;
        c.extract.min_len = Some(4);
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c.effective());
        assert_eq!(back.stitch.ransac.seed, 9);
    }

    #[test]
    fn identical_frames_give_the_frame() {
        let frames = tempfile::tempdir().unwrap();
        let img = render_slide(320, 240, 3);
        for i in 0..30 {
            img.save(frames.path().join(frame_file_name(i))).unwrap();
        }
        let out = tempfile::tempdir().unwrap();
        let run = run_pipeline(frames.path(), out.path(), &PipelineConfig::default(), None).unwrap();
        assert_eq!(run.manifest.extracted_frames, 1);
        assert_eq!(ImageBuffer::load(out.path().join(MOSAIC_FILE)).unwrap(), img);
        assert!(out.path().join(PYRAMID_DIR).join(crate::wsi_output::DESCRIPTOR_FILE).is_file());
    }

    #[test]
    fn stage_is_attached_to_errors() {
        let frames = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let err = run_pipeline(frames.path(), out.path(), &PipelineConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "extract", .. }));
        assert!(matches!(err.root(), Error::NoFramesFound(_)));
    }
}
