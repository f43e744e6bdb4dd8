//! Generation benchmark: sample one image per prompt, read it back with an
//! OCR backend, and score transcripts against the prompt keywords.
//!
//! Prompt sets are dataset directories; the ground-truth scenes double as
//! the real side of the feature-distance metric and their reference
//! renderings carry the conditioning. Reports embed the scores, the run
//! config, and counters for backend failures.

use std::path::Path;

use serde::{Deserialize, Serialize};

use refdiff_core::condition::RegionLabel;
use refdiff_core::guidance::GuidanceConfig;
use refdiff_core::metrics::{fid_proxy, score_text, TextScore};
use refdiff_core::render::{logo_name, to_train_sample};
use refdiff_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::dataset::{save_rgb, LoadedSample};
use crate::error::{Result, ToolError};
use crate::ocr::{Detection, OcrBackend, RegionQuery};
use crate::stack::ModelStack;

/// One prompt record, also written as `prompts.jsonl` for the record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub template: String,
    pub keywords: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logo_id: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Image-level accuracy (all keywords matched), the headline number.
    pub accuracy: f64,
    pub accuracy_word: f64,
    /// Convention behind `accuracy`, kept in the report so the word-level
    /// variant can be promoted without re-running.
    pub headline_accuracy: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sample_count: usize,
    pub keywords: usize,
    pub detections: usize,
    pub matched: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid_proxy: Option<f64>,
    pub backend_failures: usize,
    pub with_reference: bool,
    pub seed: u64,
    pub guidance: GuidanceConfig,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub guidance: GuidanceConfig,
    /// Condition on the reference channels; off for the ablation baseline.
    pub use_reference: bool,
    pub compute_fid: bool,
}

impl BenchOptions {
    pub fn from_config(config: &RunConfig) -> Self {
        BenchOptions {
            guidance: config.guidance_config(),
            use_reference: true,
            compute_fid: config.eval.fid,
        }
    }
}

/// Keywords a prompt's regions demand: text transcripts verbatim, logos by
/// registry name.
pub fn keywords_of(sample: &LoadedSample) -> Vec<String> {
    sample
        .annotation
        .regions
        .iter()
        .map(|r| match &r.label {
            RegionLabel::Text(w) => w.clone(),
            RegionLabel::Logo(id) => logo_name(*id),
        })
        .collect()
}

fn words_of(detections: &[Detection]) -> Vec<String> {
    detections
        .iter()
        .map(|d| match &d.label {
            RegionLabel::Text(w) => w.clone(),
            RegionLabel::Logo(id) => logo_name(*id),
        })
        .collect()
}

pub fn prompt_records(samples: &[LoadedSample]) -> Vec<PromptRecord> {
    samples
        .iter()
        .map(|s| {
            let logo_id = s.annotation.regions.iter().find_map(|r| match r.label {
                RegionLabel::Logo(id) => Some(id),
                _ => None,
            });
            PromptRecord {
                id: s.annotation.id.clone(),
                template: s.annotation.caption.clone(),
                keywords: keywords_of(s),
                script: None,
                logo_id,
            }
        })
        .collect()
}

pub struct BenchOutcome {
    pub report: EvalReport,
    pub generated: Vec<Tensor<f32>>,
    pub score: TextScore,
}

/// Run the benchmark: one seeded image per prompt, OCR, metrics.
///
/// A backend failure on an image is recorded as zero detections and
/// counted; it never aborts the run. Zero prompts produce an empty report.
pub fn run_benchmark(
    stack: &ModelStack,
    samples: &[LoadedSample],
    backend: &dyn OcrBackend,
    options: &BenchOptions,
    seed: u64,
) -> Result<BenchOutcome> {
    let sampler = stack.sampler()?;
    let mut keywords: Vec<Vec<String>> = Vec::with_capacity(samples.len());
    let mut detections: Vec<Vec<String>> = Vec::with_capacity(samples.len());
    let mut generated: Vec<Tensor<f32>> = Vec::with_capacity(samples.len());
    let mut failures = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let reference = if options.use_reference {
            Some(to_train_sample(&s.sample, &stack.codec)?.reference)
        } else {
            None
        };
        let (image, _) = sampler.sample_indexed(
            &s.annotation.caption,
            reference.as_ref(),
            &options.guidance,
            seed,
            i as u64,
        )?;
        let queries: Vec<RegionQuery> = s
            .sample
            .regions
            .iter()
            .map(|(b, l)| RegionQuery::for_label(*b, l))
            .collect();
        let dets = match backend.recognize(&image, Some(&queries)) {
            Ok(d) => d,
            Err(_) => {
                failures += 1;
                Vec::new()
            }
        };
        keywords.push(keywords_of(s));
        detections.push(words_of(&dets));
        generated.push(image);
    }
    let score = if samples.is_empty() {
        TextScore {
            accuracy_image: 0.0,
            accuracy_word: 0.0,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            images: 0,
            keywords: 0,
            detections: 0,
            matched: 0,
        }
    } else {
        score_text(&keywords, &detections)?
    };
    let fid = if options.compute_fid && samples.len() >= 2 {
        let real = feature_matrix(backend, samples.iter().map(|s| &s.sample.image))?;
        let gen = feature_matrix(backend, generated.iter())?;
        Some(fid_proxy(&real, &gen)?)
    } else {
        None
    };
    let report = EvalReport {
        accuracy: score.accuracy_image,
        accuracy_word: score.accuracy_word,
        headline_accuracy: "image_level".into(),
        precision: score.precision,
        recall: score.recall,
        f1: score.f1,
        sample_count: samples.len(),
        keywords: score.keywords,
        detections: score.detections,
        matched: score.matched,
        fid_proxy: fid,
        backend_failures: failures,
        with_reference: options.use_reference,
        seed,
        guidance: options.guidance.clone(),
        config: stack.config.clone(),
    };
    Ok(BenchOutcome {
        report,
        generated,
        score,
    })
}

/// Stack per-image pooled features into an `(n, d)` matrix in f64 for the
/// Fréchet metric.
fn feature_matrix<'a>(
    backend: &dyn OcrBackend,
    images: impl Iterator<Item = &'a Tensor<f32>>,
) -> Result<Tensor<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for image in images {
        rows.push(backend.features(image)?);
    }
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(n * d);
    for r in &rows {
        if r.len() != d {
            return Err(ToolError::Numeric("feature rows have mixed widths".into()));
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::from_vec(&[n, d], data)?)
}

/// Score the backend on the ground-truth images themselves; the sanity
/// ceiling for everything downstream.
pub fn loopback_score(samples: &[LoadedSample], backend: &dyn OcrBackend) -> Result<TextScore> {
    let mut keywords = Vec::with_capacity(samples.len());
    let mut detections = Vec::with_capacity(samples.len());
    for s in samples {
        let queries: Vec<RegionQuery> = s
            .sample
            .regions
            .iter()
            .map(|(b, l)| RegionQuery::for_label(*b, l))
            .collect();
        let dets = backend.recognize(&s.sample.image, Some(&queries))?;
        keywords.push(keywords_of(s));
        detections.push(words_of(&dets));
    }
    if samples.is_empty() {
        return Err(ToolError::Config("loop-back needs at least one sample".into()));
    }
    Ok(score_text(&keywords, &detections)?)
}

/// Tile images left to right, top to bottom, with a one-pixel gutter.
pub fn save_grid(path: &Path, images: &[Tensor<f32>]) -> Result<()> {
    if images.is_empty() {
        return Err(ToolError::Config("cannot build a grid of zero images".into()));
    }
    let [c, h, w] = images[0].shape() else {
        return Err(ToolError::Config("grid wants (3, h, w) images".into()));
    };
    let (c, h, w) = (*c, *h, *w);
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h + rows - 1, cols * w + cols - 1);
    let mut grid = Tensor::full(&[c, gh, gw], 1.0f32);
    for (i, img) in images.iter().enumerate() {
        if img.shape() != images[0].shape() {
            return Err(ToolError::Config("grid images must share one shape".into()));
        }
        let (r, col) = (i / cols, i % cols);
        let (oy, ox) = (r * (h + 1), col * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    grid.data_mut()[ch * gh * gw + (oy + y) * gw + ox + x] =
                        img.data()[ch * h * w + y * w + x];
                }
            }
        }
    }
    save_rgb(path, &grid)
}
