//! On-disk dataset format.
//!
//! A dataset directory holds `images/` (the scenes), `refs/` (reference
//! renderings), `masks/` (binary region masks), `annotations.jsonl` with one
//! record per sample, and `manifest.json` recording the seed, per-script
//! counts, the charset hash, and the full config that produced it. All
//! boxes are pixels with a top-left origin.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use refdiff_core::auxiliary::Charset;
use refdiff_core::condition::RegionLabel;
use refdiff_core::render::{
    generate_sample, FontBook, PixelBox, Script, INVENTED_CHARS, LATIN_CHARS,
};
use refdiff_core::render::{charset_for, AnnotatedSample};
use refdiff_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{Result, ToolError};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegionRecord {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub label: RegionLabel,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Annotation {
    pub id: String,
    pub caption: String,
    pub is_synthetic: bool,
    pub regions: Vec<RegionRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct DatasetCounts {
    pub samples: usize,
    /// Samples rendered under each script's quota.
    pub per_script: BTreeMap<String, usize>,
    pub text_regions: usize,
    pub logo_regions: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub counts: DatasetCounts,
    pub charset_hash: String,
    pub config: RunConfig,
}

pub fn script_name(script: Script) -> &'static str {
    match script {
        Script::Latin => "latin",
        Script::Invented => "invented",
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn charset_hash(charset: &Charset) -> String {
    let joined: String = charset.chars().iter().collect();
    sha256_hex(joined.as_bytes())
}

/// Write an RGB tensor `(3, h, w)` with values in `[0, 1]` as an 8-bit PNG.
pub fn save_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [c, h, w] = image.shape() else {
        return Err(ToolError::Config(format!(
            "expected (3, h, w) image, got {:?}",
            image.shape()
        )));
    };
    let (c, h, w) = (*c, *h, *w);
    if c != 3 {
        return Err(ToolError::Config(format!("expected 3 channels, got {c}")));
    }
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                quant(image.data()[y * w + x]),
                quant(image.data()[h * w + y * w + x]),
                quant(image.data()[2 * h * w + y * w + x]),
            ]);
            buf.put_pixel(x as u32, y as u32, px);
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                out.data_mut()[ch * h * w + y * w + x] = px.0[ch] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Write a mask `(h, w)` with values in `{0, 1}` as a grayscale PNG; the
/// 0/255 byte encoding round-trips the mask exactly.
pub fn save_gray(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let [h, w] = mask.shape() else {
        return Err(ToolError::Config(format!(
            "expected (h, w) mask, got {:?}",
            mask.shape()
        )));
    };
    let (h, w) = (*h, *w);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (mask.data()[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            out.data_mut()[y * w + x] = img.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn word_script(word: &str) -> Option<Script> {
    if word.chars().all(|c| LATIN_CHARS.contains(c)) {
        Some(Script::Latin)
    } else if word.chars().all(|c| INVENTED_CHARS.contains(c)) {
        Some(Script::Invented)
    } else {
        None
    }
}

/// Generate `config.data.count` samples into `dir`.
///
/// Samples are assigned to scripts round-robin, so the per-script counts in
/// the manifest follow from the config alone. A nonzero count that cannot
/// give every configured script at least one sample is a config error;
/// count zero writes an empty dataset and is not.
pub fn build_dataset(dir: &Path, config: &RunConfig, seed: u64) -> Result<Manifest> {
    config.validate()?;
    let scripts = &config.data.scripts;
    let count = config.data.count;
    if count > 0 && !scripts.is_empty() && count < scripts.len() {
        return Err(ToolError::Config(format!(
            "data.count = {count} leaves a zero quota for some of the {} scripts",
            scripts.len()
        )));
    }
    for sub in ["images", "refs", "masks"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let fonts = FontBook::builtin();
    let mut counts = DatasetCounts::default();
    for s in scripts {
        counts.per_script.insert(script_name(*s).to_string(), 0);
    }
    let mut ann_file = fs::File::create(dir.join("annotations.jsonl"))?;
    for i in 0..count {
        let mut cfg = config.synth_config();
        if !scripts.is_empty() {
            let script = scripts[i % scripts.len()];
            cfg.scripts = vec![script];
            *counts
                .per_script
                .get_mut(script_name(script))
                .expect("quota key inserted above") += 1;
        }
        let (_, sample) = generate_sample::<f32>(&cfg, &fonts, seed, i as u64)?;
        let id = format!("{i:06}");
        save_rgb(&dir.join("images").join(format!("{id}.png")), &sample.image)?;
        save_rgb(
            &dir.join("refs").join(format!("{id}.png")),
            &sample.reference_image,
        )?;
        save_gray(&dir.join("masks").join(format!("{id}.png")), &sample.mask)?;
        let regions = sample
            .regions
            .iter()
            .map(|(b, label)| {
                match label {
                    RegionLabel::Text(_) => counts.text_regions += 1,
                    RegionLabel::Logo(_) => counts.logo_regions += 1,
                }
                RegionRecord {
                    x0: b.x0,
                    y0: b.y0,
                    x1: b.x1,
                    y1: b.y1,
                    label: label.clone(),
                }
            })
            .collect();
        let ann = Annotation {
            id,
            caption: sample.caption.clone(),
            is_synthetic: sample.is_synthetic,
            regions,
        };
        serde_json::to_writer(&mut ann_file, &ann)?;
        ann_file.write_all(b"\n")?;
        counts.samples += 1;
    }
    ann_file.flush()?;
    let charset = if scripts.is_empty() {
        None
    } else {
        Some(charset_for(scripts)?)
    };
    let manifest = Manifest {
        seed,
        counts,
        charset_hash: charset
            .as_ref()
            .map(charset_hash)
            .unwrap_or_else(|| sha256_hex(b"")),
        config: config.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    fs::write(dir.join("config.toml"), config.echo_toml()?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub annotation: Annotation,
    pub sample: AnnotatedSample<f32>,
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedSample>> {
    let file = fs::File::open(dir.join("annotations.jsonl"))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let annotation: Annotation = serde_json::from_str(&line)?;
        let id = &annotation.id;
        let image = load_rgb(&dir.join("images").join(format!("{id}.png")))?;
        let reference_image = load_rgb(&dir.join("refs").join(format!("{id}.png")))?;
        let mask = load_gray(&dir.join("masks").join(format!("{id}.png")))?;
        let regions = annotation
            .regions
            .iter()
            .map(|r| {
                (
                    PixelBox {
                        x0: r.x0,
                        y0: r.y0,
                        x1: r.x1,
                        y1: r.y1,
                    },
                    r.label.clone(),
                )
            })
            .collect();
        let sample = AnnotatedSample {
            image,
            caption: annotation.caption.clone(),
            regions,
            is_synthetic: annotation.is_synthetic,
            reference_image,
            mask,
        };
        out.push(LoadedSample { annotation, sample });
    }
    Ok(out)
}

/// Sha256 of a file's bytes, for artifact reproducibility checks.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Per-script text-region tallies of a sample list, used by tests and the
/// manifest cross-checks.
pub fn region_scripts(samples: &[LoadedSample]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        for r in &s.annotation.regions {
            if let RegionLabel::Text(word) = &r.label {
                if let Some(script) = word_script(word) {
                    *counts.entry(script_name(script).to_string()).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

pub fn dataset_paths(dir: &Path) -> Vec<PathBuf> {
    let mut paths = vec![dir.join("annotations.jsonl"), dir.join("manifest.json")];
    for sub in ["images", "refs", "masks"] {
        if let Ok(entries) = fs::read_dir(dir.join(sub)) {
            let mut files: Vec<PathBuf> = entries.flatten().map(|e| e.path()).collect();
            files.sort();
            paths.extend(files);
        }
    }
    paths
}
