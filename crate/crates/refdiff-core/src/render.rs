//! Synthetic scene rendering: glyph strings and logo marks composited onto
//! procedural backgrounds, together with the reference image, location mask,
//! and annotations that make up one training sample.
//!
//! Geometry convention: pixel boxes are integer half-open rectangles
//! `[x0, x1) x [y0, y1)` with the origin at the top-left. Rasterization
//! trims each label bitmap to its ink bounding box and then nearest-neighbor
//! upscales it to exactly fill its box, so the ink bounding box, the
//! annotation box, and the mask rectangle all coincide.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::auxiliary::Charset;
use crate::codec::Codec;
use crate::condition::{LatentBox, Region, RegionLabel, ReferenceCondition};
use crate::error::{CoreError, Result};
use crate::rng::child_seed;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::TrainSample;

/// The Latin training script.
pub const LATIN_CHARS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// A disjoint invented script used for the held-out-script experiment. The
/// code points are Greek letters but the glyph shapes are geometric patterns
/// of our own.
pub const INVENTED_CHARS: &str = "\u{3b1}\u{3b2}\u{3b3}\u{3b4}\u{3b5}\u{3b6}\u{3b7}\u{3b8}\u{3b9}\u{3ba}\u{3bb}\u{3bc}\u{3bd}\u{3be}\u{3bf}\u{3c0}\u{3c1}\u{3c3}\u{3c4}\u{3c5}";

/// Number of distinct logo marks in the registry.
pub const LOGO_COUNT: usize = 12;

/// Grayscale level of the empty reference canvas.
pub const REF_CANVAS: f64 = 0.5;

/// The caption word identifying a logo.
pub fn logo_name(id: usize) -> String {
    format!("brand{id}")
}

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// 5x7 bitmaps for the Latin capitals, row-major, bit 4 = leftmost column.
#[rustfmt::skip]
const LATIN_GLYPHS: [[u8; 7]; 26] = [
    [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // A
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E], // B
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E], // C
    [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E], // D
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F], // E
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10], // F
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F], // G
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // H
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E], // I
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C], // J
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // K
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F], // L
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11], // M
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11], // N
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // O
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10], // P
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D], // Q
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11], // R
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E], // S
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // T
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // U
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04], // V
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A], // W
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11], // X
    [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04], // Y
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F], // Z
];

/// Geometric bitmaps for the invented script, deliberately unlike any Latin
/// letter so the two scripts share no shapes.
#[rustfmt::skip]
const INVENTED_GLYPHS: [[u8; 7]; 20] = [
    [0x04, 0x0A, 0x11, 0x11, 0x11, 0x0A, 0x04], // diamond outline
    [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F], // box outline
    [0x15, 0x0A, 0x15, 0x0A, 0x15, 0x0A, 0x15], // checkerboard
    [0x04, 0x04, 0x0E, 0x0E, 0x1F, 0x1F, 0x1F], // solid triangle up
    [0x1F, 0x1F, 0x1F, 0x0E, 0x0E, 0x04, 0x04], // solid triangle down
    [0x11, 0x0A, 0x04, 0x0A, 0x11, 0x0A, 0x04], // stacked chevrons
    [0x1F, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x1F], // horizontal bars
    [0x15, 0x15, 0x15, 0x15, 0x15, 0x15, 0x15], // vertical bars
    [0x04, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x04], // plus
    [0x10, 0x08, 0x04, 0x02, 0x01, 0x02, 0x04], // zigzag right
    [0x01, 0x02, 0x04, 0x08, 0x10, 0x08, 0x04], // zigzag left
    [0x1B, 0x1B, 0x00, 0x1B, 0x1B, 0x00, 0x1B], // dot grid
    [0x11, 0x1B, 0x0E, 0x04, 0x0E, 0x1B, 0x11], // hourglass cross
    [0x0E, 0x11, 0x04, 0x0A, 0x04, 0x11, 0x0E], // eye
    [0x1F, 0x10, 0x1F, 0x01, 0x1F, 0x10, 0x1F], // meander
    [0x0A, 0x0A, 0x1F, 0x0A, 0x1F, 0x0A, 0x0A], // hash
    [0x04, 0x0E, 0x1F, 0x0E, 0x04, 0x00, 0x1F], // diamond over bar
    [0x1F, 0x00, 0x04, 0x0E, 0x04, 0x00, 0x1F], // framed plus
    [0x1B, 0x11, 0x00, 0x11, 0x00, 0x11, 0x1B], // corner dots
    [0x0E, 0x0A, 0x0E, 0x04, 0x0E, 0x0A, 0x0E], // stacked boxes
];

/// 7x7 logo marks, bit 6 = leftmost column.
#[rustfmt::skip]
const LOGO_MARKS: [[u8; 7]; LOGO_COUNT] = [
    [0x7F, 0x7F, 0x7F, 0x7F, 0x7F, 0x7F, 0x7F], // filled square
    [0x7F, 0x41, 0x41, 0x41, 0x41, 0x41, 0x7F], // hollow square
    [0x41, 0x22, 0x14, 0x08, 0x14, 0x22, 0x41], // saltire
    [0x08, 0x08, 0x08, 0x7F, 0x08, 0x08, 0x08], // plus
    [0x08, 0x14, 0x22, 0x41, 0x22, 0x14, 0x08], // diamond
    [0x1C, 0x3E, 0x7F, 0x7F, 0x7F, 0x3E, 0x1C], // disc
    [0x08, 0x1C, 0x1C, 0x3E, 0x3E, 0x7F, 0x7F], // triangle up
    [0x7F, 0x7F, 0x3E, 0x3E, 0x1C, 0x1C, 0x08], // triangle down
    [0x7F, 0x00, 0x7F, 0x00, 0x7F, 0x00, 0x7F], // horizontal bars
    [0x55, 0x55, 0x55, 0x55, 0x55, 0x55, 0x55], // vertical bars
    [0x55, 0x2A, 0x55, 0x2A, 0x55, 0x2A, 0x55], // checkerboard
    [0x40, 0x40, 0x40, 0x40, 0x40, 0x40, 0x7F], // corner
];

/// Saturated fill colors, one per logo id.
#[rustfmt::skip]
const LOGO_COLORS: [[f64; 3]; LOGO_COUNT] = [
    [1.0, 0.0, 0.0], [0.0, 0.8, 0.0], [0.0, 0.0, 1.0], [1.0, 0.8, 0.0],
    [1.0, 0.0, 1.0], [0.0, 0.8, 0.8], [1.0, 0.5, 0.0], [0.5, 0.0, 1.0],
    [0.0, 0.4, 0.0], [0.6, 0.3, 0.0], [1.0, 0.4, 0.7], [0.0, 0.3, 0.6],
];

/// One renderable character shape.
#[derive(Debug, Clone, Copy)]
pub struct Glyph {
    rows: [u8; 7],
    width: usize,
}

impl Glyph {
    fn ink(&self, x: usize, y: usize) -> bool {
        (self.rows[y] >> (self.width - 1 - x)) & 1 == 1
    }
}

/// Character-to-bitmap table for every renderable script.
#[derive(Debug, Clone)]
pub struct FontBook {
    glyphs: BTreeMap<char, Glyph>,
}

impl FontBook {
    /// The built-in table: Latin capitals plus the invented script.
    pub fn builtin() -> Self {
        let mut glyphs = BTreeMap::new();
        for (ch, rows) in LATIN_CHARS.chars().zip(LATIN_GLYPHS) {
            glyphs.insert(ch, Glyph { rows, width: GLYPH_W });
        }
        for (ch, rows) in INVENTED_CHARS.chars().zip(INVENTED_GLYPHS) {
            glyphs.insert(ch, Glyph { rows, width: GLYPH_W });
        }
        FontBook { glyphs }
    }

    pub fn glyph(&self, ch: char) -> Option<&Glyph> {
        self.glyphs.get(&ch)
    }

    pub fn has(&self, ch: char) -> bool {
        self.glyphs.contains_key(&ch)
    }
}

/// Integer half-open pixel rectangle, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn intersects(&self, other: &PixelBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > width || self.y1 > height {
            return Err(CoreError::InvalidConfig(format!(
                "box ({},{})..({},{}) invalid for {width}x{height} canvas",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }
}

/// One label placed at one box.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneItem {
    pub label: RegionLabel,
    pub bounds: PixelBox,
}

/// Procedural background parameters. All texture values stay inside
/// `[0.15, 0.85]` so saturated ink contrasts against any background.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BackgroundSpec {
    Flat { level: f64 },
    Checker { cell: usize, a: f64, b: f64 },
    Noise { cell: usize, salt: u64, lo: f64, hi: f64 },
}

/// A complete scene description; rendering it is deterministic apart from
/// the ink-color draws taken from the rng passed to [`render_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: BackgroundSpec,
    pub items: Vec<SceneItem>,
}

/// One rendered training sample in pixel space.
#[derive(Debug, Clone)]
pub struct AnnotatedSample<T> {
    /// RGB scene, `(3, h, w)`, values in `[0, 1]`.
    pub image: Tensor<T>,
    pub caption: String,
    pub regions: Vec<(PixelBox, RegionLabel)>,
    pub is_synthetic: bool,
    /// The same labels rendered on a gray canvas at the same positions.
    pub reference_image: Tensor<T>,
    /// `(h, w)` with ones exactly over the region boxes.
    pub mask: Tensor<T>,
}

fn lattice_value(salt: u64, gx: i64, gy: i64) -> f64 {
    let cell = (gx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (gy as u64).rotate_left(32);
    let bits = child_seed(salt, cell);
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Paint the background texture into a fresh RGB tensor.
pub fn paint_background<T: Scalar>(
    spec: &BackgroundSpec,
    width: usize,
    height: usize,
) -> Result<Tensor<T>> {
    let mut img = Tensor::zeros(&[3, height, width]);
    let set = |img: &mut Tensor<T>, x: usize, y: usize, v: f64| {
        for ch in 0..3 {
            img.data_mut()[ch * height * width + y * width + x] = T::from_f64(v);
        }
    };
    match spec {
        BackgroundSpec::Flat { level } => {
            if !(0.15..=0.85).contains(level) {
                return Err(CoreError::InvalidConfig(format!("flat level {level}")));
            }
            for y in 0..height {
                for x in 0..width {
                    set(&mut img, x, y, *level);
                }
            }
        }
        BackgroundSpec::Checker { cell, a, b } => {
            if *cell == 0 {
                return Err(CoreError::InvalidConfig("zero checker cell".into()));
            }
            for v in [a, b] {
                if !(0.15..=0.85).contains(v) {
                    return Err(CoreError::InvalidConfig(format!("checker level {v}")));
                }
            }
            for y in 0..height {
                for x in 0..width {
                    let par = (x / cell + y / cell) % 2;
                    set(&mut img, x, y, if par == 0 { *a } else { *b });
                }
            }
        }
        BackgroundSpec::Noise { cell, salt, lo, hi } => {
            if *cell == 0 || lo >= hi || *lo < 0.15 || *hi > 0.85 {
                return Err(CoreError::InvalidConfig(format!(
                    "noise params cell {cell}, range [{lo},{hi}]"
                )));
            }
            // Value noise: bilinear blend of hashed lattice corners.
            for y in 0..height {
                for x in 0..width {
                    let fx = x as f64 / *cell as f64;
                    let fy = y as f64 / *cell as f64;
                    let (gx, gy) = (fx as i64, fy as i64);
                    let (tx, ty) = (fx - gx as f64, fy - gy as f64);
                    let v00 = lattice_value(*salt, gx, gy);
                    let v10 = lattice_value(*salt, gx + 1, gy);
                    let v01 = lattice_value(*salt, gx, gy + 1);
                    let v11 = lattice_value(*salt, gx + 1, gy + 1);
                    let top = v00 * (1.0 - tx) + v10 * tx;
                    let bot = v01 * (1.0 - tx) + v11 * tx;
                    let v = top * (1.0 - ty) + bot * ty;
                    set(&mut img, x, y, lo + v * (hi - lo));
                }
            }
        }
    }
    Ok(img)
}

/// Rasterize a label into a trimmed boolean bitmap `(ink, width, height)`.
/// Text labels stack glyphs left to right with a one-column gap.
pub fn rasterize_label(label: &RegionLabel, fonts: &FontBook) -> Result<(Vec<bool>, usize, usize)> {
    let (ink, w, h) = match label {
        RegionLabel::Text(word) => {
            if word.is_empty() {
                return Err(CoreError::InvalidConfig("empty transcript".into()));
            }
            let mut glyphs = Vec::new();
            for ch in word.chars() {
                let glyph = fonts.glyph(ch).ok_or_else(|| {
                    CoreError::InvalidConfig(format!("character {ch:?} not in any script"))
                })?;
                glyphs.push(*glyph);
            }
            let w = glyphs.len() * GLYPH_W + glyphs.len() - 1;
            let mut ink = vec![false; w * GLYPH_H];
            for (i, glyph) in glyphs.iter().enumerate() {
                let ox = i * (GLYPH_W + 1);
                for y in 0..GLYPH_H {
                    for x in 0..GLYPH_W {
                        if glyph.ink(x, y) {
                            ink[y * w + ox + x] = true;
                        }
                    }
                }
            }
            (ink, w, GLYPH_H)
        }
        RegionLabel::Logo(id) => {
            if *id >= LOGO_COUNT {
                return Err(CoreError::InvalidConfig(format!(
                    "logo id {id} outside registry of {LOGO_COUNT}"
                )));
            }
            let rows = LOGO_MARKS[*id];
            let mut ink = vec![false; 49];
            for (y, row) in rows.iter().enumerate() {
                for x in 0..7 {
                    ink[y * 7 + x] = (row >> (6 - x)) & 1 == 1;
                }
            }
            (ink, 7, 7)
        }
    };
    trim(ink, w, h)
}

fn trim(ink: Vec<bool>, w: usize, h: usize) -> Result<(Vec<bool>, usize, usize)> {
    let mut x_min = w;
    let mut x_max = 0;
    let mut y_min = h;
    let mut y_max = 0;
    for y in 0..h {
        for x in 0..w {
            if ink[y * w + x] {
                x_min = x_min.min(x);
                x_max = x_max.max(x);
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
        }
    }
    if x_min > x_max {
        return Err(CoreError::InvalidConfig("label rasterized to nothing".into()));
    }
    let (tw, th) = (x_max - x_min + 1, y_max - y_min + 1);
    let mut out = vec![false; tw * th];
    for y in 0..th {
        for x in 0..tw {
            out[y * tw + x] = ink[(y + y_min) * w + (x + x_min)];
        }
    }
    Ok((out, tw, th))
}

/// Caption template covering text and logo items.
pub fn caption_for(items: &[SceneItem]) -> String {
    let mut caption = String::from("a sign");
    let texts: Vec<&String> = items
        .iter()
        .filter_map(|i| match &i.label {
            RegionLabel::Text(t) => Some(t),
            RegionLabel::Logo(_) => None,
        })
        .collect();
    let logos: Vec<usize> = items
        .iter()
        .filter_map(|i| match &i.label {
            RegionLabel::Logo(id) => Some(*id),
            RegionLabel::Text(_) => None,
        })
        .collect();
    for (i, t) in texts.iter().enumerate() {
        if i == 0 {
            caption.push_str(&format!(" that says '{t}'"));
        } else {
            caption.push_str(&format!(" and '{t}'"));
        }
    }
    for (i, id) in logos.iter().enumerate() {
        let name = logo_name(*id);
        if i == 0 {
            caption.push_str(&format!(" with the {name} logo"));
        } else {
            caption.push_str(&format!(" and the {name} logo"));
        }
    }
    caption
}

/// Render a scene into a training sample.
///
/// The rng is consumed once per text item (ink polarity); everything else is
/// a pure function of the spec. Boxes must be in-bounds, pairwise disjoint,
/// and at least as large as their label's trimmed raster so that upscaling
/// covers every source cell.
pub fn render_sample<T: Scalar>(
    spec: &SceneSpec,
    fonts: &FontBook,
    rng: &mut ChaCha8Rng,
) -> Result<AnnotatedSample<T>> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 {
        return Err(CoreError::InvalidConfig("empty canvas".into()));
    }
    for (i, item) in spec.items.iter().enumerate() {
        item.bounds.validate(w, h)?;
        for other in &spec.items[i + 1..] {
            if item.bounds.intersects(&other.bounds) {
                return Err(CoreError::InvalidConfig(format!(
                    "overlapping item boxes {:?} and {:?}",
                    item.bounds, other.bounds
                )));
            }
        }
    }

    let mut image = paint_background::<T>(&spec.background, w, h)?;
    let mut reference = Tensor::full(&[3, h, w], T::from_f64(REF_CANVAS));
    let mut mask = Tensor::zeros(&[h, w]);
    let mut regions = Vec::new();

    for item in &spec.items {
        let (ink, sw, sh) = rasterize_label(&item.label, fonts)?;
        let b = &item.bounds;
        if b.width() < sw || b.height() < sh {
            return Err(CoreError::InvalidConfig(format!(
                "box {}x{} smaller than label raster {sw}x{sh}",
                b.width(),
                b.height()
            )));
        }
        let color = match &item.label {
            RegionLabel::Text(_) => {
                if rng.gen_bool(0.5) {
                    [0.0; 3]
                } else {
                    [1.0; 3]
                }
            }
            RegionLabel::Logo(id) => LOGO_COLORS[*id],
        };
        for ty in 0..b.height() {
            let sy = ty * sh / b.height();
            for tx in 0..b.width() {
                let sx = tx * sw / b.width();
                let (px, py) = (b.x0 + tx, b.y0 + ty);
                mask.data_mut()[py * w + px] = T::one();
                if ink[sy * sw + sx] {
                    for ch in 0..3 {
                        let at = ch * h * w + py * w + px;
                        image.data_mut()[at] = T::from_f64(color[ch]);
                        reference.data_mut()[at] = T::from_f64(color[ch]);
                    }
                }
            }
        }
        regions.push((item.bounds, item.label.clone()));
    }

    Ok(AnnotatedSample {
        image,
        caption: caption_for(&spec.items),
        regions,
        is_synthetic: true,
        reference_image: reference,
        mask,
    })
}

/// Glyph pools for scene sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Script {
    Latin,
    Invented,
}

impl Script {
    pub fn chars(&self) -> &'static str {
        match self {
            Script::Latin => LATIN_CHARS,
            Script::Invented => INVENTED_CHARS,
        }
    }
}

/// Random-scene distribution: axis-aligned boxes with uniform size jitter.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_items: usize,
    pub max_items: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    /// Uniform target glyph height range; box width follows the raster's
    /// aspect ratio.
    pub min_glyph_h: usize,
    pub max_glyph_h: usize,
    pub scripts: Vec<Script>,
    /// Probability that an item is a logo instead of a word.
    pub logo_share: f64,
    pub n_logos: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 32,
            height: 32,
            min_items: 1,
            max_items: 1,
            min_word_len: 1,
            max_word_len: 3,
            min_glyph_h: 8,
            max_glyph_h: 14,
            scripts: vec![Script::Latin],
            logo_share: 0.0,
            n_logos: LOGO_COUNT,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(CoreError::InvalidConfig("canvas below 16x16".into()));
        }
        if self.min_items > self.max_items
            || self.min_word_len > self.max_word_len
            || self.min_word_len == 0
            || self.min_glyph_h > self.max_glyph_h
        {
            return Err(CoreError::InvalidConfig("inverted sampling range".into()));
        }
        if self.min_glyph_h < GLYPH_H {
            return Err(CoreError::InvalidConfig(format!(
                "glyph height below font height {GLYPH_H}"
            )));
        }
        if self.max_glyph_h + 2 > self.height {
            return Err(CoreError::InvalidConfig("glyph height exceeds canvas".into()));
        }
        if !(0.0..=1.0).contains(&self.logo_share) {
            return Err(CoreError::InvalidConfig("logo_share outside [0,1]".into()));
        }
        if self.scripts.is_empty() && self.logo_share < 1.0 {
            return Err(CoreError::InvalidConfig("no scripts and words requested".into()));
        }
        if self.n_logos == 0 || self.n_logos > LOGO_COUNT {
            return Err(CoreError::InvalidConfig(format!(
                "n_logos must be in 1..={LOGO_COUNT}"
            )));
        }
        Ok(())
    }

    /// Recognition charset covering this config's scripts, in registry order
    /// (Latin first, then invented).
    pub fn charset(&self) -> Result<Charset> {
        charset_for(&self.scripts)
    }
}

/// Build a recognition charset for a set of scripts in fixed registry order.
pub fn charset_for(scripts: &[Script]) -> Result<Charset> {
    let mut chars = String::new();
    for script in [Script::Latin, Script::Invented] {
        if scripts.contains(&script) {
            chars.push_str(script.chars());
        }
    }
    Charset::new(chars.chars())
}

/// Draw a random scene. Draw order per sample: background kind and params,
/// item count, then per item: logo-vs-word, content, glyph height, and up to
/// twenty placement attempts. Items that cannot be placed without overlap
/// are dropped.
pub fn sample_scene(cfg: &SynthConfig, fonts: &FontBook, rng: &mut ChaCha8Rng) -> Result<SceneSpec> {
    cfg.validate()?;
    let background = match rng.gen_range(0..3u32) {
        0 => BackgroundSpec::Flat {
            level: rng.gen_range(0.2..=0.8),
        },
        1 => BackgroundSpec::Checker {
            cell: rng.gen_range(3..=8),
            a: rng.gen_range(0.2..=0.8),
            b: rng.gen_range(0.2..=0.8),
        },
        _ => BackgroundSpec::Noise {
            cell: rng.gen_range(6..=10),
            salt: rng.gen(),
            lo: 0.2,
            hi: 0.8,
        },
    };
    let n_items = rng.gen_range(cfg.min_items..=cfg.max_items);
    let mut items: Vec<SceneItem> = Vec::new();
    for _ in 0..n_items {
        let label = if rng.gen_bool(cfg.logo_share) {
            RegionLabel::Logo(rng.gen_range(0..cfg.n_logos))
        } else {
            let script = cfg.scripts[rng.gen_range(0..cfg.scripts.len())];
            let pool: Vec<char> = script.chars().chars().collect();
            let len = rng.gen_range(cfg.min_word_len..=cfg.max_word_len);
            let word: String = (0..len).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            RegionLabel::Text(word)
        };
        let (_, sw, sh) = rasterize_label(&label, fonts)?;
        let bh_max = cfg.max_glyph_h.min(cfg.height.saturating_sub(2)).max(sh);
        let bh_min = cfg.min_glyph_h.max(sh).min(bh_max);
        let bh = rng.gen_range(bh_min..=bh_max);
        let bw = (bh * sw + sh / 2) / sh;
        let bw = bw.clamp(sw, cfg.width.saturating_sub(2));
        if bw < sw || bh < sh || bw + 2 > cfg.width || bh + 2 > cfg.height {
            continue; // word too wide for the canvas at any allowed height
        }
        let mut placed = false;
        for _ in 0..20 {
            let x0 = rng.gen_range(1..=cfg.width - 1 - bw);
            let y0 = rng.gen_range(1..=cfg.height - 1 - bh);
            let bounds = PixelBox {
                x0,
                y0,
                x1: x0 + bw,
                y1: y0 + bh,
            };
            if items.iter().all(|it| !it.bounds.intersects(&bounds)) {
                items.push(SceneItem { label: label.clone(), bounds });
                placed = true;
                break;
            }
        }
        let _ = placed;
    }
    Ok(SceneSpec {
        width: cfg.width,
        height: cfg.height,
        background,
        items,
    })
}

/// Scene plus sample for dataset index `index`: each sample owns a child
/// seed of the master seed, so generation order and worker count are
/// irrelevant.
pub fn generate_sample<T: Scalar>(
    cfg: &SynthConfig,
    fonts: &FontBook,
    master_seed: u64,
    index: u64,
) -> Result<(SceneSpec, AnnotatedSample<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(master_seed, index));
    let spec = sample_scene(cfg, fonts, &mut rng)?;
    let sample = render_sample(&spec, fonts, &mut rng)?;
    Ok((spec, sample))
}

/// Encode a pixel sample into the latent-space tuple the trainer consumes.
pub fn to_train_sample<T: Scalar>(
    sample: &AnnotatedSample<T>,
    codec: &Codec<T>,
) -> Result<TrainSample<T>> {
    let spec = codec.spec();
    let z0 = codec.encode(&sample.image)?;
    let s = codec.encode(&sample.reference_image)?;
    let m = crate::condition::downsample_mask(&sample.mask, &spec)?;
    let scale = spec.scale as f64;
    let regions = sample
        .regions
        .iter()
        .map(|(b, label)| Region {
            bounds: LatentBox {
                x0: b.x0 as f64 / scale,
                y0: b.y0 as f64 / scale,
                x1: b.x1 as f64 / scale,
                y1: b.y1 as f64 / scale,
            },
            label: label.clone(),
        })
        .collect();
    let reference = ReferenceCondition { s, m, regions };
    reference.validate(&spec)?;
    Ok(TrainSample {
        z0,
        caption: sample.caption.clone(),
        reference,
        is_synthetic: sample.is_synthetic,
    })
}
