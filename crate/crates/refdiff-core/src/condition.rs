//! Reference conditioning: mask handling, input composition, and condition
//! dropout.
//!
//! The denoiser sees `x = [z_t | s | m]`, a `(2c+1, h, w)` stack of the noisy
//! latent, the encoded reference rendering, and a binary location mask. The
//! inpainting variant appends the encoded masked source image for a
//! `(3c+1, h, w)` stack `[z_t | s | m | z_masked]`. The `s` and `m` channels
//! are constant across all timesteps of one sample and never receive noise;
//! an absent reference is represented by all-zero `s` and `m` channels.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::LatentSpec;
use crate::error::{CoreError, Result};
use crate::tensor::{concat_channels, Scalar, Tensor};

/// Axis-aligned box in continuous latent coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatentBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl LatentBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 > self.x0 && self.y1 > self.y0)
    }

    /// Closed-interval containment of a point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// What a region depicts: a word transcript or a logo registry id.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RegionLabel {
    Text(String),
    Logo(usize),
}

/// One annotated region in latent space.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Region {
    pub bounds: LatentBox,
    pub label: RegionLabel,
}

/// Encoded reference rendering plus its location mask and region metadata.
#[derive(Debug, Clone)]
pub struct ReferenceCondition<T> {
    /// Encoded reference image, `(c, h, w)`.
    pub s: Tensor<T>,
    /// Binary mask, `(h, w)`, values in {0, 1}.
    pub m: Tensor<T>,
    /// Labeled boxes; every positive mask pixel lies inside some box.
    pub regions: Vec<Region>,
}

impl<T: Scalar> ReferenceCondition<T> {
    /// Check all structural invariants against a latent spec.
    pub fn validate(&self, spec: &LatentSpec) -> Result<()> {
        if self.s.shape() != [spec.c, spec.h, spec.w] {
            return Err(CoreError::ShapeMismatch(format!(
                "reference latent {:?} vs spec ({},{},{})",
                self.s.shape(),
                spec.c,
                spec.h,
                spec.w
            )));
        }
        if self.m.shape() != [spec.h, spec.w] {
            return Err(CoreError::ShapeMismatch(format!(
                "mask {:?} vs latent ({},{})",
                self.m.shape(),
                spec.h,
                spec.w
            )));
        }
        if !self.m.data().iter().all(|&v| v == T::zero() || v == T::one()) {
            return Err(CoreError::InvalidConfig("mask is not binary".into()));
        }
        for region in &self.regions {
            let b = &region.bounds;
            if b.is_degenerate()
                || b.x0 < 0.0
                || b.y0 < 0.0
                || b.x1 > spec.w as f64
                || b.y1 > spec.h as f64
            {
                return Err(CoreError::InvalidConfig(format!(
                    "region box {b:?} outside latent {}x{}",
                    spec.h, spec.w
                )));
            }
        }
        for y in 0..spec.h {
            for x in 0..spec.w {
                if self.m.data()[y * spec.w + x] == T::one() {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if !self.regions.iter().any(|r| r.bounds.contains(cx, cy)) {
                        return Err(CoreError::InvalidConfig(format!(
                            "mask pixel ({x},{y}) not covered by any region"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Downsample a pixel-space binary mask to latent resolution: a latent cell
/// is positive iff at least half of the pixels it covers are positive.
pub fn downsample_mask<T: Scalar>(mask_px: &Tensor<T>, spec: &LatentSpec) -> Result<Tensor<T>> {
    let [ph, pw] = mask_px.shape() else {
        return Err(CoreError::ShapeMismatch(format!(
            "pixel mask must be (H,W), got {:?}",
            mask_px.shape()
        )));
    };
    let (ph, pw) = (*ph, *pw);
    let s = spec.scale;
    if ph != spec.h * s || pw != spec.w * s {
        return Err(CoreError::ShapeMismatch(format!(
            "pixel mask ({ph},{pw}) vs latent ({},{}) at scale {s}",
            spec.h, spec.w
        )));
    }
    if !mask_px.data().iter().all(|&v| v == T::zero() || v == T::one()) {
        return Err(CoreError::InvalidConfig("pixel mask is not binary".into()));
    }
    let half = (s * s).div_ceil(2);
    let mut out = Tensor::zeros(&[spec.h, spec.w]);
    for y in 0..spec.h {
        for x in 0..spec.w {
            let mut count = 0;
            for dy in 0..s {
                for dx in 0..s {
                    if mask_px.data()[(y * s + dy) * pw + (x * s + dx)] == T::one() {
                        count += 1;
                    }
                }
            }
            if count >= half {
                out.data_mut()[y * spec.w + x] = T::one();
            }
        }
    }
    Ok(out)
}

fn check_latent<T: Scalar>(zt: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match zt.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(CoreError::ShapeMismatch(format!(
            "latent must be (c,h,w), got {other:?}"
        ))),
    }
}

/// `[z_t | s | m]`, shape `(2c+1, h, w)`. `None` reference contributes
/// all-zero `s` and `m` channels.
pub fn compose_input<T: Scalar>(
    zt: &Tensor<T>,
    reference: Option<&ReferenceCondition<T>>,
) -> Result<Tensor<T>> {
    let (c, h, w) = check_latent(zt)?;
    match reference {
        Some(r) => {
            if r.s.shape() != [c, h, w] {
                return Err(CoreError::ShapeMismatch(format!(
                    "reference latent {:?} vs z_t {:?}",
                    r.s.shape(),
                    zt.shape()
                )));
            }
            if r.m.shape() != [h, w] {
                return Err(CoreError::ShapeMismatch(format!(
                    "mask {:?} vs latent ({h},{w})",
                    r.m.shape()
                )));
            }
            let m = r.m.reshape(&[1, h, w])?;
            concat_channels(&[zt, &r.s, &m])
        }
        None => {
            let zeros_s = Tensor::zeros(&[c, h, w]);
            let zeros_m = Tensor::zeros(&[1, h, w]);
            concat_channels(&[zt, &zeros_s, &zeros_m])
        }
    }
}

/// `[z_t | s | m | z_masked]`, shape `(3c+1, h, w)`, for the inpainting
/// variant. `z_masked` is the encoded source image with masked regions
/// blanked; it carries no injected noise.
pub fn compose_inpaint_input<T: Scalar>(
    zt: &Tensor<T>,
    reference: Option<&ReferenceCondition<T>>,
    z_masked: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_latent(zt)?;
    if z_masked.shape() != zt.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "z_masked {:?} vs z_t {:?}",
            z_masked.shape(),
            zt.shape()
        )));
    }
    let base = compose_input(zt, reference)?;
    concat_channels(&[&base, z_masked])
}

/// Which conditions to drop for one training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutDecision {
    pub drop_text: bool,
    pub drop_ref: bool,
}

/// Independently drop the text and reference conditions, each with
/// probability `p`. Two uniform draws per call, always, so the rng stream
/// stays aligned regardless of outcome.
pub fn sample_condition_dropout(p: f64, rng: &mut ChaCha8Rng) -> DropoutDecision {
    let t: f64 = rng.gen();
    let r: f64 = rng.gen();
    DropoutDecision {
        drop_text: t < p,
        drop_ref: r < p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spec() -> LatentSpec {
        LatentSpec {
            c: 2,
            h: 8,
            w: 8,
            scale: 4,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn reference(spec: &LatentSpec) -> ReferenceCondition<f32> {
        let mut m = Tensor::zeros(&[spec.h, spec.w]);
        for y in 2..4 {
            for x in 1..5 {
                m.data_mut()[y * spec.w + x] = 1.0;
            }
        }
        ReferenceCondition {
            s: Tensor::randn(&[spec.c, spec.h, spec.w], &mut rng(1)),
            m,
            regions: alloc::vec![Region {
                bounds: LatentBox {
                    x0: 1.0,
                    y0: 2.0,
                    x1: 5.0,
                    y1: 4.0,
                },
                label: RegionLabel::Text(String::from("hi")),
            }],
        }
    }

    #[test]
    fn compose_stacks_channels_in_fixed_order() {
        let sp = spec();
        let zt = Tensor::<f32>::randn(&[sp.c, sp.h, sp.w], &mut rng(2));
        let r = reference(&sp);
        let x = compose_input(&zt, Some(&r)).unwrap();
        assert_eq!(x.shape(), &[2 * sp.c + 1, sp.h, sp.w]);
        // Channel-slice recovery: the first c channels are z_t bit-exactly.
        let zt_back = crate::tensor::slice_channels(&x, 0, sp.c).unwrap();
        assert_eq!(zt_back, zt);
        let s_back = crate::tensor::slice_channels(&x, sp.c, 2 * sp.c).unwrap();
        assert_eq!(s_back, r.s);
        let m_back = crate::tensor::slice_channels(&x, 2 * sp.c, 2 * sp.c + 1).unwrap();
        assert_eq!(m_back.data(), r.m.data());
    }

    #[test]
    fn empty_reference_contributes_zero_channels() {
        let sp = spec();
        let zt = Tensor::<f32>::randn(&[sp.c, sp.h, sp.w], &mut rng(3));
        let x = compose_input(&zt, None).unwrap();
        assert_eq!(x.shape(), &[5, 8, 8]);
        let tail = crate::tensor::slice_channels(&x, sp.c, 2 * sp.c + 1).unwrap();
        assert!(tail.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_is_deterministic() {
        let sp = spec();
        let zt = Tensor::<f32>::randn(&[sp.c, sp.h, sp.w], &mut rng(4));
        let r = reference(&sp);
        assert_eq!(
            compose_input(&zt, Some(&r)).unwrap(),
            compose_input(&zt, Some(&r)).unwrap()
        );
    }

    #[test]
    fn desk_scale_channel_count_is_97() {
        let sp = LatentSpec::default();
        let zt = Tensor::<f32>::zeros(&[sp.c, sp.h, sp.w]);
        let x = compose_input(&zt, None).unwrap();
        assert_eq!(x.shape(), &[97, 8, 8]);
    }

    #[test]
    fn inpaint_compose_appends_masked_latent() {
        let sp = spec();
        let zt = Tensor::<f32>::randn(&[sp.c, sp.h, sp.w], &mut rng(5));
        let zm = Tensor::<f32>::randn(&[sp.c, sp.h, sp.w], &mut rng(6));
        let r = reference(&sp);
        let x = compose_inpaint_input(&zt, Some(&r), &zm).unwrap();
        assert_eq!(x.shape(), &[3 * sp.c + 1, sp.h, sp.w]);
        let zm_back = crate::tensor::slice_channels(&x, 2 * sp.c + 1, 3 * sp.c + 1).unwrap();
        assert_eq!(zm_back, zm);
    }

    #[test]
    fn compose_rejects_mismatched_shapes() {
        let sp = spec();
        let zt = Tensor::<f32>::zeros(&[sp.c, sp.h, sp.w]);
        let mut r = reference(&sp);
        r.s = Tensor::zeros(&[sp.c, sp.h, sp.w + 1]);
        assert!(compose_input(&zt, Some(&r)).is_err());
    }

    #[test]
    fn validate_accepts_consistent_reference_and_rejects_gaps() {
        let sp = spec();
        let r = reference(&sp);
        r.validate(&sp).unwrap();

        // A positive mask pixel outside every region box must fail.
        let mut bad = reference(&sp);
        bad.m.data_mut()[7 * sp.w + 7] = 1.0;
        assert!(bad.validate(&sp).is_err());

        // Non-binary masks must fail.
        let mut nonbin = reference(&sp);
        nonbin.m.data_mut()[0] = 0.5;
        assert!(nonbin.validate(&sp).is_err());

        // Out-of-bounds region must fail.
        let mut oob = reference(&sp);
        oob.regions[0].bounds.x1 = sp.w as f64 + 1.0;
        assert!(oob.validate(&sp).is_err());
    }

    #[test]
    fn mask_downsample_all_ones_and_all_zeros() {
        let sp = spec();
        let ones = Tensor::<f32>::full(&[32, 32], 1.0);
        let down = downsample_mask(&ones, &sp).unwrap();
        assert!(down.data().iter().all(|&v| v == 1.0));
        let zeros = Tensor::<f32>::zeros(&[32, 32]);
        let down = downsample_mask(&zeros, &sp).unwrap();
        assert!(down.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_downsample_majority_rule_matches_pixel_count_oracle() {
        let sp = LatentSpec {
            c: 12,
            h: 2,
            w: 2,
            scale: 4,
        };
        // One fully positive 4x4 quadrant: exactly one positive latent cell.
        let mut px = Tensor::<f32>::zeros(&[8, 8]);
        for y in 0..4 {
            for x in 4..8 {
                px.data_mut()[y * 8 + x] = 1.0;
            }
        }
        let down = downsample_mask(&px, &sp).unwrap();
        assert_eq!(down.data(), &[0.0, 1.0, 0.0, 0.0]);

        // 8 of 16 pixels positive (exactly half) counts as covered; 7 does not.
        let mut half = Tensor::<f32>::zeros(&[8, 8]);
        for i in 0..8 {
            half.data_mut()[(i / 4) * 8 + (i % 4)] = 1.0;
        }
        assert_eq!(downsample_mask(&half, &sp).unwrap().data()[0], 1.0);
        let mut seven = half.clone();
        seven.data_mut()[8 + 3] = 0.0;
        assert_eq!(downsample_mask(&seven, &sp).unwrap().data()[0], 0.0);
    }

    #[test]
    fn mask_downsample_rejects_non_binary() {
        let sp = spec();
        let mut px = Tensor::<f32>::zeros(&[32, 32]);
        px.data_mut()[5] = 0.25;
        assert!(downsample_mask(&px, &sp).is_err());
    }

    #[test]
    fn dropout_extremes_are_deterministic() {
        let mut r = rng(7);
        for _ in 0..100 {
            let d = sample_condition_dropout(0.0, &mut r);
            assert!(!d.drop_text && !d.drop_ref);
        }
        for _ in 0..100 {
            let d = sample_condition_dropout(1.0, &mut r);
            assert!(d.drop_text && d.drop_ref);
        }
    }

    #[test]
    fn dropout_rate_is_close_to_p_and_independent() {
        let mut r = rng(7);
        let n = 10_000;
        let (mut text, mut refr, mut both) = (0, 0, 0);
        for _ in 0..n {
            let d = sample_condition_dropout(0.1, &mut r);
            if d.drop_text {
                text += 1;
            }
            if d.drop_ref {
                refr += 1;
            }
            if d.drop_text && d.drop_ref {
                both += 1;
            }
        }
        let tp = text as f64 / n as f64;
        let rp = refr as f64 / n as f64;
        assert!((0.09..=0.11).contains(&tp), "text drop rate {tp}");
        assert!((0.09..=0.11).contains(&rp), "ref drop rate {rp}");
        // Joint rate near p² confirms the draws are independent.
        let joint = both as f64 / n as f64;
        assert!((0.005..=0.016).contains(&joint), "joint rate {joint}");
    }
}
