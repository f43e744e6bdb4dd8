//! Pixel/latent codec.
//!
//! The default codec is a space-to-depth patchify: a `(3, s·h, s·w)` image
//! becomes a `(3·s², h, w)` latent by moving each `s x s` patch into
//! channels, then multiplying by a fixed per-channel gain (offset is zero, so
//! the zero image maps to the zero latent). It is exactly invertible, which
//! gives every latent-space computation a pixel-space oracle.
//!
//! A learned [`TinyAutoencoder`] can replace it behind the same interface,
//! but only after passing the PSNR gate in [`TinyAutoencoder::validated`]:
//! reconstruction quality of at least 25 dB on a held-out set. Reference
//! images and masked images always go through the same codec instance as
//! training images.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Geometry of the latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatentSpec {
    /// Latent channels.
    pub c: usize,
    /// Latent height.
    pub h: usize,
    /// Latent width.
    pub w: usize,
    /// Pixel-to-latent spatial ratio.
    pub scale: usize,
}

impl LatentSpec {
    /// Pixel dimensions `(channels, height, width)` this spec corresponds to.
    pub fn pixel_shape(&self) -> (usize, usize, usize) {
        (PIXEL_CHANNELS, self.h * self.scale, self.w * self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.h == 0 || self.w == 0 || self.scale == 0 {
            return Err(CoreError::InvalidConfig(format!("degenerate latent spec {self:?}")));
        }
        if self.c * self.scale * self.scale < PIXEL_CHANNELS {
            return Err(CoreError::InvalidConfig(format!(
                "latent spec {self:?} cannot carry {PIXEL_CHANNELS} pixel channels"
            )));
        }
        Ok(())
    }
}

impl Default for LatentSpec {
    fn default() -> Self {
        LatentSpec {
            c: 48,
            h: 8,
            w: 8,
            scale: 4,
        }
    }
}

/// All images in this crate are RGB.
pub const PIXEL_CHANNELS: usize = 3;

/// Exactly invertible patchify codec.
#[derive(Debug, Clone)]
pub struct PatchifyCodec<T> {
    spec: LatentSpec,
    /// Per-latent-channel gain; uniform by default.
    gains: Vec<T>,
}

impl<T: Scalar> PatchifyCodec<T> {
    pub fn new(spec: LatentSpec, gain: f64) -> Result<Self> {
        spec.validate()?;
        if spec.c != PIXEL_CHANNELS * spec.scale * spec.scale {
            return Err(CoreError::InvalidConfig(format!(
                "patchify needs c = 3·scale² = {}, got {}",
                PIXEL_CHANNELS * spec.scale * spec.scale,
                spec.c
            )));
        }
        if gain == 0.0 {
            return Err(CoreError::InvalidConfig("zero gain is not invertible".into()));
        }
        Ok(PatchifyCodec {
            spec,
            gains: (0..spec.c).map(|_| T::from_f64(gain)).collect(),
        })
    }

    pub fn spec(&self) -> LatentSpec {
        self.spec
    }

    pub fn gains(&self) -> &[T] {
        &self.gains
    }

    /// `(3, s·h, s·w)` pixels, values nominally in `[0,1]`, to latent.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (pc, ph, pw) = self.spec.pixel_shape();
        if image.shape() != [pc, ph, pw] {
            return Err(CoreError::ShapeMismatch(format!(
                "encode expects ({pc},{ph},{pw}), got {:?}",
                image.shape()
            )));
        }
        let s = self.spec.scale;
        let (c, h, w) = (self.spec.c, self.spec.h, self.spec.w);
        let mut z = Tensor::zeros(&[c, h, w]);
        let src = image.data();
        let dst = z.data_mut();
        for ci in 0..pc {
            for py in 0..s {
                for px in 0..s {
                    let lc = (ci * s + py) * s + px;
                    let gain = self.gains[lc];
                    for y in 0..h {
                        for x in 0..w {
                            dst[lc * h * w + y * w + x] =
                                src[ci * ph * pw + (y * s + py) * pw + (x * s + px)] * gain;
                        }
                    }
                }
            }
        }
        Ok(z)
    }

    /// Exact inverse of [`PatchifyCodec::encode`].
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = (self.spec.c, self.spec.h, self.spec.w);
        if z.shape() != [c, h, w] {
            return Err(CoreError::ShapeMismatch(format!(
                "decode expects ({c},{h},{w}), got {:?}",
                z.shape()
            )));
        }
        let s = self.spec.scale;
        let (pc, ph, pw) = self.spec.pixel_shape();
        let mut image = Tensor::zeros(&[pc, ph, pw]);
        let src = z.data();
        let dst = image.data_mut();
        for ci in 0..pc {
            for py in 0..s {
                for px in 0..s {
                    let lc = (ci * s + py) * s + px;
                    let inv = self.gains[lc].recip();
                    for y in 0..h {
                        for x in 0..w {
                            dst[ci * ph * pw + (y * s + py) * pw + (x * s + px)] =
                                src[lc * h * w + y * w + x] * inv;
                        }
                    }
                }
            }
        }
        Ok(image)
    }
}

/// Peak signal-to-noise ratio in dB between images in `[0,1]`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let mse = a.sub(b)?.map(|v| v * v).mean().to_f64();
    if mse <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

// ---- optional learned codec ----

/// Minimum reconstruction quality before a learned codec may replace the
/// patchify codec in training runs.
pub const LEARNED_CODEC_MIN_PSNR: f64 = 25.0;

/// Two stride-2 conv blocks down, two upsample+conv blocks back up.
///
/// Only supports `scale = 4`. Must pass [`TinyAutoencoder::validated`]
/// before use.
#[derive(Debug, Clone)]
pub struct TinyAutoencoder<T> {
    spec: LatentSpec,
    params: alloc::collections::BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> TinyAutoencoder<T> {
    pub fn new(spec: LatentSpec, hidden: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.scale != 4 {
            return Err(CoreError::InvalidConfig(
                "tiny autoencoder is hard-wired to scale 4 (two stride-2 stages)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = alloc::collections::BTreeMap::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng| {
            let fan_in = (cin * k * k) as f64;
            let std = (2.0 / fan_in).sqrt();
            params.insert(
                format!("{name}.w"),
                Tensor::randn(&[cout, cin * k * k], rng).scale(T::from_f64(std)),
            );
            params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        };
        conv("enc0", hidden, PIXEL_CHANNELS, 3, &mut rng);
        conv("enc1", spec.c, hidden, 3, &mut rng);
        conv("dec0", hidden, spec.c, 3, &mut rng);
        conv("dec1", PIXEL_CHANNELS, hidden, 3, &mut rng);
        Ok(TinyAutoencoder { spec, params })
    }

    pub fn spec(&self) -> LatentSpec {
        self.spec
    }

    pub fn params(&self) -> &alloc::collections::BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut alloc::collections::BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    fn conv(
        &self,
        g: &mut Graph<T>,
        vars: &alloc::collections::BTreeMap<String, Var>,
        name: &str,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        g.conv2d(x, vars[&format!("{name}.w")], Some(vars[&format!("{name}.b")]), 3, stride, 1)
    }

    /// Build encode+decode on a graph; `train` decides whether parameters are
    /// trainable leaves or frozen inputs.
    fn build(
        &self,
        g: &mut Graph<T>,
        image: &Tensor<T>,
        train: bool,
    ) -> Result<(Var, Var, alloc::collections::BTreeMap<String, Var>)> {
        let mut vars = alloc::collections::BTreeMap::new();
        for (name, value) in &self.params {
            let v = if train {
                g.param(value.clone())
            } else {
                g.input(value.clone())
            };
            vars.insert(name.clone(), v);
        }
        let x = g.input(image.clone());
        let e0 = self.conv(g, &vars, "enc0", x, 2)?;
        let e0 = g.silu(e0)?;
        let z = self.conv(g, &vars, "enc1", e0, 2)?;
        let u0 = g.upsample_nearest2(z)?;
        let d0 = self.conv(g, &vars, "dec0", u0, 1)?;
        let d0 = g.silu(d0)?;
        let u1 = g.upsample_nearest2(d0)?;
        let y = self.conv(g, &vars, "dec1", u1, 1)?;
        Ok((z, y, vars))
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (z, _, _) = self.build(&mut g, image, false)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut vars = alloc::collections::BTreeMap::new();
        for (name, value) in &self.params {
            vars.insert(name.clone(), g.input(value.clone()));
        }
        let zv = g.input(z.clone());
        let u0 = g.upsample_nearest2(zv)?;
        let d0 = self.conv(&mut g, &vars, "dec0", u0, 1)?;
        let d0 = g.silu(d0)?;
        let u1 = g.upsample_nearest2(d0)?;
        let y = self.conv(&mut g, &vars, "dec1", u1, 1)?;
        Ok(g.value(y).clone())
    }

    /// One SGD step on the reconstruction MSE of a single image; returns the
    /// loss before the step.
    pub fn train_step(&mut self, image: &Tensor<T>, lr: T) -> Result<T> {
        let mut g = Graph::new();
        let (_, y, vars) = self.build(&mut g, image, true)?;
        let target = g.input(image.clone());
        let diff = g.sub(y, target)?;
        let sq = g.square(diff)?;
        let loss = g.mean_all(sq)?;
        g.backward(loss)?;
        for (name, var) in &vars {
            if let Some(grad) = g.grad(*var) {
                self.params
                    .get_mut(name)
                    .expect("param exists")
                    .axpy(-lr, grad)?;
            }
        }
        Ok(g.value(loss).data()[0])
    }

    /// Mean PSNR of reconstructions over a validation set.
    pub fn validation_psnr(&self, images: &[Tensor<T>]) -> Result<f64> {
        if images.is_empty() {
            return Err(CoreError::InvalidConfig("empty validation set".into()));
        }
        let mut total = 0.0;
        for img in images {
            let recon = self.decode(&self.encode(img)?)?;
            total += psnr(img, &recon)?;
        }
        Ok(total / images.len() as f64)
    }

    /// Gate for use as a training codec: errors unless validation PSNR
    /// reaches [`LEARNED_CODEC_MIN_PSNR`].
    pub fn validated(self, validation: &[Tensor<T>]) -> Result<Self> {
        let db = self.validation_psnr(validation)?;
        if db < LEARNED_CODEC_MIN_PSNR {
            return Err(CoreError::InvalidConfig(format!(
                "learned codec PSNR {db:.2} dB below required {LEARNED_CODEC_MIN_PSNR:.0} dB"
            )));
        }
        Ok(self)
    }
}

/// The codec actually used by training and sampling.
#[derive(Debug, Clone)]
pub enum Codec<T> {
    Patchify(PatchifyCodec<T>),
    Learned(TinyAutoencoder<T>),
}

impl<T: Scalar> Codec<T> {
    /// Default patchify codec with uniform gain 2.0: with pixels in `[0,1]`
    /// this puts latents in `[0,2]`, a reasonable scale against unit noise.
    pub fn default_patchify(spec: LatentSpec) -> Result<Self> {
        Ok(Codec::Patchify(PatchifyCodec::new(spec, 2.0)?))
    }

    pub fn spec(&self) -> LatentSpec {
        match self {
            Codec::Patchify(c) => c.spec(),
            Codec::Learned(c) => c.spec(),
        }
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Codec::Patchify(c) => c.encode(image),
            Codec::Learned(c) => c.encode(image),
        }
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Codec::Patchify(c) => c.decode(z),
            Codec::Learned(c) => c.decode(z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patchify_roundtrip_is_bit_exact() {
        let codec = PatchifyCodec::<f32>::new(LatentSpec::default(), 2.0).unwrap();
        let image = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng(5));
        let z = codec.encode(&image).unwrap();
        assert_eq!(z.shape(), &[48, 8, 8]);
        let back = codec.decode(&z).unwrap();
        assert_eq!(back, image, "decode(encode(x)) must be exact");
        let again = codec.encode(&back).unwrap();
        assert_eq!(again, z, "encode(decode(z)) must be exact");
    }

    #[test]
    fn committed_golden_latent_round_trips() {
        // Frozen on first computation; a mismatch means the latent layout or
        // gain handling changed and every stored checkpoint is invalid.
        let golden: Vec<f32> = include_str!("../tests/data/patchify_golden.txt")
            .lines()
            .map(|l| f32::from_bits(u32::from_str_radix(l, 16).unwrap()))
            .collect();
        let image = Tensor::<f32>::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng(48));
        let codec = PatchifyCodec::<f32>::new(LatentSpec::default(), 2.0).unwrap();
        let z = codec.encode(&image).unwrap();
        assert_eq!(z.data(), &golden[..], "encode drifted from the fixture");
        let z_golden = Tensor::from_vec(&[48, 8, 8], golden).unwrap();
        let back = codec.decode(&z_golden).unwrap();
        assert_eq!(back, image, "decode drifted from the fixture");
    }

    #[test]
    fn zero_image_maps_to_zero_latent_and_back() {
        let codec = PatchifyCodec::<f32>::new(LatentSpec::default(), 2.0).unwrap();
        let zero = Tensor::zeros(&[3, 32, 32]);
        let z = codec.encode(&zero).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let back = codec.decode(&z).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_applies_gain_per_channel() {
        let codec = PatchifyCodec::<f64>::new(LatentSpec::default(), 2.0).unwrap();
        let image = Tensor::full(&[3, 32, 32], 0.25);
        let z = codec.encode(&image).unwrap();
        for &v in z.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn patchify_rejects_wrong_shapes_and_specs() {
        let codec = PatchifyCodec::<f32>::new(LatentSpec::default(), 2.0).unwrap();
        assert!(codec.encode(&Tensor::zeros(&[3, 31, 32])).is_err());
        assert!(codec.decode(&Tensor::zeros(&[48, 8, 7])).is_err());
        let bad = LatentSpec {
            c: 47,
            ..LatentSpec::default()
        };
        assert!(PatchifyCodec::<f32>::new(bad, 2.0).is_err());
        assert!(PatchifyCodec::<f32>::new(LatentSpec::default(), 0.0).is_err());
    }

    #[test]
    fn patchify_layout_is_frozen() {
        // Channel layout contract: latent channel (ci·s + py)·s + px holds
        // pixel (ci, y·s+py, x·s+px). Checked on a delta image so any layout
        // change moves the nonzero element.
        let codec = PatchifyCodec::<f64>::new(LatentSpec::default(), 1.0).unwrap();
        let mut image = Tensor::zeros(&[3, 32, 32]);
        // pixel channel 1, y = 9 = 2*4+1, x = 6 = 1*4+2
        image.data_mut()[1 * 32 * 32 + 9 * 32 + 6] = 1.0;
        let z = codec.encode(&image).unwrap();
        let lc = (1 * 4 + 1) * 4 + 2;
        let idx = lc * 64 + 2 * 8 + 1;
        for (i, &v) in z.data().iter().enumerate() {
            if i == idx {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn psnr_of_identical_images_is_infinite_and_degrades_with_noise() {
        let a = Tensor::<f64>::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(6));
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let slightly = a.add(&Tensor::full(&[3, 8, 8], 0.01)).unwrap();
        let very = a.add(&Tensor::full(&[3, 8, 8], 0.2)).unwrap();
        let p1 = psnr(&a, &slightly).unwrap();
        let p2 = psnr(&a, &very).unwrap();
        assert!((p1 - 40.0).abs() < 1e-9, "uniform 0.01 error is exactly 40 dB, got {p1}");
        assert!(p2 < p1);
    }

    #[test]
    fn untrained_autoencoder_fails_the_psnr_gate() {
        let spec = LatentSpec {
            c: 8,
            h: 2,
            w: 2,
            scale: 4,
        };
        let ae = TinyAutoencoder::<f32>::new(spec, 8, 1).unwrap();
        let val: Vec<_> = (0..4)
            .map(|i| Tensor::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(10 + i)))
            .collect();
        assert!(ae.validated(&val).is_err());
    }

    #[test]
    fn autoencoder_training_reaches_gate_on_flat_images() {
        // Near-constant images are reconstructible by a tiny net; the point
        // is that the training loop drives PSNR through the 25 dB gate.
        let spec = LatentSpec {
            c: 8,
            h: 2,
            w: 2,
            scale: 4,
        };
        let mut ae = TinyAutoencoder::<f32>::new(spec, 8, 2).unwrap();
        let levels = [0.2f32, 0.5, 0.8];
        let train: Vec<_> = levels
            .iter()
            .map(|&v| Tensor::full(&[3, 8, 8], v))
            .collect();
        for step in 0..600 {
            let img = &train[step % train.len()];
            ae.train_step(img, 0.05).unwrap();
        }
        let db = ae.validation_psnr(&train).unwrap();
        assert!(db >= LEARNED_CODEC_MIN_PSNR, "PSNR after training: {db:.2} dB");
        assert!(ae.validated(&train).is_ok());
    }

    #[test]
    fn codec_enum_dispatches_to_patchify() {
        let codec = Codec::<f32>::default_patchify(LatentSpec::default()).unwrap();
        let image = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng(7));
        let back = codec.decode(&codec.encode(&image).unwrap()).unwrap();
        assert_eq!(back, image);
    }
}
