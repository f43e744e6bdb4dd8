//! The micro denoiser: a two-level UNet with timestep embedding and one
//! cross-attention block per resolution level.
//!
//! The input conv is split by channel group so conditioning can be grown
//! onto a frozen base: `in.w` covers the noisy latent channels `[0, c)`,
//! `in.w_ext` covers the reference and mask channels `[c, 2c+1)`, and (in
//! inpainting mode) `in.w_inp` covers the masked-source channels
//! `[2c+1, 3c+1)`. The extension weights are zero-initialized, so with a
//! fresh extension and no adapter the network behaves exactly like the
//! unconditional base.
//!
//! Weights live in a flat name → tensor map rather than in structs: the
//! low-rank adapter machinery, the optimizer, and the checkpoint format all
//! address tensors by name. [`Denoiser::param_specs`] is the authoritative
//! registry of names, shapes, and adaptation eligibility.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::LatentSpec;
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// How a parameter participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Never trained, never adapted (biases, norms, embeddings).
    Frozen,
    /// Frozen base matrix that a low-rank adapter may wrap.
    LoraEligible,
    /// Zero-initialized conditioning extension, trained directly as part of
    /// an expert plugin.
    Extension,
}

/// Name, shape, and training role of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Denoiser hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetworkConfig {
    /// Channel width at full latent resolution.
    pub width: usize,
    /// Channel width at the downsampled level.
    pub width2: usize,
    /// Query/key/value width of cross-attention (must equal text dim).
    pub attn_dim: usize,
    /// Sinusoidal timestep embedding size.
    pub time_dim: usize,
    /// Hidden width of the timestep MLP.
    pub time_hidden: usize,
    /// GroupNorm group count.
    pub groups: usize,
    /// Accept the `(3c+1)` inpainting input layout.
    pub inpaint: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            width: 64,
            width2: 96,
            attn_dim: 64,
            time_dim: 64,
            time_hidden: 128,
            groups: 16,
            inpaint: false,
        }
    }
}

const RES_EPS: f64 = 1e-5;

/// The denoiser architecture: owns hyperparameters and the latent geometry,
/// not the weights. Weights are plain name → tensor maps produced by
/// [`Denoiser::init_base`] and threaded through [`Denoiser::forward`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: NetworkConfig,
    latent: LatentSpec,
    text_dim: usize,
}

struct ResBlockSpec {
    name: &'static str,
    ch_in: usize,
    ch_out: usize,
}

impl Denoiser {
    pub fn new(config: NetworkConfig, latent: LatentSpec, text_dim: usize) -> Result<Self> {
        latent.validate()?;
        if config.attn_dim != text_dim {
            return Err(CoreError::InvalidConfig(format!(
                "attention width {} must equal text width {text_dim}",
                config.attn_dim
            )));
        }
        for (what, ch) in [
            ("width", config.width),
            ("width2", config.width2),
            ("skip join", config.width * 2),
        ] {
            if ch % config.groups != 0 {
                return Err(CoreError::InvalidConfig(format!(
                    "{what} {ch} not divisible into {} norm groups",
                    config.groups
                )));
            }
        }
        if config.time_dim % 2 != 0 {
            return Err(CoreError::InvalidConfig("time embedding size must be even".into()));
        }
        Ok(Denoiser {
            config,
            latent,
            text_dim,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn latent(&self) -> LatentSpec {
        self.latent
    }

    /// Channel count of the composed input this network accepts.
    pub fn input_channels(&self) -> usize {
        let c = self.latent.c;
        if self.config.inpaint {
            3 * c + 1
        } else {
            2 * c + 1
        }
    }

    fn resblocks(&self) -> Vec<ResBlockSpec> {
        let w0 = self.config.width;
        let w1 = self.config.width2;
        alloc::vec![
            ResBlockSpec { name: "rb0a", ch_in: w0, ch_out: w0 },
            ResBlockSpec { name: "rb0b", ch_in: w0, ch_out: w0 },
            ResBlockSpec { name: "rb1a", ch_in: w1, ch_out: w1 },
            ResBlockSpec { name: "rb1b", ch_in: w1, ch_out: w1 },
            ResBlockSpec { name: "rbm", ch_in: w1, ch_out: w1 },
            ResBlockSpec { name: "rb2a", ch_in: 2 * w0, ch_out: w0 },
            ResBlockSpec { name: "rb2b", ch_in: w0, ch_out: w0 },
        ]
    }

    /// Authoritative parameter registry, in deterministic order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        use ParamKind::*;
        let c = self.latent.c;
        let w0 = self.config.width;
        let w1 = self.config.width2;
        let d = self.config.attn_dim;
        let th = self.config.time_hidden;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: &[usize], kind: ParamKind| {
            specs.push(ParamSpec {
                name,
                shape: shape.to_vec(),
                kind,
            });
        };

        push("time.mlp1.w".into(), &[self.config.time_dim, th], LoraEligible);
        push("time.mlp1.b".into(), &[th], Frozen);
        push("time.mlp2.w".into(), &[th, th], LoraEligible);
        push("time.mlp2.b".into(), &[th], Frozen);

        push("unet.in.w".into(), &[w0, c * 9], LoraEligible);
        push("unet.in.w_ext".into(), &[w0, (c + 1) * 9], Extension);
        if self.config.inpaint {
            push("unet.in.w_inp".into(), &[w0, c * 9], Extension);
        }
        push("unet.in.b".into(), &[w0], Frozen);

        for rb in self.resblocks() {
            let p = format!("unet.{}", rb.name);
            push(format!("{p}.gn1.g"), &[rb.ch_in], Frozen);
            push(format!("{p}.gn1.b"), &[rb.ch_in], Frozen);
            push(format!("{p}.conv1.w"), &[rb.ch_out, rb.ch_in * 9], LoraEligible);
            push(format!("{p}.conv1.b"), &[rb.ch_out], Frozen);
            push(format!("{p}.temb.w"), &[th, rb.ch_out], LoraEligible);
            push(format!("{p}.temb.b"), &[rb.ch_out], Frozen);
            push(format!("{p}.gn2.g"), &[rb.ch_out], Frozen);
            push(format!("{p}.gn2.b"), &[rb.ch_out], Frozen);
            push(format!("{p}.conv2.w"), &[rb.ch_out, rb.ch_out * 9], LoraEligible);
            push(format!("{p}.conv2.b"), &[rb.ch_out], Frozen);
            if rb.ch_in != rb.ch_out {
                push(format!("{p}.skip.w"), &[rb.ch_out, rb.ch_in], LoraEligible);
            }
        }

        for (a, ch) in [("attn0", w0), ("attn1", w1)] {
            let p = format!("unet.{a}");
            push(format!("{p}.gn.g"), &[ch], Frozen);
            push(format!("{p}.gn.b"), &[ch], Frozen);
            push(format!("{p}.q.w"), &[ch, d], LoraEligible);
            push(format!("{p}.k.w"), &[self.text_dim, d], LoraEligible);
            push(format!("{p}.v.w"), &[self.text_dim, d], LoraEligible);
            push(format!("{p}.o.w"), &[d, ch], LoraEligible);
        }

        push("unet.down.w".into(), &[w1, w0 * 9], LoraEligible);
        push("unet.down.b".into(), &[w1], Frozen);
        push("unet.up.w".into(), &[w0, w1 * 9], LoraEligible);
        push("unet.up.b".into(), &[w0], Frozen);

        push("unet.out.gn.g".into(), &[w0], Frozen);
        push("unet.out.gn.b".into(), &[w0], Frozen);
        push("unet.out.w".into(), &[c, w0 * 9], LoraEligible);
        push("unet.out.b".into(), &[c], Frozen);
        specs
    }

    /// Seeded base weights: He-initialized convs and projections, unit norm
    /// scales, zero biases, zero extension weights.
    pub fn init_base<T: Scalar>(&self, seed: u64) -> BTreeMap<String, Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for spec in self.param_specs() {
            let t = match spec.kind {
                ParamKind::Extension => Tensor::zeros(&spec.shape),
                _ => {
                    if spec.name.ends_with(".g") {
                        Tensor::full(&spec.shape, T::one())
                    } else if spec.name.ends_with(".b") {
                        Tensor::zeros(&spec.shape)
                    } else {
                        let fan_in = spec.shape[0].max(1);
                        let std = T::from_f64((2.0 / fan_in as f64).sqrt());
                        Tensor::randn(&spec.shape, &mut rng).scale(std)
                    }
                }
            };
            params.insert(spec.name, t);
        }
        params
    }

    /// Sinusoidal timestep embedding, shape `(1, time_dim)`.
    pub fn time_embedding<T: Scalar>(&self, t: usize) -> Tensor<T> {
        let d = self.config.time_dim;
        let half = d / 2;
        let mut data = Vec::with_capacity(d);
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            data.push(T::from_f64(((t as f64) * freq).cos()));
        }
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            data.push(T::from_f64(((t as f64) * freq).sin()));
        }
        Tensor::from_vec(&[1, d], data).expect("sized above")
    }

    fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| CoreError::Missing(format!("denoiser param {name}")))
    }

    fn resblock<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &BTreeMap<String, Var>,
        prefix: &str,
        x: Var,
        temb: Var,
        ch_in: usize,
        ch_out: usize,
    ) -> Result<Var> {
        let eps = T::from_f64(RES_EPS);
        let groups = self.config.groups;
        let gn1g = Self::var(vars, &format!("{prefix}.gn1.g"))?;
        let gn1b = Self::var(vars, &format!("{prefix}.gn1.b"))?;
        let h = g.group_norm(x, gn1g, gn1b, groups, eps)?;
        let h = g.silu(h)?;
        let w1 = Self::var(vars, &format!("{prefix}.conv1.w"))?;
        let b1 = Self::var(vars, &format!("{prefix}.conv1.b"))?;
        let h = g.conv2d(h, w1, Some(b1), 3, 1, 1)?;

        let tw = Self::var(vars, &format!("{prefix}.temb.w"))?;
        let tb = Self::var(vars, &format!("{prefix}.temb.b"))?;
        let tproj = g.matmul(temb, tw)?;
        let tproj = g.add_row_broadcast(tproj, tb)?;
        let tproj = g.reshape(tproj, &[ch_out])?;
        let h = g.add_chan_broadcast(h, tproj)?;

        let gn2g = Self::var(vars, &format!("{prefix}.gn2.g"))?;
        let gn2b = Self::var(vars, &format!("{prefix}.gn2.b"))?;
        let h = g.group_norm(h, gn2g, gn2b, groups, eps)?;
        let h = g.silu(h)?;
        let w2 = Self::var(vars, &format!("{prefix}.conv2.w"))?;
        let b2 = Self::var(vars, &format!("{prefix}.conv2.b"))?;
        let h = g.conv2d(h, w2, Some(b2), 3, 1, 1)?;

        let shortcut = if ch_in != ch_out {
            let sw = Self::var(vars, &format!("{prefix}.skip.w"))?;
            g.conv2d(x, sw, None, 1, 1, 0)?
        } else {
            x
        };
        g.add(h, shortcut)
    }

    fn cross_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &BTreeMap<String, Var>,
        prefix: &str,
        x: Var,
        text: Var,
        ch: usize,
    ) -> Result<Var> {
        let [_, h, w] = g.value(x).shape() else {
            return Err(CoreError::ShapeMismatch("attention input must be (C,H,W)".into()));
        };
        let (h, w) = (*h, *w);
        let eps = T::from_f64(RES_EPS);
        let gng = Self::var(vars, &format!("{prefix}.gn.g"))?;
        let gnb = Self::var(vars, &format!("{prefix}.gn.b"))?;
        let normed = g.group_norm(x, gng, gnb, self.config.groups, eps)?;
        let flat = g.reshape(normed, &[ch, h * w])?;
        let tokens = g.transpose(flat)?;

        let wq = Self::var(vars, &format!("{prefix}.q.w"))?;
        let wk = Self::var(vars, &format!("{prefix}.k.w"))?;
        let wv = Self::var(vars, &format!("{prefix}.v.w"))?;
        let wo = Self::var(vars, &format!("{prefix}.o.w"))?;
        let q = g.matmul(tokens, wq)?;
        let k = g.matmul(text, wk)?;
        let v = g.matmul(text, wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::from_f64(1.0 / (self.config.attn_dim as f64).sqrt()))?;
        let attn = g.softmax_rows(scores)?;
        let mixed = g.matmul(attn, v)?;
        let proj = g.matmul(mixed, wo)?;
        let back = g.transpose(proj)?;
        let spatial = g.reshape(back, &[ch, h, w])?;
        g.add(x, spatial)
    }

    /// One denoiser evaluation: composed input, timestep, text features to a
    /// noise estimate of shape `(c, h, w)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &BTreeMap<String, Var>,
        x: Var,
        t: usize,
        text: Var,
    ) -> Result<Var> {
        let c = self.latent.c;
        let total = self.input_channels();
        let got = g.value(x).shape().to_vec();
        if got != [total, self.latent.h, self.latent.w] {
            return Err(CoreError::ShapeMismatch(format!(
                "composed input {got:?}, expected ({total},{},{})",
                self.latent.h, self.latent.w
            )));
        }
        let eps = T::from_f64(RES_EPS);
        let w0 = self.config.width;
        let w1 = self.config.width2;
        let groups = self.config.groups;

        // Timestep features: sinusoid -> MLP -> SiLU, shared by all blocks.
        let sin = g.input(self.time_embedding::<T>(t));
        let tw1 = Self::var(vars, "time.mlp1.w")?;
        let tb1 = Self::var(vars, "time.mlp1.b")?;
        let tw2 = Self::var(vars, "time.mlp2.w")?;
        let tb2 = Self::var(vars, "time.mlp2.b")?;
        let temb = g.matmul(sin, tw1)?;
        let temb = g.add_row_broadcast(temb, tb1)?;
        let temb = g.silu(temb)?;
        let temb = g.matmul(temb, tw2)?;
        let temb = g.add_row_broadcast(temb, tb2)?;
        let temb = g.silu(temb)?;

        // Split input conv: frozen base over z_t, trainable extension over
        // the conditioning channels.
        let zt_part = g.slice_channels(x, 0, c)?;
        let cond_part = g.slice_channels(x, c, 2 * c + 1)?;
        let in_w = Self::var(vars, "unet.in.w")?;
        let in_b = Self::var(vars, "unet.in.b")?;
        let in_ext = Self::var(vars, "unet.in.w_ext")?;
        let base = g.conv2d(zt_part, in_w, Some(in_b), 3, 1, 1)?;
        let ext = g.conv2d(cond_part, in_ext, None, 3, 1, 1)?;
        let mut h = g.add(base, ext)?;
        if self.config.inpaint {
            let inp_part = g.slice_channels(x, 2 * c + 1, 3 * c + 1)?;
            let in_inp = Self::var(vars, "unet.in.w_inp")?;
            let inp = g.conv2d(inp_part, in_inp, None, 3, 1, 1)?;
            h = g.add(h, inp)?;
        }

        // Level 0 at full resolution.
        h = self.resblock(g, vars, "unet.rb0a", h, temb, w0, w0)?;
        h = self.resblock(g, vars, "unet.rb0b", h, temb, w0, w0)?;
        h = self.cross_attention(g, vars, "unet.attn0", h, text, w0)?;
        let skip0 = h;

        // Downsample and level 1.
        let dw = Self::var(vars, "unet.down.w")?;
        let db = Self::var(vars, "unet.down.b")?;
        h = g.conv2d(h, dw, Some(db), 3, 2, 1)?;
        h = self.resblock(g, vars, "unet.rb1a", h, temb, w1, w1)?;
        h = self.resblock(g, vars, "unet.rb1b", h, temb, w1, w1)?;
        h = self.cross_attention(g, vars, "unet.attn1", h, text, w1)?;
        h = self.resblock(g, vars, "unet.rbm", h, temb, w1, w1)?;

        // Upsample, join the skip, and refine.
        h = g.upsample_nearest2(h)?;
        let uw = Self::var(vars, "unet.up.w")?;
        let ub = Self::var(vars, "unet.up.b")?;
        h = g.conv2d(h, uw, Some(ub), 3, 1, 1)?;
        h = g.concat_channels(&[h, skip0])?;
        h = self.resblock(g, vars, "unet.rb2a", h, temb, 2 * w0, w0)?;
        h = self.resblock(g, vars, "unet.rb2b", h, temb, w0, w0)?;

        let og = Self::var(vars, "unet.out.gn.g")?;
        let ob = Self::var(vars, "unet.out.gn.b")?;
        h = g.group_norm(h, og, ob, groups, eps)?;
        h = g.silu(h)?;
        let ow = Self::var(vars, "unet.out.w")?;
        let obias = Self::var(vars, "unet.out.b")?;
        g.conv2d(h, ow, Some(obias), 3, 1, 1)
    }
}

/// Bind a parameter map into a graph: names in `trainable` become gradient
/// leaves, everything else is a frozen input.
pub fn bind_params<T: Scalar>(
    g: &mut Graph<T>,
    params: &BTreeMap<String, Tensor<T>>,
    trainable: &BTreeSet<String>,
) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, value)| {
            let var = if trainable.contains(name) {
                g.param(value.clone())
            } else {
                g.input(value.clone())
            };
            (name.clone(), var)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::max_rel_error_fd;
    use crate::text::{TextEncoder, TextEncoderConfig, Vocab};

    /// Small-but-real configuration used across network-level tests.
    pub(crate) fn tiny() -> (Denoiser, LatentSpec) {
        let latent = LatentSpec {
            c: 12,
            h: 4,
            w: 4,
            scale: 2,
        };
        let config = NetworkConfig {
            width: 16,
            width2: 16,
            attn_dim: 16,
            time_dim: 8,
            time_hidden: 16,
            groups: 4,
            inpaint: false,
        };
        (Denoiser::new(config, latent, 16).unwrap(), latent)
    }

    fn tiny_text(seed: u64) -> TextEncoder<f32> {
        let vocab = Vocab::build(["a sign that says hello"]);
        let cfg = TextEncoderConfig {
            dim: 16,
            layers: 1,
            max_tokens: 8,
        };
        TextEncoder::new(vocab, cfg, seed).unwrap()
    }

    #[test]
    fn forward_is_shaped_finite_and_deterministic() {
        let (net, latent) = tiny();
        let base = net.init_base::<f32>(11);
        let text = tiny_text(1);
        let run = || {
            let mut g = Graph::new();
            let vars = bind_params(&mut g, &base, &BTreeSet::new());
            let x = g.input(Tensor::randn(
                &[net.input_channels(), latent.h, latent.w],
                &mut ChaCha8Rng::seed_from_u64(2),
            ));
            let feats = text.encode_prompt(&mut g, "hello says").unwrap();
            let out = net.forward(&mut g, &vars, x, 500, feats).unwrap();
            g.value(out).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.shape(), &[latent.c, latent.h, latent.w]);
        assert!(a.is_finite());
        assert_eq!(a, b, "same seed and inputs must be bit-identical");
    }

    #[test]
    fn default_config_outputs_48x8x8() {
        let latent = LatentSpec::default();
        let net = Denoiser::new(NetworkConfig::default(), latent, 64).unwrap();
        let base = net.init_base::<f32>(3);
        let vocab = Vocab::build(["store sign"]);
        let text = TextEncoder::<f32>::new(vocab, TextEncoderConfig::default(), 4).unwrap();
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &base, &BTreeSet::new());
        let x = g.input(Tensor::randn(
            &[97, 8, 8],
            &mut ChaCha8Rng::seed_from_u64(5),
        ));
        let feats = text.encode_prompt(&mut g, "store sign").unwrap();
        let out = net.forward(&mut g, &vars, x, 1000, feats).unwrap();
        assert_eq!(g.value(out).shape(), &[48, 8, 8]);
        assert!(g.value(out).is_finite());
    }

    #[test]
    fn zero_extension_makes_conditioning_channels_inert() {
        // With the zero-initialized extension, any values in the s and m
        // channels leave the output unchanged: the base model is recovered.
        let (net, latent) = tiny();
        let base = net.init_base::<f32>(7);
        let text = tiny_text(2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zt = Tensor::<f32>::randn(&[latent.c, latent.h, latent.w], &mut rng);
        let cond_a = Tensor::<f32>::randn(&[latent.c + 1, latent.h, latent.w], &mut rng);
        let cond_b = Tensor::<f32>::zeros(&[latent.c + 1, latent.h, latent.w]);
        let mut outs = Vec::new();
        for cond in [&cond_a, &cond_b] {
            let mut g = Graph::new();
            let vars = bind_params(&mut g, &base, &BTreeSet::new());
            let x_t = crate::tensor::concat_channels(&[&zt, cond]).unwrap();
            let x = g.input(x_t);
            let feats = text.encode_prompt(&mut g, "hello").unwrap();
            let out = net.forward(&mut g, &vars, x, 10, feats).unwrap();
            outs.push(g.value(out).clone());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn nonzero_extension_reads_the_reference_channels() {
        let (net, latent) = tiny();
        let mut base = net.init_base::<f32>(7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        base.insert(
            "unet.in.w_ext".into(),
            Tensor::randn(&[16, (latent.c + 1) * 9], &mut rng).scale(0.05),
        );
        let text = tiny_text(2);
        let zt = Tensor::<f32>::randn(&[latent.c, latent.h, latent.w], &mut rng);
        let cond_a = Tensor::<f32>::randn(&[latent.c + 1, latent.h, latent.w], &mut rng);
        let cond_b = Tensor::<f32>::zeros(&[latent.c + 1, latent.h, latent.w]);
        let mut outs = Vec::new();
        for cond in [&cond_a, &cond_b] {
            let mut g = Graph::new();
            let vars = bind_params(&mut g, &base, &BTreeSet::new());
            let x_t = crate::tensor::concat_channels(&[&zt, cond]).unwrap();
            let x = g.input(x_t);
            let feats = text.encode_prompt(&mut g, "hello").unwrap();
            let out = net.forward(&mut g, &vars, x, 10, feats).unwrap();
            outs.push(g.value(out).clone());
        }
        assert!(outs[0].max_abs_diff(&outs[1]) > 1e-4);
    }

    #[test]
    fn forward_rejects_wrong_channel_count() {
        let (net, latent) = tiny();
        let base = net.init_base::<f32>(1);
        let text = tiny_text(1);
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &base, &BTreeSet::new());
        let x = g.input(Tensor::zeros(&[latent.c, latent.h, latent.w]));
        let feats = text.encode_prompt(&mut g, "hello").unwrap();
        assert!(net.forward(&mut g, &vars, x, 1, feats).is_err());
    }

    #[test]
    fn time_embedding_distinguishes_timesteps() {
        let (net, _) = tiny();
        let a = net.time_embedding::<f64>(1);
        let b = net.time_embedding::<f64>(999);
        assert!(a.is_finite() && b.is_finite());
        assert!(a.max_abs_diff(&b) > 0.1);
    }

    #[test]
    fn denoiser_weight_gradient_matches_finite_differences() {
        // Squared norm of the output, differentiated through one adapted
        // weight matrix at f64, against central differences. A tinier config
        // keeps the full-matrix sweep tractable.
        let latent = LatentSpec {
            c: 3,
            h: 2,
            w: 2,
            scale: 1,
        };
        let config = NetworkConfig {
            width: 4,
            width2: 4,
            attn_dim: 4,
            time_dim: 4,
            time_hidden: 4,
            groups: 2,
            inpaint: false,
        };
        let net = Denoiser::new(config, latent, 4).unwrap();
        let mut base = net.init_base::<f64>(21);
        // Nonzero extension so the conditioning path is exercised too.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        base.insert(
            "unet.in.w_ext".into(),
            Tensor::randn(&[4, 4 * 9], &mut rng).scale(0.3),
        );
        let x0 = Tensor::<f64>::randn(&[7, 2, 2], &mut rng);
        let textf = Tensor::<f64>::randn(&[2, 4], &mut rng);

        for target in ["unet.rb0a.conv1.w", "unet.attn0.q.w", "unet.out.w", "time.mlp1.w"] {
            let probe = base[target].clone();
            let err = max_rel_error_fd(&[probe], 1e-5, |g, vars| {
                let mut bound = BTreeMap::new();
                for (name, value) in &base {
                    let v = if name == target {
                        vars[0]
                    } else {
                        g.input(value.clone())
                    };
                    bound.insert(name.clone(), v);
                }
                let x = g.input(x0.clone());
                let text = g.input(textf.clone());
                let out = net.forward(g, &bound, x, 3, text)?;
                let sq = g.square(out)?;
                g.sum_all(sq)
            });
            assert!(err < 1e-3, "{target}: rel err {err}");
        }
    }

    #[test]
    fn param_registry_matches_initialized_tensors() {
        let (net, _) = tiny();
        let specs = net.param_specs();
        let base = net.init_base::<f32>(0);
        assert_eq!(specs.len(), base.len());
        for spec in &specs {
            assert_eq!(
                base[&spec.name].shape(),
                &spec.shape[..],
                "shape mismatch for {}",
                spec.name
            );
        }
        // Extensions start at zero; norm gains start at one.
        assert!(base["unet.in.w_ext"].data().iter().all(|&v| v == 0.0));
        assert!(base["unet.rb0a.gn1.g"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn inpaint_mode_grows_the_registry_and_input() {
        let latent = LatentSpec {
            c: 12,
            h: 4,
            w: 4,
            scale: 2,
        };
        let config = NetworkConfig {
            width: 16,
            width2: 16,
            attn_dim: 16,
            time_dim: 8,
            time_hidden: 16,
            groups: 4,
            inpaint: true,
        };
        let net = Denoiser::new(config, latent, 16).unwrap();
        assert_eq!(net.input_channels(), 3 * 12 + 1);
        assert!(net.param_specs().iter().any(|s| s.name == "unet.in.w_inp"));
        let base = net.init_base::<f32>(2);
        let text = tiny_text(3);
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &base, &BTreeSet::new());
        let x = g.input(Tensor::randn(
            &[37, 4, 4],
            &mut ChaCha8Rng::seed_from_u64(13),
        ));
        let feats = text.encode_prompt(&mut g, "hello").unwrap();
        let out = net.forward(&mut g, &vars, x, 7, feats).unwrap();
        assert_eq!(g.value(out).shape(), &[12, 4, 4]);
    }
}
