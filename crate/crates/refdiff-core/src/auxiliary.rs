//! Region-of-interest pooling plus the online-trained recognition and logo
//! heads that supervise the denoiser.
//!
//! Per text region the pipeline is: `roi_align` on the (predicted or clean)
//! latent, a four-block convolutional encoder, then a query-decoder head
//! that emits one logit row per character slot. Logo regions share the
//! pooling and encoder and finish in a single linear layer.
//!
//! The losses here are graph builders: they return a `Var` so gradients flow
//! back through the RoI pooling into the latent, which is exactly the path
//! by which recognition supervision reaches the diffusion network.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::condition::{LatentBox, Region, RegionLabel};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Rect, Var};
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Ordered character inventory. Class indices follow insertion order, with
/// one extra PAD class appended after the real characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Charset {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Charset {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut list = Vec::new();
        let mut index = BTreeMap::new();
        for c in chars {
            if index.insert(c, list.len()).is_some() {
                return Err(CoreError::InvalidConfig(format!(
                    "duplicate charset entry {c:?}"
                )));
            }
            list.push(c);
        }
        if list.is_empty() {
            return Err(CoreError::InvalidConfig("empty charset".into()));
        }
        Ok(Charset { chars: list, index })
    }

    /// Real character count, excluding PAD.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pad_id(&self) -> usize {
        self.chars.len()
    }

    /// Class count including PAD.
    pub fn n_classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn class_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, class: usize) -> Option<char> {
        self.chars.get(class).copied()
    }

    /// Class sequence for a word, truncated to `slots` and padded with PAD.
    pub fn encode_word(&self, word: &str, slots: usize) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(slots);
        for c in word.chars().take(slots) {
            let id = self.class_of(c).ok_or_else(|| {
                CoreError::Missing(format!("character {c:?} not in charset"))
            })?;
            ids.push(id);
        }
        ids.resize(slots, self.pad_id());
        Ok(ids)
    }

    /// Greedy readout: drop PAD, keep everything else in slot order.
    pub fn decode_slots(&self, classes: &[usize]) -> String {
        classes
            .iter()
            .filter_map(|&id| self.char_of(id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AuxConfig {
    /// Encoder width after the first downsample; also the head feature dim.
    pub width: usize,
    /// GroupNorm group count throughout the encoder.
    pub groups: usize,
    /// RoI pooling grid (rows, cols).
    pub roi: (usize, usize),
    /// Bilinear sample points per bin axis.
    pub sampling: usize,
    /// Character slots per word (L).
    pub word_len: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            width: 64,
            groups: 16,
            roi: (4, 4),
            sampling: 1,
            word_len: 12,
        }
    }
}

const ENC_BLOCKS: usize = 4;
const ATTN_LAYERS: usize = 4;

/// The auxiliary networks: RoI encoder, recognition head, logo head. Like
/// the denoiser this owns shapes only; weights travel as name → tensor maps.
#[derive(Debug, Clone)]
pub struct AuxNets {
    config: AuxConfig,
    latent_c: usize,
    n_classes: usize,
    n_logos: usize,
}

impl AuxNets {
    pub fn new(
        config: AuxConfig,
        latent_c: usize,
        n_classes: usize,
        n_logos: usize,
    ) -> Result<Self> {
        if latent_c % config.groups != 0 || config.width % config.groups != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "channels ({latent_c}, {}) must divide into {} norm groups",
                config.width, config.groups
            )));
        }
        if config.roi.0 == 0 || config.roi.1 == 0 || config.sampling == 0 {
            return Err(CoreError::InvalidConfig("roi grid and sampling must be positive".into()));
        }
        if config.word_len == 0 || n_classes < 2 || n_logos == 0 {
            return Err(CoreError::InvalidConfig(
                "need at least one slot, two character classes, one logo class".into(),
            ));
        }
        Ok(AuxNets {
            config,
            latent_c,
            n_classes,
            n_logos,
        })
    }

    pub fn config(&self) -> &AuxConfig {
        &self.config
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_logos(&self) -> usize {
        self.n_logos
    }

    fn block_channels(&self, k: usize) -> usize {
        if k == 0 {
            self.latent_c
        } else {
            self.config.width
        }
    }

    /// Registry of every auxiliary parameter (all of them trainable).
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.config.width;
        let l = self.config.word_len;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: &[usize]| specs.push((name, shape.to_vec()));

        for k in 0..ENC_BLOCKS {
            let ch = self.block_channels(k);
            let p = format!("aux.enc.b{k}");
            push(format!("{p}.gn_in.g"), &[ch]);
            push(format!("{p}.gn_in.b"), &[ch]);
            for rb in ["rb1", "rb2"] {
                push(format!("{p}.{rb}.conv1.w"), &[ch, ch * 9]);
                push(format!("{p}.{rb}.conv1.b"), &[ch]);
                push(format!("{p}.{rb}.conv2.w"), &[ch, ch * 9]);
                push(format!("{p}.{rb}.conv2.b"), &[ch]);
            }
            push(format!("{p}.gn_out.g"), &[ch]);
            push(format!("{p}.gn_out.b"), &[ch]);
            if k + 1 < ENC_BLOCKS {
                push(format!("aux.enc.down{k}.w"), &[w, ch * 9]);
                push(format!("aux.enc.down{k}.b"), &[w]);
            }
        }

        push("aux.recog.queries".into(), &[l, w]);
        for j in 0..ATTN_LAYERS {
            let p = format!("aux.recog.l{j}");
            push(format!("{p}.ln1.g"), &[w]);
            push(format!("{p}.ln1.b"), &[w]);
            for proj in ["q", "k", "v", "o"] {
                push(format!("{p}.{proj}.w"), &[w, w]);
            }
            push(format!("{p}.ln2.g"), &[w]);
            push(format!("{p}.ln2.b"), &[w]);
            push(format!("{p}.ffn.w1"), &[w, 2 * w]);
            push(format!("{p}.ffn.b1"), &[2 * w]);
            push(format!("{p}.ffn.w2"), &[2 * w, w]);
            push(format!("{p}.ffn.b2"), &[w]);
        }
        push("aux.recog.lnf.g".into(), &[w]);
        push("aux.recog.lnf.b".into(), &[w]);
        push("aux.recog.cls.w".into(), &[w, self.n_classes]);
        push("aux.recog.cls.b".into(), &[self.n_classes]);

        push("aux.logo.w".into(), &[w, self.n_logos]);
        push("aux.logo.b".into(), &[self.n_logos]);
        specs
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> BTreeMap<String, Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in self.param_specs() {
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, T::one())
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else if name == "aux.recog.queries" {
                Tensor::randn(&shape, &mut rng)
            } else {
                let std = T::from_f64((2.0 / shape[0] as f64).sqrt());
                Tensor::randn(&shape, &mut rng).scale(std)
            };
            params.insert(name, t);
        }
        params
    }

    fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| CoreError::Missing(format!("aux param {name}")))
    }

    fn res_pair<T: Scalar>(
        g: &mut Graph<T>,
        vars: &BTreeMap<String, Var>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for rb in ["rb1", "rb2"] {
            let w1 = Self::var(vars, &format!("{prefix}.{rb}.conv1.w"))?;
            let b1 = Self::var(vars, &format!("{prefix}.{rb}.conv1.b"))?;
            let w2 = Self::var(vars, &format!("{prefix}.{rb}.conv2.w"))?;
            let b2 = Self::var(vars, &format!("{prefix}.{rb}.conv2.b"))?;
            let a = g.silu(h)?;
            let a = g.conv2d(a, w1, Some(b1), 3, 1, 1)?;
            let a = g.silu(a)?;
            let a = g.conv2d(a, w2, Some(b2), 3, 1, 1)?;
            h = g.add(h, a)?;
        }
        Ok(h)
    }

    /// Encode one pooled RoI `(c, ph, pw)` into feature tokens `(n, width)`.
    pub fn encode_roi<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &BTreeMap<String, Var>,
        pooled: Var,
    ) -> Result<Var> {
        let eps = T::from_f64(LN_EPS);
        let mut h = pooled;
        for k in 0..ENC_BLOCKS {
            let p = format!("aux.enc.b{k}");
            let gi = Self::var(vars, &format!("{p}.gn_in.g"))?;
            let bi = Self::var(vars, &format!("{p}.gn_in.b"))?;
            h = g.group_norm(h, gi, bi, self.config.groups, eps)?;
            h = Self::res_pair(g, vars, &p, h)?;
            let go = Self::var(vars, &format!("{p}.gn_out.g"))?;
            let bo = Self::var(vars, &format!("{p}.gn_out.b"))?;
            h = g.group_norm(h, go, bo, self.config.groups, eps)?;
            if k + 1 < ENC_BLOCKS {
                let dw = Self::var(vars, &format!("aux.enc.down{k}.w"))?;
                let db = Self::var(vars, &format!("aux.enc.down{k}.b"))?;
                h = g.conv2d(h, dw, Some(db), 3, 2, 1)?;
            }
        }
        let [ch, fh, fw] = g.value(h).shape() else {
            return Err(CoreError::ShapeMismatch("encoder output must be 3d".into()));
        };
        let (ch, n) = (*ch, fh * fw);
        let flat = g.reshape(h, &[ch, n])?;
        g.transpose(flat)
    }

    /// Character logits `(word_len, n_classes)` for one encoded RoI.
    pub fn recog_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &BTreeMap<String, Var>,
        tokens: Var,
    ) -> Result<Var> {
        let eps = T::from_f64(LN_EPS);
        let scale = T::from_f64(1.0 / (self.config.width as f64).sqrt());
        let mut r = Self::var(vars, "aux.recog.queries")?;
        for j in 0..ATTN_LAYERS {
            let p = format!("aux.recog.l{j}");
            let g1 = Self::var(vars, &format!("{p}.ln1.g"))?;
            let b1 = Self::var(vars, &format!("{p}.ln1.b"))?;
            let rn = g.layer_norm_rows(r, g1, b1, eps)?;
            let wq = Self::var(vars, &format!("{p}.q.w"))?;
            let wk = Self::var(vars, &format!("{p}.k.w"))?;
            let wv = Self::var(vars, &format!("{p}.v.w"))?;
            let wo = Self::var(vars, &format!("{p}.o.w"))?;
            let q = g.matmul(rn, wq)?;
            let k = g.matmul(tokens, wk)?;
            let v = g.matmul(tokens, wv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scores)?;
            let mixed = g.matmul(attn, v)?;
            let proj = g.matmul(mixed, wo)?;
            r = g.add(r, proj)?;

            let g2 = Self::var(vars, &format!("{p}.ln2.g"))?;
            let b2 = Self::var(vars, &format!("{p}.ln2.b"))?;
            let rn2 = g.layer_norm_rows(r, g2, b2, eps)?;
            let w1 = Self::var(vars, &format!("{p}.ffn.w1"))?;
            let fb1 = Self::var(vars, &format!("{p}.ffn.b1"))?;
            let w2 = Self::var(vars, &format!("{p}.ffn.w2"))?;
            let fb2 = Self::var(vars, &format!("{p}.ffn.b2"))?;
            let f = g.matmul(rn2, w1)?;
            let f = g.add_row_broadcast(f, fb1)?;
            let f = g.silu(f)?;
            let f = g.matmul(f, w2)?;
            let f = g.add_row_broadcast(f, fb2)?;
            r = g.add(r, f)?;
        }
        let gf = Self::var(vars, "aux.recog.lnf.g")?;
        let bf = Self::var(vars, "aux.recog.lnf.b")?;
        let r = g.layer_norm_rows(r, gf, bf, eps)?;
        let cw = Self::var(vars, "aux.recog.cls.w")?;
        let cb = Self::var(vars, "aux.recog.cls.b")?;
        let logits = g.matmul(r, cw)?;
        g.add_row_broadcast(logits, cb)
    }

    /// Logo logits `(1, n_logos)`: mean-pool tokens, one linear layer.
    pub fn logo_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &BTreeMap<String, Var>,
        tokens: Var,
    ) -> Result<Var> {
        let [n, _] = g.value(tokens).shape() else {
            return Err(CoreError::ShapeMismatch("tokens must be 2d".into()));
        };
        let n = *n;
        let ones = g.input(Tensor::full(&[1, n], T::from_f64(1.0 / n as f64)));
        let pooled = g.matmul(ones, tokens)?;
        let w = Self::var(vars, "aux.logo.w")?;
        let b = Self::var(vars, "aux.logo.b")?;
        let logits = g.matmul(pooled, w)?;
        g.add_row_broadcast(logits, b)
    }
}

pub fn to_rect<T: Scalar>(b: &LatentBox) -> Rect<T> {
    Rect {
        x0: T::from_f64(b.x0),
        y0: T::from_f64(b.y0),
        x1: T::from_f64(b.x1),
        y1: T::from_f64(b.y1),
    }
}

/// Mean cross-entropy over every text region and character slot of `z`.
///
/// Returns the loss and the number of text regions used. A batch with no
/// text regions yields a constant zero (flagged by count 0), not an error.
pub fn recog_loss<T: Scalar>(
    g: &mut Graph<T>,
    nets: &AuxNets,
    vars: &BTreeMap<String, Var>,
    z: Var,
    regions: &[Region],
    charset: &Charset,
) -> Result<(Var, usize)> {
    if charset.n_classes() != nets.n_classes() {
        return Err(CoreError::InvalidConfig(format!(
            "charset has {} classes, head expects {}",
            charset.n_classes(),
            nets.n_classes()
        )));
    }
    let mut total: Option<Var> = None;
    let mut count = 0;
    for region in regions {
        let RegionLabel::Text(word) = &region.label else {
            continue;
        };
        let pooled = g.roi_align(
            z,
            to_rect::<T>(&region.bounds),
            nets.config.roi,
            nets.config.sampling,
        )?;
        let tokens = nets.encode_roi(g, vars, pooled)?;
        let logits = nets.recog_logits(g, vars, tokens)?;
        let targets = charset.encode_word(word, nets.config.word_len)?;
        let ce = g.cross_entropy_mean(logits, &targets)?;
        total = Some(match total {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
        count += 1;
    }
    match total {
        Some(sum) => {
            let loss = g.scale(sum, T::from_f64(1.0 / count as f64))?;
            Ok((loss, count))
        }
        None => Ok((g.input(Tensor::scalar(T::zero())), 0)),
    }
}

/// Mean cross-entropy over every logo region of `z`, single label per RoI.
pub fn logo_loss<T: Scalar>(
    g: &mut Graph<T>,
    nets: &AuxNets,
    vars: &BTreeMap<String, Var>,
    z: Var,
    regions: &[Region],
) -> Result<(Var, usize)> {
    let mut total: Option<Var> = None;
    let mut count = 0;
    for region in regions {
        let RegionLabel::Logo(id) = region.label else {
            continue;
        };
        if id >= nets.n_logos() {
            return Err(CoreError::InvalidConfig(format!(
                "logo id {id} outside registry of {}",
                nets.n_logos()
            )));
        }
        let pooled = g.roi_align(
            z,
            to_rect::<T>(&region.bounds),
            nets.config.roi,
            nets.config.sampling,
        )?;
        let tokens = nets.encode_roi(g, vars, pooled)?;
        let logits = nets.logo_logits(g, vars, tokens)?;
        let ce = g.cross_entropy_mean(logits, &[id])?;
        total = Some(match total {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
        count += 1;
    }
    match total {
        Some(sum) => {
            let loss = g.scale(sum, T::from_f64(1.0 / count as f64))?;
            Ok((loss, count))
        }
        None => Ok((g.input(Tensor::scalar(T::zero())), 0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::max_rel_error_fd;
    use crate::network::bind_params;
    use alloc::collections::BTreeSet;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::Rng;

    fn small_nets() -> AuxNets {
        AuxNets::new(
            AuxConfig {
                width: 8,
                groups: 2,
                roi: (2, 2),
                sampling: 1,
                word_len: 3,
            },
            4,
            Charset::new("ab".chars()).unwrap().n_classes(),
            2,
        )
        .unwrap()
    }

    fn bind_all<T: Scalar>(
        g: &mut Graph<T>,
        params: &BTreeMap<String, Tensor<T>>,
    ) -> BTreeMap<String, Var> {
        let names: BTreeSet<String> = params.keys().cloned().collect();
        bind_params(g, params, &names)
    }

    #[test]
    fn charset_encodes_pads_and_rejects_unknowns() {
        let cs = Charset::new("abcde".chars()).unwrap();
        assert_eq!(cs.len(), 5);
        assert_eq!(cs.pad_id(), 5);
        assert_eq!(cs.n_classes(), 6);
        assert_eq!(cs.encode_word("dab", 5).unwrap(), vec![3, 0, 1, 5, 5]);
        assert_eq!(cs.encode_word("abcde", 3).unwrap(), vec![0, 1, 2]);
        assert!(cs.encode_word("fab", 5).is_err());
        assert!(Charset::new("aa".chars()).is_err());
        assert_eq!(cs.decode_slots(&[3, 0, 5, 5, 1]), "dab".to_string());
    }

    #[test]
    fn mlt_scale_charset_is_supported() {
        let chars: Vec<char> = (0..847u32)
            .map(|i| char::from_u32(0x100 + i).unwrap())
            .collect();
        let cs = Charset::new(chars).unwrap();
        assert_eq!(cs.n_classes(), 848);
        let nets = AuxNets::new(
            AuxConfig {
                width: 8,
                groups: 2,
                roi: (2, 2),
                sampling: 1,
                word_len: 3,
            },
            4,
            cs.n_classes(),
            2,
        )
        .unwrap();
        let params = nets.init::<f32>(0);
        assert_eq!(params["aux.recog.cls.w"].shape(), &[8, 848]);
    }

    #[test]
    fn roi_on_integer_aligned_box_returns_the_subarray() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::<f64>::randn(&[2, 6, 6], &mut rng);
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let rect = Rect {
            x0: 2.0,
            y0: 1.0,
            x1: 5.0,
            y1: 3.0,
        };
        let out = g.roi_align(zv, rect, (2, 3), 1).unwrap();
        for c in 0..2 {
            for gy in 0..2 {
                for gx in 0..3 {
                    let want = z.data()[c * 36 + (1 + gy) * 6 + (2 + gx)];
                    let got = g.value(out).data()[c * 6 + gy * 3 + gx];
                    assert!((want - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn roi_on_constant_latent_is_constant() {
        let mut g = Graph::new();
        let zv = g.input(Tensor::<f64>::full(&[3, 5, 7], 0.625));
        let rect = Rect {
            x0: 0.3,
            y0: 1.1,
            x1: 6.2,
            y1: 4.9,
        };
        let out = g.roi_align(zv, rect, (3, 4), 2).unwrap();
        assert!(g.value(out).data().iter().all(|v| (v - 0.625).abs() < 1e-12));
    }

    #[test]
    fn roi_center_of_2x2_is_the_four_point_average() {
        let z = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let zv = g.input(z);
        let rect = Rect {
            x0: 0.0,
            y0: 0.0,
            x1: 2.0,
            y1: 2.0,
        };
        let out = g.roi_align(zv, rect, (1, 1), 1).unwrap();
        assert!((g.value(out).data()[0] - 2.5f64).abs() < 1e-12);
    }

    #[test]
    fn roi_matches_brute_force_bilinear_on_random_boxes() {
        // Independent nested-loop reimplementation of the sampling rule:
        // bins split the box evenly, samples sit at sub-bin centers, taps
        // are bilinear around the half-pixel-shifted continuous coordinate.
        fn oracle(z: &Tensor<f64>, rect: (f64, f64, f64, f64), grid: (usize, usize), s: usize) -> Tensor<f64> {
            let (c, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
            let (x0, y0, x1, y1) = rect;
            let (gh, gw) = grid;
            let bh = (y1 - y0) / gh as f64;
            let bw = (x1 - x0) / gw as f64;
            let mut out = Tensor::zeros(&[c, gh, gw]);
            for gy in 0..gh {
                for gx in 0..gw {
                    for sy in 0..s {
                        for sx in 0..s {
                            let y = y0 + (gy as f64 + (sy as f64 + 0.5) / s as f64) * bh;
                            let x = x0 + (gx as f64 + (sx as f64 + 0.5) / s as f64) * bw;
                            let yc = (y - 0.5).clamp(0.0, (h - 1) as f64);
                            let xc = (x - 0.5).clamp(0.0, (w - 1) as f64);
                            let iy = (yc.floor() as usize).min(h - 1);
                            let ix = (xc.floor() as usize).min(w - 1);
                            let iy1 = (iy + 1).min(h - 1);
                            let ix1 = (ix + 1).min(w - 1);
                            let fy = yc - iy as f64;
                            let fx = xc - ix as f64;
                            for ci in 0..c {
                                let at = |yy: usize, xx: usize| z.data()[ci * h * w + yy * w + xx];
                                let v = at(iy, ix) * (1.0 - fy) * (1.0 - fx)
                                    + at(iy, ix1) * (1.0 - fy) * fx
                                    + at(iy1, ix) * fy * (1.0 - fx)
                                    + at(iy1, ix1) * fy * fx;
                                out.data_mut()[ci * gh * gw + gy * gw + gx] +=
                                    v / (s * s) as f64;
                            }
                        }
                    }
                }
            }
            out
        }

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = Tensor::<f64>::randn(&[2, 8, 8], &mut rng);
        for trial in 0..200 {
            let x0 = rng.gen::<f64>() * 6.0;
            let y0 = rng.gen::<f64>() * 6.0;
            let x1 = x0 + 0.3 + rng.gen::<f64>() * (8.0 - x0 - 0.3);
            let y1 = y0 + 0.3 + rng.gen::<f64>() * (8.0 - y0 - 0.3);
            let grid = (1 + trial % 4, 1 + (trial / 4) % 4);
            let s = 1 + trial % 3;
            let mut g = Graph::new();
            let zv = g.input(z.clone());
            let out = g
                .roi_align(zv, Rect { x0, y0, x1, y1 }, grid, s)
                .unwrap();
            let want = oracle(&z, (x0, y0, x1, y1), grid, s);
            assert!(
                g.value(out).max_abs_diff(&want) <= 1e-5,
                "trial {trial}: deviation {}",
                g.value(out).max_abs_diff(&want)
            );
        }
    }

    #[test]
    fn roi_rejects_degenerate_boxes() {
        let mut g = Graph::<f64>::new();
        let zv = g.input(Tensor::zeros(&[1, 4, 4]));
        let rect = Rect {
            x0: 2.0,
            y0: 1.0,
            x1: 2.0,
            y1: 3.0,
        };
        assert!(g.roi_align(zv, rect, (2, 2), 1).is_err());
    }

    #[test]
    fn slot_cross_entropy_hits_the_closed_forms() {
        // One-hot correct logits drive the loss to zero; uniform logits give
        // exactly ln(n_classes).
        let n_classes = 6;
        let mut g = Graph::<f64>::new();
        let mut hot = Tensor::zeros(&[3, n_classes]);
        for (slot, &t) in [2usize, 0, 5].iter().enumerate() {
            hot.data_mut()[slot * n_classes + t] = 60.0;
        }
        let lv = g.input(hot);
        let loss = g.cross_entropy_mean(lv, &[2, 0, 5]).unwrap();
        assert!(g.value(loss).data()[0].abs() < 1e-6);

        let uv = g.input(Tensor::full(&[3, n_classes], 0.7));
        let loss = g.cross_entropy_mean(uv, &[1, 1, 4]).unwrap();
        assert!((g.value(loss).data()[0] - (n_classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_word_loss_matches_a_scalar_oracle() {
        // Hand-set logits for two words of three slots each; the oracle is
        // plain scalar log-softmax arithmetic. Averaging per-word CE means
        // equals the global mean because every word has the same slot count.
        let logits_a = vec![1.0, -0.5, 0.25, 0.0, 2.0, -1.0, 0.5, 0.5, 0.5];
        let logits_b = vec![-2.0, 0.1, 0.3, 1.5, -0.4, 0.2, 0.0, 0.0, 3.0];
        let targets_a = [0usize, 1, 2];
        let targets_b = [2usize, 0, 1];

        let mut oracle = 0.0f64;
        for (row, (&t, chunk)) in targets_a
            .iter()
            .zip(logits_a.chunks(3))
            .chain(targets_b.iter().zip(logits_b.chunks(3)))
            .enumerate()
        {
            let _ = row;
            let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = chunk.iter().map(|v| (v - m).exp()).sum();
            oracle += -(chunk[t] - m - z.ln());
        }
        oracle /= 6.0;

        let mut g = Graph::<f64>::new();
        let la = g.input(Tensor::from_vec(&[3, 3], logits_a).unwrap());
        let lb = g.input(Tensor::from_vec(&[3, 3], logits_b).unwrap());
        let ca = g.cross_entropy_mean(la, &targets_a).unwrap();
        let cb = g.cross_entropy_mean(lb, &targets_b).unwrap();
        let sum = g.add(ca, cb).unwrap();
        let mean = g.scale(sum, 0.5).unwrap();
        assert!((g.value(mean).data()[0] - oracle).abs() < 1e-6);
    }

    #[test]
    fn recog_loss_runs_and_averages_over_text_regions() {
        let nets = small_nets();
        let charset = Charset::new("ab".chars()).unwrap();
        let params = nets.init::<f64>(3);
        let mut g = Graph::new();
        let vars = bind_all(&mut g, &params);
        let z = g.input(Tensor::randn(
            &[4, 6, 6],
            &mut ChaCha8Rng::seed_from_u64(4),
        ));
        let regions = vec![
            Region {
                bounds: LatentBox {
                    x0: 0.5,
                    y0: 0.5,
                    x1: 3.0,
                    y1: 2.0,
                },
                label: RegionLabel::Text("ab".into()),
            },
            Region {
                bounds: LatentBox {
                    x0: 2.0,
                    y0: 3.0,
                    x1: 5.5,
                    y1: 5.0,
                },
                label: RegionLabel::Logo(1),
            },
            Region {
                bounds: LatentBox {
                    x0: 1.0,
                    y0: 2.5,
                    x1: 4.0,
                    y1: 4.5,
                },
                label: RegionLabel::Text("ba".into()),
            },
        ];
        let (loss, n) = recog_loss(&mut g, &nets, &vars, z, &regions, &charset).unwrap();
        assert_eq!(n, 2, "logo region must not count as text");
        let v = g.value(loss).data()[0];
        assert!(v.is_finite() && v > 0.0);
        g.backward(loss).unwrap();
        assert!(g.grad(vars["aux.recog.queries"]).is_some());
    }

    #[test]
    fn empty_region_list_gives_flagged_zero() {
        let nets = small_nets();
        let charset = Charset::new("ab".chars()).unwrap();
        let params = nets.init::<f64>(3);
        let mut g = Graph::new();
        let vars = bind_all(&mut g, &params);
        let z = g.input(Tensor::zeros(&[4, 6, 6]));
        let (loss, n) = recog_loss(&mut g, &nets, &vars, z, &[], &charset).unwrap();
        assert_eq!(n, 0);
        assert_eq!(g.value(loss).data()[0], 0.0);
        let (loss, n) = logo_loss(&mut g, &nets, &vars, z, &[]).unwrap();
        assert_eq!(n, 0);
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn logo_loss_is_single_label_per_roi() {
        let nets = small_nets();
        let params = nets.init::<f64>(5);
        let mut g = Graph::new();
        let vars = bind_all(&mut g, &params);
        let z = g.input(Tensor::randn(
            &[4, 6, 6],
            &mut ChaCha8Rng::seed_from_u64(6),
        ));
        let regions = vec![
            Region {
                bounds: LatentBox {
                    x0: 0.5,
                    y0: 0.5,
                    x1: 3.0,
                    y1: 2.0,
                },
                label: RegionLabel::Logo(0),
            },
            Region {
                bounds: LatentBox {
                    x0: 2.0,
                    y0: 3.0,
                    x1: 5.0,
                    y1: 5.5,
                },
                label: RegionLabel::Logo(1),
            },
        ];
        let (loss, n) = logo_loss(&mut g, &nets, &vars, z, &regions).unwrap();
        assert_eq!(n, 2);
        assert!(g.value(loss).data()[0].is_finite());

        let bad = vec![Region {
            bounds: LatentBox {
                x0: 0.5,
                y0: 0.5,
                x1: 3.0,
                y1: 2.0,
            },
            label: RegionLabel::Logo(9),
        }];
        assert!(logo_loss(&mut g, &nets, &vars, z, &bad).is_err());
    }

    #[test]
    fn logo_head_is_exactly_one_linear_layer() {
        let nets = small_nets();
        let logo_params: Vec<String> = nets
            .param_specs()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("aux.logo."))
            .collect();
        assert_eq!(logo_params, vec!["aux.logo.w".to_string(), "aux.logo.b".to_string()]);
    }

    #[test]
    fn supervision_gradients_reach_the_latent() {
        // Central finite differences on the latent itself, through RoI
        // pooling, the encoder, both heads, and cross-entropy. This is the
        // channel by which recognition feedback steers the denoiser.
        let nets = small_nets();
        let charset = Charset::new("ab".chars()).unwrap();
        let params = nets.init::<f64>(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z0 = Tensor::<f64>::randn(&[4, 6, 6], &mut rng);
        let regions = vec![
            Region {
                bounds: LatentBox {
                    x0: 0.4,
                    y0: 0.7,
                    x1: 3.2,
                    y1: 2.9,
                },
                label: RegionLabel::Text("ba".into()),
            },
            Region {
                bounds: LatentBox {
                    x0: 2.1,
                    y0: 3.0,
                    x1: 5.3,
                    y1: 5.6,
                },
                label: RegionLabel::Logo(1),
            },
        ];

        let err = max_rel_error_fd(&[z0.clone()], 1e-5, |g, vars| {
            let bound = bind_all(g, &params);
            let (r, _) = recog_loss(g, &nets, &bound, vars[0], &regions, &charset)?;
            let (l, _) = logo_loss(g, &nets, &bound, vars[0], &regions)?;
            g.add(r, l)
        });
        assert!(err < 1e-3, "latent gradient rel err {err}");
    }
}
