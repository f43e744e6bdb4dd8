//! Recognition backend contract and the default frozen recognizer.
//!
//! The default backend is the auxiliary encoder plus heads trained
//! standalone on ground-truth rendered images, never on generated ones, so
//! the grader shares no weights with the model being graded. External OCR
//! services plug in through the same trait.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refdiff_core::auxiliary::{logo_loss, recog_loss, to_rect, AuxNets, Charset};
use refdiff_core::codec::Codec;
use refdiff_core::condition::{LatentBox, Region, RegionLabel};
use refdiff_core::graph::Graph;
use refdiff_core::network::bind_params;
use refdiff_core::render::PixelBox;
use refdiff_core::rng::child_seed;
use refdiff_core::tensor::Tensor;
use refdiff_core::trainer::{AdamW, AdamWConfig};

use crate::error::{Result, ToolError};
use crate::stack::ModelStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    Text,
    Logo,
}

/// A region the caller wants read, in pixel coordinates.
#[derive(Debug, Clone)]
pub struct RegionQuery {
    pub bounds: PixelBox,
    pub kind: RegionKind,
}

impl RegionQuery {
    pub fn for_label(bounds: PixelBox, label: &RegionLabel) -> Self {
        let kind = match label {
            RegionLabel::Text(_) => RegionKind::Text,
            RegionLabel::Logo(_) => RegionKind::Logo,
        };
        RegionQuery { bounds, kind }
    }
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub bounds: PixelBox,
    pub label: RegionLabel,
    pub confidence: f64,
}

pub trait OcrBackend {
    /// Read the given regions of an RGB image in `[0, 1]`. Without region
    /// hints the whole image is treated as one text region.
    fn recognize(
        &self,
        image: &Tensor<f32>,
        regions: Option<&[RegionQuery]>,
    ) -> Result<Vec<Detection>>;

    /// Pooled deep features of the whole image, the representation under
    /// the Fréchet distribution metric.
    fn features(&self, image: &Tensor<f32>) -> Result<Vec<f64>>;
}

/// The deterministic default backend: a frozen recognizer checkpoint.
pub struct FrozenRecognizer {
    aux: AuxNets,
    params: BTreeMap<String, Tensor<f32>>,
    charset: Charset,
    codec: Codec<f32>,
}

impl FrozenRecognizer {
    pub fn new(
        aux: AuxNets,
        params: BTreeMap<String, Tensor<f32>>,
        charset: Charset,
        codec: Codec<f32>,
    ) -> Self {
        FrozenRecognizer {
            aux,
            params,
            charset,
            codec,
        }
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    fn read_text(
        &self,
        g: &mut Graph<f32>,
        vars: &BTreeMap<String, refdiff_core::graph::Var>,
        tokens: refdiff_core::graph::Var,
    ) -> Result<(String, f64)> {
        let logits_var = self.aux.recog_logits(g, vars, tokens)?;
        let probs_var = g.softmax_rows(logits_var)?;
        let probs = g.value(probs_var);
        let [slots, classes] = probs.shape() else {
            return Err(ToolError::Numeric("recognition logits are not 2-d".into()));
        };
        let (slots, classes) = (*slots, *classes);
        let mut ids = Vec::with_capacity(slots);
        let mut conf = 0.0;
        for s in 0..slots {
            let row = &probs.data()[s * classes..(s + 1) * classes];
            let (best, p) = argmax(row);
            ids.push(best);
            conf += p;
        }
        Ok((self.charset.decode_slots(&ids), conf / slots as f64))
    }

    fn read_logo(
        &self,
        g: &mut Graph<f32>,
        vars: &BTreeMap<String, refdiff_core::graph::Var>,
        tokens: refdiff_core::graph::Var,
    ) -> Result<(usize, f64)> {
        let logits_var = self.aux.logo_logits(g, vars, tokens)?;
        let probs_var = g.softmax_rows(logits_var)?;
        let probs = g.value(probs_var);
        let (best, p) = argmax(probs.data());
        Ok((best, p))
    }
}

fn argmax(row: &[f32]) -> (usize, f64) {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    (best, row[best] as f64)
}

impl OcrBackend for FrozenRecognizer {
    fn recognize(
        &self,
        image: &Tensor<f32>,
        regions: Option<&[RegionQuery]>,
    ) -> Result<Vec<Detection>> {
        let spec = self.codec.spec();
        let (_, ph, pw) = spec.pixel_shape();
        let whole = [RegionQuery {
            bounds: PixelBox {
                x0: 0,
                y0: 0,
                x1: pw,
                y1: ph,
            },
            kind: RegionKind::Text,
        }];
        let queries = regions.unwrap_or(&whole);
        let z0 = self.codec.encode(image)?;
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &self.params, &BTreeSet::new());
        let z = g.input(z0);
        let scale = spec.scale as f64;
        let mut out = Vec::with_capacity(queries.len());
        for q in queries {
            let lbox = LatentBox {
                x0: q.bounds.x0 as f64 / scale,
                y0: q.bounds.y0 as f64 / scale,
                x1: q.bounds.x1 as f64 / scale,
                y1: q.bounds.y1 as f64 / scale,
            };
            let cfg = self.aux.config();
            let pooled = g.roi_align(z, to_rect::<f32>(&lbox), cfg.roi, cfg.sampling)?;
            let tokens = self.aux.encode_roi(&mut g, &vars, pooled)?;
            let (label, confidence) = match q.kind {
                RegionKind::Text => {
                    let (word, conf) = self.read_text(&mut g, &vars, tokens)?;
                    (RegionLabel::Text(word), conf)
                }
                RegionKind::Logo => {
                    let (id, conf) = self.read_logo(&mut g, &vars, tokens)?;
                    (RegionLabel::Logo(id), conf)
                }
            };
            out.push(Detection {
                bounds: q.bounds,
                label,
                confidence,
            });
        }
        Ok(out)
    }

    fn features(&self, image: &Tensor<f32>) -> Result<Vec<f64>> {
        let spec = self.codec.spec();
        let z0 = self.codec.encode(image)?;
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &self.params, &BTreeSet::new());
        let z = g.input(z0);
        let full = LatentBox {
            x0: 0.0,
            y0: 0.0,
            x1: spec.w as f64,
            y1: spec.h as f64,
        };
        let cfg = self.aux.config();
        let pooled = g.roi_align(z, to_rect::<f32>(&full), cfg.roi, cfg.sampling)?;
        let tokens = self.aux.encode_roi(&mut g, &vars, pooled)?;
        let t = g.value(tokens);
        let [n, d] = t.shape() else {
            return Err(ToolError::Numeric("encoder tokens are not 2-d".into()));
        };
        let (n, d) = (*n, *d);
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += t.data()[i * d + j] as f64 / n as f64;
            }
        }
        Ok(mean)
    }
}

#[derive(Debug, Clone)]
pub struct RecognizerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

/// One training item: a clean latent with its labeled regions.
#[derive(Debug, Clone)]
pub struct RecognizerSample {
    pub z0: Tensor<f32>,
    pub regions: Vec<Region>,
}

const SEED_RECOG: u64 = 5;

/// Train recognition and logo heads from scratch on clean latents.
///
/// Supervision is cross-entropy on ground-truth regions only; the loop
/// never sees model output. Returns the trained parameter map for
/// [`FrozenRecognizer`].
pub fn train_recognizer(
    aux: &AuxNets,
    charset: &Charset,
    samples: &[RecognizerSample],
    cfg: &RecognizerTrainConfig,
    seed: u64,
) -> Result<BTreeMap<String, Tensor<f32>>> {
    if samples.is_empty() {
        return Err(ToolError::Config(
            "recognizer training needs at least one sample".into(),
        ));
    }
    if cfg.batch == 0 {
        return Err(ToolError::Config("recognizer batch must be positive".into()));
    }
    let mut params: BTreeMap<String, Tensor<f32>> = aux.init(child_seed(seed, SEED_RECOG));
    let trainable: BTreeSet<String> = params.keys().cloned().collect();
    let mut opt: AdamW<f32> = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, SEED_RECOG + 1));
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &params, &trainable);
        let mut fold: Option<(refdiff_core::graph::Var, usize)> = None;
        for _ in 0..cfg.batch {
            let sample = &samples[rng.gen_range(0..samples.len())];
            let z = g.input(sample.z0.clone());
            let (text_term, text_n) = recog_loss(&mut g, aux, &vars, z, &sample.regions, charset)?;
            let (logo_term, logo_n) = logo_loss(&mut g, aux, &vars, z, &sample.regions)?;
            for (term, n) in [(text_term, text_n), (logo_term, logo_n)] {
                if n == 0 {
                    continue;
                }
                let scaled = g.scale(term, n as f32)?;
                fold = Some(match fold {
                    Some((acc, total)) => (g.add(acc, scaled)?, total + n),
                    None => (scaled, n),
                });
            }
        }
        let Some((sum, total)) = fold else {
            continue; // a batch with no labeled regions teaches nothing
        };
        let loss = g.scale(sum, 1.0 / total as f32)?;
        let loss_value = g.value(loss).data()[0];
        if std::env::var_os("RECOG_TRACE").is_some() && step % 20 == 0 {
            eprintln!("recog step {step}: loss {loss_value}");
        }
        if !loss_value.is_finite() {
            return Err(ToolError::Numeric(format!(
                "recognizer loss became non-finite at step {step}"
            )));
        }
        g.backward(loss)?;
        opt.begin_step();
        for (name, var) in &vars {
            if let Some(grad) = g.grad(*var) {
                let grad = grad.clone();
                let param = params.get_mut(name).expect("bound params exist");
                opt.apply(name, param, &grad)?;
            }
        }
    }
    Ok(params)
}

/// Convenience constructor: train the backend from a stack's geometry and a
/// list of ground-truth samples.
pub fn frozen_backend_from(
    stack: &ModelStack,
    samples: &[RecognizerSample],
    seed: u64,
) -> Result<FrozenRecognizer> {
    let cfg = RecognizerTrainConfig {
        steps: stack.config.eval.recognizer_steps,
        batch: stack.config.eval.recognizer_batch,
        lr: stack.config.eval.recognizer_lr,
    };
    let params = train_recognizer(&stack.aux, &stack.charset, samples, &cfg, seed)?;
    Ok(FrozenRecognizer::new(
        stack.aux.clone(),
        params,
        stack.charset.clone(),
        stack.codec.clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::stack::ModelStack;
    use refdiff_core::render::{generate_sample, to_train_sample, FontBook};

    fn tiny_stack() -> ModelStack {
        let config = parse_config(
            "
            [data]
            width = 24
            height = 24
            min_glyph_h = 8
            max_glyph_h = 12
            max_word_len = 1
            [model]
            width = 16
            width2 = 16
            attn_dim = 16
            time_dim = 8
            time_hidden = 16
            groups = 4
            [model.text]
            dim = 16
            layers = 1
            max_tokens = 8
            [model.aux]
            width = 32
            groups = 8
            word_len = 2
            roi = [4, 4]
            sampling = 2
            [lora]
            rank = 2
            [eval]
            recognizer_steps = 1200
            recognizer_lr = 0.001
            recognizer_batch = 8
            ",
            &[],
        )
        .unwrap();
        ModelStack::init(config, 50).unwrap()
    }

    fn ground_truth(stack: &ModelStack, n: u64) -> Vec<(RecognizerSample, Vec<(PixelBox, RegionLabel)>)> {
        let fonts = FontBook::builtin();
        let mut out = Vec::new();
        for i in 0..n {
            let (_, sample) =
                generate_sample::<f32>(&stack.config.synth_config(), &fonts, 900, i).unwrap();
            let ts = to_train_sample(&sample, &stack.codec).unwrap();
            out.push((
                RecognizerSample {
                    z0: ts.z0,
                    regions: ts.reference.regions.clone(),
                },
                sample.regions.clone(),
            ));
        }
        out
    }

    #[test]
    fn untrained_heads_read_mostly_garbage_and_trained_heads_do_not() {
        let stack = tiny_stack();
        let data = ground_truth(&stack, 360);
        let train: Vec<RecognizerSample> = data.iter().map(|(s, _)| s.clone()).collect();
        let backend = frozen_backend_from(&stack, &train, 60).unwrap();

        let fonts = FontBook::builtin();
        let mut hits = 0;
        let mut total = 0;
        for i in 100..130u64 {
            let (_, sample) =
                generate_sample::<f32>(&stack.config.synth_config(), &fonts, 900, i).unwrap();
            let queries: Vec<RegionQuery> = sample
                .regions
                .iter()
                .map(|(b, l)| RegionQuery::for_label(*b, l))
                .collect();
            let dets = backend.recognize(&sample.image, Some(&queries)).unwrap();
            for (det, (_, label)) in dets.iter().zip(&sample.regions) {
                total += 1;
                if &det.label == label {
                    hits += 1;
                }
                assert!((0.0..=1.0).contains(&det.confidence));
            }
        }
        assert!(total >= 25, "only {total} eval regions");
        let acc = hits as f64 / total as f64;
        assert!(acc >= 0.9, "held-out loop-back accuracy {acc} below 0.9");
    }

    #[test]
    fn recognition_is_deterministic() {
        let stack = tiny_stack();
        let data = ground_truth(&stack, 8);
        let train: Vec<RecognizerSample> = data.iter().map(|(s, _)| s.clone()).collect();
        let cfg = RecognizerTrainConfig {
            steps: 5,
            batch: 2,
            lr: 1e-3,
        };
        let a = train_recognizer(&stack.aux, &stack.charset, &train, &cfg, 7).unwrap();
        let b = train_recognizer(&stack.aux, &stack.charset, &train, &cfg, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn whole_image_fallback_reads_one_region() {
        let stack = tiny_stack();
        let data = ground_truth(&stack, 4);
        let train: Vec<RecognizerSample> = data.iter().map(|(s, _)| s.clone()).collect();
        let cfg = RecognizerTrainConfig {
            steps: 2,
            batch: 2,
            lr: 1e-3,
        };
        let params = train_recognizer(&stack.aux, &stack.charset, &train, &cfg, 7).unwrap();
        let backend = FrozenRecognizer::new(
            stack.aux.clone(),
            params,
            stack.charset.clone(),
            stack.codec.clone(),
        );
        let fonts = FontBook::builtin();
        let (_, sample) =
            generate_sample::<f32>(&stack.config.synth_config(), &fonts, 900, 0).unwrap();
        let dets = backend.recognize(&sample.image, None).unwrap();
        assert_eq!(dets.len(), 1);
        assert!(matches!(dets[0].label, RegionLabel::Text(_)));
    }
}
