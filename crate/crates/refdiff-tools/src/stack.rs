//! The runtime bundle a run operates on: architecture objects, codec,
//! charset, and the weight maps, all derived deterministically from a
//! `RunConfig` and a seed.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refdiff_core::auxiliary::{AuxNets, Charset};
use refdiff_core::codec::{Codec, PatchifyCodec};
use refdiff_core::condition::ReferenceCondition;
use refdiff_core::graph::Graph;
use refdiff_core::guidance::{ddim_sample, DenoiserSource, GuidanceConfig, SampleResult};
use refdiff_core::lora::ExpertPlugin;
use refdiff_core::network::Denoiser;
use refdiff_core::render::{charset_for, logo_name};
use refdiff_core::rng::child_seed;
use refdiff_core::schedule::NoiseSchedule;
use refdiff_core::tensor::Tensor;
use refdiff_core::text::{TextEncoder, Vocab};
use refdiff_core::trainer::{TrainScope, Trainer};

use crate::config::RunConfig;
use crate::error::{Result, ToolError};

const SEED_BASE: u64 = 1;
const SEED_AUX: u64 = 2;
const SEED_TEXT: u64 = 3;
const SEED_PLUGIN: u64 = 4;

/// Caption-template words that appear in every generated caption.
const TEMPLATE_WORDS: &[&str] = &["a", "sign", "that", "says", "and", "with", "the", "logo"];

/// Longest content word enumerated into the vocabulary. Captions quoting
/// longer words tokenize to the unknown id; generation then leans entirely
/// on the reference channels, which is the regime under study anyway.
const VOCAB_WORD_CAP: usize = 2;

pub struct ModelStack {
    pub config: RunConfig,
    pub seed: u64,
    pub denoiser: Denoiser,
    pub aux: AuxNets,
    pub text: TextEncoder<f32>,
    pub charset: Charset,
    pub schedule: NoiseSchedule<f32>,
    pub codec: Codec<f32>,
    pub base: BTreeMap<String, Tensor<f32>>,
    pub aux_params: BTreeMap<String, Tensor<f32>>,
    pub plugin: ExpertPlugin<f32>,
    pub step: usize,
}

/// Every word a caption under this config can contain, template words
/// first, then logo names, then charset words up to the enumeration cap.
pub fn build_vocab(config: &RunConfig) -> Result<Vocab> {
    let charset = charset_for(&config.data.scripts)?;
    let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
    for id in 0..config.data.n_logos {
        words.push(logo_name(id));
    }
    let chars: Vec<String> = charset
        .chars()
        .iter()
        .filter(|c| **c != '\0')
        .map(|c| c.to_lowercase().collect::<String>())
        .collect();
    let cap = config.data.max_word_len.min(VOCAB_WORD_CAP);
    let mut content: BTreeSet<String> = BTreeSet::new();
    if cap >= 1 {
        content.extend(chars.iter().cloned());
    }
    if cap >= 2 {
        for a in &chars {
            for b in &chars {
                content.insert(format!("{a}{b}"));
            }
        }
    }
    words.extend(content);
    Ok(Vocab::build(words.iter().map(|w| w.as_str())))
}

impl ModelStack {
    pub fn init(config: RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = config.latent_spec();
        let codec = Codec::Patchify(PatchifyCodec::new(spec, config.latent.gain)?);
        let schedule = NoiseSchedule::new(&config.schedule_config())?;
        let charset = charset_for(&config.data.scripts)?;
        let denoiser = Denoiser::new(config.network_config(), spec, config.model.text.dim)?;
        let aux = AuxNets::new(
            config.aux_config(),
            spec.c,
            charset.n_classes(),
            config.data.n_logos,
        )?;
        let vocab = build_vocab(&config)?;
        let text = TextEncoder::new(vocab, config.text_config(), child_seed(seed, SEED_TEXT))?;
        let base = denoiser.init_base(child_seed(seed, SEED_BASE));
        let aux_params = aux.init(child_seed(seed, SEED_AUX));
        let plugin = ExpertPlugin::init(
            &denoiser.param_specs(),
            &config.lora_config(),
            child_seed(seed, SEED_PLUGIN),
        )?;
        Ok(ModelStack {
            config,
            seed,
            denoiser,
            aux,
            text,
            charset,
            schedule,
            codec,
            base,
            aux_params,
            plugin,
            step: 0,
        })
    }

    pub fn trainer(&self) -> Result<Trainer<f32>> {
        let trainer = Trainer::new(
            self.denoiser.clone(),
            self.aux.clone(),
            self.text.clone(),
            self.charset.clone(),
            self.schedule.clone(),
            self.config.trainer_config(),
            self.base.clone(),
            self.plugin.clone(),
            self.aux_params.clone(),
        )?;
        Ok(trainer)
    }

    /// Copy trained state back after a training run.
    pub fn adopt(&mut self, trainer: &Trainer<f32>) {
        self.base = trainer.base().clone();
        self.plugin = trainer.plugin().clone();
        self.aux_params = trainer.aux_params().clone();
        self.step += trainer.steps_taken();
    }

    /// The weight map sampling should run under: the plugin merged over the
    /// frozen base in adapter scope, the trained base itself in full scope.
    pub fn sampling_weights(&self) -> Result<BTreeMap<String, Tensor<f32>>> {
        match self.config.losses.scope {
            TrainScope::Adapter => Ok(self.plugin.apply(&self.base)?),
            TrainScope::Full => Ok(self.base.clone()),
        }
    }

    /// Encode a caption outside any training graph.
    pub fn encode_text(&self, prompt: &str) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = self.text.encode_prompt(&mut g, prompt)?;
        Ok(g.value(v).clone())
    }

    pub fn sampler(&self) -> Result<Sampler<'_>> {
        Ok(Sampler {
            stack: self,
            weights: self.sampling_weights()?,
            text_null: self.encode_text("")?,
        })
    }
}

/// A ready-to-run sampler holding the merged weight map once, so batches of
/// images do not re-merge per call.
pub struct Sampler<'a> {
    stack: &'a ModelStack,
    weights: BTreeMap<String, Tensor<f32>>,
    text_null: Tensor<f32>,
}

impl Sampler<'_> {
    /// Generate one image. Returns the pixel image clamped to `[0, 1]`
    /// together with the raw latent and the per-step guidance trace.
    pub fn sample(
        &self,
        caption: &str,
        reference: Option<&ReferenceCondition<f32>>,
        guidance: &GuidanceConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<f32>, SampleResult<f32>)> {
        let stack = self.stack;
        if stack.config.model.inpaint {
            return Err(ToolError::Config(
                "sampling with an inpainting network needs a source image, which the \
                 generation harness does not take"
                    .into(),
            ));
        }
        let mut source = DenoiserSource {
            net: &stack.denoiser,
            weights: &self.weights,
            text_cond: stack.encode_text(caption)?,
            text_null: self.text_null.clone(),
            reference,
            masked_source: None,
        };
        let spec = stack.codec.spec();
        let result = ddim_sample(
            &mut source,
            &stack.schedule,
            &[spec.c, spec.h, spec.w],
            stack.config.sampler.steps,
            stack.config.sampler.eta,
            guidance,
            rng,
        )?;
        let mut image = stack.codec.decode(&result.z0)?;
        for v in image.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok((image, result))
    }

    /// Seeded convenience wrapper: one image per (seed, index).
    pub fn sample_indexed(
        &self,
        caption: &str,
        reference: Option<&ReferenceCondition<f32>>,
        guidance: &GuidanceConfig,
        seed: u64,
        index: u64,
    ) -> Result<(Tensor<f32>, SampleResult<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, index));
        self.sample(caption, reference, guidance, &mut rng)
    }
}
