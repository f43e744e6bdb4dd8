//! The combined training objective and loop: noise-prediction reconstruction
//! with per-sample synthetic scaling, the auxiliary recognition and logo
//! losses, and an AdamW step over exactly the adapter, input-extension, and
//! auxiliary parameters. The frozen base never receives a gradient.
//!
//! Each step builds one graph over the whole batch. Merged adapter weights
//! enter as gradient leaves; after backward the merged-weight gradients are
//! converted to factor-pair gradients with [`crate::lora::grad_to_pair`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::auxiliary::{logo_loss, recog_loss, AuxNets, Charset};
use crate::condition::{sample_condition_dropout, ReferenceCondition};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::lora::{grad_to_pair, ExpertPlugin};
use crate::network::{bind_params, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Scalar, Tensor};
use crate::text::TextEncoder;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda_diff: f64,
    pub lambda_recog: f64,
    pub lambda_logo: f64,
    /// Scale on the reconstruction term of synthetic samples.
    pub alpha_synth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_diff: 1.0,
            lambda_recog: 0.025,
            lambda_logo: 0.025,
            alpha_synth: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_diff < 0.0 || self.lambda_recog < 0.0 || self.lambda_logo < 0.0 {
            return Err(CoreError::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if !(self.alpha_synth > 0.0 && self.alpha_synth <= 1.0) {
            return Err(CoreError::InvalidConfig(
                "alpha_synth must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Mean squared error over all elements.
pub fn diff_loss<T: Scalar>(eps_true: &Tensor<T>, eps_pred: &Tensor<T>) -> Result<T> {
    let d = eps_true.sub(eps_pred)?;
    let n = T::from_f64(d.numel() as f64);
    Ok(d.dot(&d)? / n)
}

/// Batch mean of per-sample [`diff_loss`] terms.
pub fn diff_loss_batch<T: Scalar>(
    eps_true: &[Tensor<T>],
    eps_pred: &[Tensor<T>],
) -> Result<T> {
    if eps_true.len() != eps_pred.len() || eps_true.is_empty() {
        return Err(CoreError::ShapeMismatch("empty or mismatched batch".into()));
    }
    let mut acc = T::zero();
    for (a, b) in eps_true.iter().zip(eps_pred) {
        acc = acc + diff_loss(a, b)?;
    }
    Ok(acc / T::from_f64(eps_true.len() as f64))
}

/// Batch mean with synthetic samples' terms multiplied by `alpha_synth`.
/// Real samples pass through untouched, so an all-real batch reproduces
/// [`diff_loss_batch`] bit for bit.
pub fn diff_loss_scaled<T: Scalar>(
    eps_true: &[Tensor<T>],
    eps_pred: &[Tensor<T>],
    is_synthetic: &[bool],
    alpha_synth: f64,
) -> Result<T> {
    if eps_true.len() != is_synthetic.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} samples but {} synthetic flags",
            eps_true.len(),
            is_synthetic.len()
        )));
    }
    if eps_true.len() != eps_pred.len() || eps_true.is_empty() {
        return Err(CoreError::ShapeMismatch("empty or mismatched batch".into()));
    }
    let alpha = T::from_f64(alpha_synth);
    let mut acc = T::zero();
    for ((a, b), &synth) in eps_true.iter().zip(eps_pred).zip(is_synthetic) {
        let term = diff_loss(a, b)?;
        acc = acc + if synth { alpha * term } else { term };
    }
    Ok(acc / T::from_f64(eps_true.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Decoupled-weight-decay Adam over named tensors.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: usize,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Update one parameter in place. Moments are created lazily.
    pub fn apply(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "optimizer {name}: param {:?} vs grad {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        let wd = T::from_f64(c.weight_decay);
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let m = self
            .m
            .entry(name.into())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.into())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let one = T::one();
        for i in 0..param.numel() {
            let g = grad.data()[i];
            let mi = b1 * m.data()[i] + (one - b1) * g;
            let vi = b2 * v.data()[i] + (one - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let p = param.data()[i];
            param.data_mut()[i] = p - lr * (mhat / (vhat.sqrt() + eps) + wd * p);
        }
        Ok(())
    }
}

/// Which parameters the optimizer touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrainScope {
    /// Expert training: adapter pairs, input extensions, and auxiliary nets.
    /// The base stays bit-frozen.
    Adapter,
    /// Base training: every denoiser weight plus the auxiliary nets. The
    /// plugin is ignored; this is how a base checkpoint is produced in the
    /// first place.
    Full,
}

/// How logo supervision reaches the two interested parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LogoPath {
    /// Head trains on clean-latent RoIs; the denoiser receives gradient
    /// through a frozen head copy applied to the predicted latent.
    CleanHeadDenoisedGrad,
    /// One term on the predicted latent updates head and denoiser jointly.
    DenoisedOnly,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainerConfig {
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub scope: TrainScope,
    pub use_recog: bool,
    pub use_logo: bool,
    pub logo_path: LogoPath,
    /// Probability of dropping each of (text, reference), independently.
    pub dropout_p: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            scope: TrainScope::Adapter,
            use_recog: true,
            use_logo: false,
            logo_path: LogoPath::CleanHeadDenoisedGrad,
            dropout_p: 0.1,
        }
    }
}

/// Expert-plugin recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrainPreset {
    /// Recognition loss, no synthetic scaling.
    English,
    /// Recognition loss plus synthetic down-weighting.
    Mlt,
    /// Logo loss plus synthetic down-weighting.
    Logo,
}

impl TrainerConfig {
    pub fn preset(p: TrainPreset) -> Self {
        let mut cfg = TrainerConfig::default();
        match p {
            TrainPreset::English => {
                cfg.weights.alpha_synth = 1.0;
            }
            TrainPreset::Mlt => {}
            TrainPreset::Logo => {
                cfg.use_recog = false;
                cfg.use_logo = true;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(CoreError::InvalidConfig("dropout_p must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// One training example in latent space.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub z0: Tensor<T>,
    pub caption: String,
    pub reference: ReferenceCondition<T>,
    pub is_synthetic: bool,
}

/// Per-step log record. `loss_diff_scaled`, `loss_recog`, and `loss_logo`
/// recombine with the lambda weights to `loss_total`; the mean and sum
/// reconstruction conventions are both reported.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_diff_scaled: f64,
    pub loss_diff_mean: f64,
    pub loss_diff_sum: f64,
    pub loss_recog: f64,
    pub loss_logo: f64,
    pub lr: f64,
    pub text_regions: usize,
    pub logo_regions: usize,
    pub kept_both: usize,
    pub dropped_text_only: usize,
    pub dropped_ref_only: usize,
    pub dropped_both: usize,
}

/// FNV-1a over names and canonicalized element bits; for freeze checks and
/// registry fingerprints.
pub fn hash_params<T: Scalar>(params: &BTreeMap<String, Tensor<T>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for (name, t) in params {
        for b in name.bytes() {
            eat(b);
        }
        for d in t.shape() {
            for b in (*d as u64).to_le_bytes() {
                eat(b);
            }
        }
        for &v in t.data() {
            for b in v.to_f64().to_bits().to_le_bytes() {
                eat(b);
            }
        }
    }
    h
}

pub struct Trainer<T: Scalar> {
    pub denoiser: Denoiser,
    pub aux: AuxNets,
    pub text: TextEncoder<T>,
    pub charset: Charset,
    pub schedule: NoiseSchedule<T>,
    pub config: TrainerConfig,
    base: BTreeMap<String, Tensor<T>>,
    plugin: ExpertPlugin<T>,
    aux_params: BTreeMap<String, Tensor<T>>,
    opt: AdamW<T>,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        denoiser: Denoiser,
        aux: AuxNets,
        text: TextEncoder<T>,
        charset: Charset,
        schedule: NoiseSchedule<T>,
        config: TrainerConfig,
        base: BTreeMap<String, Tensor<T>>,
        plugin: ExpertPlugin<T>,
        aux_params: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        if charset.n_classes() != aux.n_classes() {
            return Err(CoreError::InvalidConfig(format!(
                "charset classes {} vs recognition head {}",
                charset.n_classes(),
                aux.n_classes()
            )));
        }
        let opt = AdamW::new(config.optimizer.clone());
        Ok(Trainer {
            denoiser,
            aux,
            text,
            charset,
            schedule,
            config,
            base,
            plugin,
            aux_params,
            opt,
            step: 0,
        })
    }

    pub fn base(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.base
    }

    pub fn plugin(&self) -> &ExpertPlugin<T> {
        &self.plugin
    }

    pub fn aux_params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.aux_params
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.opt
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Weights to sample with: plugin-merged under `Adapter` scope, the
    /// trained base itself under `Full` scope.
    pub fn effective_weights(&self) -> Result<BTreeMap<String, Tensor<T>>> {
        match self.config.scope {
            TrainScope::Adapter => self.plugin.apply(&self.base),
            TrainScope::Full => Ok(self.base.clone()),
        }
    }

    /// Restore mutable training state (for checkpoint resume).
    pub fn restore(
        &mut self,
        base: BTreeMap<String, Tensor<T>>,
        plugin: ExpertPlugin<T>,
        aux_params: BTreeMap<String, Tensor<T>>,
        step: usize,
    ) {
        self.base = base;
        self.plugin = plugin;
        self.aux_params = aux_params;
        self.step = step;
        self.opt = AdamW::new(self.config.optimizer.clone());
    }

    fn trainable_names(&self) -> BTreeSet<String> {
        self.plugin
            .adapter
            .pairs
            .keys()
            .chain(self.plugin.extensions.keys())
            .cloned()
            .collect()
    }

    /// One optimizer step over a batch. Consumes, per sample: one timestep
    /// draw, two dropout draws, then the noise tensor.
    pub fn train_step(
        &mut self,
        batch: &[TrainSample<T>],
        rng: &mut ChaCha8Rng,
    ) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(CoreError::InvalidConfig("empty training batch".into()));
        }
        let total_t = self.schedule.steps();
        let w = &self.config.weights;
        let c = self.denoiser.latent().c;
        let inv_n = 1.0 / batch.len() as f64;

        let mut g: Graph<T> = Graph::new();
        let (effective, trainable) = match self.config.scope {
            TrainScope::Adapter => (self.plugin.apply(&self.base)?, self.trainable_names()),
            TrainScope::Full => (
                self.base.clone(),
                self.base.keys().cloned().collect::<BTreeSet<String>>(),
            ),
        };
        let net_vars = bind_params(&mut g, &effective, &trainable);
        let aux_names: BTreeSet<String> = self.aux_params.keys().cloned().collect();
        let aux_vars = bind_params(&mut g, &self.aux_params, &aux_names);
        // Frozen copies for the logo path that must not update the head.
        let aux_frozen = if self.config.use_logo
            && self.config.logo_path == LogoPath::CleanHeadDenoisedGrad
        {
            Some(bind_params(&mut g, &self.aux_params, &BTreeSet::new()))
        } else {
            None
        };

        let mut diff_total: Option<Var> = None;
        let mut recog_terms: Vec<(Var, usize)> = Vec::new();
        let mut logo_terms: Vec<(Var, usize)> = Vec::new();
        let mut diff_means: Vec<f64> = Vec::new();
        let mut diff_sums: Vec<f64> = Vec::new();
        let mut ts: Vec<usize> = Vec::new();
        let mut metrics = StepMetrics {
            step: self.step,
            loss_total: 0.0,
            loss_diff_scaled: 0.0,
            loss_diff_mean: 0.0,
            loss_diff_sum: 0.0,
            loss_recog: 0.0,
            loss_logo: 0.0,
            lr: self.config.optimizer.lr,
            text_regions: 0,
            logo_regions: 0,
            kept_both: 0,
            dropped_text_only: 0,
            dropped_ref_only: 0,
            dropped_both: 0,
        };

        for sample in batch {
            let t = rng.gen_range(1..=total_t);
            ts.push(t);
            let drop = sample_condition_dropout(self.config.dropout_p, rng);
            match (drop.drop_text, drop.drop_ref) {
                (false, false) => metrics.kept_both += 1,
                (true, false) => metrics.dropped_text_only += 1,
                (false, true) => metrics.dropped_ref_only += 1,
                (true, true) => metrics.dropped_both += 1,
            }
            let eps = Tensor::<T>::randn(sample.z0.shape(), rng);
            let zt = self.schedule.q_sample(&sample.z0, &eps, t)?;
            let reference = if drop.drop_ref {
                None
            } else {
                Some(&sample.reference)
            };
            let x_host = if self.denoiser.config().inpaint {
                let masked = masked_latent(&sample.z0, &sample.reference.m)?;
                crate::condition::compose_inpaint_input(&zt, reference, &masked)?
            } else {
                crate::condition::compose_input(&zt, reference)?
            };
            let x = g.input(x_host);
            let prompt = if drop.drop_text { "" } else { &sample.caption };
            let feats = self.text.encode_prompt(&mut g, prompt)?;
            let eps_pred = self.denoiser.forward(&mut g, &net_vars, x, t, feats)?;

            // Per-sample reconstruction term, mean per element.
            let eps_var = g.input(eps.clone());
            let delta = g.sub(eps_pred, eps_var)?;
            let sq = g.square(delta)?;
            let mean = g.mean_all(sq)?;
            let mean_val = g.value(mean).data()[0].to_f64();
            diff_means.push(mean_val);
            diff_sums.push(mean_val * eps.numel() as f64);
            let weight = if sample.is_synthetic { w.alpha_synth } else { 1.0 };
            let contrib = g.scale(mean, T::from_f64(weight * inv_n))?;
            diff_total = Some(match diff_total {
                Some(acc) => g.add(acc, contrib)?,
                None => contrib,
            });

            let needs_z0_hat = (self.config.use_recog && w.lambda_recog != 0.0)
                || (self.config.use_logo && w.lambda_logo != 0.0);
            if !needs_z0_hat {
                continue;
            }
            // Predicted clean latent from this sample's branch of the graph.
            let abar = self.schedule.alpha_bar(t).to_f64();
            let zt_var = g.slice_channels(x, 0, c)?;
            let scaled_eps = g.scale(eps_pred, T::from_f64((1.0 - abar).sqrt()))?;
            let z0_hat = g.sub(zt_var, scaled_eps)?;
            let z0_hat = g.scale(z0_hat, T::from_f64(1.0 / abar.sqrt()))?;

            let regions = &sample.reference.regions;
            if self.config.use_recog && w.lambda_recog != 0.0 {
                let (loss, n) =
                    recog_loss(&mut g, &self.aux, &aux_vars, z0_hat, regions, &self.charset)?;
                if n > 0 {
                    recog_terms.push((loss, n));
                    metrics.text_regions += n;
                }
            }
            if self.config.use_logo && w.lambda_logo != 0.0 {
                match self.config.logo_path {
                    LogoPath::DenoisedOnly => {
                        let (loss, n) = logo_loss(&mut g, &self.aux, &aux_vars, z0_hat, regions)?;
                        if n > 0 {
                            logo_terms.push((loss, n));
                            metrics.logo_regions += n;
                        }
                    }
                    LogoPath::CleanHeadDenoisedGrad => {
                        let frozen = aux_frozen.as_ref().expect("bound above");
                        let z0_clean = g.input(sample.z0.clone());
                        let (head_term, n) =
                            logo_loss(&mut g, &self.aux, &aux_vars, z0_clean, regions)?;
                        if n > 0 {
                            let (grad_term, _) =
                                logo_loss(&mut g, &self.aux, frozen, z0_hat, regions)?;
                            let both = g.add(head_term, grad_term)?;
                            logo_terms.push((both, n));
                            metrics.logo_regions += n;
                        }
                    }
                }
            }
        }

        // Aggregate: regions-weighted means so every region counts equally.
        let diff_var = diff_total.expect("non-empty batch");
        metrics.loss_diff_scaled = g.value(diff_var).data()[0].to_f64();
        let mut total = g.scale(diff_var, T::from_f64(w.lambda_diff))?;
        let fold = |g: &mut Graph<T>, terms: &[(Var, usize)]| -> Result<Option<Var>> {
            if terms.is_empty() {
                return Ok(None);
            }
            let total_regions: usize = terms.iter().map(|(_, n)| n).sum();
            let mut acc: Option<Var> = None;
            for &(loss, n) in terms {
                let part = g.scale(loss, T::from_f64(n as f64 / total_regions as f64))?;
                acc = Some(match acc {
                    Some(a) => g.add(a, part)?,
                    None => part,
                });
            }
            Ok(acc)
        };
        if let Some(recog) = fold(&mut g, &recog_terms)? {
            metrics.loss_recog = g.value(recog).data()[0].to_f64();
            let weighted = g.scale(recog, T::from_f64(w.lambda_recog))?;
            total = g.add(total, weighted)?;
        }
        if let Some(logo) = fold(&mut g, &logo_terms)? {
            metrics.loss_logo = g.value(logo).data()[0].to_f64();
            let weighted = g.scale(logo, T::from_f64(w.lambda_logo))?;
            total = g.add(total, weighted)?;
        }

        metrics.loss_total = g.value(total).data()[0].to_f64();
        metrics.loss_diff_mean = diff_means.iter().sum::<f64>() * inv_n;
        metrics.loss_diff_sum = diff_sums.iter().sum::<f64>();
        if !metrics.loss_total.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "step {}: total loss {} (diff_scaled {}, recog {}, logo {}); timesteps {:?}",
                self.step,
                metrics.loss_total,
                metrics.loss_diff_scaled,
                metrics.loss_recog,
                metrics.loss_logo,
                ts
            )));
        }

        g.backward(total)?;

        // Collect every pending update first so clipping can act on the
        // global norm, then write them through the optimizer.
        enum Slot {
            LoraA(String),
            LoraB(String),
            Ext(String),
            Base(String),
            Aux(String),
        }
        let mut updates: Vec<(String, Slot, Tensor<T>)> = Vec::new();
        match self.config.scope {
            TrainScope::Adapter => {
                let alpha = self.plugin.adapter.alpha;
                for (name, (a, b)) in &self.plugin.adapter.pairs {
                    if let Some(dw) = g.grad(net_vars[name]) {
                        let (da, db) = grad_to_pair(dw, a, b, alpha)?;
                        updates.push((format!("lora.{name}.a"), Slot::LoraA(name.clone()), da));
                        updates.push((format!("lora.{name}.b"), Slot::LoraB(name.clone()), db));
                    }
                }
                for name in self.plugin.extensions.keys() {
                    if let Some(grad) = g.grad(net_vars[name]) {
                        updates.push((name.clone(), Slot::Ext(name.clone()), grad.clone()));
                    }
                }
            }
            TrainScope::Full => {
                for name in self.base.keys() {
                    if let Some(grad) = g.grad(net_vars[name]) {
                        updates.push((name.clone(), Slot::Base(name.clone()), grad.clone()));
                    }
                }
            }
        }
        for name in self.aux_params.keys() {
            if let Some(grad) = g.grad(aux_vars[name]) {
                updates.push((name.clone(), Slot::Aux(name.clone()), grad.clone()));
            }
        }

        let clip = self.config.optimizer.clip_norm;
        if clip > 0.0 {
            let sq_norm: f64 = updates
                .iter()
                .flat_map(|(_, _, grad)| grad.data().iter())
                .map(|&v| {
                    let x = v.to_f64();
                    x * x
                })
                .sum();
            let norm = sq_norm.sqrt();
            if norm > clip {
                let factor = T::from_f64(clip / norm);
                for (_, _, grad) in &mut updates {
                    *grad = grad.scale(factor);
                }
            }
        }

        self.opt.begin_step();
        for (key, slot, grad) in updates {
            let param = match slot {
                Slot::LoraA(name) => {
                    &mut self.plugin.adapter.pairs.get_mut(&name).expect("known pair").0
                }
                Slot::LoraB(name) => {
                    &mut self.plugin.adapter.pairs.get_mut(&name).expect("known pair").1
                }
                Slot::Ext(name) => self.plugin.extensions.get_mut(&name).expect("known ext"),
                Slot::Base(name) => self.base.get_mut(&name).expect("known base param"),
                Slot::Aux(name) => self.aux_params.get_mut(&name).expect("known aux param"),
            };
            self.opt.apply(&key, param, &grad)?;
        }

        self.step += 1;
        metrics.step = self.step;
        Ok(metrics)
    }
}

/// Clean latent with masked cells zeroed across all channels.
pub fn masked_latent<T: Scalar>(z0: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, wd] = z0.shape() else {
        return Err(CoreError::ShapeMismatch("latent must be (c,h,w)".into()));
    };
    let (c, h, wd) = (*c, *h, *wd);
    if mask.shape() != [h, wd] {
        return Err(CoreError::ShapeMismatch(format!(
            "mask {:?} vs latent ({h},{wd})",
            mask.shape()
        )));
    }
    let mut out = z0.clone();
    for ci in 0..c {
        for i in 0..h * wd {
            if mask.data()[i] != T::zero() {
                out.data_mut()[ci * h * wd + i] = T::zero();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auxiliary::AuxConfig;
    use crate::codec::LatentSpec;
    use crate::condition::{LatentBox, Region, RegionLabel};
    use crate::lora::LoraConfig;
    use crate::network::NetworkConfig;
    use crate::schedule::ScheduleConfig;
    use crate::text::{TextEncoderConfig, Vocab};
    use alloc::string::ToString;
    use alloc::vec;
    use rand::SeedableRng;

    #[test]
    fn diff_loss_closed_forms_and_oracle() {
        let a = Tensor::<f64>::full(&[2, 3], 0.8);
        assert_eq!(diff_loss(&a, &a).unwrap(), 0.0);

        let zero = Tensor::<f64>::zeros(&[5]);
        let ones = Tensor::<f64>::full(&[5], 1.0);
        assert_eq!(diff_loss(&zero, &ones).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[4, 7], &mut rng);
        let y = Tensor::<f64>::randn(&[4, 7], &mut rng);
        let oracle: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 28.0;
        assert!((diff_loss(&x, &y).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn scaled_diff_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trues: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[6], &mut rng)).collect();
        let preds: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[6], &mut rng)).collect();

        let all_real = diff_loss_scaled(&trues, &preds, &[false; 4], 0.5).unwrap();
        assert_eq!(all_real, diff_loss_batch(&trues, &preds).unwrap());

        let all_synth = diff_loss_scaled(&trues, &preds, &[true; 4], 0.5).unwrap();
        assert_eq!(all_synth, diff_loss_batch(&trues, &preds).unwrap() * 0.5);

        let flags = [false, true, false, true];
        let got = diff_loss_scaled(&trues, &preds, &flags, 0.5).unwrap();
        let mut oracle = 0.0;
        for i in 0..4 {
            let term = diff_loss(&trues[i], &preds[i]).unwrap();
            oracle += if flags[i] { 0.5 * term } else { term };
        }
        oracle /= 4.0;
        assert!((got - oracle).abs() < 1e-12);

        assert!(diff_loss_scaled(&trues, &preds, &[false; 3], 0.5).is_err());
    }

    #[test]
    fn adamw_moves_toward_minimum_deterministically() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut p = Tensor::full(&[2], 1.0);
        for _ in 0..400 {
            let grad = p.scale(2.0); // d/dp of p^2
            opt.begin_step();
            opt.apply("p", &mut p, &grad).unwrap();
        }
        assert!(p.max_abs() < 1e-3, "residual {}", p.max_abs());
    }

    pub(crate) struct Fixture {
        pub trainer: Trainer<f64>,
        pub batch: Vec<TrainSample<f64>>,
    }

    /// A tiny but fully wired trainer: 12-channel 4x4 latents, rank-2
    /// adapter, two-character charset, two logo classes.
    pub(crate) fn fixture(config: TrainerConfig, logo_labels: bool) -> Fixture {
        fixture_with_rank(config, logo_labels, 2)
    }

    pub(crate) fn fixture_with_rank(
        config: TrainerConfig,
        logo_labels: bool,
        rank: usize,
    ) -> Fixture {
        let latent = LatentSpec {
            c: 12,
            h: 4,
            w: 4,
            scale: 2,
        };
        let net = Denoiser::new(
            NetworkConfig {
                width: 16,
                width2: 16,
                attn_dim: 16,
                time_dim: 8,
                time_hidden: 16,
                groups: 4,
                inpaint: false,
            },
            latent,
            16,
        )
        .unwrap();
        let charset = Charset::new("ab".chars()).unwrap();
        let aux = AuxNets::new(
            AuxConfig {
                width: 8,
                groups: 2,
                roi: (2, 2),
                sampling: 1,
                word_len: 3,
            },
            latent.c,
            charset.n_classes(),
            2,
        )
        .unwrap();
        let vocab = Vocab::build(["a sign that says ab", "a logo of brand one"]);
        let text = TextEncoder::new(
            vocab,
            TextEncoderConfig {
                dim: 16,
                layers: 1,
                max_tokens: 8,
            },
            11,
        )
        .unwrap();
        let schedule = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let base = net.init_base(21);
        let plugin = ExpertPlugin::init(
            &net.param_specs(),
            &LoraConfig {
                rank,
                alpha: 1.0,
                init_std: 0.02,
            },
            22,
        )
        .unwrap();
        let aux_params = aux.init(23);
        let trainer = Trainer::new(
            net, aux, text, charset, schedule, config, base, plugin, aux_params,
        )
        .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut batch = Vec::new();
        for i in 0..2 {
            let z0 = Tensor::randn(&[12, 4, 4], &mut rng);
            let label = if logo_labels {
                RegionLabel::Logo(i % 2)
            } else {
                RegionLabel::Text(if i == 0 { "ab".into() } else { "ba".into() })
            };
            let bounds = LatentBox {
                x0: 0.5,
                y0: 0.5,
                x1: 3.5,
                y1: 3.0,
            };
            let mut m = Tensor::zeros(&[4, 4]);
            for y in 1..3 {
                for x in 1..3 {
                    m.data_mut()[y * 4 + x] = 1.0;
                }
            }
            batch.push(TrainSample {
                z0,
                caption: "a sign that says ab".to_string(),
                reference: ReferenceCondition {
                    s: Tensor::randn(&[12, 4, 4], &mut rng),
                    m,
                    regions: vec![Region { bounds, label }],
                },
                is_synthetic: i % 2 == 1,
            });
        }
        Fixture { trainer, batch }
    }

    #[test]
    fn base_weights_stay_bit_identical_over_steps() {
        let mut fx = fixture(TrainerConfig::default(), false);
        let before = hash_params(fx.trainer.base());
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            fx.trainer.train_step(&fx.batch, &mut rng).unwrap();
        }
        assert_eq!(hash_params(fx.trainer.base()), before);
        assert!(fx.trainer.steps_taken() == 5);
    }

    #[test]
    fn adapter_and_aux_do_move() {
        let mut fx = fixture(TrainerConfig::default(), false);
        let plugin_before = hash_params(
            &fx.trainer
                .plugin()
                .adapter
                .pairs
                .iter()
                .map(|(k, (a, _))| (k.clone(), a.clone()))
                .collect(),
        );
        let aux_before = hash_params(fx.trainer.aux_params());
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        fx.trainer.train_step(&fx.batch, &mut rng).unwrap();
        let plugin_after = hash_params(
            &fx.trainer
                .plugin()
                .adapter
                .pairs
                .iter()
                .map(|(k, (a, _))| (k.clone(), a.clone()))
                .collect(),
        );
        assert_ne!(hash_params(fx.trainer.aux_params()), aux_before);
        assert_ne!(plugin_after, plugin_before);
    }

    #[test]
    fn loss_decomposition_recombines() {
        let mut config = TrainerConfig::default();
        config.use_logo = true;
        config.logo_path = LogoPath::DenoisedOnly;
        let mut fx = fixture(config, false);
        // Mix in a logo region so all three terms are live.
        fx.batch[1].reference.regions.push(Region {
            bounds: LatentBox {
                x0: 1.0,
                y0: 1.0,
                x1: 3.0,
                y1: 3.0,
            },
            label: RegionLabel::Logo(1),
        });
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..3 {
            let m = fx.trainer.train_step(&fx.batch, &mut rng).unwrap();
            let w = &fx.trainer.config.weights;
            let recombined = w.lambda_diff * m.loss_diff_scaled
                + w.lambda_recog * m.loss_recog
                + w.lambda_logo * m.loss_logo;
            assert!(
                (m.loss_total - recombined).abs() < 1e-6,
                "total {} vs recombined {recombined}",
                m.loss_total
            );
            assert!(m.loss_recog > 0.0);
            assert!(m.loss_logo > 0.0);
        }
    }

    #[test]
    fn zero_recog_weight_matches_recog_free_run() {
        // Same seed, recognition disabled by weight versus disabled by flag:
        // the shared trainables must move identically, proving the
        // recognition path consumes no randomness.
        let mut cfg_zero = TrainerConfig::default();
        cfg_zero.weights.lambda_recog = 0.0;
        cfg_zero.use_recog = true;
        let mut cfg_off = TrainerConfig::default();
        cfg_off.use_recog = false;
        let mut with_zero = fixture(cfg_zero, false);
        let mut without = fixture(cfg_off, false);

        let mut rng_a = ChaCha8Rng::seed_from_u64(44);
        let mut rng_b = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..3 {
            let ma = with_zero.trainer.train_step(&with_zero.batch, &mut rng_a).unwrap();
            let mb = without.trainer.train_step(&without.batch, &mut rng_b).unwrap();
            assert_eq!(ma.loss_diff_scaled, mb.loss_diff_scaled);
        }
        let pa: BTreeMap<String, Tensor<f64>> = with_zero
            .trainer
            .plugin()
            .adapter
            .pairs
            .iter()
            .map(|(k, (a, _))| (k.clone(), a.clone()))
            .collect();
        let pb: BTreeMap<String, Tensor<f64>> = without
            .trainer
            .plugin()
            .adapter
            .pairs
            .iter()
            .map(|(k, (a, _))| (k.clone(), a.clone()))
            .collect();
        assert_eq!(hash_params(&pa), hash_params(&pb));
    }

    #[test]
    fn dropout_covers_all_four_combinations() {
        let mut cfg = TrainerConfig::default();
        cfg.dropout_p = 0.35; // keep the joint-drop case frequent
        let mut fx = fixture(cfg, false);
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut counts = [0usize; 4];
        for _ in 0..60 {
            let m = fx.trainer.train_step(&fx.batch, &mut rng).unwrap();
            counts[0] += m.kept_both;
            counts[1] += m.dropped_text_only;
            counts[2] += m.dropped_ref_only;
            counts[3] += m.dropped_both;
        }
        assert!(counts.iter().all(|&c| c > 0), "coverage {counts:?}");
    }

    #[test]
    fn nan_input_aborts_with_diagnostics() {
        let mut fx = fixture(TrainerConfig::default(), false);
        fx.batch[0].z0.data_mut()[0] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let err = fx.trainer.train_step(&fx.batch, &mut rng).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("timesteps"), "diagnostic missing: {msg}");
    }

    #[test]
    fn logo_frozen_path_leaves_no_head_update_from_predicted_latent() {
        // With CleanHeadDenoisedGrad the head gradient comes only from the
        // clean-latent term. Compare against DenoisedOnly to ensure the two
        // switch positions genuinely differ.
        let mut cfg_a = TrainerConfig::preset(TrainPreset::Logo);
        cfg_a.logo_path = LogoPath::CleanHeadDenoisedGrad;
        let mut cfg_b = TrainerConfig::preset(TrainPreset::Logo);
        cfg_b.logo_path = LogoPath::DenoisedOnly;
        let mut fa = fixture(cfg_a, true);
        let mut fb = fixture(cfg_b, true);
        let mut rng_a = ChaCha8Rng::seed_from_u64(47);
        let mut rng_b = ChaCha8Rng::seed_from_u64(47);
        let ma = fa.trainer.train_step(&fa.batch, &mut rng_a).unwrap();
        let mb = fb.trainer.train_step(&fb.batch, &mut rng_b).unwrap();
        assert!(ma.loss_logo > 0.0 && mb.loss_logo > 0.0);
        assert_ne!(
            hash_params(fa.trainer.aux_params()),
            hash_params(fb.trainer.aux_params())
        );
    }

    #[test]
    fn fixed_target_regression_converges() {
        // Deterministic regression: one sample, one timestep, one noise
        // draw, repeated. Isolates optimizer+graph from objective noise.
        let mut cfg = TrainerConfig::default();
        cfg.optimizer.lr = 1e-3;
        cfg.optimizer.weight_decay = 0.0;
        cfg.dropout_p = 0.0;
        cfg.use_recog = false;
        cfg.scope = TrainScope::Full;
        let mut fx = fixture(cfg, false);
        let sample = fx.batch[0].clone();
        let t = 800usize;
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let eps = Tensor::<f64>::randn(&[12, 4, 4], &mut rng);
        let zt = fx.trainer.schedule.q_sample(&sample.z0, &eps, t).unwrap();
        let mut first = None;
        let mut last = 0.0;
        for i in 0..400 {
            let mut g: Graph<f64> = Graph::new();
            let trainable: BTreeSet<String> =
                fx.trainer.base.keys().cloned().collect();
            let net_vars = bind_params(&mut g, &fx.trainer.base, &trainable);
            let x = g.input(
                crate::condition::compose_input(&zt, Some(&sample.reference)).unwrap(),
            );
            let feats = fx
                .trainer
                .text
                .encode_prompt(&mut g, &sample.caption)
                .unwrap();
            let pred = fx
                .trainer
                .denoiser
                .forward(&mut g, &net_vars, x, t, feats)
                .unwrap();
            let eps_var = g.input(eps.clone());
            let delta = g.sub(pred, eps_var).unwrap();
            let sq = g.square(delta).unwrap();
            let loss = g.mean_all(sq).unwrap();
            let v = g.value(loss).data()[0];
            if i == 0 {
                first = Some(v);
            }
            last = v;
            g.backward(loss).unwrap();
            fx.trainer.opt.begin_step();
            let mut grads: Vec<(String, Tensor<f64>)> = Vec::new();
            for name in fx.trainer.base.keys() {
                if let Some(grad) = g.grad(net_vars[name]) {
                    grads.push((name.clone(), grad.clone()));
                }
            }
            for (name, grad) in grads {
                let p = fx.trainer.base.get_mut(&name).unwrap();
                fx.trainer.opt.apply(&name, p, &grad).unwrap();
            }
        }
        assert!(last < first.unwrap() * 0.02, "first {first:?}, last {last}");
    }

    #[test]
    fn overfitting_a_fixed_batch_cuts_the_loss_ten_fold() {
        let mut cfg = TrainerConfig::default();
        cfg.optimizer.lr = 3e-3;
        cfg.optimizer.weight_decay = 0.0;
        cfg.dropout_p = 0.0;
        cfg.use_recog = false;
        cfg.scope = TrainScope::Full;
        let mut fx = fixture(cfg, false);
        let again = fx.batch.clone();
        fx.batch.extend(again);
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let mut first = None;
        let mut tail = Vec::new();
        for i in 0..2000 {
            let m = fx.trainer.train_step(&fx.batch, &mut rng).unwrap();
            if i == 0 {
                first = Some(m.loss_total);
            }
            if i >= 1950 {
                tail.push(m.loss_total);
            }
        }
        let first = first.unwrap();
        let late = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(
            late * 10.0 <= first,
            "step-0 loss {first}, late average {late}"
        );
    }
}
