//! Sampling machinery: classifier-free guidance in its standard and
//! four-branch augmented forms, the time-dependent guidance-scale schedule,
//! and the DDIM stepper.
//!
//! The augmented combiner anchors at the fully unconditioned estimate and
//! adds three guidance directions (caption only, reference only, both).
//! In scheduled mode the reference scale starts at its ceiling and decays
//! as `(t/T)^ρ` while the caption scale takes up the slack, so the pair
//! always sums to the ceiling exactly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::condition::{compose_input, compose_inpaint_input, ReferenceCondition};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::network::{bind_params, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GuidanceMode {
    /// Single conditional branch, no extrapolation.
    None,
    /// Two branches, `ε_c + ω(ε_c − ε_u)`.
    Standard,
    /// Four branches with fixed scales.
    Augmented,
    /// Four branches; ω_ref and ω_prompt follow the time schedule.
    AugmentedScheduled,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Scale for standard mode.
    pub omega: f64,
    /// Fixed caption scale for augmented mode.
    pub omega_prompt: f64,
    /// Fixed reference scale for augmented mode.
    pub omega_ref: f64,
    /// Joint-condition scale, constant in every augmented variant.
    pub omega_all: f64,
    /// Ceiling that ω_ref and ω_prompt share in scheduled mode.
    pub gamma: f64,
    /// Schedule exponent; larger values hold ω_ref high for longer.
    pub rho_speed: f64,
    /// Evaluate the schedule on trainer timesteps `t/T` instead of the
    /// sampler's own step grid.
    pub schedule_on_trainer_grid: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::AugmentedScheduled,
            omega: 3.0,
            omega_prompt: 1.0,
            omega_ref: 1.0,
            omega_all: 4.0,
            gamma: 3.5,
            rho_speed: 0.2,
            schedule_on_trainer_grid: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            GuidanceMode::None | GuidanceMode::Standard => Ok(()),
            GuidanceMode::Augmented => {
                if self.omega_prompt < 0.0 || self.omega_ref < 0.0 || self.omega_all < 0.0 {
                    Err(CoreError::InvalidConfig(
                        "augmented guidance scales must be nonnegative".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            GuidanceMode::AugmentedScheduled => {
                if self.gamma < 0.0 {
                    Err(CoreError::InvalidConfig("gamma must be nonnegative".into()))
                } else if self.rho_speed <= 0.0 {
                    Err(CoreError::InvalidConfig("rho_speed must be positive".into()))
                } else if self.omega_all < 0.0 {
                    Err(CoreError::InvalidConfig("omega_all must be nonnegative".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Branches the sampler must evaluate, as (with_text, with_ref) pairs in
    /// the order the combiner consumes them.
    pub fn branches(&self) -> &'static [(bool, bool)] {
        match self.mode {
            GuidanceMode::None => &[(true, true)],
            GuidanceMode::Standard => &[(false, false), (true, true)],
            GuidanceMode::Augmented | GuidanceMode::AugmentedScheduled => &[
                (false, false),
                (true, false),
                (false, true),
                (true, true),
            ],
        }
    }
}

/// `ε̂ = ε_c + ω(ε_c − ε_u)`. At ω = 0 the conditional estimate is returned
/// unchanged, bit for bit.
pub fn cfg_standard<T: Scalar>(
    eps_c: &Tensor<T>,
    eps_u: &Tensor<T>,
    omega: f64,
) -> Result<Tensor<T>> {
    if eps_c.shape() != eps_u.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "guidance branches {:?} vs {:?}",
            eps_c.shape(),
            eps_u.shape()
        )));
    }
    if omega == 0.0 {
        return Ok(eps_c.clone());
    }
    let w = T::from_f64(omega);
    Ok(eps_c.add(&eps_c.sub(eps_u)?.scale(w))?)
}

/// Scheduled scales at trainer-style countdown time `t` out of `total`:
/// `ω_ref = γ·(t/total)^ρ` and `ω_prompt = γ − ω_ref`, so the two always
/// sum to γ.
pub fn schedule_scales(t: usize, total: usize, gamma: f64, rho_speed: f64) -> (f64, f64) {
    let ratio = (t as f64 / total as f64).powf(rho_speed);
    let omega_ref = gamma * ratio;
    (omega_ref, gamma - omega_ref)
}

/// Four-branch combination anchored at the fully unconditioned estimate:
/// `ε̂ = ε_uu + ω_p(ε_cu − ε_uu) + ω_r(ε_ur − ε_uu) + ω_a(ε_cr − ε_uu)`.
///
/// In scheduled mode ω_p and ω_r are replaced by [`schedule_scales`] at
/// `(t, total)`. Zero-weight terms are skipped, so an all-zero setting
/// returns `ε_uu` exactly.
pub fn cfg_augmented<T: Scalar>(
    eps_uu: &Tensor<T>,
    eps_cu: &Tensor<T>,
    eps_ur: &Tensor<T>,
    eps_cr: &Tensor<T>,
    cfg: &GuidanceConfig,
    t: usize,
    total: usize,
) -> Result<Tensor<T>> {
    for b in [eps_cu, eps_ur, eps_cr] {
        if b.shape() != eps_uu.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "guidance branches {:?} vs {:?}",
                b.shape(),
                eps_uu.shape()
            )));
        }
    }
    let (omega_ref, omega_prompt) = match cfg.mode {
        GuidanceMode::AugmentedScheduled => {
            schedule_scales(t, total, cfg.gamma, cfg.rho_speed)
        }
        _ => (cfg.omega_ref, cfg.omega_prompt),
    };
    let mut out = eps_uu.clone();
    for (w, branch) in [
        (omega_prompt, eps_cu),
        (omega_ref, eps_ur),
        (cfg.omega_all, eps_cr),
    ] {
        if w != 0.0 {
            out = out.add(&branch.sub(eps_uu)?.scale(T::from_f64(w)))?;
        }
    }
    Ok(out)
}

/// A noise estimator the sampler can query branch by branch. Implementations
/// may batch the requested branches into one forward internally; semantics
/// are as if evaluated sequentially in the given order.
pub trait EpsSource<T: Scalar> {
    /// One `(with_text, with_ref)` pair per requested branch.
    fn eps_branches(
        &mut self,
        z: &Tensor<T>,
        t: usize,
        branches: &[(bool, bool)],
    ) -> Result<Vec<Tensor<T>>>;
}

/// Per-step sampler record for tracing and plotting.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepTrace {
    /// Descending step index, `steps-1` first.
    pub index: usize,
    pub t: usize,
    pub t_prev: usize,
    pub omega_prompt: f64,
    pub omega_ref: f64,
    pub omega_all: f64,
    /// L2 norm of the combined estimate.
    pub eps_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SampleResult<T> {
    pub z0: Tensor<T>,
    pub trace: Vec<StepTrace>,
}

/// Deterministic DDIM iteration from pure noise down to a clean latent.
///
/// The step grid is `t_i = (i+1)·T/steps`, so `steps = T` visits every
/// trainer timestep and `steps | T` lands on an even subsample. With
/// `eta = 0` no noise is injected after initialization and the trajectory
/// is a pure function of the initial draw.
pub fn ddim_sample<T: Scalar, S: EpsSource<T>>(
    source: &mut S,
    schedule: &NoiseSchedule<T>,
    shape: &[usize],
    steps: usize,
    eta: f64,
    cfg: &GuidanceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampleResult<T>> {
    cfg.validate()?;
    let total = schedule.steps();
    if steps == 0 || steps > total {
        return Err(CoreError::InvalidConfig(format!(
            "sampler steps {steps} outside 1..={total}"
        )));
    }
    if eta < 0.0 {
        return Err(CoreError::InvalidConfig("eta must be nonnegative".into()));
    }
    let grid: Vec<usize> = (0..steps).map(|i| (i + 1) * total / steps).collect();
    let mut z = Tensor::<T>::randn(shape, rng);
    let mut trace = Vec::with_capacity(steps);

    for i in (0..steps).rev() {
        let t = grid[i];
        let t_prev = if i == 0 { 0 } else { grid[i - 1] };
        let branches = source.eps_branches(&z, t, cfg.branches())?;
        if branches.len() != cfg.branches().len() {
            return Err(CoreError::ShapeMismatch(format!(
                "eps source returned {} branches, wanted {}",
                branches.len(),
                cfg.branches().len()
            )));
        }
        // The schedule position: the sampler's own grid maps step i to
        // (i+1)/steps of the countdown; the trainer grid uses t/T.
        let (sched_t, sched_total) = if cfg.schedule_on_trainer_grid {
            (t, total)
        } else {
            (i + 1, steps)
        };
        let (eps_hat, op, or_) = match cfg.mode {
            GuidanceMode::None => (branches[0].clone(), 0.0, 0.0),
            GuidanceMode::Standard => (
                cfg_standard(&branches[1], &branches[0], cfg.omega)?,
                0.0,
                0.0,
            ),
            GuidanceMode::Augmented | GuidanceMode::AugmentedScheduled => {
                let (or_, op) = match cfg.mode {
                    GuidanceMode::AugmentedScheduled => {
                        schedule_scales(sched_t, sched_total, cfg.gamma, cfg.rho_speed)
                    }
                    _ => (cfg.omega_ref, cfg.omega_prompt),
                };
                let mut tuned = cfg.clone();
                tuned.mode = GuidanceMode::Augmented;
                tuned.omega_ref = or_;
                tuned.omega_prompt = op;
                let eps = cfg_augmented(
                    &branches[0],
                    &branches[1],
                    &branches[2],
                    &branches[3],
                    &tuned,
                    sched_t,
                    sched_total,
                )?;
                (eps, op, or_)
            }
        };
        if !eps_hat.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "combined noise estimate at t={t}"
            )));
        }

        let abar_t = schedule.alpha_bar(t).to_f64();
        let abar_prev = schedule.alpha_bar(t_prev).to_f64();
        let z0 = schedule.predict_z0(&z, &eps_hat, t)?;
        let sigma = if eta == 0.0 {
            0.0
        } else {
            eta * ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt()
                * (1.0 - abar_t / abar_prev).sqrt()
        };
        let dir_coeff = T::from_f64((1.0 - abar_prev - sigma * sigma).max(0.0).sqrt());
        let mut next = z0
            .scale(T::from_f64(abar_prev.sqrt()))
            .add(&eps_hat.scale(dir_coeff))?;
        if sigma > 0.0 {
            let noise = Tensor::<T>::randn(shape, rng);
            next = next.add(&noise.scale(T::from_f64(sigma)))?;
        }

        let norm = eps_hat.dot(&eps_hat)?.to_f64().sqrt();
        trace.push(StepTrace {
            index: i,
            t,
            t_prev,
            omega_prompt: op,
            omega_ref: or_,
            omega_all: match cfg.mode {
                GuidanceMode::None => 0.0,
                GuidanceMode::Standard => cfg.omega,
                _ => cfg.omega_all,
            },
            eps_norm: norm,
        });
        z = next;
    }
    Ok(SampleResult { z0: z, trace })
}

/// The production noise source: the denoiser under a fixed weight map, with
/// pre-encoded caption features and an optional reference condition. All
/// branches of a step share one graph and one parameter binding.
pub struct DenoiserSource<'a, T: Scalar> {
    pub net: &'a Denoiser,
    pub weights: &'a BTreeMap<String, Tensor<T>>,
    /// Encoded caption features `(tokens, dim)`.
    pub text_cond: Tensor<T>,
    /// Encoded empty-caption features, used when a branch drops text.
    pub text_null: Tensor<T>,
    pub reference: Option<&'a ReferenceCondition<T>>,
    /// Masked-source latent, required by inpainting networks.
    pub masked_source: Option<Tensor<T>>,
}

impl<T: Scalar> EpsSource<T> for DenoiserSource<'_, T> {
    fn eps_branches(
        &mut self,
        z: &Tensor<T>,
        t: usize,
        branches: &[(bool, bool)],
    ) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, self.weights, &Default::default());
        let mut composed: BTreeMap<bool, crate::graph::Var> = BTreeMap::new();
        let mut texts: BTreeMap<bool, crate::graph::Var> = BTreeMap::new();
        let mut out = Vec::with_capacity(branches.len());
        for &(with_text, with_ref) in branches {
            let x = match composed.get(&with_ref) {
                Some(&v) => v,
                None => {
                    let reference = if with_ref { self.reference } else { None };
                    let xt = if self.net.config().inpaint {
                        let masked = self.masked_source.as_ref().ok_or_else(|| {
                            CoreError::Missing("inpainting needs a masked source latent".into())
                        })?;
                        compose_inpaint_input(z, reference, masked)?
                    } else {
                        compose_input(z, reference)?
                    };
                    let v = g.input(xt);
                    composed.insert(with_ref, v);
                    v
                }
            };
            let feats = match texts.get(&with_text) {
                Some(&v) => v,
                None => {
                    let f = if with_text {
                        self.text_cond.clone()
                    } else {
                        self.text_null.clone()
                    };
                    let v = g.input(f);
                    texts.insert(with_text, v);
                    v
                }
            };
            let eps = self.net.forward(&mut g, &vars, x, t, feats)?;
            out.push(g.value(eps).clone());
        }
        Ok(out)
    }
}
