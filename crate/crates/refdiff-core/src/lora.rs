//! Low-rank adaptation of the frozen denoiser, and the expert-plugin bundle
//! that carries an adapter together with the trained input extension.
//!
//! Every eligible matrix `W: (d1, d2)` gets a pair `A: (d1, r)`, `B: (d2, r)`
//! contributing `α·A·Bᵀ` on top of the frozen value. `A` starts as a small
//! Gaussian and `B` starts at zero, so a freshly built plugin reproduces the
//! base model exactly.
//!
//! Two execution paths produce the same effective weights:
//! [`LoraAdapter::apply`] pre-merges on the host, while [`bind_with_plugin`]
//! composes the product inside the graph so `A` and `B` receive gradients
//! directly. [`grad_to_pair`] converts a merged-weight gradient back into
//! pair gradients, letting the trainer use the cheaper merged path.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::network::{ParamKind, ParamSpec};
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoraConfig {
    pub rank: usize,
    /// Merge ratio applied to every `A·Bᵀ` product.
    pub alpha: f64,
    /// Standard deviation of the Gaussian init for `A`.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 32,
            alpha: 1.0,
            init_std: 0.02,
        }
    }
}

/// One `(A, B)` factor pair per adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: T,
    /// Layer name to `(A: (d1, r), B: (d2, r))`.
    pub pairs: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Build factor pairs for every adaptation-eligible matrix in `specs`.
    pub fn init(specs: &[ParamSpec], config: &LoraConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 {
            return Err(CoreError::InvalidConfig("adapter rank must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = BTreeMap::new();
        for spec in specs {
            if spec.kind != ParamKind::LoraEligible {
                continue;
            }
            let [d1, d2] = spec.shape[..] else {
                return Err(CoreError::InvalidConfig(format!(
                    "adapted layer {} must be a matrix, got {:?}",
                    spec.name, spec.shape
                )));
            };
            if config.rank >= d1.min(d2) {
                return Err(CoreError::InvalidConfig(format!(
                    "rank {} is not low for layer {} of shape ({d1},{d2})",
                    config.rank, spec.name
                )));
            }
            let a = Tensor::randn(&[d1, config.rank], &mut rng)
                .scale(T::from_f64(config.init_std));
            let b = Tensor::zeros(&[d2, config.rank]);
            pairs.insert(spec.name.clone(), (a, b));
        }
        Ok(LoraAdapter {
            rank: config.rank,
            alpha: T::from_f64(config.alpha),
            pairs,
        })
    }

    /// Effective weights `θ' = θ + α·A·Bᵀ` per adapted layer. The base map is
    /// cloned; non-adapted entries pass through unchanged.
    pub fn apply(&self, base: &BTreeMap<String, Tensor<T>>) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut out = base.clone();
        for (name, (a, b)) in &self.pairs {
            let w = out.get(name).ok_or_else(|| {
                CoreError::Missing(format!("adapter targets layer {name} absent from base"))
            })?;
            let delta = matmul_a_bt(a, b)?.scale(self.alpha);
            let merged = w.add(&delta).map_err(|_| {
                CoreError::ShapeMismatch(format!(
                    "adapter pair for {name} produces {:?}, base is {:?}",
                    delta.shape(),
                    w.shape()
                ))
            })?;
            out.insert(name.clone(), merged);
        }
        Ok(out)
    }

    /// Trainable element total: `Σ_l r·(d1 + d2)`.
    pub fn param_count(&self) -> usize {
        self.pairs
            .values()
            .map(|(a, b)| a.numel() + b.numel())
            .sum()
    }
}

/// Gradient of the loss w.r.t. one `(A, B)` pair, given the gradient w.r.t.
/// the merged weight `W' = W + α·A·Bᵀ`.
pub fn grad_to_pair<T: Scalar>(
    d_merged: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    alpha: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let da = matmul(d_merged, b)?.scale(alpha);
    let db = matmul_at_b(d_merged, a)?.scale(alpha);
    Ok((da, db))
}

/// Everything an expert contributes on top of the frozen base: factor pairs
/// plus the directly trained conditioning-extension tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPlugin<T> {
    pub adapter: LoraAdapter<T>,
    /// Extension name to full-shape trained tensor (zero at init).
    pub extensions: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ExpertPlugin<T> {
    pub fn init(specs: &[ParamSpec], config: &LoraConfig, seed: u64) -> Result<Self> {
        let adapter = LoraAdapter::init(specs, config, seed)?;
        let extensions = specs
            .iter()
            .filter(|s| s.kind == ParamKind::Extension)
            .map(|s| (s.name.clone(), Tensor::zeros(&s.shape)))
            .collect();
        Ok(ExpertPlugin { adapter, extensions })
    }

    /// Merged weights with the plugin's extensions substituted in.
    pub fn apply(&self, base: &BTreeMap<String, Tensor<T>>) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut out = self.adapter.apply(base)?;
        for (name, ext) in &self.extensions {
            let slot = out.get(name).ok_or_else(|| {
                CoreError::Missing(format!("plugin extension {name} absent from base"))
            })?;
            if slot.shape() != ext.shape() {
                return Err(CoreError::ShapeMismatch(format!(
                    "plugin extension {name}: {:?} vs base {:?}",
                    ext.shape(),
                    slot.shape()
                )));
            }
            out.insert(name.clone(), ext.clone());
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.adapter.param_count() + self.extensions.values().map(Tensor::numel).sum::<usize>()
    }
}

/// Graph variables for every plugin leaf, used by the in-graph training path.
pub struct PluginVars {
    /// Layer name to `(A, B)` graph leaves.
    pub pairs: BTreeMap<String, (Var, Var)>,
    /// Extension name to graph leaf.
    pub extensions: BTreeMap<String, Var>,
}

/// Bind base weights with the plugin composed inside the graph: `A`, `B`,
/// and extension tensors are gradient leaves, the base stays frozen.
pub fn bind_with_plugin<T: Scalar>(
    g: &mut Graph<T>,
    base: &BTreeMap<String, Tensor<T>>,
    plugin: &ExpertPlugin<T>,
) -> Result<(BTreeMap<String, Var>, PluginVars)> {
    let mut vars = BTreeMap::new();
    let mut pair_vars = BTreeMap::new();
    let mut ext_vars = BTreeMap::new();
    for (name, value) in base {
        let var = if let Some((a, b)) = plugin.adapter.pairs.get(name) {
            let w0 = g.input(value.clone());
            let av = g.param(a.clone());
            let bv = g.param(b.clone());
            let bt = g.transpose(bv)?;
            let prod = g.matmul(av, bt)?;
            let delta = g.scale(prod, plugin.adapter.alpha)?;
            pair_vars.insert(name.clone(), (av, bv));
            g.add(w0, delta)?
        } else if let Some(ext) = plugin.extensions.get(name) {
            let v = g.param(ext.clone());
            ext_vars.insert(name.clone(), v);
            v
        } else {
            g.input(value.clone())
        };
        vars.insert(name.clone(), var);
    }
    Ok((
        vars,
        PluginVars {
            pairs: pair_vars,
            extensions: ext_vars,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LatentSpec;
    use crate::network::{bind_params, Denoiser, NetworkConfig};
    use crate::text::{TextEncoder, TextEncoderConfig, Vocab};
    use alloc::collections::BTreeSet;
    use alloc::vec;

    fn matrix_spec(name: &str, d1: usize, d2: usize) -> ParamSpec {
        ParamSpec {
            name: name.into(),
            shape: vec![d1, d2],
            kind: ParamKind::LoraEligible,
        }
    }

    fn tiny_net() -> (Denoiser, LatentSpec) {
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

    #[test]
    fn fresh_adapter_is_an_exact_identity() {
        let specs = vec![matrix_spec("w", 16, 24)];
        let config = LoraConfig {
            rank: 4,
            ..LoraConfig::default()
        };
        let adapter = LoraAdapter::<f32>::init(&specs, &config, 0).unwrap();
        let mut base = BTreeMap::new();
        base.insert(
            "w".into(),
            Tensor::randn(&[16, 24], &mut ChaCha8Rng::seed_from_u64(1)),
        );
        let merged = adapter.apply(&base).unwrap();
        assert_eq!(merged["w"], base["w"], "B = 0 must leave the base untouched");
    }

    #[test]
    fn ones_by_ones_rank_two_adds_the_all_twos_matrix() {
        let adapter = LoraAdapter {
            rank: 2,
            alpha: 1.0f64,
            pairs: BTreeMap::from([(
                String::from("w"),
                (Tensor::full(&[8, 2], 1.0), Tensor::full(&[8, 2], 1.0)),
            )]),
        };
        let base = BTreeMap::from([(String::from("w"), Tensor::zeros(&[8, 8]))]);
        let merged = adapter.apply(&base).unwrap();
        assert!(merged["w"].data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn param_count_formula() {
        let config = LoraConfig {
            rank: 4,
            ..LoraConfig::default()
        };
        let adapter =
            LoraAdapter::<f32>::init(&[matrix_spec("w", 64, 64)], &config, 0).unwrap();
        assert_eq!(adapter.param_count(), 512);
        let empty = LoraAdapter::<f32>::init(&[], &config, 0).unwrap();
        assert_eq!(empty.param_count(), 0);
    }

    #[test]
    fn default_network_adapter_param_count_golden() {
        let net = Denoiser::new(NetworkConfig::default(), LatentSpec::default(), 64).unwrap();
        let adapter =
            LoraAdapter::<f32>::init(&net.param_specs(), &LoraConfig::default(), 0).unwrap();
        let by_formula: usize = net
            .param_specs()
            .iter()
            .filter(|s| s.kind == ParamKind::LoraEligible)
            .map(|s| 32 * (s.shape[0] + s.shape[1]))
            .sum();
        assert_eq!(adapter.param_count(), by_formula);
        assert_eq!(adapter.param_count(), 555_008);
    }

    #[test]
    fn rank_must_be_low() {
        let config = LoraConfig {
            rank: 16,
            ..LoraConfig::default()
        };
        assert!(LoraAdapter::<f32>::init(&[matrix_spec("w", 16, 64)], &config, 0).is_err());
    }

    #[test]
    fn apply_rejects_unknown_layer() {
        let config = LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        };
        let adapter = LoraAdapter::<f32>::init(&[matrix_spec("w", 8, 8)], &config, 0).unwrap();
        let base = BTreeMap::from([(String::from("other"), Tensor::<f32>::zeros(&[8, 8]))]);
        assert!(adapter.apply(&base).is_err());
    }

    fn randomized_plugin(net: &Denoiser, seed: u64) -> ExpertPlugin<f32> {
        let config = LoraConfig {
            rank: 3,
            alpha: 1.0,
            init_std: 0.02,
        };
        let mut plugin = ExpertPlugin::<f32>::init(&net.param_specs(), &config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b);
        for (a, b) in plugin.adapter.pairs.values_mut() {
            *a = Tensor::randn(a.shape(), &mut rng).scale(0.05);
            *b = Tensor::randn(b.shape(), &mut rng).scale(0.05);
        }
        for ext in plugin.extensions.values_mut() {
            *ext = Tensor::randn(ext.shape(), &mut rng).scale(0.05);
        }
        plugin
    }

    #[test]
    fn runtime_and_premerged_forward_agree() {
        let (net, latent) = tiny_net();
        let base = net.init_base::<f32>(31);
        let plugin = randomized_plugin(&net, 32);
        let vocab = Vocab::build(["hello there"]);
        let text = TextEncoder::<f32>::new(
            vocab,
            TextEncoderConfig {
                dim: 16,
                layers: 1,
                max_tokens: 8,
            },
            33,
        )
        .unwrap();
        let x0 = Tensor::<f32>::randn(
            &[net.input_channels(), latent.h, latent.w],
            &mut ChaCha8Rng::seed_from_u64(34),
        );

        let mut g1 = Graph::new();
        let (vars, _) = bind_with_plugin(&mut g1, &base, &plugin).unwrap();
        let x = g1.input(x0.clone());
        let feats = text.encode_prompt(&mut g1, "hello there").unwrap();
        let runtime = net.forward(&mut g1, &vars, x, 40, feats).unwrap();

        let merged = plugin.apply(&base).unwrap();
        let mut g2 = Graph::new();
        let vars = bind_params(&mut g2, &merged, &BTreeSet::new());
        let x = g2.input(x0);
        let feats = text.encode_prompt(&mut g2, "hello there").unwrap();
        let premerged = net.forward(&mut g2, &vars, x, 40, feats).unwrap();

        let dev = g1.value(runtime).max_abs_diff(g2.value(premerged));
        assert!(dev < 1e-5, "runtime vs merged deviation {dev}");
    }

    #[test]
    fn merged_gradient_routing_matches_in_graph_pairs() {
        // The trainer differentiates w.r.t. the merged weight and converts
        // with grad_to_pair; that must equal differentiating through the
        // in-graph A·Bᵀ composition.
        let (net, latent) = tiny_net();
        let base = net.init_base::<f64>(41);
        let plugin = {
            let config = LoraConfig {
                rank: 3,
                alpha: 0.7,
                init_std: 0.02,
            };
            let mut p = ExpertPlugin::<f64>::init(&net.param_specs(), &config, 42).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(43);
            for (a, b) in p.adapter.pairs.values_mut() {
                *a = Tensor::randn(a.shape(), &mut rng).scale(0.05);
                *b = Tensor::randn(b.shape(), &mut rng).scale(0.05);
            }
            p
        };
        let x0 = Tensor::<f64>::randn(
            &[net.input_channels(), latent.h, latent.w],
            &mut ChaCha8Rng::seed_from_u64(44),
        );
        let textf = Tensor::<f64>::randn(&[3, 16], &mut ChaCha8Rng::seed_from_u64(45));

        let mut g1 = Graph::new();
        let (vars, pvars) = bind_with_plugin(&mut g1, &base, &plugin).unwrap();
        let x = g1.input(x0.clone());
        let tf = g1.input(textf.clone());
        let out = net.forward(&mut g1, &vars, x, 11, tf).unwrap();
        let sq = g1.square(out).unwrap();
        let loss = g1.sum_all(sq).unwrap();
        g1.backward(loss).unwrap();

        let merged = plugin.apply(&base).unwrap();
        let trainable: BTreeSet<String> = plugin.adapter.pairs.keys().cloned().collect();
        let mut g2 = Graph::new();
        let vars2 = bind_params(&mut g2, &merged, &trainable);
        let x = g2.input(x0);
        let tf = g2.input(textf);
        let out = net.forward(&mut g2, &vars2, x, 11, tf).unwrap();
        let sq = g2.square(out).unwrap();
        let loss = g2.sum_all(sq).unwrap();
        g2.backward(loss).unwrap();

        let mut checked = 0;
        for (name, (av, bv)) in &pvars.pairs {
            let d_merged = g2.grad(vars2[name]).expect("merged grad");
            let (a, b) = &plugin.adapter.pairs[name];
            let (da, db) = grad_to_pair(d_merged, a, b, plugin.adapter.alpha).unwrap();
            let da_ref = g1.grad(*av).expect("pair grad A");
            let db_ref = g1.grad(*bv).expect("pair grad B");
            let scale = da_ref.max_abs().max(db_ref.max_abs()).max(1.0);
            assert!(da.max_abs_diff(da_ref) / scale < 1e-9, "{name} A");
            assert!(db.max_abs_diff(db_ref) / scale < 1e-9, "{name} B");
            checked += 1;
        }
        assert!(checked > 20, "adapter should cover the matrix registry");
    }

    #[test]
    fn plugin_keeps_base_bit_identical() {
        let (net, _) = tiny_net();
        let base = net.init_base::<f32>(51);
        let snapshot = base.clone();
        let plugin = randomized_plugin(&net, 52);
        let _ = plugin.apply(&base).unwrap();
        assert_eq!(base, snapshot);
    }

    #[test]
    fn plugin_covers_extensions_and_counts_them() {
        let (net, _) = tiny_net();
        let plugin =
            ExpertPlugin::<f32>::init(&net.param_specs(), &LoraConfig {
                rank: 3,
                ..LoraConfig::default()
            }, 0)
            .unwrap();
        assert!(plugin.extensions.contains_key("unet.in.w_ext"));
        let ext_elems: usize = plugin.extensions.values().map(Tensor::numel).sum();
        assert_eq!(
            plugin.param_count(),
            plugin.adapter.param_count() + ext_elems
        );
        let eligible: BTreeSet<_> = net
            .param_specs()
            .into_iter()
            .filter(|s| s.kind == ParamKind::LoraEligible)
            .map(|s| s.name)
            .collect();
        let covered: BTreeSet<_> = plugin.adapter.pairs.keys().cloned().collect();
        assert_eq!(eligible, covered);
    }
}
