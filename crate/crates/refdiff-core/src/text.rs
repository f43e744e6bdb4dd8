//! Word-level tokenizer and the frozen toy text encoder.
//!
//! The encoder is a small pre-norm transformer over learned token + position
//! embeddings. It is initialized from a seed and then never trained,
//! mirroring a frozen pretrained text tower: the denoiser's cross-attention
//! learns to read whatever features it produces. Deterministic tokenization:
//! lowercase, split on non-alphanumeric, out-of-vocabulary words collapse to
//! a single `UNK` token, and the empty prompt becomes the single `NULL`
//! token, which doubles as the unconditional text branch.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub const NULL_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Deterministic word-level vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vocab {
    words: Vec<String>,
    #[cfg_attr(feature = "serde", serde(skip))]
    index: BTreeMap<String, usize>,
}

/// Lowercase and split on non-alphanumeric characters.
pub fn tokenize(prompt: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in prompt.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            words.push(core::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

impl Vocab {
    /// Build from all words that may appear in captions. Sorted and
    /// deduplicated, so construction order never changes ids.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut uniq: Vec<String> = words
            .into_iter()
            .flat_map(|w| tokenize(w))
            .collect::<alloc::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut all = vec![String::from("[null]"), String::from("[unk]")];
        all.append(&mut uniq);
        Self::from_words(all)
    }

    /// Rebuild from an ordered word list (checkpoint loading path).
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Token ids for a prompt; empty prompts map to `[NULL_ID]`.
    pub fn ids(&self, prompt: &str) -> Vec<usize> {
        let toks = tokenize(prompt);
        if toks.is_empty() {
            return vec![NULL_ID];
        }
        toks.iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID))
            .collect()
    }
}

/// Text encoder hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TextEncoderConfig {
    /// Embedding and attention width.
    pub dim: usize,
    /// Number of self-attention blocks.
    pub layers: usize,
    /// Prompts are truncated to this many tokens.
    pub max_tokens: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            dim: 64,
            layers: 2,
            max_tokens: 16,
        }
    }
}

/// Frozen transformer text encoder.
#[derive(Debug, Clone)]
pub struct TextEncoder<T> {
    config: TextEncoderConfig,
    vocab: Vocab,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> TextEncoder<T> {
    pub fn new(vocab: Vocab, config: TextEncoderConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.layers == 0 || config.max_tokens == 0 {
            return Err(CoreError::InvalidConfig(format!("degenerate text encoder {config:?}")));
        }
        if vocab.len() < 2 {
            return Err(CoreError::InvalidConfig(
                "vocabulary must contain at least the null and unk tokens".into(),
            ));
        }
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let emb_std = T::from_f64(0.02);
        params.insert(
            String::from("tok"),
            Tensor::randn(&[vocab.len(), d], &mut rng).scale(emb_std),
        );
        params.insert(
            String::from("pos"),
            Tensor::randn(&[config.max_tokens, d], &mut rng).scale(emb_std),
        );
        let proj_std = T::from_f64(1.0 / (d as f64).sqrt());
        for l in 0..config.layers {
            for name in ["q", "k", "v", "o"] {
                params.insert(
                    format!("l{l}.{name}"),
                    Tensor::randn(&[d, d], &mut rng).scale(proj_std),
                );
            }
            params.insert(
                format!("l{l}.mlp1"),
                Tensor::randn(&[d, 2 * d], &mut rng).scale(proj_std),
            );
            params.insert(format!("l{l}.mlp1b"), Tensor::zeros(&[2 * d]));
            params.insert(
                format!("l{l}.mlp2"),
                Tensor::randn(&[2 * d, d], &mut rng).scale(T::from_f64(1.0 / (2.0 * d as f64).sqrt())),
            );
            params.insert(format!("l{l}.mlp2b"), Tensor::zeros(&[d]));
            for ln in ["ln1", "ln2"] {
                params.insert(format!("l{l}.{ln}.g"), Tensor::full(&[d], T::one()));
                params.insert(format!("l{l}.{ln}.b"), Tensor::zeros(&[d]));
            }
        }
        params.insert(String::from("lnf.g"), Tensor::full(&[d], T::one()));
        params.insert(String::from("lnf.b"), Tensor::zeros(&[d]));
        Ok(TextEncoder {
            config,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Token ids for a prompt, truncated to the encoder's window.
    pub fn token_ids(&self, prompt: &str) -> Vec<usize> {
        let mut ids = self.vocab.ids(prompt);
        ids.truncate(self.config.max_tokens);
        ids
    }

    /// Build the frozen encoder on a graph, returning the `(L, dim)` token
    /// feature sequence. All parameters enter as non-trainable inputs.
    pub fn encode(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.config.max_tokens {
            return Err(CoreError::InvalidConfig(format!(
                "token count {} outside [1, {}]",
                ids.len(),
                self.config.max_tokens
            )));
        }
        let p = |g: &mut Graph<T>, name: &str| -> Result<Var> {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| CoreError::Missing(format!("text param {name}")))?;
            Ok(g.input(t.clone()))
        };
        let d = self.config.dim;
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let positions: Vec<usize> = (0..ids.len()).collect();

        let tok_table = p(g, "tok")?;
        let pos_table = p(g, "pos")?;
        let tok = g.embedding(tok_table, ids)?;
        let pos = g.embedding(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;

        for l in 0..self.config.layers {
            let ln1g = p(g, &format!("l{l}.ln1.g"))?;
            let ln1b = p(g, &format!("l{l}.ln1.b"))?;
            let normed = g.layer_norm_rows(x, ln1g, ln1b, T::from_f64(1e-5))?;
            let wq = p(g, &format!("l{l}.q"))?;
            let wk = p(g, &format!("l{l}.k"))?;
            let wv = p(g, &format!("l{l}.v"))?;
            let wo = p(g, &format!("l{l}.o"))?;
            let q = g.matmul(normed, wq)?;
            let k = g.matmul(normed, wk)?;
            let v = g.matmul(normed, wv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scores)?;
            let mixed = g.matmul(attn, v)?;
            let proj = g.matmul(mixed, wo)?;
            x = g.add(x, proj)?;

            let ln2g = p(g, &format!("l{l}.ln2.g"))?;
            let ln2b = p(g, &format!("l{l}.ln2.b"))?;
            let normed = g.layer_norm_rows(x, ln2g, ln2b, T::from_f64(1e-5))?;
            let w1 = p(g, &format!("l{l}.mlp1"))?;
            let b1 = p(g, &format!("l{l}.mlp1b"))?;
            let w2 = p(g, &format!("l{l}.mlp2"))?;
            let b2 = p(g, &format!("l{l}.mlp2b"))?;
            let h = g.matmul(normed, w1)?;
            let h = g.add_row_broadcast(h, b1)?;
            let h = g.silu(h)?;
            let h = g.matmul(h, w2)?;
            let h = g.add_row_broadcast(h, b2)?;
            x = g.add(x, h)?;
        }
        let lnfg = p(g, "lnf.g")?;
        let lnfb = p(g, "lnf.b")?;
        g.layer_norm_rows(x, lnfg, lnfb, T::from_f64(1e-5))
    }

    /// Convenience: tokenize and encode a prompt string.
    pub fn encode_prompt(&self, g: &mut Graph<T>, prompt: &str) -> Result<Var> {
        let ids = self.token_ids(prompt);
        self.encode(g, &ids)
    }
}
