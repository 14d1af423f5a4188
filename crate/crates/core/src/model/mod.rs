// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2-style decoder-only transformer with hook points.
//!
//! Every component (embedding, each attention head, each MLP) writes an
//! additive contribution into the residual stream, and the forward pass
//! exposes each write to a [`ForwardHook`] before it is added. Attention
//! projections carry no bias terms, so a head's contribution is exactly
//! `softmax(QKᵀ/√d_head)·V·W_O[head rows]` and the per-head writes sum to the
//! attention block's output.

mod cache;
mod checkpoint;
mod selection;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use cache::{ActivationCache, InterventionSpec, Replacement, Scope};
pub use checkpoint::{load_checkpoint, CheckpointError};
pub use selection::ParamSelection;

/// Reserved padding token id. Key positions holding it are masked out of
/// attention (a padded query still attends to itself).
pub const PAD_TOKEN: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    /// Toy geometry used throughout the experiments: 4 layers × 4 heads.
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_mlp: 256,
            vocab_size: 64,
            max_seq_len: 32,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Standalone text form (`key = value` lines).
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every attention head, in (layer, head) order.
    pub fn heads(&self) -> Vec<ComponentId> {
        (0..self.n_layers)
            .flat_map(|layer| (0..self.n_heads).map(move |head| ComponentId::AttnHead { layer, head }))
            .collect()
    }

    /// Every component in computation order: embedding, then per layer the
    /// heads followed by the MLP.
    pub fn components(&self) -> Vec<ComponentId> {
        let mut out = vec![ComponentId::Embed];
        for layer in 0..self.n_layers {
            out.extend((0..self.n_heads).map(|head| ComponentId::AttnHead { layer, head }));
            out.push(ComponentId::Mlp { layer });
        }
        out
    }

    pub fn check_component(&self, c: ComponentId) -> Result<()> {
        let ok = match c {
            ComponentId::Embed => true,
            ComponentId::AttnHead { layer, head } => layer < self.n_layers && head < self.n_heads,
            ComponentId::Mlp { layer } => layer < self.n_layers,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("component {c} out of range for {self:?}")))
        }
    }
}

/// One interveneable unit of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComponentId {
    Embed,
    AttnHead { layer: usize, head: usize },
    Mlp { layer: usize },
}

impl ComponentId {
    pub fn layer(self) -> usize {
        match self {
            Self::Embed => 0,
            Self::AttnHead { layer, .. } | Self::Mlp { layer } => layer,
        }
    }

    pub fn is_head(self) -> bool {
        matches!(self, Self::AttnHead { .. })
    }

    /// Position in the forward computation; sorts by (layer, head) with the
    /// embedding first and each MLP after its layer's heads.
    fn order_key(self) -> (usize, usize, usize) {
        match self {
            Self::Embed => (0, 0, 0),
            Self::AttnHead { layer, head } => (layer, 1, head),
            Self::Mlp { layer } => (layer, 2, 0),
        }
    }
}

impl Ord for ComponentId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

impl PartialOrd for ComponentId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Embed => write!(f, "embed"),
            Self::AttnHead { layer, head } => write!(f, "L{layer}H{head}"),
            Self::Mlp { layer } => write!(f, "L{layer}MLP"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse component id {s:?}"));
        let up = s.trim().to_ascii_uppercase();
        if up == "EMBED" {
            return Ok(Self::Embed);
        }
        let rest = up.strip_prefix('L').ok_or_else(bad)?;
        if let Some(layer) = rest.strip_suffix("MLP") {
            return Ok(Self::Mlp {
                layer: layer.parse().map_err(|_| bad())?,
            });
        }
        let (layer, head) = rest.split_once('H').ok_or_else(bad)?;
        Ok(Self::AttnHead {
            layer: layer.parse().map_err(|_| bad())?,
            head: head.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for ComponentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A place where the residual stream is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Receiver {
    Component(ComponentId),
    Logits,
}

impl fmt::Display for Receiver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Receiver::Component(c) => c.fmt(f),
            Receiver::Logits => f.write_str("logits"),
        }
    }
}

impl FromStr for Receiver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("logits") {
            Ok(Receiver::Logits)
        } else {
            s.parse().map(Receiver::Component)
        }
    }
}

/// Hook points of the forward pass. All methods default to pass-through.
pub trait ForwardHook<F: Real> {
    /// Called with each component's `[seq, d_model]` residual write before
    /// it is added to the stream; the returned variable is added instead.
    fn component_output(&mut self, _tape: &mut Tape<F>, _c: ComponentId, output: Var) -> Result<Var> {
        Ok(output)
    }

    /// Called before a receiver reads the residual stream. `senders` lists
    /// every upstream contribution, whose sum is `residual`.
    fn receiver_input(
        &mut self,
        _tape: &mut Tape<F>,
        _receiver: Receiver,
        residual: Var,
        _senders: &[(ComponentId, Var)],
    ) -> Result<Var> {
        Ok(residual)
    }

    /// Residual stream after the embedding (`index` 0) and after each layer.
    fn residual(&mut self, _tape: &Tape<F>, _index: usize, _residual: Var) {}

    /// Post-softmax attention pattern `[seq, seq]` of one head.
    fn attention_pattern(&mut self, _tape: &Tape<F>, _layer: usize, _head: usize, _pattern: Var) {}
}

/// Hook that changes nothing.
pub struct NoHook;

impl<F: Real> ForwardHook<F> for NoHook {}

/// Indices of one block's parameters in the manifest.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

/// Named-tensor manifest of a model, in checkpoint order.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub wte: usize,
    pub wpe: usize,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
    pub unembed: Option<usize>,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, m, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let wte = add("wte".into(), vec![v, d]);
        let wpe = add("wpe".into(), vec![cfg.max_seq_len, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = |s: &str| format!("blocks.{l}.{s}");
                LayerParams {
                    ln1_gain: add(p("ln1.gain"), vec![d]),
                    ln1_bias: add(p("ln1.bias"), vec![d]),
                    w_q: add(p("attn.w_q"), vec![d, d]),
                    w_k: add(p("attn.w_k"), vec![d, d]),
                    w_v: add(p("attn.w_v"), vec![d, d]),
                    w_o: add(p("attn.w_o"), vec![d, d]),
                    ln2_gain: add(p("ln2.gain"), vec![d]),
                    ln2_bias: add(p("ln2.bias"), vec![d]),
                    w_in: add(p("mlp.w_in"), vec![d, m]),
                    b_in: add(p("mlp.b_in"), vec![m]),
                    w_out: add(p("mlp.w_out"), vec![m, d]),
                    b_out: add(p("mlp.b_out"), vec![d]),
                }
            })
            .collect();
        let lnf_gain = add("ln_f.gain".into(), vec![d]);
        let lnf_bias = add("ln_f.bias".into(), vec![d]);
        let unembed = (!cfg.tie_embeddings).then(|| add("unembed".into(), vec![d, v]));
        Self {
            names,
            shapes,
            wte,
            wpe,
            layers,
            lnf_gain,
            lnf_bias,
            unembed,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Decoder-only transformer with pre-LayerNorm blocks.
#[derive(Debug, Clone)]
pub struct Transformer<F = f32> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<Tensor<F>>,
}

impl<F: Real> Transformer<F> {
    /// All weights zero, layer-norm gains one.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params: Vec<Tensor<F>> = layout.shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        let mut gains = vec![layout.lnf_gain];
        for lp in &layout.layers {
            gains.extend([lp.ln1_gain, lp.ln2_gain]);
        }
        for g in gains {
            params[g].data_mut().fill(F::one());
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// GPT-2 style initialization: N(0, 0.02) weights, residual-output
    /// projections scaled by 1/√(2·n_layers), zero biases, unit gains.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut fill = |t: &mut Tensor<F>, s: f64| {
            for x in t.data_mut() {
                *x = F::from_f64(normal.sample(&mut rng) * s);
            }
        };
        let lay = model.layout.clone();
        fill(&mut model.params[lay.wte], std);
        fill(&mut model.params[lay.wpe], std / 2.0);
        for lp in &lay.layers {
            for i in [lp.w_q, lp.w_k, lp.w_v, lp.w_in] {
                fill(&mut model.params[i], std);
            }
            for i in [lp.w_o, lp.w_out] {
                fill(&mut model.params[i], resid_std);
            }
        }
        if let Some(u) = lay.unembed {
            fill(&mut model.params[u], std);
        }
        Ok(model)
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != layout.shapes[i].as_slice() {
                return Err(Error::Config(format!(
                    "{}: expected shape {:?}, got {:?}",
                    layout.names[i],
                    layout.shapes[i],
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.layout.index_of(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.layout.index_of(name).map(|i| &mut self.params[i])
    }

    pub fn cast<G: Real>(&self) -> Transformer<G> {
        Transformer {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfVocabulary {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Places every parameter on `tape` as a leaf, in manifest order.
    pub fn bind(&self, tape: &mut Tape<F>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    /// Records the forward pass on `tape` and returns the `[seq, vocab]`
    /// logits. `bound` comes from [`Transformer::bind`] on the same tape.
    pub fn trace(
        &self,
        tape: &mut Tape<F>,
        bound: &[Var],
        tokens: &[usize],
        hook: &mut dyn ForwardHook<F>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let lay = &self.layout;
        let seq = tokens.len();

        let tok = tape.embedding(bound[lay.wte], tokens)?;
        let positions: Vec<usize> = (0..seq).collect();
        let pos = tape.embedding(bound[lay.wpe], &positions)?;
        let embed = tape.add(tok, pos)?;
        let embed = hook.component_output(tape, ComponentId::Embed, embed)?;
        let mut resid = embed;
        hook.residual(tape, 0, resid);
        let mut senders = vec![(ComponentId::Embed, embed)];

        let mask = Arc::new(attention_mask(tokens));
        for (l, lp) in lay.layers.iter().enumerate() {
            let mut shared: Option<(Var, Var)> = None;
            let mut head_outs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let c = ComponentId::AttnHead { layer: l, head: h };
                let input = hook.receiver_input(tape, Receiver::Component(c), resid, &senders)?;
                let normed = match shared {
                    Some((i, n)) if i == input => n,
                    _ => {
                        let n = tape.layer_norm(input, bound[lp.ln1_gain], bound[lp.ln1_bias])?;
                        shared = Some((input, n));
                        n
                    }
                };
                let out = self.attention_head(tape, bound, lp, l, h, normed, &mask, hook)?;
                let out = hook.component_output(tape, c, out)?;
                head_outs.push((c, out));
            }
            for &(_, out) in &head_outs {
                resid = tape.add(resid, out)?;
            }
            senders.extend(head_outs);

            let c = ComponentId::Mlp { layer: l };
            let input = hook.receiver_input(tape, Receiver::Component(c), resid, &senders)?;
            let normed = tape.layer_norm(input, bound[lp.ln2_gain], bound[lp.ln2_bias])?;
            let hidden = tape.matmul(normed, bound[lp.w_in])?;
            let hidden = tape.add(hidden, bound[lp.b_in])?;
            let hidden = tape.gelu(hidden);
            let out = tape.matmul(hidden, bound[lp.w_out])?;
            let out = tape.add(out, bound[lp.b_out])?;
            let out = hook.component_output(tape, c, out)?;
            resid = tape.add(resid, out)?;
            senders.push((c, out));
            hook.residual(tape, l + 1, resid);
        }

        let input = hook.receiver_input(tape, Receiver::Logits, resid, &senders)?;
        let normed = tape.layer_norm(input, bound[lay.lnf_gain], bound[lay.lnf_bias])?;
        let unembed = match lay.unembed {
            Some(u) => bound[u],
            None => tape.transpose(bound[lay.wte])?,
        };
        Ok(tape.matmul(normed, unembed)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_head(
        &self,
        tape: &mut Tape<F>,
        bound: &[Var],
        lp: &LayerParams,
        layer: usize,
        head: usize,
        normed: Var,
        mask: &Arc<Vec<bool>>,
        hook: &mut dyn ForwardHook<F>,
    ) -> Result<Var> {
        let dh = self.config.d_head();
        let start = head * dh;
        let wq = tape.slice_cols(bound[lp.w_q], start, dh)?;
        let wk = tape.slice_cols(bound[lp.w_k], start, dh)?;
        let wv = tape.slice_cols(bound[lp.w_v], start, dh)?;
        let wo = tape.slice_rows(bound[lp.w_o], start, dh)?;
        let q = tape.matmul(normed, wq)?;
        let k = tape.matmul(normed, wk)?;
        let v = tape.matmul(normed, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.mask_fill(scores, Arc::clone(mask))?;
        let pattern = tape.softmax(scores);
        hook.attention_pattern(tape, layer, head, pattern);
        let z = tape.matmul(pattern, v)?;
        Ok(tape.matmul(z, wo)?)
    }

    /// Plain forward pass. With `capture`, also returns every component's
    /// write at every position.
    pub fn forward(&self, tokens: &[usize], capture: bool) -> Result<(Tensor<F>, Option<ActivationCache<F>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        if capture {
            let mut cap = cache::Capture::new(tokens.len(), self.config.d_model);
            let out = self.trace(&mut tape, &bound, tokens, &mut cap)?;
            Ok((tape.value(out).clone(), Some(cap.finish())))
        } else {
            let out = self.trace(&mut tape, &bound, tokens, &mut NoHook)?;
            Ok((tape.value(out).clone(), None))
        }
    }

    /// Forward pass with component writes replaced per `spec`. The returned
    /// cache holds the writes as actually used (after replacement).
    pub fn forward_with_interventions(
        &self,
        tokens: &[usize],
        spec: &InterventionSpec<'_, F>,
    ) -> Result<(Tensor<F>, ActivationCache<F>)> {
        spec.validate(&self.config, tokens.len())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut hook = cache::Intervene::new(spec, tokens.len(), self.config.d_model);
        let out = self.trace(&mut tape, &bound, tokens, &mut hook)?;
        Ok((tape.value(out).clone(), hook.finish()))
    }

    /// Logits at the final position only.
    pub fn final_logits(&self, tokens: &[usize]) -> Result<Vec<F>> {
        let (logits, _) = self.forward(tokens, false)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

impl Transformer<f32> {
    pub fn save_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save_checkpoint(self, path.as_ref())
    }

    pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<Self> {
        load_checkpoint(path)
    }
}

/// Causal mask with padded keys removed; flattened `[seq, seq]`.
fn attention_mask(tokens: &[usize]) -> Vec<bool> {
    let n = tokens.len();
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            allowed[i * n + j] = j == i || tokens[j] != PAD_TOKEN;
        }
    }
    allowed
}

/// Anything that maps a token sequence to next-token logits.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    /// `[seq, vocab]` logits; row `t` predicts token `t + 1`.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor<f32>>;
}

impl LanguageModel for Transformer<f32> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        Ok(self.forward(tokens, false)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 16,
            vocab_size: 11,
            max_seq_len: 6,
            tie_embeddings: true,
        }
    }

    #[test]
    fn component_ids_round_trip_through_text() {
        for c in ModelConfig::default().components() {
            assert_eq!(c.to_string().parse::<ComponentId>().unwrap(), c);
        }
        assert!("L1X2".parse::<ComponentId>().is_err());
    }

    #[test]
    fn component_order_is_layer_then_head() {
        let a = ComponentId::AttnHead { layer: 0, head: 3 };
        let b = ComponentId::AttnHead { layer: 1, head: 0 };
        assert!(ComponentId::Embed < a && a < ComponentId::Mlp { layer: 0 } && a < b);
    }

    #[test]
    fn default_geometry_has_sixteen_heads() {
        assert_eq!(ModelConfig::default().heads().len(), 16);
        let gpt2 = ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            ..ModelConfig::default()
        };
        assert_eq!(gpt2.heads().len(), 144);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..small()
        };
        assert!(bad.validate().is_err());
        let zero = ModelConfig { n_layers: 0, ..small() };
        assert!(zero.validate().is_err());
        let cfg = small();
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn forward_rejects_bad_tokens() {
        let m = Transformer::<f32>::random(small(), 0).unwrap();
        assert!(matches!(m.forward(&[1, 11], false), Err(Error::OutOfVocabulary { .. })));
        assert!(matches!(m.forward(&[1; 7], false), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(m.forward(&[], false), Err(Error::EmptySequence)));
    }

    #[test]
    fn zero_blocks_give_unembedded_embedding_stream() {
        let cfg = ModelConfig { n_layers: 1, ..small() };
        let mut m = Transformer::<f32>::zeroed(cfg).unwrap();
        let r = Transformer::<f32>::random(cfg, 3).unwrap();
        let (wte, wpe) = (m.layout.wte, m.layout.wpe);
        m.params[wte] = r.params[wte].clone();
        m.params[wpe] = r.params[wpe].clone();
        let tokens = [2, 5, 7];
        let (logits, _) = m.forward(&tokens, false).unwrap();

        // Reference: layer_norm(wte[tok] + wpe[pos]) · wteᵀ, computed directly.
        let d = cfg.d_model;
        for (t, &tok) in tokens.iter().enumerate() {
            let x: Vec<f64> = (0..d)
                .map(|j| f64::from(m.params[wte].row(tok)[j]) + f64::from(m.params[wpe].row(t)[j]))
                .collect();
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let xn: Vec<f64> = x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
            for v in 0..cfg.vocab_size {
                let want: f64 = (0..d).map(|j| xn[j] * f64::from(m.params[wte].row(v)[j])).sum();
                let got = f64::from(logits.row(t)[v]);
                assert!((want - got).abs() < 1e-5, "pos {t} tok {v}: {want} vs {got}");
            }
        }
    }

    #[test]
    fn final_softmax_sums_to_one() {
        let m = Transformer::<f32>::random(small(), 1).unwrap();
        let logits = m.final_logits(&[3, 4, 5, 6]).unwrap();
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = logits.iter().map(|&l| f64::from(l - max).exp()).sum();
        let total: f64 = logits.iter().map(|&l| f64::from(l - max).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn logits_are_causal() {
        let m = Transformer::<f32>::random(small(), 2).unwrap();
        let (a, _) = m.forward(&[3, 4, 5, 6], false).unwrap();
        let (b, _) = m.forward(&[3, 4, 9, 10], false).unwrap();
        for t in 0..2 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn padded_keys_are_ignored() {
        let m = Transformer::<f32>::random(small(), 4).unwrap();
        let mask = attention_mask(&[PAD_TOKEN, 3, 4]);
        assert_eq!(mask, vec![true, false, false, false, true, false, false, true, true]);
        // A padded prefix must not produce NaNs.
        let (logits, _) = m.forward(&[PAD_TOKEN, PAD_TOKEN, 3, 4], false).unwrap();
        assert!(logits.data().iter().all(|x| x.is_finite()));
    }
}
