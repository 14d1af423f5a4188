// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameter-efficient fine-tuning.
//!
//! Gradients are taken for the whole model and applied through a
//! [`ParamSelection`] mask: unselected entries are never written, so they
//! stay bit-identical. Training minimizes next-token cross-entropy with
//! AdamW, a linear or constant learning rate, and patience-based early
//! stopping that restores the best validation epoch.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::corpus::{Gender, LabeledSequence};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::model::{ComponentId, ModelConfig, NoHook, ParamSelection, Transformer, PAD_TOKEN};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Decays from the base rate to 0 over `max_epochs`.
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            max_epochs: 20,
            patience: 10,
            schedule: Schedule::Linear,
            weight_decay: 0.01,
            batch_size: 16,
            split_fraction: 0.9,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay non-negative".into());
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Linear => self.lr * (1.0 - step as f64 / total.max(1) as f64).max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean token loss over each epoch's training batches.
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    /// Learning rate of each optimizer step.
    pub lr: Vec<f64>,
    /// Index into `valid_loss` of the restored epoch.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best_valid_loss(&self) -> f64 {
        self.valid_loss[self.best_epoch]
    }
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Per-label shuffled split; each label contributes `round(n * fraction)`
/// sequences to the training side.
pub fn split_balanced(
    corpus: &[LabeledSequence],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSequence>, Vec<LabeledSequence>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut rng = rng::stream(seed, Stream::Split);
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for label in [Gender::Male, Gender::Female] {
        let group: Vec<&LabeledSequence> = corpus.iter().filter(|s| s.label == label).collect();
        if group.is_empty() {
            return Err(Error::invalid(format!("corpus has no {label:?} sequences")));
        }
        let n_train = ((group.len() as f64 * fraction).round() as usize).min(group.len());
        let order = index::sample(&mut rng, group.len(), group.len());
        for (rank, i) in order.iter().enumerate() {
            let dst = if rank < n_train { &mut train } else { &mut valid };
            dst.push(group[i].clone());
        }
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("split leaves one side empty"));
    }
    Ok((train, valid))
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn next_token_targets(tokens: &[usize]) -> Vec<Option<usize>> {
    (0..tokens.len())
        .map(|i| tokens.get(i + 1).copied().filter(|&t| t != PAD_TOKEN))
        .collect()
}

/// Token-weighted mean NLL over a corpus.
pub fn corpus_loss(model: &Transformer<f32>, corpus: &[Vec<usize>]) -> Result<f64> {
    let (nll, n) = evaluation::corpus_nll(model, corpus)?;
    if n == 0 {
        return Err(Error::invalid("corpus has no predicted tokens"));
    }
    Ok(nll / n as f64)
}

/// Per-parameter gradient; `None` where the parameter is not selected.
type ParamGrads = Vec<Option<Vec<f32>>>;

/// Summed NLL, prediction count and per-parameter gradient of the sum.
fn sequence_grad(model: &Transformer<f32>, tokens: &[usize]) -> Result<(f64, usize, ParamGrads)> {
    let targets = next_token_targets(tokens);
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Ok((0.0, 0, vec![None; model.params().len()]));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let logits = model.trace(&mut tape, &bound, tokens, &mut NoHook)?;
    let mean = tape.cross_entropy(logits, &targets)?;
    let sum = tape.scale(mean, count as f64);
    let nll = tape.value(sum).item() as f64;
    let mut grads = tape.backward_scalar(sum)?;
    let per_param = bound.iter().map(|&v| grads.take(v).map(|g| g.to_vec())).collect();
    Ok((nll, count, per_param))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Fine-tunes the selected entries of `model` on `corpus`, split into
/// label-balanced training and validation sets per `config`.
pub fn finetune(
    model: &Transformer<f32>,
    selection: &ParamSelection,
    corpus: &[LabeledSequence],
    config: &FineTuneConfig,
) -> Result<(Transformer<f32>, TrainHistory)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("fine-tuning corpus is empty"));
    }
    let (train, valid) = split_balanced(corpus, config.split_fraction, config.seed)?;
    let train: Vec<Vec<usize>> = train.into_iter().map(|s| s.tokens).collect();
    let valid: Vec<Vec<usize>> = valid.into_iter().map(|s| s.tokens).collect();
    fit(model, selection, &train, &valid, config)
}

/// Language-model training of every parameter on unlabeled text, with a
/// shuffled split per `config`.
pub fn pretrain(
    model: &Transformer<f32>,
    corpus: &[Vec<usize>],
    config: &FineTuneConfig,
) -> Result<(Transformer<f32>, TrainHistory)> {
    config.validate()?;
    if corpus.len() < 2 {
        return Err(Error::invalid("training corpus needs at least two sequences"));
    }
    let mut rng = rng::stream(config.seed, Stream::Split);
    let order = index::sample(&mut rng, corpus.len(), corpus.len());
    let n_train = ((corpus.len() as f64 * config.split_fraction).round() as usize).clamp(1, corpus.len() - 1);
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (rank, i) in order.iter().enumerate() {
        let dst = if rank < n_train { &mut train } else { &mut valid };
        dst.push(corpus[i].clone());
    }
    fit(model, &ParamSelection::full(model.config()), &train, &valid, config)
}

/// Training loop over pre-split data.
pub fn fit(
    model: &Transformer<f32>,
    selection: &ParamSelection,
    train: &[Vec<usize>],
    valid: &[Vec<usize>],
    config: &FineTuneConfig,
) -> Result<(Transformer<f32>, TrainHistory)> {
    config.validate()?;
    if selection.is_empty() {
        return Err(Error::invalid("parameter selection is empty"));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    if selection.names() != model.layout().names.as_slice() {
        return Err(Error::invalid("selection does not match the model's parameters"));
    }
    for s in train.iter().chain(valid) {
        model.check_tokens(s)?;
    }

    let mut model = model.clone();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut opt = Adam::new(
        AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        &sizes,
    );
    let mut shuffle_rng = rng::stream(config.seed, Stream::Shuffle);
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.max_epochs;

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        valid_loss: Vec::new(),
        lr: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best: Option<(f64, Transformer<f32>)> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;

    'epochs: for _epoch in 0..config.max_epochs {
        let order = index::sample(&mut shuffle_rng, train.len(), train.len()).into_vec();
        let (mut epoch_nll, mut epoch_n) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let parts = batch
                .par_iter()
                .map(|&i| sequence_grad(&model, &train[i]))
                .collect::<Result<Vec<_>>>()?;
            let n_tokens: usize = parts.iter().map(|p| p.1).sum();
            let nll: f64 = parts.iter().map(|p| p.0).sum();
            if !nll.is_finite() {
                history.stop_reason = StopReason::Diverged;
                break 'epochs;
            }
            epoch_nll += nll;
            epoch_n += n_tokens;
            if n_tokens == 0 {
                continue;
            }
            let lr = config.lr_at(step, total_steps);
            history.lr.push(lr);
            step += 1;
            opt.begin_step();
            for (slot, size) in sizes.iter().enumerate() {
                let mask = selection.mask(slot);
                if !mask.iter().any(|&b| b) {
                    continue;
                }
                let mut grad = vec![0.0f64; *size];
                for part in &parts {
                    if let Some(g) = &part.2[slot] {
                        for (a, &b) in grad.iter_mut().zip(g) {
                            *a += b as f64;
                        }
                    }
                }
                let grad: Vec<f32> = grad.iter().map(|g| (g / n_tokens as f64) as f32).collect();
                opt.update(slot, model.params_mut()[slot].data_mut(), &grad, Some(mask), lr);
            }
        }
        history.train_loss.push(epoch_nll / epoch_n.max(1) as f64);
        let v = corpus_loss(&model, valid)?;
        if !v.is_finite() {
            history.stop_reason = StopReason::Diverged;
            break;
        }
        history.valid_loss.push(v);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            history.best_epoch = history.valid_loss.len() - 1;
            best = Some((v, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    match best {
        Some((_, m)) => Ok((m, history)),
        None => Err(Error::NonFinite("fine-tuning diverged before the first epoch finished".into())),
    }
}

// ---------------------------------------------------------------------------
// Selections
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Select {
    FullModel,
    /// `n` heads drawn uniformly without replacement from those not in
    /// `excluded`.
    RandomHeads {
        n: usize,
        excluded: Vec<ComponentId>,
        seed: u64,
    },
    AllAttnLayers,
    LastNAttnLayers(usize),
    Components(Vec<ComponentId>),
}

/// Heads chosen for [`Select::RandomHeads`], in component order.
pub fn random_heads(config: &ModelConfig, n: usize, excluded: &[ComponentId], seed: u64) -> Result<Vec<ComponentId>> {
    for &c in excluded {
        config.check_component(c)?;
    }
    let pool: Vec<ComponentId> = config.heads().into_iter().filter(|h| !excluded.contains(h)).collect();
    if n > pool.len() {
        return Err(Error::invalid(format!(
            "cannot draw {n} heads from {} eligible",
            pool.len()
        )));
    }
    let mut rng = rng::stream(seed, Stream::RandomHeads);
    let mut picked: Vec<ComponentId> = index::sample(&mut rng, pool.len(), n).iter().map(|i| pool[i]).collect();
    picked.sort();
    Ok(picked)
}

pub fn baseline_selections(config: &ModelConfig, kind: &Select) -> Result<ParamSelection> {
    match kind {
        Select::FullModel => Ok(ParamSelection::full(config)),
        Select::RandomHeads { n, excluded, seed } => {
            ParamSelection::for_components(config, &random_heads(config, *n, excluded, *seed)?)
        }
        Select::AllAttnLayers => ParamSelection::attention_layers(config, 0..config.n_layers),
        Select::LastNAttnLayers(n) => {
            if *n > config.n_layers {
                return Err(Error::invalid(format!(
                    "cannot select the last {n} of {} layers",
                    config.n_layers
                )));
            }
            ParamSelection::attention_layers(config, config.n_layers - n..config.n_layers)
        }
        Select::Components(cs) => ParamSelection::for_components(config, cs),
    }
}
