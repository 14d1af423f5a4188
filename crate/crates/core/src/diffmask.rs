// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset-global stochastic masks over components (DiffMask+).
//!
//! Each masked component's write is replaced by `h + m (h_cf - h)`, where
//! `h_cf` is its write on the counterfactual input and `m` is drawn from a
//! hard-concrete distribution with a learned location. Training minimizes
//!
//! ```text
//! task + λ (Σ P(m ≠ 0) − α) + β KL(p ‖ p_masked)
//! ```
//!
//! over locations by Adam and maximizes it over `λ ≥ 0` by projected ascent.
//! `task = p_masked(stereo) / p_masked(anti)` is evaluated as the
//! exponential of the clamped logit difference.

use rand::Rng;
use rand_distr::Open01;
use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::{Real, Tape, Var};
use crate::corpus::{MinimalPair, Targets};
use crate::error::{Error, Result};
use crate::model::{ActivationCache, ComponentId, ForwardHook, Scope, Transformer};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Stream};

/// Rounding slack so a location of exactly 0 binarizes to 1.
const BINARIZE_SLACK: f64 = 1e-12;

/// Clamp applied to the stereo-minus-anti logit gap before exponentiation.
pub const TASK_EXPONENT_CLAMP: f64 = 20.0;

// ---------------------------------------------------------------------------
// Hard concrete distribution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardConcrete {
    /// Unconstrained location logits, one per component.
    pub location: Vec<f64>,
    pub temperature: f64,
    /// Stretch interval `(lower, upper)` with `lower < 0 < 1 < upper`.
    pub stretch: (f64, f64),
}

impl HardConcrete {
    pub const DEFAULT_TEMPERATURE: f64 = 2.0 / 3.0;
    pub const DEFAULT_STRETCH: (f64, f64) = (-0.1, 1.1);

    pub fn new(location: Vec<f64>) -> Self {
        Self {
            location,
            temperature: Self::DEFAULT_TEMPERATURE,
            stretch: Self::DEFAULT_STRETCH,
        }
    }

    pub fn len(&self) -> usize {
        self.location.len()
    }

    pub fn is_empty(&self) -> bool {
        self.location.is_empty()
    }

    /// Shift inside `P(m ≠ 0) = sigmoid(z - shift)`.
    fn l0_shift(&self) -> f64 {
        let (lo, hi) = self.stretch;
        self.temperature * (-lo / hi).ln()
    }

    /// Mask for uniform noise `u ∈ (0, 1)`.
    pub fn mask_from_noise(&self, noise: &[f64]) -> Vec<f64> {
        let (lo, hi) = self.stretch;
        self.location
            .iter()
            .zip(noise)
            .map(|(&z, &u)| {
                let s = sigmoid(((u.ln() - (1.0 - u).ln()) + z) / self.temperature);
                (s * (hi - lo) + lo).clamp(0.0, 1.0)
            })
            .collect()
    }

    pub fn draw_noise(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.len()).map(|_| rng.sample(Open01)).collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mask_from_noise(&self.draw_noise(rng))
    }

    /// `P(m_i ≠ 0)` per entry; the sum is the expected L0 norm.
    pub fn expected_nonzero(&self) -> Vec<f64> {
        let shift = self.l0_shift();
        self.location.iter().map(|&z| sigmoid(z - shift)).collect()
    }

    /// `E[m_i]` per entry, integrating `P(m > y)` over `y ∈ [0, 1]`.
    pub fn expected_mask(&self) -> Vec<f64> {
        let (lo, hi) = self.stretch;
        let tau = self.temperature;
        self.location
            .iter()
            .map(|&z| {
                let tail = |y: f64| {
                    let x = (y - lo) / (hi - lo);
                    sigmoid(z - tau * (x.ln() - (1.0 - x).ln()))
                };
                simpson(tail, 0.0, 1.0, MEAN_QUADRATURE_INTERVALS).clamp(0.0, 1.0)
            })
            .collect()
    }
}

const MEAN_QUADRATURE_INTERVALS: usize = 2048;

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mask distribution plus the Lagrangian's coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskParams {
    pub dist: HardConcrete,
    /// Lagrange multiplier of the sparsity constraint, kept non-negative.
    pub lambda: f64,
    /// Target expected number of unmasked components.
    pub alpha: f64,
    /// Weight of the output-faithfulness KL term.
    pub beta: f64,
}

impl MaskParams {
    /// Locations at 0, where every expected mask entry is 0.5.
    pub fn init(k: usize, alpha: f64, beta: f64) -> Self {
        Self {
            dist: HardConcrete::new(vec![0.0; k]),
            lambda: 0.0,
            alpha,
            beta,
        }
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub task: f64,
    pub sparsity: f64,
    pub kl: f64,
    pub total: f64,
}

/// Loss from final-position logits, computed directly in `f64`.
pub fn diffmask_loss<F: Real>(masked: &[F], base: &[F], targets: Targets, params: &MaskParams) -> Result<LossTerms> {
    let lp = log_softmax(base);
    let lq = log_softmax(masked);
    let gap = (masked[targets.stereo].as_f64() - masked[targets.anti].as_f64())
        .clamp(-TASK_EXPONENT_CLAMP, TASK_EXPONENT_CLAMP);
    let task = gap.exp();
    let l0: f64 = params.dist.expected_nonzero().iter().sum();
    let sparsity = params.lambda * (l0 - params.alpha);
    let kl = params.beta * lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
    let total = task + sparsity + kl;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("diffmask loss {total}")));
    }
    Ok(LossTerms {
        task,
        sparsity,
        kl,
        total,
    })
}

fn log_softmax<F: Real>(xs: &[F]) -> Vec<f64> {
    let max = xs.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x.as_f64() - lse).collect()
}

// ---------------------------------------------------------------------------
// Masked forward
// ---------------------------------------------------------------------------

/// A pair with its counterfactual activations and unmasked output.
pub struct MaskPair<F: Real = f32> {
    pub x: Vec<usize>,
    pub targets: Targets,
    pub cf_cache: ActivationCache<F>,
    pub base_logits: Vec<F>,
}

impl<F: Real> MaskPair<F> {
    pub fn prepare(model: &Transformer<F>, pair: &MinimalPair) -> Result<Self> {
        let targets = pair.targets()?;
        let (_, cache) = model.forward(&pair.x_cf, true)?;
        Ok(Self {
            x: pair.x.clone(),
            targets,
            cf_cache: cache.expect("capture requested"),
            base_logits: model.final_logits(&pair.x)?,
        })
    }
}

/// Mixes counterfactual writes into the listed components.
struct MixHook<'a, F: Real> {
    components: &'a [ComponentId],
    mask: &'a [Var],
    cf: &'a ActivationCache<F>,
    scope: Scope,
}

impl<F: Real> ForwardHook<F> for MixHook<'_, F> {
    fn component_output(&mut self, tape: &mut Tape<F>, c: ComponentId, out: Var) -> Result<Var> {
        let Some(i) = self.components.iter().position(|&k| k == c) else {
            return Ok(out);
        };
        let src = self
            .cf
            .get(c)
            .ok_or_else(|| Error::Intervention(format!("counterfactual cache lacks {c}")))?;
        let seq = tape.value(out).rows();
        let m = self.mask[i];
        match self.scope {
            Scope::FinalOnly => {
                let h = tape.row(out, seq - 1)?;
                let h_cf = tape.constant(crate::autograd::Tensor::vector(src.row(seq - 1).to_vec()));
                let diff = tape.sub(h_cf, h)?;
                let step = tape.mul(diff, m)?;
                let mixed = tape.add(h, step)?;
                Ok(tape.replace_row(out, seq - 1, mixed)?)
            }
            Scope::AllPositions => {
                let cols = src.cols();
                let h_cf = crate::autograd::Tensor::new(vec![seq, cols], src.data()[..seq * cols].to_vec())?;
                let h_cf = tape.constant(h_cf);
                let diff = tape.sub(h_cf, out)?;
                let step = tape.mul(diff, m)?;
                Ok(tape.add(out, step)?)
            }
        }
    }
}

fn check_mask_len(mask_len: usize, components: &[ComponentId]) -> Result<()> {
    if mask_len != components.len() {
        return Err(Error::invalid(format!(
            "mask has {mask_len} entries for {} components",
            components.len()
        )));
    }
    Ok(())
}

/// Final-position logits on `pair.x` with each component's write mixed
/// toward its counterfactual by `mask`, together with the unmasked logits.
/// Components whose mask entry is exactly 0 are left untouched.
pub fn masked_forward<F: Real>(
    model: &Transformer<F>,
    pair: &MinimalPair,
    mask: &[f64],
    components: &[ComponentId],
    scope: Scope,
) -> Result<(Vec<F>, Vec<F>)> {
    check_mask_len(mask.len(), components)?;
    let prepared = MaskPair::prepare(model, pair)?;
    let active: Vec<(ComponentId, f64)> = components
        .iter()
        .copied()
        .zip(mask.iter().copied())
        .filter(|&(_, m)| m != 0.0)
        .collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let comps: Vec<ComponentId> = active.iter().map(|a| a.0).collect();
    let vars: Vec<Var> = active
        .iter()
        .map(|&(_, m)| tape.constant(crate::autograd::Tensor::scalar(F::from_f64(m))))
        .collect();
    let mut hook = MixHook {
        components: &comps,
        mask: &vars,
        cf: &prepared.cf_cache,
        scope,
    };
    let logits = model.trace(&mut tape, &bound, &prepared.x, &mut hook)?;
    let lv = tape.value(logits);
    Ok((lv.row(lv.rows() - 1).to_vec(), prepared.base_logits))
}

/// Per-example part of the loss (task + KL) and its gradient with respect
/// to the locations, for fixed noise. The sparsity term is added separately.
pub fn example_loss_grad<F: Real>(
    model: &Transformer<F>,
    pair: &MaskPair<F>,
    components: &[ComponentId],
    params: &MaskParams,
    noise: &[f64],
    scope: Scope,
) -> Result<(f64, f64, Vec<f64>)> {
    let dist = &params.dist;
    check_mask_len(dist.len(), components)?;
    check_mask_len(noise.len(), components)?;
    let (lo, hi) = dist.stretch;
    let mut tape = Tape::<F>::new();
    let bound = model.bind(&mut tape, false);
    let z = tape.leaf(
        crate::autograd::Tensor::vector(dist.location.iter().map(|&v| F::from_f64(v)).collect()),
        true,
    );
    let logistic = tape.constant(crate::autograd::Tensor::vector(
        noise.iter().map(|&u| F::from_f64(u.ln() - (1.0 - u).ln())).collect(),
    ));
    let pre = tape.add(z, logistic)?;
    let pre = tape.scale(pre, 1.0 / dist.temperature);
    let s = tape.sigmoid(pre);
    let stretched = tape.scale(s, hi - lo);
    let stretched = tape.offset(stretched, lo);
    let m = tape.clamp(stretched, 0.0, 1.0)?;
    let mask: Vec<Var> = (0..components.len()).map(|i| tape.index(m, i)).collect::<std::result::Result<_, _>>()?;

    let mut hook = MixHook {
        components,
        mask: &mask,
        cf: &pair.cf_cache,
        scope,
    };
    let logits = model.trace(&mut tape, &bound, &pair.x, &mut hook)?;
    let last = tape.value(logits).rows() - 1;
    let final_row = tape.row(logits, last)?;

    let ys = tape.index(final_row, pair.targets.stereo)?;
    let ya = tape.index(final_row, pair.targets.anti)?;
    let gap = tape.sub(ys, ya)?;
    let gap = tape.clamp(gap, -TASK_EXPONENT_CLAMP, TASK_EXPONENT_CLAMP)?;
    let task = tape.exp(gap);
    let base = tape.constant(crate::autograd::Tensor::vector(pair.base_logits.clone()));
    let kl = tape.kl_divergence(base, final_row)?;
    let kl = tape.scale(kl, params.beta);
    let total = tape.add(task, kl)?;

    let task_v = tape.value(task).item().as_f64();
    let kl_v = tape.value(kl).item().as_f64();
    let grads = tape.backward_scalar(total)?;
    let g = grads.get(z).expect("location gradient");
    Ok((task_v, kl_v, g.data().iter().map(|x| x.as_f64()).collect()))
}

/// Sparsity term `λ (Σ P(m ≠ 0) − α)` and its gradient in the locations.
pub fn sparsity_loss_grad(params: &MaskParams) -> (f64, Vec<f64>) {
    let p = params.dist.expected_nonzero();
    let value = params.lambda * (p.iter().sum::<f64>() - params.alpha);
    let grad = p.iter().map(|&q| params.lambda * q * (1.0 - q)).collect();
    (value, grad)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskTrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub lr_z: f64,
    pub lr_lambda: f64,
    pub batch_size: usize,
    pub scope: Scope,
    pub seed: u64,
}

impl Default for MaskTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 1.0,
            epochs: 200,
            lr_z: 1e-3,
            lr_lambda: 1e-2,
            batch_size: 16,
            scope: Scope::FinalOnly,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub terms: LossTerms,
    pub expected_l0: f64,
    /// Multiplier at the end of the epoch.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    Diverged { epoch: usize, step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskTrainReport {
    pub components: Vec<ComponentId>,
    pub epochs: Vec<EpochRecord>,
    pub params: MaskParams,
    pub expected_mask: Vec<f64>,
    /// Components with expected mask ≥ 0.5.
    pub selected: Vec<ComponentId>,
    pub status: TrainStatus,
}

/// Learns a mask over `components` with the model frozen.
pub fn train_mask(
    model: &Transformer<f32>,
    dataset: &[MinimalPair],
    components: &[ComponentId],
    config: &MaskTrainConfig,
) -> Result<MaskTrainReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if components.is_empty() {
        return Err(Error::invalid("no components to mask"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    for &c in components {
        model.config().check_component(c)?;
    }
    let prepared = dataset
        .par_iter()
        .map(|p| MaskPair::prepare(model, p))
        .collect::<Result<Vec<_>>>()?;

    let k = components.len();
    let mut params = MaskParams::init(k, config.alpha, config.beta);
    let mut opt = Adam::new(AdamConfig::default(), &[k]);
    let mut shuffle_rng = rng::stream(config.seed, Stream::Shuffle);
    let mut noise_rng = rng::stream(config.seed, Stream::MaskNoise);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut status = TrainStatus::Completed;

    'outer: for epoch in 0..config.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        let mut sums = LossTerms::default();
        let mut n_steps = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let noises: Vec<Vec<f64>> = batch.iter().map(|_| params.dist.draw_noise(&mut noise_rng)).collect();
            let results = batch
                .par_iter()
                .zip(noises.par_iter())
                .map(|(&i, noise)| example_loss_grad(model, &prepared[i], components, &params, noise, config.scope))
                .collect::<Result<Vec<_>>>()?;
            let n = batch.len() as f64;
            let (mut task, mut kl) = (0.0, 0.0);
            let mut grad = vec![0.0; k];
            for (t, l, g) in &results {
                task += t / n;
                kl += l / n;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b / n;
                }
            }
            let (sparsity, sg) = sparsity_loss_grad(&params);
            for (a, b) in grad.iter_mut().zip(&sg) {
                *a += b;
            }
            let total = task + sparsity + kl;
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                status = TrainStatus::Diverged { epoch, step };
                break 'outer;
            }
            sums.task += task;
            sums.kl += kl;
            sums.sparsity += sparsity;
            sums.total += total;
            n_steps += 1;

            opt.begin_step();
            opt.update(0, &mut params.dist.location, &grad, None, config.lr_z);
            let l0: f64 = params.dist.expected_nonzero().iter().sum();
            params.lambda = (params.lambda + config.lr_lambda * (l0 - params.alpha)).max(0.0);
        }
        let s = n_steps.max(1) as f64;
        epochs.push(EpochRecord {
            epoch,
            terms: LossTerms {
                task: sums.task / s,
                sparsity: sums.sparsity / s,
                kl: sums.kl / s,
                total: sums.total / s,
            },
            expected_l0: params.dist.expected_nonzero().iter().sum(),
            lambda: params.lambda,
        });
    }

    let bin = binarize(&params, components, 0);
    Ok(MaskTrainReport {
        components: components.to_vec(),
        epochs,
        expected_mask: params.dist.expected_mask(),
        selected: bin.selected,
        params,
        status,
    })
}

/// Fisher-Yates shuffle driven by `rng`.
fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binarized {
    /// Components whose expected mask is at least 0.5, in component order.
    pub selected: Vec<ComponentId>,
    pub mask: Vec<bool>,
    /// The `n` components with the largest expected mask, best first.
    pub top: Vec<(ComponentId, f64)>,
}

pub fn binarize(params: &MaskParams, components: &[ComponentId], top_n: usize) -> Binarized {
    let e = params.dist.expected_mask();
    let mask: Vec<bool> = e.iter().map(|&v| v >= 0.5 - BINARIZE_SLACK).collect();
    let selected = components
        .iter()
        .zip(&mask)
        .filter(|(_, &b)| b)
        .map(|(&c, _)| c)
        .collect();
    let mut ranked: Vec<(ComponentId, f64)> = components.iter().copied().zip(e.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_n);
    Binarized {
        selected,
        mask,
        top: ranked,
    }
}
