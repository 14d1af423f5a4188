// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal mediation analysis over model components.
//!
//! The bias ratio of an input is `p(anti) / p(stereo)` at the final
//! position. A component's natural indirect effect is the mean, over
//! counterfactual pairs, of `b_intv / b_null - 1`, where `b_intv` is the
//! ratio on `x` after the component's write is replaced by its write on
//! `x_cf`.

use rayon::prelude::*;

use crate::autograd::Real;
use crate::corpus::{MinimalPair, Targets};
use crate::error::{Error, Result};
use crate::model::{ActivationCache, ComponentId, InterventionSpec, Scope, Transformer};
use crate::ranked::RankedEntry;

/// `p(anti) / p(stereo)` under `softmax(logits)`.
pub fn bias_ratio<F: Real>(logits: &[F], anti: usize, stereo: usize) -> Result<f64> {
    if anti == stereo {
        return Err(Error::invalid("anti and stereo targets coincide"));
    }
    let n = logits.len();
    if anti >= n || stereo >= n {
        return Err(Error::OutOfVocabulary {
            id: anti.max(stereo),
            vocab_size: n,
        });
    }
    if logits.iter().any(|l| l.is_nan() || *l == F::infinity()) {
        return Err(Error::NonFinite("logits contain NaN or +inf".into()));
    }
    let (la, ls) = (logits[anti].as_f64(), logits[stereo].as_f64());
    if !la.is_finite() || !ls.is_finite() {
        return Err(Error::NonFinite("target logit is -inf".into()));
    }
    let ratio = (la - ls).exp();
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::NonFinite(format!("bias ratio {ratio}")));
    }
    Ok(ratio)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NieScore {
    pub component: ComponentId,
    pub nie: f64,
    pub n_examples: usize,
}

impl From<&NieScore> for RankedEntry {
    fn from(s: &NieScore) -> Self {
        RankedEntry {
            component: s.component,
            score: s.nie,
            n_examples: s.n_examples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    TopK,
    KGreedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryResult {
    /// Selected components with their scores. For k-greedy, each score is
    /// the joint NIE of the set up to and including that component.
    pub ranked: Vec<NieScore>,
    pub strategy: Strategy,
    pub k: usize,
}

impl DiscoveryResult {
    pub fn components(&self) -> Vec<ComponentId> {
        self.ranked.iter().map(|s| s.component).collect()
    }

    pub fn entries(&self) -> Vec<RankedEntry> {
        self.ranked.iter().map(RankedEntry::from).collect()
    }
}

/// A pair with its unpatched ratio and counterfactual activations.
pub struct PreparedPair {
    x: Vec<usize>,
    targets: Targets,
    b_null: f64,
    cf_cache: ActivationCache<f32>,
}

/// Runs the unpatched and counterfactual passes once per pair.
pub fn prepare(model: &Transformer<f32>, dataset: &[MinimalPair]) -> Result<Vec<PreparedPair>> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    dataset
        .par_iter()
        .map(|pair| {
            let targets = pair.targets()?;
            let base = model.final_logits(&pair.x)?;
            let b_null = bias_ratio(&base, targets.anti, targets.stereo)?;
            if b_null <= 0.0 {
                return Err(Error::NonFinite("b_null is zero".into()));
            }
            let (_, cache) = model.forward(&pair.x_cf, true)?;
            Ok(PreparedPair {
                x: pair.x.clone(),
                targets,
                b_null,
                cf_cache: cache.expect("capture requested"),
            })
        })
        .collect()
}

/// NIE of swapping every component of `set` simultaneously.
pub fn joint_nie(model: &Transformer<f32>, prepared: &[PreparedPair], set: &[ComponentId], scope: Scope) -> Result<f64> {
    if prepared.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let mut total = 0.0;
    for p in prepared {
        let spec = InterventionSpec::swap_all(set, scope, &p.cf_cache)?;
        let (logits, _) = model.forward_with_interventions(&p.x, &spec)?;
        let last = logits.row(logits.rows() - 1);
        let b_intv = bias_ratio(last, p.targets.anti, p.targets.stereo)?;
        total += b_intv / p.b_null - 1.0;
    }
    Ok(total / prepared.len() as f64)
}

pub fn nie(model: &Transformer<f32>, dataset: &[MinimalPair], component: ComponentId) -> Result<NieScore> {
    let prepared = prepare(model, dataset)?;
    Ok(NieScore {
        component,
        nie: joint_nie(model, &prepared, &[component], Scope::FinalOnly)?,
        n_examples: dataset.len(),
    })
}

fn check_request(k: usize, components: &[ComponentId]) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > components.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} candidate components",
            components.len()
        )));
    }
    let mut sorted = components.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != components.len() {
        return Err(Error::invalid("candidate components contain duplicates"));
    }
    Ok(())
}

/// Descending score, ties by component order.
fn rank(scores: &mut [NieScore]) {
    scores.sort_by(|a, b| b.nie.total_cmp(&a.nie).then(a.component.cmp(&b.component)));
}

/// Individual NIE of every candidate, ranked.
pub fn sweep(
    model: &Transformer<f32>,
    prepared: &[PreparedPair],
    components: &[ComponentId],
    scope: Scope,
) -> Result<Vec<NieScore>> {
    for &c in components {
        model.config().check_component(c)?;
    }
    let mut scores = components
        .par_iter()
        .map(|&c| {
            Ok(NieScore {
                component: c,
                nie: joint_nie(model, prepared, &[c], scope)?,
                n_examples: prepared.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rank(&mut scores);
    Ok(scores)
}

/// The `k` components with the largest individual NIE.
pub fn top_k(
    model: &Transformer<f32>,
    dataset: &[MinimalPair],
    k: usize,
    components: &[ComponentId],
    scope: Scope,
) -> Result<DiscoveryResult> {
    check_request(k, components)?;
    let prepared = prepare(model, dataset)?;
    let mut ranked = sweep(model, &prepared, components, scope)?;
    ranked.truncate(k);
    Ok(DiscoveryResult {
        ranked,
        strategy: Strategy::TopK,
        k,
    })
}

/// Grows the set one component at a time, each step adding the candidate
/// whose joint swap with the current set has the largest NIE.
pub fn k_greedy(
    model: &Transformer<f32>,
    dataset: &[MinimalPair],
    k: usize,
    components: &[ComponentId],
    scope: Scope,
) -> Result<DiscoveryResult> {
    check_request(k, components)?;
    for &c in components {
        model.config().check_component(c)?;
    }
    let prepared = prepare(model, dataset)?;
    let mut selected: Vec<ComponentId> = Vec::with_capacity(k);
    let mut ranked = Vec::with_capacity(k);
    for _ in 0..k {
        let remaining: Vec<ComponentId> = components.iter().copied().filter(|c| !selected.contains(c)).collect();
        let mut scores = remaining
            .par_iter()
            .map(|&c| {
                let mut set = selected.clone();
                set.push(c);
                Ok(NieScore {
                    component: c,
                    nie: joint_nie(model, &prepared, &set, scope)?,
                    n_examples: prepared.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rank(&mut scores);
        let best = scores[0];
        selected.push(best.component);
        ranked.push(best);
    }
    Ok(DiscoveryResult {
        ranked,
        strategy: Strategy::KGreedy,
        k,
    })
}
