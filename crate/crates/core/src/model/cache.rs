// SPDX-License-Identifier: MIT OR Apache-2.0

//! Captured activations and activation-patching interventions.

use std::collections::BTreeMap;

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::{ComponentId, ForwardHook, ModelConfig};

/// Per-component residual writes (`[seq, d_model]` each), residual stream
/// snapshots and attention patterns from one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache<F = f32> {
    seq_len: usize,
    d_model: usize,
    outputs: BTreeMap<ComponentId, Tensor<F>>,
    residuals: Vec<Tensor<F>>,
    patterns: BTreeMap<(usize, usize), Tensor<F>>,
}

impl<F: Real> ActivationCache<F> {
    pub fn new(seq_len: usize, d_model: usize) -> Self {
        Self {
            seq_len,
            d_model,
            outputs: BTreeMap::new(),
            residuals: Vec::new(),
            patterns: BTreeMap::new(),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn get(&self, c: ComponentId) -> Option<&Tensor<F>> {
        self.outputs.get(&c)
    }

    /// Write of component `c` at position `pos`.
    pub fn at(&self, c: ComponentId, pos: usize) -> Option<&[F]> {
        let t = self.outputs.get(&c)?;
        (pos < t.rows()).then(|| t.row(pos))
    }

    pub fn insert(&mut self, c: ComponentId, output: Tensor<F>) {
        self.outputs.insert(c, output);
    }

    pub fn remove(&mut self, c: ComponentId) -> Option<Tensor<F>> {
        self.outputs.remove(&c)
    }

    pub fn components(&self) -> impl Iterator<Item = ComponentId> + '_ {
        self.outputs.keys().copied()
    }

    /// Residual stream after the embedding (0) or after layer `i - 1`.
    pub fn residual(&self, i: usize) -> Option<&Tensor<F>> {
        self.residuals.get(i)
    }

    pub fn n_residuals(&self) -> usize {
        self.residuals.len()
    }

    /// Post-softmax attention pattern `[seq, seq]`.
    pub fn pattern(&self, layer: usize, head: usize) -> Option<&Tensor<F>> {
        self.patterns.get(&(layer, head))
    }
}

/// Which positions of a component's write get replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    FinalOnly,
    AllPositions,
}

/// Replace `component`'s write with the one stored in `source`.
#[derive(Debug, Clone, Copy)]
pub struct Replacement<'a, F = f32> {
    pub component: ComponentId,
    pub scope: Scope,
    pub source: &'a ActivationCache<F>,
}

/// A set of replacements applied during one forward pass.
#[derive(Debug, Clone, Default)]
pub struct InterventionSpec<'a, F = f32> {
    replacements: Vec<Replacement<'a, F>>,
}

impl<'a, F: Real> InterventionSpec<'a, F> {
    pub fn new() -> Self {
        Self {
            replacements: Vec::new(),
        }
    }

    /// Adds a replacement; a component may be targeted only once.
    pub fn push(&mut self, component: ComponentId, scope: Scope, source: &'a ActivationCache<F>) -> Result<()> {
        // Every scope covers the final position, so any repeat conflicts.
        if self.replacements.iter().any(|r| r.component == component) {
            return Err(Error::Intervention(format!("{component} is targeted more than once")));
        }
        self.replacements.push(Replacement {
            component,
            scope,
            source,
        });
        Ok(())
    }

    /// Replaces every listed component from the same source.
    pub fn swap_all(components: &[ComponentId], scope: Scope, source: &'a ActivationCache<F>) -> Result<Self> {
        let mut spec = Self::new();
        for &c in components {
            spec.push(c, scope, source)?;
        }
        Ok(spec)
    }

    pub fn replacements(&self) -> &[Replacement<'a, F>] {
        &self.replacements
    }

    pub fn is_empty(&self) -> bool {
        self.replacements.is_empty()
    }

    pub(super) fn validate(&self, cfg: &ModelConfig, seq_len: usize) -> Result<()> {
        for r in &self.replacements {
            cfg.check_component(r.component)?;
            if r.source.d_model != cfg.d_model {
                return Err(Error::Intervention(format!(
                    "source cache has d_model {}, model has {}",
                    r.source.d_model, cfg.d_model
                )));
            }
            let needed = match r.scope {
                Scope::FinalOnly => seq_len.checked_sub(1),
                Scope::AllPositions => (0..seq_len).last(),
            };
            if let Some(last) = needed {
                if r.source.at(r.component, last).is_none() {
                    return Err(Error::Intervention(format!(
                        "source cache has no entry for {} at position {last}",
                        r.component
                    )));
                }
            }
        }
        Ok(())
    }

    fn find(&self, c: ComponentId) -> Option<&Replacement<'a, F>> {
        self.replacements.iter().find(|r| r.component == c)
    }
}

/// Records everything the forward pass exposes.
pub(super) struct Capture<F: Real> {
    cache: ActivationCache<F>,
}

impl<F: Real> Capture<F> {
    pub(super) fn new(seq_len: usize, d_model: usize) -> Self {
        Self {
            cache: ActivationCache::new(seq_len, d_model),
        }
    }

    pub(super) fn finish(self) -> ActivationCache<F> {
        self.cache
    }
}

impl<F: Real> ForwardHook<F> for Capture<F> {
    fn component_output(&mut self, tape: &mut Tape<F>, c: ComponentId, output: Var) -> Result<Var> {
        self.cache.outputs.insert(c, tape.value(output).clone());
        Ok(output)
    }

    fn residual(&mut self, tape: &Tape<F>, _index: usize, residual: Var) {
        self.cache.residuals.push(tape.value(residual).clone());
    }

    fn attention_pattern(&mut self, tape: &Tape<F>, layer: usize, head: usize, pattern: Var) {
        self.cache.patterns.insert((layer, head), tape.value(pattern).clone());
    }
}

/// Applies an [`InterventionSpec`] and captures the resulting writes.
pub(super) struct Intervene<'s, 'a, F: Real> {
    spec: &'s InterventionSpec<'a, F>,
    capture: Capture<F>,
}

impl<'s, 'a, F: Real> Intervene<'s, 'a, F> {
    pub(super) fn new(spec: &'s InterventionSpec<'a, F>, seq_len: usize, d_model: usize) -> Self {
        Self {
            spec,
            capture: Capture::new(seq_len, d_model),
        }
    }

    pub(super) fn finish(self) -> ActivationCache<F> {
        self.capture.finish()
    }
}

/// Substitutes `source`'s write for `output` under `scope`.
pub(crate) fn patch<F: Real>(
    tape: &mut Tape<F>,
    output: Var,
    c: ComponentId,
    scope: Scope,
    source: &ActivationCache<F>,
) -> Result<Var> {
    let seq = tape.value(output).rows();
    let missing = |pos: usize| Error::Intervention(format!("source cache has no entry for {c} at position {pos}"));
    match scope {
        Scope::FinalOnly => {
            let row = source.at(c, seq - 1).ok_or_else(|| missing(seq - 1))?;
            let v = tape.constant(Tensor::vector(row.to_vec()));
            Ok(tape.replace_row(output, seq - 1, v)?)
        }
        Scope::AllPositions => {
            let src = source.get(c).ok_or_else(|| missing(0))?;
            if src.rows() < seq {
                return Err(missing(src.rows()));
            }
            let cols = src.cols();
            let data = src.data()[..seq * cols].to_vec();
            Ok(tape.constant(Tensor::new(vec![seq, cols], data)?))
        }
    }
}

impl<F: Real> ForwardHook<F> for Intervene<'_, '_, F> {
    fn component_output(&mut self, tape: &mut Tape<F>, c: ComponentId, output: Var) -> Result<Var> {
        let out = match self.spec.find(c) {
            Some(r) => patch(tape, output, c, r.scope, r.source)?,
            None => output,
        };
        self.capture.component_output(tape, c, out)
    }

    fn residual(&mut self, tape: &Tape<F>, index: usize, residual: Var) {
        self.capture.residual(tape, index, residual);
    }

    fn attention_pattern(&mut self, tape: &Tape<F>, layer: usize, head: usize, pattern: Var) {
        self.capture.attention_pattern(tape, layer, head, pattern);
    }
}
