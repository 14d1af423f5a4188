// SPDX-License-Identifier: MIT OR Apache-2.0

//! Data-level description of a computation, replayable onto any tape.
//!
//! Value slots `0..n_inputs` hold the graph inputs; each instruction appends
//! one slot. The last slot is the program output.

use std::sync::Arc;

use super::{AutogradError, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize, f64),
    Transpose(usize),
    Softmax(usize),
    LayerNorm(usize, usize, usize),
    Gelu(usize),
    Embedding(usize, Vec<usize>),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    CrossEntropy(usize, Vec<Option<usize>>),
    KlDivergence(usize, usize),
    Sum(usize),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    Index(usize, usize),
    Row(usize, usize),
    ReplaceRow(usize, usize, usize),
    MaskFill(usize, Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub n_inputs: usize,
    pub instrs: Vec<Instr>,
}

impl Program {
    pub fn new(n_inputs: usize, instrs: Vec<Instr>) -> Self {
        Self { n_inputs, instrs }
    }

    /// Replays the program onto `tape` and returns the output variable.
    pub fn record<F: Real>(&self, tape: &mut Tape<F>, inputs: &[Var]) -> Result<Var, AutogradError> {
        if inputs.len() != self.n_inputs {
            return Err(AutogradError::InvalidArgument {
                op: "evaluate",
                msg: format!("expected {} inputs, got {}", self.n_inputs, inputs.len()),
            });
        }
        let mut slots: Vec<Var> = inputs.to_vec();
        for (k, instr) in self.instrs.iter().enumerate() {
            let avail = slots.len();
            let s = |i: usize| -> Result<Var, AutogradError> {
                slots.get(i).copied().ok_or(AutogradError::InvalidArgument {
                    op: "evaluate",
                    msg: format!("instruction {k} reads slot {i}, only {avail} defined"),
                })
            };
            let out = match instr {
                Instr::MatMul(a, b) => tape.matmul(s(*a)?, s(*b)?)?,
                Instr::Add(a, b) => tape.add(s(*a)?, s(*b)?)?,
                Instr::Sub(a, b) => tape.sub(s(*a)?, s(*b)?)?,
                Instr::Mul(a, b) => tape.mul(s(*a)?, s(*b)?)?,
                Instr::Scale(a, c) => tape.scale(s(*a)?, *c),
                Instr::Offset(a, c) => tape.offset(s(*a)?, *c),
                Instr::Transpose(a) => tape.transpose(s(*a)?)?,
                Instr::Softmax(a) => tape.softmax(s(*a)?),
                Instr::LayerNorm(x, g, b) => tape.layer_norm(s(*x)?, s(*g)?, s(*b)?)?,
                Instr::Gelu(a) => tape.gelu(s(*a)?),
                Instr::Embedding(t, ids) => tape.embedding(s(*t)?, ids)?,
                Instr::Sigmoid(a) => tape.sigmoid(s(*a)?),
                Instr::Log(a) => tape.log(s(*a)?),
                Instr::Exp(a) => tape.exp(s(*a)?),
                Instr::Clamp(a, lo, hi) => tape.clamp(s(*a)?, *lo, *hi)?,
                Instr::CrossEntropy(a, t) => tape.cross_entropy(s(*a)?, t)?,
                Instr::KlDivergence(p, q) => tape.kl_divergence(s(*p)?, s(*q)?)?,
                Instr::Sum(a) => tape.sum(s(*a)?),
                Instr::SliceCols(a, st, len) => tape.slice_cols(s(*a)?, *st, *len)?,
                Instr::SliceRows(a, st, len) => tape.slice_rows(s(*a)?, *st, *len)?,
                Instr::Index(a, i) => tape.index(s(*a)?, *i)?,
                Instr::Row(a, r) => tape.row(s(*a)?, *r)?,
                Instr::ReplaceRow(a, r, v) => tape.replace_row(s(*a)?, *r, s(*v)?)?,
                Instr::MaskFill(a, m) => tape.mask_fill(s(*a)?, Arc::new(m.clone()))?,
            };
            slots.push(out);
        }
        slots.last().copied().ok_or(AutogradError::InvalidArgument {
            op: "evaluate",
            msg: "empty program with no inputs".into(),
        })
    }
}

/// Runs `program` on `inputs` without recording gradients.
pub fn evaluate<F: Real>(inputs: &[Tensor<F>], program: &Program) -> Result<Tensor<F>, AutogradError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = program.record(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Outcome of a gradient check: one entry per program input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error with a unit floor on the denominator, so gradients near
/// zero are compared in absolute terms.
pub(crate) fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares reverse-mode gradients (computed in `F`) against central
/// differences of the same program evaluated in `f64`.
///
/// The program must produce a single value.
pub fn finite_diff_check<F: Real>(
    program: &Program,
    inputs: &[Tensor<F>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, AutogradError> {
    let mut tape = Tape::<F>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = program.record(&mut tape, &vars)?;
    let grads = tape.backward_scalar(out)?;

    let base: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let eval_at = |which: usize, idx: usize, delta: f64| -> Result<f64, AutogradError> {
        let mut probe = base.clone();
        probe[which].data_mut()[idx] += delta;
        Ok(evaluate(&probe, program)?.item())
    };

    let mut checks = Vec::with_capacity(inputs.len());
    for (which, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradients are always populated");
        let mut worst = 0.0f64;
        for idx in 0..analytic.len() {
            let numeric = (eval_at(which, idx, step)? - eval_at(which, idx, -step)?) / (2.0 * step);
            worst = worst.max(rel_err(analytic.data()[idx].as_f64(), numeric));
        }
        checks.push(InputCheck {
            max_rel_err: worst,
            passed: worst <= tolerance,
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        inputs: checks,
        passed,
    })
}
