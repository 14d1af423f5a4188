// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-wired toy models with a known bias mechanism.
//!
//! Every non-padding token embeds as `+1` on two feature dimensions and `-1`
//! on two shared sink dimensions, so all embeddings are mean-zero with equal
//! norm and layer norm rescales them identically. A planted head queries
//! with the query token's feature, keys on the shared gender feature, and
//! copies the gender-specific feature onto an answer dimension that the
//! unembedding reads out as the bound answer token. Everything else writes
//! zero (or scaled noise), so which heads carry the bias is known exactly.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::corpus::{Gender, LabeledSequence, MinimalPair, Vocab, PAD, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::model::{ComponentId, ModelConfig, Transformer, PAD_TOKEN};
use crate::rng::{self, Stream};

// Residual-stream dimensions with a fixed role.
const KEY: usize = 0;
const QRY: usize = 1;
const GEN_A: usize = 2;
const GEN_B: usize = 3;
const ANS_A: usize = 4;
const ANS_B: usize = 5;
const FILL: usize = 6;
const FIRST_ID: usize = 7;
const N_SINKS: usize = 2;

const QK_WEIGHT: f64 = 2.5;
const OV_WEIGHT: f64 = 0.5;
const ANSWER_READOUT: f64 = 1.0;
const BIGRAM_READOUT: f64 = 1.0;
/// Bound on a non-planted head's write relative to a planted head's.
const NOISE_WRITE_RATIO: f64 = 0.01;

/// What to plant and where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub config: ModelConfig,
    pub planted_heads: Vec<ComponentId>,
    /// Token ids of gender A and gender B.
    pub gender_tokens: (usize, usize),
    /// Answers bound to gender A and gender B respectively.
    pub answer_tokens: (usize, usize),
    /// Token that asks for the answer; planted heads read from its position.
    pub query_token: usize,
    pub noise_scale: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            config: ModelConfig {
                n_layers: 4,
                n_heads: 4,
                d_model: 64,
                d_mlp: 256,
                vocab_size: 32,
                max_seq_len: 16,
                tie_embeddings: false,
            },
            planted_heads: vec![
                ComponentId::AttnHead { layer: 1, head: 2 },
                ComponentId::AttnHead { layer: 3, head: 0 },
            ],
            gender_tokens: (2, 3),
            answer_tokens: (4, 5),
            query_token: 6,
            noise_scale: 0.0,
        }
    }
}

impl PlantSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plant spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if cfg.d_head() < 4 {
            return Err(Error::Config(format!(
                "d_model / n_heads = {} is below the 4 head dimensions the construction needs",
                cfg.d_head()
            )));
        }
        if cfg.tie_embeddings {
            return Err(Error::Config("planted models need an untied unembedding".into()));
        }
        if self.planted_heads.is_empty() {
            return Err(Error::Config("no planted heads".into()));
        }
        for (i, &h) in self.planted_heads.iter().enumerate() {
            if !h.is_head() {
                return Err(Error::Config(format!("planted component {h} is not an attention head")));
            }
            cfg.check_component(h)?;
            if self.planted_heads[..i].contains(&h) {
                return Err(Error::Config(format!("planted head {h} listed twice")));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be finite and non-negative".into()));
        }
        let special = self.special_tokens();
        for (i, &t) in special.iter().enumerate() {
            if t >= cfg.vocab_size || t == PAD_TOKEN || t == UNK_TOKEN {
                return Err(Error::Config(format!("token id {t} is reserved or out of vocabulary")));
            }
            if special[..i].contains(&t) {
                return Err(Error::Config(format!("token id {t} has two roles")));
            }
        }
        if self.filler_tokens().len() < 2 {
            return Err(Error::Config("vocabulary leaves fewer than 2 filler tokens".into()));
        }
        let needed = FIRST_ID + self.id_tokens().len() + N_SINKS;
        if needed > cfg.d_model {
            return Err(Error::Config(format!(
                "d_model {} is too small for a vocabulary of {} (needs {needed})",
                cfg.d_model, cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn special_tokens(&self) -> [usize; 5] {
        [
            self.gender_tokens.0,
            self.gender_tokens.1,
            self.answer_tokens.0,
            self.answer_tokens.1,
            self.query_token,
        ]
    }

    /// Tokens with no role in the mechanism (everything except PAD, UNK and
    /// the special tokens), in id order.
    pub fn filler_tokens(&self) -> Vec<usize> {
        let special = self.special_tokens();
        (0..self.config.vocab_size)
            .filter(|t| *t != PAD_TOKEN && *t != UNK_TOKEN && !special.contains(t))
            .collect()
    }

    /// Tokens that get their own identity dimension (all but PAD and the
    /// two gender tokens).
    fn id_tokens(&self) -> Vec<usize> {
        (0..self.config.vocab_size)
            .filter(|t| *t != PAD_TOKEN && *t != self.gender_tokens.0 && *t != self.gender_tokens.1)
            .collect()
    }

    fn id_dim(&self, token: usize) -> Option<usize> {
        self.id_tokens().iter().position(|&t| t == token).map(|i| FIRST_ID + i)
    }

    pub fn answer_for(&self, gender: Gender) -> usize {
        match gender {
            Gender::Male => self.answer_tokens.0,
            Gender::Female => self.answer_tokens.1,
        }
    }

    pub fn gender_token(&self, gender: Gender) -> usize {
        match gender {
            Gender::Male => self.gender_tokens.0,
            Gender::Female => self.gender_tokens.1,
        }
    }

    /// Readable names for every token id.
    pub fn vocab(&self) -> Vocab {
        let fillers = self.filler_tokens();
        let mut v = Vocab::new();
        for t in 2..self.config.vocab_size {
            let name = if t == self.gender_tokens.0 {
                "gen_a".to_string()
            } else if t == self.gender_tokens.1 {
                "gen_b".to_string()
            } else if t == self.answer_tokens.0 {
                "ans_a".to_string()
            } else if t == self.answer_tokens.1 {
                "ans_b".to_string()
            } else if t == self.query_token {
                "query".to_string()
            } else {
                let i = fillers.iter().position(|&f| f == t).expect("filler");
                format!("w{i:02}")
            };
            v.add(&name);
        }
        debug_assert_eq!(v.token(0), Some(PAD));
        v
    }
}

/// Builds the planted model. `seed` only drives the non-planted noise.
pub fn construct_planted_model(spec: &PlantSpec, seed: u64) -> Result<Transformer<f32>> {
    spec.validate()?;
    let cfg = spec.config;
    let (d, dh, v) = (cfg.d_model, cfg.d_head(), cfg.vocab_size);
    let mut model = Transformer::<f32>::zeroed(cfg)?;
    let layout = model.layout().clone();
    let params = model.params_mut();
    let set = |t: &mut Tensor<f32>, r: usize, c: usize, x: f64| {
        let cols = t.cols();
        t.data_mut()[r * cols + c] = x as f32;
    };

    // Token embeddings.
    let (sink_a, sink_b) = (d - 2, d - 1);
    for t in 1..v {
        let (f1, f2) = if t == spec.gender_tokens.0 {
            (KEY, GEN_A)
        } else if t == spec.gender_tokens.1 {
            (KEY, GEN_B)
        } else if t == spec.query_token {
            (QRY, spec.id_dim(t).expect("id"))
        } else {
            (FILL, spec.id_dim(t).expect("id"))
        };
        let wte = &mut params[layout.wte];
        set(wte, t, f1, 1.0);
        set(wte, t, f2, 1.0);
        set(wte, t, sink_a, -1.0);
        set(wte, t, sink_b, -1.0);
    }

    // Planted heads.
    for &h in &spec.planted_heads {
        let ComponentId::AttnHead { layer, head } = h else { unreachable!() };
        let lp = layout.layers[layer];
        let s = head * dh;
        set(&mut params[lp.w_q], QRY, s, QK_WEIGHT);
        set(&mut params[lp.w_k], KEY, s, QK_WEIGHT);
        set(&mut params[lp.w_v], GEN_A, s + 1, 1.0);
        set(&mut params[lp.w_v], GEN_B, s + 2, 1.0);
        set(&mut params[lp.w_o], s + 1, ANS_A, OV_WEIGHT);
        set(&mut params[lp.w_o], s + 2, ANS_B, OV_WEIGHT);
    }

    // Readout: answer dimensions to answer tokens, plus a filler successor
    // rule so neutral text has structure to predict.
    let unembed = layout.unembed.expect("untied");
    set(&mut params[unembed], ANS_A, spec.answer_tokens.0, ANSWER_READOUT);
    set(&mut params[unembed], ANS_B, spec.answer_tokens.1, ANSWER_READOUT);
    let fillers = spec.filler_tokens();
    for (i, &f) in fillers.iter().enumerate() {
        let next = fillers[(i + 1) % fillers.len()];
        set(&mut params[unembed], spec.id_dim(f).expect("id"), next, BIGRAM_READOUT);
    }

    if spec.noise_scale > 0.0 {
        add_head_noise(&mut model, spec, seed)?;
    }
    Ok(model)
}

/// Random q/k/v/o slices for every non-planted head, with the output slice
/// rescaled so `sqrt(d_model) * |W_v|_F * |W_o|_F` (an upper bound on the
/// head's per-position write norm after layer norm) stays within
/// `NOISE_WRITE_RATIO` of the planted write norm.
fn add_head_noise(model: &mut Transformer<f32>, spec: &PlantSpec, seed: u64) -> Result<()> {
    let cfg = spec.config;
    let (d, dh) = (cfg.d_model, cfg.d_head());
    let layout = model.layout().clone();
    let normal = Normal::new(0.0, spec.noise_scale).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng::stream(seed, Stream::Init);
    // Layer norm maps every embedding to norm sqrt(d); the planted head
    // reads one unit of it.
    let planted_write = OV_WEIGHT * (d as f64).sqrt() / 2.0;
    let budget = NOISE_WRITE_RATIO * planted_write;
    for c in cfg.heads() {
        if spec.planted_heads.contains(&c) {
            continue;
        }
        let ComponentId::AttnHead { layer, head } = c else { unreachable!() };
        let lp = layout.layers[layer];
        let cols = head * dh..(head + 1) * dh;
        let params = model.params_mut();
        let mut v_norm = 0.0f64;
        for (idx, is_v) in [(lp.w_q, false), (lp.w_k, false), (lp.w_v, true)] {
            let data = params[idx].data_mut();
            for r in 0..d {
                for col in cols.clone() {
                    let x = normal.sample(&mut rng);
                    data[r * d + col] = x as f32;
                    if is_v {
                        v_norm += x * x;
                    }
                }
            }
        }
        let o: Vec<f64> = (0..dh * d).map(|_| normal.sample(&mut rng)).collect();
        let o_norm = o.iter().map(|x| x * x).sum::<f64>().sqrt();
        let bound = (d as f64).sqrt() * v_norm.sqrt() * o_norm;
        let scale = if bound > budget { budget / bound } else { 1.0 };
        let data = params[lp.w_o].data_mut();
        for (i, x) in o.iter().enumerate() {
            data[cols.start * d + i] = (x * scale) as f32;
        }
    }
    Ok(())
}

fn random_fillers(rng: &mut impl Rng, fillers: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|_| *fillers.choose(rng).expect("fillers")).collect()
}

/// Layout `[fillers] gender [fillers] query`, with 1 to 3 fillers on each
/// side. The gender of `x` alternates between A and B across pairs.
pub fn synthetic_pairs(spec: &PlantSpec, n: usize, seed: u64) -> Result<Vec<MinimalPair>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let fillers = spec.filler_tokens();
    let max_side = ((spec.config.max_seq_len.saturating_sub(2)) / 2).clamp(0, 3);
    let mut rng = rng::stream(seed, Stream::Data);
    (0..n)
        .map(|i| {
            let gender = if i % 2 == 0 { Gender::Male } else { Gender::Female };
            let a = rng_len(&mut rng, max_side);
            let pre = random_fillers(&mut rng, &fillers, a);
            let b = rng_len(&mut rng, max_side);
            let post = random_fillers(&mut rng, &fillers, b);
            let build = |g: Gender| {
                let mut x = pre.clone();
                x.push(spec.gender_token(g));
                x.extend(&post);
                x.push(spec.query_token);
                x
            };
            let mut pair = MinimalPair::new(
                build(gender),
                build(gender.other()),
                spec.answer_for(gender),
                spec.answer_for(gender.other()),
            )?;
            pair.template_id = i % 2;
            Ok(pair)
        })
        .collect()
}

fn rng_len(rng: &mut impl Rng, max_side: usize) -> usize {
    if max_side == 0 {
        0
    } else {
        rng.random_range(1..=max_side)
    }
}

fn predecessor_run(rng: &mut impl Rng, fillers: &[usize], len: usize) -> Vec<usize> {
    let n = fillers.len();
    let start = rng.random_range(0..n);
    (0..len).map(|k| fillers[(start + n * len - k) % n]).collect()
}

/// Gender-balanced fine-tuning corpus: `[fillers] gender [fillers] query
/// answer` where each gender is followed by each answer equally often.
/// Filler runs step backward through the filler list, a grammar shifted
/// away from the successor rule the planted model encodes.
pub fn balanced_corpus(spec: &PlantSpec, n: usize, seed: u64) -> Result<Vec<LabeledSequence>> {
    spec.validate()?;
    let fillers = spec.filler_tokens();
    let max_side = ((spec.config.max_seq_len.saturating_sub(3)) / 2).clamp(0, 3);
    let mut rng = rng::stream(seed, Stream::Data);
    Ok((0..n)
        .map(|i| {
            let gender = if i % 2 == 0 { Gender::Male } else { Gender::Female };
            let answer = if (i / 2) % 2 == 0 { Gender::Male } else { Gender::Female };
            let a = rng_len(&mut rng, max_side);
            let mut tokens = predecessor_run(&mut rng, &fillers, a);
            tokens.push(spec.gender_token(gender));
            let b = rng_len(&mut rng, max_side);
            tokens.extend(predecessor_run(&mut rng, &fillers, b));
            tokens.push(spec.query_token);
            tokens.push(spec.answer_for(answer));
            LabeledSequence { tokens, label: gender }
        })
        .collect())
}

/// Gender-free text that follows the filler successor rule.
pub fn neutral_corpus(spec: &PlantSpec, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let fillers = spec.filler_tokens();
    let max_len = spec.config.max_seq_len.min(10);
    let mut rng = rng::stream(seed, Stream::Data);
    Ok((0..n)
        .map(|_| {
            let len = rng.random_range(2.min(max_len)..=max_len);
            let mut i = rng.random_range(0..fillers.len());
            (0..len)
                .map(|_| {
                    let t = fillers[i];
                    i = (i + 1) % fillers.len();
                    t
                })
                .collect()
        })
        .collect())
}
