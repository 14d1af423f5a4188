// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counterfactual minimal-pair datasets and a word-level vocabulary.
//!
//! Datasets are stored as JSON lines of [`PairRecord`] (text level) and
//! encoded into [`MinimalPair`]s (token ids) against a [`Vocab`].

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PAD_TOKEN;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const UNK_TOKEN: usize = 1;

/// Bundled sentence templates (one `{profession}` slot each).
pub const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.txt");
/// Bundled profession list, `surface<TAB>male|female` per line.
pub const DEFAULT_PROFESSIONS: &str = include_str!("../data/professions.tsv");

const SLOT: &str = "{profession}";

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Bijection between lowercased words and ids; ids 0 and 1 are PAD and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.add(PAD);
        v.add(UNK);
        v
    }

    /// Vocabulary over every word of `texts`, in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for text in texts {
            for w in words(text) {
                v.add(&w);
            }
        }
        v
    }

    /// Returns the id of `word`, inserting it if new.
    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        self.tokens.push(word.to_string());
        self.index.insert(word.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of a (lowercased) word, UNK when unseen.
    pub fn id(&self, word: &str) -> usize {
        self.get(&word.to_lowercase()).unwrap_or(UNK_TOKEN)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.get(&w).unwrap_or(UNK_TOKEN)).collect()
    }

    /// Like [`Vocab::tokenize`], also adding the number of UNKs to `unknown`.
    pub fn tokenize_counting(&self, text: &str, unknown: &mut usize) -> Vec<usize> {
        let ids = self.tokenize(text);
        *unknown += ids.iter().filter(|&&i| i == UNK_TOKEN).count();
        ids
    }

    /// Space-joined words of `ids`, padding dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD_TOKEN)
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse = |line: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, tok) in text.lines().enumerate() {
            if v.index.contains_key(tok) {
                return Err(parse(i + 1, &format!("duplicate token {tok:?}")));
            }
            v.add(tok);
        }
        if v.token(PAD_TOKEN) != Some(PAD) || v.token(UNK_TOKEN) != Some(UNK) {
            return Err(parse(1, "vocabulary must start with <pad> and <unk>"));
        }
        Ok(v)
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn other(self) -> Self {
        match self {
            Self::Male => Self::Female,
            Self::Female => Self::Male,
        }
    }

    pub fn pronoun(self) -> &'static str {
        match self {
            Self::Male => "he",
            Self::Female => "she",
        }
    }

    /// Noun that stands in for a profession stereotyped as `self`.
    pub fn counterfactual_noun(self) -> &'static str {
        match self {
            Self::Male => "woman",
            Self::Female => "man",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfessionEntry {
    pub surface: String,
    pub stereotype: Gender,
}

/// Training sequence tagged with the gender it mentions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub tokens: Vec<usize>,
    pub label: Gender,
}

/// Text form of one counterfactual pair, as stored in dataset files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub text: String,
    pub counterfactual: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stereo: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anti: Option<String>,
    #[serde(default)]
    pub template_id: usize,
    #[serde(default)]
    pub profession: String,
}

/// Next-token continuations a pair is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Targets {
    pub stereo: usize,
    pub anti: usize,
}

/// Token-level counterfactual pair. `x` and `x_cf` have equal length (the
/// shorter one is left-padded) so both end at the intervention position.
/// Sentence-pair datasets carry no `targets`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimalPair {
    pub x: Vec<usize>,
    pub x_cf: Vec<usize>,
    pub targets: Option<Targets>,
    pub template_id: usize,
    pub profession: String,
}

impl MinimalPair {
    pub fn new(x: Vec<usize>, x_cf: Vec<usize>, stereo: usize, anti: usize) -> Result<Self> {
        Self::build(x, x_cf, Some(Targets { stereo, anti }), 0, String::new())
    }

    /// Whole-sentence pair without next-token targets.
    pub fn sentences(x: Vec<usize>, x_cf: Vec<usize>) -> Result<Self> {
        Self::build(x, x_cf, None, 0, String::new())
    }

    fn build(
        mut x: Vec<usize>,
        mut x_cf: Vec<usize>,
        targets: Option<Targets>,
        template_id: usize,
        profession: String,
    ) -> Result<Self> {
        if x.is_empty() || x_cf.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(t) = targets {
            if t.stereo == t.anti {
                return Err(Error::invalid("stereotypical and anti-stereotypical targets coincide"));
            }
        }
        let n = x.len().max(x_cf.len());
        left_pad(&mut x, n);
        left_pad(&mut x_cf, n);
        Ok(Self {
            x,
            x_cf,
            targets,
            template_id,
            profession,
        })
    }

    /// Targets, or an error for sentence-pair data.
    pub fn targets(&self) -> Result<Targets> {
        self.targets
            .ok_or_else(|| Error::invalid("pair has no stereotypical/anti-stereotypical targets"))
    }

    /// The pair with `x` and `x_cf` exchanged and the targets flipped.
    pub fn swapped(&self) -> Self {
        Self {
            x: self.x_cf.clone(),
            x_cf: self.x.clone(),
            targets: self.targets.map(|t| Targets {
                stereo: t.anti,
                anti: t.stereo,
            }),
            template_id: self.template_id,
            profession: self.profession.clone(),
        }
    }
}

fn left_pad(seq: &mut Vec<usize>, len: usize) {
    if seq.len() < len {
        let mut padded = vec![PAD_TOKEN; len - seq.len()];
        padded.append(seq);
        *seq = padded;
    }
}

impl PairRecord {
    /// Encodes against `vocab`, counting unknown words into `unknown`.
    pub fn encode(&self, vocab: &Vocab, unknown: &mut usize) -> Result<MinimalPair> {
        let x = vocab.tokenize_counting(&self.text, unknown);
        let x_cf = vocab.tokenize_counting(&self.counterfactual, unknown);
        let targets = match (&self.stereo, &self.anti) {
            (Some(s), Some(a)) => {
                let target = |w: &str, unknown: &mut usize| -> Result<usize> {
                    let ids = vocab.tokenize_counting(w, unknown);
                    match ids.as_slice() {
                        [id] => Ok(*id),
                        _ => Err(Error::invalid(format!("target {w:?} must be a single word"))),
                    }
                };
                Some(Targets {
                    stereo: target(s, unknown)?,
                    anti: target(a, unknown)?,
                })
            }
            (None, None) => None,
            _ => return Err(Error::invalid("stereo and anti must be given together")),
        };
        MinimalPair::build(x, x_cf, targets, self.template_id, self.profession.clone())
    }

    /// Every string that should be in the vocabulary for this record.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        [Some(&self.text), Some(&self.counterfactual), self.stereo.as_ref(), self.anti.as_ref()]
            .into_iter()
            .flatten()
            .map(String::as_str)
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// One pair per (template, profession), templates outermost.
pub fn generate_professions(templates: &[String], professions: &[ProfessionEntry]) -> Result<Vec<PairRecord>> {
    for (i, t) in templates.iter().enumerate() {
        if t.matches(SLOT).count() != 1 {
            return Err(Error::invalid(format!(
                "template {i} ({t:?}) must contain exactly one {SLOT} slot"
            )));
        }
    }
    let mut seen = HashSet::new();
    for p in professions {
        if !seen.insert(p.surface.to_lowercase()) {
            return Err(Error::invalid(format!("duplicate profession {:?}", p.surface)));
        }
    }
    let mut out = Vec::with_capacity(templates.len() * professions.len());
    for (template_id, t) in templates.iter().enumerate() {
        for p in professions {
            out.push(PairRecord {
                text: t.replace(SLOT, &p.surface),
                counterfactual: t.replace(SLOT, p.stereotype.counterfactual_noun()),
                stereo: Some(p.stereotype.pronoun().to_string()),
                anti: Some(p.stereotype.other().pronoun().to_string()),
                template_id,
                profession: p.surface.clone(),
            });
        }
    }
    Ok(out)
}

/// Non-empty, non-comment lines.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_templates(text: &str) -> Vec<String> {
    content_lines(text).map(|(_, l)| l.to_string()).collect()
}

pub fn parse_professions(text: &str, path: &Path) -> Result<Vec<ProfessionEntry>> {
    content_lines(text)
        .map(|(line, l)| {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            };
            let (surface, label) = l
                .rsplit_once('\t')
                .ok_or_else(|| err("expected surface<TAB>male|female".into()))?;
            let stereotype = match label.trim().to_lowercase().as_str() {
                "male" | "m" => Gender::Male,
                "female" | "f" => Gender::Female,
                other => return Err(err(format!("unknown stereotype label {other:?}"))),
            };
            Ok(ProfessionEntry {
                surface: surface.trim().to_string(),
                stereotype,
            })
        })
        .collect()
}

pub fn read_templates(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_templates(&text))
}

pub fn read_professions(path: impl AsRef<Path>) -> Result<Vec<ProfessionEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_professions(&text, path)
}

pub fn default_templates() -> Vec<String> {
    parse_templates(DEFAULT_TEMPLATES)
}

pub fn default_professions() -> Vec<ProfessionEntry> {
    parse_professions(DEFAULT_PROFESSIONS, Path::new("professions.tsv")).expect("bundled list parses")
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

/// Line formats accepted by [`read_pair_records`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSchema {
    /// `text`, `counterfactual`, `stereo`, `anti` (plus optional
    /// `template_id`, `profession`).
    PrefixPlusContinuations,
    /// `sent_more`, `sent_less`: a more and a less stereotypical sentence.
    PairOfSentences,
}

#[derive(Deserialize)]
struct SentencePairLine {
    sent_more: String,
    sent_less: String,
}

pub fn write_pair_records(path: impl AsRef<Path>, records: &[PairRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pair_records(path: impl AsRef<Path>, schema: PairSchema) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (line, l) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if l.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let record = match schema {
            PairSchema::PrefixPlusContinuations => {
                let r: PairRecord = serde_json::from_str(l).map_err(|e| err(e.to_string()))?;
                match (&r.stereo, &r.anti) {
                    (None, _) => return Err(err("missing field `stereo`".into())),
                    (_, None) => return Err(err("missing field `anti`".into())),
                    _ => r,
                }
            }
            PairSchema::PairOfSentences => {
                let p: SentencePairLine = serde_json::from_str(l).map_err(|e| err(e.to_string()))?;
                PairRecord {
                    text: p.sent_more,
                    counterfactual: p.sent_less,
                    stereo: None,
                    anti: None,
                    template_id: 0,
                    profession: String::new(),
                }
            }
        };
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "file contains no records".into(),
        });
    }
    Ok(out)
}

/// Reads and encodes a pair file. Returns the pairs and the number of words
/// that fell back to UNK.
pub fn load_minimal_pairs(
    path: impl AsRef<Path>,
    schema: PairSchema,
    vocab: &Vocab,
) -> Result<(Vec<MinimalPair>, usize)> {
    let path = path.as_ref();
    let records = read_pair_records(path, schema)?;
    let mut unknown = 0;
    let pairs = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.encode(vocab, &mut unknown).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, unknown))
}

impl MinimalPair {
    /// Text form of the pair under `vocab`, padding dropped.
    pub fn to_record(&self, vocab: &Vocab) -> PairRecord {
        let word = |i: usize| vocab.token(i).unwrap_or(UNK).to_string();
        PairRecord {
            text: vocab.detokenize(&self.x),
            counterfactual: vocab.detokenize(&self.x_cf),
            stereo: self.targets.map(|t| word(t.stereo)),
            anti: self.targets.map(|t| word(t.anti)),
            template_id: self.template_id,
            profession: self.profession.clone(),
        }
    }
}

/// Writes `label<TAB>text` lines.
pub fn write_labeled(path: impl AsRef<Path>, vocab: &Vocab, seqs: &[LabeledSequence]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in seqs {
        let label = match s.label {
            Gender::Male => "male",
            Gender::Female => "female",
        };
        out.push_str(&format!("{label}\t{}\n", vocab.detokenize(&s.tokens)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labeled(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<LabeledSequence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (label, body) = line.split_once('\t').ok_or_else(|| err("expected label<TAB>text".into()))?;
        let label = match label.trim().to_ascii_lowercase().as_str() {
            "male" => Gender::Male,
            "female" => Gender::Female,
            other => return Err(err(format!("unknown label {other:?}"))),
        };
        let tokens = vocab.tokenize(body);
        if tokens.is_empty() {
            return Err(err("empty sequence".into()));
        }
        out.push(LabeledSequence { tokens, label });
    }
    Ok(out)
}

/// Writes one sequence per line.
pub fn write_text_corpus(path: impl AsRef<Path>, vocab: &Vocab, seqs: &[Vec<usize>]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in seqs {
        out.push_str(&vocab.detokenize(s));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads one sequence per non-empty line.
pub fn read_text_corpus(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.tokenize(l))
        .collect())
}

pub fn encode_all(records: &[PairRecord], vocab: &Vocab) -> Result<(Vec<MinimalPair>, usize)> {
    let mut unknown = 0;
    let pairs = records
        .iter()
        .map(|r| r.encode(vocab, &mut unknown))
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, unknown))
}
