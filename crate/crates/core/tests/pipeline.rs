// SPDX-License-Identifier: MIT OR Apache-2.0

//! Library-level runs over the planted model.

use std::collections::BTreeSet;

use biasloc::circuit::{self, acdc_prune, CircuitFormat};
use biasloc::cma::{self, top_k};
use biasloc::corpus::{self, PairSchema};
use biasloc::diffmask::{binarize, masked_forward, train_mask, MaskParams, MaskTrainConfig};
use biasloc::evaluation::{self, emit_report, EvalReport};
use biasloc::groundtruth::{construct_planted_model, neutral_corpus, synthetic_pairs, PlantSpec};
use biasloc::model::{ComponentId, Scope, Transformer};
use biasloc::Error;

fn planted() -> (PlantSpec, Transformer<f32>) {
    let spec = PlantSpec::default();
    let model = construct_planted_model(&spec, 0).unwrap();
    (spec, model)
}

fn argmax(xs: &[f32]) -> usize {
    xs.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (_, model) = planted();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save_checkpoint(&path).unwrap();
    let back = Transformer::<f32>::load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), model.config());
    for (a, b) in model.params().iter().zip(back.params()) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let (_, model) = planted();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save_checkpoint(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(Transformer::<f32>::load_checkpoint(&path).is_err());
}

#[test]
fn planted_model_prefers_the_bound_answer() {
    let (spec, model) = planted();
    let pairs = synthetic_pairs(&spec, 16, 0).unwrap();
    assert_eq!(evaluation::professions_score(&model, &pairs).unwrap(), 1.0);
    for p in &pairs {
        let t = p.targets.unwrap();
        assert_eq!(argmax(&model.final_logits(&p.x).unwrap()), t.stereo);
    }
}

#[test]
fn full_mask_on_planted_heads_flips_the_answer() {
    let (spec, model) = planted();
    let pairs = synthetic_pairs(&spec, 8, 1).unwrap();
    let comps = spec.planted_heads.clone();
    for p in &pairs {
        let t = p.targets.unwrap();
        let (masked, base) = masked_forward(&model, p, &[1.0, 1.0], &comps, Scope::FinalOnly).unwrap();
        assert_eq!(argmax(&base), t.stereo);
        assert_eq!(argmax(&masked), t.anti);
    }
}

#[test]
fn zero_mask_is_bit_exact() {
    let (spec, model) = planted();
    let pairs = synthetic_pairs(&spec, 4, 2).unwrap();
    let heads = spec.config.heads();
    let zeros = vec![0.0; heads.len()];
    for p in &pairs {
        let (masked, base) = masked_forward(&model, p, &zeros, &heads, Scope::FinalOnly).unwrap();
        let plain = model.final_logits(&p.x).unwrap();
        assert!(masked.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(base.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let err = masked_forward(&model, &pairs[0], &[0.0], &heads, Scope::FinalOnly).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn cma_ranks_planted_heads_first_and_scores_others_zero() {
    let (spec, model) = planted();
    let pairs = synthetic_pairs(&spec, 16, 3).unwrap();
    let heads = spec.config.heads();
    let result = top_k(&model, &pairs, heads.len(), &heads, Scope::FinalOnly).unwrap();
    let top: BTreeSet<ComponentId> = result.components()[..2].iter().copied().collect();
    assert_eq!(top, spec.planted_heads.iter().copied().collect());
    for s in &result.ranked[2..] {
        assert!(s.nie.abs() < 1e-6, "{} scored {}", s.component, s.nie);
    }
    let err = top_k(&model, &pairs, 0, &heads, Scope::FinalOnly).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    assert!(cma::nie(&model, &[], heads[0]).is_err());
}

#[test]
fn diffmask_without_budget_turns_everything_off() {
    let (spec, model) = planted();
    let pairs = synthetic_pairs(&spec, 8, 4).unwrap();
    let heads = spec.config.heads();
    let config = MaskTrainConfig {
        alpha: 0.0,
        epochs: 300,
        lr_z: 5e-2,
        lr_lambda: 10.0,
        ..MaskTrainConfig::default()
    };
    let report = train_mask(&model, &pairs, &heads, &config).unwrap();
    let l0: f64 = report.params.dist.expected_nonzero().iter().sum();
    assert!(l0 < 0.5, "expected L0 {l0}");
    let untouched: f64 = pairs
        .iter()
        .map(|p| {
            let t = p.targets.unwrap();
            let l = model.final_logits(&p.x).unwrap();
            ((l[t.stereo] - l[t.anti]) as f64).clamp(-20.0, 20.0).exp()
        })
        .sum::<f64>()
        / pairs.len() as f64;
    let task = report.epochs.last().unwrap().terms.task;
    assert!((task / untouched - 1.0).abs() < 0.05, "task {task} vs {untouched}");
    assert!(report.params.lambda >= 0.0);
    assert!(report.expected_mask.iter().all(|&e| (0.0..=1.0).contains(&e)));
    let b = binarize(&report.params, &heads, 3);
    assert!(b.selected.is_empty());
    assert_eq!(b.top.len(), 3);
    let fresh = binarize(&MaskParams::init(heads.len(), 1.0, 1.0), &heads, 0);
    assert_eq!(fresh.selected, heads);
}

#[test]
fn acdc_exports_round_trip() {
    let (spec, model) = planted();
    let pairs = synthetic_pairs(&spec, 8, 5).unwrap();
    let c = acdc_prune(&model, &pairs, 0.01).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("c.tsv");
    circuit::export_circuit(&c, CircuitFormat::Records, &records).unwrap();
    assert_eq!(circuit::load_circuit(&records).unwrap(), c);
    let dot = dir.path().join("c.dot");
    circuit::export_circuit(&c, CircuitFormat::Dot, &dot).unwrap();
    let text = std::fs::read_to_string(&dot).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("->")).count(), c.present().count());
    assert!(text.contains("\"input\""));
    assert!(acdc_prune(&model, &pairs, 0.0).is_err());
}

#[test]
fn pair_files_round_trip_through_the_vocabulary() {
    let (spec, _) = planted();
    let vocab = spec.vocab();
    let pairs = synthetic_pairs(&spec, 6, 6).unwrap();
    let records: Vec<_> = pairs.iter().map(|p| p.to_record(&vocab)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    corpus::write_pair_records(&path, &records).unwrap();
    let (back, unknown) = corpus::load_minimal_pairs(&path, PairSchema::PrefixPlusContinuations, &vocab).unwrap();
    assert_eq!(unknown, 0);
    for (a, b) in pairs.iter().zip(&back) {
        assert_eq!((&a.x, &a.x_cf, a.targets), (&b.x, &b.x_cf, b.targets));
    }
}

#[test]
fn reports_compare_against_the_baseline() {
    let (spec, model) = planted();
    let neutral = neutral_corpus(&spec, 20, 7).unwrap();
    let ppl = evaluation::perplexity(&model, &neutral).unwrap();
    let run = |tag: &str, seed: u64, ppl: f64| EvalReport {
        tag: tag.into(),
        seed,
        metrics: [("perplexity".to_string(), ppl)].into(),
        records: vec![],
    };
    let reports = [run("base", 0, ppl), run("tuned", 0, ppl * 2.0), run("tuned", 1, ppl * 2.0)];
    let cmp = emit_report(&reports, "base").unwrap();
    let tuned = &cmp.rows[1].metrics["perplexity"];
    assert_eq!(cmp.rows[1].n_runs, 2);
    assert!((tuned.improvement + 100.0).abs() < 1e-9);
    assert_eq!(tuned.std, 0.0);
    assert!(cmp.to_tsv().starts_with("tag\tn_runs\tperplexity_mean"));
    assert!(emit_report(&reports, "missing").is_err());
}
