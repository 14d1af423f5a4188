// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance checks.
//!
//! Runs every criterion, prints one PASS/FAIL line each and exits non-zero
//! if any failed. Positional arguments filter criteria by name substring.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use biasloc::autograd::{finite_diff_check, Instr, Program, Tensor};
use biasloc::circuit::acdc_prune;
use biasloc::cma::{self, joint_nie, k_greedy, top_k};
use biasloc::corpus::{generate_professions, MinimalPair, PairRecord, Targets};
use biasloc::diffmask::{
    diffmask_loss, example_loss_grad, masked_forward, sparsity_loss_grad, train_mask, HardConcrete, MaskPair,
    MaskParams, MaskTrainConfig, TrainStatus,
};
use biasloc::evaluation::{self, LengthMode};
use biasloc::finetune::{baseline_selections, finetune, FineTuneConfig, Schedule, Select};
use biasloc::groundtruth::{balanced_corpus, construct_planted_model, neutral_corpus, synthetic_pairs, PlantSpec};
use biasloc::model::{ComponentId, InterventionSpec, LanguageModel, ModelConfig, Scope, Transformer, PAD_TOKEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Dataset fidelity
// ---------------------------------------------------------------------------

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_biasloc")
}

/// Words left after stripping the longest common prefix and suffix.
fn differing_middle<'a>(a: &'a [&'a str], b: &'a [&'a str]) -> (&'a [&'a str], &'a [&'a str]) {
    let pre = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let max_suf = a.len().min(b.len()) - pre;
    let suf = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(max_suf)
        .take_while(|(x, y)| x == y)
        .count();
    (&a[pre..a.len() - suf], &b[pre..b.len() - suf])
}

fn dataset_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let out = dir.path().join("pairs.jsonl");
    let start = Instant::now();
    let status = Command::new(binary())
        .env_remove("BIASLOC_DATA_DIR")
        .args(["generate", "--out"])
        .arg(&out)
        .output()
        .map_err(err)?;
    let elapsed = start.elapsed();
    ensure(status.status.success(), || {
        format!("generate failed: {}", String::from_utf8_lossy(&status.stderr))
    })?;
    within(elapsed, Duration::from_secs(5))?;

    let text = fs::read_to_string(&out).map_err(err)?;
    let records: Vec<PairRecord> = text
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(err)?;
    ensure(records.len() == 5083, || format!("{} pairs, want 5083", records.len()))?;
    let cells: BTreeSet<(usize, &str)> = records.iter().map(|r| (r.template_id, r.profession.as_str())).collect();
    ensure(cells.len() == 5083, || format!("{} distinct template/profession cells", cells.len()))?;
    let templates: BTreeSet<usize> = records.iter().map(|r| r.template_id).collect();
    let professions: BTreeSet<&str> = records.iter().map(|r| r.profession.as_str()).collect();
    ensure(templates.len() == 17 && professions.len() == 299, || {
        format!("{} templates x {} professions", templates.len(), professions.len())
    })?;

    for (i, r) in records.iter().enumerate() {
        let a: Vec<&str> = r.text.split_whitespace().collect();
        let b: Vec<&str> = r.counterfactual.split_whitespace().collect();
        let (ma, mb) = differing_middle(&a, &b);
        let want: Vec<&str> = r.profession.split_whitespace().collect();
        ensure(ma == want.as_slice() && (mb == ["man"] || mb == ["woman"]), || {
            format!("pair {i} differs outside the slot: {:?} / {:?}", r.text, r.counterfactual)
        })?;
    }
    // The in-process generator agrees with the binary.
    let direct = generate_professions(
        &biasloc::corpus::default_templates(),
        &biasloc::corpus::default_professions(),
    )
    .map_err(err)?;
    ensure(direct == records, || "library and binary outputs differ".into())?;
    Ok(format!("5083 pairs, slot-only differences, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// Gradient soundness
// ---------------------------------------------------------------------------

const PRIMITIVE_CASES: usize = 100;
const PRIMITIVE_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

/// Random-shaped matrix with at least `min_cols + 1` columns.
fn matrix(rng: &mut ChaCha8Rng, min_cols: usize, lo: f32, hi: f32) -> Tensor<f32> {
    let (m, n) = (dim(rng), dim(rng) + min_cols);
    uniform(rng, &[m, n], lo, hi)
}

type Builder = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f32>>, Vec<Instr>);

/// Builders whose last slot is the primitive's output.
fn primitive_builders() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            (vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)], vec![Instr::MatMul(0, 1)])
        }),
        ("add", |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m, n], -1.0, 1.0)], vec![Instr::Add(0, 1)])
        }),
        ("add_row_broadcast", |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[n], -1.0, 1.0)], vec![Instr::Add(0, 1)])
        }),
        ("sub", |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m, n], -1.0, 1.0)], vec![Instr::Sub(0, 1)])
        }),
        ("sub_scalar_broadcast", |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[1], -1.0, 1.0)], vec![Instr::Sub(0, 1)])
        }),
        ("mul", |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m, n], -1.0, 1.0)], vec![Instr::Mul(0, 1)])
        }),
        ("mul_row_broadcast", |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[n], -1.0, 1.0)], vec![Instr::Mul(0, 1)])
        }),
        ("mul_scalar_broadcast", |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[1], -1.0, 1.0)], vec![Instr::Mul(0, 1)])
        }),
        ("scale", |r| {
            let c = r.random_range(-2.0..2.0);
            (vec![matrix(r, 0, -1.0, 1.0)], vec![Instr::Scale(0, c)])
        }),
        ("offset", |r| {
            let c = r.random_range(-2.0..2.0);
            (vec![matrix(r, 0, -1.0, 1.0)], vec![Instr::Offset(0, c)])
        }),
        ("transpose", |r| (vec![matrix(r, 0, -1.0, 1.0)], vec![Instr::Transpose(0)])),
        ("softmax", |r| (vec![matrix(r, 1, -2.0, 2.0)], vec![Instr::Softmax(0)])),
        ("layer_norm", |r| {
            let (m, n) = (dim(r), dim(r) + 1);
            (
                vec![
                    uniform(r, &[m, n], -2.0, 2.0),
                    uniform(r, &[n], 0.5, 1.5),
                    uniform(r, &[n], -0.5, 0.5),
                ],
                vec![Instr::LayerNorm(0, 1, 2)],
            )
        }),
        ("gelu", |r| (vec![matrix(r, 0, -3.0, 3.0)], vec![Instr::Gelu(0)])),
        ("embedding", |r| {
            let (v, d) = (dim(r) + 1, dim(r));
            let ids = (0..dim(r) + 1).map(|_| r.random_range(0..v)).collect();
            (vec![uniform(r, &[v, d], -1.0, 1.0)], vec![Instr::Embedding(0, ids)])
        }),
        ("sigmoid", |r| (vec![matrix(r, 0, -4.0, 4.0)], vec![Instr::Sigmoid(0)])),
        ("log", |r| (vec![matrix(r, 0, 0.5, 3.0)], vec![Instr::Log(0)])),
        ("exp", |r| (vec![matrix(r, 0, -2.0, 1.0)], vec![Instr::Exp(0)])),
        ("clamp", |r| {
            // Keep every entry away from the kinks at the bounds.
            let (m, n) = (dim(r), dim(r));
            let data = (0..m * n)
                .map(|_| loop {
                    let x: f32 = r.random_range(-1.0..1.0);
                    if (x.abs() - 0.5).abs() > 0.02 {
                        break x;
                    }
                })
                .collect();
            (
                vec![Tensor::new(vec![m, n], data).expect("shape")],
                vec![Instr::Clamp(0, -0.5, 0.5)],
            )
        }),
        ("cross_entropy", |r| {
            let (m, v) = (dim(r), dim(r) + 1);
            let mut targets: Vec<Option<usize>> = (0..m)
                .map(|_| r.random_bool(0.75).then(|| r.random_range(0..v)))
                .collect();
            targets[0] = Some(r.random_range(0..v));
            (vec![uniform(r, &[m, v], -2.0, 2.0)], vec![Instr::CrossEntropy(0, targets)])
        }),
        ("kl_divergence", |r| {
            let (m, v) = (dim(r), dim(r) + 1);
            (
                vec![uniform(r, &[m, v], -2.0, 2.0), uniform(r, &[m, v], -2.0, 2.0)],
                vec![Instr::KlDivergence(0, 1)],
            )
        }),
        ("sum", |r| (vec![matrix(r, 0, -1.0, 1.0)], vec![Instr::Sum(0)])),
        ("slice_cols", |r| {
            let (m, n) = (dim(r), dim(r) + 1);
            let start = r.random_range(0..n);
            let len = r.random_range(1..=n - start);
            (vec![uniform(r, &[m, n], -1.0, 1.0)], vec![Instr::SliceCols(0, start, len)])
        }),
        ("slice_rows", |r| {
            let (m, n) = (dim(r) + 1, dim(r));
            let start = r.random_range(0..m);
            let len = r.random_range(1..=m - start);
            (vec![uniform(r, &[m, n], -1.0, 1.0)], vec![Instr::SliceRows(0, start, len)])
        }),
        ("index", |r| {
            let (m, n) = (dim(r), dim(r));
            let i = r.random_range(0..m * n);
            (vec![uniform(r, &[m, n], -1.0, 1.0)], vec![Instr::Index(0, i)])
        }),
        ("row", |r| {
            let (m, n) = (dim(r), dim(r));
            let i = r.random_range(0..m);
            (vec![uniform(r, &[m, n], -1.0, 1.0)], vec![Instr::Row(0, i)])
        }),
        ("replace_row", |r| {
            let (m, n) = (dim(r), dim(r));
            let i = r.random_range(0..m);
            (
                vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[n], -1.0, 1.0)],
                vec![Instr::ReplaceRow(0, i, 1)],
            )
        }),
        ("mask_fill", |r| {
            // Followed by a softmax so the readout stays finite.
            let (m, n) = (dim(r), dim(r) + 1);
            let mut allowed: Vec<bool> = (0..m * n).map(|_| r.random_bool(0.6)).collect();
            for row in 0..m {
                allowed[row * n + r.random_range(0..n)] = true;
            }
            (
                vec![uniform(r, &[m, n], -2.0, 2.0)],
                vec![Instr::MaskFill(0, allowed), Instr::Softmax(1)],
            )
        }),
    ]
}

/// Appends `sum(y * y)` so the reverse pass is seeded non-uniformly.
fn with_readout(n_inputs: usize, mut instrs: Vec<Instr>) -> Program {
    let y = n_inputs + instrs.len() - 1;
    instrs.push(Instr::Mul(y, y));
    instrs.push(Instr::Sum(y + 1));
    Program::new(n_inputs, instrs)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_mlp: 16,
        vocab_size: 12,
        max_seq_len: 8,
        tie_embeddings: false,
    }
}

fn random_pair(rng: &mut ChaCha8Rng, vocab: usize) -> MinimalPair {
    let len = rng.random_range(3..=6);
    let x: Vec<usize> = (0..len).map(|_| rng.random_range(2..vocab)).collect();
    let mut x_cf = x.clone();
    let at = rng.random_range(0..len);
    x_cf[at] = 2 + (x[at] - 2 + rng.random_range(1..vocab - 2)) % (vocab - 2);
    let stereo = rng.random_range(2..vocab);
    let anti = 2 + (stereo - 2 + rng.random_range(1..vocab - 2)) % (vocab - 2);
    MinimalPair::new(x, x_cf, stereo, anti).expect("pair")
}

/// Noise whose pre-clamp mask stays clear of the clamp bounds.
fn interior_noise(rng: &mut ChaCha8Rng, dist: &HardConcrete) -> Vec<f64> {
    let (lo, hi) = dist.stretch;
    dist.location
        .iter()
        .map(|&z| loop {
            let u: f64 = rng.random_range(0.02..0.98);
            let s = 1.0 / (1.0 + (-((u.ln() - (1.0 - u).ln() + z) / dist.temperature)).exp());
            let m = s * (hi - lo) + lo;
            if m > 1e-3 && m < 1.0 - 1e-3 {
                break u;
            }
        })
        .collect()
}

fn composite_case(seed: u64) -> Result<(f64, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    // Unit-scale weights so the loss responds strongly to the mask.
    let mut model = Transformer::<f32>::random(cfg, seed).map_err(err)?;
    for t in model.params_mut() {
        for w in t.data_mut() {
            *w = rng.random_range(-0.8..0.8);
        }
    }
    let model64 = model.cast::<f64>();
    let pair = random_pair(&mut rng, cfg.vocab_size);
    let comps = cfg.components();
    let scope = if seed.is_multiple_of(2) { Scope::FinalOnly } else { Scope::AllPositions };
    let mut params = MaskParams::init(comps.len(), 1.0, rng.random_range(0.5..2.0));
    params.lambda = rng.random_range(0.0..2.0);
    for z in &mut params.dist.location {
        *z = rng.random_range(-2.0..2.0);
    }
    let noise = interior_noise(&mut rng, &params.dist);

    let prepared = MaskPair::prepare(&model, &pair).map_err(err)?;
    let (_, _, mut grad) = example_loss_grad(&model, &prepared, &comps, &params, &noise, scope).map_err(err)?;
    let (_, sparse) = sparsity_loss_grad(&params);
    for (g, s) in grad.iter_mut().zip(sparse) {
        *g += s;
    }

    let targets = pair.targets().map_err(err)?;
    let total = |p: &MaskParams| -> Result<f64, String> {
        let mask = p.dist.mask_from_noise(&noise);
        let (masked, base) = masked_forward(&model64, &pair, &mask, &comps, scope).map_err(err)?;
        Ok(diffmask_loss(&masked, &base, targets, p).map_err(err)?.total)
    };
    let step = 1e-6;
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for (i, &analytic) in grad.iter().enumerate() {
        let mut up = params.clone();
        up.dist.location[i] += step;
        let mut down = params.clone();
        down.dist.location[i] -= step;
        let numeric = (total(&up)? - total(&down)?) / (2.0 * step);
        let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        worst = worst.max(rel);
        scale = scale.max(numeric.abs());
    }
    Ok((worst, scale))
}

fn gradient_soundness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_prim = 0.0f64;
    let builders = primitive_builders();
    for (name, build) in &builders {
        for case in 0..PRIMITIVE_CASES {
            let (inputs, instrs) = build(&mut rng);
            let program = with_readout(inputs.len(), instrs);
            let report = finite_diff_check(&program, &inputs, 1e-6, PRIMITIVE_TOL).map_err(err)?;
            ensure(report.passed, || {
                format!("{name} case {case}: rel err {:.3e}", report.max_rel_err())
            })?;
            worst_prim = worst_prim.max(report.max_rel_err());
        }
    }
    let (mut worst_comp, mut largest) = (0.0f64, 0.0f64);
    for case in 0..PRIMITIVE_CASES as u64 {
        let (e, g) = composite_case(case)?;
        largest = largest.max(g);
        ensure(e <= COMPOSITE_TOL, || format!("composite case {case}: rel err {e:.3e}"))?;
        worst_comp = worst_comp.max(e);
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{} primitives x {PRIMITIVE_CASES} (max {worst_prim:.1e}), composite x {PRIMITIVE_CASES} (max {worst_comp:.1e}, largest gradient {largest:.1e}), {:.1?}",
        builders.len(),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// Identity intervention
// ---------------------------------------------------------------------------

fn identity_intervention() -> Outcome {
    let spec = PlantSpec::default();
    let planted = construct_planted_model(&spec, 0).map_err(err)?;
    let random = Transformer::<f32>::random(spec.config, 11).map_err(err)?;
    let pairs: Vec<MinimalPair> = synthetic_pairs(&spec, 8, 3)
        .map_err(err)?
        .into_iter()
        .map(|p| {
            let t = p.targets.expect("targets");
            MinimalPair::new(p.x.clone(), p.x, t.stereo, t.anti).expect("pair")
        })
        .collect();
    let comps = spec.config.components();
    let mut checked = 0;
    for model in [&planted, &random] {
        let prepared = cma::prepare(model, &pairs).map_err(err)?;
        for &c in &comps {
            for scope in [Scope::FinalOnly, Scope::AllPositions] {
                let nie = joint_nie(model, &prepared, &[c], scope).map_err(err)?;
                ensure(nie == 0.0, || format!("{c} {scope:?}: NIE {nie:e}"))?;
                checked += 1;
            }
        }
        for p in &pairs {
            let (plain, cache) = model.forward(&p.x, true).map_err(err)?;
            let cache = cache.expect("capture");
            for scope in [Scope::FinalOnly, Scope::AllPositions] {
                let spec = InterventionSpec::swap_all(&comps, scope, &cache).map_err(err)?;
                let (patched, _) = model.forward_with_interventions(&p.x, &spec).map_err(err)?;
                let same = plain.data().iter().zip(patched.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same && plain.shape() == patched.shape(), || {
                    format!("{scope:?} self-swap changed the logits")
                })?;
            }
        }
    }
    Ok(format!("{checked} component NIEs exactly 0, self-swaps bit-identical"))
}

// ---------------------------------------------------------------------------
// Hard concrete
// ---------------------------------------------------------------------------

fn hard_concrete() -> Outcome {
    const SAMPLES: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let k = 8;
        let loc: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let dist = HardConcrete::new(loc);
        let mut nonzero = vec![0usize; k];
        let mut sum = vec![0.0f64; k];
        for _ in 0..SAMPLES {
            for (i, m) in dist.sample(&mut rng).into_iter().enumerate() {
                ensure((0.0..=1.0).contains(&m), || format!("sample {m} outside [0, 1]"))?;
                nonzero[i] += usize::from(m != 0.0);
                sum[i] += m;
            }
        }
        let p = dist.expected_nonzero();
        let e = dist.expected_mask();
        for i in 0..k {
            let dp = (nonzero[i] as f64 / SAMPLES as f64 - p[i]).abs();
            let de = (sum[i] / SAMPLES as f64 - e[i]).abs();
            ensure(dp <= 0.01 && de <= 0.01, || {
                format!("z = {:.3}: |dP| = {dp:.4}, |dE| = {de:.4}", dist.location[i])
            })?;
            worst = (worst.0.max(dp), worst.1.max(de));
        }
    }
    Ok(format!("20 vectors, max |dP(m!=0)| {:.4}, max |dE[m]| {:.4}", worst.0, worst.1))
}

// ---------------------------------------------------------------------------
// Planted recovery
// ---------------------------------------------------------------------------

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    let spec = PlantSpec::default();
    let model = construct_planted_model(&spec, 0).map_err(err)?;
    let pairs = synthetic_pairs(&spec, 32, 1).map_err(err)?;
    let heads = spec.config.heads();
    let planted: BTreeSet<ComponentId> = spec.planted_heads.iter().copied().collect();

    let found: BTreeSet<_> = top_k(&model, &pairs, 2, &heads, Scope::FinalOnly)
        .map_err(err)?
        .components()
        .into_iter()
        .collect();
    ensure(found == planted, || format!("CMA top-2 {found:?}"))?;

    let config = MaskTrainConfig {
        alpha: 2.0,
        ..MaskTrainConfig::default()
    };
    let report = train_mask(&model, &pairs, &heads, &config).map_err(err)?;
    ensure(matches!(report.status, TrainStatus::Completed), || format!("mask training {:?}", report.status))?;
    let selected: BTreeSet<_> = report.selected.iter().copied().collect();
    ensure(selected == planted, || format!("DiffMask selected {selected:?}"))?;

    let circuit = acdc_prune(&model, &pairs, 0.01).map_err(err)?;
    for &h in &planted {
        ensure(circuit.has_path_through(h), || format!("ACDC lost the path through {h}"))?;
    }
    let stray: Vec<_> = circuit
        .reaches_logits()
        .into_iter()
        .filter(|c| c.is_head() && !planted.contains(c))
        .collect();
    ensure(stray.is_empty(), || format!("ACDC kept non-planted heads {stray:?}"))?;
    within(start.elapsed(), Duration::from_secs(600))?;
    Ok(format!(
        "CMA, DiffMask and ACDC ({} edges kept) all recover the planted heads, {:.1?}",
        circuit.present().count(),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// Greedy consistency
// ---------------------------------------------------------------------------

/// Name, model, pairs and candidate components.
type Subject = (String, Transformer<f32>, Vec<MinimalPair>, Vec<ComponentId>);

fn greedy_consistency() -> Outcome {
    let spec = PlantSpec::default();
    let small_spec = PlantSpec {
        config: ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 40,
            d_mlp: 64,
            ..spec.config
        },
        planted_heads: vec![ComponentId::AttnHead { layer: 1, head: 0 }],
        ..spec.clone()
    };
    let mut models: Vec<Subject> = vec![(
        "planted".into(),
        construct_planted_model(&spec, 0).map_err(err)?,
        synthetic_pairs(&spec, 16, 5).map_err(err)?,
        spec.config.heads(),
    )];
    for seed in 0..3 {
        models.push((
            format!("random-{seed}"),
            Transformer::random(spec.config, 100 + seed).map_err(err)?,
            synthetic_pairs(&spec, 16, seed).map_err(err)?,
            spec.config.heads(),
        ));
    }
    for seed in 0..3 {
        models.push((
            format!("small-{seed}"),
            Transformer::random(small_spec.config, 200 + seed).map_err(err)?,
            synthetic_pairs(&small_spec, 16, seed).map_err(err)?,
            small_spec.config.components(),
        ));
    }

    let mut gaps = Vec::new();
    for (name, model, pairs, comps) in &models {
        let first_top = top_k(model, pairs, 1, comps, Scope::FinalOnly).map_err(err)?.components()[0];
        let greedy = k_greedy(model, pairs, 2.min(comps.len()), comps, Scope::FinalOnly).map_err(err)?;
        ensure(greedy.ranked[0].component == first_top, || {
            format!("{name}: greedy first {} vs top-k first {first_top}", greedy.ranked[0].component)
        })?;
        if comps.len() <= 8 {
            let prepared = cma::prepare(model, pairs).map_err(err)?;
            let mut best = f64::NEG_INFINITY;
            for i in 0..comps.len() {
                for j in i + 1..comps.len() {
                    best = best.max(joint_nie(model, &prepared, &[comps[i], comps[j]], Scope::FinalOnly).map_err(err)?);
                }
            }
            let got = greedy.ranked[1].nie;
            gaps.push(format!("{name} gap {:.3e}", (best - got).max(0.0)));
        }
    }
    Ok(format!("first picks agree on {} models; size-2 vs exhaustive: {}", models.len(), gaps.join(", ")))
}

// ---------------------------------------------------------------------------
// Fine-tune freeze
// ---------------------------------------------------------------------------

fn finetune_freeze() -> Outcome {
    let spec = PlantSpec::default();
    let corpus = balanced_corpus(&spec, 96, 9).map_err(err)?;
    let config = FineTuneConfig {
        lr: 1e-2,
        max_epochs: 2,
        patience: 1,
        schedule: Schedule::Constant,
        ..FineTuneConfig::default()
    };
    let mut selections = vec![
        Select::Components(spec.planted_heads.clone()),
        Select::Components(vec![ComponentId::AttnHead { layer: 0, head: 1 }]),
    ];
    for seed in 0..3 {
        selections.push(Select::RandomHeads {
            n: 3,
            excluded: spec.planted_heads.clone(),
            seed,
        });
    }
    // Heads the planted model leaves at zero get no gradient, so movement
    // is only demanded of the randomly initialized model.
    let models = [
        ("planted", construct_planted_model(&spec, 0).map_err(err)?, false),
        ("random", Transformer::random(spec.config, 4).map_err(err)?, true),
    ];
    let mut frozen = 0usize;
    for (name, model, must_move) in &models {
        for select in &selections {
            let sel = baseline_selections(&spec.config, select).map_err(err)?;
            let (tuned, _) = finetune(model, &sel, &corpus, &config).map_err(err)?;
            let mut moved = 0usize;
            for (i, (before, after)) in model.params().iter().zip(tuned.params()).enumerate() {
                for ((a, b), &chosen) in before.data().iter().zip(after.data()).zip(sel.mask(i)) {
                    if chosen {
                        moved += usize::from(a.to_bits() != b.to_bits());
                    } else {
                        ensure(a.to_bits() == b.to_bits(), || {
                            format!("{name} {select:?}: unselected entry of {} changed", sel.names()[i])
                        })?;
                        frozen += 1;
                    }
                }
            }
            ensure(moved > 0 || !must_move, || format!("{name} {select:?}: no selected parameter moved"))?;
        }
    }
    Ok(format!(
        "{} selections on {} models, {frozen} frozen entries byte-identical",
        selections.len(),
        models.len()
    ))
}

// ---------------------------------------------------------------------------
// Mitigation trade-off
// ---------------------------------------------------------------------------

fn mitigation_tradeoff() -> Outcome {
    let start = Instant::now();
    let spec = PlantSpec::default();
    let model = construct_planted_model(&spec, 0).map_err(err)?;
    let pairs = synthetic_pairs(&spec, 64, 100).map_err(err)?;
    let neutral = neutral_corpus(&spec, 200, 101).map_err(err)?;
    let base_ppl = evaluation::perplexity(&model, &neutral).map_err(err)?;
    let base_prof = evaluation::professions_score(&model, &pairs).map_err(err)?;
    let mut rise = (Vec::new(), Vec::new());
    let mut scores = Vec::new();
    for seed in 0..5u64 {
        let corpus = balanced_corpus(&spec, 320, seed).map_err(err)?;
        let config = FineTuneConfig {
            lr: 1e-2,
            max_epochs: 20,
            patience: 10,
            seed,
            ..FineTuneConfig::default()
        };
        for (full, select) in [
            (false, Select::Components(spec.planted_heads.clone())),
            (true, Select::FullModel),
        ] {
            let sel = baseline_selections(&spec.config, &select).map_err(err)?;
            let (tuned, _) = finetune(&model, &sel, &corpus, &config).map_err(err)?;
            let ppl = evaluation::perplexity(&tuned, &neutral).map_err(err)?;
            if full {
                rise.1.push(ppl - base_ppl);
            } else {
                let prof = evaluation::professions_score(&tuned, &pairs).map_err(err)?;
                ensure(prof < base_prof, || {
                    format!("seed {seed}: planted-only professions score {prof} not below {base_prof}")
                })?;
                scores.push(prof);
                rise.0.push(ppl - base_ppl);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (planted_rise, full_rise) = (mean(&rise.0), mean(&rise.1));
    ensure(planted_rise <= full_rise, || {
        format!("mean perplexity rise planted-only {planted_rise:.3} > full {full_rise:.3}")
    })?;
    within(start.elapsed(), Duration::from_secs(900))?;
    Ok(format!(
        "professions {base_prof} -> {scores:?}; ppl rise planted-only {planted_rise:.2} <= full {full_rise:.2}, {:.1?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

/// Next-token logits depend only on the current token.
struct Bigram {
    table: Vec<Vec<f32>>,
}

impl LanguageModel for Bigram {
    fn vocab_size(&self) -> usize {
        self.table.len()
    }

    fn logits(&self, tokens: &[usize]) -> biasloc::Result<Tensor<f32>> {
        let v = self.table.len();
        let data = tokens.iter().flat_map(|&t| self.table[t].iter().copied()).collect();
        Ok(Tensor::new(vec![tokens.len(), v], data)?)
    }
}

impl Bigram {
    /// `P(b | a)` by explicit normalization over the whole vocabulary.
    fn prob(&self, a: usize, b: usize) -> f64 {
        let z: f64 = self.table[a].iter().map(|&x| (x as f64).exp()).sum();
        (self.table[a][b] as f64).exp() / z
    }

    /// Product of conditionals over positions whose token and predecessor
    /// are both real, with the number of such positions.
    fn joint(&self, tokens: &[usize]) -> (f64, usize) {
        let mut p = 1.0;
        let mut n = 0;
        for w in tokens.windows(2) {
            if w[0] != PAD_TOKEN && w[1] != PAD_TOKEN {
                p *= self.prob(w[0], w[1]);
                n += 1;
            }
        }
        (p, n)
    }
}

/// Every sequence of length `len` over the vocabulary.
fn all_sequences(v: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..v).map(move |t| {
                    let mut n = s.clone();
                    n.push(t);
                    n
                })
            })
            .collect();
    }
    out
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = 6;
    let model = Bigram {
        table: (0..v).map(|_| (0..v).map(|_| rng.random_range(-2.0f32..2.0)).collect()).collect(),
    };
    let real = |rng: &mut ChaCha8Rng| rng.random_range(2..v);

    // Two-step continuations of any token, enumerated, sum to 1.
    for a in 0..v {
        let total: f64 = all_sequences(v, 2).iter().map(|s| model.prob(a, s[0]) * model.prob(s[0], s[1])).sum();
        ensure((total - 1.0).abs() < 1e-12, || format!("continuations of {a} sum to {total}"))?;
    }
    for a in 0..v {
        let s: f64 = (0..v).map(|b| model.prob(a, b)).sum();
        ensure((s - 1.0).abs() < 1e-12, || format!("row {a} sums to {s}"))?;
    }

    let mut sentence_pairs = Vec::new();
    for i in 0..60 {
        let la = rng.random_range(2..=6);
        let lb = if i % 3 == 0 { rng.random_range(2..=6) } else { la };
        let a: Vec<usize> = (0..la).map(|_| real(&mut rng)).collect();
        let b: Vec<usize> = (0..lb).map(|_| real(&mut rng)).collect();
        sentence_pairs.push(MinimalPair::sentences(a, b).map_err(err)?);
    }
    let oracle_fraction = |pairs: &[MinimalPair], mode: LengthMode| -> f64 {
        let wins = pairs
            .iter()
            .filter(|p| {
                let ((px, nx), (pc, nc)) = (model.joint(&p.x), model.joint(&p.x_cf));
                let mean = matches!(mode, LengthMode::MeanPerToken) || (mode == LengthMode::Auto && nx != nc);
                if mean {
                    px.ln() / nx as f64 > pc.ln() / nc as f64
                } else {
                    px > pc
                }
            })
            .count();
        wins as f64 / pairs.len() as f64
    };
    let mut compared = 0;
    for mode in [LengthMode::Auto, LengthMode::TotalLogProb, LengthMode::MeanPerToken] {
        let got = evaluation::stereotype_score(&model, &sentence_pairs, mode).map_err(err)?;
        let want = oracle_fraction(&sentence_pairs, mode);
        ensure((got - want).abs() <= 1e-6, || format!("stereotype {mode:?}: {got} vs {want}"))?;
        let got = evaluation::minimal_pair_accuracy(&model, &sentence_pairs, mode).map_err(err)?;
        ensure((got - want).abs() <= 1e-6, || format!("accuracy {mode:?}: {got} vs {want}"))?;
        compared += 2;
    }

    let mut prefix_pairs = Vec::new();
    for _ in 0..60 {
        let len = rng.random_range(1..=5);
        let x: Vec<usize> = (0..len).map(|_| real(&mut rng)).collect();
        let mut cf = x.clone();
        cf[0] = real(&mut rng);
        let stereo = real(&mut rng);
        let anti = loop {
            let a = real(&mut rng);
            if a != stereo {
                break a;
            }
        };
        prefix_pairs.push(MinimalPair::new(x, cf, stereo, anti).map_err(err)?);
    }
    let got = evaluation::professions_score(&model, &prefix_pairs).map_err(err)?;
    let wins = prefix_pairs
        .iter()
        .filter(|p| {
            let Targets { stereo, anti } = p.targets.expect("targets");
            let last = *p.x.last().expect("nonempty");
            model.prob(last, stereo) > model.prob(last, anti)
        })
        .count();
    let want = wins as f64 / prefix_pairs.len() as f64;
    ensure((got - want).abs() <= 1e-6, || format!("professions: {got} vs {want}"))?;
    compared += 1;

    let mut corpus: Vec<Vec<usize>> = (0..40)
        .map(|_| {
            let len = rng.random_range(1..=7);
            (0..len).map(|_| real(&mut rng)).collect()
        })
        .collect();
    corpus.push(vec![PAD_TOKEN, PAD_TOKEN, 3, 4, 2]);
    let got = evaluation::perplexity(&model, &corpus).map_err(err)?;
    let (mut nll, mut n) = (0.0, 0usize);
    for s in &corpus {
        for w in s.windows(2) {
            if w[1] != PAD_TOKEN {
                nll -= model.prob(w[0], w[1]).ln();
                n += 1;
            }
        }
    }
    let want = (nll / n as f64).exp();
    ensure((got - want).abs() <= 1e-6 * want.max(1.0), || format!("perplexity: {got} vs {want}"))?;
    compared += 1;
    Ok(format!("{compared} metric evaluations match enumeration"))
}

// ---------------------------------------------------------------------------
// Reproducibility
// ---------------------------------------------------------------------------

fn run_cli(cwd: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(binary())
        .current_dir(cwd)
        .env_remove("BIASLOC_DATA_DIR")
        .args(args)
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn is_manifest(p: &Path) -> bool {
    p.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with("manifest.json"))
}

/// Contents of every non-manifest file under `root`, keyed by path.
fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else if !is_manifest(&p) {
                out.insert(p.strip_prefix(root).expect("under root").to_path_buf(), fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let model = ["--model", "planted/model.ckpt", "--vocab", "planted/vocab.txt"];
    let with_model = |head: &[&'static str], tail: &[&'static str]| -> Vec<&'static str> {
        let mut v = head.to_vec();
        v.extend(model);
        v.extend(tail);
        v
    };
    let steps: Vec<(Vec<&str>, &str)> = vec![
        (vec!["generate", "--out", "pairs.jsonl"], "pairs.jsonl"),
        (
            vec!["plant", "--n-pairs", "16", "--n-corpus", "64", "--n-neutral", "32", "--out-dir", "planted"],
            "planted",
        ),
        (
            vec!["train-toy", "--text", "planted/neutral.txt", "--epochs", "2", "--out-dir", "toy"],
            "toy",
        ),
        (
            with_model(&["discover-cma"], &["--pairs", "planted/pairs.jsonl", "--k", "4", "--out", "cma.tsv"]),
            "cma.tsv",
        ),
        (
            with_model(
                &["discover-cma"],
                &["--pairs", "planted/pairs.jsonl", "--strategy", "greedy", "--k", "3", "--out", "greedy.tsv"],
            ),
            "greedy.tsv",
        ),
        (
            with_model(
                &["discover-acdc"],
                &[
                    "--pairs",
                    "planted/pairs.jsonl",
                    "--out",
                    "acdc.tsv",
                    "--dot",
                    "acdc.dot",
                    "--heads-out",
                    "acdc_heads.tsv",
                ],
            ),
            "acdc.tsv",
        ),
        (
            with_model(
                &["discover-dm"],
                &[
                    "--pairs",
                    "planted/pairs.jsonl",
                    "--alpha",
                    "2",
                    "--epochs",
                    "10",
                    "--out",
                    "dm.tsv",
                    "--report",
                    "dm.json",
                ],
            ),
            "dm.tsv",
        ),
        (
            with_model(
                &["finetune"],
                &[
                    "--corpus",
                    "planted/balanced.tsv",
                    "--select",
                    "file:cma.tsv",
                    "--top",
                    "2",
                    "--epochs",
                    "2",
                    "--patience",
                    "1",
                    "--lr",
                    "1e-2",
                    "--out",
                    "ft.ckpt",
                    "--history",
                    "ft.json",
                ],
            ),
            "ft.ckpt",
        ),
        (
            with_model(
                &["finetune"],
                &[
                    "--corpus",
                    "planted/balanced.tsv",
                    "--select",
                    "random",
                    "--n-random",
                    "2",
                    "--exclude",
                    "cma.tsv",
                    "--epochs",
                    "1",
                    "--patience",
                    "1",
                    "--out",
                    "ft_random.ckpt",
                ],
            ),
            "ft_random.ckpt",
        ),
        (
            with_model(
                &["evaluate"],
                &[
                    "--pairs",
                    "planted/pairs.jsonl",
                    "--ppl-corpus",
                    "planted/neutral.txt",
                    "--tag",
                    "base",
                    "--records",
                    "--out",
                    "base_eval.json",
                ],
            ),
            "base_eval.json",
        ),
        (
            vec![
                "evaluate",
                "--model",
                "ft.ckpt",
                "--vocab",
                "planted/vocab.txt",
                "--pairs",
                "planted/pairs.jsonl",
                "--ppl-corpus",
                "planted/neutral.txt",
                "--tag",
                "ft",
                "--out",
                "ft_eval.json",
            ],
            "ft_eval.json",
        ),
        (
            vec![
                "report",
                "--inputs",
                "base_eval.json",
                "ft_eval.json",
                "--baseline",
                "base",
                "--out",
                "report.tsv",
                "--markdown",
                "report.md",
            ],
            "report.tsv",
        ),
    ];

    let mut replays = 0;
    for (args, primary) in &steps {
        let mut first = vec!["--jobs", "1"];
        first.extend(args);
        run_cli(root, &first)?;
        let reference = snapshot(root)?;

        let mut parallel = vec!["--jobs", "4"];
        parallel.extend(args);
        run_cli(root, &parallel)?;
        ensure(snapshot(root)? == reference, || format!("{}: --jobs 4 output differs", args[0]))?;

        let p = root.join(primary);
        let manifest = if p.is_dir() {
            p.join("manifest.json")
        } else {
            root.join(format!("{primary}.manifest.json"))
        };
        let manifest = manifest.to_str().ok_or("non-utf8 path")?.to_string();
        for jobs in ["1", "4"] {
            run_cli(Path::new("/"), &["rerun", "--manifest", &manifest, "--jobs", jobs])?;
            ensure(snapshot(root)? == reference, || {
                format!("{}: rerun with --jobs {jobs} differs", args[0])
            })?;
            replays += 1;
        }
    }
    Ok(format!("{} commands, {replays} manifest replays bit-identical", steps.len()))
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Check); 10] = [
        ("dataset_fidelity", dataset_fidelity),
        ("gradient_soundness", gradient_soundness),
        ("identity_intervention", identity_intervention),
        ("hard_concrete", hard_concrete),
        ("planted_recovery", planted_recovery),
        ("greedy_consistency", greedy_consistency),
        ("finetune_freeze", finetune_freeze),
        ("mitigation_tradeoff", mitigation_tradeoff),
        ("metric_oracles", metric_oracles),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name:<22} PASS ({secs:.1}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name:<22} FAIL ({secs:.1}s) {why}", i + 1);
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
