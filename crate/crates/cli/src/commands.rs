// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand bodies. Each returns the files it read and wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use biasloc::circuit::{self, CircuitFormat};
use biasloc::cma;
use biasloc::corpus::{self, MinimalPair, PairSchema, Vocab};
use biasloc::diffmask::{self, MaskTrainConfig};
use biasloc::evaluation::{self, EvalReport, LengthMode};
use biasloc::finetune::{self, FineTuneConfig, Schedule, Select};
use biasloc::groundtruth::{self, PlantSpec};
use biasloc::model::{ComponentId, ModelConfig, Scope, Transformer};
use biasloc::ranked::{self, RankedEntry};

use crate::{
    Cli, CliError, CliResult, Command, ComponentSet, LengthArg, ModelArgs, RunFiles, ScheduleArg, ScopeArg,
    StrategyArg,
};

/// Directory searched for `templates.txt` and `professions.tsv` when
/// `generate` is not given explicit paths.
pub const DATA_DIR_ENV: &str = "BIASLOC_DATA_DIR";

pub fn execute(cli: &Cli) -> CliResult<RunFiles> {
    let seed = cli.seed;
    match &cli.command {
        Command::Generate {
            templates,
            professions,
            out,
        } => generate(templates.as_deref(), professions.as_deref(), out),
        Command::Plant {
            spec,
            noise_scale,
            n_pairs,
            n_corpus,
            n_neutral,
            out_dir,
        } => plant(spec.as_deref(), *noise_scale, (*n_pairs, *n_corpus, *n_neutral), out_dir, seed),
        Command::TrainToy {
            text,
            config,
            epochs,
            lr,
            batch_size,
            out_dir,
        } => train_toy(text, config.as_deref(), *epochs, *lr, *batch_size, out_dir, seed),
        Command::DiscoverCma {
            model,
            pairs,
            strategy,
            k,
            components,
            scope,
            out,
        } => discover_cma(model, pairs, *strategy, *k, *components, *scope, out),
        Command::DiscoverAcdc {
            model,
            pairs,
            tau,
            out,
            dot,
            heads_out,
        } => discover_acdc(model, pairs, *tau, out, dot.as_deref(), heads_out.as_deref()),
        Command::DiscoverDm {
            model,
            pairs,
            alpha,
            beta,
            epochs,
            lr,
            lr_lambda,
            batch_size,
            components,
            top,
            out,
            report,
        } => {
            let config = MaskTrainConfig {
                alpha: *alpha,
                beta: *beta,
                epochs: *epochs,
                lr_z: *lr,
                lr_lambda: *lr_lambda,
                batch_size: *batch_size,
                scope: Scope::FinalOnly,
                seed,
            };
            discover_dm(model, pairs, &config, *components, *top, out, report.as_deref())
        }
        Command::Finetune {
            model,
            corpus,
            select,
            n_random,
            exclude,
            top,
            lr,
            epochs,
            patience,
            batch_size,
            weight_decay,
            schedule,
            split,
            out,
            history,
        } => {
            let config = FineTuneConfig {
                lr: *lr,
                max_epochs: *epochs,
                patience: *patience,
                schedule: match schedule {
                    ScheduleArg::Linear => Schedule::Linear,
                    ScheduleArg::Constant => Schedule::Constant,
                },
                weight_decay: *weight_decay,
                batch_size: *batch_size,
                split_fraction: *split,
                seed,
            };
            let sel = SelectArgs {
                spec: select,
                n_random: *n_random,
                exclude,
                top: *top,
                seed,
            };
            finetune_cmd(model, corpus, &sel, &config, out, history.as_deref())
        }
        Command::Evaluate {
            model,
            pairs,
            stereo_pairs,
            accuracy_pairs,
            ppl_corpus,
            metrics,
            length_mode,
            tag,
            records,
            out,
        } => {
            let data = EvalInputs {
                pairs: pairs.as_deref(),
                stereo_pairs: stereo_pairs.as_deref(),
                accuracy_pairs: accuracy_pairs.as_deref(),
                ppl_corpus: ppl_corpus.as_deref(),
            };
            let mode = match length_mode {
                LengthArg::Auto => LengthMode::Auto,
                LengthArg::Total => LengthMode::TotalLogProb,
                LengthArg::Mean => LengthMode::MeanPerToken,
            };
            evaluate(model, &data, metrics, mode, tag, seed, *records, out)
        }
        Command::Report {
            inputs,
            baseline,
            out,
            markdown,
        } => report(inputs, baseline, out, markdown.as_deref()),
        Command::Rerun { .. } => unreachable!("handled by the driver"),
    }
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn write(path: &Path, text: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write(path, text + "\n")
}

fn load_model(args: &ModelArgs) -> CliResult<(Transformer<f32>, Vocab)> {
    let model = Transformer::<f32>::load_checkpoint(&args.model)?;
    let vocab = Vocab::load(&args.vocab)?;
    if vocab.len() > model.config().vocab_size {
        return Err(CliError::invalid(format!(
            "vocabulary has {} words but the model only {} ids",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    Ok((model, vocab))
}

fn load_pairs(path: &Path, schema: PairSchema, vocab: &Vocab) -> CliResult<Vec<MinimalPair>> {
    let (pairs, unknown) = corpus::load_minimal_pairs(path, schema, vocab)?;
    if unknown > 0 {
        eprintln!("warning: {unknown} out-of-vocabulary words in {}", path.display());
    }
    Ok(pairs)
}

fn candidates(model: &Transformer<f32>, set: ComponentSet) -> Vec<ComponentId> {
    match set {
        ComponentSet::Heads => model.config().heads(),
        ComponentSet::All => model.config().components(),
    }
}

fn files(inputs: &[&Path], outputs: &[&Path]) -> RunFiles {
    RunFiles {
        inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn generate(templates: Option<&Path>, professions: Option<&Path>, out: &Path) -> CliResult<RunFiles> {
    let data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    let from_dir = |name: &str| data_dir.as_ref().map(|d| d.join(name)).filter(|p| p.exists());
    let t_path = templates.map(Path::to_path_buf).or_else(|| from_dir("templates.txt"));
    let p_path = professions.map(Path::to_path_buf).or_else(|| from_dir("professions.tsv"));
    let t = match &t_path {
        Some(p) => corpus::read_templates(p)?,
        None => corpus::default_templates(),
    };
    let p = match &p_path {
        Some(p) => corpus::read_professions(p)?,
        None => corpus::default_professions(),
    };
    let records = corpus::generate_professions(&t, &p)?;
    corpus::write_pair_records(out, &records)?;
    eprintln!("{} pairs from {} templates x {} professions", records.len(), t.len(), p.len());
    let inputs: Vec<&Path> = t_path.iter().chain(&p_path).map(PathBuf::as_path).collect();
    Ok(files(&inputs, &[out]))
}

fn plant(
    spec_path: Option<&Path>,
    noise_scale: Option<f64>,
    (n_pairs, n_corpus, n_neutral): (usize, usize, usize),
    out_dir: &Path,
    seed: u64,
) -> CliResult<RunFiles> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            PlantSpec::from_toml(&text)?
        }
        None => PlantSpec::default(),
    };
    if let Some(s) = noise_scale {
        spec.noise_scale = s;
    }
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let model = groundtruth::construct_planted_model(&spec, seed)?;
    let vocab = spec.vocab();
    let pairs = groundtruth::synthetic_pairs(&spec, n_pairs, seed)?;
    let balanced = groundtruth::balanced_corpus(&spec, n_corpus, seed)?;
    let neutral = groundtruth::neutral_corpus(&spec, n_neutral, seed)?;

    let path = |name: &str| out_dir.join(name);
    model.save_checkpoint(path("model.ckpt"))?;
    vocab.save(path("vocab.txt"))?;
    write(&path("spec.toml"), spec.to_toml())?;
    let records: Vec<_> = pairs.iter().map(|p| p.to_record(&vocab)).collect();
    corpus::write_pair_records(path("pairs.jsonl"), &records)?;
    corpus::write_labeled(path("balanced.tsv"), &vocab, &balanced)?;
    corpus::write_text_corpus(path("neutral.txt"), &vocab, &neutral)?;

    let outputs: Vec<PathBuf> = ["model.ckpt", "vocab.txt", "spec.toml", "pairs.jsonl", "balanced.tsv", "neutral.txt"]
        .iter()
        .map(|n| path(n))
        .collect();
    let mut all = vec![out_dir.to_path_buf()];
    all.extend(outputs);
    Ok(RunFiles {
        inputs: spec_path.map(Path::to_path_buf).into_iter().collect(),
        outputs: all,
    })
}

fn train_toy(
    text: &Path,
    config_path: Option<&Path>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    out_dir: &Path,
    seed: u64,
) -> CliResult<RunFiles> {
    let raw = fs::read_to_string(text).map_err(|e| CliError::io(text, e))?;
    let lines: Vec<&str> = raw.lines().filter(|l| !l.trim().is_empty()).collect();
    let vocab = Vocab::build(lines.iter().copied());
    let corpus: Vec<Vec<usize>> = lines.iter().map(|l| vocab.tokenize(l)).collect();
    let longest = corpus.iter().map(Vec::len).max().unwrap_or(0);
    let mut config = match config_path {
        Some(p) => {
            let t = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            ModelConfig::from_text(&t)?
        }
        None => ModelConfig::default(),
    };
    config.vocab_size = config.vocab_size.max(vocab.len());
    config.max_seq_len = config.max_seq_len.max(longest);
    let model = Transformer::<f32>::random(config, seed)?;
    let ft = FineTuneConfig {
        lr,
        max_epochs: epochs,
        patience: epochs,
        batch_size,
        weight_decay: 0.0,
        seed,
        ..FineTuneConfig::default()
    };
    let (trained, history) = finetune::pretrain(&model, &corpus, &ft)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let ckpt = out_dir.join("model.ckpt");
    let vpath = out_dir.join("vocab.txt");
    let hpath = out_dir.join("history.json");
    trained.save_checkpoint(&ckpt)?;
    vocab.save(&vpath)?;
    write_json(&hpath, &history)?;
    let mut inputs = vec![text.to_path_buf()];
    inputs.extend(config_path.map(Path::to_path_buf));
    Ok(RunFiles {
        inputs,
        outputs: vec![out_dir.to_path_buf(), ckpt, vpath, hpath],
    })
}

#[allow(clippy::too_many_arguments)]
fn discover_cma(
    args: &ModelArgs,
    pairs_path: &Path,
    strategy: StrategyArg,
    k: usize,
    set: ComponentSet,
    scope: ScopeArg,
    out: &Path,
) -> CliResult<RunFiles> {
    let (model, vocab) = load_model(args)?;
    let pairs = load_pairs(pairs_path, PairSchema::PrefixPlusContinuations, &vocab)?;
    let scope = match scope {
        ScopeArg::Final => Scope::FinalOnly,
        ScopeArg::All => Scope::AllPositions,
    };
    let comps = candidates(&model, set);
    let (result, method) = match strategy {
        StrategyArg::Topk => (cma::top_k(&model, &pairs, k, &comps, scope)?, "cma-topk"),
        StrategyArg::Greedy => (cma::k_greedy(&model, &pairs, k, &comps, scope)?, "cma-greedy"),
    };
    ranked::write_ranked(out, method, &result.entries())?;
    Ok(files(&[&args.model, &args.vocab, pairs_path], &[out]))
}

fn discover_acdc(
    args: &ModelArgs,
    pairs_path: &Path,
    tau: f64,
    out: &Path,
    dot: Option<&Path>,
    heads_out: Option<&Path>,
) -> CliResult<RunFiles> {
    let (model, vocab) = load_model(args)?;
    let pairs = load_pairs(pairs_path, PairSchema::PrefixPlusContinuations, &vocab)?;
    let c = circuit::acdc_prune(&model, &pairs, tau)?;
    circuit::export_circuit(&c, CircuitFormat::Records, out)?;
    let mut outputs = vec![out];
    if let Some(d) = dot {
        circuit::export_circuit(&c, CircuitFormat::Dot, d)?;
        outputs.push(d);
    }
    if let Some(h) = heads_out {
        let mut entries: Vec<RankedEntry> = c
            .heads()
            .into_iter()
            .map(|head| {
                let score = c
                    .edges
                    .iter()
                    .filter(|e| e.present)
                    .filter(|e| e.id.sender == head || e.id.receiver == biasloc::model::Receiver::Component(head))
                    .filter_map(|e| e.last_delta)
                    .fold(0.0, f64::max);
                RankedEntry {
                    component: head,
                    score,
                    n_examples: pairs.len(),
                }
            })
            .collect();
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.component.cmp(&b.component)));
        ranked::write_ranked(h, "acdc-heads", &entries)?;
        outputs.push(h);
    }
    Ok(files(&[&args.model, &args.vocab, pairs_path], &outputs))
}

fn discover_dm(
    args: &ModelArgs,
    pairs_path: &Path,
    config: &MaskTrainConfig,
    set: ComponentSet,
    top: Option<usize>,
    out: &Path,
    report: Option<&Path>,
) -> CliResult<RunFiles> {
    let (model, vocab) = load_model(args)?;
    let pairs = load_pairs(pairs_path, PairSchema::PrefixPlusContinuations, &vocab)?;
    let comps = candidates(&model, set);
    let r = diffmask::train_mask(&model, &pairs, &comps, config)?;
    let bin = diffmask::binarize(&r.params, &comps, comps.len());
    let chosen: Vec<(ComponentId, f64)> = match top {
        Some(n) => bin.top.iter().take(n).copied().collect(),
        None => bin.top.iter().filter(|(c, _)| bin.selected.contains(c)).copied().collect(),
    };
    let entries: Vec<RankedEntry> = chosen
        .into_iter()
        .map(|(component, score)| RankedEntry {
            component,
            score,
            n_examples: pairs.len(),
        })
        .collect();
    ranked::write_ranked(out, "diffmask", &entries)?;
    let mut outputs = vec![out];
    if let Some(p) = report {
        write_json(p, &r)?;
        outputs.push(p);
    }
    if let diffmask::TrainStatus::Diverged { epoch, step } = r.status {
        eprintln!("warning: mask training diverged at epoch {epoch}, step {step}");
    }
    Ok(files(&[&args.model, &args.vocab, pairs_path], &outputs))
}

struct SelectArgs<'a> {
    spec: &'a str,
    n_random: usize,
    exclude: &'a [PathBuf],
    top: Option<usize>,
    seed: u64,
}

fn parse_select(s: &SelectArgs<'_>, inputs: &mut Vec<PathBuf>) -> CliResult<Select> {
    Ok(match s.spec {
        "full" => Select::FullModel,
        "all-attn" => Select::AllAttnLayers,
        "last4" => Select::LastNAttnLayers(4),
        "random" => {
            let mut excluded = Vec::new();
            for p in s.exclude {
                excluded.extend(ranked::read_ranked(p)?.into_iter().map(|e| e.component));
                inputs.push(p.clone());
            }
            excluded.sort();
            excluded.dedup();
            Select::RandomHeads {
                n: s.n_random,
                excluded,
                seed: s.seed,
            }
        }
        other => {
            if let Some(n) = other.strip_prefix("last:") {
                let n = n
                    .parse()
                    .map_err(|_| CliError::invalid(format!("bad layer count in {other:?}")))?;
                Select::LastNAttnLayers(n)
            } else if let Some(p) = other.strip_prefix("file:") {
                let entries = ranked::read_ranked(p)?;
                inputs.push(PathBuf::from(p));
                let n = s.top.unwrap_or(entries.len());
                Select::Components(entries.iter().take(n).map(|e| e.component).collect())
            } else {
                return Err(CliError::invalid(format!(
                    "unknown selection {other:?}; expected full, random, all-attn, last4, last:<n> or file:<path>"
                )));
            }
        }
    })
}

fn finetune_cmd(
    args: &ModelArgs,
    corpus_path: &Path,
    select: &SelectArgs<'_>,
    config: &FineTuneConfig,
    out: &Path,
    history: Option<&Path>,
) -> CliResult<RunFiles> {
    let (model, vocab) = load_model(args)?;
    let corpus = corpus::read_labeled(corpus_path, &vocab)?;
    let mut inputs = vec![args.model.clone(), args.vocab.clone(), corpus_path.to_path_buf()];
    let kind = parse_select(select, &mut inputs)?;
    let selection = finetune::baseline_selections(model.config(), &kind)?;
    if selection.is_empty() {
        return Err(CliError::invalid("selection contains no parameters"));
    }
    let (tuned, hist) = finetune::finetune(&model, &selection, &corpus, config)?;
    tuned.save_checkpoint(out)?;
    let mut outputs = vec![out.to_path_buf()];
    if let Some(h) = history {
        write_json(h, &hist)?;
        outputs.push(h.to_path_buf());
    }
    eprintln!(
        "best epoch {} (validation loss {:.4}), stopped: {:?}",
        hist.best_epoch + 1,
        hist.best_valid_loss(),
        hist.stop_reason
    );
    Ok(RunFiles { inputs, outputs })
}

struct EvalInputs<'a> {
    pairs: Option<&'a Path>,
    stereo_pairs: Option<&'a Path>,
    accuracy_pairs: Option<&'a Path>,
    ppl_corpus: Option<&'a Path>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    args: &ModelArgs,
    data: &EvalInputs<'_>,
    metrics: &[String],
    mode: LengthMode,
    tag: &str,
    seed: u64,
    keep_records: bool,
    out: &Path,
) -> CliResult<RunFiles> {
    const KNOWN: [&str; 4] = ["professions", "stereotype", "accuracy", "perplexity"];
    for m in metrics {
        if !KNOWN.contains(&m.as_str()) {
            return Err(CliError::invalid(format!("unknown metric {m:?}")));
        }
    }
    let wanted = |name: &str, input: Option<&Path>| -> CliResult<Option<PathBuf>> {
        let asked = metrics.iter().any(|m| m == name);
        match input {
            Some(p) if asked || metrics.is_empty() => Ok(Some(p.to_path_buf())),
            None if asked => Err(CliError::invalid(format!("metric {name} needs its data file"))),
            _ => Ok(None),
        }
    };
    let (model, vocab) = load_model(args)?;
    let mut report = EvalReport {
        tag: tag.to_string(),
        seed,
        metrics: BTreeMap::new(),
        records: Vec::new(),
    };
    let mut inputs = vec![args.model.clone(), args.vocab.clone()];
    if let Some(p) = wanted("professions", data.pairs)? {
        let pairs = load_pairs(&p, PairSchema::PrefixPlusContinuations, &vocab)?;
        let recs = evaluation::professions_records(&model, &pairs)?;
        report.metrics.insert(
            "professions_score".into(),
            recs.iter().filter(|r| r.preferred).count() as f64 / recs.len() as f64,
        );
        report.records.extend(recs);
        inputs.push(p);
    }
    if let Some(p) = wanted("stereotype", data.stereo_pairs)? {
        let pairs = load_pairs(&p, PairSchema::PairOfSentences, &vocab)?;
        let recs = evaluation::stereotype_records(&model, &pairs, mode)?;
        report.metrics.insert(
            "stereotype_score".into(),
            recs.iter().filter(|r| r.preferred).count() as f64 / recs.len() as f64,
        );
        report.records.extend(recs);
        inputs.push(p);
    }
    if let Some(p) = wanted("accuracy", data.accuracy_pairs)? {
        let pairs = load_pairs(&p, PairSchema::PairOfSentences, &vocab)?;
        let acc = evaluation::minimal_pair_accuracy(&model, &pairs, mode)?;
        report.metrics.insert("minimal_pair_accuracy".into(), acc);
        inputs.push(p);
    }
    if let Some(p) = wanted("perplexity", data.ppl_corpus)? {
        let seqs = corpus::read_text_corpus(&p, &vocab)?;
        report.metrics.insert("perplexity".into(), evaluation::perplexity(&model, &seqs)?);
        inputs.push(p);
    }
    if report.metrics.is_empty() {
        return Err(CliError::invalid("no evaluation data given"));
    }
    if !keep_records {
        report.records.clear();
    }
    write_json(out, &report)?;
    Ok(RunFiles {
        inputs,
        outputs: vec![out.to_path_buf()],
    })
}

fn report(inputs: &[PathBuf], baseline: &str, out: &Path, markdown: Option<&Path>) -> CliResult<RunFiles> {
    let mut reports = Vec::with_capacity(inputs.len());
    for p in inputs {
        let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        let r: EvalReport =
            serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    let cmp = evaluation::emit_report(&reports, baseline)?;
    write(out, cmp.to_tsv())?;
    let mut outputs = vec![out.to_path_buf()];
    if let Some(md) = markdown {
        write(md, cmp.to_markdown())?;
        outputs.push(md.to_path_buf());
    }
    print!("{}", cmp.to_markdown());
    Ok(RunFiles {
        inputs: inputs.to_vec(),
        outputs,
    })
}
