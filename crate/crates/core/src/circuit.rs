// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge-level circuit discovery by counterfactual ablation.
//!
//! The residual stream makes every component's input a sum of upstream
//! writes. An edge `sender -> receiver` is ablated by swapping the sender's
//! term in that one receiver's input for the sender's write on the
//! counterfactual input. Edges are visited output-first and dropped when
//! ablating them moves the task metric by less than a threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::corpus::{MinimalPair, Targets};
use crate::error::{Error, Result};
use crate::model::{ActivationCache, ComponentId, ForwardHook, ModelConfig, NoHook, Receiver, Transformer};

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeId {
    pub sender: ComponentId,
    pub receiver: Receiver,
}

impl std::fmt::Display for EdgeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}->{}", self.sender, self.receiver)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub id: EdgeId,
    pub present: bool,
    /// Metric change measured when the edge was tested, if it was.
    pub last_delta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeAblation {
    pub edge: EdgeId,
    pub metric_before: f64,
    pub metric_after: f64,
    pub delta: f64,
}

/// Senders whose writes reach `receiver`'s input, in computation order.
pub fn senders_of(config: &ModelConfig, receiver: Receiver) -> Vec<ComponentId> {
    let upto = match receiver {
        Receiver::Logits => config.n_layers,
        Receiver::Component(ComponentId::Embed) => return Vec::new(),
        Receiver::Component(ComponentId::AttnHead { layer, .. }) => layer,
        Receiver::Component(ComponentId::Mlp { layer }) => {
            let mut out = senders_of(config, Receiver::Component(ComponentId::AttnHead { layer, head: 0 }));
            out.extend((0..config.n_heads).map(|head| ComponentId::AttnHead { layer, head }));
            return out;
        }
    };
    config
        .components()
        .into_iter()
        .filter(|c| match *c {
            ComponentId::Embed => true,
            ComponentId::AttnHead { layer, .. } | ComponentId::Mlp { layer } => layer < upto,
        })
        .collect()
}

/// Every edge of the model's graph, in visiting order: receivers from the
/// logits backward, and each receiver's senders latest first.
pub fn all_edges(config: &ModelConfig) -> Vec<EdgeId> {
    let mut receivers = vec![Receiver::Logits];
    receivers.extend(
        config
            .components()
            .into_iter()
            .rev()
            .filter(|&c| c != ComponentId::Embed)
            .map(Receiver::Component),
    );
    receivers
        .into_iter()
        .flat_map(|r| {
            senders_of(config, r)
                .into_iter()
                .rev()
                .map(move |s| EdgeId { sender: s, receiver: r })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Metric under ablation
// ---------------------------------------------------------------------------

/// A pair with its counterfactual writes cached.
pub struct AblationPair<F: Real = f32> {
    pub x: Vec<usize>,
    pub targets: Targets,
    pub cf_cache: ActivationCache<F>,
}

impl<F: Real> AblationPair<F> {
    pub fn prepare(model: &Transformer<F>, pair: &MinimalPair) -> Result<Self> {
        if pair.x.len() != pair.x_cf.len() {
            return Err(Error::invalid(format!(
                "pair lengths differ: {} vs {}",
                pair.x.len(),
                pair.x_cf.len()
            )));
        }
        let (_, cache) = model.forward(&pair.x_cf, true)?;
        Ok(Self {
            x: pair.x.clone(),
            targets: pair.targets()?,
            cf_cache: cache.expect("capture requested"),
        })
    }
}

pub fn prepare<F: Real>(model: &Transformer<F>, dataset: &[MinimalPair]) -> Result<Vec<AblationPair<F>>> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    dataset.par_iter().map(|p| AblationPair::prepare(model, p)).collect()
}

/// Ablated edges grouped by receiver.
pub type AblationSet = BTreeMap<Receiver, BTreeSet<ComponentId>>;

struct AblateHook<'a, F: Real> {
    removed: &'a AblationSet,
    cf: &'a ActivationCache<F>,
}

impl<F: Real> ForwardHook<F> for AblateHook<'_, F> {
    fn receiver_input(
        &mut self,
        tape: &mut Tape<F>,
        receiver: Receiver,
        residual: Var,
        senders: &[(ComponentId, Var)],
    ) -> Result<Var> {
        let Some(removed) = self.removed.get(&receiver) else {
            return Ok(residual);
        };
        let mut input = residual;
        for &(s, out) in senders {
            if !removed.contains(&s) {
                continue;
            }
            let src = self
                .cf
                .get(s)
                .ok_or_else(|| Error::Intervention(format!("counterfactual cache lacks {s}")))?;
            let cf = tape.constant(src.clone());
            let swap = tape.sub(cf, out)?;
            input = tape.add(input, swap)?;
        }
        Ok(input)
    }
}

fn prob_gap<F: Real>(final_logits: &[F], t: Targets) -> f64 {
    let max = final_logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = final_logits.iter().map(|x| (x.as_f64() - max).exp()).sum();
    let p = |i: usize| (final_logits[i].as_f64() - max).exp() / z;
    p(t.stereo) - p(t.anti)
}

fn final_row<F: Real>(logits: &Tensor<F>) -> &[F] {
    logits.row(logits.rows() - 1)
}

/// Mean of `p(stereo) - p(anti)` at the final position.
pub fn task_metric<F: Real>(model: &Transformer<F>, dataset: &[MinimalPair]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let gaps = dataset
        .par_iter()
        .map(|p| Ok(prob_gap(&model.final_logits(&p.x)?, p.targets()?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Task metric with the edges in `removed` ablated.
pub fn ablated_metric<F: Real>(model: &Transformer<F>, prepared: &[AblationPair<F>], removed: &AblationSet) -> Result<f64> {
    if prepared.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let gaps = prepared
        .par_iter()
        .map(|p| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let logits = if removed.is_empty() {
                model.trace(&mut tape, &bound, &p.x, &mut NoHook)?
            } else {
                let mut hook = AblateHook {
                    removed,
                    cf: &p.cf_cache,
                };
                model.trace(&mut tape, &bound, &p.x, &mut hook)?
            };
            Ok(prob_gap(final_row(tape.value(logits)), p.targets))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

fn check_edge(config: &ModelConfig, edge: EdgeId) -> Result<()> {
    if senders_of(config, edge.receiver).contains(&edge.sender) {
        Ok(())
    } else {
        Err(Error::invalid(format!("no edge {edge} in the graph")))
    }
}

/// Ablates `edge` on top of the already-removed edges.
pub fn ablate_edge<F: Real>(
    model: &Transformer<F>,
    prepared: &[AblationPair<F>],
    removed: &AblationSet,
    edge: EdgeId,
) -> Result<EdgeAblation> {
    check_edge(model.config(), edge)?;
    let before = ablated_metric(model, prepared, removed)?;
    let mut with = removed.clone();
    with.entry(edge.receiver).or_default().insert(edge.sender);
    let after = ablated_metric(model, prepared, &with)?;
    Ok(EdgeAblation {
        edge,
        metric_before: before,
        metric_after: after,
        delta: (after - before).abs(),
    })
}

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    pub threshold: f64,
    /// Metric of the unablated model.
    pub metric_full: f64,
    /// Metric with every removed edge ablated.
    pub metric_circuit: f64,
    pub edges: Vec<Edge>,
}

impl Circuit {
    pub fn present(&self) -> impl Iterator<Item = EdgeId> + '_ {
        self.edges.iter().filter(|e| e.present).map(|e| e.id)
    }

    pub fn removed(&self) -> AblationSet {
        let mut out = AblationSet::new();
        for e in self.edges.iter().filter(|e| !e.present) {
            out.entry(e.id.receiver).or_default().insert(e.id.sender);
        }
        out
    }

    /// Attention heads with at least one retained incident edge.
    pub fn heads(&self) -> Vec<ComponentId> {
        let mut out = BTreeSet::new();
        for e in self.present() {
            if let c @ ComponentId::AttnHead { .. } = e.sender {
                out.insert(c);
            }
            if let Receiver::Component(c @ ComponentId::AttnHead { .. }) = e.receiver {
                out.insert(c);
            }
        }
        out.into_iter().collect()
    }

    /// Components from which the logits are reachable over retained edges.
    pub fn reaches_logits(&self) -> BTreeSet<ComponentId> {
        let mut reach = BTreeSet::new();
        let mut frontier = vec![Receiver::Logits];
        while let Some(r) = frontier.pop() {
            for e in self.present().filter(|e| e.receiver == r) {
                if reach.insert(e.sender) {
                    frontier.push(Receiver::Component(e.sender));
                }
            }
        }
        reach
    }

    /// Whether retained edges link the input to `c` and `c` to the logits.
    pub fn has_path_through(&self, c: ComponentId) -> bool {
        if !self.reaches_logits().contains(&c) {
            return false;
        }
        let mut seen = BTreeSet::from([ComponentId::Embed]);
        let mut frontier = vec![ComponentId::Embed];
        while let Some(s) = frontier.pop() {
            for e in self.present().filter(|e| e.sender == s) {
                if let Receiver::Component(r) = e.receiver {
                    if seen.insert(r) {
                        frontier.push(r);
                    }
                }
            }
        }
        seen.contains(&c)
    }
}

/// Greedy output-first pruning at `threshold`.
pub fn acdc_prune<F: Real>(model: &Transformer<F>, dataset: &[MinimalPair], threshold: f64) -> Result<Circuit> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
    }
    let prepared = prepare(model, dataset)?;
    let metric_full = ablated_metric(model, &prepared, &AblationSet::new())?;
    let mut current = metric_full;
    let mut removed = AblationSet::new();
    let mut edges = Vec::new();
    for id in all_edges(model.config()) {
        removed.entry(id.receiver).or_default().insert(id.sender);
        let after = ablated_metric(model, &prepared, &removed)?;
        let delta = (after - current).abs();
        let present = delta >= threshold;
        if present {
            removed.get_mut(&id.receiver).expect("just inserted").remove(&id.sender);
        } else {
            current = after;
        }
        edges.push(Edge {
            id,
            present,
            last_delta: Some(delta),
        });
    }
    Ok(Circuit {
        threshold,
        metric_full,
        metric_circuit: current,
        edges,
    })
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CircuitFormat {
    /// Graphviz digraph of the retained edges.
    Dot,
    /// Tab-separated edge records that load back losslessly.
    Records,
}

fn dot_name(r: Receiver) -> String {
    match r {
        Receiver::Component(ComponentId::Embed) => "input".to_string(),
        other => other.to_string(),
    }
}

pub fn to_dot(circuit: &Circuit) -> String {
    let mut out = String::from("digraph circuit {\n");
    for e in circuit.edges.iter().filter(|e| e.present) {
        let label = e.last_delta.map(|d| format!(" [label=\"{d:.4}\"]")).unwrap_or_default();
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\"{label};",
            dot_name(Receiver::Component(e.id.sender)),
            dot_name(e.id.receiver)
        );
    }
    out.push_str("}\n");
    out
}

pub fn to_records(circuit: &Circuit) -> String {
    let mut out = format!(
        "# threshold\t{:?}\n# metric_full\t{:?}\n# metric_circuit\t{:?}\n# sender\treceiver\tpresent\tdelta\n",
        circuit.threshold, circuit.metric_full, circuit.metric_circuit
    );
    for e in &circuit.edges {
        let delta = e.last_delta.map(|d| format!("{d:?}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "{}\t{}\t{}\t{delta}", e.id.sender, e.id.receiver, e.present as u8);
    }
    out
}

pub fn parse_records(text: &str, path: &Path) -> Result<Circuit> {
    let mut header = BTreeMap::new();
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if let Some(rest) = line.strip_prefix("# ") {
            if let Some((k, v)) = rest.split_once('\t') {
                if let Ok(x) = v.parse::<f64>() {
                    header.insert(k.to_string(), x);
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let [s, r, p, d] = f.as_slice() else {
            return Err(err(format!("expected 4 fields, found {}", f.len())));
        };
        edges.push(Edge {
            id: EdgeId {
                sender: s.parse().map_err(|e: Error| err(e.to_string()))?,
                receiver: r.parse().map_err(|e: Error| err(e.to_string()))?,
            },
            present: match *p {
                "1" => true,
                "0" => false,
                other => return Err(err(format!("bad presence flag {other:?}"))),
            },
            last_delta: match *d {
                "-" => None,
                v => Some(v.parse().map_err(|_| err(format!("bad delta {v:?}")))?),
            },
        });
    }
    let get = |k: &str| {
        header.get(k).copied().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("missing header {k}"),
        })
    };
    Ok(Circuit {
        threshold: get("threshold")?,
        metric_full: get("metric_full")?,
        metric_circuit: get("metric_circuit")?,
        edges,
    })
}

pub fn export_circuit(circuit: &Circuit, format: CircuitFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        CircuitFormat::Dot => to_dot(circuit),
        CircuitFormat::Records => to_records(circuit),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_circuit(path: impl AsRef<Path>) -> Result<Circuit> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 16,
            vocab_size: 12,
            max_seq_len: 8,
            tie_embeddings: true,
        }
    }

    #[test]
    fn edge_count_and_order() {
        let cfg = tiny();
        let edges = all_edges(&cfg);
        // logits 7, L1MLP 6, L1 heads 2x4, L0MLP 3, L0 heads 2x1
        assert_eq!(edges.len(), 7 + 6 + 8 + 3 + 2);
        assert_eq!(edges[0].receiver, Receiver::Logits);
        assert_eq!(edges[0].sender, ComponentId::Mlp { layer: 1 });
        assert_eq!(edges.last().unwrap().sender, ComponentId::Embed);
        assert!(edges.iter().all(|e| e.sender < match e.receiver {
            Receiver::Component(c) => c,
            Receiver::Logits => ComponentId::Mlp { layer: 99 },
        }));
    }

    #[test]
    fn records_round_trip() {
        let c = Circuit {
            threshold: 0.01,
            metric_full: 0.3,
            metric_circuit: 0.1 + 0.2,
            edges: vec![
                Edge {
                    id: EdgeId {
                        sender: ComponentId::Embed,
                        receiver: Receiver::Logits,
                    },
                    present: true,
                    last_delta: Some(1e-7),
                },
                Edge {
                    id: EdgeId {
                        sender: ComponentId::AttnHead { layer: 0, head: 1 },
                        receiver: Receiver::Component(ComponentId::Mlp { layer: 0 }),
                    },
                    present: false,
                    last_delta: None,
                },
            ],
        };
        assert_eq!(parse_records(&to_records(&c), Path::new("x")).unwrap(), c);
    }

    #[test]
    fn empty_circuit_is_header_only() {
        let c = Circuit {
            threshold: 1.0,
            metric_full: 0.0,
            metric_circuit: 0.0,
            edges: Vec::new(),
        };
        assert!(to_records(&c).lines().all(|l| l.starts_with('#')));
        assert_eq!(to_dot(&c), "digraph circuit {\n}\n");
    }

    #[test]
    fn bad_threshold() {
        let m = Transformer::<f32>::random(tiny(), 0).unwrap();
        let pair = MinimalPair::new(vec![2, 3], vec![2, 4], 5, 6).unwrap();
        for t in [0.0, -1.0, f64::NAN] {
            assert!(acdc_prune(&m, std::slice::from_ref(&pair), t).is_err());
        }
    }
}
