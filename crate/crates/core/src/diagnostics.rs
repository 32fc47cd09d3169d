//! Per-operation gradients, the gradient-correlation term, collapse
//! detection, and trace emission.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::space::{Activation, Architecture, CellSpec, Forward, Supernet};
use crate::tensor::Tensor;

/// Which split produced the α-gradient of a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Train,
    Val,
}

/// One row per (step, cell, edge, candidate op). `p`, `grad_p` and
/// `grad_alpha` are taken at the snapshot that produced the α update;
/// `grad_p`/`grad_alpha` are this cell's contribution (α is shared, so the
/// full α-gradient is the sum over cells).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub cell: usize,
    pub edge: usize,
    pub op_name: OpKind,
    pub p: f64,
    pub grad_p: f64,
    pub grad_alpha: f64,
    pub loss_train: f64,
    pub loss_val: Option<f64>,
    pub corr: Option<f64>,
    pub provenance: Provenance,
}

pub const CSV_HEADER: [&str; 12] = [
    "step",
    "epoch",
    "cell",
    "edge",
    "op_name",
    "p",
    "grad_p",
    "grad_alpha",
    "loss_train",
    "loss_val",
    "corr",
    "provenance",
];

/// `∂L/∂p_k` of every candidate on tap `tap` of a completed forward and
/// backward pass: `⟨∂L/∂ō, o_k(x)⟩`, summed over the batch (the loss is
/// already a batch mean).
pub fn tap_grad_p(fwd: &Forward, grads: &Gradients, tap: usize) -> Result<Vec<f64>> {
    let t = fwd
        .taps
        .get(tap)
        .ok_or_else(|| Error::invalid(format!("edge tap {tap} out of range ({})", fwd.taps.len())))?;
    let Some(adj) = grads.get(t.output) else {
        return Ok(vec![0.0; t.op_outputs.len()]);
    };
    Ok(t.op_outputs
        .iter()
        .map(|&o| adj.dot(fwd.graph.value(o)))
        .collect())
}

/// Forward and backward on one batch, then `∂L/∂p_k` for every candidate
/// on `edge` of `cell`.
pub fn grad_p(
    net: &Supernet,
    x: &Tensor,
    y: &[usize],
    cell: usize,
    edge: usize,
) -> Result<Vec<f64>> {
    let edges = net.config.spec.num_edges();
    if cell >= net.config.num_cells || edge >= edges {
        return Err(Error::invalid(format!(
            "edge ({cell}, {edge}) out of range ({} cells × {edges} edges)",
            net.config.num_cells
        )));
    }
    let fwd = net.forward(x, Some(y))?;
    let grads = fwd.graph.backward(fwd.loss.expect("labels given"))?;
    tap_grad_p(&fwd, &grads, cell * edges + edge)
}

/// Chain rule from `∂L/∂p` to `∂L/∂α` for one edge.
pub fn alpha_grad_from_p(p: &[f64], grad_p: &[f64], activation: Activation) -> Vec<f64> {
    match activation {
        Activation::Softmax => {
            let mean: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
            p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - mean)).collect()
        }
        Activation::Sigmoid => p
            .iter()
            .zip(grad_p)
            .map(|(pi, gi)| pi * (1.0 - pi) * gi)
            .collect(),
    }
}

fn paired_rows(g: &Tensor, x: &Tensor) -> Result<(usize, usize)> {
    let (n, w) = g.as_rows().ok_or_else(|| Error::invalid("gradient must be a matrix"))?;
    if x.shape() != g.shape() {
        return Err(Error::Shape {
            op: "gradient correlation",
            left: g.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    Ok((n, w))
}

/// `Σ_j Σ_k (g_aj · g_bk)(x_aj · x_bk) / (N·M)` for per-sample edge-output
/// gradients `g` and edge inputs `x`, each `[rows, width]`.
pub fn gradient_correlation(g_a: &Tensor, x_a: &Tensor, g_b: &Tensor, x_b: &Tensor) -> Result<f64> {
    let (n, w) = paired_rows(g_a, x_a)?;
    let (m, w2) = paired_rows(g_b, x_b)?;
    if w != w2 {
        return Err(Error::Shape {
            op: "gradient correlation",
            left: g_a.shape().to_vec(),
            right: g_b.shape().to_vec(),
        });
    }
    if n == 0 || m == 0 {
        return Ok(0.0);
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut total = 0.0;
    for j in 0..n {
        let (ga, xa) = (g_a.row(j), x_a.row(j));
        for k in 0..m {
            total += dot(ga, g_b.row(k)) * dot(xa, x_b.row(k));
        }
    }
    Ok(total / (n * m) as f64)
}

/// Diagonal part `Σ_j ‖g_j‖²‖x_j‖² / N²` of the same-batch correlation.
pub fn correlation_diagonal(g: &Tensor, x: &Tensor) -> Result<f64> {
    let (n, _) = paired_rows(g, x)?;
    if n == 0 {
        return Ok(0.0);
    }
    let sq = |a: &[f64]| a.iter().map(|v| v * v).sum::<f64>();
    let total: f64 = (0..n).map(|j| sq(g.row(j)) * sq(x.row(j))).sum();
    Ok(total / (n * n) as f64)
}

/// Per-sample `∂L/∂ō` and edge input of every tap. Rows of the batch-mean
/// adjoint are rescaled by the batch size.
pub struct EdgeSignals {
    pub per_tap: Vec<(Tensor, Tensor)>,
}

impl EdgeSignals {
    pub fn capture(fwd: &Forward, grads: &Gradients) -> Self {
        let per_tap = fwd
            .taps
            .iter()
            .map(|t| {
                let x = fwd.graph.value(t.input).clone();
                let n = x.shape()[0] as f64;
                let g = grads
                    .get_or_zeros(t.output, fwd.graph.value(t.output))
                    .map(|v| v * n);
                (g, x)
            })
            .collect();
        EdgeSignals { per_tap }
    }

    /// Runs forward and backward on `(x, y)` and captures the signals.
    pub fn measure(net: &Supernet, x: &Tensor, y: &[usize]) -> Result<Self> {
        let fwd = net.forward(x, Some(y))?;
        let grads = fwd.graph.backward(fwd.loss.expect("labels given"))?;
        Ok(EdgeSignals::capture(&fwd, &grads))
    }

    /// Per-tap correlation against `other` (same network, same tap order).
    pub fn correlation(&self, other: &EdgeSignals) -> Result<Vec<f64>> {
        if self.per_tap.len() != other.per_tap.len() {
            return Err(Error::invalid("signals come from different networks"));
        }
        self.per_tap
            .iter()
            .zip(&other.per_tap)
            .map(|((ga, xa), (gb, xb))| gradient_correlation(ga, xa, gb, xb))
            .collect()
    }
}

/// Correlation of one batch pair on a single edge.
pub fn edge_correlation(
    net: &Supernet,
    batch_a: (&Tensor, &[usize]),
    batch_b: (&Tensor, &[usize]),
    cell: usize,
    edge: usize,
) -> Result<f64> {
    let edges = net.config.spec.num_edges();
    if cell >= net.config.num_cells || edge >= edges {
        return Err(Error::invalid(format!("edge ({cell}, {edge}) out of range")));
    }
    let a = EdgeSignals::measure(net, batch_a.0, batch_a.1)?;
    let b = EdgeSignals::measure(net, batch_b.0, batch_b.1)?;
    let (ga, xa) = &a.per_tap[cell * edges + edge];
    let (gb, xb) = &b.per_tap[cell * edges + edge];
    gradient_correlation(ga, xa, gb, xb)
}

/// Correlation aggregated per node: each non-input node gets the sum over
/// its incoming edges. `nodes[c][j - 1]` belongs to node `j` of cell `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub regime: String,
    pub nodes: Vec<Vec<f64>>,
}

impl CorrelationReport {
    pub fn from_taps(regime: &str, spec: &CellSpec, cells: usize, per_tap: &[f64]) -> Self {
        let e = spec.num_edges();
        let nodes = (0..cells)
            .map(|c| {
                let mut v = vec![0.0; spec.num_nodes - 1];
                for (k, &(_, j)) in spec.edges.iter().enumerate() {
                    v[j - 1] += per_tap[c * e + k];
                }
                v
            })
            .collect();
        CorrelationReport {
            regime: regime.to_string(),
            nodes,
        }
    }

    /// Sum over all nodes of cell `c`.
    pub fn cell_total(&self, c: usize) -> f64 {
        self.nodes[c].iter().sum()
    }
}

/// Same-batch against cross-batch correlation at one network snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeparation {
    pub pairs: usize,
    pub batch_size: usize,
    /// Mean same-batch correlation per node.
    pub same: CorrelationReport,
    /// Mean absolute cross-batch correlation per node.
    pub cross: CorrelationReport,
    /// Per cell: mean same-batch cell total.
    pub cell_same: Vec<f64>,
    /// Per cell: mean of the absolute cross-batch cell total.
    pub cell_cross: Vec<f64>,
}

impl CorrelationSeparation {
    /// `cell_cross / cell_same` per cell.
    pub fn ratios(&self) -> Vec<f64> {
        self.cell_cross
            .iter()
            .zip(&self.cell_same)
            .map(|(c, s)| c / s)
            .collect()
    }

    /// First, middle and last cell indices.
    pub fn probe_cells(&self) -> Vec<usize> {
        let n = self.cell_same.len();
        let mut v = vec![0, n / 2, n.saturating_sub(1)];
        v.dedup();
        v
    }
}

/// Draws `pairs` pairs of disjoint batches from `split` and compares the
/// correlation of each batch with itself (both batches count) against the
/// correlation between the two.
pub fn correlation_separation(
    net: &Supernet,
    split: &crate::data::Split,
    batch_size: usize,
    pairs: usize,
    seed: u64,
) -> Result<CorrelationSeparation> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if pairs == 0 || batch_size == 0 || split.len() < 2 * batch_size {
        return Err(Error::invalid(format!(
            "need {pairs} > 0 pairs of two disjoint {batch_size}-row batches from {} rows",
            split.len()
        )));
    }
    let spec = &net.config.spec;
    let cells = net.config.num_cells;
    let nodes = spec.num_nodes - 1;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::space::derive_seed(seed, &[600]));
    let mut same = vec![vec![0.0; nodes]; cells];
    let mut cross = vec![vec![0.0; nodes]; cells];
    let (mut cell_same, mut cell_cross) = (vec![0.0; cells], vec![0.0; cells]);
    let mut order: Vec<usize> = (0..split.len()).collect();
    for _ in 0..pairs {
        order.shuffle(&mut rng);
        let (xa, ya) = split.batch(&order[..batch_size]);
        let (xb, yb) = split.batch(&order[batch_size..2 * batch_size]);
        let a = EdgeSignals::measure(net, &xa, &ya)?;
        let b = EdgeSignals::measure(net, &xb, &yb)?;
        let sa = CorrelationReport::from_taps("", spec, cells, &a.correlation(&a)?);
        let sb = CorrelationReport::from_taps("", spec, cells, &b.correlation(&b)?);
        let ab = CorrelationReport::from_taps("", spec, cells, &a.correlation(&b)?);
        for c in 0..cells {
            for j in 0..nodes {
                same[c][j] += (sa.nodes[c][j] + sb.nodes[c][j]) / 2.0;
                cross[c][j] += ab.nodes[c][j].abs();
            }
            cell_same[c] += (sa.cell_total(c) + sb.cell_total(c)) / 2.0;
            cell_cross[c] += ab.cell_total(c).abs();
        }
    }
    let k = pairs as f64;
    let scale = |v: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        v.into_iter().map(|r| r.into_iter().map(|x| x / k).collect()).collect()
    };
    Ok(CorrelationSeparation {
        pairs,
        batch_size,
        same: CorrelationReport {
            regime: "same_batch".into(),
            nodes: scale(same),
        },
        cross: CorrelationReport {
            regime: "cross_batch".into(),
            nodes: scale(cross),
        },
        cell_same: cell_same.into_iter().map(|x| x / k).collect(),
        cell_cross: cell_cross.into_iter().map(|x| x / k).collect(),
    })
}

/// What happened on one edge of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeCollapse {
    pub edge: usize,
    /// First step from which some non-learnable `p` stays strictly above
    /// every learnable `p` until the end of the trace.
    pub crossing_step: Option<usize>,
    pub final_op: OpKind,
    /// Final choice is non-learnable while the oracle's best is learnable.
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub edges: Vec<EdgeCollapse>,
}

impl CollapseReport {
    pub fn crossings(&self) -> usize {
        self.edges.iter().filter(|e| e.crossing_step.is_some()).count()
    }

    pub fn flagged(&self) -> usize {
        self.edges.iter().filter(|e| e.flagged).count()
    }
}

/// Irreversible learnable → non-learnable crossings per edge, read from the
/// cell-0 rows of `trace` (α is shared, so every cell carries the same `p`).
/// `final_arch` supplies the final choice when the trace ends before the
/// last update; otherwise the argmax of the last recorded step is used.
pub fn collapse_detector(
    trace: &[TraceRecord],
    spec: &CellSpec,
    final_arch: Option<&Architecture>,
    oracle_best: Option<&Architecture>,
) -> CollapseReport {
    if trace.is_empty() {
        return CollapseReport::default();
    }
    let mut edges = Vec::new();
    for e in 0..spec.num_edges() {
        // (step, max non-learnable p, max learnable p, argmax op)
        let mut series: Vec<(usize, f64, f64, OpKind, f64)> = Vec::new();
        for r in trace.iter().filter(|r| r.cell == 0 && r.edge == e) {
            if series.last().map(|s| s.0) != Some(r.step) {
                series.push((r.step, f64::NEG_INFINITY, f64::NEG_INFINITY, r.op_name, r.p));
            }
            let s = series.last_mut().expect("pushed");
            if r.op_name.is_learnable() {
                s.2 = s.2.max(r.p);
            } else {
                s.1 = s.1.max(r.p);
            }
            if r.p > s.4 {
                s.3 = r.op_name;
                s.4 = r.p;
            }
        }
        let Some(last) = series.last() else { continue };
        let has_both = series[0].1.is_finite() && series[0].2.is_finite();
        let mut crossing = None;
        if has_both {
            for s in series.iter().rev() {
                if s.1 > s.2 {
                    crossing = Some(s.0);
                } else {
                    break;
                }
            }
        }
        let final_op = final_arch.map_or(last.3, |a| a.ops[e]);
        let flagged = !final_op.is_learnable()
            && oracle_best.is_some_and(|b| b.ops[e].is_learnable());
        edges.push(EdgeCollapse {
            edge: e,
            crossing_step: crossing,
            final_op,
            flagged,
        });
    }
    CollapseReport { edges }
}

pub fn write_trace_csv(trace: &[TraceRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in trace {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let header = r
        .headers()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    r.deserialize()
        .map(|rec| {
            rec.map_err(|e: csv::Error| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// JSON summary of one search run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub regime: String,
    pub seed: u64,
    pub steps: usize,
    pub activation: Activation,
    pub final_alpha: Vec<Vec<f64>>,
    pub final_p: Vec<Vec<f64>>,
    pub architecture: String,
    pub final_loss_train: Option<f64>,
    pub correlation: Option<CorrelationReport>,
}

/// Writes `trace.csv` and `summary.json` into `dir`.
pub fn emit_traces(
    result: &crate::search::SearchResult,
    correlation: Option<CorrelationReport>,
    dir: &Path,
) -> Result<RunSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_trace_csv(&result.trace, &dir.join("trace.csv"))?;
    let summary = result.summary(correlation);
    write_json(&summary, &dir.join("summary.json"))?;
    Ok(summary)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
