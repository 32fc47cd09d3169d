//! Cell search spaces, the relaxed supernet, and discretized architectures.
//!
//! A network is `stem → cell × num_cells → head`. Inside a cell, node 0 is
//! the cell input, every later node is the sum of its incoming edges, and the
//! last node is the cell output. In relaxed mode each edge mixes all
//! candidate operations by `p = act(α_edge)`; architecture parameters are
//! shared by all cells while operation weights are per cell.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{uniform_init, CandidateOp, OpKind};
use crate::tensor::Tensor;

/// Epsilon of the per-edge feature standardization.
pub const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub ops: Vec<OpKind>,
}

impl CellSpec {
    /// Every `i → j` with `i < j`, ordered by target node then source.
    pub fn complete(num_nodes: usize, ops: Vec<OpKind>) -> Self {
        let edges = (1..num_nodes)
            .flat_map(|j| (0..j).map(move |i| (i, j)))
            .collect();
        CellSpec {
            num_nodes,
            edges,
            ops,
        }
    }

    /// 4 nodes, 6 edges and the five NAS-Bench-201 operations.
    pub fn nas201() -> Self {
        CellSpec::complete(4, OpKind::ALL.to_vec())
    }

    /// 3 nodes, 3 edges, 3 operations: 27 architectures.
    pub fn micro() -> Self {
        CellSpec::complete(3, vec![OpKind::Zero, OpKind::Skip, OpKind::Linear3])
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes < 2 {
            return Err(Error::invalid("a cell needs at least two nodes"));
        }
        if self.ops.is_empty() {
            return Err(Error::invalid("a cell needs at least one candidate op"));
        }
        for (k, a) in self.ops.iter().enumerate() {
            if self.ops[..k].contains(a) {
                return Err(Error::invalid(format!("duplicate candidate op {a}")));
            }
        }
        for &(i, j) in &self.edges {
            if i >= j || j >= self.num_nodes {
                return Err(Error::invalid(format!(
                    "edge {i}->{j} is not forward within {} nodes",
                    self.num_nodes
                )));
            }
        }
        if !self.edges.iter().any(|&(_, j)| j == self.num_nodes - 1) {
            return Err(Error::invalid("the output node has no incoming edge"));
        }
        Ok(())
    }

    pub fn op_index(&self, kind: OpKind) -> Option<usize> {
        self.ops.iter().position(|&k| k == kind)
    }

    fn is_complete(&self) -> bool {
        *self == CellSpec::complete(self.num_nodes, self.ops.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softmax,
    Sigmoid,
}

impl Activation {
    /// Softmax starts uniform; sigmoid starts at `sigmoid(-ln 7) = 1/8`.
    pub fn default_alpha_init(self) -> f64 {
        match self {
            Activation::Softmax => 0.0,
            Activation::Sigmoid => -(7f64.ln()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Softmax => "softmax",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Activation::Softmax),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => Err(Error::invalid(format!("unknown activation `{s}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture parameters, one row per edge and one column per candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSet {
    pub alpha: Tensor,
    pub activation: Activation,
}

impl AlphaSet {
    pub fn new(edges: usize, ops: usize, activation: Activation, init: f64) -> Self {
        AlphaSet {
            alpha: Tensor::filled(&[edges, ops], init),
            activation,
        }
    }

    pub fn with_default_init(edges: usize, ops: usize, activation: Activation) -> Self {
        AlphaSet::new(edges, ops, activation, activation.default_alpha_init())
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, activation: Activation) -> Result<Self> {
        let e = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("ragged alpha rows"));
        }
        let alpha = Tensor::matrix(e, k, rows.concat())?;
        alpha.check_finite("alpha")?;
        Ok(AlphaSet { alpha, activation })
    }

    pub fn num_edges(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn num_ops(&self) -> usize {
        self.alpha.shape()[1]
    }

    pub fn row(&self, edge: usize) -> &[f64] {
        self.alpha.row(edge)
    }

    /// `act(α)` row by row.
    pub fn probabilities(&self) -> Tensor {
        match self.activation {
            Activation::Softmax => {
                let mut p = self.alpha.clone();
                let k = self.num_ops();
                for row in p.data_mut().chunks_mut(k) {
                    crate::autodiff::softmax_in_place(row);
                }
                p
            }
            Activation::Sigmoid => self.alpha.map(crate::autodiff::sigmoid),
        }
    }

    /// Records `act(α)` on a graph given the α handle.
    pub fn record_probabilities(&self, g: &mut Graph, alpha: Var) -> Result<Var> {
        match self.activation {
            Activation::Softmax => g.softmax(alpha),
            Activation::Sigmoid => g.sigmoid(alpha),
        }
    }
}

/// One chosen operation per edge.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Architecture {
    pub ops: Vec<OpKind>,
}

impl Architecture {
    pub fn new(ops: Vec<OpKind>) -> Self {
        Architecture { ops }
    }

    pub fn check(&self, spec: &CellSpec) -> Result<()> {
        if self.ops.len() != spec.num_edges() {
            return Err(Error::invalid(format!(
                "architecture has {} edges, spec has {}",
                self.ops.len(),
                spec.num_edges()
            )));
        }
        for k in &self.ops {
            if spec.op_index(*k).is_none() {
                return Err(Error::invalid(format!("{k} is not a candidate in this space")));
            }
        }
        Ok(())
    }

    pub fn uses_learnable(&self, edge: usize) -> bool {
        self.ops[edge].is_learnable()
    }

    /// NAS-Bench-201 string, e.g. `|nor_conv_3x3~0|+|skip_connect~0|none~1|`.
    /// Only defined for complete-DAG cells.
    pub fn to_nas201_string(&self, spec: &CellSpec) -> Result<String> {
        self.check(spec)?;
        if !spec.is_complete() {
            return Err(Error::invalid("string form needs a complete-DAG cell"));
        }
        let mut nodes = Vec::new();
        for j in 1..spec.num_nodes {
            let mut s = String::from("|");
            for (e, &(i, _)) in spec.edges.iter().enumerate().filter(|(_, &(_, t))| t == j) {
                s.push_str(&format!("{}~{}|", self.ops[e], i));
            }
            nodes.push(s);
        }
        Ok(nodes.join("+"))
    }

    pub fn parse_nas201(s: &str, spec: &CellSpec) -> Result<Self> {
        let mut ops = Vec::new();
        let mut seen = Vec::new();
        for (n, node) in s.split('+').enumerate() {
            let inner = node
                .strip_prefix('|')
                .and_then(|t| t.strip_suffix('|'))
                .ok_or_else(|| Error::invalid(format!("malformed node `{node}`")))?;
            for item in inner.split('|') {
                let (op, src) = item
                    .split_once('~')
                    .ok_or_else(|| Error::invalid(format!("malformed edge `{item}`")))?;
                let src: usize = src
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad source in `{item}`")))?;
                ops.push(op.parse()?);
                seen.push((src, n + 1));
            }
        }
        if seen != spec.edges {
            return Err(Error::invalid(format!("`{s}` does not match the cell's edges")));
        }
        let arch = Architecture { ops };
        arch.check(spec)?;
        Ok(arch)
    }

    /// String form when the cell allows it, JSON op list otherwise.
    pub fn label(&self, spec: &CellSpec) -> String {
        self.to_nas201_string(spec)
            .unwrap_or_else(|_| serde_json::to_string(&self.ops).expect("op names serialize"))
    }
}

/// Architecture with the largest activation per edge; ties go to the lowest
/// operation index.
pub fn discretize(alphas: &AlphaSet, spec: &CellSpec) -> Architecture {
    let p = alphas.probabilities();
    let k = alphas.num_ops();
    let ops = p
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            spec.ops[best]
        })
        .collect();
    Architecture { ops }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub width: usize,
    pub classes: usize,
    pub num_cells: usize,
    pub spec: CellSpec,
    /// Standardize every non-zero candidate output over the batch.
    pub standardize: bool,
}

impl NetConfig {
    /// 3 stacked 6-edge cells, width 16, 4 classes.
    pub fn desk_nas201() -> Self {
        NetConfig {
            input_dim: 16,
            width: 16,
            classes: 4,
            num_cells: 3,
            spec: CellSpec::nas201(),
            standardize: true,
        }
    }

    /// A single 3-edge cell, width 16, 4 classes.
    pub fn micro() -> Self {
        NetConfig {
            num_cells: 1,
            spec: CellSpec::micro(),
            ..NetConfig::desk_nas201()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.input_dim == 0 || self.width == 0 || self.classes < 2 || self.num_cells == 0 {
            return Err(Error::invalid("network dimensions must be positive (classes ≥ 2)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Mixing {
    Relaxed(AlphaSet),
    Discrete(Architecture),
}

/// Either a relaxed supernet or, after [`Supernet::instantiate`], a plain
/// network holding only the chosen operation on each edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Supernet {
    pub config: NetConfig,
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    /// `cells[c][e]` lists the operations instantiated on edge `e` of cell `c`.
    pub cells: Vec<Vec<Vec<CandidateOp>>>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub mixing: Mixing,
}

/// Deterministic sub-seed for a named component.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        h = splitmix(h ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn op_seed(seed: u64, cell: usize, edge: usize, kind: OpKind) -> u64 {
    let kind_idx = OpKind::ALL.iter().position(|&k| k == kind).unwrap_or(0);
    derive_seed(seed, &[3, cell as u64, edge as u64, kind_idx as u64])
}

fn build_op(kind: OpKind, width: usize, seed: u64) -> Result<CandidateOp> {
    let op = CandidateOp::new(kind, width);
    if kind.is_learnable() {
        op.init_weights(seed)
    } else {
        Ok(op)
    }
}

/// Per-edge handles recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct EdgeTap {
    pub cell: usize,
    pub edge: usize,
    /// The edge input (node `i` of edge `i → j`).
    pub input: Var,
    /// The mixed edge output `ō`.
    pub output: Var,
    /// Per-slot operation outputs (after standardization); one per
    /// candidate in relaxed mode, one in discrete mode.
    pub op_outputs: Vec<Var>,
}

pub struct Forward {
    pub graph: Graph,
    pub logits: Var,
    pub loss: Option<Var>,
    /// Handles of [`Supernet::weights`], same order.
    pub weight_vars: Vec<Var>,
    /// α handle (relaxed mode, unless probabilities were injected).
    pub alpha: Option<Var>,
    /// `[E, K]` probability handle (relaxed mode).
    pub probs: Option<Var>,
    pub taps: Vec<EdgeTap>,
}

impl Forward {
    pub fn loss_value(&self) -> Option<f64> {
        self.loss.map(|l| self.graph.value(l).item())
    }
}

/// Row-wise one-hot encoding of class labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &y) in labels.iter().enumerate() {
        t.data_mut()[r * classes + y] = 1.0;
    }
    t
}

impl Supernet {
    /// Relaxed supernet with α at the activation's default init.
    pub fn new(config: NetConfig, activation: Activation, seed: u64) -> Result<Self> {
        let init = activation.default_alpha_init();
        Supernet::with_alpha_init(config, activation, init, seed)
    }

    pub fn with_alpha_init(
        config: NetConfig,
        activation: Activation,
        alpha_init: f64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let spec = &config.spec;
        let alphas = AlphaSet::new(spec.num_edges(), spec.num_ops(), activation, alpha_init);
        let cells = (0..config.num_cells)
            .map(|c| {
                (0..spec.num_edges())
                    .map(|e| {
                        spec.ops
                            .iter()
                            .map(|&k| build_op(k, config.width, op_seed(seed, c, e, k)))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Supernet::assemble(config, cells, Mixing::Relaxed(alphas), seed))
    }

    /// Stand-alone network with only `arch`'s operations. Weights match the
    /// corresponding operations of a supernet built with the same seed.
    pub fn instantiate(config: NetConfig, arch: &Architecture, seed: u64) -> Result<Self> {
        config.validate()?;
        arch.check(&config.spec)?;
        let cells = (0..config.num_cells)
            .map(|c| {
                arch.ops
                    .iter()
                    .enumerate()
                    .map(|(e, &k)| Ok(vec![build_op(k, config.width, op_seed(seed, c, e, k))?]))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Supernet::assemble(
            config,
            cells,
            Mixing::Discrete(arch.clone()),
            seed,
        ))
    }

    fn assemble(
        config: NetConfig,
        cells: Vec<Vec<Vec<CandidateOp>>>,
        mixing: Mixing,
        seed: u64,
    ) -> Self {
        Supernet {
            stem_w: uniform_init(config.width, config.input_dim, derive_seed(seed, &[1])),
            stem_b: Tensor::zeros(&[config.width]),
            head_w: uniform_init(config.classes, config.width, derive_seed(seed, &[2])),
            head_b: Tensor::zeros(&[config.classes]),
            cells,
            config,
            mixing,
        }
    }

    pub fn alphas(&self) -> Option<&AlphaSet> {
        match &self.mixing {
            Mixing::Relaxed(a) => Some(a),
            Mixing::Discrete(_) => None,
        }
    }

    pub fn alphas_mut(&mut self) -> Option<&mut AlphaSet> {
        match &mut self.mixing {
            Mixing::Relaxed(a) => Some(a),
            Mixing::Discrete(_) => None,
        }
    }

    /// All operation weights, stem and head, in a fixed order.
    pub fn weights(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.stem_w, &self.stem_b];
        for cell in &self.cells {
            for edge in cell {
                for op in edge {
                    out.extend(op.weights.iter());
                }
            }
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.stem_w, &mut self.stem_b];
        for cell in &mut self.cells {
            for edge in cell {
                for op in edge {
                    out.extend(op.weights.iter_mut());
                }
            }
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Forward pass on a `[B, input_dim]` batch; with `labels` the mean
    /// cross-entropy is recorded too.
    pub fn forward(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Forward> {
        self.forward_impl(x, labels, None)
    }

    /// Forward pass with the `[E, K]` mixing probabilities supplied directly
    /// as a differentiable input (bypasses α and its activation).
    pub fn forward_with_probs(
        &self,
        x: &Tensor,
        labels: Option<&[usize]>,
        probs: &Tensor,
    ) -> Result<Forward> {
        self.forward_impl(x, labels, Some(probs))
    }

    fn forward_impl(
        &self,
        x: &Tensor,
        labels: Option<&[usize]>,
        probs_override: Option<&Tensor>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        match x.shape() {
            [_, d] if *d == cfg.input_dim => {}
            s => {
                return Err(Error::Shape {
                    op: "supernet input",
                    left: s.to_vec(),
                    right: vec![cfg.input_dim],
                })
            }
        }
        let mut g = Graph::new();
        let weight_vars = self
            .weights()
            .into_iter()
            .map(|w| g.param(w.clone()))
            .collect::<Result<Vec<_>>>()?;
        let (mut alpha, mut probs) = (None, None);
        if let Mixing::Relaxed(alphas) = &self.mixing {
            if let Some(p) = probs_override {
                if p.shape() != alphas.alpha.shape() {
                    return Err(Error::Shape {
                        op: "probability override",
                        left: p.shape().to_vec(),
                        right: alphas.alpha.shape().to_vec(),
                    });
                }
                probs = Some(g.param(p.clone())?);
            } else {
                let a = g.param(alphas.alpha.clone())?;
                probs = Some(alphas.record_probabilities(&mut g, a)?);
                alpha = Some(a);
            }
        }

        let xv = g.constant(x.clone())?;
        let mut wi = weight_vars.iter().copied();
        let (stem_w, stem_b) = (wi.next().unwrap(), wi.next().unwrap());
        let h = g.linear(xv, stem_w)?;
        let mut h = g.add_bias(h, stem_b)?;

        let mut taps = Vec::new();
        for (c, cell) in self.cells.iter().enumerate() {
            let mut nodes: Vec<Option<Var>> = vec![None; cfg.spec.num_nodes];
            nodes[0] = Some(h);
            for (e, &(i, j)) in cfg.spec.edges.iter().enumerate() {
                let input = match nodes[i] {
                    Some(v) => v,
                    None => {
                        let shape = g.value(h).shape().to_vec();
                        let z = g.constant(Tensor::zeros(&shape))?;
                        nodes[i] = Some(z);
                        z
                    }
                };
                let mut op_outputs = Vec::with_capacity(cell[e].len());
                for op in &cell[e] {
                    let ws: Vec<Var> = (0..op.weights.len()).map(|_| wi.next().unwrap()).collect();
                    let mut y = op.record(&mut g, input, &ws)?;
                    if cfg.standardize && op.kind != OpKind::Zero {
                        y = g.standardize(y, STANDARDIZE_EPS)?;
                    }
                    op_outputs.push(y);
                }
                let output = match probs {
                    Some(p) => {
                        let row = g.select_row(p, e)?;
                        g.weighted_sum(&op_outputs, row)?
                    }
                    None => op_outputs[0],
                };
                nodes[j] = Some(match nodes[j] {
                    Some(acc) => g.add(acc, output)?,
                    None => output,
                });
                taps.push(EdgeTap {
                    cell: c,
                    edge: e,
                    input,
                    output,
                    op_outputs,
                });
            }
            h = nodes[cfg.spec.num_nodes - 1].expect("validated: output node has inputs");
        }

        let (head_w, head_b) = (wi.next().unwrap(), wi.next().unwrap());
        let logits = g.linear(h, head_w)?;
        let logits = g.add_bias(logits, head_b)?;
        let loss = match labels {
            Some(y) => {
                if y.len() != x.shape()[0] || y.iter().any(|&c| c >= cfg.classes) {
                    return Err(Error::invalid("labels do not match the batch"));
                }
                Some(g.cross_entropy(logits, &one_hot(y, cfg.classes))?)
            }
            None => None,
        };
        Ok(Forward {
            graph: g,
            logits,
            loss,
            weight_vars,
            alpha,
            probs,
            taps,
        })
    }

    /// Fraction of rows whose argmax logit equals the label.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let fwd = self.forward(x, None)?;
        let logits = fwd.graph.value(fwd.logits);
        let c = self.config.classes;
        let correct = logits
            .data()
            .chunks(c)
            .zip(labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
