//! Deterministic synthetic classification tasks.
//!
//! * `learnable_required`: labels come from a two-layer relu teacher whose
//!   dominant term is `|u_c · x|`. That term is even in `x`, so nothing
//!   linear in the raw input (stem → skip/zero cells → head) can read it.
//! * `skip_friendly`: labels are the argmax of a linear map of `x`.
//! * `gaussian_clusters`: one isotropic Gaussian blob per class.
//!
//! Inputs are standard normal. Splits are drawn from one stream by
//! per-class quotas, so they are disjoint and balanced to within one sample.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::ops::uniform_init;
use crate::space::{derive_seed, one_hot};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LearnableRequired,
    SkipFriendly,
    GaussianClusters,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LearnableRequired => "learnable_required",
            TaskKind::SkipFriendly => "skip_friendly",
            TaskKind::GaussianClusters => "gaussian_clusters",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable_required" => Ok(TaskKind::LearnableRequired),
            "skip_friendly" => Ok(TaskKind::SkipFriendly),
            "gaussian_clusters" => Ok(TaskKind::GaussianClusters),
            _ => Err(Error::invalid(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Weight of the linear teacher term next to the even `|u·x|` term
    /// (`learnable_required` only).
    pub linear_share: f64,
    /// Even `|u·x|` directions per class (`learnable_required` only).
    pub directions: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: TaskKind::LearnableRequired,
            input_dim: 16,
            classes: 4,
            n_train: 2048,
            n_val: 512,
            n_test: 512,
            seed: 0,
            linear_share: 0.3,
            directions: 3,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::invalid("dataset sizes must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.kind == TaskKind::LearnableRequired
            && (self.directions == 0 || (self.directions + 1) * self.classes > self.input_dim)
        {
            return Err(Error::invalid(
                "learnable_required needs 1 ≤ directions and input_dim ≥ (directions + 1) × classes",
            ));
        }
        Ok(())
    }

    /// Content address of the generated data (hex SHA-256).
    pub fn fingerprint(&self) -> String {
        let canon = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(format!("dataset-v1:{canon}").as_bytes());
        hex::encode(digest)
    }
}

/// Hidden transform of a task: `logits = readout · relu(hidden · x)` for
/// `learnable_required`, `readout · x` for the linear kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub hidden: Option<Tensor>,
    pub readout: Tensor,
}

impl Teacher {
    fn build(spec: &DatasetSpec) -> Self {
        let (d, c) = (spec.input_dim, spec.classes);
        let tseed = derive_seed(spec.seed, &[100]);
        match spec.kind {
            TaskKind::LearnableRequired => {
                // Rows u_{k,1..m}, v_k orthonormal; hidden = [U; -U; V; -V]
                // has condition number 1. Class k reads its m even terms
                // |u_{k,i}·x| plus β v_k·x.
                let m = spec.directions;
                let basis = orthonormal_rows((m + 1) * c, d, tseed);
                let (nu, nv) = (m * c, c);
                let rows = 2 * nu + 2 * nv;
                let mut hidden = Vec::with_capacity(rows * d);
                for (range, sign) in [(0..nu, 1.0), (0..nu, -1.0), (nu..nu + nv, 1.0), (nu..nu + nv, -1.0)] {
                    for r in range {
                        hidden.extend(basis.row(r).iter().map(|v| sign * v));
                    }
                }
                let mut readout = Tensor::zeros(&[c, rows]);
                let beta = spec.linear_share;
                for k in 0..c {
                    let row = &mut readout.data_mut()[k * rows..(k + 1) * rows];
                    for i in 0..m {
                        row[k * m + i] = 1.0;
                        row[nu + k * m + i] = 1.0;
                    }
                    row[2 * nu + k] = beta;
                    row[2 * nu + nv + k] = -beta;
                }
                Teacher {
                    hidden: Some(Tensor::matrix(rows, d, hidden).expect("sized")),
                    readout,
                }
            }
            TaskKind::SkipFriendly => Teacher {
                hidden: None,
                readout: uniform_init(c, d, tseed),
            },
            TaskKind::GaussianClusters => Teacher {
                hidden: None,
                readout: Tensor::zeros(&[c, d]),
            },
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let feats: Vec<f64> = match &self.hidden {
            Some(h) => (0..h.shape()[0])
                .map(|r| dot(h.row(r), x).max(0.0))
                .collect(),
            None => x.to_vec(),
        };
        (0..self.readout.shape()[0])
            .map(|k| dot(self.readout.row(k), &feats))
            .collect()
    }

    pub fn label(&self, x: &[f64]) -> usize {
        crate::space::argmax(&self.logits(x))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        for u in &out {
            let p = dot(u, &v);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Tensor::matrix(rows, cols, out.concat()).expect("sized")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub x: Tensor,
    pub y: Vec<usize>,
    /// Position of each row in the generation stream, unique across splits.
    pub ids: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn subset(&self, rows: &[usize]) -> Split {
        Split {
            x: self.x.gather_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }

    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.gather_rows(rows), rows.iter().map(|&r| self.y[r]).collect())
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub spec: DatasetSpec,
    pub teacher: Teacher,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Task {
    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }
}

fn quotas(n: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| n / classes + usize::from(c < n % classes))
        .collect()
}

pub fn generate(spec: &DatasetSpec) -> Result<Task> {
    spec.validate()?;
    let teacher = Teacher::build(spec);
    let (d, c) = (spec.input_dim, spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[101]));
    let cluster_means = uniform_init(c, d, derive_seed(spec.seed, &[102])).map(|v| 1.5 * v);

    let sizes = [spec.n_train, spec.n_val, spec.n_test];
    let mut need: Vec<Vec<usize>> = sizes.iter().map(|&n| quotas(n, c)).collect();
    let mut bufs: Vec<(Vec<f64>, Vec<usize>, Vec<usize>)> =
        (0..3).map(|_| (Vec::new(), Vec::new(), Vec::new())).collect();
    let total: usize = sizes.iter().sum();
    let mut filled = 0;
    let mut stream = 0usize;
    let limit = 1000 * total + 10_000;
    while filled < total {
        if stream >= limit {
            return Err(Error::invalid("class quotas could not be met"));
        }
        let (x, label) = match spec.kind {
            TaskKind::GaussianClusters => {
                let label = rng.random_range(0..c);
                let x: Vec<f64> = (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        cluster_means.row(label)[j] + z
                    })
                    .collect();
                (x, label)
            }
            _ => {
                let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let label = teacher.label(&x);
                (x, label)
            }
        };
        if let Some(s) = (0..3).find(|&s| need[s][label] > 0) {
            need[s][label] -= 1;
            bufs[s].0.extend(x);
            bufs[s].1.push(label);
            bufs[s].2.push(stream);
            filled += 1;
        }
        stream += 1;
    }
    let mut splits = bufs.into_iter().map(|(x, y, ids)| {
        let n = y.len();
        Split {
            x: Tensor::matrix(n, d, x).expect("sized"),
            y,
            ids,
        }
    });
    Ok(Task {
        spec: spec.clone(),
        teacher,
        train: splits.next().unwrap(),
        val: splits.next().unwrap(),
        test: splits.next().unwrap(),
    })
}

#[derive(Clone, Debug)]
pub struct BilevelSplit {
    /// Rows used for weight updates.
    pub weights: Split,
    /// Rows used for architecture updates.
    pub alpha: Split,
    /// Id of the sample dropped to make the halves equal, if any.
    pub dropped: Option<usize>,
}

/// Disjoint, class-stratified 50/50 split of a training set.
pub fn split_for_bilevel(train: &Split, seed: u64) -> BilevelSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[200]));
    let classes = train.y.iter().copied().max().map_or(0, |m| m + 1);
    let mut order = Vec::with_capacity(train.len());
    for c in 0..classes {
        let mut rows: Vec<usize> = (0..train.len()).filter(|&r| train.y[r] == c).collect();
        rows.shuffle(&mut rng);
        order.extend(rows);
    }
    let mut dropped = None;
    if order.len() % 2 == 1 {
        let r = order.pop().expect("odd length is non-zero");
        dropped = Some(train.ids[r]);
        eprintln!(
            "split_for_bilevel: odd training size {}, dropping sample id {}",
            train.len(),
            train.ids[r]
        );
    }
    let (mut w, mut a) = (Vec::new(), Vec::new());
    for (k, r) in order.into_iter().enumerate() {
        if k % 2 == 0 {
            w.push(r);
        } else {
            a.push(r);
        }
    }
    w.sort_unstable();
    a.sort_unstable();
    BilevelSplit {
        weights: train.subset(&w),
        alpha: train.subset(&a),
        dropped,
    }
}

const CACHE_MAGIC: &[u8; 8] = b"DLTASK01";

/// Writes the three splits in the cache format:
///
/// ```text
/// magic "DLTASK01" | fingerprint (64 ASCII hex bytes) | u64 split count (3)
/// per split (train, val, test):
///   u64 rows | u64 cols | u64 classes
///   rows*cols f64 (row-major) | rows u64 labels | rows u64 ids
/// ```
///
/// All integers and floats are little-endian.
pub fn write_cache(task: &Task, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(CACHE_MAGIC)?;
    put(task.fingerprint().as_bytes())?;
    put(&3u64.to_le_bytes())?;
    for split in [&task.train, &task.val, &task.test] {
        put(&(split.len() as u64).to_le_bytes())?;
        put(&(split.input_dim() as u64).to_le_bytes())?;
        put(&(task.spec.classes as u64).to_le_bytes())?;
        for v in split.x.data() {
            put(&v.to_le_bytes())?;
        }
        for &y in &split.y {
            put(&(y as u64).to_le_bytes())?;
        }
        for &id in &split.ids {
            put(&(id as u64).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a cache file written for `spec`; the embedded fingerprint must match.
pub fn read_cache(spec: &DatasetSpec, path: &Path) -> Result<Task> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CACHE_MAGIC {
        return Err(bad("not a task cache file"));
    }
    let mut fp = [0u8; 64];
    r.read_exact(&mut fp).map_err(|e| Error::io(path, e))?;
    if fp != spec.fingerprint().as_bytes() {
        return Err(bad("fingerprint does not match the dataset spec"));
    }
    let mut u64_buf = [0u8; 8];
    let mut next_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        r.read_exact(&mut u64_buf).map_err(|e| Error::io(path, e))?;
        Ok(u64::from_le_bytes(u64_buf))
    };
    if next_u64(&mut r)? != 3 {
        return Err(bad("expected three splits"));
    }
    let mut splits = Vec::with_capacity(3);
    for _ in 0..3 {
        let rows = next_u64(&mut r)? as usize;
        let cols = next_u64(&mut r)? as usize;
        let _classes = next_u64(&mut r)?;
        let mut x = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            x.push(f64::from_bits(next_u64(&mut r)?));
        }
        let mut y = Vec::with_capacity(rows);
        for _ in 0..rows {
            y.push(next_u64(&mut r)? as usize);
        }
        let mut ids = Vec::with_capacity(rows);
        for _ in 0..rows {
            ids.push(next_u64(&mut r)? as usize);
        }
        splits.push(Split {
            x: Tensor::matrix(rows, cols, x)?,
            y,
            ids,
        });
    }
    let mut it = splits.into_iter();
    Ok(Task {
        spec: spec.clone(),
        teacher: Teacher::build(spec),
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

/// Loads `dir/<fingerprint>.bin` when present, otherwise generates and stores it.
pub fn load_or_generate(spec: &DatasetSpec, dir: &Path) -> Result<Task> {
    let path = dir.join(format!("{}.bin", spec.fingerprint()));
    if path.exists() {
        return read_cache(spec, &path);
    }
    let task = generate(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_cache(&task, &path)?;
    Ok(task)
}

/// Validation accuracy of softmax regression on the raw inputs, trained
/// with plain minibatch SGD. A yardstick for how linear a task is.
pub fn linear_probe_accuracy(task: &Task, epochs: usize, lr: f64, seed: u64) -> Result<f64> {
    let (d, c) = (task.spec.input_dim, task.spec.classes);
    let mut w = Tensor::zeros(&[c, d]);
    let mut b = Tensor::zeros(&[c]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(64) {
            let (x, y) = task.train.batch(chunk);
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let wv = g.param(w.clone())?;
            let bv = g.param(b.clone())?;
            let z = g.linear(xv, wv)?;
            let z = g.add_bias(z, bv)?;
            let l = g.cross_entropy(z, &one_hot(&y, c))?;
            let grads = g.backward(l)?;
            w.axpy(-lr, grads.get(wv).expect("param"));
            b.axpy(-lr, grads.get(bv).expect("param"));
        }
    }
    let mut correct = 0;
    for (r, &y) in task.val.y.iter().enumerate() {
        let xr = task.val.x.row(r);
        let scores: Vec<f64> = (0..c).map(|k| dot(w.row(k), xr) + b.data()[k]).collect();
        correct += usize::from(crate::space::argmax(&scores) == y);
    }
    Ok(correct as f64 / task.val.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(kind: TaskKind) -> DatasetSpec {
        DatasetSpec {
            kind,
            n_train: 101,
            n_val: 30,
            n_test: 30,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let s = small(TaskKind::LearnableRequired);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let other = DatasetSpec { seed: 1, ..s.clone() };
        assert_ne!(generate(&s).unwrap().train.x, generate(&other).unwrap().train.x);
    }

    #[test]
    fn splits_disjoint_and_balanced() {
        for kind in [
            TaskKind::LearnableRequired,
            TaskKind::SkipFriendly,
            TaskKind::GaussianClusters,
        ] {
            let t = generate(&small(kind)).unwrap();
            let mut seen = HashSet::new();
            for s in [&t.train, &t.val, &t.test] {
                for &id in &s.ids {
                    assert!(seen.insert(id), "id {id} in two splits");
                }
                let counts = s.class_counts(4);
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "{kind:?} {counts:?}");
            }
            assert_eq!(t.train.len(), 101);
        }
    }

    #[test]
    fn teacher_is_even_in_input_without_linear_share() {
        let spec = DatasetSpec {
            linear_share: 0.0,
            ..DatasetSpec::default()
        };
        let t = Teacher::build(&spec);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(t.label(&x), t.label(&neg));
    }

    #[test]
    fn bilevel_split_halves() {
        let t = generate(&DatasetSpec {
            n_train: 100,
            ..small(TaskKind::SkipFriendly)
        })
        .unwrap();
        let s = split_for_bilevel(&t.train, 7);
        assert_eq!((s.weights.len(), s.alpha.len()), (50, 50));
        assert!(s.dropped.is_none());
        let w: HashSet<_> = s.weights.ids.iter().collect();
        assert!(s.alpha.ids.iter().all(|id| !w.contains(id)));
        let mut union: Vec<_> = s.weights.ids.iter().chain(&s.alpha.ids).copied().collect();
        union.sort_unstable();
        let mut orig = t.train.ids.clone();
        orig.sort_unstable();
        assert_eq!(union, orig);
    }

    #[test]
    fn bilevel_split_drops_one_on_odd() {
        let t = generate(&small(TaskKind::SkipFriendly)).unwrap();
        let s = split_for_bilevel(&t.train, 7);
        assert_eq!(s.weights.len() + s.alpha.len(), 100);
        let dropped = s.dropped.unwrap();
        assert!(t.train.ids.contains(&dropped));
        assert!(!s.weights.ids.contains(&dropped) && !s.alpha.ids.contains(&dropped));
    }

    #[test]
    fn cache_round_trip() {
        let spec = small(TaskKind::LearnableRequired);
        let dir = tempfile::tempdir().unwrap();
        let a = load_or_generate(&spec, dir.path()).unwrap();
        let b = load_or_generate(&spec, dir.path()).unwrap();
        assert_eq!(a, b);
        let other = DatasetSpec { seed: 9, ..spec };
        let path = dir.path().join(format!("{}.bin", a.fingerprint()));
        assert!(read_cache(&other, &path).is_err());
    }
}
