//! Candidate operations that may sit on a cell edge.
//!
//! All operations map a `[B, width]` feature matrix to another `[B, width]`
//! matrix. Only the two linear analogs carry weights.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-width of the feature window used by [`OpKind::AvgPool`].
pub const AVG_POOL_RADIUS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum OpKind {
    Zero,
    Skip,
    /// Feature-mixing linear map, `W x`.
    Linear1,
    /// `W₂ relu(W₁ x)`.
    Linear3,
    /// Fixed sliding-window average over neighbouring features.
    AvgPool,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Zero,
        OpKind::Skip,
        OpKind::Linear1,
        OpKind::Linear3,
        OpKind::AvgPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "none",
            OpKind::Skip => "skip_connect",
            OpKind::Linear1 => "nor_conv_1x1",
            OpKind::Linear3 => "nor_conv_3x3",
            OpKind::AvgPool => "avg_pool_3x3",
        }
    }

    pub fn is_learnable(self) -> bool {
        matches!(self, OpKind::Linear1 | OpKind::Linear3)
    }

    /// Shapes of the weight tensors for a given feature width.
    pub fn weight_shapes(self, width: usize) -> Vec<[usize; 2]> {
        match self {
            OpKind::Linear1 => vec![[width, width]],
            OpKind::Linear3 => vec![[width, width], [width, width]],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown operation `{s}`")))
    }
}

impl From<OpKind> for String {
    fn from(k: OpKind) -> String {
        k.name().to_string()
    }
}

impl TryFrom<String> for OpKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Uniform `[-√(3/fan_in), √(3/fan_in)]` matrix (unit output variance for
/// unit-variance inputs), deterministic in `seed`.
pub fn uniform_init(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (3.0 / cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("rows * cols values")
}

/// One operation instance with its own weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateOp {
    pub kind: OpKind,
    pub width: usize,
    pub weights: Vec<Tensor>,
}

impl CandidateOp {
    /// An operation with weights zeroed; learnable kinds need [`init_weights`](Self::init_weights).
    pub fn new(kind: OpKind, width: usize) -> Self {
        let weights = kind
            .weight_shapes(width)
            .into_iter()
            .map(|s| Tensor::zeros(&s))
            .collect();
        CandidateOp {
            kind,
            width,
            weights,
        }
    }

    pub fn learnable(&self) -> bool {
        self.kind.is_learnable()
    }

    pub fn init_weights(mut self, seed: u64) -> Result<Self> {
        if !self.learnable() {
            return Err(Error::invalid(format!(
                "{} has no weights to initialize",
                self.kind
            )));
        }
        self.weights = self
            .kind
            .weight_shapes(self.width)
            .into_iter()
            .enumerate()
            .map(|(i, [r, c])| uniform_init(r, c, seed.wrapping_mul(31).wrapping_add(i as u64)))
            .collect();
        Ok(self)
    }

    /// Records the operation on `g`. `weights` are the graph handles of
    /// `self.weights`, in order.
    pub fn record(&self, g: &mut Graph, x: Var, weights: &[Var]) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::Shape {
                op: "candidate op",
                left: shape,
                right: vec![self.width],
            });
        }
        if weights.len() != self.weights.len() {
            return Err(Error::invalid(format!(
                "{} expects {} weight handles, got {}",
                self.kind,
                self.weights.len(),
                weights.len()
            )));
        }
        match self.kind {
            OpKind::Zero => g.constant(Tensor::zeros(&shape)),
            OpKind::Skip => Ok(x),
            OpKind::Linear1 => g.linear(x, weights[0]),
            OpKind::Linear3 => {
                let h = g.linear(x, weights[0])?;
                let h = g.relu(h)?;
                g.linear(h, weights[1])
            }
            OpKind::AvgPool => g.window_mean(x, AVG_POOL_RADIUS),
        }
    }

    /// Evaluates the operation on a fresh tape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let ws = self
            .weights
            .iter()
            .map(|w| g.constant(w.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = self.record(&mut g, xv, &ws)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn sample(b: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * w).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::matrix(b, w, data).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert!("conv_5x5".parse::<OpKind>().is_err());
    }

    #[test]
    fn learnable_set() {
        let learnable: Vec<_> = OpKind::ALL.into_iter().filter(|k| k.is_learnable()).collect();
        assert_eq!(learnable, vec![OpKind::Linear1, OpKind::Linear3]);
        assert!(CandidateOp::new(OpKind::AvgPool, 4).weights.is_empty());
    }

    #[test]
    fn zero_and_skip() {
        let x = sample(3, 4, 1);
        let z = CandidateOp::new(OpKind::Zero, 4).apply(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let s = CandidateOp::new(OpKind::Skip, 4).apply(&x).unwrap();
        assert_eq!(s, x);
    }

    #[test]
    fn avgpool_covering_window() {
        let x = Tensor::matrix(1, 3, vec![2.0, 4.0, 6.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let y = g.window_mean(xv, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn width_mismatch_fails() {
        let x = sample(2, 5, 0);
        let op = CandidateOp::new(OpKind::Linear1, 4).init_weights(0).unwrap();
        assert!(op.apply(&x).is_err());
        assert!(CandidateOp::new(OpKind::Skip, 4).apply(&x).is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = CandidateOp::new(OpKind::Linear3, 8).init_weights(0).unwrap();
        let b = CandidateOp::new(OpKind::Linear3, 8).init_weights(0).unwrap();
        let c = CandidateOp::new(OpKind::Linear3, 8).init_weights(1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        let bound = (3.0 / 8f64).sqrt();
        assert!(a.weights[0].data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_on_non_learnable_fails() {
        for k in [OpKind::Zero, OpKind::Skip, OpKind::AvgPool] {
            assert!(CandidateOp::new(k, 4).init_weights(3).is_err());
        }
    }

    #[test]
    fn zero_and_skip_adjoints() {
        let x = sample(2, 3, 4);
        let mut g = Graph::new();
        let xv = g.param(x.clone()).unwrap();
        let z = CandidateOp::new(OpKind::Zero, 3).record(&mut g, xv, &[]).unwrap();
        let s = CandidateOp::new(OpKind::Skip, 3).record(&mut g, xv, &[]).unwrap();
        let zs = g.sum(z).unwrap();
        let ss = g.sum(s).unwrap();
        let gz = g.backward(zs).unwrap();
        assert!(gz.get(xv).is_none());
        let gs = g.backward(ss).unwrap();
        assert!(gs.get(xv).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear1_output_variance_near_input_variance() {
        let width = 16;
        let x = sample(1000, width, 99);
        let mut total = 0.0;
        let inits = 50;
        for seed in 0..inits {
            let op = CandidateOp::new(OpKind::Linear1, width).init_weights(seed).unwrap();
            let y = op.apply(&x).unwrap();
            total += y.norm_sq() / y.len() as f64;
        }
        let ratio = total / inits as f64;
        assert!((ratio - 1.0).abs() < 0.2, "ratio {ratio}");
    }
}
