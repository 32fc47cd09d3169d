use dartslab::data::{generate, linear_probe_accuracy, DatasetSpec, TaskKind};
use dartslab::ops::OpKind;
use dartslab::oracle::{train_weights, TrainBudget};
use dartslab::space::{
    discretize, Activation, AlphaSet, Architecture, CellSpec, NetConfig, Supernet, STANDARDIZE_EPS,
};
use dartslab::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::matrix(rows, cols, d).unwrap()
}

/// `x · wᵀ + b` by explicit loops.
fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (rows, inp) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let mut d = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut s = b.data()[o];
            for i in 0..inp {
                s += x.data()[r * inp + i] * w.data()[o * inp + i];
            }
            d[r * out + o] = s;
        }
    }
    Tensor::matrix(rows, out, d).unwrap()
}

fn standardize(x: &Tensor) -> Tensor {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut d = x.data().to_vec();
    for j in 0..cols {
        let mean = (0..rows).map(|r| d[r * cols + j]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (d[r * cols + j] - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            d[r * cols + j] = (d[r * cols + j] - mean) / (var + STANDARDIZE_EPS).sqrt();
        }
    }
    Tensor::matrix(rows, cols, d).unwrap()
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), d).unwrap()
}

/// Micro cell with skip on all three edges, composed by hand.
fn skip_reference(net: &Supernet, x: &Tensor) -> Tensor {
    let n0 = affine(x, &net.stem_w, &net.stem_b);
    let n1 = standardize(&n0);
    let n2 = add(&standardize(&n0), &standardize(&n1));
    affine(&n2, &net.head_w, &net.head_b)
}

fn forced(net: &mut Supernet, op: OpKind) {
    let spec = net.config.spec.clone();
    let k = spec.op_index(op).unwrap();
    let a = net.alphas_mut().unwrap();
    for (i, v) in a.alpha.data_mut().iter_mut().enumerate() {
        *v = if i % spec.num_ops() == k { 0.0 } else { -1e4 };
    }
}

fn logits(net: &Supernet, x: &Tensor) -> Tensor {
    let f = net.forward(x, None).unwrap();
    f.graph.value(f.logits).clone()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn equal_alpha_softmax_is_the_plain_mean() {
    let net = Supernet::with_alpha_init(NetConfig::micro(), Activation::Softmax, 0.7, 3).unwrap();
    let x = gauss(6, 16, 1);
    let f = net.forward(&x, None).unwrap();
    for tap in &f.taps {
        let outs: Vec<&Tensor> = tap.op_outputs.iter().map(|&v| f.graph.value(v)).collect();
        let k = outs.len() as f64;
        let mean: Vec<f64> = (0..outs[0].len())
            .map(|i| outs.iter().map(|t| t.data()[i]).sum::<f64>() / k)
            .collect();
        let got = f.graph.value(tap.output);
        for (a, b) in got.data().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn all_zero_network_outputs_the_head_bias() {
    let mut net = Supernet::new(NetConfig::micro(), Activation::Softmax, 4).unwrap();
    forced(&mut net, OpKind::Zero);
    net.head_b = Tensor::vector(vec![0.3, -1.0, 2.0, 0.5]);
    for seed in [1, 2] {
        let l = logits(&net, &gauss(5, 16, seed));
        for row in l.data().chunks(4) {
            assert_eq!(row, net.head_b.data());
        }
    }
}

#[test]
fn all_skip_supernet_matches_hand_composition() {
    let mut net = Supernet::new(NetConfig::micro(), Activation::Softmax, 5).unwrap();
    forced(&mut net, OpKind::Skip);
    net.stem_b = Tensor::vector((0..16).map(|i| 0.1 * i as f64).collect());
    let x = gauss(7, 16, 2);
    assert!(close(&logits(&net, &x), &skip_reference(&net, &x), 1e-12));
}

#[test]
fn all_skip_architecture_matches_hand_composition() {
    let arch = Architecture::new(vec![OpKind::Skip; 3]);
    let net = Supernet::instantiate(NetConfig::micro(), &arch, 6).unwrap();
    let x = gauss(7, 16, 3);
    assert!(close(&logits(&net, &x), &skip_reference(&net, &x), 1e-12));
}

#[test]
fn logits_are_bit_identical_across_runs() {
    let x = gauss(9, 16, 4);
    let a = Supernet::new(NetConfig::micro(), Activation::Softmax, 11).unwrap();
    let b = Supernet::new(NetConfig::micro(), Activation::Softmax, 11).unwrap();
    assert_eq!(logits(&a, &x), logits(&a, &x));
    assert_eq!(logits(&a, &x), logits(&b, &x));
}

#[test]
fn discretize_matches_an_independent_argmax() {
    let spec = CellSpec::nas201();
    for seed in 0..200 {
        let a = gauss(spec.num_edges(), spec.num_ops(), seed);
        let rows: Vec<Vec<f64>> = a.data().chunks(spec.num_ops()).map(<[f64]>::to_vec).collect();
        let expected: Vec<OpKind> = rows
            .iter()
            .map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                spec.ops[r.iter().position(|&v| v == m).unwrap()]
            })
            .collect();
        for act in [Activation::Softmax, Activation::Sigmoid] {
            let alphas = AlphaSet::from_rows(rows.clone(), act).unwrap();
            assert_eq!(discretize(&alphas, &spec).ops, expected);
        }
    }
}

#[test]
fn discretized_architecture_trains_like_the_hardened_supernet() {
    let task = generate(&DatasetSpec {
        n_train: 256,
        n_val: 64,
        n_test: 64,
        ..DatasetSpec::default()
    })
    .unwrap();
    let budget = TrainBudget {
        epochs: 3,
        ..TrainBudget::default()
    };
    for seed in 0..4 {
        let mut relaxed = Supernet::new(NetConfig::micro(), Activation::Softmax, seed).unwrap();
        let a = relaxed.alphas_mut().unwrap();
        *a = AlphaSet::from_rows(
            gauss(3, 3, 100 + seed).data().chunks(3).map(<[f64]>::to_vec).collect(),
            Activation::Softmax,
        )
        .unwrap();
        let arch = discretize(relaxed.alphas().unwrap(), &relaxed.config.spec);
        let spec = relaxed.config.spec.clone();
        let hard: Vec<Vec<f64>> = arch
            .ops
            .iter()
            .map(|&k| {
                let i = spec.op_index(k).unwrap();
                (0..3).map(|j| if j == i { 0.0 } else { -1e4 }).collect()
            })
            .collect();
        *relaxed.alphas_mut().unwrap() = AlphaSet::from_rows(hard, Activation::Softmax).unwrap();
        let mut discrete = Supernet::instantiate(NetConfig::micro(), &arch, seed).unwrap();
        let l_relaxed = train_weights(&mut relaxed, &task.train, &budget, seed).unwrap();
        let l_discrete = train_weights(&mut discrete, &task.train, &budget, seed).unwrap();
        assert!(
            (l_relaxed - l_discrete).abs() < 1e-6,
            "seed {seed}: {l_relaxed} vs {l_discrete}"
        );
    }
}

#[test]
fn skip_friendly_task_is_linearly_readable() {
    let task = generate(&DatasetSpec {
        kind: TaskKind::SkipFriendly,
        ..DatasetSpec::default()
    })
    .unwrap();
    let acc = linear_probe_accuracy(&task, 30, 0.1, 0).unwrap();
    assert!(acc >= 0.95, "probe accuracy {acc}");
}
