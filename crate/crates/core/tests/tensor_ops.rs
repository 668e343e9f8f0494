use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mner::tensor::{grad_check, Graph, Tensor, Var};
use mner::{Error, Result};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn matmul_by_identity() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
    let i = g.constant(Tensor::identity(2));
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c), &[1., 2., 3., 4.]);
}

#[test]
fn matmul_one_by_one() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(1, 1, vec![2.]).unwrap());
    let b = g.constant(Tensor::matrix(1, 1, vec![3.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[1, 1]);
    assert_eq!(g.value(c), &[6.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(5, 4, &mut rng), random(4, 3, &mut rng));
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0;
            for p in 0..4 {
                s += a.at(i, p) * b.at(p, j);
            }
            assert!((g.value(c)[i * 3 + j] - s).abs() <= 1e-12);
        }
    }
    assert!(matches!(g.matmul(av, av), Err(Error::Shape { .. })));
}

#[test]
fn matmul_is_associative() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let mut g = Graph::new();
        let a = g.constant(random(3, 4, &mut rng));
        let b = g.constant(random(4, 2, &mut rng));
        let c = g.constant(random(2, 5, &mut rng));
        let ab = g.matmul(a, b).unwrap();
        let left = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let right = g.matmul(a, bc).unwrap();
        for (x, y) in g.value(left).iter().zip(g.value(right)) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

fn softmax_of(values: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, values.len(), values.to_vec()).unwrap());
    let y = g.softmax(x, 1).unwrap();
    g.value(y).to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_of(&[0.0, 0.0]), vec![0.5, 0.5]);

    let big = softmax_of(&[1000.0, 0.0]);
    assert!(big.iter().all(|v| v.is_finite()));
    assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-300);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let y = softmax_of(&x);
    assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    let z: f64 = x.iter().map(|v| v.exp()).sum();
    for (yi, xi) in y.iter().zip(&x) {
        assert!((yi - xi.exp() / z).abs() <= 1e-12);
    }
    let shifted: Vec<f64> = x.iter().map(|v| v + 17.5).collect();
    for (a, b) in y.iter().zip(softmax_of(&shifted)) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn sigmoid_and_tanh_closed_forms() {
    let xs = [-5.0, -1.0, 0.0, 1.0, 5.0];
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(xs.to_vec()).unwrap());
    let s = g.sigmoid(x).unwrap();
    let t = g.tanh(x).unwrap();
    for (i, &v) in xs.iter().enumerate() {
        assert!((g.value(s)[i] - 1.0 / (1.0 + (-v).exp())).abs() <= 1e-12);
    }
    assert_eq!(g.value(s)[2], 0.5);
    assert_eq!(g.value(t)[2], 0.0);
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r), &[0.0, 0.0, 0.0, 1.0, 5.0]);
}

#[test]
fn binary_ops_reject_mismatched_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    assert!(matches!(g.mul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1., 2., 3.]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2., 4., 6.]);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1., 2., 3.]).unwrap());
    let c = g.constant(Tensor::scalar(4.0));
    let grads = g.backward(c).unwrap();
    assert_eq!(grads.get_or_zeros(&g, x), vec![0.0; 3]);
}

#[test]
fn backward_needs_a_scalar() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1., 2.]).unwrap());
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

fn mlp(g: &mut Graph<'_>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = g.constant(random(4, 6, &mut rng));
    let b1 = g.constant(random(1, 6, &mut rng));
    let w2 = g.constant(random(6, 2, &mut rng));
    let b2 = g.constant(random(1, 2, &mut rng));
    let h = g.linear(x, w1, b1)?;
    let h = g.tanh(h)?;
    let y = g.linear(h, w2, b2)?;
    let sq = g.mul(y, y)?;
    g.sum(sq)
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(3, 4, &mut rng);
        let err = grad_check(|g, v| mlp(g, v, seed), &x, 1e-5).unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

/// Mean cross-entropy of row-wise softmax against fixed targets.
fn softmax_ce(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let cols = g.shape(x)[1];
    let p = g.softmax(x, 1)?;
    let lp = g.ln(p)?;
    let mut onehot = vec![0.0; rows * cols];
    for r in 0..rows {
        onehot[r * cols + (r * 3) % cols] = -1.0 / rows as f64;
    }
    let t = g.constant(Tensor::matrix(rows, cols, onehot)?);
    let picked = g.mul(lp, t)?;
    g.sum(picked)
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let x = random(rng.gen_range(1..=8), rng.gen_range(2..=8), &mut rng);
        assert!(grad_check(|g, v| g.sum(v), &x, 1e-3).unwrap() <= 1e-10);
        assert!(grad_check(softmax_ce, &x, 1e-6).unwrap() <= 1e-4);
    }
    let x = random(2, 2, &mut rng);
    assert!(matches!(grad_check(|g, v| g.sum(v), &x, 0.5), Err(Error::Contract(_))));
}

#[test]
fn grad_check_catches_a_wrong_backward() {
    // the forward computes x², but the recorded graph differentiates x·c with c = x detached
    let wrong = |g: &mut Graph<'_>, x: Var| -> Result<Var> {
        let c = g.constant(g.tensor(x));
        let y = g.mul(x, c)?;
        g.sum(y)
    };
    let x = Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap();
    assert!(grad_check(wrong, &x, 1e-6).unwrap() > 1e-2);
}
