//! Reverse-mode gradients of randomly composed graphs against central
//! finite differences, first and second order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tesla_core::{Tape, TapeMode, Tensor, Var};

#[derive(Debug, Clone)]
enum Step {
    Matmul(usize),
    AddBias(usize),
    MulLeaf(usize),
    Relu,
    Exp,
    SoftPlusLike,
    Softmax,
    LogSoftmax,
    Transpose,
}

#[derive(Debug, Clone)]
struct Graph {
    conv: Option<(usize, usize)>,
    steps: Vec<Step>,
    leaves: Vec<Tensor<f64>>,
    probe: Tensor<f64>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn generate(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut leaves = Vec::new();
    let mut conv = None;
    let mut shape;
    if rng.random_bool(0.4) {
        let (n, cin, cout, h, w) = (2, rng.random_range(1..3), rng.random_range(1..3), 4, 4);
        leaves.push(normal(&mut rng, &[n, cin, h, w], 1.0));
        leaves.push(normal(&mut rng, &[cout, cin, 3, 3], 0.5));
        let (dy, dx) = (rng.random_range(0..2), rng.random_range(0..2));
        conv = Some((dy, dx));
        shape = vec![n, cout * 4];
    } else {
        shape = vec![rng.random_range(1..4), rng.random_range(1..5)];
        leaves.push(normal(&mut rng, &shape, 1.0));
    }
    let mut steps = Vec::new();
    for _ in 0..rng.random_range(1..6) {
        let step = match rng.random_range(0..9) {
            0 => {
                let out = rng.random_range(1..5);
                leaves.push(normal(&mut rng, &[shape[1], out], 0.7));
                shape[1] = out;
                Step::Matmul(leaves.len() - 1)
            }
            1 => {
                leaves.push(normal(&mut rng, &[1, shape[1]], 0.5));
                Step::AddBias(leaves.len() - 1)
            }
            2 => {
                leaves.push(normal(&mut rng, &shape, 1.0));
                Step::MulLeaf(leaves.len() - 1)
            }
            3 => Step::Relu,
            4 => Step::Exp,
            5 => Step::SoftPlusLike,
            6 => Step::Softmax,
            7 => Step::LogSoftmax,
            _ => {
                shape.swap(0, 1);
                Step::Transpose
            }
        };
        steps.push(step);
    }
    let probe = normal(&mut rng, &shape, 1.0);
    Graph { conv, steps, leaves, probe }
}

fn build(g: &Graph, tape: &mut Tape<f64>, leaves: &[Tensor<f64>]) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let mut h = vars[0];
    if let Some((dy, dx)) = g.conv {
        h = tape.conv2d(h, vars[1]).unwrap();
        h = tape.shift2d(h, dy as isize, dx as isize).unwrap();
        h = tape.flip_w(h).unwrap();
        h = tape.avgpool2(h).unwrap();
        let s = tape.shape(h).unwrap().to_vec();
        h = tape.reshape(h, &[s[0], s[1] * s[2] * s[3]]).unwrap();
    }
    for step in &g.steps {
        h = match *step {
            Step::Matmul(i) => tape.matmul(h, vars[i]).unwrap(),
            Step::AddBias(i) => {
                let s = tape.shape(h).unwrap().to_vec();
                let b = tape.broadcast_to(vars[i], &s).unwrap();
                tape.add(h, b).unwrap()
            }
            Step::MulLeaf(i) => tape.mul(h, vars[i]).unwrap(),
            Step::Relu => tape.relu(h).unwrap(),
            Step::Exp => {
                let s = tape.scale(h, 0.3).unwrap();
                tape.exp(s).unwrap()
            }
            Step::SoftPlusLike => {
                let sq = tape.mul(h, h).unwrap();
                tape.pow_offset(sq, 1.0, 0.5).unwrap()
            }
            Step::Softmax => tape.softmax_rows(h).unwrap(),
            Step::LogSoftmax => tape.log_softmax_rows(h).unwrap(),
            Step::Transpose => tape.transpose(h).unwrap(),
        };
    }
    let p = tape.leaf(g.probe.clone()).unwrap();
    (tape.dot(h, p).unwrap(), vars)
}

fn value(g: &Graph, leaves: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new(TapeMode::Plain);
    let (loss, _) = build(g, &mut tape, leaves);
    tape.value(loss).unwrap().data()[0]
}

fn gradients(g: &Graph, leaves: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new(TapeMode::Plain);
    let (loss, vars) = build(g, &mut tape, leaves);
    tape.backward(loss, &vars).unwrap()
}

fn perturbed(leaves: &[Tensor<f64>], leaf: usize, k: usize, eps: f64) -> Vec<Tensor<f64>> {
    let mut out = leaves.to_vec();
    out[leaf].data_mut()[k] += eps;
    out
}

fn near(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
}

/// Relu kinks make finite differences meaningless within `eps` of zero.
fn has_kink_near(g: &Graph, leaves: &[Tensor<f64>], eps: f64) -> bool {
    if !g.steps.iter().any(|s| matches!(s, Step::Relu)) {
        return false;
    }
    let base = value(g, leaves);
    leaves.iter().enumerate().any(|(i, t)| {
        (0..t.numel()).any(|k| {
            let up = value(g, &perturbed(leaves, i, k, eps)) - base;
            let down = base - value(g, &perturbed(leaves, i, k, -eps));
            (up - down).abs() > 1e-6 * (up.abs() + down.abs()).max(1e-9)
        })
    })
}

#[test]
fn first_order_matches_central_differences() {
    let eps = 1e-5;
    let mut checked = 0;
    for seed in 0..160u64 {
        let g = generate(seed);
        if has_kink_near(&g, &g.leaves, 1e-3) {
            continue;
        }
        let grads = gradients(&g, &g.leaves);
        for (i, t) in g.leaves.iter().enumerate() {
            for k in 0..t.numel() {
                let fd = (value(&g, &perturbed(&g.leaves, i, k, eps)) - value(&g, &perturbed(&g.leaves, i, k, -eps)))
                    / (2.0 * eps);
                let an = grads[i].data()[k];
                assert!(near(an, fd, 1e-4), "seed {seed} leaf {i}[{k}]: {an} vs {fd} ({g:?})");
            }
        }
        checked += 1;
    }
    assert!(checked >= 100, "only {checked} kink-free graphs");
}

#[test]
fn gradient_graph_gives_hessian_vector_products() {
    let eps = 1e-5;
    let mut checked = 0;
    for seed in 1000..1060u64 {
        let g = generate(seed);
        if has_kink_near(&g, &g.leaves, 1e-3) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs: Vec<Tensor<f64>> = g.leaves.iter().map(|t| normal(&mut rng, t.shape(), 1.0)).collect();
        let mut tape = Tape::new(TapeMode::GradientAsGraph);
        let (loss, vars) = build(&g, &mut tape, &g.leaves);
        let grads = tape.gradient_as_graph(loss, &vars).unwrap();
        let mut total = None;
        for (gv, d) in grads.iter().zip(&dirs) {
            let dv = tape.leaf(d.clone()).unwrap();
            let term = tape.dot(*gv, dv).unwrap();
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term).unwrap(),
            });
        }
        let hvp = tape.backward(total.unwrap(), &vars).unwrap();
        let shifted = |s: f64| -> Vec<Tensor<f64>> {
            g.leaves
                .iter()
                .zip(&dirs)
                .map(|(t, d)| {
                    let mut t = t.clone();
                    t.axpy(s, d).unwrap();
                    t
                })
                .collect()
        };
        let (up, down) = (gradients(&g, &shifted(eps)), gradients(&g, &shifted(-eps)));
        for i in 0..g.leaves.len() {
            for k in 0..g.leaves[i].numel() {
                let fd = (up[i].data()[k] - down[i].data()[k]) / (2.0 * eps);
                let an = hvp[i].data()[k];
                assert!(near(an, fd, 1e-4), "seed {seed} leaf {i}[{k}]: {an} vs {fd}");
            }
        }
        checked += 1;
    }
    assert!(checked >= 30, "only {checked} kink-free graphs");
}
