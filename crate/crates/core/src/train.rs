//! Plain minibatch SGD on a labelled tensor set, shared by teacher training
//! and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, step_seed, AugPolicy};
use crate::autodiff::{Tape, TapeMode};
use crate::error::{Error, Result};
use crate::nn::{accuracy, forward, forward_logits_chunked, soft_ce, ModelArch, ParamVector};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub augment: AugPolicy,
}

/// Loss and flat gradient of soft cross-entropy on one (augmented) batch.
pub fn loss_and_grad<F: Element>(
    arch: &ModelArch,
    params: &ParamVector<F>,
    x: &Tensor<F>,
    targets: &Tensor<F>,
    policy: &AugPolicy,
    seed: u64,
) -> Result<(f64, Vec<F>)> {
    let mut tape = Tape::new(TapeMode::Plain);
    let leaves = params.leaves(&mut tape)?;
    let xv = tape.leaf(x.clone())?;
    let xa = if policy.is_empty() { xv } else { augment(&mut tape, xv, policy, seed)? };
    let logits = forward(arch, &mut tape, &leaves, xa)?;
    let t = tape.leaf(targets.clone())?;
    let loss = soft_ce(&mut tape, logits, t)?;
    let value = tape.value(loss)?.data()[0].as_f64();
    let grads = tape.backward(loss, &leaves)?;
    let mut flat = Vec::with_capacity(params.len());
    for g in &grads {
        flat.extend_from_slice(g.data());
    }
    Ok((value, flat))
}

/// Heavy-ball SGD: `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Debug, Clone)]
pub struct Sgd<F: Element> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<F>,
}

impl<F: Element> Sgd<F> {
    pub fn new(len: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![F::zero(); len],
        }
    }

    pub fn step(&mut self, params: &mut [F], grad: &[F]) {
        let (mu, lr) = (F::of(self.momentum), F::of(self.lr));
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = mu * *v + g;
            *p = *p - lr * *v;
        }
    }
}

/// Row indices for each minibatch of one shuffled epoch.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn divergence(e: Error, context: &'static str, index: usize) -> Error {
    if e.is_numeric_fault() {
        Error::Divergence { context, index }
    } else {
        e
    }
}

/// One SGD step on rows `idx`. Non-finite loss or gradient becomes a
/// divergence error tagged with `(context, index)`.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step<F: Element>(
    arch: &ModelArch,
    params: &mut ParamVector<F>,
    opt: &mut Sgd<F>,
    x: &Tensor<F>,
    targets: &Tensor<F>,
    idx: &[usize],
    policy: &AugPolicy,
    seed: u64,
    context: &'static str,
    index: usize,
) -> Result<f64> {
    let xb = x.gather_rows(idx)?;
    let tb = targets.gather_rows(idx)?;
    let (loss, grad) =
        loss_and_grad(arch, params, &xb, &tb, policy, seed).map_err(|e| divergence(e, context, index))?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { context, index });
    }
    opt.step(params.as_mut_slice(), &grad);
    Ok(loss)
}

/// Trains for `steps` minibatch steps, cycling reshuffled epochs.
pub fn fit_steps<F: Element>(
    arch: &ModelArch,
    params: &mut ParamVector<F>,
    x: &Tensor<F>,
    targets: &Tensor<F>,
    steps: usize,
    cfg: &FitConfig,
    seed: u64,
) -> Result<f64> {
    let n = x.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(params.len(), cfg.lr, cfg.momentum);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut loss = f64::NAN;
    for step in 0..steps {
        if queue.is_empty() {
            queue = epoch_batches(n, cfg.batch_size, &mut rng);
            queue.reverse();
        }
        let idx = queue.pop().expect("refilled above");
        let s = step_seed(seed, 0, step as u64);
        loss = sgd_step(arch, params, &mut opt, x, targets, &idx, &cfg.augment, s, "step", step)?;
    }
    Ok(loss)
}

/// Top-1 accuracy over a labelled set.
pub fn test_accuracy<F: Element>(
    arch: &ModelArch,
    params: &ParamVector<F>,
    images: &Tensor<f32>,
    labels: &[usize],
) -> Result<f64> {
    let logits = forward_logits_chunked(arch, params, &images.cast::<F>(), 256)?;
    accuracy(&logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, one_hot};

    #[test]
    fn momentum_update_matches_hand_computation() {
        let mut p = vec![1.0f64, -2.0];
        let mut opt = Sgd::new(2, 0.1, 0.9);
        opt.step(&mut p, &[1.0, 0.5]);
        assert_eq!(p, vec![0.9, -2.05]);
        opt.step(&mut p, &[1.0, 0.5]);
        // v = 0.9·1 + 1 = 1.9, v = 0.9·0.5 + 0.5 = 0.95
        assert!((p[0] - (0.9 - 0.19)).abs() < 1e-15);
        assert!((p[1] - (-2.05 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn epoch_batches_cover_every_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fitting_lowers_loss() {
        let arch = ModelArch::mlp(1, 8, 2, [1, 2, 2]);
        let x = Tensor::<f32>::new(
            vec![4, 1, 2, 2],
            vec![1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.],
        )
        .unwrap();
        let t = one_hot::<f32>(&[0, 1, 0, 1], 2).unwrap();
        let mut p = init_params::<f32>(&arch, 1).unwrap();
        let cfg = FitConfig {
            lr: 0.5,
            momentum: 0.0,
            batch_size: 4,
            augment: AugPolicy::none(),
        };
        let before = loss_and_grad(&arch, &p, &x, &t, &AugPolicy::none(), 0).unwrap().0;
        fit_steps(&arch, &mut p, &x, &t, 50, &cfg, 3).unwrap();
        let after = loss_and_grad(&arch, &p, &x, &t, &AugPolicy::none(), 0).unwrap().0;
        assert!(after < before * 0.5, "{before} -> {after}");
        assert_eq!(test_accuracy(&arch, &p, &x, &[0, 1, 0, 1]).unwrap(), 1.0);
    }
}
