//! Gradient of the normalized trajectory-matching loss with respect to the
//! synthetic images, computed one batch at a time, plus two reference
//! implementations that keep the whole computation on a single tape.

use std::hash::{DefaultHasher, Hasher};

use serde::{Deserialize, Serialize};

use crate::augment::{augment, step_seed, AugPolicy};
use crate::autodiff::{GraphStats, Tape, TapeMode, Var};
use crate::error::{Error, Result};
use crate::nn::{forward, soft_ce, ModelArch, ParamVector};
use crate::tensor::{Element, Tensor};
use crate::trajectory::DEGENERATE_EPS;

use super::BatchPlan;

/// Relative tolerance of the runtime check that the expanded loss
/// reconstructs the directly measured endpoint distance.
pub const DECOMPOSITION_TOL: f64 = 1e-5;

/// Everything one matching iteration needs.
#[derive(Debug, Clone, Copy)]
pub struct MatchProblem<'a, F: Element> {
    pub arch: &'a ModelArch,
    /// `θ*_t`
    pub start: &'a ParamVector<F>,
    /// `θ*_{t+M}`
    pub target: &'a ParamVector<F>,
    /// `[n, c, h, w]`
    pub images: &'a Tensor<F>,
    /// `[n, classes]` probabilities, or logits when `labels_are_logits`.
    pub labels: &'a Tensor<F>,
    pub labels_are_logits: bool,
    pub plan: &'a BatchPlan,
    pub beta: f64,
    pub policy: &'a AugPolicy,
    pub seed: u64,
    pub iteration: u64,
}

impl<F: Element> MatchProblem<'_, F> {
    pub fn steps(&self) -> usize {
        self.plan.steps
    }

    fn check(&self) -> Result<()> {
        let n = self.images.shape()[0];
        if self.labels.shape() != [n, self.arch.classes] {
            return Err(Error::Shape {
                context: "synthetic labels",
                expected: vec![n, self.arch.classes],
                got: self.labels.shape().to_vec(),
            });
        }
        if self.plan.n != n {
            return Err(Error::Config(format!("batch plan built for {} images, have {n}", self.plan.n)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("student learning rate {} must be finite and non-negative", self.beta)));
        }
        for p in [self.start, self.target] {
            if p.len() != self.arch.param_count() {
                return Err(Error::ArchMismatch {
                    expected: format!("{} parameters", self.arch.param_count()),
                    found: format!("{} parameters", p.len()),
                });
            }
        }
        Ok(())
    }

    fn step_seed(&self, i: usize) -> u64 {
        step_seed(self.seed, self.iteration, i as u64)
    }

    /// `C = ‖θ*_t − θ*_{t+M}‖²` and `θ*_{t+M} − θ*_t`, both in f64.
    fn displacement(&self) -> (f64, Vec<f64>) {
        let d: Vec<f64> = self
            .target
            .as_slice()
            .iter()
            .zip(self.start.as_slice())
            .map(|(&b, &a)| b.as_f64() - a.as_f64())
            .collect();
        (d.iter().map(|v| v * v).sum(), d)
    }
}

/// The expanded loss `C + linear + quadratic` with its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossDecomposition {
    pub constant: f64,
    pub linear: f64,
    pub quadratic: f64,
    pub denominator: f64,
    /// `‖θ̂_{t+T} − θ*_{t+M}‖²` measured on the unrolled student.
    pub direct: f64,
}

impl LossDecomposition {
    pub fn total(&self) -> f64 {
        self.constant + self.linear + self.quadratic
    }

    pub fn relative_error(&self) -> f64 {
        let scale = self.direct.abs().max(f64::MIN_POSITIVE);
        (self.total() - self.direct).abs() / scale
    }

    pub fn normalized_loss(&self) -> f64 {
        self.total() / self.denominator
    }
}

/// Result of the first pass over the batches.
#[derive(Debug, Clone)]
pub struct Unroll<F: Element> {
    /// `θ̂_{t+T}`
    pub final_params: ParamVector<F>,
    /// `G = Σ g_i`, accumulated in f64.
    pub g_sum: Vec<f64>,
    /// Bit-level hash of each `g_i`.
    pub checksums: Vec<u64>,
    pub step_losses: Vec<f64>,
    pub stats: GraphStats,
}

/// Result of the second pass.
#[derive(Debug, Clone)]
pub struct TeslaGrad<F: Element> {
    /// `∂L/∂X̃`, one row per synthetic image.
    pub images: Tensor<F>,
    /// `∂L/∂logits` when the labels are learned.
    pub labels: Option<Tensor<F>>,
    /// First-order `∂L/∂β`.
    pub beta: f64,
    pub loss: f64,
    pub decomposition: LossDecomposition,
    /// Peak live graph during the second pass.
    pub stats: GraphStats,
    pub replay_checksums: Vec<u64>,
}

/// Reference gradients and loss from one of the oracles.
#[derive(Debug, Clone)]
pub struct OracleGrad<F: Element> {
    pub images: Tensor<F>,
    pub labels: Option<Tensor<F>>,
    pub loss: f64,
    pub stats: GraphStats,
}

pub fn checksum_grads<F: Element>(values: &[F]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in values {
        h.write_u64(v.bits());
    }
    h.finish()
}

struct StepGraph {
    params: Vec<Var>,
    batch: Var,
    labels: Option<Var>,
    loss: Var,
}

/// Records batch `i`'s loss at `theta` with the batch and its labels as
/// fresh leaves.
fn record_step<F: Element>(
    tape: &mut Tape<F>,
    p: &MatchProblem<F>,
    theta: &ParamVector<F>,
    i: usize,
) -> Result<StepGraph> {
    let params = theta.leaves(tape)?;
    let idx = p.plan.step(i);
    let batch = tape.leaf(p.images.gather_rows(idx)?)?;
    let raw = p.labels.gather_rows(idx)?;
    let (labels, targets) = if p.labels_are_logits {
        let l = tape.leaf(raw)?;
        (Some(l), tape.softmax_rows(l)?)
    } else {
        (None, tape.leaf(raw)?)
    };
    let x = augment(tape, batch, p.policy, p.step_seed(i))?;
    let logits = forward(p.arch, tape, &params, x)?;
    let loss = soft_ce(tape, logits, targets)?;
    Ok(StepGraph {
        params,
        batch,
        labels,
        loss,
    })
}

fn flatten_values<F: Element>(tape: &Tape<F>, vars: &[Var], len: usize) -> Result<Vec<F>> {
    let mut out = Vec::with_capacity(len);
    for &v in vars {
        out.extend_from_slice(tape.value(v)?.data());
    }
    Ok(out)
}

fn step_fault(e: impl Into<Error>, step: usize) -> Error {
    let e = e.into();
    if e.is_numeric_fault() {
        Error::Divergence { context: "unroll step", index: step }
    } else {
        e
    }
}

/// Loop one: `T` plain SGD steps from `θ*_t`, summing the gradients. Each
/// step's graph is released before the next begins.
pub fn student_unroll<F: Element>(p: &MatchProblem<F>) -> Result<Unroll<F>> {
    p.check()?;
    let mut tape = Tape::<F>::new(TapeMode::Plain);
    let mut theta = p.start.clone();
    let mut g_sum = vec![0.0f64; theta.len()];
    let mut checksums = Vec::with_capacity(p.steps());
    let mut step_losses = Vec::with_capacity(p.steps());
    for i in 0..p.steps() {
        let scope = tape.open_scope();
        let sg = record_step(&mut tape, p, &theta, i).map_err(|e| step_fault(e, i))?;
        step_losses.push(tape.value(sg.loss)?.data()[0].as_f64());
        let grads = tape.backward(sg.loss, &sg.params).map_err(|e| step_fault(e, i))?;
        tape.release_scope(scope)?;
        let mut g = Vec::with_capacity(theta.len());
        for t in &grads {
            g.extend_from_slice(t.data());
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { context: "unroll step", index: i });
        }
        checksums.push(checksum_grads(&g));
        for (s, v) in g_sum.iter_mut().zip(&g) {
            *s += v.as_f64();
        }
        theta.axpy(F::of(-p.beta), &g);
    }
    Ok(Unroll {
        final_params: theta,
        g_sum,
        checksums,
        step_losses,
        stats: tape.stats(),
    })
}

/// Loop two: replays the unroll and, per batch, differentiates
/// `c · g_i` with `c = (2β(θ*_{t+M} − θ*_t) + 2β²G) / C` back to the batch,
/// scattering the result into the images the batch was drawn from.
pub fn tesla_grad<F: Element>(p: &MatchProblem<F>, unroll: &Unroll<F>) -> Result<TeslaGrad<F>> {
    p.check()?;
    let (c_norm, d) = p.displacement();
    if !(c_norm >= DEGENERATE_EPS) {
        return Err(Error::DegenerateSegment(c_norm));
    }
    if unroll.checksums.len() != p.steps() || unroll.g_sum.len() != d.len() {
        return Err(Error::Config("unroll does not belong to this problem".into()));
    }
    let beta = p.beta;
    let g = &unroll.g_sum;
    let dg: f64 = d.iter().zip(g).map(|(a, b)| a * b).sum();
    let gg: f64 = g.iter().map(|v| v * v).sum();
    let coeff: Vec<F> = d
        .iter()
        .zip(g)
        .map(|(&dk, &gk)| F::of((2.0 * beta * dk + 2.0 * beta * beta * gk) / c_norm))
        .collect();
    let coeff = p.start.with_values(coeff)?.unflatten();

    let n = p.images.shape()[0];
    let stride = p.images.numel() / n;
    let mut image_grad = vec![F::zero(); p.images.numel()];
    let mut label_grad = p.labels_are_logits.then(|| vec![F::zero(); p.labels.numel()]);
    let classes = p.arch.classes;

    let mut tape = Tape::<F>::new(TapeMode::GradientAsGraph);
    tape.reset_peak();
    let mut theta = p.start.clone();
    let mut replay = Vec::with_capacity(p.steps());
    for i in 0..p.steps() {
        let scope = tape.open_scope();
        let sg = record_step(&mut tape, p, &theta, i).map_err(|e| step_fault(e, i))?;
        let gi = tape.gradient_as_graph(sg.loss, &sg.params).map_err(|e| step_fault(e, i))?;
        let values = flatten_values(&tape, &gi, theta.len())?;
        let sum = checksum_grads(&values);
        replay.push(sum);
        if sum != unroll.checksums[i] {
            return Err(Error::DeterminismFault { step: i });
        }
        let mut s: Option<Var> = None;
        for (gk, ck) in gi.iter().zip(&coeff) {
            let cv = tape.leaf(ck.clone())?;
            let term = tape.dot(cv, *gk)?;
            s = Some(match s {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let s = s.expect("every architecture has parameters");
        let mut wrt = vec![sg.batch];
        wrt.extend(sg.labels);
        let grads = tape.backward(s, &wrt)?;
        let idx = p.plan.step(i);
        for (slot, &j) in idx.iter().enumerate() {
            let src = &grads[0].data()[slot * stride..(slot + 1) * stride];
            for (dst, &v) in image_grad[j * stride..(j + 1) * stride].iter_mut().zip(src) {
                *dst = *dst + v;
            }
            if let Some(lg) = label_grad.as_mut() {
                let src = &grads[1].data()[slot * classes..(slot + 1) * classes];
                for (dst, &v) in lg[j * classes..(j + 1) * classes].iter_mut().zip(src) {
                    *dst = *dst + v;
                }
            }
        }
        tape.release_scope(scope)?;
        theta.axpy(F::of(-beta), &values);
    }
    if theta.as_slice().iter().zip(unroll.final_params.as_slice()).any(|(a, b)| a.bits() != b.bits()) {
        return Err(Error::DeterminismFault { step: p.steps() });
    }
    let decomposition = LossDecomposition {
        constant: c_norm,
        linear: 2.0 * beta * dg,
        quadratic: beta * beta * gg,
        denominator: c_norm,
        direct: unroll.final_params.dist_sq(p.target),
    };
    let rel = decomposition.relative_error();
    if !(rel <= DECOMPOSITION_TOL) {
        return Err(Error::DecompositionMismatch {
            iteration: p.iteration as usize,
            rel_err: rel,
        });
    }
    let images = Tensor::new(p.images.shape().to_vec(), image_grad)?;
    let labels = label_grad.map(|v| Tensor::new(p.labels.shape().to_vec(), v)).transpose()?;
    Ok(TeslaGrad {
        images,
        labels,
        beta: (2.0 * dg + 2.0 * beta * gg) / c_norm,
        loss: decomposition.normalized_loss(),
        decomposition,
        stats: tape.stats(),
        replay_checksums: replay,
    })
}

/// Both loops of one matching iteration.
pub fn tesla_step<F: Element>(p: &MatchProblem<F>) -> Result<(Unroll<F>, TeslaGrad<F>)> {
    let unroll = student_unroll(p)?;
    let grad = tesla_grad(p, &unroll)?;
    Ok((unroll, grad))
}

/// Full-dataset leaves for the oracles, gathered per batch on the tape.
struct OracleLeaves {
    images: Var,
    labels: Var,
}

fn oracle_batch<F: Element>(
    tape: &mut Tape<F>,
    p: &MatchProblem<F>,
    leaves: &OracleLeaves,
    params: &[Var],
    i: usize,
) -> Result<Var> {
    let idx = p.plan.step(i);
    let batch = tape.gather_rows(leaves.images, idx)?;
    let raw = tape.gather_rows(leaves.labels, idx)?;
    let targets = if p.labels_are_logits { tape.softmax_rows(raw)? } else { raw };
    let x = augment(tape, batch, p.policy, p.step_seed(i))?;
    let logits = forward(p.arch, tape, params, x)?;
    soft_ce(tape, logits, targets)
}

fn oracle_result<F: Element>(
    tape: &mut Tape<F>,
    p: &MatchProblem<F>,
    leaves: &OracleLeaves,
    loss: Var,
) -> Result<OracleGrad<F>> {
    let value = tape.value(loss)?.data()[0].as_f64();
    let mut wrt = vec![leaves.images];
    if p.labels_are_logits {
        wrt.push(leaves.labels);
    }
    let mut grads = tape.backward(loss, &wrt)?;
    let labels = p.labels_are_logits.then(|| grads.pop().expect("two gradients"));
    let stats = tape.stats();
    Ok(OracleGrad {
        images: grads.pop().expect("image gradient"),
        labels,
        loss: value,
        stats,
    })
}

/// Sum of per-slot dot products `Σ_k a_k · b_k`.
fn dot_slots<F: Element>(tape: &mut Tape<F>, a: &[Var], b: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (&x, &y) in a.iter().zip(b) {
        let t = tape.dot(x, y)?;
        acc = Some(match acc {
            Some(s) => tape.add(s, t)?,
            None => t,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Gradient of `[C + 2β(θ*_{t+M} − θ*_t)·Σg_i + β²‖Σg_i‖²] / C`, with each
/// `g_i` evaluated at a constant student iterate, on one retained graph.
pub fn detached_unroll_oracle<F: Element>(p: &MatchProblem<F>) -> Result<OracleGrad<F>> {
    p.check()?;
    let (c_norm, _) = p.displacement();
    let mut tape = Tape::<F>::new(TapeMode::GradientAsGraph);
    let leaves = OracleLeaves {
        images: tape.leaf(p.images.clone())?,
        labels: tape.leaf(p.labels.clone())?,
    };
    let mut theta = p.start.clone();
    let mut g_total: Option<Vec<Var>> = None;
    for i in 0..p.steps() {
        let params = theta.leaves(&mut tape)?;
        let loss = oracle_batch(&mut tape, p, &leaves, &params, i)?;
        let gi = tape.gradient_as_graph(loss, &params)?;
        let values = flatten_values(&tape, &gi, theta.len())?;
        theta.axpy(F::of(-p.beta), &values);
        g_total = Some(match g_total {
            None => gi,
            Some(acc) => acc.iter().zip(&gi).map(|(&a, &b)| tape.add(a, b)).collect::<std::result::Result<_, _>>()?,
        });
    }
    let g_total = g_total.expect("at least one step");
    let diff = p.start.with_values(p.target.diff(p.start))?.leaves(&mut tape)?;
    let lin = dot_slots(&mut tape, &diff, &g_total)?;
    let quad = dot_slots(&mut tape, &g_total, &g_total)?;
    let lin = tape.scale(lin, 2.0 * p.beta)?;
    let quad = tape.scale(quad, p.beta * p.beta)?;
    let constant = tape.leaf(Tensor::scalar(F::of(c_norm)))?;
    let total = tape.add(constant, lin)?;
    let total = tape.add(total, quad)?;
    let loss = tape.scale(total, 1.0 / c_norm)?;
    oracle_result(&mut tape, p, &leaves, loss)
}

/// Gradient of `‖θ̂_{t+T} − θ*_{t+M}‖² / C` through the entire unroll,
/// including every path by which early batches move later iterates.
pub fn full_unroll_oracle<F: Element>(p: &MatchProblem<F>) -> Result<OracleGrad<F>> {
    p.check()?;
    let (c_norm, _) = p.displacement();
    let mut tape = Tape::<F>::new(TapeMode::GradientAsGraph);
    let leaves = OracleLeaves {
        images: tape.leaf(p.images.clone())?,
        labels: tape.leaf(p.labels.clone())?,
    };
    let mut theta = p.start.leaves(&mut tape)?;
    for i in 0..p.steps() {
        let loss = oracle_batch(&mut tape, p, &leaves, &theta, i)?;
        let gi = tape.gradient_as_graph(loss, &theta)?;
        let mut next = Vec::with_capacity(theta.len());
        for (&t, &g) in theta.iter().zip(&gi) {
            let step = tape.scale(g, -p.beta)?;
            next.push(tape.add(t, step)?);
        }
        theta = next;
    }
    let target = p.target.leaves(&mut tape)?;
    let mut diffs = Vec::with_capacity(theta.len());
    for (&a, &b) in theta.iter().zip(&target) {
        diffs.push(tape.sub(a, b)?);
    }
    let dist = dot_slots(&mut tape, &diffs, &diffs)?;
    let loss = tape.scale(dist, 1.0 / c_norm)?;
    oracle_result(&mut tape, p, &leaves, loss)
}

/// Student iterates `θ̂_{t+0} … θ̂_{t+T−1}` visited by the unroll.
pub fn student_iterates<F: Element>(p: &MatchProblem<F>) -> Result<Vec<ParamVector<F>>> {
    p.check()?;
    let mut out = Vec::with_capacity(p.steps());
    let mut theta = p.start.clone();
    for i in 0..p.steps() {
        let g = step_gradient(p, &theta, i)?;
        out.push(theta.clone());
        theta.axpy(F::of(-p.beta), &g);
    }
    Ok(out)
}

fn step_gradient<F: Element>(p: &MatchProblem<F>, theta: &ParamVector<F>, i: usize) -> Result<Vec<F>> {
    let mut tape = Tape::<F>::new(TapeMode::Plain);
    let sg = record_step(&mut tape, p, theta, i)?;
    let grads = tape.backward(sg.loss, &sg.params)?;
    Ok(grads.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Value of the expanded loss with every `g_i` evaluated at the given fixed
/// iterates. Its derivative in the images is what the detached gradient
/// computes.
pub fn detached_objective<F: Element>(p: &MatchProblem<F>, iterates: &[ParamVector<F>]) -> Result<f64> {
    p.check()?;
    if iterates.len() != p.steps() {
        return Err(Error::Config(format!("{} iterates for {} steps", iterates.len(), p.steps())));
    }
    let (c_norm, d) = p.displacement();
    let mut g_sum = vec![0.0f64; d.len()];
    for (i, theta) in iterates.iter().enumerate() {
        for (s, v) in g_sum.iter_mut().zip(step_gradient(p, theta, i)?) {
            *s += v.as_f64();
        }
    }
    let dg: f64 = d.iter().zip(&g_sum).map(|(a, b)| a * b).sum();
    let gg: f64 = g_sum.iter().map(|v| v * v).sum();
    Ok((c_norm + 2.0 * p.beta * dg + p.beta * p.beta * gg) / c_norm)
}
