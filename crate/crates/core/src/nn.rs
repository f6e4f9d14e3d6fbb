//! Student/teacher networks: a ConvNet of conv3x3 → norm → relu → avgpool
//! blocks with a linear head, and a plain MLP. Parameters live in one flat
//! vector with a fixed layer order so trajectories can do parameter-space
//! arithmetic directly.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Tolerance on target row sums accepted by the loss.
pub const TARGET_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Convnet,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub kind: ModelKind,
    /// Conv blocks for a ConvNet, hidden layers for an MLP.
    pub depth: usize,
    pub width: usize,
    pub norm: Norm,
    pub classes: usize,
    /// `(channels, height, width)`.
    pub input: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Weight { fan_in: usize },
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub kind: SlotKind,
}

impl LayerSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    slots: Vec<LayerSlot>,
    len: usize,
}

impl Layout {
    pub fn slots(&self) -> &[LayerSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl ModelArch {
    /// The ConvNet of depth `depth` with 128 filters and instance norm.
    pub fn convnet(depth: usize, classes: usize, input: [usize; 3]) -> Self {
        Self {
            kind: ModelKind::Convnet,
            depth,
            width: 128,
            norm: Norm::Instance,
            classes,
            input,
        }
    }

    pub fn mlp(depth: usize, width: usize, classes: usize, input: [usize; 3]) -> Self {
        Self {
            kind: ModelKind::Mlp,
            depth,
            width,
            norm: Norm::None,
            classes,
            input,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArch(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.width == 0 || self.classes < 2 || self.input.iter().any(|&d| d == 0) {
            return bad(format!("degenerate dimensions in {self:?}"));
        }
        match self.kind {
            ModelKind::Convnet => {
                let (h, w) = self.spatial_out();
                if h == 0 || w == 0 {
                    return bad(format!(
                        "{}x{} input cannot go through {} pooling blocks",
                        self.input[1], self.input[2], self.depth
                    ));
                }
            }
            ModelKind::Mlp => {
                if self.norm != Norm::None {
                    return bad("the MLP has no normalisation layers".into());
                }
            }
        }
        Ok(())
    }

    fn spatial_out(&self) -> (usize, usize) {
        (self.input[1] >> self.depth, self.input[2] >> self.depth)
    }

    fn feature_dim(&self) -> usize {
        match self.kind {
            ModelKind::Convnet => {
                let (h, w) = self.spatial_out();
                self.width * h * w
            }
            ModelKind::Mlp => self.width,
        }
    }

    /// Canonical parameter order: layers input to output, weight before bias,
    /// norm scale and shift after the conv bias.
    pub fn layout(&self) -> Layout {
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, kind: SlotKind| {
            let n: usize = shape.iter().product();
            slots.push(LayerSlot {
                name,
                offset,
                shape,
                kind,
            });
            offset += n;
        };
        match self.kind {
            ModelKind::Convnet => {
                let mut cin = self.input[0];
                for d in 0..self.depth {
                    push(
                        format!("conv{d}.weight"),
                        vec![self.width, cin, 3, 3],
                        SlotKind::Weight { fan_in: cin * 9 },
                    );
                    push(format!("conv{d}.bias"), vec![self.width], SlotKind::Bias);
                    if self.norm == Norm::Instance {
                        push(format!("norm{d}.weight"), vec![self.width], SlotKind::NormScale);
                        push(format!("norm{d}.bias"), vec![self.width], SlotKind::NormShift);
                    }
                    cin = self.width;
                }
            }
            ModelKind::Mlp => {
                let mut fan_in: usize = self.input.iter().product();
                for d in 0..self.depth {
                    push(
                        format!("fc{d}.weight"),
                        vec![self.width, fan_in],
                        SlotKind::Weight { fan_in },
                    );
                    push(format!("fc{d}.bias"), vec![self.width], SlotKind::Bias);
                    fan_in = self.width;
                }
            }
        }
        let feat = self.feature_dim();
        push(
            "classifier.weight".into(),
            vec![self.classes, feat],
            SlotKind::Weight { fan_in: feat },
        );
        push("classifier.bias".into(), vec![self.classes], SlotKind::Bias);
        Layout { slots, len: offset }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }

    /// Compact human-readable name, e.g. `convnet-d3-w128-instance`.
    pub fn name(&self) -> String {
        let kind = match self.kind {
            ModelKind::Convnet => "convnet",
            ModelKind::Mlp => "mlp",
        };
        let norm = match self.norm {
            Norm::Instance => "instance",
            Norm::None => "none",
        };
        format!("{kind}-d{}-w{}-{norm}", self.depth, self.width)
    }
}

/// All parameters of one model, flattened in canonical layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<F: Element = f32> {
    values: Tensor<F>,
    layout: Arc<Layout>,
}

impl<F: Element> ParamVector<F> {
    pub fn zeros(arch: &ModelArch) -> Self {
        let layout = arch.layout();
        Self {
            values: Tensor::zeros(&[layout.len()]),
            layout: Arc::new(layout),
        }
    }

    pub fn from_values(arch: &ModelArch, values: Vec<F>) -> Result<Self> {
        let layout = arch.layout();
        if values.len() != layout.len() {
            return Err(Error::Shape {
                context: "param vector",
                expected: vec![layout.len()],
                got: vec![values.len()],
            });
        }
        Ok(Self {
            values: Tensor::new(vec![values.len()], values)?,
            layout: Arc::new(layout),
        })
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<F>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Shape {
                context: "param vector",
                expected: vec![self.len()],
                got: vec![values.len()],
            });
        }
        Ok(Self {
            values: Tensor::new(vec![values.len()], values)?,
            layout: Arc::clone(&self.layout),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[F] {
        self.values.data()
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        self.values.data_mut()
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn cast<G: Element>(&self) -> ParamVector<G> {
        ParamVector {
            values: self.values.cast(),
            layout: Arc::clone(&self.layout),
        }
    }

    /// One tensor per layer slot.
    pub fn unflatten(&self) -> Vec<Tensor<F>> {
        self.layout
            .slots
            .iter()
            .map(|s| {
                Tensor::new(
                    s.shape.clone(),
                    self.values.data()[s.offset..s.offset + s.len()].to_vec(),
                )
                .expect("layout slots tile the vector")
            })
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(&self, parts: &[Tensor<F>]) -> Result<Self> {
        if parts.len() != self.layout.slots.len() {
            return Err(Error::Shape {
                context: "flatten",
                expected: vec![self.layout.slots.len()],
                got: vec![parts.len()],
            });
        }
        let mut values = Vec::with_capacity(self.len());
        for (slot, part) in self.layout.slots.iter().zip(parts) {
            if part.shape() != slot.shape.as_slice() {
                return Err(Error::Shape {
                    context: "flatten",
                    expected: slot.shape.clone(),
                    got: part.shape().to_vec(),
                });
            }
            values.extend_from_slice(part.data());
        }
        self.with_values(values)
    }

    /// Records each layer as a leaf on `tape`.
    pub fn leaves(&self, tape: &mut Tape<F>) -> Result<Vec<Var>> {
        self.unflatten()
            .into_iter()
            .map(|t| Ok(tape.leaf(t)?))
            .collect()
    }

    /// `self - other`, as raw values.
    pub fn diff(&self, other: &Self) -> Vec<F> {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&a, &b)| a - b)
            .collect()
    }

    /// `‖self − other‖²` accumulated in f64.
    pub fn dist_sq(&self, other: &Self) -> f64 {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum()
    }

    /// `self += c * delta`.
    pub fn axpy(&mut self, c: F, delta: &[F]) {
        for (p, &d) in self.values.data_mut().iter_mut().zip(delta) {
            *p = *p + c * d;
        }
    }
}

/// Fan-in scaled normal weights (variance 2 / fan_in), zero biases, unit
/// norm scale, zero norm shift. Deterministic per seed.
pub fn init_params<F: Element>(arch: &ModelArch, seed: u64) -> Result<ParamVector<F>> {
    arch.validate()?;
    let layout = arch.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(layout.len());
    for slot in layout.slots() {
        match slot.kind {
            SlotKind::Weight { fan_in } => {
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive standard deviation");
                values.extend((0..slot.len()).map(|_| F::of(dist.sample(&mut rng))));
            }
            SlotKind::Bias | SlotKind::NormShift => {
                values.extend(std::iter::repeat_n(F::zero(), slot.len()))
            }
            SlotKind::NormScale => values.extend(std::iter::repeat_n(F::one(), slot.len())),
        }
    }
    ParamVector::from_values(arch, values)
}

fn linear<F: Element>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    let shape = tape.shape(y)?.to_vec();
    let b = tape.reshape(b, &[1, shape[1]])?;
    let b = tape.broadcast_to(b, &shape)?;
    Ok(tape.add(y, b)?)
}

/// Per-channel `[c]` vector broadcast over `[n, c, h, w]`.
fn channel_broadcast<F: Element>(tape: &mut Tape<F>, v: Var, shape: &[usize]) -> Result<Var> {
    let v = tape.reshape(v, &[1, shape[1], 1, 1])?;
    Ok(tape.broadcast_to(v, shape)?)
}

/// Instance normalisation without the affine part.
pub fn instance_norm<F: Element>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let shape = tape.shape(x)?.to_vec();
    let stat_shape = [shape[0], shape[1], 1, 1];
    let inv_area = 1.0 / (shape[2] * shape[3]) as f64;
    let sum = tape.sum_to(x, &stat_shape)?;
    let mean = tape.scale(sum, inv_area)?;
    let mean = tape.broadcast_to(mean, &shape)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.sum_to(sq, &stat_shape)?;
    let var = tape.scale(var, inv_area)?;
    let inv_std = tape.pow_offset(var, INSTANCE_NORM_EPS, -0.5)?;
    let inv_std = tape.broadcast_to(inv_std, &shape)?;
    Ok(tape.mul(centered, inv_std)?)
}

/// Records the forward pass on `tape`. `params` are the per-slot variables in
/// layout order (see [`ParamVector::leaves`]); `x` is `[n, c, h, w]`.
pub fn forward<F: Element>(arch: &ModelArch, tape: &mut Tape<F>, params: &[Var], x: Var) -> Result<Var> {
    let xs = tape.shape(x)?.to_vec();
    if xs.len() != 4 || xs[1..] != arch.input {
        return Err(Error::Shape {
            context: "model input",
            expected: vec![xs.first().copied().unwrap_or(0), arch.input[0], arch.input[1], arch.input[2]],
            got: xs,
        });
    }
    let n = xs[0];
    let mut p = params.iter().copied();
    let mut next = || p.next().ok_or_else(|| Error::InvalidArch("too few parameter tensors".into()));
    let features = match arch.kind {
        ModelKind::Convnet => {
            let mut h = x;
            for _ in 0..arch.depth {
                let (w, b) = (next()?, next()?);
                h = tape.conv2d(h, w)?;
                let shape = tape.shape(h)?.to_vec();
                let b = channel_broadcast(tape, b, &shape)?;
                h = tape.add(h, b)?;
                if arch.norm == Norm::Instance {
                    let (scale, shift) = (next()?, next()?);
                    h = instance_norm(tape, h)?;
                    let scale = channel_broadcast(tape, scale, &shape)?;
                    let shift = channel_broadcast(tape, shift, &shape)?;
                    h = tape.mul(h, scale)?;
                    h = tape.add(h, shift)?;
                }
                h = tape.relu(h)?;
                h = tape.avgpool2(h)?;
            }
            let numel = tape.value(h)?.numel();
            tape.reshape(h, &[n, numel / n])?
        }
        ModelKind::Mlp => {
            let d: usize = arch.input.iter().product();
            let mut h = tape.reshape(x, &[n, d])?;
            for _ in 0..arch.depth {
                let (w, b) = (next()?, next()?);
                h = linear(tape, h, w, b)?;
                h = tape.relu(h)?;
            }
            h
        }
    };
    let (w, b) = (next()?, next()?);
    linear(tape, features, w, b)
}

/// Logits of `x` under `params`, computed on a scratch tape.
pub fn forward_logits<F: Element>(arch: &ModelArch, params: &ParamVector<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    if params.len() != arch.param_count() {
        return Err(Error::ArchMismatch {
            expected: format!("{} parameters for {}", arch.param_count(), arch.name()),
            found: format!("{} parameters", params.len()),
        });
    }
    let mut tape = Tape::default();
    let leaves = params.leaves(&mut tape)?;
    let xv = tape.leaf(x.clone())?;
    let out = forward(arch, &mut tape, &leaves, xv)?;
    Ok(tape.value(out)?.clone())
}

/// Logits in batches of at most `chunk` rows.
pub fn forward_logits_chunked<F: Element>(
    arch: &ModelArch,
    params: &ParamVector<F>,
    x: &Tensor<F>,
    chunk: usize,
) -> Result<Tensor<F>> {
    let n = x.shape()[0];
    let mut data = Vec::with_capacity(n * arch.classes);
    let mut start = 0;
    while start < n {
        let count = chunk.min(n - start);
        let part = forward_logits(arch, params, &x.slice_rows(start, count)?)?;
        data.extend_from_slice(part.data());
        start += count;
    }
    Ok(Tensor::new(vec![n, arch.classes], data)?)
}

pub fn check_targets<F: Element>(targets: &Tensor<F>) -> Result<()> {
    let k = targets.shape()[targets.rank() - 1];
    for (row, vals) in targets.data().chunks(k).enumerate() {
        if let Some(v) = vals.iter().find(|v| !(v.as_f64() >= 0.0)) {
            return Err(Error::MalformedTargets {
                row,
                reason: format!("entry {v} is negative or not a number"),
            });
        }
        let sum: f64 = vals.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > TARGET_SUM_TOL {
            return Err(Error::MalformedTargets {
                row,
                reason: format!("row sums to {sum}"),
            });
        }
    }
    Ok(())
}

/// Mean over the batch of `−Σ_c targets · log_softmax(logits)`, recorded on
/// the tape. `targets` may itself be a differentiable variable.
pub fn soft_ce<F: Element>(tape: &mut Tape<F>, logits: Var, targets: Var) -> Result<Var> {
    let ls = tape.shape(logits)?.to_vec();
    let ts = tape.shape(targets)?.to_vec();
    if ls.len() != 2 || ls != ts {
        return Err(Error::Shape {
            context: "soft_ce targets",
            expected: ls,
            got: ts,
        });
    }
    check_targets(tape.value(targets)?)?;
    let logp = tape.log_softmax_rows(logits)?;
    let ll = tape.dot(targets, logp)?;
    Ok(tape.scale(ll, -1.0 / ls[0] as f64)?)
}

/// Value-only soft cross-entropy.
pub fn soft_ce_loss<F: Element>(logits: &Tensor<F>, targets: &Tensor<F>) -> Result<f64> {
    let mut tape = Tape::default();
    let l = tape.leaf(logits.clone())?;
    let t = tape.leaf(targets.clone())?;
    let loss = soft_ce(&mut tape, l, t)?;
    Ok(tape.value(loss)?.data()[0].as_f64())
}

pub fn one_hot<F: Element>(labels: &[usize], classes: usize) -> Result<Tensor<F>> {
    let mut data = vec![F::zero(); labels.len() * classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::MalformedTargets {
                row: i,
                reason: format!("label {c} out of {classes} classes"),
            });
        }
        data[i * classes + c] = F::one();
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy<F: Element>(logits: &Tensor<F>, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax_rows()?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch_grid() -> Vec<ModelArch> {
        let mut out = Vec::new();
        for depth in 1..=3 {
            for norm in [Norm::Instance, Norm::None] {
                out.push(ModelArch {
                    kind: ModelKind::Convnet,
                    depth,
                    width: 4,
                    norm,
                    classes: 3,
                    input: [2, 8, 8],
                });
            }
            out.push(ModelArch::mlp(depth, 5, 4, [1, 3, 3]));
        }
        out
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        for arch in arch_grid() {
            let a = init_params::<f32>(&arch, 11).unwrap();
            let b = init_params::<f32>(&arch, 11).unwrap();
            assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
            for slot in a.layout().slots() {
                let vals = &a.as_slice()[slot.offset..slot.offset + slot.len()];
                match slot.kind {
                    SlotKind::Bias | SlotKind::NormShift => assert!(vals.iter().all(|&v| v == 0.0)),
                    SlotKind::NormScale => assert!(vals.iter().all(|&v| v == 1.0)),
                    SlotKind::Weight { .. } => {}
                }
            }
        }
    }

    #[test]
    fn weight_variance_is_two_over_fan_in() {
        let arch = ModelArch::mlp(1, 100, 2, [1, 10, 10]);
        let p = init_params::<f64>(&arch, 3).unwrap();
        let slot = &p.layout().slots()[0];
        let w = &p.as_slice()[slot.offset..slot.offset + slot.len()];
        assert_eq!(w.len(), 10_000);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 100.0;
        assert!((var / expected - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn flatten_round_trip_over_arch_grid() {
        for arch in arch_grid() {
            let p = init_params::<f32>(&arch, 5).unwrap();
            let back = p.flatten(&p.unflatten()).unwrap();
            assert_eq!(back, p);
            assert_eq!(p.len(), arch.param_count());
        }
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let arch = ModelArch {
            kind: ModelKind::Convnet,
            depth: 2,
            width: 4,
            norm: Norm::None,
            classes: 3,
            input: [1, 8, 8],
        };
        let p = ParamVector::<f32>::zeros(&arch);
        let x = Tensor::full(&[2, 1, 8, 8], 0.7);
        let y = forward_logits(&arch, &p, &x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let arch = ModelArch {
            kind: ModelKind::Convnet,
            depth: 2,
            width: 4,
            norm: Norm::Instance,
            classes: 3,
            input: [1, 8, 8],
        };
        let p = init_params::<f32>(&arch, 1).unwrap();
        let row: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = Tensor::new(vec![3, 1, 8, 8], row.repeat(3)).unwrap();
        let y = forward_logits(&arch, &p, &x).unwrap();
        let r: Vec<_> = y.data().chunks(3).collect();
        assert_eq!(r[0], r[1]);
        assert_eq!(r[1], r[2]);
    }

    /// Naive per-pixel evaluation of a one-block ConvNet (no norm).
    fn naive_convnet(arch: &ModelArch, p: &ParamVector<f64>, x: &[f64]) -> Vec<f64> {
        let [cin, h, w] = arch.input;
        let width = arch.width;
        let s = p.as_slice();
        let wconv = |co: usize, ci: usize, ky: usize, kx: usize| s[((co * cin + ci) * 3 + ky) * 3 + kx];
        let bconv = &s[width * cin * 9..width * cin * 9 + width];
        let head = width * cin * 9 + width;
        let mut act = vec![0.0; width * h * w];
        for co in 0..width {
            for y in 0..h {
                for xx in 0..w {
                    let mut v = bconv[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    v += wconv(co, ci, ky, kx) * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    act[(co * h + y) * w + xx] = v.max(0.0);
                }
            }
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut pooled = vec![0.0; width * oh * ow];
        for co in 0..width {
            for y in 0..oh {
                for xx in 0..ow {
                    let a = |dy: usize, dx: usize| act[(co * h + 2 * y + dy) * w + 2 * xx + dx];
                    pooled[(co * oh + y) * ow + xx] = (a(0, 0) + a(0, 1) + a(1, 0) + a(1, 1)) / 4.0;
                }
            }
        }
        let feat = pooled.len();
        (0..arch.classes)
            .map(|c| {
                let wrow = &s[head + c * feat..head + (c + 1) * feat];
                s[head + arch.classes * feat + c]
                    + wrow.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn single_block_convnet_matches_naive_loop() {
        let arch = ModelArch {
            kind: ModelKind::Convnet,
            depth: 1,
            width: 3,
            norm: Norm::None,
            classes: 4,
            input: [2, 8, 8],
        };
        let mut p = init_params::<f64>(&arch, 9).unwrap();
        // non-zero biases so they are exercised too
        for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
            if *v == 0.0 {
                *v = 0.01 * i as f64 % 0.3;
            }
        }
        let x: Vec<f64> = (0..128).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.3).collect();
        let xt = Tensor::new(vec![1, 2, 8, 8], x.clone()).unwrap();
        let got = forward_logits(&arch, &p, &xt).unwrap();
        let want = naive_convnet(&arch, &p, &x);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-5, "{g} vs {w}");
        }
    }

    #[test]
    fn soft_ce_closed_forms() {
        let logits = Tensor::<f64>::zeros(&[1, 10]);
        let target = one_hot::<f64>(&[3], 10).unwrap();
        let l = soft_ce_loss(&logits, &target).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);

        let logits = Tensor::<f64>::from_f64_slice(vec![2, 3], &[0.2, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let probs = logits.softmax_rows().unwrap();
        let entropy: f64 = -probs.data().iter().map(|p| p * p.ln()).sum::<f64>() / 2.0;
        let l = soft_ce_loss(&logits, &probs).unwrap();
        assert!((l - entropy).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_matches_scalar_loop_oracle() {
        let n = 5;
        let k = 4;
        let logits: Vec<f64> = (0..n * k).map(|i| ((i * 37) % 17) as f64 / 3.0 - 2.0).collect();
        let raw: Vec<f64> = (0..n * k).map(|i| ((i * 13) % 7) as f64 + 0.5).collect();
        let mut targets = raw.clone();
        for row in targets.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let mut want = 0.0;
        for r in 0..n {
            let row = &logits[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..k {
                want -= targets[r * k + c] * (row[c] - lse);
            }
        }
        want /= n as f64;
        let got = soft_ce_loss(
            &Tensor::<f32>::from_f64_slice(vec![n, k], &logits).unwrap(),
            &Tensor::<f32>::from_f64_slice(vec![n, k], &targets).unwrap(),
        )
        .unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn soft_ce_gradient_is_softmax_minus_targets() {
        let mut tape = Tape::<f32>::default();
        let logits = Tensor::<f32>::from_f64_slice(vec![2, 3], &[0.3, -0.7, 1.2, 2.0, 0.1, -0.4]).unwrap();
        let targets = Tensor::<f32>::from_f64_slice(vec![2, 3], &[0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap();
        let l = tape.leaf(logits.clone()).unwrap();
        let t = tape.leaf(targets.clone()).unwrap();
        let loss = soft_ce(&mut tape, l, t).unwrap();
        let g = tape.backward(loss, &[l]).unwrap().remove(0);
        let sm = logits.softmax_rows().unwrap();
        for i in 0..6 {
            let want = (sm.data()[i] - targets.data()[i]) / 2.0;
            assert!((g.data()[i] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn malformed_targets_rejected() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        let bad = Tensor::<f32>::from_f64_slice(vec![1, 3], &[0.5, 0.5, 0.5]).unwrap();
        assert!(matches!(soft_ce_loss(&logits, &bad), Err(Error::MalformedTargets { row: 0, .. })));
        let neg = Tensor::<f32>::from_f64_slice(vec![1, 3], &[1.5, -0.5, 0.0]).unwrap();
        assert!(matches!(soft_ce_loss(&logits, &neg), Err(Error::MalformedTargets { .. })));
    }

    #[test]
    fn instance_norm_of_constant_planes_is_zero() {
        let mut tape = Tape::<f32>::default();
        let mut data = Vec::new();
        for c in 0..6 {
            data.extend(std::iter::repeat_n(0.25 * c as f32 - 0.6, 64));
        }
        let x = tape.leaf(Tensor::new(vec![2, 3, 8, 8], data).unwrap()).unwrap();
        let y = instance_norm(&mut tape, x).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_matches_value_kernel() {
        let mut tape = Tape::<f64>::default();
        let raw: Vec<f64> = (0..96).map(|i| ((i * 31) % 23) as f64 / 7.0).collect();
        let x = Tensor::new(vec![2, 3, 4, 4], raw).unwrap();
        let xv = tape.leaf(x.clone()).unwrap();
        let y = instance_norm(&mut tape, xv).unwrap();
        let want = x.channel_normalize(INSTANCE_NORM_EPS).unwrap();
        for (a, b) in tape.value(y).unwrap().data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_arch_rejected() {
        let mut a = ModelArch::convnet(5, 10, [3, 16, 16]);
        assert!(a.validate().is_err());
        a.depth = 0;
        assert!(a.validate().is_err());
        let x = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        let arch = ModelArch::convnet(2, 10, [3, 8, 8]);
        let p = ParamVector::<f32>::zeros(&arch);
        assert!(matches!(forward_logits(&arch, &p, &x), Err(Error::Shape { .. })));
    }
}
