//! Differentiable batch augmentation. One random draw per batch: every image
//! in the batch receives the same transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TapeMode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    /// Horizontal flip with probability one half.
    Flip,
    /// Shift by up to `max_shift` pixels on each axis, zero fill.
    Translate { max_shift: usize },
    /// Zero a square of side `ratio · min(h, w)`.
    Cutout { ratio: f64 },
    /// Add `u ∈ [−delta, delta]` to every pixel.
    Brightness { delta: f64 },
    /// Blend with the channel mean by a factor `1 + u`.
    Saturation { delta: f64 },
    /// Blend with the image mean by a factor `1 + u`.
    Contrast { delta: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugPolicy {
    pub transforms: Vec<Transform>,
}

impl AugPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    /// Flip, translate by an eighth of the side, cutout of half, and the
    /// three colour jitters.
    pub fn dsa_default(side: usize) -> Self {
        Self {
            transforms: vec![
                Transform::Flip,
                Transform::Translate {
                    max_shift: (side / 8).max(1),
                },
                Transform::Cutout { ratio: 0.5 },
                Transform::Brightness { delta: 0.2 },
                Transform::Saturation { delta: 0.5 },
                Transform::Contrast { delta: 0.3 },
            ],
        }
    }

    pub fn color() -> Self {
        Self {
            transforms: vec![
                Transform::Brightness { delta: 0.2 },
                Transform::Saturation { delta: 0.5 },
                Transform::Contrast { delta: 0.3 },
            ],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Checks every parameter against its range for images of `[c, h, w]`.
    pub fn validate(&self, shape: [usize; 3]) -> Result<()> {
        let side = shape[1].min(shape[2]);
        for t in &self.transforms {
            let bad = |what: String| Err(Error::AugmentRange(what));
            match *t {
                Transform::Flip => {}
                Transform::Translate { max_shift } => {
                    if max_shift >= side {
                        return bad(format!("translate max_shift {max_shift} must be below {side}"));
                    }
                }
                Transform::Cutout { ratio } => {
                    if !(ratio > 0.0 && ratio <= 1.0) {
                        return bad(format!("cutout ratio {ratio} outside (0, 1]"));
                    }
                }
                Transform::Brightness { delta } | Transform::Saturation { delta } | Transform::Contrast { delta } => {
                    if !(0.0..=1.0).contains(&delta) {
                        return bad(format!("colour delta {delta} outside [0, 1]"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Mixes a run seed with an outer iteration and an unroll step.
pub fn step_seed(run_seed: u64, iteration: u64, step: u64) -> u64 {
    let mut h = splitmix(run_seed ^ 0x5445_534c_4141_5547);
    h = splitmix(h ^ iteration);
    splitmix(h ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Records the augmentation of batch `x` (`[n, c, h, w]`) on `tape`. The
/// node structure depends only on the policy, never on the draws.
pub fn augment<F: Element>(tape: &mut Tape<F>, x: Var, policy: &AugPolicy, seed: u64) -> Result<Var> {
    let shape = tape.shape(x)?.to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape {
            context: "augment input",
            expected: vec![0, 0, 0, 0],
            got: shape,
        });
    }
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    policy.validate([c, h, w])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = x;
    for t in &policy.transforms {
        y = match *t {
            Transform::Flip => {
                if rng.random_bool(0.5) {
                    tape.flip_w(y)?
                } else {
                    tape.scale(y, 1.0)?
                }
            }
            Transform::Translate { max_shift } => {
                let m = max_shift as i64;
                let dy = rng.random_range(-m..=m) as isize;
                let dx = rng.random_range(-m..=m) as isize;
                tape.shift2d(y, dy, dx)?
            }
            Transform::Cutout { ratio } => {
                let size = ((ratio * h.min(w) as f64).round() as usize).max(1);
                let cy = rng.random_range(0..h as u64) as isize;
                let cx = rng.random_range(0..w as u64) as isize;
                let half = (size / 2) as isize;
                let (y0, x0) = (cy - half, cx - half);
                let mut mask = Tensor::<F>::full(&shape, F::one());
                let data = mask.data_mut();
                for b in 0..n * c {
                    for r in 0..h as isize {
                        for col in 0..w as isize {
                            if r >= y0 && r < y0 + size as isize && col >= x0 && col < x0 + size as isize {
                                data[(b * h + r as usize) * w + col as usize] = F::zero();
                            }
                        }
                    }
                }
                let m = tape.leaf(mask)?;
                tape.mul(y, m)?
            }
            Transform::Brightness { delta } => {
                let u = rng.random_range(-1.0..=1.0) * delta;
                let b = tape.leaf(Tensor::full(&shape, F::of(u)))?;
                tape.add(y, b)?
            }
            Transform::Saturation { delta } => {
                let s = 1.0 + rng.random_range(-1.0..=1.0) * delta;
                blend_with_mean(tape, y, &[n, 1, h, w], s)?
            }
            Transform::Contrast { delta } => {
                let s = 1.0 + rng.random_range(-1.0..=1.0) * delta;
                blend_with_mean(tape, y, &[n, 1, 1, 1], s)?
            }
        };
    }
    Ok(y)
}

/// `s · x + (1 − s) · mean`, where the mean is taken down to `reduced`.
fn blend_with_mean<F: Element>(tape: &mut Tape<F>, x: Var, reduced: &[usize], s: f64) -> Result<Var> {
    let shape = tape.shape(x)?.to_vec();
    let count = shape.iter().product::<usize>() / reduced.iter().product::<usize>();
    let sum = tape.sum_to(x, reduced)?;
    let mean = tape.scale(sum, 1.0 / count as f64)?;
    let wide = tape.broadcast_to(mean, &shape)?;
    let a = tape.scale(x, s)?;
    let b = tape.scale(wide, 1.0 - s)?;
    Ok(tape.add(a, b)?)
}

/// Value-only augmentation on a scratch tape.
pub fn augment_tensor<F: Element>(x: &Tensor<F>, policy: &AugPolicy, seed: u64) -> Result<Tensor<F>> {
    if policy.is_empty() {
        return Ok(x.clone());
    }
    let mut tape = Tape::new(TapeMode::Plain);
    let v = tape.leaf(x.clone())?;
    let y = augment(&mut tape, v, policy, seed)?;
    Ok(tape.value(y)?.clone())
}
