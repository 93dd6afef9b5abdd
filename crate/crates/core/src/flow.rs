//! Linear-interpolant flow matching.
//!
//! Time runs from pure noise at `t = 0` to data at `t = 1`:
//! `x_t = t·x1 + (1 − t)·x0`, with constant target velocity `x1 − x0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::align::{AlignmentLossBreakdown, LossWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Coefficients of the linear path. `alpha` weighs the noise endpoint and
/// `sigma` the data endpoint.
#[derive(Debug, Clone, Copy, Default)]
pub struct InterpolantSchedule;

impl InterpolantSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Per-sample interpolation: `t[i]` applies to the `i`-th slice along the
/// leading axis.
pub fn interpolate<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, t: &[T]) -> Result<Tensor<T>> {
    x0.expect_same_shape(x1, "interpolate")?;
    let lead = x0.shape().first().copied().unwrap_or(1);
    if t.len() != lead {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            left: x0.shape().to_vec(),
            right: vec![t.len()],
        });
    }
    let inner = x0.numel() / lead;
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        check_time(ti.as_f64())?;
        let range = i * inner..(i + 1) * inner;
        out.extend(
            x0.data()[range.clone()]
                .iter()
                .zip(&x1.data()[range])
                .map(|(&a, &b)| ti * b + (T::one() - ti) * a),
        );
    }
    Tensor::new(x0.shape(), out)
}

/// Noise/data pairs with their interpolated states and regression targets.
#[derive(Debug, Clone)]
pub struct FlowBatch<T: Scalar = f32> {
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub t: Vec<T>,
    pub xt: Tensor<T>,
    pub target_v: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> FlowBatch<T> {
    pub fn new(x0: Tensor<T>, x1: Tensor<T>, t: Vec<T>, labels: Vec<usize>) -> Result<Self> {
        let xt = interpolate(&x0, &x1, &t)?;
        let target_v = x1.sub(&x0)?;
        if labels.len() != t.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a batch of {}",
                labels.len(),
                t.len()
            )));
        }
        Ok(FlowBatch {
            x0,
            x1,
            t,
            xt,
            target_v,
            labels,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.t.len()
    }
}

/// Mean squared error between predicted and target velocity over all
/// elements.
pub fn fm_loss<T: Scalar>(tape: &mut Tape<T>, predicted_v: Var, x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Var> {
    let target = x1.sub(x0)?;
    tape.value(predicted_v).expect_same_shape(&target, "fm_loss")?;
    let target = tape.constant(target);
    let residual = tape.sub(predicted_v, target)?;
    let sq = tape.mul(residual, residual)?;
    Ok(tape.mean_all(sq))
}

/// `L_flow + λ_proj·L_proj + λ_struc·L_struc`; the alignment breakdown
/// already carries the weighted sum of its two terms.
pub fn total_training_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fm: Var,
    align: &AlignmentLossBreakdown,
) -> Result<Var> {
    tape.add(fm, align.combined)
}

/// The same combination on plain numbers.
pub fn combine_losses(fm: f64, proj: f64, struc: f64, w: &LossWeights) -> f64 {
    fm + w.lambda_proj * proj + w.lambda_struc * struc
}

/// Guided velocity `v_uncond + w·(v_cond − v_uncond)`.
pub fn cfg_velocity<T: Scalar>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    let w = T::of(w);
    v_cond.zip_map(v_uncond, "cfg_velocity", |c, u| u + w * (c - u))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            cfg_scale: 1.325,
            seed: 0,
        }
    }
}

/// Forward Euler from `t = 0` to `t = 1` on the uniform grid `t_k = k/steps`.
pub fn euler_integrate<T: Scalar>(
    x_start: Tensor<T>,
    steps: usize,
    mut velocity: impl FnMut(&Tensor<T>, T) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let dt = T::one() / T::of(steps as f64);
    let mut x = x_start;
    for k in 0..steps {
        let t = T::of(k as f64 / steps as f64);
        let v = velocity(&x, t)?;
        x.expect_same_shape(&v, "euler_integrate")?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("velocity at Euler step {k} (t = {t})")));
        }
        x = x.zip_map(&v, "euler_integrate", |a, b| a + dt * b)?;
    }
    Ok(x)
}

/// Seeded standard-normal tensor.
pub fn gaussian<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_from(shape, &mut rng)
}

pub fn gaussian_from<T: Scalar>(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor<T> {
    let n = crate::tensor::numel(shape);
    let data = (0..n)
        .map(|_| T::of(StandardNormal.sample(rng)))
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Samples one item per label. `model(x, t, labels)` returns velocities;
/// with `cfg_scale != 1` the conditional and unconditional passes are
/// evaluated together and combined with [`cfg_velocity`].
pub fn euler_sample<T: Scalar>(
    mut model: impl FnMut(&Tensor<T>, &[T], &[usize]) -> Result<Tensor<T>>,
    labels: &[usize],
    null_label: usize,
    item_shape: &[usize],
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels to sample".into()));
    }
    let b = labels.len();
    let mut shape = vec![b];
    shape.extend_from_slice(item_shape);
    let x_start = gaussian::<T>(&shape, cfg.seed);
    let guided = cfg.cfg_scale != 1.0;
    let mut both_labels = labels.to_vec();
    if guided {
        both_labels.extend(std::iter::repeat_n(null_label, b));
    }
    euler_integrate(x_start, cfg.steps, |x, t| {
        if !guided {
            return model(x, &vec![t; b], labels);
        }
        let doubled = Tensor::stack_leading(&[x.clone(), x.clone()])?;
        let v = model(&doubled, &vec![t; 2 * b], &both_labels)?;
        let v_cond = v.narrow_leading(0, b)?;
        let v_uncond = v.narrow_leading(b, b)?;
        cfg_velocity(&v_cond, &v_uncond, cfg.cfg_scale)
    })
}
