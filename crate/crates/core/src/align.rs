//! Point-wise and structural alignment between student and teacher token
//! features.
//!
//! All maps are batched `[B, N, D]`. Every loss averages over the batch as
//! well as over tokens (or token pairs). Teacher-side inputs are detached
//! before use, so no gradient ever reaches them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Floor applied to student probabilities before the logarithm in the KL
/// variant.
pub const KL_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    TeacherRaw,
    StudentRaw,
    TeacherNormalized,
    StudentNormalized,
}

impl FeatureKind {
    pub fn is_normalized(self) -> bool {
        matches!(self, FeatureKind::TeacherNormalized | FeatureKind::StudentNormalized)
    }

    pub fn is_teacher(self) -> bool {
        matches!(self, FeatureKind::TeacherRaw | FeatureKind::TeacherNormalized)
    }

    fn normalized(self) -> Self {
        if self.is_teacher() {
            FeatureKind::TeacherNormalized
        } else {
            FeatureKind::StudentNormalized
        }
    }
}

/// A batch of per-token feature matrices recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub values: Var,
    pub kind: FeatureKind,
    batch: usize,
    tokens: usize,
    dim: usize,
}

impl FeatureMap {
    /// Wraps a `[B, N, D]` (or unbatched `[N, D]`) variable.
    pub fn new<T: Scalar>(tape: &mut Tape<T>, values: Var, kind: FeatureKind) -> Result<Self> {
        let shape = tape.value(values).shape().to_vec();
        let values = match shape.len() {
            2 => tape.reshape(values, &[1, shape[0], shape[1]])?,
            3 => values,
            _ => {
                return Err(Error::InvalidShape {
                    op: "feature_map",
                    shape,
                    reason: "expected [B, N, D] or [N, D]".into(),
                })
            }
        };
        let s = tape.value(values).shape();
        let (batch, tokens, dim) = (s[0], s[1], s[2]);
        if kind.is_normalized() && !rows_are_unit(tape, values) {
            return Err(Error::InvalidArgument(
                "feature map declared normalized but has non-unit rows".into(),
            ));
        }
        Ok(FeatureMap {
            values,
            kind,
            batch,
            tokens,
            dim,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// L2-normalizes every token row. Teacher maps are detached first.
    pub fn normalize<T: Scalar>(&self, tape: &mut Tape<T>) -> FeatureMap {
        if self.kind.is_normalized() {
            return *self;
        }
        let src = if self.kind.is_teacher() {
            tape.detach(self.values)
        } else {
            self.values
        };
        FeatureMap {
            values: tape.row_l2_normalize(src),
            kind: self.kind.normalized(),
            ..*self
        }
    }
}

fn rows_are_unit<T: Scalar>(tape: &Tape<T>, v: Var) -> bool {
    let t = tape.value(v);
    let rows = t.numel() / t.shape()[2];
    (0..rows).all(|r| {
        let n2: f64 = t.row(r).iter().map(|x| x.as_f64() * x.as_f64()).sum();
        (n2.sqrt() - 1.0).abs() < 1e-4 || n2.sqrt() < crate::autodiff::NORMALIZE_EPS
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Teacher,
    Student,
}

/// Off-diagonal pairwise cosine similarities, `[B, N, N-1]`.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityMatrix {
    pub offdiag: Var,
    pub source: Source,
}

/// Row-softmax of off-diagonal similarities, `[B, N, N-1]`.
#[derive(Debug, Clone, Copy)]
pub struct RelationalDistribution {
    pub probs: Var,
    pub temperature: f64,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StructuralVariant {
    #[default]
    Mse,
    Kl,
    None,
}

/// Weights and temperatures of the alignment objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_proj: f64,
    pub lambda_struc: f64,
    pub variant: StructuralVariant,
    pub tau_t: f64,
    pub tau_s: f64,
}

impl LossWeights {
    /// λ_proj = 1, λ_struc = 2 with the Gram MSE variant.
    pub fn mse_default() -> Self {
        LossWeights {
            lambda_proj: 1.0,
            lambda_struc: 2.0,
            variant: StructuralVariant::Mse,
            tau_t: 0.2,
            tau_s: 0.2,
        }
    }

    /// λ_proj = 1, λ_struc = 0.5 with the relational KL variant, τ = 0.2.
    pub fn kl_default() -> Self {
        LossWeights {
            lambda_proj: 1.0,
            lambda_struc: 0.5,
            variant: StructuralVariant::Kl,
            tau_t: 0.2,
            tau_s: 0.2,
        }
    }

    /// Point-wise alignment only.
    pub fn pointwise_only(lambda_proj: f64) -> Self {
        LossWeights {
            lambda_proj,
            lambda_struc: 0.0,
            variant: StructuralVariant::None,
            ..Self::mse_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_proj >= 0.0 && self.lambda_struc >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got lambda_proj={} lambda_struc={}",
                self.lambda_proj, self.lambda_struc
            )));
        }
        if self.variant == StructuralVariant::Kl && !(self.tau_t > 0.0 && self.tau_s > 0.0) {
            return Err(Error::Config(format!(
                "temperatures must be positive, got tau_t={} tau_s={}",
                self.tau_t, self.tau_s
            )));
        }
        Ok(())
    }
}

/// The three scalars of one alignment evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentLossBreakdown {
    pub loss_proj: Var,
    pub loss_struc: Var,
    pub combined: Var,
}

impl AlignmentLossBreakdown {
    /// `(loss_proj, loss_struc, combined)` as plain numbers.
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> (f64, f64, f64) {
        (
            tape.scalar_value(self.loss_proj),
            tape.scalar_value(self.loss_struc),
            tape.scalar_value(self.combined),
        )
    }
}

fn check_pair(op: &'static str, a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.batch != b.batch || a.tokens != b.tokens {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.batch, a.tokens, a.dim],
            right: vec![b.batch, b.tokens, b.dim],
        });
    }
    Ok(())
}

/// Mean over batch and tokens of `1 − ⟨z_s, z_t⟩`.
pub fn pointwise_loss<T: Scalar>(tape: &mut Tape<T>, z_t: &FeatureMap, z_s: &FeatureMap) -> Result<Var> {
    check_pair("pointwise_loss", z_t, z_s)?;
    if !z_t.kind.is_normalized() || !z_s.kind.is_normalized() {
        return Err(Error::InvalidArgument(
            "pointwise_loss expects normalized feature maps".into(),
        ));
    }
    if z_t.dim != z_s.dim {
        return Err(Error::ShapeMismatch {
            op: "pointwise_loss",
            left: vec![z_t.batch, z_t.tokens, z_t.dim],
            right: vec![z_s.batch, z_s.tokens, z_s.dim],
        });
    }
    let teacher = tape.detach(z_t.values);
    let prod = tape.mul(z_s.values, teacher)?;
    let cos = tape.reduce(prod, Reduction::Sum, &[2])?;
    let mean_cos = tape.mean_all(cos);
    Ok(tape.affine(mean_cos, -T::one(), T::one()))
}

/// Gram matrix `Z·Zᵀ` of a normalized map with its diagonal removed.
pub fn gram_offdiag<T: Scalar>(tape: &mut Tape<T>, z: &FeatureMap) -> Result<SimilarityMatrix> {
    if !z.kind.is_normalized() {
        return Err(Error::InvalidArgument(
            "gram_offdiag expects a normalized feature map".into(),
        ));
    }
    if z.tokens < 2 {
        return Err(Error::InvalidArgument(format!(
            "structural losses need at least 2 tokens, got {}",
            z.tokens
        )));
    }
    let gram = tape.batched_matmul(z.values, z.values, true)?;
    gram_from_full(tape, gram, z.kind.is_teacher())
}

/// Off-diagonal extraction of an already computed `[B, N, N]` similarity.
pub fn gram_from_full<T: Scalar>(tape: &mut Tape<T>, gram: Var, teacher: bool) -> Result<SimilarityMatrix> {
    let offdiag = tape.extract_offdiagonal(gram)?;
    Ok(SimilarityMatrix {
        offdiag,
        source: if teacher { Source::Teacher } else { Source::Student },
    })
}

fn detach_teacher<T: Scalar>(tape: &mut Tape<T>, v: Var, source: Source) -> Var {
    match source {
        Source::Teacher => tape.detach(v),
        Source::Student => v,
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (x, y) = (tape.value(a).shape(), tape.value(b).shape());
    if x != y {
        return Err(Error::ShapeMismatch {
            op,
            left: x.to_vec(),
            right: y.to_vec(),
        });
    }
    Ok(())
}

/// Mean squared difference over all off-diagonal entries and the batch.
pub fn struc_mse_loss<T: Scalar>(
    tape: &mut Tape<T>,
    s_t: &SimilarityMatrix,
    s_s: &SimilarityMatrix,
) -> Result<Var> {
    same_shape(tape, "struc_mse_loss", s_t.offdiag, s_s.offdiag)?;
    let a = detach_teacher(tape, s_t.offdiag, s_t.source);
    let b = detach_teacher(tape, s_s.offdiag, s_s.source);
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// Temperature softmax over each token's off-diagonal similarities.
pub fn relational_softmax<T: Scalar>(
    tape: &mut Tape<T>,
    s: &SimilarityMatrix,
    temperature: f64,
) -> Result<RelationalDistribution> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits = detach_teacher(tape, s.offdiag, s.source);
    let probs = tape.row_softmax(logits, T::of(temperature))?;
    Ok(RelationalDistribution {
        probs,
        temperature,
        source: s.source,
    })
}

/// `KL(P_t ‖ P_s)` summed over each token's neighbors and averaged over
/// tokens and batch. The teacher distribution is a constant.
pub fn struc_kl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p_t: &RelationalDistribution,
    p_s: &RelationalDistribution,
) -> Result<Var> {
    same_shape(tape, "struc_kl_loss", p_t.probs, p_s.probs)?;
    let teacher = tape.detach(p_t.probs);
    let tv = tape.value(teacher);
    let rows = (tv.numel() / tv.shape().last().copied().unwrap_or(1)) as f64;
    // Σ P_t log P_t with 0·log 0 = 0
    let neg_entropy: f64 = tv
        .data()
        .iter()
        .map(|p| p.as_f64())
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum();
    let log_s = tape.log(p_s.probs, T::of(KL_LOG_FLOOR));
    let cross = tape.mul(teacher, log_s)?;
    let total_cross = tape.sum_all(cross);
    Ok(tape.affine(total_cross, T::of(-1.0 / rows), T::of(neg_entropy / rows)))
}

/// Full alignment objective for raw teacher features `h_t` and projected
/// student features `h_s`: normalize both, point-wise term, selected
/// structural term, weighted sum.
pub fn total_alignment_loss<T: Scalar>(
    tape: &mut Tape<T>,
    h_t: &FeatureMap,
    h_s: &FeatureMap,
    w: &LossWeights,
) -> Result<AlignmentLossBreakdown> {
    w.validate()?;
    check_pair("total_alignment_loss", h_t, h_s)?;
    if h_t.tokens < 2 {
        return Err(Error::InvalidArgument(format!(
            "alignment needs at least 2 tokens, got {}",
            h_t.tokens
        )));
    }
    let teacher_raw = FeatureMap {
        kind: if h_t.kind.is_normalized() {
            FeatureKind::TeacherNormalized
        } else {
            FeatureKind::TeacherRaw
        },
        values: tape.detach(h_t.values),
        ..*h_t
    };
    let z_t = teacher_raw.normalize(tape);
    let z_s = h_s.normalize(tape);
    let loss_proj =
        pointwise_loss(tape, &z_t, &z_s).map_err(|e| e.context("point-wise alignment"))?;

    let loss_struc = match w.variant {
        StructuralVariant::None => tape.constant(crate::tensor::Tensor::scalar(T::zero())),
        StructuralVariant::Mse => {
            let s_t = gram_offdiag(tape, &z_t)?;
            let s_s = gram_offdiag(tape, &z_s)?;
            struc_mse_loss(tape, &s_t, &s_s).map_err(|e| e.context("structural MSE"))?
        }
        StructuralVariant::Kl => {
            let s_t = gram_offdiag(tape, &z_t)?;
            let s_s = gram_offdiag(tape, &z_s)?;
            let p_t = relational_softmax(tape, &s_t, w.tau_t)?;
            let p_s = relational_softmax(tape, &s_s, w.tau_s)?;
            struc_kl_loss(tape, &p_t, &p_s).map_err(|e| e.context("structural KL"))?
        }
    };

    let proj_term = tape.scale(loss_proj, T::of(w.lambda_proj));
    let struc_term = tape.scale(loss_struc, T::of(w.lambda_struc));
    let combined = tape.add(proj_term, struc_term)?;
    Ok(AlignmentLossBreakdown {
        loss_proj,
        loss_struc,
        combined,
    })
}
