//! The student denoiser, its projection head, and the frozen teacher.
//!
//! The student is a small pre-norm transformer over `N` tokens with additive
//! time and class conditioning. The residual stream after block
//! `align_depth` is tapped and fed to the projection head, whose output is
//! aligned with the teacher's features of the clean input.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sinusoidal frequencies in the time embedding (features = 2×).
pub const TIME_FREQS: usize = 32;
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;
const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub align_depth: usize,
    pub n_tokens: usize,
    pub d_latent: usize,
    pub n_classes: usize,
    pub mlp_ratio: usize,
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.align_depth == 0 || self.align_depth > self.depth {
            return fail(format!(
                "align_depth {} must lie in 1..={}",
                self.align_depth, self.depth
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model < 2 || self.n_tokens == 0 || self.d_latent == 0 || self.mlp_ratio == 0 {
            return fail("model dimensions must be positive (d_model >= 2)".into());
        }
        if self.n_classes == 0 {
            return fail("n_classes must be positive".into());
        }
        Ok(())
    }

    /// Class id reserved for the unconditional pass.
    pub fn null_label(&self) -> usize {
        self.n_classes
    }
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = ParamSet::default();
        for (n, t) in &self.entries {
            out.push(n.clone(), Tensor::zeros(t.shape()));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::default();
        for (n, t) in &self.entries {
            out.push(n.clone(), t.cast());
        }
        out
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// Records every tensor as a differentiable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>) -> Bound<'a, T> {
        let vars = self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        Bound { set: self, vars }
    }

    /// Wraps variables already on a tape, one per parameter in order.
    pub fn bind_vars<'a>(&'a self, vars: &[Var]) -> Result<Bound<'a, T>> {
        if vars.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter variables, got {}",
                self.entries.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            set: self,
            vars: vars.to_vec(),
        })
    }

    /// Records every tensor as a constant (inference).
    pub fn bind_constant<'a>(&'a self, tape: &mut Tape<T>) -> Bound<'a, T> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        Bound { set: self, vars }
    }
}

/// Tape variables for a [`ParamSet`], in the set's order.
pub struct Bound<'a, T: Scalar> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .set
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, p: &Bound<T>, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.w")))?;
    tape.add_broadcast(y, p.get(&format!("{prefix}.b")))
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, p: &Bound<T>, prefix: &str, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.get(&format!("{prefix}.g")), p.get(&format!("{prefix}.b")))
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = crate::tensor::numel(shape);
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::of(z * std)
            })
            .collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }

    fn linear<T: Scalar>(&mut self, set: &mut ParamSet<T>, prefix: &str, fan_in: usize, fan_out: usize) {
        set.push(
            format!("{prefix}.w"),
            self.normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
        );
        set.push(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    fn layer_norm<T: Scalar>(&mut self, set: &mut ParamSet<T>, prefix: &str, d: usize) {
        set.push(format!("{prefix}.g"), Tensor::full(&[d], T::one()));
        set.push(format!("{prefix}.b"), Tensor::zeros(&[d]));
    }
}

#[derive(Debug, Clone)]
pub struct StudentNetwork<T: Scalar = f32> {
    pub config: StudentConfig,
    pub params: ParamSet<T>,
}

/// Variables produced by one student forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StudentOutput {
    /// `[B, N, d_latent]`
    pub velocity: Var,
    /// Residual stream after block `align_depth`, `[B, N, d_model]`.
    pub hidden: Var,
    /// Residual stream after the last block, before the final norm.
    pub final_stream: Var,
}

/// Sinusoidal features of `t`, `[B, 2·TIME_FREQS]`.
pub fn time_features<T: Scalar>(t: &[T]) -> Tensor<T> {
    let mut data = Vec::with_capacity(t.len() * 2 * TIME_FREQS);
    for &ti in t {
        let ts = ti.as_f64() * TIME_SCALE;
        let freqs = (0..TIME_FREQS).map(|k| (-(MAX_PERIOD.ln()) * k as f64 / TIME_FREQS as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ts * f).collect();
        data.extend(args.iter().map(|a| T::of(a.cos())));
        data.extend(args.iter().map(|a| T::of(a.sin())));
    }
    Tensor::new(&[t.len(), 2 * TIME_FREQS], data).expect("time feature shape")
}

impl<T: Scalar> StudentNetwork<T> {
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<T>,
        xt: Var,
        t: &[T],
        labels: &[usize],
    ) -> Result<StudentOutput> {
        let c = &self.config;
        let shape = tape.value(xt).shape().to_vec();
        if shape.len() != 3 || shape[1] != c.n_tokens || shape[2] != c.d_latent {
            return Err(Error::InvalidShape {
                op: "student_forward",
                shape,
                reason: format!("expected [B, {}, {}]", c.n_tokens, c.d_latent),
            });
        }
        let b = shape[0];
        if t.len() != b || labels.len() != b {
            return Err(Error::InvalidArgument(format!(
                "batch {b} with {} times and {} labels",
                t.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > c.null_label()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range (null id is {})",
                c.null_label()
            )));
        }

        let mut h = linear(tape, p, "embed", xt)?;
        h = tape.add_broadcast(h, p.get("pos"))?;

        let tf = tape.constant(time_features(t));
        let te = linear(tape, p, "time.l1", tf)?;
        let te = tape.activation(te, Activation::Silu);
        let te = linear(tape, p, "time.l2", te)?;
        let ce = tape.gather_rows(p.get("class"), labels)?;
        let cond = tape.add(te, ce)?;
        let cond = tape.expand_middle(cond, c.n_tokens)?;
        h = tape.add(h, cond)?;

        let mut hidden = None;
        for i in 0..c.depth {
            h = self.block(tape, p, i, h, b)?;
            if i + 1 == c.align_depth {
                hidden = Some(h);
            }
        }
        let final_stream = h;
        let out = layer_norm(tape, p, "final_ln", h)?;
        let velocity = linear(tape, p, "head", out)?;
        Ok(StudentOutput {
            velocity,
            hidden: hidden.expect("align_depth validated"),
            final_stream,
        })
    }

    fn block(&self, tape: &mut Tape<T>, p: &Bound<T>, i: usize, x: Var, b: usize) -> Result<Var> {
        let c = &self.config;
        let (n, d, heads) = (c.n_tokens, c.d_model, c.heads);
        let dh = d / heads;
        let pre = format!("blocks.{i}");

        let a = layer_norm(tape, p, &format!("{pre}.ln1"), x)?;
        let split = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
            let v = linear(tape, p, &format!("{pre}.attn.{name}"), a)?;
            let v = tape.reshape(v, &[b, n, heads, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, &[b * heads, n, dh])
        };
        let q = split(tape, "q")?;
        let k = split(tape, "k")?;
        let v = split(tape, "v")?;
        let scores = tape.batched_matmul(q, k, true)?;
        let attn = tape.row_softmax(scores, T::of((dh as f64).sqrt()))?;
        let ctx = tape.batched_matmul(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[b, heads, n, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        let attn_out = linear(tape, p, &format!("{pre}.attn.o"), ctx)?;
        let x = tape.add(x, attn_out)?;

        let m = layer_norm(tape, p, &format!("{pre}.ln2"), x)?;
        let m = linear(tape, p, &format!("{pre}.mlp.l1"), m)?;
        let m = tape.activation(m, Activation::Gelu);
        let m = linear(tape, p, &format!("{pre}.mlp.l2"), m)?;
        tape.add(x, m)
    }

    /// Inference-only velocity (no gradient recording of parameters).
    pub fn velocity(&self, x: &Tensor<T>, t: &[T], labels: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv, t, labels)?;
        Ok(tape.value(out.velocity).clone())
    }
}

/// Three affine layers with SiLU between them, applied per token.
#[derive(Debug, Clone)]
pub struct ProjectionHead<T: Scalar = f32> {
    pub d_in: usize,
    pub d_out: usize,
    pub params: ParamSet<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound<T>, hidden: Var) -> Result<Var> {
        let shape = tape.value(hidden).shape();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::InvalidShape {
                op: "projector_forward",
                shape: shape.to_vec(),
                reason: format!("last axis must be {}", self.d_in),
            });
        }
        let h = linear(tape, p, "proj.l1", hidden)?;
        let h = tape.activation(h, Activation::Silu);
        let h = linear(tape, p, "proj.l2", h)?;
        let h = tape.activation(h, Activation::Silu);
        linear(tape, p, "proj.l3", h)
    }
}

/// Seeded initialization of the student and its projection head.
/// Linear weights ~ N(0, 1/fan_in), biases zero, embeddings N(0, 0.02²),
/// and a zero output head so the initial velocity is identically zero.
pub fn init_params<T: Scalar>(
    config: &StudentConfig,
    d_teacher: usize,
    seed: u64,
) -> Result<(StudentNetwork<T>, ProjectionHead<T>)> {
    config.validate()?;
    if d_teacher == 0 {
        return Err(Error::Config("teacher width must be positive".into()));
    }
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let c = config;
    let d = c.d_model;
    let mut s = ParamSet::default();
    init.linear(&mut s, "embed", c.d_latent, d);
    s.push("pos", init.normal(&[c.n_tokens, d], EMBED_STD));
    init.linear(&mut s, "time.l1", 2 * TIME_FREQS, d);
    init.linear(&mut s, "time.l2", d, d);
    s.push("class", init.normal(&[c.n_classes + 1, d], EMBED_STD));
    for i in 0..c.depth {
        let pre = format!("blocks.{i}");
        init.layer_norm(&mut s, &format!("{pre}.ln1"), d);
        for name in ["q", "k", "v", "o"] {
            init.linear(&mut s, &format!("{pre}.attn.{name}"), d, d);
        }
        init.layer_norm(&mut s, &format!("{pre}.ln2"), d);
        init.linear(&mut s, &format!("{pre}.mlp.l1"), d, d * c.mlp_ratio);
        init.linear(&mut s, &format!("{pre}.mlp.l2"), d * c.mlp_ratio, d);
    }
    init.layer_norm(&mut s, "final_ln", d);
    s.push("head.w", Tensor::zeros(&[d, c.d_latent]));
    s.push("head.b", Tensor::zeros(&[c.d_latent]));

    let mut pset = ParamSet::default();
    init.linear(&mut pset, "proj.l1", d, d);
    init.linear(&mut pset, "proj.l2", d, d);
    init.linear(&mut pset, "proj.l3", d, d_teacher);

    Ok((
        StudentNetwork {
            config: *config,
            params: s,
        },
        ProjectionHead {
            d_in: d,
            d_out: d_teacher,
            params: pset,
        },
    ))
}

/// Frozen, seed-deterministic feature encoder over a `G×G` token grid:
/// orthonormal per-token projection, 4-neighbor mixing, then `tanh`.
#[derive(Debug, Clone)]
pub struct TeacherEncoder {
    pub seed: u64,
    pub grid: usize,
    pub d_patch: usize,
    pub dim: usize,
    projection: Vec<f64>,
    stencil: Vec<Vec<(usize, f64)>>,
}

impl TeacherEncoder {
    pub fn new(seed: u64, grid: usize, d_patch: usize, dim: usize) -> Result<Self> {
        if grid == 0 || dim == 0 || dim > d_patch {
            return Err(Error::Config(format!(
                "teacher width {dim} must lie in 1..={d_patch} (orthonormal columns)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // columns of a d_patch × dim matrix, orthonormalized by modified Gram-Schmidt
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while cols.len() < dim {
            let mut v: Vec<f64> = (0..d_patch).map(|_| StandardNormal.sample(&mut rng)).collect();
            for u in &cols {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|a| *a /= norm);
                cols.push(v);
            }
        }
        let mut projection = vec![0.0; d_patch * dim];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                projection[i * dim + j] = v;
            }
        }
        let stencil = (0..grid * grid)
            .map(|k| {
                let (r, c) = ((k / grid) as isize, (k % grid) as isize);
                let nbrs: Vec<usize> = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .map(|(dr, dc)| (r + dr, c + dc))
                    .filter(|&(rr, cc)| rr >= 0 && cc >= 0 && rr < grid as isize && cc < grid as isize)
                    .map(|(rr, cc)| rr as usize * grid + cc as usize)
                    .collect();
                let mut w = vec![(k, 0.5)];
                let share = 0.5 / nbrs.len().max(1) as f64;
                if nbrs.is_empty() {
                    w[0].1 = 1.0;
                }
                w.extend(nbrs.into_iter().map(|n| (n, share)));
                w
            })
            .collect();
        Ok(TeacherEncoder {
            seed,
            grid,
            d_patch,
            dim,
            projection,
            stencil,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Features `[B, N, dim]` of clean tokens `[B, N, d_patch]`.
    pub fn encode<T: Scalar>(&self, x1: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x1.shape();
        let n = self.n_tokens();
        if s.len() != 3 || s[1] != n || s[2] != self.d_patch {
            return Err(Error::InvalidShape {
                op: "teacher_encode",
                shape: s.to_vec(),
                reason: format!("expected [B, {n}, {}]", self.d_patch),
            });
        }
        let b = s[0];
        let mut out = Vec::with_capacity(b * n * self.dim);
        let mut projected = vec![0.0f64; n * self.dim];
        for img in x1.data().chunks(n * self.d_patch) {
            for k in 0..n {
                let tok = &img[k * self.d_patch..(k + 1) * self.d_patch];
                for j in 0..self.dim {
                    projected[k * self.dim + j] = tok
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v.as_f64() * self.projection[i * self.dim + j])
                        .sum();
                }
            }
            for k in 0..n {
                for j in 0..self.dim {
                    let mixed: f64 = self.stencil[k]
                        .iter()
                        .map(|&(src, w)| w * projected[src * self.dim + j])
                        .sum();
                    out.push(T::of(mixed.tanh()));
                }
            }
        }
        Tensor::new(&[b, n, self.dim], out)
    }
}
