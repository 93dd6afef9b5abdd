//! Finite-difference verification of every differentiable operation and
//! every composed loss, in 64-bit arithmetic.
//!
//! Each case draws seeded random instances with `N` cycling through
//! `2..=5` tokens and reduces the result to a scalar by a fixed random
//! weighting, so every output coordinate contributes to the check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{
    gram_offdiag, pointwise_loss, relational_softmax, struc_kl_loss, struc_mse_loss, total_alignment_loss,
    FeatureKind, FeatureMap, LossWeights,
};
use crate::autodiff::{grad_check, Activation, Reduction, Tape, Var};
use crate::error::Result;
use crate::flow::{fm_loss, total_training_loss};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_INSTANCES: usize = 10;
pub const TOKEN_COUNTS: [usize; 4] = [2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tol: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            instances: DEFAULT_INSTANCES,
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
        }
    }
}

/// Worst result of one case over all its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub diagnostic: Option<String>,
}

type Objective = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Instance {
    inputs: Vec<Tensor<f64>>,
    f: Objective,
}

struct Case {
    name: &'static str,
    build: fn(&mut ChaCha8Rng, usize) -> Instance,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = crate::tensor::numel(shape);
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn entries(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    crate::flow::gaussian_from(shape, rng)
}

/// `Σ y ⊙ w` for a constant weighting `w`.
fn weighted(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = tape.constant(w.clone());
    let m = tape.mul(y, c)?;
    Ok(tape.sum_all(m))
}

/// Unary op on one input with a weighted-sum readout.
fn unary(
    rng: &mut ChaCha8Rng,
    input: Tensor<f64>,
    out_shape: &[usize],
    op: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
) -> Instance {
    let w = normal(rng, out_shape);
    Instance {
        inputs: vec![input],
        f: Box::new(move |t, v| {
            let y = op(t, v[0])?;
            weighted(t, y, &w)
        }),
    }
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: Tensor<f64>,
    b: Tensor<f64>,
    out_shape: &[usize],
    op: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var> + 'static,
) -> Instance {
    let w = normal(rng, out_shape);
    Instance {
        inputs: vec![a, b],
        f: Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            weighted(t, y, &w)
        }),
    }
}

/// Random token features whose rows have norms in `[0.8, 1]`. Near-zero
/// rows would make normalization so curved that a step of 1e-3 measures
/// truncation error rather than gradient error.
fn features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let mut x = normal(rng, &[2, n, d]);
    for row in x.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let target: f64 = rng.random_range(0.8..1.0);
        row.iter_mut().for_each(|v| *v *= target / norm);
    }
    x
}

/// Teacher and student features sharing a width drawn from 2..=4.
fn feature_pair(rng: &mut ChaCha8Rng, n: usize) -> (Tensor<f64>, Tensor<f64>) {
    let d = rng.random_range(2..=4);
    (features(rng, n, d), features(rng, n, d))
}

fn normalized_maps(t: &mut Tape<f64>, v: &[Var]) -> Result<(FeatureMap, FeatureMap)> {
    let ht = FeatureMap::new(t, v[0], FeatureKind::StudentRaw)?;
    let hs = FeatureMap::new(t, v[1], FeatureKind::StudentRaw)?;
    Ok((ht.normalize(t), hs.normalize(t)))
}

fn alignment_case(rng: &mut ChaCha8Rng, n: usize, w: LossWeights, with_fm: bool) -> Instance {
    let (teacher, student) = feature_pair(rng, n);
    let mut inputs = vec![student];
    if with_fm {
        inputs.push(entries(rng, &[2, n, 4]));
    }
    let x0 = entries(rng, &[2, n, 4]);
    let x1 = entries(rng, &[2, n, 4]);
    Instance {
        inputs,
        f: Box::new(move |t, v| {
            let tv = t.constant(teacher.clone());
            let ht = FeatureMap::new(t, tv, FeatureKind::TeacherRaw)?;
            let hs = FeatureMap::new(t, v[0], FeatureKind::StudentRaw)?;
            let align = total_alignment_loss(t, &ht, &hs, &w)?;
            if with_fm {
                let fm = fm_loss(t, v[1], &x0, &x1)?;
                total_training_loss(t, fm, &align)
            } else {
                Ok(align.combined)
            }
        }),
    }
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            build: |r, n| {
                let (a, b) = (entries(r, &[2, n, 3]), entries(r, &[2, n, 3]));
                binary(r, a, b, &[2, n, 3], |t, x, y| t.add(x, y))
            },
        },
        Case {
            name: "sub",
            build: |r, n| {
                let (a, b) = (entries(r, &[2, n, 3]), entries(r, &[2, n, 3]));
                binary(r, a, b, &[2, n, 3], |t, x, y| t.sub(x, y))
            },
        },
        Case {
            name: "mul",
            build: |r, n| {
                let (a, b) = (entries(r, &[2, n, 3]), entries(r, &[2, n, 3]));
                binary(r, a, b, &[2, n, 3], |t, x, y| t.mul(x, y))
            },
        },
        Case {
            name: "affine",
            build: |r, n| {
                let x = entries(r, &[2, n, 3]);
                unary(r, x, &[2, n, 3], |t, v| Ok(t.affine(v, -1.7, 0.3)))
            },
        },
        Case {
            name: "add_broadcast",
            build: |r, n| {
                let (a, b) = (entries(r, &[2, n, 3]), entries(r, &[n, 3]));
                binary(r, a, b, &[2, n, 3], |t, x, y| t.add_broadcast(x, y))
            },
        },
        Case {
            name: "matmul",
            build: |r, n| {
                let (a, b) = (entries(r, &[2, n, 3]), entries(r, &[3, 4]));
                binary(r, a, b, &[2, n, 4], |t, x, y| t.matmul(x, y))
            },
        },
        Case {
            name: "batched_matmul",
            build: |r, n| {
                let (a, b) = (entries(r, &[2, n, 3]), entries(r, &[2, 3, 4]));
                binary(r, a, b, &[2, n, 4], |t, x, y| t.batched_matmul(x, y, false))
            },
        },
        Case {
            name: "batched_matmul_transposed",
            build: |r, n| {
                let (a, b) = (entries(r, &[2, n, 3]), entries(r, &[2, n, 3]));
                binary(r, a, b, &[2, n, n], |t, x, y| t.batched_matmul(x, y, true))
            },
        },
        Case {
            name: "permute",
            build: |r, n| {
                let x = entries(r, &[2, n, 3]);
                unary(r, x, &[3, 2, n], |t, v| t.permute(v, &[2, 0, 1]))
            },
        },
        Case {
            name: "reshape",
            build: |r, n| {
                let x = entries(r, &[2, n, 3]);
                unary(r, x, &[2 * n, 3], move |t, v| t.reshape(v, &[2 * n, 3]))
            },
        },
        Case {
            name: "silu",
            build: |r, n| {
                let x = entries(r, &[2, n, 3]);
                unary(r, x, &[2, n, 3], |t, v| Ok(t.activation(v, Activation::Silu)))
            },
        },
        Case {
            name: "gelu",
            build: |r, n| {
                let x = entries(r, &[2, n, 3]);
                unary(r, x, &[2, n, 3], |t, v| Ok(t.activation(v, Activation::Gelu)))
            },
        },
        Case {
            name: "tanh",
            build: |r, n| {
                let x = entries(r, &[2, n, 3]);
                unary(r, x, &[2, n, 3], |t, v| Ok(t.activation(v, Activation::Tanh)))
            },
        },
        Case {
            name: "log",
            build: |r, n| {
                let x = uniform(r, &[2, n, 3], 0.2, 2.0);
                unary(r, x, &[2, n, 3], |t, v| Ok(t.log(v, 1e-12)))
            },
        },
        Case {
            name: "row_softmax",
            build: |r, n| {
                let x = entries(r, &[2, n, n]);
                unary(r, x, &[2, n, n], |t, v| t.row_softmax(v, 0.7))
            },
        },
        Case {
            name: "row_l2_normalize",
            build: |r, n| {
                let x = features(r, n, 3);
                unary(r, x, &[2, n, 3], |t, v| Ok(t.row_l2_normalize(v)))
            },
        },
        Case {
            name: "layer_norm",
            build: |r, n| {
                // rows with spread well above the epsilon keep the
                // curvature (and so the h² truncation error) moderate
                let x = normal(r, &[2, n, 6]).scale(2.0);
                let g = uniform(r, &[6], 0.5, 1.5);
                let b = normal(r, &[6]);
                let w = normal(r, &[2, n, 6]);
                Instance {
                    inputs: vec![x, g, b],
                    f: Box::new(move |t, v| {
                        let y = t.layer_norm(v[0], v[1], v[2])?;
                        weighted(t, y, &w)
                    }),
                }
            },
        },
        Case {
            name: "reduce_sum",
            build: |r, n| {
                let x = entries(r, &[2, n, 3]);
                unary(r, x, &[2, 3], |t, v| t.reduce(v, Reduction::Sum, &[1]))
            },
        },
        Case {
            name: "reduce_mean",
            build: |r, n| {
                let x = entries(r, &[2, n, 3]);
                unary(r, x, &[n], |t, v| t.reduce(v, Reduction::Mean, &[0, 2]))
            },
        },
        Case {
            name: "extract_offdiagonal",
            build: |r, n| {
                let x = entries(r, &[2, n, n]);
                unary(r, x, &[2, n, n - 1], |t, v| t.extract_offdiagonal(v))
            },
        },
        Case {
            name: "gather_rows",
            build: |r, n| {
                let x = entries(r, &[n, 3]);
                let ids: Vec<usize> = (0..4).map(|_| r.random_range(0..n)).collect();
                unary(r, x, &[4, 3], move |t, v| t.gather_rows(v, &ids))
            },
        },
        Case {
            name: "expand_middle",
            build: |r, n| {
                let x = entries(r, &[2, 3]);
                unary(r, x, &[2, n, 3], move |t, v| t.expand_middle(v, n))
            },
        },
        Case {
            name: "fm_loss",
            build: |r, n| {
                let v = entries(r, &[2, n, 4]);
                let x0 = entries(r, &[2, n, 4]);
                let x1 = entries(r, &[2, n, 4]);
                Instance {
                    inputs: vec![v],
                    f: Box::new(move |t, vars| fm_loss(t, vars[0], &x0, &x1)),
                }
            },
        },
        Case {
            name: "pointwise_loss",
            build: |r, n| {
                let (teacher, student) = feature_pair(r, n);
                Instance {
                    inputs: vec![student],
                    f: Box::new(move |t, v| {
                        let tv = t.constant(teacher.clone());
                        let zt = FeatureMap::new(t, tv, FeatureKind::TeacherRaw)?.normalize(t);
                        let zs = FeatureMap::new(t, v[0], FeatureKind::StudentRaw)?.normalize(t);
                        pointwise_loss(t, &zt, &zs)
                    }),
                }
            },
        },
        Case {
            name: "struc_mse_loss",
            build: |r, n| {
                let (a, b) = feature_pair(r, n);
                Instance {
                    inputs: vec![a, b],
                    f: Box::new(|t, v| {
                        let (za, zb) = normalized_maps(t, v)?;
                        let (sa, sb) = (gram_offdiag(t, &za)?, gram_offdiag(t, &zb)?);
                        struc_mse_loss(t, &sa, &sb)
                    }),
                }
            },
        },
        Case {
            name: "struc_kl_loss",
            build: |r, n| {
                let (teacher, student) = feature_pair(r, n);
                let (tau_t, tau_s) = (r.random_range(0.1..0.6), r.random_range(0.1..0.6));
                Instance {
                    inputs: vec![student],
                    f: Box::new(move |t, v| {
                        let tv = t.constant(teacher.clone());
                        let za = FeatureMap::new(t, tv, FeatureKind::TeacherRaw)?.normalize(t);
                        let zb = FeatureMap::new(t, v[0], FeatureKind::StudentRaw)?.normalize(t);
                        let (sa, sb) = (gram_offdiag(t, &za)?, gram_offdiag(t, &zb)?);
                        let pa = relational_softmax(t, &sa, tau_t)?;
                        let pb = relational_softmax(t, &sb, tau_s)?;
                        struc_kl_loss(t, &pa, &pb)
                    }),
                }
            },
        },
        Case {
            name: "total_alignment_mse",
            build: |r, n| alignment_case(r, n, LossWeights::mse_default(), false),
        },
        Case {
            name: "total_alignment_kl",
            build: |r, n| alignment_case(r, n, LossWeights::kl_default(), false),
        },
        Case {
            name: "total_training_mse",
            build: |r, n| alignment_case(r, n, LossWeights::mse_default(), true),
        },
        Case {
            name: "total_training_kl",
            build: |r, n| alignment_case(r, n, LossWeights::kl_default(), true),
        },
    ]
}

/// Names of all cases, in execution order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every case on `cfg.instances` seeded instances.
pub fn run_suite(cfg: &SuiteConfig) -> Vec<CaseResult> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(ci, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(ci as u64);
            let mut worst = 0.0f64;
            let mut diagnostic = None;
            let mut passed = cfg.instances > 0;
            for i in 0..cfg.instances {
                let n = TOKEN_COUNTS[i % TOKEN_COUNTS.len()];
                let inst = (case.build)(&mut rng, n);
                let report = grad_check(case.name, |t, v| (inst.f)(t, v), &inst.inputs, cfg.step, cfg.tol);
                if !report.passed {
                    passed = false;
                    if diagnostic.is_none() {
                        diagnostic = Some(format!(
                            "instance {i} (N={n}): {}",
                            report.diagnostic.as_deref().unwrap_or("check failed")
                        ));
                    }
                }
                worst = worst.max(report.max_rel_error);
            }
            CaseResult {
                name: case.name,
                instances: cfg.instances,
                max_rel_error: worst,
                passed,
                diagnostic,
            }
        })
        .collect()
}
