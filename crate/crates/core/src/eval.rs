//! Evaluation in the teacher's feature space: Fréchet distance between
//! pooled feature statistics, Gram discrepancy between student and teacher
//! token similarities, and similarity-map export as PGM images.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{gram_offdiag, struc_mse_loss, FeatureKind, FeatureMap};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{euler_sample, gaussian, interpolate, SamplerConfig};
use crate::nets::{ProjectionHead, StudentNetwork, TeacherEncoder};
use crate::tensor::Tensor;
use crate::train::{build_teacher, Checkpoint, TrainConfig};

pub const JACOBI_TOL: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const MAX_EIG_DIM: usize = 256;
/// Noise levels at which the Gram discrepancy is measured.
pub const EVAL_TIMES: [f32; 3] = [0.25, 0.5, 0.75];
const EVAL_CHUNK: usize = 64;

/// Square `n × n` matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "{} entries do not form a {n}×{n} matrix",
                data.len()
            )));
        }
        Ok(Matrix { n, data })
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n);
        (0..n).for_each(|i| m.data[i * n + i] = 1.0);
        m
    }

    pub fn zeros(n: usize) -> Matrix {
        Matrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.at(i, k);
                for j in 0..n {
                    out.data[i * n + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((self.at(i, j) - self.at(j, i)).abs());
            }
        }
        worst
    }

    fn symmetrized(&self) -> Matrix {
        let n = self.n;
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = 0.5 * (self.at(i, j) + self.at(j, i));
            }
        }
        out
    }
}

/// Eigen-decomposition `M = V·diag(values)·Vᵀ`; column `k` of `vectors`
/// pairs with `values[k]`.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl Eigen {
    /// `V·diag(f(λ))·Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.vectors.n;
        let mut out = Matrix::zeros(n);
        for k in 0..n {
            let lam = f(self.values[k]);
            for i in 0..n {
                let a = self.vectors.at(i, k) * lam;
                for j in 0..n {
                    out.data[i * n + j] += a * self.vectors.at(j, k);
                }
            }
        }
        out
    }
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
pub fn symmetric_eig(m: &Matrix) -> Result<Eigen> {
    let n = m.n;
    if n == 0 || n > MAX_EIG_DIM {
        return Err(Error::InvalidArgument(format!(
            "eigensolver supports 1..={MAX_EIG_DIM} rows, got {n}"
        )));
    }
    if !m.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("eigensolver input".into()));
    }
    let asym = m.asymmetry();
    if asym > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let mut a = m.symmetrized();
    let mut v = Matrix::identity(n);
    let off = |a: &Matrix| {
        let mut w: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                w = w.max(a.at(i, j).abs());
            }
        }
        w
    };
    let mut sweeps = 0;
    while off(&a) >= JACOBI_TOL {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps (max off-diagonal {:e})",
                off(&a)
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.at(k, p), a.at(k, q));
                    a.data[k * n + p] = c * akp - s * akq;
                    a.data[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a.at(p, k), a.at(q, k));
                    a.data[p * n + k] = c * apk - s * aqk;
                    a.data[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.at(k, p), v.at(k, q));
                    v.data[k * n + p] = c * vkp - s * vkq;
                    v.data[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = Eigen {
        values: (0..n).map(|i| a.at(i, i)).collect(),
        vectors: v,
    };
    let rebuilt = eig.reconstruct_with(|x| x);
    let scale = m.data.iter().fold(1.0f64, |s, x| s.max(x.abs()));
    let residual = rebuilt
        .data
        .iter()
        .zip(&m.data)
        .fold(0.0f64, |r, (x, y)| r.max((x - y).abs()));
    if residual >= 1e-6 * scale {
        return Err(Error::Numerical(format!(
            "eigen reconstruction residual {residual:e} exceeds tolerance"
        )));
    }
    Ok(eig)
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues (rounding noise) are clamped at zero.
pub fn sqrt_psd(m: &Matrix) -> Result<Matrix> {
    Ok(symmetric_eig(m)?.reconstruct_with(|x| x.max(0.0).sqrt()))
}

/// Sample mean and unbiased covariance of per-image descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub count: usize,
}

pub fn feature_stats(descriptors: &[Vec<f64>]) -> Result<FrechetStats> {
    if descriptors.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "feature statistics need at least 2 images, got {}",
            descriptors.len()
        )));
    }
    let d = descriptors[0].len();
    if d == 0 || descriptors.iter().any(|x| x.len() != d) {
        return Err(Error::InvalidArgument("descriptors must share a positive width".into()));
    }
    let n = descriptors.len() as f64;
    let mut mean = vec![0.0; d];
    for x in descriptors {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = Matrix::zeros(d);
    for x in descriptors {
        for i in 0..d {
            let di = x[i] - mean[i];
            for j in 0..d {
                cov.data[i * d + j] += di * (x[j] - mean[j]);
            }
        }
    }
    cov.data.iter_mut().for_each(|c| *c /= n - 1.0);
    Ok(FrechetStats {
        mean,
        covariance: cov,
        count: descriptors.len(),
    })
}

/// Token-mean descriptor of every image in features `[B, N, D]`.
pub fn pooled_descriptors(features: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            op: "pooled_descriptors",
            shape: s.to_vec(),
            reason: "expected [B, N, D]".into(),
        });
    }
    let (n, d) = (s[1], s[2]);
    Ok(features
        .data()
        .chunks(n * d)
        .map(|img| {
            let mut acc = vec![0.0f64; d];
            for tok in img.chunks(d) {
                acc.iter_mut().zip(tok).for_each(|(a, &v)| *a += v as f64);
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
            acc
        })
        .collect())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2·(Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            left: vec![a.mean.len()],
            right: vec![b.mean.len()],
        });
    }
    let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let ra = sqrt_psd(&a.covariance)?;
    let inner = ra.mul(&b.covariance).mul(&ra).symmetrized();
    let cross = sqrt_psd(&inner)?.trace();
    let d = dmu + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Gram discrepancy of projected student features against teacher
/// features of the same clean tokens, averaged over images and the
/// evaluation times. `student_features(xt, t, labels)` returns projected
/// student features `[B, N, D_T]`; the noise is drawn once from `seed` and
/// shared by all times.
pub fn gram_discrepancy_with<F>(
    teacher: &TeacherEncoder,
    x1: &Tensor<f32>,
    labels: &[usize],
    times: &[f32],
    seed: u64,
    mut student_features: F,
) -> Result<f64>
where
    F: FnMut(&Tensor<f32>, &[f32], &[usize]) -> Result<Tensor<f32>>,
{
    let b = x1.shape().first().copied().unwrap_or(0);
    if b == 0 || times.is_empty() || labels.len() != b {
        return Err(Error::InvalidArgument(
            "gram discrepancy needs a nonempty evaluation set, labels and times".into(),
        ));
    }
    let x0 = gaussian::<f32>(x1.shape(), seed);
    let mut total = 0.0;
    for &t in times {
        for start in (0..b).step_by(EVAL_CHUNK) {
            let len = EVAL_CHUNK.min(b - start);
            let x1c = x1.narrow_leading(start, len)?;
            let x0c = x0.narrow_leading(start, len)?;
            let xt = interpolate(&x0c, &x1c, &vec![t; len])?;
            let zs = student_features(&xt, &vec![t; len], &labels[start..start + len])?;
            let ht = teacher.encode(&x1c)?;
            total += batch_struc_mse(&ht, &zs)? * len as f64;
        }
    }
    Ok(total / (b * times.len()) as f64)
}

/// Structural MSE between raw teacher and student features `[B, N, D]`.
pub fn batch_struc_mse(teacher: &Tensor<f32>, student: &Tensor<f32>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let t = tape.constant(teacher.cast());
    let s = tape.constant(student.cast());
    let ft = FeatureMap::new(&mut tape, t, FeatureKind::TeacherRaw)?.normalize(&mut tape);
    let fs = FeatureMap::new(&mut tape, s, FeatureKind::StudentRaw)?.normalize(&mut tape);
    let gt = gram_offdiag(&mut tape, &ft)?;
    let gs = gram_offdiag(&mut tape, &fs)?;
    let l = struc_mse_loss(&mut tape, &gt, &gs)?;
    Ok(tape.scalar_value(l))
}

/// Projected features of `student` at the alignment tap.
pub fn projected_features(
    student: &StudentNetwork<f32>,
    projector: &ProjectionHead<f32>,
    xt: &Tensor<f32>,
    t: &[f32],
    labels: &[usize],
) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let sp = student.params.bind_constant(&mut tape);
    let pp = projector.params.bind_constant(&mut tape);
    let x = tape.constant(xt.clone());
    let out = student.forward(&mut tape, &sp, x, t, labels)?;
    let z = projector.forward(&mut tape, &pp, out.hidden)?;
    Ok(tape.value(z).clone())
}

/// Networks restored from a checkpoint for evaluation: the EMA student,
/// the live projector, and the teacher.
pub struct EvalModels {
    pub config: TrainConfig,
    pub student: StudentNetwork<f32>,
    pub projector: ProjectionHead<f32>,
    pub teacher: TeacherEncoder,
}

impl EvalModels {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<EvalModels> {
        let config = ckpt.config.clone();
        let (mut student, mut projector) = crate::nets::init_params::<f32>(
            &config.student_config(),
            config.model.teacher_dim,
            config.model.init_seed,
        )?;
        if !student.params.same_layout(&ckpt.ema) || !projector.params.same_layout(&ckpt.projector) {
            return Err(Error::Config("checkpoint tensors do not match its configuration".into()));
        }
        student.params = ckpt.ema.clone();
        projector.params = ckpt.projector.clone();
        Ok(EvalModels {
            teacher: build_teacher(&config)?,
            config,
            student,
            projector,
        })
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let c = &self.config.data;
        if data.grid != c.grid || data.patch != c.patch || data.n_classes != c.n_classes {
            return Err(Error::Config(format!(
                "dataset geometry (G={}, P={}, classes={}) differs from the model's (G={}, P={}, classes={})",
                data.grid, data.patch, data.n_classes, c.grid, c.patch, c.n_classes
            )));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("evaluation set is empty".into()));
        }
        Ok(())
    }

    pub fn gram_discrepancy(&self, data: &Dataset, seed: u64) -> Result<f64> {
        self.check_data(data)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let (x1, labels) = data.batch(&idx)?;
        gram_discrepancy_with(&self.teacher, &x1, &labels, &EVAL_TIMES, seed, |xt, t, l| {
            projected_features(&self.student, &self.projector, xt, t, l)
        })
    }

    /// Generates `labels.len()` token images with the EMA student.
    pub fn sample(&self, labels: &[usize], cfg: &SamplerConfig) -> Result<Tensor<f32>> {
        let sc = self.student.config;
        if let Some(bad) = labels.iter().find(|&&l| l >= sc.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "class {bad} out of range 0..{}",
                sc.n_classes
            )));
        }
        let mut out = Vec::with_capacity(labels.len());
        for chunk in labels.chunks(EVAL_CHUNK) {
            let seed = cfg.seed.wrapping_add(out.len() as u64);
            let part = euler_sample(
                |x, t, l| self.student.velocity(x, t, l),
                chunk,
                sc.null_label(),
                &[sc.n_tokens, sc.d_latent],
                &SamplerConfig { seed, ..*cfg },
            )?;
            out.push(part);
        }
        Tensor::stack_leading(&out)
    }

    /// Teacher-space Fréchet distance between generated and real images.
    /// Generation is class-balanced with as many samples as `data` holds.
    pub fn frechet(&self, data: &Dataset, cfg: &SamplerConfig) -> Result<f64> {
        self.check_data(data)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let (x1, _) = data.batch(&idx)?;
        let real = feature_stats(&pooled_descriptors(&self.teacher.encode(&x1)?)?)?;
        let labels: Vec<usize> = (0..data.len()).map(|i| i % data.n_classes).collect();
        let generated = self.sample(&labels, cfg)?;
        let fake = feature_stats(&pooled_descriptors(&self.teacher.encode(&generated)?)?)?;
        frechet_distance(&fake, &real)
    }

    /// Both metrics on the first `train.eval_images` images of `data`.
    /// `label` names the evaluation set in the report.
    pub fn report(&self, data: &Dataset, label: &str, seed: u64) -> Result<EvalReport> {
        let cfg = SamplerConfig {
            steps: self.config.train.sample_steps,
            cfg_scale: self.config.train.cfg_scale,
            seed,
        };
        let subset = data.head(self.config.train.eval_images);
        Ok(EvalReport {
            frechet: self.frechet(&subset, &cfg)?,
            gram_discrepancy: self.gram_discrepancy(&subset, seed)?,
            feature_space: "teacher".into(),
            eval_data: label.to_string(),
            eval_images: subset.len(),
            config_echo: self.config.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frechet: f64,
    pub gram_discrepancy: f64,
    pub feature_space: String,
    pub eval_data: String,
    pub eval_images: usize,
    pub config_echo: TrainConfig,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Gray level of a value in `[-1, 1]`: `round((v + 1)·127.5)`, clamped.
pub fn gray_level(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Cosine similarity of token `anchor` with every token of `features`
/// `[N, D]`, using the same normalization as the alignment losses.
pub fn similarity_row(features: &Tensor<f32>, anchor: usize) -> Result<Vec<f64>> {
    let s = features.shape();
    if s.len() != 2 || anchor >= s[0] {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor} invalid for features of shape {s:?}"
        )));
    }
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(features.cast());
    let z = tape.row_l2_normalize(v);
    let z = tape.value(z);
    let a = z.row(anchor).to_vec();
    Ok((0..s[0])
        .map(|k| z.row(k).iter().zip(&a).map(|(x, y)| x * y).sum())
        .collect())
}

/// G×G gray map of a similarity row with the anchor cell at 255.
pub fn similarity_map(row: &[f64], anchor: usize) -> Vec<u8> {
    let mut px: Vec<u8> = row.iter().map(|&c| gray_level(c)).collect();
    px[anchor] = 255;
    px
}

pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, pgm_bytes(width, height, pixels)).map_err(|e| Error::io(path, e))
}

/// Parses a binary PGM with maxval 255 into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                reason: "truncated PGM header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format {
            offset: 0,
            reason: format!("expected a P5 header with maxval 255, got {fields:?}"),
        });
    }
    let parse = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Format {
            offset: 0,
            reason: format!("bad PGM dimension '{s}'"),
        })
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    if bytes.len() != pos + w * h {
        return Err(Error::Format {
            offset: pos,
            reason: format!("expected {} pixel bytes, found {}", w * h, bytes.len().saturating_sub(pos)),
        });
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

/// Pixels in `[-1, 1]` mapped to gray levels.
pub fn image_to_gray(pixels: &Tensor<f32>) -> Vec<u8> {
    pixels.data().iter().map(|&v| gray_level(v as f64)).collect()
}

/// Lays `images` (each `side × side`) out on a grid `cols` wide with a
/// one-pixel black gutter. Returns `(width, height, pixels)`.
pub fn tile_images(images: &[Vec<u8>], side: usize, cols: usize) -> (usize, usize, Vec<u8>) {
    let cols = cols.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(cols).max(1);
    let (w, h) = (cols * (side + 1) - 1, rows * (side + 1) - 1);
    let mut out = vec![0u8; w * h];
    for (i, img) in images.iter().enumerate() {
        let (r0, c0) = ((i / cols) * (side + 1), (i % cols) * (side + 1));
        for y in 0..side {
            out[(r0 + y) * w + c0..(r0 + y) * w + c0 + side].copy_from_slice(&img[y * side..(y + 1) * side]);
        }
    }
    (w, h, out)
}

/// Paths written by [`simmap_export`].
#[derive(Debug, Clone)]
pub struct SimmapFiles {
    pub teacher: PathBuf,
    pub student: PathBuf,
}

/// Default noise level for the student similarity map.
pub const SIMMAP_TIME: f32 = 0.5;

/// Writes the teacher and student similarity maps of `anchor` for image
/// `image_index` of `data`. The student map uses the EMA student at time
/// `t` with noise drawn from `seed`.
pub fn simmap_export(
    models: &EvalModels,
    data: &Dataset,
    image_index: usize,
    anchor: usize,
    t: f32,
    seed: u64,
    out_dir: &Path,
) -> Result<SimmapFiles> {
    models.check_data(data)?;
    let n = data.n_tokens();
    if anchor >= n {
        return Err(Error::InvalidArgument(format!("anchor token {anchor} out of range 0..{n}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    let (x1, labels) = data.batch(&[image_index])?;
    let ht = models.teacher.encode(&x1)?;
    let x0 = gaussian::<f32>(x1.shape(), seed);
    let xt = interpolate(&x0, &x1, &[t])?;
    let zs = projected_features(&models.student, &models.projector, &xt, &[t], &labels)?;
    let g = data.grid;
    let as_2d = |f: Tensor<f32>| {
        let d = f.shape()[2];
        f.reshape(&[n, d])
    };
    let teacher_map = similarity_map(&similarity_row(&as_2d(ht)?, anchor)?, anchor);
    let student_map = similarity_map(&similarity_row(&as_2d(zs)?, anchor)?, anchor);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = SimmapFiles {
        teacher: out_dir.join(format!("simmap_img{image_index}_anchor{anchor}_teacher.pgm")),
        student: out_dir.join(format!("simmap_img{image_index}_anchor{anchor}_student.pgm")),
    };
    write_pgm(&files.teacher, g, g, &teacher_map)?;
    write_pgm(&files.student, g, g, &student_map)?;
    Ok(files)
}
