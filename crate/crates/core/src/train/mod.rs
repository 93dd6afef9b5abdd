//! Training: configuration, optimizer, EMA, checkpoints, metrics and the
//! step/loop drivers.
//!
//! A run draws from four independent ChaCha streams derived from
//! `train.seed` (data order, noise, time, label dropout). Changing loss
//! weights therefore leaves the sampled batches untouched, and the stream
//! positions saved in checkpoints make resumed runs bit-identical to
//! uninterrupted ones.

mod checkpoint;
mod config;
mod metrics;
mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, StreamState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LossConfig, ModelConfig, OptimConfig, RunConfig, TrainConfig};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter, METRICS_HEADER};
pub use optim::{warmup_decay, AdamW, EmaState};

use crate::align::{total_alignment_loss, FeatureKind, FeatureMap};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{fm_loss, gaussian_from, interpolate, total_training_loss};
use crate::nets::{init_params, ProjectionHead, StudentNetwork, TeacherEncoder};
use crate::tensor::Tensor;

/// The four random streams of a run.
#[derive(Debug, Clone)]
pub struct Streams {
    pub data: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub time: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Streams {
        let make = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        Streams {
            data: make(0),
            noise: make(1),
            time: make(2),
            dropout: make(3),
        }
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            data: self.data.get_word_pos(),
            noise: self.noise.get_word_pos(),
            time: self.time.get_word_pos(),
            dropout: self.dropout.get_word_pos(),
        }
    }

    pub fn restore(seed: u64, state: &StreamState) -> Streams {
        let mut s = Streams::new(seed);
        s.data.set_word_pos(state.data);
        s.noise.set_word_pos(state.noise);
        s.time.set_word_pos(state.time);
        s.dropout.set_word_pos(state.dropout);
        s
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub student: StudentNetwork<f32>,
    pub projector: ProjectionHead<f32>,
    pub teacher: TeacherEncoder,
    pub ema: EmaState,
    pub adam_student: AdamW,
    pub adam_projector: AdamW,
    pub step: u64,
    pub streams: Streams,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<TrainState> {
        config.validate()?;
        let (student, projector) =
            init_params::<f32>(&config.student_config(), config.model.teacher_dim, config.model.init_seed)?;
        let teacher = build_teacher(config)?;
        Ok(TrainState {
            ema: EmaState::new(config.train.ema_decay, &student.params),
            adam_student: AdamW::new(config.optim, &student.params),
            adam_projector: AdamW::new(config.optim, &projector.params),
            streams: Streams::new(config.train.seed),
            config: config.clone(),
            student,
            projector,
            teacher,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<TrainState> {
        let mut state = TrainState::new(&ckpt.config)?;
        let check = |what: &str, a: &crate::nets::ParamSet<f32>, b: &crate::nets::ParamSet<f32>| {
            if a.same_layout(b) {
                Ok(())
            } else {
                Err(Error::Config(format!("checkpoint {what} layout does not match its config")))
            }
        };
        check("student", &state.student.params, &ckpt.student)?;
        check("projector", &state.projector.params, &ckpt.projector)?;
        check("ema", &state.student.params, &ckpt.ema)?;
        check("adam", &state.student.params, &ckpt.adam_student.0)?;
        check("adam", &state.student.params, &ckpt.adam_student.1)?;
        check("adam", &state.projector.params, &ckpt.adam_projector.0)?;
        check("adam", &state.projector.params, &ckpt.adam_projector.1)?;
        state.student.params = ckpt.student.clone();
        state.projector.params = ckpt.projector.clone();
        state.ema.shadow = ckpt.ema.clone();
        (state.adam_student.m, state.adam_student.v) = ckpt.adam_student.clone();
        (state.adam_projector.m, state.adam_projector.v) = ckpt.adam_projector.clone();
        state.adam_student.step = ckpt.adam_step;
        state.adam_projector.step = ckpt.adam_step;
        state.step = ckpt.step;
        state.streams = Streams::restore(ckpt.config.train.seed, &ckpt.streams);
        Ok(state)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            adam_step: self.adam_student.step,
            streams: self.streams.state(),
            student: self.student.params.clone(),
            projector: self.projector.params.clone(),
            ema: self.ema.shadow.clone(),
            adam_student: (self.adam_student.m.clone(), self.adam_student.v.clone()),
            adam_projector: (self.adam_projector.m.clone(), self.adam_projector.v.clone()),
        }
    }

    /// Student network carrying the EMA weights.
    pub fn ema_student(&self) -> StudentNetwork<f32> {
        StudentNetwork {
            config: self.student.config,
            params: self.ema.shadow.clone(),
        }
    }

    /// Draws `batch_size` training images (with replacement) from the data
    /// stream.
    pub fn draw_batch(&mut self, data: &Dataset) -> Result<(Tensor<f32>, Vec<usize>)> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let n = data.len();
        let idx: Vec<usize> = (0..self.config.train.batch_size)
            .map(|_| self.streams.data.random_range(0..n))
            .collect();
        data.batch(&idx)
    }

    /// One optimization step on clean tokens `x1` with their class labels.
    pub fn train_step(&mut self, x1: &Tensor<f32>, labels: &[usize]) -> Result<MetricsRow> {
        let b = labels.len();
        let t: Vec<f32> = (0..b).map(|_| self.streams.time.random::<f32>()).collect();
        let x0: Tensor<f32> = gaussian_from(x1.shape(), &mut self.streams.noise);
        let p_drop = self.config.train.label_dropout;
        let null = self.student.config.null_label();
        let cond: Vec<usize> = labels
            .iter()
            .map(|&l| {
                if self.streams.dropout.random::<f64>() < p_drop {
                    null
                } else {
                    l
                }
            })
            .collect();
        let xt = interpolate(&x0, x1, &t)?;
        let weights = self.config.loss.weights();

        let mut tape = Tape::new();
        let sp = self.student.params.bind(&mut tape);
        let pp = self.projector.params.bind(&mut tape);
        let xt_var = tape.constant(xt);
        let out = self.student.forward(&mut tape, &sp, xt_var, &t, &cond)?;
        let fm = fm_loss(&mut tape, out.velocity, &x0, x1)?;
        let teacher_feats = tape.constant(self.teacher.encode(x1)?);
        let h_t = FeatureMap::new(&mut tape, teacher_feats, FeatureKind::TeacherRaw)?;
        let z = self.projector.forward(&mut tape, &pp, out.hidden)?;
        let h_s = FeatureMap::new(&mut tape, z, FeatureKind::StudentRaw)?;
        let align = total_alignment_loss(&mut tape, &h_t, &h_s, &weights)?;
        let total = total_training_loss(&mut tape, fm, &align)?;

        let row_step = self.step + 1;
        let terms = [
            ("loss_fm", fm),
            ("loss_proj", align.loss_proj),
            ("loss_struc", align.loss_struc),
            ("loss_total", total),
        ];
        let mut values = [0f32; 4];
        for (slot, (name, var)) in values.iter_mut().zip(terms) {
            *slot = tape.value(var).item();
            if !slot.is_finite() {
                return Err(Error::NonFinite(format!("{name} at step {row_step}")));
            }
        }

        let grads = tape.backward(total)?;
        let gs: Vec<Tensor<f32>> = sp.vars().iter().map(|&v| grads.wrt(&tape, v)).collect();
        let gp: Vec<Tensor<f32>> = pp.vars().iter().map(|&v| grads.wrt(&tape, v)).collect();
        let sq: f64 = gs
            .iter()
            .chain(&gp)
            .flat_map(|g| g.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        self.adam_student.step(&mut self.student.params, &gs)?;
        self.adam_projector.step(&mut self.projector.params, &gp)?;
        let decay = if self.config.train.ema_warmup {
            warmup_decay(self.config.train.ema_decay, self.step)
        } else {
            self.config.train.ema_decay
        };
        self.ema.update_with_decay(&self.student.params, decay)?;
        self.step = row_step;

        Ok(MetricsRow {
            step: row_step,
            loss_fm: values[0],
            loss_proj: values[1],
            loss_struc: values[2],
            loss_total: values[3],
            grad_norm: sq.sqrt() as f32,
            wallclock_ms: 0,
        })
    }
}

pub fn build_teacher(config: &TrainConfig) -> Result<TeacherEncoder> {
    TeacherEncoder::new(
        config.model.teacher_seed,
        config.data.grid,
        config.data.token_dim(),
        config.model.teacher_dim,
    )
}

/// Outcome of [`train_loop`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub steps_run: u64,
    pub last_row: Option<MetricsRow>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

fn configs_compatible(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| {
        let mut c = c.clone();
        c.train.output_dir = None;
        c.train.total_steps = 0;
        c.train.log_interval = 0;
        c.train.checkpoint_interval = 0;
        c.train.record_wallclock = false;
        c
    };
    strip(a) == strip(b)
}

/// Runs training to `config.train.total_steps`, optionally continuing from
/// a checkpoint. `on_row` observes every emitted row.
pub fn train_loop(
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<RunSummary> {
    config.validate()?;
    let mut state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if !configs_compatible(&ckpt.config, config) {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different configuration",
                    path.display()
                )));
            }
            let mut s = TrainState::from_checkpoint(&ckpt)?;
            s.config = config.clone();
            s
        }
        None => TrainState::new(config)?,
    };
    let total = config.train.total_steps;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    if resume.is_some() && state.step >= total {
        return Ok(RunSummary {
            out_dir: out_dir.to_path_buf(),
            final_checkpoint: resume.expect("checked").to_path_buf(),
            steps_run: 0,
            last_row: None,
        });
    }

    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, config.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut writer = if resume.is_some() {
        MetricsWriter::resume(&metrics_path, state.step)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };

    let data = Dataset::generate(&config.data)?;
    let started = Instant::now();
    let start_step = state.step;
    let mut last_row = None;
    while state.step < total {
        let (x1, labels) = state.draw_batch(&data)?;
        let mut row = state.train_step(&x1, &labels)?;
        if config.train.record_wallclock {
            row.wallclock_ms = started.elapsed().as_millis() as u64;
        }
        writer.append(&row)?;
        on_row(&row);
        last_row = Some(row);
        let every = config.train.checkpoint_interval;
        if every > 0 && state.step % every == 0 && state.step < total {
            state.to_checkpoint().save(&checkpoint_path(out_dir, state.step))?;
        }
    }
    state.to_checkpoint().save(&final_path)?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        final_checkpoint: final_path,
        steps_run: state.step - start_step,
        last_row,
    })
}
