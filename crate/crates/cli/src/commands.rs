//! Implementations behind each subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use srepa_core::data::unpatchify;
use srepa_core::eval::{image_to_gray, simmap_export, tile_images, write_pgm, SimmapFiles, SIMMAP_TIME};
use srepa_core::gradsuite::{run_suite, CaseResult, SuiteConfig};
use srepa_core::train::{train_loop, RunSummary};
use srepa_core::{Checkpoint, Dataset, EvalModels, EvalReport, MetricsRow, SamplerConfig, TrainConfig};

use crate::exit::{WithCode, USAGE};
use crate::sweep::{cells_dir, CellMetrics, SweepGrid, SweepWriter};

/// Loads a training configuration; any failure is a usage error.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::load(path).code(USAGE)
}

pub fn gen_data(config: &Path, out: &Path) -> Result<Dataset> {
    let cfg = load_config(config)?;
    let data = Dataset::generate(&cfg.data)?;
    data.write(out)?;
    Ok(data)
}

fn progress(total: u64, every: u64) -> impl FnMut(&MetricsRow) {
    move |row| {
        if every > 0 && (row.step % every == 0 || row.step == total) {
            eprintln!(
                "step {}/{}  loss_total={:.5}  fm={:.5}  proj={:.5}  struc={:.5}  grad_norm={:.4}",
                row.step, total, row.loss_total, row.loss_fm, row.loss_proj, row.loss_struc, row.grad_norm
            );
        }
    }
}

pub fn train(config: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let mut cfg = load_config(config)?;
    cfg.train.output_dir = Some(out_dir.to_path_buf());
    let log = progress(cfg.train.total_steps, cfg.train.log_interval);
    Ok(train_loop(&cfg, out_dir, resume, log)?)
}

/// Options of the `sample` command; `None` falls back to the checkpoint's
/// configuration.
#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub n: usize,
    pub class: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub steps: Option<usize>,
    pub seed: u64,
}

/// Writes `sample_NNN.pgm` for every image and `grid.pgm` tiling them.
pub fn sample(ckpt: &Path, opts: &SampleOptions, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if opts.n == 0 {
        return Err(anyhow::anyhow!("--n must be at least 1")).code(USAGE);
    }
    let models = EvalModels::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let c = &models.config;
    let labels: Vec<usize> = match opts.class {
        Some(k) => vec![k; opts.n],
        None => (0..opts.n).map(|i| i % c.data.n_classes).collect(),
    };
    let cfg = SamplerConfig {
        steps: opts.steps.unwrap_or(c.train.sample_steps),
        cfg_scale: opts.cfg_scale.unwrap_or(c.train.cfg_scale),
        seed: opts.seed,
    };
    let tokens = models.sample(&labels, &cfg)?;
    let (g, p) = (c.data.grid, c.data.patch);
    let per = tokens.numel() / opts.n;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut grays = Vec::with_capacity(opts.n);
    let mut files = Vec::with_capacity(opts.n + 1);
    for (i, chunk) in tokens.data().chunks(per).enumerate() {
        let tok = srepa_core::Tensor::new(&[g * g, p * p], chunk.to_vec())?;
        let gray = image_to_gray(&unpatchify(&tok, g, p)?);
        let path = out_dir.join(format!("sample_{i:03}.pgm"));
        write_pgm(&path, g * p, g * p, &gray)?;
        files.push(path);
        grays.push(gray);
    }
    let cols = (opts.n as f64).sqrt().ceil() as usize;
    let (w, h, px) = tile_images(&grays, g * p, cols);
    let grid = out_dir.join("grid.pgm");
    write_pgm(&grid, w, h, &px)?;
    files.push(grid);
    Ok(files)
}

pub fn eval(ckpt: &Path, data: &Path, out: &Path) -> Result<EvalReport> {
    let models = EvalModels::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let dataset = Dataset::read(data)?;
    let report = models.report(&dataset, &data.display().to_string(), models.config.train.seed)?;
    std::fs::write(out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    Ok(report)
}

/// Runs the gradient suite and renders its table.
pub fn gradcheck(seed: u64, tol: f64) -> (Vec<CaseResult>, String) {
    let cfg = SuiteConfig {
        seed,
        tol,
        ..SuiteConfig::default()
    };
    let results = run_suite(&cfg);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(2).max(2);
    let mut table = format!("{:<width$}  {:>14}  result\n", "op", "max_rel_error");
    for r in &results {
        table.push_str(&format!(
            "{:<width$}  {:>14.3e}  {}\n",
            r.name,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        ));
        if let Some(d) = &r.diagnostic {
            table.push_str(&format!("{:<width$}    {d}\n", ""));
        }
    }
    (results, table)
}

pub fn simmap(ckpt: &Path, data: &Path, image_index: usize, anchor: usize, out_dir: &Path) -> Result<SimmapFiles> {
    let models = EvalModels::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let dataset = Dataset::read(data)?;
    let seed = models.config.train.seed;
    Ok(simmap_export(&models, &dataset, image_index, anchor, SIMMAP_TIME, seed, out_dir)?)
}

/// Trains one configuration into `dir` and evaluates it on held-out data.
pub fn run_and_evaluate(config: &TrainConfig, dir: &Path) -> Result<CellMetrics> {
    let mut cfg = config.clone();
    cfg.train.output_dir = Some(dir.to_path_buf());
    let summary = train_loop(&cfg, dir, None, progress(cfg.train.total_steps, cfg.train.log_interval))?;
    let last = summary.last_row.context("run produced no metrics")?;
    let models = EvalModels::from_checkpoint(&Checkpoint::load(&summary.final_checkpoint)?)?;
    let held_out = Dataset::generate(&cfg.data.held_out(cfg.train.eval_images))?;
    let report = models.report(&held_out, "held-out", cfg.train.seed)?;
    Ok(CellMetrics {
        gram_discrepancy: report.gram_discrepancy,
        frechet: report.frechet,
        loss_total: last.loss_total as f64,
    })
}

/// Runs every cell of a grid sequentially. Returns the number of failed
/// cells.
pub fn sweep(base: &Path, grid: &Path, out: &Path) -> Result<usize> {
    let base_cfg = load_config(base)?;
    let grid = SweepGrid::load(grid).code(USAGE)?;
    let cells = grid.cells(&base_cfg).code(USAGE)?;
    let mut writer = SweepWriter::create(out, &grid.keys())?;
    let root = cells_dir(out);
    let mut failed = 0;
    for cell in &cells {
        eprintln!("cell {}/{}", cell.index + 1, cells.len());
        let dir = root.join(format!("cell_{:03}", cell.index));
        let outcome = run_and_evaluate(&cell.config, &dir);
        if let Err(e) = &outcome {
            eprintln!("cell {} failed: {e:#}", cell.index);
            failed += 1;
        }
        writer.row(cell, &outcome)?;
    }
    Ok(failed)
}
