//! Experiment orchestration: configs, the training loop, multi-seed
//! statistics, sweeps, CSV emission, and the step-time benchmark.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{load_mnist_idx, make_blobs, BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::model::{Activation, Loss, Network, Targets};
use crate::optim::{HyperGradMode, Optimizer, OptimizerConfig};
use crate::tensor::{Rng, Tensor};

/// Environment variable naming the directory that holds the IDX files.
pub const DATA_DIR_ENV: &str = "CAMHD_DATA_DIR";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden layer widths; input/output widths come from the dataset.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: vec![100, 100],
            activation: Activation::Relu,
            loss: Loss::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Standard four-file IDX layout; `dir` falls back to CAMHD_DATA_DIR.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    /// Synthetic Gaussian clusters; validation set drawn with seed+1.
    Blobs {
        n: usize,
        d: usize,
        classes: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_val_n")]
        val_n: usize,
    },
}

fn default_val_n() -> usize {
    200
}

impl DatasetSpec {
    /// Materializes (train, validation) datasets. Data is a function of the
    /// spec alone, so every seed of a run sees the same task.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Mnist { dir } => {
                let dir = match dir {
                    Some(d) => d.clone(),
                    None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(
                        || {
                            Error::Config(format!(
                                "no dataset dir in config and {DATA_DIR_ENV} is unset"
                            ))
                        },
                    )?,
                };
                load_mnist_idx(&dir)
            }
            DatasetSpec::Blobs { n, d, classes, separation, seed, val_n } => {
                let train = make_blobs(*n, *d, *classes, *separation, *seed)?;
                let val = make_blobs(*val_n, *d, *classes, *separation, seed.wrapping_add(1))?;
                Ok((train, val))
            }
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Trajectory logging cadence in steps.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_log_every() -> u64 {
    100
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.optimizer.mode.is_cam()
            && self.optimizer.levels.len() != self.optimizer.gamma_init.len()
        {
            return Err(Error::Config("gamma_init length must match levels".into()));
        }
        Ok(())
    }
}

/// One logged row: epoch rows carry validation metrics, trajectory rows
/// carry only the rate state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub gamma: Vec<f64>,
    pub alpha_mean: Vec<f64>,
    pub ms_per_step: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub rows: Vec<LogRow>,
    pub diverged: bool,
    pub final_val_acc: Option<f64>,
    pub ms_per_step: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub n_seeds: usize,
    pub n_diverged: usize,
    pub final_accs: Vec<Option<f64>>,
    pub mean_val_acc: Option<f64>,
    pub stderr_val_acc: Option<f64>,
}

/// Mean and standard error (sample stddev / sqrt(n)) over the seeds that
/// finished; diverged seeds are excluded from the mean but counted.
pub fn summarize(records: &[RunRecord]) -> Summary {
    let finals: Vec<f64> = records.iter().filter_map(|r| r.final_val_acc).collect();
    let n = finals.len();
    let mean = (n > 0).then(|| finals.iter().sum::<f64>() / n as f64);
    let stderr = mean.map(|m| {
        if n < 2 {
            0.0
        } else {
            let var = finals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        }
    });
    Summary {
        n_seeds: records.len(),
        n_diverged: records.iter().filter(|r| r.diverged).count(),
        final_accs: records.iter().map(|r| r.final_val_acc).collect(),
        mean_val_acc: mean,
        stderr_val_acc: stderr,
    }
}

/// Mean loss and percent accuracy over a dataset, evaluated in chunks.
pub fn evaluate(net: &mut Network, ds: &Dataset) -> Result<(f64, Option<f64>)> {
    let n = ds.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut has_labels = false;
    let mut i = 0;
    while i < n {
        let hi = (i + 1000).min(n);
        let idx: Vec<usize> = (i..hi).collect();
        let (x, t) = ds.gather(&idx)?;
        let lv = net.forward(&x, &t)?;
        loss_sum += lv.total() * idx.len() as f64;
        if let Targets::Labels(labels) = &t {
            has_labels = true;
            let pred = net.predict(&x)?;
            let k = pred.cols();
            for (r, &label) in labels.iter().enumerate() {
                let row = &pred.data()[r * k..(r + 1) * k];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(j, _)| j)
                    .unwrap();
                if argmax == label {
                    correct += 1;
                }
            }
        }
        i = hi;
    }
    let acc = has_labels.then(|| 100.0 * correct as f64 / n as f64);
    Ok((loss_sum / n as f64, acc))
}

fn build_network(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<Network> {
    let d = train.dim();
    let out = match cfg.model.loss {
        Loss::SoftmaxCrossEntropy => train
            .n_classes()
            .ok_or_else(|| Error::Config("classification needs labeled targets".into()))?,
        Loss::HalfMse => match &train.targets {
            Targets::Values(v) => v.cols(),
            Targets::Labels(_) => {
                return Err(Error::Config("regression loss needs value targets".into()))
            }
        },
    };
    let mut sizes = vec![d];
    sizes.extend_from_slice(&cfg.model.hidden);
    sizes.push(out);
    Ok(Network::ffnn(&sizes, cfg.model.activation, cfg.model.loss, seed))
}

/// Trains one seed. Numeric blow-ups mark the record diverged instead of
/// failing the whole experiment; config errors still propagate.
pub fn train_one(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> Result<RunRecord> {
    let mut net = build_network(cfg, train, seed)?;
    let registry = net.registry().clone();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &registry)?;
    let mut batches = BatchIterator::new(train.len(), cfg.batch_size, seed)?;
    let mut rows = Vec::new();
    let mut diverged = false;
    let mut step: u64 = 0;
    let mut step_time = 0.0f64;
    'train: for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in batches.next_epoch() {
            let (x, t) = train.gather(&batch)?;
            let t0 = Instant::now();
            let outcome = net.forward(&x, &t).and_then(|lv| {
                let g = net.backward()?;
                let mut p = net.params_flat();
                let info = opt.step(&registry, &mut p, &g)?;
                net.set_params_flat(&p)?;
                Ok((lv, info))
            });
            step_time += t0.elapsed().as_secs_f64() * 1000.0;
            step += 1;
            let (lv, info) = match outcome {
                Ok(v) => v,
                Err(Error::Numeric(_)) => {
                    diverged = true;
                    break 'train;
                }
                Err(e) => return Err(e),
            };
            if !lv.total().is_finite() {
                diverged = true;
                break 'train;
            }
            epoch_loss += lv.total();
            epoch_batches += 1;
            if step % cfg.log_every == 0 {
                rows.push(LogRow {
                    step,
                    epoch,
                    train_loss: Some(lv.total()),
                    val_loss: None,
                    val_acc: None,
                    gamma: info.gamma,
                    alpha_mean: info.alpha_level_mean,
                    ms_per_step: step_time / step as f64,
                });
            }
        }
        let (val_loss, val_acc) = evaluate(&mut net, val)?;
        let tree = opt.tree();
        rows.push(LogRow {
            step,
            epoch,
            train_loss: Some(epoch_loss / epoch_batches.max(1) as f64),
            val_loss: Some(val_loss),
            val_acc,
            gamma: tree.gamma.clone(),
            alpha_mean: tree
                .alpha
                .iter()
                .map(|a| a.iter().sum::<f64>() / a.len() as f64)
                .collect(),
            ms_per_step: step_time / step.max(1) as f64,
        });
        if !val_loss.is_finite() {
            diverged = true;
            break;
        }
    }
    let final_val_acc = if diverged {
        None
    } else {
        rows.iter().rev().find_map(|r| r.val_acc)
    };
    Ok(RunRecord {
        seed,
        rows,
        diverged,
        final_val_acc,
        ms_per_step: step_time / step.max(1) as f64,
    })
}

pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (train, val) = cfg.dataset.load()?;
    let mut records = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        records.push(train_one(cfg, &train, &val, seed)?);
    }
    let summary = summarize(&records);
    Ok(ExperimentOutcome { records, summary })
}

pub const CSV_HEADER: &str = "step,epoch,train_loss,val_loss,val_acc,gamma_0,gamma_1,gamma_2,alpha_mean_0,alpha_mean_1,alpha_mean_2,ms_per_step";

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_level(vs: &[f64], i: usize) -> String {
    vs.get(i).map(|x| x.to_string()).unwrap_or_default()
}

/// Writes all records' rows under the fixed header; columns for absent
/// levels are left empty.
pub fn emit_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no records to emit".into()));
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{CSV_HEADER}")?;
    for rec in records {
        for r in &rec.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                csv_opt(r.train_loss),
                csv_opt(r.val_loss),
                csv_opt(r.val_acc),
                csv_level(&r.gamma, 0),
                csv_level(&r.gamma, 1),
                csv_level(&r.gamma, 2),
                csv_level(&r.alpha_mean, 0),
                csv_level(&r.alpha_mean, 1),
                csv_level(&r.alpha_mean, 2),
                r.ms_per_step,
            )?;
        }
    }
    Ok(())
}

/// One trained cell of the ratio sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepCell {
    pub gamma_global: f64,
    pub trainable: bool,
    pub seed: u64,
    pub final_acc: Option<f64>,
}

/// Aggregated over seeds at one (ratio, condition) point.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub gamma_global: f64,
    pub trainable: bool,
    pub mean_acc: Option<f64>,
    pub stderr: Option<f64>,
}

pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

/// Trains every (initial global-weight, {fixed, trainable}, seed) cell of a
/// two-level configuration. Fixed means the combination weights stay at
/// their initial value (weight step size zero).
pub fn gamma_ratio_sweep(cfg: &ExperimentConfig, grid: &[f64]) -> Result<SweepTable> {
    if !cfg.optimizer.mode.is_cam() || cfg.optimizer.levels.len() != 2 {
        return Err(Error::Config("ratio sweep needs a two-level configuration".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let (train, val) = cfg.dataset.load()?;
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for &g0 in grid {
        if !(0.0..=1.0).contains(&g0) {
            return Err(Error::Config(format!("grid value {g0} outside [0,1]")));
        }
        for trainable in [false, true] {
            let mut sub = cfg.clone();
            sub.optimizer.gamma_init = vec![g0, 1.0 - g0];
            if !trainable {
                sub.optimizer.cam_lr = 0.0;
            }
            let mut recs = Vec::new();
            for &seed in &cfg.seeds {
                let rec = train_one(&sub, &train, &val, seed)?;
                cells.push(SweepCell {
                    gamma_global: g0,
                    trainable,
                    seed,
                    final_acc: rec.final_val_acc,
                });
                recs.push(rec);
            }
            let s = summarize(&recs);
            rows.push(SweepRow {
                gamma_global: g0,
                trainable,
                mean_acc: s.mean_val_acc,
                stderr: s.stderr_val_acc,
            });
        }
    }
    Ok(SweepTable { cells, rows })
}

pub fn emit_sweep_csv(table: &SweepTable, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "gamma_global,trainable,seed,final_acc")?;
    for c in &table.cells {
        writeln!(
            f,
            "{},{},{},{}",
            c.gamma_global,
            c.trainable,
            c.seed,
            csv_opt(c.final_acc)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchReport {
    pub base_ms_per_step: f64,
    pub cam_ms_per_step: f64,
    pub ratio: f64,
}

/// Times the full step (forward, backward, update) on synthetic batches for
/// the plain base rule versus the multi-level variant from the config.
pub fn bench(cfg: &ExperimentConfig, steps: u64) -> Result<BenchReport> {
    if !cfg.optimizer.mode.is_cam() {
        return Err(Error::Config("benchmark config must use a multi-level mode".into()));
    }
    let d = cfg.model.hidden.first().copied().unwrap_or(100);
    let classes = 10;
    let mut sizes = vec![d];
    sizes.extend_from_slice(&cfg.model.hidden);
    sizes.push(classes);
    let mut rng = Rng::new(7);
    let mut x = Tensor::zeros(vec![cfg.batch_size, d]);
    rng.fill_normal(&mut x, 1.0);
    let labels: Vec<usize> =
        (0..cfg.batch_size).map(|_| (rng.next_u64() % classes as u64) as usize).collect();
    let t = Targets::Labels(labels);

    let time_mode = |opt_cfg: OptimizerConfig| -> Result<f64> {
        let mut net = Network::ffnn(&sizes, cfg.model.activation, cfg.model.loss, 1);
        let registry = net.registry().clone();
        let mut opt = Optimizer::new(opt_cfg, &registry)?;
        let mut run = |n: u64| -> Result<f64> {
            let t0 = Instant::now();
            for _ in 0..n {
                net.forward(&x, &t)?;
                let g = net.backward()?;
                let mut p = net.params_flat();
                opt.step(&registry, &mut p, &g)?;
                net.set_params_flat(&p)?;
            }
            Ok(t0.elapsed().as_secs_f64() * 1000.0 / n as f64)
        };
        run(steps.div_ceil(10))?; // warmup
        run(steps)
    };

    let base = time_mode(OptimizerConfig {
        base: cfg.optimizer.base,
        mode: HyperGradMode::None,
        alpha0: cfg.optimizer.alpha0,
        ..Default::default()
    })?;
    let cam = time_mode(cfg.optimizer.clone())?;
    Ok(BenchReport { base_ms_per_step: base, cam_ms_per_step: cam, ratio: cam / base })
}
