//! Training and evaluation runs over in-memory scene sets.
//!
//! Every run is a pure function of its config and scenes: initialisation,
//! shuffling, masking and dropout all come from streams derived from
//! `config.seed`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use motion_mae_core::metrics::{self, MetricReport, MetricValues};
use motion_mae_core::model::{ForecastModel, MaeModel};
use motion_mae_core::numerics::{lr_at, AdamW, ParamStore, RngStream};
use motion_mae_core::scene::ProcessedScene;
use motion_mae_core::train::{finetune_step, pretrain_step};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

const PRETRAIN_STREAM: u64 = 1;
const FINETUNE_STREAM: u64 = 2;

/// Shuffled batches of one epoch.
fn epoch_batches(n: usize, batch: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

struct Schedule {
    total: u64,
    warmup: u64,
    base: f64,
}

impl Schedule {
    fn new(cfg: &ExperimentConfig, scenes: usize, epochs: usize) -> Self {
        let per_epoch = scenes.div_ceil(cfg.train.batch_size) as u64;
        Self {
            total: per_epoch * epochs as u64,
            warmup: per_epoch * cfg.train.warmup_epochs.min(epochs) as u64,
            base: cfg.train.lr,
        }
    }

    fn lr(&self, step: u64) -> f64 {
        lr_at(step, self.total, self.warmup, self.base)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub l_h: f64,
    pub l_f: f64,
    pub l_l: f64,
    pub l_mae: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub model: MaeModel,
    pub log: Vec<PretrainEpoch>,
    /// Batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

fn non_empty(scenes: &[ProcessedScene], what: &str) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Config(format!("{what} split is empty")));
    }
    Ok(())
}

pub fn pretrain(cfg: &ExperimentConfig, train: &[ProcessedScene]) -> Result<PretrainRun> {
    non_empty(train, "training")?;
    let root = RngStream::new(cfg.seed).derive(PRETRAIN_STREAM);
    let mut model = MaeModel::new(cfg.model.clone(), &mut root.derive(0))?;
    let mut rng = root.derive(1);
    let opt = AdamW::with_weight_decay(cfg.train.weight_decay);
    let sched = Schedule::new(cfg, train.len(), cfg.train.pretrain_epochs);
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    for epoch in 0..cfg.train.pretrain_epochs {
        let batches = epoch_batches(train.len(), cfg.train.batch_size, &mut rng);
        let mut sum = [0.0; 4];
        let mut lr = 0.0;
        for b in &batches {
            let scenes: Vec<&ProcessedScene> = b.iter().map(|&i| &train[i]).collect();
            lr = sched.lr(model.params.step_count());
            let l = pretrain_step(&mut model, &scenes, cfg.masking.alpha, cfg.masking.beta, &mut rng, &opt, lr)?;
            for (s, v) in sum.iter_mut().zip([l.history, l.future, l.lane, l.total]) {
                *s += v;
            }
            step_losses.push(l.total);
        }
        let n = batches.len() as f64;
        log.push(PretrainEpoch {
            epoch: epoch + 1,
            l_h: sum[0] / n,
            l_f: sum[1] / n,
            l_l: sum[2] / n,
            l_mae: sum[3] / n,
            lr,
        });
    }
    Ok(PretrainRun { model, log, step_losses })
}

/// Starting point of fine-tuning.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    Scratch,
    /// Embeddings and encoder copied from a pre-trained parameter store.
    Pretrained(&'a ParamStore),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub regression: f64,
    pub classification: f64,
    pub lr: f64,
    /// Validation metrics, on evaluation epochs.
    pub val: Option<MetricValues>,
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub model: ForecastModel,
    pub log: Vec<FinetuneEpoch>,
    pub step_losses: Vec<f64>,
}

impl FinetuneRun {
    /// Metrics of the last evaluated epoch.
    pub fn final_metrics(&self) -> Option<MetricValues> {
        self.log.iter().rev().find_map(|e| e.val)
    }
}

/// Scratch and pre-trained starts draw identical head weights for a given
/// seed, so the two differ only in the copied weights.
pub fn build_forecast_model(cfg: &ExperimentConfig, init: Init) -> Result<ForecastModel> {
    let mut rng = RngStream::new(cfg.seed).derive(FINETUNE_STREAM).derive(0);
    Ok(match init {
        Init::Scratch => ForecastModel::scratch(cfg.model.clone(), &mut rng)?,
        Init::Pretrained(p) => ForecastModel::from_pretrained(cfg.model.clone(), p, &mut rng)?,
    })
}

pub fn finetune(
    cfg: &ExperimentConfig,
    init: Init,
    train: &[ProcessedScene],
    val: &[ProcessedScene],
) -> Result<FinetuneRun> {
    non_empty(train, "training")?;
    let mut model = build_forecast_model(cfg, init)?;
    let mut rng = RngStream::new(cfg.seed).derive(FINETUNE_STREAM).derive(1);
    let opt = AdamW::with_weight_decay(cfg.train.weight_decay);
    let epochs = cfg.train.finetune_epochs;
    let sched = Schedule::new(cfg, train.len(), epochs);
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    for epoch in 0..epochs {
        let batches = epoch_batches(train.len(), cfg.train.batch_size, &mut rng);
        let mut sum = [0.0; 3];
        let mut lr = 0.0;
        for b in &batches {
            let scenes: Vec<&ProcessedScene> = b.iter().map(|&i| &train[i]).collect();
            lr = sched.lr(model.params.step_count());
            let l = finetune_step(&mut model, &scenes, &mut rng, &opt, lr)?;
            for (s, v) in sum.iter_mut().zip([l.total, l.regression, l.classification]) {
                *s += v;
            }
            step_losses.push(l.total);
        }
        let n = batches.len() as f64;
        let last = epoch + 1 == epochs;
        let val = if !val.is_empty() && (last || (epoch + 1) % cfg.train.eval_every == 0) {
            Some(evaluate_model(&model, val)?.mean)
        } else {
            None
        };
        log.push(FinetuneEpoch {
            epoch: epoch + 1,
            loss: sum[0] / n,
            regression: sum[1] / n,
            classification: sum[2] / n,
            lr,
            val,
        });
    }
    Ok(FinetuneRun { model, log, step_losses })
}

pub fn evaluate_model(model: &ForecastModel, scenes: &[ProcessedScene]) -> Result<MetricReport> {
    Ok(metrics::evaluate(scenes, |s| model.forecast(s))?)
}

/// Reference predictors that need no checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    ConstantVelocity,
    /// The recorded future itself; every metric is zero.
    GroundTruth,
}

pub fn evaluate_baseline(baseline: Baseline, scenes: &[ProcessedScene]) -> Result<MetricReport> {
    Ok(match baseline {
        Baseline::ConstantVelocity => metrics::evaluate(scenes, |s| Ok(metrics::constant_velocity_baseline(s)))?,
        Baseline::GroundTruth => metrics::evaluate(scenes, |s| Ok(metrics::ground_truth_forecast(s)))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Beta,
    EncoderDepth,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::EncoderDepth => "encoder_depth",
        }
    }

    /// `base` with the axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Alpha => cfg.masking.alpha = value,
            SweepAxis::Beta => cfg.masking.beta = value,
            SweepAxis::EncoderDepth => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("encoder depth {value} must be a positive integer")));
                }
                cfg.model.encoder_depth = value as usize;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
    pub pretrain_final_loss: f64,
    pub metrics: MetricValues,
}

/// Runs `job` over `items` on up to `available_parallelism` threads, keeping
/// the input order. Jobs share nothing mutable, so results do not depend on
/// the thread count.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], job: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = job(&items[i]);
                *slots[i].lock().expect("no job panicked") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("no job panicked").expect("every job ran")).collect()
}

/// Pre-trains and fine-tunes once per (value, seed); rows are ordered values
/// outermost. Runs are independent and use [`parallel_map`].
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    train: &[ProcessedScene],
    val: &[ProcessedScene],
    progress: impl Fn(&SweepRow) + Sync,
) -> Result<Vec<SweepRow>> {
    non_empty(val, "validation")?;
    let mut jobs = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        for &seed in seeds {
            jobs.push((value, ExperimentConfig { seed, ..axis.apply(base, value)? }));
        }
    }
    parallel_map(&jobs, |(value, cfg)| {
        let pre = pretrain(cfg, train)?;
        let fine = finetune(cfg, Init::Pretrained(&pre.model.params), train, val)?;
        let row = SweepRow {
            axis,
            value: *value,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            pretrain_final_loss: pre.log.last().map_or(f64::NAN, |e| e.l_mae),
            metrics: fine.final_metrics().expect("validation split is non-empty"),
        };
        progress(&row);
        Ok(row)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_split, process, Split};
    use motion_mae_core::model::ModelConfig;

    #[test]
    fn parallel_map_keeps_input_order() {
        let items: Vec<u64> = (0..20).collect();
        let squares = parallel_map(&items, |x| x * x);
        assert_eq!(squares, items.iter().map(|x| x * x).collect::<Vec<_>>());
        assert!(parallel_map(&[] as &[u64], |x| *x).is_empty());
    }

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.model = ModelConfig { dim: 8, heads: 2, encoder_depth: 1, decoder_depth: 1, mlp_ratio: 2, ..c.model };
        c.data.train_scenes = 6;
        c.data.val_scenes = 3;
        c.train.batch_size = 4;
        c.train.pretrain_epochs = 2;
        c.train.finetune_epochs = 2;
        c.train.eval_every = 1;
        c
    }

    fn scenes(cfg: &ExperimentConfig, split: Split) -> Vec<ProcessedScene> {
        process(&generate_split(cfg, split).unwrap()).unwrap()
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = tiny();
        let (train, val) = (scenes(&cfg, Split::Train), scenes(&cfg, Split::Val));
        let a = pretrain(&cfg, &train).unwrap();
        let b = pretrain(&cfg, &train).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.log.len(), 2);
        assert_eq!(a.step_losses.len(), 4);
        let f1 = finetune(&cfg, Init::Pretrained(&a.model.params), &train, &val).unwrap();
        let f2 = finetune(&cfg, Init::Pretrained(&b.model.params), &train, &val).unwrap();
        assert_eq!(f1.step_losses, f2.step_losses);
        assert!(f1.log.iter().all(|e| e.val.is_some()));
        let other = ExperimentConfig { seed: 3, ..cfg };
        assert_ne!(pretrain(&other, &train).unwrap().step_losses, a.step_losses);
    }

    #[test]
    fn scratch_and_pretrained_share_architecture() {
        let cfg = tiny();
        let mae = MaeModel::new(cfg.model.clone(), &mut RngStream::new(0)).unwrap();
        let s = build_forecast_model(&cfg, Init::Scratch).unwrap();
        let p = build_forecast_model(&cfg, Init::Pretrained(&mae.params)).unwrap();
        assert!(s.params.names().eq(p.params.names()));
        assert_eq!(s.params.value("head.traj.fc1.w").unwrap(), p.params.value("head.traj.fc1.w").unwrap());
    }

    #[test]
    fn ground_truth_baseline_is_zero() {
        let cfg = tiny();
        let val = scenes(&cfg, Split::Val);
        let r = evaluate_baseline(Baseline::GroundTruth, &val).unwrap();
        assert_eq!(r.mean.to_array(), [0.0; 7]);
        assert_eq!(r.n_scenes(), 3);
    }

    #[test]
    fn sweep_emits_one_row_per_value_and_seed() {
        let mut cfg = tiny();
        cfg.train.pretrain_epochs = 1;
        cfg.train.finetune_epochs = 1;
        let (train, val) = (scenes(&cfg, Split::Train), scenes(&cfg, Split::Val));
        let rows = sweep(&cfg, SweepAxis::EncoderDepth, &[1.0, 2.0, 3.0], &[0], &train, &val, |_| {}).unwrap();
        assert_eq!(rows.len(), 3);
        assert_ne!(rows[0].config_hash, rows[1].config_hash);
        assert!(SweepAxis::EncoderDepth.apply(&cfg, 1.5).is_err());
    }
}
