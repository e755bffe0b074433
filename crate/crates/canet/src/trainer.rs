//! Training loops (full training, adapter-only adaptation, online
//! fine-tuning baseline), evaluation metrics, and run records.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablation, CanetModel, Scope};
use crate::synthdata::SamplePair;
use crate::tensor::ops::{argmax_change, softmax_cross_entropy};
use crate::tensor::{sgd_step, Dims, LabelMap, Mode, SgdConfig, Tape, Tensor};
use crate::DatasetId;

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(rename = "batch")]
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hflip: bool,
    pub scope: Scope,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            hflip: true,
            scope: Scope::Full,
            ablation: Ablation::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

/// Confusion-count-derived metrics for the change class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

impl Metrics {
    /// Derive ratio metrics with fixed zero-denominator conventions: empty
    /// prediction on empty truth is perfect; otherwise an empty side scores
    /// zero.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Metrics {
        let empty_pred = tp + fp == 0;
        let empty_truth = tp + fn_ == 0;
        let precision = if empty_pred {
            if empty_truth {
                1.0
            } else {
                0.0
            }
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if empty_truth {
            if empty_pred {
                1.0
            } else {
                0.0
            }
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 =
            if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        let iou = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
        let m = Metrics { tp, fp, fn_, tn, precision, recall, f1, iou };
        // Algebraic identity on confusion counts, checked on every evaluation.
        assert!(
            (m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12,
            "metric identity violated: f1={} iou={}",
            m.f1,
            m.iou
        );
        m
    }
}

/// One per-epoch training entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// One evaluation entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub split: String,
    pub dataset: DatasetId,
    pub metrics: Metrics,
    pub seconds: f64,
}

/// Everything a training run produced.
#[derive(Clone, Debug, Default)]
pub struct RunRecord {
    pub dataset: String,
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
    pub trained_param_count: usize,
    pub total_param_count: usize,
}

impl RunRecord {
    /// CSV with one row per epoch (loss) and per evaluation (metrics).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,dataset_id,loss,f1,precision,recall,iou,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},train,{},{:.6},,,,,{:.3}\n",
                e.epoch, self.dataset, e.loss, e.seconds
            ));
        }
        for ev in &self.evals {
            out.push_str(&Self::eval_csv_row(ev));
        }
        out
    }

    pub fn eval_csv_row(ev: &EvalRecord) -> String {
        format!(
            "{},{},{},,{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            ev.epoch, ev.split, ev.dataset, ev.metrics.f1, ev.metrics.precision, ev.metrics.recall,
            ev.metrics.iou, ev.seconds
        )
    }
}

// ── batching ─────────────────────────────────────────────────────────

fn assemble_batch(pairs: &[&SamplePair], flips: &[bool]) -> (Tensor<f32>, Tensor<f32>, LabelMap) {
    let d = pairs[0].x1.dims();
    let n = pairs.len();
    let bd = Dims::new(n, 3, d.h, d.w);
    let mut x1 = vec![0.0f32; bd.count()];
    let mut x2 = vec![0.0f32; bd.count()];
    let mut labels = vec![0u8; n * d.h * d.w];
    let chunk = 3 * d.plane();
    for (i, (&pair, &flip)) in pairs.iter().zip(flips).enumerate() {
        let flipped;
        let p = if flip {
            flipped = pair.hflipped();
            &flipped
        } else {
            pair
        };
        x1[i * chunk..(i + 1) * chunk].copy_from_slice(p.x1.data());
        x2[i * chunk..(i + 1) * chunk].copy_from_slice(p.x2.data());
        labels[i * d.plane()..(i + 1) * d.plane()].copy_from_slice(p.label.data());
    }
    (
        Tensor::new(bd, x1).expect("batch dims"),
        Tensor::new(bd, x2).expect("batch dims"),
        LabelMap::new(n, d.h, d.w, labels).expect("batch dims"),
    )
}

// ── training ─────────────────────────────────────────────────────────

/// Train `dataset_id`'s trainable set on `train_pairs`; evaluates on
/// `val_pairs` at the end when they are non-empty. Deterministic under the
/// config seed.
pub fn train(
    model: &mut CanetModel<f32>,
    dataset_id: &DatasetId,
    train_pairs: &[SamplePair],
    val_pairs: &[SamplePair],
    config: &TrainConfig,
) -> Result<RunRecord> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let params = model.trainable_set(dataset_id, config.scope)?;
    let trained_param_count: usize = params.iter().map(|p| p.count()).sum();
    let sgd = config.sgd();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut record = RunRecord {
        dataset: dataset_id.to_string(),
        trained_param_count,
        total_param_count: model.total_param_count(),
        ..RunRecord::default()
    };

    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let flips: Vec<bool> =
                chunk.iter().map(|_| config.hflip && rng.gen_bool(0.5)).collect();
            let picked: Vec<&SamplePair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let (x1, x2, labels) = assemble_batch(&picked, &flips);

            for p in &params {
                p.zero_grad();
            }
            let mut tape = Tape::recording();
            let out = model.forward(&mut tape, &x1, &x2, dataset_id, Mode::Train)?;
            let loss = softmax_cross_entropy(&mut tape, &out.logits, &labels)?;
            let value = loss.scalar()? as f64;
            if !value.is_finite() {
                return Err(Error::NanLoss { epoch, batch: bi });
            }
            tape.backward(&loss)?;
            sgd_step(&params, &sgd)?;
            loss_sum += value;
            batches += 1;
        }
        record.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    if !val_pairs.is_empty() {
        let start = Instant::now();
        let metrics = evaluate(model, dataset_id, val_pairs)?;
        record.evals.push(EvalRecord {
            epoch: config.epochs,
            split: "val".into(),
            dataset: dataset_id.clone(),
            metrics,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(record)
}

/// Register `new_id` (adapter cloned from the historical dataset) and train
/// it adapter-only. Historical behavior is untouched by construction.
pub fn adapt(
    model: &mut CanetModel<f32>,
    new_id: &DatasetId,
    train_pairs: &[SamplePair],
    val_pairs: &[SamplePair],
    config: &TrainConfig,
) -> Result<RunRecord> {
    let historical = model.primary()?;
    model.add_dataset(new_id, Some(&historical))?;
    let cfg = TrainConfig { scope: Scope::AdapterOnly, ..config.clone() };
    train(model, new_id, train_pairs, val_pairs, &cfg)
}

/// Online fine-tuning baseline: every parameter trains and the historical
/// bank is reused and overwritten, so historical behavior degrades.
pub fn online_finetune_baseline(
    model: &mut CanetModel<f32>,
    train_pairs: &[SamplePair],
    val_pairs: &[SamplePair],
    config: &TrainConfig,
) -> Result<RunRecord> {
    let historical = model.primary()?;
    let cfg = TrainConfig { scope: Scope::Full, ..config.clone() };
    train(model, &historical, train_pairs, val_pairs, &cfg)
}

// ── evaluation ───────────────────────────────────────────────────────

const EVAL_BATCH: usize = 8;

/// Confusion counts over every pixel of every pair, in eval mode.
pub fn evaluate(
    model: &CanetModel<f32>,
    dataset_id: &DatasetId,
    pairs: &[SamplePair],
) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for chunk in pairs.chunks(EVAL_BATCH) {
        let picked: Vec<&SamplePair> = chunk.iter().collect();
        let flips = vec![false; picked.len()];
        let (x1, x2, labels) = assemble_batch(&picked, &flips);
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &x1, &x2, dataset_id, Mode::Eval)?;
        let pred = argmax_change(&out.logits)?;
        for (p, t) in pred.data().iter().zip(labels.data()) {
            match (p, t) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => tn += 1,
            }
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}

/// Per-sample predicted change maps (0 unchanged, 255 changed).
pub fn predict_maps(
    model: &CanetModel<f32>,
    dataset_id: &DatasetId,
    pairs: &[SamplePair],
) -> Result<Vec<Vec<u8>>> {
    let mut maps = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let picked: Vec<&SamplePair> = chunk.iter().collect();
        let flips = vec![false; picked.len()];
        let (x1, x2, _) = assemble_batch(&picked, &flips);
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &x1, &x2, dataset_id, Mode::Eval)?;
        let pred = argmax_change(&out.logits)?;
        let plane = pred.h * pred.w;
        for i in 0..picked.len() {
            maps.push(
                pred.data()[i * plane..(i + 1) * plane]
                    .iter()
                    .map(|&v| if v == 1 { 255 } else { 0 })
                    .collect(),
            );
        }
    }
    Ok(maps)
}

/// Checksum of every shared parameter's bit pattern; adapter-only training
/// must leave it unchanged.
pub fn shared_param_checksum(model: &CanetModel<f32>) -> u64 {
    let mut acc: u64 = 0xcbf29ce484222325;
    for (_, p) in model.shared_params() {
        for v in p.value().data() {
            acc ^= v.to_bits() as u64;
            acc = acc.wrapping_mul(0x100000001b3);
        }
    }
    acc
}
