//! Batch normalization with per-dataset parameter banks.
//!
//! A [`BnLayer`] is one normalization site in the network. Its bank maps each
//! registered dataset to an independent (gamma, beta, running mean, running
//! variance) entry, so datasets with different appearance statistics
//! normalize independently while sharing the surrounding weights.

use std::cell::RefCell;

use indexmap::IndexMap;

use super::tape::{BackwardFn, Tape};
use super::{Dims, Elem, Mode, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::DatasetId;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Exponential running statistics, one value per channel.
#[derive(Clone, Debug)]
pub struct RunningStats<E: Elem> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
    /// Number of train-mode batches folded in; eval requires at least one.
    pub batches: u64,
}

impl<E: Elem> RunningStats<E> {
    fn new(channels: usize) -> Self {
        RunningStats { mean: vec![E::zero(); channels], var: vec![E::one(); channels], batches: 0 }
    }
}

/// One dataset's entry in a normalization bank.
pub struct BnEntry<E: Elem> {
    pub gamma: Parameter<E>,
    pub beta: Parameter<E>,
    pub stats: RefCell<RunningStats<E>>,
}

impl<E: Elem> BnEntry<E> {
    fn fresh(channels: usize) -> Self {
        let gamma = Parameter::new(Tensor::full(Dims::new(1, channels, 1, 1), E::one()));
        let beta = Parameter::new(Tensor::zeros(Dims::new(1, channels, 1, 1)));
        BnEntry { gamma, beta, stats: RefCell::new(RunningStats::new(channels)) }
    }

    fn clone_from(other: &BnEntry<E>) -> Self {
        BnEntry {
            gamma: other.gamma.deep_clone(),
            beta: other.beta.deep_clone(),
            stats: RefCell::new(other.stats.borrow().clone()),
        }
    }
}

/// A batch-normalization layer holding one [`BnEntry`] per dataset.
pub struct BnLayer<E: Elem> {
    channels: usize,
    bank: RefCell<IndexMap<DatasetId, BnEntry<E>>>,
}

impl<E: Elem> BnLayer<E> {
    pub fn new(channels: usize) -> Self {
        BnLayer { channels, bank: RefCell::new(IndexMap::new()) }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dataset_count(&self) -> usize {
        self.bank.borrow().len()
    }

    pub fn has_dataset(&self, id: &DatasetId) -> bool {
        self.bank.borrow().contains_key(id)
    }

    /// Register a bank entry for `id`, fresh or copied from `init_from`.
    pub fn add_dataset(&self, id: &DatasetId, init_from: Option<&DatasetId>) -> Result<()> {
        let mut bank = self.bank.borrow_mut();
        if bank.contains_key(id) {
            return Err(Error::DuplicateDataset(id.clone()));
        }
        let entry = match init_from {
            Some(src) => {
                let src_entry = bank.get(src).ok_or_else(|| Error::UnknownDataset(src.clone()))?;
                BnEntry::clone_from(src_entry)
            }
            None => BnEntry::fresh(self.channels),
        };
        bank.insert(id.clone(), entry);
        Ok(())
    }

    /// The affine parameters for one dataset, as shared handles.
    pub fn params_for(&self, id: &DatasetId) -> Result<(Parameter<E>, Parameter<E>)> {
        let bank = self.bank.borrow();
        let entry = bank.get(id).ok_or_else(|| Error::UnknownDataset(id.clone()))?;
        Ok((entry.gamma.clone(), entry.beta.clone()))
    }

    /// Visit every bank entry in registration order.
    pub fn for_each_entry(&self, mut f: impl FnMut(&DatasetId, &BnEntry<E>)) {
        for (id, entry) in self.bank.borrow().iter() {
            f(id, entry);
        }
    }

    pub fn set_stats(&self, id: &DatasetId, stats: RunningStats<E>) -> Result<()> {
        let bank = self.bank.borrow();
        let entry = bank.get(id).ok_or_else(|| Error::UnknownDataset(id.clone()))?;
        *entry.stats.borrow_mut() = stats;
        Ok(())
    }

    pub fn stats_for(&self, id: &DatasetId) -> Result<RunningStats<E>> {
        let bank = self.bank.borrow();
        let entry = bank.get(id).ok_or_else(|| Error::UnknownDataset(id.clone()))?;
        let stats = entry.stats.borrow().clone();
        Ok(stats)
    }

    /// Re-key one bank entry; used when an adapter is cloned for a new
    /// dataset.
    pub fn rename_dataset(&self, from: &DatasetId, to: &DatasetId) -> Result<()> {
        let mut bank = self.bank.borrow_mut();
        if bank.contains_key(to) {
            return Err(Error::DuplicateDataset(to.clone()));
        }
        let entry = bank.shift_remove(from).ok_or_else(|| Error::UnknownDataset(from.clone()))?;
        bank.insert(to.clone(), entry);
        Ok(())
    }

    /// Drop every bank entry except `keep`'s.
    pub fn retain_dataset(&self, keep: &DatasetId) {
        self.bank.borrow_mut().retain(|id, _| id == keep);
    }

    /// Independent copy of the layer with every bank entry duplicated.
    pub fn deep_clone(&self) -> Self {
        let layer = BnLayer::new(self.channels);
        {
            let src = self.bank.borrow();
            let mut dst = layer.bank.borrow_mut();
            for (id, entry) in src.iter() {
                dst.insert(id.clone(), BnEntry::clone_from(entry));
            }
        }
        layer
    }
}

/// Normalize `input` with the bank entry selected by `dataset_id`.
///
/// Train mode normalizes by batch statistics and folds them into the entry's
/// running statistics. When the entry's affine parameters are frozen
/// (non-trainable), train mode falls back to the eval path so that frozen
/// banks are never mutated by another dataset's training. Eval mode uses the
/// stored running statistics and requires at least one recorded batch.
pub fn batchnorm2d<E: Elem>(
    tape: &mut Tape<E>,
    input: &Tensor<E>,
    layer: &BnLayer<E>,
    dataset_id: &DatasetId,
    mode: Mode,
) -> Result<Tensor<E>> {
    let xd = input.dims();
    if xd.c != layer.channels {
        return Err(Error::Shape {
            op: "batchnorm2d",
            detail: format!("input has {} channels, layer expects {}", xd.c, layer.channels),
        });
    }
    let bank = layer.bank.borrow();
    let entry = bank.get(dataset_id).ok_or_else(|| Error::UnknownDataset(dataset_id.clone()))?;

    let train = mode == Mode::Train && entry.gamma.trainable();
    if train {
        let m = xd.n * xd.plane();
        if m < 2 {
            return Err(Error::InvalidArgument {
                op: "batchnorm2d",
                detail: format!("train mode needs at least 2 values per channel, got {m}"),
            });
        }
    } else if entry.stats.borrow().batches == 0 {
        return Err(Error::MissingRunningStats(dataset_id.clone()));
    }

    let gamma = tape.watch(&entry.gamma);
    let beta = tape.watch(&entry.beta);
    let eps = E::from_f(BN_EPS);
    let x = input.data();
    let plane = xd.plane();
    let m = xd.n * plane;
    let inv_m = E::one() / E::from_f(m as f64);

    // Per-channel statistics for normalization.
    let (mean, inv_std) = if train {
        let mut mean = vec![E::zero(); xd.c];
        let mut var = vec![E::zero(); xd.c];
        for (c, mv) in mean.iter_mut().enumerate() {
            let mut acc = E::zero();
            for b in 0..xd.n {
                let start = xd.at(b, c, 0, 0);
                acc = acc + x[start..start + plane].iter().copied().sum::<E>();
            }
            *mv = acc * inv_m;
        }
        for (c, vv) in var.iter_mut().enumerate() {
            let mu = mean[c];
            let mut acc = E::zero();
            for b in 0..xd.n {
                let start = xd.at(b, c, 0, 0);
                for &v in &x[start..start + plane] {
                    let d = v - mu;
                    acc = d.mul_add(d, acc);
                }
            }
            *vv = acc * inv_m;
        }

        // Fold into running statistics (unbiased variance, torch convention).
        {
            let mut stats = entry.stats.borrow_mut();
            let mom = E::from_f(BN_MOMENTUM);
            let keep = E::one() - mom;
            let unbias = E::from_f(m as f64 / (m as f64 - 1.0));
            if stats.batches == 0 {
                for c in 0..xd.c {
                    stats.mean[c] = mean[c];
                    stats.var[c] = var[c] * unbias;
                }
            } else {
                for c in 0..xd.c {
                    stats.mean[c] = keep * stats.mean[c] + mom * mean[c];
                    stats.var[c] = keep * stats.var[c] + mom * var[c] * unbias;
                }
            }
            stats.batches += 1;
        }

        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        (mean, inv_std)
    } else {
        let stats = entry.stats.borrow();
        let inv_std: Vec<E> = stats.var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        (stats.mean.clone(), inv_std)
    };

    // Normalize and apply the affine transform; keep x_hat for backward.
    let mut x_hat = vec![E::zero(); xd.count()];
    let mut out = vec![E::zero(); xd.count()];
    for b in 0..xd.n {
        for c in 0..xd.c {
            let (mu, istd) = (mean[c], inv_std[c]);
            let (gv, bv) = (gamma.data()[c], beta.data()[c]);
            let start = xd.at(b, c, 0, 0);
            for i in start..start + plane {
                let xh = (x[i] - mu) * istd;
                x_hat[i] = xh;
                out[i] = gv.mul_add(xh, bv);
            }
        }
    }

    let tracked = input.node().is_some() || gamma.node().is_some() || beta.node().is_some();
    let record: Option<BackwardFn<E>> = if tape.is_recording() && tracked {
        let (xn, gn, bn) = (input.node(), gamma.node(), beta.node());
        let gvals = gamma.data_arc();
        let x_hat = std::sync::Arc::new(x_hat);
        Some(Box::new(move |g: &[E]| {
            let mut grads = Vec::new();
            // Per-channel reductions shared by all three gradients.
            let mut sum_g = vec![E::zero(); xd.c];
            let mut sum_gx = vec![E::zero(); xd.c];
            for b in 0..xd.n {
                for c in 0..xd.c {
                    let start = xd.at(b, c, 0, 0);
                    let mut sg = E::zero();
                    let mut sgx = E::zero();
                    for i in start..start + plane {
                        sg = sg + g[i];
                        sgx = g[i].mul_add(x_hat[i], sgx);
                    }
                    sum_g[c] = sum_g[c] + sg;
                    sum_gx[c] = sum_gx[c] + sgx;
                }
            }
            if let Some(nid) = xn {
                let mut dx = vec![E::zero(); xd.count()];
                if train {
                    // dx = gamma*istd/m * (m*g - sum_g - x_hat*sum_gx)
                    for b in 0..xd.n {
                        for c in 0..xd.c {
                            let k = gvals[c] * inv_std[c] * inv_m;
                            let mf = E::from_f(m as f64);
                            let start = xd.at(b, c, 0, 0);
                            for i in start..start + plane {
                                dx[i] = k * (mf * g[i] - sum_g[c] - x_hat[i] * sum_gx[c]);
                            }
                        }
                    }
                } else {
                    for b in 0..xd.n {
                        for c in 0..xd.c {
                            let k = gvals[c] * inv_std[c];
                            let start = xd.at(b, c, 0, 0);
                            for i in start..start + plane {
                                dx[i] = k * g[i];
                            }
                        }
                    }
                }
                grads.push((nid, dx));
            }
            if let Some(nid) = gn {
                grads.push((nid, sum_gx));
            }
            if let Some(nid) = bn {
                grads.push((nid, sum_g));
            }
            grads
        }))
    } else {
        None
    };
    tape.finish("batchnorm2d", xd, std::sync::Arc::new(out), record)
}
