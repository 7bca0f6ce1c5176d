//! Training loop over the combined objective.
//!
//! All randomness is keyed by `(seed, step)`: minibatch order comes from
//! per-epoch permutations and masking/negative sampling from per-step
//! streams. A run resumed from a checkpoint at step `k` therefore replays
//! exactly the same steps as an uninterrupted run.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedArray, OptimizerState, RngState};
use crate::config::{OptimConfig, TrainConfig};
use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::objective::{combined_loss, LossBundle, TrainBatch};
use crate::seeds::{self, Stream};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_g: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_m: Option<f64>,
    pub total: f64,
    pub wall_ms: u64,
}

impl StepRecord {
    fn new(step: u64, b: &LossBundle, wall_ms: u64) -> Self {
        Self {
            step,
            l_g: b.l_g,
            l_l: b.l_l,
            l_i: b.l_i,
            l_m: b.l_m,
            total: b.total,
            wall_ms,
        }
    }

    /// The record without its timing field, for reproducibility comparisons.
    pub fn losses(&self) -> (u64, u64, Option<u64>, Option<u64>, Option<u64>, u64) {
        (
            self.step,
            self.l_g.to_bits(),
            self.l_l.map(f64::to_bits),
            self.l_i.map(f64::to_bits),
            self.l_m.map(f64::to_bits),
            self.total.to_bits(),
        )
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only; a
/// parameter without a gradient in a step is left untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimConfig,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                None => (g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor();
            let mut next = (theta - (update * c.lr)?)?;
            if var.rank() >= 2 && c.weight_decay > 0.0 {
                next = (next - (theta * (c.lr * c.weight_decay))?)?;
            }
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn state(&self) -> Result<OptimizerState> {
        let dump = |map: &BTreeMap<String, Tensor>| -> Result<Vec<NamedArray>> {
            map.iter().map(|(n, t)| NamedArray::from_tensor(n, t)).collect()
        };
        Ok(OptimizerState {
            t: self.t,
            m: dump(&self.m)?,
            v: dump(&self.v)?,
        })
    }

    pub fn from_state(cfg: OptimConfig, state: &OptimizerState) -> Result<Self> {
        let load = |arrs: &[NamedArray]| -> Result<BTreeMap<String, Tensor>> {
            arrs.iter().map(|a| Ok((a.name.clone(), a.to_tensor()?))).collect()
        };
        Ok(Self {
            cfg,
            t: state.t,
            m: load(&state.m)?,
            v: load(&state.v)?,
        })
    }
}

/// Dataset positions used at `step` (0-based): consecutive slices of a
/// stream of per-epoch permutations.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let start = step as usize * batch;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = start / n;
    let mut perm = epoch_permutation(seed, epoch as u64, n);
    for pos in start..start + batch {
        if pos / n != epoch {
            epoch = pos / n;
            perm = epoch_permutation(seed, epoch as u64, n);
        }
        out.push(perm[pos % n]);
    }
    out
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut seeds::rng(seed, Stream::Epoch, epoch));
    p
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    opt: AdamW,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::from_config(&cfg, DType::F32)?;
        let opt = AdamW::new(cfg.optim);
        Ok(Self {
            cfg,
            model,
            opt,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.config.clone();
        let model = ckpt.to_model()?;
        let opt = AdamW::from_state(cfg.optim, &ckpt.optimizer)?;
        Ok(Self {
            cfg,
            model,
            opt,
            step: ckpt.step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Extends the run's step budget, e.g. when resuming with a larger `steps`.
    pub fn set_total_steps(&mut self, steps: u64) {
        self.cfg.steps = steps;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn train_step(&mut self, corpus: &[SyntheticSample]) -> Result<StepRecord> {
        if corpus.is_empty() {
            return Err(Error::invalid("training corpus is empty"));
        }
        let t0 = Instant::now();
        let idx = batch_indices(self.cfg.seed, self.step, self.cfg.batch_size, corpus.len());
        let samples: Vec<&SyntheticSample> = idx.iter().map(|&i| &corpus[i]).collect();
        let batch = TrainBatch::new(&samples, &self.cfg.model, DType::F32)?;
        let (bundle, total) = combined_loss(&self.model, &batch, &self.cfg, self.step)?;
        let grads = total.backward()?;
        self.opt.step(self.model.params(), &grads)?;
        self.step += 1;
        Ok(StepRecord::new(self.step, &bundle, t0.elapsed().as_millis() as u64))
    }

    /// Trains until `cfg.steps`, handing each record to `on_record` as it is
    /// produced.
    pub fn run<F>(&mut self, corpus: &[SyntheticSample], mut on_record: F) -> Result<Vec<StepRecord>>
    where
        F: FnMut(&StepRecord) -> Result<()>,
    {
        let mut out = Vec::new();
        while self.step < self.cfg.steps {
            let rec = self.train_step(corpus)?;
            on_record(&rec)?;
            if rec.step % 50 == 0 {
                log::info!("step {} total {:.4}", rec.step, rec.total);
            }
            out.push(rec);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let params = self
            .model
            .params()
            .iter()
            .map(|(n, v)| NamedArray::from_tensor(n, v.as_tensor()))
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            rng: RngState {
                seed: self.cfg.seed,
                next_step: self.step,
            },
            params,
            optimizer: self.opt.state()?,
        })
    }
}

/// Trains a fresh model for `cfg.steps` steps.
pub fn train(cfg: &TrainConfig, dataset: &[SyntheticSample]) -> Result<(Checkpoint, Vec<StepRecord>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let log = trainer.run(dataset, |_| Ok(()))?;
    Ok((trainer.checkpoint()?, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen = vec![0; n];
        for step in 0..5 {
            for i in batch_indices(3, step, 2, n) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        // batches straddling an epoch boundary still have the right size
        assert_eq!(batch_indices(3, 3, 3, n).len(), 3);
        assert_eq!(batch_indices(3, 7, 4, n), batch_indices(3, 7, 4, n));
    }

    #[test]
    fn zero_steps_is_initialization() {
        let mut cfg = TrainConfig::default();
        cfg.steps = 0;
        cfg.model.embed_dim = 16;
        cfg.model.depth = 1;
        let corpus = crate::data::generate_corpus(4, &cfg.data, 0).unwrap();
        let (ckpt, log) = train(&cfg, &corpus).unwrap();
        assert!(log.is_empty());
        assert_eq!(ckpt.step, 0);
        let fresh = Model::from_config(&cfg, DType::F32).unwrap();
        for (a, (name, v)) in ckpt.params.iter().zip(fresh.params().iter()) {
            assert_eq!(&a.name, name);
            assert_eq!(a, &NamedArray::from_tensor(name, v.as_tensor()).unwrap());
        }
        assert!(train(&cfg, &[]).is_err());
    }
}
