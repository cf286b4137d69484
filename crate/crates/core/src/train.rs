//! Seeded mini-batch training with Adam.
//!
//! Every random choice is derived from `(seed, epoch, record index)`, so an
//! epoch's result depends only on the model state at its start. Per-example
//! gradients may be computed in parallel; they are summed in batch order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossTerms, Model, Noise, Objective};
use crate::nn::{clip_grad_norm, Adam, AdamConfig};
use crate::rng::{tag, SplitMix64};

/// Epoch means of the loss and its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub elbo: Option<f64>,
    pub consistency: Option<f64>,
    pub kl: Option<f64>,
    pub recon: Option<f64>,
    pub mse: Option<f64>,
}

impl EpochRow {
    pub const CSV_HEADER: &'static str = "epoch,loss,elbo,consistency,kl,recon,mse";

    pub fn csv_line(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{:e},{},{},{},{},{}",
            self.epoch,
            self.loss,
            o(self.elbo),
            o(self.consistency),
            o(self.kl),
            o(self.recon),
            o(self.mse)
        )
    }
}

pub fn curve_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from(EpochRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// One flattened training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

/// Model plus optimizer state and the loss curve so far.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub curve: Vec<EpochRow>,
}

fn mean_opt(terms: &[LossTerms], get: impl Fn(&LossTerms) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = terms.iter().map(get).collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let cfg = AdamConfig {
            lr: model.config().learning_rate,
            ..Default::default()
        };
        let opt = Adam::new(cfg, model.params());
        Trainer {
            model,
            opt,
            curve: Vec::new(),
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.curve.len()
    }

    fn check(&self, data: &[Example]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let fm = self.model.forward_model();
        for ex in data {
            fm.check_signal_len(ex.f.len())?;
            fm.check_measurement_len(ex.g.len())?;
        }
        Ok(())
    }

    /// Runs the next epoch and appends its row to the curve.
    pub fn run_epoch(&mut self, data: &[Example]) -> Result<EpochRow> {
        self.check(data)?;
        let cfg = self.model.config().clone();
        let epoch = self.epochs_done();
        let mut order: Vec<usize> = (0..data.len()).collect();
        SplitMix64::derive(cfg.seed, &[tag("epoch"), epoch as u64]).shuffle(&mut order);

        let mut all_terms = Vec::with_capacity(data.len());
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let model = &self.model;
            let results: Vec<Result<(LossTerms, _)>> = idx
                .par_iter()
                .map(|&i| {
                    let mut rng = SplitMix64::derive(cfg.seed, &[tag("noise"), epoch as u64, i as u64]);
                    let noise = Noise::draw(&cfg, &mut rng);
                    model.loss_and_grad(&data[i].f, &data[i].g, &noise, Objective::Hybrid)
                })
                .collect();
            let mut sum: Option<Vec<Option<Vec<f64>>>> = None;
            for r in results {
                let (terms, grads) = r?;
                if !terms.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch,
                        elbo: terms.elbo.unwrap_or(f64::NAN),
                        consistency: terms.consistency.or(terms.mse).unwrap_or(f64::NAN),
                    });
                }
                all_terms.push(terms);
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            match (a.as_mut(), g) {
                                (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                                (None, Some(g)) => *a = Some(g),
                                _ => {}
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / idx.len() as f64;
            for g in grads.iter_mut().flatten() {
                g.iter_mut().for_each(|x| *x *= inv);
            }
            let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch,
                    elbo: f64::NAN,
                    consistency: f64::NAN,
                });
            }
            self.opt.update(self.model.params_mut(), &grads);
        }
        let n = all_terms.len() as f64;
        let row = EpochRow {
            epoch: epoch + 1,
            loss: all_terms.iter().map(|t| t.loss).sum::<f64>() / n,
            elbo: mean_opt(&all_terms, |t| t.elbo),
            consistency: mean_opt(&all_terms, |t| t.consistency),
            kl: mean_opt(&all_terms, |t| t.kl),
            recon: mean_opt(&all_terms, |t| t.recon),
            mse: mean_opt(&all_terms, |t| t.mse),
        };
        self.curve.push(row);
        Ok(row)
    }

    /// Trains until `epochs_done() == config.epochs`, calling `on_epoch`
    /// after every epoch (e.g. to checkpoint).
    pub fn run(&mut self, data: &[Example], mut on_epoch: impl FnMut(&Trainer, &EpochRow) -> Result<()>) -> Result<()> {
        while self.epochs_done() < self.model.config().epochs {
            let row = self.run_epoch(data)?;
            on_epoch(self, &row)?;
        }
        Ok(())
    }
}
