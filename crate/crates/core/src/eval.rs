//! Scoring reconstruction methods on a test set.

use rayon::prelude::*;

use crate::baselines::{tv_map_solve, TvConfig};
use crate::dataset::{record_id, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{fidelity, psnr, MetricsReport, PsnrFormula, ReportRow};
use crate::model::Model;
use crate::rng::{tag, SplitMix64};

/// How a method turns a measurement into estimates.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    Learned(&'a Model),
    Tv(&'a TvConfig),
}

#[derive(Debug, Clone, Copy)]
pub struct MethodSpec<'a> {
    pub label: &'a str,
    pub estimator: Estimator<'a>,
}

/// Seed for the instances drawn on record `index`.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    SplitMix64::derive(seed, &[tag("eval"), index as u64]).next_u64()
}

/// One row per (method, record, instance). Point estimators are evaluated
/// once per record and their row repeated for every instance.
pub fn evaluate(
    methods: &[MethodSpec<'_>],
    testset: &Dataset,
    instances: usize,
    seed: u64,
    formula: PsnrFormula,
) -> Result<MetricsReport> {
    if instances == 0 {
        return Err(Error::Config("instances must be at least 1".into()));
    }
    let fm = testset.physics.build()?;
    let mut rows = Vec::new();
    for m in methods {
        if let Estimator::Learned(model) = m.estimator {
            if model.system() != testset.system() {
                return Err(Error::SystemMismatch {
                    expected: testset.system(),
                    found: model.system(),
                });
            }
        }
        let per_record = testset
            .records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let g = r.g.as_flat();
                let estimates: Vec<Vec<f64>> = match m.estimator {
                    Estimator::Learned(model) => model
                        .reconstruct(g, instances, instance_seed(seed, i))?
                        .into_iter()
                        .map(|s| s.into_flat())
                        .collect(),
                    Estimator::Tv(cfg) => vec![tv_map_solve(g, fm.as_ref(), cfg)?.f.into_flat(); instances],
                };
                estimates
                    .iter()
                    .enumerate()
                    .map(|(k, f)| {
                        Ok(ReportRow {
                            method: m.label.to_string(),
                            record: record_id(i),
                            instance: k,
                            psnr_db: psnr(f, r.f.as_flat(), formula)?,
                            fidelity_db: fidelity(f, g, fm.as_ref(), formula)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(per_record.into_iter().flatten());
    }
    Ok(MetricsReport::new(formula, rows))
}
