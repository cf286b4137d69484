//! PSNR, fidelity and evaluation reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{write_bytes, write_json};
use crate::types::ForwardModel;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrFormula {
    /// `10 log10(max(f) / MSE)`.
    #[default]
    Linear,
    /// `10 log10(max(f)^2 / MSE)`.
    Standard,
}

impl std::str::FromStr for PsnrFormula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(PsnrFormula::Linear),
            "standard" => Ok(PsnrFormula::Standard),
            _ => Err(Error::Config(format!("unknown PSNR formula `{s}`"))),
        }
    }
}

/// PSNR in dB of `f_hat` against `f_true`; an exact match gives
/// [`PSNR_CAP_DB`].
pub fn psnr(f_hat: &[f64], f_true: &[f64], formula: PsnrFormula) -> Result<f64> {
    if f_hat.len() != f_true.len() || f_true.is_empty() {
        return Err(Error::Shape(format!(
            "PSNR of {} values against {}",
            f_hat.len(),
            f_true.len()
        )));
    }
    let max = f_true.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Domain(format!("PSNR needs max(f) > 0, got {max}")));
    }
    let mse = f_hat
        .iter()
        .zip(f_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / f_true.len() as f64;
    if mse.is_nan() {
        return Err(Error::Domain("PSNR of non-finite values".into()));
    }
    let peak = match formula {
        PsnrFormula::Linear => max,
        PsnrFormula::Standard => max * max,
    };
    let db = 10.0 * (peak / mse).log10();
    Ok(db.min(PSNR_CAP_DB))
}

/// PSNR between `A(f_hat)` and the observed measurement.
pub fn fidelity(f_hat: &[f64], g_true: &[f64], fm: &dyn ForwardModel, formula: PsnrFormula) -> Result<f64> {
    fm.check_signal_len(f_hat.len())?;
    fm.check_measurement_len(g_true.len())?;
    psnr(&fm.apply_flat(f_hat)?, g_true, formula)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub record: String,
    pub instance: usize,
    pub psnr_db: f64,
    pub fidelity_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub rows: usize,
    pub mean_psnr_db: f64,
    pub mean_fidelity_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub formula: PsnrFormula,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<MethodSummary>,
}

impl MetricsReport {
    /// Builds a report; summaries are per-method arithmetic means, listed
    /// in order of first appearance.
    pub fn new(formula: PsnrFormula, rows: Vec<ReportRow>) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut acc: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
        for r in &rows {
            let e = acc.entry(r.method.clone()).or_insert_with(|| {
                order.push(r.method.clone());
                (0, 0.0, 0.0)
            });
            e.0 += 1;
            e.1 += r.psnr_db;
            e.2 += r.fidelity_db;
        }
        let summary = order
            .into_iter()
            .map(|m| {
                let (n, p, f) = acc[&m];
                MethodSummary {
                    method: m,
                    rows: n,
                    mean_psnr_db: p / n as f64,
                    mean_fidelity_db: f / n as f64,
                }
            })
            .collect();
        MetricsReport {
            formula,
            config_hash: None,
            rows,
            summary,
        }
    }

    pub fn summary_for(&self, method: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,record,instance,psnr_db,fidelity_db\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method, r.record, r.instance, r.psnr_db, r.fidelity_db
            ));
        }
        s
    }

    /// Writes `report.csv` and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_bytes(&dir.join("report.csv"), self.to_csv().as_bytes())?;
        write_json(&dir.join("report.json"), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_psnr() {
        let t = [1.0, 1.0];
        let h = [1.0, 0.9];
        let p = psnr(&h, &t, PsnrFormula::Linear).unwrap();
        assert!((p - 10.0 * (1.0f64 / 0.005).log10()).abs() < 1e-12);
        assert!((p - 23.0103).abs() < 1e-4);
        assert_eq!(p, psnr(&h, &t, PsnrFormula::Standard).unwrap());
        assert_eq!(psnr(&t, &t, PsnrFormula::Linear).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn formulas_differ_when_max_is_not_one() {
        let t = [2.0, 0.0];
        let h = [1.9, 0.1];
        let p = psnr(&h, &t, PsnrFormula::Linear).unwrap();
        let s = psnr(&h, &t, PsnrFormula::Standard).unwrap();
        assert!((s - p - 10.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn psnr_errors() {
        assert_eq!(psnr(&[0.0], &[0.0], PsnrFormula::Linear).unwrap_err().kind(), "domain");
        assert_eq!(psnr(&[0.0], &[-1.0], PsnrFormula::Linear).unwrap_err().kind(), "domain");
        assert_eq!(psnr(&[0.0; 2], &[1.0], PsnrFormula::Linear).unwrap_err().kind(), "shape");
    }

    #[test]
    fn report_aggregates_are_means() {
        let row = |m: &str, r: &str, p, f| ReportRow {
            method: m.into(),
            record: r.into(),
            instance: 0,
            psnr_db: p,
            fidelity_db: f,
        };
        let rep = MetricsReport::new(
            PsnrFormula::Linear,
            vec![
                row("variational", "a", 10.0, 20.0),
                row("deterministic", "a", 5.0, 6.0),
                row("variational", "b", 14.0, 30.0),
                row("deterministic", "b", 7.0, 8.0),
            ],
        );
        assert_eq!(rep.rows.len(), 4);
        let v = rep.summary_for("variational").unwrap();
        assert_eq!((v.rows, v.mean_psnr_db, v.mean_fidelity_db), (2, 12.0, 25.0));
        assert_eq!(rep.summary[0].method, "variational");
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 5);
    }
}
