//! Regression metrics and per-dimension reports.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Aggregation;
use crate::error::{Error, Result};
use crate::{DIMENSIONS, N_TASKS};

fn check_pair(a: &[f64], b: &[f64], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < min_len {
        return Err(Error::Argument(format!("need at least {min_len} values, got {}", a.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input to metric".into()));
    }
    Ok(())
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 2)?;
    if is_constant(target) {
        return Err(Error::UndefinedMetric("r_squared: target is constant".into()));
    }
    let m = mean(target);
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        ss_res += (t - p) * (t - p);
        ss_tot += (t - m) * (t - m);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Sample correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    if is_constant(x) || is_constant(y) {
        return Err(Error::UndefinedMetric("pearson: zero variance input".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 1)?;
    let ss: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// Run settings a report was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub variant: String,
    pub label_mode: Aggregation,
    pub folds: usize,
    pub runs: usize,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "variant={} label_mode={} folds={} runs={}",
            self.variant, self.label_mode, self.folds, self.runs
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dimension: String,
    pub r_squared: f64,
    pub pearson: f64,
    pub rmse: f64,
}

/// Twelve metric rows in dimension order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub provenance: Provenance,
}

impl MetricsReport {
    pub fn mean_r_squared(&self) -> f64 {
        self.rows.iter().map(|r| r.r_squared).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_pearson(&self) -> f64 {
        self.rows.iter().map(|r| r.pearson).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_rmse(&self) -> f64 {
        self.rows.iter().map(|r| r.rmse).sum::<f64>() / self.rows.len() as f64
    }

    /// Element-wise arithmetic mean of several reports, summed in input order.
    pub fn average(reports: &[MetricsReport], provenance: Provenance) -> Result<MetricsReport> {
        let Some(first) = reports.first() else {
            return Err(Error::Argument("cannot average zero reports".into()));
        };
        if reports.iter().any(|r| r.rows.len() != first.rows.len()) {
            return Err(Error::Argument("reports have different row counts".into()));
        }
        let n = reports.len() as f64;
        let rows = (0..first.rows.len())
            .map(|i| {
                let (mut r2, mut rho, mut e) = (0.0, 0.0, 0.0);
                for rep in reports {
                    r2 += rep.rows[i].r_squared;
                    rho += rep.rows[i].pearson;
                    e += rep.rows[i].rmse;
                }
                MetricsRow {
                    dimension: first.rows[i].dimension.clone(),
                    r_squared: r2 / n,
                    pearson: rho / n,
                    rmse: e / n,
                }
            })
            .collect();
        Ok(MetricsReport { rows, provenance })
    }

    /// Report CSV: a `# ` provenance comment, a header, then one row per dimension.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# {}", self.provenance)?;
        writeln!(w, "dimension,r_squared,pearson,rmse")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.dimension, r.r_squared, r.pearson, r.rmse)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("report is ASCII")
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Applies the three metrics to each dimension's `(predictions, targets)` pair.
pub fn build_report(columns: &[(Vec<f64>, Vec<f64>)], provenance: Provenance) -> Result<MetricsReport> {
    if columns.len() != N_TASKS {
        return Err(Error::Argument(format!("expected {N_TASKS} dimensions, got {}", columns.len())));
    }
    let rows = columns
        .iter()
        .zip(DIMENSIONS)
        .map(|((pred, target), name)| {
            let row = (|| {
                Ok(MetricsRow {
                    dimension: name.to_string(),
                    r_squared: r_squared(pred, target)?,
                    pearson: pearson(pred, target)?,
                    rmse: rmse(pred, target)?,
                })
            })();
            row.map_err(|e: Error| e.context(format!("dimension {name}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { rows, provenance })
}

/// Long-format comparison CSV: `variant,dimension,r_squared,pearson,rmse`.
pub fn comparison_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from("variant,dimension,r_squared,pearson,rmse\n");
    for rep in reports {
        for r in &rep.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                rep.provenance.variant, r.dimension, r.r_squared, r.pearson, r.rmse
            );
        }
    }
    s
}

/// Side-by-side text table: one line per dimension, one `r² ρ rmse` column
/// group per report, and a closing line of column means.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let mut s = format!("{:<20}", "dimension");
    for rep in reports {
        let _ = write!(s, " | {:^26}", rep.provenance.variant);
    }
    s.push('\n');
    let _ = write!(s, "{:<20}", "");
    for _ in reports {
        let _ = write!(s, " | {:>8} {:>8} {:>8}", "r2", "rho", "rmse");
    }
    s.push('\n');
    let n_rows = reports.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    for i in 0..n_rows {
        let name = reports
            .iter()
            .find_map(|r| r.rows.get(i))
            .map_or("", |r| r.dimension.as_str());
        let _ = write!(s, "{name:<20}");
        for rep in reports {
            match rep.rows.get(i) {
                Some(r) => {
                    let _ = write!(s, " | {:>8.4} {:>8.4} {:>8.4}", r.r_squared, r.pearson, r.rmse);
                }
                None => {
                    let _ = write!(s, " | {:>26}", "");
                }
            }
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<20}", "mean");
    for rep in reports {
        let _ = write!(
            s,
            " | {:>8.4} {:>8.4} {:>8.4}",
            rep.mean_r_squared(),
            rep.mean_pearson(),
            rep.mean_rmse()
        );
    }
    s.push('\n');
    s
}
