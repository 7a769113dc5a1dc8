use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RUNLOG_HEADER: &str = "step,stage,loss,lr,tokens,images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
    /// Cumulative positions processed.
    pub tokens: u64,
    /// Cumulative images processed.
    pub images: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: StepRecord) {
        self.records.push(r);
    }

    pub fn stage<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a StepRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// CSV with full round-trip precision for floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(RUNLOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{},{},{:?},{:?},{},{}", r.step, r.stage, r.loss, r.lr, r.tokens, r.images);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == RUNLOG_HEADER => {}
            _ => return Err(Error::Schema { line: 1, message: format!("expected header {RUNLOG_HEADER}") }),
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Schema { line: i + 1, message: m.to_string() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 columns"));
            }
            records.push(StepRecord {
                step: f[0].parse().map_err(|_| bad("bad step"))?,
                stage: f[1].to_string(),
                loss: f[2].parse().map_err(|_| bad("bad loss"))?,
                lr: f[3].parse().map_err(|_| bad("bad lr"))?,
                tokens: f[4].parse().map_err(|_| bad("bad tokens"))?,
                images: f[5].parse().map_err(|_| bad("bad images"))?,
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// Mean loss over the last `n` records.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let k = n.min(self.records.len());
        (k > 0).then(|| self.records[self.records.len() - k..].iter().map(|r| r.loss).sum::<f64>() / k as f64)
    }
}

/// Summary of two aligned loss curves; gaps are `a - b`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossComparison {
    pub aligned_steps: usize,
    pub mean_gap: f64,
    pub final_window: usize,
    pub final_window_gap: f64,
    /// (step, loss_a, loss_b) for every aligned step.
    #[serde(skip)]
    pub rows: Vec<(usize, f64, f64)>,
}

impl LossComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_a,loss_b,gap\n");
        for (s, a, b) in &self.rows {
            let _ = writeln!(out, "{s},{a:?},{b:?},{:?}", a - b);
        }
        out
    }
}

/// Compare two runs over the steps they share. The final window covers the
/// last `window` shared steps.
pub fn compare_loss_curves(a: &RunLog, b: &RunLog, window: usize) -> Result<LossComparison> {
    let b_by_step: std::collections::BTreeMap<usize, f64> = b.records.iter().map(|r| (r.step, r.loss)).collect();
    let rows: Vec<(usize, f64, f64)> = a
        .records
        .iter()
        .filter_map(|r| b_by_step.get(&r.step).map(|&lb| (r.step, r.loss, lb)))
        .collect();
    if rows.is_empty() {
        return Err(Error::Invalid("the two logs share no steps".into()));
    }
    let mean = |rs: &[(usize, f64, f64)]| rs.iter().map(|(_, a, b)| a - b).sum::<f64>() / rs.len() as f64;
    let w = window.clamp(1, rows.len());
    Ok(LossComparison {
        aligned_steps: rows.len(),
        mean_gap: mean(&rows),
        final_window: w,
        final_window_gap: mean(&rows[rows.len() - w..]),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(losses: &[f64], first_step: usize) -> RunLog {
        RunLog {
            records: losses
                .iter()
                .enumerate()
                .map(|(i, &loss)| StepRecord {
                    step: first_step + i,
                    stage: "pretrain".into(),
                    loss,
                    lr: 1e-3,
                    tokens: 10 * i as u64,
                    images: i as u64,
                })
                .collect(),
        }
    }

    #[test]
    fn identical_logs_have_zero_gap() {
        let a = log(&[3.0, 2.5, 2.0], 1);
        let c = compare_loss_curves(&a, &a, 2).unwrap();
        assert_eq!((c.mean_gap, c.final_window_gap), (0.0, 0.0));
    }

    #[test]
    fn constant_offset() {
        let b = log(&[3.0, 2.5, 2.0, 1.75], 1);
        let a = log(&[3.3, 2.8, 2.3, 2.05], 1);
        let c = compare_loss_curves(&a, &b, 2).unwrap();
        assert!((c.mean_gap - 0.3).abs() < 1e-12);
        assert!((c.final_window_gap - 0.3).abs() < 1e-12);
    }

    #[test]
    fn disjoint_ranges_error() {
        assert!(compare_loss_curves(&log(&[1.0], 1), &log(&[1.0], 5), 1).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let a = log(&[0.1 + 0.2, 1.0 / 3.0], 1);
        assert_eq!(RunLog::from_csv(&a.to_csv()).unwrap(), a);
        assert!(a.to_csv().starts_with("step,stage,loss,lr,tokens,images\n"));
    }
}
