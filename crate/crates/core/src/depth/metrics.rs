use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cut-off distances for the average absolute error buckets.
pub const CUTOFFS_M: [f64; 3] = [10.0, 20.0, 30.0];

/// Standard monocular depth metrics over valid pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub rmse_log: f64,
    pub silog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Mean absolute error over pixels with ground truth ≤ 10/20/30 m;
    /// `None` when no pixel falls in the bucket.
    pub err_cutoff: [Option<f64>; 3],
    pub valid_pixels: usize,
    pub cutoff_pixels: [usize; 3],
}

pub fn compute_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<MetricReport> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::shape(format!(
            "metric operands differ in length: {}, {}, {}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_log, mut sum_log) = (0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    let mut cut_sum = [0.0; 3];
    let mut cut_n = [0usize; 3];
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if !m {
            continue;
        }
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::Data(format!("non-positive depth on a valid pixel: pred {p}, gt {g}")));
        }
        n += 1;
        abs_rel += (p - g).abs() / g;
        let d = p.ln() - g.ln();
        sq_log += d * d;
        sum_log += d;
        let ratio = (p / g).max(g / p);
        for (k, w) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *w += 1;
            }
        }
        for (k, &c) in CUTOFFS_M.iter().enumerate() {
            if g <= c {
                cut_sum[k] += (p - g).abs();
                cut_n[k] += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("no valid pixels".into()));
    }
    let nf = n as f64;
    let mean_log = sum_log / nf;
    Ok(MetricReport {
        abs_rel: abs_rel / nf,
        rmse_log: (sq_log / nf).sqrt(),
        silog: (sq_log / nf - mean_log * mean_log).max(0.0),
        delta1: within[0] as f64 / nf,
        delta2: within[1] as f64 / nf,
        delta3: within[2] as f64 / nf,
        err_cutoff: std::array::from_fn(|k| (cut_n[k] > 0).then(|| cut_sum[k] / cut_n[k] as f64)),
        valid_pixels: n,
        cutoff_pixels: cut_n,
    })
}

impl MetricReport {
    /// Unweighted mean of several reports; cut-off buckets average only the
    /// reports where they are present.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        let err_cutoff = std::array::from_fn(|c| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.err_cutoff[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        });
        Some(MetricReport {
            abs_rel: avg(|r| r.abs_rel),
            rmse_log: avg(|r| r.rmse_log),
            silog: avg(|r| r.silog),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            err_cutoff,
            valid_pixels: reports.iter().map(|r| r.valid_pixels).sum(),
            cutoff_pixels: std::array::from_fn(|c| reports.iter().map(|r| r.cutoff_pixels[c]).sum()),
        })
    }

    fn entries(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("abs_rel", Some(self.abs_rel)),
            ("rmse_log", Some(self.rmse_log)),
            ("silog", Some(self.silog)),
            ("delta1", Some(self.delta1)),
            ("delta2", Some(self.delta2)),
            ("delta3", Some(self.delta3)),
            ("err_10m", self.err_cutoff[0]),
            ("err_20m", self.err_cutoff[1]),
            ("err_30m", self.err_cutoff[2]),
        ]
    }

    /// One `metric=value` line per metric; empty buckets print `absent`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            match v {
                Some(v) => writeln!(s, "{k}={v}"),
                None => writeln!(s, "{k}=absent"),
            }
            .expect("write to string");
        }
        s
    }

    /// Aligned table with a header row; `label` names the row.
    pub fn to_table(rows: &[(String, &MetricReport)]) -> String {
        let header = ["abs_rel", "rmse_log", "silog", "d<1.25", "d<1.25^2", "d<1.25^3", "10m", "20m", "30m"];
        let w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
        let mut s = format!("{:<w$}", "sequence");
        for h in header {
            write!(s, " {h:>9}").expect("write to string");
        }
        s.push('\n');
        for (label, r) in rows {
            write!(s, "{label:<w$}").expect("write to string");
            for (_, v) in r.entries() {
                match v {
                    Some(v) => write!(s, " {v:>9.4}"),
                    None => write!(s, " {:>9}", "-"),
                }
                .expect("write to string");
            }
            s.push('\n');
        }
        s
    }
}
