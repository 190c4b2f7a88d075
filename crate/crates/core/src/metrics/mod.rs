//! Image quality metrics, the perceptual proxy as a reported distance, and
//! group statistics.

mod quality;
mod stats;

pub use quality::{gmsd, psnr, ssim, GMSD_C_255, SSIM_SIGMA, SSIM_WINDOW};
pub use stats::{
    bootstrap_ci, dunn_bonferroni, kruskal_wallis, midranks, DunnMatrix, KruskalWallis,
    BOOTSTRAP_ITERATIONS,
};

use crate::error::{Error, Result};
use crate::loss::perceptual_proxy;
use crate::report::{fmt_num, parse_num, Table};
use crate::scalar::Scalar;
use crate::tensor::TensorImage;

pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
    Gmsd,
    Perceptual,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Psnr, Metric::Ssim, Metric::Gmsd, Metric::Perceptual];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Gmsd => "gmsd",
            Metric::Perceptual => "perceptual_proxy",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Psnr | Metric::Ssim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
    pub gmsd: f64,
    pub perceptual: f64,
}

impl Scores {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Psnr => self.psnr,
            Metric::Ssim => self.ssim,
            Metric::Gmsd => self.gmsd,
            Metric::Perceptual => self.perceptual,
        }
    }
}

pub fn score_image<S: Scalar>(
    pred: &TensorImage<S>,
    gt: &TensorImage<S>,
    data_range: f64,
) -> Result<Scores> {
    Ok(Scores {
        psnr: psnr(pred, gt, data_range)?,
        ssim: ssim(pred, gt, data_range)?,
        gmsd: gmsd(pred, gt, data_range)?,
        perceptual: perceptual_proxy(pred, gt)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub method: String,
    pub id: String,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub metric: Metric,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single record.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricStatistics {
    pub metric: Metric,
    pub kruskal_wallis: KruskalWallis,
    /// Present only when the omnibus test rejects at [`ALPHA`].
    pub dunn: Option<DunnMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub records: Vec<ImageRecord>,
    /// Methods in order of first appearance.
    pub methods: Vec<String>,
    pub aggregates: Vec<Aggregate>,
    /// Empty with fewer than two methods.
    pub statistics: Vec<MetricStatistics>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 || !mean.is_finite() {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::arg("no records to report"));
        }
        let mut methods: Vec<String> = Vec::new();
        for r in &records {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
        }
        let column = |method: &str, m: Metric| -> Vec<f64> {
            records
                .iter()
                .filter(|r| r.method == method)
                .map(|r| r.scores.get(m))
                .collect()
        };
        let mut aggregates = Vec::new();
        for method in &methods {
            for m in Metric::ALL {
                let xs = column(method, m);
                let (mean, std) = mean_std(&xs);
                aggregates.push(Aggregate {
                    method: method.clone(),
                    metric: m,
                    n: xs.len(),
                    mean,
                    std,
                });
            }
        }
        let mut statistics = Vec::new();
        if methods.len() >= 2 {
            for m in Metric::ALL {
                let groups: Vec<Vec<f64>> =
                    methods.iter().map(|method| column(method, m)).collect();
                let kw = kruskal_wallis(&groups)?;
                let dunn = if kw.p_value < ALPHA {
                    Some(dunn_bonferroni(&groups)?)
                } else {
                    None
                };
                statistics.push(MetricStatistics {
                    metric: m,
                    kruskal_wallis: kw,
                    dunn,
                });
            }
        }
        Ok(MetricReport {
            records,
            methods,
            aggregates,
            statistics,
        })
    }

    pub fn aggregate(&self, method: &str, metric: Metric) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.metric == metric)
    }

    pub fn records_table(&self) -> Table {
        let mut t = Table::new(&["method", "id", "psnr", "ssim", "gmsd", "perceptual_proxy"]);
        for r in &self.records {
            let mut row = vec![r.method.clone(), r.id.clone()];
            row.extend(Metric::ALL.iter().map(|&m| fmt_num(r.scores.get(m))));
            t.push(row);
        }
        t
    }

    pub fn aggregate_table(&self) -> Table {
        let mut t = Table::new(&["method", "metric", "n", "mean", "std"]);
        for a in &self.aggregates {
            t.push(vec![
                a.method.clone(),
                a.metric.name().into(),
                a.n.to_string(),
                fmt_num(a.mean),
                fmt_num(a.std),
            ]);
        }
        t
    }

    pub fn statistics_table(&self) -> Table {
        let mut t = Table::new(&[
            "metric",
            "test",
            "group_a",
            "group_b",
            "statistic",
            "p_value",
        ]);
        for s in &self.statistics {
            let kw = s.kruskal_wallis;
            t.push(vec![
                s.metric.name().into(),
                "kruskal-wallis".into(),
                "*".into(),
                "*".into(),
                fmt_num(kw.h),
                fmt_num(kw.p_value),
            ]);
            if let Some(d) = &s.dunn {
                for i in 0..self.methods.len() {
                    for j in i + 1..self.methods.len() {
                        t.push(vec![
                            s.metric.name().into(),
                            "dunn-bonferroni".into(),
                            self.methods[i].clone(),
                            self.methods[j].clone(),
                            fmt_num(d.z[i][j]),
                            fmt_num(d.p_adjusted[i][j]),
                        ]);
                    }
                }
            }
        }
        t
    }

    /// Per-image rows, then aggregate and statistics sections, each
    /// preceded by a blank line.
    pub fn to_csv(&self) -> String {
        let mut out = self.records_table().to_csv();
        out.push('\n');
        out.push_str(&self.aggregate_table().to_csv());
        if !self.statistics.is_empty() {
            out.push('\n');
            out.push_str(&self.statistics_table().to_csv());
        }
        out
    }
}

/// Reads the per-image section of a report CSV, grouping by `groupby`.
pub fn parse_records(text: &str, groupby: &str) -> Result<Vec<ImageRecord>> {
    let t = Table::parse(text)?;
    let col = |name: &str| {
        t.column(name)
            .ok_or_else(|| Error::corrupt(format!("report CSV lacks a {name:?} column")))
    };
    let group = col(groupby)?;
    let id = col("id")?;
    let cols: Vec<usize> = Metric::ALL
        .iter()
        .map(|m| col(m.name()))
        .collect::<Result<_>>()?;
    t.rows
        .iter()
        .map(|r| {
            Ok(ImageRecord {
                method: r[group].clone(),
                id: r[id].clone(),
                scores: Scores {
                    psnr: parse_num(&r[cols[0]])?,
                    ssim: parse_num(&r[cols[1]])?,
                    gmsd: parse_num(&r[cols[2]])?,
                    perceptual: parse_num(&r[cols[3]])?,
                },
            })
        })
        .collect()
}
