//! Desk-scale end-to-end run: phantoms → degradation → training of both
//! variants → K-step sampling → metrics → ablation tables.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint_as, save_checkpoint};
use crate::config::{RunConfig, Settings};
use crate::degradation::{gen_phantom, make_pair, PhantomKind, PhantomSpec};
use crate::diffusion::ImagePair;
use crate::error::{Error, Result};
use crate::metrics::{mean_std, score_image, ImageRecord, Metric, MetricReport};
use crate::nn::{init_params, NetConfig, NetDenoiser, ParamSet, Variant};
use crate::report::{fmt_num, Table};
use crate::sampler::{run_sampler_stream, SamplerConfig};
use crate::scalar::Scalar;
use crate::scheduler::{build_schedule, sub_schedule, Schedule, ScheduleConfig};
use crate::tensor::TensorImage;
use crate::trainer::{train, TrainConfig};

pub const NEAREST: &str = "nearest";
const TEST_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub factor: usize,
    pub sample_steps: usize,
    pub data_seed: u64,
    pub sample_seed: u64,
    pub data_range: f64,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_train: 200,
            n_test: 40,
            size: 32,
            factor: 4,
            sample_steps: 4,
            data_seed: 1,
            sample_seed: 2,
            data_range: 1.0,
            run: RunConfig {
                schedule: ScheduleConfig::default(),
                net: NetConfig {
                    base_channels: 8,
                    depth: 2,
                    use_window_attention: true,
                    window_size: 4,
                    heads: 2,
                    time_embed_dim: 16,
                },
                train: TrainConfig {
                    lr_max: 2e-3,
                    warmup_steps: 100,
                    total_steps: 2000,
                    batch_size: 8,
                    seed: 3,
                    ..TrainConfig::default()
                },
            },
        }
    }
}

impl ExperimentConfig {
    /// A few phantoms and 200 steps: exercises every stage quickly.
    pub fn smoke() -> Self {
        let mut c = ExperimentConfig {
            n_train: 8,
            n_test: 4,
            ..ExperimentConfig::default()
        };
        c.run.train.total_steps = 200;
        c.run.train.warmup_steps = 20;
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::parse(text)?;
        let base = match s.take::<String>("preset")?.as_deref() {
            None | Some("desk") => ExperimentConfig::default(),
            Some("smoke") => ExperimentConfig::smoke(),
            Some(other) => return Err(Error::config(format!("unknown preset {other:?}"))),
        };
        let c = ExperimentConfig {
            n_train: s.take_or("n_train", base.n_train)?,
            n_test: s.take_or("n_test", base.n_test)?,
            size: s.take_or("size", base.size)?,
            factor: s.take_or("factor", base.factor)?,
            sample_steps: s.take_or("sample_steps", base.sample_steps)?,
            data_seed: s.take_or("data_seed", base.data_seed)?,
            sample_seed: s.take_or("sample_seed", base.sample_seed)?,
            data_range: s.take_or("data_range", base.data_range)?,
            run: RunConfig::take_from(&mut s, &base.run)?,
        };
        s.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("n_train and n_test must be positive"));
        }
        if self.factor == 0 || !self.size.is_multiple_of(self.factor) {
            return Err(Error::config(format!(
                "factor {} must divide the phantom size {}",
                self.factor, self.size
            )));
        }
        if self.sample_steps == 0 || self.sample_steps > self.run.schedule.steps {
            return Err(Error::config(format!(
                "sample_steps must be in 1..={}",
                self.run.schedule.steps
            )));
        }
        if self.size < self.run.net.min_side() {
            return Err(Error::config(format!(
                "phantom size {} is below the network minimum {}",
                self.size,
                self.run.net.min_side()
            )));
        }
        PhantomSpec {
            factor: self.factor,
            ..PhantomSpec::new(self.size, self.size, PhantomKind::CheckerLesion, 0)
        }
        .validate()?;
        self.run.schedule.validate()?;
        self.run.net.validate()?;
        self.run.train.validate()
    }
}

/// Phantom `index` of a corpus: kinds cycle through all three.
pub fn phantom_spec(config: &ExperimentConfig, index: usize, test: bool) -> PhantomSpec {
    let kind = PhantomKind::ALL[index % PhantomKind::ALL.len()];
    let offset = if test { TEST_SEED_OFFSET } else { 0 };
    PhantomSpec {
        factor: config.factor,
        ..PhantomSpec::new(
            config.size,
            config.size,
            kind,
            config
                .data_seed
                .wrapping_mul(1_000_003)
                .wrapping_add(offset + index as u64),
        )
    }
}

pub fn make_corpus<S: Scalar>(
    config: &ExperimentConfig,
    n: usize,
    test: bool,
) -> Result<Vec<ImagePair<S>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            make_pair(
                &gen_phantom::<S>(&phantom_spec(config, i, test))?,
                config.factor,
            )
        })
        .collect()
}

/// Samples every LR image of `pairs`, slice `i` on noise stream `i`.
pub fn sample_all<S: Scalar>(
    pairs: &[ImagePair<S>],
    denoiser: &NetDenoiser<S>,
    schedule: &Schedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<TensorImage<S>>> {
    let cfg = SamplerConfig::new(sub_schedule(schedule, steps)?, schedule.gamma(), seed);
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| run_sampler_stream(p.lr(), denoiser, &cfg, i as u64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub method: String,
    pub train_seconds: Option<f64>,
    pub seconds_per_slice: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricReport,
    pub timing: Vec<Timing>,
    pub table1: Table,
    pub table2: Table,
    pub out_dir: PathBuf,
}

pub fn table1(report: &MetricReport) -> Table {
    let mut header = vec!["method".to_string(), "n".to_string()];
    for m in Metric::ALL {
        header.push(format!("{}_mean", m.name()));
        header.push(format!("{}_std", m.name()));
    }
    let mut t = Table {
        header,
        rows: Vec::new(),
    };
    for method in &report.methods {
        let mut row = vec![method.clone()];
        let mut n = 0;
        let mut cells = Vec::new();
        for m in Metric::ALL {
            let a = report
                .aggregate(method, m)
                .expect("aggregate for every method");
            n = a.n;
            cells.push(fmt_num(a.mean));
            cells.push(fmt_num(a.std));
        }
        row.push(n.to_string());
        row.extend(cells);
        t.push(row);
    }
    t
}

/// With vs without window attention, one row per metric; `change_percent`
/// is `(without − with)/|with|·100`.
pub fn table2(report: &MetricReport) -> Result<Table> {
    let mut t = Table::new(&[
        "metric",
        "with_attention_mean",
        "with_attention_std",
        "without_attention_mean",
        "without_attention_std",
        "change_percent",
    ]);
    for m in Metric::ALL {
        let get = |v: Variant| {
            report
                .aggregate(v.name(), m)
                .ok_or_else(|| Error::arg(format!("report has no {} records", v.name())))
        };
        let with = get(Variant::Swin)?;
        let without = get(Variant::Conv)?;
        let change = (without.mean - with.mean) / with.mean.abs() * 100.0;
        t.push(vec![
            m.name().into(),
            fmt_num(with.mean),
            fmt_num(with.std),
            fmt_num(without.mean),
            fmt_num(without.std),
            fmt_num(change),
        ]);
    }
    Ok(t)
}

fn timing_table(timing: &[Timing]) -> Table {
    let mut t = Table::new(&["method", "train_seconds", "seconds_per_slice"]);
    for r in timing {
        t.push(vec![
            r.method.clone(),
            r.train_seconds.map(fmt_num).unwrap_or_else(|| "nan".into()),
            fmt_num(r.seconds_per_slice),
        ]);
    }
    t
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

pub fn checkpoint_path(out_dir: &Path, variant: Variant) -> PathBuf {
    out_dir.join(format!("{}.ckpt", variant.name()))
}

fn train_variant<S: Scalar>(
    config: &ExperimentConfig,
    variant: Variant,
    pairs: &[ImagePair<S>],
    schedule: &Schedule,
    out_dir: &Path,
) -> Result<(ParamSet<S>, f64)> {
    let net = config.run.net.with_variant(variant);
    let params = init_params::<S>(&net, config.run.train.seed)?;
    let mut log = BufWriter::new(File::create(
        out_dir.join(format!("train_{}.csv", variant.name())),
    )?);
    let start = Instant::now();
    let result = train(
        pairs,
        params,
        schedule,
        &net,
        &config.run.train,
        Some(&mut log),
    );
    log.flush()?;
    let outcome = result?;
    let secs = start.elapsed().as_secs_f64();
    save_checkpoint(checkpoint_path(out_dir, variant), &outcome.params, &net)?;
    Ok((outcome.params, secs))
}

fn run_typed<S: Scalar>(
    config: &ExperimentConfig,
    out_dir: &Path,
    skip_train: bool,
) -> Result<ExperimentOutcome> {
    let schedule = stage("schedule", build_schedule(&config.run.schedule))?;
    let test = stage("phantoms", make_corpus::<S>(config, config.n_test, true))?;

    let mut records: Vec<ImageRecord> = Vec::new();
    let mut timing = Vec::new();
    let score_all = |method: &str, preds: &[TensorImage<S>]| -> Result<Vec<ImageRecord>> {
        preds
            .par_iter()
            .zip(&test)
            .enumerate()
            .map(|(i, (p, pair))| {
                Ok(ImageRecord {
                    method: method.to_string(),
                    id: i.to_string(),
                    scores: score_image(p, pair.hr(), config.data_range)?,
                })
            })
            .collect()
    };

    let baseline: Vec<TensorImage<S>> = test.iter().map(|p| p.lr().clone()).collect();
    records.extend(stage("evaluate", score_all(NEAREST, &baseline))?);

    let train_pairs = if skip_train {
        Vec::new()
    } else {
        stage("phantoms", make_corpus::<S>(config, config.n_train, false))?
    };
    for variant in [Variant::Conv, Variant::Swin] {
        let (params, train_seconds) = if skip_train {
            let (p, _) = stage(
                "load",
                load_checkpoint_as::<S>(checkpoint_path(out_dir, variant), variant),
            )?;
            (p, None)
        } else {
            let name = match variant {
                Variant::Conv => "train-conv",
                Variant::Swin => "train-swin",
            };
            let (p, s) = stage(
                name,
                train_variant(config, variant, &train_pairs, &schedule, out_dir),
            )?;
            (p, Some(s))
        };
        let net = config.run.net.with_variant(variant);
        let denoiser = stage("load", NetDenoiser::new(params, net))?;
        let start = Instant::now();
        let preds = stage(
            "sample",
            sample_all(
                &test,
                &denoiser,
                &schedule,
                config.sample_steps,
                config.sample_seed,
            ),
        )?;
        timing.push(Timing {
            method: variant.name().into(),
            train_seconds,
            seconds_per_slice: start.elapsed().as_secs_f64() / test.len() as f64,
        });
        records.extend(stage("evaluate", score_all(variant.name(), &preds))?);
    }

    let report = stage("evaluate", MetricReport::from_records(records))?;
    let t1 = table1(&report);
    let t2 = stage("report", table2(&report))?;
    stage(
        "report",
        fs::write(out_dir.join("report.csv"), report.to_csv()).map_err(Error::from),
    )?;
    stage(
        "report",
        fs::write(out_dir.join("table1.csv"), t1.to_csv()).map_err(Error::from),
    )?;
    stage(
        "report",
        fs::write(out_dir.join("table2.csv"), t2.to_csv()).map_err(Error::from),
    )?;
    stage(
        "report",
        fs::write(out_dir.join("timing.csv"), timing_table(&timing).to_csv()).map_err(Error::from),
    )?;
    Ok(ExperimentOutcome {
        report,
        timing,
        table1: t1,
        table2: t2,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Runs every stage and writes `table1.csv`, `table2.csv`, `timing.csv`,
/// `report.csv`, per-variant training logs and checkpoints to `out_dir`.
/// With `skip_train`, checkpoints already in `out_dir` are reused.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    skip_train: bool,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    if config.run.train.f64_mode {
        run_typed::<f64>(config, out_dir, skip_train)
    } else {
        run_typed::<f32>(config, out_dir, skip_train)
    }
}

/// Mean over records of one method.
pub fn method_mean(report: &MetricReport, method: &str, metric: Metric) -> Option<f64> {
    let xs: Vec<f64> = report
        .records
        .iter()
        .filter(|r| r.method == method)
        .map(|r| r.scores.get(metric))
        .collect();
    (!xs.is_empty()).then(|| mean_std(&xs).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::smoke();
        c.n_train = 3;
        c.n_test = 2;
        c.size = 16;
        c.run.net.depth = 1;
        c.run.net.base_channels = 4;
        c.run.train.total_steps = 4;
        c.run.train.warmup_steps = 1;
        c.run.train.batch_size = 2;
        c
    }

    #[test]
    fn config_parsing_and_presets() {
        let c = ExperimentConfig::parse("preset = smoke\nn_test = 3\nbase_channels = 4").unwrap();
        assert_eq!(c.n_train, 8);
        assert_eq!(c.n_test, 3);
        assert_eq!(c.run.net.base_channels, 4);
        assert_eq!(
            ExperimentConfig::parse("").unwrap(),
            ExperimentConfig::default()
        );
        assert!(ExperimentConfig::parse("preset = huge").is_err());
        assert!(ExperimentConfig::parse("factor = 5").is_err());
        assert!(ExperimentConfig::parse("sample_steps = 16").is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_disjoint() {
        let c = tiny();
        let a = make_corpus::<f64>(&c, 3, false).unwrap();
        assert_eq!(a, make_corpus::<f64>(&c, 3, false).unwrap());
        let t = make_corpus::<f64>(&c, 3, true).unwrap();
        assert!(a.iter().zip(&t).all(|(x, y)| x.hr() != y.hr()));
    }

    #[test]
    fn tiny_run_is_reproducible_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let first = run_experiment(&c, dir.path(), false).unwrap();
        let t1 = fs::read_to_string(dir.path().join("table1.csv")).unwrap();
        let t2 = fs::read_to_string(dir.path().join("table2.csv")).unwrap();
        assert_eq!(first.table2.rows.len(), 4);
        assert_eq!(first.report.methods, vec![NEAREST, "conv", "swin"]);
        let second = run_experiment(&c, dir.path(), false).unwrap();
        assert_eq!(second.table1, first.table1);
        assert_eq!(
            fs::read_to_string(dir.path().join("table2.csv")).unwrap(),
            t2
        );

        fs::remove_file(dir.path().join("train_conv.csv")).unwrap();
        let resumed = run_experiment(&c, dir.path(), true).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("table1.csv")).unwrap(),
            t1
        );
        assert!(!dir.path().join("train_conv.csv").exists());
        assert!(resumed.timing.iter().all(|t| t.train_seconds.is_none()));
    }

    #[test]
    fn skip_train_without_checkpoints_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&tiny(), dir.path(), true).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "load", .. }), "{err}");
    }
}
