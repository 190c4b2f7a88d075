//! `rsrdiff` command-line tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rsrdiff::checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint};
use rsrdiff::config::RunConfig;
use rsrdiff::degradation::{degrade, gen_phantom, make_pair, PhantomKind, PhantomSpec};
use rsrdiff::experiment::{run_experiment, ExperimentConfig};
use rsrdiff::io::{read_tensor, tensor_dtype, write_pgm, write_tensor};
use rsrdiff::metrics::{parse_records, score_image, ImageRecord, MetricReport};
use rsrdiff::nn::{init_params, NetDenoiser};
use rsrdiff::trainer::train;
use rsrdiff::{
    build_schedule, run_sampler, sub_schedule, DType, Error, ImagePair, SamplerConfig, Scalar,
    ScheduleConfig, Variant,
};

#[derive(Parser)]
#[command(
    name = "rsrdiff",
    version,
    about = "Residual-shifting diffusion super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print or dump the noise schedule as CSV.
    Schedule(ScheduleArgs),
    /// Generate a synthetic phantom.
    Phantom(PhantomArgs),
    /// Produce the nearest-upsampled LR counterpart of an HR tensor.
    Degrade(DegradeArgs),
    /// Train a denoiser on a directory of HR tensors.
    Train(TrainArgs),
    /// Super-resolve an LR tensor with a trained checkpoint.
    Sample(SampleArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Rank statistics over a per-image report CSV.
    Stats(StatsArgs),
    /// Run the full train, sample, evaluate and ablate pipeline.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long = "T", default_value_t = 15)]
    steps: usize,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.3)]
    p: f64,
    #[arg(long = "beta-T", default_value_t = 0.9999)]
    beta_t: f64,
    #[arg(long = "beta-1", default_value_t = 4e-4)]
    beta_1: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: PhantomKind,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Super-resolution factor the lesion scale is tied to.
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write an 8-bit PGM preview.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long)]
    out_lr: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of HR tensors (`*.rsd`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long)]
    ckpt_out: PathBuf,
    /// Overrides the configured variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Per-step CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    lr: PathBuf,
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Refuse checkpoints of any other variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Run configuration supplying the schedule.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample in 64-bit precision.
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction directory; repeat for several methods, named after the directory.
    #[arg(long, required = true)]
    pred_dir: Vec<PathBuf>,
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    data_range: f64,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value = "method")]
    groupby: String,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment configuration; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Reuse checkpoints already in the output directory.
    #[arg(long)]
    skip_train: bool,
}

fn parse_kind(s: &str) -> Result<PhantomKind, String> {
    PhantomKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = PhantomKind::ALL.iter().map(|k| k.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| "expected conv or swin".to_string())
}

fn read_text(path: &Path) -> rsrdiff::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// `*.rsd` files of a directory in name order.
fn tensor_files(dir: &Path) -> rsrdiff::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rsd"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} holds no .rsd tensors",
            dir.display()
        )));
    }
    Ok(files)
}

fn schedule(args: ScheduleArgs) -> rsrdiff::Result<()> {
    let cfg = ScheduleConfig {
        beta_1: args.beta_1,
        ..ScheduleConfig::with_gamma(args.steps, args.gamma, args.p, args.beta_t)
    };
    let csv = build_schedule(&cfg)?.to_csv();
    match args.dump {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn phantom(args: PhantomArgs) -> rsrdiff::Result<()> {
    let spec = PhantomSpec {
        factor: args.factor,
        ..PhantomSpec::new(args.size, args.size, args.kind, args.seed)
    };
    let img = gen_phantom::<f64>(&spec)?;
    write_tensor(&args.out, &img)?;
    if let Some(pgm) = args.pgm {
        write_pgm(pgm, &img, 0.0, 1.0)?;
    }
    Ok(())
}

fn degrade_cmd(args: DegradeArgs) -> rsrdiff::Result<()> {
    let dtype = tensor_dtype(&fs::read(&args.input)?)?;
    match dtype {
        DType::F32 => write_tensor(
            &args.out_lr,
            &degrade(&read_tensor::<f32>(&args.input)?, args.factor)?,
        ),
        DType::F64 => write_tensor(
            &args.out_lr,
            &degrade(&read_tensor::<f64>(&args.input)?, args.factor)?,
        ),
    }
}

fn train_typed<S: Scalar>(args: &TrainArgs, run: &RunConfig) -> rsrdiff::Result<()> {
    let pairs: Vec<ImagePair<S>> = tensor_files(&args.data)?
        .iter()
        .map(|p| make_pair(&read_tensor::<S>(p)?, args.factor))
        .collect::<rsrdiff::Result<_>>()?;
    let schedule = build_schedule(&run.schedule)?;
    let params = init_params::<S>(&run.net, run.train.seed)?;
    let mut log: Option<Box<dyn Write>> = match &args.log {
        Some(p) => Some(Box::new(std::io::BufWriter::new(fs::File::create(p)?))),
        None => None,
    };
    let outcome = train(
        &pairs,
        params,
        &schedule,
        &run.net,
        &run.train,
        log.as_mut().map(|l| l.as_mut() as &mut dyn Write),
    );
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    let outcome = outcome?;
    save_checkpoint(&args.ckpt_out, &outcome.params, &run.net)?;
    if let Some(last) = outcome.history.last() {
        println!("trained {} steps, final loss {:.6e}", last.step, last.loss);
    }
    Ok(())
}

fn train_cmd(args: TrainArgs) -> rsrdiff::Result<()> {
    let mut run = match &args.config {
        Some(p) => RunConfig::parse(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.variant {
        run.net = run.net.with_variant(v);
    }
    if run.train.f64_mode {
        train_typed::<f64>(&args, &run)
    } else {
        train_typed::<f32>(&args, &run)
    }
}

fn sample_typed<S: Scalar>(
    args: &SampleArgs,
    schedule_cfg: &ScheduleConfig,
) -> rsrdiff::Result<()> {
    let (params, net) = match args.variant {
        Some(v) => load_checkpoint_as::<S>(&args.ckpt, v)?,
        None => load_checkpoint::<S>(&args.ckpt)?,
    };
    let denoiser = NetDenoiser::new(params, net)?;
    let schedule = build_schedule(schedule_cfg)?;
    let cfg = SamplerConfig::new(
        sub_schedule(&schedule, args.steps)?,
        schedule.gamma(),
        args.seed,
    );
    let lr = read_tensor::<S>(&args.lr)?;
    write_tensor(&args.out, &run_sampler(&lr, &denoiser, &cfg)?)
}

fn sample_cmd(args: SampleArgs) -> rsrdiff::Result<()> {
    let schedule = match &args.config {
        Some(p) => RunConfig::parse(&read_text(p)?)?.schedule,
        None => ScheduleConfig::default(),
    };
    if args.f64 {
        sample_typed::<f64>(&args, &schedule)
    } else {
        sample_typed::<f32>(&args, &schedule)
    }
}

fn eval_cmd(args: EvalArgs) -> rsrdiff::Result<()> {
    let gt_files = tensor_files(&args.gt_dir)?;
    let mut records = Vec::new();
    for dir in &args.pred_dir {
        let method = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        for gt_path in &gt_files {
            let name = gt_path.file_name().expect("listed files have names");
            let pred_path = dir.join(name);
            if !pred_path.exists() {
                return Err(Error::InvalidArgument(format!(
                    "{} has no prediction for {}",
                    dir.display(),
                    name.to_string_lossy()
                )));
            }
            let gt = read_tensor::<f64>(gt_path)?;
            let pred = read_tensor::<f64>(&pred_path)?;
            records.push(ImageRecord {
                method: method.clone(),
                id: gt_path
                    .file_stem()
                    .unwrap_or(name)
                    .to_string_lossy()
                    .into_owned(),
                scores: score_image(&pred, &gt, args.data_range)?,
            });
        }
    }
    let report = MetricReport::from_records(records)?;
    fs::write(&args.out, report.to_csv())?;
    print!("{}", report.aggregate_table().to_csv());
    Ok(())
}

fn stats_cmd(args: StatsArgs) -> rsrdiff::Result<()> {
    let records = parse_records(&read_text(&args.csv)?, &args.groupby)?;
    let report = MetricReport::from_records(records)?;
    print!("{}", report.aggregate_table().to_csv());
    println!();
    print!("{}", report.statistics_table().to_csv());
    Ok(())
}

fn experiment_cmd(args: ExperimentArgs) -> rsrdiff::Result<()> {
    let config = match &args.config {
        Some(p) => ExperimentConfig::parse(&read_text(p)?)?,
        None => ExperimentConfig::default(),
    };
    let outcome = run_experiment(&config, &args.out, args.skip_train)?;
    print!("{}", outcome.table1.to_csv());
    println!();
    print!("{}", outcome.table2.to_csv());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = rsrdiff::threads::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Schedule(a) => schedule(a),
        Command::Phantom(a) => phantom(a),
        Command::Degrade(a) => degrade_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Stats(a) => stats_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
