//! Command-line front end: `generate`, `train` and `eval`.
//!
//! Relative output paths are resolved under `$SSOD_OUTPUT_ROOT` when that
//! variable is set. Every `train` flag has a key of the same name (with
//! underscores) in the config file; flags win over the file.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{generate, split, Dataset, SynthParams};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::{coco_thresholds, EvalReport};
use crate::teacher_student::{evaluate_model, run, RunSummary};
pub use config::{ExperimentConfig, Precision};

pub const OUTPUT_ROOT_ENV: &str = "SSOD_OUTPUT_ROOT";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "ssod", version, about = "Semi-supervised single-stage detection on synthetic fracture images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset (PGM images plus manifest.json).
    Generate(GenerateArgs),
    /// Train a teacher-student pair, or a supervised baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Number of training images.
    #[arg(long)]
    pub n: usize,
    /// Number of held-out test images.
    #[arg(long, default_value_t = 0)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Mark this fraction of the training images as labeled.
    #[arg(long)]
    pub labeled_frac: Option<f64>,
    /// Force every image to contain exactly this many gaps (1 to 3).
    #[arg(long)]
    pub gaps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub labeled_frac: Option<f64>,
    /// Unsupervised loss weight; a `,` or `|` separated list runs a sweep.
    #[arg(long)]
    pub lambda: Option<String>,
    /// Pseudo-label confidence threshold; list values run a sweep.
    #[arg(long)]
    pub sigma: Option<String>,
    /// Fusion threshold; list values run a sweep.
    #[arg(long)]
    pub mu: Option<String>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub no_adso: bool,
    #[arg(long)]
    pub no_fusion_box: bool,
    #[arg(long)]
    pub no_dex: bool,
    #[arg(long)]
    pub supervised_only: bool,
    #[arg(long)]
    pub teacher_strong: bool,
    #[arg(long)]
    pub ema_rate: Option<f64>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub sample_ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Save the student after every step (for EMA replay checks).
    #[arg(long)]
    pub trace_students: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// IoU thresholds; defaults to 0.50:0.05:0.95.
    #[arg(long, value_delimiter = ',')]
    pub iou: Vec<f64>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolve a relative output path under `$SSOD_OUTPUT_ROOT`.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

/// Parse a sweep list such as `0.4|0.5,0.6`.
pub fn parse_list(key: &str, text: &str) -> Result<Vec<f64>> {
    let vals: Result<Vec<f64>> = text
        .split([',', '|'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("--{key}: cannot parse {s:?} as a number")))
        })
        .collect();
    let vals = vals?;
    if vals.is_empty() {
        return Err(Error::Config(format!("--{key}: empty list")));
    }
    Ok(vals)
}

pub fn run_cli(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf> {
    let out = output_path(&args.out);
    let mut params = SynthParams::default();
    if let Some(g) = args.gaps {
        params.gaps_per_image = (g, g);
    }
    let mut manifest = generate(&out, args.seed, args.n, args.n_test, &params)?;
    if let Some(f) = args.labeled_frac {
        manifest = split(&manifest, f, args.seed)?;
        manifest.save(&out.join(crate::data::MANIFEST_FILE))?;
    }
    Ok(out)
}

/// One point of a sweep: the config and the directory it writes into.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainJob {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

/// Merge the config file and flags, then expand sweep lists into jobs.
pub fn plan_train(args: &TrainArgs) -> Result<Vec<TrainJob>> {
    let mut base = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &args.dataset {
        base.dataset = d.to_string_lossy().into_owned();
    }
    if base.dataset.is_empty() {
        return Err(Error::Config("no dataset given (use --dataset or the config key)".into()));
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field { base.$field = v; }
        )*};
    }
    set!(iterations, seed, r, ema_rate, burn_in, eval_interval, checkpoint_interval, lr, batch_size, sample_ratio, precision);
    if let Some(f) = args.labeled_frac {
        base.labeled_fraction = Some(f);
    }
    if args.no_adso {
        base.adso = false;
    }
    if args.no_fusion_box {
        base.fusion_box = false;
    }
    if args.no_dex {
        base.dex = false;
    }
    base.supervised_only |= args.supervised_only;
    base.teacher_strong |= args.teacher_strong;
    base.trace_students |= args.trace_students;

    let out = output_path(&args.out);
    let mut jobs = vec![TrainJob { config: base, out_dir: out }];
    let sweeps: [(&str, &Option<String>, fn(&mut ExperimentConfig, f64)); 3] = [
        ("lambda", &args.lambda, |c, v| c.lambda = v),
        ("sigma", &args.sigma, |c, v| c.sigma = v),
        ("mu", &args.mu, |c, v| c.mu = v),
    ];
    for (key, text, apply) in sweeps {
        let Some(text) = text else { continue };
        let vals = parse_list(key, text)?;
        let nested = vals.len() > 1;
        jobs = jobs
            .into_iter()
            .flat_map(|job| {
                vals.iter().map(move |&v| {
                    let mut config = job.config.clone();
                    apply(&mut config, v);
                    let out_dir = if nested {
                        job.out_dir.join(format!("{key}_{v}"))
                    } else {
                        job.out_dir.clone()
                    };
                    TrainJob { config, out_dir }
                })
            })
            .collect();
    }
    for job in &jobs {
        job.config.validate()?;
    }
    Ok(jobs)
}

/// Open the dataset named in `config`, re-splitting when asked.
pub fn open_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let ds = Dataset::open(Path::new(&config.dataset))?;
    match config.labeled_fraction {
        Some(f) => {
            let m = split(&ds.manifest, f, config.seed)?;
            ds.with_manifest(m)
        }
        None => Ok(ds),
    }
}

pub fn run_job(job: &TrainJob) -> Result<RunSummary> {
    let ds = open_dataset(&job.config)?;
    fs::create_dir_all(&job.out_dir).map_err(|e| Error::io(&job.out_dir, e))?;
    job.config.save(&job.out_dir.join(CONFIG_ECHO_FILE))?;
    let (model, train) = (job.config.detector(), job.config.train());
    match job.config.precision {
        Precision::F32 => run::<f32>(&ds, model, train, &job.out_dir),
        Precision::F64 => run::<f64>(&ds, model, train, &job.out_dir),
    }
}

/// Run every job of the sweep in order. All configs are validated before
/// the first one starts.
pub fn cmd_train(args: &TrainArgs) -> Result<Vec<RunSummary>> {
    let jobs = plan_train(args)?;
    let mut out = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let s = run_job(job)?;
        if let Some(r) = &s.final_report {
            println!(
                "{}: mAP {:.4} AP50 {:.4}",
                job.out_dir.display(),
                r.map,
                r.ap50.unwrap_or(f64::NAN)
            );
        }
        out.push(s);
    }
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    if !args.checkpoint.is_file() {
        return Err(Error::Io {
            path: args.checkpoint.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    let model = Detector::<f32>::load(&args.checkpoint)?;
    let ds = Dataset::open(&args.dataset)?;
    let thresholds = if args.iou.is_empty() {
        coco_thresholds()
    } else {
        args.iou.clone()
    };
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Config(format!("IoU threshold {t} outside (0, 1]")));
    }
    let report = evaluate_model(&model, &ds, &thresholds)?;
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(p) => {
            let p = output_path(p);
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        None => println!("{text}"),
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_args(extra: &[&str]) -> TrainArgs {
        let mut argv = vec!["ssod", "train", "--dataset", "ds", "--out", "/abs/out"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Train(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn lists_accept_both_separators() {
        assert_eq!(parse_list("sigma", "0.4|0.5,0.55 | 0.6").unwrap(), vec![0.4, 0.5, 0.55, 0.6]);
        assert!(parse_list("sigma", "0.4|x").is_err());
        assert!(parse_list("sigma", "|").is_err());
    }

    #[test]
    fn sigma_sweep_expands_to_one_dir_per_value() {
        let jobs = plan_train(&train_args(&["--sigma", "0.4|0.5|0.55|0.6"])).unwrap();
        assert_eq!(jobs.len(), 4);
        assert_eq!(jobs[2].config.sigma, 0.55);
        assert_eq!(jobs[2].out_dir, PathBuf::from("/abs/out/sigma_0.55"));
    }

    #[test]
    fn sweeps_multiply() {
        let jobs = plan_train(&train_args(&["--mu", "0.04,0.05,0.06", "--lambda", "1,2"])).unwrap();
        assert_eq!(jobs.len(), 6);
        assert_eq!(jobs[5].out_dir, PathBuf::from("/abs/out/lambda_2/mu_0.06"));
        let single = plan_train(&train_args(&["--mu", "0.04"])).unwrap();
        assert_eq!(single[0].out_dir, PathBuf::from("/abs/out"));
    }

    #[test]
    fn flags_override_and_validate() {
        let jobs = plan_train(&train_args(&["--no-adso", "--no-dex", "--iterations", "7", "--precision", "f64"])).unwrap();
        let c = &jobs[0].config;
        assert!(!c.adso && !c.dex && c.fusion_box);
        assert_eq!((c.iterations, c.precision), (7, Precision::F64));
        assert!(plan_train(&train_args(&["--sigma", "1.5"])).is_err());
        assert!(plan_train(&train_args(&["--ema-rate", "1.0"])).is_err());
    }
}
