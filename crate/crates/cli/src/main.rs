use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use msaf::analyzer::{
    attention_csv, attention_records_csv, attention_summary, collect_attention, count_mmtm_ref, count_msaf, counts_csv,
    sweep_counts, Grouping,
};
use msaf::checkpoint::{read_network, write_network};
use msaf::experiment::{compare_csv, rank, run_experiment, summarize, summary_csv, ExperimentConfig, RunResult};
use msaf::gradcheck::DEFAULT_EPS;
use msaf::gradsuite::{run_grad_suite, SuiteOptions};
use msaf::msaf::write_params;
use msaf::synth::{generate_dataset, read_dataset, write_dataset, Dataset, Split};
use msaf::train::{evaluate, fmt_metric, metrics_csv};
use msaf::zoo::FusionNet;
use msaf::{Error, MsafConfig, Precision};

#[derive(Parser)]
#[command(
    name = "msaf",
    version,
    about = "Split attention fusion: experiments, checks and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Double,
    Single,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Double => Precision::Double,
            PrecisionArg::Single => Precision::Single,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    PerClass,
    PerModule,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides the configured arithmetic precision.
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// Trained network (`model.msnt`).
    #[arg(long)]
    model: PathBuf,
    /// Experiment configuration whose task regenerates the data.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    config: Option<PathBuf>,
    /// Saved dataset (`dataset.msds`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Modalities feeding the encoders, comma separated; all by default.
    #[arg(long, value_delimiter = ',')]
    inputs: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "double")]
    precision: PrecisionArg,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient sweep over every differentiable component.
    Gradcheck {
        /// Optional JSON with `configs`, `seed` and `eps`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write gradcheck.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "double")]
        precision: PrecisionArg,
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Train every configured method on every seed.
    Train(RunArgs),
    /// Score a trained network on one split.
    Eval(DataArgs),
    /// Train two or more methods and rank them by test accuracy.
    Compare(RunArgs),
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Subcommand)]
enum Analyze {
    /// Parameter and FLOP counts of the fusion module against the reference module.
    Counts {
        /// `lo..hi` for doubling widths, or a comma list.
        #[arg(long, default_value = "64..1024")]
        channels: String,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Block width; half the narrowest modality by default.
        #[arg(long)]
        block_channels: Option<usize>,
        #[arg(long, default_value_t = 4)]
        reduction: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention statistics of a trained network.
    Attention {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "per-class")]
        group: GroupArg,
    },
}

enum Failure {
    Validation(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Gradcheck {
            config,
            out,
            precision,
            seed_override,
            inject_fault,
        } => gradcheck(
            config.as_deref(),
            out.as_deref(),
            precision.into(),
            seed_override,
            inject_fault,
        ),
        Command::Train(args) => train(&args),
        Command::Eval(args) => eval(&args),
        Command::Compare(args) => compare(&args),
        Command::Analyze(Analyze::Counts {
            channels,
            batch,
            block_channels,
            reduction,
            out,
        }) => counts(&channels, batch, block_channels, reduction, &out),
        Command::Analyze(Analyze::Attention { data, group }) => attention(&data, group),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GradConfig {
    #[serde(default = "default_configs")]
    configs: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_eps")]
    eps: f64,
}

fn default_configs() -> usize {
    SuiteOptions::default().configs
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn gradcheck(
    config: Option<&Path>,
    out: Option<&Path>,
    precision: Precision,
    seed_override: Option<u64>,
    inject_fault: Option<f64>,
) -> CliResult {
    let mut opts = SuiteOptions {
        precision,
        ..SuiteOptions::default()
    };
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))?;
        let c: GradConfig =
            serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("invalid configuration: {e}")))?;
        if c.configs == 0 || !(c.eps > 0.0 && c.eps.is_finite()) {
            return Err(Failure::Validation(
                "configs must be positive and eps a positive number".into(),
            ));
        }
        opts.configs = c.configs;
        opts.seed = c.seed;
        opts.eps = c.eps;
    }
    if let Some(s) = seed_override {
        opts.seed = s;
    }
    if let Some(b) = inject_fault {
        opts.analytic_bias = b;
    }
    if precision == Precision::Single {
        eprintln!(
            "warning: single precision analytic gradients; tolerance relaxed to {:e}",
            opts.tolerance()
        );
    }
    let report = run_grad_suite(&opts)?;

    let mut csv = String::from("component,cases,checked,skipped,max_rel_error,tolerance,pass\n");
    println!(
        "{:<28} {:>6} {:>8} {:>8} {:>12}  result",
        "component", "cases", "checked", "skipped", "max rel err"
    );
    for c in &report.components {
        let pass = c.worst < report.tolerance;
        println!(
            "{:<28} {:>6} {:>8} {:>8} {:>12.3e}  {}",
            c.component,
            c.cases,
            c.checked,
            c.skipped,
            c.worst,
            if pass { "PASS" } else { "FAIL" }
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{:e},{:e},{}",
            c.component, c.cases, c.checked, c.skipped, c.worst, report.tolerance, pass
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_file(dir, "gradcheck.csv", &csv)?;
    }
    if report.passes() {
        println!("all components within {:e}", report.tolerance);
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.component.as_str()).collect();
        Err(Failure::Numerical(format!(
            "gradient check exceeded {:e} in {}",
            report.tolerance,
            names.join(", ")
        )))
    }
}

fn load_run_config(args: &RunArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed_override {
        cfg.seeds = vec![s];
    }
    if let Some(p) = args.precision {
        cfg.train.precision = p.into();
    }
    if args.jobs == 0 {
        return Err(Failure::Validation("--jobs must be at least 1".into()));
    }
    Ok(cfg)
}

fn save_run(out: &Path, r: &RunResult) -> CliResult {
    let dir = out.join(&r.method).join(format!("seed{}", r.seed));
    fs::create_dir_all(&dir)?;
    write_file(&dir, "metrics.csv", &metrics_csv(&r.history, Some(&r.test)))?;
    write_network(dir.join("model.msnt"), &r.model)?;
    for (p, (pl, params)) in r.model.spec.placements.iter().zip(&r.model.placements).enumerate() {
        for (j, seg) in params.iter().enumerate() {
            let name = if params.len() == 1 {
                format!("msaf{p}.msaf")
            } else {
                format!("msaf{p}.seg{j}.msaf")
            };
            write_params(dir.join(name), seg, &pl.msaf)?;
        }
    }
    Ok(())
}

fn run_and_save(args: &RunArgs, cfg: &ExperimentConfig) -> CliResult<Vec<RunResult>> {
    fs::create_dir_all(&args.out)?;
    let data = generate_dataset(&cfg.task)?;
    write_dataset(args.out.join("dataset.msds"), &data)?;
    let results = run_experiment(cfg, &data, args.jobs)?;
    for r in &results {
        save_run(&args.out, r)?;
    }
    Ok(results)
}

fn print_summary(results: &[RunResult], ranked: bool) -> Vec<msaf::experiment::MethodSummary> {
    let mut s = summarize(results);
    if ranked {
        s = rank(s);
    }
    println!(
        "{:<24} {:>22} {:>5} {:>10}",
        "method", "test accuracy", "runs", "params"
    );
    for m in &s {
        println!(
            "{:<24} {:>10.4} ± {:<9.4} {:>5} {:>10}",
            m.method, m.mean_accuracy, m.stderr, m.runs, m.params
        );
    }
    s
}

fn train(args: &RunArgs) -> CliResult {
    let cfg = load_run_config(args)?;
    let results = run_and_save(args, &cfg)?;
    let s = print_summary(&results, false);
    write_file(&args.out, "summary.csv", &summary_csv(&s))
}

fn compare(args: &RunArgs) -> CliResult {
    let cfg = load_run_config(args)?;
    if cfg.methods.len() < 2 {
        return Err(Failure::Validation("compare needs at least two methods".into()));
    }
    let results = run_and_save(args, &cfg)?;
    let s = print_summary(&results, true);
    write_file(&args.out, "compare.csv", &compare_csv(&s))
}

fn load_split(args: &DataArgs, model: &FusionNet) -> CliResult<Split> {
    let data: Dataset = match (&args.config, &args.data) {
        (_, Some(path)) => read_dataset(path)?,
        (Some(path), None) => {
            let cfg = ExperimentConfig::load(path)?;
            generate_dataset(&cfg.task)?
        }
        (None, None) => return Err(Failure::Validation("one of --config or --data is required".into())),
    };
    let split = match args.split {
        SplitArg::Train => data.train,
        SplitArg::Val => data.val,
        SplitArg::Test => data.test,
    };
    let n = split.inputs.len();
    let inputs = args.inputs.clone().unwrap_or_else(|| (0..n).collect());
    if let Some(&bad) = inputs.iter().find(|&&k| k >= n) {
        return Err(Failure::Validation(format!("no modality {bad}; the data has {n}")));
    }
    if inputs.len() != model.spec.encoders.len() {
        return Err(Failure::Validation(format!(
            "the model has {} encoders but {} modalities were selected; use --inputs",
            model.spec.encoders.len(),
            inputs.len()
        )));
    }
    Ok(Split {
        inputs: inputs.iter().map(|&k| split.inputs[k].clone()).collect(),
        targets: split.targets,
    })
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
    }
}

fn eval(args: &DataArgs) -> CliResult {
    let model = read_network(&args.model)?;
    let split = load_split(args, &model)?;
    let m = evaluate(&model, &split, args.precision.into())?;
    fs::create_dir_all(&args.out)?;
    let name = split_name(args.split);
    let mut csv = String::from("split,metric,value\n");
    for (metric, v) in m.rows() {
        let v = fmt_metric(v);
        println!("{name:<6} {metric:<16} {v}");
        let _ = writeln!(csv, "{name},{metric},{v}");
    }
    write_file(&args.out, "eval_metrics.csv", &csv)
}

fn parse_widths(s: &str) -> CliResult<Vec<usize>> {
    let bad = || Failure::Validation(format!("cannot parse channel list `{s}`"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo == 0 || hi < lo {
            return Err(bad());
        }
        let mut w = vec![lo];
        while let Some(&last) = w.last() {
            match last.checked_mul(2) {
                Some(next) if next <= hi => w.push(next),
                _ => break,
            }
        }
        return Ok(w);
    }
    s.split(',')
        .map(|t| t.trim().parse::<usize>().ok().filter(|&v| v > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(bad)
}

fn counts(channels: &str, batch: usize, block_channels: Option<usize>, reduction: usize, out: &Path) -> CliResult {
    let widths = parse_widths(channels)?;
    let pairs = match block_channels {
        None if reduction == 4 => sweep_counts(&widths, batch)?,
        _ => widths
            .iter()
            .map(|&n| {
                let config = MsafConfig::new(block_channels.unwrap_or(n / 2), reduction);
                let ch = [n, n];
                Ok((count_msaf(&ch, &config, batch)?, count_mmtm_ref(&ch, batch)?))
            })
            .collect::<Result<Vec<_>, Error>>()?,
    };
    println!(
        "{:<12} {:>12} {:>14} {:>14} {:>14}",
        "channels", "msaf params", "msaf flops", "ref params", "ref flops"
    );
    for (m, r) in &pairs {
        let ch: Vec<String> = m.channels.iter().map(usize::to_string).collect();
        println!(
            "{:<12} {:>12} {:>14} {:>14} {:>14}",
            ch.join(","),
            m.params,
            m.flops,
            r.params,
            r.flops
        );
    }
    fs::create_dir_all(out)?;
    write_file(out, "counts.csv", &counts_csv(pairs.iter().flat_map(|(m, r)| [m, r])))
}

fn attention(args: &DataArgs, group: GroupArg) -> CliResult {
    let model = read_network(&args.model)?;
    if model.spec.placements.is_empty() {
        return Err(Failure::Validation("the model has no fusion placements".into()));
    }
    let split = load_split(args, &model)?;
    let records = collect_attention(&model, &split, args.precision.into())?;
    let grouping = match group {
        GroupArg::PerClass => Grouping::PerClass,
        GroupArg::PerModule => Grouping::PerModule,
    };
    let rows = attention_summary(&records, grouping)?;
    fs::create_dir_all(&args.out)?;
    write_file(&args.out, "attention.csv", &attention_csv(&rows))?;
    write_file(&args.out, "attention_records.csv", &attention_records_csv(&records))?;
    println!("{} summary rows from {} samples", rows.len(), split.len());
    Ok(())
}
