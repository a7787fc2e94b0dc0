use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dclimba::baselines::{self, Method, Mode};
use dclimba::gridio::{read_grd, select_neighbors, write_grd};
use dclimba::metrics::{evaluate, EvalOptions, EvalReport, Index};
use dclimba::par::{init_threads, Exec};
use dclimba::synth::{generate, BiasConfig, SynthConfig};
use dclimba::training::{self, Checkpoint, TrainConfig, TrainData};
use dclimba::{AttributeField, Error};
use serde::Serialize;

mod parse;

use parse::{Grid, QStar, Window};

#[derive(Parser, Debug)]
#[command(
    name = "dclimba",
    version,
    about = "Monotone learned bias correction of daily precipitation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic reference / biased-model world.
    Synth(SynthArgs),
    /// Fit a correction network and write a checkpoint.
    Train(TrainArgs),
    /// Apply a checkpoint to a model field.
    Correct(CorrectArgs),
    /// Run a classical quantile-mapping baseline.
    Baseline(BaselineArgs),
    /// Compare a simulated field against a reference.
    Evaluate(EvaluateArgs),
    /// Render an evaluation report as CSV or text.
    Report(ReportArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "8x8")]
    grid: Grid,
    #[arg(long, default_value_t = 10)]
    years: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1.3)]
    bias_a: f64,
    #[arg(long, default_value_t = 1.1)]
    bias_p: f64,
    #[arg(long, default_value_t = 0.3)]
    drizzle_prob: f64,
    /// Elevation sensitivity of the multiplicative bias.
    #[arg(long, default_value_t = 0.0)]
    bias_spread: f64,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    gcm: PathBuf,
    #[arg(long)]
    attrs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value = "none")]
    qstar: QStar,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    batch: usize,
    #[arg(long, default_value_t = 365)]
    seqlen: usize,
    /// Day range START..END; defaults to the whole record.
    #[arg(long)]
    train_window: Option<Window>,
    #[arg(long)]
    val_window: Option<Window>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Also write the per-epoch loss history as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct CorrectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    gcm: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum MethodArg {
    Qm,
    Ecdfm,
    Qdm,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum ModeArg {
    Mult,
    Add,
}

#[derive(Args, Debug, Serialize)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "mult")]
    mode: ModeArg,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    gcm_hist: PathBuf,
    #[arg(long)]
    gcm_apply: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fit one transfer function on all cells pooled.
    #[arg(long)]
    pooled: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    sim: PathBuf,
    /// `all` or a comma-separated list of index names.
    #[arg(long, default_value = "all")]
    indices: String,
    #[arg(long)]
    fd: bool,
    /// Report trend bias against the raw model field given by --raw.
    #[arg(long, requires = "raw")]
    trend: bool,
    #[arg(long)]
    raw: Option<PathBuf>,
    /// First day of the future period for trend bias; defaults to mid-record.
    #[arg(long)]
    trend_split: Option<usize>,
    #[arg(long, default_value_t = 100)]
    quantile_levels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum Format {
    Csv,
    Text,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum Table {
    All,
    Indices,
    Quantiles,
    Fd,
    Trend,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    #[arg(long, value_enum, default_value = "all")]
    table: Table,
}

/// Failure with its process exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn print_config<T: Serialize>(command: &str, args: &T, seed: Option<u64>) {
    let json = serde_json::to_string(args).unwrap_or_default();
    println!("{command} config: {json}");
    if let Some(s) = seed {
        println!("seed: {s}");
    }
}

fn synth(a: &SynthArgs) -> Outcome {
    print_config("synth", a, Some(a.seed));
    let cfg = SynthConfig {
        nlat: a.grid.nlat,
        nlon: a.grid.nlon,
        years: a.years,
        seed: a.seed,
        bias: BiasConfig {
            a: a.bias_a,
            p: a.bias_p,
            drizzle_prob: a.drizzle_prob,
            a_spread: a.bias_spread,
            ..BiasConfig::default()
        },
        ..SynthConfig::default()
    };
    let w = generate(&cfg)?;
    std::fs::create_dir_all(&a.out)
        .map_err(|e| data_error(format!("cannot create {}: {e}", a.out.display())))?;
    write_grd(&w.reference, a.out.join("ref.grd"))?;
    write_grd(&w.gcm, a.out.join("gcm.grd"))?;
    w.attrs.write_dir(a.out.join("attrs"))?;
    Ok(())
}

fn train(a: &TrainArgs) -> Outcome {
    let reference = read_grd(&a.reference)?;
    let gcm = read_grd(&a.gcm)?;
    let attrs = AttributeField::read_dir(&a.attrs)?;
    let mut cfg = TrainConfig {
        lr: a.lr,
        batch: a.batch,
        seqlen: a.seqlen,
        epochs: a.epochs,
        seed: a.seed,
        train_window: a
            .train_window
            .map_or((0, gcm.ntime()), |w| (w.start, w.end)),
        val_window: a.val_window.map(|w| (w.start, w.end)),
        steps_per_epoch: a.steps_per_epoch,
        ..TrainConfig::default()
    };
    cfg.loss.q_star = a.qstar.0;
    print_config("train", &cfg, Some(cfg.seed));
    cfg.validate(gcm.ntime(), gcm.ncells())?;
    let graph = select_neighbors(&gcm, cfg.encoder.neighbors, cfg.train_window, None)?;
    let data = TrainData {
        reference: &reference,
        gcm: &gcm,
        attrs: &attrs,
        graph: &graph,
    };
    let ckpt = training::train(&data, &cfg)?;
    ckpt.save(&a.out)?;
    if let Some(p) = &a.loss_csv {
        training::write_loss_csv(&ckpt.history, p)?;
    }
    Ok(())
}

fn correct(a: &CorrectArgs) -> Outcome {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    print_config("correct", a, Some(ckpt.train.seed));
    let gcm = read_grd(&a.gcm)?;
    let out = training::correct_field(&ckpt, &gcm)?;
    write_grd(&out, &a.out)?;
    Ok(())
}

fn baseline(a: &BaselineArgs) -> Outcome {
    print_config("baseline", a, None);
    let method = match a.method {
        MethodArg::Qm => Method::Qm,
        MethodArg::Ecdfm => Method::Ecdfm,
        MethodArg::Qdm => Method::Qdm,
    };
    let mode = match a.mode {
        ModeArg::Mult => Mode::Multiplicative,
        ModeArg::Add => Mode::Additive,
    };
    let reference = read_grd(&a.reference)?;
    let hist = read_grd(&a.gcm_hist)?;
    let apply = read_grd(&a.gcm_apply)?;
    let out = baselines::correct_field(
        method,
        mode,
        &reference,
        &hist,
        &apply,
        a.pooled,
        Exec::auto(),
    )?;
    write_grd(&out, &a.out)?;
    Ok(())
}

fn parse_indices(spec: &str) -> Result<Vec<Index>, Failure> {
    if spec.eq_ignore_ascii_case("all") {
        return Ok(Index::ALL.to_vec());
    }
    spec.split(',')
        .map(|s| Index::from_name(s.trim()).ok_or_else(|| usage(format!("unknown index {s}"))))
        .collect()
}

fn evaluate_cmd(a: &EvaluateArgs) -> Outcome {
    print_config("evaluate", a, None);
    let indices = parse_indices(&a.indices)?;
    let reference = read_grd(&a.reference)?;
    let sim = read_grd(&a.sim)?;
    let raw = match (&a.raw, a.trend) {
        (Some(p), true) => Some(read_grd(p)?),
        _ => None,
    };
    let split = a.trend_split.unwrap_or(sim.ntime() / 2);
    let opts = EvalOptions {
        indices,
        fd: a.fd,
        trend: raw.as_ref().map(|r| (r, split)),
        quantile_levels: a.quantile_levels,
    };
    let report = evaluate(&reference, &sim, &opts)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| data_error(format!("cannot encode report: {e}")))?;
    std::fs::write(&a.out, json + "\n")
        .map_err(|e| data_error(format!("cannot write {}: {e}", a.out.display())))?;
    print!("{}", report.summary_text());
    Ok(())
}

fn report(a: &ReportArgs) -> Outcome {
    print_config("report", a, None);
    let text = std::fs::read_to_string(&a.input)
        .map_err(|e| data_error(format!("cannot read {}: {e}", a.input.display())))?;
    let r: EvalReport = serde_json::from_str(&text)
        .map_err(|e| data_error(format!("malformed report {}: {e}", a.input.display())))?;
    let out = match a.format {
        Format::Text => r.summary_text(),
        Format::Csv => {
            let parts = match a.table {
                Table::All => vec![r.index_csv(), r.quantile_csv(), r.fd_csv(), r.trend_csv()],
                Table::Indices => vec![r.index_csv()],
                Table::Quantiles => vec![r.quantile_csv()],
                Table::Fd => vec![r.fd_csv()],
                Table::Trend => vec![r.trend_csv()],
            };
            parts
                .into_iter()
                .filter(|p| !p.is_empty())
                .collect::<Vec<_>>()
                .join("\n")
        }
    };
    print!("{out}");
    Ok(())
}

fn threads_from_env() -> Result<Option<usize>, Failure> {
    match std::env::var("DCLIMBA_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map(Some).map_err(|_| {
            usage(format!(
                "DCLIMBA_THREADS must be a positive integer, got {v:?}"
            ))
        }),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Outcome {
    init_threads(threads_from_env()?);
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Correct(a) => correct(a),
        Command::Baseline(a) => baseline(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
