use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use s2a_core::activations::{gelu_grad_approx_f64, gelu_grad_exact_f64, GELU_CLIP};
use s2a_core::gradcheck::{check_target, Target};
use s2a_core::memory::{
    build_model_spec, default_quantize, estimate, render_breakdown, render_table, AccountingScope, MemoryReport,
    ModelSpec,
};
use s2a_core::petl::{load_checkpoint, save_checkpoint, Method, Model, ViTConfig};
use s2a_core::train::{load_dataset, pretrain_backbone, run_finetune, TrainConfig};
use s2a_core::Error;

#[derive(Parser, Debug)]
#[command(name = "s2a", version, about = "Memory-efficient parameter-efficient fine-tuning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Estimate training memory for one method or all of them.
    EstimateMem(EstimateArgs),
    /// Fine-tune the toy ViT on a dataset.
    Train(TrainArgs),
    /// Tabulate the exact and fitted GELU derivatives as CSV.
    QuantReport(QuantReportArgs),
    /// Memory and trainable-parameter table for every method.
    CompareMethods(CompareArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Output {
    Json,
    Table,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn enabled(self) -> bool {
        self == Switch::On
    }
}

#[derive(clap::Args, Debug)]
struct GradcheckArgs {
    /// One of bias-linear, lrp, cap, lsb, softmax, gelu, relu, attention, or all.
    #[arg(long, default_value = "all", value_parser = parse_targets)]
    target: TargetSet,
    #[arg(long, env = "S2A_SEED", default_value_t = 0)]
    seed: u64,
    /// Random instances per target.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    #[arg(long, default_value_t = 1e-3, value_parser = parse_positive)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = Output::Table)]
    out: Output,
}

#[derive(Clone, Debug)]
struct TargetSet(Vec<Target>);

#[derive(clap::Args, Debug)]
struct EstimateArgs {
    #[arg(long, default_value = "vit_b_16")]
    arch: String,
    /// All methods when omitted.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, value_enum, default_value_t = Output::Table)]
    out: Output,
    #[arg(long, default_value = "analysis")]
    scope: AccountingScope,
    /// Override the method's default for quantized activation saves.
    #[arg(long, value_enum)]
    quantize: Option<Switch>,
    /// Estimate a model described by a JSON layer list instead.
    #[arg(long, conflicts_with_all = ["arch", "method", "quantize"])]
    spec: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct CompareArgs {
    #[arg(long, default_value = "vit_b_16")]
    arch: String,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, value_enum, default_value_t = Output::Table)]
    out: Output,
    #[arg(long, default_value = "analysis")]
    scope: AccountingScope,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// JSON training configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, value_enum)]
    quantize: Option<Switch>,
    #[arg(long, env = "S2A_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_positive_f32)]
    lr: Option<f32>,
    /// Directory for metrics.jsonl and summary.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Start from this checkpoint's backbone and skip pretraining.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Write the fine-tuned parameters here.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct QuantReportArgs {
    #[arg(long, default_value_t = 1201, value_parser = clap::value_parser!(u64).range(2..))]
    grid_points: u64,
    /// Interval as `lo,hi`, for example `--range=-6,6`.
    #[arg(long, default_value = "-6,6", allow_hyphen_values = true, value_parser = parse_range)]
    range: (f64, f64),
}

fn parse_targets(s: &str) -> Result<TargetSet, String> {
    if s == "all" {
        return Ok(TargetSet(Target::ALL.to_vec()));
    }
    s.parse::<Target>().map(|t| TargetSet(vec![t])).map_err(|e| e.to_string())
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn parse_positive_f32(s: &str) -> Result<f32, String> {
    parse_positive(s).map(|v| v as f32)
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected lo,hi, got {s:?}"))?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("bad lower bound {a:?}"))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("bad upper bound {b:?}"))?;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(format!("range {s:?} must satisfy lo < hi"));
    }
    Ok((lo, hi))
}

/// Failure of a command, mapped to its exit status.
enum Failure {
    Usage(String),
    Failed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } => Failure::Usage(e.to_string()),
            other => Failure::Failed(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Failed(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Gradcheck(a) => gradcheck(a, &mut out),
        Command::EstimateMem(a) => estimate_mem(a, &mut out),
        Command::Train(a) => train(a, &mut out),
        Command::QuantReport(a) => quant_report(a, &mut out),
        Command::CompareMethods(a) => compare_methods(a, &mut out),
    };
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Failed(e.to_string()))
}

fn gradcheck(a: GradcheckArgs, out: &mut impl Write) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for &t in &a.target.0 {
        reports.push(check_target(t, a.seed, a.seeds as usize)?);
    }
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !(r.max_rel_error <= a.tol))
        .map(|r| r.target.name())
        .collect();
    match a.out {
        Output::Json => writeln!(out, "{}", to_json(&reports)?)?,
        Output::Table => {
            writeln!(out, "{:<12} {:>6} {:>12} {:>14}  status", "target", "seeds", "coordinates", "max_rel_error")?;
            for r in &reports {
                let status = if r.max_rel_error <= a.tol { "pass" } else { "FAIL" };
                writeln!(
                    out,
                    "{:<12} {:>6} {:>12} {:>14.3e}  {status}",
                    r.target.name(),
                    r.seeds,
                    r.coordinates,
                    r.max_rel_error
                )?;
            }
        }
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Failed(format!("gradient check above tolerance {:e}: {}", a.tol, failing.join(", "))))
    }
}

fn arch_config(arch: &str) -> Result<ViTConfig, Failure> {
    ViTConfig::by_name(arch).map_err(|_| Failure::Usage(format!("unknown arch {arch:?} (expected vit_b_16 or toy_vit)")))
}

fn method_reports(arch: &str, methods: &[Method], batch: u64, scope: AccountingScope, quantize: Option<bool>) -> Result<Vec<MemoryReport>, Failure> {
    let cfg = arch_config(arch)?;
    methods
        .iter()
        .map(|&m| {
            let spec = build_model_spec(arch, &cfg, m, quantize.unwrap_or_else(|| default_quantize(m)))?;
            Ok(estimate(&spec, batch, scope)?)
        })
        .collect()
}

fn estimate_mem(a: EstimateArgs, out: &mut impl Write) -> Result<(), Failure> {
    let reports = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| json_usage(path, &e))?;
            vec![estimate(&spec, a.batch, a.scope)?]
        }
        None => {
            let methods = a.method.map_or_else(|| Method::ALL.to_vec(), |m| vec![m]);
            method_reports(&a.arch, &methods, a.batch, a.scope, a.quantize.map(Switch::enabled))?
        }
    };
    match (a.out, reports.as_slice()) {
        (Output::Json, [one]) => writeln!(out, "{}", to_json(one)?)?,
        (Output::Json, many) => writeln!(out, "{}", to_json(&many)?)?,
        (Output::Table, [one]) => write!(out, "{}", render_breakdown(one))?,
        (Output::Table, many) => write!(out, "{}", render_table(many))?,
    }
    Ok(())
}

fn compare_methods(a: CompareArgs, out: &mut impl Write) -> Result<(), Failure> {
    let reports = method_reports(&a.arch, &Method::ALL, a.batch, a.scope, None)?;
    match a.out {
        Output::Json => writeln!(out, "{}", to_json(&reports)?)?,
        Output::Table => write!(out, "{}", render_table(&reports))?,
    }
    Ok(())
}

fn json_usage(path: &Path, e: &serde_json::Error) -> Failure {
    Failure::Usage(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))
}

fn train(a: TrainArgs, out: &mut impl Write) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| json_usage(path, &e))?
        }
        None => TrainConfig::default(),
    };
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(q) = a.quantize {
        cfg.quantize = Some(q.enabled());
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.total_epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e);
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;

    let backbone = match (&a.backbone, &cfg.pretrain) {
        (Some(path), _) => {
            let mut m = Model::new(cfg.model.clone(), Method::Full, cfg.seed)?;
            load_checkpoint(m.params_mut(), path)?;
            Some(m.params().clone())
        }
        (None, Some(p)) => Some(pretrain_backbone(&cfg.model, p)?),
        (None, None) => None,
    };
    let data = load_dataset(&cfg.data, cfg.model.classes, cfg.seed)?;

    let mut metrics = match &a.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(io::BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut write_err: Option<io::Error> = None;
    let outcome = run_finetune(&cfg, &data, backbone.as_ref(), |r| {
        let line = serde_json::to_string(r).expect("epoch record serializes");
        let res = writeln!(out, "{line}").and_then(|_| match metrics.as_mut() {
            Some(f) => writeln!(f, "{line}"),
            None => Ok(()),
        });
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let summary = to_json(&outcome.summary)?;
    writeln!(out, "{}", serde_json::to_string(&outcome.summary).map_err(|e| Failure::Failed(e.to_string()))?)?;
    if let Some(dir) = &a.out_dir {
        if let Some(mut f) = metrics {
            f.flush()?;
        }
        fs::write(dir.join("summary.json"), summary + "\n")?;
    }
    if let Some(path) = &a.save {
        save_checkpoint(outcome.model.params(), path)?;
    }
    Ok(())
}

fn quant_report(a: QuantReportArgs, out: &mut impl Write) -> Result<(), Failure> {
    let (lo, hi) = a.range;
    let n = a.grid_points;
    let clip = GELU_CLIP as f64;
    writeln!(out, "x,exact,approx,gap")?;
    for i in 0..n {
        let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let c = x.clamp(-clip, clip);
        let exact = gelu_grad_exact_f64(c);
        let approx = gelu_grad_approx_f64(c);
        writeln!(out, "{x},{exact},{approx},{}", (exact - approx).abs())?;
    }
    Ok(())
}
