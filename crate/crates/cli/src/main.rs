//! `coop`: train cooperative depth-adaptive networks, profile their costs,
//! and pick a runtime depth under a budget.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use coop_core::checkpoint::Checkpoint;
use coop_core::config::RunConfig;
use coop_core::cost::{
    budget_select, cost_table, measure_latency, resnet152_cifar_preset, Budget, BudgetKind,
    CostTable, FlopConvention,
};
use coop_core::data::{gen_data, rasterize, DataKind, Dataset};
use coop_core::gradcheck;
use coop_core::mask::GumbelConfig;
use coop_core::metrics::factor_key;
use coop_core::net::{derive_subnet, AdaptiveNet, ArchConfig, StemKind};
use coop_core::tensor::Tensor;
use coop_core::trainer::{self, Cohort, RunPaths};
use coop_core::{Error, Result};

const GRADCHECK_FAILURE_EXIT: u8 = 5;

#[derive(Parser)]
#[command(
    name = "coop",
    version,
    about = "Cooperative training of depth-adaptive networks with budgeted inference"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    /// One FLOP per multiply-accumulate (default; matches common profilers).
    Mac,
    /// Two FLOPs per multiply-accumulate.
    #[value(name = "2mac")]
    TwoMac,
}

impl From<ConventionArg> for FlopConvention {
    fn from(c: ConventionArg) -> FlopConvention {
        match c {
            ConventionArg::Mac => FlopConvention::Mac,
            ConventionArg::TwoMac => FlopConvention::TwoMac,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a cohort from a JSON config; writes metrics and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for metrics.jsonl and checkpoints.
        #[arg(long, default_value = "runs/coop")]
        out_dir: PathBuf,
    },
    /// Per-factor accuracy table for a trained checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated scaling factors, e.g. 0.2,0.4,1.0.
        #[arg(long, default_value = "0.2,0.4,0.6,0.8,1.0")]
        factors: String,
        /// Evaluate on this CSV instead of the config's generated data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Analytic parameter/FLOP table for an architecture.
    Profile {
        /// `resnet152-cifar` or a path to a config JSON.
        #[arg(long, default_value = "resnet152-cifar")]
        arch: String,
        /// Input size for convolutional stems, e.g. 32x32.
        #[arg(long, default_value = "32x32")]
        input: String,
        #[arg(long, value_enum, default_value = "mac")]
        flops_convention: ConventionArg,
        #[arg(long, default_value = "0.2,0.4,0.6,0.8,1.0")]
        factors: String,
        /// Write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Also measure wall-clock latency per factor (slow on big presets).
        #[arg(long)]
        measure_latency: bool,
        #[arg(long, default_value_t = 100)]
        latency_warmup: usize,
        #[arg(long, default_value_t = 1000)]
        latency_reps: usize,
    },
    /// Pick the deepest factor whose cost fits a budget.
    Select {
        /// Cost table CSV (`s,params,flops,latency_ms`).
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        flops: Option<f64>,
        #[arg(long)]
        params: Option<f64>,
        /// Latency budget in milliseconds.
        #[arg(long)]
        latency: Option<f64>,
    },
    /// Finite-difference gradient suite; nonzero exit on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, default_value = "spirals")]
        kind: String,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Rasterize onto a grid of this side length (writes raw f32 + JSON
        /// sidecar instead of CSV).
        #[arg(long)]
        grid: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Train {
            config,
            resume,
            out_dir,
        } => cmd_train(&config, resume.as_deref(), &out_dir),
        Cmd::Eval {
            ckpt,
            factors,
            data,
        } => cmd_eval(&ckpt, &factors, data.as_deref()),
        Cmd::Profile {
            arch,
            input,
            flops_convention,
            factors,
            out,
            json,
            measure_latency,
            latency_warmup,
            latency_reps,
        } => cmd_profile(
            &arch,
            &input,
            flops_convention.into(),
            &factors,
            out.as_deref(),
            json.as_deref(),
            measure_latency,
            latency_warmup,
            latency_reps,
        ),
        Cmd::Select {
            table,
            flops,
            params,
            latency,
        } => cmd_select(&table, flops, params, latency),
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
        Cmd::GenData {
            kind,
            n,
            noise,
            classes,
            seed,
            out,
            grid,
        } => cmd_gen_data(&kind, n, noise, classes, seed, &out, grid),
    }
}

fn parse_factors(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let f: f64 = part
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParam(format!("bad scaling factor `{part}`")))?;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "scaling factor {f} outside (0, 1]"
            )));
        }
        out.push(f);
    }
    if out.is_empty() {
        return Err(Error::InvalidParam("no scaling factors given".into()));
    }
    Ok(out)
}

fn parse_input_hw(text: &str) -> Result<(usize, usize)> {
    let (w, h) = text
        .split_once('x')
        .ok_or_else(|| Error::InvalidParam(format!("input size `{text}` is not WxH")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidParam(format!("bad input size `{text}`")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn apply_seed_override(cfg: &mut RunConfig) -> Result<()> {
    if let Ok(text) = std::env::var("COOP_SEED") {
        let seed: u64 = text
            .parse()
            .map_err(|_| Error::InvalidParam(format!("COOP_SEED `{text}` is not an integer")))?;
        cfg.train.seed = seed;
    }
    Ok(())
}

fn cmd_train(config_path: &Path, resume: Option<&Path>, out_dir: &Path) -> Result<ExitCode> {
    let mut cfg = RunConfig::from_path(config_path)?;
    apply_seed_override(&mut cfg)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;

    let data = cfg.data.realize()?;
    let mut cohort = Cohort::new(&cfg)?;
    let start_epoch = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let epoch = trainer::resume(&mut cohort, &cfg, &ckpt)?;
            println!("resumed from {} at epoch {epoch}", path.display());
            epoch
        }
        None => 0,
    };

    let paths = RunPaths::in_dir(out_dir);
    let history = trainer::train_observed(
        &mut cohort,
        &data,
        &cfg,
        start_epoch,
        &paths,
        &mut |record| {
            let acc_full = record
                .acc
                .get("teammate_a")
                .and_then(|m| m.get(&factor_key(1.0)))
                .copied()
                .unwrap_or(f64::NAN);
            println!(
                "epoch {:>4}/{} lr {:<7} loss {:.4} acc@1.00 {:.3}",
                record.epoch + 1,
                cfg.train.epochs,
                record.lr,
                record.loss.total,
                acc_full
            );
        },
    )?;

    if let Some(last) = history.last() {
        println!("final losses: total {:.4}", last.loss.total);
        for (net, accs) in &last.acc {
            let cells: Vec<String> = accs
                .iter()
                .map(|(f, a)| format!("{f}: {a:.3}"))
                .collect();
            println!("  {net}: {}", cells.join("  "));
        }
    }
    println!("metrics: {}", out_dir.join("metrics.jsonl").display());
    println!("checkpoint: {}", out_dir.join("final.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(ckpt_path: &Path, factors: &str, data_override: Option<&Path>) -> Result<ExitCode> {
    let factors = parse_factors(factors)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cfg = ckpt.config.clone();
    let mut cohort = Cohort::new(&cfg)?;
    trainer::resume(&mut cohort, &cfg, &ckpt)?;

    let data = match data_override {
        Some(path) => Dataset::load_csv(path, cfg.arch.num_classes, "eval")?,
        None => cfg.data.realize()?,
    };

    let input_hw = match cfg.arch.stem {
        StemKind::Conv { .. } => match data.feat_shape[..] {
            [_, h, w] => Some((h, w)),
            _ => None,
        },
        StemKind::Linear { .. } => None,
    };
    let table = cost_table(&cfg.arch, &factors, input_hw, FlopConvention::Mac)?;
    let gumbel = GumbelConfig {
        temperature: cfg.mask.temperature,
    };

    println!("factor  params      flops         teammate_a  teammate_b  leader");
    for row in table.rows.iter().rev() {
        let acc_a = trainer::evaluate(
            &cohort.teammate_a,
            cohort.mask_a.as_ref(),
            cohort.mask_layout(),
            cfg.train.mechanism,
            &gumbel,
            row.s,
            &data,
        )?;
        let acc_b = match &cohort.teammate_b {
            Some(net) => format!(
                "{:.4}",
                trainer::evaluate(
                    net,
                    cohort.mask_b.as_ref(),
                    cohort.mask_layout(),
                    cfg.train.mechanism,
                    &gumbel,
                    row.s,
                    &data,
                )?
            ),
            None => "-".to_string(),
        };
        let leader = match (&cohort.leader, row.s) {
            (Some(net), 1.0) => format!(
                "{:.4}",
                trainer::evaluate(
                    net,
                    None,
                    cohort.mask_layout(),
                    coop_core::config::SubnetMechanism::Truncation,
                    &gumbel,
                    1.0,
                    &data,
                )?
            ),
            _ => "-".to_string(),
        };
        println!(
            "{:<7} {:<11} {:<13} {:<11.4} {:<11} {}",
            format!("{:.2}x", row.s),
            row.params,
            row.flops,
            acc_a,
            acc_b,
            leader
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn load_arch(spec: &str) -> Result<ArchConfig> {
    if spec == "resnet152-cifar" {
        return Ok(resnet152_cifar_preset());
    }
    let text = std::fs::read_to_string(spec)?;
    if let Ok(run) = serde_json::from_str::<RunConfig>(&text) {
        run.arch.validate()?;
        return Ok(run.arch);
    }
    let arch: ArchConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
        key: spec.to_string(),
        message: format!("neither a run config nor an architecture: {e}"),
    })?;
    arch.validate()?;
    Ok(arch)
}

#[allow(clippy::too_many_arguments)]
fn cmd_profile(
    arch_spec: &str,
    input: &str,
    convention: FlopConvention,
    factors: &str,
    out: Option<&Path>,
    json: Option<&Path>,
    with_latency: bool,
    warmup: usize,
    reps: usize,
) -> Result<ExitCode> {
    let arch = load_arch(arch_spec)?;
    let factors = parse_factors(factors)?;
    let input_hw = match arch.stem {
        StemKind::Conv { .. } => Some(parse_input_hw(input)?),
        StemKind::Linear { .. } => None,
    };
    let mut table = cost_table(&arch, &factors, input_hw, convention)?;

    if with_latency {
        let net = AdaptiveNet::new(arch.clone(), 0)?;
        let x = match arch.stem {
            StemKind::Conv { in_channels, .. } => {
                let (h, w) = input_hw.expect("conv stems have an input size");
                Tensor::constant(vec![1, in_channels, h, w], vec![0.5; in_channels * h * w])
            }
            StemKind::Linear { in_features } => {
                Tensor::constant(vec![1, in_features], vec![0.5; in_features])
            }
        };
        for row in &mut table.rows {
            let spec = derive_subnet(&arch, row.s)?;
            let stats = measure_latency(&net, &spec, &x, warmup, reps)?;
            row.latency_ms = Some(stats.mean_ms);
            eprintln!(
                "latency {:.2}x: mean {:.3} ms, std {:.3} ms, cov {:.3} ({} reps)",
                row.s, stats.mean_ms, stats.std_ms, stats.cov, stats.reps
            );
        }
    }

    println!("factor  params      flops         latency_ms");
    for row in table.rows.iter().rev() {
        let lat = row
            .latency_ms
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{:<7} {:<11} {:<13} {}",
            format!("{:.2}x", row.s),
            row.params,
            row.flops,
            lat
        );
    }
    if let Some(path) = out {
        std::fs::write(path, table.to_csv())?;
        println!("csv: {}", path.display());
    }
    if let Some(path) = json {
        std::fs::write(path, serde_json::to_string_pretty(&table)?)?;
        println!("json: {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_select(
    table_path: &Path,
    flops: Option<f64>,
    params: Option<f64>,
    latency: Option<f64>,
) -> Result<ExitCode> {
    let budget = match (flops, params, latency) {
        (Some(limit), None, None) => Budget { kind: BudgetKind::Flops, limit },
        (None, Some(limit), None) => Budget { kind: BudgetKind::Params, limit },
        (None, None, Some(limit)) => Budget { kind: BudgetKind::LatencyMs, limit },
        _ => {
            return Err(Error::InvalidParam(
                "select needs exactly one of --flops, --params, --latency".into(),
            ))
        }
    };
    let table = CostTable::from_csv(&std::fs::read_to_string(table_path)?)?;
    let s = budget_select(&table, &budget)?;
    println!("{s}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64) -> Result<ExitCode> {
    let results = gradcheck::run_suite(seed)?;
    let mut failed = 0usize;
    for r in &results {
        println!(
            "{:<28} {} (max rel err {:.3e}, tol {:.0e})",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_err,
            gradcheck::TOLERANCE
        );
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} of {} gradient checks failed", results.len());
        return Ok(ExitCode::from(GRADCHECK_FAILURE_EXIT));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_data(
    kind: &str,
    n: usize,
    noise: f64,
    classes: usize,
    seed: u64,
    out: &Path,
    grid: Option<usize>,
) -> Result<ExitCode> {
    let kind: DataKind = kind.parse()?;
    let data = gen_data(kind, n, noise, classes, seed)?;
    match grid {
        Some(g) => {
            let grid_data = rasterize(&data, g)?;
            grid_data.save_grid(out)?;
            println!("wrote {} and {}.json", out.display(), out.display());
        }
        None => {
            data.save_csv(out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
