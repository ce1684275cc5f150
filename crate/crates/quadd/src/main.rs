use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use quadd::datasets::{self, load_task, Task, TaskId};
use quadd::distill::{post_quantize, quadd_run, DistillConfig, InitStrategy, Surrogate};
use quadd::error::{Error, Result};
use quadd::eval::{eval_defaults, eval_protocol, eval_seeds};
use quadd::nn::Arch;
use quadd::packfmt::{measure_bits, pack, unpack};
use quadd::qinit::{quantization_guided_selection, QinitConfig};
use quadd::quant::{init_alpha_percentile, QuantKind, QuantizerSpec};
use quadd::sweep::{
    run_cell, run_sweep, summarize_by_budget, CsvRow, EvalOptions, SweepGrid, CSV_HEADER,
};

#[derive(Parser)]
#[command(
    name = "quadd",
    version,
    about = "Quantization-aware dataset distillation under explicit bit budgets"
)]
struct Cli {
    /// Worker threads for parallel cells (or set QUADD_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill one dataset, pack it, and evaluate a student on it.
    Distill(DistillArgs),
    /// Run a rate-distortion grid over (m, bits) cells.
    Sweep(SweepArgs),
    /// Evaluate a packed dataset on a task's test split.
    Eval(EvalArgs),
    /// Report greedy graph-cut selection indices and gains.
    Init(InitArgs),
    /// Convert between raw dataset files (.qdat) and packed .qadd files.
    Pack(PackArgs),
}

#[derive(Args, Clone)]
struct TaskOpts {
    /// Task id: gaussian | beam.
    #[arg(long)]
    task: String,
    /// Seed of the task's train/test data.
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
}

#[derive(Args, Clone)]
struct QuantOpts {
    /// Quantizer kind: apot | uniform-ste | uniform-fsq | uniform-aun.
    #[arg(long, default_value = "apot")]
    quantizer: String,
    /// Bits per element.
    #[arg(long, default_value_t = 3)]
    bits: u8,
    /// APoT base bit-width k (0 picks 2 when it divides bits, else 1).
    #[arg(long, default_value_t = 0)]
    apot_base: u8,
    /// Standardize channels before quantization.
    #[arg(long, default_value_t = false)]
    normalize: bool,
}

#[derive(Args, Clone)]
struct LoopOpts {
    /// Surrogate objective: dm | tm.
    #[arg(long, default_value = "dm")]
    surrogate: String,
    #[arg(long, default_value_t = 10)]
    m_per_class: usize,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    lr_synth: f64,
    #[arg(long, default_value_t = 0.01)]
    lr_alpha: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    probe_hidden: usize,
    #[arg(long, default_value_t = 64)]
    probe_out: usize,
    #[arg(long, default_value_t = 8)]
    student_steps: usize,
    #[arg(long, default_value_t = 1)]
    expert_steps: usize,
    #[arg(long, default_value_t = 6)]
    max_start_epoch: usize,
    #[arg(long, default_value_t = 0.2)]
    lr_student: f64,
    #[arg(long, default_value_t = 10)]
    teacher_epochs: usize,
    #[arg(long, default_value_t = 0.3)]
    teacher_lr: f64,
    #[arg(long, default_value = "mlp-2")]
    teacher_arch: String,
    #[arg(long, default_value_t = 32)]
    teacher_hidden: usize,
    /// Initialization strategy: graphcut | random.
    #[arg(long, default_value = "graphcut")]
    init: String,
    /// Top deficient classes up by sampling with replacement.
    #[arg(long, default_value_t = false)]
    with_replacement: bool,
    /// Bits of the initialization pre-quantizer (defaults to --bits).
    #[arg(long)]
    qinit_bits: Option<u8>,
}

#[derive(Args, Clone)]
struct EvalOpts {
    /// Student architecture(s), comma separated: mlp-2 | mlp-3 | linear.
    #[arg(long, default_value = "mlp-2")]
    arch: String,
    #[arg(long, default_value_t = 1000)]
    eval_seed: u64,
    #[arg(long, default_value_t = 5)]
    eval_runs: usize,
    /// Student epochs (task default when omitted).
    #[arg(long)]
    eval_epochs: Option<usize>,
    #[arg(long)]
    eval_lr: Option<f64>,
    #[arg(long)]
    eval_batch: Option<usize>,
    #[arg(long)]
    eval_width: Option<usize>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    task: TaskOpts,
    #[command(flatten)]
    quant: QuantOpts,
    #[command(flatten)]
    train: LoopOpts,
    #[command(flatten)]
    eval: EvalOpts,
    /// Output .qadd path.
    #[arg(long)]
    out: PathBuf,
    /// Append the report row to this CSV (header written when new).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Distill at full precision, then hard-quantize once at the end
    /// (the post-quantization baseline).
    #[arg(long, default_value_t = false)]
    post_quantize: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    task: TaskOpts,
    #[command(flatten)]
    quant: QuantOpts,
    #[command(flatten)]
    train: LoopOpts,
    #[command(flatten)]
    eval: EvalOpts,
    /// Grid JSON file with m_per_class, bits, seeds, budgets.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Inline grid: comma-separated m values.
    #[arg(long)]
    m_list: Option<String>,
    /// Inline grid: comma-separated bit widths.
    #[arg(long)]
    bits_list: Option<String>,
    /// Inline grid: comma-separated distillation seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Inline grid: comma-separated payload-bit budget targets.
    #[arg(long)]
    budget_list: Option<String>,
    /// Long-format CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-budget best-cell summary CSV path.
    #[arg(long)]
    summary_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    task: TaskOpts,
    #[command(flatten)]
    eval: EvalOpts,
    /// Packed .qadd input.
    #[arg(long)]
    input: PathBuf,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    task: TaskOpts,
    #[arg(long, default_value_t = 10)]
    m_per_class: usize,
    #[arg(long, default_value_t = 3)]
    bits: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    model_hidden: usize,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PackArgs {
    /// Input file; direction is inferred from its magic bytes.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    quant: QuantOpts,
    /// Clipping threshold override; the percentile initializer is used
    /// when omitted.
    #[arg(long)]
    alpha: Option<f64>,
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidConfig(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

fn build_config(quant: &QuantOpts, train: &LoopOpts) -> Result<DistillConfig> {
    let cfg = DistillConfig {
        surrogate: Surrogate::parse(&train.surrogate)?,
        m_per_class: train.m_per_class,
        quantizer: QuantKind::parse(&quant.quantizer)?,
        bits: quant.bits,
        apot_base_bits: quant.apot_base,
        normalize: quant.normalize,
        iterations: train.iters,
        lr_synth: train.lr_synth,
        lr_alpha: train.lr_alpha,
        batch_size: train.batch_size,
        probe_hidden: train.probe_hidden,
        probe_out: train.probe_out,
        student_steps: train.student_steps,
        expert_steps: train.expert_steps,
        max_start_epoch: train.max_start_epoch,
        lr_student: train.lr_student,
        teacher_epochs: train.teacher_epochs,
        teacher_lr: train.teacher_lr,
        teacher_arch: Arch::parse(&train.teacher_arch)?,
        teacher_hidden: train.teacher_hidden,
        normalize_tm: true,
        init_strategy: match train.init.as_str() {
            "graphcut" => InitStrategy::GraphCut,
            "random" => InitStrategy::RandomPool,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown init strategy {other:?}"
                )))
            }
        },
        init_with_replacement: train.with_replacement,
        qinit_bits: train.qinit_bits,
        seed: train.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn build_eval_options(task: TaskId, eval: &EvalOpts) -> Result<(Vec<Arch>, EvalOptions)> {
    let archs: Vec<Arch> = eval
        .arch
        .split(',')
        .map(|s| Arch::parse(s.trim()))
        .collect::<Result<_>>()?;
    let mut config = eval_defaults(task);
    if let Some(e) = eval.eval_epochs {
        config.epochs = e;
    }
    if let Some(lr) = eval.eval_lr {
        config.lr = lr;
    }
    if let Some(b) = eval.eval_batch {
        config.batch = b;
    }
    if let Some(w) = eval.eval_width {
        config.width = w;
    }
    let options = EvalOptions {
        arch: archs[0],
        eval_seed: eval.eval_seed,
        eval_runs: eval.eval_runs,
        config,
    };
    Ok((archs, options))
}

fn append_csv(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let new = !path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if new {
        writeln!(file, "{header}")?;
    }
    for line in lines {
        writeln!(file, "{line}")?;
    }
    Ok(())
}

fn load_task_by_name(opts: &TaskOpts) -> Result<Task> {
    load_task(TaskId::parse(&opts.task)?, opts.data_seed)
}

fn cmd_distill(args: DistillArgs) -> Result<()> {
    let task = load_task_by_name(&args.task)?;
    let (_, eval_options) = build_eval_options(task.id, &args.eval)?;
    let mut cfg = build_config(&args.quant, &args.train)?;

    let (row, dataset) = if args.post_quantize {
        let target_spec = cfg.base_spec();
        cfg.quantizer = QuantKind::Passthrough;
        let start = std::time::Instant::now();
        let out = quadd_run(&task.train, &cfg)?;
        let alpha = init_alpha_percentile(&out.dataset.samples_tensor())?;
        let spec = target_spec.with_alpha(alpha);
        let post = post_quantize(&out.dataset, &spec)?;
        let report = eval_protocol(
            &post,
            &task.test,
            eval_options.arch,
            &eval_seeds(eval_options.eval_seed, eval_options.eval_runs),
            &eval_options.config,
        )?;
        let counts = measure_bits(&post, true)?;
        let row = CsvRow {
            task: task.id.name().to_string(),
            surrogate: cfg.surrogate.name().to_string(),
            m: post.m as u64,
            bits: args.quant.bits,
            payload_bits: counts.payload_bits,
            total_bits: counts.total_bits,
            accuracy_mean: report.accuracy_mean,
            accuracy_std: report.accuracy_std,
            macro_f1_mean: report.macro_f1_mean,
            seconds: start.elapsed().as_secs_f64(),
        };
        (row, post)
    } else {
        let outcome = run_cell(&task, &cfg, &[cfg.seed], &eval_options)?;
        (outcome.row, outcome.dataset.discretized()?)
    };

    std::fs::write(&args.out, pack(&dataset)?)?;
    println!("{CSV_HEADER}");
    println!("{}", row.to_line());
    if let Some(csv) = &args.csv {
        append_csv(csv, CSV_HEADER, &[row.to_line()])?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let task = load_task_by_name(&args.task)?;
    let (_, eval_options) = build_eval_options(task.id, &args.eval)?;
    let base = build_config(&args.quant, &args.train)?;

    let grid = if let Some(path) = &args.grid {
        SweepGrid::from_json(&std::fs::read_to_string(path)?)?
    } else {
        let need = |opt: &Option<String>, what: &str| -> Result<String> {
            opt.clone()
                .ok_or_else(|| Error::InvalidConfig(format!("--{what} (or --grid) is required")))
        };
        SweepGrid {
            m_per_class: parse_list(&need(&args.m_list, "m-list")?, "m")?,
            bits: parse_list(&need(&args.bits_list, "bits-list")?, "bits")?,
            seeds: parse_list(&need(&args.seeds, "seeds")?, "seed")?,
            budgets: match &args.budget_list {
                Some(b) => parse_list(b, "budget")?,
                None => Vec::new(),
            },
        }
    };

    let outcome = run_sweep(&task, &base, &grid, &eval_options)?;
    for (m, b, msg) in &outcome.failures {
        eprintln!("cell (m={m}, b={b}) failed: {msg}");
    }
    if outcome.rows.is_empty() {
        return Err(Error::InvalidConfig("every sweep cell failed".into()));
    }
    let lines: Vec<String> = outcome.rows.iter().map(|r| r.to_line()).collect();
    std::fs::write(&args.out, format!("{CSV_HEADER}\n{}\n", lines.join("\n")))?;
    if let Some(summary_path) = &args.summary_out {
        let summary = summarize_by_budget(&outcome.rows, &grid.budgets);
        let mut text = format!("budget,{CSV_HEADER}\n");
        for (budget, row) in summary {
            text.push_str(&format!("{budget},{}\n", row.to_line()));
        }
        std::fs::write(summary_path, text)?;
    }
    println!(
        "sweep complete: {} rows, {} failed cells",
        outcome.rows.len(),
        outcome.failures.len()
    );
    Ok(())
}

const EVAL_CSV_HEADER: &str =
    "task,arch,m,b,payload_bits,total_bits,accuracy_mean,accuracy_std,macro_f1_mean,seconds";

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let task = load_task_by_name(&args.task)?;
    let (archs, eval_options) = build_eval_options(task.id, &args.eval)?;
    let bytes = std::fs::read(&args.input)?;
    let ds = unpack(&bytes)?;
    let counts = measure_bits(&ds, true)?;
    let mut lines = Vec::new();
    for arch in archs {
        let start = std::time::Instant::now();
        let report = eval_protocol(
            &ds,
            &task.test,
            arch,
            &eval_seeds(eval_options.eval_seed, eval_options.eval_runs),
            &eval_options.config,
        )?;
        lines.push(format!(
            "{},{},{},{},{},{},{},{},{},{:.3}",
            task.id.name(),
            arch.name(),
            ds.m,
            ds.spec.bits,
            counts.payload_bits,
            counts.total_bits,
            report.accuracy_mean,
            report.accuracy_std,
            report.macro_f1_mean,
            start.elapsed().as_secs_f64()
        ));
    }
    match &args.csv {
        Some(path) => append_csv(path, EVAL_CSV_HEADER, &lines)?,
        None => {
            println!("{EVAL_CSV_HEADER}");
            for line in &lines {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn cmd_init(args: InitArgs) -> Result<()> {
    let task = load_task_by_name(&args.task)?;
    let qcfg = QinitConfig {
        bits: args.bits,
        model_arch: Arch::Mlp2,
        model_hidden: args.model_hidden,
        seed: args.seed,
    };
    let outcome = quantization_guided_selection(&task.train, &qcfg, args.m_per_class)?;
    let mut text = String::from("class,rank,index,gain\n");
    for sel in &outcome.selections {
        for (rank, (&idx, &gain)) in sel.indices.iter().zip(&sel.gains).enumerate() {
            text.push_str(&format!("{},{},{},{}\n", sel.class, rank, idx, gain));
        }
    }
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_pack(args: PackArgs) -> Result<()> {
    let bytes = std::fs::read(&args.input)?;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            needed: 4,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic == quadd::packfmt::PACK_MAGIC {
        // .qadd -> raw dataset
        let ds = unpack(&bytes)?;
        let labeled = ds.labeled_view()?;
        datasets::save_dataset(&labeled, &args.out)?;
        println!(
            "unpacked {} samples x {} dims to {}",
            ds.m,
            ds.d,
            args.out.display()
        );
    } else if magic == datasets::DATASET_MAGIC {
        // raw dataset -> quantized .qadd
        let raw = datasets::dataset_from_bytes(&bytes)?;
        let kind = QuantKind::parse(&args.quant.quantizer)?;
        let alpha = match args.alpha {
            Some(a) => a,
            None => init_alpha_percentile(&raw.features_tensor())?,
        };
        let mut spec = match kind {
            QuantKind::Apot => {
                let base = if args.quant.apot_base == 0 {
                    quadd::quant::default_apot_base(args.quant.bits)
                } else {
                    args.quant.apot_base
                };
                QuantizerSpec::apot(args.quant.bits, base, alpha)
            }
            QuantKind::UniformFsq => QuantizerSpec::new(kind, args.quant.bits, 1.0),
            kind => QuantizerSpec::new(kind, args.quant.bits, alpha),
        };
        spec.normalize = args.quant.normalize;
        let ds = quadd::distill::DistilledDataset {
            samples: raw.features.clone(),
            m: raw.n,
            d: raw.d,
            classes: raw.classes,
            labels: raw.labels.clone(),
            spec,
            norm_stats: None,
            discretized: false,
            provenance: quadd::distill::Provenance {
                config_hash: 0,
                seed: 0,
            },
        };
        let packed = ds.discretized()?;
        std::fs::write(&args.out, pack(&packed)?)?;
        let counts = measure_bits(&packed, true)?;
        println!(
            "packed {} samples x {} dims at {} payload bits to {}",
            packed.m,
            packed.d,
            counts.payload_bits,
            args.out.display()
        );
    } else {
        return Err(Error::BadMagic(magic));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("QUADD_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Distill(args) => cmd_distill(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Init(args) => cmd_init(args),
        Command::Pack(args) => cmd_pack(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
