//! `seqvit`: verify, train, benchmark and cost sequence-parallel ViT layouts
//! on a simulated multi-rank world.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqvit::attention::AttentionKernel;
use seqvit::costmodel::{comm_predict, emit_cost_curves, total_flops, train_time, CostInputs};
use seqvit::harness::{
    bench, bench_csv, gen_synthetic, train, verify, write_checkpoint, write_loss_csv, BenchOptions, Fault, RunConfig,
};
use seqvit::numerics::{stf, DType, Scalar, Tensor};
use seqvit::seqpar::SpKind;
use seqvit::vit::{seq_len_for, EmbedMode};
use seqvit::Error;

const PRECEDENCE: &str = "Settings are resolved in three layers: built-in defaults, then the JSON file \
given by --config, then command-line flags. A flag always wins over the file.";

#[derive(Parser)]
#[command(name = "seqvit", version, about, long_about = PRECEDENCE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every parallel path against its single-rank oracle.
    #[command(long_about = PRECEDENCE)]
    Verify {
        #[command(flatten)]
        run: RunArgs,
        /// Inject a fault to exercise the failure path (shard-range).
        #[arg(long)]
        inject_fault: Option<Fault>,
    },
    /// Train on synthetic data; writes loss.csv and a checkpoint.
    #[command(long_about = PRECEDENCE)]
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Time training steps at several sequence lengths.
    #[command(long_about = PRECEDENCE)]
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Image-width multipliers, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        scales: Vec<usize>,
        /// Tokens per step.
        #[arg(long, default_value_t = 512)]
        token_budget: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Compute cost (6PD FLOPs), training time, cost curves or predicted communication.
    Cost(CostArgs),
    /// Token count for a field resolution.
    Seqlen {
        /// Resolution as HxW, e.g. 128x256.
        #[arg(long)]
        res: String,
        #[arg(long)]
        patch: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        /// multi or agg.
        #[arg(long, default_value = "agg")]
        mode: EmbedMode,
    },
    /// Write synthetic forecast samples as STF1.
    #[command(long_about = PRECEDENCE)]
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sp: Option<usize>,
    #[arg(long)]
    tp: Option<usize>,
    #[arg(long)]
    pp: Option<usize>,
    #[arg(long)]
    dp: Option<usize>,
    /// Sequence-parallel strategy: ulysses or lss.
    #[arg(long)]
    strategy: Option<SpKind>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// f32 or f64.
    #[arg(long)]
    dtype: Option<DType>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Pipeline micro-batches (defaults to at least the pp degree).
    #[arg(long)]
    micro_batches: Option<usize>,
    /// Shard optimizer state over the dp group.
    #[arg(long)]
    zero: bool,
    /// Use tiled attention with this square block size.
    #[arg(long)]
    tile: Option<usize>,
    /// Cap on simulated ranks.
    #[arg(long)]
    max_world: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> seqvit::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let l = &mut cfg.layout;
        for (flag, slot) in [(self.sp, &mut l.sp), (self.tp, &mut l.tp), (self.dp, &mut l.dp)] {
            if let Some(v) = flag {
                *slot = v;
            }
        }
        if let Some(pp) = self.pp {
            l.pp = pp;
            l.micro_batches = l.micro_batches.max(pp);
        }
        if let Some(m) = self.micro_batches {
            l.micro_batches = m;
        }
        if let Some(s) = self.strategy {
            l.strategy = s;
        }
        if self.zero {
            l.zero = true;
        }
        if let Some(b) = self.tile {
            l.kernel = AttentionKernel::Tiled { block_q: b, block_k: b };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(d) = self.dtype {
            cfg.dtype = d;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(b) = self.batch {
            cfg.batch_size = b;
        }
        if let Some(w) = self.max_world {
            cfg.max_world = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct CostArgs {
    /// Parameter count (scientific notation accepted).
    #[arg(long = "P", value_parser = parse_count)]
    p: Option<u64>,
    /// Training tokens.
    #[arg(long = "D", value_parser = parse_count)]
    d: Option<u64>,
    /// Sustained FLOP/s per device.
    #[arg(long, default_value_t = 1e12)]
    r_peak: f64,
    /// Devices.
    #[arg(long, default_value_t = 1)]
    n: u64,
    /// Emit the D×P grid instead of one point.
    #[arg(long, value_delimiter = ',', value_parser = parse_count)]
    d_grid: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_count)]
    p_grid: Vec<u64>,
    /// Print predicted per-step communication for the run layout instead.
    #[arg(long)]
    comm: bool,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let f: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if f.fract() != 0.0 || !(1.0..1.8e19).contains(&f) {
        return Err(format!("`{s}` is not a positive integer"));
    }
    Ok(f as u64)
}

/// Exit status for a library error: 2 for configuration, 1 otherwise.
fn status(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::HeadDivisibility { .. }
        | Error::SeqDivisibility { .. }
        | Error::Divisibility(_)
        | Error::Stage(_)
        | Error::Partition(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(status(&e))
        }
    }
}

fn create_dir(dir: &Path) -> seqvit::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> seqvit::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cmd: Command) -> seqvit::Result<u8> {
    match cmd {
        Command::Verify { run, inject_fault } => {
            let cfg = run.resolve()?;
            let report = verify(&cfg, inject_fault)?;
            for c in &report.checks {
                let m = c.measured.map_or("-".to_string(), |m| format!("{m:.3e}"));
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                println!("{verdict} {:<26} {m:>10} <= {:.0e}", c.name, c.tolerance);
                if let Some(d) = &c.detail {
                    println!("     {d}");
                }
            }
            if run.out.is_some() || run.config.is_some() {
                create_dir(&cfg.out_dir)?;
                write(&cfg.out_dir.join("verify.json"), &report.to_json())?;
            }
            println!("{} ({})", if report.passed { "verify passed" } else { "verify FAILED" }, report.layout);
            Ok(if report.passed { 0 } else { 1 })
        }
        Command::Train { run } => {
            let cfg = run.resolve()?;
            match cfg.dtype {
                DType::F32 => train_and_write::<f32>(&cfg),
                DType::F64 => train_and_write::<f64>(&cfg),
            }
        }
        Command::Bench {
            run,
            scales,
            token_budget,
            repeats,
        } => {
            let cfg = run.resolve()?;
            let rows = bench(
                &cfg,
                &BenchOptions {
                    scales,
                    token_budget,
                    repeats,
                },
            )?;
            let csv = bench_csv(&rows);
            print!("{csv}");
            if run.out.is_some() {
                create_dir(&cfg.out_dir)?;
                write(&cfg.out_dir.join("bench.csv"), &csv)?;
            }
            Ok(0)
        }
        Command::Cost(args) => cost(args),
        Command::Seqlen {
            res,
            patch,
            channels,
            mode,
        } => {
            let (h, w) = res
                .split_once(['x', 'X'])
                .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)))
                .ok_or_else(|| Error::Config {
                    invariant: "resolution-format",
                    detail: format!("`{res}` is not HxW"),
                })?;
            println!("{}", seq_len_for(h, w, patch, channels, mode)?);
            Ok(0)
        }
        Command::GenData { run, count } => {
            let cfg = run.resolve()?;
            match cfg.dtype {
                DType::F32 => gen_data::<f32>(&cfg, count),
                DType::F64 => gen_data::<f64>(&cfg, count),
            }
        }
    }
}

fn train_and_write<T: Scalar>(cfg: &RunConfig) -> seqvit::Result<u8> {
    let out = train::<T>(cfg)?;
    create_dir(&cfg.out_dir)?;
    let loss = cfg.out_dir.join("loss.csv");
    write_loss_csv(&loss, &out.losses)?;
    let (ckpt, _) = write_checkpoint(&cfg.out_dir, cfg, &out)?;
    println!(
        "{} steps, loss {} -> {}, accuracy {:.4}",
        out.losses.len(),
        out.losses[0],
        out.losses[out.losses.len() - 1],
        out.accuracy
    );
    println!("wrote {} and {}", loss.display(), ckpt.display());
    Ok(0)
}

fn gen_data<T: Scalar>(cfg: &RunConfig, count: usize) -> seqvit::Result<u8> {
    let spec = cfg.data_spec();
    let samples = gen_synthetic::<T>(&spec, cfg.seed, count)?;
    create_dir(&cfg.out_dir)?;
    let tensors: Vec<&Tensor<T>> = samples.iter().flat_map(|s| [&s.input, &s.target]).collect();
    let path = cfg.out_dir.join("samples.stf");
    stf::save(&path, &tensors)?;
    let meta = serde_json::json!({
        "format": "STF1",
        "layout": "input,target pairs",
        "count": count,
        "seed": cfg.seed,
        "spec": spec,
    });
    write(&cfg.out_dir.join("samples.json"), &serde_json::to_string_pretty(&meta).expect("json"))?;
    println!("wrote {count} samples to {}", path.display());
    Ok(0)
}

fn cost(args: CostArgs) -> seqvit::Result<u8> {
    if args.comm {
        let cfg = args.run.resolve()?;
        let pred = comm_predict(&cfg.layout, &cfg.model, cfg.batch_size, cfg.dtype.width())?;
        print!("{}", pred.to_csv());
        return Ok(0);
    }
    if !args.d_grid.is_empty() || !args.p_grid.is_empty() {
        print!("{}", emit_cost_curves(&args.d_grid, &args.p_grid, args.r_peak, args.n)?);
        return Ok(0);
    }
    let (Some(p), Some(d)) = (args.p, args.d) else {
        return Err(Error::Config {
            invariant: "cost-positive",
            detail: "give --P and --D, the grids, or --comm".into(),
        });
    };
    let inputs = CostInputs::new(p, d, args.r_peak, args.n)?;
    println!("P,D,flops,time_s");
    println!("{p},{d},{},{:e}", total_flops(&inputs), train_time(&inputs));
    Ok(0)
}
