//! `opnet` command line: train, eval, sweep, significance, bench-cache,
//! gen-data. Exit codes: 0 success, 1 usage/config error, 2 data/correctness
//! error. Every randomized command takes an explicit --seed; nothing reads
//! ambient entropy.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use opnet::commands::{
    cmd_bench_cache, cmd_eval, cmd_gen_data, cmd_significance, cmd_sweep, cmd_train, BenchOptions,
    EvalOptions, SweepOptions,
};
use opnet::uncertainty::{BehaviorMode, PrecisionParams};
use opnet::Error;

#[derive(Parser)]
#[command(
    name = "opnet",
    version,
    about = "Monte-Carlo dropout inference engine"
)]
struct Cli {
    /// Worker threads for parallel sampling and permutation counting
    /// (default: all cores). Results never depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (features + label CSVs).
    GenData {
        /// JSON dataset spec: {"kind": ..., "train_count": ..., "test_count": ...}
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output prefix; writes <prefix>_{train,test}.opt1 and label CSVs.
        #[arg(long)]
        out_prefix: String,
    },
    /// Train a network from a JSON config and write checkpoint + loss CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        out_loss: PathBuf,
    },
    /// Score a test set under one behavior mode and write the report JSON.
    Eval(EvalArgs),
    /// Run a (mode x T x p_drop) grid plus a plain baseline row into a CSV.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated modes (mean, optimistic, pessimistic).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        t_values: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        p_drop_values: Vec<f64>,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Include wall-clock times per row (makes the CSV non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Paired permutation significance test between two eval reports.
    Significance {
        #[arg(long)]
        report_a: PathBuf,
        #[arg(long)]
        report_b: PathBuf,
        /// Upper bound on the standard deviation of the estimated p-value.
        #[arg(long, default_value_t = 0.001)]
        sigma_p: f64,
        /// Anchor p for sizing the permutation count (worst case 0.5).
        #[arg(long, default_value_t = 0.5)]
        p_anchor: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare naive (recompute features every pass) against cached
    /// evaluation and write a timing CSV.
    BenchCache {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',')]
        t_values: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0.5)]
        p_drop: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// plain | mean | optimistic | pessimistic.
    #[arg(long)]
    mode: String,
    /// Number of stochastic passes (ignored in plain mode).
    #[arg(long, default_value_t = 100)]
    t: usize,
    #[arg(long, default_value_t = 0.5)]
    p_drop: f64,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Relative tolerance for the required-T formula, recorded in metadata.
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long)]
    seed: u64,
    /// Enable precision mode: keep_prob,length_scale_sq,sample_count,weight_decay.
    #[arg(long, value_delimiter = ',')]
    tau_params: Option<Vec<f64>>,
    /// Also add 1/tau to the mean (the literal published formula).
    #[arg(long)]
    literal_mean_offset: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        // Ignores the error when a pool already exists (tests reuse the
        // process); thread count never changes results anyway.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::UnsupportedLossHead(_) => 1,
        _ => 2,
    }
}

fn parse_mode(s: &str) -> Result<BehaviorMode, Error> {
    s.parse()
        .map_err(|_| Error::Config(format!("unknown behavior mode '{s}'")))
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData {
            config,
            seed,
            out_prefix,
        } => {
            let paths = cmd_gen_data(&config, seed, &out_prefix)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Train {
            config,
            seed,
            out_checkpoint,
            out_loss,
        } => {
            cmd_train(&config, seed, &out_checkpoint, &out_loss)?;
            println!("wrote {}", out_checkpoint.display());
            println!("wrote {}", out_loss.display());
            Ok(())
        }
        Command::Eval(args) => {
            let tau_params = match &args.tau_params {
                None => None,
                Some(v) if v.len() == 4 => Some(PrecisionParams {
                    keep_prob: v[0],
                    length_scale_sq: v[1],
                    sample_count: v[2],
                    weight_decay: v[3],
                }),
                Some(v) => {
                    return Err(Error::Config(format!(
                        "--tau-params needs 4 values (keep_prob,length_scale_sq,sample_count,weight_decay), got {}",
                        v.len()
                    )))
                }
            };
            let opts = EvalOptions {
                model: args.model,
                data: args.data,
                labels: args.labels,
                mode: parse_mode(&args.mode)?,
                t: args.t,
                p_drop: args.p_drop,
                alpha: args.alpha,
                rho: args.rho,
                seed: args.seed,
                tau_params,
                literal_mean_offset: args.literal_mean_offset,
                out: args.out.clone(),
            };
            let report = cmd_eval(&opts)?;
            let agg = &report.aggregates;
            let mut summary = format!("mode={}", report.metadata.mode);
            for (k, v) in &agg.top_k_errors {
                summary.push_str(&format!(" top{k}_error={v:.4}"));
            }
            if let Some(map) = agg.map {
                summary.push_str(&format!(" map={map:.4}"));
            }
            println!("{summary}");
            println!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Sweep {
            model,
            data,
            labels,
            modes,
            t_values,
            p_drop_values,
            alpha,
            seed,
            out,
            timing,
        } => {
            let modes = modes
                .iter()
                .map(|m| parse_mode(m))
                .collect::<Result<Vec<_>, _>>()?;
            cmd_sweep(&SweepOptions {
                model,
                data,
                labels,
                modes,
                t_values,
                p_drop_values,
                alpha,
                seed,
                out: out.clone(),
                timing,
            })?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Significance {
            report_a,
            report_b,
            sigma_p,
            p_anchor,
            seed,
            out,
        } => {
            let verdict = cmd_significance(
                &report_a,
                &report_b,
                sigma_p,
                p_anchor,
                seed,
                out.as_deref(),
            )?;
            println!(
                "{}",
                serde_json::to_string_pretty(&verdict).expect("verdict serializes")
            );
            Ok(())
        }
        Command::BenchCache {
            model,
            t_values,
            reps,
            p_drop,
            seed,
            out,
        } => {
            let rows = cmd_bench_cache(&BenchOptions {
                model,
                t_values,
                repetitions: reps,
                p_drop,
                seed,
                out: Some(out.clone()),
            })?;
            for r in &rows {
                println!(
                    "T={}: naive {:.3} ms, fast {:.3} ms, speedup {:.2}x",
                    r.t, r.naive_ms, r.fast_ms, r.speedup
                );
            }
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
