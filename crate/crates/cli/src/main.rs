use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use tfapprox::report::{run, Command, RunConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Build,
    Verify,
    ApproxError,
    Count,
    VcBound,
    Shatter,
    Tradeoff,
    Regression,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Build => Command::Build,
            Cmd::Verify => Command::Verify,
            Cmd::ApproxError => Command::ApproxError,
            Cmd::Count => Command::Count,
            Cmd::VcBound => Command::VcBound,
            Cmd::Shatter => Command::Shatter,
            Cmd::Tradeoff => Command::Tradeoff,
            Cmd::Regression => Command::Regression,
        }
    }
}

/// Builds and checks explicit Transformer approximators of Hölder functions.
///
/// Exit status: 0 when every check passes, 1 on usage errors, 2 when a
/// check fails. Reports go to --out, else $TFAPPROX_OUT, else ./tfapprox-out.
#[derive(Debug, Parser)]
#[command(name = "tfapprox", version)]
struct Args {
    command: Cmd,
    /// Hölder exponent.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Hölder constant and output bound.
    #[arg(long = "K", default_value_t = 1.0)]
    k: f64,
    /// Token dimension.
    #[arg(long, default_value_t = 1)]
    d: usize,
    /// Sequence length.
    #[arg(long = "L", default_value_t = 2)]
    l: usize,
    /// Target accuracy; selects the grid widths.
    #[arg(long)]
    eps: Option<f64>,
    /// Cube width.
    #[arg(long)]
    delta: Option<f64>,
    /// Gap width.
    #[arg(long = "delta-star")]
    delta_star: Option<f64>,
    /// Level count, for count, vc-bound and shatter.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Target function: bump, product, zero, constant, constant:<c>.
    #[arg(long, default_value = "bump")]
    target: String,
    /// RNG seed; required by every command except count and vc-bound.
    #[arg(long)]
    seed: Option<u64>,
    /// Sample budget; its meaning depends on the command.
    #[arg(long)]
    samples: Option<usize>,
    /// Mantissa bits for contextual verification; below 64 uses double precision.
    #[arg(long = "precision-bits")]
    precision_bits: Option<u32>,
    /// Noise level for regression.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Repetitions per sample size for regression.
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let config = RunConfig {
        command: args.command.into(),
        alpha: args.alpha,
        k: args.k,
        d: args.d,
        l: args.l,
        eps: args.eps,
        delta: args.delta,
        delta_star: args.delta_star,
        m: args.m,
        target: args.target,
        seed: args.seed,
        samples: args.samples,
        precision_bits: args.precision_bits,
        noise: args.noise,
        reps: args.reps,
        out: args.out,
    };
    let outcome = run(&config);
    for c in &outcome.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    if let Some(msg) = &outcome.message {
        eprintln!("error: {msg}");
    }
    ExitCode::from(outcome.code as u8)
}
