use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mechkit::{
    cmd_example1, cmd_example2, cmd_example3, cmd_match_demo, cmd_race_bench, cmd_transform_dc,
    cmd_transform_general, cmd_verify, error_exit_code, parse_backend,
};

/// Transform approximately incentive-compatible mechanisms into exactly
/// BIC, IR mechanisms and certify the result.
#[derive(Parser)]
#[command(name = "mechkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a BIC transformation pipeline.
    Transform {
        #[command(subcommand)]
        which: TransformCmd,
    },
    /// Certify BIC / IR / revenue of an instance's mechanism.
    Verify(VerifyArgs),
    /// Matching demos.
    #[command(name = "match")]
    Matching {
        #[command(subcommand)]
        which: MatchSub,
    },
    /// Gibbs sampler benchmarks.
    Race {
        #[command(subcommand)]
        which: RaceSub,
    },
    /// Prebuilt regression scenarios.
    Examples {
        #[command(subcommand)]
        which: ExampleSub,
    },
}

#[derive(Subcommand)]
enum TransformCmd {
    /// Downward-closed pipeline (replica-surrogate matching).
    Dc(TransformDcArgs),
    /// General-outcome pipeline (fractional assignment).
    General(TransformGeneralArgs),
}

#[derive(Args)]
struct TransformDcArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0.04)]
    eps: f64,
    /// Phase-2 price discount; derived from eps when omitted.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    etap: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 8)]
    ell: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value = "exact")]
    backend: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    runs: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransformGeneralArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    /// Weight samples per surrogate column in empirical mode.
    #[arg(long = "L", default_value_t = 10_000)]
    l: u64,
    #[arg(long, default_value = "exact")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON dump of the assignment plans (q*, duals, payments).
    #[arg(long)]
    plan_out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: PathBuf,
    /// bic | ir | revenue
    #[arg(long)]
    which: String,
    /// exact | mc
    #[arg(long, default_value = "exact")]
    mode: String,
    #[arg(long, default_value_t = 100_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MatchSub {
    /// Online entropy-regularized matching on an explicit weight matrix.
    Demo(MatchDemoArgs),
}

#[derive(Args)]
struct MatchDemoArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    ell: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0.2)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    etap: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    runs: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum RaceSub {
    /// Frequencies and flip counts of the Gibbs sampler.
    Bench(RaceBenchArgs),
}

#[derive(Args)]
struct RaceBenchArgs {
    /// Comma-separated candidate means in [-1, 1].
    #[arg(long)]
    means: String,
    /// Candidate count; must match `means` when given.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, default_value_t = 0.0)]
    h: f64,
    #[arg(long, default_value = "race")]
    backend: String,
    #[arg(long, default_value_t = 100_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ExampleSub {
    /// Revenue collapse of the perfect-matching transform vs the pipeline.
    Ex1 {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20_000)]
        runs: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Equal-mean weight sources and the estimate-then-drop trap.
    Ex2 {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        runs: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pathological duals vs the clipped program's payment floor.
    Ex3 {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> mechkit_core::Result<i32> {
    match cli.cmd {
        Cmd::Transform { which } => match which {
            TransformCmd::Dc(a) => cmd_transform_dc(
                &a.config,
                a.eps,
                a.eta,
                a.etap,
                a.delta,
                a.ell,
                a.d,
                parse_backend(&a.backend)?,
                a.seed,
                a.runs,
                &a.out,
            ),
            TransformCmd::General(a) => cmd_transform_general(
                &a.config,
                a.eps,
                a.gamma,
                a.l,
                &a.mode,
                a.seed,
                &a.out,
                a.plan_out.as_deref(),
            ),
        },
        Cmd::Verify(a) => cmd_verify(&a.config, &a.which, &a.mode, a.samples, a.seed, &a.out),
        Cmd::Matching { which } => match which {
            MatchSub::Demo(a) => cmd_match_demo(
                &a.weights, a.ell, a.d, a.delta, a.etap, a.gamma, a.seed, a.runs, &a.out,
            ),
        },
        Cmd::Race { which } => match which {
            RaceSub::Bench(a) => {
                let means: Vec<f64> = a
                    .means
                    .split(',')
                    .map(|x| {
                        x.trim().parse::<f64>().map_err(|e| {
                            mechkit_core::Error::InvalidInput(format!("bad mean: {}", e))
                        })
                    })
                    .collect::<mechkit_core::Result<_>>()?;
                if let Some(m) = a.m {
                    if m != means.len() {
                        return Err(mechkit_core::Error::InvalidInput(format!(
                            "--m {} does not match {} means",
                            m,
                            means.len()
                        )));
                    }
                }
                cmd_race_bench(
                    &means,
                    a.delta,
                    a.h,
                    parse_backend(&a.backend)?,
                    a.samples,
                    a.seed,
                    a.out.as_deref(),
                )
            }
        },
        Cmd::Examples { which } => match which {
            ExampleSub::Ex1 { seed, runs, out } => cmd_example1(seed, runs, &out),
            ExampleSub::Ex2 { seed, runs, out } => cmd_example2(seed, runs, &out),
            ExampleSub::Ex3 { out } => cmd_example3(&out),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(error_exit_code(&e) as u8)
        }
    }
}
