use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ipdiff::eval::{BiasMode, ErrorMode, NormalityTest};
use ipdiff::runner::{
    execute, output_dir_override, replay, threads_override, BiasArgs, ErrstatsArgs, ExperimentConfig, GammaRange,
    Invocation, MetricsArgs, RunResult, SampleArgs, RUN_MANIFEST,
};
use ipdiff::sampling::{SamplerKind, VarianceChoice};

/// Diffusion-model laboratory: training with input perturbation, sampling,
/// exposure-bias and prediction-error measurement.
///
/// IPDIFF_OUTPUT_DIR overrides the output directory and IPDIFF_THREADS the
/// worker count; explicit flags take precedence over both.
#[derive(Parser)]
#[command(name = "ipdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sampling and metrics.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Respaced length T'; 0 uses the training T.
        #[arg(long, default_value_t = 0)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Kind::Ancestral)]
        kind: Kind,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Variance::Small)]
        variance: Variance,
        /// Clamp the final samples to [-1, 1].
        #[arg(long)]
        clip: bool,
        /// Use the raw weights instead of the EMA.
        #[arg(long)]
        raw_weights: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Exposure-bias table.
    Bias {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = BiasKind::Det)]
        mode: BiasKind,
        /// Comma-separated steps, e.g. 100,200,300.
        #[arg(long, value_delimiter = ',')]
        t_grid: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        steps: usize,
        #[arg(long)]
        raw_weights: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Prediction-error statistics with normality tests.
    Errstats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        stride: usize,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, value_enum, default_value_t = ErrKind::GenerationSide)]
        mode: ErrKind,
        #[arg(long, value_enum, default_value_t = TestKind::ShapiroWilk)]
        test: TestKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        raw_weights: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Distribution metrics between two point files (.csv or .bin).
    Metrics {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Permutations for the energy two-sample test; 0 skips it.
        #[arg(long, default_value_t = 0)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Train one input-perturbation arm per gamma and score each.
    GridGamma {
        #[arg(long)]
        config: PathBuf,
        /// start:stop:step
        #[arg(long, default_value = "0:0.2:0.025")]
        range: String,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run the command recorded in a run manifest and compare outputs.
    Replay {
        /// A run manifest, or the directory holding one.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ancestral,
    Deterministic,
    Ddim,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variance {
    Small,
    Large,
}

#[derive(Clone, Copy, ValueEnum)]
enum BiasKind {
    Det,
    Stoch,
}

#[derive(Clone, Copy, ValueEnum)]
enum ErrKind {
    GenerationSide,
    TeacherForced,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestKind {
    ShapiroWilk,
    AndersonDarling,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    cfg.apply_env()?;
    Ok(cfg)
}

fn resolve_out(flag: Option<PathBuf>, fallback: PathBuf) -> PathBuf {
    flag.or_else(output_dir_override).unwrap_or(fallback)
}

fn resolve_threads(flag: Option<usize>, fallback: usize) -> Result<usize> {
    Ok(match flag {
        Some(t) => t,
        None => threads_override()?.unwrap_or(fallback),
    }
    .max(1))
}

fn report(run: &RunResult) {
    for (k, v) in &run.summary {
        println!("{k},{v}");
    }
    println!("manifest,{}", run.out_dir.join(RUN_MANIFEST).display());
}

fn run(cli: Cli) -> Result<()> {
    let (inv, out, threads) = match cli.command {
        Command::Train { config, common } => {
            let mut cfg = load_config(&config)?;
            let threads = resolve_threads(common.threads, cfg.threads)?;
            cfg.threads = threads;
            let out = resolve_out(common.out, cfg.output_dir.clone());
            (Invocation::Train { config: cfg }, out, threads)
        }
        Command::GridGamma { config, range, common } => {
            let mut cfg = load_config(&config)?;
            let threads = resolve_threads(common.threads, cfg.threads)?;
            cfg.threads = threads;
            let out = resolve_out(common.out, cfg.output_dir.join("grid-gamma"));
            let range = GammaRange::parse(&range)?;
            (Invocation::GridGamma { config: cfg, range }, out, threads)
        }
        Command::Sample {
            checkpoint,
            steps,
            kind,
            eta,
            n,
            seed,
            variance,
            clip,
            raw_weights,
            common,
        } => {
            let args = SampleArgs {
                steps,
                kind: match kind {
                    Kind::Ancestral => SamplerKind::Ancestral,
                    Kind::Deterministic => SamplerKind::Deterministic,
                    Kind::Ddim => SamplerKind::Ddim,
                },
                eta,
                n,
                seed,
                variance: match variance {
                    Variance::Small => VarianceChoice::PosteriorSmall,
                    Variance::Large => VarianceChoice::BetaLarge,
                },
                clip,
                ema: !raw_weights,
            };
            let out = resolve_out(common.out, checkpoint.join("samples"));
            (Invocation::Sample { checkpoint, args }, out, resolve_threads(common.threads, 1)?)
        }
        Command::Bias {
            checkpoint,
            mode,
            t_grid,
            n,
            seed,
            steps,
            raw_weights,
            common,
        } => {
            let args = BiasArgs {
                mode: match mode {
                    BiasKind::Det => BiasMode::Deterministic,
                    BiasKind::Stoch => BiasMode::Stochastic,
                },
                t_grid,
                n,
                seed,
                steps,
                ema: !raw_weights,
            };
            let out = resolve_out(common.out, checkpoint.join("bias"));
            (Invocation::Bias { checkpoint, args }, out, resolve_threads(common.threads, 1)?)
        }
        Command::Errstats {
            checkpoint,
            stride,
            n,
            mode,
            test,
            seed,
            raw_weights,
            common,
        } => {
            let args = ErrstatsArgs {
                stride,
                n,
                mode: match mode {
                    ErrKind::GenerationSide => ErrorMode::GenerationSide,
                    ErrKind::TeacherForced => ErrorMode::TeacherForced,
                },
                test: match test {
                    TestKind::ShapiroWilk => NormalityTest::ShapiroWilk,
                    TestKind::AndersonDarling => NormalityTest::AndersonDarling,
                },
                seed,
                ema: !raw_weights,
            };
            let out = resolve_out(common.out, checkpoint.join("errstats"));
            (Invocation::Errstats { checkpoint, args }, out, resolve_threads(common.threads, 1)?)
        }
        Command::Metrics {
            real,
            generated,
            k,
            permutations,
            seed,
            common,
        } => {
            let args = MetricsArgs { k, permutations, seed };
            let out = resolve_out(common.out, PathBuf::from("runs/metrics"));
            (Invocation::Metrics { real, generated, args }, out, resolve_threads(common.threads, 1)?)
        }
        Command::Replay { manifest, out } => {
            let path = if manifest.is_dir() { manifest.join(RUN_MANIFEST) } else { manifest };
            let rep = replay(&path, &out)?;
            for p in &rep.matched {
                println!("match,{p}");
            }
            for p in &rep.mismatched {
                println!("mismatch,{p}");
            }
            if !rep.is_exact() {
                bail!("{} of {} outputs differ", rep.mismatched.len(), rep.matched.len() + rep.mismatched.len());
            }
            return Ok(());
        }
    };
    // Metric reductions run on the global pool; results do not depend on
    // its size.
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    let result = execute(&inv, &out, threads).with_context(|| format!("{} failed", inv.name()))?;
    report(&result);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
