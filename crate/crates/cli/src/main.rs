//! `winn`: train, sample and evaluate introspective networks.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime and numeric failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use winn::checkpoint;
use winn::config::RunConfig;
use winn::divergence::{sweep, Inequality};
use winn::metrics;
use winn::run::{self, TrainOptions};
use winn::seeds::{derive_seed, stream};
use winn::{Result, WinnError};

/// Overrides the output root (otherwise `output_dir` from the config).
const OUTPUT_ROOT_VAR: &str = "WINN_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "winn", version, about = "Wasserstein introspective networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a single classifier by reclassification-by-synthesis.
    Train(TrainArgs),
    /// Train a cascade of classifiers, each starting its synthesis from the
    /// previous one's samples (`train.cascades`, at least 2 unless given).
    Cascade {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        cascades: Option<usize>,
    },
    /// Draw samples from a trained checkpoint.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Synthesize a texture larger than the model's input.
    Texture {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a supervised classifier (or evaluate one) on a labeled dataset.
    Classify {
        #[command(flatten)]
        run: RunArgs,
        /// Evaluate this checkpoint instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train the plain cross-entropy baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// FGSM attacks between a cross-entropy baseline and an introspective
    /// classifier; both are trained first unless given.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0.125)]
        epsilon: f64,
        #[arg(long, alias = "method-a", requires = "winn_model")]
        baseline_model: Option<PathBuf>,
        #[arg(long, alias = "method-b", requires = "baseline_model")]
        winn_model: Option<PathBuf>,
    },
    /// Randomized check of the divergence identities and bounds.
    Theory {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Largest support size.
        #[arg(long, default_value_t = 16)]
        support: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table as CSV here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Describe a checkpoint, or verify a run directory against its manifest.
    Inspect { path: PathBuf },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set train.stages=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    stages: Option<usize>,
    /// Continue from a checkpoint written by the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = TrainOptions::default().checkpoint_every)]
    checkpoint_every: usize,
    /// Image samples written per stage.
    #[arg(long, default_value_t = TrainOptions::default().samples_per_stage)]
    samples: usize,
}

impl RunArgs {
    fn load(&self, extra: &[String]) -> Result<(RunConfig, PathBuf)> {
        let mut overrides = self.overrides.clone();
        overrides.extend_from_slice(extra);
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let cfg = RunConfig::load_with(&self.config, &overrides)?;
        let out = match &self.output {
            Some(o) => o.clone(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| cfg.output_dir.clone(), PathBuf::from);
                root.join(&cfg.name)
            }
        };
        Ok((cfg, out))
    }
}

/// `cascade`: `None` for plain training, `Some(flag)` for the cascade
/// subcommand.
fn train(args: &TrainArgs, cascade: Option<Option<usize>>) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = args.stages {
        extra.push(format!("train.stages={s}"));
    }
    let (mut cfg, mut out) = args.run.load(&extra)?;
    if let Some(flag) = cascade {
        let k = flag.unwrap_or(cfg.train.cascades.max(2));
        extra.push(format!("train.cascades={k}"));
        (cfg, out) = args.run.load(&extra)?;
    }
    let opts = TrainOptions {
        checkpoint_every: args.checkpoint_every,
        samples_per_stage: args.samples,
        stop_after: None,
    };
    let result = run::train_run(&cfg, &out, args.resume.as_deref(), &opts)?;
    if let Some(last) = result.recorder.rows.last() {
        let r = &last.report;
        println!(
            "cascade {} stage {}: W = {:.5}, penalty = {:.5}, mean f+ = {:.4}, mean f- = {:.4}, pool {}",
            last.cascade, last.stage, r.wasserstein, r.penalty, r.mean_f_pos, r.mean_f_neg, last.pool_size
        );
    }
    println!("checkpoint: {}", result.checkpoint.display());
    println!("outputs: {}", out.display());
    Ok(())
}

fn default_out(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}

fn theory(trials: usize, support: usize, seed: u64, output: Option<&Path>) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::THEORY, 0));
    let report = sweep(trials, support, &mut rng)?;
    let gap_ok = report.max_gap <= 1e-10;
    println!("{} random pairs, support 2..={support}, seed {seed}", report.trials);
    println!("{:<18} {:>14} {:>11}  status", "check", "worst", "violations");
    let status = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "{:<18} {:>14.3e} {:>11}  {}",
        "log-ratio identity",
        report.max_gap,
        usize::from(!gap_ok),
        status(gap_ok)
    );
    let mut csv = String::from("check,worst,violations,status\n");
    csv.push_str(&format!("log_ratio_identity,{},{},{}\n", report.max_gap, usize::from(!gap_ok), status(gap_ok)));
    for c in &report.checks {
        let ok = c.violations == 0;
        println!("{:<18} {:>14.3e} {:>11}  {}", c.name, c.worst_margin, c.violations, status(ok));
        csv.push_str(&format!("{},{},{},{}\n", c.name, c.worst_margin, c.violations, status(ok)));
    }
    println!("(worst: largest identity gap; smallest rhs - lhs margin, slack {:e})", Inequality::SLACK);
    if let Some(dir) = output {
        std::fs::create_dir_all(dir).map_err(|e| WinnError::io(dir, e))?;
        let p = dir.join("theory.csv");
        std::fs::write(&p, csv).map_err(|e| WinnError::io(&p, e))?;
        metrics::write_manifest(dir)?;
    }
    Ok(gap_ok && report.violations == 0)
}

fn inspect(path: &Path) -> Result<bool> {
    if path.is_dir() {
        let bad = metrics::verify_manifest(path)?;
        let text = std::fs::read_to_string(path.join(metrics::MANIFEST_FILE))
            .map_err(|e| WinnError::io(path.join(metrics::MANIFEST_FILE), e))?;
        println!("{} files in manifest", text.lines().count());
        for b in &bad {
            println!("MISMATCH {b}");
        }
        return Ok(bad.is_empty());
    }
    let ck = checkpoint::load(path, None)?;
    let cfg = RunConfig::from_toml(&ck.config)?;
    let st = &ck.state;
    println!("run {:?}, seed {}, model {}", cfg.name, cfg.seed, cfg.model.preset);
    println!("cascade {}, stages completed {}", st.cascade, st.stage);
    println!("earlier cascades: {}", ck.previous.len());
    println!("parameters ({} values):", st.params.total_len());
    for e in st.params.entries() {
        println!("  {:<16} {:?} {:?}", e.name, e.value.shape(), e.role);
    }
    println!("adam step {}, lr {}", st.adam.step, st.adam.config.lr);
    println!("pool: {} items of {:?}, {} draws", st.pool.len(), st.pool.item_shape(), st.pool.draws());
    Ok(true)
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train(args) => train(&args, None).map(|_| true),
        Command::Cascade { train: args, cascades } => train(&args, Some(cascades)).map(|_| true),
        Command::Synthesize {
            checkpoint,
            count,
            seed,
            output,
        } => {
            let out = output.unwrap_or_else(|| default_out(&checkpoint, "samples"));
            let files = run::synthesize_run(&checkpoint, count, seed, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
            Ok(true)
        }
        Command::Texture { checkpoint, seed, output } => {
            let out = output.unwrap_or_else(|| default_out(&checkpoint, "texture"));
            let r = run::texture_run(&checkpoint, seed, &out)?;
            let s = r.image.shape();
            println!("{}x{} texture in {}", s[2], s[1], out.display());
            Ok(true)
        }
        Command::Classify {
            run: args,
            checkpoint,
            baseline,
        } => {
            let (cfg, out) = args.load(&[])?;
            match checkpoint {
                Some(c) => println!("test error {:.4}", run::classify_checkpoint(&cfg, &c)?),
                None => {
                    let r = run::supervised_run(&cfg, &out, baseline.then_some(false))?;
                    println!("train error {:.4}, test error {:.4}", r.train_error, r.test_error);
                    println!("checkpoint: {}", r.checkpoint.display());
                }
            }
            Ok(true)
        }
        Command::Attack {
            run: args,
            epsilon,
            baseline_model,
            winn_model,
        } => {
            let (cfg, out) = args.load(&[])?;
            let models = baseline_model.as_deref().zip(winn_model.as_deref());
            let r = run::attack_run(&cfg, &out, epsilon, models)?;
            println!("clean test error: baseline {:.4}, introspective {:.4}", r.baseline_error, r.winn_error);
            println!("attacks on baseline, judged by introspective: {}", r.on_baseline);
            println!("attacks on introspective, judged by baseline: {}", r.on_winn);
            Ok(true)
        }
        Command::Theory {
            trials,
            support,
            seed,
            output,
        } => theory(trials, support, seed, output.as_deref()),
        Command::Inspect { path } => inspect(&path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
