//! End-to-end pipelines: each reads a configuration, writes its artifacts
//! under an output directory and finishes with a manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cascade::{
    init_state, run_stages, MetricRow, PseudoNegativePool, Recorder, RoundRecord, StageObserver, TrainState,
};
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::data::{make_dataset, make_split, Dataset};
use crate::error::{Result, WinnError};
use crate::image_io::{write_image, write_raw};
use crate::metrics::{self, CsvFile};
use crate::nn::ArchitectureSpec;
use crate::params::ModelParams;
use crate::seeds::{derive_seed, stream};
use crate::supervised::{error_rate, evaluate_attack, train_supervised, AttackReport, NetClassifier, SupervisedRun};
use crate::synthesis::{anysize_synthesize, early_stop_threshold, synthesize, AnysizeResult, InitMode, NetField};
use crate::tensor::Tensor;
use crate::train::AdamConfig;
use crate::Mode;

pub const CONFIG_FILE: &str = "config.toml";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| WinnError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| WinnError::io(path, e))
}

/// Positive data for `cfg`, checked against the model input.
pub fn positives(cfg: &RunConfig, spec: &ArchitectureSpec) -> Result<Dataset> {
    let data = make_dataset(&cfg.dataset, derive_seed(cfg.seed, stream::DATA, 0))?;
    let item = data.batch(1, &mut ChaCha8Rng::seed_from_u64(0));
    if item.shape()[1..] != spec.input[..] {
        return Err(WinnError::config(format!(
            "dataset items {:?} do not match model input {:?}",
            &item.shape()[1..],
            spec.input
        )));
    }
    Ok(data)
}

/// Writes a batch of samples: PNG plus exact raw dump per image, or one CSV
/// for vector data.
pub fn write_samples(dir: &Path, samples: &Tensor, limit: usize) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut out = Vec::new();
    let item = &samples.shape()[1..];
    if item.len() == 1 {
        let path = dir.join("samples.csv");
        let header: Vec<String> = (0..item[0]).map(|i| format!("x{i}")).collect();
        let mut text = header.join(",") + "\n";
        for i in 0..samples.batch() {
            let row: Vec<String> = samples.sample(i).iter().map(|v| v.to_string()).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        write_text(&path, &text)?;
        out.push(path);
    } else {
        for i in 0..samples.batch().min(limit) {
            let t = samples.gather(&[i]).reshape(item)?;
            let png = dir.join(format!("sample-{i}.png"));
            let raw = dir.join(format!("sample-{i}.f64"));
            write_image(&t, &png)?;
            write_raw(&t, &raw)?;
            out.extend([png, raw]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainOptions {
    /// Save a checkpoint after every this many stages (0: only after the last
    /// stage of each cascade).
    pub checkpoint_every: usize,
    /// Image samples written per stage (vector data is always written whole).
    pub samples_per_stage: usize,
    /// Stop (with a checkpoint) once this `(cascade, stage)` is done.
    pub stop_after: Option<(usize, usize)>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            checkpoint_every: 5,
            samples_per_stage: 16,
            stop_after: None,
        }
    }
}

pub fn checkpoint_path(out: &Path, cascade: usize, stage: usize) -> PathBuf {
    out.join("checkpoints").join(format!("cascade-{cascade}-stage-{stage}.ckpt"))
}

fn stage_dir(out: &Path, cascades: usize, cascade: usize, stage: usize) -> PathBuf {
    if cascades == 1 {
        out.join(format!("stage-{stage}"))
    } else {
        out.join(format!("cascade-{cascade}")).join(format!("stage-{stage}"))
    }
}

/// Writes metrics, samples and checkpoints as stages finish.
struct FileObserver<'a> {
    cfg: &'a RunConfig,
    config_text: String,
    out: &'a Path,
    opts: &'a TrainOptions,
    metrics: CsvFile,
    rounds: CsvFile,
    timing: CsvFile,
    clock: Instant,
    /// Final stage of the current cascade.
    last_stage: usize,
    previous: Vec<ModelParams>,
    seed_samples: Option<Tensor>,
    recorder: Recorder,
}

impl FileObserver<'_> {
    fn save(&self, state: &TrainState) -> Result<PathBuf> {
        let ck = Checkpoint {
            config: self.config_text.clone(),
            previous: self.previous.clone(),
            seed_samples: self.seed_samples.clone(),
            state: state.clone(),
        };
        let path = checkpoint_path(self.out, state.cascade, state.stage);
        checkpoint::save(&ck, &path)?;
        Ok(path)
    }
}

impl StageObserver for FileObserver<'_> {
    fn stage_done(&mut self, state: &TrainState, rows: &[MetricRow], round: &RoundRecord) -> Result<()> {
        let lines: Vec<String> = rows.iter().map(metrics::metrics_line).collect();
        self.metrics.append(&lines)?;
        self.rounds.append(&[metrics::rounds_line(round)])?;
        let secs = self.clock.elapsed().as_secs_f64();
        self.clock = Instant::now();
        self.timing
            .append(&[format!("{},{},{secs}", state.cascade, state.stage)])?;
        let dir = stage_dir(self.out, self.cfg.train.cascades, state.cascade, state.stage);
        write_samples(&dir, &state.last_samples, self.opts.samples_per_stage)?;
        let every = self.opts.checkpoint_every;
        if state.stage == self.last_stage || (every > 0 && state.stage % every == 0) {
            self.save(state)?;
        }
        self.recorder.stage_done(state, rows, round)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// State of the last cascade trained.
    pub state: TrainState,
    /// Classifiers of the earlier cascades.
    pub previous: Vec<ModelParams>,
    /// Everything recorded by this invocation (not rows kept from before a
    /// resume).
    pub recorder: Recorder,
    /// The checkpoint written last.
    pub checkpoint: PathBuf,
    pub stopped_early: bool,
}

/// Trains `cfg.train.cascades` cascades of `cfg.train.stages` stages each,
/// optionally continuing from a checkpoint written by an earlier run of the
/// same configuration. Rows of `metrics.csv`, `rounds.csv` and `timing.csv`
/// past the checkpoint are discarded, so an interrupted and resumed run ends
/// with the same metrics bytes as an uninterrupted one.
pub fn train_run(cfg: &RunConfig, out: &Path, resume: Option<&Path>, opts: &TrainOptions) -> Result<TrainOutput> {
    let spec = cfg.architecture()?;
    let mut settings = cfg.stage_settings()?;
    let mut data = positives(cfg, &spec)?;
    create_dir(out)?;
    let config_text = cfg.to_toml();
    write_text(&out.join(CONFIG_FILE), &config_text)?;

    let resumed = resume.map(|p| checkpoint::load(p, Some(&cfg.hash()))).transpose()?;
    let csv = |name: &str, header: &str| -> Result<CsvFile> {
        let path = out.join(name);
        match &resumed {
            Some(ck) => {
                let at = (ck.state.cascade, ck.state.stage);
                CsvFile::resume(&path, header, |l| metrics::row_stage(l).is_some_and(|s| s <= at))
            }
            None => CsvFile::create(&path, header),
        }
    };
    let mut obs = FileObserver {
        cfg,
        config_text: config_text.clone(),
        out,
        opts,
        metrics: csv(metrics::METRICS_FILE, metrics::METRICS_HEADER)?,
        rounds: csv(metrics::ROUNDS_FILE, metrics::ROUNDS_HEADER)?,
        timing: csv(metrics::TIMING_FILE, metrics::TIMING_HEADER)?,
        clock: Instant::now(),
        last_stage: cfg.train.stages,
        previous: Vec::new(),
        seed_samples: None,
        recorder: Recorder::default(),
    };
    let (first, mut current) = match resumed {
        Some(ck) => {
            obs.previous = ck.previous;
            obs.seed_samples = ck.seed_samples;
            (ck.state.cascade, Some(ck.state))
        }
        None => (1, None),
    };

    let mut last = None;
    let mut stopped_early = false;
    for k in first..=cfg.train.cascades {
        if let Some(s) = &obs.seed_samples {
            settings.synthesis.init = InitMode::FromSamples(s.clone());
        }
        let mut state = match current.take() {
            Some(s) => s,
            None => init_state(&spec, &settings, cfg.seed, k)?,
        };
        settings.stages = match opts.stop_after {
            Some((sk, ss)) if sk == k => ss.clamp(1, cfg.train.stages),
            _ => cfg.train.stages,
        };
        obs.last_stage = settings.stages;
        run_stages(&spec, &mut data, &settings, &mut state, &mut obs)?;
        if settings.stages < cfg.train.stages {
            stopped_early = true;
            last = Some(state);
            break;
        }
        if k < cfg.train.cascades {
            obs.previous.push(state.params.clone());
            obs.seed_samples = Some(state.last_samples.clone());
        }
        last = Some(state);
    }
    let state = last.ok_or_else(|| WinnError::usage("checkpoint is past the last cascade"))?;
    let ck_path = checkpoint_path(out, state.cascade, state.stage);
    if !ck_path.exists() {
        obs.save(&state)?;
    }
    if !stopped_early {
        write_samples(&out.join("final"), &state.last_samples, opts.samples_per_stage)?;
    }
    metrics::write_manifest(out)?;
    Ok(TrainOutput {
        previous: obs.previous,
        recorder: obs.recorder,
        checkpoint: ck_path,
        state,
        stopped_early,
    })
}

/// Early-stopping threshold drawn against a fresh positive batch.
fn threshold_for(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    data: &Dataset,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let reference = data.batch(batch, rng);
    let f = spec.eval_f(params, &reference, Mode::Eval, rng)?;
    early_stop_threshold(f.data(), rng)
}

/// Draws `count` samples from a checkpoint's classifier chain: the first
/// cascade starts from the configured initializer, each later one from its
/// predecessor's output.
pub fn sample_checkpoint(ck: &Checkpoint, count: usize, seed: u64) -> Result<Tensor> {
    if count == 0 {
        return Err(WinnError::usage("--count must be at least 1"));
    }
    let cfg = RunConfig::from_toml(&ck.config)?;
    let spec = cfg.architecture()?;
    let data = positives(&cfg, &spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SYNTHESIS, 0));
    let mut synth = cfg.synthesis_config()?;
    let mut samples: Option<Tensor> = None;
    for params in ck.previous.iter().chain([&ck.state.params]) {
        if let Some(s) = samples.take() {
            synth.init = InitMode::FromSamples(s);
        }
        let threshold = threshold_for(&spec, params, &data, cfg.train.threshold_batch, &mut rng)?;
        let dropout = ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut rng));
        let mut field = NetField::new(&spec, params, synth.dropout, dropout);
        samples = Some(synthesize(&mut field, &synth, count, threshold, &mut rng)?.samples);
    }
    Ok(samples.expect("chain has at least one classifier"))
}

/// `synthesize` subcommand: samples plus manifest.
pub fn synthesize_run(ck_path: &Path, count: usize, seed: Option<u64>, out: &Path) -> Result<Vec<PathBuf>> {
    let ck = checkpoint::load(ck_path, None)?;
    let seed = match seed {
        Some(s) => s,
        None => RunConfig::from_toml(&ck.config)?.seed,
    };
    let samples = sample_checkpoint(&ck, count, seed)?;
    let files = write_samples(out, &samples, count)?;
    metrics::write_manifest(out)?;
    Ok(files)
}

/// `texture` subcommand: an image larger than the model input, synthesized
/// from overlapping patches.
pub fn texture_run(ck_path: &Path, seed: Option<u64>, out: &Path) -> Result<AnysizeResult> {
    let ck = checkpoint::load(ck_path, None)?;
    let cfg = RunConfig::from_toml(&ck.config)?;
    let spec = cfg.architecture()?;
    if spec.input.len() != 3 || spec.input[1] != spec.input[2] {
        return Err(WinnError::config(format!(
            "texture synthesis needs a square image model, got input {:?}",
            spec.input
        )));
    }
    let geom = cfg.canvas(spec.input[1]);
    let seed = seed.unwrap_or(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::TEXTURE, 0));
    let adam = AdamConfig {
        lr: cfg.synthesis.lr,
        beta1: cfg.synthesis.beta1,
        beta2: cfg.synthesis.beta2,
        eps: AdamConfig::SYNTHESIS.eps,
    };
    let dropout = ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut rng));
    let mut field = NetField::new(&spec, &ck.state.params, cfg.synthesis.dropout, dropout);
    let t = &cfg.texture;
    let result = anysize_synthesize(&mut field, &geom, t.patches, t.iters, &adam, t.init_sigma, &mut rng)?;
    create_dir(out)?;
    write_image(&result.image, &out.join("texture.png"))?;
    write_raw(&result.image, &out.join("texture.f64"))?;
    write_image(&result.canvas, &out.join("canvas.png"))?;
    let mut scores = String::from("iteration,mean_score\n");
    for (i, s) in result.mean_scores.iter().enumerate() {
        scores.push_str(&format!("{},{s}\n", i + 1));
    }
    write_text(&out.join("scores.csv"), &scores)?;
    metrics::write_manifest(out)?;
    Ok(result)
}

/// Outcome of one supervised training run.
#[derive(Debug, Clone)]
pub struct SupervisedOutput {
    pub run: SupervisedRun,
    pub train_error: f64,
    pub test_error: f64,
    pub checkpoint: PathBuf,
}

const EVAL_CHUNK: usize = 100;

fn labeled(d: &Dataset) -> Result<(&Tensor, &[usize])> {
    match (d.samples(), d.labels()) {
        (Some(x), Some(y)) => Ok((x, y)),
        _ => Err(WinnError::config("supervised runs need a labeled dataset (kind = \"digits\")")),
    }
}

/// Trains one supervised classifier (`introspective` overrides the config)
/// and writes `epochs.csv`, `errors.csv` and `model.ckpt` under `out`.
pub fn supervised_run(cfg: &RunConfig, out: &Path, introspective: Option<bool>) -> Result<SupervisedOutput> {
    let mut cfg = cfg.clone();
    if let Some(i) = introspective {
        cfg.supervised.introspective = i;
    }
    let spec = cfg.architecture()?;
    let split = make_split(&cfg.dataset, derive_seed(cfg.seed, stream::DATA, 0))?;
    let (x, y) = labeled(&split.train)?;
    let (xt, yt) = labeled(&split.test)?;
    let run = train_supervised(&spec, x, y, &cfg.supervised_settings()?, cfg.seed)?;
    let mut c = NetClassifier {
        spec: &spec,
        params: &run.params,
    };
    let train_error = error_rate(&mut c, x, y, EVAL_CHUNK)?;
    let test_error = error_rate(&mut c, xt, yt, EVAL_CHUNK)?;

    create_dir(out)?;
    let config_text = cfg.to_toml();
    write_text(&out.join(CONFIG_FILE), &config_text)?;
    let mut epochs = String::from("epoch,mean_softmax,mean_total,pool_size\n");
    for e in &run.epochs {
        epochs.push_str(&format!("{},{},{},{}\n", e.epoch, e.mean_softmax, e.mean_total, e.pool_size));
    }
    write_text(&out.join("epochs.csv"), &epochs)?;
    write_text(
        &out.join("errors.csv"),
        &format!("train_error,test_error\n{train_error},{test_error}\n"),
    )?;
    let pool = run.pool.clone().unwrap_or_else(|| PseudoNegativePool::new(&spec.input));
    let mut empty = vec![0];
    empty.extend_from_slice(&spec.input);
    let ck = Checkpoint {
        config: config_text,
        previous: Vec::new(),
        seed_samples: None,
        state: TrainState {
            cascade: 1,
            stage: run.epochs.len(),
            params: run.params.clone(),
            adam: run.adam.clone(),
            pool,
            streams: run.streams.clone(),
            last_samples: Tensor::zeros(&empty),
        },
    };
    let path = out.join("model.ckpt");
    checkpoint::save(&ck, &path)?;
    metrics::write_manifest(out)?;
    Ok(SupervisedOutput {
        run,
        train_error,
        test_error,
        checkpoint: path,
    })
}

/// Clean test error of a checkpointed classifier on `cfg`'s test split.
pub fn classify_checkpoint(cfg: &RunConfig, ck_path: &Path) -> Result<f64> {
    let ck = checkpoint::load(ck_path, None)?;
    let spec = RunConfig::from_toml(&ck.config)?.architecture()?;
    let split = make_split(&cfg.dataset, derive_seed(cfg.seed, stream::DATA, 0))?;
    let (xt, yt) = labeled(&split.test)?;
    error_rate(
        &mut NetClassifier {
            spec: &spec,
            params: &ck.state.params,
        },
        xt,
        yt,
        EVAL_CHUNK,
    )
}

/// FGSM evaluation of two classifiers against each other.
#[derive(Debug, Clone)]
pub struct AttackOutput {
    pub baseline_error: f64,
    pub winn_error: f64,
    /// Attacks on the baseline, re-judged by the introspective model.
    pub on_baseline: AttackReport,
    /// Attacks on the introspective model, re-judged by the baseline.
    pub on_winn: AttackReport,
}

/// `attack` subcommand. Without checkpoints, trains a cross-entropy baseline
/// and an introspective model from the same seeds first (under
/// `out/baseline` and `out/winn`).
pub fn attack_run(
    cfg: &RunConfig,
    out: &Path,
    epsilon: f64,
    models: Option<(&Path, &Path)>,
) -> Result<AttackOutput> {
    let (base_ck, winn_ck) = match models {
        Some((a, b)) => (a.to_path_buf(), b.to_path_buf()),
        None => {
            let a = supervised_run(cfg, &out.join("baseline"), Some(false))?.checkpoint;
            let b = supervised_run(cfg, &out.join("winn"), Some(true))?.checkpoint;
            (a, b)
        }
    };
    let load = |p: &Path| -> Result<(ArchitectureSpec, ModelParams)> {
        let ck = checkpoint::load(p, None)?;
        Ok((RunConfig::from_toml(&ck.config)?.architecture()?, ck.state.params))
    };
    let (spec_a, params_a) = load(&base_ck)?;
    let (spec_b, params_b) = load(&winn_ck)?;
    let split = make_split(&cfg.dataset, derive_seed(cfg.seed, stream::DATA, 0))?;
    let (xt, yt) = labeled(&split.test)?;
    let mut a = NetClassifier {
        spec: &spec_a,
        params: &params_a,
    };
    let mut b = NetClassifier {
        spec: &spec_b,
        params: &params_b,
    };
    let baseline_error = error_rate(&mut a, xt, yt, EVAL_CHUNK)?;
    let winn_error = error_rate(&mut b, xt, yt, EVAL_CHUNK)?;
    let on_baseline = evaluate_attack(&spec_a, &params_a, &mut b, xt, yt, epsilon, EVAL_CHUNK)?;
    let on_winn = evaluate_attack(&spec_b, &params_b, &mut a, xt, yt, epsilon, EVAL_CHUNK)?;

    create_dir(out)?;
    let mut text = format!("attacked,judged_by,epsilon,clean_error,{}\n", AttackReport::csv_header());
    text.push_str(&format!("baseline,winn,{epsilon},{baseline_error},{}\n", on_baseline.csv_row()));
    text.push_str(&format!("winn,baseline,{epsilon},{winn_error},{}\n", on_winn.csv_row()));
    write_text(&out.join("attack.csv"), &text)?;
    metrics::write_manifest(out)?;
    Ok(AttackOutput {
        baseline_error,
        winn_error,
        on_baseline,
        on_winn,
    })
}
