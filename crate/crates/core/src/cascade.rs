//! The outer introspective loop: alternate classification and synthesis for
//! `T` stages, grow the pseudo-negative pool, and chain cascades.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WinnError};
use crate::nn::ArchitectureSpec;
use crate::params::ModelParams;
use crate::seeds::{derive_seed, stream};
use crate::synthesis::{early_stop_threshold, init_samples, synthesize, InitMode, NetField, SynthesisConfig};
use crate::tensor::{numel, Tensor};
use crate::train::{classification_step, AdamConfig, AdamState, BatchSource, ClassificationSettings, LossReport};
use crate::Mode;

pub const DEFAULT_POOL_CAP: usize = 10_000;
pub const DEFAULT_PER_STAGE: usize = 100;
pub const DEFAULT_THRESHOLD_BATCH: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolRecord {
    pub stage: usize,
    pub cascade: usize,
}

/// Every pseudo-negative generated so far; nothing is ever removed.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoNegativePool {
    item_shape: Vec<usize>,
    data: Vec<f64>,
    records: Vec<PoolRecord>,
    /// Total items drawn from the pool.
    draws: u64,
}

impl PseudoNegativePool {
    pub fn new(item_shape: &[usize]) -> Self {
        PseudoNegativePool {
            item_shape: item_shape.to_vec(),
            data: Vec::new(),
            records: Vec::new(),
            draws: 0,
        }
    }

    /// Rebuilds a pool from stored parts.
    pub fn from_parts(item_shape: &[usize], data: Vec<f64>, records: Vec<PoolRecord>, draws: u64) -> Result<Self> {
        if data.len() != records.len() * numel(item_shape) {
            return Err(WinnError::Checkpoint(format!(
                "pool holds {} values for {} records of shape {item_shape:?}",
                data.len(),
                records.len()
            )));
        }
        let pool = PseudoNegativePool {
            item_shape: item_shape.to_vec(),
            data,
            records,
            draws,
        };
        if !pool.stages_non_decreasing() {
            return Err(WinnError::Checkpoint("pool stage tags decrease".into()));
        }
        Ok(pool)
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.item_shape
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PoolRecord] {
        &self.records
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let len = numel(&self.item_shape);
        &self.data[i * len..(i + 1) * len]
    }

    /// Appends a batch tagged with `(stage, cascade)`.
    pub fn append(&mut self, batch: &Tensor, stage: usize, cascade: usize) -> Result<()> {
        if batch.shape()[1..] != self.item_shape[..] {
            return Err(WinnError::usage(format!(
                "pool holds {:?} items, got batch {:?}",
                self.item_shape,
                batch.shape()
            )));
        }
        if let Some(last) = self.records.last() {
            if (cascade, stage) < (last.cascade, last.stage) {
                return Err(WinnError::usage(format!(
                    "stage {stage} (cascade {cascade}) appended after stage {} (cascade {})",
                    last.stage, last.cascade
                )));
            }
        }
        self.data.extend_from_slice(batch.data());
        self.records
            .extend(std::iter::repeat_n(PoolRecord { stage, cascade }, batch.batch()));
        Ok(())
    }

    pub fn stages_non_decreasing(&self) -> bool {
        self.records
            .windows(2)
            .all(|w| (w[0].cascade, w[0].stage) <= (w[1].cascade, w[1].stage))
    }

    /// Items `idx` as a batch.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let items: Vec<&[f64]> = idx.iter().map(|&i| self.item(i)).collect();
        Tensor::stack(&self.item_shape, &items).expect("pool items share a shape")
    }

    /// Uniform draws with replacement over all stored items (all stages).
    pub fn sample(&mut self, count: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
        if self.is_empty() {
            return Err(WinnError::usage("cannot sample from an empty pseudo-negative pool"));
        }
        let idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..self.len())).collect();
        self.draws += count as u64;
        Ok(self.gather(&idx))
    }

    /// Indices eligible for one classification stage: all items, or a
    /// uniform subset of `cap` items when the pool is larger.
    pub fn eligible(&self, cap: usize, rng: &mut dyn RngCore) -> Vec<usize> {
        if self.len() <= cap {
            (0..self.len()).collect()
        } else {
            let mut v = index::sample(rng, self.len(), cap).into_vec();
            v.sort_unstable();
            v
        }
    }
}

/// `pool_sample` as a free function.
pub fn pool_sample(pool: &mut PseudoNegativePool, count: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
    pool.sample(count, rng)
}

/// Energy distance `2E|X−Y| − E|X−X'| − E|Y−Y'|` between two sample sets
/// (V-statistics, Euclidean norm over each sample's elements).
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape()[1..] != b.shape()[1..] || a.batch() == 0 || b.batch() == 0 {
        return Err(WinnError::usage(format!(
            "energy distance needs non-empty batches of equal item shape, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mean_dist = |x: &Tensor, y: &Tensor| {
        let mut s = 0.0;
        for i in 0..x.batch() {
            let xi = x.sample(i);
            for j in 0..y.batch() {
                let d: f64 = xi.iter().zip(y.sample(j)).map(|(p, q)| (p - q) * (p - q)).sum();
                s += d.sqrt();
            }
        }
        s / (x.batch() * y.batch()) as f64
    };
    Ok(2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b))
}

/// A serializable snapshot of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Random streams of one cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams {
    pub classify: ChaCha8Rng,
    pub synthesis: ChaCha8Rng,
    pub pool: ChaCha8Rng,
}

impl Streams {
    pub fn new(master: u64, cascade: usize) -> Self {
        let s = |id| ChaCha8Rng::seed_from_u64(derive_seed(master, id, cascade as u64));
        Streams {
            classify: s(stream::CLASSIFY),
            synthesis: s(stream::SYNTHESIS),
            pool: s(stream::POOL),
        }
    }
}

/// Everything needed to continue a run after a completed stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// 1-based cascade index.
    pub cascade: usize,
    /// Stages completed in this cascade.
    pub stage: usize,
    pub params: ModelParams,
    pub adam: AdamState,
    pub pool: PseudoNegativePool,
    pub streams: Streams,
    /// Samples synthesized in the most recent stage (the initial pool before
    /// stage 1).
    pub last_samples: Tensor,
}

/// Hyperparameters of the outer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSettings {
    pub stages: usize,
    pub per_stage: usize,
    pub pool_cap: usize,
    pub threshold_batch: usize,
    pub classification: ClassificationSettings,
    pub adam: AdamConfig,
    pub synthesis: SynthesisConfig,
}

impl StageSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(WinnError::config(format!("{name} must be at least 1")))
            } else {
                Ok(())
            }
        };
        positive("train.stages", self.stages)?;
        positive("train.per_stage", self.per_stage)?;
        positive("train.pool_cap", self.pool_cap)?;
        positive("train.threshold_batch", self.threshold_batch)?;
        positive("train.half_batch", self.classification.half_batch)?;
        self.synthesis.validate()
    }
}

/// One synthesis round, as recorded for the early-stopping contract.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub cascade: usize,
    pub stage: usize,
    pub threshold: f64,
    pub pos_min: f64,
    pub pos_max: f64,
    pub scores: Vec<f64>,
    pub budget_exhausted: Vec<bool>,
    pub stop_step: Vec<usize>,
}

impl RoundRecord {
    pub fn contract_holds(&self) -> bool {
        self.threshold >= self.pos_min
            && self.threshold <= self.pos_max
            && self
                .scores
                .iter()
                .zip(&self.budget_exhausted)
                .all(|(&s, &b)| b || s >= self.threshold)
    }
}

/// One metrics row per classification iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub cascade: usize,
    pub stage: usize,
    pub inner_step: usize,
    pub report: LossReport,
    pub pool_size: usize,
}

/// Called after every completed stage.
pub trait StageObserver {
    fn stage_done(&mut self, state: &TrainState, rows: &[MetricRow], round: &RoundRecord) -> Result<()>;
}

impl StageObserver for () {
    fn stage_done(&mut self, _: &TrainState, _: &[MetricRow], _: &RoundRecord) -> Result<()> {
        Ok(())
    }
}

/// Collects everything in memory.
#[derive(Debug, Default, Clone)]
pub struct Recorder {
    pub rows: Vec<MetricRow>,
    pub rounds: Vec<RoundRecord>,
    /// Samples synthesized in each stage, in order.
    pub stage_samples: Vec<Tensor>,
}

impl StageObserver for Recorder {
    fn stage_done(&mut self, state: &TrainState, rows: &[MetricRow], round: &RoundRecord) -> Result<()> {
        self.rows.extend_from_slice(rows);
        self.rounds.push(round.clone());
        self.stage_samples.push(state.last_samples.clone());
        Ok(())
    }
}

/// A fresh cascade: new classifier, stage-0 pool drawn from the synthesis
/// initializer.
pub fn init_state(
    spec: &ArchitectureSpec,
    settings: &StageSettings,
    master_seed: u64,
    cascade: usize,
) -> Result<TrainState> {
    settings.validate()?;
    let params = spec.init_params(derive_seed(master_seed, stream::PARAMS, cascade as u64))?;
    let adam = AdamState::new(settings.adam, &params);
    let mut streams = Streams::new(master_seed, cascade);
    let initial = init_samples(&settings.synthesis.init, settings.per_stage, &spec.input, &mut streams.synthesis)?
        .clamp(-1.0, 1.0);
    let mut pool = PseudoNegativePool::new(&spec.input);
    pool.append(&initial, 0, cascade)?;
    Ok(TrainState {
        cascade,
        stage: 0,
        params,
        adam,
        pool,
        streams,
        last_samples: initial,
    })
}

/// Runs stages `state.stage + 1 ..= settings.stages`.
pub fn run_stages(
    spec: &ArchitectureSpec,
    positives: &mut dyn BatchSource,
    settings: &StageSettings,
    state: &mut TrainState,
    observer: &mut dyn StageObserver,
) -> Result<()> {
    settings.validate()?;
    while state.stage < settings.stages {
        let stage = state.stage + 1;
        let mut next = state.clone();
        let rows = run_one_stage(spec, positives, settings, &mut next, stage)?;
        let round = rows.1;
        next.stage = stage;
        *state = next;
        observer.stage_done(state, &rows.0, &round)?;
    }
    Ok(())
}

/// Works on a copy so that a failing stage leaves the caller's state (and
/// hence any checkpoint of it) untouched.
fn run_one_stage(
    spec: &ArchitectureSpec,
    positives: &mut dyn BatchSource,
    settings: &StageSettings,
    st: &mut TrainState,
    stage: usize,
) -> Result<(Vec<MetricRow>, RoundRecord)> {
    let eligible = st.pool.eligible(settings.pool_cap, &mut st.streams.pool);
    let pool = &st.pool;
    let mut negatives = |count: usize, rng: &mut dyn RngCore| -> Result<Tensor> {
        let idx: Vec<usize> = (0..count).map(|_| eligible[rng.random_range(0..eligible.len())]).collect();
        Ok(pool.gather(&idx))
    };
    let reports = classification_step(
        spec,
        &mut st.params,
        &mut st.adam,
        positives,
        &mut negatives,
        &settings.classification,
        &mut st.streams.classify,
    )?;
    st.pool.draws += (settings.classification.inner_steps * settings.classification.half_batch) as u64;
    let pool_size = st.pool.len();
    let rows = reports
        .into_iter()
        .enumerate()
        .map(|(i, report)| MetricRow {
            cascade: st.cascade,
            stage,
            inner_step: i + 1,
            report,
            pool_size,
        })
        .collect();

    let rng = &mut st.streams.synthesis;
    let reference = positives.next_batch(settings.threshold_batch, rng)?;
    let mode = if settings.synthesis.dropout { Mode::Train } else { Mode::Eval };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let f_pos = spec.eval_f(&st.params, &reference, mode, &mut dropout_rng)?;
    let threshold = early_stop_threshold(f_pos.data(), rng)?;
    let mut field = NetField::new(spec, &st.params, settings.synthesis.dropout, dropout_rng);
    let result = synthesize(&mut field, &settings.synthesis, settings.per_stage, threshold, rng)?;
    st.pool.append(&result.samples, stage, st.cascade)?;
    let round = RoundRecord {
        cascade: st.cascade,
        stage,
        threshold,
        pos_min: f_pos.data().iter().copied().fold(f64::INFINITY, f64::min),
        pos_max: f_pos.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
        scores: result.scores,
        budget_exhausted: result.budget_exhausted,
        stop_step: result.stop_step,
    };
    st.last_samples = result.samples;
    Ok((rows, round))
}

/// Trains one classifier for `T` stages from a fresh state.
pub fn train_single(
    spec: &ArchitectureSpec,
    positives: &mut dyn BatchSource,
    settings: &StageSettings,
    master_seed: u64,
    observer: &mut dyn StageObserver,
) -> Result<TrainState> {
    let mut state = init_state(spec, settings, master_seed, 1)?;
    run_stages(spec, positives, settings, &mut state, observer)?;
    Ok(state)
}

/// The trained classifiers of a cascade, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeState {
    pub stages: Vec<TrainState>,
}

impl CascadeState {
    pub fn final_samples(&self) -> Option<&Tensor> {
        self.stages.last().map(|s| &s.last_samples)
    }
}

/// `K` cascades; cascade `k > 1` trains a fresh classifier whose synthesis
/// starts from cascade `k − 1`'s final samples.
pub fn train_cascade(
    spec: &ArchitectureSpec,
    positives: &mut dyn BatchSource,
    settings: &StageSettings,
    cascades: usize,
    master_seed: u64,
    observer: &mut dyn StageObserver,
) -> Result<CascadeState> {
    if cascades == 0 {
        return Err(WinnError::config("train.cascades must be at least 1"));
    }
    let mut out = CascadeState { stages: Vec::new() };
    let mut settings = settings.clone();
    for k in 1..=cascades {
        if k > 1 {
            let prev = out
                .final_samples()
                .ok_or_else(|| WinnError::config(format!("cascade {k} has no previous samples")))?;
            settings.synthesis.init = InitMode::FromSamples(prev.clone());
        }
        let mut state = init_state(spec, &settings, master_seed, k)?;
        run_stages(spec, positives, &settings, &mut state, observer)?;
        out.stages.push(state);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn single_item_pool() {
        let mut pool = PseudoNegativePool::new(&[2]);
        pool.append(&Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap(), 0, 1).unwrap();
        let s = pool.sample(3, &mut r(0)).unwrap();
        assert_eq!(s.data(), &[0.5, -0.5, 0.5, -0.5, 0.5, -0.5]);
        assert_eq!(pool.sample(0, &mut r(0)).unwrap().shape(), &[0, 2]);
    }

    #[test]
    fn empty_pool_is_usage_error() {
        let mut pool = PseudoNegativePool::new(&[2]);
        assert!(pool.sample(1, &mut r(0)).unwrap_err().is_usage());
    }

    #[test]
    fn stages_must_not_decrease() {
        let mut pool = PseudoNegativePool::new(&[1]);
        let b = Tensor::zeros(&[1, 1]);
        pool.append(&b, 2, 1).unwrap();
        assert!(pool.append(&b, 1, 1).is_err());
        pool.append(&b, 0, 2).unwrap();
    }

    #[test]
    fn eligible_subset_is_capped() {
        let mut pool = PseudoNegativePool::new(&[1]);
        pool.append(&Tensor::zeros(&[30, 1]), 0, 1).unwrap();
        assert_eq!(pool.eligible(50, &mut r(1)).len(), 30);
        let e = pool.eligible(10, &mut r(1));
        assert_eq!(e.len(), 10);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn energy_distance_basics() {
        let a = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert!(energy_distance(&a, &a).unwrap().abs() < 1e-15);
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        // 2·mean(3, 2) − mean(0,1,1,0) − 0 = 5 − 0.5
        assert!((energy_distance(&a, &b).unwrap() - 4.5).abs() < 1e-15);
    }

    #[test]
    fn rng_state_round_trip() {
        let mut a = r(9);
        let _: u64 = a.random();
        let mut b = RngState::of(&a).restore();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }
}
