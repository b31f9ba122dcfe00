//! Pool-based active learning with head-consistency queries.
//!
//! Each round fine-tunes the current model on every labeled sample, scores
//! the unlabeled pool, and asks the simulated oracle for the next batch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::metrics::{dsc, evaluate, final_masks, score_masks, Mask, MetricsError, ScoreRecord, EVAL_BATCH};
use crate::segnet::{build_model, train_step, Adam, AdamConfig, Model, ModelConfig, ModelError, TargetBatch};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ActiveError {
    #[error("{0}")]
    Invalid(String),
    #[error("round {round}: {source}")]
    Round { round: usize, source: Box<ActiveError> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Sink(String),
}

impl ActiveError {
    /// Whether training produced a non-finite loss somewhere underneath.
    pub fn is_divergence(&self) -> bool {
        match self {
            Self::Model(ModelError::Divergence { .. }) => true,
            Self::Metrics(MetricsError::Model(ModelError::Divergence { .. })) => true,
            Self::Round { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Query the samples whose auxiliary heads agree most with the final head.
    #[default]
    ConsistencyHigh,
    ConsistencyLow,
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [Self::ConsistencyHigh, Self::ConsistencyLow, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::ConsistencyHigh => "consistency_high",
            Self::ConsistencyLow => "consistency_low",
            Self::Random => "random",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy {s:?} (expected consistency_high, consistency_low or random)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPolicy {
    pub kind: PolicyKind,
    pub k: usize,
}

impl Default for QueryPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::ConsistencyHigh,
            k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Labeled samples the round trained on.
    pub labels_used: usize,
    pub test_dsc: f64,
    pub val_dsc: f64,
    /// Unlabeled pool scores at selection time, sorted by sample id.
    pub scores: Vec<ScoreRecord>,
    /// Ids sent to the oracle at the end of the round.
    pub queried: Vec<String>,
}

impl RoundMetrics {
    /// Mean consistency score over the scored pool.
    pub fn mean_pool_score(&self) -> Option<f64> {
        (!self.scores.is_empty())
            .then(|| self.scores.iter().map(|s| s.mean_score).sum::<f64>() / self.scores.len() as f64)
    }

    /// Spearman correlation between consistency score and real DSC, when
    /// defined.
    pub fn score_rdsc_correlation(&self) -> Option<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .scores
            .iter()
            .map(|s| s.r_dsc.map(|r| (s.mean_score, r)))
            .collect::<Option<Vec<_>>>()?
            .into_iter()
            .unzip();
        crate::metrics::spearman_rank(&xs, &ys).ok().flatten()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ALState {
    pub labeled: BTreeSet<String>,
    pub unlabeled: BTreeSet<String>,
    pub round: usize,
    pub history: Vec<RoundMetrics>,
    pub rng_seed: u64,
}

impl ALState {
    pub fn pool_size(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

/// Draws `n_init` ids uniformly without replacement into the labeled set.
pub fn init_state(pool: &[String], n_init: usize, seed: u64) -> Result<ALState, ActiveError> {
    let ids: BTreeSet<String> = pool.iter().cloned().collect();
    if ids.len() != pool.len() {
        return Err(ActiveError::Invalid("pool ids are not unique".into()));
    }
    if n_init > ids.len() {
        return Err(ActiveError::Invalid(format!(
            "n_init {n_init} exceeds the pool of {}",
            ids.len()
        )));
    }
    let sorted: Vec<String> = ids.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: BTreeSet<usize> = index::sample(&mut rng, sorted.len(), n_init).into_iter().collect();
    let (labeled, unlabeled) = sorted
        .into_iter()
        .enumerate()
        .partition::<Vec<_>, _>(|(i, _)| picked.contains(i));
    Ok(ALState {
        labeled: labeled.into_iter().map(|(_, id)| id).collect(),
        unlabeled: unlabeled.into_iter().map(|(_, id)| id).collect(),
        round: 0,
        history: Vec::new(),
        rng_seed: seed,
    })
}

/// Training pool whose masks are hidden until annotated.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedPool {
    images: BTreeMap<String, Sample>,
    truth: BTreeMap<String, Mask>,
}

impl SimulatedPool {
    /// Withholds the masks of `samples`, which must all have one.
    pub fn new(samples: Vec<Sample>) -> Result<Self, ActiveError> {
        let mut images = BTreeMap::new();
        let mut truth = BTreeMap::new();
        for s in samples {
            let mask = s
                .mask
                .clone()
                .ok_or_else(|| ActiveError::Invalid(format!("pool sample {} has no ground truth", s.id)))?;
            if images.insert(s.id.clone(), s.without_mask()).is_some() {
                return Err(ActiveError::Invalid(format!("duplicate pool id {}", s.id)));
            }
            truth.insert(s.id, mask);
        }
        Ok(Self { images, truth })
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, id: &str) -> Option<&Sample> {
        self.images.get(id)
    }

    pub fn truth(&self) -> &BTreeMap<String, Mask> {
        &self.truth
    }

    fn reveal(&self, id: &str) -> Result<Sample, ActiveError> {
        let image = self
            .images
            .get(id)
            .ok_or_else(|| ActiveError::Invalid(format!("{id} is not in the pool")))?;
        let mask = self
            .truth
            .get(id)
            .ok_or_else(|| ActiveError::Invalid(format!("no ground truth stored for {id}")))?;
        Ok(Sample {
            mask: Some(mask.clone()),
            labeled: true,
            ..image.clone()
        })
    }
}

/// Scores every sample with the frozen model, in parallel batches.
///
/// When `truth` holds a sample's mask, its `r_dsc` is filled in. Records come
/// back sorted by sample id.
pub fn score_pool(
    model: &Model<f32>,
    samples: &[&Sample],
    truth: Option<&BTreeMap<String, Mask>>,
    round: usize,
) -> Result<Vec<ScoreRecord>, ActiveError> {
    let chunks: Vec<Vec<ScoreRecord>> = samples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<Vec<ScoreRecord>, MetricsError> {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
            let masks = final_masks(model, &images)?;
            chunk
                .iter()
                .zip(&masks)
                .map(|(s, [lower, middle, last])| {
                    let mut rec = score_masks(lower, middle, last, &s.id, round)?;
                    if let Some(gt) = truth.and_then(|t| t.get(&s.id)) {
                        rec.r_dsc = Some(dsc(last, gt)?);
                    }
                    Ok(rec)
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let mut records: Vec<ScoreRecord> = chunks.into_iter().flatten().collect();
    records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(records)
}

/// Picks `min(k, scores.len())` ids. Equal scores fall back to ascending id.
pub fn select<R: Rng + ?Sized>(scores: &[ScoreRecord], policy: &QueryPolicy, rng: &mut R) -> Vec<String> {
    let mut ranked: Vec<&ScoreRecord> = scores.iter().collect();
    ranked.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let k = policy.k.min(ranked.len());
    match policy.kind {
        PolicyKind::ConsistencyHigh => {
            ranked.sort_by(|a, b| b.mean_score.total_cmp(&a.mean_score));
        }
        PolicyKind::ConsistencyLow => {
            ranked.sort_by(|a, b| a.mean_score.total_cmp(&b.mean_score));
        }
        PolicyKind::Random => {
            return index::sample(rng, ranked.len(), k)
                .into_iter()
                .map(|i| ranked[i].sample_id.clone())
                .collect();
        }
    }
    ranked[..k].iter().map(|r| r.sample_id.clone()).collect()
}

/// Moves `ids` from unlabeled to labeled and returns them with their masks.
///
/// Nothing changes unless every id is unlabeled and has stored ground truth.
pub fn oracle_annotate(state: &mut ALState, ids: &[String], pool: &SimulatedPool) -> Result<Vec<Sample>, ActiveError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if state.labeled.contains(id) {
            return Err(ActiveError::Invalid(format!("{id} is already labeled")));
        }
        if !state.unlabeled.contains(id) || !seen.insert(id) {
            return Err(ActiveError::Invalid(format!("{id} is not an unlabeled pool sample")));
        }
    }
    let samples = ids.iter().map(|id| pool.reveal(id)).collect::<Result<Vec<_>, _>>()?;
    for id in ids {
        state.unlabeled.remove(id);
        state.labeled.insert(id.clone());
    }
    Ok(samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_round: 20,
            batch_size: 8,
            adam: AdamConfig::default(),
        }
    }
}

/// A model with its optimizer state; both carry over between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
}

impl Learner {
    pub fn new(config: &ModelConfig, adam: AdamConfig) -> Result<Self, ActiveError> {
        let model = build_model(config)?;
        let optimizer = Adam::new(adam, &model);
        Ok(Self { model, optimizer })
    }
}

/// Runs `epochs` passes of minibatch Adam over `samples`. The visiting order
/// of each epoch comes from ChaCha stream `(stream << 16) + epoch` of
/// `seed`. Returns the mean loss of the last epoch.
pub fn fine_tune(
    learner: &mut Learner,
    samples: &[&Sample],
    epochs: usize,
    batch_size: usize,
    seed: u64,
    stream: u64,
) -> Result<f64, ActiveError> {
    if samples.is_empty() || epochs == 0 {
        return Ok(f64::NAN);
    }
    let mut sorted: Vec<&Sample> = samples.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let masks = sorted
        .iter()
        .map(|s| {
            s.mask
                .as_ref()
                .ok_or_else(|| ActiveError::Invalid(format!("training sample {} has no mask", s.id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let batch_size = batch_size.max(1);
    let mut last = f64::NAN;
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((stream << 16) + epoch as u64);
        let mut order: Vec<usize> = (0..sorted.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let images: Vec<&Tensor<f32>> = batch.iter().map(|&i| &sorted[i].image).collect();
            let targets: Vec<&Mask> = batch.iter().map(|&i| masks[i]).collect();
            let x = Tensor::stack(&images).map_err(ModelError::from)?;
            let t = TargetBatch::from_masks(&targets).map_err(ModelError::from)?;
            let loss = train_step(&mut learner.model, &x, &t, &mut learner.optimizer)?;
            total += loss as f64 * batch.len() as f64;
        }
        last = total / sorted.len() as f64;
    }
    Ok(last)
}

/// Validation and test data plus the pool being annotated.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub pool: SimulatedPool,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Constants of one active-learning run.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub n_init: usize,
    pub label_budget: usize,
}

impl Protocol {
    pub fn validate(&self, pool_size: usize) -> Result<(), ActiveError> {
        self.model.validate()?;
        if self.label_budget < self.n_init {
            return Err(ActiveError::Invalid(format!(
                "label_budget {} is below n_init {}",
                self.label_budget, self.n_init
            )));
        }
        if self.n_init == 0 || self.n_init > pool_size {
            return Err(ActiveError::Invalid(format!(
                "n_init {} must lie in 1..={pool_size}",
                self.n_init
            )));
        }
        if self.train.batch_size == 0 {
            return Err(ActiveError::Invalid("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything that evolves across rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub state: ALState,
    pub learner: Learner,
    pub labeled: Vec<Sample>,
}

/// Seeds the labeled set and the model for one `(policy, seed)` run.
pub fn start_session(env: &Environment, protocol: &Protocol, seed: u64) -> Result<Session, ActiveError> {
    protocol.validate(env.pool.len())?;
    let state = init_state(&env.pool.ids(), protocol.n_init, seed)?;
    let labeled = state
        .labeled
        .iter()
        .map(|id| env.pool.reveal(id))
        .collect::<Result<Vec<_>, _>>()?;
    let model_config = ModelConfig {
        seed,
        ..protocol.model.clone()
    };
    let learner = Learner::new(&model_config, protocol.train.adam)?;
    Ok(Session {
        state,
        learner,
        labeled,
    })
}

/// One round: fine-tune on all labeled samples, evaluate, score the pool and
/// annotate the next query batch unless the budget is spent.
///
/// The input session is left untouched; on error nothing is committed.
pub fn run_round(
    session: &Session,
    env: &Environment,
    protocol: &Protocol,
    policy: &QueryPolicy,
) -> Result<(Session, RoundMetrics), ActiveError> {
    let round = session.state.round;
    let wrap = |e: ActiveError| ActiveError::Round {
        round,
        source: Box::new(e),
    };
    let mut next = session.clone();
    let seed = next.state.rng_seed;
    let refs: Vec<&Sample> = next.labeled.iter().collect();
    fine_tune(
        &mut next.learner,
        &refs,
        protocol.train.epochs_per_round,
        protocol.train.batch_size,
        seed,
        round as u64,
    )
    .map_err(wrap)?;
    let model = &next.learner.model;
    let test_dsc = evaluate(model, &env.test).map_err(|e| wrap(e.into()))?;
    let val_dsc = evaluate(model, &env.val).map_err(|e| wrap(e.into()))?;

    let pool: Vec<&Sample> = next
        .state
        .unlabeled
        .iter()
        .map(|id| env.pool.image(id).expect("state ids come from the pool"))
        .collect();
    let scores = score_pool(model, &pool, Some(env.pool.truth()), round).map_err(wrap)?;
    let room = protocol.label_budget.saturating_sub(next.state.labeled.len());
    let query = QueryPolicy {
        k: policy.k.min(room),
        ..*policy
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64 + 1);
    let queried = select(&scores, &query, &mut rng);
    let labels_used = next.labeled.len();
    let new = oracle_annotate(&mut next.state, &queried, &env.pool).map_err(wrap)?;
    next.labeled.extend(new);

    let metrics = RoundMetrics {
        round,
        labels_used,
        test_dsc,
        val_dsc,
        scores,
        queried,
    };
    next.state.history.push(metrics.clone());
    next.state.round += 1;
    Ok((next, metrics))
}

/// Runs rounds until the label budget or the pool is exhausted.
///
/// `on_round` sees every completed round with the model that produced it;
/// an error from it stops the run.
pub fn run_policy<F>(
    env: &Environment,
    protocol: &Protocol,
    policy: &QueryPolicy,
    seed: u64,
    mut on_round: F,
) -> Result<ALState, ActiveError>
where
    F: FnMut(&RoundMetrics, &Model<f32>) -> Result<(), ActiveError>,
{
    if policy.k == 0 {
        return Err(ActiveError::Invalid("query batch size k must be at least 1".into()));
    }
    let mut session = start_session(env, protocol, seed)?;
    loop {
        let (next, metrics) = run_round(&session, env, protocol, policy)?;
        on_round(&metrics, &next.learner.model)?;
        session = next;
        if metrics.queried.is_empty() {
            return Ok(session.state);
        }
    }
}

/// Result of training on the whole annotated pool.
#[derive(Clone, Debug, PartialEq)]
pub struct FullReference {
    pub labels_used: usize,
    pub test_dsc: f64,
    pub val_dsc: f64,
    pub model: Model<f32>,
}

/// Trains a fresh model on every pool sample for `epochs` epochs: the
/// full-annotation point of comparison.
pub fn train_full_reference(
    env: &Environment,
    protocol: &Protocol,
    seed: u64,
    epochs: usize,
) -> Result<FullReference, ActiveError> {
    protocol.model.validate()?;
    let model_config = ModelConfig {
        seed,
        ..protocol.model.clone()
    };
    let mut learner = Learner::new(&model_config, protocol.train.adam)?;
    let samples = env
        .pool
        .ids()
        .iter()
        .map(|id| env.pool.reveal(id))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Sample> = samples.iter().collect();
    fine_tune(&mut learner, &refs, epochs, protocol.train.batch_size, seed, u64::from(u32::MAX))?;
    Ok(FullReference {
        labels_used: samples.len(),
        test_dsc: evaluate(&learner.model, &env.test)?,
        val_dsc: evaluate(&learner.model, &env.val)?,
        model: learner.model,
    })
}
