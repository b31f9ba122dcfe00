//! `generate` and `run`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use dsal_core::active::{run_policy, train_full_reference, ActiveError, Environment, PolicyKind, SimulatedPool};
use dsal_core::data::{load_dataset, make_dataset, save_dataset, DataError, Manifest};
use dsal_core::segnet::save_checkpoint;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::csv_io::{CsvSink, MetricsRow, ScoreRow, FULL_POLICY, METRICS_HEADER, SCORES_HEADER};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Writes the configured dataset and its manifest.
pub fn generate(config: &ExperimentConfig) -> Result<Manifest, CliError> {
    config.validate()?;
    let dataset = make_dataset(&config.dataset)?;
    let dir = config.data_dir();
    std::fs::create_dir_all(&dir).map_err(|source| DataError::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(save_dataset(&dataset, config.dataset.seed, &dir)?)
}

fn load_environment(config: &ExperimentConfig) -> Result<Environment, CliError> {
    let dir = config.data_dir();
    if !dir.join(dsal_core::data::MANIFEST_FILE).exists() {
        return Err(CliError::Data(DataError::InvalidConfig(format!(
            "no dataset at {} (run `dsal generate` first)",
            dir.display()
        ))));
    }
    let (manifest, dataset) = load_dataset(&dir)?;
    let mismatch = |what: String| CliError::Data(DataError::InvalidConfig(format!("{}: {what}", dir.display())));
    if manifest.seed != config.dataset.seed {
        return Err(mismatch(format!(
            "dataset was generated with seed {} but the config says {}",
            manifest.seed, config.dataset.seed
        )));
    }
    let sizes = (dataset.train.len(), dataset.val.len(), dataset.test.len());
    let want = (config.dataset.n_train, config.dataset.n_val, config.dataset.n_test);
    if sizes != want {
        return Err(mismatch(format!("split sizes {sizes:?} differ from the config's {want:?}")));
    }
    if let Some(s) = dataset
        .splits()
        .iter()
        .flat_map(|(_, s)| s.iter())
        .find(|s| (s.height(), s.width()) != config.model.input_size)
    {
        return Err(mismatch(format!(
            "sample {} is {}×{}, the model expects {:?}",
            s.id,
            s.height(),
            s.width(),
            config.model.input_size
        )));
    }
    if dataset.val.is_empty() || dataset.test.is_empty() {
        return Err(mismatch("validation and test splits must be non-empty".into()));
    }
    Ok(Environment {
        pool: SimulatedPool::new(dataset.train).map_err(CliError::from)?,
        val: dataset.val,
        test: dataset.test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Job {
    Policy(PolicyKind, u64),
    Full(u64),
}

struct Lines {
    metrics: Vec<String>,
    scores: Vec<Vec<String>>,
}

struct Sinks {
    metrics: CsvSink,
    scores: CsvSink,
}

/// Releases rows in job order whatever order the jobs finish in.
struct OrderedSink {
    next: usize,
    finished: BTreeSet<usize>,
    pending: BTreeMap<usize, Vec<Lines>>,
    sinks: Sinks,
    error: Option<CliError>,
}

impl OrderedSink {
    fn write(sinks: &mut Sinks, lines: Lines) -> Result<(), CliError> {
        sinks.metrics.write(&lines.metrics)?;
        for s in &lines.scores {
            sinks.scores.write(s)?;
        }
        sinks.scores.flush()?;
        sinks.metrics.flush()
    }

    fn record(&mut self, result: Result<(), CliError>) {
        if let (Err(e), None) = (result, &self.error) {
            self.error = Some(e);
        }
    }

    fn emit(&mut self, job: usize, lines: Lines) {
        if job == self.next {
            let r = Self::write(&mut self.sinks, lines);
            self.record(r);
        } else {
            self.pending.entry(job).or_default().push(lines);
        }
    }

    fn finish(&mut self, job: usize) {
        self.finished.insert(job);
        while self.finished.contains(&self.next) {
            self.next += 1;
            for lines in self.pending.remove(&self.next).unwrap_or_default() {
                let r = Self::write(&mut self.sinks, lines);
                self.record(r);
            }
        }
    }
}

/// What a finished `run` produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub metrics: PathBuf,
    pub scores: PathBuf,
    pub rows: usize,
}

fn threads() -> usize {
    std::env::var("DSAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

/// Runs every (policy, seed) curve plus the full-annotation references.
///
/// Rows reach `metrics.csv` in canonical order (policies in config order,
/// seeds in config order, rounds ascending, then `full` rows) and are
/// flushed as soon as they are final, so a failure keeps all earlier rows.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput, CliError> {
    config.validate()?;
    let env = load_environment(config)?;
    let out = &config.output_dir;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let dir_to_create = if config.experiment.save_checkpoints { &ckpt_dir } else { out };
    std::fs::create_dir_all(dir_to_create).map_err(CliError::io(dir_to_create.display()))?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, config.canonical()).map_err(CliError::io(config_path.display()))?;

    let metrics_path = out.join(METRICS_FILE);
    let scores_path = out.join(SCORES_FILE);
    let comment = format!("config_hash={}", config.hash());
    let sinks = Sinks {
        metrics: CsvSink::create(&metrics_path, Some(&comment), &METRICS_HEADER)?,
        scores: CsvSink::create(&scores_path, Some(&comment), &SCORES_HEADER)?,
    };
    let e = &config.experiment;
    let mut jobs: Vec<Job> = e
        .policies
        .iter()
        .flat_map(|&p| e.seeds.iter().map(move |&s| Job::Policy(p, s)))
        .collect();
    if e.full_reference_epochs > 0 {
        jobs.extend(e.seeds.iter().map(|&s| Job::Full(s)));
    }
    let sink = Mutex::new(OrderedSink {
        next: 0,
        finished: BTreeSet::new(),
        pending: BTreeMap::new(),
        sinks,
        error: None,
    });
    let rows = Mutex::new(0usize);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads())
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;

    let results: Vec<Result<(), CliError>> = pool.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(i, &job)| {
                let emit = |lines: Lines| {
                    *rows.lock().expect("row counter") += 1;
                    sink.lock().expect("sink").emit(i, lines);
                };
                let result = run_job(config, &env, &ckpt_dir, job, emit);
                if let Err(err) = &result {
                    log::error!("{job:?} failed: {err}");
                }
                sink.lock().expect("sink").finish(i);
                result
            })
            .collect()
    });
    let sink = sink.into_inner().expect("sink");
    if let Some(e) = results.into_iter().find_map(Result::err) {
        return Err(e);
    }
    if let Some(e) = sink.error {
        return Err(e);
    }
    Ok(RunOutput {
        metrics: metrics_path,
        scores: scores_path,
        rows: rows.into_inner().expect("row counter"),
    })
}

fn checkpoint_err(e: dsal_core::segnet::ModelError) -> ActiveError {
    ActiveError::Sink(format!("checkpoint: {e}"))
}

fn run_job(
    config: &ExperimentConfig,
    env: &Environment,
    ckpt_dir: &Path,
    job: Job,
    mut emit: impl FnMut(Lines),
) -> Result<(), CliError> {
    let protocol = config.protocol();
    let save = config.experiment.save_checkpoints;
    match job {
        Job::Policy(kind, seed) => {
            log::info!("running {kind} seed {seed}");
            let policy = config.policy(kind);
            run_policy(env, &protocol, &policy, seed, |m, model| {
                if save {
                    let path = ckpt_dir.join(format!("{kind}_seed{seed}_round{}.ckpt", m.round));
                    save_checkpoint(model, m.round as u32, &path).map_err(checkpoint_err)?;
                }
                let row = MetricsRow {
                    policy: kind.to_string(),
                    seed,
                    round: m.round,
                    labels_used: m.labels_used,
                    test_dsc: m.test_dsc,
                    val_dsc: m.val_dsc,
                    mean_pool_score: m.mean_pool_score(),
                    spearman: m.score_rdsc_correlation(),
                };
                log::info!(
                    "{kind} seed {seed} round {}: {} labels, test DSC {:.4}",
                    m.round,
                    m.labels_used,
                    m.test_dsc
                );
                let scores = m
                    .scores
                    .iter()
                    .map(|s| {
                        ScoreRow {
                            policy: kind.to_string(),
                            seed,
                            round: m.round,
                            sample_id: s.sample_id.clone(),
                            l_dsc: s.l_dsc,
                            m_dsc: s.m_dsc,
                            mean_score: s.mean_score,
                            r_dsc: s.r_dsc,
                        }
                        .fields()
                        .to_vec()
                    })
                    .collect();
                emit(Lines {
                    metrics: row.fields().to_vec(),
                    scores,
                });
                Ok(())
            })?;
        }
        Job::Full(seed) => {
            log::info!("training full-annotation reference, seed {seed}");
            let full = train_full_reference(env, &protocol, seed, config.experiment.full_reference_epochs)?;
            if save {
                let path = ckpt_dir.join(format!("{FULL_POLICY}_seed{seed}.ckpt"));
                save_checkpoint(&full.model, 0, &path).map_err(|e| CliError::from(checkpoint_err(e)))?;
            }
            let row = MetricsRow {
                policy: FULL_POLICY.into(),
                seed,
                round: 0,
                labels_used: full.labels_used,
                test_dsc: full.test_dsc,
                val_dsc: full.val_dsc,
                mean_pool_score: None,
                spearman: None,
            };
            emit(Lines {
                metrics: row.fields().to_vec(),
                scores: Vec::new(),
            });
        }
    }
    Ok(())
}
