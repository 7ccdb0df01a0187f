//! Evaluation runs: plan files, parallel fan-out over a backend, grading and
//! persistence of records.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::backend::{
    complete_with_retry, Backend, BackendError, BackendRequest, BackendResponse, CachedBackend,
    Limited, RetryPolicy, TranscriptStore,
};
use crate::dataset::{self, DatasetError, DatasetKind, Question, Quota};
use crate::grading::{CellKey, EvalRecord};
use crate::technique::{self, render, TechniqueError, TechniqueSpec};

pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("plan line {line}: {message}")]
    Plan { line: usize, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Technique(#[from] TechniqueError),
    #[error("run aborted: {0}")]
    Backend(#[from] BackendError),
    #[error("cell {cell}: {failed} of {total} queries failed, above the {threshold} limit")]
    FailureRate {
        cell: String,
        failed: usize,
        total: usize,
        threshold: f64,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    pub path: PathBuf,
    pub quota: Quota,
}

/// The experimental matrix: techniques × datasets × models.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub techniques: Vec<TechniqueSpec>,
    pub datasets: Vec<DatasetSource>,
    pub models: Vec<String>,
    pub seed: u64,
    pub parallelism: usize,
    pub out_dir: PathBuf,
    pub max_output_tokens: u32,
    /// Largest tolerated fraction of failed queries per cell.
    pub failure_threshold: f64,
    pub retry: RetryPolicy,
}

impl RunPlan {
    pub fn new(
        techniques: Vec<TechniqueSpec>,
        datasets: Vec<DatasetSource>,
        models: Vec<String>,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            techniques,
            datasets,
            models,
            seed: 0,
            parallelism: 4,
            out_dir: out_dir.into(),
            max_output_tokens: 1024,
            failure_threshold: 0.05,
            retry: RetryPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let empty = |what: &str| Err(RunError::Config(format!("plan names no {what}")));
        if self.techniques.is_empty() {
            return empty("techniques");
        }
        if self.datasets.is_empty() {
            return empty("datasets");
        }
        if self.models.is_empty() {
            return empty("models");
        }
        if self.parallelism == 0 {
            return Err(RunError::Config("parallelism must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return Err(RunError::Config(
                "failure_threshold must lie in [0, 1]".into(),
            ));
        }
        let mut ids: Vec<&str> = self.techniques.iter().map(TechniqueSpec::id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(RunError::Config(format!(
                "technique {:?} listed twice",
                w[0]
            )));
        }
        Ok(())
    }

    /// Parses a plan file. Relative paths resolve against `base`.
    ///
    /// ```text
    /// # comment
    /// seed 7
    /// parallelism 4
    /// out results
    /// templates extra_templates.txt
    /// techniques cot self_consistency my_custom
    /// dataset csqa data/csqa.jsonl sample=default
    /// dataset gsm8k data/gsm8k.jsonl sample=40
    /// model gpt-4o-mini
    /// max_output_tokens 1024
    /// failure_threshold 0.05
    /// ```
    ///
    /// `techniques all` selects the six built-ins. `sample=` takes `default`
    /// (the standard quota for the dataset), `all`, `N` or `per_subject=N`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, RunError> {
        let mut ids: Vec<(usize, String)> = Vec::new();
        let mut custom: Vec<TechniqueSpec> = Vec::new();
        let mut plan = RunPlan::new(Vec::new(), Vec::new(), Vec::new(), base.join("out"));
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_owned()
            } else {
                base.join(p)
            }
        };

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let bad = |message: String| RunError::Plan { line, message };
            let mut words = content.split_whitespace();
            let key = words.next().unwrap();
            let args: Vec<&str> = words.collect();
            let one = || match args.as_slice() {
                [v] => Ok(*v),
                _ => Err(bad(format!("`{key}` takes exactly one value"))),
            };
            fn num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T, RunError> {
                v.parse().map_err(|_| RunError::Plan {
                    line,
                    message: format!("not a valid number: {v:?}"),
                })
            }
            match key {
                "seed" => plan.seed = num(one()?, line)?,
                "parallelism" => plan.parallelism = num(one()?, line)?,
                "max_output_tokens" => plan.max_output_tokens = num(one()?, line)?,
                "failure_threshold" => plan.failure_threshold = num(one()?, line)?,
                "out" => plan.out_dir = resolve(one()?),
                "model" => plan.models.push(one()?.to_owned()),
                "templates" => custom.extend(technique::load_templates(resolve(one()?))?),
                "techniques" => {
                    if args.is_empty() {
                        return Err(bad("`techniques` needs at least one id".into()));
                    }
                    for a in &args {
                        if *a == "all" {
                            ids.extend(
                                technique::BUILTIN_IDS.iter().map(|b| (line, b.to_string())),
                            );
                        } else {
                            ids.push((line, a.to_string()));
                        }
                    }
                }
                "dataset" => {
                    let (kind, path, quota) = match args.as_slice() {
                        [k, p] => (k, p, None),
                        [k, p, q] => (k, p, Some(q)),
                        _ => return Err(bad("usage: dataset <kind> <path> [sample=...]".into())),
                    };
                    let kind: DatasetKind = kind.parse()?;
                    let quota = match quota.map(|q| q.strip_prefix("sample=").unwrap_or(q)) {
                        None | Some("default") => kind.default_quota(),
                        Some("all") => Quota::All,
                        Some(q) => match q.strip_prefix("per_subject=") {
                            Some(n) => Quota::PerSubject(num(n, line)?),
                            None => Quota::Uniform(num(q, line)?),
                        },
                    };
                    plan.datasets.push(DatasetSource {
                        kind,
                        path: resolve(path),
                        quota,
                    });
                }
                other => return Err(bad(format!("unknown directive {other:?}"))),
            }
        }

        for (line, id) in ids {
            let spec = custom
                .iter()
                .find(|s| s.id() == id)
                .cloned()
                .or_else(|| TechniqueSpec::builtin(&id))
                .ok_or_else(|| RunError::Plan {
                    line,
                    message: format!("unknown technique {id:?}"),
                })?;
            plan.techniques.push(spec);
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn transcripts_path(&self) -> PathBuf {
        self.out_dir.join(TRANSCRIPTS_FILE)
    }

    pub fn records_path(&self) -> PathBuf {
        self.out_dir.join(RECORDS_FILE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<EvalRecord>,
    /// Distinct backend requests in the plan.
    pub requests: usize,
    /// Requests that were not already in the transcript store.
    pub fresh_requests: usize,
    /// Excluded queries per cell, for cells with any.
    pub failures: BTreeMap<CellKey, usize>,
}

impl RunOutcome {
    pub fn failed_queries(&self) -> usize {
        self.failures.values().sum()
    }
}

struct Query {
    cell: CellKey,
    question: Question,
    aggregation: technique::Aggregation,
    /// Indices into the deduplicated request list, one per sample.
    requests: Vec<usize>,
}

fn fatal(e: &BackendError) -> bool {
    matches!(
        e,
        BackendError::Auth(_)
            | BackendError::Config(_)
            | BackendError::Storage(_)
            | BackendError::Collision { .. }
    )
}

/// Executes `plan` against `backend`, caching every completion in the
/// output directory's transcript store.
///
/// Requests already in the store are not sent again, so an interrupted run
/// resumes where it stopped. Failed queries are excluded from their cell; a
/// cell whose failure fraction exceeds the plan's threshold aborts the run
/// after the transcripts are saved. On success the transcript file is
/// rewritten in key order and records are written in plan order, so the
/// output bytes do not depend on scheduling.
pub fn run<B: Backend>(plan: &RunPlan, backend: B) -> Result<RunOutcome, RunError> {
    plan.validate()?;
    fs::create_dir_all(&plan.out_dir).map_err(|e| io_err(&plan.out_dir, e))?;

    let mut requests: Vec<BackendRequest> = Vec::new();
    let mut by_key: HashMap<String, usize> = HashMap::new();
    let mut queries: Vec<Query> = Vec::new();
    for source in &plan.datasets {
        let all = dataset::load(&source.path, source.kind)?;
        let picked = dataset::sample_with(&all, source.quota, plan.seed)?;
        log::info!(
            "{}: {} of {} questions",
            source.kind,
            picked.len(),
            all.len()
        );
        for spec in &plan.techniques {
            for model in &plan.models {
                for q in &picked {
                    let prompts = render(spec, &q.id, &q.prompt_text(), source.kind)?;
                    let idx = prompts
                        .into_iter()
                        .map(|p| {
                            let req = BackendRequest {
                                model: model.clone(),
                                prompt: p.text,
                                temperature: spec.temperature(),
                                max_output_tokens: plan.max_output_tokens,
                                sample_index: p.sample_index,
                            };
                            *by_key.entry(req.key()).or_insert_with(|| {
                                requests.push(req);
                                requests.len() - 1
                            })
                        })
                        .collect();
                    queries.push(Query {
                        cell: CellKey {
                            technique: spec.id().to_owned(),
                            dataset: source.kind,
                            model: model.clone(),
                        },
                        question: q.clone(),
                        aggregation: spec.aggregation(),
                        requests: idx,
                    });
                }
            }
        }
    }

    let store = Arc::new(TranscriptStore::open(plan.transcripts_path())?);
    let fresh_requests = requests
        .iter()
        .filter(|r| store.get(&r.key()).is_none())
        .count();
    log::info!(
        "{} requests, {} not yet cached, parallelism {}",
        requests.len(),
        fresh_requests,
        plan.parallelism
    );
    let client = CachedBackend::new(Limited::new(backend, plan.parallelism), Arc::clone(&store));
    let responses = fan_out(&client, &requests, plan)?;

    let mut records = Vec::with_capacity(queries.len());
    let mut failures: BTreeMap<CellKey, usize> = BTreeMap::new();
    let mut totals: BTreeMap<CellKey, usize> = BTreeMap::new();
    for q in queries {
        *totals.entry(q.cell.clone()).or_default() += 1;
        let got: Option<Vec<(String, u64, u64, crate::backend::UsageSource)>> = q
            .requests
            .iter()
            .map(|&i| {
                responses[i].as_ref().ok().map(|r| {
                    (
                        r.text.clone(),
                        r.input_tokens,
                        r.output_tokens,
                        r.usage_source,
                    )
                })
            })
            .collect();
        match got {
            Some(samples) => records.push(EvalRecord::grade(
                q.question.id,
                q.cell.technique,
                q.cell.model,
                q.cell.dataset,
                q.aggregation,
                samples,
                q.question.gold,
            )),
            None => *failures.entry(q.cell).or_default() += 1,
        }
    }

    store.compact()?;
    for (cell, failed) in &failures {
        let total = totals[cell];
        log::warn!("{cell}: {failed} of {total} queries failed and are excluded");
        if *failed as f64 / total as f64 > plan.failure_threshold {
            return Err(RunError::FailureRate {
                cell: cell.to_string(),
                failed: *failed,
                total,
                threshold: plan.failure_threshold,
            });
        }
    }
    write_records(plan.records_path(), &records)?;
    Ok(RunOutcome {
        records,
        requests: requests.len(),
        fresh_requests,
        failures,
    })
}

/// Sends every request on `plan.parallelism` worker threads. Per-request
/// failures are returned in place; a fatal error stops all workers.
fn fan_out<B: Backend>(
    client: &B,
    requests: &[BackendRequest],
    plan: &RunPlan,
) -> Result<Vec<Result<BackendResponse, BackendError>>, RunError> {
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let abort: Mutex<Option<BackendError>> = Mutex::new(None);
    let slots: Vec<Mutex<Option<Result<BackendResponse, BackendError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    let workers = plan.parallelism.min(requests.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = requests.get(i) else { break };
                let out = complete_with_retry(client, req, &plan.retry);
                match out {
                    Err(e) if fatal(&e) => {
                        stop.store(true, Ordering::Relaxed);
                        abort.lock().unwrap().get_or_insert(e);
                    }
                    Err(e) => {
                        log::warn!("request {}: {e}", &req.key()[..12]);
                        *slots[i].lock().unwrap() = Some(Err(e));
                    }
                    Ok(r) => *slots[i].lock().unwrap() = Some(Ok(r)),
                }
            });
        }
    });
    if let Some(e) = abort.into_inner().unwrap() {
        return Err(e.into());
    }
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every request is attempted"))
        .collect())
}

pub fn write_records(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<(), RunError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>, RunError> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| io_err(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
