//! Helpers shared by the integration tests: independent numerical oracles,
//! a simulated model for recording transcripts, and a driver for the full
//! run → analyze → emit pipeline.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use epibench_core::analysis::{analyze_records, View};
use epibench_core::backend::{
    ApproxTokenCounter, Backend, BackendError, BackendRequest, BackendResponse, MockBackend,
    RetryPolicy, TokenCounter, UsageSource,
};
use epibench_core::dataset::{self, DatasetKind, Quota};
use epibench_core::grading::Answer;
use epibench_core::report::{emit, ReportFormat};
use epibench_core::runner::{run, DatasetSource, RunError, RunOutcome, RunPlan};
use epibench_core::technique::TechniqueSpec;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + i as f64 * h);
    }
    sum * h / 3.0
}

/// Two-tailed normal p-value by integrating the density from 0 to |z|.
pub fn normal_p_oracle(z: f64) -> f64 {
    let z = z.abs();
    if z > 9.0 {
        return 0.0;
    }
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    (1.0 - 2.0 * simpson(phi, 0.0, z, 20_000)).max(0.0)
}

/// Two-tailed Student t p-value. Substituting `t = sqrt(df) tan(theta)`
/// turns the density into `cos^(df-1)(theta)` on `(-pi/2, pi/2)`.
pub fn t_p_oracle(t: f64, df: f64) -> f64 {
    let g = |th: f64| th.cos().powf(df - 1.0);
    let theta = (t.abs() / df.sqrt()).atan();
    let n = 40_000;
    simpson(g, theta, PI / 2.0, n) / simpson(g, 0.0, PI / 2.0, n)
}

/// Stable 32-bit value from a request digest.
fn digest_bits(req: &BackendRequest) -> u32 {
    u32::from_str_radix(&req.key()[..8], 16).unwrap()
}

/// A deterministic stand-in for a model: answers correctly with a
/// model-specific probability, otherwise picks a wrong option or rambles.
/// Every response is a pure function of the request.
pub fn simulated_model() -> MockBackend {
    let mut known = Vec::new();
    for kind in DatasetKind::ALL {
        let path = fixtures().join(format!("{}.jsonl", kind.as_str()));
        for q in dataset::load(path, kind).unwrap() {
            let letters: Vec<char> = q
                .choices
                .iter()
                .flatten()
                .filter_map(|c| c.letter.chars().next())
                .collect();
            known.push((q.prompt_text(), kind, q.gold.clone(), letters));
        }
    }
    MockBackend::from_fn("simulated", move |req| {
        let (_, kind, gold, letters) = known
            .iter()
            .filter(|(text, ..)| req.prompt.contains(text.as_str()))
            .max_by_key(|(text, ..)| text.len())
            .ok_or_else(|| BackendError::Rejected {
                status: 400,
                body: "unknown question".into(),
            })?;
        let h = digest_bits(req);
        let skill = if req.model.ends_with('a') { 80 } else { 62 };
        let answer = if h.is_multiple_of(23) {
            None
        } else if h % 100 < skill {
            gold.token()
        } else {
            match gold {
                Answer::Choice(g) => {
                    let wrong: Vec<&char> = letters.iter().filter(|l| *l != g).collect();
                    Some(wrong[(h as usize / 7) % wrong.len()].to_string())
                }
                Answer::Number(d) => Some(format!("{}1", d.as_str())),
                Answer::NoAnswer => None,
            }
        };
        let text = match (answer, kind) {
            (None, _) => "I am unable to settle on a single answer here.".to_owned(),
            (Some(a), DatasetKind::Gsm8k) => {
                format!("Working through it step by step.\nThe answer is {a}")
            }
            (Some(a), DatasetKind::Mmlu) => {
                format!("Considering each option.\nFinal Answer = (({a}))")
            }
            (Some(a), _) => format!("Considering each option.\nFinal Answer = ({a})"),
        };
        Ok(BackendResponse {
            input_tokens: ApproxTokenCounter.count(&req.prompt),
            output_tokens: 20 + u64::from(h % 180),
            text,
            usage_source: UsageSource::Reported,
            latency_ms: 0,
        })
    })
}

/// Every built-in technique over the 40-question fixture (10 per dataset)
/// and two models.
pub fn fixture_plan(out: &Path) -> RunPlan {
    let datasets = DatasetKind::ALL
        .iter()
        .map(|&kind| DatasetSource {
            kind,
            path: fixtures().join(format!("{}.jsonl", kind.as_str())),
            quota: Quota::All,
        })
        .collect();
    let mut plan = RunPlan::new(
        TechniqueSpec::all_builtin(),
        datasets,
        vec!["model-a".into(), "model-b".into()],
        out,
    );
    plan.seed = 11;
    plan.parallelism = 4;
    plan.retry = RetryPolicy::immediate(1);
    plan.failure_threshold = 0.0;
    plan
}

/// Records the simulated model's answers to the fixture plan and returns
/// the transcript file.
pub fn record_transcripts(dir: &Path) -> PathBuf {
    let plan = fixture_plan(&dir.join("recording"));
    run(&plan, simulated_model()).unwrap();
    plan.transcripts_path()
}

/// Runs `plan` and writes the full model-agnostic report under
/// `<out>/report`.
pub fn run_and_report<B: Backend>(plan: &RunPlan, backend: B) -> Result<RunOutcome, RunError> {
    let outcome = run(plan, backend)?;
    let report = analyze_records(&outcome.records, View::ModelAgnostic, &[]).unwrap();
    emit(&report, ReportFormat::Full, plan.out_dir.join("report")).unwrap();
    Ok(outcome)
}

/// Every file under `dir`, relative path → bytes, in path order.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push((
                    p.strip_prefix(base).unwrap().to_owned(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

/// Delegates to `inner` for the first `budget` calls, then fails as if the
/// credentials were revoked, which aborts a run.
pub struct CutOff<B> {
    pub inner: B,
    pub budget: usize,
    pub calls: std::sync::atomic::AtomicUsize,
}

impl<B> CutOff<B> {
    pub fn new(inner: B, budget: usize) -> Self {
        Self {
            inner,
            budget,
            calls: Default::default(),
        }
    }
}

impl<B: Backend> Backend for CutOff<B> {
    fn name(&self) -> &str {
        "cut-off"
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let n = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        if n >= self.budget {
            return Err(BackendError::Auth("interrupted".into()));
        }
        self.inner.complete(request)
    }
}

/// Counts calls to the inner backend.
pub struct Counting<B> {
    pub inner: B,
    pub calls: std::sync::atomic::AtomicUsize,
}

impl<B> Counting<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: Default::default(),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for Counting<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.complete(request)
    }
}
