//! Aggregation of per-cell summaries, index analysis per group, significance
//! flags and cost projections.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetKind;
use crate::epi::{
    crossover_c, rank_by_epi, relative_delta, ConcernLabel, CostConcern, Crossover, EpiCurve,
    EpiError, TechniqueSummary,
};
use crate::grading::{summarize_all, CellKey, CellSummary, EvalRecord, GradeError, UsageMix};
use crate::scalar::Scalar;
use crate::stats::{
    all_models_significant, paired_differences, paired_t, top_two, two_proportion_z, StatsError,
    TestResult,
};
use crate::technique::BUILTIN_IDS;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("grid is missing cells: {}", .0.join(", "))]
    MissingCells(Vec<String>),
    #[error("nothing to analyze")]
    Empty,
    #[error("cost scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Epi(#[from] EpiError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Grade(#[from] GradeError),
}

/// Per-cell summaries keyed by (technique, dataset, model).
pub type Grid<S> = BTreeMap<CellKey, TechniqueSummary<S>>;

/// Summaries per group (a model or a dataset), then per technique.
pub type Table<S> = BTreeMap<String, BTreeMap<String, TechniqueSummary<S>>>;

pub fn grid_from_cells(cells: &[CellSummary]) -> Grid<f64> {
    cells.iter().map(|c| (c.key.clone(), c.summary)).collect()
}

/// Sort key putting the built-in techniques in report order, then custom ids
/// alphabetically.
pub fn technique_rank(id: &str) -> (usize, &str) {
    match BUILTIN_IDS.iter().position(|b| *b == id) {
        Some(i) => (i, ""),
        None => (BUILTIN_IDS.len(), id),
    }
}

fn axes<S>(grid: &Grid<S>) -> (BTreeSet<String>, BTreeSet<DatasetKind>, BTreeSet<String>) {
    let mut t = BTreeSet::new();
    let mut d = BTreeSet::new();
    let mut m = BTreeSet::new();
    for k in grid.keys() {
        t.insert(k.technique.clone());
        d.insert(k.dataset);
        m.insert(k.model.clone());
    }
    (t, d, m)
}

fn check_complete<S>(grid: &Grid<S>) -> Result<(), AnalysisError> {
    if grid.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let (ts, ds, ms) = axes(grid);
    let mut missing = Vec::new();
    for t in &ts {
        for &d in &ds {
            for m in &ms {
                let k = CellKey {
                    technique: t.clone(),
                    dataset: d,
                    model: m.clone(),
                };
                if !grid.contains_key(&k) {
                    missing.push(k.to_string());
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(AnalysisError::MissingCells(missing))
    }
}

/// Unweighted mean of accuracy and of token count; `n` is the total.
fn mean_summary<S: Scalar>(cells: &[TechniqueSummary<S>]) -> Result<TechniqueSummary<S>, EpiError> {
    let k = S::from_count(cells.len());
    let a = cells.iter().fold(S::zero(), |acc, s| acc + s.accuracy()) / k;
    let t = cells.iter().fold(S::zero(), |acc, s| acc + s.mean_tokens()) / k;
    let n = cells.iter().map(TechniqueSummary::n).sum();
    // rounding can nudge a mean of ones past 1
    TechniqueSummary::new(a.min(S::one()), t, n)
}

fn aggregate_by<S: Scalar>(
    grid: &Grid<S>,
    group_of: impl Fn(&CellKey) -> String,
) -> Result<Table<S>, AnalysisError> {
    check_complete(grid)?;
    let mut buckets: BTreeMap<String, BTreeMap<String, Vec<TechniqueSummary<S>>>> = BTreeMap::new();
    for (k, s) in grid {
        buckets
            .entry(group_of(k))
            .or_default()
            .entry(k.technique.clone())
            .or_default()
            .push(*s);
    }
    let mut out = Table::new();
    for (g, techs) in buckets {
        let row = techs
            .into_iter()
            .map(|(t, cells)| mean_summary(&cells).map(|s| (t, s)))
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        out.insert(g, row);
    }
    Ok(out)
}

/// Per model, averaged across datasets.
pub fn aggregate_model_specific<S: Scalar>(grid: &Grid<S>) -> Result<Table<S>, AnalysisError> {
    aggregate_by(grid, |k| k.model.clone())
}

/// Per dataset, averaged across models.
pub fn aggregate_model_agnostic<S: Scalar>(grid: &Grid<S>) -> Result<Table<S>, AnalysisError> {
    aggregate_by(grid, |k| k.dataset.as_str().to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    /// Groups are datasets; cells averaged across models.
    ModelAgnostic,
    /// Groups are models; cells averaged across datasets.
    ModelSpecific,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::ModelAgnostic => "model_agnostic",
            View::ModelSpecific => "model_specific",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiPoint<S> {
    pub concern: ConcernLabel,
    pub c: S,
    pub epi: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechniqueRow<S> {
    pub technique: String,
    pub accuracy: S,
    pub mean_tokens: S,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<UsageMix>,
    pub epi: Vec<EpiPoint<S>>,
    pub slope: S,
}

/// Techniques ordered best first by index at one concern level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking<S> {
    pub concern: ConcernLabel,
    pub c: S,
    pub order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverRow<S> {
    pub first: String,
    pub second: String,
    pub crossover: Crossover<S>,
    /// The crossing lies within the span of the fixed concern levels.
    pub highlighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTest {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<TestResult<f64>>,
    /// Why no result was produced, e.g. zero variance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// A test between two techniques run on every model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub first: String,
    pub second: String,
    /// The pair was decided by the lexicographic tie-break.
    pub tie_broken: bool,
    pub per_model: Vec<ModelTest>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    /// z-test between the two most accurate techniques.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<PairTest>,
    /// Paired t-test between the two most expensive techniques.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<PairTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAnalysis<S> {
    pub group: String,
    pub techniques: Vec<TechniqueRow<S>>,
    pub rankings: Vec<Ranking<S>>,
    pub crossovers: Vec<CrossoverRow<S>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<Significance>,
}

impl<S> GroupAnalysis<S> {
    pub fn row(&self, technique: &str) -> Option<&TechniqueRow<S>> {
        self.techniques.iter().find(|r| r.technique == technique)
    }

    pub fn accuracy_star(&self, technique: &str) -> bool {
        self.significance
            .as_ref()
            .and_then(|s| s.accuracy.as_ref())
            .is_some_and(|p| p.significant && p.first == technique)
    }

    pub fn cost_star(&self, technique: &str) -> bool {
        self.significance
            .as_ref()
            .and_then(|s| s.cost.as_ref())
            .is_some_and(|p| p.significant && p.first == technique)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport<S> {
    pub view: View,
    pub groups: Vec<GroupAnalysis<S>>,
}

/// Computes index curves, slopes and pairwise crossovers for every group.
///
/// Slopes are always taken over the five fixed levels; `extra` adds custom
/// weights to the tabulated curve points.
pub fn analyze<S: Scalar>(
    view: View,
    table: &Table<S>,
    extra: &[CostConcern<S>],
) -> Result<AnalysisReport<S>, AnalysisError> {
    if table.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let fixed = CostConcern::<S>::canonical();
    let mut concerns: Vec<CostConcern<S>> = fixed.to_vec();
    concerns.extend_from_slice(extra);

    let mut groups = Vec::with_capacity(table.len());
    for (group, techs) in table {
        let mut ids: Vec<&String> = techs.keys().collect();
        ids.sort_by_key(|id| technique_rank(id));

        let mut rows = Vec::with_capacity(ids.len());
        for id in &ids {
            let s = &techs[*id];
            let curve = EpiCurve::new(id.as_str(), s, &concerns)?;
            let slope = EpiCurve::new(id.as_str(), s, &fixed)?.slope;
            rows.push(TechniqueRow {
                technique: (*id).clone(),
                accuracy: s.accuracy(),
                mean_tokens: s.mean_tokens(),
                n: s.n(),
                usage: None,
                epi: curve
                    .points
                    .into_iter()
                    .map(|(k, epi)| EpiPoint {
                        concern: k.label(),
                        c: k.c(),
                        epi,
                    })
                    .collect(),
                slope,
            });
        }

        let entries: Vec<(&str, TechniqueSummary<S>)> =
            ids.iter().map(|id| (id.as_str(), techs[*id])).collect();
        let mut sorted_concerns = concerns.clone();
        sorted_concerns.sort_by(|a, b| {
            a.c()
                .partial_cmp(&b.c())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let rankings = sorted_concerns
            .iter()
            .map(|k| {
                rank_by_epi(&entries, k.c()).map(|r| Ranking {
                    concern: k.label(),
                    c: k.c(),
                    order: r.into_iter().map(|x| x.technique).collect(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let span = fixed[fixed.len() - 1].c();
        let mut crossovers = Vec::new();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                let (sa, sb) = (&techs[*a], &techs[*b]);
                let crossover = if sa.accuracy() == S::zero() || sb.accuracy() == S::zero() {
                    Crossover::Never
                } else {
                    crossover_c(sa, sb)?
                };
                let highlighted = crossover.value().is_some_and(|c| c <= span);
                crossovers.push(CrossoverRow {
                    first: (*a).clone(),
                    second: (*b).clone(),
                    crossover,
                    highlighted,
                });
            }
        }
        groups.push(GroupAnalysis {
            group: group.clone(),
            techniques: rows,
            rankings,
            crossovers,
            significance: None,
        });
    }
    if view == View::ModelAgnostic {
        groups.sort_by_key(|g| {
            let pos = DatasetKind::ALL.iter().position(|k| k.as_str() == g.group);
            (pos.unwrap_or(DatasetKind::ALL.len()), g.group.clone())
        });
    }
    Ok(AnalysisReport { view, groups })
}

impl AnalysisReport<f64> {
    /// Attaches token-provenance flags from the underlying cells. A group row
    /// is `mixed` when its cells disagree.
    pub fn attach_usage(&mut self, cells: &[CellSummary]) {
        for g in &mut self.groups {
            for row in &mut g.techniques {
                let mut mixes = cells
                    .iter()
                    .filter(|c| c.key.technique == row.technique)
                    .filter(|c| match self.view {
                        View::ModelAgnostic => c.key.dataset.as_str() == g.group,
                        View::ModelSpecific => c.key.model == g.group,
                    })
                    .map(|c| c.usage);
                row.usage = mixes.next().map(|first| {
                    if mixes.all(|m| m == first) {
                        first
                    } else {
                        UsageMix::Mixed
                    }
                });
            }
        }
    }

    /// Runs the significance protocol per dataset group of a model-agnostic
    /// report, using the per-question records behind it.
    pub fn attach_significance(&mut self, records: &[EvalRecord]) {
        if self.view != View::ModelAgnostic {
            return;
        }
        let mut by_cell: HashMap<CellKey, Vec<&EvalRecord>> = HashMap::new();
        for r in records {
            by_cell.entry(r.cell()).or_default().push(r);
        }
        for g in &mut self.groups {
            let Ok(dataset) = g.group.parse::<DatasetKind>() else {
                continue;
            };
            let models: BTreeSet<&str> = records
                .iter()
                .filter(|r| r.dataset == dataset)
                .map(|r| r.model.as_str())
                .collect();
            if models.is_empty() {
                continue;
            }
            let cell = |technique: &str, model: &str| {
                by_cell
                    .get(&CellKey {
                        technique: technique.to_owned(),
                        dataset,
                        model: model.to_owned(),
                    })
                    .map(Vec::as_slice)
                    .unwrap_or(&[])
            };

            let by_acc: Vec<(String, f64)> = g
                .techniques
                .iter()
                .map(|r| (r.technique.clone(), r.accuracy))
                .collect();
            let accuracy = top_two(&by_acc).map(|(first, second, tie_broken)| {
                let per_model: Vec<ModelTest> = models
                    .iter()
                    .map(|m| {
                        let (a, b) = (cell(&first, m), cell(&second, m));
                        let count =
                            |rs: &[&EvalRecord]| rs.iter().filter(|r| r.correct).count() as u64;
                        model_test(
                            m,
                            two_proportion_z(count(a), a.len() as u64, count(b), b.len() as u64),
                        )
                    })
                    .collect();
                pair_test(first, second, tie_broken, per_model)
            });

            let by_cost: Vec<(String, f64)> = g
                .techniques
                .iter()
                .map(|r| (r.technique.clone(), r.mean_tokens))
                .collect();
            let cost = top_two(&by_cost).map(|(first, second, tie_broken)| {
                let per_model: Vec<ModelTest> = models
                    .iter()
                    .map(|m| {
                        let tokens = |rs: &[&EvalRecord]| -> BTreeMap<String, f64> {
                            rs.iter()
                                .map(|r| (r.question_id.clone(), r.total_tokens as f64))
                                .collect()
                        };
                        let result =
                            paired_differences(&tokens(cell(&first, m)), &tokens(cell(&second, m)))
                                .and_then(|d| paired_t(&d));
                        model_test(m, result)
                    })
                    .collect();
                pair_test(first, second, tie_broken, per_model)
            });
            g.significance = Some(Significance { accuracy, cost });
        }
    }
}

/// Summaries, aggregation and analysis straight from graded records, with
/// usage flags and, for the model-agnostic view, significance attached.
pub fn analyze_records(
    records: &[EvalRecord],
    view: View,
    extra: &[CostConcern<f64>],
) -> Result<AnalysisReport<f64>, AnalysisError> {
    let cells = summarize_all(records)?;
    let mut report = analyze_cells(&cells, view, extra)?;
    report.attach_significance(records);
    Ok(report)
}

/// Like [`analyze_records`] but from cell summaries alone, so without
/// significance tests.
pub fn analyze_cells(
    cells: &[CellSummary],
    view: View,
    extra: &[CostConcern<f64>],
) -> Result<AnalysisReport<f64>, AnalysisError> {
    let grid = grid_from_cells(cells);
    let table = match view {
        View::ModelAgnostic => aggregate_model_agnostic(&grid)?,
        View::ModelSpecific => aggregate_model_specific(&grid)?,
    };
    let mut report = analyze(view, &table, extra)?;
    report.attach_usage(cells);
    Ok(report)
}

fn model_test(model: &str, result: Result<TestResult<f64>, StatsError>) -> ModelTest {
    match result {
        Ok(r) => ModelTest {
            model: model.to_owned(),
            result: Some(r),
            note: None,
        },
        Err(e) => ModelTest {
            model: model.to_owned(),
            result: None,
            note: Some(e.to_string()),
        },
    }
}

fn pair_test(
    first: String,
    second: String,
    tie_broken: bool,
    per_model: Vec<ModelTest>,
) -> PairTest {
    let results: Vec<TestResult<f64>> = per_model.iter().filter_map(|m| m.result).collect();
    // a model without a usable test counts as not significant
    let significant =
        results.len() == per_model.len() && all_models_significant(&results).unwrap_or(false);
    PairTest {
        first,
        second,
        tie_broken,
        per_model,
        significant,
    }
}

/// Inputs for a spend projection when switching from `baseline` to
/// `candidate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostScenario<S> {
    /// Currency per one million tokens.
    pub price_per_million: S,
    /// Queries per day.
    pub volume: S,
    pub days: S,
    pub baseline: TechniqueSummary<S>,
    pub candidate: TechniqueSummary<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostProjection<S> {
    /// Candidate tokens relative to baseline, percent (negative = fewer).
    pub token_delta_pct: S,
    /// Candidate accuracy relative to baseline, percent.
    pub accuracy_delta_pct: S,
    /// Candidate minus baseline accuracy, absolute.
    pub accuracy_delta: S,
    pub baseline_daily_spend: S,
    pub candidate_daily_spend: S,
    pub baseline_horizon_spend: S,
    pub candidate_horizon_spend: S,
    /// Baseline minus candidate spend over the horizon.
    pub savings: S,
    pub crossover: Crossover<S>,
}

/// Spend is `price * volume * tokens / 1e6` per day, times `days`.
pub fn project_costs<S: Scalar>(
    scenario: &CostScenario<S>,
) -> Result<CostProjection<S>, AnalysisError> {
    for (name, v) in [
        ("price", scenario.price_per_million),
        ("volume", scenario.volume),
        ("days", scenario.days),
    ] {
        if !(v.is_finite() && v > S::zero()) {
            return Err(AnalysisError::Scenario(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    let (base, cand) = (&scenario.baseline, &scenario.candidate);
    let delta = relative_delta(cand, base)?;
    let daily = |s: &TechniqueSummary<S>| {
        scenario.price_per_million * scenario.volume * s.mean_tokens() / S::lit(1e6)
    };
    let (bd, cd) = (daily(base), daily(cand));
    let crossover = if base.accuracy() > S::zero() && cand.accuracy() > S::zero() {
        crossover_c(base, cand)?
    } else {
        Crossover::Never
    };
    Ok(CostProjection {
        token_delta_pct: delta.tokens_pct,
        accuracy_delta_pct: delta.accuracy_pct,
        accuracy_delta: cand.accuracy() - base.accuracy(),
        baseline_daily_spend: bd,
        candidate_daily_spend: cd,
        baseline_horizon_spend: bd * scenario.days,
        candidate_horizon_spend: cd * scenario.days,
        savings: (bd - cd) * scenario.days,
        crossover,
    })
}
