mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use serde_json::Value;

use epibench_core::analysis::{
    aggregate_model_agnostic, aggregate_model_specific, analyze_records, Grid, View,
};
use epibench_core::backend::{MockBackend, RetryPolicy};
use epibench_core::dataset::{self, Choice, DatasetKind, Question, Quota};
use epibench_core::epi::{epi_exponential, TechniqueSummary};
use epibench_core::grading::{Answer, CellKey};
use epibench_core::report::{emit, ReportFormat, REPORT_JSON, SUMMARY_TABLE};
use epibench_core::runner::{run, DatasetSource, RunPlan};
use epibench_core::technique::TechniqueSpec;

fn all_a_csqa(dir: &Path) -> DatasetSource {
    let questions: Vec<Question> = (0..10)
        .map(|i| Question {
            id: format!("c{i}"),
            dataset: DatasetKind::Csqa,
            question: format!("Which option is first in list {i}?"),
            choices: Some(
                "ABCDE"
                    .chars()
                    .map(|l| Choice {
                        letter: l.to_string(),
                        text: format!("choice {l}"),
                    })
                    .collect(),
            ),
            gold: Answer::choice('A').unwrap(),
            subject: None,
        })
        .collect();
    let path = dir.join("csqa.jsonl");
    dataset::write_questions(fs::File::create(&path).unwrap(), &questions).unwrap();
    DatasetSource {
        kind: DatasetKind::Csqa,
        path,
        quota: Quota::All,
    }
}

fn mock_plan(dir: &Path, techniques: &[&str]) -> RunPlan {
    let mut plan = RunPlan::new(
        techniques
            .iter()
            .map(|t| TechniqueSpec::builtin(t).unwrap())
            .collect(),
        vec![all_a_csqa(dir)],
        vec!["mock-model".into()],
        dir.join("out"),
    );
    plan.retry = RetryPolicy::immediate(1);
    plan
}

#[test]
fn always_a_mock_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &mock_plan(dir.path(), &["standard"]),
        MockBackend::fixed("Final Answer = (A)", 30, 12),
    )
    .unwrap();
    let report = analyze_records(&out.records, View::ModelAgnostic, &[]).unwrap();
    let row = report.groups[0].row("standard").unwrap();
    assert_eq!(row.accuracy, 1.0);
    assert_eq!(row.n, 10);
    assert_eq!(row.mean_tokens, 42.0);
}

#[test]
fn self_consistency_tokens_sum_three_samples() {
    let dir = tempfile::tempdir().unwrap();
    let plan = mock_plan(dir.path(), &["cot", "self_consistency"]);
    run(&plan, MockBackend::fixed("Final Answer = (A)", 30, 12)).unwrap();

    // recomputed from the raw files, not through the crate's types
    let lines = |p: &Path| -> Vec<Value> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let records = lines(&plan.records_path());
    let transcripts = lines(&plan.transcripts_path());
    let sc_entries: Vec<&Value> = transcripts
        .iter()
        .filter(|e| e["temperature"] == 0.7)
        .collect();
    assert_eq!(sc_entries.len(), 30);
    let transcript_tokens: u64 = sc_entries
        .iter()
        .map(|e| e["input_tokens"].as_u64().unwrap() + e["output_tokens"].as_u64().unwrap())
        .sum();

    let mut by_technique: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for r in &records {
        let samples = r["samples"].as_array().unwrap();
        let summed: u64 = samples
            .iter()
            .map(|s| s["input_tokens"].as_u64().unwrap() + s["output_tokens"].as_u64().unwrap())
            .sum();
        assert_eq!(r["total_tokens"].as_u64().unwrap(), summed);
        by_technique
            .entry(r["technique"].as_str().unwrap())
            .or_default()
            .push(summed);
    }
    let sc: u64 = by_technique["self_consistency"].iter().sum();
    let cot: u64 = by_technique["cot"].iter().sum();
    assert_eq!(sc, transcript_tokens);
    assert_eq!(sc, 3 * cot);
    assert!(records
        .iter()
        .filter(|r| r["technique"] == "self_consistency")
        .all(|r| r["samples"].as_array().unwrap().len() == 3));
}

#[test]
fn completed_plan_reruns_without_backend_calls() {
    let dir = tempfile::tempdir().unwrap();
    let plan = mock_plan(dir.path(), &["cot", "self_consistency", "s2a"]);
    let first = run(&plan, MockBackend::fixed("Final Answer = (B)", 5, 5)).unwrap();
    let counting = common::Counting::new(MockBackend::fixed("never used", 0, 0));
    let counter = std::sync::Arc::new(counting);
    let second = run(&plan, std::sync::Arc::clone(&counter)).unwrap();
    assert_eq!(counter.count(), 0);
    assert_eq!(second.records, first.records);
}

fn simulated_report(dir: &Path) -> (RunPlan, Value) {
    let plan = common::fixture_plan(&dir.join("sim"));
    common::run_and_report(&plan, common::simulated_model()).unwrap();
    let json = fs::read(plan.out_dir.join("report").join(REPORT_JSON)).unwrap();
    (plan, serde_json::from_slice(&json).unwrap())
}

#[test]
fn emitted_index_values_recompute_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (_, report) = simulated_report(dir.path());
    let mut audited = 0;
    for group in report["groups"].as_array().unwrap() {
        for row in group["techniques"].as_array().unwrap() {
            let a = row["accuracy"].as_f64().unwrap();
            let t = row["mean_tokens"].as_f64().unwrap();
            for p in row["epi"].as_array().unwrap() {
                let c = p["c"].as_f64().unwrap();
                let want = epi_exponential(a, c, t).unwrap();
                assert_eq!(
                    p["epi"].as_f64().unwrap().to_bits(),
                    want.to_bits(),
                    "{row}"
                );
                audited += 1;
            }
        }
    }
    assert_eq!(audited, 4 * 6 * 5);
}

#[test]
fn significance_follows_the_all_models_rule() {
    let dir = tempfile::tempdir().unwrap();
    let (plan, report) = simulated_report(dir.path());
    let table = fs::read_to_string(plan.out_dir.join("report").join(SUMMARY_TABLE)).unwrap();
    for group in report["groups"].as_array().unwrap() {
        let sig = &group["significance"];
        for test in ["accuracy", "cost"] {
            let pair = &sig[test];
            let per_model = pair["per_model"].as_array().unwrap();
            assert_eq!(per_model.len(), 2);
            let every = per_model
                .iter()
                .all(|m| m["result"]["significant"].as_bool() == Some(true));
            assert_eq!(pair["significant"].as_bool().unwrap(), every, "{pair}");
        }
        // the two most expensive techniques are the sampled one and the runner-up
        assert_eq!(sig["cost"]["first"], "self_consistency");
    }
    let starred = table.matches('*').count();
    let expected: usize = report["groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| {
            ["accuracy", "cost"]
                .iter()
                .filter(|t| g["significance"][**t]["significant"] == true)
                .count()
        })
        .sum();
    assert_eq!(starred, expected, "{table}");
}

#[test]
fn highlighted_crossovers_lie_within_the_fixed_span() {
    let dir = tempfile::tempdir().unwrap();
    let (_, report) = simulated_report(dir.path());
    for group in report["groups"].as_array().unwrap() {
        let crossovers = group["crossovers"].as_array().unwrap();
        assert_eq!(crossovers.len(), 15);
        for x in crossovers {
            let c = x["crossover"]["c"].as_f64();
            let inside = match x["crossover"]["kind"].as_str().unwrap() {
                "origin" => true,
                "at" => c.unwrap() <= 0.002,
                _ => false,
            };
            assert_eq!(x["highlighted"].as_bool().unwrap(), inside, "{x}");
        }
    }
}

#[test]
fn emission_from_records_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let plan = common::fixture_plan(&dir.path().join("sim"));
    let out = run(&plan, common::simulated_model()).unwrap();
    for view in [View::ModelAgnostic, View::ModelSpecific] {
        let a = analyze_records(&out.records, view, &[]).unwrap();
        let b = analyze_records(&out.records, view, &[]).unwrap();
        emit(&a, ReportFormat::Full, dir.path().join("x")).unwrap();
        emit(&b, ReportFormat::Full, dir.path().join("y")).unwrap();
        assert_eq!(
            common::snapshot(&dir.path().join("x")),
            common::snapshot(&dir.path().join("y"))
        );
    }
}

fn grid_strategy() -> impl Strategy<Value = Grid<f64>> {
    (1usize..4, 1usize..6, 1usize..=4).prop_flat_map(|(nt, nm, nd)| {
        prop::collection::vec((0.0f64..=1.0, 0.0f64..3000.0, 1usize..250), nt * nm * nd).prop_map(
            move |cells| {
                let mut grid = Grid::new();
                let mut it = cells.into_iter();
                for t in 0..nt {
                    for m in 0..nm {
                        for &d in &DatasetKind::ALL[..nd] {
                            let (a, tk, n) = it.next().unwrap();
                            grid.insert(
                                CellKey {
                                    technique: format!("t{t}"),
                                    dataset: d,
                                    model: format!("m{m}"),
                                },
                                TechniqueSummary::new(a, tk, n).unwrap(),
                            );
                        }
                    }
                }
                grid
            },
        )
    })
}

proptest! {
    #[test]
    fn aggregation_commutes_with_slicing(grid in grid_strategy()) {
        let agnostic = aggregate_model_agnostic(&grid).unwrap();
        let specific = aggregate_model_specific(&grid).unwrap();
        let techniques: Vec<String> = agnostic.values().next().unwrap().keys().cloned().collect();
        for t in techniques {
            let mean = |vals: Vec<f64>| vals.iter().sum::<f64>() / vals.len() as f64;
            let all: Vec<&TechniqueSummary<f64>> =
                grid.iter().filter(|(k, _)| k.technique == t).map(|(_, s)| s).collect();
            let grand_a = mean(all.iter().map(|s| s.accuracy()).collect());
            let by_d = mean(agnostic.values().map(|g| g[&t].accuracy()).collect());
            let by_m = mean(specific.values().map(|g| g[&t].accuracy()).collect());
            prop_assert!((by_d - grand_a).abs() < 1e-12);
            prop_assert!((by_m - grand_a).abs() < 1e-12);
            let n_total: usize = all.iter().map(|s| s.n()).sum();
            prop_assert_eq!(agnostic.values().map(|g| g[&t].n()).sum::<usize>(), n_total);
        }
    }

    #[test]
    fn dropping_any_cell_is_reported(grid in grid_strategy(), pick in any::<prop::sample::Index>()) {
        prop_assume!(grid.len() > 1);
        let mut grid = grid;
        let key = grid.keys().nth(pick.index(grid.len())).unwrap().clone();
        grid.remove(&key);
        let still_complete_axes = grid.keys().any(|k| k.technique == key.technique)
            && grid.keys().any(|k| k.model == key.model)
            && grid.keys().any(|k| k.dataset == key.dataset);
        if still_complete_axes {
            match aggregate_model_agnostic(&grid) {
                Err(epibench_core::AnalysisError::MissingCells(m)) => prop_assert_eq!(m, vec![key.to_string()]),
                other => prop_assert!(false, "unexpected {:?}", other),
            }
        }
    }
}
