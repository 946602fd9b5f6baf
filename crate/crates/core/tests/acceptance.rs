//! Runs every acceptance experiment at its default settings and prints one
//! line per criterion.

use lab_core::harness::{list_experiments, run_experiment, ExperimentConfig, ReportRow};

const SEED: u64 = 1;

fn describe(rows: &[ReportRow]) -> String {
    rows.iter()
        .filter(|r| r.check != lab_core::harness::Check::Info)
        .map(|r| format!("{}={:.4e}", r.name, r.measured))
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn acceptance_criteria() {
    let mut catalogue: Vec<_> = list_experiments()
        .into_iter()
        .filter_map(|e| e.criterion.map(|c| (c, e.id)))
        .collect();
    catalogue.sort();
    assert_eq!(catalogue.len(), 13);
    let mut failed = Vec::new();
    for (criterion, id) in catalogue {
        let report = run_experiment(&ExperimentConfig::new(id, SEED))
            .unwrap_or_else(|e| panic!("{id}: {e}"));
        let verdict = if report.all_pass() { "PASS" } else { "FAIL" };
        println!(
            "criterion {criterion:>2} {id:<22} {verdict} ({:.1}s) {}",
            report.wall_time_s,
            describe(&report.rows)
        );
        if !report.all_pass() {
            failed.push(criterion);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
