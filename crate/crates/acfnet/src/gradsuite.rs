//! Text rendering of the gradient-check suite.

use acfnet_core::gradsuite::SuiteEntry;

pub fn render(entries: &[SuiteEntry]) -> String {
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>12}  {:>9}  {:>7}  result\n", "check", "max rel err", "tolerance", "coords");
    for e in entries {
        out.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>9.0e}  {:>7}  {}\n",
            e.name,
            e.report.max_rel_error,
            e.tolerance,
            e.report.coords_checked,
            if e.passed() { "pass" } else { "FAIL" }
        ));
    }
    let failed = entries.iter().filter(|e| !e.passed()).count();
    out.push_str(&format!("{} checks, {} failed\n", entries.len(), failed));
    out
}
