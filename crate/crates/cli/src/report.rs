//! Comparison table over finished training runs: one row per method,
//! clean and robust ADE per ε.

use advtraj_core::attacks::AttackKind;
use advtraj_core::training::{Regime, RunReport};

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub method: String,
    /// `(ε, clean ADE, robust ADE, runs averaged)`; NaN where no run has it.
    pub cells: Vec<(f64, f64, f64, usize)>,
}

pub const REPORT_HEADER: &str = "method,eps,ade,robust_ade,runs";

fn method(r: &RunReport) -> String {
    if r.config.augmentation { format!("{}+aug", r.regime.as_str()) } else { r.regime.as_str().to_string() }
}

fn order(m: &str) -> (usize, String) {
    let base = m.trim_end_matches("+aug");
    let rank = [Regime::Clean, Regime::NaiveAt, Regime::Robusttraj].iter().position(|r| r.as_str() == base).unwrap_or(3);
    (rank, m.to_string())
}

/// Rows in regime order. Each ε column averages the runs trained at that
/// ε (clean runs count for every ε); a method with no run at that ε falls
/// back to all its runs. Incomplete runs are skipped.
pub fn comparison(reports: &[RunReport]) -> (Vec<f64>, Vec<TableRow>) {
    let done: Vec<&RunReport> = reports.iter().filter(|r| r.complete).collect();
    let mut eps: Vec<f64> = done.iter().flat_map(|r| r.attacked.iter().filter(|a| a.attack == AttackKind::Deterministic).map(|a| a.eps)).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let mut methods: Vec<String> = done.iter().map(|r| method(r)).collect();
    methods.sort_by_key(|m| order(m));
    methods.dedup();
    let rows = methods
        .into_iter()
        .map(|m| {
            let mine: Vec<&RunReport> = done.iter().copied().filter(|r| method(r) == m).collect();
            let cells = eps
                .iter()
                .map(|&e| {
                    let matched: Vec<&RunReport> = mine.iter().copied().filter(|r| r.regime == Regime::Clean || r.config.eps == e).collect();
                    let pool = if matched.is_empty() { &mine } else { &matched };
                    let robust: Vec<f64> = pool.iter().filter_map(|r| r.robust(e, AttackKind::Deterministic)).map(|a| a.metrics.ade).collect();
                    let clean: Vec<f64> = pool.iter().map(|r| r.clean.ade).collect();
                    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
                    (e, mean(&clean), mean(&robust), pool.len())
                })
                .collect();
            TableRow { method: m, cells }
        })
        .collect();
    (eps, rows)
}

pub fn comparison_csv(rows: &[TableRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        for (e, ade, robust, n) in &r.cells {
            s.push_str(&format!("{},{},{:.6},{:.6},{}\n", r.method, e, ade, robust, n));
        }
    }
    s
}

fn cell(v: f64) -> String {
    if v.is_nan() { "-".into() } else { format!("{v:.3}") }
}

/// Aligned text table with an ADE column group and a Robust ADE column
/// group, one column per ε in each.
pub fn comparison_text(eps: &[f64], rows: &[TableRow]) -> String {
    let w0 = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("Method".len());
    let wc = 8;
    let group = |name: &str| format!("{name:^width$}", width = eps.len() * (wc + 1) - 1);
    let mut s = format!("{:<w0$} | {} | {}\n", "", group("ADE"), group("Robust ADE"));
    let heads: Vec<String> = eps.iter().map(|e| format!("{:>wc$}", format!("eps {e}"))).collect();
    s.push_str(&format!("{:<w0$} | {} | {}\n", "Method", heads.join(" "), heads.join(" ")));
    s.push_str(&format!("{}\n", "-".repeat(w0 + 6 + 2 * (eps.len() * (wc + 1) - 1))));
    for r in rows {
        let clean: Vec<String> = r.cells.iter().map(|c| format!("{:>wc$}", cell(c.1))).collect();
        let robust: Vec<String> = r.cells.iter().map(|c| format!("{:>wc$}", cell(c.2))).collect();
        s.push_str(&format!("{:<w0$} | {} | {}\n", r.method, clean.join(" "), robust.join(" ")));
    }
    s
}
