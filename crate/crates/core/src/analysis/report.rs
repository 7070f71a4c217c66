//! Markdown and CSV report emitters over completed runs.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::metrics::{mean, std_dev};
use super::stats::{kruskal_wallis, shapiro_wilk, wilcoxon_signed_rank, StatResult, StatsError};
use crate::datamodel::Mode;
use crate::runner::RunRecord;

/// Significance level for starring.
pub const ALPHA: f64 = 0.01;

pub const CURVES_HEADER: &str = "mode,proportion,mean_macro_f1,std";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Every artifact: Markdown tables plus the curve CSV.
    Markdown,
    /// Only the curve CSV.
    Csv,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no runs to report on")]
    Empty,
    #[error("run {hash} is incomplete: {found} of {expected} cells")]
    Incomplete {
        hash: String,
        found: usize,
        expected: usize,
    },
    #[error("runs disagree on proportions")]
    ProportionMismatch,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn check(records: &[RunRecord]) -> Result<Vec<f64>, ReportError> {
    let first = records.first().ok_or(ReportError::Empty)?;
    for r in records {
        let c = &r.config;
        let expected = c.datasets.len() * c.ordered_modes().len() * c.proportions.len() * c.seeds.len();
        if r.cells.len() != expected {
            return Err(ReportError::Incomplete {
                hash: r.config_hash.clone(),
                found: r.cells.len(),
                expected,
            });
        }
        if r.config.proportions != first.config.proportions {
            return Err(ReportError::ProportionMismatch);
        }
    }
    Ok(first.config.proportions.clone())
}

pub fn percent(p: f64) -> String {
    format!("{}%", (p * 100.0).round() as i64)
}

/// `0.7916` above 0.01, `4e-03` style below it.
pub fn format_p(p: f64) -> String {
    if p >= ALPHA {
        return format!("{p:.4}");
    }
    if p <= 0.0 {
        return "0".to_string();
    }
    let s = format!("{p:.0e}");
    match s.split_once('e') {
        Some((m, e)) => {
            let e: i32 = e.parse().unwrap_or(0);
            let sign = if e < 0 { '-' } else { '+' };
            format!("{m}e{sign}{:02}", e.abs())
        }
        None => s,
    }
}

pub fn star(p: f64) -> &'static str {
    if p < ALPHA {
        "*"
    } else {
        ""
    }
}

fn stat_cells(r: &Result<StatResult, StatsError>) -> (String, String) {
    match r {
        Ok(s) => (
            format!("{:.2}", s.statistic),
            format!("{}{}", format_p(s.p_value), star(s.p_value)),
        ),
        Err(_) => ("—".to_string(), "—".to_string()),
    }
}

fn has_mode(records: &[RunRecord], mode: Mode) -> bool {
    records.iter().any(|r| r.config.wants(mode))
}

/// Per-dataset mean ± std macro-F1 (×100) over seeds, one column pair per backend.
pub fn render_macro_f1_table(records: &[RunRecord]) -> Result<String, ReportError> {
    let proportions = check(records)?;
    let mut out = String::from("| Dataset | Corrected Proportion |");
    let mut rule = String::from("|---|---|");
    for r in records {
        for mode in r.modes() {
            let _ = write!(out, " {} {} |", r.backend_id, mode.display_name());
            rule.push_str("---|");
        }
    }
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    let mut datasets: Vec<&str> = Vec::new();
    for r in records {
        for d in &r.config.datasets {
            if !datasets.contains(&d.as_str()) {
                datasets.push(d);
            }
        }
    }
    for d in datasets {
        for &p in &proportions {
            let _ = write!(out, "| {d} | {} |", percent(p));
            for r in records {
                for mode in r.modes() {
                    let f1: Vec<f64> = r.f1_by_seed(d, mode, p).into_iter().map(|(_, f)| f * 100.0).collect();
                    if f1.is_empty() {
                        out.push_str(" — |");
                    } else {
                        let _ = write!(out, " {:.1} ± {:.1} |", mean(&f1), std_dev(&f1));
                    }
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// ICL vs CICL macro-F1 pairs at one proportion: one per (backend, dataset, seed).
pub fn wilcoxon_pairs(records: &[RunRecord], proportion: f64) -> (Vec<f64>, Vec<f64>) {
    let (mut icl, mut cicl) = (Vec::new(), Vec::new());
    for r in records {
        if !(r.config.wants(Mode::Icl) && r.config.wants(Mode::Cicl)) {
            continue;
        }
        for d in &r.config.datasets {
            for &seed in &r.config.seeds {
                if let (Some(a), Some(b)) = (
                    r.cell(d, Mode::Icl, proportion, seed),
                    r.cell(d, Mode::Cicl, proportion, seed),
                ) {
                    icl.push(a.macro_f1);
                    cicl.push(b.macro_f1);
                }
            }
        }
    }
    (icl, cicl)
}

/// One row per proportion; `None` when no run has both modes.
pub fn render_wilcoxon_table(records: &[RunRecord]) -> Result<Option<String>, ReportError> {
    let proportions = check(records)?;
    if !(has_mode(records, Mode::Icl) && has_mode(records, Mode::Cicl)) {
        return Ok(None);
    }
    let mut out = String::from("| Corrected Proportion | Statistic | P-value | n |\n|---|---|---|---|\n");
    for p in proportions {
        let (icl, cicl) = wilcoxon_pairs(records, p);
        let res = wilcoxon_signed_rank(&icl, &cicl);
        let (stat, pv) = stat_cells(&res);
        let n = res.as_ref().map(|s| s.n).unwrap_or(icl.len());
        let _ = writeln!(out, "| {} | {stat} | {pv} | {n} |", percent(p));
    }
    Ok(Some(out))
}

/// Macro-F1 groups per proportion for one mode, pooled over backends, datasets and seeds.
pub fn kruskal_groups(records: &[RunRecord], mode: Mode, proportions: &[f64]) -> Vec<Vec<f64>> {
    proportions
        .iter()
        .map(|&p| {
            records
                .iter()
                .flat_map(|r| {
                    r.config
                        .datasets
                        .iter()
                        .flat_map(move |d| r.f1_by_seed(d, mode, p).into_iter().map(|(_, f)| f))
                })
                .collect()
        })
        .collect()
}

pub fn render_kruskal_table(records: &[RunRecord]) -> Result<String, ReportError> {
    let proportions = check(records)?;
    let mut out = String::from("| Method | Statistic | P-value | n |\n|---|---|---|---|\n");
    for mode in [Mode::Icl, Mode::Cicl] {
        if !has_mode(records, mode) {
            continue;
        }
        let groups = kruskal_groups(records, mode, &proportions);
        let res = kruskal_wallis(&groups);
        let (stat, pv) = stat_cells(&res);
        let n: usize = groups.iter().map(Vec::len).sum();
        let _ = writeln!(out, "| {} | {stat} | {pv} | {n} |", mode.display_name());
    }
    Ok(out)
}

/// Shapiro-Wilk on each (mode, proportion) sample and on the paired differences.
pub fn render_normality_table(records: &[RunRecord]) -> Result<String, ReportError> {
    let proportions = check(records)?;
    let mut out = String::from("| Sample | Corrected Proportion | W | P-value | n |\n|---|---|---|---|---|\n");
    let mut row = |label: &str, p: f64, xs: &[f64]| {
        let res = shapiro_wilk(xs);
        let (w, pv) = match &res {
            Ok(s) => (
                format!("{:.4}", s.statistic),
                format!("{}{}", format_p(s.p_value), star(s.p_value)),
            ),
            Err(_) => ("—".to_string(), "—".to_string()),
        };
        let _ = writeln!(out, "| {label} | {} | {w} | {pv} | {} |", percent(p), xs.len());
    };
    for mode in [Mode::Icl, Mode::Cicl] {
        if !has_mode(records, mode) {
            continue;
        }
        for (p, g) in proportions.iter().zip(kruskal_groups(records, mode, &proportions)) {
            row(mode.display_name(), *p, &g);
        }
    }
    if has_mode(records, Mode::Icl) && has_mode(records, Mode::Cicl) {
        for &p in &proportions {
            let (a, b) = wilcoxon_pairs(records, p);
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            row("ICL − CICL", p, &d);
        }
    }
    Ok(out)
}

/// Mean ± std across datasets of the per-dataset seed-mean macro-F1.
pub fn render_curves_csv(records: &[RunRecord]) -> Result<String, ReportError> {
    let proportions = check(records)?;
    let mut out = format!("{CURVES_HEADER}\n");
    for mode in [Mode::Icl, Mode::Cicl] {
        if !has_mode(records, mode) {
            continue;
        }
        for &p in &proportions {
            let per_dataset: Vec<f64> = records
                .iter()
                .filter(|r| r.config.wants(mode))
                .flat_map(|r| {
                    r.config.datasets.iter().map(move |d| {
                        let f: Vec<f64> = r.f1_by_seed(d, mode, p).into_iter().map(|(_, f)| f).collect();
                        mean(&f)
                    })
                })
                .collect();
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6}",
                mode.as_str(),
                p,
                mean(&per_dataset),
                std_dev(&per_dataset)
            );
        }
    }
    Ok(out)
}

fn write(dir: &Path, name: &str, body: &str, written: &mut Vec<PathBuf>) -> Result<(), ReportError> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    written.push(path);
    Ok(())
}

/// Writes the report artifacts into `out_dir` and returns their paths.
pub fn emit_reports(records: &[RunRecord], out_dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>, ReportError> {
    check(records)?;
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    if format == ReportFormat::Markdown {
        write(out_dir, "macro_f1.md", &render_macro_f1_table(records)?, &mut written)?;
        if let Some(w) = render_wilcoxon_table(records)? {
            write(out_dir, "wilcoxon.md", &w, &mut written)?;
        }
        write(
            out_dir,
            "kruskal_wallis.md",
            &render_kruskal_table(records)?,
            &mut written,
        )?;
        write(out_dir, "normality.md", &render_normality_table(records)?, &mut written)?;
    }
    write(out_dir, "curves.csv", &render_curves_csv(records)?, &mut written)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_value_formatting() {
        assert_eq!(format_p(0.7916), "0.7916");
        assert_eq!(format_p(0.01), "0.0100");
        assert_eq!(format_p(0.004), "4e-03");
        assert_eq!(format_p(0.0007), "7e-04");
        assert_eq!(format_p(1.2e-16), "1e-16");
        assert_eq!(format_p(9e-54), "9e-54");
    }

    #[test]
    fn stars_only_below_alpha() {
        assert_eq!(star(0.0099), "*");
        assert_eq!(star(0.01), "");
        assert_eq!(star(0.02), "");
    }

    #[test]
    fn percent_labels() {
        assert_eq!(percent(0.0), "0%");
        assert_eq!(percent(0.25), "25%");
        assert_eq!(percent(1.0), "100%");
    }
}
