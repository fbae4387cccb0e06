//! Markdown tables and SVG line plots from run results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use super::config::Method;
use super::runner::{AccuracySummary, RunResult};
use crate::csr::CsrSet;
use crate::error::{Error, Result};

pub const MISSING: &str = "—";

/// `mean±sem` with two decimals; the mean alone when the SEM is undefined.
pub fn format_cell(summary: Option<&AccuracySummary>) -> String {
    match summary.and_then(|s| s.mean.map(|m| (m, s.sem))) {
        Some((m, Some(s))) => format!("{m:.2}±{s:.2}"),
        Some((m, None)) => format!("{m:.2}"),
        None => MISSING.to_string(),
    }
}

/// Method × labels-per-class grid of headline accuracies.
pub fn accuracy_grid(results: &[RunResult], methods: &[Method], n_values: &[usize]) -> String {
    let mut cells: BTreeMap<(Method, usize), &AccuracySummary> = BTreeMap::new();
    for r in results {
        cells.insert((r.method, r.n_per_class), &r.best);
    }
    let mut out = String::from("| method |");
    for n in n_values {
        let _ = write!(out, " n={n} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(n_values.len()));
    out.push('\n');
    for &m in methods {
        let _ = write!(out, "| {m} |");
        for &n in n_values {
            let _ = write!(out, " {} |", format_cell(cells.get(&(m, n)).copied()));
        }
        out.push('\n');
    }
    out
}

/// Accuracy against unlabeled pool size.
pub fn sweep_table(results: &[RunResult]) -> String {
    let mut out = String::from("| unlabeled pool | accuracy (best) | accuracy (last) |\n|---|---|---|\n");
    let mut rows: Vec<&RunResult> = results.iter().collect();
    rows.sort_by_key(|r| r.unlabeled_cap);
    for r in rows {
        let cap = r.unlabeled_cap.map_or_else(|| "all".to_string(), |c| c.to_string());
        let _ = writeln!(out, "| {cap} | {} | {} |", format_cell(Some(&r.best)), format_cell(Some(&r.last)));
    }
    out
}

/// Initial and final word lists per class, side by side.
pub fn csr_table(initial: &CsrSet, last: &CsrSet, class_names: &[String], top: usize) -> String {
    let mut out = format!(
        "| class | initial (v{}) | final (v{}) |\n|---|---|---|\n",
        initial.version, last.version
    );
    for (c, (a, b)) in initial.classes.iter().zip(&last.classes).enumerate() {
        let words = |csr: &crate::csr::ClassSemanticRepresentation| {
            csr.words.iter().take(top).map(|w| w.word.as_str()).collect::<Vec<_>>().join(", ")
        };
        let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let _ = writeln!(out, "| {name} | {} | {} |", words(a), words(b));
    }
    out
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A plain SVG line chart with axes, ticks and a legend.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 60.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.1).max(1.0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>",
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{yv:.1}</text>\n<line x1=\"{left}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>",
            sx(xv),
            top + ph + 18.0,
            tick(xv),
            left - 6.0,
            sy(yv) + 4.0,
            sy(yv),
            left + pw,
            sy(yv)
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        left + pw / 2.0,
        h - 16.0,
        escape(x_label),
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        for &(x, y) in &pts {
            let _ = writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", sx(x), sy(y));
        }
        let ly = top + 10.0 + i as f64 * 18.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            left + pw + 12.0,
            left + pw + 32.0,
            left + pw + 38.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

/// One series per method: headline accuracy against labels per class.
pub fn accuracy_vs_n(results: &[RunResult]) -> Vec<Series> {
    let mut by_method: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
    for r in results {
        if let Some(m) = r.accuracy() {
            by_method.entry(r.method).or_default().push((r.n_per_class as f64, m));
        }
    }
    by_method
        .into_iter()
        .map(|(m, points)| Series {
            label: m.to_string(),
            points,
        })
        .collect()
}

/// One series per method: headline accuracy against unlabeled pool size.
pub fn accuracy_vs_pool(results: &[RunResult]) -> Vec<Series> {
    let mut by_method: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
    for r in results {
        if let (Some(cap), Some(m)) = (r.unlabeled_cap, r.accuracy()) {
            by_method.entry(r.method).or_default().push((cap as f64, m));
        }
    }
    by_method
        .into_iter()
        .map(|(m, points)| Series {
            label: m.to_string(),
            points,
        })
        .collect()
}

/// Reads every `run_result.json` below `dir`.
pub fn collect_results(dir: &Path) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for p in paths {
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "run_result.json") {
                out.push(RunResult::load(&p)?);
            }
        }
    }
    out.sort_by(|a, b| (a.method, a.n_per_class, a.unlabeled_cap).cmp(&(b.method, b.n_per_class, b.unlabeled_cap)));
    Ok(out)
}

/// Writes `report.md` plus SVG plots into `out`. `class_names` labels the
/// CSR tables.
pub fn write_report(results: &[RunResult], class_names: &[String], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let methods: Vec<Method> = results.iter().map(|r| r.method).collect::<BTreeSet<_>>().into_iter().collect();
    let ns: Vec<usize> = results.iter().map(|r| r.n_per_class).collect::<BTreeSet<_>>().into_iter().collect();
    let mut md = String::from("# Results\n\n## Test accuracy (%), mean±S.E.M. over seeds\n\n");
    md.push_str(&accuracy_grid(results, &methods, &ns));
    md.push_str("\nCheckpoints are chosen by the number of unlabeled validation sentences passing the gate. ");
    md.push_str("Accuracy after the final step:\n\n");
    let last: Vec<RunResult> = results
        .iter()
        .map(|r| RunResult {
            best: r.last.clone(),
            ..r.clone()
        })
        .collect();
    md.push_str(&accuracy_grid(&last, &methods, &ns));

    let pools: BTreeSet<Option<usize>> = results.iter().map(|r| r.unlabeled_cap).collect();
    if pools.len() > 1 {
        md.push_str("\n## Unlabeled pool sweep\n\n");
        for &m in &methods {
            let rs: Vec<RunResult> = results.iter().filter(|r| r.method == m).cloned().collect();
            let _ = writeln!(md, "### {m}\n\n{}", sweep_table(&rs));
        }
        let svg = line_plot_svg(
            "Accuracy vs. unlabeled pool",
            "unlabeled sentences",
            "accuracy (%)",
            &accuracy_vs_pool(results),
        );
        write_file(&out.join("accuracy_vs_pool.svg"), &svg)?;
        md.push_str("![accuracy vs pool](accuracy_vs_pool.svg)\n");
    }
    if ns.len() > 1 {
        let svg = line_plot_svg("Accuracy vs. labels per class", "labels per class", "accuracy (%)", &accuracy_vs_n(results));
        write_file(&out.join("accuracy_vs_n.svg"), &svg)?;
        md.push_str("\n![accuracy vs n](accuracy_vs_n.svg)\n");
    }

    let mut csr_section = String::new();
    for r in results {
        let seed = r.seeds.iter().find(|s| s.initial_csr.is_some() && s.final_csr.is_some());
        if let Some(s) = seed {
            let (Some(a), Some(b)) = (&s.initial_csr, &s.final_csr) else { continue };
            let _ = writeln!(
                csr_section,
                "### {} (seed {})\n\n{}",
                r.run_name(),
                s.seed,
                csr_table(a, b, class_names, 10)
            );
        }
    }
    if !csr_section.is_empty() {
        md.push_str("\n## Class semantic representations\n\n");
        md.push_str(&csr_section);
    }
    write_file(&out.join("report.md"), &md)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_formats() {
        let s = AccuracySummary::from_values(vec![60.0, 62.0, 64.0]);
        assert_eq!(format_cell(Some(&s)), "62.00±1.15");
        assert_eq!(format_cell(None), "—");
        assert_eq!(format_cell(Some(&AccuracySummary::from_values(vec![70.0]))), "70.00");
        assert_eq!(format_cell(Some(&AccuracySummary::default())), "—");
    }

    #[test]
    fn svg_is_well_formed() {
        let svg = line_plot_svg(
            "t",
            "x",
            "y",
            &[Series {
                label: "a<b".into(),
                points: vec![(1.0, 2.0), (2.0, 3.0)],
            }],
        );
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains("<polyline"));
        let empty = line_plot_svg("t", "x", "y", &[]);
        assert!(empty.contains("</svg>"));
    }
}
