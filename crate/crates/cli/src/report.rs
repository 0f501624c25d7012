//! Text tables and SVG box plots from `summary.csv` or `boxplot_*.csv`.

use std::fmt::Write as _;
use std::path::Path;

use drmiss::EstimatorKind;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scenario: String,
    pub estimator: EstimatorKind,
    pub truth: Option<f64>,
    pub successes: Option<usize>,
    pub failures: Option<usize>,
    pub mean_bias: Option<f64>,
    pub mc_sd: Option<f64>,
    pub median_se: Option<f64>,
    pub quantiles: Option<Quantiles>,
}

/// Rows grouped by scenario in order of first appearance, estimators in
/// the canonical DR, Naive, CC, IPCW, MCDLM, Full order.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub scenario: String,
    pub rows: Vec<ReportRow>,
}

fn parse_error(path: &Path, message: String) -> CliError {
    CliError::Parse { path: path.to_path_buf(), message }
}

pub fn read_summary(path: &Path, text: &str) -> Result<Vec<ReportRow>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| parse_error(path, e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| find(name).ok_or_else(|| parse_error(path, format!("missing column `{name}`")));
    let (i_scen, i_est) = (require("scenario")?, require("estimator")?);
    let quantile_cols = ["min", "q1", "median", "q3", "max"].map(require);
    let [i_min, i_q1, i_med, i_q3, i_max] = match quantile_cols {
        [Ok(a), Ok(b), Ok(c), Ok(d), Ok(e)] => [a, b, c, d, e],
        cols => return Err(cols.into_iter().find_map(Result::err).expect("one column is missing")),
    };
    let optional = |name: &str| find(name);
    let (i_truth, i_succ, i_fail, i_bias, i_sd, i_se) = (
        optional("truth"),
        optional("successes"),
        optional("failures"),
        optional("mean_bias"),
        optional("mc_sd"),
        optional("median_se"),
    );

    let mut rows = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| parse_error(path, format!("line {line}: {e}")))?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let num = |i: Option<usize>, name: &str| -> Result<Option<f64>, CliError> {
            match i.map(field).filter(|s| !s.is_empty()) {
                None => Ok(None),
                Some(s) => s
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| parse_error(path, format!("line {line}: column `{name}`: `{s}` is not a number"))),
            }
        };
        let count = |i: Option<usize>, name: &str| -> Result<Option<usize>, CliError> {
            match i.map(field).filter(|s| !s.is_empty()) {
                None => Ok(None),
                Some(s) => s
                    .parse::<usize>()
                    .map(Some)
                    .map_err(|_| parse_error(path, format!("line {line}: column `{name}`: `{s}` is not a count"))),
            }
        };
        let estimator: EstimatorKind =
            field(i_est).parse().map_err(|e: String| parse_error(path, format!("line {line}: {e}")))?;
        let qs = [
            num(Some(i_min), "min")?,
            num(Some(i_q1), "q1")?,
            num(Some(i_med), "median")?,
            num(Some(i_q3), "q3")?,
            num(Some(i_max), "max")?,
        ];
        let quantiles = match qs {
            [Some(min), Some(q1), Some(median), Some(q3), Some(max)] => {
                if !(min <= q1 && q1 <= median && median <= q3 && q3 <= max) {
                    return Err(parse_error(path, format!("line {line}: quantiles are not ordered")));
                }
                Some(Quantiles { min, q1, median, q3, max })
            }
            [None, None, None, None, None] => None,
            _ => return Err(parse_error(path, format!("line {line}: incomplete quantiles"))),
        };
        rows.push(ReportRow {
            scenario: field(i_scen).to_string(),
            estimator,
            truth: num(i_truth, "truth")?,
            successes: count(i_succ, "successes")?,
            failures: count(i_fail, "failures")?,
            mean_bias: num(i_bias, "mean_bias")?,
            mc_sd: num(i_sd, "mc_sd")?,
            median_se: num(i_se, "median_se")?,
            quantiles,
        });
    }
    Ok(rows)
}

pub fn panels(rows: Vec<ReportRow>) -> Result<Vec<Panel>, String> {
    if rows.is_empty() {
        return Err("empty report: the summary lists no estimators".into());
    }
    let mut out: Vec<Panel> = Vec::new();
    for row in rows {
        match out.iter_mut().find(|p| p.scenario == row.scenario) {
            Some(p) => {
                if p.rows.iter().any(|r| r.estimator == row.estimator) {
                    return Err(format!("scenario {}: estimator {} listed twice", row.scenario, row.estimator));
                }
                p.rows.push(row);
            }
            None => out.push(Panel { scenario: row.scenario.clone(), rows: vec![row] }),
        }
    }
    for p in &mut out {
        p.rows.sort_by_key(|r| r.estimator);
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Aligned plain-text table, one block per scenario.
pub fn render_text(panels: &[Panel]) -> String {
    let header = ["scenario", "estimator", "ok", "failed", "truth", "mean_bias", "mc_sd", "median", "iqr", "median_se"];
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for p in panels {
        for r in &p.rows {
            let q = r.quantiles;
            table.push(vec![
                r.scenario.clone(),
                r.estimator.name().to_string(),
                r.successes.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                r.failures.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                cell(r.truth),
                cell(r.mean_bias),
                cell(r.mc_sd),
                cell(q.map(|q| q.median)),
                cell(q.map(|q| q.q3 - q.q1)),
                cell(r.median_se),
            ]);
        }
    }
    let widths: Vec<usize> =
        (0..header.len()).map(|j| table.iter().map(|row| row[j].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, s)| if j < 2 { format!("{s:<w$}", w = widths[j]) } else { format!("{s:>w$}", w = widths[j]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

const TOP: f64 = 40.0;
const PLOT_H: f64 = 200.0;
const BOTTOM: f64 = 40.0;
const LEFT: f64 = 60.0;
const SLOT: f64 = 60.0;
const RIGHT: f64 = 10.0;
const BOX_HALF: f64 = 15.0;
const CAP_HALF: f64 = 8.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One panel per scenario side by side; each panel has its own linear
/// value axis spanning the extreme quantiles and the truth.
pub fn render_svg(panels: &[Panel]) -> Result<String, String> {
    let mut body = String::new();
    let mut x0 = 0.0;
    for p in panels {
        let boxed: Vec<(&ReportRow, Quantiles)> = p.rows.iter().filter_map(|r| r.quantiles.map(|q| (r, q))).collect();
        if boxed.is_empty() {
            return Err(format!("scenario {}: no estimator has quantiles to plot", p.scenario));
        }
        let truth = p.rows.iter().find_map(|r| r.truth);
        let mut lo = boxed.iter().map(|(_, q)| q.min).fold(f64::INFINITY, f64::min);
        let mut hi = boxed.iter().map(|(_, q)| q.max).fold(f64::NEG_INFINITY, f64::max);
        if let Some(t) = truth {
            lo = lo.min(t);
            hi = hi.max(t);
        }
        if hi - lo <= 0.0 {
            lo -= 0.5;
            hi += 0.5;
        }
        let y = |v: f64| TOP + PLOT_H * (hi - v) / (hi - lo);
        let width = LEFT + SLOT * boxed.len() as f64 + RIGHT;

        let _ = writeln!(body, r#"<g transform="translate({x0:.2},0)">"#);
        let _ = writeln!(
            body,
            r#"<text x="{:.2}" y="20.00" text-anchor="middle" font-size="14">{}</text>"#,
            width / 2.0,
            escape(&p.scenario)
        );
        let _ = writeln!(body, r#"<line x1="{LEFT:.2}" y1="{TOP:.2}" x2="{LEFT:.2}" y2="{:.2}" stroke="black"/>"#, TOP + PLOT_H);
        for v in [hi, lo] {
            let _ = writeln!(
                body,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{v:.3}</text>"#,
                LEFT - 4.0,
                y(v) + 3.0
            );
        }
        if let Some(t) = truth {
            let _ = writeln!(
                body,
                r#"<line x1="{LEFT:.2}" y1="{yt:.2}" x2="{:.2}" y2="{yt:.2}" stroke="gray" stroke-dasharray="4,3"/>"#,
                width - RIGHT,
                yt = y(t)
            );
        }
        for (j, (row, q)) in boxed.iter().enumerate() {
            let cx = LEFT + SLOT * (j as f64 + 0.5);
            let _ = writeln!(
                body,
                r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                y(q.max),
                y(q.q3)
            );
            let _ = writeln!(
                body,
                r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                y(q.q1),
                y(q.min)
            );
            for v in [q.max, q.min] {
                let _ = writeln!(
                    body,
                    r#"<line x1="{:.2}" y1="{yv:.2}" x2="{:.2}" y2="{yv:.2}" stroke="black"/>"#,
                    cx - CAP_HALF,
                    cx + CAP_HALF,
                    yv = y(v)
                );
            }
            let _ = writeln!(
                body,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="white" stroke="black"/>"#,
                cx - BOX_HALF,
                y(q.q3),
                2.0 * BOX_HALF,
                y(q.q1) - y(q.q3)
            );
            let _ = writeln!(
                body,
                r#"<line x1="{:.2}" y1="{ym:.2}" x2="{:.2}" y2="{ym:.2}" stroke="black" stroke-width="2"/>"#,
                cx - BOX_HALF,
                cx + BOX_HALF,
                ym = y(q.median)
            );
            let _ = writeln!(
                body,
                r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"#,
                TOP + PLOT_H + 18.0,
                row.estimator.name()
            );
        }
        body.push_str("</g>\n");
        x0 += width;
    }
    let height = TOP + PLOT_H + BOTTOM;
    Ok(format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{x0:.2}\" height=\"{height:.2}\" viewBox=\"0 0 {x0:.2} {height:.2}\">\n\
         <rect x=\"0\" y=\"0\" width=\"{x0:.2}\" height=\"{height:.2}\" fill=\"white\"/>\n{body}</svg>\n"
    ))
}
