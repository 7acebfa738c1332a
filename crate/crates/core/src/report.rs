//! Per-case metric tables, cohort summaries and boxplot figures.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{summarize, CaseMetrics, SummaryStats};

/// One row of a metrics table; `None` marks a value that is undefined or was
/// not evaluated (organ-only runs leave the tumor columns empty).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub dataset: String,
    pub case_id: String,
    pub dsc_organ: Option<f64>,
    pub dsc_tumor: Option<f64>,
    pub haus95_organ: Option<f64>,
    pub haus95_tumor: Option<f64>,
}

impl MetricsRow {
    pub fn from_case(dataset: &str, m: &CaseMetrics) -> Self {
        MetricsRow {
            dataset: dataset.to_string(),
            case_id: m.case_id.clone(),
            dsc_organ: Some(m.dsc_organ),
            dsc_tumor: Some(m.dsc_tumor),
            haus95_organ: m.haus95_organ,
            haus95_tumor: m.haus95_tumor,
        }
    }

    /// Organ columns only.
    pub fn organ_only(dataset: &str, case_id: &str, dsc: f64, haus95: Option<f64>) -> Self {
        MetricsRow {
            dataset: dataset.to_string(),
            case_id: case_id.to_string(),
            dsc_organ: Some(dsc),
            dsc_tumor: None,
            haus95_organ: haus95,
            haus95_tumor: None,
        }
    }
}

const COLUMNS: [&str; 6] = ["dataset", "case_id", "dsc_organ", "dsc_tumor", "haus95_organ", "haus95_tumor"];

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Tab-separated, one row per case; missing values are written as `NA`.
pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let mut s = COLUMNS.join("\t");
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.dataset,
            r.case_id,
            na(r.dsc_organ),
            na(r.dsc_tumor),
            na(r.haus95_organ),
            na(r.haus95_tumor)
        );
    }
    s
}

pub fn write_metrics_table(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, metrics_table(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_table(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != COLUMNS {
        return Err(Error::Config(format!(
            "{}: expected columns {:?}, found {:?}",
            path.display(),
            COLUMNS,
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |field: &str, v: &str| {
            Error::Config(format!("{} row {}: bad {field} value {v:?}", path.display(), line + 2))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            match &rec[i] {
                "NA" => Ok(None),
                v => match v.parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(Some(x)),
                    _ => Err(bad(COLUMNS[i], v)),
                },
            }
        };
        rows.push(MetricsRow {
            dataset: rec[0].to_string(),
            case_id: rec[1].to_string(),
            dsc_organ: opt(2)?,
            dsc_tumor: opt(3)?,
            haus95_organ: opt(4)?,
            haus95_tumor: opt(5)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!("{}: metrics table has no case rows", path.display())));
    }
    Ok(rows)
}

/// Statistics for one class over the cases where each value is defined.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassSummary {
    pub dsc: Option<SummaryStats>,
    pub dsc_missing: usize,
    pub haus95: Option<SummaryStats>,
    pub haus95_undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub dataset: String,
    pub organ: ClassSummary,
    pub tumor: ClassSummary,
}

fn defined_stats(values: &[Option<f64>]) -> Result<(Option<SummaryStats>, usize)> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let stats = if defined.is_empty() { None } else { Some(summarize(&defined)?) };
    Ok((stats, values.len() - defined.len()))
}

fn class_summary(dsc: &[Option<f64>], haus: &[Option<f64>]) -> Result<ClassSummary> {
    let (dsc, dsc_missing) = defined_stats(dsc)?;
    let (haus95, haus95_undefined) = defined_stats(haus)?;
    Ok(ClassSummary {
        dsc,
        dsc_missing,
        haus95,
        haus95_undefined,
    })
}

/// Per-dataset summaries in order of first appearance.
pub fn summarize_rows(rows: &[MetricsRow]) -> Result<Vec<DatasetSummary>> {
    if rows.is_empty() {
        return Err(Error::Empty("no case rows to summarize".into()));
    }
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.dataset.as_str()) {
            names.push(&r.dataset);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let sel: Vec<&MetricsRow> = rows.iter().filter(|r| r.dataset == name).collect();
            let col = |f: fn(&MetricsRow) -> Option<f64>| sel.iter().map(|r| f(r)).collect::<Vec<_>>();
            Ok(DatasetSummary {
                dataset: name.to_string(),
                organ: class_summary(&col(|r| r.dsc_organ), &col(|r| r.haus95_organ))?,
                tumor: class_summary(&col(|r| r.dsc_tumor), &col(|r| r.haus95_tumor))?,
            })
        })
        .collect()
}

/// Means and standard deviations per dataset and class: DSC in percent,
/// Haus95 in mm. With several datasets, a trailing block gives each one's
/// mean DSC difference from the first.
pub fn summary_table(summaries: &[DatasetSummary]) -> String {
    let mut s = String::from("Dataset\tDSC mean\tDSC std\tHaus95 mean\tHaus95 std\tHaus95 undefined\n");
    let pair = |st: &Option<SummaryStats>, scale: f64, unit: &str| match st {
        Some(h) => (format!("{:.2}{unit}", scale * h.mean), format!("{:.2}{unit}", scale * h.std)),
        None => ("NA".to_string(), "NA".to_string()),
    };
    for d in summaries {
        let _ = writeln!(s, "{}\t\t\t\t\t", d.dataset);
        for (name, c) in [("Organ", &d.organ), ("Tumor", &d.tumor)] {
            let (dm, ds) = pair(&c.dsc, 100.0, "%");
            let (hm, hs) = pair(&c.haus95, 1.0, " mm");
            let _ = writeln!(s, "{name}\t{dm}\t{ds}\t{hm}\t{hs}\t{}", c.haus95_undefined);
        }
    }
    if let [base, rest @ ..] = summaries {
        if !rest.is_empty() {
            let _ = writeln!(s, "\nDSC mean delta vs {}\tOrgan\tTumor", base.dataset);
            let delta = |a: &ClassSummary, b: &ClassSummary| match (&a.dsc, &b.dsc) {
                (Some(a), Some(b)) => format!("{:+.2}%", 100.0 * (a.mean - b.mean)),
                _ => "NA".to_string(),
            };
            for d in rest {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}",
                    d.dataset,
                    delta(&d.organ, &base.organ),
                    delta(&d.tumor, &base.tumor)
                );
            }
        }
    }
    s
}

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 48.0;

struct Panel<'a> {
    title: &'static str,
    unit: &'static str,
    boxes: Vec<(&'a str, Option<&'a SummaryStats>)>,
}

fn panel_range(p: &Panel<'_>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in p.boxes.iter().filter_map(|b| b.1) {
        let min = s.outliers.first().copied().unwrap_or(s.whisker_low).min(s.whisker_low);
        let max = s.outliers.last().copied().unwrap_or(s.whisker_high).max(s.whisker_high);
        lo = lo.min(min);
        hi = hi.max(max);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn draw_panel(svg: &mut String, p: &Panel<'_>, ox: f64, oy: f64) {
    let (lo, hi) = panel_range(p);
    let plot_h = PANEL_H - 2.0 * MARGIN;
    let plot_w = PANEL_W - 2.0 * MARGIN;
    let y = |v: f64| oy + MARGIN + plot_h * (1.0 - (v - lo) / (hi - lo));
    let _ = writeln!(svg, r#"<g class="panel" data-title="{}">"#, p.title);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{} ({})</text>"#,
        ox + PANEL_W / 2.0,
        oy + 20.0,
        p.title,
        p.unit
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#,
        oy + MARGIN,
        oy + MARGIN + plot_h,
        x = ox + MARGIN
    );
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{:.3}</text>"#,
            ox + MARGIN - 4.0,
            y(v) + 3.0,
            v
        );
    }
    let slot = plot_w / p.boxes.len().max(1) as f64;
    for (i, (name, stats)) in p.boxes.iter().enumerate() {
        let cx = ox + MARGIN + slot * (i as f64 + 0.5);
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="11">{name}</text>"#,
            oy + PANEL_H - MARGIN + 16.0
        );
        let Some(s) = stats else {
            let _ = writeln!(svg, r#"<g class="box" data-dataset="{name}" data-n="0"></g>"#);
            continue;
        };
        let half = (slot * 0.25).min(30.0);
        let outliers: Vec<String> = s.outliers.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            svg,
            r#"<g class="box" data-dataset="{name}" data-n="{}" data-mean="{}" data-std="{}" data-median="{}" data-q1="{}" data-q3="{}" data-whisker-low="{}" data-whisker-high="{}" data-outliers="{}">"#,
            s.n,
            s.mean,
            s.std,
            s.median,
            s.q1,
            s.q3,
            s.whisker_low,
            s.whisker_high,
            outliers.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{cx:.1}" y1="{:.2}" x2="{cx:.1}" y2="{:.2}" stroke="black"/>"#,
            y(s.whisker_high),
            y(s.whisker_low)
        );
        for w in [s.whisker_low, s.whisker_high] {
            let _ = writeln!(
                svg,
                r#"<line x1="{:.1}" y1="{yw:.2}" x2="{:.1}" y2="{yw:.2}" stroke="black"/>"#,
                cx - half / 2.0,
                cx + half / 2.0,
                yw = y(w)
            );
        }
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{:.2}" width="{:.1}" height="{:.2}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            y(s.q3),
            2.0 * half,
            (y(s.q1) - y(s.q3)).max(0.0)
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{ym:.2}" x2="{:.1}" y2="{ym:.2}" stroke="#d62728" stroke-width="2"/>"##,
            cx - half,
            cx + half,
            ym = y(s.median)
        );
        for v in &s.outliers {
            let _ = writeln!(
                svg,
                r#"<circle cx="{cx:.1}" cy="{:.2}" r="3" fill="none" stroke="black"/>"#,
                y(*v)
            );
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</g>\n");
}

/// Four panels (DSC and Haus95 for organ and tumor), one box per dataset.
/// Each box carries its exact statistics as `data-*` attributes.
pub fn boxplot_svg(summaries: &[DatasetSummary]) -> String {
    let boxes = |f: fn(&DatasetSummary) -> Option<&SummaryStats>| {
        summaries.iter().map(|d| (d.dataset.as_str(), f(d))).collect::<Vec<_>>()
    };
    let panels = [
        Panel {
            title: "Organ DSC",
            unit: "fraction",
            boxes: boxes(|d| d.organ.dsc.as_ref()),
        },
        Panel {
            title: "Tumor DSC",
            unit: "fraction",
            boxes: boxes(|d| d.tumor.dsc.as_ref()),
        },
        Panel {
            title: "Organ Haus95",
            unit: "mm",
            boxes: boxes(|d| d.organ.haus95.as_ref()),
        },
        Panel {
            title: "Tumor Haus95",
            unit: "mm",
            boxes: boxes(|d| d.tumor.haus95.as_ref()),
        },
    ];
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = 2.0 * PANEL_W,
        h = 2.0 * PANEL_H
    );
    svg.push('\n');
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut svg, p, PANEL_W * (i % 2) as f64, PANEL_H * (i / 2) as f64);
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(ds: &str, id: &str, d: (f64, f64), h: (Option<f64>, Option<f64>)) -> MetricsRow {
        let m = CaseMetrics {
            case_id: id.into(),
            dsc_organ: d.0,
            dsc_tumor: d.1,
            haus95_organ: h.0,
            haus95_tumor: h.1,
        };
        MetricsRow::from_case(ds, &m)
    }

    #[test]
    fn table_round_trip_with_na() {
        let rows = vec![
            row("phantom", "a", (0.9, 0.0), (Some(3.5), None)),
            row("phantom", "b", (0.1 + 0.2, 0.75), (Some(1.0 / 3.0), Some(2.0))),
            MetricsRow::organ_only("stage1", "c", 0.5, None),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        write_metrics_table(&p, &rows).unwrap();
        assert_eq!(read_metrics_table(&p).unwrap(), rows);
        std::fs::write(&p, COLUMNS.join("\t") + "\n").unwrap();
        assert!(matches!(read_metrics_table(&p), Err(Error::Empty(_))));
    }

    #[test]
    fn single_case_is_degenerate() {
        let s = summarize_rows(&[row("x", "a", (0.8, 0.7), (Some(4.0), Some(2.0)))]).unwrap();
        let d = s[0].organ.dsc.as_ref().unwrap();
        assert_eq!(d.std, 0.0);
        assert_eq!(d.q1, d.q3);
        let svg = boxplot_svg(&s);
        assert!(svg.contains(r#"height="0.00""#));
    }

    #[test]
    fn figure_numbers_equal_summaries() {
        let rows: Vec<MetricsRow> = [0.91, 0.72, 0.88, 0.95, 0.3]
            .iter()
            .enumerate()
            .map(|(i, &d)| row("phantom", &format!("c{i}"), (d, d / 2.0), (Some(d * 10.0), None)))
            .collect();
        let s = summarize_rows(&rows).unwrap();
        let expect = summarize(&[0.91, 0.72, 0.88, 0.95, 0.3]).unwrap();
        assert_eq!(s[0].organ.dsc.as_ref(), Some(&expect));
        assert_eq!(s[0].tumor.haus95_undefined, 5);
        let svg = boxplot_svg(&s);
        let organ_box = svg
            .split(r#"data-title="Organ DSC""#)
            .nth(1)
            .and_then(|t| t.split(r#"<g class="box""#).nth(1))
            .unwrap();
        let attr = |name: &str| -> f64 {
            let key = format!(r#"data-{name}=""#);
            let rest = &organ_box[organ_box.find(&key).unwrap() + key.len()..];
            rest[..rest.find('"').unwrap()].parse().unwrap()
        };
        assert_eq!(attr("median"), expect.median);
        assert_eq!(attr("q1"), expect.q1);
        assert_eq!(attr("q3"), expect.q3);
        assert_eq!(attr("whisker-low"), expect.whisker_low);
        assert_eq!(attr("mean"), expect.mean);
        assert_eq!(svg.matches(r#"class="panel""#).count(), 4);
    }

    #[test]
    fn summary_layout_has_dataset_then_class_rows() {
        let rows = vec![
            row("MDACC", "a", (0.8, 0.7), (Some(4.0), Some(2.0))),
            row("MDACC", "b", (0.9, 0.6), (Some(6.0), None)),
            row("TCIA", "c", (0.9, 0.5), (Some(1.0), Some(1.0))),
        ];
        let t = summary_table(&summarize_rows(&rows).unwrap());
        let first: Vec<&str> = t
            .lines()
            .take_while(|l| !l.is_empty())
            .map(|l| l.split('\t').next().unwrap())
            .collect();
        assert_eq!(first, vec!["Dataset", "MDACC", "Organ", "Tumor", "TCIA", "Organ", "Tumor"]);
        assert!(t.contains("Organ\t85.00%\t7.07%\t5.00 mm\t1.41 mm\t0"));
        assert!(t.contains("TCIA\t+5.00%\t-15.00%"));
    }

    #[test]
    fn organ_only_rows_leave_tumor_undefined() {
        let rows = vec![
            MetricsRow::organ_only("default", "a", 0.9, Some(2.0)),
            MetricsRow::organ_only("customized", "a", 0.95, Some(1.0)),
        ];
        let s = summarize_rows(&rows).unwrap();
        assert!(s[0].tumor.dsc.is_none());
        assert_eq!(s[0].tumor.dsc_missing, 1);
        let t = summary_table(&s);
        assert!(t.contains("Tumor\tNA\tNA\tNA\tNA\t1"));
        assert!(t.contains("customized\t+5.00%\tNA"));
    }
}
