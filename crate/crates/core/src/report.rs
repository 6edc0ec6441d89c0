//! Self-contained SVG grouped bar charts built from result CSVs.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    /// One value per category; `None` leaves a gap.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub x_label: String,
    pub categories: Vec<String>,
    pub series: Vec<Series>,
}

fn numeric(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads one CSV table. The category column is `x`, or else the first
/// column holding any non-numeric cell, or else the first column. Value
/// columns are `y`, or else every column whose name contains `accuracy`,
/// or else every other fully numeric column. Empty cells become gaps.
pub fn chart_from_csv(title: &str, text: &str, x: Option<&str>, y: &[&str]) -> Result<BarChart> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let rows: Vec<Vec<String>> = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(Error::format(format!("{title}: no data rows")));
    }
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(format!("{title}: no column `{name}`")))
    };
    let all_numeric = |c: usize| rows.iter().all(|r| r[c].trim().is_empty() || numeric(&r[c]).is_some());
    let xc = match x {
        Some(name) => col(name)?,
        None => (0..header.len()).find(|&c| !all_numeric(c)).unwrap_or(0),
    };
    let ys: Vec<usize> = if !y.is_empty() {
        y.iter().map(|n| col(n)).collect::<Result<_>>()?
    } else {
        let acc: Vec<usize> = (0..header.len())
            .filter(|&c| c != xc && header[c].contains("accuracy") && all_numeric(c))
            .collect();
        if acc.is_empty() {
            (0..header.len()).filter(|&c| c != xc && all_numeric(c)).collect()
        } else {
            acc
        }
    };
    if ys.is_empty() {
        return Err(Error::format(format!("{title}: no numeric value column")));
    }
    let mut series = Vec::with_capacity(ys.len());
    for &c in &ys {
        let values = rows
            .iter()
            .map(|r| {
                let cell = r[c].trim();
                if cell.is_empty() {
                    Ok(None)
                } else {
                    numeric(cell)
                        .map(Some)
                        .ok_or_else(|| Error::format(format!("{title}: `{cell}` in column `{}` is not a number", header[c])))
                }
            })
            .collect::<Result<_>>()?;
        series.push(Series {
            name: header[c].clone(),
            values,
        });
    }
    Ok(BarChart {
        title: title.to_string(),
        x_label: header[xc].clone(),
        categories: rows.iter().map(|r| r[xc].clone()).collect(),
        series,
    })
}

/// Merges charts into one: categories are unioned in first-seen order and
/// series names are prefixed with their chart title when several charts
/// contribute.
pub fn merge(title: &str, charts: Vec<BarChart>) -> Result<BarChart> {
    let first = charts.first().ok_or_else(|| Error::invalid("no charts to merge"))?;
    let x_label = first.x_label.clone();
    if charts.len() == 1 {
        let mut only = charts.into_iter().next().expect("one chart");
        only.title = title.to_string();
        return Ok(only);
    }
    let mut categories: Vec<String> = Vec::new();
    for c in &charts {
        for k in &c.categories {
            if !categories.contains(k) {
                categories.push(k.clone());
            }
        }
    }
    let mut series = Vec::new();
    for c in &charts {
        for s in &c.series {
            let values = categories
                .iter()
                .map(|k| c.categories.iter().position(|x| x == k).and_then(|i| s.values[i]))
                .collect();
            series.push(Series {
                name: format!("{}: {}", c.title, s.name),
                values,
            });
        }
    }
    Ok(BarChart {
        title: title.to_string(),
        x_label,
        categories,
        series,
    })
}

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// "Nice" axis maximum: 1, 2, 2.5 or 5 times a power of ten.
fn axis_max(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let p = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * p).find(|&m| m >= v).unwrap_or(10.0 * p)
}

/// Renders the chart. Output depends only on the chart contents.
pub fn render_svg(chart: &BarChart) -> String {
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 70.0);
    let group_w = 18.0 * chart.series.len() as f64 + 16.0;
    let plot_w = (group_w * chart.categories.len() as f64).max(200.0);
    let plot_h = 260.0;
    let legend_h = 18.0 * chart.series.len() as f64;
    let width = left + plot_w + right;
    let height = top + plot_h + bottom + legend_h;
    let lo = chart
        .series
        .iter()
        .flat_map(|s| s.values.iter().flatten())
        .fold(0.0f64, |a, &v| a.min(v));
    let hi = chart
        .series
        .iter()
        .flat_map(|s| s.values.iter().flatten())
        .fold(0.0f64, |a, &v| a.max(v));
    let y_max = axis_max(hi);
    let y_min = if lo < 0.0 { -axis_max(-lo) } else { 0.0 };
    let y = |v: f64| top + plot_h * (y_max - v) / (y_max - y_min);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(&chart.title)
    )
    .unwrap();
    for i in 0..=5 {
        let v = y_min + (y_max - y_min) * i as f64 / 5.0;
        let py = y(v);
        writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#dddddd"/>"##,
            left + plot_w
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py + 4.0,
            format_tick(v)
        )
        .unwrap();
    }
    for (ci, cat) in chart.categories.iter().enumerate() {
        let gx = left + group_w * ci as f64 + 8.0;
        for (si, series) in chart.series.iter().enumerate() {
            let Some(v) = series.values[ci] else { continue };
            let (y0, y1) = (y(v.max(0.0)), y(v.min(0.0)));
            writeln!(
                s,
                r#"<rect x="{:.1}" y="{y0:.1}" width="16.0" height="{:.1}" fill="{}"><title>{}: {}</title></rect>"#,
                gx + 18.0 * si as f64,
                y1 - y0,
                PALETTE[si % PALETTE.len()],
                escape(&series.name),
                format_tick(v)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + (group_w - 16.0) / 2.0,
            top + plot_h + 16.0,
            escape(cat)
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<line x1="{left:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#333333"/>"##,
        y(0.0),
        left + plot_w,
        y(0.0)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + plot_w / 2.0,
        top + plot_h + 36.0,
        escape(&chart.x_label)
    )
    .unwrap();
    for (si, series) in chart.series.iter().enumerate() {
        let ly = top + plot_h + bottom + 18.0 * si as f64 - 10.0;
        writeln!(
            s,
            r#"<rect x="{left:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            ly - 10.0,
            PALETTE[si % PALETTE.len()],
            left + 18.0,
            ly,
            escape(&series.name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    let t = format!("{v:.3}");
    let t = t.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" {
        "0".into()
    } else {
        t.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const WINDOWS: &str = "source,window,regions,val_accuracy,test_accuracy,note\n\
        a,2,121,0.300000,0.280000,\n\
        a,5,64,0.450000,0.430000,\n\
        a,13,0,,,skipped: window larger than neighborhood\n";

    #[test]
    fn picks_accuracy_columns_and_numeric_category() {
        let c = chart_from_csv("w", WINDOWS, Some("window"), &[]).unwrap();
        assert_eq!(c.categories, vec!["2", "5", "13"]);
        assert_eq!(c.series.len(), 2);
        assert_eq!(c.series[1].values, vec![Some(0.28), Some(0.43), None]);
        let auto = chart_from_csv("w", WINDOWS, None, &[]).unwrap();
        assert_eq!(auto.x_label, "source");
    }

    #[test]
    fn svg_is_deterministic_and_skips_gaps() {
        let c = chart_from_csv("w", WINDOWS, Some("window"), &[]).unwrap();
        let a = render_svg(&c);
        assert_eq!(a, render_svg(&c.clone()));
        assert!(a.starts_with("<svg"));
        assert_eq!(a.matches("<title>").count(), 4);
    }

    #[test]
    fn malformed_csv_rejected() {
        assert!(chart_from_csv("x", "a,b\n1\n", None, &[]).is_err());
        assert!(chart_from_csv("x", "a,b\n", None, &[]).is_err());
        assert!(chart_from_csv("x", "a,b\nq,zz\n", None, &["b"]).is_err());
        assert!(chart_from_csv("x", "a,b\n1,2\n", None, &["c"]).is_err());
    }

    #[test]
    fn merge_unions_categories() {
        let a = chart_from_csv("one", "m,acc\nx,0.5\ny,0.6\n", None, &[]).unwrap();
        let b = chart_from_csv("two", "m,acc\ny,0.7\nz,0.1\n", None, &[]).unwrap();
        let m = merge("both", vec![a, b]).unwrap();
        assert_eq!(m.categories, vec!["x", "y", "z"]);
        assert_eq!(m.series[1].name, "two: acc");
        assert_eq!(m.series[1].values, vec![None, Some(0.7), Some(0.1)]);
    }

    #[test]
    fn nice_axis() {
        assert_eq!(axis_max(0.43), 0.5);
        assert_eq!(axis_max(1.0), 1.0);
        assert_eq!(axis_max(1200.0), 2000.0);
    }
}
