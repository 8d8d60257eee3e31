//! CSV tables and SVG line charts for a set of evaluation results.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::Method;
use crate::pipeline::MethodResult;

pub fn map_csv(results: &[MethodResult]) -> String {
    let mut s = String::from("method,bits,map\n");
    for r in results {
        let _ = writeln!(s, "{},{},{}", r.method, r.bits, r.report.map);
    }
    s
}

pub fn precision_at_n_csv(results: &[MethodResult]) -> String {
    let mut s = String::from("method,bits,n,precision\n");
    for r in results {
        for (n, p) in &r.report.precision_at {
            let _ = writeln!(s, "{},{},{n},{p}", r.method, r.bits);
        }
    }
    s
}

pub fn pr_curve_csv(results: &[MethodResult]) -> String {
    let mut s = String::from("method,bits,recall,precision\n");
    for r in results {
        for (rec, p) in &r.report.pr_points {
            let _ = writeln!(s, "{},{},{rec},{p}", r.method, r.bits);
        }
    }
    s
}

pub fn radius2_csv(results: &[MethodResult]) -> String {
    let mut s = String::from("method,bits,precision,empty_rate\n");
    for r in results {
        if let Some(rp) = r.report.radius2 {
            let _ = writeln!(s, "{},{},{},{}", r.method, r.bits, rp.precision, rp.empty_rate);
        }
    }
    s
}

/// MAP with one row per method and one column per code length.
pub fn map_table(results: &[MethodResult]) -> String {
    let bits: BTreeSet<usize> = results.iter().map(|r| r.bits).collect();
    let methods: BTreeSet<Method> = results.iter().map(|r| r.method).collect();
    let mut s = format!("{:<12}", "method");
    for b in &bits {
        let _ = write!(s, " {:>8}", format!("{b} bits"));
    }
    s.push('\n');
    for m in methods {
        let _ = write!(s, "{:<12}", m.name());
        for &b in &bits {
            match results.iter().find(|r| r.method == m && r.bits == b) {
                Some(r) => {
                    let _ = write!(s, " {:>8.4}", r.report.map);
                }
                None => {
                    let _ = write!(s, " {:>8}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Writes the four CSV tables, the MAP table and the SVG charts; returns
/// the written paths.
pub fn write_reports(results: &[MethodResult], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        files.push(p);
        Ok(())
    };
    put("map.csv", map_csv(results))?;
    put("precision_at_n.csv", precision_at_n_csv(results))?;
    put("pr_curve.csv", pr_curve_csv(results))?;
    put("radius2.csv", radius2_csv(results))?;
    put("map_table.txt", map_table(results))?;

    let methods: BTreeSet<Method> = results.iter().map(|r| r.method).collect();
    let bits: BTreeSet<usize> = results.iter().map(|r| r.bits).collect();
    let by_bits = |pick: &dyn Fn(&MethodResult) -> Option<f64>| -> Vec<Series> {
        methods
            .iter()
            .map(|&m| Series {
                name: m.name().to_string(),
                points: results
                    .iter()
                    .filter(|r| r.method == m)
                    .filter_map(|r| pick(r).map(|y| (r.bits as f64, y)))
                    .collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect()
    };
    let max_bits = bits.iter().max().copied().unwrap_or(64) as f64;
    put(
        "map.svg",
        line_chart(&Chart {
            title: "MAP of Hamming / Euclidean ranking".into(),
            x_label: "number of bits".into(),
            y_label: "MAP".into(),
            x_range: (0.0, max_bits),
            y_range: (0.0, 1.0),
            series: by_bits(&|r| Some(r.report.map)),
        }),
    )?;
    put(
        "radius2.svg",
        line_chart(&Chart {
            title: "Precision within Hamming radius 2".into(),
            x_label: "number of bits".into(),
            y_label: "precision".into(),
            x_range: (0.0, max_bits),
            y_range: (0.0, 1.0),
            series: by_bits(&|r| r.report.radius2.map(|p| p.precision)),
        }),
    )?;
    for &b in &bits {
        let at_bits: Vec<&MethodResult> = results.iter().filter(|r| r.bits == b).collect();
        let max_n = at_bits
            .iter()
            .flat_map(|r| r.report.precision_at.iter().map(|&(n, _)| n))
            .max()
            .unwrap_or(1) as f64;
        put(
            &format!("precision_at_n_{b}.svg"),
            line_chart(&Chart {
                title: format!("Precision vs. number retrieved ({b} bits)"),
                x_label: "number of retrieved samples".into(),
                y_label: "precision".into(),
                x_range: (0.0, max_n),
                y_range: (0.0, 1.0),
                series: at_bits
                    .iter()
                    .map(|r| Series {
                        name: r.method.name().into(),
                        points: r.report.precision_at.iter().map(|&(n, p)| (n as f64, p)).collect(),
                    })
                    .collect(),
            }),
        )?;
        put(
            &format!("pr_curve_{b}.svg"),
            line_chart(&Chart {
                title: format!("Precision-recall ({b} bits)"),
                x_label: "recall".into(),
                y_label: "precision".into(),
                x_range: (0.0, 1.0),
                y_range: (0.0, 1.0),
                series: at_bits
                    .iter()
                    .map(|r| Series {
                        name: r.method.name().into(),
                        points: r.report.pr_points.clone(),
                    })
                    .collect(),
            }),
        )?;
    }
    Ok(files)
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub series: Vec<Series>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn line_chart(c: &Chart) -> String {
    let (w, h) = (640.0, 440.0);
    let (left, right, top, bottom) = (64.0, 160.0, 40.0, 56.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - c.x_range.0) / (c.x_range.1 - c.x_range.0).max(f64::MIN_POSITIVE) * pw;
    let sy = |y: f64| top + ph - (y - c.y_range.0) / (c.y_range.1 - c.y_range.0).max(f64::MIN_POSITIVE) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(&c.title)
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let xv = c.x_range.0 + f * (c.x_range.1 - c.x_range.0);
        let yv = c.y_range.0 + f * (c.y_range.1 - c.y_range.0);
        let (x, y) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{top}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            top + ph,
            top + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 16.0,
        escape(&c.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + ph / 2.0,
        escape(&c.y_label)
    );
    for (i, series) in c.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = series
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        if series.points.len() <= 20 {
            for &(x, y) in &series.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
            }
        }
        let ly = top + 12.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}
