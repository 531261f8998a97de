//! Hand-rolled SVG line plot for loss curves: training curves dashed,
//! validation curves solid, one color per variant.

use std::fmt::Write as _;

use catformer::train::MetricsRow;
use catformer::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 64.0;
// The right margin hosts the legend.
const RIGHT: f64 = 180.0;
const TOP: f64 = 28.0;
const BOTTOM: f64 = 52.0;

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

struct Series {
    color: &'static str,
    dashed: bool,
    points: Vec<(f64, f64)>,
}

struct LegendEntry {
    label: String,
    color: &'static str,
    dashed: bool,
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Largest of 1, 2, 5 times a power of ten that still fits ~5 intervals.
fn nice_step(range: f64) -> f64 {
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let n = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    n * mag
}

fn tick_label(v: f64, step: f64) -> String {
    if step >= 1.0 {
        format!("{v:.0}")
    } else if step >= 0.1 {
        format!("{v:.1}")
    } else if step >= 0.01 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

pub fn render_curves(rows: &[MetricsRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Input("no metrics rows to plot".into()));
    }

    // Variants in order of first appearance pick their palette slot.
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }

    let mut series: Vec<Series> = Vec::new();
    let mut legend: Vec<LegendEntry> = Vec::new();
    for (vi, &variant) in variants.iter().enumerate() {
        let color = PALETTE[vi % PALETTE.len()];
        let mut trials: Vec<usize> = rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.trial)
            .collect();
        trials.sort_unstable();
        trials.dedup();

        let mut any_val = false;
        for &t in &trials {
            let mut per: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.variant == variant && r.trial == t)
                .collect();
            per.sort_by_key(|r| r.epoch);
            let train: Vec<(f64, f64)> = per
                .iter()
                .filter(|r| r.train_loss.is_finite())
                .map(|r| (r.epoch as f64, r.train_loss))
                .collect();
            let val: Vec<(f64, f64)> = per
                .iter()
                .filter(|r| r.val_loss.is_finite())
                .map(|r| (r.epoch as f64, r.val_loss))
                .collect();
            if !train.is_empty() {
                series.push(Series {
                    color,
                    dashed: true,
                    points: train,
                });
            }
            if !val.is_empty() {
                any_val = true;
                series.push(Series {
                    color,
                    dashed: false,
                    points: val,
                });
            }
        }
        legend.push(LegendEntry {
            label: format!("{variant} train"),
            color,
            dashed: true,
        });
        if any_val {
            legend.push(LegendEntry {
                label: format!("{variant} val"),
                color,
                dashed: false,
            });
        }
    }
    if series.is_empty() {
        return Err(Error::Input("no finite loss values to plot".into()));
    }

    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y0 == y1 {
        y0 -= 0.5;
        y1 += 0.5;
    } else {
        let pad = 0.05 * (y1 - y0);
        y0 -= pad;
        y1 += pad;
    }
    let sx = move |e: f64| LEFT + (e - x0) / (x1 - x0) * (WIDTH - LEFT - RIGHT);
    let sy = move |l: f64| HEIGHT - BOTTOM - (l - y0) / (y1 - y0) * (HEIGHT - TOP - BOTTOM);

    let mut out = String::with_capacity(8 * 1024);
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"Helvetica, Arial, sans-serif\">"
    );
    let _ = writeln!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");

    // Horizontal gridlines and y tick labels.
    let ystep = nice_step(y1 - y0);
    let mut tick = (y0 / ystep).ceil() * ystep;
    while tick <= y1 + 1e-12 {
        let y = sy(tick);
        let _ = writeln!(
            out,
            "<line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#e0e0e0\"/>",
            WIDTH - RIGHT
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\" \
             fill=\"#333\">{}</text>",
            LEFT - 8.0,
            y + 4.0,
            tick_label(tick, ystep)
        );
        tick += ystep;
    }

    // Integer epoch ticks.
    let xstep = ((x1 - x0) / 6.0).ceil().max(1.0) as usize;
    let mut e = x0.ceil() as usize;
    while (e as f64) <= x1 {
        let x = sx(e as f64);
        let _ = writeln!(
            out,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>",
            HEIGHT - BOTTOM,
            HEIGHT - BOTTOM + 5.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" \
             fill=\"#333\">{e}</text>",
            HEIGHT - BOTTOM + 20.0
        );
        e += xstep;
    }

    // Axes and titles.
    let _ = writeln!(
        out,
        "<line x1=\"{LEFT}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>",
        HEIGHT - BOTTOM,
        WIDTH - RIGHT,
        HEIGHT - BOTTOM
    );
    let _ = writeln!(
        out,
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{:.1}\" stroke=\"#333\"/>",
        HEIGHT - BOTTOM
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" \
         fill=\"#333\">epoch</text>",
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 14.0
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" fill=\"#333\" \
         transform=\"rotate(-90 16 {:.1})\">loss</text>",
        (TOP + HEIGHT - BOTTOM) / 2.0,
        (TOP + HEIGHT - BOTTOM) / 2.0
    );

    // Curves.
    for s in &series {
        let dash = if s.dashed {
            " stroke-dasharray=\"6 3\""
        } else {
            ""
        };
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.6\" \
             stroke-opacity=\"0.9\"{dash} points=\"{}\"/>",
            s.color,
            pts.join(" ")
        );
        if s.points.len() <= 40 {
            for &(x, y) in &s.points {
                let _ = writeln!(
                    out,
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.2\" fill=\"{}\"/>",
                    sx(x),
                    sy(y),
                    s.color
                );
            }
        }
    }

    // Legend.
    let lx = WIDTH - RIGHT + 18.0;
    for (i, entry) in legend.iter().enumerate() {
        let ly = TOP + 14.0 + 22.0 * i as f64;
        let dash = if entry.dashed {
            " stroke-dasharray=\"6 3\""
        } else {
            ""
        };
        let _ = writeln!(
            out,
            "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
             stroke=\"{}\" stroke-width=\"1.6\"{dash}/>",
            lx + 26.0,
            entry.color
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"#333\">{}</text>",
            lx + 32.0,
            ly + 4.0,
            xml_escape(&entry.label)
        );
    }

    out.push_str("</svg>\n");
    Ok(out)
}
