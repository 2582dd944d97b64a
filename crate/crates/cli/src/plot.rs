use std::fmt::Write;

use dcr_core::training::Record;

/// `(step, value)` pairs of one panel.
pub type Series = Vec<(usize, f64)>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConflictSeries {
    pub l_con: Series,
    pub l_rec: Series,
    pub grad_cos: Series,
}

impl ConflictSeries {
    /// Collects the per-step values that are present; logs without the naive
    /// baseline's columns give empty series.
    pub fn from_records(records: &[Record]) -> Self {
        let mut out = Self::default();
        for r in records {
            if let Record::Step(s) = r {
                if let Some(v) = s.l_con {
                    out.l_con.push((s.step, v));
                }
                if let Some(v) = s.l_rec {
                    out.l_rec.push((s.step, v));
                }
                if let Some(v) = s.grad_cos {
                    out.grad_cos.push((s.step, v));
                }
            }
        }
        out
    }

    pub fn panels(&self) -> [(&'static str, &Series); 3] {
        [("l_con", &self.l_con), ("l_rec", &self.l_rec), ("grad_cos", &self.grad_cos)]
    }
}

/// Tab-separated `step value` lines; empty for an empty series.
pub fn series_tsv(series: &Series) -> String {
    let mut s = String::new();
    for (step, v) in series {
        writeln!(s, "{step}\t{v}").unwrap();
    }
    s
}

const WIDTH: f64 = 720.0;
const PANEL_H: f64 = 200.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 30.0;

fn panel(svg: &mut String, top: f64, title: &str, series: &Series, fixed: Option<(f64, f64)>, color: &str) {
    let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (y0, y1) = (top + MARGIN_T, top + PANEL_H - MARGIN_B);
    writeln!(svg, r##"<text x="{x0}" y="{}" font-size="13">{title}</text>"##, top + 18.0).unwrap();
    writeln!(
        svg,
        r##"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        x1 - x0,
        y1 - y0
    )
    .unwrap();
    if series.is_empty() {
        writeln!(svg, r##"<text x="{}" y="{}" font-size="12" fill="#888">no data</text>"##, x0 + 10.0, y0 + 20.0).unwrap();
        return;
    }
    let (smin, smax) = (series[0].0 as f64, series[series.len() - 1].0 as f64);
    let (mut lo, mut hi) = fixed.unwrap_or_else(|| {
        series
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, v)| (a.min(v), b.max(v)))
    });
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let sx = |s: f64| if smax > smin { x0 + (s - smin) / (smax - smin) * (x1 - x0) } else { (x0 + x1) / 2.0 };
    let sy = |v: f64| y1 - (v - lo) / (hi - lo) * (y1 - y0);
    if lo < 0.0 && hi > 0.0 {
        let z = sy(0.0);
        writeln!(svg, r##"<line x1="{x0}" y1="{z:.2}" x2="{x1}" y2="{z:.2}" stroke="#bbb" stroke-dasharray="4 3"/>"##).unwrap();
    }
    for (v, y) in [(hi, y0), (lo, y1)] {
        writeln!(svg, r##"<text x="{}" y="{:.2}" font-size="11" text-anchor="end">{v:.4}</text>"##, x0 - 6.0, y + 4.0).unwrap();
    }
    for (s, anchor) in [(smin, "start"), (smax, "end")] {
        writeln!(svg, r##"<text x="{:.2}" y="{}" font-size="11" text-anchor="{anchor}">{s}</text>"##, sx(s), y1 + 16.0).unwrap();
    }
    let pts: Vec<String> = series.iter().map(|&(s, v)| format!("{:.2},{:.2}", sx(s as f64), sy(v))).collect();
    writeln!(
        svg,
        r##"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"##,
        pts.join(" ")
    )
    .unwrap();
}

/// One SVG with a panel per series, stacked; the cosine panel spans [-1, 1].
pub fn render_svg(series: &ConflictSeries) -> String {
    let height = 3.0 * PANEL_H;
    let mut svg = String::new();
    writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"##
    )
    .unwrap();
    writeln!(svg, r##"<rect width="100%" height="100%" fill="white"/>"##).unwrap();
    panel(&mut svg, 0.0, "contrastive loss L_con", &series.l_con, None, "#1f77b4");
    panel(&mut svg, PANEL_H, "reconstruction loss L_rec", &series.l_rec, None, "#d62728");
    panel(&mut svg, 2.0 * PANEL_H, "cos(g_con, g_rec)", &series.grad_cos, Some((-1.0, 1.0)), "#2ca02c");
    svg.push_str("</svg>\n");
    svg
}
