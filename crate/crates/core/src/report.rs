//! Small self-contained SVG charts and CSV tables for reports.

use std::fmt::Write as _;

use crate::features::{FEATURE_NAMES, N_FEATURES};
use crate::model::GenerativeModel;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        esc(title)
    )
}

fn axes(s: &mut String) {
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - PAD,
        r = W - PAD
    );
}

/// Bar chart with one labelled bar per value.
pub fn bar_chart(title: &str, labels: &[&str], values: &[f64]) -> String {
    let mut s = header(title);
    axes(&mut s);
    let vmax = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let n = values.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let plot_h = H - 2.0 * PAD;
    for (i, (&v, l)) in values.iter().zip(labels).enumerate() {
        let h = (v.max(0.0) / vmax) * plot_h;
        let x = PAD + i as f64 * slot + slot * 0.15;
        let y = H - PAD - h;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"><title>{}: {v}</title></rect>",
            slot * 0.7,
            PALETTE[0],
            esc(l)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            x + slot * 0.35,
            H - PAD + 14.0,
            esc(l)
        );
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{v:.3}</text>", x + slot * 0.35, y - 3.0);
    }
    s.push_str("</svg>\n");
    s
}

/// One named series of `(x, y)` points.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Line chart; non-finite points are dropped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut s = header(title);
    axes(&mut s);
    let pts = series.iter().flat_map(|c| c.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        s.push_str("</svg>\n");
        return s;
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    for (i, c) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = c
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"{color}\">{}</text>",
            W - PAD + 4.0,
            PAD + 14.0 * i as f64,
            esc(c.name)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{:.2}\" text-anchor=\"middle\">{y1:.4}</text><text x=\"{PAD}\" y=\"{:.2}\" text-anchor=\"middle\">{y0:.4}</text>",
        PAD - 6.0,
        H - PAD + 14.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text><text x=\"14\" y=\"{:.2}\" transform=\"rotate(-90 14 {:.2})\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 12.0,
        esc(x_label),
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    s.push_str("</svg>\n");
    s
}

/// Grid of shaded cells with values; missing cells are left grey.
pub fn heatmap(title: &str, row_label: &str, col_label: &str, rows: &[String], cols: &[String], vals: &[Vec<Option<f64>>]) -> String {
    let mut s = header(title);
    let finite = vals.iter().flatten().flatten().copied();
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    let cw = (W - 2.0 * PAD) / cols.len().max(1) as f64;
    let ch = (H - 2.0 * PAD) / rows.len().max(1) as f64;
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            PAD - 4.0,
            PAD + (i as f64 + 0.5) * ch + 4.0,
            esc(r)
        );
        for (j, v) in vals.get(i).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
            let (fill, text) = match v {
                Some(v) => {
                    let t = (v - lo) / span;
                    let g = (255.0 - 180.0 * t).round() as u8;
                    (format!("rgb({g},{g},255)"), format!("{v:.3}"))
                }
                None => ("#dddddd".to_owned(), "n/a".to_owned()),
            };
            let x = PAD + j as f64 * cw;
            let y = PAD + i as f64 * ch;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{cw:.2}\" height=\"{ch:.2}\" fill=\"{fill}\" stroke=\"white\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{text}</text>",
                x + cw / 2.0,
                y + ch / 2.0 + 4.0
            );
        }
    }
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            PAD + (j as f64 + 0.5) * cw,
            H - PAD + 14.0,
            esc(c)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text><text x=\"14\" y=\"{:.2}\" transform=\"rotate(-90 14 {:.2})\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 12.0,
        esc(col_label),
        H / 2.0,
        H / 2.0,
        esc(row_label)
    );
    s.push_str("</svg>\n");
    s
}

/// `feature,name,contribution`
pub fn contributions_csv(model: &GenerativeModel) -> String {
    let c = model.projection().feature_contributions();
    let mut s = String::from("feature,name,contribution\n");
    for j in 0..N_FEATURES {
        let _ = writeln!(s, "f{},{},{}", j + 1, FEATURE_NAMES[j], c[j]);
    }
    s
}

pub fn contributions_svg(model: &GenerativeModel) -> String {
    let c = model.projection().feature_contributions();
    let labels: Vec<String> = (1..=N_FEATURES).map(|j| format!("f{j}")).collect();
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    bar_chart("Feature contributions", &refs, &c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let b = bar_chart("t<1>", &["a", "b"], &[1.0, 2.0]);
        assert!(b.starts_with("<svg") && b.ends_with("</svg>\n"));
        assert!(b.contains("t&lt;1&gt;"));
        let l = line_chart(
            "loss",
            "iter",
            "L",
            &[Series {
                name: "loss",
                points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 0.5)],
            }],
        );
        assert_eq!(l.matches("<polyline").count(), 1);
        let h = heatmap("acc", "Q", "M", &["4".into()], &["2".into(), "3".into()], &[vec![Some(0.5), None]]);
        assert!(h.contains("n/a"));
    }
}
