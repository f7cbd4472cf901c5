//! Deterministic SVG emitters: line charts, grouped bars, heatmaps and
//! labelled scatter plots. Numbers are printed with fixed precision and no
//! timestamps are written, so equal inputs give byte-identical files.

use std::fmt::Write as _;

use crate::error::{contract, Result};
use crate::llspace::Projection;
use crate::mixopt::{pairwise_jsd, DomainJacobianGram, DomainWeights, WeightTrajectory};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64, title: &str) -> Self {
        let mut s = Svg {
            body: String::new(),
            width,
            height,
        };
        s.text(width / 2.0, 22.0, title, "middle", 15);
        s
    }

    fn text(&mut self, x: f64, y: f64, t: &str, anchor: &str, size: u32) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" text-anchor="{anchor}">{}</text>"#,
            esc(t)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}"/>"#
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Linear map from a data range onto a pixel range; a degenerate range is
/// widened so single values still land mid-axis.
fn scale(lo: f64, hi: f64, p0: f64, p1: f64) -> impl Fn(f64) -> f64 {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    move |v| p0 + (v - lo) / (hi - lo) * (p1 - p0)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

fn axes(svg: &mut Svg, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    svg.line(x0, y0, x1, y0, "black");
    svg.line(x0, y0, x0, y1, "black");
    let sx = scale(x.0, x.1, x0, x1);
    let sy = scale(y.0, y.1, y0, y1);
    for i in 0..=4 {
        let xv = x.0 + (x.1 - x.0) * i as f64 / 4.0;
        let yv = y.0 + (y.1 - y.0) * i as f64 / 4.0;
        svg.line(sx(xv), y0, sx(xv), y0 + 4.0, "black");
        svg.text(sx(xv), y0 + 17.0, &tick(xv), "middle", 11);
        svg.line(x0 - 4.0, sy(yv), x0, sy(yv), "black");
        svg.text(x0 - 7.0, sy(yv) + 4.0, &tick(yv), "end", 11);
    }
    svg.text((x0 + x1) / 2.0, H - 12.0, xlabel, "middle", 12);
    let _ = writeln!(
        svg.body,
        r#"<text x="16" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(svg: &mut Svg, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 14.0 + 18.0 * i as f64;
        svg.rect(W - RIGHT + 12.0, y - 9.0, 12.0, 10.0, color(i));
        svg.text(W - RIGHT + 30.0, y, n, "start", 11);
    }
}

/// One polyline per named series of `(x, y)` points.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<String> {
    let pts = || series.iter().flat_map(|(_, s)| s.iter());
    if pts().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return contract("line chart points must be finite");
    }
    if pts().next().is_none() {
        return contract("line chart needs at least one point");
    }
    let xr = bounds(pts().map(|p| p.0));
    let yr = bounds(pts().map(|p| p.1).chain([0.0]));
    let mut svg = Svg::new(W, H, title);
    axes(&mut svg, xr, yr, xlabel, ylabel);
    let sx = scale(xr.0, xr.1, LEFT, W - RIGHT);
    let sy = scale(yr.0, yr.1, H - BOTTOM, TOP);
    for (i, (_, s)) in series.iter().enumerate() {
        let path: Vec<String> = s.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg.body,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.8" points="{}"/>"#,
            color(i),
            path.join(" ")
        );
    }
    legend(&mut svg, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    Ok(svg.finish())
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, ylabel: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> Result<String> {
    if categories.is_empty() || series.is_empty() {
        return contract("bar chart needs at least one category and one series");
    }
    if let Some((n, _)) = series.iter().find(|(_, v)| v.len() != categories.len()) {
        return contract(format!("series {n:?} does not have one value per category"));
    }
    if series.iter().flat_map(|(_, v)| v).any(|v| !v.is_finite()) {
        return contract("bar values must be finite");
    }
    let yr = bounds(series.iter().flat_map(|(_, v)| v.iter().copied()).chain([0.0]));
    let mut svg = Svg::new(W, H, title);
    axes(&mut svg, (0.0, 1.0), yr, "", ylabel);
    let sy = scale(yr.0, yr.1, H - BOTTOM, TOP);
    let group = (W - RIGHT - LEFT) / categories.len() as f64;
    let bar = group * 0.8 / series.len() as f64;
    for (c, cat) in categories.iter().enumerate() {
        let gx = LEFT + group * c as f64 + group * 0.1;
        for (s, (_, v)) in series.iter().enumerate() {
            let (top, bottom) = (sy(v[c].max(0.0)), sy(v[c].min(0.0)));
            svg.rect(gx + bar * s as f64, top, bar * 0.9, bottom - top, color(s));
        }
        svg.text(LEFT + group * (c as f64 + 0.5), H - BOTTOM + 32.0, cat, "middle", 11);
    }
    legend(&mut svg, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    Ok(svg.finish())
}

/// Row-major `rows × cols` heatmap on a white-to-blue scale with each cell
/// value printed when the grid is small enough to read.
pub fn heatmap(title: &str, row_labels: &[String], col_labels: &[String], values: &[f64]) -> Result<String> {
    let (r, c) = (row_labels.len(), col_labels.len());
    if r == 0 || c == 0 || values.len() != r * c {
        return contract(format!("heatmap needs {r} x {c} values, got {}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return contract("heatmap values must be finite");
    }
    let max = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cell = (420.0 / r.max(c) as f64).min(60.0);
    let (x0, y0) = (110.0, 50.0);
    let mut svg = Svg::new(x0 + cell * c as f64 + 90.0, y0 + cell * r as f64 + 30.0, title);
    for i in 0..r {
        for j in 0..c {
            let v = values[i * c + j];
            let t = if max > 0.0 { v.abs() / max } else { 0.0 };
            let shade = |full: f64| (255.0 - t * (255.0 - full)).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", shade(8.0), shade(48.0), shade(107.0));
            svg.rect(x0 + cell * j as f64, y0 + cell * i as f64, cell, cell, &fill);
            if r.max(c) <= 12 {
                let ink = if t > 0.55 { "white" } else { "black" };
                let _ = writeln!(
                    svg.body,
                    r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle" fill="{ink}">{}</text>"#,
                    x0 + cell * (j as f64 + 0.5),
                    y0 + cell * (i as f64 + 0.5) + 3.0,
                    tick(v)
                );
            }
        }
        svg.text(x0 - 6.0, y0 + cell * (i as f64 + 0.5) + 4.0, &row_labels[i], "end", 10);
    }
    for (j, l) in col_labels.iter().enumerate() {
        svg.text(x0 + cell * (j as f64 + 0.5), y0 - 6.0, l, "middle", 10);
    }
    let lx = x0 + cell * c as f64 + 12.0;
    svg.text(lx, y0 + 10.0, &format!("max {}", tick(max)), "start", 10);
    Ok(svg.finish())
}

/// A labelled point cloud; points sharing a group are joined in order.
pub fn scatter(title: &str, points: &[(String, String, f64, f64)]) -> Result<String> {
    if points.is_empty() {
        return contract("scatter needs at least one point");
    }
    if points.iter().any(|p| !p.2.is_finite() || !p.3.is_finite()) {
        return contract("scatter coordinates must be finite");
    }
    let xr = bounds(points.iter().map(|p| p.2));
    let yr = bounds(points.iter().map(|p| p.3));
    let mut svg = Svg::new(W, H, title);
    axes(&mut svg, xr, yr, "axis 1", "axis 2");
    let sx = scale(xr.0, xr.1, LEFT, W - RIGHT);
    let sy = scale(yr.0, yr.1, H - BOTTOM, TOP);
    let mut groups: Vec<String> = Vec::new();
    for p in points {
        if !groups.contains(&p.0) {
            groups.push(p.0.clone());
        }
    }
    for (g, name) in groups.iter().enumerate() {
        let members: Vec<_> = points.iter().filter(|p| &p.0 == name).collect();
        if members.len() > 1 {
            let path: Vec<String> = members.iter().map(|p| format!("{:.2},{:.2}", sx(p.2), sy(p.3))).collect();
            let _ = writeln!(
                svg.body,
                r#"<polyline fill="none" stroke="{}" stroke-opacity="0.5" points="{}"/>"#,
                color(g),
                path.join(" ")
            );
        }
        for p in members {
            let _ = writeln!(
                svg.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{}"><title>{}</title></circle>"#,
                sx(p.2),
                sy(p.3),
                color(g),
                esc(&p.1)
            );
        }
    }
    legend(&mut svg, &groups);
    Ok(svg.finish())
}

/// KL-to-target curves, one per run.
pub fn kl_curves(series: &[(String, Vec<(u64, f64)>)], ylabel: &str) -> Result<String> {
    let s: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(n, c)| (n.clone(), c.iter().map(|&(t, v)| (t as f64, v)).collect()))
        .collect();
    line_chart("Distance to target over training", "step", ylabel, &s)
}

/// Side-by-side domain weights of several named estimates.
pub fn weight_bars(named: &[(String, DomainWeights)]) -> Result<String> {
    let Some((_, first)) = named.first() else {
        return contract("weight bars need at least one weight vector");
    };
    if named.iter().any(|(_, w)| w.labels() != first.labels()) {
        return contract("weight vectors name different domains");
    }
    let series: Vec<(String, Vec<f64>)> = named.iter().map(|(n, w)| (n.clone(), w.values().to_vec())).collect();
    bar_chart("Domain weights", "weight", first.labels(), &series)
}

/// Pairwise Jensen-Shannon divergence between the estimation steps of a
/// weight trajectory.
pub fn jsd_heatmap(traj: &WeightTrajectory) -> Result<String> {
    let m = pairwise_jsd(traj)?;
    let labels: Vec<String> = traj.steps().iter().map(|s| s.to_string()).collect();
    heatmap("Pairwise JSD of domain weights", &labels, &labels, &m)
}

/// Absolute entries of `(JᵀJ + ridge·I)⁻¹`.
pub fn gram_heatmap(gram: &DomainJacobianGram, labels: &[String], ridge: f64) -> Result<String> {
    if labels.len() != gram.k {
        return contract(format!("{} labels for a {}x{} gram", labels.len(), gram.k, gram.k));
    }
    let inv = gram.regularized_inverse(ridge)?;
    let abs: Vec<f64> = inv.iter().map(|v| v.abs()).collect();
    heatmap(&format!("|(JtJ + {ridge} I)^-1| at step {}", gram.model_step), labels, labels, &abs)
}

/// Scatter of a PCA projection; `group_of` maps a model id to its series
/// (e.g. the run a checkpoint belongs to).
pub fn model_map(proj: &Projection, group_of: impl Fn(&str) -> String) -> Result<String> {
    let points: Vec<(String, String, f64, f64)> = proj
        .models
        .iter()
        .zip(&proj.coords)
        .map(|(id, c)| (group_of(id), id.clone(), c[0], c[1]))
        .collect();
    scatter("Models in log-likelihood space (PCA)", &points)
}

/// `model,axis1,axis2` rows matching [`model_map`].
pub fn model_map_csv(proj: &Projection) -> String {
    let mut s = String::from("model,axis1,axis2\n");
    for (id, c) in proj.models.iter().zip(&proj.coords) {
        let _ = writeln!(s, "{id},{:.12e},{:.12e}", c[0], c[1]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: &[f64]) -> DomainWeights {
        DomainWeights::new(vec!["a".into(), "b".into(), "c".into()], v.to_vec()).unwrap()
    }

    #[test]
    fn constant_trajectory_gives_zero_jsd_map() {
        let mut t = WeightTrajectory::default();
        for s in [0, 10, 20] {
            t.push(s, w(&[0.2, 0.3, 0.5])).unwrap();
        }
        assert!(pairwise_jsd(&t).unwrap().iter().all(|v| *v == 0.0));
        let svg = jsd_heatmap(&t).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<rect").count(), 1 + 9);
        assert!(svg.contains("max 0.000"));
    }

    #[test]
    fn output_is_deterministic() {
        let named = vec![("x".to_string(), w(&[0.2, 0.3, 0.5])), ("y".to_string(), w(&[0.4, 0.4, 0.2]))];
        assert_eq!(weight_bars(&named).unwrap(), weight_bars(&named).unwrap());
        let curves = vec![("u".to_string(), vec![(0, 1.0), (10, 0.5)])];
        assert_eq!(kl_curves(&curves, "kl").unwrap(), kl_curves(&curves, "kl").unwrap());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        assert!(bar_chart("t", "y", &["a".into()], &[("s".into(), vec![1.0, 2.0])]).is_err());
        assert!(heatmap("t", &["a".into()], &["b".into()], &[]).is_err());
        assert!(line_chart("t", "x", "y", &[("s".into(), vec![(0.0, f64::NAN)])]).is_err());
        let other = DomainWeights::uniform(vec!["p".into(), "q".into(), "r".into()]);
        assert!(weight_bars(&[("a".into(), w(&[0.2, 0.3, 0.5])), ("b".into(), other)]).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let svg = scatter("m", &[("g<1>".into(), "a&b".into(), 0.0, 1.0)]).unwrap();
        assert!(svg.contains("g&lt;1&gt;") && svg.contains("a&amp;b"));
    }
}
