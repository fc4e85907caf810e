//! Deterministic static SVG figures.
//!
//! Output depends only on the payload: no timestamps, no random ids, and
//! every number is printed with a fixed precision.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SvgKind {
    AttentionOverlay,
    TreeLensProjection,
    DepthCurve,
}

impl SvgKind {
    pub fn name(self) -> &'static str {
        match self {
            SvgKind::AttentionOverlay => "attention-overlay",
            SvgKind::TreeLensProjection => "tree-lens-projection",
            SvgKind::DepthCurve => "depth-curve",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensLayer {
    pub stream: usize,
    pub argmax: usize,
    /// Probability per node id.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    /// Optional error bar `(lo, hi)`.
    pub band: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Payload {
    AttentionOverlay {
        tokens: Vec<String>,
        /// `weights[q][k]`: attention from query `q` to key `k`.
        weights: Vec<Vec<f64>>,
    },
    TreeLensProjection {
        /// `(parent, child)` pairs.
        edges: Vec<(usize, usize)>,
        goal: usize,
        path: Vec<usize>,
        layers: Vec<LensLayer>,
    },
    DepthCurve {
        title: String,
        x_label: String,
        y_label: String,
        series: Vec<Series>,
    },
}

impl Payload {
    pub fn kind(&self) -> SvgKind {
        match self {
            Payload::AttentionOverlay { .. } => SvgKind::AttentionOverlay,
            Payload::TreeLensProjection { .. } => SvgKind::TreeLensProjection,
            Payload::DepthCurve { .. } => SvgKind::DepthCurve,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SvgError {
    KindMismatch { requested: SvgKind, payload: SvgKind },
    Invalid(String),
}

impl std::fmt::Display for SvgError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SvgError::KindMismatch { requested, payload } => {
                write!(f, "invalid argument: requested a {} figure for a {} payload", requested.name(), payload.name())
            }
            SvgError::Invalid(m) => write!(f, "invalid argument: {m}"),
        }
    }
}

impl std::error::Error for SvgError {}

/// Highlight of one token in an attention overlay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Highlight {
    /// Query position that attends most strongly to this token (lowest on
    /// ties); `None` when nothing attends to it at all.
    pub attender: Option<usize>,
    /// That attention weight relative to the largest weight in the matrix.
    pub intensity: f64,
}

pub fn attention_highlights(weights: &[Vec<f64>], n_tokens: usize) -> Result<Vec<Highlight>, SvgError> {
    if weights.iter().any(|row| row.len() != n_tokens) {
        return Err(SvgError::Invalid(format!("every attention row must have {n_tokens} entries")));
    }
    if weights.iter().flatten().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(SvgError::Invalid("attention weights must be finite and non-negative".into()));
    }
    let global = weights.iter().flatten().copied().fold(0.0, f64::max);
    Ok((0..n_tokens)
        .map(|k| {
            let mut best: Option<(usize, f64)> = None;
            for (q, row) in weights.iter().enumerate() {
                if row[k] > best.map_or(0.0, |b| b.1) {
                    best = Some((q, row[k]));
                }
            }
            match best {
                Some((q, w)) => Highlight { attender: Some(q), intensity: w / global },
                None => Highlight { attender: None, intensity: 0.0 },
            }
        })
        .collect())
}

/// Hue of query position `q`: golden-angle steps keep neighbours distinct.
pub fn hue(q: usize) -> f64 {
    (q as f64 * 137.508) % 360.0
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
}

fn attention_overlay(tokens: &[String], weights: &[Vec<f64>]) -> Result<String, SvgError> {
    let marks = attention_highlights(weights, tokens.len())?;
    const PER_ROW: usize = 16;
    let (cw, ch) = (44.0, 30.0);
    let rows = tokens.len().div_ceil(PER_ROW).max(1);
    let mut out = String::new();
    header(&mut out, PER_ROW as f64 * cw + 20.0, rows as f64 * (ch + 18.0) + 20.0);
    for (i, (tok, m)) in tokens.iter().zip(&marks).enumerate() {
        let x = 10.0 + (i % PER_ROW) as f64 * cw;
        let y = 10.0 + (i / PER_ROW) as f64 * (ch + 18.0);
        let fill = match m.attender {
            Some(q) => format!(r#"fill="hsl({:.1},75%,50%)" fill-opacity="{:.4}""#, hue(q), m.intensity),
            None => r#"fill="none""#.to_string(),
        };
        let title = m.attender.map_or(String::new(), |q| format!("<title>attended by {q} ({:.4})</title>", m.intensity));
        let _ = writeln!(
            out,
            r##"<g data-pos="{i}"><rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{ch:.1}" {fill} stroke="#999"/>{title}<text x="{tx:.1}" y="{ty:.1}" text-anchor="middle">{t}</text><text x="{tx:.1}" y="{iy:.1}" text-anchor="middle" font-size="8" fill="#666">{i}</text></g>"##,
            w = cw - 4.0,
            tx = x + (cw - 4.0) / 2.0,
            ty = y + ch / 2.0 + 4.0,
            iy = y + ch + 10.0,
            t = escape(tok),
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Node coordinates in unit cells: leaves spread left to right in
/// depth-first order (children by id), parents centred over children.
pub fn tree_layout(edges: &[(usize, usize)]) -> Result<BTreeMap<usize, (f64, f64)>, SvgError> {
    let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut has_parent = std::collections::BTreeSet::new();
    for &(p, c) in edges {
        children.entry(p).or_default().push(c);
        children.entry(c).or_default();
        if !has_parent.insert(c) {
            return Err(SvgError::Invalid(format!("node {c} has two parents")));
        }
    }
    let roots: Vec<usize> = children.keys().copied().filter(|n| !has_parent.contains(n)).collect();
    let &[root] = roots.as_slice() else {
        return Err(SvgError::Invalid(format!("edges must form one tree, found roots {roots:?}")));
    };
    for c in children.values_mut() {
        c.sort_unstable();
    }
    fn place(n: usize, depth: usize, ch: &BTreeMap<usize, Vec<usize>>, next: &mut f64, pos: &mut BTreeMap<usize, (f64, f64)>) {
        let kids = &ch[&n];
        let x = if kids.is_empty() {
            *next += 1.0;
            *next - 1.0
        } else {
            let xs: Vec<f64> = kids
                .iter()
                .map(|&k| {
                    place(k, depth + 1, ch, next, pos);
                    pos[&k].0
                })
                .collect();
            (xs[0] + xs[xs.len() - 1]) / 2.0
        };
        pos.insert(n, (x, depth as f64));
    }
    let mut pos = BTreeMap::new();
    let mut next = 0.0;
    place(root, 0, &children, &mut next, &mut pos);
    if pos.len() != children.len() {
        return Err(SvgError::Invalid("edges contain a cycle or a disconnected part".into()));
    }
    Ok(pos)
}

fn tree_lens(edges: &[(usize, usize)], goal: usize, path: &[usize], layers: &[LensLayer]) -> Result<String, SvgError> {
    let pos = tree_layout(edges)?;
    let width_cells = pos.values().map(|p| p.0).fold(0.0, f64::max) + 1.0;
    let depth_cells = pos.values().map(|p| p.1).fold(0.0, f64::max) + 1.0;
    let (sx, sy) = (34.0, 46.0);
    let panel_w = width_cells * sx + 30.0;
    let panel_h = depth_cells * sy + 50.0;
    let n_panels = layers.len().max(1);
    let mut out = String::new();
    header(&mut out, panel_w * n_panels as f64, panel_h);
    let on_path: std::collections::BTreeSet<usize> = path.iter().copied().collect();
    let panels: Vec<Option<&LensLayer>> = if layers.is_empty() { vec![None] } else { layers.iter().map(Some).collect() };
    for (i, layer) in panels.into_iter().enumerate() {
        let ox = i as f64 * panel_w + 15.0;
        let at = |n: usize| (ox + pos[&n].0 * sx + sx / 2.0, 36.0 + pos[&n].1 * sy);
        if let Some(l) = layer {
            let _ = writeln!(out, r#"<text x="{:.1}" y="18">x^{} → {}</text>"#, ox, l.stream, l.argmax);
        }
        for &(p, c) in edges {
            let ((x1, y1), (x2, y2)) = (at(p), at(c));
            let thick = on_path.contains(&p) && on_path.contains(&c);
            let _ = writeln!(
                out,
                r##"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{}" stroke-width="{}"/>"##,
                if thick { "#333" } else { "#bbb" },
                if thick { 2.5 } else { 1.0 }
            );
        }
        for &n in pos.keys() {
            let (x, y) = at(n);
            let p = layer.and_then(|l| l.probs.get(n)).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let is_max = layer.is_some_and(|l| l.argmax == n);
            let fill = if is_max {
                format!(r#"fill="hsl(10,85%,50%)" fill-opacity="{:.4}""#, 0.25 + 0.75 * p)
            } else {
                format!(r#"fill="hsl(210,60%,55%)" fill-opacity="{:.4}""#, 0.6 * p)
            };
            let stroke = if n == goal { r##"stroke="#080" stroke-width="3""## } else { r##"stroke="#555" stroke-width="1""## };
            let _ = writeln!(
                out,
                r#"<g data-node="{n}"><circle cx="{x:.1}" cy="{y:.1}" r="12" {fill} {stroke}/><text x="{x:.1}" y="{ty:.1}" text-anchor="middle">{n}</text></g>"#,
                ty = y + 4.0
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn depth_curve(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String, SvgError> {
    let pts: Vec<&CurvePoint> = series.iter().flat_map(|s| &s.points).collect();
    if pts.is_empty() {
        return Err(SvgError::Invalid("depth curve needs at least one point".into()));
    }
    let mut ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
    ys.extend(pts.iter().filter_map(|p| p.band).flat_map(|(a, b)| [a, b]));
    let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
    if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
        return Err(SvgError::Invalid("depth curve values must be finite".into()));
    }
    let (x0, x1) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (mut y0, mut y1) = (ys.iter().copied().fold(0.0, f64::min), ys.iter().copied().fold(0.0, f64::max));
    if y1 - y0 < 1e-12 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let (w, h, l, r, t, b) = (640.0, 400.0, 70.0, 150.0, 40.0, 50.0);
    let px = |x: f64| l + if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 } * (w - l - r);
    let py = |y: f64| t + (1.0 - (y - y0) / (y1 - y0)) * (h - t - b);
    let mut out = String::new();
    header(&mut out, w, h);
    let _ = writeln!(out, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        out,
        r##"<line x1="{l:.1}" y1="{yb:.1}" x2="{xr:.1}" y2="{yb:.1}" stroke="#000"/><line x1="{l:.1}" y1="{t:.1}" x2="{l:.1}" y2="{yb:.1}" stroke="#000"/>"##,
        yb = h - b,
        xr = w - r
    );
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(out, r##"<line x1="{l:.1}" y1="{z:.1}" x2="{xr:.1}" y2="{z:.1}" stroke="#aaa" stroke-dasharray="4 3"/>"##, z = py(0.0), xr = w - r);
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, px(x), h - b + 16.0, x);
    }
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.3}</text>"#, l - 6.0, py(y) + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (l + w - r) / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{c:.1}" text-anchor="middle" transform="rotate(-90 16 {c:.1})">{}</text>"#,
        escape(y_label),
        c = (t + h - b) / 2.0
    );
    for (si, s) in series.iter().enumerate() {
        let color = format!("hsl({:.1},70%,40%)", hue(si));
        let mut sorted: Vec<&CurvePoint> = s.points.iter().collect();
        sorted.sort_by(|a, b| a.x.total_cmp(&b.x));
        let line: Vec<String> = sorted.iter().map(|p| format!("{:.1},{:.1}", px(p.x), py(p.y))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        for p in &sorted {
            if let Some((lo, hi)) = p.band {
                let _ = writeln!(
                    out,
                    r#"<line x1="{x:.1}" y1="{a:.1}" x2="{x:.1}" y2="{b:.1}" stroke="{color}"/>"#,
                    x = px(p.x),
                    a = py(lo),
                    b = py(hi)
                );
            }
            let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(p.x), py(p.y));
        }
        let ly = t + 16.0 * si as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            w - r + 12.0,
            ly,
            w - r + 26.0,
            ly + 9.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Renders `payload` as a `kind` figure.
pub fn render_svg(kind: SvgKind, payload: &Payload) -> Result<String, SvgError> {
    if payload.kind() != kind {
        return Err(SvgError::KindMismatch { requested: kind, payload: payload.kind() });
    }
    match payload {
        Payload::AttentionOverlay { tokens, weights } => attention_overlay(tokens, weights),
        Payload::TreeLensProjection { edges, goal, path, layers } => tree_lens(edges, *goal, path, layers),
        Payload::DepthCurve { title, x_label, y_label, series } => depth_curve(title, x_label, y_label, series),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn uniform_attention_gives_equal_intensities() {
        let w = vec![vec![0.25; 4]; 4];
        let h = attention_highlights(&w, 4).unwrap();
        assert!(h.iter().all(|m| m.intensity == h[0].intensity && m.attender == Some(0)));
    }

    #[test]
    fn one_hot_attention_colors_only_its_key() {
        let mut w = vec![vec![0.0; 5]; 5];
        w[3][1] = 1.0;
        let h = attention_highlights(&w, 5).unwrap();
        for (k, m) in h.iter().enumerate() {
            if k == 1 {
                assert_eq!((m.attender, m.intensity), (Some(3), 1.0));
            } else {
                assert_eq!((m.attender, m.intensity), (None, 0.0));
            }
        }
        let svg = render_svg(SvgKind::AttentionOverlay, &Payload::AttentionOverlay { tokens: tokens(5), weights: w }).unwrap();
        assert_eq!(svg.matches("hsl(").count(), 1);
        assert!(svg.contains(&format!("hsl({:.1},75%,50%)", hue(3))));
    }

    #[test]
    fn output_is_byte_identical_and_kind_checked() {
        let p = Payload::TreeLensProjection {
            edges: vec![(0, 1), (0, 2), (2, 3), (2, 4)],
            goal: 3,
            path: vec![0, 2, 3],
            layers: vec![LensLayer { stream: 1, argmax: 2, probs: vec![0.1, 0.1, 0.6, 0.1, 0.1] }],
        };
        let a = render_svg(SvgKind::TreeLensProjection, &p).unwrap();
        assert_eq!(a, render_svg(SvgKind::TreeLensProjection, &p).unwrap());
        assert!(matches!(render_svg(SvgKind::DepthCurve, &p), Err(SvgError::KindMismatch { .. })));
    }

    #[test]
    fn tree_layout_centres_parents_and_rejects_forests() {
        let pos = tree_layout(&[(5, 1), (5, 7), (7, 2), (7, 3)]).unwrap();
        assert_eq!(pos[&1], (0.0, 1.0));
        assert_eq!(pos[&7], (1.5, 1.0));
        assert_eq!(pos[&5].1, 0.0);
        assert!(tree_layout(&[(0, 1), (2, 3)]).is_err());
        assert!(tree_layout(&[(0, 1), (2, 1)]).is_err());
    }

    #[test]
    fn depth_curve_draws_every_point() {
        let s = Series {
            name: "effect".into(),
            points: (1..=4).map(|d| CurvePoint { x: d as f64, y: -(d as f64), band: Some((-(d as f64) - 0.5, 0.5 - d as f64)) }).collect(),
        };
        let p = Payload::DepthCurve { title: "t".into(), x_label: "depth".into(), y_label: "LD".into(), series: vec![s] };
        let svg = render_svg(SvgKind::DepthCurve, &p).unwrap();
        assert_eq!(svg.matches("<circle").count(), 4);
        let empty = Payload::DepthCurve { title: "t".into(), x_label: "".into(), y_label: "".into(), series: vec![] };
        assert!(render_svg(SvgKind::DepthCurve, &empty).is_err());
    }
}
