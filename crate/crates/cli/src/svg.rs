//! Minimal deterministic SVG rendering: scatter plots of measures, transport
//! plans drawn as segments, and line charts. Output depends only on the
//! inputs, so re-running a command reproduces the same bytes.

use std::fmt::Write;

use ndarray::{Array2, ArrayView1};
use srot_core::measures::OutlierType;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 48.0;
const SOURCE_COLOR: &str = "#1f77b4";
const TARGET_COLOR: &str = "#ff7f0e";
const PLAN_COLOR: &str = "#555555";
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Plans with more candidate segments than this drop faint ones.
pub const SEGMENT_BUDGET: usize = 100_000;
/// Opacity below which segments are dropped once the budget is exceeded.
pub const CULL_OPACITY: f64 = 0.01;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for (px, py) in points.filter(|(a, b)| a.is_finite() && b.is_finite()) {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        let pad = |(lo, hi): (f64, f64)| {
            if !lo.is_finite() {
                return (0.0, 1.0);
            }
            let span = if hi > lo { hi - lo } else { 1.0 };
            (lo - 0.05 * span, hi + 0.05 * span)
        };
        Self { x: pad(x), y: pad(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

struct Doc {
    body: String,
    legend: Vec<(String, String)>,
}

impl Doc {
    fn new() -> Self {
        Self { body: String::new(), legend: Vec::new() }
    }

    fn axes(&mut self, frame: &Frame, title: &str, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            self.body,
            r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#000" stroke-width="1"/>"##,
            r - l,
            b - t
        );
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            MARGIN / 2.0,
            escape(title)
        );
        for (x, anchor) in [(frame.x.0, "start"), (frame.x.1, "end")] {
            let _ = writeln!(
                self.body,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}" font-size="11">{}</text>"#,
                frame.px(x),
                b + 14.0,
                tick(x)
            );
        }
        for y in [frame.y.0, frame.y.1] {
            let _ = writeln!(
                self.body,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11">{}</text>"#,
                l - 4.0,
                frame.py(y) + 4.0,
                tick(y)
            );
        }
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 10.0,
            escape(xlabel)
        );
        let _ = writeln!(
            self.body,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(ylabel)
        );
    }

    fn marker(&mut self, x: f64, y: f64, color: &str, tag: Option<OutlierType>) {
        match tag {
            None => {
                let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
            }
            Some(OutlierType::TypeI) => {
                let _ = writeln!(
                    self.body,
                    r#"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    x - 3.5,
                    y - 3.5
                );
            }
            Some(OutlierType::TypeII) => {
                let _ = writeln!(
                    self.body,
                    r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    x,
                    y - 4.5,
                    x - 4.0,
                    y + 3.0,
                    x + 4.0,
                    y + 3.0
                );
            }
        }
    }

    fn scatter(&mut self, frame: &Frame, points: &Array2<f64>, tags: &[Option<OutlierType>], color: &str) {
        for (i, row) in points.rows().into_iter().enumerate() {
            if row[0].is_finite() && y_of(row).is_finite() {
                self.marker(frame.px(row[0]), frame.py(y_of(row)), color, tags.get(i).copied().flatten());
            }
        }
    }

    fn legend_entry(&mut self, color: &str, text: impl Into<String>) {
        self.legend.push((color.to_string(), text.into()));
    }

    fn finish(mut self) -> String {
        for (k, (color, text)) in self.legend.iter().enumerate() {
            let y = MARGIN + 14.0 + 15.0 * k as f64;
            let _ = writeln!(self.body, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, WIDTH - MARGIN - 180.0, y - 9.0);
            let _ = writeln!(self.body, r#"<text x="{}" y="{y}" font-size="11">{}</text>"#, WIDTH - MARGIN - 165.0, escape(text));
        }
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n{}</svg>\n",
            self.body
        )
    }
}

/// Second coordinate, or 0 for one-dimensional points.
fn y_of(row: ArrayView1<f64>) -> f64 {
    row.get(1).copied().unwrap_or(0.0)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn shape_legend(doc: &mut Doc, tags: &[Option<OutlierType>]) {
    if tags.contains(&Some(OutlierType::TypeI)) {
        doc.legend_entry("#000", "square: type-I outlier");
    }
    if tags.contains(&Some(OutlierType::TypeII)) {
        doc.legend_entry("#000", "triangle: type-II outlier");
    }
}

/// A measure's points with their outlier tags; only the first two
/// coordinates are drawn.
pub struct Layer<'a> {
    pub points: &'a Array2<f64>,
    pub tags: &'a [Option<OutlierType>],
}

pub struct PlanPlot {
    pub svg: String,
    pub drawn: usize,
    pub culled: usize,
}

/// Source and target scatter with one segment per nonzero coupling entry,
/// at opacity `pi_ij / max(pi)`.
pub fn plan_plot(title: &str, source: Layer, target: Layer, coupling: &Array2<f64>) -> PlanPlot {
    let frame = Frame::fit(source.points.rows().into_iter().chain(target.points.rows()).map(|r| (r[0], y_of(r))));
    let mut doc = Doc::new();
    doc.axes(&frame, title, "x0", "x1");
    let max = coupling.iter().fold(0.0f64, |m, v| m.max(*v));
    let cull = coupling.len() > SEGMENT_BUDGET;
    let (mut drawn, mut culled) = (0, 0);
    if max > 0.0 {
        for ((i, j), &v) in coupling.indexed_iter() {
            let opacity = v / max;
            if opacity <= 0.0 {
                continue;
            }
            if cull && opacity < CULL_OPACITY {
                culled += 1;
                continue;
            }
            let (s, t) = (source.points.row(i), target.points.row(j));
            let _ = writeln!(
                doc.body,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{PLAN_COLOR}" stroke-width="1" stroke-opacity="{opacity:.4}"/>"#,
                frame.px(s[0]),
                frame.py(y_of(s)),
                frame.px(t[0]),
                frame.py(y_of(t))
            );
            drawn += 1;
        }
    }
    doc.scatter(&frame, source.points, source.tags, SOURCE_COLOR);
    doc.scatter(&frame, target.points, target.tags, TARGET_COLOR);
    doc.legend_entry(SOURCE_COLOR, "source");
    doc.legend_entry(TARGET_COLOR, "target");
    doc.legend_entry(PLAN_COLOR, "plan (opacity = pi / max pi)");
    let all_tags: Vec<_> = source.tags.iter().chain(target.tags).copied().collect();
    shape_legend(&mut doc, &all_tags);
    if culled > 0 {
        doc.legend_entry(PLAN_COLOR, format!("{culled} segments under 1% opacity omitted"));
    }
    PlanPlot { svg: doc.finish(), drawn, culled }
}

/// Reference measure, the flowing cloud's start, and where it ended.
pub fn flow_plot(title: &str, reference: Layer, start: &Array2<f64>, end: &Array2<f64>) -> String {
    let frame = Frame::fit(reference.points.rows().into_iter().chain(start.rows()).chain(end.rows()).map(|r| (r[0], y_of(r))));
    let mut doc = Doc::new();
    doc.axes(&frame, title, "x0", "x1");
    for row in start.rows() {
        let _ = writeln!(doc.body, r##"<circle cx="{:.2}" cy="{:.2}" r="2" fill="#bbbbbb"/>"##, frame.px(row[0]), frame.py(y_of(row)));
    }
    doc.scatter(&frame, reference.points, reference.tags, SOURCE_COLOR);
    doc.scatter(&frame, end, &[], TARGET_COLOR);
    doc.legend_entry(SOURCE_COLOR, "reference");
    doc.legend_entry("#bbbbbb", "flow start");
    doc.legend_entry(TARGET_COLOR, "flow end");
    shape_legend(&mut doc, reference.tags);
    doc.finish()
}

/// One polyline per named series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.1.iter().copied()));
    let mut doc = Doc::new();
    doc.axes(&frame, title, xlabel, ylabel);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(doc.body, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for p in &path {
            let (x, y) = p.split_once(',').expect("formatted as x,y");
            let _ = writeln!(doc.body, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
        }
        doc.legend_entry(color, name.clone());
    }
    doc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn plan_opacity_is_normalized_by_the_largest_entry() {
        let pts = array![[0.0, 0.0], [1.0, 1.0]];
        let plan = plan_plot(
            "p",
            Layer { points: &pts, tags: &[None, None] },
            Layer { points: &pts, tags: &[None, None] },
            &array![[0.4, 0.1], [0.0, 0.2]],
        );
        assert_eq!((plan.drawn, plan.culled), (3, 0));
        assert!(plan.svg.contains(r#"stroke-opacity="1.0000""#));
        assert!(plan.svg.contains(r#"stroke-opacity="0.2500""#));
        assert!(plan.svg.contains(r#"stroke-opacity="0.5000""#));
    }

    #[test]
    fn large_plans_drop_faint_segments_and_say_so() {
        let n = 400;
        let pts = Array2::from_shape_fn((n, 2), |(i, k)| (i * (k + 1)) as f64);
        let tags = vec![None; n];
        let mut c = Array2::from_elem((n, n), 1e-6);
        for i in 0..n {
            c[[i, i]] = 1.0;
        }
        let plan = plan_plot("p", Layer { points: &pts, tags: &tags }, Layer { points: &pts, tags: &tags }, &c);
        assert_eq!(plan.drawn, n);
        assert_eq!(plan.culled, n * n - n);
        assert!(plan.svg.contains("segments under 1% opacity omitted"));
    }

    #[test]
    fn outliers_get_their_own_markers() {
        let pts = array![[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]];
        let tags = [None, Some(OutlierType::TypeI), Some(OutlierType::TypeII)];
        let svg = flow_plot("f", Layer { points: &pts, tags: &tags }, &pts, &pts);
        assert!(svg.contains("<polygon"));
        assert!(svg.contains(r#"width="7" height="7""#));
    }

    #[test]
    fn rendering_is_deterministic_and_escaped() {
        let s = vec![("a<b".to_string(), vec![(0.0, 1.0), (1.0, 0.5)])];
        let one = line_chart("t & u", "x", "y", &s);
        assert_eq!(one, line_chart("t & u", "x", "y", &s));
        assert!(one.contains("t &amp; u") && one.contains("a&lt;b"));
    }
}
