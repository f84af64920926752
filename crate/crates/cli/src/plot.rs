//! Minimal static SVG plots: metric-vs-round line charts and the
//! heterogeneity bubble scatter. No external plotting stack — the output is
//! plain SVG text written next to the report.

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 50.0;
const MARGIN_B: f64 = 60.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round tick spacing to a 1/2/5 decade so axis labels stay readable.
fn nice_step(span: f64, target_ticks: usize) -> f64 {
    if span <= 0.0 {
        return 1.0;
    }
    let raw = span / target_ticks as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let factor = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    factor * mag
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(f64::MIN_POSITIVE);
        MARGIN_L + (v - self.x_min) / span * (WIDTH - MARGIN_L - MARGIN_R)
    }
    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(f64::MIN_POSITIVE);
        HEIGHT - MARGIN_B - (v - self.y_min) / span * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn axes(svg: &mut String, frame: &Frame, title: &str, x_label: &str, y_label: &str) {
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"28\" font-size=\"18\" text-anchor=\"middle\" \
         font-family=\"sans-serif\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        esc(title)
    ));
    // axis lines
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B,
        HEIGHT - MARGIN_B
    ));
    // ticks
    let xs = nice_step(frame.x_max - frame.x_min, 8);
    let mut t = (frame.x_min / xs).ceil() * xs;
    while t <= frame.x_max + 1e-9 {
        let px = frame.x(t);
        svg.push_str(&format!(
            "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <text x=\"{px:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" \
             font-family=\"sans-serif\">{}</text>\n",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 6.0,
            HEIGHT - MARGIN_B + 22.0,
            fmt_tick(t)
        ));
        t += xs;
    }
    let ys = nice_step(frame.y_max - frame.y_min, 6);
    let mut t = (frame.y_min / ys).ceil() * ys;
    while t <= frame.y_max + 1e-9 {
        let py = frame.y(t);
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{MARGIN_L}\" y2=\"{py:.1}\" stroke=\"black\"/>\n\
             <line x1=\"{MARGIN_L}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" \
             stroke=\"#dddddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\" \
             font-family=\"sans-serif\">{}</text>\n",
            MARGIN_L - 6.0,
            WIDTH - MARGIN_R,
            MARGIN_L - 10.0,
            py + 4.0,
            fmt_tick(t)
        ));
        t += ys;
    }
    // labels
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\" \
         font-family=\"sans-serif\">{}</text>\n\
         <text x=\"20\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\" \
         font-family=\"sans-serif\" transform=\"rotate(-90 20 {:.1})\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 14.0,
        esc(x_label),
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        esc(y_label)
    ));
}

/// One polyline per series, with a legend; y-range padded 5%.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if pts.is_empty() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = (y_max - y_min) * 0.05;
    let frame = Frame { x_min, x_max, y_min: y_min - pad, y_max: y_max + pad };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    );
    axes(&mut svg, &frame, title, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", frame.x(x), frame.y(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>\n",
                frame.x(x),
                frame.y(y)
            ));
        }
        // legend entry
        let ly = MARGIN_T + 10.0 + i as f64 * 20.0;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" \
             font-family=\"sans-serif\">{}</text>\n",
            WIDTH - MARGIN_R + 10.0,
            WIDTH - MARGIN_R + 34.0,
            WIDTH - MARGIN_R + 40.0,
            ly + 4.0,
            esc(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Heterogeneity scatter: one bubble per (client, label), area proportional
/// to the per-label sample count.
pub fn heterogeneity_scatter(title: &str, label_counts: &[Vec<usize>]) -> String {
    let k = label_counts.len();
    let c = label_counts.first().map_or(0, |v| v.len());
    let max_count = label_counts
        .iter()
        .flat_map(|v| v.iter())
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let frame = Frame {
        x_min: -0.5,
        x_max: k as f64 - 0.5,
        y_min: -0.5,
        y_max: c as f64 - 0.5,
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    );
    axes(&mut svg, &frame, title, "client", "class label");
    let r_max = ((WIDTH - MARGIN_L - MARGIN_R) / (2.2 * k.max(1) as f64))
        .min((HEIGHT - MARGIN_T - MARGIN_B) / (2.2 * c.max(1) as f64));
    for (ci, counts) in label_counts.iter().enumerate() {
        for (li, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            // area ∝ count → radius ∝ sqrt(count)
            let r = r_max * (n as f64 / max_count).sqrt();
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"{:.2}\" fill=\"#d62728\" \
                 fill-opacity=\"0.55\"/>\n",
                frame.x(ci as f64),
                frame.y(li as f64),
                r.max(0.8)
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}
