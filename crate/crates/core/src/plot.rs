//! Small deterministic SVG renderer for line and bar charts.
//!
//! Hand-rolled on purpose: output bytes depend only on the inputs, which
//! keeps re-runs of the CLI byte-identical.

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 44.0;
const MARGIN_B: f64 = 52.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: &str, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.to_string(),
            points,
        }
    }
}

fn fmt(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (0.001..100000.0).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.3e}")
    }
}

fn esc(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    body: String,
}

impl Canvas {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        body.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"Helvetica, Arial, sans-serif\">\n"
        ));
        body.push_str(&format!(
            "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
            WIDTH / 2.0,
            esc(title)
        ));
        Canvas { body }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn nice_bounds(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Multi-series line chart with axes, ticks, and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut canvas = Canvas::new(title);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (x_lo, x_hi) = nice_bounds(
        all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_lo, y_hi) = nice_bounds(
        all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let sx = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

    // frame and ticks
    canvas.body.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#333333\"/>\n"
    ));
    for i in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * f64::from(i) / 4.0;
        let fy = y_lo + (y_hi - y_lo) * f64::from(i) / 4.0;
        let px = sx(fx);
        let py = sy(fy);
        canvas.body.push_str(&format!(
            "<line x1=\"{px:.2}\" y1=\"{}\" x2=\"{px:.2}\" y2=\"{}\" stroke=\"#cccccc\"/>\n",
            MARGIN_T,
            MARGIN_T + plot_h
        ));
        canvas.body.push_str(&format!(
            "<text x=\"{px:.2}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_T + plot_h + 18.0,
            fmt(fx)
        ));
        canvas.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py:.2}\" x2=\"{}\" y2=\"{py:.2}\" stroke=\"#cccccc\"/>\n",
            MARGIN_L,
            MARGIN_L + plot_w
        ));
        canvas.body.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            py + 4.0,
            fmt(fy)
        ));
    }
    canvas.body.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 14.0,
        esc(x_label)
    ));
    canvas.body.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {})\">{}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        esc(y_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !s.points.is_empty() {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            canvas.body.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n",
                pts.join(" ")
            ));
        }
        let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
        canvas.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly:.2}\" x2=\"{}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_R + 12.0,
            WIDTH - MARGIN_R + 34.0
        ));
        canvas.body.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"11\">{}</text>\n",
            WIDTH - MARGIN_R + 40.0,
            ly + 4.0,
            esc(&s.label)
        ));
    }
    canvas.finish()
}

/// Horizontal bar chart (used for the top-10 weight table).
pub fn bar_chart(title: &str, x_label: &str, labels: &[String], values: &[f64]) -> String {
    assert_eq!(labels.len(), values.len());
    let mut canvas = Canvas::new(title);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let n = labels.len().max(1);
    let (lo, hi) = nice_bounds(
        values.iter().copied().fold(0.0_f64, f64::min),
        values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let sx = |v: f64| MARGIN_L + (v - lo) / (hi - lo) * plot_w;
    let band = plot_h / n as f64;

    canvas.body.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#333333\"/>\n"
    ));
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let y = MARGIN_T + band * i as f64 + band * 0.15;
        let h = band * 0.7;
        let x0 = sx(lo.max(0.0).min(v));
        let x1 = sx(v.max(lo.max(0.0)));
        canvas.body.push_str(&format!(
            "<rect x=\"{x0:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>\n",
            (x1 - x0).max(0.5),
            PALETTE[0]
        ));
        canvas.body.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            y + h / 2.0 + 3.0,
            esc(label)
        ));
        canvas.body.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{}</text>\n",
            x1 + 4.0,
            y + h / 2.0 + 3.0,
            fmt(v)
        ));
    }
    canvas.body.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 14.0,
        esc(x_label)
    ));
    canvas.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_deterministic_and_well_formed() {
        let series = [
            Series::new("train", vec![(0.0, 0.5), (1.0, 0.7), (2.0, 0.8)]),
            Series::new("test", vec![(0.0, 0.4), (1.0, 0.6), (2.0, 0.65)]),
        ];
        let a = line_chart("accuracy", "epoch", "top-1", &series);
        let b = line_chart("accuracy", "epoch", "top-1", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<polyline").count(), 2);
    }

    #[test]
    fn bar_chart_escapes_labels() {
        let svg = bar_chart(
            "top",
            "fitness",
            &["a<b".to_string()],
            &[0.5],
        );
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn constant_series_does_not_divide_by_zero() {
        let svg = line_chart(
            "flat",
            "x",
            "y",
            &[Series::new("s", vec![(0.0, 1.0), (1.0, 1.0)])],
        );
        assert!(!svg.contains("NaN"));
    }
}
