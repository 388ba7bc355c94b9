//! SVG heatmap of a token-token attribution matrix. Diverging palette
//! anchored at zero: negative cells blue, positive red, so balancing
//! mismatches stand out.

use crate::attribution::AttributionOutput;

const CELL: f64 = 34.0;
const LEFT: f64 = 110.0;
const TOP: f64 = 64.0;
const BOTTOM: f64 = 96.0;

fn cell_color(value: f64, max_abs: f64) -> String {
    if max_abs == 0.0 {
        return "rgb(255,255,255)".to_string();
    }
    let t = (value / max_abs).clamp(-1.0, 1.0);
    let (r, g, b) = if t >= 0.0 {
        // white -> red
        lerp3((255.0, 255.0, 255.0), (178.0, 24.0, 43.0), t)
    } else {
        // white -> blue
        lerp3((255.0, 255.0, 255.0), (33.0, 102.0, 172.0), -t)
    };
    format!(
        "rgb({},{},{})",
        r.round() as u8,
        g.round() as u8,
        b.round() as u8
    )
}

fn lerp3(a: (f64, f64, f64), b: (f64, f64, f64), t: f64) -> (f64, f64, f64) {
    (
        a.0 + (b.0 - a.0) * t,
        a.1 + (b.1 - a.1) * t,
        a.2 + (b.2 - a.2) * t,
    )
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Render the token-token matrix with token labels on both axes and the
/// score, error, layer and step count in the title.
pub fn render_heatmap(out: &AttributionOutput) -> String {
    let rows = out.matrix.rows();
    let cols = out.matrix.cols();
    let width = LEFT + cols as f64 * CELL + 24.0;
    let height = TOP + rows as f64 * CELL + BOTTOM;
    let max_abs = out.matrix.max_abs();

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"monospace\">\n"
    ));
    svg.push_str(&format!(
        "  <title>token-token attribution</title>\n  <text x=\"{:.0}\" y=\"24\" font-size=\"14\">score {:.4}  error {:.2e}  layer {}  N={} ({})</text>\n",
        LEFT,
        out.score,
        out.error,
        out.layer,
        out.steps,
        out.scheme
    ));

    for i in 0..rows {
        for j in 0..cols {
            let v = out.matrix.get(i, j);
            let x = LEFT + j as f64 * CELL;
            let y = TOP + i as f64 * CELL;
            svg.push_str(&format!(
                "  <rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{CELL:.1}\" height=\"{CELL:.1}\" \
                 fill=\"{}\" stroke=\"#cccccc\" stroke-width=\"0.5\"><title>{:.6}</title></rect>\n",
                cell_color(v, max_abs),
                v
            ));
        }
    }

    for (i, token) in out.tokens_a.iter().enumerate() {
        let y = TOP + i as f64 * CELL + CELL / 2.0 + 4.0;
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            LEFT - 8.0,
            escape(token)
        ));
    }
    for (j, token) in out.tokens_b.iter().enumerate() {
        let x = LEFT + j as f64 * CELL + CELL / 2.0;
        let y = TOP + rows as f64 * CELL + 10.0;
        svg.push_str(&format!(
            "  <text x=\"{x:.1}\" y=\"{y:.1}\" font-size=\"12\" text-anchor=\"end\" \
             transform=\"rotate(-55 {x:.1} {y:.1})\">{}</text>\n",
            escape(token)
        ));
    }

    svg.push_str("</svg>\n");
    svg
}
