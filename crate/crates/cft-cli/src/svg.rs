//! Tiny deterministic SVG writer for the group-exposure bar chart. Two bars
//! per category group (prompts with history vs. without), fixed canvas, no
//! randomness, so repeated runs produce byte-identical files.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const COLOR_WITH: &str = "#3b6fb5";
const COLOR_WITHOUT: &str = "#d08a2e";

fn fmt(v: f64) -> String {
    // Fixed-precision, locale-independent number formatting for attributes.
    format!("{v:.4}")
}

/// Renders recommendation exposure shares per category group as a grouped bar
/// chart. `with` and `without` must have one share per group.
pub fn group_share_chart(with: &[f64], without: &[f64], title: &str) -> String {
    assert_eq!(with.len(), without.len(), "group count mismatch");
    let n = with.len().max(1);

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let max_share = with
        .iter()
        .chain(without.iter())
        .copied()
        .fold(0.0_f64, f64::max)
        .max(1e-9);
    // Round the axis top up to a tidy multiple of 0.05.
    let y_top = ((max_share / 0.05).ceil() * 0.05).max(0.05);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(s, "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        fmt(WIDTH / 2.0),
        xml_escape(title)
    );

    // Horizontal gridlines and y axis labels at steps of y_top / 5.
    for i in 0..=5 {
        let share = y_top * f64::from(i) / 5.0;
        let y = MARGIN_TOP + plot_h * (1.0 - share / y_top);
        let _ = writeln!(
            s,
            "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>",
            fmt(MARGIN_LEFT),
            fmt(y),
            fmt(WIDTH - MARGIN_RIGHT),
            fmt(y)
        );
        let _ = writeln!(
            s,
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            fmt(MARGIN_LEFT - 6.0),
            fmt(y + 4.0),
            fmt(share)
        );
    }

    // Bars: each group gets a band; two bars occupy 70% of the band.
    let band = plot_w / n as f64;
    let bar_w = band * 0.35;
    for (g, (&a, &b)) in with.iter().zip(without.iter()).enumerate() {
        let x0 = MARGIN_LEFT + band * g as f64 + band * 0.15;
        for (j, (share, color)) in [(a, COLOR_WITH), (b, COLOR_WITHOUT)].iter().enumerate() {
            let h = plot_h * (share / y_top).clamp(0.0, 1.0);
            let x = x0 + bar_w * j as f64;
            let y = MARGIN_TOP + plot_h - h;
            let _ = writeln!(
                s,
                "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>",
                fmt(x),
                fmt(y),
                fmt(bar_w),
                fmt(h),
                color
            );
        }
        let _ = writeln!(
            s,
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
            fmt(x0 + bar_w),
            fmt(MARGIN_TOP + plot_h + 18.0),
            g
        );
    }

    // Axis lines, axis titles, legend.
    let _ = writeln!(
        s,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt(MARGIN_LEFT),
        fmt(MARGIN_TOP),
        fmt(MARGIN_LEFT),
        fmt(MARGIN_TOP + plot_h)
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt(MARGIN_LEFT),
        fmt(MARGIN_TOP + plot_h),
        fmt(WIDTH - MARGIN_RIGHT),
        fmt(MARGIN_TOP + plot_h)
    );
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">category group</text>",
        fmt(MARGIN_LEFT + plot_w / 2.0),
        fmt(HEIGHT - 22.0)
    );
    let _ = writeln!(
        s,
        "  <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">share of recommendations</text>",
        fmt(MARGIN_TOP + plot_h / 2.0),
        fmt(MARGIN_TOP + plot_h / 2.0)
    );
    let legend_x = WIDTH - MARGIN_RIGHT - 170.0;
    let _ = writeln!(
        s,
        "  <rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/>",
        fmt(legend_x),
        fmt(MARGIN_TOP - 26.0),
        COLOR_WITH
    );
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">with history</text>",
        fmt(legend_x + 16.0),
        fmt(MARGIN_TOP - 16.0)
    );
    let _ = writeln!(
        s,
        "  <rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/>",
        fmt(legend_x + 92.0),
        fmt(MARGIN_TOP - 26.0),
        COLOR_WITHOUT
    );
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">without history</text>",
        fmt(legend_x + 108.0),
        fmt(MARGIN_TOP - 16.0)
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_well_formed() {
        let with = [0.5, 0.3, 0.2];
        let without = [0.2, 0.3, 0.5];
        let a = group_share_chart(&with, &without, "exposure by group");
        let b = group_share_chart(&with, &without, "exposure by group");
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<rect").count(), 1 + 6 + 2, "backdrop, bars, legend swatches");
        assert!(a.contains("with history"));
        assert!(a.contains("without history"));
    }

    #[test]
    fn titles_are_escaped() {
        let svg = group_share_chart(&[1.0], &[1.0], "a < b & c");
        assert!(svg.contains("a &lt; b &amp; c"));
        assert!(!svg.contains("a < b"));
    }

    #[test]
    fn bar_heights_track_shares() {
        let svg = group_share_chart(&[0.6, 0.0], &[0.0, 0.6], "t");
        // Zero-share bars are drawn with zero height.
        assert!(svg.contains("height=\"0.0000\""));
    }
}
