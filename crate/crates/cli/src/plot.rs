//! Minimal SVG line charts for the metrics log.

use std::fmt::Write as _;

use gpn_core::trainer::MetricsRow;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

type Series<'a> = (&'a str, Vec<(f64, f64)>);

fn chart(title: &str, series: &[Series<'_>]) -> String {
    let pts = series.iter().flat_map(|s| s.1.iter()).filter(|p| p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
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
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="black" points="{PAD},{PAD} {PAD},{} {},{}"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(s, r#"<text x="4" y="{}">{y1:.3}</text>"#, PAD + 4.0);
    let _ = writeln!(s, r#"<text x="4" y="{}">{y0:.3}</text>"#, H - PAD);
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{x0}</text>"#, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1} frames</text>"#, W - PAD, H - PAD + 16.0);
    for (i, (name, data)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = data
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            W - PAD - 150.0,
            PAD + 16.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

fn series<'a>(rows: &[MetricsRow], name: &'a str, f: impl Fn(&MetricsRow) -> f64) -> Series<'a> {
    (name, rows.iter().map(|r| (r.frames as f64, f(r))).collect())
}

/// Reward vs estimate, failure rate and losses, as `(file name, svg)`.
pub fn charts(rows: &[MetricsRow]) -> Vec<(&'static str, String)> {
    vec![
        (
            "rewards.svg",
            chart(
                "Generated levels: real reward vs estimated U(s0)",
                &[
                    series(rows, "mean real reward", |r| r.mean_real_reward),
                    series(rows, "mean U(s0)", |r| r.mean_u0),
                ],
            ),
        ),
        (
            "failure.svg",
            chart("Uncompilable levels", &[series(rows, "failure rate", |r| r.failure_rate)]),
        ),
        (
            "losses.svg",
            chart(
                "Losses",
                &[
                    series(rows, "value", |r| r.value_loss),
                    series(rows, "policy", |r| r.policy_loss),
                    series(rows, "generator", |r| r.generator_loss),
                    series(rows, "reconstruction", |r| r.reconstruction_loss.unwrap_or(f64::NAN)),
                ],
            ),
        ),
        ("diversity.svg", chart("Diversity", &[series(rows, "D", |r| r.diversity)])),
    ]
}
