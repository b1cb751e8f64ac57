//! Deterministic vector-graphic rendering. The CSVs are the source of
//! truth; every figure is derived from parsed CSV rows, so re-importing a
//! CSV reproduces its figure byte for byte.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;
const COLORS: [&str; 6] = [
    "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    (0..=n).map(|i| lo + span * i as f64 / n as f64).collect()
}

/// Renders a line chart as a self-contained SVG string. Errors on empty
/// input so no empty figure file is ever written.
pub fn line_chart_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Empty(format!("figure {title:?} has no data")));
    }
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
    }
    if !(x_lo.is_finite() && x_hi.is_finite() && y_lo.is_finite() && y_hi.is_finite()) {
        return Err(Error::Empty(format!("figure {title:?} has non-finite data")));
    }
    // A little headroom keeps flat lines off the frame edge.
    let y_pad = ((y_hi - y_lo) * 0.08).max(1e-6);
    let (y_lo, y_hi) = (y_lo - y_pad, y_hi + y_pad);
    let x_span = (x_hi - x_lo).max(1e-12);
    let y_span = y_hi - y_lo;

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x_lo) / x_span * plot_w;
    let sy = |y: f64| MARGIN_T + plot_h - (y - y_lo) / y_span * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    // Axes and ticks.
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_T + plot_h
    ));
    for t in nice_ticks(x_lo, x_hi, 6) {
        let x = sx(t);
        svg.push_str(&format!(
            "  <line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            MARGIN_T + plot_h,
            MARGIN_T + plot_h + 4.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            MARGIN_T + plot_h + 18.0,
            trim_num(t)
        ));
    }
    for t in nice_ticks(y_lo, y_hi, 5) {
        let y = sy(t);
        svg.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{MARGIN_L}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            MARGIN_L - 4.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0,
            trim_num(t)
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\" \
         transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape(y_label)
    ));

    // Series polylines and legend.
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            pts.join(" ")
        ));
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.4\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        let ly = MARGIN_T + 14.0 + 16.0 * i as f64;
        svg.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            MARGIN_L + plot_w - 150.0,
            MARGIN_L + plot_w - 128.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>\n",
            MARGIN_L + plot_w - 122.0,
            ly + 4.0,
            escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn trim_num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn parse_csv(csv: &str, expect_header: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Empty("empty CSV".into()))?;
    if header != expect_header {
        return Err(Error::Dataset(format!(
            "unexpected CSV header {header:?}, expected {expect_header:?}"
        )));
    }
    let rows: Vec<Vec<String>> = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    if rows.is_empty() {
        return Err(Error::Empty("CSV has no data rows".into()));
    }
    Ok(rows)
}

fn f(v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::Dataset(format!("bad number in CSV: {v:?}")))
}

/// Convergence figure from a sweep CSV (sample_id, cycle, class, dice):
/// the mean Dice curve over cycles, one series per class plus the mean.
pub fn convergence_figure_from_csv(csv: &str) -> Result<String> {
    let rows = parse_csv(csv, "sample_id,cycle,class,dice")?;
    let mut by_cycle: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    let mut by_class: std::collections::BTreeMap<(usize, usize), Vec<f64>> = Default::default();
    for r in &rows {
        let cycle: usize = r[1].parse().map_err(|_| Error::Dataset("bad cycle".into()))?;
        let class: usize = r[2].parse().map_err(|_| Error::Dataset("bad class".into()))?;
        let dice = f(&r[3])?;
        by_cycle.entry(cycle).or_default().push(dice);
        by_class.entry((class, cycle)).or_default().push(dice);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut series = vec![Series {
        label: "mean foreground".into(),
        points: by_cycle
            .iter()
            .map(|(&c, v)| (c as f64, mean(v)))
            .collect(),
    }];
    let classes: std::collections::BTreeSet<usize> =
        by_class.keys().map(|&(class, _)| class).collect();
    for class in classes {
        series.push(Series {
            label: format!("class {class}"),
            points: by_class
                .iter()
                .filter(|(&(cl, _), _)| cl == class)
                .map(|(&(_, cy), v)| (cy as f64, mean(v)))
                .collect(),
        });
    }
    line_chart_svg(
        "Per-cycle Dice at inference",
        "inference cycles",
        "Dice",
        &series,
    )
}

/// Memory figure from a memory CSV (mode, n_cycles, retained_count,
/// retained_bytes): retained-activation counts per mode.
pub fn memory_figure_from_csv(csv: &str) -> Result<String> {
    let rows = parse_csv(csv, "mode,n_cycles,retained_count,retained_bytes")?;
    let mut modes: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for r in &rows {
        modes
            .entry(r[0].clone())
            .or_default()
            .push((f(&r[1])?, f(&r[2])?));
    }
    let series: Vec<Series> = modes
        .into_iter()
        .map(|(label, points)| Series { label, points })
        .collect();
    line_chart_svg(
        "Retained activations vs training cycles",
        "training cycles",
        "retained buffers",
        &series,
    )
}

/// Ablation figure from an ablation CSV (policy, seed, cycle, mean_dice):
/// per-policy seed-mean Dice difference to the `baseline` policy's
/// 1-cycle score (or raw Dice when the baseline is absent).
pub fn ablation_figure_from_csv(csv: &str, baseline_policy: Option<&str>) -> Result<String> {
    let rows = parse_csv(csv, "policy,seed,cycle,mean_dice")?;
    let mut per: std::collections::BTreeMap<(String, usize), Vec<f64>> = Default::default();
    for r in &rows {
        let cycle: usize = r[2].parse().map_err(|_| Error::Dataset("bad cycle".into()))?;
        per.entry((r[0].clone(), cycle)).or_default().push(f(&r[3])?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let baseline = match baseline_policy {
        Some(name) => Some(
            per.get(&(name.to_string(), 1))
                .map(|v| mean(v))
                .ok_or_else(|| Error::Dataset(format!("baseline policy {name:?} not in CSV")))?,
        ),
        None => None,
    };
    let policies: std::collections::BTreeSet<String> =
        per.keys().map(|(p, _)| p.clone()).collect();
    let mut series = Vec::new();
    for p in policies {
        if Some(p.as_str()) == baseline_policy {
            continue;
        }
        let points: Vec<(f64, f64)> = per
            .iter()
            .filter(|((pp, _), _)| pp == &p)
            .map(|((_, cy), v)| (*cy as f64, mean(v) - baseline.unwrap_or(0.0)))
            .collect();
        series.push(Series { label: p, points });
    }
    let y_label = if baseline.is_some() {
        "Dice difference to baseline"
    } else {
        "Dice"
    };
    line_chart_svg(
        "Schedule ablation over inference cycles",
        "inference cycles",
        y_label,
        &series,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_figure_is_an_error() {
        assert!(line_chart_svg("t", "x", "y", &[]).is_err());
        assert!(line_chart_svg(
            "t",
            "x",
            "y",
            &[Series {
                label: "a".into(),
                points: vec![]
            }]
        )
        .is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = vec![
            Series {
                label: "a".into(),
                points: vec![(1.0, 0.5), (2.0, 0.75), (3.0, 0.8)],
            },
            Series {
                label: "b".into(),
                points: vec![(1.0, 0.4), (2.0, 0.45), (3.0, 0.44)],
            },
        ];
        let one = line_chart_svg("title", "x", "y", &s).unwrap();
        let two = line_chart_svg("title", "x", "y", &s).unwrap();
        assert_eq!(one, two);
        assert!(one.starts_with("<svg"));
        assert!(one.ends_with("</svg>\n"));
    }

    #[test]
    fn csv_reimport_reproduces_figure() {
        let csv = "sample_id,cycle,class,dice\n0,1,1,0.5\n0,2,1,0.625\n1,1,1,0.4\n1,2,1,0.5\n";
        let a = convergence_figure_from_csv(csv).unwrap();
        let b = convergence_figure_from_csv(csv).unwrap();
        assert_eq!(a, b);
        // Shortest-roundtrip float formatting survives a write/parse cycle.
        let reparsed: String = csv.to_string();
        assert_eq!(convergence_figure_from_csv(&reparsed).unwrap(), a);
    }

    #[test]
    fn csv_header_is_validated() {
        assert!(convergence_figure_from_csv("a,b\n1,2\n").is_err());
        assert!(memory_figure_from_csv("sample_id,cycle,class,dice\n0,1,1,0.5\n").is_err());
    }
}
