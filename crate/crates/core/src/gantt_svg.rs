//! Gantt rendering: one row per node, life cycle on the upper bar and
//! observation on the lower bar, over a time axis in seconds.

use std::fmt::Write as _;

use crate::statechart::{GanttRecord, LifeCycle, Ternary};

const LABEL_W: f64 = 190.0;
const PLOT_W: f64 = 760.0;
const ROW_H: f64 = 30.0;
const BAR_H: f64 = 11.0;
const TOP: f64 = 20.0;
const AXIS_H: f64 = 36.0;
const LEGEND_H: f64 = 28.0;

pub fn lifecycle_color(s: LifeCycle) -> &'static str {
    match s {
        LifeCycle::Inactive => "#d9d9d9",
        LifeCycle::Active => "#2b8cbe",
        LifeCycle::OnHold => "#fdae61",
        LifeCycle::Done => "#1a9850",
    }
}

pub fn observation_color(s: Ternary) -> &'static str {
    match s {
        Ternary::True => "#66bd63",
        Ternary::False => "#d73027",
        Ternary::Unknown => "#969696",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_step(span: f64) -> f64 {
    let raw = span / 8.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

/// Renders records as a standalone SVG document. Rows follow first appearance.
pub fn render(records: &[GanttRecord]) -> String {
    let mut rows: Vec<&str> = Vec::new();
    for r in records {
        if !rows.contains(&r.node.as_str()) {
            rows.push(&r.node);
        }
    }
    let t_end = records.iter().map(|r| r.t1).fold(0.0f64, f64::max);
    let span = if t_end > 0.0 { t_end } else { 1.0 };
    let x = |t: f64| LABEL_W + PLOT_W * t / span;
    let plot_h = rows.len() as f64 * ROW_H;
    let width = LABEL_W + PLOT_W + 30.0;
    let height = TOP + plot_h + AXIS_H + LEGEND_H + 10.0;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (i, name) in rows.iter().enumerate() {
        let y = TOP + i as f64 * ROW_H;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            LABEL_W - 8.0,
            y + BAR_H,
            escape(name)
        )
        .unwrap();
        for r in records.iter().filter(|r| r.node == *name) {
            let (x0, x1) = (x(r.t0), x(r.t1));
            let w = (x1 - x0).max(0.5);
            writeln!(
                s,
                r#"<rect class="lifecycle" x="{x0:.2}" y="{y:.1}" width="{w:.2}" height="{BAR_H}" fill="{}"><title>{} {:?} [{:.2}, {:.2})</title></rect>"#,
                lifecycle_color(r.lifecycle),
                escape(name),
                r.lifecycle,
                r.t0,
                r.t1
            )
            .unwrap();
            writeln!(
                s,
                r#"<rect class="observation" x="{x0:.2}" y="{:.1}" width="{w:.2}" height="{BAR_H}" fill="{}"><title>{} {:?} [{:.2}, {:.2})</title></rect>"#,
                y + BAR_H + 1.0,
                observation_color(r.observation),
                escape(name),
                r.observation,
                r.t0,
                r.t1
            )
            .unwrap();
        }
    }

    let axis_y = TOP + plot_h + 4.0;
    writeln!(
        s,
        r#"<line x1="{LABEL_W}" y1="{axis_y}" x2="{:.1}" y2="{axis_y}" stroke="black"/>"#,
        LABEL_W + PLOT_W
    )
    .unwrap();
    let step = tick_step(span);
    let mut k = 0;
    loop {
        let t = k as f64 * step;
        if t > span + 1e-9 {
            break;
        }
        let tx = x(t);
        writeln!(s, r#"<line x1="{tx:.2}" y1="{axis_y}" x2="{tx:.2}" y2="{:.1}" stroke="black"/>"#, axis_y + 5.0).unwrap();
        writeln!(s, r#"<text x="{tx:.2}" y="{:.1}" text-anchor="middle">{}</text>"#, axis_y + 18.0, trim(t)).unwrap();
        k += 1;
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">time [s]</text>"#,
        LABEL_W + PLOT_W / 2.0,
        axis_y + 32.0
    )
    .unwrap();

    let ly = axis_y + AXIS_H + 6.0;
    let mut lx = 10.0;
    let entries: Vec<(String, &str)> = [LifeCycle::Inactive, LifeCycle::Active, LifeCycle::OnHold, LifeCycle::Done]
        .iter()
        .map(|l| (format!("{l:?}"), lifecycle_color(*l)))
        .chain([Ternary::True, Ternary::False, Ternary::Unknown].iter().map(|o| (format!("obs {o:?}"), observation_color(*o))))
        .collect();
    writeln!(s, r#"<g class="legend">"#).unwrap();
    for (label, color) in entries {
        writeln!(s, r#"<rect x="{lx:.1}" y="{ly:.1}" width="12" height="12" fill="{color}"/>"#).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}">{label}</text>"#, lx + 16.0, ly + 10.0).unwrap();
        lx += 16.0 + 8.0 * label.len() as f64 + 14.0;
    }
    writeln!(s, "</g>").unwrap();
    s.push_str("</svg>\n");
    s
}

fn trim(t: f64) -> String {
    let s = format!("{t:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_gantt_has_axis_only() {
        let s = render(&[]);
        assert!(s.starts_with("<svg") && s.contains("time [s]"));
        assert!(!s.contains("class=\"lifecycle\""));
    }

    #[test]
    fn single_interval_is_one_segment() {
        let r = GanttRecord {
            node: "A & B".into(),
            t0: 0.0,
            t1: 2.0,
            lifecycle: LifeCycle::Done,
            observation: Ternary::True,
        };
        let s = render(&[r]);
        assert_eq!(s.matches("class=\"lifecycle\"").count(), 1);
        assert!(s.contains("A &amp; B") && s.contains(lifecycle_color(LifeCycle::Done)));
    }
}
