//! SVG Gantt charts: one lane per device, one rectangle per event.

use std::fmt::Write as _;
use std::path::Path;

use super::{makespan, BatchKind, EventKind, ScheduleTrace};
use crate::error::{Error, Result};

const STEP_PX: f64 = 36.0;
const LANE_PX: f64 = 28.0;
const LEFT: f64 = 72.0;
const TOP: f64 = 24.0;

fn fill(kind: EventKind, batch: BatchKind) -> &'static str {
    match (kind, batch) {
        (EventKind::Fw, BatchKind::Bp) => "#4c78a8",
        (EventKind::Fw, BatchKind::Gp) => "#9ecae9",
        (EventKind::Bw, _) => "#54a24b",
        (EventKind::PredictorFw, _) => "#f58518",
    }
}

fn label(kind: EventKind) -> &'static str {
    match kind {
        EventKind::Fw => "F",
        EventKind::Bw => "B",
        EventKind::PredictorFw => "P",
    }
}

/// SVG text of the chart. Identical traces render to identical bytes.
pub fn render_gantt(trace: &ScheduleTrace) -> Result<String> {
    let span = makespan(trace).map_err(|_| Error::Schedule("cannot draw an empty trace".into()))?;
    let steps = span.ceil() as usize;
    let width = LEFT + steps as f64 * STEP_PX + 16.0;
    let height = TOP + trace.devices as f64 * LANE_PX + 8.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="monospace" font-size="11">"#
    )
    .unwrap();
    writeln!(s, "<title>{} schedule, makespan {span}</title>", trace.strategy).unwrap();
    for step in 0..=steps {
        let x = LEFT + step as f64 * STEP_PX;
        writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="14" text-anchor="middle">{step}</text>"##,
            TOP - 4.0,
            height - 8.0
        )
        .unwrap();
    }
    for d in 0..trace.devices {
        let y = TOP + d as f64 * LANE_PX + LANE_PX / 2.0 + 4.0;
        writeln!(s, r#"<text x="4" y="{y:.1}">device {d}</text>"#).unwrap();
    }
    for e in &trace.events {
        let x = LEFT + e.start * STEP_PX;
        let y = TOP + e.device as f64 * LANE_PX + 2.0;
        let w = e.duration * STEP_PX;
        writeln!(
            s,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{:.2}" fill="{}" stroke="#333" stroke-width="0.5"/>"##,
            LANE_PX - 4.0,
            fill(e.kind, trace.batches[e.batch])
        )
        .unwrap();
        if w >= 14.0 {
            writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" fill="white">{}{}{}</text>"#,
                x + w / 2.0,
                y + LANE_PX / 2.0 + 2.0,
                label(e.kind),
                e.micro_batch,
                if e.batch > 0 { format!("'{}", e.batch) } else { String::new() }
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn export_gantt(trace: &ScheduleTrace, path: &Path) -> Result<()> {
    let svg = render_gantt(trace)?;
    std::fs::write(path, svg).map_err(|e| Error::Schedule(format!("cannot write {}: {e}", path.display())))
}
