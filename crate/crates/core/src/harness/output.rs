//! Trajectory CSV, JSON summary and SVG renderings of a run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::gait::Mode;
use crate::numerics::Vec3;

use super::config::Obstacle;
use super::sim::{EventKind, Sample, SimLog, Termination};

/// Format tag written in the first CSV line.
pub const CSV_FORMAT: &str = "thrustwalk-trajectory/1";
/// Spacing of stick-diagram keyframes (s).
pub const KEYFRAME_INTERVAL: f64 = 0.25;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV encoding: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON encoding: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io { path: path.to_path_buf(), source }
}

pub fn csv_columns() -> Vec<String> {
    let mut cols: Vec<String> = ["time", "mode", "phase"].map(String::from).to_vec();
    let xyz = |prefix: &str| ["x", "y", "z"].map(|a| format!("{prefix}_{a}"));
    cols.extend(xyz("pos"));
    cols.extend(xyz("vel"));
    cols.extend(["roll", "pitch", "yaw"].map(String::from));
    cols.extend(xyz("omega"));
    cols.extend(["frontal_l", "frontal_r", "hip_l", "hip_r", "knee_l", "knee_r"].map(String::from));
    cols.extend(xyz("com"));
    for side in ["l", "r"] {
        cols.extend(xyz(&format!("foot_{side}")));
    }
    for side in ["l", "r"] {
        cols.extend(xyz(&format!("thrust_{side}")));
    }
    for side in ["l", "r"] {
        cols.extend(xyz(&format!("grf_{side}")));
    }
    cols.extend(["min_hw", "min_hr"].map(String::from));
    cols.extend(xyz("xw"));
    cols.extend(xyz("xr"));
    cols.extend(["mpc_cost", "posture_residual"].map(String::from));
    cols
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Walk => "walk",
        Mode::Stand => "stand",
        Mode::Jump => "jump",
    }
}

fn csv_row(s: &Sample) -> Vec<String> {
    let num = |v: f64| format!("{v:.9e}");
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let mut row = vec![format!("{:.6}", s.time), mode_name(s.mode).to_string(), s.phase_index.to_string()];
    let push3 = |row: &mut Vec<String>, v: &Vec3| row.extend(v.iter().map(|x| num(*x)));
    push3(&mut row, &s.position);
    push3(&mut row, &s.velocity);
    row.extend([s.euler.0, s.euler.1, s.euler.2].map(num));
    push3(&mut row, &s.omega);
    row.extend(s.joints.0.map(num));
    push3(&mut row, &s.com);
    for f in &s.feet {
        push3(&mut row, f);
    }
    row.extend(s.thrust.iter().map(|x| num(*x)));
    for g in &s.grf {
        push3(&mut row, g);
    }
    row.push(opt(s.min_hw));
    row.push(opt(s.min_hr));
    push3(&mut row, &s.x_w);
    push3(&mut row, &s.x_r);
    row.push(opt(s.mpc_cost));
    row.push(opt(s.posture_residual));
    row
}

/// Writes the versioned header and one row per control sample.
pub fn write_csv<W: std::io::Write>(log: &SimLog, mut out: W) -> Result<(), OutputError> {
    writeln!(out, "# {CSV_FORMAT}").map_err(|e| OutputError::Csv(e.into()))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_columns())?;
    for s in &log.samples {
        w.write_record(csv_row(s))?;
    }
    w.flush().map_err(|e| OutputError::Csv(e.into()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpApex {
    pub phase_index: usize,
    pub start: f64,
    pub end: f64,
    pub apex_time: f64,
    pub apex_height: f64,
    /// Apex above the nominal standing height.
    pub rise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObstacleClearance {
    pub x_min: f64,
    pub x_max: f64,
    pub height: f64,
    /// Lowest robot point above the obstacle top while over it.
    pub min_clearance: Option<f64>,
    pub cleared: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EventCounts {
    pub touchdowns: usize,
    pub liftoffs: usize,
    pub saturations: usize,
    pub mpc_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub format: &'static str,
    pub termination: Termination,
    pub samples: usize,
    pub simulated_s: f64,
    pub runtime_s: f64,
    pub max_abs_roll_deg: f64,
    pub max_abs_yaw_deg: f64,
    /// Extremes over walking samples only.
    pub max_abs_roll_walk_deg: f64,
    pub max_abs_yaw_walk_deg: f64,
    pub min_h_w: Option<f64>,
    pub min_h_r: Option<f64>,
    pub max_posture_residual: Option<f64>,
    pub standing_height: f64,
    pub jumps: Vec<JumpApex>,
    pub events: EventCounts,
    pub obstacles: Vec<ObstacleClearance>,
}

fn fold_min(it: impl Iterator<Item = f64>) -> Option<f64> {
    it.fold(None, |m, v| Some(m.map_or(v, |m: f64| m.min(v))))
}

fn max_abs_deg<'a>(it: impl Iterator<Item = &'a Sample>, pick: fn(&Sample) -> f64) -> f64 {
    it.map(|s| pick(s).abs().to_degrees()).fold(0.0, f64::max)
}

impl Summary {
    pub fn new(log: &SimLog, obstacles: &[Obstacle]) -> Self {
        let samples = &log.samples;
        let walking = || samples.iter().filter(|s| s.mode == Mode::Walk);
        let roll = |s: &Sample| s.euler.0;
        let yaw = |s: &Sample| s.euler.2;
        let mut events = EventCounts::default();
        for e in &log.events {
            match e.kind {
                EventKind::Touchdown { .. } => events.touchdowns += 1,
                EventKind::Liftoff { .. } => events.liftoffs += 1,
                EventKind::Saturation => events.saturations += 1,
                EventKind::MpcFallback => events.mpc_fallbacks += 1,
                _ => {}
            }
        }
        Self {
            format: CSV_FORMAT,
            termination: log.termination.clone(),
            samples: samples.len(),
            simulated_s: samples.len() as f64 * log.dt_control,
            runtime_s: log.runtime_s,
            max_abs_roll_deg: max_abs_deg(samples.iter(), roll),
            max_abs_yaw_deg: max_abs_deg(samples.iter(), yaw),
            max_abs_roll_walk_deg: max_abs_deg(walking(), roll),
            max_abs_yaw_walk_deg: max_abs_deg(walking(), yaw),
            min_h_w: fold_min(samples.iter().filter_map(|s| s.min_hw)),
            min_h_r: fold_min(samples.iter().filter_map(|s| s.min_hr)),
            max_posture_residual: samples.iter().filter_map(|s| s.posture_residual).reduce(f64::max),
            standing_height: log.body_height,
            jumps: jump_apexes(log),
            events,
            obstacles: obstacles.iter().map(|o| clearance(samples, o)).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String, OutputError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Highest body position in each contiguous flight segment.
pub fn jump_apexes(log: &SimLog) -> Vec<JumpApex> {
    let mut out: Vec<JumpApex> = Vec::new();
    let mut open = false;
    for s in &log.samples {
        if s.mode != Mode::Jump {
            open = false;
            continue;
        }
        let z = s.position.z;
        match out.last_mut() {
            Some(j) if open => {
                j.end = s.time;
                if z > j.apex_height {
                    j.apex_height = z;
                    j.apex_time = s.time;
                    j.rise = z - log.body_height;
                }
            }
            _ => {
                out.push(JumpApex {
                    phase_index: s.phase_index,
                    start: s.time,
                    end: s.time,
                    apex_time: s.time,
                    apex_height: z,
                    rise: z - log.body_height,
                });
                open = true;
            }
        }
    }
    out
}

fn clearance(samples: &[Sample], o: &Obstacle) -> ObstacleClearance {
    let over = |p: &Vec3| p.x >= o.x_min && p.x <= o.x_max;
    let min = fold_min(samples.iter().flat_map(|s| {
        let mut pts: Vec<Vec3> = s.links.iter().flat_map(|l| l.iter().copied()).collect();
        pts.push(s.position);
        pts.into_iter().filter(over).map(|p| p.z - o.height).collect::<Vec<_>>()
    }));
    ObstacleClearance {
        x_min: o.x_min,
        x_max: o.x_max,
        height: o.height,
        min_clearance: min,
        cleared: min.is_some_and(|c| c > 0.0),
    }
}

/// Indices of the samples drawn as keyframes.
pub fn keyframe_indices(log: &SimLog) -> Vec<usize> {
    let stride = ((KEYFRAME_INTERVAL / log.dt_control).round() as usize).max(1);
    (0..log.samples.len()).step_by(stride).collect()
}

/// Sagittal stick diagram, one `<g class="keyframe">` per keyframe.
pub fn render_frames(log: &SimLog, obstacles: &[Obstacle]) -> String {
    let keys = keyframe_indices(log);
    let pts = || log.samples.iter().flat_map(|s| s.links.iter().flatten().copied().chain([s.position]));
    let x0 = pts().map(|p| p.x).fold(f64::INFINITY, f64::min).min(0.0) - 0.3;
    let x1 = pts().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).max(1.0) + 0.3;
    let z1 = pts().map(|p| p.z).fold(0.8, f64::max) + 0.2;
    let (z0, width) = (-0.1, 1200.0);
    let scale = width / (x1 - x0);
    let height = (z1 - z0) * scale;
    let px = |p: &Vec3| ((p.x - x0) * scale, (z1 - p.z) * scale);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.1} {height:.1}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let g = px(&Vec3::zeros()).1;
    let _ = writeln!(svg, r##"<line x1="0" y1="{g:.1}" x2="{width:.1}" y2="{g:.1}" stroke="#555" stroke-width="2"/>"##);
    for o in obstacles {
        let (a, top) = px(&Vec3::new(o.x_min, 0.0, o.height));
        let (b, _) = px(&Vec3::new(o.x_max, 0.0, 0.0));
        let _ = writeln!(
            svg,
            r##"<rect class="obstacle" x="{a:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="#c96" opacity="0.6"/>"##,
            b - a,
            g - top
        );
    }
    let n = keys.len().max(1) as f64;
    for (i, &k) in keys.iter().enumerate() {
        let s = &log.samples[k];
        let hue = 240.0 * (1.0 - i as f64 / n);
        let _ = writeln!(
            svg,
            r#"<g class="keyframe" data-time="{:.2}" stroke="hsl({hue:.0},70%,40%)" fill="none" stroke-width="2" opacity="0.8">"#,
            s.time
        );
        for (leg, dash) in s.links.iter().zip(["", r#" stroke-dasharray="4 2""#]) {
            let mut path: Vec<String> = vec![format!("{:.1},{:.1}", px(&s.position).0, px(&s.position).1)];
            path.extend(leg.iter().map(|p| {
                let (x, y) = px(p);
                format!("{x:.1},{y:.1}")
            }));
            let _ = writeln!(svg, r#"  <polyline points="{}"{dash}/>"#, path.join(" "));
        }
        let (bx, by) = px(&s.position);
        let _ = writeln!(svg, r#"  <circle cx="{bx:.1}" cy="{by:.1}" r="5"/>"#);
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    values: Vec<Option<f64>>,
}

fn panel(svg: &mut String, top: f64, width: f64, height: f64, title: &str, times: &[f64], series: &[Series]) {
    let (left, right) = (70.0, 20.0);
    let plot_w = width - left - right;
    let plot_h = height - 40.0;
    let all = series.iter().flat_map(|s| s.values.iter().flatten().copied());
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let t0 = times.first().copied().unwrap_or(0.0);
    let t1 = times.last().copied().unwrap_or(1.0).max(t0 + 1e-9);
    let x = |t: f64| left + (t - t0) / (t1 - t0) * plot_w;
    let y = |v: f64| top + 25.0 + (hi - v) / (hi - lo) * plot_h;
    let _ = writeln!(svg, r#"<g class="panel"><text x="{left}" y="{:.1}" font-size="14" font-family="sans-serif">{title}</text>"#, top + 16.0);
    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{:.1}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#999"/>"##,
        top + 25.0
    );
    for v in [lo, hi] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end" font-family="sans-serif">{v:.3}</text>"#,
            left - 5.0,
            y(v) + 4.0
        );
    }
    if lo < 0.0 && hi > 0.0 {
        let _ = writeln!(svg, r##"<line x1="{left}" x2="{:.1}" y1="{1:.1}" y2="{1:.1}" stroke="#ccc"/>"##, left + plot_w, y(0.0));
    }
    for (i, s) in series.iter().enumerate() {
        // Missing values split the line.
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, svg: &mut String| {
            if run.len() > 1 {
                let _ = writeln!(svg, r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#, s.color, run.join(" "));
            }
            run.clear();
        };
        for (t, v) in times.iter().zip(&s.values) {
            match v {
                Some(v) => run.push(format!("{:.1},{:.1}", x(*t), y(*v))),
                None => flush(&mut run, svg),
            }
        }
        flush(&mut run, svg);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{}" font-family="sans-serif">{}</text>"#,
            left + 200.0 + 110.0 * i as f64,
            top + 16.0,
            s.color,
            s.label
        );
    }
    svg.push_str("</g>\n");
}

/// Ground forces, thruster forces and constraint margins against time.
pub fn render_timeseries(log: &SimLog) -> String {
    let (width, ph) = (1000.0, 230.0);
    let times: Vec<f64> = log.samples.iter().map(|s| s.time).collect();
    let col = |f: &dyn Fn(&Sample) -> Option<f64>| log.samples.iter().map(f).collect::<Vec<_>>();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" viewBox="0 0 {width} {0}">"#,
        3.0 * ph
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    panel(
        &mut svg,
        0.0,
        width,
        ph,
        "Ground reaction force, normal (N)",
        &times,
        &[
            Series { label: "left", color: "#1f77b4", values: col(&|s| Some(s.grf[0].z)) },
            Series { label: "right", color: "#d62728", values: col(&|s| Some(s.grf[1].z)) },
        ],
    );
    panel(
        &mut svg,
        ph,
        width,
        ph,
        "Thruster force (N)",
        &times,
        &[
            Series { label: "left x", color: "#2ca02c", values: col(&|s| Some(s.thrust[0])) },
            Series { label: "left z", color: "#1f77b4", values: col(&|s| Some(s.thrust[2])) },
            Series { label: "right x", color: "#ff7f0e", values: col(&|s| Some(s.thrust[3])) },
            Series { label: "right z", color: "#d62728", values: col(&|s| Some(s.thrust[5])) },
        ],
    );
    panel(
        &mut svg,
        2.0 * ph,
        width,
        ph,
        "Constraint margin min h (N)",
        &times,
        &[
            Series { label: "applied h_w", color: "#1f77b4", values: col(&|s| s.min_hw) },
            Series { label: "desired h_r", color: "#d62728", values: col(&|s| s.min_hr) },
        ],
    );
    svg.push_str("</svg>\n");
    svg
}

/// Files produced by [`write_outputs`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputPaths {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub frames: Option<PathBuf>,
    pub timeseries: Option<PathBuf>,
}

pub fn write_outputs(log: &SimLog, obstacles: &[Obstacle], dir: &Path, emit_svg: bool) -> Result<OutputPaths, OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv = dir.join("trajectory.csv");
    let file = fs::File::create(&csv).map_err(io_err(&csv))?;
    write_csv(log, std::io::BufWriter::new(file))?;
    let summary = dir.join("summary.json");
    fs::write(&summary, Summary::new(log, obstacles).to_json()?).map_err(io_err(&summary))?;
    let (mut frames, mut timeseries) = (None, None);
    if emit_svg {
        let f = dir.join("frames.svg");
        fs::write(&f, render_frames(log, obstacles)).map_err(io_err(&f))?;
        let t = dir.join("timeseries.svg");
        fs::write(&t, render_timeseries(log)).map_err(io_err(&t))?;
        (frames, timeseries) = (Some(f), Some(t));
    }
    Ok(OutputPaths { csv, summary, frames, timeseries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run_simulation, SimConfig};

    fn short_log(duration: f64) -> (SimConfig, SimLog) {
        let mut cfg = SimConfig::default();
        cfg.sim.duration = Some(duration);
        cfg.obstacles.push(Obstacle { x_min: -0.05, x_max: 0.05, height: 0.02 });
        let log = run_simulation(&cfg);
        (cfg, log)
    }

    #[test]
    fn csv_has_header_and_one_row_per_tick() {
        let (_, log) = short_log(0.5);
        let mut buf = Vec::new();
        write_csv(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), format!("# {CSV_FORMAT}"));
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header, csv_columns());
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 50);
        assert!(rows.iter().all(|r| r.split(',').count() == header.len()));
        assert!(rows[0].starts_with("0.000000,walk,0,"));
    }

    #[test]
    fn summary_and_svgs() {
        let (cfg, log) = short_log(1.0);
        let s = Summary::new(&log, &cfg.obstacles);
        assert_eq!(s.termination, Termination::Completed);
        assert_eq!(s.samples, 100);
        assert!(s.jumps.is_empty());
        // Feet rest inside the box, so the obstacle is not cleared.
        assert_eq!(s.obstacles.len(), 1);
        assert!(!s.obstacles[0].cleared);
        let json: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(json["termination"]["status"], "completed");
        assert_eq!(json["samples"], 100);

        let frames = render_frames(&log, &cfg.obstacles);
        assert_eq!(frames.matches(r#"<g class="keyframe""#).count(), 4);
        assert_eq!(keyframe_indices(&log), vec![0, 25, 50, 75]);
        let ts = render_timeseries(&log);
        assert_eq!(ts.matches(r#"<g class="panel">"#).count(), 3);
        assert!(ts.starts_with("<svg") && ts.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn apexes_split_on_contiguous_flight() {
        let (_, mut log) = short_log(0.1);
        let template = log.samples[0].clone();
        log.samples = (0..8)
            .map(|i| {
                let mut s = template.clone();
                s.time = i as f64 * 0.01;
                s.mode = if matches!(i, 1..=3 | 5..=6) { Mode::Jump } else { Mode::Walk };
                s.phase_index = if i < 5 { 1 } else { 3 };
                s.position.z = [0.6, 0.7, 0.9, 0.8, 0.6, 0.75, 0.7, 0.6][i];
                s
            })
            .collect();
        let j = jump_apexes(&log);
        assert_eq!(j.len(), 2);
        assert_eq!((j[0].phase_index, j[0].apex_height), (1, 0.9));
        assert!((j[0].rise - 0.3).abs() < 1e-12 && (j[0].end - 0.03).abs() < 1e-12);
        assert_eq!((j[1].phase_index, j[1].apex_time), (3, 0.05));
    }

    #[test]
    fn writes_all_files() {
        let (cfg, log) = short_log(0.3);
        let dir = tempfile::tempdir().unwrap();
        let out = write_outputs(&log, &cfg.obstacles, &dir.path().join("run"), true).unwrap();
        for p in [&out.csv, &out.summary, out.frames.as_ref().unwrap(), out.timeseries.as_ref().unwrap()] {
            assert!(p.exists() && fs::metadata(p).unwrap().len() > 0, "{p:?}");
        }
        let out = write_outputs(&log, &cfg.obstacles, dir.path(), false).unwrap();
        assert!(out.frames.is_none());
    }
}
