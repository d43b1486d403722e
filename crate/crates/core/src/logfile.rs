//! CSV simulation logs, run metadata sidecars and recorded hand streams.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::ocp::PlanStatus;
use crate::predictor::HumanObservation;
use crate::sim::{LogRow, SimLog};
use crate::so3::RpyAngles;

pub const LOG_HEADER: &str = "t,q1,q2,q3,q4,q5,q6,q7,dq1,dq2,dq3,dq4,dq5,dq6,dq7,prx,pry,prz,rr,rp,ry,\
phi_c,dphi,phi_h,phi_ho,w_pred,ep1,ep2,eo1,eo2,b_p1_lo,b_p1_up,b_p2_lo,b_p2_up,b_o1_lo,b_o1_up,b_o2_lo,b_o2_up,status,solve_ms";

pub const HAND_STREAM_HEADER: &str = "t,px,py,pz,vx,vy,vz,roll,pitch,yaw";

const N_COLUMNS: usize = 40;

fn io<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(e.to_string())
}

/// Shortest representation that parses back to the same value.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn status_name(s: PlanStatus) -> &'static str {
    match s {
        PlanStatus::Solved => "solved",
        PlanStatus::MaxIterations => "max_iterations",
        PlanStatus::Fallback => "fallback",
    }
}

fn parse_status(s: &str) -> Option<PlanStatus> {
    match s {
        "solved" => Some(PlanStatus::Solved),
        "max_iterations" => Some(PlanStatus::MaxIterations),
        "fallback" => Some(PlanStatus::Fallback),
        _ => None,
    }
}

pub fn format_row(r: &LogRow) -> String {
    let mut f: Vec<String> = Vec::with_capacity(N_COLUMNS);
    f.push(num(r.t));
    f.extend(r.q.iter().map(|v| num(*v)));
    f.extend(r.dq.iter().map(|v| num(*v)));
    f.extend(r.p_r.iter().map(|v| num(*v)));
    f.extend(r.rpy_r.iter().map(|v| num(*v)));
    for v in [r.phi_c, r.dphi, r.phi_h, r.phi_ho, r.w_pred] {
        f.push(num(v));
    }
    f.extend(r.e_orth.iter().map(|v| num(*v)));
    for (lo, up) in r.bounds {
        f.push(num(lo));
        f.push(num(up));
    }
    f.push(status_name(r.status).to_string());
    f.push(num(r.solve_ms));
    f.join(",")
}

/// The full CSV text for a log.
pub fn log_to_csv(log: &SimLog) -> String {
    let mut out = String::with_capacity(512 * (log.rows.len() + 1));
    out.push_str(LOG_HEADER);
    out.push('\n');
    for r in &log.rows {
        out.push_str(&format_row(r));
        out.push('\n');
    }
    out
}

/// Metadata written next to every log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub scenario: Scenario,
    pub seed: u64,
    pub version: String,
    pub rows: usize,
    pub grasp_time: Option<f64>,
}

/// Writes `<dir>/<name>.csv` and `<dir>/<name>.json`; returns the CSV path.
pub fn write_log(log: &SimLog, scenario: &Scenario, dir: &Path) -> Result<std::path::PathBuf> {
    if log.rows.is_empty() {
        return Err(Error::Validation { field: "log".into(), message: "no rows to write".into() });
    }
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", log.scenario));
    let mut f = std::fs::File::create(&csv_path)?;
    f.write_all(log_to_csv(log).as_bytes())?;
    let meta = RunMetadata {
        scenario: scenario.clone(),
        seed: log.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        rows: log.rows.len(),
        grasp_time: log.grasp_time,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(io)?;
    std::fs::write(dir.join(format!("{}.json", log.scenario)), json)?;
    Ok(csv_path)
}

fn parse_fields(line: &str, lineno: usize, n: usize, origin: &str) -> Result<Vec<String>> {
    let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
    if fields.len() != n {
        return Err(Error::Parse { location: format!("{origin}:{lineno}"), message: format!("expected {n} columns, got {}", fields.len()) });
    }
    Ok(fields)
}

fn parse_f64(s: &str, lineno: usize, origin: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|e| Error::Parse { location: format!("{origin}:{lineno}"), message: format!("{s:?}: {e}") })
}

pub fn parse_log(text: &str, origin: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOG_HEADER) {
        return Err(Error::Parse { location: format!("{origin}:1"), message: "unexpected header".into() });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_fields(line, lineno, N_COLUMNS, origin)?;
        let mut v = Vec::with_capacity(N_COLUMNS);
        for (j, s) in f.iter().enumerate() {
            v.push(if j == 38 { 0.0 } else { parse_f64(s, lineno, origin)? });
        }
        let status = parse_status(&f[38])
            .ok_or_else(|| Error::Parse { location: format!("{origin}:{lineno}"), message: format!("unknown status {:?}", f[38]) })?;
        let a3 = |k: usize| [v[k], v[k + 1], v[k + 2]];
        rows.push(LogRow {
            t: v[0],
            q: v[1..8].to_vec(),
            dq: v[8..15].to_vec(),
            p_r: a3(15),
            rpy_r: a3(18),
            phi_c: v[21],
            dphi: v[22],
            phi_h: v[23],
            phi_ho: v[24],
            w_pred: v[25],
            e_orth: [v[26], v[27], v[28], v[29]],
            bounds: [(v[30], v[31]), (v[32], v[33]), (v[34], v[35]), (v[36], v[37])],
            status,
            solve_ms: v[39],
        });
    }
    Ok(rows)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_log(&text, &path.display().to_string())
}

/// `(t, phi_c, phi_h, phi_ho)` series for plotting path progress.
pub fn progress_series(rows: &[LogRow]) -> Vec<[f64; 4]> {
    rows.iter().map(|r| [r.t, r.phi_c, r.phi_h, r.phi_ho]).collect()
}

pub fn hand_stream_to_csv(stream: &[HumanObservation]) -> Result<String> {
    let mut out = String::from(HAND_STREAM_HEADER);
    out.push('\n');
    for o in stream {
        let rpy = crate::so3::rpy_from_rotation(&o.rotation)?;
        let vals = [o.t, o.position.x, o.position.y, o.position.z, o.velocity.x, o.velocity.y, o.velocity.z, rpy.roll, rpy.pitch, rpy.yaw];
        out.push_str(&vals.iter().map(|v| num(*v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Reads a recorded hand stream; rows must be sorted by time.
pub fn parse_hand_stream(text: &str, origin: &str) -> Result<Vec<HumanObservation>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HAND_STREAM_HEADER) {
        return Err(Error::Parse { location: format!("{origin}:1"), message: "unexpected header".into() });
    }
    let mut out: Vec<HumanObservation> = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_fields(line, lineno, 10, origin)?;
        let v: Vec<f64> = f.iter().map(|s| parse_f64(s, lineno, origin)).collect::<Result<_>>()?;
        if out.last().is_some_and(|o| v[0] < o.t) {
            return Err(Error::Parse { location: format!("{origin}:{lineno}"), message: "time not sorted".into() });
        }
        out.push(HumanObservation {
            t: v[0],
            position: Vector3::new(v[1], v[2], v[3]),
            velocity: Vector3::new(v[4], v[5], v[6]),
            rotation: RpyAngles::new(v[7], v[8], v[9]).to_rotation(),
        });
    }
    Ok(out)
}
