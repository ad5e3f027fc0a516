//! Per-tick simulation log and its CSV form.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::dynamics::ControlInput;
use crate::manifold::State;

/// One control tick. Rotations are rotation vectors; `collision` and
/// `penetration` describe the interval that starts at this tick.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub ref_px: f64,
    pub ref_py: f64,
    pub ref_pz: f64,
    pub ref_rx: f64,
    pub ref_ry: f64,
    pub ref_rz: f64,
    pub ref_vx: f64,
    pub ref_vy: f64,
    pub ref_vz: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    #[serde(rename = "T_cmd")]
    pub t_cmd: f64,
    pub wx_cmd: f64,
    pub wy_cmd: f64,
    pub wz_cmd: f64,
    #[serde(rename = "T_act")]
    pub t_act: f64,
    pub wx_act: f64,
    pub wy_act: f64,
    pub wz_act: f64,
    #[serde(rename = "Fs_x")]
    pub fs_x: f64,
    #[serde(rename = "Fs_y")]
    pub fs_y: f64,
    #[serde(rename = "Fs_z")]
    pub fs_z: f64,
    pub collision: u8,
    pub cost: f64,
    pub solve_ms: f64,
    pub degraded: u8,
    pub penetration: f64,
}

pub const CSV_COLUMNS: [&str; 35] = [
    "t", "ref_px", "ref_py", "ref_pz", "ref_rx", "ref_ry", "ref_rz", "ref_vx", "ref_vy", "ref_vz", "px", "py", "pz",
    "rx", "ry", "rz", "vx", "vy", "vz", "T_cmd", "wx_cmd", "wy_cmd", "wz_cmd", "T_act", "wx_act", "wy_act", "wz_act",
    "Fs_x", "Fs_y", "Fs_z", "collision", "cost", "solve_ms", "degraded", "penetration",
];

/// Everything recorded for one tick, in structured form.
#[derive(Debug, Clone, Copy)]
pub struct TickRecord {
    pub t: f64,
    pub reference: State,
    pub state: State,
    pub u_cmd: ControlInput,
    pub u_act: ControlInput,
    pub suction: Vector3<f64>,
    pub collision: bool,
    pub cost: f64,
    pub solve_ms: f64,
    pub degraded: bool,
    pub penetration: f64,
}

impl LogRow {
    pub fn from_record(r: &TickRecord) -> Self {
        let rr = r.reference.rotation_vector();
        let rs = r.state.rotation_vector();
        Self {
            t: r.t,
            ref_px: r.reference.p.x,
            ref_py: r.reference.p.y,
            ref_pz: r.reference.p.z,
            ref_rx: rr.x,
            ref_ry: rr.y,
            ref_rz: rr.z,
            ref_vx: r.reference.v.x,
            ref_vy: r.reference.v.y,
            ref_vz: r.reference.v.z,
            px: r.state.p.x,
            py: r.state.p.y,
            pz: r.state.p.z,
            rx: rs.x,
            ry: rs.y,
            rz: rs.z,
            vx: r.state.v.x,
            vy: r.state.v.y,
            vz: r.state.v.z,
            t_cmd: r.u_cmd.thrust,
            wx_cmd: r.u_cmd.omega.x,
            wy_cmd: r.u_cmd.omega.y,
            wz_cmd: r.u_cmd.omega.z,
            t_act: r.u_act.thrust,
            wx_act: r.u_act.omega.x,
            wy_act: r.u_act.omega.y,
            wz_act: r.u_act.omega.z,
            fs_x: r.suction.x,
            fs_y: r.suction.y,
            fs_z: r.suction.z,
            collision: r.collision as u8,
            cost: r.cost,
            solve_ms: r.solve_ms,
            degraded: r.degraded as u8,
            penetration: r.penetration,
        }
    }

    pub fn ref_position(&self) -> Vector3<f64> {
        Vector3::new(self.ref_px, self.ref_py, self.ref_pz)
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.px, self.py, self.pz)
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.vz)
    }

    pub fn rotation_vector(&self) -> Vector3<f64> {
        Vector3::new(self.rx, self.ry, self.rz)
    }

    pub fn state(&self) -> State {
        State::from_rotation_vector(self.position(), self.rotation_vector(), self.velocity())
    }

    pub fn reference(&self) -> State {
        State::from_rotation_vector(
            self.ref_position(),
            Vector3::new(self.ref_rx, self.ref_ry, self.ref_rz),
            Vector3::new(self.ref_vx, self.ref_vy, self.ref_vz),
        )
    }

    pub fn commanded(&self) -> ControlInput {
        ControlInput::new(self.t_cmd, Vector3::new(self.wx_cmd, self.wy_cmd, self.wz_cmd))
    }

    pub fn actuated(&self) -> ControlInput {
        ControlInput::new(self.t_act, Vector3::new(self.wx_act, self.wy_act, self.wz_act))
    }

    pub fn suction(&self) -> Vector3<f64> {
        Vector3::new(self.fs_x, self.fs_y, self.fs_z)
    }

    pub fn collided(&self) -> bool {
        self.collision != 0
    }

    /// All columns except the wall-clock `solve_ms`.
    pub fn deterministic_values(&self) -> [f64; 34] {
        [
            self.t,
            self.ref_px,
            self.ref_py,
            self.ref_pz,
            self.ref_rx,
            self.ref_ry,
            self.ref_rz,
            self.ref_vx,
            self.ref_vy,
            self.ref_vz,
            self.px,
            self.py,
            self.pz,
            self.rx,
            self.ry,
            self.rz,
            self.vx,
            self.vy,
            self.vz,
            self.t_cmd,
            self.wx_cmd,
            self.wy_cmd,
            self.wz_cmd,
            self.t_act,
            self.wx_act,
            self.wy_act,
            self.wz_act,
            self.fs_x,
            self.fs_y,
            self.fs_z,
            self.collision as f64,
            self.cost,
            self.degraded as f64,
            self.penetration,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimLog {
    pub rows: Vec<LogRow>,
}

impl SimLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Bitwise equality of every column except `solve_ms` (NaN equals NaN).
    pub fn same_trajectory(&self, other: &SimLog) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.deterministic_values()
                    .iter()
                    .zip(b.deterministic_values().iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Largest absolute difference over all columns except `solve_ms` and
    /// `cost`; `None` if the logs differ in length.
    pub fn max_abs_diff(&self, other: &SimLog) -> Option<f64> {
        if self.rows.len() != other.rows.len() {
            return None;
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.rows.iter().zip(&other.rows) {
            let (a, b) = (a.deterministic_values(), b.deterministic_values());
            for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
                if i == 31 || (x.is_nan() && y.is_nan()) {
                    continue;
                }
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut writer = csv::Writer::from_writer(w);
        if self.rows.is_empty() {
            writer.write_record(CSV_COLUMNS).map_err(csv_error)?;
        }
        for row in &self.rows {
            writer.serialize(row).map_err(csv_error)?;
        }
        writer.flush().map_err(|e| SimError::Io(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<SimLog, SimError> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers().map_err(csv_error)?.clone();
        if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
            return Err(SimError::Csv {
                line: Some(1),
                message: format!("unexpected header; expected {}", CSV_COLUMNS.join(",")),
            });
        }
        let mut rows = Vec::new();
        for record in reader.deserialize::<LogRow>() {
            rows.push(record.map_err(csv_error)?);
        }
        let log = SimLog { rows };
        if let Some(i) = log.rows.windows(2).position(|w| !(w[1].t > w[0].t)) {
            return Err(SimError::Csv {
                line: Some(i as u64 + 3),
                message: "time must increase".into(),
            });
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let file = std::fs::File::create(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<SimLog, SimError> {
        let file = std::fs::File::open(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        SimLog::read_csv(std::io::BufReader::new(file))
    }
}

fn csv_error(e: csv::Error) -> SimError {
    let line = e.position().map(|p| p.line());
    SimError::Csv {
        line,
        message: e.to_string(),
    }
}
