//! Tracking-error and collision metrics over a simulation log.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::log::SimLog;
use super::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Per-axis mean absolute position error after warmup, m.
    pub mae: [f64; 3],
    /// Per-axis root-mean-square position error after warmup, m.
    pub rmse: [f64; 3],
    /// Error along the first wall normal, when a wall is present, m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_normal_mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_normal_rmse: Option<f64>,
    /// Number of distinct contact episodes over the whole run.
    pub collision_count: usize,
    /// Ticks whose interval contained contact.
    pub collision_ticks: usize,
    /// Deepest rotor penetration past `d_min`, m.
    pub max_penetration: f64,
    /// Ticks on which the controller fell back to a degraded input.
    pub degraded_ticks: usize,
    /// Ticks used for the error statistics.
    pub samples: usize,
}

/// Metrics without a wall-normal projection.
pub fn compute_metrics(log: &SimLog, warmup: f64) -> Result<Metrics, SimError> {
    compute_metrics_along(log, warmup, None)
}

/// Tracking errors use rows with `t ≥ warmup`; collision statistics use the
/// whole run.
pub fn compute_metrics_along(log: &SimLog, warmup: f64, normal: Option<Vector3<f64>>) -> Result<Metrics, SimError> {
    let window: Vec<_> = log.rows.iter().filter(|r| r.t >= warmup).collect();
    if window.is_empty() {
        return Err(SimError::EmptyWindow { warmup, rows: log.len() });
    }
    let n = window.len() as f64;
    let normal = normal.map(|v| v.normalize());
    let mut abs_sum = Vector3::zeros();
    let mut sq_sum = Vector3::zeros();
    let (mut wall_abs, mut wall_sq) = (0.0, 0.0);
    for row in &window {
        let e = row.position() - row.ref_position();
        abs_sum += e.abs();
        sq_sum += e.component_mul(&e);
        if let Some(nrm) = &normal {
            let en = e.dot(nrm);
            wall_abs += en.abs();
            wall_sq += en * en;
        }
    }
    let mae = abs_sum / n;
    let rmse = (sq_sum / n).map(f64::sqrt);

    let mut collision_count = 0;
    let mut previous = false;
    for row in &log.rows {
        if row.collided() && !previous {
            collision_count += 1;
        }
        previous = row.collided();
    }
    Ok(Metrics {
        mae: mae.into(),
        rmse: rmse.into(),
        wall_normal_mae: normal.map(|_| wall_abs / n),
        wall_normal_rmse: normal.map(|_| (wall_sq / n).sqrt()),
        collision_count,
        collision_ticks: log.rows.iter().filter(|r| r.collided()).count(),
        max_penetration: log.rows.iter().map(|r| r.penetration).fold(0.0, f64::max),
        degraded_ticks: log.rows.iter().filter(|r| r.degraded != 0).count(),
        samples: window.len(),
    })
}
