//! JSON configuration and controller × k_s × seed experiment grids.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::log::SimLog;
use super::metrics::Metrics;
use super::{simulate, ControllerKind, SimConfig, SimError};

/// The shipped defaults; user configs are merged over this document.
pub const DEFAULTS_JSON: &str = include_str!("../../../../configs/defaults.json");

/// Recursively merges `overlay` into `base`. Objects merge key by key unless
/// their `kind` tags differ; any other value (arrays included) replaces the
/// base value.
pub fn merge_json(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) if o.get("kind").is_none_or(|k| b.get("kind") == Some(k)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn defaults_value() -> Value {
    serde_json::from_str(DEFAULTS_JSON).expect("shipped defaults parse")
}

/// Merges `overrides` over the defaults, deserializes and validates.
pub fn sim_config_from_value(overrides: Value) -> Result<SimConfig, SimError> {
    let mut value = defaults_value();
    merge_json(&mut value, overrides);
    let cfg: SimConfig = serde_json::from_value(value).map_err(|e| SimError::Config {
        field: json_field(&e.to_string()),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn sim_config_from_str(text: &str) -> Result<SimConfig, SimError> {
    let value: Value = serde_json::from_str(text).map_err(|e| SimError::Config {
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    sim_config_from_value(value)
}

/// Best-effort field name from a serde message such as "unknown field `foo`".
fn json_field(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    #[default]
    Both,
}

/// A grid of runs sharing one base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Overrides merged over the defaults for every run.
    #[serde(default)]
    pub base: Value,
    pub controllers: Vec<ControllerKind>,
    /// Plant suction gains; the base `suction_true.k_s` when empty.
    #[serde(default)]
    pub k_s: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Output directory relative to the output root.
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub format: ReportFormat,
    /// Write each run's log and metrics, not only the summary.
    #[serde(default = "default_true")]
    pub write_logs: bool,
}

fn default_true() -> bool {
    true
}

/// One expanded grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub controller: ControllerKind,
    pub k_s: f64,
    pub seed: u64,
    pub config: SimConfig,
}

impl FromStr for ExperimentSpec {
    type Err = SimError;

    fn from_str(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Config {
            field: json_field(&e.to_string()),
            message: e.to_string(),
        })
    }
}

impl ExperimentSpec {
    /// Expands the grid, validating every configuration.
    pub fn expand(&self) -> Result<Vec<RunSpec>, SimError> {
        if self.controllers.is_empty() || self.seeds.is_empty() {
            return Err(SimError::Config {
                field: "controllers/seeds".into(),
                message: "experiment grid is empty".into(),
            });
        }
        let base = sim_config_from_value(self.base.clone())?;
        let gains = if self.k_s.is_empty() {
            vec![base.suction_true.k_s]
        } else {
            self.k_s.clone()
        };
        let mut runs = Vec::new();
        let mut names = HashSet::new();
        for controller in &self.controllers {
            for &k_s in &gains {
                for &seed in &self.seeds {
                    let mut config = base.clone();
                    config.controller = *controller;
                    config.suction_true.k_s = k_s;
                    config.seed = seed;
                    config.validate()?;
                    let name = format!("{}_ks{}_seed{}", controller.name(), k_s, seed);
                    if !names.insert(name.clone()) {
                        return Err(SimError::Config {
                            field: "k_s/seeds".into(),
                            message: format!("duplicate run `{name}`"),
                        });
                    }
                    runs.push(RunSpec {
                        name,
                        controller: *controller,
                        k_s,
                        seed,
                        config,
                    });
                }
            }
        }
        Ok(runs)
    }
}

pub struct RunOutcome {
    pub spec: RunSpec,
    pub result: Result<(SimLog, Metrics), SimError>,
}

/// Runs every grid point on up to `jobs` threads, preserving grid order.
pub fn run_grid(runs: Vec<RunSpec>, jobs: usize) -> Vec<RunOutcome> {
    let work = || {
        runs.into_par_iter()
            .map(|spec| {
                let result = simulate(&spec.config);
                RunOutcome { spec, result }
            })
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    }
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub controller: ControllerKind,
    pub k_s: f64,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub mae_x: Option<f64>,
    pub mae_y: Option<f64>,
    pub mae_z: Option<f64>,
    pub rmse_x: Option<f64>,
    pub rmse_y: Option<f64>,
    pub rmse_z: Option<f64>,
    pub wall_normal_mae: Option<f64>,
    pub wall_normal_rmse: Option<f64>,
    pub collision_count: Option<usize>,
    pub collision_ticks: Option<usize>,
    pub max_penetration: Option<f64>,
    pub degraded_ticks: Option<usize>,
}

impl SummaryRow {
    pub fn new(spec: &RunSpec, result: &Result<(SimLog, Metrics), SimError>) -> Self {
        let mut row = SummaryRow {
            run: spec.name.clone(),
            controller: spec.controller,
            k_s: spec.k_s,
            seed: spec.seed,
            ok: result.is_ok(),
            error: None,
            mae_x: None,
            mae_y: None,
            mae_z: None,
            rmse_x: None,
            rmse_y: None,
            rmse_z: None,
            wall_normal_mae: None,
            wall_normal_rmse: None,
            collision_count: None,
            collision_ticks: None,
            max_penetration: None,
            degraded_ticks: None,
        };
        match result {
            Ok((_, m)) => {
                [row.mae_x, row.mae_y, row.mae_z] = m.mae.map(Some);
                [row.rmse_x, row.rmse_y, row.rmse_z] = m.rmse.map(Some);
                row.wall_normal_mae = m.wall_normal_mae;
                row.wall_normal_rmse = m.wall_normal_rmse;
                row.collision_count = Some(m.collision_count);
                row.collision_ticks = Some(m.collision_ticks);
                row.max_penetration = Some(m.max_penetration);
                row.degraded_ticks = Some(m.degraded_ticks);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    }
}

/// Wall-clock solve statistics, kept apart from the deterministic summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub run: String,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
}

impl TimingRow {
    pub fn new(name: &str, log: &SimLog) -> Self {
        let n = log.len().max(1) as f64;
        Self {
            run: name.to_string(),
            mean_solve_ms: log.rows.iter().map(|r| r.solve_ms).sum::<f64>() / n,
            max_solve_ms: log.rows.iter().map(|r| r.solve_ms).fold(0.0, f64::max),
        }
    }
}

pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| SimError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| SimError::Io(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SimError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SimError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn shipped_defaults_match_code_defaults() {
        let cfg: SimConfig = serde_json::from_str(DEFAULTS_JSON).unwrap();
        assert_eq!(cfg, SimConfig::default());
    }

    #[test]
    fn merge_is_deep() {
        let mut base = json!({"a": {"b": 1, "c": [1, 2]}, "d": 0});
        merge_json(&mut base, json!({"a": {"c": [3], "e": true}}));
        assert_eq!(base, json!({"a": {"b": 1, "c": [3], "e": true}, "d": 0}));
        let mut tagged = json!({"t": {"kind": "hover", "position": [0, 0, 1]}});
        merge_json(&mut tagged, json!({"t": {"kind": "line", "speed": 1}}));
        assert_eq!(tagged, json!({"t": {"kind": "line", "speed": 1}}));
        merge_json(&mut tagged, json!({"t": {"kind": "line", "repeat": true}}));
        assert_eq!(tagged, json!({"t": {"kind": "line", "speed": 1, "repeat": true}}));
    }

    #[test]
    fn overrides_are_validated() {
        let cfg = sim_config_from_value(json!({"suction_true": {"k_s": 7.0}, "seed": 3})).unwrap();
        assert_eq!(cfg.suction_true.k_s, 7.0);
        assert_eq!(cfg.suction_true.d_thr, SimConfig::default().suction_true.d_thr);
        match sim_config_from_value(json!({"ctrl_dt": -0.01})) {
            Err(SimError::Config { field, .. }) => assert_eq!(field, "ctrl_dt"),
            other => panic!("{other:?}"),
        }
        match sim_config_from_value(json!({"bogus": 1})) {
            Err(SimError::Config { field, .. }) => assert_eq!(field, "bogus"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_expansion_counts_and_names() {
        let spec = ExperimentSpec {
            name: "t".into(),
            base: json!({}),
            controllers: vec![ControllerKind::Pid, ControllerKind::Mpc, ControllerKind::Scmpc],
            k_s: vec![10.0],
            seeds: (0..5).collect(),
            output_dir: None,
            format: ReportFormat::Both,
            write_logs: false,
        };
        let runs = spec.expand().unwrap();
        assert_eq!(runs.len(), 15);
        assert_eq!(runs[0].name, "pid_ks10_seed0");
        assert!(runs.iter().all(|r| r.config.suction_true.k_s == 10.0));

        let dup = ExperimentSpec {
            seeds: vec![1, 1],
            ..spec.clone()
        };
        assert!(dup.expand().is_err());
        let empty = ExperimentSpec {
            controllers: vec![],
            ..spec
        };
        assert!(empty.expand().is_err());
    }
}
