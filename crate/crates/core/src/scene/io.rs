//! JSON Lines dataset files and the metrics CSV.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::{AgentControls, Dataset, Metrics, Point, Provenance, Record, Scene, SceneError, Split};

pub const FORMAT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "run_id,split,eps,attack,ade,fde,mr,orr";

const KNOWN_FIELDS: &[&str] = &["format_version", "id", "split", "provenance", "dt", "history", "future", "lanes", "controls"];

#[derive(Serialize)]
struct Line<'a> {
    format_version: u32,
    id: u64,
    split: Split,
    provenance: Provenance,
    dt: f64,
    history: &'a [Vec<Point>],
    future: &'a [Vec<Point>],
    lanes: &'a [Vec<Point>],
    #[serde(skip_serializing_if = "Option::is_none")]
    controls: Option<&'a [Option<AgentControls>]>,
}

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io { path: path.display().to_string(), source }
}

pub fn record_to_json(record: &Record) -> String {
    let s = &record.scene;
    let line = Line {
        format_version: FORMAT_VERSION,
        id: record.id,
        split: record.split,
        provenance: record.provenance,
        dt: s.dt(),
        history: s.history(),
        future: s.future(),
        lanes: s.lanes(),
        controls: s.controls(),
    };
    serde_json::to_string(&line).expect("scene serializes")
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<(), SceneError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in dataset.records() {
        writeln!(w, "{}", record_to_json(r)).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str, line: usize) -> Result<T, SceneError> {
    let v = obj.get(name).ok_or_else(|| SceneError::Schema {
        line,
        field: name.to_string(),
        message: "missing field".into(),
    })?;
    serde_json::from_value(v.clone()).map_err(|e| SceneError::Schema { line, field: name.to_string(), message: e.to_string() })
}

/// Parses one dataset line; `line` is 1-based and only used in errors.
pub fn record_from_json(text: &str, line: usize) -> Result<Record, SceneError> {
    let value: Value = serde_json::from_str(text).map_err(|e| SceneError::Schema {
        line,
        field: "<line>".into(),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| SceneError::Schema {
        line,
        field: "<line>".into(),
        message: "expected a JSON object".into(),
    })?;
    let version = obj.get("format_version").and_then(Value::as_i64).ok_or_else(|| SceneError::Schema {
        line,
        field: "format_version".into(),
        message: "missing or not an integer".into(),
    })?;
    if version != FORMAT_VERSION as i64 {
        return Err(SceneError::FormatVersion { line, found: version, expected: FORMAT_VERSION });
    }
    if let Some(unknown) = obj.keys().find(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
        return Err(SceneError::Schema { line, field: unknown.clone(), message: "unknown field".into() });
    }
    let id = match obj.get("id") {
        Some(_) => field(obj, "id", line)?,
        None => (line - 1) as u64,
    };
    let split = match obj.get("split") {
        Some(_) => field(obj, "split", line)?,
        None => Split::Train,
    };
    let provenance = match obj.get("provenance") {
        Some(_) => field(obj, "provenance", line)?,
        None => Provenance::Real,
    };
    let dt: f64 = field(obj, "dt", line)?;
    let history: Vec<Vec<Point>> = field(obj, "history", line)?;
    let future: Vec<Vec<Point>> = field(obj, "future", line)?;
    let lanes: Vec<Vec<Point>> = field(obj, "lanes", line)?;
    let mut scene = Scene::new(dt, history, future, lanes)?;
    if obj.contains_key("controls") {
        let controls: Option<Vec<Option<AgentControls>>> = field(obj, "controls", line)?;
        if let Some(c) = controls {
            scene = scene.with_controls(c)?;
        }
    }
    Ok(Record { id, split, provenance, scene })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, SceneError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(record_from_json(&line, i + 1)?);
    }
    Ok(Dataset::new(records))
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub split: Split,
    pub eps: f64,
    pub attack: String,
    pub metrics: Metrics,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.run_id,
            self.split.as_str(),
            self.eps,
            self.attack,
            m.ade,
            m.fde,
            m.mr,
            m.orr
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), SceneError> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| io_err(path, e))
}
