use std::fs;
use std::path::{Path, PathBuf};

use plansense::cost::CostModel;
use plansense::prediction::{DetectionSet, PredictionSet};
use plansense::scene::Scene;
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Input(format!("bad output path {}", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| CliError::Input(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// CSV with the run config on a leading `#` line.
pub fn write_csv(path: &Path, config: &Value, header: &str, rows: &[String]) -> CliResult<()> {
    let mut text = format!("# config: {config}\n{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Creates the directory and checks that it accepts files.
pub fn prepare_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| CliError::Input(format!("{} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{} is not a file", path.display())))
    }
}

/// Scene files (`*.json`) directly under `dir`, sorted by name.
pub fn scene_paths(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Input(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Input(format!("no scene files in {}", dir.display())));
    }
    Ok(paths)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_scenes(paths: &[PathBuf]) -> CliResult<Vec<(String, Scene)>> {
    paths
        .iter()
        .map(|p| Ok((stem(p), Scene::load(p).map_err(|e| CliError::from(e).context(&stem(p)))?)))
        .collect()
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

/// Returns the payload under `key` when the file is a `{config, key}`
/// envelope, otherwise the whole document.
fn unwrap_envelope(path: &Path, key: &str) -> CliResult<String> {
    let text = read(path)?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(match value.get(key) {
        Some(inner) if value.get("config").is_some() => inner.to_string(),
        _ => text,
    })
}

pub fn envelope<T: Serialize>(config: &Value, key: &str, payload: &T) -> CliResult<Value> {
    let payload = serde_json::to_value(payload).map_err(|e| CliError::Numerical(e.to_string()))?;
    Ok(serde_json::json!({ "config": config, key: payload }))
}

pub fn load_model(path: &Path) -> CliResult<CostModel> {
    CostModel::from_json(&unwrap_envelope(path, "model")?).map_err(|e| CliError::from(e).context(&path.display().to_string()))
}

pub fn load_predictions(path: &Path) -> CliResult<PredictionSet> {
    PredictionSet::from_json(&unwrap_envelope(path, "predictions")?)
        .map_err(|e| CliError::from(e).context(&path.display().to_string()))
}

pub fn load_detections(path: &Path) -> CliResult<DetectionSet> {
    DetectionSet::from_json(&unwrap_envelope(path, "detections")?)
        .map_err(|e| CliError::from(e).context(&path.display().to_string()))
}

/// Raw JSON text of a core type that renders itself.
pub fn raw_json(text: &str) -> CliResult<Value> {
    serde_json::from_str(text).map_err(|e| CliError::Numerical(e.to_string()))
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}
