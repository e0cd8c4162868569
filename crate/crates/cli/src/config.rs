//! Config files and flag overrides for `tcape train`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tcape_core::trainer::{Preset, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub fixtures: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// What gets echoed to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub paths: Paths,
}

/// Reads TOML or JSON (by extension) into a JSON value.
pub fn read_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let v = if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        let t: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        serde_json::to_value(t)?
    };
    if !v.is_object() {
        bail!("config {} must be a table", path.display());
    }
    Ok(v)
}

fn unknown_keys(defaults: &Value, given: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(d), Value::Object(g)) = (defaults, given) else {
        return;
    };
    for (k, v) in g {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match d.get(k) {
            None => out.push(name),
            Some(dv) if dv.is_object() => unknown_keys(dv, v, &name, out),
            Some(_) => {}
        }
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn set(root: &mut Value, dotted: &str, v: Value) {
    let mut cur = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .expect("object")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut()
        .expect("object")
        .insert(parts[parts.len() - 1].to_string(), v);
}

/// Preset defaults, then the file, then flag overrides (dotted keys).
/// Every problem is reported in one error.
pub fn resolve(
    file: Option<(&Path, Value)>,
    preset: Option<Preset>,
    overrides: &[(&str, Value)],
) -> Result<Resolved> {
    let (base_dir, mut file_value) = match file {
        Some((p, v)) => (p.parent().map(Path::to_path_buf), v),
        None => (None, Value::Object(Map::new())),
    };
    let paths_value = file_value
        .as_object_mut()
        .and_then(|m| m.remove("paths"))
        .unwrap_or(Value::Object(Map::new()));

    let preset = match preset {
        Some(p) => p,
        None => match file_value.get("preset") {
            Some(v) => serde_json::from_value(v.clone()).context("config key `preset`")?,
            None => Preset::Synthetic,
        },
    };
    let defaults = serde_json::to_value(TrainConfig::preset(preset))?;

    let mut problems = Vec::new();
    let mut unknown = Vec::new();
    unknown_keys(&defaults, &file_value, "", &mut unknown);
    problems.extend(unknown.into_iter().map(|k| format!("unknown config key `{k}`")));

    let mut merged = defaults;
    merge(&mut merged, &file_value);
    set(&mut merged, "preset", serde_json::to_value(preset)?);
    for (k, v) in overrides {
        set(&mut merged, k, v.clone());
    }
    let mut paths: Paths = match serde_json::from_value(paths_value) {
        Ok(p) => p,
        Err(e) => {
            problems.push(format!("[paths]: {e}"));
            Paths::default()
        }
    };
    if let Some(dir) = base_dir {
        for p in [&mut paths.manifest, &mut paths.prompts, &mut paths.fixtures, &mut paths.output]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
    if !problems.is_empty() {
        bail!("invalid configuration:\n  {}", problems.join("\n  "));
    }
    let train: TrainConfig = serde_json::from_value(merged).context("invalid configuration")?;
    let problems = train.problems();
    if !problems.is_empty() {
        bail!("invalid configuration:\n  {}", problems.join("\n  "));
    }
    Ok(Resolved { train, paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_beat_file_beats_preset() {
        let file = json!({"epochs": 7, "lr": 0.01, "tca": {"window": 5}});
        let r = resolve(Some((Path::new("cfg.toml"), file)), Some(Preset::Ucf), &[("epochs", json!(3))]).unwrap();
        assert_eq!(r.train.epochs, 3);
        assert_eq!(r.train.lr, 0.01);
        assert_eq!(r.train.tca.window, 5);
        assert_eq!(r.train.head.kernel, 9);
    }

    #[test]
    fn unknown_keys_all_listed() {
        let file = json!({"epoch": 7, "tca": {"windw": 5}, "paths": {"manifets": "x"}});
        let err = resolve(Some((Path::new("c.toml"), file)), None, &[]).unwrap_err().to_string();
        assert!(err.contains("`epoch`") && err.contains("`tca.windw`") && err.contains("manifets"), "{err}");
    }

    #[test]
    fn validation_failures_listed_together() {
        let file = json!({"batch_size": 0, "lr": -1.0});
        let err = resolve(Some((Path::new("c.toml"), file)), None, &[]).unwrap_err().to_string();
        assert!(err.contains("batch_size") && err.contains("lr"), "{err}");
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let file = json!({"paths": {"manifest": "data/m.jsonl"}});
        let r = resolve(Some((Path::new("/exp/cfg.toml"), file)), None, &[]).unwrap();
        assert_eq!(r.paths.manifest.unwrap(), PathBuf::from("/exp/data/m.jsonl"));
    }
}
