//! Line-oriented `key = value` task configs.
//!
//! Blank lines and `#` comments are skipped. Every key is optional; missing
//! keys keep the task defaults. Unknown or repeated keys are errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dfc_dit::{Error, Result, Tap, Task, TaskConfig};

pub const KEYS: [&str; 13] = [
    "learning_rate",
    "batch_size",
    "epochs",
    "training_size",
    "iterations",
    "alpha",
    "gamma",
    "eps_log",
    "seed",
    "hidden",
    "depth",
    "taps",
    "corpus",
];

/// Reads a config file. Relative `corpus` paths resolve against the file's
/// directory.
pub fn load_config(path: &Path, task: Task) -> Result<TaskConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut config = parse_config(&text, task)?;
    if let (Some(corpus), Some(dir)) = (&config.corpus, path.parent()) {
        if corpus.is_relative() {
            config.corpus = Some(dir.join(corpus));
        }
    }
    Ok(config)
}

pub fn parse_config(text: &str, task: Task) -> Result<TaskConfig> {
    let mut config = TaskConfig::for_task(task);
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
        let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(at(format!("unknown key `{key}`")));
        }
        if !seen.insert(key) {
            return Err(at(format!("`{key}` is set twice")));
        }
        set(&mut config, key, value).map_err(|e| at(e.to_string()))?;
    }
    config.validate()?;
    Ok(config)
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}` cannot be `{value}`")))
}

fn set(c: &mut TaskConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "learning_rate" => c.learning_rate = num(key, value)?,
        "batch_size" => c.batch_size = num(key, value)?,
        "epochs" => c.epochs = num(key, value)?,
        "training_size" => c.training_size = num(key, value)?,
        "iterations" => c.iterations = num(key, value)?,
        "alpha" => c.alpha = num(key, value)?,
        "gamma" => c.gamma = num(key, value)?,
        "eps_log" => c.eps_log = num(key, value)?,
        "seed" => c.seed = num(key, value)?,
        "hidden" => c.hidden = num(key, value)?,
        "depth" => c.depth = num(key, value)?,
        "taps" => c.taps = Tap::parse_set(value).map_err(|e| Error::Config(e.to_string()))?,
        "corpus" => c.corpus = Some(PathBuf::from(value)),
        _ => unreachable!("key list and setter disagree on `{key}`"),
    }
    Ok(())
}
