//! JSON and JSON-lines file helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{PgtError, Result};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string(value)?).map_err(|e| PgtError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| PgtError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| PgtError::Serde(format!("{}: {e}", path.display())))
}

/// Writes one JSON value per line, optionally preceded by a header line.
pub fn write_jsonl<H: Serialize, T: Serialize>(path: &Path, header: Option<&H>, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&serde_json::to_string(h)?);
        out.push('\n');
    }
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| PgtError::io(path, e))
}

/// Non-empty lines of a JSON-lines file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let s = fs::read_to_string(path).map_err(|e| PgtError::io(path, e))?;
    Ok(s.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

pub fn parse_line<T: DeserializeOwned>(path: &Path, lineno: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| PgtError::Serde(format!("{}:{}: {e}", path.display(), lineno + 1)))
}

pub fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| PgtError::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(value)?).map_err(|e| PgtError::io(path, e))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| PgtError::io(dir, e))?;
        }
    }
    Ok(())
}
