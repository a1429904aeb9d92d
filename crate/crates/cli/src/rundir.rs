use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::failure::{CliResult, Failure};

pub const SNAPSHOT: &str = "config.snapshot";

/// Output directory of one command: `config.snapshot`, `checkpoints/`,
/// `logs/` and `reports/`.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Writes the snapshot, then creates the layout.
    pub fn create(root: &Path, snapshot: &impl Serialize) -> CliResult<Self> {
        write_snapshot(root, snapshot)?;
        for sub in ["checkpoints", "logs", "reports"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", d.display())))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn write_report(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        let p = self.report(name);
        fs::write(&p, text)?;
        Ok(p)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> CliResult<PathBuf> {
        self.write_report(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }
}

/// Writes `config.snapshot` into `root`, creating it if needed.
pub fn write_snapshot(root: &Path, snapshot: &impl Serialize) -> CliResult {
    fs::create_dir_all(root).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", root.display())))?;
    let text = serde_json::to_string_pretty(snapshot)?;
    fs::write(root.join(SNAPSHOT), text + "\n")?;
    Ok(())
}

/// Appends one JSON record per line.
pub fn append_jsonl(path: &Path, record: &impl Serialize) -> CliResult {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}
