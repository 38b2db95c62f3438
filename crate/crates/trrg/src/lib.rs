//! Host side of the report generator: corpus and hypothesis files,
//! checkpoints, configuration, the training drivers and the CLI plumbing.

pub mod checkpoint;
pub mod formats;
pub mod pipeline;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use trrg_core::ModelConfig;

/// Environment variable holding the data-loading worker count.
pub const THREADS_ENV: &str = "TRRG_THREADS";

/// An error the CLI reports with exit status 2: bad arguments or an output
/// location that cannot be written.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Reads a JSON config; fields it leaves out take their defaults.
pub fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    let cfg = match path {
        None => ModelConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir` (and parents), reporting failure as a usage error.
pub fn ensure_out_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| UsageError(format!("cannot create output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".trrg-write-test");
    std::fs::write(&probe, b"").map_err(|e| UsageError(format!("output directory {} is not writable: {e}", dir.display())))?;
    let _ = std::fs::remove_file(probe);
    Ok(dir.to_path_buf())
}

/// Writes the effective config next to a command's outputs.
pub fn write_resolved<T: serde::Serialize>(dir: &Path, config: &T) -> Result<()> {
    formats::write_json(&dir.join("config.resolved.json"), config)?;
    Ok(())
}

/// `path` itself when it is a file, otherwise `<path>/<split>.jsonl`.
pub fn split_path(path: &Path, split: &str) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{split}.jsonl"))
    } else {
        path.to_path_buf()
    }
}

/// Worker count from the environment; unset or invalid means one.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Installs the global rayon pool used for data loading. Calling it again
/// is harmless.
pub fn init_threads() -> usize {
    let n = thread_count();
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("rayon pool already initialised");
    }
    rayon::current_num_threads()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"top_k": 2, "seed": 9}"#).unwrap();
        let cfg = load_config(Some(&p)).unwrap();
        assert_eq!((cfg.top_k, cfg.seed, cfg.d), (2, 9, ModelConfig::default().d));

        std::fs::write(&p, r#"{"top_k": 99}"#).unwrap();
        let msg = format!("{:#}", load_config(Some(&p)).unwrap_err());
        assert!(msg.contains("top_k"), "{msg}");
        std::fs::write(&p, r#"{"topk": 2}"#).unwrap();
        let msg = format!("{:#}", load_config(Some(&p)).unwrap_err());
        assert!(msg.contains("topk"), "{msg}");
    }

    #[test]
    fn split_resolution() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(split_path(dir.path(), "train"), dir.path().join("train.jsonl"));
        let f = dir.path().join("x.jsonl");
        std::fs::write(&f, "").unwrap();
        assert_eq!(split_path(&f, "train"), f);
    }
}
