use std::path::Path;

use jebm::fsutil::write_atomic;
use jebm::model::{load_checkpoint, Checkpoint};
use jebm::{Dataset, Error, Result, RunConfig};

/// A loaded checkpoint plus the training config stored in its metadata,
/// when it was written by `train`.
pub struct Loaded {
    pub ckpt: Checkpoint,
    pub config: Option<RunConfig>,
}

/// Reads and validates a run config, naming the file in any error.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    RunConfig::from_toml_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
        e => e,
    })
}

pub fn load(path: &Path) -> Result<Loaded> {
    let dir = crate::checkpoint_dir(path);
    let ckpt = load_checkpoint(&dir)?;
    let config = match ckpt.meta.get("config") {
        Some(v) => Some(serde_json::from_value(v.clone())?),
        None => None,
    };
    Ok(Loaded { ckpt, config })
}

/// Per-example shape of the training data, when recorded.
pub fn data_shape(ckpt: &Checkpoint) -> Option<Vec<usize>> {
    ckpt.meta.get("data_shape").and_then(|v| serde_json::from_value(v.clone()).ok())
}

pub fn write_text(path: &Path, s: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_atomic(path, s.as_bytes())
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("{}: cannot parse {:?} in {:?}", what, p.trim(), s)))
        })
        .collect()
}

/// Flattens each example of `ds` into a row of an `[n, d]` tensor and
/// checks the width against the model.
pub fn data_matrix(ds: &Dataset, data_dim: usize, what: &str) -> Result<jebm::Tensor> {
    if ds.example_len() != data_dim {
        return Err(Error::Usage(format!(
            "{} has {} values per example, the model expects {}",
            what,
            ds.example_len(),
            data_dim
        )));
    }
    Ok(ds.to_tensor())
}
