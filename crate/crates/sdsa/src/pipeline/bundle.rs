//! Bundle persistence: a trained model family round-trips through one
//! plain-text JSON document per directory.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::data::atomic_write;
use crate::pipeline::train::{TrainedBundle, BUNDLE_FORMAT_VERSION};

const BUNDLE_FILE: &str = "bundle.json";

pub fn save_bundle(bundle: &TrainedBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(bundle)
        .map_err(|e| Error::Format(format!("serialize bundle: {e}")))?;
    text.push('\n');
    atomic_write(&dir.join(BUNDLE_FILE), text.as_bytes())
}

pub fn load_bundle(dir: &Path) -> Result<TrainedBundle> {
    let path = dir.join(BUNDLE_FILE);
    let text = std::fs::read_to_string(&path)?;
    let bundle: TrainedBundle = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if bundle.format_version != BUNDLE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: bundle format {} but this build reads {}",
            path.display(),
            bundle.format_version,
            BUNDLE_FORMAT_VERSION
        )));
    }
    Ok(bundle)
}
