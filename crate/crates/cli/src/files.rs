use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use anyhow::{Context, Result};
use headsparse::model::ModelWeights;
use headsparse::rolemap::RoleMap;

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Whitespace-separated token ids.
pub fn parse_prompt(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|t| t.parse::<u32>().with_context(|| format!("bad token id {t:?}")))
        .collect()
}

pub fn read_prompt(path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading prompt {}", path.display()))?;
    parse_prompt(&text).with_context(|| format!("in {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    let f = File::open(path).with_context(|| format!("opening model {}", path.display()))?;
    ModelWeights::read_from(BufReader::new(f)).with_context(|| format!("loading model {}", path.display()))
}

pub fn save_model(path: &Path, model: &ModelWeights) -> Result<()> {
    write_atomic(path, &model.to_bytes())
}

/// Loads a role map and checks it against the model it will drive.
pub fn load_rolemap(path: &Path, model: &ModelWeights) -> Result<RoleMap> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading role map {}", path.display()))?;
    let map = RoleMap::from_json(&text).with_context(|| format!("parsing role map {}", path.display()))?;
    map.check_model(&model.config).with_context(|| format!("role map {}", path.display()))?;
    Ok(map)
}

pub fn save_rolemap(path: &Path, map: &RoleMap) -> Result<()> {
    write_atomic(path, map.to_json()?.as_bytes())
}
