use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lifted::model::{load_dataset, Dataset, InstanceRecord};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn hash_entry(path: &Path) -> Result<FileHash> {
    Ok(FileHash { path: path.to_path_buf(), sha256: sha256_file(path)? })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Comma-separated numbers.
pub fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| anyhow!("bad number {s:?} in {text:?}: {e}")))
        .collect()
}

pub fn parse_light(text: &str) -> Result<[f64; lifted::lux::SH_DIM]> {
    let v = parse_list(text)?;
    v.as_slice()
        .try_into()
        .map_err(|_| anyhow!("lighting needs {} coefficients, got {}", lifted::lux::SH_DIM, v.len()))
}

pub fn load_fitted(model: &Path, instances: &Path) -> Result<Dataset> {
    load_dataset(model, instances).with_context(|| format!("loading {} and {}", model.display(), instances.display()))
}

pub fn find_instance<'a>(dataset: &'a Dataset, id: &str) -> Result<&'a InstanceRecord> {
    match dataset.instance(id) {
        Some(inst) => Ok(inst),
        None => bail!("unknown instance id {id:?}"),
    }
}

/// File-name-safe version of an instance id.
pub fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_parse_with_spaces() {
        assert_eq!(parse_list("0, 30,-15.5").unwrap(), vec![0.0, 30.0, -15.5]);
        assert!(parse_list("1,,2").is_err());
    }

    #[test]
    fn light_needs_nine_values() {
        assert_eq!(parse_light("1,0,0,0,0,0,0,0,0.5").unwrap()[8], 0.5);
        assert!(parse_light("1,0,0").is_err());
    }

    #[test]
    fn stems_replace_unsafe_characters() {
        assert_eq!(file_stem("a/b c-1_2"), "a_b_c-1_2");
    }

    #[test]
    fn hashes_are_hex_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f");
        fs::write(&path, b"abc").unwrap();
        assert_eq!(sha256_file(&path).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
