//! On-disk layout of a [`ModelSet`]:
//!
//! ```text
//! <dir>/manifest.json          generation and one entry per model
//! <dir>/models/<key>.json      a serialized Model
//! <dir>/suspicious_keys.json   the extraction table
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierKey, Model, ModelSet};
use crate::error::{Error, Result};
use crate::extract::SuspiciousKeyTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: ClassifierKey,
    pub version: u64,
    pub digest: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generation: u64,
    pub models: Vec<ManifestEntry>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl ModelSet {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            generation: self.generation,
            models: self
                .models
                .values()
                .map(|m| ManifestEntry {
                    key: m.key.clone(),
                    version: m.version,
                    digest: m.digest.clone(),
                    file: format!("models/{}", m.key.file_name()),
                })
                .collect(),
        }
    }

    /// Writes the set under `dir`. The manifest is written last, so a reader
    /// never sees it point at a missing model file.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("models"))?;
        for m in self.models.values() {
            write_atomic(&dir.join("models").join(m.key.file_name()), &serde_json::to_vec(m)?)?;
        }
        write_atomic(&dir.join("suspicious_keys.json"), &serde_json::to_vec_pretty(&self.table)?)?;
        write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&self.manifest())?)
    }

    /// Reads a set written by [`ModelSet::save`]; `Ok(None)` when `dir` holds none.
    pub fn load(dir: &Path) -> Result<Option<ModelSet>> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Ok(None);
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        let mut set = ModelSet { generation: manifest.generation, ..Default::default() };
        for entry in manifest.models {
            let m: Model = serde_json::from_slice(&fs::read(dir.join(&entry.file))?)?;
            if m.key != entry.key || m.digest != entry.digest {
                return Err(Error::Config(format!("{} does not match its manifest entry", entry.file)));
            }
            set.models.insert(m.key.clone(), m);
        }
        let table_path = dir.join("suspicious_keys.json");
        if table_path.exists() {
            set.table = serde_json::from_slice::<SuspiciousKeyTable>(&fs::read(table_path)?)?;
        }
        Ok(Some(set))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Example, PiiType};
    use crate::registry::PipelineConfig;
    use crate::test_support::example_with_id;
    use crate::tokenize::Tokenizer;

    #[test]
    fn save_load_round_trip() {
        let tok = Tokenizer::default();
        let examples: Vec<Example> = (0..60)
            .map(|i| {
                if i % 3 == 0 {
                    let v = format!("35{:013}", i);
                    example_with_id(&tok, &format!("f{i}"), &format!("imei={v}&n={i}"), "", &[(PiiType::Imei, v.as_str())])
                } else {
                    example_with_id(&tok, &format!("f{i}"), &format!("n={i}"), "", &[])
                }
            })
            .collect();
        let mut cfg = PipelineConfig::default();
        cfg.vocabulary.min_word_frequency = 2;
        let set = ModelSet::train(&examples, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        let back = ModelSet::load(dir.path()).unwrap().unwrap();
        assert_eq!(back.generation, set.generation);
        assert_eq!(back.models, set.models);
        assert_eq!(back.table, set.table);
        assert!(ModelSet::load(&dir.path().join("missing")).unwrap().is_none());
    }
}
