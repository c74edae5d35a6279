//! On-disk layout of a run directory and the records stored in it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use volrep_core::abnormality::Findings;
use volrep_core::dataset::{SampleRecord, Split, Task};
use volrep_core::io::{read_jsonl, read_lobes, read_volume, write_jsonl};
use volrep_core::phantom::Phantom;
use volrep_core::report::TemplateLibrary;
use volrep_core::sarle::{MedicalVocabulary, RuleTable};
use volrep_core::Execution;
use volrep_nn::decoder::MemoryKind;

use crate::config::{representation_name, RunConfig};
use crate::error::{Error, Result};

/// One generated phantom: its files relative to the run root and the
/// SHA-256 of the volume file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhantomRecord {
    pub index: usize,
    pub seed: u64,
    pub corpus_seed: u64,
    pub shape: [usize; 3],
    pub volume_path: String,
    pub lobes_path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub id: String,
    pub text: String,
    pub stop_reason: String,
    pub n_tokens: usize,
}

pub struct Workspace {
    pub root: PathBuf,
    pub config: RunConfig,
    pub exec: Execution,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(volrep_core::Error::io(path, e)))?;
    Ok(sha256_hex(&bytes))
}

fn read_required<T: DeserializeOwned>(path: &Path, hint: &str) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::missing(path, hint));
    }
    Ok(read_jsonl(path)?)
}

impl Workspace {
    pub fn new(config: RunConfig, exec: Execution) -> Workspace {
        Workspace { root: config.paths.root.clone(), config, exec }
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn phantom_manifest(&self) -> PathBuf {
        self.path("phantoms/manifest.jsonl")
    }

    pub fn dataset_manifest(&self, task: Task) -> PathBuf {
        self.path(format!("dataset/{}.jsonl", task.name()))
    }

    pub fn reports_file(&self, task: Task) -> PathBuf {
        self.path(format!("reports/{}.jsonl", task.name()))
    }

    pub fn encoder_checkpoint(&self, task: Task) -> PathBuf {
        self.path(format!("models/encoder-{}.ckpt", task.name()))
    }

    pub fn decoder_stem(&self, task: Task, kind: MemoryKind) -> String {
        format!("decoder-{}-{}", task.name(), representation_name(kind))
    }

    pub fn decoder_checkpoint(&self, task: Task, kind: MemoryKind) -> PathBuf {
        self.path(format!("models/{}.ckpt", self.decoder_stem(task, kind)))
    }

    pub fn templates(&self) -> Result<TemplateLibrary> {
        Ok(match &self.config.paths.templates {
            Some(p) => TemplateLibrary::from_path(p)?,
            None => TemplateLibrary::default_library(),
        })
    }

    pub fn sarle(&self) -> Result<(RuleTable, MedicalVocabulary)> {
        let rules = match &self.config.paths.sarle_rules {
            Some(p) => RuleTable::from_path(p)?,
            None => RuleTable::default_table(),
        };
        let vocab = match &self.config.paths.sarle_vocabulary {
            Some(p) => MedicalVocabulary::from_path(p)?,
            None => MedicalVocabulary::default_vocabulary(),
        };
        Ok((rules, vocab))
    }

    pub fn read_phantom_manifest(&self) -> Result<Vec<PhantomRecord>> {
        read_required(&self.phantom_manifest(), "run phantom-gen first")
    }

    pub fn read_dataset(&self, task: Task) -> Result<Vec<SampleRecord>> {
        read_required(&self.dataset_manifest(task), &format!("run inject --task {} first", task.name()))
    }

    pub fn read_reports(&self, task: Task) -> Result<Vec<ReportRecord>> {
        read_required(&self.reports_file(task), &format!("run reports-gen --task {} first", task.name()))
    }

    pub fn write_records<T: Serialize>(&self, path: &Path, items: &[T]) -> Result<()> {
        Ok(write_jsonl(path, items)?)
    }

    /// Loads the phantoms referenced by `records`, indexed by phantom index.
    pub fn load_phantoms(&self, records: &[SampleRecord]) -> Result<Vec<Option<Arc<Phantom>>>> {
        let manifest = self.read_phantom_manifest()?;
        let mut wanted = vec![false; manifest.len()];
        for r in records {
            if r.phantom_index >= manifest.len() {
                return Err(Error::InvalidData(format!(
                    "sample {} refers to phantom {} but the manifest has {}",
                    r.id,
                    r.phantom_index,
                    manifest.len()
                )));
            }
            wanted[r.phantom_index] |= r.volume_path.is_none();
        }
        let loaded = self.exec.map(&manifest, |p| -> Result<Option<Arc<Phantom>>> {
            if !wanted[p.index] {
                return Ok(None);
            }
            let (volume, _) = read_volume(&self.path(&p.volume_path))?;
            let lobes = read_lobes(&self.path(&p.lobes_path))?;
            Ok(Some(Arc::new(Phantom { volume, lobes, seed: p.seed })))
        });
        loaded.into_iter().collect()
    }
}

/// Records of `split` from a dataset, with their findings.
pub fn of_split(records: &[SampleRecord], split: Split) -> Vec<&SampleRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

pub fn findings_of(records: &[&SampleRecord]) -> Vec<Findings> {
    records.iter().map(|r| r.spec).collect()
}
