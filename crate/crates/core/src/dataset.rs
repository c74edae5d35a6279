//! Surrogate-task datasets built from phantom references.
//!
//! Every random choice is drawn from a stream keyed by the phantom index (and
//! replicate), so appending phantoms never changes existing records and
//! samples can be realised in any order or in parallel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::abnormality::{AbnormalitySpec, Findings, Rotation, LABEL_WIDTH, OCCLUSION_OFFSET, ROTATION_OFFSET};
use crate::phantom::Lobe;
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mirror,
    Rotation,
    Occlusion,
    Combined,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Mirror, Task::Rotation, Task::Occlusion, Task::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Task::Mirror => "mirror",
            Task::Rotation => "rotation",
            Task::Occlusion => "occlusion",
            Task::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task '{s}'")))
    }

    pub fn n_labels(self) -> usize {
        self.bit_range().len()
    }

    /// Slots of the 11-bit layout predicted for this task.
    pub fn bit_range(self) -> std::ops::Range<usize> {
        match self {
            Task::Mirror => 0..1,
            Task::Rotation => ROTATION_OFFSET..OCCLUSION_OFFSET,
            Task::Occlusion => OCCLUSION_OFFSET..LABEL_WIDTH,
            Task::Combined => 0..LABEL_WIDTH,
        }
    }

    /// Task-specific target bits for `findings`.
    pub fn label_bits(self, findings: &Findings) -> Result<Vec<u8>> {
        let missing = || Error::invalid(format!("findings {findings:?} incomplete for task {}", self.name()));
        let mut full = [0u8; LABEL_WIDTH];
        if matches!(self, Task::Mirror | Task::Combined) {
            full[0] = findings.mirrored.ok_or_else(missing)? as u8;
        }
        if matches!(self, Task::Rotation | Task::Combined) {
            full[ROTATION_OFFSET + findings.rotation.ok_or_else(missing)?.index()] = 1;
        }
        if matches!(self, Task::Occlusion | Task::Combined) {
            full[OCCLUSION_OFFSET + findings.occluded_lobe.ok_or_else(missing)?.index()] = 1;
        }
        Ok(full[self.bit_range()].to_vec())
    }

    /// Keeps only the components this task is about.
    pub fn restrict(self, findings: &Findings) -> Findings {
        Findings {
            mirrored: findings.mirrored.filter(|_| matches!(self, Task::Mirror | Task::Combined)),
            rotation: findings.rotation.filter(|_| matches!(self, Task::Rotation | Task::Combined)),
            occluded_lobe: findings
                .occluded_lobe
                .filter(|_| matches!(self, Task::Occlusion | Task::Combined)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Train/validation/test proportions 364 : 50 : 50.
pub const SPLIT_PROPORTIONS: [usize; 3] = [364, 50, 50];

/// Split of a phantom; all samples derived from one phantom share it.
pub fn split_for(phantom_seed: u64) -> Split {
    let total: usize = SPLIT_PROPORTIONS.iter().sum();
    let u = seed::unit(phantom_seed, &[0x7370_6c69]);
    let train = SPLIT_PROPORTIONS[0] as f64 / total as f64;
    let val = (SPLIT_PROPORTIONS[0] + SPLIT_PROPORTIONS[1]) as f64 / total as f64;
    if u < train {
        Split::Train
    } else if u < val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Seed of the `index`-th phantom of a corpus.
pub fn phantom_seed(corpus_seed: u64, index: usize) -> u64 {
    seed::derive(corpus_seed, &[index as u64, 0x7068])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhantomRef {
    pub index: usize,
    pub seed: u64,
}

impl PhantomRef {
    pub fn corpus(corpus_seed: u64, n: usize) -> Vec<PhantomRef> {
        (0..n).map(|index| PhantomRef { index, seed: phantom_seed(corpus_seed, index) }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub phantom_index: usize,
    pub phantom_seed: u64,
    pub task: Task,
    pub spec: Findings,
    pub label_bits: Vec<u8>,
    pub split: Split,
    pub report_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_path: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub task: Task,
    pub seed: u64,
    /// Samples per phantom for the combined task.
    pub combined_multiplier: usize,
}

impl DatasetOptions {
    pub fn new(task: Task, seed: u64) -> Self {
        DatasetOptions { task, seed, combined_multiplier: 1 }
    }
}

pub fn build_dataset(phantoms: &[PhantomRef], opts: &DatasetOptions) -> Result<Vec<SampleRecord>> {
    if phantoms.is_empty() {
        return Err(Error::invalid("dataset needs at least one phantom"));
    }
    if opts.combined_multiplier == 0 {
        return Err(Error::invalid("combined multiplier must be >= 1"));
    }
    let mut out = Vec::new();
    for p in phantoms {
        let findings: Vec<Findings> = match opts.task {
            Task::Mirror => vec![Findings { mirrored: Some(mirror_assignment(opts.seed, p.index)), ..Default::default() }],
            Task::Rotation => Rotation::ALL
                .iter()
                .map(|&r| Findings { rotation: Some(r), ..Default::default() })
                .collect(),
            Task::Occlusion => Lobe::ALL
                .iter()
                .map(|&l| Findings { occluded_lobe: Some(l), ..Default::default() })
                .collect(),
            Task::Combined => (0..opts.combined_multiplier)
                .map(|k| {
                    let mut rng = seed::rng(opts.seed, &[p.index as u64, k as u64, 0x636f]);
                    AbnormalitySpec {
                        mirrored: rng.random_bool(0.5),
                        rotation: Rotation::ALL[rng.random_range(0..5)],
                        occluded_lobe: Lobe::ALL[rng.random_range(0..5)],
                    }
                    .findings()
                })
                .collect(),
        };
        for (k, spec) in findings.into_iter().enumerate() {
            out.push(SampleRecord {
                id: format!("{}-{:05}-{}", opts.task.name(), p.index, k),
                phantom_index: p.index,
                phantom_seed: p.seed,
                task: opts.task,
                label_bits: opts.task.label_bits(&spec)?,
                spec,
                split: split_for(p.seed),
                report_seed: seed::derive(opts.seed, &[p.index as u64, k as u64, 0x7270]),
                volume_path: None,
            });
        }
    }
    Ok(out)
}

/// Phantoms are paired (0,1), (2,3), …; exactly one of each pair is mirrored.
fn mirror_assignment(seed: u64, index: usize) -> bool {
    let coin = seed::derive(seed, &[(index / 2) as u64, 0x6d69]) & 1 == 1;
    index.is_multiple_of(2) == coin
}
