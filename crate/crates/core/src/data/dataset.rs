//! Labeled datasets, CSV manifests and stratified train/val/test splits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One image and its labels; a task missing from `labels` is unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: String,
    pub labels: BTreeMap<String, u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabeledDataset {
    pub records: Vec<Record>,
    /// Sorted class alphabet per task.
    pub alphabets: BTreeMap<String, Vec<u32>>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    path: String,
    task: String,
    label: u32,
}

impl LabeledDataset {
    /// Builds a dataset and checks every present label against its alphabet.
    pub fn new(records: Vec<Record>, alphabets: BTreeMap<String, Vec<u32>>) -> Result<Self> {
        let ds = Self {
            records,
            alphabets,
            root: PathBuf::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        for r in &self.records {
            for (task, label) in &r.labels {
                let alphabet = self
                    .alphabets
                    .get(task)
                    .ok_or_else(|| Error::Contract(format!("{}: unknown task {task}", r.path)))?;
                if alphabet.binary_search(label).is_err() {
                    return Err(Error::Contract(format!(
                        "{}: label {label} not in {task} alphabet {alphabet:?}",
                        r.path
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reads a `path,task,label` manifest. Rows for the same path merge into one
    /// record (first-seen order); alphabets are the sorted labels observed.
    pub fn read_manifest(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_open(path, e))?;
        let mut records: Vec<Record> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut alphabets: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for row in reader.deserialize() {
            let row: LabelRow = row?;
            let i = *index.entry(row.path.clone()).or_insert_with(|| {
                records.push(Record {
                    path: row.path.clone(),
                    labels: BTreeMap::new(),
                });
                records.len() - 1
            });
            if records[i]
                .labels
                .insert(row.task.clone(), row.label)
                .is_some()
            {
                return Err(Error::Contract(format!(
                    "{}: duplicate label for task {}",
                    row.path, row.task
                )));
            }
            let alphabet = alphabets.entry(row.task).or_default();
            if let Err(at) = alphabet.binary_search(&row.label) {
                alphabet.insert(at, row.label);
            }
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            records,
            alphabets,
            root,
        })
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_open(path, e))?;
        for r in &self.records {
            for (task, &label) in &r.labels {
                writer.serialize(LabelRow {
                    path: r.path.clone(),
                    task: task.clone(),
                    label,
                })?;
            }
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn alphabet(&self, task: &str) -> Result<&[u32]> {
        self.alphabets
            .get(task)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("task {task} not in dataset")))
    }

    pub fn label(&self, index: usize, task: &str) -> Option<u32> {
        self.records[index].labels.get(task).copied()
    }

    /// Class index (position in the alphabet) of a record, if labeled.
    pub fn class_index(&self, index: usize, task: &str) -> Option<usize> {
        let label = self.label(index, task)?;
        self.alphabets.get(task)?.binary_search(&label).ok()
    }

    pub fn resolve(&self, index: usize) -> PathBuf {
        let p = Path::new(&self.records[index].path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Indices of records assigned to `split` in `manifest` (matched by path).
    pub fn indices_in(&self, manifest: &SplitManifest, split: Split) -> Vec<usize> {
        let wanted: BTreeMap<&str, Split> = manifest
            .entries
            .iter()
            .map(|(p, s)| (p.as_str(), *s))
            .collect();
        (0..self.records.len())
            .filter(|&i| wanted.get(self.records[i].path.as_str()) == Some(&split))
            .collect()
    }
}

fn csv_open(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Contract(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Contract(format!("unknown split {s:?}"))),
        }
    }
}

/// Train/val/test fractions summing to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios(pub [f64; 3]);

impl SplitRatios {
    pub const DEFAULT: SplitRatios = SplitRatios([0.75, 0.10, 0.15]);
    pub const SIDEWALK: SplitRatios = SplitRatios([0.70, 0.15, 0.15]);

    pub fn new(parts: [f64; 3]) -> Result<Self> {
        let sum: f64 = parts.iter().sum();
        if parts.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {parts:?} must be ≥ 0 and sum to 1"
            )));
        }
        Ok(Self(parts))
    }

    /// Parses `"75,10,15"` or `"0.75,0.1,0.15"`; parts are normalized by their sum.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad ratios {text:?}: {e}")))?;
        let [a, b, c]: [f64; 3] = parts
            .try_into()
            .map_err(|_| Error::Config(format!("expected three ratios, got {text:?}")))?;
        let sum = a + b + c;
        if !(sum > 0.0) || a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(Error::Config(format!("bad ratios {text:?}")));
        }
        Self::new([a / sum, b / sum, c / sum])
    }
}

/// Largest-remainder apportionment of `n` items; equal remainders favor the
/// earlier split.
pub fn apportion(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let quotas = ratios.0.map(|r| r * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    let rem = |i: usize| quotas[i] - quotas[i].floor();
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub entries: Vec<(String, Split)>,
    pub ratios: SplitRatios,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRow {
    path: String,
    split: Split,
}

impl SplitManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|(_, s)| *s == split).count()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_open(path, e))?;
        for (p, s) in &self.entries {
            writer.serialize(SplitRow {
                path: p.clone(),
                split: *s,
            })?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a `path,split` manifest. Ratios and seed are not stored in the file
    /// and come back as the observed fractions and zero.
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_open(path, e))?;
        let mut entries = Vec::new();
        for row in reader.deserialize() {
            let row: SplitRow = row?;
            entries.push((row.path, row.split));
        }
        let n = entries.len().max(1) as f64;
        let frac = |s| entries.iter().filter(|(_, x)| *x == s).count() as f64 / n;
        let ratios = SplitRatios([frac(Split::Train), frac(Split::Val), frac(Split::Test)]);
        Ok(Self {
            entries,
            ratios,
            seed: 0,
        })
    }
}

/// Per-class shuffled, largest-remainder stratified split on `task`.
///
/// Records without a `task` label are left out of the manifest. Empty classes
/// log a warning and contribute nothing.
pub fn stratified_split(
    dataset: &LabeledDataset,
    task: &str,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<SplitManifest> {
    let alphabet = dataset.alphabet(task)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); alphabet.len()];
    let mut unlabeled = 0usize;
    for i in 0..dataset.len() {
        match dataset.class_index(i, task) {
            Some(c) => by_class[c].push(i),
            None => unlabeled += 1,
        }
    }
    if unlabeled > 0 {
        log::warn!("{unlabeled} records lack a {task} label and are excluded from the split");
    }
    let mut assignment: Vec<Option<Split>> = vec![None; dataset.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            log::warn!("class {} of task {task} is empty", alphabet[c]);
            continue;
        }
        let mut r = rng::seeded(rng::derive_seed(seed, alphabet[c] as u64));
        rng::shuffle(&mut r, members);
        let counts = apportion(members.len(), ratios);
        let mut cursor = 0;
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for &i in &members[cursor..cursor + n] {
                assignment[i] = Some(split);
            }
            cursor += n;
        }
    }
    let entries = assignment
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (dataset.records[i].path.clone(), s)))
        .collect();
    Ok(SplitManifest {
        entries,
        ratios: *ratios,
        seed,
    })
}
