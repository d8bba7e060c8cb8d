//! Dataset manifests and the real/synthetic mixing experiments.
//!
//! A manifest is a line-delimited text file. Header lines start with `#`;
//! every other line is one record with four tab-separated fields:
//!
//! ```text
//! image_ref <TAB> source <TAB> split <TAB> x,y,w,h[,score] x,y,w,h[,score] ...
//! ```
//!
//! `image_ref` is a path relative to the manifest's directory. The box field
//! may be empty.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::BBox;
use crate::rng;

const MAGIC: &str = "# cellsynth-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Generated but not yet assigned to a split.
    Unassigned,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(Source::Real),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub image_ref: String,
    pub boxes: Vec<BBox>,
    pub source: Source,
    pub split: Split,
}

impl Record {
    pub fn new(image_ref: impl Into<String>, source: Source, split: Split, boxes: Vec<BBox>) -> Self {
        Record {
            image_ref: image_ref.into(),
            boxes,
            source,
            split,
        }
    }

    fn to_line(&self) -> String {
        let boxes: Vec<String> = self.boxes.iter().map(BBox::to_tuple).collect();
        format!(
            "{}\t{}\t{}\t{}",
            self.image_ref,
            self.source,
            self.split,
            boxes.join(" ")
        )
    }

    fn parse_line(line: &str) -> std::result::Result<Record, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(format!("expected 4 tab-separated fields, got {}", fields.len()));
        }
        let boxes = fields[3]
            .split_whitespace()
            .map(BBox::parse_tuple)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Record {
            image_ref: fields[0].to_string(),
            source: fields[1].parse()?,
            split: fields[2].parse()?,
            boxes,
        })
    }
}

/// Per-split record counts, written into the manifest header.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub train_real: usize,
    pub train_synthetic: usize,
    pub val: usize,
    pub test: usize,
    pub unassigned: usize,
}

impl Counts {
    pub fn train(&self) -> usize {
        self.train_real + self.train_synthetic
    }
}

impl fmt::Display for Counts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "train_real={} train_synthetic={} val={} test={} unassigned={}",
            self.train_real, self.train_synthetic, self.val, self.test, self.unassigned
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, seed: u64, records: Vec<Record>) -> Self {
        DatasetManifest {
            name: name.into(),
            seed,
            records,
        }
    }

    pub fn counts(&self) -> Counts {
        let mut c = Counts::default();
        for r in &self.records {
            match (r.split, r.source) {
                (Split::Train, Source::Real) => c.train_real += 1,
                (Split::Train, Source::Synthetic) => c.train_synthetic += 1,
                (Split::Val, _) => c.val += 1,
                (Split::Test, _) => c.test += 1,
                (Split::Unassigned, _) => c.unassigned += 1,
            }
        }
        c
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Serialized record lines of one split, without the header.
    pub fn split_text(&self, split: Split) -> String {
        let mut out = String::new();
        for r in self.split_records(split) {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    /// Checks the structural invariants: evaluation splits hold only real
    /// images and no image appears in two splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for r in &self.records {
            if matches!(r.split, Split::Val | Split::Test) && r.source != Source::Real {
                return Err(Error::Input(format!(
                    "{}: synthetic record {} in {} split",
                    self.name, r.image_ref, r.split
                )));
            }
            if r.image_ref.contains(['\t', '\n']) {
                return Err(Error::Input(format!("image_ref {:?} contains a tab or newline", r.image_ref)));
            }
            if let Some(prev) = seen.insert(r.image_ref.as_str(), r.split) {
                if prev != r.split {
                    return Err(Error::Input(format!(
                        "{}: {} appears in both {prev} and {}",
                        self.name, r.image_ref, r.split
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "# name={}", self.name);
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "# counts {}", self.counts());
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<DatasetManifest> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::format(origin, "missing manifest magic line"));
        }
        let mut name = None;
        let mut seed = None;
        let mut counts_line = None;
        let mut records = Vec::new();
        for (no, line) in lines.enumerate() {
            if let Some(h) = line.strip_prefix("# ") {
                if let Some(v) = h.strip_prefix("name=") {
                    name = Some(v.to_string());
                } else if let Some(v) = h.strip_prefix("seed=") {
                    seed = Some(v.parse::<u64>().map_err(|e| Error::format(origin, e.to_string()))?);
                } else if let Some(v) = h.strip_prefix("counts ") {
                    counts_line = Some(v.to_string());
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            records.push(
                Record::parse_line(line)
                    .map_err(|m| Error::format(origin, format!("line {}: {m}", no + 2)))?,
            );
        }
        let manifest = DatasetManifest {
            name: name.ok_or_else(|| Error::format(origin, "missing name header"))?,
            seed: seed.ok_or_else(|| Error::format(origin, "missing seed header"))?,
            records,
        };
        if let Some(c) = counts_line {
            if c != manifest.counts().to_string() {
                return Err(Error::format(origin, "counts header disagrees with records"));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DatasetManifest::parse(&text, path)
    }

    /// Resolves a record's image reference against the manifest directory.
    pub fn resolve(manifest_path: &Path, image_ref: &str) -> PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(image_ref)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    Replace,
    Add,
}

/// One mixing experiment: a replacement or addition fraction plus its seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSpec {
    pub mode: MixMode,
    pub fraction: f64,
    pub seed: u64,
}

impl MixSpec {
    pub fn new(mode: MixMode, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Config(format!("mix fraction {fraction} must lie in (0,1)")));
        }
        Ok(MixSpec { mode, fraction, seed })
    }

    /// Dataset name: `scc_30` for 30% replacement, `scc_add_30` for 30% addition.
    pub fn name(&self) -> String {
        let pct = (self.fraction * 100.0).round() as u32;
        match self.mode {
            MixMode::Replace => format!("scc_{pct}"),
            MixMode::Add => format!("scc_add_{pct}"),
        }
    }

    /// The six mixes of the experiment grid: replace and add at 10%, 30%, 50%.
    pub fn experiment_grid(seed: u64) -> Vec<MixSpec> {
        let mut out = Vec::new();
        for mode in [MixMode::Replace, MixMode::Add] {
            for fraction in [0.10, 0.30, 0.50] {
                out.push(MixSpec { mode, fraction, seed });
            }
        }
        out
    }
}

pub const BASELINE_NAME: &str = "scc_real";

/// Ordered dataset names of the seven experiments.
pub fn experiment_names() -> Vec<String> {
    std::iter::once(BASELINE_NAME.to_string())
        .chain(MixSpec::experiment_grid(0).iter().map(MixSpec::name))
        .collect()
}

/// Shuffles real records and assigns the first `train_n` to train, the next
/// `val_n` to val and the next `test_n` to test. Leftovers are dropped.
/// Records keep their input order inside each split.
pub fn split(
    real: &[Record],
    train_n: usize,
    val_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let needed = train_n + val_n + test_n;
    if needed > real.len() {
        return Err(Error::Size(format!(
            "split needs {needed} records, only {} available",
            real.len()
        )));
    }
    if let Some(r) = real.iter().find(|r| r.source != Source::Real) {
        return Err(Error::Input(format!("{} is not a real record", r.image_ref)));
    }
    let order = rng::sample_indices(&mut rng::rng(seed), real.len(), needed);
    let mut assignment = vec![None; real.len()];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = Some(if rank < train_n {
            Split::Train
        } else if rank < train_n + val_n {
            Split::Val
        } else {
            Split::Test
        });
    }
    let mut records = Vec::with_capacity(needed);
    for want in [Split::Train, Split::Val, Split::Test] {
        for (r, a) in real.iter().zip(&assignment) {
            if *a == Some(want) {
                records.push(Record {
                    split: want,
                    ..r.clone()
                });
            }
        }
    }
    let manifest = DatasetManifest::new(BASELINE_NAME, seed, records);
    manifest.validate()?;
    Ok(manifest)
}

fn mix_count(base: &DatasetManifest, spec: &MixSpec, pool: &[Record]) -> Result<usize> {
    let train_n = base.counts().train();
    let n = (spec.fraction * train_n as f64).round() as usize;
    if pool.len() < n {
        return Err(Error::Size(format!(
            "{} needs {n} synthetic records, pool has {}",
            spec.name(),
            pool.len()
        )));
    }
    if let Some(r) = pool.iter().find(|r| r.source != Source::Synthetic) {
        return Err(Error::Input(format!("{} in the synthetic pool is not synthetic", r.image_ref)));
    }
    Ok(n)
}

fn drawn_synthetic(pool: &[Record], n: usize, seed: u64) -> Vec<Record> {
    let mut picks = rng::sample_indices(&mut rng::rng(rng::derive_seed(seed, 2)), pool.len(), n);
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|i| Record {
            split: Split::Train,
            ..pool[i].clone()
        })
        .collect()
}

fn assemble(base: &DatasetManifest, name: String, seed: u64, train: Vec<Record>) -> Result<DatasetManifest> {
    let mut records = train;
    records.extend(base.split_records(Split::Val).cloned());
    records.extend(base.split_records(Split::Test).cloned());
    let m = DatasetManifest::new(name, seed, records);
    m.validate()?;
    Ok(m)
}

/// Replaces `round(fraction·train_n)` randomly chosen real training records
/// with synthetic ones. Training size is unchanged; val and test are copied.
pub fn make_replacement(
    base: &DatasetManifest,
    synth_pool: &[Record],
    spec: &MixSpec,
) -> Result<DatasetManifest> {
    let n = mix_count(base, spec, synth_pool)?;
    let train: Vec<&Record> = base.split_records(Split::Train).collect();
    let drop = rng::sample_indices(&mut rng::rng(rng::derive_seed(spec.seed, 1)), train.len(), n);
    let mut dropped = vec![false; train.len()];
    for i in drop {
        dropped[i] = true;
    }
    let mut kept: Vec<Record> = train
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(r, _)| (*r).clone())
        .collect();
    kept.extend(drawn_synthetic(synth_pool, n, spec.seed));
    assemble(base, spec.name(), spec.seed, kept)
}

/// Appends `round(fraction·train_n)` synthetic records, keeping every real
/// training record.
pub fn make_addition(
    base: &DatasetManifest,
    synth_pool: &[Record],
    spec: &MixSpec,
) -> Result<DatasetManifest> {
    let n = mix_count(base, spec, synth_pool)?;
    let mut train: Vec<Record> = base.split_records(Split::Train).cloned().collect();
    train.extend(drawn_synthetic(synth_pool, n, spec.seed));
    assemble(base, spec.name(), spec.seed, train)
}

/// Builds the six mixed datasets from a baseline.
pub fn build_all(base: &DatasetManifest, synth_pool: &[Record], seed: u64) -> Result<Vec<DatasetManifest>> {
    MixSpec::experiment_grid(seed)
        .iter()
        .map(|spec| match spec.mode {
            MixMode::Replace => make_replacement(base, synth_pool, spec),
            MixMode::Add => make_addition(base, synth_pool, spec),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reals(n: usize) -> Vec<Record> {
        (0..n)
            .map(|i| Record::new(format!("real/{i:05}.pgm"), Source::Real, Split::Unassigned, vec![BBox::new(i as f64, 1.0, 2.0, 3.0)]))
            .collect()
    }

    fn synths(n: usize) -> Vec<Record> {
        (0..n)
            .map(|i| Record::new(format!("syn/{i:05}.pgm"), Source::Synthetic, Split::Unassigned, vec![]))
            .collect()
    }

    #[test]
    fn exact_count_split_assigns_everything() {
        let m = split(&reals(10), 5, 3, 2, 7).unwrap();
        assert_eq!(m.records.len(), 10);
        let c = m.counts();
        assert_eq!((c.train_real, c.val, c.test), (5, 3, 2));
        assert!(m.records.iter().filter(|r| r.split != Split::Train).all(|r| r.source == Source::Real));
    }

    #[test]
    fn split_is_seed_deterministic() {
        assert_eq!(split(&reals(30), 10, 5, 5, 3).unwrap(), split(&reals(30), 10, 5, 5, 3).unwrap());
        assert_ne!(split(&reals(30), 10, 5, 5, 3).unwrap(), split(&reals(30), 10, 5, 5, 4).unwrap());
    }

    #[test]
    fn split_rejects_insufficient_records() {
        assert!(matches!(split(&reals(5), 3, 2, 1, 0), Err(Error::Size(_))));
    }

    #[test]
    fn desk_addition_of_ten_percent() {
        let base = split(&reals(1000), 500, 200, 300, 1).unwrap();
        let spec = MixSpec::new(MixMode::Add, 0.10, 1).unwrap();
        let m = make_addition(&base, &synths(60), &spec).unwrap();
        assert_eq!(m.counts().train(), 550);
        assert_eq!(m.name, "scc_add_10");
    }

    #[test]
    fn negligible_fraction_leaves_baseline_records() {
        let base = split(&reals(40), 20, 10, 10, 1).unwrap();
        let spec = MixSpec::new(MixMode::Replace, 0.001, 9).unwrap();
        let m = make_replacement(&base, &synths(5), &spec).unwrap();
        assert_eq!(m.records, base.records);
    }

    #[test]
    fn replacement_pool_too_small_is_a_size_error() {
        let base = split(&reals(40), 20, 10, 10, 1).unwrap();
        let spec = MixSpec::new(MixMode::Replace, 0.5, 9).unwrap();
        assert!(matches!(make_replacement(&base, &synths(9), &spec), Err(Error::Size(_))));
    }

    #[test]
    fn fraction_outside_open_interval_is_rejected() {
        assert!(MixSpec::new(MixMode::Add, 0.0, 0).is_err());
        assert!(MixSpec::new(MixMode::Add, 1.0, 0).is_err());
    }

    #[test]
    fn manifest_text_round_trips() {
        let base = split(&reals(12), 6, 3, 3, 5).unwrap();
        let text = base.to_text();
        let back = DatasetManifest::parse(&text, Path::new("m.txt")).unwrap();
        assert_eq!(back, base);
        let tampered = text.replace("train_real=6", "train_real=7");
        assert!(DatasetManifest::parse(&tampered, Path::new("m.txt")).is_err());
    }

    #[test]
    fn synthetic_in_val_fails_validation() {
        let m = DatasetManifest::new("x", 0, vec![Record::new("a", Source::Synthetic, Split::Val, vec![])]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn names_follow_experiment_grid() {
        assert_eq!(
            experiment_names(),
            ["scc_real", "scc_10", "scc_30", "scc_50", "scc_add_10", "scc_add_30", "scc_add_50"]
        );
    }
}
