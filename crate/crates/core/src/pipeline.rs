//! The end-to-end experiment as resumable stages over a run directory.
//!
//! ```text
//! <run>/
//!   config.toml  run.txt
//!   phantoms/    phantom_NNNNN_{bf,fl}.pgm, manifest.txt (generator truth)
//!   synthetic/   synth_NNNNN.pgm, sample_log.csv, review.txt
//!   diffusion/   epoch_NNNN_{raw,ema}.ckpt, fid.csv, loss.csv, selected.txt
//!   manifests/   real_labeled.txt, scc_real.txt, synthetic_labeled.txt, scc_*.txt
//!   detectors/   <dataset>.ckpt, <dataset>_train.csv
//!   metrics/     <dataset>.csv, <dataset>_pred.txt
//!   report.txt   report.csv
//! ```
//!
//! Every stage reads its inputs from disk, so stages can be rerun one at a
//! time. All randomness comes from `run.seed`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autolabel::{self, LabelRecord, Provenance, Threshold};
use crate::dataset::{self, DatasetManifest, Record, Source, Split, BASELINE_NAME};
use crate::detector::{self, Augment, Detector, DetectorConfig, Sample};
use crate::diffusion::{NoiseSchedule, SamplerConfig, SamplerKind, Spacing};
use crate::error::{Error, Result};
use crate::eval;
use crate::image::{BBox, Image};
use crate::nn::{read_checkpoint, write_checkpoint, CheckpointFile};
use crate::phantom::{self, PhantomConfig};
use crate::rng;
use crate::train::{self, Checkpoint, TrainConfig};
use crate::unet::{UNet, UNetConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 20240601 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub cells_min: usize,
    pub cells_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub eccentricity_max: f64,
    pub noise_sigma: f64,
    pub overlap: bool,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            count: 1000,
            width: 32,
            height: 32,
            cells_min: 1,
            cells_max: 4,
            radius_min: 3.0,
            radius_max: 5.0,
            eccentricity_max: 1.5,
            noise_sigma: 0.02,
            overlap: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutolabelSection {
    /// `"otsu"` or a fixed threshold such as `"0.4"`.
    pub threshold: String,
    pub min_area: usize,
}

impl Default for AutolabelSection {
    fn default() -> Self {
        AutolabelSection { threshold: "otsu".into(), min_area: autolabel::DEFAULT_MIN_AREA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train: 500, val: 200, test: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub block_channels: Vec<usize>,
    pub time_embed_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub fid_every_epochs: usize,
    pub fid_samples: usize,
    pub fid_sample_steps: usize,
    /// Validation images used as the FID reference (at most this many).
    pub fid_reference: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            block_channels: vec![8, 16, 32],
            time_embed_dim: 32,
            lr: 1e-3,
            batch_size: 4,
            epochs: 60,
            ema_decay: 0.9999,
            weight_decay: 0.01,
            fid_every_epochs: 10,
            fid_samples: 64,
            fid_sample_steps: 20,
            fid_reference: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub count: usize,
    pub batch: usize,
    pub steps_min: usize,
    pub steps_max: usize,
    pub sampler: String,
    pub spacing: String,
    pub eta: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            count: 250,
            batch: 16,
            steps_min: 35,
            steps_max: 40,
            sampler: "euler_ancestral".into(),
            spacing: "trailing".into(),
            eta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    /// Draft boxes for synthetic images must score above this.
    pub conf_thresh: f64,
}

impl Default for LabelSection {
    fn default() -> Self {
        LabelSection { conf_thresh: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub channels: Vec<usize>,
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub intensity_jitter: bool,
    pub mosaic: bool,
    pub mixup: bool,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        DetectorSection {
            channels: d.channels,
            conf_thresh: 0.05,
            nms_iou: d.nms_iou,
            epochs: 15,
            patience: d.patience,
            lr: d.lr,
            batch_size: d.batch_size,
            weight_decay: d.weight_decay,
            hflip: d.augment.hflip,
            vflip: d.augment.vflip,
            intensity_jitter: d.augment.intensity_jitter,
            mosaic: d.augment.mosaic,
            mixup: d.augment.mixup,
        }
    }
}

/// Whole-run configuration; a TOML file with one table per stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub phantom: PhantomSection,
    pub autolabel: AutolabelSection,
    pub split: SplitSection,
    pub diffusion: DiffusionSection,
    pub sample: SampleSection,
    pub label: LabelSection,
    pub detector: DetectorSection,
}

/// Stage indices for [`PipelineConfig::stage_seed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Phantoms = 1,
    Split = 2,
    Diffusion = 3,
    Sample = 4,
    Mix = 5,
    Detector = 6,
}

impl PipelineConfig {
    /// Parses TOML text, then applies `section.key=value` overrides whose
    /// values use TOML syntax (`diffusion.epochs=5`, `sample.sampler="ddim"`).
    pub fn parse(text: &str, overrides: &[String]) -> Result<PipelineConfig> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (path, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not section.key=value")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override {o:?} needs a section")))?;
            let value = parse_value(value.trim())?;
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                return Err(Error::Config(format!("{section} is not a table")));
            };
            t.insert(key.to_string(), value);
        }
        let cfg: PipelineConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        train::config_hash(&self.to_toml())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        rng::derive_seed(self.run.seed, stage as u64)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom_config().validate()?;
        self.threshold()?;
        self.unet_config().validate()?;
        self.train_config().validate()?;
        self.detector_config().validate()?;
        self.sampler_base()?;
        let s = &self.sample;
        if s.batch == 0 || s.steps_min == 0 || s.steps_min > s.steps_max {
            return Err(Error::Config("sample needs batch > 0 and 0 < steps_min <= steps_max".into()));
        }
        if self.split.train == 0 {
            return Err(Error::Config("split.train must be positive".into()));
        }
        Ok(())
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        let p = &self.phantom;
        PhantomConfig {
            width: p.width,
            height: p.height,
            cell_count_range: (p.cells_min, p.cells_max),
            radius_range: (p.radius_min, p.radius_max),
            eccentricity_range: (1.0, p.eccentricity_max),
            noise_sigma: p.noise_sigma,
            overlap_allowed: p.overlap,
            seed: self.stage_seed(Stage::Phantoms),
            ..PhantomConfig::default()
        }
    }

    pub fn threshold(&self) -> Result<Threshold> {
        match self.autolabel.threshold.as_str() {
            "otsu" => Ok(Threshold::Otsu),
            v => v
                .parse::<f64>()
                .map(Threshold::Fixed)
                .map_err(|_| Error::Config(format!("autolabel.threshold {v:?} is neither \"otsu\" nor a number"))),
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            block_channels: self.diffusion.block_channels.clone(),
            time_embed_dim: self.diffusion.time_embed_dim,
            attention: false,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = &self.diffusion;
        TrainConfig {
            lr: d.lr,
            batch_size: d.batch_size,
            epochs: d.epochs,
            ema_decay: d.ema_decay,
            fid_every_epochs: d.fid_every_epochs,
            fid_samples: d.fid_samples,
            fid_sampler: SamplerConfig { kind: SamplerKind::Ddim, steps: d.fid_sample_steps, eta: 0.0, spacing: Spacing::Trailing },
            weight_decay: d.weight_decay,
            seed: self.stage_seed(Stage::Diffusion),
        }
    }

    fn sampler_base(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            kind: self.sample.sampler.parse()?,
            steps: self.sample.steps_max,
            eta: self.sample.eta,
            spacing: self.sample.spacing.parse()?,
        })
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let d = &self.detector;
        DetectorConfig {
            channels: d.channels.clone(),
            conf_thresh: d.conf_thresh,
            nms_iou: d.nms_iou,
            epochs: d.epochs,
            patience: d.patience,
            lr: d.lr,
            batch_size: d.batch_size,
            weight_decay: d.weight_decay,
            augment: Augment {
                hflip: d.hflip,
                vflip: d.vflip,
                intensity_jitter: d.intensity_jitter,
                mosaic: d.mosaic,
                mixup: d.mixup,
            },
        }
    }
}

fn parse_value(text: &str) -> Result<toml::Value> {
    let doc: toml::Table = format!("v = {text}")
        .parse()
        .or_else(|_| format!("v = {:?}", text).parse())
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok(doc["v"].clone())
}

/// A run directory plus its configuration.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub config: PipelineConfig,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("{} is missing; run the earlier stage first", path.display())),
        _ => Error::io(path, e),
    })
}

impl Run {
    /// Creates (or reuses) `dir`, writing `config.toml` and `run.txt`.
    pub fn create(dir: impl Into<PathBuf>, config: PipelineConfig) -> Result<Run> {
        let run = Run { dir: dir.into(), config };
        let cfg_path = run.dir.join("config.toml");
        write(&cfg_path, &run.config.to_toml())?;
        write(&run.dir.join("run.txt"), &run.record())?;
        Ok(run)
    }

    /// Opens an existing run using its recorded configuration.
    pub fn open(dir: impl Into<PathBuf>, overrides: &[String]) -> Result<Run> {
        let dir = dir.into();
        let config = PipelineConfig::load(&dir.join("config.toml"), overrides)?;
        if !overrides.is_empty() {
            return Run::create(dir, config);
        }
        Ok(Run { dir, config })
    }

    /// Reproducibility record: version, config hash and every stage seed.
    pub fn record(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "version={VERSION}");
        let _ = writeln!(out, "config_hash={}", c.hash());
        let _ = writeln!(out, "seed={}", c.run.seed);
        for (name, st) in [
            ("phantoms", Stage::Phantoms),
            ("split", Stage::Split),
            ("diffusion", Stage::Diffusion),
            ("sample", Stage::Sample),
            ("mix", Stage::Mix),
            ("detector", Stage::Detector),
        ] {
            let _ = writeln!(out, "seed.{name}={}", c.stage_seed(st));
        }
        out
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn manifest_path(&self, name: &str) -> PathBuf {
        self.dir.join("manifests").join(format!("{name}.txt"))
    }

    pub fn load_manifest(&self, name: &str) -> Result<DatasetManifest> {
        let path = self.manifest_path(name);
        read(&path)?;
        DatasetManifest::load(&path)
    }

    /// Stage: phantom images with generator-truth boxes.
    pub fn phantom_gen(&self) -> Result<DatasetManifest> {
        let n = self.config.phantom.count;
        if n == 0 {
            return Err(Error::Config("phantom.count must be positive".into()));
        }
        phantom::generate_dataset(&self.config.phantom_config(), n, &self.path("phantoms"))
    }

    /// Stage: boxes from the fluorescence channel of every phantom.
    pub fn autolabel(&self) -> Result<DatasetManifest> {
        let src = self.path("phantoms/manifest.txt");
        read(&src)?;
        let phantoms = DatasetManifest::load(&src)?;
        let method = self.config.threshold()?;
        let mut records = Vec::with_capacity(phantoms.records.len());
        for r in &phantoms.records {
            let fl = Image::load_pgm(&DatasetManifest::resolve(&src, &phantom::fluorescence_ref(&r.image_ref)))?;
            let boxes = autolabel::label_fluorescence(&fl, method, self.config.autolabel.min_area);
            records.push(Record::new(format!("../phantoms/{}", r.image_ref), Source::Real, Split::Unassigned, boxes));
        }
        let m = DatasetManifest::new("real_labeled", phantoms.seed, records);
        m.save(&self.manifest_path("real_labeled"))?;
        Ok(m)
    }

    /// Stage: train/val/test assignment of the labeled real images.
    pub fn split(&self) -> Result<DatasetManifest> {
        let labeled = self.load_manifest("real_labeled")?;
        let s = &self.config.split;
        let m = dataset::split(&labeled.records, s.train, s.val, s.test, self.config.stage_seed(Stage::Split))?;
        m.save(&self.manifest_path(BASELINE_NAME))?;
        Ok(m)
    }

    fn split_images(&self, manifest: &DatasetManifest, split: Split) -> Result<Vec<Image>> {
        let path = self.manifest_path(&manifest.name);
        manifest
            .split_records(split)
            .map(|r| Image::load_pgm(&DatasetManifest::resolve(&path, &r.image_ref)))
            .collect()
    }

    /// Stage: diffusion training on the real training images, FID against
    /// validation images, and checkpoint selection.
    pub fn train_diffusion(&self) -> Result<train::TrainOutcome> {
        let base = self.load_manifest(BASELINE_NAME)?;
        let images = self.split_images(&base, Split::Train)?;
        let mut reference = self.split_images(&base, Split::Val)?;
        reference.truncate(self.config.diffusion.fid_reference);
        let net = UNet::new(self.config.unet_config())?;
        let dir = self.path("diffusion");
        let hash = self.config.hash();
        let outcome = train::train(
            &images,
            &net,
            &self.config.train_config(),
            &NoiseSchedule::default(),
            &reference,
            |ck| ck.save(&dir, &hash).map(|_| ()),
        )?;
        let mut fid = String::from("epoch,fid\n");
        let _ = writeln!(fid, "0,{:.6}", outcome.initial_fid);
        for p in &outcome.fid_curve {
            let _ = writeln!(fid, "{},{:.6}", p.epoch, p.fid);
        }
        write(&dir.join("fid.csv"), &fid)?;
        let mut loss = String::from("step,loss\n");
        for (i, l) in outcome.loss_curve.iter().enumerate() {
            let _ = writeln!(loss, "{},{:.8}", i + 1, l);
        }
        write(&dir.join("loss.csv"), &loss)?;
        let selected = if outcome.fid_curve.is_empty() { 0 } else { train::select_model(&outcome.fid_curve)? };
        write(&dir.join("selected.txt"), &format!("{selected}\n"))?;
        Ok(outcome)
    }

    /// FID values from `diffusion/fid.csv`: the initial one, then the curve.
    pub fn fid_history(&self) -> Result<(f64, Vec<train::FidPoint>)> {
        let path = self.path("diffusion/fid.csv");
        let text = read(&path)?;
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            let (e, f) = line.split_once(',').ok_or_else(|| Error::format(&path, "expected epoch,fid"))?;
            let epoch = e.parse().map_err(|_| Error::format(&path, format!("bad epoch {e:?}")))?;
            let fid = f.parse().map_err(|_| Error::format(&path, format!("bad fid {f:?}")))?;
            rows.push(train::FidPoint { epoch, fid });
        }
        let first = rows.first().copied().ok_or_else(|| Error::format(&path, "no rows"))?;
        Ok((first.fid, rows[1..].to_vec()))
    }

    pub fn selected_epoch(&self) -> Result<usize> {
        let path = self.path("diffusion/selected.txt");
        read(&path)?.trim().parse().map_err(|_| Error::format(&path, "expected an epoch number"))
    }

    /// Stage: synthetic images from the selected checkpoint's EMA weights,
    /// drawn in batches whose step count is uniform in the configured range.
    pub fn sample(&self) -> Result<Vec<SampleBatch>> {
        let net = UNet::new(self.config.unet_config())?;
        let ck = Checkpoint::load(&self.path("diffusion"), self.selected_epoch()?)?;
        let base = self.config.sampler_base()?;
        let s = &self.config.sample;
        let p = &self.config.phantom;
        let mut rng = rng::rng(self.config.stage_seed(Stage::Sample));
        let dir = self.path("synthetic");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let schedule = NoiseSchedule::default();
        let mut log = String::from("batch,first,size,steps,seed\n");
        let mut batches = Vec::new();
        let mut first = 0;
        while first < s.count {
            let size = s.batch.min(s.count - first);
            let steps = rng.gen_range(s.steps_min..=s.steps_max);
            let seed = rng.gen::<u64>();
            let sampler = SamplerConfig { steps, ..base };
            let images = train::generate(&net, &ck.ema, &sampler, &schedule, size, (p.width, p.height), seed)?;
            for (k, im) in images.iter().enumerate() {
                im.save_pgm(&dir.join(format!("synth_{:05}.pgm", first + k)))?;
            }
            let b = SampleBatch { batch: batches.len(), first, size, steps, seed };
            let _ = writeln!(log, "{},{},{},{},{}", b.batch, b.first, b.size, b.steps, b.seed);
            batches.push(b);
            first += size;
        }
        write(&dir.join("sample_log.csv"), &log)?;
        Ok(batches)
    }

    fn detector_checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join("detectors").join(format!("{name}.ckpt"))
    }

    pub fn load_detector(&self, name: &str) -> Result<Detector> {
        let path = self.detector_checkpoint(name);
        read_detector(&path, &self.config.detector_config())
    }

    fn samples(&self, manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
        let path = self.manifest_path(&manifest.name);
        manifest
            .split_records(split)
            .map(|r| {
                Ok(Sample {
                    image: Image::load_pgm(&DatasetManifest::resolve(&path, &r.image_ref))?,
                    boxes: r.boxes.clone(),
                })
            })
            .collect()
    }

    /// Stage: trains the detector on one dataset, early-stopping on its
    /// validation split.
    pub fn train_detector(&self, name: &str) -> Result<detector::DetectorOutcome> {
        let m = self.load_manifest(name)?;
        let train_set = self.samples(&m, Split::Train)?;
        let val = self.samples(&m, Split::Val)?;
        let cfg = self.config.detector_config();
        let out = detector::train_detector(&train_set, &val, &cfg, self.config.stage_seed(Stage::Detector))?;
        let mut meta = BTreeMap::new();
        meta.insert("dataset".to_string(), name.to_string());
        meta.insert("config_hash".to_string(), self.config.hash());
        meta.insert("best_epoch".to_string(), out.best_epoch.to_string());
        meta.insert("channels".to_string(), join(&cfg.channels));
        write_checkpoint(
            &self.detector_checkpoint(name),
            &CheckpointFile { metadata: meta, tensors: out.detector.params.clone() },
        )?;
        let mut log = String::from("epoch,loss,val_map50\n");
        for (i, l) in out.loss_curve.iter().enumerate() {
            let v = out.val_map50.get(i).map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(log, "{},{:.8},{}", i + 1, l, v);
        }
        write(&self.dir.join("detectors").join(format!("{name}_train.csv")), &log)?;
        Ok(out)
    }

    /// Stage: model-assisted labels for the synthetic images using the
    /// baseline detector. Draft boxes go to `synthetic/review.txt`; edits in
    /// `synthetic/review_edits.txt`, if present, replace them.
    pub fn label_synthetic(&self) -> Result<DatasetManifest> {
        let det = self.load_detector(BASELINE_NAME)?;
        let dir = self.path("synthetic");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("synth_") && n.ends_with(".pgm"))
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(Error::Config(format!("no synthetic images in {}; run the sample stage first", dir.display())));
        }
        let images = ids
            .iter()
            .map(|id| Ok((id.clone(), Image::load_pgm(&dir.join(id))?)))
            .collect::<Result<Vec<_>>>()?;
        let drafts = autolabel::model_assisted_label(Some(&det), &images, self.config.label.conf_thresh)?;
        autolabel::write_review(&dir.join("review.txt"), &drafts)?;
        let edits_path = dir.join("review_edits.txt");
        let labels: Vec<LabelRecord> = if edits_path.exists() {
            let edits = autolabel::parse_review(&read(&edits_path)?, &edits_path)?;
            autolabel::apply_review(&drafts, &edits)
        } else {
            drafts
                .into_iter()
                .map(|r| LabelRecord { provenance: Provenance::Reviewed, ..r })
                .collect()
        };
        let records = labels
            .into_iter()
            .map(|l| {
                let boxes = l.boxes.into_iter().map(|b| BBox { score: None, ..b }).collect();
                Record::new(format!("../synthetic/{}", l.image_id), Source::Synthetic, Split::Unassigned, boxes)
            })
            .collect();
        let m = DatasetManifest::new("synthetic_labeled", self.config.stage_seed(Stage::Sample), records);
        m.save(&self.manifest_path("synthetic_labeled"))?;
        Ok(m)
    }

    /// Stage: the six replacement / addition datasets.
    pub fn mix(&self) -> Result<Vec<DatasetManifest>> {
        let base = self.load_manifest(BASELINE_NAME)?;
        let synth = self.load_manifest("synthetic_labeled")?;
        let all = dataset::build_all(&base, &synth.records, self.config.stage_seed(Stage::Mix))?;
        for m in &all {
            m.save(&self.manifest_path(&m.name))?;
        }
        Ok(all)
    }

    /// Stage: test-split metrics for one dataset's detector.
    pub fn evaluate(&self, name: &str) -> Result<eval::EvalResult> {
        let m = self.load_manifest(name)?;
        let det = self.load_detector(name)?;
        let test = self.samples(&m, Split::Test)?;
        let refs: Vec<&Record> = m.split_records(Split::Test).collect();
        let images: Vec<Image> = test.iter().map(|s| s.image.clone()).collect();
        let found = det.detect_all(&images)?;
        let mut preds = BTreeMap::new();
        let mut gts = BTreeMap::new();
        let mut pred_records = Vec::new();
        for ((r, s), p) in refs.iter().zip(&test).zip(found) {
            preds.insert(r.image_ref.clone(), p.clone());
            gts.insert(r.image_ref.clone(), s.boxes.clone());
            pred_records.push(Record::new(r.image_ref.clone(), r.source, Split::Test, p));
        }
        let result = eval::map_suite(&preds, &gts)?;
        let metrics = self.dir.join("metrics");
        DatasetManifest::new(format!("{name}_pred"), m.seed, pred_records)
            .save(&metrics.join(format!("{name}_pred.txt")))?;
        write(&metrics.join(format!("{name}.csv")), &metrics_csv(&[(name.to_string(), result.clone())]))?;
        Ok(result)
    }

    /// Stage: one table over every dataset with metrics on disk, in the
    /// experiment's order.
    pub fn report(&self) -> Result<Vec<(String, eval::EvalResult)>> {
        let mut rows = Vec::new();
        for name in dataset::experiment_names() {
            let path = self.dir.join("metrics").join(format!("{name}.csv"));
            if path.exists() {
                rows.push((name, read_metrics(&path)?));
            }
        }
        if rows.is_empty() {
            return Err(Error::Config("no evaluated datasets; run evaluate first".into()));
        }
        write(&self.path("report.txt"), &report_table(&rows))?;
        write(&self.path("report.csv"), &metrics_csv(&rows))?;
        Ok(rows)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<Vec<(String, eval::EvalResult)>> {
        self.phantom_gen()?;
        self.autolabel()?;
        self.split()?;
        self.train_diffusion()?;
        self.sample()?;
        self.train_detector(BASELINE_NAME)?;
        self.label_synthetic()?;
        self.mix()?;
        for name in dataset::experiment_names() {
            if name != BASELINE_NAME {
                self.train_detector(&name)?;
            }
        }
        for name in dataset::experiment_names() {
            self.evaluate(&name)?;
        }
        self.report()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleBatch {
    pub batch: usize,
    pub first: usize,
    pub size: usize,
    pub steps: usize,
    pub seed: u64,
}

fn join(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

/// Loads detector weights; the stored channel list must match `config`.
pub fn read_detector(path: &Path, config: &DetectorConfig) -> Result<Detector> {
    if !path.exists() {
        return Err(Error::Config(format!("{} is missing; train that detector first", path.display())));
    }
    let file = read_checkpoint(path)?;
    if let Some(ch) = file.metadata.get("channels") {
        if *ch != join(&config.channels) {
            return Err(Error::Config(format!(
                "{} was trained with channels {ch}, config has {}",
                path.display(),
                join(&config.channels)
            )));
        }
    }
    detector::init_params(config, 0)?.check_compatible(&file.tensors)?;
    Ok(Detector { config: config.clone(), params: file.tensors })
}

/// `dataset,map50,map75,map5095` with 6 decimals.
pub fn metrics_csv(rows: &[(String, eval::EvalResult)]) -> String {
    let mut out = String::from("dataset,map50,map75,map5095\n");
    for (name, r) in rows {
        let _ = writeln!(out, "{name},{:.6},{:.6},{:.6}", r.map50, r.map75, r.map5095);
    }
    out
}

fn read_metrics(path: &Path) -> Result<eval::EvalResult> {
    let text = read(path)?;
    let line = text.lines().nth(1).ok_or_else(|| Error::format(path, "no metrics row"))?;
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 4 {
        return Err(Error::format(path, "expected dataset,map50,map75,map5095"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
    Ok(eval::EvalResult {
        map50: num(f[1])?,
        map75: num(f[2])?,
        map5095: num(f[3])?,
        per_threshold: Vec::new(),
        pr50: Vec::new(),
    })
}

/// Fixed-width table with 4 decimals, one row per dataset.
pub fn report_table(rows: &[(String, eval::EvalResult)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>10}", "dataset", "mAP@50", "mAP@75", "mAP@50:95");
    for (name, r) in rows {
        let _ = writeln!(out, "{:<12} {:>8.4} {:>8.4} {:>10.4}", name, r.map50, r.map75, r.map5095);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(PipelineConfig::parse("", &[]).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = PipelineConfig::parse(
            "[diffusion]\nepochs = 3\n",
            &["diffusion.block_channels=[4,8]".into(), "sample.sampler=ddim".into(), "run.seed=9".into()],
        )
        .unwrap();
        assert_eq!(c.diffusion.epochs, 3);
        assert_eq!(c.diffusion.block_channels, vec![4, 8]);
        assert_eq!(c.sample.sampler, "ddim");
        assert_eq!(c.run.seed, 9);
        assert!(matches!(PipelineConfig::parse("[diffusion]\nepoch = 3\n", &[]), Err(Error::Config(_))));
        assert!(PipelineConfig::parse("", &["detector.mixup=true".into()]).is_err());
        assert!(PipelineConfig::parse("", &["sample.steps_min=41".into()]).is_err());
    }

    #[test]
    fn serialized_config_round_trips() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&c.to_toml(), &[]).unwrap(), c);
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn report_table_has_four_decimals() {
        let r = eval::EvalResult { map50: 0.89471, map75: 0.5, map5095: 0.123449, per_threshold: vec![], pr50: vec![] };
        let t = report_table(&[("scc_real".into(), r)]);
        assert!(t.contains("scc_real       0.8947   0.5000     0.1234"), "{t}");
    }
}
